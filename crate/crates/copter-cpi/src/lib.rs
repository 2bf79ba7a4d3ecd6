//! Control-authority analysis and control-performance monitoring for
//! multicopters: attainable-control-set geometry, degree of
//! controllability, controller-specific performance thresholds, disturbance
//! estimation, and a switching supervisor that degrades control gracefully
//! under off-nominal conditions.

pub mod control;
pub mod ctrlgeom;
pub mod estimator;
pub mod perf;
pub mod supervisor;
pub mod threshold;
pub mod vehicle;
