//! Experiment recipes over the muwarm core: grid search, muTransfer,
//! warmstarted transfer, shrink ablation, coordinate checks and successive
//! warmstarting, plus SVG/summary reporting.

pub mod experiments;
pub mod report;
