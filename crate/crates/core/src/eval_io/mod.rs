//! Image files, datasets, quality metrics and the evaluation report.

pub mod dataset;
pub mod image;
pub mod metrics;
pub mod report;
