pub mod backbone;
pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod corruptions;
pub mod dataset;
pub mod error;
pub mod experiments;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod prompting;
pub mod recovery;
pub mod resources;
pub mod schedule;
pub mod segmenter;
pub mod training;
