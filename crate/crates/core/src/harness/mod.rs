//! Experiment orchestration: splits, benchmarks, grid search and the
//! on-disk formats shared by the CLI and the browser demo.

pub mod bench;
pub mod gridsearch;
pub mod io;
pub mod split;

pub use bench::{run_benchmark, BenchOptions, BenchmarkReport, MetricsReport, Method};
pub use gridsearch::{grid_search, SearchReport, SearchSpace};
pub use split::{split, SplitIndices, SplitMode, SplitSpec};
