//! One module per benchmark task; each exposes `run(&BenchConfig)`.

pub mod gradcheck;
pub mod mixture;
pub mod oracle;
pub mod paths;
pub mod reweight;
pub mod trilevel;
