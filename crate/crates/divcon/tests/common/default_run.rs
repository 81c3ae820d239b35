use std::path::PathBuf;
use std::sync::OnceLock;

use divcon::config::ExperimentConfig;
use divcon::harness::{MetricReport, Pipeline};

/// Output directory of the cached default-config experiment. `DIVCON_DEFAULT_RUN`
/// points the tests at an existing run instead.
pub fn default_run_dir() -> PathBuf {
    std::env::var_os("DIVCON_DEFAULT_RUN")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("default-run"))
}

/// The default experiment, run once per test binary; later binaries reuse the
/// cached stages.
pub fn default_run() -> &'static (Pipeline, MetricReport) {
    static RUN: OnceLock<(Pipeline, MetricReport)> = OnceLock::new();
    RUN.get_or_init(|| {
        let mut p = Pipeline::new(ExperimentConfig::default(), default_run_dir()).unwrap();
        p.verbose = true;
        let (_, report) = p.run_experiment().unwrap();
        (p, report)
    })
}
