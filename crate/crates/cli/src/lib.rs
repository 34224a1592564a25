//! Orchestration of the ghost-couette studies: configuration, the study
//! pipelines, and report emission.

pub mod config;
pub mod fit;
pub mod plot;
pub mod report;
pub mod studies;

use anyhow::{Context, Result};

pub use config::{Command, ConfigError, Model, Overrides, RunConfig};
pub use fit::{fit_slope, SlopeFit};
pub use report::{CriterionOutcome, Study, StudyReport};

pub const WORKERS_ENV: &str = "GHOST_COUETTE_WORKERS";

/// Worker count from the flag, else from the environment.
pub fn resolve_workers(flag: Option<usize>) -> Result<Option<usize>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var(WORKERS_ENV) {
        Ok(v) => Ok(Some(v.trim().parse().with_context(|| format!("{WORKERS_ENV} must be a non-negative integer, got {v:?}"))?)),
        Err(_) => Ok(None),
    }
}

/// Runs the pipeline selected by `config.command` without writing anything.
pub fn compute(config: &RunConfig) -> Result<Study> {
    config.validate()?;
    match config.command {
        Command::Operator => studies::operator_study(config),
        Command::Transport => studies::transport_study(config),
        Command::Hydro => studies::hydro_study(config),
        Command::Milne => studies::milne_study(config),
        Command::Expand => studies::expand_study(config),
        Command::Kinetic => studies::kinetic_study(config),
        Command::Converge => studies::converge_study(config),
        Command::Ghost => studies::ghost_study(config),
    }
}

/// Validates, computes on a pool of `config.workers` threads, and writes a
/// new run directory under `config.output_dir`.
pub fn run(config: &RunConfig) -> Result<StudyReport> {
    config.validate()?;
    let toml = config.to_toml()?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if config.workers > 0 {
        builder = builder.num_threads(config.workers);
    }
    let pool = builder.build().context("building the worker pool")?;
    let study = pool.install(|| compute(config))?;
    report::write_study(&config.output_dir, config.command.name(), &toml, study)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn invalid_config_stops_before_compute() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig { command: Command::Ghost, output_dir: dir.path().join("out"), ..Default::default() };
        cfg.ghost.c_const = 0.0;
        let err = run(&cfg).unwrap_err();
        let ce = err.downcast_ref::<ConfigError>().expect("configuration error");
        assert_eq!(ce.field, "ghost.c_const");
        assert!(!dir.path().join("out").exists());
    }

    #[test]
    fn hydro_run_writes_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig { command: Command::Hydro, output_dir: dir.path().to_path_buf(), ..Default::default() };
        cfg.hydro.deltas = vec![0.0, 0.05, 0.1];
        cfg.hydro.ny = 65;
        let rep = run(&cfg).unwrap();
        let table = rep.tables.iter().find(|t| t.name == "hydro_deviation").unwrap();
        let rest = table.rows.iter().find(|r| r[0] == 0.0).unwrap();
        assert!(rest[1].abs() < 1e-12, "delta = 0 must reproduce the laminar profile");
        for f in ["config.toml", "summary.json", "hydro_deviation.csv", "hydro.svg"] {
            assert!(rep.run_dir.join(f).exists(), "{f}");
        }
        assert_eq!(rep.summary.criteria[0].id, 4);
    }
}
