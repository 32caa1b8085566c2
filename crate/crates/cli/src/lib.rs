//! Library side of the `mdplab` runner: configuration parsing, experiment
//! dispatch and output writing.

pub mod app;
pub mod config;
pub mod run;

use std::path::PathBuf;

pub use config::{parse_config, ConfigError, RunConfig, Threads};
pub use run::{execute, write_outputs, Output, RunError};

/// Command-line overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub threads: Option<Threads>,
}

/// Thread count: flag, then `MDPLAB_THREADS`, then the config, then `auto`.
pub fn thread_count(cli: Option<Threads>, env: Option<&str>, cfg: Option<Threads>) -> Result<usize, ConfigError> {
    let from_env = match env {
        Some(s) => Some(s.parse::<Threads>().map_err(|reason| ConfigError {
            key: "MDPLAB_THREADS".into(),
            reason,
        })?),
        None => None,
    };
    Ok(cli
        .or(from_env)
        .or(cfg)
        .map_or_else(|| Threads::Auto(config::AutoThreads::Auto).resolve(), Threads::resolve))
}

/// Parse, resolve and run one subcommand; returns the summary lines.
pub fn run_subcommand(subcommand: &str, config_text: &str, ov: &Overrides) -> Result<Vec<String>, RunError> {
    let mut cfg = parse_config(config_text)?;
    if let Some(s) = ov.seed {
        cfg.seed = s;
    }
    if let Some(d) = &ov.out_dir {
        cfg.out_dir = d.clone();
    }
    let cfg = cfg.resolve(subcommand)?;
    let env = std::env::var("MDPLAB_THREADS").ok();
    let threads = thread_count(ov.threads, env.as_deref(), cfg.threads)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| RunError::Runtime(e.to_string()))?;
    let outputs = pool.install(|| execute(&cfg))?;
    write_outputs(&cfg, subcommand, &outputs, &cfg.out_dir)?;
    Ok(outputs.iter().map(|o| run::summary_line(&cfg.out_dir, o)).collect())
}
