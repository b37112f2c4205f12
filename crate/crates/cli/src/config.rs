use std::path::Path;

use cyclodet_core::config::ProjectConfig;
use cyclodet_core::project::ProjectLayout;

use crate::args::Cli;
use crate::{usage, Failure};

/// Reads a TOML project file. A relative `data_dir` is taken relative to the file.
pub fn load_config(path: &Path) -> Result<ProjectConfig, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    let mut cfg: ProjectConfig =
        toml::from_str(&text).map_err(|e| usage(format!("config {}: {}", path.display(), e.message())))?;
    if cfg.data_dir.is_relative() {
        if let Some(dir) = path.parent() {
            cfg.data_dir = dir.join(&cfg.data_dir);
        }
    }
    Ok(cfg)
}

pub struct Context {
    pub cfg: ProjectConfig,
    pub layout: ProjectLayout,
}

impl Context {
    /// Config file, then global flag overrides, then validation.
    pub fn from_cli(cli: &Cli) -> Result<Self, Failure> {
        let mut cfg = match &cli.config {
            Some(path) => load_config(path)?,
            None => ProjectConfig { data_dir: ".".into(), ..ProjectConfig::default() },
        };
        if let Some(dir) = &cli.data_dir {
            cfg.data_dir = dir.clone();
        }
        if let Some(seed) = cli.seed {
            cfg.train.seed = seed;
            cfg.synth.seed = seed;
            cfg.labels.split_seed = seed;
        }
        cfg.validate().map_err(|e| usage(format!("invalid config: {e}")))?;
        let layout = ProjectLayout::new(&cfg.data_dir);
        Ok(Self { cfg, layout })
    }
}
