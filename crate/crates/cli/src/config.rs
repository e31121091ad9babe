//! Pipeline configuration file: one TOML document with `[network]`,
//! `[train]`, `[crf]`, `[sweep]` and `[paths]` tables. Every key is optional.

use std::fs;
use std::path::{Path, PathBuf};

use mvs_core::network::NetworkConfig;
use mvs_core::refine::CrfParams;
use mvs_core::sweep::DEFAULT_MEMORY_BUDGET;
use mvs_core::training::TrainConfig;
use mvs_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// Environment variable naming the config file used when `--config` is absent.
pub const CONFIG_ENV: &str = "MVS_CONFIG";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepOptions {
    /// Neighbor views per reference.
    pub neighbors: usize,
    /// Disparity levels D.
    pub levels: usize,
    /// Quantile of sparse-point disparities used as the maximum disparity.
    pub quantile: f64,
    /// Fixed maximum disparity; overrides the sparse-point estimate.
    pub max_disparity: Option<f64>,
    pub memory_budget: u64,
    /// Network window and kept core for tiled inference, pixels.
    pub tile: usize,
    pub core: usize,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            neighbors: 4,
            levels: 100,
            quantile: 1.0,
            max_disparity: None,
            memory_budget: DEFAULT_MEMORY_BUDGET,
            tile: 128,
            core: 64,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Weights of the fixed semantic extractor.
    pub extractor: Option<PathBuf>,
    /// Network checkpoint used by `predict` when no flag names one.
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub network: NetworkConfig,
    /// Training keys as written; stage defaults are filled in by
    /// [`PipelineConfig::train_config`] once the stage is known.
    pub train: toml::Table,
    pub crf: CrfParams,
    pub sweep: SweepOptions,
    pub paths: Paths,
}

impl PipelineConfig {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut c: PipelineConfig = toml::from_str(text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string().trim_end().to_string(),
        })?;
        // Relative paths are relative to the config file.
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut c.paths.extractor, &mut c.paths.checkpoint].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        // D appears in two tables; a file that sets only one sets both.
        let doc: toml::Table = toml::from_str(text).unwrap_or_default();
        let set = |table: &str, key: &str| doc.get(table).and_then(|t| t.get(key)).is_some();
        match (set("network", "disparity_levels"), set("sweep", "levels")) {
            (true, false) => c.sweep.levels = c.network.disparity_levels,
            (false, _) => c.network.disparity_levels = c.sweep.levels,
            (true, true) => {}
        }
        c.train_config(None)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
        Self::parse(&text, path)
    }

    /// `explicit`, else `$MVS_CONFIG`, else built-in defaults.
    pub fn resolve(explicit: Option<&Path>) -> Result<Self> {
        match explicit {
            Some(p) => Self::load(p),
            None => match std::env::var_os(CONFIG_ENV) {
                Some(p) if !p.is_empty() => Self::load(Path::new(&p)),
                _ => Ok(Self::default()),
            },
        }
    }

    /// Training settings for `stage` (or the file's stage, else 1): the
    /// stage defaults overlaid with the keys of the `[train]` table.
    pub fn train_config(&self, stage: Option<u8>) -> Result<TrainConfig> {
        let file_stage = match self.train.get("stage") {
            Some(v) => Some(v.as_integer().and_then(|s| u8::try_from(s).ok()).ok_or_else(|| {
                Error::Config(format!("train.stage must be 1 or 2, got {v}"))
            })?),
            None => None,
        };
        let stage = stage.or(file_stage).unwrap_or(1);
        let base = if stage == 2 { TrainConfig::stage2() } else { TrainConfig::stage1() };
        let mut table = toml::Table::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
        for (k, v) in &self.train {
            table.insert(k.clone(), v.clone());
        }
        table.insert("stage".into(), toml::Value::Integer(stage.into()));
        let config: TrainConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(format!("[train]: {}", e.message())))?;
        config.validate()?;
        Ok(config)
    }

    /// Cross-field checks run once flags have been applied.
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.crf.validate()?;
        let s = &self.sweep;
        if s.levels != self.network.disparity_levels {
            return Err(Error::Config(format!(
                "sweep uses {} disparity levels but the network has {}",
                s.levels, self.network.disparity_levels
            )));
        }
        if s.neighbors == 0 {
            return Err(Error::Config("neighbor count must be at least 1".into()));
        }
        if !(s.quantile > 0.0 && s.quantile <= 1.0) {
            return Err(Error::Config(format!("quantile must lie in (0, 1], got {}", s.quantile)));
        }
        if let Some(d) = s.max_disparity {
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::Config(format!("maximum disparity must be positive, got {d}")));
            }
        }
        if s.core == 0 || s.core > s.tile {
            return Err(Error::Config(format!("tile core {} must lie in 1..={}", s.core, s.tile)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_default() {
        let c = PipelineConfig::parse("", Path::new("c.toml")).unwrap();
        assert_eq!(c, PipelineConfig::default());
        assert_eq!(c.sweep.levels, 100);
        assert_eq!(c.sweep.neighbors, 4);
        c.validate().unwrap();
    }

    #[test]
    fn levels_follow_either_table() {
        let c = PipelineConfig::parse("[sweep]\nlevels = 8\n", Path::new("c")).unwrap();
        assert_eq!(c.network.disparity_levels, 8);
        let c = PipelineConfig::parse("[network]\ndisparity_levels = 16\n", Path::new("c")).unwrap();
        assert_eq!(c.sweep.levels, 16);
        let c = PipelineConfig::parse("[network]\ndisparity_levels = 16\n[sweep]\nlevels = 8\n", Path::new("c")).unwrap();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn stage_defaults_underlie_file_keys() {
        let c = PipelineConfig::parse("[train]\nseed = 7\n", Path::new("c")).unwrap();
        let t2 = c.train_config(Some(2)).unwrap();
        assert_eq!((t2.stage, t2.seed, t2.learning_rate, t2.grad_clip), (2, 7, 1e-6, 0.1));
        let t1 = c.train_config(None).unwrap();
        assert_eq!((t1.stage, t1.learning_rate, t1.grad_clip), (1, 1e-5, 1.0));
        let c = PipelineConfig::parse("[train]\nstage = 2\nlearning_rate = 0.5\n", Path::new("c")).unwrap();
        let t = c.train_config(None).unwrap();
        assert_eq!((t.stage, t.learning_rate), (2, 0.5));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(PipelineConfig::parse("[sweep]\nlevel = 8\n", Path::new("c")).is_err());
        assert!(PipelineConfig::parse("[train]\nlr = 1.0\n", Path::new("c")).is_err());
        assert!(PipelineConfig::parse("[train]\nstage = 3\n", Path::new("c")).is_err());
    }

    #[test]
    fn relative_paths_follow_the_file() {
        let c = PipelineConfig::parse("[paths]\ncheckpoint = \"w.mvsarc\"\n", Path::new("/cfg/run.toml")).unwrap();
        assert_eq!(c.paths.checkpoint.unwrap(), Path::new("/cfg/w.mvsarc"));
    }
}
