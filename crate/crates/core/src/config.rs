//! Run configuration, read from a TOML file. Every section and field is
//! optional; omitted values take their defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::alignment::Stage1Config;
use crate::cf::CfConfig;
use crate::error::{CoreError, Result};
use crate::lm::LmConfig;
use crate::stage2::{Stage2Config, DEFAULT_QUESTION};
use crate::synth::SynthConfig;
use crate::text::TextConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub reviews: Option<PathBuf>,
    pub meta: Option<PathBuf>,
    /// A dataset previously written by `ingest`.
    pub dataset: Option<PathBuf>,
    pub synthetic: Option<SynthConfig>,
    pub kcore: usize,
    pub rating_threshold: Option<f32>,
    /// Keep users with exactly three interactions out of every training stage.
    pub holdout_cold_users: bool,
}

impl DataConfig {
    pub fn synthetic(cfg: SynthConfig) -> Self {
        DataConfig {
            synthetic: Some(cfg),
            kcore: 3,
            ..DataConfig::default_files()
        }
    }

    fn default_files() -> Self {
        DataConfig {
            reviews: None,
            meta: None,
            dataset: None,
            synthetic: None,
            kcore: 5,
            rating_threshold: None,
            holdout_cold_users: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sources = [self.reviews.is_some() || self.meta.is_some(), self.dataset.is_some(), self.synthetic.is_some()]
            .iter()
            .filter(|&&b| b)
            .count();
        if sources != 1 {
            return Err(CoreError::Config(
                "data: give exactly one of reviews+meta, dataset, or synthetic".into(),
            ));
        }
        if self.reviews.is_some() != self.meta.is_some() {
            return Err(CoreError::Config("data: reviews and meta must be given together".into()));
        }
        for p in [&self.reviews, &self.meta, &self.dataset].into_iter().flatten() {
            if !p.exists() {
                return Err(CoreError::Config(format!("data: {} does not exist", p.display())));
            }
        }
        if let Some(s) = &self.synthetic {
            s.validate()?;
        }
        if self.kcore == 0 {
            return Err(CoreError::Config("data: kcore must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub cold_warm_pct: f64,
    pub fewshot_k: Vec<usize>,
    /// Cap on evaluated users; `None` evaluates everyone.
    pub max_instances: Option<usize>,
    pub demo_users: usize,
    pub demo_max_tokens: usize,
    pub demo_question: String,
    /// Target catalog for the cross-domain scenario.
    pub cross_domain: Option<DataConfig>,
    pub record_wall_clock: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            cold_warm_pct: 0.35,
            fewshot_k: vec![128, 256],
            max_instances: None,
            demo_users: 50,
            demo_max_tokens: 32,
            demo_question: DEFAULT_QUESTION.to_string(),
            cross_domain: None,
            record_wall_clock: false,
        }
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        Self::default_files()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub cf: CfConfig,
    pub text: TextConfig,
    pub stage1: Stage1Config,
    pub lm: LmConfig,
    pub stage2: Stage2Config,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            output_dir: PathBuf::from("softslot-out"),
            data: DataConfig::default(),
            cf: CfConfig::default(),
            text: TextConfig::default(),
            stage1: Stage1Config::default(),
            lm: LmConfig::default(),
            stage2: Stage2Config::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CoreError::Config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    /// Makes relative data paths relative to the config file's directory.
    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(x) = p {
                if x.is_relative() {
                    *x = base.join(&*x);
                }
            }
        };
        let mut datas = vec![&mut self.data];
        if let Some(c) = self.eval.cross_domain.as_mut() {
            datas.push(c);
        }
        for d in datas {
            fix(&mut d.reviews);
            fix(&mut d.meta);
            fix(&mut d.dataset);
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CoreError::Config(format!("config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        if let Some(c) = &self.eval.cross_domain {
            c.validate()?;
        }
        self.cf.validate()?;
        if self.text.dim == 0 {
            return Err(CoreError::Config("text: dim must be positive".into()));
        }
        self.stage1.validate()?;
        self.lm.validate()?;
        self.stage2.validate()?;
        if !(0.0..=0.5).contains(&self.eval.cold_warm_pct) {
            return Err(CoreError::Config("eval: cold_warm_pct must be in [0, 0.5]".into()));
        }
        Ok(())
    }

    /// Stable JSON echo stored in checkpoints. Leaves out `output_dir`, so a
    /// run replayed elsewhere writes the same bytes.
    pub fn echo(&self) -> Result<serde_json::Value> {
        let mut v = serde_json::to_value(self)?;
        if let Some(m) = v.as_object_mut() {
            m.remove("output_dir");
        }
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_mirror_the_hyperparameter_table() {
        let c = RunConfig::default();
        assert_eq!(c.cf.dim, 50);
        assert_eq!(c.stage1.joint_dim, 128);
        assert_eq!((c.stage1.alpha, c.stage1.beta), (0.5, 0.5));
        assert_eq!(c.stage1.lr, 1e-4);
        assert_eq!(c.stage2.lr, 1e-4);
        assert_eq!((c.stage2.epochs, c.stage2.batch_size), (5, 4));
        assert_eq!(c.lm.dim, 64);
    }

    #[test]
    fn toml_round_trip_and_unknown_keys() {
        let mut c = RunConfig::default();
        c.data = DataConfig::synthetic(SynthConfig::default());
        let back = RunConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
        back.validate().unwrap();
        assert!(RunConfig::from_toml("sed = 1").is_err());
        let partial = RunConfig::from_toml("seed = 9\n[stage2]\nepochs = 2\n").unwrap();
        assert_eq!((partial.seed, partial.stage2.epochs, partial.stage2.batch_size), (9, 2, 4));
    }

    #[test]
    fn missing_paths_fail_validation() {
        let mut c = RunConfig::default();
        c.data.reviews = Some("/nonexistent/reviews.json".into());
        c.data.meta = Some("/nonexistent/meta.json".into());
        assert!(matches!(c.validate(), Err(CoreError::Config(_))));
        c.data = DataConfig::default();
        assert!(c.validate().is_err());
    }
}
