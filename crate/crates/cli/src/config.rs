use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sepprune::autodiff::AdamConfig;
use sepprune::data::SynthParams;
use sepprune::mask::{LearnConfig, TauSchedule};
use sepprune::model::SepNetConfig;
use sepprune::train::TrainConfig;
use sha2::{Digest, Sha256};

use crate::UsageError;

/// Every key is optional; missing keys take the defaults below.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds model initialization, data order, mask noise and baselines.
    pub seed: u64,
    pub model: SepNetConfig,
    pub data: DataConfig,
    pub train: TrainSection,
    pub mask: MaskSection,
    pub finetune: FinetuneSection,
    pub eval: EvalSection,
    pub ablate: AblateSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub length: usize,
    pub base_seed: u64,
    pub sample_rate: u32,
    pub source_snr: (f64, f64),
    pub noise_snr: Option<(f64, f64)>,
}

impl Default for DataConfig {
    fn default() -> Self {
        let p = SynthParams::default();
        Self {
            n_train: 512,
            n_val: 64,
            n_test: 64,
            length: 16000,
            base_seed: 0,
            sample_rate: p.sample_rate,
            source_snr: p.source_snr,
            noise_snr: p.noise_snr,
        }
    }
}

impl DataConfig {
    pub fn synth(&self) -> SynthParams {
        SynthParams {
            sample_rate: self.sample_rate,
            source_snr: self.source_snr,
            noise_snr: self.noise_snr,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub plateau_patience: usize,
    pub early_stop_patience: usize,
    pub adam: AdamConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lr: t.lr,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            plateau_patience: t.plateau_patience,
            early_stop_patience: t.early_stop_patience,
            adam: t.adam,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskSection {
    pub eps: f64,
    pub lr: f64,
    pub iterations: usize,
    pub tau: TauSchedule,
}

impl Default for MaskSection {
    fn default() -> Self {
        let l = LearnConfig::default();
        Self {
            eps: 0.7,
            lr: l.lr,
            iterations: l.iterations,
            tau: TauSchedule::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneSection {
    pub epochs: usize,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        Self { epochs: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Random-mask draws averaged into the random baseline row.
    pub random_masks: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { random_masks: 3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateSection {
    pub eps: Vec<f64>,
    pub iterations: Vec<usize>,
}

impl Default for AblateSection {
    fn default() -> Self {
        Self {
            eps: vec![0.5, 0.6, 0.7, 0.8, 0.9],
            iterations: vec![300, 500, 900],
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let cfg: RunConfig = match path {
            None => RunConfig::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| UsageError(format!("cannot read config {}: {e}", p.display())))?;
                toml::from_str(&text).map_err(|e| UsageError(format!("invalid config {}: {e}", p.display())))?
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| -> anyhow::Error { UsageError(m).into() };
        self.model.validate().map_err(|e| bad(format!("[model] {e}")))?;
        self.train_config().validate().map_err(|e| bad(format!("[train] {e}")))?;
        self.mask.tau.validate().map_err(|e| bad(format!("[mask] {e}")))?;
        let d = &self.data;
        if d.n_train == 0 || d.n_val == 0 || d.n_test == 0 {
            return Err(bad("[data] every split needs at least one utterance".into()));
        }
        if d.length < sepprune::data::MIN_LENGTH {
            return Err(bad(format!("[data] length must be at least {}", sepprune::data::MIN_LENGTH)));
        }
        if d.sample_rate == 0 {
            return Err(bad("[data] sample_rate must be positive".into()));
        }
        if !(self.mask.eps > 0.0 && self.mask.eps < 1.0) {
            return Err(bad(format!("[mask] eps must lie in (0, 1), got {}", self.mask.eps)));
        }
        if !(self.mask.lr > 0.0 && self.mask.lr.is_finite()) {
            return Err(bad("[mask] lr must be positive".into()));
        }
        if self.eval.random_masks == 0 {
            return Err(bad("[eval] random_masks must be at least 1".into()));
        }
        if self.ablate.eps.is_empty() || self.ablate.iterations.is_empty() {
            return Err(bad("[ablate] sweeps must not be empty".into()));
        }
        if let Some(e) = self.ablate.eps.iter().find(|e| !(**e > 0.0 && **e < 1.0)) {
            return Err(bad(format!("[ablate] eps values must lie in (0, 1), got {e}")));
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            lr: t.lr,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            plateau_patience: t.plateau_patience,
            early_stop_patience: t.early_stop_patience,
            seed: self.seed,
            adam: t.adam,
        }
    }

    pub fn learn_config(&self, iterations: usize) -> LearnConfig {
        LearnConfig {
            iterations,
            lr: self.mask.lr,
            seed: self.seed,
        }
    }

    /// SHA-256 over the canonical JSON form of the resolved configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).context("serializing config")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let back: RunConfig = toml::from_str(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!(cfg.mask.eps, 0.7);
        assert_eq!(cfg.mask.iterations, 500);
        assert_eq!(cfg.train.lr, 1e-3);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("colour = 1").is_err());
        assert!(toml::from_str::<RunConfig>("[mask]\nepsilon = 0.5").is_err());
        assert!(toml::from_str::<RunConfig>("[train.adam]\nbeta3 = 0.5").is_err());
        let cfg: RunConfig = toml::from_str("seed = 4\n[mask]\neps = 0.6\ntau = { kind = \"linear\", start = 2.0, end = 0.5 }").unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.mask.tau, TauSchedule::anneal());
    }

    #[test]
    fn hash_tracks_every_key() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.data.n_test += 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn out_of_range_values_are_config_errors() {
        let mut c = RunConfig::default();
        c.mask.eps = 1.0;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.model.kernel = 4;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.data.length = 100;
        assert!(c.validate().unwrap_err().downcast_ref::<UsageError>().is_some());
    }
}
