//! Run configuration: one TOML file, with command-line overrides applied on
//! top.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SynthSpec;
use crate::ensemble::TrainConfig;
use crate::error::{Error, Result};
use crate::evaluation::{LeakageModelSpec, DEFAULT_REPETITIONS, DEFAULT_THRESHOLDS};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub out: Option<PathBuf>,
    /// Profiling set for `train`; `<out>/train.trc` when unset.
    pub dataset: Option<PathBuf>,
    /// Attack set for `attack`; `<out>/attack.trc` when unset.
    pub attack_dataset: Option<PathBuf>,
    /// `<out>/model.json` when unset.
    pub model: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    #[serde(flatten)]
    pub spec: SynthSpec,
    pub attack_traces: usize,
    pub attack_desync_window: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { spec: SynthSpec::default(), attack_traces: 2000, attack_desync_window: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    /// Derived from the synthetic table when unset.
    pub leakage: Option<LeakageModelSpec>,
    /// Every count from 1 to `max_traces` is evaluated unless
    /// `trace_counts` is given.
    pub max_traces: usize,
    pub trace_counts: Option<Vec<usize>>,
    pub repetitions: usize,
    pub thresholds: Vec<u32>,
    /// Overrides the key stored with the attack set.
    pub key: Option<u8>,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            leakage: None,
            max_traces: 200,
            trace_counts: None,
            repetitions: DEFAULT_REPETITIONS,
            thresholds: DEFAULT_THRESHOLDS.to_vec(),
            key: None,
        }
    }
}

impl AttackConfig {
    pub fn counts(&self, available: usize) -> Vec<usize> {
        match &self.trace_counts {
            Some(c) => c.clone(),
            None => (1..=self.max_traces.min(available)).collect(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub paths: PathsConfig,
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub attack: AttackConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        RunConfig::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn require_seed(&self) -> Result<u64> {
        self.seed.ok_or_else(|| Error::Config("a master seed is required (config `seed` or --seed)".into()))
    }

    pub fn out_dir(&self) -> PathBuf {
        self.paths.out.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.paths.dataset.clone().unwrap_or_else(|| self.out_dir().join("train.trc"))
    }

    pub fn attack_path(&self) -> PathBuf {
        self.paths.attack_dataset.clone().unwrap_or_else(|| self.out_dir().join("attack.trc"))
    }

    pub fn model_path(&self) -> PathBuf {
        self.paths.model.clone().unwrap_or_else(|| self.out_dir().join("model.json"))
    }

    pub fn leakage(&self) -> Result<LeakageModelSpec> {
        if let Some(l) = &self.attack.leakage {
            l.validate()?;
            return Ok(l.clone());
        }
        Ok(match self.synth.spec.n_classes {
            256 if self.synth.spec.sbox.is_none() => LeakageModelSpec::aes_id(),
            _ => LeakageModelSpec::SyntheticId { table: self.synth.spec.table()? },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert!(cfg.require_seed().is_err());
        assert_eq!(cfg.train.evolution.population_size, 16);
        assert_eq!(cfg.attack.repetitions, 50);
    }

    #[test]
    fn sections_parse_and_round_trip() {
        let text = r#"
seed = 9
[paths]
out = "runs/a"
[synth]
n_per_class = 20
attack_traces = 300
[train.evolution]
population_size = 8
[attack]
max_traces = 50
thresholds = [0, 2]
leakage = { kind = "sbox_hd" }
"#;
        let cfg = RunConfig::from_toml(text).unwrap();
        assert_eq!(cfg.seed, Some(9));
        assert_eq!(cfg.synth.spec.n_per_class, 20);
        assert_eq!(cfg.synth.attack_traces, 300);
        assert_eq!(cfg.train.evolution.population_size, 8);
        assert_eq!(cfg.model_path(), PathBuf::from("runs/a/model.json"));
        assert_eq!(cfg.leakage().unwrap(), LeakageModelSpec::SboxHd { table: None });
        let again = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("[train]\nbogus = 1\n").is_err());
    }
}
