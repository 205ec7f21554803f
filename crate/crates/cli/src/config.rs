//! Experiment configuration: one JSON document plus command-line overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use radaug_core::analysis::{HistogramMode, DEFAULT_THRESHOLD_ABS};
use radaug_core::domain::Weather;
use radaug_core::model::ArchDescriptor;
use radaug_core::perturb::{Method, PerturberConfig};
use radaug_core::synth::{SceneSpec, TrajectorySpec, WeatherTable};
use radaug_core::trainer::{MixingSpec, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed. When set it replaces the scene, model, training and
    /// perturbation seeds.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub scene: SceneSpec,
    /// Per-weather overrides of the preset photometric effects.
    #[serde(default)]
    pub weathers: WeatherTable,
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(default)]
    pub mixing: Option<MixingSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub tuple_len: usize,
    pub train: SplitSpec,
    pub test: SplitSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub trajectory: TrajectorySpec,
    pub weather_mix: BTreeMap<Weather, f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub arch: ArchDescriptor,
    /// Weight-initialisation seed.
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    #[serde(default = "default_methods")]
    pub methods: Vec<PerturberConfig>,
    /// Test tuples analysed, spread evenly over the split.
    #[serde(default = "default_frames")]
    pub frames: usize,
    #[serde(default = "default_threshold_abs")]
    pub threshold_abs: f64,
    #[serde(default)]
    pub mode: HistogramMode,
}

fn default_methods() -> Vec<PerturberConfig> {
    vec![PerturberConfig::gaussian(), PerturberConfig::fgsm(), PerturberConfig::rada()]
}

fn default_frames() -> usize {
    50
}

fn default_threshold_abs() -> f64 {
    DEFAULT_THRESHOLD_ABS
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            methods: default_methods(),
            frames: default_frames(),
            threshold_abs: default_threshold_abs(),
            mode: HistogramMode::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses `text`, reporting the line and column of the first problem.
    pub fn parse(text: &str, origin: &Path) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("{}: {e}", origin.display())))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, path)
    }

    /// Applies `key.path=value` overrides. Values are read as JSON and fall
    /// back to plain strings.
    pub fn with_overrides(self, overrides: &[String]) -> Result<Self, CliError> {
        if overrides.is_empty() {
            return Ok(self);
        }
        let mut doc = serde_json::to_value(&self).map_err(|e| CliError::Config(e.to_string()))?;
        for ov in overrides {
            let (key, raw) = ov
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("override `{ov}` is not key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut doc, key, value)?;
        }
        serde_json::from_value(doc).map_err(|e| CliError::Config(format!("after overrides: {e}")))
    }

    /// Copies the master seed into every sub-seed.
    pub fn resolve_seeds(mut self) -> Self {
        if let Some(s) = self.seed {
            self.scene.seed = s;
            self.model.seed = s;
            self.train.seed = s;
            self.train.perturber.seed = s;
            for m in &mut self.analysis.methods {
                m.seed = s;
            }
        }
        self
    }

    /// Replaces the training perturber with the preset for `method`, unless
    /// the config already uses that method.
    pub fn with_perturber(mut self, method: Method) -> Self {
        if self.train.perturber.method != method {
            let seed = self.train.perturber.seed;
            self.train.perturber = PerturberConfig { seed, ..PerturberConfig::preset(method) };
        }
        self
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let check = |r: radaug_core::Result<()>| r.map_err(|e| CliError::Config(e.to_string()));
        check(self.scene.validate())?;
        check(self.weathers.validate())?;
        check(self.train.validate())?;
        check(self.model.arch.validate())?;
        for split in [&self.data.train, &self.data.test] {
            check(split.trajectory.validate())?;
            let sum: f64 = split.weather_mix.values().sum();
            if split.weather_mix.is_empty() || (sum - 1.0).abs() > 1e-9 {
                return Err(CliError::Config(format!("weather_mix must sum to 1, got {sum}")));
            }
        }
        if self.data.tuple_len < 2 {
            return Err(CliError::Config("data.tuple_len must be at least 2".into()));
        }
        if self.model.arch.input != self.scene.dims {
            return Err(CliError::Config(format!(
                "model input {} does not match scene dims {}",
                self.model.arch.input, self.scene.dims
            )));
        }
        for m in &self.analysis.methods {
            check(m.validate())?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(bytes))
    }
}

fn set_path(doc: &mut Value, key: &str, value: Value) -> Result<(), CliError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("bad override key `{key}`")));
    }
    let mut cur = doc;
    for part in &parts[..parts.len() - 1] {
        if cur.get(*part).map_or(true, Value::is_null) {
            cur[*part] = Value::Object(Default::default());
        }
        cur = cur
            .get_mut(*part)
            .filter(|v| v.is_object())
            .ok_or_else(|| CliError::Config(format!("override `{key}`: `{part}` is not an object")))?;
    }
    let obj = cur
        .as_object_mut()
        .ok_or_else(|| CliError::Config(format!("override `{key}` does not address an object field")))?;
    obj.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "data": {
            "tuple_len": 3,
            "train": {"trajectory": {"frames": 12}, "weather_mix": {"overcast": 1.0}},
            "test": {"trajectory": {"frames": 6, "offset": 0.5}, "weather_mix": {"rain": 0.5, "snow": 0.5}}
        },
        "train": {
            "epochs": 1, "batch_tuples": 4, "lr": 0.002,
            "perturber": {"method": "rada", "epsilon": 158.0, "pow": 1.5, "eta": 10,
                          "use_threshold": true, "use_clip": true,
                          "gaussian_mean": 0.0, "gaussian_var": 0.05}
        }
    }"#;

    fn minimal() -> ExperimentConfig {
        ExperimentConfig::parse(MINIMAL, Path::new("test.json")).unwrap()
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = minimal();
        cfg.validate().unwrap();
        assert_eq!(cfg.analysis.methods.len(), 3);
        assert_eq!(cfg.model.arch, ArchDescriptor::default());
    }

    #[test]
    fn unknown_key_reports_position() {
        let text = MINIMAL.replacen("\"data\"", "\"dataa\": 1, \"data\"", 1);
        let err = ExperimentConfig::parse(&text, Path::new("x.json")).unwrap_err().to_string();
        assert!(err.contains("unknown field `dataa`"), "{err}");
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn missing_key_rejected() {
        let text = MINIMAL.replacen("\"tuple_len\": 3,", "", 1);
        let err = ExperimentConfig::parse(&text, Path::new("x.json")).unwrap_err().to_string();
        assert!(err.contains("tuple_len"), "{err}");
    }

    #[test]
    fn overrides_take_precedence() {
        let cfg = minimal()
            .with_overrides(&["train.lr=0.5".into(), "train.perturber.method=\"fgm\"".into(), "train.perturber.pow=1".into()])
            .unwrap();
        assert_eq!(cfg.train.lr, 0.5);
        assert_eq!(cfg.train.perturber.method, Method::Fgm);
        assert!(minimal().with_overrides(&["train.nope=1".into()]).is_err());
        assert!(minimal().with_overrides(&["train.lr".into()]).is_err());
        assert!(minimal().with_overrides(&["train.lr.x=1".into()]).is_err());
    }

    #[test]
    fn bare_string_override() {
        let cfg = minimal().with_overrides(&["train.mix_mode=adversarial_only".into()]).unwrap();
        assert_eq!(cfg.train.mix_mode, radaug_core::trainer::MixMode::AdversarialOnly);
    }

    #[test]
    fn master_seed_propagates() {
        let mut cfg = minimal();
        cfg.seed = Some(42);
        let cfg = cfg.resolve_seeds();
        assert_eq!((cfg.scene.seed, cfg.model.seed, cfg.train.seed, cfg.train.perturber.seed), (42, 42, 42, 42));
    }

    #[test]
    fn perturber_flag_keeps_matching_config() {
        let cfg = minimal().with_overrides(&["train.perturber.epsilon=9000".into()]).unwrap();
        assert_eq!(cfg.clone().with_perturber(Method::Rada).train.perturber.epsilon, 9000.0);
        let g = cfg.with_perturber(Method::Gaussian);
        assert_eq!(g.train.perturber.method, Method::Gaussian);
        assert_eq!(g.train.perturber.epsilon, PerturberConfig::gaussian().epsilon);
    }

    #[test]
    fn hash_changes_with_content() {
        let a = minimal();
        let b = minimal().with_overrides(&["train.lr=0.003".into()]).unwrap();
        assert_eq!(a.hash(), minimal().hash());
        assert_ne!(a.hash(), b.hash());
    }
}
