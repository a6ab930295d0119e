//! Flat, typed experiment configuration read from TOML.
//!
//! Every key is a scalar (or a flat list for `sweep_values`); unknown keys are
//! rejected and all parameter inequalities are re-checked on load.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::MixtureCounts;
use crate::dynamics::Trainable;
use crate::error::{Error, Result};
use crate::pretrain::PretrainParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Prop1,
    Prop2,
    Prop3,
    Theorem1,
    Trajectory,
    Filter,
    Augment,
    QkOnly,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 8] = [
        ExperimentKind::Prop1,
        ExperimentKind::Prop2,
        ExperimentKind::Prop3,
        ExperimentKind::Theorem1,
        ExperimentKind::Trajectory,
        ExperimentKind::Filter,
        ExperimentKind::Augment,
        ExperimentKind::QkOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::Prop1 => "prop1",
            ExperimentKind::Prop2 => "prop2",
            ExperimentKind::Prop3 => "prop3",
            ExperimentKind::Theorem1 => "theorem1",
            ExperimentKind::Trajectory => "trajectory",
            ExperimentKind::Filter => "filter",
            ExperimentKind::Augment => "augment",
            ExperimentKind::QkOnly => "qk-only",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Self::ALL.iter().map(|k| k.as_str()).collect();
                Error::Config(format!("unknown experiment {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

/// A fixed learning rate, or `"auto"` for the grid search.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum EtaSetting {
    #[default]
    Auto,
    Fixed(f64),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum EtaRepr {
    Number(f64),
    Text(String),
}

impl Serialize for EtaSetting {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match *self {
            EtaSetting::Auto => EtaRepr::Text("auto".into()),
            EtaSetting::Fixed(x) => EtaRepr::Number(x),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for EtaSetting {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match EtaRepr::deserialize(d)? {
            EtaRepr::Number(x) => Ok(EtaSetting::Fixed(x)),
            EtaRepr::Text(t) if t.eq_ignore_ascii_case("auto") => Ok(EtaSetting::Auto),
            EtaRepr::Text(t) => Err(serde::de::Error::custom(format!(
                "eta must be a number or \"auto\", got {t:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub seed: u64,
    pub steps: usize,
    pub eta: EtaSetting,
    pub trainable: Trainable,

    pub num_subjects: usize,
    pub num_answers: usize,
    pub dim: usize,
    pub num_memorized: usize,
    pub delta_c: f64,
    pub delta_m: f64,
    pub o_c: f64,
    pub o_r: f64,
    pub delta_s: f64,

    pub n_c: usize,
    pub n_cs: usize,
    pub n_s_seen: usize,
    pub n_s_unseen: usize,
    /// Subject-only points added on top of the mixture by `prop2`.
    pub s_points: usize,
    pub test_size: usize,
    /// Counterfactual examples as a fraction of `n_cs`, rounded up.
    pub augment_ratio: f64,
    /// Defaults to `n_c / (n_c + n_cs)`.
    pub keep_fraction: Option<f64>,

    pub out_dir: Option<PathBuf>,
    pub plots: bool,
    pub sweep_param: Option<String>,
    pub sweep_values: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let p = PretrainParams::default();
        Self {
            experiment: ExperimentKind::Prop1,
            seed: 0,
            steps: 50,
            eta: EtaSetting::Auto,
            trainable: Trainable::KeyQuery,
            num_subjects: p.num_subjects,
            num_answers: p.num_answers,
            dim: p.dim,
            num_memorized: p.num_memorized,
            delta_c: p.delta_c,
            delta_m: p.delta_m,
            o_c: p.o_c,
            o_r: p.o_r,
            delta_s: p.delta_s,
            n_c: 32,
            n_cs: 32,
            n_s_seen: 0,
            n_s_unseen: 0,
            s_points: 1,
            test_size: 16,
            augment_ratio: 0.25,
            keep_fraction: None,
            out_dir: None,
            plots: true,
            sweep_param: None,
            sweep_values: Vec::new(),
        }
    }
}

/// Keys `set_param` accepts, i.e. the numeric knobs worth sweeping.
pub const SWEEPABLE: &[&str] = &[
    "seed", "steps", "eta", "num_subjects", "num_answers", "dim", "num_memorized", "delta_c",
    "delta_m", "o_c", "o_r", "delta_s", "n_c", "n_cs", "n_s_seen", "n_s_unseen", "s_points",
    "test_size", "augment_ratio", "keep_fraction",
];

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn pretrain_params(&self) -> PretrainParams {
        PretrainParams {
            num_subjects: self.num_subjects,
            num_answers: self.num_answers,
            dim: self.dim,
            num_memorized: self.num_memorized,
            delta_c: self.delta_c,
            delta_m: self.delta_m,
            o_c: self.o_c,
            o_r: self.o_r,
            delta_s: self.delta_s,
        }
    }

    pub fn mixture_counts(&self) -> MixtureCounts {
        MixtureCounts {
            n_c: self.n_c,
            n_cs: self.n_cs,
            n_s_seen: self.n_s_seen,
            n_s_unseen: self.n_s_unseen,
        }
    }

    pub fn keep_fraction(&self) -> f64 {
        self.keep_fraction
            .unwrap_or(self.n_c as f64 / (self.n_c + self.n_cs).max(1) as f64)
    }

    /// Number of counterfactual examples, `ceil(augment_ratio · n_cs)`.
    pub fn augment_count(&self) -> usize {
        (self.augment_ratio * self.n_cs as f64).ceil() as usize
    }

    pub fn validate(&self) -> Result<()> {
        self.pretrain_params().validate()?;
        let bad = |msg: String| Err(Error::Config(msg));
        if self.steps == 0 {
            return bad("steps must be at least 1".into());
        }
        if let EtaSetting::Fixed(eta) = self.eta {
            if !(eta > 0.0 && eta.is_finite()) {
                return bad(format!("eta must be positive and finite, got {eta}"));
            }
        }
        if self.n_c + self.n_cs + self.n_s_seen + self.n_s_unseen == 0 {
            return bad("the training mixture is empty".into());
        }
        if !(self.augment_ratio >= 0.0 && self.augment_ratio.is_finite()) {
            return bad(format!("augment_ratio must be >= 0, got {}", self.augment_ratio));
        }
        if let Some(k) = self.keep_fraction {
            if !(k > 0.0 && k <= 1.0) {
                return bad(format!("keep_fraction must lie in (0, 1], got {k}"));
            }
        }
        if let Some(name) = &self.sweep_param {
            if !SWEEPABLE.contains(&name.as_str()) {
                return bad(format!("sweep_param {name:?} is not a numeric key"));
            }
        }
        Ok(())
    }

    /// Returns a copy with one numeric key replaced.
    pub fn with_param(&self, key: &str, value: f64) -> Result<Self> {
        if !SWEEPABLE.contains(&key) {
            return Err(Error::Config(format!("{key:?} is not a numeric key")));
        }
        let mut table = toml::Table::try_from(self).expect("config serializes to a table");
        let integral = matches!(table.get(key), Some(toml::Value::Integer(_)))
            || !matches!(key, "eta" | "delta_c" | "delta_m" | "o_c" | "o_r" | "delta_s" | "augment_ratio" | "keep_fraction");
        let v = if integral {
            if value.fract() != 0.0 || value < 0.0 {
                return Err(Error::Config(format!("{key} needs a non-negative integer, got {value}")));
            }
            toml::Value::Integer(value as i64)
        } else {
            toml::Value::Float(value)
        };
        table.insert(key.to_string(), v);
        let cfg: Self = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
