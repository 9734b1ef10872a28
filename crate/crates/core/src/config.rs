//! Scenario files.
//!
//! A scenario is a single TOML document:
//!
//! ```toml
//! id = "two-state"
//! model = "I"                       # or "II"
//! generator = [[-1.0, 1.0], [1.0, -1.0]]
//! lambda = [1.0, 3.0]
//! mu = [1.0, 1.0]
//! alpha = 0.5
//! n = [400, 1600]                   # a single integer is accepted too
//! grid = [1.0]
//! offsets = [0.0, 0.6931471805599453]
//! replications = 4000
//! seed = 1
//! initial = "stationary"            # or { fixed = 0 }
//! method = "event_driven"           # or "conditional_poisson"
//! out = "out"
//!
//! [tolerances]
//! variance = 0.15
//! ```

use crate::experiments::Tolerances;
use crate::limits::{ModelSpec, ModelVariant, Scaling};
use crate::markov::Generator;
use crate::sim::{InitialState, Method};
use serde::{Deserialize, Deserializer, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid `{field}`: {message}")]
    Invalid { field: &'static str, message: String },
}

fn invalid(field: &'static str, message: impl ToString) -> ConfigError {
    ConfigError::Invalid { field, message: message.to_string() }
}

fn one_or_many<'de, D: Deserializer<'de>>(de: D) -> Result<Vec<u64>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany {
        One(u64),
        Many(Vec<u64>),
    }
    Ok(match OneOrMany::deserialize(de)? {
        OneOrMany::One(n) => vec![n],
        OneOrMany::Many(v) => v,
    })
}

fn default_replications() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub id: String,
    pub model: ModelVariant,
    /// Row-major generator; the diagonal is recomputed from the off-diagonal rates.
    pub generator: Vec<Vec<f64>>,
    pub lambda: Vec<f64>,
    pub mu: Vec<f64>,
    pub alpha: f64,
    #[serde(deserialize_with = "one_or_many")]
    pub n: Vec<u64>,
    pub grid: Vec<f64>,
    /// Lags `s_1 ≤ … ≤ s_K` after the first grid time, for cross-time checks.
    #[serde(default)]
    pub offsets: Vec<f64>,
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub initial: InitialState,
    #[serde(default)]
    pub method: Method,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub tolerances: Tolerances,
}

/// A validated scenario.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub generator: Generator,
    pub spec: ModelSpec,
    pub scalings: Vec<Scaling>,
}

impl ScenarioConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::from_toml_str(&text)
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    /// Checks every field and builds the model objects.
    pub fn validate(&self) -> Result<Scenario, ConfigError> {
        let generator = Generator::from_rows(&self.generator).map_err(|e| invalid("generator", e))?;
        let d = generator.dim();
        if self.lambda.len() != d {
            return Err(invalid("lambda", format!("expected {d} entries, got {}", self.lambda.len())));
        }
        if self.mu.len() != d {
            return Err(invalid("mu", format!("expected {d} entries, got {}", self.mu.len())));
        }
        let spec = ModelSpec::new(self.lambda.clone(), self.mu.clone(), self.model).map_err(|e| {
            let field = if matches!(e, crate::limits::LimitError::InvalidRate { what: "mu", .. }) { "mu" } else { "lambda" };
            invalid(field, e)
        })?;
        if !self.alpha.is_finite() || self.alpha <= 0.0 {
            return Err(invalid("alpha", "must be finite and > 0"));
        }
        if self.n.is_empty() {
            return Err(invalid("n", "at least one scale is required"));
        }
        let scalings = self
            .n
            .iter()
            .map(|&n| Scaling::new(n, self.alpha).map_err(|e| invalid("n", e)))
            .collect::<Result<Vec<_>, _>>()?;
        let sorted = |v: &[f64]| v.iter().all(|t| t.is_finite() && *t >= 0.0) && v.windows(2).all(|w| w[0] <= w[1]);
        if self.grid.is_empty() || !sorted(&self.grid) {
            return Err(invalid("grid", "must be nonempty, nonnegative and sorted"));
        }
        if !sorted(&self.offsets) {
            return Err(invalid("offsets", "must be nonnegative and sorted"));
        }
        if self.replications == 0 {
            return Err(invalid("replications", "must be at least 1"));
        }
        if let InitialState::Fixed(i) = self.initial {
            if i >= d {
                return Err(invalid("initial", format!("state {i} out of range for {d} states")));
            }
        }
        Ok(Scenario { config: self.clone(), generator, spec, scalings })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASIC: &str = r#"
id = "two"
model = "II"
generator = [[-1.0, 1.0], [1.0, -1.0]]
lambda = [1.0, 3.0]
mu = [1.0, 2.0]
alpha = 0.5
n = 1600
grid = [0.5, 1.0]
initial = { fixed = 1 }

[tolerances]
variance = 0.2
"#;

    #[test]
    fn parses_and_defaults() {
        let c = ScenarioConfig::from_toml_str(BASIC).unwrap();
        assert_eq!(c.n, vec![1600]);
        assert_eq!(c.model, ModelVariant::ModelII);
        assert_eq!(c.initial, InitialState::Fixed(1));
        assert_eq!(c.replications, 1000);
        assert_eq!(c.tolerances.variance, 0.2);
        assert_eq!(c.tolerances.slope, 0.15);
        assert_eq!(c.method, Method::EventDriven);
        c.validate().unwrap();
    }

    #[test]
    fn round_trip() {
        let c = ScenarioConfig::from_toml_str(BASIC).unwrap();
        let again = ScenarioConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(c, again);
    }

    #[test]
    fn field_level_errors() {
        let field = |text: String| match ScenarioConfig::from_toml_str(&text).unwrap().validate() {
            Err(ConfigError::Invalid { field, .. }) => field,
            other => panic!("expected invalid field, got {other:?}"),
        };
        assert_eq!(field(BASIC.replace("mu = [1.0, 2.0]", "mu = [1.0]")), "mu");
        assert_eq!(field(BASIC.replace("mu = [1.0, 2.0]", "mu = [1.0, 0.0]")), "mu");
        assert_eq!(field(BASIC.replace("alpha = 0.5", "alpha = -1.0")), "alpha");
        assert_eq!(field(BASIC.replace("grid = [0.5, 1.0]", "grid = [1.0, 0.5]")), "grid");
        assert_eq!(field(BASIC.replace("n = 1600", "n = [0]")), "n");
        assert_eq!(field(BASIC.replace("[[-1.0, 1.0], [1.0, -1.0]]", "[[-1.0, 1.0], [0.0, 0.0]]")), "generator");
        assert_eq!(field(BASIC.replace("fixed = 1", "fixed = 2")), "initial");
        assert!(matches!(
            ScenarioConfig::from_toml_str(&format!("{BASIC}\nbogus = 1")),
            Err(ConfigError::Parse(_))
        ));
    }
}
