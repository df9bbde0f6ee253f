use std::path::{Path, PathBuf};

use fltlm::evaluator::Condition;
use fltlm::experiment::ExperimentConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Output root for every relative path of the run.
pub const ROOT_ENV: &str = "FLTLM_OUT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub data: PathBuf,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data: "data".into(),
            checkpoints: "checkpoints".into(),
            reports: "reports".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Evaluate on the first this many eval samples (0 for all).
    pub samples: usize,
    pub max_new_tokens: usize,
    /// Condition names such as `original/pos+neg`, or `all`.
    pub conditions: Vec<String>,
    /// Samples used by the attention analysis.
    pub attention_samples: usize,
    /// Eval samples used by the training-time filter probe.
    pub probe_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples: 0,
            max_new_tokens: 4,
            conditions: vec!["all".into()],
            attention_samples: 100,
            probe_samples: 100,
        }
    }
}

impl EvalConfig {
    pub fn conditions(&self) -> Result<Vec<Condition>, CliError> {
        if self.conditions.iter().any(|c| c == "all") {
            return Ok(Condition::all());
        }
        self.conditions
            .iter()
            .map(|c| c.parse().map_err(CliError::Usage))
            .collect()
    }
}

/// Overlays `top` on `base` table by table, so a section in the file only
/// replaces the keys it names.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Everything a command runs with: the config file merged with flags. This
/// is what every artifact records.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub paths: Paths,
    pub eval: EvalConfig,
    #[serde(flatten)]
    pub experiment: ExperimentConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
            context: format!("reading {}", path.display()),
            source,
        })?;
        let bad = |e: String| CliError::Usage(format!("{}: {e}", path.display()));
        let file: toml::Table = toml::from_str(&text).map_err(|e| bad(e.to_string()))?;
        let mut merged = toml::Table::try_from(Self::default()).map_err(|e| bad(e.to_string()))?;
        merge(&mut merged, file);
        merged.try_into().map_err(|e: toml::de::Error| bad(e.to_string()))
    }

    /// Makes relative paths relative to `root`.
    pub fn rooted(mut self, root: &Path) -> Self {
        for p in [&mut self.paths.data, &mut self.paths.checkpoints, &mut self.paths.reports] {
            if p.is_relative() {
                *p = root.join(&*p);
            }
        }
        self
    }

    /// The resolved configuration as one JSON line.
    pub fn record(&self) -> String {
        serde_json::to_string(self).unwrap_or_default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_sections_override_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(
            &path,
            "filter_proportion = 0.25\n[model]\nn_layers = 8\n[data]\nhops = 2\n[train]\nregime = \"sft\"\nlambda = 0.2\n[eval]\nsamples = 10\n",
        )
        .unwrap();
        let cfg = RunConfig::load(Some(&path)).unwrap();
        let preset = ExperimentConfig::default();
        assert_eq!(cfg.experiment.data.hops, 2);
        assert_eq!(cfg.experiment.data.n_docs, preset.data.n_docs);
        assert_eq!(cfg.experiment.model.d_model, preset.model.d_model);
        assert_eq!(cfg.experiment.model.n_layers, 8);
        assert_eq!(cfg.experiment.filter_proportion, Some(0.25));
        assert_eq!(cfg.experiment.train.lambda, 0.2);
        assert_eq!(cfg.experiment.train.mask_warmup, preset.train.mask_warmup);
        assert_eq!(cfg.eval.samples, 10);
        let (_, model) = cfg.experiment.resolve().unwrap();
        assert_eq!(model.filter_layers, 2);
    }

    #[test]
    fn record_round_trips() {
        let cfg = RunConfig::default();
        let back: RunConfig = serde_json::from_str(&cfg.record()).unwrap();
        assert_eq!(back, cfg);
    }
}
