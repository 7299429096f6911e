//! Experiment configuration: one JSON document, defaults filled in.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ann::AnnParams;
use crate::data::{load_dataset, normalize, CsvOptions, DataFormat, Dataset, NormStats};
use crate::error::{HfdError, Result};
use crate::eval::{ConstraintConfig, PipelineParams, SearchMode};
use crate::hierarchy::{ForestParams, TreeParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub path: PathBuf,
    pub format: DataFormat,
    /// CSV only: the last column holds integer labels.
    pub label_column: bool,
    pub header: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            path: PathBuf::new(),
            format: DataFormat::Csv,
            label_column: true,
            header: false,
        }
    }
}

impl DatasetConfig {
    pub fn load(&self) -> Result<Dataset> {
        load_dataset(
            &self.path,
            self.format,
            CsvOptions {
                label_column: self.label_column,
                header: self.header,
            },
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Protocol {
    Classify,
    Retrieval,
    AnnQuality,
    NoiseSweep,
    ExportSimilarity,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::Classify => "classify",
            Protocol::Retrieval => "retrieval",
            Protocol::AnnQuality => "ann_quality",
            Protocol::NoiseSweep => "noise_sweep",
            Protocol::ExportSimilarity => "export_similarity",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub protocol: Option<Protocol>,
    pub folds: usize,
    pub retrieval_ks: Vec<usize>,
    pub k_o_values: Vec<usize>,
    pub eval_ks: Vec<usize>,
    pub noise_rates: Vec<f64>,
    /// Neighbours per point in the exported similarity graph.
    pub similarity_k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            protocol: None,
            folds: 5,
            retrieval_ks: (1..=10).map(|i| 5 * i).collect(),
            k_o_values: vec![1, 3, 5, 10, 20, 30],
            eval_ks: vec![10, 20, 30, 40, 50],
            noise_rates: vec![0.0, 0.05, 0.1, 0.15, 0.2],
            similarity_k: 50,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConstraintSource {
    #[serde(flatten)]
    pub sampling: ConstraintConfig,
    /// Read constraints from this CSV instead of sampling them.
    pub file: Option<PathBuf>,
}


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub normalize: bool,
    pub constraints: ConstraintSource,
    pub seed: u64,
    /// Number of trees `T`.
    pub trees: usize,
    pub alpha: f64,
    pub tree: TreeParams,
    pub ann: AnnParams,
    pub search: SearchMode,
    pub eval: EvalConfig,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetConfig::default(),
            normalize: true,
            constraints: ConstraintSource::default(),
            seed: 0,
            trees: 500,
            alpha: 0.5,
            tree: TreeParams::default(),
            ann: AnnParams::default(),
            search: SearchMode::Approx,
            eval: EvalConfig::default(),
            output_dir: PathBuf::from("hfd-out"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HfdError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn forest_params(&self) -> ForestParams {
        ForestParams {
            n_trees: self.trees,
            alpha: self.alpha,
            seed: self.seed,
            tree: self.tree.clone(),
        }
    }

    pub fn pipeline(&self) -> PipelineParams {
        PipelineParams {
            forest: self.forest_params(),
            constraints: self.constraints.sampling.clone(),
            ann: self.ann,
            search: self.search,
        }
    }

    /// Bounds that do not depend on the data.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(HfdError::InvalidParameter(m.to_string()));
        if self.trees == 0 {
            return bad("trees must be >= 1");
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be > 0");
        }
        let c = &self.constraints.sampling;
        if !(0.0..=1.0).contains(&c.ml_fraction) {
            return bad("ml_fraction must lie in [0, 1]");
        }
        if self.eval.folds < 2 {
            return bad("folds must be >= 2");
        }
        if self.eval.noise_rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return bad("noise rates must lie in [0, 1]");
        }
        self.ann.validate()?;
        self.tree.ssmmc.validate()?;
        if self.tree.min_node_size < 2 {
            return bad("min_node_size must be >= 2");
        }
        Ok(())
    }

    /// Loads the dataset and applies the configured normalization.
    pub fn prepare_data(&self) -> Result<(Dataset, NormStats)> {
        let raw = self.dataset.load()?;
        Ok(if self.normalize {
            normalize(&raw)
        } else {
            let d = raw.dim();
            (raw, NormStats::identity(d))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_missing_fields() {
        let cfg = ExperimentConfig::from_json(r#"{"dataset": {"path": "x.csv"}, "trees": 7}"#).unwrap();
        assert_eq!(cfg.trees, 7);
        assert_eq!(cfg.alpha, 0.5);
        assert_eq!(cfg.tree.min_node_size, 5);
        assert_eq!(cfg.tree.ssmmc.lambda, 0.01);
        assert_eq!(cfg.constraints.sampling.per_class, 1000);
        assert_eq!(cfg.ann.k_o, 10);
        assert_eq!(cfg.dataset.path, PathBuf::from("x.csv"));
    }

    #[test]
    fn json_round_trip() {
        let cfg = ExperimentConfig {
            eval: EvalConfig {
                protocol: Some(Protocol::AnnQuality),
                ..EvalConfig::default()
            },
            ..ExperimentConfig::default()
        };
        assert_eq!(ExperimentConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn unknown_protocol_is_an_error() {
        assert!(ExperimentConfig::from_json(r#"{"eval": {"protocol": "bogus"}}"#).is_err());
    }
}
