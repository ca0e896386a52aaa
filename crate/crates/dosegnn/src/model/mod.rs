//! Learnable predictors: CT patch encoders, dose-node featurization, the
//! bipartite GNN, and the two heuristic baselines, plus the on-disk model
//! format.

pub mod encoder;
pub mod features;
pub mod gnn;
pub mod heuristic;
pub mod params;

use std::fs;
use std::path::Path;

use serde_json::Value;

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::graph::GraphConfig;
use crate::volume::PlanBundle;

pub use encoder::{
    encode_ct_nodes, extract_patch, gather_patches, hu_normalize, EncoderConfig, EncoderKind,
};
pub use features::{dose_node_features, positional_encode, DoseNodeFeatures};
pub use gnn::{dosegnn_forward, DoseGnnConfig, DoseGnnModel, GnnPlanData};
pub use heuristic::{
    brute_force_knn, knn_ct_indices, resample_greedy, HeuristicConfig, HeuristicModel,
    HeuristicPlanData,
};
pub use params::ParamSet;

/// Any trained (or freshly initialized) predictor.
#[derive(Debug, Clone)]
pub enum Model {
    DoseGnn(DoseGnnModel),
    Heuristic(HeuristicModel),
}

/// Per-plan immutable forward-pass inputs, built once per plan and reused
/// across epochs.
pub enum PlanData {
    Gnn(GnnPlanData),
    Heuristic(HeuristicPlanData),
}

impl Model {
    pub fn kind(&self) -> &'static str {
        match self {
            Model::DoseGnn(_) => "dosegnn",
            Model::Heuristic(h) => {
                if h.config.variant == 1 {
                    "heuristic1"
                } else {
                    "heuristic2"
                }
            }
        }
    }

    pub fn params(&self) -> &ParamSet {
        match self {
            Model::DoseGnn(m) => &m.params,
            Model::Heuristic(m) => &m.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        match self {
            Model::DoseGnn(m) => &mut m.params,
            Model::Heuristic(m) => &mut m.params,
        }
    }

    /// Config echo as a JSON value.
    pub fn config_value(&self) -> Value {
        match self {
            Model::DoseGnn(m) => serde_json::to_value(&m.config).unwrap(),
            Model::Heuristic(m) => serde_json::to_value(&m.config).unwrap(),
        }
    }

    pub fn prepare_plan(
        &self,
        plan: &PlanBundle,
        graph_override: Option<&GraphConfig>,
    ) -> Result<PlanData> {
        match self {
            Model::DoseGnn(m) => Ok(PlanData::Gnn(m.prepare(plan, graph_override)?)),
            Model::Heuristic(m) => Ok(PlanData::Heuristic(m.prepare(plan)?)),
        }
    }

    /// Prediction in prescription-normalized units, shape `(n_dose, 1)`.
    pub fn forward_normalized(
        &self,
        tape: &mut Tape,
        leaves: &[Tensor],
        plan: &PlanBundle,
        data: &PlanData,
    ) -> Result<Tensor> {
        match (self, data) {
            (Model::DoseGnn(m), PlanData::Gnn(d)) => m.forward_normalized(tape, leaves, plan, d),
            (Model::Heuristic(m), PlanData::Heuristic(d)) => {
                m.forward_normalized(tape, leaves, plan, d)
            }
            _ => Err(Error::InvalidConfig(
                "plan data prepared for a different model kind".into(),
            )),
        }
    }

    /// Predicted dose in Gy over the plan's dose grid, flat order.
    pub fn predict(
        &self,
        plan: &PlanBundle,
        graph_override: Option<&GraphConfig>,
    ) -> Result<Vec<f64>> {
        match self {
            Model::DoseGnn(m) => m.predict(plan, graph_override),
            Model::Heuristic(m) => m.predict(plan),
        }
    }

    // --- on-disk format ------------------------------------------------------

    pub fn save(&self, path: &Path) -> Result<()> {
        let doc = serde_json::json!({
            "kind": self.kind(),
            "config": self.config_value(),
            "params": self.params().to_json(),
        });
        let text =
            serde_json::to_string_pretty(&doc).map_err(|e| Error::format(path, e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Model> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let doc: Value =
            serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        let kind = doc
            .get("kind")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::format(path, "missing 'kind'"))?;
        let config = doc
            .get("config")
            .ok_or_else(|| Error::format(path, "missing 'config'"))?;
        let params_json = doc
            .get("params")
            .ok_or_else(|| Error::format(path, "missing 'params'"))?;
        let mut model = match kind {
            "dosegnn" => {
                let cfg: DoseGnnConfig = serde_json::from_value(config.clone())
                    .map_err(|e| Error::format(path, e.to_string()))?;
                Model::DoseGnn(DoseGnnModel::init(cfg, 0)?)
            }
            "heuristic1" | "heuristic2" => {
                let cfg: HeuristicConfig = serde_json::from_value(config.clone())
                    .map_err(|e| Error::format(path, e.to_string()))?;
                let expected = if kind == "heuristic1" { 1 } else { 2 };
                if cfg.variant != expected {
                    return Err(Error::format(
                        path,
                        format!("kind '{kind}' but config variant {}", cfg.variant),
                    ));
                }
                Model::Heuristic(HeuristicModel::init(cfg, 0)?)
            }
            other => return Err(Error::format(path, format!("unknown model kind '{other}'"))),
        };
        model.params_mut().load_json(params_json)?;
        Ok(model)
    }
}
