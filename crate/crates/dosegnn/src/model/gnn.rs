//! The bipartite graph regressor: encoder embeddings on CT nodes, positional
//! encodings on dose nodes, mean message passing CT -> dose, scalar readout.
//!
//! CT embeddings stay fixed across rounds and the message MLP is shared, so
//! the aggregated message per dose node is computed once; each round then
//! updates the dose-node state from `concat(state, message)`. The readout is
//! an unconstrained linear head trained in prescription-normalized units and
//! rescaled to Gy on output.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Adjacency, Tape, Tensor};
use crate::error::{Error, Result};
use crate::graph::{build_graph, GraphConfig};
use crate::rng::{child_seed, streams, SplitMix64};
use crate::volume::PlanBundle;

use super::encoder::{encoder_forward, gather_patches, init_encoder, EncoderConfig, EncoderLayout};
use super::features::{dose_node_features, positional_encode_all};
use super::params::{init_mlp, mlp_forward, MlpLayout, ParamSet};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DoseGnnConfig {
    pub encoder: EncoderConfig,
    pub graph: GraphConfig,
    /// Sinusoidal positional-encoding base.
    pub pe_base: f64,
    /// Message-passing rounds.
    pub n_rounds: usize,
    pub msg_hidden: Vec<usize>,
    pub update_hidden: Vec<usize>,
    pub readout_hidden: Vec<usize>,
}

impl Default for DoseGnnConfig {
    fn default() -> Self {
        DoseGnnConfig {
            encoder: EncoderConfig::default(),
            graph: GraphConfig::default(),
            pe_base: 10000.0,
            n_rounds: 2,
            msg_hidden: vec![],
            update_hidden: vec![64],
            readout_hidden: vec![64],
        }
    }
}

impl DoseGnnConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.graph.validate()?;
        if self.encoder.embed_dim % 4 != 0 {
            return Err(Error::InvalidConfig(format!(
                "embed_dim must be divisible by 4 to carry two positional-encoded \
                 features, got {}",
                self.encoder.embed_dim
            )));
        }
        if self.n_rounds == 0 {
            return Err(Error::InvalidConfig("n_rounds must be >= 1".into()));
        }
        if !(self.pe_base > 1.0) {
            return Err(Error::InvalidConfig("pe_base must be > 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct DoseGnnLayout {
    enc: EncoderLayout,
    msg: MlpLayout,
    update: MlpLayout,
    readout: MlpLayout,
}

#[derive(Debug, Clone)]
pub struct DoseGnnModel {
    pub config: DoseGnnConfig,
    pub params: ParamSet,
    layout: DoseGnnLayout,
}

/// Per-plan immutable inputs to the GNN forward pass.
pub struct GnnPlanData {
    pub ct_flats: Vec<u32>,
    pub adjacency: Arc<Adjacency>,
    /// `(n_dose, d)` positional encodings, row-major.
    pub pos_enc: Vec<f64>,
    pub n_dose: usize,
}

impl DoseGnnModel {
    /// Fresh model with parameters drawn from the init stream of `seed`.
    pub fn init(config: DoseGnnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SplitMix64::new(child_seed(seed, streams::INIT));
        let mut params = ParamSet::new();
        let d = config.encoder.embed_dim;
        let enc = init_encoder(&config.encoder, &mut params, &mut rng)?;
        let msg = init_mlp(&mut params, &mut rng, "msg", d, &config.msg_hidden, d);
        let update = init_mlp(
            &mut params,
            &mut rng,
            "upd",
            2 * d,
            &config.update_hidden,
            d,
        );
        let readout = init_mlp(&mut params, &mut rng, "out", d, &config.readout_hidden, 1);
        Ok(DoseGnnModel {
            config,
            params,
            layout: DoseGnnLayout {
                enc,
                msg,
                update,
                readout,
            },
        })
    }

    /// Builds the graph and dose-node encodings for one plan.
    pub fn prepare(
        &self,
        plan: &PlanBundle,
        graph_override: Option<&GraphConfig>,
    ) -> Result<GnnPlanData> {
        let graph_cfg = graph_override.unwrap_or(&self.config.graph);
        let graph = build_graph(&plan.ct.geom, &plan.dose_geom, graph_cfg)?;
        let adjacency = Arc::new(Adjacency::new(
            graph.n_ct(),
            graph.offsets.clone(),
            graph.neighbors.clone(),
        )?);
        let feats = dose_node_features(&plan.dose_geom, plan.ptv_center);
        let d = self.config.encoder.embed_dim;
        let pos_enc = positional_encode_all(&feats, d, self.config.pe_base)?;
        Ok(GnnPlanData {
            ct_flats: graph.ct_flat,
            adjacency,
            pos_enc,
            n_dose: graph.dose_flat.len(),
        })
    }

    /// Prediction in prescription-normalized units, shape `(n_dose, 1)`.
    pub fn forward_normalized(
        &self,
        tape: &mut Tape,
        leaves: &[Tensor],
        plan: &PlanBundle,
        data: &GnnPlanData,
    ) -> Result<Tensor> {
        let cfg = &self.config;
        let d = cfg.encoder.embed_dim;
        let n_ct = data.ct_flats.len();
        let patches = gather_patches(&plan.ct, &data.ct_flats, cfg.encoder.patch_size);
        let patches = tape.leaf(&[n_ct, cfg.encoder.patch_len()], patches, false)?;
        let embeddings =
            encoder_forward(tape, leaves, &cfg.encoder, &self.layout.enc, patches, n_ct)?;
        dosegnn_rounds(
            self,
            tape,
            leaves,
            embeddings,
            data.pos_enc.clone(),
            data.n_dose,
            d,
            Arc::clone(&data.adjacency),
        )
    }

    /// Predicted dose in Gy, flat dose-grid order.
    pub fn predict(
        &self,
        plan: &PlanBundle,
        graph_override: Option<&GraphConfig>,
    ) -> Result<Vec<f64>> {
        let data = self.prepare(plan, graph_override)?;
        let mut tape = Tape::new();
        let leaves = self.params.leaves(&mut tape, false)?;
        let out = self.forward_normalized(&mut tape, &leaves, plan, &data)?;
        let rx = plan.prescription_dose;
        Ok(tape.value(out).iter().map(|v| v * rx).collect())
    }
}

/// Message passing and readout given already-computed CT embeddings, in
/// normalized units.
#[allow(clippy::too_many_arguments)]
fn dosegnn_rounds(
    model: &DoseGnnModel,
    tape: &mut Tape,
    leaves: &[Tensor],
    ct_embeddings: Tensor,
    dose_encodings: Vec<f64>,
    n_dose: usize,
    d: usize,
    adjacency: Arc<Adjacency>,
) -> Result<Tensor> {
    if adjacency.n_out != n_dose {
        return Err(Error::Shape {
            op: "dosegnn_forward",
            detail: format!(
                "adjacency has {} dose rows, encodings have {n_dose}",
                adjacency.n_out
            ),
        });
    }
    let msgs = mlp_forward(tape, leaves, &model.layout.msg, ct_embeddings, true)?;
    // CT embeddings are fixed across rounds, so the mean message per dose
    // node is round-invariant: aggregate once.
    let agg = tape.csr_mean(msgs, adjacency)?;
    let mut h = tape.leaf(&[n_dose, d], dose_encodings, false)?;
    for _ in 0..model.config.n_rounds {
        let cat = tape.concat_cols(h, agg)?;
        h = mlp_forward(tape, leaves, &model.layout.update, cat, false)?;
    }
    mlp_forward(tape, leaves, &model.layout.readout, h, false)
}

/// Full forward pass from externally supplied CT embeddings and dose-node
/// encodings to predicted dose in Gy, shape `(n_dose, 1)`.
#[allow(clippy::too_many_arguments)]
pub fn dosegnn_forward(
    model: &DoseGnnModel,
    tape: &mut Tape,
    leaves: &[Tensor],
    adjacency: Arc<Adjacency>,
    ct_embeddings: Tensor,
    dose_encodings: Vec<f64>,
    n_dose: usize,
    prescription_dose: f64,
) -> Result<Tensor> {
    let d = model.config.encoder.embed_dim;
    let normalized = dosegnn_rounds(
        model,
        tape,
        leaves,
        ct_embeddings,
        dose_encodings,
        n_dose,
        d,
        adjacency,
    )?;
    Ok(tape.scale(normalized, prescription_dose))
}
