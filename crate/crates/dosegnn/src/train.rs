//! Deterministic training: dataset splitting, per-plan Adam steps on the
//! prescription-normalized MSE, and the training report.
//!
//! One plan is one optimization step (graphs differ per plan, so plan-level
//! batching is the natural unit). Plans are visited in a seeded shuffled
//! order per epoch; per-plan graph structures and dose encodings are built
//! once and reused across epochs.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::graph::GraphConfig;
use crate::model::{
    DoseGnnConfig, DoseGnnModel, EncoderConfig, HeuristicConfig, HeuristicModel, Model, PlanData,
};
use crate::rng::{child_seed, streams, SplitMix64};
use crate::volume::PlanBundle;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            n_train: 15,
            n_test: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning_rate must be > 0".into()));
        }
        if self.n_train == 0 {
            return Err(Error::InvalidConfig("n_train must be >= 1".into()));
        }
        Ok(())
    }
}

/// Deterministic train/test membership (sorted index lists).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Splits `0..n` into `n_train`/`n_test` by a seeded shuffle.
pub fn split_indices(n: usize, cfg: &TrainConfig) -> Result<SplitIndices> {
    cfg.validate()?;
    if cfg.n_train + cfg.n_test != n {
        return Err(Error::InvalidConfig(format!(
            "split {}+{} does not cover the {} plans",
            cfg.n_train, cfg.n_test, n
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = SplitMix64::new(child_seed(cfg.seed, streams::SPLIT));
    rng.shuffle(&mut order);
    let mut train: Vec<usize> = order[..cfg.n_train].to_vec();
    let mut test: Vec<usize> = order[cfg.n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok(SplitIndices { train, test })
}

/// Splits a dataset into disjoint, covering train and test sets.
pub fn split_dataset<'a, T>(items: &'a [T], cfg: &TrainConfig) -> Result<(Vec<&'a T>, Vec<&'a T>)> {
    let idx = split_indices(items.len(), cfg)?;
    Ok((
        idx.train.iter().map(|&i| &items[i]).collect(),
        idx.test.iter().map(|&i| &items[i]).collect(),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    DoseGnn,
    Heuristic1,
    Heuristic2,
}

impl std::str::FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dosegnn" => Ok(ModelKind::DoseGnn),
            "heuristic1" => Ok(ModelKind::Heuristic1),
            "heuristic2" => Ok(ModelKind::Heuristic2),
            other => Err(Error::Usage(format!("unknown model kind '{other}'"))),
        }
    }
}

/// Fresh model of the given kind; `k` applies to heuristic 2 only.
pub fn init_model(
    kind: ModelKind,
    encoder: &EncoderConfig,
    graph: &GraphConfig,
    k: usize,
    seed: u64,
) -> Result<Model> {
    match kind {
        ModelKind::DoseGnn => {
            let cfg = DoseGnnConfig {
                encoder: encoder.clone(),
                graph: *graph,
                ..DoseGnnConfig::default()
            };
            Ok(Model::DoseGnn(DoseGnnModel::init(cfg, seed)?))
        }
        ModelKind::Heuristic1 => Ok(Model::Heuristic(HeuristicModel::init(
            HeuristicConfig::variant1(encoder.clone()),
            seed,
        )?)),
        ModelKind::Heuristic2 => Ok(Model::Heuristic(HeuristicModel::init(
            HeuristicConfig::variant2(encoder.clone(), k),
            seed,
        )?)),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss per epoch (normalized units).
    pub epoch_loss: Vec<f64>,
    pub param_checksum: String,
    pub wall_seconds: f64,
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    fn new(model: &Model) -> Self {
        let sizes: Vec<usize> = model.params().iter().map(|p| p.data.len()).collect();
        Adam {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    fn step(&mut self, model: &mut Model, grads: &[Vec<f64>], cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        let params = model.params_mut();
        for (idx, grad) in grads.iter().enumerate() {
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let data = params.data_mut(idx);
            for i in 0..grad.len() {
                let g = grad[i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
    }
}

/// Trains a freshly initialized model of `kind` on the given plans.
pub fn train_model(
    kind: ModelKind,
    encoder: &EncoderConfig,
    graph: &GraphConfig,
    train: &[&PlanBundle],
    cfg: &TrainConfig,
) -> Result<(Model, TrainReport)> {
    let model = init_model(kind, encoder, graph, 8, cfg.seed)?;
    train_prepared(model, train, cfg)
}

/// Trains an already-initialized model; the entry point for custom
/// hyperparameters.
pub fn train_prepared(
    mut model: Model,
    train: &[&PlanBundle],
    cfg: &TrainConfig,
) -> Result<(Model, TrainReport)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidConfig("empty training set".into()));
    }
    let start = Instant::now();

    // Per-plan immutable context: graph/kNN structure, dose encodings, and
    // the normalized regression target.
    let mut contexts: Vec<PlanData> = Vec::with_capacity(train.len());
    let mut targets: Vec<Vec<f64>> = Vec::with_capacity(train.len());
    for plan in train {
        contexts.push(model.prepare_plan(plan, None)?);
        let truth = plan.dose_truth()?;
        let rx = plan.prescription_dose;
        targets.push(truth.values.iter().map(|&v| f64::from(v) / rx).collect());
    }

    let mut adam = Adam::new(&model);
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    let shuffle_seed = child_seed(cfg.seed, streams::SHUFFLE);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = SplitMix64::new(child_seed(shuffle_seed, epoch as u64));
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        for &pi in &order {
            let mut tape = Tape::new();
            let leaves = model.params().leaves(&mut tape, true)?;
            let out = model.forward_normalized(&mut tape, &leaves, train[pi], &contexts[pi])?;
            let n_dose = targets[pi].len();
            let target = tape.leaf(&[n_dose, 1], targets[pi].clone(), false)?;
            let loss = tape.mse_loss(out, target)?;
            let loss_value = tape.value(loss)[0];
            if !loss_value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, plan: pi });
            }
            loss_sum += loss_value;
            tape.backward(loss)?;
            let grads: Vec<Vec<f64>> = leaves
                .iter()
                .enumerate()
                .map(|(i, &leaf)| {
                    tape.grad(leaf)
                        .map(<[f64]>::to_vec)
                        .unwrap_or_else(|| vec![0.0; model.params().get(i).data.len()])
                })
                .collect();
            adam.step(&mut model, &grads, cfg);
        }
        epoch_loss.push(loss_sum / train.len() as f64);
    }

    let report = TrainReport {
        epoch_loss,
        param_checksum: model.params().checksum(),
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    Ok((model, report))
}
