//! Supervised training of the linkage scorer.
//!
//! Every labeled node is a query; its hop1 candidates are labeled positive
//! when they share the query's identity. A step scores one batch of
//! queries on a single tape, takes the mean binary cross-entropy over all
//! (query, candidate) pairs and applies one optimizer update.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{LinkError, Result};
use crate::graph::{FeatureStore, NeighborGraph};
use crate::model::{score_batch, ModelConfig, ModelParameters, QueryBatch, Variant};
use crate::numcore::tape::BCE_CLAMP;
use crate::numcore::{rng_stream, DropoutSpec, Forward, RngStream};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// SGD with heavy-ball momentum.
    #[default]
    Sgd,
    /// Adam with decoupled weight decay.
    AdamW,
}

impl std::str::FromStr for OptimizerKind {
    type Err = LinkError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "adamw" | "adam_w" => Ok(Self::AdamW),
            _ => Err(LinkError::Usage(format!("unknown optimizer {s:?} (sgd, adamw)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Queries per step.
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub momentum: f64,
    pub optimizer: OptimizerKind,
    pub hop1: usize,
    pub hop2: usize,
    pub dropout: f64,
    pub heads: usize,
    pub head_dim: usize,
    pub depth: usize,
    /// Classifier hidden width; the feature dimension when unset.
    pub hidden: Option<usize>,
    pub query_in_predictor: bool,
    /// Rotate all features by a fresh random orthogonal matrix every step.
    pub rotate: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            base_lr: 0.002,
            warmup_steps: 500,
            epochs: 60,
            weight_decay: 0.0005,
            momentum: 0.9,
            optimizer: OptimizerKind::Sgd,
            hop1: 150,
            hop2: 5,
            dropout: 0.4,
            heads: 2,
            head_dim: 16,
            depth: 2,
            hidden: None,
            query_in_predictor: false,
            rotate: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(LinkError::Config("batch size must be at least 1".into()));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(LinkError::Config(format!("learning rate {} is invalid", self.base_lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(LinkError::Config(format!(
                "weight decay {} is invalid",
                self.weight_decay
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(LinkError::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(LinkError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn model_config(&self, dim: usize) -> ModelConfig {
        ModelConfig {
            hidden: self.hidden.unwrap_or(dim),
            query_in_predictor: self.query_in_predictor,
            ..ModelConfig::new(dim, self.heads, self.head_dim, self.depth)
        }
    }

    pub fn total_steps(&self, samples: usize) -> usize {
        self.epochs * samples.div_ceil(self.batch_size)
    }
}

/// One query with its candidates and their same-identity labels.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub query: usize,
    pub candidates: Vec<usize>,
    pub labels: Vec<f32>,
}

/// One sample per labeled node, in node order. Unlabeled candidates never
/// count as positives.
pub fn make_samples(store: &FeatureStore, graph: &NeighborGraph) -> Result<Vec<TrainingSample>> {
    let labels = store.require_labels("training")?;
    if graph.len() != store.len() {
        return Err(LinkError::Usage(format!(
            "graph covers {} nodes but {} features were given",
            graph.len(),
            store.len()
        )));
    }
    (0..store.len())
        .filter(|&q| labels[q] >= 0)
        .map(|q| {
            let candidates = graph.candidates_of(q)?;
            let labels = candidates
                .iter()
                .map(|&c| if labels[c] == labels[q] { 1.0 } else { 0.0 })
                .collect();
            Ok(TrainingSample {
                query: q,
                candidates,
                labels,
            })
        })
        .collect()
}

/// Sample order for every epoch, drawn from the shuffle stream of `seed`.
pub fn epoch_orders(samples: usize, epochs: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = rng_stream(seed, RngStream::Shuffle);
    (0..epochs)
        .map(|_| {
            let mut order: Vec<usize> = (0..samples).collect();
            order.shuffle(&mut rng);
            order
        })
        .collect()
}

/// Haar-random orthogonal `dim × dim` matrix (row-major) by Gram-Schmidt
/// on a Gaussian matrix.
pub fn random_rotation(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while rows.len() < dim {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        for r in &rows {
            let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(r).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|a| *a /= norm);
            rows.push(v);
        }
    }
    rows.concat()
}

/// `store` with every row multiplied by `rotation`. Similarities, and so
/// the neighbor graph, are unchanged.
pub fn rotate_store(store: &FeatureStore, rotation: &[f64]) -> Result<FeatureStore> {
    let d = store.dim();
    let mut out = Vec::with_capacity(store.len() * d);
    for i in 0..store.len() {
        let row = store.row(i);
        for j in 0..d {
            out.push((0..d).map(|k| row[k] as f64 * rotation[j * d + k]).sum::<f64>() as f32);
        }
    }
    FeatureStore::new(store.len(), d, out, store.labels().map(|l| l.to_vec()))
}

/// Mean binary cross-entropy with probabilities clamped away from 0 and 1.
pub fn linkage_loss(probs: &[f32], labels: &[f32]) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(LinkError::Usage(format!(
            "{} probabilities against {} labels",
            probs.len(),
            labels.len()
        )));
    }
    if probs.is_empty() {
        return Err(LinkError::Usage("loss over an empty candidate list".into()));
    }
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = (p as f64).clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            let y = y as f64;
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / probs.len() as f64)
}

/// Linear warm-up to `base_lr`, then cosine decay towards zero.
pub fn lr_at(step: usize, cfg: &TrainConfig, total_steps: usize) -> f64 {
    let w = cfg.warmup_steps;
    if step < w {
        return cfg.base_lr * (step + 1) as f64 / w as f64;
    }
    let span = total_steps.saturating_sub(w).max(1) as f64;
    let progress = ((step - w) as f64 / span).min(1.0);
    cfg.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Per-parameter optimizer state.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    momentum: f64,
    weight_decay: f64,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
    steps: u32,
}

const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(kind: OptimizerKind, momentum: f64, weight_decay: f64, model: &ModelParameters) -> Self {
        let zeros: Vec<Vec<f32>> = model
            .store
            .entries()
            .iter()
            .map(|e| vec![0.0; e.tensor.len()])
            .collect();
        Self {
            kind,
            momentum,
            weight_decay,
            second: if kind == OptimizerKind::AdamW {
                zeros.clone()
            } else {
                Vec::new()
            },
            first: zeros,
            steps: 0,
        }
    }

    /// Apply the accumulated gradients with learning rate `lr`. Weight
    /// decay shrinks decaying tensors by `lr · weight_decay` independently
    /// of the gradient.
    pub fn step(&mut self, model: &mut ModelParameters, lr: f64) {
        self.steps += 1;
        let t = self.steps as i32;
        let mu = self.momentum;
        for (idx, entry) in model.store.entries_mut().iter_mut().enumerate() {
            let Some(grad) = entry.tensor.grad().map(|g| g.to_vec()) else {
                continue;
            };
            let shrink = if entry.decay { lr * self.weight_decay } else { 0.0 };
            let first = &mut self.first[idx];
            let data = entry.tensor.data_mut();
            match self.kind {
                OptimizerKind::Sgd => {
                    for ((w, v), &g) in data.iter_mut().zip(first.iter_mut()).zip(&grad) {
                        let vel = mu * *v as f64 + g as f64;
                        *v = vel as f32;
                        *w = (*w as f64 - lr * vel - shrink * *w as f64) as f32;
                    }
                }
                OptimizerKind::AdamW => {
                    let second = &mut self.second[idx];
                    let c1 = 1.0 - mu.powi(t);
                    let c2 = 1.0 - ADAM_BETA2.powi(t);
                    for (((w, m), s), &g) in data.iter_mut().zip(first.iter_mut()).zip(second.iter_mut()).zip(&grad) {
                        let g = g as f64;
                        let m1 = mu * *m as f64 + (1.0 - mu) * g;
                        let s1 = ADAM_BETA2 * *s as f64 + (1.0 - ADAM_BETA2) * g * g;
                        *m = m1 as f32;
                        *s = s1 as f32;
                        let update = (m1 / c1) / ((s1 / c2).sqrt() + ADAM_EPS);
                        *w = (*w as f64 - lr * update - shrink * *w as f64) as f32;
                    }
                }
            }
        }
    }
}

/// Per-epoch summary.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: ModelParameters,
    pub trace: Vec<EpochStats>,
}

/// Train `variant` from scratch. The naive variant has nothing to learn
/// and returns at once with an empty trace.
pub fn train(store: &FeatureStore, graph: &NeighborGraph, cfg: &TrainConfig, variant: Variant) -> Result<TrainOutcome> {
    train_with(store, graph, cfg, variant, |_, _| Ok(()))
}

/// [`train`] calling `on_epoch` after every epoch, e.g. to log or write a
/// checkpoint.
pub fn train_with(
    store: &FeatureStore,
    graph: &NeighborGraph,
    cfg: &TrainConfig,
    variant: Variant,
    mut on_epoch: impl FnMut(&EpochStats, &ModelParameters) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut model = ModelParameters::init(variant, cfg.model_config(store.dim()), cfg.seed)?;
    let samples = make_samples(store, graph)?;
    if variant == Variant::Naive {
        return Ok(TrainOutcome {
            model,
            trace: Vec::new(),
        });
    }
    if samples.is_empty() {
        return Err(LinkError::Usage("no labeled nodes to train on".into()));
    }
    let total_steps = cfg.total_steps(samples.len());
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.momentum, cfg.weight_decay, &model);
    let mut dropout = DropoutSpec::new(cfg.dropout, cfg.seed, true)?;
    let mut augment = rng_stream(cfg.seed, RngStream::Augment);
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;

    for (epoch, order) in epoch_orders(samples.len(), cfg.epochs, cfg.seed)
        .into_iter()
        .enumerate()
    {
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        let mut lr = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            lr = lr_at(step, cfg, total_steps);
            let queries: Vec<usize> = chunk.iter().map(|&i| samples[i].query).collect();
            let labels: Vec<f32> = chunk.iter().flat_map(|&i| samples[i].labels.iter().copied()).collect();
            let as_training = |e: LinkError| match e {
                LinkError::Numeric(msg) => LinkError::Training { step, msg },
                other => other,
            };

            let batch = QueryBatch::new(graph, &queries)?;
            let rotated = if cfg.rotate {
                Some(rotate_store(store, &random_rotation(&mut augment, store.dim()))?)
            } else {
                None
            };
            let mut fw = Forward::new(&model.store, dropout);
            let probs =
                score_batch(&mut fw, &model, rotated.as_ref().unwrap_or(store), graph, &batch).map_err(as_training)?;
            let loss = fw.tape.bce(probs, &labels)?;
            let value = fw.tape.value(loss)[0] as f64;
            if !value.is_finite() {
                return Err(LinkError::Training {
                    step,
                    msg: format!("loss became {value}"),
                });
            }
            dropout = std::mem::replace(&mut fw.dropout, DropoutSpec::eval());
            let (grads, bound) = fw.backward(loss)?;
            model.store.zero_grads();
            model.store.absorb(&grads, &bound)?;
            optimizer.step(&mut model, lr);

            loss_sum += value;
            batches += 1;
            step += 1;
        }
        let stats = EpochStats {
            epoch,
            mean_loss: loss_sum / batches as f64,
            lr,
        };
        log::info!("epoch {epoch}: loss {:.5} lr {:.6}", stats.mean_loss, stats.lr);
        on_epoch(&stats, &model)?;
        trace.push(stats);
    }
    model.store.zero_grads();
    Ok(TrainOutcome { model, trace })
}

/// Loss trace as CSV with an `epoch,mean_loss,lr` header.
pub fn write_trace(mut w: impl Write, trace: &[EpochStats]) -> std::io::Result<()> {
    writeln!(w, "epoch,mean_loss,lr")?;
    for s in trace {
        writeln!(w, "{},{},{}", s.epoch, s.mean_loss, s.lr)?;
    }
    Ok(())
}
