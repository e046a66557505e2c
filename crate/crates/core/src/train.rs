//! BPR training of the parametric scorers.
//!
//! Gradients are analytic. [`grad_check`] compares them with central finite
//! differences of the same objective.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::TrainTriplet;
use crate::embed::{dot, EmbedError, EmbeddingMatrix, EmbeddingProvider};
use crate::gnn::{GnnArch, GnnError, GnnModel, GraphContext};
use crate::taskgraph::{NodeId, TaskGraph};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no training triplets")]
    EmptyTriplets,
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("triplet references node {0} outside the graph")]
    BadTriplet(NodeId),
    #[error("step embeddings have dim {got}, model output dim is {expected}")]
    StepDim { expected: usize, got: usize },
    #[error(transparent)]
    Gnn(#[from] GnnError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub seed: u64,
    pub l2: f64,
    /// Fraction of triplets held out to monitor early stopping. When the
    /// slice would be empty the training loss is monitored instead.
    pub holdout_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            epochs: 20,
            batch_size: 512,
            patience: 5,
            seed: 0,
            l2: 0.0,
            holdout_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.epochs == 0 || self.batch_size == 0 || self.patience == 0 {
            return bad("epochs, batch_size and patience must be at least 1");
        }
        if !(self.l2 >= 0.0) {
            return bad("l2 must be non-negative");
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return bad("holdout_fraction must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Architecture and sizes of the model to train.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: GnnArch,
    pub layers: usize,
    pub dim_out: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub monitor_losses: Vec<f64>,
    pub monitor: Monitor,
    /// Zero-based index into `epoch_losses`.
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub train_triplets: usize,
    pub holdout_triplets: usize,
    #[serde(skip)]
    pub final_model: Option<GnnModel>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Monitor {
    Holdout,
    Training,
}

/// `-ln σ(pos - neg)`, computed as a stable softplus.
pub fn bpr_loss(score_pos: f64, score_neg: f64) -> f64 {
    softplus(score_neg - score_pos)
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// A triplet whose step text has been replaced by a row of a step matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncodedTriplet {
    pub step: usize,
    pub positive: NodeId,
    pub negative: NodeId,
}

/// Mean BPR loss over a set of triplets, plus `l2/2 · ‖W‖²`.
pub struct Objective<'a> {
    pub ctx: &'a GraphContext,
    pub features: &'a EmbeddingMatrix,
    pub steps: &'a EmbeddingMatrix,
    pub l2: f64,
}

struct Cache {
    /// Per GCN layer: the propagated input `Â H` and the pre-activation.
    propagated: Vec<EmbeddingMatrix>,
    pre: Vec<EmbeddingMatrix>,
    neigh_mean: Option<EmbeddingMatrix>,
}

impl<'a> Objective<'a> {
    fn forward(&self, m: &GnnModel) -> Result<(EmbeddingMatrix, Cache), TrainError> {
        match m.arch {
            GnnArch::Sage => {
                let h = self.ctx.forward(self.features, m)?;
                let cache = Cache {
                    propagated: Vec::new(),
                    pre: Vec::new(),
                    neigh_mean: Some(self.ctx.neighbor_mean(self.features)),
                };
                Ok((h, cache))
            }
            GnnArch::Gcn => {
                m.validate()?;
                let mut h = self.features.clone();
                let mut cache = Cache {
                    propagated: Vec::new(),
                    pre: Vec::new(),
                    neigh_mean: None,
                };
                for (l, w) in m.weights.iter().enumerate() {
                    let p = self.ctx.adjacency.propagate(&h)?;
                    let z = p.matmul(w)?;
                    h = z.clone();
                    if l + 1 < m.weights.len() {
                        h.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
                    }
                    cache.propagated.push(p);
                    cache.pre.push(z);
                }
                Ok((h, cache))
            }
            GnnArch::Sgc => Err(GnnError::InvalidModel("sgc has no trainable weights".into()).into()),
        }
    }

    fn check(&self, m: &GnnModel, batch: &[EncodedTriplet]) -> Result<(), TrainError> {
        if self.steps.dim() != m.dim_out {
            return Err(TrainError::StepDim {
                expected: m.dim_out,
                got: self.steps.dim(),
            });
        }
        for t in batch {
            for v in [t.positive, t.negative] {
                if v >= self.ctx.n() {
                    return Err(TrainError::BadTriplet(v));
                }
            }
        }
        Ok(())
    }

    fn l2_term(&self, m: &GnnModel) -> f64 {
        if self.l2 == 0.0 {
            return 0.0;
        }
        0.5 * self.l2 * m.weights.iter().flat_map(|w| w.data()).map(|v| v * v).sum::<f64>()
    }

    pub fn loss(&self, m: &GnnModel, batch: &[EncodedTriplet]) -> Result<f64, TrainError> {
        if batch.is_empty() {
            return Err(TrainError::EmptyTriplets);
        }
        self.check(m, batch)?;
        let (h, _) = self.forward(m)?;
        Ok(self.bpr_mean(&h, batch) + self.l2_term(m))
    }

    fn bpr_mean(&self, h: &EmbeddingMatrix, batch: &[EncodedTriplet]) -> f64 {
        let total: f64 = batch
            .iter()
            .map(|t| {
                let x = self.steps.row(t.step);
                bpr_loss(dot(h.row(t.positive), x), dot(h.row(t.negative), x))
            })
            .sum();
        total / batch.len() as f64
    }

    /// Loss and its gradient with respect to each weight matrix.
    pub fn loss_and_grad(
        &self,
        m: &GnnModel,
        batch: &[EncodedTriplet],
    ) -> Result<(f64, Vec<EmbeddingMatrix>), TrainError> {
        if batch.is_empty() {
            return Err(TrainError::EmptyTriplets);
        }
        self.check(m, batch)?;
        let (h, cache) = self.forward(m)?;
        let loss = self.bpr_mean(&h, batch) + self.l2_term(m);

        // dL/dH: each triplet pushes its positive row towards the step and
        // its negative row away, weighted by σ(neg - pos).
        let scale = 1.0 / batch.len() as f64;
        let mut grad_h = EmbeddingMatrix::zeros(h.rows(), h.dim());
        for t in batch {
            let x = self.steps.row(t.step);
            let delta = dot(h.row(t.positive), x) - dot(h.row(t.negative), x);
            let w = sigmoid(-delta) * scale;
            for (g, &xv) in grad_h.row_mut(t.positive).iter_mut().zip(x) {
                *g -= w * xv;
            }
            for (g, &xv) in grad_h.row_mut(t.negative).iter_mut().zip(x) {
                *g += w * xv;
            }
        }

        let mut grads = match m.arch {
            GnnArch::Sage => {
                let mean = cache.neigh_mean.as_ref().expect("sage cache");
                vec![self.features.t_matmul(&grad_h)?, mean.t_matmul(&grad_h)?]
            }
            GnnArch::Gcn => {
                let layers = m.weights.len();
                let mut grads = vec![EmbeddingMatrix::zeros(0, 0); layers];
                let mut dz = grad_h;
                for l in (0..layers).rev() {
                    grads[l] = cache.propagated[l].t_matmul(&dz)?;
                    if l == 0 {
                        break;
                    }
                    // Â is symmetric, so its transpose is itself.
                    let dp = dz.matmul_t(&m.weights[l])?;
                    let mut dh = self.ctx.adjacency.propagate(&dp)?;
                    for (d, &z) in dh.data_mut().iter_mut().zip(cache.pre[l - 1].data()) {
                        if z <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    dz = dh;
                }
                grads
            }
            GnnArch::Sgc => unreachable!("rejected by forward"),
        };
        if self.l2 != 0.0 {
            for (g, w) in grads.iter_mut().zip(&m.weights) {
                for (gv, &wv) in g.data_mut().iter_mut().zip(w.data()) {
                    *gv += self.l2 * wv;
                }
            }
        }
        Ok((loss, grads))
    }
}

/// Max relative error between the analytic gradient and central finite
/// differences, over every weight. Relative error is
/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn grad_check(obj: &Objective, model: &GnnModel, batch: &[EncodedTriplet], epsilon: f64) -> Result<f64, TrainError> {
    grad_check_with(obj, model, batch, epsilon, |m| Ok(obj.loss_and_grad(m, batch)?.1))
}

/// As [`grad_check`], with the analytic gradient supplied by the caller.
pub fn grad_check_with(
    obj: &Objective,
    model: &GnnModel,
    batch: &[EncodedTriplet],
    epsilon: f64,
    analytic: impl Fn(&GnnModel) -> Result<Vec<EmbeddingMatrix>, TrainError>,
) -> Result<f64, TrainError> {
    let grads = analytic(model)?;
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for (wi, g) in grads.iter().enumerate() {
        for k in 0..g.data().len() {
            let orig = probe.weights[wi].data()[k];
            probe.weights[wi].data_mut()[k] = orig + epsilon;
            let up = obj.loss(&probe, batch)?;
            probe.weights[wi].data_mut()[k] = orig - epsilon;
            let down = obj.loss(&probe, batch)?;
            probe.weights[wi].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * epsilon);
            let a = g.data()[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

struct Adam {
    lr: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(lr: f64, model: &GnnModel) -> Self {
        let zeros: Vec<Vec<f64>> = model.weights.iter().map(|w| vec![0.0; w.data().len()]).collect();
        Self {
            lr,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    fn step(&mut self, model: &mut GnnModel, grads: &[EmbeddingMatrix]) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for (i, (w, g)) in model.weights.iter_mut().zip(grads).enumerate() {
            for (k, (wv, &gv)) in w.data_mut().iter_mut().zip(g.data()).enumerate() {
                let m = &mut self.m[i][k];
                let v = &mut self.v[i][k];
                *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * gv;
                *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * gv * gv;
                *wv -= self.lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
            }
        }
    }
}

/// Embeds the distinct step texts once, in sorted order, and rewrites the
/// triplets against rows of the resulting matrix.
pub fn encode_triplets(
    triplets: &[TrainTriplet],
    embedder: &dyn EmbeddingProvider,
) -> Result<(EmbeddingMatrix, Vec<EncodedTriplet>), TrainError> {
    let texts: Vec<String> = triplets
        .iter()
        .map(|t| t.step_text.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if texts.is_empty() {
        return Err(TrainError::EmptyTriplets);
    }
    let steps = embedder.embed_texts(&texts)?;
    let encoded = triplets
        .iter()
        .map(|t| EncodedTriplet {
            step: texts.binary_search(&t.step_text).expect("text indexed"),
            positive: t.positive,
            negative: t.negative,
        })
        .collect();
    Ok((steps, encoded))
}

/// Minibatch Adam on the mean BPR loss. Returns the model from the epoch
/// with the lowest monitored loss.
pub fn train_model(
    g: &TaskGraph,
    node_features: &EmbeddingMatrix,
    triplets: &[TrainTriplet],
    step_embedder: &dyn EmbeddingProvider,
    spec: ModelSpec,
    cfg: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    if triplets.is_empty() {
        return Err(TrainError::EmptyTriplets);
    }
    let (steps, encoded) = encode_triplets(triplets, step_embedder)?;
    let ctx = GraphContext::new(g);
    train_encoded(&ctx, node_features, &steps, &encoded, spec, cfg)
}

/// [`train_model`] on pre-embedded steps.
pub fn train_encoded(
    ctx: &GraphContext,
    node_features: &EmbeddingMatrix,
    steps: &EmbeddingMatrix,
    triplets: &[EncodedTriplet],
    spec: ModelSpec,
    cfg: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    if triplets.is_empty() {
        return Err(TrainError::EmptyTriplets);
    }
    if !matches!(spec.arch, GnnArch::Sage | GnnArch::Gcn) {
        return Err(TrainError::InvalidConfig("only sage and gcn are trainable".into()));
    }
    let obj = Objective {
        ctx,
        features: node_features,
        steps,
        l2: cfg.l2,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..triplets.len()).collect();
    order.shuffle(&mut rng);
    let holdout_n = (triplets.len() as f64 * cfg.holdout_fraction).floor() as usize;
    let (holdout, train): (Vec<EncodedTriplet>, Vec<EncodedTriplet>) = if holdout_n == 0 || holdout_n == triplets.len() {
        (Vec::new(), order.iter().map(|&i| triplets[i]).collect())
    } else {
        (
            order[..holdout_n].iter().map(|&i| triplets[i]).collect(),
            order[holdout_n..].iter().map(|&i| triplets[i]).collect(),
        )
    };
    let monitor = if holdout.is_empty() {
        Monitor::Training
    } else {
        Monitor::Holdout
    };

    let mut model = GnnModel::init(
        spec.arch,
        spec.layers,
        node_features.dim(),
        spec.dim_out,
        cfg.seed.wrapping_add(1),
    )?;
    let mut adam = Adam::new(cfg.lr, &model);
    let mut report = TrainReport {
        epoch_losses: Vec::new(),
        monitor_losses: Vec::new(),
        monitor,
        best_epoch: 0,
        stopped_early: false,
        train_triplets: train.len(),
        holdout_triplets: holdout.len(),
        final_model: None,
    };
    let mut best = f64::INFINITY;
    let mut best_model = model.clone();
    let mut batch_order: Vec<usize> = (0..train.len()).collect();
    let mut batch = Vec::with_capacity(cfg.batch_size);

    for epoch in 0..cfg.epochs {
        batch_order.shuffle(&mut rng);
        for (b, chunk) in batch_order.chunks(cfg.batch_size).enumerate() {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| train[i]));
            let (loss, grads) = obj.loss_and_grad(&model, &batch)?;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch: b });
            }
            adam.step(&mut model, &grads);
        }
        let train_loss = obj.loss(&model, &train)?;
        let monitored = match monitor {
            Monitor::Holdout => obj.loss(&model, &holdout)?,
            Monitor::Training => train_loss,
        };
        if !(train_loss.is_finite() && monitored.is_finite()) {
            return Err(TrainError::NonFiniteLoss {
                epoch,
                batch: usize::MAX,
            });
        }
        report.epoch_losses.push(train_loss);
        report.monitor_losses.push(monitored);
        if monitored < best {
            best = monitored;
            report.best_epoch = epoch;
            best_model = model.clone();
        } else if epoch - report.best_epoch >= cfg.patience {
            report.stopped_early = true;
            break;
        }
    }
    report.final_model = Some(best_model);
    Ok(report)
}
