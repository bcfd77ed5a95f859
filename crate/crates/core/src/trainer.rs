//! SGD fine-tuning of the patch classifier and AUC evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Patch;
use crate::error::{Error, Result};
use crate::model::{InputNorm, Layer, LayerOp, Model};
use crate::ops::{self, ConvSpec};
use crate::tensor::Tensor;

/// Layer id of DissectNet-T's final convolution, the default dissection target.
pub const DISSECTNET_TARGET: &str = "conv3";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 10,
            batch_size: 32,
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "weight decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Velocity buffers, one per trainable parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumState {
    velocity: Vec<Tensor>,
}

impl MomentumState {
    pub fn new(model: &Model) -> Self {
        Self::for_params(model.params().iter().map(|(_, t)| *t))
    }

    pub fn for_params<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        Self {
            velocity: params.into_iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }
}

/// Classical momentum with L2 decay folded into the gradient:
/// `v <- mu*v + (g + lambda*w)`, `w <- w - lr*v`.
///
/// All gradients are checked before any parameter moves; a non-finite
/// gradient aborts with the parameter's name.
pub fn sgd_step(
    params: &mut [&mut Tensor],
    names: &[String],
    grads: &[Tensor],
    state: &mut MomentumState,
    cfg: &TrainConfig,
) -> Result<()> {
    let n = params.len();
    if grads.len() != n || state.velocity.len() != n || names.len() != n {
        return Err(Error::Shape(format!(
            "sgd_step got {n} params, {} grads, {} velocities, {} names",
            grads.len(),
            state.velocity.len(),
            names.len()
        )));
    }
    for i in 0..n {
        if params[i].shape() != grads[i].shape() || params[i].shape() != state.velocity[i].shape() {
            return Err(Error::Shape(format!(
                "parameter `{}` is {:?} but gradient is {:?} and velocity {:?}",
                names[i],
                params[i].shape(),
                grads[i].shape(),
                state.velocity[i].shape()
            )));
        }
        if grads[i].check_finite().is_err() {
            return Err(Error::NonFiniteGradient(names[i].clone()));
        }
    }
    let (lr, mu, wd) = (cfg.learning_rate, cfg.momentum, cfg.weight_decay);
    for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut state.velocity) {
        for ((w, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vv = mu * *vv + (gv + wd * *w);
            *w -= lr * *vv;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochMetrics>,
}

impl TrainOutcome {
    pub fn loss_curve(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.mean_loss).collect()
    }
}

/// Loss and parameter gradients for one patch.
pub fn sample_gradients(model: &Model, patch: &Patch) -> Result<(f32, Vec<Tensor>)> {
    let trace = model.forward_trace(&patch.pixels)?;
    let (loss, grad_logits) = ops::softmax_xent(&trace.logits, usize::from(patch.label))?;
    let grads = model.backward(&trace, &grad_logits)?;
    Ok((loss, grads))
}

/// Mean loss and mean gradients over a minibatch. Per-sample work may run in
/// parallel; the reduction runs in ascending `patch_id` order so the result
/// does not depend on the worker count.
pub fn batch_gradients(model: &Model, batch: &[&Patch]) -> Result<(f64, Vec<Tensor>)> {
    let mut ordered: Vec<&Patch> = batch.to_vec();
    ordered.sort_by(|a, b| a.patch_id.cmp(&b.patch_id));
    let per_sample: Vec<Result<(f32, Vec<Tensor>)>> =
        ordered.par_iter().map(|p| sample_gradients(model, p)).collect();
    let mut total: Vec<Tensor> = model.params().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
    let mut loss_sum = 0.0f64;
    for r in per_sample {
        let (loss, grads) = r?;
        loss_sum += loss as f64;
        for (acc, g) in total.iter_mut().zip(&grads) {
            for (a, &v) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += v;
            }
        }
    }
    let scale = 1.0 / ordered.len() as f32;
    for t in &mut total {
        for v in t.data_mut() {
            *v *= scale;
        }
    }
    Ok((loss_sum / ordered.len() as f64, total))
}

/// Trains `model` in place with seeded minibatch SGD.
///
/// `on_epoch` sees each epoch's metrics as soon as they are known. When
/// `val` is given, the validation AUC is computed after every epoch.
pub fn train(
    model: &mut Model,
    patches: &[Patch],
    val: Option<&[Patch]>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if patches.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let positives = patches.iter().filter(|p| p.label).count();
    if positives == 0 || positives == patches.len() {
        return Err(Error::InvalidArgument(format!(
            "training set must contain both labels ({positives} of {} positive)",
            patches.len()
        )));
    }
    let names: Vec<String> = model.params().into_iter().map(|(n, _)| n).collect();
    let mut state = MomentumState::new(model);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..patches.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Patch> = chunk.iter().map(|&i| &patches[i]).collect();
            let (loss, grads) = batch_gradients(model, &batch)?;
            if !loss.is_finite() {
                return Err(Error::InvalidArgument(format!("loss diverged to {loss} in epoch {epoch}")));
            }
            loss_sum += loss * batch.len() as f64;
            let mut params = model.params_mut();
            sgd_step(&mut params, &names, &grads, &mut state, cfg)?;
        }
        let val_auc = match val {
            Some(v) => evaluate(model, v).ok().map(|r| r.auc),
            None => None,
        };
        let m = EpochMetrics {
            epoch,
            mean_loss: loss_sum / patches.len() as f64,
            val_auc,
        };
        log::info!("epoch {epoch}: mean loss {:.5}, val auc {:?}", m.mean_loss, m.val_auc);
        on_epoch(&m);
        epochs.push(m);
    }
    Ok(TrainOutcome { epochs })
}

/// Area under the ROC curve as the Mann-Whitney statistic: the fraction of
/// (positive, negative) pairs where the positive scores higher, ties counting
/// one half. Runs in `O(n log n)` via midranks.
pub fn evaluate_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("scores contain NaN".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidArgument(format!(
            "AUC needs both classes, got {n_pos} positive and {n_neg} negative"
        )));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the positive rank sum keeps midranks integral.
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1, midrank (i + j + 2) / 2
        let mid2 = (i + j + 2) as u128;
        let pos_in_group = idx[i..=j].iter().filter(|&&k| labels[k]).count() as u128;
        rank_sum2 += mid2 * pos_in_group;
        i = j + 1;
    }
    let (p, q) = (n_pos as u128, n_neg as u128);
    let u2 = rank_sum2 - p * (p + 1);
    Ok(u2 as f64 / (2 * p * q) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPatch {
    pub patch_id: String,
    pub score: f64,
    pub label: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub auc: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    pub scores: Vec<ScoredPatch>,
}

/// Positive-class softmax probability for a patch.
pub fn positive_score(model: &Model, pixels: &Tensor) -> Result<f64> {
    let out = model.forward(pixels, &[])?;
    Ok(ops::softmax(&out.logits)[1])
}

/// Scores every patch and computes the patch-level AUC.
pub fn evaluate(model: &Model, patches: &[Patch]) -> Result<EvalResult> {
    let scored: Vec<Result<f64>> = patches.par_iter().map(|p| positive_score(model, &p.pixels)).collect();
    let mut scores = Vec::with_capacity(patches.len());
    for (p, s) in patches.iter().zip(scored) {
        scores.push(ScoredPatch {
            patch_id: p.patch_id.clone(),
            score: s?,
            label: p.label,
        });
    }
    let raw: Vec<f64> = scores.iter().map(|s| s.score).collect();
    let labels: Vec<bool> = scores.iter().map(|s| s.label).collect();
    let auc = evaluate_auc(&raw, &labels)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    Ok(EvalResult {
        auc,
        n_pos,
        n_neg: labels.len() - n_pos,
        scores,
    })
}

/// Desk-scale classifier: three conv-relu-pool stages (8, 16, 32 channels),
/// global average pooling and a 32->2 linear head, on `1x128x128` input.
/// He-normal weights from `seed`, zero biases. Each input patch is
/// standardized to zero mean and unit variance before the first conv.
pub fn build_dissectnet_t(seed: u64) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut he = |shape: &[usize], fan_in: usize| -> Tensor {
        let normal = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).expect("positive std");
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(&mut rng)).collect()).expect("finite init")
    };
    let mut layers = Vec::new();
    let mut c_in = 1;
    for (i, c_out) in [8usize, 16, 32].into_iter().enumerate() {
        let spec = ConvSpec::square(3, 1, 1, c_in, c_out);
        layers.push(Layer::new(
            format!("conv{}", i + 1),
            LayerOp::Conv {
                spec,
                weight: he(&spec.weight_shape(), c_in * 9),
                bias: Tensor::zeros(&[c_out]),
            },
        ));
        layers.push(Layer::new(format!("relu{}", i + 1), LayerOp::Relu));
        layers.push(Layer::new(format!("pool{}", i + 1), LayerOp::MaxPool2));
        c_in = c_out;
    }
    layers.push(Layer::new("gap", LayerOp::GlobalAvgPool));
    layers.push(Layer::new(
        "fc",
        LayerOp::Fc {
            weight: he(&[2, 32], 32),
            bias: Tensor::zeros(&[2]),
        },
    ));
    Model::new([1, 128, 128], layers)
        .expect("DissectNet-T is well formed")
        .with_input_norm(InputNorm::Standardize)
}
