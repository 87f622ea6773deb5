//! Adapter training: exact backpropagation restricted to the low-rank
//! factors and the task head, cross-entropy loss, Adam. A full-fine-tune
//! loop over the same engine serves as the comparison baseline.
//!
//! The frozen f32 backbone is borrowed immutably for the whole run; the
//! engine works on 64-bit copies, so the backbone's bytes cannot change.

mod engine;
mod synthetic;

pub use engine::TrainScope;
pub use synthetic::{Example, SyntheticTask, TaskData};

use crate::lora::{count_trainable, init_adapter, LoraAdapter, LoraError, TrainableCount};
use crate::metrics::{auc_multilabel, MultiLabelRecord};
use crate::tensor::{Tensor, TensorError};
use crate::vit::{ViTConfig, ViTWeights};
use engine::{AdapterF64, BackboneF64, Engine};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Diverged {
        epoch: usize,
        history: Box<TrainHistory>,
    },
    #[error(transparent)]
    Lora(#[from] LoraError),
    #[error("a data split is empty; increase the sample count")]
    EmptySplit,
}

/// Loss function used for training and validation scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Single-label softmax cross-entropy (the default).
    SoftmaxCrossEntropy,
    /// Independent per-class sigmoid cross-entropy (multi-label style;
    /// targets are the one-hot encoding of the label).
    SigmoidPerClass,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub rank: usize,
    pub loss: LossKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 200,
            batch_size: 32,
            seed: 0,
            rank: 4,
            loss: LossKind::SoftmaxCrossEntropy,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
    pub val_auc: Option<f64>,
    /// The model-selection metric for this epoch.
    pub val_metric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    /// 1-based epoch of the returned snapshot; 0 when training never
    /// completed an epoch.
    pub best_epoch: usize,
    pub best_val_metric: f64,
    /// Name of the model-selection metric ("accuracy" or "mean-auc").
    pub selection: &'static str,
    /// What this run actually trained.
    pub trainable: TrainableCount,
}

impl TrainHistory {
    /// Line-delimited records for plotting; one `key=value` line per epoch.
    pub fn to_lines(&self) -> String {
        let mut out = format!(
            "# selection={} trainable_lora={} trainable_head={} trainable_total={}\n",
            self.selection, self.trainable.lora, self.trainable.head, self.trainable.total
        );
        for r in &self.records {
            let auc = r
                .val_auc
                .map_or("undefined".to_string(), |v| format!("{v:.6}"));
            out.push_str(&format!(
                "epoch={} train_loss={:.6} val_acc={:.6} val_auc={} val_metric={:.6}\n",
                r.epoch, r.train_loss, r.val_acc, auc, r.val_metric
            ));
        }
        out
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_lines())
    }
}

/// Classifier head returned by the full-fine-tune baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Head {
    pub fn apply(&self, features: &Tensor) -> Result<Tensor, TensorError> {
        let x = features.reshape(&[1, features.numel()])?;
        let logits = x.matmul_nt(&self.weight)?;
        logits.reshape(&[self.bias.numel()])?.add(&self.bias)
    }
}

/// Gradients for one batch, flattened in the fixed trainable-parameter
/// order. For a LoRA run the order is, per layer, A_Q, B_Q, A_V, B_V, then
/// the head weight and bias — matching the adapter file layout.
#[derive(Debug, Clone)]
pub struct Gradients {
    scope: TrainScope,
    d: usize,
    rank: usize,
    depth: usize,
    classes: usize,
    flat: Vec<f64>,
}

impl Gradients {
    pub fn flat(&self) -> &[f64] {
        &self.flat
    }

    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    fn layer_base(&self, layer: usize, kind: crate::vit::ProjectionKind) -> usize {
        assert_eq!(
            self.scope,
            TrainScope::LoraOnly,
            "named LoRA accessors need a LoRA-scope gradient"
        );
        let rd = self.rank * self.d;
        layer * 4 * rd
            + match kind {
                crate::vit::ProjectionKind::Query => 0,
                crate::vit::ProjectionKind::Value => 2 * rd,
            }
    }

    /// `∂L/∂A[layer, kind]`, row-major `[r×d]`.
    pub fn lora_a(&self, layer: usize, kind: crate::vit::ProjectionKind) -> &[f64] {
        let base = self.layer_base(layer, kind);
        &self.flat[base..base + self.rank * self.d]
    }

    /// `∂L/∂B[layer, kind]`, row-major `[d×r]`.
    pub fn lora_b(&self, layer: usize, kind: crate::vit::ProjectionKind) -> &[f64] {
        let base = self.layer_base(layer, kind) + self.rank * self.d;
        &self.flat[base..base + self.rank * self.d]
    }

    pub fn head_weight(&self) -> &[f64] {
        let base = self.flat.len() - self.classes * self.d - self.classes;
        &self.flat[base..base + self.classes * self.d]
    }

    pub fn head_bias(&self) -> &[f64] {
        &self.flat[self.flat.len() - self.classes..]
    }

    pub fn max_abs(&self) -> f64 {
        self.flat.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Training-time model: 64-bit copies of the backbone, adapter, and head,
/// with batch loss/gradient evaluation and flat parameter access.
pub struct TrainModel {
    eng: Engine,
    scope: TrainScope,
    loss: LossKind,
}

impl TrainModel {
    /// LoRA training: only (A, B) pairs and the head receive gradients.
    pub fn lora(
        cfg: &ViTConfig,
        weights: &ViTWeights,
        adapter: &LoraAdapter,
        loss: LossKind,
    ) -> Self {
        TrainModel {
            eng: Engine::new(cfg, weights, adapter, true),
            scope: TrainScope::LoraOnly,
            loss,
        }
    }

    /// Full fine-tuning: every backbone parameter plus the head trains; no
    /// low-rank factors are used. `head_source` supplies the head init.
    pub fn full(
        cfg: &ViTConfig,
        weights: &ViTWeights,
        head_source: &LoraAdapter,
        loss: LossKind,
    ) -> Self {
        TrainModel {
            eng: Engine::new(cfg, weights, head_source, false),
            scope: TrainScope::Full,
            loss,
        }
    }

    pub fn scope(&self) -> TrainScope {
        self.scope
    }

    fn visit<'a>(
        scope: TrainScope,
        backbone: &'a BackboneF64,
        adapter: &'a AdapterF64,
        f: &mut impl FnMut(&'a [f64]),
    ) {
        if scope == TrainScope::Full {
            f(&backbone.patch_embed.data);
            f(&backbone.pos_embed.data);
            f(&backbone.cls);
            for b in &backbone.blocks {
                f(&b.ln1_g);
                f(&b.ln1_b);
                f(&b.wq.data);
                f(&b.bq);
                f(&b.wk.data);
                f(&b.bk);
                f(&b.wv.data);
                f(&b.bv);
                f(&b.wo.data);
                f(&b.bo);
                f(&b.ln2_g);
                f(&b.ln2_b);
                f(&b.w1.data);
                f(&b.b1);
                f(&b.w2.data);
                f(&b.b2);
            }
            f(&backbone.final_g);
            f(&backbone.final_b);
        } else {
            for layer in 0..adapter.q.len() {
                f(&adapter.q[layer].0.data);
                f(&adapter.q[layer].1.data);
                f(&adapter.v[layer].0.data);
                f(&adapter.v[layer].1.data);
            }
        }
        f(&adapter.head_w.data);
        f(&adapter.head_b);
    }

    fn visit_mut(&mut self, f: &mut impl FnMut(&mut [f64])) {
        let (backbone, adapter) = (&mut self.eng.backbone, &mut self.eng.adapter);
        if self.scope == TrainScope::Full {
            f(&mut backbone.patch_embed.data);
            f(&mut backbone.pos_embed.data);
            f(&mut backbone.cls);
            for b in &mut backbone.blocks {
                f(&mut b.ln1_g);
                f(&mut b.ln1_b);
                f(&mut b.wq.data);
                f(&mut b.bq);
                f(&mut b.wk.data);
                f(&mut b.bk);
                f(&mut b.wv.data);
                f(&mut b.bv);
                f(&mut b.wo.data);
                f(&mut b.bo);
                f(&mut b.ln2_g);
                f(&mut b.ln2_b);
                f(&mut b.w1.data);
                f(&mut b.b1);
                f(&mut b.w2.data);
                f(&mut b.b2);
            }
            f(&mut backbone.final_g);
            f(&mut backbone.final_b);
        } else {
            for layer in 0..adapter.q.len() {
                f(&mut adapter.q[layer].0.data);
                f(&mut adapter.q[layer].1.data);
                f(&mut adapter.v[layer].0.data);
                f(&mut adapter.v[layer].1.data);
            }
        }
        f(&mut adapter.head_w.data);
        f(&mut adapter.head_b);
    }

    pub fn n_trainable(&self) -> usize {
        let mut n = 0;
        Self::visit(self.scope, &self.eng.backbone, &self.eng.adapter, &mut |s| {
            n += s.len()
        });
        n
    }

    /// Adds `delta` to the `i`-th trainable parameter (flat order). Used by
    /// the finite-difference oracle.
    pub fn nudge_param(&mut self, i: usize, delta: f64) {
        let mut cursor = 0usize;
        let mut done = false;
        self.visit_mut(&mut |s| {
            if !done && i < cursor + s.len() {
                s[i - cursor] += delta;
                done = true;
            }
            cursor += s.len();
        });
        assert!(done, "parameter index {i} out of range");
    }

    /// `params[i] += update[i]` over the whole flat parameter vector.
    pub fn apply_update(&mut self, update: &[f64]) {
        let mut cursor = 0usize;
        self.visit_mut(&mut |s| {
            s.copy_from_slice(
                &update[cursor..cursor + s.len()]
                    .iter()
                    .zip(s.iter())
                    .map(|(u, p)| p + u)
                    .collect::<Vec<_>>(),
            );
            cursor += s.len();
        });
        assert_eq!(cursor, update.len(), "update length mismatch");
    }

    pub fn logits(&self, image: &Tensor) -> Vec<f64> {
        self.eng.forward(image).logits
    }

    /// Mean loss over the batch; the exact function the gradients
    /// differentiate.
    pub fn batch_loss(&self, batch: &[Example]) -> f64 {
        let mut total = 0.0;
        for ex in batch {
            let cache = self.eng.forward(&ex.image);
            total += loss_and_dlogits(&cache.logits, ex.label, self.loss).0;
        }
        total / batch.len() as f64
    }

    /// Mean loss plus gradients for every trainable parameter.
    pub fn batch_backward(&self, batch: &[Example]) -> (f64, Gradients) {
        let mut g_backbone = BackboneF64::zeros_like(&self.eng.backbone);
        let mut g_adapter = AdapterF64::zeros_like(&self.eng.adapter);
        let mut total = 0.0;
        for ex in batch {
            let cache = self.eng.forward(&ex.image);
            let (loss, dlogits) = loss_and_dlogits(&cache.logits, ex.label, self.loss);
            total += loss;
            self.eng
                .backward(&cache, &dlogits, self.scope, &mut g_backbone, &mut g_adapter);
        }
        let n = batch.len() as f64;
        let mut flat = Vec::with_capacity(self.n_trainable());
        Self::visit(self.scope, &g_backbone, &g_adapter, &mut |s| {
            flat.extend(s.iter().map(|v| v / n))
        });
        (
            total / n,
            Gradients {
                scope: self.scope,
                d: self.eng.cfg.dim,
                rank: self.eng.adapter.rank,
                depth: self.eng.cfg.depth,
                classes: self.eng.adapter.head_b.len(),
                flat,
            },
        )
    }

    pub fn export_adapter(&self, task_name: &str) -> LoraAdapter {
        self.eng.adapter.to_adapter(&self.eng.cfg, task_name)
    }

    pub fn export_backbone(&self) -> ViTWeights {
        self.eng.backbone.to_weights(&self.eng.cfg)
    }

    pub fn export_head(&self) -> Head {
        let classes = self.eng.adapter.head_b.len();
        Head {
            weight: self.eng.adapter.head_w.to_tensor(&[classes, self.eng.cfg.dim]),
            bias: Tensor::new(
                &[classes],
                self.eng.adapter.head_b.iter().map(|&v| v as f32).collect(),
            )
            .expect("shape"),
        }
    }
}

/// Per-sample loss and d(loss)/d(logits).
fn loss_and_dlogits(logits: &[f64], label: usize, kind: LossKind) -> (f64, Vec<f64>) {
    match kind {
        LossKind::SoftmaxCrossEntropy => {
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            let loss = lse - logits[label];
            let mut d: Vec<f64> = logits.iter().map(|z| (z - lse).exp()).collect();
            d[label] -= 1.0;
            (loss, d)
        }
        LossKind::SigmoidPerClass => {
            let k = logits.len() as f64;
            let mut loss = 0.0;
            let mut d = vec![0.0; logits.len()];
            for (c, &z) in logits.iter().enumerate() {
                let t = if c == label { 1.0 } else { 0.0 };
                loss += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
                let sig = 1.0 / (1.0 + (-z).exp());
                d[c] = (sig - t) / k;
            }
            (loss / k, d)
        }
    }
}

/// The gradient of one batch for adapter factors and head — the spec'd
/// training primitive, usable standalone for gradient checking.
pub fn lora_backward(
    batch: &[Example],
    cfg: &ViTConfig,
    weights: &ViTWeights,
    adapter: &LoraAdapter,
    loss: LossKind,
) -> (f64, Gradients) {
    TrainModel::lora(cfg, weights, adapter, loss).batch_backward(batch)
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    lr: f64,
    b1: f64,
    b2: f64,
    eps: f64,
}

impl Adam {
    fn new(n: usize, cfg: &TrainConfig) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr: cfg.learning_rate,
            b1: cfg.beta1,
            b2: cfg.beta2,
            eps: cfg.adam_eps,
        }
    }

    fn step(&mut self, grads: &[f64]) -> Vec<f64> {
        self.t += 1;
        let bc1 = 1.0 - self.b1.powi(self.t as i32);
        let bc2 = 1.0 - self.b2.powi(self.t as i32);
        grads
            .iter()
            .enumerate()
            .map(|(i, &g)| {
                self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g;
                self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * g * g;
                let mhat = self.m[i] / bc1;
                let vhat = self.v[i] / bc2;
                -self.lr * mhat / (vhat.sqrt() + self.eps)
            })
            .collect()
    }
}

fn val_scores(model: &TrainModel, val: &[Example]) -> (f64, Option<f64>) {
    let mut correct = 0usize;
    let mut ml_records = Vec::with_capacity(val.len());
    let mut classes = 0usize;
    for ex in val {
        let logits = model.logits(&ex.image);
        classes = logits.len();
        let pred = crate::metrics::argmax(&logits);
        if pred == ex.label {
            correct += 1;
        }
        let scores: Vec<f64> = logits.iter().map(|&z| 1.0 / (1.0 + (-z).exp())).collect();
        let mut labels = vec![false; logits.len()];
        labels[ex.label] = true;
        ml_records.push(MultiLabelRecord { labels, scores });
    }
    let acc = correct as f64 / val.len() as f64;
    let auc = if classes >= 2 {
        auc_multilabel(&ml_records).ok()
    } else {
        None
    };
    (acc, auc)
}

fn run_loop<S>(
    mut model: TrainModel,
    data: &TaskData,
    cfg: &TrainConfig,
    trainable: TrainableCount,
    selection: &'static str,
    mut snapshot: impl FnMut(&TrainModel) -> S,
) -> Result<(S, TrainHistory), TrainError> {
    if data.train.is_empty() || data.val.is_empty() {
        return Err(TrainError::EmptySplit);
    }
    let mut adam = Adam::new(model.n_trainable(), cfg);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9E37_79B9).wrapping_add(1));
    let mut records: Vec<EpochRecord> = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, S)> = None;

    let mut indices: Vec<usize> = (0..data.train.len()).collect();
    for epoch in 1..=cfg.epochs {
        indices.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in indices.chunks(cfg.batch_size.max(1)) {
            let batch: Vec<Example> = chunk.iter().map(|&i| data.train[i].clone()).collect();
            let (loss, grads) = model.batch_backward(&batch);
            if !loss.is_finite() {
                let history = TrainHistory {
                    records,
                    best_epoch: best.as_ref().map_or(0, |(_, e, _)| *e),
                    best_val_metric: best.as_ref().map_or(f64::NAN, |(m, _, _)| *m),
                    selection,
                    trainable,
                };
                return Err(TrainError::Diverged {
                    epoch,
                    history: Box::new(history),
                });
            }
            epoch_loss += loss;
            batches += 1;
            let update = adam.step(grads.flat());
            model.apply_update(&update);
        }
        let (val_acc, val_auc) = val_scores(&model, &data.val);
        let val_metric = match selection {
            "mean-auc" => val_auc.unwrap_or(val_acc),
            _ => val_acc,
        };
        records.push(EpochRecord {
            epoch,
            train_loss: epoch_loss / batches as f64,
            val_acc,
            val_auc,
            val_metric,
        });
        let improved = best.as_ref().map_or(true, |(m, _, _)| val_metric > *m);
        if improved {
            best = Some((val_metric, epoch, snapshot(&model)));
        }
    }
    let (best_val_metric, best_epoch, snap) = best.expect("at least one epoch ran");
    Ok((
        snap,
        TrainHistory {
            records,
            best_epoch,
            best_val_metric,
            selection,
            trainable,
        },
    ))
}

fn selection_for(loss: LossKind) -> &'static str {
    match loss {
        LossKind::SoftmaxCrossEntropy => "accuracy",
        LossKind::SigmoidPerClass => "mean-auc",
    }
}

/// Trains a fresh adapter on a synthetic task against a frozen backbone and
/// returns the snapshot with the best validation metric plus the per-epoch
/// history. The backbone is borrowed immutably and never modified.
pub fn train(
    task: &SyntheticTask,
    cfg: &TrainConfig,
    vit_cfg: &ViTConfig,
    backbone: &ViTWeights,
) -> Result<(LoraAdapter, TrainHistory), TrainError> {
    let data = task.generate(vit_cfg);
    let adapter = init_adapter(vit_cfg, task.num_classes, cfg.rank, cfg.seed)?;
    let model = TrainModel::lora(vit_cfg, backbone, &adapter, cfg.loss);
    let trainable = count_trainable(vit_cfg, cfg.rank, task.num_classes);
    debug_assert_eq!(model.n_trainable(), trainable.total);
    let task_name = format!("synthetic-{}c-seed{}", task.num_classes, task.seed);
    let (adapter, history) = run_loop(
        model,
        &data,
        cfg,
        trainable,
        selection_for(cfg.loss),
        |m| m.export_adapter(&task_name),
    )?;
    Ok((adapter, history))
}

/// Identical loop with every parameter trainable; the comparison oracle for
/// the adapter path. Returns the tuned weights and head.
pub fn full_finetune_baseline(
    task: &SyntheticTask,
    cfg: &TrainConfig,
    vit_cfg: &ViTConfig,
    backbone: &ViTWeights,
) -> Result<(ViTWeights, Head, TrainHistory), TrainError> {
    let data = task.generate(vit_cfg);
    // Head initialized exactly as the adapter path's head (same seed).
    let head_source = init_adapter(vit_cfg, task.num_classes, cfg.rank, cfg.seed)?;
    let model = TrainModel::full(vit_cfg, backbone, &head_source, cfg.loss);
    let head_params = task.num_classes * vit_cfg.dim + task.num_classes;
    let trainable = TrainableCount {
        lora: 0,
        head: head_params,
        total: vit_cfg.backbone_param_count() + head_params,
    };
    debug_assert_eq!(model.n_trainable(), trainable.total);
    let ((weights, head), history) = run_loop(
        model,
        &data,
        cfg,
        trainable,
        selection_for(cfg.loss),
        |m| (m.export_backbone(), m.export_head()),
    )?;
    Ok((weights, head, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::ProjectionKind;

    fn tiny_cfg() -> ViTConfig {
        ViTConfig {
            image_size: 8,
            patch_size: 4,
            channels: 1,
            dim: 8,
            heads: 2,
            depth: 2,
            mlp_ratio: 2,
        }
    }

    fn small_batch(cfg: &ViTConfig, seed: u64) -> Vec<Example> {
        SyntheticTask {
            samples: 10,
            ..SyntheticTask::new(2, seed)
        }
        .generate(cfg)
        .train
    }

    #[test]
    fn zero_b_blocks_gradient_to_a() {
        // With B = 0 the chain rule gives ∂L/∂A = 0 exactly, while ∂L/∂B
        // is generically nonzero; that is why A-Gaussian/B-zero init still
        // trains.
        let cfg = tiny_cfg();
        let w = ViTWeights::init(&cfg, 1);
        let adapter = init_adapter(&cfg, 2, 2, 2).unwrap();
        let batch = small_batch(&cfg, 3);
        let (_, grads) = lora_backward(&batch, &cfg, &w, &adapter, LossKind::SoftmaxCrossEntropy);
        for layer in 0..cfg.depth {
            for kind in [ProjectionKind::Query, ProjectionKind::Value] {
                assert!(grads.lora_a(layer, kind).iter().all(|&g| g == 0.0));
            }
        }
        let b_energy: f64 = (0..cfg.depth)
            .map(|l| grads.lora_b(l, ProjectionKind::Value).iter().map(|g| g.abs()).sum::<f64>())
            .sum();
        assert!(b_energy > 0.0, "∂L/∂B should be nonzero");
        let head_energy: f64 = grads.head_weight().iter().map(|g| g.abs()).sum();
        assert!(head_energy > 0.0);
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let cfg = tiny_cfg();
        let w = ViTWeights::init(&cfg, 1);
        let mut adapter = init_adapter(&cfg, 2, 2, 2).unwrap();
        adapter.randomize_updates(0.05, 7);
        let batch = small_batch(&cfg, 3);

        let mut model = TrainModel::lora(&cfg, &w, &adapter, LossKind::SoftmaxCrossEntropy);
        let (_, grads) = model.batch_backward(&batch);
        let h = 1e-4;
        // Spot-check a spread of coordinates here; the acceptance suite
        // checks every coordinate.
        let n = model.n_trainable();
        for i in (0..n).step_by(7) {
            model.nudge_param(i, h);
            let up = model.batch_loss(&batch);
            model.nudge_param(i, -2.0 * h);
            let down = model.batch_loss(&batch);
            model.nudge_param(i, h);
            let fd = (up - down) / (2.0 * h);
            let g = grads.flat()[i];
            assert!(
                (fd - g).abs() <= 1e-4 * fd.abs().max(g.abs()) + 1e-10,
                "param {i}: analytic {g} vs fd {fd}"
            );
        }
    }

    #[test]
    fn one_adam_step_usually_reduces_loss() {
        let cfg = tiny_cfg();
        let mut wins = 0;
        for seed in 0..20u64 {
            let w = ViTWeights::init(&cfg, seed);
            let adapter = init_adapter(&cfg, 2, 2, seed + 100).unwrap();
            let batch = small_batch(&cfg, seed + 200);
            let mut model = TrainModel::lora(&cfg, &w, &adapter, LossKind::SoftmaxCrossEntropy);
            let (before, grads) = model.batch_backward(&batch);
            let mut adam = Adam::new(model.n_trainable(), &TrainConfig::default());
            let update = adam.step(grads.flat());
            model.apply_update(&update);
            let after = model.batch_loss(&batch);
            if after < before {
                wins += 1;
            }
        }
        assert!(wins >= 19, "loss decreased for only {wins}/20 seeds");
    }

    #[test]
    fn training_is_reproducible() {
        let cfg = tiny_cfg();
        let w = ViTWeights::init(&cfg, 5);
        let task = SyntheticTask {
            samples: 40,
            ..SyntheticTask::new(2, 9)
        };
        let train_cfg = TrainConfig {
            epochs: 3,
            batch_size: 8,
            seed: 4,
            rank: 2,
            ..TrainConfig::default()
        };
        let (a1, h1) = train(&task, &train_cfg, &cfg, &w).unwrap();
        let (a2, h2) = train(&task, &train_cfg, &cfg, &w).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(a1, a2);
    }

    #[test]
    fn backbone_checksum_unchanged_by_training() {
        let cfg = tiny_cfg();
        let w = ViTWeights::init(&cfg, 5);
        let before = w.checksum();
        let task = SyntheticTask {
            samples: 30,
            ..SyntheticTask::new(2, 9)
        };
        let train_cfg = TrainConfig {
            epochs: 2,
            batch_size: 8,
            seed: 4,
            rank: 2,
            ..TrainConfig::default()
        };
        let _ = train(&task, &train_cfg, &cfg, &w).unwrap();
        assert_eq!(w.checksum(), before);
    }

    #[test]
    fn ledger_matches_count_trainable() {
        let cfg = tiny_cfg();
        let w = ViTWeights::init(&cfg, 5);
        let task = SyntheticTask {
            samples: 20,
            ..SyntheticTask::new(3, 9)
        };
        let train_cfg = TrainConfig {
            epochs: 1,
            batch_size: 8,
            seed: 4,
            rank: 2,
            ..TrainConfig::default()
        };
        let (_, history) = train(&task, &train_cfg, &cfg, &w).unwrap();
        assert_eq!(history.trainable, count_trainable(&cfg, 2, 3));
    }

    #[test]
    fn best_epoch_metric_is_max_over_history() {
        let cfg = tiny_cfg();
        let w = ViTWeights::init(&cfg, 5);
        let task = SyntheticTask {
            samples: 40,
            ..SyntheticTask::new(2, 9)
        };
        let train_cfg = TrainConfig {
            epochs: 5,
            batch_size: 8,
            seed: 4,
            rank: 2,
            ..TrainConfig::default()
        };
        let (_, history) = train(&task, &train_cfg, &cfg, &w).unwrap();
        let max = history
            .records
            .iter()
            .map(|r| r.val_metric)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(history.best_val_metric, max);
        assert_eq!(
            history.records[history.best_epoch - 1].val_metric,
            history.best_val_metric
        );
    }

    #[test]
    fn full_finetune_with_zero_lr_matches_lora_eval() {
        let cfg = tiny_cfg();
        let w = ViTWeights::init(&cfg, 5);
        let task = SyntheticTask {
            samples: 30,
            ..SyntheticTask::new(2, 9)
        };
        let frozen_cfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 2,
            batch_size: 8,
            seed: 4,
            rank: 2,
            ..TrainConfig::default()
        };
        let (_, lora_hist) = train(&task, &frozen_cfg, &cfg, &w).unwrap();
        let (tuned, _, full_hist) = full_finetune_baseline(&task, &frozen_cfg, &cfg, &w).unwrap();
        // No parameter moves, so validation metrics coincide epoch by epoch.
        for (a, b) in lora_hist.records.iter().zip(&full_hist.records) {
            assert_eq!(a.val_acc, b.val_acc);
        }
        assert_eq!(tuned.checksum(), w.checksum());
    }

    #[test]
    fn full_finetune_trainable_count_is_everything() {
        let cfg = tiny_cfg();
        let w = ViTWeights::init(&cfg, 5);
        let task = SyntheticTask {
            samples: 20,
            ..SyntheticTask::new(2, 9)
        };
        let train_cfg = TrainConfig {
            epochs: 1,
            batch_size: 8,
            seed: 4,
            rank: 2,
            ..TrainConfig::default()
        };
        let (_, _, history) = full_finetune_baseline(&task, &train_cfg, &cfg, &w).unwrap();
        assert_eq!(
            history.trainable.total,
            cfg.backbone_param_count() + 2 * cfg.dim + 2
        );
    }

    #[test]
    fn history_lines_format() {
        let history = TrainHistory {
            records: vec![EpochRecord {
                epoch: 1,
                train_loss: 0.5,
                val_acc: 0.75,
                val_auc: Some(0.8),
                val_metric: 0.75,
            }],
            best_epoch: 1,
            best_val_metric: 0.75,
            selection: "accuracy",
            trainable: TrainableCount {
                lora: 10,
                head: 5,
                total: 15,
            },
        };
        let lines = history.to_lines();
        assert!(lines.contains("# selection=accuracy"));
        assert!(lines.contains("epoch=1 train_loss=0.500000 val_acc=0.750000"));
    }
}
