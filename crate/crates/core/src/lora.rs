//! Per-task low-rank adapters: an (A, B) pair for every layer's query and
//! value projection plus the task's classifier head.
//!
//! The adapted projection is `h = W₀x + s·B(Ax)` with `A ∈ ℝ^{r×d}`,
//! `B ∈ ℝ^{d×r}`, and `r ≪ d`. A is Gaussian-initialized and B starts at
//! zero, so a fresh adapter leaves the backbone function untouched. The hot
//! path keeps the update factored as two skinny matmuls; `B·A` is only
//! materialized by merge and by diagnostics.

use crate::tensor::{Tensor, TensorError};
use crate::vit::{ProjectionKind, ViTConfig, ViTWeights};
use crate::wire::{FormatError, Reader, Writer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;
use thiserror::Error;

pub const ADAPTER_MAGIC: [u8; 4] = *b"MELO";
pub const ADAPTER_FORMAT_VERSION: u16 = 1;

/// Default rank of the low-rank decomposition.
pub const DEFAULT_RANK: usize = 4;

/// Default update scale; 1.0 keeps `h = W₀x + BAx` verbatim.
pub const DEFAULT_SCALE: f32 = 1.0;

const ADAPTER_INIT_STD: f32 = 0.02;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error(
    "adapter built for d={adapter_d}, depth={adapter_depth} does not fit backbone \
     d={backbone_d}, depth={backbone_depth}"
)]
pub struct AdapterCompatError {
    pub adapter_d: usize,
    pub adapter_depth: usize,
    pub backbone_d: usize,
    pub backbone_depth: usize,
}

#[derive(Debug, Error)]
pub enum LoraError {
    #[error("rank {rank} out of range for dim {dim} (need 1 <= r < d)")]
    RankOutOfRange { rank: usize, dim: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Compat(#[from] AdapterCompatError),
}

#[derive(Debug, Error)]
pub enum MergeError {
    #[error("cannot merge '{requested}': '{merged}' is already folded into these weights")]
    AlreadyMerged { merged: String, requested: String },
    #[error("cannot unmerge '{requested}': {state}")]
    NotMerged { requested: String, state: String },
    #[error(transparent)]
    Compat(#[from] AdapterCompatError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// One (A, B) factor pair. `a` is `[r×d]`, `b` is `[d×r]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair {
    pub a: Tensor,
    pub b: Tensor,
}

/// A task plug-in: low-rank factors for Q and V of every layer plus the
/// task classifier head. Immutable once constructed.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub task_name: String,
    pub base_d: usize,
    pub depth: usize,
    pub rank: usize,
    pub scale: f32,
    pub q_pairs: Vec<LoraPair>,
    pub v_pairs: Vec<LoraPair>,
    /// `[num_classes × d]`
    pub head_weight: Tensor,
    /// `[num_classes]`
    pub head_bias: Tensor,
}

impl LoraAdapter {
    pub fn num_classes(&self) -> usize {
        self.head_bias.numel()
    }

    pub fn pair(&self, layer: usize, kind: ProjectionKind) -> (&Tensor, &Tensor) {
        let p = match kind {
            ProjectionKind::Query => &self.q_pairs[layer],
            ProjectionKind::Value => &self.v_pairs[layer],
        };
        (&p.a, &p.b)
    }

    pub fn check_compat(&self, cfg: &ViTConfig) -> Result<(), AdapterCompatError> {
        if self.base_d != cfg.dim || self.depth != cfg.depth {
            return Err(AdapterCompatError {
                adapter_d: self.base_d,
                adapter_depth: self.depth,
                backbone_d: cfg.dim,
                backbone_depth: cfg.depth,
            });
        }
        Ok(())
    }

    /// Classifier head: `logits = head_weight · features + head_bias`.
    pub fn apply_head(&self, features: &Tensor) -> Result<Tensor, TensorError> {
        let x = features.reshape(&[1, features.numel()])?;
        let logits = x.matmul_nt(&self.head_weight)?;
        let logits = logits.reshape(&[self.num_classes()])?;
        logits.add(&self.head_bias)
    }

    /// Materializes `ΔW = s·B·A` for one projection. Diagnostic/merge path
    /// only; inference keeps the factored form.
    pub fn delta_w(&self, layer: usize, kind: ProjectionKind) -> Result<Tensor, TensorError> {
        let (a, b) = self.pair(layer, kind);
        Ok(b.matmul(a)?.scale(self.scale))
    }

    /// Trainable parameter count of this adapter (LoRA factors + head).
    pub fn param_count(&self) -> usize {
        let lora: usize = self
            .q_pairs
            .iter()
            .chain(&self.v_pairs)
            .map(|p| p.a.numel() + p.b.numel())
            .sum();
        lora + self.head_weight.numel() + self.head_bias.numel()
    }

    /// Exact serialized size in bytes; the header fully determines it.
    pub fn byte_size(&self) -> usize {
        adapter_file_size(&self.task_name, self.base_d, self.depth, self.rank, self.num_classes())
    }

    /// Replaces every A and B with seeded Gaussian draws of the given std.
    /// Produces a non-trivial update for tests and benchmarks.
    pub fn randomize_updates(&mut self, std: f32, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in self.q_pairs.iter_mut().chain(self.v_pairs.iter_mut()) {
            p.a = Tensor::randn(&[self.rank, self.base_d], std, &mut rng);
            p.b = Tensor::randn(&[self.base_d, self.rank], std, &mut rng);
        }
    }
}

/// Trainable-parameter breakdown for one adapter configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainableCount {
    pub lora: usize,
    pub head: usize,
    pub total: usize,
}

/// LoRA factors cover Q and V in every layer: `4·L·r·d` parameters; the
/// head adds `classes·d + classes`.
pub fn count_trainable(cfg: &ViTConfig, rank: usize, num_classes: usize) -> TrainableCount {
    let lora = 4 * cfg.depth * rank * cfg.dim;
    let head = num_classes * cfg.dim + num_classes;
    TrainableCount {
        lora,
        head,
        total: lora + head,
    }
}

/// Trainable parameters as a fraction of the whole deployed model
/// (frozen backbone + adapter).
pub fn trainable_fraction(cfg: &ViTConfig, rank: usize, num_classes: usize) -> f64 {
    let t = count_trainable(cfg, rank, num_classes).total as f64;
    t / (cfg.backbone_param_count() as f64 + t)
}

/// Fresh adapter: A Gaussian (std 0.02), B zero, head Gaussian with zero
/// bias. `ΔW = 0` at step zero, so this adapter is a forward no-op.
pub fn init_adapter(
    cfg: &ViTConfig,
    num_classes: usize,
    rank: usize,
    seed: u64,
) -> Result<LoraAdapter, LoraError> {
    if rank < 1 || rank >= cfg.dim {
        return Err(LoraError::RankOutOfRange {
            rank,
            dim: cfg.dim,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.dim;
    let mut q_pairs = Vec::with_capacity(cfg.depth);
    let mut v_pairs = Vec::with_capacity(cfg.depth);
    for _ in 0..cfg.depth {
        q_pairs.push(LoraPair {
            a: Tensor::randn(&[rank, d], ADAPTER_INIT_STD, &mut rng),
            b: Tensor::zeros(&[d, rank]),
        });
        v_pairs.push(LoraPair {
            a: Tensor::randn(&[rank, d], ADAPTER_INIT_STD, &mut rng),
            b: Tensor::zeros(&[d, rank]),
        });
    }
    let head_weight = Tensor::randn(&[num_classes, d], ADAPTER_INIT_STD, &mut rng);
    let head_bias = Tensor::zeros(&[num_classes]);
    Ok(LoraAdapter {
        task_name: String::new(),
        base_d: d,
        depth: cfg.depth,
        rank,
        scale: DEFAULT_SCALE,
        q_pairs,
        v_pairs,
        head_weight,
        head_bias,
    })
}

/// The adapted projection of the update equation: `x·W₀ᵀ + s·(x·Aᵀ)·Bᵀ`
/// over row-vector tokens, i.e. `W₀x + s·B(Ax)` per token. The low-rank
/// update stays factored; `B·A` is never formed here.
pub fn apply_lora(
    x: &Tensor,
    w0: &Tensor,
    a: &Tensor,
    b: &Tensor,
    scale: f32,
) -> Result<Tensor, TensorError> {
    let base = x.matmul_nt(w0)?;
    let update = x.matmul_nt(a)?.matmul_nt(b)?.scale(scale);
    base.add(&update)
}

/// Returns a new weight set with `W_Q' = W_Q + s·B·A` (likewise `W_V`) for
/// every layer. The input weights are untouched.
pub fn merge_adapter(w: &ViTWeights, a: &LoraAdapter) -> Result<ViTWeights, MergeError> {
    apply_delta(w, a, 1.0)
}

/// Exact inverse of [`merge_adapter`]: subtracts the same `s·B·A`.
pub fn unmerge_adapter(w: &ViTWeights, a: &LoraAdapter) -> Result<ViTWeights, MergeError> {
    apply_delta(w, a, -1.0)
}

fn apply_delta(w: &ViTWeights, a: &LoraAdapter, sign: f32) -> Result<ViTWeights, MergeError> {
    if w.blocks.len() != a.depth || w.blocks[0].w_q.shape() != [a.base_d, a.base_d] {
        return Err(AdapterCompatError {
            adapter_d: a.base_d,
            adapter_depth: a.depth,
            backbone_d: w.blocks[0].w_q.shape()[0],
            backbone_depth: w.blocks.len(),
        }
        .into());
    }
    let mut out = w.clone();
    for (layer, block) in out.blocks.iter_mut().enumerate() {
        let dq = a.delta_w(layer, ProjectionKind::Query)?.scale(sign);
        let dv = a.delta_w(layer, ProjectionKind::Value)?.scale(sign);
        block.w_q = block.w_q.add(&dq)?;
        block.w_v = block.w_v.add(&dv)?;
    }
    Ok(out)
}

/// Weight set plus a record of which adapter, if any, is folded in.
/// Unmerging without a prior merge is a state error here rather than
/// silent weight corruption.
#[derive(Debug, Clone)]
pub struct MergeSlot {
    weights: ViTWeights,
    merged: Option<String>,
}

impl MergeSlot {
    pub fn new(weights: ViTWeights) -> Self {
        Self {
            weights,
            merged: None,
        }
    }

    pub fn weights(&self) -> &ViTWeights {
        &self.weights
    }

    pub fn merged_task(&self) -> Option<&str> {
        self.merged.as_deref()
    }

    pub fn merge(&mut self, a: &LoraAdapter) -> Result<(), MergeError> {
        if let Some(merged) = &self.merged {
            return Err(MergeError::AlreadyMerged {
                merged: merged.clone(),
                requested: a.task_name.clone(),
            });
        }
        self.weights = merge_adapter(&self.weights, a)?;
        self.merged = Some(a.task_name.clone());
        Ok(())
    }

    pub fn unmerge(&mut self, a: &LoraAdapter) -> Result<(), MergeError> {
        match &self.merged {
            Some(task) if *task == a.task_name => {
                self.weights = unmerge_adapter(&self.weights, a)?;
                self.merged = None;
                Ok(())
            }
            Some(task) => Err(MergeError::NotMerged {
                requested: a.task_name.clone(),
                state: format!("'{task}' is merged instead"),
            }),
            None => Err(MergeError::NotMerged {
                requested: a.task_name.clone(),
                state: "no adapter is merged".into(),
            }),
        }
    }
}

/// Exact on-disk adapter size: header + `4 × (lora + head)` payload + CRC.
pub fn adapter_file_size(
    task_name: &str,
    d: usize,
    depth: usize,
    rank: usize,
    num_classes: usize,
) -> usize {
    let header = 4 + 2 + 2 + (2 + task_name.len()) + 4 * 4 + 4;
    let params = 4 * depth * rank * d + num_classes * d + num_classes;
    header + 4 * params + 4
}

/// Serializes an adapter: magic "MELO", version, flags, task name, the four
/// u32 dims (d, L, r, classes), the f32 scale, then per layer A_Q, B_Q,
/// A_V, B_V raw f32 payloads, then head weight and bias, CRC32 trailer.
pub fn save_adapter(a: &LoraAdapter, path: &Path) -> Result<(), FormatError> {
    std::fs::write(path, adapter_to_bytes(a))?;
    Ok(())
}

pub fn adapter_to_bytes(a: &LoraAdapter) -> Vec<u8> {
    let mut w = Writer::new(ADAPTER_MAGIC, ADAPTER_FORMAT_VERSION);
    w.put_u16(0); // flags, reserved
    w.put_str(&a.task_name);
    w.put_u32(a.base_d as u32);
    w.put_u32(a.depth as u32);
    w.put_u32(a.rank as u32);
    w.put_u32(a.num_classes() as u32);
    w.put_f32(a.scale);
    for layer in 0..a.depth {
        w.put_f32_payload(&a.q_pairs[layer].a);
        w.put_f32_payload(&a.q_pairs[layer].b);
        w.put_f32_payload(&a.v_pairs[layer].a);
        w.put_f32_payload(&a.v_pairs[layer].b);
    }
    w.put_f32_payload(&a.head_weight);
    w.put_f32_payload(&a.head_bias);
    w.finish()
}

/// Dimension compatibility with a backbone is deliberately not checked
/// here; it is reported when the adapter is attached.
pub fn load_adapter(path: &Path) -> Result<LoraAdapter, FormatError> {
    let bytes = std::fs::read(path)?;
    adapter_from_bytes(&bytes)
}

pub fn adapter_from_bytes(bytes: &[u8]) -> Result<LoraAdapter, FormatError> {
    let mut r = Reader::open(bytes, ADAPTER_MAGIC, ADAPTER_FORMAT_VERSION)?;
    let _flags = r.get_u16()?;
    let task_name = r.get_str()?;
    let d = r.get_u32()? as usize;
    let depth = r.get_u32()? as usize;
    let rank = r.get_u32()? as usize;
    let num_classes = r.get_u32()? as usize;
    let scale = r.get_f32()?;
    if d == 0 || depth == 0 || rank == 0 || rank >= d {
        return Err(FormatError::Malformed(format!(
            "invalid adapter dims d={d}, depth={depth}, rank={rank}"
        )));
    }
    let mut q_pairs = Vec::with_capacity(depth);
    let mut v_pairs = Vec::with_capacity(depth);
    for _ in 0..depth {
        let qa = r.get_f32_payload(&[rank, d])?;
        let qb = r.get_f32_payload(&[d, rank])?;
        let va = r.get_f32_payload(&[rank, d])?;
        let vb = r.get_f32_payload(&[d, rank])?;
        q_pairs.push(LoraPair { a: qa, b: qb });
        v_pairs.push(LoraPair { a: va, b: vb });
    }
    let head_weight = r.get_f32_payload(&[num_classes, d])?;
    let head_bias = r.get_f32_payload(&[num_classes])?;
    r.expect_end()?;
    Ok(LoraAdapter {
        task_name,
        base_d: d,
        depth,
        rank,
        scale,
        q_pairs,
        v_pairs,
        head_weight,
        head_bias,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

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

    #[test]
    fn init_is_seed_deterministic() {
        let cfg = tiny_cfg();
        let a1 = init_adapter(&cfg, 2, 2, 5).unwrap();
        let a2 = init_adapter(&cfg, 2, 2, 5).unwrap();
        assert_eq!(a1, a2);
        let a3 = init_adapter(&cfg, 2, 2, 6).unwrap();
        assert_ne!(a1.q_pairs[0].a, a3.q_pairs[0].a);
    }

    #[test]
    fn fresh_adapter_has_zero_update() {
        let cfg = tiny_cfg();
        let a = init_adapter(&cfg, 2, 2, 5).unwrap();
        for layer in 0..cfg.depth {
            for kind in [ProjectionKind::Query, ProjectionKind::Value] {
                let dw = a.delta_w(layer, kind).unwrap();
                assert!(dw.data().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn rank_out_of_range_rejected() {
        let cfg = tiny_cfg();
        assert!(matches!(
            init_adapter(&cfg, 2, 0, 1),
            Err(LoraError::RankOutOfRange { .. })
        ));
        assert!(matches!(
            init_adapter(&cfg, 2, cfg.dim, 1),
            Err(LoraError::RankOutOfRange { .. })
        ));
    }

    #[test]
    fn apply_lora_degenerate_b_zero() {
        let x = Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap();
        let w0 = Tensor::identity(2);
        let a = Tensor::new(&[1, 2], vec![3.0, 4.0]).unwrap();
        let b = Tensor::zeros(&[2, 1]);
        let h = apply_lora(&x, &w0, &a, &b, 1.0).unwrap();
        assert_eq!(h.data(), &[1.0, 2.0]);
    }

    #[test]
    fn apply_lora_hand_example() {
        // d=2, r=1, s=1, W0=I, x=(1,0)ᵀ, A=[1 1], B=(1,0)ᵀ:
        // Ax = 1, B·(Ax) = (1,0)ᵀ, plus x gives (2,0)ᵀ.
        let x = Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap();
        let w0 = Tensor::identity(2);
        let a = Tensor::new(&[1, 2], vec![1.0, 1.0]).unwrap();
        let b = Tensor::new(&[2, 1], vec![1.0, 0.0]).unwrap();
        let h = apply_lora(&x, &w0, &a, &b, 1.0).unwrap();
        assert_eq!(h.data(), &[2.0, 0.0]);
    }

    #[test]
    fn merge_then_unmerge_drifts_below_1e6() {
        let cfg = tiny_cfg();
        let w = ViTWeights::init(&cfg, 11);
        let mut a = init_adapter(&cfg, 2, 2, 5).unwrap();
        a.randomize_updates(0.3, 99);
        let merged = merge_adapter(&w, &a).unwrap();
        let back = unmerge_adapter(&merged, &a).unwrap();
        for (orig, rt) in w.blocks.iter().zip(&back.blocks) {
            for (x, y) in orig.w_q.data().iter().zip(rt.w_q.data()) {
                assert!((x - y).abs() < 1e-6);
            }
            for (x, y) in orig.w_v.data().iter().zip(rt.w_v.data()) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn merging_zero_adapter_is_bit_exact() {
        let cfg = tiny_cfg();
        let w = ViTWeights::init(&cfg, 11);
        let a = init_adapter(&cfg, 2, 2, 5).unwrap();
        let merged = merge_adapter(&w, &a).unwrap();
        assert_eq!(w, merged);
    }

    #[test]
    fn merge_slot_state_errors() {
        let cfg = tiny_cfg();
        let w = ViTWeights::init(&cfg, 11);
        let mut a1 = init_adapter(&cfg, 2, 2, 5).unwrap();
        a1.task_name = "one".into();
        let mut a2 = init_adapter(&cfg, 3, 2, 6).unwrap();
        a2.task_name = "two".into();

        let mut slot = MergeSlot::new(w);
        assert!(matches!(
            slot.unmerge(&a1),
            Err(MergeError::NotMerged { .. })
        ));
        slot.merge(&a1).unwrap();
        assert_eq!(slot.merged_task(), Some("one"));
        assert!(matches!(
            slot.merge(&a2),
            Err(MergeError::AlreadyMerged { .. })
        ));
        assert!(matches!(
            slot.unmerge(&a2),
            Err(MergeError::NotMerged { .. })
        ));
        slot.unmerge(&a1).unwrap();
        assert_eq!(slot.merged_task(), None);
    }

    #[test]
    fn trainable_counts() {
        let base = ViTConfig::preset("vit-base").unwrap();
        let c = count_trainable(&base, 4, 2);
        assert_eq!(c.lora, 147_456); // 4·12·4·768
        assert_eq!(c.head, 2 * 768 + 2);
        assert_eq!(c.total, 148_994);

        let tiny = ViTConfig {
            image_size: 4,
            patch_size: 4,
            channels: 1,
            dim: 4,
            heads: 1,
            depth: 1,
            mlp_ratio: 1,
        };
        assert_eq!(count_trainable(&tiny, 1, 1).lora, 16); // 4·1·1·4

        let giga = ViTConfig::preset("vit-giga").unwrap();
        assert_eq!(count_trainable(&giga, 4, 2).lora, 1_277_952); // 4·48·4·1664
    }

    #[test]
    fn trainable_fraction_below_two_permille() {
        let base = ViTConfig::preset("vit-base").unwrap();
        let f = trainable_fraction(&base, 4, 2);
        assert!(f < 0.002, "fraction {f}");
        assert!(f > 0.001, "fraction {f} suspiciously small");
    }

    #[test]
    fn adapter_roundtrip_bit_exact() {
        let cfg = tiny_cfg();
        let mut a = init_adapter(&cfg, 3, 2, 5).unwrap();
        a.task_name = "demo".into();
        a.randomize_updates(0.2, 8);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("demo.melo");
        save_adapter(&a, &path).unwrap();
        let back = load_adapter(&path).unwrap();
        assert_eq!(a, back);
        // save → load → save gives identical bytes.
        let path2 = dir.path().join("demo2.melo");
        save_adapter(&back, &path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
        assert_eq!(std::fs::read(&path).unwrap().len(), a.byte_size());
    }

    #[test]
    fn truncated_adapter_fails_crc() {
        let cfg = tiny_cfg();
        let a = init_adapter(&cfg, 2, 2, 5).unwrap();
        let bytes = adapter_to_bytes(&a);
        let err = adapter_from_bytes(&bytes[..bytes.len() - 9]).unwrap_err();
        assert!(matches!(
            err,
            FormatError::CrcMismatch { .. } | FormatError::Truncated { .. }
        ));
    }

    #[test]
    fn vit_base_adapter_is_about_half_a_megabyte() {
        let size = adapter_file_size("task", 768, 12, 4, 2);
        let payload = 4 * (147_456 + 1_538);
        assert_eq!(payload, 595_976);
        assert!(size >= payload && size < payload + 128);
        assert!(size >= 560 * 1024 && size <= 640 * 1024, "size {size}");
    }

    #[test]
    fn delta_rank_is_bounded_by_r() {
        let cfg = ViTConfig {
            dim: 16,
            ..tiny_cfg()
        };
        let mut a = init_adapter(&cfg, 2, 3, 5).unwrap();
        a.randomize_updates(0.5, 10);
        let dw = a.delta_w(0, ProjectionKind::Query).unwrap();
        let m = nalgebra::DMatrix::from_row_slice(
            16,
            16,
            &dw.data().iter().map(|&v| f64::from(v)).collect::<Vec<_>>(),
        );
        let svd = m.svd(false, false);
        let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
        sv.sort_by(|x, y| y.partial_cmp(x).unwrap());
        let sigma1 = sv[0];
        for &s in &sv[a.rank..] {
            assert!(s < 1e-4 * sigma1, "singular value {s} beyond rank {}", a.rank);
        }
    }

    proptest! {
        #[test]
        fn factored_equals_dense_path(seed in 0u64..300, d in 2usize..10, r in 1usize..4, t in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::randn(&[t, d], 1.0, &mut rng);
            let w0 = Tensor::randn(&[d, d], 1.0, &mut rng);
            let a = Tensor::randn(&[r, d], 1.0, &mut rng);
            let b = Tensor::randn(&[d, r], 1.0, &mut rng);
            let s = 0.7f32;
            let factored = apply_lora(&x, &w0, &a, &b, s).unwrap();
            let dense_w = w0.add(&b.matmul(&a).unwrap().scale(s)).unwrap();
            let dense = x.matmul_nt(&dense_w).unwrap();
            for (f, g) in factored.data().iter().zip(dense.data()) {
                let denom = f.abs().max(g.abs()).max(1.0);
                prop_assert!((f - g).abs() / denom < 1e-5, "factored {} dense {}", f, g);
            }
        }

        #[test]
        fn adapter_bytes_roundtrip(seed in 0u64..50, classes in 1usize..5) {
            let cfg = tiny_cfg();
            let mut a = init_adapter(&cfg, classes, 2, seed).unwrap();
            a.task_name = format!("t{seed}");
            a.randomize_updates(0.2, seed ^ 0xABCD);
            let back = adapter_from_bytes(&adapter_to_bytes(&a)).unwrap();
            prop_assert_eq!(a, back);
        }
    }
}
