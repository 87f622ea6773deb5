//! The frozen Vision Transformer backbone: patch embedding, pre-norm
//! transformer blocks with multi-head self-attention, and the per-layer
//! query/value projection hook points that task adapters attach to.
//!
//! Weight matrices are stored `[out × in]` and applied as `y = x·Wᵀ + b`
//! over row-vector token matrices. `ViTWeights` is never mutated by any
//! operation in this crate; merging an adapter produces a new weight set.

use crate::lora::{apply_lora, AdapterCompatError, LoraAdapter};
use crate::tensor::{Tensor, TensorError};
use crate::wire::{named_tensor_size, FormatError, Reader, Writer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;
use thiserror::Error;

/// LayerNorm epsilon used everywhere in the backbone.
pub const LN_EPS: f32 = 1e-6;

/// Standard deviation of the seeded Gaussian weight init.
pub const INIT_STD: f32 = 0.02;

pub const BACKBONE_MAGIC: [u8; 4] = *b"MELB";
pub const BACKBONE_FORMAT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum ViTError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Compat(#[from] AdapterCompatError),
    #[error("expected a {channels}×{size}×{size} image, got shape {got:?}")]
    BadImage {
        channels: usize,
        size: usize,
        got: Vec<usize>,
    },
    #[error("invalid config: {0}")]
    BadConfig(String),
}

/// Projections inside a self-attention layer that adapters can target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ProjectionKind {
    Query,
    Value,
}

/// Architecture hyperparameters of a ViT backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    /// Embedding width d.
    pub dim: usize,
    /// Number of transformer blocks L.
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl ViTConfig {
    /// Named presets. `vit-base`/`vit-huge`/`vit-giga` use the public ViT
    /// family dimensions for those tiers; `vit-tiny` is a desk-scale config
    /// for tests and demos.
    pub fn preset(name: &str) -> Option<ViTConfig> {
        let cfg = match name {
            "vit-base" => ViTConfig {
                image_size: 224,
                patch_size: 16,
                channels: 3,
                dim: 768,
                depth: 12,
                heads: 12,
                mlp_ratio: 4,
            },
            "vit-huge" => ViTConfig {
                image_size: 224,
                patch_size: 14,
                channels: 3,
                dim: 1280,
                depth: 32,
                heads: 16,
                mlp_ratio: 4,
            },
            "vit-giga" => ViTConfig {
                image_size: 224,
                patch_size: 14,
                channels: 3,
                dim: 1664,
                depth: 48,
                heads: 16,
                mlp_ratio: 4,
            },
            "vit-tiny" => ViTConfig {
                image_size: 32,
                patch_size: 8,
                channels: 1,
                dim: 64,
                depth: 4,
                heads: 4,
                mlp_ratio: 4,
            },
            _ => return None,
        };
        Some(cfg)
    }

    pub fn preset_names() -> &'static [&'static str] {
        &["vit-base", "vit-huge", "vit-giga", "vit-tiny"]
    }

    pub fn validate(&self) -> Result<(), ViTError> {
        if self.image_size == 0
            || self.patch_size == 0
            || self.channels == 0
            || self.dim == 0
            || self.depth == 0
            || self.heads == 0
            || self.mlp_ratio == 0
        {
            return Err(ViTError::BadConfig("all fields must be positive".into()));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(ViTError::BadConfig(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.dim % self.heads != 0 {
            return Err(ViTError::BadConfig(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        let per_side = self.image_size / self.patch_size;
        per_side * per_side
    }

    /// Sequence length including the CLS token.
    pub fn seq_len(&self) -> usize {
        1 + self.num_patches()
    }

    /// Flattened patch vector length.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn mlp_dim(&self) -> usize {
        self.dim * self.mlp_ratio
    }

    /// Total backbone parameter count (the head lives in the adapter).
    pub fn backbone_param_count(&self) -> usize {
        let d = self.dim;
        let per_block = 4 * d * d + 4 * d          // q/k/v/o weights + biases
            + d * self.mlp_dim() + self.mlp_dim()  // mlp in
            + self.mlp_dim() * d + d               // mlp out
            + 4 * d; // two layernorms
        d * self.patch_dim() + self.seq_len() * d + d + self.depth * per_block + 2 * d
    }
}

/// One transformer block's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub w_q: Tensor,
    pub b_q: Tensor,
    pub w_k: Tensor,
    pub b_k: Tensor,
    pub w_v: Tensor,
    pub b_v: Tensor,
    pub w_o: Tensor,
    pub b_o: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub mlp_w1: Tensor,
    pub mlp_b1: Tensor,
    pub mlp_w2: Tensor,
    pub mlp_b2: Tensor,
}

/// The frozen backbone parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct ViTWeights {
    pub patch_embed: Tensor,
    pub pos_embed: Tensor,
    pub cls_token: Tensor,
    pub blocks: Vec<BlockWeights>,
    pub final_gamma: Tensor,
    pub final_beta: Tensor,
}

impl ViTWeights {
    /// Seeded Gaussian init (std 0.02) for weight matrices and embeddings;
    /// biases start at zero, layernorm at identity.
    pub fn init(cfg: &ViTConfig, seed: u64) -> ViTWeights {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.dim;
        let patch_embed = Tensor::randn(&[d, cfg.patch_dim()], INIT_STD, &mut rng);
        let pos_embed = Tensor::randn(&[cfg.seq_len(), d], INIT_STD, &mut rng);
        let cls_token = Tensor::randn(&[d], INIT_STD, &mut rng);
        let mut blocks = Vec::with_capacity(cfg.depth);
        for _ in 0..cfg.depth {
            blocks.push(BlockWeights {
                ln1_gamma: Tensor::filled(&[d], 1.0),
                ln1_beta: Tensor::zeros(&[d]),
                w_q: Tensor::randn(&[d, d], INIT_STD, &mut rng),
                b_q: Tensor::zeros(&[d]),
                w_k: Tensor::randn(&[d, d], INIT_STD, &mut rng),
                b_k: Tensor::zeros(&[d]),
                w_v: Tensor::randn(&[d, d], INIT_STD, &mut rng),
                b_v: Tensor::zeros(&[d]),
                w_o: Tensor::randn(&[d, d], INIT_STD, &mut rng),
                b_o: Tensor::zeros(&[d]),
                ln2_gamma: Tensor::filled(&[d], 1.0),
                ln2_beta: Tensor::zeros(&[d]),
                mlp_w1: Tensor::randn(&[cfg.mlp_dim(), d], INIT_STD, &mut rng),
                mlp_b1: Tensor::zeros(&[cfg.mlp_dim()]),
                mlp_w2: Tensor::randn(&[d, cfg.mlp_dim()], INIT_STD, &mut rng),
                mlp_b2: Tensor::zeros(&[d]),
            });
        }
        ViTWeights {
            patch_embed,
            pos_embed,
            cls_token,
            blocks,
            final_gamma: Tensor::filled(&[d], 1.0),
            final_beta: Tensor::zeros(&[d]),
        }
    }

    /// The weight matrix an adapter attaches to, addressed by layer and
    /// projection kind.
    pub fn projection(&self, layer: usize, kind: ProjectionKind) -> &Tensor {
        match kind {
            ProjectionKind::Query => &self.blocks[layer].w_q,
            ProjectionKind::Value => &self.blocks[layer].w_v,
        }
    }

    fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("patch_embed".into(), &self.patch_embed),
            ("pos_embed".into(), &self.pos_embed),
            ("cls_token".into(), &self.cls_token),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.ln1.gamma"), &b.ln1_gamma));
            out.push((format!("block{i}.ln1.beta"), &b.ln1_beta));
            out.push((format!("block{i}.attn.wq"), &b.w_q));
            out.push((format!("block{i}.attn.bq"), &b.b_q));
            out.push((format!("block{i}.attn.wk"), &b.w_k));
            out.push((format!("block{i}.attn.bk"), &b.b_k));
            out.push((format!("block{i}.attn.wv"), &b.w_v));
            out.push((format!("block{i}.attn.bv"), &b.b_v));
            out.push((format!("block{i}.attn.wo"), &b.w_o));
            out.push((format!("block{i}.attn.bo"), &b.b_o));
            out.push((format!("block{i}.ln2.gamma"), &b.ln2_gamma));
            out.push((format!("block{i}.ln2.beta"), &b.ln2_beta));
            out.push((format!("block{i}.mlp.w1"), &b.mlp_w1));
            out.push((format!("block{i}.mlp.b1"), &b.mlp_b1));
            out.push((format!("block{i}.mlp.w2"), &b.mlp_w2));
            out.push((format!("block{i}.mlp.b2"), &b.mlp_b2));
        }
        out.push(("final.gamma".into(), &self.final_gamma));
        out.push(("final.beta".into(), &self.final_beta));
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Deterministic checksum over the raw weight bytes; used to verify the
    /// frozen-backbone guarantee.
    pub fn checksum(&self) -> u32 {
        let mut hasher = crc32fast::Hasher::new();
        for (_, t) in self.tensors() {
            for &v in t.data() {
                hasher.update(&v.to_le_bytes());
            }
        }
        hasher.finalize()
    }
}

/// Exact on-disk size of a backbone file for `cfg`, in bytes.
pub fn backbone_file_size(cfg: &ViTConfig) -> usize {
    let d = cfg.dim;
    let mut body = 7 * 4; // config block
    let mut tensor = |name: &str, shape: &[usize]| {
        body += named_tensor_size(name, shape);
    };
    tensor("patch_embed", &[d, cfg.patch_dim()]);
    tensor("pos_embed", &[cfg.seq_len(), d]);
    tensor("cls_token", &[d]);
    for i in 0..cfg.depth {
        tensor(&format!("block{i}.ln1.gamma"), &[d]);
        tensor(&format!("block{i}.ln1.beta"), &[d]);
        tensor(&format!("block{i}.attn.wq"), &[d, d]);
        tensor(&format!("block{i}.attn.bq"), &[d]);
        tensor(&format!("block{i}.attn.wk"), &[d, d]);
        tensor(&format!("block{i}.attn.bk"), &[d]);
        tensor(&format!("block{i}.attn.wv"), &[d, d]);
        tensor(&format!("block{i}.attn.bv"), &[d]);
        tensor(&format!("block{i}.attn.wo"), &[d, d]);
        tensor(&format!("block{i}.attn.bo"), &[d]);
        tensor(&format!("block{i}.ln2.gamma"), &[d]);
        tensor(&format!("block{i}.ln2.beta"), &[d]);
        tensor(&format!("block{i}.mlp.w1"), &[cfg.mlp_dim(), d]);
        tensor(&format!("block{i}.mlp.b1"), &[cfg.mlp_dim()]);
        tensor(&format!("block{i}.mlp.w2"), &[d, cfg.mlp_dim()]);
        tensor(&format!("block{i}.mlp.b2"), &[d]);
    }
    tensor("final.gamma", &[d]);
    tensor("final.beta", &[d]);
    4 + 2 + body + 4
}

/// Serializes config + weights: magic "MELB", version, seven u32 config
/// fields (image_size, patch_size, channels, dim, depth, heads, mlp_ratio),
/// the named tensors in fixed order, CRC32 trailer.
pub fn save_backbone(cfg: &ViTConfig, w: &ViTWeights, path: &Path) -> Result<(), FormatError> {
    let mut wr = Writer::new(BACKBONE_MAGIC, BACKBONE_FORMAT_VERSION);
    wr.put_u32(cfg.image_size as u32);
    wr.put_u32(cfg.patch_size as u32);
    wr.put_u32(cfg.channels as u32);
    wr.put_u32(cfg.dim as u32);
    wr.put_u32(cfg.depth as u32);
    wr.put_u32(cfg.heads as u32);
    wr.put_u32(cfg.mlp_ratio as u32);
    for (name, t) in w.tensors() {
        wr.put_named_tensor(&name, t);
    }
    std::fs::write(path, wr.finish())?;
    Ok(())
}

pub fn load_backbone(path: &Path) -> Result<(ViTConfig, ViTWeights), FormatError> {
    let bytes = std::fs::read(path)?;
    load_backbone_bytes(&bytes)
}

pub fn load_backbone_bytes(bytes: &[u8]) -> Result<(ViTConfig, ViTWeights), FormatError> {
    let mut r = Reader::open(bytes, BACKBONE_MAGIC, BACKBONE_FORMAT_VERSION)?;
    let cfg = ViTConfig {
        image_size: r.get_u32()? as usize,
        patch_size: r.get_u32()? as usize,
        channels: r.get_u32()? as usize,
        dim: r.get_u32()? as usize,
        depth: r.get_u32()? as usize,
        heads: r.get_u32()? as usize,
        mlp_ratio: r.get_u32()? as usize,
    };
    cfg.validate()
        .map_err(|e| FormatError::Malformed(e.to_string()))?;
    let patch_embed = r.get_named_tensor("patch_embed")?;
    let pos_embed = r.get_named_tensor("pos_embed")?;
    let cls_token = r.get_named_tensor("cls_token")?;
    let mut blocks = Vec::with_capacity(cfg.depth);
    for i in 0..cfg.depth {
        blocks.push(BlockWeights {
            ln1_gamma: r.get_named_tensor(&format!("block{i}.ln1.gamma"))?,
            ln1_beta: r.get_named_tensor(&format!("block{i}.ln1.beta"))?,
            w_q: r.get_named_tensor(&format!("block{i}.attn.wq"))?,
            b_q: r.get_named_tensor(&format!("block{i}.attn.bq"))?,
            w_k: r.get_named_tensor(&format!("block{i}.attn.wk"))?,
            b_k: r.get_named_tensor(&format!("block{i}.attn.bk"))?,
            w_v: r.get_named_tensor(&format!("block{i}.attn.wv"))?,
            b_v: r.get_named_tensor(&format!("block{i}.attn.bv"))?,
            w_o: r.get_named_tensor(&format!("block{i}.attn.wo"))?,
            b_o: r.get_named_tensor(&format!("block{i}.attn.bo"))?,
            ln2_gamma: r.get_named_tensor(&format!("block{i}.ln2.gamma"))?,
            ln2_beta: r.get_named_tensor(&format!("block{i}.ln2.beta"))?,
            mlp_w1: r.get_named_tensor(&format!("block{i}.mlp.w1"))?,
            mlp_b1: r.get_named_tensor(&format!("block{i}.mlp.b1"))?,
            mlp_w2: r.get_named_tensor(&format!("block{i}.mlp.w2"))?,
            mlp_b2: r.get_named_tensor(&format!("block{i}.mlp.b2"))?,
        });
    }
    let final_gamma = r.get_named_tensor("final.gamma")?;
    let final_beta = r.get_named_tensor("final.beta")?;
    r.expect_end()?;
    Ok((
        cfg,
        ViTWeights {
            patch_embed,
            pos_embed,
            cls_token,
            blocks,
            final_gamma,
            final_beta,
        },
    ))
}

/// Cuts the image into patches, embeds them, prepends the CLS token, and
/// adds the positional embedding. Patch vectors are flattened channel-major.
pub fn patchify_embed(
    image: &Tensor,
    cfg: &ViTConfig,
    w: &ViTWeights,
) -> Result<Tensor, ViTError> {
    let expected = [cfg.channels, cfg.image_size, cfg.image_size];
    if image.shape() != expected {
        return Err(ViTError::BadImage {
            channels: cfg.channels,
            size: cfg.image_size,
            got: image.shape().to_vec(),
        });
    }
    let p = cfg.patch_size;
    let per_side = cfg.image_size / p;
    let n = cfg.num_patches();
    let mut patches = Vec::with_capacity(n * cfg.patch_dim());
    let img = image.data();
    let hw = cfg.image_size * cfg.image_size;
    for pr in 0..per_side {
        for pc in 0..per_side {
            for c in 0..cfg.channels {
                for y in 0..p {
                    let row = pr * p + y;
                    let base = c * hw + row * cfg.image_size + pc * p;
                    patches.extend_from_slice(&img[base..base + p]);
                }
            }
        }
    }
    let patches = Tensor::new(&[n, cfg.patch_dim()], patches)?;
    let embedded = patches.matmul_nt(&w.patch_embed)?;
    let mut tokens = Vec::with_capacity(cfg.seq_len() * cfg.dim);
    tokens.extend_from_slice(w.cls_token.data());
    tokens.extend_from_slice(embedded.data());
    let tokens = Tensor::new(&[cfg.seq_len(), cfg.dim], tokens)?;
    Ok(tokens.add(&w.pos_embed)?)
}

/// Copies columns `[start, start+width)` out of a 2-D tensor.
fn col_block(x: &Tensor, start: usize, width: usize) -> Tensor {
    let (rows, cols) = (x.rows(), x.cols());
    let mut out = Vec::with_capacity(rows * width);
    for r in 0..rows {
        let row = &x.data()[r * cols..r * cols + cols];
        out.extend_from_slice(&row[start..start + width]);
    }
    Tensor::new(&[rows, width], out).expect("col_block shape")
}

/// Runs all transformer blocks and returns the final-layernormed CLS
/// embedding. When `adapter` is present, the Q and V projections of every
/// block include the adapter's low-rank update; otherwise they are plain
/// frozen projections.
pub fn forward_features(
    image: &Tensor,
    cfg: &ViTConfig,
    w: &ViTWeights,
    adapter: Option<&LoraAdapter>,
) -> Result<Tensor, ViTError> {
    if let Some(a) = adapter {
        a.check_compat(cfg)?;
    }
    let mut x = patchify_embed(image, cfg, w)?;
    let t = cfg.seq_len();
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f32).sqrt();
    for (layer, b) in w.blocks.iter().enumerate() {
        let h = x.layernorm(&b.ln1_gamma, &b.ln1_beta, LN_EPS)?;
        let q = match adapter {
            Some(a) => {
                let (la, lb) = a.pair(layer, ProjectionKind::Query);
                apply_lora(&h, &b.w_q, la, lb, a.scale)?
            }
            None => h.matmul_nt(&b.w_q)?,
        }
        .add_row(&b.b_q)?;
        let k = h.matmul_nt(&b.w_k)?.add_row(&b.b_k)?;
        let v = match adapter {
            Some(a) => {
                let (la, lb) = a.pair(layer, ProjectionKind::Value);
                apply_lora(&h, &b.w_v, la, lb, a.scale)?
            }
            None => h.matmul_nt(&b.w_v)?,
        }
        .add_row(&b.b_v)?;

        let mut ctx = vec![0.0f32; t * cfg.dim];
        for head in 0..cfg.heads {
            let qh = col_block(&q, head * dh, dh);
            let kh = col_block(&k, head * dh, dh);
            let vh = col_block(&v, head * dh, dh);
            let attn = qh.matmul_nt(&kh)?.scale(scale).softmax(1)?;
            let ctx_h = attn.matmul(&vh)?;
            for r in 0..t {
                let dst = r * cfg.dim + head * dh;
                ctx[dst..dst + dh].copy_from_slice(&ctx_h.data()[r * dh..(r + 1) * dh]);
            }
        }
        let ctx = Tensor::new(&[t, cfg.dim], ctx)?;
        let attn_out = ctx.matmul_nt(&b.w_o)?.add_row(&b.b_o)?;
        x = x.add(&attn_out)?;

        let h2 = x.layernorm(&b.ln2_gamma, &b.ln2_beta, LN_EPS)?;
        let u = h2.matmul_nt(&b.mlp_w1)?.add_row(&b.mlp_b1)?;
        let mlp_out = u.gelu().matmul_nt(&b.mlp_w2)?.add_row(&b.mlp_b2)?;
        x = x.add(&mlp_out)?;
    }
    let y = x.layernorm(&w.final_gamma, &w.final_beta, LN_EPS)?;
    Ok(Tensor::new(&[cfg.dim], y.row(0).to_vec())?)
}

/// Full forward pass. With an adapter this returns the task head's logits;
/// without one there is no task head, so the backbone CLS features are
/// returned as-is.
pub fn forward(
    image: &Tensor,
    cfg: &ViTConfig,
    w: &ViTWeights,
    adapter: Option<&LoraAdapter>,
) -> Result<Tensor, ViTError> {
    let features = forward_features(image, cfg, w, adapter)?;
    match adapter {
        Some(a) => Ok(a.apply_head(&features)?),
        None => Ok(features),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::{init_adapter, merge_adapter};

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

    fn random_image(cfg: &ViTConfig, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(&[cfg.channels, cfg.image_size, cfg.image_size], 1.0, &mut rng)
    }

    #[test]
    fn patch_count_arithmetic() {
        let cfg = ViTConfig {
            image_size: 32,
            patch_size: 8,
            channels: 1,
            dim: 16,
            heads: 2,
            depth: 1,
            mlp_ratio: 2,
        };
        assert_eq!(cfg.num_patches(), 16);
        assert_eq!(cfg.seq_len(), 17);
        let base = ViTConfig::preset("vit-base").unwrap();
        assert_eq!(base.num_patches(), 196);
        assert_eq!(base.seq_len(), 197);
    }

    #[test]
    fn patchify_zero_image_gives_pos_embed() {
        let cfg = tiny_cfg();
        let mut w = ViTWeights::init(&cfg, 3);
        w.patch_embed = Tensor::zeros(&[cfg.dim, cfg.patch_dim()]);
        w.cls_token = Tensor::zeros(&[cfg.dim]);
        let img = Tensor::zeros(&[cfg.channels, cfg.image_size, cfg.image_size]);
        let tokens = patchify_embed(&img, &cfg, &w).unwrap();
        assert_eq!(tokens, w.pos_embed);
    }

    #[test]
    fn patchify_rejects_wrong_size() {
        let cfg = tiny_cfg();
        let w = ViTWeights::init(&cfg, 3);
        let img = Tensor::zeros(&[1, 4, 4]);
        let err = patchify_embed(&img, &cfg, &w).unwrap_err();
        assert!(matches!(err, ViTError::BadImage { .. }));
    }

    #[test]
    fn zero_network_passes_head_bias_through() {
        // All weights zero: every activation is zero, so logits equal the
        // adapter head bias.
        let cfg = ViTConfig {
            image_size: 4,
            patch_size: 4,
            channels: 1,
            dim: 4,
            heads: 1,
            depth: 1,
            mlp_ratio: 1,
        };
        let mut w = ViTWeights::init(&cfg, 0);
        w.patch_embed = Tensor::zeros(&[cfg.dim, cfg.patch_dim()]);
        w.pos_embed = Tensor::zeros(&[cfg.seq_len(), cfg.dim]);
        w.cls_token = Tensor::zeros(&[cfg.dim]);
        for b in &mut w.blocks {
            b.w_q = Tensor::zeros(&[4, 4]);
            b.w_k = Tensor::zeros(&[4, 4]);
            b.w_v = Tensor::zeros(&[4, 4]);
            b.w_o = Tensor::zeros(&[4, 4]);
            b.mlp_w1 = Tensor::zeros(&[4, 4]);
            b.mlp_w2 = Tensor::zeros(&[4, 4]);
        }
        let mut adapter = init_adapter(&cfg, 2, 2, 9).unwrap();
        adapter.head_weight = Tensor::zeros(&[2, 4]);
        adapter.head_bias = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let img = Tensor::zeros(&[1, 4, 4]);
        let logits = forward(&img, &cfg, &w, Some(&adapter)).unwrap();
        assert_eq!(logits.data(), &[1.0, 2.0]);
    }

    #[test]
    fn fresh_adapter_matches_no_adapter_features_bit_exactly() {
        let cfg = tiny_cfg();
        let w = ViTWeights::init(&cfg, 5);
        let adapter = init_adapter(&cfg, 3, 2, 77).unwrap();
        let img = random_image(&cfg, 8);
        let plain = forward_features(&img, &cfg, &w, None).unwrap();
        let with_zero = forward_features(&img, &cfg, &w, Some(&adapter)).unwrap();
        assert_eq!(plain, with_zero);
        // And the logits are exactly the head applied to the plain features.
        let logits = forward(&img, &cfg, &w, Some(&adapter)).unwrap();
        assert_eq!(logits, adapter.apply_head(&plain).unwrap());
    }

    #[test]
    fn runtime_add_close_to_merged() {
        let cfg = tiny_cfg();
        let w = ViTWeights::init(&cfg, 5);
        let mut adapter = init_adapter(&cfg, 3, 2, 77).unwrap();
        adapter.randomize_updates(0.1, 123);
        let img = random_image(&cfg, 8);
        let runtime = forward(&img, &cfg, &w, Some(&adapter)).unwrap();
        let merged = merge_adapter(&w, &adapter).unwrap();
        let merged_feats = forward_features(&img, &cfg, &merged, None).unwrap();
        let merged_logits = adapter.apply_head(&merged_feats).unwrap();
        for (a, b) in runtime.data().iter().zip(merged_logits.data()) {
            assert!((a - b).abs() < 1e-5, "runtime {a} vs merged {b}");
        }
    }

    #[test]
    fn incompatible_adapter_names_both_dims() {
        let cfg = tiny_cfg();
        let w = ViTWeights::init(&cfg, 5);
        let other = ViTConfig { dim: 16, ..cfg };
        let adapter = init_adapter(&other, 2, 2, 1).unwrap();
        let img = random_image(&cfg, 8);
        let err = forward(&img, &cfg, &w, Some(&adapter)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("16") && msg.contains('8'), "got: {msg}");
    }

    #[test]
    fn backbone_roundtrip_is_bit_exact() {
        let cfg = tiny_cfg();
        let w = ViTWeights::init(&cfg, 42);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("backbone.melb");
        save_backbone(&cfg, &w, &path).unwrap();
        let (cfg2, w2) = load_backbone(&path).unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(w, w2);
        // Saving again produces identical bytes.
        let path2 = dir.path().join("backbone2.melb");
        save_backbone(&cfg2, &w2, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn corrupted_header_rejected() {
        let cfg = tiny_cfg();
        let w = ViTWeights::init(&cfg, 42);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("backbone.melb");
        save_backbone(&cfg, &w, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        let err = load_backbone_bytes(&bytes).unwrap_err();
        assert!(matches!(err, FormatError::BadMagic { .. }));
        let mut bytes2 = std::fs::read(&path).unwrap();
        bytes2[4] = 0xFF;
        let err2 = load_backbone_bytes(&bytes2).unwrap_err();
        assert!(matches!(err2, FormatError::UnsupportedVersion { .. }));
    }

    #[test]
    fn file_size_close_to_four_bytes_per_param() {
        let cfg = tiny_cfg();
        let w = ViTWeights::init(&cfg, 42);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("backbone.melb");
        save_backbone(&cfg, &w, &path).unwrap();
        let on_disk = std::fs::read(&path).unwrap().len();
        assert_eq!(on_disk, backbone_file_size(&cfg));
        assert_eq!(w.param_count(), cfg.backbone_param_count());
        let payload = 4 * w.param_count();
        // Name/shape framing is small next to the weights themselves.
        assert!(on_disk >= payload && on_disk < payload + payload / 10 + 4096);
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = tiny_cfg();
        let w = ViTWeights::init(&cfg, 5);
        let img = random_image(&cfg, 8);
        let a = forward_features(&img, &cfg, &w, None).unwrap();
        let b = forward_features(&img, &cfg, &w, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn preset_dims() {
        let base = ViTConfig::preset("vit-base").unwrap();
        assert_eq!((base.dim, base.depth, base.heads), (768, 12, 12));
        let huge = ViTConfig::preset("vit-huge").unwrap();
        assert_eq!((huge.dim, huge.depth, huge.heads), (1280, 32, 16));
        let giga = ViTConfig::preset("vit-giga").unwrap();
        assert_eq!((giga.dim, giga.depth, giga.heads), (1664, 48, 16));
        assert!(ViTConfig::preset("vit-nano").is_none());
        for name in ViTConfig::preset_names() {
            ViTConfig::preset(name).unwrap().validate().unwrap();
        }
    }
}
