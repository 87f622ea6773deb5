//! 64-bit training engine: forward pass with activation caching and
//! explicit backward functions through every ViT component.
//!
//! Parameters are copied out of the f32 inference structures once at
//! construction and held in f64 for the whole run, which keeps analytic
//! gradients and central finite differences in close agreement. The
//! frozen f32 backbone passed in is never touched.

use crate::lora::{LoraAdapter, LoraPair};
use crate::tensor::{Tensor, GELU_COEF};
use crate::vit::{ViTConfig, ViTWeights, LN_EPS};

/// Row-major f64 matrix used only inside the trainer.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        let (rows, cols) = match t.shape() {
            [r, c] => (*r, *c),
            [n] => (1, *n),
            other => panic!("expected rank 1 or 2 tensor, got {other:?}"),
        };
        Mat {
            rows,
            cols,
            data: t.data().iter().map(|&v| f64::from(v)).collect(),
        }
    }

    pub fn to_tensor(&self, shape: &[usize]) -> Tensor {
        Tensor::new(shape, self.data.iter().map(|&v| v as f32).collect())
            .expect("shape must match data")
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `self · otherᵀ`: `[m×k]·[n×k]ᵀ -> [m×n]`.
    pub fn matmul_nt(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.cols, "matmul_nt inner dims");
        let mut out = Mat::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                let b = other.row(j);
                let mut acc = 0.0;
                for p in 0..self.cols {
                    acc += a[p] * b[p];
                }
                out.data[i * other.rows + j] = acc;
            }
        }
        out
    }

    /// `[m×k]·[k×n] -> [m×n]`.
    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "matmul inner dims");
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a = self.row(i);
            for p in 0..self.cols {
                let av = a[p];
                if av == 0.0 {
                    continue;
                }
                let b = other.row(p);
                let o = out.row_mut(i);
                for j in 0..other.cols {
                    o[j] += av * b[j];
                }
            }
        }
        out
    }

    /// `selfᵀ · other`: `[m×k]ᵀ·[m×n] -> [k×n]` (sum over rows).
    pub fn matmul_tn(&self, other: &Mat) -> Mat {
        assert_eq!(self.rows, other.rows, "matmul_tn outer dims");
        let mut out = Mat::zeros(self.cols, other.cols);
        for t in 0..self.rows {
            let a = self.row(t);
            let b = other.row(t);
            for i in 0..self.cols {
                let av = a[i];
                if av == 0.0 {
                    continue;
                }
                let o = out.row_mut(i);
                for j in 0..other.cols {
                    o[j] += av * b[j];
                }
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Mat) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_in_place(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn scaled(&self, s: f64) -> Mat {
        let mut out = self.clone();
        out.scale_in_place(s);
        out
    }

    pub fn col_sum(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (o, v) in out.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        out
    }

    pub fn col_block(&self, start: usize, width: usize) -> Mat {
        let mut out = Mat::zeros(self.rows, width);
        for r in 0..self.rows {
            out.row_mut(r).copy_from_slice(&self.row(r)[start..start + width]);
        }
        out
    }

    pub fn add_col_block(&mut self, src: &Mat, start: usize) {
        let w = src.cols;
        for r in 0..self.rows {
            let dst = &mut self.row_mut(r)[start..start + w];
            for (d, s) in dst.iter_mut().zip(src.row(r)) {
                *d += s;
            }
        }
    }

    pub fn add_row_vec(&mut self, bias: &[f64]) {
        for r in 0..self.rows {
            for (v, b) in self.row_mut(r).iter_mut().zip(bias) {
                *v += b;
            }
        }
    }
}

fn gelu64(x: f64) -> f64 {
    let inner = (2.0 / std::f64::consts::PI).sqrt() * (x + GELU_COEF * x * x * x);
    0.5 * x * (1.0 + inner.tanh())
}

fn gelu64_grad(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let inner = c * (x + GELU_COEF * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * GELU_COEF * x * x)
}

pub(crate) struct BlockF64 {
    pub ln1_g: Vec<f64>,
    pub ln1_b: Vec<f64>,
    pub wq: Mat,
    pub bq: Vec<f64>,
    pub wk: Mat,
    pub bk: Vec<f64>,
    pub wv: Mat,
    pub bv: Vec<f64>,
    pub wo: Mat,
    pub bo: Vec<f64>,
    pub ln2_g: Vec<f64>,
    pub ln2_b: Vec<f64>,
    pub w1: Mat,
    pub b1: Vec<f64>,
    pub w2: Mat,
    pub b2: Vec<f64>,
}

pub(crate) struct BackboneF64 {
    pub patch_embed: Mat,
    pub pos_embed: Mat,
    pub cls: Vec<f64>,
    pub blocks: Vec<BlockF64>,
    pub final_g: Vec<f64>,
    pub final_b: Vec<f64>,
}

pub(crate) struct AdapterF64 {
    pub rank: usize,
    pub scale: f64,
    /// Per layer: (A `[r×d]`, B `[d×r]`).
    pub q: Vec<(Mat, Mat)>,
    pub v: Vec<(Mat, Mat)>,
    pub head_w: Mat,
    pub head_b: Vec<f64>,
}

fn vec64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| f64::from(v)).collect()
}

fn tensor32(v: &[f64], shape: &[usize]) -> Tensor {
    Tensor::new(shape, v.iter().map(|&x| x as f32).collect()).expect("shape")
}

impl BackboneF64 {
    pub fn from_weights(w: &ViTWeights) -> Self {
        BackboneF64 {
            patch_embed: Mat::from_tensor(&w.patch_embed),
            pos_embed: Mat::from_tensor(&w.pos_embed),
            cls: vec64(&w.cls_token),
            blocks: w
                .blocks
                .iter()
                .map(|b| BlockF64 {
                    ln1_g: vec64(&b.ln1_gamma),
                    ln1_b: vec64(&b.ln1_beta),
                    wq: Mat::from_tensor(&b.w_q),
                    bq: vec64(&b.b_q),
                    wk: Mat::from_tensor(&b.w_k),
                    bk: vec64(&b.b_k),
                    wv: Mat::from_tensor(&b.w_v),
                    bv: vec64(&b.b_v),
                    wo: Mat::from_tensor(&b.w_o),
                    bo: vec64(&b.b_o),
                    ln2_g: vec64(&b.ln2_gamma),
                    ln2_b: vec64(&b.ln2_beta),
                    w1: Mat::from_tensor(&b.mlp_w1),
                    b1: vec64(&b.mlp_b1),
                    w2: Mat::from_tensor(&b.mlp_w2),
                    b2: vec64(&b.mlp_b2),
                })
                .collect(),
            final_g: vec64(&w.final_gamma),
            final_b: vec64(&w.final_beta),
        }
    }

    pub fn zeros_like(other: &BackboneF64) -> Self {
        BackboneF64 {
            patch_embed: Mat::zeros(other.patch_embed.rows, other.patch_embed.cols),
            pos_embed: Mat::zeros(other.pos_embed.rows, other.pos_embed.cols),
            cls: vec![0.0; other.cls.len()],
            blocks: other
                .blocks
                .iter()
                .map(|b| BlockF64 {
                    ln1_g: vec![0.0; b.ln1_g.len()],
                    ln1_b: vec![0.0; b.ln1_b.len()],
                    wq: Mat::zeros(b.wq.rows, b.wq.cols),
                    bq: vec![0.0; b.bq.len()],
                    wk: Mat::zeros(b.wk.rows, b.wk.cols),
                    bk: vec![0.0; b.bk.len()],
                    wv: Mat::zeros(b.wv.rows, b.wv.cols),
                    bv: vec![0.0; b.bv.len()],
                    wo: Mat::zeros(b.wo.rows, b.wo.cols),
                    bo: vec![0.0; b.bo.len()],
                    ln2_g: vec![0.0; b.ln2_g.len()],
                    ln2_b: vec![0.0; b.ln2_b.len()],
                    w1: Mat::zeros(b.w1.rows, b.w1.cols),
                    b1: vec![0.0; b.b1.len()],
                    w2: Mat::zeros(b.w2.rows, b.w2.cols),
                    b2: vec![0.0; b.b2.len()],
                })
                .collect(),
            final_g: vec![0.0; other.final_g.len()],
            final_b: vec![0.0; other.final_b.len()],
        }
    }

    pub fn to_weights(&self, cfg: &ViTConfig) -> ViTWeights {
        ViTWeights {
            patch_embed: self.patch_embed.to_tensor(&[cfg.dim, cfg.patch_dim()]),
            pos_embed: self.pos_embed.to_tensor(&[cfg.seq_len(), cfg.dim]),
            cls_token: tensor32(&self.cls, &[cfg.dim]),
            blocks: self
                .blocks
                .iter()
                .map(|b| crate::vit::BlockWeights {
                    ln1_gamma: tensor32(&b.ln1_g, &[cfg.dim]),
                    ln1_beta: tensor32(&b.ln1_b, &[cfg.dim]),
                    w_q: b.wq.to_tensor(&[cfg.dim, cfg.dim]),
                    b_q: tensor32(&b.bq, &[cfg.dim]),
                    w_k: b.wk.to_tensor(&[cfg.dim, cfg.dim]),
                    b_k: tensor32(&b.bk, &[cfg.dim]),
                    w_v: b.wv.to_tensor(&[cfg.dim, cfg.dim]),
                    b_v: tensor32(&b.bv, &[cfg.dim]),
                    w_o: b.wo.to_tensor(&[cfg.dim, cfg.dim]),
                    b_o: tensor32(&b.bo, &[cfg.dim]),
                    ln2_gamma: tensor32(&b.ln2_g, &[cfg.dim]),
                    ln2_beta: tensor32(&b.ln2_b, &[cfg.dim]),
                    mlp_w1: b.w1.to_tensor(&[cfg.mlp_dim(), cfg.dim]),
                    mlp_b1: tensor32(&b.b1, &[cfg.mlp_dim()]),
                    mlp_w2: b.w2.to_tensor(&[cfg.dim, cfg.mlp_dim()]),
                    mlp_b2: tensor32(&b.b2, &[cfg.dim]),
                })
                .collect(),
            final_gamma: tensor32(&self.final_g, &[cfg.dim]),
            final_beta: tensor32(&self.final_b, &[cfg.dim]),
        }
    }
}

impl AdapterF64 {
    pub fn from_adapter(a: &LoraAdapter) -> Self {
        AdapterF64 {
            rank: a.rank,
            scale: f64::from(a.scale),
            q: a
                .q_pairs
                .iter()
                .map(|p| (Mat::from_tensor(&p.a), Mat::from_tensor(&p.b)))
                .collect(),
            v: a
                .v_pairs
                .iter()
                .map(|p| (Mat::from_tensor(&p.a), Mat::from_tensor(&p.b)))
                .collect(),
            head_w: Mat::from_tensor(&a.head_weight),
            head_b: vec64(&a.head_bias),
        }
    }

    pub fn zeros_like(other: &AdapterF64) -> Self {
        AdapterF64 {
            rank: other.rank,
            scale: other.scale,
            q: other
                .q
                .iter()
                .map(|(a, b)| (Mat::zeros(a.rows, a.cols), Mat::zeros(b.rows, b.cols)))
                .collect(),
            v: other
                .v
                .iter()
                .map(|(a, b)| (Mat::zeros(a.rows, a.cols), Mat::zeros(b.rows, b.cols)))
                .collect(),
            head_w: Mat::zeros(other.head_w.rows, other.head_w.cols),
            head_b: vec![0.0; other.head_b.len()],
        }
    }

    pub fn to_adapter(&self, cfg: &ViTConfig, task_name: &str) -> LoraAdapter {
        let d = cfg.dim;
        let r = self.rank;
        LoraAdapter {
            task_name: task_name.to_string(),
            base_d: d,
            depth: cfg.depth,
            rank: r,
            scale: self.scale as f32,
            q_pairs: self
                .q
                .iter()
                .map(|(a, b)| LoraPair {
                    a: a.to_tensor(&[r, d]),
                    b: b.to_tensor(&[d, r]),
                })
                .collect(),
            v_pairs: self
                .v
                .iter()
                .map(|(a, b)| LoraPair {
                    a: a.to_tensor(&[r, d]),
                    b: b.to_tensor(&[d, r]),
                })
                .collect(),
            head_weight: self.head_w.to_tensor(&[self.head_b.len(), d]),
            head_bias: tensor32(&self.head_b, &[self.head_b.len()]),
        }
    }
}

struct LnCache {
    /// Normalized pre-affine values.
    xhat: Mat,
    /// Per-row 1/std.
    istd: Vec<f64>,
    /// Post-affine output.
    y: Mat,
}

fn ln_forward(x: &Mat, gamma: &[f64], beta: &[f64]) -> LnCache {
    let n = x.cols as f64;
    let mut xhat = Mat::zeros(x.rows, x.cols);
    let mut y = Mat::zeros(x.rows, x.cols);
    let mut istd = vec![0.0; x.rows];
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + f64::from(LN_EPS)).sqrt();
        istd[r] = inv;
        for c in 0..x.cols {
            let h = (row[c] - mean) * inv;
            xhat.data[r * x.cols + c] = h;
            y.data[r * x.cols + c] = h * gamma[c] + beta[c];
        }
    }
    LnCache { xhat, istd, y }
}

/// Returns dx; accumulates dgamma/dbeta when provided.
fn ln_backward(
    dy: &Mat,
    cache: &LnCache,
    gamma: &[f64],
    mut dgamma: Option<&mut Vec<f64>>,
    mut dbeta: Option<&mut Vec<f64>>,
) -> Mat {
    let n = dy.cols as f64;
    let mut dx = Mat::zeros(dy.rows, dy.cols);
    for r in 0..dy.rows {
        let dyr = dy.row(r);
        let xh = cache.xhat.row(r);
        if let Some(dg) = dgamma.as_deref_mut() {
            for c in 0..dy.cols {
                dg[c] += dyr[c] * xh[c];
            }
        }
        if let Some(db) = dbeta.as_deref_mut() {
            for c in 0..dy.cols {
                db[c] += dyr[c];
            }
        }
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        let mut dxhat = vec![0.0; dy.cols];
        for c in 0..dy.cols {
            dxhat[c] = dyr[c] * gamma[c];
            mean_dxhat += dxhat[c];
            mean_dxhat_xhat += dxhat[c] * xh[c];
        }
        mean_dxhat /= n;
        mean_dxhat_xhat /= n;
        let inv = cache.istd[r];
        for c in 0..dy.cols {
            dx.data[r * dy.cols + c] = inv * (dxhat[c] - mean_dxhat - xh[c] * mean_dxhat_xhat);
        }
    }
    dx
}

fn softmax_rows(x: &Mat) -> Mat {
    let mut out = Mat::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        let row = x.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for c in 0..x.cols {
            let e = (row[c] - max).exp();
            out.data[r * x.cols + c] = e;
            sum += e;
        }
        for c in 0..x.cols {
            out.data[r * x.cols + c] /= sum;
        }
    }
    out
}

/// dS for P = softmax_rows(S): `dS = P ∘ (dP − rowsum(dP ∘ P))`.
fn softmax_rows_backward(p: &Mat, dp: &Mat) -> Mat {
    let mut ds = Mat::zeros(p.rows, p.cols);
    for r in 0..p.rows {
        let pr = p.row(r);
        let dpr = dp.row(r);
        let dot: f64 = pr.iter().zip(dpr).map(|(a, b)| a * b).sum();
        for c in 0..p.cols {
            ds.data[r * p.cols + c] = pr[c] * (dpr[c] - dot);
        }
    }
    ds
}

struct BlockCache {
    ln1: LnCache,
    /// LoRA hidden activations `h·Aᵀ` for Q and V.
    zq: Mat,
    zv: Mat,
    q: Mat,
    k: Mat,
    v: Mat,
    attn: Vec<Mat>,
    ctx: Mat,
    ln2: LnCache,
    u: Mat,
    g: Mat,
    /// Input to the block (pre-ln1 residual stream).
    x_in: Mat,
    /// After the attention residual.
    x_mid: Mat,
}

pub(crate) struct SampleCache {
    patches: Mat,
    blocks: Vec<BlockCache>,
    final_ln: LnCache,
    x_out: Mat,
    pub feat: Vec<f64>,
    pub logits: Vec<f64>,
}

/// Whether gradients cover only the adapter and head, or every parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainScope {
    LoraOnly,
    Full,
}

pub(crate) struct Engine {
    pub cfg: ViTConfig,
    pub backbone: BackboneF64,
    pub adapter: AdapterF64,
    pub use_lora: bool,
}

impl Engine {
    pub fn new(cfg: &ViTConfig, weights: &ViTWeights, adapter: &LoraAdapter, use_lora: bool) -> Self {
        Engine {
            cfg: *cfg,
            backbone: BackboneF64::from_weights(weights),
            adapter: AdapterF64::from_adapter(adapter),
            use_lora,
        }
    }

    /// Patch extraction identical to the f32 path, in f64.
    fn patchify(&self, image: &Tensor) -> Mat {
        let cfg = &self.cfg;
        let p = cfg.patch_size;
        let per_side = cfg.image_size / p;
        let hw = cfg.image_size * cfg.image_size;
        let img = image.data();
        let mut out = Mat::zeros(cfg.num_patches(), cfg.patch_dim());
        let mut idx = 0;
        for pr in 0..per_side {
            for pc in 0..per_side {
                for c in 0..cfg.channels {
                    for y in 0..p {
                        let row = pr * p + y;
                        let base = c * hw + row * cfg.image_size + pc * p;
                        for x in 0..p {
                            out.data[idx] = f64::from(img[base + x]);
                            idx += 1;
                        }
                    }
                }
            }
        }
        out
    }

    pub fn forward(&self, image: &Tensor) -> SampleCache {
        let cfg = &self.cfg;
        let t = cfg.seq_len();
        let d = cfg.dim;
        let dh = cfg.head_dim();
        let alpha = 1.0 / (dh as f64).sqrt();

        let patches = self.patchify(image);
        let embedded = patches.matmul_nt(&self.backbone.patch_embed);
        let mut x = Mat::zeros(t, d);
        x.row_mut(0).copy_from_slice(&self.backbone.cls);
        for i in 0..cfg.num_patches() {
            x.row_mut(1 + i).copy_from_slice(embedded.row(i));
        }
        x.add_assign(&self.backbone.pos_embed);

        let mut blocks = Vec::with_capacity(cfg.depth);
        for (layer, b) in self.backbone.blocks.iter().enumerate() {
            let x_in = x.clone();
            let ln1 = ln_forward(&x, &b.ln1_g, &b.ln1_b);
            let h = &ln1.y;

            let (zq, mut q) = self.project_with_lora(h, &b.wq, layer, true);
            q.add_row_vec(&b.bq);
            let mut k = h.matmul_nt(&b.wk);
            k.add_row_vec(&b.bk);
            let (zv, mut v) = self.project_with_lora(h, &b.wv, layer, false);
            v.add_row_vec(&b.bv);

            let mut ctx = Mat::zeros(t, d);
            let mut attn = Vec::with_capacity(cfg.heads);
            for head in 0..cfg.heads {
                let qh = q.col_block(head * dh, dh);
                let kh = k.col_block(head * dh, dh);
                let vh = v.col_block(head * dh, dh);
                let scores = qh.matmul_nt(&kh).scaled(alpha);
                let probs = softmax_rows(&scores);
                let ctx_h = probs.matmul(&vh);
                ctx.add_col_block(&ctx_h, head * dh);
                attn.push(probs);
            }
            let mut attn_out = ctx.matmul_nt(&b.wo);
            attn_out.add_row_vec(&b.bo);
            let mut x_mid = x_in.clone();
            x_mid.add_assign(&attn_out);

            let ln2 = ln_forward(&x_mid, &b.ln2_g, &b.ln2_b);
            let mut u = ln2.y.matmul_nt(&b.w1);
            u.add_row_vec(&b.b1);
            let mut g = u.clone();
            for v in &mut g.data {
                *v = gelu64(*v);
            }
            let mut mlp_out = g.matmul_nt(&b.w2);
            mlp_out.add_row_vec(&b.b2);
            let mut x_next = x_mid.clone();
            x_next.add_assign(&mlp_out);

            blocks.push(BlockCache {
                ln1,
                zq,
                zv,
                q,
                k,
                v,
                attn,
                ctx,
                ln2,
                u,
                g,
                x_in,
                x_mid,
            });
            x = x_next;
        }

        let final_ln = ln_forward(&x, &self.backbone.final_g, &self.backbone.final_b);
        let feat = final_ln.y.row(0).to_vec();

        let classes = self.adapter.head_b.len();
        let mut logits = self.adapter.head_b.clone();
        for (c, logit) in logits.iter_mut().enumerate().take(classes) {
            let wrow = self.adapter.head_w.row(c);
            *logit += wrow.iter().zip(&feat).map(|(w, f)| w * f).sum::<f64>();
        }

        SampleCache {
            patches,
            blocks,
            final_ln,
            x_out: x,
            feat,
            logits,
        }
    }

    /// `h·Wᵀ` plus, when enabled, the factored low-rank update. Returns the
    /// LoRA hidden activation `h·Aᵀ` for the backward pass.
    fn project_with_lora(&self, h: &Mat, w: &Mat, layer: usize, is_q: bool) -> (Mat, Mat) {
        let mut out = h.matmul_nt(w);
        if self.use_lora {
            let (a, bm) = if is_q {
                (&self.adapter.q[layer].0, &self.adapter.q[layer].1)
            } else {
                (&self.adapter.v[layer].0, &self.adapter.v[layer].1)
            };
            let z = h.matmul_nt(a);
            let update = z.matmul_nt(bm).scaled(self.adapter.scale);
            out.add_assign(&update);
            (z, out)
        } else {
            (Mat::zeros(h.rows, 0), out)
        }
    }

    /// Backward from d(logits) through the whole network. Adapter and head
    /// gradients always accumulate; backbone parameter gradients only when
    /// `scope` is `Full`.
    pub fn backward(
        &self,
        cache: &SampleCache,
        dlogits: &[f64],
        scope: TrainScope,
        g_backbone: &mut BackboneF64,
        g_adapter: &mut AdapterF64,
    ) {
        let cfg = &self.cfg;
        let d = cfg.dim;
        let t = cfg.seq_len();
        let dh = cfg.head_dim();
        let alpha = 1.0 / (dh as f64).sqrt();
        let full = scope == TrainScope::Full;

        // Head.
        let mut dfeat = vec![0.0; d];
        for (c, &dl) in dlogits.iter().enumerate() {
            g_adapter.head_b[c] += dl;
            let grow = g_adapter.head_w.row_mut(c);
            for i in 0..d {
                grow[i] += dl * cache.feat[i];
                dfeat[i] += dl * self.adapter.head_w.row(c)[i];
            }
        }

        // Final layernorm; only the CLS row receives gradient.
        let mut dy = Mat::zeros(t, d);
        dy.row_mut(0).copy_from_slice(&dfeat);
        let mut dx = ln_backward(
            &dy,
            &cache.final_ln,
            &self.backbone.final_g,
            full.then_some(&mut g_backbone.final_g),
            full.then_some(&mut g_backbone.final_b),
        );

        for (layer, (b, bc)) in self
            .backbone
            .blocks
            .iter()
            .zip(&cache.blocks)
            .enumerate()
            .rev()
        {
            let gb = &mut g_backbone.blocks[layer];

            // MLP branch: x_next = x_mid + gelu(ln2(x_mid)·w1ᵀ+b1)·w2ᵀ+b2.
            let d_mlp_out = dx.clone();
            let dg = d_mlp_out.matmul(&b.w2);
            if full {
                gb.w2.add_assign(&d_mlp_out.matmul_tn(&bc.g));
                for (g, v) in gb.b2.iter_mut().zip(d_mlp_out.col_sum()) {
                    *g += v;
                }
            }
            let mut du = dg;
            for (i, v) in du.data.iter_mut().enumerate() {
                *v *= gelu64_grad(bc.u.data[i]);
            }
            let dh2 = du.matmul(&b.w1);
            if full {
                gb.w1.add_assign(&du.matmul_tn(&bc.ln2.y));
                for (g, v) in gb.b1.iter_mut().zip(du.col_sum()) {
                    *g += v;
                }
            }
            let d_from_ln2 = ln_backward(
                &dh2,
                &bc.ln2,
                &b.ln2_g,
                full.then_some(&mut gb.ln2_g),
                full.then_some(&mut gb.ln2_b),
            );
            // dx now w.r.t. x_mid: residual skip plus the MLP branch.
            dx.add_assign(&d_from_ln2);

            // Attention branch: x_mid = x_in + ctx·woᵀ+bo.
            let d_attn_out = dx.clone();
            let d_ctx = d_attn_out.matmul(&b.wo);
            if full {
                gb.wo.add_assign(&d_attn_out.matmul_tn(&bc.ctx));
                for (g, v) in gb.bo.iter_mut().zip(d_attn_out.col_sum()) {
                    *g += v;
                }
            }
            let mut dq = Mat::zeros(t, d);
            let mut dk = Mat::zeros(t, d);
            let mut dv = Mat::zeros(t, d);
            for head in 0..cfg.heads {
                let d_ctx_h = d_ctx.col_block(head * dh, dh);
                let probs = &bc.attn[head];
                let qh = bc.q.col_block(head * dh, dh);
                let kh = bc.k.col_block(head * dh, dh);
                let vh = bc.v.col_block(head * dh, dh);
                let dp = d_ctx_h.matmul_nt(&vh);
                let dvh = probs.matmul_tn(&d_ctx_h);
                let ds = softmax_rows_backward(probs, &dp).scaled(alpha);
                let dqh = ds.matmul(&kh);
                let dkh = ds.matmul_tn(&qh);
                dq.add_col_block(&dqh, head * dh);
                dk.add_col_block(&dkh, head * dh);
                dv.add_col_block(&dvh, head * dh);
            }

            let h = &bc.ln1.y;
            let mut dhid = dq.matmul(&b.wq);
            dhid.add_assign(&dk.matmul(&b.wk));
            dhid.add_assign(&dv.matmul(&b.wv));
            if full {
                gb.wq.add_assign(&dq.matmul_tn(h));
                gb.wk.add_assign(&dk.matmul_tn(h));
                gb.wv.add_assign(&dv.matmul_tn(h));
                for (g, v) in gb.bq.iter_mut().zip(dq.col_sum()) {
                    *g += v;
                }
                for (g, v) in gb.bk.iter_mut().zip(dk.col_sum()) {
                    *g += v;
                }
                for (g, v) in gb.bv.iter_mut().zip(dv.col_sum()) {
                    *g += v;
                }
            }
            if self.use_lora {
                let s = self.adapter.scale;
                // Q update path: q += s·(h·Aᵀ)·Bᵀ.
                let (aq, bq) = (&self.adapter.q[layer].0, &self.adapter.q[layer].1);
                g_adapter.q[layer].1.add_assign(&dq.matmul_tn(&bc.zq).scaled(s));
                let dzq = dq.matmul(bq).scaled(s);
                g_adapter.q[layer].0.add_assign(&dzq.matmul_tn(h));
                dhid.add_assign(&dzq.matmul(aq));
                // V update path.
                let (av, bv) = (&self.adapter.v[layer].0, &self.adapter.v[layer].1);
                g_adapter.v[layer].1.add_assign(&dv.matmul_tn(&bc.zv).scaled(s));
                let dzv = dv.matmul(bv).scaled(s);
                g_adapter.v[layer].0.add_assign(&dzv.matmul_tn(h));
                dhid.add_assign(&dzv.matmul(av));
            }

            let d_from_ln1 = ln_backward(
                &dhid,
                &bc.ln1,
                &b.ln1_g,
                full.then_some(&mut gb.ln1_g),
                full.then_some(&mut gb.ln1_b),
            );
            dx.add_assign(&d_from_ln1);
        }

        if full {
            // Token assembly: tokens = [cls; patches·peᵀ] + pos.
            g_backbone.pos_embed.add_assign(&dx);
            for (g, v) in g_backbone.cls.iter_mut().zip(dx.row(0)) {
                *g += v;
            }
            let mut d_embedded = Mat::zeros(cfg.num_patches(), d);
            for i in 0..cfg.num_patches() {
                d_embedded.row_mut(i).copy_from_slice(dx.row(1 + i));
            }
            g_backbone
                .patch_embed
                .add_assign(&d_embedded.matmul_tn(&cache.patches));
        }
    }
}
