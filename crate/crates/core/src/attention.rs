//! Scaled dot-product, multi-head and shifted-window attention.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, ParamStore, Projection, ProjectionKind};
use crate::tensor::Tensor;

/// Logit offset for token pairs that may not attend to each other.
pub const MASK_VALUE: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub size: usize,
    pub shift: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub dim: usize,
    pub heads: usize,
    pub projection: ProjectionKind,
    pub window: Option<WindowSpec>,
}

impl AttentionConfig {
    pub fn global(dim: usize, heads: usize, projection: ProjectionKind) -> Self {
        Self {
            dim,
            heads,
            projection,
            window: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 {
            return Err(Error::Config("attention needs positive dim and heads".into()));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if let Some(w) = self.window {
            if w.size == 0 || w.shift >= w.size {
                return Err(Error::Config(format!(
                    "window shift {} must lie in [0, {})",
                    w.shift, w.size
                )));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn scale(&self) -> f64 {
        1.0 / (self.head_dim() as f64).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttentionScope {
    Global,
    Window { size: usize, shift: usize, windows: usize },
}

/// Attention probabilities of one layer, `[batch, heads, n, n]` for global
/// layers and `[batch · windows, heads, w², w²]` for windowed ones.
#[derive(Debug, Clone)]
pub struct AttentionRecord {
    pub layer: usize,
    pub scope: AttentionScope,
    pub probs: Tensor,
    pub grad: Option<Tensor>,
}

impl AttentionRecord {
    pub fn heads(&self) -> usize {
        self.probs.shape()[1]
    }

    pub fn tokens(&self) -> usize {
        self.probs.shape()[2]
    }

    /// `[heads, n, n]` slice for batch entry `b`.
    pub fn sample(&self, b: usize) -> Tensor {
        self.probs.index_first(b)
    }

    pub fn sample_grad(&self, b: usize) -> Option<Tensor> {
        self.grad.as_ref().map(|g| g.index_first(b))
    }
}

/// Output of an attention call: merged tokens plus the probability tensor.
#[derive(Debug, Clone, Copy)]
pub struct Attended {
    pub out: Var,
    pub probs: Var,
}

/// `softmax(scale · Q Kᵀ) V` over the last two axes of `[.., n, dₕ]`
/// operands. Returns the output and the attention matrix.
pub fn scaled_dot_product_attention(tape: &Tape, q: Var, k: Var, v: Var, scale: f64) -> Result<(Var, Var)> {
    let a = attend(tape, q, k, v, scale, None)?;
    Ok((a.out, a.probs))
}

fn attend(tape: &Tape, q: Var, k: Var, v: Var, scale: f64, mask: Option<(Var, usize)>) -> Result<Attended> {
    let (sq, sk, sv) = (tape.shape(q)?, tape.shape(k)?, tape.shape(v)?);
    if sq.len() < 2 || sq != sk || sq != sv {
        return Err(Error::dim(format!(
            "attention operands must share shape [.., n, d]: {sq:?}, {sk:?}, {sv:?}"
        )));
    }
    let rank = sq.len();
    let logits = tape.scale(tape.matmul_t(q, k)?, scale)?;
    let logits = match mask {
        None => logits,
        Some((m, windows)) => {
            let shape = tape.shape(logits)?;
            let mut split = vec![shape[0] / windows, windows];
            split.extend_from_slice(&shape[1..]);
            let masked = tape.add(tape.reshape(logits, &split)?, m)?;
            tape.reshape(masked, &shape)?
        }
    };
    let probs = tape.softmax(logits, rank - 1)?;
    let out = tape.matmul(probs, v)?;
    Ok(Attended { out, probs })
}

/// Multi-head self-attention with a fused Q/K/V projection and an output
/// merge projection.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    cfg: AttentionConfig,
    qkv: Projection,
    proj: Projection,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: AttentionConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let bias = cfg.projection == ProjectionKind::Linear;
        let d = cfg.dim;
        Ok(Self {
            cfg,
            qkv: Projection::new(store, &format!("{name}.qkv"), d, 3 * d, cfg.projection, bias, rng)?,
            proj: Projection::new(store, &format!("{name}.proj"), d, d, cfg.projection, bias, rng)?,
        })
    }

    pub fn param_count(dim: usize, kind: ProjectionKind) -> usize {
        let bias = kind == ProjectionKind::Linear;
        Projection::param_count(dim, 3 * dim, kind, bias) + Projection::param_count(dim, dim, kind, bias)
    }

    pub fn config(&self) -> &AttentionConfig {
        &self.cfg
    }

    /// Global attention over `[batch, n, d]` tokens.
    pub fn forward(&self, b: &Bound<'_>, x: Var) -> Result<Attended> {
        self.attend_groups(b, x, None)
    }

    /// Attention over `[batch, H·W, d]` tokens laid out on an `H × W` grid.
    /// Uses windows when the config has them, global attention otherwise.
    pub fn forward_grid(&self, b: &Bound<'_>, x: Var, grid: (usize, usize)) -> Result<Attended> {
        let Some(win) = self.cfg.window else {
            return self.forward(b, x);
        };
        let tape = b.tape();
        let shape = tape.shape(x)?;
        let (gh, gw) = grid;
        let d = self.cfg.dim;
        if shape.len() != 3 || shape[1] != gh * gw || shape[2] != d {
            return Err(Error::dim(format!("grid {gh}x{gw} with dim {d} for tokens {shape:?}")));
        }
        if gh % win.size != 0 || gw % win.size != 0 {
            return Err(Error::Config(format!(
                "grid {gh}x{gw} is not divisible by window {}",
                win.size
            )));
        }
        let batch = shape[0];
        let s = win.shift as isize;
        let mut t = tape.reshape(x, &[batch, gh, gw, d])?;
        if s > 0 {
            t = tape.roll(tape.roll(t, 1, -s)?, 2, -s)?;
        }
        let windows = partition(tape, t, win.size)?;
        let mask = if s > 0 {
            Some((
                tape.constant(shift_mask(gh, gw, win.size, win.shift)?),
                (gh / win.size) * (gw / win.size),
            ))
        } else {
            None
        };
        let a = self.attend_groups(b, windows, mask)?;
        let mut t = merge(tape, a.out, batch, gh, gw, win.size)?;
        if s > 0 {
            t = tape.roll(tape.roll(t, 1, s)?, 2, s)?;
        }
        Ok(Attended {
            out: tape.reshape(t, &[batch, gh * gw, d])?,
            probs: a.probs,
        })
    }

    fn attend_groups(&self, b: &Bound<'_>, x: Var, mask: Option<(Var, usize)>) -> Result<Attended> {
        let tape = b.tape();
        let shape = tape.shape(x)?;
        if shape.len() != 3 || shape[2] != self.cfg.dim {
            return Err(Error::dim(format!(
                "attention expects [batch, n, {}], got {shape:?}",
                self.cfg.dim
            )));
        }
        let (m, n, d) = (shape[0], shape[1], shape[2]);
        let (h, dh) = (self.cfg.heads, self.cfg.head_dim());
        let qkv = self.qkv.forward(b, x)?;
        let qkv = tape.reshape(qkv, &[m, n, 3, h, dh])?;
        let qkv = tape.permute(qkv, &[2, 0, 3, 1, 4])?;
        let part = |i| -> Result<Var> { tape.reshape(tape.slice(qkv, 0, i, 1)?, &[m, h, n, dh]) };
        let (q, k, v) = (part(0)?, part(1)?, part(2)?);
        let a = attend(tape, q, k, v, self.cfg.scale(), mask)?;
        let merged = tape.reshape(tape.permute(a.out, &[0, 2, 1, 3])?, &[m, n, d])?;
        Ok(Attended {
            out: self.proj.forward(b, merged)?,
            probs: a.probs,
        })
    }
}

/// `[B, H, W, d]` → `[B · windows, w², d]`, windows in row-major order.
fn partition(tape: &Tape, x: Var, w: usize) -> Result<Var> {
    let s = tape.shape(x)?;
    let (b, gh, gw, d) = (s[0], s[1], s[2], s[3]);
    let t = tape.reshape(x, &[b, gh / w, w, gw / w, w, d])?;
    let t = tape.permute(t, &[0, 1, 3, 2, 4, 5])?;
    tape.reshape(t, &[b * (gh / w) * (gw / w), w * w, d])
}

fn merge(tape: &Tape, x: Var, b: usize, gh: usize, gw: usize, w: usize) -> Result<Var> {
    let d = *tape.shape(x)?.last().unwrap_or(&0);
    let t = tape.reshape(x, &[b, gh / w, gw / w, w, w, d])?;
    let t = tape.permute(t, &[0, 1, 3, 2, 4, 5])?;
    tape.reshape(t, &[b, gh, gw, d])
}

/// Additive mask `[windows, 1, w², w²]` for a grid that was cyclically
/// shifted by `shift`: tokens that were not neighbours before the shift get
/// [`MASK_VALUE`].
pub fn shift_mask(gh: usize, gw: usize, window: usize, shift: usize) -> Result<Tensor> {
    if window == 0 || !gh.is_multiple_of(window) || !gw.is_multiple_of(window) || shift >= window {
        return Err(Error::Config(format!(
            "window {window} with shift {shift} on a {gh}x{gw} grid"
        )));
    }
    let region = |i: usize, len: usize| {
        if i < len - window {
            0
        } else if i < len - shift {
            1
        } else {
            2
        }
    };
    let (nh, nw) = (gh / window, gw / window);
    let n = window * window;
    let mut data = Vec::with_capacity(nh * nw * n * n);
    for wr in 0..nh {
        for wc in 0..nw {
            let labels: Vec<usize> = (0..n)
                .map(|t| {
                    let (r, c) = (wr * window + t / window, wc * window + t % window);
                    region(r, gh) * 3 + region(c, gw)
                })
                .collect();
            for i in 0..n {
                for j in 0..n {
                    data.push(if labels[i] == labels[j] { 0.0 } else { MASK_VALUE });
                }
            }
        }
    }
    Tensor::new(vec![nh * nw, 1, n, n], data)
}
