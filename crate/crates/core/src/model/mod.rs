//! ViT, BvT, Swin-style and Bwin models.

mod checkpoint;
mod config;

pub use checkpoint::{load_pretrained, Checkpoint, LoadReport, CHECKPOINT_MAGIC};
pub use config::{Family, ModelConfig, StageLayout};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::attention::{AttentionConfig, AttentionRecord, AttentionScope, MultiHeadAttention, WindowSpec};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, Mlp, Norm, ParamRole, ParamStore, Projection};
use crate::tensor::Tensor;

const EMBED_STD: f64 = 0.02;

/// `[r, g, b] → [r, g, b, 1−r, 1−g, 1−b]` along the channel axis of a
/// `[3, H, W]` or `[B, 3, H, W]` image.
///
/// With `strict`, values outside `[0, 1]` are an error; otherwise they are
/// clamped first.
pub fn encode_six_channel(image: &Tensor, strict: bool) -> Result<Tensor> {
    let shape = image.shape();
    let axis = match shape.len() {
        3 => 0,
        4 => 1,
        _ => return Err(Error::dim(format!("expected [3,H,W] or [B,3,H,W], got {shape:?}"))),
    };
    if shape[axis] != 3 {
        return Err(Error::dim(format!("expected 3 channels, got {}", shape[axis])));
    }
    if strict {
        if let Some(v) = image.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Validation(format!("pixel value {v} outside [0, 1]")));
        }
    }
    let plane: usize = shape[axis + 1..].iter().product();
    let batch = if axis == 1 { shape[0] } else { 1 };
    let mut out = Vec::with_capacity(image.len() * 2);
    for b in 0..batch {
        let src = &image.data()[b * 3 * plane..(b + 1) * 3 * plane];
        let clamped: Vec<f64> = src.iter().map(|v| v.clamp(0.0, 1.0)).collect();
        out.extend_from_slice(&clamped);
        out.extend(clamped.iter().map(|v| 1.0 - v));
    }
    let mut new_shape = shape.to_vec();
    new_shape[axis] = 6;
    Tensor::new(new_shape, out)
}

#[derive(Debug, Clone)]
struct Block {
    norm1: Norm,
    attn: MultiHeadAttention,
    norm2: Norm,
    mlp: Mlp,
}

impl Block {
    fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: &ModelConfig,
        dim: usize,
        heads: usize,
        window: Option<WindowSpec>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let kind = cfg.projection();
        let shift = cfg.has_bias();
        let attn_cfg = AttentionConfig {
            dim,
            heads,
            projection: kind,
            window,
        };
        Ok(Self {
            norm1: Norm::new(store, &format!("{name}.norm1"), dim, shift)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), attn_cfg, rng)?,
            norm2: Norm::new(store, &format!("{name}.norm2"), dim, shift)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, cfg.mlp_ratio * dim, kind, rng)?,
        })
    }

    fn forward(&self, b: &Bound<'_>, x: Var, grid: (usize, usize)) -> Result<(Var, Var)> {
        let tape = b.tape();
        let h = self.norm1.forward(b, x)?;
        let a = self.attn.forward_grid(b, h, grid)?;
        let x = tape.add(x, a.out)?;
        let h = self.norm2.forward(b, x)?;
        let x = tape.add(x, self.mlp.forward(b, h)?)?;
        Ok((x, a.probs))
    }
}

#[derive(Debug, Clone)]
struct Merge {
    norm: Norm,
    reduce: Projection,
}

#[derive(Debug, Clone)]
struct Stage {
    merge: Option<Merge>,
    blocks: Vec<Block>,
    grid: usize,
}

/// What a forward pass should keep besides the logits.
#[derive(Debug, Clone, Copy, Default)]
pub struct TraceOptions {
    /// Also keep attention of windowed layers.
    pub windows: bool,
}

/// Handles to the interesting values of one forward pass on a tape.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub input: Var,
    pub logits: Var,
    pub block_inputs: Vec<Var>,
    pub block_outputs: Vec<Var>,
    pub block_grids: Vec<(usize, usize)>,
    pub attention: Vec<(usize, AttentionScope, Var)>,
    pub has_cls: bool,
}

/// Everything recorded during a forward pass, detached from the tape.
///
/// Gradients are filled in when the trace is taken after a backward sweep.
#[derive(Debug, Clone)]
pub struct ExecutionTrace {
    pub family: Family,
    pub has_cls: bool,
    pub records: Vec<AttentionRecord>,
    pub block_inputs: Vec<Tensor>,
    pub block_input_grads: Vec<Option<Tensor>>,
    pub block_outputs: Vec<Tensor>,
    pub block_grids: Vec<(usize, usize)>,
    pub logits: Tensor,
}

impl ExecutionTrace {
    pub fn depth(&self) -> usize {
        self.block_inputs.len()
    }

    pub fn global_records(&self) -> impl Iterator<Item = &AttentionRecord> {
        self.records.iter().filter(|r| r.scope == AttentionScope::Global)
    }

    /// Patch grid seen by block `layer`.
    pub fn grid(&self, layer: usize) -> (usize, usize) {
        self.block_grids[layer]
    }
}

impl ForwardPass {
    pub fn trace(&self, tape: &Tape, family: Family) -> Result<ExecutionTrace> {
        let grad = |v: Var| -> Result<Option<Tensor>> {
            if tape.has_grads() {
                tape.grad(v)
            } else {
                Ok(None)
            }
        };
        let records = self
            .attention
            .iter()
            .map(|&(layer, scope, v)| {
                Ok(AttentionRecord {
                    layer,
                    scope,
                    probs: tape.value(v)?,
                    grad: grad(v)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ExecutionTrace {
            family,
            has_cls: self.has_cls,
            records,
            block_inputs: self
                .block_inputs
                .iter()
                .map(|&v| tape.value(v))
                .collect::<Result<_>>()?,
            block_input_grads: self.block_inputs.iter().map(|&v| grad(v)).collect::<Result<_>>()?,
            block_outputs: self
                .block_outputs
                .iter()
                .map(|&v| tape.value(v))
                .collect::<Result<_>>()?,
            block_grids: self.block_grids.clone(),
            logits: tape.value(self.logits)?,
        })
    }
}

/// A transformer classifier with its parameters.
#[derive(Debug, Clone)]
pub struct TransformerModel {
    cfg: ModelConfig,
    store: ParamStore,
    embed: Projection,
    cls: Option<crate::nn::ParamId>,
    pos: crate::nn::ParamId,
    stages: Vec<Stage>,
    norm: Norm,
    head: Projection,
}

impl TransformerModel {
    /// Builds a freshly initialized model; initialization depends only on
    /// `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let kind = cfg.projection();
        let bias = cfg.has_bias();
        let layouts = cfg.stage_layouts();
        let d0 = layouts[0].dim;
        let patch_in = cfg.in_channels * cfg.patch_size.pow(2);
        let embed = Projection::new(&mut store, "patch_embed", patch_in, d0, kind, bias, &mut rng)?;
        let cls = if cfg.has_cls() {
            Some(store.add(
                "cls_token",
                ParamRole::Embedding,
                Tensor::trunc_normal(vec![1, 1, d0], EMBED_STD, &mut rng),
            )?)
        } else {
            None
        };
        let pos = store.add(
            "pos_embed",
            ParamRole::Embedding,
            Tensor::trunc_normal(vec![1, cfg.tokens(), d0], EMBED_STD, &mut rng),
        )?;
        let mut stages = Vec::with_capacity(layouts.len());
        let last_stage = layouts.len() - 1;
        for (s, st) in layouts.iter().enumerate() {
            let merge = if s > 0 {
                let prev = layouts[s - 1].dim;
                Some(Merge {
                    norm: Norm::new(&mut store, &format!("stages.{s}.merge.norm"), 4 * prev, bias)?,
                    reduce: Projection::new(
                        &mut store,
                        &format!("stages.{s}.merge.reduce"),
                        4 * prev,
                        st.dim,
                        kind,
                        false,
                        &mut rng,
                    )?,
                })
            } else {
                None
            };
            let mut blocks = Vec::with_capacity(st.depth);
            for i in 0..st.depth {
                let windowed = cfg.family.is_windowed();
                let replace = cfg.modified_last_block && s == last_stage && i + 1 == st.depth;
                let (name, window) = if !windowed {
                    (format!("blocks.{i}"), None)
                } else if replace {
                    (format!("stages.{s}.global_block"), None)
                } else {
                    let shift = if i % 2 == 1 && st.grid > cfg.window_size {
                        cfg.window_size / 2
                    } else {
                        0
                    };
                    (
                        format!("stages.{s}.blocks.{i}"),
                        Some(WindowSpec {
                            size: cfg.window_size,
                            shift,
                        }),
                    )
                };
                blocks.push(Block::new(&mut store, &name, &cfg, st.dim, st.heads, window, &mut rng)?);
            }
            stages.push(Stage {
                merge,
                blocks,
                grid: st.grid,
            });
        }
        let d = cfg.final_dim();
        let norm = Norm::new(&mut store, "norm", d, bias)?;
        let head = Projection::new(&mut store, "head", d, cfg.num_classes, kind, bias, &mut rng)?;
        Ok(Self {
            cfg,
            store,
            embed,
            cls,
            pos,
            stages,
            norm,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Exact number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.store.scalar_count()
    }

    /// Applies the family's input encoding to a `[B, 3, H, W]` batch in
    /// `[0, 1]`.
    pub fn prepare_input(&self, rgb: &Tensor) -> Result<Tensor> {
        if self.cfg.in_channels == 6 {
            encode_six_channel(rgb, false)
        } else {
            Ok(rgb.clone())
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let c = &self.cfg;
        if shape.len() != 4 || shape[1] != c.in_channels || shape[2] != c.image_size || shape[3] != c.image_size {
            return Err(Error::dim(format!(
                "model expects [B, {}, {}, {}] input, got {shape:?}",
                c.in_channels, c.image_size, c.image_size
            )));
        }
        Ok(())
    }

    /// Records a forward pass of an already encoded `[B, C, H, W]` batch.
    pub fn forward_on(&self, b: &Bound<'_>, images: Var, opts: TraceOptions) -> Result<ForwardPass> {
        let tape = b.tape();
        let shape = tape.shape(images)?;
        self.check_input(&shape)?;
        let (batch, c, p) = (shape[0], shape[1], self.cfg.patch_size);
        let g = self.cfg.patch_grid();
        let t = tape.reshape(images, &[batch, c, g, p, g, p])?;
        let t = tape.permute(t, &[0, 2, 4, 1, 3, 5])?;
        let t = tape.reshape(t, &[batch, g * g, c * p * p])?;
        let mut x = self.embed.forward(b, t)?;
        if let Some(cls) = self.cls {
            let d = self.cfg.dim;
            let cls = tape.broadcast_to(b.var(cls), &[batch, 1, d])?;
            x = tape.concat(&[cls, x], 1)?;
        }
        x = tape.add(x, b.var(self.pos))?;

        let mut pass = ForwardPass {
            input: images,
            logits: x,
            block_inputs: Vec::new(),
            block_outputs: Vec::new(),
            block_grids: Vec::new(),
            attention: Vec::new(),
            has_cls: self.cls.is_some(),
        };
        let mut layer = 0;
        for stage in &self.stages {
            if let Some(m) = &stage.merge {
                x = self.merge(b, m, x, batch, stage.grid * 2)?;
            }
            for block in &stage.blocks {
                pass.block_inputs.push(x);
                pass.block_grids.push((stage.grid, stage.grid));
                let (out, probs) = block.forward(b, x, (stage.grid, stage.grid))?;
                let scope = match block.attn.config().window {
                    None => AttentionScope::Global,
                    Some(w) => AttentionScope::Window {
                        size: w.size,
                        shift: w.shift,
                        windows: (stage.grid / w.size).pow(2),
                    },
                };
                if scope == AttentionScope::Global || opts.windows {
                    pass.attention.push((layer, scope, probs));
                }
                pass.block_outputs.push(out);
                x = out;
                layer += 1;
            }
        }
        let x = self.norm.forward(b, x)?;
        let d = self.cfg.final_dim();
        let pooled = if self.cls.is_some() {
            tape.reshape(tape.slice(x, 1, 0, 1)?, &[batch, d])?
        } else {
            tape.reshape(tape.mean_axis(x, 1)?, &[batch, d])?
        };
        pass.logits = self.head.forward(b, pooled)?;
        Ok(pass)
    }

    fn merge(&self, b: &Bound<'_>, m: &Merge, x: Var, batch: usize, grid: usize) -> Result<Var> {
        let tape = b.tape();
        let d = *tape.shape(x)?.last().unwrap_or(&0);
        let h = grid / 2;
        let t = tape.reshape(x, &[batch, h, 2, h, 2, d])?;
        let t = tape.permute(t, &[0, 1, 3, 4, 2, 5])?;
        let t = tape.reshape(t, &[batch, h * h, 4 * d])?;
        let t = m.norm.forward(b, t)?;
        m.reduce.forward(b, t)
    }

    /// Logits and trace for an encoded batch.
    pub fn forward(&self, images: &Tensor) -> Result<(Tensor, ExecutionTrace)> {
        self.check_input(images.shape())?;
        let tape = Tape::new();
        let b = self.store.bind(&tape);
        let x = tape.input(images.clone());
        let pass = self.forward_on(&b, x, TraceOptions::default())?;
        let trace = pass.trace(&tape, self.cfg.family)?;
        Ok((trace.logits.clone(), trace))
    }

    /// Forward pass followed by a backward sweep from logit `classes[i]` of
    /// every sample `i`, so the trace carries attention and token
    /// gradients.
    pub fn forward_backward(&self, images: &Tensor, classes: &[usize]) -> Result<ExecutionTrace> {
        self.check_input(images.shape())?;
        let batch = images.shape()[0];
        if classes.len() != batch || classes.iter().any(|&c| c >= self.cfg.num_classes) {
            return Err(Error::Validation(format!(
                "need {batch} class indices below {}",
                self.cfg.num_classes
            )));
        }
        let tape = Tape::new();
        let b = self.store.bind(&tape);
        let x = tape.input(images.clone());
        let pass = self.forward_on(&b, x, TraceOptions::default())?;
        let k = self.cfg.num_classes;
        let mut seed = vec![0.0; batch * k];
        for (i, &c) in classes.iter().enumerate() {
            seed[i * k + c] = 1.0;
        }
        tape.backward_with_seed(pass.logits, seed)?;
        pass.trace(&tape, self.cfg.family)
    }

    /// Logits only, evaluated in parallel chunks of `chunk` samples.
    pub fn logits(&self, images: &Tensor, chunk: usize) -> Result<Tensor> {
        self.check_input(images.shape())?;
        let batch = images.shape()[0];
        let per = images.len() / batch;
        let chunk = chunk.max(1);
        let starts: Vec<usize> = (0..batch).step_by(chunk).collect();
        let parts = starts
            .par_iter()
            .map(|&s| {
                let n = chunk.min(batch - s);
                let mut shape = images.shape().to_vec();
                shape[0] = n;
                let part = Tensor::new(shape, images.data()[s * per..(s + n) * per].to_vec())?;
                let tape = Tape::new();
                let b = self.store.bind(&tape);
                let x = tape.constant(part);
                let pass = self.forward_on(&b, x, TraceOptions::default())?;
                Ok(tape.value(pass.logits)?.into_data())
            })
            .collect::<Result<Vec<_>>>()?;
        Tensor::new(vec![batch, self.cfg.num_classes], parts.concat())
    }

    /// Re-draws the classifier head, keeping every other parameter.
    pub fn reinitialize_head<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        for p in self.store.iter_mut().filter(|p| p.name.starts_with("head.")) {
            let shape = p.value.shape().to_vec();
            p.value = match p.role {
                ParamRole::Bias => Tensor::zeros(shape),
                _ => Tensor::trunc_normal(shape, EMBED_STD, rng),
            }
            .with_requires_grad();
        }
    }
}

#[cfg(test)]
mod tests;
