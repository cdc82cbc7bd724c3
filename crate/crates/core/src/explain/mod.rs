//! Post-hoc explanations of a classification from an [`ExecutionTrace`].
//!
//! Every method yields a [`SaliencyMap`] over the patch grid. Maps are
//! rectified and scaled so that their maximum is 1; maps with no positive
//! mass are flagged as degenerate and left at zero.

mod render;

pub use render::{localization_score, render_saliency, Sidecar, Upsample};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::RelevanceOptions;
use crate::error::{Error, Result};
use crate::model::{ExecutionTrace, TraceOptions, TransformerModel};
use crate::tensor::Tensor;
use crate::Tape;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    AttnLast,
    Rollout,
    GradCam,
    Lrp,
    LrpSecond,
    LrpLast,
    #[serde(rename = "ta")]
    TransformerAttribution,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::AttnLast,
        Method::Rollout,
        Method::GradCam,
        Method::Lrp,
        Method::LrpSecond,
        Method::LrpLast,
        Method::TransformerAttribution,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::AttnLast => "attn-last",
            Method::Rollout => "rollout",
            Method::GradCam => "grad-cam",
            Method::Lrp => "lrp",
            Method::LrpSecond => "lrp-second",
            Method::LrpLast => "lrp-last",
            Method::TransformerAttribution => "ta",
        }
    }

    /// Whether the method reads global attention matrices.
    pub fn needs_global_attention(self) -> bool {
        matches!(
            self,
            Method::AttnLast | Method::Rollout | Method::TransformerAttribution
        )
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown explanation method {s:?}")))
    }
}

/// Relevance over the patch grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub method: Method,
    pub class: usize,
    pub layer: Option<usize>,
    /// Scores before rectification and scaling, `[gh, gw]`.
    pub raw: Tensor,
    /// Rectified scores scaled to a maximum of 1, `[gh, gw]`.
    pub grid: Tensor,
    /// No positive mass: `grid` is all zero and was not rescaled.
    pub degenerate: bool,
}

impl SaliencyMap {
    pub fn from_raw(
        method: Method,
        class: usize,
        layer: Option<usize>,
        raw: Vec<f64>,
        grid: (usize, usize),
    ) -> Result<Self> {
        let raw = Tensor::new(vec![grid.0, grid.1], raw)?;
        if raw.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("{method} produced non-finite scores")));
        }
        let rect = raw.map(|v| v.max(0.0));
        let max = rect.data().iter().copied().fold(0.0, f64::max);
        let degenerate = max <= 0.0;
        let grid = if degenerate { rect } else { rect.map(|v| v / max) };
        Ok(Self {
            method,
            class,
            layer,
            raw,
            grid,
            degenerate,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.grid.shape()[0], self.grid.shape()[1])
    }
}

/// Row-major `n × n` matrix helpers over flat slices.
fn identity(n: usize) -> Vec<f64> {
    Tensor::eye(n).into_data()
}

fn matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let a = Tensor::from_parts(vec![n, n], a.to_vec());
    let b = Tensor::from_parts(vec![n, n], b.to_vec());
    a.matmul(&b).expect("square operands").into_data()
}

/// Mean over heads of a `[h, n, n]` tensor.
pub fn head_mean(a: &Tensor) -> Tensor {
    let (h, n) = (a.shape()[0], a.shape()[1]);
    let mut out = vec![0.0; n * n];
    for head in a.data().chunks(n * n) {
        out.iter_mut().zip(head).for_each(|(o, v)| *o += v / h as f64);
    }
    Tensor::from_parts(vec![n, n], out)
}

/// Reads the `[cls]` row restricted to patch columns, or, without `[cls]`,
/// the mean over all query rows.
pub fn patch_scores(m: &Tensor, has_cls: bool) -> Vec<f64> {
    let row = query_row(m, has_cls);
    row[usize::from(has_cls)..].to_vec()
}

fn query_row(m: &Tensor, has_cls: bool) -> Vec<f64> {
    let n = m.shape()[0];
    if has_cls {
        m.row(0).to_vec()
    } else {
        (0..n)
            .map(|j| (0..n).map(|i| m.at(&[i, j])).sum::<f64>() / n as f64)
            .collect()
    }
}

fn last_global(trace: &ExecutionTrace) -> Result<&crate::attention::AttentionRecord> {
    trace.global_records().last().ok_or_else(no_global_attention)
}

fn no_global_attention() -> Error {
    Error::Validation("trace has no global attention layer; windowed models need modified_last_block = true".into())
}

fn patch_grid(trace: &ExecutionTrace, layer: usize) -> (usize, usize) {
    trace.grid(layer)
}

/// Head-averaged attention of the last global layer.
pub fn attention_last(trace: &ExecutionTrace, sample: usize, class: usize) -> Result<SaliencyMap> {
    let rec = last_global(trace)?;
    let m = head_mean(&rec.sample(sample));
    let scores = patch_scores(&m, trace.has_cls);
    SaliencyMap::from_raw(
        Method::AttnLast,
        class,
        Some(rec.layer),
        scores,
        patch_grid(trace, rec.layer),
    )
}

/// `Â_L ⋯ Â_1` with `Â = rownorm(½·Ā + ½·I)` for head-averaged `Ā`.
pub fn rollout_matrix(head_means: &[Tensor]) -> Result<Tensor> {
    let n = head_means.first().ok_or_else(no_global_attention)?.shape()[0];
    let mut r = identity(n);
    for a in head_means {
        if a.shape() != [n, n] {
            return Err(Error::dim("rollout needs equally sized attention matrices"));
        }
        let mut hat = a.data().iter().map(|v| 0.5 * v).collect::<Vec<_>>();
        for i in 0..n {
            hat[i * n + i] += 0.5;
        }
        for row in hat.chunks_mut(n) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        r = matmul(&hat, &r, n);
    }
    Ok(Tensor::from_parts(vec![n, n], r))
}

pub fn rollout(trace: &ExecutionTrace, sample: usize, class: usize) -> Result<SaliencyMap> {
    let recs: Vec<_> = trace.global_records().collect();
    let last = recs.last().ok_or_else(no_global_attention)?.layer;
    let means: Vec<Tensor> = recs.iter().map(|r| head_mean(&r.sample(sample))).collect();
    let r = rollout_matrix(&means)?;
    SaliencyMap::from_raw(
        Method::Rollout,
        class,
        Some(last),
        patch_scores(&r, trace.has_cls),
        patch_grid(trace, last),
    )
}

/// `Σ_k α_k·T[:, k]` with `α_k` the token mean of `G[:, k]`, for `[n, d]`
/// activations and gradients.
pub fn grad_cam_scores(t: &Tensor, g: &Tensor) -> Result<Vec<f64>> {
    if t.shape() != g.shape() || t.rank() != 2 {
        return Err(Error::dim(format!("Grad-CAM of {:?} and {:?}", t.shape(), g.shape())));
    }
    let (n, d) = (t.shape()[0], t.shape()[1]);
    let alpha: Vec<f64> = (0..d)
        .map(|k| (0..n).map(|i| g.at(&[i, k])).sum::<f64>() / n as f64)
        .collect();
    Ok((0..n).map(|i| (0..d).map(|k| alpha[k] * t.at(&[i, k])).sum()).collect())
}

/// Grad-CAM on the input tokens of block `layer`; the trace must come from
/// [`TransformerModel::forward_backward`] for `class`.
pub fn grad_cam(trace: &ExecutionTrace, sample: usize, class: usize, layer: usize) -> Result<SaliencyMap> {
    if layer >= trace.depth() {
        return Err(Error::Validation(format!(
            "layer {layer} out of range for depth {}",
            trace.depth()
        )));
    }
    let g = trace.block_input_grads[layer]
        .as_ref()
        .ok_or_else(|| Error::Missing("token gradients absent: run backward first".into()))?;
    let t = trace.block_inputs[layer].index_first(sample);
    let scores = grad_cam_scores(&t, &g.index_first(sample))?;
    let skip = usize::from(trace.has_cls);
    SaliencyMap::from_raw(
        Method::GradCam,
        class,
        Some(layer),
        scores[skip..].to_vec(),
        patch_grid(trace, layer),
    )
}

/// `R ← R + Ā·R` from `R = I` over the given per-layer `Ā`.
pub fn attribution_matrix(abars: &[Tensor]) -> Result<Tensor> {
    let n = abars.first().ok_or_else(no_global_attention)?.shape()[0];
    let mut r = identity(n);
    for a in abars {
        if a.shape() != [n, n] {
            return Err(Error::dim("attribution needs equally sized attention matrices"));
        }
        let ar = matmul(a.data(), &r, n);
        r.iter_mut().zip(ar).for_each(|(x, y)| *x += y);
    }
    Ok(Tensor::from_parts(vec![n, n], r))
}

/// Transformer attribution: per layer `Ā = mean_h relu(∂A ⊙ A)`.
pub fn transformer_attribution(trace: &ExecutionTrace, sample: usize, class: usize) -> Result<SaliencyMap> {
    let recs: Vec<_> = trace.global_records().collect();
    let last = recs.last().ok_or_else(no_global_attention)?.layer;
    let abars = recs
        .iter()
        .map(|r| {
            let g = r
                .sample_grad(sample)
                .ok_or_else(|| Error::Missing("attention gradients absent: run backward first".into()))?;
            let a = r.sample(sample);
            let prod = Tensor::from_parts(
                a.shape().to_vec(),
                a.data().iter().zip(g.data()).map(|(a, g)| (a * g).max(0.0)).collect(),
            );
            Ok(head_mean(&prod))
        })
        .collect::<Result<Vec<_>>>()?;
    let r = attribution_matrix(&abars)?;
    SaliencyMap::from_raw(
        Method::TransformerAttribution,
        class,
        Some(last),
        patch_scores(&r, trace.has_cls),
        patch_grid(trace, last),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    /// Input patches.
    All,
    /// Tokens entering the second block.
    Second,
    /// Tokens entering the last block.
    Last,
}

/// An ε-LRP map together with its relevance bookkeeping.
#[derive(Debug, Clone)]
pub struct LrpOutcome {
    pub map: SaliencyMap,
    pub logit: f64,
    /// Relevance reaching the input pixels.
    pub input_total: f64,
    /// Relevance absorbed by embeddings, biases and other parameter leaves.
    pub absorbed_total: f64,
}

impl LrpOutcome {
    /// `|input + absorbed − logit| / max(1, |logit|)`.
    pub fn conservation_error(&self) -> f64 {
        (self.input_total + self.absorbed_total - self.logit).abs() / self.logit.abs().max(1.0)
    }
}

/// ε-LRP from logit `class` of a single encoded image `[1, C, H, W]`.
pub fn lrp_epsilon(
    model: &TransformerModel,
    image: &Tensor,
    class: usize,
    readout: Readout,
    eps: f64,
) -> Result<LrpOutcome> {
    let cfg = model.config();
    if image.shape().first() != Some(&1) {
        return Err(Error::dim("LRP explains one image at a time"));
    }
    if class >= cfg.num_classes {
        return Err(Error::Validation(format!("class {class} out of range")));
    }
    let tape = Tape::new();
    let b = model.params().bind(&tape);
    let x = tape.input(image.clone());
    let pass = model.forward_on(&b, x, TraceOptions::default())?;
    let logits = tape.value(pass.logits)?;
    let mut seed = vec![0.0; cfg.num_classes];
    seed[class] = logits.data()[class];
    let rel = tape.relevance(pass.logits, seed, RelevanceOptions { eps })?;

    let (method, layer) = match readout {
        Readout::All => (Method::Lrp, None),
        Readout::Second if pass.block_inputs.len() < 2 => {
            return Err(Error::Validation("second-layer readout needs depth ≥ 2".into()))
        }
        Readout::Second => (Method::LrpSecond, Some(1)),
        Readout::Last => (Method::LrpLast, Some(pass.block_inputs.len() - 1)),
    };
    let zeros = |v| -> Result<Tensor> { Ok(Tensor::zeros(tape.shape(v)?)) };
    let (scores, grid) = match layer {
        None => {
            let r = match rel.get(pass.input) {
                Some(r) => r,
                None => zeros(pass.input)?,
            };
            let (c, p, g) = (cfg.in_channels, cfg.patch_size, cfg.patch_grid());
            let side = cfg.image_size;
            let mut scores = vec![0.0; g * g];
            for ch in 0..c {
                for y in 0..side {
                    for xx in 0..side {
                        scores[(y / p) * g + xx / p] += r.at(&[0, ch, y, xx]);
                    }
                }
            }
            (scores, (g, g))
        }
        Some(l) => {
            let v = pass.block_inputs[l];
            let r = match rel.get(v) {
                Some(r) => r,
                None => zeros(v)?,
            };
            let (n, d) = (r.shape()[1], r.shape()[2]);
            let skip = usize::from(pass.has_cls);
            let scores = (skip..n).map(|i| r.data()[i * d..(i + 1) * d].iter().sum()).collect();
            (scores, pass.block_grids[l])
        }
    };
    Ok(LrpOutcome {
        map: SaliencyMap::from_raw(method, class, layer, scores, grid)?,
        logit: logits.data()[class],
        input_total: rel.input_total,
        absorbed_total: rel.absorbed_total,
    })
}

/// Tokens kept per head and the per-token count summed over heads.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct HeadMass {
    pub kept: Vec<Vec<usize>>,
    pub counts: Vec<usize>,
}

/// For each head's row, keeps the smallest set of largest entries whose sum
/// reaches `mass` of the row total. Ties are taken in ascending index order.
pub fn accumulate_rows(rows: &[Vec<f64>], mass: f64) -> Result<HeadMass> {
    if !(mass > 0.0 && mass <= 1.0) {
        return Err(Error::Validation(format!("mass {mass} must lie in (0, 1]")));
    }
    let n = rows.first().map_or(0, Vec::len);
    let mut counts = vec![0; n];
    let mut kept = Vec::with_capacity(rows.len());
    for row in rows {
        if row.len() != n {
            return Err(Error::dim("head rows differ in length"));
        }
        let total: f64 = row.iter().sum();
        let target = mass * total;
        let slack = 1e-12 * total.abs();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| row[j].total_cmp(&row[i]).then(i.cmp(&j)));
        let mut acc = 0.0;
        let mut keep = Vec::new();
        for i in order {
            if acc >= target - slack || row[i] <= 0.0 {
                break;
            }
            acc += row[i];
            keep.push(i);
        }
        keep.sort_unstable();
        keep.iter().for_each(|&i| counts[i] += 1);
        kept.push(keep);
    }
    Ok(HeadMass { kept, counts })
}

/// Head-mass accumulation on the query row of a record: the `[cls]` row, or
/// the mean query row without `[cls]`. Counts cover patch tokens only.
pub fn accumulate_heads(
    record: &crate::attention::AttentionRecord,
    sample: usize,
    has_cls: bool,
    mass: f64,
) -> Result<HeadMass> {
    let a = record.sample(sample);
    let rows: Vec<Vec<f64>> = (0..a.shape()[0])
        .map(|k| query_row(&a.index_first(k), has_cls))
        .collect();
    let mut hm = accumulate_rows(&rows, mass)?;
    if has_cls {
        hm.counts.remove(0);
        for keep in &mut hm.kept {
            keep.retain(|&i| i > 0);
            keep.iter_mut().for_each(|i| *i -= 1);
        }
    }
    Ok(hm)
}

/// Explanations of one image, produced together.
#[derive(Debug, Clone)]
pub struct Explanation {
    pub class: usize,
    pub logits: Vec<f64>,
    pub maps: Vec<SaliencyMap>,
    pub lrp: Vec<LrpOutcome>,
    pub head_mass: Option<HeadMass>,
}

/// Runs `methods` on an encoded `[1, C, H, W]` image. The explained class
/// defaults to the predicted one.
pub fn explain(
    model: &TransformerModel,
    image: &Tensor,
    methods: &[Method],
    class: Option<usize>,
    grad_cam_layer: Option<usize>,
    mass: f64,
    eps: f64,
) -> Result<Explanation> {
    let logits = model.logits(image, 1)?.into_data();
    let class = match class {
        Some(c) if c >= logits.len() => return Err(Error::Validation(format!("class {c} out of range"))),
        Some(c) => c,
        None => argmax(&logits),
    };
    let trace = model.forward_backward(image, &[class])?;
    let needs_attention = methods.iter().any(|m| m.needs_global_attention());
    if needs_attention && trace.global_records().next().is_none() {
        return Err(no_global_attention());
    }
    let mut maps = Vec::new();
    let mut lrp = Vec::new();
    for &m in methods {
        let map = match m {
            Method::AttnLast => attention_last(&trace, 0, class)?,
            Method::Rollout => rollout(&trace, 0, class)?,
            Method::TransformerAttribution => transformer_attribution(&trace, 0, class)?,
            Method::GradCam => grad_cam(&trace, 0, class, grad_cam_layer.unwrap_or(trace.depth() - 1))?,
            Method::Lrp | Method::LrpSecond | Method::LrpLast => {
                let readout = match m {
                    Method::Lrp => Readout::All,
                    Method::LrpSecond => Readout::Second,
                    _ => Readout::Last,
                };
                let out = lrp_epsilon(model, image, class, readout, eps)?;
                let map = out.map.clone();
                lrp.push(out);
                map
            }
        };
        maps.push(map);
    }
    let head_mass = match trace.global_records().last() {
        Some(rec) => Some(accumulate_heads(rec, 0, trace.has_cls, mass)?),
        None => None,
    };
    Ok(Explanation {
        class,
        logits,
        maps,
        lrp,
        head_mass,
    })
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) },
        )
        .0
}

#[cfg(test)]
mod tests;
