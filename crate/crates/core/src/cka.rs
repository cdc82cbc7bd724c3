//! Linear centered kernel alignment between hidden layers.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TransformerModel;
use crate::tensor::Tensor;

/// How a layer's tokens are reduced to one vector per sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Mean over patch tokens, excluding the class token.
    #[default]
    PatchMean,
    /// The class token alone; only valid for models that have one.
    Cls,
}

/// Per-layer `[n_samples, d]` activation matrices.
#[derive(Debug, Clone)]
pub struct ActivationStack {
    names: Vec<String>,
    layers: Vec<Tensor>,
    pooling: Pooling,
    sample_ids: Vec<String>,
}

impl ActivationStack {
    pub fn new(names: Vec<String>, layers: Vec<Tensor>, pooling: Pooling, sample_ids: Vec<String>) -> Result<Self> {
        if names.len() != layers.len() || layers.is_empty() {
            return Err(Error::Validation(format!(
                "{} layer names for {} activation matrices",
                names.len(),
                layers.len()
            )));
        }
        let n = sample_ids.len();
        if n < 2 {
            return Err(Error::Validation(format!("need at least 2 samples, got {n}")));
        }
        for (name, x) in names.iter().zip(&layers) {
            if x.rank() != 2 || x.shape()[0] != n {
                return Err(Error::dim(format!(
                    "layer {name} has shape {:?}, expected [{n}, d]",
                    x.shape()
                )));
            }
        }
        Ok(Self {
            names,
            layers,
            pooling,
            sample_ids,
        })
    }

    /// Runs `model` on an encoded batch and pools every block output.
    pub fn from_model(
        model: &TransformerModel,
        images: &Tensor,
        sample_ids: Vec<String>,
        pooling: Pooling,
        chunk: usize,
    ) -> Result<Self> {
        let batch = *images.shape().first().ok_or_else(|| Error::dim("empty image batch"))?;
        if sample_ids.len() != batch {
            return Err(Error::Validation(format!(
                "{} sample ids for {batch} images",
                sample_ids.len()
            )));
        }
        if pooling == Pooling::Cls && !model.config().has_cls() {
            return Err(Error::Config(format!(
                "{} models have no class token to pool",
                model.config().family.name()
            )));
        }
        let per = images.len() / batch.max(1);
        let chunk = chunk.max(1);
        let starts: Vec<usize> = (0..batch).step_by(chunk).collect();
        let parts = starts
            .par_iter()
            .map(|&s| {
                let n = chunk.min(batch - s);
                let mut shape = images.shape().to_vec();
                shape[0] = n;
                let part = Tensor::new(shape, images.data()[s * per..(s + n) * per].to_vec())?;
                let (_, trace) = model.forward(&part)?;
                trace
                    .block_outputs
                    .iter()
                    .map(|t| pool(t, trace.has_cls, pooling))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let depth = parts.first().map_or(0, Vec::len);
        let mut layers = Vec::with_capacity(depth);
        for l in 0..depth {
            let d = parts[0][l].1;
            let data: Vec<f64> = parts.iter().flat_map(|p| p[l].0.iter().copied()).collect();
            layers.push(Tensor::new(vec![batch, d], data)?);
        }
        let names = (0..depth).map(|l| format!("block{l}")).collect();
        Self::new(names, layers, pooling, sample_ids)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn layers(&self) -> &[Tensor] {
        &self.layers
    }

    pub fn pooling(&self) -> Pooling {
        self.pooling
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn samples(&self) -> usize {
        self.sample_ids.len()
    }
}

/// Pools `[B, T, d]` tokens to row-major `[B, d]`.
fn pool(tokens: &Tensor, has_cls: bool, pooling: Pooling) -> Result<(Vec<f64>, usize)> {
    let &[b, t, d] = tokens.shape() else {
        return Err(Error::dim(format!(
            "expected [B, T, d] tokens, got {:?}",
            tokens.shape()
        )));
    };
    let first = usize::from(has_cls);
    let mut out = vec![0.0; b * d];
    for s in 0..b {
        let row = &mut out[s * d..(s + 1) * d];
        let tok = |i: usize| &tokens.data()[(s * t + i) * d..(s * t + i + 1) * d];
        match pooling {
            Pooling::Cls => row.copy_from_slice(tok(0)),
            Pooling::PatchMean => {
                for i in first..t {
                    row.iter_mut().zip(tok(i)).for_each(|(r, v)| *r += v);
                }
                let n = (t - first) as f64;
                row.iter_mut().for_each(|r| *r /= n);
            }
        }
    }
    Ok((out, d))
}

fn centered(x: &Tensor) -> Result<Tensor> {
    let &[n, p] = x.shape() else {
        return Err(Error::dim(format!("CKA needs a matrix, got {:?}", x.shape())));
    };
    if n < 2 {
        return Err(Error::Validation(format!("CKA needs at least 2 samples, got {n}")));
    }
    let mut means = vec![0.0; p];
    for row in x.data().chunks(p) {
        means.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    means.iter_mut().for_each(|m| *m /= n as f64);
    let data = x
        .data()
        .chunks(p)
        .flat_map(|row| row.iter().zip(&means).map(|(v, m)| v - m))
        .collect();
    Tensor::new(vec![n, p], data)
}

fn frobenius_sq(t: &Tensor) -> f64 {
    t.data().iter().map(|v| v * v).sum()
}

/// `‖Ycᵀ Xc‖²_F / (‖Xcᵀ Xc‖_F ‖Ycᵀ Yc‖_F)` with column-centered inputs.
pub fn linear_cka(x: &Tensor, y: &Tensor) -> Result<f64> {
    if x.rank() != 2 || y.rank() != 2 || x.shape()[0] != y.shape()[0] {
        return Err(Error::dim(format!(
            "CKA inputs must share the sample count, got {:?} and {:?}",
            x.shape(),
            y.shape()
        )));
    }
    let (xc, yc) = (centered(x)?, centered(y)?);
    for (raw, c) in [(x, &xc), (y, &yc)] {
        if frobenius_sq(c).sqrt() <= 1e-12 * frobenius_sq(raw).sqrt().max(1.0) {
            return Err(Error::UndefinedSimilarity(
                "every feature is constant across samples".into(),
            ));
        }
    }
    let (xt, yt) = (xc.t(), yc.t());
    let cross = frobenius_sq(&yt.matmul(&xc)?);
    let xx = frobenius_sq(&xt.matmul(&xc)?).sqrt();
    let yy = frobenius_sq(&yt.matmul(&yc)?).sqrt();
    Ok((cross / (xx * yy)).clamp(0.0, 1.0))
}

/// Symmetric `[L, L]` similarity matrix between named layers.
#[derive(Debug, Clone, PartialEq)]
pub struct CkaMatrix {
    pub names: Vec<String>,
    pub values: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CkaSummary {
    pub layers: usize,
    pub samples: usize,
    pub pooling: Pooling,
    pub mean_off_diagonal: f64,
}

impl CkaMatrix {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values.at(&[i, j])
    }

    /// Mean of the entries off the diagonal; 1 for a single layer.
    pub fn mean_off_diagonal(&self) -> f64 {
        let l = self.len();
        if l < 2 {
            return 1.0;
        }
        let mut sum = 0.0;
        for i in 0..l {
            for j in 0..l {
                if i != j {
                    sum += self.get(i, j);
                }
            }
        }
        sum / (l * (l - 1)) as f64
    }

    /// Header row and column of layer names, values at 6 decimals.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let fail = |e: csv::Error| Error::Format(format!("CSV write failed: {e}"));
        let mut header = vec![String::from("layer")];
        header.extend(self.names.iter().cloned());
        out.write_record(&header).map_err(fail)?;
        for (i, name) in self.names.iter().enumerate() {
            let mut record = vec![name.clone()];
            record.extend((0..self.len()).map(|j| format!("{:.6}", self.get(i, j))));
            out.write_record(&record).map_err(fail)?;
        }
        out.flush().map_err(|e| Error::Format(format!("CSV write failed: {e}")))
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    pub fn summary(&self, stack: &ActivationStack) -> CkaSummary {
        CkaSummary {
            layers: self.len(),
            samples: stack.samples(),
            pooling: stack.pooling(),
            mean_off_diagonal: self.mean_off_diagonal(),
        }
    }
}

/// Pairwise linear CKA over every layer of `stack`.
pub fn cka_matrix(stack: &ActivationStack) -> Result<CkaMatrix> {
    let l = stack.layers.len();
    let pairs: Vec<(usize, usize)> = (0..l).flat_map(|i| (i + 1..l).map(move |j| (i, j))).collect();
    for x in &stack.layers {
        linear_cka(x, x)?;
    }
    let upper = pairs
        .par_iter()
        .map(|&(i, j)| linear_cka(&stack.layers[i], &stack.layers[j]))
        .collect::<Result<Vec<_>>>()?;
    let mut values = Tensor::eye(l);
    for (&(i, j), v) in pairs.iter().zip(upper) {
        values.set(&[i, j], v);
        values.set(&[j, i], v);
    }
    Ok(CkaMatrix {
        names: stack.names.clone(),
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, p: usize, seed: u64) -> Tensor {
        Tensor::randn(vec![n, p], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Random orthogonal matrix from the QR factorization of a Gaussian one.
    fn orthogonal(p: usize, seed: u64) -> Tensor {
        let g = random(p, p, seed);
        let q = nalgebra::DMatrix::from_row_slice(p, p, g.data()).qr().q();
        let data = (0..p)
            .flat_map(|i| (0..p).map(move |j| (i, j)))
            .map(|(i, j)| q[(i, j)])
            .collect();
        Tensor::new(vec![p, p], data).unwrap()
    }

    fn stack(layers: Vec<Tensor>) -> ActivationStack {
        let n = layers[0].shape()[0];
        let names = (0..layers.len()).map(|i| format!("l{i}")).collect();
        ActivationStack::new(
            names,
            layers,
            Pooling::PatchMean,
            (0..n).map(|i| i.to_string()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn self_similarity_is_one() {
        let x = random(40, 7, 1);
        assert!((linear_cka(&x, &x).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn isotropic_scale_invariance() {
        let x = random(40, 7, 2);
        assert!((linear_cka(&x, &x.map(|v| 3.0 * v)).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_features_are_undefined() {
        let x = Tensor::full(vec![10, 3], 2.5);
        let y = random(10, 3, 3);
        assert!(matches!(linear_cka(&x, &y), Err(Error::UndefinedSimilarity(_))));
        assert!(matches!(linear_cka(&y, &x), Err(Error::UndefinedSimilarity(_))));
    }

    #[test]
    fn single_layer_matrix() {
        let m = cka_matrix(&stack(vec![random(32, 4, 4)])).unwrap();
        assert_eq!(m.values, Tensor::eye(1));
    }

    #[test]
    fn duplicated_layers_are_identical() {
        let x = random(32, 5, 5);
        let m = cka_matrix(&stack(vec![x.clone(), random(32, 6, 6), x])).unwrap();
        assert!((m.get(0, 2) - 1.0).abs() < 1e-12);
        assert!((m.get(2, 0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn independent_layers_match_permutation_null() {
        let (x, y) = (random(64, 16, 7), random(64, 16, 8));
        let observed = linear_cka(&x, &y).unwrap();
        assert!(observed < 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let null: Vec<f64> = (0..200)
            .map(|_| {
                let mut order: Vec<usize> = (0..64).collect();
                order.shuffle(&mut rng);
                let data = order.iter().flat_map(|&i| y.row(i).to_vec()).collect();
                linear_cka(&x, &Tensor::new(vec![64, 16], data).unwrap()).unwrap()
            })
            .collect();
        let mean = null.iter().sum::<f64>() / null.len() as f64;
        let std = (null.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / null.len() as f64).sqrt();
        assert!(
            (observed - mean).abs() < 4.0 * std,
            "observed {observed} null {mean}±{std}"
        );
    }

    #[test]
    fn csv_layout() {
        let m = cka_matrix(&stack(vec![random(32, 3, 10), random(32, 3, 11)])).unwrap();
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "layer,l0,l1");
        assert!(lines[1].starts_with("l0,1.000000,"));
        assert!(lines[2].ends_with(",1.000000"));
        assert_eq!(lines.len(), 3);
    }

    #[test]
    fn stack_rejects_mismatched_samples() {
        let names = vec!["a".into(), "b".into()];
        let ids: Vec<String> = (0..8).map(|i| i.to_string()).collect();
        assert!(ActivationStack::new(names, vec![random(8, 2, 1), random(7, 2, 1)], Pooling::PatchMean, ids).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn rotation_and_scale_invariance(seed in any::<u64>(), n in 8usize..40, p in 2usize..8, s in 0.1f64..10.0) {
            let x = random(n, p, seed);
            let y = random(n, p + 1, seed ^ 0x5555);
            let base = linear_cka(&x, &y).unwrap();
            let rotated = x.matmul(&orthogonal(p, seed.wrapping_add(1))).unwrap();
            prop_assert!((linear_cka(&rotated, &y).unwrap() - base).abs() < 1e-10);
            prop_assert!((linear_cka(&x.map(|v| s * v), &y).unwrap() - base).abs() < 1e-10);
            prop_assert!((linear_cka(&x, &rotated).unwrap() - 1.0).abs() < 1e-10);
        }

        #[test]
        fn matrix_symmetric_unit_diagonal(seed in any::<u64>(), l in 1usize..5) {
            let layers = (0..l).map(|i| random(32, 3 + i, seed.wrapping_add(i as u64))).collect();
            let m = cka_matrix(&stack(layers)).unwrap();
            for i in 0..l {
                prop_assert_eq!(m.get(i, i), 1.0);
                for j in 0..l {
                    prop_assert!((m.get(i, j) - m.get(j, i)).abs() < 1e-12);
                    prop_assert!((0.0..=1.0).contains(&m.get(i, j)));
                }
            }
        }
    }
}
