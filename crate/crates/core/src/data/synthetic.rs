use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{assign_split, Dataset, Sample, SplitFractions};
use crate::error::{Error, Result};
use crate::netpbm::quantize;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Disc,
    Ring,
    Wedge,
}

impl ShapeKind {
    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Disc => "disc",
            ShapeKind::Ring => "ring",
            ShapeKind::Wedge => "wedge",
        }
    }
}

fn default_jitter() -> f64 {
    0.05
}
fn default_texture() -> f64 {
    0.08
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub shape: ShapeKind,
    /// Mean RGB color of the shape.
    pub color: [f64; 3],
    /// Per-image uniform offset of each color channel.
    #[serde(default = "default_jitter")]
    pub jitter: f64,
    /// Per-pixel brightness noise amplitude.
    #[serde(default = "default_texture")]
    pub texture: f64,
    pub samples: usize,
}

fn default_size() -> usize {
    16
}

/// Colored shapes on gray textured backgrounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_size")]
    pub image_size: usize,
    pub classes: Vec<ClassSpec>,
    #[serde(default)]
    pub splits: SplitFractions,
}

impl SyntheticSpec {
    /// Red discs, green rings and blue wedges.
    pub fn three_class(seed: u64, image_size: usize, per_class: usize) -> Self {
        let class = |shape, color| ClassSpec {
            shape,
            color,
            jitter: default_jitter(),
            texture: default_texture(),
            samples: per_class,
        };
        Self {
            seed,
            image_size,
            classes: vec![
                class(ShapeKind::Disc, [0.85, 0.2, 0.15]),
                class(ShapeKind::Ring, [0.2, 0.75, 0.25]),
                class(ShapeKind::Wedge, [0.2, 0.3, 0.85]),
            ],
            splits: SplitFractions::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(Error::Config("synthetic data needs at least 2 classes".into()));
        }
        if self.image_size < 4 {
            return Err(Error::Config(format!("image size {} is too small", self.image_size)));
        }
        for (i, c) in self.classes.iter().enumerate() {
            let lo = c.color.iter().fold(f64::INFINITY, |a, &v| a.min(v)) - c.jitter - c.texture;
            let hi = c.color.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v)) + c.jitter + c.texture;
            if c.samples == 0 || c.jitter < 0.0 || c.texture < 0.0 || lo < 0.0 || hi > 1.0 {
                return Err(Error::Config(format!(
                    "class {i}: needs samples > 0 and colors that stay inside [0, 1] after jitter and texture"
                )));
            }
        }
        self.splits.validate()
    }

    pub fn total(&self) -> usize {
        self.classes.iter().map(|c| c.samples).sum()
    }

    /// Class of the sample at global `index`.
    pub fn class_of(&self, index: usize) -> Option<usize> {
        let mut start = 0;
        for (k, c) in self.classes.iter().enumerate() {
            if index < start + c.samples {
                return Some(k);
            }
            start += c.samples;
        }
        None
    }
}

/// A rendered sample: `[3, S, S]` image quantized to 8 bits and its shape mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Rendered {
    pub image: Tensor,
    pub mask: Vec<bool>,
}

fn inside(shape: ShapeKind, dx: f64, dy: f64, r: f64, start: f64, span: f64) -> bool {
    let d = (dx * dx + dy * dy).sqrt();
    match shape {
        ShapeKind::Disc => d <= r,
        ShapeKind::Ring => d <= r && d >= 0.55 * r,
        ShapeKind::Wedge => {
            let angle = (dy.atan2(dx) - start).rem_euclid(2.0 * PI);
            d <= r && angle <= span
        }
    }
}

/// Draws sample `index`; a pure function of the spec and the index.
pub fn render(spec: &SyntheticSpec, index: usize) -> Result<Rendered> {
    let class = spec
        .class_of(index)
        .ok_or_else(|| Error::Validation(format!("sample {index} beyond {} generated", spec.total())))?;
    let c = &spec.classes[class];
    let s = spec.image_size;
    let sf = s as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let cx = rng.gen_range(0.3..0.7) * sf;
    let cy = rng.gen_range(0.3..0.7) * sf;
    let r = rng.gen_range(0.22..0.3) * sf;
    let start = rng.gen_range(0.0..2.0 * PI);
    let span = rng.gen_range(0.5..0.75) * PI;
    let background = rng.gen_range(0.4..0.6);
    let color: Vec<f64> = c
        .color
        .iter()
        .map(|&v| v + rng.gen_range(-1.0..=1.0) * c.jitter)
        .collect();
    let mut image = vec![0.0; 3 * s * s];
    let mut mask = vec![false; s * s];
    for y in 0..s {
        for x in 0..s {
            let px = y * s + x;
            let noise = rng.gen_range(-1.0..=1.0) * c.texture;
            let hit = inside(c.shape, x as f64 + 0.5 - cx, y as f64 + 0.5 - cy, r, start, span);
            mask[px] = hit;
            for ch in 0..3 {
                let v = if hit { color[ch] } else { background } + noise;
                image[ch * s * s + px] = f64::from(quantize(v)) / 255.0;
            }
        }
    }
    Ok(Rendered {
        image: Tensor::new(vec![3, s, s], image)?,
        mask,
    })
}

/// Renders every sample of `spec` and assigns hashed splits.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let samples = (0..spec.total())
        .into_par_iter()
        .map(|i| {
            let Rendered { image, mask } = render(spec, i)?;
            let id = format!("s{i:06}");
            Ok(Sample {
                split: assign_split(spec.seed, &id, &spec.splits),
                id,
                image,
                label: spec.class_of(i).expect("index within total"),
                mask: Some(mask),
                path: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let names = spec.classes.iter().map(|c| c.shape.name().to_owned()).collect();
    Dataset::new(samples, names)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rendering_is_deterministic() {
        let spec = SyntheticSpec::three_class(3, 16, 4);
        for i in [0, 5, 11] {
            assert_eq!(render(&spec, i).unwrap(), render(&spec, i).unwrap());
        }
        assert_ne!(render(&spec, 0).unwrap(), render(&spec, 1).unwrap());
        assert!(render(&spec, 12).is_err());
    }

    #[test]
    fn mask_matches_the_colored_region() {
        let spec = SyntheticSpec::three_class(9, 24, 6);
        for i in 0..spec.total() {
            let Rendered { image, mask } = render(&spec, i).unwrap();
            let plane = 24 * 24;
            assert!(mask.iter().any(|&m| m), "sample {i} has an empty mask");
            for (px, &m) in mask.iter().enumerate() {
                let v: Vec<f64> = (0..3).map(|c| image.data()[c * plane + px]).collect();
                let spread = v.iter().cloned().fold(f64::MIN, f64::max) - v.iter().cloned().fold(f64::MAX, f64::min);
                assert_eq!(m, spread > 0.3, "sample {i} pixel {px}: {v:?}");
            }
        }
    }

    #[test]
    fn imbalanced_counts() {
        let mut spec = SyntheticSpec::three_class(1, 8, 10);
        spec.classes.truncate(2);
        spec.classes[0].samples = 100;
        let ds = generate_synthetic(&spec).unwrap();
        assert_eq!(ds.len(), 110);
        assert_eq!(ds.imbalance_ratio(), 10.0);
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut spec = SyntheticSpec::three_class(1, 8, 10);
        spec.classes[0].color = [0.99, 0.5, 0.5];
        assert!(spec.validate().is_err());
        let mut spec = SyntheticSpec::three_class(1, 8, 10);
        spec.classes.truncate(1);
        assert!(spec.validate().is_err());
        assert!(serde_json::from_str::<SyntheticSpec>(r#"{"classes": [], "colour": 1}"#).is_err());
    }
}
