use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::SaliencyMap;
use crate::error::{Error, Result};
use crate::netpbm::Image8;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Upsample {
    #[default]
    Nearest,
    /// Corner-aligned bilinear interpolation.
    Bilinear,
}

/// Upsamples a `[gh, gw]` map to `[height, width]`.
pub fn render_saliency(grid: &Tensor, height: usize, width: usize, mode: Upsample) -> Result<Tensor> {
    let &[gh, gw] = grid.shape() else {
        return Err(Error::dim(format!(
            "saliency grid must be rank 2, got {:?}",
            grid.shape()
        )));
    };
    if height == 0 || width == 0 {
        return Err(Error::dim("empty target resolution"));
    }
    let mut out = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            let v = match mode {
                Upsample::Nearest => grid.at(&[y * gh / height, x * gw / width]),
                Upsample::Bilinear => {
                    let coord = |i: usize, dst: usize, src: usize| {
                        if dst == 1 || src == 1 {
                            0.0
                        } else {
                            i as f64 * (src - 1) as f64 / (dst - 1) as f64
                        }
                    };
                    let (fy, fx) = (coord(y, height, gh), coord(x, width, gw));
                    let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
                    let (y1, x1) = ((y0 + 1).min(gh - 1), (x0 + 1).min(gw - 1));
                    let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
                    let top = grid.at(&[y0, x0]) * (1.0 - tx) + grid.at(&[y0, x1]) * tx;
                    let bottom = grid.at(&[y1, x0]) * (1.0 - tx) + grid.at(&[y1, x1]) * tx;
                    top * (1.0 - ty) + bottom * ty
                }
            };
            out.push(v);
        }
    }
    Tensor::new(vec![height, width], out)
}

/// Share of the saliency carried by the top 10 % of pixels that falls
/// inside `mask`. Zero when those pixels carry no mass.
pub fn localization_score(saliency: &Tensor, mask: &[bool]) -> Result<f64> {
    let values = saliency.data();
    if values.len() != mask.len() {
        return Err(Error::dim(format!(
            "mask of {} pixels for a saliency map of {}",
            mask.len(),
            values.len()
        )));
    }
    let k = (values.len() as f64 * 0.1).ceil() as usize;
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[j].total_cmp(&values[i]).then(i.cmp(&j)));
    let top = &order[..k.max(1)];
    let total: f64 = top.iter().map(|&i| values[i].max(0.0)).sum();
    if total <= 0.0 {
        return Ok(0.0);
    }
    let inside: f64 = top.iter().filter(|&&i| mask[i]).map(|&i| values[i].max(0.0)).sum();
    Ok(inside / total)
}

/// JSON description written next to each saliency image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub method: String,
    pub class: usize,
    pub layer: Option<usize>,
    pub normalization: String,
    pub degenerate: bool,
    pub upsample: Upsample,
    pub localization: Option<f64>,
}

impl Sidecar {
    pub fn new(map: &SaliencyMap, upsample: Upsample, localization: Option<f64>) -> Self {
        Self {
            method: map.method.name().to_owned(),
            class: map.class,
            layer: map.layer,
            normalization: if map.degenerate { "none" } else { "max" }.to_owned(),
            degenerate: map.degenerate,
            upsample,
            localization,
        }
    }
}

impl SaliencyMap {
    /// Writes `<stem>.pgm` and `<stem>.json` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str, image: &Tensor, sidecar: &Sidecar) -> Result<(PathBuf, PathBuf)> {
        let pgm = dir.join(format!("{stem}.pgm"));
        let json = dir.join(format!("{stem}.json"));
        Image8::from_tensor(image)?.save(&pgm)?;
        let text = serde_json::to_string_pretty(sidecar)?;
        fs::write(&json, text + "\n").map_err(|e| Error::io(&json, e))?;
        Ok((pgm, json))
    }
}
