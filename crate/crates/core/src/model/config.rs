use serde::{Deserialize, Serialize};

use crate::attention::MultiHeadAttention;
use crate::bcos::DEFAULT_EXPONENT;
use crate::error::{Error, Result};
use crate::nn::{Mlp, Norm, Projection, ProjectionKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Vit,
    Bvt,
    Swin,
    Bwin,
}

impl Family {
    pub fn is_bcos(self) -> bool {
        matches!(self, Family::Bvt | Family::Bwin)
    }

    pub fn is_windowed(self) -> bool {
        matches!(self, Family::Swin | Family::Bwin)
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Vit => "vit",
            Family::Bvt => "bvt",
            Family::Swin => "swin",
            Family::Bwin => "bwin",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "vit" => Ok(Family::Vit),
            "bvt" => Ok(Family::Bvt),
            "swin" => Ok(Family::Swin),
            "bwin" => Ok(Family::Bwin),
            other => Err(Error::Config(format!("unknown model family {other:?}"))),
        }
    }

    pub fn default_channels(self) -> usize {
        if self.is_bcos() {
            6
        } else {
            3
        }
    }
}

fn default_patch() -> usize {
    8
}
fn default_mlp_ratio() -> usize {
    4
}
fn default_exponent() -> u32 {
    DEFAULT_EXPONENT
}
fn default_window() -> usize {
    7
}

/// Architecture hyper-parameters for every family.
///
/// `dim` and `heads` describe the first stage of windowed families; every
/// later stage doubles both. For those families `depth` must equal the sum
/// of `stages`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub family: Family,
    #[serde(default)]
    pub modified_last_block: bool,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    #[serde(default = "default_patch")]
    pub patch_size: usize,
    pub image_size: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    #[serde(default = "default_exponent")]
    pub exponent: u32,
    #[serde(default = "default_window")]
    pub window_size: usize,
    #[serde(default)]
    pub stages: Vec<usize>,
}

/// Layout of one stage of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageLayout {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub grid: usize,
}

impl ModelConfig {
    /// Named presets: `desk` (d=32, depth 2, 16×16), `micro` (d=64, depth
    /// 4, 32×32), `tiny-proxy` (d=128, depth 6, 64×64), `tiny` (d=192,
    /// depth 12, 224×224) and `small` (d=384, depth 12, 224×224).
    ///
    /// Windowed families split the depth over two stages and use a window
    /// that tiles the first-stage grid.
    pub fn preset(name: &str, family: Family, num_classes: usize) -> Result<Self> {
        let (dim, depth, heads, patch, image, window) = match name {
            "desk" => (32, 2, 2, 4, 16, 2),
            "micro" => (64, 4, 4, 4, 32, 4),
            "tiny-proxy" => (128, 6, 4, 8, 64, 4),
            "tiny" => (192, 12, 3, 8, 224, 7),
            "small" => (384, 12, 6, 8, 224, 7),
            other => return Err(Error::Config(format!("unknown preset {other:?}"))),
        };
        let mut cfg = ModelConfig {
            family,
            modified_last_block: false,
            depth,
            dim,
            heads,
            patch_size: patch,
            image_size: image,
            in_channels: family.default_channels(),
            num_classes,
            mlp_ratio: 4,
            exponent: DEFAULT_EXPONENT,
            window_size: window,
            stages: Vec::new(),
        };
        if family.is_windowed() {
            cfg.stages = vec![depth / 2, depth - depth / 2];
            cfg.dim = dim / 2;
            cfg.heads = (heads / 2).max(1);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn projection(&self) -> ProjectionKind {
        if self.family.is_bcos() {
            ProjectionKind::Bcos {
                exponent: self.exponent,
            }
        } else {
            ProjectionKind::Linear
        }
    }

    /// Linear projections carry biases; B-cos ones and their norms never do.
    pub fn has_bias(&self) -> bool {
        !self.family.is_bcos()
    }

    pub fn has_cls(&self) -> bool {
        !self.family.is_windowed()
    }

    pub fn patch_grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Tokens entering the first block (patches plus `[cls]` if any).
    pub fn tokens(&self) -> usize {
        self.patch_grid().pow(2) + usize::from(self.has_cls())
    }

    pub fn stage_layouts(&self) -> Vec<StageLayout> {
        if !self.family.is_windowed() {
            return vec![StageLayout {
                depth: self.depth,
                dim: self.dim,
                heads: self.heads,
                grid: self.patch_grid(),
            }];
        }
        self.stages
            .iter()
            .enumerate()
            .map(|(s, &depth)| StageLayout {
                depth,
                dim: self.dim << s,
                heads: self.heads << s,
                grid: self.patch_grid() >> s,
            })
            .collect()
    }

    pub fn final_dim(&self) -> usize {
        self.stage_layouts().last().map_or(self.dim, |s| s.dim)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.depth == 0 {
            return bad("depth must be positive".into());
        }
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return bad(format!(
                "dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            ));
        }
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.in_channels != 3 && self.in_channels != 6 {
            return bad(format!("in_channels must be 3 or 6, got {}", self.in_channels));
        }
        if self.num_classes < 2 {
            return bad("at least two classes are required".into());
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio must be positive".into());
        }
        if self.family.is_bcos() && self.exponent == 0 {
            return bad("B-cos exponent must be at least 1".into());
        }
        if self.family.is_windowed() {
            if self.stages.is_empty() || self.stages.contains(&0) {
                return bad("windowed families need non-empty stages with positive depths".into());
            }
            if self.stages.iter().sum::<usize>() != self.depth {
                return bad(format!("stages {:?} do not sum to depth {}", self.stages, self.depth));
            }
            let need = self.window_size << (self.stages.len() - 1);
            if self.window_size == 0 || !self.patch_grid().is_multiple_of(need) {
                return bad(format!(
                    "patch grid {} must be divisible by window {} times 2^(stages-1)",
                    self.patch_grid(),
                    self.window_size
                ));
            }
        } else {
            if !self.stages.is_empty() {
                return bad("stages are only meaningful for windowed families".into());
            }
            if self.modified_last_block {
                return bad("modified_last_block applies to windowed families only".into());
            }
        }
        Ok(())
    }

    /// Exact number of scalar parameters, from the closed form:
    ///
    /// * patch embedding `C·p²→d` (+d bias for linear families);
    /// * `[cls]` (d, non-windowed only) and positional table `n·d`;
    /// * per block two norms, attention `d→3d` and `d→d`, MLP `d→r·d→d`;
    /// * patch merging between stages: norm on `4d` plus `4d→2d` without
    ///   bias;
    /// * final norm and head `d→K` (+K bias for linear families).
    ///
    /// A B-cos projection `in→out` contributes `2·in·out`, a linear one
    /// `in·out (+out)`, a norm `d` (+d shift for linear families).
    pub fn param_count(&self) -> usize {
        let kind = self.projection();
        let bias = self.has_bias();
        let stages = self.stage_layouts();
        let d0 = stages[0].dim;
        let mut total = Projection::param_count(self.in_channels * self.patch_size.pow(2), d0, kind, bias);
        total += usize::from(self.has_cls()) * d0 + self.tokens() * d0;
        for (s, st) in stages.iter().enumerate() {
            if s > 0 {
                let prev = stages[s - 1].dim;
                total += Norm::param_count(4 * prev, bias) + Projection::param_count(4 * prev, st.dim, kind, false);
            }
            let block = 2 * Norm::param_count(st.dim, bias)
                + MultiHeadAttention::param_count(st.dim, kind)
                + Mlp::param_count(st.dim, self.mlp_ratio * st.dim, kind);
            total += st.depth * block;
        }
        let d = self.final_dim();
        total + Norm::param_count(d, bias) + Projection::param_count(d, self.num_classes, kind, bias)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_for_every_family() {
        for name in ["desk", "micro", "tiny-proxy", "tiny", "small"] {
            for f in [Family::Vit, Family::Bvt, Family::Swin, Family::Bwin] {
                let cfg = ModelConfig::preset(name, f, 9).unwrap();
                assert_eq!(cfg.in_channels, if f.is_bcos() { 6 } else { 3 });
            }
        }
    }

    #[test]
    fn token_counts() {
        let mut cfg = ModelConfig::preset("desk", Family::Vit, 3).unwrap();
        cfg.image_size = 16;
        cfg.patch_size = 8;
        assert_eq!(cfg.tokens(), 5);
        let cfg = ModelConfig::preset("tiny", Family::Vit, 9).unwrap();
        assert_eq!(cfg.tokens(), 785);
    }

    #[test]
    fn tiny_vit_is_about_five_million_parameters() {
        let count = ModelConfig::preset("tiny", Family::Vit, 9).unwrap().param_count() as f64;
        assert!((count - 5e6).abs() / 5e6 <= 0.15, "{count}");
    }

    #[test]
    fn degenerate_configs_rejected() {
        let mut cfg = ModelConfig::preset("desk", Family::Vit, 3).unwrap();
        cfg.depth = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::preset("desk", Family::Swin, 3).unwrap();
        cfg.window_size = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::preset("desk", Family::Vit, 3).unwrap();
        cfg.modified_last_block = true;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        let json =
            r#"{"family":"vit","depth":1,"dim":8,"heads":2,"image_size":8,"in_channels":3,"num_classes":2,"colour":1}"#;
        assert!(serde_json::from_str::<ModelConfig>(json).is_err());
    }
}
