use std::fs;
use std::path::{Path, PathBuf};

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize};

use crate::data::{generate_synthetic, load_image_folder, Dataset, Normalization, SyntheticSpec, LABELS_FILE};
use crate::error::{Error, Result};
use crate::explain::{Method, Upsample};
use crate::model::{Family, ModelConfig};
use crate::train::TrainConfig;

/// A named preset with optional overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PresetSpec {
    pub preset: String,
    pub family: Family,
    pub num_classes: usize,
    #[serde(default)]
    pub modified_last_block: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patch_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window_size: Option<usize>,
}

/// Either a preset reference (an object with a `preset` key) or a full
/// model configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum ModelSpec {
    Preset(PresetSpec),
    Explicit(ModelConfig),
}

impl<'de> Deserialize<'de> for ModelSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = serde_json::Value::deserialize(d)?;
        if v.get("preset").is_some() {
            PresetSpec::deserialize(v)
                .map(ModelSpec::Preset)
                .map_err(D::Error::custom)
        } else {
            ModelConfig::deserialize(v)
                .map(ModelSpec::Explicit)
                .map_err(D::Error::custom)
        }
    }
}

impl ModelSpec {
    pub fn resolve(&self) -> Result<ModelConfig> {
        let cfg = match self {
            ModelSpec::Explicit(c) => c.clone(),
            ModelSpec::Preset(p) => {
                let mut c = ModelConfig::preset(&p.preset, p.family, p.num_classes)?;
                c.modified_last_block = p.modified_last_block;
                if let Some(v) = p.patch_size {
                    c.patch_size = v;
                }
                if let Some(v) = p.image_size {
                    c.image_size = v;
                }
                if let Some(v) = p.window_size {
                    c.window_size = v;
                }
                c
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Images listed in a labels CSV; `labels` defaults to `labels.csv`
    /// inside `root`.
    Folder {
        root: PathBuf,
        #[serde(default)]
        labels: Option<PathBuf>,
    },
    Synthetic(SyntheticSpec),
}

impl DataSource {
    pub fn folder(root: &Path) -> Self {
        DataSource::Folder {
            root: root.to_path_buf(),
            labels: None,
        }
    }

    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataSource::Folder { root, labels } => {
                let csv = labels.clone().unwrap_or_else(|| root.join(LABELS_FILE));
                if !csv.is_file() {
                    return Err(Error::Missing(format!("labels file {} does not exist", csv.display())));
                }
                load_image_folder(root, &csv)
            }
            DataSource::Synthetic(spec) => generate_synthetic(spec),
        }
    }
}

fn default_methods() -> Vec<Method> {
    vec![Method::AttnLast, Method::Rollout]
}
fn default_mass() -> f64 {
    0.5
}
fn default_eps() -> f64 {
    1e-6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplainConfig {
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    /// Block whose tokens Grad-CAM reads; the last one when absent.
    #[serde(default)]
    pub layer: Option<usize>,
    /// Share of each attention row kept by head-mass accumulation.
    #[serde(default = "default_mass")]
    pub mass: f64,
    /// Stabilizer of the ε rule.
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub upsample: Upsample,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("every field has a default")
    }
}

/// Everything a run needs, read from one JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainConfig,
    pub data: DataSource,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub explain: ExplainConfig,
    /// Standardization of three-channel inputs.
    #[serde(default)]
    pub normalization: Option<Normalization>,
    /// Checkpoint whose matching weights initialize the model.
    #[serde(default)]
    pub init_from: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    /// Checks the parts that do not need data: model, training settings and
    /// referenced paths.
    pub fn validate(&self) -> Result<ModelConfig> {
        let model = self.model.resolve()?;
        self.train.validate(model.family)?;
        if let DataSource::Folder { root, .. } = &self.data {
            if !root.is_dir() {
                return Err(Error::Missing(format!("data folder {} does not exist", root.display())));
            }
        }
        if let DataSource::Synthetic(spec) = &self.data {
            spec.validate()?;
        }
        if let Some(p) = &self.init_from {
            if !p.is_file() {
                return Err(Error::Missing(format!("checkpoint {} does not exist", p.display())));
            }
        }
        if !(self.explain.mass > 0.0 && self.explain.mass <= 1.0) {
            return Err(Error::Config(format!(
                "explain.mass {} must lie in (0, 1]",
                self.explain.mass
            )));
        }
        if model.family.is_bcos() && self.normalization.is_some() {
            return Err(Error::Config(
                "normalization applies only to three-channel families".into(),
            ));
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "model": {"preset": "desk", "family": "bvt", "num_classes": 3},
        "data": {"kind": "synthetic", "classes": [
            {"shape": "disc", "color": [0.8, 0.2, 0.2], "samples": 4},
            {"shape": "ring", "color": [0.2, 0.8, 0.2], "samples": 4}
        ]}
    }"#;

    #[test]
    fn minimal_config_parses() {
        let cfg: RunConfig = serde_json::from_str(MINIMAL).unwrap();
        let model = cfg.validate().unwrap();
        assert_eq!(model.family, Family::Bvt);
        assert_eq!(cfg.explain.methods, default_methods());
        assert_eq!(cfg.explain.mass, 0.5);
    }

    #[test]
    fn unknown_keys_rejected_at_every_level() {
        for (from, to) in [
            (r#""num_classes": 3"#, r#""num_classes": 3, "depht": 2"#),
            (r#""kind": "synthetic","#, r#""kind": "synthetic", "seeed": 1,"#),
            (r#""samples": 4}"#, r#""samples": 4, "hue": 1}"#),
        ] {
            let text = MINIMAL.replacen(from, to, 1);
            assert!(serde_json::from_str::<RunConfig>(&text).is_err(), "{text}");
        }
        let text = MINIMAL.replacen("\"model\"", "\"trian\": {}, \"model\"", 1);
        assert!(serde_json::from_str::<RunConfig>(&text).is_err());
    }

    #[test]
    fn explicit_model_config() {
        let cfg = ModelConfig::preset("desk", Family::Vit, 3).unwrap();
        let text = MINIMAL.replacen(
            r#"{"preset": "desk", "family": "bvt", "num_classes": 3}"#,
            &serde_json::to_string(&cfg).unwrap(),
            1,
        );
        let run: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(run.validate().unwrap(), cfg);
    }

    #[test]
    fn missing_folder_is_reported() {
        let text = r#"{"model": {"preset": "desk", "family": "vit", "num_classes": 2},
                       "data": {"kind": "folder", "root": "/definitely/not/here"}}"#;
        let cfg: RunConfig = serde_json::from_str(text).unwrap();
        assert!(cfg.validate().unwrap_err().to_string().contains("/definitely/not/here"));
    }
}
