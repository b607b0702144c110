//! Run configuration: TOML overlaid on the per-profile defaults manifest.
//!
//! The manifest doubles as the schema — a user key that does not exist in
//! it, or whose type differs, is rejected with its dotted key path before
//! any work starts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::adapt::{Mechanism, Site};
use crate::attention::AttentionVariant;
use crate::error::{Error, Result};
use crate::scene::CameraSpec;
use crate::segmenter::{SegmenterArch, OUTPUT_STRIDE};

/// The shipped defaults manifest.
pub const DEFAULTS_TOML: &str = include_str!("../configs/defaults.toml");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Desk,
    Paper,
}

impl Profile {
    fn key(self) -> &'static str {
        match self {
            Profile::Desk => "desk",
            Profile::Paper => "paper",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub adaptation: AdaptationConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub report: ReportConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset root; relative paths resolve against the data root.
    pub root: PathBuf,
    pub source_split: String,
    pub target_split: String,
    pub source_val_split: String,
    pub target_val_split: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub complexity: usize,
    pub source_count: usize,
    pub target_count: usize,
    pub val_count: usize,
    pub source_camera: CameraSpec,
    pub target_camera: CameraSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder_widths: [usize; 4],
    pub decoder_width: usize,
    pub attention: Vec<AttentionVariant>,
    pub reduction_ratio: usize,
    /// Base width of every discriminator.
    pub disc_width: usize,
    /// Initial γ of the attention in front of attentional discriminators.
    pub adam_gamma_init: f64,
}

impl ModelConfig {
    pub fn arch(&self) -> SegmenterArch {
        SegmenterArch {
            encoder_widths: self.encoder_widths,
            decoder_width: self.decoder_width,
            attention: self.attention.clone(),
            reduction_ratio: self.reduction_ratio,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteConfig {
    pub mechanism: Mechanism,
    pub lambda_adv: f64,
    pub lambda_seg: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptationConfig {
    pub da1: SiteConfig,
    pub da2: SiteConfig,
}

impl AdaptationConfig {
    pub fn site(&self, site: Site) -> &SiteConfig {
        match site {
            Site::Output => &self.da1,
            Site::Feature => &self.da2,
        }
    }

    pub fn is_source_only(&self) -> bool {
        self.da1.mechanism == Mechanism::None && self.da2.mechanism == Mechanism::None
    }

    /// Every enabled discriminator with its site.
    pub fn discriminators(&self) -> Vec<(Site, String)> {
        [Site::Output, Site::Feature]
            .into_iter()
            .flat_map(|s| {
                self.site(s)
                    .mechanism
                    .discriminators(s)
                    .into_iter()
                    .map(move |n| (s, n))
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub max_iter: u64,
    pub batch_size: usize,
    pub g_base_lr: f64,
    pub g_momentum: f64,
    pub g_weight_decay: f64,
    pub d_base_lr: f64,
    pub d_beta1: f64,
    pub d_beta2: f64,
    pub lr_power: f64,
    pub rcdam_stage2_seg_weight: f64,
    /// `[width, height]` the source images are resized to.
    pub source_size: [usize; 2],
    pub target_size: [usize; 2],
    pub checkpoint_every: u64,
    /// Stamp metrics records with elapsed milliseconds; disable for
    /// byte-comparable logs.
    pub record_wall_time: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub split: String,
    pub size: [usize; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportConfig {
    pub runs: Vec<String>,
    pub backbone: String,
}

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::String(_) => "a string",
        Value::Integer(_) => "an integer",
        Value::Float(_) => "a number",
        Value::Boolean(_) => "a boolean",
        Value::Datetime(_) => "a datetime",
        Value::Array(_) => "an array",
        Value::Table(_) => "a table",
    }
}

/// Overlays `user` onto `base`, checking keys and value kinds against it.
fn overlay(base: &mut Table, user: Table, path: &str) -> Result<()> {
    for (key, value) in user {
        let here = if path.is_empty() {
            key.clone()
        } else {
            format!("{path}.{key}")
        };
        let Some(slot) = base.get_mut(&key) else {
            return Err(Error::config(here, "unknown key"));
        };
        match (slot, value) {
            (Value::Table(b), Value::Table(u)) => overlay(b, u, &here)?,
            (slot @ Value::Float(_), Value::Integer(i)) => *slot = Value::Float(i as f64),
            (slot, value) if std::mem::discriminant(slot) == std::mem::discriminant(&value) => {
                *slot = value
            }
            (slot, value) => {
                return Err(Error::config(
                    here,
                    format!("expected {}, found {}", type_name(slot), type_name(&value)),
                ))
            }
        }
    }
    Ok(())
}

fn defaults_for(profile: Profile) -> Table {
    let manifest: Table = DEFAULTS_TOML.parse().expect("shipped defaults manifest parses");
    match manifest.get(profile.key()) {
        Some(Value::Table(t)) => t.clone(),
        _ => panic!("defaults manifest lacks profile {}", profile.key()),
    }
}

impl RunConfig {
    /// Fully defaulted configuration of a profile.
    pub fn defaults(profile: Profile) -> Self {
        Value::Table(defaults_for(profile))
            .try_into()
            .expect("shipped defaults deserialize")
    }

    /// Parses, defaults and validates config text.
    pub fn from_toml(text: &str) -> Result<Self> {
        let user: Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config("<document>", e.message().to_string()))?;
        let profile = match user.get("profile") {
            None => Profile::Desk,
            Some(Value::String(s)) if s == "desk" => Profile::Desk,
            Some(Value::String(s)) if s == "paper" => Profile::Paper,
            Some(v) => {
                return Err(Error::config(
                    "profile",
                    format!("expected \"desk\" or \"paper\", found {v}"),
                ))
            }
        };
        let mut merged = defaults_for(profile);
        // camera tables switch shape with their kind; replace them whole
        if let Some(Value::Table(synth)) = user.get("synth") {
            for cam in ["source_camera", "target_camera"] {
                if let Some(Value::Table(c)) = synth.get(cam) {
                    if c.contains_key("kind") {
                        if let Some(Value::Table(ms)) = merged.get_mut("synth") {
                            ms.insert(cam.into(), Value::Table(c.clone()));
                        }
                    }
                }
            }
        }
        overlay(&mut merged, user, "")?;
        let cfg: RunConfig = Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config("<document>", e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config { path: key, message } => Error::Config {
                path: key,
                message: format!("{message} (in {})", path.display()),
            },
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        for site in [Site::Output, Site::Feature] {
            let sc = self.adaptation.site(site);
            let key = format!("adaptation.{}", site.name());
            sc.mechanism.check_site(site)?;
            for (name, v) in [("lambda_adv", sc.lambda_adv), ("lambda_seg", sc.lambda_seg)] {
                if !(v.is_finite() && v >= 0.0) {
                    return Err(Error::config(
                        format!("{key}.{name}"),
                        format!("must be a finite value ≥ 0, got {v}"),
                    ));
                }
            }
        }
        let t = &self.train;
        if t.max_iter < 1 {
            return Err(Error::config("train.max_iter", "must be at least 1"));
        }
        if t.batch_size < 1 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if t.checkpoint_every < 1 {
            return Err(Error::config("train.checkpoint_every", "must be at least 1"));
        }
        for (name, v) in [
            ("g_base_lr", t.g_base_lr),
            ("g_momentum", t.g_momentum),
            ("g_weight_decay", t.g_weight_decay),
            ("d_base_lr", t.d_base_lr),
            ("lr_power", t.lr_power),
            ("rcdam_stage2_seg_weight", t.rcdam_stage2_seg_weight),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(
                    format!("train.{name}"),
                    format!("must be a finite value ≥ 0, got {v}"),
                ));
            }
        }
        for (name, v) in [("d_beta1", t.d_beta1), ("d_beta2", t.d_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(format!("train.{name}"), "must lie in [0, 1)"));
            }
        }
        for (name, [w, h]) in [
            ("train.source_size", t.source_size),
            ("train.target_size", t.target_size),
            ("eval.size", self.eval.size),
        ] {
            if w == 0 || h == 0 || w % OUTPUT_STRIDE != 0 || h % OUTPUT_STRIDE != 0 {
                return Err(Error::config(
                    name,
                    format!("{w}x{h} must be non-empty and divisible by {OUTPUT_STRIDE}"),
                ));
            }
        }
        if self.model.disc_width == 0 {
            return Err(Error::config("model.disc_width", "must be positive"));
        }
        if !self.model.adam_gamma_init.is_finite() {
            return Err(Error::config("model.adam_gamma_init", "must be finite"));
        }
        self.model.arch().validate()?;
        if self.synth.complexity < 1 {
            return Err(Error::config("synth.complexity", "must be at least 1"));
        }
        for (name, cam, panoramic) in [
            ("synth.source_camera", &self.synth.source_camera, false),
            ("synth.target_camera", &self.synth.target_camera, true),
        ] {
            cam.validate()
                .map_err(|e| Error::config(name, e.to_string()))?;
            if cam.is_panoramic() != panoramic {
                return Err(Error::config(
                    name,
                    if panoramic {
                        "target camera must be equirectangular"
                    } else {
                        "source camera must be a pinhole camera"
                    },
                ));
            }
        }
        Ok(())
    }

    /// Record stored in checkpoints; loading requires an exact match.
    pub fn arch_record(&self) -> serde_json::Value {
        serde_json::json!({
            "model": self.model,
            "adaptation": {
                "da1": self.adaptation.da1.mechanism,
                "da2": self.adaptation.da2.mechanism,
            },
        })
    }
}
