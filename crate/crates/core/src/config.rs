//! Model and training configuration, presets and ablation variants.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One convolution of the backbone tower (3×3 kernel, padding 1, ReLU).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvLayer {
    pub out_channels: usize,
    pub stride: usize,
}

impl ConvLayer {
    pub const fn new(out_channels: usize, stride: usize) -> Self {
        Self { out_channels, stride }
    }
}

pub const KERNEL_SIZE: usize = 3;
pub const KERNEL_PAD: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl TryFrom<u32> for Precision {
    type Error = String;

    fn try_from(bits: u32) -> std::result::Result<Self, String> {
        match bits {
            32 => Ok(Precision::F32),
            64 => Ok(Precision::F64),
            other => Err(format!("precision must be 32 or 64, got {other}")),
        }
    }
}

impl From<Precision> for u32 {
    fn from(p: Precision) -> u32 {
        match p {
            Precision::F32 => 32,
            Precision::F64 => 64,
        }
    }
}

impl Serialize for Precision {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_u32((*self).into())
    }
}

impl<'de> Deserialize<'de> for Precision {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let bits = u32::deserialize(d)?;
        Precision::try_from(bits).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Feature channels `c`.
    pub channels: usize,
    /// Feature height `h`; height averaging makes this 1.
    pub height: usize,
    /// Feature width `w`, the number of attention tokens.
    pub width: usize,
    pub heads: usize,
    /// Recurrent steps `L`.
    pub steps: usize,
    pub latent_dim: usize,
    pub backbone: Vec<ConvLayer>,
    /// Ground panorama `[height, width]` fed to the ground tower.
    pub ground_input: [usize; 2],
    /// Aerial `[height, width]` fed to the aerial tower (after the polar transform).
    pub aerial_input: [usize; 2],
    pub polar_transform: bool,
    /// Run the recurrent cross-attention stack; off is the backbone-only model.
    pub transformer_enabled: bool,
    /// Knowledge comes from the generators; off falls back to the branch's own
    /// normalized features (the "w/o CMI" ablation).
    pub cmi_enabled: bool,
    /// Multiply generator outputs by zero, decoupling the branches.
    pub zero_knowledge: bool,
    pub shared_generators: bool,
    pub shared_attention: bool,
    pub output_projection: bool,
    pub stop_gradient_targets: bool,
    /// `F = F' + LN(F')`; off uses `F = LN(F')`.
    pub additive_norm: bool,
    pub layer_norm_eps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub lambda: f64,
    pub gamma: f64,
    pub precision: Precision,
    pub checkpoint_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub preset: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

pub const PRESETS: [&str; 2] = ["toy", "paper"];

/// VGG-16 convolution widths, one stride-2 conv opening each of the last four stages.
const VGG16_TOWER: [ConvLayer; 13] = [
    ConvLayer::new(64, 1),
    ConvLayer::new(64, 1),
    ConvLayer::new(128, 2),
    ConvLayer::new(128, 1),
    ConvLayer::new(256, 2),
    ConvLayer::new(256, 1),
    ConvLayer::new(256, 1),
    ConvLayer::new(512, 2),
    ConvLayer::new(512, 1),
    ConvLayer::new(512, 1),
    ConvLayer::new(512, 2),
    ConvLayer::new(512, 1),
    ConvLayer::new(512, 1),
];

impl ModelConfig {
    pub fn toy() -> Self {
        Self {
            channels: 8,
            height: 1,
            width: 5,
            heads: 2,
            steps: 2,
            latent_dim: 10,
            backbone: vec![ConvLayer::new(8, 2), ConvLayer::new(8, 2), ConvLayer::new(8, 2)],
            ground_input: [16, 40],
            aerial_input: [16, 40],
            ..Self::paper()
        }
    }

    pub fn paper() -> Self {
        Self {
            channels: 384,
            height: 1,
            width: 20,
            heads: 6,
            steps: 6,
            latent_dim: 384 * 20 / 4,
            backbone: VGG16_TOWER.to_vec(),
            ground_input: [128, 320],
            aerial_input: [128, 320],
            polar_transform: true,
            transformer_enabled: true,
            cmi_enabled: true,
            zero_knowledge: false,
            shared_generators: true,
            shared_attention: false,
            output_projection: true,
            stop_gradient_targets: true,
            additive_norm: true,
            layer_norm_eps: 1e-6,
        }
    }

    /// Flattened feature length `c·h·w`.
    pub fn feature_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn head_dim(&self) -> usize {
        self.channels * self.height / self.heads
    }

    /// Whether the generators exist and feed the attention.
    pub fn uses_generators(&self) -> bool {
        self.transformer_enabled && self.cmi_enabled
    }

    /// Tower output `[height, width]` for an input of `size`.
    pub fn tower_output(&self, size: [usize; 2]) -> [usize; 2] {
        self.backbone.iter().fold(size, |[h, w], layer| {
            let out = |d: usize| (d + 2 * KERNEL_PAD - KERNEL_SIZE) / layer.stride + 1;
            [out(h), out(w)]
        })
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.channels", self.channels),
            ("model.height", self.height),
            ("model.width", self.width),
            ("model.heads", self.heads),
            ("model.steps", self.steps),
            ("model.latent_dim", self.latent_dim),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be ≥ 1"));
            }
        }
        if self.height != 1 {
            return Err(Error::config("model.height", "height averaging yields h = 1"));
        }
        if self.channels % self.heads != 0 {
            return Err(Error::config(
                "model.heads",
                format!(
                    "channels ({}) must be divisible by heads ({})",
                    self.channels, self.heads
                ),
            ));
        }
        if self.backbone.is_empty() {
            return Err(Error::config("model.backbone", "needs at least one conv layer"));
        }
        for (i, layer) in self.backbone.iter().enumerate() {
            if layer.out_channels == 0 || layer.stride == 0 {
                return Err(Error::config(
                    format!("model.backbone[{i}]"),
                    "out_channels and stride must be ≥ 1",
                ));
            }
        }
        for (key, size) in [("model.ground_input", self.ground_input), ("model.aerial_input", self.aerial_input)] {
            if size[0] == 0 || size[1] == 0 {
                return Err(Error::config(key, "dimensions must be ≥ 1"));
            }
            let out = self.tower_output(size);
            if out[1] != self.width {
                return Err(Error::config(
                    key,
                    format!(
                        "backbone maps width {} to {}, but model.width is {}",
                        size[1], out[1], self.width
                    ),
                ));
            }
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(Error::config("model.layer_norm_eps", "must be > 0"));
        }
        Ok(())
    }
}

impl TrainConfig {
    pub fn toy() -> Self {
        Self {
            lr: 1e-3,
            epochs: 200,
            ..Self::paper()
        }
    }

    pub fn paper() -> Self {
        Self {
            lr: 1e-5,
            batch_size: 16,
            epochs: 150,
            seed: 0,
            lambda: 0.05,
            gamma: 10.0,
            precision: Precision::F32,
            checkpoint_every: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.lr", "must be finite and ≥ 0"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("train.batch_size", "must be ≥ 2 so every anchor has a negative"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("train.lambda", "must be finite and ≥ 0"));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::config("train.gamma", "must be finite and > 0"));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::config("train.checkpoint_every", "must be ≥ 1"));
        }
        // TOML integers are signed 64-bit.
        if i64::try_from(self.seed).is_err() {
            return Err(Error::config("train.seed", format!("must be ≤ {}", i64::MAX)));
        }
        Ok(())
    }
}

impl Config {
    pub fn preset(name: &str) -> Result<Self> {
        let (model, train) = match name {
            "toy" => (ModelConfig::toy(), TrainConfig::toy()),
            "paper" => (ModelConfig::paper(), TrainConfig::paper()),
            other => {
                return Err(Error::config(
                    "preset",
                    format!("unknown preset `{other}` (expected one of {PRESETS:?})"),
                ))
            }
        };
        Ok(Self {
            preset: name.to_string(),
            model,
            train,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    /// Parses a TOML document. Keys absent from the document take the
    /// values of its `preset` (default `toy`); unknown keys are rejected.
    pub fn parse(source: &str) -> Result<Self> {
        let doc: toml::Table = source
            .parse()
            .map_err(|e: toml::de::Error| Error::config("<document>", e.message().to_string()))?;
        let preset = match doc.get("preset") {
            None => "toy".to_string(),
            Some(toml::Value::String(s)) => s.clone(),
            Some(_) => return Err(Error::config("preset", "must be a string")),
        };
        let base = Config::preset(&preset)?;
        let mut merged = toml::Table::try_from(&base).expect("config serializes to a table");
        for (key, value) in doc {
            match (merged.get_mut(&key), value) {
                (None, _) => return Err(Error::config(key, "unknown key")),
                (Some(toml::Value::Table(dst)), toml::Value::Table(src)) => {
                    for (k, v) in src {
                        if !dst.contains_key(&k) {
                            return Err(Error::config(format!("{key}.{k}"), "unknown key"));
                        }
                        dst.insert(k, v);
                    }
                }
                (Some(toml::Value::Table(_)), _) => {
                    return Err(Error::config(key, "must be a table"))
                }
                (Some(slot), v) => *slot = v,
            }
        }
        let config: Config = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config("<document>", e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }
}

/// A named model variant from the ablation grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub name: String,
    pub model: ModelConfig,
}

pub const RECURRENCE_SWEEP: [usize; 4] = [1, 3, 6, 9];

/// The three architectures compared with and without cross-modal interaction:
/// backbone only, transformer fed its own features, and the full model.
pub fn cmi_variants(base: &ModelConfig) -> Vec<Variant> {
    let backbone_only = ModelConfig {
        transformer_enabled: false,
        cmi_enabled: false,
        ..base.clone()
    };
    let self_knowledge = ModelConfig {
        transformer_enabled: true,
        cmi_enabled: false,
        ..base.clone()
    };
    let full = ModelConfig {
        transformer_enabled: true,
        cmi_enabled: true,
        ..base.clone()
    };
    vec![
        Variant { name: "backbone_only".into(), model: backbone_only },
        Variant { name: "wo_cmi_self_knowledge".into(), model: self_knowledge },
        Variant { name: "w_cmi".into(), model: full },
    ]
}

/// The full model at each recurrence depth of [`RECURRENCE_SWEEP`].
pub fn recurrence_sweep(base: &ModelConfig, steps: &[usize]) -> Vec<Variant> {
    steps
        .iter()
        .map(|&l| Variant {
            name: format!("w_cmi_L{l}"),
            model: ModelConfig {
                steps: l,
                transformer_enabled: true,
                cmi_enabled: true,
                ..base.clone()
            },
        })
        .collect()
}

/// The complete ablation grid: [`cmi_variants`] followed by the recurrence sweep.
pub fn ablation_variants(base: &ModelConfig) -> Vec<Variant> {
    let mut v = cmi_variants(base);
    v.extend(recurrence_sweep(base, &RECURRENCE_SWEEP));
    v
}
