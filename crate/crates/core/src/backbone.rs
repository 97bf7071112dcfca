//! Modality-independent feature extraction: one conv tower per branch,
//! height averaging, pointwise channel mixing, positional encoding and
//! channel-wise layer normalization.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::config::{ModelConfig, KERNEL_PAD, KERNEL_SIZE};
use crate::error::{Error, Result};
use crate::params::{Binder, Init, ParamSpec, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Ground,
    Aerial,
}

impl Branch {
    pub const BOTH: [Branch; 2] = [Branch::Ground, Branch::Aerial];

    pub fn name(self) -> &'static str {
        match self {
            Branch::Ground => "ground",
            Branch::Aerial => "aerial",
        }
    }

    pub fn other(self) -> Branch {
        match self {
            Branch::Ground => Branch::Aerial,
            Branch::Aerial => Branch::Ground,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// A `c × h × w` feature map with finite entries.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap(Tensor);

impl FeatureMap {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.shape().len() != 3 {
            return Err(Error::Shape(format!("feature map must be c×h×w, got {:?}", t.shape())));
        }
        if !t.is_finite() {
            return Err(Error::NonFinite { tensor: "feature map".into() });
        }
        Ok(Self(t))
    }

    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self(Tensor::zeros([c, h, w]))
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels(), self.height(), self.width()]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn data(&self) -> &[f64] {
        self.0.data()
    }

    pub fn get(&self, c: usize, h: usize, w: usize) -> f64 {
        self.0.data()[(c * self.height() + h) * self.width() + w]
    }

    /// Record as a `1 × c × h × w` graph constant.
    pub(crate) fn to_batch_var(&self, g: &mut Graph) -> Var {
        let t = self.0.clone().reshaped([1, self.channels(), self.height(), self.width()]).unwrap();
        g.constant(t)
    }

    /// Read item 0 of a `B × c × h × w` graph value.
    pub(crate) fn from_batch(t: &Tensor, item: usize) -> Result<Self> {
        let s = t.shape();
        let n = s[1] * s[2] * s[3];
        let data = t.data()[item * n..(item + 1) * n].to_vec();
        Self::new(Tensor::new([s[1], s[2], s[3]], data)?)
    }
}

pub fn prefix(branch: Branch) -> String {
    format!("backbone.{}", branch.name())
}

pub fn param_specs(cfg: &ModelConfig, branch: Branch) -> Vec<ParamSpec> {
    let p = prefix(branch);
    let mut specs = Vec::new();
    let mut cin = 3;
    for (i, layer) in cfg.backbone.iter().enumerate() {
        let fan_in = cin * KERNEL_SIZE * KERNEL_SIZE;
        specs.push(ParamSpec::new(
            format!("{p}.conv{i}.weight"),
            [layer.out_channels, cin, KERNEL_SIZE, KERNEL_SIZE],
            Init::HeNormal { fan_in },
        ));
        specs.push(ParamSpec::new(format!("{p}.conv{i}.bias"), [layer.out_channels], Init::Zeros));
        cin = layer.out_channels;
    }
    specs.push(ParamSpec::new(
        format!("{p}.mix.weight"),
        [cfg.channels, cin, 1, 1],
        Init::XavierUniform { fan_in: cin, fan_out: cfg.channels },
    ));
    specs.push(ParamSpec::new(format!("{p}.mix.bias"), [cfg.channels], Init::Zeros));
    specs
}

/// Multiply-accumulates of one tower forward pass for a single image.
pub fn tower_macs(cfg: &ModelConfig, branch: Branch) -> u64 {
    let mut size = match branch {
        Branch::Ground => cfg.ground_input,
        Branch::Aerial => cfg.aerial_input,
    };
    let mut cin = 3u64;
    let mut macs = 0u64;
    for layer in &cfg.backbone {
        size = ModelConfig { backbone: vec![*layer], ..cfg.clone() }.tower_output(size);
        let out_positions = (size[0] * size[1]) as u64;
        macs += out_positions * layer.out_channels as u64 * cin * (KERNEL_SIZE * KERNEL_SIZE) as u64;
        cin = layer.out_channels as u64;
    }
    macs + (cfg.width as u64) * cin * cfg.channels as u64
}

/// Tower → height mean → 1×1 channel mixing, on a `B × 3 × H × W` input.
pub(crate) fn tower(
    g: &mut Graph,
    params: &mut Binder,
    cfg: &ModelConfig,
    branch: Branch,
    input: Var,
) -> Result<Var> {
    let expected = match branch {
        Branch::Ground => cfg.ground_input,
        Branch::Aerial => cfg.aerial_input,
    };
    let s = g.shape(input);
    if s.len() != 4 || s[1] != 3 || [s[2], s[3]] != expected {
        return Err(Error::Shape(format!(
            "{} branch expects 3×{}×{} input, got {:?}",
            branch.name(),
            expected[0],
            expected[1],
            &s[1..]
        )));
    }
    let p = prefix(branch);
    let mut x = input;
    for (i, layer) in cfg.backbone.iter().enumerate() {
        let w = params.get(g, &format!("{p}.conv{i}.weight"))?;
        let b = params.get(g, &format!("{p}.conv{i}.bias"))?;
        let y = g.conv2d(x, w, b, layer.stride, KERNEL_PAD);
        x = g.relu(y);
    }
    let pooled = g.mean_axis(x, 2);
    let w = params.get(g, &format!("{p}.mix.weight"))?;
    let b = params.get(g, &format!("{p}.mix.bias"))?;
    let out = g.conv2d(pooled, w, b, 1, 0);
    g.set_label(out, format!("features.{}", branch.name()));
    Ok(out)
}

/// Fixed sinusoidal table over the width axis: channel `2k` holds
/// `sin(pos / 10000^(2k/c))`, channel `2k + 1` the matching cosine; rows
/// repeat across height.
pub fn positional_encoding(c: usize, h: usize, w: usize) -> Tensor {
    Tensor::from_fn([c, h, w], |i| {
        let ch = i / (h * w);
        let pos = (i % w) as f64;
        let pair = (ch / 2) as f64;
        let angle = pos / 10000f64.powf(2.0 * pair / c as f64);
        if ch % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

pub(crate) fn add_positional_encoding_var(g: &mut Graph, x: Var) -> Var {
    let s = g.shape(x).to_vec();
    let table = positional_encoding(s[1], s[2], s[3]);
    let per_item = table.len();
    let tiled = Tensor::from_fn(s.clone(), |i| table.data()[i % per_item]);
    let pe = g.constant(tiled);
    g.add(x, pe)
}

/// Runs one branch tower on a standardized `3 × H × W` input (see
/// [`crate::data::prepare_ground`] and [`crate::data::prepare_aerial`]).
pub fn extract_features(
    input: &Tensor,
    branch: Branch,
    params: &ParamStore,
    cfg: &ModelConfig,
) -> Result<FeatureMap> {
    let s = input.shape();
    if s.len() != 3 {
        return Err(Error::Shape(format!(
            "{} branch expects a 3×H×W input, got {:?}",
            branch.name(),
            s
        )));
    }
    let mut g = Graph::new();
    let mut binder = Binder::new(params, false);
    let x = g.constant(input.clone().reshaped([1, s[0], s[1], s[2]])?);
    let out = tower(&mut g, &mut binder, cfg, branch, x)?;
    FeatureMap::from_batch(g.value(out), 0)
}

pub fn add_positional_encoding(f: &FeatureMap) -> FeatureMap {
    let [c, h, w] = f.shape();
    let mut t = f.tensor().clone();
    t.add_assign(&positional_encoding(c, h, w));
    FeatureMap(t)
}

/// Normalizes across channels at every spatial location, then applies the
/// per-channel affine `gain`/`bias`.
pub fn layer_norm(f: &FeatureMap, gain: &[f64], bias: &[f64], eps: f64) -> Result<FeatureMap> {
    let c = f.channels();
    if gain.len() != c || bias.len() != c {
        return Err(Error::Shape(format!(
            "layer norm over {c} channels got gain {} / bias {}",
            gain.len(),
            bias.len()
        )));
    }
    let mut g = Graph::new();
    let x = f.to_batch_var(&mut g);
    let gv = g.constant(Tensor::new([c], gain.to_vec())?);
    let bv = g.constant(Tensor::new([c], bias.to_vec())?);
    let y = g.layer_norm(x, gv, bv, eps);
    FeatureMap::from_batch(g.value(y), 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::initialize;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_params(cfg: &ModelConfig, seed: u64) -> ParamStore {
        let mut specs = param_specs(cfg, Branch::Ground);
        specs.extend(param_specs(cfg, Branch::Aerial));
        initialize(&specs, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn toy_output_shape() {
        let cfg = ModelConfig::toy();
        let params = toy_params(&cfg, 1);
        let input = Tensor::from_fn([3, 16, 40], |i| (i as f64 * 0.37).sin());
        for branch in Branch::BOTH {
            let f = extract_features(&input, branch, &params, &cfg).unwrap();
            assert_eq!(f.shape(), [8, 1, 5]);
        }
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_features() {
        let cfg = ModelConfig::toy();
        let params = toy_params(&cfg, 2);
        let f = extract_features(&Tensor::zeros([3, 16, 40]), Branch::Aerial, &params, &cfg).unwrap();
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_mismatch_names_branch() {
        let cfg = ModelConfig::toy();
        let params = toy_params(&cfg, 3);
        let err = extract_features(&Tensor::zeros([3, 16, 32]), Branch::Aerial, &params, &cfg)
            .unwrap_err()
            .to_string();
        assert!(err.contains("aerial") && err.contains("3×16×40"), "{err}");
    }

    #[test]
    fn positional_encoding_identities() {
        let pe = positional_encoding(6, 1, 4);
        for ch in 0..6 {
            let expected = if ch % 2 == 0 { 0.0 } else { 1.0 };
            assert_eq!(pe.data()[ch * 4], expected);
        }
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let zero = FeatureMap::zeros(6, 1, 4);
        assert_eq!(add_positional_encoding(&zero).tensor(), &pe);
        let f = FeatureMap::new(Tensor::from_fn([6, 1, 4], |i| i as f64 * 0.1)).unwrap();
        let once = add_positional_encoding(&f);
        let twice = add_positional_encoding(&once);
        let diff = Tensor::from_fn([6, 1, 4], |i| twice.data()[i] - once.data()[i]);
        assert!(diff.max_abs_diff(&pe) < 1e-15);
    }

    #[test]
    fn layer_norm_examples() {
        let f = FeatureMap::new(Tensor::full([4, 1, 3], 2.5)).unwrap();
        let y = layer_norm(&f, &[1.0; 4], &[0.0; 4], 1e-6).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let f = FeatureMap::new(Tensor::new([2, 1, 1], vec![1.0, 3.0]).unwrap()).unwrap();
        let y = layer_norm(&f, &[1.0; 2], &[0.0; 2], 1e-15).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-12 && (y.data()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn paper_preset_output_shape() {
        let cfg = ModelConfig::paper();
        assert_eq!(cfg.tower_output(cfg.ground_input), [8, 20]);
        assert_eq!(cfg.tower_output(cfg.aerial_input), [8, 20]);
        let conv: usize = param_specs(&cfg, Branch::Ground)
            .iter()
            .filter(|s| s.name.contains(".conv"))
            .map(ParamSpec::num_elements)
            .sum();
        // VGG-16 convolution stack
        assert_eq!(conv, 14_714_688);
    }
}
