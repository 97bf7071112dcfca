//! Cross-modal interaction: the G2S and S2G encoder-decoder generators.
//!
//! G2S maps normalized ground features to satellite-like knowledge and S2G
//! the reverse. Both are deterministic: `enc = FC ∘ GELU ∘ FC`,
//! `dec = FC ∘ GELU ∘ FC`, applied to the flattened `c·h·w` map.

use crate::autograd::{Graph, Var};
use crate::backbone::FeatureMap;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{Binder, Init, ParamSpec, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    /// Ground → satellite-like knowledge.
    G2S,
    /// Satellite → ground-like knowledge.
    S2G,
}

impl Direction {
    pub const BOTH: [Direction; 2] = [Direction::G2S, Direction::S2G];

    pub fn name(self) -> &'static str {
        match self {
            Direction::G2S => "g2s",
            Direction::S2G => "s2g",
        }
    }
}

const LAYERS: [&str; 4] = ["enc1", "enc2", "dec1", "dec2"];

pub fn prefix(cfg: &ModelConfig, dir: Direction, step: usize) -> String {
    if cfg.shared_generators {
        format!("cmi.{}", dir.name())
    } else {
        format!("cmi.{}.{step}", dir.name())
    }
}

/// Layer `(name, out, in)` dimensions for a generator on `dim`-long inputs.
fn layer_dims(dim: usize, latent: usize) -> [(&'static str, usize, usize); 4] {
    [
        (LAYERS[0], latent, dim),
        (LAYERS[1], latent, latent),
        (LAYERS[2], latent, latent),
        (LAYERS[3], dim, latent),
    ]
}

pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    if !cfg.uses_generators() {
        return Vec::new();
    }
    let copies = if cfg.shared_generators { 1 } else { cfg.steps };
    let mut specs = Vec::new();
    for dir in Direction::BOTH {
        for step in 0..copies {
            let p = prefix(cfg, dir, step);
            for (name, out, inp) in layer_dims(cfg.feature_len(), cfg.latent_dim) {
                specs.push(ParamSpec::new(
                    format!("{p}.{name}.weight"),
                    [out, inp],
                    Init::XavierUniform { fan_in: inp, fan_out: out },
                ));
                specs.push(ParamSpec::new(format!("{p}.{name}.bias"), [out], Init::Zeros));
            }
        }
    }
    specs
}

/// Multiply-accumulates of one generator forward pass.
pub fn generator_macs(cfg: &ModelConfig) -> u64 {
    layer_dims(cfg.feature_len(), cfg.latent_dim)
        .iter()
        .map(|&(_, o, i)| (o * i) as u64)
        .sum()
}

fn linear(g: &mut Graph, params: &mut Binder, name: &str, x: Var) -> Result<Var> {
    let w = params.get(g, &format!("{name}.weight"))?;
    let b = params.get(g, &format!("{name}.bias"))?;
    if g.shape(w)[1] != g.shape(x)[1] {
        return Err(Error::Shape(format!(
            "`{name}` expects inputs of length {}, got {}",
            g.shape(w)[1],
            g.shape(x)[1]
        )));
    }
    let y = g.matmul(x, w, true);
    Ok(g.add_bias(y, b, 1))
}

/// Generates other-modality knowledge for a `B × c × h × w` map.
pub(crate) fn generate_var(g: &mut Graph, params: &mut Binder, prefix: &str, x: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let dim: usize = shape[1..].iter().product();
    let flat = g.reshape(x, &[shape[0], dim]);
    let h = linear(g, params, &format!("{prefix}.enc1"), flat)?;
    let h = g.gelu(h);
    let z = linear(g, params, &format!("{prefix}.enc2"), h)?;
    let h = linear(g, params, &format!("{prefix}.dec1"), z)?;
    let h = g.gelu(h);
    let out = linear(g, params, &format!("{prefix}.dec2"), h)?;
    if g.shape(out)[1] != dim {
        return Err(Error::Shape(format!(
            "`{prefix}` decodes to length {}, feature maps have {dim}",
            g.shape(out)[1]
        )));
    }
    Ok(g.reshape(out, &shape))
}

/// One fully connected layer: `y = W x + b` with `W` of shape `out × in`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorParams {
    pub enc1: LinearParams,
    pub enc2: LinearParams,
    pub dec1: LinearParams,
    pub dec2: LinearParams,
}

impl GeneratorParams {
    pub fn from_store(store: &ParamStore, prefix: &str) -> Result<Self> {
        let layer = |name: &str| -> Result<LinearParams> {
            Ok(LinearParams {
                weight: store.get(&format!("{prefix}.{name}.weight"))?.clone(),
                bias: store.get(&format!("{prefix}.{name}.bias"))?.clone(),
            })
        };
        Ok(Self {
            enc1: layer("enc1")?,
            enc2: layer("enc2")?,
            dec1: layer("dec1")?,
            dec2: layer("dec2")?,
        })
    }

    pub fn insert_into(&self, store: &mut ParamStore, prefix: &str) {
        for (name, l) in LAYERS.iter().zip([&self.enc1, &self.enc2, &self.dec1, &self.dec2]) {
            store.insert(format!("{prefix}.{name}.weight"), l.weight.clone());
            store.insert(format!("{prefix}.{name}.bias"), l.bias.clone());
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.enc1.weight.shape()[0]
    }
}

/// Synthesizes other-modality knowledge `L` from a normalized map `f`.
pub fn generate_cross_modal(f: &FeatureMap, params: &GeneratorParams) -> Result<FeatureMap> {
    let mut store = ParamStore::new();
    params.insert_into(&mut store, "gen");
    let mut g = Graph::new();
    let mut binder = Binder::new(&store, false);
    let x = f.to_batch_var(&mut g);
    let out = generate_var(&mut g, &mut binder, "gen", x)?;
    FeatureMap::from_batch(g.value(out), 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::initialize;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_generator(dim: usize, latent: usize, seed: u64) -> GeneratorParams {
        let specs: Vec<ParamSpec> = layer_dims(dim, latent)
            .iter()
            .flat_map(|&(n, o, i)| {
                [
                    ParamSpec::new(format!("g.{n}.weight"), [o, i], Init::XavierUniform { fan_in: i, fan_out: o }),
                    ParamSpec::new(format!("g.{n}.bias"), [o], Init::Zeros),
                ]
            })
            .collect();
        GeneratorParams::from_store(&initialize(&specs, &mut ChaCha8Rng::seed_from_u64(seed)), "g").unwrap()
    }

    #[test]
    fn output_shape_matches_input() {
        let params = toy_generator(40, 10, 0);
        let f = FeatureMap::new(Tensor::from_fn([8, 1, 5], |i| (i as f64).cos())).unwrap();
        assert_eq!(generate_cross_modal(&f, &params).unwrap().shape(), [8, 1, 5]);
    }

    #[test]
    fn zero_in_zero_out_without_biases() {
        let params = toy_generator(40, 10, 1);
        let out = generate_cross_modal(&FeatureMap::zeros(8, 1, 5), &params).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let params = toy_generator(40, 10, 2);
        assert!(matches!(
            generate_cross_modal(&FeatureMap::zeros(4, 1, 5), &params),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn specs_follow_sharing_flag() {
        let mut cfg = ModelConfig::toy();
        assert_eq!(param_specs(&cfg).len(), 2 * 8);
        cfg.shared_generators = false;
        assert_eq!(param_specs(&cfg).len(), 2 * 8 * cfg.steps);
        cfg.cmi_enabled = false;
        assert!(param_specs(&cfg).is_empty());
    }
}
