//! The assembled two-branch model: parameter layout, initialization and the
//! batched forward pass from standardized images to descriptors.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::backbone::{self, Branch};
use crate::cmi;
use crate::config::ModelConfig;
use crate::data::PreparedPair;
use crate::error::{Error, Result};
use crate::gkst::{self, RecurrenceVars, StepRecord};
use crate::objectives::DESCRIPTOR_EPS;
use crate::params::{initialize, Binder, ParamSpec, ParamStore};
use crate::tensor::Tensor;

/// Every learnable tensor of `cfg`, in initialization order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut specs = backbone::param_specs(cfg, Branch::Ground);
    specs.extend(backbone::param_specs(cfg, Branch::Aerial));
    specs.extend(gkst::param_specs(cfg));
    specs.extend(cmi::param_specs(cfg));
    specs
}

/// A stack of standardized inputs, `[B, 3, H, W]` per branch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub ground: Tensor,
    pub aerial: Tensor,
}

impl Batch {
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = &'a PreparedPair>, cfg: &ModelConfig) -> Result<Self> {
        let (mut ground, mut aerial, mut n) = (Vec::new(), Vec::new(), 0);
        let [gh, gw] = cfg.ground_input;
        let [ah, aw] = cfg.aerial_input;
        for p in pairs {
            if p.ground.len() != 3 * gh * gw || p.aerial.len() != 3 * ah * aw {
                return Err(Error::Shape(format!(
                    "prepared pair does not match the configured 3×{gh}×{gw} / 3×{ah}×{aw} inputs"
                )));
            }
            ground.extend_from_slice(&p.ground);
            aerial.extend_from_slice(&p.aerial);
            n += 1;
        }
        if n == 0 {
            return Err(Error::Data("empty batch".into()));
        }
        Ok(Self {
            ground: Tensor::new([n, 3, gh, gw], ground)?,
            aerial: Tensor::new([n, 3, ah, aw], aerial)?,
        })
    }

    pub fn len(&self) -> usize {
        self.ground.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub(crate) struct ForwardVars {
    /// `[B, D]` L2-normalized descriptors per branch.
    pub descriptors: [Var; 2],
    pub recurrence: Option<RecurrenceVars>,
}

/// Records the forward pass of `batch` on `g`.
pub(crate) fn forward_var(
    g: &mut Graph,
    params: &mut Binder,
    cfg: &ModelConfig,
    batch: &Batch,
) -> Result<ForwardVars> {
    let inputs = [g.constant(batch.ground.clone()), g.constant(batch.aerial.clone())];
    let mut features = inputs;
    for branch in Branch::BOTH {
        let i = branch.index();
        features[i] = backbone::tower(g, params, cfg, branch, inputs[i])?;
    }
    let (maps, recurrence) = if cfg.transformer_enabled {
        let f0 = features.map(|f| backbone::add_positional_encoding_var(g, f));
        let r = gkst::recurrent_var(g, params, cfg, f0)?;
        (r.output, Some(r))
    } else {
        (features, None)
    };
    let n = batch.len();
    let descriptors = maps.map(|m| {
        let flat = g.reshape(m, &[n, cfg.feature_len()]);
        g.l2_normalize(flat, DESCRIPTOR_EPS)
    });
    for branch in Branch::BOTH {
        g.set_label(descriptors[branch.index()], format!("descriptor.{}", branch.name()));
    }
    Ok(ForwardVars { descriptors, recurrence })
}

/// Descriptors and recurrence trace of one forward pass.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// Row-major `[B, D]` descriptors per branch.
    pub ground: Vec<Vec<f64>>,
    pub aerial: Vec<Vec<f64>>,
    /// Per-item recurrence trace; empty for the backbone-only variant.
    pub traces: Vec<Vec<StepRecord>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    pub fn new(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        for spec in param_specs(&config) {
            let t = params.get(&spec.name)?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::Shape(format!(
                    "parameter `{}` has shape {:?}, config expects {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::init_with_rng(config, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn init_with_rng(config: ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let params = initialize(&param_specs(&config), rng);
        Ok(Self { config, params })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_elements()
    }

    pub fn encode(&self, batch: &Batch) -> Result<Encoded> {
        let mut g = Graph::new();
        let mut binder = Binder::new(&self.params, false);
        let fwd = forward_var(&mut g, &mut binder, &self.config, batch)?;
        let rows = |v: Var| -> Vec<Vec<f64>> {
            g.value(v).data().chunks(self.config.feature_len()).map(<[f64]>::to_vec).collect()
        };
        let traces = match &fwd.recurrence {
            Some(r) => (0..batch.len())
                .map(|i| gkst::step_records(&g, r, self.config.heads, i))
                .collect::<Result<_>>()?,
            None => Vec::new(),
        };
        Ok(Encoded {
            ground: rows(fwd.descriptors[0]),
            aerial: rows(fwd.descriptors[1]),
            traces,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::cmi_variants;

    fn toy_batch(cfg: &ModelConfig, n: usize) -> Batch {
        let [h, w] = cfg.ground_input;
        let t = |s: f64| Tensor::from_fn([n, 3, h, w], |i| ((i as f64) * s).sin());
        Batch { ground: t(0.37), aerial: t(0.11) }
    }

    #[test]
    fn descriptors_are_unit_rows() {
        let model = Model::init(ModelConfig::toy(), 0).unwrap();
        let enc = model.encode(&toy_batch(&model.config, 3)).unwrap();
        assert_eq!(enc.ground.len(), 3);
        for row in enc.ground.iter().chain(&enc.aerial) {
            assert_eq!(row.len(), 40);
            let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9);
        }
        assert_eq!(enc.traces.len(), 3);
        assert_eq!(enc.traces[0].len(), model.config.steps);
    }

    #[test]
    fn every_variant_runs() {
        for v in cmi_variants(&ModelConfig::toy()) {
            let model = Model::init(v.model, 1).unwrap();
            let enc = model.encode(&toy_batch(&model.config, 2)).unwrap();
            assert_eq!(enc.aerial.len(), 2, "{}", v.name);
        }
    }

    #[test]
    fn new_checks_param_shapes() {
        let model = Model::init(ModelConfig::toy(), 2).unwrap();
        let mut params = model.params.clone();
        params.insert("backbone.ground.mix.bias", Tensor::zeros([3]));
        assert!(matches!(Model::new(model.config.clone(), params), Err(Error::Shape(_))));
        assert!(Model::new(model.config, model.params).is_ok());
    }
}
