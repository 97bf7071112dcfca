//! Named parameter tensors, their initialization, and the named-tensor archive.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use safetensors::tensor::{Dtype, SafeTensors, View};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Key under which archive metadata is stored. A single key keeps the
/// serialized header byte-stable.
const METADATA_KEY: &str = "cvgl";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// A copy with every tensor whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Overwrites parameters with externally trained tensors of matching
    /// name and shape. Returns the names that were replaced; names that do
    /// not exist in `self` are an error so typos surface immediately.
    pub fn import(&mut self, weights: &ParamStore) -> Result<Vec<String>> {
        let mut replaced = Vec::new();
        for (name, t) in weights.iter() {
            let slot = self.get_mut(name)?;
            if slot.shape() != t.shape() {
                return Err(Error::Shape(format!(
                    "imported `{name}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
            replaced.push(name.to_string());
        }
        Ok(replaced)
    }

    /// Serializes the store (plus optional metadata string) as a named-tensor archive.
    pub fn to_archive_bytes(&self, metadata: Option<&str>) -> Result<Vec<u8>> {
        let views: Vec<(&str, F64View)> = self
            .tensors
            .iter()
            .map(|(k, v)| (k.as_str(), F64View(v)))
            .collect();
        let info = metadata.map(|m| HashMap::from([(METADATA_KEY.to_string(), m.to_string())]));
        safetensors::serialize(views, info).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_archive_bytes(bytes: &[u8]) -> Result<(ParamStore, Option<String>)> {
        let err = |e: safetensors::SafeTensorError| Error::Checkpoint(e.to_string());
        let (_, meta) = SafeTensors::read_metadata(bytes).map_err(err)?;
        let metadata = meta
            .metadata()
            .as_ref()
            .and_then(|m| m.get(METADATA_KEY).cloned());
        let archive = SafeTensors::deserialize(bytes).map_err(err)?;
        let mut store = ParamStore::new();
        for (name, view) in archive.tensors() {
            if view.dtype() != Dtype::F64 {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has dtype {:?}, expected F64",
                    view.dtype()
                )));
            }
            let data = view
                .data()
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            store.insert(name, Tensor::new(view.shape().to_vec(), data)?);
        }
        Ok((store, metadata))
    }

    pub fn save(&self, path: &Path, metadata: Option<&str>) -> Result<()> {
        let bytes = self.to_archive_bytes(metadata)?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(ParamStore, Option<String>)> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_archive_bytes(&bytes)
    }

    /// Rounds every value to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        for t in self.tensors.values_mut() {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

struct F64View<'a>(&'a Tensor);

impl View for F64View<'_> {
    fn dtype(&self) -> Dtype {
        Dtype::F64
    }

    fn shape(&self) -> &[usize] {
        self.0.shape()
    }

    fn data(&self) -> Cow<'_, [u8]> {
        Cow::Owned(self.0.data().iter().flat_map(|v| v.to_le_bytes()).collect())
    }

    fn data_len(&self) -> usize {
        self.0.len() * 8
    }
}

/// How a parameter tensor is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with std `sqrt(2 / fan_in)`.
    HeNormal { fan_in: usize },
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    XavierUniform { fan_in: usize, fan_out: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: impl Into<Vec<usize>>, init: Init) -> Self {
        Self {
            name: name.into(),
            shape: shape.into(),
            init,
        }
    }

    pub fn num_elements(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Materializes `specs` in order, drawing random values from `rng`.
pub fn initialize(specs: &[ParamSpec], rng: &mut impl Rng) -> ParamStore {
    let mut store = ParamStore::new();
    for spec in specs {
        let n = spec.num_elements();
        let data: Vec<f64> = match spec.init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::HeNormal { fan_in } => {
                let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
                (0..n).map(|_| dist.sample(rng)).collect()
            }
            Init::XavierUniform { fan_in, fan_out } => {
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let dist = Uniform::new_inclusive(-a, a).unwrap();
                (0..n).map(|_| dist.sample(rng)).collect()
            }
        };
        store.insert(spec.name.clone(), Tensor::new(spec.shape.clone(), data).unwrap());
    }
    store
}

/// Lazily records parameters from a [`ParamStore`] as graph leaves.
pub struct Binder<'s> {
    store: &'s ParamStore,
    vars: BTreeMap<String, Var>,
    requires_grad: bool,
}

impl<'s> Binder<'s> {
    pub fn new(store: &'s ParamStore, requires_grad: bool) -> Self {
        Self {
            store,
            vars: BTreeMap::new(),
            requires_grad,
        }
    }

    pub fn get(&mut self, g: &mut Graph, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let t = self.store.get(name)?.clone();
        let v = g.leaf(t, self.requires_grad);
        g.set_label(v, name);
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// Every parameter bound so far, by name.
    pub fn bound(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_store() -> ParamStore {
        let specs = vec![
            ParamSpec::new("b.weight", [3, 2], Init::XavierUniform { fan_in: 2, fan_out: 3 }),
            ParamSpec::new("a.bias", [3], Init::Zeros),
            ParamSpec::new("c.kernel", [2, 1, 3, 3], Init::HeNormal { fan_in: 9 }),
        ];
        initialize(&specs, &mut ChaCha8Rng::seed_from_u64(3))
    }

    #[test]
    fn archive_round_trip_is_byte_stable() {
        let store = sample_store();
        let bytes = store.to_archive_bytes(Some("{\"epoch\":3}")).unwrap();
        let (back, meta) = ParamStore::from_archive_bytes(&bytes).unwrap();
        assert_eq!(back, store);
        assert_eq!(meta.as_deref(), Some("{\"epoch\":3}"));
        assert_eq!(back.to_archive_bytes(meta.as_deref()).unwrap(), bytes);
    }

    #[test]
    fn import_rejects_unknown_and_misshapen() {
        let mut store = sample_store();
        let mut w = ParamStore::new();
        w.insert("a.bias", Tensor::full([3], 0.5));
        assert_eq!(store.import(&w).unwrap(), vec!["a.bias".to_string()]);
        assert_eq!(store.get("a.bias").unwrap().data(), &[0.5; 3]);

        let mut bad = ParamStore::new();
        bad.insert("a.bias", Tensor::zeros([4]));
        assert!(matches!(store.import(&bad), Err(Error::Shape(_))));
        let mut unknown = ParamStore::new();
        unknown.insert("nope", Tensor::zeros([1]));
        assert!(matches!(store.import(&unknown), Err(Error::MissingParam(_))));
    }

    #[test]
    fn initialization_is_seed_deterministic() {
        assert_eq!(sample_store(), sample_store());
    }
}
