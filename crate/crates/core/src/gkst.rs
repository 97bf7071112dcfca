//! Knowledge-supported cross-attention: queries from a branch's own
//! normalized features, keys and values from generated cross-modal
//! knowledge, then the residual/normalization update and its recurrence.
//!
//! Tokens are the `w` width columns of a `c × h × w` map, each a `c·h`
//! vector. Projections are stored `in × out` and applied as `X·W`; head `i`
//! owns output columns `i·d .. (i+1)·d` with `d = c·h / n`.

use std::io::Write;

use serde::Serialize;

use crate::autograd::{Graph, Var};
use crate::backbone::{Branch, FeatureMap};
use crate::cmi::{self, Direction};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{Binder, Init, ParamSpec, ParamStore};
use crate::tensor::Tensor;

pub fn prefix(cfg: &ModelConfig, branch: Branch, step: usize) -> String {
    if cfg.shared_attention {
        format!("gkst.{}.shared", branch.name())
    } else {
        format!("gkst.{}.{step}", branch.name())
    }
}

/// Attention and normalization parameters of every recurrent step.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    if !cfg.transformer_enabled {
        return Vec::new();
    }
    let copies = if cfg.shared_attention { 1 } else { cfg.steps };
    let (c, dim) = (cfg.channels, cfg.channels * cfg.height);
    let mut specs = Vec::new();
    for branch in Branch::BOTH {
        for step in 0..copies {
            let p = prefix(cfg, branch, step);
            specs.push(ParamSpec::new(format!("{p}.norm_in.gain"), [c], Init::Ones));
            specs.push(ParamSpec::new(format!("{p}.norm_in.bias"), [c], Init::Zeros));
            let mut proj = vec!["wq", "wk", "wv"];
            if cfg.output_projection {
                proj.push("wo");
            }
            for name in proj {
                specs.push(ParamSpec::new(
                    format!("{p}.{name}"),
                    [dim, dim],
                    Init::XavierUniform { fan_in: dim, fan_out: dim },
                ));
            }
            specs.push(ParamSpec::new(format!("{p}.norm_out.gain"), [c], Init::Ones));
            specs.push(ParamSpec::new(format!("{p}.norm_out.bias"), [c], Init::Zeros));
        }
    }
    specs
}

/// Multiply-accumulates of one attention block on one item.
pub fn attention_macs(cfg: &ModelConfig) -> u64 {
    let (dim, w) = (cfg.channels as u64 * cfg.height as u64, cfg.width as u64);
    let projections = if cfg.output_projection { 4 } else { 3 };
    projections * w * dim * dim + 2 * w * w * dim
}

/// Splits `[B·w, D]` tokens into `[B·n, w, d]` heads.
fn split_heads(g: &mut Graph, x: Var, batch: usize, w: usize, heads: usize) -> Var {
    let d = g.shape(x)[1] / heads;
    let x = g.reshape(x, &[batch, w, heads, d]);
    let x = g.permute(x, &[0, 2, 1, 3]);
    g.reshape(x, &[batch * heads, w, d])
}

fn check_pair(g: &Graph, intra: Var, knowledge: Var, heads: usize) -> Result<()> {
    let (si, sk) = (g.shape(intra), g.shape(knowledge));
    if si.len() != 4 || si != sk {
        return Err(Error::config(
            "attention inputs",
            format!("intra {si:?} and knowledge {sk:?} must share a B×c×h×w shape"),
        ));
    }
    if heads == 0 || (si[1] * si[2]) % heads != 0 {
        return Err(Error::config(
            "model.heads",
            format!("token width c·h = {} must be divisible by heads ({heads})", si[1] * si[2]),
        ));
    }
    Ok(())
}

/// Multi-head cross-attention on `B × c × h × w` maps. Returns the fused map
/// and the `[B·n, w, w]` attention weights.
pub(crate) fn cross_attention_var(
    g: &mut Graph,
    params: &mut Binder,
    prefix: &str,
    heads: usize,
    output_projection: bool,
    intra: Var,
    knowledge: Var,
) -> Result<(Var, Var)> {
    check_pair(g, intra, knowledge, heads)?;
    let shape = g.shape(intra).to_vec();
    let (batch, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let dim = c * h;
    let d = dim / heads;
    let tokens = |g: &mut Graph, x: Var| {
        let t = g.permute(x, &[0, 3, 1, 2]);
        g.reshape(t, &[batch * w, dim])
    };
    let (xq, xk) = (tokens(g, intra), tokens(g, knowledge));
    let mut project = |g: &mut Graph, name: &str, x: Var| -> Result<Var> {
        let weight = params.get(g, &format!("{prefix}.{name}"))?;
        if g.shape(weight) != [dim, dim] {
            return Err(Error::Shape(format!(
                "`{prefix}.{name}` must be {dim}×{dim}, got {:?}",
                g.shape(weight)
            )));
        }
        Ok(g.matmul(x, weight, false))
    };
    let q = project(g, "wq", xq)?;
    let k = project(g, "wk", xk)?;
    let v = project(g, "wv", xk)?;
    let (q, k, v) = (
        split_heads(g, q, batch, w, heads),
        split_heads(g, k, batch, w, heads),
        split_heads(g, v, batch, w, heads),
    );
    let scores = g.bmm(q, k, true);
    let scores = g.scale(scores, 1.0 / (d as f64).sqrt());
    let weights = g.softmax(scores);
    let heads_out = g.bmm(weights, v, false);
    let merged = g.reshape(heads_out, &[batch, heads, w, d]);
    let merged = g.permute(merged, &[0, 2, 1, 3]);
    let mut out = g.reshape(merged, &[batch * w, dim]);
    if output_projection {
        out = project(g, "wo", out)?;
    }
    let out = g.reshape(out, &[batch, w, c, h]);
    Ok((g.permute(out, &[0, 2, 3, 1]), weights))
}

/// Residual update around cross-attention: `F' = MH + intra`, then
/// `F' + LN(F')` under `additive_norm`, `LN(F')` otherwise.
pub(crate) fn update_var(
    g: &mut Graph,
    params: &mut Binder,
    cfg: &ModelConfig,
    prefix: &str,
    intra: Var,
    knowledge: Var,
) -> Result<(Var, Var)> {
    let (mh, weights) =
        cross_attention_var(g, params, prefix, cfg.heads, cfg.output_projection, intra, knowledge)?;
    let residual = g.add(mh, intra);
    let gain = params.get(g, &format!("{prefix}.norm_out.gain"))?;
    let bias = params.get(g, &format!("{prefix}.norm_out.bias"))?;
    let normed = g.layer_norm(residual, gain, bias, cfg.layer_norm_eps);
    let out = if cfg.additive_norm { g.add(residual, normed) } else { normed };
    Ok((out, weights))
}

/// Graph handles recorded at one recurrent step.
#[derive(Clone, Debug)]
pub(crate) struct StepVars {
    /// `LN(F̂)` per branch, indexed by [`Branch::index`].
    pub normed: [Var; 2],
    /// Knowledge consumed by each branch: ground reads G2S output, aerial
    /// reads S2G output. `None` unless generators run at this step.
    pub generated: Option<[Var; 2]>,
    pub weights: [Var; 2],
}

#[derive(Clone, Debug)]
pub(crate) struct RecurrenceVars {
    pub output: [Var; 2],
    pub steps: Vec<StepVars>,
}

/// What each branch attends to when generators are not in use.
fn fallback_knowledge(g: &mut Graph, cfg: &ModelConfig, normed: Var) -> Var {
    if cfg.zero_knowledge {
        let shape = g.shape(normed).to_vec();
        g.constant(Tensor::zeros(shape))
    } else {
        normed
    }
}

/// Runs `cfg.steps` recurrent steps from the initial maps `f0[branch]`.
pub(crate) fn recurrent_var(
    g: &mut Graph,
    params: &mut Binder,
    cfg: &ModelConfig,
    f0: [Var; 2],
) -> Result<RecurrenceVars> {
    if cfg.steps == 0 {
        return Err(Error::config("model.steps", "must be ≥ 1"));
    }
    let generators = cfg.uses_generators() && !cfg.zero_knowledge;
    let mut state = f0;
    let mut steps = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut normed = state;
        for branch in Branch::BOTH {
            let p = prefix(cfg, branch, step);
            let gain = params.get(g, &format!("{p}.norm_in.gain"))?;
            let bias = params.get(g, &format!("{p}.norm_in.bias"))?;
            let i = branch.index();
            normed[i] = g.layer_norm(state[i], gain, bias, cfg.layer_norm_eps);
            g.set_label(normed[i], format!("normed.{}.{step}", branch.name()));
        }
        let knowledge = if generators {
            let (gi, ai) = (Branch::Ground.index(), Branch::Aerial.index());
            let l_s = cmi::generate_var(g, params, &cmi::prefix(cfg, Direction::G2S, step), normed[gi])?;
            let l_g = cmi::generate_var(g, params, &cmi::prefix(cfg, Direction::S2G, step), normed[ai])?;
            g.set_label(l_s, format!("knowledge.g2s.{step}"));
            g.set_label(l_g, format!("knowledge.s2g.{step}"));
            let mut k = [l_s; 2];
            k[ai] = l_g;
            Some(k)
        } else {
            None
        };
        let mut weights = state;
        for branch in Branch::BOTH {
            let i = branch.index();
            let kv = match knowledge {
                Some(k) => k[i],
                None => fallback_knowledge(g, cfg, normed[i]),
            };
            let (out, w) = update_var(g, params, cfg, &prefix(cfg, branch, step), normed[i], kv)?;
            state[i] = out;
            weights[i] = w;
        }
        steps.push(StepVars { normed, generated: knowledge, weights });
    }
    Ok(RecurrenceVars { output: state, steps })
}

/// Per-head attention weights over queries × keys; rows sum to one.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights(Tensor);

impl AttentionWeights {
    pub fn new(t: Tensor) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 || s[1] != s[2] {
            return Err(Error::Shape(format!("attention weights must be n×w×w, got {s:?}")));
        }
        Ok(Self(t))
    }

    pub fn heads(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn tokens(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    /// Weights of `query` over all keys for `head`.
    pub fn row(&self, head: usize, query: usize) -> &[f64] {
        let w = self.tokens();
        &self.0.data()[(head * w + query) * w..][..w]
    }

    fn from_batch(t: &Tensor, item: usize, heads: usize) -> Result<Self> {
        let w = t.shape()[1];
        let n = heads * w * w;
        Self::new(Tensor::new([heads, w, w], t.data()[item * n..(item + 1) * n].to_vec())?)
    }
}

/// Parameters of one attention block plus the update's normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub heads: usize,
    /// `D × D` (input × output) query projection; head `i` owns columns `i·d..(i+1)·d`.
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Option<Tensor>,
    pub norm_gain: Vec<f64>,
    pub norm_bias: Vec<f64>,
    pub eps: f64,
    /// `F = F' + LN(F')` when set, `F = LN(F')` otherwise.
    pub additive_norm: bool,
}

impl AttentionParams {
    pub fn from_store(store: &ParamStore, prefix: &str, cfg: &ModelConfig) -> Result<Self> {
        let get = |name: &str| store.get(&format!("{prefix}.{name}")).cloned();
        Ok(Self {
            heads: cfg.heads,
            wq: get("wq")?,
            wk: get("wk")?,
            wv: get("wv")?,
            wo: if cfg.output_projection { Some(get("wo")?) } else { None },
            norm_gain: get("norm_out.gain")?.into_data(),
            norm_bias: get("norm_out.bias")?.into_data(),
            eps: cfg.layer_norm_eps,
            additive_norm: cfg.additive_norm,
        })
    }

    pub fn insert_into(&self, store: &mut ParamStore, prefix: &str) {
        store.insert(format!("{prefix}.wq"), self.wq.clone());
        store.insert(format!("{prefix}.wk"), self.wk.clone());
        store.insert(format!("{prefix}.wv"), self.wv.clone());
        if let Some(wo) = &self.wo {
            store.insert(format!("{prefix}.wo"), wo.clone());
        }
        let c = self.norm_gain.len();
        let vec = |v: &[f64]| Tensor::new([c], v.to_vec()).expect("length matches");
        store.insert(format!("{prefix}.norm_out.gain"), vec(&self.norm_gain));
        store.insert(format!("{prefix}.norm_out.bias"), vec(&self.norm_bias));
    }

    fn config_for(&self, f: &FeatureMap) -> ModelConfig {
        ModelConfig {
            channels: f.channels(),
            height: f.height(),
            width: f.width(),
            heads: self.heads,
            output_projection: self.wo.is_some(),
            additive_norm: self.additive_norm,
            layer_norm_eps: self.eps,
            ..ModelConfig::toy()
        }
    }
}

const SINGLE: &str = "attn";

fn single_block<'a>(
    store: &'a ParamStore,
    params: &AttentionParams,
    intra: &FeatureMap,
    knowledge: &FeatureMap,
) -> (Graph, Binder<'a>, Var, Var, ModelConfig) {
    let mut g = Graph::new();
    let binder = Binder::new(store, false);
    let (qi, kv) = (intra.to_batch_var(&mut g), knowledge.to_batch_var(&mut g));
    (g, binder, qi, kv, params.config_for(intra))
}

fn check_maps(intra: &FeatureMap, knowledge: &FeatureMap, heads: usize) -> Result<()> {
    if intra.shape() != knowledge.shape() {
        return Err(Error::config(
            "attention inputs",
            format!("intra {:?} and knowledge {:?} differ", intra.shape(), knowledge.shape()),
        ));
    }
    if heads == 0 || intra.channels() % heads != 0 {
        return Err(Error::config(
            "model.heads",
            format!("channels ({}) must be divisible by heads ({heads})", intra.channels()),
        ));
    }
    Ok(())
}

/// Fuses `intra` queries with `knowledge` keys/values.
pub fn cross_attention(
    intra: &FeatureMap,
    knowledge: &FeatureMap,
    params: &AttentionParams,
) -> Result<(FeatureMap, AttentionWeights)> {
    check_maps(intra, knowledge, params.heads)?;
    let mut store = ParamStore::new();
    params.insert_into(&mut store, SINGLE);
    let (mut g, mut binder, qi, kv, cfg) = single_block(&store, params, intra, knowledge);
    let (out, w) =
        cross_attention_var(&mut g, &mut binder, SINGLE, cfg.heads, cfg.output_projection, qi, kv)?;
    Ok((
        FeatureMap::from_batch(g.value(out), 0)?,
        AttentionWeights::from_batch(g.value(w), 0, params.heads)?,
    ))
}

/// Cross-attention followed by the residual/normalization update.
pub fn gkst_update(
    intra: &FeatureMap,
    knowledge: &FeatureMap,
    params: &AttentionParams,
) -> Result<FeatureMap> {
    check_maps(intra, knowledge, params.heads)?;
    let mut store = ParamStore::new();
    params.insert_into(&mut store, SINGLE);
    let (mut g, mut binder, qi, kv, cfg) = single_block(&store, params, intra, knowledge);
    let (out, _) = update_var(&mut g, &mut binder, &cfg, SINGLE, qi, kv)?;
    FeatureMap::from_batch(g.value(out), 0)
}

/// Values recorded at one recurrent step.
#[derive(Clone, Debug)]
pub struct StepRecord {
    pub step: usize,
    /// `LN(F̂_G)`.
    pub ground_normed: FeatureMap,
    /// `LN(F̂_S)`.
    pub aerial_normed: FeatureMap,
    /// G2S output: satellite-like knowledge read by the ground branch.
    pub satellite_knowledge: Option<FeatureMap>,
    /// S2G output: ground-like knowledge read by the aerial branch.
    pub ground_knowledge: Option<FeatureMap>,
    pub ground_weights: AttentionWeights,
    pub aerial_weights: AttentionWeights,
}

#[derive(Clone, Debug)]
pub struct Recurrence {
    pub ground: FeatureMap,
    pub aerial: FeatureMap,
    pub trace: Vec<StepRecord>,
}

/// Runs the full recurrence for one pair of initial (position-encoded) maps.
pub fn recurrent_forward(
    f0_ground: &FeatureMap,
    f0_aerial: &FeatureMap,
    params: &ParamStore,
    cfg: &ModelConfig,
) -> Result<Recurrence> {
    if !cfg.transformer_enabled {
        return Err(Error::config("model.transformer_enabled", "recurrence needs the transformer"));
    }
    if f0_ground.shape() != f0_aerial.shape() {
        return Err(Error::Shape(format!(
            "ground {:?} and aerial {:?} maps differ",
            f0_ground.shape(),
            f0_aerial.shape()
        )));
    }
    let mut g = Graph::new();
    let mut binder = Binder::new(params, false);
    let f0 = [f0_ground.to_batch_var(&mut g), f0_aerial.to_batch_var(&mut g)];
    let vars = recurrent_var(&mut g, &mut binder, cfg, f0)?;
    step_records(&g, &vars, cfg.heads, 0).map(|trace| Recurrence {
        ground: FeatureMap::from_batch(g.value(vars.output[0]), 0).unwrap(),
        aerial: FeatureMap::from_batch(g.value(vars.output[1]), 0).unwrap(),
        trace,
    })
}

/// Reads the trace of batch item `item` out of a recorded graph.
pub(crate) fn step_records(
    g: &Graph,
    vars: &RecurrenceVars,
    heads: usize,
    item: usize,
) -> Result<Vec<StepRecord>> {
    let fm = |v: Var| FeatureMap::from_batch(g.value(v), item);
    let (gi, ai) = (Branch::Ground.index(), Branch::Aerial.index());
    vars.steps
        .iter()
        .enumerate()
        .map(|(step, s)| {
            Ok(StepRecord {
                step,
                ground_normed: fm(s.normed[gi])?,
                aerial_normed: fm(s.normed[ai])?,
                satellite_knowledge: s.generated.map(|k| fm(k[gi])).transpose()?,
                ground_knowledge: s.generated.map(|k| fm(k[ai])).transpose()?,
                ground_weights: AttentionWeights::from_batch(g.value(s.weights[gi]), item, heads)?,
                aerial_weights: AttentionWeights::from_batch(g.value(s.weights[ai]), item, heads)?,
            })
        })
        .collect()
}

#[derive(Serialize)]
struct TraceLine<'a> {
    step: usize,
    branch: Branch,
    head: usize,
    weights: Vec<&'a [f64]>,
}

/// Writes one JSON line per (step, branch, head) holding its `w × w` weights.
pub fn write_attention_trace(trace: &[StepRecord], out: &mut impl Write) -> std::io::Result<()> {
    for rec in trace {
        for (branch, w) in [(Branch::Ground, &rec.ground_weights), (Branch::Aerial, &rec.aerial_weights)] {
            for head in 0..w.heads() {
                let line = TraceLine {
                    step: rec.step,
                    branch,
                    head,
                    weights: (0..w.tokens()).map(|q| w.row(head, q)).collect(),
                };
                serde_json::to_writer(&mut *out, &line)?;
                out.write_all(b"\n")?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::initialize;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity(n: usize) -> Tensor {
        Tensor::from_fn([n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    fn plain(c: usize, heads: usize) -> AttentionParams {
        AttentionParams {
            heads,
            wq: identity(c),
            wk: identity(c),
            wv: identity(c),
            wo: None,
            norm_gain: vec![1.0; c],
            norm_bias: vec![0.0; c],
            eps: 1e-6,
            additive_norm: true,
        }
    }

    fn map(c: usize, w: usize, f: impl FnMut(usize) -> f64) -> FeatureMap {
        FeatureMap::new(Tensor::from_fn([c, 1, w], f)).unwrap()
    }

    #[test]
    fn scalar_softmax_example() {
        let intra = map(1, 2, |_| 1.0);
        let keys = map(1, 2, |i| if i == 0 { 1.0 } else { 0.0 });
        let (_, w) = cross_attention(&intra, &keys, &plain(1, 1)).unwrap();
        let e = std::f64::consts::E;
        for q in 0..2 {
            let row = w.row(0, q);
            assert!((row[0] - e / (e + 1.0)).abs() < 1e-12);
            assert!((row[1] - 1.0 / (e + 1.0)).abs() < 1e-12);
        }
        assert!((w.row(0, 0)[0] - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn identical_keys_give_uniform_rows() {
        let intra = map(4, 5, |i| (i as f64 * 0.7).sin());
        let knowledge = map(4, 5, |i| (i / 5) as f64 - 1.5);
        let (out, w) = cross_attention(&intra, &knowledge, &plain(4, 2)).unwrap();
        for h in 0..2 {
            for q in 0..5 {
                assert!(w.row(h, q).iter().all(|&v| (v - 0.2).abs() < 1e-12));
            }
        }
        for c in 0..4 {
            for x in 0..5 {
                assert!((out.get(c, 0, x) - knowledge.get(c, 0, 0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_value_projection_leaves_residual() {
        let intra = map(4, 3, |i| (i as f64).cos());
        let mut p = plain(4, 2);
        p.wv = Tensor::zeros([4, 4]);
        let out = gkst_update(&intra, &map(4, 3, |i| i as f64), &p).unwrap();
        let ln = crate::backbone::layer_norm(&intra, &p.norm_gain, &p.norm_bias, p.eps).unwrap();
        for i in 0..12 {
            assert!((out.data()[i] - (intra.data()[i] + ln.data()[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn indivisible_heads_is_a_config_error() {
        let f = map(3, 2, |_| 0.0);
        assert!(matches!(cross_attention(&f, &f, &plain(3, 2)), Err(Error::Config { .. })));
        let g = map(3, 4, |_| 0.0);
        assert!(matches!(cross_attention(&f, &g, &plain(3, 1)), Err(Error::Config { .. })));
    }

    fn toy_store(cfg: &ModelConfig, seed: u64) -> ParamStore {
        let mut specs = param_specs(cfg);
        specs.extend(cmi::param_specs(cfg));
        initialize(&specs, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn single_step_trace() {
        let cfg = ModelConfig { steps: 1, ..ModelConfig::toy() };
        let store = toy_store(&cfg, 3);
        let f = map(8, 5, |i| (i as f64 * 0.3).sin());
        let r = recurrent_forward(&f, &f, &store, &cfg).unwrap();
        assert_eq!(r.trace.len(), 1);
        assert!(r.trace[0].satellite_knowledge.is_some());
        assert_eq!(r.ground.shape(), [8, 1, 5]);
    }

    #[test]
    fn ground_output_ignores_aerial_input() {
        let cfg = ModelConfig::toy();
        let store = toy_store(&cfg, 4);
        let fg = map(8, 5, |i| (i as f64 * 0.3).sin());
        let a = recurrent_forward(&fg, &map(8, 5, |i| i as f64), &store, &cfg).unwrap();
        let b = recurrent_forward(&fg, &map(8, 5, |i| -(i as f64)), &store, &cfg).unwrap();
        assert_eq!(a.ground, b.ground);
        assert_ne!(a.aerial, b.aerial);
    }

    #[test]
    fn later_step_params_do_not_touch_earlier_trace() {
        let cfg = ModelConfig::toy();
        let mut store = toy_store(&cfg, 5);
        let (fg, fs) = (map(8, 5, |i| (i as f64).sin()), map(8, 5, |i| (i as f64).cos()));
        let before = recurrent_forward(&fg, &fs, &store, &cfg).unwrap();
        store.get_mut("gkst.ground.1.wq").unwrap().data_mut()[0] += 0.5;
        let after = recurrent_forward(&fg, &fs, &store, &cfg).unwrap();
        assert_eq!(before.trace[0].ground_weights, after.trace[0].ground_weights);
        assert_ne!(before.trace[1].ground_weights, after.trace[1].ground_weights);
    }

    #[test]
    fn trace_export_has_one_line_per_head() {
        let cfg = ModelConfig::toy();
        let store = toy_store(&cfg, 6);
        let f = map(8, 5, |i| (i as f64).sin());
        let r = recurrent_forward(&f, &f, &store, &cfg).unwrap();
        let mut buf = Vec::new();
        write_attention_trace(&r.trace, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), cfg.steps * 2 * cfg.heads);
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first["branch"], "ground");
        assert_eq!(first["weights"].as_array().unwrap().len(), 5);
    }

    #[test]
    fn attention_params_independent_of_heads() {
        let count = |heads| {
            let cfg = ModelConfig { heads, ..ModelConfig::toy() };
            param_specs(&cfg).iter().map(|s| s.num_elements()).sum::<usize>()
        };
        assert_eq!(count(1), count(2));
        assert_eq!(count(2), count(8));
    }
}
