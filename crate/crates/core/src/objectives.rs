//! Retrieval descriptors, the soft-margin triplet loss, per-step generation
//! losses and their λ-weighted total.

use serde::{Deserialize, Serialize};

use crate::autograd::{softplus, Graph, Var};
use crate::backbone::{Branch, FeatureMap};
use crate::error::{Error, Result};
use crate::gkst::{RecurrenceVars, StepRecord};
use crate::training::Triplet;

/// Norms below this are treated as zero when normalizing descriptors.
pub const DESCRIPTOR_EPS: f64 = 1e-12;

/// A flattened, L2-normalized feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct Descriptor {
    values: Vec<f64>,
    degenerate: bool,
}

impl Descriptor {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Set when the source map had (near) zero norm; the values are then zero.
    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

pub fn descriptor(f: &FeatureMap) -> Result<Descriptor> {
    if !f.tensor().is_finite() {
        return Err(Error::NonFinite { tensor: "descriptor input".into() });
    }
    let norm = f.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < DESCRIPTOR_EPS {
        return Ok(Descriptor { values: vec![0.0; f.data().len()], degenerate: true });
    }
    Ok(Descriptor { values: f.data().iter().map(|v| v / norm).collect(), degenerate: false })
}

/// `log(1 + exp(γ (d_pos − d_neg)))`, finite for any finite argument.
pub fn triplet_loss(d_pos: f64, d_neg: f64, gamma: f64) -> f64 {
    softplus(gamma * (d_pos - d_neg))
}

fn mse(pred: &FeatureMap, target: &FeatureMap) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "generated {:?} and target {:?} knowledge differ",
            pred.shape(),
            target.shape()
        )));
    }
    let sum: f64 = pred.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sum / pred.data().len() as f64)
}

/// Per-step `(G2S, S2G)` mean squared errors: G2S output against the aerial
/// normalized features, S2G output against the ground ones.
pub fn generation_loss(trace: &[StepRecord]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut g2s = Vec::with_capacity(trace.len());
    let mut s2g = Vec::with_capacity(trace.len());
    for (i, rec) in trace.iter().enumerate() {
        if rec.step != i {
            return Err(Error::Shape(format!("trace entry {i} records step {}", rec.step)));
        }
        let (Some(l_s), Some(l_g)) = (&rec.satellite_knowledge, &rec.ground_knowledge) else {
            return Err(Error::Shape(format!("trace step {i} has no generated knowledge")));
        };
        g2s.push(mse(l_s, &rec.aerial_normed)?);
        s2g.push(mse(l_g, &rec.ground_normed)?);
    }
    Ok((g2s, s2g))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub triplet: f64,
    pub gen_g2s_per_step: Vec<f64>,
    pub gen_s2g_per_step: Vec<f64>,
    pub total: f64,
}

impl LossBreakdown {
    /// Applies `total = triplet + λ·Σ gen`. With `λ = 0` the total is the
    /// triplet term bit for bit.
    pub fn new(triplet: f64, g2s: Vec<f64>, s2g: Vec<f64>, lambda: f64) -> Self {
        let total = if lambda == 0.0 {
            triplet
        } else {
            let gen: f64 = g2s.iter().chain(&s2g).sum();
            triplet + lambda * gen
        };
        Self { triplet, gen_g2s_per_step: g2s, gen_s2g_per_step: s2g, total }
    }

    pub fn generation_sum(&self) -> f64 {
        self.gen_g2s_per_step.iter().chain(&self.gen_s2g_per_step).sum()
    }
}

/// λ-weighted total from `(d_pos, d_neg)` distances of every mined triplet
/// and the trace of one forward pass. Traces without generated knowledge
/// contribute no generation terms.
pub fn total_loss(
    triplets: &[(f64, f64)],
    trace: &[StepRecord],
    lambda: f64,
    gamma: f64,
) -> Result<LossBreakdown> {
    if triplets.is_empty() {
        return Err(Error::Data("no triplets to average".into()));
    }
    if !(lambda >= 0.0) {
        return Err(Error::config("train.lambda", "must be ≥ 0"));
    }
    let triplet =
        triplets.iter().map(|&(p, n)| triplet_loss(p, n, gamma)).sum::<f64>() / triplets.len() as f64;
    let (g2s, s2g) = if trace.iter().all(|r| r.satellite_knowledge.is_none()) {
        (Vec::new(), Vec::new())
    } else {
        generation_loss(trace)?
    };
    Ok(LossBreakdown::new(triplet, g2s, s2g, lambda))
}

/// Flat `(positive, negative)` indices into an `N × N` ground-by-aerial
/// distance matrix.
pub(crate) fn distance_pairs(triplets: &[Triplet], n: usize) -> Vec<(usize, usize)> {
    triplets
        .iter()
        .map(|t| {
            let pos = t.positive * n + t.positive;
            let neg = match t.anchor_branch {
                Branch::Ground => t.anchor * n + t.negative,
                Branch::Aerial => t.negative * n + t.anchor,
            };
            (pos, neg)
        })
        .collect()
}

/// Graph handles of every loss term.
pub(crate) struct LossVars {
    pub total: Var,
    pub triplet: Var,
    pub g2s: Vec<Var>,
    pub s2g: Vec<Var>,
}

impl LossVars {
    pub fn breakdown(&self, g: &Graph, lambda: f64) -> LossBreakdown {
        let values = |vs: &[Var]| vs.iter().map(|&v| g.value(v).item()).collect();
        let b = LossBreakdown::new(g.value(self.triplet).item(), values(&self.g2s), values(&self.s2g), lambda);
        debug_assert!(lambda != 0.0 || b.total == g.value(self.total).item());
        b
    }
}

/// Records the total loss on `[N, D]` descriptors and the recurrence trace.
pub(crate) fn loss_var(
    g: &mut Graph,
    descriptors: [Var; 2],
    recurrence: Option<&RecurrenceVars>,
    triplets: &[Triplet],
    lambda: f64,
    gamma: f64,
    stop_gradient_targets: bool,
) -> LossVars {
    let n = g.shape(descriptors[0])[0];
    let dist = g.pairwise_dist(descriptors[0], descriptors[1]);
    let triplet = g.soft_margin_triplet(dist, distance_pairs(triplets, n), gamma);
    g.set_label(triplet, "loss.triplet");
    let (mut g2s, mut s2g) = (Vec::new(), Vec::new());
    for step in recurrence.map_or(&[][..], |r| &r.steps) {
        let Some(k) = step.generated else { continue };
        let (gi, ai) = (Branch::Ground.index(), Branch::Aerial.index());
        let target = |g: &mut Graph, v: Var| if stop_gradient_targets { g.detach(v) } else { v };
        let t_s = target(g, step.normed[ai]);
        let t_g = target(g, step.normed[gi]);
        g2s.push(g.mse(k[gi], t_s));
        s2g.push(g.mse(k[ai], t_g));
    }
    let total = if lambda == 0.0 {
        triplet
    } else {
        let mut terms = vec![(triplet, 1.0)];
        terms.extend(g2s.iter().chain(&s2g).map(|&v| (v, lambda)));
        g.weighted_sum(terms)
    };
    g.set_label(total, "loss.total");
    LossVars { total, triplet, g2s, s2g }
}
