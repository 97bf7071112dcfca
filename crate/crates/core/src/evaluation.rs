//! Descriptor extraction, recall@K retrieval scoring and complexity
//! accounting, with structured and aligned-text report formats.

use std::fmt;

use ndarray::{Array2, ArrayView1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{self, Branch};
use crate::cmi::{self, Direction};
use crate::config::ModelConfig;
use crate::data::{DatasetSplit, PreparedPair};
use crate::error::{Error, Result};
use crate::gkst;
use crate::model::{Batch, Model};
use crate::params::ParamStore;
use crate::training::prepare_split;

/// Items per forward pass during extraction.
const EXTRACT_CHUNK: usize = 32;

/// `N × D` ground and aerial descriptor matrices, row `i` from pair `i`.
pub fn extract_prepared(data: &[PreparedPair], model: &Model) -> Result<(Array2<f64>, Array2<f64>)> {
    if data.is_empty() {
        return Err(Error::Data("no pairs to extract".into()));
    }
    let d = model.config.feature_len();
    let chunks: Vec<_> = data
        .par_chunks(EXTRACT_CHUNK)
        .map(|chunk| model.encode(&Batch::from_pairs(chunk, &model.config)?))
        .collect::<Result<_>>()?;
    let stack = |pick: fn(&crate::model::Encoded) -> &Vec<Vec<f64>>| {
        let flat: Vec<f64> = chunks.iter().flat_map(|c| pick(c).iter().flatten().copied()).collect();
        Array2::from_shape_vec((data.len(), d), flat).expect("rows match pairs")
    };
    Ok((stack(|c| &c.ground), stack(|c| &c.aerial)))
}

pub fn extract_all_descriptors(split: &DatasetSplit, model: &Model) -> Result<(Array2<f64>, Array2<f64>)> {
    extract_prepared(&prepare_split(split, &model.config)?, model)
}

/// A retrieval cut-off.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum KSpec {
    Top(usize),
    /// `ceil(N / 100)` references.
    OnePercent,
}

pub const STANDARD_KS: [KSpec; 4] = [KSpec::Top(1), KSpec::Top(5), KSpec::Top(10), KSpec::OnePercent];

impl KSpec {
    pub fn resolve(self, n_references: usize) -> usize {
        match self {
            KSpec::Top(k) => k,
            KSpec::OnePercent => n_references.div_ceil(100),
        }
    }
}

impl fmt::Display for KSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KSpec::Top(k) => write!(f, "r@{k}"),
            KSpec::OnePercent => write!(f, "r@1%"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallEntry {
    pub k: String,
    /// Resolved cut-off.
    pub top: usize,
    pub percent: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub r_at: Vec<RecallEntry>,
    pub n_queries: usize,
    pub n_references: usize,
}

impl RecallReport {
    pub fn get(&self, k: KSpec) -> Option<f64> {
        let label = k.to_string();
        self.r_at.iter().find(|e| e.k == label).map(|e| e.percent)
    }

    pub fn r1(&self) -> f64 {
        self.get(KSpec::Top(1)).unwrap_or(0.0)
    }
}

fn euclidean(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn check_matrices(ground: &Array2<f64>, aerial: &Array2<f64>) -> Result<()> {
    if ground.nrows() != aerial.nrows() || ground.nrows() == 0 {
        return Err(Error::Shape(format!(
            "need matching non-empty row counts, got {} ground and {} aerial",
            ground.nrows(),
            aerial.nrows()
        )));
    }
    if ground.ncols() != aerial.ncols() {
        return Err(Error::Shape(format!(
            "descriptor lengths differ: {} vs {}",
            ground.ncols(),
            aerial.ncols()
        )));
    }
    Ok(())
}

/// Zero-based rank of each query's true reference among all references by
/// ascending distance. Equal distances rank the lower reference index first.
pub fn match_ranks(ground: &Array2<f64>, aerial: &Array2<f64>) -> Result<Vec<usize>> {
    check_matrices(ground, aerial)?;
    let n = ground.nrows();
    Ok((0..n)
        .into_par_iter()
        .map(|i| {
            let q = ground.row(i);
            let dists: Vec<f64> = (0..n).map(|j| euclidean(q, aerial.row(j))).collect();
            let own = dists[i];
            dists
                .iter()
                .enumerate()
                .filter(|&(j, &d)| d < own || (d == own && j < i))
                .count()
        })
        .collect())
}

/// Queries whose true reference lies within the top `k`.
pub fn hit_set(ranks: &[usize], k: usize) -> Vec<bool> {
    ranks.iter().map(|&r| r < k).collect()
}

pub fn recall_at_k(ground: &Array2<f64>, aerial: &Array2<f64>, ks: &[KSpec]) -> Result<RecallReport> {
    let ranks = match_ranks(ground, aerial)?;
    Ok(recall_from_ranks(&ranks, ks))
}

pub fn recall_from_ranks(ranks: &[usize], ks: &[KSpec]) -> RecallReport {
    let n = ranks.len();
    let r_at = ks
        .iter()
        .map(|&k| {
            let top = k.resolve(n);
            let hits = ranks.iter().filter(|&&r| r < top).count();
            RecallEntry { k: k.to_string(), top, percent: 100.0 * hits as f64 / n as f64 }
        })
        .collect();
    RecallReport { r_at, n_queries: n, n_references: n }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModuleComplexity {
    pub name: String,
    pub params: usize,
    /// Multiply-accumulates of one forward pass of one pair.
    pub macs: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub modules: Vec<ModuleComplexity>,
    pub total_params: usize,
    pub total_macs: u64,
}

/// Sub-module a parameter belongs to: its first two name components.
fn module_of(name: &str) -> &str {
    match name.match_indices('.').nth(1) {
        Some((i, _)) => &name[..i],
        None => name,
    }
}

fn module_macs(name: &str, cfg: &ModelConfig) -> u64 {
    let steps = cfg.steps as u64;
    for branch in Branch::BOTH {
        if name == backbone::prefix(branch) {
            return backbone::tower_macs(cfg, branch);
        }
        if cfg.transformer_enabled && name == format!("gkst.{}", branch.name()) {
            return steps * gkst::attention_macs(cfg);
        }
    }
    for dir in Direction::BOTH {
        if cfg.uses_generators() && !cfg.zero_knowledge && name == format!("cmi.{}", dir.name()) {
            return steps * cmi::generator_macs(cfg);
        }
    }
    0
}

/// Counts every tensor of `params` per sub-module.
pub fn complexity_of(params: &ParamStore, cfg: &ModelConfig) -> ComplexityReport {
    let mut modules: Vec<ModuleComplexity> = Vec::new();
    for (name, t) in params.iter() {
        let module = module_of(name);
        match modules.iter_mut().find(|m| m.name == module) {
            Some(m) => m.params += t.len(),
            None => modules.push(ModuleComplexity {
                name: module.to_string(),
                params: t.len(),
                macs: module_macs(module, cfg),
            }),
        }
    }
    ComplexityReport {
        total_params: modules.iter().map(|m| m.params).sum(),
        total_macs: modules.iter().map(|m| m.macs).sum(),
        modules,
    }
}

pub fn complexity_report(model: &Model) -> ComplexityReport {
    complexity_of(&model.params, &model.config)
}

/// Aligns `rows` under `header`: first column left, the rest right.
pub fn aligned_table(header: &[String], rows: &[Vec<String>]) -> String {
    let cols = header.len();
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: &[String]| {
        let mut s = String::new();
        for (i, cell) in cells.iter().enumerate().take(cols) {
            let pad = widths[i] - cell.chars().count();
            if i == 0 {
                s.push_str(cell);
                s.push_str(&" ".repeat(pad));
            } else {
                s.push_str("  ");
                s.push_str(&" ".repeat(pad));
                s.push_str(cell);
            }
        }
        s.trim_end().to_string()
    };
    let mut out = line(header);
    out.push('\n');
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (cols - 1)));
    out.push('\n');
    for row in rows {
        out.push_str(&line(row));
        out.push('\n');
    }
    out
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |p| format!("{p:.2}"))
}

fn millions(n: usize) -> String {
    format!("{:.4}M", n as f64 / 1e6)
}

/// One row per method with the standard recall columns.
pub fn recall_table(rows: &[(String, RecallReport)]) -> String {
    let mut header = vec!["Method".to_string()];
    header.extend(STANDARD_KS.iter().map(|k| k.to_string()));
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|(name, r)| {
            let mut row = vec![name.clone()];
            row.extend(STANDARD_KS.iter().map(|&k| pct(r.get(k))));
            row
        })
        .collect();
    aligned_table(&header, &body)
}

/// Recall columns plus parameter and MAC totals per variant.
pub fn ablation_table(rows: &[(String, RecallReport, ComplexityReport)]) -> String {
    let mut header = vec!["Variant".to_string()];
    header.extend(STANDARD_KS.iter().map(|k| k.to_string()));
    header.push("Params".into());
    header.push("MACs".into());
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|(name, r, c)| {
            let mut row = vec![name.clone()];
            row.extend(STANDARD_KS.iter().map(|&k| pct(r.get(k))));
            row.push(millions(c.total_params));
            row.push(millions(c.total_macs as usize));
            row
        })
        .collect();
    aligned_table(&header, &body)
}

/// Metrics as rows, one column per recurrence depth.
pub fn recurrence_table(columns: &[(usize, RecallReport)]) -> String {
    let mut header = vec!["Metric".to_string()];
    header.extend(columns.iter().map(|(l, _)| format!("L={l}")));
    let body: Vec<Vec<String>> = STANDARD_KS
        .iter()
        .map(|&k| {
            let mut row = vec![k.to_string()];
            row.extend(columns.iter().map(|(_, r)| pct(r.get(k))));
            row
        })
        .collect();
    aligned_table(&header, &body)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::cmi_variants;
    use ndarray::array;

    #[test]
    fn self_retrieval_is_perfect() {
        let m = array![[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]];
        let r = recall_at_k(&m, &m, &STANDARD_KS).unwrap();
        assert_eq!(r.r1(), 100.0);
    }

    #[test]
    fn second_ranked_match() {
        // query 0 sits nearer reference 1 than its own reference 0
        let ground = array![[0.9, 0.0], [1.0, 0.0], [0.0, 5.0], [0.0, -5.0]];
        let aerial = array![[0.0, 0.0], [1.0, 0.0], [0.0, 5.0], [0.0, -5.0]];
        let r = recall_at_k(&ground, &aerial, &[KSpec::Top(1), KSpec::Top(5)]).unwrap();
        assert_eq!(r.get(KSpec::Top(1)), Some(75.0));
        assert_eq!(r.get(KSpec::Top(5)), Some(100.0));
        assert_eq!(match_ranks(&ground, &aerial).unwrap(), vec![1, 0, 0, 0]);
    }

    #[test]
    fn ties_favor_lower_index() {
        let ground = array![[0.0], [0.0]];
        let aerial = array![[1.0], [-1.0]];
        assert_eq!(match_ranks(&ground, &aerial).unwrap(), vec![0, 1]);
    }

    #[test]
    fn one_percent_cutoff() {
        assert_eq!(KSpec::OnePercent.resolve(8884), 89);
        assert_eq!(KSpec::OnePercent.resolve(100), 1);
        assert_eq!(KSpec::OnePercent.resolve(1), 1);
    }

    #[test]
    fn mismatched_rows_error() {
        assert!(recall_at_k(&array![[0.0]], &array![[0.0], [1.0]], &STANDARD_KS).is_err());
    }

    #[test]
    fn complexity_totals_and_ordering() {
        assert_eq!(complexity_of(&ParamStore::new(), &ModelConfig::toy()).total_params, 0);
        let counts: Vec<usize> = cmi_variants(&ModelConfig::toy())
            .into_iter()
            .map(|v| {
                let r = complexity_report(&Model::init(v.model, 0).unwrap());
                assert_eq!(r.total_params, r.modules.iter().map(|m| m.params).sum::<usize>());
                r.total_params
            })
            .collect();
        assert!(counts[0] < counts[1] && counts[1] < counts[2], "{counts:?}");
    }

    #[test]
    fn tables_align() {
        let r = recall_from_ranks(&[0, 1, 2, 30], &STANDARD_KS);
        let t = recall_table(&[("ours".into(), r.clone()), ("a longer name".into(), r)]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0].len(), lines[2].len());
        assert!(lines[2].ends_with("75.00  75.00  25.00"));
        let rt = recurrence_table(&[(1, recall_from_ranks(&[0, 1], &STANDARD_KS))]);
        assert!(rt.starts_with("Metric     L=1\n"), "{rt}");
    }
}
