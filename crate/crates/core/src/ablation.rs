//! End-to-end variant comparison: train each model variant over several
//! seeds and score it on a held-out split.

use serde::Serialize;

use crate::config::{Config, ModelConfig, TrainConfig, Variant};
use crate::data::DatasetSplit;
use crate::error::{Error, Result};
use crate::evaluation::{
    ablation_table, complexity_report, extract_prepared, recall_at_k, recurrence_table, ComplexityReport,
    RecallEntry, RecallReport, STANDARD_KS,
};
use crate::training::{fit_prepared, prepare_split, FitOptions};

#[derive(Clone, Debug, Serialize)]
pub struct SeedRun {
    pub seed: u64,
    pub recall: RecallReport,
    pub final_loss: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct VariantResult {
    pub name: String,
    pub steps: usize,
    pub runs: Vec<SeedRun>,
    /// Per-cut-off median across seeds.
    pub median: RecallReport,
    pub complexity: ComplexityReport,
}

impl VariantResult {
    pub fn median_r1(&self) -> f64 {
        self.median.r1()
    }
}

pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of nothing");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        (v[mid - 1] + v[mid]) / 2.0
    }
}

fn median_report(runs: &[SeedRun]) -> RecallReport {
    let first = &runs[0].recall;
    let r_at = first
        .r_at
        .iter()
        .enumerate()
        .map(|(i, e)| RecallEntry {
            k: e.k.clone(),
            top: e.top,
            percent: median(&runs.iter().map(|r| r.recall.r_at[i].percent).collect::<Vec<_>>()),
        })
        .collect();
    RecallReport { r_at, ..first.clone() }
}

/// Trains `variant` once per seed on `train` and evaluates on `test`.
pub fn run_variant(
    variant: &Variant,
    train: &DatasetSplit,
    test: &DatasetSplit,
    train_cfg: &TrainConfig,
    seeds: &[u64],
) -> Result<VariantResult> {
    if seeds.is_empty() {
        return Err(Error::config("seeds", "need at least one seed"));
    }
    train.check_disjoint(test)?;
    let train_data = prepare_split(train, &variant.model)?;
    let test_data = prepare_split(test, &variant.model)?;
    let mut runs = Vec::with_capacity(seeds.len());
    let mut complexity = None;
    for &seed in seeds {
        let config = Config {
            preset: "custom".into(),
            model: variant.model.clone(),
            train: TrainConfig { seed, ..train_cfg.clone() },
        };
        let report = fit_prepared(&train_data, &config, FitOptions::default())?;
        let model = &report.checkpoint.model;
        let (g, a) = extract_prepared(&test_data, model)?;
        runs.push(SeedRun {
            seed,
            recall: recall_at_k(&g, &a, &STANDARD_KS)?,
            final_loss: report.epochs.last().map_or(f64::NAN, |e| e.mean_loss),
        });
        complexity.get_or_insert_with(|| complexity_report(model));
    }
    Ok(VariantResult {
        name: variant.name.clone(),
        steps: variant.model.steps,
        median: median_report(&runs),
        runs,
        complexity: complexity.expect("at least one seed"),
    })
}

pub fn run_variants(
    variants: &[Variant],
    train: &DatasetSplit,
    test: &DatasetSplit,
    train_cfg: &TrainConfig,
    seeds: &[u64],
) -> Result<Vec<VariantResult>> {
    variants.iter().map(|v| run_variant(v, train, test, train_cfg, seeds)).collect()
}

/// Variant rows with recall medians and complexity.
pub fn variant_table(results: &[VariantResult]) -> String {
    let rows: Vec<_> = results
        .iter()
        .map(|r| (r.name.clone(), r.median.clone(), r.complexity.clone()))
        .collect();
    ablation_table(&rows)
}

/// Recall medians with one column per recurrence depth.
pub fn sweep_table(results: &[VariantResult]) -> String {
    let cols: Vec<_> = results.iter().map(|r| (r.steps, r.median.clone())).collect();
    recurrence_table(&cols)
}

/// Whether `cfg` is fast enough for end-to-end sweeps on a CPU.
pub fn is_desk_scale(cfg: &ModelConfig) -> bool {
    cfg.feature_len() <= 4096 && cfg.backbone.iter().all(|l| l.out_channels <= 64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0]), 2.5);
    }
}
