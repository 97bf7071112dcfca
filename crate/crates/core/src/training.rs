//! In-batch triplet mining, the Adam update, and the seeded, resumable
//! training loop.

use std::fs::OpenOptions;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::backbone::Branch;
use crate::checkpoint::Checkpoint;
use crate::config::{Config, Precision, TrainConfig};
use crate::data::{prepare_pair, DatasetSplit, PreparedPair};
use crate::error::{Error, Result};
use crate::model::{forward_var, Batch, Model};
use crate::objectives::{loss_var, LossBreakdown};
use crate::params::{Binder, ParamStore};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// An anchor from one branch, its matched item and a mismatched item from
/// the other branch. Indices are batch positions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Triplet {
    pub anchor_branch: Branch,
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// All `2·N·(N−1)` triplets of a batch of `n` matched pairs: ground anchors
/// first, then aerial anchors, each ordered by anchor then negative.
pub fn mine_triplets(n: usize) -> Result<Vec<Triplet>> {
    if n < 2 {
        return Err(Error::Data(format!("triplet mining needs ≥ 2 pairs, got {n}")));
    }
    let mut out = Vec::with_capacity(2 * n * (n - 1));
    for anchor_branch in Branch::BOTH {
        for i in 0..n {
            for j in (0..n).filter(|&j| j != i) {
                out.push(Triplet { anchor_branch, anchor: i, positive: i, negative: j });
            }
        }
    }
    Ok(out)
}

/// Adaptive-moment optimizer state, one moment pair per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub m: ParamStore,
    pub v: ParamStore,
    /// Number of updates applied.
    pub t: u64,
}

impl Adam {
    pub fn new(train: &TrainConfig, params: &ParamStore) -> Self {
        let zeros = || {
            let mut s = ParamStore::new();
            for (name, t) in params.iter() {
                s.insert(name, Tensor::zeros(t.shape().to_vec()));
            }
            s
        };
        Self { lr: train.lr, m: zeros(), v: zeros(), t: 0 }
    }

    pub(crate) fn from_parts(
        train: &TrainConfig,
        m: ParamStore,
        v: ParamStore,
        t: u64,
        params: &ParamStore,
    ) -> Result<Self> {
        for (name, p) in params.iter() {
            for store in [&m, &v] {
                if store.get(name)?.shape() != p.shape() {
                    return Err(Error::Checkpoint(format!("optimizer moment `{name}` has the wrong shape")));
                }
            }
        }
        if m.len() != params.len() || v.len() != params.len() {
            return Err(Error::Checkpoint("optimizer moments do not match the parameters".into()));
        }
        Ok(Self { lr: train.lr, m, v, t })
    }

    /// Applies one bias-corrected update. Parameters without a gradient
    /// entry are left untouched.
    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamStore) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for (name, grad) in grads.iter() {
            let p = params.get_mut(name)?;
            let m = self.m.get_mut(name)?;
            let v = self.v.get_mut(name)?;
            for (((p, m), v), &g) in
                p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(grad.data())
            {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                let step = (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
                *p -= self.lr * step;
            }
        }
        Ok(())
    }
}

/// Loss and parameter gradients of one batch.
pub fn loss_and_gradients(model: &Model, batch: &Batch, train: &TrainConfig) -> Result<(LossBreakdown, ParamStore)> {
    let triplets = mine_triplets(batch.len())?;
    let mut g = Graph::new();
    let mut binder = Binder::new(&model.params, true);
    let fwd = forward_var(&mut g, &mut binder, &model.config, batch)?;
    let loss = loss_var(
        &mut g,
        fwd.descriptors,
        fwd.recurrence.as_ref(),
        &triplets,
        train.lambda,
        train.gamma,
        model.config.stop_gradient_targets,
    );
    let breakdown = loss.breakdown(&g, train.lambda);
    if !breakdown.total.is_finite() {
        let culprit = g.first_non_finite().unwrap_or_else(|| "loss.total".into());
        return Err(Error::NonFinite { tensor: culprit });
    }
    let grads = g.backward(loss.total);
    let mut out = ParamStore::new();
    for (name, var) in binder.bound() {
        let grad = grads
            .get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(g.shape(var).to_vec()));
        if !grad.is_finite() {
            return Err(Error::NonFinite { tensor: format!("gradient of {name}") });
        }
        out.insert(name, grad);
    }
    Ok((breakdown, out))
}

/// One forward/backward pass and optimizer update.
pub fn train_step(model: &mut Model, optimizer: &mut Adam, batch: &Batch, train: &TrainConfig) -> Result<LossBreakdown> {
    let (breakdown, grads) = loss_and_gradients(model, batch, train)?;
    optimizer.step(&mut model.params, &grads)?;
    if train.precision == Precision::F32 {
        model.params.round_to_f32();
    }
    Ok(breakdown)
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub loss: LossBreakdown,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    /// Mean total loss over the epoch's steps.
    pub mean_loss: f64,
}

#[derive(Default)]
pub struct FitOptions<'a> {
    /// Receives `ckpt_{epoch}.bin` files and the `latest` marker.
    pub checkpoint_dir: Option<&'a Path>,
    /// Continue from this state instead of initializing.
    pub resume: Option<Checkpoint>,
    /// Line-delimited log, appended to.
    pub log_path: Option<&'a Path>,
    /// Record seconds since the start of `fit` in each log line.
    pub wall_time: bool,
    pub on_epoch: Option<Box<dyn FnMut(&EpochSummary, &Model) + 'a>>,
}

pub struct FitReport {
    pub checkpoint: Checkpoint,
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochSummary>,
    pub checkpoints: Vec<PathBuf>,
}

/// Fresh training state for `config`: parameters drawn from the seeded
/// generator, which then drives batch shuffling.
pub fn initial_checkpoint(config: &Config) -> Result<Checkpoint> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
    let mut model = Model::init_with_rng(config.model.clone(), &mut rng)?;
    if config.train.precision == Precision::F32 {
        model.params.round_to_f32();
    }
    let optimizer = Adam::new(&config.train, &model.params);
    Ok(Checkpoint { config: config.clone(), model, optimizer, epoch: 0, rng })
}

/// Prepares every pair of `split` for `config`, in order.
pub fn prepare_split(split: &DatasetSplit, config: &crate::config::ModelConfig) -> Result<Vec<PreparedPair>> {
    split.pairs().par_iter().map(|p| prepare_pair(p, config)).collect()
}

pub fn fit(dataset: &DatasetSplit, config: &Config, checkpoint_dir: Option<&Path>) -> Result<Checkpoint> {
    let opts = FitOptions { checkpoint_dir, ..Default::default() };
    Ok(fit_with(dataset, config, opts)?.checkpoint)
}

pub fn fit_with(dataset: &DatasetSplit, config: &Config, opts: FitOptions) -> Result<FitReport> {
    if dataset.is_empty() {
        return Err(Error::Data("cannot train on an empty dataset".into()));
    }
    let prepared = prepare_split(dataset, &config.model)?;
    fit_prepared(&prepared, config, opts)
}

/// Trains on already prepared pairs.
pub fn fit_prepared(data: &[PreparedPair], config: &Config, mut opts: FitOptions) -> Result<FitReport> {
    config.validate()?;
    if data.len() < 2 {
        return Err(Error::Data(format!("training needs ≥ 2 pairs, got {}", data.len())));
    }
    let mut state = match opts.resume.take() {
        Some(ck) => {
            if ck.config.model != config.model {
                return Err(Error::config("resume", "checkpoint model config differs from the run config"));
            }
            Checkpoint { config: config.clone(), ..ck }
        }
        None => initial_checkpoint(config)?,
    };
    state.optimizer.lr = config.train.lr;
    let mut log = match opts.log_path {
        Some(p) => {
            let f = OpenOptions::new().create(true).append(true).open(p).map_err(|e| Error::io(p, e))?;
            Some((p, BufWriter::new(f)))
        }
        None => None,
    };
    let start = Instant::now();
    let mut report = FitReport { checkpoint: state.clone(), steps: Vec::new(), epochs: Vec::new(), checkpoints: Vec::new() };
    let batch_size = config.train.batch_size.min(data.len());
    let mut order: Vec<usize> = (0..data.len()).collect();
    while state.epoch < config.train.epochs {
        let epoch = state.epoch + 1;
        order.sort_unstable();
        order.shuffle(&mut state.rng);
        let mut losses = Vec::new();
        for (step, chunk) in order.chunks(batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let batch = Batch::from_pairs(chunk.iter().map(|&i| &data[i]), &config.model)?;
            let loss = train_step(&mut state.model, &mut state.optimizer, &batch, &config.train)?;
            losses.push(loss.total);
            let line = StepLog {
                epoch,
                step,
                loss,
                wall_time: opts.wall_time.then(|| start.elapsed().as_secs_f64()),
            };
            if let Some((path, w)) = &mut log {
                serde_json::to_writer(&mut *w, &line).map_err(|e| Error::io(*path, e.into()))?;
                w.write_all(b"\n").map_err(|e| Error::io(*path, e))?;
            }
            report.steps.push(line);
        }
        state.epoch = epoch;
        let summary = EpochSummary { epoch, mean_loss: losses.iter().sum::<f64>() / losses.len() as f64 };
        if let Some(cb) = opts.on_epoch.as_mut() {
            cb(&summary, &state.model);
        }
        report.epochs.push(summary);
        if let Some(dir) = opts.checkpoint_dir {
            if epoch % config.train.checkpoint_every == 0 || epoch == config.train.epochs {
                report.checkpoints.push(state.save_in(dir)?);
            }
        }
    }
    if let Some((path, w)) = &mut log {
        w.flush().map_err(|e| Error::io(*path, e))?;
    }
    if report.checkpoints.is_empty() {
        if let Some(dir) = opts.checkpoint_dir {
            report.checkpoints.push(state.save_in(dir)?);
        }
    }
    report.checkpoint = state;
    Ok(report)
}
