//! SGD with Nesterov momentum, warmup plus cosine or linear decay, and the
//! epoch loop that writes metrics and checkpoints to a run directory.

use std::f64::consts::PI;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autodiff::Graph;
use crate::checkpoint::Container;
use crate::data::{augment, sample_rng, AugmentConfig, ChannelStats, DatasetSplit};
use crate::error::{Error, Result};
use crate::models::Model;
use crate::params::ParamStore;
use crate::tensor::{Mode, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Cosine,
    Linear,
}

impl std::str::FromStr for Schedule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Schedule::Cosine),
            "linear" => Ok(Schedule::Linear),
            _ => Err(Error::config(
                "schedule",
                format!("expected cosine or linear, got `{s}`"),
            )),
        }
    }
}

impl std::fmt::Display for Schedule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Schedule::Cosine => "cosine",
            Schedule::Linear => "linear",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub schedule: Schedule,
    pub seed: u64,
    /// Validate every this many epochs (and always after the last).
    pub eval_every: usize,
    pub augment: bool,
    pub shuffle: bool,
    /// Recorded only: every kernel is single-threaded, so runs are
    /// reproducible regardless.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 120,
            batch_size: 100,
            lr: 0.1,
            momentum: 0.9,
            nesterov: true,
            weight_decay: 1e-4,
            warmup_epochs: 10,
            schedule: Schedule::Cosine,
            seed: 0,
            eval_every: 1,
            augment: true,
            shuffle: true,
            deterministic: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::config("lr", "must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", "must lie in [0, 1)"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "must be finite and non-negative"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every", "must be at least 1"));
        }
        Ok(())
    }
}

/// Learning rate for a 1-based `epoch`: linear warmup from `lr / 10` to
/// `lr` over the warmup epochs, then cosine or linear decay to zero at the
/// final epoch. Warmup is cut to `epochs - 1` so short runs still decay.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let base = cfg.lr;
    let w = cfg.warmup_epochs.min(cfg.epochs.saturating_sub(1));
    let e = epoch.clamp(1, cfg.epochs);
    if e <= w {
        if w == 1 {
            return base;
        }
        let start = base / 10.0;
        return start + (base - start) * (e - 1) as f64 / (w - 1) as f64;
    }
    let t = (e - w) as f64 / (cfg.epochs - w) as f64;
    match cfg.schedule {
        Schedule::Cosine => base * 0.5 * (1.0 + (PI * t).cos()),
        Schedule::Linear => base * (1.0 - t),
    }
}

/// Momentum buffers, one per parameter, persisted across steps.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    pub nesterov: bool,
    velocity: Vec<Tensor<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64, nesterov: bool) -> Self {
        Self {
            momentum,
            weight_decay,
            nesterov,
            velocity: Vec::new(),
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self::new(cfg.momentum, cfg.weight_decay, cfg.nesterov)
    }

    pub fn velocity(&self) -> &[Tensor<T>] {
        &self.velocity
    }

    /// `g' = g + wd * theta` (decaying groups only), `v = mu v + g'`,
    /// `theta -= lr (g' + mu v)` (Nesterov) or `theta -= lr v`.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::invalid(
                "sgd_step",
                format!("{} gradients for {} parameters", grads.len(), store.len()),
            ));
        }
        for ((_, name, p), g) in store.iter().zip(grads) {
            if g.shape() != p.value.shape() {
                return Err(Error::shape("sgd_step", g.shape(), p.value.shape()));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite {
                    path: format!("gradient of {name}"),
                });
            }
        }
        if self.velocity.is_empty() {
            self.velocity = store.iter().map(|(_, _, p)| Tensor::zeros(p.value.shape())).collect();
        }
        let mu = T::from_f64_lossy(self.momentum);
        let lr = T::from_f64_lossy(lr);
        let ids: Vec<_> = store.iter().map(|(id, _, _)| id).collect();
        for ((id, g), v) in ids.into_iter().zip(grads).zip(&mut self.velocity) {
            let param = store.get_mut(id);
            let wd = if param.group.weight_decay() {
                T::from_f64_lossy(self.weight_decay)
            } else {
                T::zero()
            };
            let theta = param.value.data_mut();
            for ((t, &gi), vi) in theta.iter_mut().zip(g.data()).zip(v.data_mut()) {
                let gd = gi + wd * *t;
                *vi = mu * *vi + gd;
                let update = if self.nesterov { gd + mu * *vi } else { *vi };
                *t -= lr * update;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Percent in `[0, 100]`.
    pub train_top1: f64,
    pub val_loss: Option<f64>,
    pub val_top1: Option<f64>,
    /// Kept out of the metrics file so seeded runs compare byte for byte.
    #[serde(skip)]
    pub wall_time_s: f64,
}

/// Append-only metrics and timing files plus checkpoints.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    pub const METRICS: &'static str = "metrics.jsonl";
    pub const TIMINGS: &'static str = "timings.jsonl";
    pub const BEST: &'static str = "best.ckpt";
    pub const LAST: &'static str = "last.ckpt";

    /// Creates the directory and truncates metrics and timings.
    pub fn create(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        fs::create_dir_all(&path)?;
        File::create(path.join(Self::METRICS))?;
        File::create(path.join(Self::TIMINGS))?;
        Ok(Self { path })
    }

    fn append(&self, file: &str, line: &str) -> Result<()> {
        let mut f = OpenOptions::new()
            .append(true)
            .create(true)
            .open(self.path.join(file))?;
        writeln!(f, "{line}")?;
        Ok(())
    }

    pub fn record(&self, m: &EpochMetrics) -> Result<()> {
        self.append(Self::METRICS, &serde_json::to_string(m)?)?;
        self.append(
            Self::TIMINGS,
            &serde_json::to_string(&json!({"epoch": m.epoch, "wall_time_s": m.wall_time_s}))?,
        )
    }

    pub fn read_metrics(path: &Path) -> Result<Vec<EpochMetrics>> {
        fs::read_to_string(path.join(Self::METRICS))?
            .lines()
            .map(|l| serde_json::from_str(l).map_err(Error::from))
            .collect()
    }
}

/// Standardized (and, when `rng_for` is given, augmented) batch.
fn make_batch<T: Real>(
    split: &DatasetSplit,
    indices: &[usize],
    stats: &ChannelStats,
    augment_with: Option<(AugmentConfig, &dyn Fn(usize) -> ChaCha8Rng)>,
) -> Result<Tensor<T>> {
    let shape = split.image_shape();
    let per: usize = shape.iter().product();
    let mut data = Vec::with_capacity(indices.len() * per);
    for &i in indices {
        let img = match &augment_with {
            Some((cfg, rng_for)) => augment(split.image(i), shape, *cfg, stats, &mut rng_for(i)),
            None => {
                let mut img = split.image(i).to_vec();
                stats.apply(&mut img);
                img
            }
        };
        data.extend(img.into_iter().map(|v| T::from_f64_lossy(v as f64)));
    }
    Tensor::new(&[indices.len(), shape[0], shape[1], shape[2]], data)
}

fn top1_hits<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    let k = logits.dim(1);
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &label)| {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (j, &v)| if v > row[b] { j } else { b });
            best == label
        })
        .count()
}

/// Mean cross-entropy and top-1 percent in eval mode.
pub fn evaluate<T: Real>(
    model: &mut Model<T>,
    split: &DatasetSplit,
    stats: &ChannelStats,
    batch_size: usize,
) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut hits = 0;
    let all: Vec<usize> = (0..split.len()).collect();
    for idx in all.chunks(batch_size.max(1)) {
        let x = make_batch::<T>(split, idx, stats, None)?;
        let labels: Vec<usize> = idx.iter().map(|&i| split.labels[i]).collect();
        let mut g = Graph::new();
        let p = model.params.bind(&mut g);
        let logits = model.forward(&mut g, &p, &x, Mode::Eval)?;
        let l = g.softmax_cross_entropy(logits, &labels)?;
        loss += g.value(l).item().as_f64() * idx.len() as f64;
        hits += top1_hits(g.value(logits), &labels);
    }
    let n = split.len().max(1) as f64;
    Ok((loss / n, 100.0 * hits as f64 / n))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochMetrics>,
    pub best_epoch: Option<usize>,
    pub best_val_top1: Option<f64>,
    /// Model state at the best validation epoch.
    pub best: Option<Container>,
}

fn checkpoint_meta(cfg: &TrainConfig, epoch: usize, m: Option<&EpochMetrics>) -> serde_json::Value {
    json!({"epoch": epoch, "train_config": cfg, "metrics": m})
}

/// Trains `model` in place. With a run directory, writes one metrics record
/// per epoch, `last.ckpt` after every epoch (and before the first) and
/// `best.ckpt` whenever validation top-1 improves. A non-finite loss aborts
/// with [`Error::Divergence`], leaving `last.ckpt` at the last good epoch.
pub fn train<T: Real>(
    model: &mut Model<T>,
    train_set: &DatasetSplit,
    val_set: &DatasetSplit,
    stats: &ChannelStats,
    cfg: &TrainConfig,
    run_dir: Option<&RunDir>,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    for (what, split) in [("train", train_set), ("val", val_set)] {
        if split.classes != model.classes() {
            return Err(Error::config(
                "classes",
                format!(
                    "{what} split has {} classes, model has {}",
                    split.classes,
                    model.classes()
                ),
            ));
        }
    }
    if train_set.is_empty() {
        return Err(Error::config("dataset", "train split is empty"));
    }
    if let Some(dir) = run_dir {
        model.save(dir.path.join(RunDir::LAST), checkpoint_meta(cfg, 0, None))?;
    }

    let mut sgd = Sgd::from_config(cfg);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, Container)> = None;
    let aug_cfg = AugmentConfig::default();

    for epoch in 1..=cfg.epochs {
        let t0 = Instant::now();
        let lr = lr_at(epoch, cfg);
        if cfg.shuffle {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(epoch as u64);
            order.sort_unstable();
            order.shuffle(&mut rng);
        }
        let mut loss_sum = 0.0;
        let mut hits = 0;
        for idx in order.chunks(cfg.batch_size) {
            let rng_for = |i: usize| sample_rng(cfg.seed, epoch as u64, i as u64);
            let aug = cfg
                .augment
                .then_some((aug_cfg, &rng_for as &dyn Fn(usize) -> ChaCha8Rng));
            let x = make_batch::<T>(train_set, idx, stats, aug)?;
            let labels: Vec<usize> = idx.iter().map(|&i| train_set.labels[i]).collect();

            let mut g = Graph::new();
            let p = model.params.bind(&mut g);
            let logits = model.forward(&mut g, &p, &x, Mode::Train)?;
            let l = g.softmax_cross_entropy(logits, &labels)?;
            let loss = g.value(l).item().as_f64();
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, loss });
            }
            loss_sum += loss * idx.len() as f64;
            hits += top1_hits(g.value(logits), &labels);
            let grads = g.backward(l)?;
            let grads = model.params.collect_grads(&grads, &p);
            sgd.step(&mut model.params, &grads, lr).map_err(|e| match e {
                Error::NonFinite { .. } => Error::Divergence { epoch, loss: f64::NAN },
                other => other,
            })?;
        }
        let n = train_set.len() as f64;
        let (val_loss, val_top1) = if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            let (l, a) = evaluate(model, val_set, stats, cfg.batch_size)?;
            (Some(l), Some(a))
        } else {
            (None, None)
        };
        let metrics = EpochMetrics {
            epoch,
            lr,
            train_loss: loss_sum / n,
            train_top1: 100.0 * hits as f64 / n,
            val_loss,
            val_top1,
            wall_time_s: t0.elapsed().as_secs_f64(),
        };
        if let Some(acc) = val_top1 {
            if best.as_ref().is_none_or(|(_, b, _)| acc > *b) {
                let c = model.to_container(checkpoint_meta(cfg, epoch, Some(&metrics)))?;
                if let Some(dir) = run_dir {
                    c.save(dir.path.join(RunDir::BEST))?;
                }
                best = Some((epoch, acc, c));
            }
        }
        if let Some(dir) = run_dir {
            dir.record(&metrics)?;
            model.save(dir.path.join(RunDir::LAST), checkpoint_meta(cfg, epoch, Some(&metrics)))?;
        }
        on_epoch(&metrics);
        history.push(metrics);
    }
    let (best_epoch, best_val_top1, best) = match best {
        Some((e, a, c)) => (Some(e), Some(a), Some(c)),
        None => (None, None, None),
    };
    Ok(TrainOutcome {
        history,
        best_epoch,
        best_val_top1,
        best,
    })
}
