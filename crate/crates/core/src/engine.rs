//! Training, evaluation and model checkpoints.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use mobilex_tensor::{Element, Graph, TensorError};

use crate::checkpoint::Checkpoint;
use crate::data::{batch_iter, AugmentConfig, SampleSource};
use crate::error::{Error, Result};
use crate::layers::{Mode, Module};
use crate::loss::{self, LossConfig};
use crate::metrics::{MetricsAccumulator, MetricsReport, CSV_HEADER};
use crate::model::{ArchitectureConfig, MobileXNet, Normalization};

pub const LAST_CHECKPOINT: &str = "last.mxnt";
pub const BEST_CHECKPOINT: &str = "best.mxnt";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const METRICS_LOG: &str = "metrics.csv";
const VELOCITY_PREFIX: &str = "optim.velocity.";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub loss: LossConfig,
    /// Drives the epoch shuffles.
    pub seed: u64,
    /// Online augmentation; off unless set.
    pub augment: Option<AugmentConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.01,
            lr_decay_factor: 0.2,
            lr_decay_every: 5,
            epochs: 20,
            batch_size: 8,
            momentum: 0.9,
            weight_decay: 0.0,
            loss: LossConfig::default(),
            seed: 0,
            augment: None,
        }
    }
}

impl TrainConfig {
    /// Longer schedule used for small datasets: 100 epochs, decay every 40.
    pub fn long_schedule() -> Self {
        TrainConfig {
            epochs: 100,
            lr_decay_every: 40,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::config(m.to_string()));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return fail("lr0 must be positive");
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor < 1.0) {
            return fail("lr_decay_factor must lie in (0, 1)");
        }
        if self.lr_decay_every == 0 {
            return fail("lr_decay_every must be at least 1");
        }
        if self.epochs == 0 {
            return fail("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail("momentum must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail("weight_decay must be non-negative");
        }
        self.loss.validate()?;
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        Ok(())
    }
}

/// `lr0 * factor ^ floor(epoch / every)`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.lr_decay_factor.powi((epoch / cfg.lr_decay_every) as i32)
}

/// Gradient lookup by parameter name.
pub trait Gradients<T> {
    fn grad(&self, name: &str) -> Option<&[T]>;
}

impl<T: Element> Gradients<T> for Graph<T> {
    fn grad(&self, name: &str) -> Option<&[T]> {
        self.param_grad(name)
    }
}

impl<T> Gradients<T> for HashMap<String, Vec<T>> {
    fn grad(&self, name: &str) -> Option<&[T]> {
        self.get(name).map(Vec::as_slice)
    }
}

/// Momentum buffers by parameter name.
pub type Velocity<T> = BTreeMap<String, Vec<T>>;

/// `v <- momentum * v + (g + weight_decay * w); w <- w - lr * v` for every
/// learnable tensor.
pub fn sgd_step<T: Element>(
    model: &mut dyn Module<T>,
    grads: &dyn Gradients<T>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    velocity: &mut Velocity<T>,
) -> Result<()> {
    let mut missing = None;
    model.visit(&mut |p| {
        if missing.is_none() && p.kind.is_learnable() && grads.grad(&p.name).is_none() {
            missing = Some(p.name.clone());
        }
    });
    if let Some(name) = missing {
        return Err(Error::MissingGradient(name));
    }
    let (lr, m, wd) = (T::from_f64(lr), T::from_f64(momentum), T::from_f64(weight_decay));
    let mut bad = None;
    model.visit_mut(&mut |p| {
        if !p.kind.is_learnable() {
            return;
        }
        let g = grads.grad(&p.name).expect("checked above");
        let v = velocity
            .entry(p.name.clone())
            .or_insert_with(|| vec![T::zero(); g.len()]);
        for ((w, &gi), vi) in p.value.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
            let gi = if weight_decay != 0.0 { gi + wd * *w } else { gi };
            *vi = m * *vi + gi;
            *w = *w - lr * *vi;
        }
        if bad.is_none() && !p.value.all_finite() {
            bad = Some(p.name.clone());
        }
    });
    match bad {
        Some(name) => Err(Error::NonFiniteWeights(name)),
        None => Ok(()),
    }
}

/// Snapshot of the model with its architecture and normalization.
pub fn model_checkpoint(model: &MobileXNet<f32>) -> Checkpoint {
    let mut c = Checkpoint::from_module(model);
    model.config.to_metadata(&mut c.metadata);
    model.normalization.to_metadata(&mut c.metadata);
    c
}

/// Copies all parameters of `model` from `checkpoint`.
pub fn restore_model(model: &mut MobileXNet<f32>, checkpoint: &Checkpoint) -> Result<()> {
    checkpoint.restore(model)?;
    if let Some(n) = Normalization::from_metadata(&checkpoint.metadata)? {
        model.normalization = n;
    }
    Ok(())
}

/// Builds the model described by a checkpoint's metadata and loads it.
pub fn load_model(path: impl AsRef<Path>) -> Result<(MobileXNet<f32>, Checkpoint)> {
    let c = Checkpoint::load(path)?;
    let mut model = MobileXNet::build(ArchitectureConfig::from_metadata(&c.metadata)?)?;
    restore_model(&mut model, &c)?;
    Ok((model, c))
}

pub fn save_model(model: &MobileXNet<f32>, path: impl AsRef<Path>) -> Result<()> {
    model_checkpoint(model).save(path)
}

/// Optimizer and schedule position, enough to resume bit-exactly.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainState {
    /// Epochs completed.
    pub epoch: usize,
    /// Optimizer steps taken.
    pub step: usize,
    pub velocity: Velocity<f32>,
    pub best_rmse: Option<f64>,
}

impl TrainState {
    fn to_checkpoint(&self, model: &MobileXNet<f32>, metrics: &BTreeMap<String, String>) -> Checkpoint {
        let mut c = model_checkpoint(model);
        c.metadata.insert("train.epoch".into(), self.epoch.to_string());
        c.metadata.insert("train.step".into(), self.step.to_string());
        if let Some(b) = self.best_rmse {
            c.metadata.insert("train.best_rmse".into(), b.to_string());
        }
        c.metadata.extend(metrics.iter().map(|(k, v)| (k.clone(), v.clone())));
        for (name, v) in &self.velocity {
            c.push(format!("{VELOCITY_PREFIX}{name}"), vec![v.len()], v.clone());
        }
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let num = |k: &str| -> Result<usize> {
            c.meta(k)
                .unwrap_or("0")
                .parse()
                .map_err(|_| Error::CorruptCheckpoint(format!("metadata `{k}` is not an integer")))
        };
        let best_rmse = match c.meta("train.best_rmse") {
            None => None,
            Some(s) => Some(
                s.parse()
                    .map_err(|_| Error::CorruptCheckpoint("metadata `train.best_rmse` is not a number".into()))?,
            ),
        };
        Ok(TrainState {
            epoch: num("train.epoch")?,
            step: num("train.step")?,
            velocity: c
                .tensors
                .iter()
                .filter_map(|t| {
                    t.name
                        .strip_prefix(VELOCITY_PREFIX)
                        .map(|n| (n.to_string(), t.data.clone()))
                })
                .collect(),
            best_rmse,
        })
    }
}

/// Loads a training checkpoint for resumption.
pub fn load_training(path: impl AsRef<Path>) -> Result<(MobileXNet<f32>, TrainState)> {
    let (model, c) = load_model(path)?;
    Ok((model, TrainState::from_checkpoint(&c)?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Metrics of the train-mode predictions seen during the epoch.
    pub train: Option<MetricsReport>,
    pub validation: Option<MetricsReport>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Where logs and checkpoints go; nothing is written when `None`.
    pub out_dir: Option<PathBuf>,
    /// Enables per-epoch validation and the best checkpoint.
    pub validation: Option<&'a dyn SampleSource>,
    pub eval_cap: Option<f64>,
    /// Stop after this many completed epochs instead of `cfg.epochs`.
    pub stop_after: Option<usize>,
    pub progress: Option<&'a dyn Fn(&EpochRecord)>,
}

struct Logs {
    steps: BufWriter<File>,
    metrics: BufWriter<File>,
}

impl Logs {
    fn open(dir: &Path, append: bool) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let open = |name: &str, header: &str| -> Result<BufWriter<File>> {
            let path = dir.join(name);
            let fresh = !append || !path.exists();
            let f = OpenOptions::new()
                .create(true)
                .write(true)
                .append(!fresh)
                .truncate(fresh)
                .open(&path)?;
            let mut w = BufWriter::new(f);
            if fresh {
                writeln!(w, "{header}")?;
            }
            Ok(w)
        };
        Ok(Logs {
            steps: open(TRAIN_LOG, "epoch,step,lr,loss")?,
            metrics: open(METRICS_LOG, &format!("epoch,{CSV_HEADER}"))?,
        })
    }
}

/// Trains from scratch with no files written.
pub fn train<S: SampleSource + ?Sized>(model: &mut MobileXNet<f32>, source: &S, cfg: &TrainConfig) -> Result<TrainLog> {
    train_with(model, source, cfg, &mut TrainState::default(), &TrainOptions::default())
}

/// Runs epochs `state.epoch .. cfg.epochs` (or `opts.stop_after`), updating
/// `state` as it goes.
pub fn train_with<S: SampleSource + ?Sized>(
    model: &mut MobileXNet<f32>,
    source: &S,
    cfg: &TrainConfig,
    state: &mut TrainState,
    opts: &TrainOptions<'_>,
) -> Result<TrainLog> {
    cfg.validate()?;
    let mut logs = match &opts.out_dir {
        Some(dir) => Some(Logs::open(dir, state.epoch > 0)?),
        None => None,
    };
    let mut log = TrainLog::default();
    let end = opts.stop_after.unwrap_or(cfg.epochs).min(cfg.epochs);
    while state.epoch < end {
        let epoch = state.epoch;
        let lr = lr_at(epoch, cfg);
        let mut seen = MetricsAccumulator::new(opts.eval_cap);
        let mut loss_sum = 0.0;
        let batches = batch_iter(source, cfg.batch_size, Some(cfg.seed), epoch, cfg.augment.as_ref())?;
        let mut n_batches = 0;
        for (b, batch) in batches.enumerate() {
            let batch = batch?;
            let diverged = |e: Error| match e {
                Error::Tensor(TensorError::NonFinite { .. }) => Error::NonFiniteLoss { epoch, batch: b },
                e => e,
            };
            let mut g = Graph::new();
            let x = g.constant(model.prepare_input(&batch.rgb)?);
            let out = model.forward(&mut g, x, Mode::Train).map_err(diverged)?;
            let l = loss::loss(&mut g, &cfg.loss, out.depth, &batch.depth, &batch.mask).map_err(diverged)?;
            let value = g.value(l).item() as f64;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            seen.accumulate(g.value(out.depth), &batch.depth, &batch.mask)?;
            g.backward(l).map_err(|e| diverged(e.into()))?;
            sgd_step(model, &g, lr, cfg.momentum, cfg.weight_decay, &mut state.velocity)?;
            model.apply_updates(&out.updates);
            let rec = StepRecord {
                epoch,
                step: state.step,
                lr,
                loss: value,
            };
            if let Some(l) = &mut logs {
                writeln!(l.steps, "{},{},{},{}", rec.epoch, rec.step, rec.lr, rec.loss)?;
            }
            log.steps.push(rec);
            state.step += 1;
            loss_sum += value;
            n_batches += 1;
        }
        state.epoch += 1;

        let validation = match opts.validation {
            Some(v) => Some(evaluate(model, v, opts.eval_cap, cfg.batch_size)?),
            None => None,
        };
        let record = EpochRecord {
            epoch,
            mean_loss: loss_sum / n_batches as f64,
            train: seen.finalize().ok(),
            validation,
        };
        let mut snapshot = BTreeMap::new();
        snapshot.insert("metrics.mean_loss".to_string(), record.mean_loss.to_string());
        if let Some(v) = &record.validation {
            snapshot.insert("metrics.val_rmse".to_string(), v.rmse.to_string());
            snapshot.insert("metrics.val_delta1".to_string(), v.delta1.to_string());
        }
        let improved = match (&record.validation, state.best_rmse) {
            (Some(_), None) => true,
            (Some(v), Some(best)) => v.rmse < best,
            _ => false,
        };
        if improved {
            state.best_rmse = record.validation.as_ref().map(|v| v.rmse);
        }
        if let (Some(l), Some(dir)) = (&mut logs, &opts.out_dir) {
            for (label, r) in [("train", &record.train), ("val", &record.validation)] {
                if let Some(r) = r {
                    writeln!(l.metrics, "{epoch},{}", r.csv_row(label))?;
                }
            }
            l.steps.flush()?;
            l.metrics.flush()?;
            let c = state.to_checkpoint(model, &snapshot);
            c.save(dir.join(LAST_CHECKPOINT))?;
            if improved {
                c.save(dir.join(BEST_CHECKPOINT))?;
            }
        }
        if let Some(p) = opts.progress {
            p(&record);
        }
        log.epochs.push(record);
    }
    Ok(log)
}

/// Eval-mode metrics over every sample of `source`, in order.
pub fn evaluate<S: SampleSource + ?Sized>(
    model: &MobileXNet<f32>,
    source: &S,
    cap_m: Option<f64>,
    batch_size: usize,
) -> Result<MetricsReport> {
    evaluate_with(model, source, MetricsAccumulator::new(cap_m), batch_size)
}

/// Like [`evaluate`] with a preconfigured (empty) accumulator.
pub fn evaluate_with<S: SampleSource + ?Sized>(
    model: &MobileXNet<f32>,
    source: &S,
    mut acc: MetricsAccumulator,
    batch_size: usize,
) -> Result<MetricsReport> {
    for batch in batch_iter(source, batch_size, None, 0, None)? {
        let batch = batch?;
        let pred = model.predict(&batch.rgb)?;
        acc.accumulate(&pred, &batch.depth, &batch.mask)?;
    }
    acc.finalize()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{Param, ParamKind};

    struct One(Param<f64>);

    impl Module<f64> for One {
        fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<f64>)) {
            f(&self.0)
        }
        fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<f64>)) {
            f(&mut self.0)
        }
    }

    fn one(w: f64) -> One {
        One(Param::new("w".into(), &[1], w, ParamKind::Gamma))
    }

    fn grads(g: f64) -> HashMap<String, Vec<f64>> {
        HashMap::from([("w".to_string(), vec![g])])
    }

    #[test]
    fn vanilla_and_zero_lr() {
        let mut m = one(1.0);
        sgd_step(&mut m, &grads(0.5), 0.1, 0.0, 0.0, &mut Velocity::new()).unwrap();
        assert!((m.0.value.data()[0] - 0.95).abs() < 1e-15);
        let mut m = one(1.0);
        sgd_step(&mut m, &grads(0.5), 0.0, 0.9, 0.0, &mut Velocity::new()).unwrap();
        assert_eq!(m.0.value.data()[0], 1.0);
    }

    #[test]
    fn missing_gradient_names_tensor() {
        let mut m = one(1.0);
        let err = sgd_step(&mut m, &HashMap::new(), 0.1, 0.0, 0.0, &mut Velocity::new()).unwrap_err();
        assert!(matches!(err, Error::MissingGradient(ref n) if n == "w"));
    }

    #[test]
    fn schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg), 0.01);
        assert!((lr_at(5, &cfg) - 0.002).abs() < 1e-15);
        assert!((lr_at(10, &cfg) - 0.0004).abs() < 1e-15);
        assert_eq!(lr_at(39, &TrainConfig::long_schedule()), 0.01);
    }

    #[test]
    fn config_checks() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig {
                lr0: 0.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                lr_decay_factor: 1.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                epochs: 0,
                ..TrainConfig::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
