//! Optimizer, learning-rate schedule and the training and evaluation loops.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::container::{self, Entries};
use crate::darcy::{DarcySet, NormStats};
use crate::error::{Error, Result};
use crate::loss::rel_l2_per_sample;
use crate::model::{forward, GeoMaNO, ModelConfig};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const METRICS_HEADER: &str = "epoch,train_loss,test_rel_l2,lr,seconds,best_test_rel_l2";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak of the one-cycle schedule.
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    /// Schedule start as a fraction of the peak.
    pub start_factor: f64,
    /// Schedule end as a fraction of the peak.
    pub final_factor: f64,
    pub lambda_g: f64,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 4,
            lr: 1e-3,
            weight_decay: 1e-4,
            warmup_fraction: 0.3,
            start_factor: 0.04,
            final_factor: 1e-4,
            lambda_g: 0.1,
            clip_norm: 5.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::Config(msg.into()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return fail("warmup_fraction must lie in [0, 1)");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return fail("epochs and batch_size must be at least 1");
        }
        if self.weight_decay < 0.0 || self.lambda_g < 0.0 || !(self.clip_norm > 0.0) {
            return fail("weight_decay and lambda_g must be non-negative, clip_norm positive");
        }
        if !(self.start_factor > 0.0 && self.final_factor > 0.0) {
            return fail("schedule factors must be positive");
        }
        Ok(())
    }
}

/// One-cycle schedule: cosine ramp from `start_factor·lr` to `lr` over the
/// warmup fraction, then cosine decay to `final_factor·lr` at the last step.
pub fn one_cycle_lr(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    let peak = cfg.lr;
    let warm = (cfg.warmup_fraction * total_steps as f64).round() as usize;
    let cosine = |from: f64, to: f64, t: f64| to + 0.5 * (from - to) * (1.0 + (std::f64::consts::PI * t).cos());
    if step < warm {
        cosine(cfg.start_factor * peak, peak, step as f64 / warm as f64)
    } else {
        let span = total_steps.saturating_sub(1).saturating_sub(warm).max(1);
        let t = ((step - warm) as f64 / span as f64).min(1.0);
        cosine(peak, cfg.final_factor * peak, t)
    }
}

/// First and second moments of every parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self { step: 0, m: zeros.clone(), v: zeros }
    }
}

/// AdamW update with decoupled weight decay. Leaves everything untouched
/// and fails when a gradient is not finite.
pub fn optimizer_step(
    params: &mut ParamStore,
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::Contract(format!("{} gradients for {} parameters", grads.len(), params.len())));
    }
    if let Some(((name, _), _)) = params.iter().zip(grads).find(|(_, g)| !g.is_finite()) {
        return Err(Error::Numeric(format!("non-finite gradient for `{name}`")));
    }
    state.step += 1;
    let t = state.step as i32;
    let (c1, c2) = (1.0 - BETA1.powi(t), 1.0 - BETA2.powi(t));
    for (((_, w), g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        let (w, g, m, v) = (w.data_mut(), g.data(), m.data_mut(), v.data_mut());
        for k in 0..w.len() {
            m[k] = BETA1 * m[k] + (1.0 - BETA1) * g[k];
            v[k] = BETA2 * v[k] + (1.0 - BETA2) * g[k] * g[k];
            let update = (m[k] / c1) / ((v[k] / c2).sqrt() + ADAM_EPS);
            w[k] -= lr * update + lr * weight_decay * w[k];
        }
    }
    Ok(())
}

/// Scales `grads` in place to global norm at most `max_norm`; returns the
/// norm before scaling.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Model input `(n, H, W, 3)`: the normalized coefficient followed by the
/// node coordinates `x = j/(W−1)` and `y = i/(H−1)`.
pub fn input_features(a: &Tensor, stats: &NormStats) -> Result<Tensor> {
    let (n, h, w, c) = a.grid_dims()?;
    if c != 1 {
        return Err(crate::error::shape_err!("coefficient must have one channel, got {c}"));
    }
    let (sx, sy) = (1.0 / (w.max(2) - 1) as f64, 1.0 / (h.max(2) - 1) as f64);
    let mut out = Vec::with_capacity(3 * a.len());
    for (p, &v) in a.data().iter().enumerate() {
        let (i, j) = ((p / w) % h, p % w);
        out.extend([(v - stats.a_mean) / stats.a_std, j as f64 * sx, i as f64 * sy]);
    }
    Tensor::grid(n, h, w, 3, out)
}

fn gather(t: &Tensor, indices: &[usize]) -> Result<Tensor> {
    let per = t.len() / t.dim(0);
    let mut shape = t.shape().to_vec();
    shape[0] = indices.len();
    let data = indices.iter().flat_map(|&i| t.data()[i * per..(i + 1) * per].iter().copied()).collect();
    Tensor::new(&shape, data)
}

/// De-normalized predictions for every sample of `set`, `batch` at a time.
pub fn predict_set(model: &GeoMaNO, set: &DarcySet, batch: usize) -> Result<Tensor> {
    let features = input_features(&set.a, &set.stats)?;
    let mut out = Vec::with_capacity(set.u.len());
    let indices: Vec<usize> = (0..set.len()).collect();
    for chunk in indices.chunks(batch.max(1)) {
        let pred = model.predict(&gather(&features, chunk)?)?;
        out.extend(pred.data().iter().map(|v| v * set.stats.u_std + set.stats.u_mean));
    }
    Tensor::new(set.u.shape(), out)
}

/// Mean relative error of the model on `set`.
pub fn evaluate(model: &GeoMaNO, set: &DarcySet, batch: usize) -> Result<f64> {
    let pred = predict_set(model, set, batch)?;
    let per = rel_l2_per_sample(&pred, &set.u)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Relative error on `test` of the pointwise mean of the training solutions.
pub fn mean_field_baseline(train: &DarcySet, test: &DarcySet) -> Result<f64> {
    let per = train.u.len() / train.len();
    let mut mean = vec![0.0; per];
    for sample in train.u.data().chunks_exact(per) {
        mean.iter_mut().zip(sample).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= train.len() as f64);
    let pred = Tensor::new(test.u.shape(), mean.iter().copied().cycle().take(test.u.len()).collect())?;
    let errs = rel_l2_per_sample(&pred, &test.u)?;
    Ok(errs.iter().sum::<f64>() / errs.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_rel_l2: f64,
    pub lr: f64,
    pub seconds: f64,
    pub best_test_rel_l2: f64,
}

impl EpochRecord {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{:.3},{:e}",
            self.epoch, self.train_loss, self.test_rel_l2, self.lr, self.seconds, self.best_test_rel_l2
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: GeoMaNO,
    pub best: GeoMaNO,
    pub history: Vec<EpochRecord>,
    pub best_test_rel_l2: f64,
}

/// Where a run writes `metrics.csv` and `checkpoint.gmno`.
#[derive(Clone, Debug, Default)]
pub struct RunOutput {
    pub dir: Option<PathBuf>,
    /// Print one progress line per epoch to stderr.
    pub verbose: bool,
}

impl RunOutput {
    pub fn metrics_path(dir: &Path) -> PathBuf {
        dir.join("metrics.csv")
    }

    pub fn checkpoint_path(dir: &Path) -> PathBuf {
        dir.join("checkpoint.gmno")
    }
}

/// Model parameters, dataset statistics and the test error they reached.
pub fn save_checkpoint(path: impl AsRef<Path>, model: &GeoMaNO, stats: &NormStats, test_rel_l2: f64) -> Result<()> {
    let mut entries = Entries::new();
    for (name, t) in model.params.iter() {
        entries.insert(format!("param.{name}"), t.clone());
    }
    entries.insert("meta.stats".into(), stats.to_tensor());
    entries.insert("meta.test_rel_l2".into(), Tensor::scalar(test_rel_l2));
    container::save(path, &entries)
}

pub struct Checkpoint {
    pub params: ParamStore,
    pub stats: NormStats,
    pub test_rel_l2: f64,
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let mut entries = container::load(path)?;
    let mut take = |name: &str| {
        entries.shift_remove(name).ok_or_else(|| Error::Format(format!("checkpoint lacks `{name}`")))
    };
    let stats = NormStats::from_tensor(&take("meta.stats")?)?;
    let test_rel_l2 = take("meta.test_rel_l2")?.data()[0];
    let mut params = ParamStore::new();
    for (name, t) in entries {
        let Some(stripped) = name.strip_prefix("param.") else {
            return Err(Error::Format(format!("unexpected checkpoint entry `{name}`")));
        };
        params.insert(stripped, t);
    }
    Ok(Checkpoint { params, stats, test_rel_l2 })
}

/// Restores a model of shape `config` from a checkpoint file.
pub fn model_from_checkpoint(config: ModelConfig, path: impl AsRef<Path>) -> Result<(GeoMaNO, Checkpoint)> {
    let ckpt = load_checkpoint(path)?;
    let mut model = GeoMaNO::new(config, &mut Rng::new(0))?;
    model.params.load_from(&ckpt.params)?;
    Ok((model, ckpt))
}

/// Trains from the seed's initialization. Batches are reshuffled every epoch
/// from a stream of the same seed; the test split is evaluated after every
/// epoch and the best parameters are kept.
pub fn train_loop(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    train: &DarcySet,
    test: &DarcySet,
    output: &RunOutput,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model_cfg.validate()?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::Config("training and test splits must be non-empty".into()));
    }
    if train.size() != model_cfg.grid || test.size() != model_cfg.grid {
        return Err(Error::Config(format!(
            "dataset grid {:?} does not match model grid {:?}",
            train.size(),
            model_cfg.grid
        )));
    }
    let root = Rng::new(cfg.seed);
    let mut model = GeoMaNO::new(model_cfg.clone(), &mut root.split(0))?;
    let mut order_rng = root.split(1);
    let mut state = AdamState::new(&model.params);
    let stats = train.stats;
    let features = input_features(&train.a, &stats)?;
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * steps_per_epoch;

    let mut metrics = match &output.dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let mut f = fs::File::create(RunOutput::metrics_path(dir))?;
            writeln!(f, "{METRICS_HEADER}")?;
            Some(f)
        }
        None => None,
    };
    let started = Instant::now();
    let mut best = (f64::INFINITY, model.clone());
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order_rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            lr = one_cycle_lr(step, total, cfg);
            let x = gather(&features, batch)?;
            let y = gather(&train.u, batch)?;
            let mut tape = Tape::new();
            let bound = model.params.bind(&mut tape, true);
            let xv = tape.constant(x);
            let yv = tape.constant(y);
            let pred = forward(&mut tape, &bound, model_cfg, xv)?;
            let pred = tape.scale_shift(pred, stats.u_std, stats.u_mean);
            let loss = tape.darcy_loss(pred, yv, cfg.lambda_g)?;
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss at epoch {epoch}, step {step}")));
            }
            let mut grads = tape.backward_scalar(loss)?;
            let mut grads = bound.collect(&model.params, &mut grads);
            clip_global_norm(&mut grads, cfg.clip_norm);
            optimizer_step(&mut model.params, &grads, &mut state, lr, cfg.weight_decay)?;
            loss_sum += value * batch.len() as f64;
            step += 1;
        }
        let test_rel_l2 = evaluate(&model, test, cfg.batch_size)?;
        if !test_rel_l2.is_finite() {
            return Err(Error::Numeric(format!("non-finite test error at epoch {epoch}")));
        }
        if test_rel_l2 < best.0 {
            best = (test_rel_l2, model.clone());
            if let Some(dir) = &output.dir {
                save_checkpoint(RunOutput::checkpoint_path(dir), &model, &stats, test_rel_l2)?;
            }
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            test_rel_l2,
            lr,
            seconds: started.elapsed().as_secs_f64(),
            best_test_rel_l2: best.0,
        };
        if let Some(f) = metrics.as_mut() {
            writeln!(f, "{}", record.csv_line())?;
            f.flush()?;
        }
        if output.verbose {
            eprintln!(
                "epoch {epoch:>4}  loss {:.5}  test {:.5}  best {:.5}  lr {:.2e}  {:.1}s",
                record.train_loss, record.test_rel_l2, record.best_test_rel_l2, record.lr, record.seconds
            );
        }
        history.push(record);
    }
    Ok(TrainOutcome { model, best: best.1, history, best_test_rel_l2: best.0 })
}
