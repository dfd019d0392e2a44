//! Optimization loop, learning-rate schedule, evaluation and seed sweeps.

use std::f64::consts::PI;
use std::path::Path;

use rayon::prelude::*;
use statrs::statistics::Statistics;

use crate::config::{RunConfig, TaskName};
use crate::datapipe::{self, SeriesFrame, SplitSpec};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng::{streams, SeededRng};
use crate::tasks::{self, MetricReport, Setting, ThresholdSpec};
use crate::tensor::{ParamSet, Tape, Tensor, Var};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Bias-corrected Adam moments, indexed like the parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.tensor.len()]).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
        }
    }
}

/// One Adam update using the gradients stored on `params`. A non-finite
/// gradient aborts before anything is modified and names the parameter.
pub fn adam_step(params: &mut ParamSet, state: &mut AdamState, lr: f64) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::invalid("adam_step", "state does not match parameter set"));
    }
    for (id, p) in params.iter().enumerate() {
        let g = p.tensor.grad().ok_or_else(|| Error::invalid("adam_step", format!("{} has no gradient", p.name)))?;
        if g.len() != state.m[id].len() {
            return Err(Error::invalid("adam_step", format!("{}: moment shape mismatch", p.name)));
        }
        if let Some(i) = g.iter().position(|x| !x.is_finite()) {
            return Err(Error::Numeric {
                op: "adam_step",
                index: i,
                msg: format!("non-finite gradient in {}", p.name),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (id, p) in params.iter_mut().enumerate() {
        let g = p.tensor.grad().expect("checked above").to_vec();
        let (m, v) = (&mut state.m[id], &mut state.v[id]);
        for (i, w) in p.tensor.data_mut().iter_mut().enumerate() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            *w -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

/// Rescale all gradients so their global L2 norm is at most `max_norm`.
pub fn clip_grad_norm(params: &mut ParamSet, max_norm: f64) -> f64 {
    let norm = params
        .iter()
        .filter_map(|p| p.tensor.grad())
        .flat_map(|g| g.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for p in params.iter_mut() {
            if let Some(g) = p.tensor.grad() {
                let scaled = g.iter().map(|x| x * s).collect();
                p.tensor.set_grad(scaled).expect("same length");
            }
        }
    }
    norm
}

/// Cosine warm-up to `max_lr` then cosine annealing.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OneCycleSchedule {
    pub max_lr: f64,
    pub total_steps: usize,
    pub pct_start: f64,
    pub div_factor: f64,
    pub final_div_factor: f64,
}

impl OneCycleSchedule {
    pub fn new(max_lr: f64, total_steps: usize) -> Self {
        Self {
            max_lr,
            total_steps,
            pct_start: 0.4,
            div_factor: 25.0,
            final_div_factor: 1e4,
        }
    }

    pub fn peak_step(&self) -> usize {
        (self.pct_start * self.total_steps as f64 + 1e-9).floor() as usize
    }

    pub fn initial_lr(&self) -> f64 {
        self.max_lr / self.div_factor
    }

    pub fn final_lr(&self) -> f64 {
        self.max_lr / self.final_div_factor
    }

    pub fn lr(&self, step: usize) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::invalid(
                "onecycle_lr",
                format!("step {step} beyond total {}", self.total_steps),
            ));
        }
        let peak = self.peak_step();
        if step == peak {
            return Ok(self.max_lr);
        }
        let cos_interp = |from: f64, to: f64, frac: f64| from + (to - from) * (1.0 - (PI * frac).cos()) / 2.0;
        if step < peak {
            Ok(cos_interp(self.initial_lr(), self.max_lr, step as f64 / peak as f64))
        } else {
            let frac = (step - peak) as f64 / (self.total_steps - peak) as f64;
            Ok(cos_interp(self.max_lr, self.final_lr(), frac))
        }
    }
}

/// One row of the training history.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mse: Option<f64>,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
}

pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let err = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    w.write_record(["epoch", "train_loss", "val_mse", "lr"]).map_err(err)?;
    for r in history {
        w.write_record([
            r.epoch.to_string(),
            r.train_loss.to_string(),
            r.val_mse.map_or_else(String::new, |v| v.to_string()),
            r.lr.to_string(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// 1-based epoch with the lowest validation loss; the first wins ties.
pub fn best_epoch(val: &[f64]) -> Option<usize> {
    val.iter()
        .enumerate()
        .filter(|(_, v)| !v.is_nan())
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i + 1)
}

/// Anything the loop can optimize.
pub trait Objective {
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;
    fn train_examples(&self) -> usize;
    /// Scalar loss for the examples at `batch`.
    fn batch_loss(&mut self, tape: &mut Tape, vars: &[Var], batch: &[usize], rng: &mut SeededRng) -> Result<Var>;
    /// Validation loss with the current parameters, if a validation set exists.
    fn validate(&self) -> Result<Option<f64>>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LoopSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub learning_rate: f64,
    pub pct_start: f64,
    pub div_factor: f64,
    pub final_div_factor: f64,
    pub grad_clip: f64,
}

impl LoopSettings {
    pub fn from_run(run: &RunConfig) -> Self {
        Self {
            epochs: run.epochs,
            batch_size: run.batch_size,
            seed: run.seed,
            learning_rate: run.learning_rate,
            pct_start: run.pct_start,
            div_factor: run.div_factor,
            final_div_factor: run.final_div_factor,
            grad_clip: run.grad_clip,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    /// Per-step training losses.
    pub step_losses: Vec<f64>,
}

/// Shuffled mini-batch training with Adam under a one-cycle schedule. The
/// parameters of the best-validation epoch (or the last epoch without a
/// validation set) are left in the objective.
pub fn fit<O: Objective>(obj: &mut O, settings: &LoopSettings) -> Result<FitResult> {
    let n = obj.train_examples();
    if n == 0 {
        return Err(Error::Data("no training windows".into()));
    }
    if settings.epochs == 0 || settings.batch_size == 0 {
        return Err(Error::invalid("fit", "epochs and batch_size must be >= 1"));
    }
    let per_epoch = n.div_ceil(settings.batch_size);
    let schedule = OneCycleSchedule {
        max_lr: settings.learning_rate,
        total_steps: per_epoch * settings.epochs,
        pct_start: settings.pct_start,
        div_factor: settings.div_factor,
        final_div_factor: settings.final_div_factor,
    };
    let mut adam = AdamState::new(obj.params());
    let mut dropout_rng = SeededRng::with_stream(settings.seed, streams::DROPOUT);
    let mut history = Vec::with_capacity(settings.epochs);
    let mut step_losses = Vec::with_capacity(schedule.total_steps);
    let mut best: Option<(f64, usize, ParamSet)> = None;
    let mut step = 0usize;
    for epoch in 1..=settings.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        SeededRng::with_stream(settings.seed.wrapping_add(epoch as u64), streams::SHUFFLE).shuffle(&mut order);
        let (mut loss_sum, mut lr) = (0.0, 0.0);
        for batch in order.chunks(settings.batch_size) {
            let mut tape = Tape::new();
            let vars = obj.params().attach(&mut tape);
            let loss = obj.batch_loss(&mut tape, &vars, batch, &mut dropout_rng)?;
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    msg: format!("training loss is {value}"),
                });
            }
            tape.backward(loss)?;
            let params = obj.params_mut();
            params.collect_grads(&tape, &vars);
            if settings.grad_clip > 0.0 {
                clip_grad_norm(params, settings.grad_clip);
            }
            lr = schedule.lr(step)?;
            adam_step(params, &mut adam, lr).map_err(|e| match e {
                Error::Numeric { msg, .. } => Error::Diverged { epoch, step, msg },
                other => other,
            })?;
            loss_sum += value * batch.len() as f64;
            step_losses.push(value);
            step += 1;
        }
        let train_loss = loss_sum / n as f64;
        let val = obj.validate()?;
        log::info!(
            "epoch {epoch}: train_loss {train_loss:.6} val_mse {}",
            val.map_or("-".into(), |v| format!("{v:.6}"))
        );
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_mse: val,
            lr,
        });
        if let Some(v) = val {
            if best.as_ref().is_none_or(|(b, _, _)| v < *b) {
                best = Some((v, epoch, obj.params().clone()));
            }
        }
    }
    let best_epoch = match best {
        Some((_, epoch, params)) => {
            *obj.params_mut() = params;
            epoch
        }
        None => settings.epochs,
    };
    Ok(FitResult {
        history,
        best_epoch,
        step_losses,
    })
}

/// Raw series plus optional 0/1 anomaly labels.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub frame: SeriesFrame,
    pub labels: Option<Vec<u8>>,
}

impl Dataset {
    /// Load `run.data_path`, removing `run.label_column` when set.
    pub fn load(run: &RunConfig) -> Result<Self> {
        let frame = datapipe::load_csv(&run.data_path, run.has_timestamp)?;
        Self::from_frame(run, frame)
    }

    pub fn from_frame(run: &RunConfig, mut frame: SeriesFrame) -> Result<Self> {
        let labels = if run.label_column.is_empty() {
            None
        } else {
            let idx = frame
                .channel_index(&run.label_column)
                .ok_or_else(|| Error::Data(format!("label column {:?} not found", run.label_column)))?;
            let col = frame.take_channel(idx)?;
            let labels = col
                .iter()
                .map(|v| match *v {
                    0.0 => Ok(0u8),
                    1.0 => Ok(1u8),
                    _ => Err(Error::Data(format!("label value {v} is not 0 or 1"))),
                })
                .collect::<Result<Vec<_>>>()?;
            Some(labels)
        };
        Ok(Self { frame, labels })
    }
}

/// Scaled splits ready for windowing.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub train: SeriesFrame,
    pub val: Option<SeriesFrame>,
    pub test: Option<SeriesFrame>,
    pub setting: Setting,
    pub channels: usize,
    /// Labels aligned with the rows of `test`.
    pub test_labels: Option<Vec<u8>>,
}

pub fn prepare(run: &RunConfig, data: &Dataset) -> Result<Prepared> {
    let frame = &data.frame;
    let overlap = match run.task {
        TaskName::Forecast => run.seq_len,
        _ => 0,
    };
    let spec = SplitSpec::fractional(run.split_train, run.split_val, run.split_test, overlap);
    let splits = datapipe::split(frame, &spec)?;
    let others: Vec<&SeriesFrame> = splits.val.iter().chain(splits.test.iter()).collect();
    let (train, scaled, _) = datapipe::fit_apply_scaler(&splits.train, &others);
    let mut scaled = scaled.into_iter();
    let val = splits.val.as_ref().map(|_| scaled.next().expect("val scaled"));
    let test = splits.test.as_ref().map(|_| scaled.next().expect("test scaled"));
    let setting = if run.features == "MS" {
        let idx = if run.target.is_empty() {
            frame.channels() - 1
        } else {
            frame
                .channel_index(&run.target)
                .ok_or_else(|| Error::Data(format!("target column {:?} not found", run.target)))?
        };
        Setting::MS(idx)
    } else {
        Setting::M
    };
    let test_labels = match (&data.labels, &test) {
        (Some(l), Some(t)) => {
            let (_, _, n_test) = spec.base_counts(frame.rows())?;
            debug_assert_eq!(n_test, t.rows());
            Some(l[l.len() - n_test..].to_vec())
        }
        _ => None,
    };
    Ok(Prepared {
        channels: frame.channels(),
        train,
        val,
        test,
        setting,
        test_labels,
    })
}

/// Window starts for `(lookback, horizon)` windows of `frame` at `stride`.
fn starts(frame: &SeriesFrame, lookback: usize, horizon: usize, stride: usize) -> Vec<usize> {
    (0..datapipe::window_count(frame.rows(), lookback, horizon, stride))
        .map(|i| i * stride)
        .collect()
}

fn gather(frame: &SeriesFrame, starts: &[usize], offset: usize, len: usize) -> Result<Tensor> {
    let c = frame.channels();
    let v = frame.values();
    let mut data = Vec::with_capacity(starts.len() * len * c);
    for &s in starts {
        data.extend_from_slice(&v[(s + offset) * c..(s + offset + len) * c]);
    }
    Tensor::new(vec![starts.len(), len, c], data)
}

/// Imputation masks for `count` windows, drawn in window order.
fn eval_masks(count: usize, len: usize, channels: usize, rate: f64, seed: u64) -> Result<Vec<Vec<f64>>> {
    let mut rng = SeededRng::with_stream(seed, streams::IMPUTE_EVAL);
    (0..count)
        .map(|_| datapipe::make_imputation_mask(len, channels, rate, &mut rng))
        .collect()
}

/// Model bound to prepared data for one task.
pub struct TaskObjective<'a> {
    pub model: Model,
    run: &'a RunConfig,
    data: &'a Prepared,
    train_starts: Vec<usize>,
    mask_rng: SeededRng,
}

impl<'a> TaskObjective<'a> {
    pub fn new(model: Model, run: &'a RunConfig, data: &'a Prepared) -> Result<Self> {
        let horizon = if run.task == TaskName::Forecast { run.pred_len } else { 0 };
        let train_starts = starts(&data.train, run.seq_len, horizon, run.train_stride);
        if train_starts.is_empty() {
            return Err(Error::Data(format!(
                "train split of {} rows holds no window of {} + {horizon}",
                data.train.rows(),
                run.seq_len
            )));
        }
        Ok(Self {
            model,
            run,
            data,
            train_starts,
            mask_rng: SeededRng::with_stream(run.seed, streams::IMPUTE_TRAIN),
        })
    }
}

impl Objective for TaskObjective<'_> {
    fn params(&self) -> &ParamSet {
        &self.model.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.model.params
    }

    fn train_examples(&self) -> usize {
        self.train_starts.len()
    }

    fn batch_loss(&mut self, tape: &mut Tape, vars: &[Var], batch: &[usize], rng: &mut SeededRng) -> Result<Var> {
        let run = self.run;
        let frame = &self.data.train;
        let st: Vec<usize> = batch.iter().map(|&i| self.train_starts[i]).collect();
        let x = gather(frame, &st, 0, run.seq_len)?;
        match run.task {
            TaskName::Forecast => {
                let y = gather(frame, &st, run.seq_len, run.pred_len)?;
                let pred = self.model.forward(tape, vars, &x, None, true, rng, None)?;
                let y = tape.constant(y);
                tasks::forecast_loss(tape, pred, y, self.data.setting)
            }
            TaskName::Impute => {
                let c = frame.channels();
                let mut mask = Vec::with_capacity(x.len());
                for _ in 0..st.len() {
                    mask.extend(datapipe::make_imputation_mask(run.seq_len, c, run.mask_rate, &mut self.mask_rng)?);
                }
                let mask = Tensor::new(x.shape().to_vec(), mask)?;
                let observed = Tensor::new(
                    x.shape().to_vec(),
                    x.data().iter().zip(mask.data()).map(|(a, m)| a * m).collect(),
                )?;
                let recon = self.model.forward(tape, vars, &observed, Some(&mask), true, rng, None)?;
                let truth = tape.constant(x);
                tasks::masked_impute_loss(tape, recon, truth, &mask)
            }
            TaskName::Anomaly => {
                let recon = self.model.forward(tape, vars, &x, None, true, rng, None)?;
                let truth = tape.constant(x);
                tasks::forecast_loss(tape, recon, truth, Setting::M)
            }
        }
    }

    fn validate(&self) -> Result<Option<f64>> {
        match &self.data.val {
            None => Ok(None),
            Some(val) => {
                let reports = evaluate_split(&self.model, self.run, val, self.data.setting)?;
                Ok(Some(reports[0].value))
            }
        }
    }
}

/// Primary error metrics of the task on one split: `[mse, mae]`.
fn evaluate_split(model: &Model, run: &RunConfig, frame: &SeriesFrame, setting: Setting) -> Result<Vec<MetricReport>> {
    let l = run.seq_len;
    let c = frame.channels();
    let (mut mse, mut mae) = (Vec::new(), Vec::new());
    match run.task {
        TaskName::Forecast => {
            let st = starts(frame, l, run.pred_len, 1);
            for chunk in st.chunks(run.batch_size) {
                let x = gather(frame, chunk, 0, l)?;
                let y = gather(frame, chunk, l, run.pred_len)?;
                let pred = model.predict(&x, None)?;
                let (se, ae) = tasks::forecast_errors(&pred, &y, setting)?;
                let count = match setting {
                    Setting::M => y.len(),
                    Setting::MS(_) => y.len() / c,
                };
                mse.push((count, se));
                mae.push((count, ae));
            }
        }
        TaskName::Impute => {
            let st = starts(frame, l, 0, l);
            let masks = eval_masks(st.len(), l, c, run.mask_rate, run.seed)?;
            for (k, chunk) in st.chunks(run.batch_size).enumerate() {
                let x = gather(frame, chunk, 0, l)?;
                let m: Vec<f64> = masks[k * run.batch_size..k * run.batch_size + chunk.len()].concat();
                let observed: Vec<f64> = x.data().iter().zip(&m).map(|(a, b)| a * b).collect();
                let mask = Tensor::new(x.shape().to_vec(), m)?;
                let obs_t = Tensor::new(x.shape().to_vec(), observed.clone())?;
                let recon = model.predict(&obs_t, Some(&mask))?;
                let (_, score) = tasks::fill_and_score_imputation(&observed, recon.data(), mask.data(), x.data())?;
                if score.count > 0 {
                    mse.push((score.count, score.mse));
                    mae.push((score.count, score.mae));
                }
            }
        }
        TaskName::Anomaly => {
            let st = starts(frame, l, 0, l);
            for chunk in st.chunks(run.batch_size) {
                let x = gather(frame, chunk, 0, l)?;
                let recon = model.predict(&x, None)?;
                let (se, ae) = tasks::forecast_errors(&recon, &x, Setting::M)?;
                mse.push((x.len(), se));
                mae.push((x.len(), ae));
            }
        }
    }
    if mse.is_empty() {
        return Err(Error::Data(format!("split of {} rows yields no evaluation window", frame.rows())));
    }
    Ok(vec![
        tasks::weighted_metric_fold("mse", &mse)?,
        tasks::weighted_metric_fold("mae", &mae)?,
    ])
}

/// Per-time-step anomaly scores over non-overlapping windows; the tail that
/// does not fill a window is left unscored.
pub fn score_series(model: &Model, frame: &SeriesFrame, seq_len: usize, batch_size: usize) -> Result<Vec<f64>> {
    let st = starts(frame, seq_len, 0, seq_len);
    let mut out = Vec::with_capacity(st.len() * seq_len);
    for chunk in st.chunks(batch_size) {
        let x = gather(frame, chunk, 0, seq_len)?;
        let recon = model.predict(&x, None)?;
        out.extend(tasks::anomaly_scores(x.data(), recon.data(), frame.channels())?);
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub metrics: Vec<MetricReport>,
    /// Anomaly predictions for the scored test steps.
    pub labels: Option<Vec<u8>>,
}

/// Test-split metrics of a trained model.
pub fn evaluate(model: &Model, run: &RunConfig, data: &Prepared) -> Result<Evaluation> {
    let test = data
        .test
        .as_ref()
        .ok_or_else(|| Error::Data("no test split to evaluate".into()))?;
    let mut metrics = evaluate_split(model, run, test, data.setting)?;
    let mut labels = None;
    if run.task == TaskName::Anomaly {
        let train_scores = score_series(model, &data.train, run.seq_len, run.batch_size)?;
        let test_scores = score_series(model, test, run.seq_len, run.batch_size)?;
        let (pred, tau) = tasks::threshold_and_classify(
            &train_scores,
            &test_scores,
            &ThresholdSpec {
                alpha: run.anomaly_ratio,
            },
        )?;
        let n = pred.len();
        metrics.push(MetricReport::single("threshold", tau, train_scores.len() + n));
        metrics.push(MetricReport::single(
            "anomalies",
            pred.iter().map(|&p| f64::from(p)).sum(),
            n,
        ));
        if let Some(truth) = &data.test_labels {
            let truth = &truth[..n];
            let pred = if run.point_adjust {
                tasks::point_adjust(&pred, truth)
            } else {
                pred.clone()
            };
            let cm = tasks::classification_metrics(&pred, truth)?;
            for (name, v) in [
                ("precision", cm.precision),
                ("recall", cm.recall),
                ("f1", cm.f1),
                ("accuracy", cm.accuracy),
            ] {
                metrics.push(MetricReport::single(name, v, n));
            }
        }
        labels = Some(pred);
    }
    Ok(Evaluation { metrics, labels })
}

pub struct TrainOutcome {
    pub model: Model,
    pub fit: FitResult,
    pub evaluation: Option<Evaluation>,
}

/// Full run: prepare splits, build and fit the model, evaluate on test.
pub fn train(run: &RunConfig, data: &Dataset) -> Result<TrainOutcome> {
    let prepared = prepare(run, data)?;
    train_prepared(run, &prepared)
}

pub fn train_prepared(run: &RunConfig, prepared: &Prepared) -> Result<TrainOutcome> {
    run.task_kind(0).validate()?;
    let model = Model::new(run.model_config(prepared.channels), run.seed)?;
    let mut obj = TaskObjective::new(model, run, prepared)?;
    let fit = fit(&mut obj, &LoopSettings::from_run(run))?;
    let model = obj.model;
    let evaluation = prepared
        .test
        .as_ref()
        .map(|_| evaluate(&model, run, prepared))
        .transpose()?;
    Ok(TrainOutcome {
        model,
        fit,
        evaluation,
    })
}

/// Dispersion of one metric across seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedSweepResult {
    pub metric: String,
    pub seeds: Vec<u64>,
    /// `None` where the run failed.
    pub values: Vec<Option<f64>>,
    pub failures: Vec<(u64, String)>,
    pub mean: f64,
    pub std: f64,
    pub cv: f64,
    pub confidence: f64,
}

impl SeedSweepResult {
    /// Summary over the successful values; needs at least two.
    pub fn from_values(metric: &str, seeds: Vec<u64>, values: Vec<Option<f64>>, failures: Vec<(u64, String)>) -> Result<Self> {
        let ok: Vec<f64> = values.iter().flatten().copied().collect();
        if ok.len() < 2 {
            return Err(Error::invalid(
                "seed_sweep",
                format!("need at least 2 successful runs, have {}", ok.len()),
            ));
        }
        let mean = ok.iter().mean();
        let std = ok.iter().std_dev();
        let (cv, confidence) = cv_confidence(mean, std);
        Ok(Self {
            metric: metric.to_owned(),
            seeds,
            values,
            failures,
            mean,
            std,
            cv,
            confidence,
        })
    }

    pub fn is_partial(&self) -> bool {
        !self.failures.is_empty()
    }

    /// `seed,value` rows followed by `mean`, `std`, `cv` and `confidence`
    /// summary rows. Failed seeds have an empty value.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let err = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
        w.write_record(["seed", &self.metric]).map_err(err)?;
        for (s, v) in self.seeds.iter().zip(&self.values) {
            w.write_record([s.to_string(), v.map_or_else(String::new, |v| v.to_string())])
                .map_err(err)?;
        }
        for (k, v) in [
            ("mean", self.mean),
            ("std", self.std),
            ("cv", self.cv),
            ("confidence", self.confidence),
        ] {
            w.write_record([k.to_owned(), v.to_string()]).map_err(err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// `CV = 100 σ / |μ|` and `confidence = 100 − CV`.
pub fn cv_confidence(mean: f64, std: f64) -> (f64, f64) {
    let cv = 100.0 * std / mean.abs();
    (cv, 100.0 - cv)
}

/// Independent runs of `base` under each seed, in parallel, folded by seed
/// order. `metric` names a test metric such as `"mse"`.
pub fn seed_sweep(base: &RunConfig, data: &Dataset, seeds: &[u64], metric: &str) -> Result<SeedSweepResult> {
    if seeds.len() < 2 {
        return Err(Error::invalid("seed_sweep", "need at least 2 seeds"));
    }
    let prepared = prepare(base, data)?;
    let outcomes: Vec<Result<f64>> = seeds
        .par_iter()
        .map(|&seed| {
            let run = RunConfig { seed, ..base.clone() };
            let out = train_prepared(&run, &prepared)?;
            let eval = out.evaluation.ok_or_else(|| Error::Data("no test split".into()))?;
            eval.metrics
                .iter()
                .find(|m| m.name == metric)
                .map(|m| m.value)
                .ok_or_else(|| Error::invalid("seed_sweep", format!("unknown metric {metric}")))
        })
        .collect();
    let mut values = Vec::with_capacity(seeds.len());
    let mut failures = Vec::new();
    for (&seed, r) in seeds.iter().zip(outcomes) {
        match r {
            Ok(v) => values.push(Some(v)),
            Err(e) => {
                log::warn!("seed {seed} failed: {e}");
                failures.push((seed, e.to_string()));
                values.push(None);
            }
        }
    }
    SeedSweepResult::from_values(metric, seeds.to_vec(), values, failures)
}
