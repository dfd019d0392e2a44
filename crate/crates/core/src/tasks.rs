//! Task heads, losses, metrics and evaluation protocols for forecasting,
//! masked imputation and reconstruction-based anomaly detection.

use std::io::Write;
use std::path::Path;

use crate::attention::{Bound, Init, ParamShape};
use crate::datapipe::TokenLayout;
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{Tape, Tensor, Var};

/// Which channels a forecasting loss and its metrics look at.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Setting {
    /// All channels.
    M,
    /// Multivariate input, single target channel.
    MS(usize),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TaskKind {
    Forecast { horizon: usize, setting: Setting },
    Impute { mask_rate: f64 },
    AnomalyDetect { alpha: f64 },
}

impl TaskKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            TaskKind::Forecast { horizon, .. } if horizon == 0 => {
                Err(Error::invalid("task", "horizon must be >= 1"))
            }
            TaskKind::Impute { mask_rate } if !(0.0..1.0).contains(&mask_rate) => {
                Err(Error::invalid("task", format!("mask rate {mask_rate} not in [0, 1)")))
            }
            TaskKind::AnomalyDetect { alpha } if !(alpha > 0.0 && alpha < 1.0) => {
                Err(Error::invalid("task", format!("alpha {alpha} not in (0, 1)")))
            }
            _ => Ok(()),
        }
    }

    /// Model output length for a lookback of `seq_len`.
    pub fn out_len(&self, seq_len: usize) -> usize {
        match self {
            TaskKind::Forecast { horizon, .. } => *horizon,
            _ => seq_len,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::Forecast { .. } => "forecast",
            TaskKind::Impute { .. } => "impute",
            TaskKind::AnomalyDetect { .. } => "anomaly",
        }
    }
}

/// Channel-shared flatten-linear head.
#[derive(Clone, Copy, Debug)]
pub struct HeadParams {
    pub weight: Var,
    pub bias: Var,
}

impl HeadParams {
    pub fn shapes(in_features: usize, out_len: usize) -> Vec<ParamShape> {
        let b = 1.0 / (in_features as f64).sqrt();
        vec![
            ParamShape::new("head.weight", &[in_features, out_len], Init::Uniform(b)),
            ParamShape::new("head.bias", &[out_len], Init::Zeros),
        ]
    }

    pub fn bind(b: Bound<'_>) -> Result<Self> {
        Ok(Self {
            weight: b.var("head.weight")?,
            bias: b.var("head.bias")?,
        })
    }
}

/// For each channel, concatenate its `P` token embeddings (flat indices
/// `p·C + c`) and apply the shared linear map. `(B, P·C, d)` →
/// `(B, out, C)`.
pub fn head_forward(
    tape: &mut Tape,
    tokens: Var,
    layout: &TokenLayout,
    head: &HeadParams,
    fc_dropout: f64,
    training: bool,
    rng: &mut SeededRng,
) -> Result<Var> {
    let s = tape.shape(tokens).to_vec();
    let (p, c) = (layout.patches, layout.channels);
    if s.len() != 3 || s[1] != layout.tokens() {
        return Err(Error::shape("head_forward", &s, &[0, layout.tokens(), 0]));
    }
    let (b, d) = (s[0], s[2]);
    let wshape = tape.shape(head.weight).to_vec();
    if wshape[0] != p * d {
        return Err(Error::shape("head_forward", &[p * d], &wshape));
    }
    let x = tape.reshape(tokens, &[b, p, c, d])?;
    let x = tape.permute_reshape(x, &[0, 2, 1, 3], &[b, c, p * d])?;
    let x = tape.dropout(x, fc_dropout, training, rng)?;
    let y = tape.matmul(x, head.weight)?;
    let y = tape.add(y, head.bias)?;
    tape.permute(y, &[0, 2, 1])
}

/// Restrict `(B, T, C)` to the target channel in the MS setting.
fn select_setting(tape: &mut Tape, x: Var, setting: Setting) -> Result<Var> {
    match setting {
        Setting::M => Ok(x),
        Setting::MS(ch) => {
            let s = tape.shape(x).to_vec();
            if ch >= s[2] {
                return Err(Error::invalid("forecast_loss", format!("target channel {ch} >= {}", s[2])));
            }
            let sel = Tensor::from_fn(&[s[2], 1], |i| f64::from(u8::from(i == ch)));
            let sel = tape.constant(sel);
            tape.matmul(x, sel)
        }
    }
}

/// Mean squared error over all entries (M) or the target channel (MS).
pub fn forecast_loss(tape: &mut Tape, pred: Var, truth: Var, setting: Setting) -> Result<Var> {
    if tape.shape(pred) != tape.shape(truth) || tape.shape(pred).len() != 3 {
        return Err(Error::shape("forecast_loss", tape.shape(pred), tape.shape(truth)));
    }
    let d = tape.sub(pred, truth)?;
    let d = select_setting(tape, d, setting)?;
    let d = tape.square(d);
    Ok(tape.mean(d))
}

/// Eager `(mse, mae)` of `(B, T, C)` predictions under `setting`.
pub fn forecast_errors(pred: &Tensor, truth: &Tensor, setting: Setting) -> Result<(f64, f64)> {
    if pred.shape() != truth.shape() || pred.rank() != 3 {
        return Err(Error::shape("forecast_errors", pred.shape(), truth.shape()));
    }
    let c = pred.shape()[2];
    let (mut se, mut ae, mut n) = (0.0, 0.0, 0usize);
    for (i, (p, t)) in pred.data().iter().zip(truth.data()).enumerate() {
        if let Setting::MS(ch) = setting {
            if i % c != ch {
                continue;
            }
        }
        se += (p - t) * (p - t);
        ae += (p - t).abs();
        n += 1;
    }
    if n == 0 {
        return Err(Error::invalid("forecast_errors", "target channel out of range"));
    }
    Ok((se / n as f64, ae / n as f64))
}

/// MSE over masked-out positions (`mask == 0`). With nothing masked the
/// loss is a constant zero and a warning is logged.
pub fn masked_impute_loss(tape: &mut Tape, recon: Var, truth: Var, mask: &Tensor) -> Result<Var> {
    if tape.shape(recon) != tape.shape(truth) || tape.shape(recon) != mask.shape() {
        return Err(Error::shape("masked_impute_loss", tape.shape(recon), mask.shape()));
    }
    let missing = mask.data().iter().filter(|m| **m == 0.0).count();
    if missing == 0 {
        log::warn!("masked_impute_loss: no masked positions, loss is 0");
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let inv = tape.constant(mask.map(|m| 1.0 - m));
    let d = tape.sub(recon, truth)?;
    let d = tape.mul(d, inv)?;
    let d = tape.square(d);
    let s = tape.sum(d);
    Ok(tape.scale(s, 1.0 / missing as f64))
}

/// One batch-level contribution to a metric.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub name: String,
    pub value: f64,
    pub count: usize,
    pub batches: Vec<(usize, f64)>,
}

impl MetricReport {
    pub fn single(name: impl Into<String>, value: f64, count: usize) -> Self {
        Self {
            name: name.into(),
            value,
            count,
            batches: vec![(count, value)],
        }
    }
}

/// Size-weighted average `Σ vᵢ sᵢ / Σ sᵢ` over batches, last partial batch
/// included.
pub fn weighted_metric_fold(name: &str, batches: &[(usize, f64)]) -> Result<MetricReport> {
    if batches.is_empty() {
        return Err(Error::invalid("weighted_metric_fold", "no batches"));
    }
    if batches.iter().any(|(s, _)| *s == 0) {
        return Err(Error::invalid("weighted_metric_fold", "batch size 0"));
    }
    let total: usize = batches.iter().map(|(s, _)| s).sum();
    let value = batches.iter().map(|(s, v)| v * *s as f64).sum::<f64>() / total as f64;
    Ok(MetricReport {
        name: name.to_owned(),
        value,
        count: total,
        batches: batches.to_vec(),
    })
}

/// Write `metric,value,count` rows.
pub fn write_metrics_csv(path: &Path, reports: &[MetricReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let err = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    w.write_record(["metric", "value", "count"]).map_err(err)?;
    for r in reports {
        w.write_record([r.name.clone(), r.value.to_string(), r.count.to_string()])
            .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Read back a file from [`write_metrics_csv`] as `(name, value, count)`.
pub fn read_metrics_csv(path: &Path) -> Result<Vec<(String, f64, usize)>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::Data(e.to_string()))?;
        let bad = || Error::Data(format!("{}: malformed metric row", path.display()));
        out.push((
            rec[0].to_owned(),
            rec[1].parse().map_err(|_| bad())?,
            rec[2].parse().map_err(|_| bad())?,
        ));
    }
    Ok(out)
}

/// Imputation result over the masked set.
#[derive(Clone, Debug, PartialEq)]
pub struct ImputationScore {
    pub mse: f64,
    pub mae: f64,
    /// Number of masked positions.
    pub count: usize,
}

/// `filled = observed ⊙ M + recon ⊙ (1 − M)`; errors are measured against
/// `truth` on `{M = 0}` only. With nothing masked both errors are 0.
pub fn fill_and_score_imputation(
    observed: &[f64],
    recon: &[f64],
    mask: &[f64],
    truth: &[f64],
) -> Result<(Vec<f64>, ImputationScore)> {
    let n = observed.len();
    if recon.len() != n || mask.len() != n || truth.len() != n {
        return Err(Error::invalid("fill_and_score_imputation", "length mismatch"));
    }
    let mut filled = Vec::with_capacity(n);
    let (mut se, mut ae, mut count) = (0.0, 0.0, 0usize);
    for i in 0..n {
        if mask[i] != 0.0 {
            filled.push(observed[i]);
        } else {
            filled.push(recon[i]);
            let d = recon[i] - truth[i];
            se += d * d;
            ae += d.abs();
            count += 1;
        }
    }
    let (mse, mae) = if count == 0 {
        (0.0, 0.0)
    } else {
        (se / count as f64, ae / count as f64)
    };
    Ok((filled, ImputationScore { mse, mae, count }))
}

/// Per-time-step channel-summed squared reconstruction error of row-major
/// `T × C` series.
pub fn anomaly_scores(x: &[f64], recon: &[f64], channels: usize) -> Result<Vec<f64>> {
    if x.len() != recon.len() || channels == 0 || !x.len().is_multiple_of(channels) {
        return Err(Error::invalid("anomaly_scores", "length mismatch"));
    }
    Ok(x.chunks(channels)
        .zip(recon.chunks(channels))
        .map(|(a, b)| a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum())
        .collect())
}

/// Nearest-rank quantile: the sorted element at rank `⌈q·n⌉` (1-based,
/// clamped to `[1, n]`).
pub fn nearest_rank_quantile(scores: &[f64], q: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::invalid("quantile", "empty scores"));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::invalid("quantile", format!("q {q} not in [0, 1]")));
    }
    let mut s = scores.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    // guard against q·n landing a hair above an integer
    let rank = ((q * n as f64) - 1e-9).ceil().max(1.0) as usize;
    Ok(s[rank.min(n) - 1])
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThresholdSpec {
    pub alpha: f64,
}

/// `τ = quantile(train ∪ test, 1 − α)`; test labels are `1` iff `s > τ`.
pub fn threshold_and_classify(train: &[f64], test: &[f64], spec: &ThresholdSpec) -> Result<(Vec<u8>, f64)> {
    if !(spec.alpha > 0.0 && spec.alpha < 1.0) {
        return Err(Error::invalid("threshold", format!("alpha {} not in (0, 1)", spec.alpha)));
    }
    let pooled: Vec<f64> = train.iter().chain(test).copied().collect();
    let tau = nearest_rank_quantile(&pooled, 1.0 - spec.alpha)?;
    let labels = test.iter().map(|s| u8::from(*s > tau)).collect();
    Ok((labels, tau))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
    /// Set when a metric's denominator was zero and it was reported as 0.
    pub precision_undefined: bool,
    pub recall_undefined: bool,
    pub f1_undefined: bool,
}

pub fn classification_metrics(pred: &[u8], truth: &[u8]) -> Result<ClassMetrics> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::invalid("classification_metrics", "length mismatch or empty"));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (&p, &t) in pred.iter().zip(truth) {
        match (p != 0, t != 0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { (0.0, true) } else { (a as f64 / b as f64, false) };
    let (precision, pu) = ratio(tp, tp + fp);
    let (recall, ru) = ratio(tp, tp + fn_);
    let (f1, fu) = if precision + recall == 0.0 {
        (0.0, true)
    } else {
        (2.0 * precision * recall / (precision + recall), false)
    };
    Ok(ClassMetrics {
        precision,
        recall,
        f1,
        accuracy: (tp + tn) as f64 / pred.len() as f64,
        tp,
        fp,
        fn_,
        tn,
        precision_undefined: pu,
        recall_undefined: ru,
        f1_undefined: fu,
    })
}

/// Point adjustment: if any step of a true anomaly segment is detected, the
/// whole segment counts as detected.
pub fn point_adjust(pred: &[u8], truth: &[u8]) -> Vec<u8> {
    let mut out = pred.to_vec();
    let n = truth.len();
    let mut i = 0;
    while i < n {
        if truth[i] == 0 {
            i += 1;
            continue;
        }
        let start = i;
        while i < n && truth[i] != 0 {
            i += 1;
        }
        if pred[start..i].iter().any(|p| *p != 0) {
            out[start..i].iter_mut().for_each(|p| *p = 1);
        }
    }
    out
}

/// Write one `label` per line with a header.
pub fn write_labels_csv(path: &Path, labels: &[u8]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    writeln!(w, "label").map_err(|e| Error::io(path, e))?;
    for l in labels {
        writeln!(w, "{l}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
