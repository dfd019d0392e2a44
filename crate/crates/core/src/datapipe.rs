//! CSV ingestion, chronological splits, scaling, RevIN, patching and the
//! patch-first token layout.

use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{Tape, Var};

/// Floor applied to every standard deviation used for scaling.
pub const STD_FLOOR: f64 = 1e-8;

/// A `T × C` multivariate series, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesFrame {
    values: Vec<f64>,
    rows: usize,
    channel_names: Vec<String>,
    timestamps: Option<Vec<String>>,
}

impl SeriesFrame {
    pub fn new(values: Vec<f64>, channel_names: Vec<String>, timestamps: Option<Vec<String>>) -> Result<Self> {
        let c = channel_names.len();
        if c == 0 || values.is_empty() || !values.len().is_multiple_of(c) {
            return Err(Error::Data(format!(
                "{} values cannot form rows of {c} channels",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite value at row {}, column {}",
                i / c,
                i % c
            )));
        }
        let rows = values.len() / c;
        if let Some(ts) = &timestamps {
            if ts.len() != rows {
                return Err(Error::Data("timestamp count does not match rows".into()));
            }
        }
        Ok(Self {
            values,
            rows,
            channel_names,
            timestamps,
        })
    }

    /// Frame with generated channel names `ch0..`.
    pub fn from_values(values: Vec<f64>, channels: usize) -> Result<Self> {
        let names = (0..channels).map(|c| format!("ch{c}")).collect();
        Self::new(values, names, None)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn channels(&self) -> usize {
        self.channel_names.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channel_names
    }

    pub fn timestamps(&self) -> Option<&[String]> {
        self.timestamps.as_deref()
    }

    pub fn get(&self, t: usize, c: usize) -> f64 {
        self.values[t * self.channels() + c]
    }

    pub fn row(&self, t: usize) -> &[f64] {
        let c = self.channels();
        &self.values[t * c..(t + 1) * c]
    }

    /// Contiguous rows `start..end` as a new frame.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.rows {
            return Err(Error::Data(format!(
                "row range {start}..{end} invalid for {} rows",
                self.rows
            )));
        }
        let c = self.channels();
        Self::new(
            self.values[start * c..end * c].to_vec(),
            self.channel_names.clone(),
            self.timestamps.as_ref().map(|t| t[start..end].to_vec()),
        )
    }

    pub fn channel_index(&self, name: &str) -> Option<usize> {
        self.channel_names.iter().position(|n| n == name)
    }

    /// Remove a channel and return its column.
    pub fn take_channel(&mut self, idx: usize) -> Result<Vec<f64>> {
        let c = self.channels();
        if idx >= c || c == 1 {
            return Err(Error::Data(format!("cannot remove channel {idx} of {c}")));
        }
        let col: Vec<f64> = (0..self.rows).map(|t| self.get(t, idx)).collect();
        let mut values = Vec::with_capacity(self.rows * (c - 1));
        for t in 0..self.rows {
            for ch in 0..c {
                if ch != idx {
                    values.push(self.get(t, ch));
                }
            }
        }
        self.values = values;
        self.channel_names.remove(idx);
        Ok(col)
    }

    fn map_values(&self, f: impl Fn(usize, f64) -> f64) -> Self {
        let c = self.channels();
        let values = self
            .values
            .iter()
            .enumerate()
            .map(|(i, &v)| f(i % c, v))
            .collect();
        Self {
            values,
            ..self.clone()
        }
    }
}

/// Load a UTF-8 comma-separated file with a header row. Lines starting with
/// `#` are ignored. When `has_timestamp_col` the first column is kept as an
/// opaque string.
pub fn load_csv(path: impl AsRef<Path>, has_timestamp_col: bool) -> Result<SeriesFrame> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(file);
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let headers = rdr
        .headers()
        .map_err(|e| parse_err(csv_line(&e), e.to_string()))?
        .clone();
    let skip = usize::from(has_timestamp_col);
    if headers.len() <= skip {
        return Err(parse_err(1, "no value columns in header".into()));
    }
    let names: Vec<String> = headers.iter().skip(skip).map(str::to_owned).collect();
    let mut values = Vec::new();
    let mut stamps = has_timestamp_col.then(Vec::new);
    for rec in rdr.records() {
        let rec = rec.map_err(|e| parse_err(csv_line(&e), ragged_msg(&e)))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if let Some(s) = stamps.as_mut() {
            s.push(rec[0].to_owned());
        }
        for (col, cell) in rec.iter().enumerate().skip(skip) {
            let v: f64 = cell.parse().map_err(|_| {
                parse_err(line, format!("column {} ({}): non-numeric cell {cell:?}", col + 1, headers[col].to_owned()))
            })?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("column {}: non-finite value", col + 1)));
            }
            values.push(v);
        }
    }
    if values.is_empty() {
        return Err(parse_err(1, "no data rows".into()));
    }
    SeriesFrame::new(values, names, stamps)
}

fn csv_line(e: &csv::Error) -> usize {
    e.position().map_or(0, |p| p.line() as usize)
}

fn ragged_msg(e: &csv::Error) -> String {
    match e.kind() {
        csv::ErrorKind::UnequalLengths {
            expected_len, len, ..
        } => format!("ragged row: expected {expected_len} fields, found {len}"),
        _ => e.to_string(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SplitMode {
    Fractional { train: f64, val: f64, test: f64 },
    FixedCounts { train: usize, val: usize, test: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitSpec {
    pub mode: SplitMode,
    /// Rows of context prepended to val/test from the preceding segment.
    pub border_overlap: usize,
}

impl SplitSpec {
    pub fn fractional(train: f64, val: f64, test: f64, lookback: usize) -> Self {
        Self {
            mode: SplitMode::Fractional { train, val, test },
            border_overlap: lookback,
        }
    }

    /// Base (context-free) row counts for a series of `rows` rows.
    pub fn base_counts(&self, rows: usize) -> Result<(usize, usize, usize)> {
        match self.mode {
            SplitMode::Fractional { train, val, test } => {
                if [train, val, test].iter().any(|f| !(0.0..=1.0).contains(f))
                    || (train + val + test - 1.0).abs() > 1e-9
                {
                    return Err(Error::invalid(
                        "split",
                        format!("fractions {train}/{val}/{test} must be in [0,1] and sum to 1"),
                    ));
                }
                let n_train = (rows as f64 * train + 1e-9).floor() as usize;
                let n_test = (rows as f64 * test + 1e-9).floor() as usize;
                let n_val = rows - n_train - n_test;
                Ok((n_train, n_val, n_test))
            }
            SplitMode::FixedCounts { train, val, test } => {
                if train + val + test > rows {
                    return Err(Error::invalid(
                        "split",
                        format!("counts {train}+{val}+{test} exceed {rows} rows"),
                    ));
                }
                Ok((train, val, test))
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: SeriesFrame,
    pub val: Option<SeriesFrame>,
    pub test: Option<SeriesFrame>,
}

/// Chronological train/val/test split. Val and test are each prefixed with
/// `border_overlap` rows from their predecessor so their first window is
/// full length. Empty segments come back as `None`.
pub fn split(frame: &SeriesFrame, spec: &SplitSpec) -> Result<Splits> {
    let (n_train, n_val, n_test) = spec.base_counts(frame.rows())?;
    let ctx = spec.border_overlap;
    let check = |name: &str, n: usize| -> Result<()> {
        if n > 0 && n < ctx {
            return Err(Error::Data(format!(
                "{name} segment has {n} rows, shorter than lookback {ctx}"
            )));
        }
        Ok(())
    };
    check("train", n_train)?;
    check("val", n_val)?;
    check("test", n_test)?;
    if n_train == 0 {
        return Err(Error::Data("train segment is empty".into()));
    }
    let train = frame.slice_rows(0, n_train)?;
    let val = (n_val > 0)
        .then(|| frame.slice_rows(n_train - ctx.min(n_train), n_train + n_val))
        .transpose()?;
    let test_start = n_train + n_val;
    let test = (n_test > 0)
        .then(|| frame.slice_rows(test_start - ctx.min(test_start), test_start + n_test))
        .transpose()?;
    Ok(Splits { train, val, test })
}

/// Per-channel standardization fitted on training rows.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelScaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelScaler {
    pub fn fit(train: &SeriesFrame) -> Self {
        let (t, c) = (train.rows(), train.channels());
        let mut mean = vec![0.0; c];
        for row in 0..t {
            for (m, v) in mean.iter_mut().zip(train.row(row)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= t as f64);
        let mut var = vec![0.0; c];
        for row in 0..t {
            for ((s, v), m) in var.iter_mut().zip(train.row(row)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .iter()
            .map(|v| (v / t as f64).sqrt().max(STD_FLOOR))
            .collect();
        Self { mean, std }
    }

    pub fn transform(&self, frame: &SeriesFrame) -> SeriesFrame {
        frame.map_values(|c, v| (v - self.mean[c]) / self.std[c])
    }

    pub fn inverse(&self, frame: &SeriesFrame) -> SeriesFrame {
        frame.map_values(|c, v| v * self.std[c] + self.mean[c])
    }
}

/// Fit a scaler on `train` and apply it to `train` and every frame in
/// `others`.
pub fn fit_apply_scaler(
    train: &SeriesFrame,
    others: &[&SeriesFrame],
) -> (SeriesFrame, Vec<SeriesFrame>, ChannelScaler) {
    let scaler = ChannelScaler::fit(train);
    let scaled = others.iter().map(|f| scaler.transform(f)).collect();
    (scaler.transform(train), scaled, scaler)
}

/// Statistics captured by instance normalization of one `L × C` window.
#[derive(Clone, Debug, PartialEq)]
pub struct RevInState {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Per-channel standardization of a row-major `len × channels` window.
pub fn revin_normalize(window: &[f64], channels: usize) -> (Vec<f64>, RevInState) {
    revin_normalize_masked(window, channels, None)
}

/// As [`revin_normalize`], with statistics taken over observed entries only
/// (`mask == 1`). Unobserved entries stay zero in the output.
pub fn revin_normalize_masked(
    window: &[f64],
    channels: usize,
    mask: Option<&[f64]>,
) -> (Vec<f64>, RevInState) {
    let observed = |i: usize| mask.is_none_or(|m| m[i] != 0.0);
    let mut count = vec![0.0; channels];
    let mut mean = vec![0.0; channels];
    for (i, v) in window.iter().enumerate() {
        if observed(i) {
            mean[i % channels] += v;
            count[i % channels] += 1.0;
        }
    }
    for (m, n) in mean.iter_mut().zip(&count) {
        *m /= f64::max(*n, 1.0);
    }
    let mut var = vec![0.0; channels];
    for (i, v) in window.iter().enumerate() {
        if observed(i) {
            let d = v - mean[i % channels];
            var[i % channels] += d * d;
        }
    }
    let std: Vec<f64> = var
        .iter()
        .zip(&count)
        .map(|(v, n)| (v / f64::max(*n, 1.0)).sqrt().max(STD_FLOOR))
        .collect();
    let out = window
        .iter()
        .enumerate()
        .map(|(i, v)| {
            if observed(i) {
                (v - mean[i % channels]) / std[i % channels]
            } else {
                0.0
            }
        })
        .collect();
    (out, RevInState { mean, std })
}

/// Undo [`revin_normalize`] on a row-major `len × channels` output.
pub fn revin_denormalize(output: &[f64], state: &RevInState) -> Vec<f64> {
    let c = state.mean.len();
    output
        .iter()
        .enumerate()
        .map(|(i, v)| v * state.std[i % c] + state.mean[i % c])
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchSpec {
    pub patch_len: usize,
    pub stride: usize,
    /// Replicate the final value `stride` times, which adds exactly one
    /// patch.
    pub pad_end: bool,
}

impl PatchSpec {
    pub fn new(patch_len: usize, stride: usize, pad_end: bool) -> Self {
        Self {
            patch_len,
            stride,
            pad_end,
        }
    }

    pub fn validate(&self, len: usize) -> Result<()> {
        if self.patch_len > len {
            return Err(Error::invalid(
                "patchify",
                format!("patch_len {} exceeds window length {len}", self.patch_len),
            ));
        }
        if self.stride == 0 || self.stride > self.patch_len {
            return Err(Error::invalid(
                "patchify",
                format!(
                    "need 1 <= stride ({}) <= patch_len ({})",
                    self.stride, self.patch_len
                ),
            ));
        }
        Ok(())
    }

    /// Number of patches for a window of `len` steps.
    pub fn patch_count(&self, len: usize) -> Result<usize> {
        self.validate(len)?;
        Ok((len - self.patch_len) / self.stride + 1 + usize::from(self.pad_end))
    }
}

/// Split each channel of a row-major `len × channels` window into patches.
/// Output is row-major `(channels, P, patch_len)`.
pub fn patchify(window: &[f64], channels: usize, spec: &PatchSpec) -> Result<Vec<f64>> {
    let len = window.len() / channels;
    let p = spec.patch_count(len)?;
    let pl = spec.patch_len;
    let mut out = Vec::with_capacity(channels * p * pl);
    for c in 0..channels {
        for k in 0..p {
            for j in 0..pl {
                // replicate-last padding past the end
                let t = (k * spec.stride + j).min(len - 1);
                out.push(window[t * channels + c]);
            }
        }
    }
    Ok(out)
}

/// Patch-major flattening of (patch, channel) pairs: `index = p · C + c`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenLayout {
    pub patches: usize,
    pub channels: usize,
}

impl TokenLayout {
    pub fn new(patches: usize, channels: usize) -> Self {
        Self { patches, channels }
    }

    pub fn tokens(&self) -> usize {
        self.patches * self.channels
    }

    pub fn flat(&self, patch: usize, channel: usize) -> usize {
        patch * self.channels + channel
    }

    pub fn unflat(&self, index: usize) -> (usize, usize) {
        (index / self.channels, index % self.channels)
    }
}

/// Embedded token sequence `(batch, P·C, d_model)` on a tape.
#[derive(Clone, Copy, Debug)]
pub struct TokenBatch {
    pub tokens: Var,
    pub layout: TokenLayout,
    pub batch: usize,
    pub d_model: usize,
}

/// Project patches `(B, C, P, patch_len)` with `proj` (`patch_len × d`) and
/// `bias` (`d`), add the positional table `pos` (`P × d`, shared across
/// channels), and flatten patch-first to `(B, P·C, d)`.
pub fn embed_and_flatten(
    tape: &mut Tape,
    patches: Var,
    proj: Var,
    bias: Var,
    pos: Var,
) -> Result<TokenBatch> {
    let s = tape.shape(patches).to_vec();
    if s.len() != 4 {
        return Err(Error::shape("embed_and_flatten", &s, tape.shape(proj)));
    }
    let (b, c, p) = (s[0], s[1], s[2]);
    let d = tape.shape(proj)[1];
    if tape.shape(pos) != [p, d] {
        return Err(Error::shape("embed_and_flatten", &[p, d], tape.shape(pos)));
    }
    let x = tape.matmul(patches, proj)?;
    let x = tape.add(x, bias)?;
    let x = tape.add(x, pos)?;
    let tokens = tape.permute_reshape(x, &[0, 2, 1, 3], &[b, p * c, d])?;
    Ok(TokenBatch {
        tokens,
        layout: TokenLayout::new(p, c),
        batch: b,
        d_model: d,
    })
}

/// Binary observation mask: each entry is `0.0` (missing) with probability
/// `rate`, independently.
pub fn make_imputation_mask(len: usize, channels: usize, rate: f64, rng: &mut SeededRng) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid("imputation_mask", format!("rate {rate} not in [0, 1)")));
    }
    Ok((0..len * channels)
        .map(|_| if rng.bernoulli(rate) { 0.0 } else { 1.0 })
        .collect())
}

/// One input/target pair cut from a frame.
#[derive(Clone, Debug)]
pub struct Window<'a> {
    pub start: usize,
    pub input: &'a [f64],
    pub target: &'a [f64],
}

/// Number of `(lookback, horizon)` windows at the given stride.
pub fn window_count(rows: usize, lookback: usize, horizon: usize, stride: usize) -> usize {
    if rows < lookback + horizon || stride == 0 {
        0
    } else {
        (rows - lookback - horizon) / stride + 1
    }
}

/// Chronological `(L × C input, H × C target)` windows. With `horizon == 0`
/// the target is empty (reconstruction windows).
pub fn sliding_windows(
    frame: &SeriesFrame,
    lookback: usize,
    horizon: usize,
    stride: usize,
) -> Result<impl Iterator<Item = Window<'_>>> {
    if lookback == 0 || stride == 0 {
        return Err(Error::invalid("sliding_windows", "lookback and stride must be >= 1"));
    }
    if frame.rows() < lookback + horizon {
        return Err(Error::Data(format!(
            "{} rows cannot hold lookback {lookback} + horizon {horizon}",
            frame.rows()
        )));
    }
    let c = frame.channels();
    let n = window_count(frame.rows(), lookback, horizon, stride);
    let v = frame.values();
    Ok((0..n).map(move |i| {
        let s = i * stride;
        Window {
            start: s,
            input: &v[s * c..(s + lookback) * c],
            target: &v[(s + lookback) * c..(s + lookback + horizon) * c],
        }
    }))
}
