//! Flat key-value run configuration stored as TOML.
//!
//! Every key is a top-level scalar. Unknown keys are rejected, and all
//! missing required keys and type errors are reported together.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use toml::Value;

use crate::attention::AttentionMode;
use crate::datapipe::PatchSpec;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tasks::{Setting, TaskKind};

/// Channel count above which compressed attention is used by default.
pub const DECOP_CHANNEL_THRESHOLD: usize = 60;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskName {
    Forecast,
    Impute,
    Anomaly,
}

impl TaskName {
    fn name(self) -> &'static str {
        match self {
            TaskName::Forecast => "forecast",
            TaskName::Impute => "impute",
            TaskName::Anomaly => "anomaly",
        }
    }
}

impl FromStr for TaskName {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "forecast" => Ok(TaskName::Forecast),
            "impute" => Ok(TaskName::Impute),
            "anomaly" => Ok(TaskName::Anomaly),
            _ => Err(format!("unknown task {s:?} (forecast, impute, anomaly)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decop {
    /// On when the dataset has more than 60 channels.
    Auto,
    On,
    Off,
}

impl FromStr for Decop {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "auto" => Ok(Decop::Auto),
            "on" => Ok(Decop::On),
            "off" => Ok(Decop::Off),
            _ => Err(format!("unknown decop setting {s:?} (auto, on, off)")),
        }
    }
}

impl fmt::Display for Decop {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Decop::Auto => "auto",
            Decop::On => "on",
            Decop::Off => "off",
        })
    }
}

/// Everything one training run needs besides the data itself.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub task: TaskName,
    pub data_path: String,
    pub has_timestamp: bool,
    /// Target channel name for the MS setting; empty means the last column.
    pub target: String,
    /// `"M"` or `"MS"`.
    pub features: String,
    /// Column holding 0/1 anomaly labels, removed from the model input.
    pub label_column: String,
    pub seq_len: usize,
    pub pred_len: usize,
    pub mask_rate: f64,
    pub anomaly_ratio: f64,
    pub point_adjust: bool,
    pub split_train: f64,
    pub split_val: f64,
    pub split_test: f64,
    pub patch_len: usize,
    pub stride: usize,
    pub pad_end: bool,
    pub e_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub fc_dropout: f64,
    pub attn_dropout: f64,
    pub k: usize,
    pub attention_mode: AttentionMode,
    pub decop: Decop,
    pub revin: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub pct_start: f64,
    pub div_factor: f64,
    pub final_div_factor: f64,
    /// Gradient norm clip; 0 disables.
    pub grad_clip: f64,
    /// Step between consecutive training windows.
    pub train_stride: usize,
    /// At most `i64::MAX` so it survives a TOML round trip.
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: TaskName::Forecast,
            data_path: String::new(),
            has_timestamp: false,
            target: String::new(),
            features: "M".into(),
            label_column: String::new(),
            seq_len: 96,
            pred_len: 96,
            mask_rate: 0.25,
            anomaly_ratio: 0.01,
            point_adjust: false,
            split_train: 0.7,
            split_val: 0.1,
            split_test: 0.2,
            patch_len: 16,
            stride: 8,
            pad_end: true,
            e_layers: 2,
            n_heads: 4,
            d_model: 32,
            d_ff: 64,
            dropout: 0.1,
            fc_dropout: 0.05,
            attn_dropout: 0.8,
            k: 64,
            attention_mode: AttentionMode::Crab,
            decop: Decop::Auto,
            revin: true,
            epochs: 10,
            batch_size: 32,
            learning_rate: 0.005,
            pct_start: 0.4,
            div_factor: 25.0,
            final_div_factor: 1e4,
            grad_clip: 0.0,
            train_stride: 1,
            seed: 2021,
        }
    }
}

const REQUIRED: [&str; 3] = ["task", "data_path", "seq_len"];

const KEYS: [&str; 41] = [
    "task",
    "data_path",
    "has_timestamp",
    "target",
    "features",
    "label_column",
    "seq_len",
    "pred_len",
    "mask_rate",
    "anomaly_ratio",
    "point_adjust",
    "split_train",
    "split_val",
    "split_test",
    "patch_len",
    "stride",
    "pad_end",
    "e_layers",
    "n_heads",
    "d_model",
    "d_ff",
    "dropout",
    "fc_dropout",
    "attn_dropout",
    "k",
    "attention_mode",
    "decop",
    "revin",
    "epochs",
    "batch_size",
    "learning_rate",
    "pct_start",
    "div_factor",
    "final_div_factor",
    "grad_clip",
    "train_stride",
    "seed",
    // accepted for schema compatibility; unused by the model
    "label_len",
    "model",
    "data",
    "des",
];

/// Collects per-key errors so they can be reported together.
struct Reader<'a> {
    map: &'a toml::Table,
    errors: Vec<String>,
}

impl Reader<'_> {
    fn get<T>(&mut self, key: &str, conv: impl Fn(&Value) -> Option<T>, want: &str) -> Option<T> {
        let v = self.map.get(key)?;
        let out = conv(v);
        if out.is_none() {
            self.errors.push(format!("{key}: expected {want}, got {v}"));
        }
        out
    }

    fn usize(&mut self, key: &str, dst: &mut usize) {
        if let Some(v) = self.get(key, |v| v.as_integer().and_then(|i| usize::try_from(i).ok()), "a nonnegative integer") {
            *dst = v;
        }
    }

    fn u64(&mut self, key: &str, dst: &mut u64) {
        if let Some(v) = self.get(key, |v| v.as_integer().and_then(|i| u64::try_from(i).ok()), "a nonnegative integer") {
            *dst = v;
        }
    }

    fn f64(&mut self, key: &str, dst: &mut f64) {
        let conv = |v: &Value| v.as_float().or_else(|| v.as_integer().map(|i| i as f64));
        if let Some(v) = self.get(key, conv, "a number") {
            *dst = v;
        }
    }

    fn bool(&mut self, key: &str, dst: &mut bool) {
        if let Some(v) = self.get(key, Value::as_bool, "a boolean") {
            *dst = v;
        }
    }

    fn string(&mut self, key: &str, dst: &mut String) {
        if let Some(v) = self.get(key, |v| v.as_str().map(str::to_owned), "a string") {
            *dst = v;
        }
    }

    fn parsed<T: FromStr>(&mut self, key: &str, dst: &mut T)
    where
        T::Err: fmt::Display,
    {
        let mut s = String::new();
        if self.map.contains_key(key) {
            self.string(key, &mut s);
            if self.map.get(key).is_some_and(Value::is_str) {
                match s.parse() {
                    Ok(v) => *dst = v,
                    Err(e) => self.errors.push(format!("{key}: {e}")),
                }
            }
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(vec![e.to_string()]))?;
        Self::from_table(&table)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn from_table(table: &toml::Table) -> Result<Self> {
        let mut errors = Vec::new();
        for key in table.keys() {
            if !KEYS.contains(&key.as_str()) {
                errors.push(format!("unknown key {key:?}"));
            }
        }
        let missing: Vec<&str> = REQUIRED.iter().copied().filter(|k| !table.contains_key(*k)).collect();
        if !missing.is_empty() {
            errors.push(format!("missing required keys: {}", missing.join(", ")));
        }
        let mut c = RunConfig::default();
        let d_ff_given = table.contains_key("d_ff");
        let mut r = Reader { map: table, errors };
        r.parsed("task", &mut c.task);
        r.string("data_path", &mut c.data_path);
        r.bool("has_timestamp", &mut c.has_timestamp);
        r.string("target", &mut c.target);
        r.string("features", &mut c.features);
        r.string("label_column", &mut c.label_column);
        r.usize("seq_len", &mut c.seq_len);
        r.usize("pred_len", &mut c.pred_len);
        r.f64("mask_rate", &mut c.mask_rate);
        r.f64("anomaly_ratio", &mut c.anomaly_ratio);
        r.bool("point_adjust", &mut c.point_adjust);
        r.f64("split_train", &mut c.split_train);
        r.f64("split_val", &mut c.split_val);
        r.f64("split_test", &mut c.split_test);
        r.usize("patch_len", &mut c.patch_len);
        r.usize("stride", &mut c.stride);
        r.bool("pad_end", &mut c.pad_end);
        r.usize("e_layers", &mut c.e_layers);
        r.usize("n_heads", &mut c.n_heads);
        r.usize("d_model", &mut c.d_model);
        r.usize("d_ff", &mut c.d_ff);
        r.f64("dropout", &mut c.dropout);
        r.f64("fc_dropout", &mut c.fc_dropout);
        r.f64("attn_dropout", &mut c.attn_dropout);
        r.usize("k", &mut c.k);
        r.parsed("attention_mode", &mut c.attention_mode);
        r.parsed("decop", &mut c.decop);
        r.bool("revin", &mut c.revin);
        r.usize("epochs", &mut c.epochs);
        r.usize("batch_size", &mut c.batch_size);
        r.f64("learning_rate", &mut c.learning_rate);
        r.f64("pct_start", &mut c.pct_start);
        r.f64("div_factor", &mut c.div_factor);
        r.f64("final_div_factor", &mut c.final_div_factor);
        r.f64("grad_clip", &mut c.grad_clip);
        r.usize("train_stride", &mut c.train_stride);
        r.u64("seed", &mut c.seed);
        for unused in ["label_len", "model", "data", "des"] {
            if table.contains_key(unused) {
                log::info!("config key {unused} is accepted but unused");
            }
        }
        if !d_ff_given {
            c.d_ff = 2 * c.d_model;
        }
        let mut errors = r.errors;
        errors.extend(c.semantic_errors());
        if errors.is_empty() {
            Ok(c)
        } else {
            Err(Error::Config(errors))
        }
    }

    fn semantic_errors(&self) -> Vec<String> {
        let mut e = Vec::new();
        if self.features != "M" && self.features != "MS" {
            e.push(format!("features: expected \"M\" or \"MS\", got {:?}", self.features));
        }
        for (k, v) in [
            ("seq_len", self.seq_len),
            ("patch_len", self.patch_len),
            ("stride", self.stride),
            ("e_layers", self.e_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("batch_size", self.batch_size),
            ("train_stride", self.train_stride),
        ] {
            if v == 0 {
                e.push(format!("{k}: must be >= 1"));
            }
        }
        if self.task == TaskName::Forecast && self.pred_len == 0 {
            e.push("pred_len: must be >= 1".into());
        }
        for (k, v) in [("dropout", self.dropout), ("fc_dropout", self.fc_dropout), ("attn_dropout", self.attn_dropout)] {
            if !(0.0..1.0).contains(&v) {
                e.push(format!("{k}: {v} not in [0, 1)"));
            }
        }
        if !(0.0..1.0).contains(&self.mask_rate) {
            e.push(format!("mask_rate: {} not in [0, 1)", self.mask_rate));
        }
        if !(self.anomaly_ratio > 0.0 && self.anomaly_ratio < 1.0) {
            e.push(format!("anomaly_ratio: {} not in (0, 1)", self.anomaly_ratio));
        }
        if !(self.pct_start > 0.0 && self.pct_start < 1.0) {
            e.push(format!("pct_start: {} not in (0, 1)", self.pct_start));
        }
        if self.learning_rate <= 0.0 || self.div_factor <= 0.0 || self.final_div_factor <= 0.0 {
            e.push("learning_rate, div_factor and final_div_factor must be positive".into());
        }
        if self.n_heads > 0 && !self.d_model.is_multiple_of(self.n_heads) {
            e.push(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        let s = self.split_train + self.split_val + self.split_test;
        if (s - 1.0).abs() > 1e-9 {
            e.push(format!("split fractions sum to {s}, not 1"));
        }
        if self.grad_clip < 0.0 {
            e.push("grad_clip: must be >= 0".into());
        }
        e
    }

    /// Every key with its value, defaults included.
    pub fn to_map(&self) -> BTreeMap<String, Value> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: Value| {
            m.insert(k.to_owned(), v);
        };
        let int = |v: usize| Value::Integer(v as i64);
        put("task", Value::String(self.task.name().into()));
        put("data_path", Value::String(self.data_path.clone()));
        put("has_timestamp", Value::Boolean(self.has_timestamp));
        put("target", Value::String(self.target.clone()));
        put("features", Value::String(self.features.clone()));
        put("label_column", Value::String(self.label_column.clone()));
        put("seq_len", int(self.seq_len));
        put("pred_len", int(self.pred_len));
        put("mask_rate", Value::Float(self.mask_rate));
        put("anomaly_ratio", Value::Float(self.anomaly_ratio));
        put("point_adjust", Value::Boolean(self.point_adjust));
        put("split_train", Value::Float(self.split_train));
        put("split_val", Value::Float(self.split_val));
        put("split_test", Value::Float(self.split_test));
        put("patch_len", int(self.patch_len));
        put("stride", int(self.stride));
        put("pad_end", Value::Boolean(self.pad_end));
        put("e_layers", int(self.e_layers));
        put("n_heads", int(self.n_heads));
        put("d_model", int(self.d_model));
        put("d_ff", int(self.d_ff));
        put("dropout", Value::Float(self.dropout));
        put("fc_dropout", Value::Float(self.fc_dropout));
        put("attn_dropout", Value::Float(self.attn_dropout));
        put("k", int(self.k));
        put("attention_mode", Value::String(self.attention_mode.name().into()));
        put("decop", Value::String(self.decop.to_string()));
        put("revin", Value::Boolean(self.revin));
        put("epochs", int(self.epochs));
        put("batch_size", int(self.batch_size));
        put("learning_rate", Value::Float(self.learning_rate));
        put("pct_start", Value::Float(self.pct_start));
        put("div_factor", Value::Float(self.div_factor));
        put("final_div_factor", Value::Float(self.final_div_factor));
        put("grad_clip", Value::Float(self.grad_clip));
        put("train_stride", int(self.train_stride));
        put("seed", Value::Integer(self.seed as i64));
        m
    }

    pub fn to_toml_string(&self) -> String {
        let table: toml::Table = self.to_map().into_iter().collect();
        toml::to_string(&table).expect("flat table serializes")
    }

    /// Fails for seeds above `i64::MAX`, which TOML cannot represent.
    pub fn save(&self, path: &Path) -> Result<()> {
        if i64::try_from(self.seed).is_err() {
            return Err(Error::Config(vec![format!("seed: {} exceeds the TOML integer range", self.seed)]));
        }
        std::fs::write(path, self.to_toml_string()).map_err(|e| Error::io(path, e))
    }

    pub fn task_kind(&self, target_channel: usize) -> TaskKind {
        match self.task {
            TaskName::Forecast => TaskKind::Forecast {
                horizon: self.pred_len,
                setting: if self.features == "MS" {
                    Setting::MS(target_channel)
                } else {
                    Setting::M
                },
            },
            TaskName::Impute => TaskKind::Impute {
                mask_rate: self.mask_rate,
            },
            TaskName::Anomaly => TaskKind::AnomalyDetect {
                alpha: self.anomaly_ratio,
            },
        }
    }

    /// Attention mode after resolving the compressed-attention default for
    /// `channels` input channels.
    pub fn resolved_mode(&self, channels: usize) -> AttentionMode {
        let want_decop = match self.decop {
            Decop::On => true,
            Decop::Off => false,
            Decop::Auto => channels > DECOP_CHANNEL_THRESHOLD,
        };
        match self.attention_mode {
            AttentionMode::Crab if want_decop => AttentionMode::CrabDecop,
            AttentionMode::CrabDecop if !want_decop && self.decop == Decop::Off => AttentionMode::Crab,
            m => m,
        }
    }

    pub fn model_config(&self, channels: usize) -> ModelConfig {
        let out_len = match self.task {
            TaskName::Forecast => self.pred_len,
            _ => self.seq_len,
        };
        ModelConfig {
            seq_len: self.seq_len,
            out_len,
            channels,
            patch: PatchSpec::new(self.patch_len, self.stride, self.pad_end),
            e_layers: self.e_layers,
            n_heads: self.n_heads,
            d_model: self.d_model,
            d_ff: self.d_ff,
            dropout: self.dropout,
            fc_dropout: self.fc_dropout,
            attn_dropout: self.attn_dropout,
            k: self.k,
            mode: self.resolved_mode(channels),
            revin: self.revin,
        }
    }
}
