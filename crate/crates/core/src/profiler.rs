//! Parameter and FLOP scaling without training.
//!
//! FLOPs are analytic: `2·m·k·n` per `(m×k)·(k×n)` product and one per
//! element for elementwise work, for one forward pass of a single sample.

use std::path::Path;

use crate::attention::AttentionMode;
use crate::datapipe::PatchSpec;
use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// Default ceiling on stored mask entries (`layers · heads · N²`).
pub const DEFAULT_MASK_CAP: usize = 100_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    Features,
    SeqLen,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Features => "n_features",
            SweepAxis::SeqLen => "seq_len",
        }
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "n_features" => Ok(SweepAxis::Features),
            "seq_len" => Ok(SweepAxis::SeqLen),
            _ => Err(Error::invalid("profile", format!("unknown sweep axis {s:?}"))),
        }
    }
}

/// Analytic cost of one configuration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PointCost {
    pub tokens: usize,
    pub params: usize,
    pub flops: f64,
    /// Attention scores, normalization and weighted values only.
    pub score_flops: f64,
}

fn mm(m: usize, k: usize, n: usize) -> f64 {
    2.0 * m as f64 * k as f64 * n as f64
}

pub fn point_cost(cfg: &ModelConfig) -> Result<PointCost> {
    let params = cfg.param_count()?;
    let spec = cfg.attention_spec()?;
    let n = cfg.tokens()?;
    let (p, c, pl, d, dff) = (cfg.patches()?, cfg.channels, cfg.patch.patch_len, cfg.d_model, cfg.d_ff);
    let (h, dh, k) = (cfg.n_heads, spec.d_head(), cfg.k);
    let nf = n as f64;
    let score = if cfg.mode.is_decop() {
        let per_head = mm(dh, n, k) + mm(n, dh, k) + 3.0 * nf * k as f64 + mm(k, n, dh) + mm(n, k, dh);
        h as f64 * per_head
    } else {
        // products, shift, mask, normalization
        let elementwise = if cfg.mode.has_mask() { 6.0 } else { 5.0 };
        h as f64 * (mm(n, dh, n) + elementwise * nf * nf + mm(n, n, dh))
    };
    let projections = 4.0 * (mm(n, d, d) + nf * d as f64);
    let ffn = mm(n, d, dff) + mm(n, dff, d) + nf * (2 * dff + d) as f64;
    let norms = 2.0 * 9.0 * nf * d as f64;
    let layer = score + projections + ffn + norms;
    let embed = mm(c * p, pl, d) + 2.0 * nf * d as f64;
    let head = mm(c, p * d, cfg.out_len) + (c * cfg.out_len) as f64;
    let revin = 4.0 * (cfg.seq_len * c + cfg.out_len * c) as f64;
    Ok(PointCost {
        tokens: n,
        params,
        flops: embed + cfg.e_layers as f64 * layer + head + revin,
        score_flops: cfg.e_layers as f64 * score,
    })
}

/// Least-squares slope of `ln y` on `ln x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::invalid("loglog_slope", "need at least two paired points"));
    }
    if x.iter().chain(y).any(|v| *v <= 0.0) {
        return Err(Error::invalid("loglog_slope", "values must be positive"));
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::invalid("loglog_slope", "x values are all equal"));
    }
    Ok(sxy / sxx)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalingReport {
    pub axis: SweepAxis,
    pub values: Vec<usize>,
    pub points: Vec<PointCost>,
    /// Growth exponent of parameters against tokens over the top half
    /// (at least two points).
    pub param_exponent: f64,
    pub flop_exponent: f64,
    pub score_exponent: f64,
}

/// Cost of every sweep point of `base` along `axis`.
pub fn profile(base: &ModelConfig, axis: SweepAxis, values: &[usize], mask_cap: usize) -> Result<ScalingReport> {
    if values.len() < 2 {
        return Err(Error::invalid("profile", "sweep needs at least two values"));
    }
    let mut points = Vec::with_capacity(values.len());
    for &v in values {
        let mut cfg = base.clone();
        match axis {
            SweepAxis::Features => cfg.channels = v,
            SweepAxis::SeqLen => cfg.seq_len = v,
        }
        let n = cfg.tokens()?;
        let mask_entries = cfg.e_layers.saturating_mul(cfg.n_heads).saturating_mul(n.saturating_mul(n));
        if cfg.mode.has_mask() && !cfg.mode.is_decop() && mask_entries > mask_cap {
            return Err(Error::invalid(
                "profile",
                format!(
                    "{}={v}: {mask_entries} mask parameters exceed the cap of {mask_cap}",
                    axis.name()
                ),
            ));
        }
        points.push(point_cost(&cfg)?);
    }
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by_key(|&i| points[i].tokens);
    let top = &order[(order.len() / 2).min(order.len() - 2)..];
    let col = |f: &dyn Fn(&PointCost) -> f64| top.iter().map(|&i| f(&points[i])).collect::<Vec<f64>>();
    let tokens = col(&|p| p.tokens as f64);
    Ok(ScalingReport {
        axis,
        values: values.to_vec(),
        param_exponent: loglog_slope(&tokens, &col(&|p| p.params as f64))?,
        flop_exponent: loglog_slope(&tokens, &col(&|p| p.flops))?,
        score_exponent: loglog_slope(&tokens, &col(&|p| p.score_flops))?,
        points,
    })
}

impl ScalingReport {
    /// One row per sweep point.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let err = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
        w.write_record([self.axis.name(), "tokens", "params", "flops", "score_flops"])
            .map_err(err)?;
        for (v, p) in self.values.iter().zip(&self.points) {
            w.write_record([
                v.to_string(),
                p.tokens.to_string(),
                p.params.to_string(),
                p.flops.to_string(),
                p.score_flops.to_string(),
            ])
            .map_err(err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Fitted exponents as `quantity,exponent` rows.
    pub fn write_fit_csv(&self, path: &Path) -> Result<()> {
        let text = format!(
            "quantity,exponent\nparams,{}\nflops,{}\nscore_flops,{}\n",
            self.param_exponent, self.flop_exponent, self.score_exponent
        );
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Reference configuration of the scaling study: patch 16, stride 8, two
/// layers, four heads, `d_model` 128, lookback 96, `k` 64.
pub fn scaling_config(mode: AttentionMode) -> ModelConfig {
    ModelConfig {
        seq_len: 96,
        out_len: 96,
        channels: 7,
        patch: PatchSpec::new(16, 8, true),
        e_layers: 2,
        n_heads: 4,
        d_model: 128,
        d_ff: 256,
        dropout: 0.1,
        fc_dropout: 0.05,
        attn_dropout: 0.8,
        k: 64,
        mode,
        revin: true,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Model;

    #[test]
    fn counts_match_constructed_models() {
        for mode in AttentionMode::ALL {
            let mut cfg = scaling_config(mode);
            cfg.d_model = 16;
            cfg.d_ff = 32;
            cfg.k = 8;
            cfg.seq_len = 48;
            cfg.out_len = 24;
            let m = Model::new(cfg.clone(), 1).unwrap();
            assert_eq!(point_cost(&cfg).unwrap().params, m.params.num_elements(), "{mode}");
        }
    }

    #[test]
    fn doubling_seq_len_quadruples_full_score_flops() {
        let cfg = scaling_config(AttentionMode::Crab);
        let r = profile(&cfg, SweepAxis::SeqLen, &[96, 192], DEFAULT_MASK_CAP).unwrap();
        assert_eq!(r.points[1].tokens, 2 * r.points[0].tokens);
        let ratio = r.points[1].score_flops / r.points[0].score_flops;
        assert!((ratio / 4.0 - 1.0).abs() < 0.1, "{ratio}");
    }

    #[test]
    fn doubling_tokens_doubles_decop_score_flops() {
        let cfg = scaling_config(AttentionMode::CrabDecop);
        let r = profile(&cfg, SweepAxis::Features, &[80, 160], DEFAULT_MASK_CAP).unwrap();
        let ratio = r.points[1].score_flops / r.points[0].score_flops;
        assert!((ratio / 2.0 - 1.0).abs() < 0.1, "{ratio}");
    }

    #[test]
    fn decop_increment_per_channel() {
        let cfg = scaling_config(AttentionMode::CrabDecop);
        let a = point_cost(&cfg).unwrap();
        let mut cfg2 = cfg.clone();
        cfg2.channels += 1;
        let b = point_cost(&cfg2).unwrap();
        let p = cfg.patches().unwrap();
        // compressor and value map each gain k entries per head per new token
        assert_eq!(b.params - a.params, cfg.e_layers * cfg.n_heads * 2 * cfg.k * p);
    }

    #[test]
    fn mask_cap_refuses_large_points() {
        let cfg = scaling_config(AttentionMode::Crab);
        let e = profile(&cfg, SweepAxis::Features, &[7, 1000], DEFAULT_MASK_CAP).unwrap_err();
        assert!(e.to_string().contains("exceed the cap"), "{e}");
        let decop = scaling_config(AttentionMode::CrabDecop);
        assert!(profile(&decop, SweepAxis::Features, &[7, 1000], DEFAULT_MASK_CAP).is_ok());
    }

    #[test]
    fn slope_of_power_law() {
        let x = [1.0, 2.0, 4.0, 8.0];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powf(1.5)).collect();
        assert!((loglog_slope(&x, &y).unwrap() - 1.5).abs() < 1e-12);
    }
}
