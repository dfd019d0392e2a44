//! Synthetic benchmark with lagged cross-channel structure: four sine
//! sources, two random-walk distractors, and a target assembled patch by
//! patch from lagged source patches under a triangle-wave blend.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use crate::datapipe::SeriesFrame;
use crate::error::{Error, Result};
use crate::rng::{streams, SeededRng};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SineSource {
    pub amplitude: f64,
    pub frequency: f64,
    pub phase: f64,
}

/// `weight · [w(k) · src_a[k − lag_a] + (1 − w(k)) · src_b[k − lag_b]]`,
/// with sources indexed from 0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlendPair {
    pub src_a: usize,
    pub lag_a: usize,
    pub src_b: usize,
    pub lag_b: usize,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub n_points: usize,
    pub sines: Vec<SineSource>,
    /// Step standard deviations of the random-walk channels.
    pub walks: Vec<f64>,
    pub patch_len: usize,
    pub stride: usize,
    /// Blend period in patches.
    pub period: usize,
    pub pairs: Vec<BlendPair>,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        let sine = |amplitude, frequency, phase| SineSource {
            amplitude,
            frequency,
            phase,
        };
        Self {
            n_points: 10_000,
            sines: vec![
                sine(1.0, 0.02, 0.0),
                sine(3.0, 0.03, 0.5),
                sine(2.0, 0.01, 1.0),
                sine(5.0, 0.002, 1.5),
            ],
            walks: vec![0.1, 0.15],
            patch_len: 16,
            stride: 8,
            period: 20,
            pairs: vec![
                BlendPair {
                    src_a: 0,
                    lag_a: 1,
                    src_b: 1,
                    lag_b: 2,
                    weight: 0.5,
                },
                BlendPair {
                    src_a: 2,
                    lag_a: 2,
                    src_b: 3,
                    lag_b: 3,
                    weight: 0.5,
                },
            ],
            noise_std: 0.02,
            seed: 2021,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid("synth_spec", m));
        if self.n_points < self.patch_len || self.patch_len == 0 {
            return bad(format!("n_points {} < patch_len {}", self.n_points, self.patch_len));
        }
        if self.stride == 0 || self.stride > self.patch_len {
            return bad(format!("stride {} must be in 1..={}", self.stride, self.patch_len));
        }
        if self.period < 2 || !self.period.is_multiple_of(2) {
            return bad(format!("period {} must be even and >= 2", self.period));
        }
        if self.pairs.is_empty() {
            return bad("no blend pairs".into());
        }
        let n_src = self.sines.len();
        for p in &self.pairs {
            if p.lag_a == 0 || p.lag_b == 0 {
                return bad("lags must be >= 1".into());
            }
            if p.src_a >= n_src || p.src_b >= n_src {
                return bad("blend pair refers to a missing sine source".into());
            }
        }
        let wsum: f64 = self.pairs.iter().map(|p| p.weight).sum();
        if (wsum - 1.0).abs() > 1e-9 {
            return bad(format!("pair weights sum to {wsum}, not 1"));
        }
        if self.noise_std < 0.0 || self.walks.iter().any(|s| *s < 0.0) {
            return bad("standard deviations must be nonnegative".into());
        }
        Ok(())
    }

    pub fn max_lag(&self) -> usize {
        self.pairs.iter().map(|p| p.lag_a.max(p.lag_b)).max().unwrap_or(0)
    }

    /// Patches on the stride grid that fit inside the series.
    pub fn patch_count(&self) -> usize {
        (self.n_points - self.patch_len) / self.stride + 1
    }

    pub fn channel_names(&self) -> Vec<String> {
        (1..=self.sines.len() + self.walks.len())
            .map(|i| format!("var_{i}"))
            .chain(std::iter::once("target".to_owned()))
            .collect()
    }
}

/// Triangle wave over `period` patches, rising from 0 to 1 and back.
pub fn blend_weight(k: usize, period: usize) -> f64 {
    // (period − m)/half equals 2 − m/half but rounds to the exact decimal
    let half = period / 2;
    let m = k % period;
    if m <= half {
        m as f64 / half as f64
    } else {
        (period - m) as f64 / half as f64
    }
}

/// Sine channels followed by random-walk channels, each of length
/// `n_points`. Walks start at 0 and draw from the walk stream of `seed`.
pub fn gen_sources(spec: &SynthSpec) -> Result<Vec<Vec<f64>>> {
    spec.validate()?;
    gen_sources_with_walk_seed(spec, spec.seed)
}

/// As [`gen_sources`] with the walks drawn from `walk_seed`.
pub fn gen_sources_with_walk_seed(spec: &SynthSpec, walk_seed: u64) -> Result<Vec<Vec<f64>>> {
    spec.validate()?;
    let n = spec.n_points;
    let mut out: Vec<Vec<f64>> = spec
        .sines
        .iter()
        .map(|s| {
            (0..n)
                .map(|t| s.amplitude * (2.0 * PI * s.frequency * t as f64 + s.phase).sin())
                .collect()
        })
        .collect();
    let mut rng = SeededRng::with_stream(walk_seed, streams::SYNTH_WALKS);
    for &sigma in &spec.walks {
        let mut v = Vec::with_capacity(n);
        let mut x = 0.0;
        v.push(x);
        for _ in 1..n {
            x += rng.normal(0.0, sigma);
            v.push(x);
        }
        out.push(v);
    }
    Ok(out)
}

/// Per-patch record of how the target was assembled.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BlendTrace {
    pub weights: Vec<f64>,
    /// `(source, patch index)` pairs read for each patch; empty when a lag
    /// reaches before the first patch.
    pub sources: Vec<Vec<(usize, usize)>>,
    /// Pre-noise target patch values.
    pub patches: Vec<Vec<f64>>,
}

fn patch_values(sources: &[Vec<f64>], spec: &SynthSpec, k: usize) -> Option<(Vec<f64>, Vec<(usize, usize)>)> {
    if k < spec.max_lag() {
        return None;
    }
    let w = blend_weight(k, spec.period);
    let mut vals = vec![0.0; spec.patch_len];
    let mut used = Vec::new();
    for p in &spec.pairs {
        let (ka, kb) = (k - p.lag_a, k - p.lag_b);
        used.push((p.src_a, ka));
        used.push((p.src_b, kb));
        for (j, v) in vals.iter_mut().enumerate() {
            let a = sources[p.src_a][ka * spec.stride + j];
            let b = sources[p.src_b][kb * spec.stride + j];
            *v += p.weight * (w * a + (1.0 - w) * b);
        }
    }
    Some((vals, used))
}

/// Assemble the pre-noise target on the patch grid. Each patch is written
/// to its time span; steps covered by several patches take their mean.
/// Patches whose lags reach before patch 0 contribute zeros.
pub fn build_target(sources: &[Vec<f64>], spec: &SynthSpec, mut trace: Option<&mut BlendTrace>) -> Result<Vec<f64>> {
    spec.validate()?;
    check_sources(sources, spec)?;
    let n = spec.n_points;
    let mut acc = vec![0.0; n];
    let mut cnt = vec![0u32; n];
    for k in 0..spec.patch_count() {
        let (vals, used) = patch_values(sources, spec, k).unwrap_or_else(|| (vec![0.0; spec.patch_len], Vec::new()));
        let start = k * spec.stride;
        for (j, v) in vals.iter().enumerate() {
            acc[start + j] += v;
            cnt[start + j] += 1;
        }
        if let Some(t) = trace.as_deref_mut() {
            t.weights.push(blend_weight(k, spec.period));
            t.sources.push(used);
            t.patches.push(vals);
        }
    }
    Ok(acc
        .iter()
        .zip(&cnt)
        .map(|(a, &c)| if c == 0 { 0.0 } else { a / f64::from(c) })
        .collect())
}

/// Independent per-time-step evaluation of the same target: for each `t`,
/// enumerate the patches covering it and average their closed-form values
/// at that offset.
pub fn oracle_target(sources: &[Vec<f64>], spec: &SynthSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    check_sources(sources, spec)?;
    let (s, pl) = (spec.stride, spec.patch_len);
    let last_patch = (spec.n_points - pl) / s;
    let mut out = Vec::with_capacity(spec.n_points);
    for t in 0..spec.n_points {
        let mut sum = 0.0;
        let mut count = 0usize;
        for k in 0..=last_patch {
            if !(k * s <= t && t < k * s + pl) {
                continue;
            }
            count += 1;
            if k < spec.max_lag() {
                continue;
            }
            let off = t - k * s;
            let w = blend_weight(k, spec.period);
            for p in &spec.pairs {
                let a = sources[p.src_a][t - p.lag_a * s];
                let b = sources[p.src_b][t - p.lag_b * s];
                debug_assert_eq!(t - p.lag_a * s, (k - p.lag_a) * s + off);
                sum += p.weight * (w * a + (1.0 - w) * b);
            }
        }
        out.push(if count == 0 { 0.0 } else { sum / count as f64 });
    }
    Ok(out)
}

fn check_sources(sources: &[Vec<f64>], spec: &SynthSpec) -> Result<()> {
    if sources.len() < spec.sines.len() || sources.iter().any(|s| s.len() != spec.n_points) {
        return Err(Error::invalid("synth", "source matrix does not match spec"));
    }
    Ok(())
}

/// Target plus `N(0, noise_std²)` noise from the noise stream of the seed.
pub fn add_noise(target: &[f64], spec: &SynthSpec) -> Vec<f64> {
    let mut rng = SeededRng::with_stream(spec.seed, streams::SYNTH_NOISE);
    target
        .iter()
        .map(|v| if spec.noise_std == 0.0 { *v } else { v + rng.normal(0.0, spec.noise_std) })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthData {
    pub sources: Vec<Vec<f64>>,
    pub clean_target: Vec<f64>,
    pub target: Vec<f64>,
}

impl SynthData {
    /// Row-major frame `var_1 … var_m, target`.
    pub fn to_frame(&self, spec: &SynthSpec) -> Result<SeriesFrame> {
        let n = self.target.len();
        let mut values = Vec::with_capacity(n * (self.sources.len() + 1));
        for t in 0..n {
            values.extend(self.sources.iter().map(|s| s[t]));
            values.push(self.target[t]);
        }
        SeriesFrame::new(values, spec.channel_names(), None)
    }
}

pub fn generate(spec: &SynthSpec) -> Result<SynthData> {
    let sources = gen_sources(spec)?;
    let clean_target = build_target(&sources, spec, None)?;
    let target = add_noise(&clean_target, spec);
    Ok(SynthData {
        sources,
        clean_target,
        target,
    })
}

/// Write the dataset as CSV: `#` comment lines echoing the generator settings, a header
/// row, then one row per time step.
pub fn write_csv(path: &Path, data: &SynthData, spec: &SynthSpec) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    writeln!(w, "# synthetic lagged cross-channel dataset").map_err(io)?;
    writeln!(w, "# n_points={} seed={} noise_std={}", spec.n_points, spec.seed, spec.noise_std).map_err(io)?;
    for (i, s) in spec.sines.iter().enumerate() {
        writeln!(
            w,
            "# var_{}: sine amplitude={} frequency={} phase={}",
            i + 1,
            s.amplitude,
            s.frequency,
            s.phase
        )
        .map_err(io)?;
    }
    for (i, s) in spec.walks.iter().enumerate() {
        writeln!(w, "# var_{}: random walk sigma={s}", spec.sines.len() + i + 1).map_err(io)?;
    }
    writeln!(
        w,
        "# patch_len={} stride={} period={} pairs={}",
        spec.patch_len,
        spec.stride,
        spec.period,
        spec.pairs
            .iter()
            .map(|p| format!(
                "(var_{} lag {}, var_{} lag {}, weight {})",
                p.src_a + 1,
                p.lag_a,
                p.src_b + 1,
                p.lag_b,
                p.weight
            ))
            .collect::<Vec<_>>()
            .join(" ")
    )
    .map_err(io)?;
    writeln!(w, "{}", spec.channel_names().join(",")).map_err(io)?;
    for t in 0..data.target.len() {
        let mut row: Vec<String> = data.sources.iter().map(|s| s[t].to_string()).collect();
        row.push(data.target[t].to_string());
        writeln!(w, "{}", row.join(",")).map_err(io)?;
    }
    w.flush().map_err(io)
}
