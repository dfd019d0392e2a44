//! Signed cross-relational attention, its compressed variant, the encoder
//! layer, and the ablation modes.
//!
//! Token sequences on the tape are `(B, N, d_model)`; per-head tensors are
//! `(B, H, N, d_head)`. Score matrices are `(B, H, N, N)`, or `(B, H, N, k)`
//! in compressed mode.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use crate::datapipe::TokenLayout;
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{kernels, ParamSet, Tape, Tensor, Var};

/// Additive stabilizer inside the absolute-sum normalization.
pub const ABSACT_EPS: f64 = 1e-4;
/// Denominator stabilizer of the absolute-sum normalization.
pub const ABSACT_DELTA: f64 = 1e-8;
pub const LAYERNORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttentionMode {
    Crab,
    CrabDecop,
    CrabNoMask,
    SoftmaxMasked,
    Vanilla,
    SequenceOnly,
    ChannelOnly,
    AbsactClipped,
}

impl AttentionMode {
    pub const ALL: [AttentionMode; 8] = [
        Self::Crab,
        Self::CrabDecop,
        Self::CrabNoMask,
        Self::SoftmaxMasked,
        Self::Vanilla,
        Self::SequenceOnly,
        Self::ChannelOnly,
        Self::AbsactClipped,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Crab => "crab",
            Self::CrabDecop => "crab_decop",
            Self::CrabNoMask => "crab_no_mask",
            Self::SoftmaxMasked => "softmax_masked",
            Self::Vanilla => "vanilla",
            Self::SequenceOnly => "sequence_only",
            Self::ChannelOnly => "channel_only",
            Self::AbsactClipped => "absact_clipped",
        }
    }

    /// Whether the mode carries the learnable element-wise mask.
    pub fn has_mask(self) -> bool {
        matches!(
            self,
            Self::Crab | Self::SoftmaxMasked | Self::SequenceOnly | Self::ChannelOnly | Self::AbsactClipped
        )
    }

    pub fn is_decop(self) -> bool {
        self == Self::CrabDecop
    }

    pub fn uses_softmax(self) -> bool {
        matches!(self, Self::SoftmaxMasked | Self::Vanilla)
    }

    pub fn restriction(self) -> Option<Restriction> {
        match self {
            Self::SequenceOnly => Some(Restriction::SequenceOnly),
            Self::ChannelOnly => Some(Restriction::ChannelOnly),
            _ => None,
        }
    }
}

impl fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid("attention_mode", format!("unknown mode {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Restriction {
    /// Only pairs of tokens from the same channel.
    SequenceOnly,
    /// Only pairs of tokens from the same patch.
    ChannelOnly,
}

/// `N × N` allowed-pair pattern for a restriction over the patch-major
/// layout.
pub fn restrict_pattern(restriction: Restriction, layout: &TokenLayout) -> Vec<bool> {
    let n = layout.tokens();
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        let (pi, ci) = layout.unflat(i);
        for j in 0..n {
            let (pj, cj) = layout.unflat(j);
            out.push(match restriction {
                Restriction::SequenceOnly => ci == cj,
                Restriction::ChannelOnly => pi == pj,
            });
        }
    }
    out
}

/// Zero the entries of an `N × N` score matrix outside `restriction`.
pub fn restrict_block(a: &Tensor, restriction: Restriction, layout: &TokenLayout) -> Result<Tensor> {
    let n = layout.tokens();
    if a.shape() != [n, n] {
        return Err(Error::shape("restrict_block", a.shape(), &[n, n]));
    }
    let pat = restrict_pattern(restriction, layout);
    let data = a.data().iter().zip(&pat).map(|(v, &k)| if k { *v } else { 0.0 }).collect();
    Tensor::new(vec![n, n], data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stabilizer {
    /// No stabilizers; an all-zero row is an error.
    Pure,
    /// `eps = 1e-4`, `delta = 1e-8`.
    Stabilized,
}

impl Stabilizer {
    pub fn constants(self) -> (f64, f64) {
        match self {
            Self::Pure => (0.0, 0.0),
            Self::Stabilized => (ABSACT_EPS, ABSACT_DELTA),
        }
    }
}

/// `Q Kᵀ`, divided by `√d_head` when `scale`.
pub fn scores(q: &Tensor, k: &Tensor, scale: bool) -> Result<Tensor> {
    if q.rank() != 2 || q.shape() != k.shape() {
        return Err(Error::shape("scores", q.shape(), k.shape()));
    }
    let a = q.matmul_t(k)?;
    if scale {
        let s = 1.0 / (q.shape()[1] as f64).sqrt();
        Ok(a.map(|v| v * s))
    } else {
        Ok(a)
    }
}

/// `A − min(A)` over the whole matrix.
pub fn positive_shift(a: &Tensor) -> Tensor {
    let mn = a.min_all();
    a.map(|v| v - mn)
}

pub fn apply_mask(a: &Tensor, mask: &Tensor) -> Result<Tensor> {
    if a.shape() != mask.shape() {
        return Err(Error::shape("apply_mask", a.shape(), mask.shape()));
    }
    let data = a.data().iter().zip(mask.data()).map(|(x, m)| x * m).collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// Row-wise absolute-sum normalization of the last axis.
pub fn absact(a: &Tensor, stab: Stabilizer) -> Result<Tensor> {
    let (eps, delta) = stab.constants();
    let cols = *a.shape().last().expect("rank >= 1");
    let (data, _) = kernels::absact_rows(a.data(), cols, eps, delta, None)?;
    Tensor::new(a.shape().to_vec(), data)
}

/// [`absact`] followed by clipping negative weights to zero.
pub fn absact_clipped(a: &Tensor, stab: Stabilizer) -> Result<Tensor> {
    Ok(absact(a, stab)?.map(|v| v.max(0.0)))
}

/// How a parameter tensor is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// `U(−b, b)`.
    Uniform(f64),
}

impl Init {
    pub fn sample(self, shape: &[usize], rng: &mut SeededRng) -> Tensor {
        match self {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::ones(shape),
            Init::Normal(std) => Tensor::randn(shape, std, rng),
            Init::Uniform(b) => Tensor::rand_uniform(shape, -b, b, rng),
        }
    }
}

/// Name, shape and initializer of one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamShape {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamShape {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

fn linear(prefix: &str, fan_in: usize, fan_out: usize, out: &mut Vec<ParamShape>) {
    let b = 1.0 / (fan_in as f64).sqrt();
    out.push(ParamShape::new(format!("{prefix}.weight"), &[fan_in, fan_out], Init::Uniform(b)));
    out.push(ParamShape::new(format!("{prefix}.bias"), &[fan_out], Init::Zeros));
}

/// Hyperparameters of one attention/encoder layer.
#[derive(Clone, Debug)]
pub struct AttentionSpec {
    pub mode: AttentionMode,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub layout: TokenLayout,
    /// Compressed width; used only in compressed mode.
    pub k: usize,
    pub attn_dropout: f64,
    pub dropout: f64,
    allowed: Option<Arc<Vec<bool>>>,
}

impl AttentionSpec {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        mode: AttentionMode,
        d_model: usize,
        n_heads: usize,
        d_ff: usize,
        layout: TokenLayout,
        k: usize,
        attn_dropout: f64,
        dropout: f64,
    ) -> Result<Self> {
        if n_heads == 0 || !d_model.is_multiple_of(n_heads) {
            return Err(Error::invalid(
                "attention",
                format!("d_model {d_model} not divisible by n_heads {n_heads}"),
            ));
        }
        if mode.is_decop() && (k == 0 || k >= layout.tokens()) {
            return Err(Error::invalid(
                "attention",
                format!("compressed width k={k} must satisfy 0 < k < N={}", layout.tokens()),
            ));
        }
        let allowed = mode
            .restriction()
            .map(|r| Arc::new(restrict_pattern(r, &layout)));
        Ok(Self {
            mode,
            d_model,
            n_heads,
            d_ff,
            layout,
            k,
            attn_dropout,
            dropout,
            allowed,
        })
    }

    pub fn tokens(&self) -> usize {
        self.layout.tokens()
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Parameter tensors of encoder layer `layer`, in construction order.
    pub fn layer_params(&self, layer: usize) -> Vec<ParamShape> {
        let (d, h, n) = (self.d_model, self.n_heads, self.tokens());
        let p = format!("layer{layer}");
        let mut out = Vec::new();
        for proj in ["q", "k", "v", "o"] {
            linear(&format!("{p}.attn.{proj}"), d, d, &mut out);
        }
        let he = (2.0 / n as f64).sqrt();
        if self.mode.has_mask() {
            out.push(ParamShape::new(format!("{p}.attn.mask"), &[h, n, n], Init::Normal(he)));
        }
        if self.mode.is_decop() {
            let k = self.k;
            out.push(ParamShape::new(format!("{p}.attn.compress"), &[h, n, k], Init::Normal(he)));
            out.push(ParamShape::new(format!("{p}.attn.value_compress"), &[h, k, n], Init::Normal(he)));
        }
        linear(&format!("{p}.ffn.in"), d, self.d_ff, &mut out);
        linear(&format!("{p}.ffn.out"), self.d_ff, d, &mut out);
        for ln in ["norm1", "norm2"] {
            out.push(ParamShape::new(format!("{p}.{ln}.gain"), &[d], Init::Ones));
            out.push(ParamShape::new(format!("{p}.{ln}.bias"), &[d], Init::Zeros));
        }
        out
    }
}

/// Vars of a parameter set bound to a tape, looked up by name.
#[derive(Clone, Copy)]
pub struct Bound<'a> {
    pub set: &'a ParamSet,
    pub vars: &'a [Var],
}

impl<'a> Bound<'a> {
    pub fn new(set: &'a ParamSet, vars: &'a [Var]) -> Self {
        Self { set, vars }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.set
            .id_of(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::invalid("params", format!("missing parameter {name}")))
    }

    pub fn opt(&self, name: &str) -> Option<Var> {
        self.set.id_of(name).map(|i| self.vars[i])
    }
}

/// Tape handles for one encoder layer.
#[derive(Clone, Copy, Debug)]
pub struct CrabLayerParams {
    pub layer: usize,
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub mask: Option<Var>,
    pub compress: Option<Var>,
    pub value_compress: Option<Var>,
    pub ff_w1: Var,
    pub ff_b1: Var,
    pub ff_w2: Var,
    pub ff_b2: Var,
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
}

impl CrabLayerParams {
    pub fn bind(b: Bound<'_>, layer: usize) -> Result<Self> {
        let n = |s: &str| format!("layer{layer}.{s}");
        let v = |s: &str| b.var(&n(s));
        Ok(Self {
            layer,
            wq: v("attn.q.weight")?,
            bq: v("attn.q.bias")?,
            wk: v("attn.k.weight")?,
            bk: v("attn.k.bias")?,
            wv: v("attn.v.weight")?,
            bv: v("attn.v.bias")?,
            wo: v("attn.o.weight")?,
            bo: v("attn.o.bias")?,
            mask: b.opt(&n("attn.mask")),
            compress: b.opt(&n("attn.compress")),
            value_compress: b.opt(&n("attn.value_compress")),
            ff_w1: v("ffn.in.weight")?,
            ff_b1: v("ffn.in.bias")?,
            ff_w2: v("ffn.out.weight")?,
            ff_b2: v("ffn.out.bias")?,
            ln1_gain: v("norm1.gain")?,
            ln1_bias: v("norm1.bias")?,
            ln2_gain: v("norm2.gain")?,
            ln2_bias: v("norm2.bias")?,
        })
    }
}

/// A captured per-head matrix for the first sample of a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceEntry {
    pub layer: usize,
    pub head: usize,
    pub stage: &'static str,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

/// Optional capture of intermediate attention matrices.
#[derive(Clone, Debug, Default)]
pub struct AttentionTrace {
    pub entries: Vec<TraceEntry>,
}

impl AttentionTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn find(&self, layer: usize, head: usize, stage: &str) -> Option<&TraceEntry> {
        self.entries
            .iter()
            .find(|e| e.layer == layer && e.head == head && e.stage == stage)
    }

    /// Capture `(…, H, R, C)` for the first leading index.
    fn capture(&mut self, layer: usize, stage: &'static str, t: &Tensor) {
        let s = t.shape();
        let (h, r, c) = (s[s.len() - 3], s[s.len() - 2], s[s.len() - 1]);
        for head in 0..h {
            let off = head * r * c;
            self.entries.push(TraceEntry {
                layer,
                head,
                stage,
                rows: r,
                cols: c,
                data: t.data()[off..off + r * c].to_vec(),
            });
        }
    }

    /// Write every entry to `dir/{layer}.{head}.{stage}.csv`.
    pub fn write_csv(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for e in &self.entries {
            let path = dir.join(format!("{}.{}.{}.csv", e.layer, e.head, e.stage));
            write_matrix_csv(&path, e.rows, e.cols, &e.data)?;
        }
        Ok(())
    }
}

pub(crate) fn write_matrix_csv(path: &Path, rows: usize, cols: usize, data: &[f64]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for r in 0..rows {
        let line: Vec<String> = data[r * cols..(r + 1) * cols].iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", line.join(",")).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `(B, N, d)` → `(B, H, N, d_head)` through a linear projection.
fn project_heads(tape: &mut Tape, x: Var, w: Var, b: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (bs, n, d) = (s[0], s[1], s[2]);
    let y = tape.matmul(x, w)?;
    let y = tape.add(y, b)?;
    let y = tape.reshape(y, &[bs, n, heads, d / heads])?;
    tape.permute(y, &[0, 2, 1, 3])
}

/// `(B, H, N, d_head)` → `(B, N, d)` then the output projection.
fn merge_heads(tape: &mut Tape, o: Var, p: &CrabLayerParams) -> Result<Var> {
    let s = tape.shape(o).to_vec();
    let (bs, h, n, dh) = (s[0], s[1], s[2], s[3]);
    let o = tape.permute_reshape(o, &[0, 2, 1, 3], &[bs, n, h * dh])?;
    let o = tape.matmul(o, p.wo)?;
    tape.add(o, p.bo)
}

fn check_tokens(tape: &Tape, x: Var, spec: &AttentionSpec) -> Result<()> {
    let s = tape.shape(x);
    if s.len() != 3 || s[1] != spec.tokens() || s[2] != spec.d_model {
        return Err(Error::shape("attention", s, &[0, spec.tokens(), spec.d_model]));
    }
    Ok(())
}

/// Multi-head attention over `(B, N, d_model)` tokens for any mode.
///
/// Full modes: scores (scaled only for softmax modes), then for CRAB-family
/// modes the positive shift and, if present, the mask; then the row
/// activation, attention dropout, and `W · V`. Compressed mode delegates to
/// [`decop_attention`].
pub fn crab_attention(
    tape: &mut Tape,
    x: Var,
    p: &CrabLayerParams,
    spec: &AttentionSpec,
    training: bool,
    rng: &mut SeededRng,
    mut trace: Option<&mut AttentionTrace>,
) -> Result<Var> {
    if spec.mode.is_decop() {
        return decop_attention(tape, x, p, spec, training, rng, trace);
    }
    check_tokens(tape, x, spec)?;
    let mode = spec.mode;
    let mask = match (mode.has_mask(), p.mask) {
        (true, Some(m)) => Some(m),
        (true, None) => {
            return Err(Error::invalid("attention", format!("mode {mode} needs a mask parameter")))
        }
        (false, _) => None,
    };
    let h = spec.n_heads;
    let q = project_heads(tape, x, p.wq, p.bq, h)?;
    let k = project_heads(tape, x, p.wk, p.bk, h)?;
    let v = project_heads(tape, x, p.wv, p.bv, h)?;
    let mut a = tape.matmul_t(q, k)?;
    if mode.uses_softmax() {
        a = tape.scale(a, 1.0 / (spec.d_head() as f64).sqrt());
    }
    let mut cap = |tape: &Tape, stage: &'static str, v: Var| {
        if let Some(t) = trace.as_deref_mut() {
            t.capture(p.layer, stage, tape.value(v));
        }
    };
    cap(tape, "scores", a);
    if mode != AttentionMode::Vanilla {
        a = tape.shift_by_min(a)?;
        cap(tape, "shifted", a);
    }
    if let Some(m) = mask {
        cap(tape, "mask", m);
        a = tape.mul(a, m)?;
        cap(tape, "masked", a);
    }
    let mut w = if mode.uses_softmax() {
        tape.softmax_rows_masked(a, spec.allowed.clone())?
    } else {
        tape.absact(a, ABSACT_EPS, ABSACT_DELTA, spec.allowed.clone())?
    };
    if mode == AttentionMode::AbsactClipped {
        w = tape.relu(w);
    }
    cap(tape, "weights", w);
    let w = tape.dropout(w, spec.attn_dropout, training, rng)?;
    let o = tape.matmul(w, v)?;
    merge_heads(tape, o, p)
}

/// Compressed attention: `S = Kᵀ C` then `A_c = Q S`, so no `N × N` matrix
/// is formed. Values are `W_v^c · X'` with `X'` the per-head value
/// projection, and the output is `absact(A_c) · V`. No mask is applied.
pub fn decop_attention(
    tape: &mut Tape,
    x: Var,
    p: &CrabLayerParams,
    spec: &AttentionSpec,
    training: bool,
    rng: &mut SeededRng,
    trace: Option<&mut AttentionTrace>,
) -> Result<Var> {
    check_tokens(tape, x, spec)?;
    let (c, wvc) = match (p.compress, p.value_compress) {
        (Some(c), Some(w)) => (c, w),
        _ => return Err(Error::invalid("decop_attention", "missing compressor parameters")),
    };
    let h = spec.n_heads;
    let q = project_heads(tape, x, p.wq, p.bq, h)?;
    let k = project_heads(tape, x, p.wk, p.bk, h)?;
    let xv = project_heads(tape, x, p.wv, p.bv, h)?;
    let s = tape.matmul_tn(k, c)?; // (B, H, d_head, k)
    let a = tape.matmul(q, s)?; // (B, H, N, k)
    let w = tape.absact(a, ABSACT_EPS, ABSACT_DELTA, None)?;
    if let Some(t) = trace {
        t.capture(p.layer, "scores", tape.value(a));
        t.capture(p.layer, "weights", tape.value(w));
    }
    let w = tape.dropout(w, spec.attn_dropout, training, rng)?;
    let vc = tape.matmul(wvc, xv)?; // (B, H, k, d_head)
    let o = tape.matmul(w, vc)?;
    merge_heads(tape, o, p)
}

/// Post-norm encoder layer:
/// `x ← LN(x + drop(attn(x)))`, then `x ← LN(x + drop(FFN(x)))` with a GELU
/// feed-forward.
pub fn encoder_layer(
    tape: &mut Tape,
    x: Var,
    p: &CrabLayerParams,
    spec: &AttentionSpec,
    training: bool,
    rng: &mut SeededRng,
    trace: Option<&mut AttentionTrace>,
) -> Result<Var> {
    let a = crab_attention(tape, x, p, spec, training, rng, trace)?;
    let a = tape.dropout(a, spec.dropout, training, rng)?;
    let r = tape.add(x, a)?;
    let x = tape.layernorm(r, p.ln1_gain, p.ln1_bias, LAYERNORM_EPS)?;
    let f = tape.matmul(x, p.ff_w1)?;
    let f = tape.add(f, p.ff_b1)?;
    let f = tape.gelu(f);
    let f = tape.matmul(f, p.ff_w2)?;
    let f = tape.add(f, p.ff_b2)?;
    let f = tape.dropout(f, spec.dropout, training, rng)?;
    let r = tape.add(x, f)?;
    tape.layernorm(r, p.ln2_gain, p.ln2_bias, LAYERNORM_EPS)
}

/// Build a standalone parameter set for `layers` encoder layers.
pub fn init_layers(spec: &AttentionSpec, layers: usize, rng: &mut SeededRng) -> Result<ParamSet> {
    let mut set = ParamSet::new();
    for l in 0..layers {
        for ps in spec.layer_params(l) {
            set.insert(ps.name.clone(), ps.init.sample(&ps.shape, rng))?;
        }
    }
    Ok(set)
}
