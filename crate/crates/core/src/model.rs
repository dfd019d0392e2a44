//! The full network: per-window RevIN, patch embedding with a learnable
//! positional table, a stack of encoder layers, and a channel-shared
//! flatten-linear head.

use crate::attention::{
    encoder_layer, AttentionMode, AttentionSpec, AttentionTrace, Bound, CrabLayerParams, Init, ParamShape,
};
use crate::datapipe::{self, embed_and_flatten, PatchSpec, RevInState, TokenLayout};
use crate::error::{Error, Result};
use crate::rng::{streams, SeededRng};
use crate::tasks::{head_forward, HeadParams};
use crate::tensor::{ParamSet, Tape, Tensor, Var};

/// Architecture hyperparameters of one model instance.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub seq_len: usize,
    /// Output steps per channel (horizon, or `seq_len` for reconstruction).
    pub out_len: usize,
    pub channels: usize,
    pub patch: PatchSpec,
    pub e_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub fc_dropout: f64,
    pub attn_dropout: f64,
    pub k: usize,
    pub mode: AttentionMode,
    pub revin: bool,
}

impl ModelConfig {
    pub fn patches(&self) -> Result<usize> {
        self.patch.patch_count(self.seq_len)
    }

    pub fn layout(&self) -> Result<TokenLayout> {
        Ok(TokenLayout::new(self.patches()?, self.channels))
    }

    pub fn tokens(&self) -> Result<usize> {
        Ok(self.layout()?.tokens())
    }

    pub fn attention_spec(&self) -> Result<AttentionSpec> {
        if self.channels == 0 || self.e_layers == 0 || self.out_len == 0 {
            return Err(Error::invalid(
                "model",
                "channels, e_layers and output length must be positive",
            ));
        }
        AttentionSpec::new(
            self.mode,
            self.d_model,
            self.n_heads,
            self.d_ff,
            self.layout()?,
            self.k,
            self.attn_dropout,
            self.dropout,
        )
    }

    /// Every parameter tensor the model owns, in construction order.
    pub fn param_shapes(&self) -> Result<Vec<ParamShape>> {
        let spec = self.attention_spec()?;
        let (pl, d, p) = (self.patch.patch_len, self.d_model, self.patches()?);
        let b = 1.0 / (pl as f64).sqrt();
        let mut out = vec![
            ParamShape::new("embed.weight", &[pl, d], Init::Uniform(b)),
            ParamShape::new("embed.bias", &[d], Init::Zeros),
            ParamShape::new("embed.pos", &[p, d], Init::Normal(0.02)),
        ];
        for l in 0..self.e_layers {
            out.extend(spec.layer_params(l));
        }
        out.extend(HeadParams::shapes(p * d, self.out_len));
        Ok(out)
    }

    pub fn param_count(&self) -> Result<usize> {
        Ok(self.param_shapes()?.iter().map(ParamShape::numel).sum())
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
    spec: AttentionSpec,
}

impl Model {
    /// Initialize from the dedicated initialization stream of `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = SeededRng::with_stream(seed, streams::INIT);
        let mut params = ParamSet::new();
        for ps in config.param_shapes()? {
            params.insert(ps.name.clone(), ps.init.sample(&ps.shape, &mut rng))?;
        }
        Self::from_params(config, params)
    }

    /// Wrap existing parameters, checking names and shapes.
    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self> {
        let shapes = config.param_shapes()?;
        if shapes.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                shapes.len(),
                params.len()
            )));
        }
        for ps in &shapes {
            match params.get(&ps.name) {
                Some(p) if p.tensor.shape() == ps.shape.as_slice() => {}
                Some(p) => {
                    return Err(Error::Checkpoint(format!(
                        "{}: shape {:?}, expected {:?}",
                        ps.name,
                        p.tensor.shape(),
                        ps.shape
                    )))
                }
                None => return Err(Error::Checkpoint(format!("missing parameter {}", ps.name))),
            }
        }
        let spec = config.attention_spec()?;
        Ok(Self { config, params, spec })
    }

    pub fn spec(&self) -> &AttentionSpec {
        &self.spec
    }

    /// Forward a batch `x` of shape `(B, L, C)`. With `mask` (same shape,
    /// 1 = observed) the RevIN statistics use observed entries only and
    /// missing entries enter as zero. Returns `(B, out_len, C)` on the
    /// input's scale.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        x: &Tensor,
        mask: Option<&Tensor>,
        training: bool,
        rng: &mut SeededRng,
        mut trace: Option<&mut AttentionTrace>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let (l, c) = (cfg.seq_len, cfg.channels);
        if x.rank() != 3 || x.shape()[1] != l || x.shape()[2] != c {
            return Err(Error::shape("model_forward", x.shape(), &[0, l, c]));
        }
        if let Some(m) = mask {
            if m.shape() != x.shape() {
                return Err(Error::shape("model_forward", x.shape(), m.shape()));
            }
        }
        let b = x.shape()[0];
        let p = cfg.patches()?;
        let pl = cfg.patch.patch_len;
        let mut patches = Vec::with_capacity(b * c * p * pl);
        let mut states = Vec::with_capacity(b);
        for i in 0..b {
            let win = &x.data()[i * l * c..(i + 1) * l * c];
            let m = mask.map(|m| &m.data()[i * l * c..(i + 1) * l * c]);
            let normed = if cfg.revin {
                let (n, st) = datapipe::revin_normalize_masked(win, c, m);
                states.push(st);
                n
            } else {
                match m {
                    Some(m) => win.iter().zip(m).map(|(v, k)| v * k).collect(),
                    None => win.to_vec(),
                }
            };
            patches.extend(datapipe::patchify(&normed, c, &cfg.patch)?);
        }
        let bound = Bound::new(&self.params, vars);
        let patches = tape.constant(Tensor::new(vec![b, c, p, pl], patches)?);
        let tb = embed_and_flatten(
            tape,
            patches,
            bound.var("embed.weight")?,
            bound.var("embed.bias")?,
            bound.var("embed.pos")?,
        )?;
        let mut h = tape.dropout(tb.tokens, cfg.dropout, training, rng)?;
        for layer in 0..cfg.e_layers {
            let lp = CrabLayerParams::bind(bound, layer)?;
            h = encoder_layer(tape, h, &lp, &self.spec, training, rng, trace.as_deref_mut())?;
        }
        let head = HeadParams::bind(bound)?;
        let out = head_forward(tape, h, &tb.layout, &head, cfg.fc_dropout, training, rng)?;
        if cfg.revin {
            denormalize_on_tape(tape, out, &states)
        } else {
            Ok(out)
        }
    }

    /// Inference-only forward returning the output tensor.
    pub fn predict(&self, x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.params.iter().map(|p| tape.constant(p.tensor.clone())).collect();
        let mut rng = SeededRng::new(0);
        let y = self.forward(&mut tape, &vars, x, mask, false, &mut rng, None)?;
        Ok(tape.value(y).clone())
    }
}

/// `y · std + mean` per sample and channel on `(B, T, C)`.
fn denormalize_on_tape(tape: &mut Tape, y: Var, states: &[RevInState]) -> Result<Var> {
    let s = tape.shape(y).to_vec();
    let (t, c) = (s[1], s[2]);
    let expand = |f: &dyn Fn(&RevInState, usize) -> f64| {
        let mut v = Vec::with_capacity(states.len() * t * c);
        for st in states {
            for _ in 0..t {
                v.extend((0..c).map(|ch| f(st, ch)));
            }
        }
        Tensor::new(s.clone(), v)
    };
    let std = tape.constant(expand(&|st, ch| st.std[ch])?);
    let mean = tape.constant(expand(&|st, ch| st.mean[ch])?);
    let y = tape.mul(y, std)?;
    tape.add(y, mean)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::tensor::gradcheck;

    pub(crate) fn toy_config(mode: AttentionMode) -> ModelConfig {
        ModelConfig {
            seq_len: 8,
            out_len: 4,
            channels: 3,
            patch: PatchSpec::new(4, 2, true),
            e_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_ff: 16,
            dropout: 0.1,
            fc_dropout: 0.1,
            attn_dropout: 0.1,
            k: 4,
            mode,
            revin: true,
        }
    }

    #[test]
    fn toy_has_twelve_tokens() {
        let cfg = toy_config(AttentionMode::Crab);
        assert_eq!(cfg.patches().unwrap(), 4);
        assert_eq!(cfg.tokens().unwrap(), 12);
    }

    #[test]
    fn param_count_matches_constructed_tensors() {
        for mode in AttentionMode::ALL {
            let cfg = toy_config(mode);
            let m = Model::new(cfg.clone(), 1).unwrap();
            assert_eq!(m.params.num_elements(), cfg.param_count().unwrap(), "{mode}");
        }
    }

    #[test]
    fn forward_shape_and_determinism() {
        let cfg = toy_config(AttentionMode::Crab);
        let m = Model::new(cfg, 3).unwrap();
        let x = Tensor::randn(&[5, 8, 3], 1.0, &mut SeededRng::new(2));
        let a = m.predict(&x, None).unwrap();
        assert_eq!(a.shape(), &[5, 4, 3]);
        assert_eq!(a, m.predict(&x, None).unwrap());
        let bad = Tensor::zeros(&[5, 8, 2]);
        assert!(m.predict(&bad, None).is_err());
    }

    #[test]
    fn revin_makes_output_shift_equivariant() {
        let cfg = toy_config(AttentionMode::Crab);
        let m = Model::new(cfg, 4).unwrap();
        let x = Tensor::randn(&[2, 8, 3], 1.0, &mut SeededRng::new(5));
        let a = m.predict(&x, None).unwrap();
        let b = m.predict(&x.map(|v| 3.0 * v + 10.0), None).unwrap();
        let want = a.map(|v| 3.0 * v + 10.0);
        assert!(b.max_abs_diff(&want) < 1e-9);
    }

    #[test]
    fn end_to_end_gradients() {
        let cfg = ModelConfig {
            dropout: 0.0,
            fc_dropout: 0.0,
            attn_dropout: 0.0,
            ..toy_config(AttentionMode::Crab)
        };
        let m = Model::new(cfg, 6).unwrap();
        let mut rng = SeededRng::new(7);
        let x = Tensor::randn(&[2, 8, 3], 1.0, &mut rng);
        let y = Tensor::randn(&[2, 4, 3], 1.0, &mut rng);
        let inputs: Vec<Tensor> = m.params.iter().map(|p| p.tensor.clone()).collect();
        let r = gradcheck::check(&inputs, 1e-5, |tape, vars| {
            let out = m.forward(tape, vars, &x, None, false, &mut SeededRng::new(0), None)?;
            let t = tape.constant(y.clone());
            let d = tape.sub(out, t)?;
            let d = tape.square(d);
            Ok(tape.mean(d))
        })
        .unwrap();
        for (p, e) in m.params.iter().zip(&r.rel_errors) {
            assert!(*e < 1e-4, "{}: {e}", p.name);
        }
    }

    #[test]
    fn from_params_rejects_wrong_shapes() {
        let cfg = toy_config(AttentionMode::Crab);
        let m = Model::new(cfg.clone(), 1).unwrap();
        let mut ps = m.params.clone();
        ps.get_mut("embed.pos").unwrap().tensor = Tensor::zeros(&[3, 8]);
        assert!(Model::from_params(cfg.clone(), ps).is_err());
        let other = Model::new(toy_config(AttentionMode::Vanilla), 1).unwrap();
        assert!(Model::from_params(cfg, other.params).is_err());
    }
}
