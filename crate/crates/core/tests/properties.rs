use proptest::prelude::*;

use xct_core::analysis::heatmap_grid;
use xct_core::attention::{absact, positive_shift, AttentionMode, Stabilizer, ABSACT_DELTA, ABSACT_EPS};
use xct_core::config::RunConfig;
use xct_core::datapipe::{self, ChannelScaler, PatchSpec, SeriesFrame, TokenLayout};
use xct_core::model::{Model, ModelConfig};
use xct_core::profiler::point_cost;
use xct_core::synthgen::{self, SynthSpec};
use xct_core::tasks::{self, Setting, ThresholdSpec};
use xct_core::tensor::{gradcheck, kernels};
use xct_core::trainer::OneCycleSchedule;
use xct_core::{SeededRng, Tape, Tensor, Var};

fn tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = SeededRng::new(seed);
    Tensor::rand_uniform(shape, lo, hi, &mut rng)
}

/// `Σ w ⊙ y` so that every output entry influences the scalar.
fn weighted(tape: &mut Tape, y: Var, seed: u64) -> xct_core::Result<Var> {
    let w = tape.constant(tensor(tape.shape(y), seed ^ 0x5eed, -1.0, 1.0));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn cfg() -> ProptestConfig {
    ProptestConfig::with_cases(48)
}

proptest! {
    #![proptest_config(cfg())]

    #[test]
    fn differentiable_ops_pass_gradcheck(seed in 0u64..1 << 62, r in 2usize..5, c in 2usize..5) {
        let a = tensor(&[r, c], seed, -2.0, 2.0);
        let b = tensor(&[c, r], seed + 1, -2.0, 2.0);
        let bias = tensor(&[c], seed + 2, -2.0, 2.0);
        let gain = tensor(&[c], seed + 3, -2.0, 2.0);
        let ops: Vec<(&str, Box<dyn Fn(&mut Tape, &[Var]) -> xct_core::Result<Var>>)> = vec![
            ("matmul", Box::new(|t: &mut Tape, v: &[Var]| { let y = t.matmul(v[0], v[1])?; weighted(t, y, seed) })),
            ("add_bias", Box::new(|t: &mut Tape, v: &[Var]| { let y = t.add(v[0], v[2])?; let y = t.square(y); weighted(t, y, seed) })),
            ("mul", Box::new(|t: &mut Tape, v: &[Var]| { let y = t.mul(v[0], v[3])?; weighted(t, y, seed) })),
            ("div", Box::new(|t: &mut Tape, v: &[Var]| { let d = t.affine(v[3], 0.1, 3.0); let y = t.div(v[0], d)?; weighted(t, y, seed) })),
            ("gelu", Box::new(|t: &mut Tape, v: &[Var]| { let y = t.gelu(v[0]); weighted(t, y, seed) })),
            ("layernorm", Box::new(|t: &mut Tape, v: &[Var]| { let y = t.layernorm(v[0], v[3], v[2], 1e-5)?; weighted(t, y, seed) })),
            ("softmax", Box::new(|t: &mut Tape, v: &[Var]| { let y = t.softmax_rows(v[0])?; weighted(t, y, seed) })),
            ("absact", Box::new(|t: &mut Tape, v: &[Var]| { let y = t.absact(v[0], ABSACT_EPS, ABSACT_DELTA, None)?; weighted(t, y, seed) })),
            ("permute_mean", Box::new(|t: &mut Tape, v: &[Var]| { let y = t.permute(v[0], &[1, 0])?; let y = t.mul(y, v[1])?; Ok(t.mean(y)) })),
        ];
        let inputs = [a, b, bias, gain];
        for (name, f) in &ops {
            let r = gradcheck::check(&inputs, 1e-5, f).unwrap();
            prop_assert!(r.max_rel_error() < 1e-4, "{name}: {:?}", r.rel_errors);
        }
    }

    #[test]
    fn matmul_is_associative(seed in 0u64..1 << 62) {
        let a = tensor(&[8, 8], seed, -1.0, 1.0);
        let b = tensor(&[8, 8], seed + 1, -1.0, 1.0);
        let c = tensor(&[8, 8], seed + 2, -1.0, 1.0);
        let l = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let r = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        prop_assert!(l.max_abs_diff(&r) < 1e-9);
    }

    #[test]
    fn softmax_rows_are_distributions(seed in 0u64..1 << 62, r in 1usize..8, c in 1usize..8, scale in 0.1f64..50.0) {
        let s = tensor(&[r, c], seed, -scale, scale).softmax_rows().unwrap();
        for row in s.data().chunks(c) {
            prop_assert!(row.iter().all(|v| *v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn permute_reshape_inverts_exactly(seed in 0u64..1 << 62, dims in prop::collection::vec(1usize..5, 2..5), shuffle in any::<u64>()) {
        let t = tensor(&dims, seed, -3.0, 3.0);
        let mut perm: Vec<usize> = (0..dims.len()).collect();
        SeededRng::new(shuffle).shuffle(&mut perm);
        let n = t.len();
        let flat = t.permute_reshape(&perm, &[n]).unwrap();
        let permuted_shape: Vec<usize> = perm.iter().map(|&p| dims[p]).collect();
        let back = flat
            .reshape(&permuted_shape).unwrap()
            .permute_reshape(&kernels::inverse_permutation(&perm), &dims).unwrap();
        prop_assert_eq!(back.data(), t.data());
        prop_assert_eq!(back.shape(), t.shape());
    }

    #[test]
    fn layout_covers_every_pair_once(p in 1usize..20, c in 1usize..20) {
        let layout = TokenLayout::new(p, c);
        let mut seen = vec![false; layout.tokens()];
        for pi in 0..p {
            for ci in 0..c {
                let f = layout.flat(pi, ci);
                prop_assert!(!seen[f]);
                seen[f] = true;
                prop_assert_eq!(layout.unflat(f), (pi, ci));
            }
        }
        prop_assert!(seen.iter().all(|s| *s));
    }

    #[test]
    fn scaler_and_revin_round_trip(seed in 0u64..1 << 62, rows in 2usize..40, c in 1usize..6, offset in -100.0f64..100.0, spread in 0.01f64..50.0) {
        let x = tensor(&[rows, c], seed, offset - spread, offset + spread);
        let frame = SeriesFrame::from_values(x.data().to_vec(), c).unwrap();
        let sc = ChannelScaler::fit(&frame);
        let back = sc.inverse(&sc.transform(&frame));
        for (a, b) in back.values().iter().zip(frame.values()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
        let (n, st) = datapipe::revin_normalize(x.data(), c);
        let back = datapipe::revin_denormalize(&n, &st);
        for (a, b) in back.iter().zip(x.data()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn padded_patch_count(pl in 1usize..32, stride_frac in 0.0f64..1.0, extra in 0usize..200) {
        let stride = 1 + ((pl - 1) as f64 * stride_frac) as usize;
        let l = pl + extra;
        let spec = PatchSpec::new(pl, stride, true);
        prop_assert_eq!(spec.patch_count(l).unwrap(), (l - pl) / stride + 2);
    }

    #[test]
    fn absact_frobenius_and_row_contract(seed in 0u64..1 << 62, log_n in 1u32..7, k in 1usize..16, scale in 1e-3f64..1e3) {
        let n = 1usize << log_n;
        for cols in [n, k] {
            let a = tensor(&[n, cols], seed, -scale, scale);
            for stab in [Stabilizer::Pure, Stabilizer::Stabilized] {
                let w = absact(&a, stab).unwrap();
                prop_assert!(w.frobenius_norm() <= (n as f64).sqrt());
            }
            let w = absact(&a, Stabilizer::Pure).unwrap();
            for s in w.row_abs_sum() {
                prop_assert!((s - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn pure_absact_is_scale_invariant(seed in 0u64..1 << 62, n in 2usize..16) {
        let a = tensor(&[n, n], seed, -2.0, 2.0);
        let w = absact(&a, Stabilizer::Pure).unwrap();
        for alpha in [0.5, 2.0, 10.0] {
            let ws = absact(&a.map(|v| alpha * v), Stabilizer::Pure).unwrap();
            prop_assert!(w.max_abs_diff(&ws) <= 1e-12);
        }
    }

    /// The stabilized map departs from the pure one by at most
    /// `((N+1)ε + δ) / (s − Nε)` per entry, `s` the row's absolute sum, so
    /// its scale invariance holds to the sum of the two bounds.
    #[test]
    fn stabilized_absact_scale_deviation_is_bounded(seed in 0u64..1 << 62, n in 2usize..16, scale in 1e-2f64..1e2) {
        let a = tensor(&[n, n], seed, -scale, scale);
        let bound = |m: &Tensor| -> Vec<f64> {
            m.data().chunks(n).map(|r| {
                let s: f64 = r.iter().map(|v| v.abs()).sum();
                ((n as f64 + 1.0) * ABSACT_EPS + ABSACT_DELTA) / (s - n as f64 * ABSACT_EPS)
            }).collect()
        };
        let w = absact(&a, Stabilizer::Stabilized).unwrap();
        let b0 = bound(&a);
        for alpha in [0.5, 2.0, 10.0] {
            let sa = a.map(|v| alpha * v);
            let ws = absact(&sa, Stabilizer::Stabilized).unwrap();
            let b1 = bound(&sa);
            for (i, (x, y)) in w.data().iter().zip(ws.data()).enumerate() {
                let r = i / n;
                prop_assert!((x - y).abs() <= b0[r] + b1[r] + 1e-15);
            }
        }
    }

    #[test]
    fn positive_shift_keeps_row_order(seed in 0u64..1 << 62, r in 1usize..8, c in 2usize..8) {
        let a = tensor(&[r, c], seed, -5.0, 5.0);
        let s = positive_shift(&a);
        prop_assert!(s.data().iter().all(|v| *v >= 0.0));
        let order = |row: &[f64]| {
            let mut idx: Vec<usize> = (0..row.len()).collect();
            idx.sort_by(|&i, &j| row[i].total_cmp(&row[j]));
            idx
        };
        for (x, y) in a.data().chunks(c).zip(s.data().chunks(c)) {
            prop_assert_eq!(order(x), order(y));
        }
    }

    #[test]
    fn blend_weight_triangle_symmetry(j in 0usize..=10, cycles in 0usize..5) {
        let w = |k| synthgen::blend_weight(k, 20);
        prop_assert_eq!(w(10 + j + 20 * cycles), w(10 - j));
        let v = w(j + 20 * cycles);
        prop_assert!((0.0..=1.0).contains(&v));
    }

    #[test]
    fn target_ignores_walk_seed(walk_seed in 0u64..1 << 62) {
        let spec = SynthSpec { n_points: 400, ..SynthSpec::default() };
        let a = synthgen::gen_sources(&spec).unwrap();
        let b = synthgen::gen_sources_with_walk_seed(&spec, walk_seed).unwrap();
        let ta = synthgen::build_target(&a, &spec, None).unwrap();
        let tb = synthgen::build_target(&b, &spec, None).unwrap();
        prop_assert_eq!(ta, tb);
    }

    #[test]
    fn fill_keeps_observed(seed in 0u64..1 << 62, n in 1usize..100, rate in 0.0f64..0.99) {
        let truth = tensor(&[n], seed, -3.0, 3.0);
        let recon = tensor(&[n], seed + 1, -3.0, 3.0);
        let mut rng = SeededRng::new(seed);
        let mask = datapipe::make_imputation_mask(n, 1, rate, &mut rng).unwrap();
        let observed: Vec<f64> = truth.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let (filled, score) = tasks::fill_and_score_imputation(&observed, recon.data(), &mask, truth.data()).unwrap();
        let mut se = 0.0;
        let mut count = 0;
        for i in 0..n {
            if mask[i] == 1.0 {
                prop_assert_eq!(filled[i], observed[i]);
            } else {
                se += (recon.data()[i] - truth.data()[i]).powi(2);
                count += 1;
            }
        }
        prop_assert_eq!(score.count, count);
        if count > 0 {
            prop_assert!((score.mse - se / count as f64).abs() <= 1e-12);
        }
    }

    #[test]
    fn ms_loss_ignores_other_channels(seed in 0u64..1 << 62, c in 2usize..5, target in 0usize..5, delta in -10.0f64..10.0) {
        let target = target % c;
        let pred = tensor(&[2, 3, c], seed, -1.0, 1.0);
        let truth = tensor(&[2, 3, c], seed + 1, -1.0, 1.0);
        let bumped = Tensor::from_fn(&[2, 3, c], |i| pred.data()[i] + if i % c == target { 0.0 } else { delta });
        let loss = |p: &Tensor| {
            let mut t = Tape::new();
            let (p, y) = (t.constant(p.clone()), t.constant(truth.clone()));
            let l = tasks::forecast_loss(&mut t, p, y, Setting::MS(target)).unwrap();
            t.value(l).data()[0]
        };
        prop_assert_eq!(loss(&pred), loss(&bumped));
    }

    #[test]
    fn weighted_fold_matches_single_pass(sizes in prop::collection::vec(1usize..20, 1..10), seed in 0u64..1 << 62) {
        let total: usize = sizes.iter().sum();
        let samples = tensor(&[total], seed, 0.0, 4.0);
        let mut off = 0;
        let mut batches = Vec::new();
        for &s in &sizes {
            let part = &samples.data()[off..off + s];
            batches.push((s, part.iter().sum::<f64>() / s as f64));
            off += s;
        }
        let folded = tasks::weighted_metric_fold("m", &batches).unwrap();
        prop_assert!((folded.value - samples.mean_all()).abs() <= 1e-12);
        prop_assert_eq!(folded.count, total);
    }

    #[test]
    fn threshold_is_a_member_and_bounds_count(train in prop::collection::vec(0.0f64..10.0, 1..60), test in prop::collection::vec(0.0f64..10.0, 1..60), alpha in 0.001f64..0.5) {
        let (labels, tau) = tasks::threshold_and_classify(&train, &test, &ThresholdSpec { alpha }).unwrap();
        prop_assert!(train.iter().chain(&test).any(|s| *s == tau));
        let pooled = train.iter().chain(&test).filter(|s| **s > tau).count();
        let n = train.len() + test.len();
        prop_assert!(pooled <= (alpha * n as f64).floor() as usize + 1);
        prop_assert_eq!(labels.iter().filter(|l| **l == 1).count(), test.iter().filter(|s| **s > tau).count());
    }

    #[test]
    fn onecycle_peaks_exactly_once(total in 1usize..3000, lr in 1e-4f64..1.0) {
        let s = OneCycleSchedule::new(lr, total);
        let lrs: Vec<f64> = (0..=total).map(|i| s.lr(i).unwrap()).collect();
        prop_assert_eq!(lrs.iter().filter(|v| **v == lr).count(), 1);
        prop_assert_eq!(lrs[s.peak_step()], lr);
        prop_assert!(lrs.iter().all(|v| *v <= lr));
    }

    #[test]
    fn config_round_trip(seed in 0..=i64::MAX as u64, d in 1usize..64, heads in 1usize..5, lr in 1e-5f64..1.0, mode in 0usize..8, drop in 0.0f64..0.99) {
        let run = RunConfig {
            data_path: "data/x.csv".into(),
            seed,
            d_model: d * heads,
            n_heads: heads,
            d_ff: 3 * d,
            learning_rate: lr,
            attn_dropout: drop,
            attention_mode: AttentionMode::ALL[mode],
            ..RunConfig::default()
        };
        let back = RunConfig::from_toml_str(&run.to_toml_string()).unwrap();
        prop_assert_eq!(back.to_map(), run.to_map());
        prop_assert_eq!(back, run);
    }

    #[test]
    fn heatmap_matches_brute_force(p in 1usize..6, c in 1usize..6, seed in 0u64..1 << 62) {
        let layout = TokenLayout::new(p, c);
        let n = p * c;
        let m = tensor(&[n, n], seed, -3.0, 3.0);
        let g = heatmap_grid(m.data(), &layout).unwrap();
        for i in 0..p {
            for j in 0..p {
                let mut s = 0.0;
                for a in 0..n {
                    for b in 0..n {
                        if layout.unflat(a).0 == i && layout.unflat(b).0 == j {
                            s += m.data()[a * n + b].abs();
                        }
                    }
                }
                prop_assert!((g[i * p + j] - s / (c * c) as f64).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn profiler_counts_equal_constructed_tensors(c in 1usize..5, layers in 1usize..3, heads in 1usize..3, dh in 1usize..5, mode in 0usize..8, pad in any::<bool>()) {
        let cfg = ModelConfig {
            seq_len: 24,
            out_len: 6,
            channels: c,
            patch: PatchSpec::new(8, 4, pad),
            e_layers: layers,
            n_heads: heads,
            d_model: heads * dh,
            d_ff: 2 * heads * dh,
            dropout: 0.0,
            fc_dropout: 0.0,
            attn_dropout: 0.0,
            k: 2,
            mode: AttentionMode::ALL[mode],
            revin: true,
        };
        let model = Model::new(cfg.clone(), 3).unwrap();
        prop_assert_eq!(point_cost(&cfg).unwrap().params, model.params.num_elements());
    }
}
