//! Independent recomputations of library results.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tapf::ad::{grad_check, Tape, Tensor};
use tapf::fusion::{self, ComplexityNorm, FusionConfig, FusionLocation, FusionMethod, Heads};
use tapf::gradscope::{self, trend_slope};
use tapf::quantize::{self, RvqState};
use tapf::spectral::{self, SpectralConfig};
use tapf::synthav::{self, SynthParams};
use tapf::train::{train_step, DataSource, Model, RunConfig, SyntheticData, TrainState};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn softplus(x: f64) -> f64 {
    (1.0 + x.exp()).ln()
}

// ---------------------------------------------------------------------------
// Fusion

#[test]
fn distill_gradient_on_random_unit_vectors() {
    let mut r = rng(1);
    let mut a = random(&mut r, &[4, 6]);
    for row in a.data_mut().chunks_mut(6) {
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        row.iter_mut().for_each(|x| *x /= n);
    }
    let v = random(&mut r, &[4, 6]);
    let err = grad_check(
        |tape, x| {
            let v = tape.constant(v.clone());
            fusion::distill_loss(tape, x, v)
        },
        &a,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-5, "relative error {err}");
}

#[test]
fn tapf_gradient_on_three_frame_pair() {
    let mut r = rng(2);
    let z = random(&mut r, &[6, 3]);
    let v = random(&mut r, &[3, 3]);
    let c = vec![vec![-1.0, 0.3, 2.0]];
    let cfg = FusionConfig::default();
    let err = grad_check(
        |tape, x| {
            let v = tape.constant(v.clone());
            fusion::tapf_loss(tape, x, v, &c, &cfg)
        },
        &z,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-5, "relative error {err}");
}

#[test]
fn contrastive_identity_similarities_by_hand() {
    let tau = 0.07;
    let a = Tensor::new(vec![2, 1, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let mut tape = Tape::new();
    let av = tape.constant(a.clone());
    let vv = tape.constant(a);
    let l = fusion::contrastive_loss(&mut tape, av, vv, tau).unwrap();
    // s = I; each row and column: -log(e^{1/τ} / (e^{1/τ} + e^0)).
    let s = [[1.0, 0.0], [0.0, 1.0]];
    let mut total = 0.0;
    for i in 0..2 {
        let row: f64 = (0..2).map(|j| (s[i][j] / tau).exp()).sum();
        let col: f64 = (0..2).map(|j| (s[j][i] / tau).exp()).sum();
        total += -((s[i][i] / tau).exp() / row).ln() - ((s[i][i] / tau).exp() / col).ln();
    }
    let expected = total / 4.0;
    assert!((tape.value(l).item() - expected).abs() < 1e-12);
}

#[test]
fn complexity_matches_direct_norms() {
    let mut r = rng(3);
    let v = random(&mut r, &[7, 5]);
    let rows: Vec<&[f64]> = v.rows().collect();
    for norm in [ComplexityNorm::L1, ComplexityNorm::L2] {
        let got = fusion::visual_complexity(&v, norm, false).unwrap();
        for t in 0..7 {
            let diff: Vec<f64> = (0..5)
                .map(|k| rows[t][k] - if t == 0 { 0.0 } else { rows[t - 1][k] })
                .collect();
            let want = match norm {
                ComplexityNorm::L1 => diff.iter().map(|x| x.abs()).sum::<f64>(),
                ComplexityNorm::L2 => diff.iter().map(|x| x * x).sum::<f64>().sqrt(),
            };
            assert!((got[t] - want).abs() < 1e-14, "{norm:?} frame {t}");
        }
        let std = fusion::visual_complexity(&v, norm, true).unwrap();
        let mean = std.iter().sum::<f64>() / 7.0;
        let var = std.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 7.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
    }
}

#[test]
fn align_index_examples() {
    assert_eq!(fusion::align_index(1, 10, 50), 3);
    assert_eq!(fusion::align_index(10, 10, 50), 48);
}

/// Composes complexity, window, attention pooling and the loss by hand for
/// three video frames over six audio frames.
#[test]
fn tapf_three_frame_value_matches_composition() {
    let mut r = rng(4);
    let z = random(&mut r, &[6, 2]);
    let v = random(&mut r, &[3, 2]);
    let cfg = FusionConfig::default();

    let vr: Vec<&[f64]> = v.rows().collect();
    let zr: Vec<&[f64]> = z.rows().collect();
    let raw: Vec<f64> = (0..3)
        .map(|t| {
            let prev = if t == 0 { [0.0, 0.0] } else { [vr[t - 1][0], vr[t - 1][1]] };
            ((vr[t][0] - prev[0]).powi(2) + (vr[t][1] - prev[1]).powi(2)).sqrt()
        })
        .collect();
    let mean = raw.iter().sum::<f64>() / 3.0;
    let sd = (raw.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 3.0).sqrt();
    let c: Vec<f64> = raw.iter().map(|x| (x - mean) / sd).collect();

    let mut total = 0.0;
    for t in 0..3 {
        let w = (1.0 + 6.0 / (1.0 + (-c[t]).exp())).round() as i64;
        let centre = ((t as f64 + 0.5) * 2.0 + 0.5).round() as i64;
        let lo = (centre - w / 2).max(1);
        let hi = (centre + w / 2).min(6);
        let js: Vec<usize> = (lo..=hi).map(|j| j as usize - 1).collect();
        let scores: Vec<f64> = js.iter().map(|&j| cos(vr[t], zr[j]).exp()).collect();
        let norm: f64 = scores.iter().sum();
        let mut pooled = [0.0; 2];
        for (&j, s) in js.iter().zip(&scores) {
            pooled[0] += s / norm * zr[j][0];
            pooled[1] += s / norm * zr[j][1];
        }
        let l1 = (pooled[0] - vr[t][0]).abs() + (pooled[1] - vr[t][1]).abs();
        total += l1 + cfg.lambda_sim * (1.0 - cos(&pooled, vr[t]));
    }
    let expected = total / 3.0;

    let mut tape = Tape::new();
    let (zv, vv) = (tape.constant(z.clone()), tape.constant(v.clone()));
    let cc = fusion::visual_complexity(&v, cfg.complexity_norm, true).unwrap();
    let l = fusion::tapf_loss(&mut tape, zv, vv, &[cc], &cfg).unwrap();
    assert!((tape.value(l).item() - expected).abs() < 1e-10);
}

#[test]
fn fusion_gradient_reaches_encoder_in_both_locations() {
    for location in [FusionLocation::PreQuantization, FusionLocation::QuantizationLevel] {
        let mut cfg = RunConfig::desk();
        cfg.fusion.method = FusionMethod::Distillation;
        cfg.fusion.location = location;
        // At initialisation every latent snaps to the zero entry; one step
        // reseeds the idle entries from residuals.
        let data = SyntheticData {
            seed: 9,
            params: cfg.data.clone(),
        };
        let mut state = TrainState::new(Model::init(&cfg).unwrap());
        train_step(&mut state, &cfg, &data.batch(0, 4).unwrap(), None).unwrap();
        let model = state.model;
        let pair = synthav::generate(9, &cfg.data).unwrap();

        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape);
        let x = tape.constant(Tensor::new(vec![1, cfg.data.t], pair.audio.clone()).unwrap());
        let z_e = model.codec.encode_var(&mut tape, &bound, x).unwrap();
        let shape = tape.shape(z_e).to_vec();
        let flat = tape.value(z_e).clone().reshape(vec![shape[1], shape[2]]).unwrap();
        let q = model.quantizer.quantize(&flat).unwrap();
        let feats = fusion::fusion_features(&mut tape, &cfg.fusion, z_e, q.first_layer()).unwrap().unwrap();
        let fa = Heads::project_audio(&mut tape, &bound, feats).unwrap();
        let video = pair.video.clone().reshape(vec![1, cfg.data.t_v, cfg.data.d_v]).unwrap();
        let v = tape.constant(video);
        let fv = Heads::project_vision(&mut tape, &bound, v).unwrap();
        let loss = fusion::fusion_loss(&mut tape, &cfg.fusion, fa, fv, std::slice::from_ref(&pair.video))
            .unwrap()
            .unwrap();
        let grads = tape.backward(loss).unwrap();
        let mut reached = 0;
        for (p, &var) in model.params.iter().zip(bound.vars()) {
            if p.name.starts_with("enc.") && p.name.ends_with("weight") {
                let g = grads.get(var).expect("encoder weight on the path");
                assert!(g.data().iter().any(|x| *x != 0.0), "{location:?}: {} has zero gradient", p.name);
                reached += 1;
            }
        }
        assert!(reached >= 3, "{location:?}");
    }
}

// ---------------------------------------------------------------------------
// Quantize

#[test]
fn two_layer_rvq_matches_exhaustive_search() {
    let z = Tensor::new(vec![1, 2], vec![0.8, 0.1]).unwrap();
    let books = vec![
        Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap(),
        Tensor::new(vec![2, 2], vec![0.0, 0.0, -0.2, 0.1]).unwrap(),
    ];
    let state = RvqState::from_codebooks(books.clone()).unwrap();
    let q = quantize::rvq_quantize(&z, &state).unwrap();

    let mut best = (f64::INFINITY, 0, 0);
    for i in 0..1 {
        let r1: Vec<f64> = (0..2).map(|k| z.data()[k] - books[0].row(i)[k]).collect();
        for j in 0..2 {
            let e: f64 = (0..2).map(|k| (r1[k] - books[1].row(j)[k]).powi(2)).sum();
            if e < best.0 {
                best = (e, i, j);
            }
        }
    }
    assert_eq!(q.codes, vec![vec![best.1], vec![best.2]]);
    assert_eq!(q.codes, vec![vec![0], vec![1]]);
    for (a, b) in q.z_hat.data().iter().zip([0.8, 0.1]) {
        assert!((a - b).abs() < 1e-15);
    }
    assert!(q.residual.data().iter().all(|x| x.abs() < 1e-15));
}

#[test]
fn fsq_scalar_example() {
    let cfg = quantize::FsqConfig { levels: vec![3] };
    let z = Tensor::new(vec![1, 1], vec![0.3]).unwrap();
    assert!((0.3f64.tanh() - 0.2913).abs() < 1e-4);
    let (codes, zq) = quantize::fsq_quantize(&z, &cfg).unwrap();
    assert_eq!(codes, vec![1]);
    assert_eq!(zq.data(), &[0.0]);
}

#[test]
fn commit_loss_is_mean_squared_error() {
    let mut r = rng(5);
    let z = random(&mut r, &[5, 4]);
    let zq = random(&mut r, &[5, 4]);
    let want = z.data().iter().zip(zq.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 20.0;
    let mut tape = Tape::new();
    let zv = tape.leaf(z.clone());
    let l = quantize::commit_loss(&mut tape, zv, &zq).unwrap();
    assert!((tape.value(l).item() - want).abs() < 1e-15);
    let g = tape.backward(l).unwrap();
    for ((g, a), b) in g.get(zv).unwrap().data().iter().zip(z.data()).zip(zq.data()) {
        assert!((g - 2.0 * (a - b) / 20.0).abs() < 1e-15);
    }
}

#[test]
fn ema_single_assignment() {
    let book = Tensor::new(vec![2, 2], vec![0.0, 0.0, 1.0, 2.0]).unwrap();
    let mut s = RvqState::from_codebooks(vec![book]).unwrap();
    let v = Tensor::new(vec![1, 2], vec![3.0, -1.0]).unwrap();
    s.ema_update_layer(0, &[1], &v, 0.99);
    // Count 1 → 0.99 + 0.01, so the entry moves by exactly 1% towards v.
    let e = s.codebooks[0].row(1);
    assert!((e[0] - (0.99 * 1.0 + 0.01 * 3.0)).abs() < 1e-15);
    assert!((e[1] - (0.99 * 2.0 + -0.01)).abs() < 1e-15);
}

// ---------------------------------------------------------------------------
// Spectral

fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

#[test]
fn one_sided_parseval() {
    let n = 64;
    let mut r = rng(6);
    let x: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
    let mag = spectral::stft_mag(&x, n).unwrap();
    assert_eq!(mag.shape(), &[1, n / 2 + 1]);
    let m = mag.row(0);
    let spectral_energy = m[0] * m[0] + m[n / 2] * m[n / 2] + 2.0 * m[1..n / 2].iter().map(|v| v * v).sum::<f64>();
    let w = hann(n);
    let time_energy = n as f64 * x.iter().zip(&w).map(|(a, b)| (a * b).powi(2)).sum::<f64>();
    assert!((spectral_energy - time_energy).abs() / time_energy < 1e-6);
}

fn small_spectral() -> SpectralConfig {
    SpectralConfig {
        fft_sizes: vec![64, 32],
        mel_bins: vec![16, 8],
        scale_weights: vec![2.0, 1.0],
        ..SpectralConfig::default()
    }
}

#[test]
fn multiscale_loss_matches_composition() {
    let cfg = small_spectral();
    let mut r = rng(7);
    let x: Vec<f64> = (0..256).map(|_| r.gen_range(-0.5..0.5)).collect();
    let y: Vec<f64> = (0..256).map(|_| r.gen_range(-0.5..0.5)).collect();

    let mut expected = 0.0;
    for ((&n, &m), &w) in cfg.fft_sizes.iter().zip(&cfg.mel_bins).zip(&cfg.scale_weights) {
        let fb = spectral::mel_filterbank(n, m, cfg.sample_rate_hz);
        let lm = |s: &[f64]| -> Vec<f64> {
            let mag = spectral::stft_mag(s, n).unwrap();
            mag.rows()
                .flat_map(|frame| {
                    fb.rows()
                        .map(|f| f.iter().zip(frame).map(|(a, b)| a * b).sum::<f64>().max(1e-5).ln())
                        .collect::<Vec<_>>()
                })
                .collect()
        };
        let (a, b) = (lm(&x), lm(&y));
        expected += w * a.iter().zip(&b).map(|(p, q)| (p - q).abs()).sum::<f64>() / a.len() as f64;
    }

    let mut tape = Tape::new();
    let xv = tape.constant(Tensor::vector(&x));
    let yv = tape.constant(Tensor::vector(&y));
    let l = spectral::multiscale_spectral_loss(&mut tape, xv, yv, &cfg).unwrap();
    assert!((tape.value(l).item() - expected).abs() < 1e-10, "{} vs {expected}", tape.value(l).item());
}

#[test]
fn si_sdr_matches_projection() {
    let mut r = rng(8);
    let x: Vec<f64> = (0..500).map(|_| r.gen_range(-1.0..1.0)).collect();
    let y: Vec<f64> = x.iter().map(|v| 0.7 * v + r.gen_range(-0.3..0.3)).collect();
    let dot: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
    let xx: f64 = x.iter().map(|a| a * a).sum();
    let proj: Vec<f64> = x.iter().map(|a| dot / xx * a).collect();
    let t: f64 = proj.iter().map(|a| a * a).sum();
    let e: f64 = proj.iter().zip(&y).map(|(p, q)| (q - p).powi(2)).sum();
    let want = 10.0 * (t / e).log10();
    assert!((spectral::si_sdr(&x, &y).unwrap() - want).abs() < 1e-9);
}

#[test]
fn si_sdr_orthogonal_noise_is_ten_db() {
    let n = 64;
    let x: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 1.0 } else { 0.0 }).collect();
    let noise: Vec<f64> = (0..n).map(|i| if i % 2 == 1 { 0.1f64.sqrt() } else { 0.0 }).collect();
    let y: Vec<f64> = x.iter().zip(&noise).map(|(a, b)| a + b).collect();
    assert!((spectral::si_sdr(&x, &y).unwrap() - 10.0).abs() < 1e-9);
}

#[test]
fn doubling_estimate_increases_stft_distance() {
    let cfg = small_spectral();
    let mut r = rng(9);
    let x: Vec<f64> = (0..256).map(|_| r.gen_range(-0.5..0.5)).collect();
    let y: Vec<f64> = x.iter().map(|v| 1.1 * v + r.gen_range(-0.05..0.05)).collect();
    let y2: Vec<f64> = y.iter().map(|v| 2.0 * v).collect();
    let d1 = spectral::stft_distance(&x, &y, &cfg).unwrap();
    let d2 = spectral::stft_distance(&x, &y2, &cfg).unwrap();
    assert!(d2 > d1, "{d2} <= {d1}");
}

// ---------------------------------------------------------------------------
// Gradscope

#[test]
fn captured_norms_match_recomputation() {
    let cfg = RunConfig::desk();
    let model = Model::init(&cfg).unwrap();
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let pair = synthav::generate(4, &cfg.data).unwrap();
    let x = tape.constant(Tensor::new(vec![1, cfg.data.t], pair.audio).unwrap());
    let z = model.codec.encode_var(&mut tape, &bound, x).unwrap();
    let y = model.codec.decode_var(&mut tape, &bound, z).unwrap();
    let d = tape.sub(x, y).unwrap();
    let d = tape.abs(d);
    let l = tape.mean(d);
    let grads = tape.backward(l).unwrap();
    let recs = gradscope::capture(3, &model.params, &bound, Some(&grads)).unwrap();
    let trainable: Vec<_> = model.params.iter().zip(bound.vars()).filter(|(p, _)| p.trainable).collect();
    assert_eq!(recs.len(), trainable.len());
    for (rec, (p, &var)) in recs.iter().zip(trainable) {
        assert_eq!(rec.tensor_name, p.name);
        match grads.get(var) {
            Some(g) => {
                let mut s = 0.0;
                for v in g.data() {
                    s += v * v;
                }
                assert!((rec.grad_norm - s.sqrt()).abs() <= 1e-12 * (1.0 + s.sqrt()));
                assert!(!rec.missing);
            }
            None => assert!(rec.missing && rec.grad_norm == 0.0),
        }
    }
}

#[test]
fn noisy_linear_slope_is_recovered() {
    for seed in 0..30 {
        let mut r = rng(100 + seed);
        let slope = r.gen_range(0.5..2.0);
        let series: Vec<(f64, f64)> = (0..200)
            .map(|i| {
                let x = i as f64 * 10.0;
                (x, 3.0 + slope * x + r.gen_range(-20.0..20.0))
            })
            .collect();
        let got = trend_slope(&series, 0.5).unwrap();
        assert!((got - slope).abs() <= 0.1 * slope, "seed {seed}: {got} vs {slope}");
    }
}

// ---------------------------------------------------------------------------
// Synthetic data

#[test]
fn visual_change_peaks_at_the_onset() {
    let p = SynthParams::default();
    let mut hits = 0;
    for seed in 0..100 {
        let pair = synthav::generate(seed, &p).unwrap();
        let c = fusion::visual_complexity(&pair.video, ComplexityNorm::L2, false).unwrap();
        let peak = (1..c.len()).max_by(|&a, &b| c[a].total_cmp(&c[b])).unwrap();
        let onset = p.frame_of(pair.events[0].onset);
        if peak.abs_diff(onset) <= 1 {
            hits += 1;
        }
    }
    assert!(hits >= 95, "{hits}/100");
}

#[test]
fn avf1_size_for_two_by_three_f32() {
    let v = Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 0.25, 0.0, 8.0]).unwrap();
    let bytes = synthav::encode_features(&v, 0).unwrap();
    assert_eq!(bytes.len(), 41);
    let (back, dtype) = synthav::decode_features(&bytes).unwrap();
    assert_eq!((back, dtype), (v, 0));
}

#[test]
fn attention_pool_mean_when_window_is_one() {
    let mut r = rng(10);
    let z = random(&mut r, &[5, 3]);
    let v = random(&mut r, &[3]);
    let mut tape = Tape::new();
    let (zv, vv) = (tape.constant(z.clone()), tape.constant(v));
    let p = fusion::attention_pool(&mut tape, vv, zv, 2, 1).unwrap();
    assert_eq!(tape.value(p).data(), z.row(1));
}

#[test]
fn distill_examples_at_cardinal_cosines() {
    for (v, want) in [([1.0, 0.0], softplus(-1.0)), ([0.0, 1.0], 2f64.ln()), ([-1.0, 0.0], softplus(1.0))] {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
        let b = tape.constant(Tensor::new(vec![1, 2], v.to_vec()).unwrap());
        let l = fusion::distill_loss(&mut tape, a, b).unwrap();
        assert!((tape.value(l).item() - want).abs() < 1e-12);
    }
}
