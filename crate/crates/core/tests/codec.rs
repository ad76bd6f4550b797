//! Codec objective, gradients and training behavior.

mod common;

use common::*;
use protostyle::autodiff::Tensor;
use protostyle::codec::{kl_divergence, train_codec, Codec, CodecConfig};
use protostyle::config::Config;
use protostyle::corpus::{generate_corpus, split_corpus, CorpusConfig};
use protostyle::nn::ParamStore;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny(seed: u64) -> CodecConfig {
    CodecConfig { seq_len: 4, channels: 2, tokens: 2, dim: 2, hidden: 5, kl_weight: 0.1, iters: 1, lr: 1e-3, batch: 3, seed }
}

/// KL of one pair of scalar Gaussians by Simpson quadrature of p·ln(p/q).
fn kl_by_quadrature(m: f64, logvar: f64) -> f64 {
    let s = (0.5 * logvar).exp();
    let (lo, hi, n) = (m - 14.0 * s, m + 14.0 * s, 20_000);
    let h = (hi - lo) / n as f64;
    let integrand = |x: f64| {
        let lp = -0.5 * ((x - m) / s).powi(2) - s.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
        let lq = -0.5 * x * x - 0.5 * (2.0 * std::f64::consts::PI).ln();
        lp.exp() * (lp - lq)
    };
    let mut acc = integrand(lo) + integrand(hi);
    for i in 1..n {
        acc += integrand(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    acc * h / 3.0
}

#[test]
fn kl_closed_form_matches_quadrature() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    for _ in 0..20 {
        let mean = random_tensor(&mut rng, 2, 3);
        let logvar = random_tensor(&mut rng, 2, 3);
        let oracle: f64 = mean.iter().zip(logvar.iter()).map(|(&m, &l)| kl_by_quadrature(m, l)).sum();
        let kl = kl_divergence(&mean, &logvar);
        assert!((kl - oracle).abs() < 1e-8, "{kl} vs {oracle}");
        assert!(kl > 0.0);
    }
    assert_eq!(kl_divergence(&Tensor::zeros((2, 2)), &Tensor::zeros((2, 2))), 0.0);
    assert!(kl_divergence(&Tensor::zeros((1, 1)), &Tensor::from_elem((1, 1), 1e-3)) > 0.0);
}

#[test]
fn objective_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for case in 0..100 {
        let mut codec = Codec::new(tiny(case));
        // perturb away from init so every layer is exercised
        for name in codec.params.names().cloned().collect::<Vec<_>>() {
            let t = codec.params.get_mut(&name).unwrap();
            t.mapv_inplace(|v| v + rng.random_range(-0.3..0.3));
        }
        let batch = random_tensor(&mut rng, 3, 8);
        let eps = random_tensor(&mut rng, 3, 4);
        let (_, _, grads) = codec.loss_and_grads(&batch, &eps);
        let names: Vec<String> = codec.params.names().cloned().collect();
        let mut analytic = Vec::new();
        let mut flat = Vec::new();
        for n in &names {
            analytic.extend(grads.get(n).unwrap().iter());
            flat.extend(codec.params.get(n).unwrap().iter());
        }
        let rebuild = |x: &[f64]| {
            let mut store = ParamStore::new();
            let mut off = 0;
            for n in &names {
                let shape = codec.params.get(n).unwrap().dim();
                let len = shape.0 * shape.1;
                store.insert(n.clone(), to_tensor(&x[off..off + len], shape.0, shape.1));
                off += len;
            }
            let c = Codec { params: store, ..codec.clone() };
            c.loss_and_grads(&batch, &eps).0
        };
        let fd = central_diff(rebuild, &flat);
        let err = rel_err(&analytic, &fd);
        assert!(err < FD_TOL, "case {case}: rel err {err:e}");
    }
}

#[test]
fn memorizes_a_constant_sequence_without_kl() {
    let cfg = CodecConfig {
        seq_len: 8,
        channels: 3,
        tokens: 2,
        dim: 4,
        hidden: 32,
        kl_weight: 0.0,
        iters: 600,
        lr: 3e-3,
        batch: 1,
        seed: 3,
    };
    let seq = Tensor::from_shape_fn((8, 3), |(_, j)| [0.5, -0.2, 0.9][j]);
    let (codec, log) = train_codec(&[seq.clone()], cfg).unwrap();
    assert!(log.train_mse < 1e-4, "mse {}", log.train_mse);
    assert!(codec.reconstruction_mse(&[seq]).unwrap() < 1e-4);
}

fn default_split() -> (Vec<Tensor>, Vec<Tensor>) {
    let c = Config::default();
    let corpus = generate_corpus(&CorpusConfig::from_config(&c).unwrap()).unwrap();
    let (train, eval) = split_corpus(&corpus, 0.75, 7).unwrap();
    (train.into_iter().map(|s| s.frames).collect(), eval.into_iter().map(|s| s.frames).collect())
}

#[test]
fn smoothed_loss_decreases_at_small_learning_rate() {
    let (train, _) = default_split();
    let cfg = CodecConfig { iters: 500, lr: 3e-4, ..CodecConfig::from_config(&Config::default()).unwrap() };
    let (_, log) = train_codec(&train, cfg).unwrap();
    let windows: Vec<f64> = log.losses.chunks(50).map(|w| w.iter().sum::<f64>() / w.len() as f64).collect();
    let rising = windows.windows(2).filter(|w| w[1] > w[0]).count();
    assert!(rising <= 1, "{rising} rising windows in {windows:?}");
    assert!(windows.last().unwrap() < &(0.5 * windows[0]));
}

#[test]
fn trained_codec_reconstructs_and_generalizes() {
    let (train, eval) = default_split();
    let cfg = CodecConfig::from_config(&Config::default()).unwrap();
    let (codec, log) = train_codec(&train, cfg).unwrap();
    let eval_mse = codec.reconstruction_mse(&eval).unwrap();
    assert!(log.train_mse < 0.05, "train mse {}", log.train_mse);
    assert!(eval_mse <= 1.25 * log.train_mse, "eval {eval_mse} vs train {}", log.train_mse);
    // same seed, same weights
    let small = CodecConfig { iters: 20, ..cfg };
    assert_eq!(train_codec(&train[..40], small).unwrap().0, train_codec(&train[..40], small).unwrap().0);
}
