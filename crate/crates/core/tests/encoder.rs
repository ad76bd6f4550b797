//! Style encoder gradients against central differences.

mod common;

use common::*;
use protostyle::autodiff::{Tape, Tensor};
use protostyle::encoder::{EncoderConfig, StyleEncoder};
use protostyle::nn::ParamStore;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn pairing(enc: &StyleEncoder, frames: &Tensor, gg: &Tensor, gl: &Tensor) -> f64 {
    let f = enc.encode(frames).unwrap();
    (&f.global * gg).sum() + (&f.local * gl).sum()
}

#[test]
fn parameter_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    for case in 0..100 {
        let window = rng.random_range(1..=3);
        let cfg = EncoderConfig { input_dim: 3, width: 4, layers: rng.random_range(0..=2), hidden: 5, window };
        let enc = StyleEncoder::new(cfg, case);
        let len = window * rng.random_range(1..=3);
        let frames = random_tensor(&mut rng, len, 3);
        let gg = random_tensor(&mut rng, 1, 4);
        let gl = random_tensor(&mut rng, len / window, 4);
        let grads = enc.encode_backward(&frames, &gg, &gl).unwrap();
        let names: Vec<String> = enc.params.names().cloned().collect();
        let mut analytic = Vec::new();
        let mut flat = Vec::new();
        for n in &names {
            analytic.extend(grads.get(n).unwrap().iter());
            flat.extend(enc.params.get(n).unwrap().iter());
        }
        let eval = |x: &[f64]| {
            let mut store = ParamStore::new();
            let mut off = 0;
            for n in &names {
                let (r, c) = enc.params.get(n).unwrap().dim();
                store.insert(n.clone(), to_tensor(&x[off..off + r * c], r, c));
                off += r * c;
            }
            pairing(&StyleEncoder { config: cfg, params: store }, &frames, &gg, &gl)
        };
        let err = rel_err(&analytic, &central_diff(eval, &flat));
        assert!(err < FD_TOL, "case {case}: rel err {err:e}");
    }
}

#[test]
fn input_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for case in 0..100 {
        let cfg = EncoderConfig { input_dim: 3, width: 4, layers: 2, hidden: 5, window: 2 };
        let enc = StyleEncoder::new(cfg, 1000 + case);
        let frames = random_tensor(&mut rng, 4, 3);
        let gg = random_tensor(&mut rng, 1, 4);
        let gl = random_tensor(&mut rng, 2, 4);
        let mut tape = Tape::new();
        let b = enc.bind(&mut tape, false);
        let x = tape.var(frames.clone());
        let v = enc.forward(&mut tape, &b, x).unwrap();
        let grads = tape.backward_from(&[(v.global, gg.clone()), (v.local, gl.clone())]);
        let analytic: Vec<f64> = grads.get(x).unwrap().iter().cloned().collect();
        let flat: Vec<f64> = frames.iter().cloned().collect();
        let fd = central_diff(|z| pairing(&enc, &to_tensor(z, 4, 3), &gg, &gl), &flat);
        let err = rel_err(&analytic, &fd);
        assert!(err < FD_TOL, "case {case}: rel err {err:e}");
    }
}
