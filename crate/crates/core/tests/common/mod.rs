//! Finite-difference and random-instance helpers shared by integration tests.
#![allow(dead_code)]

use protostyle::autodiff::Tensor;
use protostyle::prototypes::normalized_rows;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

/// Central differences of a scalar function.
pub fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + FD_STEP;
            let up = f(&probe);
            probe[i] = x[i] - FD_STEP;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// ‖a − b‖ / max(‖a‖, ‖b‖, 1e-4). The floor keeps round-off in the
/// difference quotient (about 1e-10 at this step) from dominating when the
/// true gradient vanishes.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(1e-4)
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

pub fn random_unit(rng: &mut ChaCha8Rng, rows: usize, d: usize) -> Tensor {
    normalized_rows(&random_tensor(rng, rows, d))
}

pub fn to_tensor(v: &[f64], rows: usize, cols: usize) -> Tensor {
    Tensor::from_shape_vec((rows, cols), v.to_vec()).expect("matching length")
}

/// A corpus and model small enough to push through every CLI stage in
/// seconds.
pub const TINY: &[(&str, &str)] = &[
    ("n_per_cell", "4"),
    ("seq_len", "16"),
    ("channels", "4"),
    ("window", "4"),
    ("enc_layers", "1"),
    ("enc_width", "8"),
    ("enc_hidden", "8"),
    ("k_local", "4"),
    ("bank_capacity", "32"),
    ("latent_tokens", "2"),
    ("latent_dim", "4"),
    ("codec_hidden", "16"),
    ("codec_iters", "30"),
    ("timesteps", "50"),
    ("den_layers", "1"),
    ("den_width", "8"),
    ("den_hidden", "8"),
    ("base_iters", "20"),
    ("style_iters", "20"),
    ("batch_size", "4"),
    ("guidance_t_max", "15"),
    ("transfer_t_prime", "25"),
    ("ddim_steps", "5"),
    ("eval_samples", "4"),
    ("oracle_gate", "0"),
];

/// Writes TINY plus the three directories into `root/tiny.cfg`.
pub fn write_tiny_config(root: &std::path::Path) -> std::path::PathBuf {
    let mut text = String::from("# tiny end-to-end config\n");
    for (k, v) in TINY {
        text.push_str(&format!("{k} = {v}\n"));
    }
    for (k, d) in [("data_dir", "data"), ("run_dir", "run"), ("out_dir", "out")] {
        text.push_str(&format!("{k} = {}\n", root.join(d).display()));
    }
    let path = root.join("tiny.cfg");
    std::fs::write(&path, text).unwrap();
    path
}

/// Every file under `dir` with its bytes, sorted by relative path.
pub fn snapshot(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    fn walk(base: &std::path::Path, dir: &std::path::Path, out: &mut Vec<(String, Vec<u8>)>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(base, &p, out);
            } else {
                out.push((p.strip_prefix(base).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}
