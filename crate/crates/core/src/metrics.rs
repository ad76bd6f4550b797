//! Evaluation: NMI of prototype assignments, the gated oracle style
//! classifier, style recognition accuracy, diversity and content accuracy.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::corpus::{content_template, frame_distance, MotionSequence};
use crate::error::{Error, Result};

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts.filter(|&c| c > 0).map(|c| c as f64 / n).map(|p| -p * p.ln()).sum()
}

/// Normalized mutual information with arithmetic-mean normalization,
/// `2·I(a;b) / (H(a) + H(b))`. Two constant labelings score 1.
pub fn nmi(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{} vs {} labels", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let n = a.len() as f64;
    let mut ca: BTreeMap<usize, usize> = BTreeMap::new();
    let mut cb: BTreeMap<usize, usize> = BTreeMap::new();
    let mut joint: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *ca.entry(x).or_default() += 1;
        *cb.entry(y).or_default() += 1;
        *joint.entry((x, y)).or_default() += 1;
    }
    let (ha, hb) = (entropy(ca.values().copied(), n), entropy(cb.values().copied(), n));
    if ha == 0.0 && hb == 0.0 {
        return Ok(1.0);
    }
    let mut mi = 0.0;
    for (&(x, y), &c) in &joint {
        let pxy = c as f64 / n;
        mi += pxy * (pxy * n * n / (ca[&x] as f64 * cb[&y] as f64)).ln();
    }
    Ok((2.0 * mi / (ha + hb)).clamp(0.0, 1.0))
}

/// Per-channel temporal mean and standard deviation.
pub fn summary_features(frames: &Tensor) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * frames.ncols());
    for col in frames.columns() {
        let mean = col.mean().unwrap_or(0.0);
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len().max(1) as f64;
        out.push(mean);
        out.push(var.sqrt());
    }
    out
}

/// Nearest-centroid style classifier on standardized summary features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleClassifier {
    pub centroids: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub eval_accuracy: f64,
}

impl OracleClassifier {
    /// Fits on `train` and scores on `eval`; errors when eval accuracy is
    /// below `gate`.
    pub fn fit(train: &[MotionSequence], eval: &[MotionSequence], n_style: usize, gate: f64) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::InsufficientData { needed: 1, got: 0 });
        }
        let feats: Vec<Vec<f64>> = train.iter().map(|s| summary_features(&s.frames)).collect();
        let dim = feats[0].len();
        let n = feats.len() as f64;
        let mean: Vec<f64> = (0..dim).map(|j| feats.iter().map(|f| f[j]).sum::<f64>() / n).collect();
        let scale: Vec<f64> = (0..dim)
            .map(|j| (feats.iter().map(|f| (f[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt().max(1e-6))
            .collect();
        let mut centroids = vec![vec![0.0; dim]; n_style];
        let mut counts = vec![0usize; n_style];
        for (s, f) in train.iter().zip(&feats) {
            if s.style_id >= n_style {
                return Err(Error::Consistency(format!("style label {} >= {n_style}", s.style_id)));
            }
            counts[s.style_id] += 1;
            for j in 0..dim {
                centroids[s.style_id][j] += (f[j] - mean[j]) / scale[j];
            }
        }
        for (c, &k) in centroids.iter_mut().zip(&counts) {
            if k == 0 {
                return Err(Error::InsufficientData { needed: 1, got: 0 });
            }
            c.iter_mut().for_each(|v| *v /= k as f64);
        }
        let mut oracle = Self { centroids, mean, scale, eval_accuracy: 0.0 };
        let labels: Vec<usize> = eval.iter().map(|s| s.style_id).collect();
        let frames: Vec<&Tensor> = eval.iter().map(|s| &s.frames).collect();
        oracle.eval_accuracy = oracle.accuracy(&frames, &labels);
        if oracle.eval_accuracy < gate {
            return Err(Error::UngatedOracle { accuracy: oracle.eval_accuracy, required: gate });
        }
        Ok(oracle)
    }

    pub fn predict(&self, frames: &Tensor) -> usize {
        let f = summary_features(frames);
        let z: Vec<f64> = f.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) / s).collect();
        let mut best = (f64::INFINITY, 0);
        for (k, c) in self.centroids.iter().enumerate() {
            let d: f64 = c.iter().zip(&z).map(|(a, b)| (a - b).powi(2)).sum();
            if d < best.0 {
                best = (d, k);
            }
        }
        best.1
    }

    /// Style recognition accuracy: fraction predicted as the intended style.
    pub fn accuracy(&self, frames: &[&Tensor], intended: &[usize]) -> f64 {
        if frames.is_empty() {
            return 0.0;
        }
        let hits = frames.iter().zip(intended).filter(|(f, &s)| self.predict(f) == s).count();
        hits as f64 / frames.len() as f64
    }
}

/// Mean pairwise Euclidean distance over flattened frames.
pub fn diversity(samples: &[&Tensor]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::InsufficientData { needed: 2, got: samples.len() });
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..samples.len() {
        for j in i + 1..samples.len() {
            total += frame_distance(samples[i], samples[j]);
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// Pearson correlation between the trajectory channels and the canonical
/// trajectory of `content`. Zero when either side is constant.
pub fn content_score(frames: &Tensor, content: usize) -> f64 {
    let traj = frames.slice(ndarray::s![.., ..2]);
    let tmpl = content_template(content, frames.nrows());
    let n = traj.len() as f64;
    let (ma, mb) = (traj.sum() / n, tmpl.sum() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (a, b) in traj.iter().zip(tmpl.iter()) {
        sab += (a - ma) * (b - mb);
        saa += (a - ma).powi(2);
        sbb += (b - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

/// Content class whose canonical trajectory is nearest to the sequence's
/// trajectory channels.
pub fn classify_content(frames: &Tensor, n_content: usize) -> usize {
    let traj = frames.slice(ndarray::s![.., ..2]).to_owned();
    let mut best = (f64::INFINITY, 0);
    for c in 0..n_content {
        let d = frame_distance(&traj, &content_template(c, frames.nrows()));
        if d < best.0 {
            best = (d, c);
        }
    }
    best.1
}

pub fn content_accuracy(frames: &[&Tensor], intended: &[usize], n_content: usize) -> f64 {
    if frames.is_empty() {
        return 0.0;
    }
    let hits = frames.iter().zip(intended).filter(|(f, &c)| classify_content(f, n_content) == c).count();
    hits as f64 / frames.len() as f64
}
