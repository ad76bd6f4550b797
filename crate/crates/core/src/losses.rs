//! Prototype-based style losses with analytic gradients on the feature.
//!
//! Prototype sets are passed per style (`&[Tensor]`, each K×d', unit rows);
//! gradients never flow into them.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::config::Config;
use crate::encoder::StyleFeature;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Cosine,
    L1,
    L2,
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cosine" => Ok(Self::Cosine),
            "l1" => Ok(Self::L1),
            "l2" => Ok(Self::L2),
            _ => Err(Error::config("metric", format!("expected cosine, l1 or l2, got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Contrastive,
    Entropy,
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "contrastive" => Ok(Self::Contrastive),
            "entropy" => Ok(Self::Entropy),
            _ => Err(Error::config("variant", format!("expected contrastive or entropy, got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StyleLossConfig {
    pub tau: f64,
    pub beta_same: f64,
    pub metric: Metric,
    pub variant: Variant,
}

impl Default for StyleLossConfig {
    fn default() -> Self {
        Self { tau: 0.05, beta_same: 5.0, metric: Metric::Cosine, variant: Variant::Contrastive }
    }
}

impl StyleLossConfig {
    pub fn from_config(c: &Config) -> Result<Self> {
        let metric = c.raw("metric").parse()?;
        let variant = c.raw("variant").parse()?;
        let cfg = Self { tau: c.get("tau")?, beta_same: c.get("beta_same")?, metric, variant };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config("tau", "must be > 0"));
        }
        if !(self.beta_same >= 1.0 && self.beta_same.is_finite()) {
            return Err(Error::config("beta_same", "must be >= 1"));
        }
        Ok(())
    }
}

/// Scalar loss and its gradient on the feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_feature(f: &[f64], dim: usize) -> Result<f64> {
    if f.len() != dim {
        return Err(Error::Shape(format!("feature width {} vs prototypes {dim}", f.len())));
    }
    if f.iter().any(|v| !v.is_finite()) {
        return Err(Error::Precondition("feature must be finite".into()));
    }
    let norm = dot(f, f).sqrt();
    if norm < 1e-12 {
        return Err(Error::Precondition("feature has zero norm".into()));
    }
    Ok(norm)
}

/// Maps a gradient with respect to f/|f| back to f.
fn through_normalization(fhat: &[f64], norm: f64, g: &[f64]) -> Vec<f64> {
    let proj = dot(fhat, g);
    fhat.iter().zip(g).map(|(u, gi)| (gi - u * proj) / norm).collect()
}

/// Distance between f and a unit prototype under `metric`, with its gradient
/// on f. Both sides are compared after normalization.
pub fn distance(metric: Metric, f: &[f64], p: &[f64]) -> (f64, Vec<f64>) {
    let norm = dot(f, f).sqrt().max(1e-12);
    let fhat: Vec<f64> = f.iter().map(|v| v / norm).collect();
    let (d, g_hat) = match metric {
        Metric::Cosine => (1.0 - dot(&fhat, p), p.iter().map(|v| -v).collect::<Vec<_>>()),
        Metric::L1 => {
            let d = fhat.iter().zip(p).map(|(a, b)| (a - b).abs()).sum();
            (d, fhat.iter().zip(p).map(|(a, b)| crate::autodiff::sign(a - b)).collect())
        }
        Metric::L2 => {
            let diff: Vec<f64> = fhat.iter().zip(p).map(|(a, b)| a - b).collect();
            let d = dot(&diff, &diff).sqrt();
            let g = if d > 0.0 { diff.iter().map(|v| v / d).collect() } else { vec![0.0; diff.len()] };
            (d, g)
        }
    };
    (d, through_normalization(&fhat, norm, &g_hat))
}

/// Nearest prototype of one style: (distance, index, gradient). Lowest index
/// wins ties.
fn nearest(metric: Metric, f: &[f64], protos: &Tensor) -> (f64, usize, Vec<f64>) {
    let mut best: Option<(f64, usize, Vec<f64>)> = None;
    for (k, row) in protos.rows().into_iter().enumerate() {
        let p = row.to_vec();
        let (d, g) = distance(metric, f, &p);
        if best.as_ref().is_none_or(|(bd, _, _)| d < *bd) {
            best = Some((d, k, g));
        }
    }
    best.expect("non-empty prototype set")
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(xs);
    xs.iter().map(|x| (x - lse).exp()).collect()
}

fn check_sets(protos: &[Tensor]) -> Result<usize> {
    let first = protos.first().ok_or(Error::EmptyBank)?;
    let dim = first.ncols();
    for (s, p) in protos.iter().enumerate() {
        if p.nrows() == 0 || p.ncols() != dim {
            return Err(Error::Shape(format!("style {s}: prototype set {:?}", p.dim())));
        }
    }
    Ok(dim)
}

/// Softmax over styles of the negated nearest-prototype distance, scored on
/// the own style.
pub fn inter_style_loss(f: &[f64], protos: &[Tensor], own: usize, cfg: &StyleLossConfig) -> Result<LossGrad> {
    let dim = check_sets(protos)?;
    check_feature(f, dim)?;
    if own >= protos.len() {
        return Err(Error::Consistency(format!("style {own} not in bank of {}", protos.len())));
    }
    let per_style: Vec<(f64, usize, Vec<f64>)> = protos.iter().map(|p| nearest(cfg.metric, f, p)).collect();
    let logits: Vec<f64> = per_style.iter().map(|(d, _, _)| -d).collect();
    let loss = per_style[own].0 + log_sum_exp(&logits);
    let probs = softmax(&logits);
    let mut grad = vec![0.0; dim];
    for (s, (_, _, g)) in per_style.iter().enumerate() {
        // dL/dd_s
        let w = if s == own { 1.0 - probs[s] } else { -probs[s] };
        if w != 0.0 {
            for (acc, gi) in grad.iter_mut().zip(g) {
                *acc += w * gi;
            }
        }
    }
    Ok(LossGrad { loss: loss.max(0.0), grad })
}

/// Contrastive loss against the assigned prototype `(own, positive)`; every
/// other prototype at the level is a negative, weighted by `beta_same` when it
/// belongs to the own style.
pub fn intra_style_loss(
    f: &[f64],
    protos: &[Tensor],
    own: usize,
    positive: usize,
    cfg: &StyleLossConfig,
) -> Result<LossGrad> {
    let dim = check_sets(protos)?;
    check_feature(f, dim)?;
    if own >= protos.len() || positive >= protos[own].nrows() {
        return Err(Error::Consistency(format!("positive prototype ({own}, {positive}) is not in the bank")));
    }
    let ln_beta = cfg.beta_same.ln();
    // (logit, similarity gradient) with the positive first
    let mut terms: Vec<(f64, Vec<f64>)> = Vec::new();
    let sim = |p: &[f64]| {
        let (d, g) = distance(cfg.metric, f, p);
        (1.0 - d, g.into_iter().map(|v| -v).collect::<Vec<_>>())
    };
    let (s0, g0) = sim(&protos[own].row(positive).to_vec());
    terms.push((s0 / cfg.tau, g0));
    for (s, set) in protos.iter().enumerate() {
        for (k, row) in set.rows().into_iter().enumerate() {
            if s == own && k == positive {
                continue;
            }
            let (sk, gk) = sim(&row.to_vec());
            let offset = if s == own { ln_beta } else { 0.0 };
            terms.push((sk / cfg.tau + offset, gk));
        }
    }
    let logits: Vec<f64> = terms.iter().map(|(l, _)| *l).collect();
    let loss = log_sum_exp(&logits) - logits[0];
    let probs = softmax(&logits);
    let mut grad = vec![0.0; dim];
    for (j, (_, g)) in terms.iter().enumerate() {
        let w = (probs[j] - if j == 0 { 1.0 } else { 0.0 }) / cfg.tau;
        for (acc, gi) in grad.iter_mut().zip(g) {
            *acc += w * gi;
        }
    }
    Ok(LossGrad { loss: loss.max(0.0), grad })
}

/// Global and local style losses with gradients shaped like the feature.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleLossOutput {
    pub total: f64,
    pub global: f64,
    pub local: f64,
    /// 1×d'
    pub grad_global: Tensor,
    /// L_w×d'
    pub grad_local: Tensor,
}

/// Positive prototype indices: one global, one per local row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Positives {
    pub global: usize,
    pub local: Vec<usize>,
}

fn both_terms(
    f: &[f64],
    protos: &[Tensor],
    own: usize,
    positive: usize,
    cfg: &StyleLossConfig,
) -> Result<LossGrad> {
    let inter = inter_style_loss(f, protos, own, cfg)?;
    let intra = intra_style_loss(f, protos, own, positive, cfg)?;
    let grad = inter.grad.iter().zip(&intra.grad).map(|(a, b)| a + b).collect();
    Ok(LossGrad { loss: inter.loss + intra.loss, grad })
}

/// Global term on f_g plus the mean over rows of f_l of the local term.
pub fn style_loss(
    features: &StyleFeature,
    global: &[Tensor],
    local: &[Tensor],
    own: usize,
    positives: &Positives,
    cfg: &StyleLossConfig,
) -> Result<StyleLossOutput> {
    let rows = features.local.nrows();
    if positives.local.len() != rows {
        return Err(Error::Shape(format!("{} local positives for {rows} segments", positives.local.len())));
    }
    let g = both_terms(&features.global_vec(), global, own, positives.global, cfg)?;
    let mut grad_local = Tensor::zeros(features.local.dim());
    let mut local_loss = 0.0;
    for (i, &pos) in positives.local.iter().enumerate() {
        let t = both_terms(&features.local.row(i).to_vec(), local, own, pos, cfg)?;
        local_loss += t.loss / rows as f64;
        for (j, v) in t.grad.iter().enumerate() {
            grad_local[[i, j]] = v / rows as f64;
        }
    }
    let grad_global = Tensor::from_shape_vec((1, g.grad.len()), g.grad).expect("row vector");
    Ok(StyleLossOutput { total: g.loss + local_loss, global: g.loss, local: local_loss, grad_global, grad_local })
}

/// Cross-entropy of a linear head `logits = W f + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyLoss {
    pub loss: f64,
    pub grad_f: Vec<f64>,
    /// S×d'
    pub grad_weight: Tensor,
    /// 1×S
    pub grad_bias: Tensor,
}

pub fn entropy_variant_loss(f: &[f64], weight: &Tensor, bias: &Tensor, own: usize) -> Result<EntropyLoss> {
    let (s, d) = weight.dim();
    if f.len() != d || bias.dim() != (1, s) {
        return Err(Error::Shape(format!(
            "head {:?} / bias {:?} incompatible with feature width {}",
            weight.dim(),
            bias.dim(),
            f.len()
        )));
    }
    if own >= s {
        return Err(Error::Consistency(format!("style {own} outside head of {s} classes")));
    }
    let logits: Vec<f64> = (0..s).map(|c| dot(&weight.row(c).to_vec(), f) + bias[[0, c]]).collect();
    let loss = (log_sum_exp(&logits) - logits[own]).max(0.0);
    let mut dl = softmax(&logits);
    dl[own] -= 1.0;
    let grad_f = (0..d).map(|j| (0..s).map(|c| dl[c] * weight[[c, j]]).sum()).collect();
    let grad_weight = Tensor::from_shape_fn((s, d), |(c, j)| dl[c] * f[j]);
    let grad_bias = Tensor::from_shape_fn((1, s), |(_, c)| dl[c]);
    Ok(EntropyLoss { loss, grad_f, grad_weight, grad_bias })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    fn set(rows: &[&[f64]]) -> Tensor {
        let d = rows[0].len();
        Tensor::from_shape_fn((rows.len(), d), |(i, j)| rows[i][j])
    }

    #[test]
    fn single_style_inter_is_zero() {
        let p = vec![set(&[&[1.0, 0.0], &[0.0, 1.0]])];
        let l = inter_style_loss(&[0.3, 0.7], &p, 0, &StyleLossConfig::default()).unwrap();
        assert_eq!(l.loss, 0.0);
        assert!(l.grad.iter().all(|g| g.abs() < 1e-15));
    }

    #[test]
    fn symmetric_styles_give_ln2() {
        let p = vec![set(&[&[1.0, 0.0]]), set(&[&[0.0, 1.0]])];
        let l = inter_style_loss(&[1.0, 1.0], &p, 0, &StyleLossConfig::default()).unwrap();
        assert!((l.loss - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_bank_errors() {
        assert!(matches!(inter_style_loss(&[1.0], &[], 0, &StyleLossConfig::default()), Err(Error::EmptyBank)));
    }

    #[test]
    fn lone_prototype_intra_is_zero() {
        let p = vec![set(&[&[0.6, 0.8]])];
        let l = intra_style_loss(&[0.1, 2.0], &p, 0, 0, &StyleLossConfig::default()).unwrap();
        assert_eq!(l.loss, 0.0);
    }

    #[test]
    fn equal_same_style_negative_gives_ln6() {
        // f at 45 degrees from both prototypes
        let p = vec![set(&[&[1.0, 0.0], &[0.0, 1.0]])];
        let l = intra_style_loss(&[1.0, 1.0], &p, 0, 1, &StyleLossConfig::default()).unwrap();
        assert!((l.loss - 6f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn missing_positive_is_consistency_error() {
        let p = vec![set(&[&[1.0, 0.0]])];
        let r = intra_style_loss(&[1.0, 0.0], &p, 0, 3, &StyleLossConfig::default());
        assert!(matches!(r, Err(Error::Consistency(_))));
    }

    #[test]
    fn intra_near_zero_at_optimum() {
        let p = vec![set(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]]), set(&[&[0.0, 0.0, 1.0]])];
        let l = intra_style_loss(&[1.0, 0.0, 0.0], &p, 0, 0, &StyleLossConfig::default()).unwrap();
        assert!(l.loss < 1e-3, "{}", l.loss);
    }

    #[test]
    fn uniform_logits_give_ln4() {
        let w = Tensor::zeros((4, 3));
        let b = Tensor::zeros((1, 4));
        let l = entropy_variant_loss(&[0.2, -0.4, 1.0], &w, &b, 2).unwrap();
        assert!((l.loss - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn large_margin_drives_entropy_to_zero() {
        let w = Tensor::zeros((2, 1));
        let b = arr2(&[[20.0, 0.0]]);
        let l = entropy_variant_loss(&[1.0], &w, &b, 0).unwrap();
        assert!(l.loss < 1e-8, "{}", l.loss);
    }

    #[test]
    fn metric_and_variant_parse() {
        assert_eq!("L1".parse::<Metric>().unwrap(), Metric::L1);
        assert!("cos".parse::<Metric>().is_err());
        assert_eq!("entropy".parse::<Variant>().unwrap(), Variant::Entropy);
    }

    #[test]
    fn config_validation() {
        let bad = StyleLossConfig { beta_same: 0.5, ..Default::default() };
        assert!(matches!(bad.validate(), Err(Error::Config { field, .. }) if field == "beta_same"));
        let bad = StyleLossConfig { tau: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
