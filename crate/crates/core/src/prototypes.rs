//! Non-learnable style prototypes.
//!
//! Each style owns `k_global` global and `k_local` local unit-norm prototypes.
//! Features are assigned to prototypes with entropy-regularized balanced
//! transport (Sinkhorn) and prototypes follow their assigned features by EMA.
//! Nothing here is touched by loss gradients.
//!
//! Matrices store one vector per row: features are N×d', prototypes K×d'.

use std::collections::VecDeque;

use log::debug;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::nn::ParamStore;

const UNIT_NORM_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinkhornConfig {
    /// Entropy weight.
    pub mu: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self { mu: 0.05, max_iters: 100, tol: 1e-6 }
    }
}

impl SinkhornConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return Err(Error::config("sinkhorn_mu", "must be > 0"));
        }
        if !(self.tol > 0.0) {
            return Err(Error::config("sinkhorn_tol", "must be > 0"));
        }
        if self.max_iters == 0 {
            return Err(Error::config("sinkhorn_iters", "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentMatrix {
    /// K×N transport plan; columns sum to 1, rows to N/K.
    pub relaxed: Tensor,
    /// Per-feature argmax over prototypes (lowest index on ties).
    pub hard: Vec<usize>,
    pub iterations: usize,
    /// False when `max_iters` ran out before both residuals fell below `tol`.
    pub converged: bool,
    pub row_residual: f64,
    pub col_residual: f64,
    /// Dual objective after every iteration (non-decreasing).
    pub dual_trace: Vec<f64>,
}

fn check_unit_rows(m: &Tensor, what: &str) -> Result<()> {
    for (i, row) in m.rows().into_iter().enumerate() {
        let n = row.dot(&row).sqrt();
        if (n - 1.0).abs() > UNIT_NORM_TOL || !n.is_finite() {
            return Err(Error::Precondition(format!("{what} row {i} has norm {n}, expected 1")));
        }
    }
    Ok(())
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Balanced assignment of unit-norm `features` (N×d) to unit-norm `prototypes` (K×d).
///
/// Solves `max ⟨P F, L⟩ + μ·H(L)` over nonnegative K×N plans with column sums 1
/// and row sums N/K, by log-domain Sinkhorn (block coordinate ascent on the dual).
pub fn sinkhorn_assign(features: &Tensor, prototypes: &Tensor, cfg: &SinkhornConfig) -> Result<AssignmentMatrix> {
    cfg.validate()?;
    let (n, d) = features.dim();
    let (k, dp) = prototypes.dim();
    if n == 0 || k == 0 {
        return Err(Error::Precondition("need at least one feature and one prototype".into()));
    }
    if d != dp {
        return Err(Error::Shape(format!("feature width {d} vs prototype width {dp}")));
    }
    check_unit_rows(features, "feature")?;
    check_unit_rows(prototypes, "prototype")?;

    let scores = prototypes.dot(&features.t()) / cfg.mu;
    let row_target = n as f64 / k as f64;
    let log_row = row_target.ln();
    let mut f = vec![0.0; k];
    let mut g = vec![0.0; n];
    let mut dual_trace = Vec::new();
    let mut iterations = 0;
    let mut row_residual = f64::INFINITY;

    // Row log-sums at the current g; they give both the next f and, before
    // that update, the row marginals of the current plan.
    let row_lse = |g: &[f64], out: &mut [f64]| {
        for (i, o) in out.iter_mut().enumerate() {
            *o = log_sum_exp((0..n).map(|j| scores[[i, j]] + g[j]));
        }
    };
    let mut lse = vec![0.0; k];
    row_lse(&g, &mut lse);
    for i in 0..k {
        f[i] = log_row - lse[i];
    }
    while iterations < cfg.max_iters {
        iterations += 1;
        for j in 0..n {
            g[j] = -log_sum_exp((0..k).map(|i| scores[[i, j]] + f[i]));
        }
        // Columns now sum to one; rows are exp(f_i + lse_i).
        row_lse(&g, &mut lse);
        let rows: Vec<f64> = (0..k).map(|i| (f[i] + lse[i]).exp()).collect();
        let mass: f64 = rows.iter().sum();
        row_residual = rows.iter().map(|r| (r - row_target).abs()).fold(0.0, f64::max);
        let dual = row_target * f.iter().sum::<f64>() + g.iter().sum::<f64>() - mass;
        dual_trace.push(dual);
        if row_residual < cfg.tol {
            break;
        }
        for i in 0..k {
            f[i] = log_row - lse[i];
        }
    }

    let mut relaxed = Tensor::zeros((k, n));
    for i in 0..k {
        for j in 0..n {
            relaxed[[i, j]] = (scores[[i, j]] + f[i] + g[j]).exp();
        }
    }
    let mut cols = vec![0.0; n];
    for row in relaxed.rows() {
        for (c, v) in cols.iter_mut().zip(row) {
            *c += v;
        }
    }
    let col_residual = cols.iter().map(|c| (c - 1.0).abs()).fold(0.0, f64::max);
    let converged = row_residual < cfg.tol && col_residual < cfg.tol;
    let hard = (0..n)
        .map(|j| {
            let mut best = 0;
            for i in 1..k {
                if relaxed[[i, j]] > relaxed[[best, j]] {
                    best = i;
                }
            }
            best
        })
        .collect();
    if !converged {
        debug!("sinkhorn stopped after {iterations} iterations (row residual {row_residual:.3e})");
    }
    Ok(AssignmentMatrix { relaxed, hard, iterations, converged, row_residual, col_residual, dual_trace })
}

pub fn normalize_vec(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

pub fn normalized_rows(m: &Tensor) -> Tensor {
    let mut out = m.clone();
    for mut row in out.rows_mut() {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row.mapv_inplace(|x| x / n);
        }
    }
    out
}

fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    1.0 - a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>()
}

/// Farthest-point seeding on normalized features, then one assign-and-average pass.
///
/// When every remaining feature coincides with an existing seed (duplicate
/// data) the new seed is a jittered copy of the last one, so the result always
/// holds K distinct unit vectors.
pub fn init_prototypes(features: &Tensor, k: usize) -> Result<Tensor> {
    let n = features.nrows();
    if k == 0 {
        return Err(Error::Precondition("k must be >= 1".into()));
    }
    if n < k {
        return Err(Error::InsufficientData { needed: k, got: n });
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::Precondition("features must be finite".into()));
    }
    let unit = normalized_rows(features);
    let rows: Vec<Vec<f64>> = unit.rows().into_iter().map(|r| r.to_vec()).collect();
    let d = features.ncols();

    let mut mean = vec![0.0; d];
    for r in &rows {
        mean.iter_mut().zip(r).for_each(|(m, x)| *m += x);
    }
    normalize_vec(&mut mean);
    let first = (0..n)
        .min_by(|&a, &b| cosine_distance(&rows[a], &mean).total_cmp(&cosine_distance(&rows[b], &mean)))
        .expect("n >= 1");
    let mut seeds = vec![rows[first].clone()];
    let mut min_dist: Vec<f64> = rows.iter().map(|r| cosine_distance(r, &seeds[0])).collect();
    while seeds.len() < k {
        let (far, &dist) = min_dist
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .expect("n >= 1");
        let seed = if dist > 1e-12 {
            rows[far].clone()
        } else {
            let mut s = seeds.last().expect("non-empty").clone();
            let big = (0..d).max_by(|&a, &b| s[a].abs().total_cmp(&s[b].abs())).unwrap_or(0);
            let j = (big + seeds.len()) % d;
            s[if j == big { (j + 1) % d } else { j }] += 0.05 * seeds.len() as f64;
            normalize_vec(&mut s);
            s
        };
        for (m, r) in min_dist.iter_mut().zip(&rows) {
            *m = m.min(cosine_distance(r, &seed));
        }
        seeds.push(seed);
    }

    let mut sums = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    for r in &rows {
        let best = (0..k)
            .min_by(|&a, &b| cosine_distance(r, &seeds[a]).total_cmp(&cosine_distance(r, &seeds[b])))
            .expect("k >= 1");
        counts[best] += 1;
        sums[best].iter_mut().zip(r).for_each(|(s, x)| *s += x);
    }
    let mut out = Tensor::zeros((k, d));
    for c in 0..k {
        let mut p = if counts[c] > 0 { sums[c].clone() } else { seeds[c].clone() };
        normalize_vec(&mut p);
        if p.iter().all(|&x| x == 0.0) {
            p = seeds[c].clone();
        }
        out.row_mut(c).assign(&ndarray::ArrayView1::from(&p));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Global,
    Local,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    pub dim: usize,
    pub k_global: usize,
    pub k_local: usize,
    pub momentum: f64,
    /// Per style, K_g×d'.
    pub global: Vec<Tensor>,
    /// Per style, K_l×d'.
    pub local: Vec<Tensor>,
    pub frozen: bool,
    pub update_count: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct BankMeta {
    dim: usize,
    n_style: usize,
    k_global: usize,
    k_local: usize,
    momentum: f64,
    frozen: bool,
    update_count: u64,
}

impl PrototypeBank {
    pub fn new(global: Vec<Tensor>, local: Vec<Tensor>, momentum: f64) -> Result<Self> {
        if global.is_empty() || global.len() != local.len() {
            return Err(Error::Shape("global and local prototype sets must cover the same styles".into()));
        }
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::config("proto_momentum", "must lie in [0, 1]"));
        }
        let dim = global[0].ncols();
        let k_global = global[0].nrows();
        let k_local = local[0].nrows();
        for (g, l) in global.iter().zip(&local) {
            if g.dim() != (k_global, dim) || l.dim() != (k_local, dim) {
                return Err(Error::Shape("inconsistent prototype shapes across styles".into()));
            }
            check_unit_rows(g, "global prototype")?;
            check_unit_rows(l, "local prototype")?;
        }
        Ok(Self { dim, k_global, k_local, momentum, global, local, frozen: false, update_count: 0 })
    }

    pub fn n_style(&self) -> usize {
        self.global.len()
    }

    pub fn level(&self, level: Level) -> &[Tensor] {
        match level {
            Level::Global => &self.global,
            Level::Local => &self.local,
        }
    }

    pub fn prototypes(&self, style: usize, level: Level) -> &Tensor {
        &self.level(level)[style]
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// `p ← λ·p + (1−λ)·mean(assigned)`, renormalized. Returns the indices of
    /// prototypes that received no features and were left unchanged.
    pub fn ema_update(
        &mut self,
        style: usize,
        level: Level,
        assignment: &[usize],
        features: &Tensor,
    ) -> Result<Vec<usize>> {
        if self.frozen {
            return Err(Error::FrozenBank);
        }
        if style >= self.n_style() {
            return Err(Error::Consistency(format!("style {style} not in bank")));
        }
        if assignment.len() != features.nrows() {
            return Err(Error::Shape(format!(
                "{} assignments for {} features",
                assignment.len(),
                features.nrows()
            )));
        }
        if features.ncols() != self.dim {
            return Err(Error::Shape(format!("feature width {} vs bank {}", features.ncols(), self.dim)));
        }
        let lambda = self.momentum;
        let protos = match level {
            Level::Global => &mut self.global[style],
            Level::Local => &mut self.local[style],
        };
        let k = protos.nrows();
        if let Some(&bad) = assignment.iter().find(|&&a| a >= k) {
            return Err(Error::Consistency(format!("assignment {bad} >= K={k}")));
        }
        let mut sums = Tensor::zeros((k, self.dim));
        let mut counts = vec![0usize; k];
        for (row, &a) in features.rows().into_iter().zip(assignment) {
            let mut s = sums.row_mut(a);
            s += &row;
            counts[a] += 1;
        }
        let mut empty = Vec::new();
        for c in 0..k {
            if counts[c] == 0 {
                empty.push(c);
                continue;
            }
            let mean = sums.row(c).mapv(|x| x / counts[c] as f64);
            let mut p: Vec<f64> =
                protos.row(c).iter().zip(mean.iter()).map(|(p, m)| lambda * p + (1.0 - lambda) * m).collect();
            normalize_vec(&mut p);
            protos.row_mut(c).assign(&ndarray::ArrayView1::from(&p));
        }
        if !empty.is_empty() {
            debug!("style {style} {level:?}: {} prototypes received no features", empty.len());
        }
        self.update_count += 1;
        Ok(empty)
    }

    pub fn to_store(&self) -> (ParamStore, serde_json::Value) {
        let mut store = ParamStore::new();
        for s in 0..self.n_style() {
            store.insert(format!("proto.global.{s:03}"), self.global[s].clone());
            store.insert(format!("proto.local.{s:03}"), self.local[s].clone());
        }
        let meta = BankMeta {
            dim: self.dim,
            n_style: self.n_style(),
            k_global: self.k_global,
            k_local: self.k_local,
            momentum: self.momentum,
            frozen: self.frozen,
            update_count: self.update_count,
        };
        (store, serde_json::to_value(meta).expect("plain struct"))
    }

    /// Rebuilds a bank; prototypes are renormalized to undo f32 storage rounding.
    pub fn from_store(store: &ParamStore, meta: &serde_json::Value) -> Result<Self> {
        let meta: BankMeta = serde_json::from_value(meta.clone())?;
        let mut global = Vec::with_capacity(meta.n_style);
        let mut local = Vec::with_capacity(meta.n_style);
        for s in 0..meta.n_style {
            global.push(normalized_rows(store.get(&format!("proto.global.{s:03}"))?));
            local.push(normalized_rows(store.get(&format!("proto.local.{s:03}"))?));
        }
        let mut bank = Self::new(global, local, meta.momentum)?;
        if bank.k_global != meta.k_global || bank.k_local != meta.k_local || bank.dim != meta.dim {
            return Err(Error::format("prototype bank", "sidecar disagrees with tensor shapes"));
        }
        bank.frozen = meta.frozen;
        bank.update_count = meta.update_count;
        Ok(bank)
    }

    /// Index of the most similar prototype of `style` (cosine, lowest index on ties).
    pub fn nearest(&self, style: usize, level: Level, feature: &[f64]) -> usize {
        let mut f = feature.to_vec();
        normalize_vec(&mut f);
        let protos = self.prototypes(style, level);
        let mut best = 0;
        let mut best_sim = f64::NEG_INFINITY;
        for (k, row) in protos.rows().into_iter().enumerate() {
            let sim: f64 = row.iter().zip(&f).map(|(a, b)| a * b).sum();
            if sim > best_sim {
                best_sim = sim;
                best = k;
            }
        }
        best
    }
}

/// Per-style FIFO of normalized features, the transport problem's support.
#[derive(Debug, Clone)]
pub struct FeatureMemory {
    capacity: usize,
    per_style: Vec<VecDeque<Vec<f64>>>,
}

impl FeatureMemory {
    pub fn new(n_style: usize, capacity: usize) -> Self {
        Self { capacity: capacity.max(1), per_style: vec![VecDeque::new(); n_style] }
    }

    pub fn push(&mut self, style: usize, feature: &[f64]) {
        let mut f = feature.to_vec();
        normalize_vec(&mut f);
        let q = &mut self.per_style[style];
        if q.len() == self.capacity {
            q.pop_front();
        }
        q.push_back(f);
    }

    pub fn len(&self, style: usize) -> usize {
        self.per_style[style].len()
    }

    pub fn is_empty(&self, style: usize) -> bool {
        self.per_style[style].is_empty()
    }

    /// Stored features of one style as an N×d matrix (oldest first).
    pub fn matrix(&self, style: usize) -> Option<Tensor> {
        let q = &self.per_style[style];
        let d = q.front()?.len();
        let mut m = Tensor::zeros((q.len(), d));
        for (i, f) in q.iter().enumerate() {
            m.row_mut(i).assign(&ndarray::ArrayView1::from(f));
        }
        Some(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn single_prototype_takes_everything() {
        let f = normalized_rows(&array![[1.0, 0.2], [0.3, 1.0], [-1.0, 0.1]]);
        let p = array![[1.0, 0.0]];
        let a = sinkhorn_assign(&f, &p, &SinkhornConfig::default()).unwrap();
        assert!(a.relaxed.iter().all(|&v| (v - 1.0).abs() < 1e-12));
        assert_eq!(a.hard, vec![0, 0, 0]);
    }

    #[test]
    fn equal_scores_give_uniform_plan() {
        let f = array![[0.0, 1.0], [0.0, 1.0], [0.0, -1.0]];
        let p = array![[1.0, 0.0], [-1.0, 0.0], [1.0, 0.0]];
        let a = sinkhorn_assign(&f, &p, &SinkhornConfig::default()).unwrap();
        assert!(a.relaxed.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn rejects_unnormalized_inputs() {
        let f = array![[2.0, 0.0]];
        let p = array![[1.0, 0.0]];
        assert!(matches!(sinkhorn_assign(&f, &p, &SinkhornConfig::default()), Err(Error::Precondition(_))));
    }

    #[test]
    fn non_convergence_is_flagged_not_raised() {
        let f = normalized_rows(&array![[1.0, 0.0], [0.9, 0.1], [0.8, 0.3], [0.0, 1.0]]);
        let p = array![[1.0, 0.0], [0.0, 1.0]];
        let cfg = SinkhornConfig { mu: 0.05, max_iters: 1, tol: 1e-14 };
        let a = sinkhorn_assign(&f, &p, &cfg).unwrap();
        assert!(!a.converged);
        assert_eq!(a.iterations, 1);
    }

    #[test]
    fn init_single_prototype_is_normalized_mean() {
        let f = array![[1.0, 0.0], [0.0, 2.0]];
        let p = init_prototypes(&f, 1).unwrap();
        let s = 0.5f64.sqrt();
        assert!((p[[0, 0]] - s).abs() < 1e-12 && (p[[0, 1]] - s).abs() < 1e-12);
    }

    #[test]
    fn init_needs_enough_features() {
        let f = array![[1.0, 0.0]];
        assert!(matches!(init_prototypes(&f, 2), Err(Error::InsufficientData { needed: 2, got: 1 })));
    }

    #[test]
    fn init_jitters_duplicate_seeds() {
        let f = array![[1.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        let p = init_prototypes(&f, 2).unwrap();
        assert_ne!(p.row(0), p.row(1));
        for r in p.rows() {
            assert!((r.dot(&r).sqrt() - 1.0).abs() < 1e-12);
        }
    }

    fn bank_2d() -> PrototypeBank {
        PrototypeBank::new(vec![array![[1.0, 0.0]]], vec![array![[0.0, 1.0]]], 0.95).unwrap()
    }

    #[test]
    fn ema_default_momentum_arithmetic() {
        let mut bank = bank_2d();
        bank.ema_update(0, Level::Global, &[0], &array![[0.0, 1.0]]).unwrap();
        let n = (0.95f64 * 0.95 + 0.05 * 0.05).sqrt();
        let p = &bank.global[0];
        assert!((p[[0, 0]] - 0.95 / n).abs() < 1e-12);
        assert!((p[[0, 1]] - 0.05 / n).abs() < 1e-12);
        assert_eq!(bank.update_count, 1);
    }

    #[test]
    fn ema_degenerate_momenta() {
        let mut keep = bank_2d();
        keep.momentum = 1.0;
        keep.ema_update(0, Level::Global, &[0, 0], &array![[0.0, 1.0], [0.6, 0.8]]).unwrap();
        assert_eq!(keep.global[0], array![[1.0, 0.0]]);

        let mut jump = bank_2d();
        jump.momentum = 0.0;
        jump.ema_update(0, Level::Global, &[0, 0], &array![[0.0, 1.0], [0.6, 0.8]]).unwrap();
        let mut m = vec![0.3, 0.9];
        normalize_vec(&mut m);
        assert!((jump.global[0][[0, 0]] - m[0]).abs() < 1e-12);
        assert!((jump.global[0][[0, 1]] - m[1]).abs() < 1e-12);
    }

    #[test]
    fn empty_clusters_are_left_alone() {
        let mut bank =
            PrototypeBank::new(vec![array![[1.0, 0.0], [0.0, 1.0]]], vec![array![[0.0, 1.0]]], 0.5).unwrap();
        let empty = bank.ema_update(0, Level::Global, &[0], &array![[0.6, 0.8]]).unwrap();
        assert_eq!(empty, vec![1]);
        assert_eq!(bank.global[0].row(1).to_vec(), vec![0.0, 1.0]);
    }

    #[test]
    fn freeze_blocks_updates_and_is_idempotent() {
        let mut bank = bank_2d();
        bank.freeze();
        bank.freeze();
        assert!(bank.frozen);
        assert!(matches!(
            bank.ema_update(0, Level::Local, &[0], &array![[1.0, 0.0]]),
            Err(Error::FrozenBank)
        ));
    }

    #[test]
    fn frozen_bank_round_trips() {
        let mut bank = bank_2d();
        bank.freeze();
        let (store, meta) = bank.to_store();
        let back = PrototypeBank::from_store(&crate::checkpoint::decode(&crate::checkpoint::encode(&store)).unwrap(), &meta).unwrap();
        assert!(back.frozen);
        assert_eq!(back.global, bank.global);
    }

    #[test]
    fn memory_is_fifo() {
        let mut m = FeatureMemory::new(1, 2);
        m.push(0, &[1.0, 0.0]);
        m.push(0, &[0.0, 2.0]);
        m.push(0, &[3.0, 0.0]);
        let mat = m.matrix(0).unwrap();
        assert_eq!(mat, array![[0.0, 1.0], [1.0, 0.0]]);
    }
}
