//! Stylization: encoder pretraining with prototype clustering, bank freeze,
//! then joint training of the encoder and the denoiser's style branch.

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::config::Config;
use crate::diffusion::{cosine_lr, gaussian, is_style_branch, Denoiser, NoiseSchedule};
use crate::encoder::{EncodedVars, StyleEncoder, StyleFeature};
use crate::error::{Error, Result};
use crate::losses::{entropy_variant_loss, style_loss, Positives, StyleLossConfig, Variant};
use crate::nn::{self, Adam, AdamConfig, Bindings, ParamStore};
use crate::prototypes::{
    init_prototypes, normalized_rows, sinkhorn_assign, FeatureMemory, Level, PrototypeBank, SinkhornConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StyleTrainConfig {
    pub iters: usize,
    pub lr: f64,
    /// Learning rate of the denoiser style branch in the joint phase.
    pub branch_lr: f64,
    pub batch: usize,
    pub pretrain_frac: f64,
    pub lambda_style: f64,
    pub cond_drop_prob: f64,
    pub k_global: usize,
    pub k_local: usize,
    pub momentum: f64,
    pub capacity: usize,
    pub sinkhorn: SinkhornConfig,
    pub loss: StyleLossConfig,
    pub seed: u64,
}

impl StyleTrainConfig {
    pub fn from_config(c: &Config) -> Result<Self> {
        let cfg = Self {
            iters: c.get("style_iters")?,
            lr: c.get("style_lr")?,
            branch_lr: c.get("branch_lr")?,
            batch: c.get("batch_size")?,
            pretrain_frac: c.get("encoder_pretrain_frac")?,
            lambda_style: c.get("lambda_style")?,
            cond_drop_prob: c.get("cond_drop_prob")?,
            k_global: c.get("k_global")?,
            k_local: c.get("k_local")?,
            momentum: c.get("proto_momentum")?,
            capacity: c.get("bank_capacity")?,
            sinkhorn: SinkhornConfig {
                mu: c.get("sinkhorn_mu")?,
                max_iters: c.get("sinkhorn_iters")?,
                tol: c.get("sinkhorn_tol")?,
            },
            loss: StyleLossConfig::from_config(c)?,
            seed: c.get("seed")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.pretrain_frac) {
            return Err(Error::config("encoder_pretrain_frac", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.cond_drop_prob) {
            return Err(Error::config("cond_drop_prob", "must lie in [0, 1]"));
        }
        if !(self.lambda_style >= 0.0) {
            return Err(Error::config("lambda_style", "must be >= 0"));
        }
        if self.k_global == 0 || self.k_local == 0 {
            return Err(Error::config("k_global", "prototype counts must be >= 1"));
        }
        if !(self.lr > 0.0) || !(self.branch_lr > 0.0) {
            return Err(Error::config("style_lr", "learning rates must be > 0"));
        }
        if self.batch == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        self.sinkhorn.validate()?;
        self.loss.validate()
    }

    pub fn pretrain_iters(&self) -> usize {
        (self.pretrain_frac * self.iters as f64).round() as usize
    }
}

/// One stylization training example.
#[derive(Debug, Clone)]
pub struct StyleExample {
    pub frames: Tensor,
    /// Codec latent in diffusion units.
    pub latent: Tensor,
    pub content: usize,
    pub style: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub diff_style: f64,
    pub diff_content: f64,
    pub style: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StyleTrainLog {
    pub steps: Vec<StepReport>,
    pub sinkhorn_unconverged: usize,
    pub sinkhorn_calls: usize,
}

/// Learnable classification heads of the entropy ablation.
pub fn init_heads(n_style: usize, dim: usize, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4EAD);
    let mut p = ParamStore::new();
    for level in ["global", "local"] {
        p.insert(format!("head.{level}.w"), nn::randn(&mut rng, n_style, dim, 0.1));
        p.insert(format!("head.{level}.b"), Tensor::zeros((1, n_style)));
    }
    p
}

/// Encoder, bank and heads evolving through stylization.
#[derive(Debug, Clone)]
pub struct StyleState {
    pub encoder: StyleEncoder,
    pub bank: PrototypeBank,
    pub heads: ParamStore,
    global_memory: FeatureMemory,
    local_memory: FeatureMemory,
}

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    t.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn stack(rows: &[Vec<f64>]) -> Tensor {
    let d = rows.first().map_or(0, Vec::len);
    Tensor::from_shape_fn((rows.len(), d), |(i, j)| rows[i][j])
}

impl StyleState {
    /// Seeds prototypes from the initial encoder's features of each style.
    pub fn new(encoder: StyleEncoder, examples: &[StyleExample], n_style: usize, cfg: &StyleTrainConfig) -> Result<Self> {
        let mut global_memory = FeatureMemory::new(n_style, cfg.capacity);
        let mut local_memory = FeatureMemory::new(n_style, cfg.capacity);
        let mut global_sets = Vec::with_capacity(n_style);
        let mut local_sets = Vec::with_capacity(n_style);
        for s in 0..n_style {
            let feats: Vec<StyleFeature> = examples
                .iter()
                .filter(|e| e.style == s)
                .map(|e| encoder.encode(&e.frames))
                .collect::<Result<_>>()?;
            let g: Vec<Vec<f64>> = feats.iter().map(StyleFeature::global_vec).collect();
            let l: Vec<Vec<f64>> = feats.iter().flat_map(|f| rows_of(&f.local)).collect();
            if g.len() < cfg.k_global || l.len() < cfg.k_local {
                return Err(Error::InsufficientData { needed: cfg.k_global.max(cfg.k_local), got: g.len() });
            }
            global_sets.push(init_prototypes(&normalized_rows(&stack(&g)), cfg.k_global)?);
            local_sets.push(init_prototypes(&normalized_rows(&stack(&l)), cfg.k_local)?);
            for f in g.iter().rev().take(cfg.capacity).rev() {
                global_memory.push(s, f);
            }
            for f in l.iter().rev().take(cfg.capacity).rev() {
                local_memory.push(s, f);
            }
        }
        let bank = PrototypeBank::new(global_sets, local_sets, cfg.momentum)?;
        let dim = encoder.config.width;
        Ok(Self { encoder, bank, heads: init_heads(n_style, dim, cfg.seed), global_memory, local_memory })
    }

    /// Sinkhorn over memory plus `batch` rows of one style; returns the batch
    /// rows' hard assignments and whether the solve converged.
    fn assign(&self, style: usize, level: Level, batch: &[Vec<f64>], cfg: &SinkhornConfig) -> Result<(Vec<usize>, bool)> {
        let memory = match level {
            Level::Global => &self.global_memory,
            Level::Local => &self.local_memory,
        };
        let mut support: Vec<Vec<f64>> = memory.matrix(style).map(|m| rows_of(&m)).unwrap_or_default();
        let offset = support.len();
        support.extend(batch.iter().cloned());
        let features = normalized_rows(&stack(&support));
        let a = sinkhorn_assign(&features, self.bank.prototypes(style, level), cfg)?;
        Ok((a.hard[offset..].to_vec(), a.converged))
    }
}

/// Differentiable encodings of a batch plus their values.
struct EncodedBatch {
    vars: Vec<EncodedVars>,
    features: Vec<StyleFeature>,
}

fn encode_batch(tape: &mut Tape, b: &Bindings, enc: &StyleEncoder, batch: &[&StyleExample]) -> Result<EncodedBatch> {
    let mut vars = Vec::with_capacity(batch.len());
    let mut features = Vec::with_capacity(batch.len());
    for e in batch {
        let x = tape.constant(e.frames.clone());
        let v = enc.forward(tape, b, x)?;
        features.push(StyleFeature {
            frames: Tensor::zeros((0, 0)),
            global: tape.value(v.global).clone(),
            local: tape.value(v.local).clone(),
            window: enc.config.window,
        });
        vars.push(v);
    }
    Ok(EncodedBatch { vars, features })
}

/// Style objective for a batch: returns the mean loss and per-example seeds
/// on (f_g, f_l), each scaled by `weight / B`. Also accumulates head
/// gradients for the entropy variant.
fn style_objective(
    state: &StyleState,
    batch: &[&StyleExample],
    enc: &EncodedBatch,
    cfg: &StyleTrainConfig,
    weight: f64,
    log: &mut StyleTrainLog,
) -> Result<(f64, Vec<(Var, Tensor)>, ParamStore, Vec<(usize, Vec<usize>, Vec<usize>)>)> {
    let n = batch.len() as f64;
    let mut seeds = Vec::new();
    let mut head_grads = state.heads.zeros_like();
    let mut total = 0.0;
    // per style: batch indices, hard global assignments, hard local assignments
    let mut per_style: Vec<(usize, Vec<usize>, Vec<usize>)> = Vec::new();
    let mut positives: Vec<Option<Positives>> = vec![None; batch.len()];
    for s in 0..state.bank.n_style() {
        let idx: Vec<usize> = (0..batch.len()).filter(|&i| batch[i].style == s).collect();
        if idx.is_empty() {
            continue;
        }
        let g: Vec<Vec<f64>> = idx.iter().map(|&i| enc.features[i].global_vec()).collect();
        let l: Vec<Vec<f64>> = idx.iter().flat_map(|&i| rows_of(&enc.features[i].local)).collect();
        let (hard_g, ok_g) = state.assign(s, Level::Global, &g, &cfg.sinkhorn)?;
        let (hard_l, ok_l) = state.assign(s, Level::Local, &l, &cfg.sinkhorn)?;
        log.sinkhorn_calls += 2;
        log.sinkhorn_unconverged += usize::from(!ok_g) + usize::from(!ok_l);
        let rows = enc.features[idx[0]].local.nrows();
        for (j, &i) in idx.iter().enumerate() {
            positives[i] = Some(Positives { global: hard_g[j], local: hard_l[j * rows..(j + 1) * rows].to_vec() });
        }
        per_style.push((s, hard_g, hard_l));
    }
    for (i, e) in batch.iter().enumerate() {
        let f = &enc.features[i];
        let (loss, gg, gl) = match cfg.loss.variant {
            Variant::Contrastive => {
                let pos = positives[i].as_ref().expect("every style in the batch was assigned");
                let out = style_loss(f, &state.bank.global, &state.bank.local, e.style, pos, &cfg.loss)?;
                (out.total, out.grad_global, out.grad_local)
            }
            Variant::Entropy => {
                let hg = entropy_variant_loss(
                    &f.global_vec(),
                    state.heads.get("head.global.w")?,
                    state.heads.get("head.global.b")?,
                    e.style,
                )?;
                let rows = f.local.nrows();
                let mut gl = Tensor::zeros(f.local.dim());
                let mut local = 0.0;
                for r in 0..rows {
                    let hl = entropy_variant_loss(
                        &f.local.row(r).to_vec(),
                        state.heads.get("head.local.w")?,
                        state.heads.get("head.local.b")?,
                        e.style,
                    )?;
                    local += hl.loss / rows as f64;
                    gl.row_mut(r).assign(&ndarray::Array1::from(hl.grad_f).mapv(|v| v / rows as f64));
                    head_grads.get_mut("head.local.w")?.scaled_add(weight / (n * rows as f64), &hl.grad_weight);
                    head_grads.get_mut("head.local.b")?.scaled_add(weight / (n * rows as f64), &hl.grad_bias);
                }
                head_grads.get_mut("head.global.w")?.scaled_add(weight / n, &hg.grad_weight);
                head_grads.get_mut("head.global.b")?.scaled_add(weight / n, &hg.grad_bias);
                let gg = Tensor::from_shape_vec((1, hg.grad_f.len()), hg.grad_f).expect("row vector");
                (hg.loss + local, gg, gl)
            }
        };
        total += loss / n;
        seeds.push((enc.vars[i].global, gg * (weight / n)));
        seeds.push((enc.vars[i].local, gl * (weight / n)));
    }
    Ok((total, seeds, head_grads, per_style))
}

fn ema_step(state: &mut StyleState, batch: &[&StyleExample], enc: &EncodedBatch, groups: &[(usize, Vec<usize>, Vec<usize>)]) -> Result<()> {
    for (s, hard_g, hard_l) in groups {
        let idx: Vec<usize> = (0..batch.len()).filter(|&i| batch[i].style == *s).collect();
        let g = normalized_rows(&stack(&idx.iter().map(|&i| enc.features[i].global_vec()).collect::<Vec<_>>()));
        let l = normalized_rows(&stack(&idx.iter().flat_map(|&i| rows_of(&enc.features[i].local)).collect::<Vec<_>>()));
        if !state.bank.frozen {
            state.bank.ema_update(*s, Level::Global, hard_g, &g)?;
            state.bank.ema_update(*s, Level::Local, hard_l, &l)?;
        }
    }
    Ok(())
}

fn remember(state: &mut StyleState, batch: &[&StyleExample], enc: &EncodedBatch) {
    for (e, f) in batch.iter().zip(&enc.features) {
        state.global_memory.push(e.style, &f.global_vec());
        for r in rows_of(&f.local) {
            state.local_memory.push(e.style, &r);
        }
    }
}

struct Sampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl Sampler {
    fn new(n: usize, seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed), order: (0..n).collect(), cursor: n }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size.min(self.order.len()) {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

/// Encoder-only phase: style losses, Sinkhorn assignment and EMA updates.
pub fn pretrain_encoder(
    state: &mut StyleState,
    examples: &[StyleExample],
    cfg: &StyleTrainConfig,
    iters: usize,
    log: &mut StyleTrainLog,
) -> Result<()> {
    let mut sampler = Sampler::new(examples.len(), cfg.seed ^ 0x5E1F);
    let mut opt = Adam::new(AdamConfig { lr: cfg.lr, ..Default::default() });
    for it in 0..iters {
        let batch: Vec<&StyleExample> = sampler.next_batch(cfg.batch).into_iter().map(|i| &examples[i]).collect();
        let mut tape = Tape::new();
        let b = state.encoder.bind(&mut tape, true);
        let enc = encode_batch(&mut tape, &b, &state.encoder, &batch)?;
        let (loss, seeds, head_grads, groups) = style_objective(state, &batch, &enc, cfg, 1.0, log)?;
        let grads = tape.backward_from(&seeds);
        let mut g = b.gradients(&tape, &grads);
        g.extend(head_grads);
        let lr = cosine_lr(cfg.lr, it, iters);
        let mut all = state.encoder.params.clone();
        all.extend(state.heads.clone());
        opt.step_with_lr(&mut all, &g, lr);
        state.encoder.params = all.filtered(|n| n.starts_with(crate::encoder::PREFIX));
        state.heads = all.filtered(|n| n.starts_with("head."));
        ema_step(state, &batch, &enc, &groups)?;
        remember(state, &batch, &enc);
        log.steps.push(StepReport { style: loss, total: loss, ..Default::default() });
        if it % 100 == 0 {
            info!("encoder pretrain iter {it}: style loss {loss:.4}");
        }
    }
    Ok(())
}

/// Separate Adam states for the encoder (with its heads) and the denoiser
/// style branch.
#[derive(Debug, Clone)]
pub struct JointOptimizer {
    encoder: Adam,
    branch: Adam,
}

impl JointOptimizer {
    pub fn new(cfg: &StyleTrainConfig) -> Self {
        Self {
            encoder: Adam::new(AdamConfig { lr: cfg.lr, ..Default::default() }),
            branch: Adam::new(AdamConfig { lr: cfg.branch_lr, ..Default::default() }),
        }
    }
}

/// One joint step of the total objective; returns the loss report. `decay`
/// multiplies both learning rates.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    den: &mut Denoiser,
    state: &mut StyleState,
    style_batch: &[&StyleExample],
    content_batch: &[&StyleExample],
    schedule: &NoiseSchedule,
    cfg: &StyleTrainConfig,
    opt: &mut JointOptimizer,
    decay: f64,
    rng: &mut ChaCha8Rng,
    log: &mut StyleTrainLog,
) -> Result<StepReport> {
    if !state.bank.frozen {
        return Err(Error::Consistency("joint training requires a frozen prototype bank".into()));
    }
    let mut tape = Tape::new();
    let eb = state.encoder.bind(&mut tape, true);
    let db = den.bind(&mut tape, is_style_branch);
    let enc = encode_batch(&mut tape, &eb, &state.encoder, style_batch)?;
    let (style, mut seeds, head_grads, _) = style_objective(state, style_batch, &enc, cfg, cfg.lambda_style, log)?;

    let mut diff_s = Vec::with_capacity(style_batch.len());
    for (e, v) in style_batch.iter().zip(&enc.vars) {
        let t = rng.random_range(1..=schedule.timesteps);
        let eps = gaussian(rng, e.latent.nrows(), e.latent.ncols());
        let content = if rng.random::<f64>() < cfg.cond_drop_prob { None } else { Some(e.content) };
        let style_tokens = if rng.random::<f64>() < cfg.cond_drop_prob {
            None
        } else {
            Some(tape.concat_rows(&[v.global, v.local]))
        };
        diff_s.push(den.loss_graph(&mut tape, &db, &e.latent, t, &eps, schedule, content, style_tokens)?);
    }
    let mut diff_c = Vec::with_capacity(content_batch.len());
    for e in content_batch {
        let t = rng.random_range(1..=schedule.timesteps);
        let eps = gaussian(rng, e.latent.nrows(), e.latent.ncols());
        let content = if rng.random::<f64>() < cfg.cond_drop_prob { None } else { Some(e.content) };
        diff_c.push(den.loss_graph(&mut tape, &db, &e.latent, t, &eps, schedule, content, None)?);
    }
    let s_all = tape.concat_rows(&diff_s);
    let ls = tape.mean_all(s_all);
    let c_all = tape.concat_rows(&diff_c);
    let lc = tape.mean_all(c_all);
    let diff = tape.add(ls, lc);
    seeds.push((diff, Tensor::from_elem((1, 1), 1.0)));
    let grads = tape.backward_from(&seeds);
    let mut g = eb.gradients(&tape, &grads);
    g.extend(head_grads);

    let mut all = state.encoder.params.clone();
    all.extend(state.heads.clone());
    opt.encoder.step_with_lr(&mut all, &g, cfg.lr * decay);
    state.encoder.params = all.filtered(|n| n.starts_with(crate::encoder::PREFIX));
    state.heads = all.filtered(|n| n.starts_with("head."));
    let mut branch = den.params.filtered(is_style_branch);
    opt.branch.step_with_lr(&mut branch, &db.gradients(&tape, &grads).filtered(is_style_branch), cfg.branch_lr * decay);
    for (name, t) in branch.iter() {
        *den.params.get_mut(name)? = t.clone();
    }
    remember(state, style_batch, &enc);
    let (diff_style, diff_content) = (tape.scalar(ls), tape.scalar(lc));
    Ok(StepReport { diff_style, diff_content, style, total: diff_style + diff_content + cfg.lambda_style * style })
}

/// Full stylization: encoder pretraining, bank freeze, joint training.
pub fn train_style(
    den: &mut Denoiser,
    state: &mut StyleState,
    examples: &[StyleExample],
    schedule: &NoiseSchedule,
    cfg: &StyleTrainConfig,
) -> Result<StyleTrainLog> {
    let mut log = StyleTrainLog::default();
    let pre = cfg.pretrain_iters();
    pretrain_encoder(state, examples, cfg, pre, &mut log)?;
    state.bank.freeze();
    info!("prototype bank frozen after {pre} encoder iterations");
    let joint = cfg.iters - pre;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x701E);
    let mut styles = Sampler::new(examples.len(), cfg.seed ^ 0x57);
    let mut contents = Sampler::new(examples.len(), cfg.seed ^ 0xC0);
    let mut opt = JointOptimizer::new(cfg);
    for it in 0..joint {
        let sb: Vec<&StyleExample> = styles.next_batch(cfg.batch).into_iter().map(|i| &examples[i]).collect();
        let cb: Vec<&StyleExample> = contents.next_batch(cfg.batch).into_iter().map(|i| &examples[i]).collect();
        let decay = cosine_lr(1.0, it, joint);
        let report = train_step(den, state, &sb, &cb, schedule, cfg, &mut opt, decay, &mut rng, &mut log)?;
        if it % 100 == 0 {
            info!(
                "joint iter {it}: diff_s {:.4} diff_c {:.4} style {:.4} lambda {:?}",
                report.diff_style,
                report.diff_content,
                report.style,
                den.lambdas()
            );
        }
        log.steps.push(report);
    }
    if !den.params.all_finite() || !state.encoder.params.all_finite() {
        return Err(Error::Consistency("stylization diverged".into()));
    }
    if log.sinkhorn_unconverged > 0 {
        info!("sinkhorn hit its iteration cap in {}/{} solves", log.sinkhorn_unconverged, log.sinkhorn_calls);
    }
    Ok(log)
}
