//! Latent diffusion: noise schedule, forward process and the conditional
//! denoiser with its Style Modulation Adapter.
//!
//! The denoiser works on one latent (n_z×d_z tokens) at a time. Each block is
//! pre-norm self-attention, then the SMA (content cross-attention plus
//! λ-scaled style cross-attention), then a SiLU MLP, all residual.

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::checkpoint::sha256_hex;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::nn::{self, Adam, AdamConfig, Bindings, ParamStore};

pub const PREFIX: &str = "den.";

/// Family of the ᾱ table.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    Cosine,
    ScaledLinear,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Self::Cosine),
            "scaled_linear" => Ok(Self::ScaledLinear),
            _ => Err(Error::config("schedule", format!("expected cosine or scaled_linear, got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub timesteps: usize,
    /// ᾱ^t for t = 0..=T.
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Cosine schedule with offset 0.008; per-step betas clipped at 0.999.
    pub fn cosine(timesteps: usize) -> Result<Self> {
        if timesteps == 0 {
            return Err(Error::config("timesteps", "must be >= 1"));
        }
        let s = 0.008;
        let f = |t: usize| (((t as f64 / timesteps as f64) + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos().powi(2);
        let mut alpha_bar = Vec::with_capacity(timesteps + 1);
        alpha_bar.push(1.0);
        for t in 1..=timesteps {
            let beta = (1.0 - f(t) / f(t - 1)).clamp(0.0, 0.999);
            alpha_bar.push(alpha_bar[t - 1] * (1.0 - beta));
        }
        Self::from_table(alpha_bar)
    }

    /// √β linear from √0.00085 to √0.012, the latent-diffusion default.
    /// Betas are scaled by 1000/T so the ᾱ curve keeps its shape at other T.
    pub fn scaled_linear(timesteps: usize) -> Result<Self> {
        if timesteps == 0 {
            return Err(Error::config("timesteps", "must be >= 1"));
        }
        let (lo, hi) = (0.00085f64.sqrt(), 0.012f64.sqrt());
        let mut alpha_bar = Vec::with_capacity(timesteps + 1);
        alpha_bar.push(1.0);
        for t in 1..=timesteps {
            let frac = if timesteps == 1 { 1.0 } else { (t - 1) as f64 / (timesteps - 1) as f64 };
            let beta = ((lo + frac * (hi - lo)).powi(2) * 1000.0 / timesteps as f64).min(0.999);
            alpha_bar.push(alpha_bar[t - 1] * (1.0 - beta));
        }
        Self::from_table(alpha_bar)
    }

    pub fn new(kind: ScheduleKind, timesteps: usize) -> Result<Self> {
        match kind {
            ScheduleKind::Cosine => Self::cosine(timesteps),
            ScheduleKind::ScaledLinear => Self::scaled_linear(timesteps),
        }
    }

    pub fn from_table(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.len() < 2 || alpha_bar[0] != 1.0 {
            return Err(Error::config("timesteps", "schedule needs ᾱ^0 = 1 and at least one step"));
        }
        if alpha_bar.iter().any(|a| !(*a > 0.0 && *a <= 1.0)) || alpha_bar.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::config("timesteps", "ᾱ must be positive and non-increasing"));
        }
        Ok(Self { timesteps: alpha_bar.len() - 1, alpha_bar })
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar.get(t).copied().ok_or(Error::Timestep { t, max: self.timesteps })
    }

    pub fn hash(&self) -> String {
        let bytes: Vec<u8> = self.alpha_bar.iter().flat_map(|a| a.to_le_bytes()).collect();
        sha256_hex(&bytes)
    }
}

/// `√ᾱ·z0 + √(1−ᾱ)·eps`.
pub fn forward_diffuse(z0: &Tensor, t: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    if z0.dim() != eps.dim() {
        return Err(Error::Shape(format!("z0 {:?} vs eps {:?}", z0.dim(), eps.dim())));
    }
    let a = schedule.alpha_bar(t)?;
    Ok(z0 * a.sqrt() + eps * (1.0 - a).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub latent_tokens: usize,
    pub latent_dim: usize,
    pub width: usize,
    pub layers: usize,
    pub hidden: usize,
    /// Style token width d'.
    pub style_dim: usize,
    pub n_content: usize,
    pub content_tokens: usize,
    pub timesteps: usize,
    /// The schedule the denoiser is trained against.
    #[serde(default)]
    pub schedule: ScheduleKind,
}

impl DenoiserConfig {
    pub fn from_config(c: &Config) -> Result<Self> {
        let cfg = Self {
            latent_tokens: c.get("latent_tokens")?,
            latent_dim: c.get("latent_dim")?,
            width: c.get("den_width")?,
            layers: c.get("den_layers")?,
            hidden: c.get("den_hidden")?,
            style_dim: c.get("enc_width")?,
            n_content: c.get("n_content")?,
            content_tokens: c.get("content_tokens")?,
            timesteps: c.get("timesteps")?,
            schedule: c.raw("schedule").parse()?,
        };
        for (field, v) in [
            ("den_width", cfg.width),
            ("den_layers", cfg.layers),
            ("den_hidden", cfg.hidden),
            ("content_tokens", cfg.content_tokens),
            ("timesteps", cfg.timesteps),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be >= 1"));
            }
        }
        Ok(cfg)
    }
}

/// Names of the style-branch tensors: the only denoiser weights trained
/// during stylization.
pub fn is_style_branch(name: &str) -> bool {
    name.ends_with(".sma.wk_s") || name.ends_with(".sma.wv_s") || name.ends_with(".sma.lambda") || name == "den.null_style"
}

/// Tape handles of one SMA.
#[derive(Debug, Clone, Copy)]
pub struct SmaVars {
    pub wq_c: Var,
    pub wk_c: Var,
    pub wv_c: Var,
    pub wk_s: Var,
    pub wv_s: Var,
    /// 1×1
    pub lambda: Var,
}

/// `softmax(Q K_cᵀ/√d) V_c + λ·softmax(Q K_sᵀ/√d) V_s` with `Q = x W_q_c`,
/// content keys/values from `content` (m×d) and style keys/values from
/// `style` ((L_w+1)×d').
pub fn sma_forward(tape: &mut Tape, x: Var, content: Var, style: Var, w: &SmaVars) -> Var {
    let q = tape.matmul(x, w.wq_c);
    let kc = tape.matmul(content, w.wk_c);
    let vc = tape.matmul(content, w.wv_c);
    let o_content = nn::attention(tape, q, kc, vc);
    let ks = tape.matmul(style, w.wk_s);
    let vs = tape.matmul(style, w.wv_s);
    let o_style = nn::attention(tape, q, ks, vs);
    let scaled = tape.scale_by(o_style, w.lambda);
    tape.add(o_content, scaled)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub params: ParamStore,
}

fn block(l: usize, part: &str) -> String {
    format!("{PREFIX}l{l}.{part}")
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD1FF);
        let mut p = ParamStore::new();
        let (d, ds) = (config.width, config.style_dim);
        let sq = |n: usize| 1.0 / (n as f64).sqrt();
        nn::init_linear(&mut p, &mut rng, "den.in", config.latent_dim, d);
        nn::init_linear(&mut p, &mut rng, "den.time1", d, d);
        nn::init_linear(&mut p, &mut rng, "den.time2", d, d);
        let rows = (config.n_content + 1) * config.content_tokens;
        p.insert("den.content", nn::randn(&mut rng, rows, d, 1.0));
        p.insert("den.null_style", nn::randn(&mut rng, 1, ds, 1.0));
        for l in 0..config.layers {
            for part in ["attn.wq", "attn.wk", "attn.wv", "attn.wo", "sma.wq_c", "sma.wk_c", "sma.wv_c", "sma.wo"] {
                p.insert(block(l, part), nn::randn(&mut rng, d, d, sq(d)));
            }
            p.insert(block(l, "sma.wk_s"), nn::randn(&mut rng, ds, d, sq(ds)));
            p.insert(block(l, "sma.wv_s"), nn::randn(&mut rng, ds, d, sq(ds)));
            p.insert(block(l, "sma.lambda"), Tensor::zeros((1, 1)));
            nn::init_linear(&mut p, &mut rng, &block(l, "ff1"), d, config.hidden);
            nn::init_linear(&mut p, &mut rng, &block(l, "ff2"), config.hidden, d);
        }
        nn::init_linear(&mut p, &mut rng, "den.out", d, config.latent_dim);
        p.get_mut("den.out.w").expect("just inserted").mapv_inplace(|v| v * 0.1);
        Self { config, params: p }
    }

    pub fn from_params(config: DenoiserConfig, params: ParamStore) -> Result<Self> {
        let reference = Self::new(config, 0);
        for (n, t) in reference.params.iter() {
            if params.get(n)?.dim() != t.dim() {
                return Err(Error::Shape(format!("{n}: {:?} vs {:?}", params.get(n)?.dim(), t.dim())));
            }
        }
        Ok(Self { config, params })
    }

    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(&str) -> bool) -> Bindings {
        Bindings::bind(tape, &self.params, trainable)
    }

    pub fn sma_vars(b: &Bindings, l: usize) -> SmaVars {
        SmaVars {
            wq_c: b.get(&block(l, "sma.wq_c")),
            wk_c: b.get(&block(l, "sma.wk_c")),
            wv_c: b.get(&block(l, "sma.wv_c")),
            wk_s: b.get(&block(l, "sma.wk_s")),
            wv_s: b.get(&block(l, "sma.wv_s")),
            lambda: b.get(&block(l, "sma.lambda")),
        }
    }

    fn content_rows(&self, content: Option<usize>) -> Result<Vec<usize>> {
        let c = match content {
            Some(c) if c >= self.config.n_content => {
                return Err(Error::Consistency(format!("content class {c} >= {}", self.config.n_content)))
            }
            Some(c) => c,
            None => self.config.n_content,
        };
        let k = self.config.content_tokens;
        Ok((c * k..(c + 1) * k).collect())
    }

    /// Noise prediction graph. `style` is a (L_w+1)×d' token matrix; `None`
    /// selects the learned null style token, `content = None` the null content.
    pub fn forward(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        z: Var,
        t: usize,
        content: Option<usize>,
        style: Option<Var>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let want = (cfg.latent_tokens, cfg.latent_dim);
        if tape.shape(z) != want {
            return Err(Error::Shape(format!("latent {:?}, denoiser expects {want:?}", tape.shape(z))));
        }
        if t > cfg.timesteps {
            return Err(Error::Timestep { t, max: cfg.timesteps });
        }
        let style = match style {
            Some(s) => {
                if tape.shape(s).1 != cfg.style_dim {
                    return Err(Error::Shape(format!("style tokens {:?}, width {} expected", tape.shape(s), cfg.style_dim)));
                }
                s
            }
            None => b.get("den.null_style"),
        };
        let rows = self.content_rows(content)?;
        let content = tape.select_rows(b.get("den.content"), &rows);

        let temb = tape.constant(nn::sinusoidal_embedding(t as f64, cfg.width));
        let temb = nn::linear(tape, b, "den.time1", temb);
        let temb = tape.silu(temb);
        let temb = nn::linear(tape, b, "den.time2", temb);

        let mut h = nn::linear(tape, b, "den.in", z);
        let pos = tape.constant(nn::positional_table(cfg.latent_tokens, cfg.width));
        h = tape.add(h, pos);
        for l in 0..cfg.layers {
            h = tape.add_row(h, temb);
            let n = tape.layer_norm_rows(h);
            let q = tape.matmul(n, b.get(&block(l, "attn.wq")));
            let k = tape.matmul(n, b.get(&block(l, "attn.wk")));
            let v = tape.matmul(n, b.get(&block(l, "attn.wv")));
            let a = nn::attention(tape, q, k, v);
            let a = tape.matmul(a, b.get(&block(l, "attn.wo")));
            h = tape.add(h, a);

            let n = tape.layer_norm_rows(h);
            let o = sma_forward(tape, n, content, style, &Self::sma_vars(b, l));
            let o = tape.matmul(o, b.get(&block(l, "sma.wo")));
            h = tape.add(h, o);

            let n = tape.layer_norm_rows(h);
            let f = nn::linear(tape, b, &block(l, "ff1"), n);
            let f = tape.silu(f);
            let f = nn::linear(tape, b, &block(l, "ff2"), f);
            h = tape.add(h, f);
        }
        let n = tape.layer_norm_rows(h);
        Ok(nn::linear(tape, b, "den.out", n))
    }

    /// Value-level noise prediction.
    pub fn denoise(&self, z_t: &Tensor, t: usize, content: Option<usize>, style: Option<&Tensor>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, |_| false);
        let z = tape.constant(z_t.clone());
        let s = style.map(|s| tape.constant(s.clone()));
        let out = self.forward(&mut tape, &b, z, t, content, s)?;
        Ok(tape.value(out).clone())
    }

    /// Mean squared noise-prediction error for one example.
    #[allow(clippy::too_many_arguments)]
    pub fn loss_graph(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        z0: &Tensor,
        t: usize,
        eps: &Tensor,
        schedule: &NoiseSchedule,
        content: Option<usize>,
        style: Option<Var>,
    ) -> Result<Var> {
        let zt = tape.constant(forward_diffuse(z0, t, eps, schedule)?);
        let pred = self.forward(tape, b, zt, t, content, style)?;
        let target = tape.constant(eps.clone());
        let diff = tape.sub(pred, target);
        let sq = tape.square(diff);
        Ok(tape.mean_all(sq))
    }

    pub fn lambdas(&self) -> Vec<f64> {
        (0..self.config.layers).map(|l| self.params.get(&block(l, "sma.lambda")).map(|t| t[[0, 0]]).unwrap_or(0.0)).collect()
    }
}

/// Draws a standard normal tensor.
pub fn gaussian(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

/// Content-only pretraining settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaseTrainConfig {
    pub iters: usize,
    pub lr: f64,
    pub batch: usize,
    pub cond_drop_prob: f64,
    pub seed: u64,
}

impl BaseTrainConfig {
    pub fn from_config(c: &Config) -> Result<Self> {
        let cfg = Self {
            iters: c.get("base_iters")?,
            lr: c.get("base_lr")?,
            batch: c.get("batch_size")?,
            cond_drop_prob: c.get("cond_drop_prob")?,
            seed: c.get("seed")?,
        };
        if !(0.0..=1.0).contains(&cfg.cond_drop_prob) {
            return Err(Error::config("cond_drop_prob", "must lie in [0, 1]"));
        }
        if cfg.batch == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        Ok(cfg)
    }
}

/// Cosine learning-rate decay to 10% of `base`.
pub fn cosine_lr(base: f64, it: usize, total: usize) -> f64 {
    base * (0.1 + 0.45 * (1.0 + (std::f64::consts::PI * it as f64 / total.max(1) as f64).cos()))
}

/// Trains every content-path weight on `(latent, content class)` pairs with
/// the style branch held at its null token and λ = 0. Returns per-step losses.
pub fn pretrain_base(
    den: &mut Denoiser,
    data: &[(Tensor, usize)],
    schedule: &NoiseSchedule,
    cfg: &BaseTrainConfig,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xBA5E);
    let mut opt = Adam::new(AdamConfig { lr: cfg.lr, ..Default::default() });
    let mut losses = Vec::with_capacity(cfg.iters);
    let content_path = |n: &str| !is_style_branch(n);
    for it in 0..cfg.iters {
        let mut tape = Tape::new();
        let b = den.bind(&mut tape, content_path);
        let mut terms = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let (z0, c) = &data[rng.random_range(0..data.len())];
            let t = rng.random_range(1..=schedule.timesteps);
            let eps = gaussian(&mut rng, z0.nrows(), z0.ncols());
            let content = if rng.random::<f64>() < cfg.cond_drop_prob { None } else { Some(*c) };
            terms.push(den.loss_graph(&mut tape, &b, z0, t, &eps, schedule, content, None)?);
        }
        let sum = tape.concat_rows(&terms);
        let loss = tape.mean_all(sum);
        let grads = tape.backward(loss);
        let g = b.gradients(&tape, &grads).filtered(content_path);
        opt.step_with_lr(&mut den.params, &g, cosine_lr(cfg.lr, it, cfg.iters));
        losses.push(tape.scalar(loss));
        if it % 250 == 0 {
            info!("base iter {it}: loss {:.4}", tape.scalar(loss));
        }
    }
    if !den.params.all_finite() {
        return Err(Error::Consistency("base denoiser training diverged".into()));
    }
    Ok(losses)
}
