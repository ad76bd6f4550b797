//! Inference: DDIM sampling with dual classifier-free guidance, classifier
//! and prototype guidance, and partial-noising style transfer.
//!
//! Guidance objectives are evaluated on the predicted clean latent with the
//! noise prediction held fixed, so `∇_{z_t} G = ∇_{ẑ0} G / √ᾱ^t` flows through
//! the codec decoder and the style encoder only.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::codec::Codec;
use crate::config::Config;
use crate::diffusion::{forward_diffuse, gaussian, Denoiser, NoiseSchedule};
use crate::encoder::StyleEncoder;
use crate::error::{Error, Result};
use crate::nn::Bindings;
use crate::prototypes::{normalized_rows, Level, PrototypeBank};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub w_c: f64,
    pub w_s: f64,
    pub gamma: f64,
    pub guidance_t_max: usize,
    pub gamma_g: f64,
    pub ddim_steps: usize,
    /// Bound on predicted clean latents in the DDIM update; 0 disables.
    pub clip_latent: f64,
    pub transfer_t_prime: usize,
    pub transfer_w_s: f64,
    pub transfer_gamma: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            w_c: 7.5,
            w_s: 1.0,
            gamma: 3.0,
            guidance_t_max: 300,
            gamma_g: 0.0,
            ddim_steps: 50,
            clip_latent: 4.0,
            transfer_t_prime: 500,
            transfer_w_s: 2.25,
            transfer_gamma: 2.5,
        }
    }
}

impl GuidanceConfig {
    pub fn from_config(c: &Config) -> Result<Self> {
        let cfg = Self {
            w_c: c.get("w_c")?,
            w_s: c.get("w_s")?,
            gamma: c.get("gamma")?,
            guidance_t_max: c.get("guidance_t_max")?,
            gamma_g: c.get("gamma_g")?,
            ddim_steps: c.get("ddim_steps")?,
            clip_latent: c.get("clip_latent")?,
            transfer_t_prime: c.get("transfer_t_prime")?,
            transfer_w_s: c.get("transfer_w_s")?,
            transfer_gamma: c.get("transfer_gamma")?,
        };
        cfg.validate(c.get("timesteps")?)?;
        Ok(cfg)
    }

    pub fn validate(&self, timesteps: usize) -> Result<()> {
        if self.ddim_steps == 0 {
            return Err(Error::config("ddim_steps", "must be >= 1"));
        }
        for (field, v) in [
            ("w_c", self.w_c),
            ("w_s", self.w_s),
            ("gamma", self.gamma),
            ("gamma_g", self.gamma_g),
            ("transfer_w_s", self.transfer_w_s),
            ("transfer_gamma", self.transfer_gamma),
        ] {
            if !v.is_finite() {
                return Err(Error::config(field, "must be finite"));
            }
        }
        if !(self.clip_latent >= 0.0 && self.clip_latent.is_finite()) {
            return Err(Error::config("clip_latent", "must be finite and >= 0"));
        }
        if self.guidance_t_max > timesteps {
            return Err(Error::config("guidance_t_max", format!("must be <= timesteps ({timesteps})")));
        }
        if self.transfer_t_prime > timesteps {
            return Err(Error::config("transfer_t_prime", format!("must be <= timesteps ({timesteps})")));
        }
        Ok(())
    }
}

/// `(z_t − √(1−ᾱ)·ε̂) / √ᾱ`.
pub fn predict_clean(z_t: &Tensor, t: usize, eps_hat: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    if z_t.dim() != eps_hat.dim() {
        return Err(Error::Shape(format!("z_t {:?} vs eps {:?}", z_t.dim(), eps_hat.dim())));
    }
    let a = schedule.alpha_bar(t)?;
    if a <= 0.0 {
        return Err(Error::Singular(t));
    }
    Ok((z_t - &(eps_hat * (1.0 - a).sqrt())) / a.sqrt())
}

/// `ε_uu + w_c·(ε_cu − ε_uu) + w_s·(ε_cs − ε_cu)`.
pub fn cfg_combine(eps_uu: &Tensor, eps_cu: &Tensor, eps_cs: &Tensor, w_c: f64, w_s: f64) -> Result<Tensor> {
    if eps_uu.dim() != eps_cu.dim() || eps_cu.dim() != eps_cs.dim() {
        return Err(Error::Shape(format!("{:?} / {:?} / {:?}", eps_uu.dim(), eps_cu.dim(), eps_cs.dim())));
    }
    // Telescoping at w_c = w_s = 1 must give eps_cs bit-exactly.
    if w_c == 1.0 && w_s == 1.0 {
        return Ok(eps_cs.clone());
    }
    let mut out = eps_uu.clone();
    out.zip_mut_with(eps_cu, |o, &cu| *o += w_c * (cu - *o));
    let delta = eps_cs - eps_cu;
    out.scaled_add(w_s, &delta);
    Ok(out)
}

/// Frozen decoder and style encoder used to score predicted clean latents.
#[derive(Debug, Clone, Copy)]
pub struct GuidancePipeline<'a> {
    pub codec: &'a Codec,
    pub encoder: &'a StyleEncoder,
    pub schedule: &'a NoiseSchedule,
}

/// Guidance objective value and its gradient on z_t.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceGrad {
    pub value: f64,
    pub grad: Tensor,
}

/// Target of prototype guidance.
#[derive(Debug, Clone, PartialEq)]
pub enum PrototypeTarget {
    /// One global prototype, 1×d'.
    Global(Tensor),
    /// One local prototype per segment, L_w×d'.
    Local(Tensor),
}

impl PrototypeTarget {
    pub fn global(bank: &PrototypeBank, style: usize, k: usize) -> Result<Self> {
        Self::check(bank, style)?;
        let p = bank.prototypes(style, Level::Global);
        if k >= p.nrows() {
            return Err(Error::config("prototype", format!("index {k} >= {}", p.nrows())));
        }
        Ok(Self::Global(p.row(k).to_owned().insert_axis(ndarray::Axis(0))))
    }

    pub fn local(bank: &PrototypeBank, style: usize, ks: &[usize]) -> Result<Self> {
        Self::check(bank, style)?;
        if ks.is_empty() {
            return Err(Error::config("local_prototypes", "empty local target list"));
        }
        let p = bank.prototypes(style, Level::Local);
        if let Some(&k) = ks.iter().find(|&&k| k >= p.nrows()) {
            return Err(Error::config("local_prototypes", format!("index {k} >= {}", p.nrows())));
        }
        Ok(Self::Local(p.select(ndarray::Axis(0), ks)))
    }

    fn check(bank: &PrototypeBank, style: usize) -> Result<()> {
        if !bank.frozen {
            return Err(Error::Precondition("prototype guidance needs a frozen bank".into()));
        }
        if style >= bank.n_style() {
            return Err(Error::config("style", format!("{style} >= {}", bank.n_style())));
        }
        Ok(())
    }
}

impl GuidancePipeline<'_> {
    /// Builds z_t → ẑ0 → x̂ → style features; returns (z_t var, features).
    fn features(
        &self,
        tape: &mut Tape,
        z_t: &Tensor,
        t: usize,
        eps_hat: &Tensor,
    ) -> Result<(Var, crate::encoder::EncodedVars)> {
        if z_t.dim() != eps_hat.dim() {
            return Err(Error::Shape(format!("z_t {:?} vs eps {:?}", z_t.dim(), eps_hat.dim())));
        }
        let a = self.schedule.alpha_bar(t)?;
        if a <= 0.0 {
            return Err(Error::Singular(t));
        }
        let codec_b = Bindings::bind_frozen(tape, &self.codec.params);
        let enc_b = self.encoder.bind(tape, false);
        let z = tape.var(z_t.clone());
        let noise = tape.constant(eps_hat * (1.0 - a).sqrt());
        let diff = tape.sub(z, noise);
        let z0 = tape.scale(diff, 1.0 / a.sqrt());
        let x = self.codec.decode_latent_graph(tape, &codec_b, z0);
        Ok((z, self.encoder.forward(tape, &enc_b, x)?))
    }

    /// `G = Σ|f_g(D(ẑ0)) − f_ref|` and its gradient on z_t; exactly zero for
    /// `t ≥ t_max`. The L1 adjoint uses sign(0) = 0.
    pub fn classifier_guidance_grad(
        &self,
        z_t: &Tensor,
        t: usize,
        eps_hat: &Tensor,
        style_ref: &Tensor,
        t_max: usize,
    ) -> Result<GuidanceGrad> {
        if t >= t_max {
            return Ok(GuidanceGrad { value: 0.0, grad: Tensor::zeros(z_t.dim()) });
        }
        let mut tape = Tape::new();
        let (z, f) = self.features(&mut tape, z_t, t, eps_hat)?;
        if style_ref.dim() != tape.shape(f.global) {
            return Err(Error::Shape(format!("reference feature {:?} vs {:?}", style_ref.dim(), tape.shape(f.global))));
        }
        let r = tape.constant(style_ref.clone());
        let d = tape.sub(f.global, r);
        let a = tape.abs(d);
        let g = tape.sum_all(a);
        let grads = tape.backward(g);
        Ok(GuidanceGrad { value: tape.scalar(g), grad: grads.get_or_zeros(z, z_t.dim()) })
    }

    /// Global: `1 − cos(f_g, p)`. Local: `Σ_i (1 − cos(f_{l,i}, p_i))`. The
    /// returned gradient is scaled by `gamma_g`; the value is not.
    pub fn prototype_guidance_grad(
        &self,
        z_t: &Tensor,
        t: usize,
        eps_hat: &Tensor,
        target: &PrototypeTarget,
        gamma_g: f64,
    ) -> Result<GuidanceGrad> {
        let mut tape = Tape::new();
        let (z, f) = self.features(&mut tape, z_t, t, eps_hat)?;
        let (feat, protos) = match target {
            PrototypeTarget::Global(p) => (f.global, p),
            PrototypeTarget::Local(p) => {
                if p.nrows() == 0 {
                    return Err(Error::config("local_prototypes", "empty local target list"));
                }
                (f.local, p)
            }
        };
        if protos.dim() != tape.shape(feat) {
            return Err(Error::Shape(format!("prototype target {:?} vs features {:?}", protos.dim(), tape.shape(feat))));
        }
        let n = tape.normalize_rows(feat);
        let p = tape.constant(normalized_rows(protos));
        let prod = tape.mul(n, p);
        let cos_sum = tape.sum_all(prod);
        let grads = tape.backward(cos_sum);
        let value = protos.nrows() as f64 - tape.scalar(cos_sum);
        let grad = grads.get_or_zeros(z, z_t.dim()) * -gamma_g;
        Ok(GuidanceGrad { value, grad })
    }
}

/// Everything a sampler needs, read-only.
#[derive(Debug, Clone, Copy)]
pub struct Models<'a> {
    pub codec: &'a Codec,
    pub encoder: &'a StyleEncoder,
    pub denoiser: &'a Denoiser,
    pub schedule: &'a NoiseSchedule,
}

impl<'a> Models<'a> {
    pub fn pipeline(&self) -> GuidancePipeline<'a> {
        GuidancePipeline { codec: self.codec, encoder: self.encoder, schedule: self.schedule }
    }
}

/// What to generate.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SampleSpec {
    pub content: Option<usize>,
    /// Style reference sequence (L×D); conditions the style branch and
    /// supplies the classifier-guidance target.
    pub style_ref: Option<Tensor>,
    pub target: Option<PrototypeTarget>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    pub frames: Tensor,
    pub latent: Tensor,
}

/// Descending DDIM visit list from `start`: `start`, then every grid point
/// `k·T/steps` below it, ending above 0.
pub fn ddim_timesteps(start: usize, timesteps: usize, steps: usize) -> Vec<usize> {
    let mut out = vec![start];
    for k in (1..=steps).rev() {
        let t = (k * timesteps + steps / 2) / steps;
        if t < start && t > 0 && out.last() != Some(&t) {
            out.push(t);
        }
    }
    out.retain(|&t| t > 0);
    out
}

struct Conditioning {
    content: Option<usize>,
    tokens: Option<Tensor>,
    reference: Option<Tensor>,
    target: Option<PrototypeTarget>,
    w_c: f64,
    w_s: f64,
    gamma: f64,
    gamma_g: f64,
    t_max: usize,
    clip: f64,
}

fn denoise_loop(models: &Models, mut z: Tensor, start: usize, steps: usize, cond: &Conditioning) -> Result<Tensor> {
    let den = models.denoiser;
    let sched = models.schedule;
    let pipe = models.pipeline();
    let visits = ddim_timesteps(start, sched.timesteps, steps);
    for (i, &t) in visits.iter().enumerate() {
        let t_prev = visits.get(i + 1).copied().unwrap_or(0);
        let eps_uu = den.denoise(&z, t, None, None)?;
        let eps_cu = match cond.content {
            Some(_) => den.denoise(&z, t, cond.content, None)?,
            None => eps_uu.clone(),
        };
        let eps_cs = match &cond.tokens {
            Some(s) => den.denoise(&z, t, cond.content, Some(s))?,
            None => eps_cu.clone(),
        };
        let mut eps = cfg_combine(&eps_uu, &eps_cu, &eps_cs, cond.w_c, cond.w_s)?;
        if cond.gamma != 0.0 {
            if let Some(r) = &cond.reference {
                let g = pipe.classifier_guidance_grad(&z, t, &eps, r, cond.t_max)?;
                eps.scaled_add(cond.gamma, &g.grad);
            }
        }
        if cond.gamma_g != 0.0 {
            if let Some(target) = &cond.target {
                let g = pipe.prototype_guidance_grad(&z, t, &eps, target, cond.gamma_g)?;
                eps += &g.grad;
            }
        }
        let mut z0 = predict_clean(&z, t, &eps, sched)?;
        if cond.clip > 0.0 {
            // near t = T, 1/√ᾱ amplifies any prediction error by orders of
            // magnitude; clamp and re-derive the implied noise
            z0.mapv_inplace(|v| v.clamp(-cond.clip, cond.clip));
            let a = sched.alpha_bar(t)?;
            eps = (&z - &(&z0 * a.sqrt())) / (1.0 - a).sqrt();
        }
        let a_prev = sched.alpha_bar(t_prev)?;
        z = &z0 * a_prev.sqrt() + &eps * (1.0 - a_prev).sqrt();
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Consistency(format!("sampler diverged at t={t}")));
        }
    }
    Ok(z)
}

/// Style tokens and global feature of a reference sequence.
fn reference(encoder: &StyleEncoder, frames: &Tensor) -> Result<(Tensor, Tensor)> {
    let f = encoder.encode(frames)?;
    Ok((f.tokens(), f.global))
}

/// DDIM sampling from Gaussian z_T with dual CFG plus classifier guidance
/// (when a style reference is given) and prototype guidance (when a target
/// is given). Deterministic in `seed`.
pub fn sample(models: &Models, spec: &SampleSpec, gcfg: &GuidanceConfig, seed: u64) -> Result<SampleOutput> {
    gcfg.validate(models.schedule.timesteps)?;
    let cfg = &models.denoiser.config;
    let (tokens, global) = match &spec.style_ref {
        Some(x) => {
            let (t, g) = reference(models.encoder, x)?;
            (Some(t), Some(g))
        }
        None => (None, None),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = gaussian(&mut rng, cfg.latent_tokens, cfg.latent_dim);
    let cond = Conditioning {
        content: spec.content,
        tokens,
        reference: global,
        target: spec.target.clone(),
        w_c: gcfg.w_c,
        w_s: gcfg.w_s,
        gamma: gcfg.gamma,
        gamma_g: gcfg.gamma_g,
        t_max: gcfg.guidance_t_max,
        clip: gcfg.clip_latent,
    };
    let latent = denoise_loop(models, z, models.schedule.timesteps, gcfg.ddim_steps, &cond)?;
    Ok(SampleOutput { frames: models.codec.decode_latent(&latent)?, latent })
}

/// Partial-noising transfer: encode the content sequence, diffuse to T′,
/// denoise with style-only CFG plus classifier guidance, decode. T′ = 0
/// returns the codec reconstruction.
pub fn style_transfer(
    models: &Models,
    content_seq: &Tensor,
    style_seq: &Tensor,
    gcfg: &GuidanceConfig,
    seed: u64,
) -> Result<SampleOutput> {
    gcfg.validate(models.schedule.timesteps)?;
    let t_prime = gcfg.transfer_t_prime;
    let z0 = models.codec.encode_latent(content_seq)?;
    if t_prime == 0 {
        return Ok(SampleOutput { frames: models.codec.decode_latent(&z0)?, latent: z0 });
    }
    let (tokens, global) = reference(models.encoder, style_seq)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = gaussian(&mut rng, z0.nrows(), z0.ncols());
    let z = forward_diffuse(&z0, t_prime, &eps, models.schedule)?;
    let cond = Conditioning {
        content: None,
        tokens: Some(tokens),
        reference: Some(global),
        target: None,
        w_c: 0.0,
        w_s: gcfg.transfer_w_s,
        gamma: gcfg.transfer_gamma,
        gamma_g: 0.0,
        t_max: gcfg.guidance_t_max,
        clip: gcfg.clip_latent,
    };
    let latent = denoise_loop(models, z, t_prime, gcfg.ddim_steps, &cond)?;
    Ok(SampleOutput { frames: models.codec.decode_latent(&latent)?, latent })
}
