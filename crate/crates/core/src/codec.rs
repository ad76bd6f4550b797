//! Sequence VAE: an L×D sequence maps to n_z latent tokens of width d_z and back.
//!
//! Both halves are two-layer tanh MLPs over the flattened sequence. Latents
//! handed to the diffusion model are the posterior means divided by
//! `latent_scale`, the per-element standard deviation of training means.

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::nn::{self, Adam, AdamConfig, Bindings, ParamStore};

pub const PREFIX: &str = "codec.";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub seq_len: usize,
    pub channels: usize,
    pub tokens: usize,
    pub dim: usize,
    pub hidden: usize,
    pub kl_weight: f64,
    pub iters: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

impl CodecConfig {
    pub fn from_config(c: &Config) -> Result<Self> {
        let cfg = Self {
            seq_len: c.get("seq_len")?,
            channels: c.get("channels")?,
            tokens: c.get("latent_tokens")?,
            dim: c.get("latent_dim")?,
            hidden: c.get("codec_hidden")?,
            kl_weight: c.get("codec_kl_weight")?,
            iters: c.get("codec_iters")?,
            lr: c.get("codec_lr")?,
            batch: c.get("codec_batch")?,
            seed: c.get("seed")?,
        };
        for (field, v) in [
            ("latent_tokens", cfg.tokens),
            ("latent_dim", cfg.dim),
            ("codec_hidden", cfg.hidden),
            ("codec_batch", cfg.batch),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be >= 1"));
            }
        }
        if !(cfg.kl_weight >= 0.0) {
            return Err(Error::config("codec_kl_weight", "must be >= 0"));
        }
        if !(cfg.lr > 0.0) {
            return Err(Error::config("codec_lr", "must be > 0"));
        }
        Ok(cfg)
    }

    pub fn latent_len(&self) -> usize {
        self.tokens * self.dim
    }

    pub fn frame_len(&self) -> usize {
        self.seq_len * self.channels
    }
}

/// Posterior parameters, each n_z×d_z.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    pub mean: Tensor,
    pub logvar: Tensor,
}

impl Posterior {
    /// `mean + exp(logvar/2)·noise`.
    pub fn sample(&self, noise: &Tensor) -> Tensor {
        let std = self.logvar.mapv(|l| (0.5 * l).exp());
        &self.mean + &(std * noise)
    }
}

/// KL(N(mean, exp(logvar)) ‖ N(0, 1)) summed over elements.
pub fn kl_divergence(mean: &Tensor, logvar: &Tensor) -> f64 {
    mean.iter().zip(logvar.iter()).map(|(m, l)| 0.5 * (m * m + l.exp() - 1.0 - l)).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codec {
    pub config: CodecConfig,
    pub params: ParamStore,
    pub latent_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecLog {
    pub losses: Vec<f64>,
    pub train_mse: f64,
}

fn p(name: &str) -> String {
    format!("{PREFIX}{name}")
}

impl Codec {
    pub fn new(config: CodecConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xC0DEC);
        let mut params = ParamStore::new();
        let (h, z, x) = (config.hidden, config.latent_len(), config.frame_len());
        nn::init_linear(&mut params, &mut rng, &p("enc1"), x, h);
        nn::init_linear(&mut params, &mut rng, &p("enc2"), h, h);
        nn::init_linear(&mut params, &mut rng, &p("mean"), h, z);
        nn::init_linear(&mut params, &mut rng, &p("logvar"), h, z);
        nn::init_linear(&mut params, &mut rng, &p("dec1"), z, h);
        nn::init_linear(&mut params, &mut rng, &p("dec2"), h, h);
        nn::init_linear(&mut params, &mut rng, &p("out"), h, x);
        // start with unit posterior variance
        params.get_mut(&p("logvar.w")).expect("just inserted").fill(0.0);
        Self { config, params, latent_scale: 1.0 }
    }

    pub fn from_params(config: CodecConfig, params: ParamStore, latent_scale: f64) -> Result<Self> {
        let reference = Self::new(config);
        for (n, t) in reference.params.iter() {
            if params.get(n)?.dim() != t.dim() {
                return Err(Error::Shape(format!("{n}: {:?} vs {:?}", params.get(n)?.dim(), t.dim())));
            }
        }
        if !(latent_scale > 0.0 && latent_scale.is_finite()) {
            return Err(Error::format("codec checkpoint", "latent_scale must be positive"));
        }
        Ok(Self { config, params, latent_scale })
    }

    fn check_seq(&self, x: &Tensor) -> Result<()> {
        let want = (self.config.seq_len, self.config.channels);
        if x.dim() != want {
            return Err(Error::Shape(format!("sequence {:?}, codec expects {want:?}", x.dim())));
        }
        Ok(())
    }

    /// Rows of `x` are flattened sequences; returns (mean, logvar), B×(n_z·d_z).
    pub fn encode_graph(&self, tape: &mut Tape, b: &Bindings, x: Var) -> (Var, Var) {
        let h = nn::linear(tape, b, &p("enc1"), x);
        let h = tape.tanh(h);
        let h = nn::linear(tape, b, &p("enc2"), h);
        let h = tape.tanh(h);
        (nn::linear(tape, b, &p("mean"), h), nn::linear(tape, b, &p("logvar"), h))
    }

    /// Rows of `z` are flattened latents; returns B×(L·D).
    pub fn decode_graph(&self, tape: &mut Tape, b: &Bindings, z: Var) -> Var {
        let h = nn::linear(tape, b, &p("dec1"), z);
        let h = tape.tanh(h);
        let h = nn::linear(tape, b, &p("dec2"), h);
        let h = tape.tanh(h);
        nn::linear(tape, b, &p("out"), h)
    }

    /// Decodes an n_z×d_z diffusion latent (scaled units) to an L×D sequence.
    pub fn decode_latent_graph(&self, tape: &mut Tape, b: &Bindings, z: Var) -> Var {
        let flat = tape.reshape(z, 1, self.config.latent_len());
        let unscaled = tape.scale(flat, self.latent_scale);
        let x = self.decode_graph(tape, b, unscaled);
        tape.reshape(x, self.config.seq_len, self.config.channels)
    }

    pub fn vae_encode(&self, seq: &Tensor) -> Result<Posterior> {
        self.check_seq(seq)?;
        let mut tape = Tape::new();
        let b = Bindings::bind_frozen(&mut tape, &self.params);
        let x = tape.constant(flatten(seq));
        let (m, l) = self.encode_graph(&mut tape, &b, x);
        let shape = (self.config.tokens, self.config.dim);
        Ok(Posterior {
            mean: tape.value(m).clone().into_shape_with_order(shape).expect("latent size"),
            logvar: tape.value(l).clone().into_shape_with_order(shape).expect("latent size"),
        })
    }

    pub fn vae_decode(&self, z: &Tensor) -> Result<Tensor> {
        let shape = (self.config.tokens, self.config.dim);
        if z.dim() != shape {
            return Err(Error::Shape(format!("latent {:?}, codec expects {shape:?}", z.dim())));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Precondition("latent must be finite".into()));
        }
        let mut tape = Tape::new();
        let b = Bindings::bind_frozen(&mut tape, &self.params);
        let zv = tape.constant(z.clone().into_shape_with_order((1, self.config.latent_len())).expect("latent size"));
        let x = self.decode_graph(&mut tape, &b, zv);
        Ok(tape.value(x).clone().into_shape_with_order((self.config.seq_len, self.config.channels)).expect("frame size"))
    }

    /// Diffusion latent: posterior mean over `latent_scale`.
    pub fn encode_latent(&self, seq: &Tensor) -> Result<Tensor> {
        Ok(self.vae_encode(seq)?.mean / self.latent_scale)
    }

    pub fn decode_latent(&self, z: &Tensor) -> Result<Tensor> {
        self.vae_decode(&(z * self.latent_scale))
    }

    /// Mean squared error of decode(encode-mean(x)) over a set of sequences.
    pub fn reconstruction_mse(&self, seqs: &[Tensor]) -> Result<f64> {
        let mut total = 0.0;
        for s in seqs {
            let back = self.vae_decode(&self.vae_encode(s)?.mean)?;
            total += (&back - s).mapv(|v| v * v).mean().expect("non-empty");
        }
        Ok(total / seqs.len().max(1) as f64)
    }

    /// Parameter gradients and loss of the batch objective
    /// `MSE + kl_weight·KL/B` with reparameterization noise `eps` (B×latent).
    pub fn loss_and_grads(&self, batch: &Tensor, eps: &Tensor) -> (f64, f64, ParamStore) {
        let mut tape = Tape::new();
        let b = Bindings::bind_all(&mut tape, &self.params);
        let x = tape.constant(batch.clone());
        let (m, l) = self.encode_graph(&mut tape, &b, x);
        let half = tape.scale(l, 0.5);
        let std = tape.exp(half);
        let noise = tape.constant(eps.clone());
        let jitter = tape.mul(std, noise);
        let z = tape.add(m, jitter);
        let recon = self.decode_graph(&mut tape, &b, z);
        let diff = tape.sub(recon, x);
        let sq = tape.square(diff);
        let mse = tape.mean_all(sq);
        // 0.5·(m² + e^l − 1 − l), summed then averaged over the batch
        let m2 = tape.square(m);
        let el = tape.exp(l);
        let a = tape.add(m2, el);
        let a = tape.sub(a, l);
        let kl_sum = tape.sum_all(a);
        let rows = batch.nrows() as f64;
        let kl = tape.scale(kl_sum, 0.5 / rows);
        let kl_const = -0.5 * self.config.latent_len() as f64;
        let weighted = tape.scale(kl, self.config.kl_weight);
        let total = tape.add(mse, weighted);
        let grads = tape.backward(total);
        let mse_v = tape.scalar(mse);
        (mse_v + self.config.kl_weight * (tape.scalar(kl) + kl_const), mse_v, b.gradients(&tape, &grads))
    }
}

pub fn flatten(seq: &Tensor) -> Tensor {
    Tensor::from_shape_vec((1, seq.len()), seq.iter().cloned().collect()).expect("same length")
}

/// Trains a codec from scratch and sets `latent_scale` from the training means.
pub fn train_codec(seqs: &[Tensor], config: CodecConfig) -> Result<(Codec, CodecLog)> {
    if seqs.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let mut codec = Codec::new(config);
    for s in seqs {
        codec.check_seq(s)?;
    }
    let flat: Vec<Tensor> = seqs.iter().map(flatten).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7EA1);
    let mut opt = Adam::new(AdamConfig { lr: config.lr, ..Default::default() });
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(config.iters);
    let bsz = config.batch.min(seqs.len());
    for it in 0..config.iters {
        let mut rows = Vec::with_capacity(bsz);
        while rows.len() < bsz {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            rows.push(order[cursor]);
            cursor += 1;
        }
        let views: Vec<_> = rows.iter().map(|&i| flat[i].view()).collect();
        let batch = ndarray::concatenate(ndarray::Axis(0), &views).expect("same width");
        let eps = Tensor::from_shape_simple_fn((bsz, config.latent_len()), || rng.sample(rand_distr::StandardNormal));
        // cosine decay to 10% of the base rate
        let lr = config.lr * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * it as f64 / config.iters as f64).cos()));
        let (loss, _, grads) = codec.loss_and_grads(&batch, &eps);
        opt.step_with_lr(&mut codec.params, &grads, lr);
        losses.push(loss);
        if it % 500 == 0 {
            info!("codec iter {it}: loss {loss:.5}");
        }
    }
    if !codec.params.all_finite() {
        return Err(Error::Consistency("codec training diverged".into()));
    }
    let means: Vec<Tensor> = seqs.iter().map(|s| codec.vae_encode(s).map(|p| p.mean)).collect::<Result<_>>()?;
    let n = (means.len() * config.latent_len()) as f64;
    let mu = means.iter().flat_map(|m| m.iter()).sum::<f64>() / n;
    let var = means.iter().flat_map(|m| m.iter()).map(|v| (v - mu).powi(2)).sum::<f64>() / n;
    codec.latent_scale = var.sqrt().max(1e-6);
    let train_mse = codec.reconstruction_mse(seqs)?;
    info!("codec trained: recon mse {train_mse:.5}, latent scale {:.4}", codec.latent_scale);
    Ok((codec, CodecLog { losses, train_mse }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seq_len: usize) -> CodecConfig {
        CodecConfig {
            seq_len,
            channels: 3,
            tokens: 2,
            dim: 4,
            hidden: 16,
            kl_weight: 1e-3,
            iters: 10,
            lr: 1e-3,
            batch: 4,
            seed: 1,
        }
    }

    #[test]
    fn latent_shape_does_not_depend_on_length() {
        for len in [4, 16] {
            let c = Codec::new(small(len));
            let post = c.vae_encode(&Tensor::ones((len, 3))).unwrap();
            assert_eq!(post.mean.dim(), (2, 4));
            assert_eq!(c.vae_decode(&post.mean).unwrap().dim(), (len, 3));
        }
    }

    #[test]
    fn encode_is_deterministic() {
        let c = Codec::new(small(8));
        let x = Tensor::from_shape_fn((8, 3), |(i, j)| (i as f64 - j as f64) * 0.1);
        assert_eq!(c.vae_encode(&x).unwrap(), c.vae_encode(&x).unwrap());
    }

    #[test]
    fn zero_weights_give_zero_outputs() {
        let mut c = Codec::new(small(8));
        c.params = c.params.zeros_like();
        let post = c.vae_encode(&Tensor::ones((8, 3))).unwrap();
        assert!(post.mean.iter().chain(post.logvar.iter()).all(|&v| v == 0.0));
        assert!(c.vae_decode(&Tensor::zeros((2, 4))).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_latent_with_zero_biases_decodes_to_zero() {
        let mut c = Codec::new(small(8));
        for name in ["dec1.b", "dec2.b", "out.b"] {
            c.params.get_mut(&p(name)).unwrap().fill(0.0);
        }
        assert!(c.vae_decode(&Tensor::zeros((2, 4))).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_errors() {
        let c = Codec::new(small(8));
        assert!(c.vae_encode(&Tensor::ones((7, 3))).is_err());
        assert!(c.vae_decode(&Tensor::ones((4, 2))).is_err());
        assert!(matches!(train_codec(&[], small(8)), Err(Error::InsufficientData { .. })));
    }

    #[test]
    fn sample_uses_caller_noise() {
        let post = Posterior { mean: Tensor::ones((1, 2)), logvar: Tensor::from_elem((1, 2), 2f64.ln() * 2.0) };
        let s = post.sample(&ndarray::arr2(&[[1.0, -0.5]]));
        assert!((s[[0, 0]] - 3.0).abs() < 1e-12 && (s[[0, 1]] - 0.0).abs() < 1e-12);
    }
}
