//! Style encoder: per-frame features, mean-pooled global feature and
//! window-pooled local features.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::nn::{self, Bindings, ParamStore};

pub const PREFIX: &str = "enc.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_dim: usize,
    /// Feature width d'.
    pub width: usize,
    /// Self-attention layers; 0 is the pooling-only ablation.
    pub layers: usize,
    pub hidden: usize,
    pub window: usize,
}

impl EncoderConfig {
    pub fn from_config(c: &Config) -> Result<Self> {
        let cfg = Self {
            input_dim: c.get("channels")?,
            width: c.get("enc_width")?,
            layers: c.get("enc_layers")?,
            hidden: c.get("enc_hidden")?,
            window: c.get("window")?,
        };
        if cfg.width == 0 {
            return Err(Error::config("enc_width", "must be >= 1"));
        }
        if cfg.window == 0 {
            return Err(Error::config("window", "must be >= 1"));
        }
        Ok(cfg)
    }
}

/// Encoder output.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleFeature {
    /// L×d' per-frame features.
    pub frames: Tensor,
    /// 1×d' temporal mean of `frames`.
    pub global: Tensor,
    /// L_w×d' segment means.
    pub local: Tensor,
    pub window: usize,
}

impl StyleFeature {
    pub fn global_vec(&self) -> Vec<f64> {
        self.global.row(0).to_vec()
    }

    /// (L_w+1)×d' conditioning tokens: global row first, then local rows.
    pub fn tokens(&self) -> Tensor {
        ndarray::concatenate(ndarray::Axis(0), &[self.global.view(), self.local.view()]).expect("same width")
    }
}

/// Tape handles for one encoded sequence.
#[derive(Debug, Clone, Copy)]
pub struct EncodedVars {
    pub frames: Var,
    pub global: Var,
    pub local: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StyleEncoder {
    pub config: EncoderConfig,
    pub params: ParamStore,
}

fn name(layer: usize, part: &str) -> String {
    format!("{PREFIX}l{layer}.{part}")
}

impl StyleEncoder {
    pub fn new(config: EncoderConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let d = config.width;
        nn::init_linear(&mut params, &mut rng, &format!("{PREFIX}in"), config.input_dim, d);
        for l in 0..config.layers {
            for part in ["q", "k", "v", "o"] {
                let std = 1.0 / (d as f64).sqrt();
                params.insert(name(l, &format!("w{part}")), nn::randn(&mut rng, d, d, std));
            }
            nn::init_linear(&mut params, &mut rng, &name(l, "ff1"), d, config.hidden);
            nn::init_linear(&mut params, &mut rng, &name(l, "ff2"), config.hidden, d);
        }
        Self { config, params }
    }

    pub fn from_params(config: EncoderConfig, params: ParamStore) -> Result<Self> {
        let reference = Self::new(config, 0);
        for (n, t) in reference.params.iter() {
            let got = params.get(n)?;
            if got.dim() != t.dim() {
                return Err(Error::Shape(format!("{n}: {:?} vs {:?}", got.dim(), t.dim())));
            }
        }
        if !params.all_finite() {
            return Err(Error::format("encoder checkpoint", "non-finite parameter"));
        }
        Ok(Self { config, params })
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bindings {
        if trainable {
            Bindings::bind_all(tape, &self.params)
        } else {
            Bindings::bind_frozen(tape, &self.params)
        }
    }

    fn check_input(&self, rows: usize, cols: usize) -> Result<()> {
        if cols != self.config.input_dim {
            return Err(Error::Shape(format!("{cols} channels, encoder expects {}", self.config.input_dim)));
        }
        if rows == 0 || rows % self.config.window != 0 {
            return Err(Error::Shape(format!(
                "sequence length {rows} is not a positive multiple of window {}",
                self.config.window
            )));
        }
        Ok(())
    }

    /// Builds the encoder graph for an L×D input variable.
    pub fn forward(&self, tape: &mut Tape, b: &Bindings, x: Var) -> Result<EncodedVars> {
        let (len, cols) = tape.shape(x);
        self.check_input(len, cols)?;
        let d = self.config.width;
        let mut h = nn::linear(tape, b, &format!("{PREFIX}in"), x);
        if self.config.layers > 0 {
            let pos = tape.constant(nn::positional_table(len, d));
            h = tape.add(h, pos);
        }
        for l in 0..self.config.layers {
            let n = tape.layer_norm_rows(h);
            let q = tape.matmul(n, b.get(&name(l, "wq")));
            let k = tape.matmul(n, b.get(&name(l, "wk")));
            let v = tape.matmul(n, b.get(&name(l, "wv")));
            let a = nn::attention(tape, q, k, v);
            let o = tape.matmul(a, b.get(&name(l, "wo")));
            h = tape.add(h, o);
            let n2 = tape.layer_norm_rows(h);
            let f1 = nn::linear(tape, b, &name(l, "ff1"), n2);
            let act = tape.silu(f1);
            let f2 = nn::linear(tape, b, &name(l, "ff2"), act);
            h = tape.add(h, f2);
        }
        let global = tape.mean_rows(h);
        let local = tape.segment_mean(h, self.config.window);
        Ok(EncodedVars { frames: h, global, local })
    }

    pub fn encode(&self, frames: &Tensor) -> Result<StyleFeature> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let x = tape.constant(frames.clone());
        let v = self.forward(&mut tape, &b, x)?;
        Ok(StyleFeature {
            frames: tape.value(v.frames).clone(),
            global: tape.value(v.global).clone(),
            local: tape.value(v.local).clone(),
            window: self.config.window,
        })
    }

    /// Parameter gradients given upstream adjoints on the pooled features.
    pub fn encode_backward(&self, frames: &Tensor, grad_global: &Tensor, grad_local: &Tensor) -> Result<ParamStore> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, true);
        let x = tape.constant(frames.clone());
        let v = self.forward(&mut tape, &b, x)?;
        if grad_global.dim() != tape.shape(v.global) || grad_local.dim() != tape.shape(v.local) {
            return Err(Error::Shape(format!(
                "upstream gradients {:?}/{:?} vs features {:?}/{:?}",
                grad_global.dim(),
                grad_local.dim(),
                tape.shape(v.global),
                tape.shape(v.local)
            )));
        }
        if grad_global.iter().chain(grad_local.iter()).any(|g| !g.is_finite()) {
            return Err(Error::Precondition("upstream gradients must be finite".into()));
        }
        let grads = tape.backward_from(&[(v.global, grad_global.clone()), (v.local, grad_local.clone())]);
        Ok(b.gradients(&tape, &grads))
    }
}
