//! Flat `key = value` configuration files.
//!
//! One key per line, `#` starts a comment, blank lines are ignored. Every key
//! is declared in [`KEYS`] with its default and help text; the CLI exposes each
//! one as a `--key` flag (underscores become dashes).

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{Error, Result};

pub struct KeySpec {
    pub name: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

macro_rules! keys {
    ($( $name:literal = $default:literal : $help:literal ),* $(,)?) => {
        &[ $( KeySpec { name: $name, default: $default, help: $help } ),* ]
    };
}

pub const KEYS: &[KeySpec] = keys![
    // paths
    "data_dir" = "data" : "corpus directory (gen-data output, training input)",
    "run_dir" = "run" : "directory holding trained checkpoints",
    "out_dir" = "out" : "output directory for the subcommand",
    "content_seq" = "" : "transfer: content sequence .f32 file (defaults to an eval-split sequence)",
    "style_seq" = "" : "sample/transfer: style reference .f32 file (defaults to an eval-split sequence)",
    // corpus
    "seed" = "7" : "master random seed",
    "n_content" = "3" : "number of content programs",
    "n_style" = "4" : "number of style classes",
    "n_substyle" = "3" : "hidden sub-style modes per style",
    "n_per_cell" = "10" : "sequences per (content, style, substyle) cell",
    "seq_len" = "64" : "frames per sequence (multiple of window)",
    "channels" = "8" : "channels per frame (>= 3: two trajectory channels plus posture)",
    "noise_level" = "0.01" : "standard deviation of texture noise",
    "split_ratio" = "0.75" : "train fraction of each (style, substyle) cell",
    // style encoder
    "window" = "8" : "local pooling window w",
    "enc_layers" = "2" : "style encoder self-attention layers (0 = pooling-only)",
    "enc_width" = "32" : "style feature width d'",
    "enc_hidden" = "64" : "style encoder feed-forward width",
    // prototypes
    "k_global" = "3" : "global prototypes per style",
    "k_local" = "30" : "local prototypes per style",
    "proto_momentum" = "0.95" : "EMA momentum for prototype updates",
    "sinkhorn_mu" = "0.05" : "entropic regularization of the balanced assignment",
    "sinkhorn_iters" = "100" : "maximum Sinkhorn iterations",
    "sinkhorn_tol" = "1e-6" : "Sinkhorn marginal tolerance",
    "bank_capacity" = "256" : "per-style FIFO feature memory for assignment",
    // style losses
    "tau" = "0.05" : "intra-style temperature",
    "beta_same" = "5" : "weight on same-style negative prototypes",
    "metric" = "cosine" : "prototype distance: cosine | l1 | l2",
    "variant" = "contrastive" : "style objective: contrastive | entropy",
    // codec
    "latent_tokens" = "5" : "latent tokens n_z",
    "latent_dim" = "32" : "latent token width d_z",
    "codec_hidden" = "128" : "codec hidden width",
    "codec_kl_weight" = "1e-4" : "KL weight in the codec objective",
    "codec_iters" = "1500" : "codec training iterations",
    "codec_lr" = "2e-3" : "codec learning rate",
    "codec_batch" = "32" : "codec batch size",
    // diffusion
    "timesteps" = "1000" : "diffusion steps T",
    "schedule" = "scaled_linear" : "noise schedule: cosine | scaled_linear",
    "den_layers" = "4" : "denoiser blocks N",
    "den_width" = "64" : "denoiser width d",
    "den_hidden" = "128" : "denoiser feed-forward width",
    "content_tokens" = "2" : "content condition tokens per class",
    "base_iters" = "2500" : "base (content-only) denoiser iterations",
    "base_lr" = "1e-3" : "base denoiser learning rate",
    "style_iters" = "1500" : "stylization iterations (encoder pretrain included)",
    "style_lr" = "1e-3" : "stylization learning rate",
    "branch_lr" = "1e-2" : "learning rate of the denoiser style branch during joint training",
    "encoder_pretrain_frac" = "0.3" : "fraction of style_iters spent pretraining the encoder before freezing prototypes",
    "batch_size" = "32" : "diffusion batch size",
    "lambda_style" = "1" : "weight of the style loss in the total objective",
    "cond_drop_prob" = "0.1" : "probability of dropping each condition during training",
    // guidance
    "w_c" = "7.5" : "content classifier-free guidance weight",
    "w_s" = "1" : "style classifier-free guidance weight",
    "gamma" = "3" : "classifier guidance strength",
    "guidance_t_max" = "300" : "classifier guidance applies only for t below this",
    "gamma_g" = "30" : "prototype guidance strength",
    "ddim_steps" = "50" : "DDIM sampling steps",
    "clip_latent" = "4" : "clamp predicted clean latents to +-this during DDIM updates (0 disables)",
    "transfer_t_prime" = "500" : "transfer: noising depth T'",
    "transfer_w_s" = "2.25" : "transfer: style guidance weight",
    "transfer_gamma" = "2.5" : "transfer: classifier guidance strength",
    // sampling targets
    "content" = "0" : "content class to generate",
    "style" = "0" : "style class of the reference / prototype",
    "prototype" = "-1" : "global prototype index to guide toward (-1 = none)",
    "local_prototypes" = "" : "comma-separated local prototype index per segment (empty = none)",
    "num_samples" = "1" : "sample: number of seeds starting at seed",
    // evaluation
    "eval_samples" = "40" : "eval: generated samples for SRA and diversity",
    "oracle_gate" = "0.95" : "minimum oracle eval accuracy",
];

pub fn key_spec(name: &str) -> Option<&'static KeySpec> {
    KEYS.iter().find(|k| k.name == name)
}

/// Parses `key = value` text into an ordered map. Unknown keys are rejected.
pub fn parse(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::config(format!("line {}", lineno + 1), "expected `key = value`")
        })?;
        let key = k.trim();
        if key_spec(key).is_none() {
            return Err(Error::config(key, format!("unknown key on line {}", lineno + 1)));
        }
        if out.insert(key.to_string(), v.trim().to_string()).is_some() {
            return Err(Error::config(key, format!("duplicate key on line {}", lineno + 1)));
        }
    }
    Ok(out)
}

/// Resolved configuration: defaults overlaid by file values and overrides.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Default for Config {
    fn default() -> Self {
        let values = KEYS.iter().map(|k| (k.name.to_string(), k.default.to_string())).collect();
        Self { values }
    }
}

impl Config {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (k, v) in parse(text)? {
            c.values.insert(k, v);
        }
        Ok(c)
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<()> {
        if key_spec(key).is_none() {
            return Err(Error::config(key, "unknown key"));
        }
        self.values.insert(key.to_string(), value.into());
        Ok(())
    }

    /// Builder-style `set` for keys known to exist.
    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.set(key, value.to_string()).expect("known key");
        self
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("undeclared key {key}"))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.raw(key);
        raw.parse().map_err(|_| Error::config(key, format!("cannot parse {raw:?}")))
    }

    pub fn entries(&self) -> &BTreeMap<String, String> {
        &self.values
    }

    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(&self.values).expect("string map")
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        let map: BTreeMap<String, String> = serde_json::from_value(v.clone())?;
        let mut c = Self::default();
        for (k, v) in map {
            c.set(&k, v)?;
        }
        Ok(c)
    }
}
