//! Stage orchestration shared by the CLI and the acceptance suite:
//! corpus → codec → base denoiser → stylization → evaluation.
//!
//! Every stage rounds its trained parameters through `f32` before handing
//! them on, so an in-process run and a staged run that reloads checkpoints
//! from disk see identical weights.

use std::path::Path;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autodiff::Tensor;
use crate::checkpoint::{self, quantize};
use crate::codec::{train_codec, Codec, CodecConfig, CodecLog};
use crate::config::Config;
use crate::corpus::{generate_corpus, read_corpus, split_corpus, CorpusConfig, MotionSequence};
use crate::diffusion::{pretrain_base, BaseTrainConfig, Denoiser, DenoiserConfig, NoiseSchedule};
use crate::encoder::{EncoderConfig, StyleEncoder};
use crate::error::{Error, Result};
use crate::guidance::{sample, style_transfer, GuidanceConfig, Models, PrototypeTarget, SampleSpec};
use crate::metrics::{content_score, diversity, nmi, OracleClassifier};
use crate::prototypes::{Level, PrototypeBank};
use crate::training::{train_style, StyleExample, StyleState, StyleTrainConfig, StyleTrainLog};

/// Stage subdirectories of a run directory.
pub const CODEC_DIR: &str = "codec";
pub const BASE_DIR: &str = "base";
pub const STYLE_DIR: &str = "style";

pub const CODEC_FILE: &str = "codec.ckpt";
pub const BASE_FILE: &str = "base.ckpt";
pub const DENOISER_FILE: &str = "denoiser.ckpt";
pub const ENCODER_FILE: &str = "encoder.ckpt";
pub const PROTOTYPES_FILE: &str = "prototypes.ckpt";

/// Train / eval split of the synthetic corpus.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub train: Vec<MotionSequence>,
    pub eval: Vec<MotionSequence>,
}

impl Corpus {
    /// Generates in memory with frames rounded through `f32`, exactly what
    /// writing and re-reading the corpus yields.
    pub fn generate(c: &Config) -> Result<Self> {
        let config = CorpusConfig::from_config(c)?;
        let mut all = generate_corpus(&config)?;
        for s in &mut all {
            s.frames.mapv_inplace(|v| v as f32 as f64);
        }
        Self::split(c, config, all)
    }

    /// Reads a written corpus; its generation settings must agree with `c`.
    pub fn load(c: &Config, dir: &Path) -> Result<Self> {
        let (config, all) = read_corpus(dir)?;
        let expected = CorpusConfig::from_config(c)?;
        let pairs = [
            ("n_content", config.n_content, expected.n_content),
            ("n_style", config.n_style, expected.n_style),
            ("n_substyle", config.n_substyle, expected.n_substyle),
            ("n_per_cell", config.n_per_cell, expected.n_per_cell),
            ("seq_len", config.seq_len, expected.seq_len),
            ("channels", config.channels, expected.channels),
            ("window", config.window, expected.window),
        ];
        for (field, got, want) in pairs {
            if got != want {
                return Err(Error::config(field, format!("corpus in {} has {got}, config says {want}", dir.display())));
            }
        }
        if config.seed != expected.seed || config.noise_level != expected.noise_level {
            return Err(Error::config("seed", format!("corpus in {} was generated with other settings", dir.display())));
        }
        Self::split(c, config, all)
    }

    pub fn split(c: &Config, config: CorpusConfig, all: Vec<MotionSequence>) -> Result<Self> {
        let (train, eval) = split_corpus(&all, c.get("split_ratio")?, config.seed)?;
        Ok(Self { config, train, eval })
    }
}

pub fn train_codec_stage(c: &Config, corpus: &Corpus) -> Result<(Codec, CodecLog)> {
    let cfg = CodecConfig::from_config(c)?;
    let frames: Vec<Tensor> = corpus.train.iter().map(|s| s.frames.clone()).collect();
    let (mut codec, log) = train_codec(&frames, cfg)?;
    codec.params = quantize(&codec.params);
    info!("codec trained: train mse {:.5}, latent scale {:.4}", log.train_mse, codec.latent_scale);
    Ok((codec, log))
}

pub fn schedule(c: &Config) -> Result<NoiseSchedule> {
    NoiseSchedule::new(c.raw("schedule").parse()?, c.get("timesteps")?)
}

pub fn pretrain_base_stage(c: &Config, codec: &Codec, corpus: &Corpus) -> Result<(Denoiser, Vec<f64>)> {
    let data: Vec<(Tensor, usize)> = corpus
        .train
        .iter()
        .map(|s| Ok((codec.encode_latent(&s.frames)?, s.content_id)))
        .collect::<Result<_>>()?;
    let cfg = DenoiserConfig::from_config(c)?;
    let mut den = Denoiser::new(cfg, c.get("seed")?);
    let losses = pretrain_base(&mut den, &data, &schedule(c)?, &BaseTrainConfig::from_config(c)?)?;
    den.params = quantize(&den.params);
    Ok((den, losses))
}

pub fn style_examples(codec: &Codec, seqs: &[MotionSequence]) -> Result<Vec<StyleExample>> {
    seqs.iter()
        .map(|s| {
            Ok(StyleExample {
                frames: s.frames.clone(),
                latent: codec.encode_latent(&s.frames)?,
                content: s.content_id,
                style: s.style_id,
            })
        })
        .collect()
}

/// Stylization output.
#[derive(Debug, Clone)]
pub struct Stylized {
    pub denoiser: Denoiser,
    pub encoder: StyleEncoder,
    pub bank: PrototypeBank,
    pub log: StyleTrainLog,
}

pub fn train_style_stage(c: &Config, codec: &Codec, base: Denoiser, corpus: &Corpus) -> Result<Stylized> {
    let cfg = StyleTrainConfig::from_config(c)?;
    let examples = style_examples(codec, &corpus.train)?;
    let encoder = StyleEncoder::new(EncoderConfig::from_config(c)?, cfg.seed);
    let mut state = StyleState::new(encoder, &examples, corpus.config.n_style, &cfg)?;
    let mut den = base;
    let sched = NoiseSchedule::new(den.config.schedule, den.config.timesteps)?;
    let log = train_style(&mut den, &mut state, &examples, &sched, &cfg)?;
    den.params = quantize(&den.params);
    let mut encoder = state.encoder;
    encoder.params = quantize(&encoder.params);
    // Bank values are stored as f32 and renormalized on load.
    let (store, meta) = state.bank.to_store();
    let bank = PrototypeBank::from_store(&quantize(&store), &meta)?;
    Ok(Stylized { denoiser: den, encoder, bank, log })
}

/// Everything inference and evaluation need.
#[derive(Debug, Clone)]
pub struct Trained {
    pub codec: Codec,
    pub denoiser: Denoiser,
    pub encoder: StyleEncoder,
    pub bank: PrototypeBank,
    pub schedule: NoiseSchedule,
}

impl Trained {
    pub fn models(&self) -> Models<'_> {
        Models { codec: &self.codec, encoder: &self.encoder, denoiser: &self.denoiser, schedule: &self.schedule }
    }
}

pub fn save_codec(dir: &Path, codec: &Codec) -> Result<()> {
    let meta = json!({ "config": codec.config, "latent_scale": codec.latent_scale });
    checkpoint::save(&dir.join(CODEC_FILE), &codec.params, &meta)
}

pub fn load_codec(dir: &Path) -> Result<Codec> {
    let (params, meta) = checkpoint::load(&dir.join(CODEC_FILE))?;
    let config: CodecConfig = serde_json::from_value(meta["config"].clone())?;
    let scale = meta["latent_scale"].as_f64().ok_or_else(|| Error::format("codec sidecar", "missing latent_scale"))?;
    Codec::from_params(config, params, scale)
}

pub fn save_denoiser(path: &Path, den: &Denoiser) -> Result<()> {
    checkpoint::save(path, &den.params, &json!({ "config": den.config }))
}

pub fn load_denoiser(path: &Path) -> Result<Denoiser> {
    let (params, meta) = checkpoint::load(path)?;
    Denoiser::from_params(serde_json::from_value(meta["config"].clone())?, params)
}

pub fn save_stylized(dir: &Path, s: &Stylized) -> Result<()> {
    save_denoiser(&dir.join(DENOISER_FILE), &s.denoiser)?;
    checkpoint::save(&dir.join(ENCODER_FILE), &s.encoder.params, &json!({ "config": s.encoder.config }))?;
    let (store, meta) = s.bank.to_store();
    checkpoint::save(&dir.join(PROTOTYPES_FILE), &store, &meta)
}

/// Loads a run directory laid out as `codec/` and `style/` stage outputs.
pub fn load_trained(run: &Path) -> Result<Trained> {
    let codec = load_codec(&run.join(CODEC_DIR))?;
    let dir = run.join(STYLE_DIR);
    let denoiser = load_denoiser(&dir.join(DENOISER_FILE))?;
    let (params, meta) = checkpoint::load(&dir.join(ENCODER_FILE))?;
    let encoder = StyleEncoder::from_params(serde_json::from_value(meta["config"].clone())?, params)?;
    let (store, meta) = checkpoint::load(&dir.join(PROTOTYPES_FILE))?;
    let bank = PrototypeBank::from_store(&store, &meta)?;
    let schedule = NoiseSchedule::new(denoiser.config.schedule, denoiser.config.timesteps)?;
    Ok(Trained { codec, denoiser, encoder, bank, schedule })
}

/// Desk-scale evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub oracle_accuracy: f64,
    /// Reference-guided samples.
    pub sra: f64,
    /// Prototype-guided samples without a style reference.
    pub sra_prototype: f64,
    /// Transfer outputs judged against the reference style.
    pub sra_transfer: f64,
    pub content_score: f64,
    pub transfer_content_score: f64,
    pub diversity: f64,
    pub nmi_global: f64,
    pub nmi_local: f64,
    /// Global prototype usage on the eval split, per style.
    pub prototype_usage: Vec<Vec<usize>>,
    pub n_samples: usize,
}

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        for (k, v) in [
            ("oracle_accuracy", self.oracle_accuracy),
            ("sra", self.sra),
            ("sra_prototype", self.sra_prototype),
            ("sra_transfer", self.sra_transfer),
            ("content_score", self.content_score),
            ("transfer_content_score", self.transfer_content_score),
            ("diversity", self.diversity),
            ("nmi_global", self.nmi_global),
            ("nmi_local", self.nmi_local),
            ("n_samples", self.n_samples as f64),
        ] {
            out.push_str(&format!("{k},{v}\n"));
        }
        for (s, counts) in self.prototype_usage.iter().enumerate() {
            for (k, n) in counts.iter().enumerate() {
                out.push_str(&format!("usage_s{s}_k{k},{n}\n"));
            }
        }
        out
    }
}

/// Mean over styles of the NMI between nearest-prototype assignments and
/// hidden sub-style labels; local segments inherit their sequence's label.
pub fn prototype_nmi(
    encoder: &StyleEncoder,
    bank: &PrototypeBank,
    seqs: &[MotionSequence],
    level: Level,
) -> Result<(f64, Vec<Vec<usize>>)> {
    let mut total = 0.0;
    let mut usage = Vec::with_capacity(bank.n_style());
    let mut styles = 0;
    for s in 0..bank.n_style() {
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for seq in seqs.iter().filter(|x| x.style_id == s) {
            let f = encoder.encode(&seq.frames)?;
            match level {
                Level::Global => {
                    a.push(bank.nearest(s, level, &f.global_vec()));
                    b.push(seq.substyle_id);
                }
                Level::Local => {
                    for row in f.local.rows() {
                        a.push(bank.nearest(s, level, &row.to_vec()));
                        b.push(seq.substyle_id);
                    }
                }
            }
        }
        let k = bank.prototypes(s, level).nrows();
        usage.push((0..k).map(|i| a.iter().filter(|&&x| x == i).count()).collect());
        if !a.is_empty() {
            total += nmi(&a, &b)?;
            styles += 1;
        }
    }
    if styles == 0 {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    Ok((total / styles as f64, usage))
}

/// Runs `f` over `0..n` on a pool capped by `PROTOSTYLE_THREADS`, keeping
/// results in index order.
pub fn par_map<T: Send>(n: usize, f: impl Fn(usize) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    let threads = std::env::var("PROTOSTYLE_THREADS").ok().and_then(|v| v.parse().ok()).unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Precondition(format!("thread pool: {e}")))?;
    pool.install(|| (0..n).into_par_iter().map(f).collect())
}

fn of_style(seqs: &[MotionSequence], style: usize) -> Vec<&MotionSequence> {
    seqs.iter().filter(|s| s.style_id == style).collect()
}

/// Generation plan entry `i`: (style, content, reference, prototype index).
fn plan(corpus: &Corpus, k_global: usize, i: usize) -> Result<(usize, usize, &MotionSequence, usize)> {
    let n_style = corpus.config.n_style;
    let (style, round) = (i % n_style, i / n_style);
    let refs = of_style(&corpus.eval, style);
    if refs.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    Ok((style, round % corpus.config.n_content, refs[round % refs.len()], round % k_global))
}

pub fn evaluate(c: &Config, trained: &Trained, corpus: &Corpus) -> Result<MetricsReport> {
    let gcfg = GuidanceConfig::from_config(c)?;
    let n: usize = c.get("eval_samples")?;
    let seed: u64 = c.get("seed")?;
    let n_style = corpus.config.n_style;
    let oracle = OracleClassifier::fit(&corpus.train, &corpus.eval, n_style, c.get("oracle_gate")?)?;
    let (nmi_global, usage) = prototype_nmi(&trained.encoder, &trained.bank, &corpus.eval, Level::Global)?;
    let (nmi_local, _) = prototype_nmi(&trained.encoder, &trained.bank, &corpus.eval, Level::Local)?;
    let models = trained.models();
    let k_global = trained.bank.k_global;

    let guided = par_map(n, |i| {
        let (style, content, reference, _) = plan(corpus, k_global, i)?;
        let spec = SampleSpec { content: Some(content), style_ref: Some(reference.frames.clone()), target: None };
        Ok((sample(&models, &spec, &gcfg, seed.wrapping_add(i as u64))?.frames, style, content))
    })?;
    let proto = par_map(n, |i| {
        let (style, content, _, k) = plan(corpus, k_global, i)?;
        let target = PrototypeTarget::global(&trained.bank, style, k)?;
        let spec = SampleSpec { content: Some(content), style_ref: None, target: Some(target) };
        Ok((sample(&models, &spec, &gcfg, seed.wrapping_add(i as u64))?.frames, style))
    })?;
    let transfer = par_map(n, |i| {
        let source = &corpus.eval[i % corpus.eval.len()];
        let style = (source.style_id + 1 + i % (n_style - 1).max(1)) % n_style;
        let refs = of_style(&corpus.eval, style);
        let reference = refs[(i / n_style) % refs.len()];
        let out = style_transfer(&models, &source.frames, &reference.frames, &gcfg, seed.wrapping_add(i as u64))?;
        Ok((out.frames, style, source.content_id))
    })?;

    let frames: Vec<&Tensor> = guided.iter().map(|g| &g.0).collect();
    let styles: Vec<usize> = guided.iter().map(|g| g.1).collect();
    let pframes: Vec<&Tensor> = proto.iter().map(|g| &g.0).collect();
    let pstyles: Vec<usize> = proto.iter().map(|g| g.1).collect();
    let tframes: Vec<&Tensor> = transfer.iter().map(|g| &g.0).collect();
    let tstyles: Vec<usize> = transfer.iter().map(|g| g.1).collect();
    let mean = |v: &mut dyn Iterator<Item = f64>| {
        let (s, k) = v.fold((0.0, 0usize), |(s, k), x| (s + x, k + 1));
        if k == 0 { 0.0 } else { s / k as f64 }
    };
    Ok(MetricsReport {
        oracle_accuracy: oracle.eval_accuracy,
        sra: oracle.accuracy(&frames, &styles),
        sra_prototype: oracle.accuracy(&pframes, &pstyles),
        sra_transfer: oracle.accuracy(&tframes, &tstyles),
        content_score: mean(&mut guided.iter().map(|g| content_score(&g.0, g.2))),
        transfer_content_score: mean(&mut transfer.iter().map(|g| content_score(&g.0, g.2))),
        diversity: if frames.len() >= 2 { diversity(&frames)? } else { 0.0 },
        nmi_global,
        nmi_local,
        prototype_usage: usage,
        n_samples: n,
    })
}
