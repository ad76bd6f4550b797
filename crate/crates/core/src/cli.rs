//! Command-line front end. Every subcommand resolves a [`Config`] from
//! defaults, an optional `--manifest` of an earlier run, an optional
//! `--config` file and per-key flags (in that order), does its work, and
//! writes `manifest.json` recording the config, seed and file hashes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Arg, ArgMatches, Command};
use log::info;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autodiff::Tensor;
use crate::checkpoint::file_sha256;
use crate::config::{self, Config, KEYS};
use crate::corpus::{decode_frames, encode_frames, generate_corpus, write_corpus, CorpusConfig};
use crate::error::{Error, Result};
use crate::guidance::{sample, style_transfer, GuidanceConfig, PrototypeTarget, SampleSpec};
use crate::pipeline::{self, par_map, Corpus, BASE_DIR, BASE_FILE, CODEC_DIR, STYLE_DIR};
use crate::prototypes::Level;

pub const MANIFEST: &str = "manifest.json";

const SUBCOMMANDS: [(&str, &str); 8] = [
    ("gen-data", "generate the synthetic corpus into data_dir"),
    ("train-codec", "train the sequence VAE into run_dir/codec"),
    ("pretrain-base", "train the content-conditioned denoiser into run_dir/base"),
    ("train-style", "stylization: encoder, prototypes and style branch into run_dir/style"),
    ("sample", "generate sequences into out_dir"),
    ("transfer", "style transfer of content_seq toward style_seq into out_dir"),
    ("eval", "oracle SRA, diversity, content and NMI metrics into out_dir"),
    ("inspect-prototypes", "prototype usage, NMI and similarity summary into out_dir"),
];

/// Record of one CLI run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    pub seed: u64,
    pub config: serde_json::Value,
    /// Input path → SHA-256.
    pub inputs: BTreeMap<String, String>,
    /// Output file name (relative to the output directory) → SHA-256.
    pub outputs: BTreeMap<String, String>,
}

pub fn command() -> Command {
    let mut root = Command::new("protostyle")
        .about("Prototype-clustered style learning on synthetic stylized trajectories")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for (name, about) in SUBCOMMANDS {
        let mut sub = Command::new(name)
            .about(about)
            .arg(Arg::new("config").long("config").value_name("FILE").help("key = value config file"))
            .arg(
                Arg::new("manifest")
                    .long("manifest")
                    .value_name("FILE")
                    .help("rerun with the config recorded in an earlier manifest.json"),
            );
        for k in KEYS {
            sub = sub.arg(Arg::new(k.name).long(k.name.replace('_', "-")).value_name("VALUE").help(k.help));
        }
        root = root.subcommand(sub);
    }
    root
}

/// Exit code for an error category.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } => 1,
        Error::Missing(_) | Error::Io(_) => 3,
        Error::Format { .. } | Error::Json(_) => 4,
        Error::UngatedOracle { .. } => 5,
        _ => 6,
    }
}

fn category(e: &Error) -> &'static str {
    match exit_code(e) {
        1 => "config",
        3 => "io",
        4 => "format",
        5 => "oracle",
        _ => "runtime",
    }
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let matches = match command().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let result = resolve_config(name, sub).and_then(|c| run(name, &c));
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {e}", category(&e));
            exit_code(&e)
        }
    }
}

pub fn resolve_config(name: &str, m: &ArgMatches) -> Result<Config> {
    let mut c = Config::default();
    if let Some(path) = m.get_one::<String>("manifest") {
        let text = fs::read_to_string(path).map_err(|e| Error::Missing(format!("{path}: {e}")))?;
        let manifest: RunManifest = serde_json::from_str(&text)?;
        if manifest.subcommand != name {
            return Err(Error::config(
                "manifest",
                format!("{path} records `{}`, not `{name}`", manifest.subcommand),
            ));
        }
        c = Config::from_json(&manifest.config)?;
    }
    if let Some(path) = m.get_one::<String>("config") {
        let text = fs::read_to_string(path).map_err(|e| Error::Missing(format!("{path}: {e}")))?;
        for (k, v) in config::parse(&text)? {
            c.set(&k, v)?;
        }
    }
    for k in KEYS {
        if let Some(v) = m.get_one::<String>(k.name) {
            c.set(k.name, v.clone())?;
        }
    }
    Ok(c)
}

fn path(c: &Config, key: &str) -> PathBuf {
    PathBuf::from(c.raw(key))
}

fn hash_inputs(paths: &[PathBuf]) -> Result<BTreeMap<String, String>> {
    paths.iter().map(|p| Ok((p.display().to_string(), file_sha256(p)?))).collect()
}

/// Files making up a corpus directory.
fn corpus_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::Missing(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "f32") || p.file_name().is_some_and(|n| n == "corpus.json"))
        .collect();
    files.sort();
    Ok(files)
}

fn checkpoint_files(dir: &Path, stems: &[&str]) -> Vec<PathBuf> {
    stems.iter().flat_map(|s| [dir.join(format!("{s}.ckpt")), dir.join(format!("{s}.json"))]).collect()
}

fn trained_files(run: &Path) -> Vec<PathBuf> {
    let mut v = checkpoint_files(&run.join(CODEC_DIR), &["codec"]);
    v.extend(checkpoint_files(&run.join(STYLE_DIR), &["denoiser", "encoder", "prototypes"]));
    v
}

fn write_manifest(name: &str, c: &Config, out: &Path, inputs: BTreeMap<String, String>, outputs: &[&str]) -> Result<()> {
    let outputs = outputs
        .iter()
        .map(|f| Ok((f.to_string(), file_sha256(&out.join(f))?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    let m = RunManifest {
        tool: "protostyle".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        subcommand: name.into(),
        seed: c.get("seed")?,
        config: c.to_json(),
        inputs,
        outputs,
    };
    fs::write(out.join(MANIFEST), serde_json::to_string_pretty(&m)? + "\n")?;
    info!("{name}: wrote {}", out.join(MANIFEST).display());
    Ok(())
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)? + "\n")?;
    Ok(())
}

fn read_frames(c: &Config, file: &str) -> Result<Tensor> {
    let bytes = fs::read(file).map_err(|e| Error::Missing(format!("{file}: {e}")))?;
    decode_frames(&bytes, c.get("seq_len")?, c.get("channels")?)
}

pub fn run(name: &str, c: &Config) -> Result<()> {
    match name {
        "gen-data" => gen_data(c),
        "train-codec" => train_codec(c),
        "pretrain-base" => pretrain_base(c),
        "train-style" => train_style(c),
        "sample" => sample_cmd(c),
        "transfer" => transfer_cmd(c),
        "eval" => eval_cmd(c),
        "inspect-prototypes" => inspect_cmd(c),
        other => Err(Error::config("subcommand", format!("unknown `{other}`"))),
    }
}

fn gen_data(c: &Config) -> Result<()> {
    let cfg = CorpusConfig::from_config(c)?;
    let dir = path(c, "data_dir");
    let corpus = generate_corpus(&cfg)?;
    let manifest = write_corpus(&dir, &cfg, &corpus)?;
    let mut outputs: Vec<&str> = manifest.files.iter().map(|f| f.file.as_str()).collect();
    outputs.push("corpus.json");
    write_manifest("gen-data", c, &dir, BTreeMap::new(), &outputs)
}

fn train_codec(c: &Config) -> Result<()> {
    let data = path(c, "data_dir");
    let corpus = Corpus::load(c, &data)?;
    let inputs = hash_inputs(&corpus_files(&data)?)?;
    let (codec, log) = pipeline::train_codec_stage(c, &corpus)?;
    let out = path(c, "run_dir").join(CODEC_DIR);
    fs::create_dir_all(&out)?;
    pipeline::save_codec(&out, &codec)?;
    write_json(&out.join("log.json"), &json!({ "losses": log.losses, "train_mse": log.train_mse }))?;
    write_manifest("train-codec", c, &out, inputs, &["codec.ckpt", "codec.json", "log.json"])
}

fn pretrain_base(c: &Config) -> Result<()> {
    let data = path(c, "data_dir");
    let run = path(c, "run_dir");
    let corpus = Corpus::load(c, &data)?;
    let mut files = corpus_files(&data)?;
    files.extend(checkpoint_files(&run.join(CODEC_DIR), &["codec"]));
    let inputs = hash_inputs(&files)?;
    let codec = pipeline::load_codec(&run.join(CODEC_DIR))?;
    let (den, losses) = pipeline::pretrain_base_stage(c, &codec, &corpus)?;
    let out = run.join(BASE_DIR);
    fs::create_dir_all(&out)?;
    pipeline::save_denoiser(&out.join(BASE_FILE), &den)?;
    write_json(&out.join("log.json"), &json!({ "losses": losses }))?;
    write_manifest("pretrain-base", c, &out, inputs, &["base.ckpt", "base.json", "log.json"])
}

fn train_style(c: &Config) -> Result<()> {
    let data = path(c, "data_dir");
    let run = path(c, "run_dir");
    let corpus = Corpus::load(c, &data)?;
    let mut files = corpus_files(&data)?;
    files.extend(checkpoint_files(&run.join(CODEC_DIR), &["codec"]));
    files.extend(checkpoint_files(&run.join(BASE_DIR), &["base"]));
    let inputs = hash_inputs(&files)?;
    let codec = pipeline::load_codec(&run.join(CODEC_DIR))?;
    let base = pipeline::load_denoiser(&run.join(BASE_DIR).join(BASE_FILE))?;
    let s = pipeline::train_style_stage(c, &codec, base, &corpus)?;
    let out = run.join(STYLE_DIR);
    fs::create_dir_all(&out)?;
    pipeline::save_stylized(&out, &s)?;
    write_json(&out.join("log.json"), &s.log)?;
    let outputs = [
        "denoiser.ckpt",
        "denoiser.json",
        "encoder.ckpt",
        "encoder.json",
        "prototypes.ckpt",
        "prototypes.json",
        "log.json",
    ];
    write_manifest("train-style", c, &out, inputs, &outputs)
}

/// Local prototype indices from a comma-separated list.
fn local_indices(c: &Config) -> Result<Vec<usize>> {
    let raw = c.raw("local_prototypes").trim();
    if raw.is_empty() {
        return Ok(Vec::new());
    }
    raw.split(',')
        .map(|s| s.trim().parse().map_err(|_| Error::config("local_prototypes", format!("bad index {s:?}"))))
        .collect()
}

fn sample_cmd(c: &Config) -> Result<()> {
    let gcfg = GuidanceConfig::from_config(c)?;
    let run = path(c, "run_dir");
    let data = path(c, "data_dir");
    let mut files = trained_files(&run);
    let trained = pipeline::load_trained(&run)?;
    let style: usize = c.get("style")?;
    let prototype: i64 = c.get("prototype")?;
    let locals = local_indices(c)?;
    let target = if !locals.is_empty() {
        Some(PrototypeTarget::local(&trained.bank, style, &locals)?)
    } else if prototype >= 0 {
        Some(PrototypeTarget::global(&trained.bank, style, prototype as usize)?)
    } else {
        None
    };
    let style_ref = if !c.raw("style_seq").is_empty() {
        files.push(PathBuf::from(c.raw("style_seq")));
        Some(read_frames(c, c.raw("style_seq"))?)
    } else if target.is_none() {
        let corpus = Corpus::load(c, &data)?;
        files.extend(corpus_files(&data)?);
        let reference = corpus
            .eval
            .iter()
            .find(|s| s.style_id == style)
            .ok_or_else(|| Error::config("style", format!("no eval sequence of style {style}")))?;
        Some(reference.frames.clone())
    } else {
        None
    };
    let inputs = hash_inputs(&files)?;
    let spec = SampleSpec { content: Some(c.get("content")?), style_ref, target };
    let n: usize = c.get("num_samples")?;
    let seed: u64 = c.get("seed")?;
    let models = trained.models();
    let outs = par_map(n, |i| sample(&models, &spec, &gcfg, seed.wrapping_add(i as u64)))?;
    let out = path(c, "out_dir");
    fs::create_dir_all(&out)?;
    let names: Vec<String> = (0..n).map(|i| format!("sample_{i:03}.f32")).collect();
    for (name, o) in names.iter().zip(&outs) {
        fs::write(out.join(name), encode_frames(&o.frames))?;
    }
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    write_manifest("sample", c, &out, inputs, &names)
}

fn transfer_cmd(c: &Config) -> Result<()> {
    let gcfg = GuidanceConfig::from_config(c)?;
    let run = path(c, "run_dir");
    let data = path(c, "data_dir");
    let mut files = trained_files(&run);
    let trained = pipeline::load_trained(&run)?;
    let style: usize = c.get("style")?;
    let need_corpus = c.raw("content_seq").is_empty() || c.raw("style_seq").is_empty();
    let corpus = if need_corpus {
        files.extend(corpus_files(&data)?);
        Some(Corpus::load(c, &data)?)
    } else {
        None
    };
    let pick = |key: &str, want: &dyn Fn(&crate::corpus::MotionSequence) -> bool| -> Result<Tensor> {
        if !c.raw(key).is_empty() {
            return read_frames(c, c.raw(key));
        }
        let corpus = corpus.as_ref().expect("loaded when a default is needed");
        corpus
            .eval
            .iter()
            .find(|s| want(s))
            .map(|s| s.frames.clone())
            .ok_or_else(|| Error::config(key, "no matching eval sequence for the default"))
    };
    let content: usize = c.get("content")?;
    let content_seq = pick("content_seq", &|s| s.content_id == content && s.style_id != style)?;
    let style_seq = pick("style_seq", &|s| s.style_id == style)?;
    for key in ["content_seq", "style_seq"] {
        if !c.raw(key).is_empty() {
            files.push(PathBuf::from(c.raw(key)));
        }
    }
    let inputs = hash_inputs(&files)?;
    let o = style_transfer(&trained.models(), &content_seq, &style_seq, &gcfg, c.get("seed")?)?;
    let out = path(c, "out_dir");
    fs::create_dir_all(&out)?;
    fs::write(out.join("transfer.f32"), encode_frames(&o.frames))?;
    write_manifest("transfer", c, &out, inputs, &["transfer.f32"])
}

fn eval_cmd(c: &Config) -> Result<()> {
    let run = path(c, "run_dir");
    let data = path(c, "data_dir");
    let mut files = trained_files(&run);
    files.extend(corpus_files(&data)?);
    let before = hash_inputs(&files)?;
    let trained = pipeline::load_trained(&run)?;
    let corpus = Corpus::load(c, &data)?;
    let report = pipeline::evaluate(c, &trained, &corpus)?;
    if hash_inputs(&files)? != before {
        return Err(Error::Consistency("evaluation inputs changed during eval".into()));
    }
    let out = path(c, "out_dir");
    fs::create_dir_all(&out)?;
    write_json(&out.join("metrics.json"), &report)?;
    fs::write(out.join("metrics.csv"), report.to_csv())?;
    write_manifest("eval", c, &out, before, &["metrics.json", "metrics.csv"])
}

fn inspect_cmd(c: &Config) -> Result<()> {
    let run = path(c, "run_dir");
    let data = path(c, "data_dir");
    let mut files = trained_files(&run);
    files.extend(corpus_files(&data)?);
    let inputs = hash_inputs(&files)?;
    let trained = pipeline::load_trained(&run)?;
    let corpus = Corpus::load(c, &data)?;
    let (nmi_global, usage_global) = pipeline::prototype_nmi(&trained.encoder, &trained.bank, &corpus.eval, Level::Global)?;
    let (nmi_local, usage_local) = pipeline::prototype_nmi(&trained.encoder, &trained.bank, &corpus.eval, Level::Local)?;
    let cosines: Vec<Tensor> = trained.bank.global.iter().map(|p| p.dot(&p.t())).collect();
    let summary = json!({
        "frozen": trained.bank.frozen,
        "update_count": trained.bank.update_count,
        "k_global": trained.bank.k_global,
        "k_local": trained.bank.k_local,
        "nmi_global": nmi_global,
        "nmi_local": nmi_local,
        "usage_global": usage_global,
        "usage_local": usage_local,
        "global_cosines": cosines.iter().map(|m| m.rows().into_iter().map(|r| r.to_vec()).collect::<Vec<_>>()).collect::<Vec<_>>(),
    });
    let out = path(c, "out_dir");
    fs::create_dir_all(&out)?;
    write_json(&out.join("prototypes.json"), &summary)?;
    write_manifest("inspect-prototypes", c, &out, inputs, &["prototypes.json"])
}
