//! End-to-end command-line behavior on a tiny configuration.

mod common;

use std::path::Path;
use std::process::Command;

use common::*;
use protostyle::cli::{cli_main, RunManifest, MANIFEST};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_protostyle"))
}

fn run(cfg: &Path, args: &[&str]) -> i32 {
    let mut argv = vec!["protostyle", args[0], "--config", cfg.to_str().unwrap()];
    argv.extend(&args[1..]);
    cli_main(argv)
}

fn manifest(dir: &Path) -> RunManifest {
    serde_json::from_str(&std::fs::read_to_string(dir.join(MANIFEST)).unwrap()).unwrap()
}

#[test]
fn gen_data_twice_gives_identical_directories() {
    let root = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(root.path());
    let data = root.path().join("data");
    let out = bin().args(["gen-data", "--config", cfg.to_str().unwrap(), "--seed", "7"]).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let first = snapshot(&data);
    std::fs::remove_dir_all(&data).unwrap();
    assert!(bin().args(["gen-data", "--config", cfg.to_str().unwrap(), "--seed", "7"]).status().unwrap().success());
    assert_eq!(first, snapshot(&data));
    assert!(first.iter().any(|(n, _)| n == "corpus.json"));
    assert!(first.iter().any(|(n, _)| n == MANIFEST));

    let m = manifest(&data);
    assert_eq!(m.subcommand, "gen-data");
    assert_eq!(m.seed, 7);
    assert_eq!(m.outputs.len(), first.len() - 1);
}

#[test]
fn exit_codes_by_category() {
    let root = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(root.path());
    let cfg = cfg.to_str().unwrap();

    assert_eq!(bin().arg("frobnicate").status().unwrap().code(), Some(2));
    assert_eq!(bin().args(["sample", "--no-such-flag", "1"]).status().unwrap().code(), Some(2));
    assert_eq!(bin().args(["sample", "--help"]).output().unwrap().status.code(), Some(0));

    let out = bin().args(["gen-data", "--config", cfg, "--n-style", "zero"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("n_style"));

    let bad = root.path().join("bad.cfg");
    std::fs::write(&bad, "mystery_key = 3\n").unwrap();
    let out = bin().args(["gen-data", "--config", bad.to_str().unwrap()]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("mystery_key"));

    // no corpus yet
    assert_eq!(bin().args(["train-codec", "--config", cfg]).status().unwrap().code(), Some(3));
    assert_eq!(bin().args(["gen-data", "--config", "/nonexistent/x.cfg"]).status().unwrap().code(), Some(3));

    // corrupt corpus manifest
    assert!(bin().args(["gen-data", "--config", cfg]).status().unwrap().success());
    std::fs::write(root.path().join("data/corpus.json"), "{ not json").unwrap();
    assert_eq!(bin().args(["train-codec", "--config", cfg]).status().unwrap().code(), Some(4));

    // a manifest from another subcommand is a config error
    let m = root.path().join("data").join(MANIFEST);
    let out = bin().args(["sample", "--manifest", m.to_str().unwrap()]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn tiny_pipeline_manifests_and_guidance_flag() {
    let root = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(root.path());
    for stage in ["gen-data", "train-codec", "pretrain-base", "train-style"] {
        assert_eq!(run(&cfg, &[stage]), 0, "{stage}");
    }
    let run_dir = root.path().join("run");
    for (sub, name) in [("codec", "codec.ckpt"), ("base", "base.ckpt"), ("style", "denoiser.ckpt")] {
        assert!(run_dir.join(sub).join(name).exists());
        assert!(run_dir.join(sub).join(MANIFEST).exists());
    }

    let (a, b) = (root.path().join("g0"), root.path().join("g2"));
    for (dir, g) in [(&a, "0"), (&b, "2")] {
        let code = run(&cfg, &["sample", "--seed", "3", "--prototype", "1", "--gamma-g", g, "--out-dir", dir.to_str().unwrap()]);
        assert_eq!(code, 0);
    }
    let (ma, mb) = (manifest(&a), manifest(&b));
    assert_eq!((ma.tool.as_str(), ma.subcommand.as_str(), ma.seed), (mb.tool.as_str(), mb.subcommand.as_str(), mb.seed));
    assert_eq!(ma.inputs, mb.inputs);
    let (ca, cb) = (ma.config.as_object().unwrap(), mb.config.as_object().unwrap());
    let differing: Vec<&String> = ca.keys().filter(|k| ca[*k] != cb[*k]).collect();
    assert_eq!(differing, ["gamma_g", "out_dir"]);
    assert_eq!(ma.outputs.keys().collect::<Vec<_>>(), ["sample_000.f32"]);

    let out = root.path().join("out");
    assert_eq!(run(&cfg, &["eval"]), 0);
    let metrics: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    for key in ["sra", "sra_prototype", "sra_transfer", "content_score", "diversity", "nmi_global", "nmi_local", "prototype_usage"] {
        assert!(!metrics[key].is_null(), "{key}");
    }
    for key in ["sra", "nmi_global", "nmi_local"] {
        let v = metrics[key].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v));
    }
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("metric,value"));
    let rows: Vec<(&str, f64)> = lines.map(|l| l.split_once(',').unwrap()).map(|(k, v)| (k, v.parse().unwrap())).collect();
    let sra = rows.iter().find(|r| r.0 == "sra").unwrap().1;
    assert_eq!(sra, metrics["sra"].as_f64().unwrap());

    assert_eq!(run(&cfg, &["transfer", "--out-dir", root.path().join("t").to_str().unwrap()]), 0);
    assert_eq!(run(&cfg, &["inspect-prototypes", "--out-dir", root.path().join("p").to_str().unwrap()]), 0);
    let p: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(root.path().join("p/prototypes.json")).unwrap()).unwrap();
    assert_eq!(p["frozen"], true);
}
