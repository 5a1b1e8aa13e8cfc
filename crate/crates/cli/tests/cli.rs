use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mvector(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mvector"))
        .args(args)
        .current_dir(dir)
        .env_remove("MBN_SEED")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL_RUN: &str = "synth_pool = 12\nsynth_conversations = 3\nsynth_segments = 12\nsynth_speakers = 3\nsynth_within = 0.9\nmbn_v = 20\nmbn_k1 = 20\n";

#[test]
fn synth_writes_the_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let o = mvector(tmp.path(), &["synth", "--speakers", "5", "--segs", "20", "--out", "d/"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut names: Vec<String> = fs::read_dir(tmp.path().join("d"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names, ["conv_000.csv", "conv_000.rttm", "train.csv"]);
    let conv = fs::read_to_string(tmp.path().join("d/conv_000.csv")).unwrap();
    assert_eq!(conv.lines().count(), 1 + 100);
}

#[test]
fn synth_is_deterministic_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    for (dir, seed) in [("a", "9"), ("b", "9"), ("c", "10")] {
        let o = mvector(tmp.path(), &["synth", "--speakers", "6", "--segs", "5", "--seed", seed, "--out", dir]);
        assert!(o.status.success());
    }
    let read = |d: &str| fs::read(tmp.path().join(d).join("train.csv")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
}

#[test]
fn seed_falls_back_to_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let run = |dir: &str, env: Option<&str>| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_mvector"));
        c.args(["synth", "--speakers", "4", "--segs", "3", "--out", dir]).current_dir(tmp.path()).env_remove("MBN_SEED");
        if let Some(v) = env {
            c.env("MBN_SEED", v);
        }
        assert!(c.output().unwrap().status.success());
        fs::read(tmp.path().join(dir).join("train.csv")).unwrap()
    };
    let flagged = {
        assert!(mvector(tmp.path(), &["synth", "--speakers", "4", "--segs", "3", "--seed", "77", "--out", "f"]).status.success());
        fs::read(tmp.path().join("f/train.csv")).unwrap()
    };
    assert_eq!(run("e", Some("77")), flagged);
    assert_ne!(run("z", None), flagged);
}

#[test]
fn invalid_synth_spec_names_the_constraint() {
    let tmp = tempfile::tempdir().unwrap();
    let o = mvector(tmp.path(), &["synth", "--speakers", "3", "--per-conversation", "5", "--out", "d"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("speakers per conversation"), "{}", stderr(&o));
    assert!(!tmp.path().join("d/train.csv").exists());
}

#[test]
fn usage_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(mvector(tmp.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(mvector(tmp.path(), &["synth"]).status.code(), Some(1));
    fs::write(tmp.path().join("bad.toml"), "output_dirr = \"x\"\n").unwrap();
    let o = mvector(tmp.path(), &["run", "--config", "bad.toml"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("output_dirr"));
}

#[test]
fn missing_train_file_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    let o = mvector(tmp.path(), &["train-plda", "--train", "absent.csv", "--out", "p.bin"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("absent.csv"));
    assert!(!tmp.path().join("p.bin").exists());
}

#[test]
fn run_writes_a_parsable_report() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("cfg.toml"), format!("{SMALL_RUN}mode = \"mbn\"\nstop = \"oracle\"\nseed = 4\n")).unwrap();
    let o = mvector(tmp.path(), &["run", "--config", "cfg.toml", "--out", "out"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let line = fs::read_to_string(tmp.path().join("out/der.txt")).unwrap();
    let fields: Vec<(&str, f64)> = line
        .split_whitespace()
        .map(|kv| {
            let (k, v) = kv.split_once('=').unwrap();
            (k, v.parse().unwrap())
        })
        .collect();
    let keys: Vec<&str> = fields.iter().map(|f| f.0).collect();
    assert_eq!(keys, ["DER", "MISS", "FA", "SPKERR", "SCORED"]);
    assert!((fields[0].1 - fields[1].1 - fields[2].1 - fields[3].1).abs() < 1e-3);
    assert_eq!(String::from_utf8(o.stdout).unwrap(), line);
    assert!(tmp.path().join("out/hypothesis.rttm").exists());
    assert!(fs::read_to_string(tmp.path().join("out/report.txt")).unwrap().contains("collar: 0.25"));
}

#[test]
fn baseline_and_mbn_give_comparable_reports() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("cfg.toml"), format!("{SMALL_RUN}seed = 4\n")).unwrap();
    let mut lines = Vec::new();
    for mode in ["baseline", "mbn"] {
        let o = mvector(tmp.path(), &["run", "--config", "cfg.toml", "--mode", mode, "--out", mode]);
        assert!(o.status.success(), "{}", stderr(&o));
        lines.push(String::from_utf8(o.stdout).unwrap());
    }
    // Same data, so the scored time agrees.
    let scored = |l: &str| l.split_whitespace().last().unwrap().to_string();
    assert_eq!(scored(&lines[0]), scored(&lines[1]));
}

#[test]
fn stages_chain_through_files() {
    let tmp = tempfile::tempdir().unwrap();
    let ok = |args: &[&str]| {
        let o = mvector(tmp.path(), args);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
        String::from_utf8(o.stdout).unwrap()
    };
    ok(&["synth", "--speakers", "10", "--per-conversation", "3", "--segs", "10", "--within", "0.3", "--out", "d"]);
    ok(&["train-plda", "--train", "d/train.csv", "--out", "plda.bin"]);
    ok(&["extract", "--plda", "plda.bin", "--input", "d/conv_000.csv", "--out", "lat.mbne"]);
    ok(&["mbn", "--plda", "plda.bin", "--latents", "lat.mbne", "--reference", "d/conv_000.rttm", "--v", "20", "--k1", "15", "--out", "mv.csv"]);
    ok(&["cluster", "--input", "mv.csv", "--reference", "d/conv_000.rttm", "--out", "hyp.rttm"]);
    ok(&["cluster", "--input", "lat.mbne", "--similarity", "plda", "--plda", "plda.bin", "--stop", "threshold", "--tau", "0", "--out", "hyp_plda.rttm"]);
    let report = ok(&["score", "--reference", "d/conv_000.rttm", "--hypothesis", "hyp.rttm", "--embeddings", "mv.csv"]);
    assert!(report.contains("DT="), "{report}");
    assert!(report.lines().last().unwrap().starts_with("DER="));
    ok(&["project", "--input", "lat.mbne", "--out", "pca.csv"]);
    let pca = fs::read_to_string(tmp.path().join("pca.csv")).unwrap();
    assert!(pca.starts_with("segment_id,pc1,pc2,label\n"));
    let cal = ok(&["calibrate", "--plda", "plda.bin", "--dev", "d/conv_000.csv", "--mode", "baseline", "--grid-lo", "-5", "--grid-hi", "5", "--grid-step", "0.5"]);
    assert!(cal.starts_with("tau="));
}
