use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL: &str = "corpus.n_identities = 12\ntrain.total_steps = 10\ntrain.checkpoint_every = 5\n";

fn demorph(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_demorph")).current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = demorph(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

/// Temp dir holding `cfg.txt` and a generated corpus under `corpus/`.
fn with_corpus(extra: &str) -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("cfg.txt"), format!("{SMALL}{extra}")).unwrap();
    ok(dir.path(), &["--config", "cfg.txt", "--out", "corpus", "gen-corpus"]);
    dir
}

fn read(dir: &Path, rel: &str) -> String {
    fs::read_to_string(dir.join(rel)).unwrap()
}

#[test]
fn gen_corpus_is_reproducible() {
    let d = with_corpus("");
    let p = d.path();
    ok(p, &["--config", "cfg.txt", "--out", "again", "gen-corpus"]);
    let manifest = read(p, "corpus/manifest.json");
    assert_eq!(manifest, read(p, "again/manifest.json"));
    assert!(manifest.matches("\"split\"").count() >= 10);
    assert!(p.join("corpus/thresholds.csv").exists());
    ok(p, &["--config", "cfg.txt", "--seed", "99", "--out", "other", "gen-corpus"]);
    assert_ne!(manifest, read(p, "other/manifest.json"));
}

#[test]
fn train_log_checkpoints_and_resume() {
    let d = with_corpus("");
    let p = d.path();
    ok(p, &["--config", "cfg.txt", "--out", "run", "train", "--corpus", "corpus"]);
    let log = read(p, "run/train_log.csv");
    let rows: Vec<&str> = log.lines().skip(1).collect();
    assert_eq!(rows.len(), 10);
    assert!(rows[0].starts_with("1,bonafide,"));
    assert!(rows[1].starts_with("2,morphed,"));
    assert_eq!(rows[0].rsplit(',').next().unwrap(), "0");
    for f in ["step_000005.sfdm", "step_000010.sfdm", "final.sfdm"] {
        assert!(p.join("run/checkpoints").join(f).exists(), "{f}");
    }
    ok(p, &["--config", "cfg.txt", "--out", "run", "train", "--corpus", "corpus", "--resume", "run/checkpoints/step_000005.sfdm"]);
    assert_eq!(read(p, "run/train_log.csv"), log);
    assert_eq!(fs::read(p.join("run/checkpoints/final.sfdm")).unwrap(), fs::read(p.join("run/checkpoints/step_000010.sfdm")).unwrap());
}

#[test]
fn resume_under_other_config_exits_4() {
    let d = with_corpus("");
    let p = d.path();
    ok(p, &["--config", "cfg.txt", "--out", "run", "train", "--corpus", "corpus"]);
    fs::write(p.join("other.txt"), format!("{SMALL}train.lr_modules = 0.01\n")).unwrap();
    let out = demorph(p, &["--config", "other.txt", "--out", "run2", "train", "--corpus", "corpus", "--resume", "run/checkpoints/step_000005.sfdm"]);
    assert_eq!(code(&out), 4);
    // Backends that differ from the manifest are a state mismatch too.
    fs::write(p.join("backend.txt"), format!("{SMALL}backend.frs_dim = 16\n")).unwrap();
    assert_eq!(code(&demorph(p, &["--config", "backend.txt", "--out", "run3", "train", "--corpus", "corpus"])), 4);
}

#[test]
fn usage_and_io_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(p.join("bad.txt"), "no_such.key = 1\n").unwrap();
    assert_eq!(code(&demorph(p, &["--config", "bad.txt", "gen-corpus"])), 2);
    fs::write(p.join("blocker"), "").unwrap();
    fs::write(p.join("cfg.txt"), SMALL).unwrap();
    assert_eq!(code(&demorph(p, &["--config", "cfg.txt", "--out", "blocker/sub", "gen-corpus"])), 3);
    assert_eq!(code(&demorph(p, &["train", "--corpus", "missing"])), 3);
    assert_eq!(code(&demorph(p, &["frobnicate"])), 2);
}

#[test]
fn evaluate_writes_scores_metrics_and_sidecar() {
    let d = with_corpus("");
    let p = d.path();
    ok(p, &["--config", "cfg.txt", "--out", "run", "train", "--corpus", "corpus"]);
    let ckpt = "run/checkpoints/final.sfdm";
    ok(p, &["--out", "eval", "evaluate", "--checkpoint", ckpt, "--corpus", "corpus", "--split", "all"]);
    let scores = read(p, "eval/scores.csv");
    assert_eq!(scores.lines().next().unwrap(), "pair_id,label,scenario,morph_method,method,score,score_gt");
    for line in scores.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let s: f64 = f[5].parse().unwrap();
        assert!((-1.0..=1.0).contains(&s));
        assert_eq!(f[6].is_empty(), f[1] == "bona_fide", "{line}");
    }
    let metrics = read(p, "eval/metrics.csv");
    for method in ["demorpher/blend", "demorpher/splice", "demorpher/pooled", "no_demorph/pooled"] {
        let n = metrics.lines().filter(|l| l.contains(",accomplice,") && l.contains(&format!(",{method},"))).count();
        assert_eq!(n, 6, "{method}");
    }
    assert!(metrics.contains("toy,criminal,demorpher/pooled,dnti,"));
    assert!(read(p, "eval/thresholds.csv").starts_with("tau,"));

    ok(p, &["--out", "bf", "evaluate", "--checkpoint", ckpt, "--corpus", "corpus", "--scenario", "bonafide"]);
    let bf = read(p, "bf/metrics.csv");
    assert!(bf.contains(",bonafide,demorpher/pooled,dti,"));
    assert!(!bf.contains(",dnti,"));
    assert_eq!(code(&demorph(p, &["evaluate", "--checkpoint", ckpt, "--corpus", "corpus", "--scenario", "nope"])), 2);
}

#[test]
fn calibrate_from_scores_and_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(p.join("cmp.csv"), "label,score\nmated,0.9\nmated,0.8\nnonmated,0.1\nnonmated,0.2\nnonmated,0.3\nnonmated,0.05\n").unwrap();
    let tau = |fmr: &str, out: &str| -> f64 {
        ok(p, &["--out", out, "calibrate", "--scores", "cmp.csv", "--target-fmr", fmr]);
        let text = read(p, &format!("{out}/thresholds.csv"));
        text.lines().nth(1).unwrap().split(',').next().unwrap().parse().unwrap()
    };
    let loose = tau("0.5", "a");
    let strict = tau("0.001", "b");
    assert_eq!(loose, 0.2);
    assert!(strict >= loose);
    fs::write(p.join("empty.csv"), "label,score\nmated,0.9\n").unwrap();
    assert_eq!(code(&demorph(p, &["calibrate", "--scores", "empty.csv"])), 2);

    let d = with_corpus("");
    ok(d.path(), &["--out", "c1", "calibrate", "--corpus", "corpus", "--target-fmr", "0.01"]);
    ok(d.path(), &["--out", "c2", "calibrate", "--corpus", "corpus", "--target-fmr", "0.01"]);
    let a = read(d.path(), "c1/thresholds.csv");
    assert_eq!(a, read(d.path(), "c2/thresholds.csv"));
    let fmr: f64 = a.lines().nth(1).unwrap().rsplit(',').next().unwrap().parse().unwrap();
    assert!(fmr <= 0.01);
}

#[test]
fn map_table_shape() {
    let d = with_corpus("corpus.n_frs = 1\n");
    let p = d.path();
    ok(p, &["--out", "m", "map", "--corpus", "corpus"]);
    let text = read(p, "m/map.csv");
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows[0], "r,c,value");
    assert_eq!(rows.len(), 2);
    assert!(rows[1].starts_with("1,1,"));
    ok(p, &["--out", "m3", "map", "--corpus", "corpus", "--max-r", "3"]);
    let vals: Vec<f64> = read(p, "m3/map.csv").lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(vals.len(), 3);
    assert!(vals.windows(2).all(|w| w[0] >= w[1]));
}

#[test]
fn plots_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let header = "pair_id,label,scenario,morph_method,method,score,score_gt\n";
    fs::write(p.join("s.csv"), format!("{header}b1,bona_fide,accomplice,,demorpher,0.9,\nb2,bona_fide,accomplice,,demorpher,0.7,\nm1,morph,accomplice,blend,demorpher,0.2,0.8\n")).unwrap();
    fs::write(p.join("t.csv"), "tau,target_fmr,mated_n,nonmated_n,achieved_tmr,achieved_fmr\n0.5,0.001,2,2,1,0\n").unwrap();
    ok(p, &["--out", "h.svg", "plot", "--scores", "s.csv", "--kind", "histogram", "--thresholds", "t.csv"]);
    ok(p, &["--out", "d.svg", "plot", "--scores", "s.csv", "--kind", "det"]);
    let h = read(p, "h.svg");
    assert!(h.contains("<svg") && h.contains("D_D"));
    assert!(fs::metadata(p.join("d.svg")).unwrap().len() > 0);

    // No output-versus-target column: that series is dropped.
    fs::write(p.join("bf.csv"), format!("{header}b1,bona_fide,bonafide,,demorpher,0.9,\nm1,morph,accomplice,blend,demorpher,0.2,\n")).unwrap();
    ok(p, &["--out", "h2.svg", "plot", "--scores", "bf.csv", "--kind", "histogram"]);
    let h2 = read(p, "h2.svg");
    assert!(h2.contains("D_B") && !h2.contains("D_D"));
    assert_eq!(code(&demorph(p, &["plot", "--scores", "missing.csv", "--kind", "det"])), 3);
}
