use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn svfap(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_svfap"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn run_json(dir: &Path) -> serde_json::Value {
    let text = fs::read_to_string(dir.join("run.json")).expect("run.json written");
    serde_json::from_str(&text).expect("run.json parses")
}

const TINY: &str = "\
embed_dim = 16
stage_depths = 1,1,1
bottleneck_tokens = 2
masking_ratio = 0.5
patch = 2,4,4
input = 8,8,8
heads = 2
decoder_dim = 16
decoder_depth = 1
decoder_heads = 2
spatial_hidden = 16
batch_size = 4
base_lr = 0.1
epochs = 2
warmup_epochs = 1
sample_stride = 1
";

#[test]
fn count_prints_table_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let o = svfap(dir.path(), &["count", "--preset", "TPSBT-B", "--out", "c"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("params 77.99M"), "{out}");
    assert!(out.contains("flops 43.66G"));
    assert!(out.contains("flops_p 12.98G"));
    assert!(out.contains("variant,params,params_decoder,flops,flops_p\nfull,"));
    let rj = run_json(&dir.path().join("c"));
    assert_eq!(rj["command"], "count");
    assert!(rj["git"].is_string());
    assert!(rj["config"].as_str().unwrap().contains("embed_dim = 512"));
    assert!(rj["metrics"]["full"]["flops"].as_u64().unwrap() > 0);
}

#[test]
fn count_regime_and_variant_grid() {
    let dir = tempfile::tempdir().unwrap();
    let o = svfap(dir.path(), &["count", "--variant", "vit_baseline", "--regime", "finetune", "--out", "c"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("flops 76.76G"));
    assert!(!stdout(&o).contains("flops_p "));

    let o = svfap(dir.path(), &["count", "--table4", "--out", "t"]);
    assert!(o.status.success());
    let csv = fs::read_to_string(dir.path().join("t/count.csv")).unwrap();
    let names: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["vit_baseline", "tp_only", "sbt_only", "full"]);

    let o = svfap(dir.path(), &["count", "--set", "bottleneck_tokens=16", "--regime", "finetune", "--out", "g"]);
    assert!(stdout(&o).contains("flops 44.50G"), "{}", stdout(&o));
}

#[test]
fn missing_config_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = svfap(dir.path(), &["pretrain", "--config", "missing.cfg", "--data", "m.csv", "--out", "p"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("missing.cfg"), "{}", stderr(&o));
    let rj = run_json(&dir.path().join("p"));
    assert!(rj["error"].as_str().unwrap().contains("missing.cfg"));
}

#[test]
fn bad_input_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    assert!(!svfap(dir.path(), &["count", "--bogus"]).status.success());
    assert!(!svfap(dir.path(), &["count", "--preset", "TPSBT-XL"]).status.success());
    let o = svfap(dir.path(), &["count", "--set", "heads=7", "--out", "c"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("heads"), "{}", stderr(&o));
    let o = svfap(dir.path(), &["finetune", "--data", "nowhere/manifest.csv", "--out", "f"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("nowhere/manifest.csv"), "{}", stderr(&o));
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        let o = svfap(dir.path(), &["synth", "--classes", "3", "--per-class", "4", "--seed", "7", "--out", out]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in ["manifest.csv", "scores.csv", "clip_0005/f00003.ppm"] {
        assert_eq!(
            fs::read(dir.path().join("a").join(f)).unwrap(),
            fs::read(dir.path().join("b").join(f)).unwrap(),
            "{f}"
        );
    }
    let manifest = fs::read_to_string(dir.path().join("a/manifest.csv")).unwrap();
    assert_eq!(manifest.lines().filter(|l| l.starts_with("clip_")).count(), 12);
}

#[test]
fn pretrain_finetune_eval_reconstruct() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("tiny.cfg"), TINY).unwrap();
    let ok = |args: &[&str]| {
        let o = svfap(d, args);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
        stdout(&o)
    };
    ok(&["synth", "--per-class", "2", "--frames", "8", "--height", "8", "--width", "8", "--out", "data"]);
    ok(&["pretrain", "--data", "data/manifest.csv", "--config", "tiny.cfg", "--out", "pre"]);
    assert!(d.join("pre/checkpoint.svfap").exists());
    assert_eq!(fs::read_to_string(d.join("pre/loss.csv")).unwrap().lines().count(), 1 + 2 * 2);

    let out = ok(&[
        "finetune", "--data", "data/manifest.csv", "--init", "pre/checkpoint.svfap", "--config", "tiny.cfg", "--set", "epochs=3",
        "--out", "ft",
    ]);
    assert!(out.contains("tensors loaded, 2 freshly initialized"), "{out}");
    let rj = run_json(&d.join("ft"));
    assert_eq!(rj["init"]["fresh"], 2);
    assert!(rj["init"]["loaded"].as_u64().unwrap() > 10);

    let out = ok(&["eval", "--checkpoint", "ft/checkpoint.svfap", "--data", "data/manifest.csv", "--out", "ev"]);
    assert!(out.contains("weighted_f1"));
    let csv = fs::read_to_string(d.join("ev/metrics.csv")).unwrap();
    assert!(csv.starts_with("metric,value\nuar,"), "{csv}");
    assert!(run_json(&d.join("ev"))["metrics"]["war"].is_number());

    let out = ok(&["finetune", "--data", "data/scores.csv", "--config", "tiny.cfg", "--out", "reg"]);
    assert!(out.contains("regress"));
    ok(&["eval", "--checkpoint", "reg/checkpoint.svfap", "--data", "data/scores.csv", "--out", "reg_ev"]);
    assert!(fs::read_to_string(d.join("reg_ev/metrics.csv")).unwrap().contains("ccc_mean"));

    ok(&["reconstruct", "--checkpoint", "pre/checkpoint.svfap", "--data", "data/manifest.csv", "--out", "rec"]);
    let ppm = fs::read(d.join("rec/reconstruction.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6\n"));
    // three rows of eight 8×8 frames with one-pixel gutters
    let header = String::from_utf8_lossy(&ppm[..16]).into_owned();
    assert!(header.starts_with("P6\n71 26 255\n"), "{header:?}");

    // a fine-tuned checkpoint cannot be reconstructed from
    let o = svfap(d, &["reconstruct", "--checkpoint", "ft/checkpoint.svfap", "--data", "data/manifest.csv", "--out", "x"]);
    assert!(!o.status.success());

    // nothing written outside the --out directories
    let mut top: Vec<String> = fs::read_dir(d).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    top.sort();
    assert_eq!(top, ["data", "ev", "ft", "pre", "rec", "reg", "reg_ev", "tiny.cfg", "x"]);
}

#[test]
fn pretrain_resume_matches_uninterrupted() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("tiny.cfg"), TINY).unwrap();
    let ok = |args: &[&str]| {
        let o = Command::new(env!("CARGO_BIN_EXE_svfap"))
            .current_dir(d)
            .env("SVFAP_DETERMINISTIC", "1")
            .args(args)
            .output()
            .unwrap();
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
    };
    ok(&["synth", "--per-class", "2", "--frames", "8", "--height", "8", "--width", "8", "--out", "data"]);
    ok(&["pretrain", "--data", "data/manifest.csv", "--config", "tiny.cfg", "--out", "full"]);
    ok(&["pretrain", "--data", "data/manifest.csv", "--config", "tiny.cfg", "--max-steps", "3", "--out", "part"]);
    ok(&["pretrain", "--data", "data/manifest.csv", "--resume", "part/checkpoint.svfap", "--out", "rest"]);
    assert_eq!(
        fs::read(d.join("full/checkpoint.svfap")).unwrap(),
        fs::read(d.join("rest/checkpoint.svfap")).unwrap()
    );
    let tail: Vec<String> = fs::read_to_string(d.join("full/loss.csv")).unwrap().lines().skip(4).map(String::from).collect();
    let rest: Vec<String> = fs::read_to_string(d.join("rest/loss.csv")).unwrap().lines().skip(1).map(String::from).collect();
    assert_eq!(tail, rest);
}
