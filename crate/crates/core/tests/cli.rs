use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use vllm_lab::checkpoint::Checkpoint;
use vllm_lab::ppm;

const TINY: &str = "\
# small enough to train in a few seconds
count = 16
codebook_size = 16
kmeans_iters = 5
embed_dim = 16
n_heads = 2
n_layers = 1
ffn_dim = 32
steps = 12
batch = 4
aux_examples = 2
flow_hidden = 16
flow_train_steps = 10
flow_batch = 4
flow_steps = 5
eval_count = 17
log_every = 5
";

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_vllm-lab"));
    c.env_remove("VLLM_LAB_SEED");
    c
}

fn run(c: &mut Command) -> Output {
    let out = c.output().unwrap();
    assert!(
        out.status.success(),
        "command failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn write_config(dir: &Path, name: &str, extra: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, format!("{TINY}{extra}")).unwrap();
    p
}

fn train(dir: &Path, cfg: &Path, name: &str) -> PathBuf {
    let out = dir.join(name);
    run(bin().args(["train", "--config"]).arg(cfg).arg("--out").arg(&out));
    out
}

fn stderr_line(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).lines().last().unwrap_or("").to_string()
}

#[test]
fn train_writes_every_artifact_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "run.cfg", "noise_aware = on\ncorruption_rate = 0.25\nscore_steps = 3\n");
    let a = train(tmp.path(), &cfg, "a");
    for f in ["checkpoint.bin", "config.txt", "cleaning_report.tsv", "loss_curve.tsv", "flow_loss.tsv", "metrics.txt", "metrics.csv"] {
        assert!(a.join(f).exists(), "missing {f}");
    }
    let curve = fs::read_to_string(a.join("loss_curve.tsv")).unwrap();
    assert_eq!(curve.lines().count(), 1 + 12);
    let report = fs::read_to_string(a.join("cleaning_report.tsv")).unwrap();
    assert_eq!(report.lines().count(), 1 + 16);
    let metrics = fs::read_to_string(a.join("metrics.txt")).unwrap();
    for key in ["toy_fid", "toy_fid_flow", "alignment_matched", "recall_at_10", "mrr", "ndcg", "training_hours", "inference_ms"] {
        let line = metrics.lines().find(|l| l.starts_with(&format!("metric.{key}="))).unwrap_or_else(|| panic!("{key}"));
        assert!(!line.ends_with('='), "{key} is blank");
    }
    let b = train(tmp.path(), &cfg, "b");
    assert_eq!(fs::read(a.join("checkpoint.bin")).unwrap(), fs::read(b.join("checkpoint.bin")).unwrap());
}

#[test]
fn disabling_the_flow_removes_it_structurally() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "run.cfg", "rectified_flow = off\n");
    let out = train(tmp.path(), &cfg, "run");
    assert!(Checkpoint::load(&out.join("checkpoint.bin")).unwrap().flow.is_none());
    assert!(!out.join("flow_loss.tsv").exists());
    let metrics = fs::read_to_string(out.join("metrics.txt")).unwrap();
    for key in ["toy_fid_flow", "ssim_flow", "inference_ms_flow", "straightness"] {
        assert!(metrics.contains(&format!("metric.{key}=absent\n")), "{key}");
    }
}

#[test]
fn sample_and_eval_from_a_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "run.cfg", "temperature = 0\n");
    let run_dir = train(tmp.path(), &cfg, "run");
    let ckpt = run_dir.join("checkpoint.bin");
    let draw = |name: &str| {
        let out = tmp.path().join(name);
        run(bin()
            .args(["sample", "--ckpt"])
            .arg(&ckpt)
            .args(["--caption", "a large red circle at the center", "--count", "2", "--seed", "5", "--out"])
            .arg(&out));
        out
    };
    let (s1, s2) = (draw("s1"), draw("s2"));
    let log = fs::read_to_string(s1.join("samples.tsv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 2 + 2);
    for f in ["token_0.ppm", "token_1.ppm", "flow_0.ppm", "flow_1.ppm"] {
        let bytes = fs::read(s1.join(f)).unwrap();
        assert!(bytes.starts_with(b"P6\n32 32\n255\n"), "{f}");
        ppm::decode(&bytes).unwrap();
        if f.starts_with("token") {
            assert_eq!(bytes, fs::read(s2.join(f)).unwrap(), "greedy sampling must repeat");
        }
    }
    let eval_dir = tmp.path().join("eval");
    let eval_cfg = write_config(tmp.path(), "eval.cfg", "eval_seed = 77\n");
    run(bin().args(["eval", "--ckpt"]).arg(&ckpt).arg("--config").arg(&eval_cfg).arg("--out").arg(&eval_dir));
    let metrics = fs::read_to_string(eval_dir.join("metrics.txt")).unwrap();
    assert!(metrics.contains("eval_seed=77\n"));
    assert!(metrics.contains("metric.training_hours=absent\n"));

    let bad = bin()
        .args(["sample", "--ckpt"])
        .arg(&ckpt)
        .args(["--caption", "a purple circle", "--out"])
        .arg(tmp.path().join("bad"))
        .output()
        .unwrap();
    assert!(!bad.status.success());
    assert!(stderr_line(&bad).starts_with("E_UNKNOWN_WORD: "));

    let mut bytes = fs::read(&ckpt).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x01;
    let broken = tmp.path().join("broken.bin");
    fs::write(&broken, bytes).unwrap();
    let out = bin()
        .args(["sample", "--ckpt"])
        .arg(&broken)
        .args(["--caption", "a large red circle at the center", "--out"])
        .arg(tmp.path().join("x"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(stderr_line(&out).starts_with("E_DIGEST: "));
}

#[test]
fn config_errors_carry_a_code_and_line() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "steps = 10\nlearning_rat = 0.1\n").unwrap();
    let out = bin().args(["train", "--config"]).arg(&cfg).arg("--out").arg(tmp.path().join("o")).output().unwrap();
    assert!(!out.status.success());
    let line = stderr_line(&out);
    assert!(line.starts_with("E_CONFIG: config line 2"), "{line}");
    let usage = bin().args(["train"]).output().unwrap();
    assert!(!usage.status.success());
    assert!(stderr_line(&usage).starts_with("E_USAGE: "));
}

#[test]
fn seed_environment_variable_overrides_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "run.cfg", "rectified_flow = off\n");
    let out = tmp.path().join("run");
    run(bin().env("VLLM_LAB_SEED", "99").args(["train", "--config"]).arg(&cfg).arg("--out").arg(&out));
    assert!(fs::read_to_string(out.join("metrics.txt")).unwrap().contains("seed=99\n"));
}

#[test]
fn compare_ranks_fixture_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let data = Path::new(env!("CARGO_MANIFEST_DIR")).join("testdata");
    let out = tmp.path().join("cmp");
    let o = run(bin().arg("compare").arg(data.join("table1.csv")).arg(data.join("table2.csv")).arg("--out").arg(&out));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("1. Vision-Enhanced LLM: 17.6"));
    assert!(out.join("comparison.csv").exists());
    assert_eq!(fs::read_to_string(out.join("comparison.txt")).unwrap(), text);

    let (a, b) = (tmp.path().join("a.csv"), tmp.path().join("b.csv"));
    fs::write(&a, "Model,x\nA,1\n").unwrap();
    fs::write(&b, "Model,y\nB,2\n").unwrap();
    let o = bin().arg("compare").arg(&a).arg(&b).arg("--out").arg(&out).output().unwrap();
    assert!(!o.status.success());
    assert!(stderr_line(&o).starts_with("E_NO_OVERLAP: "));
}

#[test]
fn flow2d_writes_configured_row_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("f.cfg");
    fs::write(&cfg, "flow2d_steps = 300\nflow2d_samples = 500\nflow2d_batch = 128\nflow2d_probes = 16\n").unwrap();
    let out = tmp.path().join("f");
    run(bin().args(["flow2d", "--config"]).arg(&cfg).arg("--out").arg(&out));
    let rows = |f: &str| fs::read_to_string(out.join(f)).unwrap().lines().count() - 1;
    assert_eq!(rows("samples.tsv"), 500);
    assert_eq!(rows("targets.tsv"), 500);
    assert_eq!(rows("loss.tsv"), 300);
    assert_eq!(rows("straightness.tsv"), 1);
}
