use std::path::Path;

use vllm_lab::checkpoint::{Checkpoint, VERSION};
use vllm_lab::config::RunConfig;
use vllm_lab::pipeline::{evaluate, eval_set, prepare_data, Trainer};
use vllm_lab::report::{compare, load_table, Direction, Metric, MetricsReport, Table};
use vllm_lab::Error;

const TINY: &str = "\
count = 16
codebook_size = 16
kmeans_iters = 5
embed_dim = 16
n_heads = 2
n_layers = 1
ffn_dim = 32
steps = 20
batch = 4
aux_examples = 2
flow_hidden = 16
flow_train_steps = 20
flow_batch = 4
flow_steps = 5
eval_count = 17
";

fn tiny(extra: &str) -> RunConfig {
    RunConfig::parse(&format!("{TINY}{extra}")).unwrap()
}

fn trained(cfg: &RunConfig, tokens: usize, flow: usize) -> Trainer {
    let data = prepare_data(cfg).unwrap();
    let mut t = Trainer::new(cfg, &data).unwrap();
    t.train_tokens(tokens, &mut |_, _| {}).unwrap();
    t.train_flow(flow, &mut |_, _| {}).unwrap();
    t
}

#[test]
fn config_text_round_trips_and_defaults_are_documented() {
    let cfg = tiny("noise_aware = on\ntau = 2.5\nflow_integrator = heun\n");
    assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    let docs = RunConfig::documented_defaults();
    for key in RunConfig::KEYS {
        assert!(docs.lines().any(|l| l.trim_start().starts_with(&format!("{key} ="))), "{key} undocumented");
    }
    assert_eq!(RunConfig::parse(&docs).unwrap(), RunConfig::default());
}

#[test]
fn config_errors_name_the_line() {
    for (text, line) in [
        ("steps = 3\nbogus = 1\n", 2),
        ("steps = 3\nsteps = 4\n", 2),
        ("# comment\n\nsteps = many\n", 3),
        ("no equals sign\n", 1),
    ] {
        match RunConfig::parse(text) {
            Err(Error::Config { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
            other => panic!("{text:?}: {other:?}"),
        }
    }
    assert!(RunConfig::parse("n_heads = 3\n").is_err(), "64 is not divisible by 3");
    assert!(RunConfig::parse("dropout = 0.1\n").is_err());
}

#[test]
fn config_hash_tracks_content() {
    assert_eq!(tiny("").hash(), tiny("").hash());
    assert_ne!(tiny("").hash(), tiny("seed = 1\n").hash());
    assert_eq!(tiny("").hash().len(), 64);
}

#[test]
fn checkpoint_bytes_are_stable_through_a_round_trip() {
    let cfg = tiny("");
    let bytes = trained(&cfg, 5, 5).checkpoint().to_bytes();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.bin");
    back.save(&p).unwrap();
    let again = Checkpoint::load(&p).unwrap();
    again.save(&p).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), bytes);
    assert_eq!(again, back);
}

fn find(hay: &[u8], needle: &[u8]) -> usize {
    hay.windows(needle.len()).position(|w| w == needle).unwrap()
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let bytes = trained(&tiny("rectified_flow = off\n"), 2, 0).checkpoint().to_bytes();
    let mut flipped = bytes.clone();
    // A byte inside the first parameter tensor's data.
    let at = find(&bytes, b"tok_emb") + 64;
    flipped[at] ^= 0x10;
    assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Digest)));

    let mut versioned = bytes.clone();
    versioned[5..9].copy_from_slice(&(VERSION + 1).to_le_bytes());
    assert!(matches!(
        Checkpoint::from_bytes(&versioned),
        Err(Error::Version { found, expected }) if found == VERSION + 1 && expected == VERSION
    ));
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&magic), Err(Error::Format { .. })));
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let cfg = tiny("");
    let straight = trained(&cfg, 20, 20);

    let data = prepare_data(&cfg).unwrap();
    let mut first = Trainer::new(&cfg, &data).unwrap();
    first.train_tokens(7, &mut |_, _| {}).unwrap();
    let saved = Checkpoint::from_bytes(&first.checkpoint().to_bytes()).unwrap();
    let mut resumed = Trainer::from_checkpoint(&saved, &data).unwrap();
    resumed.train_tokens(13, &mut |_, _| {}).unwrap();
    resumed.train_flow(9, &mut |_, _| {}).unwrap();
    let saved = Checkpoint::from_bytes(&resumed.checkpoint().to_bytes()).unwrap();
    let mut resumed = Trainer::from_checkpoint(&saved, &data).unwrap();
    resumed.train_flow(11, &mut |_, _| {}).unwrap();

    assert_eq!(resumed.checkpoint().to_bytes(), straight.checkpoint().to_bytes());
}

#[test]
fn token_training_does_not_depend_on_the_flow_switch() {
    let on = trained(&tiny(""), 10, 10);
    let off = trained(&tiny("rectified_flow = off\n"), 10, 0);
    assert_eq!(on.model.params, off.model.params);
}

#[test]
fn inference_trainer_refuses_to_train() {
    let t = trained(&tiny(""), 1, 0);
    let mut inf = Trainer::for_inference(&t.checkpoint()).unwrap();
    assert!(matches!(inf.train_tokens(1, &mut |_, _| {}), Err(Error::EmptyBatch)));
}

#[test]
fn reports_round_trip_and_mark_absent_metrics() {
    let cfg = tiny("rectified_flow = off\n");
    let t = trained(&cfg, 3, 0);
    let mut r = evaluate(&t, &eval_set(&cfg).unwrap()).unwrap();
    r.derive_headline(Some(36.0));
    assert_eq!(r.get("training_hours"), Some(Metric::Value(0.01)));
    assert_eq!(r.get("toy_fid_flow"), Some(Metric::Absent));
    assert_eq!(r.get("toy_fid"), r.get("toy_fid_token"));
    let back = MetricsReport::from_kv(&r.to_kv()).unwrap();
    assert_eq!(back, r);
    let csv = r.to_csv("run").unwrap();
    let mut lines = csv.lines();
    let header = lines.next().unwrap();
    assert!(header.starts_with("Model,toy-FID (Lower is better),Alignment Score (Higher is better)"));
    let row = lines.next().unwrap();
    assert!(!row.split(',').any(str::is_empty), "blank cell in {row}");
    assert!(row.contains("absent"));
    assert!(MetricsReport::from_kv("metric.x=1\n").is_err(), "schema version is required");
}

#[test]
fn identical_reports_tie_everywhere() {
    let cfg = tiny("rectified_flow = off\n");
    let t = trained(&cfg, 3, 0);
    let r = evaluate(&t, &eval_set(&cfg).unwrap()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for name in ["a", "b"] {
        let d = dir.path().join(name);
        std::fs::create_dir_all(&d).unwrap();
        r.write(&d, name).unwrap();
    }
    let paths = [dir.path().join("a/metrics.txt"), dir.path().join("b/metrics.txt")];
    let refs: Vec<&Path> = paths.iter().map(|p| p.as_path()).collect();
    let c1 = compare(&load_table(&refs).unwrap()).unwrap();
    let c2 = compare(&load_table(&refs).unwrap()).unwrap();
    assert_eq!(c1.to_text(), c2.to_text());
    assert_eq!(c1.systems, vec!["a", "b"]);
    assert!(!c1.columns.is_empty());
    for col in &c1.columns {
        assert!(col.entries.iter().all(|e| e.2 == 1), "{}", col.column);
    }
}

#[test]
fn column_directions() {
    assert_eq!(Direction::of_column("FID Score (Lower is better)"), Direction::Lower);
    assert_eq!(Direction::of_column("CLIP Score (Higher is better)"), Direction::Higher);
    assert_eq!(Direction::of_column("Training Time (hrs)"), Direction::Lower);
    assert_eq!(Direction::of_column("Energy Consumption (kWh)"), Direction::Lower);
    assert_eq!(Direction::of_column("Computational Efficiency (%)"), Direction::Higher);
    assert_eq!(Direction::of_column("recall_at_10"), Direction::Higher);
    assert_eq!(Direction::of_column("toy_fid_flow"), Direction::Lower);
}

#[test]
fn compare_needs_shared_columns() {
    let mut t = Table::default();
    t.add_csv("Model,x\nA,1\n").unwrap();
    t.add_csv("Model,y\nB,2\n").unwrap();
    assert!(matches!(compare(&t), Err(Error::NoOverlap)));
    let mut t = Table::default();
    t.add_csv("Model,score\nA,1\nB,3\nC,3\n").unwrap();
    let c = compare(&t).unwrap();
    assert_eq!(c.columns[0].entries.iter().map(|e| e.2).collect::<Vec<_>>(), vec![3, 1, 1]);
}
