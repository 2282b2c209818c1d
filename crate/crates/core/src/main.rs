use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use vllm_lab::checkpoint::Checkpoint;
use vllm_lab::config::RunConfig;
use vllm_lab::flow::{run_flow2d, sample_batch};
use vllm_lab::pipeline::{eval_set, evaluate, sample_tokens, train_run, Trainer};
use vllm_lab::report::{compare, load_table};
use vllm_lab::{ppm, Result, Rng, Tensor};

#[derive(Parser)]
#[command(name = "vllm-lab", version, about = "Train, sample, evaluate and compare desk-scale text-to-image models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Prepare data, train both pathways, write a checkpoint and reports.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw images for one caption from a checkpoint.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        caption: String,
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint; the config supplies the eval set keys.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank systems across metrics reports and table CSVs.
    Compare {
        #[arg(required = true, num_args = 2..)]
        files: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and sample the planar two-Gaussians flow.
    Flow2d {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("E_USAGE: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}: {}", e.code(), e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}

fn load_config(path: &Path) -> Result<RunConfig> {
    let mut c = RunConfig::load(path)?;
    c.apply_env()?;
    c.validate()?;
    Ok(c)
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train { config, out } => train(&load_config(&config)?, &out),
        Command::Sample { ckpt, caption, count, seed, out } => sample(&ckpt, &caption, count, seed, &out),
        Command::Eval { ckpt, config, out } => eval(&ckpt, &config, &out),
        Command::Compare { files, out } => {
            let paths: Vec<&Path> = files.iter().map(PathBuf::as_path).collect();
            let cmp = compare(&load_table(&paths)?)?;
            fs::create_dir_all(&out)?;
            let text = cmp.to_text();
            fs::write(out.join("comparison.txt"), &text)?;
            fs::write(out.join("comparison.csv"), cmp.to_csv()?)?;
            print!("{text}");
            Ok(())
        }
        Command::Flow2d { config, out } => flow2d(&load_config(&config)?, &out),
    }
}

fn train(config: &RunConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let t = Instant::now();
    let outcome = train_run(config, &mut |m| eprintln!("[{:>6.1}s] {m}", t.elapsed().as_secs_f64()))?;
    outcome.trainer.checkpoint().save(&out.join("checkpoint.bin"))?;
    fs::write(out.join("config.txt"), config.to_text())?;
    if let Some(r) = &outcome.data.report {
        r.write(&out.join("cleaning_report.tsv"))?;
    }
    let mut curve = String::from("step\ttotal\tcross_entropy\tperceptual\trefine\talign\n");
    for (i, l) in outcome.token_losses.iter().enumerate() {
        let _ = writeln!(curve, "{i}\t{}\t{}\t{}\t{}\t{}", l.total, l.cross_entropy, l.perceptual, l.refine, l.align);
    }
    fs::write(out.join("loss_curve.tsv"), curve)?;
    if config.rectified_flow {
        let mut flow = String::from("step\tloss\n");
        for (i, l) in outcome.flow_losses.iter().enumerate() {
            let _ = writeln!(flow, "{i}\t{l}");
        }
        fs::write(out.join("flow_loss.tsv"), flow)?;
    }
    let mut report = evaluate(&outcome.trainer, &eval_set(config)?)?;
    report.derive_headline(Some(outcome.train_seconds));
    report.set_meta("token_steps", &outcome.trainer.token_step.to_string());
    report.set_meta(
        "flow_steps",
        &outcome.trainer.flow.as_ref().map_or(0, |f| f.step).to_string(),
    );
    report.set_meta("train_seconds", &format!("{:.3}", outcome.train_seconds));
    report.write(out, "vllm-lab")?;
    print!("{}", report.to_kv());
    Ok(())
}

fn sample(ckpt: &Path, caption: &str, count: usize, seed: u64, out: &Path) -> Result<()> {
    let trainer = Trainer::for_inference(&Checkpoint::load(ckpt)?)?;
    let (config, vocab, model) = (&trainer.config, &trainer.vocab, &trainer.model);
    let text = vocab.encode_text(caption)?;
    fs::create_dir_all(out)?;
    let mut log = String::from("index\tpathway\tfile\tseed\tms\n");
    let mut rng = Rng::new(seed);
    for i in 0..count {
        let s = rng.next_u64();
        let t = Instant::now();
        let sample = sample_tokens(model, vocab, config, caption, s)?;
        let ms = t.elapsed().as_secs_f64() * 1000.0;
        let file = format!("token_{i}.ppm");
        ppm::write(&out.join(&file), &sample.image)?;
        let _ = writeln!(log, "{i}\ttoken\t{file}\t{s}\t{ms:.3}");
    }
    if let Some(f) = &trainer.flow {
        let cond = model.embed_text(vocab, &text)?;
        let s = rng.next_u64();
        let t = Instant::now();
        let samples = sample_batch(&f.net, &vec![cond; count], config.flow_steps, config.flow_integrator, s)?;
        let ms = t.elapsed().as_secs_f64() * 1000.0 / count.max(1) as f64;
        for (i, fs_) in samples.into_iter().enumerate() {
            let file = format!("flow_{i}.ppm");
            ppm::write(&out.join(&file), &Tensor::new(vec![3, 32, 32], fs_.clamped)?)?;
            let _ = writeln!(log, "{i}\tflow\t{file}\t{s}\t{ms:.3}");
        }
    }
    fs::write(out.join("samples.tsv"), &log)?;
    print!("{log}");
    Ok(())
}

fn eval(ckpt: &Path, config: &Path, out: &Path) -> Result<()> {
    let eval_cfg = load_config(config)?;
    let trainer = Trainer::for_inference(&Checkpoint::load(ckpt)?)?;
    let mut set_cfg = trainer.config.clone();
    set_cfg.eval_seed = eval_cfg.eval_seed;
    set_cfg.eval_count = eval_cfg.eval_count;
    let mut report = evaluate(&trainer, &eval_set(&set_cfg)?)?;
    report.derive_headline(None);
    report.set_meta("eval_seed", &set_cfg.eval_seed.to_string());
    report.set_meta("eval_count", &set_cfg.eval_count.to_string());
    fs::create_dir_all(out)?;
    report.write(out, "vllm-lab")?;
    print!("{}", report.to_kv());
    Ok(())
}

fn flow2d(config: &RunConfig, out: &Path) -> Result<()> {
    let r = run_flow2d(&config.flow2d_settings())?;
    fs::create_dir_all(out)?;
    let points = |rows: &[Vec<f64>]| {
        let mut s = String::from("x\ty\n");
        for p in rows {
            let _ = writeln!(s, "{}\t{}", p[0], p[1]);
        }
        s
    };
    fs::write(out.join("targets.tsv"), points(&r.targets))?;
    fs::write(out.join("samples.tsv"), points(&r.samples))?;
    let mut loss = String::from("step\tloss\n");
    for (i, l) in r.losses.iter().enumerate() {
        let _ = writeln!(loss, "{i}\t{l}");
    }
    fs::write(out.join("loss.tsv"), loss)?;
    let summary = format!(
        "straightness_untrained\tstraightness_trained\tmode_mean_neg_x\tmode_mean_neg_y\tmode_mean_pos_x\tmode_mean_pos_y\tweight_neg\tweight_pos\n{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
        r.straightness_untrained,
        r.straightness_trained,
        r.mode_means[0][0],
        r.mode_means[0][1],
        r.mode_means[1][0],
        r.mode_means[1][1],
        r.mode_weights[0],
        r.mode_weights[1]
    );
    fs::write(out.join("straightness.tsv"), &summary)?;
    print!("{summary}");
    Ok(())
}
