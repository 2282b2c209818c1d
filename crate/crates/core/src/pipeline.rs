//! End-to-end runs: data preparation, training, sampling and evaluation.
//!
//! Every random choice draws from a stream derived from the config seed and
//! a fixed salt, so a run is a pure function of its config.

use std::time::Instant;

use crate::checkpoint::{Checkpoint, FlowState};
use crate::config::{CodebookSource, RunConfig, ScorerKind};
use crate::data::{caption_of, generate_dataset, parse_caption, render, DatasetManifest, DatasetRecord, MeasurementChannel, SceneSpec};
use crate::error::{Error, Result};
use crate::flow::{sample_batch, VelocityNet};
use crate::metrics::{alignment_matrix, bleu4, ranking_metrics, ssim, toy_fid, FeatureExtractor};
use crate::model::{LossContext, LossWeights, StepLosses, TokenModel, TrainExample};
use crate::noise::{clean_training_set, CentroidScorer, CleaningReport};
use crate::optim::OptimizerState;
use crate::report::{MetricsReport, Metric};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::tokenizer::{fit_codebook, Vocabulary};

const SALT_CODEBOOK: u64 = 1;
const SALT_MODEL_INIT: u64 = 2;
const SALT_TRAIN: u64 = 3;
const SALT_FLOW_INIT: u64 = 4;
const SALT_FLOW_TRAIN: u64 = 5;
const SALT_SCORER: u64 = 6;
const SALT_REMEASURE: u64 = 7;
const SALT_EVAL: u64 = 8;

/// Independent stream for one purpose of one run.
pub fn stream(seed: u64, salt: u64) -> Rng {
    Rng::new(seed).fork(salt)
}

/// Training data after optional cleaning, with the fitted codebook.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub raw: DatasetManifest,
    pub cleaned: DatasetManifest,
    pub report: Option<CleaningReport>,
    pub vocab: Vocabulary,
}

fn codebook_for(manifest: &DatasetManifest, config: &RunConfig, seed: u64) -> Result<Vocabulary> {
    let reference: Vec<Tensor> = match config.codebook_source {
        CodebookSource::Train => Vec::new(),
        CodebookSource::Reference => SceneSpec::all().map(|s| render(&s)).collect(),
    };
    let images: Vec<&Tensor> = match config.codebook_source {
        CodebookSource::Train => manifest.records.iter().map(|r| &r.image).collect(),
        CodebookSource::Reference => reference.iter().collect(),
    };
    Vocabulary::with_codebook(fit_codebook(&images, config.codebook_size, config.kmeans_iters, seed)?)
}

pub fn examples_for(manifest: &DatasetManifest, vocab: &Vocabulary) -> Result<Vec<TrainExample>> {
    manifest
        .records
        .iter()
        .map(|r| {
            Ok(TrainExample {
                text_ids: vocab.encode_text(&r.caption)?,
                image_ids: vocab.tokenize_image(&r.image)?,
                image: r.image.clone(),
            })
        })
        .collect()
}

/// Generates the training set, cleans it when `noise_aware` is on, and fits
/// the codebook on the result.
pub fn prepare_data(config: &RunConfig) -> Result<PreparedData> {
    let raw = generate_dataset(config.seed, config.count, config.corruption_rate, config.noise_level)?;
    let (cleaned, report) = if config.noise_aware {
        let (c, r) = clean(&raw, config)?;
        (c, Some(r))
    } else {
        (raw.clone(), None)
    };
    let vocab = codebook_for(&cleaned, config, stream(config.seed, SALT_CODEBOOK).next_u64())?;
    Ok(PreparedData {
        raw,
        cleaned,
        report,
        vocab,
    })
}

fn clean(raw: &DatasetManifest, config: &RunConfig) -> Result<(DatasetManifest, CleaningReport)> {
    let channel = MeasurementChannel {
        noise_level: config.remeasure_noise,
        caption_swap_prob: config.remeasure_swap,
    };
    let mut remeasure_rng = stream(config.seed, SALT_REMEASURE);
    let mut remeasure = |r: &DatasetRecord| Ok(channel.measure(r, &mut remeasure_rng));
    let (cleaned, report, _) = match config.scorer {
        ScorerKind::Centroid => {
            let scorer = CentroidScorer::fit(&raw.records)?;
            clean_training_set(raw, &config.policy(), &mut |r| scorer.score(r), &mut remeasure, config.tau)?
        }
        ScorerKind::Loss => {
            let (model, vocab) = train_scorer(raw, config)?;
            let mut score = |r: &DatasetRecord| {
                model.example_loss(&vocab, &vocab.encode_text(&r.caption)?, &vocab.tokenize_image(&r.image)?)
            };
            clean_training_set(raw, &config.policy(), &mut score, &mut remeasure, config.tau)?
        }
    };
    Ok((cleaned, report))
}

/// Short cross-entropy-only run on the raw data whose per-record losses
/// act as suspicion scores.
fn train_scorer(raw: &DatasetManifest, config: &RunConfig) -> Result<(TokenModel, Vocabulary)> {
    let mut rng = stream(config.seed, SALT_SCORER);
    let vocab = codebook_for(raw, config, rng.next_u64())?;
    let examples = examples_for(raw, &vocab)?;
    let mut model = TokenModel::init(config.model_config(&vocab), rng.next_u64())?;
    let mut opt = OptimizerState::new(model.params.tensors(), config.adamw());
    let extractor = FeatureExtractor::new();
    let ctx = LossContext {
        vocab: &vocab,
        extractor: &extractor,
        weights: LossWeights::cross_entropy_only(),
    };
    for step in 0..config.score_steps {
        let batch = draw_batch(&examples, config.batch, &mut rng);
        let l = model.train_step(&mut opt, &batch, &ctx, &mut rng)?;
        if !l.total.is_finite() {
            return Err(Error::NonFiniteLoss { step: step as u64 });
        }
    }
    Ok((model, vocab))
}

fn draw_batch(examples: &[TrainExample], size: usize, rng: &mut Rng) -> Vec<TrainExample> {
    (0..size).map(|_| examples[rng.below(examples.len())].clone()).collect()
}

/// Flow-pathway training state.
#[derive(Debug, Clone)]
pub struct FlowTrainer {
    pub net: VelocityNet,
    pub optimizer: OptimizerState,
    pub rng: Rng,
    pub step: u64,
}

/// Resumable training state for one run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: RunConfig,
    pub vocab: Vocabulary,
    pub model: TokenModel,
    pub optimizer: OptimizerState,
    pub rng: Rng,
    pub token_step: u64,
    pub flow: Option<FlowTrainer>,
    pub extractor: FeatureExtractor,
    examples: Vec<TrainExample>,
}

impl Trainer {
    pub fn new(config: &RunConfig, data: &PreparedData) -> Result<Self> {
        let vocab = data.vocab.clone();
        let model = TokenModel::init(config.model_config(&vocab), stream(config.seed, SALT_MODEL_INIT).next_u64())?;
        let optimizer = OptimizerState::new(model.params.tensors(), config.adamw());
        let flow = if config.rectified_flow {
            let net = VelocityNet::init(config.flow_config(), stream(config.seed, SALT_FLOW_INIT).next_u64())?;
            Some(FlowTrainer {
                optimizer: OptimizerState::new(net.params.tensors(), config.flow_adamw()),
                net,
                rng: stream(config.seed, SALT_FLOW_TRAIN),
                step: 0,
            })
        } else {
            None
        };
        Ok(Trainer {
            examples: examples_for(&data.cleaned, &vocab)?,
            config: config.clone(),
            vocab,
            model,
            optimizer,
            rng: stream(config.seed, SALT_TRAIN),
            token_step: 0,
            flow,
            extractor: FeatureExtractor::new(),
        })
    }

    /// Rebuilds the trainer saved in `ckpt`; `data` must come from
    /// [`prepare_data`] on the same config.
    pub fn from_checkpoint(ckpt: &Checkpoint, data: &PreparedData) -> Result<Self> {
        if ckpt.vocab != data.vocab {
            return Err(Error::format("checkpoint", "vocabulary does not match the prepared data"));
        }
        let mut t = Trainer::for_inference(ckpt)?;
        t.examples = examples_for(&data.cleaned, &ckpt.vocab)?;
        Ok(t)
    }

    /// Restores a checkpoint for sampling and evaluation only; it holds no
    /// training examples, so further training steps are an error.
    pub fn for_inference(ckpt: &Checkpoint) -> Result<Self> {
        let config = ckpt.config.clone();
        let model = TokenModel::from_parts(config.model_config(&ckpt.vocab), ckpt.params.clone())?;
        let flow = match (&ckpt.flow, config.rectified_flow) {
            (Some(f), true) => Some(FlowTrainer {
                net: VelocityNet::from_parts(config.flow_config(), f.params.clone())?,
                optimizer: f.optimizer.clone(),
                rng: Rng::from_state(f.rng_state),
                step: f.step,
            }),
            (None, false) => None,
            _ => return Err(Error::format("checkpoint", "flow block does not match the rectified_flow switch")),
        };
        Ok(Trainer {
            examples: Vec::new(),
            config,
            vocab: ckpt.vocab.clone(),
            model,
            optimizer: ckpt.optimizer.clone(),
            rng: Rng::from_state(ckpt.rng_state),
            token_step: ckpt.token_step,
            flow,
            extractor: FeatureExtractor::new(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            token_step: self.token_step,
            rng_state: self.rng.state(),
            params: self.model.params.clone(),
            optimizer: self.optimizer.clone(),
            flow: self.flow.as_ref().map(|f| FlowState {
                step: f.step,
                rng_state: f.rng.state(),
                params: f.net.params.clone(),
                optimizer: f.optimizer.clone(),
            }),
        }
    }

    pub fn examples(&self) -> &[TrainExample] {
        &self.examples
    }

    /// Runs up to `n` more token-model steps, stopping at `config.steps`.
    pub fn train_tokens(&mut self, n: usize, log: &mut dyn FnMut(u64, &StepLosses)) -> Result<Vec<StepLosses>> {
        let ctx = LossContext {
            vocab: &self.vocab,
            extractor: &self.extractor,
            weights: self.config.loss_weights(),
        };
        if self.examples.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut out = Vec::new();
        while out.len() < n && self.token_step < self.config.steps as u64 {
            let batch = draw_batch(&self.examples, self.config.batch, &mut self.rng);
            let l = self.model.train_step(&mut self.optimizer, &batch, &ctx, &mut self.rng)?;
            if !l.total.is_finite() {
                return Err(Error::NonFiniteLoss { step: self.token_step });
            }
            log(self.token_step, &l);
            self.token_step += 1;
            out.push(l);
        }
        Ok(out)
    }

    /// Text conditions for the flow: the token model's pooled caption
    /// embeddings, frozen once token training is over.
    pub fn flow_conditions(&self) -> Result<Vec<Vec<f64>>> {
        self.examples.iter().map(|e| self.model.embed_text(&self.vocab, &e.text_ids)).collect()
    }

    /// Runs up to `n` more flow steps, stopping at `config.flow_train_steps`.
    /// A no-op without the flow pathway.
    pub fn train_flow(&mut self, n: usize, log: &mut dyn FnMut(u64, f64)) -> Result<Vec<f64>> {
        let Some(flow) = self.flow.as_mut() else {
            return Ok(Vec::new());
        };
        if self.examples.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let conds: Vec<Vec<f64>> = self
            .examples
            .iter()
            .map(|e| self.model.embed_text(&self.vocab, &e.text_ids))
            .collect::<Result<_>>()?;
        let mut out = Vec::new();
        while out.len() < n && flow.step < self.config.flow_train_steps as u64 {
            let idx: Vec<usize> = (0..self.config.flow_batch).map(|_| flow.rng.below(self.examples.len())).collect();
            let images: Vec<&Tensor> = idx.iter().map(|&i| &self.examples[i].image).collect();
            let c: Vec<Vec<f64>> = idx.iter().map(|&i| conds[i].clone()).collect();
            let loss = flow.net.train_step(&mut flow.optimizer, &images, &c, &mut flow.rng)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { step: flow.step });
            }
            log(flow.step, loss);
            flow.step += 1;
            out.push(loss);
        }
        Ok(out)
    }
}

/// Everything a finished run produces.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub trainer: Trainer,
    pub data: PreparedData,
    pub token_losses: Vec<StepLosses>,
    pub flow_losses: Vec<f64>,
    pub train_seconds: f64,
}

/// Prepares data and trains both pathways to completion.
pub fn train_run(config: &RunConfig, log: &mut dyn FnMut(&str)) -> Result<TrainOutcome> {
    let start = Instant::now();
    let data = prepare_data(config)?;
    if let Some(r) = &data.report {
        log(&format!("cleaning: {} of {} records replaced", r.replaced(), r.rows.len()));
    }
    let mut trainer = Trainer::new(config, &data)?;
    log(&format!("token model: {} parameters", trainer.model.params.count()));
    let every = config.log_every as u64;
    let token_losses = trainer.train_tokens(config.steps, &mut |s, l| {
        if s % every == 0 || s + 1 == config.steps as u64 {
            log(&format!("step {s} loss {:.4} ce {:.4}", l.total, l.cross_entropy));
        }
    })?;
    let flow_losses = trainer.train_flow(config.flow_train_steps, &mut |s, l| {
        if s % every == 0 {
            log(&format!("flow step {s} loss {l:.4}"));
        }
    })?;
    Ok(TrainOutcome {
        trainer,
        data,
        token_losses,
        flow_losses,
        train_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Token pathway for one caption: sample, optionally refine, decode.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSample {
    pub generated: Vec<usize>,
    pub refined: Vec<usize>,
    pub image: Tensor,
    pub unrefined_image: Tensor,
}

pub fn sample_tokens(model: &TokenModel, vocab: &Vocabulary, config: &RunConfig, caption: &str, seed: u64) -> Result<TokenSample> {
    let text = vocab.encode_text(caption)?;
    let generated = model.generate(vocab, &text, &config.sampler(seed))?;
    let refined = if model.config.refinement {
        model.refine(vocab, &text, &generated, model.config.refine_passes)?
    } else {
        generated.clone()
    };
    Ok(TokenSample {
        image: vocab.depatchify(&refined)?,
        unrefined_image: vocab.depatchify(&generated)?,
        generated,
        refined,
    })
}

/// Mean next-token cross-entropy of the token model over `eval`, each record
/// tokenized with the trainer's own vocabulary.
pub fn validation_loss(trainer: &Trainer, eval: &DatasetManifest) -> Result<f64> {
    let (model, vocab) = (&trainer.model, &trainer.vocab);
    let losses = eval
        .records
        .iter()
        .map(|r| model.example_loss(vocab, &vocab.encode_text(&r.caption)?, &vocab.tokenize_image(&r.image)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean(&losses))
}

/// Held-out clean records for evaluation.
pub fn eval_set(config: &RunConfig) -> Result<DatasetManifest> {
    generate_dataset(config.eval_seed, config.eval_count, 0.0, 0.0)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Computes the evaluation report for a trained state on `eval`.
pub fn evaluate(trainer: &Trainer, eval: &DatasetManifest) -> Result<MetricsReport> {
    let config = &trainer.config;
    let (model, vocab, fx) = (&trainer.model, &trainer.vocab, &trainer.extractor);
    let records = &eval.records;
    let mut seed_rng = stream(config.seed, SALT_EVAL);
    let truth: Vec<Tensor> = records.iter().map(|r| render(&r.spec)).collect();
    let captions: Vec<&str> = records.iter().map(|r| r.caption.as_str()).collect();

    let start = Instant::now();
    let mut token_images = Vec::new();
    let mut unrefined = Vec::new();
    for c in &captions {
        let s = sample_tokens(model, vocab, config, c, seed_rng.next_u64())?;
        token_images.push(s.image);
        unrefined.push(s.unrefined_image);
    }
    let token_ms = start.elapsed().as_secs_f64() * 1000.0 / records.len() as f64;

    let mut report = MetricsReport::new(config);
    let ssim_all = |imgs: &[Tensor]| -> Result<Vec<f64>> { imgs.iter().zip(&truth).map(|(a, b)| ssim(a, b)).collect() };
    let ssim_token = ssim_all(&token_images)?;
    report.set("toy_fid_token", Metric::Value(toy_fid(&token_images, &truth, fx)?));
    report.set("ssim_token", Metric::Value(mean(&ssim_token)));
    report.set("ssim_token_unrefined", Metric::Value(mean(&ssim_all(&unrefined)?)));
    let recon: Vec<Tensor> = truth
        .iter()
        .map(|t| vocab.depatchify(&vocab.tokenize_image(t)?))
        .collect::<Result<_>>()?;
    report.set("ssim_reconstruction", Metric::Value(mean(&ssim_all(&recon)?)));
    report.set("inference_ms_token", Metric::Value(token_ms));

    match &trainer.flow {
        Some(f) => {
            let conds: Vec<Vec<f64>> = records
                .iter()
                .map(|r| model.embed_text(vocab, &vocab.encode_text(&r.caption)?))
                .collect::<Result<_>>()?;
            let start = Instant::now();
            let samples = sample_batch(&f.net, &conds, config.flow_steps, config.flow_integrator, seed_rng.next_u64())?;
            let flow_ms = start.elapsed().as_secs_f64() * 1000.0 / records.len() as f64;
            let flow_images: Vec<Tensor> = samples
                .into_iter()
                .map(|s| Tensor::new(truth[0].shape().to_vec(), s.clamped))
                .collect::<Result<_>>()?;
            report.set("toy_fid_flow", Metric::Value(toy_fid(&flow_images, &truth, fx)?));
            report.set("ssim_flow", Metric::Value(mean(&ssim_all(&flow_images)?)));
            report.set("inference_ms_flow", Metric::Value(flow_ms));
            report.set(
                "straightness",
                Metric::Value(crate::flow::straightness(&f.net, &conds[0], 8, seed_rng.next_u64())?),
            );
        }
        None => {
            for k in ["toy_fid_flow", "ssim_flow", "inference_ms_flow", "straightness"] {
                report.set(k, Metric::Absent);
            }
        }
    }

    let truth_refs: Vec<&Tensor> = truth.iter().collect();
    let scores = alignment_matrix(model, vocab, &captions, &truth_refs)?;
    let n = records.len();
    let matched: Vec<f64> = (0..n).map(|i| scores[i][i]).collect();
    let caps = &captions;
    let mismatched: Vec<f64> = (0..n)
        .flat_map(|i| (0..n).filter(move |&j| caps[j] != caps[i]).map(move |j| (i, j)))
        .map(|(i, j)| scores[i][j])
        .collect();
    report.set("alignment_matched", Metric::Value(mean(&matched)));
    report.set(
        "alignment_mismatched",
        if mismatched.is_empty() { Metric::Absent } else { Metric::Value(mean(&mismatched)) },
    );
    // Captions repeat in small eval sets; any image with an identical
    // caption counts as the target.
    let truth_idx: Vec<usize> = (0..n).map(|i| captions.iter().position(|c| *c == captions[i]).unwrap()).collect();
    let dedup: Vec<Vec<f64>> = scores
        .iter()
        .map(|row| {
            (0..n)
                .map(|j| {
                    let first = truth_idx[j];
                    if first == j { row[j] } else { f64::NEG_INFINITY }
                })
                .collect()
        })
        .collect();
    let ranked = ranking_metrics(&finite_rows(&dedup), &truth_idx, &[1, 5, 10])?;
    for (k, v) in &ranked.recall_at {
        report.set(&format!("recall_at_{k}"), Metric::Value(*v));
    }
    report.set("mrr", Metric::Value(ranked.mrr));
    report.set("ndcg", Metric::Value(ranked.ndcg));
    // Image-to-caption retrieval; BLEU of the best caption against the truth.
    let bleu: Vec<f64> = (0..n)
        .map(|j| {
            let best = (0..n).fold(0, |b, i| if scores[i][j] > scores[b][j] { i } else { b });
            bleu4(captions[best], &[captions[j]])
        })
        .collect();
    report.set("bleu_retrieved_caption", Metric::Value(mean(&bleu)));
    Ok(report)
}

/// Replaces masked-out (−∞) candidates by a score below every real one.
fn finite_rows(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|r| r.iter().map(|&v| if v.is_finite() { v } else { -2.0 }).collect())
        .collect()
}

/// Sanity check used by sampling: the caption must parse, and its render is
/// the reference image.
pub fn reference_for(caption: &str) -> Result<Tensor> {
    let spec = parse_caption(caption)?;
    debug_assert_eq!(caption_of(&spec), caption);
    Ok(render(&spec))
}
