//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Every key has a default, unknown
//! or repeated keys are errors, and [`RunConfig::to_text`] writes every key
//! in a fixed order so that equal configs serialize to equal bytes.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::flow::{FlowConfig, Integrator};
use crate::model::{LossWeights, ModelConfig, SamplerConfig};
use crate::noise::{AveragingRule, RemeasurePolicy};
use crate::optim::AdamWConfig;

pub const SEED_ENV: &str = "VLLM_LAB_SEED";

/// Which signal flags suspicious training records.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScorerKind {
    /// Per-record loss of a model briefly trained on the raw data.
    Loss,
    /// Distance to the caption's class centroid.
    Centroid,
}

/// Which images the tokenizer codebook is fitted on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CodebookSource {
    /// The (possibly cleaned) training images.
    Train,
    /// Clean renders of every scene spec, independent of the training set.
    Reference,
}

trait ConfigValue: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! plain_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                s.parse().map_err(|e| format!("{e}"))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}
plain_value!(u64, usize);

impl ConfigValue for f64 {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err("value must be finite".into())
        }
    }
    fn render(&self) -> String {
        // Debug formatting round-trips exactly.
        format!("{self:?}")
    }
}

impl ConfigValue for bool {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        match s {
            "on" | "true" | "1" | "yes" => Ok(true),
            "off" | "false" | "0" | "no" => Ok(false),
            _ => Err(format!("expected on/off, got {s:?}")),
        }
    }
    fn render(&self) -> String {
        if *self { "on" } else { "off" }.into()
    }
}

impl ConfigValue for Integrator {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        Integrator::from_str(s).map_err(|_| format!("expected euler or heun, got {s:?}"))
    }
    fn render(&self) -> String {
        match self {
            Integrator::Euler => "euler",
            Integrator::Heun => "heun",
        }
        .into()
    }
}

impl ConfigValue for AveragingRule {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        match s {
            "dispersed" => Ok(AveragingRule::WhenDispersed),
            "always" => Ok(AveragingRule::Always),
            _ => Err(format!("expected dispersed or always, got {s:?}")),
        }
    }
    fn render(&self) -> String {
        match self {
            AveragingRule::WhenDispersed => "dispersed",
            AveragingRule::Always => "always",
        }
        .into()
    }
}

impl ConfigValue for ScorerKind {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        match s {
            "loss" => Ok(ScorerKind::Loss),
            "centroid" => Ok(ScorerKind::Centroid),
            _ => Err(format!("expected loss or centroid, got {s:?}")),
        }
    }
    fn render(&self) -> String {
        match self {
            ScorerKind::Loss => "loss",
            ScorerKind::Centroid => "centroid",
        }
        .into()
    }
}

impl ConfigValue for CodebookSource {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(CodebookSource::Train),
            "reference" => Ok(CodebookSource::Reference),
            _ => Err(format!("expected train or reference, got {s:?}")),
        }
    }
    fn render(&self) -> String {
        match self {
            CodebookSource::Train => "train",
            CodebookSource::Reference => "reference",
        }
        .into()
    }
}

macro_rules! run_config {
    ($($(#[doc = $doc:literal])* $name:ident : $t:ty = $default:expr;)*) => {
        #[derive(Debug, Clone, PartialEq)]
        pub struct RunConfig {
            $($(#[doc = $doc])* pub $name: $t,)*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                RunConfig { $($name: $default,)* }
            }
        }

        impl RunConfig {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($name)),*];

            fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
                match key {
                    $(stringify!($name) => self.$name = <$t as ConfigValue>::parse_value(value)?,)*
                    _ => return Err(format!("unknown key {key:?}")),
                }
                Ok(())
            }

            /// Every key in declaration order, one per line.
            pub fn to_text(&self) -> String {
                let mut s = String::new();
                $(
                    s.push_str(stringify!($name));
                    s.push_str(" = ");
                    s.push_str(&ConfigValue::render(&self.$name));
                    s.push('\n');
                )*
                s
            }

            /// Commented listing of every key and its default.
            pub fn documented_defaults() -> String {
                let d = RunConfig::default();
                let mut s = String::new();
                $(
                    $(
                        s.push_str("#");
                        s.push_str($doc);
                        s.push('\n');
                    )*
                    s.push_str(stringify!($name));
                    s.push_str(" = ");
                    s.push_str(&ConfigValue::render(&d.$name));
                    s.push('\n');
                )*
                s
            }
        }
    };
}

run_config! {
    /// Dataset generator seed; every other seed derives from it.
    seed: u64 = 0;
    /// Number of training records.
    count: usize = 64;
    /// Probability that a record is corrupted.
    corruption_rate: f64 = 0.0;
    /// Pixel-noise stddev of corrupted records.
    noise_level: f64 = 0.5;
    /// Codebook size K.
    codebook_size: usize = 128;
    /// Lloyd iterations for the codebook.
    kmeans_iters: usize = 20;
    /// train or reference.
    codebook_source: CodebookSource = CodebookSource::Train;
    embed_dim: usize = 64;
    n_heads: usize = 4;
    n_layers: usize = 2;
    ffn_dim: usize = 128;
    max_seq_len: usize = 80;
    /// Refinement passes F at sampling time.
    refine_passes: usize = 2;
    /// Must stay 0.
    dropout: f64 = 0.0;
    /// Token-model optimizer steps.
    steps: usize = 2000;
    batch: usize = 16;
    lr: f64 = 1e-3;
    weight_decay: f64 = 0.01;
    /// Perceptual loss weight.
    lambda_perc: f64 = 0.1;
    /// Refinement-head loss weight.
    lambda_refine: f64 = 0.5;
    /// Contrastive alignment loss weight.
    lambda_align: f64 = 0.2;
    /// Examples per batch that feed the refine and align terms.
    aux_examples: usize = 8;
    /// Fraction of image tokens randomized for the refine term.
    refine_corruption: f64 = 0.3;
    align_temperature: f64 = 0.1;
    /// Ablation switch: train and sample the continuous flow pathway.
    rectified_flow: bool = true;
    /// Ablation switch: refinement head and passes.
    refinement: bool = true;
    /// Ablation switch: bidirectional attention inside the text prefix.
    bidirectional_text: bool = true;
    /// Ablation switch: clean the training set before training.
    noise_aware: bool = false;
    /// Suspicion threshold on robust z-scores.
    tau: f64 = 3.0;
    /// Re-measurement rounds R.
    rounds: usize = 3;
    /// Relative dispersion threshold for test-time averaging.
    delta: f64 = 0.15;
    /// dispersed: average only dispersed re-measurements; always: average every suspicious instance.
    averaging: AveragingRule = AveragingRule::WhenDispersed;
    /// loss or centroid.
    scorer: ScorerKind = ScorerKind::Loss;
    /// Steps of the scoring model used by the loss scorer.
    score_steps: usize = 300;
    /// Pixel-noise stddev of the re-measurement channel.
    remeasure_noise: f64 = 0.2;
    /// Caption mislabel probability of the re-measurement channel.
    remeasure_swap: f64 = 0.1;
    flow_hidden: usize = 256;
    /// Flow optimizer steps.
    flow_train_steps: usize = 3000;
    flow_batch: usize = 16;
    flow_lr: f64 = 2e-3;
    /// Sampler steps N.
    flow_steps: usize = 50;
    flow_integrator: Integrator = Integrator::Euler;
    /// Sampling temperature; 0 is greedy.
    temperature: f64 = 1.0;
    /// 0 disables top-k filtering.
    top_k: usize = 0;
    /// Held-out evaluation records (toy-FID needs at least 17).
    eval_count: usize = 32;
    eval_seed: u64 = 1000;
    flow2d_steps: usize = 3000;
    flow2d_batch: usize = 256;
    flow2d_samples: usize = 2000;
    flow2d_probes: usize = 64;
    flow2d_lr: f64 = 1e-3;
    /// Log the loss every this many steps.
    log_every: usize = 100;
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| Error::Config { line: line_no, message };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(err(format!("duplicate key {key:?}")));
            }
            cfg.set(key, value).map_err(|m| err(format!("{key}: {m}")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        RunConfig::parse(&std::fs::read_to_string(path)?)
    }

    /// Applies `VLLM_LAB_SEED` when it is set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v.trim().parse().map_err(|_| Error::Config {
                line: 0,
                message: format!("{SEED_ENV}={v:?} is not an unsigned integer"),
            })?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config { line: 0, message: m.to_string() });
        if self.count == 0 || self.batch == 0 || self.codebook_size == 0 || self.eval_count == 0 {
            return bad("count, batch, codebook_size and eval_count must be positive");
        }
        if !(0.0..=1.0).contains(&self.corruption_rate) || self.noise_level < 0.0 {
            return bad("corruption_rate must lie in [0, 1] and noise_level be >= 0");
        }
        if self.flow_steps == 0 || self.flow_batch == 0 || self.flow_hidden == 0 {
            return bad("flow_steps, flow_batch and flow_hidden must be positive");
        }
        if self.log_every == 0 {
            return bad("log_every must be positive");
        }
        self.policy().validate().map_err(|e| Error::Config { line: 0, message: e.to_string() })?;
        let probe = ModelConfig {
            text_vocab_size: crate::tokenizer::TEXT_VOCAB_SIZE,
            image_vocab_size: self.codebook_size,
            ..self.model_template()
        };
        probe.validate().map_err(|e| Error::Config { line: 0, message: e.to_string() })
    }

    fn model_template(&self) -> ModelConfig {
        ModelConfig {
            embed_dim: self.embed_dim,
            n_heads: self.n_heads,
            n_layers: self.n_layers,
            ffn_dim: self.ffn_dim,
            max_seq_len: self.max_seq_len,
            refine_passes: self.refine_passes,
            text_vocab_size: 0,
            image_vocab_size: 0,
            dropout: self.dropout,
            refinement: self.refinement,
            bidirectional_text: self.bidirectional_text,
        }
    }

    pub fn model_config(&self, vocab: &crate::tokenizer::Vocabulary) -> ModelConfig {
        ModelConfig {
            text_vocab_size: vocab.text_vocab_size(),
            image_vocab_size: vocab.image_vocab_size(),
            ..self.model_template()
        }
    }

    pub fn flow_config(&self) -> FlowConfig {
        FlowConfig {
            hidden: self.flow_hidden,
            steps: self.flow_steps,
            integrator: self.flow_integrator,
            ..FlowConfig::image(self.embed_dim)
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            perceptual: self.lambda_perc,
            refine: if self.refinement { self.lambda_refine } else { 0.0 },
            align: self.lambda_align,
            refine_corruption: self.refine_corruption,
            align_temperature: self.align_temperature,
            aux_examples: self.aux_examples,
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.lr,
            weight_decay: self.weight_decay,
            ..Default::default()
        }
    }

    pub fn flow_adamw(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.flow_lr,
            weight_decay: self.weight_decay,
            ..Default::default()
        }
    }

    pub fn policy(&self) -> RemeasurePolicy {
        RemeasurePolicy {
            rounds: self.rounds,
            delta: self.delta,
            rule: self.averaging,
        }
    }

    pub fn sampler(&self, seed: u64) -> SamplerConfig {
        SamplerConfig {
            temperature: self.temperature,
            top_k: self.top_k,
            seed,
        }
    }

    /// SHA-256 of the canonical text form.
    pub fn flow2d_settings(&self) -> crate::flow::Flow2dSettings {
        crate::flow::Flow2dSettings {
            steps: self.flow2d_steps,
            batch: self.flow2d_batch,
            samples: self.flow2d_samples,
            probes: self.flow2d_probes,
            lr: self.flow2d_lr,
            seed: self.seed,
        }
    }

    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.to_text().as_bytes()))
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
