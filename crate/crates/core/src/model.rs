//! Transformer over multimodal sequences with a hybrid attention mask.
//!
//! One shared pre-norm stack reads `[BOS, text…, SEP, image…, EOS]`.
//! In `Generate` mode the prefix `BOS..=SEP` attends bidirectionally within
//! itself while image positions (and the trailing EOS) attend to the whole
//! prefix plus earlier image positions, so image tokens can be sampled left
//! to right. `Refine` mode lifts every restriction and feeds a separate
//! head that re-scores the tokens already in place.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::metrics::FeatureExtractor;
use crate::optim::{adamw_step, OptimizerState};
use crate::params::{Bound, Parameters};
use crate::rng::Rng;
use crate::tensor::{softmax_rows, Tensor};
use crate::tokenizer::{patch_pixel_index, MultimodalSequence, Vocabulary, IMAGE_TOKENS, PATCH_DIM};

/// Minimum sequence length: BOS + 7 caption words + SEP + 64 image + EOS.
pub const MIN_SEQ_LEN: usize = 74;
const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    pub refine_passes: usize,
    pub text_vocab_size: usize,
    pub image_vocab_size: usize,
    pub dropout: f64,
    /// Allocate the refinement head.
    pub refinement: bool,
    /// Bidirectional attention inside the text prefix; causal when off.
    pub bidirectional_text: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 64,
            n_heads: 4,
            n_layers: 2,
            ffn_dim: 128,
            max_seq_len: 80,
            refine_passes: 2,
            text_vocab_size: 22,
            image_vocab_size: 128,
            dropout: 0.0,
            refinement: true,
            bidirectional_text: true,
        }
    }
}

impl ModelConfig {
    pub fn for_vocab(vocab: &Vocabulary) -> Self {
        ModelConfig {
            text_vocab_size: vocab.text_vocab_size(),
            image_vocab_size: vocab.image_vocab_size(),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::OutOfRange(m));
        if self.embed_dim == 0 || self.n_heads == 0 || self.embed_dim % self.n_heads != 0 {
            return bad(format!("embed_dim {} not divisible by n_heads {}", self.embed_dim, self.n_heads));
        }
        if self.max_seq_len < MIN_SEQ_LEN {
            return bad(format!("max_seq_len {} < {MIN_SEQ_LEN}", self.max_seq_len));
        }
        if self.n_layers == 0 || self.ffn_dim == 0 || self.image_vocab_size == 0 {
            return bad("n_layers, ffn_dim and image_vocab_size must be positive".into());
        }
        if self.dropout != 0.0 {
            return bad("dropout is not supported; set it to 0".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }

    /// Closed-form parameter count.
    pub fn parameter_count(&self) -> usize {
        let (d, f, k) = (self.embed_dim, self.ffn_dim, self.image_vocab_size);
        let vocab = self.text_vocab_size + k;
        let per_layer = 2 * d + (d * 3 * d + 3 * d) + (d * d + d) + 2 * d + (d * f + f) + (f * d + d);
        let heads = (d * k + k) * if self.refinement { 2 } else { 1 };
        vocab * d + self.max_seq_len * d + self.n_layers * per_layer + 2 * d + heads + 2 * d * d
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    Generate,
    Refine,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    pub len: usize,
    pub mode: MaskMode,
    /// Row-major `[len, len]`; `(i, j)` true iff position `i` may attend to `j`.
    pub allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.len + j]
    }

    /// Top-left `n × n` block.
    pub fn prefix(&self, n: usize) -> AttentionMask {
        let allowed = (0..n)
            .flat_map(|i| self.allowed[i * self.len..i * self.len + n].iter().copied())
            .collect();
        AttentionMask {
            len: n,
            mode: self.mode,
            allowed,
        }
    }
}

pub fn hybrid_mask(text_len: usize, image_len: usize, mode: MaskMode) -> AttentionMask {
    hybrid_mask_with(text_len, image_len, mode, true)
}

/// Builds the attention mask for `[BOS, text, SEP, image, EOS]`.
///
/// With no image region the whole sequence is one bidirectional block.
/// Otherwise prefix rows (`≤ SEP`) see the prefix only; image rows and the
/// final EOS see the prefix and every image position up to themselves.
/// When `bidirectional_text` is false the prefix is causal as well.
pub fn hybrid_mask_with(text_len: usize, image_len: usize, mode: MaskMode, bidirectional_text: bool) -> AttentionMask {
    let len = text_len + image_len + 3;
    let sep = text_len + 1;
    let mut allowed = vec![false; len * len];
    for i in 0..len {
        for j in 0..len {
            allowed[i * len + j] = match mode {
                MaskMode::Refine => true,
                MaskMode::Generate if !bidirectional_text => j <= i,
                MaskMode::Generate if image_len == 0 => true,
                MaskMode::Generate if i <= sep => j <= sep,
                MaskMode::Generate => j <= sep || j <= i,
            };
        }
    }
    AttentionMask { len, mode, allowed }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// `[L, image_vocab]`. In `Generate` mode row `p` scores the token at
    /// `p + 1`; in `Refine` mode row `p` re-scores the token at `p`.
    pub logits: Tensor,
    pub pooled_text: Vec<f64>,
    pub pooled_image: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenModel {
    pub config: ModelConfig,
    pub params: Parameters,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub temperature: f64,
    pub top_k: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            temperature: 1.0,
            top_k: 0,
            seed: 0,
        }
    }
}

/// One supervised example for the token model.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub text_ids: Vec<usize>,
    /// Shared-space image ids (length 64).
    pub image_ids: Vec<usize>,
    /// Ground-truth image for the perceptual term.
    pub image: Tensor,
}

/// Weights of the auxiliary loss terms. All zero gives plain next-token
/// cross-entropy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub perceptual: f64,
    pub refine: f64,
    pub align: f64,
    /// Fraction of image tokens replaced at random for the refine term.
    pub refine_corruption: f64,
    pub align_temperature: f64,
    /// The refine and align terms only see the first `aux_examples`
    /// examples of each batch.
    pub aux_examples: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            perceptual: 0.1,
            refine: 0.5,
            align: 0.2,
            refine_corruption: 0.3,
            align_temperature: 0.1,
            aux_examples: 8,
        }
    }
}

impl LossWeights {
    pub fn cross_entropy_only() -> Self {
        LossWeights {
            perceptual: 0.0,
            refine: 0.0,
            align: 0.0,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepLosses {
    pub total: f64,
    pub cross_entropy: f64,
    pub perceptual: f64,
    pub refine: f64,
    pub align: f64,
}

/// Auxiliary inputs of the loss that live outside the model.
pub struct LossContext<'a> {
    pub vocab: &'a Vocabulary,
    pub extractor: &'a FeatureExtractor,
    pub weights: LossWeights,
}

fn layer_name(l: usize, n: &str) -> String {
    format!("layer{l}.{n}")
}

impl TokenModel {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let (d, f, k) = (config.embed_dim, config.ffn_dim, config.image_vocab_size);
        let vocab = config.text_vocab_size + k;
        let mut p = Parameters::new();
        let mut w = |shape: &[usize]| Tensor::randn(shape, INIT_STD, &mut rng);
        p.push("tok_emb", w(&[vocab, d]));
        p.push("pos_emb", w(&[config.max_seq_len, d]));
        for l in 0..config.n_layers {
            p.push(layer_name(l, "ln1_g"), Tensor::ones(&[d]));
            p.push(layer_name(l, "ln1_b"), Tensor::zeros(&[d]));
            p.push(layer_name(l, "w_qkv"), w(&[d, 3 * d]));
            p.push(layer_name(l, "b_qkv"), Tensor::zeros(&[3 * d]));
            p.push(layer_name(l, "w_o"), w(&[d, d]));
            p.push(layer_name(l, "b_o"), Tensor::zeros(&[d]));
            p.push(layer_name(l, "ln2_g"), Tensor::ones(&[d]));
            p.push(layer_name(l, "ln2_b"), Tensor::zeros(&[d]));
            p.push(layer_name(l, "w_ff1"), w(&[d, f]));
            p.push(layer_name(l, "b_ff1"), Tensor::zeros(&[f]));
            p.push(layer_name(l, "w_ff2"), w(&[f, d]));
            p.push(layer_name(l, "b_ff2"), Tensor::zeros(&[d]));
        }
        p.push("lnf_g", Tensor::ones(&[d]));
        p.push("lnf_b", Tensor::zeros(&[d]));
        p.push("head_gen_w", w(&[d, k]));
        p.push("head_gen_b", Tensor::zeros(&[k]));
        if config.refinement {
            p.push("head_refine_w", w(&[d, k]));
            p.push("head_refine_b", Tensor::zeros(&[k]));
        }
        p.push("text_proj", w(&[d, d]));
        p.push("image_proj", w(&[d, d]));
        Ok(TokenModel { config, params: p })
    }

    pub fn from_parts(config: ModelConfig, params: Parameters) -> Result<Self> {
        config.validate()?;
        let reference = TokenModel::init(config.clone(), 0)?;
        if reference.params.names() != params.names()
            || reference
                .params
                .tensors()
                .iter()
                .zip(params.tensors())
                .any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::format("model parameters", "names or shapes do not match the config"));
        }
        Ok(TokenModel { config, params })
    }

    fn check_seq(&self, seq: &MultimodalSequence) -> Result<()> {
        if seq.len() > self.config.max_seq_len {
            return Err(Error::Overlength {
                len: seq.len(),
                max: self.config.max_seq_len,
            });
        }
        let vocab = self.config.text_vocab_size + self.config.image_vocab_size;
        if let Some(&id) = seq.ids.iter().find(|&&id| id >= vocab) {
            return Err(Error::IdOutOfSpace { id, space: "model vocabulary" });
        }
        Ok(())
    }

    /// Final-layer-norm states `[n, D]` for the first `n` ids of `ids`
    /// under the matching block of `mask`.
    fn hidden(&self, tape: &mut Tape, b: &Bound, ids: &[usize], mask: &AttentionMask) -> Result<Var> {
        let c = &self.config;
        let (d, dh, n) = (c.embed_dim, c.head_dim(), ids.len());
        let tok = tape.rows(b.var("tok_emb"), ids)?;
        let positions: Vec<usize> = (0..n).collect();
        let pos = tape.rows(b.var("pos_emb"), &positions)?;
        let mut x = tape.add(tok, pos)?;
        let allowed = if mask.len == n {
            mask.allowed.clone()
        } else {
            mask.prefix(n).allowed
        };
        let scale = 1.0 / (dh as f64).sqrt();
        for l in 0..c.n_layers {
            let v = |name: &str| b.var(&layer_name(l, name));
            let h = tape.layer_norm(x, v("ln1_g"), v("ln1_b"), LN_EPS)?;
            let qkv = tape.matmul(h, v("w_qkv"))?;
            let qkv = tape.add_row(qkv, v("b_qkv"))?;
            let mut heads = Vec::with_capacity(c.n_heads);
            for hd in 0..c.n_heads {
                let q = tape.columns(qkv, hd * dh, dh)?;
                let k = tape.columns(qkv, d + hd * dh, dh)?;
                let vv = tape.columns(qkv, 2 * d + hd * dh, dh)?;
                let s = tape.matmul_nt(q, k)?;
                let s = tape.scale(s, scale)?;
                let p = tape.masked_softmax(s, &allowed)?;
                heads.push(tape.matmul(p, vv)?);
            }
            let att = tape.concat_last(&heads)?;
            let att = tape.matmul(att, v("w_o"))?;
            let att = tape.add_row(att, v("b_o"))?;
            x = tape.add(x, att)?;
            let h = tape.layer_norm(x, v("ln2_g"), v("ln2_b"), LN_EPS)?;
            let h = tape.matmul(h, v("w_ff1"))?;
            let h = tape.add_row(h, v("b_ff1"))?;
            let h = tape.gelu(h)?;
            let h = tape.matmul(h, v("w_ff2"))?;
            let h = tape.add_row(h, v("b_ff2"))?;
            x = tape.add(x, h)?;
        }
        tape.layer_norm(x, b.var("lnf_g"), b.var("lnf_b"), LN_EPS)
    }

    /// Logits `[n, K]` for `ids` on `tape`, with parameters from `b`.
    pub fn logits_on_tape(&self, tape: &mut Tape, b: &Bound, ids: &[usize], mask: &AttentionMask) -> Result<Var> {
        let states = self.hidden(tape, b, ids, mask)?;
        self.head(tape, b, states, mask.mode)
    }

    /// Final-layer-norm hidden states `[L, D]`.
    pub fn hidden_states(&self, seq: &MultimodalSequence, mask: &AttentionMask) -> Result<Tensor> {
        self.check_seq(seq)?;
        let mut tape = Tape::new();
        let b = self.params.register(&mut tape, false);
        let states = self.hidden(&mut tape, &b, &seq.ids, mask)?;
        Ok(tape.take(states))
    }

    fn head(&self, tape: &mut Tape, b: &Bound, states: Var, mode: MaskMode) -> Result<Var> {
        let (w, bias) = match (mode, b.try_var("head_refine_w")) {
            (MaskMode::Refine, Some(w)) => (w, b.var("head_refine_b")),
            _ => (b.var("head_gen_w"), b.var("head_gen_b")),
        };
        let y = tape.matmul(states, w)?;
        tape.add_row(y, bias)
    }

    fn pooled(&self, tape: &mut Tape, b: &Bound, states: Var, rows: &[usize], proj: &str) -> Result<Var> {
        let r = tape.rows(states, rows)?;
        let m = tape.mean_rows(r)?;
        tape.matmul(m, b.var(proj))
    }

    fn text_rows(seq: &MultimodalSequence) -> Vec<usize> {
        (0..=seq.sep_position()).collect()
    }

    fn image_rows(seq: &MultimodalSequence) -> Vec<usize> {
        (seq.image_start()..seq.image_start() + seq.image_len).collect()
    }

    pub fn forward(&self, seq: &MultimodalSequence, mask: &AttentionMask) -> Result<ForwardOutput> {
        self.check_seq(seq)?;
        if mask.len != seq.len() {
            return Err(Error::Length(format!("mask for {} positions, sequence has {}", mask.len, seq.len())));
        }
        let mut tape = Tape::new();
        let b = self.params.register(&mut tape, false);
        let states = self.hidden(&mut tape, &b, &seq.ids, mask)?;
        let logits = self.head(&mut tape, &b, states, mask.mode)?;
        let pt = self.pooled(&mut tape, &b, states, &Self::text_rows(seq), "text_proj")?;
        let pooled_text = tape.value(pt).data().to_vec();
        let pooled_image = if seq.image_len > 0 {
            let pi = self.pooled(&mut tape, &b, states, &Self::image_rows(seq), "image_proj")?;
            tape.value(pi).data().to_vec()
        } else {
            vec![0.0; self.config.embed_dim]
        };
        Ok(ForwardOutput {
            logits: tape.take(logits),
            pooled_text,
            pooled_image,
        })
    }

    /// Pooled projection of a caption-only sequence.
    pub fn embed_text(&self, vocab: &Vocabulary, text_ids: &[usize]) -> Result<Vec<f64>> {
        let seq = vocab.fuse(text_ids, &[])?;
        let mask = self.generate_mask(&seq);
        Ok(self.forward(&seq, &mask)?.pooled_text)
    }

    /// Pooled projection of an image-only sequence `[BOS, SEP, image, EOS]`.
    pub fn embed_image(&self, vocab: &Vocabulary, image_ids: &[usize]) -> Result<Vec<f64>> {
        let seq = vocab.fuse(&[], image_ids)?;
        let mask = self.generate_mask(&seq);
        Ok(self.forward(&seq, &mask)?.pooled_image)
    }

    pub fn generate_mask(&self, seq: &MultimodalSequence) -> AttentionMask {
        hybrid_mask_with(seq.text_len, seq.image_len, MaskMode::Generate, self.config.bidirectional_text)
    }

    /// Samples 64 image tokens left to right. Temperature 0 is greedy.
    pub fn generate(&self, vocab: &Vocabulary, text_ids: &[usize], sampler: &SamplerConfig) -> Result<Vec<usize>> {
        let tv = vocab.text_vocab_size();
        let mut seq = vocab.fuse(text_ids, &vec![tv; IMAGE_TOKENS])?;
        self.check_seq(&seq)?;
        let mask = self.generate_mask(&seq);
        let start = seq.image_start();
        let mut rng = Rng::new(sampler.seed);
        let mut tape = Tape::new();
        let b = self.params.register(&mut tape, false);
        for k in 0..IMAGE_TOKENS {
            // Causality makes the prefix ending at the predicting position
            // sufficient.
            let n = start + k;
            let mark = tape.len();
            let states = self.hidden(&mut tape, &b, &seq.ids[..n], &mask)?;
            let last = tape.rows(states, &[n - 1])?;
            let logits = self.head(&mut tape, &b, last, MaskMode::Generate)?;
            let row = tape.value(logits).data().to_vec();
            let code = sample_row(&row, sampler, &mut rng);
            seq.ids[start + k] = tv + code;
            tape.truncate(mark);
        }
        Ok(seq.ids[start..start + IMAGE_TOKENS].to_vec())
    }

    /// Refinement logits `[64, K]` for the image region of `seq`.
    pub fn refine_logits(&self, seq: &MultimodalSequence) -> Result<Tensor> {
        let mask = hybrid_mask(seq.text_len, seq.image_len, MaskMode::Refine);
        let mut tape = Tape::new();
        let b = self.params.register(&mut tape, false);
        let states = self.hidden(&mut tape, &b, &seq.ids, &mask)?;
        let rows = tape.rows(states, &Self::image_rows(seq))?;
        let logits = self.head(&mut tape, &b, rows, MaskMode::Refine)?;
        Ok(tape.take(logits))
    }

    /// `passes` rounds of: score the current image tokens under the
    /// all-true mask, then replace the ⌈64/passes⌉ least confident
    /// positions with their argmax token.
    pub fn refine(&self, vocab: &Vocabulary, text_ids: &[usize], image_ids: &[usize], passes: usize) -> Result<Vec<usize>> {
        let mut current = image_ids.to_vec();
        if passes == 0 {
            return Ok(current);
        }
        let tv = vocab.text_vocab_size();
        let k = self.config.image_vocab_size;
        let per_pass = IMAGE_TOKENS.div_ceil(passes);
        for _ in 0..passes {
            let seq = vocab.fuse(text_ids, &current)?;
            self.check_seq(&seq)?;
            let logits = self.refine_logits(&seq)?;
            let probs = softmax_rows(logits.data(), k);
            let mut conf: Vec<(f64, usize)> = current
                .iter()
                .enumerate()
                .map(|(i, &id)| (probs[i * k + (id - tv)], i))
                .collect();
            conf.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            for &(_, i) in conf.iter().take(per_pass) {
                current[i] = tv + argmax(&logits.data()[i * k..(i + 1) * k]);
            }
        }
        Ok(current)
    }

    /// Per-example next-token cross-entropy over the image region; the
    /// default suspicion score of the noise-aware pipeline.
    pub fn example_loss(&self, vocab: &Vocabulary, text_ids: &[usize], image_ids: &[usize]) -> Result<f64> {
        let seq = vocab.fuse(text_ids, image_ids)?;
        self.check_seq(&seq)?;
        let mut tape = Tape::new();
        let b = self.params.register(&mut tape, false);
        let (ce, _) = self.next_token_loss(&mut tape, &b, &seq, vocab.text_vocab_size())?;
        Ok(tape.value(ce).item())
    }

    fn next_token_loss(&self, tape: &mut Tape, b: &Bound, seq: &MultimodalSequence, tv: usize) -> Result<(Var, Var)> {
        let mask = self.generate_mask(seq);
        let states = self.hidden(tape, b, &seq.ids, &mask)?;
        let predict: Vec<usize> = (seq.sep_position()..seq.sep_position() + seq.image_len).collect();
        let rows = tape.rows(states, &predict)?;
        let logits = self.head(tape, b, rows, MaskMode::Generate)?;
        let targets: Vec<usize> = seq.ids[seq.image_start()..seq.image_start() + seq.image_len]
            .iter()
            .map(|&id| id - tv)
            .collect();
        Ok((tape.cross_entropy(logits, &targets)?, logits))
    }

    /// Builds the full training objective on `tape`. Returns the total loss
    /// node and the individual terms' values.
    pub fn loss_on_tape(
        &self,
        tape: &mut Tape,
        b: &Bound,
        batch: &[TrainExample],
        ctx: &LossContext<'_>,
        rng: &mut Rng,
    ) -> Result<(Var, StepLosses)> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let w = ctx.weights;
        let tv = ctx.vocab.text_vocab_size();
        let k = self.config.image_vocab_size;
        let inv_b = 1.0 / batch.len() as f64;
        let codebook = if w.perceptual > 0.0 {
            Some(tape.constant(ctx.vocab.codebook.clone()))
        } else {
            None
        };
        let mut terms: Vec<Var> = Vec::new();
        let mut losses = StepLosses::default();
        let mut text_pool = Vec::new();
        let mut image_pool = Vec::new();
        for (e, ex) in batch.iter().enumerate() {
            let aux = e < w.aux_examples;
            let seq = ctx.vocab.fuse(&ex.text_ids, &ex.image_ids)?;
            self.check_seq(&seq)?;
            let (ce, logits) = self.next_token_loss(tape, b, &seq, tv)?;
            losses.cross_entropy += tape.value(ce).item() * inv_b;
            terms.push(tape.scale(ce, inv_b)?);

            if let Some(cb) = codebook {
                let probs = tape.softmax(logits)?;
                let patches = tape.matmul(probs, cb)?;
                let idx: Vec<usize> = (0..IMAGE_TOKENS * PATCH_DIM)
                    .map(|flat| {
                        // invert patch_pixel_index for every image position
                        inverse_patch_index()[flat]
                    })
                    .collect();
                let image = tape.gather(patches, idx, ex.image.shape().to_vec())?;
                let feats = ctx.extractor.features_on_tape(tape, image)?;
                let target = Tensor::new(vec![1, feats_dim(tape, feats)], ctx.extractor.features(&ex.image)?)?;
                let target = tape.constant(target);
                let diff = tape.sub(feats, target)?;
                let sq = tape.mul(diff, diff)?;
                let perc = tape.mean(sq)?;
                losses.perceptual += tape.value(perc).item() * inv_b;
                terms.push(tape.scale(perc, w.perceptual * inv_b)?);
            }

            if aux && w.refine > 0.0 && self.config.refinement {
                let mut noisy = ex.image_ids.clone();
                for id in noisy.iter_mut() {
                    if rng.bernoulli(w.refine_corruption) {
                        *id = tv + rng.below(k);
                    }
                }
                let rseq = ctx.vocab.fuse(&ex.text_ids, &noisy)?;
                let mask = hybrid_mask(rseq.text_len, rseq.image_len, MaskMode::Refine);
                let states = self.hidden(tape, b, &rseq.ids, &mask)?;
                let rows = tape.rows(states, &Self::image_rows(&rseq))?;
                let logits = self.head(tape, b, rows, MaskMode::Refine)?;
                let targets: Vec<usize> = ex.image_ids.iter().map(|&id| id - tv).collect();
                let r = tape.cross_entropy(logits, &targets)?;
                let inv_aux = 1.0 / batch.len().min(w.aux_examples) as f64;
                losses.refine += tape.value(r).item() * inv_aux;
                terms.push(tape.scale(r, w.refine * inv_aux)?);
            }

            if aux && w.align > 0.0 {
                let tseq = ctx.vocab.fuse(&ex.text_ids, &[])?;
                let tmask = self.generate_mask(&tseq);
                let ts = self.hidden(tape, b, &tseq.ids, &tmask)?;
                text_pool.push(self.pooled(tape, b, ts, &Self::text_rows(&tseq), "text_proj")?);
                let iseq = ctx.vocab.fuse(&[], &ex.image_ids)?;
                let imask = self.generate_mask(&iseq);
                let is = self.hidden(tape, b, &iseq.ids, &imask)?;
                image_pool.push(self.pooled(tape, b, is, &Self::image_rows(&iseq), "image_proj")?);
            }
        }
        if text_pool.len() > 1 {
            let n = text_pool.len();
            let d = self.config.embed_dim;
            let t = tape.concat_last(&text_pool)?;
            let t = tape.gather(t, (0..n * d).collect(), vec![n, d])?;
            let t = tape.row_normalize(t)?;
            let i = tape.concat_last(&image_pool)?;
            let i = tape.gather(i, (0..n * d).collect(), vec![n, d])?;
            let i = tape.row_normalize(i)?;
            let diag: Vec<usize> = (0..n).collect();
            let s_ti = tape.matmul_nt(t, i)?;
            let s_ti = tape.scale(s_ti, 1.0 / w.align_temperature)?;
            let s_it = tape.matmul_nt(i, t)?;
            let s_it = tape.scale(s_it, 1.0 / w.align_temperature)?;
            let a = tape.cross_entropy(s_ti, &diag)?;
            let c = tape.cross_entropy(s_it, &diag)?;
            let sum = tape.add(a, c)?;
            let align = tape.scale(sum, 0.5)?;
            losses.align = tape.value(align).item();
            terms.push(tape.scale(align, w.align)?);
        }
        let mut total = terms[0];
        for &t in &terms[1..] {
            total = tape.add(total, t)?;
        }
        losses.total = tape.value(total).item();
        Ok((total, losses))
    }

    /// One optimization step on `batch`: build the loss, backpropagate and
    /// apply AdamW.
    pub fn train_step(
        &mut self,
        opt: &mut OptimizerState,
        batch: &[TrainExample],
        ctx: &LossContext<'_>,
        rng: &mut Rng,
    ) -> Result<StepLosses> {
        let mut tape = Tape::new();
        let b = self.params.register(&mut tape, true);
        let (loss, losses) = self.loss_on_tape(&mut tape, &b, batch, ctx, rng)?;
        tape.backward(loss)?;
        self.params.absorb_grads(&tape, &b);
        adamw_step(&mut self.params.tensors_mut(), opt)?;
        Ok(losses)
    }
}

fn feats_dim(tape: &Tape, v: Var) -> usize {
    tape.value(v).len()
}

/// Maps each flat image index to its position in the `[64, 48]` patch
/// matrix.
fn inverse_patch_index() -> &'static [usize] {
    use std::sync::OnceLock;
    static INV: OnceLock<Vec<usize>> = OnceLock::new();
    INV.get_or_init(|| {
        let mut inv = vec![0; IMAGE_TOKENS * PATCH_DIM];
        let grid = crate::tokenizer::GRID;
        for n in 0..IMAGE_TOKENS {
            for k in 0..PATCH_DIM {
                inv[patch_pixel_index(n / grid, n % grid, k)] = n * PATCH_DIM + k;
            }
        }
        inv
    })
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn sample_row(logits: &[f64], s: &SamplerConfig, rng: &mut Rng) -> usize {
    if s.temperature <= 0.0 {
        return argmax(logits);
    }
    let mut order: Vec<usize> = (0..logits.len()).collect();
    if s.top_k > 0 && s.top_k < logits.len() {
        order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
        order.truncate(s.top_k);
        order.sort_unstable();
    }
    let scaled: Vec<f64> = order.iter().map(|&i| logits[i] / s.temperature).collect();
    let probs = softmax_rows(&scaled, scaled.len());
    let mut u = rng.uniform();
    for (p, &i) in probs.iter().zip(&order) {
        if u < *p {
            return i;
        }
        u -= p;
    }
    *order.last().unwrap()
}
