//! Image, text and retrieval metrics.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use sha2::{Digest, Sha256};

use crate::autodiff::{Conv2dGeom, Tape, Var};
use crate::data::{CHANNELS, IMAGE_SIZE};
use crate::error::{Error, Result};
use crate::model::TokenModel;
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::tokenizer::Vocabulary;

pub const FEATURE_DIM: usize = 16;
const EXTRACTOR_SEED: u64 = 42;

/// Frozen random two-layer conv net: `3×32×32 → 8×16×16 → 16×8×8 → 16`
/// (3×3 kernels, stride 2, padding 1, tanh, global mean pool). Defines both
/// the perceptual-loss space and the toy-FID feature space.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    conv1_w: Tensor,
    conv1_b: Tensor,
    conv2_w: Tensor,
    conv2_b: Tensor,
}

impl Default for FeatureExtractor {
    fn default() -> Self {
        Self::new()
    }
}

impl FeatureExtractor {
    pub fn new() -> Self {
        let mut rng = Rng::new(EXTRACTOR_SEED);
        let fan1 = CHANNELS * 9;
        let fan2 = 8 * 9;
        FeatureExtractor {
            conv1_w: Tensor::randn(&[8, fan1], 1.0 / (fan1 as f64).sqrt(), &mut rng),
            conv1_b: Tensor::randn(&[8], 0.1, &mut rng),
            conv2_w: Tensor::randn(&[FEATURE_DIM, fan2], 1.0 / (fan2 as f64).sqrt(), &mut rng),
            conv2_b: Tensor::randn(&[FEATURE_DIM], 0.1, &mut rng),
        }
    }

    fn geoms() -> (Conv2dGeom, Conv2dGeom) {
        let g1 = Conv2dGeom {
            in_channels: CHANNELS,
            height: IMAGE_SIZE,
            width: IMAGE_SIZE,
            out_channels: 8,
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        let g2 = Conv2dGeom {
            in_channels: 8,
            height: IMAGE_SIZE / 2,
            width: IMAGE_SIZE / 2,
            out_channels: FEATURE_DIM,
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        (g1, g2)
    }

    /// Features of an image already on `tape`; returns a `[1, 16]` node.
    /// The extractor's weights enter as constants.
    pub fn features_on_tape(&self, tape: &mut Tape, image: Var) -> Result<Var> {
        let (g1, g2) = Self::geoms();
        let w1 = tape.constant(self.conv1_w.clone());
        let b1 = tape.constant(self.conv1_b.clone());
        let w2 = tape.constant(self.conv2_w.clone());
        let b2 = tape.constant(self.conv2_b.clone());
        let h = tape.conv2d(image, w1, b1, g1)?;
        let h = tape.tanh(h)?;
        let h = tape.conv2d(h, w2, b2, g2)?;
        let h = tape.tanh(h)?;
        // [16, 8, 8] -> [16, 64]; mean over spatial positions
        let hw = (IMAGE_SIZE / 4) * (IMAGE_SIZE / 4);
        let idx: Vec<usize> = (0..hw).flat_map(|p| (0..FEATURE_DIM).map(move |c| c * hw + p)).collect();
        let t = tape.gather(h, idx, vec![hw, FEATURE_DIM])?;
        tape.mean_rows(t)
    }

    pub fn features(&self, image: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let x = tape.constant(image.clone());
        let f = self.features_on_tape(&mut tape, x)?;
        Ok(tape.value(f).data().to_vec())
    }

    /// SHA-256 over the little-endian bytes of every weight.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for t in [&self.conv1_w, &self.conv1_b, &self.conv2_w, &self.conv2_b] {
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable valid-mode Gaussian filter of an `h × w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, win: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            rows[i * ow + j] = (0..SSIM_WINDOW).map(|k| win[k] * plane[i * w + j + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = (0..SSIM_WINDOW).map(|k| win[k] * rows[(i + k) * ow + j]).sum();
        }
    }
    out
}

/// Structural similarity of two `[C, H, W]` images (dynamic range 1):
/// Gaussian 11×11 window with σ = 1.5, mean over valid window positions,
/// averaged over channels.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() || a.shape().len() != 3 {
        return Err(Error::ShapeMismatch {
            op: "ssim",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidShape(format!("ssim needs at least {SSIM_WINDOW}×{SSIM_WINDOW}")));
    }
    let win = gaussian_window();
    let plane = h * w;
    let mut total = 0.0;
    for ch in 0..c {
        let x = &a.data()[ch * plane..(ch + 1) * plane];
        let y = &b.data()[ch * plane..(ch + 1) * plane];
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(y).map(|(p, q)| p * q).collect();
        let mx = filter_valid(x, h, w, &win);
        let my = filter_valid(y, h, w, &win);
        let exx = filter_valid(&xx, h, w, &win);
        let eyy = filter_valid(&yy, h, w, &win);
        let exy = filter_valid(&xy, h, w, &win);
        let mut s = 0.0;
        for i in 0..mx.len() {
            let (m1, m2) = (mx[i], my[i]);
            let v1 = exx[i] - m1 * m1;
            let v2 = eyy[i] - m2 * m2;
            let cov = exy[i] - m1 * m2;
            s += ((2.0 * m1 * m2 + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((m1 * m1 + m2 * m2 + SSIM_C1) * (v1 + v2 + SSIM_C2));
        }
        total += s / mx.len() as f64;
    }
    Ok(total / c as f64)
}

pub fn mean_and_covariance(samples: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let n = samples.len();
    let d = samples[0].len();
    let mut mu = DVector::zeros(d);
    for s in samples {
        mu += DVector::from_column_slice(s);
    }
    mu /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for s in samples {
        let c = DVector::from_column_slice(s) - &mu;
        cov += &c * c.transpose();
    }
    cov /= (n.max(2) - 1) as f64;
    (mu, cov)
}

/// Principal square root of a symmetric PSD matrix; negative eigenvalues
/// (numerical noise) are clamped to zero.
pub fn sqrtm_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Fréchet distance between `N(mu_a, cov_a)` and `N(mu_b, cov_b)`.
pub fn frechet_distance(mu_a: &DVector<f64>, cov_a: &DMatrix<f64>, mu_b: &DVector<f64>, cov_b: &DMatrix<f64>) -> f64 {
    let diff = mu_a - mu_b;
    let ra = sqrtm_psd(cov_a);
    let inner = &ra * cov_b * &ra;
    let cross = sqrtm_psd(&inner);
    let d = diff.dot(&diff) + (cov_a + cov_b - cross * 2.0).trace();
    d.max(0.0)
}

pub const FID_FULL_RANK: usize = FEATURE_DIM + 1;
pub const FID_RIDGE: f64 = 1e-6;

/// Fréchet distance of Gaussian fits to two feature sets. Sets smaller than
/// `dim + 1` get a `1e-6·I` ridge on their covariance; fewer than two
/// samples is an error.
pub fn frechet_of_features(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    for set in [a, b] {
        if set.len() < 2 {
            return Err(Error::TooFewSamples { needed: 2, got: set.len() });
        }
    }
    let fit = |s: &[Vec<f64>]| {
        let (mu, mut cov) = mean_and_covariance(s);
        if s.len() < s[0].len() + 1 {
            let d = cov.nrows();
            cov += DMatrix::identity(d, d) * FID_RIDGE;
        }
        (mu, cov)
    };
    let (ma, ca) = fit(a);
    let (mb, cb) = fit(b);
    Ok(frechet_distance(&ma, &ca, &mb, &cb))
}

pub fn toy_fid(set_a: &[Tensor], set_b: &[Tensor], fx: &FeatureExtractor) -> Result<f64> {
    let fa = set_a.iter().map(|t| fx.features(t)).collect::<Result<Vec<_>>>()?;
    let fb = set_b.iter().map(|t| fx.features(t)).collect::<Result<Vec<_>>>()?;
    frechet_of_features(&fa, &fb)
}

fn ngram_counts<'a>(words: &[&'a str], n: usize) -> HashMap<Vec<&'a str>, usize> {
    let mut m = HashMap::new();
    if words.len() >= n {
        for w in words.windows(n) {
            *m.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    m
}

/// Modified n-gram precisions for n = 1..4 as `(clipped matches, total)`.
pub fn ngram_matches(candidate: &str, references: &[&str]) -> [(usize, usize); 4] {
    let cand: Vec<&str> = candidate.split_whitespace().collect();
    let refs: Vec<Vec<&str>> = references.iter().map(|r| r.split_whitespace().collect()).collect();
    let mut out = [(0, 0); 4];
    for n in 1..=4 {
        let cc = ngram_counts(&cand, n);
        let mut max_ref: HashMap<Vec<&str>, usize> = HashMap::new();
        for r in &refs {
            for (g, c) in ngram_counts(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        let matched = cc
            .iter()
            .map(|(g, &c)| c.min(*max_ref.get(g).unwrap_or(&0)))
            .sum();
        out[n - 1] = (matched, cand.len().saturating_sub(n - 1));
    }
    out
}

/// BLEU-4 with add-one smoothing of the n ≥ 2 precisions (numerator and
/// denominator), unsmoothed unigram precision and brevity penalty
/// `min(1, exp(1 − r/c))` against the closest reference length.
pub fn bleu4(candidate: &str, references: &[&str]) -> f64 {
    let c = candidate.split_whitespace().count();
    if c == 0 || references.is_empty() {
        return 0.0;
    }
    let counts = ngram_matches(candidate, references);
    let mut log_sum = 0.0;
    for (i, &(m, t)) in counts.iter().enumerate() {
        let p = if i == 0 {
            m as f64 / t as f64
        } else {
            (m as f64 + 1.0) / (t as f64 + 1.0)
        };
        if p == 0.0 {
            return 0.0;
        }
        log_sum += p.ln() / 4.0;
    }
    let r = references
        .iter()
        .map(|r| r.split_whitespace().count())
        .min_by_key(|&len| ((len as isize - c as isize).abs(), len))
        .unwrap();
    let bp = (1.0 - r as f64 / c as f64).exp().min(1.0);
    bp * log_sum.exp()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankingMetrics {
    pub recall_at: Vec<(usize, f64)>,
    pub mrr: f64,
    pub ndcg: f64,
}

impl RankingMetrics {
    pub fn recall(&self, k: usize) -> Option<f64> {
        self.recall_at.iter().find(|(kk, _)| *kk == k).map(|(_, v)| *v)
    }
}

/// 1-based rank of `truth` in a row of scores; higher score ranks first and
/// equal scores rank the lower candidate index first.
pub fn rank_of(row: &[f64], truth: usize) -> usize {
    let ts = row[truth];
    1 + row
        .iter()
        .enumerate()
        .filter(|&(j, &s)| s > ts || (s == ts && j < truth))
        .count()
}

pub fn ranking_metrics(scores: &[Vec<f64>], truth: &[usize], ks: &[usize]) -> Result<RankingMetrics> {
    if scores.is_empty() || scores.len() != truth.len() {
        return Err(Error::Length(format!("{} score rows for {} truths", scores.len(), truth.len())));
    }
    let mut ranks = Vec::with_capacity(scores.len());
    for (q, (row, &t)) in scores.iter().zip(truth).enumerate() {
        if t >= row.len() {
            return Err(Error::InvalidTruth {
                query: q,
                index: t,
                candidates: row.len(),
            });
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "ranking_metrics" });
        }
        ranks.push(rank_of(row, t));
    }
    let n = ranks.len() as f64;
    Ok(RankingMetrics {
        recall_at: ks
            .iter()
            .map(|&k| (k, ranks.iter().filter(|&&r| r <= k).count() as f64 / n))
            .collect(),
        mrr: ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n,
        ndcg: ranks.iter().map(|&r| 1.0 / ((r + 1) as f64).log2()).sum::<f64>() / n,
    })
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Cosine between the model's pooled caption embedding and its pooled
/// embedding of the tokenized image. Stands in for a CLIP-style score.
pub fn alignment_score(model: &TokenModel, vocab: &Vocabulary, caption: &str, image: &Tensor) -> Result<f64> {
    let t = model.embed_text(vocab, &vocab.encode_text(caption)?)?;
    let i = model.embed_image(vocab, &vocab.tokenize_image(image)?)?;
    Ok(cosine(&t, &i))
}

/// `scores[q][c]` = alignment of caption `q` with image `c`.
pub fn alignment_matrix(model: &TokenModel, vocab: &Vocabulary, captions: &[&str], images: &[&Tensor]) -> Result<Vec<Vec<f64>>> {
    let texts = captions
        .iter()
        .map(|c| model.embed_text(vocab, &vocab.encode_text(c)?))
        .collect::<Result<Vec<_>>>()?;
    let imgs = images
        .iter()
        .map(|i| model.embed_image(vocab, &vocab.tokenize_image(i)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(texts.iter().map(|t| imgs.iter().map(|i| cosine(t, i)).collect()).collect())
}
