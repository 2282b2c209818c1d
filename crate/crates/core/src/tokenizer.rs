//! Shared text/image token space.
//!
//! Text is split on whitespace over a closed word list; images are cut into
//! an 8×8 grid of 4×4 patches and each patch is replaced by its nearest
//! codebook centroid. Both id ranges live in one vocabulary so a single
//! transformer can read `[BOS, text…, SEP, image…, EOS]`.

use crate::data::{caption_words, CHANNELS, IMAGE_SIZE};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const PATCH: usize = 4;
pub const GRID: usize = IMAGE_SIZE / PATCH;
pub const PATCH_DIM: usize = CHANNELS * PATCH * PATCH;
pub const IMAGE_TOKENS: usize = GRID * GRID;
pub const MAX_TEXT_TOKENS: usize = 16;
/// Four specials plus the eighteen caption words.
pub const TEXT_VOCAB_SIZE: usize = 22;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const SEP: usize = 2;
pub const EOS: usize = 3;
const SPECIALS: [&str; 4] = ["<PAD>", "<BOS>", "<SEP>", "<EOS>"];

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    /// Specials first, then caption words; position is the token id.
    pub text_tokens: Vec<String>,
    /// `[K, 48]` patch centroids.
    pub codebook: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenTag {
    Text,
    Image,
    Special,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultimodalSequence {
    pub ids: Vec<usize>,
    pub tags: Vec<TokenTag>,
    pub text_len: usize,
    pub image_len: usize,
}

impl MultimodalSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn sep_position(&self) -> usize {
        self.text_len + 1
    }

    /// Position of the first image token.
    pub fn image_start(&self) -> usize {
        self.text_len + 2
    }
}

/// 64 patch vectors in raster order, each laid out channel-major
/// (`c`, then row, then column within the patch).
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub patches: Vec<[f64; PATCH_DIM]>,
}

impl Vocabulary {
    pub fn with_codebook(codebook: Tensor) -> Result<Self> {
        if codebook.shape().len() != 2 || codebook.shape()[1] != PATCH_DIM {
            return Err(Error::InvalidShape(format!(
                "codebook must be [K, {PATCH_DIM}], got {:?}",
                codebook.shape()
            )));
        }
        let mut text_tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        text_tokens.extend(caption_words().into_iter().map(String::from));
        debug_assert_eq!(text_tokens.len(), TEXT_VOCAB_SIZE);
        Ok(Vocabulary {
            text_tokens,
            codebook,
        })
    }

    pub fn text_vocab_size(&self) -> usize {
        self.text_tokens.len()
    }

    pub fn image_vocab_size(&self) -> usize {
        self.codebook.shape()[0]
    }

    pub fn total_size(&self) -> usize {
        self.text_vocab_size() + self.image_vocab_size()
    }

    pub fn is_image_id(&self, id: usize) -> bool {
        id >= self.text_vocab_size() && id < self.total_size()
    }

    pub fn centroid(&self, code: usize) -> &[f64] {
        &self.codebook.data()[code * PATCH_DIM..(code + 1) * PATCH_DIM]
    }

    pub fn encode_text(&self, caption: &str) -> Result<Vec<usize>> {
        caption
            .split_whitespace()
            .map(|w| {
                self.text_tokens[SPECIALS.len()..]
                    .iter()
                    .position(|t| t == w)
                    .map(|p| p + SPECIALS.len())
                    .ok_or_else(|| Error::UnknownWord(w.to_string()))
            })
            .collect()
    }

    pub fn decode_text(&self, ids: &[usize]) -> Result<String> {
        let words = ids
            .iter()
            .map(|&id| {
                if id < SPECIALS.len() || id >= self.text_vocab_size() {
                    Err(Error::IdOutOfSpace { id, space: "text" })
                } else {
                    Ok(self.text_tokens[id].as_str())
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(words.join(" "))
    }

    /// Nearest centroid by squared Euclidean distance; ties go to the lowest
    /// index.
    pub fn nearest_code(&self, patch: &[f64]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for k in 0..self.image_vocab_size() {
            let d: f64 = self
                .centroid(k)
                .iter()
                .zip(patch)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        best
    }

    /// Image token ids (offset into the shared space) for each patch.
    pub fn quantize(&self, grid: &PatchGrid) -> Vec<usize> {
        grid.patches
            .iter()
            .map(|p| self.text_vocab_size() + self.nearest_code(p))
            .collect()
    }

    pub fn tokenize_image(&self, image: &Tensor) -> Result<Vec<usize>> {
        Ok(self.quantize(&patchify(image)?))
    }

    pub fn depatchify(&self, ids: &[usize]) -> Result<Tensor> {
        if ids.len() != IMAGE_TOKENS {
            return Err(Error::Length(format!("{} image ids, expected {IMAGE_TOKENS}", ids.len())));
        }
        let mut patches = Vec::with_capacity(IMAGE_TOKENS);
        for &id in ids {
            if !self.is_image_id(id) {
                return Err(Error::IdOutOfSpace { id, space: "image" });
            }
            let mut p = [0.0; PATCH_DIM];
            for (dst, &src) in p.iter_mut().zip(self.centroid(id - self.text_vocab_size())) {
                *dst = src.clamp(0.0, 1.0);
            }
            patches.push(p);
        }
        Ok(unpatchify(&PatchGrid { patches }))
    }

    pub fn fuse(&self, text_ids: &[usize], image_ids: &[usize]) -> Result<MultimodalSequence> {
        if text_ids.len() > MAX_TEXT_TOKENS {
            return Err(Error::Length(format!("{} text tokens > {MAX_TEXT_TOKENS}", text_ids.len())));
        }
        if !(image_ids.is_empty() || image_ids.len() == IMAGE_TOKENS) {
            return Err(Error::Length(format!("{} image tokens, expected 0 or {IMAGE_TOKENS}", image_ids.len())));
        }
        for &id in text_ids {
            if id < SPECIALS.len() || id >= self.text_vocab_size() {
                return Err(Error::IdOutOfSpace { id, space: "text" });
            }
        }
        for &id in image_ids {
            if !self.is_image_id(id) {
                return Err(Error::IdOutOfSpace { id, space: "image" });
            }
        }
        let mut ids = Vec::with_capacity(text_ids.len() + image_ids.len() + 3);
        let mut tags = Vec::with_capacity(ids.capacity());
        ids.push(BOS);
        tags.push(TokenTag::Special);
        ids.extend_from_slice(text_ids);
        tags.extend(std::iter::repeat(TokenTag::Text).take(text_ids.len()));
        ids.push(SEP);
        tags.push(TokenTag::Special);
        ids.extend_from_slice(image_ids);
        tags.extend(std::iter::repeat(TokenTag::Image).take(image_ids.len()));
        ids.push(EOS);
        tags.push(TokenTag::Special);
        Ok(MultimodalSequence {
            ids,
            tags,
            text_len: text_ids.len(),
            image_len: image_ids.len(),
        })
    }

    pub fn unfuse(&self, seq: &MultimodalSequence) -> Result<(Vec<usize>, Vec<usize>)> {
        let n = seq.text_len + seq.image_len + 3;
        if seq.ids.len() != n
            || seq.ids[0] != BOS
            || seq.ids[seq.sep_position()] != SEP
            || seq.ids[n - 1] != EOS
        {
            return Err(Error::Length("sequence does not follow [BOS, text, SEP, image, EOS]".into()));
        }
        let text = seq.ids[1..seq.sep_position()].to_vec();
        let image = seq.ids[seq.image_start()..n - 1].to_vec();
        Ok((text, image))
    }

    /// Header text (`key=value` lines, blank line terminator) followed by a
    /// little-endian `u64` value count and the centroids as `f64` LE.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!(
            "VOCAB1\ntext_vocab_size={}\nimage_vocab_size={}\npatch_dim={}\nwords={}\n\n",
            self.text_vocab_size(),
            self.image_vocab_size(),
            PATCH_DIM,
            self.text_tokens.join(" ")
        )
        .into_bytes();
        out.extend_from_slice(&(self.codebook.len() as u64).to_le_bytes());
        for v in self.codebook.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses [`Vocabulary::to_bytes`] output; returns the vocabulary and the
    /// number of bytes consumed.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, usize)> {
        let bad = |m: &str| Error::format("vocabulary", m.to_string());
        let end = bytes
            .windows(2)
            .position(|w| w == b"\n\n")
            .ok_or_else(|| bad("missing header terminator"))?;
        let header = std::str::from_utf8(&bytes[..end]).map_err(|_| bad("header not utf-8"))?;
        let mut lines = header.lines();
        if lines.next() != Some("VOCAB1") {
            return Err(bad("bad magic"));
        }
        let mut fields = std::collections::HashMap::new();
        for l in lines {
            let (k, v) = l.split_once('=').ok_or_else(|| bad("header line without '='"))?;
            fields.insert(k, v);
        }
        let num = |k: &str| -> Result<usize> {
            fields
                .get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad(&format!("missing {k}")))
        };
        let (tv, iv, dim) = (num("text_vocab_size")?, num("image_vocab_size")?, num("patch_dim")?);
        let words: Vec<String> = fields
            .get("words")
            .ok_or_else(|| bad("missing words"))?
            .split(' ')
            .map(String::from)
            .collect();
        if words.len() != tv || dim != PATCH_DIM {
            return Err(bad("header sizes inconsistent"));
        }
        let mut pos = end + 2;
        let count = u64::from_le_bytes(
            bytes
                .get(pos..pos + 8)
                .ok_or_else(|| bad("truncated"))?
                .try_into()
                .unwrap(),
        ) as usize;
        pos += 8;
        if count != iv * dim {
            return Err(bad("centroid count mismatch"));
        }
        let body = bytes.get(pos..pos + 8 * count).ok_or_else(|| bad("truncated centroids"))?;
        let data = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        pos += 8 * count;
        let vocab = Vocabulary {
            text_tokens: words,
            codebook: Tensor::new(vec![iv, dim], data)?,
        };
        Ok((vocab, pos))
    }
}

pub fn patchify(image: &Tensor) -> Result<PatchGrid> {
    if image.shape() != [CHANNELS, IMAGE_SIZE, IMAGE_SIZE] {
        return Err(Error::ShapeMismatch {
            op: "patchify",
            left: image.shape().to_vec(),
            right: vec![CHANNELS, IMAGE_SIZE, IMAGE_SIZE],
        });
    }
    let d = image.data();
    let mut patches = Vec::with_capacity(IMAGE_TOKENS);
    for gy in 0..GRID {
        for gx in 0..GRID {
            let mut p = [0.0; PATCH_DIM];
            for (k, slot) in p.iter_mut().enumerate() {
                *slot = d[patch_pixel_index(gy, gx, k)];
            }
            patches.push(p);
        }
    }
    Ok(PatchGrid { patches })
}

/// Flat image index of element `k` of patch `(gy, gx)`.
pub fn patch_pixel_index(gy: usize, gx: usize, k: usize) -> usize {
    let c = k / (PATCH * PATCH);
    let py = (k / PATCH) % PATCH;
    let px = k % PATCH;
    (c * IMAGE_SIZE + gy * PATCH + py) * IMAGE_SIZE + gx * PATCH + px
}

/// Inverse of [`patchify`] (no clamping).
pub fn unpatchify(grid: &PatchGrid) -> Tensor {
    let mut data = vec![0.0; CHANNELS * IMAGE_SIZE * IMAGE_SIZE];
    for (n, p) in grid.patches.iter().enumerate() {
        for (k, &v) in p.iter().enumerate() {
            data[patch_pixel_index(n / GRID, n % GRID, k)] = v;
        }
    }
    Tensor::raw(vec![CHANNELS, IMAGE_SIZE, IMAGE_SIZE], data)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means codebook over all patches of `images`: k-means++ seeding from
/// `seed`, then `iterations` Lloyd steps. If the data has fewer than `k`
/// distinct patches the remaining centroids are filled with distinct
/// uniform-random patches (they simply stay unused).
pub fn fit_codebook(images: &[&Tensor], k: usize, iterations: usize, seed: u64) -> Result<Tensor> {
    let mut points: Vec<[f64; PATCH_DIM]> = Vec::with_capacity(images.len() * IMAGE_TOKENS);
    for img in images {
        points.extend(patchify(img)?.patches);
    }
    if points.is_empty() || k == 0 {
        return Err(Error::TooFewSamples { needed: 1, got: points.len() });
    }
    let mut rng = Rng::new(seed);
    let mut centroids: Vec<[f64; PATCH_DIM]> = vec![points[rng.below(points.len())]];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            break;
        }
        let mut r = rng.uniform() * total;
        let mut chosen = points.len() - 1;
        for (i, &w) in d2.iter().enumerate() {
            if w > 0.0 && r < w {
                chosen = i;
                break;
            }
            r -= w;
        }
        if d2[chosen] == 0.0 {
            // floating-point leftover landed on a covered point
            chosen = d2.iter().rposition(|&w| w > 0.0).unwrap();
        }
        let c = points[chosen];
        for (dv, p) in d2.iter_mut().zip(&points) {
            *dv = dv.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    let seeded = centroids.len();
    let mut assign = vec![0usize; points.len()];
    for _ in 0..iterations {
        for (a, p) in assign.iter_mut().zip(&points) {
            let mut best = 0;
            let mut bd = f64::INFINITY;
            for (j, c) in centroids.iter().enumerate() {
                let d = sq_dist(p, c);
                if d < bd {
                    bd = d;
                    best = j;
                }
            }
            *a = best;
        }
        let mut sums = vec![[0.0; PATCH_DIM]; seeded];
        let mut counts = vec![0usize; seeded];
        for (&a, p) in assign.iter().zip(&points) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for j in 0..seeded {
            if counts[j] > 0 {
                for (c, s) in centroids[j].iter_mut().zip(&sums[j]) {
                    *c = s / counts[j] as f64;
                }
            }
        }
    }
    while centroids.len() < k {
        let mut c = [0.0; PATCH_DIM];
        c.iter_mut().for_each(|v| *v = rng.uniform());
        if centroids.iter().all(|e| e != &c) {
            centroids.push(c);
        }
    }
    let data = centroids.iter().flat_map(|c| c.iter().copied()).collect();
    Tensor::new(vec![k, PATCH_DIM], data)
}
