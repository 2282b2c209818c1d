//! Scalar reference implementations shared by the unit suites and the
//! acceptance target. Each one is written for clarity, not speed.
#![allow(dead_code)]

use nalgebra::DMatrix;
use vllm_lab::model::{AttentionMask, MaskMode, TokenModel};
use vllm_lab::tokenizer::MultimodalSequence;
use vllm_lab::Tensor;

pub fn triple_loop(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a.data()[i * k + p] * b.data()[p * n + j];
            }
            c[i * n + j] = s;
        }
    }
    c
}

/// Mask rebuilt from the region description: prefix rows see exactly the
/// prefix; image rows and the closing EOS see the prefix plus image
/// positions up to themselves.
pub fn mask_oracle(text_len: usize, image_len: usize) -> Vec<Vec<bool>> {
    #[derive(PartialEq, Clone, Copy)]
    enum Kind {
        Prefix,
        Image(usize),
        Eos,
    }
    let mut kinds = vec![Kind::Prefix; text_len + 2];
    kinds.extend((0..image_len).map(Kind::Image));
    kinds.push(Kind::Eos);
    let len = kinds.len();
    let mut m = vec![vec![false; len]; len];
    for i in 0..len {
        for j in 0..len {
            m[i][j] = if image_len == 0 {
                true
            } else {
                match (kinds[i], kinds[j]) {
                    (_, Kind::Prefix) => true,
                    (Kind::Prefix, _) => false,
                    (Kind::Image(a), Kind::Image(b)) => b <= a,
                    (Kind::Image(_), Kind::Eos) => false,
                    (Kind::Eos, _) => true,
                }
            };
        }
    }
    m
}

fn ln(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let s = (var + 1e-5).sqrt();
    x.iter().zip(g).zip(b).map(|((v, g), b)| (v - mean) / s * g + b).collect()
}

/// `x[1×r] · W[r×c] + bias`.
fn affine(x: &[f64], w: &Tensor, bias: &[f64]) -> Vec<f64> {
    let c = w.shape()[1];
    (0..c).map(|j| bias[j] + x.iter().enumerate().map(|(i, v)| v * w.data()[i * c + j]).sum::<f64>()).collect()
}

/// Logits `[L][K]` computed one position, head and scalar at a time,
/// following the pre-norm block layout of the token model. Refine-mode
/// masks read the refinement head when the model has one.
pub fn transformer_logits(model: &TokenModel, seq: &MultimodalSequence, mask: &AttentionMask) -> Vec<Vec<f64>> {
    let p = |n: &str| model.params.get(n).unwrap().clone();
    let c = &model.config;
    let (d, heads) = (c.embed_dim, c.n_heads);
    let dh = d / heads;
    let l = seq.len();
    let (tok, pos) = (p("tok_emb"), p("pos_emb"));
    let mut x: Vec<Vec<f64>> = (0..l)
        .map(|i| (0..d).map(|k| tok.data()[seq.ids[i] * d + k] + pos.data()[i * d + k]).collect())
        .collect();
    let c0 = (2.0 / std::f64::consts::PI).sqrt();
    let gelu = |v: f64| 0.5 * v * (1.0 + (c0 * (v + 0.044715 * v * v * v)).tanh());
    for layer in 0..c.n_layers {
        let q = |n: &str| p(&format!("layer{layer}.{n}"));
        let h: Vec<Vec<f64>> = x.iter().map(|r| ln(r, q("ln1_g").data(), q("ln1_b").data())).collect();
        let qkv: Vec<Vec<f64>> = h.iter().map(|r| affine(r, &q("w_qkv"), q("b_qkv").data())).collect();
        let mut x2 = x.clone();
        for i in 0..l {
            let mut att = vec![0.0; d];
            for hd in 0..heads {
                let off = hd * dh;
                let qi = &qkv[i][off..off + dh];
                let mut weights = Vec::new();
                for j in 0..l {
                    if mask.get(i, j) {
                        let kj = &qkv[j][d + off..d + off + dh];
                        let s: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt();
                        weights.push((j, s));
                    }
                }
                let m = weights.iter().map(|w| w.1).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = weights.iter().map(|w| (w.1 - m).exp()).sum();
                for &(j, s) in &weights {
                    for k in 0..dh {
                        att[off + k] += (s - m).exp() / z * qkv[j][2 * d + off + k];
                    }
                }
            }
            let o = affine(&att, &q("w_o"), q("b_o").data());
            for k in 0..d {
                x2[i][k] += o[k];
            }
        }
        x = x2
            .iter()
            .map(|r| {
                let h = ln(r, q("ln2_g").data(), q("ln2_b").data());
                let f: Vec<f64> = affine(&h, &q("w_ff1"), q("b_ff1").data()).into_iter().map(gelu).collect();
                let f = affine(&f, &q("w_ff2"), q("b_ff2").data());
                r.iter().zip(&f).map(|(a, b)| a + b).collect()
            })
            .collect();
    }
    let head = match mask.mode {
        MaskMode::Refine if model.params.get("head_refine_w").is_some() => "head_refine",
        _ => "head_gen",
    };
    x.iter()
        .map(|r| {
            let fin = ln(r, p("lnf_g").data(), p("lnf_b").data());
            affine(&fin, &p(&format!("{head}_w")), p(&format!("{head}_b")).data())
        })
        .collect()
}

/// Fréchet distance of two 2×2 Gaussians via `tr √M = √(tr M + 2√det M)`.
pub fn frechet_2x2(mu_a: [f64; 2], a: [[f64; 2]; 2], mu_b: [f64; 2], b: [[f64; 2]; 2]) -> f64 {
    let m = |x: [[f64; 2]; 2]| DMatrix::from_row_slice(2, 2, &[x[0][0], x[0][1], x[1][0], x[1][1]]);
    let (ma, mb) = (m(a), m(b));
    // tr √(A^½ B A^½) = tr √(AB) for PSD A, B; AB has det(A)det(B) and trace tr(AB).
    let ab = &ma * &mb;
    let tr_cross = (ab.trace() + 2.0 * (ma.determinant() * mb.determinant()).sqrt()).sqrt();
    let d2 = (mu_a[0] - mu_b[0]).powi(2) + (mu_a[1] - mu_b[1]).powi(2);
    d2 + ma.trace() + mb.trace() - 2.0 * tr_cross
}

/// Reference BLEU-4: straightforward counting with add-one smoothing on
/// n = 2..4 and a plain unigram precision.
pub fn bleu_oracle(cand: &str, refs: &[&str]) -> f64 {
    let c: Vec<&str> = cand.split(' ').collect();
    let rs: Vec<Vec<&str>> = refs.iter().map(|r| r.split(' ').collect()).collect();
    let mut logp = 0.0;
    for n in 1..=4usize {
        let grams: Vec<&[&str]> = if c.len() >= n { c.windows(n).collect() } else { vec![] };
        let mut matched = 0;
        let mut seen: Vec<&[&str]> = Vec::new();
        for g in &grams {
            if seen.contains(g) {
                continue;
            }
            seen.push(g);
            let in_cand = grams.iter().filter(|h| *h == g).count();
            let in_ref = rs
                .iter()
                .map(|r| if r.len() >= n { r.windows(n).filter(|h| h == g).count() } else { 0 })
                .max()
                .unwrap();
            matched += in_cand.min(in_ref);
        }
        let p = if n == 1 {
            matched as f64 / grams.len() as f64
        } else {
            (matched as f64 + 1.0) / (grams.len() as f64 + 1.0)
        };
        if p == 0.0 {
            return 0.0;
        }
        logp += p.ln() / 4.0;
    }
    let mut best = rs[0].len();
    for r in &rs {
        let (d, bd) = ((r.len() as i64 - c.len() as i64).abs(), (best as i64 - c.len() as i64).abs());
        if d < bd || (d == bd && r.len() < best) {
            best = r.len();
        }
    }
    let bp = if c.len() > best { 1.0 } else { (1.0 - best as f64 / c.len() as f64).exp() };
    bp * logp.exp()
}

/// Recall@k, MRR and nDCG by fully sorting each row; ties go to the lower
/// index.
pub fn sort_oracle(scores: &[Vec<f64>], truth: &[usize], ks: &[usize]) -> (Vec<f64>, f64, f64) {
    let ranks: Vec<usize> = scores
        .iter()
        .zip(truth)
        .map(|(row, &t)| {
            let mut order: Vec<usize> = (0..row.len()).collect();
            order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
            order.iter().position(|&j| j == t).unwrap() + 1
        })
        .collect();
    let n = ranks.len() as f64;
    let recall = ks.iter().map(|&k| ranks.iter().filter(|&&r| r <= k).count() as f64 / n).collect();
    let mrr = ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n;
    let ndcg = ranks.iter().map(|&r| 1.0 / (r as f64 + 1.0).log2()).sum::<f64>() / n;
    (recall, mrr, ndcg)
}
