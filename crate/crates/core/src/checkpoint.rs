//! Binary checkpoints.
//!
//! Layout (all integers little-endian `u64` unless noted):
//!
//! ```text
//! "VLLM1" | version: u32
//! config text        (length-prefixed UTF-8)
//! vocabulary block   (length-prefixed)
//! token_step | rng state (4 words)
//! token parameters   (named tensors)
//! token optimizer
//! flow flag: u8 | [flow_step | flow rng | flow parameters | flow optimizer]
//! SHA-256 of every preceding byte (32 bytes)
//! ```
//!
//! Named tensors are `count`, then per tensor the name, the rank, the dims
//! and the values as `f64`.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::optim::{AdamWConfig, OptimizerState};
use crate::params::Parameters;
use crate::tensor::Tensor;
use crate::tokenizer::Vocabulary;

pub const MAGIC: &[u8; 5] = b"VLLM1";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    pub step: u64,
    /// The flow trainer draws from its own stream.
    pub rng_state: [u64; 4],
    pub params: Parameters,
    pub optimizer: OptimizerState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub vocab: Vocabulary,
    /// Completed token-model steps.
    pub token_step: u64,
    pub rng_state: [u64; 4],
    pub params: Parameters,
    pub optimizer: OptimizerState,
    pub flow: Option<FlowState>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }
    fn f64s(&mut self, vs: &[f64]) {
        self.usize(vs.len());
        for v in vs {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
    fn bytes(&mut self, b: &[u8]) {
        self.usize(b.len());
        self.0.extend_from_slice(b);
    }
    fn params(&mut self, p: &Parameters) {
        self.usize(p.len());
        for (name, t) in p.iter() {
            self.bytes(name.as_bytes());
            self.usize(t.shape().len());
            for &d in t.shape() {
                self.usize(d);
            }
            self.f64s(t.data());
        }
    }
    fn optimizer(&mut self, o: &OptimizerState) {
        self.u64(o.step);
        let c = o.config;
        self.f64s(&[c.learning_rate, c.beta1, c.beta2, c.epsilon, c.weight_decay]);
        for moments in [&o.first_moment, &o.second_moment] {
            self.usize(moments.len());
            for m in moments {
                self.f64s(m);
            }
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

fn bad(m: impl Into<String>) -> Error {
    Error::format("checkpoint", m)
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| bad("truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| bad("length overflow"))
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.usize()?;
        let raw = self.take(n.checked_mul(8).ok_or_else(|| bad("length overflow"))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
    fn bytes(&mut self) -> Result<&[u8]> {
        let n = self.usize()?;
        self.take(n)
    }
    fn string(&mut self) -> Result<String> {
        String::from_utf8(self.bytes()?.to_vec()).map_err(|_| bad("string is not UTF-8"))
    }
    fn params(&mut self) -> Result<Parameters> {
        let n = self.usize()?;
        let mut entries = Vec::new();
        for _ in 0..n {
            let name = self.string()?;
            let rank = self.usize()?;
            let shape = (0..rank).map(|_| self.usize()).collect::<Result<Vec<_>>>()?;
            let data = self.f64s()?;
            entries.push((name, Tensor::new(shape, data)?));
        }
        Parameters::from_named(entries)
    }
    fn optimizer(&mut self) -> Result<OptimizerState> {
        let step = self.u64()?;
        let c = self.f64s()?;
        if c.len() != 5 {
            return Err(bad("optimizer config must have 5 values"));
        }
        let mut moments = Vec::new();
        for _ in 0..2 {
            let n = self.usize()?;
            moments.push((0..n).map(|_| self.f64s()).collect::<Result<Vec<_>>>()?);
        }
        let second_moment = moments.pop().unwrap();
        let first_moment = moments.pop().unwrap();
        Ok(OptimizerState {
            step,
            first_moment,
            second_moment,
            config: AdamWConfig {
                learning_rate: c[0],
                beta1: c[1],
                beta2: c[2],
                epsilon: c[3],
                weight_decay: c[4],
            },
        })
    }
}

fn check_moments(params: &Parameters, opt: &OptimizerState) -> Result<()> {
    let ok = opt.first_moment.len() == params.len()
        && opt.second_moment.len() == params.len()
        && params
            .tensors()
            .iter()
            .zip(opt.first_moment.iter().zip(&opt.second_moment))
            .all(|(t, (m, v))| m.len() == t.len() && v.len() == t.len());
    if ok {
        Ok(())
    } else {
        Err(bad("optimizer moments do not match the parameters"))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.0.extend_from_slice(&VERSION.to_le_bytes());
        w.bytes(self.config.to_text().as_bytes());
        w.bytes(&self.vocab.to_bytes());
        w.u64(self.token_step);
        for s in self.rng_state {
            w.u64(s);
        }
        w.params(&self.params);
        w.optimizer(&self.optimizer);
        match &self.flow {
            None => w.0.push(0),
            Some(f) => {
                w.0.push(1);
                w.u64(f.step);
                for s in f.rng_state {
                    w.u64(s);
                }
                w.params(&f.params);
                w.optimizer(&f.optimizer);
            }
        }
        let digest = Sha256::digest(&w.0);
        w.0.extend_from_slice(&digest);
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + DIGEST_LEN || &bytes[..MAGIC.len()] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[5..9].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Digest);
        }
        let mut r = Reader { buf: body, pos: 9 };
        let config = RunConfig::parse(&r.string()?)?;
        let vocab_bytes = r.bytes()?;
        let (vocab, used) = Vocabulary::from_bytes(vocab_bytes)?;
        if used != vocab_bytes.len() {
            return Err(bad("trailing bytes in vocabulary block"));
        }
        let token_step = r.u64()?;
        let mut rng_state = [0u64; 4];
        for s in &mut rng_state {
            *s = r.u64()?;
        }
        let params = r.params()?;
        let optimizer = r.optimizer()?;
        check_moments(&params, &optimizer)?;
        let flow = match r.take(1)?[0] {
            0 => None,
            1 => {
                let step = r.u64()?;
                let mut rng_state = [0u64; 4];
                for s in &mut rng_state {
                    *s = r.u64()?;
                }
                let params = r.params()?;
                let optimizer = r.optimizer()?;
                check_moments(&params, &optimizer)?;
                Some(FlowState {
                    step,
                    rng_state,
                    params,
                    optimizer,
                })
            }
            f => return Err(bad(format!("bad flow flag {f}"))),
        };
        if r.pos != body.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Checkpoint {
            config,
            vocab,
            token_step,
            rng_state,
            params,
            optimizer,
            flow,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_bytes(&std::fs::read(path)?)
    }
}
