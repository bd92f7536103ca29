//! Single-file checkpoint container.
//!
//! Layout, all little-endian:
//! `"PLDK"`, `u32` version, then length-prefixed sections: model config text, named
//! tensors, training state, vocabulary text and free-form metadata.

use std::io::{Read, Write};
use std::path::Path;

use crate::autograd::ParamStore;
use crate::config::RunConfig;
use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::objective::MomentTracker;
use crate::tensor::Mat;
use crate::trainer::{AdamState, RngState, TrainState};

pub const MAGIC: &[u8; 4] = b"PLDK";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

/// Optimizer, tracker and RNG state needed to resume training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSnapshot {
    pub step: u64,
    pub adam: AdamState,
    pub tracker: MomentTracker,
    pub rng: RngState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub training: TrainingSnapshot,
    pub vocab: Option<Vocabulary>,
    /// Arbitrary `key=value` pairs, e.g. the effective run config.
    pub meta: Vec<(String, String)>,
}

impl Checkpoint {
    pub fn from_state(state: &TrainState, vocab: Option<Vocabulary>) -> Self {
        Self {
            model: state.model.clone(),
            training: TrainingSnapshot {
                step: state.step,
                adam: state.adam.clone(),
                tracker: state.tracker.clone(),
                rng: RngState::capture(&state.rng),
            },
            vocab,
            meta: Vec::new(),
        }
    }

    pub fn into_state(self) -> TrainState {
        TrainState {
            step: self.training.step,
            model: self.model,
            adam: self.training.adam,
            tracker: self.training.tracker,
            rng: self.training.rng.restore(),
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.str(&RunConfig::model_text(&self.model.config));
        let params = &self.model.params;
        w.u32(params.len() as u32);
        for (_, name, m) in params.iter() {
            w.tensor(name, m);
        }
        let t = &self.training;
        w.u64(t.step);
        w.u64(t.adam.t);
        for (prefix, mats) in [("adam.m.", &t.adam.m), ("adam.v.", &t.adam.v)] {
            for ((_, name, _), m) in params.iter().zip(mats) {
                w.tensor(&format!("{prefix}{name}"), m);
            }
        }
        let tr = &t.tracker;
        w.f64(tr.decay);
        w.u64(tr.warmup);
        w.u64(tr.updates);
        for i in 0..2 {
            w.u64(tr.counts[i]);
            w.f64(tr.m1[i]);
            w.f64(tr.m2[i]);
        }
        w.0.extend_from_slice(&t.rng.seed);
        w.u64(t.rng.stream);
        w.0.extend_from_slice(&t.rng.word_pos.to_le_bytes());
        match &self.vocab {
            Some(v) => {
                w.0.push(1);
                w.str(&v.to_text());
            }
            None => w.0.push(0),
        }
        w.u32(self.meta.len() as u32);
        for (k, v) in &self.meta {
            w.str(k);
            w.str(v);
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader(bytes);
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Version { found: version, expected: VERSION });
        }
        let config = RunConfig::parse_model(&r.str()?)?;
        let n = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..n {
            let (name, m) = r.tensor()?;
            params.add(name, m);
        }
        let model = Model::from_params(config, params)?;
        let step = r.u64()?;
        let adam_t = r.u64()?;
        let mut moments = [Vec::with_capacity(n), Vec::with_capacity(n)];
        for (k, prefix) in ["adam.m.", "adam.v."].iter().enumerate() {
            for (_, pname, p) in model.params.iter() {
                let (name, m) = r.tensor()?;
                if name != format!("{prefix}{pname}") || m.shape() != p.shape() {
                    return Err(Error::Format(format!("optimizer tensor {name} does not match parameter {pname}")));
                }
                moments[k].push(m);
            }
        }
        let [m, v] = moments;
        let mut tracker = MomentTracker { decay: r.f64()?, warmup: r.u64()?, updates: r.u64()?, ..MomentTracker::default() };
        for i in 0..2 {
            tracker.counts[i] = r.u64()?;
            tracker.m1[i] = r.f64()?;
            tracker.m2[i] = r.f64()?;
        }
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        let vocab = match r.take(1)?[0] {
            0 => None,
            1 => Some(Vocabulary::from_text(&r.str()?)?),
            f => return Err(Error::Format(format!("bad vocabulary flag {f}"))),
        };
        if let Some(v) = &vocab {
            if v.len() != model.config.vocab {
                return Err(Error::Format(format!("vocabulary of {} tokens for a model of {}", v.len(), model.config.vocab)));
            }
        }
        let n_meta = r.u32()? as usize;
        let mut meta = Vec::with_capacity(n_meta);
        for _ in 0..n_meta {
            meta.push((r.str()?, r.str()?));
        }
        if !r.0.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes after checkpoint", r.0.len())));
        }
        Ok(Self {
            model,
            training: TrainingSnapshot { step, adam: AdamState { m, v, t: adam_t }, tracker, rng: RngState { seed, stream, word_pos } },
            vocab,
            meta,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&self.to_bytes())?;
        f.sync_all()?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, x: u32) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }
    fn u64(&mut self, x: u64) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }
    fn f64(&mut self, x: f64) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn tensor(&mut self, name: &str, m: &Mat) {
        self.str(name);
        self.0.push(DTYPE_F64);
        self.u32(2);
        self.u64(m.rows as u64);
        self.u64(m.cols as u64);
        for x in &m.data {
            self.f64(*x);
        }
    }
}

struct Reader<'a>(&'a [u8]);

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.0.len() < n {
            return Err(Error::Format("truncated checkpoint".into()));
        }
        let (head, tail) = self.0.split_at(n);
        self.0 = tail;
        Ok(head)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("invalid UTF-8 in checkpoint".into()))
    }
    fn tensor(&mut self) -> Result<(String, Mat)> {
        let name = self.str()?;
        let dtype = self.take(1)?[0];
        if dtype != DTYPE_F64 {
            return Err(Error::Format(format!("tensor {name}: unsupported dtype tag {dtype}")));
        }
        let rank = self.u32()?;
        if rank != 2 {
            return Err(Error::Format(format!("tensor {name}: unsupported rank {rank}")));
        }
        let rows = self.u64()? as usize;
        let cols = self.u64()? as usize;
        let len = rows.checked_mul(cols).filter(|n| n.checked_mul(8).is_some_and(|b| b <= self.0.len()));
        let len = len.ok_or_else(|| Error::Format(format!("tensor {name}: truncated data")))?;
        let data = self.take(8 * len)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Ok((name, Mat::from_vec(rows, cols, data)))
    }
}
