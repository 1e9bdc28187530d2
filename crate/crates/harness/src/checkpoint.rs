//! Versioned binary checkpoints: resolved config, online and target
//! parameters, Adam moments and the training RNG position.
//!
//! Layout (little-endian): magic `R2AC`, `u16` version, `u32` config
//! length, config text, `u64` learner step, `u64` Adam step, RNG seed
//! (32 bytes), `u64` stream, `u128` word position, then four tensor lists
//! (online, target, first moment, second moment), each a `u32` count of
//! tensors stored as `u32` rank, `u32` dims and `f64` values.

use std::path::Path;

use r2a_core::agent::Learner;
use r2a_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, HarnessResult};

pub const MAGIC: &[u8; 4] = b"R2AC";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub step: u64,
    pub online: Vec<Tensor>,
    pub target: Vec<Tensor>,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
    pub adam_step: u64,
    pub rng: ChaCha8Rng,
}

fn put_tensors(out: &mut Vec<u8>, ts: &[Tensor]) {
    out.extend_from_slice(&(ts.len() as u32).to_le_bytes());
    for t in ts {
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> HarnessResult<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(HarnessError::Checkpoint("truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> HarnessResult<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> HarnessResult<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensors(&mut self) -> HarnessResult<Vec<Tensor>> {
        let n = self.u32()? as usize;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let rank = self.u32()? as usize;
            let shape: Vec<usize> = (0..rank).map(|_| self.u32().map(|d| d as usize)).collect::<HarnessResult<_>>()?;
            let len: usize = shape.iter().product();
            let raw = self.take(len * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            out.push(Tensor::from_vec(shape, data).map_err(|e| HarnessError::Checkpoint(e.to_string()))?);
        }
        Ok(out)
    }
}

impl Checkpoint {
    pub fn capture(config: &ExperimentConfig, learner: &Learner, rng: &ChaCha8Rng) -> Self {
        Self {
            config: config.clone(),
            step: learner.step,
            online: learner.online.values().to_vec(),
            target: learner.target.values().to_vec(),
            first_moment: learner.optimizer.first_moment.clone(),
            second_moment: learner.optimizer.second_moment.clone(),
            adam_step: learner.optimizer.step_count,
            rng: rng.clone(),
        }
    }

    /// Rebuild a learner with the stored values. The architecture comes
    /// from the stored config.
    pub fn restore(&self) -> HarnessResult<(Learner, ChaCha8Rng)> {
        let mut init = ChaCha8Rng::seed_from_u64(self.config.seed);
        let mut learner = Learner::new(self.config.agent_config(), &mut init)?;
        let fill = |store: &mut r2a_core::ParamStore, values: &[Tensor]| -> HarnessResult<()> {
            if store.len() != values.len() {
                return Err(HarnessError::Checkpoint(format!(
                    "{} tensors stored, model has {}",
                    values.len(),
                    store.len()
                )));
            }
            for (i, v) in values.iter().enumerate() {
                store
                    .set_by_index(i, v.clone())
                    .map_err(|e| HarnessError::Checkpoint(e.to_string()))?;
            }
            Ok(())
        };
        fill(&mut learner.online, &self.online)?;
        fill(&mut learner.target, &self.target)?;
        if self.first_moment.len() != learner.online.len() || self.second_moment.len() != learner.online.len() {
            return Err(HarnessError::Checkpoint("optimizer state does not match the model".into()));
        }
        learner.optimizer.first_moment = self.first_moment.clone();
        learner.optimizer.second_moment = self.second_moment.clone();
        learner.optimizer.step_count = self.adam_step;
        learner.step = self.step;
        Ok((learner, self.rng.clone()))
    }

    pub fn encode(&self) -> Vec<u8> {
        let config = self.config.render();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(config.len() as u32).to_le_bytes());
        out.extend_from_slice(config.as_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.adam_step.to_le_bytes());
        out.extend_from_slice(&self.rng.get_seed());
        out.extend_from_slice(&self.rng.get_stream().to_le_bytes());
        out.extend_from_slice(&self.rng.get_word_pos().to_le_bytes());
        for ts in [&self.online, &self.target, &self.first_moment, &self.second_moment] {
            put_tensors(&mut out, ts);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> HarnessResult<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(HarnessError::Checkpoint("bad magic".into()));
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
        if version != VERSION {
            return Err(HarnessError::Checkpoint(format!("unsupported version {version}")));
        }
        let clen = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(clen)?).map_err(|e| HarnessError::Checkpoint(e.to_string()))?;
        let config = ExperimentConfig::parse(text)?;
        let step = r.u64()?;
        let adam_step = r.u64()?;
        let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);
        let online = r.tensors()?;
        let target = r.tensors()?;
        let first_moment = r.tensors()?;
        let second_moment = r.tensors()?;
        if r.pos != bytes.len() {
            return Err(HarnessError::Checkpoint("trailing bytes".into()));
        }
        Ok(Self {
            config,
            step,
            online,
            target,
            first_moment,
            second_moment,
            adam_step,
            rng,
        })
    }

    pub fn save(&self, path: &Path) -> HarnessResult<()> {
        std::fs::write(path, self.encode()).map_err(|e| HarnessError::io(path, e))
    }

    pub fn load(path: &Path) -> HarnessResult<Self> {
        let bytes = std::fs::read(path).map_err(|e| HarnessError::io(path, e))?;
        Self::decode(&bytes)
    }
}
