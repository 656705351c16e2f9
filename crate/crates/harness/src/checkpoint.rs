//! Binary checkpoint: everything needed to resume a run bit-exactly.
//!
//! Layout (little-endian):
//!
//! ```text
//! "AEMCKPT1"              8 bytes
//! version                 u8
//! config hash             32 bytes
//! epoch                   u32
//! parameters              tensor list
//! adam step count         u64
//! adam first moments      tensor list
//! adam second moments     tensor list
//! rng seed                32 bytes
//! rng stream              u64
//! rng word position       u128
//! best snapshot flag      u8, then epoch u32, val auc f64, tensor list
//! config text             u32 length, UTF-8 bytes
//! ```
//!
//! A tensor list is a `u32` count followed by `rows: u32, cols: u32` and the
//! row-major `f64` values of each tensor.

use std::fs;
use std::path::Path;

use aem_core::model::ModelParams;
use aem_core::optim::{AdamConfig, AdamState};
use aem_core::tensor::Matrix;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::config::TrainConfig;
use crate::error::{HarnessError, Result};
use crate::train::BestSnapshot;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"AEMCKPT1";
pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config_hash: [u8; 32],
    /// Completed epochs.
    pub epoch: u64,
    pub params: ModelParams,
    pub adam: AdamState,
    pub rng: ChaCha8Rng,
    pub best: Option<BestSnapshot>,
    pub config_text: String,
}

fn put_tensors(out: &mut Vec<u8>, tensors: &[&Matrix]) {
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn param_values(p: &ModelParams) -> Vec<&Matrix> {
    p.tensors().into_iter().map(|t| &t.value).collect()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(HarnessError::Checkpoint {
            offset: self.pos as u64,
            message: message.into(),
        })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return self.fail(format!(
                "truncated while reading {what}: need {n} bytes, {} left",
                self.bytes.len() - self.pos
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array(what)?))
    }

    fn tensors(&mut self, what: &str) -> Result<Vec<Matrix>> {
        let count = self.u32(what)? as usize;
        let mut out = Vec::with_capacity(count.min(64));
        for _ in 0..count {
            let rows = self.u32(what)? as usize;
            let cols = self.u32(what)? as usize;
            let len = rows.checked_mul(cols).filter(|l| l.checked_mul(8).is_some());
            let Some(len) = len else {
                return self.fail(format!("tensor shape {rows}x{cols} overflows"));
            };
            let raw = self.take(len * 8, what)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            out.push(Matrix::new(rows, cols, data)?);
        }
        Ok(out)
    }
}

fn fill_params(template: &ModelParams, values: Vec<Matrix>, what: &str, offset: usize) -> Result<ModelParams> {
    let mut params = template.clone();
    let mut slots = params.tensors_mut();
    if slots.len() != values.len() {
        return Err(HarnessError::Checkpoint {
            offset: offset as u64,
            message: format!("{what}: expected {} tensors, found {}", slots.len(), values.len()),
        });
    }
    for (slot, v) in slots.iter_mut().zip(values) {
        if slot.value.shape() != v.shape() {
            return Err(HarnessError::Checkpoint {
                offset: offset as u64,
                message: format!(
                    "{what}: tensor shape {:?} does not match the architecture's {:?}",
                    v.shape(),
                    slot.value.shape()
                ),
            });
        }
        slot.value = v;
    }
    drop(slots);
    params.zero_grad();
    Ok(params)
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(CHECKPOINT_VERSION);
        out.extend_from_slice(&self.config_hash);
        out.extend_from_slice(&(self.epoch as u32).to_le_bytes());
        put_tensors(&mut out, &param_values(&self.params));
        out.extend_from_slice(&self.adam.t.to_le_bytes());
        put_tensors(&mut out, &self.adam.m.iter().collect::<Vec<_>>());
        put_tensors(&mut out, &self.adam.v.iter().collect::<Vec<_>>());
        out.extend_from_slice(&self.rng.get_seed());
        out.extend_from_slice(&self.rng.get_stream().to_le_bytes());
        out.extend_from_slice(&self.rng.get_word_pos().to_le_bytes());
        match &self.best {
            None => out.push(0),
            Some(b) => {
                out.push(1);
                out.extend_from_slice(&(b.epoch as u32).to_le_bytes());
                out.extend_from_slice(&b.val_auc.to_le_bytes());
                put_tensors(&mut out, &param_values(&b.params));
            }
        }
        out.extend_from_slice(&(self.config_text.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config_text.as_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "magic")? != CHECKPOINT_MAGIC {
            r.pos = 0;
            return r.fail("not a checkpoint file (bad magic)");
        }
        let version = r.array::<1>("version")?[0];
        if version != CHECKPOINT_VERSION {
            r.pos -= 1;
            return r.fail(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            ));
        }
        let config_hash = r.array::<32>("config hash")?;
        let epoch = r.u32("epoch")? as u64;
        let params_at = r.pos;
        let params = r.tensors("parameters")?;
        let t = r.u64("adam step")?;
        let m_at = r.pos;
        let m = r.tensors("adam moments")?;
        let v = r.tensors("adam moments")?;
        let seed = r.array::<32>("rng seed")?;
        let stream = r.u64("rng stream")?;
        let word_pos = u128::from_le_bytes(r.array::<16>("rng position")?);
        let best = match r.array::<1>("best flag")?[0] {
            0 => None,
            1 => {
                let e = r.u32("best epoch")? as u64;
                let auc = r.f64("best score")?;
                let at = r.pos;
                Some((e, auc, r.tensors("best parameters")?, at))
            }
            f => {
                r.pos -= 1;
                return r.fail(format!("invalid best-snapshot flag {f}"));
            }
        };
        let len = r.u32("config length")? as usize;
        let text_at = r.pos;
        let config_text = String::from_utf8(r.take(len, "config text")?.to_vec()).map_err(|_| {
            HarnessError::Checkpoint {
                offset: text_at as u64,
                message: "config text is not UTF-8".into(),
            }
        })?;
        if r.pos != bytes.len() {
            return r.fail(format!("{} trailing bytes", bytes.len() - r.pos));
        }
        let cfg = TrainConfig::parse(&config_text)?;
        if cfg.hash() != config_hash {
            return Err(HarnessError::Checkpoint {
                offset: 9,
                message: "config hash does not match the embedded config".into(),
            });
        }
        let template = ModelParams::init(&cfg.architecture(), 0)?;
        let params = fill_params(&template, params, "parameters", params_at)?;
        let mut adam = AdamState::new(&params, AdamConfig::default());
        for (name, src, dst) in [("first moments", m, &mut adam.m), ("second moments", v, &mut adam.v)] {
            if src.len() != dst.len() || src.iter().zip(dst.iter()).any(|(a, b)| a.shape() != b.shape()) {
                return Err(HarnessError::Checkpoint {
                    offset: m_at as u64,
                    message: format!("adam {name} do not match the parameter shapes"),
                });
            }
            *dst = src;
        }
        adam.t = t;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);
        let best = match best {
            None => None,
            Some((epoch, val_auc, values, at)) => Some(BestSnapshot {
                epoch,
                val_auc,
                params: fill_params(&template, values, "best parameters", at)?,
            }),
        };
        Ok(Self {
            config_hash,
            epoch,
            params,
            adam,
            rng,
            best,
            config_text,
        })
    }

    pub fn config(&self) -> Result<TrainConfig> {
        TrainConfig::parse(&self.config_text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::{Dataset, Trainer};

    fn small_config() -> TrainConfig {
        TrainConfig::parse(
            "synth_bags_per_class = 6\nsynth_min_instances = 3\nsynth_max_instances = 6\ninput_dim = 4\nembed_dim = 5\nattn_hidden = 3\nepochs = 4\nselect = val_best\nreg = aem\nlambda = 0.1\n",
        )
        .unwrap()
    }

    #[test]
    fn round_trip_after_training() {
        let cfg = small_config();
        let data = Dataset::from_config(&cfg).unwrap();
        let mut t = Trainer::new(&cfg, &data).unwrap();
        t.train_epoch().unwrap();
        t.train_epoch().unwrap();
        let ckpt = t.checkpoint();
        let back = Checkpoint::decode(&ckpt.encode()).unwrap();
        assert_eq!(back.epoch, 2);
        assert_eq!(back.params, ckpt.params);
        assert_eq!(back.adam, ckpt.adam);
        assert_eq!(back.rng, ckpt.rng);
        assert_eq!(back.best, ckpt.best);
        assert!(back.best.is_some());
        assert_eq!(back.encode(), ckpt.encode());
    }

    #[test]
    fn rejects_corruption() {
        let cfg = small_config();
        let data = Dataset::from_config(&cfg).unwrap();
        let bytes = Trainer::new(&cfg, &data).unwrap().checkpoint().encode();
        let mut bad = bytes.clone();
        bad[8] = 9;
        match Checkpoint::decode(&bad) {
            Err(HarnessError::Checkpoint { offset, .. }) => assert_eq!(offset, 8),
            other => panic!("{other:?}"),
        }
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 3]).is_err());
        assert!(Checkpoint::decode(b"MILBAG01").is_err());
        let mut bad = bytes.clone();
        bad[12] ^= 1;
        assert!(Checkpoint::decode(&bad).is_err());
    }
}
