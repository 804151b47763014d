//! Binary checkpoints.
//!
//! Little-endian layout:
//!
//! ```text
//! "BSCK"  u32 version=1  u32 block_count
//! per block: u32 name_len  name (UTF-8)  u32 rank  rank × u32 dims  numel × f64
//! ```
//!
//! Blocks, in order: `config.*` model hyperparameters, `param.*` model
//! parameters, `optim.*` optimizer state, `train.*` counters and `rng.*` noise
//! generator state. Integers wider than 32 bits are split into two exactly
//! representable 32-bit halves.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::data::format_err;
use crate::error::{Error, FormatError, Result};
use crate::featfile::Reader;
use crate::model::{Model, ModelConfig};
use crate::optim::Optimizer;
use crate::params::ParamStore;
use crate::positional::PositionalExponent;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"BSCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Complete training state.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub params: ParamStore,
    pub optimizer: Optimizer,
    /// Number of completed epochs.
    pub epoch: u32,
    /// Number of completed optimizer steps.
    pub step: u64,
    /// Generator for the per-activation noise.
    pub rng: ChaCha8Rng,
}

/// One named block of a checkpoint file.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Block {
    fn scalar(name: impl Into<String>, v: f64) -> Self {
        Self {
            name: name.into(),
            shape: vec![1],
            data: vec![v],
        }
    }

    fn wide(name: impl Into<String>, words: &[u64]) -> Self {
        let data: Vec<f64> = words
            .iter()
            .flat_map(|&w| [(w >> 32) as f64, (w & 0xffff_ffff) as f64])
            .collect();
        Self {
            name: name.into(),
            shape: vec![data.len()],
            data,
        }
    }
}

fn config_blocks(c: &ModelConfig) -> Vec<Block> {
    let exp = match c.positional_exponent {
        PositionalExponent::Conventional => 0.0,
        PositionalExponent::PaperVerbatim => 1.0,
    };
    [
        ("d_model", c.d_model as f64),
        ("d_ff", c.d_ff as f64),
        ("n_heads", c.n_heads as f64),
        ("encoder_layers", c.encoder_layers as f64),
        ("decoder_layers", c.decoder_layers as f64),
        ("vocab_size", c.vocab_size as f64),
        ("feature_dim", c.feature_dim as f64),
        ("max_target_len", c.max_target_len as f64),
        ("max_source_len", c.max_source_len as f64),
        ("conv_channels", c.conv_channels as f64),
        ("positional_exponent", exp),
    ]
    .into_iter()
    .map(|(k, v)| Block::scalar(format!("config.{k}"), v))
    .collect()
}

impl Checkpoint {
    pub fn to_blocks(&self) -> Vec<Block> {
        let mut blocks = config_blocks(&self.model_config);
        for (name, t) in self.params.iter() {
            blocks.push(Block {
                name: format!("param.{name}"),
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            });
        }
        match &self.optimizer {
            Optimizer::Sgd { lr } => {
                blocks.push(Block::scalar("optim.kind", 1.0));
                blocks.push(Block::scalar("optim.lr", *lr));
            }
            Optimizer::Adam { lr, step, m, v } => {
                blocks.push(Block::scalar("optim.kind", 0.0));
                blocks.push(Block::scalar("optim.lr", *lr));
                blocks.push(Block::wide("optim.adam_step", &[*step]));
                for (k, (name, t)) in self.params.iter().enumerate() {
                    blocks.push(Block {
                        name: format!("optim.m.{name}"),
                        shape: t.shape().to_vec(),
                        data: m[k].clone(),
                    });
                    blocks.push(Block {
                        name: format!("optim.v.{name}"),
                        shape: t.shape().to_vec(),
                        data: v[k].clone(),
                    });
                }
            }
        }
        blocks.push(Block::scalar("train.epoch", self.epoch as f64));
        blocks.push(Block::wide("train.step", &[self.step]));
        let seed = self.rng.get_seed();
        let seed_words: Vec<u64> = seed
            .chunks(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        blocks.push(Block::wide("rng.seed", &seed_words));
        blocks.push(Block::wide("rng.stream", &[self.rng.get_stream()]));
        let pos = self.rng.get_word_pos();
        blocks.push(Block::wide("rng.word_pos", &[(pos >> 64) as u64, pos as u64]));
        blocks
    }

    pub fn encode(&self) -> Vec<u8> {
        encode_blocks(&self.to_blocks())
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, FormatError> {
        let blocks = decode_blocks(bytes)?;
        Self::from_blocks(&blocks)
    }

    pub fn from_blocks(blocks: &[Block]) -> std::result::Result<Self, FormatError> {
        let find = |name: &str| -> std::result::Result<&Block, FormatError> {
            blocks
                .iter()
                .find(|b| b.name == name)
                .ok_or_else(|| FormatError::MalformedHeader(format!("missing block `{name}`")))
        };
        let scalar = |name: &str| -> std::result::Result<f64, FormatError> {
            let b = find(name)?;
            match b.data.as_slice() {
                [v] => Ok(*v),
                _ => Err(FormatError::DimensionMismatch(format!("`{name}` is not a scalar"))),
            }
        };
        let count = |name: &str| -> std::result::Result<usize, FormatError> {
            let v = scalar(&format!("config.{name}"))?;
            if v < 0.0 || v.fract() != 0.0 || v > u32::MAX as f64 {
                return Err(FormatError::MalformedHeader(format!("bad value for `{name}`")));
            }
            Ok(v as usize)
        };
        let wide = |name: &str, n: usize| -> std::result::Result<Vec<u64>, FormatError> {
            let b = find(name)?;
            if b.data.len() != 2 * n {
                return Err(FormatError::DimensionMismatch(format!("`{name}` has the wrong length")));
            }
            b.data
                .chunks(2)
                .map(|p| {
                    let ok = |x: f64| x >= 0.0 && x.fract() == 0.0 && x <= u32::MAX as f64;
                    if ok(p[0]) && ok(p[1]) {
                        Ok(((p[0] as u64) << 32) | p[1] as u64)
                    } else {
                        Err(FormatError::MalformedHeader(format!("bad integer in `{name}`")))
                    }
                })
                .collect()
        };

        let model_config = ModelConfig {
            d_model: count("d_model")?,
            d_ff: count("d_ff")?,
            n_heads: count("n_heads")?,
            encoder_layers: count("encoder_layers")?,
            decoder_layers: count("decoder_layers")?,
            vocab_size: count("vocab_size")?,
            feature_dim: count("feature_dim")?,
            max_target_len: count("max_target_len")?,
            max_source_len: count("max_source_len")?,
            conv_channels: count("conv_channels")?,
            positional_exponent: match count("positional_exponent")? {
                0 => PositionalExponent::Conventional,
                1 => PositionalExponent::PaperVerbatim,
                _ => {
                    return Err(FormatError::MalformedHeader(
                        "bad positional exponent".into(),
                    ))
                }
            },
        };
        let (_, mut params) = Model::layout(model_config.clone())
            .map_err(|e| FormatError::MalformedHeader(e.to_string()))?;
        let ids: Vec<_> = params.ids().collect();
        let take = |name: String, expect: &[usize]| -> std::result::Result<Vec<f64>, FormatError> {
            let b = find(&name)?;
            if b.shape != expect {
                return Err(FormatError::DimensionMismatch(format!(
                    "`{name}` has shape {:?}, expected {expect:?}",
                    b.shape
                )));
            }
            Ok(b.data.clone())
        };
        let mut m = Vec::new();
        let mut v = Vec::new();
        let kind = scalar("optim.kind")?;
        let lr = scalar("optim.lr")?;
        for &id in &ids {
            let name = params.name(id).to_string();
            let shape = params.get(id).shape().to_vec();
            let data = take(format!("param.{name}"), &shape)?;
            *params.get_mut(id) = Tensor::new(shape.clone(), data).expect("shape checked");
            if kind == 0.0 {
                m.push(take(format!("optim.m.{name}"), &shape)?);
                v.push(take(format!("optim.v.{name}"), &shape)?);
            }
        }
        let optimizer = match kind {
            0.0 => Optimizer::Adam {
                lr,
                step: wide("optim.adam_step", 1)?[0],
                m,
                v,
            },
            1.0 => Optimizer::Sgd { lr },
            _ => return Err(FormatError::MalformedHeader("unknown optimizer kind".into())),
        };
        let epoch = scalar("train.epoch")?;
        if epoch < 0.0 || epoch.fract() != 0.0 || epoch > u32::MAX as f64 {
            return Err(FormatError::MalformedHeader("bad epoch counter".into()));
        }
        let mut seed = [0u8; 32];
        for (chunk, w) in seed.chunks_mut(8).zip(wide("rng.seed", 4)?) {
            chunk.copy_from_slice(&w.to_le_bytes());
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(wide("rng.stream", 1)?[0]);
        let pos = wide("rng.word_pos", 2)?;
        rng.set_word_pos(((pos[0] as u128) << 64) | pos[1] as u128);
        Ok(Self {
            model_config,
            params,
            optimizer,
            epoch: epoch as u32,
            step: wide("train.step", 1)?[0],
            rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::decode(&bytes).map_err(|kind| format_err(path, kind))
    }

    /// Rebuilds the model structure that matches the stored parameters.
    pub fn model(&self) -> Result<Model> {
        let (model, layout) = Model::layout(self.model_config.clone())?;
        if layout.len() != self.params.len() {
            return Err(Error::Contract("checkpoint parameters do not match the model".into()));
        }
        Ok(model)
    }
}

pub fn encode_blocks(blocks: &[Block]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for b in blocks {
        out.extend_from_slice(&(b.name.len() as u32).to_le_bytes());
        out.extend_from_slice(b.name.as_bytes());
        out.extend_from_slice(&(b.shape.len() as u32).to_le_bytes());
        for &d in &b.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &b.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_blocks(bytes: &[u8]) -> std::result::Result<Vec<Block>, FormatError> {
    let mut r = Reader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let count = r.u32("block count")? as usize;
    let mut blocks = Vec::with_capacity(count.min(1 << 12));
    for _ in 0..count {
        let len = r.u32("block name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "block name")?)
            .map_err(|_| FormatError::MalformedHeader("block name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("block rank")? as usize;
        if rank == 0 || rank > 8 {
            return Err(FormatError::MalformedHeader(format!("`{name}` has rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| r.u32("block shape").map(|d| d as usize))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = match numel {
            Some(n) if n > 0 => n,
            _ => return Err(FormatError::DimensionMismatch(format!("`{name}` has shape {shape:?}"))),
        };
        if numel.saturating_mul(8) > r.remaining() {
            return Err(FormatError::Truncated("block payload"));
        }
        let data = (0..numel)
            .map(|_| r.f64("block payload"))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        blocks.push(Block { name, shape, data });
    }
    if r.remaining() != 0 {
        return Err(FormatError::TrailingBytes);
    }
    Ok(blocks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::OptimizerKind;
    use rand::RngCore;

    fn tiny() -> Checkpoint {
        let config = ModelConfig {
            d_model: 8,
            d_ff: 8,
            n_heads: 2,
            encoder_layers: 1,
            decoder_layers: 1,
            vocab_size: 7,
            feature_dim: 8,
            max_target_len: 8,
            max_source_len: 8,
            conv_channels: 2,
            ..ModelConfig::desk()
        };
        let (_, params) = Model::layout(config.clone()).unwrap();
        let mut optimizer = Optimizer::new(OptimizerKind::Adam, 1e-3, &params);
        if let Optimizer::Adam { m, step, .. } = &mut optimizer {
            m[0][0] = 0.25;
            *step = (1 << 40) + 3;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(u64::MAX - 5);
        rng.set_stream(99);
        rng.next_u64();
        Checkpoint {
            model_config: config,
            params,
            optimizer,
            epoch: 4,
            step: 123,
            rng,
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let ck = tiny();
        let bytes = ck.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back.encode(), bytes);
        assert_eq!(back.optimizer, ck.optimizer);
        assert_eq!(back.epoch, 4);
        let (mut a, mut b) = (ck.rng.clone(), back.rng.clone());
        assert_eq!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn truncation_and_magic_are_reported() {
        let bytes = tiny().encode();
        assert!(matches!(
            Checkpoint::decode(&bytes[..bytes.len() - 3]),
            Err(FormatError::Truncated(_))
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::decode(&bad), Err(FormatError::BadMagic { .. })));
    }
}
