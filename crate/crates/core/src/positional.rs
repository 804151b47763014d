use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How the frequency exponent of the sinusoidal encoding is formed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PositionalExponent {
    /// `pos / 10000^(2i/d_model)`
    #[default]
    Conventional,
    /// `pos / 10000^(2^i/d_model)`; collapses to sin 0 / cos 0 once `2^i` gets large.
    PaperVerbatim,
}

/// Sinusoidal encoding of dimension `i` at position `pos`.
///
/// The first half of the dimensions carry sines and the second half cosines;
/// `i′` indexes within the half.
pub fn positional_encoding(
    pos: usize,
    i: usize,
    d_model: usize,
    exponent: PositionalExponent,
) -> Result<f64> {
    if i >= d_model {
        return Err(Error::Contract(format!(
            "positional index {i} out of range for d_model {d_model}"
        )));
    }
    let half = d_model.div_ceil(2);
    let (within, is_sin) = if i < half { (i, true) } else { (i - half, false) };
    let power = match exponent {
        PositionalExponent::Conventional => 2.0 * within as f64 / d_model as f64,
        PositionalExponent::PaperVerbatim => 2f64.powi(within as i32) / d_model as f64,
    };
    let angle = pos as f64 / 10000f64.powf(power);
    Ok(if is_sin { angle.sin() } else { angle.cos() })
}

/// Precomputed `max_len × d_model` table of [`positional_encoding`] values.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionalEncodingTable {
    table: Tensor,
}

impl PositionalEncodingTable {
    pub fn new(max_len: usize, d_model: usize, exponent: PositionalExponent) -> Result<Self> {
        let mut data = Vec::with_capacity(max_len * d_model);
        for pos in 0..max_len {
            for i in 0..d_model {
                data.push(positional_encoding(pos, i, d_model, exponent)?);
            }
        }
        Ok(Self {
            table: Tensor::matrix(max_len, d_model, data)?,
        })
    }

    pub fn max_len(&self) -> usize {
        self.table.shape()[0]
    }

    /// The first `len` rows.
    pub fn rows(&self, len: usize) -> Result<Tensor> {
        let (max_len, d) = self.table.dims2();
        if len == 0 || len > max_len {
            return Err(Error::Contract(format!(
                "sequence length {len} exceeds positional table length {max_len}"
            )));
        }
        Tensor::matrix(len, d, self.table.data()[..len * d].to_vec())
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }
}
