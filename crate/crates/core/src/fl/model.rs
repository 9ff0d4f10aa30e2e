use serde::{Deserialize, Serialize};

use super::FlError;
use crate::secure_agg::{wire, FixedPointCodec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    LinearRegression,
    LogisticRegression,
}

/// Weight vector of dimension `features + 1`; the bias is the last entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub weights: Vec<f64>,
    pub kind: ModelKind,
}

impl ModelParams {
    pub fn zeros(kind: ModelKind, dim: usize) -> Self {
        ModelParams {
            weights: vec![0.0; dim],
            kind,
        }
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.is_finite())
    }

    /// Linear score `w . x + b`.
    pub fn margin(&self, x: &[f64]) -> f64 {
        let (w, b) = self.weights.split_at(self.weights.len() - 1);
        w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + b[0]
    }

    /// Regression output or positive-class probability.
    pub fn predict(&self, x: &[f64]) -> f64 {
        let z = self.margin(x);
        match self.kind {
            ModelKind::LinearRegression => z,
            ModelKind::LogisticRegression => sigmoid(z),
        }
    }

    /// Fixed-point blob: the weights encoded as field elements.
    pub fn to_blob(&self, codec: &FixedPointCodec) -> Result<Vec<u8>, FlError> {
        Ok(wire::encode_blob(&codec.encode_vec(&self.weights)?))
    }

    pub fn from_blob(bytes: &[u8], kind: ModelKind, codec: &FixedPointCodec) -> Result<Self, FlError> {
        Ok(ModelParams {
            weights: codec.decode_vec(&wire::decode_blob(bytes)?),
            kind,
        })
    }

    /// Copy with every weight rounded onto the codec grid.
    pub fn quantized(&self, codec: &FixedPointCodec) -> Result<Self, FlError> {
        Ok(ModelParams {
            weights: self
                .weights
                .iter()
                .map(|&w| codec.quantize(w))
                .collect::<Result<_, _>>()?,
            kind: self.kind,
        })
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
