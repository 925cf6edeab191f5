//! Pluggable victim-model backends.
//!
//! The watermarking protocol never looks inside the model; it only needs a
//! deterministic prediction function and a commitment digest. Two desk-scale
//! backends cover testing and simulation: a lookup table keyed by canonical
//! input digest, and a linear softmax layer. The commitment digest is
//! SHA3-256 over the exact model file bytes, never a re-serialization.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::{sha3_256, to_hex, Digest32};
use crate::hashcore::CanonicalInput;
use crate::permute::PredictionVector;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("input shape {actual:?} does not match model input shape {expected:?}")]
    ShapeMismatch {
        expected: Vec<u32>,
        actual: Vec<u32>,
    },
    #[error("lookup backend has no entry for input digest {0}")]
    UnknownInput(String),
    #[error("invalid model: {0}")]
    BadModel(String),
    #[error("model io: {0}")]
    Io(#[from] std::io::Error),
    #[error("model parse: {0}")]
    Parse(#[from] serde_json::Error),
}

/// Backend selector plus its parameters, adjacently tagged so the JSON model
/// file reads `"backend": "lookup", "payload": {...}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "backend", content = "payload", rename_all = "lowercase")]
pub enum Backend {
    Lookup {
        /// canonical input digest (hex) -> probability vector
        entries: BTreeMap<String, Vec<f64>>,
    },
    Linear {
        /// m rows, one per class; each row has one weight per input element
        weights: Vec<Vec<f64>>,
        bias: Vec<f64>,
    },
}

/// A deterministic classifier spec as stored in the canonical model file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSpec {
    pub model_id: String,
    pub m: usize,
    pub input_shape: Vec<u32>,
    #[serde(flatten)]
    pub backend: Backend,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.m < 2 {
            return Err(ModelError::BadModel(format!("m = {} < 2", self.m)));
        }
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(ModelError::BadModel(
                "input_shape must be non-empty with dims >= 1".into(),
            ));
        }
        let n: usize = self.input_shape.iter().map(|&d| d as usize).product();
        match &self.backend {
            Backend::Lookup { entries } => {
                for (key, probs) in entries {
                    if key.len() != 64 || !key.chars().all(|c| c.is_ascii_hexdigit()) {
                        return Err(ModelError::BadModel(format!(
                            "lookup key {key:?} is not a hex digest"
                        )));
                    }
                    if probs.len() != self.m {
                        return Err(ModelError::BadModel(format!(
                            "lookup entry {key} has {} probs, expected {}",
                            probs.len(),
                            self.m
                        )));
                    }
                    PredictionVector::new(probs.clone())
                        .map_err(|e| ModelError::BadModel(format!("lookup entry {key}: {e}")))?;
                }
            }
            Backend::Linear { weights, bias } => {
                if weights.len() != self.m || bias.len() != self.m {
                    return Err(ModelError::BadModel(format!(
                        "linear backend needs {} rows and biases, got {} and {}",
                        self.m,
                        weights.len(),
                        bias.len()
                    )));
                }
                for (i, row) in weights.iter().enumerate() {
                    if row.len() != n {
                        return Err(ModelError::BadModel(format!(
                            "weight row {i} has {} columns, expected {n}",
                            row.len()
                        )));
                    }
                    if row.iter().any(|w| !w.is_finite()) {
                        return Err(ModelError::BadModel(format!(
                            "weight row {i} has non-finite values"
                        )));
                    }
                }
                if bias.iter().any(|b| !b.is_finite()) {
                    return Err(ModelError::BadModel("bias has non-finite values".into()));
                }
            }
        }
        Ok(())
    }
}

/// A model bound to the exact bytes it was committed under.
#[derive(Debug, Clone)]
pub struct LoadedModel {
    spec: ModelSpec,
    raw: Arc<Vec<u8>>,
    digest: Digest32,
}

impl LoadedModel {
    /// Parses and validates a canonical model file; the digest covers the
    /// bytes exactly as given.
    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self, ModelError> {
        let spec: ModelSpec = serde_json::from_slice(&bytes)?;
        spec.validate()?;
        let digest = sha3_256(&bytes);
        Ok(LoadedModel {
            spec,
            raw: Arc::new(bytes),
            digest,
        })
    }

    pub fn from_file(path: &Path) -> Result<Self, ModelError> {
        Self::from_bytes(std::fs::read(path)?)
    }

    /// Serializes an in-memory spec once; the emitted bytes become the
    /// canonical file form for this model.
    pub fn from_spec(spec: &ModelSpec) -> Result<Self, ModelError> {
        spec.validate()?;
        let bytes = serde_json::to_vec(spec)?;
        Self::from_bytes(bytes)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        std::fs::write(path, self.raw.as_slice())?;
        Ok(())
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn raw_bytes(&self) -> &[u8] {
        &self.raw
    }

    /// SHA3-256 commitment over the canonical model file bytes.
    pub fn digest(&self) -> Digest32 {
        self.digest
    }

    pub fn num_classes(&self) -> usize {
        self.spec.m
    }

    pub fn input_shape(&self) -> &[u32] {
        &self.spec.input_shape
    }

    /// The honest prediction for an in-shape input.
    pub fn predict(&self, x: &CanonicalInput) -> Result<PredictionVector, ModelError> {
        if x.shape() != self.spec.input_shape {
            return Err(ModelError::ShapeMismatch {
                expected: self.spec.input_shape.clone(),
                actual: x.shape().to_vec(),
            });
        }
        match &self.spec.backend {
            Backend::Lookup { entries } => {
                let key = to_hex(&x.digest());
                let probs = entries.get(&key).ok_or(ModelError::UnknownInput(key))?;
                Ok(PredictionVector::new(probs.clone()).expect("validated at load"))
            }
            Backend::Linear { weights, bias } => {
                let scaled: Vec<f64> = x.bytes().iter().map(|&b| b as f64 / 255.0).collect();
                let logits: Vec<f64> = weights
                    .iter()
                    .zip(bias)
                    .map(|(row, b)| row.iter().zip(&scaled).map(|(w, v)| w * v).sum::<f64>() + b)
                    .collect();
                Ok(softmax(&logits))
            }
        }
    }

    /// Argmax of the honest prediction.
    pub fn classify(&self, x: &CanonicalInput) -> Result<usize, ModelError> {
        Ok(self.predict(x)?.argmax())
    }
}

fn softmax(logits: &[f64]) -> PredictionVector {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    PredictionVector::new(exps.iter().map(|e| e / sum).collect()).expect("softmax is normalized")
}
