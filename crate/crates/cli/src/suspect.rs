//! Suspect endpoint resolution for the judge commands.
//!
//! A suspect is either a local model file or the URL of a prediction API
//! speaking the same wire format as the gateway (`POST <base>/v1/predict`).

use std::path::Path;

use base64::Engine;
use serde_json::json;

use markgate_core::hashcore::CanonicalInput;
use markgate_core::model::LoadedModel;
use markgate_core::verify::{ClassOracle, OracleError, VectorOracle};

pub enum Suspect {
    Local(LoadedModel),
    Remote(HttpOracle),
}

impl Suspect {
    /// Treats the argument as a URL when it starts with http(s)://, else as
    /// a model file path.
    pub fn resolve(arg: &str, api_key: Option<String>) -> anyhow::Result<Self> {
        if arg.starts_with("http://") || arg.starts_with("https://") {
            Ok(Suspect::Remote(HttpOracle::new(
                arg.trim_end_matches('/').to_string(),
                api_key,
            )?))
        } else {
            Ok(Suspect::Local(LoadedModel::from_file(Path::new(arg))?))
        }
    }

    pub fn as_class_oracle(&self) -> &dyn ClassOracle {
        match self {
            Suspect::Local(m) => m,
            Suspect::Remote(o) => o,
        }
    }

    pub fn as_vector_oracle(&self) -> &dyn VectorOracle {
        match self {
            Suspect::Local(m) => m,
            Suspect::Remote(o) => o,
        }
    }
}

pub struct HttpOracle {
    base: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpOracle {
    pub fn new(base: String, api_key: Option<String>) -> anyhow::Result<Self> {
        Ok(HttpOracle {
            base,
            api_key,
            client: reqwest::blocking::Client::builder()
                .timeout(std::time::Duration::from_secs(30))
                .build()?,
        })
    }

    fn query(&self, input: &CanonicalInput) -> Result<serde_json::Value, OracleError> {
        let body = json!({
            "input_b64": base64::engine::general_purpose::STANDARD.encode(input.bytes()),
            "shape": input.shape(),
            "dtype": "u8",
        });
        let mut req = self
            .client
            .post(format!("{}/v1/predict", self.base))
            .json(&body);
        if let Some(key) = &self.api_key {
            req = req.header("X-Api-Key", key);
        }
        let resp = req
            .send()
            .map_err(|e| OracleError::Unreachable(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(OracleError::Unreachable(format!(
                "suspect answered {}",
                resp.status()
            )));
        }
        resp.json()
            .map_err(|e| OracleError::Unreachable(e.to_string()))
    }
}

impl ClassOracle for HttpOracle {
    fn class_of(&self, input: &CanonicalInput) -> Result<usize, OracleError> {
        let v = self.query(input)?;
        if let Some(class) = v.get("class").and_then(|c| c.as_u64()) {
            return Ok(class as usize);
        }
        let probs = v.get("probs").and_then(|p| p.as_array()).ok_or_else(|| {
            OracleError::Unreachable("response has neither class nor probs".into())
        })?;
        let mut best = 0usize;
        let mut best_val = f64::NEG_INFINITY;
        for (i, p) in probs.iter().enumerate() {
            let val: f64 = p
                .as_str()
                .and_then(|s| s.parse().ok())
                .or_else(|| p.as_f64())
                .ok_or_else(|| OracleError::Unreachable(format!("bad prob at {i}")))?;
            if val > best_val {
                best_val = val;
                best = i;
            }
        }
        Ok(best)
    }
}

impl VectorOracle for HttpOracle {
    fn predict_wire(&self, input: &CanonicalInput) -> Result<Vec<String>, OracleError> {
        let v = self.query(input)?;
        let probs = v.get("probs").and_then(|p| p.as_array()).ok_or_else(|| {
            OracleError::Unreachable(
                "contest needs a full-vector API, got class-only response".into(),
            )
        })?;
        probs
            .iter()
            .enumerate()
            .map(|(i, p)| {
                p.as_str().map(String::from).ok_or_else(|| {
                    OracleError::Unreachable(format!("prob {i} is not a wire string"))
                })
            })
            .collect()
    }
}
