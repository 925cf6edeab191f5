//! Desk-scale adversary simulation: drives client query streams against a
//! gateway, stands in a parameterized surrogate for the trained model, and
//! measures watermark accuracy and verification outcomes, including
//! collusion splits.
//!
//! Surrogate training is deliberately out of scope; the surrogate is a
//! response table whose behavior is set by two knobs. `retention` is the
//! probability a trigger input is answered with its recorded backdoored
//! class (the stand-in for a trained surrogate's watermark accuracy), and
//! `oracle_acc` is the probability a seen non-trigger input gets the honest
//! class. Misses fall back to a uniform draw over the remaining classes, and
//! inputs the surrogate never saw always take the fallback. Every draw is a
//! keyed hash of (seed, input digest), so answers are fixed per input and
//! independent of query order: identical seeds replay identical scenarios.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Arc;

use num_rational::BigRational;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::bulletin::Bulletin;
use crate::digest::{sha3_256, to_hex, Digest32};
use crate::gateway::{Clock, FixedClock, Gateway, GatewayError, GatewayOptions, ResponseMode};
use crate::hashcore::{canonicalize, CanonicalInput, Dtype, ModelKeySet, WatermarkRatio};
use crate::mapping::MappingConfig;
use crate::model::{Backend, LoadedModel, ModelError, ModelSpec};
use crate::stats;
use crate::triggerstore::WatermarkBundle;
use crate::verify::{self, ClassOracle, OracleError, VerificationReport, VerifyError};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("gateway unreachable: {0}")]
    GatewayUnreachable(#[from] GatewayError),
    #[error("bundle is empty")]
    EmptyBundle,
    #[error(transparent)]
    Verify(#[from] VerifyError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Store(#[from] crate::triggerstore::StoreError),
    #[error("bad scenario: {0}")]
    BadScenario(String),
    #[error("scenario io: {0}")]
    Io(#[from] std::io::Error),
}

/// Surrogate behavior knobs.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SurrogateParams {
    /// Probability a trigger input is answered with its backdoored class.
    pub retention: f64,
    /// Probability a seen non-trigger input is answered with the honest class.
    pub oracle_acc: f64,
    pub seed: u64,
}

/// One observed (query, response) pair with the defender-side truth.
#[derive(Debug, Clone)]
pub struct Observation {
    pub input: CanonicalInput,
    /// Class the API answered (argmax of the released vector).
    pub response_class: usize,
    pub honest_class: usize,
    pub backdoored: bool,
}

/// One client's side of an extraction run.
#[derive(Debug, Clone)]
pub struct ClientTrace {
    pub client_id: String,
    pub observations: Vec<Observation>,
    /// Defender-side watermark accumulated from this client's queries.
    pub bundle: WatermarkBundle,
}

/// Partitions `inputs` across `n_clients` round-robin and replays them
/// through the gateway, returning each client's observed corpus and the
/// defender-side bundle it accumulated.
pub fn run_extraction(
    gateway: &Gateway,
    inputs: &[CanonicalInput],
    n_clients: u64,
    client_prefix: &str,
) -> Result<Vec<ClientTrace>, SimError> {
    if n_clients < 1 {
        return Err(SimError::BadScenario("n_clients must be >= 1".into()));
    }
    let n_clients = n_clients as usize;
    let mut per_client: Vec<Vec<CanonicalInput>> = vec![Vec::new(); n_clients];
    for (i, x) in inputs.iter().enumerate() {
        per_client[i % n_clients].push(x.clone());
    }
    let mut traces = Vec::with_capacity(n_clients);
    for (c, chunk) in per_client.into_iter().enumerate() {
        let client_id = format!("{client_prefix}{c:03}");
        let decisions = gateway.query_batch_decisions(&client_id, &chunk)?;
        let observations = chunk
            .iter()
            .zip(&decisions)
            .map(|(x, d)| Observation {
                input: x.clone(),
                response_class: d.response_class(),
                honest_class: d.honest_class,
                backdoored: d.watermarked(),
            })
            .collect();
        let bundle = gateway
            .store()
            .bundle(&client_id, gateway.model().digest())?;
        traces.push(ClientTrace {
            client_id,
            observations,
            bundle,
        });
    }
    Ok(traces)
}

enum Known {
    Trigger { b_class: usize },
    Seen { honest: usize },
}

/// A parametric response table standing in for a trained surrogate.
///
/// Answers are pure functions of (seed, input digest): repeated queries of
/// one input always return the same class, regardless of order.
pub struct SurrogateSim {
    params: SurrogateParams,
    m: usize,
    known: HashMap<Digest32, Known>,
    /// Resolves honest classes for inputs outside the training corpus.
    victim: Arc<LoadedModel>,
}

impl SurrogateSim {
    /// Builds the surrogate from the corpora of the given traces (the
    /// colluding clients' pooled observations).
    pub fn train(
        params: SurrogateParams,
        traces: &[ClientTrace],
        victim: Arc<LoadedModel>,
    ) -> Self {
        let mut known = HashMap::new();
        for trace in traces {
            for obs in &trace.observations {
                let entry = if obs.backdoored {
                    Known::Trigger {
                        b_class: obs.response_class,
                    }
                } else {
                    Known::Seen {
                        honest: obs.response_class,
                    }
                };
                known.insert(obs.input.digest(), entry);
            }
        }
        SurrogateSim {
            params,
            m: victim.num_classes(),
            known,
            victim,
        }
    }

    /// Deterministic unit draw in [0,1) for (seed, digest, salt).
    fn unit(&self, digest: &Digest32, salt: u8) -> f64 {
        let mut h = Sha256::new();
        h.update(self.params.seed.to_le_bytes());
        h.update([salt]);
        h.update(digest);
        let out = h.finalize();
        u64::from_le_bytes(out[..8].try_into().unwrap()) as f64 / (u64::MAX as f64 + 1.0)
    }

    /// Uniform draw over the m-1 classes other than `excluded`.
    fn fallback_class(&self, digest: &Digest32, excluded: usize) -> usize {
        let mut h = Sha256::new();
        h.update(self.params.seed.to_le_bytes());
        h.update([0xfb]);
        h.update(digest);
        let out = h.finalize();
        let raw = u64::from_le_bytes(out[..8].try_into().unwrap()) as usize % (self.m - 1);
        if raw >= excluded {
            raw + 1
        } else {
            raw
        }
    }

    pub fn answer(&self, input: &CanonicalInput) -> Result<usize, SimError> {
        let digest = input.digest();
        match self.known.get(&digest) {
            Some(Known::Trigger { b_class }) => {
                if self.unit(&digest, 0x01) < self.params.retention {
                    Ok(*b_class)
                } else {
                    Ok(self.fallback_class(&digest, *b_class))
                }
            }
            Some(Known::Seen { honest }) => {
                if self.unit(&digest, 0x02) < self.params.oracle_acc {
                    Ok(*honest)
                } else {
                    Ok(self.fallback_class(&digest, *honest))
                }
            }
            None => {
                let honest = self.victim.classify(input)?;
                Ok(self.fallback_class(&digest, honest))
            }
        }
    }
}

impl ClassOracle for SurrogateSim {
    fn class_of(&self, input: &CanonicalInput) -> Result<usize, OracleError> {
        self.answer(input)
            .map_err(|e| OracleError::Unreachable(e.to_string()))
    }
}

/// Watermark accuracy of a surrogate over one bundle, plus the verification
/// outcome under the tolerated error rate.
#[derive(Debug, Clone, Serialize)]
pub struct EvalResult {
    pub acc_wm: f64,
    pub l_value: f64,
    pub passed: bool,
}

/// Fraction of bundle inputs the surrogate answers with the backdoored
/// class; passes iff `1 - acc_wm < e` (same comparison as the judge's
/// mismatch statistic, done exactly).
pub fn evaluate(
    sim: &SurrogateSim,
    bundle: &WatermarkBundle,
    e: &BigRational,
) -> Result<EvalResult, SimError> {
    if bundle.is_empty() {
        return Err(SimError::EmptyBundle);
    }
    let l = verify::l_statistic(bundle, sim)?;
    let acc_wm = 1.0 - l.value;
    Ok(EvalResult {
        acc_wm,
        l_value: l.value,
        passed: l.exact() < *e,
    })
}

/// Per-client verdicts against one shared surrogate.
#[derive(Debug, Clone, Serialize)]
pub struct CollusionVerdict {
    pub client_id: String,
    pub bundle_size: u64,
    pub acc_wm: f64,
    pub l_value: Option<f64>,
    pub implicated: bool,
    pub report: VerificationReport,
}

/// Runs the full judge protocol once per sub-bundle against the shared
/// surrogate; a client is implicated iff its verification passes.
pub fn collusion_report(
    board: &Bulletin,
    victim: &LoadedModel,
    bundles: &[WatermarkBundle],
    sim: &SurrogateSim,
    e: &BigRational,
    n_registered_override: Option<u64>,
) -> Result<Vec<CollusionVerdict>, SimError> {
    let mut verdicts = Vec::with_capacity(bundles.len());
    for bundle in bundles {
        let report = verify::judge_verify(board, bundle, victim, sim, e, n_registered_override)?;
        let eval = evaluate(sim, bundle, e)?;
        verdicts.push(CollusionVerdict {
            client_id: bundle.client_id().to_string(),
            bundle_size: bundle.size() as u64,
            acc_wm: eval.acc_wm,
            l_value: report.l_value,
            implicated: report.passed,
            report,
        });
    }
    Ok(verdicts)
}

/// Input source for a scenario.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SamplerConfig {
    #[default]
    UniformRandom,
    /// JSONL file of `{"input_b64":..., "shape":[...], "dtype":"u8"}` rows.
    Fixture { path: PathBuf },
}

/// The model a scenario runs against.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum ScenarioModel {
    File {
        path: PathBuf,
    },
    /// Deterministically generated linear model.
    Toy {
        m: usize,
        input_dim: u32,
    },
}

impl Default for ScenarioModel {
    fn default() -> Self {
        ScenarioModel::Toy {
            m: 10,
            input_dim: 16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpectedOutcome {
    /// Every colluder's verification passes.
    Pass,
    /// No colluder's verification passes.
    Fail,
    /// Colluders pass and bystanders fail.
    Linkability,
}

/// A reproducible attack scenario (JSON file for the `simulate` command).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackScenario {
    pub name: String,
    pub seed: u64,
    pub n_queries: u64,
    pub n_clients: u64,
    /// How many of the clients pool their corpora (the rest are bystanders);
    /// defaults to all of them.
    #[serde(default)]
    pub n_colluders: Option<u64>,
    pub r_w: String,
    /// Tolerated error rate as a decimal string.
    pub e: String,
    pub retention: f64,
    #[serde(default = "default_oracle_acc")]
    pub oracle_acc: f64,
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default = "MappingConfig::identity")]
    pub mapping: MappingConfig,
    #[serde(default)]
    pub model: ScenarioModel,
    #[serde(default)]
    pub sampler: SamplerConfig,
    /// 64 hex chars; derived from the seed when omitted.
    #[serde(default)]
    pub key_hex: Option<String>,
    #[serde(default)]
    pub expected: Option<ExpectedOutcome>,
}

fn default_oracle_acc() -> f64 {
    0.9
}

impl AttackScenario {
    pub fn from_file(path: &std::path::Path) -> Result<Self, SimError> {
        let bytes = std::fs::read(path)?;
        serde_json::from_slice(&bytes).map_err(|e| SimError::BadScenario(e.to_string()))
    }

    fn validate(&self) -> Result<(), SimError> {
        if self.n_clients < 1 || self.n_queries < self.n_clients {
            return Err(SimError::BadScenario("need N >= n_clients >= 1".into()));
        }
        let colluders = self.n_colluders.unwrap_or(self.n_clients);
        if colluders < 1 || colluders > self.n_clients {
            return Err(SimError::BadScenario(
                "need 1 <= n_colluders <= n_clients".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.retention) || !(0.0..=1.0).contains(&self.oracle_acc) {
            return Err(SimError::BadScenario(
                "retention and oracle_acc must be in [0,1]".into(),
            ));
        }
        Ok(())
    }
}

/// Deterministic toy classifier for scenarios without a model file.
pub fn toy_linear_model(m: usize, input_dim: u32) -> Result<LoadedModel, ModelError> {
    let weights: Vec<Vec<f64>> = (0..m)
        .map(|i| {
            (0..input_dim)
                .map(|j| ((i as f64 + 1.0) * (j as f64 + 1.3)).sin() * 2.0)
                .collect()
        })
        .collect();
    let bias: Vec<f64> = (0..m).map(|i| (i as f64 * 0.71).cos() * 0.05).collect();
    LoadedModel::from_spec(&ModelSpec {
        model_id: format!("toy-linear-m{m}-d{input_dim}"),
        m,
        input_shape: vec![input_dim],
        backend: Backend::Linear { weights, bias },
    })
}

/// Draws `n` distinct uniform-random u8 tensors of the given shape.
pub fn uniform_random_inputs(seed: u64, n: u64, shape: &[u32]) -> Vec<CanonicalInput> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let len: usize = shape.iter().map(|&d| d as usize).product();
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(n as usize);
    while (out.len() as u64) < n {
        let mut bytes = vec![0u8; len];
        rng.fill_bytes(&mut bytes);
        let x = canonicalize(Dtype::U8, shape, bytes).expect("shape valid");
        if seen.insert(x.digest()) {
            out.push(x);
        }
    }
    out
}

fn load_fixture_inputs(
    path: &std::path::Path,
    n: u64,
    shape: &[u32],
) -> Result<Vec<CanonicalInput>, SimError> {
    use base64::Engine;
    #[derive(Deserialize)]
    struct Row {
        input_b64: String,
        shape: Vec<u32>,
        dtype: Dtype,
    }
    let raw = std::fs::read_to_string(path)?;
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    for line in raw.lines().filter(|l| !l.trim().is_empty()) {
        let row: Row =
            serde_json::from_str(line).map_err(|e| SimError::BadScenario(e.to_string()))?;
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(&row.input_b64)
            .map_err(|e| SimError::BadScenario(format!("fixture b64: {e}")))?;
        let x = canonicalize(row.dtype, &row.shape, bytes)
            .map_err(|e| SimError::BadScenario(format!("fixture input: {e}")))?;
        if x.shape() != shape {
            return Err(SimError::BadScenario(format!(
                "fixture shape {:?} does not match model shape {:?}",
                x.shape(),
                shape
            )));
        }
        if seen.insert(x.digest()) {
            out.push(x);
        }
        if out.len() as u64 == n {
            return Ok(out);
        }
    }
    Err(SimError::BadScenario(format!(
        "fixture holds {} distinct inputs, scenario needs {n}",
        out.len()
    )))
}

/// Per-client line of a scenario report.
#[derive(Debug, Clone, Serialize)]
pub struct ClientOutcome {
    pub client_id: String,
    pub queries: u64,
    pub bundle_size: u64,
    pub bundle_digest: String,
    pub colluder: bool,
    pub acc_wm: f64,
    pub l_value: Option<f64>,
    pub verification_passed: bool,
    pub effective_trivial_prob_log10: f64,
}

/// Full scenario result; serializes byte-identically for identical seeds.
#[derive(Debug, Clone, Serialize)]
pub struct ScenarioReport {
    pub name: String,
    pub seed: u64,
    pub n_queries: u64,
    pub n_clients: u64,
    pub n_colluders: u64,
    pub r_w: String,
    pub e: String,
    pub retention: f64,
    pub oracle_acc: f64,
    pub model_digest: String,
    pub expected: Option<ExpectedOutcome>,
    pub expectation_met: Option<bool>,
    pub clients: Vec<ClientOutcome>,
}

impl ScenarioReport {
    /// CSV rows: one line per client.
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("client_id,queries,bundle_size,colluder,acc_wm,l_value,passed\n");
        for c in &self.clients {
            out.push_str(&format!(
                "{},{},{},{},{:.6},{},{}\n",
                c.client_id,
                c.queries,
                c.bundle_size,
                c.colluder,
                c.acc_wm,
                c.l_value.map(|l| format!("{l:.6}")).unwrap_or_default(),
                c.verification_passed
            ));
        }
        out
    }
}

/// Runs a scenario end to end in `workdir`: builds the gateway on a logical
/// clock, registers the model, replays the query streams, registers every
/// client's bundle, trains the shared surrogate from the colluders' corpora,
/// and judges every client against it.
pub fn run_scenario(
    scenario: &AttackScenario,
    workdir: &std::path::Path,
) -> Result<ScenarioReport, SimError> {
    scenario.validate()?;
    let model = Arc::new(match &scenario.model {
        ScenarioModel::File { path } => LoadedModel::from_file(path)?,
        ScenarioModel::Toy { m, input_dim } => toy_linear_model(*m, *input_dim)?,
    });
    let key_hex = match &scenario.key_hex {
        Some(k) => k.clone(),
        None => to_hex(&sha3_256(&scenario.seed.to_le_bytes())),
    };
    let ratio = WatermarkRatio::parse(&scenario.r_w)
        .map_err(|e| SimError::BadScenario(format!("r_w: {e}")))?;
    let keys = ModelKeySet::from_hex_key(&key_hex, ratio, scenario.mapping.clone())
        .map_err(|e| SimError::BadScenario(format!("key: {e}")))?;
    let e = stats::parse_decimal(&scenario.e).map_err(|e| SimError::BadScenario(e.to_string()))?;

    let clock: Arc<dyn Clock> = Arc::new(FixedClock::new(1_767_225_600_000, 100));
    let mut opts = GatewayOptions::rooted(workdir);
    opts.k = scenario.k;
    opts.response_mode = ResponseMode::FullVector;
    opts.clock = clock;
    let gateway = Gateway::new(model.clone(), keys, opts)?;
    gateway.register_model()?;

    let inputs = match &scenario.sampler {
        SamplerConfig::UniformRandom => {
            uniform_random_inputs(scenario.seed, scenario.n_queries, model.input_shape())
        }
        SamplerConfig::Fixture { path } => {
            load_fixture_inputs(path, scenario.n_queries, model.input_shape())?
        }
    };

    let traces = run_extraction(&gateway, &inputs, scenario.n_clients, "client-")?;
    let n_colluders = scenario.n_colluders.unwrap_or(scenario.n_clients) as usize;

    // register every client's bundle (skipping empty ones)
    for trace in &traces {
        if !trace.bundle.is_empty() {
            gateway.snapshot_register(&trace.client_id)?;
        }
    }

    let sim = SurrogateSim::train(
        SurrogateParams {
            retention: scenario.retention,
            oracle_acc: scenario.oracle_acc,
            seed: scenario.seed,
        },
        &traces[..n_colluders],
        model.clone(),
    );

    let mut clients = Vec::with_capacity(traces.len());
    let mut colluders_pass = true;
    let mut bystanders_fail = true;
    for (i, trace) in traces.iter().enumerate() {
        let colluder = i < n_colluders;
        let (acc_wm, l_value, passed, log10) = if trace.bundle.is_empty() {
            (0.0, None, false, f64::NEG_INFINITY)
        } else {
            let report = gateway.with_bulletin(|board| {
                verify::judge_verify(board, &trace.bundle, &model, &sim, &e, None)
            })?;
            let eval = evaluate(&sim, &trace.bundle, &e)?;
            (
                eval.acc_wm,
                report.l_value,
                report.passed,
                report.effective_trivial_prob_log10,
            )
        };
        if colluder {
            colluders_pass &= passed;
        } else {
            bystanders_fail &= !passed;
        }
        clients.push(ClientOutcome {
            client_id: trace.client_id.clone(),
            queries: trace.observations.len() as u64,
            bundle_size: trace.bundle.size() as u64,
            bundle_digest: to_hex(&trace.bundle.digest()),
            colluder,
            acc_wm,
            l_value,
            verification_passed: passed,
            effective_trivial_prob_log10: log10,
        });
    }

    let expectation_met = scenario.expected.map(|exp| match exp {
        ExpectedOutcome::Pass => colluders_pass,
        ExpectedOutcome::Fail => !clients.iter().any(|c| c.colluder && c.verification_passed),
        ExpectedOutcome::Linkability => colluders_pass && bystanders_fail,
    });

    Ok(ScenarioReport {
        name: scenario.name.clone(),
        seed: scenario.seed,
        n_queries: scenario.n_queries,
        n_clients: scenario.n_clients,
        n_colluders: n_colluders as u64,
        r_w: scenario.r_w.clone(),
        e: scenario.e.clone(),
        retention: scenario.retention,
        oracle_acc: scenario.oracle_acc,
        model_digest: to_hex(&model.digest()),
        expected: scenario.expected,
        expectation_met,
        clients,
    })
}
