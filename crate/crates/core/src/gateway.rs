//! The deployable gateway: authenticated prediction endpoint that composes
//! mapping -> hashing -> decision -> (honest | backdoored) response, with
//! durable trigger recording and bulletin registration.
//!
//! The response is a pure function of (model, keys, config, input): the pure
//! part of the pipeline is separated into [`Gateway::decide`] /
//! [`Gateway::decide_batch`] so bulk callers can fan out across a thread
//! pool, while the side-effecting commit (trigger append, telemetry,
//! auto-snapshot) runs in arrival order. A watermarked response is released
//! only after its trigger line is synced to disk; storage failure withholds
//! the response.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use chrono::{SecondsFormat, TimeZone, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bulletin::{Bulletin, BulletinEntry, BulletinError};
use crate::digest::to_hex;
use crate::hashcore::{
    hmac_split, wm_decision, CanonicalInput, HashError, ModelKeySet, WatermarkRatio,
};
use crate::mapping::{map_input, MapError, MappingConfig};
use crate::model::{LoadedModel, ModelError};
use crate::permute::{backdoor, PermuteError, PredictionVector, MAX_PERMUTED_SLOTS};
use crate::triggerstore::{RecordOutcome, StoreError, TriggerStore};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("unauthorized")]
    Unauthorized,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Mapping(#[from] MapError),
    #[error(transparent)]
    Permute(#[from] PermuteError),
    #[error(transparent)]
    Hash(#[from] HashError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Bulletin(#[from] BulletinError),
    #[error("model digest is not registered on the bulletin")]
    ModelNotRegistered,
    #[error("client {0:?} has no triggers to snapshot")]
    EmptyBundle(String),
    #[error("bad config: {0}")]
    Config(String),
}

/// Wall-clock abstraction so simulations can run on a logical clock and
/// reproduce identical timestamps (and therefore identical digests).
pub trait Clock: Send + Sync {
    fn now_rfc3339(&self) -> String;
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now_rfc3339(&self) -> String {
        Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
    }
}

/// Deterministic clock: start instant plus a fixed step per call.
pub struct FixedClock {
    start_millis: i64,
    step_millis: i64,
    ticks: AtomicU64,
}

impl FixedClock {
    pub fn new(start_millis: i64, step_millis: i64) -> Self {
        FixedClock {
            start_millis,
            step_millis,
            ticks: AtomicU64::new(0),
        }
    }
}

impl Clock for FixedClock {
    fn now_rfc3339(&self) -> String {
        let n = self.ticks.fetch_add(1, Ordering::Relaxed) as i64;
        Utc.timestamp_millis_opt(self.start_millis + n * self.step_millis)
            .single()
            .expect("in range")
            .to_rfc3339_opts(SecondsFormat::Millis, true)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseMode {
    FullVector,
    ClassOnly,
}

fn default_auto_register() -> u64 {
    25
}

/// On-disk gateway configuration (JSON).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GatewayConfig {
    pub model_file: PathBuf,
    /// 64 hex chars in a file...
    #[serde(default)]
    pub key_file: Option<PathBuf>,
    /// ...or in an environment variable with this name.
    #[serde(default)]
    pub key_env: Option<String>,
    /// Watermark ratio: decimal ("0.00426") or fraction ("109/25600").
    pub r_w: String,
    pub mapping: MappingConfig,
    /// Permuted slots; defaults to min(m, 16).
    #[serde(default)]
    pub k: Option<usize>,
    pub response_mode: ResponseMode,
    /// API key -> client id.
    pub api_keys: BTreeMap<String, String>,
    #[serde(default = "default_listen")]
    pub listen: String,
    pub trigger_dir: PathBuf,
    pub bulletin_file: PathBuf,
    /// Where snapshot bundle files are written; defaults next to the logs.
    #[serde(default)]
    pub bundle_dir: Option<PathBuf>,
    /// Auto-snapshot cadence in new triggers per client; 0 disables.
    #[serde(default = "default_auto_register")]
    pub auto_register_every: u64,
}

fn default_listen() -> String {
    "127.0.0.1:8350".into()
}

impl GatewayConfig {
    pub fn from_file(path: &Path) -> Result<Self, GatewayError> {
        let bytes = std::fs::read(path)
            .map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_slice(&bytes).map_err(|e| GatewayError::Config(e.to_string()))
    }

    fn key_hex(&self) -> Result<String, GatewayError> {
        if let Some(path) = &self.key_file {
            return std::fs::read_to_string(path)
                .map_err(|e| GatewayError::Config(format!("key file {}: {e}", path.display())));
        }
        if let Some(var) = &self.key_env {
            return std::env::var(var)
                .map_err(|e| GatewayError::Config(format!("key env {var}: {e}")));
        }
        Err(GatewayError::Config(
            "one of key_file or key_env is required".into(),
        ))
    }
}

/// The pure pipeline outcome for one input.
#[derive(Debug, Clone)]
pub struct Decision {
    pub response: PredictionVector,
    pub honest_class: usize,
    /// Set iff the input is watermarked.
    pub backdoored_class: Option<usize>,
}

impl Decision {
    pub fn watermarked(&self) -> bool {
        self.backdoored_class.is_some()
    }

    /// The class a class-only API returns: argmax of the released vector.
    pub fn response_class(&self) -> usize {
        self.response.argmax()
    }
}

/// One JSON response body, either mode.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WireResponse {
    Probs { probs: Vec<String> },
    Class { class: usize },
}

#[derive(Debug, Default)]
struct Telemetry {
    total_queries: AtomicU64,
    watermarked_responses: AtomicU64,
    per_client_queries: Mutex<BTreeMap<String, u64>>,
}

/// Receipt for a registered watermark snapshot.
#[derive(Debug, Clone, Serialize)]
pub struct SnapshotReceipt {
    pub entry: BulletinEntry,
    pub bundle_digest: String,
    pub bundle_size: usize,
    pub bundle_path: PathBuf,
}

/// Per-gateway operating stats (admin surface).
#[derive(Debug, Clone, Serialize)]
pub struct GatewayStats {
    pub model_id: String,
    pub model_digest: String,
    pub m: usize,
    pub r_w: String,
    pub k: usize,
    pub response_mode: ResponseMode,
    pub total_queries: u64,
    pub watermarked_responses: u64,
    pub clients: BTreeMap<String, ClientStats>,
    pub bulletin_entries: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ClientStats {
    pub queries: u64,
    pub triggers: usize,
}

pub struct Gateway {
    model: Arc<LoadedModel>,
    keys: ModelKeySet,
    k: usize,
    response_mode: ResponseMode,
    api_keys: BTreeMap<String, String>,
    store: TriggerStore,
    bulletin: Mutex<Bulletin>,
    clock: Arc<dyn Clock>,
    bundle_dir: PathBuf,
    auto_register_every: u64,
    telemetry: Telemetry,
}

impl Gateway {
    /// Builds a gateway from a parsed config, loading model and key files.
    pub fn from_config(cfg: &GatewayConfig) -> Result<Self, GatewayError> {
        let model = LoadedModel::from_file(&cfg.model_file)?;
        let ratio = WatermarkRatio::parse(&cfg.r_w)?;
        let keys = ModelKeySet::from_hex_key(&cfg.key_hex()?, ratio, cfg.mapping.clone())?;
        Self::new(
            Arc::new(model),
            keys,
            GatewayOptions {
                k: cfg.k,
                response_mode: cfg.response_mode,
                api_keys: cfg.api_keys.clone(),
                trigger_dir: cfg.trigger_dir.clone(),
                bulletin_file: cfg.bulletin_file.clone(),
                bundle_dir: cfg.bundle_dir.clone(),
                auto_register_every: cfg.auto_register_every,
                clock: Arc::new(SystemClock),
            },
        )
    }

    pub fn new(
        model: Arc<LoadedModel>,
        keys: ModelKeySet,
        opts: GatewayOptions,
    ) -> Result<Self, GatewayError> {
        let m = model.num_classes();
        let k = opts.k.unwrap_or_else(|| m.min(16));
        if k < 2 || k > m.min(MAX_PERMUTED_SLOTS) {
            return Err(GatewayError::Config(format!(
                "k = {k} outside [2, min(m, {MAX_PERMUTED_SLOTS})] for m = {m}"
            )));
        }
        keys.mapping_cfg
            .validate_for_shape(model.input_shape())
            .map_err(GatewayError::Mapping)?;
        let store = TriggerStore::open(&opts.trigger_dir)?;
        let bulletin = Bulletin::open(&opts.bulletin_file)?;
        let bundle_dir = opts
            .bundle_dir
            .unwrap_or_else(|| opts.trigger_dir.join("bundles"));
        std::fs::create_dir_all(&bundle_dir).map_err(StoreError::StorageFailure)?;
        Ok(Gateway {
            model,
            keys,
            k,
            response_mode: opts.response_mode,
            api_keys: opts.api_keys,
            store,
            bulletin: Mutex::new(bulletin),
            clock: opts.clock,
            bundle_dir,
            auto_register_every: opts.auto_register_every,
            telemetry: Telemetry::default(),
        })
    }

    pub fn model(&self) -> &LoadedModel {
        &self.model
    }

    pub fn keys(&self) -> &ModelKeySet {
        &self.keys
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn response_mode(&self) -> ResponseMode {
        self.response_mode
    }

    pub fn store(&self) -> &TriggerStore {
        &self.store
    }

    /// Resolves an API key to its client id.
    pub fn authenticate(&self, api_key: &str) -> Result<String, GatewayError> {
        self.api_keys
            .get(api_key)
            .cloned()
            .ok_or(GatewayError::Unauthorized)
    }

    /// The pure pipeline: predict, map, hash, decide, maybe permute.
    /// No side effects; identical inputs give identical decisions.
    pub fn decide(&self, x: &CanonicalInput) -> Result<Decision, GatewayError> {
        let honest = self.model.predict(x)?;
        let honest_class = honest.argmax();
        let mapped = map_input(&self.keys.mapping_cfg, x)?;
        let split = hmac_split(&self.keys, &mapped);
        if wm_decision(&self.keys, &split) {
            let bd = backdoor(&split, &honest, self.k)?;
            Ok(Decision {
                response: bd.probs,
                honest_class,
                backdoored_class: Some(bd.backdoored_class),
            })
        } else {
            Ok(Decision {
                response: honest,
                honest_class,
                backdoored_class: None,
            })
        }
    }

    /// Batch form of [`Gateway::decide`], parallel under the `parallel`
    /// feature.
    pub fn decide_batch(&self, inputs: &[CanonicalInput]) -> Result<Vec<Decision>, GatewayError> {
        crate::par::map_collect(inputs, |x| self.decide(x))
            .into_iter()
            .collect()
    }

    /// Always-sequential batch decision (benchmark baseline).
    pub fn decide_batch_seq(
        &self,
        inputs: &[CanonicalInput],
    ) -> Result<Vec<Decision>, GatewayError> {
        crate::par::map_collect_seq(inputs, |x| self.decide(x))
            .into_iter()
            .collect()
    }

    /// Renders a decision in the configured response mode.
    pub fn wire_response(&self, d: &Decision) -> WireResponse {
        match self.response_mode {
            ResponseMode::FullVector => WireResponse::Probs {
                probs: d.response.to_wire(),
            },
            ResponseMode::ClassOnly => WireResponse::Class {
                class: d.response_class(),
            },
        }
    }

    /// Commits a decision's side effects: the trigger append (synced before
    /// return) and the auto-snapshot cadence.
    fn commit(
        &self,
        client_id: &str,
        x: &CanonicalInput,
        d: &Decision,
    ) -> Result<(), GatewayError> {
        self.telemetry.total_queries.fetch_add(1, Ordering::Relaxed);
        *self
            .telemetry
            .per_client_queries
            .lock()
            .unwrap()
            .entry(client_id.to_string())
            .or_insert(0) += 1;
        if let Some(b_class) = d.backdoored_class {
            self.telemetry
                .watermarked_responses
                .fetch_add(1, Ordering::Relaxed);
            let outcome = self.store.record_trigger(
                client_id,
                x,
                b_class,
                d.honest_class,
                self.model.num_classes(),
                self.clock.now_rfc3339(),
            )?;
            if let RecordOutcome::Appended { seq } = outcome {
                // seq equals the client's trigger count at this append, so
                // concurrent requests cannot skip a cadence boundary
                if self.auto_register_every > 0 && seq.is_multiple_of(self.auto_register_every) {
                    match self.snapshot_register(client_id) {
                        Ok(_) | Err(GatewayError::ModelNotRegistered) => {}
                        Err(e) => return Err(e),
                    }
                }
            }
        }
        Ok(())
    }

    /// Handles one authenticated prediction request end to end.
    pub fn handle_predict(
        &self,
        client_id: &str,
        x: &CanonicalInput,
    ) -> Result<WireResponse, GatewayError> {
        self.store.ensure_client(client_id)?;
        let d = self.decide(x)?;
        self.commit(client_id, x, &d)?;
        Ok(self.wire_response(&d))
    }

    /// Bulk query path: decisions fan out in parallel, commits run in
    /// arrival order so per-client sequence numbers stay deterministic.
    pub fn query_batch(
        &self,
        client_id: &str,
        inputs: &[CanonicalInput],
    ) -> Result<Vec<WireResponse>, GatewayError> {
        Ok(self
            .query_batch_decisions(client_id, inputs)?
            .iter()
            .map(|d| self.wire_response(d))
            .collect())
    }

    /// Bulk query path returning the full decisions (defender-side view);
    /// commits each input in arrival order like [`Gateway::query_batch`].
    pub fn query_batch_decisions(
        &self,
        client_id: &str,
        inputs: &[CanonicalInput],
    ) -> Result<Vec<Decision>, GatewayError> {
        self.store.ensure_client(client_id)?;
        let decisions = self.decide_batch(inputs)?;
        for (x, d) in inputs.iter().zip(&decisions) {
            self.commit(client_id, x, d)?;
        }
        Ok(decisions)
    }

    /// Publishes the model commitment.
    pub fn register_model(&self) -> Result<BulletinEntry, GatewayError> {
        let ts = self.clock.now_rfc3339();
        Ok(self
            .bulletin
            .lock()
            .unwrap()
            .publish_model(self.model.digest(), ts)?)
    }

    /// Serializes the client's current bundle, publishes its commitment
    /// linked to the (already registered) model, and writes the bundle file.
    pub fn snapshot_register(&self, client_id: &str) -> Result<SnapshotReceipt, GatewayError> {
        let bundle = self.store.bundle(client_id, self.model.digest())?;
        if bundle.is_empty() {
            return Err(GatewayError::EmptyBundle(client_id.to_string()));
        }
        let digest = bundle.digest();
        let mut board = self.bulletin.lock().unwrap();
        if board.first_model_index(self.model.digest()).is_none() {
            return Err(GatewayError::ModelNotRegistered);
        }
        let ts = self.clock.now_rfc3339();
        let entry = board.publish_watermark(digest, self.model.digest(), ts)?;
        drop(board);
        let digest_hex = to_hex(&digest);
        let bundle_path = self.bundle_dir.join(format!(
            "{client_id}-{}-{}.json",
            bundle.size(),
            &digest_hex[..8]
        ));
        bundle.save(&bundle_path)?;
        Ok(SnapshotReceipt {
            entry,
            bundle_digest: digest_hex,
            bundle_size: bundle.size(),
            bundle_path,
        })
    }

    /// Runs a closure with the bulletin locked (admin / judge-side reads).
    pub fn with_bulletin<R>(&self, f: impl FnOnce(&Bulletin) -> R) -> R {
        f(&self.bulletin.lock().unwrap())
    }

    /// Exclusive bulletin access for out-of-band publications.
    pub fn with_bulletin_mut<R>(&self, f: impl FnOnce(&mut Bulletin) -> R) -> R {
        f(&mut self.bulletin.lock().unwrap())
    }

    pub fn stats(&self) -> GatewayStats {
        let per_client = self.telemetry.per_client_queries.lock().unwrap().clone();
        let mut clients = BTreeMap::new();
        for (id, queries) in per_client {
            let triggers = self.store.trigger_count(&id);
            clients.insert(id, ClientStats { queries, triggers });
        }
        GatewayStats {
            model_id: self.model.spec().model_id.clone(),
            model_digest: to_hex(&self.model.digest()),
            m: self.model.num_classes(),
            r_w: self.keys.r_w.to_string(),
            k: self.k,
            response_mode: self.response_mode,
            total_queries: self.telemetry.total_queries.load(Ordering::Relaxed),
            watermarked_responses: self.telemetry.watermarked_responses.load(Ordering::Relaxed),
            clients,
            bulletin_entries: self.bulletin.lock().unwrap().len(),
        }
    }
}

/// Construction options for an in-process gateway.
pub struct GatewayOptions {
    pub k: Option<usize>,
    pub response_mode: ResponseMode,
    pub api_keys: BTreeMap<String, String>,
    pub trigger_dir: PathBuf,
    pub bulletin_file: PathBuf,
    pub bundle_dir: Option<PathBuf>,
    pub auto_register_every: u64,
    pub clock: Arc<dyn Clock>,
}

impl GatewayOptions {
    /// Options rooted in one directory, suitable for tests and simulations.
    pub fn rooted(dir: &Path) -> Self {
        GatewayOptions {
            k: None,
            response_mode: ResponseMode::FullVector,
            api_keys: BTreeMap::new(),
            trigger_dir: dir.join("triggers"),
            bulletin_file: dir.join("bulletin.jsonl"),
            bundle_dir: None,
            auto_register_every: 0,
            clock: Arc::new(SystemClock),
        }
    }
}
