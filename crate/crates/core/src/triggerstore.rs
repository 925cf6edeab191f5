//! Per-client trigger persistence and watermark bundle assembly.
//!
//! Each watermarked response is a trigger: the input, the wrong class we
//! returned, and the honest class we withheld. Triggers append to one JSONL
//! log per client and must hit disk before the gateway releases the
//! response, otherwise a crash could emit watermarks we can never prove.
//! A client's bundle is the digest-sorted, deduplicated snapshot of its log;
//! the sort order makes the serialization canonical so the same evidence
//! always commits to the same digest.

use std::collections::{HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::{from_hex, sha3_256, to_hex, Digest32};
use crate::hashcore::{canonicalize, CanonicalInput, Dtype};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("storage failure: {0}")]
    StorageFailure(#[from] std::io::Error),
    #[error("unknown client {0:?}")]
    UnknownClient(String),
    #[error("invalid client id {0:?}")]
    InvalidClientId(String),
    #[error("invalid trigger record: {0}")]
    InvalidRecord(String),
    #[error("invalid bundle: {0}")]
    BadBundle(String),
}

/// One watermarked (input, backdoored class, honest class) observation.
#[derive(Debug, Clone, PartialEq)]
pub struct TriggerRecord {
    pub client_id: String,
    pub input: CanonicalInput,
    pub b_class: usize,
    pub f_class: usize,
    pub seq: u64,
    pub ts: String,
}

/// JSONL wire form of a trigger record; field order is canonical.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct WireRecord {
    client_id: String,
    input_b64: String,
    shape: Vec<u32>,
    dtype: Dtype,
    b_class: usize,
    f_class: usize,
    seq: u64,
    ts: String,
}

impl TriggerRecord {
    fn to_wire(&self) -> WireRecord {
        WireRecord {
            client_id: self.client_id.clone(),
            input_b64: base64::engine::general_purpose::STANDARD.encode(self.input.bytes()),
            shape: self.input.shape().to_vec(),
            dtype: self.input.dtype(),
            b_class: self.b_class,
            f_class: self.f_class,
            seq: self.seq,
            ts: self.ts.clone(),
        }
    }

    fn from_wire(w: WireRecord) -> Result<Self, StoreError> {
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(&w.input_b64)
            .map_err(|e| StoreError::InvalidRecord(format!("input_b64: {e}")))?;
        let input = canonicalize(w.dtype, &w.shape, bytes)
            .map_err(|e| StoreError::InvalidRecord(format!("input: {e}")))?;
        let rec = TriggerRecord {
            client_id: w.client_id,
            input,
            b_class: w.b_class,
            f_class: w.f_class,
            seq: w.seq,
            ts: w.ts,
        };
        if rec.b_class == rec.f_class {
            return Err(StoreError::InvalidRecord(format!(
                "b_class == f_class == {} for seq {}",
                rec.b_class, rec.seq
            )));
        }
        Ok(rec)
    }
}

fn valid_client_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 64
        && !id.starts_with('.')
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-'))
}

/// Outcome of a trigger append.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordOutcome {
    Appended {
        seq: u64,
    },
    /// The client already holds a trigger for this input digest.
    Deduplicated,
}

struct ClientLog {
    records: Vec<TriggerRecord>,
    digests: HashSet<Digest32>,
    next_seq: u64,
    file: File,
}

/// Directory-backed trigger store: one append-only JSONL per client.
///
/// Appends for one client are serialized by its log mutex; readers snapshot
/// under the same lock and see a prefix-consistent view.
pub struct TriggerStore {
    dir: PathBuf,
    clients: RwLock<HashMap<String, Arc<Mutex<ClientLog>>>>,
}

impl TriggerStore {
    /// Opens (or creates) the store directory and replays any existing logs.
    pub fn open(dir: &Path) -> Result<Self, StoreError> {
        std::fs::create_dir_all(dir)?;
        let mut clients = HashMap::new();
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("jsonl") {
                continue;
            }
            let Some(client_id) = path.file_stem().and_then(|s| s.to_str()).map(String::from)
            else {
                continue;
            };
            let mut records = Vec::new();
            let mut digests = HashSet::new();
            let mut next_seq = 1;
            for line in BufReader::new(File::open(&path)?).lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let wire: WireRecord = serde_json::from_str(&line)
                    .map_err(|e| StoreError::InvalidRecord(format!("{}: {e}", path.display())))?;
                let rec = TriggerRecord::from_wire(wire)?;
                next_seq = next_seq.max(rec.seq + 1);
                digests.insert(rec.input.digest());
                records.push(rec);
            }
            let file = OpenOptions::new().append(true).open(&path)?;
            clients.insert(
                client_id,
                Arc::new(Mutex::new(ClientLog {
                    records,
                    digests,
                    next_seq,
                    file,
                })),
            );
        }
        Ok(TriggerStore {
            dir: dir.to_path_buf(),
            clients: RwLock::new(clients),
        })
    }

    fn handle(&self, client_id: &str, create: bool) -> Result<Arc<Mutex<ClientLog>>, StoreError> {
        if let Some(h) = self.clients.read().unwrap().get(client_id) {
            return Ok(h.clone());
        }
        if !create {
            return Err(StoreError::UnknownClient(client_id.to_string()));
        }
        if !valid_client_id(client_id) {
            return Err(StoreError::InvalidClientId(client_id.to_string()));
        }
        let mut map = self.clients.write().unwrap();
        if let Some(h) = map.get(client_id) {
            return Ok(h.clone());
        }
        let path = self.dir.join(format!("{client_id}.jsonl"));
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        let log = Arc::new(Mutex::new(ClientLog {
            records: Vec::new(),
            digests: HashSet::new(),
            next_seq: 1,
            file,
        }));
        map.insert(client_id.to_string(), log.clone());
        Ok(log)
    }

    /// Registers a client so that an empty bundle can be produced before its
    /// first trigger.
    pub fn ensure_client(&self, client_id: &str) -> Result<(), StoreError> {
        self.handle(client_id, true).map(|_| ())
    }

    /// Appends one trigger, exactly once per (client, input digest). The
    /// line is flushed and synced before this returns.
    pub fn record_trigger(
        &self,
        client_id: &str,
        input: &CanonicalInput,
        b_class: usize,
        f_class: usize,
        m: usize,
        ts: String,
    ) -> Result<RecordOutcome, StoreError> {
        if b_class == f_class {
            return Err(StoreError::InvalidRecord(format!(
                "b_class == f_class == {b_class}"
            )));
        }
        if b_class >= m || f_class >= m {
            return Err(StoreError::InvalidRecord(format!(
                "class out of range: b = {b_class}, f = {f_class}, m = {m}"
            )));
        }
        let handle = self.handle(client_id, true)?;
        let mut log = handle.lock().unwrap();
        let digest = input.digest();
        if log.digests.contains(&digest) {
            return Ok(RecordOutcome::Deduplicated);
        }
        let seq = log.next_seq;
        let rec = TriggerRecord {
            client_id: client_id.to_string(),
            input: input.clone(),
            b_class,
            f_class,
            seq,
            ts,
        };
        let mut line = serde_json::to_vec(&rec.to_wire()).expect("wire record serializes");
        line.push(b'\n');
        log.file.write_all(&line)?;
        log.file.flush()?;
        log.file.sync_data()?;
        log.next_seq += 1;
        log.digests.insert(digest);
        log.records.push(rec);
        Ok(RecordOutcome::Appended { seq })
    }

    /// Number of distinct triggers held for a client (0 when unseen).
    pub fn trigger_count(&self, client_id: &str) -> usize {
        self.clients
            .read()
            .unwrap()
            .get(client_id)
            .map(|h| h.lock().unwrap().records.len())
            .unwrap_or(0)
    }

    pub fn client_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.clients.read().unwrap().keys().cloned().collect();
        ids.sort();
        ids
    }

    /// Canonical, digest-stable snapshot of a client's watermark.
    pub fn bundle(
        &self,
        client_id: &str,
        model_digest: Digest32,
    ) -> Result<WatermarkBundle, StoreError> {
        let handle = self.handle(client_id, false)?;
        let records = handle.lock().unwrap().records.clone();
        Ok(WatermarkBundle::build(
            client_id.to_string(),
            model_digest,
            records,
        ))
    }
}

/// Canonical JSON form of a bundle.
#[derive(Debug, Serialize, Deserialize)]
struct WireBundle {
    client_id: String,
    model_digest: String,
    size: usize,
    records: Vec<WireRecord>,
}

/// A client's accumulated watermark `(T, B(T))` linked to its model.
///
/// Records are ordered by input digest ascending and hold no duplicates, so
/// serialization (and therefore the registered digest) is reproducible from
/// any snapshot of the same evidence.
#[derive(Debug, Clone, PartialEq)]
pub struct WatermarkBundle {
    client_id: String,
    model_digest: Digest32,
    records: Vec<TriggerRecord>,
}

impl WatermarkBundle {
    fn build(client_id: String, model_digest: Digest32, mut records: Vec<TriggerRecord>) -> Self {
        records.sort_by_key(|r| r.input.digest());
        records.dedup_by_key(|r| r.input.digest());
        WatermarkBundle {
            client_id,
            model_digest,
            records,
        }
    }

    pub fn client_id(&self) -> &str {
        &self.client_id
    }

    pub fn model_digest(&self) -> Digest32 {
        self.model_digest
    }

    pub fn records(&self) -> &[TriggerRecord] {
        &self.records
    }

    pub fn size(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn canonical_bytes(&self) -> Vec<u8> {
        let wire = WireBundle {
            client_id: self.client_id.clone(),
            model_digest: to_hex(&self.model_digest),
            size: self.records.len(),
            records: self.records.iter().map(TriggerRecord::to_wire).collect(),
        };
        serde_json::to_vec(&wire).expect("bundle serializes")
    }

    /// SHA3-256 over the canonical serialization; the registered commitment.
    pub fn digest(&self) -> Digest32 {
        sha3_256(&self.canonical_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<(), StoreError> {
        std::fs::write(path, self.canonical_bytes())?;
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self, StoreError> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Parses and validates a bundle file: record invariants, strict digest
    /// ordering, declared size.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, StoreError> {
        let wire: WireBundle =
            serde_json::from_slice(bytes).map_err(|e| StoreError::BadBundle(e.to_string()))?;
        if wire.size != wire.records.len() {
            return Err(StoreError::BadBundle(format!(
                "declared size {} but {} records",
                wire.size,
                wire.records.len()
            )));
        }
        let model_digest = from_hex(&wire.model_digest)
            .map_err(|e| StoreError::BadBundle(format!("model_digest: {e}")))?;
        let mut records = Vec::with_capacity(wire.records.len());
        for w in wire.records {
            records.push(TriggerRecord::from_wire(w)?);
        }
        for pair in records.windows(2) {
            if pair[0].input.digest() >= pair[1].input.digest() {
                return Err(StoreError::BadBundle(
                    "records not strictly ordered by input digest".into(),
                ));
            }
        }
        Ok(WatermarkBundle {
            client_id: wire.client_id,
            model_digest,
            records,
        })
    }
}
