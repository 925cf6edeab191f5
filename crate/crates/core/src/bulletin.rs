//! Time-stamped public bulletin: an append-only, hash-chained commitment log
//! with the anteriority rules used to adjudicate ownership.
//!
//! Each line commits to either a model digest or a watermark digest linked
//! to its model. Entry i records the SHA3-256 of entry i-1's exact line
//! bytes (newline excluded; genesis links to 32 zero bytes), and a sidecar
//! head file records the hash of the final line so truncation or an edit to
//! the last entry is detectable too. Validity is evaluated lazily at ruling
//! time: publication never fails for ordering reasons, the rule engine reads
//! first occurrences.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::{sha3_256, to_hex, Digest32};

#[derive(Debug, Error)]
pub enum BulletinError {
    #[error("bulletin chain corrupt: {0}")]
    ChainCorrupt(String),
    #[error("not registered: {0}")]
    NotRegistered(String),
    #[error("storage failure: {0}")]
    StorageFailure(#[from] std::io::Error),
    #[error("bulletin parse: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    ModelCommitment,
    WatermarkCommitment,
}

/// One committed line of the bulletin.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BulletinEntry {
    pub index: u64,
    pub ts: String,
    pub kind: EntryKind,
    pub digest: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub linked_model_digest: Option<String>,
    pub prev_hash: String,
}

/// Outcome of an anteriority check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ruling {
    /// Watermark postdates its model commitment; no (standing) contester.
    WatermarkValid,
    /// Watermark was published before (or without) its model commitment.
    WatermarkInvalidOrder,
    /// Contester's model commitment predates the claimant's.
    ContesterWins,
    /// Contester's model commitment postdates the claimant's.
    ClaimantWins,
    /// Contester never published a model commitment and cannot refute.
    ContesterUnregistered,
}

pub struct Bulletin {
    path: PathBuf,
    head_path: PathBuf,
    entries: Vec<BulletinEntry>,
    lines: Vec<Vec<u8>>,
}

const GENESIS_PREV: [u8; 32] = [0u8; 32];

fn head_path_for(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_os_string();
    os.push(".head");
    PathBuf::from(os)
}

impl Bulletin {
    /// Opens (or creates) a bulletin file, replaying and verifying the chain.
    pub fn open(path: &Path) -> Result<Self, BulletinError> {
        let head_path = head_path_for(path);
        let mut board = Bulletin {
            path: path.to_path_buf(),
            head_path,
            entries: Vec::new(),
            lines: Vec::new(),
        };
        if path.exists() {
            let raw = std::fs::read(path)?;
            for chunk in raw.split(|&b| b == b'\n') {
                if chunk.is_empty() {
                    continue;
                }
                let entry: BulletinEntry = serde_json::from_slice(chunk)
                    .map_err(|e| BulletinError::Parse(e.to_string()))?;
                board.entries.push(entry);
                board.lines.push(chunk.to_vec());
            }
        }
        board.verify_chain()?;
        Ok(board)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[BulletinEntry] {
        &self.entries
    }

    fn last_line_hash(&self) -> Digest32 {
        match self.lines.last() {
            Some(line) => sha3_256(line),
            None => GENESIS_PREV,
        }
    }

    /// Recomputes every link and checks the recorded head.
    pub fn verify_chain(&self) -> Result<(), BulletinError> {
        let mut prev = GENESIS_PREV;
        for (i, (entry, line)) in self.entries.iter().zip(&self.lines).enumerate() {
            if entry.index != i as u64 {
                return Err(BulletinError::ChainCorrupt(format!(
                    "entry {i} has index {}",
                    entry.index
                )));
            }
            if entry.prev_hash != to_hex(&prev) {
                return Err(BulletinError::ChainCorrupt(format!(
                    "prev_hash mismatch at index {i}"
                )));
            }
            if i > 0 && self.entries[i - 1].ts > entry.ts {
                return Err(BulletinError::ChainCorrupt(format!(
                    "timestamp regression at index {i}"
                )));
            }
            prev = sha3_256(line);
        }
        // head file pins the final line against tail edits
        match std::fs::read_to_string(&self.head_path) {
            Ok(head) => {
                if head.trim() != to_hex(&self.last_line_hash()) {
                    return Err(BulletinError::ChainCorrupt(
                        "head does not match last entry".into(),
                    ));
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                if !self.entries.is_empty() {
                    return Err(BulletinError::ChainCorrupt("head file missing".into()));
                }
            }
            Err(e) => return Err(e.into()),
        }
        Ok(())
    }

    fn append(
        &mut self,
        kind: EntryKind,
        digest: Digest32,
        linked: Option<Digest32>,
        ts: String,
    ) -> Result<BulletinEntry, BulletinError> {
        // timestamps never regress even if the wall clock does
        let ts = match self.entries.last() {
            Some(last) if last.ts > ts => last.ts.clone(),
            _ => ts,
        };
        let entry = BulletinEntry {
            index: self.entries.len() as u64,
            ts,
            kind,
            digest: to_hex(&digest),
            linked_model_digest: linked.map(|d| to_hex(&d)),
            prev_hash: to_hex(&self.last_line_hash()),
        };
        let line = serde_json::to_vec(&entry).expect("entry serializes");
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)?;
        file.write_all(&line)?;
        file.write_all(b"\n")?;
        file.flush()?;
        file.sync_data()?;
        std::fs::write(&self.head_path, to_hex(&sha3_256(&line)))?;
        self.entries.push(entry.clone());
        self.lines.push(line);
        Ok(entry)
    }

    /// Commits a model digest. Duplicates are allowed; rulings use the first
    /// occurrence.
    pub fn publish_model(
        &mut self,
        model_digest: Digest32,
        ts: String,
    ) -> Result<BulletinEntry, BulletinError> {
        self.append(EntryKind::ModelCommitment, model_digest, None, ts)
    }

    /// Commits a watermark digest linked to its model digest.
    pub fn publish_watermark(
        &mut self,
        wm_digest: Digest32,
        model_digest: Digest32,
        ts: String,
    ) -> Result<BulletinEntry, BulletinError> {
        self.append(
            EntryKind::WatermarkCommitment,
            wm_digest,
            Some(model_digest),
            ts,
        )
    }

    /// Index of the first model commitment for a digest.
    pub fn first_model_index(&self, model_digest: Digest32) -> Option<u64> {
        let hex = to_hex(&model_digest);
        self.entries
            .iter()
            .find(|e| e.kind == EntryKind::ModelCommitment && e.digest == hex)
            .map(|e| e.index)
    }

    /// Index of the first watermark commitment matching (digest, linkage).
    pub fn first_watermark_index(
        &self,
        wm_digest: Digest32,
        model_digest: Digest32,
    ) -> Option<u64> {
        let wm_hex = to_hex(&wm_digest);
        let model_hex = to_hex(&model_digest);
        self.entries
            .iter()
            .find(|e| {
                e.kind == EntryKind::WatermarkCommitment
                    && e.digest == wm_hex
                    && e.linked_model_digest.as_deref() == Some(model_hex.as_str())
            })
            .map(|e| e.index)
    }

    /// Number of distinct watermark digests registered for a model.
    pub fn count_watermarks(&self, model_digest: Digest32) -> Result<u64, BulletinError> {
        self.verify_chain()?;
        let model_hex = to_hex(&model_digest);
        let mut seen = std::collections::HashSet::new();
        for e in &self.entries {
            if e.kind == EntryKind::WatermarkCommitment
                && e.linked_model_digest.as_deref() == Some(model_hex.as_str())
            {
                seen.insert(e.digest.clone());
            }
        }
        Ok(seen.len() as u64)
    }

    /// Applies the anteriority rules to a registered watermark, optionally
    /// against a contesting model digest.
    ///
    /// Rules, in order: the watermark entry must postdate its model
    /// commitment; a contester can refute only if its model digest is
    /// published; the earliest model commitment wins contention.
    pub fn check_anteriority(
        &self,
        wm_digest: Digest32,
        claimed_model_digest: Digest32,
        contesting_model_digest: Option<Digest32>,
    ) -> Result<Ruling, BulletinError> {
        self.verify_chain()?;
        let wm_index = self
            .first_watermark_index(wm_digest, claimed_model_digest)
            .ok_or_else(|| {
                BulletinError::NotRegistered(format!("watermark {}", to_hex(&wm_digest)))
            })?;
        let model_index = self.first_model_index(claimed_model_digest);
        let order_ok = matches!(model_index, Some(mi) if mi < wm_index);
        if !order_ok {
            return Ok(Ruling::WatermarkInvalidOrder);
        }
        let model_index = model_index.expect("checked above");
        match contesting_model_digest {
            None => Ok(Ruling::WatermarkValid),
            Some(contester) => match self.first_model_index(contester) {
                None => Ok(Ruling::ContesterUnregistered),
                Some(ci) if ci < model_index => Ok(Ruling::ContesterWins),
                Some(_) => Ok(Ruling::ClaimantWins),
            },
        }
    }
}
