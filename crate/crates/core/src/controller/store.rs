//! Checkpoints and the shared state store. The store is the only medium
//! masters share: checkpoints live under `checkpoint-<seq>.json` and the
//! current leader under `leader.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::state::SystemState;
use crate::SimTime;

pub const LEADER_KEY: &str = "leader.json";
pub const DEFAULT_RETAIN: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum StoreError {
    #[error("state store unavailable")]
    Unavailable,
    #[error("state store i/o: {0}")]
    Io(String),
    #[error("checkpoint {seq} failed its digest check")]
    DigestMismatch { seq: u64 },
    #[error("checkpoint {seq} is unreadable: {message}")]
    Corrupt { seq: u64, message: String },
    #[error("no usable checkpoint")]
    NoCheckpoint,
    #[error("leader record changed concurrently")]
    CasFailed,
}

/// Minimal shared storage with atomic compare-and-set.
pub trait StateStore {
    fn put(&mut self, key: &str, bytes: &[u8]) -> Result<(), StoreError>;
    fn get(&self, key: &str) -> Result<Option<Vec<u8>>, StoreError>;
    /// Writes `new` only if the current value equals `expected`.
    fn compare_and_set(
        &mut self,
        key: &str,
        expected: Option<&[u8]>,
        new: &[u8],
    ) -> Result<bool, StoreError>;
    fn list(&self, prefix: &str) -> Result<Vec<String>, StoreError>;
    fn remove(&mut self, key: &str) -> Result<(), StoreError>;
}

#[derive(Debug, Clone, Default)]
pub struct MemoryStore {
    entries: BTreeMap<String, Vec<u8>>,
    /// When set every call fails, modelling an unreachable store.
    pub unavailable: bool,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn check(&self) -> Result<(), StoreError> {
        if self.unavailable {
            Err(StoreError::Unavailable)
        } else {
            Ok(())
        }
    }

    /// Overwrites raw bytes, bypassing any integrity logic.
    pub fn tamper(&mut self, key: &str, bytes: &[u8]) {
        self.entries.insert(key.to_string(), bytes.to_vec());
    }
}

impl StateStore for MemoryStore {
    fn put(&mut self, key: &str, bytes: &[u8]) -> Result<(), StoreError> {
        self.check()?;
        self.entries.insert(key.to_string(), bytes.to_vec());
        Ok(())
    }

    fn get(&self, key: &str) -> Result<Option<Vec<u8>>, StoreError> {
        self.check()?;
        Ok(self.entries.get(key).cloned())
    }

    fn compare_and_set(
        &mut self,
        key: &str,
        expected: Option<&[u8]>,
        new: &[u8],
    ) -> Result<bool, StoreError> {
        self.check()?;
        if self.entries.get(key).map(Vec::as_slice) != expected {
            return Ok(false);
        }
        self.entries.insert(key.to_string(), new.to_vec());
        Ok(true)
    }

    fn list(&self, prefix: &str) -> Result<Vec<String>, StoreError> {
        self.check()?;
        Ok(self
            .entries
            .keys()
            .filter(|k| k.starts_with(prefix))
            .cloned()
            .collect())
    }

    fn remove(&mut self, key: &str) -> Result<(), StoreError> {
        self.check()?;
        self.entries.remove(key);
        Ok(())
    }
}

/// One file per key in a directory.
#[derive(Debug, Clone)]
pub struct FileStore {
    dir: PathBuf,
}

fn io(e: std::io::Error) -> StoreError {
    StoreError::Io(e.to_string())
}

impl FileStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(io)?;
        Ok(FileStore { dir })
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(key)
    }
}

impl StateStore for FileStore {
    fn put(&mut self, key: &str, bytes: &[u8]) -> Result<(), StoreError> {
        // write then rename so readers never see a torn file
        let tmp = self.path(&format!(".{key}.tmp"));
        fs::write(&tmp, bytes).map_err(io)?;
        fs::rename(&tmp, self.path(key)).map_err(io)
    }

    fn get(&self, key: &str) -> Result<Option<Vec<u8>>, StoreError> {
        match fs::read(self.path(key)) {
            Ok(b) => Ok(Some(b)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(io(e)),
        }
    }

    fn compare_and_set(
        &mut self,
        key: &str,
        expected: Option<&[u8]>,
        new: &[u8],
    ) -> Result<bool, StoreError> {
        // single writer per process: read-compare-write is atomic here
        if self.get(key)?.as_deref() != expected {
            return Ok(false);
        }
        self.put(key, new)?;
        Ok(true)
    }

    fn list(&self, prefix: &str) -> Result<Vec<String>, StoreError> {
        let mut out: Vec<String> = fs::read_dir(&self.dir)
            .map_err(io)?
            .filter_map(|e| e.ok()?.file_name().into_string().ok())
            .filter(|n| n.starts_with(prefix) && !n.starts_with('.'))
            .collect();
        out.sort();
        Ok(out)
    }

    fn remove(&mut self, key: &str) -> Result<(), StoreError> {
        match fs::remove_file(self.path(key)) {
            Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(io(e)),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub seq: u64,
    pub timestamp: SimTime,
    pub state: SystemState,
    /// Hex SHA-256 of the canonical JSON of `state`.
    pub digest: String,
}

pub fn state_digest(state: &SystemState) -> String {
    let bytes = serde_json::to_vec(state).expect("state serializes");
    Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

impl Checkpoint {
    pub fn new(seq: u64, timestamp: SimTime, state: SystemState) -> Self {
        let digest = state_digest(&state);
        Checkpoint {
            seq,
            timestamp,
            state,
            digest,
        }
    }

    pub fn verify(&self) -> Result<(), StoreError> {
        if state_digest(&self.state) == self.digest {
            Ok(())
        } else {
            Err(StoreError::DigestMismatch { seq: self.seq })
        }
    }
}

pub fn checkpoint_key(seq: u64) -> String {
    format!("checkpoint-{seq:08}.json")
}

fn seq_of(key: &str) -> Option<u64> {
    key.strip_prefix("checkpoint-")?
        .strip_suffix(".json")?
        .parse()
        .ok()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeaderRecord {
    pub master_id: String,
    pub term: u64,
    pub timestamp: SimTime,
}

/// A checkpoint that loaded, plus the newer ones that had to be skipped.
#[derive(Debug, Clone, PartialEq)]
pub struct Loaded {
    pub checkpoint: Checkpoint,
    pub skipped: Vec<StoreError>,
}

/// Writes, prunes and loads checkpoints in a [`StateStore`].
pub struct CheckpointStore {
    store: Box<dyn StateStore + Send>,
    retain: usize,
    next_seq: u64,
}

impl CheckpointStore {
    pub fn new(store: Box<dyn StateStore + Send>, retain: usize) -> Self {
        CheckpointStore {
            store,
            retain: retain.max(1),
            next_seq: 1,
        }
    }

    pub fn store(&self) -> &dyn StateStore {
        self.store.as_ref()
    }

    pub fn store_mut(&mut self) -> &mut (dyn StateStore + Send) {
        self.store.as_mut()
    }

    pub fn save(&mut self, state: SystemState, at: SimTime) -> Result<Checkpoint, StoreError> {
        let cp = Checkpoint::new(self.next_seq, at, state);
        let bytes = serde_json::to_vec(&cp).expect("checkpoint serializes");
        self.store.put(&checkpoint_key(cp.seq), &bytes)?;
        self.next_seq += 1;
        let keys = self.sequences()?;
        if keys.len() > self.retain {
            for seq in &keys[..keys.len() - self.retain] {
                self.store.remove(&checkpoint_key(*seq))?;
            }
        }
        Ok(cp)
    }

    pub fn sequences(&self) -> Result<Vec<u64>, StoreError> {
        let mut seqs: Vec<u64> = self
            .store
            .list("checkpoint-")?
            .iter()
            .filter_map(|k| seq_of(k))
            .collect();
        seqs.sort_unstable();
        Ok(seqs)
    }

    pub fn load(&self, seq: u64) -> Result<Checkpoint, StoreError> {
        let bytes = self
            .store
            .get(&checkpoint_key(seq))?
            .ok_or(StoreError::NoCheckpoint)?;
        let cp: Checkpoint = serde_json::from_slice(&bytes).map_err(|e| StoreError::Corrupt {
            seq,
            message: e.to_string(),
        })?;
        cp.verify()?;
        Ok(cp)
    }

    /// Newest checkpoint that verifies, falling back to older ones.
    pub fn load_latest(&self) -> Result<Loaded, StoreError> {
        let mut skipped = Vec::new();
        for seq in self.sequences()?.into_iter().rev() {
            match self.load(seq) {
                Ok(checkpoint) => {
                    return Ok(Loaded {
                        checkpoint,
                        skipped,
                    })
                }
                Err(e @ (StoreError::DigestMismatch { .. } | StoreError::Corrupt { .. })) => {
                    skipped.push(e)
                }
                Err(e) => return Err(e),
            }
        }
        Err(StoreError::NoCheckpoint)
    }

    pub fn leader(&self) -> Result<Option<LeaderRecord>, StoreError> {
        Ok(self
            .store
            .get(LEADER_KEY)?
            .and_then(|b| serde_json::from_slice(&b).ok()))
    }

    /// Installs a new leader record if the current one is still `expected`.
    pub fn swap_leader(
        &mut self,
        expected: Option<&LeaderRecord>,
        new: &LeaderRecord,
    ) -> Result<(), StoreError> {
        let current = self.store.get(LEADER_KEY)?;
        let matches = match (&current, expected) {
            (None, None) => true,
            (Some(bytes), Some(e)) => {
                serde_json::from_slice::<LeaderRecord>(bytes).ok().as_ref() == Some(e)
            }
            _ => false,
        };
        if !matches {
            return Err(StoreError::CasFailed);
        }
        let bytes = serde_json::to_vec(new).expect("leader record serializes");
        if self
            .store
            .compare_and_set(LEADER_KEY, current.as_deref(), &bytes)?
        {
            Ok(())
        } else {
            Err(StoreError::CasFailed)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn state(n: i64) -> SystemState {
        let mut s = SystemState::default();
        s.extra.insert("counter".into(), json!(n));
        s
    }

    #[test]
    fn retains_last_three() {
        let mut cs = CheckpointStore::new(Box::new(MemoryStore::new()), DEFAULT_RETAIN);
        for i in 0..5 {
            cs.save(state(i), SimTime::from_secs(i as u64)).unwrap();
        }
        assert_eq!(cs.sequences().unwrap(), vec![3, 4, 5]);
        assert_eq!(cs.load_latest().unwrap().checkpoint.state, state(4));
    }

    #[test]
    fn digest_mismatch_falls_back() {
        let mut store = MemoryStore::new();
        let good = Checkpoint::new(1, SimTime::ZERO, state(1));
        let mut bad = Checkpoint::new(2, SimTime::from_secs(1), state(2));
        bad.state = state(99);
        store.tamper(&checkpoint_key(1), &serde_json::to_vec(&good).unwrap());
        store.tamper(&checkpoint_key(2), &serde_json::to_vec(&bad).unwrap());
        let cs = CheckpointStore::new(Box::new(store), 3);
        assert_eq!(cs.load(2), Err(StoreError::DigestMismatch { seq: 2 }));
        let loaded = cs.load_latest().unwrap();
        assert_eq!(loaded.checkpoint.seq, 1);
        assert_eq!(loaded.skipped, vec![StoreError::DigestMismatch { seq: 2 }]);
    }

    #[test]
    fn unavailable_store_surfaces() {
        let mut store = MemoryStore::new();
        store.unavailable = true;
        let mut cs = CheckpointStore::new(Box::new(store), 3);
        assert_eq!(
            cs.save(state(0), SimTime::ZERO).unwrap_err(),
            StoreError::Unavailable
        );
        assert_eq!(cs.load_latest().unwrap_err(), StoreError::Unavailable);
    }

    #[test]
    fn leader_cas() {
        let mut cs = CheckpointStore::new(Box::new(MemoryStore::new()), 3);
        let a = LeaderRecord {
            master_id: "m1".into(),
            term: 1,
            timestamp: SimTime::ZERO,
        };
        let b = LeaderRecord {
            master_id: "m2".into(),
            term: 2,
            timestamp: SimTime::from_secs(1),
        };
        cs.swap_leader(None, &a).unwrap();
        assert_eq!(cs.swap_leader(None, &b), Err(StoreError::CasFailed));
        cs.swap_leader(Some(&a), &b).unwrap();
        assert_eq!(cs.leader().unwrap(), Some(b));
    }

    #[test]
    fn file_store_layout() {
        let dir = tempfile::tempdir().unwrap();
        let mut cs = CheckpointStore::new(Box::new(FileStore::open(dir.path()).unwrap()), 2);
        for i in 0..3 {
            cs.save(state(i), SimTime::ZERO).unwrap();
        }
        cs.swap_leader(
            None,
            &LeaderRecord {
                master_id: "m1".into(),
                term: 1,
                timestamp: SimTime::ZERO,
            },
        )
        .unwrap();
        let mut names: Vec<String> = fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        names.sort();
        assert_eq!(
            names,
            [
                "checkpoint-00000002.json",
                "checkpoint-00000003.json",
                "leader.json"
            ]
        );
        let raw = fs::read(dir.path().join("checkpoint-00000003.json")).unwrap();
        let mut cp: Checkpoint = serde_json::from_slice(&raw).unwrap();
        cp.digest = "0".repeat(64);
        fs::write(
            dir.path().join("checkpoint-00000003.json"),
            serde_json::to_vec(&cp).unwrap(),
        )
        .unwrap();
        assert_eq!(cs.load_latest().unwrap().checkpoint.seq, 2);
    }
}
