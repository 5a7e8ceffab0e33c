//! Optimistic transactions over a versioned key-value map. Commits are
//! applied one at a time after validating that nothing read has changed,
//! so committed transactions are equivalent to their commit order.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TxError {
    #[error("transaction {0} conflicted with a concurrent commit")]
    Conflict(u64),
    #[error("invalid key `{0}`")]
    InvalidKey(String),
    #[error("value at `{0}` is not an integer")]
    NotANumber(String),
    #[error("transaction intake is paused for a checkpoint")]
    IntakePaused,
    #[error("unknown transaction {0}")]
    UnknownTransaction(u64),
    #[error("gave up after {0} conflicting attempts")]
    RetriesExhausted(u32),
}

impl TxError {
    pub fn retryable(&self) -> bool {
        matches!(self, TxError::Conflict(_) | TxError::IntakePaused)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum Op {
    Read {
        key: String,
    },
    Put {
        key: String,
        value: Value,
    },
    /// Integer increment; a missing key counts as zero.
    Add {
        key: String,
        delta: i64,
    },
    Delete {
        key: String,
    },
}

impl Op {
    pub fn key(&self) -> &str {
        match self {
            Op::Read { key } | Op::Put { key, .. } | Op::Add { key, .. } | Op::Delete { key } => {
                key
            }
        }
    }

    pub fn read(key: impl Into<String>) -> Self {
        Op::Read { key: key.into() }
    }

    pub fn put(key: impl Into<String>, value: Value) -> Self {
        Op::Put {
            key: key.into(),
            value,
        }
    }

    pub fn add(key: impl Into<String>, delta: i64) -> Self {
        Op::Add {
            key: key.into(),
            delta,
        }
    }

    pub fn delete(key: impl Into<String>) -> Self {
        Op::Delete { key: key.into() }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TxStatus {
    Pending,
    Committed,
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transaction {
    pub id: u64,
    pub ops: Vec<Op>,
    pub status: TxStatus,
}

/// Values observed by a transaction's reads, in op order.
pub type Observed = Vec<(String, Option<Value>)>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TxOutcome {
    pub id: u64,
    pub status: TxStatus,
    pub observed: Observed,
    pub attempts: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Versioned {
    /// `None` is a deletion, kept so validation sees it as a write.
    value: Option<Value>,
    version: u64,
}

#[derive(Debug, Clone)]
struct OpenTx {
    tx: Transaction,
    pc: usize,
    /// Key to the version read (`None` when never written) and the value
    /// seen, so repeated reads stay consistent.
    reads: BTreeMap<String, (Option<u64>, Option<Value>)>,
    writes: BTreeMap<String, Option<Value>>,
    observed: Observed,
}

/// Versioned store with optimistic concurrency control.
#[derive(Debug, Clone, Default)]
pub struct TxEngine {
    data: BTreeMap<String, Versioned>,
    open: BTreeMap<u64, OpenTx>,
    next_id: u64,
    clock: u64,
    paused: bool,
    commits: u64,
    aborts: u64,
}

pub const DEFAULT_MAX_ATTEMPTS: u32 = 8;

fn check_key(key: &str) -> Result<(), TxError> {
    if key.is_empty() || key.chars().any(|c| c.is_control() || c.is_whitespace()) {
        return Err(TxError::InvalidKey(key.to_string()));
    }
    Ok(())
}

impl TxEngine {
    pub fn new() -> Self {
        TxEngine {
            next_id: 1,
            ..Default::default()
        }
    }

    pub fn get(&self, key: &str) -> Option<&Value> {
        self.data.get(key).and_then(|v| v.value.as_ref())
    }

    pub fn snapshot(&self) -> BTreeMap<String, Value> {
        self.data
            .iter()
            .filter_map(|(k, v)| Some((k.clone(), v.value.clone()?)))
            .collect()
    }

    /// Replaces the whole state, as a rollback does. Open transactions are
    /// aborted because their reads no longer mean anything.
    pub fn restore(&mut self, state: BTreeMap<String, Value>) {
        self.clock += 1;
        let version = self.clock;
        self.data = state
            .into_iter()
            .map(|(k, value)| {
                (
                    k,
                    Versioned {
                        value: Some(value),
                        version,
                    },
                )
            })
            .collect();
        self.aborts += self.open.len() as u64;
        self.open.clear();
    }

    pub fn commits(&self) -> u64 {
        self.commits
    }

    pub fn aborts(&self) -> u64 {
        self.aborts
    }

    pub fn open_transactions(&self) -> usize {
        self.open.len()
    }

    pub fn pause_intake(&mut self) {
        self.paused = true;
    }

    pub fn resume_intake(&mut self) {
        self.paused = false;
    }

    pub fn intake_paused(&self) -> bool {
        self.paused
    }

    /// True once intake is paused and every open transaction has finished.
    pub fn drained(&self) -> bool {
        self.paused && self.open.is_empty()
    }

    pub fn begin(&mut self, ops: Vec<Op>) -> Result<u64, TxError> {
        if self.paused {
            return Err(TxError::IntakePaused);
        }
        for op in &ops {
            check_key(op.key())?;
        }
        let id = self.next_id;
        self.next_id += 1;
        self.open.insert(
            id,
            OpenTx {
                tx: Transaction {
                    id,
                    ops,
                    status: TxStatus::Pending,
                },
                pc: 0,
                reads: BTreeMap::new(),
                writes: BTreeMap::new(),
                observed: Vec::new(),
            },
        );
        Ok(id)
    }

    /// Runs the next operation of `id`. Returns false once all ran.
    pub fn step(&mut self, id: u64) -> Result<bool, TxError> {
        let open = self
            .open
            .get_mut(&id)
            .ok_or(TxError::UnknownTransaction(id))?;
        let Some(op) = open.tx.ops.get(open.pc).cloned() else {
            return Ok(false);
        };
        open.pc += 1;
        let key = op.key().to_string();
        let current = match (open.writes.get(&key), open.reads.get(&key)) {
            (Some(buffered), _) => buffered.clone(),
            (None, Some((_, seen))) => seen.clone(),
            (None, None) => {
                let stored = self.data.get(&key);
                let seen = stored.and_then(|v| v.value.clone());
                open.reads
                    .insert(key.clone(), (stored.map(|v| v.version), seen.clone()));
                seen
            }
        };
        match op {
            Op::Read { .. } => open.observed.push((key, current)),
            Op::Put { value, .. } => {
                open.writes.insert(key, Some(value));
            }
            Op::Delete { .. } => {
                open.writes.insert(key, None);
            }
            Op::Add { delta, .. } => {
                let base = match &current {
                    None => 0,
                    Some(v) => v.as_i64().ok_or_else(|| TxError::NotANumber(key.clone()))?,
                };
                open.writes.insert(key, Some(Value::from(base + delta)));
            }
        }
        Ok(open.pc < open.tx.ops.len())
    }

    /// Validates the read set and applies the buffered writes atomically.
    pub fn commit(&mut self, id: u64) -> Result<TxOutcome, TxError> {
        while self.step(id)? {}
        let open = self
            .open
            .remove(&id)
            .ok_or(TxError::UnknownTransaction(id))?;
        let valid = open
            .reads
            .iter()
            .all(|(k, (version, _))| self.data.get(k).map(|v| v.version) == *version);
        if !valid {
            self.aborts += 1;
            return Err(TxError::Conflict(id));
        }
        self.clock += 1;
        for (k, value) in open.writes {
            self.data.insert(
                k,
                Versioned {
                    value,
                    version: self.clock,
                },
            );
        }
        self.commits += 1;
        Ok(TxOutcome {
            id,
            status: TxStatus::Committed,
            observed: open.observed,
            attempts: 1,
        })
    }

    pub fn abort(&mut self, id: u64) {
        if self.open.remove(&id).is_some() {
            self.aborts += 1;
        }
    }

    /// Runs a transaction to completion, retrying conflicts.
    pub fn submit_transaction(&mut self, ops: Vec<Op>) -> Result<TxOutcome, TxError> {
        for attempt in 1..=DEFAULT_MAX_ATTEMPTS {
            let id = self.begin(ops.clone())?;
            match self.commit(id) {
                Ok(outcome) => {
                    return Ok(TxOutcome {
                        attempts: attempt,
                        ..outcome
                    })
                }
                Err(TxError::Conflict(_)) => continue,
                Err(e) => return Err(e),
            }
        }
        Err(TxError::RetriesExhausted(DEFAULT_MAX_ATTEMPTS))
    }
}
