//! Simulated blockchains with gas metering, native single-invocation
//! atomicity, size-limited blocks and a hash-chained JSON-lines dump.

mod offchain;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::{sha256_hex, to_compact_json};

pub use offchain::{DirStore, MemoryStore, OffchainError, OffchainStore};

pub const CHAIN_SCHEMA: &str = "tabsplus-chain/1";
pub const DEFAULT_BLOCK_LIMIT: u64 = 1_920_000;
pub const MAIN: &str = "main";
pub const SIDE: &str = "side";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GasSchedule {
    pub base_invoke: u64,
    pub per_write_byte: u64,
    pub per_read_byte: u64,
    pub per_event: u64,
    pub per_event_byte: u64,
    pub per_crypto_byte: u64,
    pub per_relay_message: u64,
    pub gas_price: u64,
}

impl Default for GasSchedule {
    fn default() -> Self {
        GasSchedule {
            base_invoke: 21_000,
            per_write_byte: 625,
            per_read_byte: 6,
            per_event: 375,
            // event and crypto byte prices as fitted by `cost::calibrate`
            per_event_byte: 23,
            per_crypto_byte: 492,
            per_relay_message: 5_000,
            gas_price: 20,
        }
    }
}

impl GasSchedule {
    pub fn gas(&self, u: &Usage) -> u64 {
        u.invokes * self.base_invoke
            + u.write_bytes * self.per_write_byte
            + u.read_bytes * self.per_read_byte
            + u.events * self.per_event
            + u.event_bytes * self.per_event_byte
            + u.crypto_bytes * self.per_crypto_byte
            + u.relay_messages * self.per_relay_message
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// Metered work. Gas is the dot product with a [`GasSchedule`], so usage
/// vectors can be re-priced without re-running.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Usage {
    pub invokes: u64,
    pub write_bytes: u64,
    pub read_bytes: u64,
    pub events: u64,
    pub event_bytes: u64,
    pub crypto_bytes: u64,
    pub relay_messages: u64,
}

impl Add for Usage {
    type Output = Usage;

    fn add(self, o: Usage) -> Usage {
        Usage {
            invokes: self.invokes + o.invokes,
            write_bytes: self.write_bytes + o.write_bytes,
            read_bytes: self.read_bytes + o.read_bytes,
            events: self.events + o.events,
            event_bytes: self.event_bytes + o.event_bytes,
            crypto_bytes: self.crypto_bytes + o.crypto_bytes,
            relay_messages: self.relay_messages + o.relay_messages,
        }
    }
}

impl AddAssign for Usage {
    fn add_assign(&mut self, o: Usage) {
        *self = *self + o;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEvent {
    pub name: String,
    pub target: String,
    pub len: u64,
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum TxStatus {
    Committed,
    Reverted { reason: String },
}

impl TxStatus {
    pub fn is_committed(&self) -> bool {
        matches!(self, TxStatus::Committed)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WriteRecord {
    pub key: String,
    pub len: u64,
    pub digest: String,
    /// Hex value; omitted from the block hash, which covers `digest`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<String>,
}

/// One native transaction, or one part of it when its writes spill over
/// several blocks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TxRecord {
    pub seq: u64,
    pub method: String,
    pub caller: String,
    #[serde(flatten)]
    pub status: TxStatus,
    pub gas_used: u64,
    pub usage: Usage,
    pub writes: Vec<WriteRecord>,
    pub deletes: Vec<String>,
    pub events: Vec<LogEvent>,
    pub part: u32,
    pub parts: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub height: u64,
    pub prev_hash: String,
    pub hash: String,
    pub txs: Vec<TxRecord>,
}

impl Block {
    fn compute_hash(height: u64, prev_hash: &str, txs: &[TxRecord]) -> String {
        let stripped: Vec<TxRecord> = txs
            .iter()
            .map(|t| {
                let mut t = t.clone();
                for w in &mut t.writes {
                    w.value = None;
                }
                t
            })
            .collect();
        let body = serde_json::json!({ "height": height, "prev_hash": prev_hash, "txs": stripped });
        sha256_hex(to_compact_json(&body).as_bytes())
    }

    pub fn written_bytes(&self) -> u64 {
        self.txs.iter().flat_map(|t| &t.writes).map(|w| w.len).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Receipt {
    pub chain: String,
    pub seq: u64,
    pub method: String,
    pub caller: String,
    pub gas_used: u64,
    pub usage: Usage,
    #[serde(flatten)]
    pub status: TxStatus,
    pub events: Vec<LogEvent>,
    pub written_keys: Vec<String>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LedgerError {
    #[error("method `{0}` is not deployed on chain `{1}`")]
    MethodUnknown(String, String),
    #[error("value for `{key}` is {len} bytes; the block limit is {limit}")]
    OutOfBlockSpace { key: String, len: u64, limit: u64 },
    #[error("nothing to seal")]
    EmptyBlock,
    #[error("no sidechain configured")]
    NoSidechain,
    #[error("corrupt chain dump: {0}")]
    Corrupt(String),
}

/// Staged view of one native invocation.
pub struct Invocation<'a> {
    state: &'a BTreeMap<String, Vec<u8>>,
    staged: BTreeMap<String, Option<Vec<u8>>>,
    usage: Usage,
    events: Vec<LogEvent>,
}

impl Invocation<'_> {
    fn current(&self, key: &str) -> Option<&Vec<u8>> {
        match self.staged.get(key) {
            Some(v) => v.as_ref(),
            None => self.state.get(key),
        }
    }

    /// Metered read; a missing key reads as empty.
    pub fn read(&mut self, key: &str) -> Option<Vec<u8>> {
        let v = self.current(key).cloned();
        self.usage.read_bytes += v.as_ref().map_or(0, |v| v.len() as u64);
        v
    }

    /// Unmetered lookup for the interpreter's own bookkeeping checks.
    pub fn peek(&self, key: &str) -> Option<&[u8]> {
        self.current(key).map(Vec::as_slice)
    }

    pub fn write(&mut self, key: &str, value: Vec<u8>) {
        self.usage.write_bytes += value.len() as u64;
        self.staged.insert(key.to_string(), Some(value));
    }

    /// Deletes are free.
    pub fn delete(&mut self, key: &str) {
        if self.current(key).is_some() {
            self.staged.insert(key.to_string(), None);
        }
    }

    pub fn emit(&mut self, name: &str, target: &str, payload: &[u8]) {
        self.usage.events += 1;
        self.usage.event_bytes += payload.len() as u64;
        self.events.push(LogEvent {
            name: name.to_string(),
            target: target.to_string(),
            len: payload.len() as u64,
            digest: sha256_hex(payload),
        });
    }

    /// Meters a read served from outside this chain's state.
    pub fn charge_read(&mut self, bytes: u64) {
        self.usage.read_bytes += bytes;
    }

    pub fn charge_crypto(&mut self, bytes: u64) {
        self.usage.crypto_bytes += bytes;
    }

    pub fn usage(&self) -> Usage {
        self.usage
    }

    pub fn keys_with_prefix(&self, prefix: &str) -> Vec<String> {
        let mut keys: BTreeSet<String> = self
            .state
            .range(prefix.to_string()..)
            .take_while(|(k, _)| k.starts_with(prefix))
            .map(|(k, _)| k.clone())
            .collect();
        for (k, v) in &self.staged {
            if k.starts_with(prefix) {
                if v.is_some() {
                    keys.insert(k.clone());
                } else {
                    keys.remove(k);
                }
            }
        }
        keys.into_iter().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chain {
    pub id: String,
    pub schedule: GasSchedule,
    pub block_limit: u64,
    state: BTreeMap<String, Vec<u8>>,
    blocks: Vec<Block>,
    pending: Vec<TxRecord>,
    events: Vec<LogEvent>,
    methods: BTreeSet<String>,
    seq: u64,
    total_gas: u64,
    total_usage: Usage,
}

#[derive(Serialize, Deserialize)]
struct DumpHeader {
    schema: String,
    chain: String,
    block_limit: u64,
    schedule: GasSchedule,
    methods: BTreeSet<String>,
}

impl Chain {
    pub fn new(id: &str, schedule: GasSchedule) -> Self {
        Chain {
            id: id.to_string(),
            schedule,
            block_limit: DEFAULT_BLOCK_LIMIT,
            state: BTreeMap::new(),
            blocks: Vec::new(),
            pending: Vec::new(),
            events: Vec::new(),
            methods: BTreeSet::new(),
            seq: 0,
            total_gas: 0,
            total_usage: Usage::default(),
        }
    }

    pub fn deploy(&mut self, method: &str) {
        self.methods.insert(method.to_string());
    }

    pub fn is_deployed(&self, method: &str) -> bool {
        self.methods.contains(method)
    }

    pub fn get(&self, key: &str) -> Option<&[u8]> {
        self.state.get(key).map(Vec::as_slice)
    }

    pub fn state(&self) -> &BTreeMap<String, Vec<u8>> {
        &self.state
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn events(&self) -> &[LogEvent] {
        &self.events
    }

    pub fn pending(&self) -> &[TxRecord] {
        &self.pending
    }

    pub fn total_gas(&self) -> u64 {
        self.total_gas
    }

    pub fn total_usage(&self) -> Usage {
        self.total_usage
    }

    pub fn head_hash(&self) -> String {
        self.blocks.last().map_or_else(|| "0".repeat(64), |b| b.hash.clone())
    }

    /// Runs `f` as one native transaction: its writes and events apply
    /// together if it returns `Ok`, and not at all otherwise. Gas is charged
    /// either way.
    pub fn invoke<T, E: fmt::Display>(
        &mut self,
        method: &str,
        caller: &str,
        f: impl FnOnce(&mut Invocation) -> Result<T, E>,
    ) -> Result<(Receipt, Result<T, E>), LedgerError> {
        if !self.methods.contains(method) {
            return Err(LedgerError::MethodUnknown(method.to_string(), self.id.clone()));
        }
        let mut inv = Invocation {
            state: &self.state,
            staged: BTreeMap::new(),
            usage: Usage { invokes: 1, ..Usage::default() },
            events: Vec::new(),
        };
        let out = f(&mut inv);
        let Invocation { staged, usage, events, .. } = inv;
        let oversized = staged
            .iter()
            .filter_map(|(k, v)| v.as_ref().map(|v| (k, v.len() as u64)))
            .find(|(_, len)| *len > self.block_limit);
        let status = match (&out, oversized) {
            (_, Some((key, len))) => {
                let err = LedgerError::OutOfBlockSpace { key: key.clone(), len, limit: self.block_limit };
                self.record(method, caller, TxStatus::Reverted { reason: err.to_string() }, usage, BTreeMap::new(), Vec::new());
                return Err(err);
            }
            (Ok(_), None) => TxStatus::Committed,
            (Err(e), None) => TxStatus::Reverted { reason: e.to_string() },
        };
        let (staged, events) = if status.is_committed() { (staged, events) } else { (BTreeMap::new(), Vec::new()) };
        let receipt = self.record(method, caller, status, usage, staged, events);
        Ok((receipt, out))
    }

    /// Gas charged to the chain itself rather than to a method call, such as
    /// relaying a message; no base invocation cost.
    pub fn charge_system(&mut self, label: &str, caller: &str, usage: Usage) -> Receipt {
        self.record(label, caller, TxStatus::Committed, usage, BTreeMap::new(), Vec::new())
    }

    fn record(
        &mut self,
        method: &str,
        caller: &str,
        status: TxStatus,
        usage: Usage,
        staged: BTreeMap<String, Option<Vec<u8>>>,
        events: Vec<LogEvent>,
    ) -> Receipt {
        let gas_used = self.schedule.gas(&usage);
        self.seq += 1;
        self.total_gas += gas_used;
        self.total_usage += usage;
        let mut writes = Vec::new();
        let mut deletes = Vec::new();
        for (k, v) in staged {
            match v {
                Some(v) => {
                    writes.push(WriteRecord { key: k.clone(), len: v.len() as u64, digest: sha256_hex(&v), value: Some(hex::encode(&v)) });
                    self.state.insert(k, v);
                }
                None => {
                    self.state.remove(&k);
                    deletes.push(k);
                }
            }
        }
        self.events.extend(events.iter().cloned());
        let receipt = Receipt {
            chain: self.id.clone(),
            seq: self.seq,
            method: method.to_string(),
            caller: caller.to_string(),
            gas_used,
            usage,
            status: status.clone(),
            events: events.clone(),
            written_keys: writes.iter().map(|w| w.key.clone()).collect(),
        };
        self.append(TxRecord {
            seq: self.seq,
            method: method.to_string(),
            caller: caller.to_string(),
            status,
            gas_used,
            usage,
            writes,
            deletes,
            events,
            part: 0,
            parts: 1,
        });
        receipt
    }

    fn pending_bytes(&self) -> u64 {
        self.pending.iter().flat_map(|t| &t.writes).map(|w| w.len).sum()
    }

    /// Adds a record to the open block, sealing full blocks and splitting
    /// the record's writes into continuation parts when needed.
    fn append(&mut self, rec: TxRecord) {
        let bytes: u64 = rec.writes.iter().map(|w| w.len).sum();
        if self.pending_bytes() + bytes <= self.block_limit {
            self.pending.push(rec);
            return;
        }
        if !self.pending.is_empty() {
            let _ = self.seal_block();
        }
        let mut chunks: Vec<Vec<WriteRecord>> = vec![Vec::new()];
        let mut used = 0;
        for w in rec.writes.iter().cloned() {
            if used + w.len > self.block_limit {
                chunks.push(Vec::new());
                used = 0;
            }
            used += w.len;
            chunks.last_mut().unwrap().push(w);
        }
        let parts = chunks.len() as u32;
        for (i, writes) in chunks.into_iter().enumerate() {
            let last = i as u32 + 1 == parts;
            let part = TxRecord {
                writes,
                deletes: if last { rec.deletes.clone() } else { Vec::new() },
                events: if last { rec.events.clone() } else { Vec::new() },
                part: i as u32,
                parts,
                ..rec.clone()
            };
            self.pending.push(part);
            if !last {
                let _ = self.seal_block();
            }
        }
    }

    pub fn seal_block(&mut self) -> Result<String, LedgerError> {
        if self.pending.is_empty() {
            return Err(LedgerError::EmptyBlock);
        }
        let height = self.blocks.len() as u64;
        let prev_hash = self.head_hash();
        let txs = std::mem::take(&mut self.pending);
        let hash = Block::compute_hash(height, &prev_hash, &txs);
        self.blocks.push(Block { height, prev_hash, hash: hash.clone(), txs });
        Ok(hash)
    }

    /// Seals the open block if it holds anything.
    pub fn seal_if_pending(&mut self) -> Option<String> {
        self.seal_block().ok()
    }

    pub fn block_hashes(&self) -> Vec<String> {
        self.blocks.iter().map(|b| b.hash.clone()).collect()
    }

    /// JSON lines: a header, then one sealed block per line. Unsealed
    /// records are not included.
    pub fn to_jsonl(&self) -> String {
        let header = DumpHeader {
            schema: CHAIN_SCHEMA.into(),
            chain: self.id.clone(),
            block_limit: self.block_limit,
            schedule: self.schedule,
            methods: self.methods.clone(),
        };
        let mut out = to_compact_json(&header);
        out.push('\n');
        for b in &self.blocks {
            out.push_str(&to_compact_json(b));
            out.push('\n');
        }
        out
    }

    /// Reloads a dump, checking value digests, block hashes and links, and
    /// rebuilding state by replay.
    pub fn from_jsonl(text: &str) -> Result<Self, LedgerError> {
        let corrupt = |m: String| LedgerError::Corrupt(m);
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: DumpHeader = serde_json::from_str(lines.next().ok_or_else(|| corrupt("empty dump".into()))?)
            .map_err(|e| corrupt(format!("header: {e}")))?;
        if header.schema != CHAIN_SCHEMA {
            return Err(corrupt(format!("schema `{}`", header.schema)));
        }
        let mut chain = Chain::new(&header.chain, header.schedule);
        chain.block_limit = header.block_limit;
        chain.methods = header.methods;
        for (i, line) in lines.enumerate() {
            let block: Block = serde_json::from_str(line).map_err(|e| corrupt(format!("block {i}: {e}")))?;
            if block.height != i as u64 || block.prev_hash != chain.head_hash() {
                return Err(corrupt(format!("block {i} does not link to its predecessor")));
            }
            if Block::compute_hash(block.height, &block.prev_hash, &block.txs) != block.hash {
                return Err(corrupt(format!("block {i} hash mismatch")));
            }
            for tx in &block.txs {
                if tx.part == 0 {
                    chain.seq = chain.seq.max(tx.seq);
                    chain.total_gas += tx.gas_used;
                    chain.total_usage += tx.usage;
                }
                if !tx.status.is_committed() {
                    continue;
                }
                for w in &tx.writes {
                    let value = w
                        .value
                        .as_deref()
                        .and_then(|h| hex::decode(h).ok())
                        .ok_or_else(|| corrupt(format!("block {i}: missing value for `{}`", w.key)))?;
                    if sha256_hex(&value) != w.digest || value.len() as u64 != w.len {
                        return Err(corrupt(format!("block {i}: value digest mismatch for `{}`", w.key)));
                    }
                    chain.state.insert(w.key.clone(), value);
                }
                for d in &tx.deletes {
                    chain.state.remove(d);
                }
                chain.events.extend(tx.events.iter().cloned());
            }
            chain.blocks.push(block);
        }
        Ok(chain)
    }
}

/// Main chain plus an optional sidechain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ledger {
    pub main: Chain,
    pub side: Option<Chain>,
}

impl Ledger {
    pub fn new(schedule: GasSchedule, with_side: bool) -> Self {
        Ledger { main: Chain::new(MAIN, schedule), side: with_side.then(|| Chain::new(SIDE, schedule)) }
    }

    pub fn chain(&self, id: &str) -> Result<&Chain, LedgerError> {
        match id {
            SIDE => self.side.as_ref().ok_or(LedgerError::NoSidechain),
            _ => Ok(&self.main),
        }
    }

    pub fn chain_mut(&mut self, id: &str) -> Result<&mut Chain, LedgerError> {
        match id {
            SIDE => self.side.as_mut().ok_or(LedgerError::NoSidechain),
            _ => Ok(&mut self.main),
        }
    }

    pub fn chains(&self) -> impl Iterator<Item = &Chain> {
        std::iter::once(&self.main).chain(self.side.as_ref())
    }

    pub fn total_gas(&self) -> u64 {
        self.chains().map(Chain::total_gas).sum()
    }

    pub fn total_usage(&self) -> Usage {
        self.chains().fold(Usage::default(), |acc, c| acc + c.total_usage())
    }

    /// Charges a relayed message of `bytes` to the sending chain.
    pub fn relay(&mut self, from: &str, to: &str, label: &str, bytes: u64) -> Result<Receipt, LedgerError> {
        if self.side.is_none() {
            return Err(LedgerError::NoSidechain);
        }
        let usage = Usage { relay_messages: 1, event_bytes: bytes, ..Usage::default() };
        Ok(self.chain_mut(from)?.charge_system(&format!("relay:{label}"), to, usage))
    }

    pub fn seal_all(&mut self) {
        self.main.seal_if_pending();
        if let Some(s) = self.side.as_mut() {
            s.seal_if_pending();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain() -> Chain {
        let mut c = Chain::new(MAIN, GasSchedule::default());
        c.deploy("m");
        c
    }

    #[test]
    fn write_gas_is_base_plus_bytes() {
        let mut c = chain();
        let s = c.schedule;
        let (r, _) = c.invoke("m", "a", |inv| -> Result<(), String> {
            inv.write("k", vec![0; 100]);
            Ok(())
        })
        .unwrap();
        assert_eq!(r.gas_used, s.base_invoke + 100 * s.per_write_byte);
        assert_eq!(c.get("k").unwrap().len(), 100);
    }

    #[test]
    fn revert_leaves_state() {
        let mut c = chain();
        let (r, out) = c
            .invoke("m", "a", |inv| {
                inv.write("k", vec![1; 10]);
                Err::<(), _>("boom")
            })
            .unwrap();
        assert!(out.is_err());
        assert!(!r.status.is_committed());
        assert!(c.get("k").is_none());
        assert!(r.gas_used >= c.schedule.base_invoke);
    }

    #[test]
    fn oversized_value_is_rejected() {
        let mut c = chain();
        let err = c
            .invoke("m", "a", |inv| -> Result<(), String> {
                inv.write("big", vec![0; 2_000_000]);
                Ok(())
            })
            .unwrap_err();
        assert!(matches!(err, LedgerError::OutOfBlockSpace { .. }));
        assert!(c.get("big").is_none());
    }

    #[test]
    fn unknown_method() {
        let mut c = chain();
        let err = c.invoke("nope", "a", |_| Ok::<(), String>(())).unwrap_err();
        assert!(matches!(err, LedgerError::MethodUnknown(..)));
    }

    #[test]
    fn seal_semantics() {
        let mut c = chain();
        for _ in 0..2 {
            let _ = c.invoke("m", "a", |inv| -> Result<(), String> {
                inv.write("k", vec![1]);
                Ok(())
            })
            .unwrap();
        }
        c.seal_block().unwrap();
        assert_eq!(c.blocks()[0].txs.len(), 2);
        assert_eq!(c.seal_block(), Err(LedgerError::EmptyBlock));
    }

    #[test]
    fn spill_over_blocks() {
        let mut c = chain();
        let _ = c.invoke("m", "a", |inv| -> Result<(), String> {
            inv.write("a", vec![1; 1_500_000]);
            inv.write("b", vec![2; 1_500_000]);
            Ok(())
        })
        .unwrap();
        c.seal_block().unwrap();
        assert_eq!(c.blocks().len(), 2);
        assert!(c.blocks().iter().all(|b| b.written_bytes() <= c.block_limit));
        let back = Chain::from_jsonl(&c.to_jsonl()).unwrap();
        assert_eq!(back.state(), c.state());
    }

    #[test]
    fn dump_round_trip_and_tamper() {
        let mut c = chain();
        let _ = c.invoke("m", "a", |inv| -> Result<(), String> {
            inv.write("k", b"hello".to_vec());
            inv.emit("ev", "b", b"xy");
            Ok(())
        })
        .unwrap();
        c.seal_block().unwrap();
        let dump = c.to_jsonl();
        let back = Chain::from_jsonl(&dump).unwrap();
        assert_eq!(back.state(), c.state());
        assert_eq!(back.block_hashes(), c.block_hashes());
        assert_eq!(back.total_gas(), c.total_gas());
        let tampered = dump.replace(&hex::encode(b"hello"), &hex::encode(b"jello"));
        assert!(Chain::from_jsonl(&tampered).is_err());
    }
}
