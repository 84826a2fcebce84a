//! Action execution inside one native invocation, including the
//! transaction caches.

use std::collections::BTreeMap;

use aes_gcm::aead::{AeadInPlace, KeyInit};
use aes_gcm::{Aes256Gcm, Key, Nonce, Tag};
use serde_json::Value as Json;

use crate::bpmn::WriteSource;
use crate::canonical::{filler, sha256, sha256_parts};
use crate::codegen::ContractPackage;
use crate::fsm::Action;
use crate::ledger::{Invocation, OffchainStore};

use super::{CommitEntry, Faults, StepError, TxnContext, TxnState};

pub(crate) const SIDECAR_LEN: usize = 48;

/// Hidden ledger key for `name` inside the namespace of `txn`.
pub fn hidden_key(seed: &str, txn: &str, name: &str) -> String {
    let d = sha256_parts(&[seed.as_bytes(), b"\0", txn.as_bytes(), b"\0", name.as_bytes()]);
    format!("~{}", hex::encode(d))
}

pub fn state_key(seed: &str, txn: &str) -> String {
    hidden_key(seed, txn, "#state")
}

fn tag_key(seed: &str, txn: &str, key: &str) -> String {
    hidden_key(seed, txn, &format!("#tag:{key}"))
}

fn read_record_key(seed: &str, txn: &str, key: &str) -> String {
    hidden_key(seed, txn, &format!("#read:{key}"))
}

/// Values handed from a side-chain commit to the main chain.
#[derive(Debug, Clone, Default)]
pub(crate) struct ApplyBatch {
    pub txns: Vec<String>,
    pub writes: Vec<(String, String, Vec<u8>)>,
}

impl ApplyBatch {
    pub fn bytes(&self) -> u64 {
        self.writes.iter().map(|(_, _, v)| v.len() as u64).sum()
    }

    pub fn entries(&self, chain: &str) -> Vec<CommitEntry> {
        self.txns
            .iter()
            .map(|t| CommitEntry {
                txn: t.clone(),
                keys: self.writes.iter().filter(|(w, _, _)| w == t).map(|(_, k, _)| k.clone()).collect(),
                chain: chain.to_string(),
            })
            .collect()
    }
}

#[derive(Debug, Default)]
pub(crate) struct Outcome {
    pub marks: Vec<String>,
    pub tokens: Vec<String>,
    pub held: Option<(String, Vec<Action>)>,
    pub notes: Vec<String>,
    pub work_complete: Vec<String>,
    pub barriers: Vec<String>,
    pub apply: Option<ApplyBatch>,
    pub commits: Vec<CommitEntry>,
}

pub(crate) struct Env<'a> {
    pub pkg: &'a ContractPackage,
    pub txns: &'a mut BTreeMap<String, TxnContext>,
    pub offchain: &'a mut dyn OffchainStore,
    /// Main-chain state when the invocation runs on the sidechain.
    pub main_view: Option<&'a BTreeMap<String, Vec<u8>>>,
    pub faults: &'a Faults,
    pub run_id: &'a str,
    pub chain: &'a str,
    pub caller: Option<&'a str>,
    pub payload: &'a Json,
    pub scratch: BTreeMap<String, Vec<u8>>,
}

impl Env<'_> {
    fn seed(&self) -> &str {
        &self.pkg.cache_namespace_seed
    }

    fn resolve(&self, key: &str) -> String {
        key.replace("{run}", self.run_id)
    }

    fn ctx(&mut self, txn: &str) -> Result<&mut TxnContext, StepError> {
        self.txns.get_mut(txn).ok_or_else(|| StepError::UnknownTxn(txn.to_string()))
    }

    pub fn state(&self, txn: &str) -> TxnState {
        self.txns.get(txn).map_or(TxnState::NotStarted, |c| c.state)
    }

    pub fn set_state(&mut self, txn: &str, to: TxnState) -> Result<(), StepError> {
        let ctx = self.ctx(txn)?;
        if !ctx.state.can_move(to) {
            return Err(StepError::WrongState { txn: txn.to_string(), state: ctx.state, wanted: to });
        }
        ctx.state = to;
        Ok(())
    }

    fn require(&self, txn: &str, want: TxnState) -> Result<(), StepError> {
        let state = self.state(txn);
        if state != want {
            return Err(StepError::WrongState { txn: txn.to_string(), state, wanted: want });
        }
        Ok(())
    }

    /// Persists the one-byte state object of `txn`.
    pub fn write_state(&mut self, inv: &mut Invocation, txn: &str) {
        let code = self.state(txn).code();
        inv.write(&state_key(self.seed(), txn), vec![code]);
    }

    fn value(&self, key: &str, size: u64, source: &WriteSource) -> Result<Vec<u8>, StepError> {
        match source {
            WriteSource::Generated => Ok(filler(&format!("{}:{key}", self.run_id), size as usize)),
            WriteSource::Payload(field) => match self.payload.get(field) {
                Some(Json::String(s)) => Ok(s.as_bytes().to_vec()),
                Some(v) => Ok(v.to_string().into_bytes()),
                None => Err(StepError::MissingPayloadField(field.clone())),
            },
            WriteSource::Read(from) => Ok(self.scratch.get(&self.resolve(from)).cloned().unwrap_or_default()),
        }
    }

    fn cipher(&self, txn: &str) -> Aes256Gcm {
        let k = sha256_parts(&[self.seed().as_bytes(), b"\0aes\0", txn.as_bytes()]);
        Aes256Gcm::new(Key::<Aes256Gcm>::from_slice(&k))
    }

    fn nonce(&self, txn: &str, key: &str, version: u64) -> [u8; 12] {
        let d = sha256_parts(&[self.seed().as_bytes(), txn.as_bytes(), b"\0", key.as_bytes(), &version.to_le_bytes()]);
        let mut n = [0u8; 12];
        n.copy_from_slice(&d[..12]);
        n
    }

    /// Encrypts in place; returns the sidecar (GCM tag then plaintext
    /// SHA-256).
    fn seal(&self, txn: &str, key: &str, version: u64, buf: &mut [u8]) -> Vec<u8> {
        let digest = sha256(buf);
        let nonce = self.nonce(txn, key, version);
        let tag = self
            .cipher(txn)
            .encrypt_in_place_detached(Nonce::from_slice(&nonce), key.as_bytes(), buf)
            .expect("in-memory encryption");
        let mut side = tag.to_vec();
        side.extend_from_slice(&digest);
        side
    }

    fn open(&self, txn: &str, key: &str, version: u64, buf: &mut [u8], side: &[u8]) -> Result<(), StepError> {
        let bad = || StepError::CryptoIntegrity(key.to_string());
        if side.len() != SIDECAR_LEN {
            return Err(bad());
        }
        let nonce = self.nonce(txn, key, version);
        self.cipher(txn)
            .decrypt_in_place_detached(Nonce::from_slice(&nonce), key.as_bytes(), buf, Tag::from_slice(&side[..16]))
            .map_err(|_| bad())?;
        if sha256(buf)[..] != side[16..] {
            return Err(bad());
        }
        Ok(())
    }

    fn cache_write(&mut self, inv: &mut Invocation, txn: &str, key: &str, mut value: Vec<u8>) -> Result<(), StepError> {
        self.require(txn, TxnState::Active)?;
        let seed = self.seed().to_string();
        let crypto = self.pkg.crypto_cache;
        let version = {
            let ctx = self.ctx(txn)?;
            ctx.versions += 1;
            ctx.versions
        };
        let len = value.len() as u64;
        let hk = hidden_key(&seed, txn, key);
        let mut keys = vec![hk.clone()];
        if crypto {
            let side = self.seal(txn, key, version, &mut value);
            inv.charge_crypto(len);
            let tk = tag_key(&seed, txn, key);
            inv.write(&tk, side);
            keys.push(tk);
        }
        inv.write(&hk, value);
        let ctx = self.ctx(txn)?;
        ctx.hidden_keys.extend(keys);
        ctx.write_set.insert(key.to_string(), super::CacheEntry { len, version });
        Ok(())
    }

    /// Reads a cached value of `owner`, decrypting when needed.
    fn cache_load(&mut self, inv: &mut Invocation, owner: &str, key: &str) -> Result<Vec<u8>, StepError> {
        let seed = self.seed().to_string();
        let entry = self.txns[owner].write_set[key];
        let mut v = inv.read(&hidden_key(&seed, owner, key)).unwrap_or_default();
        if self.pkg.crypto_cache {
            let side = inv.read(&tag_key(&seed, owner, key)).unwrap_or_default();
            inv.charge_crypto(v.len() as u64);
            self.open(owner, key, entry.version, &mut v, &side)?;
        }
        Ok(v)
    }

    /// Transactions whose caches `txn` can see, nearest first: itself, its
    /// ancestors, then finished transactions elsewhere in the same tree.
    fn visible(&self, txn: &str) -> Vec<String> {
        let plan = &self.pkg.plan;
        let mut out = plan.ancestry(txn);
        let root = out.last().cloned().unwrap_or_default();
        for t in plan.subtree(&root) {
            let done = self.txns.get(&t).is_some_and(|c| c.work_complete && c.state == TxnState::Active);
            if done && !out.contains(&t) {
                out.push(t);
            }
        }
        out
    }

    fn cache_read(&mut self, inv: &mut Invocation, txn: &str, key: &str) -> Result<Vec<u8>, StepError> {
        self.require(txn, TxnState::Active)?;
        for owner in self.visible(txn) {
            if self.txns.get(&owner).is_some_and(|c| c.write_set.contains_key(key)) {
                return self.cache_load(inv, &owner, key);
            }
        }
        let v = match self.main_view {
            Some(main) => {
                let v = main.get(key).cloned().unwrap_or_default();
                inv.charge_read(v.len() as u64);
                v
            }
            None => inv.read(key).unwrap_or_default(),
        };
        let digest = sha256(&v);
        let rk = read_record_key(self.seed(), txn, key);
        inv.write(&rk, digest.to_vec());
        let ctx = self.ctx(txn)?;
        ctx.read_set.insert(key.to_string(), hex::encode(digest));
        ctx.hidden_keys.insert(rk);
        Ok(v)
    }

    /// Checks that every ledger value `txn` read is still current.
    pub fn validate(&mut self, inv: &mut Invocation, txn: &str) -> bool {
        let reads: Vec<(String, String)> =
            self.txns[txn].read_set.iter().map(|(k, d)| (k.clone(), d.clone())).collect();
        reads.into_iter().all(|(k, d)| {
            let v = match self.main_view {
                Some(main) => {
                    let v = main.get(&k).cloned().unwrap_or_default();
                    inv.charge_read(v.len() as u64);
                    v
                }
                None => inv.read(&k).unwrap_or_default(),
            };
            hex::encode(sha256(&v)) == d
        })
    }

    /// Loads the caches of `txns` in order, certifies each to its
    /// participants and drops the cache entries. Writes go straight to the
    /// ledger on the main chain; on the sidechain they are returned for
    /// relaying.
    pub fn commit(&mut self, inv: &mut Invocation, txns: &[String], out: &mut Outcome) -> Result<(), StepError> {
        let mut batch = ApplyBatch { txns: txns.to_vec(), writes: Vec::new() };
        for t in txns {
            let keys: Vec<String> = self.txns[t].write_set.keys().cloned().collect();
            let mut cert = Vec::new();
            for k in keys {
                let v = self.cache_load(inv, t, &k)?;
                cert.extend_from_slice(k.as_bytes());
                cert.extend_from_slice(&sha256(&v));
                batch.writes.push((t.clone(), k, v));
            }
            let cert = sha256(&cert);
            for p in self.pkg.plan.participants.get(t).cloned().unwrap_or_default() {
                inv.emit(&format!("certify:{t}"), &p, &cert);
            }
            let hidden = std::mem::take(&mut self.ctx(t)?.hidden_keys);
            for hk in &hidden {
                inv.delete(hk);
            }
            self.set_state(t, TxnState::Committed)?;
        }
        if self.main_view.is_none() {
            out.commits.extend(batch.entries(self.chain));
            for (_, k, v) in batch.writes {
                inv.write(&k, v);
            }
        } else {
            out.apply = Some(batch);
        }
        Ok(())
    }

    /// Drops every cache entry and state object of `txns` and marks them
    /// aborted. Deletes are free.
    pub fn abort(&mut self, inv: &mut Invocation, txns: &[String]) {
        let seed = self.seed().to_string();
        for t in txns {
            let Some(ctx) = self.txns.get_mut(t) else { continue };
            if matches!(ctx.state, TxnState::Committed | TxnState::Aborted) {
                continue;
            }
            for hk in std::mem::take(&mut ctx.hidden_keys) {
                inv.delete(&hk);
            }
            inv.delete(&state_key(&seed, t));
            ctx.state = TxnState::Aborted;
        }
    }

    pub fn run(
        &mut self,
        inv: &mut Invocation,
        actions: &[Action],
        region: Option<&str>,
    ) -> Result<Outcome, StepError> {
        let mut out = Outcome::default();
        for (i, a) in actions.iter().enumerate() {
            match a {
                Action::Mark { vertex } => out.marks.push(vertex.clone()),
                Action::Read { key } => {
                    let k = self.resolve(key);
                    let v = inv.read(&k).unwrap_or_default();
                    self.scratch.insert(k, v);
                }
                Action::Write { key, size, source } => {
                    let k = self.resolve(key);
                    let v = self.value(&k, *size, source)?;
                    inv.write(&k, v);
                }
                Action::Emit { to, message, size } => {
                    let body = filler(&format!("{}:{message}", self.run_id), *size as usize);
                    inv.emit(message, to, &body);
                }
                Action::OffchainPut { size, digest_key, txn } => {
                    let k = self.resolve(digest_key);
                    let blob = filler(&format!("{}:{k}:blob", self.run_id), *size as usize);
                    let d = self.offchain.put(&blob).map_err(|e| StepError::Offchain(e.to_string()))?;
                    let raw = hex::decode(d).expect("hex digest");
                    match txn {
                        Some(t) => self.cache_write(inv, t, &k, raw)?,
                        None => inv.write(&k, raw),
                    }
                }
                Action::Callback { name } => out.notes.push(format!("callback {name}")),
                Action::Token { event } => out.tokens.push(event.clone()),
                Action::Spawn { branches } => {
                    let before = out.tokens.len();
                    for b in branches {
                        let holds = match &b.guard {
                            None => true,
                            Some(g) => g.parse().eval(self.payload).map_err(|e| StepError::Guard(e.to_string()))?,
                        };
                        if holds {
                            out.tokens.push(b.event.clone());
                        }
                    }
                    if out.tokens.len() == before {
                        return Err(StepError::NoBranch);
                    }
                }
                Action::AccessCheck { txn } => {
                    if let Some(actor) = self.caller {
                        if !self.pkg.plan.is_participant(txn, actor) {
                            return Err(StepError::AccessDenied { actor: actor.to_string(), txn: txn.clone() });
                        }
                    }
                }
                Action::BeginTxn { txn } => self.set_state(txn, TxnState::Active)?,
                Action::CachedRead { txn, key } => {
                    let k = self.resolve(key);
                    let v = self.cache_read(inv, txn, &k)?;
                    self.scratch.insert(k, v);
                }
                Action::CachedWrite { txn, key, size, source } => {
                    let k = self.resolve(key);
                    let v = self.value(&k, *size, source)?;
                    self.cache_write(inv, txn, &k, v)?;
                }
                Action::EndTxn { txn } => {
                    self.require(txn, TxnState::Active)?;
                    self.commit(inv, std::slice::from_ref(txn), &mut out)?;
                }
                Action::WorkComplete { txn } => {
                    self.require(txn, TxnState::Active)?;
                    self.ctx(txn)?.work_complete = true;
                    out.work_complete.push(txn.clone());
                }
                Action::CommitBarrier { txn } => {
                    self.require(txn, TxnState::Active)?;
                    self.ctx(txn)?.barrier = true;
                    out.barriers.push(txn.clone());
                    out.held = Some((txn.clone(), actions[i + 1..].to_vec()));
                    break;
                }
            }
        }
        if let Some(v) = out.marks.iter().find(|v| self.faults.revert_at.contains(*v)) {
            return Err(StepError::Injected(v.clone()));
        }
        if let Some(r) = region {
            if self.state(r) != TxnState::NotStarted {
                self.write_state(inv, r);
            }
        }
        Ok(out)
    }
}
