//! Append-only hash-chained audit ledger with HMAC attestation.
//!
//! On-disk layout: an 8-byte magic header followed by length-prefixed
//! records. Every record body is
//! `seq u64 | step u64 | seq_in_step u64 | kind_len u32 | kind | payload_len u32 | payload | payload_hash | prev_hash | entry_hash`
//! with integers little-endian and hashes 32 raw bytes.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use hmac::{Hmac, KeyInit, Mac};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::sim::SimTime;

pub const MAGIC: &[u8; 8] = b"GOVLDG01";
pub const GENESIS: [u8; 32] = [0u8; 32];

pub type Hash = [u8; 32];

#[derive(Debug, thiserror::Error)]
pub enum LedgerError {
    #[error("ledger io: {0}")]
    Io(#[from] std::io::Error),
    #[error("ledger is corrupt at entry {first_bad_seq}; refusing to append")]
    CorruptLedger { first_bad_seq: u64 },
    #[error("malformed ledger file: {0}")]
    Malformed(String),
    #[error("payload encoding failed: {0}")]
    Encode(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub seq: u64,
    pub at: SimTime,
    pub kind: String,
    #[serde(with = "payload_text")]
    pub payload: Vec<u8>,
    #[serde(with = "hex_hash")]
    pub payload_hash: Hash,
    #[serde(with = "hex_hash")]
    pub prev_hash: Hash,
    #[serde(with = "hex_hash")]
    pub entry_hash: Hash,
}

mod hex_hash {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(h: &[u8; 32], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(h))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[u8; 32], D::Error> {
        let s = String::deserialize(d)?;
        let v = hex::decode(&s).map_err(serde::de::Error::custom)?;
        v.try_into().map_err(|_| serde::de::Error::custom("hash must be 32 bytes"))
    }
}

mod payload_text {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(p: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&String::from_utf8_lossy(p))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        Ok(String::deserialize(d)?.into_bytes())
    }
}

pub fn payload_hash(kind: &str, payload: &[u8]) -> Hash {
    let mut h = Sha256::new();
    h.update(kind.as_bytes());
    h.update([0u8]);
    h.update(payload);
    h.finalize().into()
}

pub fn entry_hash(seq: u64, at: SimTime, payload_hash: &Hash, prev_hash: &Hash) -> Hash {
    let mut h = Sha256::new();
    h.update(seq.to_le_bytes());
    h.update(at.step.to_le_bytes());
    h.update(at.seq.to_le_bytes());
    h.update(payload_hash);
    h.update(prev_hash);
    h.finalize().into()
}

impl LedgerEntry {
    fn encode(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(24 + 8 + self.kind.len() + self.payload.len() + 96);
        b.extend_from_slice(&self.seq.to_le_bytes());
        b.extend_from_slice(&self.at.step.to_le_bytes());
        b.extend_from_slice(&self.at.seq.to_le_bytes());
        b.extend_from_slice(&(self.kind.len() as u32).to_le_bytes());
        b.extend_from_slice(self.kind.as_bytes());
        b.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        b.extend_from_slice(&self.payload);
        b.extend_from_slice(&self.payload_hash);
        b.extend_from_slice(&self.prev_hash);
        b.extend_from_slice(&self.entry_hash);
        b
    }

    fn decode(body: &[u8]) -> Result<Self, LedgerError> {
        let mut cur = Cursor { buf: body, pos: 0 };
        let seq = cur.u64()?;
        let at = SimTime::new(cur.u64()?, cur.u64()?);
        let klen = cur.u32()? as usize;
        let kind = String::from_utf8(cur.take(klen)?.to_vec()).map_err(|_| LedgerError::Malformed("kind is not utf-8".into()))?;
        let plen = cur.u32()? as usize;
        let payload = cur.take(plen)?.to_vec();
        let payload_hash = cur.hash()?;
        let prev_hash = cur.hash()?;
        let entry_hash = cur.hash()?;
        if cur.pos != body.len() {
            return Err(LedgerError::Malformed(format!("trailing bytes in record {seq}")));
        }
        Ok(Self { seq, at, kind, payload, payload_hash, prev_hash, entry_hash })
    }

    pub fn payload_json(&self) -> Option<serde_json::Value> {
        serde_json::from_slice(&self.payload).ok()
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], LedgerError> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len()).ok_or_else(|| LedgerError::Malformed("truncated record".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u64(&mut self) -> Result<u64, LedgerError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, LedgerError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn hash(&mut self) -> Result<Hash, LedgerError> {
        Ok(self.take(32)?.try_into().unwrap())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum VerifyResult {
    Ok { entries: u64 },
    Broken { first_bad_seq: u64 },
}

impl VerifyResult {
    pub fn is_ok(&self) -> bool {
        matches!(self, VerifyResult::Ok { .. })
    }
}

/// Recompute the chain from genesis.
pub fn verify_entries(entries: &[LedgerEntry]) -> VerifyResult {
    let mut prev = GENESIS;
    for (i, e) in entries.iter().enumerate() {
        let i = i as u64;
        let ok = e.seq == i
            && e.prev_hash == prev
            && e.payload_hash == payload_hash(&e.kind, &e.payload)
            && e.entry_hash == entry_hash(e.seq, e.at, &e.payload_hash, &e.prev_hash);
        if !ok {
            return VerifyResult::Broken { first_bad_seq: i };
        }
        prev = e.entry_hash;
    }
    VerifyResult::Ok { entries: entries.len() as u64 }
}

/// Parse a ledger file. Framing damage stops parsing; the entries read so
/// far are returned with the index of the damaged record.
pub fn read_entries(bytes: &[u8]) -> Result<(Vec<LedgerEntry>, Option<u64>), LedgerError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(LedgerError::Malformed("bad magic header".into()));
    }
    let mut pos = MAGIC.len();
    let mut out = Vec::new();
    while pos < bytes.len() {
        let idx = out.len() as u64;
        if bytes.len() - pos < 4 {
            return Ok((out, Some(idx)));
        }
        let len = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
        pos += 4;
        if bytes.len() - pos < len {
            return Ok((out, Some(idx)));
        }
        match LedgerEntry::decode(&bytes[pos..pos + len]) {
            Ok(e) => out.push(e),
            Err(_) => return Ok((out, Some(idx))),
        }
        pos += len;
    }
    Ok((out, None))
}

pub fn verify_bytes(bytes: &[u8]) -> Result<VerifyResult, LedgerError> {
    let (entries, damaged) = read_entries(bytes)?;
    Ok(match (verify_entries(&entries), damaged) {
        (VerifyResult::Broken { first_bad_seq }, _) => VerifyResult::Broken { first_bad_seq },
        (VerifyResult::Ok { .. }, Some(i)) => VerifyResult::Broken { first_bad_seq: i },
        (ok, None) => ok,
    })
}

pub fn verify_file(path: &Path) -> Result<VerifyResult, LedgerError> {
    verify_bytes(&std::fs::read(path)?)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attestation {
    pub head_seq: u64,
    pub head_hash: String,
    pub mac: String,
    pub issued_at: SimTime,
}

fn attestation_mac(key: &[u8], head_seq: u64, head_hash: &Hash, issued_at: SimTime) -> Hmac<Sha256> {
    let mut mac = <Hmac<Sha256> as KeyInit>::new_from_slice(key).expect("hmac accepts any key length");
    mac.update(&head_seq.to_le_bytes());
    mac.update(head_hash);
    mac.update(&issued_at.step.to_le_bytes());
    mac.update(&issued_at.seq.to_le_bytes());
    mac
}

/// True when the attestation's MAC is valid and its head is present in
/// `entries` with the same hash.
pub fn verify_attestation(key: &[u8], att: &Attestation, entries: &[LedgerEntry]) -> bool {
    let Ok(head) = hex::decode(&att.head_hash) else { return false };
    let Ok(head): Result<Hash, _> = head.try_into() else { return false };
    let Ok(tag) = hex::decode(&att.mac) else { return false };
    if attestation_mac(key, att.head_seq, &head, att.issued_at).verify_slice(&tag).is_err() {
        return false;
    }
    entries.get(att.head_seq as usize).is_some_and(|e| e.entry_hash == head) && verify_entries(entries).is_ok()
}

/// Served at `/ledger/head`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerHead {
    pub entries: u64,
    pub head_seq: Option<u64>,
    pub head_hash: String,
}

pub struct Ledger {
    entries: Vec<LedgerEntry>,
    sink: Option<(PathBuf, BufWriter<File>)>,
    broken: Option<u64>,
}

impl std::fmt::Debug for Ledger {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Ledger").field("entries", &self.entries.len()).field("broken", &self.broken).finish()
    }
}

impl Default for Ledger {
    fn default() -> Self {
        Self::in_memory()
    }
}

impl Ledger {
    pub fn in_memory() -> Self {
        Self { entries: Vec::new(), sink: None, broken: None }
    }

    /// Create (truncate) a ledger file and write entries ahead as appended.
    pub fn create(path: &Path) -> Result<Self, LedgerError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.flush()?;
        Ok(Self { entries: Vec::new(), sink: Some((path.to_path_buf(), w)), broken: None })
    }

    /// Open an existing ledger; verification runs first and a broken chain
    /// leaves the ledger read-only.
    pub fn open(path: &Path) -> Result<Self, LedgerError> {
        let mut bytes = Vec::new();
        File::open(path)?.read_to_end(&mut bytes)?;
        let (entries, damaged) = read_entries(&bytes)?;
        let broken = match verify_entries(&entries) {
            VerifyResult::Broken { first_bad_seq } => Some(first_bad_seq),
            VerifyResult::Ok { .. } => damaged,
        };
        let file = OpenOptions::new().append(true).open(path)?;
        Ok(Self { entries, sink: Some((path.to_path_buf(), BufWriter::new(file))), broken })
    }

    pub fn append(&mut self, at: SimTime, kind: &str, payload: Vec<u8>) -> Result<&LedgerEntry, LedgerError> {
        if let Some(first_bad_seq) = self.broken {
            return Err(LedgerError::CorruptLedger { first_bad_seq });
        }
        let seq = self.entries.len() as u64;
        let prev_hash = self.head_hash();
        let ph = payload_hash(kind, &payload);
        let e = LedgerEntry {
            seq,
            at,
            kind: kind.to_string(),
            payload,
            payload_hash: ph,
            prev_hash,
            entry_hash: entry_hash(seq, at, &ph, &prev_hash),
        };
        if let Some((_, w)) = &mut self.sink {
            let body = e.encode();
            w.write_all(&(body.len() as u32).to_le_bytes())?;
            w.write_all(&body)?;
        }
        self.entries.push(e);
        Ok(self.entries.last().unwrap())
    }

    /// Append a value serialized as canonical JSON.
    pub fn append_json<T: Serialize>(&mut self, at: SimTime, kind: &str, value: &T) -> Result<&LedgerEntry, LedgerError> {
        let bytes = crate::canonical::to_vec(value)?;
        self.append(at, kind, bytes)
    }

    pub fn flush(&mut self) -> Result<(), LedgerError> {
        if let Some((_, w)) = &mut self.sink {
            w.flush()?;
        }
        Ok(())
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn head(&self) -> Option<&LedgerEntry> {
        self.entries.last()
    }

    pub fn head_hash(&self) -> Hash {
        self.entries.last().map(|e| e.entry_hash).unwrap_or(GENESIS)
    }

    pub fn head_info(&self) -> LedgerHead {
        LedgerHead {
            entries: self.entries.len() as u64,
            head_seq: self.head().map(|e| e.seq),
            head_hash: hex::encode(self.head_hash()),
        }
    }

    pub fn path(&self) -> Option<&Path> {
        self.sink.as_ref().map(|(p, _)| p.as_path())
    }

    pub fn verify(&self) -> VerifyResult {
        verify_entries(&self.entries)
    }

    /// Serialize the whole ledger in the file format.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        for e in &self.entries {
            let body = e.encode();
            out.extend_from_slice(&(body.len() as u32).to_le_bytes());
            out.extend_from_slice(&body);
        }
        out
    }

    /// Sign the current head. `None` on an empty ledger.
    pub fn attest(&self, key: &[u8], issued_at: SimTime) -> Option<Attestation> {
        let head = self.head()?;
        let mac = attestation_mac(key, head.seq, &head.entry_hash, issued_at).finalize().into_bytes();
        Some(Attestation {
            head_seq: head.seq,
            head_hash: hex::encode(head.entry_hash),
            mac: hex::encode(mac),
            issued_at,
        })
    }
}
