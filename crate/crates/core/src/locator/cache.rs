//! Two cache levels and the record format shared by every L2 backend.
//!
//! L2 values are binary records, all integers big-endian:
//!
//! ```text
//! u8   version (1)
//! u8   kind      1 = replica set, 2 = listing
//! u8   flags     bit 0 negative, bit 1 complete, bit 2 found (listings)
//! i64  expires_at, milliseconds since the Unix epoch
//! i64  resolved_at, milliseconds since the Unix epoch
//! str  federated path
//! u32  item count, then per item:
//!        replica: str endpoint id, str backend path, u8 is_directory, opt size
//!        listing: str name, u8 is_directory, opt size
//! ```
//!
//! `str` is a u32 byte length followed by UTF-8; `opt size` is a u8 presence
//! flag followed by a u64 when present.

use std::collections::HashMap;
use std::fmt;
use std::sync::Mutex;
use std::time::Duration;

use async_trait::async_trait;
use chrono::{DateTime, TimeZone, Utc};
use dashmap::DashMap;
use sha2::{Digest, Sha256};

use super::{CacheEntry, ListingEntry, MergedListing, ReplicaLocation, ReplicaSet};
use crate::endpoints::ListEntry;

const VERSION: u8 = 1;
const KIND_REPLICAS: u8 = 1;
const KIND_LISTING: u8 = 2;
const FLAG_NEGATIVE: u8 = 1;
const FLAG_COMPLETE: u8 = 2;
const FLAG_FOUND: u8 = 4;

pub(crate) fn location_key(path: &str) -> String {
    format!("loc:{}", hex::encode(Sha256::digest(path.as_bytes())))
}

pub(crate) fn listing_key(path: &str) -> String {
    format!("lst:{}", hex::encode(Sha256::digest(path.as_bytes())))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) enum Record {
    Replicas(CacheEntry),
    Listing(ListingEntry),
}

impl Record {
    pub fn expires_at(&self) -> DateTime<Utc> {
        match self {
            Record::Replicas(e) => e.expires_at,
            Record::Listing(e) => e.expires_at,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(128);
        out.push(VERSION);
        match self {
            Record::Replicas(e) => {
                let s = &e.replica_set;
                out.push(KIND_REPLICAS);
                out.push(flag(e.negative, FLAG_NEGATIVE) | flag(s.complete, FLAG_COMPLETE));
                put_i64(&mut out, e.expires_at.timestamp_millis());
                put_i64(&mut out, s.resolved_at.timestamp_millis());
                put_str(&mut out, &s.federated_path);
                put_u32(&mut out, s.replicas.len() as u32);
                for r in &s.replicas {
                    put_str(&mut out, &r.endpoint_id);
                    put_str(&mut out, &r.backend_path);
                    out.push(r.is_directory as u8);
                    put_size(&mut out, r.size);
                }
            }
            Record::Listing(e) => {
                let l = &e.listing;
                out.push(KIND_LISTING);
                out.push(flag(e.negative, FLAG_NEGATIVE) | flag(l.complete, FLAG_COMPLETE) | flag(l.found, FLAG_FOUND));
                put_i64(&mut out, e.expires_at.timestamp_millis());
                put_i64(&mut out, l.resolved_at.timestamp_millis());
                put_str(&mut out, &l.federated_path);
                put_u32(&mut out, l.entries.len() as u32);
                for entry in &l.entries {
                    put_str(&mut out, &entry.name);
                    out.push(entry.is_directory as u8);
                    put_size(&mut out, entry.size);
                }
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Record, String> {
        let mut r = ByteReader { buf: bytes };
        let version = r.u8()?;
        if version != VERSION {
            return Err(format!("unsupported record version {version}"));
        }
        let kind = r.u8()?;
        let flags = r.u8()?;
        let expires_at = r.time()?;
        let resolved_at = r.time()?;
        let federated_path = r.string()?;
        let count = r.u32()? as usize;
        let record = match kind {
            KIND_REPLICAS => {
                let mut replicas = Vec::with_capacity(count.min(1024));
                for _ in 0..count {
                    replicas.push(ReplicaLocation {
                        endpoint_id: r.string()?,
                        backend_path: r.string()?,
                        is_directory: r.bool()?,
                        size: r.size()?,
                    });
                }
                Record::Replicas(CacheEntry {
                    replica_set: ReplicaSet {
                        federated_path,
                        replicas,
                        resolved_at,
                        complete: flags & FLAG_COMPLETE != 0,
                    },
                    expires_at,
                    negative: flags & FLAG_NEGATIVE != 0,
                })
            }
            KIND_LISTING => {
                let mut entries = Vec::with_capacity(count.min(1024));
                for _ in 0..count {
                    entries.push(ListEntry {
                        name: r.string()?,
                        is_directory: r.bool()?,
                        size: r.size()?,
                    });
                }
                Record::Listing(ListingEntry {
                    listing: MergedListing {
                        federated_path,
                        entries,
                        resolved_at,
                        complete: flags & FLAG_COMPLETE != 0,
                        found: flags & FLAG_FOUND != 0,
                    },
                    expires_at,
                    negative: flags & FLAG_NEGATIVE != 0,
                })
            }
            other => return Err(format!("unknown record kind {other}")),
        };
        if !r.buf.is_empty() {
            return Err(format!("{} trailing bytes", r.buf.len()));
        }
        Ok(record)
    }
}

fn flag(on: bool, bit: u8) -> u8 {
    if on {
        bit
    } else {
        0
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_be_bytes());
}

fn put_i64(out: &mut Vec<u8>, v: i64) {
    out.extend_from_slice(&v.to_be_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn put_size(out: &mut Vec<u8>, size: Option<u64>) {
    match size {
        Some(v) => {
            out.push(1);
            out.extend_from_slice(&v.to_be_bytes());
        }
        None => out.push(0),
    }
}

struct ByteReader<'a> {
    buf: &'a [u8],
}

impl ByteReader<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N], String> {
        if self.buf.len() < N {
            return Err("truncated record".into());
        }
        let (head, rest) = self.buf.split_at(N);
        self.buf = rest;
        Ok(head.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8, String> {
        Ok(self.take::<1>()?[0])
    }

    fn bool(&mut self) -> Result<bool, String> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(format!("bad boolean byte {v}")),
        }
    }

    fn u32(&mut self) -> Result<u32, String> {
        Ok(u32::from_be_bytes(self.take()?))
    }

    fn time(&mut self) -> Result<DateTime<Utc>, String> {
        let ms = i64::from_be_bytes(self.take()?);
        Utc.timestamp_millis_opt(ms)
            .single()
            .ok_or_else(|| format!("timestamp {ms} out of range"))
    }

    fn string(&mut self) -> Result<String, String> {
        let len = self.u32()? as usize;
        if self.buf.len() < len {
            return Err("truncated record".into());
        }
        let (head, rest) = self.buf.split_at(len);
        self.buf = rest;
        String::from_utf8(head.to_vec()).map_err(|e| e.to_string())
    }

    fn size(&mut self) -> Result<Option<u64>, String> {
        match self.u8()? {
            0 => Ok(None),
            1 => Ok(Some(u64::from_be_bytes(self.take()?))),
            v => Err(format!("bad presence byte {v}")),
        }
    }
}

/// In-process cache: bounded, entries expire against the caller's clock.
pub(crate) struct L1Cache {
    map: DashMap<String, Record>,
    capacity: usize,
}

impl L1Cache {
    pub fn new(capacity: usize) -> Self {
        L1Cache {
            map: DashMap::new(),
            capacity: capacity.max(1),
        }
    }

    pub fn get(&self, key: &str, now: DateTime<Utc>) -> Option<Record> {
        let hit = self.map.get(key)?;
        if hit.expires_at() > now {
            return Some(hit.clone());
        }
        drop(hit);
        self.map.remove_if(key, |_, v| v.expires_at() <= now);
        None
    }

    pub fn peek(&self, key: &str) -> Option<Record> {
        self.map.get(key).map(|r| r.clone())
    }

    pub fn insert(&self, key: String, record: Record, now: DateTime<Utc>) {
        if self.map.len() >= self.capacity && !self.map.contains_key(&key) {
            self.map.retain(|_, v| v.expires_at() > now);
            // Still full: drop arbitrary entries down to 90% capacity.
            let excess = (self.map.len() + 1).saturating_sub(self.capacity * 9 / 10);
            if excess > 0 {
                let victims: Vec<String> = self.map.iter().take(excess).map(|e| e.key().clone()).collect();
                for v in victims {
                    self.map.remove(&v);
                }
            }
        }
        self.map.insert(key, record);
    }

    pub fn remove(&self, key: &str) {
        self.map.remove(key);
    }

    #[cfg(test)]
    pub fn len(&self) -> usize {
        self.map.len()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum L2Error {
    #[error("L2 io: {0}")]
    Io(#[from] std::io::Error),
    #[error("L2 operation timed out")]
    Timeout,
    #[error("L2 protocol: {0}")]
    Protocol(String),
}

/// A shared byte cache reachable from every gateway instance.
#[async_trait]
pub trait L2Cache: Send + Sync + fmt::Debug {
    async fn get(&self, key: &str) -> Result<Option<Vec<u8>>, L2Error>;
    /// `ttl` is at least one second; it is rounded up to whole seconds.
    async fn set(&self, key: &str, value: &[u8], ttl: Duration) -> Result<(), L2Error>;
    async fn delete(&self, key: &str) -> Result<(), L2Error>;
}

/// L2 held in process memory. Several gateways in one process can share it
/// through an `Arc`.
#[derive(Debug, Default)]
pub struct MemoryL2 {
    map: Mutex<HashMap<String, (Vec<u8>, std::time::Instant)>>,
}

impl MemoryL2 {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.map.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[async_trait]
impl L2Cache for MemoryL2 {
    async fn get(&self, key: &str) -> Result<Option<Vec<u8>>, L2Error> {
        let mut map = self.map.lock().unwrap();
        match map.get(key) {
            Some((v, exp)) if *exp > std::time::Instant::now() => Ok(Some(v.clone())),
            Some(_) => {
                map.remove(key);
                Ok(None)
            }
            None => Ok(None),
        }
    }

    async fn set(&self, key: &str, value: &[u8], ttl: Duration) -> Result<(), L2Error> {
        let exp = std::time::Instant::now() + ttl;
        self.map.lock().unwrap().insert(key.to_string(), (value.to_vec(), exp));
        Ok(())
    }

    async fn delete(&self, key: &str) -> Result<(), L2Error> {
        self.map.lock().unwrap().remove(key);
        Ok(())
    }
}
