//! Gateway disk cache: staged copies and uploads, LRU eviction among unpinned
//! entries, pins, and space reservations. Accounting is in bytes:
//! `free = capacity - used - Σ(reservation.bytes - reservation.used_bytes)`.

use super::clock::Clock;
use crate::digest::fnv1a_128;
use crate::error::{GvfError, Result};
use crate::mcat::Subject;
use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PinToken {
    pub token: String,
    pub cache_entry: String,
    pub expires: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reservation {
    pub token: String,
    pub bytes: u64,
    pub used_bytes: u64,
    pub expires: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    pub evictions: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntryState {
    Filling,
    Ready,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntryView {
    pub key: String,
    pub size: u64,
    pub state: EntryState,
    pub pinned: bool,
    pub held: bool,
    pub last_use: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheView {
    pub capacity: u64,
    pub used: u64,
    pub reserved_unfilled: u64,
    pub reserved_total: u64,
    pub entries: Vec<EntryView>,
    pub reservations: Vec<Reservation>,
}

impl CacheView {
    pub fn free(&self) -> u64 {
        self.capacity - self.used - self.reserved_unfilled
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Acquired {
    pub hit: bool,
    pub evicted: Vec<String>,
}

struct Entry {
    size: u64,
    last_use: u64,
    state: EntryState,
    /// Transfer holds: holder → expiry. A held entry is in active use.
    holds: HashMap<String, u64>,
}

struct PinRec {
    key: String,
    owner: Subject,
    expires: u64,
}

struct ResRec {
    r: Reservation,
    owner: Subject,
}

#[derive(Default)]
struct Inner {
    entries: HashMap<String, Entry>,
    pins: BTreeMap<String, PinRec>,
    reservations: BTreeMap<String, ResRec>,
    used: u64,
    tick: u64,
    next_token: u64,
    stats: CacheStats,
}

impl Inner {
    fn purge(&mut self, now: u64) {
        self.pins.retain(|_, p| p.expires > now);
        self.reservations.retain(|_, r| r.r.expires > now);
        for e in self.entries.values_mut() {
            e.holds.retain(|_, exp| *exp > now);
        }
    }

    fn unfilled(&self) -> u64 {
        self.reservations.values().map(|r| r.r.bytes - r.r.used_bytes).sum()
    }

    fn free(&self, capacity: u64) -> u64 {
        capacity - self.used - self.unfilled()
    }

    fn pinned(&self, key: &str) -> bool {
        self.pins.values().any(|p| p.key == key)
    }

    fn evictable(&self, key: &str, e: &Entry) -> bool {
        e.state == EntryState::Ready && e.holds.is_empty() && !self.pinned(key)
    }

    fn touch(&mut self, key: &str) {
        self.tick += 1;
        let t = self.tick;
        if let Some(e) = self.entries.get_mut(key) {
            e.last_use = t;
        }
    }

    fn token(&mut self, prefix: &str) -> String {
        self.next_token += 1;
        format!("{prefix}-{:06}-{:08x}", self.next_token, rand::random::<u32>())
    }
}

pub struct DiskCache {
    dir: PathBuf,
    capacity: u64,
    clock: Arc<Clock>,
    inner: Mutex<Inner>,
    filled: Condvar,
}

impl DiskCache {
    /// The cache is a staging area, not a store: whatever is in `dir` is discarded.
    pub fn open(dir: &Path, capacity: u64, clock: Arc<Clock>) -> Result<DiskCache> {
        if capacity == 0 {
            return Err(GvfError::badreq("cache capacity must be positive"));
        }
        if dir.exists() {
            fs::remove_dir_all(dir)?;
        }
        fs::create_dir_all(dir)?;
        Ok(DiskCache {
            dir: dir.to_path_buf(),
            capacity,
            clock,
            inner: Mutex::new(Inner::default()),
            filled: Condvar::new(),
        })
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    pub fn clock(&self) -> &Arc<Clock> {
        &self.clock
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{:032x}", fnv1a_128(key.as_bytes())))
    }

    fn locked(&self) -> (parking_lot::MutexGuard<'_, Inner>, u64) {
        let now = self.clock.now();
        let mut g = self.inner.lock();
        g.purge(now);
        (g, now)
    }

    /// Evicts strict-LRU among evictable entries until `need` bytes are free.
    /// Nothing is evicted when even a full sweep would not be enough.
    fn make_room(&self, g: &mut Inner, need: u64) -> Result<Vec<String>> {
        let free = g.free(self.capacity);
        if free >= need {
            return Ok(Vec::new());
        }
        let mut victims: Vec<(u64, String, u64)> = g
            .entries
            .iter()
            .filter(|(k, e)| g.evictable(k, e))
            .map(|(k, e)| (e.last_use, k.clone(), e.size))
            .collect();
        let reclaimable: u64 = victims.iter().map(|v| v.2).sum();
        if free + reclaimable < need {
            return Err(GvfError::nospace(format!(
                "cache needs {need} bytes, {free} free and {reclaimable} evictable"
            )));
        }
        victims.sort();
        let mut out = Vec::new();
        let mut free = free;
        for (_, k, size) in victims {
            if free >= need {
                break;
            }
            g.entries.remove(&k);
            g.used -= size;
            free += size;
            g.stats.evictions += 1;
            let _ = fs::remove_file(self.path(&k));
            out.push(k);
        }
        Ok(out)
    }

    /// Explicit eviction: frees at least `need` bytes or fails without evicting.
    pub fn evict(&self, need: u64) -> Result<Vec<String>> {
        let (mut g, _) = self.locked();
        self.make_room(&mut g, need)
    }

    /// Returns the entry for `key`, filling it with `fill` on a miss. Concurrent
    /// callers for one key share a single fill. `hold` is attached atomically
    /// with the lookup so the entry cannot be evicted before the caller uses it.
    pub fn get_or_fill(
        &self,
        key: &str,
        size: u64,
        hold: Option<(&str, u64)>,
        fill: impl FnOnce() -> Result<Vec<u8>>,
    ) -> Result<Acquired> {
        let (mut g, _) = self.locked();
        loop {
            match g.entries.get(key).map(|e| e.state) {
                Some(EntryState::Ready) => {
                    g.touch(key);
                    g.stats.hits += 1;
                    if let (Some((h, exp)), Some(e)) = (hold, g.entries.get_mut(key)) {
                        e.holds.insert(h.to_string(), exp);
                    }
                    return Ok(Acquired {
                        hit: true,
                        evicted: Vec::new(),
                    });
                }
                Some(EntryState::Filling) => {
                    self.filled.wait(&mut g);
                    let now = self.clock.now();
                    g.purge(now);
                }
                None => break,
            }
        }
        g.stats.misses += 1;
        let evicted = self.make_room(&mut g, size)?;
        g.used += size;
        g.entries.insert(
            key.to_string(),
            Entry {
                size,
                last_use: 0,
                state: EntryState::Filling,
                holds: HashMap::new(),
            },
        );
        drop(g);

        let path = self.path(key);
        let outcome = fill().and_then(|data| {
            if data.len() as u64 != size {
                return Err(GvfError::unavail(format!(
                    "{key}: expected {size} bytes, source delivered {}",
                    data.len()
                )));
            }
            fs::write(&path, &data)?;
            Ok(())
        });

        let mut g = self.inner.lock();
        let r = match outcome {
            Ok(()) => {
                g.touch(key);
                if let Some(e) = g.entries.get_mut(key) {
                    e.state = EntryState::Ready;
                    if let Some((h, exp)) = hold {
                        e.holds.insert(h.to_string(), exp);
                    }
                }
                Ok(Acquired { hit: false, evicted })
            }
            Err(e) => {
                g.entries.remove(key);
                g.used -= size;
                let _ = fs::remove_file(&path);
                Err(e)
            }
        };
        self.filled.notify_all();
        r
    }

    /// Adds bytes outside the staging path (evicting as needed). An existing
    /// entry is only touched.
    pub fn insert(&self, key: &str, data: &[u8]) -> Result<Acquired> {
        self.get_or_fill(key, data.len() as u64, None, || Ok(data.to_vec()))
    }

    /// Stores an upload against a reservation; the space was set aside already.
    /// The entry is held by `holder` until removed.
    pub fn put_reserved(&self, key: &str, data: &[u8], reservation: &str, owner: &Subject, holder: &str) -> Result<()> {
        let size = data.len() as u64;
        {
            let (mut g, _) = self.locked();
            if g.entries.contains_key(key) {
                return Err(GvfError::exists(format!("cache entry {key} exists")));
            }
            let r = g
                .reservations
                .get_mut(reservation)
                .ok_or_else(|| GvfError::noent(format!("no active reservation {reservation}")))?;
            if &r.owner != owner {
                return Err(GvfError::perm("reservation belongs to another subject"));
            }
            if r.r.used_bytes + size > r.r.bytes {
                return Err(GvfError::nospace(format!(
                    "reservation {reservation} has {} of {} bytes left",
                    r.r.bytes - r.r.used_bytes,
                    r.r.bytes
                )));
            }
            r.r.used_bytes += size;
            g.used += size;
            g.entries.insert(
                key.to_string(),
                Entry {
                    size,
                    last_use: 0,
                    state: EntryState::Filling,
                    holds: HashMap::from([(holder.to_string(), u64::MAX)]),
                },
            );
        }
        let written = fs::write(self.path(key), data);
        let mut g = self.inner.lock();
        match written {
            Ok(()) => {
                g.touch(key);
                if let Some(e) = g.entries.get_mut(key) {
                    e.state = EntryState::Ready;
                }
                self.filled.notify_all();
                Ok(())
            }
            Err(e) => {
                g.entries.remove(key);
                g.used -= size;
                self.filled.notify_all();
                Err(e.into())
            }
        }
    }

    pub fn contains(&self, key: &str) -> bool {
        let (g, _) = self.locked();
        g.entries.get(key).is_some_and(|e| e.state == EntryState::Ready)
    }

    pub fn touch(&self, key: &str) -> Result<()> {
        let (mut g, _) = self.locked();
        match g.entries.get(key) {
            Some(e) if e.state == EntryState::Ready => {
                g.touch(key);
                Ok(())
            }
            _ => Err(GvfError::noent(format!("{key} is not cached"))),
        }
    }

    /// Reads a ready entry and marks it recently used.
    pub fn read(&self, key: &str) -> Result<Vec<u8>> {
        self.touch(key)?;
        fs::read(self.path(key)).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => GvfError::noent(format!("{key} is not cached")),
            _ => e.into(),
        })
    }

    pub fn size_of(&self, key: &str) -> Option<u64> {
        self.inner.lock().entries.get(key).map(|e| e.size)
    }

    /// Drops an entry regardless of pins (used for finished uploads).
    pub fn remove(&self, key: &str) {
        let mut g = self.inner.lock();
        if let Some(e) = g.entries.remove(key) {
            g.used -= e.size;
            g.pins.retain(|_, p| p.key != key);
            let _ = fs::remove_file(self.path(key));
        }
        self.filled.notify_all();
    }

    pub fn hold(&self, key: &str, holder: &str, expires: u64) -> Result<()> {
        let (mut g, _) = self.locked();
        let e = g
            .entries
            .get_mut(key)
            .ok_or_else(|| GvfError::noent(format!("{key} is not cached")))?;
        e.holds.insert(holder.to_string(), expires);
        Ok(())
    }

    pub fn release_hold(&self, key: &str, holder: &str) {
        if let Some(e) = self.inner.lock().entries.get_mut(key) {
            e.holds.remove(holder);
        }
    }

    pub fn pin(&self, key: &str, owner: &Subject, lifetime: u64) -> Result<PinToken> {
        if lifetime == 0 {
            return Err(GvfError::badreq("pin lifetime must be positive"));
        }
        let (mut g, now) = self.locked();
        if !g.entries.get(key).is_some_and(|e| e.state == EntryState::Ready) {
            return Err(GvfError::noent(format!("{key} is not cached")));
        }
        let token = g.token("pin");
        let expires = now.saturating_add(lifetime);
        g.pins.insert(
            token.clone(),
            PinRec {
                key: key.to_string(),
                owner: owner.clone(),
                expires,
            },
        );
        Ok(PinToken {
            token,
            cache_entry: key.to_string(),
            expires,
        })
    }

    pub fn unpin(&self, token: &str, owner: &Subject) -> Result<()> {
        let (mut g, _) = self.locked();
        match g.pins.get(token) {
            None => Err(GvfError::noent(format!("no active pin {token}"))),
            Some(p) if &p.owner != owner => Err(GvfError::perm("pin belongs to another subject")),
            Some(_) => {
                g.pins.remove(token);
                Ok(())
            }
        }
    }

    pub fn reserve(&self, owner: &Subject, bytes: u64, lifetime: u64) -> Result<Reservation> {
        if bytes == 0 || lifetime == 0 {
            return Err(GvfError::badreq("reservation needs positive bytes and lifetime"));
        }
        let (mut g, now) = self.locked();
        let total: u64 = g.reservations.values().map(|r| r.r.bytes).sum();
        if total + bytes > self.capacity {
            return Err(GvfError::nospace(format!(
                "{bytes} more reserved bytes would exceed capacity {} ({total} reserved)",
                self.capacity
            )));
        }
        self.make_room(&mut g, bytes)?;
        let r = Reservation {
            token: g.token("space"),
            bytes,
            used_bytes: 0,
            expires: now.saturating_add(lifetime),
        };
        g.reservations.insert(
            r.token.clone(),
            ResRec {
                r: r.clone(),
                owner: owner.clone(),
            },
        );
        Ok(r)
    }

    pub fn release(&self, token: &str, owner: &Subject) -> Result<()> {
        let (mut g, _) = self.locked();
        match g.reservations.get(token) {
            None => Err(GvfError::noent(format!("no active reservation {token}"))),
            Some(r) if &r.owner != owner => Err(GvfError::perm("reservation belongs to another subject")),
            Some(_) => {
                g.reservations.remove(token);
                Ok(())
            }
        }
    }

    pub fn reservation(&self, token: &str) -> Result<Reservation> {
        let (g, _) = self.locked();
        g.reservations
            .get(token)
            .map(|r| r.r.clone())
            .ok_or_else(|| GvfError::noent(format!("no active reservation {token}")))
    }

    pub fn reservation_owner(&self, token: &str) -> Option<Subject> {
        let (g, _) = self.locked();
        g.reservations.get(token).map(|r| r.owner.clone())
    }

    pub fn stats(&self) -> CacheStats {
        self.inner.lock().stats
    }

    pub fn view(&self) -> CacheView {
        let (g, _) = self.locked();
        let mut entries: Vec<EntryView> = g
            .entries
            .iter()
            .map(|(k, e)| EntryView {
                key: k.clone(),
                size: e.size,
                state: e.state,
                pinned: g.pinned(k),
                held: !e.holds.is_empty(),
                last_use: e.last_use,
            })
            .collect();
        entries.sort_by(|a, b| a.key.cmp(&b.key));
        CacheView {
            capacity: self.capacity,
            used: g.used,
            reserved_unfilled: g.unfilled(),
            reserved_total: g.reservations.values().map(|r| r.r.bytes).sum(),
            entries,
            reservations: g.reservations.values().map(|r| r.r.clone()).collect(),
        }
    }
}
