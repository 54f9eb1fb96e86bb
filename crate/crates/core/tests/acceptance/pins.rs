use crate::common::*;
use crate::ensure;
use gvf_core::gateway::cache::DiskCache;
use gvf_core::gateway::clock::Clock;
use gvf_core::mcat::Subject;
use gvf_core::{ErrorCode, GvfError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

const CAPACITY: u64 = 16 * 64;
const OPS: usize = 1500;
const SEEDS: u64 = 8;

/// Reference model of the cache's accounting, written from its stated rules.
#[derive(Default)]
struct Model {
    now: u64,
    tick: u64,
    /// key → (size, last use, held by an upload)
    entries: BTreeMap<String, (u64, u64, bool)>,
    /// model pin id → (key, expiry)
    pins: BTreeMap<usize, (String, u64)>,
    /// model reservation id → (bytes, used, expiry)
    res: BTreeMap<usize, (u64, u64, u64)>,
}

impl Model {
    fn purge(&mut self) {
        let now = self.now;
        self.pins.retain(|_, p| p.1 > now);
        self.res.retain(|_, r| r.2 > now);
    }

    fn used(&self) -> u64 {
        self.entries.values().map(|e| e.0).sum()
    }

    fn free(&self) -> u64 {
        CAPACITY - self.used() - self.res.values().map(|r| r.0 - r.1).sum::<u64>()
    }

    fn touch(&mut self, key: &str) {
        self.tick += 1;
        self.entries.get_mut(key).unwrap().1 = self.tick;
    }

    fn pinned(&self, key: &str) -> bool {
        self.pins.values().any(|p| p.0 == key)
    }

    /// Oldest-first victims needed to free `need`, or None when impossible.
    fn make_room(&mut self, need: u64) -> Option<Vec<String>> {
        let mut free = self.free();
        if free >= need {
            return Some(Vec::new());
        }
        let mut cands: Vec<(u64, String, u64)> = self
            .entries
            .iter()
            .filter(|(k, e)| !e.2 && !self.pinned(k))
            .map(|(k, e)| (e.1, k.clone(), e.0))
            .collect();
        if free + cands.iter().map(|c| c.2).sum::<u64>() < need {
            return None;
        }
        cands.sort();
        let mut out = Vec::new();
        for (_, k, size) in cands {
            if free >= need {
                break;
            }
            self.entries.remove(&k);
            free += size;
            out.push(k);
        }
        Some(out)
    }
}

fn code(r: &Result<(), GvfError>) -> Option<ErrorCode> {
    r.as_ref().err().map(|e| e.code)
}

fn one_history(seed: u64) -> Result<(usize, usize, usize), String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let clock = Arc::new(Clock::logical());
    let cache = DiskCache::open(dir.path(), CAPACITY, clock.clone()).map_err(e2s)?;
    let alice = Subject::parse(ALICE).map_err(e2s)?;
    let bob = Subject::parse(BOB).map_err(e2s)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keys: Vec<(String, u64)> = (0..24).map(|i| (format!("/home/alice/c{i:02}"), 64)).collect();

    let mut m = Model::default();
    let mut pin_tokens: Vec<(String, usize)> = Vec::new();
    let mut res_tokens: Vec<(String, usize)> = Vec::new();
    let mut uploads: Vec<String> = Vec::new();
    let (mut evictions, mut pins_survived, mut nospace) = (0, 0, 0);

    for step in 0..OPS {
        m.purge();
        let op = rng.gen_range(0..100);
        let (got, want): (Option<ErrorCode>, Option<ErrorCode>) = match op {
            0..=34 => {
                let (key, size) = keys[rng.gen_range(0..keys.len())].clone();
                let fails = rng.gen_bool(0.05);
                let r = cache.get_or_fill(&key, size, None, || {
                    if fails {
                        Err(GvfError::unavail("source down"))
                    } else {
                        Ok(vec![7u8; size as usize])
                    }
                });
                let want = if m.entries.contains_key(&key) {
                    m.touch(&key);
                    ensure!(r.as_ref().is_ok_and(|a| a.hit && a.evicted.is_empty()), "step {step}: {key} should hit, got {r:?}");
                    None
                } else {
                    match m.make_room(size) {
                        None => Some(ErrorCode::NoSpace),
                        Some(victims) => {
                            if let Ok(a) = &r {
                                ensure!(!a.hit && a.evicted == victims, "step {step}: evicted {:?}, model {victims:?}", a.evicted);
                            }
                            evictions += victims.len();
                            if fails {
                                Some(ErrorCode::Unavail)
                            } else {
                                m.entries.insert(key.clone(), (size, 0, false));
                                m.touch(&key);
                                None
                            }
                        }
                    }
                };
                (r.err().map(|e| e.code), want)
            }
            35..=49 => {
                let key = keys[rng.gen_range(0..keys.len())].0.clone();
                let life = rng.gen_range(1..=40);
                let r = cache.pin(&key, &alice, life);
                let want = if m.entries.contains_key(&key) {
                    let id = pin_tokens.len();
                    m.pins.insert(id, (key, m.now + life));
                    if let Ok(p) = &r {
                        ensure!(p.expires == m.now + life, "step {step}: pin expires {} want {}", p.expires, m.now + life);
                        pin_tokens.push((p.token.clone(), id));
                    }
                    None
                } else {
                    Some(ErrorCode::NoEnt)
                };
                (r.err().map(|e| e.code), want)
            }
            50..=57 if !pin_tokens.is_empty() => {
                let (tok, id) = pin_tokens[rng.gen_range(0..pin_tokens.len())].clone();
                let stranger = rng.gen_bool(0.1);
                let r = cache.unpin(&tok, if stranger { &bob } else { &alice });
                let want = match (m.pins.contains_key(&id), stranger) {
                    (false, _) => Some(ErrorCode::NoEnt),
                    (true, true) => Some(ErrorCode::Perm),
                    (true, false) => {
                        m.pins.remove(&id);
                        None
                    }
                };
                (code(&r), want)
            }
            58..=69 => {
                let bytes = rng.gen_range(1..=400);
                let life = rng.gen_range(1..=60);
                let r = cache.reserve(&alice, bytes, life);
                let total: u64 = m.res.values().map(|r| r.0).sum();
                let want = if total + bytes > CAPACITY {
                    Some(ErrorCode::NoSpace)
                } else {
                    match m.make_room(bytes) {
                        None => Some(ErrorCode::NoSpace),
                        Some(v) => {
                            evictions += v.len();
                            let id = res_tokens.len();
                            m.res.insert(id, (bytes, 0, m.now + life));
                            if let Ok(x) = &r {
                                res_tokens.push((x.token.clone(), id));
                            }
                            None
                        }
                    }
                };
                if want == Some(ErrorCode::NoSpace) {
                    nospace += 1;
                }
                (r.err().map(|e| e.code), want)
            }
            70..=74 if !res_tokens.is_empty() => {
                let (tok, id) = res_tokens[rng.gen_range(0..res_tokens.len())].clone();
                let r = cache.release(&tok, &alice);
                let want = if m.res.remove(&id).is_some() { None } else { Some(ErrorCode::NoEnt) };
                (code(&r), want)
            }
            75..=84 if !res_tokens.is_empty() => {
                let (tok, id) = res_tokens[rng.gen_range(0..res_tokens.len())].clone();
                let key = format!("/home/alice/up{step}");
                let size = rng.gen_range(0..=64);
                let r = cache.put_reserved(&key, &vec![1u8; size as usize], &tok, &alice, "upload");
                let want = match m.res.get_mut(&id) {
                    None => Some(ErrorCode::NoEnt),
                    Some(x) if x.1 + size > x.0 => Some(ErrorCode::NoSpace),
                    Some(x) => {
                        x.1 += size;
                        m.entries.insert(key.clone(), (size, 0, true));
                        m.touch(&key);
                        uploads.push(key);
                        None
                    }
                };
                (code(&r), want)
            }
            85..=89 if !uploads.is_empty() => {
                let key = uploads.swap_remove(rng.gen_range(0..uploads.len()));
                cache.release_hold(&key, "upload");
                if let Some(e) = m.entries.get_mut(&key) {
                    e.2 = false;
                }
                (None, None)
            }
            _ => {
                let secs = rng.gen_range(1..=12);
                clock.advance(secs).map_err(e2s)?;
                m.now += secs;
                (None, None)
            }
        };
        ensure!(got == want, "seed {seed} step {step} op {op}: cache gave {got:?}, model {want:?}");

        m.purge();
        let v = cache.view();
        let cached: BTreeMap<String, u64> = v.entries.iter().map(|e| (e.key.clone(), e.size)).collect();
        let model: BTreeMap<String, u64> = m.entries.iter().map(|(k, e)| (k.clone(), e.0)).collect();
        ensure!(cached == model, "seed {seed} step {step}: cache holds {cached:?}, model {model:?}");
        for (key, exp) in m.pins.values() {
            ensure!(*exp > m.now && cache.contains(key), "seed {seed} step {step}: pinned {key} missing before {exp}");
            pins_survived += 1;
        }
        let pinned: BTreeSet<&str> = v.entries.iter().filter(|e| e.pinned).map(|e| e.key.as_str()).collect();
        let model_pinned: BTreeSet<&str> = m.pins.values().map(|p| p.0.as_str()).collect();
        ensure!(pinned == model_pinned, "seed {seed} step {step}: pinned {pinned:?} vs {model_pinned:?}");

        let by_token: BTreeMap<&str, usize> = res_tokens.iter().map(|(t, i)| (t.as_str(), *i)).collect();
        let ledger: BTreeMap<usize, (u64, u64, u64)> = v
            .reservations
            .iter()
            .map(|r| (by_token[r.token.as_str()], (r.bytes, r.used_bytes, r.expires)))
            .collect();
        ensure!(ledger == m.res, "seed {seed} step {step}: ledger {ledger:?}, model {:?}", m.res);
        ensure!(v.reserved_total <= CAPACITY, "seed {seed} step {step}: {} reserved", v.reserved_total);
        ensure!(v.used + v.reserved_unfilled <= CAPACITY, "seed {seed} step {step}: overcommitted");
        ensure!(v.free() == m.free(), "seed {seed} step {step}: free {} vs {}", v.free(), m.free());
    }
    Ok((evictions, pins_survived, nospace))
}

pub fn run() -> Result<String, String> {
    let (mut ev, mut pins, mut ns) = (0, 0, 0);
    for seed in 0..SEEDS {
        let (a, b, c) = one_history(seed)?;
        ev += a;
        pins += b;
        ns += c;
    }
    ensure!(ev > 0 && ns > 0, "histories too tame: {ev} evictions, {ns} refusals");
    Ok(format!(
        "{SEEDS}x{OPS} ops against a reference model; {ev} evictions, {pins} pin-step checks, {ns} NoSpace refusals, ledger exact"
    ))
}
