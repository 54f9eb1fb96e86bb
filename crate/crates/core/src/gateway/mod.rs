//! SRM-style gateway: transfer requests with a fixed state machine, a disk
//! cache providing pins and space reservations, and a pluggable driver that
//! reaches the broker.

pub mod cache;
pub mod client;
pub mod clock;
pub mod driver;
pub mod http;

use crate::auth::Authenticator;
use crate::broker::ListingItem;
use crate::error::{ErrorCode, GvfError, Result};
use crate::mcat::Subject;
use crate::rls::Surl;
use crate::wire::{ConnInfo, Handler, Reply, Request};
use cache::{DiskCache, PinToken, Reservation};
use driver::{DriverBoundary, Fetched, StagingContext, KNOWN_PROTOCOLS, PROTO_CACHE_HTTP};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransferKind {
    Get,
    Put,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransferState {
    Queued,
    Staging,
    Ready,
    Active,
    Done,
    Failed,
}

impl TransferState {
    pub fn as_str(self) -> &'static str {
        match self {
            TransferState::Queued => "queued",
            TransferState::Staging => "staging",
            TransferState::Ready => "ready",
            TransferState::Active => "active",
            TransferState::Done => "done",
            TransferState::Failed => "failed",
        }
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, TransferState::Done | TransferState::Failed)
    }

    /// The edges of the request graph.
    pub fn can_move_to(self, next: TransferState) -> bool {
        use TransferState::*;
        match (self, next) {
            (Queued, Staging) | (Staging, Ready) | (Ready, Active) | (Active, Done) => true,
            (from, Failed) => !from.is_terminal(),
            _ => false,
        }
    }

    pub fn has_turl(self) -> bool {
        matches!(self, TransferState::Ready | TransferState::Active | TransferState::Done)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferRequest {
    pub request_id: String,
    pub kind: TransferKind,
    pub subject: Subject,
    pub surl: Surl,
    pub protocols: Vec<String>,
    pub state: TransferState,
    pub turl: Option<String>,
    pub error: Option<ErrorCode>,
    pub pin: Option<String>,
    pub size: Option<u64>,
    pub digest: Option<String>,
    pub created: u64,
    pub updated: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transition {
    pub request_id: String,
    pub from: TransferState,
    pub to: TransferState,
}

/// Gateway counters. Cache counters are filled in from the cache at snapshot time.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Metrics {
    pub staging_copies: u64,
    pub bytes_copied: u64,
    pub cache_hits: u64,
    pub cache_misses: u64,
    pub evictions: u64,
    pub requests_by_outcome: BTreeMap<String, u64>,
    /// Delivered bytes by the site of the vault they were originally read from.
    pub bytes_served_by_site: BTreeMap<String, u64>,
    /// Bytes handed to clients by completed get transfers.
    pub bytes_delivered: u64,
}

pub struct GatewayOptions {
    /// host:port used in SURLs.
    pub endpoint: String,
    /// host:port of the cache-http server, used in `cache://` TURLs.
    pub http_endpoint: String,
    pub site_id: String,
    pub turl_lifetime: u64,
    pub metrics_path: Option<PathBuf>,
}

enum TokenUse {
    Download { key: String },
    Upload { reservation: String, implicit: bool, size_hint: u64 },
}

struct TurlToken {
    request_id: String,
    expires: u64,
    usage: TokenUse,
}

/// Per-request facts not exposed on the wire.
#[derive(Default)]
struct Private {
    cache_key: Option<String>,
    origin_site: Option<String>,
}

pub struct Gateway {
    opts: GatewayOptions,
    auth: Authenticator,
    driver: Arc<dyn DriverBoundary>,
    cache: DiskCache,
    metrics: Mutex<Metrics>,
    origins: Mutex<BTreeMap<String, String>>,
    requests: Mutex<BTreeMap<String, (TransferRequest, Private)>>,
    transitions: Mutex<Vec<Transition>>,
    tokens: Mutex<HashMap<String, TurlToken>>,
    next_id: AtomicU64,
}

fn check_protocols(protocols: &[String]) -> Result<()> {
    if protocols.is_empty() {
        return Err(GvfError::badreq("at least one transfer protocol is required"));
    }
    if let Some(p) = protocols.iter().find(|p| !KNOWN_PROTOCOLS.contains(&p.as_str())) {
        return Err(GvfError::badreq(format!("unknown transfer protocol {p:?}")));
    }
    Ok(())
}

/// Accepts either a SURL prefix or a plain dataname prefix.
fn listing_prefix(prefix: &str) -> Result<String> {
    let Some(rest) = prefix.strip_prefix("srm://") else {
        return Ok(prefix.to_string());
    };
    let bad = || GvfError::badreq(format!("malformed surl prefix {prefix:?}"));
    let (_authority, path) = rest.split_once('/').ok_or_else(bad)?;
    Ok(match path.split_once('/') {
        Some((_site, name)) => format!("/{name}"),
        None => "/".to_string(),
    })
}

impl Gateway {
    pub fn new(opts: GatewayOptions, auth: Authenticator, driver: Arc<dyn DriverBoundary>, cache: DiskCache) -> Arc<Gateway> {
        Arc::new(Gateway {
            opts,
            auth,
            driver,
            cache,
            metrics: Mutex::new(Metrics::default()),
            origins: Mutex::new(BTreeMap::new()),
            requests: Mutex::new(BTreeMap::new()),
            transitions: Mutex::new(Vec::new()),
            tokens: Mutex::new(HashMap::new()),
            next_id: AtomicU64::new(1),
        })
    }

    pub fn cache(&self) -> &DiskCache {
        &self.cache
    }

    pub fn driver(&self) -> &Arc<dyn DriverBoundary> {
        &self.driver
    }

    pub fn auth(&self) -> &Authenticator {
        &self.auth
    }

    fn now(&self) -> u64 {
        self.cache.clock().now()
    }

    fn ctx(&self) -> StagingContext<'_> {
        StagingContext {
            cache: &self.cache,
            metrics: &self.metrics,
            origins: &self.origins,
        }
    }

    fn mint(&self, prefix: &str) -> String {
        format!(
            "{prefix}{:06}{:016x}",
            self.next_id.fetch_add(1, Ordering::Relaxed),
            rand::random::<u64>()
        )
    }

    fn create(&self, kind: TransferKind, subject: &Subject, surl: Surl, protocols: Vec<String>) -> String {
        let id = format!("req-{:06}", self.next_id.fetch_add(1, Ordering::Relaxed));
        let now = self.now();
        let req = TransferRequest {
            request_id: id.clone(),
            kind,
            subject: subject.clone(),
            surl,
            protocols,
            state: TransferState::Queued,
            turl: None,
            error: None,
            pin: None,
            size: None,
            digest: None,
            created: now,
            updated: now,
        };
        self.requests.lock().insert(id.clone(), (req, Private::default()));
        id
    }

    /// Moves a request along one edge. Illegal moves are refused, never applied.
    fn advance(&self, id: &str, to: TransferState, edit: impl FnOnce(&mut TransferRequest, &mut Private)) -> Result<TransferRequest> {
        let now = self.now();
        let mut reqs = self.requests.lock();
        let (req, private) = reqs
            .get_mut(id)
            .ok_or_else(|| GvfError::noent(format!("no request {id}")))?;
        let from = req.state;
        if !from.can_move_to(to) {
            return Err(GvfError::badreq(format!("request {id} cannot go from {from:?} to {to:?}")));
        }
        edit(req, private);
        req.state = to;
        req.updated = now;
        if !to.has_turl() {
            req.turl = None;
        }
        debug_assert_eq!(req.turl.is_some(), to.has_turl(), "turl present iff ready/active/done");
        self.transitions.lock().push(Transition {
            request_id: id.to_string(),
            from,
            to,
        });
        let out = req.clone();
        drop(reqs);
        if to.is_terminal() {
            self.flush_metrics();
        }
        Ok(out)
    }

    fn fail(&self, id: &str, e: &GvfError) -> TransferRequest {
        log::info!("request {id} failed: {e}");
        let mut hold_key = None;
        let r = self
            .advance(id, TransferState::Failed, |r, p| {
                r.error = Some(e.code);
                hold_key = p.cache_key.clone();
            })
            .expect("non-terminal request can always fail");
        if let Some(k) = hold_key {
            self.cache.release_hold(&k, id);
        }
        r
    }

    fn cache_turl(&self, token: &str) -> String {
        format!("cache://{}/{token}", self.opts.http_endpoint)
    }

    pub fn srm_get(&self, subject: &Subject, surl: &str, protocols: &[String]) -> Result<TransferRequest> {
        self.srm_get_pinned(subject, surl, protocols, None)
    }

    /// `srm_get`, optionally pinning the staged copy for `pin_lifetime`.
    pub fn srm_get_pinned(
        &self,
        subject: &Subject,
        surl: &str,
        protocols: &[String],
        pin_lifetime: Option<u64>,
    ) -> Result<TransferRequest> {
        check_protocols(protocols)?;
        let surl = Surl::parse(surl)?;
        let dataname = surl.dataname.clone();
        let id = self.create(TransferKind::Get, subject, surl, protocols.to_vec());
        self.advance(&id, TransferState::Staging, |_, _| {})?;
        let expires = self.now().saturating_add(self.opts.turl_lifetime);
        let fetched = self
            .driver
            .fetch_to_cache(&self.ctx(), subject, &dataname, protocols, Some((&id, expires)));
        match fetched {
            Err(e) => Ok(self.fail(&id, &e)),
            Ok(Fetched::Direct {
                turl,
                size,
                digest,
                site_id,
            }) => self.advance(&id, TransferState::Ready, |r, p| {
                r.turl = Some(turl);
                r.size = Some(size);
                r.digest = Some(digest);
                p.origin_site = Some(site_id);
            }),
            Ok(Fetched::Cached { key, size, digest, .. }) => {
                let pin = match pin_lifetime {
                    Some(l) => match self.cache.pin(&key, subject, l) {
                        Ok(p) => Some(p.token),
                        Err(e) => {
                            self.cache.release_hold(&key, &id);
                            return Ok(self.fail(&id, &e));
                        }
                    },
                    None => None,
                };
                let token = self.mint("t");
                self.tokens.lock().insert(
                    token.clone(),
                    TurlToken {
                        request_id: id.clone(),
                        expires,
                        usage: TokenUse::Download { key: key.clone() },
                    },
                );
                let turl = self.cache_turl(&token);
                let origin = self.origins.lock().get(&key).cloned();
                self.advance(&id, TransferState::Ready, |r, p| {
                    r.turl = Some(turl);
                    r.size = Some(size);
                    r.digest = Some(digest);
                    r.pin = pin;
                    p.cache_key = Some(key);
                    p.origin_site = origin;
                })
            }
        }
    }

    /// Opens an upload. The bytes arrive later through the TURL; write
    /// permission is decided when they are committed.
    pub fn srm_put(
        &self,
        subject: &Subject,
        surl: &str,
        protocols: &[String],
        size_hint: u64,
        space_token: Option<&str>,
    ) -> Result<TransferRequest> {
        check_protocols(protocols)?;
        if !protocols.iter().any(|p| p == PROTO_CACHE_HTTP) {
            return Err(GvfError::badreq("uploads need the cache-http protocol"));
        }
        let surl = Surl::parse(surl)?;
        let id = self.create(TransferKind::Put, subject, surl, protocols.to_vec());
        self.advance(&id, TransferState::Staging, |_, _| {})?;
        let now = self.now();
        let (reservation, implicit) = match space_token {
            Some(tok) => {
                let checked = self.cache.reservation(tok).and_then(|r| {
                    if self.cache.reservation_owner(tok).as_ref() != Some(subject) {
                        Err(GvfError::perm("space token belongs to another subject"))
                    } else if r.bytes - r.used_bytes < size_hint {
                        Err(GvfError::nospace(format!(
                            "space token has {} bytes left, upload declares {size_hint}",
                            r.bytes - r.used_bytes
                        )))
                    } else {
                        Ok(())
                    }
                });
                if let Err(e) = checked {
                    return Ok(self.fail(&id, &e));
                }
                (tok.to_string(), false)
            }
            None => match self.cache.reserve(subject, size_hint.max(1), self.opts.turl_lifetime) {
                Ok(r) => (r.token, true),
                Err(e) => return Ok(self.fail(&id, &e)),
            },
        };
        let token = self.mint("u");
        self.tokens.lock().insert(
            token.clone(),
            TurlToken {
                request_id: id.clone(),
                expires: now.saturating_add(self.opts.turl_lifetime),
                usage: TokenUse::Upload {
                    reservation,
                    implicit,
                    size_hint,
                },
            },
        );
        let turl = self.cache_turl(&token);
        self.advance(&id, TransferState::Ready, |r, _| {
            r.turl = Some(turl);
            r.size = Some(size_hint);
        })
    }

    fn token(&self, token: &str) -> Result<(String, u64, bool)> {
        let tokens = self.tokens.lock();
        let t = tokens
            .get(token)
            .ok_or_else(|| GvfError::noent("unknown transfer token"))?;
        Ok((t.request_id.clone(), t.expires, matches!(t.usage, TokenUse::Upload { .. })))
    }

    /// Serves a `cache://` download. E_NOENT: unknown token or evicted copy;
    /// E_PERM: token expired.
    pub fn download(&self, token: &str) -> Result<Vec<u8>> {
        let (id, expires, upload) = self.token(token)?;
        if upload {
            return Err(GvfError::noent("token is an upload token"));
        }
        if self.now() >= expires {
            return Err(GvfError::perm("transfer token expired"));
        }
        let key = match &self.tokens.lock().get(token).map(|t| &t.usage) {
            Some(TokenUse::Download { key }) => key.clone(),
            _ => return Err(GvfError::noent("unknown transfer token")),
        };
        let state = self.status_unchecked(&id)?.state;
        if state == TransferState::Ready {
            // Concurrent downloads of one token race here; only one moves the state.
            let _ = self.advance(&id, TransferState::Active, |_, _| {});
        }
        let data = match self.cache.read(&key) {
            Ok(d) => d,
            Err(e) => {
                if self.status_unchecked(&id)?.state == TransferState::Active {
                    self.fail(&id, &e);
                }
                return Err(e);
            }
        };
        // Only the first read completes the request; later reads of a live TURL are repeats.
        let _ = self.finish_get(&id);
        Ok(data)
    }

    /// Receives the bytes of an upload and commits them as the request's subject.
    pub fn upload(&self, token: &str, data: &[u8]) -> Result<TransferRequest> {
        let (id, expires, upload) = self.token(token)?;
        if !upload {
            return Err(GvfError::noent("token is a download token"));
        }
        if self.now() >= expires {
            return Err(GvfError::perm("transfer token expired"));
        }
        let Some(TurlToken {
            usage:
                TokenUse::Upload {
                    reservation,
                    implicit,
                    size_hint,
                },
            ..
        }) = self.tokens.lock().remove(token)
        else {
            return Err(GvfError::noent("unknown transfer token"));
        };
        let req = self.advance(&id, TransferState::Active, |_, _| {})?;
        let release = || {
            if implicit {
                let _ = self.cache.release(&reservation, &req.subject);
            }
        };
        if data.len() as u64 > size_hint {
            release();
            return Ok(self.fail(
                &id,
                &GvfError::badreq(format!("upload of {} bytes exceeds declared {size_hint}", data.len())),
            ));
        }
        let key = format!("upload#{id}");
        if let Err(e) = self.cache.put_reserved(&key, data, &reservation, &req.subject, &id) {
            release();
            return Ok(self.fail(&id, &e));
        }
        let stored = self
            .driver
            .store_from_cache(&self.ctx(), &key, &req.surl.dataname, &req.subject);
        self.cache.remove(&key);
        release();
        match stored {
            Ok(entry) => self.advance(&id, TransferState::Done, |r, _| {
                r.size = Some(entry.size);
                r.digest = Some(entry.digest);
            }),
            Err(e) => Ok(self.fail(&id, &e)),
        }
    }

    /// Client confirmation that a TURL has been consumed (needed for `vault://`
    /// TURLs, which bypass the gateway).
    pub fn srm_done(&self, subject: &Subject, request_id: &str) -> Result<TransferRequest> {
        let req = self.srm_status(subject, request_id)?;
        if req.kind != TransferKind::Get {
            return Err(GvfError::badreq("uploads finish when their bytes arrive"));
        }
        if req.state == TransferState::Ready {
            self.advance(request_id, TransferState::Active, |_, _| {})?;
        }
        self.finish_get(request_id)
    }

    /// Completes a get and credits its bytes to the site they came from.
    fn finish_get(&self, id: &str) -> Result<TransferRequest> {
        let (mut key, mut site) = (None, None);
        let r = self.advance(id, TransferState::Done, |_, p| {
            key = p.cache_key.clone();
            site = p.origin_site.clone();
        })?;
        let size = r.size.unwrap_or(0);
        {
            let mut m = self.metrics.lock();
            m.bytes_delivered += size;
            if let Some(s) = site {
                *m.bytes_served_by_site.entry(s).or_default() += size;
            }
        }
        if let Some(k) = key {
            self.cache.release_hold(&k, id);
        }
        self.flush_metrics();
        Ok(r)
    }

    fn status_unchecked(&self, id: &str) -> Result<TransferRequest> {
        self.requests
            .lock()
            .get(id)
            .map(|(r, _)| r.clone())
            .ok_or_else(|| GvfError::noent(format!("no request {id}")))
    }

    pub fn srm_status(&self, subject: &Subject, id: &str) -> Result<TransferRequest> {
        let r = self.status_unchecked(id)?;
        if &r.subject != subject && !self.auth.is_service(subject) {
            return Err(GvfError::perm(format!("request {id} belongs to another subject")));
        }
        Ok(r)
    }

    /// Stages (if needed) and pins. Pinning always means a cache copy, whatever the driver.
    pub fn srm_pin(&self, subject: &Subject, surl: &str, lifetime: u64) -> Result<PinToken> {
        if lifetime == 0 {
            return Err(GvfError::badreq("pin lifetime must be positive"));
        }
        let surl = Surl::parse(surl)?;
        let holder = self.mint("pin");
        let now = self.now();
        let fetched = self.driver.fetch_to_cache(
            &self.ctx(),
            subject,
            &surl.dataname,
            &[PROTO_CACHE_HTTP.to_string()],
            Some((&holder, now.saturating_add(1))),
        )?;
        let Fetched::Cached { key, .. } = fetched else {
            return Err(GvfError::unavail("driver did not stage for a pin"));
        };
        let pin = self.cache.pin(&key, subject, lifetime);
        self.cache.release_hold(&key, &holder);
        pin
    }

    pub fn srm_unpin(&self, subject: &Subject, token: &str) -> Result<()> {
        self.cache.unpin(token, subject)
    }

    pub fn srm_reserve(&self, subject: &Subject, bytes: u64, lifetime: u64) -> Result<Reservation> {
        self.cache.reserve(subject, bytes, lifetime)
    }

    pub fn srm_release(&self, subject: &Subject, token: &str) -> Result<()> {
        self.cache.release(token, subject)
    }

    pub fn srm_ls(&self, subject: &Subject, prefix: &str) -> Result<Vec<ListingItem>> {
        self.driver.list(subject, &listing_prefix(prefix)?)
    }

    pub fn metrics(&self) -> Metrics {
        let mut m = self.metrics.lock().clone();
        let s = self.cache.stats();
        m.cache_hits = s.hits;
        m.cache_misses = s.misses;
        m.evictions = s.evictions;
        for (r, _) in self.requests.lock().values() {
            let label = match (r.state, r.error) {
                (TransferState::Failed, Some(e)) => format!("failed:{}", e.as_str()),
                (st, _) => st.as_str().to_string(),
            };
            *m.requests_by_outcome.entry(label).or_default() += 1;
        }
        m
    }

    pub fn flush_metrics(&self) {
        if let Some(p) = &self.opts.metrics_path {
            let m = self.metrics();
            let tmp = p.with_extension("tmp");
            let written = serde_json::to_vec_pretty(&m)
                .map_err(std::io::Error::from)
                .and_then(|b| std::fs::write(&tmp, b))
                .and_then(|_| std::fs::rename(&tmp, p));
            if let Err(e) = written {
                log::warn!("writing metrics to {}: {e}", p.display());
            }
        }
    }

    pub fn transitions(&self) -> Vec<Transition> {
        self.transitions.lock().clone()
    }

    pub fn requests(&self) -> Vec<TransferRequest> {
        self.requests.lock().values().map(|(r, _)| r.clone()).collect()
    }

    pub fn site_id(&self) -> &str {
        &self.opts.site_id
    }

    pub fn endpoint(&self) -> &str {
        &self.opts.endpoint
    }
}

/// Serves `srm.*` and `clock.*`.
pub struct GatewayHandler {
    gw: Arc<Gateway>,
}

impl GatewayHandler {
    pub fn new(gw: Arc<Gateway>) -> Self {
        GatewayHandler { gw }
    }

    fn dispatch(&self, req: &Request) -> Result<serde_json::Value> {
        #[derive(Deserialize)]
        struct Args {
            #[serde(default)]
            surl: Option<String>,
            #[serde(default)]
            protocols: Vec<String>,
            #[serde(default)]
            size_hint: Option<u64>,
            #[serde(default)]
            space_token: Option<String>,
            #[serde(default)]
            lifetime: Option<u64>,
            #[serde(default)]
            pin_lifetime: Option<u64>,
            #[serde(default)]
            token: Option<String>,
            #[serde(default)]
            bytes: Option<u64>,
            #[serde(default)]
            request_id: Option<String>,
            #[serde(default)]
            prefix: Option<String>,
            #[serde(default)]
            secs: Option<u64>,
        }
        fn v<T: Serialize>(x: T) -> Result<serde_json::Value> {
            Ok(serde_json::to_value(x)?)
        }
        let gw = &self.gw;
        let subject = gw.auth.verify_opt(req.auth.as_ref())?;
        let a: Args = req.parse_args()?;
        let need = |o: &Option<String>, f: &str| o.clone().ok_or_else(|| GvfError::badreq(format!("{f} required")));
        let lifetime = || a.lifetime.ok_or_else(|| GvfError::badreq("lifetime required"));
        match req.op.as_str() {
            "srm.get" => v(gw.srm_get_pinned(&subject, &need(&a.surl, "surl")?, &a.protocols, a.pin_lifetime)?),
            "srm.put" => v(gw.srm_put(
                &subject,
                &need(&a.surl, "surl")?,
                &a.protocols,
                a.size_hint.unwrap_or(0),
                a.space_token.as_deref(),
            )?),
            "srm.pin" => v(gw.srm_pin(&subject, &need(&a.surl, "surl")?, lifetime()?)?),
            "srm.unpin" => v(gw.srm_unpin(&subject, &need(&a.token, "token")?)?),
            "srm.reserve" => v(gw.srm_reserve(
                &subject,
                a.bytes.ok_or_else(|| GvfError::badreq("bytes required"))?,
                lifetime()?,
            )?),
            "srm.release" => v(gw.srm_release(&subject, &need(&a.token, "token")?)?),
            "srm.status" => v(gw.srm_status(&subject, &need(&a.request_id, "request_id")?)?),
            "srm.done" => v(gw.srm_done(&subject, &need(&a.request_id, "request_id")?)?),
            "srm.ls" => v(gw.srm_ls(&subject, a.prefix.as_deref().unwrap_or("/"))?),
            "srm.metrics" => v(gw.metrics()),
            "clock.now" => Ok(json!({"now": gw.now()})),
            "clock.advance" => {
                if !gw.auth.is_service(&subject) {
                    return Err(GvfError::perm("only the federation service may move the clock"));
                }
                let now = gw.cache.clock().advance(a.secs.unwrap_or(0))?;
                Ok(json!({"now": now}))
            }
            other => Err(GvfError::badreq(format!("unknown op {other}"))),
        }
    }
}

impl Handler for GatewayHandler {
    fn handle(&self, req: Request, _conn: &ConnInfo) -> Reply {
        Reply::from_result(self.dispatch(&req))
    }
}
