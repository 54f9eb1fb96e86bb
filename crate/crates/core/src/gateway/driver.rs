//! The boundary between the SRM interface and the storage back end, its two
//! implementations, and a wire binding so a driver can run out of process.

use super::cache::DiskCache;
use super::Metrics;
use crate::auth::Authenticator;
use crate::broker::{replica_order, BrokerClient, GetOutcome, ListingItem};
use crate::config::DriverKind;
use crate::digest::sha256_hex;
use crate::error::{GvfError, Result};
use crate::mcat::{CatalogEntry, DataName, Perm, Subject};
use crate::wire::{Client, ConnInfo, Credential, Handler, Reply, Request};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::collections::BTreeMap;
use std::sync::Arc;

pub const PROTO_CACHE_HTTP: &str = "cache-http";
pub const PROTO_VAULT_STREAM: &str = "vault-stream";
pub const KNOWN_PROTOCOLS: [&str; 2] = [PROTO_CACHE_HTTP, PROTO_VAULT_STREAM];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "plan", rename_all = "snake_case")]
pub enum FetchPlan {
    Stage,
    Direct { turl: String, vault_id: String, site_id: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Fetched {
    Cached { key: String, size: u64, digest: String, hit: bool },
    Direct { turl: String, size: u64, digest: String, site_id: String },
}

/// What a driver may touch on the gateway side.
pub struct StagingContext<'a> {
    pub cache: &'a DiskCache,
    pub metrics: &'a Mutex<Metrics>,
    /// Cache key → site of the vault the copy was read from.
    pub origins: &'a Mutex<BTreeMap<String, String>>,
}

pub fn cache_key(dataname: &DataName, digest: &str) -> String {
    format!("{dataname}#{digest}")
}

/// The gateway core reaches storage only through this trait. Each call acts
/// as `subject`; the back end applies that subject's catalog permissions.
pub trait DriverBoundary: Send + Sync {
    fn kind(&self) -> DriverKind;
    fn stat(&self, subject: &Subject, dataname: &DataName) -> Result<CatalogEntry>;
    fn check(&self, subject: &Subject, dataname: &DataName, mode: Perm) -> Result<bool>;
    fn plan_fetch(&self, subject: &Subject, entry: &CatalogEntry, protocols: &[String]) -> Result<FetchPlan>;
    fn read_content(&self, subject: &Subject, dataname: &DataName) -> Result<(GetOutcome, Vec<u8>)>;
    fn store_content(&self, subject: &Subject, dataname: &DataName, data: &[u8]) -> Result<CatalogEntry>;
    fn list(&self, subject: &Subject, prefix: &str) -> Result<Vec<ListingItem>>;

    /// Resolves a read: either a direct TURL, or a cache entry (copied in on a
    /// miss). Permission is checked on every call, hit or miss.
    fn fetch_to_cache(
        &self,
        ctx: &StagingContext<'_>,
        subject: &Subject,
        dataname: &DataName,
        protocols: &[String],
        hold: Option<(&str, u64)>,
    ) -> Result<Fetched> {
        let entry = self.stat(subject, dataname)?;
        if let FetchPlan::Direct { turl, site_id, .. } = self.plan_fetch(subject, &entry, protocols)? {
            return Ok(Fetched::Direct {
                turl,
                size: entry.size,
                digest: entry.digest,
                site_id,
            });
        }
        let key = cache_key(dataname, &entry.digest);
        let acq = ctx.cache.get_or_fill(&key.clone(), entry.size, hold, || {
            let (out, data) = self.read_content(subject, dataname)?;
            if out.digest != entry.digest || sha256_hex(&data) != entry.digest {
                return Err(GvfError::unavail(format!("{dataname} changed while staging")));
            }
            let mut m = ctx.metrics.lock();
            m.staging_copies += 1;
            m.bytes_copied += data.len() as u64;
            ctx.origins.lock().insert(key.clone(), out.site_id);
            Ok(data)
        })?;
        Ok(Fetched::Cached {
            key,
            size: entry.size,
            digest: entry.digest,
            hit: acq.hit,
        })
    }

    /// Commits an uploaded cache entry into the back end as `subject`.
    fn store_from_cache(
        &self,
        ctx: &StagingContext<'_>,
        key: &str,
        dataname: &DataName,
        subject: &Subject,
    ) -> Result<CatalogEntry> {
        let data = ctx.cache.read(key)?;
        self.store_content(subject, dataname, &data)
    }
}

/// Talks to a broker site, minting per-subject credentials with the
/// deployment secret.
#[derive(Clone)]
pub struct BrokerBackend {
    client: Arc<BrokerClient>,
    auth: Authenticator,
}

impl BrokerBackend {
    pub fn new(broker_addr: &str, auth: Authenticator) -> Self {
        BrokerBackend {
            client: Arc::new(BrokerClient::new(broker_addr, auth.service_credential())),
            auth,
        }
    }

    fn as_subject(&self, s: &Subject) -> BrokerClient {
        self.client.with_credential(self.auth.credential_for(s.as_str()))
    }

    fn stat(&self, s: &Subject, d: &DataName) -> Result<CatalogEntry> {
        self.as_subject(s).stat(d.as_str())
    }
    fn check(&self, s: &Subject, d: &DataName, m: Perm) -> Result<bool> {
        self.as_subject(s).check(d.as_str(), m)
    }
    fn read(&self, s: &Subject, d: &DataName) -> Result<(GetOutcome, Vec<u8>)> {
        self.as_subject(s).get(d.as_str())
    }
    fn store(&self, s: &Subject, d: &DataName, data: &[u8]) -> Result<CatalogEntry> {
        self.as_subject(s).put(d.as_str(), data)
    }
    fn list(&self, s: &Subject, prefix: &str) -> Result<Vec<ListingItem>> {
        self.as_subject(s).ls(prefix)
    }
}

/// Always copies through the cache, whatever the protocol and wherever the
/// replicas live.
pub struct StagedDriver {
    backend: BrokerBackend,
}

impl StagedDriver {
    pub fn new(backend: BrokerBackend) -> Self {
        StagedDriver { backend }
    }
}

impl DriverBoundary for StagedDriver {
    fn kind(&self) -> DriverKind {
        DriverKind::Staged
    }
    fn stat(&self, s: &Subject, d: &DataName) -> Result<CatalogEntry> {
        self.backend.stat(s, d)
    }
    fn check(&self, s: &Subject, d: &DataName, m: Perm) -> Result<bool> {
        self.backend.check(s, d, m)
    }
    fn plan_fetch(&self, _: &Subject, _: &CatalogEntry, _: &[String]) -> Result<FetchPlan> {
        Ok(FetchPlan::Stage)
    }
    fn read_content(&self, s: &Subject, d: &DataName) -> Result<(GetOutcome, Vec<u8>)> {
        self.backend.read(s, d)
    }
    fn store_content(&self, s: &Subject, d: &DataName, data: &[u8]) -> Result<CatalogEntry> {
        self.backend.store(s, d, data)
    }
    fn list(&self, s: &Subject, p: &str) -> Result<Vec<ListingItem>> {
        self.backend.list(s, p)
    }
}

/// Hands out the replica itself when the client can speak `vault-stream`.
pub struct DirectDriver {
    backend: BrokerBackend,
    vault_addrs: BTreeMap<String, String>,
    site_id: String,
    master_site_id: String,
}

impl DirectDriver {
    pub fn new(backend: BrokerBackend, vault_addrs: BTreeMap<String, String>, site_id: &str, master_site_id: &str) -> Self {
        DirectDriver {
            backend,
            vault_addrs,
            site_id: site_id.to_string(),
            master_site_id: master_site_id.to_string(),
        }
    }
}

impl DriverBoundary for DirectDriver {
    fn kind(&self) -> DriverKind {
        DriverKind::Direct
    }
    fn stat(&self, s: &Subject, d: &DataName) -> Result<CatalogEntry> {
        self.backend.stat(s, d)
    }
    fn check(&self, s: &Subject, d: &DataName, m: Perm) -> Result<bool> {
        self.backend.check(s, d, m)
    }
    fn plan_fetch(&self, _: &Subject, entry: &CatalogEntry, protocols: &[String]) -> Result<FetchPlan> {
        if !protocols.iter().any(|p| p == PROTO_VAULT_STREAM) {
            return Ok(FetchPlan::Stage);
        }
        let r = replica_order(entry, &self.site_id, &self.master_site_id)
            .into_iter()
            .find(|r| self.vault_addrs.contains_key(&r.vault_id))
            .ok_or_else(|| GvfError::unavail(format!("{} has no reachable online replica", entry.dataname)))?;
        Ok(FetchPlan::Direct {
            turl: format!("vault://{}/{}", self.vault_addrs[&r.vault_id], r.blob_id),
            vault_id: r.vault_id.clone(),
            site_id: r.site_id.clone(),
        })
    }
    fn read_content(&self, s: &Subject, d: &DataName) -> Result<(GetOutcome, Vec<u8>)> {
        self.backend.read(s, d)
    }
    fn store_content(&self, s: &Subject, d: &DataName, data: &[u8]) -> Result<CatalogEntry> {
        self.backend.store(s, d, data)
    }
    fn list(&self, s: &Subject, p: &str) -> Result<Vec<ListingItem>> {
        self.backend.list(s, p)
    }
}

/// A driver living in another process, reached over `drv.*`.
pub struct RemoteDriver {
    client: Client,
    cred: Credential,
    kind: DriverKind,
}

impl RemoteDriver {
    /// Asks the far side which driver it runs.
    pub fn connect(addr: &str, service: Credential) -> Result<RemoteDriver> {
        let client = Client::new(addr);
        let kind: DriverKind = client.call_typed("drv.kind", Some(&service), json!({}))?;
        Ok(RemoteDriver {
            client,
            cred: service,
            kind,
        })
    }

    fn call<T: serde::de::DeserializeOwned>(&self, op: &str, args: serde_json::Value) -> Result<T> {
        self.client.call_typed(op, Some(&self.cred), args)
    }
}

impl DriverBoundary for RemoteDriver {
    fn kind(&self) -> DriverKind {
        self.kind
    }
    fn stat(&self, s: &Subject, d: &DataName) -> Result<CatalogEntry> {
        self.call("drv.stat", json!({"subject": s, "dataname": d}))
    }
    fn check(&self, s: &Subject, d: &DataName, m: Perm) -> Result<bool> {
        self.call("drv.check", json!({"subject": s, "dataname": d, "mode": m}))
    }
    fn plan_fetch(&self, s: &Subject, e: &CatalogEntry, protocols: &[String]) -> Result<FetchPlan> {
        self.call("drv.plan", json!({"subject": s, "entry": e, "protocols": protocols}))
    }
    fn read_content(&self, s: &Subject, d: &DataName) -> Result<(GetOutcome, Vec<u8>)> {
        let (v, body) = self
            .client
            .call("drv.read", Some(&self.cred), json!({"subject": s, "dataname": d}), None)?;
        Ok((
            serde_json::from_value(v)?,
            body.ok_or_else(|| GvfError::unavail("drv.read returned no body"))?,
        ))
    }
    fn store_content(&self, s: &Subject, d: &DataName, data: &[u8]) -> Result<CatalogEntry> {
        let (v, _) = self.client.call(
            "drv.store",
            Some(&self.cred),
            json!({"subject": s, "dataname": d}),
            Some(data),
        )?;
        Ok(serde_json::from_value(v)?)
    }
    fn list(&self, s: &Subject, p: &str) -> Result<Vec<ListingItem>> {
        self.call("drv.list", json!({"subject": s, "prefix": p}))
    }
}

/// Serves a local driver as `drv.*`. Only the federation service identity
/// (the gateway) may call it, since every op names the subject to act as.
pub struct DriverHandler {
    driver: Arc<dyn DriverBoundary>,
    auth: Authenticator,
}

impl DriverHandler {
    pub fn new(driver: Arc<dyn DriverBoundary>, auth: Authenticator) -> Self {
        DriverHandler { driver, auth }
    }

    fn dispatch(&self, req: &mut Request) -> Result<Reply> {
        #[derive(Deserialize)]
        struct Args {
            #[serde(default)]
            subject: Option<Subject>,
            #[serde(default)]
            dataname: Option<DataName>,
            #[serde(default)]
            mode: Option<Perm>,
            #[serde(default)]
            entry: Option<CatalogEntry>,
            #[serde(default)]
            protocols: Vec<String>,
            #[serde(default)]
            prefix: Option<String>,
        }
        self.auth.require_service(req.auth.as_ref())?;
        let a: Args = req.parse_args()?;
        let missing = |f: &str| GvfError::badreq(format!("{f} required"));
        let d = self.driver.as_ref();
        if req.op == "drv.kind" {
            return Ok(Reply::ok(d.kind()));
        }
        let s = a.subject.clone().ok_or_else(|| missing("subject"))?;
        let name = || a.dataname.clone().ok_or_else(|| missing("dataname"));
        Ok(match req.op.as_str() {
            "drv.stat" => Reply::ok(d.stat(&s, &name()?)?),
            "drv.check" => Reply::ok(d.check(&s, &name()?, a.mode.ok_or_else(|| missing("mode"))?)?),
            "drv.plan" => {
                let e = a.entry.as_ref().ok_or_else(|| missing("entry"))?;
                Reply::ok(d.plan_fetch(&s, e, &a.protocols)?)
            }
            "drv.read" => {
                let (out, data) = d.read_content(&s, &name()?)?;
                Reply::with_body(out, data)
            }
            "drv.store" => {
                let body = req.take_body()?;
                Reply::ok(d.store_content(&s, &name()?, &body)?)
            }
            "drv.list" => Reply::ok(d.list(&s, a.prefix.as_deref().unwrap_or("/"))?),
            other => return Err(GvfError::badreq(format!("unknown op {other}"))),
        })
    }
}

impl Handler for DriverHandler {
    fn handle(&self, mut req: Request, _conn: &ConnInfo) -> Reply {
        self.dispatch(&mut req).unwrap_or_else(Reply::err)
    }
}
