//! Broker daemons: one per site. The master site owns the catalog; server sites
//! reach it only through the master. Clients authenticate with a subject and
//! proof token, and every data operation is decided by that subject alone.

use crate::auth::Authenticator;
use crate::digest::sha256_hex;
use crate::error::{ErrorCode, GvfError, Result};
use crate::mcat::{CatalogEntry, CatalogService, DataName, Grants, Orphan, Perm, Replica, Subject};
use crate::vault::BlobService;
use crate::wire::{Client, ConnInfo, Credential, Handler, Reply, Request};
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

/// A vault as seen by a broker.
#[derive(Clone)]
pub struct VaultRef {
    pub vault_id: String,
    pub site_id: String,
    pub service: Arc<dyn BlobService>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub subject: Subject,
    pub authenticated: bool,
    pub local_user: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GetOutcome {
    pub size: u64,
    pub digest: String,
    pub vault_id: String,
    pub site_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RmOutcome {
    pub blobs_deleted: usize,
    pub orphans: Vec<Orphan>,
}

/// One `ls` row: catalog facts plus what the asking subject may do.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ListingItem {
    pub dataname: DataName,
    pub size: u64,
    pub digest: String,
    pub owner: Subject,
    pub online_sites: Vec<String>,
    pub readable: bool,
    pub writable: bool,
    pub deletable: bool,
}

pub struct BrokerOptions {
    pub site_id: String,
    pub master_site_id: String,
    pub local_vaults: Vec<String>,
    pub auto_map: bool,
    /// How long a put/rm waits for a contended name lock.
    pub lock_wait: Duration,
}

pub struct Broker {
    opts: BrokerOptions,
    auth: Authenticator,
    catalog: Arc<dyn CatalogService>,
    vaults: BTreeMap<String, VaultRef>,
    users: RwLock<HashMap<Subject, String>>,
    holder: String,
    next_op: AtomicU64,
}

/// Derives a local account name from a subject such as `/O=Grid/CN=Alice Smith`.
pub fn derive_local_name(subject: &Subject) -> String {
    let s = subject.as_str();
    let cn = s.rfind("CN=").map(|i| &s[i + 3..]).unwrap_or(s);
    let cn = cn.split(['/', ',']).next().unwrap_or(cn);
    let mut name: String = cn
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-') { c.to_ascii_lowercase() } else { '_' })
        .take(64)
        .collect();
    if name.is_empty() || name == "." || name == ".." {
        name = format!("u{:x}", crate::digest::fnv1a_128(s.as_bytes()) as u32);
    }
    name
}

/// Deterministic replica preference: the requester's site, then the master
/// site, then lowest vault id. Dead replicas are never chosen.
pub fn replica_order<'a>(entry: &'a CatalogEntry, requester_site: &str, master_site: &str) -> Vec<&'a Replica> {
    let mut online: Vec<&Replica> = entry.online_replicas().collect();
    online.sort_by(|a, b| {
        let key = |r: &Replica| (r.site_id != requester_site, r.site_id != master_site, r.vault_id.clone());
        key(a).cmp(&key(b))
    });
    online
}

pub fn replica_select(entry: &CatalogEntry, requester_site: &str, master_site: &str) -> Result<Replica> {
    replica_order(entry, requester_site, master_site)
        .first()
        .map(|r| (*r).clone())
        .ok_or_else(|| GvfError::unavail(format!("{} has no online replica", entry.dataname)))
}

struct LockGuard<'a> {
    catalog: &'a dyn CatalogService,
    key: String,
    holder: String,
}

impl Drop for LockGuard<'_> {
    fn drop(&mut self) {
        if let Err(e) = self.catalog.unlock(&self.key, &self.holder) {
            log::warn!("releasing lock {}: {e}", self.key);
        }
    }
}

impl Broker {
    pub fn new(
        opts: BrokerOptions,
        auth: Authenticator,
        catalog: Arc<dyn CatalogService>,
        vaults: Vec<VaultRef>,
    ) -> Broker {
        let holder = format!("{}:{:016x}", opts.site_id, rand::random::<u64>());
        Broker {
            opts,
            auth,
            catalog,
            vaults: vaults.into_iter().map(|v| (v.vault_id.clone(), v)).collect(),
            users: RwLock::new(HashMap::new()),
            holder,
            next_op: AtomicU64::new(0),
        }
    }

    pub fn site_id(&self) -> &str {
        &self.opts.site_id
    }

    pub fn master_site_id(&self) -> &str {
        &self.opts.master_site_id
    }

    pub fn catalog(&self) -> &Arc<dyn CatalogService> {
        &self.catalog
    }

    pub fn vault(&self, id: &str) -> Option<&VaultRef> {
        self.vaults.get(id)
    }

    /// Verifies a credential and binds it to a local user through the subject map.
    /// The transport peer plays no part in the result.
    pub fn authenticate(&self, cred: &Credential) -> Result<Session> {
        let subject = self.auth.verify(cred)?;
        if self.auth.is_service(&subject) {
            return Ok(Session {
                subject,
                authenticated: true,
                local_user: "gvf-service".into(),
            });
        }
        if let Some(local) = self.users.read().get(&subject) {
            return Ok(Session {
                subject: subject.clone(),
                authenticated: true,
                local_user: local.clone(),
            });
        }
        let local = match self.catalog.resolve_user(&subject)? {
            Some(l) => l,
            None if self.opts.auto_map => {
                let base = derive_local_name(&subject);
                let mut candidate = base.clone();
                let mut n = 1;
                loop {
                    match self.catalog.add_user(&subject, &candidate) {
                        Ok(()) => break candidate,
                        Err(e) if e.code == ErrorCode::Exists => {
                            // Someone else may have mapped this very subject concurrently.
                            if let Some(l) = self.catalog.resolve_user(&subject)? {
                                break l;
                            }
                            n += 1;
                            candidate = format!("{base}{n}");
                        }
                        Err(e) => return Err(e),
                    }
                }
            }
            None => return Err(GvfError::badreq(format!("{subject} is not in the subject map"))),
        };
        self.users.write().insert(subject.clone(), local.clone());
        Ok(Session {
            subject,
            authenticated: true,
            local_user: local,
        })
    }

    fn require(session: &Session) -> Result<()> {
        if session.authenticated {
            Ok(())
        } else {
            Err(GvfError::perm("session is not authenticated"))
        }
    }

    fn lock(&self, key: String) -> Result<LockGuard<'_>> {
        // Holders are per operation: two requests on one broker must exclude each other.
        let holder = format!("{}#{}", self.holder, self.next_op.fetch_add(1, Ordering::Relaxed));
        let deadline = Instant::now() + self.opts.lock_wait;
        let mut pause = Duration::from_millis(2);
        loop {
            if self.catalog.try_lock(&key, &holder)? {
                return Ok(LockGuard {
                    catalog: self.catalog.as_ref(),
                    key,
                    holder,
                });
            }
            if Instant::now() >= deadline {
                return Err(GvfError::unavail(format!("timed out waiting for lock {key}")));
            }
            std::thread::sleep(pause);
            pause = (pause * 2).min(Duration::from_millis(100));
        }
    }

    fn name_key(d: &DataName) -> String {
        format!("name:{d}")
    }

    fn blob_key(vault: &str, blob: &str) -> String {
        format!("blob:{vault}:{blob}")
    }

    fn vault_ref(&self, id: &str) -> Result<&VaultRef> {
        self.vaults
            .get(id)
            .ok_or_else(|| GvfError::badreq(format!("unknown vault {id}")))
    }

    fn lookup_opt(&self, d: &DataName) -> Result<Option<CatalogEntry>> {
        match self.catalog.lookup(d) {
            Ok(e) => Ok(Some(e)),
            Err(e) if e.code == ErrorCode::NoEnt => Ok(None),
            Err(e) => Err(e),
        }
    }

    /// Deletes a blob unless some live entry other than `excluding` still uses it.
    fn release_blob(&self, vault_id: &str, blob_id: &str, excluding: Option<&DataName>) -> Result<bool> {
        let _g = self.lock(Self::blob_key(vault_id, blob_id))?;
        if self.catalog.blob_in_use(vault_id, blob_id, excluding)? {
            return Ok(false);
        }
        self.vault_ref(vault_id)?.service.delete_blob(blob_id)?;
        Ok(true)
    }

    /// Stores `data` under `dataname` on a vault at this site and records it in the
    /// catalog. New names must sit under the caller's own home; existing names need
    /// write access. On failure nothing stays behind.
    pub fn put(&self, session: &Session, dataname: &DataName, data: &[u8]) -> Result<CatalogEntry> {
        Self::require(session)?;
        let _name = self.lock(Self::name_key(dataname))?;
        let existing = self.lookup_opt(dataname)?;
        match &existing {
            Some(e) if !e.acl.allows(&session.subject, Perm::Write) => {
                return Err(GvfError::perm(format!("{} may not write {dataname}", session.subject)))
            }
            None if dataname.owner_segment() != session.local_user => {
                return Err(GvfError::perm(format!(
                    "{} ({}) may not create files under /home/{}",
                    session.subject,
                    session.local_user,
                    dataname.owner_segment()
                )))
            }
            _ => {}
        }
        let digest = sha256_hex(data);
        let size = data.len() as u64;

        let mut last_err = GvfError::nospace(format!("site {} has no vault", self.opts.site_id));
        for vault_id in &self.opts.local_vaults {
            let vault = self.vault_ref(vault_id)?;
            let _blob = self.lock(Self::blob_key(vault_id, &digest))?;
            let written = match vault.service.write_blob(data, &digest) {
                Ok(w) => w,
                Err(e) if matches!(e.code, ErrorCode::NoSpace | ErrorCode::Unavail) => {
                    last_err = e;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let replica = Replica::online(vault_id, &digest, &vault.site_id);
            let recorded = match &existing {
                None => self.catalog.register(&session.subject, dataname, size, &digest, replica),
                Some(_) => self
                    .catalog
                    .update_content(&session.subject, dataname, size, &digest, replica),
            };
            return match recorded {
                Ok(entry) => {
                    drop(_blob);
                    if let Some(old) = existing.as_ref().and_then(|e| e.replica_on(vault_id)) {
                        if old.blob_id != digest {
                            if let Err(e) = self.release_blob(vault_id, &old.blob_id, None) {
                                log::warn!("overwrite left stale blob {} on {vault_id}: {e}", old.blob_id);
                            }
                        }
                    }
                    Ok(entry)
                }
                Err(e) => {
                    // An unavailable catalog may still have applied the record;
                    // a leaked blob is safer than a dangling replica.
                    if !written.already_present && e.code != ErrorCode::Unavail {
                        if let Err(re) = vault.service.delete_blob(&digest) {
                            log::error!("rollback of {digest} on {vault_id} failed: {re}");
                        }
                    }
                    Err(e)
                }
            };
        }
        Err(last_err)
    }

    /// Reads a file from the best reachable online replica. Delivered bytes are
    /// verified against the catalog digest.
    pub fn get(&self, session: &Session, dataname: &DataName) -> Result<(GetOutcome, Vec<u8>)> {
        Self::require(session)?;
        let entry = self.catalog.lookup(dataname)?;
        if !entry.acl.allows(&session.subject, Perm::Read) {
            return Err(GvfError::perm(format!("{} may not read {dataname}", session.subject)));
        }
        self.read_entry(&entry, None)
    }

    fn read_entry(&self, entry: &CatalogEntry, skip_vault: Option<&str>) -> Result<(GetOutcome, Vec<u8>)> {
        let mut last = GvfError::unavail(format!("{} has no online replica", entry.dataname));
        for r in replica_order(entry, &self.opts.site_id, &self.opts.master_site_id) {
            if Some(r.vault_id.as_str()) == skip_vault {
                continue;
            }
            let Some(vault) = self.vaults.get(&r.vault_id) else {
                continue;
            };
            match vault.service.read_blob(&r.blob_id, None) {
                Ok(data) if sha256_hex(&data) == entry.digest => {
                    return Ok((
                        GetOutcome {
                            size: data.len() as u64,
                            digest: entry.digest.clone(),
                            vault_id: r.vault_id.clone(),
                            site_id: r.site_id.clone(),
                        },
                        data,
                    ))
                }
                Ok(_) => {
                    log::error!("replica of {} on {} fails digest check", entry.dataname, r.vault_id);
                    last = GvfError::unavail(format!("replica on {} is corrupt", r.vault_id));
                }
                Err(e) => {
                    log::warn!("replica of {} on {} unreadable: {e}", entry.dataname, r.vault_id);
                    last = GvfError::unavail(format!("replica on {}: {e}", r.vault_id));
                }
            }
        }
        Err(last)
    }

    pub fn replicate(&self, session: &Session, dataname: &DataName, target_vault: &str) -> Result<CatalogEntry> {
        Self::require(session)?;
        let target = self.vault_ref(target_vault)?.clone();
        let _name = self.lock(Self::name_key(dataname))?;
        let entry = self.catalog.lookup(dataname)?;
        if !entry.acl.allows(&session.subject, Perm::Read) {
            return Err(GvfError::perm(format!("{} may not read {dataname}", session.subject)));
        }
        let stale = match entry.replica_on(target_vault) {
            Some(r) if r.is_online() => {
                return Err(GvfError::exists(format!("{dataname} already has a replica on {target_vault}")))
            }
            Some(r) => Some(r.blob_id.clone()),
            None => None,
        };
        let (_, data) = self.read_entry(&entry, Some(target_vault))?;
        let _blob = self.lock(Self::blob_key(target_vault, &entry.digest))?;
        let written = target.service.write_blob(&data, &entry.digest)?;
        let added = self
            .catalog
            .add_replica(dataname, Replica::online(target_vault, &entry.digest, &target.site_id));
        match added {
            Ok(e) => {
                drop(_blob);
                if let Some(old) = stale.filter(|b| *b != entry.digest) {
                    if let Err(err) = self.release_blob(target_vault, &old, None) {
                        log::warn!("stale blob {old} left on {target_vault}: {err}");
                    }
                }
                Ok(e)
            }
            Err(e) => {
                if !written.already_present && e.code != ErrorCode::Unavail {
                    let _ = target.service.delete_blob(&entry.digest);
                }
                Err(e)
            }
        }
    }

    /// Removes every replica blob (best effort) and then the catalog entry.
    /// Blobs that cannot be removed are recorded in the catalog's orphan log.
    pub fn rm(&self, session: &Session, dataname: &DataName) -> Result<RmOutcome> {
        Self::require(session)?;
        let _name = self.lock(Self::name_key(dataname))?;
        let entry = self.catalog.lookup(dataname)?;
        if !entry.acl.allows(&session.subject, Perm::Delete) {
            return Err(GvfError::perm(format!("{} may not delete {dataname}", session.subject)));
        }
        let mut out = RmOutcome {
            blobs_deleted: 0,
            orphans: Vec::new(),
        };
        for r in &entry.replicas {
            match self.release_blob(&r.vault_id, &r.blob_id, Some(dataname)) {
                Ok(true) => out.blobs_deleted += 1,
                Ok(false) => {}
                Err(e) => out.orphans.push(Orphan {
                    vault_id: r.vault_id.clone(),
                    blob_id: r.blob_id.clone(),
                    dataname: dataname.clone(),
                    reason: e.to_string(),
                }),
            }
        }
        for o in &out.orphans {
            self.catalog.record_orphan(o.clone())?;
        }
        self.catalog.delete(&session.subject, dataname)?;
        Ok(out)
    }

    /// Catalog entry for a file the session may read.
    pub fn stat(&self, session: &Session, dataname: &DataName) -> Result<CatalogEntry> {
        Self::require(session)?;
        let entry = self.catalog.lookup(dataname)?;
        if !entry.acl.allows(&session.subject, Perm::Read) {
            return Err(GvfError::perm(format!("{} may not read {dataname}", session.subject)));
        }
        Ok(entry)
    }

    pub fn check(&self, session: &Session, dataname: &DataName, mode: Perm) -> Result<bool> {
        Self::require(session)?;
        self.catalog.check_access(&session.subject, dataname, mode)
    }

    pub fn set_acl(&self, session: &Session, dataname: &DataName, grants: Grants) -> Result<CatalogEntry> {
        Self::require(session)?;
        self.catalog.set_acl(&session.subject, dataname, grants)
    }

    pub fn ls(&self, session: &Session, prefix: &str) -> Result<Vec<ListingItem>> {
        Self::require(session)?;
        Ok(self
            .catalog
            .list(prefix)?
            .into_iter()
            .map(|e| {
                let can = |m| e.acl.allows(&session.subject, m);
                ListingItem {
                    readable: can(Perm::Read),
                    writable: can(Perm::Write),
                    deletable: can(Perm::Delete),
                    online_sites: e.online_replicas().map(|r| r.site_id.clone()).collect(),
                    dataname: e.dataname.clone(),
                    size: e.size,
                    digest: e.digest.clone(),
                    owner: e.acl.owner.clone(),
                }
            })
            .collect())
    }

    /// Administrative: map a subject to a local user. Service identity only.
    pub fn mkuser(&self, session: &Session, subject: &Subject, local: &str) -> Result<()> {
        if !self.auth.is_service(&session.subject) {
            return Err(GvfError::perm("mkuser requires the federation service identity"));
        }
        self.catalog.add_user(subject, local)?;
        self.users.write().insert(subject.clone(), local.to_string());
        Ok(())
    }
}

/// Serves `srb.*`.
pub struct BrokerHandler {
    broker: Arc<Broker>,
}

impl BrokerHandler {
    pub fn new(broker: Arc<Broker>) -> Self {
        BrokerHandler { broker }
    }
}

#[derive(Deserialize)]
struct SrbArgs {
    #[serde(default)]
    dataname: Option<String>,
    #[serde(default)]
    vault: Option<String>,
    #[serde(default)]
    mode: Option<Perm>,
    #[serde(default)]
    grants: Option<Grants>,
    #[serde(default)]
    prefix: Option<String>,
    #[serde(default)]
    subject: Option<Subject>,
    #[serde(default)]
    local_name: Option<String>,
}

impl SrbArgs {
    fn dataname(&self) -> Result<DataName> {
        DataName::parse(self.dataname.as_deref().ok_or_else(|| GvfError::badreq("dataname required"))?)
    }
}

impl Handler for BrokerHandler {
    fn handle(&self, mut req: Request, _conn: &ConnInfo) -> Reply {
        let b = &self.broker;
        let r = (|| -> Result<Reply> {
            let session = b.authenticate(req.credential()?)?;
            let a: SrbArgs = req.parse_args()?;
            Ok(match req.op.as_str() {
                "srb.auth" => Reply::ok(&session),
                "srb.put" => {
                    let body = req.take_body()?;
                    Reply::ok(b.put(&session, &a.dataname()?, &body)?)
                }
                "srb.get" => {
                    let (out, data) = b.get(&session, &a.dataname()?)?;
                    Reply::with_body(out, data)
                }
                "srb.replicate" => {
                    let v = a.vault.clone().ok_or_else(|| GvfError::badreq("vault required"))?;
                    Reply::ok(b.replicate(&session, &a.dataname()?, &v)?)
                }
                "srb.rm" => Reply::ok(b.rm(&session, &a.dataname()?)?),
                "srb.stat" => Reply::ok(b.stat(&session, &a.dataname()?)?),
                "srb.check" => {
                    let m = a.mode.ok_or_else(|| GvfError::badreq("mode required"))?;
                    Reply::ok(b.check(&session, &a.dataname()?, m)?)
                }
                "srb.set_acl" => {
                    let g = a.grants.clone().unwrap_or_default();
                    Reply::ok(b.set_acl(&session, &a.dataname()?, g)?)
                }
                "srb.ls" => Reply::ok(b.ls(&session, a.prefix.as_deref().unwrap_or("/"))?),
                "srb.mkuser" => {
                    let s = a.subject.clone().ok_or_else(|| GvfError::badreq("subject required"))?;
                    let l = a.local_name.clone().unwrap_or_else(|| derive_local_name(&s));
                    b.mkuser(&session, &s, &l)?;
                    Reply::ok(json!({"subject": s, "local_name": l}))
                }
                "srb.orphans" => Reply::ok(b.catalog.orphans()?),
                other => return Err(GvfError::badreq(format!("unknown op {other}"))),
            })
        })();
        r.unwrap_or_else(Reply::err)
    }
}

/// Client side of `srb.*`, acting with one credential.
pub struct BrokerClient {
    client: Arc<Client>,
    cred: Credential,
}

impl BrokerClient {
    pub fn new(addr: &str, cred: Credential) -> Self {
        BrokerClient {
            client: Arc::new(Client::new(addr)),
            cred,
        }
    }

    /// Same connection pool, different identity.
    pub fn with_credential(&self, cred: Credential) -> BrokerClient {
        BrokerClient {
            client: self.client.clone(),
            cred,
        }
    }

    pub fn credential(&self) -> &Credential {
        &self.cred
    }

    pub fn authenticate(&self) -> Result<Session> {
        self.client.call_typed("srb.auth", Some(&self.cred), json!({}))
    }

    pub fn put(&self, dataname: &str, data: &[u8]) -> Result<CatalogEntry> {
        let (v, _) = self
            .client
            .call("srb.put", Some(&self.cred), json!({"dataname": dataname}), Some(data))?;
        Ok(serde_json::from_value(v)?)
    }

    pub fn get(&self, dataname: &str) -> Result<(GetOutcome, Vec<u8>)> {
        let (v, body) = self
            .client
            .call("srb.get", Some(&self.cred), json!({"dataname": dataname}), None)?;
        Ok((
            serde_json::from_value(v)?,
            body.ok_or_else(|| GvfError::unavail("srb.get returned no body"))?,
        ))
    }

    pub fn replicate(&self, dataname: &str, vault: &str) -> Result<CatalogEntry> {
        self.client
            .call_typed("srb.replicate", Some(&self.cred), json!({"dataname": dataname, "vault": vault}))
    }

    pub fn rm(&self, dataname: &str) -> Result<RmOutcome> {
        self.client
            .call_typed("srb.rm", Some(&self.cred), json!({"dataname": dataname}))
    }

    pub fn stat(&self, dataname: &str) -> Result<CatalogEntry> {
        self.client
            .call_typed("srb.stat", Some(&self.cred), json!({"dataname": dataname}))
    }

    pub fn check(&self, dataname: &str, mode: Perm) -> Result<bool> {
        self.client
            .call_typed("srb.check", Some(&self.cred), json!({"dataname": dataname, "mode": mode}))
    }

    pub fn set_acl(&self, dataname: &str, grants: &Grants) -> Result<CatalogEntry> {
        self.client
            .call_typed("srb.set_acl", Some(&self.cred), json!({"dataname": dataname, "grants": grants}))
    }

    pub fn ls(&self, prefix: &str) -> Result<Vec<ListingItem>> {
        self.client.call_typed("srb.ls", Some(&self.cred), json!({"prefix": prefix}))
    }

    pub fn mkuser(&self, subject: &str, local_name: Option<&str>) -> Result<serde_json::Value> {
        self.client.call_typed(
            "srb.mkuser",
            Some(&self.cred),
            json!({"subject": subject, "local_name": local_name}),
        )
    }

    pub fn orphans(&self) -> Result<Vec<Orphan>> {
        self.client.call_typed("srb.orphans", Some(&self.cred), json!({}))
    }
}
