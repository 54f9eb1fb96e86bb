//! The catalog as a service: one trait, a local implementation backed by
//! [`Catalog`], a wire client, and the `mcat.*` request handler served by the
//! master site.

use super::store::Catalog;
use super::types::*;
use crate::auth::Authenticator;
use crate::error::{GvfError, Result};
use crate::wire::{Client, ConnInfo, Credential, Handler, Reply, Request};
use serde::Deserialize;
use serde_json::json;
use std::sync::Arc;

pub trait CatalogService: Send + Sync {
    fn register(&self, subject: &Subject, dataname: &DataName, size: u64, digest: &str, replica: Replica)
        -> Result<CatalogEntry>;
    fn lookup(&self, dataname: &DataName) -> Result<CatalogEntry>;
    fn check_access(&self, subject: &Subject, dataname: &DataName, mode: Perm) -> Result<bool>;
    fn set_acl(&self, subject: &Subject, dataname: &DataName, grants: Grants) -> Result<CatalogEntry>;
    fn add_replica(&self, dataname: &DataName, replica: Replica) -> Result<CatalogEntry>;
    fn remove_replica(&self, dataname: &DataName, vault_id: &str) -> Result<CatalogEntry>;
    fn set_replica_state(&self, dataname: &DataName, vault_id: &str, state: ReplicaState) -> Result<CatalogEntry>;
    fn update_content(&self, subject: &Subject, dataname: &DataName, size: u64, digest: &str, replica: Replica)
        -> Result<CatalogEntry>;
    fn delete(&self, subject: &Subject, dataname: &DataName) -> Result<()>;
    fn list(&self, prefix: &str) -> Result<Vec<CatalogEntry>>;
    fn changes_since(&self, cursor: u64, limit: usize) -> Result<ChangePage>;
    fn current_seq(&self) -> Result<u64>;
    fn resolve_user(&self, subject: &Subject) -> Result<Option<String>>;
    fn add_user(&self, subject: &Subject, local_name: &str) -> Result<()>;
    fn blob_in_use(&self, vault_id: &str, blob_id: &str, excluding: Option<&DataName>) -> Result<bool>;
    fn record_orphan(&self, orphan: Orphan) -> Result<()>;
    fn orphans(&self) -> Result<Vec<Orphan>>;
    fn try_lock(&self, key: &str, holder: &str) -> Result<bool>;
    fn unlock(&self, key: &str, holder: &str) -> Result<()>;
}

impl CatalogService for Catalog {
    fn register(&self, s: &Subject, d: &DataName, size: u64, digest: &str, r: Replica) -> Result<CatalogEntry> {
        Catalog::register(self, s, d, size, digest, r)
    }
    fn lookup(&self, d: &DataName) -> Result<CatalogEntry> {
        Catalog::lookup(self, d)
    }
    fn check_access(&self, s: &Subject, d: &DataName, m: Perm) -> Result<bool> {
        Catalog::check_access(self, s, d, m)
    }
    fn set_acl(&self, s: &Subject, d: &DataName, g: Grants) -> Result<CatalogEntry> {
        Catalog::set_acl(self, s, d, g)
    }
    fn add_replica(&self, d: &DataName, r: Replica) -> Result<CatalogEntry> {
        Catalog::add_replica(self, d, r)
    }
    fn remove_replica(&self, d: &DataName, v: &str) -> Result<CatalogEntry> {
        Catalog::remove_replica(self, d, v)
    }
    fn set_replica_state(&self, d: &DataName, v: &str, st: ReplicaState) -> Result<CatalogEntry> {
        Catalog::set_replica_state(self, d, v, st)
    }
    fn update_content(&self, s: &Subject, d: &DataName, size: u64, digest: &str, r: Replica) -> Result<CatalogEntry> {
        Catalog::update_content(self, s, d, size, digest, r)
    }
    fn delete(&self, s: &Subject, d: &DataName) -> Result<()> {
        Catalog::delete(self, s, d)
    }
    fn list(&self, prefix: &str) -> Result<Vec<CatalogEntry>> {
        Catalog::list(self, prefix)
    }
    fn changes_since(&self, cursor: u64, limit: usize) -> Result<ChangePage> {
        Catalog::changes_since(self, cursor, limit)
    }
    fn current_seq(&self) -> Result<u64> {
        Ok(Catalog::current_seq(self))
    }
    fn resolve_user(&self, s: &Subject) -> Result<Option<String>> {
        Ok(Catalog::resolve_user(self, s))
    }
    fn add_user(&self, s: &Subject, local: &str) -> Result<()> {
        Catalog::add_user(self, s, local)
    }
    fn blob_in_use(&self, v: &str, b: &str, ex: Option<&DataName>) -> Result<bool> {
        Ok(Catalog::blob_in_use(self, v, b, ex))
    }
    fn record_orphan(&self, o: Orphan) -> Result<()> {
        Catalog::record_orphan(self, o)
    }
    fn orphans(&self) -> Result<Vec<Orphan>> {
        Ok(Catalog::orphans(self))
    }
    fn try_lock(&self, key: &str, holder: &str) -> Result<bool> {
        Ok(Catalog::try_lock(self, key, holder))
    }
    fn unlock(&self, key: &str, holder: &str) -> Result<()> {
        Catalog::unlock(self, key, holder);
        Ok(())
    }
}

/// Catalog access through the master site's `mcat.*` ops.
pub struct RemoteCatalog {
    client: Client,
    cred: Credential,
}

impl RemoteCatalog {
    pub fn new(master_addr: &str, service_cred: Credential) -> Self {
        RemoteCatalog {
            client: Client::new(master_addr),
            cred: service_cred,
        }
    }

    fn call<T: serde::de::DeserializeOwned>(&self, op: &str, args: serde_json::Value) -> Result<T> {
        self.client.call_typed(op, Some(&self.cred), args)
    }
}

impl CatalogService for RemoteCatalog {
    fn register(&self, s: &Subject, d: &DataName, size: u64, digest: &str, r: Replica) -> Result<CatalogEntry> {
        self.call(
            "mcat.register",
            json!({"subject": s, "dataname": d, "size": size, "digest": digest, "replica": r}),
        )
    }
    fn lookup(&self, d: &DataName) -> Result<CatalogEntry> {
        self.call("mcat.lookup", json!({"dataname": d}))
    }
    fn check_access(&self, s: &Subject, d: &DataName, m: Perm) -> Result<bool> {
        self.call("mcat.check", json!({"subject": s, "dataname": d, "mode": m}))
    }
    fn set_acl(&self, s: &Subject, d: &DataName, g: Grants) -> Result<CatalogEntry> {
        self.call("mcat.set_acl", json!({"subject": s, "dataname": d, "grants": g}))
    }
    fn add_replica(&self, d: &DataName, r: Replica) -> Result<CatalogEntry> {
        self.call("mcat.add_replica", json!({"dataname": d, "replica": r}))
    }
    fn remove_replica(&self, d: &DataName, v: &str) -> Result<CatalogEntry> {
        self.call("mcat.remove_replica", json!({"dataname": d, "vault_id": v}))
    }
    fn set_replica_state(&self, d: &DataName, v: &str, st: ReplicaState) -> Result<CatalogEntry> {
        self.call("mcat.set_replica_state", json!({"dataname": d, "vault_id": v, "state": st}))
    }
    fn update_content(&self, s: &Subject, d: &DataName, size: u64, digest: &str, r: Replica) -> Result<CatalogEntry> {
        self.call(
            "mcat.update_content",
            json!({"subject": s, "dataname": d, "size": size, "digest": digest, "replica": r}),
        )
    }
    fn delete(&self, s: &Subject, d: &DataName) -> Result<()> {
        self.call::<serde_json::Value>("mcat.delete", json!({"subject": s, "dataname": d}))
            .map(|_| ())
    }
    fn list(&self, prefix: &str) -> Result<Vec<CatalogEntry>> {
        self.call("mcat.list", json!({"prefix": prefix}))
    }
    fn changes_since(&self, cursor: u64, limit: usize) -> Result<ChangePage> {
        self.call("mcat.changes_since", json!({"cursor": cursor, "limit": limit}))
    }
    fn current_seq(&self) -> Result<u64> {
        self.call("mcat.seq", json!({}))
    }
    fn resolve_user(&self, s: &Subject) -> Result<Option<String>> {
        self.call("mcat.resolve_user", json!({"subject": s}))
    }
    fn add_user(&self, s: &Subject, local: &str) -> Result<()> {
        self.call::<serde_json::Value>("mcat.add_user", json!({"subject": s, "local_name": local}))
            .map(|_| ())
    }
    fn blob_in_use(&self, v: &str, b: &str, ex: Option<&DataName>) -> Result<bool> {
        self.call("mcat.blob_in_use", json!({"vault_id": v, "blob_id": b, "excluding": ex}))
    }
    fn record_orphan(&self, o: Orphan) -> Result<()> {
        self.call::<serde_json::Value>("mcat.orphan", json!({"orphan": o}))
            .map(|_| ())
    }
    fn orphans(&self) -> Result<Vec<Orphan>> {
        self.call("mcat.orphans", json!({}))
    }
    fn try_lock(&self, key: &str, holder: &str) -> Result<bool> {
        self.call("mcat.lock", json!({"key": key, "holder": holder}))
    }
    fn unlock(&self, key: &str, holder: &str) -> Result<()> {
        self.call::<serde_json::Value>("mcat.unlock", json!({"key": key, "holder": holder}))
            .map(|_| ())
    }
}

/// Serves `mcat.*`. Only the federation service identity may call it: clients
/// reach the catalog through a broker, never directly.
pub struct CatalogHandler {
    catalog: Arc<dyn CatalogService>,
    auth: Authenticator,
}

impl CatalogHandler {
    pub fn new(catalog: Arc<dyn CatalogService>, auth: Authenticator) -> Self {
        CatalogHandler { catalog, auth }
    }

    fn dispatch(&self, req: &Request) -> Result<serde_json::Value> {
        #[derive(Deserialize)]
        struct ContentArgs {
            subject: Subject,
            dataname: DataName,
            size: u64,
            digest: String,
            replica: Replica,
        }
        #[derive(Deserialize)]
        struct NameArgs {
            dataname: DataName,
            #[serde(default)]
            subject: Option<Subject>,
        }
        #[derive(Deserialize)]
        struct CheckArgs {
            subject: Subject,
            dataname: DataName,
            mode: Perm,
        }
        #[derive(Deserialize)]
        struct AclArgs {
            subject: Subject,
            dataname: DataName,
            grants: Grants,
        }
        #[derive(Deserialize)]
        struct ReplicaArgs {
            dataname: DataName,
            replica: Replica,
        }
        #[derive(Deserialize)]
        struct VaultArgs {
            dataname: DataName,
            vault_id: String,
            #[serde(default)]
            state: Option<ReplicaState>,
        }
        #[derive(Deserialize)]
        struct ListArgs {
            prefix: String,
        }
        #[derive(Deserialize)]
        struct ChangesArgs {
            cursor: u64,
            #[serde(default = "default_limit")]
            limit: usize,
        }
        fn default_limit() -> usize {
            1000
        }
        #[derive(Deserialize)]
        struct UserArgs {
            subject: Subject,
            #[serde(default)]
            local_name: Option<String>,
        }
        #[derive(Deserialize)]
        struct BlobArgs {
            vault_id: String,
            blob_id: String,
            excluding: Option<DataName>,
        }
        #[derive(Deserialize)]
        struct OrphanArgs {
            orphan: Orphan,
        }
        #[derive(Deserialize)]
        struct LockArgs {
            key: String,
            holder: String,
        }

        let c = self.catalog.as_ref();
        let to = |v| serde_json::to_value(v).map_err(GvfError::from);
        let need_subject = |s: Option<Subject>| s.ok_or_else(|| GvfError::badreq("subject required"));
        match req.op.as_str() {
            "mcat.register" => {
                let a: ContentArgs = req.parse_args()?;
                to(json!(c.register(&a.subject, &a.dataname, a.size, &a.digest, a.replica)?))
            }
            "mcat.update_content" => {
                let a: ContentArgs = req.parse_args()?;
                to(json!(c.update_content(&a.subject, &a.dataname, a.size, &a.digest, a.replica)?))
            }
            "mcat.lookup" => {
                let a: NameArgs = req.parse_args()?;
                to(json!(c.lookup(&a.dataname)?))
            }
            "mcat.check" => {
                let a: CheckArgs = req.parse_args()?;
                to(json!(c.check_access(&a.subject, &a.dataname, a.mode)?))
            }
            "mcat.set_acl" => {
                let a: AclArgs = req.parse_args()?;
                to(json!(c.set_acl(&a.subject, &a.dataname, a.grants)?))
            }
            "mcat.add_replica" => {
                let a: ReplicaArgs = req.parse_args()?;
                to(json!(c.add_replica(&a.dataname, a.replica)?))
            }
            "mcat.remove_replica" => {
                let a: VaultArgs = req.parse_args()?;
                to(json!(c.remove_replica(&a.dataname, &a.vault_id)?))
            }
            "mcat.set_replica_state" => {
                let a: VaultArgs = req.parse_args()?;
                let st = a.state.ok_or_else(|| GvfError::badreq("state required"))?;
                to(json!(c.set_replica_state(&a.dataname, &a.vault_id, st)?))
            }
            "mcat.delete" => {
                let a: NameArgs = req.parse_args()?;
                c.delete(&need_subject(a.subject)?, &a.dataname)?;
                Ok(json!({}))
            }
            "mcat.list" => {
                let a: ListArgs = req.parse_args()?;
                to(json!(c.list(&a.prefix)?))
            }
            "mcat.changes_since" => {
                let a: ChangesArgs = req.parse_args()?;
                to(json!(c.changes_since(a.cursor, a.limit)?))
            }
            "mcat.seq" => to(json!(c.current_seq()?)),
            "mcat.resolve_user" => {
                let a: UserArgs = req.parse_args()?;
                to(json!(c.resolve_user(&a.subject)?))
            }
            "mcat.add_user" => {
                let a: UserArgs = req.parse_args()?;
                let local = a.local_name.ok_or_else(|| GvfError::badreq("local_name required"))?;
                c.add_user(&a.subject, &local)?;
                Ok(json!({}))
            }
            "mcat.blob_in_use" => {
                let a: BlobArgs = req.parse_args()?;
                to(json!(c.blob_in_use(&a.vault_id, &a.blob_id, a.excluding.as_ref())?))
            }
            "mcat.orphan" => {
                let a: OrphanArgs = req.parse_args()?;
                c.record_orphan(a.orphan)?;
                Ok(json!({}))
            }
            "mcat.orphans" => to(json!(c.orphans()?)),
            "mcat.lock" => {
                let a: LockArgs = req.parse_args()?;
                to(json!(c.try_lock(&a.key, &a.holder)?))
            }
            "mcat.unlock" => {
                let a: LockArgs = req.parse_args()?;
                c.unlock(&a.key, &a.holder)?;
                Ok(json!({}))
            }
            other => Err(GvfError::badreq(format!("unknown op {other}"))),
        }
    }
}

impl Handler for CatalogHandler {
    fn handle(&self, req: Request, _conn: &ConnInfo) -> Reply {
        if let Err(e) = self.auth.require_service(req.auth.as_ref()) {
            return Reply::err(e);
        }
        Reply::from_result(self.dispatch(&req))
    }
}
