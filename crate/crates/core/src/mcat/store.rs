//! The embedded catalog store: in-memory state rebuilt from a journal and snapshot.

use super::types::*;
use crate::error::{GvfError, Result};
use crate::journal::{Journal, Sequenced};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::time::{Duration, Instant};

/// Lease held on a dataname (or blob key) by a put/rm in progress.
pub const NAME_LOCK_LEASE: Duration = Duration::from_secs(30);

const DEFAULT_SNAPSHOT_EVERY: usize = 4096;

/// One journal record. Each variant is a complete, self-describing mutation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Mutation {
    Register {
        seq: u64,
        entry: CatalogEntry,
    },
    SetAcl {
        seq: u64,
        dataname: DataName,
        grants: Grants,
    },
    AddReplica {
        seq: u64,
        dataname: DataName,
        replica: Replica,
    },
    RemoveReplica {
        seq: u64,
        dataname: DataName,
        vault_id: String,
    },
    SetReplicaState {
        seq: u64,
        dataname: DataName,
        vault_id: String,
        state: ReplicaState,
    },
    UpdateContent {
        seq: u64,
        dataname: DataName,
        size: u64,
        digest: String,
        replica: Replica,
    },
    Delete {
        seq: u64,
        dataname: DataName,
    },
    AddUser {
        seq: u64,
        subject: Subject,
        local_name: String,
    },
    Orphan {
        seq: u64,
        orphan: Orphan,
    },
}

impl Sequenced for Mutation {
    fn seq(&self) -> u64 {
        match self {
            Mutation::Register { seq, .. }
            | Mutation::SetAcl { seq, .. }
            | Mutation::AddReplica { seq, .. }
            | Mutation::RemoveReplica { seq, .. }
            | Mutation::SetReplicaState { seq, .. }
            | Mutation::UpdateContent { seq, .. }
            | Mutation::Delete { seq, .. }
            | Mutation::AddUser { seq, .. }
            | Mutation::Orphan { seq, .. } => *seq,
        }
    }
}

/// Everything the catalog knows; also the snapshot payload.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CatalogState {
    pub seq: u64,
    pub entries: BTreeMap<DataName, CatalogEntry>,
    pub events: Vec<ChangeEvent>,
    pub users: BTreeMap<Subject, String>,
    pub orphans: Vec<Orphan>,
}

impl Sequenced for CatalogState {
    fn seq(&self) -> u64 {
        self.seq
    }
}

impl CatalogState {
    fn entry_mut(&mut self, d: &DataName) -> &mut CatalogEntry {
        self.entries.get_mut(d).expect("mutation validated against live entry")
    }

    fn event(&mut self, kind: EventKind, dataname: &DataName, seq: u64) {
        self.events.push(ChangeEvent {
            kind,
            dataname: dataname.clone(),
            seq,
        });
    }

    /// Applies a validated mutation. Pure state transition; used for both live
    /// writes and replay, so the two can never disagree.
    pub fn apply(&mut self, m: &Mutation) {
        let seq = m.seq();
        match m {
            Mutation::Register { entry, .. } => {
                self.entries.insert(entry.dataname.clone(), entry.clone());
                self.event(EventKind::Registered, &entry.dataname, seq);
            }
            Mutation::SetAcl { dataname, grants, .. } => {
                let e = self.entry_mut(dataname);
                e.acl.grants = grants.clone();
                e.modified_at = seq;
                self.event(EventKind::AclChanged, dataname, seq);
            }
            Mutation::AddReplica { dataname, replica, .. } => {
                let e = self.entry_mut(dataname);
                e.replicas.retain(|r| r.vault_id != replica.vault_id);
                e.replicas.push(replica.clone());
                e.modified_at = seq;
                self.event(EventKind::ReplicaChanged, dataname, seq);
            }
            Mutation::RemoveReplica { dataname, vault_id, .. } => {
                let e = self.entry_mut(dataname);
                e.replicas.retain(|r| &r.vault_id != vault_id);
                e.modified_at = seq;
                self.event(EventKind::ReplicaChanged, dataname, seq);
            }
            Mutation::SetReplicaState {
                dataname,
                vault_id,
                state,
                ..
            } => {
                let e = self.entry_mut(dataname);
                for r in e.replicas.iter_mut().filter(|r| &r.vault_id == vault_id) {
                    r.state = *state;
                }
                e.modified_at = seq;
                self.event(EventKind::ReplicaChanged, dataname, seq);
            }
            Mutation::UpdateContent {
                dataname,
                size,
                digest,
                replica,
                ..
            } => {
                let e = self.entry_mut(dataname);
                e.size = *size;
                e.digest = digest.clone();
                for r in e.replicas.iter_mut() {
                    r.state = ReplicaState::Dead;
                }
                e.replicas.retain(|r| r.vault_id != replica.vault_id);
                e.replicas.push(replica.clone());
                e.modified_at = seq;
                self.event(EventKind::ReplicaChanged, dataname, seq);
            }
            Mutation::Delete { dataname, .. } => {
                self.entries.remove(dataname);
                self.event(EventKind::Deleted, dataname, seq);
            }
            Mutation::AddUser {
                subject, local_name, ..
            } => {
                self.users.insert(subject.clone(), local_name.clone());
            }
            Mutation::Orphan { orphan, .. } => self.orphans.push(orphan.clone()),
        }
        self.seq = seq;
    }

    fn live(&self, d: &DataName) -> Result<&CatalogEntry> {
        self.entries
            .get(d)
            .ok_or_else(|| GvfError::noent(format!("{d} is not catalogued")))
    }
}

struct Lease {
    holder: String,
    expires: Instant,
}

/// The metadata catalog. Mutations are serialized through one writer; reads
/// see the latest committed state.
pub struct Catalog {
    state: RwLock<CatalogState>,
    journal: Mutex<Option<Journal>>,
    snapshot_every: usize,
    leases: Mutex<HashMap<String, Lease>>,
}

impl Catalog {
    /// A catalog without persistence, for tests and throwaway federations.
    pub fn in_memory() -> Catalog {
        Catalog {
            state: RwLock::new(CatalogState::default()),
            journal: Mutex::new(None),
            snapshot_every: usize::MAX,
            leases: Mutex::new(HashMap::new()),
        }
    }

    /// Opens the catalog stored in `dir`, replaying the snapshot and journal.
    pub fn open(dir: &Path, fsync: bool) -> Result<Catalog> {
        Self::open_with(dir, fsync, DEFAULT_SNAPSHOT_EVERY)
    }

    pub fn open_with(dir: &Path, fsync: bool, snapshot_every: usize) -> Result<Catalog> {
        let (journal, rec) = Journal::open::<CatalogState, Mutation>(dir, "mcat", fsync)?;
        let mut state = rec.snapshot.unwrap_or_default();
        for m in &rec.records {
            state.apply(m);
        }
        log::info!(
            "catalog at {} recovered: seq {}, {} entries",
            dir.display(),
            state.seq,
            state.entries.len()
        );
        Ok(Catalog {
            state: RwLock::new(state),
            journal: Mutex::new(Some(journal)),
            snapshot_every: snapshot_every.max(1),
            leases: Mutex::new(HashMap::new()),
        })
    }

    /// Runs one serialized mutation: validate against current state, journal, apply.
    fn mutate<T>(
        &self,
        build: impl FnOnce(&CatalogState, u64) -> Result<Mutation>,
        result: impl FnOnce(&CatalogState) -> T,
    ) -> Result<T> {
        let mut journal = self.journal.lock();
        let mut state = self.state.write();
        let m = build(&state, state.seq + 1)?;
        if let Some(j) = journal.as_mut() {
            j.append(&m)?;
        }
        state.apply(&m);
        if let Some(j) = journal.as_mut() {
            if j.records_since_snapshot() >= self.snapshot_every {
                if let Err(e) = j.snapshot(&*state) {
                    log::warn!("catalog snapshot failed: {e}");
                }
            }
        }
        Ok(result(&state))
    }

    pub fn snapshot_now(&self) -> Result<()> {
        let mut journal = self.journal.lock();
        let state = self.state.read();
        match journal.as_mut() {
            Some(j) => j.snapshot(&*state),
            None => Ok(()),
        }
    }

    /// A copy of the full state (for tests and diagnostics).
    pub fn state(&self) -> CatalogState {
        self.state.read().clone()
    }

    pub fn register(
        &self,
        subject: &Subject,
        dataname: &DataName,
        size: u64,
        digest: &str,
        first_replica: Replica,
    ) -> Result<CatalogEntry> {
        if !crate::digest::is_digest_hex(digest) {
            return Err(GvfError::badreq("digest must be 64 lowercase hex chars"));
        }
        if first_replica.blob_id != digest {
            return Err(GvfError::badreq("replica blob does not match digest"));
        }
        self.mutate(
            |st, seq| {
                if st.entries.contains_key(dataname) {
                    return Err(GvfError::exists(format!("{dataname} already exists")));
                }
                match st.users.get(subject) {
                    Some(local) if local == dataname.owner_segment() => {}
                    Some(local) => {
                        return Err(GvfError::badreq(format!(
                            "{subject} maps to {local}, not to owner segment of {dataname}"
                        )))
                    }
                    None => return Err(GvfError::badreq(format!("{subject} has no local user mapping"))),
                }
                Ok(Mutation::Register {
                    seq,
                    entry: CatalogEntry {
                        dataname: dataname.clone(),
                        acl: Acl::owned_by(subject.clone()),
                        size,
                        digest: digest.to_string(),
                        replicas: vec![Replica {
                            state: ReplicaState::Online,
                            ..first_replica
                        }],
                        created_at: seq,
                        modified_at: seq,
                    },
                })
            },
            |st| st.entries[dataname].clone(),
        )
    }

    pub fn lookup(&self, dataname: &DataName) -> Result<CatalogEntry> {
        self.state.read().live(dataname).cloned()
    }

    pub fn check_access(&self, subject: &Subject, dataname: &DataName, mode: Perm) -> Result<bool> {
        Ok(self.state.read().live(dataname)?.acl.allows(subject, mode))
    }

    pub fn set_acl(&self, subject: &Subject, dataname: &DataName, grants: Grants) -> Result<CatalogEntry> {
        self.mutate(
            |st, seq| {
                let e = st.live(dataname)?;
                if e.acl.owner != *subject {
                    return Err(GvfError::perm(format!("{subject} does not own {dataname}")));
                }
                Acl::validate_grants(&e.acl.owner, &grants)?;
                Ok(Mutation::SetAcl {
                    seq,
                    dataname: dataname.clone(),
                    grants,
                })
            },
            |st| st.entries[dataname].clone(),
        )
    }

    /// Adds a replica, or revives a dead one held on the same vault.
    pub fn add_replica(&self, dataname: &DataName, replica: Replica) -> Result<CatalogEntry> {
        self.mutate(
            |st, seq| {
                let e = st.live(dataname)?;
                if e.replica_on(&replica.vault_id).is_some_and(|r| r.is_online()) {
                    return Err(GvfError::exists(format!(
                        "{dataname} already has a replica on {}",
                        replica.vault_id
                    )));
                }
                if replica.blob_id != e.digest {
                    return Err(GvfError::badreq("replica blob does not match entry digest"));
                }
                Ok(Mutation::AddReplica {
                    seq,
                    dataname: dataname.clone(),
                    replica: Replica {
                        state: ReplicaState::Online,
                        ..replica
                    },
                })
            },
            |st| st.entries[dataname].clone(),
        )
    }

    pub fn remove_replica(&self, dataname: &DataName, vault_id: &str) -> Result<CatalogEntry> {
        self.mutate(
            |st, seq| {
                let e = st.live(dataname)?;
                if e.replica_on(vault_id).is_none() {
                    return Err(GvfError::noent(format!("{dataname} has no replica on {vault_id}")));
                }
                if e.replicas.len() == 1 {
                    return Err(GvfError::badreq("cannot remove the last replica; delete the entry"));
                }
                Ok(Mutation::RemoveReplica {
                    seq,
                    dataname: dataname.clone(),
                    vault_id: vault_id.to_string(),
                })
            },
            |st| st.entries[dataname].clone(),
        )
    }

    pub fn set_replica_state(&self, dataname: &DataName, vault_id: &str, state: ReplicaState) -> Result<CatalogEntry> {
        self.mutate(
            |st, seq| {
                let e = st.live(dataname)?;
                let r = e
                    .replica_on(vault_id)
                    .ok_or_else(|| GvfError::noent(format!("{dataname} has no replica on {vault_id}")))?;
                if state == ReplicaState::Online && r.blob_id != e.digest {
                    return Err(GvfError::badreq("stale replica cannot be marked online"));
                }
                Ok(Mutation::SetReplicaState {
                    seq,
                    dataname: dataname.clone(),
                    vault_id: vault_id.to_string(),
                    state,
                })
            },
            |st| st.entries[dataname].clone(),
        )
    }

    /// Overwrite: new content lands on `replica`'s vault; every other replica goes dead.
    pub fn update_content(
        &self,
        subject: &Subject,
        dataname: &DataName,
        size: u64,
        digest: &str,
        replica: Replica,
    ) -> Result<CatalogEntry> {
        if !crate::digest::is_digest_hex(digest) || replica.blob_id != digest {
            return Err(GvfError::badreq("replica blob does not match digest"));
        }
        self.mutate(
            |st, seq| {
                let e = st.live(dataname)?;
                if !e.acl.allows(subject, Perm::Write) {
                    return Err(GvfError::perm(format!("{subject} may not write {dataname}")));
                }
                Ok(Mutation::UpdateContent {
                    seq,
                    dataname: dataname.clone(),
                    size,
                    digest: digest.to_string(),
                    replica: Replica {
                        state: ReplicaState::Online,
                        ..replica
                    },
                })
            },
            |st| st.entries[dataname].clone(),
        )
    }

    pub fn delete(&self, subject: &Subject, dataname: &DataName) -> Result<()> {
        self.mutate(
            |st, seq| {
                let e = st.live(dataname)?;
                if !e.acl.allows(subject, Perm::Delete) {
                    return Err(GvfError::perm(format!("{subject} may not delete {dataname}")));
                }
                Ok(Mutation::Delete {
                    seq,
                    dataname: dataname.clone(),
                })
            },
            |_| (),
        )
    }

    pub fn list(&self, prefix: &str) -> Result<Vec<CatalogEntry>> {
        if !prefix.starts_with('/') {
            return Err(GvfError::badreq("list prefix must be absolute"));
        }
        let st = self.state.read();
        Ok(st
            .entries
            .values()
            .filter(|e| e.dataname.under_prefix(prefix))
            .cloned()
            .collect())
    }

    pub fn current_seq(&self) -> u64 {
        self.state.read().seq
    }

    pub fn changes_since(&self, cursor: u64, limit: usize) -> Result<ChangePage> {
        let st = self.state.read();
        if cursor > st.seq {
            return Err(GvfError::badreq(format!("cursor {cursor} is ahead of catalog seq {}", st.seq)));
        }
        let start = st.events.partition_point(|e| e.seq <= cursor);
        let events: Vec<ChangeEvent> = st.events[start..].iter().take(limit.max(1)).cloned().collect();
        let new_cursor = events.last().map_or(cursor, |e| e.seq);
        Ok(ChangePage { events, new_cursor })
    }

    pub fn resolve_user(&self, subject: &Subject) -> Option<String> {
        self.state.read().users.get(subject).cloned()
    }

    pub fn users(&self) -> BTreeMap<Subject, String> {
        self.state.read().users.clone()
    }

    /// Maps a subject to a local user name. Re-adding an identical mapping is a no-op.
    pub fn add_user(&self, subject: &Subject, local_name: &str) -> Result<()> {
        if !is_identifier(local_name) {
            return Err(GvfError::badreq(format!("invalid local user name {local_name:?}")));
        }
        {
            let st = self.state.read();
            if st.users.get(subject).map(String::as_str) == Some(local_name) {
                return Ok(());
            }
        }
        self.mutate(
            |st, seq| {
                if st.users.contains_key(subject) {
                    return Err(GvfError::exists(format!("{subject} is already mapped")));
                }
                if st.users.values().any(|l| l == local_name) {
                    return Err(GvfError::exists(format!("local name {local_name} is taken")));
                }
                Ok(Mutation::AddUser {
                    seq,
                    subject: subject.clone(),
                    local_name: local_name.to_string(),
                })
            },
            |_| (),
        )
    }

    /// Whether any live entry other than `excluding` references this blob on this vault.
    pub fn blob_in_use(&self, vault_id: &str, blob_id: &str, excluding: Option<&DataName>) -> bool {
        self.state.read().entries.values().any(|e| {
            Some(&e.dataname) != excluding
                && e.replicas.iter().any(|r| r.vault_id == vault_id && r.blob_id == blob_id)
        })
    }

    pub fn record_orphan(&self, orphan: Orphan) -> Result<()> {
        self.mutate(|_, seq| Ok(Mutation::Orphan { seq, orphan }), |_| ())
    }

    pub fn orphans(&self) -> Vec<Orphan> {
        self.state.read().orphans.clone()
    }

    /// Takes the lease on `key` for `holder`. Re-entrant for the same holder;
    /// expired leases are taken over.
    pub fn try_lock(&self, key: &str, holder: &str) -> bool {
        let mut leases = self.leases.lock();
        let now = Instant::now();
        match leases.get(key) {
            Some(l) if l.holder != holder && l.expires > now => false,
            _ => {
                leases.insert(
                    key.to_string(),
                    Lease {
                        holder: holder.to_string(),
                        expires: now + NAME_LOCK_LEASE,
                    },
                );
                true
            }
        }
    }

    pub fn unlock(&self, key: &str, holder: &str) {
        let mut leases = self.leases.lock();
        if leases.get(key).is_some_and(|l| l.holder == holder) {
            leases.remove(key);
        }
    }
}
