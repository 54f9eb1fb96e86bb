//! Catalog → RLS bridge. Every live catalog entry appears in the RLS under a
//! name-derived GUID with one SURL per online replica, pointing at the gateway.

use crate::digest::fnv1a_128;
use crate::error::{ErrorCode, GvfError, Result};
use crate::journal::{read_single_framed, write_single_framed};
use crate::mcat::{CatalogEntry, CatalogService, DataName, Replica};
use crate::rls::{list_everything, Guid, PublishOutcome, RlsPage, RlsService, Surl, UnpublishOutcome};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

const EVENT_PAGE: usize = 1000;
const RLS_PAGE: usize = 512;
/// A lease older than this is taken over even if its holder still runs.
const LEASE_MAX_AGE: Duration = Duration::from_secs(600);

pub fn derive_guid(dataname: &DataName) -> Guid {
    Guid::from_u128(fnv1a_128(dataname.as_str().as_bytes()))
}

/// Validating form for raw strings.
pub fn derive_guid_str(dataname: &str) -> Result<Guid> {
    Ok(derive_guid(&DataName::parse(dataname)?))
}

/// `gateway` is the gateway's `host:port`.
pub fn derive_surl(gateway: &str, entry: &CatalogEntry, replica: &Replica) -> Result<Surl> {
    Surl::at(gateway, &replica.site_id, entry.dataname.clone())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncStats {
    pub published: u64,
    pub unpublished: u64,
    pub skipped: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncState {
    pub cursor: u64,
    /// Count of completed runs.
    pub last_run: u64,
    /// Counts from the most recent completed run.
    pub stats: SyncStats,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RescanReport {
    pub added: u64,
    pub removed: u64,
    pub agreed: u64,
}

fn attributable(gateway: &str, s: &Surl) -> bool {
    format!("{}:{}", s.host, s.port) == gateway
}

fn expected_surls(gateway: &str, entry: &CatalogEntry) -> Result<BTreeSet<Surl>> {
    entry
        .online_replicas()
        .map(|r| derive_surl(gateway, entry, r))
        .collect()
}

fn present_surls(rls: &dyn RlsService, gateway: &str, guid: &Guid) -> Result<BTreeSet<Surl>> {
    match rls.lookup_guid(guid) {
        Ok(set) => Ok(set.into_iter().filter(|s| attributable(gateway, s)).collect()),
        Err(e) if e.code == ErrorCode::NoEnt => Ok(BTreeSet::new()),
        Err(e) => Err(e),
    }
}

fn unavail(e: GvfError) -> GvfError {
    if e.code == ErrorCode::Unavail {
        e
    } else {
        GvfError::unavail(format!("sync aborted: {e}"))
    }
}

/// Publishes, first clearing a stray mapping that holds the SURL under another GUID.
fn publish(rls: &dyn RlsService, guid: &Guid, surl: &Surl) -> Result<(bool, u64)> {
    match rls.publish(guid, surl) {
        Ok(o) => Ok((!o.already_present, 0)),
        Err(e) if e.code == ErrorCode::Exists => {
            let other = rls.lookup_surl(surl)?;
            rls.unpublish(&other, surl)?;
            let o = rls.publish(guid, surl)?;
            Ok((!o.already_present, 1))
        }
        Err(e) => Err(e),
    }
}

/// Brings the RLS image of one dataname in line with the catalog.
fn reconcile_name(
    mcat: &dyn CatalogService,
    rls: &dyn RlsService,
    gateway: &str,
    d: &DataName,
    stats: &mut SyncStats,
) -> Result<()> {
    let guid = derive_guid(d);
    let expected = match mcat.lookup(d) {
        Ok(e) => expected_surls(gateway, &e)?,
        Err(e) if e.code == ErrorCode::NoEnt => BTreeSet::new(),
        Err(e) => return Err(e),
    };
    let present = present_surls(rls, gateway, &guid)?;
    let mut touched = false;
    for s in present.difference(&expected) {
        if !rls.unpublish(&guid, s)?.already_absent {
            stats.unpublished += 1;
            touched = true;
        }
    }
    for s in expected.difference(&present) {
        let (new, cleared) = publish(rls, &guid, s)?;
        stats.unpublished += cleared;
        if new {
            stats.published += 1;
            touched = true;
        }
    }
    if !touched {
        stats.skipped += 1;
    }
    Ok(())
}

/// Applies every catalog event after `state.cursor`. The cursor only moves once
/// every RLS call has been acknowledged; on error the input state is what
/// should be persisted, and a rerun repeats the window harmlessly.
pub fn sync_once(
    mcat: &dyn CatalogService,
    rls: &dyn RlsService,
    gateway: &str,
    state: &SyncState,
) -> Result<SyncState> {
    let mut cursor = state.cursor;
    let mut touched: Vec<DataName> = Vec::new();
    let mut seen = BTreeSet::new();
    loop {
        let page = mcat.changes_since(cursor, EVENT_PAGE).map_err(unavail)?;
        if page.events.is_empty() {
            break;
        }
        for ev in page.events {
            if seen.insert(ev.dataname.clone()) {
                touched.push(ev.dataname);
            }
        }
        cursor = page.new_cursor;
    }
    let mut stats = SyncStats::default();
    for d in &touched {
        reconcile_name(mcat, rls, gateway, d, &mut stats).map_err(unavail)?;
    }
    Ok(SyncState {
        cursor,
        last_run: state.last_run + 1,
        stats,
    })
}

/// The catalog's image as the RLS should hold it.
pub fn expected_image(mcat: &dyn CatalogService, gateway: &str) -> Result<BTreeMap<Guid, BTreeSet<Surl>>> {
    let mut out = BTreeMap::new();
    for e in mcat.list("/")? {
        let surls = expected_surls(gateway, &e)?;
        if !surls.is_empty() {
            out.insert(derive_guid(&e.dataname), surls);
        }
    }
    Ok(out)
}

/// The part of the RLS image this federation's gateway is responsible for.
pub fn attributable_image(rls: &dyn RlsService, gateway: &str) -> Result<BTreeMap<Guid, BTreeSet<Surl>>> {
    let mut out = BTreeMap::new();
    for m in list_everything(rls, RLS_PAGE)? {
        let set: BTreeSet<Surl> = m.surls.into_iter().filter(|s| attributable(gateway, s)).collect();
        if !set.is_empty() {
            out.insert(m.guid, set);
        }
    }
    Ok(out)
}

/// Recomputes the whole expected image from a catalog listing and makes the RLS
/// match it exactly.
pub fn full_rescan(mcat: &dyn CatalogService, rls: &dyn RlsService, gateway: &str) -> Result<RescanReport> {
    let expected = expected_image(mcat, gateway).map_err(unavail)?;
    let present = attributable_image(rls, gateway).map_err(unavail)?;
    let empty = BTreeSet::new();
    let mut report = RescanReport::default();
    for (g, have) in &present {
        let want = expected.get(g).unwrap_or(&empty);
        for s in have.difference(want) {
            if !rls.unpublish(g, s).map_err(unavail)?.already_absent {
                report.removed += 1;
            }
        }
    }
    for (g, want) in &expected {
        let have = present.get(g).unwrap_or(&empty);
        report.agreed += want.intersection(have).count() as u64;
        for s in want.difference(have) {
            let (new, cleared) = publish(rls, g, s).map_err(unavail)?;
            report.removed += cleared;
            if new {
                report.added += 1;
            }
        }
    }
    Ok(report)
}

/// Holds the single-worker lease and the persisted cursor.
pub struct SyncWorker {
    dir: PathBuf,
}

#[derive(Debug, Serialize, Deserialize)]
struct LeaseBody {
    pid: u32,
    since: u64,
}

pub struct Lease {
    path: PathBuf,
}

impl Drop for Lease {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn now_secs() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn pid_alive(pid: u32) -> bool {
    if cfg!(target_os = "linux") {
        Path::new(&format!("/proc/{pid}")).exists()
    } else {
        true
    }
}

impl SyncWorker {
    pub fn new(dir: &Path) -> Result<SyncWorker> {
        fs::create_dir_all(dir)?;
        Ok(SyncWorker { dir: dir.to_path_buf() })
    }

    pub fn state_path(&self) -> PathBuf {
        self.dir.join("sync_state")
    }

    fn lease_path(&self) -> PathBuf {
        self.dir.join("sync.lease")
    }

    pub fn load_state(&self) -> Result<SyncState> {
        Ok(read_single_framed(&self.state_path())?.unwrap_or_default())
    }

    pub fn save_state(&self, s: &SyncState) -> Result<()> {
        write_single_framed(&self.state_path(), s)
    }

    /// E_BADREQ while another live worker holds the lease.
    pub fn acquire(&self) -> Result<Lease> {
        let path = self.lease_path();
        for _ in 0..2 {
            match OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(mut f) => {
                    let body = serde_json::to_vec(&LeaseBody {
                        pid: std::process::id(),
                        since: now_secs(),
                    })?;
                    f.write_all(&body)?;
                    return Ok(Lease { path });
                }
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    let holder: Option<LeaseBody> = fs::read(&path).ok().and_then(|b| serde_json::from_slice(&b).ok());
                    let stale = match &holder {
                        Some(h) => !pid_alive(h.pid) || now_secs().saturating_sub(h.since) > LEASE_MAX_AGE.as_secs(),
                        // Half-written by a crashed worker.
                        None => true,
                    };
                    if !stale {
                        return Err(GvfError::badreq(format!(
                            "sync already running (pid {})",
                            holder.map_or(0, |h| h.pid)
                        )));
                    }
                    log::warn!("taking over stale sync lease {}", path.display());
                    let _ = fs::remove_file(&path);
                }
                Err(e) => return Err(e.into()),
            }
        }
        Err(GvfError::badreq("could not take the sync lease"))
    }

    /// One leased run: load cursor, sync, persist on success.
    pub fn run_once(&self, mcat: &dyn CatalogService, rls: &dyn RlsService, gateway: &str) -> Result<SyncState> {
        let _lease = self.acquire()?;
        let before = self.load_state()?;
        let after = sync_once(mcat, rls, gateway, &before)?;
        self.save_state(&after)?;
        Ok(after)
    }
}

/// An RLS wrapper that fails every call after a budget of mutations, standing
/// in for a sync worker killed mid-run.
pub struct CrashAfter<'a> {
    inner: &'a dyn RlsService,
    budget: AtomicUsize,
}

impl<'a> CrashAfter<'a> {
    pub fn new(inner: &'a dyn RlsService, mutations: usize) -> Self {
        CrashAfter {
            inner,
            budget: AtomicUsize::new(mutations),
        }
    }

    fn spend(&self) -> Result<()> {
        self.budget
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |b| b.checked_sub(1))
            .map(|_| ())
            .map_err(|_| GvfError::unavail("sync worker crashed"))
    }
}

impl RlsService for CrashAfter<'_> {
    fn publish(&self, g: &Guid, s: &Surl) -> Result<PublishOutcome> {
        self.spend()?;
        self.inner.publish(g, s)
    }
    fn unpublish(&self, g: &Guid, s: &Surl) -> Result<UnpublishOutcome> {
        self.spend()?;
        self.inner.unpublish(g, s)
    }
    fn lookup_guid(&self, g: &Guid) -> Result<BTreeSet<Surl>> {
        self.inner.lookup_guid(g)
    }
    fn lookup_surl(&self, s: &Surl) -> Result<Guid> {
        self.inner.lookup_surl(s)
    }
    fn list_all(&self, c: Option<&Guid>, n: usize) -> Result<RlsPage> {
        self.inner.list_all(c, n)
    }
    fn mutation_count(&self) -> Result<u64> {
        self.inner.mutation_count()
    }
}
