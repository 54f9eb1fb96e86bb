//! Replica location service: a flat GUID → SURL catalog. Records carry no
//! owner, subject or permission of any kind, and lookups take no identity.

use crate::auth::Authenticator;
use crate::error::{GvfError, Result};
use crate::journal::{Journal, Sequenced};
use crate::mcat::{is_identifier, DataName};
use crate::wire::{Client, ConnInfo, Credential, Handler, Reply, Request};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

const DEFAULT_SNAPSHOT_EVERY: usize = 4096;

/// 128-bit identifier, 32 lowercase hex digits.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Guid(String);

impl Guid {
    pub fn parse(s: &str) -> Result<Guid> {
        if s.len() == 32 && s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f')) {
            Ok(Guid(s.to_string()))
        } else {
            Err(GvfError::badreq(format!("malformed guid {s:?}")))
        }
    }

    pub fn from_u128(v: u128) -> Guid {
        Guid(format!("{v:032x}"))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Guid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl TryFrom<String> for Guid {
    type Error = GvfError;
    fn try_from(s: String) -> Result<Guid> {
        Guid::parse(&s)
    }
}

impl From<Guid> for String {
    fn from(g: Guid) -> String {
        g.0
    }
}

/// `srm://<host>:<port>/<site_id>/<dataname without its leading slash>`
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Surl {
    pub host: String,
    pub port: u16,
    pub site_id: String,
    pub dataname: DataName,
}

fn is_host(h: &str) -> bool {
    !h.is_empty() && h.len() <= 253 && h.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'.' || b == b'-')
}

impl Surl {
    pub fn new(host: &str, port: u16, site_id: &str, dataname: DataName) -> Result<Surl> {
        if !is_host(host) || port == 0 || !is_identifier(site_id) {
            return Err(GvfError::badreq(format!("bad surl parts {host}:{port}/{site_id}")));
        }
        Ok(Surl {
            host: host.to_string(),
            port,
            site_id: site_id.to_string(),
            dataname,
        })
    }

    /// Builds from a `host:port` endpoint string.
    pub fn at(endpoint: &str, site_id: &str, dataname: DataName) -> Result<Surl> {
        let (host, port) = endpoint
            .rsplit_once(':')
            .ok_or_else(|| GvfError::badreq(format!("endpoint {endpoint:?} lacks a port")))?;
        let port = port
            .parse()
            .map_err(|_| GvfError::badreq(format!("bad port in {endpoint:?}")))?;
        Surl::new(host, port, site_id, dataname)
    }

    pub fn parse(s: &str) -> Result<Surl> {
        let bad = || GvfError::badreq(format!("malformed surl {s:?}"));
        let rest = s.strip_prefix("srm://").ok_or_else(bad)?;
        let (authority, path) = rest.split_once('/').ok_or_else(bad)?;
        let (host, port) = authority.rsplit_once(':').ok_or_else(bad)?;
        if port.is_empty() || !port.bytes().all(|b| b.is_ascii_digit()) || (port.len() > 1 && port.starts_with('0')) {
            return Err(bad());
        }
        let port: u16 = port.parse().map_err(|_| bad())?;
        let (site, name) = path.split_once('/').ok_or_else(bad)?;
        let dataname = DataName::parse(&format!("/{name}")).map_err(|_| bad())?;
        Surl::new(host, port, site, dataname).map_err(|_| bad())
    }
}

impl fmt::Display for Surl {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "srm://{}:{}/{}/{}",
            self.host,
            self.port,
            self.site_id,
            &self.dataname.as_str()[1..]
        )
    }
}

impl FromStr for Surl {
    type Err = GvfError;
    fn from_str(s: &str) -> Result<Surl> {
        Surl::parse(s)
    }
}

impl TryFrom<String> for Surl {
    type Error = GvfError;
    fn try_from(s: String) -> Result<Surl> {
        Surl::parse(&s)
    }
}

impl From<Surl> for String {
    fn from(s: Surl) -> String {
        s.to_string()
    }
}

/// The whole record. Deliberately nothing but the two halves of the mapping.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RlsMapping {
    pub guid: Guid,
    pub surls: BTreeSet<Surl>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum RlsMutation {
    Publish { seq: u64, guid: Guid, surl: Surl },
    Unpublish { seq: u64, guid: Guid, surl: Surl },
}

impl Sequenced for RlsMutation {
    fn seq(&self) -> u64 {
        match self {
            RlsMutation::Publish { seq, .. } | RlsMutation::Unpublish { seq, .. } => *seq,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RlsSnapshot {
    pub seq: u64,
    pub mappings: Vec<RlsMapping>,
}

impl Sequenced for RlsSnapshot {
    fn seq(&self) -> u64 {
        self.seq
    }
}

#[derive(Debug, Clone, Default)]
struct RlsState {
    seq: u64,
    by_guid: BTreeMap<Guid, BTreeSet<Surl>>,
    by_surl: BTreeMap<Surl, Guid>,
}

impl RlsState {
    fn apply(&mut self, m: &RlsMutation) {
        match m {
            RlsMutation::Publish { seq, guid, surl } => {
                self.by_guid.entry(guid.clone()).or_default().insert(surl.clone());
                self.by_surl.insert(surl.clone(), guid.clone());
                self.seq = *seq;
            }
            RlsMutation::Unpublish { seq, guid, surl } => {
                if let Some(set) = self.by_guid.get_mut(guid) {
                    set.remove(surl);
                    if set.is_empty() {
                        self.by_guid.remove(guid);
                    }
                }
                self.by_surl.remove(surl);
                self.seq = *seq;
            }
        }
    }

    fn snapshot(&self) -> RlsSnapshot {
        RlsSnapshot {
            seq: self.seq,
            mappings: self
                .by_guid
                .iter()
                .map(|(g, s)| RlsMapping {
                    guid: g.clone(),
                    surls: s.clone(),
                })
                .collect(),
        }
    }

    fn from_snapshot(s: RlsSnapshot) -> RlsState {
        let mut st = RlsState {
            seq: s.seq,
            ..Default::default()
        };
        for m in s.mappings {
            for u in &m.surls {
                st.by_surl.insert(u.clone(), m.guid.clone());
            }
            st.by_guid.insert(m.guid, m.surls);
        }
        st
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PublishOutcome {
    pub already_present: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnpublishOutcome {
    pub already_absent: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RlsPage {
    pub mappings: Vec<RlsMapping>,
    /// Pass back as `cursor` for the next page; absent on the last page.
    pub next_cursor: Option<Guid>,
}

pub struct RlsStore {
    state: RwLock<RlsState>,
    journal: Mutex<Option<Journal>>,
    snapshot_every: usize,
}

impl RlsStore {
    pub fn in_memory() -> RlsStore {
        RlsStore {
            state: RwLock::new(RlsState::default()),
            journal: Mutex::new(None),
            snapshot_every: usize::MAX,
        }
    }

    pub fn open(dir: &Path, fsync: bool) -> Result<RlsStore> {
        Self::open_with(dir, fsync, DEFAULT_SNAPSHOT_EVERY)
    }

    pub fn open_with(dir: &Path, fsync: bool, snapshot_every: usize) -> Result<RlsStore> {
        let (journal, rec) = Journal::open::<RlsSnapshot, RlsMutation>(dir, "rls", fsync)?;
        let mut state = rec.snapshot.map(RlsState::from_snapshot).unwrap_or_default();
        for m in &rec.records {
            state.apply(m);
        }
        log::info!("rls at {} recovered: seq {}, {} guids", dir.display(), state.seq, state.by_guid.len());
        Ok(RlsStore {
            state: RwLock::new(state),
            journal: Mutex::new(Some(journal)),
            snapshot_every: snapshot_every.max(1),
        })
    }

    fn commit(&self, journal: &mut Option<Journal>, state: &mut RlsState, m: RlsMutation) -> Result<()> {
        if let Some(j) = journal.as_mut() {
            j.append(&m)?;
        }
        state.apply(&m);
        if let Some(j) = journal.as_mut() {
            if j.records_since_snapshot() >= self.snapshot_every {
                if let Err(e) = j.snapshot(&state.snapshot()) {
                    log::warn!("rls snapshot failed: {e}");
                }
            }
        }
        Ok(())
    }

    pub fn publish(&self, guid: &Guid, surl: &Surl) -> Result<PublishOutcome> {
        let mut journal = self.journal.lock();
        let mut state = self.state.write();
        match state.by_surl.get(surl) {
            Some(g) if g == guid => return Ok(PublishOutcome { already_present: true }),
            Some(g) => return Err(GvfError::exists(format!("{surl} is already mapped to {g}"))),
            None => {}
        }
        let m = RlsMutation::Publish {
            seq: state.seq + 1,
            guid: guid.clone(),
            surl: surl.clone(),
        };
        self.commit(&mut journal, &mut state, m)?;
        Ok(PublishOutcome { already_present: false })
    }

    pub fn unpublish(&self, guid: &Guid, surl: &Surl) -> Result<UnpublishOutcome> {
        let mut journal = self.journal.lock();
        let mut state = self.state.write();
        if state.by_surl.get(surl) != Some(guid) {
            return Ok(UnpublishOutcome { already_absent: true });
        }
        let m = RlsMutation::Unpublish {
            seq: state.seq + 1,
            guid: guid.clone(),
            surl: surl.clone(),
        };
        self.commit(&mut journal, &mut state, m)?;
        Ok(UnpublishOutcome { already_absent: false })
    }

    pub fn lookup_guid(&self, guid: &Guid) -> Result<BTreeSet<Surl>> {
        self.state
            .read()
            .by_guid
            .get(guid)
            .cloned()
            .ok_or_else(|| GvfError::noent(format!("guid {guid} is not published")))
    }

    pub fn lookup_surl(&self, surl: &Surl) -> Result<Guid> {
        self.state
            .read()
            .by_surl
            .get(surl)
            .cloned()
            .ok_or_else(|| GvfError::noent(format!("{surl} is not published")))
    }

    /// Mappings with guid strictly greater than `cursor`, in guid order.
    pub fn list_all(&self, cursor: Option<&Guid>, page_size: usize) -> Result<RlsPage> {
        if page_size == 0 {
            return Err(GvfError::badreq("page_size must be positive"));
        }
        let state = self.state.read();
        let iter: Box<dyn Iterator<Item = (&Guid, &BTreeSet<Surl>)>> = match cursor {
            Some(c) => Box::new(state.by_guid.range((std::ops::Bound::Excluded(c.clone()), std::ops::Bound::Unbounded))),
            None => Box::new(state.by_guid.iter()),
        };
        let mut mappings: Vec<RlsMapping> = iter
            .take(page_size + 1)
            .map(|(g, s)| RlsMapping {
                guid: g.clone(),
                surls: s.clone(),
            })
            .collect();
        let next_cursor = if mappings.len() > page_size {
            mappings.truncate(page_size);
            mappings.last().map(|m| m.guid.clone())
        } else {
            None
        };
        Ok(RlsPage { mappings, next_cursor })
    }

    /// Number of mutations ever applied (publishes plus unpublishes).
    pub fn mutation_count(&self) -> u64 {
        self.state.read().seq
    }

    pub fn snapshot_now(&self) -> Result<()> {
        let mut journal = self.journal.lock();
        let state = self.state.read();
        match journal.as_mut() {
            Some(j) => j.snapshot(&state.snapshot()),
            None => Ok(()),
        }
    }

    pub fn image(&self) -> BTreeMap<Guid, BTreeSet<Surl>> {
        self.state.read().by_guid.clone()
    }
}

/// What the sync worker and the CLI need from an RLS, local or remote.
pub trait RlsService: Send + Sync {
    fn publish(&self, guid: &Guid, surl: &Surl) -> Result<PublishOutcome>;
    fn unpublish(&self, guid: &Guid, surl: &Surl) -> Result<UnpublishOutcome>;
    fn lookup_guid(&self, guid: &Guid) -> Result<BTreeSet<Surl>>;
    fn lookup_surl(&self, surl: &Surl) -> Result<Guid>;
    fn list_all(&self, cursor: Option<&Guid>, page_size: usize) -> Result<RlsPage>;
    fn mutation_count(&self) -> Result<u64>;
}

impl RlsService for RlsStore {
    fn publish(&self, g: &Guid, s: &Surl) -> Result<PublishOutcome> {
        RlsStore::publish(self, g, s)
    }
    fn unpublish(&self, g: &Guid, s: &Surl) -> Result<UnpublishOutcome> {
        RlsStore::unpublish(self, g, s)
    }
    fn lookup_guid(&self, g: &Guid) -> Result<BTreeSet<Surl>> {
        RlsStore::lookup_guid(self, g)
    }
    fn lookup_surl(&self, s: &Surl) -> Result<Guid> {
        RlsStore::lookup_surl(self, s)
    }
    fn list_all(&self, c: Option<&Guid>, n: usize) -> Result<RlsPage> {
        RlsStore::list_all(self, c, n)
    }
    fn mutation_count(&self) -> Result<u64> {
        Ok(RlsStore::mutation_count(self))
    }
}

/// Iterates every mapping by following the page cursor.
pub fn list_everything(rls: &dyn RlsService, page_size: usize) -> Result<Vec<RlsMapping>> {
    let mut out = Vec::new();
    let mut cursor: Option<Guid> = None;
    loop {
        let page = rls.list_all(cursor.as_ref(), page_size)?;
        out.extend(page.mappings);
        match page.next_cursor {
            Some(c) => cursor = Some(c),
            None => return Ok(out),
        }
    }
}

/// Serves `rls.*`. Lookups are open to anyone, authenticated or not.
pub struct RlsHandler {
    store: Arc<dyn RlsService>,
    auth: Authenticator,
    admin_only: bool,
}

impl RlsHandler {
    pub fn new(store: Arc<dyn RlsService>, auth: Authenticator, admin_only: bool) -> Self {
        RlsHandler { store, auth, admin_only }
    }

    fn dispatch(&self, req: &Request) -> Result<serde_json::Value> {
        #[derive(Deserialize)]
        struct PairArgs {
            guid: Guid,
            surl: Surl,
        }
        #[derive(Deserialize)]
        struct GuidArgs {
            guid: Guid,
        }
        #[derive(Deserialize)]
        struct SurlArgs {
            surl: Surl,
        }
        #[derive(Deserialize)]
        struct ListArgs {
            #[serde(default)]
            cursor: Option<Guid>,
            #[serde(default = "default_page")]
            page_size: usize,
        }
        fn default_page() -> usize {
            256
        }
        fn to<T: Serialize>(v: &T) -> Result<serde_json::Value> {
            Ok(serde_json::to_value(v)?)
        }
        match req.op.as_str() {
            "rls.publish" | "rls.unpublish" => {
                if self.admin_only {
                    self.auth.require_service(req.auth.as_ref())?;
                } else {
                    self.auth.verify_opt(req.auth.as_ref())?;
                }
                let a: PairArgs = req.parse_args()?;
                if req.op == "rls.publish" {
                    to(&self.store.publish(&a.guid, &a.surl)?)
                } else {
                    to(&self.store.unpublish(&a.guid, &a.surl)?)
                }
            }
            "rls.lookup_guid" => {
                let a: GuidArgs = req.parse_args()?;
                to(&self.store.lookup_guid(&a.guid)?)
            }
            "rls.lookup_surl" => {
                let a: SurlArgs = req.parse_args()?;
                to(&self.store.lookup_surl(&a.surl)?)
            }
            "rls.list" => {
                let a: ListArgs = req.parse_args()?;
                to(&self.store.list_all(a.cursor.as_ref(), a.page_size)?)
            }
            "rls.stats" => Ok(json!({"mutations": self.store.mutation_count()?})),
            other => Err(GvfError::badreq(format!("unknown op {other}"))),
        }
    }
}

impl Handler for RlsHandler {
    fn handle(&self, req: Request, _conn: &ConnInfo) -> Reply {
        Reply::from_result(self.dispatch(&req))
    }
}

pub struct RemoteRls {
    client: Client,
    cred: Option<Credential>,
}

impl RemoteRls {
    /// `cred` is needed only for publish/unpublish.
    pub fn new(addr: &str, cred: Option<Credential>) -> Self {
        RemoteRls {
            client: Client::new(addr),
            cred,
        }
    }
}

impl RlsService for RemoteRls {
    fn publish(&self, guid: &Guid, surl: &Surl) -> Result<PublishOutcome> {
        self.client
            .call_typed("rls.publish", self.cred.as_ref(), json!({"guid": guid, "surl": surl}))
    }
    fn unpublish(&self, guid: &Guid, surl: &Surl) -> Result<UnpublishOutcome> {
        self.client
            .call_typed("rls.unpublish", self.cred.as_ref(), json!({"guid": guid, "surl": surl}))
    }
    fn lookup_guid(&self, guid: &Guid) -> Result<BTreeSet<Surl>> {
        self.client.call_typed("rls.lookup_guid", None, json!({"guid": guid}))
    }
    fn lookup_surl(&self, surl: &Surl) -> Result<Guid> {
        self.client.call_typed("rls.lookup_surl", None, json!({"surl": surl}))
    }
    fn list_all(&self, cursor: Option<&Guid>, page_size: usize) -> Result<RlsPage> {
        self.client
            .call_typed("rls.list", None, json!({"cursor": cursor, "page_size": page_size}))
    }
    fn mutation_count(&self) -> Result<u64> {
        let v: serde_json::Value = self.client.call_typed("rls.stats", None, json!({}))?;
        v["mutations"]
            .as_u64()
            .ok_or_else(|| GvfError::unavail("rls.stats returned no count"))
    }
}
