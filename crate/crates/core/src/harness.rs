//! Scenario harness: boots a loopback federation, runs a scripted workload with
//! fault injection, and reports per-step outcomes plus transfer accounting.

use crate::broker::BrokerClient;
use crate::config::{ClockMode, Deployment};
use crate::daemon::{self, Component, Federation, Topology, TopologyGateway, TopologySite};
use crate::error::{ErrorCode, GvfError, Result};
use crate::gateway::client::GatewayClient;
use crate::gateway::{Metrics, TransferRequest};
use crate::mcat::{DataName, Grants, Subject};
use crate::rls::{RemoteRls, RlsService, Surl};
use crate::sync::{derive_guid, full_rescan};
use crate::wire::Credential;
use parking_lot::Mutex;
use rand::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    /// The first site is the master.
    pub sites: Vec<TopologySite>,
    /// Subject → local user name.
    #[serde(default)]
    pub subjects: BTreeMap<String, String>,
    #[serde(default)]
    pub auto_map: bool,
    pub gateway: TopologyGateway,
    #[serde(default)]
    pub workload: Vec<Step>,
    #[serde(default)]
    pub faults: Vec<Fault>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Step {
    /// Acting subject; omitted for operator steps, which run as the service identity.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub actor: Option<String>,
    pub op: String,
    #[serde(default)]
    pub args: Value,
    pub expect: Expect,
    /// Consecutive steps sharing a group run concurrently.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parallel_group: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expect {
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorCode>,
    /// Fields that must appear in the step's detail with these values.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<Value>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FaultAction {
    Kill,
    Restart,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Fault {
    /// Applied just before this step index runs.
    pub at_step: usize,
    pub action: FaultAction,
    /// `vault:<id>`, `site:<id>`, `rls`, `driver` or `gateway`.
    pub target: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub actor: Option<String>,
    pub op: String,
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorCode>,
    pub detail: Value,
    pub met: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: String,
    pub mode: String,
    pub seed: u64,
    pub started: u64,
    pub finished: u64,
    pub steps: Vec<StepOutcome>,
    pub passed: bool,
    pub metrics: Metrics,
    /// Delivered bytes by the site whose vault they were read from, for gateway
    /// and broker reads alike.
    pub bytes_served_by_site: BTreeMap<String, u64>,
    pub bytes_delivered: u64,
    pub centralization_ratio: f64,
}

impl RunReport {
    /// The report with its wall-clock fields cleared, for run-to-run comparison.
    pub fn without_timestamps(&self) -> RunReport {
        RunReport {
            started: 0,
            finished: 0,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Mode {
    Inproc,
    /// One `serve` process per component, launched from this executable.
    Subprocess { exe: PathBuf },
}

pub struct RunOptions {
    pub mode: Mode,
    pub seed: Option<u64>,
    /// Directory for daemon state; a temporary one when absent.
    pub workdir: Option<PathBuf>,
}

const OPS: &[&str] = &[
    "put",
    "get",
    "rm",
    "replicate",
    "set_acl",
    "ls",
    "mkuser",
    "rls_lookup",
    "sync",
    "rescan",
    "srm_get",
    "srm_put",
    "srm_pin",
    "srm_unpin",
    "srm_reserve",
    "srm_release",
    "srm_ls",
    "clock_advance",
    "metrics",
];

impl Scenario {
    pub fn load(path: &Path) -> Result<Scenario> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GvfError::badreq(format!("cannot read scenario {}: {e}", path.display())))?;
        Scenario::parse(&text).map_err(|e| GvfError::badreq(format!("{}: {}", path.display(), e.message)))
    }

    pub fn parse(text: &str) -> Result<Scenario> {
        let s: Scenario = serde_json::from_str(text).map_err(|e| GvfError::badreq(format!("scenario: {e}")))?;
        s.validate()?;
        Ok(s)
    }

    pub fn topology(&self) -> Topology {
        Topology {
            sites: self.sites.clone(),
            users: self.subjects.clone(),
            auto_map: self.auto_map,
            gateway: Some(TopologyGateway {
                clock: ClockMode::Logical,
                ..self.gateway.clone()
            }),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(GvfError::badreq(m));
        if self.sites.is_empty() {
            return bad("scenario declares no sites".into());
        }
        let sites: BTreeSet<&str> = self.sites.iter().map(|s| s.site_id.as_str()).collect();
        let vaults: BTreeSet<&str> = self.sites.iter().flat_map(|s| s.vaults.keys().map(String::as_str)).collect();
        if !sites.contains(self.gateway.site_id.as_str()) {
            return bad(format!("gateway site {} is not declared", self.gateway.site_id));
        }
        for (s, _) in &self.subjects {
            Subject::parse(s)?;
        }
        for (i, st) in self.workload.iter().enumerate() {
            let at = |m: &str| GvfError::badreq(format!("step {i} ({}): {m}", st.op));
            if !OPS.contains(&st.op.as_str()) {
                return Err(at("unknown op"));
            }
            if let Some(a) = &st.actor {
                if !self.subjects.contains_key(a) && !self.auto_map {
                    return Err(at(&format!("undeclared subject {a}")));
                }
                Subject::parse(a).map_err(|_| at("malformed actor"))?;
            }
            if let Some(site) = st.args.get("site").and_then(Value::as_str) {
                if !sites.contains(site) {
                    return Err(at(&format!("undeclared site {site}")));
                }
            }
            if let Some(v) = st.args.get("vault").and_then(Value::as_str) {
                if !vaults.contains(v) {
                    return Err(at(&format!("undeclared vault {v}")));
                }
            }
            if let Some(g) = st.args.get("grants").and_then(Value::as_object) {
                for s in g.keys() {
                    if !self.subjects.contains_key(s) {
                        return Err(at(&format!("grant names undeclared subject {s}")));
                    }
                }
            }
            if st.expect.status.is_empty() {
                return Err(at("expectation has no status"));
            }
        }
        for f in &self.faults {
            let c: Component = f.target.parse()?;
            let known = match &c {
                Component::Vault(v) => vaults.contains(v.as_str()),
                Component::Site(s) => sites.contains(s.as_str()),
                Component::Driver => self.gateway.driver_remote,
                Component::Rls | Component::Gateway => true,
            };
            if !known {
                return bad(format!("fault names unknown target {}", f.target));
            }
            if f.at_step > self.workload.len() {
                return bad(format!("fault at step {} is past the workload", f.at_step));
            }
        }
        Ok(())
    }
}

/// Deterministic file content for a dataname under a run seed.
pub fn content_for(seed: u64, dataname: &str, size: usize) -> Vec<u8> {
    let mix = crate::digest::fnv1a_128(dataname.as_bytes()) as u64;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ mix);
    let mut out = vec![0u8; size];
    rng.fill_bytes(&mut out);
    out
}

/// Running daemons, in this process or as children.
enum Daemons {
    Inproc(Federation),
    Subprocess {
        dep: Deployment,
        exe: PathBuf,
        config: PathBuf,
        logs: PathBuf,
        children: BTreeMap<Component, Child>,
    },
}

fn component_addr(dep: &Deployment, c: &Component) -> Option<String> {
    match c {
        Component::Vault(v) => dep.vault(v).map(|v| v.listen.clone()),
        Component::Site(s) => dep.site(s).map(|s| s.listen.clone()),
        Component::Rls => dep.rls.as_ref().map(|r| r.listen.clone()),
        Component::Driver => dep.gateway.as_ref().and_then(|g| g.driver_listen.clone()),
        Component::Gateway => dep.gateway.as_ref().map(|g| g.listen.clone()),
    }
}

/// Waits until something accepts connections at `addr`.
pub fn wait_listening(addr: &str, timeout: Duration) -> Result<()> {
    let deadline = Instant::now() + timeout;
    loop {
        if std::net::TcpStream::connect(addr).is_ok() {
            return Ok(());
        }
        if Instant::now() >= deadline {
            return Err(GvfError::unavail(format!("nothing listening on {addr} after {timeout:?}")));
        }
        std::thread::sleep(Duration::from_millis(20));
    }
}

impl Daemons {
    fn start(dep: &Deployment, mode: &Mode, root: &Path) -> Result<Daemons> {
        match mode {
            Mode::Inproc => Ok(Daemons::Inproc(Federation::start(dep.clone())?)),
            Mode::Subprocess { exe } => {
                let config = root.join("deployment.json");
                dep.save(&config)?;
                let logs = root.join("logs");
                std::fs::create_dir_all(&logs)?;
                let mut d = Daemons::Subprocess {
                    dep: dep.clone(),
                    exe: exe.clone(),
                    config,
                    logs,
                    children: BTreeMap::new(),
                };
                for c in daemon::components(dep) {
                    d.restart(&c)?;
                }
                Ok(d)
            }
        }
    }

    fn kill(&mut self, c: &Component) {
        match self {
            Daemons::Inproc(f) => f.stop_component(c),
            Daemons::Subprocess { children, .. } => {
                if let Some(mut ch) = children.remove(c) {
                    let _ = ch.kill();
                    let _ = ch.wait();
                }
            }
        }
    }

    fn restart(&mut self, c: &Component) -> Result<()> {
        match self {
            Daemons::Inproc(f) => f.start_component(c),
            Daemons::Subprocess {
                dep,
                exe,
                config,
                logs,
                children,
            } => {
                if children.contains_key(c) {
                    return Ok(());
                }
                let log = std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(logs.join(format!("{}.log", c.to_string().replace(':', "_"))))?;
                let child = Command::new(&*exe)
                    .arg("serve")
                    .arg("--config")
                    .arg(&*config)
                    .arg(c.to_string())
                    .stdin(Stdio::null())
                    .stdout(log.try_clone()?)
                    .stderr(log)
                    .spawn()?;
                children.insert(c.clone(), child);
                let addr = component_addr(dep, c).ok_or_else(|| GvfError::badreq(format!("no address for {c}")))?;
                wait_listening(&addr, Duration::from_secs(20))
            }
        }
    }

    fn shutdown(self) {
        match self {
            Daemons::Inproc(f) => f.shutdown(),
            Daemons::Subprocess { mut children, .. } => {
                while let Some((_, mut ch)) = children.pop_last() {
                    let _ = ch.kill();
                    let _ = ch.wait();
                }
            }
        }
    }
}

/// Executes steps against a running federation.
struct Runner<'a> {
    dep: &'a Deployment,
    seed: u64,
    master_site: String,
    /// Named pin and space tokens.
    tokens: Mutex<HashMap<String, String>>,
    served: Mutex<BTreeMap<String, u64>>,
    delivered: Mutex<u64>,
}

type StepResult = Result<(String, Option<ErrorCode>, Value)>;

fn arg<'v>(args: &'v Value, key: &str) -> Result<&'v Value> {
    args.get(key).ok_or_else(|| GvfError::badreq(format!("missing argument {key}")))
}

fn str_arg<'v>(args: &'v Value, key: &str) -> Result<&'v str> {
    arg(args, key)?
        .as_str()
        .ok_or_else(|| GvfError::badreq(format!("argument {key} must be a string")))
}

fn u64_arg(args: &Value, key: &str) -> Result<u64> {
    arg(args, key)?
        .as_u64()
        .ok_or_else(|| GvfError::badreq(format!("argument {key} must be a non-negative integer")))
}

fn ok(detail: Value) -> StepResult {
    Ok(("ok".to_string(), None, detail))
}

impl Runner<'_> {
    fn cred(&self, actor: Option<&str>) -> Credential {
        let auth = self.dep.authenticator();
        match actor {
            Some(a) => auth.credential_for(a),
            None => auth.service_credential(),
        }
    }

    fn broker(&self, actor: Option<&str>, args: &Value) -> Result<BrokerClient> {
        let site = args.get("site").and_then(Value::as_str).unwrap_or(&self.master_site);
        let sc = self
            .dep
            .site(site)
            .ok_or_else(|| GvfError::badreq(format!("unknown site {site}")))?;
        Ok(BrokerClient::new(&sc.listen, self.cred(actor)))
    }

    fn gateway(&self, actor: Option<&str>) -> GatewayClient {
        let g = self.dep.gateway.as_ref().expect("scenario has a gateway");
        GatewayClient::new(&g.listen, Some(self.cred(actor)))
    }

    fn surl(&self, dataname: &str) -> Result<String> {
        let g = self.dep.gateway.as_ref().expect("scenario has a gateway");
        Ok(Surl::at(&g.listen, &g.site_id, DataName::parse(dataname)?)?.to_string())
    }

    fn credit(&self, site: &str, bytes: u64) {
        *self.served.lock().entry(site.to_string()).or_default() += bytes;
        *self.delivered.lock() += bytes;
    }

    fn content(&self, args: &Value) -> Result<Vec<u8>> {
        let dn = str_arg(args, "dataname")?;
        if let Some(text) = args.get("content").and_then(Value::as_str) {
            return Ok(text.as_bytes().to_vec());
        }
        Ok(content_for(self.seed, dn, u64_arg(args, "size")? as usize))
    }

    fn token(&self, name: &str) -> Result<String> {
        self.tokens
            .lock()
            .get(name)
            .cloned()
            .ok_or_else(|| GvfError::badreq(format!("no token named {name}")))
    }

    fn remember(&self, args: &Value, token: &str) {
        if let Some(name) = args.get("as").and_then(Value::as_str) {
            self.tokens.lock().insert(name.to_string(), token.to_string());
        }
    }

    fn transfer_outcome(&self, r: &TransferRequest, extra: Value) -> StepResult {
        let mut detail = json!({"size": r.size});
        if let (Some(o), Some(e)) = (detail.as_object_mut(), extra.as_object()) {
            o.extend(e.clone());
        }
        Ok((r.state.as_str().to_string(), r.error, detail))
    }

    fn exec(&self, step: &Step) -> StepResult {
        let actor = step.actor.as_deref();
        let a = &step.args;
        match step.op.as_str() {
            "put" => {
                let data = self.content(a)?;
                let e = self.broker(actor, a)?.put(str_arg(a, "dataname")?, &data)?;
                ok(json!({"size": e.size, "digest": e.digest}))
            }
            "get" => {
                let dn = str_arg(a, "dataname")?;
                let (out, data) = self.broker(actor, a)?.get(dn)?;
                let intact = crate::digest::sha256_hex(&data) == out.digest;
                self.credit(&out.site_id, data.len() as u64);
                ok(json!({"size": data.len(), "site_id": out.site_id, "vault_id": out.vault_id, "intact": intact}))
            }
            "rm" => {
                let r = self.broker(actor, a)?.rm(str_arg(a, "dataname")?)?;
                ok(json!({"blobs_deleted": r.blobs_deleted, "orphans": r.orphans}))
            }
            "replicate" => {
                let e = self.broker(actor, a)?.replicate(str_arg(a, "dataname")?, str_arg(a, "vault")?)?;
                ok(json!({"replicas": e.online_replicas().count()}))
            }
            "set_acl" => {
                let grants: Grants = serde_json::from_value(arg(a, "grants")?.clone())
                    .map_err(|e| GvfError::badreq(format!("grants: {e}")))?;
                self.broker(actor, a)?.set_acl(str_arg(a, "dataname")?, &grants)?;
                ok(json!({}))
            }
            "ls" => {
                let items = self.broker(actor, a)?.ls(str_arg(a, "prefix")?)?;
                let readable = items.iter().filter(|i| i.readable).count();
                ok(json!({"count": items.len(), "readable": readable}))
            }
            "mkuser" => {
                let v = self
                    .broker(actor, a)?
                    .mkuser(str_arg(a, "subject")?, a.get("local").and_then(Value::as_str))?;
                ok(v)
            }
            "rls_lookup" => {
                let rc = self.dep.rls.as_ref().expect("topology has an rls");
                // Lookups carry no credential at all: the RLS has no permissions.
                let rls = RemoteRls::new(&rc.listen, None);
                let guid = derive_guid(&DataName::parse(str_arg(a, "dataname")?)?);
                let surls = rls.lookup_guid(&guid)?;
                ok(json!({"guid": guid.as_str(), "surls": surls.len()}))
            }
            "sync" => {
                let st = daemon::sync_once(self.dep)?;
                ok(json!({"published": st.stats.published, "unpublished": st.stats.unpublished, "skipped": st.stats.skipped}))
            }
            "rescan" => {
                let auth = self.dep.authenticator();
                let mcat = crate::mcat::RemoteCatalog::new(&self.dep.master().listen, auth.service_credential());
                let rls = RemoteRls::new(&self.dep.rls.as_ref().expect("rls").listen, None);
                let gw = &self.dep.gateway.as_ref().expect("gateway").listen;
                let r = full_rescan(&mcat, &rls, gw)?;
                ok(json!({"added": r.added, "removed": r.removed, "agreed": r.agreed}))
            }
            "srm_get" => {
                let c = self.gateway(actor);
                let protocols: Vec<String> = serde_json::from_value(
                    a.get("protocols").cloned().unwrap_or_else(|| json!(["cache-http"])),
                )
                .map_err(|e| GvfError::badreq(format!("protocols: {e}")))?;
                let protocols: Vec<&str> = protocols.iter().map(String::as_str).collect();
                let pin = a.get("pin_lifetime").and_then(Value::as_u64);
                let r = c.get(&self.surl(str_arg(a, "dataname")?)?, &protocols, pin)?;
                if let Some(p) = &r.pin {
                    self.remember(a, p);
                }
                let fetch = a.get("fetch").and_then(Value::as_bool).unwrap_or(true);
                if r.turl.is_none() || !fetch {
                    return self.transfer_outcome(&r, json!({}));
                }
                let scheme = r.turl.as_deref().and_then(|t| t.split_once("://")).map(|p| p.0.to_string());
                let data = c.fetch(&r)?;
                let intact = r.digest.as_deref() == Some(crate::digest::sha256_hex(&data).as_str());
                let r = c.status(&r.request_id)?;
                self.transfer_outcome(&r, json!({"scheme": scheme, "intact": intact}))
            }
            "srm_put" => {
                let c = self.gateway(actor);
                let data = self.content(a)?;
                let hint = a.get("size_hint").and_then(Value::as_u64).unwrap_or(data.len() as u64);
                let space = match a.get("space").and_then(Value::as_str) {
                    Some(n) => Some(self.token(n)?),
                    None => None,
                };
                let r = c.put(&self.surl(str_arg(a, "dataname")?)?, &["cache-http"], hint, space.as_deref())?;
                if r.turl.is_none() {
                    return self.transfer_outcome(&r, json!({}));
                }
                let r = c.upload(&r, &data)?;
                self.transfer_outcome(&r, json!({}))
            }
            "srm_pin" => {
                let p = self
                    .gateway(actor)
                    .pin(&self.surl(str_arg(a, "dataname")?)?, u64_arg(a, "lifetime")?)?;
                self.remember(a, &p.token);
                ok(json!({"expires": p.expires}))
            }
            "srm_unpin" => {
                self.gateway(actor).unpin(&self.token(str_arg(a, "pin")?)?)?;
                ok(json!({}))
            }
            "srm_reserve" => {
                let r = self.gateway(actor).reserve(u64_arg(a, "bytes")?, u64_arg(a, "lifetime")?)?;
                self.remember(a, &r.token);
                ok(json!({"bytes": r.bytes, "expires": r.expires}))
            }
            "srm_release" => {
                self.gateway(actor).release(&self.token(str_arg(a, "token")?)?)?;
                ok(json!({}))
            }
            "srm_ls" => {
                let items = self.gateway(actor).ls(str_arg(a, "prefix")?)?;
                let readable = items.iter().filter(|i| i.readable).count();
                ok(json!({"count": items.len(), "readable": readable}))
            }
            "clock_advance" => {
                let now = self.gateway(actor).clock_advance(u64_arg(a, "secs")?)?;
                ok(json!({"now": now}))
            }
            "metrics" => ok(serde_json::to_value(self.gateway(None).metrics()?)?),
            other => Err(GvfError::badreq(format!("unknown op {other}"))),
        }
    }

    fn run_step(&self, index: usize, step: &Step) -> StepOutcome {
        let (status, error, detail) = match self.exec(step) {
            Ok(r) => r,
            Err(e) => ("error".to_string(), Some(e.code), json!({"message": e.message})),
        };
        let met = status == step.expect.status
            && step.expect.error.is_none_or(|e| Some(e) == error)
            && step.expect.detail.as_ref().is_none_or(|d| detail_matches(d, &detail));
        if !met {
            log::warn!("step {index} ({}) expected {:?}, got {status} {error:?} {detail}", step.op, step.expect);
        }
        StepOutcome {
            index,
            actor: step.actor.clone(),
            op: step.op.clone(),
            status,
            error,
            // Error messages carry addresses and ids that vary between runs.
            detail: if error.is_some() && detail.get("message").is_some() {
                json!({})
            } else {
                detail
            },
            met,
        }
    }
}

/// Every field of `expected` is present in `actual` with the same value.
pub fn detail_matches(expected: &Value, actual: &Value) -> bool {
    match (expected, actual) {
        (Value::Object(e), Value::Object(a)) => e
            .iter()
            .all(|(k, v)| a.get(k).is_some_and(|av| detail_matches(v, av))),
        (e, a) => e == a,
    }
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Consecutive runs of steps: singletons, or maximal same-`parallel_group` runs.
fn batches(workload: &[Step]) -> Vec<std::ops::Range<usize>> {
    let mut out: Vec<std::ops::Range<usize>> = Vec::new();
    for (i, s) in workload.iter().enumerate() {
        match (out.last_mut(), &s.parallel_group) {
            (Some(r), Some(g)) if workload[r.start].parallel_group.as_ref() == Some(g) => r.end = i + 1,
            _ => out.push(i..i + 1),
        }
    }
    out
}

pub fn run(scenario: &Scenario, opts: &RunOptions) -> Result<RunReport> {
    scenario.validate()?;
    let seed = opts.seed.unwrap_or(scenario.seed);
    let tmp;
    let root = match &opts.workdir {
        Some(p) => {
            std::fs::create_dir_all(p)?;
            p.clone()
        }
        None => {
            tmp = tempfile::tempdir()?;
            tmp.path().to_path_buf()
        }
    };
    let started = unix_now();
    let dep = scenario.topology().deployment(&root)?;
    let mut daemons = Daemons::start(&dep, &opts.mode, &root)?;
    let runner = Runner {
        dep: &dep,
        seed,
        master_site: dep.master().site_id.clone(),
        tokens: Mutex::new(HashMap::new()),
        served: Mutex::new(BTreeMap::new()),
        delivered: Mutex::new(0),
    };
    let mut steps = Vec::with_capacity(scenario.workload.len());
    let mut fault_error = None;
    for batch in batches(&scenario.workload) {
        for f in scenario.faults.iter().filter(|f| batch.contains(&f.at_step)) {
            let c: Component = f.target.parse()?;
            log::info!("fault before step {}: {:?} {c}", f.at_step, f.action);
            match f.action {
                FaultAction::Kill => daemons.kill(&c),
                FaultAction::Restart => {
                    if let Err(e) = daemons.restart(&c) {
                        fault_error.get_or_insert(e);
                    }
                }
            }
        }
        let slice = &scenario.workload[batch.clone()];
        if slice.len() == 1 {
            steps.push(runner.run_step(batch.start, &slice[0]));
        } else {
            let outs: Vec<StepOutcome> = std::thread::scope(|s| {
                let hs: Vec<_> = slice
                    .iter()
                    .enumerate()
                    .map(|(k, st)| {
                        let r = &runner;
                        s.spawn(move || r.run_step(batch.start + k, st))
                    })
                    .collect();
                hs.into_iter().map(|h| h.join().expect("step thread")).collect()
            });
            steps.extend(outs);
        }
    }
    let metrics = runner.gateway(None).metrics().unwrap_or_default();
    daemons.shutdown();
    if let Some(e) = fault_error {
        return Err(e);
    }

    let mut served = runner.served.lock().clone();
    for (site, b) in &metrics.bytes_served_by_site {
        *served.entry(site.clone()).or_default() += b;
    }
    let delivered = *runner.delivered.lock() + metrics.bytes_delivered;
    let total: u64 = served.values().sum();
    let master = served.get(&runner.master_site).copied().unwrap_or(0);
    Ok(RunReport {
        scenario: scenario.name.clone(),
        mode: match opts.mode {
            Mode::Inproc => "inproc".into(),
            Mode::Subprocess { .. } => "subprocess".into(),
        },
        seed,
        started,
        finished: unix_now(),
        passed: steps.iter().all(|s| s.met),
        steps,
        metrics,
        bytes_served_by_site: served,
        bytes_delivered: delivered,
        centralization_ratio: if total == 0 { 0.0 } else { master as f64 / total as f64 },
    })
}
