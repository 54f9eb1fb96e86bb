//! Boots daemons from a deployment description, either one per process
//! (`gvf serve`) or all together in one process.

use crate::auth::Authenticator;
use crate::broker::{Broker, BrokerHandler, BrokerOptions, VaultRef};
use crate::config::{Deployment, SiteRole};
use crate::error::{GvfError, Result};
use crate::gateway::cache::DiskCache;
use crate::gateway::clock::Clock;
use crate::gateway::driver::{BrokerBackend, DirectDriver, DriverBoundary, DriverHandler, RemoteDriver, StagedDriver};
use crate::gateway::http::HttpServer;
use crate::gateway::{Gateway, GatewayHandler, GatewayOptions};
use crate::mcat::{Catalog, CatalogHandler, CatalogService, RemoteCatalog, Subject};
use crate::rls::{RemoteRls, RlsHandler, RlsService, RlsStore};
use crate::sync::{SyncState, SyncWorker};
use crate::vault::{BlobService, RemoteVault, VaultHandler, VaultStore};
use crate::wire::{Router, Server};
use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

/// A daemon role named on the command line.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum Component {
    Vault(String),
    Site(String),
    Rls,
    Driver,
    Gateway,
}

impl std::str::FromStr for Component {
    type Err = GvfError;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.split_once(':') {
            Some(("vault", id)) => Component::Vault(id.to_string()),
            Some(("site", id)) => Component::Site(id.to_string()),
            None if s == "rls" => Component::Rls,
            None if s == "driver" => Component::Driver,
            None if s == "gateway" => Component::Gateway,
            _ => return Err(GvfError::badreq(format!("unknown component {s:?}"))),
        })
    }
}

impl std::fmt::Display for Component {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Component::Vault(id) => write!(f, "vault:{id}"),
            Component::Site(id) => write!(f, "site:{id}"),
            Component::Rls => f.write_str("rls"),
            Component::Driver => f.write_str("driver"),
            Component::Gateway => f.write_str("gateway"),
        }
    }
}

/// Every component a deployment describes, in boot order.
pub fn components(dep: &Deployment) -> Vec<Component> {
    let mut out: Vec<Component> = dep.vaults.iter().map(|v| Component::Vault(v.vault_id.clone())).collect();
    out.push(Component::Site(dep.master().site_id.clone()));
    out.extend(
        dep.sites
            .iter()
            .filter(|s| s.role == SiteRole::Server)
            .map(|s| Component::Site(s.site_id.clone())),
    );
    if dep.rls.is_some() {
        out.push(Component::Rls);
    }
    if let Some(g) = &dep.gateway {
        if g.driver_remote {
            out.push(Component::Driver);
        }
        out.push(Component::Gateway);
    }
    out
}

/// A running component. Dropping it stops it.
pub enum Daemon {
    Plain(Server),
    Site {
        server: Server,
        broker: Arc<Broker>,
        catalog: Option<Arc<Catalog>>,
    },
    Rls {
        server: Server,
        store: Arc<RlsStore>,
    },
    Gateway {
        server: Server,
        http: HttpServer,
        gateway: Arc<Gateway>,
    },
}

impl Daemon {
    pub fn shutdown(self) {
        match self {
            Daemon::Plain(s) | Daemon::Site { server: s, .. } | Daemon::Rls { server: s, .. } => s.shutdown(),
            Daemon::Gateway { server, http, .. } => {
                server.shutdown();
                http.shutdown();
            }
        }
    }

    /// Blocks until the daemon stops accepting.
    pub fn wait(self) {
        match self {
            Daemon::Plain(s) | Daemon::Site { server: s, .. } | Daemon::Rls { server: s, .. } => s.wait(),
            Daemon::Gateway { server, http: _http, .. } => server.wait(),
        }
    }
}

pub fn start(dep: &Deployment, c: &Component) -> Result<Daemon> {
    match c {
        Component::Vault(id) => start_vault(dep, id).map(Daemon::Plain),
        Component::Site(id) => start_site(dep, id),
        Component::Rls => start_rls(dep),
        Component::Driver => start_driver(dep).map(Daemon::Plain),
        Component::Gateway => start_gateway(dep),
    }
}

fn bind(addr: &str, handler: Arc<dyn crate::wire::Handler>) -> Result<Server> {
    Server::bind(addr, handler).map_err(|e| GvfError::unavail(format!("cannot listen on {addr}: {e}")))
}

pub fn start_vault(dep: &Deployment, id: &str) -> Result<Server> {
    let vc = dep
        .vault(id)
        .ok_or_else(|| GvfError::badreq(format!("no vault {id} in the deployment")))?;
    let store: Arc<dyn BlobService> = Arc::new(VaultStore::open(&vc.root_dir, vc.capacity)?);
    bind(&vc.listen, Arc::new(VaultHandler::new(store, dep.authenticator())))
}

fn vault_refs(dep: &Deployment, auth: &Authenticator) -> Vec<VaultRef> {
    dep.vaults
        .iter()
        .map(|v| VaultRef {
            vault_id: v.vault_id.clone(),
            site_id: v.site_id.clone(),
            service: Arc::new(RemoteVault::new(&v.listen, auth.service_credential())) as Arc<dyn BlobService>,
        })
        .collect()
}

pub fn start_site(dep: &Deployment, id: &str) -> Result<Daemon> {
    let sc = dep
        .site(id)
        .ok_or_else(|| GvfError::badreq(format!("no site {id} in the deployment")))?;
    let auth = dep.authenticator();
    let (catalog, local): (Arc<dyn CatalogService>, Option<Arc<Catalog>>) = match sc.role {
        SiteRole::Master => {
            let dir = sc.mcat_dir.as_ref().expect("validated: master has mcat_dir");
            let c = Arc::new(Catalog::open(dir, dep.fsync)?);
            for s in &dep.sites {
                for (subject, local) in &s.subject_map {
                    c.add_user(&Subject::parse(subject)?, local)?;
                }
            }
            (c.clone(), Some(c))
        }
        SiteRole::Server => {
            let master = sc.master_addr.as_deref().expect("validated: server knows master");
            (Arc::new(RemoteCatalog::new(master, auth.service_credential())), None)
        }
    };
    let broker = Arc::new(Broker::new(
        BrokerOptions {
            site_id: sc.site_id.clone(),
            master_site_id: dep.master().site_id.clone(),
            local_vaults: sc.local_vaults.clone(),
            auto_map: dep.auto_map,
            lock_wait: Duration::from_secs(10),
        },
        auth.clone(),
        catalog.clone(),
        vault_refs(dep, &auth),
    ));
    let mut router = Router::new().route("srb.", Arc::new(BrokerHandler::new(broker.clone())));
    if local.is_some() {
        router = router.route("mcat.", Arc::new(CatalogHandler::new(catalog, auth)));
    }
    let server = bind(&sc.listen, Arc::new(router))?;
    Ok(Daemon::Site {
        server,
        broker,
        catalog: local,
    })
}

pub fn start_rls(dep: &Deployment) -> Result<Daemon> {
    let rc = dep.rls.as_ref().ok_or_else(|| GvfError::badreq("deployment has no rls"))?;
    let store = Arc::new(RlsStore::open(&rc.dir, dep.fsync)?);
    let handler = RlsHandler::new(store.clone(), dep.authenticator(), rc.rls_admin_only);
    let server = bind(&rc.listen, Arc::new(handler))?;
    Ok(Daemon::Rls { server, store })
}

/// The driver the configuration asks for, running in this process.
pub fn local_driver(dep: &Deployment) -> Result<Arc<dyn DriverBoundary>> {
    let gc = dep.gateway.as_ref().ok_or_else(|| GvfError::badreq("deployment has no gateway"))?;
    let backend = BrokerBackend::new(&gc.broker_addr, dep.authenticator());
    Ok(match gc.driver {
        crate::config::DriverKind::Staged => Arc::new(StagedDriver::new(backend)),
        crate::config::DriverKind::Direct => {
            let addrs: BTreeMap<String, String> = dep
                .vaults
                .iter()
                .map(|v| (v.vault_id.clone(), v.listen.clone()))
                .collect();
            Arc::new(DirectDriver::new(backend, addrs, &gc.site_id, &dep.master().site_id))
        }
    })
}

pub fn start_driver(dep: &Deployment) -> Result<Server> {
    let listen = dep
        .gateway
        .as_ref()
        .and_then(|g| g.driver_listen.clone())
        .ok_or_else(|| GvfError::badreq("deployment has no driver_listen"))?;
    bind(&listen, Arc::new(DriverHandler::new(local_driver(dep)?, dep.authenticator())))
}

pub fn start_gateway(dep: &Deployment) -> Result<Daemon> {
    let gc = dep.gateway.as_ref().ok_or_else(|| GvfError::badreq("deployment has no gateway"))?;
    let auth = dep.authenticator();
    let driver: Arc<dyn DriverBoundary> = if gc.driver_remote {
        let addr = gc.driver_listen.as_deref().expect("validated: driver_listen");
        Arc::new(RemoteDriver::connect(addr, auth.service_credential())?)
    } else {
        local_driver(dep)?
    };
    let clock = Arc::new(Clock::new(gc.clock));
    let cache = DiskCache::open(&gc.cache_dir, gc.cache_capacity_bytes, clock)?;
    // The HTTP side is bound first so its real address can go into TURLs.
    let listener = std::net::TcpListener::bind(&gc.http_listen)
        .map_err(|e| GvfError::unavail(format!("cannot listen on {}: {e}", gc.http_listen)))?;
    let http_addr = listener.local_addr()?;
    let gateway = Gateway::new(
        GatewayOptions {
            endpoint: gc.listen.clone(),
            http_endpoint: http_addr.to_string(),
            site_id: gc.site_id.clone(),
            turl_lifetime: gc.turl_lifetime,
            metrics_path: gc.metrics_path.clone(),
        },
        auth,
        driver,
        cache,
    );
    let http = HttpServer::from_listener(listener, gateway.clone())?;
    let server = bind(&gc.listen, Arc::new(GatewayHandler::new(gateway.clone())))?;
    Ok(Daemon::Gateway { server, http, gateway })
}

/// One catalog-to-RLS pass against the running daemons.
pub fn sync_once(dep: &Deployment) -> Result<SyncState> {
    let sc = dep.sync.as_ref().ok_or_else(|| GvfError::badreq("deployment has no sync section"))?;
    let rc = dep.rls.as_ref().ok_or_else(|| GvfError::badreq("deployment has no rls"))?;
    let gc = dep.gateway.as_ref().ok_or_else(|| GvfError::badreq("deployment has no gateway"))?;
    let auth = dep.authenticator();
    let mcat = RemoteCatalog::new(&dep.master().listen, auth.service_credential());
    let rls = RemoteRls::new(&rc.listen, Some(auth.service_credential()));
    SyncWorker::new(&sc.state_dir)?.run_once(&mcat, &rls as &dyn RlsService, &gc.listen)
}

/// Picks a loopback port that is free now. Ports come from below the usual
/// ephemeral range so outgoing connections cannot take them before the
/// daemon binds; each process walks its own window so parallel runs rarely meet.
pub fn free_port() -> Result<u16> {
    use std::sync::atomic::{AtomicU32, Ordering};
    const LOW: u32 = 20000;
    const SPAN: u32 = 12000;
    static NEXT: AtomicU32 = AtomicU32::new(u32::MAX);
    let _ = NEXT.compare_exchange(u32::MAX, rand::random::<u32>() % SPAN, Ordering::SeqCst, Ordering::SeqCst);
    for _ in 0..SPAN {
        let port = (LOW + NEXT.fetch_add(1, Ordering::SeqCst) % SPAN) as u16;
        if std::net::TcpListener::bind(("127.0.0.1", port)).is_ok() {
            return Ok(port);
        }
    }
    Ok(std::net::TcpListener::bind("127.0.0.1:0")?.local_addr()?.port())
}

/// Every daemon of a deployment in this process, addressable by component.
pub struct Federation {
    pub deployment: Deployment,
    running: BTreeMap<Component, Daemon>,
}

impl Federation {
    pub fn start(dep: Deployment) -> Result<Federation> {
        let mut f = Federation {
            deployment: dep,
            running: BTreeMap::new(),
        };
        for c in components(&f.deployment) {
            f.start_component(&c)?;
        }
        Ok(f)
    }

    pub fn start_component(&mut self, c: &Component) -> Result<()> {
        if !self.running.contains_key(c) {
            let d = start(&self.deployment, c)?;
            self.running.insert(c.clone(), d);
        }
        Ok(())
    }

    pub fn stop_component(&mut self, c: &Component) {
        if let Some(d) = self.running.remove(c) {
            d.shutdown();
        }
    }

    pub fn is_running(&self, c: &Component) -> bool {
        self.running.contains_key(c)
    }

    pub fn gateway(&self) -> Option<&Arc<Gateway>> {
        match self.running.get(&Component::Gateway) {
            Some(Daemon::Gateway { gateway, .. }) => Some(gateway),
            _ => None,
        }
    }

    pub fn catalog(&self) -> Option<&Arc<Catalog>> {
        let master = Component::Site(self.deployment.master().site_id.clone());
        match self.running.get(&master) {
            Some(Daemon::Site { catalog, .. }) => catalog.as_ref(),
            _ => None,
        }
    }

    pub fn rls(&self) -> Option<&Arc<RlsStore>> {
        match self.running.get(&Component::Rls) {
            Some(Daemon::Rls { store, .. }) => Some(store),
            _ => None,
        }
    }

    pub fn broker(&self, site: &str) -> Option<&Arc<Broker>> {
        match self.running.get(&Component::Site(site.to_string())) {
            Some(Daemon::Site { broker, .. }) => Some(broker),
            _ => None,
        }
    }

    pub fn shutdown(mut self) {
        let all: Vec<Component> = self.running.keys().rev().cloned().collect();
        for c in all {
            self.stop_component(&c);
        }
    }
}

impl Drop for Federation {
    fn drop(&mut self) {
        while let Some((_, d)) = self.running.pop_last() {
            d.shutdown();
        }
    }
}

/// A compact description of a loopback federation; expands into a full
/// [`Deployment`] with fresh ports and directories under one root.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Topology {
    /// The first site is the master.
    pub sites: Vec<TopologySite>,
    #[serde(default)]
    pub users: BTreeMap<String, String>,
    #[serde(default)]
    pub auto_map: bool,
    #[serde(default)]
    pub gateway: Option<TopologyGateway>,
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologySite {
    pub site_id: String,
    /// Vault id → capacity in bytes.
    #[serde(default)]
    pub vaults: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyGateway {
    pub site_id: String,
    pub driver: crate::config::DriverKind,
    #[serde(default)]
    pub driver_remote: bool,
    pub cache_capacity_bytes: u64,
    #[serde(default = "default_clock")]
    pub clock: crate::config::ClockMode,
    #[serde(default = "default_lifetime")]
    pub turl_lifetime: u64,
}

fn default_clock() -> crate::config::ClockMode {
    crate::config::ClockMode::Logical
}

fn default_lifetime() -> u64 {
    3600
}

impl Topology {
    pub fn deployment(&self, root: &std::path::Path) -> Result<Deployment> {
        use crate::config::{GatewayConfig, RlsConfig, SiteConfig, SyncConfig};
        let addr = || -> Result<String> { Ok(format!("127.0.0.1:{}", free_port()?)) };
        if self.sites.is_empty() {
            return Err(GvfError::badreq("topology needs at least one site"));
        }
        let master_addr = addr()?;
        let mut sites = Vec::new();
        let mut vaults = Vec::new();
        for (i, s) in self.sites.iter().enumerate() {
            let master = i == 0;
            for (v, cap) in &s.vaults {
                vaults.push(crate::vault::VaultConfig {
                    vault_id: v.clone(),
                    site_id: s.site_id.clone(),
                    root_dir: root.join("vaults").join(v),
                    capacity: *cap,
                    listen: addr()?,
                });
            }
            sites.push(SiteConfig {
                site_id: s.site_id.clone(),
                role: if master { SiteRole::Master } else { SiteRole::Server },
                listen: if master { master_addr.clone() } else { addr()? },
                mcat_dir: master.then(|| root.join("mcat")),
                master_addr: (!master).then(|| master_addr.clone()),
                local_vaults: s.vaults.keys().cloned().collect(),
                subject_map: if master { self.users.clone() } else { BTreeMap::new() },
            });
        }
        let gateway = match &self.gateway {
            None => None,
            Some(g) => {
                let broker_addr = sites
                    .iter()
                    .find(|s| s.site_id == g.site_id)
                    .ok_or_else(|| GvfError::badreq(format!("gateway names unknown site {}", g.site_id)))?
                    .listen
                    .clone();
                Some(GatewayConfig {
                    listen: addr()?,
                    http_listen: "127.0.0.1:0".into(),
                    site_id: g.site_id.clone(),
                    broker_addr,
                    cache_dir: root.join("cache"),
                    cache_capacity_bytes: g.cache_capacity_bytes,
                    driver: g.driver,
                    driver_remote: g.driver_remote,
                    driver_listen: if g.driver_remote { Some(addr()?) } else { None },
                    metrics_path: Some(root.join("metrics.json")),
                    turl_lifetime: g.turl_lifetime,
                    clock: g.clock,
                })
            }
        };
        let dep = Deployment {
            secret: format!("{:032x}", rand::random::<u128>()),
            service_subject: crate::auth::DEFAULT_SERVICE_SUBJECT.to_string(),
            auto_map: self.auto_map,
            fsync: false,
            sites,
            vaults,
            rls: Some(RlsConfig {
                listen: addr()?,
                dir: root.join("rls"),
                rls_admin_only: false,
            }),
            sync: gateway.as_ref().map(|_| SyncConfig {
                state_dir: root.join("sync"),
            }),
            gateway,
        };
        dep.validate()?;
        Ok(dep)
    }
}
