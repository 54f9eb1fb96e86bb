//! Deployment configuration: one structured-text (JSON) file describing every
//! site, vault, the RLS, the gateway and the sync worker of a federation.

use crate::auth::DEFAULT_SERVICE_SUBJECT;
use crate::error::{GvfError, Result};
use crate::mcat::is_identifier;
use crate::vault::VaultConfig;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

pub const CONFIG_ENV: &str = "GVF_CONFIG";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SiteRole {
    Master,
    Server,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteConfig {
    pub site_id: String,
    pub role: SiteRole,
    pub listen: String,
    /// Directory of the embedded catalog store (master only).
    #[serde(default, alias = "mcat_addr", skip_serializing_if = "Option::is_none")]
    pub mcat_dir: Option<PathBuf>,
    /// Address of the master site (servers only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub master_addr: Option<String>,
    /// Ids of the vaults resident at this site.
    #[serde(default)]
    pub local_vaults: Vec<String>,
    /// Subject → local user name, seeded into the catalog by the master.
    #[serde(default)]
    pub subject_map: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RlsConfig {
    pub listen: String,
    pub dir: PathBuf,
    /// Restrict publish/unpublish to the federation service identity.
    #[serde(default)]
    pub rls_admin_only: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DriverKind {
    Staged,
    Direct,
}

impl std::str::FromStr for DriverKind {
    type Err = GvfError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "staged" => Ok(DriverKind::Staged),
            "direct" => Ok(DriverKind::Direct),
            _ => Err(GvfError::badreq(format!("unknown driver {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClockMode {
    #[default]
    Wall,
    Logical,
}

fn default_turl_lifetime() -> u64 {
    3600
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatewayConfig {
    /// Wire-protocol listen address; also the host:port that appears in SURLs.
    pub listen: String,
    /// Listen address of the `cache-http` transfer server.
    pub http_listen: String,
    /// Site the gateway is co-located with.
    pub site_id: String,
    /// Broker site the gateway talks to.
    pub broker_addr: String,
    pub cache_dir: PathBuf,
    pub cache_capacity_bytes: u64,
    pub driver: DriverKind,
    #[serde(default)]
    pub driver_remote: bool,
    /// Listen address of the out-of-process driver when `driver_remote` is set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub driver_listen: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics_path: Option<PathBuf>,
    #[serde(default = "default_turl_lifetime")]
    pub turl_lifetime: u64,
    #[serde(default)]
    pub clock: ClockMode,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncConfig {
    pub state_dir: PathBuf,
}

fn default_service_subject() -> String {
    DEFAULT_SERVICE_SUBJECT.to_string()
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Deployment {
    pub secret: String,
    #[serde(default = "default_service_subject")]
    pub service_subject: String,
    #[serde(default)]
    pub auto_map: bool,
    #[serde(default = "default_true")]
    pub fsync: bool,
    pub sites: Vec<SiteConfig>,
    #[serde(default)]
    pub vaults: Vec<VaultConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rls: Option<RlsConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gateway: Option<GatewayConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sync: Option<SyncConfig>,
}

impl Deployment {
    pub fn load(path: &Path) -> Result<Deployment> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GvfError::badreq(format!("cannot read config {}: {e}", path.display())))?;
        let d: Deployment = serde_json::from_str(&text)
            .map_err(|e| GvfError::badreq(format!("config {}: {e}", path.display())))?;
        d.validate()?;
        Ok(d)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let masters: Vec<_> = self.sites.iter().filter(|s| s.role == SiteRole::Master).collect();
        if masters.len() != 1 {
            return Err(GvfError::badreq(format!("exactly one master site required, found {}", masters.len())));
        }
        if masters[0].mcat_dir.is_none() {
            return Err(GvfError::badreq("master site needs mcat_dir"));
        }
        let mut site_ids = BTreeSet::new();
        for s in &self.sites {
            if !is_identifier(&s.site_id) || !site_ids.insert(s.site_id.as_str()) {
                return Err(GvfError::badreq(format!("bad or duplicate site id {:?}", s.site_id)));
            }
            if s.role == SiteRole::Server && s.master_addr.is_none() {
                return Err(GvfError::badreq(format!("server site {} does not know the master", s.site_id)));
            }
        }
        let mut vault_ids = BTreeSet::new();
        for v in &self.vaults {
            if !is_identifier(&v.vault_id) || !vault_ids.insert(v.vault_id.as_str()) {
                return Err(GvfError::badreq(format!("bad or duplicate vault id {:?}", v.vault_id)));
            }
            if v.capacity == 0 {
                return Err(GvfError::badreq(format!("vault {} has zero capacity", v.vault_id)));
            }
            if !site_ids.contains(v.site_id.as_str()) {
                return Err(GvfError::badreq(format!("vault {} names unknown site {}", v.vault_id, v.site_id)));
            }
        }
        for s in &self.sites {
            for v in &s.local_vaults {
                match self.vault(v) {
                    Some(vc) if vc.site_id == s.site_id => {}
                    Some(_) => return Err(GvfError::badreq(format!("vault {v} is not resident at {}", s.site_id))),
                    None => return Err(GvfError::badreq(format!("site {} lists unknown vault {v}", s.site_id))),
                }
            }
        }
        if let Some(g) = &self.gateway {
            if !site_ids.contains(g.site_id.as_str()) {
                return Err(GvfError::badreq(format!("gateway names unknown site {}", g.site_id)));
            }
            if g.cache_capacity_bytes == 0 {
                return Err(GvfError::badreq("gateway cache capacity must be positive"));
            }
            if g.driver_remote && g.driver_listen.is_none() {
                return Err(GvfError::badreq("driver_remote requires driver_listen"));
            }
        }
        crate::auth::Authenticator::new(&self.secret, &self.service_subject)?;
        Ok(())
    }

    pub fn master(&self) -> &SiteConfig {
        self.sites
            .iter()
            .find(|s| s.role == SiteRole::Master)
            .expect("validated: one master")
    }

    pub fn site(&self, id: &str) -> Option<&SiteConfig> {
        self.sites.iter().find(|s| s.site_id == id)
    }

    pub fn vault(&self, id: &str) -> Option<&VaultConfig> {
        self.vaults.iter().find(|v| v.vault_id == id)
    }

    pub fn authenticator(&self) -> crate::auth::Authenticator {
        crate::auth::Authenticator::new(&self.secret, &self.service_subject).expect("validated secret")
    }
}

/// `--config` wins; otherwise `$GVF_CONFIG`.
pub fn resolve_config_path(flag: Option<&Path>) -> Result<PathBuf> {
    if let Some(p) = flag {
        return Ok(p.to_path_buf());
    }
    std::env::var_os(CONFIG_ENV)
        .map(PathBuf::from)
        .ok_or_else(|| GvfError::badreq(format!("no --config given and {CONFIG_ENV} is unset")))
}
