use gvf_core::config::{ClockMode, DriverKind};
use gvf_core::daemon::{Federation, Topology, TopologyGateway, TopologySite};
use std::collections::BTreeMap;

pub const ALICE: &str = "/O=gvf/CN=alice";
pub const BOB: &str = "/O=gvf/CN=bob";
pub const CAROL: &str = "/O=gvf/CN=carol";
pub const DAVE: &str = "/O=gvf/CN=dave";

/// Fails the criterion with a message when `cond` is false.
#[macro_export]
macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

pub fn users() -> BTreeMap<String, String> {
    [(ALICE, "alice"), (BOB, "bob"), (CAROL, "carol"), (DAVE, "dave")]
        .into_iter()
        .map(|(s, l)| (s.to_string(), l.to_string()))
        .collect()
}

/// master(v0), east(v1), west(v2); gateway at east.
pub fn three_sites(vault_cap: u64, driver: DriverKind, cache: u64) -> Topology {
    let site = |s: &str, v: &str| TopologySite {
        site_id: s.into(),
        vaults: BTreeMap::from([(v.to_string(), vault_cap)]),
    };
    Topology {
        sites: vec![site("master", "v0"), site("east", "v1"), site("west", "v2")],
        users: users(),
        auto_map: false,
        gateway: Some(TopologyGateway {
            site_id: "east".into(),
            driver,
            driver_remote: false,
            cache_capacity_bytes: cache,
            clock: ClockMode::Logical,
            turl_lifetime: 3600,
        }),
    }
}

pub struct Running {
    pub fed: Federation,
    pub dir: tempfile::TempDir,
}

pub fn boot(t: &Topology) -> Result<Running, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dep = t.deployment(dir.path()).map_err(|e| e.to_string())?;
    let fed = Federation::start(dep).map_err(|e| e.to_string())?;
    Ok(Running { fed, dir })
}

pub fn e2s(e: gvf_core::GvfError) -> String {
    e.to_string()
}
