use crate::common::*;
use crate::ensure;
use gvf_core::broker::BrokerClient;
use gvf_core::config::DriverKind;
use gvf_core::daemon::{local_driver, Component};
use gvf_core::gateway::cache::DiskCache;
use gvf_core::gateway::clock::Clock;
use gvf_core::gateway::driver::{DriverBoundary, DriverHandler, FetchPlan, Fetched, RemoteDriver, StagingContext};
use gvf_core::gateway::Metrics;
use gvf_core::mcat::{DataName, Perm, Subject};
use gvf_core::wire::Server;
use gvf_core::{ErrorCode, GvfError};
use parking_lot::Mutex;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::sync::Arc;

const MALLORY: &str = "/O=gvf/CN=mallory";

fn sha(data: &[u8]) -> String {
    hex::encode(Sha256::digest(data))
}

fn dn(s: &str) -> DataName {
    DataName::parse(s).unwrap()
}

fn subj(s: &str) -> Subject {
    Subject::parse(s).unwrap()
}

fn code<T>(r: &Result<T, GvfError>) -> Option<ErrorCode> {
    r.as_ref().err().map(|e| e.code)
}

struct Suite<'a> {
    label: String,
    d: &'a dyn DriverBoundary,
    kind: DriverKind,
    ctx: StagingContext<'a>,
    passed: usize,
}

impl Suite<'_> {
    fn case(&mut self, name: &str, outcome: Result<(), String>) -> Result<(), String> {
        outcome.map_err(|e| format!("{} / {name}: {e}", self.label))?;
        self.passed += 1;
        Ok(())
    }

    fn deny<T: std::fmt::Debug>(&mut self, name: &str, r: Result<T, GvfError>, want: ErrorCode) -> Result<(), String> {
        let got = code(&r);
        let out = if got == Some(want) { Ok(()) } else { Err(format!("want {want:?}, got {r:?}")) };
        self.case(name, out)
    }
}

/// Fixture content, put before each suite runs.
struct Fixture {
    open: Vec<u8>,
    far: Vec<u8>,
}

fn cases(s: &mut Suite<'_>, fx: &Fixture, tag: &str) -> Result<(), String> {
    let (alice, bob, carol, mallory) = (subj(ALICE), subj(BOB), subj(CAROL), subj(MALLORY));
    let open = dn("/home/alice/open.dat");
    let secret = dn("/home/alice/secret.dat");
    let empty = dn("/home/alice/empty");
    let far = dn("/home/alice/far.dat");
    let missing = dn("/home/alice/missing");
    let cache_http = vec!["cache-http".to_string()];
    let stream = vec!["vault-stream".to_string()];
    let d = s.d;

    let r = d.stat(&alice, &open);
    s.case("stat by owner", match &r {
        Ok(e) if e.digest == sha(&fx.open) && e.size == fx.open.len() as u64 => Ok(()),
        _ => Err(format!("{r:?}")),
    })?;
    s.case("stat by read grantee", d.stat(&bob, &open).map(drop).map_err(|e| e.to_string()))?;
    s.deny("stat without grant", d.stat(&carol, &open), ErrorCode::Perm)?;
    s.deny("stat of missing name", d.stat(&alice, &missing), ErrorCode::NoEnt)?;
    s.deny("stat by unmapped subject", d.stat(&mallory, &open), ErrorCode::BadReq)?;

    let checks = [(&alice, Perm::Write, true), (&bob, Perm::Read, true), (&bob, Perm::Write, false), (&carol, Perm::Read, false)];
    for (who, mode, want) in checks {
        let r = d.check(who, &open, mode);
        s.case(&format!("check {who} {mode:?}"), if r.as_ref().ok() == Some(&want) { Ok(()) } else { Err(format!("{r:?}")) })?;
    }
    s.deny("check on missing name", d.check(&alice, &missing, Perm::Read), ErrorCode::NoEnt)?;

    let r = d.read_content(&bob, &open);
    s.case("read by grantee", match &r {
        Ok((o, data)) if *data == fx.open && o.digest == sha(&fx.open) => Ok(()),
        _ => Err(format!("{:?}", code(&r))),
    })?;
    s.deny("read without grant", d.read_content(&carol, &secret), ErrorCode::Perm)?;
    s.deny("read of missing name", d.read_content(&alice, &missing), ErrorCode::NoEnt)?;
    let r = d.read_content(&alice, &empty);
    s.case("read of zero-byte file", match &r {
        Ok((o, data)) if data.is_empty() && o.size == 0 => Ok(()),
        _ => Err(format!("{:?}", code(&r))),
    })?;

    let new = dn(&format!("/home/alice/new-{tag}"));
    let r = d.store_content(&alice, &new, b"fresh bytes");
    s.case("store by owner", match &r {
        Ok(e) if e.digest == sha(b"fresh bytes") && e.acl.owner == alice => Ok(()),
        _ => Err(format!("{r:?}")),
    })?;
    s.deny("overwrite without write grant", d.store_content(&bob, &open, b"x"), ErrorCode::Perm)?;
    s.deny("create in another home", d.store_content(&bob, &dn(&format!("/home/alice/b-{tag}")), b"x"), ErrorCode::Perm)?;

    let r = d.list(&alice, "/home/alice");
    s.case("list by owner", match &r {
        Ok(items) if [&open, &secret, &empty, &far, &new].iter().all(|n| items.iter().any(|i| i.dataname == **n)) => Ok(()),
        _ => Err(format!("{r:?}")),
    })?;

    s.case("plan without vault-stream stages", match d.plan_fetch(&alice, &d.stat(&alice, &open).map_err(e2s)?, &cache_http) {
        Ok(FetchPlan::Stage) => Ok(()),
        r => Err(format!("{r:?}")),
    })?;

    let first = d.fetch_to_cache(&s.ctx, &bob, &open, &cache_http, None);
    let again = d.fetch_to_cache(&s.ctx, &bob, &open, &cache_http, None);
    s.case("fetch misses then hits", match (&first, &again) {
        (Ok(Fetched::Cached { key, hit: false, digest, .. }), Ok(Fetched::Cached { hit: true, .. }))
            if *digest == sha(&fx.open) && s.ctx.cache.read(key).ok().as_ref() == Some(&fx.open) => Ok(()),
        _ => Err(format!("{first:?} / {again:?}")),
    })?;
    s.deny("fetch of cached entry without grant", d.fetch_to_cache(&s.ctx, &carol, &open, &cache_http, None), ErrorCode::Perm)?;
    s.deny("fetch of missing name", d.fetch_to_cache(&s.ctx, &alice, &missing, &cache_http, None), ErrorCode::NoEnt)?;

    let r = d.fetch_to_cache(&s.ctx, &alice, &far, &stream, None);
    let want_direct = s.kind == DriverKind::Direct;
    s.case("vault-stream fetch follows the driver kind", match &r {
        Ok(Fetched::Direct { turl, digest, site_id, .. }) if want_direct && turl.starts_with("vault://") && *digest == sha(&fx.far) && site_id == "west" => Ok(()),
        Ok(Fetched::Cached { key, .. }) if !want_direct && s.ctx.cache.read(key).ok().as_ref() == Some(&fx.far) => Ok(()),
        _ => Err(format!("{r:?}")),
    })?;

    let up = format!("upload-{tag}");
    s.ctx.cache.insert(&up, b"uploaded").map_err(e2s)?;
    let target = dn(&format!("/home/alice/up-{tag}"));
    s.deny("commit upload into another home", d.store_from_cache(&s.ctx, &up, &target, &bob), ErrorCode::Perm)?;
    let r = d.store_from_cache(&s.ctx, &up, &target, &alice);
    s.case("commit upload by owner", match &r {
        Ok(e) if e.digest == sha(b"uploaded") => Ok(()),
        _ => Err(format!("{r:?}")),
    })?;
    s.deny("commit of absent cache entry", d.store_from_cache(&s.ctx, "no-such-key", &target, &alice), ErrorCode::NoEnt)?;
    Ok(())
}

fn outage_cases(s: &mut Suite<'_>, run: &mut Running, fx: &Fixture) -> Result<(), String> {
    let alice = subj(ALICE);
    let far = dn("/home/alice/far.dat");
    let open = dn("/home/alice/open.dat");
    let cache_http = vec!["cache-http".to_string()];

    let v2 = Component::Vault("v2".into());
    run.fed.stop_component(&v2);
    let r = s.d.read_content(&alice, &far);
    let f = s.d.fetch_to_cache(&s.ctx, &alice, &dn("/home/alice/far.dat"), &cache_http, None);
    run.fed.start_component(&v2).map_err(e2s)?;
    s.deny("read with only replica's vault down", r, ErrorCode::Unavail)?;
    // A staged copy from an earlier case may satisfy this from cache.
    s.case("fetch with vault down is unavailable or cached", match &f {
        Err(e) if e.code == ErrorCode::Unavail => Ok(()),
        Ok(Fetched::Cached { key, hit: true, .. }) if s.ctx.cache.read(key).ok().as_ref() == Some(&fx.far) => Ok(()),
        _ => Err(format!("{f:?}")),
    })?;

    let east = Component::Site("east".into());
    run.fed.stop_component(&east);
    let r = s.d.stat(&alice, &open);
    run.fed.start_component(&east).map_err(e2s)?;
    s.deny("stat with broker down", r, ErrorCode::Unavail)?;

    let master = Component::Site("master".into());
    run.fed.stop_component(&master);
    let r = s.d.read_content(&alice, &open);
    run.fed.start_component(&master).map_err(e2s)?;
    s.deny("read with catalog down", r, ErrorCode::Unavail)?;

    let r = s.d.read_content(&alice, &open);
    s.case("service resumes after restart", match &r {
        Ok((_, data)) if *data == fx.open => Ok(()),
        _ => Err(format!("{:?}", code(&r))),
    })
}

fn fixture(run: &Running) -> Result<Fixture, String> {
    let dep = &run.fed.deployment;
    let cred = dep.authenticator().credential_for(ALICE);
    let at = |site: &str| BrokerClient::new(&dep.site(site).unwrap().listen, cred.clone());
    let fx = Fixture {
        open: (0..3000u32).map(|i| (i % 253) as u8).collect(),
        far: b"lives only at west".to_vec(),
    };
    at("master").put("/home/alice/open.dat", &fx.open).map_err(e2s)?;
    at("master").put("/home/alice/secret.dat", b"private").map_err(e2s)?;
    at("east").put("/home/alice/empty", b"").map_err(e2s)?;
    at("west").put("/home/alice/far.dat", &fx.far).map_err(e2s)?;
    let grants = serde_json::from_value(serde_json::json!({ BOB: ["read"] })).unwrap();
    at("master").set_acl("/home/alice/open.dat", &grants).map_err(e2s)?;
    Ok(fx)
}

pub fn run() -> Result<String, String> {
    let mut total = 0;
    let mut per_suite = Vec::new();
    let mut counts = Vec::new();
    for kind in [DriverKind::Staged, DriverKind::Direct] {
        for remote in [false, true] {
            let mut run = boot(&three_sites(1 << 24, kind, 1 << 20))?;
            let fx = fixture(&run)?;
            let dep = run.fed.deployment.clone();
            let local = local_driver(&dep).map_err(e2s)?;
            let server;
            let remote_driver;
            let d: &dyn DriverBoundary = if remote {
                server = Server::bind("127.0.0.1:0", Arc::new(DriverHandler::new(local.clone(), dep.authenticator())))
                    .map_err(|e| e.to_string())?;
                remote_driver = RemoteDriver::connect(&server.local_addr().to_string(), dep.authenticator().service_credential())
                    .map_err(e2s)?;
                ensure!(remote_driver.kind() == kind, "remote reports {:?}", remote_driver.kind());
                &remote_driver
            } else {
                local.as_ref()
            };
            let cache = DiskCache::open(&run.dir.path().join("contract-cache"), 1 << 20, Arc::new(Clock::logical())).map_err(e2s)?;
            let metrics = Mutex::new(Metrics::default());
            let origins = Mutex::new(BTreeMap::new());
            let label = format!("{kind:?}/{}", if remote { "remote" } else { "in-process" });
            let mut s = Suite {
                label: label.clone(),
                d,
                kind,
                ctx: StagingContext {
                    cache: &cache,
                    metrics: &metrics,
                    origins: &origins,
                },
                passed: 0,
            };
            cases(&mut s, &fx, "x")?;
            outage_cases(&mut s, &mut run, &fx)?;
            let copies = metrics.lock().staging_copies;
            let want = if kind == DriverKind::Direct { 1 } else { 2 };
            ensure!(copies == want, "{label}: {copies} staging copies, expected {want}");
            total += s.passed;
            counts.push(s.passed);
            per_suite.push(format!("{label} {}", s.passed));
        }
    }
    ensure!(counts.windows(2).all(|w| w[0] == w[1]), "suites ran different case counts: {per_suite:?}");
    ensure!(counts[0] >= 20, "only {} cases per suite", counts[0]);
    Ok(format!("{total} case runs; {}", per_suite.join(", ")))
}
