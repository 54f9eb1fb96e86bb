use crate::common::*;
use crate::ensure;
use gvf_core::broker::BrokerClient;
use gvf_core::config::{Deployment, DriverKind};
use gvf_core::mcat::{CatalogEntry, Grants};
use gvf_core::rls::{list_everything, Guid, RemoteRls, RlsService, Surl};
use gvf_core::{ErrorCode, GvfError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, BTreeSet};
use std::net::{TcpStream, ToSocketAddrs};
use std::path::PathBuf;
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

const OPS: usize = 500;
const NAMES: usize = 15;
const GUIDS: u128 = 20;

struct Procs {
    config: PathBuf,
    /// "catalog" runs site:master, "rls" the replica index, "rest" everything else.
    children: BTreeMap<&'static str, Child>,
}

impl Procs {
    fn spawn(&mut self, role: &'static str, args: &[&str], dep: &Deployment) -> Result<(), String> {
        let child = Command::new(env!("CARGO_BIN_EXE_gvf"))
            .arg("--config")
            .arg(&self.config)
            .arg("serve")
            .args(args)
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| e.to_string())?;
        self.children.insert(role, child);
        for addr in listen_addrs(dep, role) {
            wait_port(&addr)?;
        }
        Ok(())
    }

    fn kill(&mut self, role: &'static str) {
        if let Some(mut c) = self.children.remove(role) {
            let _ = c.kill();
            let _ = c.wait();
        }
    }
}

impl Drop for Procs {
    fn drop(&mut self) {
        for c in self.children.values_mut() {
            let _ = c.kill();
            let _ = c.wait();
        }
    }
}

fn args_for(role: &str) -> Vec<&'static str> {
    match role {
        "catalog" => vec!["site:master"],
        "rls" => vec!["rls"],
        _ => vec!["vault:v0", "vault:v1", "vault:v2", "site:east", "site:west"],
    }
}

fn listen_addrs(dep: &Deployment, role: &str) -> Vec<String> {
    match role {
        "catalog" => vec![dep.master().listen.clone()],
        "rls" => vec![dep.rls.as_ref().unwrap().listen.clone()],
        _ => {
            let mut v: Vec<String> = dep.vaults.iter().map(|v| v.listen.clone()).collect();
            v.push(dep.site("east").unwrap().listen.clone());
            v.push(dep.site("west").unwrap().listen.clone());
            v
        }
    }
}

fn wait_port(addr: &str) -> Result<(), String> {
    let sa = addr.to_socket_addrs().map_err(|e| e.to_string())?.next().unwrap();
    let deadline = Instant::now() + Duration::from_secs(20);
    while TcpStream::connect_timeout(&sa, Duration::from_millis(100)).is_err() {
        ensure!(Instant::now() < deadline, "{addr} never came up");
        thread::sleep(Duration::from_millis(10));
    }
    Ok(())
}

/// What the catalog should say about one name.
#[derive(Debug, Clone, PartialEq, Eq)]
struct FileState {
    digest: String,
    online: BTreeSet<String>,
    grants: serde_json::Value,
}

fn observe(e: &CatalogEntry) -> FileState {
    FileState {
        digest: e.digest.clone(),
        online: e.replicas.iter().filter(|r| r.is_online()).map(|r| r.vault_id.clone()).collect(),
        grants: serde_json::to_value(&e.acl.grants).unwrap(),
    }
}

fn sha(data: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(data))
}

/// Retries a read until the daemons answer, for resolving in-flight ops.
fn settle<T>(mut f: impl FnMut() -> Result<T, GvfError>) -> Result<T, GvfError> {
    let deadline = Instant::now() + Duration::from_secs(30);
    loop {
        match f() {
            Err(e) if e.code == ErrorCode::Unavail && Instant::now() < deadline => thread::sleep(Duration::from_millis(20)),
            r => return r,
        }
    }
}

#[derive(Default)]
struct Tally {
    acked: usize,
    unacked: usize,
    landed: usize,
    retried: usize,
    kills: u64,
}

pub fn run() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dep = three_sites(1 << 26, DriverKind::Staged, 1 << 20)
        .deployment(dir.path())
        .map_err(e2s)?;
    let config = dir.path().join("deployment.json");
    dep.save(&config).map_err(e2s)?;
    let procs = Arc::new(Mutex::new(Procs {
        config,
        children: BTreeMap::new(),
    }));
    for role in ["rest", "catalog", "rls"] {
        procs.lock().unwrap().spawn(role, &args_for(role), &dep)?;
    }

    // Kills alternate between the catalog and RLS daemons at random moments.
    // `epoch` is odd while one of them is down.
    let stop = Arc::new(AtomicBool::new(false));
    let epoch = Arc::new(AtomicU64::new(0));
    let killer = {
        let (procs, stop, epoch, dep) = (procs.clone(), stop.clone(), epoch.clone(), dep.clone());
        thread::spawn(move || -> Result<u64, String> {
            let mut rng = ChaCha8Rng::seed_from_u64(66);
            let mut kills = 0;
            while !stop.load(Ordering::SeqCst) {
                thread::sleep(Duration::from_millis(rng.gen_range(2..25)));
                let role = if rng.gen_bool(0.5) { "catalog" } else { "rls" };
                epoch.fetch_add(1, Ordering::SeqCst);
                procs.lock().unwrap().kill(role);
                kills += 1;
                thread::sleep(Duration::from_millis(rng.gen_range(0..30)));
                procs.lock().unwrap().spawn(role, &args_for(role), &dep)?;
                epoch.fetch_add(1, Ordering::SeqCst);
            }
            Ok(kills)
        })
    };

    let auth = dep.authenticator();
    let alice = BrokerClient::new(&dep.site("east").unwrap().listen, auth.credential_for(ALICE));
    let rls_addr = dep.rls.as_ref().unwrap().listen.clone();
    let rls = RemoteRls::new(&rls_addr, Some(auth.service_credential()));
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut files: BTreeMap<String, FileState> = BTreeMap::new();
    let mut index: BTreeMap<Guid, BTreeSet<Surl>> = BTreeMap::new();
    let mut t = Tally::default();

    let stat = |dn: &str| -> Result<Option<FileState>, GvfError> {
        settle(|| match alice.stat(dn) {
            Ok(e) => Ok(Some(observe(&e))),
            Err(e) if e.code == ErrorCode::NoEnt => Ok(None),
            Err(e) => Err(e),
        })
    };
    let surls_of = |g: &Guid| -> Result<BTreeSet<Surl>, GvfError> {
        settle(|| match rls.lookup_guid(g) {
            Ok(s) => Ok(s),
            Err(e) if e.code == ErrorCode::NoEnt => Ok(BTreeSet::new()),
            Err(e) => Err(e),
        })
    };

    for i in 0..OPS {
        let before = epoch.load(Ordering::SeqCst);
        let dn = format!("/home/alice/d{}", rng.gen_range(0..NAMES));
        let op = rng.gen_range(0..10);
        if op < 7 {
            let pre = files.get(&dn).cloned();
            let (r, post): (Result<(), GvfError>, Option<FileState>) = match (op, &pre) {
                (0..=2, _) | (_, None) => {
                    let data = format!("{dn} op {i} {}", rng.gen::<u64>()).repeat(rng.gen_range(1..50));
                    let post = FileState {
                        digest: sha(data.as_bytes()),
                        online: BTreeSet::from(["v1".to_string()]),
                        grants: pre.as_ref().map_or(serde_json::json!({}), |p| p.grants.clone()),
                    };
                    (alice.put(&dn, data.as_bytes()).map(drop), Some(post))
                }
                (3..=4, Some(p)) => {
                    let v = ["v0", "v2"][rng.gen_range(0..2)];
                    if p.online.contains(v) {
                        continue;
                    }
                    let mut post = p.clone();
                    post.online.insert(v.to_string());
                    (alice.replicate(&dn, v).map(drop), Some(post))
                }
                (5, Some(p)) => {
                    let mut grants = BTreeMap::new();
                    for s in [BOB, CAROL] {
                        let perms: Vec<&str> = ["read", "write", "delete"].into_iter().filter(|_| rng.gen_bool(0.4)).collect();
                        if !perms.is_empty() {
                            grants.insert(s, perms);
                        }
                    }
                    let g: Grants = serde_json::from_value(serde_json::json!(grants)).unwrap();
                    let mut post = p.clone();
                    post.grants = serde_json::to_value(&g).unwrap();
                    (alice.set_acl(&dn, &g).map(drop), Some(post))
                }
                _ => (alice.rm(&dn).map(drop), None),
            };
            match r {
                Ok(()) => {
                    t.acked += 1;
                    match &post {
                        Some(p) => files.insert(dn.clone(), p.clone()),
                        None => files.remove(&dn),
                    };
                }
                Err(e) => {
                    let disturbed = before % 2 == 1 || epoch.load(Ordering::SeqCst) != before;
                    ensure!(disturbed && e.code == ErrorCode::Unavail, "op {i} on {dn} failed undisturbed: {e}");
                    t.unacked += 1;
                    let now = stat(&dn).map_err(e2s)?;
                    ensure!(now == pre || now == post, "op {i} on {dn}: recovered {now:?}, neither {pre:?} nor {post:?}");
                    if now == post && pre != post {
                        t.landed += 1;
                    }
                    match now {
                        Some(s) => files.insert(dn.clone(), s),
                        None => files.remove(&dn),
                    };
                    // An interrupted rm may have dropped blobs before the entry;
                    // the client retries it to completion.
                    if post.is_none() && files.contains_key(&dn) {
                        match settle(|| alice.rm(&dn)) {
                            Ok(_) => {}
                            Err(e) if e.code == ErrorCode::NoEnt => {}
                            Err(e) => return Err(format!("retried rm of {dn}: {e}")),
                        }
                        files.remove(&dn);
                        t.retried += 1;
                    }
                }
            }
        } else {
            let k = rng.gen_range(0..GUIDS);
            let guid = Guid::from_u128(0xd0_0000 + k);
            let surl = Surl::parse(&format!("srm://elsewhere.example:2811/far/home/alice/g{k}-{}", rng.gen_range(0..3))).map_err(e2s)?;
            let pre = index.get(&guid).cloned().unwrap_or_default();
            let mut post = pre.clone();
            let r = if op < 9 {
                post.insert(surl.clone());
                rls.publish(&guid, &surl).map(drop)
            } else {
                post.remove(&surl);
                rls.unpublish(&guid, &surl).map(drop)
            };
            let now = match r {
                Ok(()) => {
                    t.acked += 1;
                    post
                }
                Err(e) => {
                    let disturbed = before % 2 == 1 || epoch.load(Ordering::SeqCst) != before;
                    ensure!(disturbed && e.code == ErrorCode::Unavail, "rls op {i} failed undisturbed: {e}");
                    t.unacked += 1;
                    let now = surls_of(&guid).map_err(e2s)?;
                    ensure!(now == pre || now == post, "rls op {i}: recovered {now:?}, neither {pre:?} nor {post:?}");
                    if now == post && pre != post {
                        t.landed += 1;
                    }
                    now
                }
            };
            if now.is_empty() {
                index.remove(&guid);
            } else {
                index.insert(guid, now);
            }
        }
    }
    stop.store(true, Ordering::SeqCst);
    t.kills = killer.join().map_err(|_| "killer panicked".to_string())??;

    // One last unannounced kill of both, then compare the recovered state.
    {
        let mut p = procs.lock().unwrap();
        for role in ["catalog", "rls"] {
            p.kill(role);
        }
        for role in ["catalog", "rls"] {
            p.spawn(role, &args_for(role), &dep)?;
        }
    }
    for n in 0..NAMES {
        let dn = format!("/home/alice/d{n}");
        let got = stat(&dn).map_err(e2s)?;
        ensure!(got.as_ref() == files.get(&dn), "{dn}: recovered {got:?}, replay says {:?}", files.get(&dn));
        if let Some(f) = &got {
            let (_, data) = settle(|| alice.get(&dn)).map_err(e2s)?;
            ensure!(sha(&data) == f.digest, "{dn}: content does not match its digest");
        }
    }
    let image: BTreeMap<Guid, BTreeSet<Surl>> = settle(|| list_everything(&rls, 7))
        .map_err(e2s)?
        .into_iter()
        .map(|m| (m.guid, m.surls))
        .collect();
    ensure!(image == index, "RLS recovered {image:?}, replay says {index:?}");
    ensure!(t.kills > 0, "no kills happened");
    Ok(format!(
        "{OPS} ops, {} kills; {} acked all present, {} in flight ({} landed, rest absent, {} rm retried); {} files, {} guids recovered exactly",
        t.kills + 2,
        t.acked,
        t.unacked,
        t.landed,
        t.retried,
        files.len(),
        index.len()
    ))
}
