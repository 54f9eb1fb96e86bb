use crate::common::*;
use crate::ensure;
use gvf_core::broker::BrokerClient;
use gvf_core::config::DriverKind;
use gvf_core::daemon::Component;
use gvf_core::mcat::RemoteCatalog;
use gvf_core::rls::{list_everything, RemoteRls, RlsService};
use gvf_core::sync::{full_rescan, sync_once, CrashAfter, SyncState};
use gvf_core::{ErrorCode, GvfError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, BTreeSet};

const HISTORIES: u64 = 50;
const SITES: [(&str, &str); 3] = [("master", "v0"), ("east", "v1"), ("west", "v2")];

/// FNV-1a, 128-bit, written out from the published constants.
fn fnv128(data: &[u8]) -> u128 {
    let mut h: u128 = 0x6c62272e07bb014262b821756295c58d;
    for b in data {
        h ^= *b as u128;
        h = h.wrapping_mul(0x0000000001000000000000000000013b);
    }
    h
}

#[derive(Default)]
struct Tally {
    crashed: usize,
    outages: usize,
    mutations: usize,
}

fn expect(r: Result<(), GvfError>, want: Option<ErrorCode>, what: &str) -> Result<(), String> {
    let got = r.err().map(|e| e.code);
    ensure!(got == want, "{what}: got {got:?}, want {want:?}");
    Ok(())
}

fn history(seed: u64, t: &mut Tally) -> Result<(), String> {
    let mut run = boot(&three_sites(1 << 24, DriverKind::Staged, 1 << 20))?;
    let dep = run.fed.deployment.clone();
    let auth = dep.authenticator();
    let gw = dep.gateway.as_ref().unwrap().listen.clone();
    let rls_addr = dep.rls.as_ref().unwrap().listen.clone();
    let cred = auth.credential_for(ALICE);
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);

    // dataname → sites holding an online replica
    let mut shadow: BTreeMap<String, BTreeSet<&str>> = BTreeMap::new();
    let mut state = SyncState::default();
    let sync = |state: &SyncState, budget: Option<usize>| {
        let mcat = RemoteCatalog::new(&dep.master().listen, auth.service_credential());
        let rls = RemoteRls::new(&rls_addr, Some(auth.service_credential()));
        match budget {
            Some(k) => sync_once(&mcat, &CrashAfter::new(&rls, k), &gw, state),
            None => sync_once(&mcat, &rls, &gw, state),
        }
    };

    for round in 0..5 {
        for _ in 0..rng.gen_range(2..=7) {
            t.mutations += 1;
            let (site, vault) = SITES[rng.gen_range(0..3)];
            let b = BrokerClient::new(&dep.site(site).unwrap().listen, cred.clone());
            let dn = format!("/home/alice/s{}", rng.gen_range(0..12));
            match rng.gen_range(0..10) {
                0..=3 => {
                    let data = format!("{dn} {round} {}", rng.gen::<u32>());
                    expect(b.put(&dn, data.as_bytes()).map(drop), None, "put")?;
                    shadow.insert(dn, BTreeSet::from([site]));
                }
                4..=7 => {
                    let want = match shadow.get(&dn) {
                        None => Some(ErrorCode::NoEnt),
                        Some(s) if s.contains(site) => Some(ErrorCode::Exists),
                        Some(_) => None,
                    };
                    expect(b.replicate(&dn, vault).map(drop), want, "replicate")?;
                    if want.is_none() {
                        shadow.get_mut(&dn).unwrap().insert(site);
                    }
                }
                _ => {
                    let want = if shadow.remove(&dn).is_some() { None } else { Some(ErrorCode::NoEnt) };
                    expect(b.rm(&dn).map(drop), want, "rm")?;
                }
            }
        }
        match rng.gen_range(0..4) {
            0 => state = sync(&state, None).map_err(e2s)?,
            1 => match sync(&state, Some(rng.gen_range(0..6))) {
                Ok(s) => state = s,
                Err(e) => {
                    ensure!(e.code == ErrorCode::Unavail, "crashed sync reported {e}");
                    t.crashed += 1;
                }
            },
            k => {
                let c = if k == 2 { Component::Rls } else { Component::Site("master".into()) };
                run.fed.stop_component(&c);
                // With nothing pending a run never reaches the RLS and may succeed.
                match sync(&state, None) {
                    Err(e) => ensure!(e.code == ErrorCode::Unavail, "sync with {c} down gave {e}"),
                    Ok(s) => {
                        ensure!(
                            k == 2 && s.cursor == state.cursor,
                            "sync with {c} down succeeded: {s:?} from {state:?}"
                        );
                        state = s;
                    }
                }
                run.fed.start_component(&c).map_err(e2s)?;
                t.outages += 1;
            }
        }
    }

    state = sync(&state, None).map_err(e2s)?;
    let rls = RemoteRls::new(&rls_addr, None);
    let image: BTreeMap<String, BTreeSet<String>> = list_everything(&rls, 64)
        .map_err(e2s)?
        .into_iter()
        .map(|m| (m.guid.to_string(), m.surls.iter().map(|s| s.to_string()).collect()))
        .collect();
    let oracle: BTreeMap<String, BTreeSet<String>> = shadow
        .iter()
        .map(|(dn, sites)| {
            let surls = sites.iter().map(|s| format!("srm://{gw}/{s}/{}", &dn[1..])).collect();
            (format!("{:032x}", fnv128(dn.as_bytes())), surls)
        })
        .collect();
    ensure!(image == oracle, "history {seed}: RLS {image:?}\n  expected {oracle:?}");

    let mcat = RemoteCatalog::new(&dep.master().listen, auth.service_credential());
    let srls = RemoteRls::new(&rls_addr, Some(auth.service_credential()));
    let rep = full_rescan(&mcat, &srls, &gw).map_err(e2s)?;
    ensure!(rep.added == 0 && rep.removed == 0, "history {seed}: rescan after sync {rep:?}");
    let before = srls.mutation_count().map_err(e2s)?;
    sync(&state, None).map_err(e2s)?;
    ensure!(srls.mutation_count().map_err(e2s)? == before, "history {seed}: repeated sync mutated the RLS");
    Ok(())
}

pub fn run() -> Result<String, String> {
    let mut t = Tally::default();
    for seed in 0..HISTORIES {
        history(seed, &mut t)?;
    }
    ensure!(t.crashed > 0 && t.outages > 0, "no faults exercised");
    Ok(format!(
        "{HISTORIES} histories, {} mutations, {} mid-sync crashes, {} outages; RLS equals catalog oracle, rescan 0/0, rerun idempotent",
        t.mutations, t.crashed, t.outages
    ))
}
