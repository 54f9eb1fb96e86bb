use crate::common::*;
use crate::ensure;
use gvf_core::harness::{self, Mode, RunOptions, Scenario};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use std::path::Path;

const VARIANTS: u64 = 100;

fn inproc() -> RunOptions {
    RunOptions {
        mode: Mode::Inproc,
        seed: None,
        workdir: None,
    }
}

fn step(actor: &str, op: &str, args: Value, expect: Value) -> Value {
    json!({"actor": actor, "op": op, "args": args, "expect": expect})
}

/// One randomized ACL over the mismatch scenario's federation. Returns the
/// scenario and how many subjects are expected to be refused.
fn variant(base: &Scenario, seed: u64) -> (Scenario, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let others = [BOB, CAROL, DAVE];
    let mut grants: Vec<(&str, Vec<&str>)> = others
        .iter()
        .map(|s| (*s, ["read", "write", "delete"].into_iter().filter(|_| rng.gen_bool(0.5)).collect()))
        .collect();
    if grants.iter().all(|(_, p)| p.contains(&"read")) {
        let k = rng.gen_range(0..grants.len());
        grants[k].1.retain(|p| *p != "read");
    }
    let dn = format!("/home/alice/v{seed}.dat");
    let mut w = vec![
        step(ALICE, "put", json!({"dataname": dn, "size": rng.gen_range(1..5000)}), json!({"status": "ok"})),
        step(
            ALICE,
            "set_acl",
            json!({"dataname": dn, "grants": grants.iter().filter(|g| !g.1.is_empty()).map(|(s, p)| (s.to_string(), json!(p))).collect::<serde_json::Map<_, _>>()}),
            json!({"status": "ok"}),
        ),
        json!({"op": "sync", "args": {}, "expect": {"status": "ok", "detail": {"published": 1}}}),
    ];
    for s in [ALICE, BOB, CAROL, DAVE] {
        w.push(step(s, "rls_lookup", json!({"dataname": dn}), json!({"status": "ok", "detail": {"surls": 1}})));
    }
    let mut refused = 0;
    let mut readers = vec![(ALICE, true)];
    readers.extend(grants.iter().map(|(s, p)| (*s, p.contains(&"read"))));
    for (s, can) in readers {
        let expect = if can {
            json!({"status": "done", "detail": {"intact": true}})
        } else {
            refused += 1;
            json!({"status": "failed", "error": "E_PERM"})
        };
        w.push(step(s, "srm_get", json!({"dataname": dn}), expect));
    }
    let mut sc = base.clone();
    sc.name = format!("mismatch-variant-{seed}");
    sc.subjects = users();
    sc.workload = serde_json::from_value(Value::Array(w)).expect("steps");
    (sc, refused)
}

pub fn run() -> Result<String, String> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios/mismatch.scn");
    let base = Scenario::load(&path).map_err(e2s)?;
    let r = harness::run(&base, &inproc()).map_err(e2s)?;
    ensure!(r.passed, "mismatch.scn itself failed: {:?}", r.steps.iter().find(|s| !s.met));

    let mut refusals = 0;
    for seed in 0..VARIANTS {
        let (sc, refused) = variant(&base, seed);
        sc.validate().map_err(e2s)?;
        let r = harness::run(&sc, &inproc()).map_err(e2s)?;
        if let Some(bad) = r.steps.iter().find(|s| !s.met) {
            return Err(format!("variant {seed}: step {} {} by {:?} gave {} {:?}", bad.index, bad.op, bad.actor, bad.status, bad.error));
        }
        let perm = r.metrics.requests_by_outcome.get("failed:E_PERM").copied().unwrap_or(0);
        ensure!(perm == refused as u64, "variant {seed}: {perm} refusals, oracle says {refused}");
        refusals += refused;
    }
    Ok(format!(
        "mismatch.scn passes; {VARIANTS} ACL variants: GUID resolves for all 4 subjects, {refusals} non-reader srm_gets failed E_PERM, every owner/reader get done"
    ))
}
