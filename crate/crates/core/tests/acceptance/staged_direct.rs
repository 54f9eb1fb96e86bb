use crate::common::*;
use crate::ensure;
use gvf_core::config::DriverKind;
use gvf_core::harness::{self, Mode, RunOptions, RunReport, Scenario};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use std::collections::BTreeSet;
use std::path::Path;

fn run_with(sc: &Scenario, driver: DriverKind) -> Result<RunReport, String> {
    let mut sc = sc.clone();
    sc.gateway.driver = driver;
    let r = harness::run(
        &sc,
        &RunOptions {
            mode: Mode::Inproc,
            seed: None,
            workdir: None,
        },
    )
    .map_err(e2s)?;
    if let Some(bad) = r.steps.iter().find(|s| !s.met) {
        return Err(format!("{} under {driver:?}: step {} {} gave {} {:?}", sc.name, bad.index, bad.op, bad.status, bad.error));
    }
    Ok(r)
}

/// Datanames fetched through the gateway, counted straight from the workload.
fn distinct_gets(sc: &Scenario) -> (usize, usize) {
    let gets: Vec<&str> = sc
        .workload
        .iter()
        .filter(|s| s.op == "srm_get")
        .filter_map(|s| s.args.get("dataname").and_then(Value::as_str))
        .collect();
    (gets.len(), gets.iter().collect::<BTreeSet<_>>().len())
}

fn generated(seed: u64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = (0..30).map(|i| format!("/home/alice/w{i:02}.dat")).collect();
    let mut w = Vec::new();
    for n in &names {
        w.push(json!({"actor": ALICE, "op": "put", "args": {"dataname": n, "size": rng.gen_range(0..4000)}, "expect": {"status": "ok"}}));
        w.push(json!({"actor": ALICE, "op": "replicate", "args": {"dataname": n, "vault": "v1"}, "expect": {"status": "ok", "detail": {"replicas": 2}}}));
    }
    for _ in 0..60 {
        let n = &names[rng.gen_range(0..names.len())];
        w.push(json!({"actor": ALICE, "op": "srm_get",
            "args": {"dataname": n, "protocols": ["vault-stream", "cache-http"]},
            "expect": {"status": "done", "detail": {"intact": true}}}));
    }
    let t = three_sites(1 << 26, DriverKind::Staged, 1 << 20);
    serde_json::from_value(json!({
        "name": format!("generated-{seed}"),
        "seed": seed,
        "sites": t.sites,
        "subjects": t.users,
        "gateway": t.gateway,
        "workload": w,
    }))
    .expect("scenario")
}

pub fn run() -> Result<String, String> {
    let bundled = Scenario::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios/staged_vs_direct.scn")).map_err(e2s)?;
    let mut lines = Vec::new();
    for sc in [bundled, generated(17), generated(18)] {
        let (gets, distinct) = distinct_gets(&sc);
        let repeats = gets - distinct;
        ensure!(gets >= 50, "{}: only {gets} gets", sc.name);
        ensure!(repeats * 10 >= gets * 3, "{}: only {repeats} repeats of {gets}", sc.name);
        let staged = run_with(&sc, DriverKind::Staged)?;
        let direct = run_with(&sc, DriverKind::Direct)?;
        ensure!(
            staged.metrics.staging_copies == distinct as u64,
            "{}: staged made {} copies, {distinct} distinct cold names",
            sc.name,
            staged.metrics.staging_copies
        );
        ensure!(direct.metrics.staging_copies == 0, "{}: direct made {} copies", sc.name, direct.metrics.staging_copies);
        ensure!(
            staged.bytes_delivered == direct.bytes_delivered && staged.metrics.bytes_delivered == direct.metrics.bytes_delivered,
            "{}: delivered {} staged vs {} direct",
            sc.name,
            staged.bytes_delivered,
            direct.bytes_delivered
        );
        // Co-located replicas: the direct driver reads only the gateway's own site.
        ensure!(
            direct.bytes_served_by_site.keys().all(|s| s == "east"),
            "{}: direct served from {:?}",
            sc.name,
            direct.bytes_served_by_site
        );
        lines.push(format!(
            "{}: {gets} gets, {repeats} repeats, staged={distinct} copies, direct=0, {} B each",
            sc.name, staged.bytes_delivered
        ));
    }
    Ok(lines.join("; "))
}
