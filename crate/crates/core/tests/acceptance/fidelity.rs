use crate::common::*;
use crate::ensure;
use gvf_core::broker::BrokerClient;
use gvf_core::config::DriverKind;
use gvf_core::daemon::{self, free_port};
use gvf_core::gateway::client::GatewayClient;
use gvf_core::mcat::DataName;
use gvf_core::rls::Surl;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

const FILES: usize = 200;
const MAX: usize = 4 << 20;

fn sha(data: &[u8]) -> String {
    hex::encode(Sha256::digest(data))
}

/// Sizes spread evenly over powers of two up to 4 MiB, plus the extremes.
fn sizes(rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut v = vec![0, 1, MAX];
    while v.len() < FILES {
        let k = rng.gen_range(1..=22u32);
        v.push(rng.gen_range(1usize << (k - 1)..=(1usize << k)).min(MAX));
    }
    v
}

pub fn run() -> Result<String, String> {
    let r = boot(&three_sites(1 << 31, DriverKind::Staged, 64 << 20))?;
    let dep = &r.fed.deployment;
    let auth = dep.authenticator();
    let cred = auth.credential_for(ALICE);

    // A second gateway on the same federation, running the direct driver.
    let mut direct_dep = dep.clone();
    let gc = direct_dep.gateway.as_mut().expect("gateway");
    gc.driver = DriverKind::Direct;
    gc.listen = format!("127.0.0.1:{}", free_port().map_err(e2s)?);
    gc.http_listen = "127.0.0.1:0".into();
    gc.cache_dir = r.dir.path().join("cache-direct");
    gc.metrics_path = None;
    let direct_daemon = daemon::start_gateway(&direct_dep).map_err(e2s)?;

    let staged_ep = dep.gateway.as_ref().unwrap().listen.clone();
    let direct_ep = direct_dep.gateway.as_ref().unwrap().listen.clone();
    let staged = GatewayClient::new(&staged_ep, Some(cred.clone()));
    let direct = GatewayClient::new(&direct_ep, Some(cred.clone()));
    let sites = ["master", "east", "west"];
    let broker = |site: &str| BrokerClient::new(&dep.site(site).unwrap().listen, cred.clone());

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let sizes = sizes(&mut rng);
    let mut total = 0usize;
    for (i, &size) in sizes.iter().enumerate() {
        let dn = format!("/home/alice/rt/{i:03}.bin");
        let mut data = vec![0u8; size];
        rng.fill_bytes(&mut data);
        let want = sha(&data);
        total += size;

        let e = broker(sites[i % 3]).put(&dn, &data).map_err(e2s)?;
        ensure!(e.digest == want && e.size == size as u64, "{dn}: catalog records {} / {}", e.digest, e.size);

        let (out, got) = broker(sites[rng.gen_range(0..3)]).get(&dn).map_err(e2s)?;
        ensure!(got == data, "{dn}: broker get returned different bytes");
        ensure!(out.digest == want, "{dn}: broker get digest {}", out.digest);

        let name = DataName::parse(&dn).map_err(e2s)?;
        let surl = Surl::at(&staged_ep, "east", name.clone()).map_err(e2s)?.to_string();
        let req = staged.get(&surl, &["cache-http"], None).map_err(e2s)?;
        ensure!(req.error.is_none(), "{dn}: staged get failed {:?}", req.error);
        ensure!(req.digest.as_deref() == Some(want.as_str()), "{dn}: staged digest {:?}", req.digest);
        ensure!(staged.fetch(&req).map_err(e2s)? == data, "{dn}: staged transfer differs");

        let surl = Surl::at(&direct_ep, "east", name).map_err(e2s)?.to_string();
        let req = direct.get(&surl, &["vault-stream"], None).map_err(e2s)?;
        ensure!(
            req.turl.as_deref().is_some_and(|t| t.starts_with("vault://")),
            "{dn}: direct get gave {:?}",
            req.turl
        );
        ensure!(req.digest.as_deref() == Some(want.as_str()), "{dn}: direct digest {:?}", req.digest);
        ensure!(direct.fetch(&req).map_err(e2s)? == data, "{dn}: direct transfer differs");
    }
    let m = direct.metrics().map_err(e2s)?;
    ensure!(m.staging_copies == 0, "direct gateway staged {} copies", m.staging_copies);
    direct_daemon.shutdown();
    Ok(format!(
        "{FILES} files, {} B..{} B, {:.1} MiB; broker, staged and direct paths byte-identical, digests match catalog",
        sizes.iter().min().unwrap(),
        sizes.iter().max().unwrap(),
        total as f64 / (1 << 20) as f64
    ))
}
