use crate::common::*;
use crate::ensure;
use gvf_core::config::{Deployment, DriverKind};
use gvf_core::daemon::{self, Federation};
use serde_json::Value;
use std::fs;
use std::io::Write;
use std::os::unix::fs::PermissionsExt;
use std::os::unix::process::CommandExt;
use std::path::Path;
use std::process::{Command, Stdio};

const NOBODY: u32 = 65534;

fn uid() -> u32 {
    fs::read_to_string("/proc/self/status")
        .ok()
        .and_then(|s| s.lines().find(|l| l.starts_with("Uid:")).map(|l| l.to_string()))
        .and_then(|l| l.split_whitespace().nth(1).and_then(|u| u.parse().ok()))
        .unwrap_or(u32::MAX)
}

/// (subject, arguments, stdin)
fn script() -> Vec<(&'static str, Vec<&'static str>, &'static [u8])> {
    let a = "/home/alice/id.dat";
    vec![
        (ALICE, vec!["put", a, "-"], b"identity is the subject, not the account"),
        (ALICE, vec!["get", a], b""),
        (BOB, vec!["get", a], b""),
        (BOB, vec!["stat", a], b""),
        (ALICE, vec!["admin", "grant", a, BOB, "read"], b""),
        (BOB, vec!["get", a], b""),
        (ALICE, vec!["replicate", a, "v2"], b""),
        (BOB, vec!["ls", "/home/alice"], b""),
        (CAROL, vec!["ls", "/home/alice"], b""),
        // operator step: the sync worker owns its state directory
        ("", vec!["sync", "once"], b""),
        (CAROL, vec!["rls", "lookup", a], b""),
        (BOB, vec!["srm", "get", a], b""),
        (CAROL, vec!["srm", "get", a], b""),
        (ALICE, vec!["srm", "reserve", "100", "300"], b""),
        (BOB, vec!["rm", a], b""),
        (BOB, vec!["put", "/home/alice/intruder", "-"], b"x"),
        (ALICE, vec!["rm", a], b""),
        (ALICE, vec!["get", a], b""),
        (ALICE, vec!["srm", "metrics"], b""),
    ]
}

/// Fields that carry random suffixes by design.
fn normalize(v: &mut Value) {
    match v {
        Value::Object(m) => {
            for (k, x) in m.iter_mut() {
                if matches!(k.as_str(), "turl" | "token" | "space_token" | "pin_token") {
                    *x = Value::String("*".into());
                } else {
                    normalize(x);
                }
            }
        }
        Value::Array(a) => a.iter_mut().for_each(normalize),
        _ => {}
    }
}

fn run_script(bin: &Path, config: &Path, as_uid: u32, dep: &Deployment) -> Result<Vec<(i32, Value)>, String> {
    let auth = dep.authenticator();
    let mut out = Vec::new();
    for (subject, args, input) in script() {
        if subject.is_empty() {
            let st = daemon::sync_once(dep).map_err(e2s)?;
            out.push((0, serde_json::to_value(st).unwrap()));
            continue;
        }
        let mut cmd = Command::new(bin);
        cmd.env_clear()
            .arg("--config")
            .arg(config)
            .args(["--subject", subject, "--token", &auth.token_for(subject)])
            .args(&args)
            .current_dir("/")
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null());
        if as_uid != uid() {
            cmd.uid(as_uid).gid(as_uid);
        }
        let mut child = cmd.spawn().map_err(|e| format!("spawn as {as_uid}: {e}"))?;
        child.stdin.take().unwrap().write_all(input).map_err(|e| e.to_string())?;
        let o = child.wait_with_output().map_err(|e| e.to_string())?;
        let mut v: Value = serde_json::from_slice(&o.stdout)
            .map_err(|e| format!("{args:?} as uid {as_uid}: bad output {e}: {}", String::from_utf8_lossy(&o.stdout)))?;
        normalize(&mut v);
        out.push((o.status.code().unwrap_or(-1), v));
    }
    Ok(out)
}

fn wipe_except(dir: &Path, keep: &str) -> Result<(), String> {
    for e in fs::read_dir(dir).map_err(|e| e.to_string())? {
        let p = e.map_err(|e| e.to_string())?.path();
        if p.file_name().is_some_and(|n| n == keep) {
            continue;
        }
        if p.is_dir() { fs::remove_dir_all(&p) } else { fs::remove_file(&p) }.map_err(|e| e.to_string())?;
    }
    Ok(())
}

pub fn run() -> Result<String, String> {
    let me = uid();
    ensure!(me == 0, "UNVERIFIED: needs root to switch accounts (running as uid {me})");

    let bin_dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let bin = bin_dir.path().join("gvf");
    fs::copy(env!("CARGO_BIN_EXE_gvf"), &bin).map_err(|e| e.to_string())?;
    fs::set_permissions(bin_dir.path(), fs::Permissions::from_mode(0o755)).map_err(|e| e.to_string())?;
    fs::set_permissions(&bin, fs::Permissions::from_mode(0o755)).map_err(|e| e.to_string())?;

    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    fs::set_permissions(root.path(), fs::Permissions::from_mode(0o755)).map_err(|e| e.to_string())?;
    let dep = three_sites(1 << 24, DriverKind::Staged, 1 << 20)
        .deployment(root.path())
        .map_err(e2s)?;
    let config = root.path().join("deployment.json");
    dep.save(&config).map_err(e2s)?;
    fs::set_permissions(&config, fs::Permissions::from_mode(0o644)).map_err(|e| e.to_string())?;
    let mut runs = Vec::new();
    for account in [0, NOBODY] {
        wipe_except(root.path(), "deployment.json")?;
        let fed = Federation::start(dep.clone()).map_err(e2s)?;
        let r = run_script(&bin, &config, account, &dep);
        fed.shutdown();
        runs.push(r?);
    }
    let (a, b) = (&runs[0], &runs[1]);
    for (i, ((ca, va), (cb, vb))) in a.iter().zip(b).enumerate() {
        ensure!(ca == cb && va == vb, "step {i} {:?}: uid 0 gave {ca} {va}, uid {NOBODY} gave {cb} {vb}", script()[i].1);
    }
    let refused = a.iter().filter(|(c, _)| *c != 0).count();
    ensure!(refused >= 4 && refused < a.len(), "script outcomes look degenerate: {refused} refusals");
    Ok(format!(
        "{} steps as uid 0 and uid {NOBODY} with the same subjects; exit codes and outputs identical ({refused} refusals)",
        a.len()
    ))
}
