use clap::{Args, Parser, Subcommand};
use gvf_core::broker::BrokerClient;
use gvf_core::config::{resolve_config_path, Deployment, DriverKind};
use gvf_core::daemon::{self, Component, Federation};
use gvf_core::gateway::client::{fetch_turl, GatewayClient};
use gvf_core::harness::{self, Mode, RunOptions, Scenario};
use gvf_core::mcat::{DataName, Perm, Subject};
use gvf_core::rls::{Guid, RemoteRls, RlsService, Surl};
use gvf_core::sync::derive_guid;
use gvf_core::wire::Credential;
use gvf_core::{GvfError, Result};
use serde_json::{json, Value};
use std::io::Read;
use std::path::{Path, PathBuf};

/// Client, operator and daemon front end for a gvf federation.
#[derive(Parser)]
#[command(name = "gvf", version)]
struct Cli {
    /// Deployment file (default: $GVF_CONFIG).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Subject to act as (default: the federation service identity).
    #[arg(long, global = true, env = "GVF_SUBJECT")]
    subject: Option<String>,
    /// Proof token for --subject. Derived from the deployment secret when omitted.
    #[arg(long, global = true, env = "GVF_TOKEN", hide_env_values = true)]
    token: Option<String>,
    /// Broker site to contact (default: the master).
    #[arg(long, global = true)]
    site: Option<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Store a local file (or stdin with `-`) under a dataname.
    Put { dataname: String, file: PathBuf },
    /// Read a dataname; bytes go to --output, or inline in the reply.
    Get {
        dataname: String,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    Rm { dataname: String },
    Replicate { dataname: String, vault: String },
    Stat { dataname: String },
    Ls {
        #[arg(default_value = "/")]
        prefix: String,
    },
    #[command(subcommand)]
    Srm(SrmCmd),
    #[command(subcommand)]
    Rls(RlsCmd),
    #[command(subcommand)]
    Sync(SyncCmd),
    #[command(subcommand)]
    Admin(AdminCmd),
    #[command(subcommand)]
    Harness(HarnessCmd),
    #[command(subcommand)]
    Clock(ClockCmd),
    /// Print the GUID a dataname is published under.
    Guid { dataname: String },
    /// Run daemons from the deployment: `vault:<id>`, `site:<id>`, `rls`, `driver`, `gateway` or `all`.
    Serve {
        #[arg(required = true)]
        components: Vec<String>,
    },
}

#[derive(Subcommand)]
enum SrmCmd {
    /// Request a file and fetch it through the returned TURL.
    Get {
        /// SURL, or a dataname to be resolved at the configured gateway.
        target: String,
        #[arg(long = "protocol", default_values_t = vec!["cache-http".to_string()])]
        protocols: Vec<String>,
        #[arg(long)]
        pin_lifetime: Option<u64>,
        #[arg(short, long)]
        output: Option<PathBuf>,
        /// Only prepare the TURL; do not transfer.
        #[arg(long)]
        no_fetch: bool,
    },
    Put {
        target: String,
        file: PathBuf,
        #[arg(long)]
        space_token: Option<String>,
    },
    Pin { target: String, lifetime: u64 },
    Unpin { pin: String },
    Reserve { bytes: u64, lifetime: u64 },
    Release { space: String },
    Status { request_id: String },
    Done { request_id: String },
    Ls {
        #[arg(default_value = "/")]
        prefix: String,
    },
    Metrics,
}

#[derive(Subcommand)]
enum RlsCmd {
    /// Resolve a dataname (or `--guid`) to SURLs; `--surl` resolves the other way.
    Lookup {
        target: String,
        #[arg(long, conflicts_with = "surl")]
        guid: bool,
        #[arg(long)]
        surl: bool,
    },
}

#[derive(Subcommand)]
enum SyncCmd {
    Once,
    Rescan,
}

#[derive(Subcommand)]
enum AdminCmd {
    /// Map a subject to a local user (derived from the CN when omitted).
    Mkuser { user: String, local: Option<String> },
    /// Add permissions (comma separated) for a subject to a file's ACL.
    Grant {
        dataname: String,
        grantee: String,
        perms: String,
    },
    /// Remove every permission of a subject from a file's ACL.
    Revoke { dataname: String, grantee: String },
    Orphans,
}

#[derive(Subcommand)]
enum HarnessCmd {
    Run(HarnessRun),
}

#[derive(Args)]
struct HarnessRun {
    file: PathBuf,
    /// Run every daemon inside this process instead of one process each.
    #[arg(long)]
    inproc: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// Where to write the run report.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Directory for daemon state (default: a fresh temporary directory).
    #[arg(long)]
    workdir: Option<PathBuf>,
    /// Replace the scenario's gateway driver.
    #[arg(long)]
    driver: Option<DriverKind>,
}

#[derive(Subcommand)]
enum ClockCmd {
    Advance { secs: u64 },
    Now,
}

struct Ctx {
    dep: Deployment,
    cred: Credential,
    site: Option<String>,
}

impl Ctx {
    fn broker(&self) -> Result<BrokerClient> {
        let site = self.site.as_deref().unwrap_or(&self.dep.master().site_id);
        let sc = self
            .dep
            .site(site)
            .ok_or_else(|| GvfError::badreq(format!("no site {site} in the deployment")))?;
        Ok(BrokerClient::new(&sc.listen, self.cred.clone()))
    }

    fn gateway(&self) -> Result<GatewayClient> {
        let g = self.dep.gateway.as_ref().ok_or_else(|| GvfError::badreq("deployment has no gateway"))?;
        Ok(GatewayClient::new(&g.listen, Some(self.cred.clone())))
    }

    fn surl(&self, target: &str) -> Result<String> {
        if target.starts_with("srm://") {
            return Ok(target.to_string());
        }
        let g = self.dep.gateway.as_ref().ok_or_else(|| GvfError::badreq("deployment has no gateway"))?;
        Ok(Surl::at(&g.listen, &g.site_id, DataName::parse(target)?)?.to_string())
    }

    fn rls(&self, cred: bool) -> Result<RemoteRls> {
        let r = self.dep.rls.as_ref().ok_or_else(|| GvfError::badreq("deployment has no rls"))?;
        Ok(RemoteRls::new(&r.listen, cred.then(|| self.cred.clone())))
    }
}

fn load_deployment(flag: Option<&Path>) -> Result<Deployment> {
    Deployment::load(&resolve_config_path(flag)?)
}

fn read_input(file: &Path) -> Result<Vec<u8>> {
    if file == Path::new("-") {
        let mut buf = Vec::new();
        std::io::stdin().read_to_end(&mut buf)?;
        return Ok(buf);
    }
    std::fs::read(file).map_err(|e| GvfError::badreq(format!("cannot read {}: {e}", file.display())))
}

fn emit_bytes(data: &[u8], output: Option<&Path>, mut obj: Value) -> Result<Value> {
    match output {
        Some(p) => std::fs::write(p, data)?,
        None => {
            obj["content"] = match std::str::from_utf8(data) {
                Ok(s) => json!(s),
                Err(_) => json!({"hex": hex::encode(data)}),
            }
        }
    }
    Ok(obj)
}

fn to<T: serde::Serialize>(v: T) -> Result<Value> {
    Ok(serde_json::to_value(v)?)
}

fn run(cli: Cli) -> Result<(Value, i32)> {
    // Commands that need no identity.
    match &cli.cmd {
        Cmd::Guid { dataname } => {
            return Ok((json!({"guid": derive_guid(&DataName::parse(dataname)?).as_str()}), 0));
        }
        Cmd::Harness(HarnessCmd::Run(h)) => return harness_run(h),
        _ => {}
    }
    let dep = load_deployment(cli.config.as_deref())?;
    if let Cmd::Serve { components } = &cli.cmd {
        serve(&dep, components)?;
        return Ok((json!({"stopped": true}), 0));
    }
    let auth = dep.authenticator();
    let subject = cli.subject.clone().unwrap_or_else(|| dep.service_subject.clone());
    let token = cli.token.clone().unwrap_or_else(|| auth.token_for(&subject));
    let ctx = Ctx {
        cred: Credential::new(subject, token),
        site: cli.site.clone(),
        dep,
    };
    let v = match cli.cmd {
        Cmd::Put { dataname, file } => to(ctx.broker()?.put(&dataname, &read_input(&file)?)?)?,
        Cmd::Get { dataname, output } => {
            let (out, data) = ctx.broker()?.get(&dataname)?;
            emit_bytes(&data, output.as_deref(), to(out)?)?
        }
        Cmd::Rm { dataname } => to(ctx.broker()?.rm(&dataname)?)?,
        Cmd::Replicate { dataname, vault } => to(ctx.broker()?.replicate(&dataname, &vault)?)?,
        Cmd::Stat { dataname } => to(ctx.broker()?.stat(&dataname)?)?,
        Cmd::Ls { prefix } => json!({"items": ctx.broker()?.ls(&prefix)?}),
        Cmd::Srm(c) => return srm(&ctx, c),
        Cmd::Rls(RlsCmd::Lookup { target, guid, surl }) => {
            let rls = ctx.rls(false)?;
            if surl {
                json!({"guid": rls.lookup_surl(&Surl::parse(&target)?)?.as_str()})
            } else {
                let g = if guid {
                    Guid::parse(&target)?
                } else {
                    derive_guid(&DataName::parse(&target)?)
                };
                json!({"guid": g.as_str(), "surls": rls.lookup_guid(&g)?})
            }
        }
        Cmd::Sync(SyncCmd::Once) => to(daemon::sync_once(&ctx.dep)?)?,
        Cmd::Sync(SyncCmd::Rescan) => {
            let mcat = gvf_core::mcat::RemoteCatalog::new(&ctx.dep.master().listen, ctx.cred.clone());
            let gw = ctx.dep.gateway.as_ref().ok_or_else(|| GvfError::badreq("deployment has no gateway"))?;
            to(gvf_core::sync::full_rescan(&mcat, &ctx.rls(false)?, &gw.listen)?)?
        }
        Cmd::Admin(a) => admin(&ctx, a)?,
        Cmd::Clock(ClockCmd::Advance { secs }) => json!({"now": ctx.gateway()?.clock_advance(secs)?}),
        Cmd::Clock(ClockCmd::Now) => json!({"now": ctx.gateway()?.clock_now()?}),
        Cmd::Guid { .. } | Cmd::Harness(_) | Cmd::Serve { .. } => unreachable!("handled above"),
    };
    Ok((v, 0))
}

fn srm(ctx: &Ctx, c: SrmCmd) -> Result<(Value, i32)> {
    let g = ctx.gateway()?;
    // A transfer that ends failed reports its error code as the exit status.
    let finished = |r: gvf_core::gateway::TransferRequest| -> Result<(Value, i32)> {
        let code = r.error.map(|e| e.exit_code()).unwrap_or(0);
        Ok((to(r)?, code))
    };
    match c {
        SrmCmd::Get {
            target,
            protocols,
            pin_lifetime,
            output,
            no_fetch,
        } => {
            let protocols: Vec<&str> = protocols.iter().map(String::as_str).collect();
            let r = g.get(&ctx.surl(&target)?, &protocols, pin_lifetime)?;
            if r.turl.is_none() || no_fetch {
                return finished(r);
            }
            let data = if r.turl.as_deref().is_some_and(|t| t.starts_with("vault://")) {
                g.fetch(&r)?
            } else {
                fetch_turl(r.turl.as_deref().unwrap_or_default(), None)?
            };
            let r = g.status(&r.request_id)?;
            let code = r.error.map(|e| e.exit_code()).unwrap_or(0);
            Ok((emit_bytes(&data, output.as_deref(), to(r)?)?, code))
        }
        SrmCmd::Put {
            target,
            file,
            space_token,
        } => {
            let data = read_input(&file)?;
            let r = g.put(&ctx.surl(&target)?, &["cache-http"], data.len() as u64, space_token.as_deref())?;
            if r.turl.is_none() {
                return finished(r);
            }
            finished(g.upload(&r, &data)?)
        }
        SrmCmd::Pin { target, lifetime } => Ok((to(g.pin(&ctx.surl(&target)?, lifetime)?)?, 0)),
        SrmCmd::Unpin { pin } => Ok((to(g.unpin(&pin)?)?, 0)),
        SrmCmd::Reserve { bytes, lifetime } => Ok((to(g.reserve(bytes, lifetime)?)?, 0)),
        SrmCmd::Release { space } => Ok((to(g.release(&space)?)?, 0)),
        SrmCmd::Status { request_id } => Ok((to(g.status(&request_id)?)?, 0)),
        SrmCmd::Done { request_id } => finished(g.done(&request_id)?),
        SrmCmd::Ls { prefix } => Ok((json!({"items": g.ls(&prefix)?}), 0)),
        SrmCmd::Metrics => Ok((to(g.metrics()?)?, 0)),
    }
}

fn admin(ctx: &Ctx, a: AdminCmd) -> Result<Value> {
    let b = ctx.broker()?;
    match a {
        AdminCmd::Mkuser { user, local } => b.mkuser(&user, local.as_deref()),
        AdminCmd::Grant {
            dataname,
            grantee,
            perms,
        } => {
            let mut grants = b.stat(&dataname)?.acl.grants;
            let set = grants.entry(Subject::parse(&grantee)?).or_default();
            for p in perms.split(',').filter(|p| !p.is_empty()) {
                set.insert(Perm::parse(p.trim())?);
            }
            to(b.set_acl(&dataname, &grants)?)
        }
        AdminCmd::Revoke { dataname, grantee } => {
            let mut grants = b.stat(&dataname)?.acl.grants;
            grants.remove(&Subject::parse(&grantee)?);
            to(b.set_acl(&dataname, &grants)?)
        }
        AdminCmd::Orphans => Ok(json!({"orphans": b.orphans()?})),
    }
}

fn harness_run(h: &HarnessRun) -> Result<(Value, i32)> {
    let mut scenario = Scenario::load(&h.file)?;
    if let Some(d) = h.driver {
        scenario.gateway.driver = d;
    }
    let mode = if h.inproc {
        Mode::Inproc
    } else {
        Mode::Subprocess {
            exe: std::env::current_exe()?,
        }
    };
    let report = harness::run(
        &scenario,
        &RunOptions {
            mode,
            seed: h.seed,
            workdir: h.workdir.clone(),
        },
    )?;
    if let Some(p) = &h.out {
        std::fs::write(p, serde_json::to_vec_pretty(&report)?)?;
    }
    let code = if report.passed { 0 } else { 1 };
    Ok((to(&report)?, code))
}

fn serve(dep: &Deployment, names: &[String]) -> Result<()> {
    if names.iter().any(|n| n == "all") {
        let _fed = Federation::start(dep.clone())?;
        loop {
            std::thread::park();
        }
    }
    let mut running = Vec::new();
    for n in names {
        let c: Component = n.parse()?;
        running.push(daemon::start(dep, &c)?);
        log::info!("{c} up");
    }
    // Daemons run until the process is killed.
    let first = running.remove(0);
    first.wait();
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let (out, code) = match run(cli) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("gvf: {e}");
            (json!({"error": e.code, "message": e.message}), e.code.exit_code())
        }
    };
    println!("{}", serde_json::to_string(&out).expect("json value serializes"));
    std::process::exit(code);
}
