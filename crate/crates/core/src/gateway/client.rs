//! Client side of the gateway: `srm.*` over the wire plus TURL transfers.

use super::cache::{PinToken, Reservation};
use super::{Metrics, TransferRequest};
use crate::broker::ListingItem;
use crate::error::{ErrorCode, GvfError, Result};
use crate::vault::{BlobService, RemoteVault};
use crate::wire::{Client, Credential};
use serde::Deserialize;
use serde_json::json;
use std::io::Read;
use std::time::Duration;

pub struct GatewayClient {
    client: Client,
    cred: Option<Credential>,
}

#[derive(Deserialize)]
struct Now {
    now: u64,
}

impl GatewayClient {
    pub fn new(addr: &str, cred: Option<Credential>) -> Self {
        GatewayClient {
            client: Client::new(addr),
            cred,
        }
    }

    fn call<T: serde::de::DeserializeOwned>(&self, op: &str, args: serde_json::Value) -> Result<T> {
        self.client.call_typed(op, self.cred.as_ref(), args)
    }

    pub fn get(&self, surl: &str, protocols: &[&str], pin_lifetime: Option<u64>) -> Result<TransferRequest> {
        self.call(
            "srm.get",
            json!({"surl": surl, "protocols": protocols, "pin_lifetime": pin_lifetime}),
        )
    }

    pub fn put(&self, surl: &str, protocols: &[&str], size_hint: u64, space_token: Option<&str>) -> Result<TransferRequest> {
        self.call(
            "srm.put",
            json!({"surl": surl, "protocols": protocols, "size_hint": size_hint, "space_token": space_token}),
        )
    }

    pub fn pin(&self, surl: &str, lifetime: u64) -> Result<PinToken> {
        self.call("srm.pin", json!({"surl": surl, "lifetime": lifetime}))
    }

    pub fn unpin(&self, token: &str) -> Result<()> {
        self.call("srm.unpin", json!({"token": token}))
    }

    pub fn reserve(&self, bytes: u64, lifetime: u64) -> Result<Reservation> {
        self.call("srm.reserve", json!({"bytes": bytes, "lifetime": lifetime}))
    }

    pub fn release(&self, token: &str) -> Result<()> {
        self.call("srm.release", json!({"token": token}))
    }

    pub fn status(&self, request_id: &str) -> Result<TransferRequest> {
        self.call("srm.status", json!({"request_id": request_id}))
    }

    pub fn done(&self, request_id: &str) -> Result<TransferRequest> {
        self.call("srm.done", json!({"request_id": request_id}))
    }

    pub fn ls(&self, prefix: &str) -> Result<Vec<ListingItem>> {
        self.call("srm.ls", json!({"prefix": prefix}))
    }

    pub fn metrics(&self) -> Result<Metrics> {
        self.call("srm.metrics", json!({}))
    }

    pub fn clock_now(&self) -> Result<u64> {
        Ok(self.call::<Now>("clock.now", json!({}))?.now)
    }

    pub fn clock_advance(&self, secs: u64) -> Result<u64> {
        Ok(self.call::<Now>("clock.advance", json!({"secs": secs}))?.now)
    }

    /// Reads a TURL. `vault://` reads go straight to the vault and are
    /// confirmed with `srm.done` afterwards.
    pub fn fetch(&self, req: &TransferRequest) -> Result<Vec<u8>> {
        let turl = req
            .turl
            .as_deref()
            .ok_or_else(|| GvfError::badreq(format!("request {} has no turl", req.request_id)))?;
        let data = fetch_turl(turl, self.cred.clone())?;
        if turl.starts_with("vault://") {
            self.done(&req.request_id)?;
        }
        Ok(data)
    }

    /// Sends upload bytes to a put request's TURL and returns the final request,
    /// failed or done.
    pub fn upload(&self, req: &TransferRequest, data: &[u8]) -> Result<TransferRequest> {
        let turl = req
            .turl
            .as_deref()
            .ok_or_else(|| GvfError::badreq(format!("request {} has no turl", req.request_id)))?;
        let sent = upload_turl(turl, data);
        let r = self.status(&req.request_id)?;
        match sent {
            Err(e) if !r.state.is_terminal() => Err(e),
            _ => Ok(r),
        }
    }
}

fn agent() -> ureq::Agent {
    ureq::AgentBuilder::new().timeout(Duration::from_secs(60)).build()
}

fn http_url(turl: &str) -> Result<String> {
    let rest = turl
        .strip_prefix("cache://")
        .ok_or_else(|| GvfError::badreq(format!("not a cache turl: {turl}")))?;
    let (host, token) = rest
        .split_once('/')
        .ok_or_else(|| GvfError::badreq(format!("malformed turl {turl}")))?;
    Ok(format!("http://{host}/t/{token}"))
}

fn http_error(e: ureq::Error) -> GvfError {
    match e {
        ureq::Error::Status(status, resp) => {
            let text = resp.into_string().unwrap_or_default();
            let code = text
                .split(':')
                .next()
                .and_then(ErrorCode::parse)
                .unwrap_or(match status {
                    404 => ErrorCode::NoEnt,
                    403 => ErrorCode::Perm,
                    400 => ErrorCode::BadReq,
                    _ => ErrorCode::Unavail,
                });
            GvfError::new(code, format!("http {status}: {}", text.trim()))
        }
        ureq::Error::Transport(t) => GvfError::unavail(format!("http transport: {t}")),
    }
}

/// Reads any TURL the gateway hands out.
pub fn fetch_turl(turl: &str, cred: Option<Credential>) -> Result<Vec<u8>> {
    if let Some(rest) = turl.strip_prefix("vault://") {
        let (addr, blob) = rest
            .split_once('/')
            .ok_or_else(|| GvfError::badreq(format!("malformed turl {turl}")))?;
        let cred = cred.ok_or_else(|| GvfError::perm("vault reads need a credential"))?;
        return RemoteVault::new(addr, cred).read_blob(blob, None);
    }
    let resp = agent().get(&http_url(turl)?).call().map_err(http_error)?;
    let mut out = Vec::new();
    resp.into_reader().read_to_end(&mut out)?;
    Ok(out)
}

pub fn upload_turl(turl: &str, data: &[u8]) -> Result<()> {
    agent().put(&http_url(turl)?).send_bytes(data).map_err(http_error)?;
    Ok(())
}
