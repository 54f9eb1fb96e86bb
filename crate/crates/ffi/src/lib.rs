//! C ABI for gvf clients.
//!
//! Every call returns a `GvfStatus`. On failure the message is kept per thread
//! and read with `gvf_last_error`. Buffers and strings handed out by this
//! library must be released with `gvf_buffer_free` and `gvf_string_free`.

use gvf_core::broker::BrokerClient;
use gvf_core::config::Deployment;
use gvf_core::gateway::client::GatewayClient;
use gvf_core::mcat::DataName;
use gvf_core::rls::{RemoteRls, RlsService, Surl};
use gvf_core::sync::derive_guid;
use gvf_core::wire::Credential;
use gvf_core::{ErrorCode, GvfError};
use libc::{c_char, size_t};
use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

/// Result of every call. Values 10 to 16 match the CLI's exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GvfStatus {
    Ok = 0,
    /// A pointer was null or a string was not UTF-8.
    InvalidArg = 1,
    /// The library panicked. The handle should not be reused.
    Internal = 2,
    EPerm = 10,
    ENoent = 11,
    EExists = 12,
    ENospace = 13,
    EPinned = 14,
    EBadreq = 15,
    EUnavail = 16,
}

impl From<ErrorCode> for GvfStatus {
    fn from(c: ErrorCode) -> Self {
        match c {
            ErrorCode::Perm => GvfStatus::EPerm,
            ErrorCode::NoEnt => GvfStatus::ENoent,
            ErrorCode::Exists => GvfStatus::EExists,
            ErrorCode::NoSpace => GvfStatus::ENospace,
            ErrorCode::Pinned => GvfStatus::EPinned,
            ErrorCode::BadReq => GvfStatus::EBadreq,
            ErrorCode::Unavail => GvfStatus::EUnavail,
        }
    }
}

/// Opaque client bound to one deployment and one subject.
pub struct GvfClient {
    dep: Deployment,
    cred: Credential,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

enum Failure {
    Arg(String),
    Core(GvfError),
}

impl From<GvfError> for Failure {
    fn from(e: GvfError) -> Self {
        Failure::Core(e)
    }
}

/// Runs `f`, recording any error and mapping panics to `Internal`.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> GvfStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GvfStatus::Ok,
        Ok(Err(Failure::Arg(m))) => {
            set_error(m);
            GvfStatus::InvalidArg
        }
        Ok(Err(Failure::Core(e))) => {
            set_error(e.to_string());
            e.code.into()
        }
        Err(_) => {
            set_error("internal panic".into());
            GvfStatus::Internal
        }
    }
}

unsafe fn arg_str<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::Arg(format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Arg(format!("{name} is not UTF-8")))
}

unsafe fn opt_str<'a>(p: *const c_char, name: &str) -> Result<Option<&'a str>, Failure> {
    if p.is_null() {
        Ok(None)
    } else {
        arg_str(p, name).map(Some)
    }
}

unsafe fn handle<'a>(h: *const GvfClient) -> Result<&'a GvfClient, Failure> {
    h.as_ref().ok_or_else(|| Failure::Arg("client handle is null".into()))
}

unsafe fn out<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| Failure::Arg(format!("{name} is null")))
}

fn into_c_string(s: String) -> *mut c_char {
    CString::new(s).map(CString::into_raw).unwrap_or(ptr::null_mut())
}

unsafe fn give_buffer(data: Vec<u8>, buf: *mut *mut u8, len: *mut size_t) -> Result<(), Failure> {
    let buf = out(buf, "out_buf")?;
    let len = out(len, "out_len")?;
    let boxed = data.into_boxed_slice();
    *len = boxed.len();
    *buf = Box::into_raw(boxed) as *mut u8;
    Ok(())
}

impl GvfClient {
    fn broker(&self, site: Option<&str>) -> Result<BrokerClient, Failure> {
        let site = site.unwrap_or(&self.dep.master().site_id);
        let sc = self
            .dep
            .site(site)
            .ok_or_else(|| GvfError::badreq(format!("no site {site} in the deployment")))?;
        Ok(BrokerClient::new(&sc.listen, self.cred.clone()))
    }
}

/// Opens a client from a deployment file. A null `subject` acts as the
/// federation service identity; a null `token` is derived from the
/// deployment secret. Free with `gvf_client_free`.
///
/// # Safety
/// String arguments must be null or NUL-terminated. `out_client` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gvf_client_open(
    config_path: *const c_char,
    subject: *const c_char,
    token: *const c_char,
    out_client: *mut *mut GvfClient,
) -> GvfStatus {
    guard(|| {
        let slot = out(out_client, "out_client")?;
        *slot = ptr::null_mut();
        let dep = Deployment::load(Path::new(arg_str(config_path, "config_path")?))?;
        let auth = dep.authenticator();
        let subject = opt_str(subject, "subject")?
            .map(String::from)
            .unwrap_or_else(|| dep.service_subject.clone());
        let token = opt_str(token, "token")?
            .map(String::from)
            .unwrap_or_else(|| auth.token_for(&subject));
        *slot = Box::into_raw(Box::new(GvfClient {
            cred: Credential::new(subject, token),
            dep,
        }));
        Ok(())
    })
}

/// # Safety
/// `client` must come from `gvf_client_open` and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn gvf_client_free(client: *mut GvfClient) {
    if !client.is_null() {
        drop(Box::from_raw(client));
    }
}

/// Stores `len` bytes under `dataname` through the broker at `site`
/// (null for the master).
///
/// # Safety
/// `data` must point to `len` readable bytes (or be null with `len == 0`).
#[no_mangle]
pub unsafe extern "C" fn gvf_put(
    client: *const GvfClient,
    site: *const c_char,
    dataname: *const c_char,
    data: *const u8,
    len: size_t,
) -> GvfStatus {
    guard(|| {
        let c = handle(client)?;
        let bytes: &[u8] = if len == 0 {
            &[]
        } else if data.is_null() {
            return Err(Failure::Arg("data is null".into()));
        } else {
            std::slice::from_raw_parts(data, len)
        };
        c.broker(opt_str(site, "site")?)?.put(arg_str(dataname, "dataname")?, bytes)?;
        Ok(())
    })
}

/// Reads `dataname` through the broker at `site` (null for the master).
/// The bytes are returned in `*out_buf`, to be released with `gvf_buffer_free`.
///
/// # Safety
/// `out_buf` and `out_len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gvf_get(
    client: *const GvfClient,
    site: *const c_char,
    dataname: *const c_char,
    out_buf: *mut *mut u8,
    out_len: *mut size_t,
) -> GvfStatus {
    guard(|| {
        let c = handle(client)?;
        let (_, data) = c.broker(opt_str(site, "site")?)?.get(arg_str(dataname, "dataname")?)?;
        give_buffer(data, out_buf, out_len)
    })
}

/// # Safety
/// String arguments must be null or NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn gvf_rm(client: *const GvfClient, site: *const c_char, dataname: *const c_char) -> GvfStatus {
    guard(|| {
        let c = handle(client)?;
        c.broker(opt_str(site, "site")?)?.rm(arg_str(dataname, "dataname")?)?;
        Ok(())
    })
}

/// Fetches `dataname` through the deployment's gateway using `cache-http`.
/// A request that ends failed returns its error code.
///
/// # Safety
/// `out_buf` and `out_len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gvf_srm_get(
    client: *const GvfClient,
    dataname: *const c_char,
    out_buf: *mut *mut u8,
    out_len: *mut size_t,
) -> GvfStatus {
    guard(|| {
        let c = handle(client)?;
        let g = c.dep.gateway.as_ref().ok_or_else(|| GvfError::badreq("deployment has no gateway"))?;
        let surl = Surl::at(&g.listen, &g.site_id, DataName::parse(arg_str(dataname, "dataname")?)?)?;
        let gw = GatewayClient::new(&g.listen, Some(c.cred.clone()));
        let r = gw.get(&surl.to_string(), &["cache-http"], None)?;
        if let Some(e) = r.error {
            return Err(GvfError::new(e, format!("request {} failed", r.request_id)).into());
        }
        let data = gw.fetch(&r)?;
        give_buffer(data, out_buf, out_len)
    })
}

/// Looks `dataname` up in the replica location service. No credential is
/// sent. `*out_json` receives `{"guid": ..., "surls": [...]}`; release it
/// with `gvf_string_free`.
///
/// # Safety
/// `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gvf_rls_lookup(
    client: *const GvfClient,
    dataname: *const c_char,
    out_json: *mut *mut c_char,
) -> GvfStatus {
    guard(|| {
        let c = handle(client)?;
        let slot = out(out_json, "out_json")?;
        let r = c.dep.rls.as_ref().ok_or_else(|| GvfError::badreq("deployment has no rls"))?;
        let guid = derive_guid(&DataName::parse(arg_str(dataname, "dataname")?)?);
        let surls: Vec<String> = RemoteRls::new(&r.listen, None)
            .lookup_guid(&guid)?
            .iter()
            .map(ToString::to_string)
            .collect();
        let text = format!(
            "{{\"guid\":\"{}\",\"surls\":[{}]}}",
            guid.as_str(),
            surls.iter().map(|s| format!("{s:?}")).collect::<Vec<_>>().join(",")
        );
        *slot = into_c_string(text);
        Ok(())
    })
}

/// Writes the GUID a dataname is published under. Release with `gvf_string_free`.
///
/// # Safety
/// `dataname` must be NUL-terminated; `out_guid` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gvf_derive_guid(dataname: *const c_char, out_guid: *mut *mut c_char) -> GvfStatus {
    guard(|| {
        let slot = out(out_guid, "out_guid")?;
        let dn = DataName::parse(arg_str(dataname, "dataname")?)?;
        *slot = into_c_string(derive_guid(&dn).as_str().to_string());
        Ok(())
    })
}

/// Writes the proof token for `subject` under `secret`. Release with `gvf_string_free`.
///
/// # Safety
/// Both strings must be NUL-terminated; `out_token` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gvf_proof_token(
    secret: *const c_char,
    subject: *const c_char,
    out_token: *mut *mut c_char,
) -> GvfStatus {
    guard(|| {
        let slot = out(out_token, "out_token")?;
        let t = gvf_core::digest::proof_token(arg_str(secret, "secret")?, arg_str(subject, "subject")?);
        *slot = into_c_string(t);
        Ok(())
    })
}

/// Message for the last failed call on this thread, or null. Valid until the
/// next call on the same thread.
#[no_mangle]
pub extern "C" fn gvf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Static name of a status, such as `"E_PERM"`.
#[no_mangle]
pub extern "C" fn gvf_status_name(status: GvfStatus) -> *const c_char {
    let s: &'static [u8] = match status {
        GvfStatus::Ok => b"OK\0",
        GvfStatus::InvalidArg => b"INVALID_ARG\0",
        GvfStatus::Internal => b"INTERNAL\0",
        GvfStatus::EPerm => b"E_PERM\0",
        GvfStatus::ENoent => b"E_NOENT\0",
        GvfStatus::EExists => b"E_EXISTS\0",
        GvfStatus::ENospace => b"E_NOSPACE\0",
        GvfStatus::EPinned => b"E_PINNED\0",
        GvfStatus::EBadreq => b"E_BADREQ\0",
        GvfStatus::EUnavail => b"E_UNAVAIL\0",
    };
    s.as_ptr() as *const c_char
}

/// # Safety
/// `buf` and `len` must come from one call of this library. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn gvf_buffer_free(buf: *mut u8, len: size_t) {
    if !buf.is_null() {
        drop(Box::from_raw(ptr::slice_from_raw_parts_mut(buf, len)));
    }
}

/// # Safety
/// `s` must come from this library. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn gvf_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
