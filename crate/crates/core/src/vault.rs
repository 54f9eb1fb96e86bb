//! Content-addressed blob storage owned by one vault daemon.
//!
//! Layout: `root_dir/<first 2 hex>/<blob_id>`, with in-flight writes under
//! `root_dir/tmp/`. A blob becomes visible only through an atomic rename after
//! its digest has been verified, so readers never see a partial blob.

use crate::auth::Authenticator;
use crate::digest::{is_digest_hex, ContentHasher};
use crate::error::{GvfError, Result};
use crate::wire::{Client, ConnInfo, Credential, Handler, Reply, Request};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VaultConfig {
    pub vault_id: String,
    pub site_id: String,
    pub root_dir: PathBuf,
    pub capacity: u64,
    pub listen: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobStat {
    pub size: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobInfo {
    pub size: u64,
    pub digest: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub used_bytes: u64,
    pub capacity: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WriteOutcome {
    pub blob_id: String,
    pub size: u64,
    /// The blob was already stored; nothing was written.
    pub already_present: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeleteOutcome {
    pub already_absent: bool,
}

/// Half-open byte range `[start, end)`.
pub type ByteRange = (u64, u64);

pub trait BlobService: Send + Sync {
    fn write_blob(&self, data: &[u8], declared_digest: &str) -> Result<WriteOutcome>;
    fn read_blob(&self, blob_id: &str, range: Option<ByteRange>) -> Result<Vec<u8>>;
    fn delete_blob(&self, blob_id: &str) -> Result<DeleteOutcome>;
    fn stat_blob(&self, blob_id: &str) -> Result<BlobInfo>;
    fn usage(&self) -> Result<Usage>;
}

struct Accounting {
    sizes: HashMap<String, u64>,
    used: u64,
    /// Bytes promised to writes that have not landed yet.
    pending: u64,
}

pub struct VaultStore {
    root: PathBuf,
    capacity: u64,
    acct: Mutex<Accounting>,
    tmp_counter: AtomicU64,
}

impl VaultStore {
    /// Opens a blob directory, discarding temp files left by a crash and
    /// rebuilding usage from the visible blobs.
    pub fn open(root: &Path, capacity: u64) -> Result<VaultStore> {
        if capacity == 0 {
            return Err(GvfError::badreq("vault capacity must be positive"));
        }
        fs::create_dir_all(root)?;
        let tmp = root.join("tmp");
        if tmp.exists() {
            fs::remove_dir_all(&tmp)?;
        }
        fs::create_dir_all(&tmp)?;
        let mut sizes = HashMap::new();
        for shard in fs::read_dir(root)? {
            let shard = shard?;
            let name = shard.file_name().to_string_lossy().into_owned();
            if name == "tmp" || !shard.file_type()?.is_dir() {
                continue;
            }
            for f in fs::read_dir(shard.path())? {
                let f = f?;
                let id = f.file_name().to_string_lossy().into_owned();
                if is_digest_hex(&id) && id.starts_with(&name) {
                    sizes.insert(id, f.metadata()?.len());
                }
            }
        }
        let used = sizes.values().sum();
        Ok(VaultStore {
            root: root.to_path_buf(),
            capacity,
            acct: Mutex::new(Accounting {
                sizes,
                used,
                pending: 0,
            }),
            tmp_counter: AtomicU64::new(0),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn blob_path(&self, blob_id: &str) -> PathBuf {
        self.root.join(&blob_id[..2]).join(blob_id)
    }

    fn check_id(blob_id: &str) -> Result<()> {
        if is_digest_hex(blob_id) {
            Ok(())
        } else {
            Err(GvfError::badreq(format!("malformed blob id {blob_id:?}")))
        }
    }

    fn write_temp(&self, data: &[u8]) -> io::Result<(PathBuf, String)> {
        let n = self.tmp_counter.fetch_add(1, Ordering::Relaxed);
        let path = self.root.join("tmp").join(format!("{}-{n}", std::process::id()));
        let mut f = File::create(&path)?;
        let mut hasher = ContentHasher::new();
        for chunk in data.chunks(1 << 20) {
            hasher.update(chunk);
            f.write_all(chunk)?;
        }
        f.sync_all()?;
        Ok((path, hasher.finish_hex()))
    }

    /// Recomputes every stored blob's digest; returns ids whose content no longer
    /// matches their name.
    pub fn verify_all(&self) -> Result<Vec<String>> {
        let ids: Vec<String> = self.acct.lock().sizes.keys().cloned().collect();
        let mut bad = Vec::new();
        for id in ids {
            let data = fs::read(self.blob_path(&id))?;
            if crate::digest::sha256_hex(&data) != id {
                bad.push(id);
            }
        }
        Ok(bad)
    }
}

fn sync_parent(path: &Path) {
    if let Some(p) = path.parent() {
        if let Ok(d) = File::open(p) {
            let _ = d.sync_all();
        }
    }
}

impl BlobService for VaultStore {
    fn write_blob(&self, data: &[u8], declared_digest: &str) -> Result<WriteOutcome> {
        Self::check_id(declared_digest)?;
        let size = data.len() as u64;
        {
            let mut a = self.acct.lock();
            if a.sizes.contains_key(declared_digest) {
                return Ok(WriteOutcome {
                    blob_id: declared_digest.to_string(),
                    size,
                    already_present: true,
                });
            }
            if a.used + a.pending + size > self.capacity {
                return Err(GvfError::nospace(format!(
                    "vault full: {} used, {} pending, {} requested, capacity {}",
                    a.used, a.pending, size, self.capacity
                )));
            }
            a.pending += size;
        }
        let release = |a: &mut Accounting| a.pending -= size;
        let (tmp, actual) = match self.write_temp(data) {
            Ok(v) => v,
            Err(e) => {
                release(&mut self.acct.lock());
                return Err(e.into());
            }
        };
        if actual != declared_digest {
            let _ = fs::remove_file(&tmp);
            release(&mut self.acct.lock());
            return Err(GvfError::badreq(format!(
                "digest mismatch: declared {declared_digest}, content {actual}"
            )));
        }
        let dest = self.blob_path(declared_digest);
        let mut a = self.acct.lock();
        release(&mut a);
        if a.sizes.contains_key(declared_digest) {
            let _ = fs::remove_file(&tmp);
            return Ok(WriteOutcome {
                blob_id: actual,
                size,
                already_present: true,
            });
        }
        let landed = dest
            .parent()
            .map_or(Ok(()), fs::create_dir_all)
            .and_then(|_| fs::rename(&tmp, &dest));
        if let Err(e) = landed {
            let _ = fs::remove_file(&tmp);
            return Err(e.into());
        }
        sync_parent(&dest);
        a.sizes.insert(actual.clone(), size);
        a.used += size;
        Ok(WriteOutcome {
            blob_id: actual,
            size,
            already_present: false,
        })
    }

    fn read_blob(&self, blob_id: &str, range: Option<ByteRange>) -> Result<Vec<u8>> {
        Self::check_id(blob_id)?;
        let mut f = match File::open(self.blob_path(blob_id)) {
            Ok(f) => f,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                return Err(GvfError::noent(format!("blob {blob_id} not stored here")))
            }
            Err(e) => return Err(e.into()),
        };
        let size = f.metadata()?.len();
        let (start, end) = range.unwrap_or((0, size));
        if start > end || end > size {
            return Err(GvfError::badreq(format!("range [{start},{end}) outside blob of {size} bytes")));
        }
        f.seek(SeekFrom::Start(start))?;
        let mut buf = Vec::with_capacity((end - start) as usize);
        f.take(end - start).read_to_end(&mut buf)?;
        Ok(buf)
    }

    fn delete_blob(&self, blob_id: &str) -> Result<DeleteOutcome> {
        Self::check_id(blob_id)?;
        let mut a = self.acct.lock();
        let Some(size) = a.sizes.remove(blob_id) else {
            return Ok(DeleteOutcome { already_absent: true });
        };
        a.used -= size;
        match fs::remove_file(self.blob_path(blob_id)) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::NotFound => {}
            Err(e) => {
                a.sizes.insert(blob_id.to_string(), size);
                a.used += size;
                return Err(e.into());
            }
        }
        Ok(DeleteOutcome { already_absent: false })
    }

    fn stat_blob(&self, blob_id: &str) -> Result<BlobInfo> {
        Self::check_id(blob_id)?;
        let a = self.acct.lock();
        let size = a
            .sizes
            .get(blob_id)
            .ok_or_else(|| GvfError::noent(format!("blob {blob_id} not stored here")))?;
        Ok(BlobInfo {
            size: *size,
            digest: blob_id.to_string(),
        })
    }

    fn usage(&self) -> Result<Usage> {
        let a = self.acct.lock();
        Ok(Usage {
            used_bytes: a.used,
            capacity: self.capacity,
        })
    }
}

/// Serves `blob.*`. Writes and deletes are reserved for federation daemons;
/// reads are open to any authenticated subject, since a blob id is only
/// handed out after the catalog ACL has been checked.
pub struct VaultHandler {
    store: std::sync::Arc<dyn BlobService>,
    auth: Authenticator,
}

impl VaultHandler {
    pub fn new(store: std::sync::Arc<dyn BlobService>, auth: Authenticator) -> Self {
        VaultHandler { store, auth }
    }
}

#[derive(Deserialize)]
struct BlobArgs {
    #[serde(default)]
    blob_id: String,
    #[serde(default)]
    digest: String,
    #[serde(default)]
    range: Option<ByteRange>,
}

impl Handler for VaultHandler {
    fn handle(&self, mut req: Request, _conn: &ConnInfo) -> Reply {
        let r = (|| -> Result<Reply> {
            match req.op.as_str() {
                "blob.write" | "blob.delete" => self.auth.require_service(req.auth.as_ref())?,
                _ => {
                    self.auth.verify_opt(req.auth.as_ref())?;
                }
            }
            let a: BlobArgs = req.parse_args()?;
            Ok(match req.op.as_str() {
                "blob.write" => {
                    let body = req.take_body()?;
                    Reply::ok(self.store.write_blob(&body, &a.digest)?)
                }
                "blob.read" => {
                    let data = self.store.read_blob(&a.blob_id, a.range)?;
                    Reply::with_body(json!({"size": data.len()}), data)
                }
                "blob.delete" => Reply::ok(self.store.delete_blob(&a.blob_id)?),
                "blob.stat" => Reply::ok(self.store.stat_blob(&a.blob_id)?),
                "blob.usage" => Reply::ok(self.store.usage()?),
                other => return Err(GvfError::badreq(format!("unknown op {other}"))),
            })
        })();
        r.unwrap_or_else(Reply::err)
    }
}

/// A vault reached over the wire.
pub struct RemoteVault {
    client: Client,
    cred: Credential,
}

impl RemoteVault {
    pub fn new(addr: &str, cred: Credential) -> Self {
        RemoteVault {
            client: Client::new(addr),
            cred,
        }
    }
}

impl BlobService for RemoteVault {
    fn write_blob(&self, data: &[u8], declared_digest: &str) -> Result<WriteOutcome> {
        let (v, _) = self
            .client
            .call("blob.write", Some(&self.cred), json!({"digest": declared_digest}), Some(data))?;
        serde_json::from_value(v).map_err(|e| GvfError::unavail(format!("blob.write reply: {e}")))
    }

    fn read_blob(&self, blob_id: &str, range: Option<ByteRange>) -> Result<Vec<u8>> {
        let (_, body) = self
            .client
            .call("blob.read", Some(&self.cred), json!({"blob_id": blob_id, "range": range}), None)?;
        body.ok_or_else(|| GvfError::unavail("blob.read returned no body"))
    }

    fn delete_blob(&self, blob_id: &str) -> Result<DeleteOutcome> {
        self.client
            .call_typed("blob.delete", Some(&self.cred), json!({"blob_id": blob_id}))
    }

    fn stat_blob(&self, blob_id: &str) -> Result<BlobInfo> {
        self.client
            .call_typed("blob.stat", Some(&self.cred), json!({"blob_id": blob_id}))
    }

    fn usage(&self) -> Result<Usage> {
        self.client.call_typed("blob.usage", Some(&self.cred), json!({}))
    }
}
