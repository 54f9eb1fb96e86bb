use crate::error::{GvfError, Result};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

pub const MAX_DATANAME_LEN: usize = 1024;
pub const MAX_SUBJECT_LEN: usize = 256;

pub(crate) fn is_segment(s: &str) -> bool {
    !s.is_empty()
        && s != "."
        && s != ".."
        && s.bytes().all(|b| b.is_ascii_alphanumeric() || matches!(b, b'.' | b'_' | b'-'))
}

/// Identifier for sites, vaults and local user names.
pub fn is_identifier(s: &str) -> bool {
    is_segment(s) && s.len() <= 128
}

/// A logical file name: `/home/<owner>/<segment>(/<segment>)*`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct DataName(String);

impl DataName {
    pub fn parse(s: &str) -> Result<DataName> {
        if s.len() > MAX_DATANAME_LEN {
            return Err(GvfError::badreq("dataname longer than 1024 bytes"));
        }
        let rest = s
            .strip_prefix('/')
            .ok_or_else(|| GvfError::badreq(format!("dataname {s:?} is not absolute")))?;
        let segs: Vec<&str> = rest.split('/').collect();
        if segs.len() < 3 {
            return Err(GvfError::badreq(format!("dataname {s:?} needs /home/<owner>/<name>")));
        }
        if segs[0] != "home" {
            return Err(GvfError::badreq(format!("dataname {s:?} must start with /home/")));
        }
        if let Some(bad) = segs.iter().find(|seg| !is_segment(seg)) {
            return Err(GvfError::badreq(format!("dataname {s:?} has invalid segment {bad:?}")));
        }
        Ok(DataName(s.to_string()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn owner_segment(&self) -> &str {
        self.0[1..].split('/').nth(1).unwrap_or_default()
    }

    /// Path-aware prefix match: `/home/al` does not match `/home/alice/x`.
    pub fn under_prefix(&self, prefix: &str) -> bool {
        let p = prefix.trim_end_matches('/');
        p.is_empty() || self.0 == p || (self.0.starts_with(p) && self.0.as_bytes().get(p.len()) == Some(&b'/'))
    }
}

impl TryFrom<String> for DataName {
    type Error = GvfError;
    fn try_from(s: String) -> Result<Self> {
        DataName::parse(&s)
    }
}

impl From<DataName> for String {
    fn from(d: DataName) -> String {
        d.0
    }
}

impl fmt::Display for DataName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// An authenticated identity; stands in for a certificate distinguished name.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Subject(String);

impl Subject {
    pub fn parse(s: &str) -> Result<Subject> {
        if s.is_empty() || s.len() > MAX_SUBJECT_LEN {
            return Err(GvfError::badreq("subject must be 1..=256 bytes"));
        }
        if s.chars().any(|c| c.is_control()) {
            return Err(GvfError::badreq("subject must be printable"));
        }
        Ok(Subject(s.to_string()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for Subject {
    type Error = GvfError;
    fn try_from(s: String) -> Result<Self> {
        Subject::parse(&s)
    }
}

impl From<Subject> for String {
    fn from(s: Subject) -> String {
        s.0
    }
}

impl fmt::Display for Subject {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Perm {
    Read,
    Write,
    Delete,
}

impl Perm {
    pub const ALL: [Perm; 3] = [Perm::Read, Perm::Write, Perm::Delete];

    pub fn parse(s: &str) -> Result<Perm> {
        match s {
            "read" => Ok(Perm::Read),
            "write" => Ok(Perm::Write),
            "delete" => Ok(Perm::Delete),
            _ => Err(GvfError::badreq(format!("unknown permission {s:?}"))),
        }
    }
}

pub type Grants = BTreeMap<Subject, BTreeSet<Perm>>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Acl {
    pub owner: Subject,
    #[serde(default)]
    pub grants: Grants,
}

impl Acl {
    pub fn owned_by(owner: Subject) -> Acl {
        Acl {
            owner,
            grants: Grants::new(),
        }
    }

    pub fn allows(&self, subject: &Subject, mode: Perm) -> bool {
        *subject == self.owner || self.grants.get(subject).is_some_and(|p| p.contains(&mode))
    }

    pub fn validate_grants(owner: &Subject, grants: &Grants) -> Result<()> {
        if grants.contains_key(owner) {
            return Err(GvfError::badreq("owner may not appear in grants"));
        }
        if let Some((s, _)) = grants.iter().find(|(_, p)| p.is_empty()) {
            return Err(GvfError::badreq(format!("empty permission set for {s}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReplicaState {
    Online,
    Dead,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Replica {
    pub vault_id: String,
    pub blob_id: String,
    pub site_id: String,
    pub state: ReplicaState,
}

impl Replica {
    pub fn online(vault_id: &str, blob_id: &str, site_id: &str) -> Replica {
        Replica {
            vault_id: vault_id.into(),
            blob_id: blob_id.into(),
            site_id: site_id.into(),
            state: ReplicaState::Online,
        }
    }

    pub fn is_online(&self) -> bool {
        self.state == ReplicaState::Online
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub dataname: DataName,
    pub acl: Acl,
    pub size: u64,
    pub digest: String,
    pub replicas: Vec<Replica>,
    pub created_at: u64,
    pub modified_at: u64,
}

impl CatalogEntry {
    pub fn replica_on(&self, vault_id: &str) -> Option<&Replica> {
        self.replicas.iter().find(|r| r.vault_id == vault_id)
    }

    pub fn online_replicas(&self) -> impl Iterator<Item = &Replica> {
        self.replicas.iter().filter(|r| r.is_online())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Registered,
    AclChanged,
    ReplicaChanged,
    Deleted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChangeEvent {
    pub kind: EventKind,
    pub dataname: DataName,
    pub seq: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChangePage {
    pub events: Vec<ChangeEvent>,
    pub new_cursor: u64,
}

/// A blob that could not be removed when its entry was deleted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Orphan {
    pub vault_id: String,
    pub blob_id: String,
    pub dataname: DataName,
    pub reason: String,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataname_grammar() {
        for ok in ["/home/alice/f1", "/home/alice/a/b/c.d-e_f", "/home/a/..x"] {
            assert!(DataName::parse(ok).is_ok(), "{ok}");
        }
        for bad in [
            "home/alice/f1",
            "/home/alice",
            "/home/alice/",
            "/home//f",
            "/data/alice/f",
            "/home/alice/../x",
            "/home/alice/./x",
            "/home/alice/a b",
            "/home/alice/f1/",
        ] {
            assert_eq!(DataName::parse(bad).unwrap_err().code, crate::ErrorCode::BadReq, "{bad}");
        }
        let long = format!("/home/alice/{}", "x".repeat(1013));
        assert_eq!(long.len(), 1025);
        assert!(DataName::parse(&long).is_err());
        assert!(DataName::parse(&long[..1024]).is_ok());
        assert_eq!(DataName::parse("/home/alice/f1").unwrap().owner_segment(), "alice");
    }

    #[test]
    fn prefix_is_path_aware() {
        let d = DataName::parse("/home/alice/x").unwrap();
        assert!(d.under_prefix("/"));
        assert!(d.under_prefix("/home"));
        assert!(d.under_prefix("/home/alice"));
        assert!(d.under_prefix("/home/alice/"));
        assert!(d.under_prefix("/home/alice/x"));
        assert!(!d.under_prefix("/home/al"));
        assert!(!d.under_prefix("/home/bob"));
    }

    #[test]
    fn subject_rules() {
        assert!(Subject::parse("/O=Grid/CN=Alice Smith").is_ok());
        assert!(Subject::parse("").is_err());
        assert!(Subject::parse("a\nb").is_err());
        assert!(Subject::parse(&"x".repeat(257)).is_err());
        assert_ne!(Subject::parse("Alice").unwrap(), Subject::parse("alice").unwrap());
    }

    #[test]
    fn grant_validation() {
        let owner = Subject::parse("o").unwrap();
        let bob = Subject::parse("bob").unwrap();
        let mut g = Grants::new();
        g.insert(bob.clone(), [Perm::Read].into());
        assert!(Acl::validate_grants(&owner, &g).is_ok());
        g.insert(owner.clone(), [Perm::Read].into());
        assert!(Acl::validate_grants(&owner, &g).is_err());
        let mut g = Grants::new();
        g.insert(bob, Default::default());
        assert!(Acl::validate_grants(&owner, &g).is_err());
    }
}
