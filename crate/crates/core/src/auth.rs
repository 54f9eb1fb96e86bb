//! Subject authentication. A proof token is `sha256(deployment_secret ‖ subject)`;
//! it stands in for a certificate chain and, like one, says nothing about the
//! OS account the request arrived from.

use crate::digest::{proof_token, tokens_equal};
use crate::error::{GvfError, Result};
use crate::mcat::Subject;
use crate::wire::Credential;

pub const DEFAULT_SERVICE_SUBJECT: &str = "/O=gvf/CN=service";

#[derive(Debug, Clone)]
pub struct Authenticator {
    secret: String,
    service: Subject,
}

impl Authenticator {
    pub fn new(secret: &str, service_subject: &str) -> Result<Authenticator> {
        if secret.is_empty() {
            return Err(GvfError::badreq("deployment secret must not be empty"));
        }
        Ok(Authenticator {
            secret: secret.to_string(),
            service: Subject::parse(service_subject)?,
        })
    }

    pub fn token_for(&self, subject: &str) -> String {
        proof_token(&self.secret, subject)
    }

    pub fn credential_for(&self, subject: &str) -> Credential {
        Credential::new(subject, self.token_for(subject))
    }

    /// Credential daemons use when talking to each other.
    pub fn service_credential(&self) -> Credential {
        self.credential_for(self.service.as_str())
    }

    pub fn service_subject(&self) -> &Subject {
        &self.service
    }

    pub fn verify(&self, cred: &Credential) -> Result<Subject> {
        let subject = Subject::parse(&cred.subject)?;
        if !tokens_equal(&cred.token, &self.token_for(&cred.subject)) {
            return Err(GvfError::perm(format!("bad proof token for {subject}")));
        }
        Ok(subject)
    }

    pub fn verify_opt(&self, cred: Option<&Credential>) -> Result<Subject> {
        self.verify(cred.ok_or_else(|| GvfError::perm("authentication required"))?)
    }

    pub fn require_service(&self, cred: Option<&Credential>) -> Result<()> {
        let s = self.verify_opt(cred)?;
        if s != self.service {
            return Err(GvfError::perm(format!("{s} is not the federation service identity")));
        }
        Ok(())
    }

    pub fn is_service(&self, s: &Subject) -> bool {
        *s == self.service
    }
}
