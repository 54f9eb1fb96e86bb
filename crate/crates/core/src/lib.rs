//! A desk-scale grid storage federation.
//!
//! The pieces: a central metadata catalog ([`mcat`]), content-addressed storage
//! vaults ([`vault`]), broker daemons at each site ([`broker`]), a permissionless
//! replica location service ([`rls`]), the catalog-to-RLS namespace bridge
//! ([`sync`]), and an SRM-style gateway with staged and direct drivers
//! ([`gateway`]). Every daemon speaks the framed protocol in [`wire`].

pub mod auth;
pub mod broker;
pub mod config;
pub mod daemon;
pub mod digest;
pub mod error;
pub mod gateway;
pub mod harness;
pub mod journal;
pub mod mcat;
pub mod rls;
pub mod sync;
pub mod vault;
pub mod wire;

pub use error::{ErrorCode, GvfError, Result};
