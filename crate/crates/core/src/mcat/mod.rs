//! The central metadata catalog: logical namespace, per-file ACLs and replica
//! locations, persisted as a write-ahead journal plus snapshot.

mod service;
mod store;
mod types;

pub use service::{CatalogHandler, CatalogService, RemoteCatalog};
pub use store::{Catalog, CatalogState, Mutation, NAME_LOCK_LEASE};
pub use types::*;
