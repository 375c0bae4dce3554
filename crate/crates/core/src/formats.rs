//! On-disk formats shared by the host (builders, cached levels, fallback
//! reads) and the target (storage functions parse the same bytes).

pub mod btree;
pub mod sst;
