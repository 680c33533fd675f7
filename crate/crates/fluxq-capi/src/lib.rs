//! C ABI surface; see the crate root for the exported functions.
