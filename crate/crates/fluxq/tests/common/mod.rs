#![allow(dead_code)] // each test target uses a different slice of this

pub mod gens;
pub mod oracle;
