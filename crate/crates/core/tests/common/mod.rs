#![allow(dead_code)]

pub mod deepfool_oracle;
pub mod equivalence;
pub mod gradcases;
pub mod idx;
pub mod invariants;
