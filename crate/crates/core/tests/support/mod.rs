#![allow(dead_code)]

pub mod checks;
pub mod nr_oracle;
pub mod learning;
