pub mod cps;
pub mod frontend;
pub mod harness;
pub mod instrument;
pub mod ir;
pub mod shadow;
pub mod vm;
