//! Greybox fuzzing for MiniSol contracts.

pub mod cli;
pub mod energy;
pub mod fuzz;
pub mod lang;
pub mod oracle;
pub mod report;
pub mod sequence;
pub mod vm;

/// 256-bit unsigned machine word.
pub type Word = primitive_types::U256;
