//! Fuzz one contract and print the coverage curve.

use minifuzz::fuzz::{evolve, FuzzConfig};
use minifuzz::lang::{compile, parse};

fn main() {
    let contract = parse(include_str!("../corpus/value_gate.msol")).unwrap();
    let program = compile(&contract).unwrap();
    let config = FuzzConfig {
        budget: 10_000,
        ..Default::default()
    };
    let suite = evolve(&program, &contract, &config);
    println!(
        "{}/{} branches covered in {} executions, {} seeds kept",
        suite.covered.len(),
        suite.total_branches,
        suite.executions,
        suite.seeds.len()
    );
    print!("{}", suite.coverage_csv());
}
