//! Classify branches as rare or vulnerable and show their energy.

use minifuzz::energy::{
    energy_for, search_branches, EnergySchedule, Regions, VulnerableStatementSet,
};
use minifuzz::fuzz::{evolve_with, FuzzConfig, Observer, TestCase};
use minifuzz::lang::{compile, parse};
use minifuzz::vm::ExecutionTrace;

#[derive(Default)]
struct Keep(Vec<ExecutionTrace>);

impl Observer for Keep {
    fn observe(&mut self, _: &TestCase, traces: &[ExecutionTrace]) {
        self.0.extend_from_slice(traces);
    }
}

fn main() {
    let contract = parse(include_str!("../corpus/block_game.msol")).unwrap();
    let program = compile(&contract).unwrap();
    let config = FuzzConfig {
        budget: 20_000,
        ..Default::default()
    };
    let mut keep = Keep::default();
    evolve_with(&program, &contract, &config, &mut keep);
    let traces: Vec<&ExecutionTrace> = keep.0.iter().collect();
    let search = search_branches(
        &traces,
        &program,
        &Regions::new(&program),
        &VulnerableStatementSet::default(),
    );
    let schedule = EnergySchedule::default();
    for (&b, &r) in &search.rarity {
        println!(
            "{b}: R={r} rare={} vulnerable={} energy={}",
            search.rare.contains(&b),
            search.vulnerable.contains(&b),
            energy_for(b, &schedule, &search)
        );
    }
}
