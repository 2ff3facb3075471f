//! Fuzz with the vulnerability oracle attached and replay each witness.

use minifuzz::fuzz::{evolve_with, FuzzConfig};
use minifuzz::lang::{compile, parse};
use minifuzz::oracle::{detect, replay, Detector};

fn main() {
    for src in [
        include_str!("../corpus/guessnum.msol"),
        include_str!("../corpus/guessnum_patched.msol"),
    ] {
        let contract = parse(src).unwrap();
        let program = compile(&contract).unwrap();
        let config = FuzzConfig {
            budget: 20_000,
            ..Default::default()
        };
        let mut detector = Detector::new(&program);
        let suite = evolve_with(&program, &contract, &config, &mut detector);
        let findings = detect(&program, &suite, detector, &config);
        println!("{}: {} findings", contract.name, findings.len());
        for f in &findings {
            println!(
                "  {} in {} ({}), replays: {}",
                f.kind,
                f.function,
                f.explanation,
                replay(&program, f, &config)
            );
        }
    }
}
