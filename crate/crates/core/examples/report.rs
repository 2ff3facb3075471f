//! Build the text and JSON reports of a campaign.

use minifuzz::fuzz::{evolve_with, FuzzConfig};
use minifuzz::lang::{compile, parse};
use minifuzz::oracle::{detect, Detector};
use minifuzz::report::{archive, report};

fn main() {
    let contract = parse(include_str!("../corpus/strict_equality.msol")).unwrap();
    let program = compile(&contract).unwrap();
    let config = FuzzConfig {
        budget: 20_000,
        ..Default::default()
    };
    let mut detector = Detector::new(&program);
    let suite = evolve_with(&program, &contract, &config, &mut detector);
    let findings = detect(&program, &suite, detector, &config);
    let r = report(&contract.name, &findings, &suite, &config);
    print!("{}", r.to_text());
    let json = r.to_json();
    println!("\nreport.json: {} bytes", json.len());
    println!(
        "suite.json: {} cases",
        archive(&contract.name, &suite).cases.len()
    );
}
