//! Parse a contract, list its conditional sites and print it back.

use minifuzz::lang::{compile, parse, print};

fn main() {
    let contract = parse(include_str!("../corpus/guessnum.msol")).expect("parses");
    let program = compile(&contract).expect("compiles");
    for f in &program.functions {
        println!("fn {} ({} instructions)", f.name, f.code.len());
    }
    for s in &program.sites {
        println!(
            "site {} in {} at {}:{} depth {}",
            s.id.0, program.functions[s.function].name, s.loc.line, s.loc.col, s.depth
        );
    }
    for (f, accesses) in &contract.accesses {
        let vars: Vec<String> = accesses
            .iter()
            .map(|a| format!("{:?} {}", a.op, a.var))
            .collect();
        println!("{f}: {}", vars.join(", "));
    }
    print!("{}", print(&contract));
}
