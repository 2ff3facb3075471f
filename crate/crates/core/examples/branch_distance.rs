//! Branch distance of a few operand pairs under each relation.

use minifuzz::fuzz::rel_distance;
use minifuzz::lang::Rel;
use minifuzz::Word;

fn main() {
    let pairs = [(10u64, 50u64), (50, 50), (10_000, 50)];
    for rel in Rel::ALL {
        let row: Vec<String> = pairs
            .iter()
            .map(|&(x, k)| {
                format!(
                    "{x} vs {k}: {}",
                    rel_distance(rel, Word::from(x), Word::from(k))
                )
            })
            .collect();
        println!("{rel:?}\t{}", row.join("\t"));
    }
}
