//! Order functions by write/read dependencies and prolong a sequence.

use minifuzz::lang::parse;
use minifuzz::sequence::{build_sequence, order_priority, prolong, select_pairs, SequenceVariant};
use minifuzz::vm::{callers, BlockContext, FunctionCall};
use minifuzz::Word;

fn main() {
    let contract = parse(include_str!("../corpus/crowdfund.msol")).unwrap();
    for (f, op) in order_priority(&contract.accesses) {
        println!("OP({f}) = {op}");
    }
    let sequence = build_sequence(&contract);
    println!("sequence {}", sequence.join(" -> "));

    let variant = |amount: u64| SequenceVariant {
        calls: sequence
            .iter()
            .map(|f| FunctionCall {
                function: f.clone(),
                args: if f == "donate" {
                    vec![Word::from(amount)]
                } else {
                    vec![]
                },
                value: Word::zero(),
                caller: callers()[1],
                block: BlockContext::nth(0),
            })
            .collect(),
    };
    let variants = [variant(300), variant(300), variant(120)];
    for (i, j) in select_pairs(&variants) {
        let case = prolong(&variants[i], &variants[j]);
        println!("prolonged {i}+{j}: {}", case.functions().join(", "));
    }
}
