//! Run a hand-written transaction sequence and inspect the traces.

use minifuzz::lang::parser::finney;
use minifuzz::lang::{compile, parse};
use minifuzz::vm::{
    callers, ether, execute_sequence, BlockContext, ExecConfig, FunctionCall, WorldState,
};
use minifuzz::Word;

fn main() {
    let program = compile(&parse(include_str!("../corpus/guessnum.msol")).unwrap()).unwrap();
    let genesis = WorldState::genesis(&program, ether() * 10);
    let call = |function: &str, args: Vec<Word>, value: Word| FunctionCall {
        function: function.into(),
        args,
        value,
        caller: callers()[1],
        block: BlockContext::nth(0),
    };
    let calls = [
        call("guess", vec![Word::from(7)], finney() * 50),
        call("getReward", vec![], Word::zero()),
    ];
    let runs = execute_sequence(&program, &genesis, &calls, &ExecConfig::default()).expect("runs");
    for (trace, state) in &runs {
        println!(
            "{} -> {:?} in {} steps",
            trace.function, trace.terminal, trace.steps
        );
        for c in &trace.comparisons {
            println!(
                "  site {} {:?} x={} k={} taken={}",
                c.site.0, c.rel, c.x, c.k, c.taken
            );
        }
        for e in &trace.events {
            println!("  {e:?}");
        }
        println!("  contract balance {}", state.contract_balance);
    }
}
