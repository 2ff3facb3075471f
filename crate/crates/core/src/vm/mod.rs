//! Instrumented interpreter for compiled MiniSol programs.
//!
//! Every executed [`Op::Branch`] appends one edge to the trace path and one
//! [`ComparisonRecord`]. Values carry provenance bits through the stack and
//! locals (storage drops them). All frames of one outer call, including
//! re-entrant ones, share a single step budget.

mod state;
mod trace;

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::lang::bytecode::ArithOp;
use crate::lang::{Op, Program, Type};
use crate::Word;

pub use state::{attacker, callers, contract_address, ether, WorldState};
pub use trace::{
    Branch, BranchId, ComparisonRecord, Dir, Event, ExecutionTrace, Step, Taint, Terminal,
};

pub const DEFAULT_STEP_LIMIT: usize = 100_000;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum VmError {
    #[error("unknown function `{0}`")]
    UnknownFunction(String),
    #[error("`{function}` expects {expected} arguments, got {got}")]
    BadCall {
        function: String,
        expected: usize,
        got: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BlockContext {
    pub timestamp: Word,
    pub number: Word,
}

impl BlockContext {
    pub const BASE_TIMESTAMP: u64 = 1_600_000_000;
    pub const BASE_NUMBER: u64 = 10_000_000;

    /// Context of the `i`-th transaction after genesis.
    pub fn nth(i: u64) -> Self {
        BlockContext {
            timestamp: Word::from(Self::BASE_TIMESTAMP + 13 * i),
            number: Word::from(Self::BASE_NUMBER + i),
        }
    }
}

impl Default for BlockContext {
    fn default() -> Self {
        BlockContext::nth(0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FunctionCall {
    pub function: String,
    pub args: Vec<Word>,
    pub value: Word,
    pub caller: Word,
    pub block: BlockContext,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExecConfig {
    pub step_limit: usize,
    /// When set, a transfer to the attacker re-invokes the running function
    /// up to this many nested levels.
    pub reentry_depth: Option<u32>,
}

impl Default for ExecConfig {
    fn default() -> Self {
        ExecConfig {
            step_limit: DEFAULT_STEP_LIMIT,
            reentry_depth: Some(1),
        }
    }
}

/// Depth of the last edge of `prefix`: the number of conditional sites in the
/// same frame that enclose it, itself included.
pub fn rarity(program: &Program, prefix: &[Step]) -> u32 {
    let Some(last) = prefix.last() else {
        return 0;
    };
    let mut stack: Vec<u32> = Vec::new();
    for step in prefix.iter().filter(|s| s.frame == last.frame) {
        let site = step.branch.site;
        let pc = program.site(site).pc;
        while let Some(&top) = stack.last() {
            if top != site.0 && program.sites[top as usize].scope_contains(pc) {
                break;
            }
            let same = top == site.0;
            stack.pop();
            if same {
                break;
            }
        }
        stack.push(site.0);
    }
    stack.len() as u32
}

#[derive(Debug, Clone, Copy, Default)]
struct Value {
    w: Word,
    taint: Taint,
    send: Option<u32>,
    wrap: Option<u32>,
}

impl Value {
    fn plain(w: Word) -> Self {
        Value {
            w,
            ..Value::default()
        }
    }

    fn tainted(w: Word, taint: Taint) -> Self {
        Value {
            w,
            taint,
            ..Value::default()
        }
    }

    fn merge(a: &Value, b: &Value, w: Word) -> Self {
        Value {
            w,
            taint: a.taint | b.taint,
            send: a.send.or(b.send),
            wrap: a.wrap.or(b.wrap),
        }
    }
}

fn bool_word(b: bool) -> Word {
    Word::from(b as u8)
}

/// Raised when the shared step budget runs out; unwinds every frame.
struct OutOfSteps;

enum FrameEnd {
    Stop,
    Revert,
}

struct Machine<'p> {
    program: &'p Program,
    config: ExecConfig,
    block: BlockContext,
    state: WorldState,
    path: Vec<Step>,
    comparisons: Vec<ComparisonRecord>,
    events: Vec<Event>,
    frames: Vec<usize>,
    overflow_used: BTreeSet<u32>,
    steps: usize,
}

impl<'p> Machine<'p> {
    fn run(
        &mut self,
        function: usize,
        args: &[Value],
        value: Word,
        caller: Word,
        level: u32,
    ) -> Result<FrameEnd, OutOfSteps> {
        let frame = self.frames.len() as u32;
        self.frames.push(function);
        let snapshot = self.state.clone();
        let end = self.frame(frame, function, args, value, caller, level);
        match end {
            Ok(FrameEnd::Stop) => {}
            Ok(FrameEnd::Revert) | Err(OutOfSteps) => self.state = snapshot,
        }
        end
    }

    fn frame(
        &mut self,
        frame: u32,
        function: usize,
        args: &[Value],
        value: Word,
        caller: Word,
        level: u32,
    ) -> Result<FrameEnd, OutOfSteps> {
        let f = &self.program.functions[function];
        if !value.is_zero() {
            if !f.payable || self.state.balance_of(caller) < value {
                self.events.push(Event::Revert { frame, pc: 0 });
                return Ok(FrameEnd::Revert);
            }
            let bal = self.state.balances.entry(caller).or_default();
            *bal -= value;
            self.state.contract_balance = self.state.contract_balance.overflowing_add(value).0;
        }
        let mut locals = vec![Value::default(); f.n_locals];
        locals[..args.len()].copy_from_slice(args);
        let mut stack: Vec<Value> = Vec::with_capacity(16);
        // send site -> result compared?
        let mut sends: BTreeMap<u32, bool> = BTreeMap::new();
        let mut pc = 0;

        macro_rules! pop {
            () => {
                stack.pop().expect("stack underflow in compiled code")
            };
        }

        let end = loop {
            if self.steps >= self.config.step_limit {
                return Err(OutOfSteps);
            }
            self.steps += 1;
            let mut next = pc + 1;
            match &f.code[pc] {
                Op::Push(w) => stack.push(Value::plain(*w)),
                Op::Pop => {
                    pop!();
                }
                Op::LoadGlobal(slot) => {
                    stack.push(Value::plain(self.state.storage[*slot as usize]))
                }
                Op::StoreGlobal(slot) => {
                    let v = pop!();
                    self.note_overflow_use(frame, pc, &v);
                    self.state.storage[*slot as usize] = v.w;
                }
                Op::LoadMap(slot) => {
                    let key = pop!();
                    stack.push(Value::plain(self.state.map_get(*slot as usize, key.w)));
                }
                Op::StoreMap(slot) => {
                    let v = pop!();
                    let key = pop!();
                    self.note_overflow_use(frame, pc, &v);
                    self.state.map_set(*slot as usize, key.w, v.w);
                }
                Op::LoadLocal(slot) => stack.push(locals[*slot as usize]),
                Op::StoreLocal(slot) => locals[*slot as usize] = pop!(),
                Op::Arith { op, site } => {
                    let b = pop!();
                    let a = pop!();
                    let (w, wrapped) = match op {
                        ArithOp::Add => a.w.overflowing_add(b.w),
                        ArithOp::Sub => a.w.overflowing_sub(b.w),
                        ArithOp::Mul => a.w.overflowing_mul(b.w),
                        ArithOp::Div if b.w.is_zero() => (Word::zero(), false),
                        ArithOp::Div => (a.w / b.w, false),
                        ArithOp::Mod if b.w.is_zero() => (Word::zero(), false),
                        ArithOp::Mod => (a.w % b.w, false),
                    };
                    let mut v = Value::merge(&a, &b, w);
                    if wrapped {
                        v.taint |= Taint::OVERFLOW;
                        v.wrap = Some(*site);
                        self.events.push(Event::OverflowWrap {
                            frame,
                            pc,
                            site: *site,
                        });
                    }
                    stack.push(v);
                }
                Op::Cmp(rel) => {
                    let b = pop!();
                    let a = pop!();
                    self.consume(frame, pc, &mut sends, &[&a, &b]);
                    let mut v = Value::merge(&a, &b, bool_word(rel.holds(a.w, b.w)));
                    v.send = None;
                    v.wrap = None;
                    stack.push(v);
                }
                Op::Not => {
                    let a = pop!();
                    self.consume(frame, pc, &mut sends, &[&a]);
                    stack.push(Value::tainted(bool_word(a.w.is_zero()), a.taint));
                }
                Op::And | Op::Or => {
                    let b = pop!();
                    let a = pop!();
                    self.consume(frame, pc, &mut sends, &[&a, &b]);
                    let r = if matches!(f.code[pc], Op::And) {
                        !a.w.is_zero() && !b.w.is_zero()
                    } else {
                        !a.w.is_zero() || !b.w.is_zero()
                    };
                    stack.push(Value::tainted(bool_word(r), a.taint | b.taint));
                }
                Op::CallValue => stack.push(Value::tainted(value, Taint::VALUE)),
                Op::Caller => stack.push(Value::tainted(caller, Taint::CALLER)),
                Op::Timestamp => {
                    self.events.push(Event::TimestampRead { frame, pc });
                    stack.push(Value::tainted(self.block.timestamp, Taint::TIMESTAMP));
                }
                Op::Number => {
                    self.events.push(Event::NumberRead { frame, pc });
                    stack.push(Value::tainted(self.block.number, Taint::NUMBER));
                }
                Op::SelfBalance => {
                    self.events.push(Event::BalanceRead { frame, pc });
                    stack.push(Value::tainted(self.state.contract_balance, Taint::BALANCE));
                }
                Op::Transfer => {
                    let amount = pop!();
                    let to = pop!();
                    if !self.pay(to.w, amount.w) {
                        self.events.push(Event::Revert { frame, pc });
                        break FrameEnd::Revert;
                    }
                    self.events.push(Event::Transfer {
                        frame,
                        pc,
                        to: to.w,
                        amount: amount.w,
                    });
                    if to.w == attacker() && self.config.reentry_depth.is_some_and(|d| level < d) {
                        // Attacker fallback calls straight back in.
                        self.run(function, args, Word::zero(), attacker(), level + 1)?;
                    }
                }
                Op::Send { site } => {
                    let amount = pop!();
                    let to = pop!();
                    let ok = self.pay(to.w, amount.w);
                    self.events.push(Event::Send {
                        frame,
                        pc,
                        site: *site,
                        to: to.w,
                        amount: amount.w,
                        ok,
                    });
                    sends.entry(*site).or_insert(false);
                    stack.push(Value {
                        w: bool_word(ok),
                        taint: Taint::default(),
                        send: Some(*site),
                        wrap: None,
                    });
                }
                Op::DelegateCall => {
                    let target = pop!();
                    self.events.push(Event::DelegateCall {
                        frame,
                        pc,
                        target: target.w,
                        taint: target.taint,
                    });
                }
                Op::Branch {
                    site,
                    rel,
                    else_target,
                } => {
                    let k = pop!();
                    let x = pop!();
                    self.consume(frame, pc, &mut sends, &[&x, &k]);
                    let taken = rel.holds(x.w, k.w);
                    self.comparisons.push(ComparisonRecord {
                        frame,
                        site: *site,
                        rel: *rel,
                        x: x.w,
                        k: k.w,
                        taken,
                        taint: x.taint | k.taint,
                    });
                    self.path.push(Step {
                        frame,
                        branch: BranchId::new(*site, Dir::from_taken(taken)),
                    });
                    if !taken {
                        next = *else_target;
                    }
                }
                Op::Jump(t) => next = *t,
                Op::Revert => {
                    self.events.push(Event::Revert { frame, pc });
                    break FrameEnd::Revert;
                }
                Op::Stop => break FrameEnd::Stop,
            }
            pc = next;
        };
        for (site, checked) in sends {
            if !checked {
                self.events.push(Event::UncheckedCallResult { frame, site });
            }
        }
        Ok(end)
    }

    /// Move value out of the contract. Fails on insufficient balance.
    fn pay(&mut self, to: Word, amount: Word) -> bool {
        if self.state.contract_balance < amount {
            return false;
        }
        if to != contract_address() {
            self.state.contract_balance -= amount;
            self.state.credit(to, amount);
        }
        true
    }

    fn consume(
        &mut self,
        frame: u32,
        pc: usize,
        sends: &mut BTreeMap<u32, bool>,
        operands: &[&Value],
    ) {
        for v in operands {
            if let Some(site) = v.send {
                if let Some(c) = sends.get_mut(&site) {
                    *c = true;
                }
            }
            self.note_overflow_use(frame, pc, v);
        }
    }

    fn note_overflow_use(&mut self, frame: u32, pc: usize, v: &Value) {
        if let Some(site) = v.wrap {
            if self.overflow_used.insert(site) {
                self.events.push(Event::OverflowUse { frame, pc, site });
            }
        }
    }
}

fn normalize_arg(ty: Type, w: Word) -> Word {
    match ty {
        Type::Bool => bool_word(!w.is_zero()),
        _ => w,
    }
}

/// Execute one transaction against `state`, which is updated in place unless
/// the call reverts.
pub fn execute_call(
    program: &Program,
    state: &mut WorldState,
    call: &FunctionCall,
    config: &ExecConfig,
) -> Result<ExecutionTrace, VmError> {
    let index = program
        .function_index(&call.function)
        .ok_or_else(|| VmError::UnknownFunction(call.function.clone()))?;
    let f = &program.functions[index];
    if f.params.len() != call.args.len() {
        return Err(VmError::BadCall {
            function: call.function.clone(),
            expected: f.params.len(),
            got: call.args.len(),
        });
    }
    let args: Vec<Value> = f
        .params
        .iter()
        .zip(&call.args)
        .map(|(ty, w)| Value::tainted(normalize_arg(*ty, *w), Taint::ARG))
        .collect();
    let mut m = Machine {
        program,
        config: *config,
        block: call.block,
        state: state.clone(),
        path: Vec::new(),
        comparisons: Vec::new(),
        events: Vec::new(),
        frames: Vec::new(),
        overflow_used: BTreeSet::new(),
        steps: 0,
    };
    let terminal = match m.run(index, &args, call.value, call.caller, 0) {
        Ok(FrameEnd::Stop) => Terminal::Stop,
        Ok(FrameEnd::Revert) => Terminal::Revert,
        Err(OutOfSteps) => Terminal::StepLimit,
    };
    if terminal == Terminal::Stop {
        *state = m.state;
    }
    let mut seen = BTreeSet::new();
    let covered = m
        .path
        .iter()
        .enumerate()
        .filter(|(_, s)| seen.insert(s.branch))
        .map(|(i, s)| Branch {
            prefix_len: i + 1,
            id: s.branch,
            rarity: rarity(program, &m.path[..=i]),
        })
        .collect();
    Ok(ExecutionTrace {
        function: call.function.clone(),
        frames: m.frames,
        path: m.path,
        covered,
        comparisons: m.comparisons,
        events: m.events,
        terminal,
        steps: m.steps,
    })
}

/// Run a transaction sequence from `genesis`, threading state through the
/// calls. A reverted call leaves the state as it was. Returns each call's
/// trace with the state committed after it.
pub fn execute_sequence(
    program: &Program,
    genesis: &WorldState,
    calls: &[FunctionCall],
    config: &ExecConfig,
) -> Result<Vec<(ExecutionTrace, WorldState)>, VmError> {
    let mut state = genesis.clone();
    calls
        .iter()
        .map(|c| {
            let t = execute_call(program, &mut state, c, config)?;
            Ok((t, state.clone()))
        })
        .collect()
}

/// Replay `call` from the attacker account with its fallback re-entering up
/// to `depth` times.
pub fn attack_reenter(
    program: &Program,
    state: &WorldState,
    call: &FunctionCall,
    depth: u32,
    step_limit: usize,
) -> Result<ExecutionTrace, VmError> {
    let mut s = state.clone();
    let call = FunctionCall {
        caller: attacker(),
        ..call.clone()
    };
    let config = ExecConfig {
        step_limit,
        reentry_depth: Some(depth),
    };
    execute_call(program, &mut s, &call, &config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lang::{compile, parse};

    fn program(src: &str) -> Program {
        compile(&parse(src).unwrap()).unwrap()
    }

    fn call(f: &str, args: &[u64], value: Word, caller: Word) -> FunctionCall {
        FunctionCall {
            function: f.into(),
            args: args.iter().map(|&a| Word::from(a)).collect(),
            value,
            caller,
            block: BlockContext::default(),
        }
    }

    const BANK: &str = "contract Bank { map(address => uint256) bal; \
        fn deposit() payable { bal[msg.sender] = bal[msg.sender] + msg.value; } \
        fn withdraw() { if (bal[msg.sender] > 0) { transfer(msg.sender, bal[msg.sender]); bal[msg.sender] = 0; } } }";

    #[test]
    fn deposit_moves_value() {
        let p = program(BANK);
        let mut s = WorldState::genesis(&p, Word::zero());
        let who = callers()[1];
        let before = s.total_value();
        let t = execute_call(
            &p,
            &mut s,
            &call("deposit", &[], ether(), who),
            &ExecConfig::default(),
        )
        .unwrap();
        assert_eq!(t.terminal, Terminal::Stop);
        assert_eq!(s.contract_balance, ether());
        assert_eq!(s.map_get(0, who), ether());
        assert_eq!(s.total_value(), before);
    }

    #[test]
    fn reentrant_withdraw_pays_twice() {
        let p = program(BANK);
        let mut s = WorldState::genesis(&p, ether() * Word::from(5));
        let cfg = ExecConfig::default();
        execute_call(&p, &mut s, &call("deposit", &[], ether(), attacker()), &cfg).unwrap();
        let t = attack_reenter(
            &p,
            &s,
            &call("withdraw", &[], Word::zero(), attacker()),
            1,
            1000,
        )
        .unwrap();
        assert_eq!(t.transfer_count(), 2);
        assert_eq!(t.frames.len(), 2);
        let honest = ExecConfig {
            reentry_depth: None,
            ..cfg
        };
        let t = execute_call(
            &p,
            &mut s,
            &call("withdraw", &[], Word::zero(), attacker()),
            &honest,
        )
        .unwrap();
        assert_eq!(t.transfer_count(), 1);
    }

    #[test]
    fn revert_rolls_back() {
        let p = program(
            "contract C { uint256 x; fn f(uint256 a) payable { x = a; require(a == 3); } }",
        );
        let mut s = WorldState::genesis(&p, Word::zero());
        let g = s.clone();
        let t = execute_call(
            &p,
            &mut s,
            &call("f", &[2], Word::from(9), callers()[1]),
            &ExecConfig::default(),
        )
        .unwrap();
        assert_eq!(t.terminal, Terminal::Revert);
        assert_eq!(s, g);
        execute_call(
            &p,
            &mut s,
            &call("f", &[3], Word::from(9), callers()[1]),
            &ExecConfig::default(),
        )
        .unwrap();
        assert_eq!(s.storage[0], Word::from(3));
    }

    #[test]
    fn value_to_non_payable_reverts() {
        let p = program("contract C { uint256 x; fn f() { x = 1; } }");
        let mut s = WorldState::genesis(&p, Word::zero());
        let t = execute_call(
            &p,
            &mut s,
            &call("f", &[], Word::one(), callers()[1]),
            &ExecConfig::default(),
        )
        .unwrap();
        assert_eq!(t.terminal, Terminal::Revert);
        assert!(s.storage[0].is_zero());
    }

    #[test]
    fn step_limit_stops_loops() {
        let p = program("contract C { uint256 x; fn f() { while (x == 0) { x = 0; } } }");
        let mut s = WorldState::genesis(&p, Word::zero());
        let cfg = ExecConfig {
            step_limit: 500,
            reentry_depth: None,
        };
        let t = execute_call(
            &p,
            &mut s,
            &call("f", &[], Word::zero(), callers()[1]),
            &cfg,
        )
        .unwrap();
        assert_eq!(t.terminal, Terminal::StepLimit);
        assert_eq!(t.steps, 500);
    }

    #[test]
    fn wrap_emits_overflow_and_use() {
        let p = program("contract C { uint256 x; fn f(uint256 a) { x = a + 1; } }");
        let mut s = WorldState::genesis(&p, Word::zero());
        let mut c = call("f", &[], Word::zero(), callers()[1]);
        c.args = vec![Word::MAX];
        let t = execute_call(&p, &mut s, &c, &ExecConfig::default()).unwrap();
        assert!(t
            .events
            .iter()
            .any(|e| matches!(e, Event::OverflowWrap { .. })));
        assert!(t
            .events
            .iter()
            .any(|e| matches!(e, Event::OverflowUse { .. })));
        assert!(s.storage[0].is_zero());
    }

    #[test]
    fn unchecked_send_flagged() {
        let p = program(
            "contract C { bool ok; fn a() { send(msg.sender, 1); } fn b() { if (send(msg.sender, 1)) { ok = true; } } }",
        );
        let mut s = WorldState::genesis(&p, ether());
        let cfg = ExecConfig::default();
        let t = execute_call(
            &p,
            &mut s,
            &call("a", &[], Word::zero(), callers()[1]),
            &cfg,
        )
        .unwrap();
        assert!(t
            .events
            .iter()
            .any(|e| matches!(e, Event::UncheckedCallResult { .. })));
        let t = execute_call(
            &p,
            &mut s,
            &call("b", &[], Word::zero(), callers()[1]),
            &cfg,
        )
        .unwrap();
        assert!(!t
            .events
            .iter()
            .any(|e| matches!(e, Event::UncheckedCallResult { .. })));
    }

    #[test]
    fn comparisons_record_operands_and_taint() {
        let p = program(
            "contract C { fn f(uint256 a) payable { if (msg.value == 50 finney) { a = 1; } } }",
        );
        let mut s = WorldState::genesis(&p, Word::zero());
        let t = execute_call(
            &p,
            &mut s,
            &call("f", &[0], Word::from(7), callers()[1]),
            &ExecConfig::default(),
        )
        .unwrap();
        let c = &t.comparisons[0];
        assert_eq!(c.x, Word::from(7));
        assert_eq!(c.k, crate::lang::parser::finney() * Word::from(50));
        assert!(!c.taken);
        assert!(c.taint.contains(Taint::VALUE));
        assert_eq!(t.covered.len(), 1);
        assert_eq!(t.covered[0].id.dir, Dir::Else);
    }

    #[test]
    fn rarity_counts_enclosing_sites() {
        let p = program(
            "contract C { fn f(uint256 n) { uint256 i = 0; while (i < n) { i = i + 1; if (i == 2) { i = i + 0; } } } }",
        );
        let mut s = WorldState::genesis(&p, Word::zero());
        let t = execute_call(
            &p,
            &mut s,
            &call("f", &[3], Word::zero(), callers()[1]),
            &ExecConfig::default(),
        )
        .unwrap();
        for b in &t.covered {
            assert_eq!(b.rarity, p.site(b.id.site).depth, "{}", b.id);
        }
    }

    #[test]
    fn trace_serialization_is_deterministic() {
        let p = program(BANK);
        let run = || {
            let s = WorldState::genesis(&p, ether());
            let calls = [
                call("deposit", &[], ether(), attacker()),
                call("withdraw", &[], Word::zero(), attacker()),
            ];
            let out = execute_sequence(&p, &s, &calls, &ExecConfig::default()).unwrap();
            out.iter().map(|(t, _)| t.serialize()).collect::<String>()
        };
        let a = run();
        assert_eq!(a, run());
        assert!(a.contains("event\t1\ttransfer"));
    }
}
