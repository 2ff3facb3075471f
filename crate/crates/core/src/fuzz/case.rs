//! Test case encoding, generation and mutation.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;

use crate::lang::ast::{Contract, Expr, ExprKind, Stmt, StmtKind};
use crate::lang::parser::finney;
use crate::lang::{Program, Type};
use crate::vm::{callers, contract_address, BlockContext, FunctionCall};
use crate::Word;

/// A transaction sequence. Call `i` runs in block `base + i` where `base` is
/// the block context of the first call.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TestCase {
    pub calls: Vec<FunctionCall>,
}

const WORD_BYTES: usize = 32;

fn put(out: &mut Vec<u8>, w: Word) {
    out.extend_from_slice(&w.to_big_endian());
}

fn take(bytes: &[u8], at: &mut usize) -> Option<Word> {
    let slice = bytes.get(*at..*at + WORD_BYTES)?;
    *at += WORD_BYTES;
    Some(Word::from_big_endian(slice))
}

impl TestCase {
    /// Build a case, re-deriving every block context from the first call's.
    pub fn from_calls(calls: Vec<FunctionCall>) -> Self {
        let base = calls.first().map(|c| c.block).unwrap_or_default();
        let mut case = TestCase { calls };
        case.set_block(base);
        case
    }

    pub fn block(&self) -> BlockContext {
        self.calls.first().map(|c| c.block).unwrap_or_default()
    }

    pub fn set_block(&mut self, base: BlockContext) {
        for (i, c) in self.calls.iter_mut().enumerate() {
            c.block = BlockContext {
                timestamp: base.timestamp.overflowing_add(Word::from(13 * i as u64)).0,
                number: base.number.overflowing_add(Word::from(i as u64)).0,
            };
        }
    }

    /// Fixed layout: for each call its arguments, attached value and caller
    /// index (one byte); then the base block timestamp and number.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for c in &self.calls {
            for a in &c.args {
                put(&mut out, *a);
            }
            put(&mut out, c.value);
            let idx = callers()
                .iter()
                .position(|a| *a == c.caller)
                .unwrap_or(u8::MAX as usize);
            out.push(idx as u8);
        }
        let b = self.block();
        put(&mut out, b.timestamp);
        put(&mut out, b.number);
        out
    }

    /// Inverse of [`TestCase::encode`] given the called functions in order.
    pub fn decode(program: &Program, functions: &[&str], bytes: &[u8]) -> Option<TestCase> {
        let mut at = 0;
        let mut calls = Vec::new();
        for name in functions {
            let f = &program.functions[program.function_index(name)?];
            let args = (0..f.params.len())
                .map(|_| take(bytes, &mut at))
                .collect::<Option<Vec<_>>>()?;
            let value = take(bytes, &mut at)?;
            let caller = *callers().get(*bytes.get(at)? as usize)?;
            at += 1;
            calls.push(FunctionCall {
                function: name.to_string(),
                args,
                value,
                caller,
                block: BlockContext::default(),
            });
        }
        let timestamp = take(bytes, &mut at)?;
        let number = take(bytes, &mut at)?;
        if at != bytes.len() {
            return None;
        }
        let mut case = TestCase { calls };
        case.set_block(BlockContext { timestamp, number });
        Some(case)
    }

    pub fn functions(&self) -> Vec<&str> {
        self.calls.iter().map(|c| c.function.as_str()).collect()
    }
}

fn address_limit() -> Word {
    Word::one() << 160
}

/// Well-typed calls to existing functions, no value sent to non-payable
/// functions, known callers and address arguments within 160 bits.
pub fn validity_check(case: &TestCase, program: &Program) -> bool {
    case.calls.iter().all(|c| {
        let Some(i) = program.function_index(&c.function) else {
            return false;
        };
        let f = &program.functions[i];
        f.params.len() == c.args.len()
            && (f.payable || c.value.is_zero())
            && callers().contains(&c.caller)
            && f.params.iter().zip(&c.args).all(|(ty, a)| match ty {
                Type::Address => *a < address_limit(),
                Type::Bool => *a <= Word::one(),
                _ => true,
            })
    })
}

/// Values tried preferentially during generation and mutation.
#[derive(Debug, Clone)]
pub struct InterestingPool {
    pub words: Vec<Word>,
    pub addresses: Vec<Word>,
}

impl InterestingPool {
    pub fn harvest(contract: &Contract) -> Self {
        let mut set: BTreeSet<Word> = [
            Word::zero(),
            Word::one(),
            Word::from(2),
            Word::from(10),
            finney() * Word::from(50),
            Word::one() << 255,
            Word::MAX,
        ]
        .into();
        let mut add = |w: Word| {
            set.insert(w);
            set.insert(w.overflowing_add(Word::one()).0);
            set.insert(w.overflowing_sub(Word::one()).0);
        };
        for g in &contract.globals {
            if let Some(e) = &g.init {
                literals(e, &mut add);
            }
        }
        for f in &contract.functions {
            harvest_block(&f.body, &mut add);
        }
        let mut addresses: Vec<Word> = callers().to_vec();
        addresses.push(contract_address());
        addresses.push(Word::zero());
        InterestingPool {
            words: set.into_iter().collect(),
            addresses,
        }
    }

    pub fn draw(&self, ty: Type, rng: &mut impl Rng) -> Word {
        match ty {
            Type::Address => *self.addresses.choose(rng).expect("non-empty"),
            Type::Bool => Word::from(rng.gen_range(0..2u8)),
            _ => *self.words.choose(rng).expect("non-empty"),
        }
    }
}

fn literals(e: &Expr, add: &mut dyn FnMut(Word)) {
    e.walk(&mut |x| {
        if let ExprKind::Int(v) = x.kind {
            add(v);
        }
    });
}

fn in_comparisons(e: &Expr, add: &mut dyn FnMut(Word)) {
    e.walk(&mut |x| {
        if let ExprKind::Binary(op, l, r) = &x.kind {
            if op.is_comparison() {
                literals(l, add);
                literals(r, add);
            }
        }
    });
}

/// Literals inside comparison operands and local initializers.
fn harvest_block(b: &[Stmt], add: &mut dyn FnMut(Word)) {
    for s in b {
        match &s.kind {
            StmtKind::Local { init, .. } => {
                literals(init, add);
                in_comparisons(init, add);
            }
            StmtKind::Assign { value, .. } => in_comparisons(value, add),
            StmtKind::If {
                cond,
                then_block,
                else_block,
            } => {
                in_comparisons(cond, add);
                harvest_block(then_block, add);
                if let Some(e) = else_block {
                    harvest_block(e, add);
                }
            }
            StmtKind::While { cond, body } => {
                in_comparisons(cond, add);
                harvest_block(body, add);
            }
            StmtKind::For {
                init,
                cond,
                step,
                body,
            } => {
                harvest_block(std::slice::from_ref(&**init), add);
                in_comparisons(cond, add);
                harvest_block(std::slice::from_ref(&**step), add);
                harvest_block(body, add);
            }
            StmtKind::Require(cond) => in_comparisons(cond, add),
            StmtKind::Transfer { to, amount } => {
                in_comparisons(to, add);
                in_comparisons(amount, add);
            }
            StmtKind::Delegatecall(e) | StmtKind::Expr(e) => in_comparisons(e, add),
            StmtKind::Revert => {}
        }
    }
}

/// How argument values are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Generation {
    /// Mix of pool values, small numbers and uniform words.
    Seeded,
    /// Uniform over the whole type domain; no pool.
    Uniform,
}

fn uniform_word(rng: &mut impl Rng) -> Word {
    let mut buf = [0u8; WORD_BYTES];
    rng.fill(&mut buf);
    Word::from_big_endian(&buf)
}

fn draw_arg(ty: Type, pool: &InterestingPool, gen: Generation, rng: &mut impl Rng) -> Word {
    match (ty, gen) {
        (Type::Bool, _) => Word::from(rng.gen_range(0..2u8)),
        (Type::Address, Generation::Uniform) => uniform_word(rng) % address_limit(),
        (_, Generation::Uniform) => uniform_word(rng),
        (_, Generation::Seeded) => match rng.gen_range(0..10) {
            0..=3 => pool.draw(ty, rng),
            4..=6 if ty != Type::Address => Word::from(rng.gen_range(0..1000u64)),
            _ if ty == Type::Address => pool.draw(ty, rng),
            _ => uniform_word(rng),
        },
    }
}

fn draw_value(payable: bool, pool: &InterestingPool, gen: Generation, rng: &mut impl Rng) -> Word {
    if !payable || rng.gen_bool(0.5) {
        return Word::zero();
    }
    match gen {
        Generation::Uniform => uniform_word(rng),
        Generation::Seeded => pool.draw(Type::Uint, rng),
    }
}

fn draw_block(rng: &mut impl Rng) -> BlockContext {
    let base = BlockContext::default();
    BlockContext {
        timestamp: base.timestamp + Word::from(rng.gen_range(0..4096u64)),
        number: base.number + Word::from(rng.gen_range(0..256u64)),
    }
}

/// One call per function of `order`, with fresh inputs.
pub fn init_case(
    program: &Program,
    order: &[String],
    pool: &InterestingPool,
    gen: Generation,
    rng: &mut impl Rng,
) -> TestCase {
    let calls = order
        .iter()
        .map(|name| {
            let f = &program.functions[program.function_index(name).expect("known function")];
            FunctionCall {
                function: name.clone(),
                args: f
                    .params
                    .iter()
                    .map(|t| draw_arg(*t, pool, gen, rng))
                    .collect(),
                value: draw_value(f.payable, pool, gen, rng),
                caller: *callers().choose(rng).expect("non-empty"),
                block: BlockContext::default(),
            }
        })
        .collect();
    let mut case = TestCase { calls };
    case.set_block(draw_block(rng));
    case
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mutator {
    BitFlip,
    MultiBitFlip,
    ByteFlip,
    Arith,
    Splice,
    ValueFromPool,
    CallerSwap,
    BlockNudge,
}

impl Mutator {
    pub const ALL: [Mutator; 8] = [
        Mutator::BitFlip,
        Mutator::MultiBitFlip,
        Mutator::ByteFlip,
        Mutator::Arith,
        Mutator::Splice,
        Mutator::ValueFromPool,
        Mutator::CallerSwap,
        Mutator::BlockNudge,
    ];
}

/// Relative operator weights, indexed like [`Mutator::ALL`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MutationWeights(pub [u32; 8]);

impl Default for MutationWeights {
    fn default() -> Self {
        MutationWeights([3, 2, 2, 6, 4, 2, 1, 2])
    }
}

impl MutationWeights {
    fn pick(&self, rng: &mut impl Rng) -> Mutator {
        let total: u32 = self.0.iter().sum();
        let mut roll = rng.gen_range(0..total);
        for (m, w) in Mutator::ALL.iter().zip(self.0) {
            if roll < w {
                return *m;
            }
            roll -= w;
        }
        Mutator::ALL[0]
    }
}

/// A mutable numeric field of a case.
#[derive(Debug, Clone, Copy)]
enum Field {
    Arg(usize, usize),
    Value(usize),
    Timestamp,
    Number,
}

fn fields(case: &TestCase) -> Vec<Field> {
    let mut out = Vec::new();
    for (i, c) in case.calls.iter().enumerate() {
        out.extend((0..c.args.len()).map(|j| Field::Arg(i, j)));
        out.push(Field::Value(i));
    }
    out.push(Field::Timestamp);
    out.push(Field::Number);
    out
}

fn get(case: &TestCase, f: Field) -> Word {
    match f {
        Field::Arg(i, j) => case.calls[i].args[j],
        Field::Value(i) => case.calls[i].value,
        Field::Timestamp => case.block().timestamp,
        Field::Number => case.block().number,
    }
}

fn set(case: &mut TestCase, f: Field, w: Word) {
    match f {
        Field::Arg(i, j) => case.calls[i].args[j] = w,
        Field::Value(i) => case.calls[i].value = w,
        Field::Timestamp => {
            let b = BlockContext {
                timestamp: w,
                ..case.block()
            };
            case.set_block(b);
        }
        Field::Number => {
            let b = BlockContext {
                number: w,
                ..case.block()
            };
            case.set_block(b);
        }
    }
}

fn pick_bit(rng: &mut impl Rng) -> usize {
    if rng.gen_bool(0.75) {
        rng.gen_range(0..64)
    } else {
        rng.gen_range(0..256)
    }
}

fn delta(rng: &mut impl Rng) -> Word {
    let d = Word::from(rng.gen_range(1..=35u64));
    if rng.gen_bool(0.5) {
        d * Word::exp10(rng.gen_range(0..=18))
    } else {
        d << rng.gen_range(0..250usize)
    }
}

fn apply(
    m: Mutator,
    case: &mut TestCase,
    program: &Program,
    pool: &InterestingPool,
    rng: &mut impl Rng,
) {
    let all = fields(case);
    let field = *all.choose(rng).expect("block fields always exist");
    let ty = match field {
        Field::Arg(i, j) => {
            let f = program
                .function_index(&case.calls[i].function)
                .expect("valid case");
            program.functions[f].params[j]
        }
        _ => Type::Uint,
    };
    match m {
        Mutator::BitFlip => {
            let w = get(case, field) ^ (Word::one() << pick_bit(rng));
            set(case, field, w);
        }
        Mutator::MultiBitFlip => {
            let mut w = get(case, field);
            for _ in 0..rng.gen_range(2..=4) {
                w ^= Word::one() << pick_bit(rng);
            }
            set(case, field, w);
        }
        Mutator::ByteFlip => {
            let byte = if rng.gen_bool(0.75) {
                rng.gen_range(0..8)
            } else {
                rng.gen_range(0..32)
            };
            let w = get(case, field) ^ (Word::from(0xffu8) << (8 * byte));
            set(case, field, w);
        }
        Mutator::Arith => {
            let w = get(case, field);
            let d = delta(rng);
            let w = if rng.gen_bool(0.5) {
                w.overflowing_add(d).0
            } else {
                w.overflowing_sub(d).0
            };
            set(case, field, w);
        }
        Mutator::Splice => set(case, field, pool.draw(ty, rng)),
        Mutator::ValueFromPool => {
            let i = rng.gen_range(0..case.calls.len().max(1));
            if let Some(c) = case.calls.get_mut(i) {
                c.value = pool.draw(Type::Uint, rng);
            }
        }
        Mutator::CallerSwap => {
            let i = rng.gen_range(0..case.calls.len().max(1));
            if let Some(c) = case.calls.get_mut(i) {
                c.caller = *callers().choose(rng).expect("non-empty");
            }
        }
        Mutator::BlockNudge => {
            let mut b = case.block();
            if rng.gen_bool(0.5) {
                let d = Word::from(rng.gen_range(1..=900u64));
                b.timestamp = if rng.gen_bool(0.5) {
                    b.timestamp.overflowing_add(d).0
                } else {
                    b.timestamp.overflowing_sub(d).0
                };
            } else {
                let d = Word::from(rng.gen_range(1..=16u64));
                b.number = if rng.gen_bool(0.5) {
                    b.number.overflowing_add(d).0
                } else {
                    b.number.overflowing_sub(d).0
                };
            }
            case.set_block(b);
        }
    }
}

/// Maximum redraws when a mutant fails [`validity_check`].
pub const MAX_REDRAWS: usize = 8;

/// Apply one weighted-random operator. Invalid results are redrawn; after
/// [`MAX_REDRAWS`] failures the input is returned unchanged.
pub fn mutate(
    case: &TestCase,
    program: &Program,
    pool: &InterestingPool,
    weights: &MutationWeights,
    rng: &mut impl Rng,
) -> TestCase {
    for _ in 0..MAX_REDRAWS {
        let mut out = case.clone();
        apply(weights.pick(rng), &mut out, program, pool, rng);
        if validity_check(&out, program) {
            return out;
        }
    }
    // keep the rng stream advancing identically regardless of outcome
    let _ = rng.gen::<u32>();
    case.clone()
}

/// Apply a specific operator once, without validity checking.
pub fn mutate_with(
    m: Mutator,
    case: &TestCase,
    program: &Program,
    pool: &InterestingPool,
    rng: &mut impl Rng,
) -> TestCase {
    let mut out = case.clone();
    apply(m, &mut out, program, pool, rng);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lang::{compile, parse};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const GUESS: &str = include_str!("../../corpus/guessnum.msol");
    const CROWD: &str = include_str!("../../corpus/crowdfund.msol");

    fn setup(src: &str) -> (Contract, Program, InterestingPool) {
        let c = parse(src).unwrap();
        let p = compile(&c).unwrap();
        let pool = InterestingPool::harvest(&c);
        (c, p, pool)
    }

    fn names(p: &Program) -> Vec<String> {
        p.functions.iter().map(|f| f.name.clone()).collect()
    }

    fn decode_same(p: &Program, case: &TestCase) -> TestCase {
        TestCase::decode(p, &case.functions(), &case.encode()).expect("decodes")
    }

    #[test]
    fn guessnum_initial_case_shape() {
        let (_, p, pool) = setup(GUESS);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let order = vec!["guess".to_string(), "getReward".to_string()];
        let mut saw_pool_value = false;
        for _ in 0..200 {
            let case = init_case(&p, &order, &pool, Generation::Seeded, &mut rng);
            assert_eq!(case.functions(), ["guess", "getReward"]);
            assert_eq!(case.calls[0].args.len(), 1);
            assert!(case.calls[1].args.is_empty());
            assert!(validity_check(&case, &p));
            assert_eq!(decode_same(&p, &case), case);
            let v = case.calls[0].value;
            saw_pool_value |= !v.is_zero() && pool.words.contains(&v);
        }
        assert!(saw_pool_value);
    }

    #[test]
    fn zero_parameter_calls_have_empty_args() {
        let (_, p, pool) = setup("contract C { uint256 x; fn f() { x = 1; } }");
        let case = init_case(
            &p,
            &names(&p),
            &pool,
            Generation::Seeded,
            &mut ChaCha8Rng::seed_from_u64(0),
        );
        assert!(case.calls[0].args.is_empty());
    }

    #[test]
    fn pool_holds_defaults_and_source_constants() {
        let (_, _, pool) = setup(CROWD);
        for w in [
            Word::zero(),
            Word::one(),
            Word::from(2),
            Word::from(10),
            finney() * Word::from(50),
            Word::one() << 255,
            Word::MAX,
            Word::from(300),
        ] {
            assert!(pool.words.contains(&w), "{w}");
        }
    }

    #[test]
    fn bit_flip_changes_one_bit() {
        let (_, p, pool) = setup("contract C { uint256 x; fn f(uint256 a) { x = a; } }");
        let base = TestCase::from_calls(vec![FunctionCall {
            function: "f".into(),
            args: vec![Word::from(6)],
            value: Word::zero(),
            caller: callers()[1],
            block: BlockContext::default(),
        }]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut seven = false;
        for _ in 0..5000 {
            let m = mutate_with(Mutator::BitFlip, &base, &p, &pool, &mut rng);
            let flipped: u32 = base
                .encode()
                .iter()
                .zip(m.encode())
                .map(|(a, b)| (a ^ b).count_ones())
                .sum();
            assert_eq!(flipped, 1);
            seven |= m.calls[0].args[0] == Word::from(7);
        }
        assert!(seven);
    }

    #[test]
    fn value_splice_reaches_fifty_finney() {
        let (_, p, pool) = setup(include_str!("../../corpus/value_gate.msol"));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let base = init_case(&p, &names(&p), &pool, Generation::Seeded, &mut rng);
        let target = finney() * Word::from(50);
        let hits = (0..10_000)
            .filter(|_| {
                let m = mutate(&base, &p, &pool, &MutationWeights::default(), &mut rng);
                m.calls.iter().any(|c| c.value == target)
            })
            .count();
        assert!(hits > 0);
    }

    #[test]
    fn arity_and_types_survive_many_mutations() {
        let (_, p, pool) = setup(include_str!("../../corpus/escrow.msol"));
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut case = init_case(&p, &names(&p), &pool, Generation::Seeded, &mut rng);
        let shape: Vec<(String, usize)> = case
            .calls
            .iter()
            .map(|c| (c.function.clone(), c.args.len()))
            .collect();
        for _ in 0..100_000 {
            case = mutate(&case, &p, &pool, &MutationWeights::default(), &mut rng);
            assert!(validity_check(&case, &p));
            let now: Vec<(String, usize)> = case
                .calls
                .iter()
                .map(|c| (c.function.clone(), c.args.len()))
                .collect();
            assert_eq!(now, shape);
        }
    }

    #[test]
    fn validity_examples() {
        let (_, p, pool) =
            setup("contract C { uint256 x; fn f(address a) { x = 1; } fn g() payable { x = 2; } }");
        let mut case = init_case(
            &p,
            &names(&p),
            &pool,
            Generation::Seeded,
            &mut ChaCha8Rng::seed_from_u64(2),
        );
        case.calls[0].value = Word::zero();
        case.calls[0].args[0] = callers()[0];
        assert!(validity_check(&case, &p));
        let mut bad = case.clone();
        bad.calls[0].value = Word::one();
        assert!(!validity_check(&bad, &p));
        let mut bad = case.clone();
        bad.calls[0].args[0] = Word::one() << 160;
        assert!(!validity_check(&bad, &p));
        let mut bad = case.clone();
        bad.calls[1].caller = Word::from(12345);
        assert!(!validity_check(&bad, &p));
        let mut ok = case;
        ok.calls[1].value = Word::from(99);
        assert!(validity_check(&ok, &p));
    }

    #[test]
    fn decode_rejects_trailing_bytes() {
        let (_, p, pool) = setup(GUESS);
        let case = init_case(
            &p,
            &names(&p),
            &pool,
            Generation::Seeded,
            &mut ChaCha8Rng::seed_from_u64(0),
        );
        let mut bytes = case.encode();
        bytes.push(0);
        assert!(TestCase::decode(&p, &case.functions(), &bytes).is_none());
        assert!(TestCase::decode(&p, &case.functions(), &bytes[..bytes.len() - 2]).is_none());
    }

    proptest! {
        #[test]
        fn encode_roundtrip(seed in any::<u64>(), uniform in any::<bool>()) {
            let (_, p, pool) = setup(include_str!("../../corpus/voting.msol"));
            let gen = if uniform { Generation::Uniform } else { Generation::Seeded };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let case = init_case(&p, &names(&p), &pool, gen, &mut rng);
            prop_assert!(validity_check(&case, &p));
            prop_assert_eq!(decode_same(&p, &case), case.clone());
            let m = mutate(&case, &p, &pool, &MutationWeights::default(), &mut rng);
            prop_assert_eq!(decode_same(&p, &m), m);
        }
    }
}
