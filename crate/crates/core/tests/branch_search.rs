mod common;

use common::*;
use minifuzz::energy::{search_branches, Regions, VulnerableStatementSet};
use minifuzz::fuzz::run_case;
use minifuzz::fuzz::{evolve_with, init_case, Generation, InterestingPool};
use minifuzz::vm::{ExecConfig, WorldState};
use minifuzz::Word;
use proptest::prelude::*;
use rand::SeedableRng;

fn check(
    c: &minifuzz::lang::Contract,
    p: &minifuzz::lang::Program,
    traces: &[minifuzz::vm::ExecutionTrace],
) {
    let refs: Vec<_> = traces.iter().collect();
    let got = search_branches(
        &refs,
        p,
        &Regions::new(p),
        &VulnerableStatementSet::default(),
    );
    let want = AstOracle::new(c).expected(p, traces);
    assert_eq!(got.rarity, want.rarity, "{}", c.name);
    assert_eq!(got.rare, want.rare, "{}", c.name);
    assert_eq!(got.vulnerable, want.vulnerable, "{}", c.name);
}

#[test]
fn corpus_search_matches_ast_oracle() {
    let mut checked = 0;
    for path in corpus_files() {
        let (c, p) = load_src(&std::fs::read_to_string(&path).unwrap());
        if p.sites.len() > 10 {
            continue;
        }
        let mut all = AllTraces::default();
        evolve_with(&p, &c, &config(3, 3000), &mut all);
        check(&c, &p, &all.0);
        checked += 1;
    }
    assert!(checked >= 15);
}

#[test]
fn wrap_inside_guarded_code_is_vulnerable() {
    let (c, p) = load_src(
        "contract W { uint256 t; fn f(uint256 a) { if (a > 2) { t = a * a; } else { t = 1; } } }",
    );
    let genesis = WorldState::genesis(&p, Word::zero());
    let pool = InterestingPool::harvest(&c);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut case = init_case(&p, &["f".to_string()], &pool, Generation::Seeded, &mut rng);
    case.calls[0].args[0] = Word::MAX;
    let traces = run_case(&p, &genesis, &case, &ExecConfig::default());
    check(&c, &p, &traces);
    let refs: Vec<_> = traces.iter().collect();
    let got = search_branches(
        &refs,
        &p,
        &Regions::new(&p),
        &VulnerableStatementSet::default(),
    );
    assert_eq!(got.vulnerable.len(), 1);
}

/// Random nested control flow over two parameters.
fn stmt(depth: u32) -> BoxedStrategy<String> {
    let cmp = (
        0..2usize,
        prop::sample::select(vec!["==", "!=", "<", "<=", ">", ">="]),
        0..8u32,
    )
        .prop_map(|(v, op, k)| format!("{} {op} {k}", ["a", "b"][v]));
    let cond = (cmp.clone(), cmp, 0..4usize).prop_map(|(x, y, shape)| match shape {
        0 => x,
        1 => format!("{x} && {y}"),
        2 => format!("{x} || {y}"),
        _ => format!("!({x} && {y})"),
    });
    let leaf = prop_oneof![
        Just("t = t + 1;".to_string()),
        Just("t = a * b;".to_string()),
        Just("transfer(msg.sender, 1);".to_string()),
        Just("s = block.number;".to_string()),
    ]
    .boxed();
    if depth == 0 {
        return leaf;
    }
    let inner = prop::collection::vec(stmt(depth - 1), 1..3).prop_map(|v| v.join(" "));
    prop_oneof![
        2 => leaf,
        2 => (cond.clone(), inner.clone()).prop_map(|(c, b)| format!("if ({c}) {{ {b} }}")),
        1 => (cond.clone(), inner.clone(), inner.clone())
            .prop_map(|(c, x, y)| format!("if ({c}) {{ {x} }} else {{ {y} }}")),
        1 => (cond.clone(), inner.clone())
            .prop_map(|(c, b)| format!("i = 0; while (i < 3 && ({c})) {{ i = i + 1; {b} }}")),
        1 => cond.prop_map(|c| format!("require({c});")),
    ]
    .boxed()
}

fn program() -> impl Strategy<Value = String> {
    prop::collection::vec(stmt(3), 1..4).prop_map(|body| {
        format!(
            "contract R {{ uint256 t; uint256 s; fn f(uint256 a, uint256 b) {{ uint256 i = 0; {} }} }}",
            body.join(" ")
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn rarity_equals_static_depth(src in program(), inputs in prop::collection::vec((0..9u64, 0..9u64), 4)) {
        let (c, p) = load_src(&src);
        let genesis = WorldState::genesis(&p, Word::from(1000));
        let oracle = AstOracle::new(&c);
        let mut traces = Vec::new();
        for (a, b) in inputs {
            let pool = InterestingPool::harvest(&c);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(a * 10 + b);
            let mut case = init_case(&p, &["f".to_string()], &pool, Generation::Seeded, &mut rng);
            case.calls[0].args = vec![Word::from(a), Word::from(b)];
            traces.extend(run_case(&p, &genesis, &case, &ExecConfig::default()));
        }
        for s in &p.sites {
            prop_assert_eq!(oracle.depth[&(s.function, s.loc.key())], s.depth);
        }
        for t in &traces {
            for b in &t.covered {
                prop_assert_eq!(b.rarity, p.site(b.id.site).depth);
            }
        }
        check(&c, &p, &traces);
    }
}
