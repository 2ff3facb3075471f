//! Seed evolution: coverage archiving, branch-distance selection and
//! energy-bounded mutation rounds.

mod case;
mod distance;

use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::energy::{
    feedback_priority, search_branches, target_energy, EnergyRecord, EnergySchedule, Regions,
    VulnerableStatementSet,
};
use crate::lang::{Contract, Program};
use crate::sequence::{build_sequence, prolong, select_pairs, SequenceVariant};
use crate::vm::{
    ether, execute_call, BranchId, Dir, ExecConfig, ExecutionTrace, Terminal, WorldState,
    DEFAULT_STEP_LIMIT,
};
use crate::Word;

pub use case::{
    init_case, mutate, mutate_with, validity_check, Generation, InterestingPool, MutationWeights,
    Mutator, TestCase, MAX_REDRAWS,
};
pub use distance::{distance, rel_distance};

/// Disabled mechanism for comparison runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Ablation {
    /// Random function order and no prolongation.
    Wsg,
    /// No distance feedback: fresh uniformly random cases only.
    Wdm,
    /// Every branch gets the base energy; no vulnerable-first ordering.
    Wea,
}

impl std::str::FromStr for Ablation {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "wsg" => Ok(Ablation::Wsg),
            "wdm" => Ok(Ablation::Wdm),
            "wea" => Ok(Ablation::Wea),
            other => Err(format!(
                "unknown ablation `{other}` (expected wsg, wdm or wea)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FuzzConfig {
    pub seed: u64,
    /// Maximum number of test case executions.
    pub budget: u64,
    pub step_limit: usize,
    pub reentry_depth: u32,
    /// Instances of the ordered sequence generated before pairing.
    pub variants: usize,
    pub schedule: EnergySchedule,
    pub ablation: Option<Ablation>,
    /// Concatenate selected variant pairs.
    pub prolong: bool,
    #[serde(serialize_with = "crate::report::word_str")]
    pub endowment: Word,
    #[serde(skip)]
    pub weights: MutationWeights,
}

impl Default for FuzzConfig {
    fn default() -> Self {
        FuzzConfig {
            seed: 0,
            budget: 100_000,
            step_limit: DEFAULT_STEP_LIMIT,
            reentry_depth: 1,
            variants: 8,
            schedule: EnergySchedule::default(),
            ablation: None,
            prolong: true,
            endowment: ether() * Word::from(10),
            weights: MutationWeights::default(),
        }
    }
}

impl FuzzConfig {
    pub fn exec_config(&self) -> ExecConfig {
        ExecConfig {
            step_limit: self.step_limit,
            reentry_depth: (self.reentry_depth > 0).then_some(self.reentry_depth),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Seed {
    pub id: u64,
    pub case: TestCase,
    pub priority: f64,
    /// Distances to just-missed branches this seed is currently best for.
    pub distances: BTreeMap<BranchId, Word>,
    /// Branches this seed was the first to cover.
    pub first_covered: BTreeSet<BranchId>,
    pub traces: Vec<ExecutionTrace>,
}

impl Seed {
    pub fn covers(&self) -> BTreeSet<BranchId> {
        self.traces
            .iter()
            .flat_map(|t| t.covered.iter().map(|b| b.id))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CoverageSample {
    pub elapsed_ms: u64,
    pub executions: u64,
    pub branches_covered: usize,
    pub total_branches: usize,
}

/// Size of the recent-case ring buffer consulted by [`TestSuite::repeat_check`].
pub const RECENT_CASES: usize = 4096;

/// Cap on sequence variants considered for prolongation.
pub const MAX_VARIANTS: usize = 64;

/// VM steps per millisecond of the campaign clock.
pub const STEPS_PER_MS: u64 = 1000;

#[derive(Debug, Clone)]
pub struct TestSuite {
    pub sequence: Vec<String>,
    pub seeds: BTreeMap<u64, Seed>,
    /// Covered branch and the seed that covered it first.
    pub covered: BTreeMap<BranchId, u64>,
    /// Best distance so far per just-missed branch, and the seed holding it.
    pub best: BTreeMap<BranchId, (Word, u64)>,
    pub log: Vec<CoverageSample>,
    pub energy_log: BTreeMap<BranchId, EnergyRecord>,
    pub executions: u64,
    /// Total VM steps; drives the campaign clock.
    pub steps: u64,
    pub total_branches: usize,
    next_id: u64,
    recent: VecDeque<Vec<u8>>,
    known: HashSet<Vec<u8>>,
}

impl TestSuite {
    fn new(program: &Program, sequence: Vec<String>) -> Self {
        TestSuite {
            sequence,
            seeds: BTreeMap::new(),
            covered: BTreeMap::new(),
            best: BTreeMap::new(),
            log: Vec::new(),
            energy_log: BTreeMap::new(),
            executions: 0,
            steps: 0,
            total_branches: 2 * program.sites.len(),
            next_id: 0,
            recent: VecDeque::new(),
            known: HashSet::new(),
        }
    }

    pub fn elapsed_ms(&self) -> u64 {
        self.steps / STEPS_PER_MS
    }

    /// Byte-identical encoding among archived seeds or recent cases.
    pub fn repeat_check(&self, case: &TestCase) -> bool {
        self.known.contains(&case.encode())
    }

    fn remember(&mut self, enc: Vec<u8>) {
        if self.known.contains(&enc) {
            return;
        }
        if self.recent.len() == RECENT_CASES {
            if let Some(old) = self.recent.pop_front() {
                if !self.seeds.values().any(|s| s.case.encode() == old) {
                    self.known.remove(&old);
                }
            }
        }
        self.known.insert(enc.clone());
        self.recent.push_back(enc);
    }

    fn sample(&mut self) {
        let s = CoverageSample {
            elapsed_ms: self.elapsed_ms(),
            executions: self.executions,
            branches_covered: self.covered.len(),
            total_branches: self.total_branches,
        };
        if self.log.last() != Some(&s) {
            self.log.push(s);
        }
    }

    pub fn coverage_csv(&self) -> String {
        let mut out = String::from("elapsed_ms,executions,branches_covered,total_branches\n");
        for s in &self.log {
            out.push_str(&format!(
                "{},{},{},{}\n",
                s.elapsed_ms, s.executions, s.branches_covered, s.total_branches
            ));
        }
        out
    }

    pub fn seeds(&self) -> impl Iterator<Item = &Seed> {
        self.seeds.values()
    }

    /// Drop a distance seed that no longer holds any target and was never
    /// the first coverer of a branch.
    fn maybe_evict(&mut self, id: u64) {
        let Some(seed) = self.seeds.get(&id) else {
            return;
        };
        if seed.first_covered.is_empty() && seed.distances.is_empty() {
            self.seeds.remove(&id);
        }
    }
}

/// Receives every executed case; used by the vulnerability oracle.
pub trait Observer {
    fn observe(&mut self, case: &TestCase, traces: &[ExecutionTrace]);
}

impl Observer for () {
    fn observe(&mut self, _: &TestCase, _: &[ExecutionTrace]) {}
}

/// Result of running one case.
struct Outcome {
    new_branches: usize,
    /// Distance per just-missed branch that the case reached.
    distances: BTreeMap<BranchId, Word>,
}

/// Run every call of `case` from `genesis`, threading state.
pub fn run_case(
    program: &Program,
    genesis: &WorldState,
    case: &TestCase,
    config: &ExecConfig,
) -> Vec<ExecutionTrace> {
    let mut state = genesis.clone();
    case.calls
        .iter()
        .map(|c| execute_call(program, &mut state, c, config).expect("validated case"))
        .collect()
}

/// Minimum distance per uncovered sibling over all comparisons in `traces`.
fn case_distances(
    traces: &[ExecutionTrace],
    covered: &BTreeMap<BranchId, u64>,
) -> BTreeMap<BranchId, Word> {
    let mut out: BTreeMap<BranchId, Word> = BTreeMap::new();
    for t in traces {
        for c in &t.comparisons {
            let missed = BranchId::new(c.site, Dir::from_taken(!c.taken));
            if covered.contains_key(&missed) {
                continue;
            }
            let d = distance(c, missed.dir);
            out.entry(missed)
                .and_modify(|e| *e = (*e).min(d))
                .or_insert(d);
        }
    }
    out
}

struct Engine<'a, O: Observer> {
    program: &'a Program,
    config: &'a FuzzConfig,
    exec: ExecConfig,
    genesis: WorldState,
    pool: InterestingPool,
    regions: Regions,
    kinds: VulnerableStatementSet,
    rng: ChaCha8Rng,
    suite: TestSuite,
    variants: Vec<SequenceVariant>,
    tried_pairs: BTreeSet<(usize, usize)>,
    observer: &'a mut O,
}

impl<O: Observer> Engine<'_, O> {
    fn exhausted(&self) -> bool {
        self.suite.executions >= self.config.budget
    }

    fn evaluate(&mut self, case: &TestCase) -> Outcome {
        let traces = run_case(self.program, &self.genesis, case, &self.exec);
        self.suite.executions += 1;
        self.suite.steps += traces.iter().map(|t| t.steps as u64).sum::<u64>();
        self.observer.observe(case, &traces);
        self.suite.remember(case.encode());
        // Plain sequences that ran to completion become prolongation variants.
        if self.variants.len() < MAX_VARIANTS
            && case.functions() == self.suite.sequence
            && traces.iter().all(|t| t.terminal == Terminal::Stop)
        {
            let v = SequenceVariant {
                calls: case.calls.clone(),
            };
            if !self.variants.contains(&v) {
                self.variants.push(v);
            }
        }

        let new: BTreeSet<BranchId> = traces
            .iter()
            .flat_map(|t| t.covered.iter().map(|b| b.id))
            .filter(|b| !self.suite.covered.contains_key(b))
            .collect();
        let mut archived = None;
        if self.suite.seeds.is_empty() && new.is_empty() {
            // the initial case seeds the suite even when it covers nothing
            archived = Some(self.archive(case, &traces));
        }
        if !new.is_empty() {
            let id = self.archive(case, &traces);
            for b in &new {
                self.suite.covered.insert(*b, id);
                if let Some((_, holder)) = self.suite.best.remove(b) {
                    if let Some(s) = self.suite.seeds.get_mut(&holder) {
                        s.distances.remove(b);
                    }
                    self.suite.maybe_evict(holder);
                }
            }
            if let Some(s) = self.suite.seeds.get_mut(&id) {
                s.first_covered = new.clone();
            }
            archived = Some(id);
            self.suite.sample();
        }

        let distances = case_distances(&traces, &self.suite.covered);
        if self.config.ablation != Some(Ablation::Wdm) {
            for (b, d) in &distances {
                let better = self.suite.best.get(b).is_none_or(|(old, _)| d < old);
                if !better {
                    continue;
                }
                let id = match archived {
                    Some(id) => id,
                    None => {
                        let id = self.archive(case, &traces);
                        archived = Some(id);
                        id
                    }
                };
                if let Some((_, old)) = self.suite.best.insert(*b, (*d, id)) {
                    if let Some(s) = self.suite.seeds.get_mut(&old) {
                        s.distances.remove(b);
                    }
                    if old != id {
                        self.suite.maybe_evict(old);
                    }
                }
                if let Some(s) = self.suite.seeds.get_mut(&id) {
                    s.distances.insert(*b, *d);
                }
            }
        }
        Outcome {
            new_branches: new.len(),
            distances,
        }
    }

    fn archive(&mut self, case: &TestCase, traces: &[ExecutionTrace]) -> u64 {
        let id = self.suite.next_id;
        self.suite.next_id += 1;
        self.suite.seeds.insert(
            id,
            Seed {
                id,
                case: case.clone(),
                priority: 1.0,
                distances: BTreeMap::new(),
                first_covered: BTreeSet::new(),
                traces: traces.to_vec(),
            },
        );
        id
    }

    fn initial_phase(&mut self) {
        let order = self.suite.sequence.clone();
        let gen = if self.config.ablation == Some(Ablation::Wdm) {
            Generation::Uniform
        } else {
            Generation::Seeded
        };
        for _ in 0..self.config.variants.max(1) {
            if self.exhausted() {
                return;
            }
            let case = init_case(self.program, &order, &self.pool, gen, &mut self.rng);
            self.evaluate(&case);
            let v = SequenceVariant { calls: case.calls };
            if !self.variants.contains(&v) {
                self.variants.push(v);
            }
        }
        self.prolong_pairs(usize::MAX);
    }

    /// Run not yet tried prolongations of variant pairs, at most `limit`.
    fn prolong_pairs(&mut self, limit: usize) {
        if !self.config.prolong || self.config.ablation == Some(Ablation::Wsg) {
            return;
        }
        let mut done = 0;
        for (i, j) in select_pairs(&self.variants) {
            if done >= limit || self.exhausted() {
                return;
            }
            if !self.tried_pairs.insert((i, j)) {
                continue;
            }
            let case = prolong(&self.variants[i], &self.variants[j]);
            self.evaluate(&case);
            done += 1;
        }
    }

    fn round(&mut self) {
        let search = {
            let traces: Vec<&ExecutionTrace> = self
                .suite
                .seeds
                .values()
                .flat_map(|s| s.traces.iter())
                .collect();
            search_branches(&traces, self.program, &self.regions, &self.kinds)
        };
        let wea = self.config.ablation == Some(Ablation::Wea);
        let mut queue: Vec<(Option<BranchId>, u64)> = self
            .suite
            .best
            .iter()
            .map(|(b, (_, id))| (Some(*b), *id))
            .collect();
        if queue.is_empty() {
            let mut ids: Vec<&Seed> = self.suite.seeds.values().collect();
            ids.sort_by(|a, b| b.priority.total_cmp(&a.priority));
            queue = ids.into_iter().map(|s| (None, s.id)).collect();
        }
        if !wea {
            let seeds = &self.suite.seeds;
            queue = feedback_priority(
                queue,
                |(_, id)| {
                    seeds
                        .get(id)
                        .map(|s| s.covers().into_iter().collect())
                        .unwrap_or_default()
                },
                &search.vulnerable,
            );
        }
        let mut fruitful: BTreeSet<u64> = BTreeSet::new();
        for (target, seed_id) in queue {
            if self.exhausted() {
                break;
            }
            let Some(seed) = self.suite.seeds.get(&seed_id) else {
                continue;
            };
            if target.is_some_and(|t| self.suite.covered.contains_key(&t)) {
                continue;
            }
            let mut current = seed.case.clone();
            let mut current_dist = target.and_then(|t| seed.distances.get(&t).copied());
            let energy = match target {
                Some(t) => {
                    let (r, v, e) = target_energy(
                        self.program,
                        &self.regions,
                        &self.kinds,
                        &self.config.schedule,
                        t,
                    );
                    let e = if wea { self.config.schedule.base } else { e };
                    self.suite.energy_log.insert(
                        t,
                        EnergyRecord {
                            branch_id: t.to_string(),
                            rarity: r,
                            vulnerable: v,
                            energy: e,
                        },
                    );
                    e
                }
                None => self.config.schedule.base,
            };
            for _ in 0..energy {
                if self.exhausted() {
                    break;
                }
                let mutant = mutate(
                    &current,
                    self.program,
                    &self.pool,
                    &self.config.weights,
                    &mut self.rng,
                );
                if self.suite.repeat_check(&mutant) {
                    continue;
                }
                let out = self.evaluate(&mutant);
                if out.new_branches > 0 {
                    fruitful.insert(seed_id);
                    if let Some(s) = self.suite.seeds.get_mut(&seed_id) {
                        s.priority += out.new_branches as f64;
                    }
                }
                let Some(t) = target else {
                    continue;
                };
                if self.suite.covered.contains_key(&t) {
                    break;
                }
                // Hill climb: keep the mutant when it is no further away.
                if let Some(d) = out.distances.get(&t) {
                    if current_dist.is_none_or(|c| *d <= c) {
                        current_dist = Some(*d);
                        current = mutant;
                    }
                }
            }
        }
        for s in self.suite.seeds.values_mut() {
            if !fruitful.contains(&s.id) {
                s.priority /= 2.0;
            }
        }
    }

    fn random_phase(&mut self) {
        let order = self.suite.sequence.clone();
        while !self.exhausted() {
            let case = init_case(
                self.program,
                &order,
                &self.pool,
                Generation::Uniform,
                &mut self.rng,
            );
            self.evaluate(&case);
        }
    }
}

/// Run one fuzzing campaign.
pub fn evolve(program: &Program, contract: &Contract, config: &FuzzConfig) -> TestSuite {
    evolve_with(program, contract, config, &mut ())
}

/// [`evolve`], reporting every executed case to `observer`.
pub fn evolve_with<O: Observer>(
    program: &Program,
    contract: &Contract,
    config: &FuzzConfig,
    observer: &mut O,
) -> TestSuite {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut sequence = build_sequence(contract);
    if config.ablation == Some(Ablation::Wsg) {
        sequence.shuffle(&mut rng);
    }
    let mut engine = Engine {
        program,
        config,
        exec: config.exec_config(),
        genesis: WorldState::genesis(program, config.endowment),
        pool: InterestingPool::harvest(contract),
        regions: Regions::new(program),
        kinds: VulnerableStatementSet::default(),
        rng,
        suite: TestSuite::new(program, sequence),
        variants: Vec::new(),
        tried_pairs: BTreeSet::new(),
        observer,
    };
    engine.suite.sample();
    engine.initial_phase();
    if config.ablation == Some(Ablation::Wdm) {
        engine.random_phase();
    } else {
        while !engine.exhausted() {
            let before = engine.suite.executions;
            engine.round();
            engine.prolong_pairs(config.variants);
            if engine.suite.executions == before {
                // every mutation was a repeat; inject a fresh case
                let order = engine.suite.sequence.clone();
                let case = init_case(
                    program,
                    &order,
                    &engine.pool,
                    Generation::Seeded,
                    &mut engine.rng,
                );
                engine.evaluate(&case);
            }
        }
    }
    let mut suite = engine.suite;
    suite.sample();
    suite
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lang::{compile, parse};

    fn load(src: &str) -> (Contract, Program) {
        let c = parse(src).unwrap();
        let p = compile(&c).unwrap();
        (c, p)
    }

    fn config(seed: u64, budget: u64) -> FuzzConfig {
        FuzzConfig {
            seed,
            budget,
            ..Default::default()
        }
    }

    const GATE: &str = include_str!("../../corpus/value_gate.msol");
    const CORPUS: [&str; 5] = [
        include_str!("../../corpus/guessnum.msol"),
        include_str!("../../corpus/crowdfund.msol"),
        include_str!("../../corpus/escrow.msol"),
        include_str!("../../corpus/voting.msol"),
        include_str!("../../corpus/strict_equality.msol"),
    ];

    #[test]
    fn value_gate_archives_fifty_finney() {
        let (c, p) = load(GATE);
        let suite = evolve(&p, &c, &config(0, 10_000));
        let fifty = crate::lang::parser::finney() * Word::from(50);
        let genesis = WorldState::genesis(&p, FuzzConfig::default().endowment);
        let seed = suite
            .seeds()
            .find(|s| s.case.calls.iter().any(|c| c.value == fifty))
            .expect("case with 50 finney archived");
        let traces = run_case(&p, &genesis, &seed.case, &ExecConfig::default());
        let then = BranchId::new(p.sites[0].id, Dir::Then);
        assert!(traces.iter().any(|t| t.covers(then)));
        assert!(suite.covered.contains_key(&then));
    }

    #[test]
    fn branchless_contract_keeps_one_case() {
        let (c, p) = load("contract C { uint256 x; fn f(uint256 a) { x = a + 1; } }");
        let suite = evolve(&p, &c, &config(0, 500));
        assert_eq!(suite.seeds.len(), 1);
        assert_eq!(suite.executions, 500);
    }

    #[test]
    fn repeat_check_examples() {
        let (c, p) = load(GATE);
        let suite = evolve(&p, &c, &config(0, 300));
        let seed = suite.seeds().next().unwrap().case.clone();
        assert!(suite.repeat_check(&seed));
        let mut other = seed.clone();
        let b = other.block();
        other.set_block(crate::vm::BlockContext {
            timestamp: b.timestamp ^ Word::one() << 201,
            ..b
        });
        assert!(!suite.repeat_check(&other));
        let mut flipped = seed;
        let b = flipped.block();
        flipped.set_block(crate::vm::BlockContext {
            number: b.number ^ Word::one() << 200,
            ..b
        });
        assert!(!suite.repeat_check(&flipped));
    }

    #[test]
    fn same_seed_same_suite() {
        for src in CORPUS {
            let (c, p) = load(src);
            let a = evolve(&p, &c, &config(9, 3000));
            let b = evolve(&p, &c, &config(9, 3000));
            assert_eq!(a.coverage_csv(), b.coverage_csv());
            let enc = |s: &TestSuite| {
                s.seeds()
                    .map(|x| (x.id, x.case.encode()))
                    .collect::<Vec<_>>()
            };
            assert_eq!(enc(&a), enc(&b));
            assert_eq!(a.covered, b.covered);
        }
    }

    /// Logs every evaluated case for the selection invariants.
    #[derive(Default)]
    struct Log {
        traces: Vec<Vec<ExecutionTrace>>,
    }

    impl Observer for Log {
        fn observe(&mut self, _: &TestCase, traces: &[ExecutionTrace]) {
            self.traces.push(traces.to_vec());
        }
    }

    #[test]
    fn coverage_is_monotone_and_consistent() {
        for (i, src) in CORPUS.iter().enumerate() {
            let (c, p) = load(src);
            let mut log = Log::default();
            let suite = evolve_with(&p, &c, &config(i as u64, 4000), &mut log);
            for w in suite.log.windows(2) {
                assert!(w[0].branches_covered <= w[1].branches_covered);
                assert!(w[0].executions <= w[1].executions);
            }
            let seen: BTreeSet<BranchId> = log
                .traces
                .iter()
                .flatten()
                .flat_map(|t| t.covered.iter().map(|b| b.id))
                .collect();
            let covered: BTreeSet<BranchId> = suite.covered.keys().copied().collect();
            assert_eq!(covered, seen);
            let archived: BTreeSet<BranchId> = suite.seeds().flat_map(|s| s.covers()).collect();
            assert_eq!(archived, covered);
        }
    }

    #[test]
    fn every_covered_branch_keeps_a_coverer() {
        for seed in 0..4 {
            for src in CORPUS {
                let (c, p) = load(src);
                let suite = evolve(&p, &c, &config(seed, 3000));
                for (b, id) in &suite.covered {
                    let s = suite.seeds.get(id).expect("first coverer archived");
                    assert!(s.covers().contains(b));
                }
            }
        }
    }

    #[test]
    fn archived_distance_is_minimum_ever_seen() {
        for (i, src) in CORPUS.iter().enumerate() {
            let (c, p) = load(src);
            let mut log = Log::default();
            let suite = evolve_with(&p, &c, &config(i as u64, 4000), &mut log);
            for (b, (d, id)) in &suite.best {
                let min = log
                    .traces
                    .iter()
                    .flatten()
                    .flat_map(|t| &t.comparisons)
                    .filter(|r| r.site == b.site && Dir::from_taken(!r.taken) == b.dir)
                    .map(|r| distance(r, b.dir))
                    .min()
                    .expect("branch was just missed");
                assert_eq!(*d, min, "{b}");
                assert_eq!(suite.seeds[id].distances[b], min);
            }
        }
    }

    #[test]
    fn distances_only_for_uncovered_branches() {
        for src in CORPUS {
            let (c, p) = load(src);
            let suite = evolve(&p, &c, &config(1, 3000));
            for s in suite.seeds() {
                assert!(s.priority >= 0.0);
                for b in s.distances.keys() {
                    assert!(!suite.covered.contains_key(b));
                }
            }
        }
    }

    #[test]
    fn wdm_never_tracks_distances() {
        let (c, p) = load(GATE);
        let suite = evolve(
            &p,
            &c,
            &FuzzConfig {
                ablation: Some(Ablation::Wdm),
                ..config(0, 2000)
            },
        );
        assert!(suite.best.is_empty());
        assert_eq!(suite.executions, 2000);
    }
}
