//! Branch classification (rarity and vulnerability) and the per-branch
//! mutation energy schedule.
//!
//! The code guarded by an edge is the set of instructions reachable from
//! the edge target that become unreachable from the function entry once the
//! edge is removed. An edge is vulnerable when that region holds a
//! vulnerable opcode, or when a trace shows a vulnerable event (such as an
//! arithmetic wrap) inside the region after passing the edge.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::lang::{Op, Program};
use crate::vm::{BranchId, Dir, Event, ExecutionTrace};

pub use crate::vm::rarity;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum VulnKind {
    Transfer,
    Send,
    DelegateCall,
    BalanceRead,
    TimestampRead,
    NumberRead,
    OverflowArith,
}

impl VulnKind {
    fn of_op(op: &Op) -> Option<VulnKind> {
        Some(match op {
            Op::Transfer => VulnKind::Transfer,
            Op::Send { .. } => VulnKind::Send,
            Op::DelegateCall => VulnKind::DelegateCall,
            Op::SelfBalance => VulnKind::BalanceRead,
            Op::Timestamp => VulnKind::TimestampRead,
            Op::Number => VulnKind::NumberRead,
            _ => return None,
        })
    }

    fn of_event(e: &Event) -> Option<VulnKind> {
        Some(match e {
            Event::Transfer { .. } => VulnKind::Transfer,
            Event::Send { .. } => VulnKind::Send,
            Event::DelegateCall { .. } => VulnKind::DelegateCall,
            Event::BalanceRead { .. } => VulnKind::BalanceRead,
            Event::TimestampRead { .. } => VulnKind::TimestampRead,
            Event::NumberRead { .. } => VulnKind::NumberRead,
            Event::OverflowWrap { .. } => VulnKind::OverflowArith,
            _ => return None,
        })
    }
}

/// Statement kinds that make a branch vulnerable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VulnerableStatementSet(pub BTreeSet<VulnKind>);

impl Default for VulnerableStatementSet {
    fn default() -> Self {
        VulnerableStatementSet(
            [
                VulnKind::Transfer,
                VulnKind::Send,
                VulnKind::DelegateCall,
                VulnKind::BalanceRead,
                VulnKind::TimestampRead,
                VulnKind::NumberRead,
                VulnKind::OverflowArith,
            ]
            .into(),
        )
    }
}

/// Static per-edge regions of one program.
#[derive(Debug, Clone)]
pub struct Regions {
    regions: BTreeMap<BranchId, BTreeSet<usize>>,
}

impl Regions {
    pub fn new(program: &Program) -> Self {
        let mut regions = BTreeMap::new();
        for site in &program.sites {
            let f = &program.functions[site.function];
            let Op::Branch { else_target, .. } = f.code[site.pc] else {
                unreachable!("site {} is not a branch", site.id);
            };
            for (dir, target) in [(Dir::Then, site.pc + 1), (Dir::Else, else_target)] {
                let from_target = f.reachable(target, None);
                let without = f.reachable(0, Some((site.pc, target)));
                let region = from_target.difference(&without).copied().collect();
                regions.insert(BranchId::new(site.id, dir), region);
            }
        }
        Regions { regions }
    }

    pub fn region(&self, id: BranchId) -> &BTreeSet<usize> {
        &self.regions[&id]
    }

    pub fn statically_vulnerable(
        &self,
        program: &Program,
        kinds: &VulnerableStatementSet,
        id: BranchId,
    ) -> bool {
        self.static_kinds(program, id)
            .iter()
            .any(|k| kinds.0.contains(k))
    }

    /// Vulnerable opcodes inside the region of `id`.
    pub fn static_kinds(&self, program: &Program, id: BranchId) -> BTreeSet<VulnKind> {
        let code = &program.functions[program.site(id.site).function].code;
        self.region(id)
            .iter()
            .filter_map(|&pc| VulnKind::of_op(&code[pc]))
            .collect()
    }
}

/// Output of branch searching over a set of traces.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BranchSearch {
    /// Rarity factor of every branch seen in the traces.
    pub rarity: BTreeMap<BranchId, u32>,
    pub rare: BTreeSet<BranchId>,
    pub vulnerable: BTreeSet<BranchId>,
}

/// Classify every branch covered by `traces`.
pub fn search_branches(
    traces: &[&ExecutionTrace],
    program: &Program,
    regions: &Regions,
    kinds: &VulnerableStatementSet,
) -> BranchSearch {
    let mut out = BranchSearch::default();
    for t in traces {
        for b in &t.covered {
            out.rarity.entry(b.id).or_insert(b.rarity);
            if b.rarity >= 2 {
                out.rare.insert(b.id);
            }
        }
        for step in &t.path {
            let id = step.branch;
            if !out.vulnerable.contains(&id)
                && (regions.statically_vulnerable(program, kinds, id)
                    || event_in_region(regions, kinds, t, step.frame, id))
            {
                out.vulnerable.insert(id);
            }
        }
    }
    out
}

/// A vulnerable event raised inside the region of `id` by the frame that
/// took the edge. Region instructions are only reachable through the edge,
/// so such an event necessarily follows it.
fn event_in_region(
    regions: &Regions,
    kinds: &VulnerableStatementSet,
    trace: &ExecutionTrace,
    frame: u32,
    id: BranchId,
) -> bool {
    let region = regions.region(id);
    trace.events.iter().any(|e| {
        e.frame() == frame
            && VulnKind::of_event(e).is_some_and(|k| kinds.0.contains(&k))
            && e.pc().is_some_and(|pc| region.contains(&pc))
    })
}

/// Energy parameters: base energy `E`, vulnerable coefficient `alpha` and the
/// rarity multiplier `r(R) = R^rarity_power`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EnergySchedule {
    pub base: u64,
    pub alpha: f64,
    pub rarity_power: f64,
}

impl Default for EnergySchedule {
    fn default() -> Self {
        EnergySchedule {
            base: 64,
            alpha: 2.0,
            rarity_power: 1.0,
        }
    }
}

impl EnergySchedule {
    pub fn r(&self, rarity: u32) -> f64 {
        (rarity as f64).powf(self.rarity_power)
    }

    /// `r(R)·E` for rare branches (`E` otherwise) plus `α·E` when vulnerable.
    pub fn energy(&self, rarity: u32, vulnerable: bool) -> u64 {
        let e = self.base as f64;
        let r_term = if rarity >= 2 { self.r(rarity) * e } else { e };
        let a_term = if vulnerable { self.alpha * e } else { 0.0 };
        (r_term + a_term).round() as u64
    }
}

/// Energy of a branch classified by [`search_branches`].
pub fn energy_for(branch: BranchId, schedule: &EnergySchedule, search: &BranchSearch) -> u64 {
    let r = search.rarity.get(&branch).copied().unwrap_or(1);
    schedule.energy(r, search.vulnerable.contains(&branch))
}

/// Energy of a branch no trace has taken yet. Its rarity equals that of the
/// executed sibling edge; vulnerability can only be judged statically.
pub fn target_energy(
    program: &Program,
    regions: &Regions,
    kinds: &VulnerableStatementSet,
    schedule: &EnergySchedule,
    target: BranchId,
) -> (u32, bool, u64) {
    let r = program.site(target.site).depth;
    let v = regions.statically_vulnerable(program, kinds, target);
    (r, v, schedule.energy(r, v))
}

/// Stable reorder putting entries that cover a vulnerable branch first.
pub fn feedback_priority<T>(
    queue: Vec<T>,
    covers: impl Fn(&T) -> Vec<BranchId>,
    vulnerable: &BTreeSet<BranchId>,
) -> Vec<T> {
    let (mut first, rest): (Vec<T>, Vec<T>) = queue
        .into_iter()
        .partition(|t| covers(t).iter().any(|b| vulnerable.contains(b)));
    first.extend(rest);
    first
}

/// One line of the energy log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnergyRecord {
    pub branch_id: String,
    #[serde(rename = "R")]
    pub rarity: u32,
    pub vulnerable: bool,
    pub energy: u64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lang::{compile, parse};
    use crate::vm::{callers, execute_call, BlockContext, ExecConfig, FunctionCall, WorldState};
    use crate::Word;
    use proptest::prelude::*;

    fn run(src: &str, function: &str, args: &[u64]) -> (Program, ExecutionTrace) {
        let p = compile(&parse(src).unwrap()).unwrap();
        let mut state = WorldState::genesis(&p, Word::from(10u64).pow(Word::from(19)));
        let call = FunctionCall {
            function: function.into(),
            args: args.iter().map(|&a| Word::from(a)).collect(),
            value: Word::zero(),
            caller: callers()[1],
            block: BlockContext::default(),
        };
        let t = execute_call(&p, &mut state, &call, &ExecConfig::default()).unwrap();
        (p, t)
    }

    fn classify(src: &str, function: &str, args: &[u64]) -> (Program, BranchSearch) {
        let (p, t) = run(src, function, args);
        let regions = Regions::new(&p);
        let s = search_branches(&[&t], &p, &regions, &VulnerableStatementSet::default());
        (p, s)
    }

    fn then_of(p: &Program, site: usize) -> BranchId {
        BranchId::new(p.sites[site].id, Dir::Then)
    }

    #[test]
    fn rare_vulnerable_gets_four_e() {
        let s = EnergySchedule::default();
        assert_eq!(s.energy(2, true), 4 * s.base);
    }

    #[test]
    fn plain_branch_gets_e() {
        let s = EnergySchedule::default();
        assert_eq!(s.energy(1, false), s.base);
    }

    #[test]
    fn block_number_read_in_loop_is_rare_and_vulnerable() {
        let src = "contract C { uint256 n; fn f(uint256 k) { uint256 i = 0; \
                   while (i < 3) { i = i + 1; if (k == 4) { n = block.number; } } } }";
        let (p, s) = classify(src, "f", &[4]);
        let b = then_of(&p, 1);
        assert_eq!(s.rarity[&b], 2);
        assert!(s.rare.contains(&b));
        assert!(s.vulnerable.contains(&b));
        assert_eq!(energy_for(b, &EnergySchedule::default(), &s), 256);
    }

    #[test]
    fn top_level_arithmetic_if_is_plain() {
        let src = "contract C { uint256 x; fn f(uint256 a) { if (a > 3) { x = a + 1; } } }";
        let (p, s) = classify(src, "f", &[9]);
        let b = then_of(&p, 0);
        assert_eq!(s.rarity[&b], 1);
        assert!(!s.rare.contains(&b));
        assert!(!s.vulnerable.contains(&b));
        assert_eq!(energy_for(b, &EnergySchedule::default(), &s), 64);
    }

    #[test]
    fn three_nested_ifs_guarding_transfer() {
        let src = "contract C { fn f(uint256 a, uint256 b, uint256 c) { \
                   if (a == 1) { if (b == 2) { if (c == 3) { transfer(msg.sender, 1); } } } } }";
        let (p, s) = classify(src, "f", &[1, 2, 3]);
        let b = then_of(&p, 2);
        assert_eq!(s.rarity[&b], 3);
        assert!(s.rare.contains(&b));
        assert!(s.vulnerable.contains(&b));
    }

    #[test]
    fn wrap_inside_region_marks_edge_vulnerable() {
        let src = "contract C { uint256 x; fn f(uint256 a) { if (a > 3) { x = a + a; } } }";
        let (p, s) = classify(src, "f", &[u64::MAX]);
        assert!(!s.vulnerable.contains(&then_of(&p, 0)));
        let big = "contract C { uint256 x; fn f(uint256 a) { if (a > 3) { x = a * 115792089237316195423570985008687907853269984665640564039457584007913129639935; } } }";
        let (p, s) = classify(big, "f", &[5]);
        assert!(s.vulnerable.contains(&then_of(&p, 0)));
    }

    #[test]
    fn unexecuted_target_uses_static_region() {
        let src = "contract C { fn f(uint256 a) { uint256 i = 0; while (i < 2) { i = i + 1; \
                   if (a == 99) { transfer(msg.sender, 1); } } } }";
        let p = compile(&parse(src).unwrap()).unwrap();
        let regions = Regions::new(&p);
        let (r, v, e) = target_energy(
            &p,
            &regions,
            &VulnerableStatementSet::default(),
            &EnergySchedule::default(),
            then_of(&p, 1),
        );
        assert_eq!((r, v, e), (2, true, 256));
    }

    #[test]
    fn feedback_examples() {
        let vuln: BTreeSet<BranchId> = [BranchId::new(crate::lang::SiteId(0), Dir::Then)].into();
        let covers = |x: &(u32, bool)| {
            if x.1 {
                vuln.iter().copied().collect()
            } else {
                Vec::new()
            }
        };
        let q = vec![(0, false), (1, false), (2, true), (3, false), (4, false)];
        assert_eq!(feedback_priority(q.clone(), covers, &vuln)[0], (2, true));
        assert_eq!(feedback_priority(q.clone(), covers, &BTreeSet::new()), q);
        let q2 = vec![(0, false), (1, true), (2, false), (3, true)];
        let out: Vec<u32> = feedback_priority(q2, covers, &vuln)
            .iter()
            .map(|x| x.0)
            .collect();
        assert_eq!(out, [1, 3, 0, 2]);
    }

    proptest! {
        #[test]
        fn schedule_is_monotone(
            base in 1u64..512,
            alpha in 1.01f64..8.0,
            power in 0.1f64..3.0,
            r1 in 1u32..8,
            dr in 1u32..8,
        ) {
            let s = EnergySchedule { base, alpha, rarity_power: power };
            let r2 = r1 + dr;
            prop_assert!(s.r(r1) < s.r(r2));
            for v in [false, true] {
                prop_assert!(s.energy(r1, v) <= s.energy(r2, v));
            }
            prop_assert!(s.energy(r1, true) > s.energy(r1, false));
        }

        #[test]
        fn vulnerable_adds_alpha_e(base in 1u64..512, alpha in 1u32..8, r in 1u32..8) {
            let s = EnergySchedule { base, alpha: alpha as f64, rarity_power: 1.0 };
            prop_assert_eq!(s.energy(r, true) - s.energy(r, false), alpha as u64 * base);
        }
    }
}
