//! Vulnerability patterns evaluated over the executions of a campaign.
//!
//! A [`Detector`] watches every executed case and keeps the first witness of
//! each candidate pattern. [`detect`] then runs the confirmation steps that
//! need extra executions (the reentry harness and the block-context replay
//! for timestamp and block-number dependence) and returns the findings.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::energy::{Regions, VulnKind};
use crate::fuzz::{run_case, FuzzConfig, Observer, TestCase, TestSuite};
use crate::lang::{Loc, Program, Rel, SiteId};
use crate::vm::{attacker, BlockContext, Dir, Event, ExecConfig, ExecutionTrace, Taint, Terminal};
use crate::Word;

/// Vulnerability class. Variants are ordered by their short code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum VulnClass {
    /// Block number dependency.
    Bn,
    /// Dangerous delegatecall.
    Dg,
    /// Ether freezing.
    Ef,
    /// Integer overflow.
    Of,
    /// Reentrancy.
    Re,
    /// Strict balance equality.
    Se,
    /// Timestamp dependency.
    Tp,
    /// Unchecked call result.
    Uc,
}

impl VulnClass {
    pub const ALL: [VulnClass; 8] = [
        VulnClass::Bn,
        VulnClass::Dg,
        VulnClass::Ef,
        VulnClass::Of,
        VulnClass::Re,
        VulnClass::Se,
        VulnClass::Tp,
        VulnClass::Uc,
    ];

    pub fn code(self) -> &'static str {
        match self {
            VulnClass::Bn => "BN",
            VulnClass::Dg => "DG",
            VulnClass::Ef => "EF",
            VulnClass::Of => "OF",
            VulnClass::Re => "RE",
            VulnClass::Se => "SE",
            VulnClass::Tp => "TP",
            VulnClass::Uc => "UC",
        }
    }
}

impl fmt::Display for VulnClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl std::str::FromStr for VulnClass {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        VulnClass::ALL
            .into_iter()
            .find(|k| k.code().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown vulnerability class `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Confidence {
    High,
    /// Claims about behavior that was never observed.
    Low,
}

/// Program point a finding is attached to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Anchor {
    Site(SiteId),
    Arith(u32),
    Send(u32),
    Op { function: usize, pc: usize },
    Function(usize),
}

#[derive(Debug, Clone)]
pub struct Finding {
    pub kind: VulnClass,
    pub function: String,
    pub site: Loc,
    /// Case whose replay shows the pattern.
    pub witness: TestCase,
    /// Second block context for timestamp and block-number findings.
    pub contrast: Option<BlockContext>,
    pub confidence: Confidence,
    pub explanation: String,
    anchor: Anchor,
}

impl Finding {
    fn sort_key(&self) -> (VulnClass, &str, (u32, u32)) {
        (self.kind, &self.function, self.site.key())
    }
}

fn frame_events(t: &ExecutionTrace) -> BTreeMap<u32, usize> {
    let mut out = BTreeMap::new();
    for e in &t.events {
        if let Event::Transfer { frame, .. } = e {
            *out.entry(*frame).or_default() += 1;
        }
    }
    out
}

/// A transfer repeated by a nested frame of the same outer call, which
/// then completed.
fn repeated_transfer(t: &ExecutionTrace) -> Option<usize> {
    let per_frame = frame_events(t);
    if per_frame.len() < 2 || t.terminal != Terminal::Stop {
        return None;
    }
    t.events.iter().find_map(|e| match e {
        Event::Transfer { frame: 0, pc, .. } => Some(*pc),
        _ => None,
    })
}

fn payouts(traces: &[ExecutionTrace]) -> Vec<usize> {
    traces
        .iter()
        .map(|t| t.events.iter().filter(|e| e.is_payment_out()).count())
        .collect()
}

fn site_outcomes(traces: &[ExecutionTrace], site: SiteId) -> Vec<Vec<bool>> {
    traces
        .iter()
        .map(|t| {
            t.comparisons
                .iter()
                .filter(|c| c.site == site)
                .map(|c| c.taken)
                .collect()
        })
        .collect()
}

/// Block offsets tried when confirming block dependence, in order.
fn contrasts(base: BlockContext, kind: VulnClass) -> Vec<BlockContext> {
    let mut out = Vec::new();
    for d in 1..=32u64 {
        for up in [true, false] {
            let shift = |w: Word| {
                if up {
                    w.overflowing_add(Word::from(d)).0
                } else {
                    w.overflowing_sub(Word::from(d)).0
                }
            };
            let mut b = base;
            if kind == VulnClass::Tp {
                b.timestamp = shift(b.timestamp);
            } else {
                b.number = shift(b.number);
            }
            out.push(b);
        }
    }
    out
}

fn with_block(case: &TestCase, block: BlockContext) -> TestCase {
    let mut c = case.clone();
    c.set_block(block);
    c
}

/// Every call made by the attacker.
fn as_attacker(case: &TestCase) -> TestCase {
    let mut c = case.clone();
    for call in &mut c.calls {
        call.caller = attacker();
    }
    c
}

/// Accumulates pattern evidence while the campaign runs.
pub struct Detector<'p> {
    program: &'p Program,
    /// Sites whose edges guard a transfer or send.
    payment_guards: BTreeSet<SiteId>,
    first: BTreeMap<(VulnClass, Anchor), TestCase>,
    /// Up to [`Detector::BLOCK_WITNESSES`] cases per block-dependent site
    /// and observed direction.
    block_candidates: BTreeMap<(VulnClass, SiteId, bool), Vec<TestCase>>,
    accepted_value: BTreeMap<usize, TestCase>,
    paid_out: bool,
}

impl<'p> Detector<'p> {
    const BLOCK_WITNESSES: usize = 4;

    pub fn new(program: &'p Program) -> Self {
        let regions = Regions::new(program);
        let payment_guards = program
            .sites
            .iter()
            .filter(|s| {
                [Dir::Then, Dir::Else].into_iter().any(|d| {
                    let k = regions.static_kinds(program, crate::vm::BranchId::new(s.id, d));
                    k.contains(&VulnKind::Transfer) || k.contains(&VulnKind::Send)
                })
            })
            .map(|s| s.id)
            .collect();
        Detector {
            program,
            payment_guards,
            first: BTreeMap::new(),
            block_candidates: BTreeMap::new(),
            accepted_value: BTreeMap::new(),
            paid_out: false,
        }
    }

    fn note(&mut self, kind: VulnClass, anchor: Anchor, case: &TestCase) {
        self.first
            .entry((kind, anchor))
            .or_insert_with(|| case.clone());
    }

    fn note_reentry(&mut self, case: &TestCase, traces: &[ExecutionTrace]) {
        for t in traces {
            if let Some(pc) = repeated_transfer(t) {
                let function = t.frames[0];
                self.note(VulnClass::Re, Anchor::Op { function, pc }, case);
            }
        }
    }

    fn anchor_loc(&self, anchor: Anchor) -> (usize, Loc) {
        let p = self.program;
        match anchor {
            Anchor::Site(s) => {
                let s = p.site(s);
                (s.function, s.loc)
            }
            Anchor::Arith(i) => {
                let a = &p.arith_sites[i as usize];
                (a.function, a.loc)
            }
            Anchor::Send(i) => {
                let a = &p.send_sites[i as usize];
                (a.function, a.loc)
            }
            Anchor::Op { function, pc } => (function, p.functions[function].source_map[pc]),
            Anchor::Function(f) => (f, p.functions[f].loc),
        }
    }

    fn finding(
        &self,
        kind: VulnClass,
        anchor: Anchor,
        witness: TestCase,
        contrast: Option<BlockContext>,
    ) -> Finding {
        let (f, loc) = self.anchor_loc(anchor);
        let function = self.program.functions[f].name.clone();
        let explanation = match kind {
            VulnClass::Re => format!("transfer in `{function}` repeated by a re-entrant call"),
            VulnClass::Se => "contract balance compared for strict equality".to_string(),
            VulnClass::Tp => "block timestamp decides whether value is paid out".to_string(),
            VulnClass::Bn => "block number decides whether value is paid out".to_string(),
            VulnClass::Dg => "delegatecall target controlled by the caller".to_string(),
            VulnClass::Uc => "result of send is never checked".to_string(),
            VulnClass::Of => "wrapped arithmetic result is stored or compared".to_string(),
            VulnClass::Ef => {
                format!("`{function}` accepts value but no execution ever paid value out")
            }
        };
        Finding {
            kind,
            function,
            site: loc,
            witness,
            contrast,
            confidence: if kind == VulnClass::Ef {
                Confidence::Low
            } else {
                Confidence::High
            },
            explanation,
            anchor,
        }
    }
}

impl Observer for Detector<'_> {
    fn observe(&mut self, case: &TestCase, traces: &[ExecutionTrace]) {
        for (call, t) in case.calls.iter().zip(traces) {
            for c in &t.comparisons {
                if c.taint.contains(Taint::BALANCE) && matches!(c.rel, Rel::Eq | Rel::Ne) {
                    self.note(VulnClass::Se, Anchor::Site(c.site), case);
                }
                if !self.payment_guards.contains(&c.site) {
                    continue;
                }
                for (taint, kind) in [
                    (Taint::TIMESTAMP, VulnClass::Tp),
                    (Taint::NUMBER, VulnClass::Bn),
                ] {
                    if c.taint.contains(taint) {
                        let list = self
                            .block_candidates
                            .entry((kind, c.site, c.taken))
                            .or_default();
                        if list.len() < Self::BLOCK_WITNESSES && !list.contains(case) {
                            list.push(case.clone());
                        }
                    }
                }
            }
            for e in &t.events {
                if e.is_payment_out() {
                    self.paid_out = true;
                }
                match *e {
                    Event::DelegateCall {
                        frame, pc, taint, ..
                    } if taint.intersects(Taint::ARG | Taint::CALLER) => {
                        let function = t.frames[frame as usize];
                        self.note(VulnClass::Dg, Anchor::Op { function, pc }, case);
                    }
                    Event::UncheckedCallResult { site, .. } => {
                        self.note(VulnClass::Uc, Anchor::Send(site), case)
                    }
                    Event::OverflowUse { site, .. } => {
                        self.note(VulnClass::Of, Anchor::Arith(site), case)
                    }
                    _ => {}
                }
            }
            if t.terminal == Terminal::Stop && !call.value.is_zero() {
                self.accepted_value
                    .entry(t.frames[0])
                    .or_insert_with(|| case.clone());
            }
        }
        self.note_reentry(case, traces);
    }
}

/// Execution settings used by the reentry harness.
fn harness_config(config: &FuzzConfig) -> ExecConfig {
    ExecConfig {
        reentry_depth: Some(config.reentry_depth.max(1)),
        ..config.exec_config()
    }
}

/// Replay `case` and, for each offset in order, the same case in another
/// block context. Returns the first context under which both the outcome
/// of `site` and the payouts change.
fn block_contrast(
    program: &Program,
    config: &FuzzConfig,
    kind: VulnClass,
    site: SiteId,
    case: &TestCase,
) -> Option<BlockContext> {
    let genesis = crate::vm::WorldState::genesis(program, config.endowment);
    let exec = config.exec_config();
    let base = run_case(program, &genesis, case, &exec);
    let (outcome, paid) = (site_outcomes(&base, site), payouts(&base));
    contrasts(case.block(), kind).into_iter().find(|b| {
        let alt = run_case(program, &genesis, &with_block(case, *b), &exec);
        site_outcomes(&alt, site) != outcome && payouts(&alt) != paid
    })
}

/// Confirm the collected evidence and return the findings, sorted by kind,
/// function and site.
pub fn detect(
    program: &Program,
    suite: &TestSuite,
    mut detector: Detector<'_>,
    config: &FuzzConfig,
) -> Vec<Finding> {
    let genesis = crate::vm::WorldState::genesis(program, config.endowment);
    let harness = harness_config(config);
    // Reentry harness: each archived case with one or all calls made by
    // the attacker.
    for seed in suite.seeds() {
        let mut variants = vec![as_attacker(&seed.case)];
        for i in 0..seed.case.calls.len() {
            let mut c = seed.case.clone();
            c.calls[i].caller = attacker();
            if !variants.contains(&c) {
                variants.push(c);
            }
        }
        for case in variants {
            let traces = run_case(program, &genesis, &case, &harness);
            if traces
                .iter()
                .flat_map(|t| &t.events)
                .any(Event::is_payment_out)
            {
                detector.paid_out = true;
            }
            detector.note_reentry(&case, &traces);
        }
    }

    let mut out: Vec<Finding> = detector
        .first
        .iter()
        .map(|(&(kind, anchor), case)| detector.finding(kind, anchor, case.clone(), None))
        .collect();
    let block_sites: BTreeSet<(VulnClass, SiteId)> = detector
        .block_candidates
        .keys()
        .map(|&(k, s, _)| (k, s))
        .collect();
    for (kind, site) in block_sites {
        // cases that took the branch first
        let mut cases = [true, false]
            .into_iter()
            .filter_map(|taken| detector.block_candidates.get(&(kind, site, taken)))
            .flatten();
        if let Some((case, b)) =
            cases.find_map(|c| block_contrast(program, config, kind, site, c).map(|b| (c, b)))
        {
            out.push(detector.finding(kind, Anchor::Site(site), case.clone(), Some(b)));
        }
    }
    if !detector.paid_out {
        for (&f, case) in &detector.accepted_value {
            out.push(detector.finding(VulnClass::Ef, Anchor::Function(f), case.clone(), None));
        }
    }
    out.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
    out
}

/// Re-execute the witness of `finding` and check that the defining events
/// occur again.
pub fn replay(program: &Program, finding: &Finding, config: &FuzzConfig) -> bool {
    let genesis = crate::vm::WorldState::genesis(program, config.endowment);
    let exec = if finding.kind == VulnClass::Re {
        harness_config(config)
    } else {
        config.exec_config()
    };
    let traces = run_case(program, &genesis, &finding.witness, &exec);
    let events = || traces.iter().flat_map(|t| t.events.iter());
    match (finding.kind, finding.anchor) {
        (VulnClass::Re, Anchor::Op { function, pc }) => traces
            .iter()
            .any(|t| t.frames[0] == function && repeated_transfer(t) == Some(pc)),
        (VulnClass::Se, Anchor::Site(site)) => {
            traces.iter().flat_map(|t| &t.comparisons).any(|c| {
                c.site == site
                    && c.taint.contains(Taint::BALANCE)
                    && matches!(c.rel, Rel::Eq | Rel::Ne)
            })
        }
        (VulnClass::Tp | VulnClass::Bn, Anchor::Site(site)) => {
            let Some(b) = finding.contrast else {
                return false;
            };
            let alt = run_case(program, &genesis, &with_block(&finding.witness, b), &exec);
            site_outcomes(&alt, site) != site_outcomes(&traces, site)
                && payouts(&alt) != payouts(&traces)
        }
        (VulnClass::Dg, Anchor::Op { pc, .. }) => events().any(|e| {
            matches!(e, Event::DelegateCall { pc: p, taint, .. }
                if *p == pc && taint.intersects(Taint::ARG | Taint::CALLER))
        }),
        (VulnClass::Uc, Anchor::Send(site)) => {
            events().any(|e| matches!(e, Event::UncheckedCallResult { site: s, .. } if *s == site))
        }
        (VulnClass::Of, Anchor::Arith(site)) => {
            events().any(|e| matches!(e, Event::OverflowUse { site: s, .. } if *s == site))
        }
        (VulnClass::Ef, Anchor::Function(f)) => {
            !events().any(Event::is_payment_out)
                && finding.witness.calls.iter().zip(&traces).any(|(c, t)| {
                    t.frames[0] == f && t.terminal == Terminal::Stop && !c.value.is_zero()
                })
        }
        _ => false,
    }
}
