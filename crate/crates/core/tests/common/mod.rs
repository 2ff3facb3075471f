//! Shared helpers for integration tests: corpus loading, campaign runners
//! and an AST-level oracle for branch rarity and guarded statements.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use minifuzz::fuzz::{evolve_with, FuzzConfig, Observer, TestCase, TestSuite};
use minifuzz::lang::ast::{BinOp, Block, Contract, Expr, ExprKind, LValue, Stmt, StmtKind};
use minifuzz::lang::{compile, parse, Program};
use minifuzz::oracle::{detect, Detector, Finding};
use minifuzz::vm::{BranchId, Dir, Event, ExecutionTrace};

pub fn corpus_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("corpus")
}

pub fn corpus_files() -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(corpus_dir())
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "msol"))
        .collect();
    v.sort();
    v
}

pub fn load(name: &str) -> (Contract, Program) {
    let src = std::fs::read_to_string(corpus_dir().join(format!("{name}.msol"))).unwrap();
    load_src(&src)
}

pub fn load_src(src: &str) -> (Contract, Program) {
    let c = parse(src).unwrap();
    let p = compile(&c).unwrap();
    (c, p)
}

pub fn config(seed: u64, budget: u64) -> FuzzConfig {
    FuzzConfig {
        seed,
        budget,
        ..Default::default()
    }
}

/// Fuzz and analyze; returns the suite and the findings.
pub fn campaign(c: &Contract, p: &Program, cfg: &FuzzConfig) -> (TestSuite, Vec<Finding>) {
    let mut d = Detector::new(p);
    let suite = evolve_with(p, c, cfg, &mut d);
    let f = detect(p, &suite, d, cfg);
    (suite, f)
}

/// Execution count at which `target` was first covered.
pub struct FirstCover {
    pub target: BranchId,
    pub n: u64,
    pub at: Option<u64>,
}

impl FirstCover {
    pub fn new(target: BranchId) -> Self {
        FirstCover {
            target,
            n: 0,
            at: None,
        }
    }
}

impl Observer for FirstCover {
    fn observe(&mut self, _: &TestCase, traces: &[ExecutionTrace]) {
        self.n += 1;
        if self.at.is_none() && traces.iter().any(|t| t.covers(self.target)) {
            self.at = Some(self.n);
        }
    }
}

/// Keeps every trace of a campaign.
#[derive(Default)]
pub struct AllTraces(pub Vec<ExecutionTrace>);

impl Observer for AllTraces {
    fn observe(&mut self, _: &TestCase, traces: &[ExecutionTrace]) {
        self.0.extend_from_slice(traces);
    }
}

type Key = (u32, u32);

/// Condition tree after pushing negations to the leaves.
enum Tree<'a> {
    Leaf(&'a Expr, Vec<&'a Expr>),
    All(Box<Tree<'a>>, Box<Tree<'a>>),
    Any(Box<Tree<'a>>, Box<Tree<'a>>),
}

fn tree(e: &Expr, neg: bool) -> Tree<'_> {
    match &e.kind {
        ExprKind::Not(inner) => tree(inner, !neg),
        ExprKind::Binary(op @ (BinOp::And | BinOp::Or), a, b) => {
            let (l, r) = (Box::new(tree(a, neg)), Box::new(tree(b, neg)));
            if (*op == BinOp::And) != neg {
                Tree::All(l, r)
            } else {
                Tree::Any(l, r)
            }
        }
        ExprKind::Binary(op, a, b) if op.is_comparison() => Tree::Leaf(e, vec![a, b]),
        _ => Tree::Leaf(e, vec![e]),
    }
}

struct Node<'a> {
    exprs: Vec<&'a Expr>,
    /// Transfer or delegatecall statement.
    effect: bool,
    leaf: Option<Key>,
    /// Successor, or the then-successor of a leaf.
    next: Option<usize>,
    otherwise: Option<usize>,
}

/// Statement-level control flow graph of one function.
struct Cfg<'a> {
    nodes: Vec<Node<'a>>,
    entry: usize,
}

const EXIT: usize = 0;
const REVERT: usize = 1;

impl<'a> Cfg<'a> {
    fn new(body: &'a Block) -> Self {
        let blank = || Node {
            exprs: vec![],
            effect: false,
            leaf: None,
            next: None,
            otherwise: None,
        };
        let mut g = Cfg {
            nodes: vec![blank(), blank()],
            entry: EXIT,
        };
        g.entry = g.block(body, EXIT);
        g
    }

    fn add(&mut self, exprs: Vec<&'a Expr>, effect: bool, next: usize) -> usize {
        self.nodes.push(Node {
            exprs,
            effect,
            leaf: None,
            next: Some(next),
            otherwise: None,
        });
        self.nodes.len() - 1
    }

    fn block(&mut self, b: &'a Block, next: usize) -> usize {
        b.iter().rev().fold(next, |n, s| self.stmt(s, n))
    }

    fn cond(&mut self, t: &Tree<'a>, yes: usize, no: usize) -> usize {
        match t {
            Tree::Leaf(e, operands) => {
                self.nodes.push(Node {
                    exprs: operands.clone(),
                    effect: false,
                    leaf: Some(e.loc.key()),
                    next: Some(yes),
                    otherwise: Some(no),
                });
                self.nodes.len() - 1
            }
            Tree::All(l, r) => {
                let r = self.cond(r, yes, no);
                self.cond(l, r, no)
            }
            Tree::Any(l, r) => {
                let r = self.cond(r, yes, no);
                self.cond(l, yes, r)
            }
        }
    }

    fn looping(
        &mut self,
        cond: &'a Expr,
        body: impl FnOnce(&mut Self, usize) -> usize,
        next: usize,
    ) -> usize {
        let head = self.add(vec![], false, EXIT);
        let body_entry = body(self, head);
        let c = self.cond(&tree(cond, false), body_entry, next);
        self.nodes[head].next = Some(c);
        head
    }

    fn stmt(&mut self, s: &'a Stmt, next: usize) -> usize {
        match &s.kind {
            StmtKind::Local { init, .. } => self.add(vec![init], false, next),
            StmtKind::Assign { target, value } => {
                let mut exprs = vec![value];
                if let LValue::Index(_, i) = target {
                    exprs.push(i);
                }
                self.add(exprs, false, next)
            }
            StmtKind::Transfer { to, amount } => self.add(vec![to, amount], true, next),
            StmtKind::Delegatecall(e) => self.add(vec![e], true, next),
            StmtKind::Expr(e) => self.add(vec![e], false, next),
            StmtKind::Revert => REVERT,
            StmtKind::Require(c) => self.cond(&tree(c, false), next, REVERT),
            StmtKind::If {
                cond,
                then_block,
                else_block,
            } => {
                let t = self.block(then_block, next);
                let e = match else_block {
                    Some(b) => self.block(b, next),
                    None => next,
                };
                self.cond(&tree(cond, false), t, e)
            }
            StmtKind::While { cond, body } => {
                self.looping(cond, |g, head| g.block(body, head), next)
            }
            StmtKind::For {
                init,
                cond,
                step,
                body,
            } => {
                let head = self.looping(
                    cond,
                    |g, head| {
                        let step = g.stmt(step, head);
                        g.block(body, step)
                    },
                    next,
                );
                self.stmt(init, head)
            }
        }
    }

    fn reach(&self, from: usize, skip: Option<(usize, bool)>) -> BTreeSet<usize> {
        let mut seen = BTreeSet::new();
        let mut stack = vec![from];
        while let Some(n) = stack.pop() {
            if !seen.insert(n) {
                continue;
            }
            let node = &self.nodes[n];
            if let Some(t) = node.next {
                if skip != Some((n, true)) {
                    stack.push(t);
                }
            }
            if let Some(e) = node.otherwise {
                if skip != Some((n, false)) {
                    stack.push(e);
                }
            }
        }
        seen
    }

    /// Nodes reachable through the edge and through no other path.
    fn guarded(&self, leaf: usize, then: bool) -> BTreeSet<usize> {
        let node = &self.nodes[leaf];
        let target = if then { node.next } else { node.otherwise }.unwrap();
        let via = self.reach(target, None);
        let without = self.reach(self.entry, Some((leaf, then)));
        via.difference(&without).copied().collect()
    }
}

fn vulnerable_expr(e: &Expr) -> bool {
    let mut hit = false;
    e.walk(&mut |x| {
        hit |= matches!(
            x.kind,
            ExprKind::Send(..)
                | ExprKind::SelfBalance
                | ExprKind::BlockTimestamp
                | ExprKind::BlockNumber
        )
    });
    hit
}

fn expr_keys(e: &Expr, out: &mut BTreeSet<Key>) {
    e.walk(&mut |x| {
        out.insert(x.loc.key());
    });
}

/// Per-branch facts derived from the syntax tree alone.
pub struct AstOracle {
    /// Nesting depth of every conditional site, by source position.
    pub depth: BTreeMap<(usize, Key), u32>,
    /// Guarded region of every edge holds a vulnerable statement.
    pub static_vulnerable: BTreeMap<(usize, Key, bool), bool>,
    /// Source positions of the expressions inside each guarded region.
    pub guarded_locs: BTreeMap<(usize, Key, bool), BTreeSet<Key>>,
}

fn depths(t: &Tree, base: u32, out: &mut Vec<(Key, u32)>) -> u32 {
    match t {
        Tree::Leaf(e, _) => {
            out.push((e.loc.key(), base + 1));
            base + 1
        }
        Tree::All(l, r) => {
            let d = depths(l, base, out);
            depths(r, d, out)
        }
        Tree::Any(l, r) => depths(l, base, out).max(depths(r, base, out)),
    }
}

fn block_depths(b: &[Stmt], d: u32, out: &mut Vec<(Key, u32)>) {
    for s in b {
        match &s.kind {
            StmtKind::If {
                cond,
                then_block,
                else_block,
            } => {
                depths(&tree(cond, false), d, out);
                block_depths(then_block, d + 1, out);
                if let Some(e) = else_block {
                    block_depths(e, d + 1, out);
                }
            }
            StmtKind::While { cond, body } => {
                depths(&tree(cond, false), d, out);
                block_depths(body, d + 1, out);
            }
            StmtKind::For {
                init, cond, body, ..
            } => {
                block_depths(std::slice::from_ref(&**init), d, out);
                depths(&tree(cond, false), d, out);
                block_depths(body, d + 1, out);
            }
            StmtKind::Require(c) => {
                depths(&tree(c, false), d, out);
            }
            _ => {}
        }
    }
}

impl AstOracle {
    pub fn new(contract: &Contract) -> Self {
        let mut o = AstOracle {
            depth: BTreeMap::new(),
            static_vulnerable: BTreeMap::new(),
            guarded_locs: BTreeMap::new(),
        };
        for (fi, f) in contract.functions.iter().enumerate() {
            let mut ds = Vec::new();
            block_depths(&f.body, 0, &mut ds);
            for (k, d) in ds {
                o.depth.insert((fi, k), d);
            }
            let g = Cfg::new(&f.body);
            for (n, node) in g.nodes.iter().enumerate() {
                let Some(k) = node.leaf else { continue };
                for then in [true, false] {
                    let region = g.guarded(n, then);
                    let mut locs = BTreeSet::new();
                    let mut vuln = false;
                    for &m in &region {
                        let r = &g.nodes[m];
                        vuln |= r.effect || r.exprs.iter().any(|e| vulnerable_expr(e));
                        for e in &r.exprs {
                            expr_keys(e, &mut locs);
                        }
                    }
                    o.static_vulnerable.insert((fi, k, then), vuln);
                    o.guarded_locs.insert((fi, k, then), locs);
                }
            }
        }
        o
    }

    fn key(p: &Program, b: BranchId) -> (usize, Key, bool) {
        let s = p.site(b.site);
        (s.function, s.loc.key(), b.dir == Dir::Then)
    }

    /// Expected `(rarity, rare, vulnerable)` per branch appearing in
    /// `traces`.
    pub fn expected(&self, p: &Program, traces: &[ExecutionTrace]) -> ExpectedSearch {
        let mut out = ExpectedSearch::default();
        for t in traces {
            for b in &t.covered {
                let s = p.site(b.id.site);
                let d = self.depth[&(s.function, s.loc.key())];
                out.rarity.insert(b.id, d);
                if d >= 2 {
                    out.rare.insert(b.id);
                }
            }
            for step in &t.path {
                let id = step.branch;
                let key = Self::key(p, id);
                if self.static_vulnerable[&key] {
                    out.vulnerable.insert(id);
                    continue;
                }
                let locs = &self.guarded_locs[&key];
                let function = p.site(id.site).function;
                let wrapped = t.events.iter().any(|e| {
                    matches!(e, Event::OverflowWrap { .. })
                        && e.frame() == step.frame
                        && t.frames[e.frame() as usize] == function
                        && e.pc().is_some_and(|pc| {
                            locs.contains(&p.functions[function].source_map[pc].key())
                        })
                });
                if wrapped {
                    out.vulnerable.insert(id);
                }
            }
        }
        out
    }
}

#[derive(Debug, Default, PartialEq, Eq)]
pub struct ExpectedSearch {
    pub rarity: BTreeMap<BranchId, u32>,
    pub rare: BTreeSet<BranchId>,
    pub vulnerable: BTreeSet<BranchId>,
}
