//! Instruction set and compiled program layout.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::lang::ast::{Loc, Type};
use crate::Word;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SiteId(pub u32);

impl fmt::Display for SiteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "s{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Rel {
    #[serde(rename = "==")]
    Eq,
    #[serde(rename = "!=")]
    Ne,
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = ">=")]
    Ge,
}

impl Rel {
    pub const ALL: [Rel; 6] = [Rel::Eq, Rel::Ne, Rel::Lt, Rel::Le, Rel::Gt, Rel::Ge];

    pub fn holds(self, x: Word, k: Word) -> bool {
        match self {
            Rel::Eq => x == k,
            Rel::Ne => x != k,
            Rel::Lt => x < k,
            Rel::Le => x <= k,
            Rel::Gt => x > k,
            Rel::Ge => x >= k,
        }
    }

    pub fn negate(self) -> Rel {
        match self {
            Rel::Eq => Rel::Ne,
            Rel::Ne => Rel::Eq,
            Rel::Lt => Rel::Ge,
            Rel::Le => Rel::Gt,
            Rel::Gt => Rel::Le,
            Rel::Ge => Rel::Lt,
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Rel::Eq => "==",
            Rel::Ne => "!=",
            Rel::Lt => "<",
            Rel::Le => "<=",
            Rel::Gt => ">",
            Rel::Ge => ">=",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ArithOp {
    Add,
    Sub,
    Mul,
    Div,
    Mod,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Op {
    Push(Word),
    Pop,
    LoadGlobal(u16),
    StoreGlobal(u16),
    /// Pops the key.
    LoadMap(u16),
    /// Pops the value, then the key.
    StoreMap(u16),
    LoadLocal(u16),
    StoreLocal(u16),
    /// Wrapping arithmetic; `site` indexes [`Program::arith_sites`].
    Arith {
        op: ArithOp,
        site: u32,
    },
    /// Value comparison producing 0 or 1.
    Cmp(Rel),
    Not,
    And,
    Or,
    CallValue,
    Caller,
    Timestamp,
    Number,
    SelfBalance,
    /// Value transfer out of the contract; pops amount, then recipient.
    Transfer,
    /// Like [`Op::Transfer`] but pushes a success flag instead of reverting.
    Send {
        site: u32,
    },
    /// Pops the target address.
    DelegateCall,
    /// Conditional site. Pops `k` then `x`; falls through when `x rel k`
    /// holds, otherwise jumps to `else_target`.
    Branch {
        site: SiteId,
        rel: Rel,
        else_target: usize,
    },
    Jump(usize),
    Revert,
    Stop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SiteKind {
    If,
    While,
    For,
    Require,
}

/// Static description of one conditional site.
#[derive(Debug, Clone, Serialize)]
pub struct SiteInfo {
    pub id: SiteId,
    pub function: usize,
    pub loc: Loc,
    pub kind: SiteKind,
    /// Number of enclosing conditional/recurrent statements, itself included.
    /// The later conjunct of `a && b` sits one level below the former.
    pub depth: u32,
    pub pc: usize,
    /// Instruction ranges `[start, end)` nested under this site.
    pub scope: Vec<(usize, usize)>,
}

impl SiteInfo {
    pub fn scope_contains(&self, pc: usize) -> bool {
        self.scope.iter().any(|&(s, e)| s <= pc && pc < e)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ArithSite {
    pub function: usize,
    pub pc: usize,
    pub loc: Loc,
}

#[derive(Debug, Clone, Serialize)]
pub struct SendSite {
    pub function: usize,
    pub pc: usize,
    pub loc: Loc,
}

#[derive(Debug, Clone)]
pub struct GlobalSlot {
    pub name: String,
    pub ty: Type,
    pub init: Word,
}

#[derive(Debug, Clone)]
pub struct CompiledFunction {
    pub name: String,
    pub params: Vec<Type>,
    pub payable: bool,
    pub n_locals: usize,
    pub code: Vec<Op>,
    pub source_map: Vec<Loc>,
    pub loc: Loc,
}

impl CompiledFunction {
    /// Successor instructions of `pc`.
    pub fn successors(&self, pc: usize) -> Vec<usize> {
        match &self.code[pc] {
            Op::Jump(t) => vec![*t],
            Op::Branch { else_target, .. } => vec![pc + 1, *else_target],
            Op::Revert | Op::Stop => vec![],
            _ => vec![pc + 1],
        }
    }

    /// Instructions reachable from `start`, optionally never traversing the
    /// edge `skip`.
    pub fn reachable(&self, start: usize, skip: Option<(usize, usize)>) -> BTreeSet<usize> {
        let mut seen = BTreeSet::new();
        let mut stack = vec![start];
        while let Some(pc) = stack.pop() {
            if pc >= self.code.len() || !seen.insert(pc) {
                continue;
            }
            for s in self.successors(pc) {
                if skip != Some((pc, s)) {
                    stack.push(s);
                }
            }
        }
        seen
    }
}

#[derive(Debug, Clone)]
pub struct Program {
    pub name: String,
    pub globals: Vec<GlobalSlot>,
    pub functions: Vec<CompiledFunction>,
    pub sites: Vec<SiteInfo>,
    pub arith_sites: Vec<ArithSite>,
    pub send_sites: Vec<SendSite>,
}

impl Program {
    pub fn function_index(&self, name: &str) -> Option<usize> {
        self.functions.iter().position(|f| f.name == name)
    }

    pub fn site(&self, id: SiteId) -> &SiteInfo {
        &self.sites[id.0 as usize]
    }

    pub fn sites_of(&self, function: usize) -> impl Iterator<Item = &SiteInfo> {
        self.sites.iter().filter(move |s| s.function == function)
    }

    /// Numeric literals appearing as instruction operands.
    pub fn constants(&self) -> BTreeSet<Word> {
        self.functions
            .iter()
            .flat_map(|f| f.code.iter())
            .filter_map(|op| match op {
                Op::Push(v) => Some(*v),
                _ => None,
            })
            .chain(self.globals.iter().map(|g| g.init))
            .collect()
    }
}
