//! Execution traces and their line-oriented log format.
//!
//! A serialized trace is a sequence of tab-separated records:
//!
//! ```text
//! call     <function> <terminal> <steps>
//! frame    <frame> <function>
//! step     <frame> <site> <then|else>
//! branch   <prefix-len> <site> <then|else> <rarity>
//! cmp      <frame> <site> <rel> <x> <k> <taken:0|1> <taint>
//! event    <frame> <kind> [fields...]
//! ```
//!
//! Records appear grouped in the order above; within a group they follow
//! execution order. Site ids are indices into the program's branch table and
//! are stable across runs of the same program. Words are decimal.

use std::fmt::{self, Write};

use serde::{Deserialize, Serialize};

use crate::lang::{Rel, SiteId};
use crate::Word;

/// Provenance bits carried by runtime values.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
pub struct Taint(pub u16);

impl Taint {
    pub const TIMESTAMP: Taint = Taint(1);
    pub const NUMBER: Taint = Taint(1 << 1);
    pub const BALANCE: Taint = Taint(1 << 2);
    pub const ARG: Taint = Taint(1 << 3);
    pub const CALLER: Taint = Taint(1 << 4);
    pub const VALUE: Taint = Taint(1 << 5);
    pub const OVERFLOW: Taint = Taint(1 << 6);

    pub fn contains(self, other: Taint) -> bool {
        self.0 & other.0 == other.0
    }

    pub fn intersects(self, other: Taint) -> bool {
        self.0 & other.0 != 0
    }
}

impl std::ops::BitOr for Taint {
    type Output = Taint;
    fn bitor(self, rhs: Taint) -> Taint {
        Taint(self.0 | rhs.0)
    }
}

impl std::ops::BitOrAssign for Taint {
    fn bitor_assign(&mut self, rhs: Taint) {
        self.0 |= rhs.0;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dir {
    Then,
    Else,
}

impl Dir {
    pub fn flip(self) -> Dir {
        match self {
            Dir::Then => Dir::Else,
            Dir::Else => Dir::Then,
        }
    }

    pub fn from_taken(taken: bool) -> Dir {
        if taken {
            Dir::Then
        } else {
            Dir::Else
        }
    }
}

impl fmt::Display for Dir {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Dir::Then => "then",
            Dir::Else => "else",
        })
    }
}

/// One direction of one conditional site: the unit of branch coverage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BranchId {
    pub site: SiteId,
    pub dir: Dir,
}

impl BranchId {
    pub fn new(site: SiteId, dir: Dir) -> Self {
        BranchId { site, dir }
    }

    pub fn sibling(self) -> BranchId {
        BranchId::new(self.site, self.dir.flip())
    }
}

impl fmt::Display for BranchId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.site, self.dir)
    }
}

/// One executed conditional edge. `frame` numbers the invocation (0 is the
/// outer call, re-entrant invocations count up from 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Step {
    pub frame: u32,
    pub branch: BranchId,
}

/// A prefix of the execution path ending at a conditional edge. The path
/// itself lives in [`ExecutionTrace::path`]; `prefix_len` selects it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Branch {
    pub prefix_len: usize,
    pub id: BranchId,
    pub rarity: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ComparisonRecord {
    pub frame: u32,
    pub site: SiteId,
    pub rel: Rel,
    pub x: Word,
    pub k: Word,
    pub taken: bool,
    /// Union of the provenance of both operands.
    pub taint: Taint,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Event {
    Transfer {
        frame: u32,
        pc: usize,
        to: Word,
        amount: Word,
    },
    Send {
        frame: u32,
        pc: usize,
        site: u32,
        to: Word,
        amount: Word,
        ok: bool,
    },
    DelegateCall {
        frame: u32,
        pc: usize,
        target: Word,
        taint: Taint,
    },
    BalanceRead {
        frame: u32,
        pc: usize,
    },
    TimestampRead {
        frame: u32,
        pc: usize,
    },
    NumberRead {
        frame: u32,
        pc: usize,
    },
    Revert {
        frame: u32,
        pc: usize,
    },
    OverflowWrap {
        frame: u32,
        pc: usize,
        site: u32,
    },
    /// A wrapped value reached a storage write or a comparison.
    OverflowUse {
        frame: u32,
        pc: usize,
        site: u32,
    },
    UncheckedCallResult {
        frame: u32,
        site: u32,
    },
}

impl Event {
    pub fn frame(&self) -> u32 {
        match *self {
            Event::Transfer { frame, .. }
            | Event::Send { frame, .. }
            | Event::DelegateCall { frame, .. }
            | Event::BalanceRead { frame, .. }
            | Event::TimestampRead { frame, .. }
            | Event::NumberRead { frame, .. }
            | Event::Revert { frame, .. }
            | Event::OverflowWrap { frame, .. }
            | Event::OverflowUse { frame, .. }
            | Event::UncheckedCallResult { frame, .. } => frame,
        }
    }

    pub fn pc(&self) -> Option<usize> {
        match *self {
            Event::Transfer { pc, .. }
            | Event::Send { pc, .. }
            | Event::DelegateCall { pc, .. }
            | Event::BalanceRead { pc, .. }
            | Event::TimestampRead { pc, .. }
            | Event::NumberRead { pc, .. }
            | Event::Revert { pc, .. }
            | Event::OverflowWrap { pc, .. }
            | Event::OverflowUse { pc, .. } => Some(pc),
            Event::UncheckedCallResult { .. } => None,
        }
    }

    pub fn is_payment_out(&self) -> bool {
        matches!(self, Event::Transfer { .. } | Event::Send { ok: true, .. })
    }

    fn record(&self) -> String {
        match self {
            Event::Transfer { pc, to, amount, .. } => format!("transfer\t{pc}\t{to}\t{amount}"),
            Event::Send {
                pc,
                site,
                to,
                amount,
                ok,
                ..
            } => {
                format!("send\t{pc}\t{site}\t{to}\t{amount}\t{}", *ok as u8)
            }
            Event::DelegateCall {
                pc, target, taint, ..
            } => {
                format!("delegatecall\t{pc}\t{target}\t{}", taint.0)
            }
            Event::BalanceRead { pc, .. } => format!("balance\t{pc}"),
            Event::TimestampRead { pc, .. } => format!("timestamp\t{pc}"),
            Event::NumberRead { pc, .. } => format!("number\t{pc}"),
            Event::Revert { pc, .. } => format!("revert\t{pc}"),
            Event::OverflowWrap { pc, site, .. } => format!("overflow\t{pc}\t{site}"),
            Event::OverflowUse { pc, site, .. } => format!("overflow-use\t{pc}\t{site}"),
            Event::UncheckedCallResult { site, .. } => format!("unchecked-call\t{site}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Terminal {
    Stop,
    Revert,
    StepLimit,
}

impl fmt::Display for Terminal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Terminal::Stop => "stop",
            Terminal::Revert => "revert",
            Terminal::StepLimit => "step-limit",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecutionTrace {
    pub function: String,
    /// Function index executed by each frame.
    pub frames: Vec<usize>,
    /// Full sequence of conditional edges taken, across all frames.
    pub path: Vec<Step>,
    /// First occurrence of every distinct edge, in path order.
    pub covered: Vec<Branch>,
    pub comparisons: Vec<ComparisonRecord>,
    pub events: Vec<Event>,
    pub terminal: Terminal,
    pub steps: usize,
}

impl ExecutionTrace {
    pub fn branch_path(&self, branch: &Branch) -> &[Step] {
        &self.path[..branch.prefix_len]
    }

    pub fn covers(&self, id: BranchId) -> bool {
        self.covered.iter().any(|b| b.id == id)
    }

    pub fn transfer_count(&self) -> usize {
        self.events
            .iter()
            .filter(|e| matches!(e, Event::Transfer { .. }))
            .count()
    }

    pub fn serialize(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "call\t{}\t{}\t{}",
            self.function, self.terminal, self.steps
        );
        for (i, f) in self.frames.iter().enumerate() {
            let _ = writeln!(out, "frame\t{i}\t{f}");
        }
        for s in &self.path {
            let _ = writeln!(
                out,
                "step\t{}\t{}\t{}",
                s.frame, s.branch.site.0, s.branch.dir
            );
        }
        for b in &self.covered {
            let _ = writeln!(
                out,
                "branch\t{}\t{}\t{}\t{}",
                b.prefix_len, b.id.site.0, b.id.dir, b.rarity
            );
        }
        for c in &self.comparisons {
            let _ = writeln!(
                out,
                "cmp\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                c.frame,
                c.site.0,
                c.rel.symbol(),
                c.x,
                c.k,
                c.taken as u8,
                c.taint.0
            );
        }
        for e in &self.events {
            let _ = writeln!(out, "event\t{}\t{}", e.frame(), e.record());
        }
        out
    }
}
