//! Read/write dataflow over contract globals.
//!
//! Accesses are recorded per occurrence in evaluation order: operands of an
//! assignment's right-hand side are read before its target is written.
//! Global initializers are not function accesses and are never recorded.
//! Unreachable code is still walked.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::lang::ast::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum AccessOp {
    Write = 0,
    Read = 1,
}

impl AccessOp {
    /// 1 for a read, 0 for a write.
    pub fn bit(self) -> u64 {
        self as u64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GlobalAccess {
    pub var: String,
    pub op: AccessOp,
    pub site: Loc,
}

impl GlobalAccess {
    pub fn read(var: &str) -> Self {
        GlobalAccess {
            var: var.to_string(),
            op: AccessOp::Read,
            site: Loc::default(),
        }
    }

    pub fn write(var: &str) -> Self {
        GlobalAccess {
            var: var.to_string(),
            op: AccessOp::Write,
            site: Loc::default(),
        }
    }
}

pub type AccessTable = BTreeMap<String, Vec<GlobalAccess>>;

pub fn analyze_accesses(contract: &Contract) -> AccessTable {
    contract
        .functions
        .iter()
        .map(|f| {
            let mut w = Walker {
                contract,
                out: Vec::new(),
            };
            w.block(&f.body);
            (f.name.clone(), w.out)
        })
        .collect()
}

struct Walker<'a> {
    contract: &'a Contract,
    out: Vec<GlobalAccess>,
}

impl Walker<'_> {
    fn push(&mut self, name: &str, op: AccessOp, site: Loc) {
        if self.contract.global(name).is_some() {
            self.out.push(GlobalAccess {
                var: name.to_string(),
                op,
                site,
            });
        }
    }

    fn block(&mut self, block: &Block) {
        for s in block {
            self.stmt(s);
        }
    }

    fn stmt(&mut self, s: &Stmt) {
        match &s.kind {
            StmtKind::Local { init, .. } => self.expr(init),
            StmtKind::Assign { target, value } => {
                self.expr(value);
                if let LValue::Index(_, idx) = target {
                    self.expr(idx);
                }
                self.push(target.name(), AccessOp::Write, s.loc);
            }
            StmtKind::If {
                cond,
                then_block,
                else_block,
            } => {
                self.expr(cond);
                self.block(then_block);
                if let Some(b) = else_block {
                    self.block(b);
                }
            }
            StmtKind::While { cond, body } => {
                self.expr(cond);
                self.block(body);
            }
            StmtKind::For {
                init,
                cond,
                step,
                body,
            } => {
                self.stmt(init);
                self.expr(cond);
                self.stmt(step);
                self.block(body);
            }
            StmtKind::Require(e) | StmtKind::Delegatecall(e) | StmtKind::Expr(e) => self.expr(e),
            StmtKind::Transfer { to, amount } => {
                self.expr(to);
                self.expr(amount);
            }
            StmtKind::Revert => {}
        }
    }

    fn expr(&mut self, e: &Expr) {
        e.walk(&mut |sub| match &sub.kind {
            ExprKind::Var(n) | ExprKind::Index(n, _) => self.push(n, AccessOp::Read, sub.loc),
            _ => {}
        });
    }
}
