//! Lowering from the syntax tree to instrumented stack bytecode.
//!
//! Conditions of `if`, `while`, `for` and `require` are normalized into
//! and/or trees of single comparisons (negation is pushed into the
//! relations), and every comparison becomes one [`Op::Branch`] site. Within
//! `a && b` the sites of `b` are nested one level below those of `a`; the
//! operands of `a || b` are siblings.

use std::collections::BTreeMap;

use crate::lang::ast::*;
use crate::lang::bytecode::*;
use crate::lang::LangError;
use crate::Word;

/// Upper bound on declared parameters per function.
pub const MAX_PARAMS: usize = 8;

pub fn compile(contract: &Contract) -> Result<Program, LangError> {
    let globals: Vec<GlobalSlot> = contract
        .globals
        .iter()
        .map(|g| GlobalSlot {
            name: g.name.clone(),
            ty: g.ty,
            init: match g.init.as_ref().map(|e| &e.kind) {
                Some(ExprKind::Int(v)) => *v,
                Some(ExprKind::Bool(b)) => Word::from(*b as u8),
                _ => Word::zero(),
            },
        })
        .collect();
    let mut program = Program {
        name: contract.name.clone(),
        globals,
        functions: Vec::new(),
        sites: Vec::new(),
        arith_sites: Vec::new(),
        send_sites: Vec::new(),
    };
    for (index, f) in contract.functions.iter().enumerate() {
        if f.params.len() > MAX_PARAMS {
            return Err(LangError::unsupported(
                f.loc,
                &format!("`{}` declares more than {MAX_PARAMS} parameters", f.name),
            ));
        }
        let mut fc = FnCompiler {
            contract,
            program: &mut program,
            index,
            code: Vec::new(),
            source_map: Vec::new(),
            locals: BTreeMap::new(),
        };
        for p in &f.params {
            let slot = fc.locals.len() as u16;
            fc.locals.insert(p.name.clone(), slot);
        }
        fc.block(&f.body, 0)?;
        fc.emit(Op::Stop, f.loc);
        let compiled = CompiledFunction {
            name: f.name.clone(),
            params: f.params.iter().map(|p| p.ty).collect(),
            payable: f.payable,
            n_locals: fc.locals.len(),
            code: fc.code,
            source_map: fc.source_map,
            loc: f.loc,
        };
        program.functions.push(compiled);
    }
    Ok(program)
}

/// Condition in negation normal form.
enum Cond<'a> {
    Atom {
        rel: Rel,
        lhs: Operand<'a>,
        rhs: Operand<'a>,
        loc: Loc,
    },
    And(Box<Cond<'a>>, Box<Cond<'a>>),
    Or(Box<Cond<'a>>, Box<Cond<'a>>),
}

enum Operand<'a> {
    Expr(&'a Expr),
    Zero,
}

fn rel_of(op: BinOp) -> Rel {
    match op {
        BinOp::Eq => Rel::Eq,
        BinOp::Ne => Rel::Ne,
        BinOp::Lt => Rel::Lt,
        BinOp::Le => Rel::Le,
        BinOp::Gt => Rel::Gt,
        BinOp::Ge => Rel::Ge,
        _ => unreachable!("not a comparison"),
    }
}

fn normalize(e: &Expr, negated: bool) -> Cond<'_> {
    match &e.kind {
        ExprKind::Not(inner) => normalize(inner, !negated),
        ExprKind::Binary(op @ (BinOp::And | BinOp::Or), a, b) => {
            let (l, r) = (
                Box::new(normalize(a, negated)),
                Box::new(normalize(b, negated)),
            );
            match (op, negated) {
                (BinOp::And, false) | (BinOp::Or, true) => Cond::And(l, r),
                _ => Cond::Or(l, r),
            }
        }
        ExprKind::Binary(op, a, b) if op.is_comparison() => {
            let rel = rel_of(*op);
            Cond::Atom {
                rel: if negated { rel.negate() } else { rel },
                lhs: Operand::Expr(a),
                rhs: Operand::Expr(b),
                loc: e.loc,
            }
        }
        _ => Cond::Atom {
            rel: if negated { Rel::Eq } else { Rel::Ne },
            lhs: Operand::Expr(e),
            rhs: Operand::Zero,
            loc: e.loc,
        },
    }
}

/// Result of lowering one condition tree.
struct Lowered {
    /// Every site created, in emission order.
    sites: Vec<SiteId>,
    /// Sites whose scope extends over the guarded body.
    heads: Vec<SiteId>,
    /// Pending jumps to patch: (instruction, true-target?)
    jumps: Vec<(usize, bool)>,
    max_depth: u32,
}

struct FnCompiler<'a> {
    contract: &'a Contract,
    program: &'a mut Program,
    index: usize,
    code: Vec<Op>,
    source_map: Vec<Loc>,
    locals: BTreeMap<String, u16>,
}

const PLACEHOLDER: usize = usize::MAX;

impl FnCompiler<'_> {
    fn emit(&mut self, op: Op, loc: Loc) -> usize {
        self.code.push(op);
        self.source_map.push(loc);
        self.code.len() - 1
    }

    fn pc(&self) -> usize {
        self.code.len()
    }

    fn patch(&mut self, at: usize, target: usize) {
        match &mut self.code[at] {
            Op::Jump(t) => *t = target,
            Op::Branch { else_target, .. } => *else_target = target,
            other => unreachable!("cannot patch {other:?}"),
        }
    }

    fn global_slot(&self, name: &str) -> Option<u16> {
        self.contract
            .globals
            .iter()
            .position(|g| g.name == name)
            .map(|i| i as u16)
    }

    fn block(&mut self, b: &Block, depth: u32) -> Result<(), LangError> {
        b.iter().try_for_each(|s| self.stmt(s, depth))
    }

    fn extend_scope(&mut self, sites: &[SiteId], range: (usize, usize)) {
        if range.0 < range.1 {
            for s in sites {
                self.program.sites[s.0 as usize].scope.push(range);
            }
        }
    }

    /// Emit jumping code for a condition. Jumps to the true/false targets are
    /// left unpatched and returned in [`Lowered::jumps`]; control falls
    /// through to the true target.
    fn cond(&mut self, c: &Cond, kind: SiteKind, base: u32) -> Result<Lowered, LangError> {
        match c {
            Cond::Atom { rel, lhs, rhs, loc } => {
                let start = self.pc();
                self.operand(lhs)?;
                self.operand(rhs)?;
                let id = SiteId(self.program.sites.len() as u32);
                let pc = self.emit(
                    Op::Branch {
                        site: id,
                        rel: *rel,
                        else_target: PLACEHOLDER,
                    },
                    *loc,
                );
                self.program.sites.push(SiteInfo {
                    id,
                    function: self.index,
                    loc: *loc,
                    kind,
                    depth: base + 1,
                    pc,
                    scope: vec![(start, pc + 1)],
                });
                Ok(Lowered {
                    sites: vec![id],
                    heads: vec![id],
                    jumps: vec![(pc, false)],
                    max_depth: base + 1,
                })
            }
            Cond::And(l, r) => {
                let left = self.cond(l, kind, base)?;
                let mid = self.pc();
                let mut jumps = Vec::new();
                for (at, on_true) in left.jumps {
                    if on_true {
                        self.patch(at, mid);
                    } else {
                        jumps.push((at, false));
                    }
                }
                let right = self.cond(r, kind, left.max_depth)?;
                let end = self.pc();
                self.extend_scope(&left.sites, (mid, end));
                jumps.extend(right.jumps);
                Ok(Lowered {
                    sites: left.sites.into_iter().chain(right.sites).collect(),
                    heads: left.heads,
                    jumps,
                    max_depth: right.max_depth,
                })
            }
            Cond::Or(l, r) => {
                let left = self.cond(l, kind, base)?;
                let mut jumps = Vec::new();
                let mut to_mid = Vec::new();
                for (at, on_true) in left.jumps {
                    if on_true {
                        jumps.push((at, true));
                    } else {
                        to_mid.push(at);
                    }
                }
                // left fell through: it holds
                let skip = self.emit(Op::Jump(PLACEHOLDER), Loc::default());
                jumps.push((skip, true));
                let mid = self.pc();
                for at in to_mid {
                    self.patch(at, mid);
                }
                let right = self.cond(r, kind, base)?;
                jumps.extend(right.jumps);
                Ok(Lowered {
                    sites: left.sites.into_iter().chain(right.sites).collect(),
                    heads: left.heads.into_iter().chain(right.heads).collect(),
                    jumps,
                    max_depth: left.max_depth.max(right.max_depth),
                })
            }
        }
    }

    /// Patch pending jumps: true targets to the current position when they
    /// do not already fall through, false targets collected for the caller.
    fn resolve_true(&mut self, jumps: Vec<(usize, bool)>) -> Vec<usize> {
        let here = self.pc();
        let mut falses = Vec::new();
        for (at, on_true) in jumps {
            if on_true {
                self.patch(at, here);
            } else {
                falses.push(at);
            }
        }
        falses
    }

    fn stmt(&mut self, s: &Stmt, depth: u32) -> Result<(), LangError> {
        match &s.kind {
            StmtKind::Local { name, init, .. } => {
                self.expr(init)?;
                let slot = self.locals.len() as u16;
                self.locals.insert(name.clone(), slot);
                self.emit(Op::StoreLocal(slot), s.loc);
            }
            StmtKind::Assign { target, value } => self.assign(target, value, s.loc)?,
            StmtKind::If {
                cond,
                then_block,
                else_block,
            } => {
                let lowered = self.cond(&normalize(cond, false), SiteKind::If, depth)?;
                let falses = self.resolve_true(lowered.jumps);
                let body_start = self.pc();
                self.block(then_block, depth + 1)?;
                if let Some(eb) = else_block {
                    let exit = self.emit(Op::Jump(PLACEHOLDER), s.loc);
                    let else_start = self.pc();
                    for at in falses {
                        self.patch(at, else_start);
                    }
                    self.block(eb, depth + 1)?;
                    let end = self.pc();
                    self.patch(exit, end);
                    self.extend_scope(&lowered.heads, (body_start, end));
                } else {
                    let end = self.pc();
                    for at in falses {
                        self.patch(at, end);
                    }
                    self.extend_scope(&lowered.heads, (body_start, end));
                }
            }
            StmtKind::While { cond, body } => {
                let top = self.pc();
                let lowered = self.cond(&normalize(cond, false), SiteKind::While, depth)?;
                let falses = self.resolve_true(lowered.jumps);
                let body_start = self.pc();
                self.block(body, depth + 1)?;
                self.emit(Op::Jump(top), s.loc);
                let end = self.pc();
                for at in falses {
                    self.patch(at, end);
                }
                self.extend_scope(&lowered.heads, (body_start, end));
            }
            StmtKind::For {
                init,
                cond,
                step,
                body,
            } => {
                self.stmt(init, depth)?;
                let top = self.pc();
                let lowered = self.cond(&normalize(cond, false), SiteKind::For, depth)?;
                let falses = self.resolve_true(lowered.jumps);
                let body_start = self.pc();
                self.block(body, depth + 1)?;
                self.stmt(step, depth + 1)?;
                self.emit(Op::Jump(top), s.loc);
                let end = self.pc();
                for at in falses {
                    self.patch(at, end);
                }
                self.extend_scope(&lowered.heads, (body_start, end));
            }
            StmtKind::Require(cond) => {
                let lowered = self.cond(&normalize(cond, false), SiteKind::Require, depth)?;
                let falses = self.resolve_true(lowered.jumps);
                if !falses.is_empty() {
                    let skip = self.emit(Op::Jump(PLACEHOLDER), s.loc);
                    let fail = self.emit(Op::Revert, s.loc);
                    for at in falses {
                        self.patch(at, fail);
                    }
                    let next = self.pc();
                    self.patch(skip, next);
                }
            }
            StmtKind::Transfer { to, amount } => {
                self.expr(to)?;
                self.expr(amount)?;
                self.emit(Op::Transfer, s.loc);
            }
            StmtKind::Delegatecall(target) => {
                self.expr(target)?;
                self.emit(Op::DelegateCall, s.loc);
            }
            StmtKind::Revert => {
                self.emit(Op::Revert, s.loc);
            }
            StmtKind::Expr(e) => {
                self.expr(e)?;
                self.emit(Op::Pop, s.loc);
            }
        }
        Ok(())
    }

    fn assign(&mut self, target: &LValue, value: &Expr, loc: Loc) -> Result<(), LangError> {
        match target {
            LValue::Var(name) => {
                self.expr(value)?;
                if let Some(&slot) = self.locals.get(name) {
                    self.emit(Op::StoreLocal(slot), loc);
                } else {
                    let slot = self.global_slot(name).expect("checked by the type checker");
                    self.emit(Op::StoreGlobal(slot), loc);
                }
            }
            LValue::Index(name, idx) => {
                let slot = self.global_slot(name).expect("checked by the type checker");
                self.expr(idx)?;
                self.expr(value)?;
                self.emit(Op::StoreMap(slot), loc);
            }
        }
        Ok(())
    }

    fn operand(&mut self, o: &Operand) -> Result<(), LangError> {
        match o {
            Operand::Expr(e) => self.expr(e),
            Operand::Zero => {
                self.emit(Op::Push(Word::zero()), Loc::default());
                Ok(())
            }
        }
    }

    fn expr(&mut self, e: &Expr) -> Result<(), LangError> {
        match &e.kind {
            ExprKind::Int(v) => {
                self.emit(Op::Push(*v), e.loc);
            }
            ExprKind::Bool(b) => {
                self.emit(Op::Push(Word::from(*b as u8)), e.loc);
            }
            ExprKind::Var(name) => {
                if let Some(&slot) = self.locals.get(name) {
                    self.emit(Op::LoadLocal(slot), e.loc);
                } else {
                    let slot = self
                        .global_slot(name)
                        .ok_or_else(|| LangError::undeclared(e.loc, name))?;
                    self.emit(Op::LoadGlobal(slot), e.loc);
                }
            }
            ExprKind::Index(name, idx) => {
                let slot = self
                    .global_slot(name)
                    .ok_or_else(|| LangError::undeclared(e.loc, name))?;
                self.expr(idx)?;
                self.emit(Op::LoadMap(slot), e.loc);
            }
            ExprKind::Binary(op, a, b) => {
                self.expr(a)?;
                self.expr(b)?;
                let instr = match op {
                    BinOp::And => Op::And,
                    BinOp::Or => Op::Or,
                    op if op.is_comparison() => Op::Cmp(rel_of(*op)),
                    op => {
                        let arith = match op {
                            BinOp::Add => ArithOp::Add,
                            BinOp::Sub => ArithOp::Sub,
                            BinOp::Mul => ArithOp::Mul,
                            BinOp::Div => ArithOp::Div,
                            _ => ArithOp::Mod,
                        };
                        let site = self.program.arith_sites.len() as u32;
                        self.program.arith_sites.push(ArithSite {
                            function: self.index,
                            pc: self.pc(),
                            loc: e.loc,
                        });
                        Op::Arith { op: arith, site }
                    }
                };
                self.emit(instr, e.loc);
            }
            ExprKind::Not(inner) => {
                self.expr(inner)?;
                self.emit(Op::Not, e.loc);
            }
            ExprKind::MsgValue => {
                self.emit(Op::CallValue, e.loc);
            }
            ExprKind::MsgSender => {
                self.emit(Op::Caller, e.loc);
            }
            ExprKind::BlockTimestamp => {
                self.emit(Op::Timestamp, e.loc);
            }
            ExprKind::BlockNumber => {
                self.emit(Op::Number, e.loc);
            }
            ExprKind::SelfBalance => {
                self.emit(Op::SelfBalance, e.loc);
            }
            ExprKind::Send(to, amount) => {
                self.expr(to)?;
                self.expr(amount)?;
                let site = self.program.send_sites.len() as u32;
                self.program.send_sites.push(SendSite {
                    function: self.index,
                    pc: self.pc(),
                    loc: e.loc,
                });
                self.emit(Op::Send { site }, e.loc);
            }
        }
        Ok(())
    }
}
