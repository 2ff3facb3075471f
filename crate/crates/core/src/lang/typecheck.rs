use std::collections::{BTreeMap, BTreeSet};

use crate::lang::ast::*;
use crate::lang::LangError;

/// Integer literals are compatible with both `uint256` and `address`.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Ty {
    Known(Type),
    IntLit,
}

impl Ty {
    fn fits(self, want: Type) -> bool {
        match self {
            Ty::Known(t) => t == want,
            Ty::IntLit => matches!(want, Type::Uint | Type::Address),
        }
    }

    fn compatible(self, other: Ty) -> bool {
        match (self, other) {
            (Ty::Known(a), b) => b.fits(a),
            (Ty::IntLit, Ty::Known(b)) => self.fits(b),
            (Ty::IntLit, Ty::IntLit) => true,
        }
    }

    fn name(self) -> String {
        match self {
            Ty::Known(t) => t.to_string(),
            Ty::IntLit => "integer literal".to_string(),
        }
    }
}

pub fn check(contract: &Contract) -> Result<(), LangError> {
    let mut globals = BTreeMap::new();
    for g in &contract.globals {
        if globals.insert(g.name.clone(), g.ty).is_some() {
            return Err(LangError::duplicate(g.loc, &g.name));
        }
        if let Some(init) = &g.init {
            let t = literal_type(init);
            if g.ty == Type::Map || !t.fits(g.ty) {
                return Err(LangError::type_mismatch(
                    init.loc,
                    &format!(
                        "cannot initialize `{}` of type {} with {}",
                        g.name,
                        g.ty,
                        t.name()
                    ),
                ));
            }
        }
    }
    let mut fnames = BTreeSet::new();
    for f in &contract.functions {
        if !fnames.insert(f.name.as_str()) || globals.contains_key(&f.name) {
            return Err(LangError::duplicate(f.loc, &f.name));
        }
        let mut cx = FnCx {
            globals: &globals,
            locals: BTreeMap::new(),
        };
        for p in &f.params {
            if p.ty == Type::Map {
                return Err(LangError::type_mismatch(
                    f.loc,
                    "mappings cannot be parameters",
                ));
            }
            cx.declare(&p.name, p.ty, f.loc)?;
        }
        cx.block(&f.body)?;
    }
    Ok(())
}

fn literal_type(e: &Expr) -> Ty {
    match e.kind {
        ExprKind::Bool(_) => Ty::Known(Type::Bool),
        _ => Ty::IntLit,
    }
}

struct FnCx<'a> {
    globals: &'a BTreeMap<String, Type>,
    locals: BTreeMap<String, Type>,
}

impl FnCx<'_> {
    fn declare(&mut self, name: &str, ty: Type, loc: Loc) -> Result<(), LangError> {
        if self.globals.contains_key(name) || self.locals.insert(name.to_string(), ty).is_some() {
            return Err(LangError::duplicate(loc, name));
        }
        Ok(())
    }

    fn lookup(&self, name: &str, loc: Loc) -> Result<Type, LangError> {
        self.locals
            .get(name)
            .or_else(|| self.globals.get(name))
            .copied()
            .ok_or_else(|| LangError::undeclared(loc, name))
    }

    fn block(&mut self, b: &Block) -> Result<(), LangError> {
        b.iter().try_for_each(|s| self.stmt(s))
    }

    fn expect(&self, e: &Expr, want: Type) -> Result<(), LangError> {
        let t = self.expr(e)?;
        if t.fits(want) {
            Ok(())
        } else {
            Err(LangError::type_mismatch(
                e.loc,
                &format!("expected {want}, found {}", t.name()),
            ))
        }
    }

    fn stmt(&mut self, s: &Stmt) -> Result<(), LangError> {
        match &s.kind {
            StmtKind::Local { ty, name, init } => {
                self.expect(init, *ty)?;
                self.declare(name, *ty, s.loc)
            }
            StmtKind::Assign { target, value } => {
                let ty = self.lookup(target.name(), s.loc)?;
                let slot_ty = match target {
                    LValue::Var(n) => {
                        if ty == Type::Map {
                            return Err(LangError::type_mismatch(
                                s.loc,
                                &format!("mapping `{n}` must be indexed"),
                            ));
                        }
                        ty
                    }
                    LValue::Index(n, idx) => {
                        if ty != Type::Map {
                            return Err(LangError::type_mismatch(
                                s.loc,
                                &format!("`{n}` is not a mapping"),
                            ));
                        }
                        self.expect(idx, Type::Address)?;
                        Type::Uint
                    }
                };
                self.expect(value, slot_ty)
            }
            StmtKind::If {
                cond,
                then_block,
                else_block,
            } => {
                self.expect(cond, Type::Bool)?;
                self.block(then_block)?;
                if let Some(b) = else_block {
                    self.block(b)?;
                }
                Ok(())
            }
            StmtKind::While { cond, body } => {
                self.expect(cond, Type::Bool)?;
                self.block(body)
            }
            StmtKind::For {
                init,
                cond,
                step,
                body,
            } => {
                self.stmt(init)?;
                self.expect(cond, Type::Bool)?;
                self.stmt(step)?;
                self.block(body)
            }
            StmtKind::Require(c) => self.expect(c, Type::Bool),
            StmtKind::Transfer { to, amount } => {
                self.expect(to, Type::Address)?;
                self.expect(amount, Type::Uint)
            }
            StmtKind::Delegatecall(t) => self.expect(t, Type::Address),
            StmtKind::Revert => Ok(()),
            StmtKind::Expr(e) => self.expr(e).map(|_| ()),
        }
    }

    fn expr(&self, e: &Expr) -> Result<Ty, LangError> {
        let ty = match &e.kind {
            ExprKind::Int(_) => Ty::IntLit,
            ExprKind::Bool(_) => Ty::Known(Type::Bool),
            ExprKind::Var(n) => {
                let t = self.lookup(n, e.loc)?;
                if t == Type::Map {
                    return Err(LangError::type_mismatch(
                        e.loc,
                        &format!("mapping `{n}` must be indexed"),
                    ));
                }
                Ty::Known(t)
            }
            ExprKind::Index(n, idx) => {
                if self.lookup(n, e.loc)? != Type::Map {
                    return Err(LangError::type_mismatch(
                        e.loc,
                        &format!("`{n}` is not a mapping"),
                    ));
                }
                self.expect(idx, Type::Address)?;
                Ty::Known(Type::Uint)
            }
            ExprKind::Binary(op, a, b) => match op {
                BinOp::And | BinOp::Or => {
                    self.expect(a, Type::Bool)?;
                    self.expect(b, Type::Bool)?;
                    Ty::Known(Type::Bool)
                }
                BinOp::Eq | BinOp::Ne => {
                    let (ta, tb) = (self.expr(a)?, self.expr(b)?);
                    if !ta.compatible(tb) {
                        return Err(LangError::type_mismatch(
                            e.loc,
                            &format!("cannot compare {} with {}", ta.name(), tb.name()),
                        ));
                    }
                    Ty::Known(Type::Bool)
                }
                _ if op.is_comparison() => {
                    self.expect(a, Type::Uint)?;
                    self.expect(b, Type::Uint)?;
                    Ty::Known(Type::Bool)
                }
                _ => {
                    self.expect(a, Type::Uint)?;
                    self.expect(b, Type::Uint)?;
                    Ty::Known(Type::Uint)
                }
            },
            ExprKind::Not(inner) => {
                self.expect(inner, Type::Bool)?;
                Ty::Known(Type::Bool)
            }
            ExprKind::MsgValue
            | ExprKind::BlockTimestamp
            | ExprKind::BlockNumber
            | ExprKind::SelfBalance => Ty::Known(Type::Uint),
            ExprKind::MsgSender => Ty::Known(Type::Address),
            ExprKind::Send(to, amount) => {
                self.expect(to, Type::Address)?;
                self.expect(amount, Type::Uint)?;
                Ty::Known(Type::Bool)
            }
        };
        Ok(ty)
    }
}

#[cfg(test)]
mod tests {
    use crate::lang::{parse, LangErrorKind};

    fn kind(src: &str) -> LangErrorKind {
        parse(src).unwrap_err().kind
    }

    #[test]
    fn duplicate_global() {
        assert!(matches!(
            kind("contract C { uint256 x; bool x; }"),
            LangErrorKind::Duplicate(_)
        ));
    }

    #[test]
    fn local_shadowing_global_is_duplicate() {
        assert!(matches!(
            kind("contract C { uint256 x; fn f() { uint256 x = 1; } }"),
            LangErrorKind::Duplicate(_)
        ));
    }

    #[test]
    fn undeclared_variable() {
        assert!(matches!(
            kind("contract C { fn f() { y = 1; } }"),
            LangErrorKind::Undeclared(_)
        ));
    }

    #[test]
    fn bool_arithmetic_rejected() {
        assert!(matches!(
            kind("contract C { bool b; fn f() { b = b + 1; } }"),
            LangErrorKind::TypeMismatch(_)
        ));
    }

    #[test]
    fn address_literal_coercion() {
        parse("contract C { address o = 0; fn f() { require(msg.sender == o); o = 0; } }").unwrap();
    }
}
