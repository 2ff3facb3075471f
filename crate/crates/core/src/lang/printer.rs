//! Canonical pretty-printer. Output reparses to a structurally equal tree.

use std::fmt::Write;

use crate::lang::ast::*;

pub fn print(contract: &Contract) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "contract {} {{", contract.name);
    for g in &contract.globals {
        let _ = write!(out, "    {} {}", g.ty, g.name);
        if let Some(init) = &g.init {
            let _ = write!(out, " = {}", expr(init));
        }
        out.push_str(";\n");
    }
    for f in &contract.functions {
        let params: Vec<String> = f
            .params
            .iter()
            .map(|p| format!("{} {}", p.ty, p.name))
            .collect();
        let _ = write!(out, "    fn {}({})", f.name, params.join(", "));
        if f.payable {
            out.push_str(" payable");
        }
        out.push(' ');
        block(&mut out, &f.body, 1);
        out.push('\n');
    }
    out.push_str("}\n");
    out
}

fn indent(out: &mut String, level: usize) {
    for _ in 0..level {
        out.push_str("    ");
    }
}

fn block(out: &mut String, b: &Block, level: usize) {
    out.push_str("{\n");
    for s in b {
        indent(out, level + 1);
        stmt(out, s, level + 1);
        out.push('\n');
    }
    indent(out, level);
    out.push('}');
}

fn simple(s: &Stmt) -> String {
    match &s.kind {
        StmtKind::Local { ty, name, init } => format!("{ty} {name} = {}", expr(init)),
        StmtKind::Assign { target, value } => match target {
            LValue::Var(n) => format!("{n} = {}", expr(value)),
            LValue::Index(n, i) => format!("{n}[{}] = {}", expr(i), expr(value)),
        },
        _ => unreachable!("only declarations and assignments are simple"),
    }
}

fn stmt(out: &mut String, s: &Stmt, level: usize) {
    match &s.kind {
        StmtKind::Local { .. } | StmtKind::Assign { .. } => {
            out.push_str(&simple(s));
            out.push(';');
        }
        StmtKind::If {
            cond,
            then_block,
            else_block,
        } => {
            let _ = write!(out, "if ({}) ", expr(cond));
            block(out, then_block, level);
            if let Some(b) = else_block {
                out.push_str(" else ");
                block(out, b, level);
            }
        }
        StmtKind::While { cond, body } => {
            let _ = write!(out, "while ({}) ", expr(cond));
            block(out, body, level);
        }
        StmtKind::For {
            init,
            cond,
            step,
            body,
        } => {
            let _ = write!(
                out,
                "for ({}; {}; {}) ",
                simple(init),
                expr(cond),
                simple(step)
            );
            block(out, body, level);
        }
        StmtKind::Require(c) => {
            let _ = write!(out, "require({});", expr(c));
        }
        StmtKind::Transfer { to, amount } => {
            let _ = write!(out, "transfer({}, {});", expr(to), expr(amount));
        }
        StmtKind::Delegatecall(t) => {
            let _ = write!(out, "delegatecall({});", expr(t));
        }
        StmtKind::Revert => out.push_str("revert;"),
        StmtKind::Expr(e) => {
            let _ = write!(out, "{};", expr(e));
        }
    }
}

/// Fully parenthesized so precedence never needs to be reconstructed.
pub fn expr(e: &Expr) -> String {
    match &e.kind {
        ExprKind::Int(v) => v.to_string(),
        ExprKind::Bool(b) => b.to_string(),
        ExprKind::Var(n) => n.clone(),
        ExprKind::Index(n, i) => format!("{n}[{}]", expr(i)),
        ExprKind::Binary(op, a, b) => format!("({} {} {})", expr(a), op.symbol(), expr(b)),
        ExprKind::Not(i) => format!("!{}", expr(i)),
        ExprKind::MsgValue => "msg.value".into(),
        ExprKind::MsgSender => "msg.sender".into(),
        ExprKind::BlockTimestamp => "block.timestamp".into(),
        ExprKind::BlockNumber => "block.number".into(),
        ExprKind::SelfBalance => "balance(this)".into(),
        ExprKind::Send(a, b) => format!("send({}, {})", expr(a), expr(b)),
    }
}
