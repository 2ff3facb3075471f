//! MiniSol front end: lexer, parser, type checker, global-access dataflow and
//! the instrumented bytecode compiler.

pub mod analysis;
pub mod ast;
pub mod bytecode;
pub mod compiler;
mod lexer;
pub mod parser;
pub mod printer;
mod typecheck;

use std::fmt;

use thiserror::Error;

pub use analysis::{analyze_accesses, AccessOp, AccessTable, GlobalAccess};
pub use ast::{Contract, Loc, Type};
pub use bytecode::{Op, Program, Rel, SiteId, SiteInfo};
pub use compiler::compile;
pub use printer::print;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LangErrorKind {
    Syntax(String),
    Duplicate(String),
    TypeMismatch(String),
    Undeclared(String),
    Unsupported(String),
}

impl fmt::Display for LangErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LangErrorKind::Syntax(m) => write!(f, "syntax error: {m}"),
            LangErrorKind::Duplicate(n) => write!(f, "duplicate identifier `{n}`"),
            LangErrorKind::TypeMismatch(m) => write!(f, "type mismatch: {m}"),
            LangErrorKind::Undeclared(n) => write!(f, "use of undeclared variable `{n}`"),
            LangErrorKind::Unsupported(m) => write!(f, "unsupported construct: {m}"),
        }
    }
}

/// Front-end diagnostic with the offending source position.
#[derive(Debug, Clone, Error)]
#[error("{}:{}: {kind}", loc.line, loc.col)]
pub struct LangError {
    pub kind: LangErrorKind,
    pub loc: Loc,
}

impl LangError {
    pub(crate) fn syntax(loc: Loc, msg: String) -> Self {
        LangError {
            kind: LangErrorKind::Syntax(msg),
            loc,
        }
    }

    pub(crate) fn duplicate(loc: Loc, name: &str) -> Self {
        LangError {
            kind: LangErrorKind::Duplicate(name.to_string()),
            loc,
        }
    }

    pub(crate) fn type_mismatch(loc: Loc, msg: &str) -> Self {
        LangError {
            kind: LangErrorKind::TypeMismatch(msg.to_string()),
            loc,
        }
    }

    pub(crate) fn undeclared(loc: Loc, name: &str) -> Self {
        LangError {
            kind: LangErrorKind::Undeclared(name.to_string()),
            loc,
        }
    }

    pub(crate) fn unsupported(loc: Loc, msg: &str) -> Self {
        LangError {
            kind: LangErrorKind::Unsupported(msg.to_string()),
            loc,
        }
    }
}

/// Parse and type-check MiniSol source, filling in the access table.
pub fn parse(source: &str) -> Result<Contract, LangError> {
    let mut contract = parser::parse_syntax(source)?;
    typecheck::check(&contract)?;
    contract.accesses = analyze_accesses(&contract);
    Ok(contract)
}
