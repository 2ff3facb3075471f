//! Recursive-descent parser for MiniSol.

use crate::lang::ast::*;
use crate::lang::lexer::{tokenize, Tok, Token};
use crate::lang::LangError;
use crate::Word;

/// One finney in base units.
pub fn finney() -> Word {
    Word::exp10(15)
}

const KEYWORDS: &[&str] = &[
    "contract",
    "fn",
    "payable",
    "uint256",
    "bool",
    "address",
    "map",
    "if",
    "else",
    "while",
    "for",
    "require",
    "transfer",
    "send",
    "delegatecall",
    "revert",
    "true",
    "false",
    "msg",
    "block",
    "balance",
    "this",
    "finney",
];

pub fn parse_syntax(src: &str) -> Result<Contract, LangError> {
    let tokens = tokenize(src)?;
    let mut p = Parser { tokens, pos: 0 };
    let contract = p.contract()?;
    p.expect(Tok::Eof)?;
    Ok(contract)
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.tokens[self.pos].tok
    }

    fn peek_at(&self, n: usize) -> &Tok {
        let i = (self.pos + n).min(self.tokens.len() - 1);
        &self.tokens[i].tok
    }

    fn loc(&self) -> Loc {
        self.tokens[self.pos].loc
    }

    fn advance(&mut self) -> Token {
        let t = self.tokens[self.pos].clone();
        if self.pos + 1 < self.tokens.len() {
            self.pos += 1;
        }
        t
    }

    fn error<T>(&self, expected: &str) -> Result<T, LangError> {
        Err(LangError::syntax(
            self.loc(),
            format!("expected {expected}, found {}", self.peek().describe()),
        ))
    }

    fn expect(&mut self, tok: Tok) -> Result<Loc, LangError> {
        if *self.peek() == tok {
            Ok(self.advance().loc)
        } else {
            let want = match &tok {
                Tok::Eof => "end of input".to_string(),
                t => t.describe(),
            };
            self.error(&want)
        }
    }

    fn is_kw(&self, kw: &str) -> bool {
        matches!(self.peek(), Tok::Ident(s) if s == kw)
    }

    fn eat_kw(&mut self, kw: &str) -> bool {
        if self.is_kw(kw) {
            self.advance();
            true
        } else {
            false
        }
    }

    fn expect_kw(&mut self, kw: &str) -> Result<Loc, LangError> {
        if self.is_kw(kw) {
            Ok(self.advance().loc)
        } else {
            self.error(&format!("`{kw}`"))
        }
    }

    fn ident(&mut self) -> Result<(String, Loc), LangError> {
        match self.peek().clone() {
            Tok::Ident(s) if !KEYWORDS.contains(&s.as_str()) => {
                let loc = self.advance().loc;
                Ok((s, loc))
            }
            _ => self.error("identifier"),
        }
    }

    fn contract(&mut self) -> Result<Contract, LangError> {
        self.expect_kw("contract")?;
        let (name, _) = self.ident()?;
        self.expect(Tok::LBrace)?;
        let mut globals = Vec::new();
        let mut functions = Vec::new();
        while self.peek_type() {
            globals.push(self.global()?);
        }
        while self.is_kw("fn") {
            functions.push(self.function()?);
        }
        self.expect(Tok::RBrace)?;
        Ok(Contract {
            name,
            globals,
            functions,
            accesses: Default::default(),
        })
    }

    fn peek_type(&self) -> bool {
        ["uint256", "bool", "address", "map"]
            .iter()
            .any(|k| self.is_kw(k))
    }

    fn ty(&mut self) -> Result<Type, LangError> {
        if self.eat_kw("uint256") {
            Ok(Type::Uint)
        } else if self.eat_kw("bool") {
            Ok(Type::Bool)
        } else if self.eat_kw("address") {
            Ok(Type::Address)
        } else if self.eat_kw("map") {
            self.expect(Tok::LParen)?;
            self.expect_kw("address")?;
            self.expect(Tok::Arrow)?;
            self.expect_kw("uint256")?;
            self.expect(Tok::RParen)?;
            Ok(Type::Map)
        } else {
            self.error("type")
        }
    }

    fn global(&mut self) -> Result<GlobalVar, LangError> {
        let loc = self.loc();
        let ty = self.ty()?;
        let (name, _) = self.ident()?;
        let init = if *self.peek() == Tok::Assign {
            self.advance();
            Some(self.literal()?)
        } else {
            None
        };
        self.expect(Tok::Semi)?;
        Ok(GlobalVar {
            name,
            ty,
            init,
            loc,
        })
    }

    fn literal(&mut self) -> Result<Expr, LangError> {
        let loc = self.loc();
        match self.peek().clone() {
            Tok::Int(v) => {
                self.advance();
                self.finney_suffix(v, loc)
            }
            Tok::Ident(s) if s == "true" || s == "false" => {
                self.advance();
                Ok(Expr::new(ExprKind::Bool(s == "true"), loc))
            }
            _ => self.error("literal"),
        }
    }

    fn finney_suffix(&mut self, v: Word, loc: Loc) -> Result<Expr, LangError> {
        if self.eat_kw("finney") {
            let (scaled, overflow) = v.overflowing_mul(finney());
            if overflow {
                return Err(LangError::syntax(
                    loc,
                    "finney literal out of range".to_string(),
                ));
            }
            Ok(Expr::new(ExprKind::Int(scaled), loc))
        } else {
            Ok(Expr::new(ExprKind::Int(v), loc))
        }
    }

    fn function(&mut self) -> Result<Function, LangError> {
        let loc = self.expect_kw("fn")?;
        let (name, _) = self.ident()?;
        self.expect(Tok::LParen)?;
        let mut params = Vec::new();
        if *self.peek() != Tok::RParen {
            loop {
                let ty = self.ty()?;
                let (pname, _) = self.ident()?;
                params.push(Param { name: pname, ty });
                if *self.peek() == Tok::Comma {
                    self.advance();
                } else {
                    break;
                }
            }
        }
        self.expect(Tok::RParen)?;
        let payable = self.eat_kw("payable");
        let body = self.block()?;
        Ok(Function {
            name,
            params,
            payable,
            body,
            loc,
        })
    }

    fn block(&mut self) -> Result<Block, LangError> {
        self.expect(Tok::LBrace)?;
        let mut stmts = Vec::new();
        while *self.peek() != Tok::RBrace {
            if *self.peek() == Tok::Eof {
                return self.error("`}`");
            }
            stmts.push(self.stmt()?);
        }
        self.advance();
        Ok(stmts)
    }

    fn stmt(&mut self) -> Result<Stmt, LangError> {
        let loc = self.loc();
        let kind = if self.peek_type() {
            let s = self.local()?;
            self.expect(Tok::Semi)?;
            return Ok(s);
        } else if self.eat_kw("if") {
            self.expect(Tok::LParen)?;
            let cond = self.expr()?;
            self.expect(Tok::RParen)?;
            let then_block = self.block()?;
            let else_block = if self.eat_kw("else") {
                if self.is_kw("if") {
                    Some(vec![self.stmt()?])
                } else {
                    Some(self.block()?)
                }
            } else {
                None
            };
            StmtKind::If {
                cond,
                then_block,
                else_block,
            }
        } else if self.eat_kw("while") {
            self.expect(Tok::LParen)?;
            let cond = self.expr()?;
            self.expect(Tok::RParen)?;
            StmtKind::While {
                cond,
                body: self.block()?,
            }
        } else if self.eat_kw("for") {
            self.expect(Tok::LParen)?;
            let init = if self.peek_type() {
                self.local()?
            } else {
                self.assignment()?
            };
            self.expect(Tok::Semi)?;
            let cond = self.expr()?;
            self.expect(Tok::Semi)?;
            let step = self.assignment()?;
            self.expect(Tok::RParen)?;
            StmtKind::For {
                init: Box::new(init),
                cond,
                step: Box::new(step),
                body: self.block()?,
            }
        } else if self.eat_kw("require") {
            self.expect(Tok::LParen)?;
            let cond = self.expr()?;
            self.expect(Tok::RParen)?;
            self.expect(Tok::Semi)?;
            StmtKind::Require(cond)
        } else if self.eat_kw("transfer") {
            self.expect(Tok::LParen)?;
            let to = self.expr()?;
            self.expect(Tok::Comma)?;
            let amount = self.expr()?;
            self.expect(Tok::RParen)?;
            self.expect(Tok::Semi)?;
            StmtKind::Transfer { to, amount }
        } else if self.eat_kw("delegatecall") {
            self.expect(Tok::LParen)?;
            let target = self.expr()?;
            self.expect(Tok::RParen)?;
            self.expect(Tok::Semi)?;
            StmtKind::Delegatecall(target)
        } else if self.eat_kw("revert") {
            self.expect(Tok::Semi)?;
            StmtKind::Revert
        } else if self.is_kw("send") {
            let e = self.expr()?;
            self.expect(Tok::Semi)?;
            StmtKind::Expr(e)
        } else {
            let s = self.assignment()?;
            self.expect(Tok::Semi)?;
            return Ok(s);
        };
        Ok(Stmt { kind, loc })
    }

    fn local(&mut self) -> Result<Stmt, LangError> {
        let loc = self.loc();
        let ty = self.ty()?;
        if ty == Type::Map {
            return Err(LangError::type_mismatch(
                loc,
                "mappings cannot be local variables",
            ));
        }
        let (name, _) = self.ident()?;
        self.expect(Tok::Assign)?;
        let init = self.expr()?;
        Ok(Stmt {
            kind: StmtKind::Local { ty, name, init },
            loc,
        })
    }

    fn assignment(&mut self) -> Result<Stmt, LangError> {
        let loc = self.loc();
        let (name, _) = self.ident()?;
        let target = if *self.peek() == Tok::LBracket {
            self.advance();
            let idx = self.expr()?;
            self.expect(Tok::RBracket)?;
            LValue::Index(name, Box::new(idx))
        } else {
            LValue::Var(name)
        };
        self.expect(Tok::Assign)?;
        let value = self.expr()?;
        Ok(Stmt {
            kind: StmtKind::Assign { target, value },
            loc,
        })
    }

    fn expr(&mut self) -> Result<Expr, LangError> {
        self.or_expr()
    }

    fn or_expr(&mut self) -> Result<Expr, LangError> {
        let mut lhs = self.and_expr()?;
        while *self.peek() == Tok::OrOr {
            let loc = self.advance().loc;
            let rhs = self.and_expr()?;
            lhs = Expr::new(
                ExprKind::Binary(BinOp::Or, Box::new(lhs), Box::new(rhs)),
                loc,
            );
        }
        Ok(lhs)
    }

    fn and_expr(&mut self) -> Result<Expr, LangError> {
        let mut lhs = self.cmp_expr()?;
        while *self.peek() == Tok::AndAnd {
            let loc = self.advance().loc;
            let rhs = self.cmp_expr()?;
            lhs = Expr::new(
                ExprKind::Binary(BinOp::And, Box::new(lhs), Box::new(rhs)),
                loc,
            );
        }
        Ok(lhs)
    }

    fn cmp_expr(&mut self) -> Result<Expr, LangError> {
        let lhs = self.add_expr()?;
        let op = match self.peek() {
            Tok::EqEq => BinOp::Eq,
            Tok::NotEq => BinOp::Ne,
            Tok::Lt => BinOp::Lt,
            Tok::Le => BinOp::Le,
            Tok::Gt => BinOp::Gt,
            Tok::Ge => BinOp::Ge,
            _ => return Ok(lhs),
        };
        let loc = self.advance().loc;
        let rhs = self.add_expr()?;
        Ok(Expr::new(
            ExprKind::Binary(op, Box::new(lhs), Box::new(rhs)),
            loc,
        ))
    }

    fn add_expr(&mut self) -> Result<Expr, LangError> {
        let mut lhs = self.mul_expr()?;
        loop {
            let op = match self.peek() {
                Tok::Plus => BinOp::Add,
                Tok::Minus => BinOp::Sub,
                _ => return Ok(lhs),
            };
            let loc = self.advance().loc;
            let rhs = self.mul_expr()?;
            lhs = Expr::new(ExprKind::Binary(op, Box::new(lhs), Box::new(rhs)), loc);
        }
    }

    fn mul_expr(&mut self) -> Result<Expr, LangError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek() {
                Tok::Star => BinOp::Mul,
                Tok::Slash => BinOp::Div,
                Tok::Percent => BinOp::Mod,
                _ => return Ok(lhs),
            };
            let loc = self.advance().loc;
            let rhs = self.unary()?;
            lhs = Expr::new(ExprKind::Binary(op, Box::new(lhs), Box::new(rhs)), loc);
        }
    }

    fn unary(&mut self) -> Result<Expr, LangError> {
        if *self.peek() == Tok::Bang {
            let loc = self.advance().loc;
            let inner = self.unary()?;
            return Ok(Expr::new(ExprKind::Not(Box::new(inner)), loc));
        }
        self.primary()
    }

    fn primary(&mut self) -> Result<Expr, LangError> {
        let loc = self.loc();
        match self.peek().clone() {
            Tok::Int(v) => {
                self.advance();
                self.finney_suffix(v, loc)
            }
            Tok::LParen => {
                self.advance();
                let e = self.expr()?;
                self.expect(Tok::RParen)?;
                Ok(e)
            }
            Tok::Ident(s) => match s.as_str() {
                "true" | "false" => self.literal(),
                "msg" => {
                    self.advance();
                    self.expect(Tok::Dot)?;
                    if self.eat_kw("value") {
                        Ok(Expr::new(ExprKind::MsgValue, loc))
                    } else if self.eat_kw("sender") {
                        Ok(Expr::new(ExprKind::MsgSender, loc))
                    } else {
                        self.error("`value` or `sender`")
                    }
                }
                "block" => {
                    self.advance();
                    self.expect(Tok::Dot)?;
                    if self.eat_kw("timestamp") {
                        Ok(Expr::new(ExprKind::BlockTimestamp, loc))
                    } else if self.eat_kw("number") {
                        Ok(Expr::new(ExprKind::BlockNumber, loc))
                    } else {
                        self.error("`timestamp` or `number`")
                    }
                }
                "balance" => {
                    self.advance();
                    self.expect(Tok::LParen)?;
                    self.expect_kw("this")?;
                    self.expect(Tok::RParen)?;
                    Ok(Expr::new(ExprKind::SelfBalance, loc))
                }
                "send" => {
                    self.advance();
                    self.expect(Tok::LParen)?;
                    let to = self.expr()?;
                    self.expect(Tok::Comma)?;
                    let amount = self.expr()?;
                    self.expect(Tok::RParen)?;
                    Ok(Expr::new(
                        ExprKind::Send(Box::new(to), Box::new(amount)),
                        loc,
                    ))
                }
                _ => {
                    let (name, _) = self.ident()?;
                    if *self.peek() == Tok::LBracket && *self.peek_at(1) != Tok::RBracket {
                        self.advance();
                        let idx = self.expr()?;
                        self.expect(Tok::RBracket)?;
                        Ok(Expr::new(ExprKind::Index(name, Box::new(idx)), loc))
                    } else {
                        Ok(Expr::new(ExprKind::Var(name), loc))
                    }
                }
            },
            _ => self.error("expression"),
        }
    }
}
