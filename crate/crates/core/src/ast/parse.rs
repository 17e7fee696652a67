use std::collections::HashMap;
use std::sync::Arc;

use thiserror::Error;

use super::*;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{span}: {msg}")]
pub struct ParseError {
    pub span: Span,
    pub msg: String,
}

/// A parsed source file: its region declarations, optional width and body.
#[derive(Clone, Debug)]
pub struct Program {
    pub poset: RegionPoset,
    pub width: Option<u32>,
    pub expr: SExpr,
}

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Ident(String),
    Int(u64),
    BitLit(bool, Label),
    NatLit(u64, Label),
    Punct(&'static str),
    Eof,
}

const PUNCT: &[&str] = &[
    "<-", "->", "::", "==", "!=", "<=", ">=", "&&", "||", "(", ")", "[", "]", "{", "}", ",", ";",
    ":", ".", "^", "=", "<", ">", "+", "-", "*", "/", "%", "&", "!", "|",
];

const KEYWORDS: &[&str] = &[
    "let", "in", "if", "then", "else", "fun", "region", "width", "type", "mux", "xor", "flip",
    "rnd", "castS", "castP", "castNU", "castU", "ref", "read", "write", "len", "forall",
];

fn lex(src: &str) -> Result<Vec<(Tok, Span)>, ParseError> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let (mut i, mut line, mut col) = (0usize, 1u32, 1u32);
    let is_ident = |c: char| c.is_alphanumeric() || c == '_' || c == '\'';
    while i < chars.len() {
        let c = chars[i];
        let span = Span { line, col };
        let adv = |n: usize, i: &mut usize, col: &mut u32| {
            *i += n;
            *col += n as u32;
        };
        if c == '\n' {
            i += 1;
            line += 1;
            col = 1;
            continue;
        }
        if c.is_whitespace() {
            adv(1, &mut i, &mut col);
            continue;
        }
        if c == '#' || (c == '/' && chars.get(i + 1) == Some(&'/')) {
            while i < chars.len() && chars[i] != '\n' {
                i += 1;
            }
            continue;
        }
        let neg_nat = c == '-'
            && chars.get(i + 1) == Some(&'1')
            && chars.get(i + 2) == Some(&'n')
            && matches!(chars.get(i + 3), Some('S' | 'P'));
        if neg_nat {
            let l = if chars[i + 3] == 'S' { Label::S } else { Label::P };
            out.push((Tok::NatLit(u64::MAX, l), span));
            adv(4, &mut i, &mut col);
            continue;
        }
        if c.is_ascii_digit() {
            let start = i;
            while i < chars.len() && chars[i].is_ascii_digit() {
                i += 1;
            }
            let text: String = chars[start..i].iter().collect();
            let n: u64 = text.parse().map_err(|_| ParseError { span, msg: "number too large".into() })?;
            col += (i - start) as u32;
            let next = chars.get(i).copied();
            let after = chars.get(i + 1).copied();
            let label = |c: Option<char>| match c {
                Some('S') => Some(Label::S),
                Some('P') => Some(Label::P),
                _ => None,
            };
            if let (Some(l), false) = (label(next), chars.get(i + 1).is_some_and(|&c| is_ident(c))) {
                if n > 1 {
                    return Err(ParseError { span, msg: format!("bit literal must be 0 or 1, got {n}") });
                }
                out.push((Tok::BitLit(n == 1, l), span));
                adv(1, &mut i, &mut col);
            } else if next == Some('n')
                && label(after).is_some()
                && !chars.get(i + 2).is_some_and(|&c| is_ident(c))
            {
                out.push((Tok::NatLit(n, label(after).unwrap()), span));
                adv(2, &mut i, &mut col);
            } else {
                out.push((Tok::Int(n), span));
            }
            continue;
        }
        if c.is_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && is_ident(chars[i]) {
                i += 1;
            }
            col += (i - start) as u32;
            out.push((Tok::Ident(chars[start..i].iter().collect()), span));
            continue;
        }
        if c == '⊥' {
            out.push((Tok::Ident("bot".into()), span));
            adv(1, &mut i, &mut col);
            continue;
        }
        let rest: String = chars[i..chars.len().min(i + 2)].iter().collect();
        match PUNCT.iter().find(|p| rest.starts_with(**p)) {
            Some(p) => {
                out.push((Tok::Punct(p), span));
                adv(p.len(), &mut i, &mut col);
            }
            None => return Err(ParseError { span, msg: format!("unexpected character {c:?}") }),
        }
    }
    out.push((Tok::Eof, Span { line, col }));
    Ok(out)
}

struct Parser {
    toks: Vec<(Tok, Span)>,
    pos: usize,
    fresh: usize,
    aliases: HashMap<String, (Vec<Sym>, Type)>,
}

type PResult<T> = Result<T, ParseError>;

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].0
    }

    fn peek_at(&self, k: usize) -> &Tok {
        &self.toks[(self.pos + k).min(self.toks.len() - 1)].0
    }

    fn span(&self) -> Span {
        self.toks[self.pos].1
    }

    fn bump(&mut self) -> Tok {
        let t = self.toks[self.pos].0.clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn err<T>(&self, msg: impl Into<String>) -> PResult<T> {
        Err(ParseError { span: self.span(), msg: msg.into() })
    }

    fn is_punct(&self, p: &str) -> bool {
        matches!(self.peek(), Tok::Punct(q) if *q == p)
    }

    fn is_kw(&self, k: &str) -> bool {
        matches!(self.peek(), Tok::Ident(s) if s == k)
    }

    fn eat_punct(&mut self, p: &str) -> bool {
        if self.is_punct(p) {
            self.bump();
            true
        } else {
            false
        }
    }

    fn expect_punct(&mut self, p: &str) -> PResult<()> {
        if self.eat_punct(p) {
            Ok(())
        } else {
            self.err(format!("expected `{p}`, found {}", self.describe()))
        }
    }

    fn expect_kw(&mut self, k: &str) -> PResult<()> {
        if self.is_kw(k) {
            self.bump();
            Ok(())
        } else {
            self.err(format!("expected `{k}`, found {}", self.describe()))
        }
    }

    fn describe(&self) -> String {
        match self.peek() {
            Tok::Ident(s) => format!("`{s}`"),
            Tok::Int(n) => format!("`{n}`"),
            Tok::BitLit(b, l) => format!("`{}{l}`", *b as u8),
            Tok::NatLit(n, l) => format!("`{n}n{l}`"),
            Tok::Punct(p) => format!("`{p}`"),
            Tok::Eof => "end of input".into(),
        }
    }

    fn ident(&mut self) -> PResult<Sym> {
        match self.peek().clone() {
            Tok::Ident(s) if !KEYWORDS.contains(&s.as_str()) => {
                self.bump();
                Ok(sym(&s))
            }
            _ => self.err(format!("expected identifier, found {}", self.describe())),
        }
    }

    fn region(&mut self) -> PResult<Region> {
        let n = self.ident()?;
        Ok(if &*n == "bot" { Region::Bot } else { Region::Named(n) })
    }

    fn fresh(&mut self, base: &str) -> Sym {
        self.fresh += 1;
        sym(&format!("__{base}{}", self.fresh))
    }

    fn mk(&self, kind: ExprKind<bool>, span: Span) -> SExpr {
        Expr::at(kind, span)
    }

    // ---- headers ----

    fn program(&mut self) -> PResult<Program> {
        let mut poset = RegionPoset::new();
        let mut width = None;
        loop {
            if self.is_kw("region") {
                self.bump();
                let mut prev = self.ident()?;
                poset.declare(&prev);
                while self.eat_punct("<") {
                    let next = self.ident()?;
                    let span = self.span();
                    poset
                        .add_lt(&prev, &next)
                        .map_err(|e| ParseError { span, msg: e.to_string() })?;
                    prev = next;
                }
                self.expect_punct(";")?;
            } else if self.is_kw("width") {
                self.bump();
                match self.bump() {
                    Tok::Int(n) if (1..=16).contains(&n) => width = Some(n as u32),
                    _ => return self.err("width must be an integer between 1 and 16"),
                }
                self.expect_punct(";")?;
            } else if self.is_kw("type") {
                self.bump();
                let name = self.ident()?;
                let mut params = Vec::new();
                if self.eat_punct("[") {
                    params = self.comma_list("]", |p| p.ident())?;
                }
                self.expect_punct("=")?;
                let t = self.ty()?;
                self.expect_punct(";")?;
                self.aliases.insert(name.to_string(), (params, t));
            } else {
                break;
            }
        }
        let expr = self.expr()?;
        if *self.peek() != Tok::Eof {
            return self.err(format!("unexpected {} after expression", self.describe()));
        }
        Ok(Program { poset, width, expr })
    }

    fn comma_list<T>(&mut self, close: &str, mut f: impl FnMut(&mut Self) -> PResult<T>) -> PResult<Vec<T>> {
        let mut out = Vec::new();
        if self.eat_punct(close) {
            return Ok(out);
        }
        loop {
            out.push(f(self)?);
            if self.eat_punct(close) {
                return Ok(out);
            }
            self.expect_punct(",")?;
        }
    }

    // ---- types ----

    fn ty(&mut self) -> PResult<Type> {
        if self.is_kw("forall") {
            self.bump();
            self.expect_punct("[")?;
            let (rparams, constraints) = self.region_params()?;
            self.expect_punct(".")?;
            return match self.ty()? {
                Type::Arrow(arg, ret) => {
                    Ok(Type::Poly(Box::new(Scheme { rparams, constraints, arg: *arg, ret: *ret })))
                }
                _ => self.err("forall must quantify a function type"),
            };
        }
        let lhs = self.ty_prod()?;
        if self.eat_punct("->") {
            Ok(Type::arrow(lhs, self.ty()?))
        } else {
            Ok(lhs)
        }
    }

    fn ty_prod(&mut self) -> PResult<Type> {
        let lhs = self.ty_atom()?;
        if self.eat_punct("*") {
            Ok(Type::prod(lhs, self.ty_prod()?))
        } else {
            Ok(lhs)
        }
    }

    fn opt_region(&mut self) -> PResult<Region> {
        if self.eat_punct("^") {
            self.region()
        } else {
            Ok(Region::Bot)
        }
    }

    fn ty_atom(&mut self) -> PResult<Type> {
        if self.eat_punct("(") {
            let t = self.ty()?;
            self.expect_punct(")")?;
            return Ok(t);
        }
        if self.eat_punct("{") {
            let mut fs = self.comma_list("}", |p| {
                let n = p.ident()?;
                p.expect_punct(":")?;
                Ok((n, p.ty()?))
            })?;
            fs.sort_by(|a, b| a.0.cmp(&b.0));
            if fs.windows(2).any(|w| w[0].0 == w[1].0) {
                return self.err("duplicate record field");
            }
            return Ok(Type::Record(fs));
        }
        let name = match self.peek().clone() {
            Tok::Ident(s) => s,
            _ => return self.err(format!("expected a type, found {}", self.describe())),
        };
        self.bump();
        let inner = |p: &mut Self| -> PResult<Type> {
            p.expect_punct("(")?;
            let t = p.ty()?;
            p.expect_punct(")")?;
            Ok(t)
        };
        Ok(match name.as_str() {
            "bitS" => Type::Bit(Label::S, self.opt_region()?),
            "bitP" => Type::Bit(Label::P, self.opt_region()?),
            "natS" => Type::Nat(Label::S, self.opt_region()?),
            "natP" => Type::Nat(Label::P, self.opt_region()?),
            "flip" => {
                self.expect_punct("^")?;
                Type::Flip(self.region()?)
            }
            "rnd" => {
                self.expect_punct("^")?;
                Type::Rnd(self.region()?)
            }
            "unit" => Type::Unit,
            "spent" => Type::Spent,
            "ref" => Type::Ref(Box::new(inner(self)?)),
            "array" => Type::Array(Box::new(inner(self)?)),
            "nu" => Type::NonUni(Box::new(inner(self)?)),
            other => {
                let Some((params, body)) = self.aliases.get(other).cloned() else {
                    return self.err(format!("unknown type `{other}`"));
                };
                let args = if self.eat_punct("[") {
                    self.comma_list("]", |p| p.region())?
                } else {
                    Vec::new()
                };
                if args.len() != params.len() {
                    return self.err(format!(
                        "type `{other}` expects {} region arguments, got {}",
                        params.len(),
                        args.len()
                    ));
                }
                let map: HashMap<Sym, Region> = params.into_iter().zip(args).collect();
                body.map_regions(&|r| match r {
                    Region::Named(n) => map.get(n).cloned().unwrap_or_else(|| r.clone()),
                    Region::Bot => Region::Bot,
                })
            }
        })
    }

    /// After `[`: `R1, R2 | R1 < R2, ... ]`.
    fn region_params(&mut self) -> PResult<(Vec<Sym>, Vec<(Sym, Sym)>)> {
        let mut params = vec![self.ident()?];
        while self.eat_punct(",") {
            params.push(self.ident()?);
        }
        let mut cons = Vec::new();
        if self.eat_punct("|") {
            loop {
                let mut lo = self.ident()?;
                self.expect_punct("<")?;
                let mut hi = self.ident()?;
                cons.push((lo.clone(), hi.clone()));
                while self.eat_punct("<") {
                    lo = hi;
                    hi = self.ident()?;
                    cons.push((lo.clone(), hi.clone()));
                }
                if !self.eat_punct(",") {
                    break;
                }
            }
        }
        self.expect_punct("]")?;
        Ok((params, cons))
    }

    // ---- expressions ----

    fn expr(&mut self) -> PResult<SExpr> {
        let span = self.span();
        let e = if self.is_kw("let") {
            return self.let_expr();
        } else if self.is_kw("if") {
            return self.if_expr();
        } else if self.is_kw("fun") {
            return self.fun_expr();
        } else {
            self.assign_expr()?
        };
        if self.eat_punct(";") {
            let rest = self.expr()?;
            return Ok(self.mk(ExprKind::Let(sym("_"), e, rest), span));
        }
        Ok(e)
    }

    fn assign_expr(&mut self) -> PResult<SExpr> {
        let span = self.span();
        let lhs = self.or_expr()?;
        if self.is_punct("<-") {
            if let ExprKind::Index(a, i) = lhs.kind() {
                let (a, i) = (a.clone(), i.clone());
                self.bump();
                let rhs = self.or_expr()?;
                return Ok(self.mk(ExprKind::Assign(a, i, rhs), span));
            }
            return self.err("`<-` must follow an array index");
        }
        Ok(lhs)
    }

    fn pattern(&mut self) -> PResult<Vec<Sym>> {
        if self.eat_punct("(") {
            let names = self.comma_list(")", |p| p.ident())?;
            return Ok(names);
        }
        let mut names = vec![self.ident()?];
        while self.eat_punct(",") {
            names.push(self.ident()?);
        }
        Ok(names)
    }

    fn let_expr(&mut self) -> PResult<SExpr> {
        let span = self.span();
        self.expect_kw("let")?;
        let names = self.pattern()?;
        self.expect_punct("=")?;
        let bound = self.expr()?;
        self.expect_kw("in")?;
        let body = self.expr()?;
        self.bind_pattern(&names, bound, body, span)
    }

    fn bind_pattern(&mut self, names: &[Sym], bound: SExpr, body: SExpr, span: Span) -> PResult<SExpr> {
        match names {
            [] => Ok(self.mk(ExprKind::Let(sym("_"), bound, body), span)),
            [x] => Ok(self.mk(ExprKind::Let(x.clone(), bound, body), span)),
            [x, y] => Ok(self.mk(ExprKind::LetTup(x.clone(), y.clone(), bound, body), span)),
            [x, rest @ ..] => {
                let tmp = self.fresh("t");
                let inner = self.bind_pattern(rest, self.mk(ExprKind::Var(tmp.clone()), span), body, span)?;
                Ok(self.mk(ExprKind::LetTup(x.clone(), tmp, bound, inner), span))
            }
        }
    }

    fn if_expr(&mut self) -> PResult<SExpr> {
        let span = self.span();
        self.expect_kw("if")?;
        let c = self.expr()?;
        self.expect_kw("then")?;
        let a = self.expr()?;
        self.expect_kw("else")?;
        let b = self.expr()?;
        Ok(self.mk(ExprKind::If(c, a, b), span))
    }

    fn fun_expr(&mut self) -> PResult<SExpr> {
        let span = self.span();
        self.expect_kw("fun")?;
        let name = self.ident()?;
        let (rparams, constraints) =
            if self.eat_punct("[") { self.region_params()? } else { (Vec::new(), Vec::new()) };
        self.expect_punct("(")?;
        let params = self.comma_list(")", |p| {
            let x = p.ident()?;
            p.expect_punct(":")?;
            Ok((x, p.ty()?))
        })?;
        let ret = if self.eat_punct(":") { Some(self.ty()?) } else { None };
        self.expect_punct(".")?;
        let mut body = self.expr()?;
        let (param, pty) = match params.len() {
            0 => (sym("_"), Type::Unit),
            1 => params[0].clone(),
            _ => {
                let tmp = self.fresh("a");
                let names: Vec<Sym> = params.iter().map(|(x, _)| x.clone()).collect();
                body = self.bind_pattern(&names, self.mk(ExprKind::Var(tmp.clone()), span), body, span)?;
                let mut ty = params.last().unwrap().1.clone();
                for (_, t) in params[..params.len() - 1].iter().rev() {
                    ty = Type::prod(t.clone(), ty);
                }
                (tmp, ty)
            }
        };
        let def = FunDef { name, rparams, constraints, param, pty, ret, body };
        Ok(self.mk(ExprKind::Fun(Arc::new(def)), span))
    }

    fn binary(
        &mut self,
        ops: &[(&'static str, PrimOp)],
        next: fn(&mut Self) -> PResult<SExpr>,
        chain: bool,
    ) -> PResult<SExpr> {
        let span = self.span();
        let mut lhs = next(self)?;
        loop {
            let Some(&(_, op)) = ops.iter().find(|(p, _)| self.is_punct(p)) else {
                return Ok(lhs);
            };
            self.bump();
            let rhs = next(self)?;
            lhs = self.mk(ExprKind::Prim(op, vec![lhs, rhs]), span);
            if !chain {
                return Ok(lhs);
            }
        }
    }

    fn or_expr(&mut self) -> PResult<SExpr> {
        self.binary(&[("||", PrimOp::Or)], Self::and_expr, true)
    }

    fn and_expr(&mut self) -> PResult<SExpr> {
        self.binary(&[("&&", PrimOp::And)], Self::cmp_expr, true)
    }

    fn cmp_expr(&mut self) -> PResult<SExpr> {
        self.binary(
            &[
                ("==", PrimOp::Eq),
                ("!=", PrimOp::Ne),
                ("<=", PrimOp::Le),
                (">=", PrimOp::Ge),
                ("<", PrimOp::Lt),
                (">", PrimOp::Gt),
            ],
            Self::add_expr,
            false,
        )
    }

    fn add_expr(&mut self) -> PResult<SExpr> {
        self.binary(&[("+", PrimOp::Add), ("-", PrimOp::Sub)], Self::mul_expr, true)
    }

    fn mul_expr(&mut self) -> PResult<SExpr> {
        let span = self.span();
        let mut lhs = self.unary_expr()?;
        loop {
            if self.eat_punct("&") {
                let rhs = self.unary_expr()?;
                lhs = self.mk(ExprKind::Prim(PrimOp::BitAnd, vec![lhs, rhs]), span);
            } else if self.is_punct("/") || self.is_punct("%") {
                let div = self.is_punct("/");
                self.bump();
                let k = match self.bump() {
                    Tok::Int(k) if k > 0 => k,
                    _ => return self.err("`/` and `%` take a positive integer constant"),
                };
                let op = if div { PrimOp::Div(k) } else { PrimOp::Mod(k) };
                lhs = self.mk(ExprKind::Prim(op, vec![lhs]), span);
            } else {
                return Ok(lhs);
            }
        }
    }

    fn unary_expr(&mut self) -> PResult<SExpr> {
        let span = self.span();
        if self.eat_punct("!") {
            let e = self.unary_expr()?;
            return Ok(self.mk(ExprKind::Prim(PrimOp::Not, vec![e]), span));
        }
        self.postfix_expr()
    }

    fn postfix_expr(&mut self) -> PResult<SExpr> {
        let mut e = self.atom()?;
        loop {
            let span = self.span();
            if self.eat_punct("(") {
                let args = self.comma_list(")", |p| p.expr())?;
                let arg = self.tuple_of(args, span);
                e = self.mk(ExprKind::App(e, arg), span);
            } else if self.eat_punct("[") {
                let i = self.expr()?;
                self.expect_punct("]")?;
                e = self.mk(ExprKind::Index(e, i), span);
            } else if self.is_punct(".") && matches!(self.peek_at(1), Tok::Ident(_)) {
                self.bump();
                let f = self.ident()?;
                e = self.mk(ExprKind::Field(e, f), span);
            } else if self.eat_punct("::") {
                self.expect_punct("[")?;
                let rs = self.comma_list("]", |p| p.region())?;
                e = self.mk(ExprKind::Inst(e, rs), span);
            } else {
                return Ok(e);
            }
        }
    }

    fn tuple_of(&self, mut items: Vec<SExpr>, span: Span) -> SExpr {
        match items.len() {
            0 => self.mk(ExprKind::Unit, span),
            1 => items.pop().unwrap(),
            _ => {
                let mut acc = items.pop().unwrap();
                while let Some(x) = items.pop() {
                    acc = self.mk(ExprKind::Tuple(x, acc), span);
                }
                acc
            }
        }
    }

    fn call_args(&mut self, n: usize, what: &str) -> PResult<Vec<SExpr>> {
        self.expect_punct("(")?;
        let args = self.comma_list(")", |p| p.expr())?;
        if args.len() != n {
            return self.err(format!("`{what}` takes {n} argument(s), got {}", args.len()));
        }
        Ok(args)
    }

    fn atom(&mut self) -> PResult<SExpr> {
        let span = self.span();
        match self.peek().clone() {
            Tok::BitLit(b, l) => {
                self.bump();
                Ok(self.mk(ExprKind::Bit(b, l), span))
            }
            Tok::NatLit(n, l) => {
                self.bump();
                Ok(self.mk(ExprKind::Nat(n, l), span))
            }
            Tok::Punct("(") => {
                self.bump();
                let items = self.comma_list(")", |p| p.expr())?;
                Ok(self.tuple_of(items, span))
            }
            Tok::Punct("{") => {
                self.bump();
                let mut fs = self.comma_list("}", |p| {
                    let n = p.ident()?;
                    p.expect_punct("=")?;
                    Ok((n, p.expr()?))
                })?;
                fs.sort_by(|a, b| a.0.cmp(&b.0));
                if fs.windows(2).any(|w| w[0].0 == w[1].0) || fs.is_empty() {
                    return Err(ParseError { span, msg: "record needs distinct fields".into() });
                }
                Ok(self.mk(ExprKind::Record(fs), span))
            }
            Tok::Punct("[") => {
                self.bump();
                let es = self.comma_list("]", |p| p.expr())?;
                if es.is_empty() {
                    return Err(ParseError { span, msg: "empty array literal".into() });
                }
                Ok(self.mk(ExprKind::Array(es), span))
            }
            Tok::Ident(s) => match s.as_str() {
                "let" => self.let_expr(),
                "if" => self.if_expr(),
                "fun" => self.fun_expr(),
                "mux" => {
                    self.bump();
                    let mut a = self.call_args(3, "mux")?;
                    let (z, y, x) = (a.pop().unwrap(), a.pop().unwrap(), a.pop().unwrap());
                    Ok(self.mk(ExprKind::Mux(x, y, z), span))
                }
                "xor" => {
                    self.bump();
                    let mut a = self.call_args(2, "xor")?;
                    let (y, x) = (a.pop().unwrap(), a.pop().unwrap());
                    Ok(self.mk(ExprKind::Xor(x, y), span))
                }
                "write" => {
                    self.bump();
                    let mut a = self.call_args(2, "write")?;
                    let (y, x) = (a.pop().unwrap(), a.pop().unwrap());
                    Ok(self.mk(ExprKind::Write(x, y), span))
                }
                "ref" | "read" | "len" => {
                    self.bump();
                    let x = self.call_args(1, &s)?.pop().unwrap();
                    let k = match s.as_str() {
                        "ref" => ExprKind::Ref(x),
                        "read" => ExprKind::Read(x),
                        _ => ExprKind::Len(x),
                    };
                    Ok(self.mk(k, span))
                }
                "flip" | "rnd" => {
                    self.bump();
                    self.expect_punct("^")?;
                    let r = self.region()?;
                    self.expect_punct("(")?;
                    self.expect_punct(")")?;
                    let k = if s == "flip" { ExprKind::Flip(r) } else { ExprKind::Rnd(r) };
                    Ok(self.mk(k, span))
                }
                "castS" | "castP" | "castNU" | "castU" => {
                    self.bump();
                    let op = match s.as_str() {
                        "castS" => CastOp::S,
                        "castP" => CastOp::P,
                        "castNU" => CastOp::NU,
                        _ => CastOp::U,
                    };
                    let x = self.call_args(1, &s)?.pop().unwrap();
                    if x.is_value() {
                        return Ok(self.mk(ExprKind::Cast(op, x), span));
                    }
                    let tmp = self.fresh("c");
                    let v = self.mk(ExprKind::Var(tmp.clone()), span);
                    let cast = self.mk(ExprKind::Cast(op, v), span);
                    Ok(self.mk(ExprKind::Let(tmp, x, cast), span))
                }
                _ => {
                    let x = self.ident()?;
                    Ok(self.mk(ExprKind::Var(x), span))
                }
            },
            _ => self.err(format!("expected an expression, found {}", self.describe())),
        }
    }
}

fn parser(src: &str) -> PResult<Parser> {
    Ok(Parser { toks: lex(src)?, pos: 0, fresh: 0, aliases: HashMap::new() })
}

/// Parses a program: region declarations, optional `width` and type aliases, then a body.
pub fn parse_program(src: &str) -> Result<Program, ParseError> {
    let mut p = parser(src)?;
    if let Some(n) = max_fresh(src) {
        p.fresh = n;
    }
    p.program()
}

/// Parses a program, returning its region poset and body.
pub fn parse(src: &str) -> Result<(RegionPoset, SExpr), ParseError> {
    let p = parse_program(src)?;
    Ok((p.poset, p.expr))
}

pub fn parse_type(src: &str) -> Result<Type, ParseError> {
    let mut p = parser(src)?;
    let t = p.ty()?;
    if *p.peek() != Tok::Eof {
        return p.err("trailing input after type");
    }
    Ok(t)
}

/// Keeps generated names clear of any `__xN` names already present in the source.
fn max_fresh(src: &str) -> Option<usize> {
    src.match_indices("__")
        .filter_map(|(i, _)| {
            let rest = &src[i + 2..];
            let digits: String =
                rest.chars().skip_while(|c| c.is_alphabetic()).take_while(|c| c.is_ascii_digit()).collect();
            digits.parse().ok()
        })
        .max()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lexes_literals() {
        let toks: Vec<Tok> = lex("1S 0P 3nS -1nP 12 x'").unwrap().into_iter().map(|t| t.0).collect();
        assert_eq!(
            toks,
            vec![
                Tok::BitLit(true, Label::S),
                Tok::BitLit(false, Label::P),
                Tok::NatLit(3, Label::S),
                Tok::NatLit(u64::MAX, Label::P),
                Tok::Int(12),
                Tok::Ident("x'".into()),
                Tok::Eof
            ]
        );
    }

    #[test]
    fn parses_headers_and_body() {
        let p = parse_program("region r1 < r2; width 2; let x = flip^r1() in castP(x)").unwrap();
        assert_eq!(p.width, Some(2));
        assert_eq!(p.poset.lt(&Region::named("r1"), &Region::named("r2")), Ok(true));
        assert!(matches!(p.expr.kind(), ExprKind::Let(..)));
    }

    #[test]
    fn cast_of_non_value_is_let_bound() {
        let (_, e) = parse("region r; castP(flip^r())").unwrap();
        match e.kind() {
            ExprKind::Let(x, _, body) => {
                assert!(matches!(body.kind(), ExprKind::Cast(CastOp::P, v) if matches!(v.kind(), ExprKind::Var(y) if y == x)))
            }
            _ => panic!("expected let"),
        }
    }

    #[test]
    fn triple_pattern_nests() {
        let (_, e) = parse("let (a, b, c) = (1S, 0S, 1S) in c").unwrap();
        assert!(matches!(e.kind(), ExprKind::LetTup(a, _, _, inner)
            if &**a == "a" && matches!(inner.kind(), ExprKind::LetTup(..))));
    }

    #[test]
    fn errors_carry_positions() {
        let err = parse("let x = in x").unwrap_err();
        assert_eq!(err.span, Span { line: 1, col: 9 });
    }

    #[test]
    fn type_aliases_substitute_regions() {
        let p = parse_program(
            "region a < b; type blk[R, R2] = {tag: natS^R, data: rnd^R2}; fun f(x : blk[a, b]) . x",
        )
        .unwrap();
        let ExprKind::Fun(d) = p.expr.kind() else { panic!() };
        assert_eq!(
            d.pty,
            Type::Record(vec![
                (sym("data"), Type::Rnd(Region::named("b"))),
                (sym("tag"), Type::Nat(Label::S, Region::named("a"))),
            ])
        );
    }
}
