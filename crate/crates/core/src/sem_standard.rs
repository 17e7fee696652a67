//! Small-step semantics with stores and traces, run under the intensional monad ℐ
//! or the denotational monad 𝒟.
//!
//! The step function is shared with the mixed semantics: it is generic over the
//! payload carried by bit and flip values. A step either produces one successor or
//! asks the driver to sample some coin trees and build the successor from the bits.

use std::collections::HashMap;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use thiserror::Error;

use crate::ast::{
    nat_bits, nat_value, CastOp, Expr, ExprKind, FunDef, Label, Payload, PrimOp, Program, Region,
    RegionPoset, SExpr,
};
use crate::dist::{coin_tree, ilift, imap, isequence, try_ibind, BitTree, Coin, DMap, Dyadic, ITree};

pub const DEFAULT_WIDTH: u32 = 4;
pub const DEFAULT_MAX_COINS: u32 = 24;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SemError {
    #[error("stuck: {0}")]
    Stuck(String),
    #[error("if guard is not a point distribution: {0}")]
    NonPointGuard(String),
    #[error("coin budget exceeded: some world draws more than {cap} coins (set OBLIV_MAX_COINS to raise)")]
    CoinBudget { cap: u32 },
}

fn stuck<T, P: Payload>(e: &Expr<P>, why: &str) -> Result<T, SemError> {
    let mut s = e.to_string();
    if s.len() > 160 {
        let mut cut = 157;
        while !s.is_char_boundary(cut) {
            cut -= 1;
        }
        s.truncate(cut);
        s.push_str("...");
    }
    Err(SemError::Stuck(format!("{why}: {s}")))
}

/// Payload operations the semantics needs.
pub trait Sem: Payload {
    /// Payloads for freshly drawn coins, or `None` when the draw must be sampled.
    fn fresh(coins: &[Coin]) -> Option<Vec<Self>>;
    /// The coin tree when the payload is not a point.
    fn random(&self) -> Option<BitTree>;
    fn lift(args: &[&Self], f: &dyn Fn(&[bool]) -> bool) -> Self;
}

impl Sem for bool {
    fn fresh(_: &[Coin]) -> Option<Vec<bool>> {
        None
    }
    fn random(&self) -> Option<BitTree> {
        None
    }
    fn lift(args: &[&bool], f: &dyn Fn(&[bool]) -> bool) -> bool {
        let v: Vec<bool> = args.iter().map(|b| **b).collect();
        f(&v)
    }
}

impl Sem for BitTree {
    fn fresh(coins: &[Coin]) -> Option<Vec<BitTree>> {
        Some(coins.iter().map(|c| coin_tree(*c)).collect())
    }
    fn random(&self) -> Option<BitTree> {
        if self.as_leaf().is_some() {
            None
        } else {
            Some(self.clone())
        }
    }
    fn lift(args: &[&BitTree], f: &dyn Fn(&[bool]) -> bool) -> BitTree {
        ilift(args, &|v: &[bool]| f(v))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum GuardMode {
    /// A random `if` guard is an error.
    #[default]
    Checked,
    /// A random `if` guard is sampled.
    Permissive,
}

/// Evaluation parameters shared by every step of a run.
#[derive(Clone, Debug)]
pub struct Machine {
    pub poset: RegionPoset,
    pub width: u32,
    pub guard: GuardMode,
    pub max_coins: u32,
}

impl Machine {
    pub fn new(poset: RegionPoset, width: u32) -> Machine {
        assert!((1..=64).contains(&width), "natural width must be 1..=64");
        Machine { poset, width, guard: GuardMode::Checked, max_coins: max_coins_from_env() }
    }

    pub fn for_program(p: &Program) -> Machine {
        Machine::new(p.poset.clone(), p.width.unwrap_or(DEFAULT_WIDTH))
    }

    pub fn permissive(mut self) -> Machine {
        self.guard = GuardMode::Permissive;
        self
    }

    fn rjoin(&self, rs: &[&Region]) -> Region {
        let mut acc = Region::Bot;
        for r in rs {
            acc = self.poset.join_or_left(&acc, r);
        }
        acc
    }

    fn mask(&self) -> u64 {
        if self.width == 64 {
            u64::MAX
        } else {
            (1u64 << self.width) - 1
        }
    }
}

/// `OBLIV_MAX_COINS`, or the default cap of 24.
pub fn max_coins_from_env() -> u32 {
    std::env::var("OBLIV_MAX_COINS").ok().and_then(|s| s.parse().ok()).unwrap_or(DEFAULT_MAX_COINS)
}

/// Dense store: location `i` is the `i`-th allocation.
#[derive(Clone)]
pub struct Store<P: Payload> {
    cells: Arc<Vec<Expr<P>>>,
    hash: u64,
}

impl<P: Payload> Store<P> {
    pub fn new() -> Store<P> {
        Store::from_cells(Vec::new())
    }

    pub fn from_cells(cells: Vec<Expr<P>>) -> Store<P> {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for c in &cells {
            h.write_u64(c.hash_code());
        }
        Store { cells: Arc::new(cells), hash: h.finish() }
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<&Expr<P>> {
        self.cells.get(i)
    }

    pub fn cells(&self) -> &[Expr<P>] {
        &self.cells
    }

    /// Allocates at the least unused location.
    pub fn alloc(&self, v: Expr<P>) -> (Store<P>, usize) {
        let mut cells = (*self.cells).clone();
        cells.push(v);
        let i = cells.len() - 1;
        (Store::from_cells(cells), i)
    }

    pub fn set(&self, i: usize, v: Expr<P>) -> Store<P> {
        let mut cells = (*self.cells).clone();
        cells[i] = v;
        Store::from_cells(cells)
    }

    pub fn map(&self, f: &mut impl FnMut(&Expr<P>) -> Expr<P>) -> Store<P> {
        Store::from_cells(self.cells.iter().map(f).collect())
    }
}

impl<P: Payload> Default for Store<P> {
    fn default() -> Self {
        Store::new()
    }
}

impl<P: Payload> PartialEq for Store<P> {
    fn eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.cells, &other.cells) || (self.hash == other.hash && self.cells == other.cells)
    }
}

impl<P: Payload> Eq for Store<P> {}

impl<P: Payload> Hash for Store<P> {
    fn hash<H: Hasher>(&self, state: &mut H) {
        state.write_u64(self.hash)
    }
}

impl<P: Payload> fmt::Display for Store<P> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("{")?;
        for (i, c) in self.cells.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{i} ↦ {c}")?;
        }
        f.write_str("}")
    }
}

impl<P: Payload> fmt::Debug for Store<P> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Config<P: Payload> {
    pub store: Store<P>,
    pub expr: Expr<P>,
}

pub type SConfig = Config<bool>;

impl<P: Payload> Config<P> {
    pub fn new(store: Store<P>, expr: Expr<P>) -> Config<P> {
        Config { store, expr }
    }
}

impl Config<bool> {
    /// `(∅, e)` for a source expression.
    pub fn initial(e: &SExpr) -> SConfig {
        Config::new(Store::new(), e.clone())
    }
}

impl<P: Payload> fmt::Display for Config<P> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ⊢ {}", self.store, self.expr)
    }
}

impl<P: Payload> fmt::Debug for Config<P> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

/// Non-empty trace of configurations, shared persistently between worlds.
pub struct Trace<P: Payload>(Arc<TNode<P>>);

struct TNode<P: Payload> {
    prev: Option<Trace<P>>,
    last: Config<P>,
    len: usize,
    hash: u64,
    coins: u32,
}

impl<P: Payload> Drop for TNode<P> {
    fn drop(&mut self) {
        // Unlink iteratively so long traces do not overflow the stack.
        let mut next = self.prev.take();
        while let Some(t) = next {
            match Arc::try_unwrap(t.0) {
                Ok(mut node) => next = node.prev.take(),
                Err(_) => break,
            }
        }
    }
}

impl<P: Payload> Clone for Trace<P> {
    fn clone(&self) -> Self {
        Trace(self.0.clone())
    }
}

impl<P: Payload> Trace<P> {
    pub fn single(c: Config<P>) -> Trace<P> {
        let hash = mix(0x7ace, fx_config(&c));
        Trace(Arc::new(TNode { prev: None, last: c, len: 1, hash, coins: 0 }))
    }

    pub fn push(&self, c: Config<P>, fresh: u32) -> Trace<P> {
        let hash = mix(self.0.hash, fx_config(&c));
        Trace(Arc::new(TNode {
            prev: Some(self.clone()),
            last: c,
            len: self.0.len + 1,
            hash,
            coins: self.0.coins + fresh,
        }))
    }

    pub fn last(&self) -> &Config<P> {
        &self.0.last
    }

    pub fn len(&self) -> usize {
        self.0.len
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Coins drawn along this trace.
    pub fn coins(&self) -> u32 {
        self.0.coins
    }

    /// Configurations, first to last.
    pub fn configs(&self) -> Vec<&Config<P>> {
        let mut out = Vec::with_capacity(self.len());
        let mut cur = Some(self);
        while let Some(t) = cur {
            out.push(&t.0.last);
            cur = t.0.prev.as_ref();
        }
        out.reverse();
        out
    }

    pub fn from_configs(cs: impl IntoIterator<Item = Config<P>>) -> Option<Trace<P>> {
        let mut it = cs.into_iter();
        let mut t = Trace::single(it.next()?);
        for c in it {
            t = t.push(c, 0);
        }
        Some(t)
    }

    pub fn map(&self, f: &mut impl FnMut(&Config<P>) -> Config<P>) -> Trace<P> {
        Trace::from_configs(self.configs().into_iter().map(f)).unwrap()
    }
}

fn mix(a: u64, b: u64) -> u64 {
    (a.rotate_left(7) ^ b).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

fn fx_config<P: Payload>(c: &Config<P>) -> u64 {
    mix(c.store.hash, c.expr.hash_code())
}

impl<P: Payload> PartialEq for Trace<P> {
    fn eq(&self, other: &Self) -> bool {
        let (mut a, mut b) = (self, other);
        loop {
            if Arc::ptr_eq(&a.0, &b.0) {
                return true;
            }
            if a.0.hash != b.0.hash || a.0.len != b.0.len || a.0.last != b.0.last {
                return false;
            }
            match (&a.0.prev, &b.0.prev) {
                (Some(x), Some(y)) => {
                    a = x;
                    b = y;
                }
                (None, None) => return true,
                _ => return false,
            }
        }
    }
}

impl<P: Payload> Eq for Trace<P> {}

impl<P: Payload> Hash for Trace<P> {
    fn hash<H: Hasher>(&self, state: &mut H) {
        state.write_u64(self.0.hash)
    }
}

impl<P: Payload> fmt::Display for Trace<P> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, c) in self.configs().into_iter().enumerate() {
            writeln!(f, "{i:>4}: {c}")?;
        }
        Ok(())
    }
}

impl<P: Payload> fmt::Debug for Trace<P> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Trace[{} configs, last {}]", self.len(), self.last())
    }
}

/// Why a step samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Why {
    /// A fresh coin in the standard semantics.
    Fresh,
    /// `castP` of a random value.
    Reveal,
    /// `if` on a random guard (permissive mode only).
    Guard,
}

type Build<T> = Box<dyn Fn(&[bool]) -> T>;

pub enum Out<P: Payload> {
    Det(Config<P>),
    Sample { why: Why, sources: Vec<BitTree>, build: Build<Config<P>> },
}

pub struct Stepped<P: Payload> {
    /// Fresh coins drawn by this step.
    pub fresh: u32,
    pub out: Out<P>,
}

enum Inner<P: Payload> {
    Det(Store<P>, Expr<P>),
    Sample { why: Why, sources: Vec<BitTree>, build: Build<(Store<P>, Expr<P>)> },
}

/// Children in evaluation-context position, left to right.
fn eval_children<P: Payload>(e: &Expr<P>) -> Vec<&Expr<P>> {
    use ExprKind::*;
    match e.kind() {
        Cast(_, a) | Ref(a) | Read(a) | Len(a) | Field(a, _) | Inst(a, _) => vec![a],
        If(a, _, _) | Let(_, a, _) | LetTup(_, _, a, _) => vec![a],
        Mux(a, b, c) | Assign(a, b, c) => vec![a, b, c],
        Xor(a, b) | Write(a, b) | Tuple(a, b) | App(a, b) | Index(a, b) => vec![a, b],
        Prim(_, es) | Array(es) => es.iter().collect(),
        Record(fs) => fs.iter().map(|(_, e)| e).collect(),
        _ => vec![],
    }
}

/// The subterm the next step contracts, or `None` for a value.
pub fn redex<P: Payload>(e: &Expr<P>) -> Option<&Expr<P>> {
    if e.is_value() {
        return None;
    }
    match eval_children(e).into_iter().find(|c| !c.is_value()) {
        Some(c) => redex(c),
        None => Some(e),
    }
}

fn replace_child<P: Payload>(e: &Expr<P>, i: usize, c: Expr<P>) -> Expr<P> {
    use ExprKind::*;
    let k = match e.kind() {
        Cast(op, _) => Cast(*op, c),
        Ref(_) => Ref(c),
        Read(_) => Read(c),
        Len(_) => Len(c),
        Field(_, f) => Field(c, f.clone()),
        Inst(_, rs) => Inst(c, rs.clone()),
        If(_, b, d) => If(c, b.clone(), d.clone()),
        Let(x, _, b) => Let(x.clone(), c, b.clone()),
        LetTup(x, y, _, b) => LetTup(x.clone(), y.clone(), c, b.clone()),
        Mux(a, b, d) => {
            let mut v = [a.clone(), b.clone(), d.clone()];
            v[i] = c;
            let [a, b, d] = v;
            Mux(a, b, d)
        }
        Assign(a, b, d) => {
            let mut v = [a.clone(), b.clone(), d.clone()];
            v[i] = c;
            let [a, b, d] = v;
            Assign(a, b, d)
        }
        Xor(a, b) | Write(a, b) | Tuple(a, b) | App(a, b) | Index(a, b) => {
            let (a, b) = if i == 0 { (c, b.clone()) } else { (a.clone(), c) };
            match e.kind() {
                Xor(..) => Xor(a, b),
                Write(..) => Write(a, b),
                Tuple(..) => Tuple(a, b),
                App(..) => App(a, b),
                _ => Index(a, b),
            }
        }
        Prim(op, es) => {
            let mut es = es.clone();
            es[i] = c;
            Prim(*op, es)
        }
        Array(es) => {
            let mut es = es.clone();
            es[i] = c;
            Array(es)
        }
        Record(fs) => {
            let mut fs = fs.clone();
            fs[i].1 = c;
            Record(fs)
        }
        _ => unreachable!("no evaluation position"),
    };
    e.with_kind(k)
}

impl Machine {
    /// One step of configuration `c`; `n` names the coin slot of this step.
    pub fn step<P: Sem>(&self, n: u32, c: &Config<P>) -> Result<Stepped<P>, SemError> {
        let mut fresh = 0;
        let inner = self.step_expr(n, &c.store, &c.expr, &mut fresh)?;
        let out = match inner {
            Inner::Det(s, e) => Out::Det(Config::new(s, e)),
            Inner::Sample { why, sources, build } => Out::Sample {
                why,
                sources,
                build: Box::new(move |bits| {
                    let (s, e) = build(bits);
                    Config::new(s, e)
                }),
            },
        };
        Ok(Stepped { fresh, out })
    }

    fn step_expr<P: Sem>(&self, n: u32, s: &Store<P>, e: &Expr<P>, fresh: &mut u32) -> Result<Inner<P>, SemError> {
        if let ExprKind::Var(x) = e.kind() {
            return stuck(e, &format!("free variable {x}"));
        }
        if e.is_value() {
            return Ok(Inner::Det(s.clone(), e.clone()));
        }
        let pos = eval_children(e).iter().position(|c| !c.is_value());
        if let Some(i) = pos {
            let child = eval_children(e)[i].clone();
            return Ok(match self.step_expr(n, s, &child, fresh)? {
                Inner::Det(s2, c2) => Inner::Det(s2, replace_child(e, i, c2)),
                Inner::Sample { why, sources, build } => {
                    let parent = e.clone();
                    Inner::Sample {
                        why,
                        sources,
                        build: Box::new(move |bits| {
                            let (s2, c2) = build(bits);
                            (s2, replace_child(&parent, i, c2))
                        }),
                    }
                }
            });
        }
        self.contract(n, s, e, fresh)
    }

    fn contract<P: Sem>(&self, n: u32, s: &Store<P>, e: &Expr<P>, fresh: &mut u32) -> Result<Inner<P>, SemError> {
        use ExprKind::*;
        let det = |x: Expr<P>| Ok(Inner::Det(s.clone(), x));
        match e.kind() {
            Bit(b, l) => det(Expr::new(BitV(P::lit(*b), *l, Region::Bot))),
            Nat(v, l) => det(Expr::new(NatV(nat_bits(*v & self.mask(), self.width), *l, Region::Bot))),
            Flip(r) | Rnd(r) => {
                let is_flip = matches!(e.kind(), Flip(_));
                let lanes = if is_flip { 1 } else { self.width };
                let coins: Vec<Coin> = (0..lanes).map(|l| Coin::new(n, l as u16)).collect();
                *fresh += lanes;
                let r = r.clone();
                let make = move |ps: Vec<P>| -> Expr<P> {
                    if is_flip {
                        Expr::new(FlipV(ps.into_iter().next().unwrap(), r.clone(), true))
                    } else {
                        Expr::new(RndV(ps.into(), r.clone(), true))
                    }
                };
                match P::fresh(&coins) {
                    Some(ps) => det(make(ps)),
                    None => {
                        let s = s.clone();
                        Ok(Inner::Sample {
                            why: Why::Fresh,
                            sources: coins.iter().map(|c| coin_tree(*c)).collect(),
                            build: Box::new(move |bits| (s.clone(), make(bits.iter().map(|b| P::lit(*b)).collect()))),
                        })
                    }
                }
            }
            Cast(op, v) => self.cast(s, e, *op, v),
            Mux(g, a, b) => match g.kind() {
                BitV(pg, lg, rg) => {
                    let (x, y) = self.mux_vals(e, pg, *lg, rg, a, b)?;
                    det(Expr::tuple(x, y))
                }
                _ => stuck(e, "mux guard is not a bit"),
            },
            If(g, a, b) => match g.kind() {
                BitV(p, _, _) => match p.point() {
                    Some(true) => det(a.clone()),
                    Some(false) => det(b.clone()),
                    None => {
                        if self.guard == GuardMode::Checked {
                            return Err(SemError::NonPointGuard(g.to_string()));
                        }
                        let (s, a, b) = (s.clone(), a.clone(), b.clone());
                        Ok(Inner::Sample {
                            why: Why::Guard,
                            sources: vec![p.random().unwrap()],
                            build: Box::new(move |bits| (s.clone(), if bits[0] { a.clone() } else { b.clone() })),
                        })
                    }
                },
                _ => stuck(e, "if guard is not a bit"),
            },
            Xor(a, b) => match (a.kind(), b.kind()) {
                (BitV(pa, _, ra), FlipV(pb, rb, u)) => {
                    det(Expr::new(FlipV(P::lift(&[pa, pb], &|v| v[0] ^ v[1]), self.rjoin(&[ra, rb]), *u)))
                }
                (NatV(pa, _, ra), RndV(pb, rb, u)) if pa.len() == pb.len() => {
                    let lanes = pa.iter().zip(pb.iter()).map(|(x, y)| P::lift(&[x, y], &|v| v[0] ^ v[1])).collect();
                    det(Expr::new(RndV(lanes, self.rjoin(&[ra, rb]), *u)))
                }
                _ => stuck(e, "xor needs a bit and a flip"),
            },
            Ref(v) => {
                let (s2, i) = s.alloc(v.clone());
                Ok(Inner::Det(s2, Expr::locv(i)))
            }
            Read(l) => match l.kind() {
                LocV(i) => match s.get(*i) {
                    Some(v) => det(v.clone()),
                    None => stuck(e, "dangling location"),
                },
                _ => stuck(e, "read of a non-location"),
            },
            Write(l, v) => match l.kind() {
                LocV(i) => match s.get(*i) {
                    Some(old) => Ok(Inner::Det(s.set(*i, v.clone()), old.clone())),
                    None => stuck(e, "dangling location"),
                },
                _ => stuck(e, "write to a non-location"),
            },
            Let(x, v, b) => det(b.subst(x, v)),
            LetTup(x, y, v, b) => match v.kind() {
                Tuple(v1, v2) => det(b.subst(y, v2).subst(x, v1)),
                _ => stuck(e, "let-tuple of a non-pair"),
            },
            App(f, v) => match f.kind() {
                Fun(d) if d.rparams.is_empty() => det(d.body.subst(&d.param, v).subst(&d.name, f)),
                Fun(_) => stuck(e, "region-polymorphic function applied without instantiation"),
                _ => stuck(e, "application of a non-function"),
            },
            Inst(f, rs) => match f.kind() {
                Fun(d) if d.rparams.len() == rs.len() => {
                    let sigma = |r: &Region| match r {
                        Region::Named(x) => match d.rparams.iter().position(|p| p == x) {
                            Some(i) => rs[i].clone(),
                            None => r.clone(),
                        },
                        Region::Bot => Region::Bot,
                    };
                    let body = d.body.map_regions(&sigma).subst(&d.name, f);
                    det(Expr::new(Fun(Arc::new(FunDef {
                        name: d.name.clone(),
                        rparams: vec![],
                        constraints: vec![],
                        param: d.param.clone(),
                        pty: d.pty.map_regions(&sigma),
                        ret: d.ret.as_ref().map(|t| t.map_regions(&sigma)),
                        body,
                    }))))
                }
                _ => stuck(e, "bad region instantiation"),
            },
            Prim(op, args) => det(self.prim(e, *op, args)?),
            Field(r, f) => match r.kind() {
                Record(fs) => match fs.iter().find(|(n, _)| n == f) {
                    Some((_, v)) => det(v.clone()),
                    None => stuck(e, "missing record field"),
                },
                _ => stuck(e, "field of a non-record"),
            },
            Array(vs) => {
                let mut st = s.clone();
                let mut locs = Vec::with_capacity(vs.len());
                for v in vs {
                    let (s2, i) = st.alloc(v.clone());
                    st = s2;
                    locs.push(i);
                }
                Ok(Inner::Det(st, Expr::new(ArrV(locs.into()))))
            }
            Index(a, i) => {
                let loc = self.cell(e, a, i)?;
                det(s.get(loc).cloned().unwrap())
            }
            Assign(a, i, v) => {
                let loc = self.cell(e, a, i)?;
                let old = s.get(loc).cloned().unwrap();
                Ok(Inner::Det(s.set(loc, v.clone()), old))
            }
            Len(a) => match a.kind() {
                ArrV(ls) => det(Expr::new(NatV(
                    nat_bits(ls.len() as u64 & self.mask(), self.width),
                    Label::P,
                    Region::Bot,
                ))),
                _ => stuck(e, "len of a non-array"),
            },
            _ => stuck(e, "no rule applies"),
        }
    }

    fn cell<P: Sem>(&self, e: &Expr<P>, a: &Expr<P>, i: &Expr<P>) -> Result<usize, SemError> {
        match (a.kind(), i.kind()) {
            (ExprKind::ArrV(ls), ExprKind::NatV(ps, _, _)) => match nat_value(ps) {
                Some(k) if (k as usize) < ls.len() => Ok(ls[k as usize]),
                Some(_) => stuck(e, "array index out of range"),
                None => stuck(e, "array index is not a point value"),
            },
            _ => stuck(e, "indexing needs an array and a natural"),
        }
    }

    fn cast<P: Sem>(&self, s: &Store<P>, e: &Expr<P>, op: CastOp, v: &Expr<P>) -> Result<Inner<P>, SemError> {
        use ExprKind::*;
        let det = |x: ExprKind<P>| Ok(Inner::Det(s.clone(), Expr::new(x)));
        match (op, v.kind()) {
            (CastOp::S, FlipV(p, r, _)) => det(BitV(p.clone(), Label::S, r.clone())),
            (CastOp::S, RndV(ps, r, _)) => det(NatV(ps.clone(), Label::S, r.clone())),
            (CastOp::NU, FlipV(p, r, _)) => det(FlipV(p.clone(), r.clone(), false)),
            (CastOp::NU, RndV(ps, r, _)) => det(RndV(ps.clone(), r.clone(), false)),
            (CastOp::U, FlipV(p, r, _)) => det(FlipV(p.clone(), r.clone(), true)),
            (CastOp::U, RndV(ps, r, _)) => det(RndV(ps.clone(), r.clone(), true)),
            (CastOp::P, FlipV(..) | RndV(..)) => {
                let lanes: Vec<P> = match v.kind() {
                    FlipV(p2, ..) => vec![p2.clone()],
                    RndV(ps, ..) => ps.to_vec(),
                    _ => unreachable!(),
                };
                let is_flip = matches!(v.kind(), FlipV(..));
                if lanes.iter().all(|l| l.point().is_some()) {
                    return det(if is_flip {
                        BitV(lanes[0].clone(), Label::P, Region::Bot)
                    } else {
                        NatV(lanes.into(), Label::P, Region::Bot)
                    });
                }
                let sources: Vec<BitTree> = lanes
                    .iter()
                    .map(|l| l.random().unwrap_or_else(|| ITree::leaf(l.point().unwrap())))
                    .collect();
                let s = s.clone();
                Ok(Inner::Sample {
                    why: Why::Reveal,
                    sources,
                    build: Box::new(move |bits| {
                        let k = if is_flip {
                            BitV(P::lit(bits[0]), Label::P, Region::Bot)
                        } else {
                            NatV(bits.iter().map(|b| P::lit(*b)).collect(), Label::P, Region::Bot)
                        };
                        (s.clone(), Expr::new(k))
                    }),
                })
            }
            _ => stuck(e, "cast of a non-flip"),
        }
    }

    /// Componentwise `mux`, returning the ordered and the swapped result.
    fn mux_vals<P: Sem>(
        &self,
        e: &Expr<P>,
        g: &P,
        lg: Label,
        rg: &Region,
        a: &Expr<P>,
        b: &Expr<P>,
    ) -> Result<(Expr<P>, Expr<P>), SemError> {
        use ExprKind::*;
        let ord = |x: &P, y: &P| P::lift(&[g, x, y], &|v| if v[0] { v[1] } else { v[2] });
        let swp = |x: &P, y: &P| P::lift(&[g, x, y], &|v| if v[0] { v[2] } else { v[1] });
        Ok(match (a.kind(), b.kind()) {
            (BitV(pa, la, ra), BitV(pb, lb, rb)) => {
                let (l, r) = (lg.join(*la).join(*lb), self.rjoin(&[rg, ra, rb]));
                (
                    Expr::new(BitV(ord(pa, pb), l, r.clone())),
                    Expr::new(BitV(swp(pa, pb), l, r)),
                )
            }
            (FlipV(pa, ra, ua), FlipV(pb, rb, ub)) => {
                let (r, u) = (self.rjoin(&[rg, ra, rb]), *ua && *ub);
                (
                    Expr::new(FlipV(ord(pa, pb), r.clone(), u)),
                    Expr::new(FlipV(swp(pa, pb), r, u)),
                )
            }
            (NatV(pa, la, ra), NatV(pb, lb, rb)) if pa.len() == pb.len() => {
                let (l, r) = (lg.join(*la).join(*lb), self.rjoin(&[rg, ra, rb]));
                let x = pa.iter().zip(pb.iter()).map(|(p, q)| ord(p, q)).collect();
                let y = pa.iter().zip(pb.iter()).map(|(p, q)| swp(p, q)).collect();
                (Expr::new(NatV(x, l, r.clone())), Expr::new(NatV(y, l, r)))
            }
            (RndV(pa, ra, ua), RndV(pb, rb, ub)) if pa.len() == pb.len() => {
                let (r, u) = (self.rjoin(&[rg, ra, rb]), *ua && *ub);
                let x = pa.iter().zip(pb.iter()).map(|(p, q)| ord(p, q)).collect();
                let y = pa.iter().zip(pb.iter()).map(|(p, q)| swp(p, q)).collect();
                (Expr::new(RndV(x, r.clone(), u)), Expr::new(RndV(y, r, u)))
            }
            (Tuple(a1, a2), Tuple(b1, b2)) => {
                let (x1, y1) = self.mux_vals(e, g, lg, rg, a1, b1)?;
                let (x2, y2) = self.mux_vals(e, g, lg, rg, a2, b2)?;
                (Expr::tuple(x1, x2), Expr::tuple(y1, y2))
            }
            (Record(fa), Record(fb)) if fa.len() == fb.len() && fa.iter().zip(fb).all(|(x, y)| x.0 == y.0) => {
                let mut xs = Vec::new();
                let mut ys = Vec::new();
                for ((n, p), (_, q)) in fa.iter().zip(fb) {
                    let (x, y) = self.mux_vals(e, g, lg, rg, p, q)?;
                    xs.push((n.clone(), x));
                    ys.push((n.clone(), y));
                }
                (Expr::new(Record(xs)), Expr::new(Record(ys)))
            }
            (Unit, Unit) => (a.clone(), b.clone()),
            _ => return stuck(e, "mux branches have different shapes"),
        })
    }

    fn prim<P: Sem>(&self, e: &Expr<P>, op: PrimOp, args: &[Expr<P>]) -> Result<Expr<P>, SemError> {
        use ExprKind::*;
        let w = self.width as usize;
        let mask = self.mask();
        let decode = |v: &[bool]| v.iter().enumerate().fold(0u64, |n, (i, b)| n | ((*b as u64) << i));
        match (op, args) {
            (PrimOp::Not, [x]) => match x.kind() {
                BitV(p, l, r) => Ok(Expr::new(BitV(P::lift(&[p], &|v| !v[0]), *l, r.clone()))),
                _ => stuck(e, "! of a non-bit"),
            },
            (PrimOp::And | PrimOp::Or, [x, y]) | (PrimOp::Eq | PrimOp::Ne, [x, y])
                if matches!((x.kind(), y.kind()), (BitV(..), BitV(..))) =>
            {
                let (BitV(p, l1, r1), BitV(q, l2, r2)) = (x.kind(), y.kind()) else { unreachable!() };
                let f: &dyn Fn(&[bool]) -> bool = match op {
                    PrimOp::And => &|v| v[0] && v[1],
                    PrimOp::Or => &|v| v[0] || v[1],
                    PrimOp::Eq => &|v| v[0] == v[1],
                    _ => &|v| v[0] != v[1],
                };
                Ok(Expr::new(BitV(P::lift(&[p, q], f), l1.join(*l2), self.rjoin(&[r1, r2]))))
            }
            (PrimOp::Div(k) | PrimOp::Mod(k), [x]) => match x.kind() {
                NatV(ps, l, r) if k > 0 => {
                    let args: Vec<&P> = ps.iter().collect();
                    let lanes = (0..w)
                        .map(|i| {
                            P::lift(&args, &|v| {
                                let n = decode(v);
                                let m = if let PrimOp::Div(_) = op { n / k } else { n % k };
                                (m >> i) & 1 == 1
                            })
                        })
                        .collect();
                    Ok(Expr::new(NatV(lanes, *l, r.clone())))
                }
                _ => stuck(e, "division of a non-natural"),
            },
            (_, [x, y]) => match (x.kind(), y.kind()) {
                (NatV(pa, l1, r1), NatV(pb, l2, r2)) if pa.len() == w && pb.len() == w => {
                    let args: Vec<&P> = pa.iter().chain(pb.iter()).collect();
                    let split = |v: &[bool]| (decode(&v[..w]), decode(&v[w..]));
                    let (l, r) = (l1.join(*l2), self.rjoin(&[r1, r2]));
                    let arith = |f: fn(u64, u64) -> u64| -> Expr<P> {
                        let lanes = (0..w)
                            .map(|i| {
                                P::lift(&args, &|v| {
                                    let (a, b) = split(v);
                                    (f(a, b) & mask) >> i & 1 == 1
                                })
                            })
                            .collect();
                        Expr::new(NatV(lanes, l, r.clone()))
                    };
                    let cmp = |f: fn(u64, u64) -> bool| -> Expr<P> {
                        let p = P::lift(&args, &|v| {
                            let (a, b) = split(v);
                            f(a, b)
                        });
                        Expr::new(BitV(p, l, r.clone()))
                    };
                    Ok(match op {
                        PrimOp::Add => arith(|a, b| a.wrapping_add(b)),
                        PrimOp::Sub => arith(|a, b| a.wrapping_sub(b)),
                        PrimOp::BitAnd => arith(|a, b| a & b),
                        PrimOp::Eq => cmp(|a, b| a == b),
                        PrimOp::Ne => cmp(|a, b| a != b),
                        PrimOp::Lt => cmp(|a, b| a < b),
                        PrimOp::Le => cmp(|a, b| a <= b),
                        PrimOp::Gt => cmp(|a, b| a > b),
                        PrimOp::Ge => cmp(|a, b| a >= b),
                        _ => return stuck(e, "operator does not apply to naturals"),
                    })
                }
                _ => stuck(e, "operator arguments have the wrong shape"),
            },
            _ => stuck(e, "operator arity"),
        }
    }
}

/// A run under ℐ: a tree of traces advanced one step at a time.
pub struct IRun<P: Sem> {
    pub machine: Machine,
    pub tree: ITree<Trace<P>>,
    /// Steps taken so far; the next step uses coin slot `steps`.
    pub steps: u32,
}

/// A sampling event seen while advancing a run: the trace before the step, why
/// it sampled and the sampled trees.
pub struct Event<'a, P: Payload> {
    pub trace: &'a Trace<P>,
    pub why: Why,
    pub sources: &'a [BitTree],
}

impl<P: Sem> IRun<P> {
    pub fn new(machine: Machine, c: Config<P>) -> IRun<P> {
        IRun { machine, tree: ITree::leaf(Trace::single(c)), steps: 0 }
    }

    pub fn advance(&mut self) -> Result<(), SemError> {
        self.advance_with(&mut |_| Ok(()))
    }

    /// Takes one step in every world, reporting each sampling step to `hook`.
    pub fn advance_with(
        &mut self,
        hook: &mut dyn FnMut(Event<'_, P>) -> Result<(), SemError>,
    ) -> Result<(), SemError> {
        let n = self.steps;
        let m = &self.machine;
        let cap = m.max_coins;
        let next = try_ibind(&self.tree, |t: &Trace<P>| -> Result<ITree<Trace<P>>, SemError> {
            let st = m.step(n, t.last())?;
            if t.coins() + st.fresh > cap {
                return Err(SemError::CoinBudget { cap });
            }
            Ok(match st.out {
                Out::Det(c) => {
                    if c == *t.last() {
                        ITree::leaf(t.push(t.last().clone(), 0))
                    } else {
                        ITree::leaf(t.push(c, st.fresh))
                    }
                }
                Out::Sample { why, sources, build } => {
                    hook(Event { trace: t, why, sources: &sources })?;
                    imap(&isequence(&sources), |bits| t.push(build(bits), st.fresh))
                }
            })
        })?;
        self.tree = next;
        self.steps += 1;
        Ok(())
    }

    pub fn run(machine: Machine, c: Config<P>, n: u32) -> Result<IRun<P>, SemError> {
        let mut r = IRun::new(machine, c);
        for _ in 0..n {
            r.advance()?;
        }
        Ok(r)
    }
}

/// `step_ℐ(n, ζ)`.
pub fn step_i<P: Sem>(m: &Machine, n: u32, c: &Config<P>) -> Result<ITree<Config<P>>, SemError> {
    Ok(match m.step(n, c)?.out {
        Out::Det(c) => ITree::leaf(c),
        Out::Sample { sources, build, .. } => imap(&isequence(&sources), |bits| build(bits)),
    })
}

/// `nstep_ℐ(N, ζ)`.
pub fn nstep_i<P: Sem>(m: &Machine, n: u32, c: &Config<P>) -> Result<ITree<Trace<P>>, SemError> {
    Ok(IRun::run(m.clone(), c.clone(), n)?.tree)
}

/// `step_𝒟(n, ζ)`. The slot `n` is ignored by `bit`, as in the monad itself.
pub fn step_d(m: &Machine, n: u32, c: &SConfig) -> Result<DMap<SConfig>, SemError> {
    Ok(match m.step(n, c)?.out {
        Out::Det(c) => crate::dist::dreturn(c),
        Out::Sample { sources, build, .. } => sample_d(&sources, |bits| build(bits)),
    })
}

fn sample_d<T: Eq + Hash + Clone>(sources: &[BitTree], build: impl Fn(&[bool]) -> T) -> DMap<T> {
    let joint = isequence(sources).outcomes();
    DMap::from_entries(joint.into_iter().map(|(bits, m)| (build(&bits), m)).collect()).normalize()
}

/// `nstep_𝒟(N, ζ)`.
pub fn nstep_d(m: &Machine, n: u32, c: &SConfig) -> Result<DMap<Trace<bool>>, SemError> {
    let cap = m.max_coins;
    let mut d: DMap<Trace<bool>> = crate::dist::dreturn(Trace::single(c.clone()));
    for i in 0..n {
        let mut out: HashMap<Trace<bool>, Dyadic> = HashMap::new();
        let mut order = Vec::new();
        for (t, mass) in d.entries() {
            let st = m.step(i, t.last())?;
            if t.coins() + st.fresh > cap {
                return Err(SemError::CoinBudget { cap });
            }
            let next: Vec<(Trace<bool>, Dyadic)> = match st.out {
                Out::Det(c) => vec![(t.push(c, st.fresh), Dyadic::ONE)],
                Out::Sample { sources, build, .. } => {
                    sample_d(&sources, |bits| t.push(build(bits), st.fresh)).into_entries()
                }
            };
            for (t2, m2) in next {
                let w = m2 * *mass;
                match out.get_mut(&t2) {
                    Some(x) => *x += w,
                    None => {
                        order.push(t2.clone());
                        out.insert(t2, w);
                    }
                }
            }
        }
        d = DMap::from_entries(order.into_iter().map(|t| {
            let w = out[&t];
            (t, w)
        }).collect());
    }
    Ok(d)
}

/// Whether the trace ended in a value.
pub fn terminated<P: Payload>(t: &Trace<P>) -> bool {
    let e = &t.last().expr;
    e.is_value() && !matches!(e.kind(), ExprKind::Var(_))
}
