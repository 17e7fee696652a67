//! Syntax of the calculus and its surface extensions.
//!
//! One expression type serves source programs, runtime terms and adversary
//! observations. Runtime values carry a payload `P`: plain booleans for the
//! standard semantics and coin trees for the mixed semantics.

mod parse;
mod pretty;

use std::collections::HashMap;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use thiserror::Error;

use crate::dist::BitTree;

pub use parse::{parse, parse_program, parse_type, ParseError, Program};
pub use pretty::{pretty, pretty_type};

pub type Sym = Arc<str>;

pub fn sym(s: &str) -> Sym {
    Arc::from(s)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct Span {
    pub line: u32,
    pub col: u32,
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.line, self.col)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Label {
    P,
    S,
}

impl Label {
    pub fn join(self, other: Label) -> Label {
        self.max(other)
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::P => "P",
            Label::S => "S",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Region {
    Bot,
    Named(Sym),
}

impl Region {
    pub fn named(s: &str) -> Region {
        Region::Named(sym(s))
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Region::Bot => f.write_str("⊥"),
            Region::Named(n) => f.write_str(n),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RegionError {
    #[error("undeclared region {0}")]
    Undeclared(Sym),
    #[error("regions {0} and {1} have no join")]
    NoJoin(Region, Region),
    #[error("region order has a cycle through {0}")]
    Cycle(Sym),
}

/// Declared region names with their strict order; `⊥` sits below every name.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RegionPoset {
    names: Vec<Sym>,
    index: HashMap<Sym, usize>,
    /// `below[i][j]` iff `names[i] ⊏ names[j]`, transitively closed.
    below: Vec<Vec<bool>>,
}

impl RegionPoset {
    pub fn new() -> RegionPoset {
        RegionPoset::default()
    }

    pub fn names(&self) -> &[Sym] {
        &self.names
    }

    pub fn declare(&mut self, name: &Sym) -> usize {
        if let Some(&i) = self.index.get(name) {
            return i;
        }
        let i = self.names.len();
        self.names.push(name.clone());
        self.index.insert(name.clone(), i);
        for row in &mut self.below {
            row.push(false);
        }
        self.below.push(vec![false; i + 1]);
        i
    }

    /// Adds `lo ⊏ hi`, declaring both if needed.
    pub fn add_lt(&mut self, lo: &Sym, hi: &Sym) -> Result<(), RegionError> {
        let a = self.declare(lo);
        let b = self.declare(hi);
        let n = self.names.len();
        let mut ups: Vec<usize> = (0..n).filter(|&j| self.below[b][j]).collect();
        ups.push(b);
        let mut downs: Vec<usize> = (0..n).filter(|&i| self.below[i][a]).collect();
        downs.push(a);
        for &i in &downs {
            for &j in &ups {
                self.below[i][j] = true;
            }
        }
        if (0..n).any(|i| self.below[i][i]) {
            return Err(RegionError::Cycle(lo.clone()));
        }
        Ok(())
    }

    pub fn contains(&self, r: &Region) -> bool {
        match r {
            Region::Bot => true,
            Region::Named(n) => self.index.contains_key(n),
        }
    }

    fn idx(&self, r: &Region) -> Result<Option<usize>, RegionError> {
        match r {
            Region::Bot => Ok(None),
            Region::Named(n) => {
                self.index.get(n).copied().map(Some).ok_or_else(|| RegionError::Undeclared(n.clone()))
            }
        }
    }

    /// Strict order `a ⊏ b`.
    pub fn lt(&self, a: &Region, b: &Region) -> Result<bool, RegionError> {
        Ok(match (self.idx(a)?, self.idx(b)?) {
            (None, None) => false,
            (None, Some(_)) => true,
            (Some(_), None) => false,
            (Some(i), Some(j)) => self.below[i][j],
        })
    }

    pub fn leq(&self, a: &Region, b: &Region) -> Result<bool, RegionError> {
        Ok(a == b || self.lt(a, b)?)
    }

    /// Least upper bound; an error when it is not unique.
    pub fn join(&self, a: &Region, b: &Region) -> Result<Region, RegionError> {
        if self.leq(a, b)? {
            return Ok(b.clone());
        }
        if self.leq(b, a)? {
            return Ok(a.clone());
        }
        let uppers: Vec<usize> = (0..self.names.len())
            .filter(|&k| {
                let r = Region::Named(self.names[k].clone());
                self.leq(a, &r).unwrap_or(false) && self.leq(b, &r).unwrap_or(false)
            })
            .collect();
        let least: Vec<usize> = uppers
            .iter()
            .copied()
            .filter(|&k| uppers.iter().all(|&m| m == k || self.below[k][m]))
            .collect();
        match least.as_slice() {
            [k] => Ok(Region::Named(self.names[*k].clone())),
            _ => Err(RegionError::NoJoin(a.clone(), b.clone())),
        }
    }

    /// Join used when tagging runtime values: falls back to the left-most maximal
    /// operand for ill-typed programs whose regions have no join.
    pub fn join_or_left(&self, a: &Region, b: &Region) -> Region {
        match self.join(a, b) {
            Ok(r) => r,
            Err(_) => {
                if self.lt(a, b).unwrap_or(false) {
                    b.clone()
                } else {
                    a.clone()
                }
            }
        }
    }
}

pub fn region_lt(p: &RegionPoset, a: &Region, b: &Region) -> Result<bool, RegionError> {
    p.lt(a, b)
}

pub fn region_join(p: &RegionPoset, a: &Region, b: &Region) -> Result<Region, RegionError> {
    p.join(a, b)
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Type {
    Bit(Label, Region),
    Flip(Region),
    Ref(Box<Type>),
    Prod(Box<Type>, Box<Type>),
    Arrow(Box<Type>, Box<Type>),
    Unit,
    Nat(Label, Region),
    Rnd(Region),
    /// Intentionally non-uniform flip or random natural.
    NonUni(Box<Type>),
    Array(Box<Type>),
    /// Fields sorted by name.
    Record(Vec<(Sym, Type)>),
    Poly(Box<Scheme>),
    /// A record field that has been consumed; only appears in environments.
    Spent,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Scheme {
    pub rparams: Vec<Sym>,
    pub constraints: Vec<(Sym, Sym)>,
    pub arg: Type,
    pub ret: Type,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Kind {
    U,
    A,
}

pub fn kind_of(t: &Type) -> Kind {
    match t {
        Type::Flip(_) | Type::Rnd(_) | Type::NonUni(_) => Kind::A,
        Type::Prod(a, b) => kind_of(a).max(kind_of(b)),
        Type::Record(fs) => fs.iter().map(|(_, t)| kind_of(t)).max().unwrap_or(Kind::U),
        _ => Kind::U,
    }
}

impl Type {
    pub fn prod(a: Type, b: Type) -> Type {
        Type::Prod(Box::new(a), Box::new(b))
    }

    pub fn arrow(a: Type, b: Type) -> Type {
        Type::Arrow(Box::new(a), Box::new(b))
    }

    pub fn map_regions(&self, f: &impl Fn(&Region) -> Region) -> Type {
        match self {
            Type::Bit(l, r) => Type::Bit(*l, f(r)),
            Type::Flip(r) => Type::Flip(f(r)),
            Type::Nat(l, r) => Type::Nat(*l, f(r)),
            Type::Rnd(r) => Type::Rnd(f(r)),
            Type::Ref(t) => Type::Ref(Box::new(t.map_regions(f))),
            Type::NonUni(t) => Type::NonUni(Box::new(t.map_regions(f))),
            Type::Array(t) => Type::Array(Box::new(t.map_regions(f))),
            Type::Prod(a, b) => Type::prod(a.map_regions(f), b.map_regions(f)),
            Type::Arrow(a, b) => Type::arrow(a.map_regions(f), b.map_regions(f)),
            Type::Record(fs) => {
                Type::Record(fs.iter().map(|(n, t)| (n.clone(), t.map_regions(f))).collect())
            }
            Type::Poly(s) => Type::Poly(Box::new(Scheme {
                rparams: s.rparams.clone(),
                constraints: s.constraints.clone(),
                arg: s.arg.map_regions(f),
                ret: s.ret.map_regions(f),
            })),
            Type::Unit | Type::Spent => self.clone(),
        }
    }
}

impl fmt::Display for Type {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&pretty_type(self))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CastOp {
    S,
    P,
    NU,
    U,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PrimOp {
    Add,
    Sub,
    BitAnd,
    Div(u64),
    Mod(u64),
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    And,
    Or,
    Not,
}

/// Runtime payload of bit, flip and natural values.
pub trait Payload: Clone + Eq + Hash + fmt::Debug + Send + Sync + 'static {
    fn lit(b: bool) -> Self;
    /// The value when it is not random.
    fn point(&self) -> Option<bool>;
    fn render(&self) -> String;
}

impl Payload for bool {
    fn lit(b: bool) -> Self {
        b
    }
    fn point(&self) -> Option<bool> {
        Some(*self)
    }
    fn render(&self) -> String {
        if *self { "1".into() } else { "0".into() }
    }
}

impl Payload for BitTree {
    fn lit(b: bool) -> Self {
        BitTree::leaf(b)
    }
    fn point(&self) -> Option<bool> {
        self.as_leaf().copied()
    }
    fn render(&self) -> String {
        render_tree(self)
    }
}

fn render_tree(t: &BitTree) -> String {
    match t.split() {
        None => t.as_leaf().unwrap().render(),
        Some((c, h, l)) => format!("@{c}({} {})", render_tree(h), render_tree(l)),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct FunDef<P: Payload> {
    pub name: Sym,
    pub rparams: Vec<Sym>,
    pub constraints: Vec<(Sym, Sym)>,
    pub param: Sym,
    pub pty: Type,
    pub ret: Option<Type>,
    pub body: Expr<P>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ExprKind<P: Payload> {
    Var(Sym),
    Fun(Arc<FunDef<P>>),
    Bit(bool, Label),
    Nat(u64, Label),
    Unit,
    Flip(Region),
    Rnd(Region),
    Cast(CastOp, Expr<P>),
    Mux(Expr<P>, Expr<P>, Expr<P>),
    Xor(Expr<P>, Expr<P>),
    If(Expr<P>, Expr<P>, Expr<P>),
    Ref(Expr<P>),
    Read(Expr<P>),
    Write(Expr<P>, Expr<P>),
    Tuple(Expr<P>, Expr<P>),
    Let(Sym, Expr<P>, Expr<P>),
    LetTup(Sym, Sym, Expr<P>, Expr<P>),
    App(Expr<P>, Expr<P>),
    Inst(Expr<P>, Vec<Region>),
    Prim(PrimOp, Vec<Expr<P>>),
    Record(Vec<(Sym, Expr<P>)>),
    Field(Expr<P>, Sym),
    Array(Vec<Expr<P>>),
    Index(Expr<P>, Expr<P>),
    Assign(Expr<P>, Expr<P>, Expr<P>),
    Len(Expr<P>),
    // runtime values
    BitV(P, Label, Region),
    /// Flip value with its region tag and uniformity flag (false after castNU).
    FlipV(P, Region, bool),
    /// Little-endian bits.
    NatV(Arc<[P]>, Label, Region),
    RndV(Arc<[P]>, Region, bool),
    LocV(usize),
    ArrV(Arc<[usize]>),
    /// Opaque marker in adversary observations.
    Hidden,
}

const VALUE: u8 = 1;
const PAYLOAD: u8 = 2;
const RUNTIME: u8 = 4;

pub struct ENode<P: Payload> {
    hash: u64,
    fv: u64,
    flags: u8,
    span: Option<Span>,
    kind: ExprKind<P>,
}

/// Shared, immutable expression node with a cached structural hash.
pub struct Expr<P: Payload>(Arc<ENode<P>>);

pub type SExpr = Expr<bool>;
pub type MExpr = Expr<BitTree>;

impl<P: Payload> Clone for Expr<P> {
    fn clone(&self) -> Self {
        Expr(self.0.clone())
    }
}

impl<P: Payload> Hash for Expr<P> {
    fn hash<H: Hasher>(&self, state: &mut H) {
        state.write_u64(self.0.hash)
    }
}

impl<P: Payload> PartialEq for Expr<P> {
    fn eq(&self, other: &Self) -> bool {
        if Arc::ptr_eq(&self.0, &other.0) {
            return true;
        }
        if self.0.hash != other.0.hash {
            return false;
        }
        let key = (self.ptr_id(), other.ptr_id());
        if eq_memo::known(key) {
            return true;
        }
        let r = self.0.kind == other.0.kind;
        if r {
            eq_memo::record(key);
        }
        r
    }
}

impl<P: Payload> Eq for Expr<P> {}

impl<P: Payload> fmt::Debug for Expr<P> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&pretty(self))
    }
}

impl<P: Payload> fmt::Display for Expr<P> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&pretty(self))
    }
}

/// Optional memo of node pairs already known equal, for comparing large
/// structures that share subterms.
pub mod eq_memo {
    use std::cell::RefCell;
    use std::collections::HashSet;

    thread_local! {
        static MEMO: RefCell<Option<HashSet<(usize, usize)>>> = const { RefCell::new(None) };
    }

    pub(crate) fn known(key: (usize, usize)) -> bool {
        MEMO.with(|m| m.borrow().as_ref().is_some_and(|s| s.contains(&key)))
    }

    pub(crate) fn record(key: (usize, usize)) {
        MEMO.with(|m| {
            if let Some(s) = m.borrow_mut().as_mut() {
                s.insert(key);
            }
        })
    }

    /// Runs `f` with pair memoization enabled for expression equality.
    pub fn with<R>(f: impl FnOnce() -> R) -> R {
        let outer = MEMO.with(|m| m.borrow_mut().replace(HashSet::new()));
        let r = f();
        MEMO.with(|m| *m.borrow_mut() = outer);
        r
    }
}

/// Multiplicative hasher for keys that are already well mixed.
#[derive(Default)]
pub struct Fx(u64);

/// Map keyed by node address.
pub type PtrMap<V> = HashMap<usize, V, std::hash::BuildHasherDefault<Fx>>;

impl Fx {
    pub fn new() -> Fx {
        Fx(0)
    }
}

impl Hasher for Fx {
    fn finish(&self) -> u64 {
        self.0
    }
    fn write(&mut self, bytes: &[u8]) {
        for chunk in bytes.chunks(8) {
            let mut buf = [0u8; 8];
            buf[..chunk.len()].copy_from_slice(chunk);
            self.write_u64(u64::from_le_bytes(buf));
        }
    }
    fn write_u64(&mut self, i: u64) {
        self.0 = (self.0.rotate_left(5) ^ i).wrapping_mul(0x51_7c_c1_b7_27_22_0a_95);
    }
    fn write_u8(&mut self, i: u8) {
        self.write_u64(i as u64)
    }
    fn write_usize(&mut self, i: usize) {
        self.write_u64(i as u64)
    }
    fn write_u32(&mut self, i: u32) {
        self.write_u64(i as u64)
    }
}

pub(crate) fn fx<T: Hash + ?Sized>(t: &T) -> u64 {
    let mut h = Fx::new();
    t.hash(&mut h);
    h.finish()
}

fn var_bit(x: &str) -> u64 {
    1u64 << (fx(x) & 63)
}

impl<P: Payload> Expr<P> {
    pub fn new(kind: ExprKind<P>) -> Expr<P> {
        Expr::build(kind, None)
    }

    pub fn at(kind: ExprKind<P>, span: Span) -> Expr<P> {
        Expr::build(kind, Some(span))
    }

    fn build(kind: ExprKind<P>, span: Option<Span>) -> Expr<P> {
        use ExprKind::*;
        let mut h = Fx::new();
        std::mem::discriminant(&kind).hash(&mut h);
        let mut fv = 0u64;
        let mut flags = 0u8;
        let mut children_value = true;
        let child = |e: &Expr<P>, h: &mut Fx, fv: &mut u64, flags: &mut u8, cv: &mut bool| {
            h.write_u64(e.0.hash);
            *fv |= e.0.fv;
            *flags |= e.0.flags & (PAYLOAD | RUNTIME);
            *cv &= e.is_value();
        };
        match &kind {
            Var(x) => {
                x.hash(&mut h);
                fv = var_bit(x);
                flags |= VALUE;
            }
            Fun(d) => {
                d.name.hash(&mut h);
                d.rparams.hash(&mut h);
                d.constraints.hash(&mut h);
                d.param.hash(&mut h);
                d.pty.hash(&mut h);
                d.ret.hash(&mut h);
                child(&d.body, &mut h, &mut fv, &mut flags, &mut children_value);
                flags |= VALUE;
            }
            Bit(b, l) => {
                b.hash(&mut h);
                l.hash(&mut h);
            }
            Nat(n, l) => {
                n.hash(&mut h);
                l.hash(&mut h);
            }
            Unit => flags |= VALUE,
            Flip(r) | Rnd(r) => r.hash(&mut h),
            Cast(op, e) => {
                op.hash(&mut h);
                child(e, &mut h, &mut fv, &mut flags, &mut children_value);
            }
            Ref(e) | Read(e) | Len(e) => child(e, &mut h, &mut fv, &mut flags, &mut children_value),
            Field(e, f) => {
                f.hash(&mut h);
                child(e, &mut h, &mut fv, &mut flags, &mut children_value);
            }
            Mux(a, b, c) | If(a, b, c) | Assign(a, b, c) => {
                for e in [a, b, c] {
                    child(e, &mut h, &mut fv, &mut flags, &mut children_value);
                }
            }
            Xor(a, b) | Write(a, b) | App(a, b) | Index(a, b) => {
                for e in [a, b] {
                    child(e, &mut h, &mut fv, &mut flags, &mut children_value);
                }
            }
            Tuple(a, b) => {
                for e in [a, b] {
                    child(e, &mut h, &mut fv, &mut flags, &mut children_value);
                }
                if children_value {
                    flags |= VALUE;
                }
            }
            Let(x, a, b) => {
                x.hash(&mut h);
                for e in [a, b] {
                    child(e, &mut h, &mut fv, &mut flags, &mut children_value);
                }
            }
            LetTup(x, y, a, b) => {
                x.hash(&mut h);
                y.hash(&mut h);
                for e in [a, b] {
                    child(e, &mut h, &mut fv, &mut flags, &mut children_value);
                }
            }
            Inst(e, rs) => {
                rs.hash(&mut h);
                child(e, &mut h, &mut fv, &mut flags, &mut children_value);
            }
            Prim(op, es) => {
                op.hash(&mut h);
                for e in es {
                    child(e, &mut h, &mut fv, &mut flags, &mut children_value);
                }
            }
            Array(es) => {
                for e in es {
                    child(e, &mut h, &mut fv, &mut flags, &mut children_value);
                }
            }
            Record(fs) => {
                for (n, e) in fs {
                    n.hash(&mut h);
                    child(e, &mut h, &mut fv, &mut flags, &mut children_value);
                }
                if children_value {
                    flags |= VALUE;
                }
            }
            BitV(p, l, r) => {
                p.hash(&mut h);
                l.hash(&mut h);
                r.hash(&mut h);
                flags |= VALUE | PAYLOAD | RUNTIME;
            }
            FlipV(p, r, u) => {
                p.hash(&mut h);
                r.hash(&mut h);
                u.hash(&mut h);
                flags |= VALUE | PAYLOAD | RUNTIME;
            }
            NatV(ps, l, r) => {
                ps.hash(&mut h);
                l.hash(&mut h);
                r.hash(&mut h);
                flags |= VALUE | PAYLOAD | RUNTIME;
            }
            RndV(ps, r, u) => {
                ps.hash(&mut h);
                r.hash(&mut h);
                u.hash(&mut h);
                flags |= VALUE | PAYLOAD | RUNTIME;
            }
            LocV(i) => {
                i.hash(&mut h);
                flags |= VALUE | RUNTIME;
            }
            ArrV(ls) => {
                ls.hash(&mut h);
                flags |= VALUE | RUNTIME;
            }
            Hidden => flags |= VALUE | RUNTIME,
        }
        Expr(Arc::new(ENode { hash: h.finish(), fv, flags, span, kind }))
    }

    pub fn kind(&self) -> &ExprKind<P> {
        &self.0.kind
    }

    pub fn span(&self) -> Option<Span> {
        self.0.span
    }

    pub fn hash_code(&self) -> u64 {
        self.0.hash
    }

    pub fn ptr_id(&self) -> usize {
        Arc::as_ptr(&self.0) as *const () as usize
    }

    pub fn ptr_eq(&self, other: &Expr<P>) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }

    /// Syntactic value (variables count, as in the typing rules).
    pub fn is_value(&self) -> bool {
        self.0.flags & VALUE != 0
    }

    /// Contains a runtime bit, flip or natural payload.
    pub fn has_payload(&self) -> bool {
        self.0.flags & PAYLOAD != 0
    }

    /// Free of runtime-only forms.
    pub fn is_source(&self) -> bool {
        self.0.flags & RUNTIME == 0
    }

    /// May mention `x` freely (over-approximation).
    pub fn may_mention(&self, x: &str) -> bool {
        self.0.fv & var_bit(x) != 0
    }

    /// Rebuilds this node with a new kind, keeping its span.
    pub fn with_kind(&self, kind: ExprKind<P>) -> Expr<P> {
        Expr::build(kind, self.0.span)
    }

    // convenience constructors
    pub fn var(x: &str) -> Expr<P> {
        Expr::new(ExprKind::Var(sym(x)))
    }
    pub fn bit(b: bool, l: Label) -> Expr<P> {
        Expr::new(ExprKind::Bit(b, l))
    }
    pub fn flip(r: Region) -> Expr<P> {
        Expr::new(ExprKind::Flip(r))
    }
    pub fn cast(op: CastOp, e: Expr<P>) -> Expr<P> {
        Expr::new(ExprKind::Cast(op, e))
    }
    pub fn tuple(a: Expr<P>, b: Expr<P>) -> Expr<P> {
        Expr::new(ExprKind::Tuple(a, b))
    }
    pub fn let_(x: &str, a: Expr<P>, b: Expr<P>) -> Expr<P> {
        Expr::new(ExprKind::Let(sym(x), a, b))
    }
    pub fn let_tup(x: &str, y: &str, a: Expr<P>, b: Expr<P>) -> Expr<P> {
        Expr::new(ExprKind::LetTup(sym(x), sym(y), a, b))
    }
    pub fn mux(a: Expr<P>, b: Expr<P>, c: Expr<P>) -> Expr<P> {
        Expr::new(ExprKind::Mux(a, b, c))
    }
    pub fn bitv(p: P, l: Label, r: Region) -> Expr<P> {
        Expr::new(ExprKind::BitV(p, l, r))
    }
    pub fn flipv(p: P, r: Region) -> Expr<P> {
        Expr::new(ExprKind::FlipV(p, r, true))
    }
    pub fn locv(i: usize) -> Expr<P> {
        Expr::new(ExprKind::LocV(i))
    }
    pub fn hidden() -> Expr<P> {
        Expr::new(ExprKind::Hidden)
    }

    /// Capture-free substitution of a closed value for `x`.
    pub fn subst(&self, x: &str, v: &Expr<P>) -> Expr<P> {
        if !self.may_mention(x) {
            return self.clone();
        }
        use ExprKind::*;
        let s = |e: &Expr<P>| e.subst(x, v);
        let k = match self.kind() {
            Var(y) => {
                return if &**y == x { v.clone() } else { self.clone() };
            }
            Fun(d) => {
                if &*d.name == x || &*d.param == x {
                    return self.clone();
                }
                let body = s(&d.body);
                if body.ptr_eq(&d.body) {
                    return self.clone();
                }
                Fun(Arc::new(FunDef { body, ..(**d).clone() }))
            }
            Let(y, a, b) => {
                let b2 = if &**y == x { b.clone() } else { s(b) };
                Let(y.clone(), s(a), b2)
            }
            LetTup(y, z, a, b) => {
                let b2 = if &**y == x || &**z == x { b.clone() } else { s(b) };
                LetTup(y.clone(), z.clone(), s(a), b2)
            }
            _ => return self.map_children(&mut |e| e.subst(x, v)),
        };
        self.with_kind(k)
    }

    /// Applies `f` to every immediate subexpression (function bodies included),
    /// sharing the node when nothing changes.
    pub fn map_children(&self, f: &mut impl FnMut(&Expr<P>) -> Expr<P>) -> Expr<P> {
        use ExprKind::*;
        let mut changed = false;
        let mut g = |e: &Expr<P>| {
            let r = f(e);
            if !r.ptr_eq(e) {
                changed = true;
            }
            r
        };
        let k = match self.kind() {
            Fun(d) => Fun(Arc::new(FunDef { body: g(&d.body), ..(**d).clone() })),
            Cast(op, e) => Cast(*op, g(e)),
            Mux(a, b, c) => Mux(g(a), g(b), g(c)),
            Xor(a, b) => Xor(g(a), g(b)),
            If(a, b, c) => If(g(a), g(b), g(c)),
            Ref(e) => Ref(g(e)),
            Read(e) => Read(g(e)),
            Write(a, b) => Write(g(a), g(b)),
            Tuple(a, b) => Tuple(g(a), g(b)),
            Let(x, a, b) => Let(x.clone(), g(a), g(b)),
            LetTup(x, y, a, b) => LetTup(x.clone(), y.clone(), g(a), g(b)),
            App(a, b) => App(g(a), g(b)),
            Inst(e, rs) => Inst(g(e), rs.clone()),
            Prim(op, es) => Prim(*op, es.iter().map(&mut g).collect()),
            Record(fs) => Record(fs.iter().map(|(n, e)| (n.clone(), g(e))).collect()),
            Field(e, n) => Field(g(e), n.clone()),
            Array(es) => Array(es.iter().map(&mut g).collect()),
            Index(a, b) => Index(g(a), g(b)),
            Assign(a, b, c) => Assign(g(a), g(b), g(c)),
            Len(e) => Len(g(e)),
            _ => return self.clone(),
        };
        if changed {
            self.with_kind(k)
        } else {
            self.clone()
        }
    }

    /// Renames regions in flip/rnd annotations, type annotations and instantiations.
    pub fn map_regions(&self, f: &impl Fn(&Region) -> Region) -> Expr<P> {
        use ExprKind::*;
        let k = match self.kind() {
            Flip(r) => Flip(f(r)),
            Rnd(r) => Rnd(f(r)),
            Inst(e, rs) => Inst(e.map_regions(f), rs.iter().map(f).collect()),
            Fun(d) => Fun(Arc::new(FunDef {
                pty: d.pty.map_regions(f),
                ret: d.ret.as_ref().map(|t| t.map_regions(f)),
                body: d.body.map_regions(f),
                ..(**d).clone()
            })),
            _ => return self.map_children(&mut |e| e.map_regions(f)),
        };
        self.with_kind(k)
    }

    /// Converts payloads, rebuilding every node that carries one.
    pub fn convert<Q: Payload>(&self, f: &mut impl FnMut(&P) -> Q) -> Expr<Q> {
        self.convert_memo(f, &mut PtrMap::default(), &mut PtrMap::default())
    }

    /// Converts payloads with `f`, sharing converted nodes by address. Nodes
    /// without payload convert the same way for every `f` and go to `plain`,
    /// which callers may keep across conversions of the same source.
    pub fn convert_memo<Q: Payload>(
        &self,
        f: &mut impl FnMut(&P) -> Q,
        memo: &mut PtrMap<Expr<Q>>,
        plain: &mut PtrMap<Expr<Q>>,
    ) -> Expr<Q> {
        let cached = if self.has_payload() { memo.get(&self.ptr_id()) } else { plain.get(&self.ptr_id()) };
        if let Some(e) = cached {
            return e.clone();
        }
        use ExprKind::*;
        let mut c = |e: &Expr<P>| e.convert_memo(f, memo, plain);
        let k: ExprKind<Q> = match self.kind() {
            Var(x) => Var(x.clone()),
            Fun(d) => {
                let body = c(&d.body);
                Fun(Arc::new(FunDef {
                    name: d.name.clone(),
                    rparams: d.rparams.clone(),
                    constraints: d.constraints.clone(),
                    param: d.param.clone(),
                    pty: d.pty.clone(),
                    ret: d.ret.clone(),
                    body,
                }))
            }
            Bit(b, l) => Bit(*b, *l),
            Nat(n, l) => Nat(*n, *l),
            Unit => Unit,
            Flip(r) => Flip(r.clone()),
            Rnd(r) => Rnd(r.clone()),
            Cast(op, e) => Cast(*op, c(e)),
            Mux(a, b, d) => Mux(c(a), c(b), c(d)),
            Xor(a, b) => Xor(c(a), c(b)),
            If(a, b, d) => If(c(a), c(b), c(d)),
            Ref(e) => Ref(c(e)),
            Read(e) => Read(c(e)),
            Write(a, b) => Write(c(a), c(b)),
            Tuple(a, b) => Tuple(c(a), c(b)),
            Let(x, a, b) => Let(x.clone(), c(a), c(b)),
            LetTup(x, y, a, b) => LetTup(x.clone(), y.clone(), c(a), c(b)),
            App(a, b) => App(c(a), c(b)),
            Inst(e, rs) => Inst(c(e), rs.clone()),
            Prim(op, es) => Prim(*op, es.iter().map(&mut c).collect()),
            Record(fs) => Record(fs.iter().map(|(n, e)| (n.clone(), c(e))).collect()),
            Field(e, n) => Field(c(e), n.clone()),
            Array(es) => Array(es.iter().map(&mut c).collect()),
            Index(a, b) => Index(c(a), c(b)),
            Assign(a, b, d) => Assign(c(a), c(b), c(d)),
            Len(e) => Len(c(e)),
            BitV(p, l, r) => BitV(f(p), *l, r.clone()),
            FlipV(p, r, u) => FlipV(f(p), r.clone(), *u),
            NatV(ps, l, r) => NatV(ps.iter().map(&mut *f).collect(), *l, r.clone()),
            RndV(ps, r, u) => RndV(ps.iter().map(&mut *f).collect(), r.clone(), *u),
            LocV(i) => LocV(*i),
            ArrV(ls) => ArrV(ls.clone()),
            Hidden => Hidden,
        };
        let out = Expr::build(k, self.span());
        if self.has_payload() {
            memo.insert(self.ptr_id(), out.clone());
        } else {
            plain.insert(self.ptr_id(), out.clone());
        }
        out
    }

    /// Whether the expression is in the core calculus (no surface extensions).
    pub fn is_core(&self) -> bool {
        use ExprKind::*;
        let here = match self.kind() {
            Nat(..) | Unit | Rnd(_) | Inst(..) | Prim(..) | Record(_) | Field(..) | Array(_)
            | Index(..) | Assign(..) | Len(_) | NatV(..) | RndV(..) | ArrV(_) => false,
            Cast(CastOp::NU | CastOp::U, _) => false,
            Fun(d) => d.rparams.is_empty() && d.body.is_core(),
            _ => true,
        };
        if !here {
            return false;
        }
        let mut ok = true;
        self.map_children(&mut |e| {
            ok &= e.is_core();
            e.clone()
        });
        ok
    }
}

pub fn nat_bits<P: Payload>(n: u64, width: u32) -> Arc<[P]> {
    (0..width).map(|i| P::lit((n >> i) & 1 == 1)).collect()
}

/// Reads a natural from point payloads.
pub fn nat_value<P: Payload>(bits: &[P]) -> Option<u64> {
    let mut n = 0u64;
    for (i, b) in bits.iter().enumerate() {
        if b.point()? {
            n |= 1 << i;
        }
    }
    Some(n)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn poset(edges: &[(&str, &str)]) -> RegionPoset {
        let mut p = RegionPoset::new();
        for (a, b) in edges {
            p.add_lt(&sym(a), &sym(b)).unwrap();
        }
        p
    }

    #[test]
    fn region_order_and_join() {
        let p = poset(&[("r1", "r2"), ("r2", "r3")]);
        let (r1, r2, r3) = (Region::named("r1"), Region::named("r2"), Region::named("r3"));
        assert_eq!(p.lt(&r1, &r3), Ok(true));
        assert_eq!(p.lt(&r3, &r1), Ok(false));
        assert_eq!(p.lt(&Region::Bot, &r1), Ok(true));
        assert_eq!(p.lt(&r1, &r1), Ok(false));
        assert_eq!(p.join(&r1, &r3), Ok(r3.clone()));
        assert_eq!(p.join(&Region::Bot, &r2), Ok(r2));
        assert_eq!(p.lt(&r1, &Region::named("zz")), Err(RegionError::Undeclared(sym("zz"))));
    }

    #[test]
    fn incomparable_regions() {
        let p = poset(&[("a", "c"), ("b", "c"), ("a", "d"), ("b", "d")]);
        let (a, b) = (Region::named("a"), Region::named("b"));
        assert!(matches!(p.join(&a, &b), Err(RegionError::NoJoin(..))));
        let q = poset(&[("a", "c"), ("b", "c")]);
        assert_eq!(q.join(&a, &b), Ok(Region::named("c")));
    }

    #[test]
    fn cycles_rejected() {
        let mut p = poset(&[("a", "b")]);
        assert!(p.add_lt(&sym("b"), &sym("a")).is_err());
    }

    #[test]
    fn kinds() {
        let r = Region::named("r");
        assert_eq!(kind_of(&Type::Flip(r.clone())), Kind::A);
        assert_eq!(kind_of(&Type::Bit(Label::S, r.clone())), Kind::U);
        assert_eq!(kind_of(&Type::prod(Type::Bit(Label::S, r.clone()), Type::Flip(r))), Kind::A);
    }

    #[test]
    fn substitution_respects_shadowing() {
        let e: SExpr = Expr::let_("x", Expr::var("x"), Expr::var("x"));
        let v = Expr::bitv(true, Label::P, Region::Bot);
        let r = e.subst("x", &v);
        assert_eq!(r, Expr::let_("x", v.clone(), Expr::var("x")));
    }

    #[test]
    fn structural_equality_ignores_spans() {
        let a: SExpr = Expr::at(ExprKind::Var(sym("x")), Span { line: 1, col: 1 });
        let b: SExpr = Expr::at(ExprKind::Var(sym("x")), Span { line: 9, col: 3 });
        assert_eq!(a, b);
        assert_eq!(a.hash_code(), b.hash_code());
    }
}
