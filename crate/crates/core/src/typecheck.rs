//! Affine information-flow type checking.
//!
//! The checker threads an environment through each premise left to right. Using an
//! affine variable marks it consumed (`•`); reusing it is an error. The core rules
//! are exact; [`Mode::Ext`] adds naturals, arrays, records, region polymorphism, the
//! non-uniformity casts and a relaxed application rule.

use std::fmt;

use thiserror::Error;

use crate::ast::{
    kind_of, CastOp, ExprKind, FunDef, Kind, Label, PrimOp, Region, RegionError, RegionPoset,
    SExpr, Scheme, Span, Sym, Type,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub struct TypeError {
    pub rule: String,
    pub span: Option<Span>,
    pub detail: String,
}

impl fmt::Display for TypeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.span {
            Some(s) => write!(f, "{} at {s}: {}", self.rule, self.detail),
            None => write!(f, "{}: {}", self.rule, self.detail),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Slot {
    Ty(Type),
    /// Consumed affine variable (`•`).
    Gone,
    /// A recursive function name whose result type is not yet known.
    Opaque,
}

/// Typing context; later entries shadow earlier ones.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TypeEnv {
    entries: Vec<(Sym, Slot)>,
}

impl TypeEnv {
    pub fn new() -> TypeEnv {
        TypeEnv::default()
    }

    pub fn with(mut self, x: &str, t: Type) -> TypeEnv {
        self.entries.push((crate::ast::sym(x), Slot::Ty(t)));
        self
    }

    pub fn get(&self, x: &str) -> Option<&Slot> {
        self.entries.iter().rev().find(|(y, _)| &**y == x).map(|(_, s)| s)
    }

    fn get_mut(&mut self, x: &str) -> Option<&mut Slot> {
        self.entries.iter_mut().rev().find(|(y, _)| &**y == x).map(|(_, s)| s)
    }

    pub fn entries(&self) -> &[(Sym, Slot)] {
        &self.entries
    }

    fn push(&mut self, x: &Sym, s: Slot) {
        self.entries.push((x.clone(), s));
    }

    fn pop(&mut self, n: usize) {
        self.entries.truncate(self.entries.len() - n);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Core,
    Ext,
}

/// Core typing judgment `Γ ⊢ e : τ ; Γ'`.
pub fn typecheck(p: &RegionPoset, env: &TypeEnv, e: &SExpr) -> Result<(Type, TypeEnv), TypeError> {
    check_mode(Mode::Core, p, env, e)
}

pub fn check_mode(
    mode: Mode,
    p: &RegionPoset,
    env: &TypeEnv,
    e: &SExpr,
) -> Result<(Type, TypeEnv), TypeError> {
    let mut c = Checker { mode, poset: p.clone() };
    let mut env = env.clone();
    let t = c.check(&mut env, e)?;
    Ok((t, env))
}

struct Checker {
    mode: Mode,
    poset: RegionPoset,
}

fn err<T>(rule: &str, e: &SExpr, detail: impl Into<String>) -> Result<T, TypeError> {
    Err(TypeError { rule: rule.into(), span: e.span(), detail: detail.into() })
}

fn has_spent(t: &Type) -> bool {
    matches!(t, Type::Record(fs) if fs.iter().any(|(_, t)| *t == Type::Spent))
}

impl Checker {
    fn ext(&self, rule: &str, e: &SExpr) -> Result<(), TypeError> {
        if self.mode == Mode::Core {
            return err(rule, e, "surface extension not allowed in the core calculus");
        }
        Ok(())
    }

    fn region_err(&self, rule: &str, e: &SExpr, r: RegionError) -> TypeError {
        TypeError { rule: rule.into(), span: e.span(), detail: r.to_string() }
    }

    fn lt(&self, rule: &str, e: &SExpr, a: &Region, b: &Region) -> Result<bool, TypeError> {
        self.poset.lt(a, b).map_err(|r| self.region_err(rule, e, r))
    }

    fn join(&self, rule: &str, e: &SExpr, rs: &[&Region]) -> Result<Region, TypeError> {
        let mut acc = Region::Bot;
        for r in rs {
            acc = self.poset.join(&acc, r).map_err(|x| self.region_err(rule, e, x))?;
        }
        Ok(acc)
    }

    fn type_wf(&self, e: &SExpr, t: &Type) -> Result<(), TypeError> {
        let mut bad = None;
        check_regions(t, &mut |r| {
            if !self.poset.contains(r) && bad.is_none() {
                bad = Some(r.clone());
            }
        });
        match bad {
            Some(r) => err("TYPE", e, format!("undeclared region {r} in type annotation")),
            None => Ok(()),
        }
    }

    fn same(&self, actual: &Type, expected: &Type) -> bool {
        match self.mode {
            Mode::Core => actual == expected,
            Mode::Ext => compatible(actual, expected),
        }
    }

    fn check(&mut self, env: &mut TypeEnv, e: &SExpr) -> Result<Type, TypeError> {
        use ExprKind::*;
        match e.kind() {
            Var(x) => match env.get_mut(x) {
                None => err("VAR", e, format!("unbound variable {x}")),
                Some(Slot::Gone) => err("VARA", e, format!("affine variable {x} already consumed")),
                Some(Slot::Opaque) => {
                    err("FUN", e, format!("recursive use of {x} needs a return type annotation"))
                }
                Some(slot @ Slot::Ty(_)) => {
                    let Slot::Ty(t) = slot.clone() else { unreachable!() };
                    if has_spent(&t) {
                        return err("VARA", e, format!("record {x} has consumed fields"));
                    }
                    if kind_of(&t) == Kind::A {
                        *slot = Slot::Gone;
                    }
                    Ok(t)
                }
            },
            Bit(_, l) => Ok(Type::Bit(*l, Region::Bot)),
            Nat(_, l) => {
                self.ext("NAT", e)?;
                Ok(Type::Nat(*l, Region::Bot))
            }
            Unit => {
                self.ext("UNIT", e)?;
                Ok(Type::Unit)
            }
            Flip(r) | Rnd(r) => {
                let rule = if matches!(e.kind(), Flip(_)) { "FLIP" } else { "RND" };
                if rule == "RND" {
                    self.ext(rule, e)?;
                }
                if *r == Region::Bot {
                    return err(rule, e, "region must not be ⊥");
                }
                if !self.poset.contains(r) {
                    return err(rule, e, format!("undeclared region {r}"));
                }
                Ok(if rule == "FLIP" { Type::Flip(r.clone()) } else { Type::Rnd(r.clone()) })
            }
            Cast(op, v) => self.cast(env, e, *op, v),
            If(c, a, b) => {
                let tc = self.check(env, c)?;
                if tc != Type::Bit(Label::P, Region::Bot) {
                    return err("IF", c, format!("guard must have type bitP, found {tc}"));
                }
                let mut ea = env.clone();
                let ta = self.check(&mut ea, a)?;
                let mut eb = env.clone();
                let tb = self.check(&mut eb, b)?;
                let t = match self.mode {
                    Mode::Core if ta == tb => ta,
                    Mode::Ext => match lub(&self.poset, &ta, &tb) {
                        Some(t) => t,
                        None => return err("IF", e, format!("branch types differ: {ta} vs {tb}")),
                    },
                    _ => return err("IF", e, format!("branch types differ: {ta} vs {tb}")),
                };
                *env = self.join_env(e, &ea, &eb)?;
                Ok(t)
            }
            Mux(g, a, b) => {
                let tg = self.check(env, g)?;
                let (l1, r1) = match tg {
                    Type::Bit(l, r) => (l, r),
                    _ => return err("MUX", g, format!("guard must be a bit, found {tg}")),
                };
                let ta = self.check(env, a)?;
                let tb = self.check(env, b)?;
                let t = match (self.mode, &ta, &tb) {
                    (Mode::Core, Type::Bit(..), Type::Bit(..))
                    | (Mode::Core, Type::Flip(_), Type::Flip(_))
                    | (Mode::Ext, _, _) => self.mux_type(e, l1, &r1, &ta, &tb)?,
                    _ => {
                        return err("MUX", e, format!("branches must both be bits or both flips, found {ta} and {tb}"))
                    }
                };
                Ok(Type::prod(t.clone(), t))
            }
            Xor(a, b) => {
                let ta = self.check(env, a)?;
                let tb = self.check(env, b)?;
                match (&ta, &tb) {
                    (Type::Bit(_, r1), Type::Flip(r2)) => {
                        if !self.lt("XOR-FLIP", e, r1, r2)? {
                            return err("XOR-FLIP", e, format!("region {r1} must be strictly below {r2}"));
                        }
                        Ok(Type::Flip(self.join("XOR-FLIP", e, &[r1, r2])?))
                    }
                    (Type::Nat(_, r1), Type::Rnd(r2)) if self.mode == Mode::Ext => {
                        if !self.lt("XOR-FLIP", e, r1, r2)? {
                            return err("XOR-FLIP", e, format!("region {r1} must be strictly below {r2}"));
                        }
                        Ok(Type::Rnd(self.join("XOR-FLIP", e, &[r1, r2])?))
                    }
                    _ => err("XOR-FLIP", e, format!("xor needs a bit and a flip, found {ta} and {tb}")),
                }
            }
            Ref(a) => Ok(Type::Ref(Box::new(self.check(env, a)?))),
            Read(a) => match self.check(env, a)? {
                Type::Ref(t) if kind_of(&t) == Kind::U => Ok(*t),
                Type::Ref(t) => err("READ", e, format!("cannot read affine contents of type {t}")),
                t => err("READ", a, format!("expected a reference, found {t}")),
            },
            Write(a, b) => {
                let ta = self.check(env, a)?;
                let tb = self.check(env, b)?;
                match ta {
                    Type::Ref(t) if self.same(&tb, &t) => Ok(*t),
                    Type::Ref(t) => err("WRITE", b, format!("expected {t}, found {tb}")),
                    t => err("WRITE", a, format!("expected a reference, found {t}")),
                }
            }
            Tuple(a, b) => {
                let ta = self.check(env, a)?;
                let tb = self.check(env, b)?;
                Ok(Type::prod(ta, tb))
            }
            Let(x, a, b) => {
                let ta = self.check(env, a)?;
                env.push(x, Slot::Ty(ta));
                let tb = self.check(env, b)?;
                env.pop(1);
                Ok(tb)
            }
            LetTup(x, y, a, b) => match self.check(env, a)? {
                Type::Prod(t1, t2) => {
                    env.push(x, Slot::Ty(*t1));
                    env.push(y, Slot::Ty(*t2));
                    let tb = self.check(env, b)?;
                    env.pop(2);
                    Ok(tb)
                }
                t => err("LET-TUP", a, format!("expected a pair, found {t}")),
            },
            Fun(d) => self.fun(env, e, d),
            App(f, a) => self.app(env, f, a),
            Inst(f, rs) => {
                self.ext("INST", e)?;
                let Type::Poly(sc) = self.check(env, f)? else {
                    return err("INST", f, "only region-polymorphic functions can be instantiated");
                };
                if rs.len() != sc.rparams.len() {
                    return err(
                        "INST",
                        e,
                        format!("expected {} region arguments, got {}", sc.rparams.len(), rs.len()),
                    );
                }
                for r in rs {
                    if !self.poset.contains(r) {
                        return err("INST", e, format!("undeclared region {r}"));
                    }
                }
                let subst = |r: &Region| -> Region {
                    match r {
                        Region::Named(n) => match sc.rparams.iter().position(|p| p == n) {
                            Some(i) => rs[i].clone(),
                            None => r.clone(),
                        },
                        Region::Bot => Region::Bot,
                    }
                };
                for (a, b) in &sc.constraints {
                    let (ra, rb) = (subst(&Region::Named(a.clone())), subst(&Region::Named(b.clone())));
                    if !self.lt("ConstraintViolation", e, &ra, &rb)? {
                        return err(
                            "ConstraintViolation",
                            e,
                            format!("{a} < {b} requires {ra} ⊏ {rb}, which does not hold"),
                        );
                    }
                }
                Ok(Type::arrow(sc.arg.map_regions(&subst), sc.ret.map_regions(&subst)))
            }
            Prim(op, args) => {
                self.ext("PRIM", e)?;
                let ts = args.iter().map(|a| self.check(env, a)).collect::<Result<Vec<_>, _>>()?;
                self.prim(e, *op, &ts)
            }
            Record(fs) => {
                self.ext("RECORD", e)?;
                let mut out = Vec::new();
                for (n, x) in fs {
                    out.push((n.clone(), self.check(env, x)?));
                }
                Ok(Type::Record(out))
            }
            Field(r, f) => {
                self.ext("FIELD", e)?;
                if let Var(x) = r.kind() {
                    return match env.get_mut(x) {
                        Some(Slot::Ty(Type::Record(fs))) => {
                            let Some(i) = fs.iter().position(|(n, _)| n == f) else {
                                return err("FIELD", e, format!("record {x} has no field {f}"));
                            };
                            let t = fs[i].1.clone();
                            if t == Type::Spent {
                                return err("FIELD", e, format!("field {x}.{f} already consumed"));
                            }
                            if kind_of(&t) == Kind::A {
                                fs[i].1 = Type::Spent;
                            }
                            Ok(t)
                        }
                        _ => {
                            let t = self.check(env, r)?;
                            err("FIELD", e, format!("expected a record, found {t}"))
                        }
                    };
                }
                match self.check(env, r)? {
                    Type::Record(fs) => match fs.into_iter().find(|(n, _)| n == f) {
                        Some((_, t)) => Ok(t),
                        None => err("FIELD", e, format!("no field {f}")),
                    },
                    t => err("FIELD", r, format!("expected a record, found {t}")),
                }
            }
            Array(es) => {
                self.ext("ARRAY", e)?;
                let mut t: Option<Type> = None;
                for x in es {
                    let tx = self.check(env, x)?;
                    t = Some(match t {
                        None => tx,
                        Some(prev) => match lub(&self.poset, &prev, &tx) {
                            Some(j) => j,
                            None => return err("ARRAY", x, format!("element type {tx} differs from {prev}")),
                        },
                    });
                }
                Ok(Type::Array(Box::new(t.unwrap_or(Type::Unit))))
            }
            Index(a, i) => {
                self.ext("INDEX", e)?;
                let ta = self.check(env, a)?;
                let ti = self.check(env, i)?;
                let Type::Array(t) = ta else {
                    return err("INDEX", a, format!("expected an array, found {ta}"));
                };
                if ti != Type::Nat(Label::P, Region::Bot) {
                    return err("NonPublicIndex", i, format!("index must be natP, found {ti}"));
                }
                if kind_of(&t) == Kind::A {
                    return err("READ", e, format!("cannot read affine array contents of type {t}"));
                }
                Ok(*t)
            }
            Assign(a, i, v) => {
                self.ext("ASSIGN", e)?;
                let ta = self.check(env, a)?;
                let ti = self.check(env, i)?;
                let tv = self.check(env, v)?;
                let Type::Array(t) = ta else {
                    return err("ASSIGN", a, format!("expected an array, found {ta}"));
                };
                if ti != Type::Nat(Label::P, Region::Bot) {
                    return err("NonPublicIndex", i, format!("index must be natP, found {ti}"));
                }
                if !compatible(&tv, &t) {
                    return err("WRITE", v, format!("expected {t}, found {tv}"));
                }
                Ok(*t)
            }
            Len(a) => {
                self.ext("LEN", e)?;
                match self.check(env, a)? {
                    Type::Array(_) => Ok(Type::Nat(Label::P, Region::Bot)),
                    t => err("LEN", a, format!("expected an array, found {t}")),
                }
            }
            BitV(..) | FlipV(..) | NatV(..) | RndV(..) | LocV(_) | ArrV(_) | Hidden => {
                err("SOURCE", e, "runtime values cannot appear in source programs")
            }
        }
    }

    fn cast(&mut self, env: &mut TypeEnv, e: &SExpr, op: CastOp, v: &SExpr) -> Result<Type, TypeError> {
        let rule = match op {
            CastOp::S => "CAST-S",
            CastOp::P => "CAST-P",
            CastOp::NU => "CAST-NU",
            CastOp::U => "CAST-U",
        };
        if matches!(op, CastOp::NU | CastOp::U) {
            self.ext(rule, e)?;
        }
        if !v.is_value() {
            return err(rule, v, "cast argument must be a value");
        }
        let t = if op == CastOp::S {
            let mut scratch = env.clone();
            self.check(&mut scratch, v)?
        } else {
            self.check(env, v)?
        };
        let ext = self.mode == Mode::Ext;
        match (op, &t) {
            (CastOp::S, Type::Flip(r)) => Ok(Type::Bit(Label::S, r.clone())),
            (CastOp::S, Type::Rnd(r)) if ext => Ok(Type::Nat(Label::S, r.clone())),
            (CastOp::S, Type::NonUni(inner)) => match &**inner {
                Type::Flip(r) => Ok(Type::Bit(Label::S, r.clone())),
                Type::Rnd(r) => Ok(Type::Nat(Label::S, r.clone())),
                _ => err(rule, v, format!("expected a flip, found {t}")),
            },
            (CastOp::P, Type::Flip(_)) => Ok(Type::Bit(Label::P, Region::Bot)),
            (CastOp::P, Type::Rnd(_)) if ext => Ok(Type::Nat(Label::P, Region::Bot)),
            (CastOp::P, Type::NonUni(_)) => {
                err(rule, v, "a non-uniform value must pass through castU before it is revealed")
            }
            (CastOp::NU, Type::Flip(_) | Type::Rnd(_)) => Ok(Type::NonUni(Box::new(t.clone()))),
            (CastOp::U, Type::NonUni(inner)) => Ok((**inner).clone()),
            (CastOp::U, Type::Flip(_) | Type::Rnd(_)) => Ok(t.clone()),
            _ => err(rule, v, format!("expected a flip, found {t}")),
        }
    }

    fn mux_type(&self, e: &SExpr, l1: Label, r1: &Region, a: &Type, b: &Type) -> Result<Type, TypeError> {
        let flip_order = |r2: &Region, r3: &Region| -> Result<Region, TypeError> {
            if !self.lt("MUX-FLIP", e, r1, r2)? || !self.lt("MUX-FLIP", e, r1, r3)? {
                return err(
                    "MUX-FLIP",
                    e,
                    format!("guard region {r1} must be strictly below branch regions {r2} and {r3}"),
                );
            }
            self.join("MUX-FLIP", e, &[r1, r2, r3])
        };
        match (a, b) {
            (Type::Bit(l2, r2), Type::Bit(l3, r3)) => {
                Ok(Type::Bit(l1.join(*l2).join(*l3), self.join("MUX-BIT", e, &[r1, r2, r3])?))
            }
            (Type::Nat(l2, r2), Type::Nat(l3, r3)) => {
                Ok(Type::Nat(l1.join(*l2).join(*l3), self.join("MUX-BIT", e, &[r1, r2, r3])?))
            }
            (Type::Flip(r2), Type::Flip(r3)) => Ok(Type::Flip(flip_order(r2, r3)?)),
            (Type::Rnd(r2), Type::Rnd(r3)) => Ok(Type::Rnd(flip_order(r2, r3)?)),
            (Type::NonUni(x), Type::NonUni(y)) => match (&**x, &**y) {
                (Type::Flip(r2), Type::Flip(r3)) => Ok(Type::NonUni(Box::new(Type::Flip(
                    self.join("MUX-FLIP", e, &[r1, r2, r3])?,
                )))),
                (Type::Rnd(r2), Type::Rnd(r3)) => Ok(Type::NonUni(Box::new(Type::Rnd(
                    self.join("MUX-FLIP", e, &[r1, r2, r3])?,
                )))),
                _ => err("MUX", e, format!("cannot mux {a} with {b}")),
            },
            (Type::Prod(a1, a2), Type::Prod(b1, b2)) => Ok(Type::prod(
                self.mux_type(e, l1, r1, a1, b1)?,
                self.mux_type(e, l1, r1, a2, b2)?,
            )),
            (Type::Record(fa), Type::Record(fb))
                if fa.len() == fb.len() && fa.iter().zip(fb).all(|(x, y)| x.0 == y.0) =>
            {
                let mut out = Vec::new();
                for ((n, x), (_, y)) in fa.iter().zip(fb) {
                    out.push((n.clone(), self.mux_type(e, l1, r1, x, y)?));
                }
                Ok(Type::Record(out))
            }
            (Type::Unit, Type::Unit) => Ok(Type::Unit),
            _ => err("MUX", e, format!("cannot mux {a} with {b}")),
        }
    }

    fn join_env(&self, e: &SExpr, a: &TypeEnv, b: &TypeEnv) -> Result<TypeEnv, TypeError> {
        let mut out = TypeEnv::new();
        for ((x, sa), (_, sb)) in a.entries.iter().zip(&b.entries) {
            let s = match (sa, sb) {
                (Slot::Gone, _) | (_, Slot::Gone) => Slot::Gone,
                (Slot::Ty(ta), Slot::Ty(tb)) if ta == tb => Slot::Ty(ta.clone()),
                (Slot::Ty(Type::Record(fa)), Slot::Ty(Type::Record(fb)))
                    if fa.len() == fb.len() && fa.iter().zip(fb).all(|(p, q)| p.0 == q.0) =>
                {
                    let mut fs = Vec::new();
                    for ((n, p), (_, q)) in fa.iter().zip(fb) {
                        if p == q || *p == Type::Spent || *q == Type::Spent {
                            fs.push((n.clone(), if p == q { p.clone() } else { Type::Spent }));
                        } else {
                            return err("IF", e, format!("branches disagree on the type of {x}"));
                        }
                    }
                    Slot::Ty(Type::Record(fs))
                }
                (Slot::Opaque, Slot::Opaque) => Slot::Opaque,
                _ => return err("IF", e, format!("branches disagree on the type of {x}")),
            };
            out.entries.push((x.clone(), s));
        }
        Ok(out)
    }

    fn fun(&mut self, env: &mut TypeEnv, e: &SExpr, d: &FunDef<bool>) -> Result<Type, TypeError> {
        let poly = !d.rparams.is_empty();
        if poly {
            self.ext("FUN", e)?;
        }
        let saved = self.poset.clone();
        for r in &d.rparams {
            if self.poset.contains(&Region::Named(r.clone())) {
                return err("FUN", e, format!("region parameter {r} shadows a declared region"));
            }
            self.poset.declare(r);
        }
        for (a, b) in &d.constraints {
            if !d.rparams.contains(a) && !self.poset.contains(&Region::Named(a.clone()))
                || !d.rparams.contains(b) && !self.poset.contains(&Region::Named(b.clone()))
            {
                self.poset = saved;
                return err("FUN", e, format!("constraint {a} < {b} mentions an unknown region"));
            }
            if let Err(x) = self.poset.add_lt(a, b) {
                self.poset = saved;
                return Err(self.region_err("FUN", e, x));
            }
        }
        let result = self.fun_body(env, e, d, poly);
        self.poset = saved;
        result
    }

    fn fun_body(&mut self, env: &mut TypeEnv, e: &SExpr, d: &FunDef<bool>, poly: bool) -> Result<Type, TypeError> {
        self.type_wf(e, &d.pty)?;
        if let Some(r) = &d.ret {
            self.type_wf(e, r)?;
        }
        let wrap = |arg: Type, ret: Type| -> Type {
            if poly {
                Type::Poly(Box::new(Scheme {
                    rparams: d.rparams.clone(),
                    constraints: d.constraints.clone(),
                    arg,
                    ret,
                }))
            } else {
                Type::arrow(arg, ret)
            }
        };
        let self_slot = match &d.ret {
            Some(r) => Slot::Ty(wrap(d.pty.clone(), r.clone())),
            None => Slot::Opaque,
        };
        let mut inner = env.clone();
        inner.push(&d.name, self_slot);
        inner.push(&d.param, Slot::Ty(d.pty.clone()));
        let tb = self.check(&mut inner, &d.body)?;
        if let Some(r) = &d.ret {
            if !self.same(&tb, r) {
                return err("FUN", e, format!("body has type {tb}, annotation says {r}"));
            }
        }
        inner.pop(2);
        for ((x, before), (_, after)) in env.entries.iter().zip(&inner.entries) {
            if before != after {
                return err("FUN", e, format!("function {} captures affine variable {x}", d.name));
            }
        }
        Ok(wrap(d.pty.clone(), d.ret.clone().unwrap_or(tb)))
    }

    fn app(&mut self, env: &mut TypeEnv, f: &SExpr, a: &SExpr) -> Result<Type, TypeError> {
        let tf = self.check(env, f)?;
        let (t1, t2) = match tf {
            Type::Arrow(t1, t2) => (*t1, *t2),
            Type::Poly(_) => return err("APP", f, "region-polymorphic function must be instantiated first"),
            t => return err("APP", f, format!("expected a function, found {t}")),
        };
        // Check tuple arguments component by component so a mismatch names its position.
        let mut parts = Vec::new();
        let mut cur = a;
        let mut expected = &t1;
        while let (ExprKind::Tuple(x, rest), Type::Prod(ex, erest)) = (cur.kind(), expected) {
            parts.push((x.clone(), (**ex).clone()));
            cur = rest;
            expected = erest;
        }
        parts.push((cur.clone(), expected.clone()));
        let mut actual = Vec::new();
        for (x, _) in &parts {
            actual.push(self.check(env, x)?);
        }
        for (i, ((x, ex), ta)) in parts.iter().zip(&actual).enumerate() {
            if !self.same(ta, ex) {
                let which = if parts.len() > 1 { format!("argument {} ({x})", i + 1) } else { format!("argument {x}") };
                return err("APP", x, format!("{which}: expected {ex}, found {ta}"));
            }
        }
        Ok(t2)
    }

    fn prim(&self, e: &SExpr, op: PrimOp, ts: &[Type]) -> Result<Type, TypeError> {
        let bad = || err("PRIM", e, format!("operator {op:?} cannot take {}", show_types(ts)));
        match (op, ts) {
            (PrimOp::Add | PrimOp::Sub | PrimOp::BitAnd, [Type::Nat(l1, r1), Type::Nat(l2, r2)]) => {
                Ok(Type::Nat(l1.join(*l2), self.join("PRIM", e, &[r1, r2])?))
            }
            (PrimOp::Div(_) | PrimOp::Mod(_), [Type::Nat(l, r)]) => Ok(Type::Nat(*l, r.clone())),
            (
                PrimOp::Eq | PrimOp::Ne | PrimOp::Lt | PrimOp::Le | PrimOp::Gt | PrimOp::Ge,
                [Type::Nat(l1, r1), Type::Nat(l2, r2)],
            )
            | (PrimOp::Eq | PrimOp::Ne | PrimOp::And | PrimOp::Or, [Type::Bit(l1, r1), Type::Bit(l2, r2)]) => {
                Ok(Type::Bit(l1.join(*l2), self.join("PRIM", e, &[r1, r2])?))
            }
            (PrimOp::Not, [Type::Bit(l, r)]) => Ok(Type::Bit(*l, r.clone())),
            _ => bad(),
        }
    }
}

fn show_types(ts: &[Type]) -> String {
    ts.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(", ")
}

fn check_regions(t: &Type, f: &mut dyn FnMut(&Region)) {
    match t {
        Type::Bit(_, r) | Type::Nat(_, r) | Type::Flip(r) | Type::Rnd(r) => f(r),
        Type::Ref(x) | Type::Array(x) | Type::NonUni(x) => check_regions(x, f),
        Type::Prod(a, b) | Type::Arrow(a, b) => {
            check_regions(a, f);
            check_regions(b, f);
        }
        Type::Record(fs) => fs.iter().for_each(|(_, x)| check_regions(x, f)),
        Type::Poly(sc) => {
            let mut g = |r: &Region| match r {
                Region::Named(n) if sc.rparams.contains(n) => {}
                _ => f(r),
            };
            check_regions(&sc.arg, &mut g);
            check_regions(&sc.ret, &mut g);
        }
        Type::Unit | Type::Spent => {}
    }
}

/// `actual` may be used where `expected` is required: equal, or data at region ⊥
/// where secret data of the same shape is expected. Secrets at ⊥ depend on no
/// flip, so raising their region only strengthens what they promise.
pub fn compatible(actual: &Type, expected: &Type) -> bool {
    match (actual, expected) {
        _ if actual == expected => true,
        (Type::Bit(Label::P, Region::Bot), Type::Bit(..)) => true,
        (Type::Nat(Label::P, Region::Bot), Type::Nat(..)) => true,
        (Type::Bit(Label::S, Region::Bot), Type::Bit(Label::S, _)) => true,
        (Type::Nat(Label::S, Region::Bot), Type::Nat(Label::S, _)) => true,
        (Type::Prod(a1, a2), Type::Prod(b1, b2)) => compatible(a1, b1) && compatible(a2, b2),
        (Type::Record(fa), Type::Record(fb)) => {
            fa.len() == fb.len() && fa.iter().zip(fb).all(|(x, y)| x.0 == y.0 && compatible(&x.1, &y.1))
        }
        _ => false,
    }
}

/// Least common type of two branches: labels and regions join on bits and naturals.
pub fn lub(p: &RegionPoset, a: &Type, b: &Type) -> Option<Type> {
    match (a, b) {
        _ if a == b => Some(a.clone()),
        (Type::Bit(l1, r1), Type::Bit(l2, r2)) => Some(Type::Bit(l1.join(*l2), p.join(r1, r2).ok()?)),
        (Type::Nat(l1, r1), Type::Nat(l2, r2)) => Some(Type::Nat(l1.join(*l2), p.join(r1, r2).ok()?)),
        (Type::Prod(a1, a2), Type::Prod(b1, b2)) => Some(Type::prod(lub(p, a1, b1)?, lub(p, a2, b2)?)),
        (Type::Record(fa), Type::Record(fb)) if fa.len() == fb.len() => {
            let mut out = Vec::new();
            for ((n, x), (m, y)) in fa.iter().zip(fb) {
                if n != m {
                    return None;
                }
                out.push((n.clone(), lub(p, x, y)?));
            }
            Some(Type::Record(out))
        }
        _ => None,
    }
}
