//! What the adversary sees, and the low-equivalence relation between terms.
//!
//! `obs` keeps code structure, public values and locations and hides secret
//! values and flips behind `•`. Locations stay visible: every address used to
//! access memory is part of the adversary's view.

use std::collections::HashMap;
use std::hash::Hash;

use crate::ast::{Expr, ExprKind, Label, Payload, SExpr};
use crate::dist::{imap, isequence, DMap, Dyadic, ITree};
use crate::sem_standard::{redex, Config, Machine, Out, SConfig, SemError, Store, Trace};

fn hides<P: Payload>(e: &Expr<P>) -> bool {
    use ExprKind::*;
    matches!(
        e.kind(),
        BitV(_, Label::S, _) | NatV(_, Label::S, _) | FlipV(..) | RndV(..) | Bit(_, Label::S) | Nat(_, Label::S)
    )
}

/// `obs(e)`.
pub fn obs(e: &SExpr) -> SExpr {
    if hides(e) {
        return Expr::hidden();
    }
    e.map_children(&mut obs)
}

pub fn obs_store(s: &Store<bool>) -> Store<bool> {
    s.map(&mut obs)
}

pub fn obs_config(c: &SConfig) -> SConfig {
    Config::new(obs_store(&c.store), obs(&c.expr))
}

pub fn obs_trace(t: &Trace<bool>) -> Trace<bool> {
    t.map(&mut obs_config)
}

/// `do t ← t̂; return(obs(t))` in ℐ.
pub fn obs_lift_i(d: &ITree<Trace<bool>>) -> ITree<Trace<bool>> {
    imap(d, obs_trace)
}

/// `do t ← t̃; return(obs(t))` in 𝒟.
pub fn obs_lift_d(d: &DMap<Trace<bool>>) -> DMap<Trace<bool>> {
    d.map(obs_trace).normalize()
}

/// `obs` memoized on node identity. Keys are kept alive in the memo so their
/// addresses cannot be reused while it exists.
fn obs_shared(e: &SExpr, memo: &mut HashMap<usize, (SExpr, SExpr)>) -> SExpr {
    if let Some((_, o)) = memo.get(&e.ptr_id()) {
        return o.clone();
    }
    let o = if hides(e) { Expr::hidden() } else { e.map_children(&mut |c| obs_shared(c, memo)) };
    memo.insert(e.ptr_id(), (e.clone(), o.clone()));
    o
}

fn obs_config_shared(c: &SConfig, memo: &mut HashMap<usize, (SExpr, SExpr)>) -> SConfig {
    Config::new(c.store.map(&mut |v| obs_shared(v, memo)), obs_shared(&c.expr, memo))
}

/// `obs_lift(nstep_𝒟(N, ζ))` and the most coins any world drew.
///
/// Steps pairs of an observed prefix and the current configuration. Worlds
/// that look alike share one observed history, so memory grows with the number
/// of distinct observations instead of worlds times trace length.
pub fn obs_nstep_d(m: &Machine, n: u32, c: &SConfig) -> Result<(DMap<Trace<bool>>, u32), SemError> {
    type Key = (Trace<bool>, SConfig);
    let o0 = Trace::single(obs_config(c));
    let mut cur: Vec<(Key, Dyadic, u32)> = vec![((o0, c.clone()), Dyadic::ONE, 0)];
    for i in 0..n {
        let mut memo = HashMap::new();
        let mut nodes: HashMap<Key, Trace<bool>> = HashMap::new();
        let mut index: HashMap<Key, usize> = HashMap::new();
        let mut next: Vec<(Key, Dyadic, u32)> = Vec::new();
        for ((o, c), w, k) in &cur {
            let st = m.step(i, c)?;
            let coins = k + st.fresh;
            if coins > m.max_coins {
                return Err(SemError::CoinBudget { cap: m.max_coins });
            }
            let succ: Vec<(SConfig, Dyadic)> = match st.out {
                Out::Det(c2) => vec![(c2, Dyadic::ONE)],
                Out::Sample { sources, build, .. } => {
                    isequence(&sources).outcomes().into_iter().map(|(bits, p)| (build(&bits), p)).collect()
                }
            };
            for (c2, p) in succ {
                let oc = obs_config_shared(&c2, &mut memo);
                let o2 = nodes.entry((o.clone(), oc.clone())).or_insert_with(|| o.push(oc, 0)).clone();
                let key = (o2, c2);
                match index.get(&key) {
                    Some(&j) => {
                        next[j].1 += p * *w;
                        next[j].2 = next[j].2.max(coins);
                    }
                    None => {
                        index.insert(key.clone(), next.len());
                        next.push((key, p * *w, coins));
                    }
                }
            }
        }
        cur = next;
    }
    let coins = cur.iter().map(|(_, _, k)| *k).max().unwrap_or(0);
    let d = DMap::from_entries(cur.into_iter().map(|((o, _), w, _)| (o, w)).collect()).normalize();
    Ok((d, coins))
}

/// The memory addresses touched along a trace, in order: one entry per step
/// whose redex allocates, reads, writes or indexes a store location.
pub fn accesses<P: Payload>(t: &Trace<P>) -> Vec<usize> {
    use ExprKind::*;
    let cs = t.configs();
    let mut out = Vec::new();
    for c in &cs[..cs.len().saturating_sub(1)] {
        let Some(r) = redex(&c.expr) else { continue };
        match r.kind() {
            Ref(_) => out.push(c.store.len()),
            Read(l) | Write(l, _) => {
                if let LocV(i) = l.kind() {
                    out.push(*i);
                }
            }
            Index(a, i) | Assign(a, i, _) => {
                if let (ArrV(locs), NatV(bits, ..)) = (a.kind(), i.kind()) {
                    let ix = crate::ast::nat_value(bits).and_then(|ix| locs.get(ix as usize));
                    if let Some(l) = ix {
                        out.push(*l);
                    }
                }
            }
            _ => {}
        }
    }
    out
}

/// Low equivalence of expressions: secret bits and flips relate whatever their
/// payloads; public bits and locations must agree; everything else is congruence.
pub fn low_equiv<P: Payload>(a: &Expr<P>, b: &Expr<P>) -> bool {
    use ExprKind::*;
    if a.ptr_eq(b) {
        return true;
    }
    match (a.kind(), b.kind()) {
        (BitV(_, Label::S, _), BitV(_, Label::S, _))
        | (NatV(_, Label::S, _), NatV(_, Label::S, _))
        | (FlipV(..), FlipV(..))
        | (RndV(..), RndV(..))
        | (Bit(_, Label::S), Bit(_, Label::S))
        | (Nat(_, Label::S), Nat(_, Label::S))
        | (Hidden, Hidden) => true,
        (BitV(p, Label::P, _), BitV(q, Label::P, _)) => p == q,
        (NatV(p, Label::P, _), NatV(q, Label::P, _)) => p == q,
        _ => {
            if std::mem::discriminant(a.kind()) != std::mem::discriminant(b.kind()) {
                return false;
            }
            if skeleton(a) != skeleton(b) {
                return false;
            }
            let (ka, kb) = (children(a), children(b));
            ka.len() == kb.len() && ka.iter().zip(&kb).all(|(x, y)| low_equiv(x, y))
        }
    }
}

/// The node with every child replaced by `()`: compares non-child data.
fn skeleton<P: Payload>(e: &Expr<P>) -> Expr<P> {
    let unit = Expr::new(ExprKind::Unit);
    e.map_children(&mut |_| unit.clone())
}

fn children<P: Payload>(e: &Expr<P>) -> Vec<Expr<P>> {
    let mut out = Vec::new();
    e.map_children(&mut |c| {
        out.push(c.clone());
        c.clone()
    });
    out
}

pub fn low_equiv_store<P: Payload>(a: &Store<P>, b: &Store<P>) -> bool {
    a.len() == b.len() && a.cells().iter().zip(b.cells()).all(|(x, y)| low_equiv(x, y))
}

pub fn low_equiv_config<P: Payload>(a: &Config<P>, b: &Config<P>) -> bool {
    low_equiv_store(&a.store, &b.store) && low_equiv(&a.expr, &b.expr)
}

pub fn low_equiv_trace<P: Payload>(a: &Trace<P>, b: &Trace<P>) -> bool {
    a.len() == b.len() && a.configs().iter().zip(b.configs()).all(|(x, y)| low_equiv_config(x, y))
}

/// Every equivalence class of `rel` gets the same total mass under both
/// distributions.
pub fn dist_equiv_mod<A: Clone + Eq + Hash>(
    rel: impl Fn(&A, &A) -> bool,
    d1: &DMap<A>,
    d2: &DMap<A>,
) -> bool {
    class_masses(&rel, d1, d2).iter().all(|(_, m1, m2)| m1 == m2)
}

/// Class representatives with their masses under `d1` and `d2`.
pub fn class_masses<A: Clone + Eq + Hash>(
    rel: &impl Fn(&A, &A) -> bool,
    d1: &DMap<A>,
    d2: &DMap<A>,
) -> Vec<(A, Dyadic, Dyadic)> {
    let mut classes: Vec<(A, Dyadic, Dyadic)> = Vec::new();
    for (which, d) in [(0, d1), (1, d2)] {
        for (a, m) in d.normalize().entries() {
            let i = match classes.iter().position(|(r, _, _)| r == a || rel(r, a)) {
                Some(i) => i,
                None => {
                    classes.push((a.clone(), Dyadic::ZERO, Dyadic::ZERO));
                    classes.len() - 1
                }
            };
            if which == 0 {
                classes[i].1 += *m;
            } else {
                classes[i].2 += *m;
            }
        }
    }
    classes
}
