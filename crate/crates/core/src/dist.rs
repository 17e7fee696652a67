//! Exact probability infrastructure.
//!
//! [`ITree`] is the intensional distribution: a decision tree over fair coins whose
//! leaves carry outcomes. Every internal node names the coin it tests, coins strictly
//! increase along each path, and a node whose two children are equal is collapsed.
//! [`DMap`] is the denotational distribution: a finite map from outcomes to masses.
//! All masses are [`Dyadic`] rationals, so every comparison is exact.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use num_rational::Ratio;
use thiserror::Error;

/// Conditional probabilities are not always dyadic (e.g. 1/3).
pub type Prob = Ratio<u128>;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DistError {
    #[error("conditioning event has zero probability")]
    ConditionImpossible,
}

/// `num / 2^exp`, kept normalized (odd numerator, or zero with exponent 0).
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dyadic {
    num: u128,
    exp: u32,
}

impl Dyadic {
    pub const ZERO: Dyadic = Dyadic { num: 0, exp: 0 };
    pub const ONE: Dyadic = Dyadic { num: 1, exp: 0 };
    pub const HALF: Dyadic = Dyadic { num: 1, exp: 1 };

    pub fn new(num: u128, exp: u32) -> Dyadic {
        let mut d = Dyadic { num, exp };
        d.normalize();
        d
    }

    /// `2^-k`.
    pub fn pow2_inv(k: u32) -> Dyadic {
        Dyadic { num: 1, exp: k }
    }

    pub fn numerator(&self) -> u128 {
        self.num
    }

    pub fn log_denominator(&self) -> u32 {
        self.exp
    }

    pub fn is_zero(&self) -> bool {
        self.num == 0
    }

    fn normalize(&mut self) {
        if self.num == 0 {
            self.exp = 0;
            return;
        }
        let tz = self.num.trailing_zeros().min(self.exp);
        self.num >>= tz;
        self.exp -= tz;
    }

    fn scaled(&self, exp: u32) -> u128 {
        shl(self.num, exp - self.exp)
    }

    pub fn checked_sub(self, rhs: Dyadic) -> Option<Dyadic> {
        let e = self.exp.max(rhs.exp);
        let (a, b) = (self.scaled(e), rhs.scaled(e));
        a.checked_sub(b).map(|n| Dyadic::new(n, e))
    }

    pub fn to_ratio(self) -> Prob {
        Ratio::new(self.num, shl(1, self.exp))
    }
}

fn shl(x: u128, k: u32) -> u128 {
    if x == 0 {
        return 0;
    }
    if k >= 128 || x.leading_zeros() < k {
        panic!("dyadic overflow: more coins than exact arithmetic supports");
    }
    x << k
}

impl std::ops::Add for Dyadic {
    type Output = Dyadic;
    fn add(self, rhs: Dyadic) -> Dyadic {
        let e = self.exp.max(rhs.exp);
        let n = self
            .scaled(e)
            .checked_add(rhs.scaled(e))
            .expect("dyadic overflow");
        Dyadic::new(n, e)
    }
}

impl std::ops::AddAssign for Dyadic {
    fn add_assign(&mut self, rhs: Dyadic) {
        *self = *self + rhs;
    }
}

impl std::ops::Mul for Dyadic {
    type Output = Dyadic;
    fn mul(self, rhs: Dyadic) -> Dyadic {
        let n = self.num.checked_mul(rhs.num).expect("dyadic overflow");
        Dyadic::new(n, self.exp + rhs.exp)
    }
}

impl std::iter::Sum for Dyadic {
    fn sum<I: Iterator<Item = Dyadic>>(iter: I) -> Dyadic {
        iter.fold(Dyadic::ZERO, |a, b| a + b)
    }
}

impl Ord for Dyadic {
    fn cmp(&self, other: &Self) -> Ordering {
        let e = self.exp.max(other.exp);
        self.scaled(e).cmp(&other.scaled(e))
    }
}

impl PartialOrd for Dyadic {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for Dyadic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.exp {
            0 => write!(f, "{}", self.num),
            e if e < 128 => write!(f, "{}/{}", self.num, 1u128 << e),
            e => write!(f, "{}/2^{e}", self.num),
        }
    }
}

impl fmt::Debug for Dyadic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

/// Entropy slot: the step that drew it, and a lane for multi-bit draws.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct Coin {
    pub step: u32,
    pub lane: u16,
}

impl Coin {
    pub fn new(step: u32, lane: u16) -> Coin {
        Coin { step, lane }
    }
}

impl fmt::Display for Coin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.lane == 0 {
            write!(f, "{}", self.step)
        } else {
            write!(f, "{}.{}", self.step, self.lane)
        }
    }
}

/// Heads selects the left subtree (`bit(0) = ⟨1 0⟩`).
pub type RPath = Vec<(Coin, bool)>;

pub struct ITree<A>(Arc<Tree<A>>);

enum Tree<A> {
    Leaf(A),
    Node { coin: Coin, heads: ITree<A>, tails: ITree<A> },
}

/// Fair coin trees over booleans: the payload of the mixed semantics.
pub type BitTree = ITree<bool>;

impl<A> Clone for ITree<A> {
    fn clone(&self) -> Self {
        ITree(self.0.clone())
    }
}

impl<A: PartialEq> PartialEq for ITree<A> {
    fn eq(&self, other: &Self) -> bool {
        if Arc::ptr_eq(&self.0, &other.0) {
            return true;
        }
        match (&*self.0, &*other.0) {
            (Tree::Leaf(a), Tree::Leaf(b)) => a == b,
            (
                Tree::Node { coin: c1, heads: h1, tails: t1 },
                Tree::Node { coin: c2, heads: h2, tails: t2 },
            ) => c1 == c2 && h1 == h2 && t1 == t2,
            _ => false,
        }
    }
}

impl<A: Eq> Eq for ITree<A> {}

impl<A: Hash> Hash for ITree<A> {
    fn hash<H: Hasher>(&self, state: &mut H) {
        match &*self.0 {
            Tree::Leaf(a) => {
                0u8.hash(state);
                a.hash(state);
            }
            Tree::Node { coin, heads, tails } => {
                1u8.hash(state);
                coin.hash(state);
                heads.hash(state);
                tails.hash(state);
            }
        }
    }
}

impl<A: fmt::Display> fmt::Display for ITree<A> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &*self.0 {
            Tree::Leaf(a) => write!(f, "{a}"),
            Tree::Node { coin, heads, tails } => write!(f, "@{coin}({heads} {tails})"),
        }
    }
}

impl<A: fmt::Debug> fmt::Debug for ITree<A> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &*self.0 {
            Tree::Leaf(a) => write!(f, "{a:?}"),
            Tree::Node { coin, heads, tails } => write!(f, "@{coin}({heads:?} {tails:?})"),
        }
    }
}

impl<A> ITree<A> {
    pub fn leaf(a: A) -> ITree<A> {
        ITree(Arc::new(Tree::Leaf(a)))
    }

    pub fn ptr_id(&self) -> usize {
        Arc::as_ptr(&self.0) as *const () as usize
    }

    pub fn ptr_eq(&self, other: &ITree<A>) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }

    pub fn top(&self) -> Option<Coin> {
        match &*self.0 {
            Tree::Leaf(_) => None,
            Tree::Node { coin, .. } => Some(*coin),
        }
    }

    /// The outcome when the tree is a point distribution.
    pub fn as_leaf(&self) -> Option<&A> {
        match &*self.0 {
            Tree::Leaf(a) => Some(a),
            Tree::Node { .. } => None,
        }
    }

    /// Children of the root node, if any.
    pub fn split(&self) -> Option<(Coin, &ITree<A>, &ITree<A>)> {
        match &*self.0 {
            Tree::Leaf(_) => None,
            Tree::Node { coin, heads, tails } => Some((*coin, heads, tails)),
        }
    }

    /// The subtree selected when `coin` lands `heads`. Only inspects the root.
    pub fn cofactor(&self, coin: Coin, heads: bool) -> ITree<A> {
        match &*self.0 {
            Tree::Node { coin: c, heads: h, tails: t } if *c == coin => {
                if heads { h.clone() } else { t.clone() }
            }
            _ => self.clone(),
        }
    }

    /// Outcome along the path that assigns each coin via `outcome`.
    pub fn index_with(&self, outcome: impl Fn(Coin) -> bool) -> &A {
        let mut t = self;
        loop {
            match &*t.0 {
                Tree::Leaf(a) => return a,
                Tree::Node { coin, heads, tails } => {
                    t = if outcome(*coin) { heads } else { tails };
                }
            }
        }
    }

    /// Outcome along a path; coins missing from the path count as tails.
    pub fn index(&self, path: &[(Coin, bool)]) -> &A {
        self.index_with(|c| path.iter().any(|&(pc, b)| pc == c && b))
    }

    /// Largest number of coins tested along any path.
    pub fn depth(&self) -> usize {
        match &*self.0 {
            Tree::Leaf(_) => 0,
            Tree::Node { heads, tails, .. } => 1 + heads.depth().max(tails.depth()),
        }
    }

    pub fn coins(&self) -> BTreeSet<Coin> {
        let mut out = BTreeSet::new();
        self.collect_coins(&mut out);
        out
    }

    pub fn collect_coins(&self, out: &mut BTreeSet<Coin>) {
        if let Tree::Node { coin, heads, tails } = &*self.0 {
            out.insert(*coin);
            heads.collect_coins(out);
            tails.collect_coins(out);
        }
    }

    /// Every leaf with the path that reaches it.
    pub fn worlds(&self) -> Vec<(RPath, &A)> {
        let mut out = Vec::new();
        let mut path = Vec::new();
        self.walk(&mut path, &mut out);
        out
    }

    fn walk<'a>(&'a self, path: &mut RPath, out: &mut Vec<(RPath, &'a A)>) {
        match &*self.0 {
            Tree::Leaf(a) => out.push((path.clone(), a)),
            Tree::Node { coin, heads, tails } => {
                path.push((*coin, true));
                heads.walk(path, out);
                path.pop();
                path.push((*coin, false));
                tails.walk(path, out);
                path.pop();
            }
        }
    }

    /// Every leaf with its probability mass.
    pub fn leaves(&self) -> Vec<(&A, Dyadic)> {
        let mut out = Vec::new();
        self.leaves_at(0, &mut out);
        out
    }

    fn leaves_at<'a>(&'a self, d: u32, out: &mut Vec<(&'a A, Dyadic)>) {
        match &*self.0 {
            Tree::Leaf(a) => out.push((a, Dyadic::pow2_inv(d))),
            Tree::Node { heads, tails, .. } => {
                heads.leaves_at(d + 1, out);
                tails.leaves_at(d + 1, out);
            }
        }
    }

    /// Total mass of the leaves satisfying `pred`.
    pub fn prob(&self, pred: impl Fn(&A) -> bool) -> Dyadic {
        self.leaves().into_iter().filter(|(a, _)| pred(a)).map(|(_, m)| m).sum()
    }

    /// Total number of nodes and leaves, counting shared subtrees once per occurrence.
    pub fn size(&self) -> usize {
        match &*self.0 {
            Tree::Leaf(_) => 1,
            Tree::Node { heads, tails, .. } => 1 + heads.size() + tails.size(),
        }
    }
}

impl<A: PartialEq> ITree<A> {
    /// Builds a node, collapsing it when both children agree.
    pub fn node(coin: Coin, heads: ITree<A>, tails: ITree<A>) -> ITree<A> {
        debug_assert!(heads.top().map_or(true, |c| c > coin));
        debug_assert!(tails.top().map_or(true, |c| c > coin));
        if heads == tails {
            heads
        } else {
            ITree(Arc::new(Tree::Node { coin, heads, tails }))
        }
    }

    /// The tree that behaves as `a` when `coin` is heads and as `b` otherwise.
    pub fn ite(coin: Coin, a: &ITree<A>, b: &ITree<A>) -> ITree<A> {
        if a == b {
            return a.clone();
        }
        let m = match (a.top(), b.top()) {
            (None, None) => None,
            (Some(x), None) | (None, Some(x)) => Some(x),
            (Some(x), Some(y)) => Some(x.min(y)),
        };
        match m {
            Some(m) if m < coin => ITree::node(
                m,
                ITree::ite(coin, &a.cofactor(m, true), &b.cofactor(m, true)),
                ITree::ite(coin, &a.cofactor(m, false), &b.cofactor(m, false)),
            ),
            Some(m) if m == coin => {
                ITree::node(coin, a.cofactor(coin, true), b.cofactor(coin, false))
            }
            _ => ITree::node(coin, a.clone(), b.clone()),
        }
    }

    /// Fixes the given coins and simplifies.
    pub fn restrict(&self, assignment: &[(Coin, bool)]) -> ITree<A> {
        if assignment.is_empty() {
            return self.clone();
        }
        match &*self.0 {
            Tree::Leaf(_) => self.clone(),
            Tree::Node { coin, heads, tails } => {
                match assignment.iter().find(|(c, _)| c == coin) {
                    Some(&(_, true)) => heads.restrict(assignment),
                    Some(&(_, false)) => tails.restrict(assignment),
                    None => {
                        ITree::node(*coin, heads.restrict(assignment), tails.restrict(assignment))
                    }
                }
            }
        }
    }
}

/// `ireturn`.
pub fn ireturn<A>(a: A) -> ITree<A> {
    ITree::leaf(a)
}

/// `bit(n)`: a fair coin drawn from slot `n`.
pub fn ibit(n: u32) -> BitTree {
    coin_tree(Coin::new(n, 0))
}

pub fn coin_tree(coin: Coin) -> BitTree {
    ITree::node(coin, ITree::leaf(true), ITree::leaf(false))
}

/// `ibind`. Satisfies `ibind(x, f)[p] = f(x[p])[p]` for every path `p`.
pub fn ibind<A, B: PartialEq>(x: &ITree<A>, mut f: impl FnMut(&A) -> ITree<B>) -> ITree<B> {
    try_ibind(x, |a| Ok::<_, std::convert::Infallible>(f(a))).unwrap_or_else(|e| match e {})
}

/// `ibind` with a fallible continuation. Shared leaves are visited once.
pub fn try_ibind<A, B: PartialEq, E>(
    x: &ITree<A>,
    mut f: impl FnMut(&A) -> Result<ITree<B>, E>,
) -> Result<ITree<B>, E> {
    let mut memo: HashMap<usize, ITree<B>> = HashMap::new();
    bind_rec(x, &mut f, &mut memo)
}

fn bind_rec<A, B: PartialEq, E>(
    x: &ITree<A>,
    f: &mut impl FnMut(&A) -> Result<ITree<B>, E>,
    memo: &mut HashMap<usize, ITree<B>>,
) -> Result<ITree<B>, E> {
    if let Some(r) = memo.get(&x.ptr_id()) {
        return Ok(r.clone());
    }
    let r = match &*x.0 {
        Tree::Leaf(a) => f(a)?,
        Tree::Node { coin, heads, tails } => {
            let h = bind_rec(heads, f, memo)?;
            let t = bind_rec(tails, f, memo)?;
            ITree::ite(*coin, &h, &t)
        }
    };
    memo.insert(x.ptr_id(), r.clone());
    Ok(r)
}

/// Monadic map.
pub fn imap<A, B: PartialEq>(x: &ITree<A>, mut f: impl FnMut(&A) -> B) -> ITree<B> {
    fn go<A, B: PartialEq>(
        x: &ITree<A>,
        f: &mut impl FnMut(&A) -> B,
        memo: &mut HashMap<usize, ITree<B>>,
    ) -> ITree<B> {
        if let Some(r) = memo.get(&x.ptr_id()) {
            return r.clone();
        }
        let r = match &*x.0 {
            Tree::Leaf(a) => ITree::leaf(f(a)),
            Tree::Node { coin, heads, tails } => {
                let h = go(heads, f, memo);
                let t = go(tails, f, memo);
                ITree::node(*coin, h, t)
            }
        };
        memo.insert(x.ptr_id(), r.clone());
        r
    }
    go(x, &mut f, &mut HashMap::new())
}

/// Combines two trees pointwise on every path.
pub fn izip<A, B, C: PartialEq>(
    a: &ITree<A>,
    b: &ITree<B>,
    f: &mut impl FnMut(&A, &B) -> C,
) -> ITree<C> {
    match (a.as_leaf(), b.as_leaf()) {
        (Some(x), Some(y)) => ITree::leaf(f(x, y)),
        _ => {
            let m = match (a.top(), b.top()) {
                (Some(x), Some(y)) => x.min(y),
                (Some(x), None) | (None, Some(x)) => x,
                (None, None) => unreachable!(),
            };
            let h = izip(&a.cofactor(m, true), &b.cofactor(m, true), f);
            let t = izip(&a.cofactor(m, false), &b.cofactor(m, false), f);
            ITree::node(m, h, t)
        }
    }
}

/// `do x1 <- t1; ...; return [x1, ...]`.
pub fn isequence<A: Clone + PartialEq>(trees: &[ITree<A>]) -> ITree<Vec<A>> {
    let mut acc: ITree<Vec<A>> = ITree::leaf(Vec::with_capacity(trees.len()));
    for t in trees {
        acc = izip(&acc, t, &mut |v: &Vec<A>, x: &A| {
            let mut v = v.clone();
            v.push(x.clone());
            v
        });
    }
    acc
}

/// Lifts an n-ary boolean function over coin trees (`⊕̂`, `ĉond`, arithmetic).
pub fn ilift(trees: &[&BitTree], f: &impl Fn(&[bool]) -> bool) -> BitTree {
    if let Some(vals) = trees.iter().map(|t| t.as_leaf().copied()).collect::<Option<Vec<_>>>() {
        return ITree::leaf(f(&vals));
    }
    let m = trees.iter().filter_map(|t| t.top()).min().unwrap();
    let hs: Vec<BitTree> = trees.iter().map(|t| t.cofactor(m, true)).collect();
    let ts: Vec<BitTree> = trees.iter().map(|t| t.cofactor(m, false)).collect();
    let h = ilift(&hs.iter().collect::<Vec<_>>(), f);
    let t = ilift(&ts.iter().collect::<Vec<_>>(), f);
    ITree::node(m, h, t)
}

pub fn ixor(a: &BitTree, b: &BitTree) -> BitTree {
    ilift(&[a, b], &|v| v[0] ^ v[1])
}

pub fn icond(g: &BitTree, a: &BitTree, b: &BitTree) -> BitTree {
    ilift(&[g, a, b], &|v| if v[0] { v[1] } else { v[2] })
}

impl<A: Eq + Hash + Clone> ITree<A> {
    /// Outcome distribution, merging equal leaves, in first-seen order.
    pub fn outcomes(&self) -> Vec<(A, Dyadic)> {
        let mut index: HashMap<&A, usize> = HashMap::new();
        let mut out: Vec<(A, Dyadic)> = Vec::new();
        for (a, m) in self.leaves() {
            match index.get(a) {
                Some(&i) => out[i].1 += m,
                None => {
                    index.insert(a, out.len());
                    out.push((a.clone(), m));
                }
            }
        }
        out
    }

    pub fn to_dmap(&self) -> DMap<A> {
        DMap { entries: self.outcomes() }
    }
}

/// Indicator tree of "every tree takes its listed outcome".
fn indicator<A: PartialEq>(events: &[(ITree<A>, A)]) -> BitTree {
    let mut acc = ITree::leaf(true);
    for (t, a) in events {
        let hit = imap(t, |x| x == a);
        acc = izip(&acc, &hit, &mut |p: &bool, q: &bool| *p && *q);
    }
    acc
}

/// `Pr[x1 ≐ a1, ..., xk ≐ ak]`.
pub fn joint_prob<A: PartialEq>(events: &[(ITree<A>, A)]) -> Dyadic {
    indicator(events).prob(|b| *b)
}

/// `Pr[events | given]`.
pub fn cond_prob<A: PartialEq + Clone>(
    events: &[(ITree<A>, A)],
    given: &[(ITree<A>, A)],
) -> Result<Prob, DistError> {
    let g = joint_prob(given);
    if g.is_zero() {
        return Err(DistError::ConditionImpossible);
    }
    let all: Vec<(ITree<A>, A)> = events.iter().chain(given).cloned().collect();
    Ok(joint_prob(&all).to_ratio() / g.to_ratio())
}

/// Whether the tuple `lhs` is independent of the tuple `rhs` given `given`.
pub fn is_indep<A: Clone + Eq + Hash>(
    lhs: &[ITree<A>],
    rhs: &[ITree<A>],
    given: &[(ITree<A>, A)],
) -> Result<bool, DistError> {
    let g = indicator(given);
    let l = isequence(lhs);
    let r = isequence(rhs);
    let lr = izip(&l, &r, &mut |x: &Vec<A>, y: &Vec<A>| (x.clone(), y.clone()));
    let joint = izip(&lr, &g, &mut |xy: &(Vec<A>, Vec<A>), b: &bool| (xy.clone(), *b));
    factorizes(joint.leaves().into_iter().filter(|((_, b), _)| *b).map(|((xy, _), m)| (xy, m)))
}

/// Checks `m(x, y) m = m(x) m(y)` for every `x`, `y` in the support.
pub fn factorizes<'a, X: Eq + Hash + 'a, Y: Eq + Hash + 'a>(
    masses: impl Iterator<Item = (&'a (X, Y), Dyadic)>,
) -> Result<bool, DistError> {
    let mut mxy: HashMap<(&X, &Y), Dyadic> = HashMap::new();
    let mut mx: HashMap<&X, Dyadic> = HashMap::new();
    let mut my: HashMap<&Y, Dyadic> = HashMap::new();
    let mut total = Dyadic::ZERO;
    for ((x, y), m) in masses {
        *mxy.entry((x, y)).or_insert(Dyadic::ZERO) += m;
        *mx.entry(x).or_insert(Dyadic::ZERO) += m;
        *my.entry(y).or_insert(Dyadic::ZERO) += m;
        total += m;
    }
    if total.is_zero() {
        return Err(DistError::ConditionImpossible);
    }
    for (x, px) in &mx {
        for (y, py) in &my {
            let pxy = mxy.get(&(*x, *y)).copied().unwrap_or(Dyadic::ZERO);
            if pxy * total != *px * *py {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// Finite distribution with exact masses.
#[derive(Clone, Debug)]
pub struct DMap<A> {
    entries: Vec<(A, Dyadic)>,
}

impl<A> DMap<A> {
    pub fn from_entries(entries: Vec<(A, Dyadic)>) -> DMap<A> {
        DMap { entries }
    }

    pub fn entries(&self) -> &[(A, Dyadic)] {
        &self.entries
    }

    pub fn into_entries(self) -> Vec<(A, Dyadic)> {
        self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn mass(&self) -> Dyadic {
        self.entries.iter().map(|(_, m)| *m).sum()
    }

    pub fn prob(&self, pred: impl Fn(&A) -> bool) -> Dyadic {
        self.entries.iter().filter(|(a, _)| pred(a)).map(|(_, m)| *m).sum()
    }

    pub fn map<B>(&self, mut f: impl FnMut(&A) -> B) -> DMap<B> {
        DMap { entries: self.entries.iter().map(|(a, m)| (f(a), *m)).collect() }
    }
}

impl<A: Eq + Hash + Clone> DMap<A> {
    /// Merges duplicate outcomes and drops zero masses, keeping first-seen order.
    pub fn normalize(&self) -> DMap<A> {
        let mut index: HashMap<&A, usize> = HashMap::new();
        let mut out: Vec<(A, Dyadic)> = Vec::new();
        for (a, m) in &self.entries {
            if m.is_zero() {
                continue;
            }
            match index.get(a) {
                Some(&i) => out[i].1 += *m,
                None => {
                    index.insert(a, out.len());
                    out.push((a.clone(), *m));
                }
            }
        }
        DMap { entries: out }
    }

    pub fn mass_of(&self, a: &A) -> Dyadic {
        self.prob(|x| x == a)
    }
}

impl<A: Eq + Hash + Clone> PartialEq for DMap<A> {
    fn eq(&self, other: &Self) -> bool {
        let a = self.normalize();
        let b = other.normalize();
        if a.len() != b.len() {
            return false;
        }
        let idx: HashMap<&A, Dyadic> = b.entries.iter().map(|(x, m)| (x, *m)).collect();
        a.entries.iter().all(|(x, m)| idx.get(x) == Some(m))
    }
}

pub fn dreturn<A>(a: A) -> DMap<A> {
    DMap { entries: vec![(a, Dyadic::ONE)] }
}

/// Uniform bit; the slot index is irrelevant to the denotational monad.
pub fn dbit(_n: u32) -> DMap<bool> {
    DMap { entries: vec![(true, Dyadic::HALF), (false, Dyadic::HALF)] }
}

pub fn dbind<A, B: Eq + Hash + Clone>(x: &DMap<A>, mut f: impl FnMut(&A) -> DMap<B>) -> DMap<B> {
    let mut out = Vec::new();
    for (a, m) in &x.entries {
        for (b, mb) in f(a).entries {
            out.push((b, *m * mb));
        }
    }
    DMap { entries: out }.normalize()
}

pub fn dprob<A>(x: &DMap<A>, pred: impl Fn(&A) -> bool) -> Dyadic {
    x.prob(pred)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t34() -> ITree<i32> {
        // ⟨⟨3 4⟩⟨3 5⟩⟩
        let c0 = Coin::new(0, 0);
        let c1 = Coin::new(1, 0);
        ITree::node(
            c0,
            ITree::node(c1, ITree::leaf(3), ITree::leaf(4)),
            ITree::node(c1, ITree::leaf(3), ITree::leaf(5)),
        )
    }

    #[test]
    fn dyadic_arith_and_display() {
        let q = Dyadic::new(3, 2);
        assert_eq!(q.to_string(), "3/4");
        assert_eq!(Dyadic::new(4, 3), Dyadic::HALF);
        assert_eq!(Dyadic::HALF + Dyadic::HALF, Dyadic::ONE);
        assert_eq!(Dyadic::HALF * Dyadic::HALF, Dyadic::new(1, 2));
        assert!(Dyadic::new(1, 2) < Dyadic::HALF);
        assert_eq!(Dyadic::ONE.checked_sub(q), Some(Dyadic::new(1, 2)));
        assert_eq!(Dyadic::ZERO.to_string(), "0");
    }

    #[test]
    fn tree_probabilities_from_worked_example() {
        let t = t34();
        assert_eq!(joint_prob(&[(t.clone(), 3)]), Dyadic::HALF);
        assert_eq!(joint_prob(&[(t.clone(), 4)]), Dyadic::new(1, 2));
        assert_eq!(joint_prob(&[(t, 5)]), Dyadic::new(1, 2));
    }

    #[test]
    fn ibit_shapes() {
        assert_eq!(ibit(0).to_string(), "@0(true false)");
        assert_eq!(ibit(0).depth(), 1);
        assert_eq!(joint_prob(&[(ibit(5), true)]), Dyadic::HALF);
        assert_eq!(joint_prob(&[(ibit(0), true), (ibit(1), true)]), Dyadic::new(1, 2));
    }

    #[test]
    fn bind_picks_consistent_worlds() {
        // bind(⟨1 0⟩, b -> if b then ⟨a b⟩ else ⟨c d⟩) on the same coin gives ⟨a d⟩.
        let c0 = Coin::new(0, 0);
        let x = ibit(0);
        let r = ibind(&x, |b| {
            if *b {
                ITree::node(c0, ITree::leaf("a"), ITree::leaf("b"))
            } else {
                ITree::node(c0, ITree::leaf("c"), ITree::leaf("d"))
            }
        });
        assert_eq!(r, ITree::node(c0, ITree::leaf("a"), ITree::leaf("d")));
        let s = ibind(&ibit(0), |b| ITree::leaf(if *b { "x" } else { "y" }));
        assert_eq!(s, ITree::node(c0, ITree::leaf("x"), ITree::leaf("y")));
    }

    #[test]
    fn conditional_queries() {
        let half = Prob::new(1, 2);
        assert_eq!(cond_prob(&[(ibit(0), true)], &[(ibit(1), false)]), Ok(half));
        assert_eq!(cond_prob(&[(ibit(0), true)], &[(ibit(0), true)]), Ok(Prob::from_integer(1)));
        assert_eq!(
            cond_prob(&[(ibit(0), true)], &[(ibit(0), true), (ibit(0), false)]),
            Err(DistError::ConditionImpossible)
        );
        assert_eq!(cond_prob(&[(ibit(0), true)], &[(ibit(0), false)]), Ok(Prob::from_integer(0)));
    }

    #[test]
    fn independence_examples() {
        let x = ibit(0);
        let y = ibit(1);
        let z = ixor(&x, &y);
        assert_eq!(is_indep(&[x.clone()], &[y.clone()], &[]), Ok(true));
        assert_eq!(is_indep(&[x.clone()], &[x.clone()], &[]), Ok(false));
        assert_eq!(is_indep(&[x.clone()], &[z.clone()], &[]), Ok(true));
        assert_eq!(is_indep(&[x], &[y, z], &[]), Ok(false));
    }

    #[test]
    fn dmap_examples() {
        assert_eq!(dreturn(7).entries(), &[(7, Dyadic::ONE)]);
        assert_eq!(dbind(&dbit(0), |b| dreturn(*b)), dbit(0));
        assert_eq!(dbind(&dbit(0), |_| dbit(1)), dbit(7));
        let a = DMap::from_entries(vec![('a', Dyadic::HALF), ('b', Dyadic::HALF)]);
        let b = DMap::from_entries(vec![('a', Dyadic::new(1, 2)), ('b', Dyadic::new(3, 2))]);
        assert_ne!(a, b);
    }

    #[test]
    fn restrict_and_worlds() {
        let t = t34();
        let r = t.restrict(&[(Coin::new(1, 0), true)]);
        assert_eq!(r, ITree::leaf(3));
        assert_eq!(t.worlds().len(), 4);
        assert_eq!(*t.index(&[(Coin::new(0, 0), false), (Coin::new(1, 0), false)]), 5);
    }
}
