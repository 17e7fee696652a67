//! Mixed semantics over distributional bits, projection back to the standard
//! language, and the dynamic FLIP-VALUE check.
//!
//! The mixed step is the generic step at payload [`BitTree`]: `flip` yields a coin
//! tree without branching and only `castP` (or a random `if` guard in permissive
//! mode) samples.

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;

use crate::ast::{CastOp, ExprKind, Label, MExpr, PtrMap, Region, RegionPoset, SExpr};
use crate::dist::{cond_prob, ibind, imap, is_indep, isequence, BitTree, DistError, ITree, Prob};
use crate::sem_standard::{nstep_i, step_i, Config, Machine, SConfig, SemError, Store, Trace};

pub type MConfig = Config<BitTree>;
pub type MTrace = Trace<BitTree>;

/// Embeds a source expression (no payloads) into the mixed language.
pub fn to_mixed(e: &SExpr) -> MExpr {
    e.convert(&mut |b: &bool| BitTree::leaf(*b))
}

pub fn initial(e: &SExpr) -> MConfig {
    Config::new(Store::new(), to_mixed(e))
}

/// One mixed step.
pub fn mstep(m: &Machine, n: u32, c: &MConfig) -> Result<ITree<MConfig>, SemError> {
    step_i(m, n, c)
}

/// `N` mixed steps, as a tree of traces.
pub fn mnstep(m: &Machine, n: u32, c: &MConfig) -> Result<ITree<MTrace>, SemError> {
    nstep_i(m, n, c)
}

/// Distinct random payload trees, in first-seen order.
#[derive(Default)]
struct Collector {
    index: HashMap<BitTree, usize>,
    trees: Vec<BitTree>,
    seen: std::collections::HashSet<usize>,
}

impl Collector {
    fn tree(&mut self, t: &BitTree) {
        if t.as_leaf().is_none() && !self.index.contains_key(t) {
            self.index.insert(t.clone(), self.trees.len());
            self.trees.push(t.clone());
        }
    }

    fn expr(&mut self, e: &MExpr) {
        if !e.has_payload() || !self.seen.insert(e.ptr_id()) {
            return;
        }
        match e.kind() {
            ExprKind::BitV(p, ..) | ExprKind::FlipV(p, ..) => self.tree(p),
            ExprKind::NatV(ps, ..) | ExprKind::RndV(ps, ..) => ps.iter().for_each(|p| self.tree(p)),
            _ => {
                e.map_children(&mut |c| {
                    self.expr(c);
                    c.clone()
                });
            }
        }
    }

    fn config(&mut self, c: &MConfig) {
        c.store.cells().iter().for_each(|v| self.expr(v));
        self.expr(&c.expr);
    }
}

/// Flattens mixed objects in one world, given the bits of the collected trees.
struct Flatten<'a> {
    index: &'a HashMap<BitTree, usize>,
    bits: &'a [bool],
    memo: PtrMap<SExpr>,
    plain: &'a RefCell<PtrMap<SExpr>>,
}

impl Flatten<'_> {
    fn expr(&mut self, e: &MExpr) -> SExpr {
        let (index, bits) = (self.index, self.bits);
        let bit = |t: &BitTree| match t.as_leaf() {
            Some(b) => *b,
            None => bits[index[t]],
        };
        e.convert_memo(&mut |t: &BitTree| bit(t), &mut self.memo, &mut self.plain.borrow_mut())
    }

    fn config(&mut self, c: &MConfig) -> SConfig {
        let store = Store::from_cells(c.store.cells().iter().map(|v| self.expr(v)).collect());
        Config::new(store, self.expr(&c.expr))
    }
}

fn project_with<T: PartialEq>(
    collect: impl FnOnce(&mut Collector),
    mut build: impl FnMut(&mut Flatten<'_>) -> T,
) -> ITree<T> {
    let mut col = Collector::default();
    collect(&mut col);
    let worlds = isequence(&col.trees);
    let plain = RefCell::new(PtrMap::default());
    imap(&worlds, |bits: &Vec<bool>| {
        let mut fl = Flatten { index: &col.index, bits, memo: PtrMap::default(), plain: &plain };
        build(&mut fl)
    })
}

/// `⟦e⟧`: the distribution of standard expressions a mixed expression denotes.
pub fn project_expr(e: &MExpr) -> ITree<SExpr> {
    project_with(|c| c.expr(e), |f| f.expr(e))
}

pub fn project_store(s: &Store<BitTree>) -> ITree<Store<bool>> {
    project_with(
        |c| s.cells().iter().for_each(|v| c.expr(v)),
        |f| Store::from_cells(s.cells().iter().map(|v| f.expr(v)).collect()),
    )
}

pub fn project_config(c: &MConfig) -> ITree<SConfig> {
    project_with(|col| col.config(c), |f| f.config(c))
}

/// Projects a whole trace jointly: every configuration is read in the same world.
pub fn project_trace(t: &MTrace) -> ITree<Trace<bool>> {
    let cs = t.configs();
    project_with(
        |col| cs.iter().for_each(|c| col.config(c)),
        |f| Trace::from_configs(cs.iter().map(|c| f.config(c))).unwrap(),
    )
}

/// Flattens a tree of mixed traces into a tree of standard traces.
pub fn project_tree(t: &ITree<MTrace>) -> ITree<Trace<bool>> {
    ibind(t, project_trace)
}

/// Conditioning events `Φ`: every listed tree takes its listed outcome.
#[derive(Clone, Debug, Default)]
pub struct History {
    pub events: Vec<(BitTree, bool)>,
}

impl History {
    pub fn new() -> History {
        History::default()
    }

    pub fn with(mut self, t: BitTree, b: bool) -> History {
        self.events.push((t, b));
        self
    }

    /// The history of a world: the event that the run produced exactly `trace`.
    pub fn of_world<T: PartialEq>(tree: &ITree<T>, world: &T) -> History {
        History { events: vec![(imap(tree, |t| t == world), true)] }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FlipFailure {
    /// `Pr[b̂ = 1 | Φ]` is not one half.
    NotUniform(Prob),
    /// `b̂` is correlated with other flips or with lower-region secrets.
    NotIndependent,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlipViolation {
    pub flip: String,
    pub region: Region,
    pub failure: FlipFailure,
}

impl fmt::Display for FlipViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.failure {
            FlipFailure::NotUniform(p) => {
                write!(f, "flip {} at region {} has Pr[=1 | Φ] = {p}, expected 1/2", self.flip, self.region)
            }
            FlipFailure::NotIndependent => write!(
                f,
                "flip {} at region {} is not independent of the other flips and lower-region secrets",
                self.flip, self.region
            ),
        }
    }
}

/// Flip trees (`Ψ^F`) and secret bit trees (`Ψ^B`) of a configuration, each with
/// its region tag. Every syntactic occurrence counts, with two exceptions that
/// follow the affinity rules: the branches of an `if` are alternatives, so a
/// value in both counts once, and projecting a field out of a record literal
/// uses only that field. A flip under `castS` is a secret copy and counts as a bit.
#[derive(Clone, Debug, Default)]
pub struct FbSet {
    pub flips: Vec<(BitTree, Region)>,
    pub bits: Vec<(BitTree, Region)>,
}

impl FbSet {
    pub fn of_config(c: &MConfig) -> FbSet {
        let mut s = FbSet::default();
        c.store.cells().iter().for_each(|v| s.walk(v));
        s.walk(&c.expr);
        s
    }

    fn walk(&mut self, e: &MExpr) {
        if !e.has_payload() {
            return;
        }
        match e.kind() {
            ExprKind::Cast(CastOp::S, v) => match v.kind() {
                ExprKind::FlipV(p, r, _) => self.bits.push((p.clone(), r.clone())),
                ExprKind::RndV(ps, r, _) => ps.iter().for_each(|p| self.bits.push((p.clone(), r.clone()))),
                _ => self.walk(v),
            },
            ExprKind::FlipV(p, r, true) => self.flips.push((p.clone(), r.clone())),
            ExprKind::RndV(ps, r, true) => ps.iter().for_each(|p| self.flips.push((p.clone(), r.clone()))),
            ExprKind::BitV(p, Label::S, r) => self.bits.push((p.clone(), r.clone())),
            ExprKind::NatV(ps, Label::S, r) => ps.iter().for_each(|p| self.bits.push((p.clone(), r.clone()))),
            ExprKind::FlipV(..) | ExprKind::RndV(..) | ExprKind::BitV(..) | ExprKind::NatV(..) => {}
            ExprKind::Field(r, f) => match r.kind() {
                ExprKind::Record(fs) => {
                    if let Some((_, v)) = fs.iter().find(|(n, _)| n == f) {
                        self.walk(v);
                    }
                }
                _ => self.walk(r),
            },
            ExprKind::If(c, a, b) => {
                self.walk(c);
                let (mut sa, mut sb) = (FbSet::default(), FbSet::default());
                sa.walk(a);
                sb.walk(b);
                self.flips.extend(max_union(sa.flips, sb.flips));
                self.bits.extend(max_union(sa.bits, sb.bits));
            }
            _ => {
                e.map_children(&mut |c| {
                    self.walk(c);
                    c.clone()
                });
            }
        }
    }
}

/// Multiset union keeping each entry as often as the side with more copies.
fn max_union(mut a: Vec<(BitTree, Region)>, b: Vec<(BitTree, Region)>) -> Vec<(BitTree, Region)> {
    let mut spare: Vec<bool> = vec![true; a.len()];
    for x in b {
        match (0..a.len()).find(|&i| spare[i] && a[i] == x) {
            Some(i) => spare[i] = false,
            None => {
                a.push(x);
                spare.push(false);
            }
        }
    }
    a
}

/// FLIP-VALUE at one configuration: every flip is uniform given `Φ` and independent
/// of the other flips together with the secret bits of strictly lower regions.
pub fn check_flip_invariant(
    c: &MConfig,
    phi: &History,
    p: &RegionPoset,
) -> Result<Result<(), FlipViolation>, DistError> {
    let fb = FbSet::of_config(c);
    check_fbset(&fb, phi, p)
}

pub fn check_fbset(
    fb: &FbSet,
    phi: &History,
    p: &RegionPoset,
) -> Result<Result<(), FlipViolation>, DistError> {
    let half = Prob::new(1, 2);
    for (i, (b, rho)) in fb.flips.iter().enumerate() {
        let pr = cond_prob(&[(b.clone(), true)], &phi.events)?;
        let violation = |failure| FlipViolation { flip: crate::ast::Payload::render(b), region: rho.clone(), failure };
        if pr != half {
            return Ok(Err(violation(FlipFailure::NotUniform(pr))));
        }
        let mut others: Vec<BitTree> = Vec::new();
        let mut push = |t: &BitTree| {
            if t.as_leaf().is_none() && !others.contains(t) {
                others.push(t.clone());
            }
        };
        for (j, (t, _)) in fb.flips.iter().enumerate() {
            if j != i {
                push(t);
            }
        }
        for (t, r) in &fb.bits {
            if p.lt(r, rho).unwrap_or(false) {
                push(t);
            }
        }
        if others.is_empty() {
            continue;
        }
        if !is_indep(std::slice::from_ref(b), &others, &phi.events)? {
            return Ok(Err(violation(FlipFailure::NotIndependent)));
        }
    }
    Ok(Ok(()))
}
