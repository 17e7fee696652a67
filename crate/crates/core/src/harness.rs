//! End-to-end checks of the metatheory on concrete programs: PMTO, simulation
//! between the two semantics, preservation of FLIP-VALUE, progress and the
//! uniformity of every reveal.
//!
//! All checks are exact. Each returns a [`Verdict`]; a failing verdict always
//! carries a witness.

use std::collections::{HashMap, HashSet};
use std::fmt;

use crate::adversary::{class_masses, obs_nstep_d};
use crate::ast::{pretty, Program};
use crate::dist::{cond_prob, ibind, imap, isequence, try_ibind, DMap, Dyadic, ITree, Prob};
use crate::sem_mixed::{self, check_fbset, FbSet, History, MTrace};
use crate::sem_standard::{step_d, step_i, Config, IRun, Machine, SConfig, SemError, Trace, Why};
use crate::typecheck::{check_mode, Mode, TypeEnv};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Pass,
    Fail,
    /// A precondition does not hold, or the run exceeded the coin budget.
    Inapplicable,
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Inapplicable => "INAPPLICABLE",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Witness {
    pub text: String,
    /// Two exact probabilities: observed, then expected or the other side's.
    pub probs: Option<(Prob, Prob)>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Verdict {
    pub status: Status,
    pub witness: Option<Witness>,
    pub steps_used: u32,
    pub coins_used: u32,
}

impl Verdict {
    fn pass(steps: u32, coins: u32) -> Verdict {
        Verdict { status: Status::Pass, witness: None, steps_used: steps, coins_used: coins }
    }

    fn fail(text: String, probs: Option<(Prob, Prob)>, steps: u32, coins: u32) -> Verdict {
        Verdict { status: Status::Fail, witness: Some(Witness { text, probs }), steps_used: steps, coins_used: coins }
    }

    fn inapplicable(text: String) -> Verdict {
        Verdict {
            status: Status::Inapplicable,
            witness: Some(Witness { text, probs: None }),
            steps_used: 0,
            coins_used: 0,
        }
    }

    /// Maps a semantic error: stuck terms fail, budget overruns are inapplicable.
    fn from_sem(e: SemError, steps: u32) -> Verdict {
        match e {
            SemError::CoinBudget { .. } => Verdict::inapplicable(e.to_string()),
            _ => Verdict::fail(e.to_string(), None, steps, 0),
        }
    }

    pub fn is_pass(&self) -> bool {
        self.status == Status::Pass
    }

    /// Combines two verdicts: any failure wins, then inapplicability.
    pub fn and(self, other: Verdict) -> Verdict {
        let rank = |s: Status| match s {
            Status::Fail => 2,
            Status::Inapplicable => 1,
            Status::Pass => 0,
        };
        let steps = self.steps_used.max(other.steps_used);
        let coins = self.coins_used.max(other.coins_used);
        let mut v = if rank(other.status) > rank(self.status) { other } else { self };
        v.steps_used = steps;
        v.coins_used = coins;
        v
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}", self.status)?;
        writeln!(f, "steps: {}", self.steps_used)?;
        writeln!(f, "coins: {}", self.coins_used)?;
        if let Some(w) = &self.witness {
            for line in w.text.lines() {
                writeln!(f, "  {line}")?;
            }
            if let Some((a, b)) = &w.probs {
                writeln!(f, "  probabilities: {a} vs {b}")?;
            }
        }
        Ok(())
    }
}

/// Options shared by every check.
#[derive(Clone, Copy, Debug, Default)]
pub struct Opts {
    /// Skip the typing precondition and sample random `if` guards, to run
    /// ill-typed programs and exhibit their leaks.
    pub dynamic: bool,
}

impl Opts {
    pub fn dynamic() -> Opts {
        Opts { dynamic: true }
    }
}

fn machine(p: &Program, opts: Opts) -> Machine {
    let m = Machine::for_program(p);
    if opts.dynamic {
        m.permissive()
    } else {
        m
    }
}

/// `Err` carries the inapplicable verdict when the program does not typecheck.
fn precondition(p: &Program, opts: Opts) -> Result<(), Verdict> {
    if opts.dynamic {
        return Ok(());
    }
    check_mode(Mode::Ext, &p.poset, &TypeEnv::new(), &p.expr)
        .map(|_| ())
        .map_err(|e| Verdict::inapplicable(format!("program does not typecheck: {e}")))
}

const TRACE_LINES: usize = 24;

/// Renders a trace, one configuration per line, eliding the middle of long traces.
pub fn render_trace<P: crate::ast::Payload>(t: &Trace<P>) -> String {
    let cs = t.configs();
    let line = |i: usize, c: &Config<P>| {
        let mut s = format!("{i:>4}: {}", c);
        if s.len() > 200 {
            let mut cut = 197;
            while !s.is_char_boundary(cut) {
                cut -= 1;
            }
            s.truncate(cut);
            s.push_str("...");
        }
        s
    };
    let mut out = Vec::new();
    if cs.len() <= TRACE_LINES {
        out.extend(cs.iter().enumerate().map(|(i, c)| line(i, c)));
    } else {
        let half = TRACE_LINES / 2;
        out.extend(cs[..half].iter().enumerate().map(|(i, c)| line(i, c)));
        out.push(format!("      ... {} configurations ...", cs.len() - TRACE_LINES));
        let start = cs.len() - half;
        out.extend(cs[start..].iter().enumerate().map(|(i, c)| line(start + i, c)));
    }
    out.join("\n")
}

fn max_coins<P: crate::ast::Payload>(ts: impl IntoIterator<Item = Trace<P>>) -> u32 {
    ts.into_iter().map(|t| t.coins()).max().unwrap_or(0)
}

/// PMTO for `e1`, `e2`: the observable trace distributions after `n` steps are
/// exactly equal.
pub fn check_pmto(p1: &Program, p2: &Program, n: u32, opts: Opts) -> Verdict {
    if let Err(v) = precondition(p1, opts).and_then(|_| precondition(p2, opts)) {
        return v;
    }
    let (o1, o2) = (crate::adversary::obs(&p1.expr), crate::adversary::obs(&p2.expr));
    if o1 != o2 {
        return Verdict::inapplicable(format!(
            "the programs are not observationally equal:\n{}\nvs\n{}",
            pretty(&o1),
            pretty(&o2)
        ));
    }
    let run = |p: &Program| obs_nstep_d(&machine(p, opts), n, &Config::initial(&p.expr));
    let ((v1, k1), (v2, k2)) = match (run(p1), run(p2)) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => return Verdict::from_sem(e, n),
    };
    let coins = k1.max(k2);
    for (t, m1, m2) in class_masses(&|a, b| a == b, &v1, &v2) {
        if m1 != m2 {
            let text = format!("observable trace with different mass:\n{}", render_trace(&t));
            return Verdict::fail(text, Some((m1.to_ratio(), m2.to_ratio())), n, coins);
        }
    }
    Verdict::pass(n, coins)
}

fn over_budget<A>(m: &Machine, t: &ITree<A>) -> Result<(), SemError> {
    if t.depth() > m.max_coins as usize {
        return Err(SemError::CoinBudget { cap: m.max_coins });
    }
    Ok(())
}

/// Differences between two outcome distributions, first one found.
fn first_difference<A: Clone + Eq + std::hash::Hash>(a: &ITree<A>, b: &ITree<A>) -> Option<(A, Dyadic, Dyadic)> {
    let (da, db) = (a.to_dmap(), b.to_dmap());
    class_masses(&|x, y| x == y, &da, &db).into_iter().find(|(_, x, y)| x != y)
}

/// The mixed run projects onto the intensional standard run, and the intensional
/// run agrees outcome by outcome with the denotational one.
///
/// Trees of traces are equal exactly when the trees of configurations agree at
/// every step, so both runs advance one configuration per world and are compared
/// after each step. For the second part each trace is named by an id interned
/// from its predecessor's id and its last configuration, shared by both monads.
pub fn check_simulation(p: &Program, n: u32, opts: Opts) -> Verdict {
    let m = machine(p, opts);
    let init = Config::initial(&p.expr);
    let mut std_tree: ITree<(u32, SConfig)> = ITree::leaf((0, init.clone()));
    let mut mixed: ITree<sem_mixed::MConfig> = ITree::leaf(sem_mixed::initial(&p.expr));
    let mut den: Vec<((u32, SConfig), Dyadic)> = vec![((0, init), Dyadic::ONE)];
    let mut coins = 0;
    for i in 0..=n {
        let configs = imap(&std_tree, |(_, c)| c.clone());
        let projected = ibind(&mixed, sem_mixed::project_config);
        if projected != configs {
            let text = match first_difference(&projected, &configs) {
                Some((c, a, b)) => format!(
                    "after {i} steps the projected mixed run and the standard run disagree on:\n{c}"
                ) + &format!("\n(masses {a} vs {b})"),
                None => format!("after {i} steps the projected mixed run and the standard run differ as trees"),
            };
            let probs = first_difference(&projected, &configs).map(|(_, a, b)| (a.to_ratio(), b.to_ratio()));
            return Verdict::fail(text, probs, i, coins);
        }
        if i == n {
            break;
        }
        let mut ids: HashMap<(u32, SConfig), u32> = HashMap::new();
        let mut intern = |id: u32, c: &SConfig| -> u32 {
            let fresh = ids.len() as u32;
            *ids.entry((id, c.clone())).or_insert(fresh)
        };
        let next = try_ibind(&std_tree, |(id, c)| {
            let t = step_i(&m, i, c)?;
            Ok(imap(&t, |c2| (intern(*id, c2), c2.clone())))
        });
        std_tree = match next.and_then(|t| over_budget(&m, &t).map(|_| t)) {
            Ok(t) => t,
            Err(e) => return Verdict::from_sem(e, i),
        };
        coins = std_tree.depth() as u32;
        mixed = match try_ibind(&mixed, |c| sem_mixed::mstep(&m, i, c)) {
            Ok(t) => t,
            Err(e) => return Verdict::from_sem(e, i),
        };
        let mut out: Vec<((u32, SConfig), Dyadic)> = Vec::new();
        let mut index: HashMap<u32, usize> = HashMap::new();
        for ((id, c), w) in &den {
            let d = match step_d(&m, i, c) {
                Ok(d) => d,
                Err(e) => return Verdict::from_sem(e, i),
            };
            for (c2, q) in d.into_entries() {
                let id2 = intern(*id, &c2);
                match index.get(&id2) {
                    Some(&j) => out[j].1 += q * *w,
                    None => {
                        index.insert(id2, out.len());
                        out.push(((id2, c2), q * *w));
                    }
                }
            }
        }
        den = out;
    }
    let int = imap(&std_tree, |(id, _)| *id).to_dmap();
    let den_ids = DMap::from_entries(den.iter().map(|((id, _), w)| (*id, *w)).collect());
    for (id, mi, md) in class_masses(&|a, b| a == b, &int, &den_ids) {
        if mi != md {
            let last = den
                .iter()
                .map(|((j, c), _)| (*j, c.clone()))
                .chain(std_tree.leaves().into_iter().map(|(x, _)| x.clone()))
                .find(|(j, _)| *j == id)
                .map(|(_, c)| c.to_string())
                .unwrap_or_default();
            let text = format!("intensional and denotational runs disagree on a trace ending in:\n{last}");
            return Verdict::fail(text, Some((mi.to_ratio(), md.to_ratio())), n, coins);
        }
    }
    Verdict::pass(n, coins)
}

/// Runs the mixed semantics step by step and hands each step's tree to `visit`,
/// the initial configuration included. `on_event` sees every sampling step
/// together with the tree it was taken from.
fn walk_mixed(
    p: &Program,
    n: u32,
    opts: Opts,
    visit: &mut dyn FnMut(&ITree<MTrace>) -> Option<Verdict>,
    on_event: &mut dyn FnMut(&ITree<MTrace>, &MTrace, Why, &[crate::dist::BitTree]) -> Option<Verdict>,
) -> Verdict {
    let m = machine(p, opts);
    let mut run = IRun::new(m, sem_mixed::initial(&p.expr));
    let mut coins = 0;
    for step in 0..=n {
        coins = coins.max(max_coins(run.tree.leaves().into_iter().map(|(t, _)| t.clone())));
        if let Some(mut v) = visit(&run.tree) {
            v.steps_used = step;
            v.coins_used = coins;
            return v;
        }
        if step == n {
            break;
        }
        let prev = run.tree.clone();
        let mut failed = None;
        let r = run.advance_with(&mut |ev| {
            if failed.is_none() {
                failed = on_event(&prev, ev.trace, ev.why, ev.sources);
            }
            Ok(())
        });
        if let Some(mut v) = failed {
            v.steps_used = step;
            v.coins_used = coins;
            return v;
        }
        if let Err(e) = r {
            return Verdict::from_sem(e, step);
        }
    }
    Verdict::pass(n, coins)
}

/// FLIP-VALUE holds at every reachable configuration of every world within `n`
/// steps, where each world's history is the event of having produced it.
pub fn check_preservation(p: &Program, n: u32, opts: Opts) -> Verdict {
    if let Err(v) = precondition(p, opts) {
        return v;
    }
    let mut seen: HashSet<u64> = HashSet::new();
    let mut visit = |tree: &ITree<MTrace>| -> Option<Verdict> {
        let worlds: Vec<MTrace> = tree.leaves().into_iter().map(|(t, _)| t.clone()).collect();
        for t in &worlds {
            let fb = FbSet::of_config(t.last());
            if fb.flips.is_empty() {
                continue;
            }
            let phi = History::of_world(tree, t);
            let key = fingerprint(&fb, &phi);
            if !seen.insert(key) {
                continue;
            }
            match check_fbset(&fb, &phi, &p.poset) {
                Ok(Ok(())) => {}
                Ok(Err(v)) => {
                    let probs = match &v.failure {
                        sem_mixed::FlipFailure::NotUniform(pr) => Some((*pr, Prob::new(1, 2))),
                        sem_mixed::FlipFailure::NotIndependent => None,
                    };
                    let text = format!("FLIP-VALUE violated: {v}\nin configuration:\n{}", t.last());
                    return Some(Verdict::fail(text, probs, 0, 0));
                }
                Err(e) => return Some(Verdict::fail(format!("history of a reached world: {e}"), None, 0, 0)),
            }
        }
        None
    };
    walk_mixed(p, n, opts, &mut visit, &mut |_, _, _, _| None)
}

fn fingerprint(fb: &FbSet, phi: &History) -> u64 {
    use std::hash::{Hash, Hasher};
    let mut h = std::collections::hash_map::DefaultHasher::new();
    fb.flips.hash(&mut h);
    fb.bits.hash(&mut h);
    phi.events.hash(&mut h);
    h.finish()
}

/// No world gets stuck within `n` steps.
pub fn check_progress(p: &Program, n: u32, opts: Opts) -> Verdict {
    if let Err(v) = precondition(p, opts) {
        return v;
    }
    let m = machine(p, opts);
    let mut tree = ITree::leaf(Config::initial(&p.expr));
    for i in 0..n {
        match try_ibind(&tree, |c| step_i(&m, i, c)).and_then(|t| over_budget(&m, &t).map(|_| t)) {
            Ok(t) => tree = t,
            Err(e) => return Verdict::from_sem(e, i),
        }
    }
    Verdict::pass(n, tree.depth() as u32)
}

/// Every `castP` of a random value is uniform given the history of its world:
/// each outcome of the revealed bits has conditional probability `2^-k`.
pub fn check_reveal_uniformity(p: &Program, n: u32, opts: Opts) -> Verdict {
    if let Err(v) = precondition(p, opts) {
        return v;
    }
    let mut cache: HashMap<(usize, u64), ()> = HashMap::new();
    let mut on_event = |tree: &ITree<MTrace>, t: &MTrace, why: Why, sources: &[crate::dist::BitTree]| {
        if why != Why::Reveal {
            return None;
        }
        let phi = History::of_world(tree, t);
        let key = {
            use std::hash::{Hash, Hasher};
            let mut h = std::collections::hash_map::DefaultHasher::new();
            sources.hash(&mut h);
            phi.events.hash(&mut h);
            (sources.len(), h.finish())
        };
        if cache.insert(key, ()).is_some() {
            return None;
        }
        let k = sources.len() as u32;
        let joint = isequence(sources);
        let expected = Dyadic::pow2_inv(k).to_ratio();
        // heads first, so the all-ones outcome is tried before the others
        for bits in assignments(k) {
            let pr = match cond_prob(&[(joint.clone(), bits.clone())], &joint_given(&phi)) {
                Ok(pr) => pr,
                Err(e) => return Some(Verdict::fail(format!("history of a reached world: {e}"), None, 0, 0)),
            };
            if pr != expected {
                let shown: String = bits.iter().rev().map(|b| if *b { '1' } else { '0' }).collect();
                let text = format!(
                    "reveal of {} bit(s) is not uniform: outcome {shown} has conditional probability {pr}, expected {expected}\nbefore the reveal:\n{}",
                    k,
                    t.last()
                );
                return Some(Verdict::fail(text, Some((pr, expected)), 0, 0));
            }
        }
        None
    };
    walk_mixed(p, n, opts, &mut |_| None, &mut on_event)
}

/// `Φ` over vectors: the world indicator lifted to the joint's outcome type.
fn joint_given(phi: &History) -> Vec<(ITree<Vec<bool>>, Vec<bool>)> {
    phi.events.iter().map(|(t, b)| (crate::dist::imap(t, |x| vec![*x]), vec![*b])).collect()
}

/// All assignments of `k` bits, the all-ones assignment first.
fn assignments(k: u32) -> Vec<Vec<bool>> {
    (0..1u64 << k)
        .rev()
        .map(|m| (0..k).map(|i| m >> i & 1 == 1).collect())
        .collect()
}
