//! Acceptance criteria, one line each. Runs without the libtest harness so the
//! lines are always printed; exits non-zero when any criterion fails.

mod common;

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use obliv::adversary::{accesses, low_equiv, obs_lift_d};
use obliv::ast::{eq_memo, nat_value, parse_program, CastOp, Expr, ExprKind, Label, Program, Region, SExpr};
use obliv::dist::{
    dbind, dbit, dreturn, ibind, ibit, icond, imap, ireturn, is_indep, joint_prob, BitTree, Coin, Dyadic, ITree,
    Prob,
};
use obliv::harness::{check_pmto, check_preservation, check_progress, check_reveal_uniformity, Opts, Status};
use obliv::sem_mixed::{self, mnstep, project_tree, MConfig};
use obliv::sem_standard::{nstep_d, nstep_i, terminated, Config, Machine, Store, Trace};
use obliv::surface::{check_program, corpus, corpus_dir, Corpus, Entry};
use proptest::strategy::{Strategy, ValueTree};
use proptest::test_runner::{Config as RunnerConfig, TestRunner};

use common::trees::{apply, cond_case, small_tree, table, tree_of};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($arg:tt)*) => {
        if !$cond {
            return Err(format!($($arg)*));
        }
    };
}

fn load(c: &Corpus, name: &str) -> (Entry, Program) {
    let e = c.programs.iter().find(|e| e.name == name).unwrap_or_else(|| panic!("no corpus entry {name}"));
    (e.clone(), e.load().unwrap())
}

fn program(src: &str) -> Program {
    parse_program(src).unwrap_or_else(|e| panic!("{e}\n{src}"))
}

fn bit_p(e: &SExpr) -> Option<bool> {
    match e.kind() {
        ExprKind::BitV(b, Label::P, _) => Some(*b),
        _ => None,
    }
}

/// Typechecker goldens: the leaky programs fail at the named rules, the
/// oblivious ones are accepted, and the unpatched stack fails at the tag.
fn typechecker_goldens() -> Outcome {
    let c = corpus().unwrap();
    let rejects = [
        ("double_reveal_s0", "VARA"),
        ("double_reveal_s1", "VARA"),
        ("biased_flip_s0", "MUX-FLIP"),
        ("biased_flip_s1", "MUX-FLIP"),
        ("region_order_bad", "MUX-FLIP"),
        ("ostack_unpatched", "APP"),
    ];
    for (name, rule) in rejects {
        let (_, p) = load(&c, name);
        match check_program(&p) {
            Ok(t) => return Err(format!("{name} accepted at {t}")),
            Err(e) => ensure!(e.rule == rule, "{name}: expected {rule}, got {e}"),
        }
    }
    let (_, p) = load(&c, "ostack_unpatched");
    let e = check_program(&p).unwrap_err();
    ensure!(
        e.detail.contains("argument 3") && e.detail.contains("expected bitS^r, found bitS^t"),
        "unpatched stack rejected for another reason: {e}"
    );
    let src = std::fs::read_to_string(corpus_dir().join("ostack_unpatched.ol")).unwrap();
    let line = e.span.map(|s| s.line).unwrap_or(0) as usize;
    let at = src.lines().nth(line.saturating_sub(1)).unwrap_or("");
    ensure!(at.contains("noram_add"), "error not at the add call: line {line}: {at}");
    let accepts = ["reveal_table_s0", "reveal_table_s1", "region_order_ok", "noram", "recursive_oram", "ostack"];
    for name in accepts {
        let (_, p) = load(&c, name);
        if let Err(e) = check_program(&p) {
            return Err(format!("{name} rejected: {e}"));
        }
    }
    Ok(format!("{} rejected with their rules, {} accepted", rejects.len(), accepts.len()))
}

/// The flip bound to `sk` along a trace.
fn sk_of(t: &Trace<bool>) -> Option<bool> {
    t.configs().iter().find_map(|c| match c.expr.kind() {
        ExprKind::Let(x, v, _) if &**x == "sk" => match v.kind() {
            ExprKind::FlipV(b, ..) => Some(*b),
            _ => None,
        },
        _ => None,
    })
}

/// The address table for the scrambled two-cell lookup, and equal adversary views.
fn address_traces() -> Outcome {
    let c = corpus().unwrap();
    let mut views = Vec::new();
    let mut seen = 0;
    for s in [false, true] {
        let (e, p) = load(&c, if s { "reveal_table_s1" } else { "reveal_table_s0" });
        let d = nstep_d(&Machine::for_program(&p), e.steps, &Config::initial(&p.expr)).map_err(|e| e.to_string())?;
        ensure!(d.mass() == Dyadic::ONE, "mass {}", d.mass());
        for (t, m) in d.entries() {
            ensure!(terminated(t), "s={s}: run did not finish");
            let sk = sk_of(t).ok_or("no sk binding in the trace")?;
            let expect = vec![0, 1, (s ^ sk) as usize];
            let got = accesses(t);
            ensure!(got == expect, "s={} sk={}: trace {:?}, expected {:?}", s as u8, sk as u8, got, expect);
            ensure!(*m == Dyadic::HALF, "s={} sk={}: mass {m}", s as u8, sk as u8);
            // s0 = 1 and s1 = 0, so looking up s yields !s
            let out = match t.last().expr.kind() {
                ExprKind::BitV(b, Label::S, _) => *b,
                _ => return Err(format!("unexpected result {}", t.last().expr)),
            };
            ensure!(out == !s, "lookup of {} returned {}", s as u8, out as u8);
            seen += 1;
        }
        views.push(obs_lift_d(&d));
    }
    ensure!(seen == 4, "{seen} traces instead of four");
    ensure!(views[0] == views[1], "observation distributions differ");
    ensure!(views[0].len() == 2, "{} observations", views[0].len());
    for (_, m) in views[0].entries() {
        ensure!(*m == Dyadic::HALF, "observation mass {m}");
    }
    Ok("traces 0,1,0 and 0,1,1 at 1/2 for both secrets".into())
}

/// Runs to termination under the denotational monad.
fn run_d(p: &Program, dynamic: bool, bound: u32) -> Result<obliv::dist::DMap<Trace<bool>>, String> {
    let m = if dynamic { Machine::for_program(p).permissive() } else { Machine::for_program(p) };
    let d = nstep_d(&m, bound, &Config::initial(&p.expr)).map_err(|e| e.to_string())?;
    ensure!(d.entries().iter().all(|(t, _)| terminated(t)), "not finished within {bound} steps");
    Ok(d)
}

/// The biased coin's exact bias, and the certain second reveal.
fn leak_quantification() -> Outcome {
    let p = program("region r;\nlet (sx, sy) = (flip^r(), flip^r()) in\nlet (sk, _) = mux(castS(sx), sx, sy) in\ncastP(sk)");
    let d = run_d(&p, true, 40)?;
    let ones = d.prob(|t| bit_p(&t.last().expr) == Some(true));
    ensure!(ones == Dyadic::new(3, 2), "Pr[sk = 1] = {ones}");

    let c = corpus().unwrap();
    let (e, p) = load(&c, "double_reveal_s1");
    let v = check_reveal_uniformity(&p, e.steps, Opts::dynamic());
    ensure!(v.status == Status::Fail, "double reveal with s = 1: {}", v.status);
    let probs = v.witness.as_ref().and_then(|w| w.probs).ok_or("no probabilities in the witness")?;
    ensure!(probs.0 == Prob::from_integer(1), "second reveal has probability {}", probs.0);
    ensure!(probs.1 == Prob::new(1, 2), "expected side {}", probs.1);
    let (e0, p0) = load(&c, "double_reveal_s0");
    let v0 = check_reveal_uniformity(&p0, e0.steps, Opts::dynamic());
    ensure!(v0.is_pass(), "double reveal with s = 0 should be uniform:\n{v0}");
    Ok(format!("Pr[sk = 1] = {}, second reveal at {}", ones.to_ratio(), probs.0))
}

fn bitv_p(b: bool) -> Expr<BitTree> {
    Expr::bitv(ITree::leaf(b), Label::P, Region::Bot)
}

/// The mixed run of a doubly revealed flip, step by step.
fn two_world_tree() -> Outcome {
    let p = program("region r;\nlet x = flip^r() in (castP(x), castP(x))");
    let m = Machine::for_program(&p).permissive();
    let r = Region::named("r");
    let last = |n: u32| -> Result<ITree<MConfig>, String> {
        let t = mnstep(&m, n, &sem_mixed::initial(&p.expr)).map_err(|e| e.to_string())?;
        Ok(imap(&t, |t| t.last().clone()))
    };
    let coin = Coin::new(0, 0);
    let config = |e: Expr<BitTree>| ITree::leaf(Config::new(Store::new(), e));
    let pending = |b: bool| Expr::tuple(bitv_p(b), Expr::cast(CastOp::P, Expr::flipv(ibit(0), r.clone())));
    let mid = ITree::node(coin, config(pending(true)), config(pending(false)));
    ensure!(last(3)? == mid, "after the first reveal:\n{}", last(3)?);
    let fin = ITree::node(
        coin,
        config(Expr::tuple(bitv_p(true), bitv_p(true))),
        config(Expr::tuple(bitv_p(false), bitv_p(false))),
    );
    ensure!(last(4)? == fin, "final:\n{}", last(4)?);
    for n in 0..=5 {
        let mixed = mnstep(&m, n, &sem_mixed::initial(&p.expr)).map_err(|e| e.to_string())?;
        let std = nstep_i(&m, n, &Config::initial(&p.expr)).map_err(|e| e.to_string())?;
        ensure!(project_tree(&mixed) == std, "projection differs from the standard run at {n} steps");
    }
    let d = run_d(&p, true, 5)?;
    let finals = d.map(|t| t.last().expr.clone()).normalize();
    ensure!(finals.len() == 2, "{} outcomes", finals.len());
    for b in [true, false] {
        let e: SExpr = Expr::tuple(Expr::bitv(b, Label::P, Region::Bot), Expr::bitv(b, Label::P, Region::Bot));
        ensure!(finals.mass_of(&e) == Dyadic::HALF, "outcome {e} has mass {}", finals.mass_of(&e));
    }
    Ok("two worlds on coin 0; projection matches for 0..=5 steps".into())
}

fn sample<S: Strategy>(runner: &mut TestRunner, s: &S) -> S::Value {
    s.new_tree(runner).unwrap().current()
}

/// Monad laws, independence, conditional stability, properness, and the two
/// monads agreeing on every bundled program.
fn metatheory() -> Outcome {
    let mut runner = TestRunner::new(RunnerConfig { rng_seed: proptest::test_runner::RngSeed::Fixed(7), ..RunnerConfig::default() });
    let mut checks = 0;
    for _ in 0..200 {
        let (x, y, a) = (sample(&mut runner, &small_tree()), sample(&mut runner, &small_tree()), sample(&mut runner, &(0u8..4)));
        let (f, g) = (sample(&mut runner, &table()), sample(&mut runner, &table()));
        ensure!(ibind(&ireturn(a), |v| apply(&f, *v)) == apply(&f, a), "left unit");
        ensure!(ibind(&x, |v| ireturn(*v)) == x, "right unit");
        ensure!(
            ibind(&ibind(&x, |a| apply(&f, *a)), |b| apply(&g, *b))
                == ibind(&x, |a| ibind(&apply(&f, *a), |b| apply(&g, *b))),
            "associativity"
        );
        ensure!(
            ibind(&x, |a| ibind(&y, |b| ireturn((*a, *b)))) == ibind(&y, |b| ibind(&x, |a| ireturn((*a, *b)))),
            "commutativity"
        );
        let pick = |a: u8, b: u8| if (a + b) % 2 == 0 { apply(&f, a) } else { apply(&g, b) };
        ensure!(ibind(&x, |a| ibind(&x, |b| pick(*a, *b))) == ibind(&x, |a| pick(*a, *a)), "idempotence");
        let (dx, df, dg) = (x.to_dmap(), |v: &u8| apply(&f, *v).to_dmap(), |v: &u8| apply(&g, *v).to_dmap());
        ensure!(dbind(&dreturn(a), df) == df(&a), "d left unit");
        ensure!(dbind(&dx, |v| dreturn(*v)) == dx, "d right unit");
        ensure!(dbind(&dbind(&dx, df), dg) == dbind(&dx, |a| dbind(&df(a), dg)), "d associativity");
        checks += 8;
    }
    let twice = dbind(&dbit(0), |a| dbind(&dbit(0), |b| dreturn((*a, *b))));
    ensure!(twice != dbind(&dbit(0), |a| dreturn((*a, *a))), "the denotational monad behaved idempotently");
    for n in 0..=6 {
        for m in 0..=6 {
            if n != m {
                ensure!(is_indep(&[ibit(n)], &[ibit(m)], &[]).unwrap(), "bit({n}) and bit({m}) dependent");
                checks += 1;
            }
        }
    }
    for _ in 0..200 {
        let (g, a, b) = sample(&mut runner, &cond_case());
        let c = icond(&g, &a, &b);
        ensure!(c.to_dmap() == a.to_dmap() && c.to_dmap() == b.to_dmap(), "cond changed the distribution");
        let certain = joint_prob(&[(g.clone(), true)]).is_zero() || joint_prob(&[(g.clone(), false)]).is_zero();
        ensure!(certain || is_indep(&[c], &[g], &[]).unwrap(), "cond result depends on its guard");
        checks += 1;
    }
    let proper = tree_of(5, 0u8..6);
    for _ in 0..500 {
        let x = sample(&mut runner, &proper);
        let mut support: Vec<u8> = x.worlds().into_iter().map(|(_, a)| *a).collect();
        support.sort();
        support.dedup();
        let total: Dyadic = support.iter().map(|a| joint_prob(&[(x.clone(), *a)])).sum();
        ensure!(total == Dyadic::ONE, "mass {total}");
        checks += 1;
    }
    let c = corpus().unwrap();
    for e in &c.programs {
        let p = e.load().unwrap();
        let m = if e.dynamic { Machine::for_program(&p).permissive() } else { Machine::for_program(&p) };
        let c0 = Config::initial(&p.expr);
        let d = nstep_d(&m, e.steps, &c0).map_err(|err| format!("{}: {err}", e.name))?;
        let i = nstep_i(&m, e.steps, &c0).map_err(|err| format!("{}: {err}", e.name))?;
        ensure!(eq_memo::with(|| i.to_dmap() == d), "{}: the two monads disagree", e.name);
        checks += 1;
    }
    Ok(format!("{checks} exact checks"))
}

const MAX_COINS: u32 = 24;

/// Obliviousness of every low-equivalent well-typed pair, and preservation,
/// uniformity and progress for every well-typed program.
fn pmto_and_preservation() -> Outcome {
    let c = corpus().unwrap();
    let mut typed = 0;
    for e in &c.programs {
        let p = e.load().unwrap();
        if check_program(&p).is_err() {
            continue;
        }
        typed += 1;
        for (what, v) in [
            ("progress", check_progress(&p, e.steps, Opts::default())),
            ("preservation", check_preservation(&p, e.steps, Opts::default())),
            ("uniformity", check_reveal_uniformity(&p, e.steps, Opts::default())),
        ] {
            ensure!(v.is_pass(), "{} {what}:\n{v}", e.name);
            ensure!(v.coins_used <= MAX_COINS, "{} uses {} coins", e.name, v.coins_used);
        }
    }
    let mut pairs = 0;
    for pair in &c.pairs {
        let (_, a) = load(&c, &pair.left);
        let (_, b) = load(&c, &pair.right);
        if check_program(&a).is_err() || check_program(&b).is_err() {
            continue;
        }
        ensure!(low_equiv(&a.expr, &b.expr), "{} and {} are not low-equivalent", pair.left, pair.right);
        let v = check_pmto(&a, &b, pair.steps, Opts::default());
        ensure!(v.is_pass(), "{} / {}:\n{v}", pair.left, pair.right);
        ensure!(v.coins_used <= MAX_COINS, "{} / {} use {} coins", pair.left, pair.right, v.coins_used);
        pairs += 1;
    }
    // further access sequences against the same library
    let mut runner = TestRunner::deterministic();
    let ops = proptest::collection::vec(op(), 2);
    for _ in 0..4 {
        let (s1, s2) = (sample(&mut runner, &ops), sample(&mut runner, &ops));
        let a = program(&noram_client(&s1));
        let b = program(&noram_client(&s2));
        ensure!(low_equiv(&a.expr, &b.expr), "generated clients are not low-equivalent");
        let v = check_pmto(&a, &b, 2000, Opts::default());
        ensure!(v.is_pass(), "{s1:?} / {s2:?}:\n{v}");
        pairs += 1;
    }
    Ok(format!("{typed} programs, {pairs} pairs"))
}

/// A write flag, a logical index and a value.
type Op = (bool, u64, u64);

fn op() -> impl Strategy<Value = Op> {
    (proptest::bool::ANY, 0u64..2, 0u64..4)
}

fn library(file: &str) -> String {
    let src = std::fs::read_to_string(corpus_dir().join(file)).unwrap();
    let cut = src.find("\n# client").expect("corpus file has a client section");
    src[..cut + 1].to_string()
}

fn results(n: usize) -> String {
    let names: Vec<String> = (0..n).map(|i| format!("a{i}")).collect();
    names.iter().rev().skip(1).fold(names[n - 1].clone(), |acc, a| format!("({a}, {acc})"))
}

fn call(o: &Op) -> String {
    format!("{}S, {}nS, {}nS", o.0 as u8, o.1, o.2)
}

fn noram_client(ops: &[Op]) -> String {
    let mut s = library("noram.ol");
    s.push_str("let n = [empty(), empty(), empty()] in\nlet pm = (flip^t(), flip^t()) in\n");
    for (i, o) in ops.iter().enumerate() {
        s.push_str(&format!("let (a{i}, pm) = access(n, pm, {}) in\n", call(o)));
    }
    s.push_str(&results(ops.len()));
    s
}

fn recursive_client(ops: &[Op]) -> String {
    let mut s = library("recursive_oram.ol");
    s.push_str("let n = [empty(), empty(), empty()] in\nlet pm = [(flip^t(), flip^t())] in\nlet sp = (flip^t(), flip^t()) in\n");
    for (i, o) in ops.iter().enumerate() {
        s.push_str(&format!("let (a{i}, sp) = access(n, pm, sp, {}) in\n", call(o)));
    }
    s.push_str(&results(ops.len()));
    s
}

/// What each access returns under a plain map: the old value, 0 when unset.
fn reference(ops: &[Op]) -> Vec<u64> {
    let mut m: HashMap<u64, u64> = HashMap::new();
    ops.iter()
        .map(|&(w, i, v)| {
            let old = m.get(&i).copied().unwrap_or(0);
            if w {
                m.insert(i, v);
            }
            old
        })
        .collect()
}

fn nat_results(e: &SExpr, n: usize, out: &mut Vec<u64>) -> Option<()> {
    if n > 1 {
        let ExprKind::Tuple(a, b) = e.kind() else { return None };
        nat_results(a, 1, out)?;
        return nat_results(b, n - 1, out);
    }
    let ExprKind::NatV(bits, ..) = e.kind() else { return None };
    out.push(nat_value(bits)?);
    Some(())
}

/// Runs a client under the intensional monad and compares every world's
/// results with the reference map.
fn check_client(src: &str, ops: &[Op]) -> Result<usize, String> {
    let p = program(src);
    check_program(&p).map_err(|e| format!("client rejected: {e}"))?;
    let t = nstep_i(&Machine::for_program(&p), 4000, &Config::initial(&p.expr)).map_err(|e| e.to_string())?;
    let expect = reference(ops);
    let worlds = t.worlds();
    for (path, tr) in &worlds {
        ensure!(terminated(tr), "{ops:?}: unfinished world");
        let mut got = Vec::new();
        nat_results(&tr.last().expr, ops.len(), &mut got).ok_or(format!("{ops:?}: result {}", tr.last().expr))?;
        ensure!(got == expect, "{ops:?}: world {path:?} returned {got:?}, expected {expect:?}");
    }
    Ok(worlds.len())
}

/// Functional correctness of the ORAMs against a map over all coin worlds.
fn oram_oracle() -> Outcome {
    let mut worlds = 0;
    let mut runs = 0;
    let all: Vec<Op> = [false, true]
        .iter()
        .flat_map(|&w| (0..2).flat_map(move |i| (0..4).map(move |v| (w, i, v))))
        .collect();
    // every write followed by a read of the same index, and every pair of accesses
    for a in &all {
        for b in &all {
            let ops = [*a, *b];
            worlds += check_client(&noram_client(&ops), &ops)?;
            runs += 1;
        }
    }
    let mut runner = TestRunner::deterministic();
    let triples = proptest::collection::vec(op(), 3);
    for _ in 0..24 {
        let ops = sample(&mut runner, &triples);
        worlds += check_client(&noram_client(&ops), &ops)?;
        runs += 1;
    }
    for (w, i, v) in [(true, 0, 3), (true, 1, 2)] {
        let ops = [(w, i, v), (false, i, 0)];
        worlds += check_client(&recursive_client(&ops), &ops)?;
        runs += 1;
    }
    let pairs = proptest::collection::vec(op(), 2);
    for _ in 0..6 {
        let ops = sample(&mut runner, &pairs);
        worlds += check_client(&recursive_client(&ops), &ops)?;
        runs += 1;
    }
    Ok(format!("{runs} access sequences, {worlds} worlds"))
}

fn main() {
    let criteria: [(&str, Duration, fn() -> Outcome); 7] = [
        ("typechecker golden set", Duration::from_secs(1), typechecker_goldens),
        ("address traces of the scrambled lookup", Duration::from_secs(1), address_traces),
        ("leak quantification", Duration::from_secs(1), leak_quantification),
        ("two-world mixed run", Duration::from_secs(1), two_world_tree),
        ("metatheory property suites", Duration::from_secs(30), metatheory),
        ("PMTO and preservation over the corpus", Duration::from_secs(300), pmto_and_preservation),
        ("ORAM functional oracle", Duration::from_secs(60), oram_oracle),
    ];
    let mut failed = 0;
    for (i, (name, limit, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let r = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let took = start.elapsed();
        let r = match r {
            Ok(_) if took > *limit => Err(format!("took {took:.2?}, limit {limit:?}")),
            r => r,
        };
        match r {
            Ok(detail) => println!("criterion {} {name}: PASS ({took:.2?}) {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {} {name}: FAIL ({took:.2?})", i + 1);
                for line in why.lines() {
                    println!("    {line}");
                }
            }
        }
    }
    if failed > 0 {
        println!("{failed} of {} criteria failed", criteria.len());
        std::process::exit(1);
    }
    println!("all {} criteria passed", criteria.len());
}
