use std::collections::BTreeSet;

use obliv::dist::{
    cond_prob, dbind, dbit, dreturn, ibind, ibit, icond, ireturn, is_indep, joint_prob, Coin, DMap,
    Dyadic, ITree,
};
use proptest::prelude::*;

mod common;

use common::trees::{apply, cond_case, small_tree, table, tree_of};

/// Probability of each outcome computed by enumerating every assignment of
/// the coins the tree mentions and counting.
fn count_prob<A: PartialEq>(x: &ITree<A>, pred: impl Fn(&A) -> bool) -> Dyadic {
    let coins: Vec<Coin> = x.coins().into_iter().collect();
    let k = coins.len() as u32;
    let mut hits = 0u128;
    for m in 0..1u64 << k {
        let a = x.index_with(|c| {
            let i = coins.iter().position(|d| *d == c).unwrap();
            m >> i & 1 == 1
        });
        if pred(a) {
            hits += 1;
        }
    }
    Dyadic::new(hits, k)
}

fn all_paths(coins: &BTreeSet<Coin>) -> Vec<Vec<(Coin, bool)>> {
    let cs: Vec<Coin> = coins.iter().copied().collect();
    (0..1u64 << cs.len())
        .map(|m| cs.iter().enumerate().map(|(i, c)| (*c, m >> i & 1 == 1)).collect())
        .collect()
}

fn dmap_of(x: &ITree<u8>) -> DMap<u8> {
    x.to_dmap()
}

proptest! {
    #[test]
    fn i_left_unit(a in 0u8..4, f in table()) {
        prop_assert_eq!(ibind(&ireturn(a), |v| apply(&f, *v)), apply(&f, a));
    }

    #[test]
    fn i_right_unit(x in small_tree()) {
        prop_assert_eq!(ibind(&x, |v| ireturn(*v)), x);
    }

    #[test]
    fn i_associativity(x in small_tree(), f in table(), g in table()) {
        let lhs = ibind(&ibind(&x, |a| apply(&f, *a)), |b| apply(&g, *b));
        let rhs = ibind(&x, |a| ibind(&apply(&f, *a), |b| apply(&g, *b)));
        prop_assert_eq!(lhs, rhs);
    }

    #[test]
    fn i_commutativity(x in small_tree(), y in small_tree()) {
        let lhs = ibind(&x, |a| ibind(&y, |b| ireturn((*a, *b))));
        let rhs = ibind(&y, |b| ibind(&x, |a| ireturn((*a, *b))));
        prop_assert_eq!(lhs, rhs);
    }

    #[test]
    fn i_idempotence(x in small_tree(), f in proptest::collection::vec(small_tree(), 16)) {
        let pick = |a: u8, b: u8| f[(a as usize * 4 + b as usize) % 16].clone();
        let lhs = ibind(&x, |a| ibind(&x, |b| pick(*a, *b)));
        let rhs = ibind(&x, |a| pick(*a, *a));
        prop_assert_eq!(lhs, rhs);
    }

    #[test]
    fn d_left_unit(a in 0u8..4, f in table()) {
        prop_assert_eq!(dbind(&dreturn(a), |v| dmap_of(&apply(&f, *v))), dmap_of(&apply(&f, a)));
    }

    #[test]
    fn d_right_unit(x in small_tree()) {
        let d = dmap_of(&x);
        prop_assert_eq!(dbind(&d, |v| dreturn(*v)), d);
    }

    #[test]
    fn d_associativity(x in small_tree(), f in table(), g in table()) {
        let d = dmap_of(&x);
        let lhs = dbind(&dbind(&d, |a| dmap_of(&apply(&f, *a))), |b| dmap_of(&apply(&g, *b)));
        let rhs = dbind(&d, |a| dbind(&dmap_of(&apply(&f, *a)), |b| dmap_of(&apply(&g, *b))));
        prop_assert_eq!(lhs, rhs);
    }

    #[test]
    fn index_law(x in small_tree(), f in table()) {
        let bound = ibind(&x, |a| apply(&f, *a));
        let mut coins = x.coins();
        for t in &f {
            t.collect_coins(&mut coins);
        }
        for p in all_paths(&coins) {
            let inner = apply(&f, *x.index(&p));
            prop_assert_eq!(bound.index(&p), inner.index(&p));
        }
    }

    #[test]
    fn joint_prob_matches_path_counting(x in small_tree(), a in 0u8..4) {
        prop_assert_eq!(joint_prob(&[(x.clone(), a)]), count_prob(&x, |v| *v == a));
    }

    #[test]
    fn to_dmap_agrees_with_the_tree(x in small_tree()) {
        let d = x.to_dmap();
        for a in 0u8..4 {
            prop_assert_eq!(d.mass_of(&a), count_prob(&x, |v| *v == a));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn trees_are_proper_distributions(x in tree_of(5, 0u8..6)) {
        let support: BTreeSet<u8> = x.worlds().into_iter().map(|(_, a)| *a).collect();
        let total: Dyadic = support.iter().map(|a| joint_prob(&[(x.clone(), *a)])).sum();
        prop_assert_eq!(total, Dyadic::ONE);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn cond_is_stable_under_an_independent_guard((g, a, b) in cond_case()) {
        let c = icond(&g, &a, &b);
        prop_assert_eq!(c.to_dmap(), a.to_dmap());
        prop_assert_eq!(c.to_dmap(), b.to_dmap());
        if joint_prob(&[(g.clone(), true)]).is_zero() || joint_prob(&[(g.clone(), false)]).is_zero() {
            return Ok(());
        }
        prop_assert!(is_indep(&[c], &[g], &[]).unwrap());
    }
}

#[test]
fn distinct_bits_are_independent() {
    for n in 0..=6 {
        for m in 0..=6 {
            let r = is_indep(&[ibit(n)], &[ibit(m)], &[]).unwrap();
            assert_eq!(r, n != m, "bit({n}) vs bit({m})");
        }
    }
}

#[test]
fn d_is_not_idempotent() {
    let x = dbit(0);
    let twice = dbind(&x, |a| dbind(&x, |b| dreturn((*a, *b))));
    let once = dbind(&x, |a| dreturn((*a, *a)));
    assert_ne!(twice, once);
    assert_eq!(twice.mass_of(&(true, false)), Dyadic::new(1, 2));
    assert_eq!(once.mass_of(&(true, false)), Dyadic::ZERO);
    // the intensional reading shares the coin
    let xi = ibit(0);
    let ti = ibind(&xi, |a| ibind(&xi, |b| ireturn((*a, *b))));
    assert_eq!(ti, ibind(&xi, |a| ireturn((*a, *a))));
}

#[test]
fn conditioning_on_an_equal_bit_is_certain() {
    let x = ibit(3);
    let p = cond_prob(&[(x.clone(), true)], &[(x.clone(), true)]).unwrap();
    assert_eq!(p, Dyadic::ONE.to_ratio());
    assert!(cond_prob(&[(x.clone(), true)], &[(x.clone(), true), (x, false)]).is_err());
}
