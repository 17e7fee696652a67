//! Random canonical trees for the distribution laws.

use obliv::dist::{BitTree, Coin, ITree};
use proptest::prelude::*;

/// Complete tree over `coins` (ascending) with the given leaves; `node` collapses
/// equal children so the result is canonical.
pub fn build<A: Clone + PartialEq>(coins: &[u32], leaves: &[A]) -> ITree<A> {
    match coins.split_first() {
        None => ITree::leaf(leaves[0].clone()),
        Some((&c, rest)) => {
            let half = leaves.len() / 2;
            ITree::node(Coin::new(c, 0), build(rest, &leaves[..half]), build(rest, &leaves[half..]))
        }
    }
}

/// Up to `k` distinct coin slots below 7, in ascending order.
fn coin_set(k: usize) -> impl Strategy<Value = Vec<u32>> {
    proptest::collection::btree_set(0u32..7, 0..=k).prop_map(|s| s.into_iter().collect())
}

pub fn tree_of<A: Clone + PartialEq + std::fmt::Debug + 'static>(
    k: usize,
    leaf: impl Strategy<Value = A> + Clone + 'static,
) -> impl Strategy<Value = ITree<A>> {
    coin_set(k).prop_flat_map(move |cs| {
        let n = 1usize << cs.len();
        proptest::collection::vec(leaf.clone(), n).prop_map(move |ls| build(&cs, &ls))
    })
}

pub fn small_tree() -> impl Strategy<Value = ITree<u8>> {
    tree_of(3, 0u8..4)
}

/// A continuation given as a table of trees indexed by the argument.
pub fn table() -> impl Strategy<Value = Vec<ITree<u8>>> {
    proptest::collection::vec(small_tree(), 4)
}

pub fn apply(t: &[ITree<u8>], a: u8) -> ITree<u8> {
    t[a as usize % t.len()].clone()
}

/// A guard over one coin set and two branches over disjoint coin sets with the
/// same leaf multiset, so their distributions agree.
pub fn cond_case() -> impl Strategy<Value = (BitTree, BitTree, BitTree)> {
    (proptest::collection::vec(any::<bool>(), 4), proptest::collection::vec(any::<bool>(), 4), any::<u8>()).prop_map(
        |(g, bs, shift)| {
            let guard = build(&[0, 1], &g);
            let a = build(&[2, 3], &bs);
            // the second branch reads the same leaves through reversed coins
            let rev: Vec<bool> = [0, 2, 1, 3].iter().map(|&i| bs[i]).collect();
            let b = if shift % 2 == 0 { build(&[4, 5], &bs) } else { build(&[4, 5], &rev) };
            (guard, a, b)
        },
    )
}
