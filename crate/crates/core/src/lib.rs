//! An affine, information-flow typed calculus for oblivious probabilistic programs,
//! with a standard and a mixed semantics, adversary views and property checkers.

pub mod ast;
pub mod dist;
pub mod typecheck;
pub mod sem_standard;
pub mod sem_mixed;
pub mod adversary;
pub mod harness;
pub mod surface;
