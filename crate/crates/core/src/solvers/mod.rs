//! Convex solvers: accelerated proximal gradient over boxes, and an
//! interior-point method with an augmented-Lagrangian fallback over polytopes.

mod boxset;
mod composite;
mod interior;
mod polytope;

pub use boxset::{project_box, BoxSet};
pub use composite::{
    solve_composite, solve_composite_best, solve_composite_from, CompositeObjective, CompositeSolution, DenseQuadratic,
    DiagQuadratic, FnSmooth, L1Prox, LinearTerm, ProxTerm, SmoothTerm, ZeroProx,
};
pub use polytope::{
    solve_polytope, solve_polytope_with, PolytopeMethod, PolytopeOptions, PolytopeProgram, PolytopeSolution,
};
