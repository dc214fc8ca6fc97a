//! Accelerated proximal gradient on a box-constrained QP with an ℓ1 term.
//!
//! cargo run --example box_qp

use nalgebra::{DMatrix, DVector};

use incentive_mpc::solvers::{solve_composite, BoxSet, CompositeObjective, DenseQuadratic, L1Prox};

fn main() -> incentive_mpc::Result<()> {
    // ½wᵀQw − bᵀw + 0.1‖w‖₁ over [−1, 1]³
    let q = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.0, 1.0, 3.0, 0.5, 0.0, 0.5, 2.0]);
    let b = DVector::from_vec(vec![6.0, -1.0, 0.05]);
    let m = q.clone().symmetric_eigen().eigenvalues.min();
    let f = DenseQuadratic { q, b };
    let h = L1Prox { weight: 0.1 };
    let bx = BoxSet::uniform(3, -1.0, 1.0)?;

    let sol = solve_composite(&CompositeObjective::new(&f, &h, m), &bx, 1e-10, 10_000)?;
    println!("w = {:.6?}", sol.w.as_slice());
    println!("objective {:.8}  iterations {}", sol.objective, sol.iterations);
    Ok(())
}
