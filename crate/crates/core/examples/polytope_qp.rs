//! QP with equality and inequality rows, solved both ways.
//!
//! cargo run --example polytope_qp

use nalgebra::{DMatrix, DVector};

use incentive_mpc::solvers::{
    solve_polytope_with, BoxSet, DenseQuadratic, PolytopeMethod, PolytopeOptions, PolytopeProgram,
};

fn main() -> incentive_mpc::Result<()> {
    // min ½‖z − (1, 2, 3)‖²  s.t.  z₀ + z₁ + z₂ = 3,  z₀ − z₂ ≤ −1,  0 ≤ z ≤ 2
    let f = DenseQuadratic { q: DMatrix::identity(3, 3), b: DVector::from_vec(vec![1.0, 2.0, 3.0]) };
    let prog = PolytopeProgram::new(&f, BoxSet::uniform(3, 0.0, 2.0)?)
        .with_eq(DMatrix::from_row_slice(1, 3, &[1.0, 1.0, 1.0]), DVector::from_element(1, 3.0))
        .with_ineq(DMatrix::from_row_slice(1, 3, &[1.0, 0.0, -1.0]), DVector::from_element(1, -1.0));

    for method in [PolytopeMethod::InteriorPoint, PolytopeMethod::AugmentedLagrangian] {
        let opts = PolytopeOptions { tol_feas: 1e-10, tol_opt: 1e-10, method, ..Default::default() };
        let sol = solve_polytope_with(&prog, &opts, None)?;
        println!(
            "{method:?}: z = {:.6?}  feas {:.1e}  stat {:.1e}  iters {}",
            sol.z.as_slice(),
            sol.feasibility,
            sol.stationarity,
            sol.outer_iterations
        );
    }
    Ok(())
}
