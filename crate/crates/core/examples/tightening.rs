//! Robust tightening of a storage band against follower error, checked by
//! sampling.
//!
//! cargo run --example tightening

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use incentive_mpc::bimpc::{build_batch, tighten_grouped};

fn main() -> incentive_mpc::Result<()> {
    // x_{k+1} = x_k + u_k − w_k with 0 ≤ x_k ≤ 1 over 6 steps.
    let n = 6;
    let one = DMatrix::from_element(1, 1, 1.0);
    let bd = build_batch(&one, &one, &(-&one), n)?;
    let mut c = DMatrix::zeros(2 * (n + 1), n + 1);
    let mut d = DVector::zeros(2 * (n + 1));
    for k in 0..=n {
        c[(k, k)] = 1.0;
        d[k] = 1.0;
        c[(n + 1 + k, k)] = -1.0;
    }
    let radius = 0.02;
    for hr in [1, 3, n] {
        let tp = tighten_grouped(&c, &d, &bd.b2_bar, &[radius], hr)?;
        println!("horizon_r {hr}: upper bounds {:.4?}", &tp.d_tight().as_slice()[..=n]);
    }

    let tp = tighten_grouped(&c, &d, &bd.b2_bar, &[radius], n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = DVector::from_fn(n + 1, |k, _| (1.0 - tp.tightening[k]).min(0.5 + 0.1 * k as f64));
    let mut worst = f64::INFINITY;
    for _ in 0..10_000 {
        let e = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let e = e.normalize() * radius;
        worst = worst.min((&d - &c * (&x + &bd.b2_bar * e)).min());
    }
    println!("worst slack over 10⁴ disturbances: {worst:.3e}");
    Ok(())
}
