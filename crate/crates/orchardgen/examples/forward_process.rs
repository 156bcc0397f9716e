//! Forward diffusion sanity check: simulate the step-by-step noising chain
//! many times and compare the empirical statistics of the final state
//! against the closed-form marginal.
//!
//! For a linear beta schedule, the distribution of x_T given x_0 is Gaussian
//! with mean sqrt(alpha_bar_T) * x_0 and per-element variance 1 - alpha_bar_T.
//! The step-by-step chain must agree with that closed form; this example
//! estimates both moments from 10_000 simulated chains.
//!
//! Run with: cargo run --example forward_process

use orchardgen::diffusion::{simulate_forward_chain, DiffusionSchedule};
use orchardgen::rng;
use orchardgen::{ImageTensor, Result};
use rand::Rng as _;

fn main() -> Result<()> {
    let steps = 50;
    let sched = DiffusionSchedule::linear(steps, 1e-3, 0.1)?;
    let mut master = rng::from_seed(20_240_817);

    // A fixed random 1x4x4 start image in model range [-1, 1].
    let mut x0 = ImageTensor::zeros(1, 4, 4);
    for y in 0..4 {
        for x in 0..4 {
            x0.set(0, y, x, master.gen_range(-1.0..1.0));
        }
    }

    let draws = 10_000;
    let n = x0.data().len();
    let mut sum = vec![0.0f64; n];
    let mut sum_sq = vec![0.0f64; n];
    for i in 0..draws {
        let mut stream = rng::derive_stream(424_242, i);
        let chain = simulate_forward_chain(&x0, &sched, &mut stream)?;
        let last = chain.last().expect("chain includes x_0");
        for (j, &v) in last.data().iter().enumerate() {
            sum[j] += v;
            sum_sq[j] += v * v;
        }
    }

    let ab = sched.alpha_bar(steps)?;
    let expect_var = 1.0 - ab;
    println!("schedule: T={steps}, beta 1e-3..0.1, alpha_bar_T = {ab:.6}");
    println!("closed-form variance per element: {expect_var:.6}");
    println!();
    println!("{:>8} {:>12} {:>12} {:>12} {:>12}", "element", "exp. mean", "emp. mean", "z-score", "emp. var");

    let mut worst_z: f64 = 0.0;
    let mut worst_var_rel: f64 = 0.0;
    for j in 0..n {
        let mean = sum[j] / draws as f64;
        let var = sum_sq[j] / draws as f64 - mean * mean;
        let expect_mean = ab.sqrt() * x0.data()[j];
        // Standard error of the sample mean under the true variance.
        let se = (expect_var / draws as f64).sqrt();
        let z = (mean - expect_mean) / se;
        let var_rel = (var - expect_var).abs() / expect_var;
        worst_z = worst_z.max(z.abs());
        worst_var_rel = worst_var_rel.max(var_rel);
        if j < 4 || z.abs() > 3.0 {
            println!("{j:>8} {expect_mean:>12.5} {mean:>12.5} {z:>12.2} {var:>12.5}");
        }
    }
    println!("  ... ({} elements total)", n);
    println!();
    println!("worst |z| over elements: {worst_z:.2} (5 would be suspicious)");
    println!("worst relative variance error: {:.2}%", 100.0 * worst_var_rel);
    Ok(())
}
