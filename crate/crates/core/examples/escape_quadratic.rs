//! Short-time escaping-efficiency estimate against Euler-Maruyama simulation
//! on a quadratic bowl, for a range of horizons.

use elmix::escape::{escaping_efficiency_estimate, sde_simulate, EtaConvention, NoiseModel, Quadratic, SdeConfig};
use nalgebra::DMatrix;

fn main() -> elmix::Result<()> {
    let quad = Quadratic::diagonal(&[1.0, 2.0])?;
    let sigma = DMatrix::<f64>::identity(2, 2);
    let lr = 0.1;
    println!("     t   estimate  simulated   stderr");
    for t in [0.01, 0.05, 0.2, 1.0] {
        let cfg = SdeConfig {
            lr,
            dt: 1e-3,
            total_time: t,
            noise: NoiseModel::Full(sigma.clone()),
            seed: 1,
            trajectories: 5000,
        };
        let sim = sde_simulate(&quad, &[0.0, 0.0], &cfg)?;
        let (mean, se) = sim.final_excess();
        let est = escaping_efficiency_estimate(quad.hessian(), &sigma, t, lr, EtaConvention::Scaled)?;
        println!("{t:6} {est:10.6} {mean:10.6} {se:8.6}");
    }
    Ok(())
}
