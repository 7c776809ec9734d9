//! Invariant battery behind the `verify` subcommand.

use crate::boundary::HalfSpaceWeights;
use crate::characteristics::{Characteristics, DecayingPotential, PhasePoint, Profile, WeightParams, ZeroField};
use crate::collision::{AngularQuadrature, CollisionQuadrature, KernelConstants};
use crate::config::RunConfig;
use crate::diagnostics;
use crate::error::Result;
use crate::field::{DensityDeviation, PoissonSolver};
use crate::geometry::ConvexDomain;
use crate::math::{det, norm, norm2, normalize, sub, Vec3};
use crate::solver::{schedule, time_march, MarchOptions, PhaseSpace};
use crate::spatial::SpatialGrid;
use crate::velocity::VelocityGrid;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use std::sync::Arc;

/// One line of `verify_report.csv`.
#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub pass: bool,
}

impl Check {
    fn at_most(name: &str, value: f64, threshold: f64) -> Self {
        Check { name: name.to_string(), value, threshold, pass: value <= threshold }
    }
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v: Vec3 = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        let n = norm2(v);
        if n > 1e-4 && n <= 1.0 {
            return normalize(v);
        }
    }
}

/// `max |c_mu int_{n.u>0} mu (n.u) du - 1|` over random normals.
pub fn c_mu_identity(vel: &VelocityGrid, n_normals: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normals: Vec<Vec3> = (0..n_normals).map(|_| random_unit(&mut rng)).collect();
    normals.par_iter().map(|&n| (HalfSpaceWeights::new(vel, n).normalization(vel) - 1.0).abs()).reduce(|| 0.0, f64::max)
}

/// Moments `int Q(G, G) (1, v, |v|^2)` relative to `int <v>^2 |Q(G, G)|` for a
/// sum of two random Gaussians, largest over the five moments.
pub fn collision_invariance(quad: &CollisionQuadrature, outer: &VelocityGrid, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut blob = || {
        let c: Vec3 = std::array::from_fn(|_| rng.gen_range(-0.8..0.8));
        (rng.gen_range(0.2..1.0), rng.gen_range(0.35..0.8), c)
    };
    let (a1, b1, c1) = blob();
    let (a2, b2, c2) = blob();
    let g = move |v: Vec3| a1 * (-b1 * norm2(sub(v, c1))).exp() + a2 * (-b2 * norm2(sub(v, c2))).exp();
    let r2 = outer.v_max * outer.v_max;
    let nodes: Vec<Vec3> = outer.nodes().iter().cloned().filter(|v| norm2(*v) <= r2).collect();
    let q: Vec<f64> = nodes.par_iter().map(|&v| quad.q(&g, &g, v)).collect::<Result<_>>()?;
    let mut m = [0.0; 5];
    let mut scale = 0.0;
    for (qv, v) in q.iter().zip(&nodes) {
        let e = norm2(*v);
        for (k, phi) in [1.0, v[0], v[1], v[2], e].iter().enumerate() {
            m[k] += qv * phi;
        }
        scale += (1.0 + e) * qv.abs();
    }
    Ok(m.iter().map(|x| x.abs() / scale).fold(0.0, f64::max))
}

/// `max |det D(X, V) - 1|` over random trajectories under a decaying field.
pub fn liouville(n: usize, seed: u64) -> Result<f64> {
    let ball = ConvexDomain::unit_ball();
    let field = DecayingPotential { delta: 0.3, rate: 0.5, profile: Profile::Quadratic([1.0, -2.0, 0.5]) };
    let ch = Characteristics::new(&ball, &field);
    let devs: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            loop {
                let x: Vec3 = std::array::from_fn(|_| rng.gen_range(-0.6..0.6));
                let v: Vec3 = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
                let t = rng.gen_range(0.5..1.5);
                let s = t - rng.gen_range(0.05..0.5);
                if let Ok(j) = ch.variational_jacobian(PhasePoint::new(t, x, v), s) {
                    return Ok((det(j.iter().map(|r| r.to_vec()).collect()) - 1.0).abs());
                }
            }
        })
        .collect::<Result<_>>()?;
    Ok(devs.into_iter().fold(0.0, f64::max))
}

/// Largest relative gap between the analytic and finite-difference exit-map
/// determinants in free streaming, over non-grazing samples.
pub fn exit_map(n: usize, seed: u64) -> f64 {
    let ball = ConvexDomain::unit_ball();
    let ch = Characteristics::new(&ball, &ZeroField);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < n {
        let x: Vec3 = std::array::from_fn(|_| rng.gen_range(-0.7..0.7));
        if norm(x) > 0.8 {
            continue;
        }
        let v = crate::math::scale(random_unit(&mut rng), rng.gen_range(0.5..2.0));
        if let Ok(j) = ch.exit_map_jacobian(PhasePoint::new(0.0, x, v)) {
            if j.analytic.is_finite() && j.analytic > 0.0 {
                worst = worst.max((j.fd / j.analytic - 1.0).abs());
                done += 1;
            }
        }
    }
    worst
}

/// Relative sup error of the radial manufactured Poisson solution on the unit
/// ball: `-lap phi = r^2 - 3/5`, `phi = (r^2/2 - r^4/4)/5` up to a constant.
pub fn poisson_radial_error(n: usize) -> Result<f64> {
    let grid = Arc::new(SpatialGrid::new(&ConvexDomain::unit_ball(), n));
    let solver = PoissonSolver::new(grid.clone(), 1e-12, 20_000);
    let vals = (0..grid.n_nodes()).map(|i| norm2(grid.node_position(i)) - 0.6).collect();
    let phi = solver.solve(&DensityDeviation::new(&grid, vals), 0.0)?;
    let exact: Vec<f64> = (0..grid.n_nodes())
        .map(|i| {
            let r2 = norm2(grid.node_position(i));
            (r2 / 2.0 - r2 * r2 / 4.0) / 5.0
        })
        .collect();
    let shift = grid.integrate(&exact) / grid.total_weight();
    let sup = exact.iter().map(|e| (e - shift).abs()).fold(0.0, f64::max);
    let err = (0..grid.n_nodes()).map(|i| (phi.node_value(i) - exact[i] + shift).abs()).fold(0.0, f64::max);
    Ok(err / sup)
}

/// The battery run by `verify`. `march_steps` equilibrium steps are taken on
/// the configured grid.
pub fn run_battery(cfg: &RunConfig, march_steps: usize) -> Result<Vec<Check>> {
    let seed = cfg.seed;
    let mut out = Vec::new();
    let vel = VelocityGrid::new(cfg.grid.v_max, cfg.grid.n_v);
    out.push(Check::at_most("c_mu_identity", c_mu_identity(&vel, 16, seed), 1e-4));

    let quad = CollisionQuadrature::new(VelocityGrid::new(6.0, 12), AngularQuadrature::new(6, 12), KernelConstants::default());
    out.push(Check::at_most("collision_invariance", collision_invariance(&quad, &VelocityGrid::new(6.0, 10), seed)?, 1e-3));
    out.push(Check::at_most("liouville", liouville(20, seed)?, 1e-5));
    out.push(Check::at_most("exit_map", exit_map(20, seed), 1e-2));
    let inv = diagnostics::alpha_invariance_residual(
        &ConvexDomain::unit_ball(),
        &ZeroField,
        WeightParams { epsilon: cfg.physics.epsilon },
        (0.1, 2.0),
        3.0,
        200,
        seed,
    );
    out.push(Check::at_most("alpha_invariance_free", inv.max_residual, 1e-8));
    out.push(Check::at_most("poisson_radial_n32", poisson_radial_error(32)?, 1e-2));

    let mut eq = cfg.clone();
    eq.init = crate::config::InitSpec::Maxwellian;
    eq.march.steps = Some(march_steps);
    eq.io.snapshot_every = 0;
    let ps = PhaseSpace::from_config(&eq);
    let (_, steps) = schedule(&eq, &ps);
    let art = time_march(&eq, &ps, &MarchOptions::default())?;
    let sup_mu = ps.mu.iter().cloned().fold(0.0, f64::max);
    let drift = art
        .final_state
        .values
        .par_iter()
        .enumerate()
        .map(|(k, f)| (f - ps.mu[k % ps.nv()]).abs())
        .reduce(|| 0.0, f64::max)
        / sup_mu;
    out.push(Check::at_most("equilibrium_sup_drift", drift, 1e-3));
    let m0 = art.rows[0].mass;
    let mass = art.rows.iter().map(|r| ((r.mass - m0) / m0).abs()).fold(0.0, f64::max);
    out.push(Check::at_most("equilibrium_mass_drift", mass, 1e-4));
    let nf = art.reports.iter().map(|r| r.nullflux_max).fold(0.0, f64::max);
    out.push(Check::at_most("null_flux", nf, 5.0 * ps.nullflux_tol));
    let neg = art.reports.iter().map(|r| (-r.min_value / r.max_value).max(0.0)).fold(0.0, f64::max);
    out.push(Check::at_most("positivity", neg, 1e-12));
    out.push(Check::at_most("equilibrium_steps_missing", (steps - art.reports.len()) as f64, 0.0));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quick_checks_pass() {
        assert!(c_mu_identity(&VelocityGrid::new(6.0, 16), 4, 1) < 1e-4);
        assert!(liouville(5, 1).unwrap() < 1e-5);
        assert!(exit_map(5, 1) < 1e-2);
        let quad = CollisionQuadrature::new(VelocityGrid::new(6.0, 10), AngularQuadrature::new(4, 8), KernelConstants::default());
        assert!(collision_invariance(&quad, &VelocityGrid::new(6.0, 8), 2).unwrap() < 1e-3);
    }
}
