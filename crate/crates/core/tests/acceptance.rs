//! Acceptance battery: one line per criterion, nonzero exit on any failure.
//! Positional arguments select criteria by number.

use rayon::prelude::*;
use std::sync::OnceLock;
use std::time::{Duration, Instant};
use vpb_core::boundary::cycle_tail_mass;
use vpb_core::characteristics::{Characteristics, DecayingPotential, PhasePoint, WeightParams, ZeroField};
use vpb_core::collision::{AngularQuadrature, CollisionQuadrature, KernelConstants};
use vpb_core::config::{InitSpec, RunConfig};
use vpb_core::diagnostics::{
    alpha_invariance_residual, alpha_weighted_w1p, decay_fit, growth_envelope, stability_distance, W1pParams,
};
use vpb_core::geometry::ConvexDomain;
use vpb_core::solver::{time_march, MarchOptions, PhaseSpace, RunArtifacts};
use vpb_core::velocity::VelocityGrid;
use vpb_core::verify;

const SEED: u64 = 20240611;
/// Core count the runtime budgets refer to.
const REFERENCE_CORES: usize = 8;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// Budget in seconds on the reference machine, scaled to the cores available.
fn budget(seconds: f64) -> Duration {
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get()).min(REFERENCE_CORES);
    Duration::from_secs_f64(seconds * REFERENCE_CORES as f64 / cores as f64)
}

struct SmallData {
    ps: PhaseSpace,
    base: RunArtifacts,
    shifted: RunArtifacts,
    elapsed: Duration,
}

const SMALL_AMPLITUDE: f64 = 0.01;
const SMALL_SHIFT: f64 = 1e-3;

fn small_config(amplitude: f64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = SEED;
    cfg.grid.n_x = 8;
    cfg.grid.n_v = 16;
    cfg.init = InitSpec::Perturbed { amplitude, mode: 1 };
    cfg.march.steps = Some(100);
    cfg.io.snapshot_every = 10;
    cfg
}

/// The small-data run and its shifted twin, shared by several criteria.
fn small_data() -> &'static SmallData {
    static RUNS: OnceLock<SmallData> = OnceLock::new();
    RUNS.get_or_init(|| {
        let start = Instant::now();
        let cfg = small_config(SMALL_AMPLITUDE);
        let ps = PhaseSpace::from_config(&cfg);
        let opts = MarchOptions { out_dir: None, keep_snapshots: true };
        let base = time_march(&cfg, &ps, &opts).expect("small-data run");
        let shifted = time_march(&small_config(SMALL_AMPLITUDE + SMALL_SHIFT), &ps, &opts).expect("shifted run");
        SmallData { ps, base, shifted, elapsed: start.elapsed() }
    })
}

struct Equilibrium {
    ps: PhaseSpace,
    art: RunArtifacts,
    elapsed: Duration,
}

fn equilibrium() -> &'static Equilibrium {
    static RUN: OnceLock<Equilibrium> = OnceLock::new();
    RUN.get_or_init(|| {
        let start = Instant::now();
        let mut cfg = RunConfig::default();
        cfg.seed = SEED;
        cfg.init = InitSpec::Maxwellian;
        cfg.march.steps = Some(50);
        cfg.io.snapshot_every = 0;
        let ps = PhaseSpace::from_config(&cfg);
        let art = time_march(&cfg, &ps, &MarchOptions::default()).expect("equilibrium run");
        Equilibrium { ps, art, elapsed: start.elapsed() }
    })
}

fn equilibrium_fixed_point() -> Outcome {
    let eq = equilibrium();
    let ps = &eq.ps;
    let nv = ps.nv();
    let sup_mu = ps.mu.iter().cloned().fold(0.0, f64::max);
    let drift =
        eq.art.final_state.values.par_iter().enumerate().map(|(k, f)| (f - ps.mu[k % nv]).abs()).reduce(|| 0.0, f64::max)
            / sup_mu;
    let m0 = eq.art.rows[0].mass;
    let mass = eq.art.rows.iter().map(|r| ((r.mass - m0) / m0).abs()).fold(0.0, f64::max);
    let limit = budget(600.0);
    outcome(
        drift <= 1e-3 && mass <= 1e-4 && eq.art.reports.len() == 50 && eq.elapsed <= limit,
        format!(
            "{} steps, sup|F-mu|/sup mu = {drift:.2e} (<= 1e-3), mass drift = {mass:.2e} (<= 1e-4), {:.0} s (<= {:.0} s)",
            eq.art.reports.len(),
            eq.elapsed.as_secs_f64(),
            limit.as_secs_f64()
        ),
    )
}

fn collision_invariance() -> Outcome {
    let start = Instant::now();
    let quad = CollisionQuadrature::new(VelocityGrid::new(6.0, 12), AngularQuadrature::new(6, 12), KernelConstants::default());
    let outer = VelocityGrid::new(6.0, 10);
    let worst = (0..5)
        .map(|i| verify::collision_invariance(&quad, &outer, SEED + i).expect("collision quadrature"))
        .fold(0.0, f64::max);
    let limit = budget(60.0);
    outcome(
        worst <= 1e-3 && start.elapsed() <= limit,
        format!("5 samples, max relative moment {worst:.2e} (<= 1e-3), {:.1} s", start.elapsed().as_secs_f64()),
    )
}

fn c_mu_identity() -> Outcome {
    let g = RunConfig::default().grid;
    let dev = verify::c_mu_identity(&VelocityGrid::new(g.v_max, g.n_v), 64, SEED);
    outcome(dev <= 1e-4, format!("64 normals, max |c_mu int mu (n.u)_+ - 1| = {dev:.2e} (<= 1e-4)"))
}

fn null_flux() -> Outcome {
    let s = small_data();
    let tol = s.base.nullflux_tol;
    let worst = s.base.reports[..20].iter().map(|r| r.nullflux_max).fold(0.0, f64::max);
    outcome(worst <= 5.0 * tol, format!("20 perturbed steps, max residual {worst:.2e} (<= 5 x {tol:.2e})"))
}

fn liouville() -> Outcome {
    let start = Instant::now();
    let dev = verify::liouville(100, SEED).expect("variational equations");
    outcome(
        dev <= 1e-5 && start.elapsed() <= budget(60.0),
        format!("100 trajectories, max |det - 1| = {dev:.2e} (<= 1e-5)"),
    )
}

fn exit_map() -> Outcome {
    let start = Instant::now();
    let dev = verify::exit_map(100, SEED);
    outcome(
        dev <= 1e-2 && start.elapsed() <= budget(60.0),
        format!("100 samples, max relative gap {dev:.2e} (<= 1e-2)"),
    )
}

fn alpha_invariance() -> Outcome {
    let start = Instant::now();
    let ball = ConvexDomain::unit_ball();
    let weight = WeightParams { epsilon: 0.05 };
    let free = alpha_invariance_residual(&ball, &ZeroField, weight, (0.1, 2.0), 3.0, 1000, SEED);
    let field = DecayingPotential::radial(0.3, 0.5);
    let forced = alpha_invariance_residual(&ball, &field, weight, (0.1, 2.0), 3.0, 1000, SEED);
    // integrator error: default steps against a much finer fixed step, same samples
    let coarse = Characteristics::new(&ball, &field).with_weight(weight);
    let fine = Characteristics::new(&ball, &field).with_weight(weight).with_step(5e-4);
    let integrator = (0..1000u64)
        .into_par_iter()
        .map(|i| {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(SEED);
            rng.set_stream(i);
            let x = loop {
                let x: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
                if ball.level(x) < -1e-3 {
                    break x;
                }
            };
            let v = loop {
                let v: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-3.0..3.0));
                if v.iter().map(|c| c * c).sum::<f64>() <= 9.0 {
                    break v;
                }
            };
            let p = PhasePoint::new(rng.gen_range(0.1..2.0), x, v);
            let (a, b) = (coarse.kinetic_weight(p), fine.kinetic_weight(p));
            (a - b).abs() / b.max(1e-300)
        })
        .reduce(|| 0.0, f64::max);
    let pass = free.max_residual <= 1e-8 && forced.max_residual <= 10.0 * integrator && start.elapsed() <= budget(60.0);
    outcome(
        pass,
        format!(
            "E = 0: {:.2e} (<= 1e-8, {} pairs); decaying field: {:.2e} (<= 10 x integrator error {:.2e}, {} pairs)",
            free.max_residual, free.samples, forced.max_residual, integrator, forced.samples
        ),
    )
}

fn alpha_inverse_moment() -> Outcome {
    let start = Instant::now();
    let ball = ConvexDomain::unit_ball();
    let field = DecayingPotential::radial(0.3, 0.5);
    let ch = Characteristics::new(&ball, &field).with_weight(WeightParams { epsilon: 0.05 });
    let results: Vec<_> = ball.boundary_samples(10).into_iter().take(10).collect::<Vec<_>>().into_par_iter().map(|x| ch.alpha_inverse_moment(x, 1.0, 0.5, 1.0)).collect();
    let ok = results.iter().filter(|r| r.is_ok()).count();
    let vals: Vec<f64> = results.iter().flatten().cloned().collect();
    let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().cloned().fold(0.0, f64::max);
    outcome(
        ok == 10 && vals.iter().all(|v| v.is_finite() && *v > 0.0) && start.elapsed() <= budget(300.0),
        format!("{ok}/10 boundary points converged, values in [{lo:.4}, {hi:.4}], {:.1} s", start.elapsed().as_secs_f64()),
    )
}

fn cycle_tail() -> Outcome {
    let start = Instant::now();
    let ball = ConvexDomain::unit_ball();
    let ch = Characteristics::new(&ball, &ZeroField);
    let m: Vec<_> = [5, 10, 20].iter().map(|&k| cycle_tail_mass(&ch, [0.0; 3], [1.0, 0.0, 0.0], 2.0, k, 10_000, SEED)).collect();
    let decreasing = m.windows(2).all(|w| w[1].estimate < w[0].estimate);
    let drops = m.windows(2).all(|w| w[1].estimate * 1.5 <= w[0].estimate);
    let positive = m[0].estimate > 0.0;
    outcome(
        decreasing && drops && positive && start.elapsed() <= budget(300.0),
        format!(
            "k = 5, 10, 20: {}",
            m.iter().map(|t| format!("{:.2e} (+- {:.1e})", t.estimate, t.std_error)).collect::<Vec<_>>().join(", ")
        ),
    )
}

fn relaxation() -> Outcome {
    let s = small_data();
    let rows = &s.base.rows;
    let wf: Vec<(f64, f64)> = rows.iter().map(|r| (r.t, r.sup_wf)).collect();
    let gp: Vec<(f64, f64)> = rows.iter().map(|r| (r.t, r.grad_phi_sup)).collect();
    let (a, b) = match (decay_fit(&wf, 0.6), decay_fit(&gp, 0.6)) {
        (Ok(a), Ok(b)) => (a, b),
        (a, b) => return outcome(false, format!("fit failed: {a:?} {b:?}")),
    };
    let pass = a.rate > 0.0 && a.r2 >= 0.9 && b.rate > 0.0 && b.r2 >= 0.9 && s.elapsed <= budget(1800.0);
    outcome(
        pass,
        format!(
            "{} steps to t = {:.2}: |w f| rate {:.3} r2 {:.3}; |grad phi| rate {:.3} r2 {:.3}; pair took {:.0} s",
            s.base.reports.len(),
            rows.last().unwrap().t,
            a.rate,
            a.r2,
            b.rate,
            b.r2,
            s.elapsed.as_secs_f64()
        ),
    )
}

fn w1p_envelope() -> Outcome {
    let s = small_data();
    let params = W1pParams {
        theta_tilde: 0.05,
        beta: 0.6,
        p: 4.0,
        weight: WeightParams { epsilon: 0.05 },
        n_samples: 4000,
        seed: SEED,
    };
    let series: Vec<(f64, f64)> = s
        .base
        .snapshots
        .iter()
        .map(|snap| (snap.time_stamp, alpha_weighted_w1p(&s.ps, snap, &s.base.history, &params).expect("w1p").value))
        .collect();
    match growth_envelope(&series) {
        Ok(g) => outcome(
            g.c.is_finite() && g.c >= 0.0 && !g.super_exponential,
            format!(
                "{} snapshots, {:.3e} -> {:.3e}, fitted C = {:.3}, slopes early {:.3} late {:.3}",
                series.len(),
                series[0].1,
                series.last().unwrap().1,
                g.c,
                g.early_slope,
                g.late_slope
            ),
        ),
        Err(e) => outcome(false, format!("{e}")),
    }
}

fn stability() -> Outcome {
    let s = small_data();
    let dist = match stability_distance(&s.ps, &s.base.snapshots, &s.shifted.snapshots, 0.5) {
        Ok(d) => d,
        Err(e) => return outcome(false, format!("{e}")),
    };
    match growth_envelope(&dist) {
        Ok(g) => {
            let bounded = dist.iter().all(|&(t, d)| d <= (g.c * (t - dist[0].0)).exp() * dist[0].1 * (1.0 + 1e-12));
            outcome(
                bounded && g.c.is_finite() && !g.super_exponential,
                format!(
                    "L^1.5 distance {:.3e} -> {:.3e} over {} snapshots, fitted C = {:.3}",
                    dist[0].1,
                    dist.last().unwrap().1,
                    dist.len(),
                    g.c
                ),
            )
        }
        Err(e) => outcome(false, format!("{e}")),
    }
}

fn positivity() -> Outcome {
    let s = small_data();
    let eq = equilibrium();
    let reports = s.base.reports.iter().chain(&s.shifted.reports).chain(&eq.art.reports);
    let (mut n, mut worst) = (0, 0.0f64);
    for r in reports {
        n += 1;
        worst = worst.max(-r.min_value / r.max_value);
    }
    outcome(worst <= 1e-12, format!("{n} accepted steps, worst min F / max F = {:.2e} (>= -1e-12)", -worst))
}

fn poisson() -> Outcome {
    let start = Instant::now();
    let e16 = verify::poisson_radial_error(16).expect("poisson n = 16");
    let e32 = verify::poisson_radial_error(32).expect("poisson n = 32");
    let order = (e16 / e32).log2();
    outcome(
        e32 <= 1e-2 && order >= 1.8 && start.elapsed() <= budget(120.0),
        format!("sup error {e32:.2e} at n = 32 (<= 1e-2), observed order {order:.2} (>= 1.8)"),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 14] = [
        ("equilibrium fixed point", equilibrium_fixed_point),
        ("collision invariance", collision_invariance),
        ("c_mu identity", c_mu_identity),
        ("null flux", null_flux),
        ("liouville", liouville),
        ("exit-map jacobian", exit_map),
        ("alpha invariance", alpha_invariance),
        ("alpha inverse moment", alpha_inverse_moment),
        ("cycle tail decay", cycle_tail),
        ("relaxation", relaxation),
        ("w1p growth envelope", w1p_envelope),
        ("stability", stability),
        ("positivity", positivity),
        ("poisson oracle", poisson),
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = i + 1;
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let r = run();
        println!(
            "criterion {id:>2} {name:<24} {} [{:.1} s] {}",
            if r.pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            r.detail
        );
        if !r.pass {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
