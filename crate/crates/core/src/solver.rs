//! Time marching. Each step is a Picard iteration whose linear problem is
//! solved semi-Lagrangianly: every phase node is traced back over the step,
//! seeded with the start-of-step value at the foot point or with the diffuse
//! re-emission where the path meets the wall, and the collision terms are
//! accumulated with an exponential integrator along the segment.

use crate::boundary::{c_mu, BoundaryFluxTable, Wall};
use crate::characteristics::{Characteristics, FieldHistory, Flow, PhasePoint};
use crate::collision::grid_operator::CollisionFields;
use crate::collision::{
    maxwellian, sqrt_maxwellian, CollisionQuadrature, GridCollisionOperator, KernelConstants, Sampled,
};
use crate::config::{GridSpec, InitSpec, RunConfig};
use crate::diagnostics;
use crate::error::{Error, Result};
use crate::field::{density_from_big_f, DensityDeviation, PoissonSolver, PotentialField};
use crate::geometry::ConvexDomain;
use crate::math::Vec3;
use crate::spatial::SpatialGrid;
use crate::velocity::VelocityGrid;
use rayon::prelude::*;
use serde::Serialize;
use std::f64::consts::PI;
use std::path::PathBuf;
use std::sync::Arc;

/// Below this `sqrt(mu)` the perturbation is defined as zero.
pub const SQRT_MU_FLOOR: f64 = 1e-30;
/// Relative negativity tolerated before an iterate is rejected.
pub const POSITIVITY_TOL: f64 = 1e-12;

/// `F` at phase nodes times velocity nodes, node-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributionField {
    pub values: Vec<f64>,
    pub nv: usize,
    pub time_stamp: f64,
}

impl DistributionField {
    pub fn n_nodes(&self) -> usize {
        self.values.len() / self.nv
    }

    pub fn node(&self, i: usize) -> &[f64] {
        &self.values[i * self.nv..(i + 1) * self.nv]
    }

    pub fn sup(&self) -> f64 {
        self.values.par_iter().cloned().reduce(|| 0.0, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.par_iter().cloned().reduce(|| f64::INFINITY, f64::min)
    }

    /// `min F >= -POSITIVITY_TOL max F`.
    pub fn check_positive(&self) -> Result<()> {
        check_positive(&self.values)
    }
}

fn check_positive(values: &[f64]) -> Result<()> {
    let sup = values.par_iter().cloned().reduce(|| 0.0, f64::max);
    let (node, value) = values
        .par_iter()
        .enumerate()
        .map(|(i, &v)| (i, v))
        .reduce(|| (0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
    if value < -POSITIVITY_TOL * sup {
        return Err(Error::NegativeValue { value, node });
    }
    Ok(())
}

/// `f = (F - mu) / sqrt(mu)` with the weight exponent used to report it.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationField {
    pub values: Vec<f64>,
    pub nv: usize,
    pub theta: f64,
}

pub fn to_perturbation(big_f: &DistributionField, sqrt_mu: &[f64], theta: f64) -> PerturbationField {
    let nv = big_f.nv;
    let values = big_f
        .values
        .par_iter()
        .enumerate()
        .map(|(k, &fv)| perturbation_value(fv, sqrt_mu[k % nv]))
        .collect();
    PerturbationField { values, nv, theta }
}

pub fn from_perturbation(f: &PerturbationField, sqrt_mu: &[f64], time_stamp: f64) -> DistributionField {
    let nv = f.nv;
    let values = f
        .values
        .par_iter()
        .enumerate()
        .map(|(k, &fv)| {
            let s = sqrt_mu[k % nv];
            s * s + s * fv
        })
        .collect();
    DistributionField { values, nv, time_stamp }
}

#[inline]
pub fn perturbation_value(big_f: f64, sqrt_mu: f64) -> f64 {
    if sqrt_mu < SQRT_MU_FLOOR {
        0.0
    } else {
        (big_f - sqrt_mu * sqrt_mu) / sqrt_mu
    }
}

/// `nu(F)(v)` from the velocity samples of `F` at one spatial point.
pub fn nu_of_f(quad: &CollisionQuadrature, f_at_x: &[f64], v: Vec3) -> f64 {
    quad.nu_of(&Sampled { grid: &quad.grid, values: f_at_x }, v)
}

/// The discretized phase space and the operators acting on it.
pub struct PhaseSpace {
    pub space: Arc<SpatialGrid>,
    pub vel: VelocityGrid,
    pub mu: Vec<f64>,
    pub sqrt_mu: Vec<f64>,
    pub wall: Wall,
    pub poisson: PoissonSolver,
    /// Absent when collisions are switched off.
    pub collision: Option<GridCollisionOperator>,
    /// Half-space quadrature tolerance of the wall nodes.
    pub nullflux_tol: f64,
}

impl PhaseSpace {
    pub fn new(domain: &ConvexDomain, grid: &GridSpec, collisions: bool) -> Self {
        let space = Arc::new(SpatialGrid::new(domain, grid.n_x));
        let vel = VelocityGrid::new(grid.v_max, grid.n_v);
        let (lo, hi) = domain.bbox();
        let extent = (0..3).map(|d| hi[d] - lo[d]).fold(0.0, f64::max);
        let wall = Wall::new(&space, &vel, grid.wall_order_for(extent));
        let nullflux_tol = wall.quadrature_tolerance(&vel);
        let poisson = PoissonSolver::new(space.clone(), grid.poisson_tol, grid.poisson_max_iter);
        let collision =
            collisions.then(|| GridCollisionOperator::new(&vel, &KernelConstants::default(), grid.radon_max_component));
        let mu = vel.nodes().iter().map(|&v| maxwellian(v)).collect();
        let sqrt_mu = vel.nodes().iter().map(|&v| sqrt_maxwellian(v)).collect();
        PhaseSpace { space, vel, mu, sqrt_mu, wall, poisson, collision, nullflux_tol }
    }

    pub fn from_config(cfg: &RunConfig) -> Self {
        Self::new(&cfg.domain.build(), &cfg.grid, cfg.physics.collisions)
    }

    pub fn domain(&self) -> &ConvexDomain {
        &self.space.domain
    }

    pub fn n_nodes(&self) -> usize {
        self.space.n_nodes()
    }

    pub fn nv(&self) -> usize {
        self.vel.len()
    }

    /// `min(0.05, 0.5 h_x / v_max)`.
    pub fn default_dt(&self) -> f64 {
        0.05f64.min(0.5 * self.space.h / self.vel.v_max)
    }

    pub fn maxwellian_field(&self, t: f64) -> DistributionField {
        let mut values = Vec::with_capacity(self.n_nodes() * self.nv());
        for _ in 0..self.n_nodes() {
            values.extend_from_slice(&self.mu);
        }
        DistributionField { values, nv: self.nv(), time_stamp: t }
    }

    /// `F = mu (1 + a psi(x, v))` with
    /// `psi = sin(k pi x_1 / (2 R)) (1 + v_1 e^{-|v|^2/8} / 2)`, odd in `x_1`,
    /// so the density deviation has zero mean on symmetric domains.
    pub fn initial_data(&self, init: &InitSpec) -> DistributionField {
        let mut out = self.maxwellian_field(0.0);
        if let InitSpec::Perturbed { amplitude, mode } = *init {
            let (lo, hi) = self.domain().bbox();
            let half = 0.5 * (hi[0] - lo[0]);
            let centre = 0.5 * (hi[0] + lo[0]);
            let nv = self.nv();
            let vel = &self.vel;
            let mu = &self.mu;
            let space = &self.space;
            out.values.par_chunks_mut(nv).enumerate().for_each(|(i, row)| {
                let x = space.node_position(i);
                let sx = (mode as f64 * PI * (x[0] - centre) / (2.0 * half)).sin();
                for (j, r) in row.iter_mut().enumerate() {
                    let v = vel.node(j);
                    let psi = sx * (1.0 + 0.5 * v[0] * (-crate::math::norm2(v) / 8.0).exp());
                    *r = mu[j] * (1.0 + amplitude * psi);
                }
            });
        }
        out
    }

    pub fn density(&self, big_f: &[f64]) -> DensityDeviation {
        density_from_big_f(&self.space, big_f, &self.mu, self.vel.cell_volume)
    }

    /// Potential of `F`; also returns the source mean removed before solving.
    pub fn solve_field(&self, big_f: &[f64], t: f64) -> Result<(PotentialField, f64)> {
        let dev = self.density(big_f);
        let phi = self.poisson.solve(&dev, t)?;
        Ok((phi, dev.raw_mean))
    }

    pub fn collision_fields(&self, big_f: &[f64]) -> Option<CollisionFields> {
        self.collision.as_ref().map(|c| c.evaluate(big_f))
    }

    pub fn outgoing_fluxes(&self, big_f: &[f64]) -> Vec<f64> {
        self.wall.outgoing_fluxes(big_f, self.nv())
    }

    /// Interpolation data of the start-of-step field.
    pub fn start_cache(&self, big_f: &[f64], fields: Option<&CollisionFields>) -> StartCache {
        let nv = self.nv();
        let mu = &self.mu;
        let ratio = big_f.par_iter().enumerate().map(|(k, &f)| f / mu[k % nv]).collect();
        let (nu, gain_ratio) = match fields {
            Some(c) => (c.nu.clone(), c.gain.par_iter().enumerate().map(|(k, &g)| g / mu[k % nv]).collect()),
            None => (Vec::new(), Vec::new()),
        };
        StartCache { ratio, nu, gain_ratio }
    }

    /// One solve of the linear problem of a Picard iterate: the new iterate
    /// at `t0 + dt` given the start of the step and the current iterate's
    /// collision fields, potential history and wall fluxes.
    pub fn duhamel_step(&self, input: &DuhamelInput) -> Result<Vec<f64>> {
        let nv = self.nv();
        let t0 = input.t0;
        let t1 = t0 + input.dt;
        let ch = Characteristics::new(self.domain(), input.field).with_step(input.dt);
        let cmu = c_mu();
        let collide = input.iterate.is_some() && !input.start.nu.is_empty();
        let mut out = vec![0.0; self.n_nodes() * nv];
        out.par_chunks_mut(nv).enumerate().for_each(|(i, row)| {
            let x = self.space.node_position(i);
            for (j, o) in row.iter_mut().enumerate() {
                let v = self.vel.node(j);
                let k = i * nv + j;
                let (seed, tau, nu_b, gain_b) = match ch.flow(PhasePoint::new(t1, x, v), t0) {
                    Flow::Reached(q) => {
                        let (r, nu0, gr0) = self.interpolate_start(input.start, q.x, q.v, j, collide);
                        let m = maxwellian(q.v);
                        let (nu_b, gain_b) = match input.iterate {
                            Some(c) if collide => (0.5 * (nu0 + c.nu[k]), 0.5 * (m * gr0 + c.gain[k])),
                            _ => (0.0, 0.0),
                        };
                        (m * r, input.dt, nu_b, gain_b)
                    }
                    Flow::Exited(q) => {
                        let flux = input.fluxes.flux_at(&self.wall, q.t, q.x).max(0.0);
                        let (nu_b, gain_b) = match input.iterate {
                            Some(c) if collide => (c.nu[k], c.gain[k]),
                            _ => (0.0, 0.0),
                        };
                        (cmu * maxwellian(q.v) * flux, t1 - q.t, nu_b, gain_b)
                    }
                };
                *o = exponential_update(seed, tau, nu_b, gain_b);
            }
        });
        check_positive(&out)?;
        Ok(out)
    }

    /// Ratio `F/mu`, `nu` and `gain/mu` of the start cache at `(x, v)`; `j`
    /// is the velocity node the path started from.
    #[inline]
    fn interpolate_start(&self, c: &StartCache, x: Vec3, v: Vec3, j: usize, collide: bool) -> (f64, f64, f64) {
        let nv = self.nv();
        let sx = self.space.stencil(x);
        let (vi, vw, vl) = if v == self.vel.node(j) {
            let mut vi = [0usize; 8];
            vi[0] = j;
            let mut vw = [0.0; 8];
            vw[0] = 1.0;
            (vi, vw, 1)
        } else {
            let (vi, vw) = velocity_stencil(&self.vel, v);
            (vi, vw, 8)
        };
        let (mut r, mut nu, mut g) = (0.0, 0.0, 0.0);
        for (node, wx) in sx.iter() {
            let base = node * nv;
            for a in 0..vl {
                let w = wx * vw[a];
                let idx = base + vi[a];
                r += w * c.ratio[idx];
                if collide {
                    nu += w * c.nu[idx];
                    g += w * c.gain_ratio[idx];
                }
            }
        }
        (r, nu, g)
    }
}

/// `e^{-nu tau} seed + (1 - e^{-nu tau}) / nu * gain`, exact for constant
/// coefficients and nonnegative for nonnegative inputs.
#[inline]
fn exponential_update(seed: f64, tau: f64, nu: f64, gain: f64) -> f64 {
    let a = nu * tau;
    if a <= 0.0 {
        return seed + tau * gain;
    }
    let e = (-a).exp();
    let phi1 = if a > 1e-8 { -(-a).exp_m1() / nu } else { tau * (1.0 - 0.5 * a) };
    e * seed + phi1 * gain
}

/// Trilinear weights over the velocity grid; indices are clamped at the
/// edges, extending the interpolated quantity as a constant.
#[inline]
fn velocity_stencil(vel: &VelocityGrid, v: Vec3) -> ([usize; 8], [f64; 8]) {
    let n = vel.n_per_axis;
    let mut b = [0usize; 3];
    let mut t = [0.0; 3];
    for d in 0..3 {
        let p = ((v[d] + vel.v_max) / vel.h - 0.5).clamp(0.0, (n - 1) as f64);
        let i = (p.floor() as usize).min(n - 2);
        b[d] = i;
        t[d] = p - i as f64;
    }
    let mut idx = [0usize; 8];
    let mut w = [0.0; 8];
    for c in 0..8 {
        let o = [(c >> 2) & 1, (c >> 1) & 1, c & 1];
        idx[c] = vel.index(b[0] + o[0], b[1] + o[1], b[2] + o[2]);
        w[c] = (0..3).map(|d| if o[d] == 1 { t[d] } else { 1.0 - t[d] }).product();
    }
    (idx, w)
}

/// Start-of-step data interpolated at foot points: `F/mu`, `nu(F)` and
/// `gain(F)/mu`. Dividing by `mu` makes the interpolation exact for the
/// Maxwellian.
pub struct StartCache {
    pub ratio: Vec<f64>,
    pub nu: Vec<f64>,
    pub gain_ratio: Vec<f64>,
}

pub struct DuhamelInput<'a> {
    pub start: &'a StartCache,
    /// Collision fields of the current iterate at the end of the step.
    pub iterate: Option<&'a CollisionFields>,
    pub field: &'a FieldHistory,
    pub fluxes: &'a BoundaryFluxTable,
    pub t0: f64,
    pub dt: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct MarchParams {
    pub dt: f64,
    pub picard_tol: f64,
    pub picard_max_iter: usize,
}

/// Outcome of one accepted step.
#[derive(Debug, Clone)]
pub struct StepReport {
    pub t: f64,
    pub iterations: usize,
    /// `sup |F^{l+1} - F^l|` per iterate.
    pub differences: Vec<f64>,
    /// Largest null-flux residual over the wall after the boundary closure.
    pub nullflux_max: f64,
    /// Largest Poisson source mean removed before a solve.
    pub source_mean_max: f64,
    /// Collision gains clamped at zero, summed over iterates.
    pub clamped: usize,
    pub min_value: f64,
    pub max_value: f64,
}

/// Marching state: the current distribution and the potential history.
pub struct Marcher<'a> {
    pub ps: &'a PhaseSpace,
    pub params: MarchParams,
    pub state: DistributionField,
    pub phi: Arc<PotentialField>,
    pub history: FieldHistory,
    pub step: usize,
}

impl<'a> Marcher<'a> {
    pub fn new(ps: &'a PhaseSpace, params: MarchParams, initial: DistributionField) -> Result<Self> {
        initial.check_positive()?;
        let (phi, _) = ps.solve_field(&initial.values, initial.time_stamp)?;
        let phi = Arc::new(phi);
        let history = FieldHistory::new(phi.clone());
        Ok(Marcher { ps, params, state: initial, phi, history, step: 0 })
    }

    pub fn time(&self) -> f64 {
        self.state.time_stamp
    }

    /// Advances one step of length `dt` by Picard iteration, warm-started
    /// from the current state.
    pub fn picard_iterate(&mut self, dt: f64) -> Result<StepReport> {
        let ps = self.ps;
        let t0 = self.time();
        let t1 = t0 + dt;
        let start: &[f64] = &self.state.values;
        let start_fields = ps.collision_fields(start);
        let cache = ps.start_cache(start, start_fields.as_ref());
        let flux0 = ps.outgoing_fluxes(start);
        let mut table = BoundaryFluxTable::new(t0, flux0.clone());
        table.push(t1, flux0);

        let mut phi_end = (*self.phi).clone();
        phi_end.time_stamp = t1;
        let mut history = self.history.clone();
        history.push(Arc::new(phi_end));

        let mut clamped = start_fields.as_ref().map_or(0, |c| c.clamped);
        let mut source_mean_max: f64 = 0.0;
        let mut differences = Vec::new();
        let mut current: Option<(Vec<f64>, Option<CollisionFields>)> = None;
        let mut converged = false;
        for l in 0..self.params.picard_max_iter {
            let (cur, fields) = match &current {
                None => (start, start_fields.as_ref()),
                Some((f, c)) => (f.as_slice(), c.as_ref()),
            };
            let next = ps.duhamel_step(&DuhamelInput {
                start: &cache,
                iterate: fields,
                field: &history,
                fluxes: &table,
                t0,
                dt,
            })?;
            let diff = next.par_iter().zip(cur.par_iter()).map(|(a, b)| (a - b).abs()).reduce(|| 0.0, f64::max);
            let sup = next.par_iter().cloned().reduce(|| 0.0, f64::max);
            log::debug!("step {} iterate {l}: sup diff {diff:e}", self.step + 1);
            if !diff.is_finite() {
                return Err(Error::NotConverged { iterations: l + 1, residual: diff });
            }
            differences.push(diff);
            let done = diff <= self.params.picard_tol * (1.0 + sup);
            if !done && l + 1 < self.params.picard_max_iter {
                let (phi, mean) = ps.solve_field(&next, t1)?;
                source_mean_max = source_mean_max.max(mean.abs());
                history.replace_last(Arc::new(phi));
                table.replace_last(ps.outgoing_fluxes(&next));
                let nf = ps.collision_fields(&next);
                clamped += nf.as_ref().map_or(0, |c| c.clamped);
                current = Some((next, nf));
            } else {
                current = Some((next, None));
                converged = done;
                break;
            }
        }
        let (accepted, _) = current.expect("at least one iterate");
        if !converged {
            return Err(Error::NotConverged {
                iterations: differences.len(),
                residual: *differences.last().unwrap(),
            });
        }

        let (phi, mean) = ps.solve_field(&accepted, t1)?;
        source_mean_max = source_mean_max.max(mean.abs());
        let phi = Arc::new(phi);
        history.replace_last(phi.clone());
        let fluxes = ps.outgoing_fluxes(&accepted);
        let nullflux_max =
            ps.wall.null_flux_residuals(&ps.vel, &fluxes).iter().map(|r| r.abs()).fold(0.0, f64::max);

        self.state = DistributionField { values: accepted, nv: ps.nv(), time_stamp: t1 };
        self.phi = phi;
        self.history = history;
        self.step += 1;
        Ok(StepReport {
            t: t1,
            iterations: differences.len(),
            differences,
            nullflux_max,
            source_mean_max,
            clamped,
            min_value: self.state.min(),
            max_value: self.state.sup(),
        })
    }
}

/// One row of `diag.csv`.
#[derive(Debug, Clone, Serialize)]
pub struct DiagRow {
    pub t: f64,
    pub mass: f64,
    pub sup_wf: f64,
    pub l2_f: f64,
    pub grad_phi_sup: f64,
    pub nullflux_max: f64,
    pub picard_iterations: usize,
}

impl DiagRow {
    pub fn measure(ps: &PhaseSpace, state: &DistributionField, phi: &PotentialField, theta: f64) -> Self {
        DiagRow {
            t: state.time_stamp,
            mass: diagnostics::total_mass(ps, &state.values),
            sup_wf: diagnostics::weighted_sup_norm_of(ps, &state.values, theta),
            l2_f: diagnostics::perturbation_lp_norm(ps, &state.values, 2.0),
            grad_phi_sup: phi.grad_sup(),
            nullflux_max: 0.0,
            picard_iterations: 0,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct MarchOptions {
    /// Directory for `diag.csv` and potential snapshots.
    pub out_dir: Option<PathBuf>,
    /// Keep copies of `F` at snapshot steps in the artifacts.
    pub keep_snapshots: bool,
}

pub struct RunArtifacts {
    pub rows: Vec<DiagRow>,
    pub reports: Vec<StepReport>,
    /// `F` at step 0 and every `snapshot_every` steps, if requested.
    pub snapshots: Vec<DistributionField>,
    pub history: FieldHistory,
    pub final_state: DistributionField,
    pub dt: f64,
    /// Half-space quadrature tolerance of the wall.
    pub nullflux_tol: f64,
}

/// Decay rate of the field before `t = 0` (the negative-time extension).
pub const FIELD_DECAY_RATE: f64 = 1.0;

/// `epsilon > 2 delta_1 / Lambda_1` with `delta_1 = |grad phi(0)|_inf`.
pub fn check_trace_constraint(epsilon: f64, grad_phi_sup: f64) -> Result<()> {
    let bound = 2.0 * grad_phi_sup / FIELD_DECAY_RATE;
    if epsilon > bound {
        Ok(())
    } else {
        Err(Error::ConstraintViolation { which: format!("epsilon > 2 delta_1 / Lambda_1 = {bound:.3e}") })
    }
}

/// Step length and count for a configuration started at `t = 0`.
pub fn schedule(cfg: &RunConfig, ps: &PhaseSpace) -> (f64, usize) {
    schedule_from(cfg, ps, 0.0)
}

/// Step length and count from `t0`: `steps` when set, otherwise up to `t_end`.
pub fn schedule_from(cfg: &RunConfig, ps: &PhaseSpace, t0: f64) -> (f64, usize) {
    let dt = cfg.march.dt.unwrap_or_else(|| ps.default_dt());
    let steps = cfg.march.steps.unwrap_or_else(|| ((cfg.march.t_end - t0) / dt - 1e-9).ceil().max(0.0) as usize);
    (dt, steps)
}

/// Runs a configuration from `t = 0`, emitting one diagnostics row per step.
pub fn time_march(cfg: &RunConfig, ps: &PhaseSpace, opts: &MarchOptions) -> Result<RunArtifacts> {
    time_march_from(cfg, ps, ps.initial_data(&cfg.init), opts)
}

/// Continues from `initial`: `steps` counts from its time stamp, `t_end` is
/// absolute.
pub fn time_march_from(
    cfg: &RunConfig,
    ps: &PhaseSpace,
    initial: DistributionField,
    opts: &MarchOptions,
) -> Result<RunArtifacts> {
    let t0 = initial.time_stamp;
    let (dt, steps) = schedule_from(cfg, ps, t0);
    let t_end = cfg.march.steps.map_or(cfg.march.t_end, |n| t0 + n as f64 * dt);
    let params = MarchParams { dt, picard_tol: cfg.march.picard_tol, picard_max_iter: cfg.march.picard_max_iter };
    let theta = cfg.physics.theta;
    let every = cfg.io.snapshot_every;
    let mut marcher = Marcher::new(ps, params, initial)?;
    check_trace_constraint(cfg.physics.epsilon, marcher.phi.grad_sup())?;

    let mut writer = match &opts.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(csv::Writer::from_path(dir.join("diag.csv")).map_err(csv_error)?)
        }
        None => None,
    };
    let snapshot = |m: &Marcher, snaps: &mut Vec<DistributionField>| -> Result<()> {
        if opts.keep_snapshots {
            snaps.push(m.state.clone());
        }
        if let Some(dir) = &opts.out_dir {
            m.phi.write_snapshot(&dir.join(format!("phi_{:05}", m.step)))?;
        }
        Ok(())
    };

    let mut rows = Vec::with_capacity(steps + 1);
    let mut reports = Vec::with_capacity(steps);
    let mut snapshots = Vec::new();
    let first = DiagRow::measure(ps, &marcher.state, &marcher.phi, theta);
    if let Some(w) = writer.as_mut() {
        w.serialize(&first).map_err(csv_error)?;
    }
    rows.push(first);
    if every > 0 {
        snapshot(&marcher, &mut snapshots)?;
    }

    for n in 0..steps {
        let h = dt.min(t_end - marcher.time());
        if h <= 1e-12 * dt {
            break;
        }
        let report = marcher.picard_iterate(h).map_err(|e| Error::AtStep { step: n + 1, source: Box::new(e) })?;
        let mut row = DiagRow::measure(ps, &marcher.state, &marcher.phi, theta);
        row.nullflux_max = report.nullflux_max;
        row.picard_iterations = report.iterations;
        log::info!(
            "step {:>4} t = {:.4} mass = {:.10} |wf| = {:.3e} |grad phi| = {:.3e} picard = {}",
            n + 1,
            row.t,
            row.mass,
            row.sup_wf,
            row.grad_phi_sup,
            row.picard_iterations
        );
        if let Some(w) = writer.as_mut() {
            w.serialize(&row).map_err(csv_error)?;
            w.flush()?;
        }
        rows.push(row);
        reports.push(report);
        if every > 0 && (n + 1) % every == 0 {
            snapshot(&marcher, &mut snapshots)?;
        }
    }
    if let Some(mut w) = writer {
        w.flush()?;
    }
    Ok(RunArtifacts {
        rows,
        reports,
        snapshots,
        history: marcher.history,
        final_state: marcher.state,
        dt,
        nullflux_tol: ps.nullflux_tol,
    })
}

fn csv_error(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}
