//! Diffuse reflection at the wall.
//!
//! Half-space integrals over the velocity grid use Maxwellian-weighted cell
//! weights `W_j = int_cell (n.u)_+ mu(u) du`, exact for cells on one side of
//! the plane `n.u = 0` and clipped by a fine rule for cells it cuts. A grid
//! function `F` is integrated as `sum_j (F_j / mu_j) W_j`, which makes the
//! Maxwellian identities hold to the truncation of the grid.

use crate::characteristics::{Characteristics, ForceField, PhasePoint, GRAZING_CUTOFF};
use crate::collision::{collision_frequency_exact, maxwellian};
use crate::geometry::{ConvexDomain, SurfacePoint};
use crate::error::{Error, Result};
use crate::math::{add, dot, erf, gauss_legendre_on, norm, orthonormal_frame, scale, sub, Vec3};
use crate::spatial::SpatialGrid;
use crate::velocity::VelocityGrid;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use std::f64::consts::PI;

/// Normalization of the re-emitted Maxwellian.
pub fn c_mu() -> f64 {
    (2.0 * PI).sqrt()
}

/// `c_mu mu(v) flux` for an incoming velocity (`n . v < 0`).
pub fn apply_diffuse_bc(flux: f64, n: Vec3, v: Vec3) -> Result<f64> {
    let nv = dot(n, v);
    if nv >= 0.0 {
        return Err(Error::WrongSide(nv));
    }
    Ok(c_mu() * maxwellian(v) * flux)
}

/// `int (n.u)_+ g` over `u` in the half-space for a smooth `g`, by a product
/// Gauss rule in the frame of `n`.
pub fn half_space_integral<G: Fn(Vec3) -> f64>(g: G, n: Vec3, order: usize) -> f64 {
    let (e1, e2) = orthonormal_frame(n);
    let normal = gauss_legendre_on(order, 0.0, 10.0);
    let tang = gauss_legendre_on(order, -10.0, 10.0);
    let mut acc = 0.0;
    for &(s, ws) in &normal {
        for &(a, wa) in &tang {
            for &(b, wb) in &tang {
                let u = add(scale(n, s), add(scale(e1, a), scale(e2, b)));
                acc += ws * wa * wb * s * g(u);
            }
        }
    }
    acc
}

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// `int_a^b g` and `int_a^b u g` for the standard normal density `g`.
fn gauss_moments(a: f64, b: f64) -> (f64, f64) {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let m0 = 0.5 * (erf(b * s) - erf(a * s));
    let m1 = INV_SQRT_2PI * ((-0.5 * a * a).exp() - (-0.5 * b * b).exp());
    (m0, m1)
}

/// Half-space cell weights of a velocity grid for one normal.
#[derive(Debug, Clone)]
pub struct HalfSpaceWeights {
    pub normal: Vec3,
    /// `int_cell (n.u)_+ mu du / mu_j`, per node.
    pub plus: Vec<f64>,
    /// `int_cell (n.u)_- mu du / mu_j`, per node.
    pub minus: Vec<f64>,
}

impl HalfSpaceWeights {
    pub fn new(grid: &VelocityGrid, n: Vec3) -> Self {
        let h = grid.h;
        let half = 0.5 * h;
        let d_star = (0..3).max_by(|&a, &b| n[a].abs().total_cmp(&n[b].abs())).unwrap();
        let (p, q) = ((d_star + 1) % 3, (d_star + 2) % 3);
        let rule = gauss_legendre_on(8, -half, half);
        let (plus, minus): (Vec<f64>, Vec<f64>) = grid
            .nodes()
            .par_iter()
            .map(|&c| {
                let mu_c = maxwellian(c);
                if mu_c == 0.0 {
                    return (0.0, 0.0);
                }
                let m: Vec<(f64, f64)> = (0..3).map(|d| gauss_moments(c[d] - half, c[d] + half)).collect();
                // full first moment int (n.u) mu over the cell
                let full = (0..3)
                    .map(|d| n[d] * m[d].1 * m[(d + 1) % 3].0 * m[(d + 2) % 3].0)
                    .sum::<f64>();
                let extreme = half * (n[0].abs() + n[1].abs() + n[2].abs());
                let nc = dot(n, c);
                let pos = if nc - extreme >= 0.0 {
                    full
                } else if nc + extreme <= 0.0 {
                    0.0
                } else {
                    // cut cell: exact along the dominant axis, Gauss across it
                    let nd = n[d_star];
                    let (lo, hi) = (c[d_star] - half, c[d_star] + half);
                    let mut acc = 0.0;
                    for &(a, wa) in &rule {
                        let ua = c[p] + a;
                        for &(b, wb) in &rule {
                            let ub = c[q] + b;
                            let c0 = n[p] * ua + n[q] * ub;
                            let root = -c0 / nd;
                            let (l, r) = if nd > 0.0 { (lo.max(root), hi) } else { (lo, hi.min(root)) };
                            if r <= l {
                                continue;
                            }
                            let (m0, m1) = gauss_moments(l, r);
                            let g = INV_SQRT_2PI * INV_SQRT_2PI * (-0.5 * (ua * ua + ub * ub)).exp();
                            acc += wa * wb * g * (c0 * m0 + nd * m1);
                        }
                    }
                    acc
                };
                let pos = pos.max(0.0);
                let neg = (pos - full).max(0.0);
                (pos / mu_c, neg / mu_c)
            })
            .unzip();
        HalfSpaceWeights { normal: n, plus, minus }
    }

    /// `int_{n.u > 0} F (n.u) du`.
    pub fn outgoing_flux(&self, f: &[f64]) -> f64 {
        f.iter().zip(&self.plus).map(|(a, w)| a * w).sum()
    }

    /// `int_{n.u < 0} F |n.u| du`.
    pub fn incoming_flux(&self, f: &[f64]) -> f64 {
        f.iter().zip(&self.minus).map(|(a, w)| a * w).sum()
    }

    /// `int F (n.u) du`.
    pub fn null_flux_residual(&self, f: &[f64]) -> f64 {
        self.outgoing_flux(f) - self.incoming_flux(f)
    }

    /// `c_mu int_{n.u > 0} mu (n.u) du`; 1 up to grid truncation.
    pub fn normalization(&self, grid: &VelocityGrid) -> f64 {
        c_mu() * self.outgoing_flux(&grid.sample(maxwellian))
    }

    /// Incoming side after diffuse re-emission of the outgoing flux:
    /// `c_mu flux int_{n.u < 0} mu |n.u| du`.
    pub fn reemitted_flux(&self, grid: &VelocityGrid, flux: f64) -> f64 {
        c_mu() * flux * self.incoming_flux(&grid.sample(maxwellian))
    }

    /// Replaces `F` at incoming nodes (`n . v_j < 0`) by the diffuse re-emission
    /// of its outgoing flux. Returns the flux.
    pub fn impose_diffuse(&self, grid: &VelocityGrid, f: &mut [f64]) -> f64 {
        let flux = self.outgoing_flux(f);
        for (j, fj) in f.iter_mut().enumerate() {
            let v = grid.node(j);
            if dot(self.normal, v) < 0.0 {
                *fj = c_mu() * maxwellian(v) * flux;
            }
        }
        flux
    }
}

/// One draw from `d sigma = c_mu mu(v) (n.v) dv` on `{n . v > 0}`: Rayleigh
/// along `n`, standard normal across.
pub fn sample_sigma<R: Rng + ?Sized>(n: Vec3, rng: &mut R) -> Vec3 {
    let (e1, e2) = orthonormal_frame(n);
    let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let s = (-2.0 * u.ln()).sqrt();
    let a: f64 = rng.sample(StandardNormal);
    let b: f64 = rng.sample(StandardNormal);
    add(scale(n, s), add(scale(e1, a), scale(e2, b)))
}

/// Nearest-node lookup over surface points by uniform bucketing.
#[derive(Debug, Clone)]
struct SurfaceIndex {
    lo: Vec3,
    size: f64,
    dims: [usize; 3],
    buckets: Vec<Vec<u32>>,
}

impl SurfaceIndex {
    fn new(points: &[Vec3]) -> Self {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points {
            for d in 0..3 {
                lo[d] = lo[d].min(p[d]);
                hi[d] = hi[d].max(p[d]);
            }
        }
        let ext = (0..3).map(|d| hi[d] - lo[d]).fold(0.0, f64::max).max(1e-12);
        let per_axis = ((points.len() as f64).sqrt().ceil() as usize).clamp(1, 64);
        let size = ext / per_axis as f64;
        let dims = [0, 1, 2].map(|d| (((hi[d] - lo[d]) / size).floor() as usize + 1).max(1));
        let mut buckets = vec![Vec::new(); dims[0] * dims[1] * dims[2]];
        let mut idx = SurfaceIndex { lo, size, dims, buckets: Vec::new() };
        for (i, p) in points.iter().enumerate() {
            let b = idx.bucket_of(*p);
            buckets[idx.flat(b)].push(i as u32);
        }
        idx.buckets = buckets;
        idx
    }

    fn bucket_of(&self, p: Vec3) -> [isize; 3] {
        [0, 1, 2].map(|d| ((p[d] - self.lo[d]) / self.size).floor() as isize)
    }

    fn flat(&self, b: [isize; 3]) -> usize {
        let c = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
        (c(b[0], self.dims[0]) * self.dims[1] + c(b[1], self.dims[1])) * self.dims[2] + c(b[2], self.dims[2])
    }

    /// The `k` nearest points to `x` as `(index, distance)`.
    fn nearest(&self, points: &[Vec3], x: Vec3, k: usize) -> Vec<(u32, f64)> {
        let centre = self.bucket_of(x);
        let clamped = [0, 1, 2].map(|d| centre[d].clamp(0, self.dims[d] as isize - 1));
        let max_ring = *self.dims.iter().max().unwrap() as isize;
        let mut best: Vec<(u32, f64)> = Vec::with_capacity(k + 1);
        for ring in 0..=max_ring {
            for i in -ring..=ring {
                for j in -ring..=ring {
                    for l in -ring..=ring {
                        if i.abs().max(j.abs()).max(l.abs()) != ring {
                            continue;
                        }
                        let b = [clamped[0] + i, clamped[1] + j, clamped[2] + l];
                        if (0..3).any(|d| b[d] < 0 || b[d] >= self.dims[d] as isize) {
                            continue;
                        }
                        for &pi in &self.buckets[self.flat(b)] {
                            let d = norm(sub(points[pi as usize], x));
                            if best.len() < k || d < best[k - 1].1 {
                                let pos = best.partition_point(|e| e.1 <= d);
                                best.insert(pos, (pi, d));
                                best.truncate(k);
                            }
                        }
                    }
                }
            }
            // every unvisited bucket lies at least `ring * size` away from x's bucket
            if best.len() == k && best[k - 1].1 <= ring as f64 * self.size {
                break;
            }
        }
        best
    }
}

/// Wall quadrature nodes with everything needed to evaluate the outgoing flux
/// of a phase-space distribution.
#[derive(Debug, Clone)]
pub struct Wall {
    pub points: Vec<SurfacePoint>,
    pub weights: Vec<HalfSpaceWeights>,
    /// Phase nodes and weights interpolating `F` to each wall point.
    stencils: Vec<Vec<(u32, f64)>>,
    positions: Vec<Vec3>,
    index: SurfaceIndex,
}

impl Wall {
    /// Wall nodes from the domain's boundary quadrature of the given order.
    pub fn new(space: &SpatialGrid, vel: &VelocityGrid, order: usize) -> Self {
        let points = space.domain.boundary_quadrature(order);
        let weights = points.iter().map(|p| HalfSpaceWeights::new(vel, p.normal)).collect();
        let stencils = points
            .iter()
            .map(|p| space.stencil(p.position).iter().map(|(n, w)| (n as u32, w)).collect())
            .collect();
        let positions: Vec<Vec3> = points.iter().map(|p| p.position).collect();
        let index = SurfaceIndex::new(&positions);
        Wall { points, weights, stencils, positions, index }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// `F` interpolated to wall point `k` (velocity slice).
    pub fn slice(&self, big_f: &[f64], nv: usize, k: usize) -> Vec<f64> {
        let mut out = vec![0.0; nv];
        for &(node, w) in &self.stencils[k] {
            let src = &big_f[node as usize * nv..(node as usize + 1) * nv];
            for (o, s) in out.iter_mut().zip(src) {
                *o += w * s;
            }
        }
        out
    }

    /// Outgoing flux at every wall point.
    pub fn outgoing_fluxes(&self, big_f: &[f64], nv: usize) -> Vec<f64> {
        (0..self.len())
            .into_par_iter()
            .map(|k| self.weights[k].outgoing_flux(&self.slice(big_f, nv, k)))
            .collect()
    }

    /// Net flux `int F (n.u) du` at every wall point once the incoming side is
    /// the diffuse re-emission of the outgoing flux.
    pub fn null_flux_residuals(&self, vel: &VelocityGrid, fluxes: &[f64]) -> Vec<f64> {
        self.weights.iter().zip(fluxes).map(|(w, &fl)| fl - w.reemitted_flux(vel, fl)).collect()
    }

    /// Largest deviation of the half-space normalization from 1 over the wall:
    /// the half-space quadrature tolerance.
    pub fn quadrature_tolerance(&self, vel: &VelocityGrid) -> f64 {
        self.weights.iter().map(|w| (w.normalization(vel) - 1.0).abs()).fold(f64::EPSILON, f64::max)
    }

    /// Wall points nearest to `x` with inverse-distance weights.
    pub fn interpolation_weights(&self, x: Vec3) -> Vec<(u32, f64)> {
        let near = self.index.nearest(&self.positions, x, 3);
        if let Some(&(i, d)) = near.first() {
            if d < 1e-14 {
                return vec![(i, 1.0)];
            }
        }
        let total: f64 = near.iter().map(|e| 1.0 / e.1).sum();
        near.into_iter().map(|(i, d)| (i, 1.0 / d / total)).collect()
    }
}

/// Outgoing wall flux at stored times; linear in time and inverse-distance
/// over the three nearest wall points in space.
#[derive(Debug, Clone)]
pub struct BoundaryFluxTable {
    pub times: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

impl BoundaryFluxTable {
    pub fn new(t: f64, fluxes: Vec<f64>) -> Self {
        BoundaryFluxTable { times: vec![t], values: vec![fluxes] }
    }

    pub fn push(&mut self, t: f64, fluxes: Vec<f64>) {
        assert!(t > *self.times.last().unwrap());
        self.times.push(t);
        self.values.push(fluxes);
    }

    pub fn replace_last(&mut self, fluxes: Vec<f64>) {
        *self.values.last_mut().unwrap() = fluxes;
    }

    /// Keeps only the newest `keep` time levels.
    pub fn truncate_front(&mut self, keep: usize) {
        let n = self.times.len();
        if n > keep {
            self.times.drain(..n - keep);
            self.values.drain(..n - keep);
        }
    }

    pub fn flux_at(&self, wall: &Wall, t: f64, x: Vec3) -> f64 {
        let stencil = wall.interpolation_weights(x);
        let at = |level: usize| stencil.iter().map(|&(i, w)| w * self.values[level][i as usize]).sum::<f64>();
        let n = self.times.len();
        if n == 1 || t <= self.times[0] {
            return at(0);
        }
        if t >= self.times[n - 1] {
            return at(n - 1);
        }
        let k = self.times.partition_point(|&s| s <= t);
        let w = (t - self.times[k - 1]) / (self.times[k] - self.times[k - 1]);
        (1.0 - w) * at(k - 1) + w * at(k)
    }
}

/// A stochastic cycle: successive backward wall hits with re-emitted velocities.
#[derive(Debug, Clone)]
pub struct StochasticCycle {
    /// `(t_j, x_j, v_j)`: wall hit times and positions with the velocity drawn
    /// there from `d sigma` (`n(x_j) . v_j > 0`); the last entry's velocity is
    /// the one traced to the truncation.
    pub nodes: Vec<(f64, Vec3, Vec3)>,
    /// Collision damping `exp(-nu(v_j) (t_j - t_{j+1}))` per leg.
    pub damping: Vec<f64>,
    /// True if the cycle reached `t <= 0` before `k` bounces.
    pub truncated: bool,
    /// Grazing draws that were rejected and redrawn.
    pub resampled: usize,
    /// True if 100 consecutive draws were grazing.
    pub degenerate: bool,
    /// Log of the likelihood ratio `prod d sigma / d sigma_tau` of the draws.
    pub log_likelihood: f64,
}

impl StochasticCycle {
    /// Product of the pure `d sigma` factors relative to the sampling
    /// measure; 1 when the draws come from `d sigma` itself.
    pub fn weight(&self) -> f64 {
        self.log_likelihood.exp()
    }

    pub fn damped_weight(&self) -> f64 {
        self.weight() * self.damping.iter().product::<f64>()
    }

    pub fn k(&self) -> usize {
        self.nodes.len()
    }
}

const MAX_RESAMPLE: usize = 100;

/// Follows up to `k` diffuse bounces backwards from `p`.
pub fn stochastic_cycle<F: ForceField + ?Sized, R: Rng + ?Sized>(
    ch: &Characteristics<'_, F>,
    p: PhasePoint,
    k: usize,
    rng: &mut R,
) -> StochasticCycle {
    tilted_cycle(ch, p, k, Tilt::NONE, rng)
}

/// Share of re-emission draws taken from `d sigma` itself when tilting, which
/// bounds every likelihood ratio by its inverse.
const DEFENSIVE_SHARE: f64 = 0.2;

/// Scales of the re-emission draw: the Rayleigh normal component by `normal`
/// and the Gaussian tangential components by `tangential`. Draws come from the
/// mixture `DEFENSIVE_SHARE d sigma + (1 - DEFENSIVE_SHARE) d sigma_tilt`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tilt {
    pub normal: f64,
    pub tangential: f64,
}

impl Tilt {
    pub const NONE: Tilt = Tilt { normal: 1.0, tangential: 1.0 };

    /// `log(d sigma / d q)` at `v` with normal component `vn`, `q` the
    /// defensive mixture.
    fn log_ratio(&self, vn: f64, v: Vec3) -> f64 {
        let (a2, b2) = (self.normal * self.normal, self.tangential * self.tangential);
        let vt2 = dot(v, v) - vn * vn;
        let tilt_over_sigma = (-(a2.ln() + b2.ln()) + 0.5 * vn * vn * (1.0 - 1.0 / a2) + 0.5 * vt2 * (1.0 - 1.0 / b2)).exp();
        -(DEFENSIVE_SHARE + (1.0 - DEFENSIVE_SHARE) * tilt_over_sigma).ln()
    }
}

/// As [`stochastic_cycle`], drawing the re-emitted velocities from the tilted
/// measure and recording the likelihood ratio against `d sigma`.
pub fn tilted_cycle<F: ForceField + ?Sized, R: Rng + ?Sized>(
    ch: &Characteristics<'_, F>,
    p: PhasePoint,
    k: usize,
    tilt: Tilt,
    rng: &mut R,
) -> StochasticCycle {
    assert!(k >= 1 && tilt.normal > 0.0 && tilt.tangential > 0.0);
    let domain: &ConvexDomain = ch.domain;
    let draw = |n: Vec3, rng: &mut R| {
        let (e1, e2) = orthonormal_frame(n);
        let tilt = if tilt == Tilt::NONE || rng.gen_bool(DEFENSIVE_SHARE) { Tilt::NONE } else { tilt };
        let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let s = tilt.normal * (-2.0 * u.ln()).sqrt();
        let a: f64 = tilt.tangential * rng.sample::<f64, _>(StandardNormal);
        let b: f64 = tilt.tangential * rng.sample::<f64, _>(StandardNormal);
        add(scale(n, s), add(scale(e1, a), scale(e2, b)))
    };
    let mut cycle = StochasticCycle {
        nodes: Vec::new(),
        damping: Vec::new(),
        truncated: false,
        resampled: 0,
        degenerate: false,
        log_likelihood: 0.0,
    };
    let first = ch.backward_exit(p, p.t.max(0.0));
    if !first.hit || p.t - first.t_b <= 0.0 {
        cycle.truncated = true;
        return cycle;
    }
    let mut t = p.t - first.t_b;
    let mut x = first.x_b;
    cycle.damping.push((-collision_frequency_exact(p.v) * first.t_b).exp());
    for j in 0..k {
        let n = domain.level_normal(x);
        let mut v = draw(n, rng);
        let mut tries = 0;
        while dot(n, v) < GRAZING_CUTOFF * norm(v).max(1.0) {
            tries += 1;
            if tries >= MAX_RESAMPLE {
                cycle.degenerate = true;
                return cycle;
            }
            v = draw(n, rng);
        }
        cycle.resampled += tries;
        if tilt != Tilt::NONE {
            cycle.log_likelihood += tilt.log_ratio(dot(n, v), v);
        }
        cycle.nodes.push((t, x, v));
        if j + 1 == k {
            break;
        }
        let ex = ch.backward_exit(PhasePoint::new(t, x, v), t);
        if !ex.hit || t - ex.t_b <= 0.0 {
            cycle.damping.push((-collision_frequency_exact(v) * t).exp());
            cycle.truncated = true;
            return cycle;
        }
        cycle.damping.push((-collision_frequency_exact(v) * ex.t_b).exp());
        t -= ex.t_b;
        x = ex.x_b;
    }
    cycle
}

/// Monte-Carlo estimate of `int 1_{t^k > 0} d Sigma`: the mass of cycles
/// that are still at positive time after `k` bounces.
#[derive(Debug, Clone, Copy)]
pub struct TailMass {
    pub k: usize,
    pub estimate: f64,
    pub std_error: f64,
    /// Same indicator weighted by the collision damping of the legs.
    pub damped: f64,
    pub damped_std_error: f64,
    pub degenerate: usize,
    /// Tilt of the re-emission draws used for the estimate.
    pub tilt: Tilt,
}

/// Normal and tangential scales tried by the pilot runs of [`cycle_tail_mass`].
const TILT_NORMAL: [f64; 7] = [1.0, 0.5, 0.25, 0.125, 0.0625, 0.03125, 0.015625];
const TILT_TANGENTIAL: [f64; 3] = [1.0, 2.0, 4.0];

/// Importance-sampled tail mass. Many bounces within a short time need short
/// flights, which are rare under `d sigma`; the re-emitted velocities are
/// drawn from a [`Tilt`] favouring them, chosen as the one with the smallest
/// relative error over short pilot runs. The estimate is unbiased for every
/// tilt.
pub fn cycle_tail_mass<F: ForceField + ?Sized>(
    ch: &Characteristics<'_, F>,
    x: Vec3,
    v: Vec3,
    t: f64,
    k: usize,
    n_samples: usize,
    seed: u64,
) -> TailMass {
    let pilot = (n_samples / 8).max(64);
    let mut best = (Tilt::NONE, f64::INFINITY);
    if k > 1 {
        for (i, &normal) in TILT_NORMAL.iter().enumerate() {
            for (j, &tangential) in TILT_TANGENTIAL.iter().enumerate() {
                let tilt = Tilt { normal, tangential };
                let m = tail_mass_at(ch, x, v, t, k, pilot, tilt, seed ^ (0x9e37_79b9 + (8 * i + j) as u64));
                if m.estimate > 0.0 && m.std_error / m.estimate < best.1 {
                    best = (tilt, m.std_error / m.estimate);
                }
            }
        }
    }
    tail_mass_at(ch, x, v, t, k, n_samples, best.0, seed)
}

#[allow(clippy::too_many_arguments)]
fn tail_mass_at<F: ForceField + ?Sized>(
    ch: &Characteristics<'_, F>,
    x: Vec3,
    v: Vec3,
    t: f64,
    k: usize,
    n_samples: usize,
    tilt: Tilt,
    seed: u64,
) -> TailMass {
    let results: Vec<(f64, f64, bool)> = (0..n_samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let c = tilted_cycle(ch, PhasePoint::new(t, x, v), k, tilt, &mut rng);
            if c.degenerate {
                return (0.0, 0.0, true);
            }
            let alive = !c.truncated && c.k() == k && c.nodes[k - 1].0 > 0.0;
            if alive {
                (c.weight(), c.damped_weight(), false)
            } else {
                (0.0, 0.0, false)
            }
        })
        .collect();
    let degenerate = results.iter().filter(|r| r.2).count();
    let n = (n_samples - degenerate).max(1) as f64;
    // weights may be far below 1e-150, so moments are taken relative to the largest
    let stats = |vals: Vec<f64>| {
        let top = vals.iter().cloned().fold(0.0, f64::max);
        if top == 0.0 {
            return (0.0, 0.0);
        }
        let m = vals.iter().map(|a| a / top).sum::<f64>() / n;
        let var = vals.iter().map(|a| (a / top - m) * (a / top - m)).sum::<f64>() / (n - 1.0).max(1.0);
        (m * top, (var / n).sqrt() * top)
    };
    let live: Vec<&(f64, f64, bool)> = results.iter().filter(|r| !r.2).collect();
    let (estimate, std_error) = stats(live.iter().map(|r| r.0).collect());
    let (damped, damped_std_error) = stats(live.iter().map(|r| r.1).collect());
    TailMass { k, estimate, std_error, damped, damped_std_error, degenerate, tilt }
}
