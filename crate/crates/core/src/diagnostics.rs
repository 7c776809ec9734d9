//! Measured quantities: conserved mass, weighted norms, hydrodynamic
//! moments, decay and growth fits, weighted Sobolev seminorms and
//! invariance residuals.

use crate::characteristics::{Characteristics, ForceField, PhasePoint, WeightParams};
use crate::error::{Error, Result};
use crate::geometry::ConvexDomain;
use crate::math::{norm2, pairwise_sum, Vec3};
use crate::solver::{perturbation_value, DistributionField, PhaseSpace, SQRT_MU_FLOOR};
use crate::velocity::VelocityGrid;
use nalgebra::{SMatrix, SVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

/// `int int F dv dx` by the phase-grid quadrature.
pub fn total_mass(ps: &PhaseSpace, big_f: &[f64]) -> f64 {
    let nv = ps.nv();
    let per_node: Vec<f64> = big_f
        .par_chunks(nv)
        .zip(ps.space.node_weights.par_iter())
        .map(|(row, w)| pairwise_sum(row) * w)
        .collect();
    pairwise_sum(&per_node) * ps.vel.cell_volume
}

/// `max e^{theta |v|^2} |f|` over a node-major perturbation.
pub fn weighted_sup_norm(vel: &VelocityGrid, f: &[f64], theta: f64) -> f64 {
    let nv = vel.len();
    let w: Vec<f64> = vel.nodes().iter().map(|&v| (theta * norm2(v)).exp()).collect();
    f.par_iter().enumerate().map(|(k, x)| w[k % nv] * x.abs()).reduce(|| 0.0, f64::max)
}

/// [`weighted_sup_norm`] of the perturbation of `F`, without storing it.
pub fn weighted_sup_norm_of(ps: &PhaseSpace, big_f: &[f64], theta: f64) -> f64 {
    let nv = ps.nv();
    let w: Vec<f64> = ps.vel.nodes().iter().map(|&v| (theta * norm2(v)).exp()).collect();
    big_f
        .par_iter()
        .enumerate()
        .map(|(k, &x)| w[k % nv] * perturbation_value(x, ps.sqrt_mu[k % nv]).abs())
        .reduce(|| 0.0, f64::max)
}

/// `(int int |g|^p)^{1/p}` of node-major samples over the phase grid.
pub fn lp_norm(ps: &PhaseSpace, g: &[f64], p: f64) -> f64 {
    let nv = ps.nv();
    let per_node: Vec<f64> = g
        .par_chunks(nv)
        .zip(ps.space.node_weights.par_iter())
        .map(|(row, w)| {
            let t: Vec<f64> = row.iter().map(|x| x.abs().powf(p)).collect();
            pairwise_sum(&t) * w
        })
        .collect();
    (pairwise_sum(&per_node) * ps.vel.cell_volume).powf(1.0 / p)
}

/// `L^p` norm of the perturbation of `F`.
pub fn perturbation_lp_norm(ps: &PhaseSpace, big_f: &[f64], p: f64) -> f64 {
    let nv = ps.nv();
    let f: Vec<f64> = big_f.par_iter().enumerate().map(|(k, &x)| perturbation_value(x, ps.sqrt_mu[k % nv])).collect();
    lp_norm(ps, &f, p)
}

/// Per-time summary of a run state.
#[derive(Debug, Clone, Serialize)]
pub struct NormReport {
    pub t: f64,
    pub mass: f64,
    pub sup_wf: f64,
    pub l2_f: f64,
    pub lp_f: f64,
    pub grad_phi_sup: f64,
    pub w1p_alpha: f64,
    pub nullflux_max: f64,
    pub alpha_inv_residual_max: f64,
}

/// Coefficients of `(a + v . b + (|v|^2 - 3)/2 c) sqrt(mu)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MacroMoments {
    pub a: f64,
    pub b: Vec3,
    pub c: f64,
}

fn macro_basis(v: Vec3, sqrt_mu: f64) -> [f64; 5] {
    [sqrt_mu, v[0] * sqrt_mu, v[1] * sqrt_mu, v[2] * sqrt_mu, 0.5 * (norm2(v) - 3.0) * sqrt_mu]
}

/// Discrete `L^2_v` projection of `f` (one spatial point) onto the
/// hydrodynamic subspace.
pub fn macroscopic_projection(vel: &VelocityGrid, sqrt_mu: &[f64], f: &[f64]) -> MacroMoments {
    let mut gram = SMatrix::<f64, 5, 5>::zeros();
    let mut rhs = SVector::<f64, 5>::zeros();
    for (j, &v) in vel.nodes().iter().enumerate() {
        let e = macro_basis(v, sqrt_mu[j]);
        for a in 0..5 {
            rhs[a] += e[a] * f[j];
            for b in 0..5 {
                gram[(a, b)] += e[a] * e[b];
            }
        }
    }
    let x = gram.cholesky().expect("hydrodynamic basis is independent").solve(&rhs);
    MacroMoments { a: x[0], b: [x[1], x[2], x[3]], c: x[4] }
}

impl MacroMoments {
    pub fn reconstruct(&self, vel: &VelocityGrid, sqrt_mu: &[f64]) -> Vec<f64> {
        vel.nodes()
            .iter()
            .enumerate()
            .map(|(j, &v)| {
                let e = macro_basis(v, sqrt_mu[j]);
                self.a * e[0] + self.b[0] * e[1] + self.b[1] * e[2] + self.b[2] * e[3] + self.c * e[4]
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecayFit {
    /// Minus the slope of `log(value)` against `t`.
    pub rate: f64,
    pub r2: f64,
}

fn linear_fit(t: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = t.len() as f64;
    let tm = t.iter().sum::<f64>() / n;
    let ym = y.iter().sum::<f64>() / n;
    let stt: f64 = t.iter().map(|a| (a - tm).powi(2)).sum();
    let sty: f64 = t.iter().zip(y).map(|(a, b)| (a - tm) * (b - ym)).sum();
    let slope = if stt > 0.0 { sty / stt } else { 0.0 };
    let intercept = ym - slope * tm;
    let ss_tot: f64 = y.iter().map(|b| (b - ym).powi(2)).sum();
    let ss_res: f64 = t.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    (slope, intercept, r2)
}

/// Least-squares exponential rate over the trailing `window` fraction of a
/// `(t, value)` series.
pub fn decay_fit(series: &[(f64, f64)], window: f64) -> Result<DecayFit> {
    if series.iter().any(|&(_, v)| !(v > 0.0)) {
        return Err(Error::NonPositiveValues);
    }
    let n = series.len();
    let keep = ((window * n as f64).ceil() as usize).clamp(2.min(n), n);
    let tail = &series[n - keep..];
    let t: Vec<f64> = tail.iter().map(|p| p.0).collect();
    let y: Vec<f64> = tail.iter().map(|p| p.1.ln()).collect();
    let (slope, _, r2) = linear_fit(&t, &y);
    Ok(DecayFit { rate: if slope == 0.0 { 0.0 } else { -slope }, r2 })
}

/// Smallest `C >= 0` with `value(t) <= e^{C (t - t_0)} value(t_0)` and a check
/// for accelerating growth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrowthEnvelope {
    pub c: f64,
    /// Slopes of `log(value)` over the first and second halves.
    pub early_slope: f64,
    pub late_slope: f64,
    /// The late half grows, and faster than the early half.
    pub super_exponential: bool,
}

pub fn growth_envelope(series: &[(f64, f64)]) -> Result<GrowthEnvelope> {
    if series.iter().any(|&(_, v)| !(v > 0.0)) {
        return Err(Error::NonPositiveValues);
    }
    let (t0, v0) = series[0];
    let c = series[1..]
        .iter()
        .filter(|p| p.0 > t0)
        .map(|&(t, v)| (v / v0).ln() / (t - t0))
        .fold(0.0, f64::max);
    let half = series.len() / 2;
    let slope = |s: &[(f64, f64)]| {
        if s.len() < 2 {
            return 0.0;
        }
        let t: Vec<f64> = s.iter().map(|p| p.0).collect();
        let y: Vec<f64> = s.iter().map(|p| p.1.ln()).collect();
        linear_fit(&t, &y).0
    };
    let early_slope = slope(&series[..=half.min(series.len() - 1)]);
    let late_slope = slope(&series[half..]);
    let super_exponential = late_slope > 0.0 && late_slope > early_slope + 0.1 * (1.0 + early_slope.abs());
    Ok(GrowthEnvelope { c, early_slope, late_slope, super_exponential })
}

/// `3 < p < 6` and `1 - 2/p < beta < 2/3`.
pub fn check_exponents(p: f64, beta: f64) -> Result<()> {
    if p > 3.0 && p < 6.0 && beta > 1.0 - 2.0 / p && beta < 2.0 / 3.0 {
        Ok(())
    } else {
        Err(Error::BadExponents { p, beta })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct W1pParams {
    pub theta_tilde: f64,
    pub beta: f64,
    pub p: f64,
    pub weight: WeightParams,
    pub n_samples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct W1pReport {
    pub value: f64,
    pub samples: usize,
    pub grazing_excluded: usize,
}

/// `|| w_{theta~} alpha^beta grad_{x,v} f ||_p` estimated on a fixed random
/// sample of phase nodes. Gradients are one-cell finite differences,
/// one-sided where a neighbour is missing.
pub fn alpha_weighted_w1p<F: ForceField + ?Sized>(
    ps: &PhaseSpace,
    state: &DistributionField,
    field: &F,
    params: &W1pParams,
) -> Result<W1pReport> {
    check_exponents(params.p, params.beta)?;
    let nv = ps.nv();
    let n_nodes = ps.n_nodes();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let picks: Vec<(usize, usize)> =
        (0..params.n_samples).map(|_| (rng.gen_range(0..n_nodes), rng.gen_range(0..nv))).collect();
    let ch = Characteristics::new(ps.domain(), field).with_weight(params.weight);
    let f = |i: usize, j: usize| perturbation_value(state.values[i * nv + j], ps.sqrt_mu[j]);
    let node_of = |c: usize| ps.space.node_of_cell[c];
    let terms: Vec<Option<f64>> = picks
        .par_iter()
        .map(|&(i, j)| {
            let x = ps.space.node_position(i);
            let v = ps.vel.node(j);
            let (alpha, grazing) = ch.kinetic_weight_flagged(PhasePoint::new(state.time_stamp, x, v));
            if grazing {
                return None;
            }
            let cell = ps.space.phase_cells[i];
            let mut g2 = 0.0;
            for d in 0..3 {
                let nb = |s: isize| ps.space.neighbour(cell, d, s).map(node_of).filter(|&n| n != u32::MAX);
                let h = ps.space.h;
                let df = match (nb(1), nb(-1)) {
                    (Some(a), Some(b)) => (f(a as usize, j) - f(b as usize, j)) / (2.0 * h),
                    (Some(a), None) => (f(a as usize, j) - f(i, j)) / h,
                    (None, Some(b)) => (f(i, j) - f(b as usize, j)) / h,
                    (None, None) => 0.0,
                };
                g2 += df * df;
            }
            let m = ps.vel.multi_index(j);
            let n = ps.vel.n_per_axis;
            for d in 0..3 {
                let at = |k: usize| {
                    let mut mm = m;
                    mm[d] = k;
                    f(i, ps.vel.index(mm[0], mm[1], mm[2]))
                };
                let h = ps.vel.h;
                let df = if m[d] == 0 {
                    (at(1) - at(0)) / h
                } else if m[d] == n - 1 {
                    (at(n - 1) - at(n - 2)) / h
                } else {
                    (at(m[d] + 1) - at(m[d] - 1)) / (2.0 * h)
                };
                g2 += df * df;
            }
            let w = (params.theta_tilde * norm2(v)).exp() * alpha.powf(params.beta);
            let scale = ps.space.node_weights[i] * n_nodes as f64 * ps.vel.cell_volume * nv as f64;
            Some((w * g2.sqrt()).powf(params.p) * scale)
        })
        .collect();
    let kept: Vec<f64> = terms.iter().flatten().cloned().collect();
    let grazing_excluded = terms.len() - kept.len();
    let mean = if kept.is_empty() { 0.0 } else { pairwise_sum(&kept) / kept.len() as f64 };
    Ok(W1pReport { value: mean.powf(1.0 / params.p), samples: kept.len(), grazing_excluded })
}

#[derive(Debug, Clone, Copy)]
pub struct InvarianceReport {
    pub max_residual: f64,
    pub samples: usize,
    pub grazing_excluded: usize,
}

/// Samples `(t, x, v)`, moves back along the characteristic to a time between
/// the backward exit and `t`, and compares the kinetic weights at both ends.
pub fn alpha_invariance_residual<F: ForceField + ?Sized>(
    domain: &ConvexDomain,
    field: &F,
    weight: WeightParams,
    t_range: (f64, f64),
    v_max: f64,
    n_samples: usize,
    seed: u64,
) -> InvarianceReport {
    let (lo, hi) = domain.bbox();
    let results: Vec<Option<f64>> = (0..n_samples)
        .into_par_iter()
        .map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(s as u64);
            let x = loop {
                let x: Vec3 = std::array::from_fn(|d| rng.gen_range(lo[d]..hi[d]));
                if domain.level(x) < -1e-3 {
                    break x;
                }
            };
            let v = loop {
                let v: Vec3 = std::array::from_fn(|_| rng.gen_range(-v_max..v_max));
                if norm2(v) <= v_max * v_max {
                    break v;
                }
            };
            let t = rng.gen_range(t_range.0..t_range.1);
            let ch = Characteristics::new(domain, field).with_weight(weight);
            let p = PhasePoint::new(t, x, v);
            let (a1, g1) = ch.kinetic_weight_flagged(p);
            let back = ch.backward_exit(p, t + weight.epsilon);
            let s_back = rng.gen_range(0.1..0.9) * back.t_b;
            let q = match ch.flow(p, t - s_back) {
                crate::characteristics::Flow::Reached(q) => q,
                crate::characteristics::Flow::Exited(_) => return None,
            };
            let (a2, g2) = ch.kinetic_weight_flagged(q);
            if g1 || g2 {
                return None;
            }
            Some((a1 - a2).abs() / a1.max(1e-300))
        })
        .collect();
    let kept: Vec<f64> = results.iter().flatten().cloned().collect();
    InvarianceReport {
        max_residual: kept.iter().cloned().fold(0.0, f64::max),
        samples: kept.len(),
        grazing_excluded: results.len() - kept.len(),
    }
}

/// `|| f_A - f_B ||_{L^{1+delta}}` at matching snapshots of two runs.
pub fn stability_distance(
    ps: &PhaseSpace,
    a: &[DistributionField],
    b: &[DistributionField],
    delta: f64,
) -> Result<Vec<(f64, f64)>> {
    if a.len() != b.len() {
        return Err(Error::GridMismatch(format!("{} vs {} snapshots", a.len(), b.len())));
    }
    let nv = ps.nv();
    a.iter()
        .zip(b)
        .map(|(fa, fb)| {
            if fa.values.len() != fb.values.len() || fa.values.len() != ps.n_nodes() * nv {
                return Err(Error::GridMismatch(format!("{} vs {} samples", fa.values.len(), fb.values.len())));
            }
            if (fa.time_stamp - fb.time_stamp).abs() > 1e-9 {
                return Err(Error::GridMismatch(format!("times {} vs {}", fa.time_stamp, fb.time_stamp)));
            }
            let d: Vec<f64> = fa
                .values
                .par_iter()
                .zip(&fb.values)
                .enumerate()
                .map(|(k, (x, y))| {
                    let s = ps.sqrt_mu[k % nv];
                    if s < SQRT_MU_FLOOR {
                        0.0
                    } else {
                        (x - y) / s
                    }
                })
                .collect();
            Ok((fa.time_stamp, lp_norm(ps, &d, 1.0 + delta)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::characteristics::{DecayingPotential, ZeroField};
    use crate::collision::sqrt_maxwellian;
    use crate::config::{GridSpec, InitSpec};
    use std::f64::consts::PI;

    fn phase_space() -> PhaseSpace {
        let grid = GridSpec { n_x: 8, n_v: 12, ..GridSpec::default() };
        PhaseSpace::new(&ConvexDomain::unit_ball(), &grid, false)
    }

    #[test]
    fn mass_of_maxwellian_is_the_volume() {
        let ps = phase_space();
        let f = ps.maxwellian_field(0.0);
        let m = total_mass(&ps, &f.values);
        let vol = 4.0 * PI / 3.0;
        assert!((m - vol).abs() < 1e-3 * vol, "{m}");
        let twice: Vec<f64> = f.values.iter().map(|x| 2.0 * x).collect();
        assert!((total_mass(&ps, &twice) - 2.0 * m).abs() < 1e-12);
        assert_eq!(total_mass(&ps, &vec![0.0; f.values.len()]), 0.0);
    }

    #[test]
    fn weighted_sup_norm_of_sqrt_mu() {
        let vel = VelocityGrid::new(6.0, 13);
        let f: Vec<f64> = vel.nodes().iter().map(|&v| sqrt_maxwellian(v)).collect();
        let s = weighted_sup_norm(&vel, &f, 0.125);
        assert!((s - (2.0 * PI).powf(-0.75)).abs() < 1e-14);
        let f2: Vec<f64> = f.iter().map(|x| 2.0 * x).collect();
        assert!((weighted_sup_norm(&vel, &f2, 0.125) - 2.0 * s).abs() < 1e-14);
        assert_eq!(weighted_sup_norm(&vel, &vec![0.0; f.len()], 0.1), 0.0);
        let mut prev = 0.0;
        for k in 0..5 {
            let v = weighted_sup_norm(&vel, &f, 0.05 * k as f64);
            assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn projection_recovers_and_is_idempotent() {
        let vel = VelocityGrid::new(6.0, 16);
        let sm: Vec<f64> = vel.nodes().iter().map(|&v| sqrt_maxwellian(v)).collect();
        let m = macroscopic_projection(&vel, &sm, &sm);
        assert!((m.a - 1.0).abs() < 1e-12 && m.b.iter().all(|b| b.abs() < 1e-12) && m.c.abs() < 1e-12);
        let f1: Vec<f64> = vel.nodes().iter().zip(&sm).map(|(v, s)| v[0] * s).collect();
        let m1 = macroscopic_projection(&vel, &sm, &f1);
        assert!((m1.b[0] - 1.0).abs() < 1e-12 && m1.a.abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f: Vec<f64> = sm.iter().map(|s| s * rng.gen_range(-1.0..1.0)).collect();
        let p = macroscopic_projection(&vel, &sm, &f);
        let pf = p.reconstruct(&vel, &sm);
        let resid: Vec<f64> = f.iter().zip(&pf).map(|(a, b)| a - b).collect();
        for k in 0..5 {
            let dotk: f64 = vel.nodes().iter().enumerate().map(|(j, &v)| macro_basis(v, sm[j])[k] * resid[j]).sum();
            assert!(dotk.abs() < 1e-10, "basis {k}: {dotk}");
        }
        let pp = macroscopic_projection(&vel, &sm, &pf).reconstruct(&vel, &sm);
        assert!(pp.iter().zip(&pf).all(|(a, b)| (a - b).abs() < 1e-10));
    }

    #[test]
    fn decay_fit_on_synthetic_series() {
        let s: Vec<(f64, f64)> = (0..50).map(|k| (0.1 * k as f64, (-0.3 * 0.1 * k as f64).exp())).collect();
        let fit = decay_fit(&s, 0.6).unwrap();
        assert!((fit.rate - 0.3).abs() < 1e-6 && fit.r2 > 0.999_999);
        let c: Vec<(f64, f64)> = (0..10).map(|k| (k as f64, 2.0)).collect();
        assert_eq!(decay_fit(&c, 0.6).unwrap().rate, 0.0);
        assert!(matches!(decay_fit(&[(0.0, 1.0), (1.0, 0.0)], 0.6), Err(Error::NonPositiveValues)));
    }

    #[test]
    fn growth_envelope_bounds_series() {
        let s: Vec<(f64, f64)> = (0..20).map(|k| (0.1 * k as f64, (0.5 * 0.1 * k as f64).exp())).collect();
        let e = growth_envelope(&s).unwrap();
        assert!((e.c - 0.5).abs() < 1e-9 && !e.super_exponential);
        let q: Vec<(f64, f64)> = (0..20).map(|k| (0.1 * k as f64, (3.0 * (0.1 * k as f64).powi(2)).exp())).collect();
        assert!(growth_envelope(&q).unwrap().super_exponential);
        let d: Vec<(f64, f64)> = (0..20).map(|k| (k as f64, (-(k as f64)).exp())).collect();
        assert_eq!(growth_envelope(&d).unwrap().c, 0.0);
    }

    #[test]
    fn exponent_box() {
        assert!(check_exponents(4.0, 0.6).is_ok());
        assert!(matches!(check_exponents(4.0, 0.4), Err(Error::BadExponents { .. })));
        assert!(check_exponents(6.5, 0.6).is_err());
    }

    #[test]
    fn w1p_vanishes_on_constants_and_is_finite_on_perturbations() {
        let ps = phase_space();
        let params =
            W1pParams { theta_tilde: 0.05, beta: 0.6, p: 4.0, weight: WeightParams::default(), n_samples: 400, seed: 1 };
        let eq = ps.maxwellian_field(0.0);
        let r = alpha_weighted_w1p(&ps, &eq, &ZeroField, &params).unwrap();
        assert!(r.value.abs() < 1e-12);
        let pert = ps.initial_data(&InitSpec::Perturbed { amplitude: 0.01, mode: 1 });
        let r = alpha_weighted_w1p(&ps, &pert, &ZeroField, &params).unwrap();
        assert!(r.value.is_finite() && r.value > 0.0);
        let bad = W1pParams { beta: 0.4, ..params };
        assert!(alpha_weighted_w1p(&ps, &pert, &ZeroField, &bad).is_err());
    }

    #[test]
    fn alpha_invariance_in_free_streaming_and_decaying_field() {
        let ball = ConvexDomain::unit_ball();
        let r = alpha_invariance_residual(&ball, &ZeroField, WeightParams::default(), (0.1, 2.0), 3.0, 200, 4);
        assert!(r.samples > 150 && r.max_residual <= 1e-8, "{r:?}");
        let field = DecayingPotential::radial(0.1, 1.0);
        let r = alpha_invariance_residual(&ball, &field, WeightParams::default(), (0.1, 1.0), 3.0, 100, 4);
        assert!(r.max_residual <= 1e-6, "{r:?}");
    }

    #[test]
    fn stability_distance_of_identical_runs_is_zero() {
        let ps = phase_space();
        let a = vec![ps.maxwellian_field(0.0), ps.initial_data(&InitSpec::Perturbed { amplitude: 0.01, mode: 1 })];
        let b = a.clone();
        let d = stability_distance(&ps, &a, &b, 0.5).unwrap();
        assert!(d.iter().all(|&(_, x)| x == 0.0));
        assert!(matches!(stability_distance(&ps, &a, &b[..1], 0.5), Err(Error::GridMismatch(_))));
    }
}
