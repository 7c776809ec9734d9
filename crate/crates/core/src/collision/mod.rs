//! Hard-sphere collision algebra on the velocity grid.
//!
//! Everything here works pointwise in `v` by direct quadrature over `(u, omega)`;
//! the cached whole-grid operator used by the time marcher lives in
//! [`grid_operator`].

pub mod grid_operator;

use crate::error::{Error, Result};
use crate::math::{axpy, dot, gauss_legendre_on, norm, norm2, orthonormal_frame, scale, sub, Vec3};
use crate::velocity::VelocityGrid;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

pub use grid_operator::GridCollisionOperator;

/// `(2 pi)^{-3/2}`
pub const MAXWELLIAN_NORM: f64 = 0.063_493_635_934_240_97;

#[inline]
pub fn maxwellian(v: Vec3) -> f64 {
    MAXWELLIAN_NORM * (-0.5 * norm2(v)).exp()
}

#[inline]
pub fn sqrt_maxwellian(v: Vec3) -> f64 {
    MAXWELLIAN_NORM.sqrt() * (-0.25 * norm2(v)).exp()
}

/// Closed form of `2 pi E|v - U|` for `U ~ N(0, I)`.
pub fn collision_frequency_exact(v: Vec3) -> f64 {
    let r = norm(v);
    let mean_abs = if r < 1e-6 {
        2.0 * (2.0 / PI).sqrt() * (1.0 + r * r / 6.0)
    } else {
        (2.0 / PI).sqrt() * (-0.5 * r * r).exp() + (r + 1.0 / r) * crate::math::erf(r / 2f64.sqrt())
    };
    2.0 * PI * mean_abs
}

/// Something that can be evaluated at an arbitrary velocity.
pub trait VelocityFn: Sync {
    fn eval(&self, v: Vec3) -> f64;
}

impl<F: Fn(Vec3) -> f64 + Sync> VelocityFn for F {
    #[inline]
    fn eval(&self, v: Vec3) -> f64 {
        self(v)
    }
}

/// Nodal samples on a [`VelocityGrid`], trilinear in between, zero outside.
#[derive(Clone, Copy)]
pub struct Sampled<'a> {
    pub grid: &'a VelocityGrid,
    pub values: &'a [f64],
}

impl VelocityFn for Sampled<'_> {
    #[inline]
    fn eval(&self, v: Vec3) -> f64 {
        self.grid.interpolate(self.values, v)
    }
}

/// Product rule on the unit sphere: Gauss-Legendre in `cos(theta)` on each
/// hemisphere separately, uniform in azimuth.
///
/// Splitting at the equator makes `|w . omega|` polynomial on each half when the
/// polar axis is aligned with `w`, which is how the collision integrals use it.
#[derive(Debug, Clone)]
pub struct AngularQuadrature {
    pub n_theta: usize,
    pub n_phi: usize,
    /// Upper hemisphere in local coordinates: `(cos theta, sin theta, cos phi, sin phi, weight)`.
    upper: Vec<[f64; 5]>,
}

impl AngularQuadrature {
    pub fn new(n_theta: usize, n_phi: usize) -> Self {
        let half = (n_theta / 2).max(1);
        let mut upper = Vec::with_capacity(half * n_phi);
        let dphi = 2.0 * PI / n_phi as f64;
        for (ct, wt) in gauss_legendre_on(half, 0.0, 1.0) {
            let st = (1.0 - ct * ct).sqrt();
            for k in 0..n_phi {
                let (sp, cp) = ((k as f64 + 0.5) * dphi).sin_cos();
                upper.push([ct, st, cp, sp, wt * dphi]);
            }
        }
        AngularQuadrature { n_theta: 2 * half, n_phi, upper }
    }

    /// Full-sphere directions and weights in the fixed frame.
    pub fn directions(&self) -> Vec<(Vec3, f64)> {
        let mut out = Vec::with_capacity(2 * self.upper.len());
        for &[ct, st, cp, sp, w] in &self.upper {
            out.push(([st * cp, st * sp, ct], w));
            out.push(([-st * cp, -st * sp, -ct], w));
        }
        out
    }

    /// Upper-hemisphere directions with the pole along the unit vector `axis`.
    #[inline]
    pub fn for_each_aligned<F: FnMut(Vec3, f64, f64)>(&self, axis: Vec3, mut f: F) {
        let (e1, e2) = orthonormal_frame(axis);
        for &[ct, st, cp, sp, w] in &self.upper {
            let omega = [
                ct * axis[0] + st * (cp * e1[0] + sp * e2[0]),
                ct * axis[1] + st * (cp * e1[1] + sp * e2[1]),
                ct * axis[2] + st * (cp * e1[2] + sp * e2[2]),
            ];
            f(omega, ct, w);
        }
    }

    pub fn len_upper(&self) -> usize {
        self.upper.len()
    }
}

impl Default for AngularQuadrature {
    fn default() -> Self {
        AngularQuadrature::new(16, 32)
    }
}

/// Constants of the linearised kernels `k1`, `k2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelConstants {
    pub c_k1: f64,
    pub c_k2: f64,
}

impl KernelConstants {
    /// Values fixed by `calibrate-kernels` (least squares of the kernel form of
    /// `K` against the direct gain/loss form). They agree with the closed forms
    /// `(2 pi)^{-1/2}` and `4 (2 pi)^{-1/2}` to the fit accuracy.
    pub const CALIBRATED: KernelConstants = KernelConstants {
        c_k1: 0.398_942_280_401_432_7,
        c_k2: 1.595_769_121_605_730_7,
    };
}

impl Default for KernelConstants {
    fn default() -> Self {
        Self::CALIBRATED
    }
}

#[inline]
pub fn kernel_k1(v: Vec3, u: Vec3, c: &KernelConstants) -> f64 {
    c.c_k1 * norm(sub(v, u)) * (-(norm2(v) + norm2(u)) / 4.0).exp()
}

/// Smooth part of `k2`: `k2 = C_k2 * k2_smooth / |v - u|`.
#[inline]
fn k2_exponent(v: Vec3, u: Vec3, d2: f64) -> f64 {
    let e = norm2(v) - norm2(u);
    -d2 / 8.0 - e * e / (8.0 * d2)
}

pub fn kernel_k2(v: Vec3, u: Vec3, c: &KernelConstants) -> Result<f64> {
    let d2 = norm2(sub(v, u));
    if d2 == 0.0 {
        return Err(Error::SingularPoint);
    }
    Ok(c.c_k2 * k2_exponent(v, u, d2).exp() / d2.sqrt())
}

pub fn kernel_k_rho(v: Vec3, u: Vec3, rho: f64) -> Result<f64> {
    let d2 = norm2(sub(v, u));
    if d2 == 0.0 {
        return Err(Error::SingularPoint);
    }
    let e = norm2(v) - norm2(u);
    Ok((-rho * d2 - rho * e * e / d2).exp() / d2.sqrt())
}

/// Integral of `k2(v, .)` over the axis-aligned cube `[lo, lo + h]^3`, which may
/// contain `v`. The cube is split into six pyramids with apex `v`; on each,
/// `u = v + t (p - v)` with `p` on the face gives `du = t^2 d dt dA`, which
/// cancels the `1/|v - u|` singularity.
pub(crate) fn k2_cell_integral(v: Vec3, lo: Vec3, h: f64, c: &KernelConstants) -> f64 {
    thread_local! {
        static FACE: Vec<(f64, f64)> = gauss_legendre_on(8, 0.0, 1.0);
        static RADIAL: Vec<(f64, f64)> = gauss_legendre_on(8, 0.0, 1.0);
    }
    FACE.with(|face| {
        RADIAL.with(|radial| {
            let mut acc = 0.0;
            for axis in 0..3 {
                let (a1, a2) = ((axis + 1) % 3, (axis + 2) % 3);
                for side in [0.0, 1.0] {
                    let plane = lo[axis] + side * h;
                    let d = (plane - v[axis]).abs();
                    if d < 1e-300 {
                        continue;
                    }
                    let mut pyr = 0.0;
                    for &(s1, w1) in face {
                        for &(s2, w2) in face {
                            let mut p = [0.0; 3];
                            p[axis] = plane;
                            p[a1] = lo[a1] + s1 * h;
                            p[a2] = lo[a2] + s2 * h;
                            let pv = sub(p, v);
                            let len = norm(pv);
                            let mut line = 0.0;
                            for &(t, wt) in radial {
                                let u = axpy(v, t, pv);
                                let r = t * len;
                                // k2 t^2 = C t^2 exp(..) / (t len)
                                line += wt * t * k2_exponent(v, u, r * r).exp() / len;
                            }
                            pyr += w1 * w2 * line;
                        }
                    }
                    acc += pyr * d * h * h;
                }
            }
            c.c_k2 * acc
        })
    })
}

/// Quadrature machinery for pointwise collision integrals.
#[derive(Debug, Clone)]
pub struct CollisionQuadrature {
    pub grid: VelocityGrid,
    pub angular: AngularQuadrature,
    pub constants: KernelConstants,
}

impl CollisionQuadrature {
    pub fn new(grid: VelocityGrid, angular: AngularQuadrature, constants: KernelConstants) -> Self {
        CollisionQuadrature { grid, angular, constants }
    }

    /// Default velocity grid for tests (`v_max = 6`, 24 per axis) and 16x32 angles.
    pub fn default_test() -> Self {
        Self::new(VelocityGrid::new(6.0, 24), AngularQuadrature::default(), KernelConstants::default())
    }

    /// `int int |(v - u) . omega| F(u) d omega du`, the angular integral taken in
    /// a frame aligned with `v - u`.
    pub fn nu_of<F: VelocityFn + ?Sized>(&self, f: &F, v: Vec3) -> f64 {
        let g = &self.grid;
        let terms: Vec<f64> = g
            .nodes()
            .iter()
            .map(|&u| {
                let w = sub(v, u);
                let wn = norm(w);
                if wn == 0.0 {
                    return 0.0;
                }
                let fu = f.eval(u);
                if fu == 0.0 {
                    return 0.0;
                }
                let mut ang = 0.0;
                self.angular.for_each_aligned(scale(w, 1.0 / wn), |_, ct, wt| ang += wt * ct);
                2.0 * wn * ang * fu
            })
            .collect();
        crate::math::pairwise_sum(&terms) * g.cell_volume
    }

    /// Collision frequency `nu(v)` by quadrature against the Maxwellian.
    pub fn collision_frequency(&self, v: Vec3) -> f64 {
        self.nu_of(&maxwellian, v)
    }

    /// Gain term `int int |(v-u).omega| F1(u') F2(v') d omega du` with
    /// `u' = u - ((u-v).omega) omega`, `v' = v + ((u-v).omega) omega`.
    pub fn q_gain<F1, F2>(&self, f1: &F1, f2: &F2, v: Vec3) -> Result<f64>
    where
        F1: VelocityFn + ?Sized,
        F2: VelocityFn + ?Sized,
    {
        let g = &self.grid;
        let e_v = norm2(v);
        let mut worst = 0.0f64;
        let terms: Vec<f64> = g
            .nodes()
            .iter()
            .map(|&u| {
                let w = sub(v, u);
                let wn = norm(w);
                if wn == 0.0 {
                    return 0.0;
                }
                let e0 = e_v + norm2(u);
                let mut acc = 0.0;
                self.angular.for_each_aligned(scale(w, 1.0 / wn), |omega, ct, wt| {
                    let a = dot(w, omega);
                    let u_post = axpy(u, a, omega);
                    let v_post = axpy(v, -a, omega);
                    let de = (norm2(u_post) + norm2(v_post) - e0).abs() / (1.0 + e0);
                    if de > worst {
                        worst = de;
                    }
                    acc += wt * wn * ct * f1.eval(u_post) * f2.eval(v_post);
                });
                // omega and -omega give the same post-collision pair
                2.0 * acc
            })
            .collect();
        if worst > 1e-10 {
            return Err(Error::GridTooCoarse(worst));
        }
        Ok(crate::math::pairwise_sum(&terms) * g.cell_volume)
    }

    /// Loss term `F2(v) int int |(v-u).omega| F1(u) d omega du`.
    pub fn q_loss<F1, F2>(&self, f1: &F1, f2: &F2, v: Vec3) -> f64
    where
        F1: VelocityFn + ?Sized,
        F2: VelocityFn + ?Sized,
    {
        let f2v = f2.eval(v);
        if f2v == 0.0 {
            return 0.0;
        }
        f2v * self.nu_of(f1, v)
    }

    /// `Q(F1, F2)(v) = gain - loss`.
    pub fn q<F1, F2>(&self, f1: &F1, f2: &F2, v: Vec3) -> Result<f64>
    where
        F1: VelocityFn + ?Sized,
        F2: VelocityFn + ?Sized,
    {
        Ok(self.q_gain(f1, f2, v)? - self.q_loss(f1, f2, v))
    }

    /// Nonlinear operator in Carleman-type form, returning `(gain, loss)`:
    /// gain `int int |u.omega| g1(v+u_perp) g2(v+u_par) sqrt(mu(v+u))`,
    /// loss `int int |u.omega| g1(v+u) g2(v) sqrt(mu(v+u))`.
    pub fn gamma<G1, G2>(&self, g1: &G1, g2: &G2, v: Vec3) -> (f64, f64)
    where
        G1: VelocityFn + ?Sized,
        G2: VelocityFn + ?Sized,
    {
        let g = &self.grid;
        let g2v = g2.eval(v);
        let pairs: Vec<(f64, f64)> = g
            .nodes()
            .iter()
            .map(|&w| {
                // w = v + u runs over the grid
                let u = sub(w, v);
                let un = norm(u);
                if un == 0.0 {
                    return (0.0, 0.0);
                }
                let sm = sqrt_maxwellian(w);
                let mut gain = 0.0;
                let mut ang = 0.0;
                self.angular.for_each_aligned(scale(u, 1.0 / un), |omega, ct, wt| {
                    let a = dot(u, omega);
                    let u_par = scale(omega, a);
                    let u_perp = sub(u, u_par);
                    gain += wt * un * ct * g1.eval(crate::math::add(v, u_perp)) * g2.eval(crate::math::add(v, u_par));
                    ang += wt * ct;
                });
                let loss = 2.0 * un * ang * g1.eval(w) * g2v;
                (2.0 * gain * sm, loss * sm)
            })
            .collect();
        let gain: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let loss: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        (
            crate::math::pairwise_sum(&gain) * g.cell_volume,
            crate::math::pairwise_sum(&loss) * g.cell_volume,
        )
    }

    /// Kernel-form weight of grid cell `j` for the evaluation point `v`:
    /// `int_{cell j} (k2 - k1)(v, u) du`.
    pub(crate) fn k_cell_weight(&self, v: Vec3, j: usize) -> f64 {
        let u = self.grid.node(j);
        k2_cell_weight(v, u, self.grid.h, &self.constants) - k1_cell_weight(v, u, self.grid.h, &self.constants)
    }

    /// `K g (v) = int (k2 - k1)(v, u) g(u) du` for nodal `g`.
    pub fn apply_k(&self, g: &[f64], v: Vec3) -> f64 {
        self.apply_k_averaged(&self.cell_averages(g), v)
    }

    /// Nodal values turned into approximate cell averages, `g - h^2/24 lap g`.
    /// Pairing these with exact cell integrals of the kernel removes the
    /// leading `O(h^2)` bias of the product rule.
    fn cell_averages(&self, g: &[f64]) -> Vec<f64> {
        let lap = self.grid.laplacian(g);
        let c = self.grid.h * self.grid.h / 24.0;
        g.iter().zip(&lap).map(|(a, l)| a - c * l).collect()
    }

    fn apply_k_averaged(&self, g_bar: &[f64], v: Vec3) -> f64 {
        let terms: Vec<f64> = (0..self.grid.len())
            .map(|j| if g_bar[j] == 0.0 { 0.0 } else { self.k_cell_weight(v, j) * g_bar[j] })
            .collect();
        crate::math::pairwise_sum(&terms)
    }

    /// `L g (v) = nu(v) g(v) - K g(v)` for nodal `g`.
    pub fn linearized_l(&self, g: &[f64], v: Vec3) -> f64 {
        let gv = self.grid.interpolate(g, v);
        self.collision_frequency(v) * gv - self.apply_k(g, v)
    }

    /// `L g` at every node of the grid, in parallel.
    pub fn linearized_l_all(&self, g: &[f64]) -> Vec<f64> {
        let g_bar = self.cell_averages(g);
        (0..self.grid.len())
            .into_par_iter()
            .map(|i| {
                let v = self.grid.node(i);
                self.collision_frequency(v) * g[i] - self.apply_k_averaged(&g_bar, v)
            })
            .collect()
    }
}

/// `int_{cell} k2(v, u) du` over the cell of side `h` centred at `u`. The cell
/// containing `v` is done in polar coordinates about `v`, its neighbours with a
/// 4^3 Gauss rule, far cells by the midpoint value.
pub(crate) fn k2_cell_weight(v: Vec3, u: Vec3, h: f64, c: &KernelConstants) -> f64 {
    let dist_inf = sub(v, u).iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if dist_inf <= 0.5 * h {
        let lo = [u[0] - 0.5 * h, u[1] - 0.5 * h, u[2] - 0.5 * h];
        return k2_cell_integral(v, lo, h, c);
    }
    let k2 = |uu: Vec3| kernel_k2(v, uu, c).unwrap_or(0.0);
    if dist_inf <= 2.5 * h {
        return cell_average(u, h, 4, k2) * h * h * h;
    }
    k2(u) * h * h * h
}

pub(crate) fn k1_cell_weight(v: Vec3, u: Vec3, h: f64, c: &KernelConstants) -> f64 {
    let dist_inf = sub(v, u).iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if dist_inf <= 2.5 * h {
        return cell_average(u, h, 4, |uu| kernel_k1(v, uu, c)) * h * h * h;
    }
    kernel_k1(v, u, c) * h * h * h
}

/// Average of `f` over the cube of side `h` centred at `c`, `s^3` Gauss points.
pub(crate) fn cell_average<F: Fn(Vec3) -> f64>(c: Vec3, h: f64, s: usize, f: F) -> f64 {
    let rule = gauss_legendre_on(s, -0.5 * h, 0.5 * h);
    let mut acc = 0.0;
    for &(a, wa) in &rule {
        for &(b, wb) in &rule {
            for &(cc, wc) in &rule {
                acc += wa * wb * wc * f([c[0] + a, c[1] + b, c[2] + cc]);
            }
        }
    }
    acc / (h * h * h)
}

/// Result of fitting `C_k1`, `C_k2`.
#[derive(Debug, Clone, Serialize)]
pub struct CalibrationReport {
    pub constants: KernelConstants,
    pub closed_form: KernelConstants,
    pub rms_residual: f64,
    pub rms_target: f64,
    pub samples: usize,
}

/// Least-squares fit of the kernel constants: the kernel form
/// `c2 K2hat g - c1 K1hat g` (unit constants) is matched against the direct form
/// `mu^{-1/2} [Q_gain(mu, sqrt(mu) g) + Q_gain(sqrt(mu) g, mu) - Q_loss(sqrt(mu) g, mu)]`
/// over Gaussian test functions at sample velocities.
pub fn calibrate_kernel_constants(quad: &CollisionQuadrature, sample_v: &[Vec3]) -> Result<CalibrationReport> {
    let unit = KernelConstants { c_k1: 1.0, c_k2: 1.0 };
    let tests: Vec<Box<dyn Fn(Vec3) -> f64 + Sync>> = vec![
        Box::new(|v: Vec3| (-0.25 * norm2(v)).exp()),
        Box::new(|v: Vec3| (-0.3 * norm2(sub(v, [0.5, -0.2, 0.1]))).exp()),
        Box::new(|v: Vec3| v[0] * (-0.25 * norm2(v)).exp()),
        Box::new(|v: Vec3| (-0.5 * norm2(sub(v, [0.0, 0.8, 0.0]))).exp()),
    ];
    let mut rows: Vec<(f64, f64, f64)> = Vec::new();
    for g in &tests {
        let nodal = quad.grid.sample(g);
        let sm = |v: Vec3| sqrt_maxwellian(v) * g(v);
        let rows_g: Vec<Result<(f64, f64, f64)>> = sample_v
            .par_iter()
            .map(|&v| {
                let direct = (quad.q_gain(&maxwellian, &sm, v)? + quad.q_gain(&sm, &maxwellian, v)?
                    - quad.q_loss(&sm, &maxwellian, v))
                    / sqrt_maxwellian(v);
                let mut k1 = 0.0;
                let mut k2 = 0.0;
                for j in 0..quad.grid.len() {
                    if nodal[j] == 0.0 {
                        continue;
                    }
                    let u = quad.grid.node(j);
                    k1 += k1_cell_weight(v, u, quad.grid.h, &unit) * nodal[j];
                    k2 += k2_cell_weight(v, u, quad.grid.h, &unit) * nodal[j];
                }
                Ok((direct, k2, k1))
            })
            .collect();
        for r in rows_g {
            rows.push(r?);
        }
    }
    // normal equations for direct = c2 * a - c1 * b
    let (mut saa, mut sab, mut sbb, mut sya, mut syb) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &(y, a, b) in &rows {
        saa += a * a;
        sab += a * b;
        sbb += b * b;
        sya += y * a;
        syb += y * b;
    }
    // [saa, -sab; -sab, sbb] [c2; c1] = [sya; -syb]
    let det = saa * sbb - sab * sab;
    let c2 = (sya * sbb - sab * syb) / det;
    let c1 = (sab * sya - saa * syb) / det;
    let constants = KernelConstants { c_k1: c1, c_k2: c2 };
    let mut res = 0.0;
    let mut tgt = 0.0;
    for &(y, a, b) in &rows {
        res += (y - c2 * a + c1 * b).powi(2);
        tgt += y * y;
    }
    let n = rows.len() as f64;
    Ok(CalibrationReport {
        constants,
        closed_form: KernelConstants {
            c_k1: (2.0 * PI).powf(-0.5),
            c_k2: 4.0 * (2.0 * PI).powf(-0.5),
        },
        rms_residual: (res / n).sqrt(),
        rms_target: (tgt / n).sqrt(),
        samples: rows.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::rotation;

    fn small_quad() -> CollisionQuadrature {
        CollisionQuadrature::new(VelocityGrid::new(6.0, 16), AngularQuadrature::new(8, 16), KernelConstants::default())
    }

    #[test]
    fn maxwellian_values() {
        assert!((maxwellian([0.0; 3]) - 0.063_493_6).abs() < 1e-7);
        assert!((MAXWELLIAN_NORM - (2.0 * PI).powf(-1.5)).abs() < 1e-17);
        let v = [0.4, -1.1, 2.0];
        assert_eq!(maxwellian(v), maxwellian([-0.4, 1.1, -2.0]));
        let g = VelocityGrid::new(6.0, 48);
        let m = g.integrate(&g.sample(maxwellian));
        assert!((m - 1.0).abs() < 1e-4);
    }

    #[test]
    fn truncated_mass_bound() {
        let g = VelocityGrid::new(5.0, 24);
        let m = g.integrate(&g.sample(maxwellian));
        assert!((1.0 - 1e-4..=1.0 + 1e-12).contains(&m), "{m}");
    }

    #[test]
    fn angular_weights_sum_to_sphere_area() {
        let a = AngularQuadrature::default();
        let s: f64 = a.directions().iter().map(|d| d.1).sum();
        assert!((s - 4.0 * PI).abs() < 1e-8);
        // |u . omega| integrates to 2 pi |u| (frame not aligned with u)
        let u = [0.3, -0.7, 1.1];
        let i: f64 = a.directions().iter().map(|(d, w)| w * dot(*d, u).abs()).sum();
        assert!((i - 2.0 * PI * norm(u)).abs() < 2e-3 * 2.0 * PI * norm(u), "{i}");
    }

    #[test]
    fn collision_frequency_at_rest() {
        let q = CollisionQuadrature::default_test();
        let nu0 = q.collision_frequency([0.0; 3]);
        let oracle = 4.0 * (2.0 * PI).sqrt();
        assert!((nu0 - oracle).abs() < 1e-3 * oracle, "{nu0} vs {oracle}");
        assert!((collision_frequency_exact([0.0; 3]) - oracle).abs() < 1e-12);
    }

    #[test]
    fn collision_frequency_grows_linearly() {
        let q = CollisionQuadrature::default_test();
        let v = [8.0, 0.0, 0.0];
        let r = q.collision_frequency(v) / 8.0;
        assert!((r - 2.0 * PI).abs() < 0.05 * 2.0 * PI, "{r}");
    }

    #[test]
    fn collision_frequency_is_isotropic() {
        let q = small_quad();
        let v = [0.7, -0.3, 1.2];
        let r = rotation([1.0, 0.5, -0.2], 0.9);
        let a = q.collision_frequency(v);
        let b = q.collision_frequency(crate::math::mat_vec(&r, v));
        let exact = collision_frequency_exact(v);
        // equal up to grid quadrature error, both close to the closed form
        assert!((a - exact).abs() < 2e-3 * exact && (b - exact).abs() < 2e-3 * exact, "{a} {b} {exact}");
    }

    #[test]
    fn maxwellian_is_collision_equilibrium() {
        let q = small_quad();
        for v in [[0.0, 0.0, 0.0], [1.0, -0.5, 0.3], [2.0, 1.0, 0.0]] {
            let gain = q.q_gain(&maxwellian, &maxwellian, v).unwrap();
            let loss = q.q_loss(&maxwellian, &maxwellian, v);
            assert!((gain - loss).abs() < 2e-3 * loss, "v={v:?} gain={gain} loss={loss}");
        }
    }

    #[test]
    fn zero_input_gives_zero() {
        let q = small_quad();
        let zero = |_: Vec3| 0.0;
        assert_eq!(q.q_gain(&zero, &maxwellian, [0.5, 0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(q.q_loss(&zero, &maxwellian, [0.5, 0.0, 0.0]), 0.0);
        assert_eq!(q.gamma(&zero, &sqrt_maxwellian, [0.5, 0.0, 0.0]), (0.0, 0.0));
    }

    #[test]
    fn kernel_symmetries_and_singularity() {
        let c = KernelConstants::default();
        let v = [0.3, 1.0, -0.4];
        let u = [-1.2, 0.2, 0.9];
        assert_eq!(kernel_k1(v, v, &c), 0.0);
        assert!((kernel_k1(v, u, &c) - kernel_k1(u, v, &c)).abs() < 1e-16);
        assert!((kernel_k2(v, u, &c).unwrap() - kernel_k2(u, v, &c).unwrap()).abs() < 1e-15);
        assert!(matches!(kernel_k2(v, v, &c), Err(Error::SingularPoint)));
        assert!(matches!(kernel_k_rho(v, v, 0.1), Err(Error::SingularPoint)));
        // 1/|h| blow-up
        let a = kernel_k_rho(v, axpy(v, 1e-4, [1.0, 0.0, 0.0]), 0.1).unwrap();
        let b = kernel_k_rho(v, axpy(v, 1e-5, [1.0, 0.0, 0.0]), 0.1).unwrap();
        assert!((b / a - 10.0).abs() < 1e-3);
    }

    #[test]
    fn singular_cell_integral_matches_composite_rule() {
        // split the cube into 6^3 sub-cubes: the one holding v uses the polar
        // rule, the others a high-order Gauss rule
        let c = KernelConstants::default();
        let h = 0.5;
        for v in [[0.1, -0.2, 0.15], [0.0, 0.0, 0.0], [0.24, 0.24, -0.1]] {
            let lo = [-0.25, -0.25, -0.25];
            let polar = k2_cell_integral(v, lo, h, &c);
            let m = 6;
            let hs = h / m as f64;
            let mut composite = 0.0;
            for a in 0..m {
                for b in 0..m {
                    for d in 0..m {
                        let sl = [lo[0] + a as f64 * hs, lo[1] + b as f64 * hs, lo[2] + d as f64 * hs];
                        let inside = (0..3).all(|k| v[k] >= sl[k] && v[k] <= sl[k] + hs);
                        composite += if inside {
                            k2_cell_integral(v, sl, hs, &c)
                        } else {
                            let centre = [sl[0] + hs / 2.0, sl[1] + hs / 2.0, sl[2] + hs / 2.0];
                            cell_average(centre, hs, 6, |u| kernel_k2(v, u, &c).unwrap()) * hs * hs * hs
                        };
                    }
                }
            }
            assert!((polar - composite).abs() < 2e-3 * composite, "v={v:?} {polar} {composite}");
        }
    }

    #[test]
    fn k_reproduces_collision_invariants() {
        let q = CollisionQuadrature::default_test();
        let invariants: [fn(Vec3) -> f64; 3] = [
            sqrt_maxwellian,
            |v| v[0] * sqrt_maxwellian(v),
            |v| 0.5 * (norm2(v) - 3.0) * sqrt_maxwellian(v),
        ];
        for g in invariants {
            let nodal = q.grid.sample(g);
            for v in [[0.25, 0.25, 0.25], [1.25, 0.75, -0.25], [-1.75, 0.25, 0.75]] {
                let k = q.apply_k(&nodal, v);
                let expect = collision_frequency_exact(v) * g(v);
                let scale = collision_frequency_exact(v) * sqrt_maxwellian(v);
                assert!((k - expect).abs() < 1e-2 * scale, "v={v:?} K={k} expect={expect}");
            }
        }
        assert_eq!(q.apply_k(&vec![0.0; q.grid.len()], [0.3, 0.0, 0.0]), 0.0);
    }
}
