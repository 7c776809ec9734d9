//! Level-set description of the bounded convex domain.
//!
//! The domain is `{x : xi(x) < 0}` for a smooth level function `xi`. Two analytic
//! shapes are built in (ball and axis-aligned ellipsoid); a non-convex dumbbell
//! exists for exercising the convexity check. Any shape may be rigidly rotated.

use crate::error::{Error, Result};
use crate::math::{
    add, axpy, cross, dot, gauss_legendre_on, mat_mul, mat_vec, norm, orthonormal_frame, quad_form, scale, sub,
    transpose, Mat3, Vec3,
};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Gradient magnitude below which the boundary normal is undefined.
pub const MIN_GRADIENT: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Shape {
    /// `x1^2/a^2 + x2^2/b^2 + x3^2/c^2 - 1`; the unit ball is `[1, 1, 1]`.
    Ellipsoid { semi_axes: Vec3 },
    /// `x2^2 + x3^2 - (1 - x1^2)(0.2 + x1^2)`: pinched in the middle, not convex.
    Dumbbell,
}

impl Shape {
    fn level(&self, x: Vec3) -> f64 {
        match *self {
            Shape::Ellipsoid { semi_axes: a } => {
                (x[0] / a[0]).powi(2) + (x[1] / a[1]).powi(2) + (x[2] / a[2]).powi(2) - 1.0
            }
            Shape::Dumbbell => {
                let s = x[0] * x[0];
                x[1] * x[1] + x[2] * x[2] - (1.0 - s) * (0.2 + s)
            }
        }
    }

    fn grad(&self, x: Vec3) -> Vec3 {
        match *self {
            Shape::Ellipsoid { semi_axes: a } => [
                2.0 * x[0] / (a[0] * a[0]),
                2.0 * x[1] / (a[1] * a[1]),
                2.0 * x[2] / (a[2] * a[2]),
            ],
            Shape::Dumbbell => [(-1.6 + 4.0 * x[0] * x[0]) * x[0], 2.0 * x[1], 2.0 * x[2]],
        }
    }

    fn hess(&self, x: Vec3) -> Mat3 {
        match *self {
            Shape::Ellipsoid { semi_axes: a } => [
                [2.0 / (a[0] * a[0]), 0.0, 0.0],
                [0.0, 2.0 / (a[1] * a[1]), 0.0],
                [0.0, 0.0, 2.0 / (a[2] * a[2])],
            ],
            Shape::Dumbbell => [[-1.6 + 12.0 * x[0] * x[0], 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 2.0]],
        }
    }

    /// Distance from the origin to the boundary along the unit direction `d`.
    fn radius(&self, d: Vec3) -> f64 {
        match *self {
            Shape::Ellipsoid { semi_axes: a } => {
                1.0 / ((d[0] / a[0]).powi(2) + (d[1] / a[1]).powi(2) + (d[2] / a[2]).powi(2)).sqrt()
            }
            Shape::Dumbbell => {
                // c^4 R^2 + R (s^2 - 0.8 c^2) - 0.2 = 0 with R = r^2
                let c2 = d[0] * d[0];
                let s2 = d[1] * d[1] + d[2] * d[2];
                let qa = c2 * c2;
                let qb = s2 - 0.8 * c2;
                let r2 = if qa < 1e-14 {
                    0.2 / qb
                } else {
                    (-qb + (qb * qb + 0.8 * qa).sqrt()) / (2.0 * qa)
                };
                r2.sqrt()
            }
        }
    }

    fn half_extent(&self) -> Vec3 {
        match *self {
            Shape::Ellipsoid { semi_axes } => semi_axes,
            Shape::Dumbbell => [1.0, 0.6, 0.6],
        }
    }
}

/// A point of the boundary with its outward normal and surface-measure weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfacePoint {
    pub position: Vec3,
    pub normal: Vec3,
    pub quad_weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvexityReport {
    pub min_curvature_margin: f64,
    pub samples: usize,
}

/// Bounded domain `{xi < 0}` with an optional rigid rotation `x_world = R x_body`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvexDomain {
    shape: Shape,
    rotation: Mat3,
    bbox: (Vec3, Vec3),
    pub surface_quad_order: usize,
}

impl ConvexDomain {
    pub fn new(shape: Shape) -> Self {
        let e = shape.half_extent();
        ConvexDomain {
            shape,
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            bbox: ([-e[0], -e[1], -e[2]], e),
            surface_quad_order: 16,
        }
    }

    pub fn unit_ball() -> Self {
        Self::new(Shape::Ellipsoid { semi_axes: [1.0, 1.0, 1.0] })
    }

    pub fn ellipsoid(semi_axes: Vec3) -> Self {
        Self::new(Shape::Ellipsoid { semi_axes })
    }

    pub fn dumbbell() -> Self {
        Self::new(Shape::Dumbbell)
    }

    /// The same shape rigidly rotated by `rot` (applied after any existing rotation).
    pub fn rotated(&self, rot: Mat3) -> Self {
        let rotation = mat_mul(&rot, &self.rotation);
        let e = self.shape.half_extent();
        // bounding box of the rotated body box
        let mut hi = [0.0; 3];
        for i in 0..3 {
            hi[i] = (0..3).map(|j| rotation[i][j].abs() * e[j]).sum();
        }
        ConvexDomain {
            shape: self.shape,
            rotation,
            bbox: ([-hi[0], -hi[1], -hi[2]], hi),
            surface_quad_order: self.surface_quad_order,
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn bbox(&self) -> (Vec3, Vec3) {
        self.bbox
    }

    #[inline]
    fn to_body(&self, x: Vec3) -> Vec3 {
        // R^T x
        let r = &self.rotation;
        [
            r[0][0] * x[0] + r[1][0] * x[1] + r[2][0] * x[2],
            r[0][1] * x[0] + r[1][1] * x[1] + r[2][1] * x[2],
            r[0][2] * x[0] + r[1][2] * x[1] + r[2][2] * x[2],
        ]
    }

    /// Level function: negative inside, zero on the boundary, positive outside.
    #[inline]
    pub fn level(&self, x: Vec3) -> f64 {
        self.shape.level(self.to_body(x))
    }

    pub fn grad_level(&self, x: Vec3) -> Vec3 {
        mat_vec(&self.rotation, self.shape.grad(self.to_body(x)))
    }

    pub fn hess_level(&self, x: Vec3) -> Mat3 {
        let h = self.shape.hess(self.to_body(x));
        mat_mul(&mat_mul(&self.rotation, &h), &transpose(&self.rotation))
    }

    /// Tolerance band classifying `x` as a boundary point.
    pub fn boundary_tolerance(&self, x: Vec3) -> f64 {
        1e-10 * (1.0 + norm(self.grad_level(x)))
    }

    pub fn on_boundary(&self, x: Vec3) -> bool {
        self.level(x).abs() <= self.boundary_tolerance(x)
    }

    /// `x` in the closure of the domain, up to the boundary tolerance.
    pub fn contains(&self, x: Vec3) -> bool {
        self.level(x) <= self.boundary_tolerance(x)
    }

    /// Outward unit normal `grad xi / |grad xi|`.
    pub fn normal(&self, x: Vec3) -> Result<Vec3> {
        let g = self.grad_level(x);
        let n = norm(g);
        if n < MIN_GRADIENT {
            return Err(Error::DegenerateGradient(n));
        }
        Ok(scale(g, 1.0 / n))
    }

    /// Unit normal of the level surface through `x`; used off the boundary too.
    pub fn level_normal(&self, x: Vec3) -> Vec3 {
        let g = self.grad_level(x);
        let n = norm(g);
        if n < MIN_GRADIENT {
            [0.0, 0.0, 0.0]
        } else {
            scale(g, 1.0 / n)
        }
    }

    /// Boundary point reached from `x` along the gradient flow of `xi` (Newton).
    pub fn project_to_boundary(&self, x: Vec3) -> Vec3 {
        let mut p = x;
        for _ in 0..50 {
            let l = self.level(p);
            let g = self.grad_level(p);
            let g2 = dot(g, g);
            if g2 < MIN_GRADIENT * MIN_GRADIENT {
                break;
            }
            p = sub(p, scale(g, l / g2));
            if l.abs() < 1e-14 {
                break;
            }
        }
        p
    }

    /// Boundary point in the world frame along the body-frame direction `d`.
    fn boundary_point_body(&self, d: Vec3) -> Vec3 {
        scale(d, self.shape.radius(d))
    }

    /// Point and parametric tangents of the polar parametrisation at `(theta, phi)`.
    fn parametrize(&self, theta: f64, phi: f64) -> (Vec3, Vec3, Vec3) {
        let (st, ct) = theta.sin_cos();
        let (sp, cp) = phi.sin_cos();
        let d = [st * cp, st * sp, ct];
        let d_t = [ct * cp, ct * sp, -st];
        let d_p = [-st * sp, st * cp, 0.0];
        let r = self.shape.radius(d);
        let p = scale(d, r);
        // implicit differentiation of xi(r d) = 0
        let g = self.shape.grad(p);
        let gd = dot(g, d);
        let r_t = -r * dot(g, d_t) / gd;
        let r_p = -r * dot(g, d_p) / gd;
        let p_t = add(scale(d, r_t), scale(d_t, r));
        let p_p = add(scale(d, r_p), scale(d_p, r));
        (
            mat_vec(&self.rotation, p),
            mat_vec(&self.rotation, p_t),
            mat_vec(&self.rotation, p_p),
        )
    }

    /// Product Gauss rule in the polar parameters: `order` Gauss-Legendre nodes
    /// in the polar angle times `2 * order` uniform azimuths.
    pub fn boundary_quadrature(&self, order: usize) -> Vec<SurfacePoint> {
        let order = order.max(1);
        let n_phi = 2 * order;
        let dphi = 2.0 * PI / n_phi as f64;
        let mut out = Vec::with_capacity(order * n_phi);
        for (theta, wt) in gauss_legendre_on(order, 0.0, PI) {
            for k in 0..n_phi {
                let phi = (k as f64 + 0.5) * dphi;
                let (p, p_t, p_p) = self.parametrize(theta, phi);
                let area = norm(cross(p_t, p_p));
                let normal = self.level_normal(p);
                out.push(SurfacePoint { position: p, normal, quad_weight: wt * dphi * area });
            }
        }
        out
    }

    /// Deterministic boundary samples used by the curvature check: an odd
    /// number of polar angles (the equator is included) times a multiple of
    /// four azimuths (the coordinate planes are included).
    pub fn boundary_samples(&self, n_samples: usize) -> Vec<Vec3> {
        let n = n_samples.max(1);
        let mut n_theta = ((n as f64 / 2.0).sqrt().ceil() as usize).max(1);
        if n_theta.is_multiple_of(2) {
            n_theta += 1;
        }
        let n_phi = (n.div_ceil(n_theta)).div_ceil(4).max(1) * 4;
        let mut pts = Vec::with_capacity(n_theta * n_phi);
        for i in 0..n_theta {
            let theta = PI * (i as f64 + 0.5) / n_theta as f64;
            for k in 0..n_phi {
                let phi = 2.0 * PI * k as f64 / n_phi as f64;
                let d = [theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos()];
                pts.push(mat_vec(&self.rotation, self.boundary_point_body(d)));
            }
        }
        pts
    }

    /// Smallest principal curvature of the boundary over the sample, from the
    /// tangential Hessian of `xi` divided by `|grad xi|`. A positive margin
    /// certifies convexity on the sample.
    pub fn check_convexity(&self, n_samples: usize) -> Result<ConvexityReport> {
        let pts = self.boundary_samples(n_samples);
        let mut margin = f64::INFINITY;
        for &p in &pts {
            let g = self.grad_level(p);
            let gn = norm(g);
            if gn < MIN_GRADIENT {
                return Err(Error::DegenerateGradient(gn));
            }
            let n = scale(g, 1.0 / gn);
            let h = self.hess_level(p);
            let (e1, e2) = orthonormal_frame(n);
            let s11 = quad_form(e1, &h, e1) / gn;
            let s12 = quad_form(e1, &h, e2) / gn;
            let s22 = quad_form(e2, &h, e2) / gn;
            let tr = 0.5 * (s11 + s22);
            let disc = (0.25 * (s11 - s22).powi(2) + s12 * s12).sqrt();
            margin = margin.min(tr - disc);
        }
        if margin <= 0.0 {
            return Err(Error::ConvexityViolated { margin });
        }
        Ok(ConvexityReport { min_curvature_margin: margin, samples: pts.len() })
    }

    /// Velocity functional `sqrt(xi^2 + |grad xi . v|^2 - 2 (v . hess xi . v) xi)`.
    pub fn tilde_alpha(&self, x: Vec3, v: Vec3) -> f64 {
        let xi = self.level(x);
        let gv = dot(self.grad_level(x), v);
        let vhv = quad_form(v, &self.hess_level(x), v);
        (xi * xi + gv * gv - 2.0 * vhv * xi).max(0.0).sqrt()
    }

    /// Parameter interval `{t : xi(p + t d) < 0}` of the line through `p` with
    /// direction `d`, or `None` if the line misses the domain.
    pub fn chord(&self, p: Vec3, d: Vec3) -> Option<(f64, f64)> {
        match self.shape {
            Shape::Ellipsoid { .. } => {
                // xi is quadratic along lines
                let c = self.level(p);
                let fp = self.level(add(p, d));
                let fm = self.level(sub(p, d));
                let a = 0.5 * (fp + fm) - c;
                let b = 0.5 * (fp - fm);
                if a <= 0.0 {
                    return None;
                }
                let disc = b * b - 4.0 * a * c;
                if disc <= 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                // stable root pair
                let q = -0.5 * (b + b.signum() * sq);
                let (r1, r2) = if q == 0.0 { (-sq / (2.0 * a), sq / (2.0 * a)) } else { (q / a, c / q) };
                Some((r1.min(r2), r1.max(r2)))
            }
            Shape::Dumbbell => self.chord_by_sampling(p, d),
        }
    }

    fn chord_by_sampling(&self, p: Vec3, d: Vec3) -> Option<(f64, f64)> {
        let (lo, hi) = self.bbox;
        let span = norm(sub(hi, lo)) / norm(d).max(1e-300);
        let n = 400;
        let ts: Vec<f64> = (0..=n).map(|i| -span + 2.0 * span * i as f64 / n as f64).collect();
        let inside: Vec<bool> = ts.iter().map(|&t| self.level(axpy(p, t, d)) < 0.0).collect();
        let first = inside.iter().position(|&b| b)?;
        let last = inside.iter().rposition(|&b| b)?;
        let refine = |mut a: f64, mut b: f64| {
            // a outside, b inside
            for _ in 0..60 {
                let m = 0.5 * (a + b);
                if self.level(axpy(p, m, d)) < 0.0 {
                    b = m;
                } else {
                    a = m;
                }
            }
            0.5 * (a + b)
        };
        let t0 = if first == 0 { ts[0] } else { refine(ts[first - 1], ts[first]) };
        let t1 = if last == n { ts[n] } else { refine(ts[last + 1], ts[last]) };
        Some((t0, t1))
    }

    /// Travel distance (in units of `|v|`) from `x` along `v` to the boundary:
    /// the exit time of free streaming. Infinite for `v = 0`.
    pub fn exit_time(&self, x: Vec3, v: Vec3) -> f64 {
        if norm(v) == 0.0 {
            return f64::INFINITY;
        }
        match self.chord(x, v) {
            Some((_, t1)) => t1.max(0.0),
            None => 0.0,
        }
    }

    /// Volume by Gauss quadrature of the radial function.
    pub fn volume(&self) -> f64 {
        let mut vol = 0.0;
        let n = 48;
        let n_phi = 2 * n;
        let dphi = 2.0 * PI / n_phi as f64;
        for (theta, wt) in gauss_legendre_on(n, 0.0, PI) {
            for k in 0..n_phi {
                let phi = (k as f64 + 0.5) * dphi;
                let d = [theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos()];
                let r = self.shape.radius(d);
                vol += wt * dphi * theta.sin() * r.powi(3) / 3.0;
            }
        }
        vol
    }
}
