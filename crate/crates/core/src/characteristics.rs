//! Characteristics of the Vlasov operator: `dX/ds = V`, `dV/ds = E(s, X)`.
//!
//! Trajectories are integrated with classical RK4 at a fixed step and exits
//! through the wall are located by false position on the level set.

use crate::error::{Error, Result};
use crate::field::PotentialField;
use crate::geometry::ConvexDomain;
use crate::math::{add, axpy, dot, gauss_legendre_on, norm, orthonormal_frame, scale, Mat3, Vec3};
use std::sync::Arc;

/// Iteration cap for locating exit events.
const EXIT_SEARCH_STEPS: usize = 60;
/// Below this `|n . v_b|` an exit counts as grazing.
pub const GRAZING_CUTOFF: f64 = 1e-4;

/// A time-dependent force field `E(t, x)`.
pub trait ForceField: Sync {
    fn field(&self, t: f64, x: Vec3) -> Vec3;
    /// `grad_x E(t, x)`, row `i` holding the derivatives of `E_i`.
    fn field_gradient(&self, t: f64, x: Vec3) -> Mat3;
    /// True if the field vanishes identically; enables exact free streaming.
    fn is_zero(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroField;

impl ForceField for ZeroField {
    fn field(&self, _: f64, _: Vec3) -> Vec3 {
        [0.0; 3]
    }
    fn field_gradient(&self, _: f64, _: Vec3) -> Mat3 {
        [[0.0; 3]; 3]
    }
    fn is_zero(&self) -> bool {
        true
    }
}

/// Spatial profile of an analytic potential.
#[derive(Debug, Clone, Copy)]
pub enum Profile {
    /// `r^2/2 - r^4/4`: zero normal derivative on the unit sphere.
    Radial,
    /// `sum_i a_i x_i^2 / 2`.
    Quadratic([f64; 3]),
}

/// `phi(t, x) = delta e^{-rate |t|} psi(x)`, `E = -grad phi`.
#[derive(Debug, Clone, Copy)]
pub struct DecayingPotential {
    pub delta: f64,
    pub rate: f64,
    pub profile: Profile,
}

impl DecayingPotential {
    pub fn radial(delta: f64, rate: f64) -> Self {
        DecayingPotential { delta, rate, profile: Profile::Radial }
    }

    pub fn potential(&self, t: f64, x: Vec3) -> f64 {
        let a = self.delta * (-self.rate * t.abs()).exp();
        a * match self.profile {
            Profile::Radial => {
                let r2 = dot(x, x);
                r2 / 2.0 - r2 * r2 / 4.0
            }
            Profile::Quadratic(c) => 0.5 * (c[0] * x[0] * x[0] + c[1] * x[1] * x[1] + c[2] * x[2] * x[2]),
        }
    }
}

impl ForceField for DecayingPotential {
    fn field(&self, t: f64, x: Vec3) -> Vec3 {
        let a = -self.delta * (-self.rate * t.abs()).exp();
        match self.profile {
            Profile::Radial => scale(x, a * (1.0 - dot(x, x))),
            Profile::Quadratic(c) => [a * c[0] * x[0], a * c[1] * x[1], a * c[2] * x[2]],
        }
    }

    fn field_gradient(&self, t: f64, x: Vec3) -> Mat3 {
        let a = -self.delta * (-self.rate * t.abs()).exp();
        let mut m = [[0.0; 3]; 3];
        match self.profile {
            Profile::Radial => {
                let s = 1.0 - dot(x, x);
                for i in 0..3 {
                    for j in 0..3 {
                        m[i][j] = a * ((if i == j { s } else { 0.0 }) - 2.0 * x[i] * x[j]);
                    }
                }
            }
            Profile::Quadratic(c) => {
                for i in 0..3 {
                    m[i][i] = a * c[i];
                }
            }
        }
        m
    }
}

/// A single potential, constant in time.
impl ForceField for PotentialField {
    fn field(&self, _: f64, x: Vec3) -> Vec3 {
        self.field_at(x)
    }
    fn field_gradient(&self, _: f64, x: Vec3) -> Mat3 {
        self.field_gradient_at(x)
    }
}

/// Snapshots of the potential at increasing times, linear in time between
/// them. Before the first snapshot the field is `e^{-(t_0 - t)} E_0`, the
/// negative-time extension.
#[derive(Debug, Clone)]
pub struct FieldHistory {
    snapshots: Vec<Arc<PotentialField>>,
    zero: bool,
}

impl FieldHistory {
    pub fn new(initial: Arc<PotentialField>) -> Self {
        let zero = initial.is_identically_zero();
        FieldHistory { snapshots: vec![initial], zero }
    }

    fn refresh_zero(&mut self) {
        self.zero = self.snapshots.iter().all(|p| p.is_identically_zero());
    }

    pub fn push(&mut self, phi: Arc<PotentialField>) {
        let last = self.snapshots.last().unwrap().time_stamp;
        assert!(phi.time_stamp > last, "snapshot times must increase");
        self.snapshots.push(phi);
        self.refresh_zero();
    }

    /// Replaces the newest snapshot (keeps time ordering).
    pub fn replace_last(&mut self, phi: Arc<PotentialField>) {
        let n = self.snapshots.len();
        if n >= 2 {
            assert!(phi.time_stamp > self.snapshots[n - 2].time_stamp);
        }
        self.snapshots[n - 1] = phi;
        self.refresh_zero();
    }

    /// Drops snapshots older than `t_keep`, retaining one at or before it.
    pub fn prune_before(&mut self, t_keep: f64) {
        let k = self.snapshots.iter().rposition(|p| p.time_stamp <= t_keep).unwrap_or(0);
        // the first snapshot defines the negative-time extension and stays
        if k > 1 {
            self.snapshots.drain(1..k);
        }
        self.refresh_zero();
    }

    pub fn latest(&self) -> &Arc<PotentialField> {
        self.snapshots.last().unwrap()
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn times(&self) -> Vec<f64> {
        self.snapshots.iter().map(|p| p.time_stamp).collect()
    }

    fn bracket(&self, t: f64) -> Bracket<'_> {
        let s = &self.snapshots;
        let t0 = s[0].time_stamp;
        if t <= t0 {
            return Bracket::One(&s[0], (-(t0 - t)).exp());
        }
        let last = s.len() - 1;
        if t >= s[last].time_stamp {
            return Bracket::One(&s[last], 1.0);
        }
        let k = s.partition_point(|p| p.time_stamp <= t);
        let (a, b) = (&s[k - 1], &s[k]);
        let w = (t - a.time_stamp) / (b.time_stamp - a.time_stamp);
        Bracket::Two(a, b, w)
    }
}

enum Bracket<'a> {
    One(&'a PotentialField, f64),
    Two(&'a PotentialField, &'a PotentialField, f64),
}

impl ForceField for FieldHistory {
    fn field(&self, t: f64, x: Vec3) -> Vec3 {
        match self.bracket(t) {
            Bracket::One(p, s) => scale(p.field_at(x), s),
            Bracket::Two(a, b, w) => PotentialField::blended_field_at(a, b, w, x),
        }
    }

    fn field_gradient(&self, t: f64, x: Vec3) -> Mat3 {
        let lerp = |a: Mat3, b: Mat3, w: f64| {
            let mut m = a;
            for i in 0..3 {
                for j in 0..3 {
                    m[i][j] = (1.0 - w) * a[i][j] + w * b[i][j];
                }
            }
            m
        };
        match self.bracket(t) {
            Bracket::One(p, s) => lerp([[0.0; 3]; 3], p.field_gradient_at(x), s),
            Bracket::Two(a, b, w) => lerp(a.field_gradient_at(x), b.field_gradient_at(x), w),
        }
    }

    fn is_zero(&self) -> bool {
        self.zero
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhasePoint {
    pub t: f64,
    pub x: Vec3,
    pub v: Vec3,
}

impl PhasePoint {
    pub fn new(t: f64, x: Vec3, v: Vec3) -> Self {
        PhasePoint { t, x, v }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BackwardExit {
    pub t_b: f64,
    pub x_b: Vec3,
    pub v_b: Vec3,
    /// False if no exit occurred within the horizon; then `t_b` is the horizon
    /// and `(x_b, v_b)` the state reached there.
    pub hit: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardExit {
    pub t_f: f64,
    pub x_f: Vec3,
    pub v_f: Vec3,
    pub hit: bool,
}

/// Outcome of integrating towards a target time.
#[derive(Debug, Clone, Copy)]
pub enum Flow {
    Reached(PhasePoint),
    /// The path met the wall first, at this state.
    Exited(PhasePoint),
}

/// Mollifier parameters of the kinetic weight.
#[derive(Debug, Clone, Copy)]
pub struct WeightParams {
    pub epsilon: f64,
}

impl Default for WeightParams {
    fn default() -> Self {
        WeightParams { epsilon: 0.05 }
    }
}

/// Quintic smoothstep clamped to `[0, 1]`.
pub fn chi(tau: f64) -> f64 {
    let t = tau.clamp(0.0, 1.0);
    t * t * t * (t * (6.0 * t - 15.0) + 10.0)
}

pub fn chi_derivative(tau: f64) -> f64 {
    if tau <= 0.0 || tau >= 1.0 {
        return 0.0;
    }
    30.0 * tau * tau * (tau - 1.0) * (tau - 1.0)
}

/// Fixed integrator step for speed `|v|`.
pub fn step_size(v: Vec3) -> f64 {
    0.01f64.min(0.1 / (1.0 + norm(v)))
}

/// Both exit-map determinants for a backward exit.
#[derive(Debug, Clone, Copy)]
pub struct ExitJacobian {
    /// `t_b^3 / |n(x_b) . v_b|`.
    pub analytic: f64,
    /// Finite-difference `|det d(x_b tangential, t_b)/dv|`.
    pub fd: f64,
    pub exit: BackwardExit,
}

pub type Jacobian6 = [[f64; 6]; 6];

/// Tracing operations over a domain and a force field.
pub struct Characteristics<'a, F: ForceField + ?Sized> {
    pub domain: &'a ConvexDomain,
    pub field: &'a F,
    pub weight: WeightParams,
    /// Integrator step override; [`step_size`] when absent.
    pub max_step: Option<f64>,
}

impl<'a, F: ForceField + ?Sized> Characteristics<'a, F> {
    pub fn new(domain: &'a ConvexDomain, field: &'a F) -> Self {
        Characteristics { domain, field, weight: WeightParams::default(), max_step: None }
    }

    /// Fixed integrator step `h` for every speed.
    pub fn with_step(mut self, h: f64) -> Self {
        self.max_step = Some(h);
        self
    }

    pub fn with_weight(mut self, weight: WeightParams) -> Self {
        self.weight = weight;
        self
    }

    #[inline]
    fn rk4(&self, t: f64, x: Vec3, v: Vec3, h: f64) -> (Vec3, Vec3) {
        let f = self.field;
        let a1 = f.field(t, x);
        let x2 = axpy(x, 0.5 * h, v);
        let v2 = axpy(v, 0.5 * h, a1);
        let a2 = f.field(t + 0.5 * h, x2);
        let x3 = axpy(x, 0.5 * h, v2);
        let v3 = axpy(v, 0.5 * h, a2);
        let a3 = f.field(t + 0.5 * h, x3);
        let x4 = axpy(x, h, v3);
        let v4 = axpy(v, h, a3);
        let a4 = f.field(t + h, x4);
        let xn = [
            x[0] + h / 6.0 * (v[0] + 2.0 * v2[0] + 2.0 * v3[0] + v4[0]),
            x[1] + h / 6.0 * (v[1] + 2.0 * v2[1] + 2.0 * v3[1] + v4[1]),
            x[2] + h / 6.0 * (v[2] + 2.0 * v2[2] + 2.0 * v3[2] + v4[2]),
        ];
        let vn = [
            v[0] + h / 6.0 * (a1[0] + 2.0 * a2[0] + 2.0 * a3[0] + a4[0]),
            v[1] + h / 6.0 * (a1[1] + 2.0 * a2[1] + 2.0 * a3[1] + a4[1]),
            v[2] + h / 6.0 * (a1[2] + 2.0 * a2[2] + 2.0 * a3[2] + a4[2]),
        ];
        (xn, vn)
    }

    #[inline]
    fn outside(&self, x: Vec3) -> bool {
        self.domain.level(x) > self.domain.boundary_tolerance(x)
    }

    /// Integrates from `p` to time `s` (either direction), stopping at the wall.
    pub fn flow(&self, p: PhasePoint, s: f64) -> Flow {
        let dt = s - p.t;
        if dt == 0.0 {
            return Flow::Reached(p);
        }
        if self.field.is_zero() {
            let w = if dt > 0.0 { p.v } else { scale(p.v, -1.0) };
            let te = self.domain.exit_time(p.x, w);
            if te < dt.abs() {
                let x = axpy(p.x, te, w);
                return Flow::Exited(PhasePoint::new(p.t + dt.signum() * te, x, p.v));
            }
            return Flow::Reached(PhasePoint::new(s, axpy(p.x, dt, p.v), p.v));
        }
        let step = self.max_step.unwrap_or_else(|| step_size(p.v));
        let n = (dt.abs() / step).ceil().max(1.0) as usize;
        let h = dt / n as f64;
        let (mut x, mut v) = (p.x, p.v);
        for k in 0..n {
            let t = p.t + k as f64 * h;
            let (xn, vn) = self.rk4(t, x, v, h);
            if self.outside(xn) {
                let lo = self.exit_fraction(t, x, v, h, self.domain.level(xn));
                let (xe, ve) = self.rk4(t, x, v, lo * h);
                return Flow::Exited(PhasePoint::new(t + lo * h, xe, ve));
            }
            x = xn;
            v = vn;
        }
        Flow::Reached(PhasePoint::new(s, x, v))
    }

    /// Largest fraction of the step `h` from `(t, x, v)` known to stay inside,
    /// bracketing the wall crossing by Illinois false position.
    fn exit_fraction(&self, t: f64, x: Vec3, v: Vec3, h: f64, g_hi: f64) -> f64 {
        let (mut lo, mut hi) = (0.0, 1.0);
        let (mut g_lo, mut g_hi) = (self.domain.level(x).min(0.0), g_hi);
        let mut side = 0;
        for _ in 0..EXIT_SEARCH_STEPS {
            if hi - lo <= 1e-13 {
                break;
            }
            let mut mid = if g_hi > g_lo { lo - g_lo * (hi - lo) / (g_hi - g_lo) } else { 0.5 * (lo + hi) };
            if !(mid > lo && mid < hi) {
                mid = 0.5 * (lo + hi);
            }
            let g = self.domain.level(self.rk4(t, x, v, mid * h).0);
            if g > 0.0 {
                hi = mid;
                g_hi = g;
                if side == 1 {
                    g_lo *= 0.5;
                }
                side = 1;
            } else {
                lo = mid;
                g_lo = g;
                if side == -1 {
                    g_hi *= 0.5;
                }
                side = -1;
                if g > -1e-14 {
                    break;
                }
            }
        }
        lo
    }

    fn check_start(&self, p: &PhasePoint) -> Result<()> {
        if self.outside(p.x) {
            return Err(Error::OutsideDomain(p.x));
        }
        Ok(())
    }

    /// `(s, X(s; t, x, v), V(s; t, x, v))`.
    pub fn trace(&self, p: PhasePoint, s: f64) -> Result<PhasePoint> {
        self.check_start(&p)?;
        match self.flow(p, s) {
            Flow::Reached(q) => Ok(q),
            Flow::Exited(q) => Err(Error::LeftDomain { t_exit: q.t }),
        }
    }

    /// First wall contact tracing backwards from `p`, within `horizon`.
    pub fn backward_exit(&self, p: PhasePoint, horizon: f64) -> BackwardExit {
        match self.flow(p, p.t - horizon) {
            Flow::Exited(q) => BackwardExit { t_b: p.t - q.t, x_b: q.x, v_b: q.v, hit: true },
            Flow::Reached(q) => BackwardExit { t_b: horizon, x_b: q.x, v_b: q.v, hit: false },
        }
    }

    /// First wall contact tracing forwards from `p`, within `horizon`.
    pub fn forward_exit(&self, p: PhasePoint, horizon: f64) -> ForwardExit {
        match self.flow(p, p.t + horizon) {
            Flow::Exited(q) => ForwardExit { t_f: q.t - p.t, x_f: q.x, v_f: q.v, hit: true },
            Flow::Reached(q) => ForwardExit { t_f: horizon, x_f: q.x, v_f: q.v, hit: false },
        }
    }

    /// `alpha = chi((t - t_b + eps)/eps) |n(x_b) . v_b| + 1 - chi(...)`; on the
    /// incoming boundary this is exactly `|n(x) . v|`.
    pub fn kinetic_weight(&self, p: PhasePoint) -> f64 {
        self.kinetic_weight_flagged(p).0
    }

    /// The kinetic weight and whether its backward exit is grazing.
    pub fn kinetic_weight_flagged(&self, p: PhasePoint) -> (f64, bool) {
        if self.domain.on_boundary(p.x) {
            let n = self.domain.level_normal(p.x);
            let nv = dot(n, p.v);
            if nv < 0.0 {
                return (nv.abs(), nv.abs() < GRAZING_CUTOFF);
            }
        }
        let eps = self.weight.epsilon;
        let ex = self.backward_exit(p, p.t + eps);
        if !ex.hit {
            return (1.0, false);
        }
        let c = chi((p.t - ex.t_b + eps) / eps);
        let nv = dot(self.domain.level_normal(ex.x_b), ex.v_b).abs();
        (c * nv + 1.0 - c, nv < GRAZING_CUTOFF)
    }

    /// Flow Jacobian `d(X, V)(s)/d(x, v)` integrated alongside the trajectory.
    pub fn variational_jacobian(&self, p: PhasePoint, s: f64) -> Result<Jacobian6> {
        self.check_start(&p)?;
        let dt = s - p.t;
        let mut jac = [[0.0; 6]; 6];
        for (i, row) in jac.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        if dt == 0.0 {
            return Ok(jac);
        }
        let n = (dt.abs() / step_size(p.v)).ceil().max(1.0) as usize;
        let h = dt / n as f64;
        let mut y = [0.0; 42];
        y[..3].copy_from_slice(&p.x);
        y[3..6].copy_from_slice(&p.v);
        for i in 0..6 {
            for j in 0..6 {
                y[6 + 6 * i + j] = jac[i][j];
            }
        }
        let rhs = |t: f64, y: &[f64; 42]| -> [f64; 42] {
            let x = [y[0], y[1], y[2]];
            let e = self.field.field(t, x);
            let g = self.field.field_gradient(t, x);
            let mut d = [0.0; 42];
            d[..3].copy_from_slice(&y[3..6]);
            d[3..6].copy_from_slice(&e);
            // dJ = [[0, I], [grad E, 0]] J
            for j in 0..6 {
                for i in 0..3 {
                    d[6 + 6 * i + j] = y[6 + 6 * (i + 3) + j];
                    d[6 + 6 * (i + 3) + j] = (0..3).map(|k| g[i][k] * y[6 + 6 * k + j]).sum();
                }
            }
            d
        };
        for k in 0..n {
            let t = p.t + k as f64 * h;
            let k1 = rhs(t, &y);
            let k2 = rhs(t + 0.5 * h, &combine(&y, 0.5 * h, &k1));
            let k3 = rhs(t + 0.5 * h, &combine(&y, 0.5 * h, &k2));
            let k4 = rhs(t + h, &combine(&y, h, &k3));
            for i in 0..42 {
                y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
            if self.outside([y[0], y[1], y[2]]) {
                // locate the crossing with the plain trajectory
                let t_exit = match self.flow(p, s) {
                    Flow::Exited(q) => q.t,
                    Flow::Reached(_) => t + h,
                };
                return Err(Error::LeftDomain { t_exit });
            }
        }
        for i in 0..6 {
            for j in 0..6 {
                jac[i][j] = y[6 + 6 * i + j];
            }
        }
        Ok(jac)
    }

    /// Analytic and finite-difference determinants of
    /// `v -> (tangential coordinates of x_b, t_b)`.
    pub fn exit_map_jacobian(&self, p: PhasePoint) -> Result<ExitJacobian> {
        self.check_start(&p)?;
        let horizon = 1e3;
        let ex = self.backward_exit(p, horizon);
        if !ex.hit {
            return Err(Error::NoExit { horizon });
        }
        let n = self.domain.level_normal(ex.x_b);
        let nv = dot(n, ex.v_b);
        if nv.abs() < GRAZING_CUTOFF {
            return Err(Error::NearGrazing(nv.abs()));
        }
        let analytic = ex.t_b.powi(3) / nv.abs();
        let (e1, e2) = orthonormal_frame(n);
        let map = |v: Vec3| -> Result<Vec3> {
            let e = self.backward_exit(PhasePoint::new(p.t, p.x, v), horizon);
            if !e.hit {
                return Err(Error::NoExit { horizon });
            }
            Ok([dot(e.x_b, e1), dot(e.x_b, e2), e.t_b])
        };
        let delta = 1e-6 * (1.0 + norm(p.v));
        let mut m = [[0.0; 3]; 3];
        for j in 0..3 {
            let mut vp = p.v;
            let mut vm = p.v;
            vp[j] += delta;
            vm[j] -= delta;
            let (fp, fm) = (map(vp)?, map(vm)?);
            for i in 0..3 {
                m[i][j] = (fp[i] - fm[i]) / (2.0 * delta);
            }
        }
        Ok(ExitJacobian { analytic, fd: crate::math::det3(&m).abs(), exit: ex })
    }

    /// `int_{|u| <= n_max} alpha(t, x, u)^{-sigma} du`, refined until two
    /// successive levels agree; graded towards the grazing plane `n(x) . u = 0`.
    pub fn alpha_inverse_moment(&self, x: Vec3, t: f64, sigma: f64, n_max: f64) -> Result<f64> {
        assert!(sigma > 0.0 && sigma < 1.0 && n_max > 0.0);
        self.check_start(&PhasePoint::new(t, x, [0.0; 3]))?;
        let mut n = self.domain.level_normal(x);
        if norm(n) == 0.0 {
            n = [0.0, 0.0, 1.0];
        }
        let (e1, e2) = orthonormal_frame(n);
        let mut prev: Option<f64> = None;
        const MAX_LEVEL: usize = 5;
        for level in 0..=MAX_LEVEL {
            let est = self.moment_at_level(x, t, sigma, n_max, n, e1, e2, level);
            if let Some(p) = prev {
                let rel = (est - p).abs() / est.abs().max(f64::MIN_POSITIVE);
                if rel <= 0.02 || (level == MAX_LEVEL && rel <= 0.1) {
                    return Ok(est);
                }
                if level == MAX_LEVEL {
                    return Err(Error::NotConverged { iterations: level, residual: rel });
                }
            }
            prev = Some(est);
        }
        unreachable!()
    }

    #[allow(clippy::too_many_arguments)]
    fn moment_at_level(&self, x: Vec3, t: f64, sigma: f64, n_max: f64, n: Vec3, e1: Vec3, e2: Vec3, level: usize) -> f64 {
        let panels = 6 + 2 * level;
        let q_c = 4 + level;
        let q_r = 4 + 2 * level;
        let m_phi = 8 + 4 * level;
        // normal coordinate nodes on (0, n_max], mirrored for negative c
        let mut c_nodes = Vec::new();
        for k in 0..panels {
            let (a, b) = (n_max / 2f64.powi(k as i32 + 1), n_max / 2f64.powi(k as i32));
            c_nodes.extend(gauss_legendre_on(q_c, a, b));
        }
        // innermost panel: c = a s^m removes the |c|^{-sigma} endpoint singularity
        let a = n_max / 2f64.powi(panels as i32);
        let m = 2.0 / (1.0 - sigma);
        for (s, w) in gauss_legendre_on(q_c, 0.0, 1.0) {
            c_nodes.push((a * s.powf(m), w * a * m * s.powf(m - 1.0)));
        }
        let radial = |c: f64| gauss_legendre_on(q_r, 0.0, (n_max * n_max - c * c).max(0.0).sqrt());
        let dphi = 2.0 * std::f64::consts::PI / m_phi as f64;
        let mut total = 0.0;
        for sign in [-1.0, 1.0] {
            for &(c, wc) in &c_nodes {
                let cn = sign * c;
                for (r, wr) in radial(c) {
                    for k in 0..m_phi {
                        let phi = (k as f64 + 0.5) * dphi;
                        let u = add(scale(n, cn), add(scale(e1, r * phi.cos()), scale(e2, r * phi.sin())));
                        let alpha = self.kinetic_weight(PhasePoint::new(t, x, u));
                        if alpha > 0.0 {
                            total += wc * wr * r * dphi * alpha.powf(-sigma);
                        }
                    }
                }
            }
        }
        total
    }
}

fn combine(y: &[f64; 42], h: f64, k: &[f64; 42]) -> [f64; 42] {
    let mut out = *y;
    for i in 0..42 {
        out[i] += h * k[i];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{det, norm2, sub};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ball() -> ConvexDomain {
        ConvexDomain::unit_ball()
    }

    fn close(a: Vec3, b: Vec3, tol: f64) -> bool {
        norm(sub(a, b)) <= tol
    }

    #[test]
    fn chi_profile() {
        assert_eq!(chi(-0.3), 0.0);
        assert_eq!(chi(1.7), 1.0);
        assert!((chi(0.5) - 0.5).abs() < 1e-15);
        let max = (0..=1000).map(|k| chi_derivative(k as f64 / 1000.0)).fold(0.0, f64::max);
        assert!((max - 1.875).abs() < 1e-9 && max <= 4.0);
    }

    #[test]
    fn free_streaming_trace() {
        let d = ball();
        let ch = Characteristics::new(&d, &ZeroField);
        let q = ch.trace(PhasePoint::new(1.0, [0.0; 3], [1.0, 0.0, 0.0]), 0.5).unwrap();
        assert!(close(q.x, [-0.5, 0.0, 0.0], 1e-15) && q.v == [1.0, 0.0, 0.0]);
        let err = ch.trace(PhasePoint::new(1.0, [0.0; 3], [1.0, 0.0, 0.0]), -1.0).unwrap_err();
        assert!(matches!(err, Error::LeftDomain { t_exit } if (t_exit - 0.0).abs() < 1e-12));
    }

    #[test]
    fn backward_exit_chords() {
        let d = ball();
        let ch = Characteristics::new(&d, &ZeroField);
        let v = [0.6, 0.0, 0.8];
        let ex = ch.backward_exit(PhasePoint::new(0.0, [0.0; 3], v), 10.0);
        assert!(ex.hit && (ex.t_b - 1.0).abs() < 1e-12);
        assert!(close(ex.x_b, scale(v, -1.0), 1e-12));
        assert!((dot(d.level_normal(ex.x_b), ex.v_b) + 1.0).abs() < 1e-12);
        let ex = ch.backward_exit(PhasePoint::new(0.0, [0.5, 0.0, 0.0], [1.0, 0.0, 0.0]), 10.0);
        assert!((ex.t_b - 1.5).abs() < 1e-12 && close(ex.x_b, [-1.0, 0.0, 0.0], 1e-12));
        let fx = ch.forward_exit(PhasePoint::new(0.0, [0.5, 0.0, 0.0], [-1.0, 0.0, 0.0]), 10.0);
        assert!((fx.t_f - 1.5).abs() < 1e-12 && close(fx.x_f, [-1.0, 0.0, 0.0], 1e-12));
        let miss = ch.backward_exit(PhasePoint::new(0.0, [0.0; 3], [0.1, 0.0, 0.0]), 1.0);
        assert!(!miss.hit && miss.t_b == 1.0);
    }

    #[test]
    fn rk4_matches_free_streaming_and_exact_exit() {
        // a field that vanishes to machine precision but disables the fast path
        let f = DecayingPotential::radial(1e-300, 1.0);
        let d = ball();
        let ch = Characteristics::new(&d, &f);
        let ex = ch.backward_exit(PhasePoint::new(0.0, [0.5, 0.0, 0.0], [1.0, 0.0, 0.0]), 10.0);
        assert!((ex.t_b - 1.5).abs() < 1e-10, "{}", ex.t_b);
        assert!(d.level(ex.x_b).abs() <= 1e-10 * (1.0 + norm(d.grad_level(ex.x_b))) * 2.0);
    }

    #[test]
    fn reversibility_and_energy() {
        let d = ball();
        let f = DecayingPotential::radial(0.5, 0.0);
        let ch = Characteristics::new(&d, &f);
        let p = PhasePoint::new(0.0, [0.2, -0.1, 0.3], [0.3, 0.2, -0.1]);
        let q = ch.trace(p, 0.8).unwrap();
        let back = ch.trace(q, 0.0).unwrap();
        assert!(close(back.x, p.x, 1e-10) && close(back.v, p.v, 1e-10));
        let energy = |s: &PhasePoint| 0.5 * norm2(s.v) + f.potential(s.t, s.x);
        assert!((energy(&q) - energy(&p)).abs() < 1e-10);
    }

    #[test]
    fn small_field_perturbs_exit_slightly() {
        let d = ball();
        let f = DecayingPotential::radial(0.01, 1.0);
        let free = Characteristics::new(&d, &ZeroField);
        let ch = Characteristics::new(&d, &f);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let x = [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)];
            let v = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            if norm(v) < 0.3 {
                continue;
            }
            let p = PhasePoint::new(1.0, x, v);
            let a = free.backward_exit(p, 50.0);
            let b = ch.backward_exit(p, 50.0);
            assert!((a.t_b - b.t_b).abs() < 0.01 * (1.0 + a.t_b).powi(2) / norm(v), "{} {}", a.t_b, b.t_b);
        }
    }

    #[test]
    fn kinetic_weight_branches() {
        let d = ball();
        let ch = Characteristics::new(&d, &ZeroField);
        // no boundary contact since time -eps
        assert_eq!(ch.kinetic_weight(PhasePoint::new(0.0, [0.0; 3], [0.1, 0.0, 0.0])), 1.0);
        // incoming boundary
        let x = [0.0, 0.6, 0.8];
        let v = [0.3, -0.5, -0.2];
        let w = ch.kinetic_weight(PhasePoint::new(0.7, x, v));
        assert_eq!(w, dot(x, v).abs());
        // chord from the centre at t >= 1 + eps
        let w = ch.kinetic_weight(PhasePoint::new(1.2, [0.0; 3], [0.0, 0.0, 1.0]));
        assert!((w - 1.0).abs() < 1e-12);
        let w = ch.kinetic_weight(PhasePoint::new(1.2, [0.0; 3], [0.0, 0.0, 0.5]));
        assert!((w - 1.0).abs() < 1e-12);
        let w = ch.kinetic_weight(PhasePoint::new(2.0, [0.0; 3], [0.0, 0.0, 0.5]));
        assert!((w - 0.5).abs() < 1e-12);
    }

    #[test]
    fn free_variational_jacobian() {
        let d = ball();
        let f = DecayingPotential::radial(1e-300, 1.0);
        let ch = Characteristics::new(&d, &f);
        let jac = ch.variational_jacobian(PhasePoint::new(1.0, [0.1, 0.0, 0.0], [0.2, 0.1, 0.0]), 0.4).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let id = if i == j { 1.0 } else { 0.0 };
                assert!((jac[i][j] - id).abs() < 1e-12);
                assert!((jac[i][j + 3] - (0.4 - 1.0) * id).abs() < 1e-12);
                assert!((jac[i + 3][j + 3] - id).abs() < 1e-12);
                assert!(jac[i + 3][j].abs() < 1e-12);
            }
        }
    }

    #[test]
    fn liouville_under_decaying_field() {
        let d = ball();
        let f = DecayingPotential { delta: 0.3, rate: 0.5, profile: Profile::Quadratic([1.0, -2.0, 0.5]) };
        let ch = Characteristics::new(&d, &f);
        let jac = ch.variational_jacobian(PhasePoint::new(1.0, [0.1, 0.1, 0.0], [0.1, -0.2, 0.1]), 0.0).unwrap();
        let m: Vec<Vec<f64>> = jac.iter().map(|r| r.to_vec()).collect();
        assert!((det(m) - 1.0).abs() < 1e-8);
    }

    #[test]
    fn exit_map_from_centre() {
        let d = ball();
        let ch = Characteristics::new(&d, &ZeroField);
        let v = [0.0, 0.6, 0.8];
        let j = ch.exit_map_jacobian(PhasePoint::new(0.0, [0.0; 3], v)).unwrap();
        assert!((j.analytic - 1.0).abs() < 1e-12);
        assert!((j.fd / j.analytic - 1.0).abs() < 1e-6, "{} {}", j.fd, j.analytic);
        // homogeneity: v -> 2v
        let j2 = ch.exit_map_jacobian(PhasePoint::new(0.0, [0.0; 3], scale(v, 2.0))).unwrap();
        assert!((j2.exit.t_b - 0.5).abs() < 1e-12);
        assert!((j2.fd / (0.125 / 2.0) - 1.0).abs() < 1e-6);
        let g = ch.exit_map_jacobian(PhasePoint::new(0.0, [0.0, 0.0, 1.0 - 1e-12], [1.0, 0.0, 0.0]));
        assert!(matches!(g, Err(Error::NearGrazing(_))));
    }

    #[test]
    fn alpha_moment_in_the_bulk_is_the_ball_volume() {
        let d = ball();
        let ch = Characteristics::new(&d, &ZeroField).with_weight(WeightParams { epsilon: 0.05 });
        // |u| <= 1 from near the centre at t = 0: no contact since -eps
        let val = ch.alpha_inverse_moment([0.0; 3], 0.0, 0.5, 1.0).unwrap();
        let exact = 4.0 / 3.0 * std::f64::consts::PI;
        assert!((val / exact - 1.0).abs() < 1e-4, "{val}");
    }

    #[test]
    fn alpha_moment_on_the_boundary_is_finite() {
        let d = ball();
        let ch = Characteristics::new(&d, &ZeroField);
        let val = ch.alpha_inverse_moment([0.0, 0.0, 1.0], 1.0, 0.5, 1.0).unwrap();
        assert!(val.is_finite() && val > 4.0 / 3.0 * std::f64::consts::PI);
    }

    #[test]
    fn alpha_invariance_along_free_flow() {
        let d = ball();
        let ch = Characteristics::new(&d, &ZeroField);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let x = [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)];
            let v = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
            let p = PhasePoint::new(1.0, x, v);
            let ex = ch.backward_exit(p, 1.05);
            let s = 1.0 - rng.gen_range(0.0..1.0) * ex.t_b.min(1.05);
            let q = ch.trace(p, s).unwrap();
            let a = ch.kinetic_weight(p);
            let b = ch.kinetic_weight(q);
            assert!((a - b).abs() <= 1e-8 * (1.0 + a), "{a} {b}");
        }
    }
}
