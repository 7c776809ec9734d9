//! Collision frequency and gain term on a whole phase grid at once.
//!
//! Writing `F = mu + h`, `h = sqrt(mu) f`, the two fields the marcher needs are
//!
//! ```text
//! nu(F)   = nu_mu + C h
//! gain(F) = nu_mu mu + sqrt(mu) K2 f + Q_gain(h, h)
//! ```
//!
//! `C` and `K2` are dense matrices over the active velocity ball, applied to all
//! spatial nodes with one matrix product each. The quadratic part uses a lattice
//! plane/ray factorisation of the gain integral (see [`RadonPlan`]).
//!
//! `K2` receives a diagonal correction so that the discrete linearised operator
//! annihilates `sqrt(mu)` exactly; with `C` symmetric this makes the discrete
//! collision operator conserve mass to round-off.

use super::{collision_frequency_exact, k2_cell_weight, maxwellian, sqrt_maxwellian, KernelConstants};
use crate::math::{norm2, pairwise_sum, sub, Vec3};
use crate::velocity::VelocityGrid;
use rayon::prelude::*;
use std::f64::consts::PI;

/// Sup of `|f|` below which the quadratic gain is skipped at a spatial node.
const QUADRATIC_SKIP: f64 = 1e-6;

pub struct GridCollisionOperator {
    grid: VelocityGrid,
    active: Vec<usize>,
    mu: Vec<f64>,
    sqrt_mu: Vec<f64>,
    /// `C mu` on the active set, exact `nu` elsewhere (full grid layout).
    nu_mu: Vec<f64>,
    k2: Vec<f32>,
    c: Vec<f32>,
    radon: RadonPlan,
}

/// Per-phase-node collision frequency and gain, `x`-major.
#[derive(Debug, Clone, Default)]
pub struct CollisionFields {
    pub nu: Vec<f64>,
    pub gain: Vec<f64>,
    /// Nodes where the gain had to be clamped at zero.
    pub clamped: usize,
}

impl GridCollisionOperator {
    pub fn new(grid: &VelocityGrid, constants: &KernelConstants, radon_max_component: i32) -> Self {
        let n = grid.len();
        let active: Vec<usize> = (0..n).filter(|&j| grid.is_active(j)).collect();
        let na = active.len();
        let h = grid.h;
        let mu = grid.sample(maxwellian);
        let sqrt_mu = grid.sample(sqrt_maxwellian);

        let rows: Vec<(Vec<f64>, Vec<f64>)> = active
            .par_iter()
            .map(|&i| {
                let v = grid.node(i);
                let mut k2_row = vec![0.0; na];
                let mut c_row = vec![0.0; na];
                for (b, &j) in active.iter().enumerate() {
                    let u = grid.node(j);
                    k2_row[b] = k2_cell_weight(v, u, h, constants);
                    c_row[b] = 2.0 * PI * norm2(sub(v, u)).sqrt() * grid.cell_volume;
                }
                (k2_row, c_row)
            })
            .collect();

        let mut k2 = vec![0.0f64; na * na];
        let mut c = vec![0.0f64; na * na];
        for a in 0..na {
            for b in 0..na {
                k2[a * na + b] = 0.5 * (rows[a].0[b] + rows[b].0[a]);
                c[a * na + b] = 0.5 * (rows[a].1[b] + rows[b].1[a]);
            }
        }
        drop(rows);
        cell_average_correction(grid, &active, &mut k2);

        let mut nu_mu: Vec<f64> = grid.nodes().iter().map(|&v| collision_frequency_exact(v)).collect();
        let mu_a: Vec<f64> = active.iter().map(|&j| mu[j]).collect();
        let smu_a: Vec<f64> = active.iter().map(|&j| sqrt_mu[j]).collect();
        for a in 0..na {
            let row = &c[a * na..(a + 1) * na];
            let terms: Vec<f64> = row.iter().zip(&mu_a).map(|(x, y)| x * y).collect();
            nu_mu[active[a]] = pairwise_sum(&terms);
        }
        // diagonal correction: (K2 sqrt mu)_a = 2 nu_mu sqrt(mu)_a
        for a in 0..na {
            let row = &k2[a * na..(a + 1) * na];
            let terms: Vec<f64> = row.iter().zip(&smu_a).map(|(x, y)| x * y).collect();
            let current = pairwise_sum(&terms);
            let target = 2.0 * nu_mu[active[a]] * smu_a[a];
            k2[a * na + a] += (target - current) / smu_a[a];
        }

        GridCollisionOperator {
            grid: grid.clone(),
            active,
            mu,
            sqrt_mu,
            nu_mu,
            k2: k2.iter().map(|&x| x as f32).collect(),
            c: c.iter().map(|&x| x as f32).collect(),
            radon: RadonPlan::new(grid, radon_max_component),
        }
    }

    pub fn grid(&self) -> &VelocityGrid {
        &self.grid
    }

    pub fn n_active(&self) -> usize {
        self.active.len()
    }

    /// Discrete collision frequency of the Maxwellian, full grid layout.
    pub fn nu_maxwellian(&self) -> &[f64] {
        &self.nu_mu
    }

    /// `nu(F)` and `gain(F, F)` for every spatial node; `big_f` is `x`-major
    /// with `grid.len()` velocities per spatial node.
    pub fn evaluate(&self, big_f: &[f64]) -> CollisionFields {
        let nv = self.grid.len();
        assert_eq!(big_f.len() % nv, 0);
        let nx = big_f.len() / nv;
        let na = self.active.len();

        let mut fm = vec![0.0f32; na * nx];
        let mut hm = vec![0.0f32; na * nx];
        fm.par_chunks_mut(na).zip(hm.par_chunks_mut(na)).enumerate().for_each(|(x, (fc, hc))| {
            let slice = &big_f[x * nv..(x + 1) * nv];
            for (a, &j) in self.active.iter().enumerate() {
                let hj = slice[j] - self.mu[j];
                hc[a] = hj as f32;
                fc[a] = (hj / self.sqrt_mu[j]) as f32;
            }
        });
        let mut k2f = vec![0.0f32; na * nx];
        let mut ch = vec![0.0f32; na * nx];
        // column layout: element (row a, column x) at x * na + a
        unsafe {
            matrixmultiply::sgemm(
                na, na, nx, 1.0, self.k2.as_ptr(), na as isize, 1, fm.as_ptr(), 1, na as isize, 0.0,
                k2f.as_mut_ptr(), 1, na as isize,
            );
            matrixmultiply::sgemm(
                na, na, nx, 1.0, self.c.as_ptr(), na as isize, 1, hm.as_ptr(), 1, na as isize, 0.0,
                ch.as_mut_ptr(), 1, na as isize,
            );
        }
        drop(fm);
        drop(hm);

        let mut nu = vec![0.0; nx * nv];
        let mut gain = vec![0.0; nx * nv];
        let clamped: usize = nu
            .par_chunks_mut(nv)
            .zip(gain.par_chunks_mut(nv))
            .enumerate()
            .map(|(x, (nu_x, gain_x))| {
                let slice = &big_f[x * nv..(x + 1) * nv];
                for j in 0..nv {
                    nu_x[j] = self.nu_mu[j];
                    gain_x[j] = self.nu_mu[j] * self.mu[j];
                }
                let h: Vec<f64> = (0..nv).map(|j| slice[j] - self.mu[j]).collect();
                let sup_f = self
                    .active
                    .iter()
                    .fold(0.0f64, |m, &j| m.max((h[j] / self.sqrt_mu[j]).abs()));
                let quad = if sup_f > QUADRATIC_SKIP { Some(self.radon.gain(&h, &h)) } else { None };
                // quadratic loss is (C h) h; balance its mass with a Maxwellian multiple
                let mut loss_q = Vec::with_capacity(self.active.len());
                let mut gain_q = Vec::with_capacity(self.active.len());
                for (a, &j) in self.active.iter().enumerate() {
                    let chj = ch[x * na + a] as f64;
                    loss_q.push(chj * h[j]);
                    gain_q.push(quad.as_ref().map_or(0.0, |q| q[j]));
                    nu_x[j] = self.nu_mu[j] + chj;
                    gain_x[j] = self.nu_mu[j] * self.mu[j] + self.sqrt_mu[j] * k2f[x * na + a] as f64;
                }
                let mass_mu: f64 = pairwise_sum(&self.active.iter().map(|&j| self.mu[j]).collect::<Vec<_>>());
                let lambda = (pairwise_sum(&loss_q) - pairwise_sum(&gain_q)) / mass_mu;
                let mut clamped = 0;
                for (a, &j) in self.active.iter().enumerate() {
                    gain_x[j] += gain_q[a] + lambda * self.mu[j];
                    if gain_x[j] < 0.0 {
                        gain_x[j] = 0.0;
                        clamped += 1;
                    }
                    if nu_x[j] < 0.0 {
                        nu_x[j] = 0.0;
                    }
                }
                clamped
            })
            .sum();
        CollisionFields { nu, gain, clamped }
    }
}

/// `K2 <- K2 - h^2/48 (K2 lap + lap K2)`: the symmetric form of pairing exact
/// cell integrals of the kernel with cell averages `g - h^2/24 lap g`.
fn cell_average_correction(grid: &VelocityGrid, active: &[usize], k2: &mut [f64]) {
    let na = active.len();
    let mut slot = vec![usize::MAX; grid.len()];
    for (a, &j) in active.iter().enumerate() {
        slot[j] = a;
    }
    let n = grid.n_per_axis;
    // neighbours of each active node inside the active set
    let nbrs: Vec<Vec<usize>> = active
        .iter()
        .map(|&j| {
            let m = grid.multi_index(j);
            let mut out = Vec::with_capacity(6);
            for d in 0..3 {
                for s in [-1isize, 1] {
                    let q = m[d] as isize + s;
                    if q < 0 || q >= n as isize {
                        continue;
                    }
                    let mut t = m;
                    t[d] = q as usize;
                    let b = slot[grid.index(t[0], t[1], t[2])];
                    if b != usize::MAX {
                        out.push(b);
                    }
                }
            }
            out
        })
        .collect();
    let inv = 1.0 / (grid.h * grid.h);
    // (K2 lap)_{ab} = sum_c K2_{ac} lap_{cb}, lap symmetric
    let kl: Vec<f64> = (0..na)
        .into_par_iter()
        .flat_map_iter(|a| {
            let row = &k2[a * na..(a + 1) * na];
            let nbrs = &nbrs;
            (0..na).map(move |b| {
                let mut acc = -6.0 * row[b];
                for &c in &nbrs[b] {
                    acc += row[c];
                }
                acc * inv
            })
        })
        .collect();
    let c = grid.h * grid.h / 48.0;
    for a in 0..na {
        for b in 0..na {
            k2[a * na + b] -= c * (kl[a * na + b] + kl[b * na + a]);
        }
    }
}

/// Gain integral through the factorisation
/// `Q_gain(F1, F2)(v) = int_{S^2} R_omega[F1](v) int_R |r| F2(v + r omega) dr d omega`
/// where `R_omega` is the integral over the plane through `v` orthogonal to
/// `omega`. On the lattice, `omega` runs over primitive integer directions; both
/// the plane sums and the ray sums then only touch grid nodes.
pub struct RadonPlan {
    n: usize,
    dirs: Vec<RadonDirection>,
}

struct RadonDirection {
    /// Sphere weight of the direction (Voronoi cell area, full-sphere sum 4 pi).
    weight: f64,
    /// Area per lattice point in the orthogonal plane.
    area: f64,
    /// Spacing of lattice points along the ray.
    step: f64,
    /// Plane label of each node, shifted to start at zero.
    plane: Vec<u32>,
    n_planes: usize,
    /// Node index of `j + l`, or `u32::MAX`.
    next: Vec<u32>,
    prev: Vec<u32>,
    /// Nodes ordered by decreasing `l . j`.
    order: Vec<u32>,
}

impl RadonPlan {
    pub fn new(grid: &VelocityGrid, max_component: i32) -> Self {
        let n = grid.n_per_axis;
        let h = grid.h;
        let mut half = Vec::new();
        for a in -max_component..=max_component {
            for b in -max_component..=max_component {
                for c in -max_component..=max_component {
                    let l = [a, b, c];
                    if l == [0, 0, 0] || gcd3(a, b, c) != 1 {
                        continue;
                    }
                    // keep one of each +-l pair
                    let first = l.iter().find(|&&x| x != 0).copied().unwrap();
                    if first > 0 {
                        half.push(l);
                    }
                }
            }
        }
        let weights = voronoi_weights(&half);
        let nv = grid.len();
        let dirs = half
            .iter()
            .zip(weights)
            .map(|(&l, weight)| {
                let len = ((l[0] * l[0] + l[1] * l[1] + l[2] * l[2]) as f64).sqrt();
                let mut p_min = i64::MAX;
                let mut labels = Vec::with_capacity(nv);
                for j in 0..nv {
                    let m = grid.multi_index(j);
                    let p = (0..3).map(|d| l[d] as i64 * m[d] as i64).sum::<i64>();
                    p_min = p_min.min(p);
                    labels.push(p);
                }
                let plane: Vec<u32> = labels.iter().map(|&p| (p - p_min) as u32).collect();
                let n_planes = *plane.iter().max().unwrap() as usize + 1;
                let shift = |j: usize, s: i32| -> u32 {
                    let m = grid.multi_index(j);
                    let mut t = [0usize; 3];
                    for d in 0..3 {
                        let q = m[d] as i64 + (s * l[d]) as i64;
                        if q < 0 || q >= n as i64 {
                            return u32::MAX;
                        }
                        t[d] = q as usize;
                    }
                    grid.index(t[0], t[1], t[2]) as u32
                };
                let next: Vec<u32> = (0..nv).map(|j| shift(j, 1)).collect();
                let prev: Vec<u32> = (0..nv).map(|j| shift(j, -1)).collect();
                let mut order: Vec<u32> = (0..nv as u32).collect();
                order.sort_by_key(|&j| std::cmp::Reverse(labels[j as usize]));
                RadonDirection { weight, area: h * h * len, step: h * len, plane, n_planes, next, prev, order }
            })
            .collect();
        RadonPlan { n: nv, dirs }
    }

    pub fn n_directions(&self) -> usize {
        2 * self.dirs.len()
    }

    /// `Q_gain(F1, F2)` at every node from nodal values.
    pub fn gain(&self, f1: &[f64], f2: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut out = vec![0.0; n];
        let mut s0 = vec![0.0; n];
        let mut s1f = vec![0.0; n];
        let mut s1b = vec![0.0; n];
        for d in &self.dirs {
            let mut planes = vec![0.0; d.n_planes];
            for j in 0..n {
                planes[d.plane[j] as usize] += f1[j];
            }
            // forward rays: j + l visited before j
            for &j in &d.order {
                let j = j as usize;
                let nx = d.next[j];
                if nx == u32::MAX {
                    s0[j] = 0.0;
                    s1f[j] = 0.0;
                } else {
                    let nx = nx as usize;
                    s0[j] = f2[nx] + s0[nx];
                    s1f[j] = s0[j] + s1f[nx];
                }
            }
            for &j in d.order.iter().rev() {
                let j = j as usize;
                let pv = d.prev[j];
                if pv == u32::MAX {
                    s0[j] = 0.0;
                    s1b[j] = 0.0;
                } else {
                    let pv = pv as usize;
                    s0[j] = f2[pv] + s0[pv];
                    s1b[j] = s0[j] + s1b[pv];
                }
            }
            let s2 = d.step * d.step;
            let c = 2.0 * d.weight * d.area;
            for j in 0..n {
                let ray = s2 * (s1f[j] + s1b[j]) + s2 / 6.0 * f2[j];
                out[j] += c * planes[d.plane[j] as usize] * ray;
            }
        }
        out
    }
}

fn gcd3(a: i32, b: i32, c: i32) -> i32 {
    fn gcd(a: i32, b: i32) -> i32 {
        if b == 0 {
            a.abs()
        } else {
            gcd(b, a % b)
        }
    }
    gcd(gcd(a, b), c)
}

/// Voronoi areas on the sphere of the directions `+-l`, from a dense Fibonacci
/// point set. Returns the weight of one member of each pair.
fn voronoi_weights(half: &[[i32; 3]]) -> Vec<f64> {
    let units: Vec<Vec3> = half
        .iter()
        .map(|l| {
            let v = [l[0] as f64, l[1] as f64, l[2] as f64];
            let n = norm2(v).sqrt();
            [v[0] / n, v[1] / n, v[2] / n]
        })
        .collect();
    let samples = 200_000;
    let golden = PI * (3.0 - 5f64.sqrt());
    let mut counts = vec![0usize; half.len()];
    for k in 0..samples {
        let z = 1.0 - (2.0 * k as f64 + 1.0) / samples as f64;
        let r = (1.0 - z * z).sqrt();
        let (s, c) = (golden * k as f64).sin_cos();
        let p = [r * c, r * s, z];
        let mut best = 0;
        let mut best_dot = -1.0;
        for (i, u) in units.iter().enumerate() {
            let d = (p[0] * u[0] + p[1] * u[1] + p[2] * u[2]).abs();
            if d > best_dot {
                best_dot = d;
                best = i;
            }
        }
        counts[best] += 1;
    }
    // each count covers both l and -l
    counts.iter().map(|&c| 2.0 * PI * c as f64 / samples as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collision::{AngularQuadrature, CollisionQuadrature};

    #[test]
    fn direction_sets() {
        let g = VelocityGrid::new(4.0, 8);
        assert_eq!(RadonPlan::new(&g, 1).n_directions(), 26);
        assert_eq!(RadonPlan::new(&g, 2).n_directions(), 98);
        let w = voronoi_weights(&[[1, 0, 0], [0, 1, 0], [0, 0, 1]]);
        let total: f64 = w.iter().sum::<f64>() * 2.0;
        assert!((total - 4.0 * PI).abs() < 1e-9);
        assert!((w[0] - 4.0 * PI / 6.0).abs() < 1e-2);
    }

    #[test]
    fn radon_gain_of_maxwellian() {
        let g = VelocityGrid::new(6.0, 24);
        let plan = RadonPlan::new(&g, 2);
        let m = g.sample(maxwellian);
        let q = plan.gain(&m, &m);
        for v in [[0.25, 0.25, 0.25], [1.25, -0.75, 0.25], [2.25, 0.25, -0.25]] {
            let j = g.nodes().iter().position(|&u| u == v).unwrap();
            let expect = collision_frequency_exact(v) * maxwellian(v);
            assert!((q[j] - expect).abs() < 0.03 * expect, "v={v:?} {} {expect}", q[j]);
        }
    }

    #[test]
    fn radon_gain_matches_direct_for_shifted_gaussians() {
        let g = VelocityGrid::new(6.0, 24);
        let plan = RadonPlan::new(&g, 2);
        let a = |v: Vec3| (-0.5 * norm2(sub(v, [0.5, 0.0, -0.3]))).exp() * 0.06;
        let b = |v: Vec3| (-0.6 * norm2(sub(v, [-0.4, 0.2, 0.0]))).exp() * 0.05;
        let fa = g.sample(a);
        let fb = g.sample(b);
        let q = plan.gain(&fa, &fb);
        let quad = CollisionQuadrature::new(g.clone(), AngularQuadrature::new(16, 32), KernelConstants::default());
        for v in [[0.25, 0.25, 0.25], [-0.75, 1.25, 0.25]] {
            let j = g.nodes().iter().position(|&u| u == v).unwrap();
            let direct = quad.q_gain(&a, &b, v).unwrap();
            assert!((q[j] - direct).abs() < 0.03 * direct, "v={v:?} {} {direct}", q[j]);
        }
    }

    #[test]
    fn operator_fixes_maxwellian_and_conserves_mass() {
        let g = VelocityGrid::new(5.0, 12);
        let op = GridCollisionOperator::new(&g, &KernelConstants::default(), 1);
        let nv = g.len();
        let mu = g.sample(maxwellian);
        let out = op.evaluate(&mu);
        for j in 0..nv {
            assert!((out.gain[j] - out.nu[j] * mu[j]).abs() <= 1e-12 * mu[0]);
        }
        // a perturbation: net collision mass vanishes
        let big_f: Vec<f64> = g
            .nodes()
            .iter()
            .map(|&v| maxwellian(v) * (1.0 + 0.2 * v[0] + 0.1 * (norm2(v) - 3.0) * (-0.1 * norm2(v)).exp()))
            .collect();
        let out = op.evaluate(&big_f);
        let rate: Vec<f64> = (0..nv)
            .filter(|&j| g.is_active(j))
            .map(|j| out.gain[j] - out.nu[j] * big_f[j])
            .collect();
        let scale: f64 = (0..nv).filter(|&j| g.is_active(j)).map(|j| out.gain[j].abs()).sum();
        assert!(pairwise_sum(&rate).abs() < 1e-6 * scale, "{} vs {scale}", pairwise_sum(&rate));
        // nu matches the closed form at the origin-adjacent node
        let j = g.nodes().iter().position(|&u| norm2(u) < 0.6).unwrap();
        let exact = collision_frequency_exact(g.node(j));
        assert!((op.nu_maxwellian()[j] - exact).abs() < 5e-3 * exact, "{} {exact}", op.nu_maxwellian()[j]);
    }
}
