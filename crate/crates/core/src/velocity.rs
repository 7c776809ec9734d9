//! Uniform cell-centred tensor grid on `[-v_max, v_max]^3`.

use crate::math::{norm2, Vec3};

#[derive(Debug, Clone, PartialEq)]
pub struct VelocityGrid {
    pub v_max: f64,
    pub n_per_axis: usize,
    /// Grid spacing.
    pub h: f64,
    pub cell_volume: f64,
    nodes: Vec<Vec3>,
}

impl VelocityGrid {
    pub fn new(v_max: f64, n_per_axis: usize) -> Self {
        assert!(v_max > 0.0 && n_per_axis >= 2);
        let h = 2.0 * v_max / n_per_axis as f64;
        let mut nodes = Vec::with_capacity(n_per_axis.pow(3));
        for i in 0..n_per_axis {
            for j in 0..n_per_axis {
                for k in 0..n_per_axis {
                    nodes.push([Self::coord(v_max, h, i), Self::coord(v_max, h, j), Self::coord(v_max, h, k)]);
                }
            }
        }
        VelocityGrid { v_max, n_per_axis, h, cell_volume: h * h * h, nodes }
    }

    #[inline]
    fn coord(v_max: f64, h: f64, i: usize) -> f64 {
        -v_max + (i as f64 + 0.5) * h
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    #[inline]
    pub fn node(&self, idx: usize) -> Vec3 {
        self.nodes[idx]
    }

    pub fn nodes(&self) -> &[Vec3] {
        &self.nodes
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.n_per_axis + j) * self.n_per_axis + k
    }

    #[inline]
    pub fn multi_index(&self, idx: usize) -> [usize; 3] {
        let n = self.n_per_axis;
        [idx / (n * n), (idx / n) % n, idx % n]
    }

    /// Index of the node mirrored through the origin.
    #[inline]
    pub fn mirror(&self, idx: usize) -> usize {
        let n = self.n_per_axis;
        let [i, j, k] = self.multi_index(idx);
        self.index(n - 1 - i, n - 1 - j, n - 1 - k)
    }

    /// Nodes inside the ball `|v| <= v_max`, where collision sums are carried out.
    pub fn is_active(&self, idx: usize) -> bool {
        norm2(self.nodes[idx]) <= self.v_max * self.v_max
    }

    /// Lower corner index and fractional offsets for multilinear interpolation.
    /// Returns `None` when `v` lies beyond the outermost node centres by more
    /// than one cell (all weights would vanish).
    #[inline]
    pub fn locate(&self, v: Vec3) -> Option<([isize; 3], [f64; 3])> {
        let mut base = [0isize; 3];
        let mut frac = [0.0; 3];
        let n = self.n_per_axis as isize;
        for d in 0..3 {
            let p = (v[d] + self.v_max) / self.h - 0.5;
            let f = p.floor();
            let b = f as isize;
            if b < -1 || b >= n {
                return None;
            }
            base[d] = b;
            frac[d] = p - f;
        }
        Some((base, frac))
    }

    /// Trilinear interpolation of nodal `values`, zero outside the node lattice.
    pub fn interpolate(&self, values: &[f64], v: Vec3) -> f64 {
        let Some((b, t)) = self.locate(v) else { return 0.0 };
        let n = self.n_per_axis as isize;
        let mut acc = 0.0;
        for c in 0..8 {
            let o = [(c >> 2) & 1, (c >> 1) & 1, c & 1];
            let idx = [b[0] + o[0] as isize, b[1] + o[1] as isize, b[2] + o[2] as isize];
            if idx.iter().any(|&i| i < 0 || i >= n) {
                continue;
            }
            let mut w = 1.0;
            for d in 0..3 {
                w *= if o[d] == 1 { t[d] } else { 1.0 - t[d] };
            }
            if w != 0.0 {
                acc += w * values[self.index(idx[0] as usize, idx[1] as usize, idx[2] as usize)];
            }
        }
        acc
    }

    /// Midpoint quadrature of nodal values.
    pub fn integrate(&self, values: &[f64]) -> f64 {
        crate::math::pairwise_sum(values) * self.cell_volume
    }

    /// Seven-point Laplacian of nodal values, zero outside the lattice.
    pub fn laplacian(&self, values: &[f64]) -> Vec<f64> {
        let n = self.n_per_axis;
        let inv = 1.0 / (self.h * self.h);
        (0..self.len())
            .map(|j| {
                let m = self.multi_index(j);
                let mut acc = -6.0 * values[j];
                for d in 0..3 {
                    if m[d] > 0 {
                        let mut t = m;
                        t[d] -= 1;
                        acc += values[self.index(t[0], t[1], t[2])];
                    }
                    if m[d] + 1 < n {
                        let mut t = m;
                        t[d] += 1;
                        acc += values[self.index(t[0], t[1], t[2])];
                    }
                }
                acc * inv
            })
            .collect()
    }

    pub fn sample<F: Fn(Vec3) -> f64>(&self, f: F) -> Vec<f64> {
        self.nodes.iter().map(|&v| f(v)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nodes_are_symmetric() {
        let g = VelocityGrid::new(6.0, 24);
        for idx in 0..g.len() {
            let v = g.node(idx);
            let m = g.node(g.mirror(idx));
            for d in 0..3 {
                assert!((v[d] + m[d]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn interpolation_reproduces_linear_functions() {
        let g = VelocityGrid::new(4.0, 10);
        let vals = g.sample(|v| 1.0 + 2.0 * v[0] - v[1] + 0.5 * v[2]);
        let v = [0.33, -1.7, 2.1];
        let exact = 1.0 + 2.0 * v[0] - v[1] + 0.5 * v[2];
        assert!((g.interpolate(&vals, v) - exact).abs() < 1e-12);
        assert_eq!(g.interpolate(&vals, [10.0, 0.0, 0.0]), 0.0);
    }
}
