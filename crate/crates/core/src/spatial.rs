//! Cartesian cell grid over the domain's bounding box, with cut-cell data.
//!
//! Cells are cubes of side `h`. A cell whose centre lies in the domain carries a
//! phase-space node. Every cell that meets the domain (volume fraction > 0) is
//! an unknown of the Poisson problem; those whose centre lies outside borrow
//! their density from the nearest phase nodes.

use crate::geometry::ConvexDomain;
use crate::math::{gauss_legendre_on, norm2, sub, Vec3};
use rayon::prelude::*;

/// Volume fractions below this are treated as empty.
const MIN_FRACTION: f64 = 1e-12;
/// Gauss points per direction for cut-cell volumes and face apertures.
const CUT_ORDER: usize = 12;

/// Up to eight phase nodes with interpolation weights summing to one.
#[derive(Debug, Clone, Copy)]
pub struct Stencil {
    pub nodes: [u32; 8],
    pub weights: [f64; 8],
    pub len: usize,
}

impl Stencil {
    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.nodes[..self.len].iter().zip(&self.weights[..self.len]).map(|(&n, &w)| (n as usize, w))
    }
}

#[derive(Debug, Clone)]
pub struct SpatialGrid {
    pub domain: ConvexDomain,
    pub dims: [usize; 3],
    pub lo: Vec3,
    pub h: f64,
    /// Volume fraction of each cell inside the domain.
    pub volume_fraction: Vec<f64>,
    /// Open fraction of the face between cell `c` and its `+e_d` neighbour.
    pub apertures: [Vec<f64>; 3],
    /// Cells whose centre lies inside the domain.
    pub phase_cells: Vec<usize>,
    /// Phase node of a cell, or `u32::MAX`.
    pub node_of_cell: Vec<u32>,
    /// Phase nodes supplying the density of each cell meeting the domain,
    /// with weights summing to one. Empty for cells outside.
    pub sources: Vec<Vec<(u32, f64)>>,
    /// Integration weight of each phase node: its own cut volume plus the
    /// volume of cells that borrow from it.
    pub node_weights: Vec<f64>,
}

impl SpatialGrid {
    /// Grid with `n` cells along the longest bounding-box axis.
    pub fn new(domain: &ConvexDomain, n: usize) -> Self {
        assert!(n >= 2);
        let (blo, bhi) = domain.bbox();
        let ext = sub(bhi, blo);
        let h = ext.iter().cloned().fold(0.0, f64::max) / n as f64;
        let mut dims = [0usize; 3];
        let mut lo = [0.0; 3];
        for d in 0..3 {
            dims[d] = ((ext[d] / h) - 1e-9).ceil().max(1.0) as usize;
            // centre the box
            lo[d] = 0.5 * (blo[d] + bhi[d]) - 0.5 * dims[d] as f64 * h;
        }
        let n_cells = dims[0] * dims[1] * dims[2];
        let mut g = SpatialGrid {
            domain: domain.clone(),
            dims,
            lo,
            h,
            volume_fraction: vec![0.0; n_cells],
            apertures: [vec![0.0; n_cells], vec![0.0; n_cells], vec![0.0; n_cells]],
            phase_cells: Vec::new(),
            node_of_cell: vec![u32::MAX; n_cells],
            sources: vec![Vec::new(); n_cells],
            node_weights: Vec::new(),
        };
        g.volume_fraction = (0..n_cells).into_par_iter().map(|c| g.cut_volume(c)).collect();
        for d in 0..3 {
            g.apertures[d] = (0..n_cells).into_par_iter().map(|c| g.cut_face(c, d)).collect();
        }
        for c in 0..n_cells {
            if domain.level(g.centre(c)) < 0.0 {
                g.node_of_cell[c] = g.phase_cells.len() as u32;
                g.phase_cells.push(c);
            }
        }
        g.node_weights = vec![0.0; g.phase_cells.len()];
        let cell_vol = h * h * h;
        for c in 0..n_cells {
            if g.volume_fraction[c] <= MIN_FRACTION {
                continue;
            }
            let src = if g.node_of_cell[c] != u32::MAX { vec![(g.node_of_cell[c], 1.0)] } else { g.nearest_nodes(c) };
            for &(node, w) in &src {
                g.node_weights[node as usize] += w * g.volume_fraction[c] * cell_vol;
            }
            g.sources[c] = src;
        }
        g
    }

    pub fn n_cells(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    /// Number of phase nodes.
    pub fn n_nodes(&self) -> usize {
        self.phase_cells.len()
    }

    #[inline]
    pub fn cell_index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    #[inline]
    pub fn cell_multi(&self, c: usize) -> [usize; 3] {
        let [_, ny, nz] = self.dims;
        [c / (ny * nz), (c / nz) % ny, c % nz]
    }

    #[inline]
    pub fn centre(&self, c: usize) -> Vec3 {
        let m = self.cell_multi(c);
        [
            self.lo[0] + (m[0] as f64 + 0.5) * self.h,
            self.lo[1] + (m[1] as f64 + 0.5) * self.h,
            self.lo[2] + (m[2] as f64 + 0.5) * self.h,
        ]
    }

    /// Position of phase node `i`.
    #[inline]
    pub fn node_position(&self, i: usize) -> Vec3 {
        self.centre(self.phase_cells[i])
    }

    /// Neighbour of cell `c` shifted by `s` along axis `d`.
    #[inline]
    pub fn neighbour(&self, c: usize, d: usize, s: isize) -> Option<usize> {
        let mut m = self.cell_multi(c);
        let q = m[d] as isize + s;
        if q < 0 || q >= self.dims[d] as isize {
            return None;
        }
        m[d] = q as usize;
        Some(self.cell_index(m[0], m[1], m[2]))
    }

    /// Lower cell-centre multi-index and fractional offsets for trilinear
    /// interpolation at `x` (indices may be -1 or `dims`).
    #[inline]
    pub fn locate(&self, x: Vec3) -> ([isize; 3], [f64; 3]) {
        let mut b = [0isize; 3];
        let mut t = [0.0; 3];
        for d in 0..3 {
            let p = (x[d] - self.lo[d]) / self.h - 0.5;
            let f = p.floor();
            b[d] = f as isize;
            t[d] = p - f;
        }
        (b, t)
    }

    /// Trilinear weights at `x` over the surrounding phase nodes, renormalized
    /// over those that exist. Falls back to the nearest phase node within two
    /// cells when none of the eight corners carries one.
    pub fn stencil(&self, x: Vec3) -> Stencil {
        let (b, t) = self.locate(x);
        let mut st = Stencil { nodes: [0; 8], weights: [0.0; 8], len: 0 };
        let mut total = 0.0;
        for c in 0..8 {
            let o = [(c >> 2) & 1, (c >> 1) & 1, c & 1];
            let m = [b[0] + o[0] as isize, b[1] + o[1] as isize, b[2] + o[2] as isize];
            if (0..3).any(|d| m[d] < 0 || m[d] >= self.dims[d] as isize) {
                continue;
            }
            let node = self.node_of_cell[self.cell_index(m[0] as usize, m[1] as usize, m[2] as usize)];
            if node == u32::MAX {
                continue;
            }
            let mut w = 1.0;
            for d in 0..3 {
                w *= if o[d] == 1 { t[d] } else { 1.0 - t[d] };
            }
            if w > 0.0 {
                st.nodes[st.len] = node;
                st.weights[st.len] = w;
                st.len += 1;
                total += w;
            }
        }
        if total > 1e-12 {
            for w in &mut st.weights[..st.len] {
                *w /= total;
            }
            return st;
        }
        let mut best = (f64::INFINITY, u32::MAX);
        for di in -2..=3isize {
            for dj in -2..=3isize {
                for dk in -2..=3isize {
                    let m = [b[0] + di, b[1] + dj, b[2] + dk];
                    if (0..3).any(|d| m[d] < 0 || m[d] >= self.dims[d] as isize) {
                        continue;
                    }
                    let cell = self.cell_index(m[0] as usize, m[1] as usize, m[2] as usize);
                    let node = self.node_of_cell[cell];
                    if node != u32::MAX {
                        let d2 = norm2(sub(self.centre(cell), x));
                        if d2 < best.0 {
                            best = (d2, node);
                        }
                    }
                }
            }
        }
        assert!(best.1 != u32::MAX, "no phase node near {x:?}");
        st.nodes[0] = best.1;
        st.weights[0] = 1.0;
        st.len = 1;
        st
    }

    /// Cell index of a (possibly out-of-range) multi-index, clamped to the box.
    #[inline]
    pub fn clamped_cell(&self, m: [isize; 3]) -> usize {
        let c = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
        self.cell_index(c(m[0], self.dims[0]), c(m[1], self.dims[1]), c(m[2], self.dims[2]))
    }

    /// Sum of phase-node weights; approximates the domain volume.
    pub fn total_weight(&self) -> f64 {
        crate::math::pairwise_sum(&self.node_weights)
    }

    /// Weighted integral of per-node values.
    pub fn integrate(&self, values: &[f64]) -> f64 {
        let terms: Vec<f64> = values.iter().zip(&self.node_weights).map(|(v, w)| v * w).collect();
        crate::math::pairwise_sum(&terms)
    }

    fn cell_lo(&self, c: usize) -> Vec3 {
        let m = self.cell_multi(c);
        [
            self.lo[0] + m[0] as f64 * self.h,
            self.lo[1] + m[1] as f64 * self.h,
            self.lo[2] + m[2] as f64 * self.h,
        ]
    }

    /// Length of `[a, a + h]` covered by the domain's chord along axis `d`
    /// through `p`.
    fn covered(&self, p: Vec3, d: usize, a: f64) -> f64 {
        let mut e = [0.0; 3];
        e[d] = 1.0;
        let mut q = p;
        q[d] = 0.0;
        match self.domain.chord(q, e) {
            Some((t0, t1)) => (t1.min(a + self.h) - t0.max(a)).max(0.0),
            None => 0.0,
        }
    }

    fn corners_inside(&self, lo: Vec3, dims: [bool; 3]) -> bool {
        for c in 0..8 {
            let o = [(c >> 2) & 1, (c >> 1) & 1, c & 1];
            let mut p = lo;
            for d in 0..3 {
                if dims[d] {
                    p[d] += o[d] as f64 * self.h;
                } else if o[d] == 1 {
                    // flat direction, corner duplicated
                    continue;
                }
            }
            if self.domain.level(p) >= 0.0 {
                return false;
            }
        }
        true
    }

    fn cut_volume(&self, c: usize) -> f64 {
        let lo = self.cell_lo(c);
        if self.corners_inside(lo, [true; 3]) {
            return 1.0;
        }
        let h = self.h;
        // reject cells far outside cheaply
        let centre = self.centre(c);
        let p = self.domain.project_to_boundary(centre);
        if self.domain.level(centre) > 0.0 && norm2(sub(p, centre)) > 3.0 * h * h {
            return 0.0;
        }
        let rule = gauss_legendre_on(CUT_ORDER, 0.0, h);
        // average over the three chord directions so the result respects
        // coordinate permutations of the domain
        let mut acc = 0.0;
        for d in 0..3 {
            let (a1, a2) = ((d + 1) % 3, (d + 2) % 3);
            for &(y, wy) in &rule {
                for &(z, wz) in &rule {
                    let mut p = [0.0; 3];
                    p[a1] = lo[a1] + y;
                    p[a2] = lo[a2] + z;
                    acc += wy * wz * self.covered(p, d, lo[d]);
                }
            }
        }
        acc / (3.0 * h * h * h)
    }

    /// Aperture of the face at the `+e_d` side of cell `c`.
    fn cut_face(&self, c: usize, d: usize) -> f64 {
        let mut lo = self.cell_lo(c);
        lo[d] += self.h;
        let mut flat = [true; 3];
        flat[d] = false;
        if self.corners_inside(lo, flat) {
            return 1.0;
        }
        let h = self.h;
        let (a1, a2) = ((d + 1) % 3, (d + 2) % 3);
        let rule = gauss_legendre_on(CUT_ORDER, 0.0, h);
        let mut acc = 0.0;
        for &(s, ws) in &rule {
            let mut p = lo;
            p[a1] += s;
            acc += ws * self.covered(p, a2, lo[a2]);
            let mut p = lo;
            p[a2] += s;
            acc += ws * self.covered(p, a1, lo[a1]);
        }
        acc / (2.0 * h * h)
    }

    /// Nearest phase nodes of an orphan cell; ties share the cell equally so
    /// the assignment respects the symmetries of the grid.
    fn nearest_nodes(&self, c: usize) -> Vec<(u32, f64)> {
        let x = self.centre(c);
        let m = self.cell_multi(c);
        let mut found: Vec<(f64, u32)> = Vec::new();
        for r in 1..4isize {
            for di in -r..=r {
                for dj in -r..=r {
                    for dk in -r..=r {
                        let q = [m[0] as isize + di, m[1] as isize + dj, m[2] as isize + dk];
                        if (0..3).any(|d| q[d] < 0 || q[d] >= self.dims[d] as isize) {
                            continue;
                        }
                        let cc = self.cell_index(q[0] as usize, q[1] as usize, q[2] as usize);
                        let node = self.node_of_cell[cc];
                        if node != u32::MAX && !found.iter().any(|f| f.1 == node) {
                            found.push((norm2(sub(self.centre(cc), x)), node));
                        }
                    }
                }
            }
            if !found.is_empty() {
                break;
            }
        }
        let best = found.iter().map(|f| f.0).fold(f64::INFINITY, f64::min);
        let tied: Vec<u32> = found.iter().filter(|f| f.0 <= best * (1.0 + 1e-9)).map(|f| f.1).collect();
        let w = 1.0 / tied.len() as f64;
        tied.into_iter().map(|n| (n, w)).collect()
    }

    /// Whether cell `c` meets the domain and has a density source.
    #[inline]
    pub fn is_active(&self, c: usize) -> bool {
        !self.sources[c].is_empty()
    }

    /// Density of cell `c` given per-node values.
    #[inline]
    pub fn cell_value(&self, c: usize, node_values: &[f64]) -> f64 {
        self.sources[c].iter().map(|&(n, w)| w * node_values[n as usize]).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn weights_sum_to_volume() {
        let d = ConvexDomain::unit_ball();
        let g = SpatialGrid::new(&d, 16);
        let vol: f64 = g.volume_fraction.iter().sum::<f64>() * g.h.powi(3);
        assert!((vol - 4.0 * PI / 3.0).abs() < 1e-4 * vol, "{vol}");
        assert!((g.total_weight() - vol).abs() < 1e-10);
        let e = ConvexDomain::ellipsoid([2.0, 1.0, 1.0]);
        let g = SpatialGrid::new(&e, 24);
        assert_eq!(g.dims, [24, 12, 12]);
        assert!((g.total_weight() - 8.0 * PI / 3.0).abs() < 1e-3);
    }

    #[test]
    fn ball_grid_has_expected_node_count() {
        let g = SpatialGrid::new(&ConvexDomain::unit_ball(), 16);
        // cell centres strictly inside the unit ball
        assert!(g.n_nodes() > 2000 && g.n_nodes() < 2300, "{}", g.n_nodes());
        for i in 0..g.n_nodes() {
            assert!(g.domain.level(g.node_position(i)) < 0.0);
        }
    }

    #[test]
    fn apertures_satisfy_discrete_divergence_theorem() {
        // for a constant field e_d the net flux through a cell's faces equals
        // minus the boundary flux, whose sum over all cells vanishes
        let g = SpatialGrid::new(&ConvexDomain::ellipsoid([1.0, 0.8, 0.6]), 20);
        for d in 0..3 {
            let mut net = 0.0;
            for c in 0..g.n_cells() {
                let lower = g.neighbour(c, d, -1).map_or(0.0, |l| g.apertures[d][l]);
                net += g.apertures[d][c] - lower;
            }
            assert!(net.abs() < 1e-9, "{net}");
        }
    }
}
