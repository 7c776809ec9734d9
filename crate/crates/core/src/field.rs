//! Electrostatics: `-lap phi = rho - rho_0` in the domain with zero Neumann
//! data and zero mean, and evaluation of `E = -grad phi` anywhere in the closure.
//!
//! The Laplacian is a cut-cell finite-volume operator: fluxes between cells are
//! weighted by the open fraction of the shared face and no flux crosses the
//! wall, which imposes the Neumann condition.

use crate::error::{Error, Result};
use crate::math::{dot, pairwise_sum, scale, sub, Mat3, Vec3};
use crate::spatial::SpatialGrid;
use log::debug;
use rayon::prelude::*;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

/// `rho - rho_0` at the phase nodes, projected to zero mean.
#[derive(Debug, Clone)]
pub struct DensityDeviation {
    pub values: Vec<f64>,
    /// Weighted mean removed by the projection.
    pub raw_mean: f64,
}

impl DensityDeviation {
    /// Projects `values` to zero weighted mean.
    pub fn new(grid: &SpatialGrid, mut values: Vec<f64>) -> Self {
        let raw_mean = grid.integrate(&values) / grid.total_weight();
        for v in &mut values {
            *v -= raw_mean;
        }
        DensityDeviation { values, raw_mean }
    }

    pub fn zero(grid: &SpatialGrid) -> Self {
        DensityDeviation { values: vec![0.0; grid.n_nodes()], raw_mean: 0.0 }
    }
}

/// Density deviation of a perturbation `f` (phase layout: node-major, `nv`
/// velocities per node): `int f sqrt(mu) dv` at each node.
pub fn density_from_f(grid: &SpatialGrid, f: &[f64], sqrt_mu: &[f64], cell_volume: f64) -> DensityDeviation {
    let nv = sqrt_mu.len();
    let values: Vec<f64> = (0..grid.n_nodes())
        .into_par_iter()
        .map(|i| {
            let terms: Vec<f64> = f[i * nv..(i + 1) * nv].iter().zip(sqrt_mu).map(|(a, b)| a * b).collect();
            pairwise_sum(&terms) * cell_volume
        })
        .collect();
    DensityDeviation::new(grid, values)
}

/// Density deviation from the full distribution `F`: `int (F - mu) dv`.
pub fn density_from_big_f(grid: &SpatialGrid, big_f: &[f64], mu: &[f64], cell_volume: f64) -> DensityDeviation {
    let nv = mu.len();
    let values: Vec<f64> = (0..grid.n_nodes())
        .into_par_iter()
        .map(|i| {
            let terms: Vec<f64> = big_f[i * nv..(i + 1) * nv].iter().zip(mu).map(|(a, b)| a - b).collect();
            pairwise_sum(&terms) * cell_volume
        })
        .collect();
    DensityDeviation::new(grid, values)
}

/// Neumann Poisson operator on the cut cells of a [`SpatialGrid`].
pub struct PoissonSolver {
    grid: Arc<SpatialGrid>,
    /// Cells carrying an unknown.
    cells: Vec<usize>,
    slot: Vec<u32>,
    /// Row structure: `(column, coefficient)` for off-diagonal couplings.
    offsets: Vec<usize>,
    entries: Vec<(u32, f64)>,
    diag: Vec<f64>,
    pub tol: f64,
    pub max_iter: usize,
}

impl PoissonSolver {
    pub fn new(grid: Arc<SpatialGrid>, tol: f64, max_iter: usize) -> Self {
        let n_cells = grid.n_cells();
        let mut slot = vec![u32::MAX; n_cells];
        let mut cells = Vec::new();
        for c in 0..n_cells {
            if grid.is_active(c) && Self::has_open_face(&grid, c) {
                slot[c] = cells.len() as u32;
                cells.push(c);
            }
        }
        let h = grid.h;
        let mut offsets = vec![0];
        let mut entries = Vec::new();
        let mut diag = Vec::with_capacity(cells.len());
        for &c in &cells {
            let mut dsum = 0.0;
            for d in 0..3 {
                for s in [-1isize, 1] {
                    let Some(nb) = grid.neighbour(c, d, s) else { continue };
                    let ap = if s > 0 { grid.apertures[d][c] } else { grid.apertures[d][nb] };
                    if ap <= 0.0 || slot[nb] == u32::MAX {
                        continue;
                    }
                    let coef = h * ap;
                    dsum += coef;
                    entries.push((slot[nb], -coef));
                }
            }
            diag.push(dsum);
            offsets.push(entries.len());
        }
        PoissonSolver { grid, cells, slot, offsets, entries, diag, tol, max_iter }
    }

    fn has_open_face(grid: &SpatialGrid, c: usize) -> bool {
        (0..3).any(|d| {
            grid.apertures[d][c] > 0.0 || grid.neighbour(c, d, -1).is_some_and(|nb| grid.apertures[d][nb] > 0.0)
        })
    }

    pub fn grid(&self) -> &Arc<SpatialGrid> {
        &self.grid
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        y.par_iter_mut().enumerate().for_each(|(i, yi)| {
            let mut acc = self.diag[i] * x[i];
            for &(j, a) in &self.entries[self.offsets[i]..self.offsets[i + 1]] {
                acc += a * x[j as usize];
            }
            *yi = acc;
        });
    }

    /// Cell volumes `kappa h^3` of the unknowns.
    fn volumes(&self) -> Vec<f64> {
        let v = self.grid.h.powi(3);
        self.cells.iter().map(|&c| self.grid.volume_fraction[c] * v).collect()
    }

    /// Solves `-lap phi = dev` with zero Neumann data; `phi` has zero mean.
    pub fn solve(&self, dev: &DensityDeviation, time_stamp: f64) -> Result<PotentialField> {
        let grid = &self.grid;
        let vols = self.volumes();
        let mut b: Vec<f64> = self
            .cells
            .iter()
            .zip(&vols)
            .map(|(&c, &w)| w * grid.cell_value(c, &dev.values))
            .collect();
        // exact compatibility: remove the residual constant component
        let bsum = pairwise_sum(&b);
        let vsum = pairwise_sum(&vols);
        for (bi, w) in b.iter_mut().zip(&vols) {
            *bi -= bsum * w / vsum;
        }
        let bnorm = dot_n(&b, &b).sqrt();
        let n = self.cells.len();
        let mut x = vec![0.0; n];
        // sources at roundoff level are solved to an absolute floor
        let atol = 1e-14 * vsum;
        if bnorm > atol {
            let (iters, res) = self.pcg(&b, &mut x, bnorm, atol)?;
            debug!("poisson: {iters} iterations, relative residual {res:e}");
        }
        let mean = pairwise_sum(&x.iter().zip(&vols).map(|(a, w)| a * w).collect::<Vec<_>>()) / vsum;
        let mut values = vec![0.0; grid.n_cells()];
        for (k, &c) in self.cells.iter().enumerate() {
            values[c] = x[k] - mean;
        }
        Ok(PotentialField::from_cell_values(grid.clone(), values, self.slot.iter().map(|&s| s != u32::MAX).collect(), time_stamp))
    }

    fn pcg(&self, b: &[f64], x: &mut [f64], bnorm: f64, atol: f64) -> Result<(usize, f64)> {
        let target = (self.tol * bnorm).max(atol) / bnorm;
        let n = b.len();
        let mut r = b.to_vec();
        let inv: Vec<f64> = self.diag.iter().map(|&d| if d > 0.0 { 1.0 / d } else { 0.0 }).collect();
        let mut z: Vec<f64> = r.iter().zip(&inv).map(|(a, b)| a * b).collect();
        let mut p = z.clone();
        let mut ap = vec![0.0; n];
        let mut rz = dot_n(&r, &z);
        let mut best = f64::INFINITY;
        let mut since_best = 0;
        for it in 1..=self.max_iter {
            self.apply(&p, &mut ap);
            let pap = dot_n(&p, &ap);
            if pap <= 0.0 {
                break;
            }
            let alpha = rz / pap;
            for i in 0..n {
                x[i] += alpha * p[i];
                r[i] -= alpha * ap[i];
            }
            let res = dot_n(&r, &r).sqrt() / bnorm;
            if res <= target {
                return Ok((it, res));
            }
            if res < 0.5 * best {
                best = res;
                since_best = 0;
            } else {
                since_best += 1;
                if since_best > 2000 {
                    return Err(Error::SolverDiverged { iterations: it, residual: res });
                }
            }
            for i in 0..n {
                z[i] = r[i] * inv[i];
            }
            let rz_new = dot_n(&r, &z);
            let beta = rz_new / rz;
            rz = rz_new;
            for i in 0..n {
                p[i] = z[i] + beta * p[i];
            }
        }
        let res = dot_n(&r, &r).sqrt() / bnorm;
        if res <= target {
            Ok((self.max_iter, res))
        } else {
            Err(Error::SolverDiverged { iterations: self.max_iter, residual: res })
        }
    }

    /// Relative residual `|A phi - b| / |b|` of a potential against a source.
    pub fn residual(&self, phi: &PotentialField, dev: &DensityDeviation) -> f64 {
        let vols = self.volumes();
        let x: Vec<f64> = self.cells.iter().map(|&c| phi.values[c]).collect();
        let mut ax = vec![0.0; x.len()];
        self.apply(&x, &mut ax);
        let mut b: Vec<f64> =
            self.cells.iter().zip(&vols).map(|(&c, &w)| w * self.grid.cell_value(c, &dev.values)).collect();
        let bsum = pairwise_sum(&b);
        let vsum = pairwise_sum(&vols);
        for (bi, w) in b.iter_mut().zip(&vols) {
            *bi -= bsum * w / vsum;
        }
        let r: Vec<f64> = ax.iter().zip(&b).map(|(a, b)| a - b).collect();
        let bn = dot_n(&b, &b).sqrt();
        if bn == 0.0 {
            dot_n(&r, &r).sqrt()
        } else {
            dot_n(&r, &r).sqrt() / bn
        }
    }

    /// Net discrete flux through the wall implied by `phi`: the sum of all
    /// interior face fluxes telescopes, so this is `sum_i (A phi)_i`.
    pub fn boundary_flux_sum(&self, phi: &PotentialField) -> f64 {
        let x: Vec<f64> = self.cells.iter().map(|&c| phi.values[c]).collect();
        let mut ax = vec![0.0; x.len()];
        self.apply(&x, &mut ax);
        pairwise_sum(&ax)
    }
}

fn dot_n(a: &[f64], b: &[f64]) -> f64 {
    pairwise_sum(&a.iter().zip(b).map(|(x, y)| x * y).collect::<Vec<_>>())
}

/// Potential on the cell grid together with its reconstructed gradient.
#[derive(Debug, Clone)]
pub struct PotentialField {
    grid: Arc<SpatialGrid>,
    /// Per cell; zero where the cell carries no unknown.
    pub values: Vec<f64>,
    pub time_stamp: f64,
    /// `grad phi` per cell, extended two layers beyond the unknowns.
    grad: Vec<Vec3>,
    has_grad: Vec<bool>,
}

impl PotentialField {
    pub fn zero(grid: Arc<SpatialGrid>, time_stamp: f64) -> Self {
        let n = grid.n_cells();
        PotentialField { grid, values: vec![0.0; n], time_stamp, grad: vec![[0.0; 3]; n], has_grad: vec![true; n] }
    }

    /// Samples `phi` at the centres of the cells meeting the domain and
    /// reconstructs the gradient as for a solved field.
    pub fn from_fn<F: Fn(Vec3) -> f64>(grid: Arc<SpatialGrid>, phi: F, time_stamp: f64) -> Self {
        let n = grid.n_cells();
        let mask: Vec<bool> = (0..n).map(|c| grid.is_active(c)).collect();
        let values = (0..n).map(|c| if mask[c] { phi(grid.centre(c)) } else { 0.0 }).collect();
        Self::from_cell_values(grid, values, mask, time_stamp)
    }

    fn from_cell_values(grid: Arc<SpatialGrid>, values: Vec<f64>, mask: Vec<bool>, time_stamp: f64) -> Self {
        let n = grid.n_cells();
        let mut grad = vec![[0.0; 3]; n];
        let mut has_grad = vec![false; n];
        let g = &grid;
        let computed: Vec<Option<Vec3>> =
            (0..n).into_par_iter().map(|c| if mask[c] { Some(cell_gradient(g, &values, &mask, c)) } else { None }).collect();
        for c in 0..n {
            if let Some(v) = computed[c] {
                grad[c] = v;
                has_grad[c] = true;
            }
        }
        // two extension layers: average over available 26-neighbours
        for _ in 0..2 {
            let mut add = Vec::new();
            for c in 0..n {
                if has_grad[c] {
                    continue;
                }
                let m = grid.cell_multi(c);
                let mut acc = [0.0; 3];
                let mut cnt = 0.0;
                for di in -1..=1isize {
                    for dj in -1..=1isize {
                        for dk in -1..=1isize {
                            let q = [m[0] as isize + di, m[1] as isize + dj, m[2] as isize + dk];
                            if (0..3).any(|d| q[d] < 0 || q[d] >= grid.dims[d] as isize) {
                                continue;
                            }
                            let cc = grid.cell_index(q[0] as usize, q[1] as usize, q[2] as usize);
                            if has_grad[cc] {
                                for d in 0..3 {
                                    acc[d] += grad[cc][d];
                                }
                                cnt += 1.0;
                            }
                        }
                    }
                }
                if cnt > 0.0 {
                    add.push((c, scale(acc, 1.0 / cnt)));
                }
            }
            for (c, v) in add {
                grad[c] = v;
                has_grad[c] = true;
            }
        }
        PotentialField { grid, values, time_stamp, grad, has_grad }
    }

    pub fn grid(&self) -> &Arc<SpatialGrid> {
        &self.grid
    }

    /// Potential at phase node `i`.
    pub fn node_value(&self, i: usize) -> f64 {
        self.values[self.grid.phase_cells[i]]
    }

    /// `e^{-|t|} phi_0` stamped with time `t <= 0`.
    pub fn extend_negative_time(&self, t: f64) -> PotentialField {
        assert!(t <= 0.0);
        self.scaled((-t.abs()).exp(), t)
    }

    pub fn scaled(&self, s: f64, time_stamp: f64) -> PotentialField {
        PotentialField {
            grid: self.grid.clone(),
            values: self.values.iter().map(|v| v * s).collect(),
            time_stamp,
            grad: self.grad.iter().map(|g| scale(*g, s)).collect(),
            has_grad: self.has_grad.clone(),
        }
    }

    /// `(1 - w) a + w b` for fields on the same grid.
    pub fn lerp(a: &PotentialField, b: &PotentialField, w: f64, time_stamp: f64) -> PotentialField {
        PotentialField {
            grid: a.grid.clone(),
            values: a.values.iter().zip(&b.values).map(|(x, y)| (1.0 - w) * x + w * y).collect(),
            time_stamp,
            grad: a
                .grad
                .iter()
                .zip(&b.grad)
                .map(|(x, y)| [(1.0 - w) * x[0] + w * y[0], (1.0 - w) * x[1] + w * y[1], (1.0 - w) * x[2] + w * y[2]])
                .collect(),
            has_grad: a.has_grad.iter().zip(&b.has_grad).map(|(x, y)| *x && *y).collect(),
        }
    }

    /// `E = -grad phi` at `x`, which must lie in the closed domain.
    pub fn eval_field(&self, x: Vec3) -> Result<Vec3> {
        let d = &self.grid.domain;
        if d.level(x) > 1e-9 * (1.0 + crate::math::norm(d.grad_level(x))) {
            return Err(Error::OutsideDomain(x));
        }
        Ok(self.field_at(x))
    }

    /// `E` without the domain check; used by integrators whose stages may
    /// step marginally outside.
    pub fn field_at(&self, x: Vec3) -> Vec3 {
        let g = self.interpolated_gradient(self.grid.locate(x));
        self.wall_corrected(x, [-g[0], -g[1], -g[2]])
    }

    /// `(1 - w) E_a + w E_b` at `x` for fields on the same grid, sharing the
    /// cell lookup and wall geometry between the two.
    pub fn blended_field_at(a: &PotentialField, b: &PotentialField, w: f64, x: Vec3) -> Vec3 {
        let loc = a.grid.locate(x);
        let ga = a.interpolated_gradient(loc);
        let gb = b.interpolated_gradient(loc);
        let e = std::array::from_fn(|d| -(1.0 - w) * ga[d] - w * gb[d]);
        a.wall_corrected(x, e)
    }

    /// Removes the normal component of `e` across the last cell before the wall.
    #[inline]
    fn wall_corrected(&self, x: Vec3, e: Vec3) -> Vec3 {
        let dom = &self.grid.domain;
        let gl = dom.grad_level(x);
        let gn = crate::math::norm(gl);
        if gn > 1e-12 {
            let dist = -dom.level(x) / gn;
            let w = (1.0 - dist / self.grid.h).clamp(0.0, 1.0);
            if w > 0.0 {
                let n = scale(gl, 1.0 / gn);
                return sub(e, scale(n, w * dot(e, n)));
            }
        }
        e
    }

    #[inline]
    fn interpolated_gradient(&self, (b, t): ([isize; 3], [f64; 3])) -> Vec3 {
        let mut acc = [0.0; 3];
        let mut wsum = 0.0;
        for c in 0..8 {
            let o = [(c >> 2) & 1, (c >> 1) & 1, c & 1];
            let m = [b[0] + o[0] as isize, b[1] + o[1] as isize, b[2] + o[2] as isize];
            if (0..3).any(|d| m[d] < 0 || m[d] >= self.grid.dims[d] as isize) {
                continue;
            }
            let cell = self.grid.clamped_cell(m);
            if !self.has_grad[cell] {
                continue;
            }
            let mut w = 1.0;
            for d in 0..3 {
                w *= if o[d] == 1 { t[d] } else { 1.0 - t[d] };
            }
            for d in 0..3 {
                acc[d] += w * self.grad[cell][d];
            }
            wsum += w;
        }
        if wsum <= 1e-14 {
            return [0.0; 3];
        }
        scale(acc, 1.0 / wsum)
    }

    /// `grad E` at `x` by central differences of [`field_at`](Self::field_at).
    pub fn field_gradient_at(&self, x: Vec3) -> Mat3 {
        let eps = 1e-4 * self.grid.h;
        let mut m = [[0.0; 3]; 3];
        for j in 0..3 {
            let mut xp = x;
            let mut xm = x;
            xp[j] += eps;
            xm[j] -= eps;
            let ep = self.field_at(xp);
            let em = self.field_at(xm);
            for i in 0..3 {
                m[i][j] = (ep[i] - em[i]) / (2.0 * eps);
            }
        }
        m
    }

    /// `max |grad phi|` over the phase nodes.
    pub fn grad_sup(&self) -> f64 {
        self.grid
            .phase_cells
            .iter()
            .map(|&c| crate::math::norm(self.grad[c]))
            .fold(0.0, f64::max)
    }

    /// True if the reconstructed gradient vanishes everywhere.
    pub fn is_identically_zero(&self) -> bool {
        self.grad.iter().all(|g| g[0] == 0.0 && g[1] == 0.0 && g[2] == 0.0)
    }

    /// `max |phi|` over the phase nodes.
    pub fn sup(&self) -> f64 {
        self.grid.phase_cells.iter().map(|&c| self.values[c].abs()).fold(0.0, f64::max)
    }

    /// Writes `<stem>.bin` (little-endian f64 per cell, x-major) and a text
    /// sidecar `<stem>.txt` with shape, bounding box and time stamp.
    pub fn write_snapshot(&self, stem: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(8 * self.values.len());
        for v in &self.values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(stem.with_extension("bin"), bytes)?;
        let g = &self.grid;
        let hi = [
            g.lo[0] + g.dims[0] as f64 * g.h,
            g.lo[1] + g.dims[1] as f64 * g.h,
            g.lo[2] + g.dims[2] as f64 * g.h,
        ];
        let mut f = std::fs::File::create(stem.with_extension("txt"))?;
        writeln!(f, "shape = [{}, {}, {}]", g.dims[0], g.dims[1], g.dims[2])?;
        writeln!(f, "bbox_lo = [{:e}, {:e}, {:e}]", g.lo[0], g.lo[1], g.lo[2])?;
        writeln!(f, "bbox_hi = [{:e}, {:e}, {:e}]", hi[0], hi[1], hi[2])?;
        writeln!(f, "time_stamp = {:e}", self.time_stamp)?;
        writeln!(f, "layout = \"f64 little-endian, index (i * ny + j) * nz + k, cell centres\"")?;
        Ok(())
    }
}

/// Reads a snapshot written by [`PotentialField::write_snapshot`]; returns the
/// per-cell values and the time stamp.
pub fn read_snapshot(stem: &Path) -> Result<(Vec<f64>, f64)> {
    let bytes = std::fs::read(stem.with_extension("bin"))?;
    let values = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let text = std::fs::read_to_string(stem.with_extension("txt"))?;
    let t = text
        .lines()
        .find_map(|l| l.strip_prefix("time_stamp = "))
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| Error::ParseError("snapshot sidecar lacks time_stamp".into()))?;
    Ok((values, t))
}

/// Gradient at cell `c`: central differences where both neighbours along an
/// axis carry values, otherwise a least-squares linear fit over the 3x3x3 block.
fn cell_gradient(grid: &SpatialGrid, values: &[f64], mask: &[bool], c: usize) -> Vec3 {
    let h = grid.h;
    let mut g = [0.0; 3];
    let mut interior = true;
    for d in 0..3 {
        match (grid.neighbour(c, d, -1), grid.neighbour(c, d, 1)) {
            (Some(a), Some(b)) if mask[a] && mask[b] && grid.volume_fraction[c] >= 1.0 => {
                g[d] = (values[b] - values[a]) / (2.0 * h);
            }
            _ => interior = false,
        }
    }
    if interior {
        return g;
    }
    let m = grid.cell_multi(c);
    let mut ata = [[0.0; 3]; 3];
    let mut atb = [0.0; 3];
    for di in -1..=1isize {
        for dj in -1..=1isize {
            for dk in -1..=1isize {
                if di == 0 && dj == 0 && dk == 0 {
                    continue;
                }
                let q = [m[0] as isize + di, m[1] as isize + dj, m[2] as isize + dk];
                if (0..3).any(|d| q[d] < 0 || q[d] >= grid.dims[d] as isize) {
                    continue;
                }
                let cc = grid.cell_index(q[0] as usize, q[1] as usize, q[2] as usize);
                if !mask[cc] {
                    continue;
                }
                let dx = [di as f64 * h, dj as f64 * h, dk as f64 * h];
                let w = 1.0 / (di * di + dj * dj + dk * dk) as f64;
                let dv = values[cc] - values[c];
                for a in 0..3 {
                    atb[a] += w * dx[a] * dv;
                    for b in 0..3 {
                        ata[a][b] += w * dx[a] * dx[b];
                    }
                }
            }
        }
    }
    solve3(ata, atb).unwrap_or([0.0; 3])
}

fn solve3(a: Mat3, b: Vec3) -> Option<Vec3> {
    let det = crate::math::det3(&a);
    if det.abs() < 1e-300 {
        return None;
    }
    let mut x = [0.0; 3];
    for k in 0..3 {
        let mut m = a;
        for i in 0..3 {
            m[i][k] = b[i];
        }
        x[k] = crate::math::det3(&m) / det;
    }
    Some(x)
}
