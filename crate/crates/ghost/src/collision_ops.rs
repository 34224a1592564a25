//! Discrete linearised collision operators in Maxwellian-weighted coefficient
//! form: a velocity function `f` stands for the density `M f`, and the inner
//! product is `<f, g> = sum w M f g`.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, GhostError, Result};
use crate::linalg::norm2;
use crate::velocity_space::{evaluate_maxwellian, invariants, MaxwellianState, VelocityGrid};

/// Largest node count for which a dense matrix is materialised.
pub const DENSE_NODE_LIMIT: usize = 4913;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelTag {
    Bgk,
    HardSphereSampled,
    AugmentedTheta,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum BgkRate {
    /// `nu(v) = rate`
    Constant(f64),
    /// `nu(v) = rate (1 + |v - u|) / (1 + <|v - u|>)`
    Variable(f64),
}

#[derive(Clone, Debug)]
pub enum Kernel {
    /// `L f = -nu f + sum_r a_r <b_r, f>`
    LowRank { a: Vec<Vec<f64>>, b: Vec<Vec<f64>> },
    /// Full matrix of `L` in coefficient form.
    Dense(DMatrix<f64>),
}

#[derive(Clone, Debug)]
pub struct DiscreteOperator {
    pub tag: ModelTag,
    pub grid: Arc<VelocityGrid>,
    pub state: MaxwellianState,
    pub maxwellian: Vec<f64>,
    /// quadrature weight times Maxwellian
    pub wm: Vec<f64>,
    pub nu: Vec<f64>,
    pub kernel: Kernel,
    /// orthonormal basis of the collision invariants
    pub null_basis: Vec<Vec<f64>>,
    /// `nu_0 (1+|v|) <= nu <= nu_1 (1+|v|)` on the grid
    pub nu_bounds: (f64, f64),
    /// relative Frobenius size of the symmetrisation and projection cleanup
    pub cleanup_norm: f64,
    pub theta: f64,
    solver: OnceLock<ComplementSolver>,
}

#[derive(Clone, Debug)]
enum ComplementSolver {
    Woodbury { u: Vec<Vec<f64>>, v: Vec<Vec<f64>>, cap_inv: DMatrix<f64> },
    Lu(nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>),
}

fn weighted_basis(grid: &VelocityGrid, wm: &[f64], weight: &[f64], state: &MaxwellianState) -> Result<Vec<Vec<f64>>> {
    let raw = invariants(grid, state.velocity[0]);
    let ww: Vec<f64> = wm.iter().zip(weight).map(|(a, b)| a * b).collect();
    let ip = |f: &[f64], g: &[f64]| -> f64 { f.iter().zip(g).zip(&ww).map(|((a, b), c)| a * b * c).sum() };
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(5);
    for mut v in raw.into_iter() {
        for _ in 0..2 {
            for e in &basis {
                let c = ip(&v, e);
                for (vi, ei) in v.iter_mut().zip(e) {
                    *vi -= c * ei;
                }
            }
        }
        let nrm = ip(&v, &v).sqrt();
        if !(nrm > 1e-12) {
            return Err(GhostError::Numerical("collision invariants are degenerate on this grid".into()));
        }
        for vi in &mut v {
            *vi /= nrm;
        }
        basis.push(v);
    }
    Ok(basis)
}

fn nu_bounds(grid: &VelocityGrid, nu: &[f64], state: &MaxwellianState) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = 0.0f64;
    for i in 0..grid.len() {
        let c = peculiar_speed(grid, i, state);
        let r = nu[i] / (1.0 + c);
        lo = lo.min(r);
        hi = hi.max(r);
    }
    (lo, hi)
}

fn peculiar_speed(grid: &VelocityGrid, i: usize, state: &MaxwellianState) -> f64 {
    ((grid.vx[i] - state.velocity[0]).powi(2) + (grid.vy[i] - state.velocity[1]).powi(2) + (grid.vz[i] - state.velocity[2]).powi(2)).sqrt()
}

/// BGK relaxation linearised about `state`: `L f = -nu (f - P_nu f)`, where
/// `P_nu` projects onto the invariants orthogonally in the `nu`-weighted product.
pub fn build_bgk(grid: Arc<VelocityGrid>, rate: BgkRate, state: MaxwellianState) -> Result<DiscreteOperator> {
    let maxwellian = evaluate_maxwellian(&state, &grid);
    let wm: Vec<f64> = grid.weights.iter().zip(&maxwellian).map(|(w, m)| w * m).collect();
    let ones = vec![1.0; grid.len()];
    let null_basis = weighted_basis(&grid, &wm, &ones, &state)?;
    let (nu, kernel) = match rate {
        BgkRate::Constant(r) => {
            if !(r > 0.0) {
                return Err(invalid("rate", format!("must be positive, got {r}")));
            }
            let a = null_basis.iter().map(|e| e.iter().map(|x| r * x).collect()).collect();
            (vec![r; grid.len()], Kernel::LowRank { a, b: null_basis.clone() })
        }
        BgkRate::Variable(r) => {
            if !(r > 0.0) {
                return Err(invalid("rate", format!("must be positive, got {r}")));
            }
            let mean_speed = (8.0 * state.temperature / std::f64::consts::PI).sqrt();
            let nu: Vec<f64> = (0..grid.len()).map(|i| r * (1.0 + peculiar_speed(&grid, i, &state)) / (1.0 + mean_speed)).collect();
            let enu = weighted_basis(&grid, &wm, &nu, &state)?;
            let a: Vec<Vec<f64>> = enu.iter().map(|e| e.iter().zip(&nu).map(|(x, n)| x * n).collect()).collect();
            (nu, Kernel::LowRank { a: a.clone(), b: a })
        }
    };
    let nb = nu_bounds(&grid, &nu, &state);
    Ok(DiscreteOperator {
        tag: ModelTag::Bgk,
        grid,
        state,
        maxwellian,
        wm,
        nu,
        kernel,
        null_basis,
        nu_bounds: nb,
        cleanup_norm: 0.0,
        theta: 0.0,
        solver: OnceLock::new(),
    })
}

/// Collision frequency of hard spheres against the standard Maxwellian,
/// `pi * int |v - w| M(w) dw`.
pub fn hard_sphere_frequency(speed: f64) -> f64 {
    use statrs::function::erf::erf;
    let pi = std::f64::consts::PI;
    let s = speed;
    let mean_rel = if s < 1e-6 {
        2.0 * (2.0 / pi).sqrt() * (1.0 + s * s / 6.0)
    } else {
        (2.0 / pi).sqrt() * (-0.5 * s * s).exp() + (s + 1.0 / s) * erf(s / std::f64::consts::SQRT_2)
    };
    pi * mean_rel
}

/// Hard-sphere operator about the standard Maxwellian, assembled from the
/// weak form `<L h, g> = -1/4 sum B M M_* (h' + h'_* - h - h_*)(g' + g'_* - g - g_*)`
/// over sampled impact directions, with post-collisional values
/// interpolated trilinearly. The result is symmetric and nonpositive by
/// construction and annihilates `1` and `v` exactly; the projection step only
/// removes the interpolation error on `|v|^2`. Collisions whose outgoing
/// velocities leave the grid are dropped.
pub fn build_hard_sphere(grid: Arc<VelocityGrid>, samples_per_row: usize, seed: u64, memory_cap_bytes: usize) -> Result<DiscreteOperator> {
    let n = grid.len();
    if n * n * 8 * 3 > memory_cap_bytes {
        return Err(GhostError::ResourceLimit(format!(
            "dense hard-sphere operator on {n} nodes needs about {} MiB, cap is {} MiB",
            n * n * 24 / (1 << 20),
            memory_cap_bytes / (1 << 20)
        )));
    }
    let spacing = grid.spacing().ok_or_else(|| invalid("grid", "hard-sphere sampling needs a uniform grid"))?;
    let state = MaxwellianState::standard();
    let maxwellian = evaluate_maxwellian(&state, &grid);
    let wm: Vec<f64> = grid.weights.iter().zip(&maxwellian).map(|(w, m)| w * m).collect();
    let nu: Vec<f64> = (0..n).map(|i| hard_sphere_frequency(grid.speed(i))).collect();
    let dirs_per_pair = ((samples_per_row + n - 1) / n).max(1);
    let np = grid.points_per_axis;
    let e = grid.extent;
    let g = &grid;
    let stencil = |p: [f64; 3]| -> Option<[(usize, f64); 8]> {
        let mut idx = [0usize; 3];
        let mut fr = [0.0; 3];
        for d in 0..3 {
            let s = (p[d] + e) / spacing;
            if s < 0.0 || s > (np - 1) as f64 {
                return None;
            }
            let k = (s.floor() as usize).min(np - 2);
            idx[d] = k;
            fr[d] = s - k as f64;
        }
        let mut out = [(0usize, 0.0); 8];
        for (c, slot) in out.iter_mut().enumerate() {
            let (bx, by, bz) = (c & 1, (c >> 1) & 1, (c >> 2) & 1);
            let wx = if bx == 1 { fr[0] } else { 1.0 - fr[0] };
            let wy = if by == 1 { fr[1] } else { 1.0 - fr[1] };
            let wz = if bz == 1 { fr[2] } else { 1.0 - fr[2] };
            *slot = (((idx[0] + bx) * np + idx[1] + by) * np + idx[2] + bz, wx * wy * wz);
        }
        Some(out)
    };
    let pi = std::f64::consts::PI;
    // symmetric form W L, accumulated per worker
    let form: Vec<f64> = (0..n)
        .into_par_iter()
        .fold(
            || vec![0.0; n * n],
            |mut acc, i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                let v = [g.vx[i], g.vy[i], g.vz[i]];
                let mut delta: Vec<(usize, f64)> = Vec::with_capacity(18);
                for j in 0..n {
                    let vs = [g.vx[j], g.vy[j], g.vz[j]];
                    let rel = [v[0] - vs[0], v[1] - vs[1], v[2] - vs[2]];
                    if rel == [0.0; 3] {
                        continue;
                    }
                    let base = wm[i] * wm[j] * 4.0 * pi / dirs_per_pair as f64;
                    for _ in 0..dirs_per_pair {
                        let z: f64 = 2.0 * rng.gen::<f64>() - 1.0;
                        let phi: f64 = 2.0 * pi * rng.gen::<f64>();
                        let r = (1.0 - z * z).max(0.0).sqrt();
                        let nvec = [r * phi.cos(), r * phi.sin(), z];
                        let vn = rel[0] * nvec[0] + rel[1] * nvec[1] + rel[2] * nvec[2];
                        let wgt = 0.25 * base * 0.5 * vn.abs();
                        let vp = [v[0] - vn * nvec[0], v[1] - vn * nvec[1], v[2] - vn * nvec[2]];
                        let vps = [vs[0] + vn * nvec[0], vs[1] + vn * nvec[1], vs[2] + vn * nvec[2]];
                        let (Some(a), Some(b)) = (stencil(vp), stencil(vps)) else { continue };
                        delta.clear();
                        delta.extend_from_slice(&a);
                        delta.extend_from_slice(&b);
                        delta.push((i, -1.0));
                        delta.push((j, -1.0));
                        for &(p, cp) in &delta {
                            let row = &mut acc[p * n..(p + 1) * n];
                            let f = wgt * cp;
                            for &(q, cq) in &delta {
                                row[q] -= f * cq;
                            }
                        }
                    }
                }
                acc
            },
        )
        .reduce(
            || vec![0.0; n * n],
            |mut a, b| {
                for (x, y) in a.iter_mut().zip(&b) {
                    *x += y;
                }
                a
            },
        );
    let mut raw = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            raw[(i, j)] = form[i * n + j] / wm[i];
        }
    }
    drop(form);
    let ones = vec![1.0; n];
    let null_basis = weighted_basis(&grid, &wm, &ones, &state)?;
    let cleaned = symmetrize_and_project(&raw, &wm, &null_basis);
    let diff = (&cleaned - &raw).norm();
    let cleanup_norm = diff / raw.norm().max(1e-300);
    let nb = nu_bounds(&grid, &nu, &state);
    Ok(DiscreteOperator {
        tag: ModelTag::HardSphereSampled,
        grid,
        state,
        maxwellian,
        wm,
        nu,
        kernel: Kernel::Dense(cleaned),
        null_basis,
        nu_bounds: nb,
        cleanup_norm,
        theta: 0.0,
        solver: OnceLock::new(),
    })
}

/// `L <- P_perp (L + W^{-1} L^T W) / 2 P_perp`, with `W = diag(w M)`.
fn symmetrize_and_project(raw: &DMatrix<f64>, wm: &[f64], basis: &[Vec<f64>]) -> DMatrix<f64> {
    let n = raw.nrows();
    let mut s = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            s[(i, j)] = 0.5 * (raw[(i, j)] + raw[(j, i)] * wm[j] / wm[i]);
        }
    }
    // P = E E^T W; P_perp = I - P
    let mut e = DMatrix::<f64>::zeros(n, basis.len());
    let mut ew = DMatrix::<f64>::zeros(n, basis.len());
    for (c, b) in basis.iter().enumerate() {
        for i in 0..n {
            e[(i, c)] = b[i];
            ew[(i, c)] = b[i] * wm[i];
        }
    }
    // s P_perp = s - (s E) (W E)^T
    let se = &s * &e;
    let s1 = &s - &se * ew.transpose();
    // P_perp s1 = s1 - E ((W E)^T s1)
    let t = ew.transpose() * &s1;
    &s1 - &e * t
}

/// Adds the relaxation `-nu~ (f - P_nu~ f)` with `nu~ = theta (1 + |v - u|)^2`.
pub fn build_augmented_theta(base: &DiscreteOperator, theta: f64) -> Result<DiscreteOperator> {
    if !(theta >= 0.0) || !theta.is_finite() {
        return Err(invalid("theta", format!("must be non-negative, got {theta}")));
    }
    let mut op = base.clone();
    op.solver = OnceLock::new();
    if theta == 0.0 {
        return Ok(op);
    }
    let grid = base.grid.clone();
    let state = base.state;
    let nut: Vec<f64> = (0..grid.len()).map(|i| theta * (1.0 + peculiar_speed(&grid, i, &state)).powi(2)).collect();
    let et = weighted_basis(&grid, &base.wm, &nut, &state)?;
    let extra: Vec<Vec<f64>> = et.iter().map(|e| e.iter().zip(&nut).map(|(x, n)| x * n).collect()).collect();
    for (a, b) in op.nu.iter_mut().zip(&nut) {
        *a += b;
    }
    match &mut op.kernel {
        Kernel::LowRank { a, b } => {
            a.extend(extra.iter().cloned());
            b.extend(extra.iter().cloned());
        }
        Kernel::Dense(m) => {
            let n = grid.len();
            for i in 0..n {
                m[(i, i)] -= nut[i];
            }
            for x in &extra {
                for i in 0..n {
                    let xi = x[i];
                    for j in 0..n {
                        m[(i, j)] += xi * x[j] * base.wm[j];
                    }
                }
            }
        }
    }
    op.tag = ModelTag::AugmentedTheta;
    op.theta = base.theta + theta;
    op.nu_bounds = nu_bounds(&grid, &op.nu, &state);
    Ok(op)
}

impl DiscreteOperator {
    pub fn len(&self) -> usize {
        self.nu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nu.is_empty()
    }

    pub fn inner(&self, f: &[f64], g: &[f64]) -> f64 {
        f.iter().zip(g).zip(&self.wm).map(|((a, b), w)| a * b * w).sum()
    }

    pub fn norm(&self, f: &[f64]) -> f64 {
        self.inner(f, f).sqrt()
    }

    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        match &self.kernel {
            Kernel::LowRank { a, b } => {
                let mut out: Vec<f64> = f.iter().zip(&self.nu).map(|(x, n)| -n * x).collect();
                for (ar, br) in a.iter().zip(b) {
                    let c = self.inner(br, f);
                    for (o, x) in out.iter_mut().zip(ar) {
                        *o += c * x;
                    }
                }
                out
            }
            Kernel::Dense(m) => {
                let v = DVector::from_column_slice(f);
                (m * v).as_slice().to_vec()
            }
        }
    }

    /// Coordinates of `f` on the orthonormal invariant basis.
    pub fn invariant_coords(&self, f: &[f64]) -> [f64; 5] {
        let mut c = [0.0; 5];
        for (k, e) in self.null_basis.iter().enumerate() {
            c[k] = self.inner(e, f);
        }
        c
    }

    pub fn project(&self, f: &[f64]) -> Vec<f64> {
        let c = self.invariant_coords(f);
        let mut out = vec![0.0; f.len()];
        for (k, e) in self.null_basis.iter().enumerate() {
            for (o, x) in out.iter_mut().zip(e) {
                *o += c[k] * x;
            }
        }
        out
    }

    pub fn project_perp(&self, f: &[f64]) -> Vec<f64> {
        let p = self.project(f);
        f.iter().zip(&p).map(|(a, b)| a - b).collect()
    }

    pub fn grid_hash(&self) -> String {
        self.grid.hash()
    }

    /// Dense coefficient matrix of `L`.
    pub fn to_dense(&self) -> Result<DMatrix<f64>> {
        let n = self.len();
        if n > DENSE_NODE_LIMIT {
            return Err(GhostError::ResourceLimit(format!("{n} nodes exceeds the dense limit {DENSE_NODE_LIMIT}")));
        }
        match &self.kernel {
            Kernel::Dense(m) => Ok(m.clone()),
            Kernel::LowRank { a, b } => {
                let mut m = DMatrix::<f64>::zeros(n, n);
                for i in 0..n {
                    m[(i, i)] = -self.nu[i];
                }
                for (ar, br) in a.iter().zip(b) {
                    for i in 0..n {
                        let x = ar[i];
                        if x == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            m[(i, j)] += x * br[j] * self.wm[j];
                        }
                    }
                }
                Ok(m)
            }
        }
    }

    fn complement_solver(&self) -> Result<&ComplementSolver> {
        if let Some(s) = self.solver.get() {
            return Ok(s);
        }
        let solver = match &self.kernel {
            Kernel::LowRank { a, b } => {
                // L - P = -D + sum_s u_s <v_s, .>
                let mut u: Vec<Vec<f64>> = a.clone();
                let mut v: Vec<Vec<f64>> = b.clone();
                for e in &self.null_basis {
                    u.push(e.iter().map(|x| -x).collect());
                    v.push(e.clone());
                }
                let r = u.len();
                // capacitance I + V^T A^{-1} U with A = -D
                let mut cap = DMatrix::<f64>::identity(r, r);
                for i in 0..r {
                    for j in 0..r {
                        let s: f64 = (0..self.len()).map(|k| self.wm[k] * v[i][k] * (-u[j][k] / self.nu[k])).sum();
                        cap[(i, j)] += s;
                    }
                }
                let cap_inv = cap.try_inverse().ok_or_else(|| GhostError::Numerical("singular capacitance matrix".into()))?;
                ComplementSolver::Woodbury { u, v, cap_inv }
            }
            Kernel::Dense(m) => {
                let n = self.len();
                let mut mm = m.clone();
                for e in &self.null_basis {
                    for i in 0..n {
                        for j in 0..n {
                            mm[(i, j)] -= e[i] * e[j] * self.wm[j];
                        }
                    }
                }
                ComplementSolver::Lu(mm.lu())
            }
        };
        let _ = self.solver.set(solver);
        Ok(self.solver.get().unwrap())
    }

    fn shifted_solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        match self.complement_solver()? {
            ComplementSolver::Woodbury { u, v, cap_inv } => {
                let n = self.len();
                let ainv_r: Vec<f64> = (0..n).map(|k| -rhs[k] / self.nu[k]).collect();
                let r = u.len();
                let vt: DVector<f64> = DVector::from_iterator(r, v.iter().map(|vs| self.inner(vs, &ainv_r)));
                let c = cap_inv * vt;
                let mut x = ainv_r;
                for s in 0..r {
                    for k in 0..n {
                        x[k] -= c[s] * (-u[s][k] / self.nu[k]);
                    }
                }
                Ok(x)
            }
            ComplementSolver::Lu(lu) => {
                let b = DVector::from_column_slice(rhs);
                let x = lu.solve(&b).ok_or_else(|| GhostError::Numerical("singular collision matrix".into()))?;
                Ok(x.as_slice().to_vec())
            }
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ComplementSolve {
    pub solution: Vec<f64>,
    /// relative size of the invariant component removed from the right-hand side
    pub discarded_fraction: f64,
    pub relative_residual: f64,
}

/// Solves `L f = rhs` with `f` orthogonal to the invariants. The right-hand
/// side must lie in the range of `L` up to a relative invariant component of 1e-6.
pub fn solve_on_complement(op: &DiscreteOperator, rhs: &[f64], tol: f64) -> Result<ComplementSolve> {
    if rhs.len() != op.len() {
        return Err(invalid("rhs", "length does not match the operator"));
    }
    let total = op.norm(rhs);
    let p = op.project(rhs);
    let null_part = op.norm(&p);
    let discarded_fraction = if total > 0.0 { null_part / total } else { 0.0 };
    if discarded_fraction > 1e-6 {
        return Err(GhostError::Numerical(format!(
            "right-hand side has a relative invariant component {discarded_fraction:.3e}, not in the range of the operator"
        )));
    }
    let r: Vec<f64> = rhs.iter().zip(&p).map(|(a, b)| a - b).collect();
    let rn = op.norm(&r).max(1e-300);
    let mut x = op.shifted_solve(&r)?;
    x = op.project_perp(&x);
    let mut rel = f64::INFINITY;
    for _ in 0..4 {
        let lx = op.apply(&x);
        let res: Vec<f64> = r.iter().zip(&lx).map(|(a, b)| a - b).collect();
        rel = op.norm(&res) / rn;
        if rel <= tol {
            break;
        }
        let dx = op.shifted_solve(&res)?;
        for (xi, di) in x.iter_mut().zip(&dx) {
            *xi += di;
        }
        x = op.project_perp(&x);
    }
    if rel > tol {
        return Err(GhostError::NotConverged(format!("complement solve residual {rel:.3e} above {tol:.1e}")));
    }
    Ok(ComplementSolve { solution: x, discarded_fraction, relative_residual: rel })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SpectralReport {
    /// smallest eigenvalue of `-L` on the complement of the invariants
    pub gap: f64,
    /// largest `c` with `-<L f, f> >= c <nu f, f>` on that complement
    pub c_spectral: f64,
    pub largest: f64,
    /// eigenvalues of `-L` inside the invariant space (should vanish)
    pub null_eigen_max: f64,
    pub structured: bool,
}

/// Orthonormal basis of the complement of the columns of `e` (Householder).
fn complement_basis(e: &DMatrix<f64>) -> DMatrix<f64> {
    let n = e.nrows();
    let k = e.ncols();
    let mut a = e.clone();
    let mut vs: Vec<DVector<f64>> = Vec::with_capacity(k);
    for c in 0..k {
        let mut v = DVector::<f64>::zeros(n);
        for i in c..n {
            v[i] = a[(i, c)];
        }
        let alpha = v.norm();
        let s = if v[c] >= 0.0 { 1.0 } else { -1.0 };
        v[c] += s * alpha;
        let vn = v.norm_squared();
        if vn > 0.0 {
            for j in c..k {
                let col = a.column(j).clone_owned();
                let t = 2.0 * v.dot(&col) / vn;
                for i in c..n {
                    a[(i, j)] -= t * v[i];
                }
            }
        }
        vs.push(v);
    }
    // columns k..n of Q = H_0 ... H_{k-1}
    let mut q = DMatrix::<f64>::zeros(n, n - k);
    for (col, i) in (k..n).enumerate() {
        q[(i, col)] = 1.0;
    }
    for v in vs.iter().rev() {
        let vn = v.norm_squared();
        if vn == 0.0 {
            continue;
        }
        let vt_q = v.transpose() * &q;
        q -= (2.0 / vn) * v * vt_q;
    }
    q
}

/// Symmetric form `W^{1/2} L W^{-1/2}` and the scaled invariant basis.
fn symmetric_form(op: &DiscreteOperator) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = op.len();
    let l = op.to_dense()?;
    let s: Vec<f64> = op.wm.iter().map(|w| w.sqrt()).collect();
    let mut ls = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            ls[(i, j)] = s[i] * l[(i, j)] / s[j];
        }
    }
    let ls = 0.5 * (&ls + ls.transpose());
    let mut e = DMatrix::<f64>::zeros(n, op.null_basis.len());
    for (c, b) in op.null_basis.iter().enumerate() {
        for i in 0..n {
            e[(i, c)] = s[i] * b[i];
        }
    }
    Ok((ls, e))
}

fn generalized_min(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<(f64, DVector<f64>)> {
    let chol = b.clone().cholesky().ok_or_else(|| GhostError::Numerical("weight matrix is not positive definite".into()))?;
    let l = chol.l();
    let linv = l.clone().try_inverse().ok_or_else(|| GhostError::Numerical("singular Cholesky factor".into()))?;
    let c = &linv * a * linv.transpose();
    let c = 0.5 * (&c + c.transpose());
    let eig = SymmetricEigen::new(c);
    let (imin, lmin) = eig.eigenvalues.iter().enumerate().fold((0, f64::INFINITY), |acc, (i, &x)| if x < acc.1 { (i, x) } else { acc });
    let y = eig.eigenvectors.column(imin).clone_owned();
    let x = linv.transpose() * y;
    Ok((lmin, x))
}

fn is_constant_bgk(op: &DiscreteOperator) -> bool {
    op.tag == ModelTag::Bgk && op.theta == 0.0 && op.nu.iter().all(|x| (x - op.nu[0]).abs() <= 1e-14 * op.nu[0])
}

/// Spectral gap of `-L` on the orthogonal complement of the invariants.
pub fn spectral_gap(op: &DiscreteOperator) -> Result<SpectralReport> {
    if op.len() > DENSE_NODE_LIMIT {
        if is_constant_bgk(op) {
            // L = nu (P - I) acts as -nu on the complement
            let nu = op.nu[0];
            return Ok(SpectralReport { gap: nu, c_spectral: 1.0, largest: nu, null_eigen_max: 0.0, structured: true });
        }
        return Err(GhostError::ResourceLimit(format!("spectral analysis limited to {DENSE_NODE_LIMIT} nodes")));
    }
    let (ls, e) = symmetric_form(op)?;
    let q = complement_basis(&e);
    let neg = -&ls;
    let b = q.transpose() * &neg * &q;
    let b = 0.5 * (&b + b.transpose());
    let eig = SymmetricEigen::new(b.clone());
    let gap = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let largest = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let nu_q = {
        let mut dq = q.clone();
        for i in 0..dq.nrows() {
            for j in 0..dq.ncols() {
                dq[(i, j)] *= op.nu[i];
            }
        }
        q.transpose() * dq
    };
    let (c_spectral, _) = generalized_min(&b, &nu_q)?;
    let en = e.transpose() * &neg * &e;
    let null_eigen_max = en.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    Ok(SpectralReport { gap, c_spectral, largest, null_eigen_max, structured: false })
}

/// `L_J f = L f + L(a P f)` for a multiplicative velocity field `a`.
#[derive(Clone, Debug)]
pub struct PerturbedOperator {
    pub base: Arc<DiscreteOperator>,
    pub a: Vec<f64>,
    /// basis of `Ker L_J`: `chi_j - L^{-1} L (a chi_j)`
    pub kernel_basis: Vec<Vec<f64>>,
    pub kernel_residual: f64,
    /// largest difference between the closed-form and directly computed projector
    pub projector_mismatch: f64,
    pub large_field_warning: bool,
}

impl PerturbedOperator {
    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        let pf = self.base.project(f);
        let g: Vec<f64> = f.iter().zip(&pf).zip(&self.a).map(|((x, p), a)| x + a * p).collect();
        self.base.apply(&g)
    }

    /// `P_J = P - (I - P) a P`, the projection onto `Ker L_J` along the complement.
    pub fn projector(&self, f: &[f64]) -> Vec<f64> {
        let pf = self.base.project(f);
        let apf: Vec<f64> = pf.iter().zip(&self.a).map(|(p, a)| a * p).collect();
        let perp = self.base.project_perp(&apf);
        pf.iter().zip(&perp).map(|(p, q)| p - q).collect()
    }

    /// `K (Phi K)^{-1} Phi f` with `K` the computed kernel basis.
    pub fn projector_direct(&self, f: &[f64]) -> Result<Vec<f64>> {
        let k = self.kernel_basis.len();
        let mut phik = DMatrix::<f64>::zeros(k, k);
        for (j, kb) in self.kernel_basis.iter().enumerate() {
            let c = self.base.invariant_coords(kb);
            for i in 0..k {
                phik[(i, j)] = c[i];
            }
        }
        let cf = self.base.invariant_coords(f);
        let rhs = DVector::from_column_slice(&cf[..k]);
        let coef = phik.lu().solve(&rhs).ok_or_else(|| GhostError::Numerical("kernel basis is degenerate".into()))?;
        let mut out = vec![0.0; f.len()];
        for (j, kb) in self.kernel_basis.iter().enumerate() {
            for (o, x) in out.iter_mut().zip(kb) {
                *o += coef[j] * x;
            }
        }
        Ok(out)
    }
}

pub fn build_lj(base: Arc<DiscreteOperator>, a: Vec<f64>) -> Result<PerturbedOperator> {
    if a.len() != base.len() {
        return Err(invalid("a", "field length does not match the operator"));
    }
    let amax = a.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let large_field_warning = amax > 0.3;
    if large_field_warning {
        log::warn!("perturbation field has sup norm {amax:.3}, above 0.3");
    }
    let mut kernel_basis = Vec::with_capacity(5);
    for e in &base.null_basis {
        let ae: Vec<f64> = e.iter().zip(&a).map(|(x, y)| x * y).collect();
        let lae = base.apply(&ae);
        // a chi may itself be an invariant, leaving only rounding in L(a chi)
        let tiny = 1e-12 * base.norm(&ae) * base.nu_bounds.1.max(1.0);
        let corr = if base.norm(&lae) > tiny { solve_on_complement(&base, &lae, 1e-12)?.solution } else { vec![0.0; base.len()] };
        kernel_basis.push(e.iter().zip(&corr).map(|(x, c)| x - c).collect::<Vec<f64>>());
    }
    let mut out = PerturbedOperator { base: base.clone(), a, kernel_basis, kernel_residual: 0.0, projector_mismatch: 0.0, large_field_warning };
    let mut kr = 0.0f64;
    for k in &out.kernel_basis {
        let r = out.apply(k);
        kr = kr.max(base.norm(&r) / base.norm(k));
    }
    out.kernel_residual = kr;
    let mut probes: Vec<Vec<f64>> = base.null_basis.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..6 {
        probes.push((0..base.len()).map(|_| rng.gen::<f64>() - 0.5).collect());
    }
    let mut mm = 0.0f64;
    for p in &probes {
        let x = out.projector(p);
        let y = out.projector_direct(p)?;
        let d = x.iter().zip(&y).fold(0.0f64, |m, (u, v)| m.max((u - v).abs()));
        let s = x.iter().fold(1.0f64, |m, u| m.max(u.abs()));
        mm = mm.max(d / s);
    }
    out.projector_mismatch = mm;
    Ok(out)
}

/// Cache of perturbed operators keyed by the base operator and a quantised hash of `a`.
#[derive(Default)]
pub struct LjCache {
    map: Mutex<HashMap<(String, u64), Arc<PerturbedOperator>>>,
}

fn quantized_hash(a: &[f64]) -> u64 {
    use std::hash::{Hash, Hasher};
    let mut h = std::collections::hash_map::DefaultHasher::new();
    for x in a {
        ((x * 1e10).round() as i64).hash(&mut h);
    }
    h.finish()
}

impl LjCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get_or_build(&self, base: Arc<DiscreteOperator>, a: Vec<f64>) -> Result<Arc<PerturbedOperator>> {
        let key = (format!("{}:{:?}:{}", base.grid_hash(), base.tag, base.theta), quantized_hash(&a));
        if let Some(p) = self.map.lock().unwrap().get(&key) {
            return Ok(p.clone());
        }
        let p = Arc::new(build_lj(base, a)?);
        self.map.lock().unwrap().insert(key, p.clone());
        Ok(p)
    }

    pub fn len(&self) -> usize {
        self.map.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GapCertificate {
    pub holds: bool,
    pub c: f64,
    pub c_spectral: f64,
    pub singular_shift: bool,
    pub violating: Option<Vec<f64>>,
}

/// Certifies `-<(I + P a) L_J f, f> >= c <nu (I-P)(I+aP) f, (I-P)(I+aP) f>`
/// on `f` with `(I + aP) f` orthogonal to the invariants.
pub fn verify_lj_gap(pert: &PerturbedOperator) -> Result<GapCertificate> {
    let op = &pert.base;
    let n = op.len();
    if n > DENSE_NODE_LIMIT {
        return Err(GhostError::ResourceLimit(format!("gap certification limited to {DENSE_NODE_LIMIT} nodes")));
    }
    let spec = spectral_gap(op)?;
    let k = op.null_basis.len();
    // 5x5 matrix I + Phi(a E)
    let mut m5 = DMatrix::<f64>::identity(k, k);
    let ae: Vec<Vec<f64>> = op.null_basis.iter().map(|e| e.iter().zip(&pert.a).map(|(x, y)| x * y).collect()).collect();
    for j in 0..k {
        let c = op.invariant_coords(&ae[j]);
        for i in 0..k {
            m5[(i, j)] += c[i];
        }
    }
    let svd = m5.clone().svd(true, true);
    let smin = svd.singular_values.iter().cloned().fold(f64::INFINITY, f64::min);
    if smin < 1e-10 {
        let vt = svd.v_t.unwrap();
        let imin = svd.singular_values.iter().enumerate().fold((0, f64::INFINITY), |acc, (i, &x)| if x < acc.1 { (i, x) } else { acc }).0;
        let c: Vec<f64> = (0..k).map(|j| vt[(imin, j)]).collect();
        let mut f = vec![0.0; n];
        for j in 0..k {
            for (fi, x) in f.iter_mut().zip(&ae[j]) {
                *fi -= c[j] * x;
            }
        }
        return Ok(GapCertificate { holds: false, c: f64::NAN, c_spectral: spec.c_spectral, singular_shift: true, violating: Some(f) });
    }
    let m5_inv = m5.try_inverse().unwrap();
    let shift_inv = |q: &[f64]| -> Vec<f64> {
        let cq = op.invariant_coords(q);
        let y = &m5_inv * DVector::from_column_slice(&cq[..k]);
        let mut out = q.to_vec();
        for j in 0..k {
            for (o, x) in out.iter_mut().zip(&ae[j]) {
                *o -= y[j] * x;
            }
        }
        out
    };
    // basis of the complement in coefficient form, orthonormal in the weighted product
    let s: Vec<f64> = op.wm.iter().map(|w| w.sqrt()).collect();
    let mut e = DMatrix::<f64>::zeros(n, k);
    for (c, b) in op.null_basis.iter().enumerate() {
        for i in 0..n {
            e[(i, c)] = s[i] * b[i];
        }
    }
    let qs = complement_basis(&e);
    let dim = qs.ncols();
    let fs: Vec<Vec<f64>> = (0..dim)
        .into_par_iter()
        .map(|c| {
            let q: Vec<f64> = (0..n).map(|i| qs[(i, c)] / s[i]).collect();
            shift_inv(&q)
        })
        .collect();
    let lhs_vecs: Vec<Vec<f64>> = fs
        .par_iter()
        .map(|f| {
            let lj = pert.apply(f);
            let alj: Vec<f64> = lj.iter().zip(&pert.a).map(|(x, y)| x * y).collect();
            let p = op.project(&alj);
            lj.iter().zip(&p).map(|(x, y)| -(x + y)).collect()
        })
        .collect();
    let g_vecs: Vec<Vec<f64>> = fs
        .par_iter()
        .map(|f| {
            let pf = op.project(f);
            let g: Vec<f64> = f.iter().zip(&pf).zip(&pert.a).map(|((x, p), a)| x + a * p).collect();
            op.project_perp(&g)
        })
        .collect();
    let mut amat = DMatrix::<f64>::zeros(dim, dim);
    let mut bmat = DMatrix::<f64>::zeros(dim, dim);
    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..dim)
        .into_par_iter()
        .map(|i| {
            let ar: Vec<f64> = (0..dim).map(|j| op.inner(&lhs_vecs[i], &fs[j])).collect();
            let nug: Vec<f64> = g_vecs[i].iter().zip(&op.nu).map(|(x, nu)| x * nu).collect();
            let br: Vec<f64> = (0..dim).map(|j| op.inner(&nug, &g_vecs[j])).collect();
            (ar, br)
        })
        .collect();
    for (i, (ar, br)) in rows.into_iter().enumerate() {
        for j in 0..dim {
            amat[(i, j)] = ar[j];
            bmat[(i, j)] = br[j];
        }
    }
    let amat = 0.5 * (&amat + amat.transpose());
    let bmat = 0.5 * (&bmat + bmat.transpose());
    let (c, x) = generalized_min(&amat, &bmat)?;
    let holds = c > 0.0;
    let violating = if holds {
        None
    } else {
        let mut f = vec![0.0; n];
        for (j, fj) in fs.iter().enumerate() {
            for (o, v) in f.iter_mut().zip(fj) {
                *o += x[j] * v;
            }
        }
        Some(f)
    };
    Ok(GapCertificate { holds, c, c_spectral: spec.c_spectral, singular_shift: false, violating })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OperatorSidecar {
    pub grid_hash: String,
    pub model_tag: ModelTag,
    pub nodes: usize,
    pub extent: f64,
    pub points_per_axis: usize,
    pub nu0: f64,
    pub nu1: f64,
    pub theta: f64,
    pub cleanup_norm: f64,
    pub state: MaxwellianState,
}

/// Writes the dense matrix row-major (little endian) and a JSON sidecar.
pub fn export_operator(op: &DiscreteOperator, matrix_path: &Path, sidecar_path: &Path) -> Result<OperatorSidecar> {
    let m = op.to_dense()?;
    let n = op.len();
    let mut w = std::io::BufWriter::new(std::fs::File::create(matrix_path)?);
    for i in 0..n {
        for j in 0..n {
            w.write_all(&m[(i, j)].to_le_bytes())?;
        }
    }
    w.flush()?;
    let side = OperatorSidecar {
        grid_hash: op.grid_hash(),
        model_tag: op.tag,
        nodes: n,
        extent: op.grid.extent,
        points_per_axis: op.grid.points_per_axis,
        nu0: op.nu_bounds.0,
        nu1: op.nu_bounds.1,
        theta: op.theta,
        cleanup_norm: op.cleanup_norm,
        state: op.state,
    };
    std::fs::write(sidecar_path, serde_json::to_string_pretty(&side)?)?;
    Ok(side)
}

/// Symmetry defect `max |<Lf,g> - <f,Lg>|` over a few deterministic probes,
/// relative to the probe norms.
pub fn symmetry_defect(op: &DiscreteOperator, probes: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vecs: Vec<Vec<f64>> = (0..probes).map(|_| (0..op.len()).map(|_| rng.gen::<f64>() - 0.5).collect()).collect();
    let lv: Vec<Vec<f64>> = vecs.iter().map(|v| op.apply(v)).collect();
    let mut worst = 0.0f64;
    for i in 0..probes {
        for j in 0..probes {
            let d = (op.inner(&lv[i], &vecs[j]) - op.inner(&vecs[i], &lv[j])).abs();
            let s = op.norm(&lv[i]) * op.norm(&vecs[j]) + op.norm(&vecs[i]) * op.norm(&lv[j]);
            worst = worst.max(d / s.max(1e-300));
        }
    }
    worst
}

/// Largest `|| L chi || / || chi ||` over the invariants.
pub fn invariant_defect(op: &DiscreteOperator) -> f64 {
    let raw = invariants(&op.grid, op.state.velocity[0]);
    raw.iter().map(|c| norm2(&op.apply(c)) / norm2(c).max(1e-300)).fold(0.0, f64::max)
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::velocity_space::build_grid;

    #[test]
    fn hard_sphere_is_self_adjoint_and_dissipative() {
        let g = Arc::new(build_grid(5.0, 9).unwrap());
        let op = build_hard_sphere(g, 2 * 729, 3, 64 << 20).unwrap();
        assert!(op.cleanup_norm < 0.5, "cleanup {}", op.cleanup_norm);
        assert!(symmetry_defect(&op, 6, 1) < 1e-12);
        assert!(invariant_defect(&op) < 1e-10);
        let spec = spectral_gap(&op).unwrap();
        assert!(spec.gap > 0.0 && spec.c_spectral > 0.0, "{spec:?}");
        // same seed, same operator
        let again = build_hard_sphere(op.grid.clone(), 2 * 729, 3, 64 << 20).unwrap();
        let f: Vec<f64> = (0..op.len()).map(|i| (0.3 * i as f64).sin()).collect();
        assert_eq!(op.apply(&f), again.apply(&f));
    }

    #[test]
    fn bgk_complement_solve_is_minus_rhs_over_rate() {
        let g = Arc::new(build_grid(6.0, 11).unwrap());
        let op = build_bgk(g.clone(), BgkRate::Constant(2.0), MaxwellianState::standard()).unwrap();
        let rhs: Vec<f64> = (0..g.len()).map(|i| g.vx[i] * g.vy[i]).collect();
        let s = solve_on_complement(&op, &rhs, 1e-10).unwrap();
        for i in 0..g.len() {
            assert!((s.solution[i] + rhs[i] / 2.0).abs() < 1e-10);
        }
    }

    #[test]
    fn rejects_rhs_with_invariant_part() {
        let g = Arc::new(build_grid(6.0, 11).unwrap());
        let op = build_bgk(g.clone(), BgkRate::Constant(1.0), MaxwellianState::standard()).unwrap();
        let rhs = vec![1.0; g.len()];
        assert!(solve_on_complement(&op, &rhs, 1e-10).is_err());
    }

    #[test]
    fn complement_basis_is_orthonormal() {
        let e = DMatrix::from_fn(9, 2, |i, j| ((i + 1) as f64).powi(j as i32 + 1));
        let q = complement_basis(&e);
        let qtq = q.transpose() * &q;
        assert!((qtq - DMatrix::identity(7, 7)).norm() < 1e-12);
        assert!((q.transpose() * e).norm() < 1e-10);
    }

    #[test]
    fn variable_rate_bgk_is_self_adjoint_and_conservative() {
        let g = Arc::new(build_grid(5.0, 9).unwrap());
        let op = build_bgk(g.clone(), BgkRate::Variable(1.0), MaxwellianState::standard()).unwrap();
        assert!(symmetry_defect(&op, 4, 3) < 1e-12);
        assert!(invariant_defect(&op) < 1e-10);
    }
}
