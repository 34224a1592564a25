//! Truncated three-dimensional velocity grids, Maxwellians, moments and the
//! mixed space-velocity norms used throughout the crate.

use std::io::{Read, Write};

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, GhostError, Result};

/// One-dimensional quadrature rule used on each axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Quadrature {
    Trapezoid,
    GaussHermite,
}

/// Reflection-symmetric tensor grid on `[-extent, extent]^3`.
///
/// Flat index of node `(ix, iy, iz)` is `(ix * n + iy) * n + iz`.
#[derive(Clone, Debug)]
pub struct VelocityGrid {
    pub extent: f64,
    pub points_per_axis: usize,
    pub quadrature: Quadrature,
    pub axis: Vec<f64>,
    pub axis_weights: Vec<f64>,
    pub vx: Vec<f64>,
    pub vy: Vec<f64>,
    pub vz: Vec<f64>,
    pub weights: Vec<f64>,
}

pub fn build_grid(extent: f64, points: usize) -> Result<VelocityGrid> {
    build_grid_with(extent, points, Quadrature::Trapezoid)
}

pub fn build_grid_with(extent: f64, points: usize, quadrature: Quadrature) -> Result<VelocityGrid> {
    if !(extent > 0.0) || !extent.is_finite() {
        return Err(invalid("extent", format!("must be positive and finite, got {extent}")));
    }
    if points < 9 || points % 2 == 0 {
        return Err(invalid("points", format!("must be odd and at least 9, got {points}")));
    }
    let (axis, axis_weights) = match quadrature {
        Quadrature::Trapezoid => trapezoid_axis(extent, points),
        Quadrature::GaussHermite => gauss_hermite_axis(points),
    };
    let n = points;
    let total = n * n * n;
    let mut vx = Vec::with_capacity(total);
    let mut vy = Vec::with_capacity(total);
    let mut vz = Vec::with_capacity(total);
    let mut weights = Vec::with_capacity(total);
    for ix in 0..n {
        for iy in 0..n {
            for iz in 0..n {
                vx.push(axis[ix]);
                vy.push(axis[iy]);
                vz.push(axis[iz]);
                weights.push(axis_weights[ix] * axis_weights[iy] * axis_weights[iz]);
            }
        }
    }
    let extent = match quadrature {
        Quadrature::Trapezoid => extent,
        Quadrature::GaussHermite => axis[n - 1],
    };
    Ok(VelocityGrid { extent, points_per_axis: n, quadrature, axis, axis_weights, vx, vy, vz, weights })
}

fn trapezoid_axis(extent: f64, n: usize) -> (Vec<f64>, Vec<f64>) {
    let h = 2.0 * extent / (n - 1) as f64;
    let axis: Vec<f64> = (0..n)
        .map(|i| {
            let v = -extent + h * i as f64;
            if i == n / 2 {
                0.0
            } else {
                v
            }
        })
        .collect();
    let mut w = vec![h; n];
    w[0] = 0.5 * h;
    w[n - 1] = 0.5 * h;
    (axis, w)
}

/// Golub-Welsch nodes for the weight `exp(-v^2/2)`, returned with weights
/// that integrate plain functions (the Gaussian factor is divided out).
fn gauss_hermite_axis(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut jac = DMatrix::<f64>::zeros(n, n);
    for k in 1..n {
        let b = (k as f64).sqrt();
        jac[(k - 1, k)] = b;
        jac[(k, k - 1)] = b;
    }
    let eig = SymmetricEigen::new(jac);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let x = eig.eigenvalues[i];
            let q = eig.eigenvectors[(0, i)];
            let w = (2.0 * std::f64::consts::PI).sqrt() * q * q;
            (x, w * (0.5 * x * x).exp())
        })
        .collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    // enforce exact reflection symmetry
    let mut axis = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n {
        let j = n - 1 - i;
        axis[i] = 0.5 * (pairs[i].0 - pairs[j].0);
        w[i] = 0.5 * (pairs[i].1 + pairs[j].1);
    }
    axis[n / 2] = 0.0;
    (axis, w)
}

impl VelocityGrid {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (ix * self.points_per_axis + iy) * self.points_per_axis + iz
    }

    pub fn speed(&self, i: usize) -> f64 {
        (self.vx[i] * self.vx[i] + self.vy[i] * self.vy[i] + self.vz[i] * self.vz[i]).sqrt()
    }

    pub fn speed_sq(&self, i: usize) -> f64 {
        self.vx[i] * self.vx[i] + self.vy[i] * self.vy[i] + self.vz[i] * self.vz[i]
    }

    /// Uniform spacing of a trapezoid grid.
    pub fn spacing(&self) -> Option<f64> {
        match self.quadrature {
            Quadrature::Trapezoid => Some(self.axis[1] - self.axis[0]),
            Quadrature::GaussHermite => None,
        }
    }

    /// Index of the node with `v_y` reflected.
    pub fn reflect_y(&self, i: usize) -> usize {
        let n = self.points_per_axis;
        let iz = i % n;
        let iy = (i / n) % n;
        let ix = i / (n * n);
        self.index(ix, n - 1 - iy, iz)
    }

    /// Short stable identifier of the grid layout.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.extent.to_le_bytes());
        h.update((self.points_per_axis as u64).to_le_bytes());
        h.update([self.quadrature as u8]);
        for w in &self.axis_weights {
            h.update(w.to_le_bytes());
        }
        let digest = h.finalize();
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// `sum w_i f_i g_i h_i` over the grid.
    pub fn dot3(&self, f: &[f64], g: &[f64], weight: &[f64]) -> f64 {
        f.iter().zip(g).zip(weight).zip(&self.weights).map(|(((a, b), c), w)| a * b * c * w).sum()
    }

    pub fn integrate(&self, f: &[f64]) -> f64 {
        f.iter().zip(&self.weights).map(|(a, w)| a * w).sum()
    }
}

/// Parameters of a Maxwellian `rho / (2 pi T)^{3/2} exp(-|v - u|^2 / 2T)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaxwellianState {
    pub rho: f64,
    pub temperature: f64,
    pub velocity: [f64; 3],
}

impl MaxwellianState {
    pub fn new(rho: f64, temperature: f64, velocity: [f64; 3]) -> Result<Self> {
        if !(rho > 0.0) || !rho.is_finite() {
            return Err(invalid("rho", format!("must be positive, got {rho}")));
        }
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(invalid("temperature", format!("must be positive, got {temperature}")));
        }
        Ok(Self { rho, temperature, velocity })
    }

    pub fn standard() -> Self {
        Self { rho: 1.0, temperature: 1.0, velocity: [0.0; 3] }
    }

    pub fn value(&self, v: [f64; 3]) -> f64 {
        let t = self.temperature;
        let c2 = (v[0] - self.velocity[0]).powi(2)
            + (v[1] - self.velocity[1]).powi(2)
            + (v[2] - self.velocity[2]).powi(2);
        self.rho / (2.0 * std::f64::consts::PI * t).powf(1.5) * (-0.5 * c2 / t).exp()
    }
}

pub fn evaluate_maxwellian(state: &MaxwellianState, grid: &VelocityGrid) -> Vec<f64> {
    (0..grid.len()).map(|i| state.value([grid.vx[i], grid.vy[i], grid.vz[i]])).collect()
}

/// Mass, momentum and kinetic energy `sum w f |v|^2 / 2` of a density.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mass: f64,
    pub momentum: [f64; 3],
    pub energy: f64,
}

pub fn moments(f: &[f64], grid: &VelocityGrid) -> Moments {
    let mut m = Moments { mass: 0.0, momentum: [0.0; 3], energy: 0.0 };
    for i in 0..grid.len() {
        let wf = grid.weights[i] * f[i];
        m.mass += wf;
        m.momentum[0] += wf * grid.vx[i];
        m.momentum[1] += wf * grid.vy[i];
        m.momentum[2] += wf * grid.vz[i];
        m.energy += 0.5 * wf * grid.speed_sq(i);
    }
    m
}

/// Wall Maxwellian `M(sqrt(2 pi), 1, (u_wall, 0, 0))` rescaled so that its
/// discrete half-range flux `sum_{v_y>0} w v_y M` is exactly one.
pub fn wall_maxwellian(grid: &VelocityGrid, u_wall: f64) -> Vec<f64> {
    let state = MaxwellianState { rho: (2.0 * std::f64::consts::PI).sqrt(), temperature: 1.0, velocity: [u_wall, 0.0, 0.0] };
    let mut m = evaluate_maxwellian(&state, grid);
    let flux: f64 = (0..grid.len()).filter(|&i| grid.vy[i] > 0.0).map(|i| grid.weights[i] * grid.vy[i] * m[i]).sum();
    for x in &mut m {
        *x /= flux;
    }
    m
}

/// Collision invariants `1, v_x - u, v_y, v_z, |v - u e_x|^2 / 2`.
pub fn invariants(grid: &VelocityGrid, u_shift: f64) -> [Vec<f64>; 5] {
    let n = grid.len();
    let mut out: [Vec<f64>; 5] = Default::default();
    out[0] = vec![1.0; n];
    out[1] = grid.vx.iter().map(|v| v - u_shift).collect();
    out[2] = grid.vy.clone();
    out[3] = grid.vz.clone();
    out[4] = (0..n)
        .map(|i| 0.5 * ((grid.vx[i] - u_shift).powi(2) + grid.vy[i].powi(2) + grid.vz[i].powi(2)))
        .collect();
    out
}

/// `sum w v_x^2 v_y^2 M` for the standard Maxwellian; equals one in the continuum.
pub fn gram_check(grid: &VelocityGrid) -> f64 {
    let m = evaluate_maxwellian(&MaxwellianState::standard(), grid);
    (0..grid.len()).map(|i| grid.weights[i] * grid.vx[i].powi(2) * grid.vy[i].powi(2) * m[i]).sum()
}

/// Spatial exponent of the mixed norm.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpatialExponent {
    Two,
    Infinity,
}

/// Trapezoid weights for arbitrary increasing nodes.
pub fn trapezoid_weights(y: &[f64]) -> Vec<f64> {
    let n = y.len();
    let mut w = vec![0.0; n];
    for k in 0..n.saturating_sub(1) {
        let h = y[k + 1] - y[k];
        w[k] += 0.5 * h;
        w[k + 1] += 0.5 * h;
    }
    w
}

/// `|| (1 + |v|)^j f ||_{q,2}`: an `L^q` norm in `y` inside an `M`-weighted
/// `L^2` norm in `v`. `field[k]` holds the velocity values at `y[k]` and
/// `m_weight` is the Maxwellian used as velocity weight.
pub fn weighted_norm(
    field: &[Vec<f64>],
    y: &[f64],
    grid: &VelocityGrid,
    m_weight: &[f64],
    j: i32,
    q: SpatialExponent,
) -> Result<f64> {
    if field.len() != y.len() {
        return Err(invalid("field", "number of spatial slices must match the y nodes"));
    }
    if field.iter().any(|s| s.len() != grid.len()) {
        return Err(invalid("field", "slice length must match the velocity grid"));
    }
    let wy = trapezoid_weights(y);
    let mut total = 0.0;
    for i in 0..grid.len() {
        let zeta = (1.0 + grid.speed(i)).powi(j);
        let inner = match q {
            SpatialExponent::Two => field.iter().zip(&wy).map(|(s, w)| w * (zeta * s[i]).powi(2)).sum::<f64>(),
            SpatialExponent::Infinity => field.iter().map(|s| (zeta * s[i]).powi(2)).fold(0.0, f64::max),
        };
        total += grid.weights[i] * m_weight[i] * inner;
    }
    Ok(total.sqrt())
}

/// Writes a velocity function as CSV with a two-line parameter header.
pub fn write_csv<W: Write>(grid: &VelocityGrid, values: &[f64], mut out: W) -> Result<()> {
    writeln!(out, "# extent={}", grid.extent)?;
    writeln!(out, "# points_per_axis={}", grid.points_per_axis)?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["vx", "vy", "vz", "weight", "value"])?;
    for i in 0..grid.len() {
        w.write_record(&[
            format!("{:.17e}", grid.vx[i]),
            format!("{:.17e}", grid.vy[i]),
            format!("{:.17e}", grid.vz[i]),
            format!("{:.17e}", grid.weights[i]),
            format!("{:.17e}", values[i]),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Parses the output of [`write_csv`], rebuilding the trapezoid grid from the header.
pub fn read_csv<R: Read>(input: R) -> Result<(VelocityGrid, Vec<f64>)> {
    let mut text = String::new();
    let mut input = input;
    input.read_to_string(&mut text)?;
    let mut extent = None;
    let mut points = None;
    let mut body = String::new();
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix("# extent=") {
            extent = rest.trim().parse::<f64>().ok();
        } else if let Some(rest) = line.strip_prefix("# points_per_axis=") {
            points = rest.trim().parse::<usize>().ok();
        } else {
            body.push_str(line);
            body.push('\n');
        }
    }
    let (extent, points) = match (extent, points) {
        (Some(e), Some(p)) => (e, p),
        _ => return Err(invalid("csv", "missing extent or points_per_axis header")),
    };
    let grid = build_grid(extent, points)?;
    let mut rdr = csv::Reader::from_reader(body.as_bytes());
    let mut values = Vec::with_capacity(grid.len());
    for rec in rdr.records() {
        let rec = rec?;
        let v: f64 = rec.get(4).ok_or_else(|| invalid("csv", "missing value column"))?.parse().map_err(|_| invalid("csv", "unparsable value"))?;
        values.push(v);
    }
    if values.len() != grid.len() {
        return Err(GhostError::Numerical(format!("expected {} rows, found {}", grid.len(), values.len())));
    }
    Ok((grid, values))
}

/// Little-endian binary dump: extent, points, then the values.
pub fn write_binary<W: Write>(grid: &VelocityGrid, values: &[f64], mut out: W) -> Result<()> {
    out.write_all(&grid.extent.to_le_bytes())?;
    out.write_all(&(grid.points_per_axis as u64).to_le_bytes())?;
    for v in values {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_binary<R: Read>(mut input: R) -> Result<(VelocityGrid, Vec<f64>)> {
    let mut b8 = [0u8; 8];
    input.read_exact(&mut b8)?;
    let extent = f64::from_le_bytes(b8);
    input.read_exact(&mut b8)?;
    let points = u64::from_le_bytes(b8) as usize;
    let grid = build_grid(extent, points)?;
    let mut values = Vec::with_capacity(grid.len());
    for _ in 0..grid.len() {
        input.read_exact(&mut b8)?;
        values.push(f64::from_le_bytes(b8));
    }
    Ok((grid, values))
}

/// Conservative discretisation of `v_x (v_x d/dv_y - v_y d/dv_x) F`, written as
/// `div_v(A F) + v_y F` with `A = (-v_x v_y, v_x^2, 0)`.
///
/// Face fluxes are centred averages and vanish on the outer faces. The first
/// and last inner faces of every line carry an extra `+k`, `-k` chosen so that
/// the `v^2` moment telescopes to the quadrature of `A . grad(v^2 / 2)`; hence
/// `sum w chi (rotation F)` matches the continuum moment identities exactly for
/// `chi = 1, v_x, v_z, |v|^2`. The layout is `(ix * n + iy) * nz + iz`; `nz = 1`
/// gives a planar `(v_x, v_y)` array.
pub fn rotation_operator(axis: &[f64], axis_weights: &[f64], nz: usize, f: &[f64], out: &mut [f64]) {
    let n = axis.len();
    debug_assert_eq!(f.len(), n * n * nz);
    let idx = |ix: usize, iy: usize, iz: usize| (ix * n + iy) * nz + iz;
    let dchi_first = 0.5 * (axis[1] * axis[1] - axis[0] * axis[0]);
    let dchi_last = 0.5 * (axis[n - 1] * axis[n - 1] - axis[n - 2] * axis[n - 2]);
    let mut a = vec![0.0; n];
    let mut face = vec![0.0; n - 1];
    // divergence of the face fluxes along one line, added into `acc`
    let line = |a: &[f64], face: &mut [f64], acc: &mut dyn FnMut(usize, f64)| {
        let mut defect = 0.0;
        for i in 0..n - 1 {
            face[i] = 0.5 * (a[i] + a[i + 1]);
            defect -= face[i] * 0.5 * (axis[i + 1] * axis[i + 1] - axis[i] * axis[i]);
        }
        for i in 0..n {
            defect += axis_weights[i] * a[i] * axis[i];
        }
        if n > 2 {
            let k = defect / (dchi_first - dchi_last);
            face[0] += k;
            face[n - 2] -= k;
        }
        for i in 0..n {
            let plus = if i + 1 < n { face[i] } else { 0.0 };
            let minus = if i > 0 { face[i - 1] } else { 0.0 };
            acc(i, (plus - minus) / axis_weights[i]);
        }
    };
    for v in out.iter_mut() {
        *v = 0.0;
    }
    for iz in 0..nz {
        for iy in 0..n {
            let vy = axis[iy];
            for ix in 0..n {
                a[ix] = -axis[ix] * vy * f[idx(ix, iy, iz)];
            }
            line(&a, &mut face, &mut |ix, d| out[idx(ix, iy, iz)] += d);
        }
        for ix in 0..n {
            let vx = axis[ix];
            for iy in 0..n {
                a[iy] = vx * vx * f[idx(ix, iy, iz)];
            }
            line(&a, &mut face, &mut |iy, d| out[idx(ix, iy, iz)] += d);
        }
    }
    for ix in 0..n {
        for iy in 0..n {
            for iz in 0..nz {
                let i = idx(ix, iy, iz);
                out[i] += axis[iy] * f[i];
            }
        }
    }
}

/// Rotation operator acting on `F = G phi` with `G = exp(-(v_x^2 + v_y^2) / 2)`:
/// `G (v_x^2 d/dv_y - v_x v_y d/dv_x) phi` by centred differences on the
/// uniform axis (second-order one-sided at the ends). The rest Maxwellian of
/// unit temperature is annihilated exactly and low-degree polynomial `phi` are
/// differentiated exactly. A correction along `G {1, v_x, v_y, v_x^2 + v_y^2}` in
/// each planar slice restores the moment identities of [`rotation_operator`].
/// Same layout as [`rotation_operator`].
pub fn rotation_about_rest(axis: &[f64], axis_weights: &[f64], nz: usize, f: &[f64], out: &mut [f64]) {
    let n = axis.len();
    debug_assert_eq!(f.len(), n * n * nz);
    let h = axis[1] - axis[0];
    let idx = |ix: usize, iy: usize, iz: usize| (ix * n + iy) * nz + iz;
    let gauss: Vec<f64> = (0..n * n).map(|p| (-0.5 * (axis[p / n].powi(2) + axis[p % n].powi(2))).exp()).collect();
    let chi = |p: usize| -> [f64; 4] {
        let (x, y) = (axis[p / n], axis[p % n]);
        [1.0, x, y, x * x + y * y]
    };
    let w2 = |p: usize| axis_weights[p / n] * axis_weights[p % n];
    let mut gram = nalgebra::Matrix4::<f64>::zeros();
    for p in 0..n * n {
        let c = chi(p);
        for a in 0..4 {
            for b in 0..4 {
                gram[(a, b)] += w2(p) * gauss[p] * c[a] * c[b];
            }
        }
    }
    let gram_lu = gram.lu();
    let diff = |v: &dyn Fn(usize) -> f64, i: usize| -> f64 {
        if i == 0 {
            (-3.0 * v(0) + 4.0 * v(1) - v(2)) / (2.0 * h)
        } else if i == n - 1 {
            (3.0 * v(n - 1) - 4.0 * v(n - 2) + v(n - 3)) / (2.0 * h)
        } else {
            (v(i + 1) - v(i - 1)) / (2.0 * h)
        }
    };
    let mut phi = vec![0.0; n * n];
    for iz in 0..nz {
        for p in 0..n * n {
            phi[p] = f[idx(p / n, p % n, iz)] / gauss[p];
        }
        let mut have = nalgebra::Vector4::<f64>::zeros();
        let mut want = nalgebra::Vector4::<f64>::zeros();
        for ix in 0..n {
            for iy in 0..n {
                let p = ix * n + iy;
                let (x, y) = (axis[ix], axis[iy]);
                let dy = diff(&|j| phi[ix * n + j], iy);
                let dx = diff(&|j| phi[j * n + iy], ix);
                let val = gauss[p] * (x * x * dy - x * y * dx);
                let fv = f[idx(ix, iy, iz)];
                let c = chi(p);
                let target = [y * fv, 2.0 * x * y * fv, (y * y - x * x) * fv, c[3] * y * fv];
                for a in 0..4 {
                    have[a] += w2(p) * c[a] * val;
                    want[a] += w2(p) * target[a];
                }
                out[idx(ix, iy, iz)] = val;
            }
        }
        if let Some(coef) = gram_lu.solve(&(want - have)) {
            for p in 0..n * n {
                let c = chi(p);
                out[idx(p / n, p % n, iz)] += gauss[p] * (0..4).map(|a| coef[a] * c[a]).sum::<f64>();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_parameters() {
        assert!(build_grid(6.0, 8).is_err());
        assert!(build_grid(6.0, 7).is_err());
        assert!(build_grid(-1.0, 11).is_err());
        assert!(build_grid(6.0, 11).is_ok());
    }

    #[test]
    fn grid_is_reflection_symmetric() {
        let g = build_grid(5.0, 11).unwrap();
        for i in 0..g.len() {
            let r = g.reflect_y(i);
            assert_eq!(g.vy[r], -g.vy[i]);
            assert_eq!(g.vx[r], g.vx[i]);
            assert_eq!(g.weights[r], g.weights[i]);
        }
    }

    #[test]
    fn wall_maxwellian_has_unit_half_flux() {
        let g = build_grid(6.0, 15).unwrap();
        let m = wall_maxwellian(&g, 0.3);
        let out: f64 = (0..g.len()).filter(|&i| g.vy[i] < 0.0).map(|i| -g.weights[i] * g.vy[i] * m[i]).sum();
        assert!((out - 1.0).abs() < 1e-13);
    }

    #[test]
    fn gauss_hermite_integrates_gaussian_moments() {
        let g = build_grid_with(1.0, 11, Quadrature::GaussHermite).unwrap();
        let m = evaluate_maxwellian(&MaxwellianState::standard(), &g);
        let mo = moments(&m, &g);
        assert!((mo.mass - 1.0).abs() < 1e-12);
        assert!((mo.energy - 1.5).abs() < 1e-12);
        assert!((gram_check(&g) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rotation_operator_flux_identity() {
        let g = build_grid(6.0, 13).unwrap();
        let f: Vec<f64> = (0..g.len()).map(|i| (1.0 + 0.3 * g.vx[i] - 0.2 * g.vy[i] * g.vz[i]) * (-0.4 * g.speed_sq(i)).exp()).collect();
        let mut nf = vec![0.0; g.len()];
        rotation_operator(&g.axis, &g.axis_weights, g.points_per_axis, &f, &mut nf);
        let lhs = g.integrate(&nf);
        let rhs: f64 = (0..g.len()).map(|i| g.weights[i] * g.vy[i] * f[i]).sum();
        assert!((lhs - rhs).abs() < 1e-14);
    }

    #[test]
    fn rotation_operator_quadratic_moments() {
        // sum w v_x rot F = sum w 2 v_x v_y F, sum w |v|^2/2 rot F = sum w v_y |v|^2/2 F
        let g = build_grid(5.0, 11).unwrap();
        let f: Vec<f64> = (0..g.len()).map(|i| (1.0 + g.vx[i] * g.vy[i] + 0.3 * g.vy[i]).powi(2) * (-0.1 * g.speed_sq(i)).exp()).collect();
        let mut nf = vec![0.0; g.len()];
        rotation_operator(&g.axis, &g.axis_weights, g.points_per_axis, &f, &mut nf);
        let s = |h: &dyn Fn(usize) -> f64| -> f64 { (0..g.len()).map(|i| g.weights[i] * h(i)).sum() };
        let scale = s(&|i| f[i].abs() * (1.0 + g.speed_sq(i)).powi(2));
        assert!((s(&|i| g.vx[i] * nf[i]) - s(&|i| 2.0 * g.vx[i] * g.vy[i] * f[i])).abs() < 1e-13 * scale);
        assert!((s(&|i| 0.5 * g.speed_sq(i) * nf[i]) - s(&|i| 0.5 * g.speed_sq(i) * g.vy[i] * f[i])).abs() < 1e-13 * scale);
        assert!((s(&|i| g.vz[i] * nf[i]) - s(&|i| g.vz[i] * g.vy[i] * f[i])).abs() < 1e-13 * scale);
    }

    #[test]
    fn rest_rotation_annihilates_unit_maxwellian() {
        let g = build_grid(6.0, 13).unwrap();
        let st = MaxwellianState::new(1.3, 1.0, [0.0, 0.0, 0.0]).unwrap();
        let m = evaluate_maxwellian(&st, &g);
        let mut nf = vec![0.0; g.len()];
        rotation_about_rest(&g.axis, &g.axis_weights, g.points_per_axis, &m, &mut nf);
        assert!(nf.iter().all(|x| x.abs() < 1e-16), "{:e}", nf.iter().fold(0.0f64, |a, b| a.max(b.abs())));
    }

    #[test]
    fn rest_rotation_keeps_moment_identities() {
        let g = build_grid(5.0, 11).unwrap();
        let f: Vec<f64> = (0..g.len()).map(|i| (1.0 + g.vx[i] * g.vy[i] + 0.3 * g.vy[i]).powi(2) * (-0.4 * g.speed_sq(i)).exp()).collect();
        let mut nf = vec![0.0; g.len()];
        rotation_about_rest(&g.axis, &g.axis_weights, g.points_per_axis, &f, &mut nf);
        let s = |h: &dyn Fn(usize) -> f64| -> f64 { (0..g.len()).map(|i| g.weights[i] * h(i)).sum() };
        let scale = s(&|i| f[i].abs() * (1.0 + g.speed_sq(i)).powi(2));
        assert!((s(&|i| nf[i]) - s(&|i| g.vy[i] * f[i])).abs() < 1e-13 * scale);
        assert!((s(&|i| g.vx[i] * nf[i]) - s(&|i| 2.0 * g.vx[i] * g.vy[i] * f[i])).abs() < 1e-13 * scale);
        assert!((s(&|i| g.vy[i] * nf[i]) - s(&|i| (g.vy[i].powi(2) - g.vx[i].powi(2)) * f[i])).abs() < 1e-13 * scale);
        assert!((s(&|i| g.speed_sq(i) * nf[i]) - s(&|i| g.speed_sq(i) * g.vy[i] * f[i])).abs() < 1e-13 * scale);
        assert!((s(&|i| g.vz[i] * nf[i]) - s(&|i| g.vz[i] * g.vy[i] * f[i])).abs() < 1e-13 * scale);
    }

    #[test]
    fn rest_rotation_of_drifting_maxwellian_is_second_order() {
        // rot M_u = -u v_x v_y M_u at unit temperature
        let err = |pts: usize| -> f64 {
            let g = build_grid(7.0, pts).unwrap();
            let u = 0.2;
            let m = evaluate_maxwellian(&MaxwellianState::new(1.0, 1.0, [u, 0.0, 0.0]).unwrap(), &g);
            let mut nf = vec![0.0; g.len()];
            rotation_about_rest(&g.axis, &g.axis_weights, g.points_per_axis, &m, &mut nf);
            (0..g.len()).map(|i| (nf[i] + u * g.vx[i] * g.vy[i] * m[i]).abs()).fold(0.0, f64::max)
        };
        let (a, b) = (err(15), err(29));
        assert!(a < 1e-2 && (a / b).log2() > 1.8, "{a:e} {b:e}");
    }
}
