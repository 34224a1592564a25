//! Stationary transport on a 1-D slab of nodes `y_0 < ... < y_K`.
//!
//! Each velocity channel `c` with speed `v_c` satisfies the box scheme
//!
//! ```text
//! v_c (u_{k+1} - u_k) / h_k + (s_k u_k + s_{k+1} u_{k+1}) / 2 = (q_k + q_{k+1}) / 2
//! ```
//!
//! on every cell, or the nodal relation `s_k u_k = q_k` when `v_c = 0`.
//! Channels with `v_c > 0` take inflow values at `y_0`; channels with `v_c < 0`
//! take inflow values at `y_K` or are specularly reflected there.
//! Fields are stored channel-major: `u[c * (K + 1) + k]`.
//!
//! [`CoupledSolver`] adds a low-rank coupling between channels (Woodbury
//! capacitance system) and [`CoupledSolver::solve_with_force`] handles a
//! general per-node velocity operator by preconditioned GMRES.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{invalid, GhostError, Result};
use crate::linalg::{gmres, norm2, GmresReport};

#[derive(Clone, Debug)]
pub enum FarBoundary {
    /// prescribed values for `v < 0` at the last node
    Inflow,
    /// `u_c(y_K) = u_{partner[c]}(y_K)` for `v_c < 0`
    Reflect(Vec<usize>),
}

#[derive(Clone, Debug)]
pub struct Slab {
    pub y: Vec<f64>,
    pub speeds: Vec<f64>,
    /// non-negative absorption, channel-major
    pub absorption: Vec<f64>,
    pub far: FarBoundary,
}

impl Slab {
    pub fn new(y: Vec<f64>, speeds: Vec<f64>, absorption: Vec<f64>, far: FarBoundary) -> Result<Self> {
        let n = y.len();
        let m = speeds.len();
        if n < 2 {
            return Err(invalid("y", "need at least two nodes"));
        }
        if y.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(invalid("y", "nodes must be strictly increasing"));
        }
        if absorption.len() != n * m {
            return Err(invalid("absorption", "length must be channels times nodes"));
        }
        if absorption.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return Err(invalid("absorption", "must be finite and non-negative"));
        }
        for (c, v) in speeds.iter().enumerate() {
            if *v == 0.0 && absorption[c * n..(c + 1) * n].iter().any(|s| *s <= 0.0) {
                return Err(invalid("absorption", "zero-speed channels need positive absorption"));
            }
        }
        if let FarBoundary::Reflect(p) = &far {
            if p.len() != m || p.iter().enumerate().any(|(c, &r)| r >= m || (speeds[c] < 0.0 && !(speeds[r] > 0.0))) {
                return Err(invalid("far", "reflection partners must map incoming to outgoing channels"));
            }
        }
        Ok(Self { y, speeds, absorption, far })
    }

    /// Slab with channel-independent absorption profile `s(y_k) * weight_c`.
    pub fn with_separable_absorption(y: Vec<f64>, speeds: Vec<f64>, channel: &[f64], profile: &[f64], far: FarBoundary) -> Result<Self> {
        let n = y.len();
        let mut abs = vec![0.0; n * speeds.len()];
        for (c, w) in channel.iter().enumerate() {
            for k in 0..n {
                abs[c * n + k] = w * profile[k];
            }
        }
        Self::new(y, speeds, abs, far)
    }

    pub fn nodes(&self) -> usize {
        self.y.len()
    }

    pub fn channels(&self) -> usize {
        self.speeds.len()
    }

    pub fn len(&self) -> usize {
        self.nodes() * self.channels()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Solves the uncoupled system. `near[c]` is used for `v_c > 0`, `far[c]`
    /// for `v_c < 0` (added to the reflected value when reflecting).
    pub fn sweep(&self, q: &[f64], near: &[f64], far: &[f64]) -> Vec<f64> {
        let n = self.nodes();
        let mut u = vec![0.0; self.len()];
        let y = &self.y;
        u.par_chunks_mut(n).enumerate().for_each(|(c, uc)| {
            let v = self.speeds[c];
            let s = &self.absorption[c * n..(c + 1) * n];
            let qc = &q[c * n..(c + 1) * n];
            if v > 0.0 {
                uc[0] = near[c];
                for k in 0..n - 1 {
                    let a = v / (y[k + 1] - y[k]);
                    uc[k + 1] = (0.5 * (qc[k] + qc[k + 1]) + (a - 0.5 * s[k]) * uc[k]) / (a + 0.5 * s[k + 1]);
                }
            } else if v == 0.0 {
                for k in 0..n {
                    uc[k] = qc[k] / s[k];
                }
            }
        });
        let start: Vec<f64> = match &self.far {
            FarBoundary::Inflow => far.to_vec(),
            FarBoundary::Reflect(p) => (0..self.channels()).map(|c| if self.speeds[c] < 0.0 { u[p[c] * n + n - 1] + far[c] } else { 0.0 }).collect(),
        };
        u.par_chunks_mut(n).enumerate().for_each(|(c, uc)| {
            let v = self.speeds[c];
            if v < 0.0 {
                let s = &self.absorption[c * n..(c + 1) * n];
                let qc = &q[c * n..(c + 1) * n];
                uc[n - 1] = start[c];
                for k in (0..n - 1).rev() {
                    let a = -v / (y[k + 1] - y[k]);
                    uc[k] = (0.5 * (qc[k] + qc[k + 1]) + (a - 0.5 * s[k + 1]) * uc[k + 1]) / (a + 0.5 * s[k]);
                }
            }
        });
        u
    }

    /// Equation residuals of the uncoupled system in the sweep layout.
    pub fn residual(&self, u: &[f64], q: &[f64], near: &[f64], far: &[f64]) -> Vec<f64> {
        let n = self.nodes();
        let y = &self.y;
        let mut r = vec![0.0; self.len()];
        r.par_chunks_mut(n).enumerate().for_each(|(c, rc)| {
            let v = self.speeds[c];
            let s = &self.absorption[c * n..(c + 1) * n];
            let qc = &q[c * n..(c + 1) * n];
            let uc = &u[c * n..(c + 1) * n];
            let cell = |k: usize| v * (uc[k + 1] - uc[k]) / (y[k + 1] - y[k]) + 0.5 * (s[k] * uc[k] + s[k + 1] * uc[k + 1]) - 0.5 * (qc[k] + qc[k + 1]);
            if v > 0.0 {
                rc[0] = uc[0] - near[c];
                for k in 0..n - 1 {
                    rc[k + 1] = cell(k);
                }
            } else if v < 0.0 {
                for k in 0..n - 1 {
                    rc[k] = cell(k);
                }
                let target = match &self.far {
                    FarBoundary::Inflow => far[c],
                    FarBoundary::Reflect(p) => u[p[c] * n + n - 1] + far[c],
                };
                rc[n - 1] = uc[n - 1] - target;
            } else {
                for k in 0..n {
                    rc[k] = s[k] * uc[k] - qc[k];
                }
            }
        });
        r
    }

    /// Values of all channels at node `k`.
    pub fn node_values(&self, u: &[f64], k: usize) -> Vec<f64> {
        let n = self.nodes();
        (0..self.channels()).map(|c| u[c * n + k]).collect()
    }

    /// Writes `vals` (one per channel) into node `k`.
    pub fn set_node(&self, u: &mut [f64], k: usize, vals: &[f64]) {
        let n = self.nodes();
        for (c, x) in vals.iter().enumerate() {
            u[c * n + k] = *x;
        }
    }
}

/// Source pattern multiplying one coupling unknown.
#[derive(Clone, Debug)]
pub enum Column {
    /// node source `vector` at node `k`
    Node { k: usize, vector: Vec<f64> },
    /// inflow values at the first node
    Near(Vec<f64>),
    /// inflow (or reflection offset) values at the last node
    Far(Vec<f64>),
}

/// Linear functional `sum_terms sum_c w_c u[c, k]`.
#[derive(Clone, Debug, Default)]
pub struct Functional {
    pub terms: Vec<(usize, Vec<f64>)>,
}

impl Functional {
    pub fn node(k: usize, w: Vec<f64>) -> Self {
        Self { terms: vec![(k, w)] }
    }

    pub fn eval(&self, u: &[f64], n: usize) -> f64 {
        self.terms.iter().map(|(k, w)| w.iter().enumerate().map(|(c, x)| x * u[c * n + k]).sum::<f64>()).sum()
    }
}

/// Row `sum_i diag_i z_i + functional(u) = rhs`.
#[derive(Clone, Debug)]
pub struct Row {
    pub diag: Vec<(usize, f64)>,
    pub functional: Functional,
}

impl Row {
    /// `z_j = <w, u(k)>`, written as `z_j - <w, u(k)> = 0`.
    pub fn consistency(j: usize, k: usize, w: &[f64]) -> Self {
        Self { diag: vec![(j, 1.0)], functional: Functional::node(k, w.iter().map(|x| -x).collect()) }
    }
}

#[derive(Clone, Debug)]
pub struct ForcedSolve {
    pub u: Vec<f64>,
    pub z: Vec<f64>,
    pub gmres: Option<GmresReport>,
}

/// Slab system coupled through `columns` and closed by `rows`.
pub struct CoupledSolver<'a> {
    pub slab: &'a Slab,
    pub columns: Vec<Column>,
    pub rows: Vec<Row>,
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
}

fn add_columns(slab: &Slab, columns: &[Column], z: &[f64], q: &mut [f64], near: &mut [f64], far: &mut [f64]) {
    let n = slab.nodes();
    for (col, zi) in columns.iter().zip(z) {
        match col {
            Column::Node { k, vector } => {
                for (c, x) in vector.iter().enumerate() {
                    q[c * n + k] += zi * x;
                }
            }
            Column::Near(v) => {
                for (a, x) in near.iter_mut().zip(v) {
                    *a += zi * x;
                }
            }
            Column::Far(v) => {
                for (a, x) in far.iter_mut().zip(v) {
                    *a += zi * x;
                }
            }
        }
    }
}

impl<'a> CoupledSolver<'a> {
    pub fn new(slab: &'a Slab, columns: Vec<Column>, rows: Vec<Row>) -> Result<Self> {
        let nz = columns.len();
        if rows.len() != nz {
            return Err(invalid("rows", format!("{} rows for {} coupling unknowns", rows.len(), nz)));
        }
        let n = slab.nodes();
        let m = slab.channels();
        let cols: Vec<Vec<f64>> = columns
            .par_iter()
            .map(|col| {
                let mut q = vec![0.0; n * m];
                let mut near = vec![0.0; m];
                let mut far = vec![0.0; m];
                add_columns(slab, std::slice::from_ref(col), &[1.0], &mut q, &mut near, &mut far);
                let x = slab.sweep(&q, &near, &far);
                rows.iter().map(|r| r.functional.eval(&x, n)).collect()
            })
            .collect();
        let mut cap = DMatrix::<f64>::zeros(nz, nz);
        for (i, col) in cols.iter().enumerate() {
            for (j, v) in col.iter().enumerate() {
                cap[(j, i)] = *v;
            }
        }
        for (j, r) in rows.iter().enumerate() {
            for &(i, d) in &r.diag {
                cap[(j, i)] += d;
            }
        }
        let lu = cap.lu();
        if nz > 0 && !lu.is_invertible() {
            return Err(GhostError::Numerical("singular capacitance matrix".into()));
        }
        Ok(Self { slab, columns, rows, lu })
    }

    /// Solves the coupled system for node sources `q`, boundary data and row right-hand sides.
    pub fn solve(&self, q: &[f64], near: &[f64], far: &[f64], rhs: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = self.slab.nodes();
        let t = self.slab.sweep(q, near, far);
        if self.columns.is_empty() {
            return Ok((t, Vec::new()));
        }
        let b: Vec<f64> = self.rows.iter().zip(rhs).map(|(r, c)| c - r.functional.eval(&t, n)).collect();
        let z = self.lu.solve(&DVector::from_vec(b)).ok_or_else(|| GhostError::Numerical("capacitance solve failed".into()))?;
        let z: Vec<f64> = z.iter().cloned().collect();
        let mut q2 = q.to_vec();
        let mut near2 = near.to_vec();
        let mut far2 = far.to_vec();
        add_columns(self.slab, &self.columns, &z, &mut q2, &mut near2, &mut far2);
        Ok((self.slab.sweep(&q2, &near2, &far2), z))
    }

    /// Solves with an additional node source `force(u)` that is linear in `u`.
    ///
    /// The Krylov iteration runs in the norm weighted by `channel_scale`
    /// squared when given, so channels with negligible physical weight do not
    /// dominate the residual.
    #[allow(clippy::too_many_arguments)]
    pub fn solve_with_force<F>(
        &self,
        q: &[f64],
        near: &[f64],
        far: &[f64],
        rhs: &[f64],
        force: Option<&F>,
        channel_scale: Option<&[f64]>,
        tol: f64,
    ) -> Result<ForcedSolve>
    where
        F: Fn(&[f64]) -> Vec<f64> + Sync,
    {
        let Some(force) = force else {
            let (u, z) = self.solve(q, near, far, rhs)?;
            return Ok(ForcedSolve { u, z, gmres: None });
        };
        let m = self.slab.channels();
        let n = self.slab.nodes();
        let d: Vec<f64> = match channel_scale {
            Some(s) => {
                if s.len() != m || s.iter().any(|x| !(*x > 0.0)) {
                    return Err(invalid("channel_scale", "needs one positive entry per channel"));
                }
                s.iter().flat_map(|x| std::iter::repeat(*x).take(n)).collect()
            }
            None => vec![1.0; m * n],
        };
        let zero_b = vec![0.0; m];
        let zero_r = vec![0.0; rhs.len()];
        let (b, _) = self.solve(q, near, far, rhs)?;
        let apply = |xs: &[f64]| -> Result<Vec<f64>> {
            let x: Vec<f64> = xs.iter().zip(&d).map(|(a, s)| a / s).collect();
            let fx = force(&x);
            let (s, _) = self.solve(&fx, &zero_b, &zero_b, &zero_r)?;
            Ok(x.iter().zip(&s).zip(&d).map(|((a, b), w)| (a - b) * w).collect())
        };
        let bs: Vec<f64> = b.iter().zip(&d).map(|(a, s)| a * s).collect();
        let mut xs = bs.clone();
        let rep = gmres(apply, |v| Ok(v.to_vec()), &bs, &mut xs, tol, 200, 800)?;
        if !rep.converged {
            return Err(GhostError::NotConverged(format!(
                "force GMRES stalled at relative residual {:.3e} after {} iterations",
                rep.relative_residual, rep.iterations
            )));
        }
        let x: Vec<f64> = xs.iter().zip(&d).map(|(a, s)| a / s).collect();
        let fx = force(&x);
        let q2: Vec<f64> = q.iter().zip(&fx).map(|(a, b)| a + b).collect();
        let (u, z) = self.solve(&q2, near, far, rhs)?;
        Ok(ForcedSolve { u, z, gmres: Some(rep) })
    }

    /// Largest equation residual of `(u, z)` including the coupling rows,
    /// relative to the data, in the norm weighted by `channel_scale` squared.
    #[allow(clippy::too_many_arguments)]
    pub fn residual(&self, u: &[f64], z: &[f64], q: &[f64], near: &[f64], far: &[f64], rhs: &[f64], channel_scale: Option<&[f64]>) -> f64 {
        let mut q2 = q.to_vec();
        let mut near2 = near.to_vec();
        let mut far2 = far.to_vec();
        add_columns(self.slab, &self.columns, z, &mut q2, &mut near2, &mut far2);
        let mut r = self.slab.residual(u, &q2, &near2, &far2);
        let n = self.slab.nodes();
        let mut uw = u.to_vec();
        if let Some(d) = channel_scale {
            for (c, w) in d.iter().enumerate() {
                for k in 0..n {
                    r[c * n + k] *= w;
                    q2[c * n + k] *= w;
                    uw[c * n + k] *= w;
                }
                near2[c] *= w;
                far2[c] *= w;
            }
        }
        let scale = (norm2(&q2) + norm2(&near2) + norm2(&far2) + norm2(&uw)).max(1e-300);
        let mut worst = norm2(&r) / scale;
        let zs = norm2(z).max(1e-300);
        for (row, c) in self.rows.iter().zip(rhs) {
            let d: f64 = row.diag.iter().map(|(i, a)| a * z[*i]).sum();
            worst = worst.max((d + row.functional.eval(u, n) - c).abs() / (zs + c.abs()));
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy(far: FarBoundary) -> Slab {
        let y = vec![0.0, 0.1, 0.25, 0.5, 0.9, 1.4, 2.0];
        let speeds = vec![1.5, 0.5, 0.0, -0.5, -1.5];
        let n = y.len();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let abs: Vec<f64> = (0..n * speeds.len()).map(|_| rng.gen_range(0.5..2.0)).collect();
        Slab::new(y, speeds, abs, far).unwrap()
    }

    fn dense_solution(s: &CoupledSolver, q: &[f64], near: &[f64], far: &[f64], rhs: &[f64]) -> Vec<f64> {
        // residual is affine in (u, z): assemble it column by column
        let len = s.slab.len() + s.columns.len();
        let n = s.slab.nodes();
        let eval = |x: &[f64]| -> Vec<f64> {
            let (u, z) = x.split_at(s.slab.len());
            let mut q2 = q.to_vec();
            let mut n2 = near.to_vec();
            let mut f2 = far.to_vec();
            add_columns(s.slab, &s.columns, z, &mut q2, &mut n2, &mut f2);
            let mut r = s.slab.residual(u, &q2, &n2, &f2);
            for (row, c) in s.rows.iter().zip(rhs) {
                let d: f64 = row.diag.iter().map(|(i, a)| a * z[*i]).sum();
                r.push(d + row.functional.eval(u, n) - c);
            }
            r
        };
        let r0 = eval(&vec![0.0; len]);
        let mut a = DMatrix::zeros(len, len);
        for j in 0..len {
            let mut e = vec![0.0; len];
            e[j] = 1.0;
            let r = eval(&e);
            for i in 0..len {
                a[(i, j)] = r[i] - r0[i];
            }
        }
        let b = DVector::from_iterator(len, r0.iter().map(|x| -x));
        a.lu().solve(&b).unwrap().iter().cloned().collect()
    }

    #[test]
    fn sweep_satisfies_equations() {
        for far in [FarBoundary::Inflow, FarBoundary::Reflect(vec![0, 1, 2, 1, 0])] {
            let s = toy(far);
            let q: Vec<f64> = (0..s.len()).map(|i| (i as f64 * 0.37).sin()).collect();
            let near = vec![1.0, -2.0, 0.0, 0.0, 0.0];
            let farv = vec![0.0, 0.0, 0.0, 0.3, 0.7];
            let u = s.sweep(&q, &near, &farv);
            assert!(norm2(&s.residual(&u, &q, &near, &farv)) < 1e-12);
        }
    }

    #[test]
    fn coupled_solve_matches_dense_reference() {
        let s = toy(FarBoundary::Reflect(vec![0, 1, 2, 1, 0]));
        let n = s.nodes();
        let m = s.channels();
        let mut columns = Vec::new();
        let mut rows = Vec::new();
        for k in 0..n {
            let a: Vec<f64> = (0..m).map(|c| 0.3 + 0.1 * c as f64).collect();
            let b: Vec<f64> = (0..m).map(|c| 0.2 / (1.0 + c as f64)).collect();
            rows.push(Row::consistency(columns.len(), k, &b));
            columns.push(Column::Node { k, vector: a });
        }
        columns.push(Column::Near(vec![1.0, 1.0, 0.0, 0.0, 0.0]));
        rows.push(Row { diag: vec![], functional: Functional { terms: (0..n).map(|k| (k, vec![0.1; m])).collect() } });
        let solver = CoupledSolver::new(&s, columns, rows).unwrap();
        let q: Vec<f64> = (0..s.len()).map(|i| (i as f64 * 0.11).cos()).collect();
        let near = vec![0.0; m];
        let far = vec![0.0; m];
        let mut rhs = vec![0.0; n];
        rhs.push(2.0);
        let (u, z) = solver.solve(&q, &near, &far, &rhs).unwrap();
        let x = dense_solution(&solver, &q, &near, &far, &rhs);
        for i in 0..u.len() {
            assert!((u[i] - x[i]).abs() < 1e-10);
        }
        for i in 0..z.len() {
            assert!((z[i] - x[u.len() + i]).abs() < 1e-10);
        }
        assert!(solver.residual(&u, &z, &q, &near, &far, &rhs, None) < 1e-10);

        // a weak channel-mixing force through GMRES
        let force = |u: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; u.len()];
            for k in 0..n {
                for c in 0..m {
                    let up = if c + 1 < m { u[(c + 1) * n + k] } else { 0.0 };
                    out[c * n + k] = 0.2 * (up - u[c * n + k]);
                }
            }
            out
        };
        let fs = solver.solve_with_force(&q, &near, &far, &rhs, Some(&force), None, 1e-13).unwrap();
        let fu = force(&fs.u);
        let q2: Vec<f64> = q.iter().zip(&fu).map(|(a, b)| a + b).collect();
        assert!(solver.residual(&fs.u, &fs.z, &q2, &near, &far, &rhs, None) < 1e-9);
    }
}
