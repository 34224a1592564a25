//! Direct solver for the stationary scaled kinetic equation between the walls
//! `y = -pi` and `y = pi`:
//!
//! ```text
//! v_y dF/dy + kappa sigma(y) v_x (v_x dF/dv_y - v_y dF/dv_x) = (nu / eps) (M[F] - F)
//! ```
//!
//! with `kappa = eps^2 / (delta C)^2`, `sigma(y) = 2 pi / (2 pi + kappa (y + pi))`
//! and diffuse reflection. `M[F]` is the Maxwellian whose discrete mass,
//! momentum and energy equal those of `F`, so the discrete collision term
//! conserves them exactly.
//!
//! The unknown is the density `F` itself. Each Newton step solves a linear
//! slab problem: the rank-four Jacobian of `M[F]` per node and the wall
//! amplitudes `alpha` enter as coupling unknowns, the force through GMRES.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{Matrix4, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, GhostError, Result};
use crate::hydro::HydroSolution;
use crate::linalg::CubicSpline;
use crate::slab::{Column, CoupledSolver, FarBoundary, Functional, Row, Slab};
use crate::velocity_space::{build_grid, rotation_about_rest, weighted_norm, SpatialExponent, VelocityGrid};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// `phi = int F dv_z` and `psi = int v_z^2 F dv_z` on a `(v_x, v_y)` grid
    Reduced2D,
    Full3D,
}

/// Velocity discretisation in the chosen layout. Channel `c` carries speed
/// `vy[c]`; reduced layouts store all `phi` channels before all `psi` channels.
#[derive(Clone, Debug)]
pub struct PhaseGrid {
    pub layout: Layout,
    pub axis: Vec<f64>,
    pub axis_weights: Vec<f64>,
    pub vx: Vec<f64>,
    pub vy: Vec<f64>,
    pub vz: Vec<f64>,
    pub w: Vec<f64>,
    /// weight of each channel in the mass and momentum moments (0 on `psi`)
    pub mass_weight: Vec<f64>,
    /// weight of each channel in `sum w |v|^2 F`
    pub energy_weight: Vec<f64>,
    pub grid3: Option<Arc<VelocityGrid>>,
}

impl PhaseGrid {
    pub fn new(layout: Layout, extent: f64, points: usize) -> Result<Self> {
        let g = build_grid(extent, points)?;
        let n = points;
        let axis = g.axis.clone();
        let axis_weights = g.axis_weights.clone();
        match layout {
            Layout::Full3D => Ok(Self {
                layout,
                axis,
                axis_weights,
                vx: g.vx.clone(),
                vy: g.vy.clone(),
                vz: g.vz.clone(),
                w: g.weights.clone(),
                mass_weight: vec![1.0; g.len()],
                energy_weight: (0..g.len()).map(|i| g.speed_sq(i)).collect(),
                grid3: Some(Arc::new(g)),
            }),
            Layout::Reduced2D => {
                let mut s = Self {
                    layout,
                    axis: axis.clone(),
                    axis_weights: axis_weights.clone(),
                    vx: Vec::new(),
                    vy: Vec::new(),
                    vz: Vec::new(),
                    w: Vec::new(),
                    mass_weight: Vec::new(),
                    energy_weight: Vec::new(),
                    grid3: None,
                };
                for block in 0..2 {
                    for ix in 0..n {
                        for iy in 0..n {
                            s.vx.push(axis[ix]);
                            s.vy.push(axis[iy]);
                            s.vz.push(0.0);
                            s.w.push(axis_weights[ix] * axis_weights[iy]);
                            s.mass_weight.push(if block == 0 { 1.0 } else { 0.0 });
                            s.energy_weight.push(if block == 0 { axis[ix].powi(2) + axis[iy].powi(2) } else { 1.0 });
                        }
                    }
                }
                Ok(s)
            }
        }
    }

    pub fn len(&self) -> usize {
        self.vy.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vy.is_empty()
    }

    fn block(&self) -> usize {
        let n = self.axis.len();
        match self.layout {
            Layout::Full3D => n * n * n,
            Layout::Reduced2D => n * n,
        }
    }

    /// Maxwellian with parameters `(rho, u_x, u_y, T)` and its parameter derivatives.
    pub fn maxwellian(&self, th: [f64; 4], with_derivatives: bool) -> (Vec<f64>, Option<[Vec<f64>; 4]>) {
        let [rho, ux, uy, t] = th;
        let m = self.len();
        let b = self.block();
        let dim = match self.layout {
            Layout::Full3D => 3.0,
            Layout::Reduced2D => 2.0,
        };
        let norm = rho / (2.0 * PI * t).powf(0.5 * dim);
        let mut f = vec![0.0; m];
        let mut d: [Vec<f64>; 4] = Default::default();
        if with_derivatives {
            for x in d.iter_mut() {
                *x = vec![0.0; m];
            }
        }
        for c in 0..b {
            let cx = self.vx[c] - ux;
            let cy = self.vy[c] - uy;
            let c2 = cx * cx + cy * cy + self.vz[c] * self.vz[c];
            let phi = norm * (-0.5 * c2 / t).exp();
            f[c] = phi;
            if with_derivatives {
                d[0][c] = phi / rho;
                d[1][c] = phi * cx / t;
                d[2][c] = phi * cy / t;
                d[3][c] = phi * (0.5 * c2 / (t * t) - 0.5 * dim / t);
            }
            if self.layout == Layout::Reduced2D {
                // psi = T phi
                f[b + c] = t * phi;
                if with_derivatives {
                    for p in 0..3 {
                        d[p][b + c] = t * d[p][c];
                    }
                    d[3][b + c] = phi + t * d[3][c];
                }
            }
        }
        (f, with_derivatives.then_some(d))
    }

    /// Moment functionals: mass, `v_x`, `v_y` momentum and `sum w |v|^2 F`.
    pub fn moment_weights(&self) -> [Vec<f64>; 4] {
        let m = self.len();
        [
            (0..m).map(|c| self.w[c] * self.mass_weight[c]).collect(),
            (0..m).map(|c| self.w[c] * self.mass_weight[c] * self.vx[c]).collect(),
            (0..m).map(|c| self.w[c] * self.mass_weight[c] * self.vy[c]).collect(),
            (0..m).map(|c| self.w[c] * self.energy_weight[c]).collect(),
        ]
    }

    pub fn moments(&self, f: &[f64]) -> [f64; 4] {
        let mut out = [0.0; 4];
        for c in 0..self.len() {
            let a = self.w[c] * f[c];
            out[0] += a * self.mass_weight[c];
            out[1] += a * self.mass_weight[c] * self.vx[c];
            out[2] += a * self.mass_weight[c] * self.vy[c];
            out[3] += a * self.energy_weight[c];
        }
        out
    }

    /// `sum w v_y^2 F` and `sum w v_x^2 F`.
    pub fn normal_stresses(&self, f: &[f64]) -> (f64, f64) {
        let mut pyy = 0.0;
        let mut pxx = 0.0;
        for c in 0..self.len() {
            let a = self.w[c] * self.mass_weight[c] * f[c];
            pyy += a * self.vy[c] * self.vy[c];
            pxx += a * self.vx[c] * self.vx[c];
        }
        (pyy, pxx)
    }

    /// Maxwellian parameters whose discrete moments equal `target`, with the
    /// derivative of the Maxwellian with respect to the moments.
    pub fn match_moments(&self, target: [f64; 4]) -> Result<([f64; 4], Vec<f64>, [Vec<f64>; 4])> {
        if !(target[0] > 0.0) {
            return Err(GhostError::Numerical(format!("non-positive density {}", target[0])));
        }
        let rho = target[0];
        let ux = target[1] / rho;
        let uy = target[2] / rho;
        let t = (target[3] / rho - ux * ux - uy * uy) / 3.0;
        if !(t > 0.0) {
            return Err(GhostError::Numerical(format!("non-positive temperature {t}")));
        }
        let mut th = [rho, ux, uy, t];
        let mw = self.moment_weights();
        let jac_of = |d: &[Vec<f64>; 4]| -> Matrix4<f64> {
            let mut j = Matrix4::zeros();
            for r in 0..4 {
                for p in 0..4 {
                    j[(r, p)] = mw[r].iter().zip(&d[p]).map(|(a, b)| a * b).sum();
                }
            }
            j
        };
        for _ in 0..40 {
            let (f, d) = self.maxwellian(th, true);
            let d = d.unwrap();
            let mom = self.moments(&f);
            let res = Vector4::from_fn(|r, _| target[r] - mom[r]);
            let step = jac_of(&d).lu().solve(&res).ok_or_else(|| GhostError::Numerical("singular moment Jacobian".into()))?;
            for p in 0..4 {
                th[p] += step[p];
            }
            let scale = th[0].abs() + th[1].abs() + th[2].abs() + th[3].abs();
            if step.amax() <= 1e-15 * scale {
                break;
            }
        }
        let (f, d) = self.maxwellian(th, true);
        let d = d.unwrap();
        let jinv = jac_of(&d).try_inverse().ok_or_else(|| GhostError::Numerical("singular moment Jacobian".into()))?;
        let m = self.len();
        let mut dm: [Vec<f64>; 4] = Default::default();
        for r in 0..4 {
            dm[r] = (0..m).map(|c| (0..4).map(|p| d[p][c] * jinv[(p, r)]).sum()).collect();
        }
        Ok((th, f, dm))
    }

    /// Maxwellian `M(rho, T, (u_x, 0, 0))` evaluated pointwise.
    pub fn pointwise_maxwellian(&self, rho: f64, t: f64, ux: f64) -> Vec<f64> {
        self.maxwellian([rho, ux, 0.0, t], false).0
    }

    /// `M(sqrt(2 pi), 1, (u, 0, 0))` rescaled to unit discrete half flux.
    pub fn wall_maxwellian(&self, u: f64) -> Vec<f64> {
        let mut m = self.pointwise_maxwellian((2.0 * PI).sqrt(), 1.0, u);
        let flux: f64 = (0..self.len()).filter(|&c| self.vy[c] > 0.0).map(|c| self.w[c] * self.mass_weight[c] * self.vy[c] * m[c]).sum();
        for x in &mut m {
            *x /= flux;
        }
        m
    }

    /// `v_x (v_x d/dv_y - v_y d/dv_x) F` in flux form.
    pub fn rotation(&self, f: &[f64]) -> Vec<f64> {
        let n = self.axis.len();
        let mut out = vec![0.0; f.len()];
        match self.layout {
            Layout::Full3D => rotation_about_rest(&self.axis, &self.axis_weights, n, f, &mut out),
            Layout::Reduced2D => {
                let b = self.block();
                rotation_about_rest(&self.axis, &self.axis_weights, 1, &f[..b], &mut out[..b]);
                rotation_about_rest(&self.axis, &self.axis_weights, 1, &f[b..], &mut out[b..]);
            }
        }
        out
    }

    pub fn mass_flux(&self, f: &[f64]) -> f64 {
        (0..self.len()).map(|c| self.w[c] * self.mass_weight[c] * self.vy[c] * f[c]).sum()
    }
}

/// `sigma(y) = 2 pi / (2 pi + kappa (y + pi))`
pub fn sigma(kappa: f64, y: f64) -> f64 {
    2.0 * PI / (2.0 * PI + kappa * (y + PI))
}

/// `exp(int_{-pi}^y kappa sigma)`
pub fn flux_weight(kappa: f64, y: f64) -> f64 {
    (1.0 + kappa * (y + PI) / (2.0 * PI)).powf(2.0 * PI)
}

/// Symmetric mesh on `[-pi, pi]`: cells grow geometrically from `h_wall` by
/// `growth` up to `h_max`, then the half mesh is rescaled to end at `y = 0`.
pub fn channel_mesh(h_wall: f64, growth: f64, h_max: f64) -> Result<Vec<f64>> {
    if !(h_wall > 0.0 && growth >= 1.0 && h_max >= h_wall) {
        return Err(invalid("h_wall", "mesh needs 0 < h_wall <= h_max and growth >= 1"));
    }
    let mut half = vec![0.0];
    let mut h = h_wall;
    while *half.last().unwrap() < PI {
        half.push(half.last().unwrap() + h);
        h = (h * growth).min(h_max);
    }
    // drop a sliver last cell before rescaling
    if half.len() > 2 && PI - half[half.len() - 2] < 0.5 * (half[half.len() - 1] - half[half.len() - 2]) {
        half.pop();
    }
    let s = PI / *half.last().unwrap();
    let half: Vec<f64> = half.iter().map(|x| x * s).collect();
    let mut y: Vec<f64> = half.iter().map(|x| -PI + x).collect();
    for x in half.iter().rev().skip(1) {
        y.push(PI - x);
    }
    Ok(y)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KineticProblem {
    pub eps: f64,
    pub gamma: f64,
    pub c_const: f64,
    pub u_minus: f64,
    pub u_plus: f64,
    /// switch off the curvature force (the flat-channel limit)
    pub force: bool,
    pub layout: Layout,
    pub v_extent: f64,
    pub v_points: usize,
    pub nu: f64,
    pub h_wall_factor: f64,
    pub growth: f64,
    pub h_max: f64,
    pub tol: f64,
    pub max_newton: usize,
}

impl Default for KineticProblem {
    fn default() -> Self {
        Self {
            eps: 0.05,
            gamma: 0.1,
            c_const: 10.0,
            u_minus: 0.0,
            u_plus: 2.0 * PI,
            force: true,
            layout: Layout::Reduced2D,
            v_extent: 7.0,
            v_points: 29,
            nu: 1.0,
            h_wall_factor: 0.1,
            growth: 1.1,
            h_max: 2.0 * PI / 48.0,
            tol: 1e-8,
            max_newton: 30,
        }
    }
}

impl KineticProblem {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps <= 0.2) {
            return Err(invalid("eps", format!("must lie in (0, 0.2], got {}", self.eps)));
        }
        if !(self.gamma > 0.0 && self.gamma <= 0.5) {
            return Err(invalid("gamma", format!("must lie in (0, 0.5], got {}", self.gamma)));
        }
        if !(self.c_const > 0.0) {
            return Err(invalid("c_const", format!("C must be positive, got {}", self.c_const)));
        }
        if !(self.nu > 0.0) {
            return Err(invalid("nu", "collision rate must be positive"));
        }
        if !(self.tol > 0.0) {
            return Err(invalid("tol", "must be positive"));
        }
        Ok(())
    }

    pub fn delta(&self) -> f64 {
        self.gamma * self.eps.powf(2.0 / 3.0)
    }

    /// `eps^2 / (delta C)^2`
    pub fn kappa(&self) -> f64 {
        (self.eps / (self.delta() * self.c_const)).powi(2)
    }

    pub fn mesh(&self) -> Result<Vec<f64>> {
        channel_mesh(self.h_wall_factor * self.eps, self.growth, self.h_max)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FluxCheck {
    /// largest `|int v_y F|` over the nodes
    pub max_flux: f64,
    /// largest defect of the discrete relation between neighbouring fluxes
    pub identity_defect: f64,
    /// largest variation of `k(y) J(y)`
    pub weighted_variation: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Positivity {
    pub min_value: f64,
    pub undershoot: f64,
    pub node: usize,
    pub channel: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MomentFields {
    pub rho: Vec<f64>,
    pub u: Vec<f64>,
    pub u_y: Vec<f64>,
    pub temperature: Vec<f64>,
    pub p_yy: Vec<f64>,
    pub p_xx: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct KineticSolution {
    pub problem: KineticProblem,
    pub phase: Arc<PhaseGrid>,
    pub y: Vec<f64>,
    /// `f[k]` holds the channel values at `y[k]`
    pub f: Vec<Vec<f64>>,
    pub alpha: [f64; 2],
    pub moments: MomentFields,
    pub iterations: usize,
    pub residual: f64,
    pub residual_history: Vec<f64>,
    pub flux: FluxCheck,
    pub positivity: Positivity,
    pub closure: String,
}

struct State<'a> {
    prob: &'a KineticProblem,
    phase: &'a PhaseGrid,
    slab: Slab,
    y: Vec<f64>,
    sig: Vec<f64>,
    wall: [Vec<f64>; 2],
    mass_target: f64,
    trap: Vec<f64>,
}

impl State<'_> {
    fn node(&self, u: &[f64], k: usize) -> Vec<f64> {
        self.slab.node_values(u, k)
    }

    fn force_coeff(&self) -> f64 {
        if self.prob.force {
            self.prob.kappa()
        } else {
            0.0
        }
    }

    fn mass(&self, u: &[f64]) -> f64 {
        (0..self.y.len()).map(|k| self.trap[k] * self.phase.moments(&self.node(u, k))[0]).sum()
    }

    /// Nonlinear residual relative to the size of `u`.
    fn residual(&self, u: &[f64], alpha: [f64; 2]) -> Result<f64> {
        let n = self.y.len();
        let m = self.phase.len();
        let rate = self.prob.nu / self.prob.eps;
        let kap = self.force_coeff();
        let mut q = vec![0.0; n * m];
        for k in 0..n {
            let fk = self.node(u, k);
            let (_, mk, _) = self.phase.match_moments(self.phase.moments(&fk))?;
            let rot = if kap != 0.0 { self.phase.rotation(&fk) } else { vec![0.0; m] };
            let qk: Vec<f64> = (0..m).map(|c| rate * mk[c] - kap * self.sig[k] * rot[c]).collect();
            self.slab.set_node(&mut q, k, &qk);
        }
        let near: Vec<f64> = self.wall[0].iter().map(|x| alpha[0] * x).collect();
        let far: Vec<f64> = self.wall[1].iter().map(|x| alpha[1] * x).collect();
        let r = self.slab.residual(u, &q, &near, &far);
        let scale = crate::linalg::norm2(u).max(1e-300);
        let out = self.phase.mass_flux(&self.node(u, n - 1).iter().zip(&self.phase.vy).map(|(f, v)| if *v > 0.0 { *f } else { 0.0 }).collect::<Vec<_>>());
        let alpha_defect = (alpha[1] - out).abs() / alpha[1].abs().max(1e-300);
        let mass_defect = (self.mass(u) - self.mass_target).abs() / self.mass_target;
        Ok((crate::linalg::norm2(&r) / scale).max(alpha_defect).max(mass_defect))
    }
}

/// Initial guess `M(1, 1, (delta U(y), 0, 0))` from a velocity profile.
fn initial_guess(st: &State, profile: &dyn Fn(f64) -> f64) -> (Vec<f64>, [f64; 2]) {
    let n = st.y.len();
    let m = st.phase.len();
    let delta = st.prob.delta();
    let mut u = vec![0.0; n * m];
    for k in 0..n {
        let fk = st.phase.pointwise_maxwellian(1.0, 1.0, delta * profile(st.y[k]));
        st.slab.set_node(&mut u, k, &fk);
    }
    let out_minus: f64 = -(0..m).filter(|&c| st.phase.vy[c] < 0.0).map(|c| st.phase.w[c] * st.phase.mass_weight[c] * st.phase.vy[c] * u[c * n]).sum::<f64>();
    let out_plus: f64 = (0..m).filter(|&c| st.phase.vy[c] > 0.0).map(|c| st.phase.w[c] * st.phase.mass_weight[c] * st.phase.vy[c] * u[c * n + n - 1]).sum();
    (u, [out_minus, out_plus])
}

/// Solves the kinetic problem by Newton's method. `start` optionally supplies
/// the tangential velocity profile used for the initial guess (laminar otherwise).
pub fn solve_kinetic(prob: &KineticProblem, start: Option<&HydroSolution>) -> Result<KineticSolution> {
    prob.validate()?;
    let phase = Arc::new(PhaseGrid::new(prob.layout, prob.v_extent, prob.v_points)?);
    solve_kinetic_on(prob, phase, start)
}

pub fn solve_kinetic_on(prob: &KineticProblem, phase: Arc<PhaseGrid>, start: Option<&HydroSolution>) -> Result<KineticSolution> {
    prob.validate()?;
    let y = prob.mesh()?;
    let n = y.len();
    let m = phase.len();
    let delta = prob.delta();
    let rate = prob.nu / prob.eps;
    let kap = if prob.force { prob.kappa() } else { 0.0 };
    let slab = Slab::new(y.clone(), phase.vy.clone(), vec![rate; n * m], FarBoundary::Inflow)?;
    let sig: Vec<f64> = y.iter().map(|v| sigma(prob.kappa(), *v)).collect();
    let wall = [phase.wall_maxwellian(delta * prob.u_minus), phase.wall_maxwellian(delta * prob.u_plus)];
    let trap = crate::velocity_space::trapezoid_weights(&y);
    let spline = match start {
        Some(h) => Some((CubicSpline::new(&h.y, &h.u)?, CubicSpline::new(&h.y, &h.r)?, h.params.delta)),
        None => None,
    };
    // mass of the leading-order bulk density 1 + delta r, in units of the
    // discrete mass of the unit Maxwellian
    let unit = phase.moments(&phase.pointwise_maxwellian(1.0, 1.0, 0.0))[0];
    let mass_target = unit
        * match &spline {
            Some((_, r, d)) => y.iter().zip(&trap).map(|(yy, w)| w * (1.0 + d * r.eval(*yy))).sum(),
            None => 2.0 * PI,
        };
    let st = State { prob, phase: &phase, slab, y: y.clone(), sig, wall, mass_target, trap };
    let beta = (prob.u_plus - prob.u_minus) / (2.0 * PI);
    let laminar = |yy: f64| prob.u_minus + beta * (yy + PI);
    let (mut u, mut alpha) = match &spline {
        Some((s, _, _)) => initial_guess(&st, &|yy| s.eval(yy)),
        None => initial_guess(&st, &laminar),
    };
    // rescale to the target mass
    let s0 = st.mass_target / st.mass(&u);
    u.iter_mut().for_each(|x| *x *= s0);
    alpha.iter_mut().for_each(|x| *x *= s0);

    let mw = phase.moment_weights();
    let scale: Vec<f64> = {
        let m0 = phase.pointwise_maxwellian(1.0, 1.0, 0.0);
        (0..m).map(|c| (phase.w[c] / m0[c].max(1e-300)).sqrt().min(1e150)).collect()
    };
    let mut history = vec![st.residual(&u, alpha)?];
    let mut iterations = 0;
    while history.last().copied().unwrap() > prob.tol {
        if iterations >= prob.max_newton {
            return Err(GhostError::NotConverged(format!("kinetic Newton residuals {history:?}")));
        }
        iterations += 1;
        // linearisation of M[F] about the current iterate
        let mut q = vec![0.0; n * m];
        let mut columns = Vec::with_capacity(4 * n + 2);
        let mut rows = Vec::with_capacity(4 * n + 2);
        for k in 0..n {
            let fk = st.node(&u, k);
            let mom = phase.moments(&fk);
            let (_, mk, dm) = phase.match_moments(mom)?;
            // M[F] + M'(G - F) = (M[F] - M' F) + M' G
            let lin: Vec<f64> = (0..m).map(|c| mk[c] - (0..4).map(|r| dm[r][c] * mom[r]).sum::<f64>()).collect();
            st.slab.set_node(&mut q, k, &lin.iter().map(|x| rate * x).collect::<Vec<_>>());
            for r in 0..4 {
                rows.push(Row::consistency(columns.len(), k, &mw[r]));
                columns.push(Column::Node { k, vector: dm[r].iter().map(|x| rate * x).collect() });
            }
        }
        let near_col: Vec<f64> = st.wall[0].iter().zip(&phase.vy).map(|(x, v)| if *v > 0.0 { *x } else { 0.0 }).collect();
        let far_col: Vec<f64> = st.wall[1].iter().zip(&phase.vy).map(|(x, v)| if *v < 0.0 { *x } else { 0.0 }).collect();
        let j_minus = columns.len();
        columns.push(Column::Near(near_col));
        // total mass fixes alpha_-
        let mut mass_terms = Vec::with_capacity(n);
        for k in 0..n {
            mass_terms.push((k, mw[0].iter().map(|x| x * st.trap[k]).collect::<Vec<_>>()));
        }
        rows.push(Row { diag: vec![], functional: Functional { terms: mass_terms } });
        let j_plus = columns.len();
        columns.push(Column::Far(far_col));
        let out_w: Vec<f64> = (0..m).map(|c| if phase.vy[c] > 0.0 { -phase.w[c] * phase.mass_weight[c] * phase.vy[c] } else { 0.0 }).collect();
        rows.push(Row { diag: vec![(j_plus, 1.0)], functional: Functional::node(n - 1, out_w) });
        let mut rhs = vec![0.0; rows.len()];
        rhs[rows.len() - 2] = st.mass_target;
        let solver = CoupledSolver::new(&st.slab, columns, rows)?;
        let zero = vec![0.0; m];
        let sig = &st.sig;
        let force = |g: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; g.len()];
            for k in 0..n {
                let rot = phase.rotation(&st.slab.node_values(g, k));
                for c in 0..m {
                    out[c * n + k] = -kap * sig[k] * rot[c];
                }
            }
            out
        };
        let fs = solver.solve_with_force(&q, &zero, &zero, &rhs, if kap != 0.0 { Some(&force) } else { None }, Some(&scale), (1e-3 * prob.tol).max(3e-11))?;
        u = fs.u;
        alpha = [fs.z[j_minus], fs.z[j_plus]];
        let r = st.residual(&u, alpha)?;
        history.push(r);
        log::debug!("kinetic Newton {iterations}: residual {r:.3e}");
        let l = history.len();
        if l >= 3 && r > 0.5 * history[l - 2] && r < 1e3 * prob.tol.min(1e-10) {
            // rounding floor
            break;
        }
    }
    let residual = *history.last().unwrap();
    if residual > prob.tol {
        return Err(GhostError::NotConverged(format!("kinetic residual {residual:.3e} above {:.1e}", prob.tol)));
    }
    let f: Vec<Vec<f64>> = (0..n).map(|k| st.node(&u, k)).collect();
    let moments = moment_fields(&phase, &f);
    let flux = flux_check(&phase, &y, &f, kap, prob.kappa());
    let positivity = positivity(&f);
    if positivity.undershoot > 1e-12 {
        log::warn!(
            "negative density {:.3e} at node {} channel {}",
            positivity.min_value,
            positivity.node,
            positivity.channel
        );
    }
    Ok(KineticSolution {
        problem: prob.clone(),
        phase,
        y,
        f,
        alpha,
        moments,
        iterations,
        residual,
        residual_history: history,
        flux,
        positivity,
        closure: "bgk: exact local Maxwellian, discrete moment matching".into(),
    })
}

fn moment_fields(phase: &PhaseGrid, f: &[Vec<f64>]) -> MomentFields {
    let mut out = MomentFields { rho: vec![], u: vec![], u_y: vec![], temperature: vec![], p_yy: vec![], p_xx: vec![] };
    for fk in f {
        let m = phase.moments(fk);
        let rho = m[0];
        let ux = m[1] / rho;
        let uy = m[2] / rho;
        let (pyy, pxx) = phase.normal_stresses(fk);
        out.rho.push(rho);
        out.u.push(ux);
        out.u_y.push(uy);
        out.temperature.push((m[3] / rho - ux * ux - uy * uy) / 3.0);
        out.p_yy.push(pyy);
        out.p_xx.push(pxx);
    }
    out
}

fn flux_check(phase: &PhaseGrid, y: &[f64], f: &[Vec<f64>], kap: f64, kappa_geom: f64) -> FluxCheck {
    let j: Vec<f64> = f.iter().map(|fk| phase.mass_flux(fk)).collect();
    let mut defect = 0.0f64;
    for k in 0..y.len() - 1 {
        let h = y[k + 1] - y[k];
        let (s0, s1) = (sigma(kappa_geom, y[k]), sigma(kappa_geom, y[k + 1]));
        let d = (j[k + 1] - j[k]) + 0.5 * h * kap * (s0 * j[k] + s1 * j[k + 1]);
        defect = defect.max(d.abs());
    }
    let kj: Vec<f64> = y.iter().zip(&j).map(|(yy, jj)| if kap != 0.0 { flux_weight(kappa_geom, *yy) * jj } else { *jj }).collect();
    let var = kj.iter().map(|v| (v - kj[0]).abs()).fold(0.0, f64::max);
    FluxCheck { max_flux: j.iter().fold(0.0, |a, b| a.max(b.abs())), identity_defect: defect, weighted_variation: var }
}

fn positivity(f: &[Vec<f64>]) -> Positivity {
    let mut p = Positivity { min_value: f64::INFINITY, undershoot: 0.0, node: 0, channel: 0 };
    for (k, fk) in f.iter().enumerate() {
        for (c, v) in fk.iter().enumerate() {
            if *v < p.min_value {
                p.min_value = *v;
                p.node = k;
                p.channel = c;
            }
        }
    }
    p.undershoot = (-p.min_value).max(0.0);
    p
}

impl KineticSolution {
    /// `(p_yy(pi) - p_yy(-pi)) / eps^2`
    pub fn pressure_variation(&self) -> f64 {
        let p = &self.moments.p_yy;
        (p[p.len() - 1] - p[0]) / self.problem.eps.powi(2)
    }

    /// Field `M(1, 1, (delta U(y), 0, 0))` on the solution mesh.
    pub fn drifting_reference(&self, profile: &dyn Fn(f64) -> f64) -> Vec<Vec<f64>> {
        let d = self.problem.delta();
        self.y.iter().map(|yy| self.phase.pointwise_maxwellian(1.0, 1.0, d * profile(*yy))).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["y", "rho", "U", "u_y", "T", "p_yy", "p_xx"])?;
        let mo = &self.moments;
        for k in 0..self.y.len() {
            let rec = [self.y[k], mo.rho[k], mo.u[k], mo.u_y[k], mo.temperature[k], mo.p_yy[k], mo.p_xx[k]];
            w.write_record(rec.iter().map(|v| format!("{v:.15e}")))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn manifest(&self) -> KineticManifest {
        KineticManifest {
            problem: self.problem.clone(),
            delta: self.problem.delta(),
            kappa: self.problem.kappa(),
            nodes: self.y.len(),
            channels: self.phase.len(),
            alpha: self.alpha,
            iterations: self.iterations,
            residual: self.residual,
            residual_history: self.residual_history.clone(),
            flux: self.flux.clone(),
            positivity: self.positivity.clone(),
            closure: self.closure.clone(),
        }
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&self.manifest())?)?;
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KineticManifest {
    pub problem: KineticProblem,
    pub delta: f64,
    pub kappa: f64,
    pub nodes: usize,
    pub channels: usize,
    pub alpha: [f64; 2],
    pub iterations: usize,
    pub residual: f64,
    pub residual_history: Vec<f64>,
    pub flux: FluxCheck,
    pub positivity: Positivity,
    pub closure: String,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct DeviationNorms {
    pub eps: f64,
    pub norm22: f64,
    pub norminf2: f64,
}

/// `|| (F - reference) / M ||` in the `(2,2)` and `(inf,2)` norms, with `M`
/// the standard Maxwellian. Needs the full velocity layout.
pub fn deviation_norms(sol: &KineticSolution, reference: &[Vec<f64>]) -> Result<DeviationNorms> {
    let grid = sol.phase.grid3.as_ref().ok_or_else(|| invalid("layout", "deviation norms need the full velocity layout"))?;
    if reference.len() != sol.f.len() {
        return Err(invalid("reference", "one velocity slice per node is required"));
    }
    let m0 = sol.phase.pointwise_maxwellian(1.0, 1.0, 0.0);
    let field: Vec<Vec<f64>> = sol
        .f
        .iter()
        .zip(reference)
        .map(|(fk, rk)| fk.iter().zip(rk).zip(&m0).map(|((a, b), m)| (a - b) / m).collect())
        .collect();
    Ok(DeviationNorms {
        eps: sol.problem.eps,
        norm22: weighted_norm(&field, &sol.y, grid, &m0, 0, SpatialExponent::Two)?,
        norminf2: weighted_norm(&field, &sol.y, grid, &m0, 0, SpatialExponent::Infinity)?,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GhostRow {
    pub eps: f64,
    pub delta: f64,
    /// pressure variation with the force on
    pub p2_force: f64,
    /// same with the force switched off
    pub p2_flat: f64,
    /// force on with `2 C`
    pub p2_double_c: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GhostReport {
    pub gamma: f64,
    pub c_const: f64,
    /// `int (U- + beta s)^2 ds / C^2`
    pub limit: f64,
    pub rows: Vec<GhostRow>,
}

impl GhostReport {
    pub fn relative_error(&self) -> f64 {
        let last = self.rows.last().map(|r| r.p2_force).unwrap_or(f64::NAN);
        ((last - self.limit) / self.limit).abs()
    }

    /// Ratio of the force-on variation at `C` and at `2 C` for the smallest `eps`.
    pub fn c_ratio(&self) -> f64 {
        self.rows.last().map(|r| r.p2_force / r.p2_double_c).unwrap_or(f64::NAN)
    }

    pub fn flat_fraction(&self) -> f64 {
        self.rows.last().map(|r| (r.p2_flat / self.limit).abs()).unwrap_or(f64::NAN)
    }
}

/// Second-order normal pressure variation across the channel for a sweep in
/// `eps`, with the force on, off, and at doubled `C`.
pub fn ghost_demonstration(eps_sweep: &[f64], gamma: f64, c_const: f64, base: &KineticProblem) -> Result<GhostReport> {
    let mut rows = Vec::with_capacity(eps_sweep.len());
    let beta = (base.u_plus - base.u_minus) / (2.0 * PI);
    let l = 2.0 * PI;
    let um = base.u_minus;
    let limit = (um * um * l + um * beta * l * l + beta * beta * l * l * l / 3.0) / (c_const * c_const);
    let phase = Arc::new(PhaseGrid::new(base.layout, base.v_extent, base.v_points)?);
    for &eps in eps_sweep {
        let mk = |c: f64, force: bool| KineticProblem { eps, gamma, c_const: c, force, ..base.clone() };
        let on = solve_kinetic_on(&mk(c_const, true), phase.clone(), None)?;
        let off = solve_kinetic_on(&mk(c_const, false), phase.clone(), None)?;
        let dc = solve_kinetic_on(&mk(2.0 * c_const, true), phase.clone(), None)?;
        rows.push(GhostRow {
            eps,
            delta: on.problem.delta(),
            p2_force: on.pressure_variation(),
            p2_flat: off.pressure_variation(),
            p2_double_c: dc.pressure_variation(),
        });
    }
    Ok(GhostReport { gamma, c_const, limit, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mesh_is_symmetric_and_graded() {
        let y = channel_mesh(0.005, 1.1, 2.0 * PI / 48.0).unwrap();
        let n = y.len();
        assert!((y[0] + PI).abs() < 1e-14 && (y[n - 1] - PI).abs() < 1e-14);
        for k in 0..n {
            assert!((y[k] + y[n - 1 - k]).abs() < 1e-12);
        }
        assert!(y[1] - y[0] < 0.006);
    }

    #[test]
    fn moment_matching_reproduces_moments() {
        for layout in [Layout::Reduced2D, Layout::Full3D] {
            let p = PhaseGrid::new(layout, 6.0, 13).unwrap();
            let f: Vec<f64> = (0..p.len()).map(|c| (-0.6 * (p.vx[c] - 0.3).powi(2) - 0.4 * p.vy[c].powi(2) - 0.5 * p.vz[c].powi(2)).exp() * if p.mass_weight[c] > 0.0 { 1.0 } else { 0.9 }).collect();
            let mom = p.moments(&f);
            let (_, m, dm) = p.match_moments(mom).unwrap();
            let mm = p.moments(&m);
            for r in 0..4 {
                assert!((mm[r] - mom[r]).abs() < 1e-12 * mom[0], "{layout:?} {r}");
            }
            // derivative columns map moment r to the unit vector
            for r in 0..4 {
                let d = p.moments(&dm[r]);
                for s in 0..4 {
                    assert!((d[s] - if r == s { 1.0 } else { 0.0 }).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn wall_maxwellian_unit_half_flux() {
        let p = PhaseGrid::new(Layout::Reduced2D, 6.0, 13).unwrap();
        let m = p.wall_maxwellian(0.2);
        let inflow: f64 = (0..p.len()).filter(|&c| p.vy[c] > 0.0).map(|c| p.w[c] * p.mass_weight[c] * p.vy[c] * m[c]).sum();
        let outflow: f64 = (0..p.len()).filter(|&c| p.vy[c] < 0.0).map(|c| -p.w[c] * p.mass_weight[c] * p.vy[c] * m[c]).sum();
        assert!((inflow - 1.0).abs() < 1e-13 && (outflow - 1.0).abs() < 1e-13);
    }

    #[test]
    fn equilibrium_is_a_fixed_point() {
        let prob = KineticProblem { eps: 0.1, u_plus: 0.0, force: false, v_points: 13, v_extent: 6.0, ..Default::default() };
        let sol = solve_kinetic(&prob, None).unwrap();
        assert!(sol.iterations <= 3);
        assert!(sol.residual <= 1e-8);
        let m0 = sol.phase.pointwise_maxwellian(1.0, 1.0, 0.0);
        let dev = sol.f.iter().flat_map(|fk| fk.iter().zip(&m0).map(|(a, b)| (a - b).abs())).fold(0.0, f64::max);
        assert!(dev < 1e-12, "{dev}");
    }

    #[test]
    fn sheared_flow_conserves_flux() {
        let prob = KineticProblem { eps: 0.1, gamma: 0.1, c_const: 10.0, v_points: 15, v_extent: 6.0, ..Default::default() };
        let sol = solve_kinetic(&prob, None).unwrap();
        assert!(sol.flux.max_flux < 1e-9, "{:?}", sol.flux);
        assert!(sol.flux.identity_defect < 1e-9);
        assert!(sol.residual <= 1e-8);
        // tangential velocity between the wall speeds and increasing
        let d = prob.delta();
        assert!(sol.moments.u.windows(2).all(|w| w[1] > w[0]));
        assert!(sol.moments.u[0] > 0.0 && *sol.moments.u.last().unwrap() < d * 2.0 * PI);
    }
}
