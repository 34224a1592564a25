//! The limiting fluid system for the tangential velocity `U`, the temperature
//! correction `tau`, the density correction `r` and the second-order pressure `P2`.
//!
//! With `T = 1 + delta tau` and `eta, kappa` evaluated at `T`:
//!
//! ```text
//! d/dy (eta dU/dy) = 0,                      U(-pi) = U-,  U(pi) = U+
//! d/dy (kappa dtau/dy) + delta eta (dU/dy)^2 = 0,   tau(+-pi) = 0
//! r = -tau / (1 + delta tau)
//! dP2/dy = rho U^2 / C^2 + delta d/dy (sigma1 (dtau/dy)^2),   P2(-pi) = 0
//! ```

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, GhostError, Result};
use crate::linalg::{norm_inf, solve_tridiagonal, CubicSpline};
use crate::transport::TransportTable;
use crate::velocity_space::{evaluate_maxwellian, trapezoid_weights, weighted_norm, MaxwellianState, SpatialExponent, VelocityGrid};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HydroParams {
    pub delta: f64,
    pub c_const: f64,
    pub u_minus: f64,
    pub u_plus: f64,
    pub ny: usize,
    pub tol: f64,
    pub max_iter: usize,
    pub damping: f64,
}

impl Default for HydroParams {
    fn default() -> Self {
        Self { delta: 0.05, c_const: 1.0, u_minus: 0.0, u_plus: 2.0 * PI, ny: 257, tol: 1e-10, max_iter: 200, damping: 0.8 }
    }
}

impl HydroParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=0.5).contains(&self.delta) {
            return Err(invalid("delta", format!("must lie in [0, 0.5], got {}", self.delta)));
        }
        if !(self.c_const > 0.0) {
            return Err(invalid("c_const", format!("must be positive, got {}", self.c_const)));
        }
        if self.ny < 33 {
            return Err(invalid("ny", format!("must be at least 33, got {}", self.ny)));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(invalid("damping", "must lie in (0, 1]"));
        }
        if !self.u_minus.is_finite() || !self.u_plus.is_finite() {
            return Err(invalid("u_minus", "wall velocities must be finite"));
        }
        Ok(())
    }

    pub fn beta(&self) -> f64 {
        (self.u_plus - self.u_minus) / (2.0 * PI)
    }

    pub fn nodes(&self) -> Vec<f64> {
        let h = 2.0 * PI / (self.ny - 1) as f64;
        (0..self.ny).map(|i| if i + 1 == self.ny { PI } else { -PI + h * i as f64 }).collect()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HydroSolution {
    pub params: HydroParams,
    pub y: Vec<f64>,
    pub u: Vec<f64>,
    pub u_bar: Vec<f64>,
    pub u_tilde: Vec<f64>,
    pub tau: Vec<f64>,
    pub r: Vec<f64>,
    pub p2: Vec<f64>,
    pub sigma1: f64,
    pub iterations: usize,
    pub residual: f64,
    pub ode_residual: f64,
    pub damped: bool,
}

fn half_avg(v: &[f64]) -> Vec<f64> {
    v.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
}

/// `U` with `eta_{i+1/2} (U_{i+1} - U_i)` constant and the wall values imposed.
fn solve_velocity(eta_half: &[f64], h: f64, um: f64, up: f64) -> Vec<f64> {
    let inv: Vec<f64> = eta_half.iter().map(|e| h / e).collect();
    let total: f64 = inv.iter().sum();
    let flux = (up - um) / total;
    let mut u = Vec::with_capacity(eta_half.len() + 1);
    u.push(um);
    let mut acc = um;
    for r in &inv {
        acc += flux * r;
        u.push(acc);
    }
    *u.last_mut().unwrap() = up;
    u
}

/// `d/dy(k dx/dy) = -s` with `x(+-pi) = 0` (plus prescribed wall values `x0`, `x1`).
fn solve_diffusion(k_half: &[f64], s: &[f64], h: f64, x0: f64, x1: f64) -> Result<Vec<f64>> {
    let n = s.len();
    let mut a = vec![0.0; n];
    let mut b = vec![1.0; n];
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    d[0] = x0;
    d[n - 1] = x1;
    for i in 1..n - 1 {
        a[i] = k_half[i - 1] / (h * h);
        c[i] = k_half[i] / (h * h);
        b[i] = -(a[i] + c[i]);
        d[i] = -s[i];
    }
    solve_tridiagonal(&a, &b, &c, &d)
}

fn heating(eta_half: &[f64], u: &[f64], h: f64) -> Vec<f64> {
    let n = u.len();
    let mut s = vec![0.0; n];
    for i in 1..n - 1 {
        let gp = (u[i + 1] - u[i]) / h;
        let gm = (u[i] - u[i - 1]) / h;
        s[i] = 0.5 * (eta_half[i] * gp * gp + eta_half[i - 1] * gm * gm);
    }
    s
}

/// Laminar solution `U = U- + beta (y + pi)`, `tau = r = 0`.
pub fn laminar(params: &HydroParams) -> Result<HydroSolution> {
    params.validate()?;
    let y = params.nodes();
    let beta = params.beta();
    let u_bar: Vec<f64> = y.iter().map(|yy| params.u_minus + beta * (yy + PI)).collect();
    let n = y.len();
    let mut sol = HydroSolution {
        params: params.clone(),
        y,
        u: u_bar.clone(),
        u_bar,
        u_tilde: vec![0.0; n],
        tau: vec![0.0; n],
        r: vec![0.0; n],
        p2: vec![0.0; n],
        sigma1: 0.0,
        iterations: 0,
        residual: 0.0,
        ode_residual: 0.0,
        damped: false,
    };
    sol.p2 = pressure_profile(&sol, 0.0);
    Ok(sol)
}

/// Fixed-point iteration on `(U, tau)` with transport coefficients at `1 + delta tau`.
pub fn solve_coupled(params: &HydroParams, table: &TransportTable) -> Result<HydroSolution> {
    params.validate()?;
    if params.delta > 0.3 {
        log::warn!("delta = {} is outside the perturbative range", params.delta);
    }
    let mut sol = laminar(params)?;
    sol.sigma1 = table.sigma1;
    let n = params.ny;
    let h = 2.0 * PI / (n - 1) as f64;
    let d = params.delta;
    let (tmin, tmax) = table.range();
    let mut tau = vec![0.0; n];
    let mut u = sol.u_bar.clone();
    let mut omega = 1.0;
    let mut last = f64::INFINITY;
    let mut converged = false;
    let mut iterations = 0;
    let mut residual = f64::INFINITY;
    for it in 1..=params.max_iter {
        iterations = it;
        let temps: Vec<f64> = tau.iter().map(|t| 1.0 + d * t).collect();
        if temps.iter().any(|t| *t < tmin || *t > tmax) {
            return Err(GhostError::Numerical("temperature left the tabulated transport range".into()));
        }
        let eta: Vec<f64> = temps.iter().map(|t| table.eta_at(*t)).collect();
        let kappa: Vec<f64> = temps.iter().map(|t| table.kappa_at(*t)).collect();
        let eta_h = half_avg(&eta);
        let kappa_h = half_avg(&kappa);
        let u_new = solve_velocity(&eta_h, h, params.u_minus, params.u_plus);
        let s: Vec<f64> = heating(&eta_h, &u_new, h).iter().map(|x| d * x).collect();
        let tau_new = solve_diffusion(&kappa_h, &s, h, 0.0, 0.0)?;
        let du = u_new.iter().zip(&u).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        let dt = tau_new.iter().zip(&tau).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        residual = du + dt;
        if residual > 0.9 * last && omega == 1.0 {
            omega = params.damping;
            sol.damped = true;
        }
        last = residual;
        for i in 0..n {
            tau[i] += omega * (tau_new[i] - tau[i]);
        }
        u = u_new;
        if residual <= params.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(GhostError::NotConverged(format!("hydro fixed point stalled at residual {residual:.3e} after {iterations} iterations")));
    }
    sol.u_tilde = u.iter().zip(&sol.u_bar).map(|(a, b)| a - b).collect();
    sol.u = u;
    sol.r = tau.iter().map(|t| -t / (1.0 + d * t)).collect();
    sol.tau = tau;
    sol.iterations = iterations;
    sol.residual = residual;
    sol.ode_residual = ode_residual(&sol, table);
    sol.p2 = pressure_profile(&sol, table.sigma1);
    Ok(sol)
}

/// Largest residual of the discrete momentum and energy equations.
pub fn ode_residual(sol: &HydroSolution, table: &TransportTable) -> f64 {
    let n = sol.y.len();
    let h = sol.y[1] - sol.y[0];
    let d = sol.params.delta;
    let eta: Vec<f64> = sol.tau.iter().map(|t| table.eta_at(1.0 + d * t)).collect();
    let kappa: Vec<f64> = sol.tau.iter().map(|t| table.kappa_at(1.0 + d * t)).collect();
    let eh = half_avg(&eta);
    let kh = half_avg(&kappa);
    let s = heating(&eh, &sol.u, h);
    let mut worst = 0.0f64;
    for i in 1..n - 1 {
        let mom = (eh[i] * (sol.u[i + 1] - sol.u[i]) - eh[i - 1] * (sol.u[i] - sol.u[i - 1])) / (h * h);
        let en = (kh[i] * (sol.tau[i + 1] - sol.tau[i]) - kh[i - 1] * (sol.tau[i] - sol.tau[i - 1])) / (h * h) + d * s[i];
        worst = worst.max(mom.abs()).max(en.abs());
    }
    worst
}

fn pressure_profile(sol: &HydroSolution, sigma1: f64) -> Vec<f64> {
    let c2 = sol.params.c_const * sol.params.c_const;
    let d = sol.params.delta;
    let n = sol.y.len();
    let integrand: Vec<f64> = (0..n).map(|i| (1.0 + d * sol.r[i]) * sol.u[i] * sol.u[i] / c2).collect();
    let mut p = vec![0.0; n];
    for i in 1..n {
        p[i] = p[i - 1] + 0.5 * (sol.y[i] - sol.y[i - 1]) * (integrand[i] + integrand[i - 1]);
    }
    if sigma1 != 0.0 {
        let h = sol.y[1] - sol.y[0];
        let grad = |i: usize| -> f64 {
            if i == 0 {
                (sol.tau[1] - sol.tau[0]) / h
            } else if i + 1 == n {
                (sol.tau[n - 1] - sol.tau[n - 2]) / h
            } else {
                (sol.tau[i + 1] - sol.tau[i - 1]) / (2.0 * h)
            }
        };
        let g0 = grad(0).powi(2);
        for (i, pi) in p.iter_mut().enumerate() {
            *pi += d * sigma1 * (grad(i).powi(2) - g0);
        }
    }
    p
}

/// Recomputes `P2` from the stored fields.
pub fn recover_pressure(sol: &mut HydroSolution, table: &TransportTable) {
    sol.p2 = pressure_profile(sol, table.sigma1);
}

/// `(2 pi)^3 beta^2 / (3 C^2)`, the laminar value of `P2(pi)` for `U- = 0`.
pub fn laminar_pressure_limit(params: &HydroParams) -> f64 {
    let b = params.beta();
    let um = params.u_minus;
    // integral of (U- + beta s)^2 over s in [0, 2 pi]
    let l = 2.0 * PI;
    (um * um * l + um * b * l * l + b * b * l * l * l / 3.0) / (params.c_const * params.c_const)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DeviationReport {
    pub delta: f64,
    pub sup_u: f64,
    pub l2_u: f64,
    pub sup_tau: f64,
    pub l2_tau: f64,
    pub sup_r: f64,
    /// `|| M^{-1} (M_delta - M_delta^0) ||` for q = 2 and q = infinity
    pub second_order: [f64; 2],
    /// `|| M^{-1} (M_delta^0 - M) ||` for q = 2 and q = infinity
    pub first_order: [f64; 2],
}

/// Compares a solution with the limiting (laminar) one on the same nodes.
pub fn compare_to_limit(sol: &HydroSolution, limit: &HydroSolution, grid: &VelocityGrid) -> Result<DeviationReport> {
    if sol.y.len() != limit.y.len() {
        return Err(invalid("limit", "solutions must share the spatial grid"));
    }
    let wy = trapezoid_weights(&sol.y);
    let du: Vec<f64> = sol.u.iter().zip(&limit.u).map(|(a, b)| a - b).collect();
    let l2 = |v: &[f64]| v.iter().zip(&wy).map(|(x, w)| w * x * x).sum::<f64>().sqrt();
    let d = sol.params.delta;
    let m0 = evaluate_maxwellian(&MaxwellianState::standard(), grid);
    let mut second = Vec::with_capacity(sol.y.len());
    let mut first = Vec::with_capacity(sol.y.len());
    for k in 0..sol.y.len() {
        let md = evaluate_maxwellian(&MaxwellianState { rho: 1.0 + d * sol.r[k], temperature: 1.0 + d * sol.tau[k], velocity: [d * sol.u[k], 0.0, 0.0] }, grid);
        let md0 = evaluate_maxwellian(&MaxwellianState { rho: 1.0, temperature: 1.0, velocity: [d * limit.u[k], 0.0, 0.0] }, grid);
        second.push(md.iter().zip(&md0).zip(&m0).map(|((a, b), m)| (a - b) / m).collect::<Vec<f64>>());
        first.push(md0.iter().zip(&m0).map(|(a, m)| (a - m) / m).collect::<Vec<f64>>());
    }
    let q2 = SpatialExponent::Two;
    let qi = SpatialExponent::Infinity;
    Ok(DeviationReport {
        delta: d,
        sup_u: norm_inf(&du),
        l2_u: l2(&du),
        sup_tau: norm_inf(&sol.tau),
        l2_tau: l2(&sol.tau),
        sup_r: norm_inf(&sol.r),
        second_order: [weighted_norm(&second, &sol.y, grid, &m0, 0, q2)?, weighted_norm(&second, &sol.y, grid, &m0, 0, qi)?],
        first_order: [weighted_norm(&first, &sol.y, grid, &m0, 0, q2)?, weighted_norm(&first, &sol.y, grid, &m0, 0, qi)?],
    })
}

/// Linearisation of the fluid system about `sol`: given wall data for a
/// velocity perturbation `u1` and temperature perturbation `tau1`, returns
/// `(u1, tau1)` on the solution nodes.
pub fn linearized_solve(sol: &HydroSolution, table: &TransportTable, u1_walls: (f64, f64), tau1_walls: (f64, f64)) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = sol.y.len();
    let h = sol.y[1] - sol.y[0];
    let d = sol.params.delta;
    let temps: Vec<f64> = sol.tau.iter().map(|t| 1.0 + d * t).collect();
    let eta: Vec<f64> = temps.iter().map(|t| table.eta_at(*t)).collect();
    let kappa: Vec<f64> = temps.iter().map(|t| table.kappa_at(*t)).collect();
    let deta: Vec<f64> = temps.iter().map(|t| table.eta_prime(*t, 1e-4)).collect();
    let dkappa: Vec<f64> = temps.iter().map(|t| table.kappa_prime(*t, 1e-4)).collect();
    let eh = half_avg(&eta);
    let kh = half_avg(&kappa);
    let mut u1: Vec<f64> = (0..n).map(|i| u1_walls.0 + (u1_walls.1 - u1_walls.0) * i as f64 / (n - 1) as f64).collect();
    let mut tau1: Vec<f64> = (0..n).map(|i| tau1_walls.0 + (tau1_walls.1 - tau1_walls.0) * i as f64 / (n - 1) as f64).collect();
    for _ in 0..200 {
        // d(eta du1 + delta eta' tau1 dU) = 0
        let stress: Vec<f64> = (0..n - 1)
            .map(|i| 0.5 * d * (deta[i] * tau1[i] + deta[i + 1] * tau1[i + 1]) * (sol.u[i + 1] - sol.u[i]) / h)
            .collect();
        let mut src = vec![0.0; n];
        for i in 1..n - 1 {
            src[i] = (stress[i] - stress[i - 1]) / h;
        }
        let u_new = solve_diffusion(&eh, &src, h, u1_walls.0, u1_walls.1)?;
        // d(kappa dtau1 + delta kappa' tau1 dtau) + delta (2 eta dU du1 + delta eta' tau1 dU^2) = 0
        let hflux: Vec<f64> = (0..n - 1)
            .map(|i| 0.5 * d * (dkappa[i] * tau1[i] + dkappa[i + 1] * tau1[i + 1]) * (sol.tau[i + 1] - sol.tau[i]) / h)
            .collect();
        let mut s2 = vec![0.0; n];
        for i in 1..n - 1 {
            let heat = |j: usize| -> f64 {
                let gu = (sol.u[j + 1] - sol.u[j]) / h;
                let gu1 = (u_new[j + 1] - u_new[j]) / h;
                let t1 = 0.5 * (tau1[j] + tau1[j + 1]);
                let dj = 0.5 * (deta[j] + deta[j + 1]);
                2.0 * eh[j] * gu * gu1 + d * dj * t1 * gu * gu
            };
            s2[i] = (hflux[i] - hflux[i - 1]) / h + d * 0.5 * (heat(i) + heat(i - 1));
        }
        let t_new = solve_diffusion(&kh, &s2, h, tau1_walls.0, tau1_walls.1)?;
        let change = u_new.iter().zip(&u1).chain(t_new.iter().zip(&tau1)).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        u1 = u_new;
        tau1 = t_new;
        let scale = 1.0 + norm_inf(&u1) + norm_inf(&tau1);
        if change <= 1e-13 * scale {
            return Ok((u1, tau1));
        }
    }
    Err(GhostError::NotConverged("linearised fluid system did not converge".into()))
}

/// Smooth interpolants of the solution fields.
#[derive(Clone, Debug)]
pub struct HydroInterpolant {
    pub delta: f64,
    u: CubicSpline,
    tau: CubicSpline,
}

impl HydroInterpolant {
    pub fn new(sol: &HydroSolution) -> Result<Self> {
        Ok(Self { delta: sol.params.delta, u: CubicSpline::new(&sol.y, &sol.u)?, tau: CubicSpline::new(&sol.y, &sol.tau)? })
    }

    pub fn u(&self, y: f64) -> f64 {
        self.u.eval(y)
    }

    pub fn du(&self, y: f64) -> f64 {
        self.u.derivative(y)
    }

    pub fn tau(&self, y: f64) -> f64 {
        self.tau.eval(y)
    }

    pub fn dtau(&self, y: f64) -> f64 {
        self.tau.derivative(y)
    }

    pub fn rho(&self, y: f64) -> f64 {
        1.0 / (1.0 + self.delta * self.tau(y))
    }

    /// Leading-order local Maxwellian `M(1 + delta r, 1 + delta tau, delta U)`.
    pub fn state(&self, y: f64) -> MaxwellianState {
        let t = 1.0 + self.delta * self.tau(y);
        MaxwellianState { rho: 1.0 / t, temperature: t, velocity: [self.delta * self.u(y), 0.0, 0.0] }
    }
}

pub fn write_csv(sol: &HydroSolution, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["y", "U", "U_tilde", "tau", "r", "P2"])?;
    for i in 0..sol.y.len() {
        w.write_record(&[
            format!("{:.15e}", sol.y[i]),
            format!("{:.15e}", sol.u[i]),
            format!("{:.15e}", sol.u_tilde[i]),
            format!("{:.15e}", sol.tau[i]),
            format!("{:.15e}", sol.r[i]),
            format!("{:.15e}", sol.p2[i]),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HydroSummary {
    pub delta: f64,
    pub c_const: f64,
    pub u_minus: f64,
    pub u_plus: f64,
    pub ny: usize,
    pub iterations: usize,
    pub residual: f64,
    pub ode_residual: f64,
    pub damped: bool,
    pub p2_at_outer_wall: f64,
    pub laminar_p2_limit: f64,
    pub sup_u_tilde: f64,
    pub sup_tau: f64,
}

pub fn summary(sol: &HydroSolution) -> HydroSummary {
    HydroSummary {
        delta: sol.params.delta,
        c_const: sol.params.c_const,
        u_minus: sol.params.u_minus,
        u_plus: sol.params.u_plus,
        ny: sol.params.ny,
        iterations: sol.iterations,
        residual: sol.residual,
        ode_residual: sol.ode_residual,
        damped: sol.damped,
        p2_at_outer_wall: *sol.p2.last().unwrap(),
        laminar_p2_limit: laminar_pressure_limit(&sol.params),
        sup_u_tilde: norm_inf(&sol.u_tilde),
        sup_tau: norm_inf(&sol.tau),
    }
}

pub fn write_json(sol: &HydroSolution, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(&summary(sol))?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> TransportTable {
        let temps: Vec<f64> = (0..31).map(|k| 0.5 + 0.05 * k as f64).collect();
        TransportTable::bgk_reference(1.0, &temps).unwrap()
    }

    #[test]
    fn zero_delta_is_laminar() {
        let p = HydroParams { delta: 0.0, ..Default::default() };
        let s = solve_coupled(&p, &table()).unwrap();
        assert!(norm_inf(&s.u_tilde) < 1e-13);
        assert!(norm_inf(&s.tau) < 1e-14);
    }

    #[test]
    fn laminar_pressure_matches_closed_form() {
        let p = HydroParams { delta: 0.0, ny: 2049, ..Default::default() };
        let s = laminar(&p).unwrap();
        let exact = (2.0 * PI).powi(3) / 3.0;
        assert!((s.p2.last().unwrap() - exact).abs() / exact < 1e-6);
    }

    #[test]
    fn rejects_bad_params() {
        assert!(HydroParams { delta: 0.6, ..Default::default() }.validate().is_err());
        assert!(HydroParams { ny: 20, ..Default::default() }.validate().is_err());
        assert!(HydroParams { c_const: 0.0, ..Default::default() }.validate().is_err());
    }
}
