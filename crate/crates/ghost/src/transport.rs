//! Viscosity and heat conductivity from the linearised collision operator.
//!
//! With `c = v - u` and the state Maxwellian `M`, the sources are
//! `A~ = (|c|^2 - 5T) / (2T^2) v_y M` and `B~ = c_x v_y M`, and the auxiliary
//! functions solve `L frakA = A~`, `L frakB = B~` on the complement of the
//! invariants. The coefficients are normalised as the fluxes they produce:
//! `eta = -<frakB, B~> / T` and `kappa = -T^2 <frakA, A~>`, which reduce to the
//! plain inner products at `T = 1`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::collision_ops::{solve_on_complement, DiscreteOperator, ModelTag};
use crate::error::{invalid, Result};
use crate::linalg::CubicSpline;
use crate::velocity_space::MaxwellianState;

#[derive(Clone, Debug)]
pub struct AuxiliaryFunctions {
    pub state: MaxwellianState,
    pub a_tilde: Vec<f64>,
    pub b_tilde: Vec<f64>,
    pub frak_a: Vec<f64>,
    pub frak_b: Vec<f64>,
    /// invariant fraction removed from the discrete sources
    pub discarded: [f64; 2],
}

pub fn build_auxiliary(op: &DiscreteOperator) -> Result<AuxiliaryFunctions> {
    let g = &op.grid;
    let st = op.state;
    let t = st.temperature;
    let n = g.len();
    let mut a_tilde = Vec::with_capacity(n);
    let mut b_tilde = Vec::with_capacity(n);
    for i in 0..n {
        let cx = g.vx[i] - st.velocity[0];
        let cy = g.vy[i] - st.velocity[1];
        let cz = g.vz[i] - st.velocity[2];
        let c2 = cx * cx + cy * cy + cz * cz;
        a_tilde.push((c2 - 5.0 * t) / (2.0 * t * t) * g.vy[i]);
        b_tilde.push(cx * g.vy[i]);
    }
    // truncation leaves a small invariant component on the discrete grid
    let mut discarded = [0.0; 2];
    let mut out = Vec::new();
    for (k, src) in [&a_tilde, &b_tilde].into_iter().enumerate() {
        let p = op.project_perp(src);
        discarded[k] = op.norm(&op.project(src)) / op.norm(src).max(1e-300);
        out.push(solve_on_complement(op, &p, 1e-10)?.solution);
    }
    let frak_b = out.pop().unwrap();
    let frak_a = out.pop().unwrap();
    Ok(AuxiliaryFunctions { state: st, a_tilde, b_tilde, frak_a, frak_b, discarded })
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TransportCoefficients {
    pub temperature: f64,
    pub eta: f64,
    pub kappa: f64,
}

pub fn coefficients(aux: &AuxiliaryFunctions, op: &DiscreteOperator) -> TransportCoefficients {
    let t = aux.state.temperature;
    TransportCoefficients {
        temperature: t,
        eta: -op.inner(&aux.frak_b, &aux.b_tilde) / t,
        kappa: -t * t * op.inner(&aux.frak_a, &aux.a_tilde),
    }
}

/// Tabulated `eta(T)`, `kappa(T)` with spline interpolation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TransportTable {
    pub model_tag: ModelTag,
    pub temperatures: Vec<f64>,
    pub eta: Vec<f64>,
    pub kappa: Vec<f64>,
    /// Burnett-type coefficients entering the pressure correction; zero by default.
    pub sigma1: f64,
    pub sigma2: f64,
    #[serde(skip)]
    splines: Option<(CubicSpline, CubicSpline)>,
}

impl TransportTable {
    pub fn new(model_tag: ModelTag, temperatures: Vec<f64>, eta: Vec<f64>, kappa: Vec<f64>) -> Result<Self> {
        if temperatures.len() < 3 || eta.len() != temperatures.len() || kappa.len() != temperatures.len() {
            return Err(invalid("temperatures", "need at least three matching entries"));
        }
        if temperatures.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid("temperatures", "must be strictly increasing"));
        }
        if eta.iter().chain(&kappa).any(|x| !(*x > 0.0)) {
            return Err(invalid("eta", "transport coefficients must be positive"));
        }
        let splines = Some((CubicSpline::new(&temperatures, &eta)?, CubicSpline::new(&temperatures, &kappa)?));
        Ok(Self { model_tag, temperatures, eta, kappa, sigma1: 0.0, sigma2: 0.0, splines })
    }

    /// `eta = p / nu`, `kappa = 5 p / (2 nu)` at unit density, sampled on `temps`.
    pub fn bgk_reference(rate: f64, temps: &[f64]) -> Result<Self> {
        let eta = temps.iter().map(|t| t / rate).collect();
        let kappa = temps.iter().map(|t| 2.5 * t / rate).collect();
        Self::new(ModelTag::Bgk, temps.to_vec(), eta, kappa)
    }

    fn splines(&self) -> (CubicSpline, CubicSpline) {
        match &self.splines {
            Some(s) => s.clone(),
            None => (
                CubicSpline::new(&self.temperatures, &self.eta).expect("validated table"),
                CubicSpline::new(&self.temperatures, &self.kappa).expect("validated table"),
            ),
        }
    }

    /// Restores the interpolants after deserialisation.
    pub fn rebuild(mut self) -> Result<Self> {
        self.splines = Some((CubicSpline::new(&self.temperatures, &self.eta)?, CubicSpline::new(&self.temperatures, &self.kappa)?));
        Ok(self)
    }

    pub fn eta_at(&self, t: f64) -> f64 {
        match &self.splines {
            Some((e, _)) => e.eval(t),
            None => self.splines().0.eval(t),
        }
    }

    pub fn kappa_at(&self, t: f64) -> f64 {
        match &self.splines {
            Some((_, k)) => k.eval(t),
            None => self.splines().1.eval(t),
        }
    }

    /// Centred difference of the interpolated viscosity.
    pub fn eta_prime(&self, t: f64, h: f64) -> f64 {
        (self.eta_at(t + h) - self.eta_at(t - h)) / (2.0 * h)
    }

    pub fn kappa_prime(&self, t: f64, h: f64) -> f64 {
        (self.kappa_at(t + h) - self.kappa_at(t - h)) / (2.0 * h)
    }

    pub fn range(&self) -> (f64, f64) {
        (self.temperatures[0], *self.temperatures.last().unwrap())
    }

    pub fn is_monotone(&self) -> (bool, bool) {
        let inc = |v: &[f64]| v.windows(2).all(|w| w[1] >= w[0]);
        (inc(&self.eta), inc(&self.kappa))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["T", "eta", "kappa"])?;
        for i in 0..self.temperatures.len() {
            w.write_record(&[
                format!("{:.15e}", self.temperatures[i]),
                format!("{:.15e}", self.eta[i]),
                format!("{:.15e}", self.kappa[i]),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Builds the table by constructing an operator at each temperature.
pub fn build_table<F>(factory: F, temps: &[f64]) -> Result<TransportTable>
where
    F: Fn(MaxwellianState) -> Result<DiscreteOperator>,
{
    if temps.iter().any(|t| !(0.5..=2.0).contains(t)) {
        return Err(invalid("temps", "temperatures must lie in [0.5, 2]"));
    }
    let mut eta = Vec::with_capacity(temps.len());
    let mut kappa = Vec::with_capacity(temps.len());
    let mut tag = ModelTag::Bgk;
    for &t in temps {
        let op = factory(MaxwellianState::new(1.0, t, [0.0; 3])?)?;
        tag = op.tag;
        let aux = build_auxiliary(&op)?;
        let c = coefficients(&aux, &op);
        eta.push(c.eta);
        kappa.push(c.kappa);
    }
    TransportTable::new(tag, temps.to_vec(), eta, kappa)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collision_ops::{build_bgk, BgkRate};
    use crate::velocity_space::build_grid;
    use std::sync::Arc;

    #[test]
    fn bgk_auxiliary_is_scaled_source() {
        let g = Arc::new(build_grid(6.0, 15).unwrap());
        let op = build_bgk(g, BgkRate::Constant(1.5), MaxwellianState::standard()).unwrap();
        let aux = build_auxiliary(&op).unwrap();
        for i in 0..op.len() {
            assert!((aux.frak_b[i] + aux.b_tilde[i] / 1.5).abs() < 1e-9);
        }
    }

    #[test]
    fn table_interpolates_linear_data_exactly() {
        let temps: Vec<f64> = (0..16).map(|k| 0.5 + 0.1 * k as f64).collect();
        let t = TransportTable::bgk_reference(2.0, &temps).unwrap();
        assert!((t.eta_at(1.234) - 0.617).abs() < 1e-12);
        assert!((t.eta_prime(1.0, 1e-3) - 0.5).abs() < 1e-9);
    }
}
