//! Log-log least-squares fits for scaling studies.

use anyhow::{bail, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Fits `ln y = slope ln x + intercept`.
pub fn fit_slope(points: &[(f64, f64)]) -> Result<SlopeFit> {
    if points.len() < 3 {
        bail!("insufficient data: slope fits need at least 3 points, got {}", points.len());
    }
    if let Some((x, y)) = points.iter().find(|(x, y)| !(*x > 0.0 && *y > 0.0 && x.is_finite() && y.is_finite())) {
        bail!("slope fits need positive finite values, got ({x}, {y})");
    }
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    if sxx == 0.0 {
        bail!("slope fits need at least two distinct abscissae");
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = ly.iter().map(|b| (b - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r_squared = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    Ok(SlopeFit { slope, intercept: my - slope * mx, r_squared })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_data() {
        let pts: Vec<(f64, f64)> = [0.1, 0.2, 0.4, 0.8].iter().map(|x| (*x, x * x)).collect();
        let f = fit_slope(&pts).unwrap();
        assert!((f.slope - 2.0).abs() < 1e-12);
        assert!((f.r_squared - 1.0).abs() < 1e-12);
    }

    #[test]
    fn four_thirds_power() {
        let pts: Vec<(f64, f64)> = [0.1, 0.07, 0.05, 0.035].iter().map(|x: &f64| (*x, 3.0 * x.powf(4.0 / 3.0))).collect();
        let f = fit_slope(&pts).unwrap();
        assert!((f.slope - 4.0 / 3.0).abs() < 1e-12);
        assert!((f.intercept - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn two_points_rejected() {
        let e = fit_slope(&[(1.0, 1.0), (2.0, 4.0)]).unwrap_err();
        assert!(e.to_string().contains("insufficient data"));
    }

    #[test]
    fn nonpositive_rejected() {
        assert!(fit_slope(&[(1.0, 1.0), (2.0, 0.0), (3.0, 9.0)]).is_err());
        assert!(fit_slope(&[(-1.0, 1.0), (2.0, 4.0), (3.0, 9.0)]).is_err());
    }
}
