//! The study pipelines. Each returns its tables, plot and the acceptance
//! criteria it decides.

use std::f64::consts::PI;
use std::sync::Arc;

use anyhow::{anyhow, Result};
use rayon::prelude::*;
use serde_json::json;

use ghost_couette::collision_ops::{build_bgk, build_hard_sphere, build_lj, invariant_defect, spectral_gap, symmetry_defect, verify_lj_gap, BgkRate, DiscreteOperator};
use ghost_couette::expansion::{assemble, ExpansionBundle, ExpansionSettings};
use ghost_couette::hydro::{compare_to_limit, laminar, solve_coupled, HydroInterpolant, HydroParams, HydroSolution};
use ghost_couette::kinetic_ref::{deviation_norms, ghost_demonstration, solve_kinetic, KineticProblem, KineticSolution, Layout};
use ghost_couette::milne::{boundary_layer_problem, solve_slab, LayerScaling, MilneSettings, MilneSolution, Wall};
use ghost_couette::transport::{build_auxiliary, coefficients, TransportTable};
use ghost_couette::velocity_space::{build_grid, MaxwellianState, VelocityGrid};

use crate::config::{Model, RunConfig};
use crate::fit::{fit_slope, SlopeFit};
use crate::plot::Plot;
use crate::report::{CriterionOutcome, Study, Table};

pub const AXIOM_TOL_BGK: f64 = 1e-10;
pub const AXIOM_TOL_HS: f64 = 1e-8;
pub const LJ_GAP_REL: f64 = 0.2;
pub const LJ_PROJECTOR_TOL: f64 = 1e-10;
pub const TRANSPORT_TOL: f64 = 1e-8;
pub const PRESSURE_SLOPE_TOL: f64 = 1e-6;
pub const FIRST_ORDER_SLOPE: (f64, f64) = (0.8, 1.2);
pub const SECOND_ORDER_SLOPE: (f64, f64) = (1.8, 2.2);
pub const MILNE_B2_TOL: f64 = 1e-9;
pub const MILNE_FLUX_TOL: f64 = 1e-8;
pub const MILNE_MIN_R2: f64 = 0.98;
pub const MILNE_DOUBLING_TOL: f64 = 1e-6;
pub const WALL_FLUX_TOL: f64 = 1e-9;
pub const DRIFT_SLOPE: (f64, f64) = (1.1, 1.6);
pub const BUNDLE_SLOPE: (f64, f64) = (1.4, 1.9);
pub const GHOST_REL_TOL: f64 = 0.1;
pub const GHOST_FLAT_FRACTION: f64 = 0.1;
pub const GHOST_QUARTER_TOL: f64 = 0.1;
pub const KINETIC_RESIDUAL_TOL: f64 = 1e-8;
pub const EQUILIBRIUM_MAX_SWEEPS: usize = 3;
pub const UNDERSHOOT_TOL: f64 = 1e-12;
pub const FLUX_IDENTITY_TOL: f64 = 1e-9;

/// Transport table wide enough for the fluid solves.
fn bgk_table() -> Result<TransportTable> {
    let temps: Vec<f64> = (0..61).map(|i| 0.5 + 0.025 * i as f64).collect();
    Ok(TransportTable::bgk_reference(1.0, &temps)?)
}

fn in_range(v: f64, r: (f64, f64)) -> bool {
    v >= r.0 && v <= r.1
}

fn max_abs(v: impl IntoIterator<Item = f64>) -> f64 {
    v.into_iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Slope fit that records failures instead of aborting the study.
fn slope_of(c: &mut CriterionOutcome, name: &str, pts: &[(f64, f64)], range: (f64, f64)) -> Option<SlopeFit> {
    match fit_slope(pts) {
        Ok(f) => {
            c.check(&format!("{name}_slope"), f.slope, in_range(f.slope, range));
            c.measure(&format!("{name}_r2"), f.r_squared);
            Some(f)
        }
        Err(e) => {
            c.passed = false;
            c.note += &format!("{name}: {e}; ");
            None
        }
    }
}

fn hydro_solution(delta: f64, c_const: f64, u_minus: f64, u_plus: f64, ny: usize) -> Result<HydroSolution> {
    let params = HydroParams { delta, c_const, u_minus, u_plus, ny, ..Default::default() };
    Ok(solve_coupled(&params, &bgk_table()?)?)
}

/// Deterministic probe functions on the grid.
fn probes(grid: &VelocityGrid, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let phase = (seed % 1000) as f64 * 0.618_033_988_7;
    (0..count)
        .map(|k| {
            let a = 0.3 + 0.17 * k as f64;
            (0..grid.len())
                .map(|i| (a * grid.vx[i] + 0.11 * (k + 1) as f64 * grid.vy[i] * grid.vy[i] - 0.23 * grid.vz[i] + phase).sin() + 0.1 * (k as f64 - grid.vz[i]).cos())
                .collect()
        })
        .collect()
}

/// Largest defect among the operator axioms and the spectral constant.
struct AxiomReport {
    symmetry: f64,
    nonpositivity: f64,
    null_space: f64,
    range_orthogonality: f64,
    c_spectral: f64,
    gap: f64,
}

impl AxiomReport {
    fn worst(&self) -> f64 {
        self.symmetry.max(self.nonpositivity).max(self.null_space).max(self.range_orthogonality)
    }
}

fn axioms(op: &DiscreteOperator, probe_count: usize, seed: u64) -> Result<AxiomReport> {
    let spec = spectral_gap(op)?;
    let scale = spec.largest.abs().max(1e-300);
    let mut range: f64 = 0.0;
    for f in probes(&op.grid, probe_count, seed) {
        let lf = op.apply(&f);
        range = range.max(op.norm(&op.project(&lf)) / op.norm(&lf).max(1e-300));
    }
    // five null directions annihilated, none on the complement
    let null_space = (spec.null_eigen_max / scale).max(invariant_defect(op)).max(if spec.gap > 0.0 { 0.0 } else { 1.0 });
    Ok(AxiomReport {
        symmetry: symmetry_defect(op, probe_count, seed),
        nonpositivity: (-spec.gap / scale).max(0.0),
        null_space,
        range_orthogonality: range,
        c_spectral: spec.c_spectral,
        gap: spec.gap,
    })
}

/// Criteria 1 and 2.
pub fn operator_study(cfg: &RunConfig) -> Result<Study> {
    let oc = &cfg.operator;
    let mut study = Study::default();
    let mut table = Table::new("operator_axioms", &["model", "nodes", "symmetry", "nonpositivity", "null_space", "range_orthogonality", "gap", "c_spectral"]);

    let mut c1 = CriterionOutcome::new(1, "operator axioms", "BGK defects <= 1e-10, hard-sphere defects <= 1e-8, c_spectral > 0");
    let bgk_grid = Arc::new(build_grid(oc.bgk_extent, oc.bgk_points)?);
    study.grid_hashes.push(bgk_grid.hash());
    let bgk = build_bgk(bgk_grid.clone(), BgkRate::Constant(1.0), MaxwellianState::standard())?;
    let ab = axioms(&bgk, oc.symmetry_probes, cfg.seed)?;
    c1.check("bgk_defect", ab.worst(), ab.worst() <= AXIOM_TOL_BGK);
    c1.check("bgk_c_spectral", ab.c_spectral, ab.c_spectral > 0.0);
    table.push(vec![0.0, bgk.len() as f64, ab.symmetry, ab.nonpositivity, ab.null_space, ab.range_orthogonality, ab.gap, ab.c_spectral]);
    if oc.hard_sphere || cfg.model == Model::Hs {
        let g = Arc::new(build_grid(oc.hs_extent, oc.hs_points)?);
        study.grid_hashes.push(g.hash());
        let hs = build_hard_sphere(g, oc.hs_samples_per_row, cfg.seed, oc.memory_cap_mb << 20)?;
        let ah = axioms(&hs, oc.symmetry_probes, cfg.seed)?;
        c1.check("hs_defect", ah.worst(), ah.worst() <= AXIOM_TOL_HS);
        c1.check("hs_c_spectral", ah.c_spectral, ah.c_spectral > 0.0);
        c1.measure("hs_cleanup_norm", hs.cleanup_norm);
        table.push(vec![1.0, hs.len() as f64, ah.symmetry, ah.nonpositivity, ah.null_space, ah.range_orthogonality, ah.gap, ah.c_spectral]);
    } else {
        c1.note += "hard-sphere operator skipped by configuration; ";
    }
    study.tables.push(table);
    study.criteria.push(c1);

    // perturbation fields from a fluid solution
    let mut c2 = CriterionOutcome::new(2, "perturbed operator gap", "certified c within 20% of c_spectral, projector mismatch <= 1e-10");
    let hc = &cfg.hydro;
    let hydro = hydro_solution(oc.lj_delta, hc.c_const, hc.u_minus, hc.u_plus, hc.ny)?;
    let interp = HydroInterpolant::new(&hydro)?;
    let grid = Arc::new(build_grid(oc.lj_extent, oc.lj_points)?);
    study.grid_hashes.push(grid.hash());
    let base = Arc::new(build_bgk(grid.clone(), BgkRate::Constant(1.0), MaxwellianState::standard())?);
    let c_spec = spectral_gap(&base)?.c_spectral;
    let d = oc.lj_delta;
    let sites: Vec<f64> = (0..oc.lj_sites).map(|j| -PI + 2.0 * PI * (j as f64 + 0.5) / oc.lj_sites as f64).collect();
    let rows = sites
        .par_iter()
        .map(|&y| -> Result<Vec<f64>> {
            let (u, tau) = (interp.u(y), interp.tau(y));
            let a: Vec<f64> = (0..grid.len()).map(|i| -d * u * grid.vx[i] - 0.5 * d * tau * grid.speed_sq(i)).collect();
            let sup = max_abs(a.iter().copied());
            let pert = build_lj(base.clone(), a)?;
            let cert = verify_lj_gap(&pert)?;
            Ok(vec![y, d * u, d * tau, sup, cert.c, c_spec, if cert.holds { 1.0 } else { 0.0 }, pert.projector_mismatch, pert.kernel_residual])
        })
        .collect::<Result<Vec<_>>>()?;
    let mut t2 = Table::new("lj_gap", &["y", "delta_u", "delta_tau", "sup_a", "c", "c_spectral", "holds", "projector_mismatch", "kernel_residual"]);
    let mut worst_rel: f64 = 0.0;
    let mut mismatch: f64 = 0.0;
    let mut holds = true;
    let mut plot = Plot::new("certified gap constant across the channel", "y", "c / c_spectral", false, false);
    let mut pts = Vec::new();
    for r in rows {
        worst_rel = worst_rel.max(((r[4] - c_spec) / c_spec).abs());
        mismatch = mismatch.max(r[7]);
        holds &= r[6] == 1.0;
        pts.push((r[0], r[4] / c_spec));
        t2.push(r);
    }
    plot.add("c / c_spectral", pts);
    c2.check("max_relative_c_change", worst_rel, worst_rel <= LJ_GAP_REL && holds);
    c2.check("projector_mismatch", mismatch, mismatch <= LJ_PROJECTOR_TOL);
    c2.measure("c_spectral", c_spec);
    c2.measure("delta", d);
    study.tables.push(t2);
    study.criteria.push(c2);
    study.plot = Some(plot);
    Ok(study)
}

/// Normalised one-dimensional Gaussian moments `int v^k G_T` for k = 0, 2, 4, 6,
/// by composite Simpson on `[-12 sqrt T, 12 sqrt T]`.
pub fn gaussian_moments(t: f64, nodes: usize) -> [f64; 4] {
    let n = if nodes % 2 == 1 { nodes } else { nodes + 1 };
    let l = 12.0 * t.sqrt();
    let h = 2.0 * l / (n - 1) as f64;
    let norm = (2.0 * PI * t).sqrt();
    let mut m = [0.0; 4];
    for i in 0..n {
        let v = -l + h * i as f64;
        let w = if i == 0 || i == n - 1 { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
        let g = w * h / 3.0 * (-v * v / (2.0 * t)).exp() / norm;
        let v2 = v * v;
        m[0] += g;
        m[1] += g * v2;
        m[2] += g * v2 * v2;
        m[3] += g * v2 * v2 * v2;
    }
    m
}

/// Viscosity and conductivity of the relaxation model at unit density from
/// one-dimensional moments: `eta = <(c_x v_y)^2> / (nu T)` and
/// `kappa = T^2 / nu * <((|c|^2 - 5T) / (2 T^2))^2 v_y^2>`.
pub fn transport_oracle(t: f64, nu: f64, nodes: usize) -> (f64, f64) {
    let [m0, m2, m4, m6] = gaussian_moments(t, nodes);
    let eta = m2 * m2 * m0 / (nu * t);
    // a = c_x^2 + c_z^2, b = c_y^2
    let ea = 2.0 * m2 * m0;
    let ea2 = 2.0 * m4 * m0 + 2.0 * m2 * m2;
    let e_shift2 = ea2 - 10.0 * t * ea + 25.0 * t * t * m0 * m0;
    let e = e_shift2 * m2 + 2.0 * (ea - 5.0 * t * m0 * m0) * m4 + m6 * m0 * m0;
    let kappa = t * t / nu * e / (4.0 * t.powi(4));
    (eta, kappa)
}

/// Criterion 3.
pub fn transport_study(cfg: &RunConfig) -> Result<Study> {
    let tc = &cfg.transport;
    let mut study = Study::default();
    let grid = Arc::new(build_grid(tc.extent, tc.points)?);
    study.grid_hashes.push(grid.hash());
    let mut table = Table::new("transport", &["temperature", "eta", "kappa", "eta_oracle", "kappa_oracle", "eta_closed_form", "kappa_closed_form"]);
    let rows = tc
        .temperatures
        .par_iter()
        .map(|&t| -> Result<Vec<f64>> {
            let op = build_bgk(grid.clone(), BgkRate::Constant(tc.rate), MaxwellianState::new(1.0, t, [0.0; 3])?)?;
            let c = coefficients(&build_auxiliary(&op)?, &op);
            let (eo, ko) = transport_oracle(t, tc.rate, tc.oracle_nodes);
            Ok(vec![t, c.eta, c.kappa, eo, ko, t / tc.rate, 2.5 * t / tc.rate])
        })
        .collect::<Result<Vec<_>>>()?;
    let mut c3 = CriterionOutcome::new(3, "transport coefficients", "relative error against the quadrature oracle <= 1e-8, |eta(T) slope - 1| <= 1e-6");
    let mut err: f64 = 0.0;
    let mut closed: f64 = 0.0;
    let mut eta_pts = Vec::new();
    let mut kappa_pts = Vec::new();
    for r in rows {
        err = err.max(((r[1] - r[3]) / r[3]).abs()).max(((r[2] - r[4]) / r[4]).abs());
        closed = closed.max(((r[1] - r[5]) / r[5]).abs()).max(((r[2] - r[6]) / r[6]).abs());
        eta_pts.push((r[0], r[1]));
        kappa_pts.push((r[0], r[2]));
        table.push(r);
    }
    c3.check("oracle_relative_error", err, err <= TRANSPORT_TOL);
    c3.measure("closed_form_relative_error", closed);
    match fit_slope(&eta_pts) {
        Ok(f) => {
            c3.check("eta_slope_minus_one", (f.slope - 1.0).abs(), (f.slope - 1.0).abs() <= PRESSURE_SLOPE_TOL);
        }
        Err(e) => {
            c3.passed = false;
            c3.note += &format!("eta slope: {e}; ");
        }
    }
    study.tables.push(table);
    if cfg.model == Model::Hs {
        let oc = &cfg.operator;
        let g = Arc::new(build_grid(oc.hs_extent, oc.hs_points)?);
        study.grid_hashes.push(g.hash());
        let hs = build_hard_sphere(g, oc.hs_samples_per_row, cfg.seed, oc.memory_cap_mb << 20)?;
        let c = coefficients(&build_auxiliary(&hs)?, &hs);
        let mut t = Table::new("transport_hard_sphere", &["temperature", "eta", "kappa"]);
        t.push(vec![1.0, c.eta, c.kappa]);
        study.tables.push(t);
    }
    let mut plot = Plot::new("transport coefficients", "T", "coefficient", true, true);
    plot.add("eta", eta_pts).add("kappa", kappa_pts);
    study.plot = Some(plot);
    study.criteria.push(c3);
    Ok(study)
}

/// Criterion 4.
pub fn hydro_study(cfg: &RunConfig) -> Result<Study> {
    let hc = &cfg.hydro;
    let mut study = Study::default();
    let vgrid = build_grid(hc.v_extent, hc.v_points)?;
    study.grid_hashes.push(vgrid.hash());
    let table_t = bgk_table()?;
    let results = hc
        .deltas
        .par_iter()
        .map(|&delta| -> Result<(HydroSolution, Vec<f64>)> {
            let params = HydroParams { delta, c_const: hc.c_const, u_minus: hc.u_minus, u_plus: hc.u_plus, ny: hc.ny, ..Default::default() };
            let sol = solve_coupled(&params, &table_t)?;
            let lim = laminar(&params)?;
            let r = compare_to_limit(&sol, &lim, &vgrid)?;
            let row = vec![delta, r.sup_u, r.l2_u, r.sup_tau, r.sup_r, r.first_order[0], r.first_order[1], r.second_order[0], r.second_order[1], sol.iterations as f64, sol.residual];
            Ok((sol, row))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut table = Table::new("hydro_deviation", &["delta", "sup_u", "l2_u", "sup_tau", "sup_r", "first_2", "first_inf", "second_2", "second_inf", "iterations", "residual"]);
    let mut cols: [Vec<(f64, f64)>; 5] = Default::default();
    for (_, r) in &results {
        if r[0] > 0.0 {
            for (k, idx) in [1usize, 5, 6, 7, 8].iter().enumerate() {
                cols[k].push((r[0], r[*idx]));
            }
        }
        table.push(r.clone());
    }
    let mut c4 = CriterionOutcome::new(4, "fluid deviation from the laminar profile", "slopes in [0.8, 1.2] for sup|U - U_lam| and the first-order distances, [1.8, 2.2] for the second-order distances");
    c4.measure("max_deviation", results.iter().map(|(_, r)| r[1]).fold(0.0, f64::max));
    slope_of(&mut c4, "sup_u", &cols[0], FIRST_ORDER_SLOPE);
    slope_of(&mut c4, "first_2", &cols[1], FIRST_ORDER_SLOPE);
    slope_of(&mut c4, "first_inf", &cols[2], FIRST_ORDER_SLOPE);
    slope_of(&mut c4, "second_2", &cols[3], SECOND_ORDER_SLOPE);
    slope_of(&mut c4, "second_inf", &cols[4], SECOND_ORDER_SLOPE);
    if let Some((sol, _)) = results.iter().max_by(|a, b| a.1[0].total_cmp(&b.1[0])) {
        let mut prof = Table::new("hydro_profile", &["y", "u", "tau", "r", "p2"]);
        for k in 0..sol.y.len() {
            prof.push(vec![sol.y[k], sol.u[k], sol.tau[k], sol.r[k], sol.p2[k]]);
        }
        study.tables.push(prof);
    }
    let mut plot = Plot::new("fluid deviation", "delta", "deviation", true, true);
    for (k, name) in ["sup|U - U_lam|", "first order (2)", "first order (inf)", "second order (2)", "second order (inf)"].iter().enumerate() {
        plot.add(name, cols[k].clone());
    }
    study.tables.push(table);
    study.plot = Some(plot);
    study.criteria.push(c4);
    Ok(study)
}

fn expansion_for(eps: f64, gamma: f64, c_const: f64, order: usize, ny: usize, grid: Arc<VelocityGrid>, milne: MilneSettings) -> Result<(HydroSolution, ExpansionBundle)> {
    let settings = ExpansionSettings { order, eps, gamma, c_const, ny, milne, ..Default::default() };
    let defaults = HydroParams::default();
    let hydro = hydro_solution(settings.delta(), c_const, defaults.u_minus, defaults.u_plus, defaults.ny)?;
    let bundle = assemble(&hydro, grid, &settings)?;
    Ok((hydro, bundle))
}

fn deviation_profile(sol: &MilneSolution) -> Vec<(f64, f64)> {
    sol.y
        .iter()
        .zip(&sol.g)
        .map(|(y, g)| {
            let d: f64 = g.iter().zip(&sol.g_infinity).zip(&sol.wm).map(|((a, b), w)| w * (a - b) * (a - b)).sum();
            (*y, d.sqrt())
        })
        .collect()
}

/// Criterion 5.
pub fn milne_study(cfg: &RunConfig) -> Result<Study> {
    let mc = &cfg.milne;
    let mut study = Study::default();
    let grid = Arc::new(build_grid(mc.v_extent, mc.v_points)?);
    study.grid_hashes.push(grid.hash());
    let milne = MilneSettings { slab_length: mc.slab_length, ..Default::default() };
    let (_, bundle) = expansion_for(mc.eps, mc.gamma, mc.c_const, mc.order, mc.ny, grid.clone(), milne)?;
    let mut table = Table::new("milne_runs", &["order", "wall", "nodes", "max_b2", "max_flux_moments", "rate", "r_squared", "residual", "gmres_iterations"]);
    let (mut b2, mut flux, mut r2): (f64, f64, f64) = (0.0, 0.0, 1.0);
    for pair in &bundle.layers {
        for (w, sol) in [(0.0, &pair.minus), (1.0, &pair.plus)] {
            b2 = b2.max(sol.max_b2());
            flux = flux.max(sol.max_odd_moments());
            r2 = r2.min(sol.decay.r_squared);
            table.push(vec![pair.order as f64, w, sol.y.len() as f64, sol.max_b2(), sol.max_odd_moments(), sol.decay.rate.unwrap_or(0.0), sol.decay.r_squared, sol.residual, sol.gmres_iterations as f64]);
        }
    }
    // slab doubling on the first-order problems
    let ctx = &bundle.ctx;
    let scaling = LayerScaling { eps: mc.eps, delta: bundle.delta, c_const: mc.c_const, plateau: bundle.settings.plateau };
    let mut drift: f64 = 0.0;
    let mut doubling = Table::new("milne_doubling", &["wall", "slab_length", "b1", "b4", "sup_g_inf"]);
    for (wall, k) in [(Wall::Minus, 0usize), (Wall::Plus, ctx.len() - 1)] {
        let prob = boundary_layer_problem(1, &ctx.ops[k], &bundle.bulk[0].perp[k], wall, &scaling, None)?;
        let short = solve_slab(&prob, &milne)?;
        let long = solve_slab(&prob, &MilneSettings { slab_length: 2.0 * mc.slab_length, ..milne })?;
        let scale = max_abs(short.g_infinity.iter().copied()).max(1e-300);
        drift = drift.max(max_abs(short.g_infinity.iter().zip(&long.g_infinity).map(|(a, b)| a - b)) / scale);
        let wv = if wall == Wall::Minus { 0.0 } else { 1.0 };
        for s in [&short, &long] {
            doubling.push(vec![wv, s.slab_length, s.b_infinity[1], s.b_infinity[4], max_abs(s.g_infinity.iter().copied())]);
        }
    }
    let mut c5 = CriterionOutcome::new(5, "half-space conservation", "max|b2| <= 1e-9, max|I_alpha| <= 1e-8, decay R^2 >= 0.98, g_inf change under slab doubling <= 1e-6");
    c5.check("max_b2", b2, b2 <= MILNE_B2_TOL);
    c5.check("max_flux_moments", flux, flux <= MILNE_FLUX_TOL);
    c5.check("min_r_squared", r2, r2 >= MILNE_MIN_R2);
    c5.check("doubling_change", drift, drift <= MILNE_DOUBLING_TOL);
    let mut plot = Plot::new("layer decay", "Y", "||g - g_inf||", false, true);
    plot.add("order 1, lower wall", deviation_profile(&bundle.layers[0].minus));
    plot.add("order 1, upper wall", deviation_profile(&bundle.layers[0].plus));
    study.tables.push(table);
    study.tables.push(doubling);
    study.plot = Some(plot);
    study.criteria.push(c5);
    Ok(study)
}

/// Criterion 6.
pub fn expand_study(cfg: &RunConfig) -> Result<Study> {
    let ec = &cfg.expand;
    let mut study = Study::default();
    let grid = Arc::new(build_grid(ec.v_extent, ec.v_points)?);
    study.grid_hashes.push(grid.hash());
    let runs = ec
        .eps_sweep
        .par_iter()
        .map(|&eps| -> Result<(f64, ExpansionBundle)> { Ok((eps, expansion_for(eps, ec.gamma, ec.c_const, ec.order, ec.ny, grid.clone(), MilneSettings::default())?.1)) })
        .collect::<Result<Vec<_>>>()?;
    let mut runs = runs;
    runs.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut table = Table::new("wall_defects", &["eps", "delta", "psi_1", "psi_order", "wall_flux_minus", "wall_flux_plus", "remainder"]);
    let mut psi = Vec::new();
    let mut flux: f64 = 0.0;
    let mut manifests = Vec::new();
    for (eps, b) in &runs {
        let wf = b.wall_mass_flux();
        flux = flux.max(wf[0].abs()).max(wf[1].abs());
        psi.push((*eps, b.psi_norm(1)));
        table.push(vec![*eps, b.delta, b.psi_norm(1), b.psi_norm(b.settings.order), wf[0], wf[1], max_abs(b.remainder)]);
        manifests.push(serde_json::to_value(b.manifest()?)?);
    }
    let mut c6 = CriterionOutcome::new(6, "expansion wall defects", "each eps step reduces psi_1 by more than the previous one, wall mass flux <= 1e-9");
    let ratios: Vec<f64> = psi.windows(2).map(|w| if w[1].1 > 0.0 { w[0].1 / w[1].1 } else { f64::INFINITY }).collect();
    let accelerating = ratios.iter().all(|r| *r > 1.0) && ratios.windows(2).all(|w| w[1] > w[0]);
    for (k, r) in ratios.iter().enumerate() {
        c6.measure(&format!("reduction_{}", k + 1), r.min(f64::MAX));
    }
    c6.passed &= accelerating && ratios.len() >= 2;
    c6.check("max_wall_flux", flux, flux <= WALL_FLUX_TOL);
    c6.measure("psi_smallest_eps", psi.last().map(|p| p.1).unwrap_or(f64::NAN));
    let mut plot = Plot::new("wall defect of the first layer", "eps", "psi_1", true, true);
    plot.add("psi_1", psi);
    study.details.insert("expansions".into(), serde_json::Value::Array(manifests));
    study.tables.push(table);
    study.plot = Some(plot);
    study.criteria.push(c6);
    Ok(study)
}

fn moments_table(sol: &KineticSolution, name: &str) -> Table {
    let m = &sol.moments;
    let mut t = Table::new(name, &["y", "rho", "u", "u_y", "temperature", "p_yy", "p_xx"]);
    for k in 0..sol.y.len() {
        t.push(vec![sol.y[k], m.rho[k], m.u[k], m.u_y[k], m.temperature[k], m.p_yy[k], m.p_xx[k]]);
    }
    t
}

/// Criterion 9.
pub fn kinetic_study(cfg: &RunConfig) -> Result<Study> {
    let kc = &cfg.kinetic;
    let mut study = Study::default();
    let base = KineticProblem {
        eps: kc.eps,
        gamma: kc.gamma,
        c_const: kc.c_const,
        u_minus: kc.u_minus,
        u_plus: kc.u_plus,
        layout: kc.layout,
        v_extent: kc.v_extent,
        v_points: kc.v_points,
        tol: kc.tol,
        ..Default::default()
    };
    let eq = solve_kinetic(&KineticProblem { u_minus: 0.0, u_plus: 0.0, force: false, ..base.clone() }, None)?;
    let sheared = solve_kinetic(&base, None)?;
    if let Some(g) = &sheared.phase.grid3 {
        study.grid_hashes.push(g.hash());
    } else {
        study.grid_hashes.push(build_grid(kc.v_extent, kc.v_points)?.hash());
    }
    let mut c9 = CriterionOutcome::new(9, "kinetic solver sanity", "equilibrium residual <= 1e-8 within 3 sweeps, undershoot <= 1e-12, flux identity defect <= 1e-9");
    c9.check("equilibrium_residual", eq.residual, eq.residual <= KINETIC_RESIDUAL_TOL);
    c9.check("equilibrium_sweeps", eq.iterations as f64, eq.iterations <= EQUILIBRIUM_MAX_SWEEPS);
    let under = eq.positivity.undershoot.max(sheared.positivity.undershoot);
    let defect = eq.flux.identity_defect.max(sheared.flux.identity_defect);
    c9.check("undershoot", under, under <= UNDERSHOOT_TOL);
    c9.check("flux_identity_defect", defect, defect <= FLUX_IDENTITY_TOL);
    c9.check("sheared_residual", sheared.residual, sheared.residual <= kc.tol.max(KINETIC_RESIDUAL_TOL));
    c9.measure("sheared_iterations", sheared.iterations as f64);
    c9.measure("pressure_variation", sheared.pressure_variation());
    let mut plot = Plot::new("kinetic moments", "y", "value", false, false);
    plot.add("u / delta", sheared.y.iter().zip(&sheared.moments.u).map(|(y, u)| (*y, u / base.delta())).collect());
    plot.add("(T - 1) / delta^2", sheared.y.iter().zip(&sheared.moments.temperature).map(|(y, t)| (*y, (t - 1.0) / base.delta().powi(2))).collect());
    study.details.insert("kinetic".into(), serde_json::to_value(sheared.manifest())?);
    study.tables.push(moments_table(&sheared, "kinetic_moments"));
    study.plot = Some(plot);
    study.criteria.push(c9);
    Ok(study)
}

/// Criterion 7.
pub fn converge_study(cfg: &RunConfig) -> Result<Study> {
    let cc = &cfg.converge;
    let mut study = Study::default();
    let rows = cc
        .eps_sweep
        .par_iter()
        .map(|&eps| -> Result<Vec<f64>> {
            let prob = KineticProblem { eps, gamma: cc.gamma, c_const: cc.c_const, layout: Layout::Full3D, v_extent: cc.v_extent, v_points: cc.v_points, ..Default::default() };
            let sol = solve_kinetic(&prob, None)?;
            let grid = sol.phase.grid3.clone().ok_or_else(|| anyhow!("full layout expected"))?;
            let (hydro, bundle) = expansion_for(eps, cc.gamma, cc.c_const, cc.order, cc.ny, grid, MilneSettings::default())?;
            let interp = HydroInterpolant::new(&hydro)?;
            let drift = deviation_norms(&sol, &sol.drifting_reference(&|y| interp.u(y)))?;
            let field: Vec<Vec<f64>> = sol.y.iter().map(|y| bundle.field_at(*y)).collect();
            let full = deviation_norms(&sol, &field)?;
            Ok(vec![eps, prob.delta(), drift.norm22, drift.norminf2, full.norm22, full.norminf2, sol.iterations as f64, sol.residual])
        })
        .collect::<Result<Vec<_>>>()?;
    study.grid_hashes.push(build_grid(cc.v_extent, cc.v_points)?.hash());
    let mut table = Table::new("deviation_norms", &["eps", "delta", "drift_22", "drift_inf2", "bundle_22", "bundle_inf2", "iterations", "residual"]);
    let mut drift = Vec::new();
    let mut full = Vec::new();
    let mut extra = [Vec::new(), Vec::new()];
    for r in rows {
        drift.push((r[0], r[2]));
        extra[0].push((r[0], r[3]));
        extra[1].push((r[0], r[4]));
        full.push((r[0], r[5]));
        table.push(r);
    }
    let mut c7 = CriterionOutcome::new(7, "kinetic deviation scaling", "drifting-Maxwellian (2,2) slope in [1.1, 1.6], full-bundle (inf,2) slope in [1.4, 1.9]");
    slope_of(&mut c7, "drift_22", &drift, DRIFT_SLOPE);
    slope_of(&mut c7, "bundle_inf2", &full, BUNDLE_SLOPE);
    for (name, pts) in [("drift_inf2", &extra[0]), ("bundle_22", &extra[1])] {
        if let Ok(f) = fit_slope(pts) {
            c7.measure(&format!("{name}_slope"), f.slope);
        }
    }
    c7.measure("order", cc.order as f64);
    let mut plot = Plot::new("deviation from the asymptotic states", "eps", "norm", true, true);
    plot.add("drifting Maxwellian (2,2)", drift).add("drifting Maxwellian (inf,2)", extra[0].clone());
    plot.add("expansion (2,2)", extra[1].clone()).add("expansion (inf,2)", full);
    study.tables.push(table);
    study.plot = Some(plot);
    study.criteria.push(c7);
    Ok(study)
}

/// Criterion 8.
pub fn ghost_study(cfg: &RunConfig) -> Result<Study> {
    let gc = &cfg.ghost;
    let mut study = Study::default();
    let base = KineticProblem { layout: Layout::Reduced2D, v_extent: gc.v_extent, v_points: gc.v_points, ..Default::default() };
    let rep = ghost_demonstration(&gc.eps_sweep, gc.gamma, gc.c_const, &base)?;
    study.grid_hashes.push(build_grid(gc.v_extent, gc.v_points)?.hash());
    let mut table = Table::new("pressure_variation", &["eps", "delta", "p2_force", "p2_flat", "p2_double_c", "limit"]);
    for r in &rep.rows {
        table.push(vec![r.eps, r.delta, r.p2_force, r.p2_flat, r.p2_double_c, rep.limit]);
    }
    let mut c8 = CriterionOutcome::new(8, "ghost-effect pressure variation", "force on within 10% of the fluid limit, force off below 10% of it, C -> 2C ratio within 10% of 4");
    let rel = rep.relative_error();
    let flat = rep.flat_fraction();
    let ratio = rep.c_ratio();
    c8.check("relative_error", rel, rel <= GHOST_REL_TOL);
    c8.check("flat_fraction", flat, flat < GHOST_FLAT_FRACTION);
    c8.check("c_doubling_ratio", ratio, ((ratio / 4.0) - 1.0).abs() <= GHOST_QUARTER_TOL);
    c8.measure("limit", rep.limit);
    let mut plot = Plot::new("second-order pressure variation", "eps", "P2", true, false);
    plot.add("force on", rep.rows.iter().map(|r| (r.eps, r.p2_force)).collect());
    plot.add("force off", rep.rows.iter().map(|r| (r.eps, r.p2_flat)).collect());
    plot.add("force on, 2C (x4)", rep.rows.iter().map(|r| (r.eps, 4.0 * r.p2_double_c)).collect());
    plot.add("fluid limit", rep.rows.iter().map(|r| (r.eps, rep.limit)).collect());
    study.details.insert("ghost".into(), json!(rep));
    study.tables.push(table);
    study.plot = Some(plot);
    study.criteria.push(c8);
    Ok(study)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_matches_closed_form() {
        for t in [0.8, 1.0, 1.3] {
            let (eta, kappa) = transport_oracle(t, 2.0, 4001);
            assert!((eta - t / 2.0).abs() < 1e-12 * t);
            assert!((kappa - 2.5 * t / 2.0).abs() < 1e-12 * t);
        }
    }

    #[test]
    fn gaussian_moments_are_normalised() {
        let m = gaussian_moments(1.0, 2001);
        assert!((m[0] - 1.0).abs() < 1e-12 && (m[1] - 1.0).abs() < 1e-12 && (m[2] - 3.0).abs() < 1e-11 && (m[3] - 15.0).abs() < 1e-10);
    }
}
