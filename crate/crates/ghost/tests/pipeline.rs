use std::f64::consts::PI;
use std::sync::Arc;

use ghost_couette::collision_ops::{build_bgk, BgkRate};
use ghost_couette::expansion::{assemble, ExpansionSettings};
use ghost_couette::hydro::{solve_coupled, HydroParams};
use ghost_couette::kinetic_ref::{solve_kinetic, KineticProblem, Layout};
use ghost_couette::transport::{build_table, TransportTable};
use ghost_couette::velocity_space::build_grid;

fn reference_table() -> TransportTable {
    let temps: Vec<f64> = (0..61).map(|i| 0.5 + 0.025 * i as f64).collect();
    TransportTable::bgk_reference(1.0, &temps).unwrap()
}

#[test]
fn operator_table_matches_closed_form() {
    let grid = Arc::new(build_grid(10.0, 31).unwrap());
    let temps = [0.8, 1.0, 1.25];
    let table = build_table(|state| build_bgk(grid.clone(), BgkRate::Constant(1.0), state), &temps).unwrap();
    let reference = TransportTable::bgk_reference(1.0, &temps).unwrap();
    for i in 0..temps.len() {
        assert!((table.eta[i] / reference.eta[i] - 1.0).abs() < 1e-6, "eta at {}", temps[i]);
        assert!((table.kappa[i] / reference.kappa[i] - 1.0).abs() < 1e-6, "kappa at {}", temps[i]);
    }
    assert_eq!(table.is_monotone(), (true, true));
}

#[test]
fn second_order_closure_is_consistent() {
    let s = ExpansionSettings { eps: 0.1, order: 2, ..Default::default() };
    let hydro = solve_coupled(&HydroParams { delta: s.delta(), c_const: s.c_const, ..Default::default() }, &reference_table()).unwrap();
    let grid = Arc::new(build_grid(5.0, 9).unwrap());
    let m = assemble(&hydro, grid, &s).unwrap().manifest().unwrap();
    assert_eq!(m.bulk_norms.len(), 2);
    assert!(m.bulk_norms.iter().all(|b| b.is_finite() && *b > 0.0));
    // the first bulk term is exactly compatible; the second only up to the closure residual
    assert!(m.compatibility[0].iter().all(|c| c.abs() < 1e-12));
    assert!(m.compatibility[1].iter().all(|c| c.abs() < 1e-3));
    assert!(m.psi_norms.iter().all(|p| *p < 1e-10));
    assert!(m.wall_mass_flux.iter().all(|j| j.abs() <= 1e-9));
    assert!(m.remainder.iter().all(|r| r.is_finite() && r.abs() < 1e-2));
    assert!(m.closure_sweeps.iter().all(|n| (1..=12).contains(n)));
}

#[test]
fn resting_gas_is_an_exact_kinetic_equilibrium() {
    let prob = KineticProblem {
        eps: 0.1,
        u_minus: 0.0,
        u_plus: 0.0,
        force: false,
        layout: Layout::Reduced2D,
        v_extent: 6.0,
        v_points: 15,
        h_max: 2.0 * PI / 24.0,
        ..Default::default()
    };
    let sol = solve_kinetic(&prob, None).unwrap();
    assert!(sol.residual < 1e-10, "residual {}", sol.residual);
    let mo = &sol.moments;
    assert!((mo.temperature[0] - 1.0).abs() < 1e-3);
    for k in 0..sol.y.len() {
        assert!(mo.u[k].abs() < 1e-10 && mo.u_y[k].abs() < 1e-10);
        // discrete moments of the wall Maxwellian set the level; it must be uniform
        assert!((mo.temperature[k] - mo.temperature[0]).abs() < 1e-10);
    }
    assert!(sol.flux.max_flux < 1e-10);
    assert_eq!(sol.positivity.undershoot, 0.0);
}
