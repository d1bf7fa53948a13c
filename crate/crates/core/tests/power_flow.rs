//! AC power flow on the bundled 118-bus system against an independent
//! Newton solver (PYPOWER with shunts, charging and taps removed, reactive
//! limits off, slack at 1.0 p.u.). Reference angles are shifted so the
//! slack angle is zero.

use gridrelief_core::acpf::{
    solve_power_flow, ControlVariables, PfSettings, PowerFlowSolver, QLimit,
};
use gridrelief_core::case::Network;
use gridrelief_core::data::ieee118;
use num_complex::Complex64;

const SLACK_ANGLE: f64 = 30.0 * std::f64::consts::PI / 180.0;

// (bus id, |V|, angle in rad with the reference solver's 30 degree slack)
const REFERENCE: [(usize, f64, f64); 8] = [
    (3, 0.9664223393709791, 0.1968178241779059),
    (9, 1.0230426812448226, 0.4901770667601926),
    (38, 0.9800824742581504, 0.2920720539995771),
    (53, 0.940980500976291, 0.24243301981876073),
    (63, 0.9883170719080218, 0.38981980556229867),
    (81, 1.0187934620798496, 0.48118013848003904),
    (109, 0.9660591159519011, 0.32066530972969065),
    (117, 0.9713510657377965, 0.18085945378552243),
];

// (line id, P_from MW, Q_from MVAr)
const REFERENCE_FLOWS: [(usize, f64, f64); 4] = [
    (1, -12.260125876573262, -11.180319838626602),
    (7, -440.4774743870317, 37.480299317162775),
    (38, 222.2373065617028, 30.59885252551465),
    (100, -37.05162916254, -14.419059936643297),
];

fn unlimited() -> PfSettings {
    PfSettings {
        enforce_q_limits: false,
        ..PfSettings::default()
    }
}

#[test]
fn matches_reference_solver_without_q_limits() {
    let net = ieee118();
    let u = ControlVariables::nominal(&net);
    let sol = PowerFlowSolver::new(&net, unlimited())
        .solve(&u, None, None)
        .unwrap();
    for (id, v, a) in REFERENCE {
        let i = net.bus_index(id).unwrap();
        assert!((sol.v[i] - v).abs() < 1e-7, "bus {id}: {} vs {v}", sol.v[i]);
        assert!(
            (sol.delta[i] - (a - SLACK_ANGLE)).abs() < 1e-7,
            "bus {id} angle"
        );
    }
    for (id, p, q) in REFERENCE_FLOWS {
        let f = sol.flows[net.line_index(id).unwrap()];
        assert!((f.p_from - p).abs() < 1e-5, "line {id}: {} vs {p}", f.p_from);
        assert!((f.q_from - q).abs() < 1e-5, "line {id}: {} vs {q}", f.q_from);
    }
    assert!((sol.p0 - 516.0942139110927).abs() < 1e-5);
    assert!(sol.power_balance_residual(net.base_mva()) < 1e-6);
}

#[test]
fn flat_start_converges_quickly_with_q_limits() {
    let net = ieee118();
    let sol = solve_power_flow(&net, &ControlVariables::nominal(&net)).unwrap();
    assert!(sol.max_mismatch < 1e-8);
    assert!(sol.factorizations <= 20);
    let limited = sol.q_limit.iter().filter(|q| **q != QLimit::Within).count();
    assert!(limited > 0);
    for (k, &i) in net.pv_indices().iter().enumerate() {
        let b = &net.buses()[i];
        assert!(sol.q_g[k] <= b.q_max_or_default() + 1e-6);
        assert!(sol.q_g[k] >= b.q_min_or_default() - 1e-6);
        if sol.q_limit[k] == QLimit::Within {
            assert!((sol.v[i] - b.v_set.unwrap()).abs() < 1e-12);
        }
    }
}

#[test]
fn warm_start_matches_cold_start() {
    let net = ieee118();
    let mut u = ControlVariables::nominal(&net);
    let mut solver = PowerFlowSolver::new(&net, PfSettings::default());
    let base = solver.solve(&u, None, None).unwrap();
    u.p_g[3] += 15.0;
    u.p_g[10] -= 15.0;
    u.v_g[5] += 0.004;
    let warm = solver.solve(&u, None, Some(&base)).unwrap();
    let cold = PowerFlowSolver::new(&net, PfSettings::default())
        .solve(&u, None, None)
        .unwrap();
    assert_eq!(warm.q_limit, cold.q_limit);
    for i in 0..net.buses().len() {
        assert!((warm.v[i] - cold.v[i]).abs() < 1e-8);
        assert!((warm.delta[i] - cold.delta[i]).abs() < 1e-8);
    }
    assert!(warm.factorizations < cold.factorizations);
}

#[test]
fn repeated_solve_reuses_factorization() {
    let net = ieee118();
    let u = ControlVariables::nominal(&net);
    let mut solver = PowerFlowSolver::new(&net, PfSettings::default());
    let first = solver.solve(&u, None, None).unwrap();
    let again = solver.solve(&u, None, Some(&first)).unwrap();
    assert_eq!(again.factorizations, 0);
    assert_eq!(again.iterations, 0);
}

#[test]
fn flat_start_iteration_count() {
    let net = ieee118();
    let sol = PowerFlowSolver::new(&net, unlimited())
        .solve(&ControlVariables::nominal(&net), None, None)
        .unwrap();
    assert!(sol.iterations <= 10, "{} iterations", sol.iterations);
    assert_eq!(sol.iterations, FLAT_START_ITERATIONS);
}

// Regression value; a change means the Newton iteration itself changed.
const FLAT_START_ITERATIONS: usize = 7;

#[test]
fn bus_order_does_not_change_the_solution() {
    let net = ieee118();
    let mut buses = net.buses().to_vec();
    buses.reverse();
    let shuffled = Network::new(net.base_mva(), buses, net.lines().to_vec()).unwrap();
    let a = solve_power_flow(&net, &ControlVariables::nominal(&net)).unwrap();
    let b = solve_power_flow(&shuffled, &ControlVariables::nominal(&shuffled)).unwrap();
    for (i, bus) in net.buses().iter().enumerate() {
        let j = shuffled.bus_index(bus.id).unwrap();
        assert!((a.v[i] - b.v[j]).abs() < 1e-9, "bus {}", bus.id);
        assert!((a.delta[i] - b.delta[j]).abs() < 1e-9, "bus {}", bus.id);
    }
    for (fa, fb) in a.flows.iter().zip(&b.flows) {
        assert!((fa.s_from() - fb.s_from()).abs() < 1e-6);
    }
    assert!((a.p0 - b.p0).abs() < 1e-6);
}

#[test]
fn reported_flows_match_the_voltages() {
    let net = ieee118();
    let sol = solve_power_flow(&net, &ControlVariables::nominal(&net)).unwrap();
    let phasor = |i: usize| Complex64::from_polar(sol.v[i], sol.delta[i]);
    for (line, flow) in net.lines().iter().zip(&sol.flows) {
        let (vi, vj) = (
            phasor(net.bus_index(line.from).unwrap()),
            phasor(net.bus_index(line.to).unwrap()),
        );
        let s = vi * (Complex64::new(line.g, line.b) * (vi - vj)).conj() * net.base_mva();
        assert!((s.re - flow.p_from).abs() < 1e-8, "line {}", line.id);
        assert!((s.im - flow.q_from).abs() < 1e-8, "line {}", line.id);
    }
}
