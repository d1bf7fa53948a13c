//! Sensitivities on the 118-bus system against two independent oracles:
//! finite differences of the decoupled linear model (solved with a Cholesky
//! factorization rather than the LU used in the crate), and finite
//! differences of the full AC power flow.

mod support {
    pub mod fdpf_oracle;
}

use gridrelief_core::acpf::{ControlVariables, PfSettings, PowerFlowSolver};
use gridrelief_core::data::ieee118;
use gridrelief_core::sensitivity::SensitivityBundle;
use support::fdpf_oracle::{capacity_weights, linear_state};

#[test]
fn matches_linear_model_finite_differences() {
    let net = ieee118();
    let eta = capacity_weights(&net);
    let sb = SensitivityBundle::build(&net, &eta).unwrap();
    let npv = net.pv_indices().len();
    let base = net.base_mva();
    let h_p = 1.0;
    let h_v = 1e-3;
    let mut worst: f64 = 0.0;
    for g in 0..npv {
        let mut dp = vec![0.0; npv];
        dp[g] = h_p;
        let (delta, _) = linear_state(&net, &dp, &vec![0.0; npv]);
        let mut dv = vec![0.0; npv];
        dv[g] = h_v;
        let (_, v) = linear_state(&net, &vec![0.0; npv], &dv);
        for i in 0..net.buses().len() {
            worst = worst.max((sb.ddelta_dpg[(i, g)] - delta[i] / h_p).abs() * base);
        }
        for (r, &l) in net.pq_indices().iter().enumerate() {
            worst = worst.max((sb.dvl_dvg[(r, g)] - v[l] / h_v).abs());
        }
        for (k, (line, &(f, t))) in net.lines().iter().zip(net.line_ends()).enumerate() {
            let p = -line.b * base * (delta[f] - delta[t]);
            let q = -line.b * base * (v[f] - v[t]);
            worst = worst.max((sb.dp_dpg[(k, g)] - p / h_p).abs());
            worst = worst.max((sb.dq_dvg[(k, g)] - q / h_v).abs() / base);
        }
    }
    assert!(worst < 1e-9, "worst deviation {worst:e}");
}

#[test]
fn transfer_factors_are_bounded_and_adjusted_rows_annihilate_eta() {
    let net = ieee118();
    let eta = capacity_weights(&net);
    let sb = SensitivityBundle::build(&net, &eta).unwrap();
    assert!(sb.dp_dpg.iter().all(|x| x.abs() <= 1.0 + 1e-9));
    for row in sb.dpprime_dpg.row_iter() {
        let s: f64 = row.iter().zip(&eta).map(|(a, b)| a * b).sum();
        assert!(s.abs() < 1e-12);
    }
}

#[test]
fn signs_agree_with_ac_finite_differences() {
    let net = ieee118();
    let eta = capacity_weights(&net);
    let sb = SensitivityBundle::build(&net, &eta).unwrap();
    let settings = PfSettings {
        enforce_q_limits: false,
        ..PfSettings::default()
    };
    let mut solver = PowerFlowSolver::new(&net, settings);
    let u0 = ControlVariables::nominal(&net);
    let base = solver.solve(&u0, None, None).unwrap();
    let (mut agree, mut total) = (0usize, 0usize);
    for g in 0..u0.p_g.len() {
        let mut u = u0.clone();
        u.p_g[g] += 1.0;
        let sp = solver.solve(&u, None, Some(&base)).unwrap();
        let mut u = u0.clone();
        u.v_g[g] += 1e-3;
        let sv = solver.solve(&u, None, Some(&base)).unwrap();
        for k in 0..net.lines().len() {
            let fd_p = sp.flows[k].p_from - base.flows[k].p_from;
            let fd_q = (sv.flows[k].q_from - base.flows[k].q_from) / 1e-3;
            for (lin, fd) in [(sb.dp_dpg[(k, g)], fd_p), (sb.dq_dvg[(k, g)], fd_q)] {
                if lin.abs() > 0.05 {
                    total += 1;
                    agree += usize::from(lin.signum() == fd.signum());
                }
            }
        }
    }
    let rate = agree as f64 / total as f64;
    assert!(rate >= 0.95, "sign agreement {rate} over {total} entries");
}

#[test]
fn outage_changes_the_outaged_corridor() {
    let net = ieee118();
    let eta = capacity_weights(&net);
    let before = SensitivityBundle::build(&net, &eta).unwrap();
    let out = net.apply_outage(11).unwrap();
    let after = SensitivityBundle::build(&out, &eta).unwrap();
    assert_ne!(before.topology_tag, after.topology_tag);
    // line 11 (5-11) runs parallel to line 10 (4-11)
    let k_before = net.line_index(10).unwrap();
    let k_after = out.line_index(10).unwrap();
    let diff = (before.dp_dpg.row(k_before) - after.dp_dpg.row(k_after)).amax();
    assert!(diff > 1e-3, "diff {diff}");
}
