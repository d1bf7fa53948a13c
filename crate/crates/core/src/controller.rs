//! One corrective step: detect violations, build the P/Q caps, scale the
//! sparsity weights, solve both linear programs and return the set-point
//! changes.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::acpf::{PowerFlowSolution, QLimit};
use crate::case::Network;
use crate::lp::{
    build_active_lp, build_voltage_lp, solve_lp, GeneratorLimits, LpError, LpStatus,
};
use crate::penalty::{
    compute_l, compute_l_penalized, compute_lp, compute_lv, compute_pq_caps, ControllerParams,
    LineCaps, PenaltyError, VoltageTerms,
};
use crate::sensitivity::{SensitivityBundle, SensitivityError, S_EPS};

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error(transparent)]
    Sensitivity(#[from] SensitivityError),
    #[error(transparent)]
    Penalty(#[from] PenaltyError),
    #[error("active program: {0}")]
    ActiveLp(LpError),
    #[error("voltage program: {0}")]
    VoltageLp(LpError),
}

/// What the controller sees at a sampling instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementSnapshot {
    pub t: f64,
    /// Voltage magnitude per bus (p.u.).
    pub v: Vec<f64>,
    /// Sending-end flows per line (MW, MVAr, MVA).
    pub p_flow: Vec<f64>,
    pub q_flow: Vec<f64>,
    pub s_flow: Vec<f64>,
    /// Generator outputs per PV bus (MW, MVAr).
    pub p_g: Vec<f64>,
    pub q_g: Vec<f64>,
    /// PV buses currently held at a reactive limit.
    pub q_limited: Vec<bool>,
    pub p0: f64,
    /// Lines whose values were carried over from an earlier sample.
    pub stale: Vec<bool>,
}

impl MeasurementSnapshot {
    /// Fresh snapshot of a solved state; `p_g` is the actual generator output.
    pub fn from_solution(t: f64, sol: &PowerFlowSolution, p_g: &[f64]) -> Self {
        MeasurementSnapshot {
            t,
            v: sol.v.clone(),
            p_flow: sol.flows.iter().map(|f| f.p_from).collect(),
            q_flow: sol.flows.iter().map(|f| f.q_from).collect(),
            s_flow: sol.flows.iter().map(|f| f.s_from()).collect(),
            p_g: p_g.to_vec(),
            q_g: sol.q_g.clone(),
            q_limited: sol.q_limit.iter().map(|q| *q != QLimit::Within).collect(),
            p0: sol.p0,
            stale: vec![false; sol.flows.len()],
        }
    }

    /// Replaces the flow of `line` with its value in `previous`.
    pub fn with_stale_line(mut self, previous: &MeasurementSnapshot, line: usize) -> Self {
        self.p_flow[line] = previous.p_flow[line];
        self.q_flow[line] = previous.q_flow[line];
        self.s_flow[line] = previous.s_flow[line];
        self.stale[line] = true;
        self
    }
}

/// Ratings of all lines, as the violation measures expect them.
pub fn line_ratings(net: &Network) -> Vec<Option<f64>> {
    net.lines().iter().map(|l| l.s_rating).collect()
}

/// Voltages of the PQ buses in `meas`.
pub fn pq_voltages(net: &Network, meas: &MeasurementSnapshot) -> Vec<f64> {
    net.pq_indices().iter().map(|&i| meas.v[i]).collect()
}

/// `(L, L′)` for a snapshot.
pub fn violation_measures(
    net: &Network,
    meas: &MeasurementSnapshot,
    params: &ControllerParams,
) -> Result<(f64, f64), PenaltyError> {
    let v = pq_voltages(net, meas);
    let r = line_ratings(net);
    let l = compute_l(&v, &meas.s_flow, &r, params.v_bar, params.mu, params.k)?;
    let lp = compute_l_penalized(&v, &meas.s_flow, &r, params.v_bar, params.mu, params.k, params.xi)?;
    Ok((l, lp))
}

/// Per-line caps; lines carrying less than [`S_EPS`] are exempt.
pub fn line_caps(meas: &MeasurementSnapshot, ratings: &[Option<f64>]) -> Result<Vec<Option<LineCaps>>, PenaltyError> {
    ratings
        .iter()
        .enumerate()
        .map(|(l, r)| {
            let r = r.ok_or(PenaltyError::MissingRating(l))?;
            Ok((meas.s_flow[l] >= S_EPS).then(|| compute_pq_caps(meas.p_flow[l], meas.q_flow[l], r)))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrectiveStep {
    pub t: f64,
    /// Set-point changes per PV bus (MW, p.u.).
    pub dp_g: Vec<f64>,
    pub dv_g: Vec<f64>,
    pub l_value: f64,
    pub l_prime: f64,
    /// Active and voltage objectives at the zero step (sparsity excluded)
    /// and at the returned step, both with the exact penalty.
    pub lp_zero: f64,
    pub lp_value: f64,
    pub lv_zero: f64,
    pub lv_value: f64,
    /// Surrogate objectives of the linear programs at the zero step and at
    /// their optimum.
    pub lp_surrogate: (f64, f64),
    pub lv_surrogate: (f64, f64),
    pub nu_p: f64,
    pub nu_v: f64,
    /// `None` when the program was not needed.
    pub active_status: Option<LpStatus>,
    pub voltage_status: Option<LpStatus>,
    pub voltage_fallback: bool,
    /// PV positions whose ramp window misses their active limits.
    pub forced_generators: Vec<usize>,
    pub degenerate_caps: usize,
    pub active_size: (usize, usize),
    pub voltage_size: (usize, usize),
}

impl CorrectiveStep {
    fn zero(t: f64, npv: usize, l_value: f64, l_prime: f64) -> Self {
        CorrectiveStep {
            t,
            dp_g: vec![0.0; npv],
            dv_g: vec![0.0; npv],
            l_value,
            l_prime,
            lp_zero: 0.0,
            lp_value: 0.0,
            lv_zero: 0.0,
            lv_value: 0.0,
            lp_surrogate: (0.0, 0.0),
            lv_surrogate: (0.0, 0.0),
            nu_p: 0.0,
            nu_v: 0.0,
            active_status: None,
            voltage_status: None,
            voltage_fallback: false,
            forced_generators: Vec::new(),
            degenerate_caps: 0,
            active_size: (0, 0),
            voltage_size: (0, 0),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.dp_g.iter().chain(&self.dv_g).all(|d| *d == 0.0)
    }

    /// Structured log record with the nonzero changes keyed by bus id.
    pub fn log_record(&self, net: &Network) -> serde_json::Value {
        let ids: Vec<usize> = net.pv_indices().iter().map(|&i| net.buses()[i].id).collect();
        let nonzero = |d: &[f64]| {
            d.iter()
                .zip(&ids)
                .filter(|(d, _)| d.abs() > 1e-12)
                .map(|(d, id)| (id.to_string(), json!(d)))
                .collect::<serde_json::Map<_, _>>()
        };
        let status = |s: Option<LpStatus>| s.map(|s| format!("{s:?}").to_lowercase());
        json!({
            "t": self.t,
            "L": self.l_value,
            "Lprime": self.l_prime,
            "active_status": status(self.active_status),
            "voltage_status": status(self.voltage_status),
            "voltage_fallback": self.voltage_fallback,
            "nu_p": self.nu_p,
            "nu_v": self.nu_v,
            "dp": nonzero(&self.dp_g),
            "dv": nonzero(&self.dv_g),
        })
    }
}

/// Wall-clock spent in the two programs of one step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepTiming {
    pub active: Duration,
    pub voltage: Duration,
}

pub fn corrective_step(
    meas: &MeasurementSnapshot,
    net: &Network,
    sens: &SensitivityBundle,
    params: &ControllerParams,
) -> Result<CorrectiveStep, ControllerError> {
    corrective_step_timed(meas, net, sens, params).map(|(s, _)| s)
}

pub fn corrective_step_timed(
    meas: &MeasurementSnapshot,
    net: &Network,
    sens: &SensitivityBundle,
    params: &ControllerParams,
) -> Result<(CorrectiveStep, StepTiming), ControllerError> {
    sens.check_topology(net)?;
    let npv = net.pv_indices().len();
    let (l_value, l_prime) = violation_measures(net, meas, params)?;
    let mut timing = StepTiming::default();
    let mut step = CorrectiveStep::zero(meas.t, npv, l_value, l_prime);
    if l_value == 0.0 {
        return Ok((step, timing));
    }

    let ratings = line_ratings(net);
    let caps = line_caps(meas, &ratings)?;
    step.degenerate_caps = caps.iter().flatten().filter(|c| c.degenerate).count();
    let limits = GeneratorLimits::from_network(net, params);
    let k = params.k;
    let xi = params.xi;

    // active power
    let zeros_l = vec![0.0; meas.p_flow.len()];
    let zeros_g = vec![0.0; npv];
    step.lp_zero = compute_lp(&meas.p_flow, &zeros_l, &caps, &zeros_g, 0.0, k, xi);
    step.lp_value = step.lp_zero;
    step.nu_p = params.nu_p_rel * step.lp_zero;
    if step.lp_zero > 0.0 {
        let start = Instant::now();
        let active = build_active_lp(meas, &caps, &sens.dp_dpg, params, &limits, step.nu_p);
        let zero_obj = active_zero_surrogate(&active, meas, &caps, &sens.dp_dpg, params);
        let sol = solve_lp(&active.problem).map_err(ControllerError::ActiveLp)?;
        timing.active = start.elapsed();
        step.active_status = Some(sol.status);
        step.active_size = (active.problem.vars.len(), active.problem.rows.len());
        step.forced_generators = active.forced.clone();
        if sol.status == LpStatus::Optimal {
            step.dp_g = active.delta(&sol);
            step.lp_surrogate = (zero_obj, sol.objective);
            let dflow: Vec<f64> = (0..meas.p_flow.len())
                .map(|l| (0..npv).map(|g| sens.dp_dpg[(l, g)] * step.dp_g[g]).sum())
                .collect();
            step.lp_value = compute_lp(&meas.p_flow, &dflow, &caps, &step.dp_g, step.nu_p, k, xi);
        }
    }

    // voltage
    let part = sens.voltage_partition(net, &meas.q_limited)?;
    let monitored = net.pq_indices();
    let v_m: Vec<f64> = monitored.iter().map(|&i| meas.v[i]).collect();
    let zeros_v = vec![0.0; v_m.len()];
    let zero_terms = VoltageTerms {
        v_m: &v_m,
        dv: &zeros_v,
        q_m: &meas.q_flow,
        dq_flow: &zeros_l,
        caps: &caps,
        dv_g: &[],
    };
    step.lv_zero = compute_lv(zero_terms, params.mu, 0.0, k, xi, params.v_bar);
    step.lv_value = step.lv_zero;
    step.nu_v = params.nu_v_rel * step.lv_zero;
    if step.lv_zero > 0.0 {
        let pv_pos: Vec<usize> = part
            .control
            .iter()
            .map(|b| net.pv_indices().iter().position(|p| p == b).unwrap())
            .collect();
        let ramp_v: Vec<f64> = pv_pos.iter().map(|&g| limits.ramp_v[g]).collect();
        let start = Instant::now();
        let vlp = build_voltage_lp(meas, &caps, &part, monitored, &ramp_v, params, step.nu_v);
        let sol = solve_lp(&vlp.problem).map_err(ControllerError::VoltageLp)?;
        timing.voltage = start.elapsed();
        step.voltage_status = Some(sol.status);
        step.voltage_size = (vlp.problem.vars.len(), vlp.problem.rows.len());
        step.voltage_fallback = !vlp.fallback.is_empty();
        let dv_ctl = if sol.status == LpStatus::Optimal {
            let zero_obj = vlp.problem.offset
                + voltage_zero_surrogate(&vlp, meas, &caps, &part, params);
            step.lv_surrogate = (zero_obj, sol.objective);
            vlp.delta(&sol)
        } else {
            step.voltage_fallback = true;
            vlp.fixed.clone()
        };
        for (c, &g) in pv_pos.iter().enumerate() {
            step.dv_g[g] = dv_ctl[c];
        }
        let dv_dep: Vec<f64> = monitored
            .iter()
            .map(|&bus| {
                let r = part.dependent.iter().position(|&d| d == bus).unwrap();
                (0..dv_ctl.len()).map(|c| part.dv_dep[(r, c)] * dv_ctl[c]).sum()
            })
            .collect();
        let dq: Vec<f64> = (0..meas.q_flow.len())
            .map(|l| (0..dv_ctl.len()).map(|c| part.dq[(l, c)] * dv_ctl[c]).sum())
            .collect();
        let terms = VoltageTerms {
            v_m: &v_m,
            dv: &dv_dep,
            q_m: &meas.q_flow,
            dq_flow: &dq,
            caps: &caps,
            dv_g: &step.dv_g,
        };
        step.lv_value = compute_lv(terms, params.mu, step.nu_v, k, xi, params.v_bar);
    }
    Ok((step, timing))
}

/// Surrogate objective of the active program at Δp = 0 (forced moves kept).
fn active_zero_surrogate(
    active: &crate::lp::ActiveLp,
    meas: &MeasurementSnapshot,
    caps: &[Option<LineCaps>],
    dp_dpg: &nalgebra::DMatrix<f64>,
    params: &ControllerParams,
) -> f64 {
    let mut total = 0.0;
    for (l, cap) in caps.iter().enumerate() {
        let Some(cap) = cap else { continue };
        let shift: f64 = active
            .fixed
            .iter()
            .enumerate()
            .map(|(g, f)| dp_dpg[(l, g)] * f)
            .sum();
        let seg = crate::penalty::piecewise_linearize(cap.p_bar, params.xi, params.n_segments, 2.0 * cap.p_bar);
        total += seg.eval(meas.p_flow[l] + shift) / params.k;
    }
    total
}

fn voltage_zero_surrogate(
    vlp: &crate::lp::VoltageLp,
    meas: &MeasurementSnapshot,
    caps: &[Option<LineCaps>],
    part: &crate::sensitivity::VoltagePartition,
    params: &ControllerParams,
) -> f64 {
    let shift = |row: &[f64]| -> f64 { row.iter().zip(&vlp.fixed).map(|(s, f)| s * f).sum() };
    let vseg = crate::penalty::piecewise_linearize(params.v_bar, params.xi, params.n_segments, 2.0 * params.v_bar);
    let mut total = 0.0;
    for &bus in &vlp.buses {
        let r = part.dependent.iter().position(|&d| d == bus).unwrap();
        let row: Vec<f64> = part.dv_dep.row(r).iter().copied().collect();
        total += params.mu * vseg.eval(meas.v[bus] - 1.0 + shift(&row));
    }
    for &l in &vlp.lines {
        let cap = caps[l].unwrap();
        let row: Vec<f64> = part.dq.row(l).iter().copied().collect();
        let seg = crate::penalty::piecewise_linearize(cap.q_bar, params.xi, params.n_segments, 2.0 * cap.q_bar);
        total += seg.eval(meas.q_flow[l] + shift(&row)) / params.k;
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acpf::{solve_power_flow, ControlVariables};
    use crate::case::{Bus, Line};

    /// Slack, two generators and a load; the generator-side lines carry the
    /// transfer so that moving output between generators relieves them.
    fn small_grid(rating: f64) -> Network {
        let mut g1 = Bus::pv(1, 60.0, 1.0, 200.0);
        g1.q_min = Some(-100.0);
        g1.q_max = Some(100.0);
        let mut g2 = Bus::pv(2, 20.0, 1.0, 200.0);
        g2.q_min = Some(-100.0);
        g2.q_max = Some(100.0);
        let mut lines = vec![
            Line::from_impedance(0, 0, 1, 0.0, 0.1),
            Line::from_impedance(1, 1, 3, 0.0, 0.1),
            Line::from_impedance(2, 2, 3, 0.0, 0.1),
            Line::from_impedance(3, 0, 2, 0.0, 0.1),
        ];
        for l in &mut lines {
            l.s_rating = Some(500.0);
        }
        lines[1].s_rating = Some(rating);
        Network::new(
            100.0,
            vec![Bus::slack(0), g1, g2, Bus::pq(3, -80.0, -10.0)],
            lines,
        )
        .unwrap()
    }

    fn snapshot(net: &Network) -> MeasurementSnapshot {
        let u = ControlVariables::nominal(net);
        let sol = solve_power_flow(net, &u).unwrap();
        MeasurementSnapshot::from_solution(0.0, &sol, &u.p_g)
    }

    #[test]
    fn no_violation_gives_zero_step() {
        let net = small_grid(500.0);
        let meas = snapshot(&net);
        let sens = SensitivityBundle::build(&net, &[0.5, 0.5]).unwrap();
        let step = corrective_step(&meas, &net, &sens, &ControllerParams::default()).unwrap();
        assert_eq!(step.l_value, 0.0);
        assert!(step.is_zero());
        assert_eq!(step.active_status, None);
    }

    #[test]
    fn overload_moves_generators_in_opposite_directions() {
        let base = small_grid(500.0);
        let flow = snapshot(&base).s_flow[1];
        let net = small_grid(flow - 5.0);
        let meas = snapshot(&net);
        let sens = SensitivityBundle::build(&net, &[0.5, 0.5]).unwrap();
        let params = ControllerParams::default();
        let step = corrective_step(&meas, &net, &sens, &params).unwrap();
        assert!(step.l_value > 0.0);
        assert_eq!(step.active_status, Some(LpStatus::Optimal));
        let reach = params.ramp_p * params.t_m;
        assert!((step.dp_g[0] + reach).abs() < 1e-9, "{:?}", step.dp_g);
        assert!((step.dp_g[1] - reach).abs() < 1e-9);
        assert!(step.dp_g.iter().sum::<f64>().abs() < 1e-9);
        assert!(step.lp_value <= step.lp_zero);
        assert!(step.lp_surrogate.1 <= step.lp_surrogate.0 + 1e-12);
        let rec = step.log_record(&net);
        assert_eq!(rec["active_status"], "optimal");
        assert_eq!(rec["dp"].as_object().unwrap().len(), 2);
    }

    #[test]
    fn undervoltage_raises_nearby_generator() {
        let mut net = small_grid(500.0);
        let mut buses = net.buses().to_vec();
        buses[3].q_inj = -80.0;
        buses[3].p_inj = -150.0;
        net = net.with_buses(buses).unwrap();
        let params = ControllerParams {
            v_bar: 0.01,
            ..Default::default()
        };
        let meas = snapshot(&net);
        assert!(meas.v[3] < 0.99, "{}", meas.v[3]);
        let sens = SensitivityBundle::build(&net, &[0.5, 0.5]).unwrap();
        let step = corrective_step(&meas, &net, &sens, &params).unwrap();
        assert_eq!(step.voltage_status, Some(LpStatus::Optimal));
        let reach = params.ramp_v * params.t_m;
        assert!(step.dv_g.iter().all(|d| *d >= -1e-12));
        assert!(step.dv_g.iter().any(|d| (d - reach).abs() < 1e-9), "{:?}", step.dv_g);
        assert!(step.lv_value <= step.lv_zero);
    }

    #[test]
    fn stale_line_keeps_previous_values() {
        let net = small_grid(500.0);
        let a = snapshot(&net);
        let mut b = a.clone();
        b.p_flow[2] += 3.0;
        let c = b.with_stale_line(&a, 2);
        assert_eq!(c.p_flow[2], a.p_flow[2]);
        assert!(c.stale[2] && !c.stale[1]);
    }

    #[test]
    fn stale_bundle_is_rejected() {
        let net = small_grid(500.0);
        let sens = SensitivityBundle::build(&net, &[0.5, 0.5]).unwrap();
        let out = net.apply_outage(3).unwrap();
        let meas = snapshot(&out);
        assert!(matches!(
            corrective_step(&meas, &out, &sens, &ControllerParams::default()),
            Err(ControllerError::Sensitivity(SensitivityError::StaleTopology { .. }))
        ));
    }
}
