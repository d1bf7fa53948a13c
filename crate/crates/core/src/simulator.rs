//! Closed-loop simulation: the grid is re-solved every step, the controller
//! runs at its sampling cadence, generators track their set-points under
//! ramp limits, and imbalances are absorbed either by a static AGC rule or
//! by a first-order frequency model.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::acpf::{
    ControlVariables, InjectionAdjust, PfSettings, PowerFlowError, PowerFlowSolution,
    PowerFlowSolver, QLimit,
};
use crate::case::{CaseError, Network};
use crate::controller::{
    corrective_step_timed, violation_measures, CorrectiveStep, MeasurementSnapshot,
};
use crate::lp::GeneratorLimits;
use crate::penalty::{ControllerParams, PenaltyError};
use crate::sensitivity::{SensitivityBundle, SensitivityError};

/// Step sizes must divide the controller and AGC periods to within this.
const GRID_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Case(#[from] CaseError),
    #[error(transparent)]
    Penalty(#[from] PenaltyError),
    #[error(transparent)]
    Sensitivity(#[from] SensitivityError),
    #[error("power flow failed at t = {t} s: {source}")]
    PowerFlow { t: f64, source: PowerFlowError },
    #[error("network has no generator with positive capacity")]
    NoGenerators,
}

/// A failed run together with everything recorded before the failure.
#[derive(Debug, Error)]
#[error("{error}")]
pub struct SimulationFailure {
    pub error: SimError,
    pub partial: Box<Trajectory>,
}

/// Parameters of the frequency model. Per-unit quantities are distributed
/// over loads and generators by share, see [`DynamicModel::new`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DynamicParams {
    /// Hz/MW.
    pub k_s: f64,
    /// s.
    pub t_s: f64,
    /// Total load damping (MW/Hz).
    pub d_f: f64,
    /// System droop (Hz/MW).
    pub r_f: f64,
    /// Total AGC gain (MW/(Hz·s)).
    pub k_a: f64,
    pub f_nominal: f64,
}

impl Default for DynamicParams {
    fn default() -> Self {
        DynamicParams {
            k_s: 0.05,
            t_s: 10.0,
            d_f: 20.0,
            r_f: 0.005,
            k_a: 80.0,
            f_nominal: 50.0,
        }
    }
}

impl DynamicParams {
    /// All gains zero: frequency never moves.
    pub fn frozen() -> Self {
        DynamicParams {
            k_s: 0.0,
            d_f: 0.0,
            k_a: 0.0,
            r_f: f64::INFINITY,
            ..DynamicParams::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Disturbance {
    /// Sets the rating of `line` to its pre-disturbance flow minus
    /// `overload_mva`.
    SetRatingOverload { line: usize, overload_mva: f64 },
    /// Adds `dq_mvar` to the reactive injection of a PQ bus.
    ReactiveShift { bus: usize, dq_mvar: f64 },
    LineOutage { line: usize },
    /// Multiplies the susceptances seen by the controller by independent
    /// draws from Normal(1, sigma²). The grid keeps its true values.
    SusceptanceNoise { sigma: f64 },
    /// From now on one random line per controller sample reports the value
    /// it had at the previous sample.
    MeasurementStaleness,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisturbanceEvent {
    pub at: f64,
    #[serde(flatten)]
    pub kind: Disturbance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    /// s.
    pub horizon: f64,
    /// Step size (s); 1 s for static runs and 0.1 s for dynamic ones when
    /// absent.
    pub dt: Option<f64>,
    pub params: ControllerParams,
    pub dynamic: bool,
    pub dyn_params: DynamicParams,
    /// Static AGC rebalancing in static runs.
    pub static_agc: bool,
    /// Reactive limits of the generators are enforced by the power flow.
    pub q_limits: bool,
    pub disturbances: Vec<DisturbanceEvent>,
    pub rng_seed: u64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            horizon: 600.0,
            dt: None,
            params: ControllerParams::default(),
            dynamic: false,
            dyn_params: DynamicParams::default(),
            static_agc: true,
            q_limits: true,
            disturbances: Vec::new(),
            rng_seed: 0,
        }
    }
}

impl SimulationConfig {
    pub fn step(&self) -> f64 {
        self.dt.unwrap_or(if self.dynamic { 0.1 } else { 1.0 })
    }

    fn pf_settings(&self) -> PfSettings {
        PfSettings {
            enforce_q_limits: self.q_limits,
            ..PfSettings::default()
        }
    }

    /// Checks the timing grid and returns `(steps, controller period,
    /// AGC period)` in steps.
    pub fn validate(&self) -> Result<(usize, usize, usize), SimError> {
        self.params.validate()?;
        let dt = self.step();
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(SimError::Config(format!("dt must be positive, got {dt}")));
        }
        let whole = |x: f64, what: &str| -> Result<usize, SimError> {
            let n = (x / dt).round();
            if n < 1.0 || (n * dt - x).abs() > GRID_TOL * x.max(1.0) {
                Err(SimError::Config(format!("dt = {dt} does not divide {what} = {x}")))
            } else {
                Ok(n as usize)
            }
        };
        let m = whole(self.params.t_m, "t_m")?;
        let a = whole(self.params.t_a, "t_a")?;
        if self.horizon < self.params.t_m {
            return Err(SimError::Config(format!(
                "horizon {} is shorter than t_m {}",
                self.horizon, self.params.t_m
            )));
        }
        let n = whole(self.horizon, "horizon")?;
        for e in &self.disturbances {
            if !(0.0..=self.horizon).contains(&e.at) {
                return Err(SimError::Config(format!(
                    "disturbance at {} s outside [0, {}]",
                    e.at, self.horizon
                )));
            }
        }
        if self.dynamic {
            let p = &self.dyn_params;
            for (name, v) in [("k_s", p.k_s), ("d_f", p.d_f), ("k_a", p.k_a)] {
                if !(v >= 0.0 && v.is_finite()) {
                    return Err(SimError::Config(format!("{name} must be non-negative, got {v}")));
                }
            }
            if !(p.t_s > 0.0) || !(p.r_f > 0.0) {
                return Err(SimError::Config("t_s and r_f must be positive".into()));
            }
        }
        Ok((n, m, a))
    }
}

/// Capacity-proportional AGC weights per PV bus.
pub fn agc_weights(net: &Network) -> Result<Vec<f64>, SimError> {
    let caps: Vec<f64> = net
        .pv_indices()
        .iter()
        .map(|&i| net.buses()[i].p_max_or_default())
        .collect();
    let total: f64 = caps.iter().sum();
    if caps.is_empty() || !(total > 0.0 && total.is_finite()) {
        return Err(SimError::NoGenerators);
    }
    Ok(caps.iter().map(|c| c / total).collect())
}

/// Distributed response to a slack imbalance.
pub fn static_agc_response(p0: f64, p0_nominal: f64, eta: &[f64]) -> Vec<f64> {
    let imbalance = p0 - p0_nominal;
    eta.iter().map(|e| -e * imbalance).collect()
}

/// Moves `current` toward `setpoint` by at most `rate · dt` per entry and
/// lands on the set-point exactly when it is within reach.
pub fn ramp_toward(setpoint: &[f64], current: &[f64], rate: &[f64], dt: f64) -> Vec<f64> {
    setpoint
        .iter()
        .zip(current)
        .zip(rate)
        .map(|((&s, &c), &r)| {
            let reach = r * dt;
            let gap = s - c;
            if gap.abs() <= reach {
                s
            } else {
                c + reach.copysign(gap)
            }
        })
        .collect()
}

/// Ramp-limited tracking of both active and voltage set-points.
pub fn apply_ramp_limits(
    setpoint: &ControlVariables,
    current: &ControlVariables,
    limits: &GeneratorLimits,
    dt: f64,
) -> ControlVariables {
    ControlVariables {
        p_g: ramp_toward(&setpoint.p_g, &current.p_g, &limits.ramp_p, dt),
        v_g: ramp_toward(&setpoint.v_g, &current.v_g, &limits.ramp_v, dt),
    }
}

/// Per-element gains of the frequency model for one network.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicModel {
    pub k_s: f64,
    pub t_s: f64,
    /// Load damping per bus index (MW/Hz); zero at buses without load.
    pub d_l: Vec<f64>,
    /// Droop per PV bus (Hz/MW).
    pub r_g: Vec<f64>,
    /// AGC gain per PV bus.
    pub k_a: Vec<f64>,
    pub f_nominal: f64,
}

impl DynamicModel {
    /// Damping is shared by nominal PQ load, droop inversely and AGC gain
    /// directly by generator capacity.
    pub fn new(net: &Network, p: &DynamicParams) -> Result<Self, SimError> {
        let eta = agc_weights(net)?;
        let mut d_l = vec![0.0; net.buses().len()];
        let load: f64 = net
            .pq_indices()
            .iter()
            .map(|&i| (-net.buses()[i].p_inj).max(0.0))
            .sum();
        if load > 0.0 {
            for &i in net.pq_indices() {
                d_l[i] = p.d_f * (-net.buses()[i].p_inj).max(0.0) / load;
            }
        }
        Ok(DynamicModel {
            k_s: p.k_s,
            t_s: p.t_s,
            d_l,
            r_g: eta.iter().map(|e| p.r_f / e).collect(),
            k_a: eta.iter().map(|e| p.k_a * e).collect(),
            f_nominal: p.f_nominal,
        })
    }

    /// Governor response per PV bus (MW).
    pub fn governor(&self, state: &DynamicState) -> Vec<f64> {
        self.r_g.iter().map(|r| -state.df / r).collect()
    }

    /// Additional injection per bus caused by load damping (MW).
    pub fn load_injection(&self, state: &DynamicState) -> Vec<f64> {
        self.d_l.iter().map(|d| -d * state.df).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicState {
    /// Frequency deviation (Hz).
    pub df: f64,
    /// Integrated AGC output per PV bus (MW).
    pub dp_agc: Vec<f64>,
}

impl DynamicState {
    pub fn rest(npv: usize) -> Self {
        DynamicState {
            df: 0.0,
            dp_agc: vec![0.0; npv],
        }
    }
}

/// One explicit Euler step driven by the slack imbalance `p0 − p̃0` (MW).
pub fn step_dynamic(model: &DynamicModel, state: &DynamicState, imbalance: f64, dt: f64) -> DynamicState {
    DynamicState {
        df: state.df - dt * model.k_s / model.t_s * imbalance,
        dp_agc: state
            .dp_agc
            .iter()
            .zip(&model.k_a)
            .map(|(a, k)| a - dt * k * state.df)
            .collect(),
    }
}

/// Susceptance factors drawn from Normal(1, sigma²), one per line.
pub fn draw_susceptance_factors(n_lines: usize, sigma: f64, rng: &mut impl Rng) -> Vec<f64> {
    if sigma == 0.0 {
        return vec![1.0; n_lines];
    }
    let normal = Normal::new(1.0, sigma).expect("sigma is finite and non-negative");
    (0..n_lines).map(|_| normal.sample(rng)).collect()
}

/// Copy of `net` with perturbed susceptances, for building the
/// controller's sensitivities only.
pub fn perturb_susceptances(net: &Network, sigma: f64, seed: u64) -> Result<Network, SimError> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(SimError::Config(format!("sigma must be non-negative, got {sigma}")));
    }
    let mut rng = noise_rng(seed);
    let beta = draw_susceptance_factors(net.lines().len(), sigma, &mut rng);
    Ok(net.with_scaled_susceptances(&beta)?)
}

fn noise_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

fn staleness_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    rng
}

/// Lines worth overloading in a test campaign: mostly active flow, a
/// meaningful loading, and enough ramp-weighted controllability. Returns
/// line ids.
pub fn select_eligible_lines(
    net: &Network,
    sens: &SensitivityBundle,
    baseline: &PowerFlowSolution,
    ramp_p: &[f64],
) -> Vec<usize> {
    net.lines()
        .iter()
        .enumerate()
        .filter(|&(l, _)| {
            let f = &baseline.flows[l];
            let controllability: f64 = ramp_p
                .iter()
                .enumerate()
                .map(|(g, r)| sens.dpprime_dpg[(l, g)].abs() * r)
                .sum();
            f.p_from.abs() >= 3.0 * f.q_from.abs() && f.s_from() >= 20.0 && controllability >= 0.1
        })
        .map(|(_, line)| line.id)
        .collect()
}

/// Rating assigned to lines that have none.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RatingRule {
    /// Multiple of the nominal apparent flow.
    pub factor: f64,
    /// Lower bound (MVA).
    pub floor_mva: f64,
}

impl Default for RatingRule {
    fn default() -> Self {
        RatingRule {
            factor: 1.5,
            floor_mva: 30.0,
        }
    }
}

/// Fills in missing ratings from the flows of a solved nominal state.
pub fn assign_default_ratings(
    net: &Network,
    nominal: &PowerFlowSolution,
    rule: &RatingRule,
) -> Result<Network, SimError> {
    let ratings: Vec<Option<f64>> = net
        .lines()
        .iter()
        .zip(&nominal.flows)
        .map(|(l, f)| Some(l.s_rating.unwrap_or((rule.factor * f.s_from()).max(rule.floor_mva))))
        .collect();
    Ok(net.with_ratings(&ratings)?)
}

/// Reactive shift (MVAr) at PQ bus `bus` (index) that moves its solved
/// voltage to `target` (p.u.), found by bisection to 1e-6 p.u.
pub fn reactive_shift_for_voltage(
    net: &Network,
    u: &ControlVariables,
    settings: PfSettings,
    bus: usize,
    target: f64,
) -> Result<f64, SimError> {
    let mut solver = PowerFlowSolver::new(net, settings);
    let base = solver
        .solve(u, None, None)
        .map_err(|source| SimError::PowerFlow { t: 0.0, source })?;
    let v0 = base.v[bus];
    // positive when the voltage is still above the target (in the
    // direction of travel)
    let direction = if target < v0 { -1.0 } else { 1.0 };
    let mut voltage_at = |dq: f64| -> Option<f64> {
        let mut adj = InjectionAdjust::zero(net.buses().len());
        adj.dq[bus] = dq;
        solver.solve(u, Some(&adj), Some(&base)).ok().map(|s| s.v[bus])
    };
    let short = |v: Option<f64>| v.is_some_and(|v| direction * (target - v) > 0.0);
    let mut lo = 0.0;
    let mut hi = 10.0 * direction;
    while short(voltage_at(hi)) {
        lo = hi;
        hi *= 2.0;
        if hi.abs() > 1e5 {
            return Err(SimError::Config(format!(
                "no reactive shift at bus index {bus} reaches {target} p.u."
            )));
        }
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        match voltage_at(mid) {
            Some(v) if (v - target).abs() < 1e-6 => return Ok(mid),
            v if short(v) => lo = mid,
            _ => hi = mid,
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Everything recorded at one time step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub t: f64,
    /// Hz; nominal in static runs.
    pub f: f64,
    pub l: f64,
    pub l_prime: f64,
    pub p0: f64,
    /// Complex power balance residual of the solve (p.u.).
    pub residual: f64,
    pub pf_iterations: usize,
    /// Apparent sending-end flow per line of the initial network (MVA);
    /// zero once a line is out.
    pub s_flow: Vec<f64>,
    pub v: Vec<f64>,
    pub delta: Vec<f64>,
    /// Per PV bus: set-points, the component that tracks them under ramp
    /// limits, and the actual output including frequency response.
    pub p_set: Vec<f64>,
    pub p_track: Vec<f64>,
    pub p_g: Vec<f64>,
    pub v_set: Vec<f64>,
    pub v_g: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimEvent {
    pub t: f64,
    pub kind: String,
    pub detail: serde_json::Value,
}

/// Wall-clock of the expensive parts (s).
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Timings {
    pub sensitivity: Vec<f64>,
    pub active_lp: Vec<f64>,
    pub voltage_lp: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory {
    pub line_ids: Vec<usize>,
    pub bus_ids: Vec<usize>,
    pub pv_ids: Vec<usize>,
    /// Ramp limits per PV bus (MW/s, p.u./s).
    pub ramp_p: Vec<f64>,
    pub ramp_v: Vec<f64>,
    pub dt: f64,
    pub p0_nominal: f64,
    /// Line ratings in force at the end of the run, per initial line.
    pub ratings: Vec<Option<f64>>,
    pub steps: Vec<StepRecord>,
    pub events: Vec<SimEvent>,
    pub controller: Vec<CorrectiveStep>,
    #[serde(skip)]
    pub timings: Timings,
}

impl Trajectory {
    /// First time with a nonzero violation measure.
    pub fn first_violation(&self) -> Option<f64> {
        self.steps.iter().find(|s| s.l > 0.0).map(|s| s.t)
    }

    /// First time at or after the first violation at which L is zero again.
    pub fn first_clear(&self) -> Option<f64> {
        let onset = self.first_violation()?;
        self.steps.iter().find(|s| s.t >= onset && s.l == 0.0).map(|s| s.t)
    }

    /// Time from the start of the run until L first reaches zero after a
    /// violation; zero when nothing was ever violated.
    pub fn elapsed_time(&self) -> Option<f64> {
        match self.first_violation() {
            None => Some(0.0),
            Some(_) => self.first_clear().map(|t| t - self.steps[0].t),
        }
    }

    pub fn final_l(&self) -> Option<f64> {
        self.steps.last().map(|s| s.l)
    }

    pub fn peak_l(&self) -> f64 {
        self.steps.iter().map(|s| s.l).fold(0.0, f64::max)
    }

    pub fn max_freq_deviation(&self, f_nominal: f64) -> f64 {
        self.steps.iter().map(|s| (s.f - f_nominal).abs()).fold(0.0, f64::max)
    }

    /// Plot-ready CSV, one row per step.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,f,L,Lprime,p0");
        for id in &self.line_ids {
            let _ = write!(out, ",flow_{id}");
        }
        for id in &self.bus_ids {
            let _ = write!(out, ",v_{id}");
        }
        for prefix in ["pset", "p", "vset", "vg"] {
            for id in &self.pv_ids {
                let _ = write!(out, ",{prefix}_{id}");
            }
        }
        out.push('\n');
        for s in &self.steps {
            let _ = write!(out, "{},{},{},{},{}", s.t, s.f, s.l, s.l_prime, s.p0);
            for x in s
                .s_flow
                .iter()
                .chain(&s.v)
                .chain(&s.p_set)
                .chain(&s.p_g)
                .chain(&s.v_set)
                .chain(&s.v_g)
            {
                let _ = write!(out, ",{x}");
            }
            out.push('\n');
        }
        out
    }

    /// Event log as JSON lines.
    pub fn events_jsonl(&self) -> String {
        self.events
            .iter()
            .map(|e| serde_json::to_string(e).expect("events serialize") + "\n")
            .collect()
    }
}

pub fn run_static(net: &Network, config: &SimulationConfig) -> Result<Trajectory, SimulationFailure> {
    if config.dynamic {
        return Err(early_failure(SimError::Config("run_static needs a static configuration".into())));
    }
    simulate(net, config)
}

pub fn run_dynamic(net: &Network, config: &SimulationConfig) -> Result<Trajectory, SimulationFailure> {
    if !config.dynamic {
        return Err(early_failure(SimError::Config("run_dynamic needs a dynamic configuration".into())));
    }
    simulate(net, config)
}

/// Runs whichever mode the configuration selects.
pub fn simulate(net: &Network, config: &SimulationConfig) -> Result<Trajectory, SimulationFailure> {
    let mut sim = match Simulation::new(net, config) {
        Ok(s) => s,
        Err(e) => return Err(early_failure(e)),
    };
    match sim.run() {
        Ok(()) => Ok(sim.traj),
        Err(error) => Err(SimulationFailure {
            error,
            partial: Box::new(sim.traj),
        }),
    }
}

fn early_failure(error: SimError) -> SimulationFailure {
    SimulationFailure {
        error,
        partial: Box::new(Trajectory {
            line_ids: Vec::new(),
            bus_ids: Vec::new(),
            pv_ids: Vec::new(),
            ramp_p: Vec::new(),
            ramp_v: Vec::new(),
            dt: 0.0,
            p0_nominal: 0.0,
            ratings: Vec::new(),
            steps: Vec::new(),
            events: Vec::new(),
            controller: Vec::new(),
            timings: Timings::default(),
        }),
    }
}

struct Simulation<'a> {
    config: &'a SimulationConfig,
    n_steps: usize,
    m_steps: usize,
    a_steps: usize,
    dt: f64,
    /// The grid as it really is.
    net: Network,
    /// The grid as the controller believes it is.
    ctrl_net: Network,
    solver: PowerFlowSolver,
    sens: SensitivityBundle,
    eta: Vec<f64>,
    limits: GeneratorLimits,
    model: Option<DynamicModel>,
    state: DynamicState,
    p0_nominal: f64,
    nominal_s: HashMap<usize, f64>,
    beta: Option<HashMap<usize, f64>>,
    stale: bool,
    stale_rng: ChaCha8Rng,
    adjust: InjectionAdjust,
    /// Tracked component of the generator outputs and the set-points.
    track: ControlVariables,
    setpoint: ControlVariables,
    previous: Option<PowerFlowSolution>,
    last_seen: Option<MeasurementSnapshot>,
    /// Generators whose set-point sits on an active limit.
    clamped: Vec<usize>,
    traj: Trajectory,
}

impl<'a> Simulation<'a> {
    fn new(net: &Network, config: &'a SimulationConfig) -> Result<Self, SimError> {
        let (n_steps, m_steps, a_steps) = config.validate()?;
        let dt = config.step();
        let eta = agc_weights(net)?;
        let mut solver = PowerFlowSolver::new(net, config.pf_settings());
        let u = ControlVariables::nominal(net);
        let nominal = solver
            .solve(&u, None, None)
            .map_err(|source| SimError::PowerFlow { t: 0.0, source })?;
        let limits = GeneratorLimits::from_network(net, &config.params);
        let start = Instant::now();
        let sens = SensitivityBundle::build(net, &eta)?;
        let sens_time = start.elapsed().as_secs_f64();
        let npv = net.pv_indices().len();
        let model = if config.dynamic {
            Some(DynamicModel::new(net, &config.dyn_params)?)
        } else {
            None
        };
        let bus_ids: Vec<usize> = net.buses().iter().map(|b| b.id).collect();
        let traj = Trajectory {
            line_ids: net.lines().iter().map(|l| l.id).collect(),
            pv_ids: net.pv_indices().iter().map(|&i| bus_ids[i]).collect(),
            bus_ids,
            ramp_p: limits.ramp_p.clone(),
            ramp_v: limits.ramp_v.clone(),
            dt,
            p0_nominal: nominal.p0,
            ratings: net.lines().iter().map(|l| l.s_rating).collect(),
            steps: Vec::with_capacity(n_steps + 1),
            events: Vec::new(),
            controller: Vec::new(),
            timings: Timings {
                sensitivity: vec![sens_time],
                ..Timings::default()
            },
        };
        Ok(Simulation {
            config,
            n_steps,
            m_steps,
            a_steps,
            dt,
            nominal_s: net
                .lines()
                .iter()
                .zip(&nominal.flows)
                .map(|(l, f)| (l.id, f.s_from()))
                .collect(),
            net: net.clone(),
            ctrl_net: net.clone(),
            solver,
            sens,
            eta,
            limits,
            model,
            state: DynamicState::rest(npv),
            p0_nominal: nominal.p0,
            beta: None,
            stale: false,
            stale_rng: staleness_rng(config.rng_seed),
            adjust: InjectionAdjust::zero(net.buses().len()),
            setpoint: u.clone(),
            track: u,
            previous: Some(nominal),
            last_seen: None,
            clamped: Vec::new(),
            traj,
        })
    }

    fn event(&mut self, t: f64, kind: &str, detail: serde_json::Value) {
        self.traj.events.push(SimEvent {
            t,
            kind: kind.to_string(),
            detail,
        });
    }

    fn run(&mut self) -> Result<(), SimError> {
        let mut pending: Vec<(usize, &DisturbanceEvent)> = self
            .config
            .disturbances
            .iter()
            .map(|e| ((e.at / self.dt).round() as usize, e))
            .collect();
        pending.sort_by_key(|(s, _)| *s);
        let mut next = 0;
        let mut limited: Vec<bool> = Vec::new();
        for step in 0..=self.n_steps {
            let t = step as f64 * self.dt;
            while next < pending.len() && pending[next].0 == step {
                self.apply(t, &pending[next].1.kind)?;
                next += 1;
            }

            let output = self.output();
            let adjust = self.injection_adjust();
            let sol = self
                .solver
                .solve(&output, Some(&adjust), self.previous.as_ref())
                .map_err(|source| SimError::PowerFlow { t, source })?;
            let now_limited: Vec<bool> = sol.q_limit.iter().map(|q| *q != QLimit::Within).collect();
            if now_limited != limited && step > 0 {
                let ids: Vec<usize> = self
                    .traj
                    .pv_ids
                    .iter()
                    .zip(&now_limited)
                    .filter(|(_, l)| **l)
                    .map(|(id, _)| *id)
                    .collect();
                self.event(t, "q_limits", json!({ "limited": ids }));
            }
            limited = now_limited;

            let meas = MeasurementSnapshot::from_solution(t, &sol, &output.p_g);
            let (l, l_prime) = violation_measures(&self.net, &meas, &self.config.params)?;
            self.record(t, l, l_prime, &sol, &output);

            if step % self.m_steps == 0 {
                self.control(t, meas);
            }
            if self.model.is_none() && self.config.static_agc && step % self.a_steps == 0 {
                // the rule is stated for the power the slack absorbs, the
                // negative of its injection
                let dpa = static_agc_response(-sol.p0, -self.p0_nominal, &self.eta);
                for (s, d) in self.setpoint.p_g.iter_mut().zip(&dpa) {
                    *s += d;
                }
                self.clamp_setpoints(t);
            }

            if step < self.n_steps {
                self.track = apply_ramp_limits(&self.setpoint, &self.track, &self.limits, self.dt);
                if let Some(model) = &self.model {
                    self.state = step_dynamic(model, &self.state, sol.p0 - self.p0_nominal, self.dt);
                }
            }
            self.previous = Some(sol);
        }
        self.traj.ratings = self
            .traj
            .line_ids
            .iter()
            .map(|id| self.net.line_index(*id).and_then(|k| self.net.lines()[k].s_rating))
            .collect();
        Ok(())
    }

    /// Generator outputs seen by the grid.
    fn output(&self) -> ControlVariables {
        let mut out = self.track.clone();
        if let Some(model) = &self.model {
            for ((p, gov), agc) in out
                .p_g
                .iter_mut()
                .zip(model.governor(&self.state))
                .zip(&self.state.dp_agc)
            {
                *p += gov + agc;
            }
        }
        out
    }

    fn injection_adjust(&self) -> InjectionAdjust {
        let mut adj = self.adjust.clone();
        if let Some(model) = &self.model {
            for (dp, d) in adj.dp.iter_mut().zip(model.load_injection(&self.state)) {
                *dp += d;
            }
        }
        adj
    }

    fn record(&mut self, t: f64, l: f64, l_prime: f64, sol: &PowerFlowSolution, output: &ControlVariables) {
        let s_flow = self
            .traj
            .line_ids
            .iter()
            .map(|id| self.net.line_index(*id).map_or(0.0, |k| sol.flows[k].s_from()))
            .collect();
        let f = self.model.as_ref().map_or(self.config.dyn_params.f_nominal, |m| m.f_nominal) + self.state.df;
        self.traj.steps.push(StepRecord {
            t,
            f,
            l,
            l_prime,
            p0: sol.p0,
            residual: sol.power_balance_residual(self.net.base_mva()),
            pf_iterations: sol.iterations,
            s_flow,
            v: sol.v.clone(),
            delta: sol.delta.clone(),
            p_set: self.setpoint.p_g.clone(),
            p_track: self.track.p_g.clone(),
            p_g: output.p_g.clone(),
            v_set: self.setpoint.v_g.clone(),
            v_g: output.v_g.clone(),
        });
    }

    fn control(&mut self, t: f64, meas: MeasurementSnapshot) {
        let mut seen = meas;
        if self.stale {
            if let Some(prev) = self.last_seen.as_ref().filter(|p| p.p_flow.len() == seen.p_flow.len()) {
                let line = self.stale_rng.random_range(0..seen.p_flow.len());
                seen = seen.with_stale_line(prev, line);
            }
        }
        let result = corrective_step_timed(&seen, &self.ctrl_net, &self.sens, &self.config.params);
        self.last_seen = Some(seen);
        let (step, timing) = match result {
            Ok(r) => r,
            Err(e) => {
                self.event(t, "controller_error", json!({ "error": e.to_string() }));
                return;
            }
        };
        if step.active_status.is_some() || step.voltage_status.is_some() {
            self.traj.timings.active_lp.push(timing.active.as_secs_f64());
            self.traj.timings.voltage_lp.push(timing.voltage.as_secs_f64());
        }
        for (status, name) in [(step.active_status, "active"), (step.voltage_status, "voltage")] {
            if let Some(s) = status.filter(|s| *s != crate::lp::LpStatus::Optimal) {
                self.event(t, "lp_status", json!({ "program": name, "status": s }));
            }
        }
        if step.voltage_fallback {
            self.event(t, "voltage_fallback", json!({}));
        }
        if !step.forced_generators.is_empty() {
            let ids: Vec<usize> = step.forced_generators.iter().map(|&g| self.traj.pv_ids[g]).collect();
            self.event(t, "forced_move", json!({ "generators": ids }));
        }
        for g in 0..self.track.p_g.len() {
            self.setpoint.p_g[g] = self.track.p_g[g] + step.dp_g[g];
            self.setpoint.v_g[g] = self.track.v_g[g] + step.dv_g[g];
        }
        // The windows already hold the measured output within its limits. In
        // dynamic runs that output includes frequency response, so clamping
        // the tracked set-point as well would break the balance of the step.
        if self.model.is_none() {
            self.clamp_setpoints(t);
        }
        self.traj.controller.push(step);
    }

    fn clamp_setpoints(&mut self, t: f64) {
        let mut clamped = Vec::new();
        for (g, s) in self.setpoint.p_g.iter_mut().enumerate() {
            let c = s.clamp(self.limits.p_min[g], self.limits.p_max[g]);
            if c != *s {
                clamped.push(self.traj.pv_ids[g]);
                *s = c;
            }
        }
        if clamped != self.clamped {
            self.event(t, "p_limit", json!({ "generators": clamped }));
            self.clamped = clamped;
        }
    }

    fn apply(&mut self, t: f64, d: &Disturbance) -> Result<(), SimError> {
        self.event(t, "disturbance", serde_json::to_value(d).expect("disturbances serialize"));
        match *d {
            Disturbance::SetRatingOverload { line, overload_mva } => {
                let s0 = *self.nominal_s.get(&line).ok_or(CaseError::UnknownLine(line))?;
                let rating = s0 - overload_mva;
                if !(rating > 0.0) {
                    return Err(SimError::Config(format!(
                        "overload {overload_mva} MVA exceeds the {s0:.3} MVA flow of line {line}"
                    )));
                }
                self.net = self.net.with_rating(line, Some(rating))?;
                self.ctrl_net = self.ctrl_net.with_rating(line, Some(rating))?;
            }
            Disturbance::ReactiveShift { bus, dq_mvar } => {
                let i = self
                    .net
                    .bus_index(bus)
                    .ok_or_else(|| SimError::Config(format!("unknown bus {bus}")))?;
                if !self.net.pq_indices().contains(&i) {
                    return Err(SimError::Config(format!("bus {bus} is not a PQ bus")));
                }
                self.adjust.dq[i] += dq_mvar;
            }
            Disturbance::LineOutage { line } => {
                self.net = self.net.apply_outage(line)?;
                self.solver = PowerFlowSolver::new(&self.net, self.config.pf_settings());
                self.rebuild_controller_view()?;
            }
            Disturbance::SusceptanceNoise { sigma } => {
                if !(sigma >= 0.0 && sigma.is_finite()) {
                    return Err(SimError::Config(format!("sigma must be non-negative, got {sigma}")));
                }
                let mut rng = noise_rng(self.config.rng_seed);
                let beta = draw_susceptance_factors(self.net.lines().len(), sigma, &mut rng);
                self.beta = Some(self.net.lines().iter().map(|l| l.id).zip(beta).collect());
                self.rebuild_controller_view()?;
            }
            Disturbance::MeasurementStaleness => self.stale = true,
        }
        Ok(())
    }

    fn rebuild_controller_view(&mut self) -> Result<(), SimError> {
        self.ctrl_net = match &self.beta {
            Some(beta) => {
                let factors: Vec<f64> = self.net.lines().iter().map(|l| beta.get(&l.id).copied().unwrap_or(1.0)).collect();
                self.net.with_scaled_susceptances(&factors)?
            }
            None => self.net.clone(),
        };
        let start = Instant::now();
        self.sens = SensitivityBundle::build(&self.ctrl_net, &self.eta)?;
        self.traj.timings.sensitivity.push(start.elapsed().as_secs_f64());
        self.last_seen = None;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::case::{Bus, Line};

    fn grid() -> Network {
        let buses = vec![
            Bus::slack(1),
            Bus::pv(2, 40.0, 1.0, 100.0),
            Bus::pv(3, 30.0, 1.0, 300.0),
            Bus::pq(4, -60.0, -10.0),
            Bus::pq(5, -20.0, -5.0),
        ];
        let lines = vec![
            Line::from_impedance(1, 1, 2, 0.01, 0.1),
            Line::from_impedance(2, 2, 4, 0.01, 0.1),
            Line::from_impedance(3, 3, 4, 0.01, 0.1),
            Line::from_impedance(4, 1, 5, 0.01, 0.1),
            Line::from_impedance(5, 4, 5, 0.01, 0.1),
            Line::from_impedance(6, 1, 3, 0.01, 0.1),
        ];
        let net = Network::new(100.0, buses, lines).unwrap();
        let sol = crate::acpf::solve_power_flow(&net, &ControlVariables::nominal(&net)).unwrap();
        assign_default_ratings(&net, &sol, &RatingRule::default()).unwrap()
    }

    fn static_config(horizon: f64) -> SimulationConfig {
        SimulationConfig {
            horizon,
            ..SimulationConfig::default()
        }
    }

    #[test]
    fn weights_are_capacity_shares() {
        let eta = agc_weights(&grid()).unwrap();
        assert_eq!(eta, vec![0.25, 0.75]);
    }

    #[test]
    fn agc_response_cancels_imbalance() {
        let eta = [0.25, 0.75];
        assert_eq!(static_agc_response(110.0, 100.0, &eta), vec![-2.5, -7.5]);
        assert_eq!(static_agc_response(5.0, 5.0, &eta), vec![-0.0, -0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let imb: f64 = rng.random_range(-50.0..50.0);
            let sum: f64 = static_agc_response(imb, 0.0, &eta).iter().sum();
            assert!((sum + imb).abs() < 1e-12);
        }
    }

    #[test]
    fn ramp_clamps_and_arrives() {
        let r = [1.0];
        assert_eq!(ramp_toward(&[0.5], &[0.0], &r, 0.1), vec![0.1]);
        assert_eq!(ramp_toward(&[0.05], &[0.0], &r, 0.1), vec![0.05]);
        assert_eq!(ramp_toward(&[-0.5], &[0.0], &r, 0.1), vec![-0.1]);
        assert_eq!(ramp_toward(&[3.0], &[3.0], &[f64::INFINITY], 1.0), vec![3.0]);
    }

    #[test]
    fn euler_equilibrium_and_initial_slope() {
        let net = grid();
        let model = DynamicModel::new(&net, &DynamicParams::default()).unwrap();
        let rest = DynamicState::rest(2);
        assert_eq!(step_dynamic(&model, &rest, 0.0, 0.1), rest);
        // with governors and AGC out of the picture the first step is the
        // pure imbalance integration: -(K_S / T_S) * 10 MW
        let next = step_dynamic(&model, &rest, 10.0, 1.0);
        assert!((next.df + 0.05).abs() < 1e-15);
        assert_eq!(next.dp_agc, vec![0.0, 0.0]);
    }

    #[test]
    fn dynamic_gains_follow_shares() {
        let net = grid();
        let p = DynamicParams::default();
        let m = DynamicModel::new(&net, &p).unwrap();
        let d: f64 = m.d_l.iter().sum();
        assert!((d - 20.0).abs() < 1e-12);
        assert!((m.d_l[3] - 15.0).abs() < 1e-12);
        let droop: f64 = m.r_g.iter().map(|r| 1.0 / r).sum();
        assert!((droop - 1.0 / p.r_f).abs() < 1e-9);
        assert!((m.k_a.iter().sum::<f64>() - 80.0).abs() < 1e-12);
    }

    #[test]
    fn closed_frequency_loop_settles() {
        // linearised grid: imbalance = d + (D + 1/R) df - sum(agc)
        let net = grid();
        let p = DynamicParams::default();
        let model = DynamicModel::new(&net, &p).unwrap();
        let mut s = DynamicState::rest(2);
        let d = 10.0;
        for _ in 0..20_000 {
            let gov: f64 = model.governor(&s).iter().sum();
            let load: f64 = model.load_injection(&s).iter().sum();
            let imbalance = d - gov - load - s.dp_agc.iter().sum::<f64>();
            s = step_dynamic(&model, &s, imbalance, 0.1);
        }
        assert!(s.df.abs() < 1e-3);
        assert!((s.dp_agc.iter().sum::<f64>() - d).abs() < 1e-2);
    }

    #[test]
    fn susceptance_noise_is_seeded() {
        let net = grid();
        assert_eq!(perturb_susceptances(&net, 0.0, 1).unwrap(), net);
        let a = perturb_susceptances(&net, 0.2, 9).unwrap();
        let b = perturb_susceptances(&net, 0.2, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, net);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let draws = draw_susceptance_factors(200_000, 0.2, &mut rng);
        let mae = draws.iter().map(|b| (b - 1.0).abs()).sum::<f64>() / draws.len() as f64;
        assert!((mae - 0.2 * (2.0 / std::f64::consts::PI).sqrt()).abs() < 2e-3, "{mae}");
    }

    #[test]
    fn undisturbed_run_is_a_fixed_point() {
        let net = grid();
        let traj = run_static(&net, &static_config(20.0)).unwrap();
        assert_eq!(traj.steps.len(), 21);
        let first = &traj.steps[0];
        for s in &traj.steps {
            assert_eq!(s.l, 0.0);
            assert_eq!(s.p_g, first.p_g);
            assert!((s.p0 - first.p0).abs() < 1e-6);
        }
        assert!(traj.controller.iter().all(|c| c.is_zero()));
        assert_eq!(traj.elapsed_time(), Some(0.0));
    }

    #[test]
    fn undisturbed_dynamic_run_keeps_frequency() {
        let net = grid();
        let cfg = SimulationConfig {
            horizon: 8.0,
            dynamic: true,
            ..SimulationConfig::default()
        };
        let traj = run_dynamic(&net, &cfg).unwrap();
        assert_eq!(traj.steps.len(), 81);
        assert!(traj.steps.iter().all(|s| (s.f - 50.0).abs() < 1e-9));
    }

    #[test]
    fn overload_is_cleared_within_ramps() {
        let net = grid();
        let line = 2;
        let s0 = {
            let sol = crate::acpf::solve_power_flow(&net, &ControlVariables::nominal(&net)).unwrap();
            sol.flows[net.line_index(line).unwrap()].s_from()
        };
        let mut cfg = static_config(400.0);
        cfg.params.ramp_p = 1.0;
        cfg.disturbances.push(DisturbanceEvent {
            at: 0.0,
            kind: Disturbance::SetRatingOverload {
                line,
                overload_mva: 0.1 * s0,
            },
        });
        let traj = run_static(&net, &cfg).unwrap();
        assert!(traj.steps[0].l > 0.0);
        assert_eq!(traj.final_l(), Some(0.0));
        assert!(traj.elapsed_time().unwrap() > 0.0);
        for w in traj.steps.windows(2) {
            for g in 0..2 {
                assert!((w[1].p_track[g] - w[0].p_track[g]).abs() <= traj.ramp_p[g] * traj.dt);
            }
        }
        for c in &traj.controller {
            assert!(c.dp_g.iter().sum::<f64>().abs() < 1e-7);
        }
        let again = run_static(&net, &cfg).unwrap();
        assert_eq!(traj.to_csv(), again.to_csv());
    }

    #[test]
    fn outage_rebuilds_sensitivities() {
        let net = grid();
        let mut cfg = static_config(12.0);
        cfg.disturbances.push(DisturbanceEvent {
            at: 5.0,
            kind: Disturbance::LineOutage { line: 6 },
        });
        let traj = run_static(&net, &cfg).unwrap();
        assert_eq!(traj.timings.sensitivity.len(), 2);
        assert!(traj.steps[4].s_flow[5] > 0.0);
        assert_eq!(traj.steps[5].s_flow[5], 0.0);
        assert!(!traj.events.iter().any(|e| e.kind == "controller_error"));
    }

    #[test]
    fn bad_timing_grid_is_rejected() {
        let net = grid();
        let cfg = SimulationConfig {
            dt: Some(0.7),
            ..static_config(10.0)
        };
        assert!(matches!(run_static(&net, &cfg).unwrap_err().error, SimError::Config(_)));
    }

    #[test]
    fn reactive_shift_hits_target() {
        let net = grid();
        let u = ControlVariables::nominal(&net);
        let bus = 4;
        let dq = reactive_shift_for_voltage(&net, &u, PfSettings::default(), bus, 0.92).unwrap();
        assert!(dq < 0.0);
        let mut adj = InjectionAdjust::zero(5);
        adj.dq[bus] = dq;
        let sol = PowerFlowSolver::new(&net, PfSettings::default()).solve(&u, Some(&adj), None).unwrap();
        assert!((sol.v[bus] - 0.92).abs() < 1e-5);
    }

    #[test]
    fn csv_has_documented_columns() {
        let traj = run_static(&grid(), &static_config(4.0)).unwrap();
        let csv = traj.to_csv();
        let header = csv.lines().next().unwrap();
        assert!(header.starts_with("t,f,L,Lprime,p0,flow_1,"));
        assert!(header.ends_with("vg_2,vg_3"));
        assert_eq!(csv.lines().count(), 6);
        let cols = header.split(',').count();
        assert!(csv.lines().all(|l| l.split(',').count() == cols));
    }
}
