//! Full AC power flow: the "grid" that answers set-point changes with the
//! resulting voltages, angles and line flows.
//!
//! Newton-Raphson in polar coordinates on a dense Jacobian. The solver keeps
//! the last LU factorization and reuses it while convergence stays fast,
//! which makes the many small warm-started solves of a closed-loop run cheap.
//! Generators whose reactive output leaves `[q_min, q_max]` are held at the
//! violated limit and treated as PQ buses until their voltage recovers.

use nalgebra::{DMatrix, DVector, Dyn, LU};
use num_complex::Complex64;
use thiserror::Error;

use crate::case::{BusKind, Network};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PfSettings {
    /// Largest acceptable bus power mismatch (p.u.).
    pub tol: f64,
    /// Maximum number of Jacobian factorizations per solve.
    pub max_iter: usize,
    pub max_switch_rounds: usize,
    pub enforce_q_limits: bool,
}

impl Default for PfSettings {
    fn default() -> Self {
        PfSettings {
            tol: 1e-8,
            max_iter: 20,
            max_switch_rounds: 10,
            enforce_q_limits: true,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PowerFlowError {
    #[error("divergence: mismatch {mismatch:.3e} p.u. after {iterations} iterations")]
    Divergence { mismatch: f64, iterations: usize },
    #[error("oscillating switch set after {0} rounds")]
    OscillatingSwitchSet(usize),
    #[error("singular Jacobian")]
    SingularJacobian,
    #[error("control vector has {got} entries, network has {expected} PV buses")]
    ControlLength { expected: usize, got: usize },
    #[error("non-positive voltage set-point {0}")]
    BadVoltage(f64),
}

/// Active (MW) and voltage (p.u.) set-values per PV bus, in
/// [`Network::pv_indices`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlVariables {
    pub p_g: Vec<f64>,
    pub v_g: Vec<f64>,
}

impl ControlVariables {
    /// The dispatch stored in the case.
    pub fn nominal(net: &Network) -> Self {
        let pv = net.pv_indices();
        ControlVariables {
            p_g: pv.iter().map(|&i| net.buses()[i].p_inj).collect(),
            v_g: pv.iter().map(|&i| net.buses()[i].v_set.unwrap_or(1.0)).collect(),
        }
    }
}

/// Extra injections added on top of the case data, per bus (MW, MVAr).
#[derive(Debug, Clone, PartialEq)]
pub struct InjectionAdjust {
    pub dp: Vec<f64>,
    pub dq: Vec<f64>,
}

impl InjectionAdjust {
    pub fn zero(n: usize) -> Self {
        InjectionAdjust {
            dp: vec![0.0; n],
            dq: vec![0.0; n],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QLimit {
    Within,
    AtMax,
    AtMin,
}

/// Sending- and receiving-end flows of one line (MW, MVAr).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineFlow {
    pub p_from: f64,
    pub q_from: f64,
    pub p_to: f64,
    pub q_to: f64,
}

impl LineFlow {
    /// Sending-end apparent power |S_ij| (MVA).
    pub fn s_from(&self) -> f64 {
        self.p_from.hypot(self.q_from)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerFlowSolution {
    pub v: Vec<f64>,
    pub delta: Vec<f64>,
    /// Net injections per bus (MW, MVAr).
    pub p_inj: Vec<f64>,
    pub q_inj: Vec<f64>,
    pub flows: Vec<LineFlow>,
    /// Net active injection at the slack bus (MW).
    pub p0: f64,
    /// Generator reactive output per PV bus (MVAr).
    pub q_g: Vec<f64>,
    pub q_limit: Vec<QLimit>,
    pub iterations: usize,
    pub factorizations: usize,
    pub max_mismatch: f64,
}

impl PowerFlowSolution {
    /// Bus ids of PV buses held at a reactive limit.
    pub fn switched_pq(&self, net: &Network) -> Vec<usize> {
        net.pv_indices()
            .iter()
            .zip(&self.q_limit)
            .filter(|(_, q)| **q != QLimit::Within)
            .map(|(&i, _)| net.buses()[i].id)
            .collect()
    }

    /// |Σ bus injections − Σ line losses| in p.u.
    pub fn power_balance_residual(&self, base_mva: f64) -> f64 {
        let inj = Complex64::new(self.p_inj.iter().sum(), self.q_inj.iter().sum());
        let loss: Complex64 = self
            .flows
            .iter()
            .map(|f| Complex64::new(f.p_from + f.p_to, f.q_from + f.q_to))
            .sum();
        (inj - loss).norm() / base_mva
    }
}

/// Per-line (P_ij, Q_ij, |S_ij|) at the sending end.
pub fn line_flows(sol: &PowerFlowSolution) -> Vec<(f64, f64, f64)> {
    sol.flows
        .iter()
        .map(|f| (f.p_from, f.q_from, f.s_from()))
        .collect()
}

pub fn slack_injection(sol: &PowerFlowSolution) -> f64 {
    sol.p0
}

/// Sparse bus admittance matrix in p.u.
#[derive(Debug, Clone)]
pub struct YBus {
    pub diag: Vec<Complex64>,
    /// Off-diagonal entries per row, summed over parallel lines.
    pub off: Vec<Vec<(usize, Complex64)>>,
}

impl YBus {
    pub fn dim(&self) -> usize {
        self.diag.len()
    }

    pub fn to_dense(&self) -> DMatrix<Complex64> {
        let n = self.dim();
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = self.diag[i];
            for &(j, y) in &self.off[i] {
                m[(i, j)] += y;
            }
        }
        m
    }
}

pub fn build_ybus(net: &Network) -> YBus {
    let n = net.buses().len();
    let mut diag = vec![Complex64::new(0.0, 0.0); n];
    let mut off: Vec<Vec<(usize, Complex64)>> = vec![Vec::new(); n];
    let mut add = |i: usize, j: usize, y: Complex64| match off[i].iter_mut().find(|e| e.0 == j) {
        Some(e) => e.1 += y,
        None => off[i].push((j, y)),
    };
    for (l, &(f, t)) in net.lines().iter().zip(net.line_ends()) {
        let y = Complex64::new(l.g, l.b);
        diag[f] += y;
        diag[t] += y;
        add(f, t, -y);
        add(t, f, -y);
    }
    for row in &mut off {
        row.sort_by_key(|e| e.0);
    }
    YBus { diag, off }
}

struct Chord {
    vm_mask: Vec<bool>,
    lu: LU<f64, Dyn, Dyn>,
}

/// Reusable power flow solver for one topology.
pub struct PowerFlowSolver {
    settings: PfSettings,
    base: f64,
    slack: usize,
    pv: Vec<usize>,
    pv_pos: Vec<Option<usize>>,
    kind: Vec<BusKind>,
    ybus: YBus,
    ends: Vec<(usize, usize)>,
    y_line: Vec<Complex64>,
    p_base: Vec<f64>,
    q_base: Vec<f64>,
    q_load: Vec<f64>,
    q_min: Vec<f64>,
    q_max: Vec<f64>,
    chord: Option<Chord>,
}

impl PowerFlowSolver {
    pub fn new(net: &Network, settings: PfSettings) -> Self {
        let n = net.buses().len();
        let pv = net.pv_indices().to_vec();
        let mut pv_pos = vec![None; n];
        for (k, &i) in pv.iter().enumerate() {
            pv_pos[i] = Some(k);
        }
        let buses = net.buses();
        let p_base = buses
            .iter()
            .map(|b| match b.kind {
                BusKind::Pq => b.p_inj,
                _ => -b.p_load,
            })
            .collect();
        let q_base = buses
            .iter()
            .map(|b| match b.kind {
                BusKind::Pq => b.q_inj,
                _ => -b.q_load,
            })
            .collect();
        PowerFlowSolver {
            settings,
            base: net.base_mva(),
            slack: net.slack_index(),
            pv_pos,
            kind: buses.iter().map(|b| b.kind).collect(),
            ybus: build_ybus(net),
            ends: net.line_ends().to_vec(),
            y_line: net.lines().iter().map(|l| Complex64::new(l.g, l.b)).collect(),
            p_base,
            q_base,
            q_load: buses.iter().map(|b| b.q_load).collect(),
            q_min: pv.iter().map(|&i| buses[i].q_min_or_default()).collect(),
            q_max: pv.iter().map(|&i| buses[i].q_max_or_default()).collect(),
            pv,
            chord: None,
        }
    }

    pub fn settings(&self) -> &PfSettings {
        &self.settings
    }

    /// Solves for the given set-values. `warm` seeds voltages, angles and the
    /// reactive-limit states; flat start otherwise.
    pub fn solve(
        &mut self,
        u: &ControlVariables,
        adjust: Option<&InjectionAdjust>,
        warm: Option<&PowerFlowSolution>,
    ) -> Result<PowerFlowSolution, PowerFlowError> {
        let n = self.ybus.dim();
        let npv = self.pv.len();
        if u.p_g.len() != npv || u.v_g.len() != npv {
            return Err(PowerFlowError::ControlLength {
                expected: npv,
                got: u.p_g.len().min(u.v_g.len()),
            });
        }
        if let Some(&v) = u.v_g.iter().find(|v| !(**v > 0.0)) {
            return Err(PowerFlowError::BadVoltage(v));
        }
        let zero = InjectionAdjust::zero(n);
        let adj = adjust.unwrap_or(&zero);

        let (mut vm, mut va, mut qlim) = match warm {
            Some(w) if w.v.len() == n && w.q_limit.len() == npv => {
                (w.v.clone(), w.delta.clone(), w.q_limit.clone())
            }
            _ => (vec![1.0; n], vec![0.0; n], vec![QLimit::Within; npv]),
        };
        if !self.settings.enforce_q_limits {
            qlim.iter_mut().for_each(|q| *q = QLimit::Within);
        }
        vm[self.slack] = 1.0;
        va[self.slack] = 0.0;

        let mut iterations = 0;
        let mut factorizations = 0;
        let mut rounds = 0;
        loop {
            for (k, &i) in self.pv.iter().enumerate() {
                if qlim[k] == QLimit::Within {
                    vm[i] = u.v_g[k];
                }
            }
            let (p_spec, q_spec) = self.specs(u, adj, &qlim);
            let (it, fac, mism) = self.newton(&mut vm, &mut va, &p_spec, &q_spec, &qlim)?;
            iterations += it;
            factorizations += fac;

            let (p_calc, q_calc) = self.injections(&vm, &va);
            let q_g: Vec<f64> = self
                .pv
                .iter()
                .map(|&i| q_calc[i] * self.base + self.q_load[i] - adj.dq[i])
                .collect();
            let mut changed = false;
            if self.settings.enforce_q_limits {
                for (k, &i) in self.pv.iter().enumerate() {
                    let next = match qlim[k] {
                        QLimit::Within if q_g[k] > self.q_max[k] + 1e-6 => QLimit::AtMax,
                        QLimit::Within if q_g[k] < self.q_min[k] - 1e-6 => QLimit::AtMin,
                        QLimit::AtMax if vm[i] > u.v_g[k] + 1e-9 => QLimit::Within,
                        QLimit::AtMin if vm[i] < u.v_g[k] - 1e-9 => QLimit::Within,
                        s => s,
                    };
                    if next != qlim[k] {
                        qlim[k] = next;
                        changed = true;
                    }
                }
            }
            if !changed {
                return Ok(self.finish(vm, va, p_calc, q_calc, q_g, qlim, iterations, factorizations, mism));
            }
            rounds += 1;
            if rounds > self.settings.max_switch_rounds {
                return Err(PowerFlowError::OscillatingSwitchSet(rounds));
            }
        }
    }

    fn specs(&self, u: &ControlVariables, adj: &InjectionAdjust, qlim: &[QLimit]) -> (Vec<f64>, Vec<f64>) {
        let n = self.ybus.dim();
        let mut p = vec![0.0; n];
        let mut q = vec![0.0; n];
        for i in 0..n {
            let mut pi = self.p_base[i] + adj.dp[i];
            let mut qi = self.q_base[i] + adj.dq[i];
            if let Some(k) = self.pv_pos[i] {
                pi += u.p_g[k];
                match qlim[k] {
                    QLimit::AtMax => qi += self.q_max[k],
                    QLimit::AtMin => qi += self.q_min[k],
                    QLimit::Within => {}
                }
            }
            p[i] = pi / self.base;
            q[i] = qi / self.base;
        }
        (p, q)
    }

    fn injections(&self, vm: &[f64], va: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = vm.len();
        let v: Vec<Complex64> = (0..n).map(|i| Complex64::from_polar(vm[i], va[i])).collect();
        let mut p = vec![0.0; n];
        let mut q = vec![0.0; n];
        for i in 0..n {
            let mut cur = self.ybus.diag[i] * v[i];
            for &(j, y) in &self.ybus.off[i] {
                cur += y * v[j];
            }
            let s = v[i] * cur.conj();
            p[i] = s.re;
            q[i] = s.im;
        }
        (p, q)
    }

    /// Inner Newton loop for a fixed reactive-limit state. Returns
    /// (iterations, factorizations, final mismatch).
    fn newton(
        &mut self,
        vm: &mut [f64],
        va: &mut [f64],
        p_spec: &[f64],
        q_spec: &[f64],
        qlim: &[QLimit],
    ) -> Result<(usize, usize, f64), PowerFlowError> {
        let n = vm.len();
        let ang: Vec<usize> = (0..n).filter(|&i| i != self.slack).collect();
        let vm_mask: Vec<bool> = (0..n)
            .map(|i| match self.kind[i] {
                BusKind::Pq => true,
                BusKind::Pv => qlim[self.pv_pos[i].unwrap()] != QLimit::Within,
                BusKind::Slack => false,
            })
            .collect();
        let vmi: Vec<usize> = (0..n).filter(|&i| vm_mask[i]).collect();
        let na = ang.len();
        let dim = na + vmi.len();

        if self.chord.as_ref().is_some_and(|c| c.vm_mask != vm_mask) {
            self.chord = None;
        }
        let mut need_factor = self.chord.is_none();
        let mut iterations = 0;
        let mut factorizations = 0;
        let mut prev = f64::INFINITY;
        let max_total = 4 * self.settings.max_iter;
        loop {
            let (p, q) = self.injections(vm, va);
            let mut f = DVector::zeros(dim);
            for (r, &i) in ang.iter().enumerate() {
                f[r] = p_spec[i] - p[i];
            }
            for (r, &i) in vmi.iter().enumerate() {
                f[na + r] = q_spec[i] - q[i];
            }
            let mism = f.amax();
            if !mism.is_finite() {
                self.chord = None;
                return Err(PowerFlowError::Divergence {
                    mismatch: mism,
                    iterations,
                });
            }
            if mism < self.settings.tol {
                return Ok((iterations, factorizations, mism));
            }
            if mism > 0.1 * prev {
                need_factor = true;
            }
            if iterations >= max_total || (need_factor && factorizations >= self.settings.max_iter) {
                self.chord = None;
                return Err(PowerFlowError::Divergence {
                    mismatch: mism,
                    iterations,
                });
            }
            if need_factor {
                let jac = self.jacobian(vm, va, &p, &q, &ang, &vmi);
                let lu = jac.lu();
                if !lu.is_invertible() {
                    self.chord = None;
                    return Err(PowerFlowError::SingularJacobian);
                }
                self.chord = Some(Chord {
                    vm_mask: vm_mask.clone(),
                    lu,
                });
                factorizations += 1;
                need_factor = false;
            }
            let dx = self
                .chord
                .as_ref()
                .unwrap()
                .lu
                .solve(&f)
                .ok_or(PowerFlowError::SingularJacobian)?;
            for (r, &i) in ang.iter().enumerate() {
                va[i] += dx[r];
            }
            for (r, &i) in vmi.iter().enumerate() {
                vm[i] += dx[na + r];
            }
            prev = mism;
            iterations += 1;
        }
    }

    fn jacobian(
        &self,
        vm: &[f64],
        va: &[f64],
        p: &[f64],
        q: &[f64],
        ang: &[usize],
        vmi: &[usize],
    ) -> DMatrix<f64> {
        let n = vm.len();
        let na = ang.len();
        let dim = na + vmi.len();
        let mut ang_pos = vec![usize::MAX; n];
        for (r, &i) in ang.iter().enumerate() {
            ang_pos[i] = r;
        }
        let mut vm_pos = vec![usize::MAX; n];
        for (r, &i) in vmi.iter().enumerate() {
            vm_pos[i] = na + r;
        }
        let mut jac = DMatrix::zeros(dim, dim);
        for i in 0..n {
            let (rp, rq) = (ang_pos[i], vm_pos[i]);
            if rp == usize::MAX && rq == usize::MAX {
                continue;
            }
            let gii = self.ybus.diag[i].re;
            let bii = self.ybus.diag[i].im;
            let vi = vm[i];
            if rp != usize::MAX {
                jac[(rp, rp)] = -q[i] - bii * vi * vi;
                if rq != usize::MAX {
                    jac[(rp, rq)] = p[i] / vi + gii * vi;
                }
            }
            if rq != usize::MAX {
                jac[(rq, rp)] = p[i] - gii * vi * vi;
                jac[(rq, rq)] = q[i] / vi - bii * vi;
            }
            for &(j, y) in &self.ybus.off[i] {
                let (g, b) = (y.re, y.im);
                let (s, c) = (va[i] - va[j]).sin_cos();
                let t1 = g * c + b * s;
                let t2 = g * s - b * c;
                let vj = vm[j];
                let (cp, cq) = (ang_pos[j], vm_pos[j]);
                if rp != usize::MAX {
                    if cp != usize::MAX {
                        jac[(rp, cp)] = vi * vj * t2;
                    }
                    if cq != usize::MAX {
                        jac[(rp, cq)] = vi * t1;
                    }
                }
                if rq != usize::MAX {
                    if cp != usize::MAX {
                        jac[(rq, cp)] = -vi * vj * t1;
                    }
                    if cq != usize::MAX {
                        jac[(rq, cq)] = vi * t2;
                    }
                }
            }
        }
        jac
    }

    #[allow(clippy::too_many_arguments)]
    fn finish(
        &self,
        vm: Vec<f64>,
        va: Vec<f64>,
        p_calc: Vec<f64>,
        q_calc: Vec<f64>,
        q_g: Vec<f64>,
        q_limit: Vec<QLimit>,
        iterations: usize,
        factorizations: usize,
        max_mismatch: f64,
    ) -> PowerFlowSolution {
        let base = self.base;
        let flows = self
            .ends
            .iter()
            .zip(&self.y_line)
            .map(|(&(f, t), &y)| {
                let vf = Complex64::from_polar(vm[f], va[f]);
                let vt = Complex64::from_polar(vm[t], va[t]);
                let i_ft = y * (vf - vt);
                let s_ft = vf * i_ft.conj() * base;
                let s_tf = vt * (-i_ft).conj() * base;
                LineFlow {
                    p_from: s_ft.re,
                    q_from: s_ft.im,
                    p_to: s_tf.re,
                    q_to: s_tf.im,
                }
            })
            .collect();
        PowerFlowSolution {
            p0: p_calc[self.slack] * base,
            p_inj: p_calc.iter().map(|p| p * base).collect(),
            q_inj: q_calc.iter().map(|q| q * base).collect(),
            v: vm,
            delta: va,
            flows,
            q_g,
            q_limit,
            iterations,
            factorizations,
            max_mismatch,
        }
    }
}

/// One-shot flat-start solve with default settings.
pub fn solve_power_flow(
    net: &Network,
    u: &ControlVariables,
) -> Result<PowerFlowSolution, PowerFlowError> {
    PowerFlowSolver::new(net, PfSettings::default()).solve(u, None, None)
}
