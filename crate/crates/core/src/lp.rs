//! Small dense linear programs and the two per-step corrective programs.
//!
//! [`solve_lp`] is a bounded-variable primal simplex on a dense tableau.
//! Pricing is deterministic, so identical inputs always take the same pivot
//! path. Every row
//! `lo ≤ a·x ≤ hi` is written as `a·x - s = 0` with a bounded slack `s`;
//! phase 1 minimizes the sum of artificial variables.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use serde::Serialize;
use thiserror::Error;

use crate::controller::MeasurementSnapshot;
use crate::penalty::{piecewise_linearize, ControllerParams, LineCaps, PenaltySegments};
use crate::sensitivity::VoltagePartition;

/// Primal feasibility and optimality tolerance.
pub const LP_TOL: f64 = 1e-7;
const PIVOT_TOL: f64 = 1e-9;
/// Reduced-cost tolerance relative to the largest cost magnitude.
const DUAL_TOL: f64 = 1e-9;
/// Consecutive degenerate pivots before pricing falls back to Bland's rule.
const DEGENERATE_SWITCH: usize = 50;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LpError {
    #[error("iteration limit {0} reached")]
    IterationLimit(usize),
    #[error("variable {0} has inconsistent bounds")]
    BadBounds(String),
    #[error("constraint {row} references unknown variable {var}")]
    UnknownVariable { row: String, var: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Variable {
    pub name: String,
    pub lo: f64,
    pub hi: f64,
    pub cost: f64,
}

/// `lo ≤ Σ coef·x ≤ hi`; equal bounds make an equality row.
#[derive(Debug, Clone, PartialEq)]
pub struct Constraint {
    pub name: String,
    pub coefs: Vec<(usize, f64)>,
    pub lo: f64,
    pub hi: f64,
}

/// Minimization problem.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LpProblem {
    pub vars: Vec<Variable>,
    pub rows: Vec<Constraint>,
    /// Constant added to the reported objective.
    pub offset: f64,
}

impl LpProblem {
    pub fn add_var(&mut self, name: impl Into<String>, lo: f64, hi: f64, cost: f64) -> usize {
        self.vars.push(Variable {
            name: name.into(),
            lo,
            hi,
            cost,
        });
        self.vars.len() - 1
    }

    pub fn add_row(&mut self, name: impl Into<String>, coefs: Vec<(usize, f64)>, lo: f64, hi: f64) {
        self.rows.push(Constraint {
            name: name.into(),
            coefs,
            lo,
            hi,
        });
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        self.offset + self.vars.iter().zip(x).map(|(v, x)| v.cost * x).sum::<f64>()
    }

    /// Largest bound or row violation at `x`.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        for (v, &x) in self.vars.iter().zip(x) {
            worst = worst.max(v.lo - x).max(x - v.hi);
        }
        for r in &self.rows {
            let a: f64 = r.coefs.iter().map(|&(j, c)| c * x[j]).sum();
            worst = worst.max(r.lo - a).max(a - r.hi);
        }
        worst
    }

    fn validate(&self) -> Result<(), LpError> {
        for v in &self.vars {
            if !(v.lo <= v.hi) || v.lo == f64::INFINITY || v.hi == f64::NEG_INFINITY {
                return Err(LpError::BadBounds(v.name.clone()));
            }
        }
        for r in &self.rows {
            if !(r.lo <= r.hi) {
                return Err(LpError::BadBounds(r.name.clone()));
            }
            if let Some(&(var, _)) = r.coefs.iter().find(|(j, _)| *j >= self.vars.len()) {
                return Err(LpError::UnknownVariable {
                    row: r.name.clone(),
                    var,
                });
            }
        }
        Ok(())
    }

    /// Plain-text dump in CPLEX LP format. Ranged rows are split in two.
    pub fn to_lp_format(&self) -> String {
        let name = |i: usize| sanitize(&self.vars[i].name, i);
        let expr = |coefs: &mut dyn Iterator<Item = (usize, f64)>| {
            let s: Vec<String> = coefs.map(|(j, c)| term(c, &name(j))).collect();
            match (s.is_empty(), self.vars.is_empty()) {
                (false, _) => s.join(" "),
                (true, false) => format!("0 {}", name(0)),
                (true, true) => String::new(),
            }
        };
        let mut out = String::from("\\ generated by gridrelief\nMinimize\n obj: ");
        out += &expr(&mut self.vars.iter().enumerate().filter(|(_, v)| v.cost != 0.0).map(|(j, v)| (j, v.cost)));
        out += "\nSubject To\n";
        for (i, r) in self.rows.iter().enumerate() {
            let rn = sanitize(&r.name, i);
            let e = expr(&mut r.coefs.iter().copied());
            if r.lo == r.hi {
                let _ = writeln!(out, " {rn}: {e} = {}", r.lo);
            } else {
                if r.lo.is_finite() {
                    let _ = writeln!(out, " {rn}_lo: {e} >= {}", r.lo);
                }
                if r.hi.is_finite() {
                    let _ = writeln!(out, " {rn}_hi: {e} <= {}", r.hi);
                }
            }
        }
        out += "Bounds\n";
        for (j, v) in self.vars.iter().enumerate() {
            let n = name(j);
            match (v.lo.is_finite(), v.hi.is_finite()) {
                _ if v.lo == v.hi => {
                    let _ = writeln!(out, " {n} = {}", v.lo);
                }
                (true, true) => {
                    let _ = writeln!(out, " {} <= {n} <= {}", v.lo, v.hi);
                }
                (true, false) => {
                    let _ = writeln!(out, " {n} >= {}", v.lo);
                }
                (false, true) => {
                    let _ = writeln!(out, " -inf <= {n} <= {}", v.hi);
                }
                (false, false) => {
                    let _ = writeln!(out, " {n} free");
                }
            }
        }
        out += "End\n";
        out
    }
}

fn term(c: f64, name: &str) -> String {
    if c < 0.0 {
        format!("- {} {name}", -c)
    } else {
        format!("+ {c} {name}")
    }
}

fn sanitize(name: &str, idx: usize) -> String {
    let s: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' { c } else { '_' })
        .collect();
    if s.is_empty() || s.starts_with(|c: char| c.is_ascii_digit()) {
        format!("v{idx}_{s}")
    } else {
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpSolution {
    pub status: LpStatus,
    /// Structural variable values (meaningful when optimal).
    pub x: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
}

struct Tableau {
    m: usize,
    ncols: usize,
    /// Row-major `m × ncols`, canonical with respect to the basis.
    t: Vec<f64>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    x: Vec<f64>,
    basis: Vec<usize>,
    in_basis: Vec<Option<usize>>,
    iterations: usize,
    max_iter: usize,
}

enum Outcome {
    Optimal,
    Unbounded,
}

impl Tableau {
    fn row(&self, i: usize) -> &[f64] {
        &self.t[i * self.ncols..(i + 1) * self.ncols]
    }

    fn reduced_costs(&self, cost: &[f64]) -> Vec<f64> {
        let mut d = cost.to_vec();
        for i in 0..self.m {
            let cb = cost[self.basis[i]];
            if cb != 0.0 {
                for (dj, tij) in d.iter_mut().zip(self.row(i)) {
                    *dj -= cb * tij;
                }
            }
        }
        d
    }

    fn pivot(&mut self, r: usize, q: usize) {
        let nc = self.ncols;
        let p = self.t[r * nc + q];
        for j in 0..nc {
            self.t[r * nc + j] /= p;
        }
        let (before, rest) = self.t.split_at_mut(r * nc);
        let (prow, after) = rest.split_at_mut(nc);
        for row in before.chunks_mut(nc).chain(after.chunks_mut(nc)) {
            let f = row[q];
            if f != 0.0 {
                for (a, b) in row.iter_mut().zip(prow.iter()) {
                    *a -= f * b;
                }
                row[q] = 0.0;
            }
        }
        let leaving = self.basis[r];
        self.in_basis[leaving] = None;
        self.basis[r] = q;
        self.in_basis[q] = Some(r);
    }

    /// Primal simplex for the given cost vector. Pricing picks the largest
    /// reduced cost; after a run of degenerate pivots it switches to
    /// Bland's smallest-index rule until progress resumes, which rules out
    /// cycling.
    fn optimize(&mut self, cost: &[f64]) -> Result<Outcome, LpError> {
        let cmax = cost.iter().fold(0.0_f64, |a, c| a.max(c.abs()));
        let dual_tol = DUAL_TOL * cmax.max(f64::MIN_POSITIVE);
        let mut degenerate_run = 0usize;
        loop {
            if self.iterations >= self.max_iter {
                return Err(LpError::IterationLimit(self.max_iter));
            }
            let bland = degenerate_run >= DEGENERATE_SWITCH;
            let d = self.reduced_costs(cost);
            let mut entering: Option<(usize, f64)> = None;
            let mut best = 0.0;
            for j in 0..self.ncols {
                if self.in_basis[j].is_some() || self.lo[j] == self.hi[j] {
                    continue;
                }
                let dj = d[j];
                let dir = if dj < -dual_tol && self.x[j] < self.hi[j] {
                    1.0
                } else if dj > dual_tol && self.x[j] > self.lo[j] {
                    -1.0
                } else {
                    continue;
                };
                if bland {
                    entering = Some((j, dir));
                    break;
                }
                if dj.abs() > best {
                    best = dj.abs();
                    entering = Some((j, dir));
                }
            }
            let Some((q, dir)) = entering else {
                return Ok(Outcome::Optimal);
            };
            self.iterations += 1;

            let mut ratios: Vec<(usize, f64, f64, f64)> = Vec::new();
            let mut min_ratio = f64::INFINITY;
            for i in 0..self.m {
                let alpha = self.t[i * self.ncols + q];
                if alpha.abs() <= PIVOT_TOL {
                    continue;
                }
                let b = self.basis[i];
                let delta = -alpha * dir;
                let (limit, bound) = if delta < 0.0 {
                    ((self.x[b] - self.lo[b]) / -delta, self.lo[b])
                } else {
                    ((self.hi[b] - self.x[b]) / delta, self.hi[b])
                };
                if limit.is_finite() {
                    let limit = limit.max(0.0);
                    min_ratio = min_ratio.min(limit);
                    ratios.push((i, limit, bound, alpha.abs()));
                }
            }
            let flip = self.hi[q] - self.lo[q];
            let (step, leave) = if flip <= min_ratio {
                if !flip.is_finite() {
                    return Ok(Outcome::Unbounded);
                }
                (flip, None)
            } else {
                // ratios within `tie` of the minimum count as ties: Bland
                // takes the smallest basic index, otherwise the largest
                // pivot wins
                let tie = 1e-12 * (1.0 + min_ratio);
                let mut leave: Option<(usize, f64, f64)> = None;
                for &(i, limit, bound, alpha) in &ratios {
                    if limit > min_ratio + tie {
                        continue;
                    }
                    let better = match leave {
                        None => true,
                        Some((r, _, _)) if bland => self.basis[i] < self.basis[r],
                        Some((_, _, a)) => alpha > a,
                    };
                    if better {
                        leave = Some((i, bound, alpha));
                    }
                }
                (min_ratio, leave)
            };
            let tie = 1e-12 * (1.0 + step);
            degenerate_run = if step <= tie { degenerate_run + 1 } else { 0 };
            let theta = step * dir;
            for i in 0..self.m {
                let alpha = self.t[i * self.ncols + q];
                if alpha != 0.0 {
                    self.x[self.basis[i]] -= alpha * theta;
                }
            }
            self.x[q] += theta;
            match leave {
                None => {
                    self.x[q] = if dir > 0.0 { self.hi[q] } else { self.lo[q] };
                }
                Some((r, bound, _)) => {
                    let b = self.basis[r];
                    self.x[b] = bound;
                    self.pivot(r, q);
                }
            }
        }
    }
}

fn start_value(lo: f64, hi: f64) -> f64 {
    if lo.is_finite() {
        lo
    } else if hi.is_finite() {
        hi
    } else {
        0.0
    }
}

pub fn solve_lp(p: &LpProblem) -> Result<LpSolution, LpError> {
    p.validate()?;
    let n = p.vars.len();
    let m = p.rows.len();

    let mut x: Vec<f64> = p.vars.iter().map(|v| start_value(v.lo, v.hi)).collect();
    let activity: Vec<f64> = p
        .rows
        .iter()
        .map(|r| r.coefs.iter().map(|&(j, c)| c * x[j]).sum())
        .collect();

    // columns: structural, slacks, artificials
    let mut art_rows = Vec::new();
    let mut lo: Vec<f64> = p.vars.iter().map(|v| v.lo).collect();
    let mut hi: Vec<f64> = p.vars.iter().map(|v| v.hi).collect();
    let mut slack_val = vec![0.0; m];
    let mut art_sign = vec![0.0; m];
    for (i, r) in p.rows.iter().enumerate() {
        lo.push(r.lo);
        hi.push(r.hi);
        let a = activity[i];
        if a < r.lo - LP_TOL || a > r.hi + LP_TOL {
            let target = if a < r.lo { r.lo } else { r.hi };
            slack_val[i] = target;
            // a·x - s + σ·art = 0, art = (s - a·x)/σ ≥ 0
            art_sign[i] = if target - a >= 0.0 { 1.0 } else { -1.0 };
            art_rows.push(i);
        } else {
            slack_val[i] = a.clamp(r.lo, r.hi);
        }
    }
    let na = art_rows.len();
    let ncols = n + m + na;
    lo.extend(std::iter::repeat_n(0.0, na));
    hi.extend(std::iter::repeat_n(f64::INFINITY, na));
    x.extend_from_slice(&slack_val);
    x.extend(art_rows.iter().map(|&i| (slack_val[i] - activity[i]) * art_sign[i]));

    let mut t = vec![0.0; m * ncols];
    let mut basis = vec![0; m];
    let mut in_basis = vec![None; ncols];
    let mut art_of_row = vec![None; m];
    for (k, &i) in art_rows.iter().enumerate() {
        art_of_row[i] = Some(k);
    }
    for (i, r) in p.rows.iter().enumerate() {
        let row = &mut t[i * ncols..(i + 1) * ncols];
        for &(j, c) in &r.coefs {
            row[j] += c;
        }
        row[n + i] = -1.0;
        let (bcol, scale) = match art_of_row[i] {
            Some(k) => {
                row[n + m + k] = art_sign[i];
                (n + m + k, art_sign[i])
            }
            None => (n + i, -1.0),
        };
        for v in row.iter_mut() {
            *v /= scale;
        }
        basis[i] = bcol;
        in_basis[bcol] = Some(i);
    }

    let mut tab = Tableau {
        m,
        ncols,
        t,
        lo,
        hi,
        x,
        basis,
        in_basis,
        iterations: 0,
        max_iter: 50 * (ncols + m).max(10),
    };

    if na > 0 {
        let mut cost1 = vec![0.0; ncols];
        cost1[n + m..].iter_mut().for_each(|c| *c = 1.0);
        tab.optimize(&cost1)?;
        let infeas: f64 = tab.x[n + m..].iter().sum();
        let scale = 1.0 + p.rows.iter().map(|r| r.lo.abs().min(r.hi.abs())).fold(0.0, f64::max);
        if infeas > LP_TOL * scale {
            return Ok(LpSolution {
                status: LpStatus::Infeasible,
                x: tab.x[..n].to_vec(),
                objective: f64::NAN,
                iterations: tab.iterations,
            });
        }
        for j in n + m..ncols {
            tab.hi[j] = 0.0;
            if tab.in_basis[j].is_none() {
                tab.x[j] = 0.0;
            }
        }
        // drive basic artificials out where possible
        for r in 0..m {
            if tab.basis[r] < n + m {
                continue;
            }
            let q = (0..n + m).find(|&j| {
                tab.in_basis[j].is_none() && tab.t[r * ncols + j].abs() > PIVOT_TOL * 1e3
            });
            if let Some(q) = q {
                // degenerate pivot: the artificial leaves at (numerically) zero
                tab.x[tab.basis[r]] = 0.0;
                tab.pivot(r, q);
            }
        }
    }

    let mut cost2 = vec![0.0; ncols];
    for (c, v) in cost2.iter_mut().zip(&p.vars) {
        *c = v.cost;
    }
    let status = match tab.optimize(&cost2)? {
        Outcome::Optimal => LpStatus::Optimal,
        Outcome::Unbounded => LpStatus::Unbounded,
    };
    let xs = tab.x[..n].to_vec();
    let objective = match status {
        LpStatus::Optimal => p.objective(&xs),
        _ => f64::NEG_INFINITY,
    };
    Ok(LpSolution {
        status,
        x: xs,
        objective,
        iterations: tab.iterations,
    })
}

/// Per-PV-bus limits the corrective programs respect.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorLimits {
    pub p_min: Vec<f64>,
    pub p_max: Vec<f64>,
    /// MW/s.
    pub ramp_p: Vec<f64>,
    /// p.u./s, infinite when unbounded.
    pub ramp_v: Vec<f64>,
}

impl GeneratorLimits {
    pub fn from_network(net: &crate::case::Network, params: &ControllerParams) -> Self {
        let pv = net.pv_indices();
        let b = net.buses();
        GeneratorLimits {
            p_min: pv.iter().map(|&i| b[i].p_min_or_default()).collect(),
            p_max: pv.iter().map(|&i| b[i].p_max_or_default()).collect(),
            ramp_p: pv.iter().map(|&i| b[i].ramp_p.unwrap_or(params.ramp_p)).collect(),
            ramp_v: pv
                .iter()
                .map(|&i| b[i].ramp_v.map_or(params.ramp_v, |r| r.per_second()))
                .collect(),
        }
    }
}

/// Reachable interval of a decision `Δ` given ramp reach `r` and the
/// window `[lo, hi]` of admissible changes. When the two do not intersect
/// the move is forced to the full ramp toward the window.
fn step_bounds(reach: f64, lo: f64, hi: f64) -> (f64, f64, bool) {
    let l = (-reach).max(lo);
    let h = reach.min(hi);
    if l <= h {
        (l, h, false)
    } else if hi < -reach {
        (-reach, -reach, true)
    } else {
        (reach, reach, true)
    }
}

/// Range of `u = |τ|` for `τ ∈ [lo, hi]`.
fn abs_range(lo: f64, hi: f64) -> (f64, f64) {
    if lo <= 0.0 && hi >= 0.0 {
        (0.0, lo.abs().max(hi.abs()))
    } else {
        let (a, b) = (lo.abs(), hi.abs());
        (a.min(b), a.max(b))
    }
}

/// Adds an epigraph variable for `g(|base + Δ| - limit)` with cost `weight`,
/// pruned to the pieces reachable for `Δ ∈ [d_lo, d_hi]`. Returns `false`
/// (and adds nothing) when the penalty is identically zero on that range.
fn add_epigraph(
    lp: &mut LpProblem,
    name: &str,
    seg: &PenaltySegments,
    base: f64,
    delta_var: usize,
    d_lo: f64,
    d_hi: f64,
    weight: f64,
) -> bool {
    let (tl, th) = (base + d_lo, base + d_hi);
    let (u_lo, u_hi) = abs_range(tl, th);
    let pieces: Vec<_> = seg.active_pieces(u_lo - 1e-12, u_hi + 1e-12).copied().collect();
    if pieces.is_empty() {
        return false;
    }
    let z = lp.add_var(format!("z_{name}"), 0.0, f64::INFINITY, weight);
    for (k, p) in pieces.iter().enumerate() {
        // z ≥ c + m·(base + Δ)  (positive side)
        if th > 0.0 {
            lp.add_row(
                format!("epi_{name}_p{k}"),
                vec![(z, 1.0), (delta_var, -p.slope)],
                p.intercept + p.slope * base,
                f64::INFINITY,
            );
        }
        // z ≥ c - m·(base + Δ)  (negative side)
        if tl < 0.0 {
            lp.add_row(
                format!("epi_{name}_n{k}"),
                vec![(z, 1.0), (delta_var, p.slope)],
                p.intercept - p.slope * base,
                f64::INFINITY,
            );
        }
    }
    true
}

/// Active-power program and the variable map needed to read it back.
#[derive(Debug, Clone)]
pub struct ActiveLp {
    pub problem: LpProblem,
    /// `(a⁺, a⁻)` variable indices per PV bus, `None` when the bus cannot move.
    pub split: Vec<Option<(usize, usize)>>,
    /// Fixed Δp for buses whose move is forced (no variables).
    pub fixed: Vec<f64>,
    /// Line indices that received flow rows.
    pub lines: Vec<usize>,
    /// Generators whose ramp window misses their p-limits.
    pub forced: Vec<usize>,
}

impl ActiveLp {
    pub fn delta(&self, sol: &LpSolution) -> Vec<f64> {
        self.split
            .iter()
            .zip(&self.fixed)
            .map(|(s, &f)| match s {
                Some((a, b)) => sol.x[*a] - sol.x[*b],
                None => f,
            })
            .collect()
    }
}

/// Builds the linearized active-power program:
/// minimize `(1/k) Σ ĝ^P(P + ΔP) + (ν^p/k) Σ |Δp_g|` subject to
/// `ΔP = (∂P/∂p_g)·Δp`, `Σ Δp = 0`, ramp and capacity windows.
pub fn build_active_lp(
    meas: &MeasurementSnapshot,
    caps: &[Option<LineCaps>],
    dp_dpg: &DMatrix<f64>,
    params: &ControllerParams,
    limits: &GeneratorLimits,
    nu_p: f64,
) -> ActiveLp {
    let npv = meas.p_g.len();
    let mut lp = LpProblem::default();
    let mut split = vec![None; npv];
    let mut fixed = vec![0.0; npv];
    let mut forced = Vec::new();
    let mut range = vec![(0.0, 0.0); npv];
    for g in 0..npv {
        let reach = limits.ramp_p[g] * params.t_m;
        let (lo, hi, f) = step_bounds(
            reach,
            limits.p_min[g] - meas.p_g[g],
            limits.p_max[g] - meas.p_g[g],
        );
        range[g] = (lo, hi);
        if f {
            forced.push(g);
            fixed[g] = lo;
            continue;
        }
        if hi - lo <= 0.0 {
            fixed[g] = lo;
            continue;
        }
        let a = lp.add_var(format!("dp_up_{g}"), lo.max(0.0), hi.max(0.0), nu_p / params.k);
        let b = lp.add_var(format!("dp_dn_{g}"), (-hi).max(0.0), (-lo).max(0.0), nu_p / params.k);
        split[g] = Some((a, b));
    }
    let fixed_sum: f64 = fixed.iter().sum();
    let mut bal = Vec::new();
    for &(a, b) in split.iter().flatten() {
        bal.push((a, 1.0));
        bal.push((b, -1.0));
    }
    lp.add_row("balance", bal, -fixed_sum, -fixed_sum);

    let mut lines = Vec::new();
    for (l, cap) in caps.iter().enumerate() {
        let Some(cap) = cap else { continue };
        let row = dp_dpg.row(l);
        let (mut d_lo, mut d_hi, mut shift) = (0.0, 0.0, 0.0);
        for g in 0..npv {
            let s = row[g];
            if split[g].is_some() {
                d_lo += (s * range[g].0).min(s * range[g].1);
                d_hi += (s * range[g].0).max(s * range[g].1);
            } else {
                shift += s * fixed[g];
            }
        }
        let base = meas.p_flow[l] + shift;
        let seg = piecewise_linearize(cap.p_bar, params.xi, params.n_segments, 2.0 * cap.p_bar);
        let (u_lo, u_hi) = abs_range(base + d_lo, base + d_hi);
        if seg.active_pieces(u_lo - 1e-12, u_hi + 1e-12).next().is_none() {
            // constant over the reachable range
            lp.offset += seg.eval(base) / params.k;
            continue;
        }
        let dvar = lp.add_var(format!("dP_{l}"), f64::NEG_INFINITY, f64::INFINITY, 0.0);
        let mut coefs = vec![(dvar, 1.0)];
        for (g, s) in split.iter().enumerate() {
            if let Some((a, b)) = s {
                let sv = row[g];
                if sv.abs() > 1e-12 {
                    coefs.push((*a, -sv));
                    coefs.push((*b, sv));
                }
            }
        }
        lp.add_row(format!("flow_{l}"), coefs, 0.0, 0.0);
        add_epigraph(&mut lp, &format!("P{l}"), &seg, base, dvar, d_lo, d_hi, 1.0 / params.k);
        lines.push(l);
    }
    ActiveLp {
        problem: lp,
        split,
        fixed,
        lines,
        forced,
    }
}

/// Voltage program and its variable map.
#[derive(Debug, Clone)]
pub struct VoltageLp {
    pub problem: LpProblem,
    /// One entry per control bus of the partition.
    pub split: Vec<Option<(usize, usize)>>,
    pub fixed: Vec<f64>,
    /// Control positions whose band could not be reached within one ramp.
    pub fallback: Vec<usize>,
    pub buses: Vec<usize>,
    pub lines: Vec<usize>,
}

impl VoltageLp {
    pub fn delta(&self, sol: &LpSolution) -> Vec<f64> {
        self.split
            .iter()
            .zip(&self.fixed)
            .map(|(s, &f)| match s {
                Some((a, b)) => sol.x[*a] - sol.x[*b],
                None => f,
            })
            .collect()
    }
}

/// Builds the linearized voltage program over the control buses of
/// `part`: minimize `μ Σ ĝ^V(V + ΔV) + (1/k) Σ ĝ^Q(Q + ΔQ) + ν^v Σ |ΔV_g|`.
///
/// `monitored` lists the bus indices whose voltage is penalized;
/// `v_ctl` and `ramp_v` are indexed like `part.control`.
#[allow(clippy::too_many_arguments)]
pub fn build_voltage_lp(
    meas: &MeasurementSnapshot,
    caps: &[Option<LineCaps>],
    part: &VoltagePartition,
    monitored: &[usize],
    ramp_v: &[f64],
    params: &ControllerParams,
    nu_v: f64,
) -> VoltageLp {
    let nc = part.control.len();
    let mut lp = LpProblem::default();
    let mut split = vec![None; nc];
    let mut fixed = vec![0.0; nc];
    let mut fallback = Vec::new();
    let mut range = vec![(0.0, 0.0); nc];
    for (c, &bus) in part.control.iter().enumerate() {
        let v = meas.v[bus];
        let reach = ramp_v[c] * params.t_m;
        let (lo, hi, f) = step_bounds(reach, 1.0 - params.v_bar - v, 1.0 + params.v_bar - v);
        range[c] = (lo, hi);
        if f {
            fallback.push(c);
            fixed[c] = lo;
            continue;
        }
        if hi - lo <= 0.0 {
            fixed[c] = lo;
            continue;
        }
        let a = lp.add_var(format!("dv_up_{bus}"), lo.max(0.0), hi.max(0.0), nu_v);
        let b = lp.add_var(format!("dv_dn_{bus}"), (-hi).max(0.0), (-lo).max(0.0), nu_v);
        split[c] = Some((a, b));
    }

    let mut dep_pos = vec![usize::MAX; meas.v.len()];
    for (r, &i) in part.dependent.iter().enumerate() {
        dep_pos[i] = r;
    }
    let vseg = piecewise_linearize(params.v_bar, params.xi, params.n_segments, 2.0 * params.v_bar);

    // rows: sensitivities over the control buses; returns (d_lo, d_hi, shift, coefs)
    let linear = |row: &[f64], var: usize| {
        let (mut d_lo, mut d_hi, mut shift) = (0.0, 0.0, 0.0);
        let mut coefs = vec![(var, 1.0)];
        for c in 0..nc {
            let s = row[c];
            match split[c] {
                Some((a, b)) => {
                    d_lo += (s * range[c].0).min(s * range[c].1);
                    d_hi += (s * range[c].0).max(s * range[c].1);
                    if s.abs() > 1e-12 {
                        coefs.push((a, -s));
                        coefs.push((b, s));
                    }
                }
                None => shift += s * fixed[c],
            }
        }
        (d_lo, d_hi, shift, coefs)
    };

    let mut buses = Vec::new();
    for &bus in monitored {
        let r = dep_pos[bus];
        if r == usize::MAX {
            continue;
        }
        let row: Vec<f64> = part.dv_dep.row(r).iter().copied().collect();
        let probe = usize::MAX;
        let (d_lo, d_hi, shift, _) = linear(&row, probe);
        let base = meas.v[bus] - 1.0 + shift;
        let (u_lo, u_hi) = abs_range(base + d_lo, base + d_hi);
        if vseg.active_pieces(u_lo - 1e-15, u_hi + 1e-15).next().is_none() {
            lp.offset += params.mu * vseg.eval(base);
            continue;
        }
        let dvar = lp.add_var(format!("dV_{bus}"), f64::NEG_INFINITY, f64::INFINITY, 0.0);
        let (_, _, _, coefs) = linear(&row, dvar);
        lp.add_row(format!("volt_{bus}"), coefs, 0.0, 0.0);
        add_epigraph(&mut lp, &format!("V{bus}"), &vseg, base, dvar, d_lo, d_hi, params.mu);
        buses.push(bus);
    }

    let mut lines = Vec::new();
    for (l, cap) in caps.iter().enumerate() {
        let Some(cap) = cap else { continue };
        let row: Vec<f64> = part.dq.row(l).iter().copied().collect();
        let (d_lo, d_hi, shift, _) = linear(&row, usize::MAX);
        let base = meas.q_flow[l] + shift;
        let seg = piecewise_linearize(cap.q_bar, params.xi, params.n_segments, 2.0 * cap.q_bar);
        let (u_lo, u_hi) = abs_range(base + d_lo, base + d_hi);
        if seg.active_pieces(u_lo - 1e-12, u_hi + 1e-12).next().is_none() {
            lp.offset += seg.eval(base) / params.k;
            continue;
        }
        let dvar = lp.add_var(format!("dQ_{l}"), f64::NEG_INFINITY, f64::INFINITY, 0.0);
        let (_, _, _, coefs) = linear(&row, dvar);
        lp.add_row(format!("qflow_{l}"), coefs, 0.0, 0.0);
        add_epigraph(&mut lp, &format!("Q{l}"), &seg, base, dvar, d_lo, d_hi, 1.0 / params.k);
        lines.push(l);
    }
    VoltageLp {
        problem: lp,
        split,
        fixed,
        fallback,
        buses,
        lines,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lp(vars: &[(f64, f64, f64)], rows: &[(&[(usize, f64)], f64, f64)]) -> LpProblem {
        let mut p = LpProblem::default();
        for (i, &(lo, hi, c)) in vars.iter().enumerate() {
            p.add_var(format!("x{i}"), lo, hi, c);
        }
        for (i, (coefs, lo, hi)) in rows.iter().enumerate() {
            p.add_row(format!("r{i}"), coefs.to_vec(), *lo, *hi);
        }
        p
    }

    #[test]
    fn single_lower_bound_row() {
        let p = lp(&[(f64::NEG_INFINITY, f64::INFINITY, 1.0)], &[(&[(0, 1.0)], 3.0, f64::INFINITY)]);
        let s = solve_lp(&p).unwrap();
        assert_eq!(s.status, LpStatus::Optimal);
        assert!((s.x[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn simplex_edge() {
        let inf = f64::INFINITY;
        let p = lp(
            &[(0.0, inf, -1.0), (0.0, inf, -1.0)],
            &[(&[(0, 1.0), (1, 1.0)], f64::NEG_INFINITY, 1.0)],
        );
        let s = solve_lp(&p).unwrap();
        assert_eq!(s.status, LpStatus::Optimal);
        assert!((s.objective + 1.0).abs() < 1e-12);
        // Bland picks x0 first
        assert_eq!(s.x, vec![1.0, 0.0]);
        assert_eq!(solve_lp(&p).unwrap(), s);
    }

    #[test]
    fn detects_infeasible_and_unbounded() {
        let inf = f64::INFINITY;
        let p = lp(
            &[(0.0, inf, 1.0)],
            &[(&[(0, 1.0)], f64::NEG_INFINITY, -1.0)],
        );
        assert_eq!(solve_lp(&p).unwrap().status, LpStatus::Infeasible);
        let p = lp(&[(0.0, inf, -1.0), (0.0, 1.0, 0.0)], &[(&[(0, 1.0), (1, -1.0)], 0.0, inf)]);
        assert_eq!(solve_lp(&p).unwrap().status, LpStatus::Unbounded);
    }

    #[test]
    fn equality_and_free_variables() {
        let inf = f64::INFINITY;
        // min |x - 2| via x = a - b... with free y = x - 2
        let p = lp(
            &[(0.0, 5.0, 0.0), (f64::NEG_INFINITY, inf, 0.0), (0.0, inf, 1.0)],
            &[
                (&[(1, 1.0), (0, -1.0)], -2.0, -2.0),
                (&[(2, 1.0), (1, -1.0)], 0.0, inf),
                (&[(2, 1.0), (1, 1.0)], 0.0, inf),
            ],
        );
        let s = solve_lp(&p).unwrap();
        assert_eq!(s.status, LpStatus::Optimal);
        assert!(s.objective.abs() < 1e-9);
        assert!((s.x[0] - 2.0).abs() < 1e-9);
        assert!(p.max_violation(&s.x) < 1e-9);
    }

    #[test]
    fn rejects_bad_input() {
        let p = lp(&[(1.0, 0.0, 0.0)], &[]);
        assert!(matches!(solve_lp(&p), Err(LpError::BadBounds(_))));
        let p = lp(&[(0.0, 1.0, 0.0)], &[(&[(3, 1.0)], 0.0, 1.0)]);
        assert!(matches!(solve_lp(&p), Err(LpError::UnknownVariable { .. })));
    }

    #[test]
    fn lp_format_dump() {
        let inf = f64::INFINITY;
        let p = lp(
            &[(0.0, 4.0, -1.0), (f64::NEG_INFINITY, inf, 2.0)],
            &[(&[(0, 1.0), (1, -1.0)], -1.0, 1.0), (&[(1, 1.0)], 0.5, 0.5)],
        );
        let text = p.to_lp_format();
        assert!(text.contains("Minimize\n obj: - 1 x0 + 2 x1"));
        assert!(text.contains(" r0_lo: + 1 x0 - 1 x1 >= -1"));
        assert!(text.contains(" r0_hi: + 1 x0 - 1 x1 <= 1"));
        assert!(text.contains(" r1: + 1 x1 = 0.5"));
        assert!(text.contains(" 0 <= x0 <= 4"));
        assert!(text.contains(" x1 free"));
        assert!(text.ends_with("End\n"));
    }

    #[test]
    fn step_bounds_cases() {
        assert_eq!(step_bounds(0.4, -10.0, 10.0), (-0.4, 0.4, false));
        assert_eq!(step_bounds(0.4, -10.0, 0.0), (-0.4, 0.0, false));
        assert_eq!(step_bounds(0.4, 1.0, 3.0), (0.4, 0.4, true));
        assert_eq!(step_bounds(0.4, -3.0, -1.0), (-0.4, -0.4, true));
        assert_eq!(step_bounds(f64::INFINITY, -0.1, 0.2), (-0.1, 0.2, false));
    }
}
