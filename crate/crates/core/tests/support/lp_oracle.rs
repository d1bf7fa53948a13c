//! Random small LPs and an exhaustive vertex-enumeration oracle.
//!
//! Every variable without a finite bound is boxed at ±M, which makes the
//! feasible set a bounded polytope. An LP is reported unbounded when its
//! boxed optimum moves as M grows.

use gridrelief_core::lp::{LpProblem, LpStatus};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

pub fn random_lp<R: Rng>(rng: &mut R, max_vars: usize, max_rows: usize) -> LpProblem {
    let n = rng.random_range(1..=max_vars);
    let m = rng.random_range(0..=max_rows);
    let mut p = LpProblem::default();
    for j in 0..n {
        let lo = match rng.random_range(0..3) {
            0 => 0.0,
            1 => f64::NEG_INFINITY,
            _ => -(rng.random_range(0..=5) as f64),
        };
        let hi = match rng.random_range(0..3) {
            0 => f64::INFINITY,
            _ => rng.random_range(1..=10) as f64,
        };
        let cost = rng.random_range(-5..=5) as f64;
        p.add_var(format!("x{j}"), lo, hi, cost);
    }
    for i in 0..m {
        let mut coefs = Vec::new();
        for j in 0..n {
            if rng.random_bool(0.6) {
                let c = rng.random_range(-5..=5) as f64;
                if c != 0.0 {
                    coefs.push((j, c));
                }
            }
        }
        let b = rng.random_range(-10..=10) as f64;
        let (lo, hi) = match rng.random_range(0..10) {
            0 => (b, b),
            1..=4 => (f64::NEG_INFINITY, b),
            5..=8 => (b, f64::INFINITY),
            _ => (b - rng.random_range(1..=5) as f64, b),
        };
        p.add_row(format!("r{i}"), coefs, lo, hi);
    }
    p
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Oracle {
    Optimal(f64),
    Infeasible,
    Unbounded,
}

impl Oracle {
    pub fn status(&self) -> LpStatus {
        match self {
            Oracle::Optimal(_) => LpStatus::Optimal,
            Oracle::Infeasible => LpStatus::Infeasible,
            Oracle::Unbounded => LpStatus::Unbounded,
        }
    }
}

fn boxed_optimum(p: &LpProblem, big: f64) -> Option<f64> {
    let n = p.vars.len();
    // hyperplanes (a, b, is_equality)
    let mut planes: Vec<(Vec<f64>, f64, bool)> = Vec::new();
    for (j, v) in p.vars.iter().enumerate() {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        let lo = if v.lo.is_finite() { v.lo } else { -big };
        let hi = if v.hi.is_finite() { v.hi } else { big };
        planes.push((e.clone(), lo, lo == hi));
        if hi != lo {
            planes.push((e, hi, false));
        }
    }
    let mut rows = Vec::new();
    for r in &p.rows {
        let mut a = vec![0.0; n];
        for &(j, c) in &r.coefs {
            a[j] += c;
        }
        let eq = r.lo == r.hi;
        for b in [r.lo, r.hi] {
            if b.is_finite() {
                planes.push((a.clone(), b, eq));
                if eq {
                    break;
                }
            }
        }
        rows.push((a, r.lo, r.hi));
    }
    let equalities: Vec<usize> = (0..planes.len()).filter(|&i| planes[i].2).collect();
    let feasible = |x: &DVector<f64>| {
        let tol = 1e-7 * (1.0 + x.amax());
        p.vars.iter().enumerate().all(|(j, v)| {
            let lo = if v.lo.is_finite() { v.lo } else { -big };
            let hi = if v.hi.is_finite() { v.hi } else { big };
            x[j] >= lo - tol && x[j] <= hi + tol
        }) && rows.iter().all(|(a, lo, hi)| {
            let s: f64 = a.iter().zip(x.iter()).map(|(a, x)| a * x).sum();
            s >= lo - tol && s <= hi + tol
        })
    };
    let mut best: Option<f64> = None;
    let mut idx: Vec<usize> = (0..n).collect();
    let h = planes.len();
    if h < n {
        return None;
    }
    loop {
        if equalities.iter().all(|e| idx.contains(e)) || equalities.len() > n {
            let a = DMatrix::from_fn(n, n, |r, c| planes[idx[r]].0[c]);
            let b = DVector::from_fn(n, |r, _| planes[idx[r]].1);
            let lu = a.full_piv_lu();
            let u = lu.u();
            let rank_ok = (0..n).all(|i| u[(i, i)].abs() > 1e-9);
            if rank_ok {
                if let Some(x) = lu.solve(&b) {
                    if feasible(&x) {
                        let obj: f64 = p.vars.iter().zip(x.iter()).map(|(v, x)| v.cost * x).sum();
                        best = Some(best.map_or(obj, |b: f64| b.min(obj)));
                    }
                }
            }
        }
        // next combination
        let mut i = n;
        loop {
            if i == 0 {
                return best.map(|b| b + p.offset);
            }
            i -= 1;
            if idx[i] != i + h - n {
                break;
            }
        }
        idx[i] += 1;
        for k in i + 1..n {
            idx[k] = idx[k - 1] + 1;
        }
    }
}

pub fn enumerate(p: &LpProblem) -> Oracle {
    let m1 = 1e6;
    match boxed_optimum(p, m1) {
        None => Oracle::Infeasible,
        Some(a) => {
            let b = boxed_optimum(p, 2.0 * m1).unwrap();
            if b < a - 1e-3 {
                Oracle::Unbounded
            } else {
                Oracle::Optimal(a)
            }
        }
    }
}
