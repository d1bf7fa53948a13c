//! Violation measures and their smoothed, piecewise-linear surrogates.
//!
//! `g(τ, ε)` is zero well inside a limit, a cubic across a band of width `ε`
//! that straddles it, and the identity beyond. With `ε = 0` it is the plain
//! hinge `max(τ, 0)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Below this |P| (MW) the ratio Q/P used for the caps is floored.
pub const P_EPS: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PenaltyError {
    #[error("line {0} has no rating")]
    MissingRating(usize),
    #[error("invalid controller parameter {name}: {value}")]
    InvalidParameter { name: &'static str, value: f64 },
}

/// Controller tuning. Defaults reproduce the reference configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerParams {
    /// MVA per p.u. used to scale flow terms.
    pub k: f64,
    pub xi: f64,
    pub mu: f64,
    pub nu_p_rel: f64,
    pub nu_v_rel: f64,
    pub v_bar: f64,
    /// Controller sampling period (s).
    pub t_m: f64,
    /// Static AGC period (s).
    pub t_a: f64,
    /// Default active ramp (MW/s) for generators without one.
    pub ramp_p: f64,
    /// Default voltage ramp (p.u./s) for generators without one.
    pub ramp_v: f64,
    pub n_segments: usize,
}

impl Default for ControllerParams {
    fn default() -> Self {
        ControllerParams {
            k: 100.0,
            xi: 0.1,
            mu: 5.0,
            nu_p_rel: 0.001,
            nu_v_rel: 4.0,
            v_bar: 0.06,
            t_m: 4.0,
            t_a: 3.0,
            ramp_p: 0.1,
            ramp_v: 0.0003,
            n_segments: 6,
        }
    }
}

impl ControllerParams {
    pub fn validate(&self) -> Result<(), PenaltyError> {
        let positive = [
            ("k", self.k),
            ("mu", self.mu),
            ("nu_p_rel", self.nu_p_rel),
            ("nu_v_rel", self.nu_v_rel),
            ("v_bar", self.v_bar),
            ("t_m", self.t_m),
            ("t_a", self.t_a),
            ("ramp_p", self.ramp_p),
            ("ramp_v", self.ramp_v),
        ];
        for (name, value) in positive {
            if !(value > 0.0) {
                return Err(PenaltyError::InvalidParameter { name, value });
            }
        }
        if !(0.0..=1.0).contains(&self.xi) {
            return Err(PenaltyError::InvalidParameter {
                name: "xi",
                value: self.xi,
            });
        }
        if self.n_segments < 2 {
            return Err(PenaltyError::InvalidParameter {
                name: "n_segments",
                value: self.n_segments as f64,
            });
        }
        Ok(())
    }
}

/// The smoothed hinge.
pub fn g(tau: f64, eps: f64) -> f64 {
    if eps <= 0.0 {
        return tau.max(0.0);
    }
    if tau <= -2.0 * eps / 3.0 {
        0.0
    } else if tau <= eps / 3.0 {
        let s = tau + 2.0 * eps / 3.0;
        s * s * s / (3.0 * eps * eps)
    } else {
        tau
    }
}

/// Derivative of [`g`] with respect to `tau`.
pub fn g_prime(tau: f64, eps: f64) -> f64 {
    if eps <= 0.0 {
        return if tau > 0.0 { 1.0 } else { 0.0 };
    }
    if tau <= -2.0 * eps / 3.0 {
        0.0
    } else if tau <= eps / 3.0 {
        let s = tau + 2.0 * eps / 3.0;
        s * s / (eps * eps)
    } else {
        1.0
    }
}

/// Voltage penalty `g(|V-1| - v̄, ξ v̄)`.
pub fn g_v(v: f64, v_bar: f64, xi: f64) -> f64 {
    g((v - 1.0).abs() - v_bar, xi * v_bar)
}

/// Penalty of a quantity against a symmetric limit, `g(|x| - lim, ξ lim)`.
pub fn g_limit(x: f64, limit: f64, xi: f64) -> f64 {
    g(x.abs() - limit, xi * limit)
}

/// Unpenalized violation measure: `μ Σ max(|V-1|-v̄, 0) + (1/k) Σ max(|S|-S̄, 0)`.
pub fn compute_l(
    v: &[f64],
    s: &[f64],
    ratings: &[Option<f64>],
    v_bar: f64,
    mu: f64,
    k: f64,
) -> Result<f64, PenaltyError> {
    compute_l_penalized(v, s, ratings, v_bar, mu, k, 0.0)
}

/// Penalized measure L′: as [`compute_l`] with every hinge replaced by `g`
/// of relative width `xi`.
pub fn compute_l_penalized(
    v: &[f64],
    s: &[f64],
    ratings: &[Option<f64>],
    v_bar: f64,
    mu: f64,
    k: f64,
    xi: f64,
) -> Result<f64, PenaltyError> {
    let volt: f64 = v.iter().map(|&v| g_v(v, v_bar, xi)).sum();
    let mut flow = 0.0;
    for (i, (&s, r)) in s.iter().zip(ratings).enumerate() {
        let r = r.ok_or(PenaltyError::MissingRating(i))?;
        flow += g_limit(s, r, xi);
    }
    Ok(mu * volt + flow / k)
}

/// Separate P and Q limits whose joint satisfaction keeps |S| under S̄ while
/// preserving the current P:Q ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineCaps {
    pub p_bar: f64,
    pub q_bar: f64,
    /// |P| was at or below [`P_EPS`] and the ratio was floored.
    pub degenerate: bool,
}

pub fn compute_pq_caps(p: f64, q: f64, s_bar: f64) -> LineCaps {
    let (p, q) = (p.abs(), q.abs());
    if p > P_EPS {
        let p_bar = s_bar / ((q * q) / (p * p) + 1.0).sqrt();
        LineCaps {
            p_bar,
            q_bar: q / p * p_bar,
            degenerate: false,
        }
    } else {
        let p_bar = s_bar * P_EPS / P_EPS.hypot(q);
        LineCaps {
            p_bar,
            q_bar: (s_bar * s_bar - p_bar * p_bar).max(0.0).sqrt(),
            degenerate: true,
        }
    }
}

/// Active-power objective: `(1/k) Σ g^P(P + ΔP) + (ν^p/k) Σ |Δp_g|`. Lines
/// with `None` caps are exempt.
pub fn compute_lp(
    p_m: &[f64],
    dp_flow: &[f64],
    caps: &[Option<LineCaps>],
    dp_g: &[f64],
    nu_p: f64,
    k: f64,
    xi: f64,
) -> f64 {
    let flow: f64 = p_m
        .iter()
        .zip(dp_flow)
        .zip(caps)
        .filter_map(|((p, d), c)| c.map(|c| g_limit(p + d, c.p_bar, xi)))
        .sum();
    let sparsity: f64 = dp_g.iter().map(|d| d.abs()).sum();
    flow / k + nu_p / k * sparsity
}

/// Inputs of the voltage objective.
#[derive(Debug, Clone, Copy)]
pub struct VoltageTerms<'a> {
    /// Measured voltages of the monitored buses and their predicted changes.
    pub v_m: &'a [f64],
    pub dv: &'a [f64],
    pub q_m: &'a [f64],
    pub dq_flow: &'a [f64],
    pub caps: &'a [Option<LineCaps>],
    pub dv_g: &'a [f64],
}

/// Voltage objective: `μ Σ g^V(V + ΔV) + (1/k) Σ g^Q(Q + ΔQ) + ν^v Σ |ΔV_g|`.
pub fn compute_lv(t: VoltageTerms<'_>, mu: f64, nu_v: f64, k: f64, xi: f64, v_bar: f64) -> f64 {
    let volt: f64 = t
        .v_m
        .iter()
        .zip(t.dv)
        .map(|(v, d)| g_v(v + d, v_bar, xi))
        .sum();
    let flow: f64 = t
        .q_m
        .iter()
        .zip(t.dq_flow)
        .zip(t.caps)
        .filter_map(|((q, d), c)| c.map(|c| g_limit(q + d, c.q_bar, xi)))
        .sum();
    let sparsity: f64 = t.dv_g.iter().map(|d| d.abs()).sum();
    mu * volt + flow / k + nu_v * sparsity
}

/// One affine piece `intercept + slope·u` of a penalty in `u = |τ|`, valid
/// (i.e. the maximum of all pieces) on `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Piece {
    pub slope: f64,
    pub intercept: f64,
    pub start: f64,
    pub end: f64,
}

/// Convex piecewise-linear interpolant of `u ↦ g(u - limit, ξ·limit)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltySegments {
    pub limit: f64,
    pub eps: f64,
    pub domain_radius: f64,
    pub pieces: Vec<Piece>,
}

/// Chords through `n_segments - 2` nodes on the cubic band, spaced so each
/// chord has about the same interpolation error, flanked by the exact zero
/// and unit-slope branches. With two segments the result is the plain hinge.
pub fn piecewise_linearize(
    limit: f64,
    xi: f64,
    n_segments: usize,
    domain_radius: f64,
) -> PenaltySegments {
    let eps = xi * limit;
    let n = n_segments.max(2);
    let mut pieces = Vec::with_capacity(n);
    if n == 2 || eps <= 0.0 {
        pieces.push(Piece {
            slope: 0.0,
            intercept: 0.0,
            start: 0.0,
            end: limit,
        });
        pieces.push(Piece {
            slope: 1.0,
            intercept: -limit,
            start: limit,
            end: f64::INFINITY,
        });
        return PenaltySegments {
            limit,
            eps: 0.0,
            domain_radius,
            pieces,
        };
    }
    // ξ ≤ 1 keeps the start of the cubic band at a non-negative |τ|
    let a = (limit - 2.0 * eps / 3.0).max(0.0);
    let exact = |u: f64| g(u - limit, eps);
    pieces.push(Piece {
        slope: 0.0,
        intercept: 0.0,
        start: 0.0,
        end: a,
    });
    let m = n - 2;
    let nodes: Vec<f64> = (0..=m)
        .map(|k| (limit - 2.0 * eps / 3.0 + eps * (k as f64 / m as f64).powf(2.0 / 3.0)).max(a))
        .collect();
    for w in nodes.windows(2) {
        let (u0, u1) = (w[0], w[1]);
        if u1 <= u0 {
            continue;
        }
        let slope = (exact(u1) - exact(u0)) / (u1 - u0);
        pieces.push(Piece {
            slope,
            intercept: exact(u0) - slope * u0,
            start: u0,
            end: u1,
        });
    }
    let b = limit + eps / 3.0;
    pieces.push(Piece {
        slope: 1.0,
        intercept: -limit,
        start: b,
        end: f64::INFINITY,
    });
    PenaltySegments {
        limit,
        eps,
        domain_radius,
        pieces,
    }
}

impl PenaltySegments {
    pub fn eval(&self, tau: f64) -> f64 {
        let u = tau.abs();
        self.pieces
            .iter()
            .map(|p| p.intercept + p.slope * u)
            .fold(0.0, f64::max)
    }

    pub fn exact(&self, tau: f64) -> f64 {
        g(tau.abs() - self.limit, self.eps)
    }

    /// Largest |approximation − g| on a uniform grid over the domain.
    pub fn max_error(&self, samples: usize) -> f64 {
        (0..=samples)
            .map(|i| {
                let tau = -self.domain_radius + 2.0 * self.domain_radius * i as f64 / samples as f64;
                (self.eval(tau) - self.exact(tau)).abs()
            })
            .fold(0.0, f64::max)
    }

    /// Pieces with positive slope that are the maximum somewhere on
    /// `u ∈ [u_lo, u_hi]`. On that range the penalty equals the maximum of
    /// zero and these pieces.
    pub fn active_pieces(&self, u_lo: f64, u_hi: f64) -> impl Iterator<Item = &Piece> {
        self.pieces
            .iter()
            .filter(move |p| p.slope > 0.0 && p.end >= u_lo && p.start <= u_hi)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn g_examples() {
        assert!((g(0.0, 5.0) - 40.0 / 81.0).abs() < 1e-15);
        let e = 0.3;
        assert_eq!(g(-2.0 * e / 3.0, e), 0.0);
        assert!((g(e / 3.0, e) - e / 3.0).abs() < 1e-15);
        for tau in [-2.0, -0.1, 0.0, 0.3, 7.0] {
            assert_eq!(g(tau, 0.0), tau.max(0.0));
        }
    }

    #[test]
    fn l_examples() {
        let v = [1.0, 1.02];
        let s = [110.0, 20.0];
        let ratings = [Some(100.0), Some(50.0)];
        let l = compute_l(&v, &s, &ratings, 0.06, 5.0, 100.0).unwrap();
        assert!((l - 0.1).abs() < 1e-12);
        let l = compute_l(&[1.07], &[], &[], 0.06, 5.0, 100.0).unwrap();
        assert!((l - 0.05).abs() < 1e-12);
        assert_eq!(compute_l(&v, &[10.0, 10.0], &ratings, 0.06, 5.0, 100.0).unwrap(), 0.0);
        assert_eq!(
            compute_l(&v, &s, &[Some(1.0), None], 0.06, 5.0, 100.0),
            Err(PenaltyError::MissingRating(1))
        );
    }

    #[test]
    fn l_penalized_at_rating() {
        let lp = compute_l_penalized(&[1.0], &[100.0], &[Some(100.0)], 0.06, 5.0, 100.0, 0.1).unwrap();
        assert!((lp - g(0.0, 10.0) / 100.0).abs() < 1e-15);
        assert!(lp > 0.0);
        assert_eq!(compute_l(&[1.0], &[100.0], &[Some(100.0)], 0.06, 5.0, 100.0).unwrap(), 0.0);
        let far = compute_l_penalized(&[1.0], &[10.0], &[Some(100.0)], 0.06, 5.0, 100.0, 0.1).unwrap();
        assert_eq!(far, 0.0);
    }

    #[test]
    fn cap_examples() {
        let c = compute_pq_caps(40.0, 30.0, 100.0);
        assert!((c.p_bar - 80.0).abs() < 1e-12 && (c.q_bar - 60.0).abs() < 1e-12);
        let c = compute_pq_caps(-40.0, 0.0, 100.0);
        assert_eq!((c.p_bar, c.q_bar), (100.0, 0.0));
        let c = compute_pq_caps(7.0, 7.0, 100.0);
        let r = 100.0 / 2f64.sqrt();
        assert!((c.p_bar - r).abs() < 1e-12 && (c.q_bar - r).abs() < 1e-12);
        let c = compute_pq_caps(0.0, 5.0, 100.0);
        assert!(c.degenerate);
        assert!((c.p_bar.hypot(c.q_bar) - 100.0).abs() < 1e-9);
    }

    #[test]
    fn lp_lv_examples() {
        let caps = [Some(compute_pq_caps(50.0, 0.0, 50.0))];
        assert_eq!(compute_lp(&[20.0], &[0.0], &caps, &[0.0, 0.0], 0.01, 100.0, 0.1), 0.0);
        let lp = compute_lp(&[60.0], &[0.0], &caps, &[0.0], 0.01, 100.0, 0.1);
        assert!((lp - 0.1).abs() < 1e-12);
        let lp = compute_lp(&[], &[], &[], &[5.0, -5.0], 0.01, 100.0, 0.1);
        assert!((lp - 0.001).abs() < 1e-15);

        let zero = VoltageTerms {
            v_m: &[1.0],
            dv: &[0.0],
            q_m: &[],
            dq_flow: &[],
            caps: &[],
            dv_g: &[0.0],
        };
        assert_eq!(compute_lv(zero, 5.0, 2.0, 100.0, 0.1, 0.06), 0.0);
        let band = VoltageTerms {
            v_m: &[0.941],
            ..zero
        };
        let lv = compute_lv(band, 5.0, 2.0, 100.0, 0.1, 0.06);
        assert!(lv > 0.0 && lv < 5.0 * 0.002);
        let sparse = VoltageTerms {
            dv_g: &[0.001],
            ..zero
        };
        assert!((compute_lv(sparse, 5.0, 2.0, 100.0, 0.1, 0.06) - 0.002).abs() < 1e-15);
    }

    #[test]
    fn hinge_with_two_segments() {
        let seg = piecewise_linearize(100.0, 0.1, 2, 200.0);
        for tau in [-150.0, -100.0, 0.0, 99.0, 100.0, 130.0] {
            assert_eq!(seg.eval(tau), (tau.abs() - 100.0f64).max(0.0));
        }
    }

    #[test]
    fn interpolates_at_nodes_and_meets_tolerance() {
        let seg = piecewise_linearize(80.0, 0.1, 6, 160.0);
        assert_eq!(seg.pieces.len(), 6);
        for p in &seg.pieces {
            for u in [p.start, p.end] {
                if u.is_finite() {
                    assert!((p.intercept + p.slope * u - seg.exact(u)).abs() < 1e-10);
                    assert!((seg.eval(u) - seg.exact(u)).abs() < 1e-10);
                }
            }
        }
        assert!(seg.max_error(20_000) <= 1e-3 * 80.0);
        for w in seg.pieces.windows(2) {
            assert!(w[1].slope >= w[0].slope);
        }
    }

    #[test]
    fn active_pieces_reproduce_penalty_on_range() {
        let seg = piecewise_linearize(50.0, 0.1, 6, 100.0);
        let (lo, hi) = (47.0, 49.0);
        let act: Vec<&Piece> = seg.active_pieces(lo, hi).collect();
        assert!(act.len() < seg.pieces.len());
        for i in 0..=100 {
            let u = lo + (hi - lo) * i as f64 / 100.0;
            let pruned = act.iter().map(|p| p.intercept + p.slope * u).fold(0.0, f64::max);
            assert!((pruned - seg.eval(u)).abs() < 1e-12);
        }
        assert_eq!(seg.active_pieces(0.0, 40.0).count(), 0);
    }

    #[test]
    fn params_validate() {
        assert!(ControllerParams::default().validate().is_ok());
        let bad = ControllerParams {
            xi: 1.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn g_is_c1(eps in 1e-3f64..10.0) {
            for tau in [-2.0 * eps / 3.0, eps / 3.0] {
                prop_assert!((g(tau + 1e-12, eps) - g(tau - 1e-12, eps)).abs() < 1e-7);
                // second-order one-sided differences from each branch
                let h = 1e-5 * eps;
                let left = (3.0 * g(tau, eps) - 4.0 * g(tau - h, eps) + g(tau - 2.0 * h, eps)) / (2.0 * h);
                let right = (-3.0 * g(tau, eps) + 4.0 * g(tau + h, eps) - g(tau + 2.0 * h, eps)) / (2.0 * h);
                prop_assert!((left - right).abs() < 1e-7, "{} vs {}", left, right);
                prop_assert!((g_prime(tau - 1e-12, eps) - g_prime(tau + 1e-12, eps)).abs() < 1e-7);
            }
        }

        #[test]
        fn g_bounds(tau in -10.0f64..10.0, eps in 0.0f64..5.0) {
            let v = g(tau, eps);
            prop_assert!(v >= 0.0);
            if tau > eps / 3.0 { prop_assert_eq!(v, tau); }
            prop_assert!(v >= tau.max(0.0) - eps);
        }

        #[test]
        fn caps_hold(p in -500.0f64..500.0, q in -500.0f64..500.0, s_bar in 1.0f64..1000.0) {
            prop_assume!(p.abs() > P_EPS);
            let c = compute_pq_caps(p, q, s_bar);
            prop_assert!((c.p_bar.powi(2) + c.q_bar.powi(2) - s_bar * s_bar).abs() <= 1e-9 * s_bar * s_bar);
            prop_assert!((c.p_bar * q.abs() - c.q_bar * p.abs()).abs() <= 1e-9 * s_bar * p.abs().max(q.abs()));
            if p.abs() < c.p_bar && q.abs() < c.q_bar {
                prop_assert!(p.hypot(q) < s_bar);
            }
        }

        #[test]
        fn l_zero_iff_no_violation(
            v in proptest::collection::vec(0.85f64..1.15, 1..8),
            s in proptest::collection::vec(0.0f64..200.0, 1..8),
        ) {
            let ratings: Vec<Option<f64>> = s.iter().map(|_| Some(100.0)).collect();
            let l = compute_l(&v, &s, &ratings, 0.06, 5.0, 100.0).unwrap();
            let violated = v.iter().any(|v| (v - 1.0).abs() > 0.06) || s.iter().any(|s| *s > 100.0);
            prop_assert_eq!(l == 0.0, !violated);
        }
    }
}
