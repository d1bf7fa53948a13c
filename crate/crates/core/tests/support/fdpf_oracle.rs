//! The decoupled linear model solved directly, with a Cholesky
//! factorization rather than the LU used in the crate.

use gridrelief_core::case::Network;
use gridrelief_core::sensitivity::build_fdpf_blocks;
use nalgebra::{DMatrix, DVector};

/// AGC participation in proportion to generator capacity.
pub fn capacity_weights(net: &Network) -> Vec<f64> {
    let caps: Vec<f64> = net
        .pv_indices()
        .iter()
        .map(|&i| net.buses()[i].p_max.unwrap())
        .collect();
    let total: f64 = caps.iter().sum();
    caps.iter().map(|c| c / total).collect()
}

/// State of the linear model: angles (rad) and voltages (p.u.) for given
/// PV injections (MW, relative to nominal) and PV voltage offsets.
pub fn linear_state(
    net: &Network,
    dp: &[f64],
    dv: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let n = net.buses().len();
    let b = build_fdpf_blocks(net).bp;
    let red: Vec<usize> = (0..n).filter(|&i| i != net.slack_index()).collect();
    let a = DMatrix::from_fn(red.len(), red.len(), |r, c| -b[(red[r], red[c])]);
    let mut rhs = DVector::zeros(red.len());
    for (k, &g) in net.pv_indices().iter().enumerate() {
        let r = red.iter().position(|&i| i == g).unwrap();
        rhs[r] = dp[k] / net.base_mva();
    }
    let ang = a.cholesky().unwrap().solve(&rhs);
    let mut delta = vec![0.0; n];
    for (r, &i) in red.iter().enumerate() {
        delta[i] = ang[r];
    }

    let pq = net.pq_indices();
    let pv = net.pv_indices();
    let all = DMatrix::from_fn(pq.len(), pq.len(), |r, c| -b[(pq[r], pq[c])]);
    let mut rhs = DVector::zeros(pq.len());
    for (r, &l) in pq.iter().enumerate() {
        for (k, &g) in pv.iter().enumerate() {
            rhs[r] += b[(l, g)] * dv[k];
        }
    }
    let vl = all.cholesky().unwrap().solve(&rhs);
    let mut v = vec![0.0; n];
    for (k, &g) in pv.iter().enumerate() {
        v[g] = dv[k];
    }
    for (r, &l) in pq.iter().enumerate() {
        v[l] = vl[r];
    }
    (delta, v)
}
