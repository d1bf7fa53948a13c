//! Linear sensitivities of voltages and line flows with respect to the
//! generator set-points, under the fast decoupled load flow assumptions
//! (V ≈ 1, small angle differences, couplings through line susceptance only).
//!
//! Sign convention: with `b` the series susceptance of a line (negative for
//! an inductive line), the angle block is `Bp[i][j] = -b_ij` off the diagonal
//! and `Bp[i][i] = Σ b_ij`, so that `Δp = -Bp·Δδ`. On a single line from a
//! generator to the slack this makes every injected megawatt flow out of the
//! generator end, i.e. `∂P/∂p_g = 1`.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::case::Network;

/// Lines whose apparent flow is below this (MVA) have no defined |S| gradient.
pub const S_EPS: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SensitivityError {
    #[error("singular {0} block")]
    Singular(&'static str),
    #[error("AGC weights sum to {0}, expected 1")]
    WeightsNotNormalized(f64),
    #[error("weights have {got} entries, network has {expected} PV buses")]
    WeightLength { expected: usize, got: usize },
    #[error("sensitivity bundle built for topology {built:016x}, network is {current:016x}")]
    StaleTopology { built: u64, current: u64 },
}

/// Decoupled angle (`bp`) and voltage (`bq`) blocks over all buses.
#[derive(Debug, Clone, PartialEq)]
pub struct FdpfBlocks {
    pub bp: DMatrix<f64>,
    pub bq: DMatrix<f64>,
}

pub fn build_fdpf_blocks(net: &Network) -> FdpfBlocks {
    let n = net.buses().len();
    let mut b = DMatrix::zeros(n, n);
    for (line, &(f, t)) in net.lines().iter().zip(net.line_ends()) {
        b[(f, t)] -= line.b;
        b[(t, f)] -= line.b;
        b[(f, f)] += line.b;
        b[(t, t)] += line.b;
    }
    FdpfBlocks {
        bp: b.clone(),
        bq: b,
    }
}

fn submatrix(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |r, c| m[(rows[r], cols[c])])
}

/// `∂V_dep/∂V_ctl = -Bq[dep,dep]⁻¹ · Bq[dep,ctl]`, rows in `dependent`
/// order, columns in `control` order. Buses in neither set (the slack) are
/// held fixed.
pub fn voltage_sensitivity(
    bq: &DMatrix<f64>,
    dependent: &[usize],
    control: &[usize],
) -> Result<DMatrix<f64>, SensitivityError> {
    if dependent.is_empty() {
        return Ok(DMatrix::zeros(0, control.len()));
    }
    let lu = submatrix(bq, dependent, dependent).lu();
    let rhs = -submatrix(bq, dependent, control);
    lu.solve(&rhs).ok_or(SensitivityError::Singular("reactive"))
}

/// Angle response per MW injected at each PV bus and withdrawn at the slack
/// (rad/MW, one row per bus, slack row zero).
pub fn angle_sensitivity(
    bp: &DMatrix<f64>,
    slack: usize,
    pv: &[usize],
    base_mva: f64,
) -> Result<DMatrix<f64>, SensitivityError> {
    let n = bp.nrows();
    let red: Vec<usize> = (0..n).filter(|&i| i != slack).collect();
    let lu = submatrix(bp, &red, &red).lu();
    let mut pos = vec![usize::MAX; n];
    for (r, &i) in red.iter().enumerate() {
        pos[i] = r;
    }
    let mut rhs = DMatrix::zeros(red.len(), pv.len());
    for (c, &g) in pv.iter().enumerate() {
        rhs[(pos[g], c)] = -1.0 / base_mva;
    }
    let sol = lu
        .solve(&rhs)
        .ok_or(SensitivityError::Singular("active"))?;
    let mut out = DMatrix::zeros(n, pv.len());
    for (r, &i) in red.iter().enumerate() {
        out.set_row(i, &sol.row(r));
    }
    Ok(out)
}

/// Flow sensitivities `(∂P/∂p_g` in MW/MW, `∂Q/∂V_g` in MVAr/p.u.).
/// `dv_dvg` holds one row per bus (the full voltage response, including the
/// identity rows of the control buses).
pub fn flow_sensitivities(
    net: &Network,
    ddelta_dpg: &DMatrix<f64>,
    dv_dvg: &DMatrix<f64>,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let base = net.base_mva();
    let m = net.lines().len();
    let mut dp = DMatrix::zeros(m, ddelta_dpg.ncols());
    let mut dq = DMatrix::zeros(m, dv_dvg.ncols());
    for (k, (line, &(f, t))) in net.lines().iter().zip(net.line_ends()).enumerate() {
        let s = -line.b * base;
        dp.set_row(k, &((ddelta_dpg.row(f) - ddelta_dpg.row(t)) * s));
        dq.set_row(k, &((dv_dvg.row(f) - dv_dvg.row(t)) * s));
    }
    (dp, dq)
}

/// Expands dependent-bus voltage sensitivities to one row per bus: identity
/// for control buses, zero for buses in neither set.
pub fn full_voltage_response(
    n: usize,
    dependent: &[usize],
    control: &[usize],
    dvl_dvg: &DMatrix<f64>,
) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(n, control.len());
    for (r, &i) in dependent.iter().enumerate() {
        out.set_row(i, &dvl_dvg.row(r));
    }
    for (c, &g) in control.iter().enumerate() {
        out[(g, c)] = 1.0;
    }
    out
}

/// Chain rule for |S|: `(P/|S|)·∂P/∂p` and `(Q/|S|)·∂Q/∂V`. Returns `None`
/// for a line carrying less than [`S_EPS`].
pub fn abs_flow_chain(
    p: f64,
    q: f64,
    s: f64,
    dp_row: &[f64],
    dq_row: &[f64],
) -> Option<(Vec<f64>, Vec<f64>)> {
    if s < S_EPS {
        return None;
    }
    Some((
        dp_row.iter().map(|d| p / s * d).collect(),
        dq_row.iter().map(|d| q / s * d).collect(),
    ))
}

/// Flow response when the imbalance caused by a 1 MW change at `g` is taken
/// up by all generators in proportion to `eta`.
pub fn frequency_adjusted_sensitivity(
    dp_dpg: &DMatrix<f64>,
    eta: &[f64],
) -> Result<DMatrix<f64>, SensitivityError> {
    if eta.len() != dp_dpg.ncols() {
        return Err(SensitivityError::WeightLength {
            expected: dp_dpg.ncols(),
            got: eta.len(),
        });
    }
    let sum: f64 = eta.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(SensitivityError::WeightsNotNormalized(sum));
    }
    let w = dp_dpg * DVector::from_column_slice(eta);
    let mut out = dp_dpg.clone();
    for mut col in out.column_iter_mut() {
        col -= &w;
    }
    Ok(out)
}

/// All matrices the controller needs for one topology, with the voltage
/// part built for the case's own PV/PQ classification.
#[derive(Debug, Clone)]
pub struct SensitivityBundle {
    pub topology_tag: u64,
    pub blocks: FdpfBlocks,
    pub pv: Vec<usize>,
    pub pq: Vec<usize>,
    /// |PQ| × |PV|, p.u./p.u.
    pub dvl_dvg: DMatrix<f64>,
    /// |buses| × |PV|, rad/MW.
    pub ddelta_dpg: DMatrix<f64>,
    /// |lines| × |PV|, MW/MW.
    pub dp_dpg: DMatrix<f64>,
    /// |lines| × |PV|, MVAr/p.u.
    pub dq_dvg: DMatrix<f64>,
    /// |lines| × |PV|, MW/MW.
    pub dpprime_dpg: DMatrix<f64>,
}

/// Voltage-side sensitivities for a particular split of the PV buses into
/// controllable and reactive-limited ones.
#[derive(Debug, Clone)]
pub struct VoltagePartition {
    /// Bus indices whose voltage responds (PQ buses plus limited PV buses).
    pub dependent: Vec<usize>,
    /// Bus indices whose voltage set-point is a decision variable.
    pub control: Vec<usize>,
    pub dv_dep: DMatrix<f64>,
    pub dq: DMatrix<f64>,
}

impl SensitivityBundle {
    pub fn build(net: &Network, eta: &[f64]) -> Result<Self, SensitivityError> {
        let blocks = build_fdpf_blocks(net);
        let pv = net.pv_indices().to_vec();
        let pq = net.pq_indices().to_vec();
        let ddelta_dpg = angle_sensitivity(&blocks.bp, net.slack_index(), &pv, net.base_mva())?;
        let dvl_dvg = voltage_sensitivity(&blocks.bq, &pq, &pv)?;
        let dv = full_voltage_response(net.buses().len(), &pq, &pv, &dvl_dvg);
        let (dp_dpg, dq_dvg) = flow_sensitivities(net, &ddelta_dpg, &dv);
        let dpprime_dpg = frequency_adjusted_sensitivity(&dp_dpg, eta)?;
        Ok(SensitivityBundle {
            topology_tag: net.topology_tag(),
            blocks,
            pv,
            pq,
            dvl_dvg,
            ddelta_dpg,
            dp_dpg,
            dq_dvg,
            dpprime_dpg,
        })
    }

    pub fn check_topology(&self, net: &Network) -> Result<(), SensitivityError> {
        let current = net.topology_tag();
        if current == self.topology_tag {
            Ok(())
        } else {
            Err(SensitivityError::StaleTopology {
                built: self.topology_tag,
                current,
            })
        }
    }

    /// Voltage sensitivities with the PV buses flagged in `limited` (same
    /// order as [`Network::pv_indices`]) moved to the dependent side.
    pub fn voltage_partition(
        &self,
        net: &Network,
        limited: &[bool],
    ) -> Result<VoltagePartition, SensitivityError> {
        let mut dependent = self.pq.clone();
        let mut control = Vec::new();
        for (&g, &lim) in self.pv.iter().zip(limited) {
            if lim {
                dependent.push(g);
            } else {
                control.push(g);
            }
        }
        dependent.sort_unstable();
        let dv_dep = if control.len() == self.pv.len() {
            self.dvl_dvg.clone()
        } else {
            voltage_sensitivity(&self.blocks.bq, &dependent, &control)?
        };
        let full = full_voltage_response(net.buses().len(), &dependent, &control, &dv_dep);
        let base = net.base_mva();
        let mut dq = DMatrix::zeros(net.lines().len(), control.len());
        for (k, (line, &(f, t))) in net.lines().iter().zip(net.line_ends()).enumerate() {
            dq.set_row(k, &((full.row(f) - full.row(t)) * (-line.b * base)));
        }
        Ok(VoltagePartition {
            dependent,
            control,
            dv_dep,
            dq,
        })
    }

    /// Writes each matrix as CSV (first column row id, header PV bus ids).
    pub fn write_csv(&self, net: &Network, dir: &Path) -> std::io::Result<()> {
        let bus_id = |i: usize| net.buses()[i].id;
        let cols: Vec<usize> = self.pv.iter().map(|&i| bus_id(i)).collect();
        let lines: Vec<usize> = net.lines().iter().map(|l| l.id).collect();
        let buses: Vec<usize> = (0..net.buses().len()).map(bus_id).collect();
        let pq: Vec<usize> = self.pq.iter().map(|&i| bus_id(i)).collect();
        std::fs::create_dir_all(dir)?;
        for (name, m, rows) in [
            ("dVl_dVg", &self.dvl_dvg, &pq),
            ("ddelta_dpg", &self.ddelta_dpg, &buses),
            ("dP_dpg", &self.dp_dpg, &lines),
            ("dQ_dVg", &self.dq_dvg, &lines),
            ("dPprime_dpg", &self.dpprime_dpg, &lines),
        ] {
            std::fs::write(dir.join(format!("{name}.csv")), matrix_csv(m, rows, &cols))?;
        }
        Ok(())
    }
}

fn matrix_csv(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> String {
    let mut s = String::from("id");
    for c in cols {
        let _ = write!(s, ",{c}");
    }
    s.push('\n');
    for (r, id) in rows.iter().enumerate() {
        let _ = write!(s, "{id}");
        for c in 0..m.ncols() {
            let _ = write!(s, ",{}", m[(r, c)]);
        }
        s.push('\n');
    }
    s
}
