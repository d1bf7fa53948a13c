//! Import of MATPOWER-format case files into the native [`Network`] model.
//!
//! The native model has no shunts, line charging, tap ratios or phase
//! shifters, so those columns are dropped. The slack voltage is forced to
//! 1.0 p.u. Generator rows on the same bus are aggregated. `rateA` values of
//! zero or at least [`UNLIMITED_RATING`] are treated as "no rating".

use std::collections::BTreeMap;

use crate::case::{Bus, BusKind, CaseError, Line, Network};

/// MATPOWER sentinel for an unconstrained branch.
pub const UNLIMITED_RATING: f64 = 9900.0;

fn err(msg: impl Into<String>) -> CaseError {
    CaseError::Matpower(msg.into())
}

fn strip_comments(text: &str) -> String {
    text.lines()
        .map(|l| match l.find('%') {
            Some(i) => &l[..i],
            None => l,
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn scalar(text: &str, name: &str) -> Option<f64> {
    let key = format!("mpc.{name}");
    let start = text.find(&key)? + key.len();
    let rest = text[start..].trim_start().strip_prefix('=')?;
    let end = rest.find(';')?;
    rest[..end].trim().parse().ok()
}

fn matrix(text: &str, name: &str) -> Result<Vec<Vec<f64>>, CaseError> {
    let key = format!("mpc.{name}");
    let start = text
        .find(&key)
        .ok_or_else(|| err(format!("missing {key}")))?
        + key.len();
    let open = text[start..]
        .find('[')
        .ok_or_else(|| err(format!("{key}: missing '['")))?
        + start
        + 1;
    let close = text[open..]
        .find(']')
        .ok_or_else(|| err(format!("{key}: missing ']'")))?
        + open;
    let mut rows = Vec::new();
    for (r, raw) in text[open..close]
        .split([';', '\n'])
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .enumerate()
    {
        let row = raw
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|_| err(format!("{key} row {}: bad number {s:?}", r + 1)))
            })
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(row);
    }
    Ok(rows)
}

fn col(row: &[f64], i: usize, what: &str) -> Result<f64, CaseError> {
    row.get(i)
        .copied()
        .ok_or_else(|| err(format!("{what}: row too short (need column {})", i + 1)))
}

#[derive(Default)]
struct GenAgg {
    pg: f64,
    qmax: f64,
    qmin: f64,
    vg: Option<f64>,
    pmax: f64,
    pmin: f64,
}

/// Converts MATPOWER case text to a [`Network`].
pub fn parse_matpower(text: &str) -> Result<Network, CaseError> {
    let text = strip_comments(text);
    let base = scalar(&text, "baseMVA").ok_or_else(|| err("missing mpc.baseMVA"))?;
    let bus_rows = matrix(&text, "bus")?;
    let gen_rows = matrix(&text, "gen")?;
    let branch_rows = matrix(&text, "branch")?;

    let mut gens: BTreeMap<usize, GenAgg> = BTreeMap::new();
    for row in &gen_rows {
        if col(row, 7, "gen")? <= 0.0 {
            continue;
        }
        let bus = col(row, 0, "gen")? as usize;
        let g = gens.entry(bus).or_default();
        g.pg += col(row, 1, "gen")?;
        g.qmax += col(row, 3, "gen")?;
        g.qmin += col(row, 4, "gen")?;
        g.vg.get_or_insert(col(row, 5, "gen")?);
        g.pmax += col(row, 8, "gen")?;
        g.pmin += col(row, 9, "gen")?;
    }

    let mut buses = Vec::with_capacity(bus_rows.len());
    for row in &bus_rows {
        let id = col(row, 0, "bus")? as usize;
        let kind = col(row, 1, "bus")? as i64;
        let pd = col(row, 2, "bus")?;
        let qd = col(row, 3, "bus")?;
        let bus = match (kind, gens.get(&id)) {
            (3, _) => Bus {
                p_load: pd,
                q_load: qd,
                ..Bus::slack(id)
            },
            (2, Some(g)) => Bus {
                id,
                kind: BusKind::Pv,
                v_set: g.vg,
                p_inj: g.pg,
                q_inj: 0.0,
                p_load: pd,
                q_load: qd,
                p_min: Some(g.pmin),
                p_max: Some(g.pmax),
                q_min: Some(g.qmin),
                q_max: Some(g.qmax),
                ramp_p: None,
                ramp_v: None,
            },
            (4, _) => continue,
            _ => Bus::pq(id, -pd, -qd),
        };
        buses.push(bus);
    }

    let mut lines = Vec::with_capacity(branch_rows.len());
    for (k, row) in branch_rows.iter().enumerate() {
        if row.len() > 10 && row[10] <= 0.0 {
            continue;
        }
        let r = col(row, 2, "branch")?;
        let x = col(row, 3, "branch")?;
        let rate = col(row, 5, "branch")?;
        let mut line = Line::from_impedance(
            k + 1,
            col(row, 0, "branch")? as usize,
            col(row, 1, "branch")? as usize,
            r,
            x,
        );
        if rate > 0.0 && rate < UNLIMITED_RATING {
            line.s_rating = Some(rate);
        }
        lines.push(line);
    }
    Network::new(base, buses, lines)
}
