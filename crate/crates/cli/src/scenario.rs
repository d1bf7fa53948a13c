//! Scenario files and their expansion into individual runs.

use std::path::{Path, PathBuf};

use gridrelief_core::acpf::{ControlVariables, PfSettings, PowerFlowSolution, PowerFlowSolver};
use gridrelief_core::case::{parse_case, CaseError, Network};
use gridrelief_core::data::ieee118;
use gridrelief_core::lp::GeneratorLimits;
use gridrelief_core::matpower::parse_matpower;
use gridrelief_core::sensitivity::SensitivityBundle;
use gridrelief_core::simulator::{
    agc_weights, assign_default_ratings, reactive_shift_for_voltage, select_eligible_lines,
    Disturbance, DisturbanceEvent, RatingRule, SimError, SimulationConfig,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Name under which the bundled IEEE 118-bus case can be referenced.
pub const BUILTIN_118: &str = "ieee118";

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Case(#[from] CaseError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    /// Case file path, relative to the scenario file, or `ieee118`.
    pub case: String,
    /// Ratings for lines the case leaves unrated.
    #[serde(default)]
    pub ratings: RatingRule,
    #[serde(default)]
    pub config: SimulationConfig,
    #[serde(default)]
    pub campaign: Campaign,
    /// Output directory, relative to the working directory.
    #[serde(default)]
    pub output: Option<PathBuf>,
}

fn default_margin() -> f64 {
    0.005
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Campaign {
    /// One run with the disturbances listed in the configuration.
    #[default]
    Single,
    /// One run per line and overload; all eligible lines when `lines` is
    /// absent.
    OverloadSweep {
        overloads: Vec<f64>,
        #[serde(default)]
        lines: Option<Vec<usize>>,
    },
    /// One undervoltage per bus, `margin` p.u. below the band.
    VoltageSweep {
        buses: Vec<usize>,
        #[serde(default = "default_margin")]
        margin: f64,
    },
    /// Every pair of a line overload and a bus undervoltage.
    Combined {
        overload: f64,
        #[serde(default)]
        lines: Option<Vec<usize>>,
        buses: Vec<usize>,
        #[serde(default = "default_margin")]
        margin: f64,
    },
    /// Overloads seen through perturbed susceptances, `draws` seeds per line.
    Robustness {
        lines: Vec<usize>,
        overload: f64,
        draws: usize,
        sigma: f64,
        #[serde(default)]
        staleness: bool,
    },
    /// A dynamic run with a line outage, plus the same outage in a static
    /// run for reference.
    DynamicOutage {
        line: usize,
        at: f64,
        #[serde(default = "yes")]
        static_reference: bool,
    },
}

fn yes() -> bool {
    true
}

/// One simulation of a campaign.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSpec {
    pub id: String,
    /// Aggregation key in the campaign summary.
    pub group: String,
    pub config: SimulationConfig,
}

/// A scenario with its case loaded, rated and expanded.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub scenario: Scenario,
    pub net: Network,
    pub nominal: PowerFlowSolution,
    pub runs: Vec<RunSpec>,
}

impl Scenario {
    pub fn load(path: &Path) -> Result<(Scenario, PathBuf), ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let scenario: Scenario = serde_json::from_str(&text).map_err(|source| ScenarioError::Parse {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((scenario, base))
    }
}

/// Loads `ieee118` or a case file (`.m` is read as MATPOWER, anything else
/// as a JSON case).
pub fn load_case(spec: &str, base: &Path) -> Result<Network, ScenarioError> {
    if spec == BUILTIN_118 {
        return Ok(ieee118());
    }
    let path = base.join(spec);
    let text = std::fs::read_to_string(&path).map_err(|source| ScenarioError::Io {
        path: path.clone(),
        source,
    })?;
    let net = if path.extension().is_some_and(|e| e == "m") {
        parse_matpower(&text)?
    } else {
        parse_case(&text)?
    };
    Ok(net)
}

pub fn solve_nominal(net: &Network, q_limits: bool) -> Result<PowerFlowSolution, SimError> {
    let settings = PfSettings {
        enforce_q_limits: q_limits,
        ..PfSettings::default()
    };
    PowerFlowSolver::new(net, settings)
        .solve(&ControlVariables::nominal(net), None, None)
        .map_err(|source| SimError::PowerFlow { t: 0.0, source })
}

/// Line ids that qualify for overload tests at the nominal state.
pub fn eligible_lines(net: &Network, nominal: &PowerFlowSolution, config: &SimulationConfig) -> Result<Vec<usize>, SimError> {
    let eta = agc_weights(net)?;
    let sens = SensitivityBundle::build(net, &eta)?;
    let limits = GeneratorLimits::from_network(net, &config.params);
    Ok(select_eligible_lines(net, &sens, nominal, &limits.ramp_p))
}

fn overload(line: usize, c: f64) -> DisturbanceEvent {
    DisturbanceEvent {
        at: 0.0,
        kind: Disturbance::SetRatingOverload { line, overload_mva: c },
    }
}

fn fmt_c(c: f64) -> String {
    format!("{c}").replace('.', "p")
}

/// Rejects a voltage band that the undisturbed case already violates, since
/// every run would then start with a violation unrelated to its disturbance.
fn check_nominal_band(net: &Network, nominal: &PowerFlowSolution, v_bar: f64) -> Result<(), ScenarioError> {
    let worst = net
        .pq_indices()
        .iter()
        .map(|&i| (net.buses()[i].id, (nominal.v[i] - 1.0).abs()))
        .max_by(|a, b| a.1.total_cmp(&b.1));
    match worst {
        Some((bus, dev)) if dev > v_bar => Err(ScenarioError::Invalid(format!(
            "bus {bus} deviates {dev:.4} p.u. from nominal in the undisturbed case, outside v_bar = {v_bar}; widen params.v_bar"
        ))),
        _ => Ok(()),
    }
}

impl Prepared {
    pub fn new(scenario: Scenario, base: &Path) -> Result<Prepared, ScenarioError> {
        let raw = load_case(&scenario.case, base)?;
        let config = &scenario.config;
        config.validate()?;
        let nominal = solve_nominal(&raw, config.q_limits)?;
        let net = assign_default_ratings(&raw, &nominal, &scenario.ratings)?;
        check_nominal_band(&net, &nominal, config.params.v_bar)?;
        let mut prep = Prepared {
            runs: Vec::new(),
            scenario,
            net,
            nominal,
        };
        prep.runs = prep.expand()?;
        for run in &prep.runs {
            run.config.validate()?;
        }
        Ok(prep)
    }

    fn line_flow(&self, line: usize) -> Result<f64, ScenarioError> {
        let k = self
            .net
            .line_index(line)
            .ok_or_else(|| ScenarioError::Invalid(format!("unknown line {line}")))?;
        Ok(self.nominal.flows[k].s_from())
    }

    fn check_overload(&self, line: usize, c: f64) -> Result<(), ScenarioError> {
        let s = self.line_flow(line)?;
        if !(c > 0.0 && c < s) {
            return Err(ScenarioError::Invalid(format!(
                "overload {c} MVA on line {line} must lie in (0, {s:.3})"
            )));
        }
        Ok(())
    }

    fn lines_or_eligible(&self, lines: &Option<Vec<usize>>) -> Result<Vec<usize>, ScenarioError> {
        match lines {
            Some(l) => Ok(l.clone()),
            None => Ok(eligible_lines(&self.net, &self.nominal, &self.scenario.config)?),
        }
    }

    /// Reactive shift that leaves `bus` `margin` p.u. below the voltage band.
    fn undervoltage(&self, bus: usize, margin: f64) -> Result<DisturbanceEvent, ScenarioError> {
        let i = self
            .net
            .bus_index(bus)
            .filter(|i| self.net.pq_indices().contains(i))
            .ok_or_else(|| ScenarioError::Invalid(format!("bus {bus} is not a PQ bus of the case")))?;
        let config = &self.scenario.config;
        let target = 1.0 - config.params.v_bar - margin;
        let settings = PfSettings {
            enforce_q_limits: config.q_limits,
            ..PfSettings::default()
        };
        let dq = reactive_shift_for_voltage(&self.net, &ControlVariables::nominal(&self.net), settings, i, target)?;
        Ok(DisturbanceEvent {
            at: 0.0,
            kind: Disturbance::ReactiveShift { bus, dq_mvar: dq },
        })
    }

    fn with_events(&self, events: Vec<DisturbanceEvent>) -> SimulationConfig {
        let mut c = self.scenario.config.clone();
        c.disturbances.extend(events);
        c
    }

    fn expand(&self) -> Result<Vec<RunSpec>, ScenarioError> {
        let mut runs = Vec::new();
        match &self.scenario.campaign {
            Campaign::Single => runs.push(RunSpec {
                id: "run".into(),
                group: "single".into(),
                config: self.scenario.config.clone(),
            }),
            Campaign::OverloadSweep { overloads, lines } => {
                for &c in overloads {
                    for line in self.lines_or_eligible(lines)? {
                        self.check_overload(line, c)?;
                        runs.push(RunSpec {
                            id: format!("c{}_line{line:03}", fmt_c(c)),
                            group: format!("C={c}"),
                            config: self.with_events(vec![overload(line, c)]),
                        });
                    }
                }
            }
            Campaign::VoltageSweep { buses, margin } => {
                for &bus in buses {
                    runs.push(RunSpec {
                        id: format!("bus{bus:03}"),
                        group: "voltage".into(),
                        config: self.with_events(vec![self.undervoltage(bus, *margin)?]),
                    });
                }
            }
            Campaign::Combined {
                overload: c,
                lines,
                buses,
                margin,
            } => {
                let shifts = buses
                    .iter()
                    .map(|&b| self.undervoltage(b, *margin).map(|e| (b, e)))
                    .collect::<Result<Vec<_>, _>>()?;
                for line in self.lines_or_eligible(lines)? {
                    self.check_overload(line, *c)?;
                    for (bus, shift) in &shifts {
                        runs.push(RunSpec {
                            id: format!("line{line:03}_bus{bus:03}"),
                            group: format!("bus {bus}"),
                            config: self.with_events(vec![overload(line, *c), shift.clone()]),
                        });
                    }
                }
            }
            Campaign::Robustness {
                lines,
                overload: c,
                draws,
                sigma,
                staleness,
            } => {
                for &line in lines {
                    self.check_overload(line, *c)?;
                    for d in 0..*draws {
                        let mut events = vec![
                            overload(line, *c),
                            DisturbanceEvent {
                                at: 0.0,
                                kind: Disturbance::SusceptanceNoise { sigma: *sigma },
                            },
                        ];
                        if *staleness {
                            events.push(DisturbanceEvent {
                                at: 0.0,
                                kind: Disturbance::MeasurementStaleness,
                            });
                        }
                        let mut config = self.with_events(events);
                        config.rng_seed = self.scenario.config.rng_seed.wrapping_add(d as u64);
                        runs.push(RunSpec {
                            id: format!("line{line:03}_draw{d:03}"),
                            group: format!("line {line}"),
                            config,
                        });
                    }
                }
            }
            Campaign::DynamicOutage {
                line,
                at,
                static_reference,
            } => {
                self.line_flow(*line)?;
                let outage = DisturbanceEvent {
                    at: *at,
                    kind: Disturbance::LineOutage { line: *line },
                };
                let mut dynamic = self.with_events(vec![outage.clone()]);
                dynamic.dynamic = true;
                runs.push(RunSpec {
                    id: "dynamic".into(),
                    group: "dynamic".into(),
                    config: dynamic,
                });
                if *static_reference {
                    let mut stat = self.with_events(vec![outage]);
                    stat.dynamic = false;
                    stat.dt = None;
                    runs.push(RunSpec {
                        id: "static".into(),
                        group: "static".into(),
                        config: stat,
                    });
                }
            }
        }
        runs.sort_by(|a, b| a.id.cmp(&b.id));
        if runs.windows(2).any(|w| w[0].id == w[1].id) {
            return Err(ScenarioError::Invalid("campaign lists the same run twice".into()));
        }
        Ok(runs)
    }
}
