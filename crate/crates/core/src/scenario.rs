//! Scenario documents: network reference, boundary profiles, bounds and
//! solver settings in CLI units (km, MPa, hours, mass fraction).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dynamics::{Gas, ScenarioConfig};
use crate::error::{Error, Result};
use crate::network::{parse_network, refine, Network, NodeKind, RefinedNetwork};
use crate::nlp::{Curvature, SolverOptions};
use crate::simulator::{BoundaryProfiles, PeriodicProfile, SimulationOptions, SupplyProfile};

const HOUR: f64 = 3600.0;
const MPA: f64 = 1e6;
const KM: f64 = 1000.0;

/// A scalar time series: a constant or periodic piecewise-linear samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Series {
    Constant(f64),
    Sampled { times_h: Vec<f64>, values: Vec<f64> },
}

impl Series {
    fn times(&self) -> Vec<f64> {
        match self {
            Series::Constant(_) => vec![0.0],
            Series::Sampled { times_h, .. } => times_h.iter().map(|t| t * HOUR).collect(),
        }
    }

    fn check(&self, what: &str) -> Result<()> {
        if let Series::Sampled { times_h, values } = self {
            if times_h.len() != values.len() || times_h.is_empty() {
                return Err(Error::InvalidProfile(format!(
                    "{what}: {} times for {} values",
                    times_h.len(),
                    values.len()
                )));
            }
        }
        Ok(())
    }

    fn profile(&self, period: f64, unit: f64) -> Result<PeriodicProfile> {
        match self {
            Series::Constant(v) => PeriodicProfile::constant(vec![v * unit], period),
            Series::Sampled { times_h, values } => PeriodicProfile::new(
                times_h.iter().map(|t| t * HOUR).collect(),
                values.iter().map(|v| vec![v * unit]).collect(),
                period,
            ),
        }
    }
}

/// Stacks scalar series into one vector profile on the union of their
/// sample times; interpolating at extra times preserves each series exactly.
fn stack(series: &[&Series], period: f64, unit: f64) -> Result<PeriodicProfile> {
    let mut times: Vec<f64> = series.iter().flat_map(|s| s.times()).collect();
    times.push(0.0);
    times.sort_by(f64::total_cmp);
    times.dedup();
    let profiles = series
        .iter()
        .map(|s| s.profile(period, unit))
        .collect::<Result<Vec<_>>>()?;
    let values = times
        .iter()
        .map(|&t| profiles.iter().map(|p| p.interpolate(t)[0]).collect())
        .collect();
    PeriodicProfile::new(times, values, period)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GasSection {
    /// Natural gas sound speed, m/s.
    pub natural_gas_sound_speed: f64,
    /// Hydrogen sound speed, m/s.
    pub hydrogen_sound_speed: f64,
}

/// Supply node state: pressure and hydrogen fraction, or constituent
/// densities (kg/m³).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupplySpec {
    pub node: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pressure_mpa: Option<Series>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hydrogen_fraction: Option<Series>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub natural_gas_density: Option<Series>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hydrogen_density: Option<Series>,
}

/// Withdrawal mass flux at a node, kg/(m²·s).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WithdrawalSpec {
    pub node: u32,
    pub flux: Series,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeBound {
    pub node: u32,
    pub min_mpa: f64,
    pub max_mpa: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PressureBounds {
    pub min_mpa: f64,
    pub max_mpa: f64,
    /// Per-node bounds for original nodes; auxiliary nodes use the defaults.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub nodes: Vec<NodeBound>,
}

/// One coefficient for every actuator, or one per actuator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Coefficients {
    Uniform(f64),
    PerActuator(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CurvatureChoice {
    FiniteDifference,
    QuasiNewton,
    GaussNewton,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    pub tol_kkt: f64,
    pub tol_feas: f64,
    pub max_iter: usize,
    pub curvature: CurvatureChoice,
    pub verbose: bool,
}

impl Default for SolverSection {
    fn default() -> Self {
        let d = SolverOptions::default();
        Self {
            tol_kkt: d.tol_kkt,
            tol_feas: d.tol_feas,
            max_iter: d.max_iter,
            curvature: CurvatureChoice::FiniteDifference,
            verbose: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationSection {
    pub rtol: f64,
    pub report_points: usize,
}

impl Default for SimulationSection {
    fn default() -> Self {
        let d = SimulationOptions::default();
        Self {
            rtol: d.rtol,
            report_points: d.report_points,
        }
    }
}

/// A scenario document as written on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioDocument {
    /// Network document path, relative to the scenario file.
    pub network: String,
    pub horizon_h: f64,
    pub time_steps: usize,
    pub segment_cap_km: f64,
    pub isentropic_exponent: f64,
    /// Compressor efficiency coefficient `c_a`, per second of operation.
    pub compressor_coefficient: Coefficients,
    pub gas: GasSection,
    pub pressure_bounds: PressureBounds,
    pub supply: Vec<SupplySpec>,
    #[serde(default)]
    pub withdrawals: Vec<WithdrawalSpec>,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub simulation: SimulationSection,
}

impl ScenarioDocument {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Network path resolved against `base`.
    pub fn network_path(&self, base: &Path) -> PathBuf {
        base.join(&self.network)
    }

    pub fn horizon(&self) -> f64 {
        self.horizon_h * HOUR
    }

    pub fn solver_options(&self) -> SolverOptions {
        SolverOptions {
            tol_kkt: self.solver.tol_kkt,
            tol_feas: self.solver.tol_feas,
            max_iter: self.solver.max_iter,
            curvature: match self.solver.curvature {
                CurvatureChoice::FiniteDifference => Curvature::FiniteDifference,
                CurvatureChoice::QuasiNewton => Curvature::QuasiNewton,
                CurvatureChoice::GaussNewton => Curvature::GaussNewton,
            },
            verbose: self.solver.verbose,
            ..Default::default()
        }
    }

    pub fn simulation_options(&self) -> SimulationOptions {
        SimulationOptions {
            rtol: self.simulation.rtol,
            report_points: self.simulation.report_points,
            ..Default::default()
        }
    }

    /// Boundary profiles on the original network's nodes.
    pub fn boundary(&self, net: &Network) -> Result<BoundaryProfiles> {
        let period = self.horizon();
        let supplies: Vec<u32> = net
            .nodes()
            .iter()
            .filter(|n| n.kind == NodeKind::Supply)
            .map(|n| n.id)
            .collect();
        let withdrawals: Vec<u32> = net
            .nodes()
            .iter()
            .filter(|n| n.kind == NodeKind::Withdrawal)
            .map(|n| n.id)
            .collect();
        let mut specs = Vec::with_capacity(supplies.len());
        for &id in &supplies {
            let found: Vec<&SupplySpec> = self.supply.iter().filter(|s| s.node == id).collect();
            match found.as_slice() {
                [one] => specs.push(*one),
                [] => return Err(Error::InvalidInput(format!("no supply data for node {id}"))),
                _ => return Err(Error::InvalidInput(format!("supply node {id} listed twice"))),
            }
        }
        if let Some(s) = self.supply.iter().find(|s| !supplies.contains(&s.node)) {
            return Err(Error::InvalidInput(format!("node {} is not a supply node", s.node)));
        }
        let by_pressure = specs.iter().all(|s| {
            s.pressure_mpa.is_some()
                && s.hydrogen_fraction.is_some()
                && s.natural_gas_density.is_none()
                && s.hydrogen_density.is_none()
        });
        let by_density = specs.iter().all(|s| {
            s.pressure_mpa.is_none()
                && s.hydrogen_fraction.is_none()
                && s.natural_gas_density.is_some()
                && s.hydrogen_density.is_some()
        });
        let pick = |f: fn(&SupplySpec) -> &Option<Series>| -> Result<Vec<&Series>> {
            specs
                .iter()
                .map(|s| {
                    let v = f(s).as_ref().expect("checked above");
                    v.check(&format!("supply node {}", s.node))?;
                    Ok(v)
                })
                .collect()
        };
        let supply = if by_pressure {
            SupplyProfile::PressureFraction {
                pressure: stack(&pick(|s| &s.pressure_mpa)?, period, MPA)?,
                alpha2: stack(&pick(|s| &s.hydrogen_fraction)?, period, 1.0)?,
            }
        } else if by_density {
            SupplyProfile::Densities {
                s1: stack(&pick(|s| &s.natural_gas_density)?, period, 1.0)?,
                s2: stack(&pick(|s| &s.hydrogen_density)?, period, 1.0)?,
            }
        } else {
            return Err(Error::InvalidInput(
                "every supply needs either pressure_mpa and hydrogen_fraction, or both densities".into(),
            ));
        };

        let zero = Series::Constant(0.0);
        let mut rows = Vec::with_capacity(withdrawals.len());
        for &id in &withdrawals {
            let found: Vec<&WithdrawalSpec> = self.withdrawals.iter().filter(|w| w.node == id).collect();
            match found.as_slice() {
                [one] => {
                    one.flux.check(&format!("withdrawal node {id}"))?;
                    rows.push(&one.flux)
                }
                [] => rows.push(&zero),
                _ => return Err(Error::InvalidInput(format!("withdrawal node {id} listed twice"))),
            }
        }
        if let Some(w) = self.withdrawals.iter().find(|w| !withdrawals.contains(&w.node)) {
            return Err(Error::InvalidInput(format!("node {} is not a withdrawal node", w.node)));
        }
        Ok(BoundaryProfiles {
            supply,
            withdrawal: stack(&rows, period, 1.0)?,
        })
    }

    /// Physical configuration for a refined network.
    pub fn config(&self, refined: &RefinedNetwork) -> Result<ScenarioConfig> {
        let gas = Gas::new(self.gas.natural_gas_sound_speed, self.gas.hydrogen_sound_speed)?;
        let net = &refined.network;
        let ns = net.num_supply();
        let nw = net.num_withdrawal();
        let mut pressure_min = vec![self.pressure_bounds.min_mpa * MPA; nw];
        let mut pressure_max = vec![self.pressure_bounds.max_mpa * MPA; nw];
        for b in &self.pressure_bounds.nodes {
            let i = refined
                .node_for_parent(b.node)
                .filter(|&i| i >= ns)
                .ok_or_else(|| Error::InvalidInput(format!("pressure bound for unknown withdrawal node {}", b.node)))?;
            pressure_min[i - ns] = b.min_mpa * MPA;
            pressure_max[i - ns] = b.max_mpa * MPA;
        }
        let na = net.actuators().len();
        let compressor_coefficients = match &self.compressor_coefficient {
            Coefficients::Uniform(c) => vec![*c; na],
            Coefficients::PerActuator(v) => {
                if v.len() != na {
                    return Err(Error::InvalidInput(format!(
                        "{} compressor coefficients for {na} actuators",
                        v.len()
                    )));
                }
                v.clone()
            }
        };
        Ok(ScenarioConfig {
            gas,
            horizon: self.horizon(),
            pressure_min,
            pressure_max,
            ratio_bounds: net.actuators().iter().map(|a| (a.min_ratio, a.max_ratio)).collect(),
            isentropic_exponent: self.isentropic_exponent,
            compressor_coefficients,
            time_steps: self.time_steps,
        })
    }
}

/// A scenario resolved against its network: everything the workflow needs.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub document: ScenarioDocument,
    pub network: Network,
    pub refined: RefinedNetwork,
    pub config: ScenarioConfig,
    /// Boundary profiles on the refined network.
    pub boundary: BoundaryProfiles,
}

impl Scenario {
    /// Refines `network` and maps the document onto it.
    pub fn new(document: ScenarioDocument, network: Network) -> Result<Self> {
        let refined = refine(&network, document.segment_cap_km * KM)?;
        let boundary = document.boundary(&network)?.expand(&network, &refined)?;
        let config = document.config(&refined)?;
        Ok(Self {
            document,
            network,
            refined,
            config,
            boundary,
        })
    }

    /// Reads a scenario file and the network it references.
    pub fn load(path: &Path) -> Result<Self> {
        let (document, network) = load_documents(path, None)?;
        Self::new(document, network)
    }
}

/// Reads a scenario document and its network, optionally overriding the
/// network path.
pub fn load_documents(scenario: &Path, network: Option<&Path>) -> Result<(ScenarioDocument, Network)> {
    let document = ScenarioDocument::parse(&std::fs::read_to_string(scenario)?)?;
    let net_path = match network {
        Some(p) => p.to_path_buf(),
        None => document.network_path(scenario.parent().unwrap_or(Path::new("."))),
    };
    let network = parse_network(&std::fs::read_to_string(&net_path)?)?;
    Ok((document, network))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_fixtures::{CASE_STUDY_NETWORK, CASE_STUDY_SCENARIO};
    use approx::assert_relative_eq;

    #[test]
    fn shipped_scenario_resolves() {
        let doc = ScenarioDocument::parse(CASE_STUDY_SCENARIO).unwrap();
        let s = Scenario::new(doc, parse_network(CASE_STUDY_NETWORK).unwrap()).unwrap();
        assert_eq!(s.refined.network.num_withdrawal(), 12);
        assert_eq!(s.config.time_steps, 20);
        assert_eq!(s.config.horizon, 86_400.0);
        assert_eq!(s.config.pressure_min, vec![5e6; 12]);
        let b = s.boundary.at(0.0, &s.config.gas).unwrap();
        assert_relative_eq!(b.alpha2[0], 0.1);
        assert_relative_eq!(b.supply_pressure(&s.config.gas)[0], 5e6, max_relative = 1e-12);
        // auxiliary nodes withdraw nothing
        assert_eq!(b.w.iter().filter(|&&w| w > 0.0).count(), 3);
    }

    #[test]
    fn document_round_trips() {
        let doc = ScenarioDocument::parse(CASE_STUDY_SCENARIO).unwrap();
        let again = ScenarioDocument::parse(&doc.to_toml().unwrap()).unwrap();
        assert_eq!(doc, again);
    }

    #[test]
    fn series_with_different_grids_are_merged_exactly() {
        let a = Series::Sampled {
            times_h: vec![0.0, 12.0],
            values: vec![1.0, 3.0],
        };
        let b = Series::Constant(2.0);
        let p = stack(&[&a, &b], 86_400.0, 1.0).unwrap();
        assert_eq!(p.interpolate(6.0 * HOUR), vec![2.0, 2.0]);
        assert_eq!(p.interpolate(18.0 * HOUR), vec![2.0, 2.0]);
    }

    #[test]
    fn mixed_supply_kinds_rejected() {
        let mut doc = ScenarioDocument::parse(CASE_STUDY_SCENARIO).unwrap();
        doc.supply[0].hydrogen_density = Some(Series::Constant(1.0));
        assert!(Scenario::new(doc, parse_network(CASE_STUDY_NETWORK).unwrap()).is_err());
    }

    #[test]
    fn unknown_withdrawal_node_rejected() {
        let mut doc = ScenarioDocument::parse(CASE_STUDY_SCENARIO).unwrap();
        doc.withdrawals.push(WithdrawalSpec {
            node: 1,
            flux: Series::Constant(1.0),
        });
        assert!(matches!(
            Scenario::new(doc, parse_network(CASE_STUDY_NETWORK).unwrap()),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn mismatched_sample_lengths_rejected() {
        let mut doc = ScenarioDocument::parse(CASE_STUDY_SCENARIO).unwrap();
        doc.withdrawals[0].flux = Series::Sampled {
            times_h: vec![0.0, 1.0],
            values: vec![1.0],
        };
        assert!(matches!(
            Scenario::new(doc, parse_network(CASE_STUDY_NETWORK).unwrap()),
            Err(Error::InvalidProfile(_))
        ));
    }
}
