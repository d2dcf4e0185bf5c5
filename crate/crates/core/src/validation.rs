//! Relative-difference metrics between optimized and simulated trajectories.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simulator::{Trajectory, TrajectoryTable};

/// Samples of several scalar series on a shared time grid; `values[t][i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    pub times: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

impl TimeSeries {
    pub fn new(times: Vec<f64>, values: Vec<Vec<f64>>) -> Result<Self> {
        if times.is_empty() || times.len() != values.len() {
            return Err(Error::InvalidInput(format!(
                "{} times for {} samples",
                times.len(),
                values.len()
            )));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidInput("series times must be strictly increasing".into()));
        }
        let dim = values[0].len();
        if values.iter().any(|v| v.len() != dim) {
            return Err(Error::InvalidInput("series samples differ in length".into()));
        }
        Ok(Self { times, values })
    }

    pub fn dim(&self) -> usize {
        self.values[0].len()
    }

    /// Linear interpolation, held constant outside the sampled range.
    pub fn at(&self, t: f64, i: usize) -> f64 {
        let ts = &self.times;
        if t <= ts[0] {
            return self.values[0][i];
        }
        if t >= ts[ts.len() - 1] {
            return self.values[ts.len() - 1][i];
        }
        let k = ts.partition_point(|&x| x <= t) - 1;
        let w = (t - ts[k]) / (ts[k + 1] - ts[k]);
        self.values[k][i] * (1.0 - w) + self.values[k + 1][i] * w
    }

    /// Nodal pressures of a trajectory.
    pub fn pressures(traj: &Trajectory) -> Result<Self> {
        Self::new(traj.times.clone(), traj.pressures.clone())
    }

    /// Edge inlet fluxes of a trajectory.
    pub fn fluxes(traj: &Trajectory) -> Result<Self> {
        Self::new(traj.times.clone(), traj.states.iter().map(|s| s.flux.clone()).collect())
    }

    /// Nodal pressures of an exported trajectory.
    pub fn table_pressures(table: &TrajectoryTable) -> Result<Self> {
        Self::new(table.times.clone(), table.pressure.clone())
    }

    /// Edge inlet fluxes of an exported trajectory.
    pub fn table_fluxes(table: &TrajectoryTable) -> Result<Self> {
        Self::new(table.times.clone(), table.flux.clone())
    }
}

/// Union of both sample grids and the horizon ends, restricted to `[0, T]`.
pub fn merged_grid(a: &TimeSeries, b: &TimeSeries, horizon: f64) -> Vec<f64> {
    let mut grid: Vec<f64> = a
        .times
        .iter()
        .chain(&b.times)
        .copied()
        .chain([0.0, horizon])
        .filter(|&t| (0.0..=horizon).contains(&t))
        .collect();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    grid
}

fn check_pair(a: &TimeSeries, b: &TimeSeries) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::InvalidInput(format!(
            "series have {} and {} components",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// `2(a − b)/(a + b)` at one point.
fn relative_difference(a: f64, b: f64, index: usize, time: f64) -> Result<f64> {
    let sum = a + b;
    if sum == 0.0 || !sum.is_finite() {
        return Err(Error::VanishingMean { index, time });
    }
    Ok(2.0 * (a - b) / sum)
}

/// Mean over components of the root-mean-square relative difference on
/// `[0, horizon]`, in percent. Trapezoid rule on the merged grid.
pub fn relative_l2(a: &TimeSeries, b: &TimeSeries, horizon: f64) -> Result<f64> {
    check_pair(a, b)?;
    if !(horizon > 0.0) {
        return Err(Error::InvalidInput(format!("horizon must be positive, got {horizon}")));
    }
    let grid = merged_grid(a, b, horizon);
    let mut total = 0.0;
    for i in 0..a.dim() {
        let r = grid
            .iter()
            .map(|&t| relative_difference(a.at(t, i), b.at(t, i), i, t))
            .collect::<Result<Vec<_>>>()?;
        let integral: f64 = if grid.len() == 1 {
            r[0] * r[0] * horizon
        } else {
            grid.windows(2)
                .zip(r.windows(2))
                .map(|(t, r)| 0.5 * (t[1] - t[0]) * (r[0] * r[0] + r[1] * r[1]))
                .sum()
        };
        total += (integral / horizon).sqrt() * 100.0;
    }
    Ok(total / a.dim().max(1) as f64)
}

/// Largest absolute relative difference over components and the merged
/// grid, in percent.
pub fn relative_max(a: &TimeSeries, b: &TimeSeries, horizon: f64) -> Result<f64> {
    check_pair(a, b)?;
    let grid = merged_grid(a, b, horizon);
    let mut worst: f64 = 0.0;
    for i in 0..a.dim() {
        for &t in &grid {
            worst = worst.max(relative_difference(a.at(t, i), b.at(t, i), i, t)?.abs() * 100.0);
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricPair {
    /// Average relative L² difference, percent.
    pub average_l2: f64,
    /// Maximum absolute relative difference, percent.
    pub max: f64,
}

impl MetricPair {
    pub fn compare(a: &TimeSeries, b: &TimeSeries, horizon: f64) -> Result<Self> {
        Ok(Self {
            average_l2: relative_l2(a, b, horizon)?,
            max: relative_max(a, b, horizon)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverSummary {
    pub status: String,
    pub iterations: usize,
    pub kkt_residual: f64,
    pub constraint_violation: f64,
    pub variables: usize,
    pub equalities: usize,
    pub pressure_rows: usize,
    pub ratio_bounds: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Runtimes {
    pub optimize_s: f64,
    pub simulate_s: f64,
    pub total_s: f64,
}

/// Outcome of an optimize-then-simulate run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    /// Compression energy of the optimal schedule.
    pub objective: f64,
    pub pressure: MetricPair,
    pub flux: MetricPair,
    /// `‖x(T) − x(0)‖∞` of the simulated pressures relative to their
    /// peak-to-peak amplitude.
    pub periodicity_gap: f64,
    /// Largest linepack balance defect of the validating simulation.
    pub linepack_residual: f64,
    pub solver: SolverSummary,
    pub runtimes: Runtimes,
}

impl ValidationReport {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }
}

/// Pressure and flux metrics between two trajectories.
pub fn compare_trajectories(
    optimized: &Trajectory,
    simulated: &Trajectory,
    horizon: f64,
) -> Result<(MetricPair, MetricPair)> {
    Ok((
        MetricPair::compare(
            &TimeSeries::pressures(optimized)?,
            &TimeSeries::pressures(simulated)?,
            horizon,
        )?,
        MetricPair::compare(
            &TimeSeries::fluxes(optimized)?,
            &TimeSeries::fluxes(simulated)?,
            horizon,
        )?,
    ))
}

/// Metrics between two exported trajectories over the same nodes and edges.
pub fn compare_tables(
    optimized: &TrajectoryTable,
    simulated: &TrajectoryTable,
    horizon: f64,
) -> Result<(MetricPair, MetricPair)> {
    if optimized.node_ids != simulated.node_ids || optimized.edge_ids != simulated.edge_ids {
        return Err(Error::InvalidInput(
            "trajectories cover different nodes or edges".into(),
        ));
    }
    Ok((
        MetricPair::compare(
            &TimeSeries::table_pressures(optimized)?,
            &TimeSeries::table_pressures(simulated)?,
            horizon,
        )?,
        MetricPair::compare(
            &TimeSeries::table_fluxes(optimized)?,
            &TimeSeries::table_fluxes(simulated)?,
            horizon,
        )?,
    ))
}

/// Largest end-to-start pressure gap over the largest peak-to-peak swing.
pub fn periodicity_gap(traj: &Trajectory) -> f64 {
    pressure_periodicity_gap(&traj.pressures)
}

/// [`periodicity_gap`] on rows of nodal pressures.
pub fn pressure_periodicity_gap(pressures: &[Vec<f64>]) -> f64 {
    let first = &pressures[0];
    let last = &pressures[pressures.len() - 1];
    let gap = first.iter().zip(last).fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
    let mut swing: f64 = 0.0;
    for j in 0..first.len() {
        let (lo, hi) = pressures
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
                (lo.min(p[j]), hi.max(p[j]))
            });
        swing = swing.max(hi - lo);
    }
    if swing > 0.0 {
        gap / swing
    } else if gap == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn constant(v: f64) -> TimeSeries {
        TimeSeries::new(vec![0.0, 10.0], vec![vec![v], vec![v]]).unwrap()
    }

    #[test]
    fn identical_series_give_zero() {
        let a = TimeSeries::new(
            vec![0.0, 1.0, 3.0],
            vec![vec![1.0, 2.0], vec![1.5, 2.5], vec![0.5, 4.0]],
        )
        .unwrap();
        assert_eq!(relative_l2(&a, &a, 3.0).unwrap(), 0.0);
        assert_eq!(relative_max(&a, &a, 3.0).unwrap(), 0.0);
    }

    #[test]
    fn constant_offset_gives_two_percent() {
        assert_relative_eq!(
            relative_l2(&constant(2.02), &constant(1.98), 10.0).unwrap(),
            2.0,
            max_relative = 1e-12
        );
    }

    #[test]
    fn single_point_gives_twenty_percent() {
        let a = TimeSeries::new(vec![0.0], vec![vec![1.1]]).unwrap();
        let b = TimeSeries::new(vec![0.0], vec![vec![0.9]]).unwrap();
        assert_relative_eq!(relative_max(&a, &b, 1.0).unwrap(), 20.0, max_relative = 1e-12);
    }

    #[test]
    fn vanishing_mean_is_located() {
        let a = TimeSeries::new(vec![0.0, 5.0], vec![vec![1.0], vec![-1.0]]).unwrap();
        let b = TimeSeries::new(vec![0.0, 5.0], vec![vec![1.0], vec![1.0]]).unwrap();
        match relative_max(&a, &b, 5.0) {
            Err(Error::VanishingMean { index: 0, time }) => assert_eq!(time, 5.0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn merged_grid_uses_both_sample_sets() {
        // a is linear, b is sampled at a midpoint where a has no sample
        let a = TimeSeries::new(vec![0.0, 2.0], vec![vec![1.0], vec![1.0]]).unwrap();
        let b = TimeSeries::new(vec![0.0, 1.0, 2.0], vec![vec![1.0], vec![3.0], vec![1.0]]).unwrap();
        // relative difference at t = 1 is 2(1−3)/4 = −1 → 100 %
        assert_relative_eq!(relative_max(&a, &b, 2.0).unwrap(), 100.0);
        // trapezoid of r² = [0, 1, 0] over unit steps gives 1, mean 1/2
        assert_relative_eq!(
            relative_l2(&a, &b, 2.0).unwrap(),
            100.0 * 0.5f64.sqrt(),
            max_relative = 1e-12
        );
    }

    fn series_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (2usize..12).prop_flat_map(|n| {
            (
                proptest::collection::vec(0.5f64..2.0, n),
                proptest::collection::vec(0.5f64..2.0, n),
            )
        })
    }

    fn to_series(v: &[f64]) -> TimeSeries {
        TimeSeries::new(
            (0..v.len()).map(|i| i as f64).collect(),
            v.iter().map(|&x| vec![x]).collect(),
        )
        .unwrap()
    }

    proptest! {
        #[test]
        fn metrics_are_symmetric((a, b) in series_strategy()) {
            let (sa, sb) = (to_series(&a), to_series(&b));
            let h = (a.len() - 1) as f64;
            prop_assert!((relative_l2(&sa, &sb, h).unwrap() - relative_l2(&sb, &sa, h).unwrap()).abs() <= 1e-12);
            prop_assert_eq!(relative_max(&sa, &sb, h).unwrap(), relative_max(&sb, &sa, h).unwrap());
        }

        #[test]
        fn metrics_are_scale_invariant((a, b) in series_strategy(), k in 1e-3f64..1e3) {
            let (sa, sb) = (to_series(&a), to_series(&b));
            let ka: Vec<f64> = a.iter().map(|x| x * k).collect();
            let kb: Vec<f64> = b.iter().map(|x| x * k).collect();
            let (ska, skb) = (to_series(&ka), to_series(&kb));
            let h = (a.len() - 1) as f64;
            let l2 = relative_l2(&sa, &sb, h).unwrap();
            prop_assert!((l2 - relative_l2(&ska, &skb, h).unwrap()).abs() <= 1e-9 * l2.max(1.0));
            let mx = relative_max(&sa, &sb, h).unwrap();
            prop_assert!((mx - relative_max(&ska, &skb, h).unwrap()).abs() <= 1e-9 * mx.max(1.0));
        }

        #[test]
        fn max_dominates_average_for_one_series((a, b) in series_strategy()) {
            let (sa, sb) = (to_series(&a), to_series(&b));
            let h = (a.len() - 1) as f64;
            prop_assert!(relative_max(&sa, &sb, h).unwrap() + 1e-9 >= relative_l2(&sa, &sb, h).unwrap());
        }
    }
}
