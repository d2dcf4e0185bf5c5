use crate::dynamics::{BoundaryValues, Gas};
use crate::error::{Error, Result};
use crate::network::{Network, NodeKind, RefinedNetwork};

/// Periodic, piecewise-linear vector-valued time series.
#[derive(Debug, Clone, PartialEq)]
pub struct PeriodicProfile {
    sample_times: Vec<f64>,
    values: Vec<Vec<f64>>,
    period: f64,
}

impl PeriodicProfile {
    pub fn new(sample_times: Vec<f64>, values: Vec<Vec<f64>>, period: f64) -> Result<Self> {
        if !(period > 0.0 && period.is_finite()) {
            return Err(Error::InvalidProfile(format!("period must be positive, got {period}")));
        }
        if sample_times.is_empty() || sample_times.len() != values.len() {
            return Err(Error::InvalidProfile(format!(
                "{} sample times for {} value vectors",
                sample_times.len(),
                values.len()
            )));
        }
        if sample_times[0] != 0.0 {
            return Err(Error::InvalidProfile("sample times must start at 0".into()));
        }
        if sample_times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidProfile("sample times must be strictly increasing".into()));
        }
        if *sample_times.last().unwrap() >= period {
            return Err(Error::InvalidProfile(format!(
                "sample time {} is not before the period {period}",
                sample_times.last().unwrap()
            )));
        }
        let dim = values[0].len();
        if values.iter().any(|v| v.len() != dim) {
            return Err(Error::InvalidProfile("value vectors differ in length".into()));
        }
        if values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidProfile("non-finite profile value".into()));
        }
        Ok(Self {
            sample_times,
            values,
            period,
        })
    }

    pub fn constant(value: Vec<f64>, period: f64) -> Result<Self> {
        Self::new(vec![0.0], vec![value], period)
    }

    /// Samples `f` on `n` uniform points of `[0, period)`.
    pub fn sampled(n: usize, period: f64, f: impl Fn(f64) -> Vec<f64>) -> Result<Self> {
        let times: Vec<f64> = (0..n).map(|i| period * i as f64 / n as f64).collect();
        let values = times.iter().map(|&t| f(t)).collect();
        Self::new(times, values, period)
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    pub fn dim(&self) -> usize {
        self.values[0].len()
    }

    pub fn sample_times(&self) -> &[f64] {
        &self.sample_times
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn interpolate(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.interpolate_into(t, &mut out);
        out
    }

    pub fn interpolate_into(&self, t: f64, out: &mut [f64]) {
        let tau = t.rem_euclid(self.period);
        // index of the last sample at or before tau
        let i = self.sample_times.partition_point(|&s| s <= tau).max(1) - 1;
        let (t0, v0) = (self.sample_times[i], &self.values[i]);
        let (t1, v1) = match self.sample_times.get(i + 1) {
            Some(&t1) => (t1, &self.values[i + 1]),
            None => (self.period, &self.values[0]),
        };
        let theta = (tau - t0) / (t1 - t0);
        for (o, (a, b)) in out.iter_mut().zip(v0.iter().zip(v1)) {
            *o = if theta == 0.0 { *a } else { a + theta * (b - a) };
        }
    }

    /// Kinks of the interpolant inside `[0, horizon]`, repeated every period.
    pub fn breakpoints(&self, horizon: f64) -> Vec<f64> {
        if self.sample_times.len() < 2 {
            return Vec::new();
        }
        let mut out = Vec::new();
        let mut base = 0.0;
        while base <= horizon {
            out.extend(
                self.sample_times
                    .iter()
                    .map(|s| base + s)
                    .filter(|&t| t > 0.0 && t < horizon),
            );
            base += self.period;
        }
        out
    }

    /// Time average of one component over a period.
    pub fn mean(&self, component: usize) -> f64 {
        let n = self.sample_times.len();
        let mut area = 0.0;
        for i in 0..n {
            let t0 = self.sample_times[i];
            let t1 = self.sample_times.get(i + 1).copied().unwrap_or(self.period);
            let v0 = self.values[i][component];
            let v1 = self.values[(i + 1) % n][component];
            area += 0.5 * (v0 + v1) * (t1 - t0);
        }
        area / self.period
    }

    fn ensure_period(&self, horizon: f64) -> Result<()> {
        if (self.period - horizon).abs() > 1e-9 * horizon.max(1.0) {
            return Err(Error::PeriodMismatch {
                expected: horizon,
                found: self.period,
            });
        }
        Ok(())
    }
}

/// How the supply state is prescribed.
#[derive(Debug, Clone, PartialEq)]
pub enum SupplyProfile {
    /// Pressure (Pa) and hydrogen mass fraction per supply node.
    PressureFraction {
        pressure: PeriodicProfile,
        alpha2: PeriodicProfile,
    },
    /// Constituent densities per supply node.
    Densities { s1: PeriodicProfile, s2: PeriodicProfile },
}

/// Supply and withdrawal boundary data on a refined network.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryProfiles {
    pub supply: SupplyProfile,
    /// Withdrawal mass flux per withdrawal node, kg/(m²·s).
    pub withdrawal: PeriodicProfile,
}

impl BoundaryProfiles {
    pub fn at(&self, t: f64, gas: &Gas) -> Result<BoundaryValues> {
        let w = self.withdrawal.interpolate(t);
        match &self.supply {
            SupplyProfile::PressureFraction { pressure, alpha2 } => {
                BoundaryValues::from_pressure(&pressure.interpolate(t), &alpha2.interpolate(t), gas, w)
            }
            SupplyProfile::Densities { s1, s2 } => {
                BoundaryValues::from_densities(s1.interpolate(t), s2.interpolate(t), w)
            }
        }
    }

    pub fn period(&self) -> f64 {
        self.withdrawal.period()
    }

    fn profiles(&self) -> Vec<&PeriodicProfile> {
        let mut v = vec![&self.withdrawal];
        match &self.supply {
            SupplyProfile::PressureFraction { pressure, alpha2 } => v.extend([pressure, alpha2]),
            SupplyProfile::Densities { s1, s2 } => v.extend([s1, s2]),
        }
        v
    }

    pub fn breakpoints(&self, horizon: f64) -> Vec<f64> {
        self.profiles()
            .into_iter()
            .flat_map(|p| p.breakpoints(horizon))
            .collect()
    }

    pub fn validate(&self, num_supply: usize, num_withdrawal: usize, horizon: f64) -> Result<()> {
        for p in self.profiles() {
            p.ensure_period(horizon)?;
        }
        if self.withdrawal.dim() != num_withdrawal {
            return Err(Error::InvalidProfile(format!(
                "withdrawal profile has {} entries for {num_withdrawal} withdrawal nodes",
                self.withdrawal.dim()
            )));
        }
        let supply_dims = match &self.supply {
            SupplyProfile::PressureFraction { pressure, alpha2 } => [pressure.dim(), alpha2.dim()],
            SupplyProfile::Densities { s1, s2 } => [s1.dim(), s2.dim()],
        };
        if supply_dims.iter().any(|&d| d != num_supply) {
            return Err(Error::InvalidProfile(format!(
                "supply profiles must have {num_supply} entries"
            )));
        }
        Ok(())
    }

    /// Maps withdrawal profiles given on the original network's withdrawal
    /// nodes onto a refined network; auxiliary nodes withdraw nothing.
    pub fn expand(&self, parent: &Network, refined: &RefinedNetwork) -> Result<BoundaryProfiles> {
        let parent_ids: Vec<u32> = parent
            .nodes()
            .iter()
            .filter(|n| n.kind == NodeKind::Withdrawal)
            .map(|n| n.id)
            .collect();
        if self.withdrawal.dim() != parent_ids.len() {
            return Err(Error::InvalidProfile(format!(
                "withdrawal profile has {} entries for {} withdrawal nodes",
                self.withdrawal.dim(),
                parent_ids.len()
            )));
        }
        let ns = refined.network.num_supply();
        let nw = refined.network.num_withdrawal();
        let slots = parent_ids
            .iter()
            .map(|&id| {
                refined
                    .node_for_parent(id)
                    .map(|i| i - ns)
                    .ok_or_else(|| Error::InvalidInput(format!("node {id} missing after refinement")))
            })
            .collect::<Result<Vec<_>>>()?;
        let values = self
            .withdrawal
            .values()
            .iter()
            .map(|v| {
                let mut out = vec![0.0; nw];
                for (&slot, &x) in slots.iter().zip(v) {
                    out[slot] = x;
                }
                out
            })
            .collect();
        Ok(BoundaryProfiles {
            supply: self.supply.clone(),
            withdrawal: PeriodicProfile::new(
                self.withdrawal.sample_times().to_vec(),
                values,
                self.withdrawal.period(),
            )?,
        })
    }
}

/// Actuator ratio profiles, one component per actuator.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlProfiles {
    pub ratios: PeriodicProfile,
}

impl ControlProfiles {
    pub fn unity(num_actuators: usize, period: f64) -> Result<Self> {
        Ok(Self {
            ratios: PeriodicProfile::constant(vec![1.0; num_actuators], period)?,
        })
    }

    pub fn at(&self, t: f64) -> Vec<f64> {
        self.ratios.interpolate(t)
    }

    pub fn num_actuators(&self) -> usize {
        self.ratios.dim()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    const DAY: f64 = 86_400.0;

    fn two_point() -> PeriodicProfile {
        PeriodicProfile::new(vec![0.0, DAY / 2.0], vec![vec![1.0], vec![2.0]], DAY).unwrap()
    }

    #[test]
    fn interpolation_examples() {
        let p = two_point();
        assert_eq!(p.interpolate(DAY / 4.0), vec![1.5]);
        assert_eq!(p.interpolate(DAY), vec![1.0]);
        assert_eq!(p.interpolate(0.75 * DAY), vec![1.5]);
        assert_eq!(p.interpolate(DAY / 2.0), vec![2.0]);
        assert_eq!(p.interpolate(-DAY / 4.0), vec![1.5]);
        assert_relative_eq!(p.mean(0), 1.5);
    }

    #[test]
    fn rejects_malformed_profiles() {
        assert!(PeriodicProfile::new(vec![1.0], vec![vec![1.0]], DAY).is_err());
        assert!(PeriodicProfile::new(vec![0.0, 0.0], vec![vec![1.0], vec![1.0]], DAY).is_err());
        assert!(PeriodicProfile::new(vec![0.0, DAY], vec![vec![1.0], vec![1.0]], DAY).is_err());
        assert!(PeriodicProfile::new(vec![0.0], vec![vec![1.0], vec![1.0]], DAY).is_err());
        assert!(PeriodicProfile::new(vec![0.0], vec![vec![1.0]], 0.0).is_err());
    }

    #[test]
    fn period_mismatch_is_reported() {
        let b = BoundaryProfiles {
            supply: SupplyProfile::Densities {
                s1: PeriodicProfile::constant(vec![40.0], DAY).unwrap(),
                s2: PeriodicProfile::constant(vec![0.0], DAY).unwrap(),
            },
            withdrawal: PeriodicProfile::constant(vec![1.0], DAY / 2.0).unwrap(),
        };
        assert!(matches!(b.validate(1, 1, DAY), Err(Error::PeriodMismatch { .. })));
    }

    proptest! {
        #[test]
        fn interpolation_is_periodic_and_bounded(
            vals in prop::collection::vec(-10.0f64..10.0, 1..8),
            t in -2.0e5f64..2.0e5,
        ) {
            let n = vals.len();
            let p = PeriodicProfile::sampled(n, DAY, |s| vec![vals[(s / DAY * n as f64).round() as usize % n]]).unwrap();
            let a = p.interpolate(t)[0];
            let b = p.interpolate(t + DAY)[0];
            prop_assert!((a - b).abs() <= 1e-9);
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(a >= lo - 1e-12 && a <= hi + 1e-12);
        }

        #[test]
        fn interpolation_reproduces_samples(vals in prop::collection::vec(-10.0f64..10.0, 1..8)) {
            let n = vals.len();
            let p = PeriodicProfile::new(
                (0..n).map(|i| i as f64 * DAY / n as f64).collect(),
                vals.iter().map(|&v| vec![v]).collect(),
                DAY,
            ).unwrap();
            for (t, v) in p.sample_times().iter().zip(&vals) {
                prop_assert_eq!(p.interpolate(*t)[0], *v);
            }
        }
    }
}
