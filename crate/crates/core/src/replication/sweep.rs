//! Parameter sweeps and log-log trend fitting.

use alloc::vec::Vec;

use super::{run_replication, Metrics, ReplicationConfig, ReplicationError, Strategy};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "camelCase"))]
pub enum SweepAxis {
    Nodes,
    TxnRate,
}

impl SweepAxis {
    /// `base` with the swept parameter set to `x`.
    pub fn apply(self, base: &ReplicationConfig, x: f64) -> ReplicationConfig {
        let mut c = base.clone();
        match self {
            SweepAxis::Nodes => c.nodes = x as usize,
            SweepAxis::TxnRate => c.txn_rate = x,
        }
        c
    }
}

/// Seed-averaged metrics at one sweep value.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "camelCase"))]
pub struct SweepPoint {
    pub x: f64,
    pub runs: usize,
    pub concurrency: f64,
    pub deadlock_rate: f64,
    pub reconciliation_rate: f64,
    pub total_work: f64,
    pub stale_reads: f64,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "camelCase"))]
pub struct Sweep {
    pub strategy: Strategy,
    pub axis: SweepAxis,
    pub points: Vec<SweepPoint>,
    /// Slope of log total work against log x.
    pub work_slope: Option<f64>,
    /// Slope of log deadlock rate against log x, or against log measured
    /// concurrency when sweeping the arrival rate.
    pub deadlock_slope: Option<f64>,
    pub reconciliation_slope: Option<f64>,
}

/// Least-squares slope of `ln y` on `ln x`, ignoring non-positive points.
/// `None` unless two distinct positive `x` values remain.
pub fn loglog_slope(points: &[(f64, f64)]) -> Option<f64> {
    let pts: Vec<(f64, f64)> =
        points.iter().filter(|(x, y)| *x > 0.0 && *y > 0.0).map(|(x, y)| (libm::log(*x), libm::log(*y))).collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (pts.len() >= 2 && sxx > 1e-12).then(|| sxy / sxx)
}

/// Averages per-run metrics by sweep value and fits the trends.
pub fn summarize(strategy: Strategy, axis: SweepAxis, runs: &[(f64, Metrics)]) -> Sweep {
    let mut xs: Vec<f64> = runs.iter().map(|r| r.0).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    let points: Vec<SweepPoint> = xs
        .iter()
        .map(|&x| {
            let ms: Vec<&Metrics> = runs.iter().filter(|r| r.0 == x).map(|r| &r.1).collect();
            let n = ms.len() as f64;
            let mean = |f: &dyn Fn(&Metrics) -> f64| ms.iter().map(|m| f(m)).sum::<f64>() / n;
            SweepPoint {
                x,
                runs: ms.len(),
                concurrency: mean(&|m| m.concurrency),
                deadlock_rate: mean(&Metrics::deadlock_rate),
                reconciliation_rate: mean(&Metrics::reconciliation_rate),
                total_work: mean(&|m| m.total_work as f64),
                stale_reads: mean(&|m| m.stale_reads as f64),
            }
        })
        .collect();
    let fit = |f: &dyn Fn(&SweepPoint) -> (f64, f64)| loglog_slope(&points.iter().map(f).collect::<Vec<_>>());
    Sweep {
        strategy,
        axis,
        work_slope: fit(&|p| (p.x, p.total_work)),
        deadlock_slope: match axis {
            SweepAxis::Nodes => fit(&|p| (p.x, p.deadlock_rate)),
            SweepAxis::TxnRate => fit(&|p| (p.concurrency, p.deadlock_rate)),
        },
        reconciliation_slope: fit(&|p| (p.x, p.reconciliation_rate)),
        points,
    }
}

/// Runs `base` at every sweep value for every seed.
pub fn scaling_sweep(
    base: &ReplicationConfig,
    axis: SweepAxis,
    values: &[f64],
    seeds: &[u64],
) -> Result<(Sweep, Vec<(ReplicationConfig, Metrics)>), ReplicationError> {
    if values.len() < 3 {
        return Err(ReplicationError::Config("a sweep needs at least three values"));
    }
    if seeds.is_empty() {
        return Err(ReplicationError::Config("a sweep needs at least one seed"));
    }
    let mut rows = Vec::new();
    for &x in values {
        for &seed in seeds {
            let cfg = ReplicationConfig { seed, ..axis.apply(base, x) };
            let m = run_replication(&cfg)?.metrics;
            rows.push((cfg, m));
        }
    }
    let tagged: Vec<(f64, Metrics)> =
        rows.iter().map(|(c, m)| (if axis == SweepAxis::Nodes { c.nodes as f64 } else { c.txn_rate }, m.clone())).collect();
    Ok((summarize(base.strategy, axis, &tagged), rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_power_law() {
        let pts: Vec<(f64, f64)> = [1.0, 2.0, 4.0, 8.0].iter().map(|&x: &f64| (x, 3.0 * x * x)).collect();
        assert!((loglog_slope(&pts).unwrap() - 2.0).abs() < 1e-9);
        assert_eq!(loglog_slope(&[(1.0, 1.0)]), None);
        assert_eq!(loglog_slope(&[(1.0, 0.0), (2.0, 0.0)]), None);
    }

    #[test]
    fn too_few_values() {
        let r = scaling_sweep(&ReplicationConfig::default(), SweepAxis::Nodes, &[2.0, 4.0], &[0]);
        assert!(r.is_err());
    }
}
