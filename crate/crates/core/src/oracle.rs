//! Brute-force grid search over per-round powers for small K.
//!
//! Serves as a ground-truth optimum of the latency problem under the
//! asymptotic outage model, against which the learned policy is scored.

use std::cmp::Ordering;

use rayon::prelude::*;

use crate::analytics::{
    dbw_to_watts, evaluate, outage_profile, report_from_profile, ChannelParams, LinkConfig,
    PerformanceReport, PowerPolicy, Scheme,
};
use crate::error::{Error, Result};

/// Largest number of rounds the exhaustive search accepts.
pub const MAX_ROUNDS: usize = 4;

/// Geometric per-axis power grid.
///
/// Axis points are p_min·r^{i/n} for i = 1..=n with r = p_max/p_min, so the
/// top point is p_max and grids whose sizes divide one another are nested.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub points_per_axis: usize,
    pub p_min: f64,
    pub p_max: f64,
}

impl GridSpec {
    pub fn new(points_per_axis: usize, p_min: f64, p_max: f64) -> Result<Self> {
        let g = Self {
            points_per_axis,
            p_min,
            p_max,
        };
        g.validate()?;
        Ok(g)
    }

    /// Grid spanning p̄ − 20 dB to p̄ + 3 dB.
    pub fn around_budget(points_per_axis: usize, p_bar_dbw: f64) -> Result<Self> {
        Self::new(
            points_per_axis,
            dbw_to_watts(p_bar_dbw - 20.0),
            dbw_to_watts(p_bar_dbw + 3.0),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.points_per_axis < 2 {
            return Err(Error::Config(format!(
                "grid needs at least 2 points per axis, got {}",
                self.points_per_axis
            )));
        }
        if !(self.p_min > 0.0 && self.p_max >= self.p_min && self.p_max.is_finite()) {
            return Err(Error::Config(format!(
                "grid range must satisfy 0 < p_min <= p_max, got [{}, {}]",
                self.p_min, self.p_max
            )));
        }
        Ok(())
    }

    pub fn axis(&self) -> Vec<f64> {
        let n = self.points_per_axis as f64;
        let r = self.p_max / self.p_min;
        (1..=self.points_per_axis)
            .map(|i| {
                if i == self.points_per_axis {
                    self.p_max
                } else {
                    self.p_min * r.powf(i as f64 / n)
                }
            })
            .collect()
    }
}

/// Slack allowed when auditing a learned policy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AuditTolerance {
    /// Outage may reach this multiple of ε.
    pub outage_factor: f64,
    /// Average power may reach this multiple of p̄.
    pub power_factor: f64,
}

impl AuditTolerance {
    pub const EXACT: Self = Self {
        outage_factor: 1.0,
        power_factor: 1.0,
    };
}

impl Default for AuditTolerance {
    fn default() -> Self {
        Self {
            outage_factor: 1.05,
            power_factor: 1.01,
        }
    }
}

/// Both constraints hold exactly. Inputs the model cannot evaluate count as
/// infeasible.
pub fn is_feasible(
    scheme: Scheme,
    params: &ChannelParams,
    policy: &PowerPolicy,
    link: &LinkConfig,
) -> bool {
    evaluate(scheme, params, policy, link).is_ok_and(|r| r.feasible())
}

/// Constraint check with slack on both sides.
pub fn audit(report: &PerformanceReport, link: &LinkConfig, tol: AuditTolerance) -> bool {
    report.outage_k() <= tol.outage_factor * link.epsilon
        && report.p_avg <= tol.power_factor * link.p_bar_watts()
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    pub policy: PowerPolicy,
    pub report: PerformanceReport,
    /// Per-axis grid indices of the optimum.
    pub index: Vec<usize>,
    pub evaluated: usize,
    pub feasible_points: usize,
}

impl OracleResult {
    pub fn tau(&self) -> f64 {
        self.report.tau
    }
}

#[derive(Clone, Copy)]
struct Candidate {
    tau: f64,
    p_avg: f64,
    flat: usize,
}

impl Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.tau
            .total_cmp(&other.tau)
            .then(self.p_avg.total_cmp(&other.p_avg))
            .then(self.flat.cmp(&other.flat))
    }
}

fn unflatten(mut flat: usize, n: usize, k: usize) -> Vec<usize> {
    let mut idx = vec![0; k];
    for slot in idx.iter_mut().rev() {
        *slot = flat % n;
        flat /= n;
    }
    idx
}

/// Exhaustive scan of the K-dimensional grid. Returns the feasible point
/// with the smallest τ, ties going to smaller p_avg and then to the
/// lexicographically smallest index.
pub fn grid_search(
    scheme: Scheme,
    params: &ChannelParams,
    link: &LinkConfig,
    grid: &GridSpec,
) -> Result<OracleResult> {
    let k = params.k();
    if k > MAX_ROUNDS {
        return Err(Error::ComplexityGuard {
            k,
            limit: MAX_ROUNDS,
        });
    }
    params.validate()?;
    link.validate()?;
    grid.validate()?;
    let axis = grid.axis();
    let n = axis.len();
    let total = n.pow(k as u32);
    let p_bar = link.p_bar_watts();

    let powers_at =
        |flat: usize| -> Vec<f64> { unflatten(flat, n, k).into_iter().map(|i| axis[i]).collect() };
    let (best, feasible_points) = (0..total)
        .into_par_iter()
        .map(|flat| {
            let policy = PowerPolicy::from_raw(powers_at(flat));
            let profile = outage_profile(scheme, params, &policy, link.rate).ok()?;
            let rep = report_from_profile(&policy, profile, link).ok()?;
            (rep.outage_ok && rep.p_avg <= p_bar).then_some(Candidate {
                tau: rep.tau,
                p_avg: rep.p_avg,
                flat,
            })
        })
        .fold(
            || (None::<Candidate>, 0usize),
            |(best, count), c| match c {
                Some(c) => (Some(min_candidate(best, c)), count + 1),
                None => (best, count),
            },
        )
        .reduce(
            || (None, 0),
            |(a, ca), (b, cb)| {
                let best = match (a, b) {
                    (Some(a), Some(b)) => Some(min_candidate(Some(a), b)),
                    (a, b) => a.or(b),
                };
                (best, ca + cb)
            },
        );
    let best = best.ok_or(Error::Infeasible)?;
    let policy = PowerPolicy::from_raw(powers_at(best.flat));
    let report = evaluate(scheme, params, &policy, link)?;
    Ok(OracleResult {
        policy,
        report,
        index: unflatten(best.flat, n, k),
        evaluated: total,
        feasible_points,
    })
}

fn min_candidate(best: Option<Candidate>, c: Candidate) -> Candidate {
    match best {
        Some(b) if b.cmp(&c) != Ordering::Greater => b,
        _ => c,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn link(p_bar_dbw: f64, epsilon: f64) -> LinkConfig {
        LinkConfig {
            epsilon,
            ..LinkConfig::default().with_budget(p_bar_dbw)
        }
    }

    #[test]
    fn grid_validation() {
        assert!(GridSpec::new(1, 1.0, 2.0).is_err());
        assert!(GridSpec::new(4, 0.0, 2.0).is_err());
        assert!(GridSpec::new(4, 3.0, 2.0).is_err());
        assert!(GridSpec::new(2, 2.0, 2.0).is_ok());
    }

    #[test]
    fn axis_is_geometric_and_nested() {
        let g = GridSpec::new(4, 1.0, 16.0).unwrap();
        let a = g.axis();
        assert_eq!(a.len(), 4);
        assert_eq!(a[3], 16.0);
        for w in a.windows(2) {
            assert!((w[1] / w[0] - 2.0).abs() < 1e-12);
        }
        let fine = GridSpec::new(8, 1.0, 16.0).unwrap().axis();
        for (i, p) in a.iter().enumerate() {
            assert_eq!(*p, fine[2 * i + 1]);
        }
    }

    #[test]
    fn feasibility_examples() {
        let params = ChannelParams::uniform(1, 0.0, 1).unwrap();
        let l = link(15.0, 1e-2);
        let pb = l.p_bar_watts();
        // Single round at the full budget: P = 3/31.62 ≈ 0.0949.
        let full = PowerPolicy::new(vec![pb]).unwrap();
        assert!(!is_feasible(
            Scheme::IncrementalRedundancy,
            &params,
            &full,
            &l
        ));
        assert!(is_feasible(
            Scheme::IncrementalRedundancy,
            &params,
            &full,
            &link(15.0, 0.1)
        ));
        // Huge powers meet reliability but not the budget.
        let p3 = ChannelParams::uniform(3, 0.5, 1).unwrap();
        let huge = PowerPolicy::new(vec![1e4; 3]).unwrap();
        let r = evaluate(Scheme::IncrementalRedundancy, &p3, &huge, &l).unwrap();
        assert!(r.outage_ok && !r.power_ok);
        assert!(!is_feasible(Scheme::IncrementalRedundancy, &p3, &huge, &l));
        let tiny = PowerPolicy::new(vec![1e-2; 3]).unwrap();
        let r = evaluate(Scheme::IncrementalRedundancy, &p3, &tiny, &l).unwrap();
        assert!(r.power_ok && !r.outage_ok);
        assert!(!is_feasible(Scheme::IncrementalRedundancy, &p3, &tiny, &l));
    }

    #[test]
    fn audit_tolerances() {
        let params = ChannelParams::uniform(1, 0.0, 1).unwrap();
        let l = link(15.0, 0.1);
        let pb = l.p_bar_watts();
        let over = PowerPolicy::new(vec![pb * 1.005]).unwrap();
        let r = evaluate(Scheme::TypeI, &params, &over, &l).unwrap();
        assert!(!r.feasible());
        assert!(audit(&r, &l, AuditTolerance::default()));
        assert!(!audit(&r, &l, AuditTolerance::EXACT));
    }

    #[test]
    fn single_round_takes_largest_power_within_budget() {
        let params = ChannelParams::uniform(1, 0.0, 1).unwrap();
        let l = link(15.0, 0.2);
        let g = GridSpec::around_budget(40, 15.0).unwrap();
        let res = grid_search(Scheme::ChaseCombining, &params, &l, &g).unwrap();
        let best = g
            .axis()
            .into_iter()
            .filter(|p| *p <= l.p_bar_watts())
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(res.policy.powers(), &[best]);
        assert_eq!(res.evaluated, 40);
    }

    #[test]
    fn vanishing_budget_is_infeasible() {
        let params = ChannelParams::uniform(3, 0.5, 1).unwrap();
        let l = link(-60.0, 1e-6);
        let g = GridSpec::around_budget(10, -60.0).unwrap();
        assert!(matches!(
            grid_search(Scheme::IncrementalRedundancy, &params, &l, &g),
            Err(Error::Infeasible)
        ));
    }

    #[test]
    fn complexity_guard() {
        let params = ChannelParams::uniform(5, 0.5, 1).unwrap();
        let g = GridSpec::around_budget(2, 15.0).unwrap();
        assert!(matches!(
            grid_search(Scheme::TypeI, &params, &link(15.0, 1e-2), &g),
            Err(Error::ComplexityGuard { k: 5, limit: 4 })
        ));
    }

    #[test]
    fn refinement_never_increases_latency() {
        let params = ChannelParams::uniform(3, 0.5, 1).unwrap();
        let l = link(15.0, 1e-2);
        let mut prev = f64::INFINITY;
        for n in [10, 20, 40] {
            let g = GridSpec::around_budget(n, 15.0).unwrap();
            let res = grid_search(Scheme::IncrementalRedundancy, &params, &l, &g).unwrap();
            assert!(res.tau() <= prev, "{n}: {} > {prev}", res.tau());
            assert!(is_feasible(
                Scheme::IncrementalRedundancy,
                &params,
                &res.policy,
                &l
            ));
            prev = res.tau();
        }
    }

    #[test]
    fn result_matches_serial_scan() {
        let params = ChannelParams::uniform(2, 0.3, 1).unwrap();
        let l = link(15.0, 1e-2);
        let g = GridSpec::around_budget(12, 15.0).unwrap();
        let res = grid_search(Scheme::IncrementalRedundancy, &params, &l, &g).unwrap();
        let axis = g.axis();
        let mut best: Option<(f64, f64, [usize; 2])> = None;
        for i in 0..12 {
            for j in 0..12 {
                let pol = PowerPolicy::from_raw(vec![axis[i], axis[j]]);
                let r = evaluate(Scheme::IncrementalRedundancy, &params, &pol, &l).unwrap();
                if !r.feasible() {
                    continue;
                }
                let better = match best {
                    None => true,
                    Some((t, p, _)) => (r.tau, r.p_avg) < (t, p),
                };
                if better {
                    best = Some((r.tau, r.p_avg, [i, j]));
                }
            }
        }
        assert_eq!(res.index, best.unwrap().2.to_vec());
    }

    #[test]
    fn ties_resolve_deterministically() {
        // Every point meets the budget and the reliability target is loose,
        // so many points share the latency floor to machine precision.
        let params = ChannelParams::uniform(2, 0.0, 1).unwrap();
        let l = LinkConfig {
            epsilon: 0.9,
            ..LinkConfig::default().with_budget(80.0)
        };
        let g = GridSpec::new(6, 1e6, 1e7).unwrap();
        let a = grid_search(Scheme::TypeI, &params, &l, &g).unwrap();
        let b = grid_search(Scheme::TypeI, &params, &l, &g).unwrap();
        assert_eq!(a.index, b.index);
        assert_eq!(a.feasible_points, 36);
    }
}
