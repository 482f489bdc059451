//! Python bindings: analytics, Monte-Carlo validation, grid search and
//! training.

#[pyo3::pymodule]
mod harqopt {
    use harq::analytics::{self, ChannelParams, LinkConfig, PowerPolicy, Scheme};
    use harq::mc::{self, McConfig};
    use harq::oracle::{self, GridSpec};
    use harq::trainer::{self, RhoDistribution, TrainConfig, TrainState};
    use harq::Error;
    use pyo3::exceptions::{PyRuntimeError, PyValueError};
    use pyo3::prelude::*;

    fn to_py(e: Error) -> PyErr {
        match e {
            Error::Config(_) | Error::Domain(_) | Error::ShapeMismatch { .. } => {
                PyValueError::new_err(e.to_string())
            }
            _ => PyRuntimeError::new_err(e.to_string()),
        }
    }

    fn scheme(s: &str) -> PyResult<Scheme> {
        s.parse().map_err(to_py)
    }

    fn link(pbar_dbw: f64, epsilon: f64, rate: f64) -> LinkConfig {
        LinkConfig {
            epsilon,
            rate,
            ..LinkConfig::default().with_budget(pbar_dbw)
        }
    }

    /// Performance of one power allocation under the asymptotic model.
    #[pyclass(get_all, frozen, skip_from_py_object)]
    #[derive(Clone)]
    struct Report {
        outage_profile: Vec<f64>,
        eta: f64,
        tau: f64,
        p_avg: f64,
        feasible: bool,
    }

    #[pymethods]
    impl Report {
        fn __repr__(&self) -> String {
            format!(
                "Report(tau={:.6e}, outage={:.3e}, p_avg={:.4}, feasible={})",
                self.tau,
                self.outage_profile.last().copied().unwrap_or(0.0),
                self.p_avg,
                if self.feasible { "True" } else { "False" }
            )
        }
    }

    impl From<analytics::PerformanceReport> for Report {
        fn from(r: analytics::PerformanceReport) -> Self {
            Self {
                feasible: r.feasible(),
                outage_profile: r.outage_profile,
                eta: r.eta,
                tau: r.tau,
                p_avg: r.p_avg,
            }
        }
    }

    #[pyfunction]
    #[pyo3(signature = (rho, k, delta = 1))]
    fn correlation_factor(rho: f64, k: usize, delta: u32) -> PyResult<f64> {
        let params = ChannelParams::uniform(k, rho, delta).map_err(to_py)?;
        analytics::correlation_factor(&params, k).map_err(to_py)
    }

    #[pyfunction]
    fn g_function(rate: f64, k: usize) -> f64 {
        analytics::g_function(rate, k)
    }

    /// Evaluate per-round powers (watts) for one scheme.
    #[pyfunction]
    #[pyo3(signature = (scheme_name, powers, rho, delta = 1, pbar_dbw = 15.0, epsilon = 1e-2, rate = 2.0))]
    fn evaluate(
        scheme_name: &str,
        powers: Vec<f64>,
        rho: f64,
        delta: u32,
        pbar_dbw: f64,
        epsilon: f64,
        rate: f64,
    ) -> PyResult<Report> {
        let params = ChannelParams::uniform(powers.len(), rho, delta).map_err(to_py)?;
        let policy = PowerPolicy::new(powers).map_err(to_py)?;
        analytics::evaluate(
            scheme(scheme_name)?,
            &params,
            &policy,
            &link(pbar_dbw, epsilon, rate),
        )
        .map(Report::from)
        .map_err(to_py)
    }

    /// Simulated outage after each round, as (mean, stderr) pairs.
    #[pyfunction]
    #[pyo3(signature = (scheme_name, powers, rho, trials, seed = 0, workers = 1, rate = 2.0, importance = false))]
    #[allow(clippy::too_many_arguments)]
    fn simulate_outage(
        py: Python<'_>,
        scheme_name: &str,
        powers: Vec<f64>,
        rho: f64,
        trials: u64,
        seed: u64,
        workers: usize,
        rate: f64,
        importance: bool,
    ) -> PyResult<Vec<(f64, f64)>> {
        let s = scheme(scheme_name)?;
        let params = ChannelParams::uniform(powers.len(), rho, 1).map_err(to_py)?;
        let policy = PowerPolicy::new(powers).map_err(to_py)?;
        let cfg = McConfig::new(trials, seed).with_workers(workers);
        let rows = py
            .detach(|| {
                if importance {
                    mc::estimate_profiles_is(&[s], &params, &policy, rate, &cfg)
                } else {
                    mc::estimate_profiles(&[s], &params, &policy, rate, &cfg)
                }
            })
            .map_err(to_py)?;
        Ok(rows[0].iter().map(|e| (e.mean, e.stderr)).collect())
    }

    /// Grid-search optimum: (powers, report).
    #[pyfunction]
    #[pyo3(signature = (scheme_name, rho, k = 3, pbar_dbw = 15.0, points = 40, epsilon = 1e-2))]
    fn grid_search(
        py: Python<'_>,
        scheme_name: &str,
        rho: f64,
        k: usize,
        pbar_dbw: f64,
        points: usize,
        epsilon: f64,
    ) -> PyResult<(Vec<f64>, Report)> {
        let s = scheme(scheme_name)?;
        let params = ChannelParams::uniform(k, rho, 1).map_err(to_py)?;
        let grid = GridSpec::around_budget(points, pbar_dbw).map_err(to_py)?;
        let l = link(pbar_dbw, epsilon, 2.0);
        let r = py
            .detach(|| oracle::grid_search(s, &params, &l, &grid))
            .map_err(to_py)?;
        Ok((r.policy.powers().to_vec(), r.report.into()))
    }

    /// A trained GCN power policy.
    #[pyclass(frozen)]
    struct Policy {
        state: TrainState,
        scheme: Scheme,
        template: ChannelParams,
        link: LinkConfig,
    }

    #[pymethods]
    impl Policy {
        /// Per-round powers in watts at correlation `rho`.
        fn powers(&self, rho: f64) -> PyResult<Vec<f64>> {
            self.state
                .policy_at(&self.template, rho, self.link.p_bar_watts())
                .map(|p| p.powers().to_vec())
                .map_err(to_py)
        }

        fn evaluate(&self, rho: f64) -> PyResult<Report> {
            trainer::evaluate_policy(&self.state, &self.template, &[rho], self.scheme, &self.link)
                .map(|mut v| v.pop().expect("one point").report.into())
                .map_err(to_py)
        }

        /// Batch-mean latency per iteration.
        fn tau_history(&self) -> Vec<f64> {
            self.state.history.iter().map(|r| r.mean_tau_s).collect()
        }

        #[getter]
        fn multipliers(&self) -> (f64, f64) {
            (self.state.duals.lambda, self.state.duals.upsilon)
        }
    }

    /// Train a policy with the default hyperparameters. `rho=None` trains on
    /// ρ ~ U[0, 1); a number trains at that fixed correlation.
    #[pyfunction]
    #[pyo3(signature = (scheme_name, pbar_dbw = 15.0, seed = 0, epochs = 500, rho = None, k = 3))]
    fn train(
        py: Python<'_>,
        scheme_name: &str,
        pbar_dbw: f64,
        seed: u64,
        epochs: usize,
        rho: Option<f64>,
        k: usize,
    ) -> PyResult<Policy> {
        let s = scheme(scheme_name)?;
        let template = ChannelParams::uniform(k, 0.0, 1).map_err(to_py)?;
        let l = LinkConfig::default().with_budget(pbar_dbw);
        let cfg = TrainConfig {
            seed,
            epochs,
            rho_distribution: rho.map_or(RhoDistribution::Uniform, RhoDistribution::Fixed),
            ..TrainConfig::default()
        };
        let state = py
            .detach(|| trainer::train(s, &template, &l, &cfg))
            .map_err(to_py)?;
        Ok(Policy {
            state,
            scheme: s,
            template,
            link: l,
        })
    }
}
