//! Primal-dual training of the GCN policy.
//!
//! Each iteration draws a mini-batch of correlation coefficients, takes an
//! Adam step on the batch-mean Lagrangian gradient and a projected
//! sub-gradient step on the two multipliers (outage and power).

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::analytics::{
    correlation_factor, evaluate, scheme_coefficient, ChannelParams, LinkConfig, PerformanceReport,
    PowerPolicy, Scheme, OUTAGE_CLAMP,
};
use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::gcn::{self, GcnWeights, LayerSpec};
use crate::graph::{adjacency, Normalization};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Multipliers {
    pub lambda: f64,
    pub upsilon: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RhoDistribution {
    /// ρ ~ U[0, 1).
    Uniform,
    /// Every sample uses the same ρ.
    Fixed(f64),
}

/// Unit of the latency term inside the Lagrangian.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatencyUnit {
    Seconds,
    Milliseconds,
}

impl LatencyUnit {
    pub fn factor(self) -> f64 {
        match self {
            LatencyUnit::Seconds => 1.0,
            LatencyUnit::Milliseconds => 1e3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub dataset_size: usize,
    pub batch_size: usize,
    pub lr_weights: f64,
    pub lr_lambda: f64,
    pub lr_upsilon: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_hat: f64,
    pub rho_distribution: RhoDistribution,
    pub seed: u64,
    pub lambda0: f64,
    pub upsilon0: f64,
    pub latency_unit: LatencyUnit,
    /// Samples with τ above this multiple of the batch-median τ are left
    /// out of the weight gradient.
    pub guard_factor: f64,
    /// Keep λ and υ at their initial values.
    pub freeze_duals: bool,
    pub layer_spec: LayerSpec,
    pub normalization: Normalization,
    /// Worker threads for per-sample gradients; 0 uses the global pool.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            dataset_size: 1000,
            batch_size: 50,
            lr_weights: 5e-4,
            lr_lambda: 1e-3,
            lr_upsilon: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps_hat: 1e-8,
            rho_distribution: RhoDistribution::Uniform,
            seed: 0,
            lambda0: 0.1,
            upsilon0: 1.0,
            latency_unit: LatencyUnit::Milliseconds,
            guard_factor: 2.0,
            freeze_duals: false,
            layer_spec: LayerSpec::default(),
            normalization: Normalization::Causal,
            threads: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr_weights", self.lr_weights),
            ("lr_lambda", self.lr_lambda),
            ("lr_upsilon", self.lr_upsilon),
            ("eps_hat", self.eps_hat),
            ("guard_factor", self.guard_factor),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 || self.batch_size > self.dataset_size {
            return Err(Error::Config(format!(
                "batch size {} must be in 1..={}",
                self.batch_size, self.dataset_size
            )));
        }
        if self.lambda0 < 0.0 || self.upsilon0 < 0.0 {
            return Err(Error::Config(
                "initial multipliers must be nonnegative".into(),
            ));
        }
        if let RhoDistribution::Fixed(r) = self.rho_distribution {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::Config(format!(
                    "fixed rho must lie in [0, 1), got {r}"
                )));
            }
        }
        self.layer_spec.validate()
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.dataset_size / self.batch_size
    }

    pub fn total_iterations(&self) -> usize {
        self.epochs * self.batches_per_epoch()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    /// Number of applied updates (rejected steps do not count).
    pub step: u64,
}

impl AdamState {
    pub fn zeros_like(weights: &[Matrix]) -> Self {
        let z: Vec<Matrix> = weights
            .iter()
            .map(|w| Matrix::zeros(w.rows(), w.cols()))
            .collect();
        Self {
            m: z.clone(),
            v: z,
            step: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryRecord {
    pub iter: usize,
    pub mean_tau_s: f64,
    pub mean_log_pout: f64,
    pub mean_pavg_w: f64,
    pub lambda: f64,
    pub upsilon: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub weights: GcnWeights,
    pub normalization: Normalization,
    pub duals: Multipliers,
    pub adam: AdamState,
    pub iteration: usize,
    /// Iterations whose weight step was skipped because every sample hit
    /// the divergence guard.
    pub rejected_steps: usize,
    pub history: Vec<HistoryRecord>,
}

impl TrainState {
    pub fn new(weights: GcnWeights, config: &TrainConfig) -> Self {
        let adam = AdamState::zeros_like(&weights.matrices);
        Self {
            weights,
            normalization: config.normalization,
            duals: Multipliers {
                lambda: config.lambda0,
                upsilon: config.upsilon0,
            },
            adam,
            iteration: 0,
            rejected_steps: 0,
            history: Vec::new(),
        }
    }

    pub fn policy_at(&self, template: &ChannelParams, rho: f64, p_bar: f64) -> Result<PowerPolicy> {
        let params = template.with_rho(rho)?;
        let adj = adjacency(&params, self.normalization)?;
        gcn::forward(&adj, &self.weights, p_bar)
    }

    pub fn checkpoint(&self) -> gcn::Checkpoint {
        gcn::Checkpoint {
            weights: self.weights.clone(),
            normalization: self.normalization,
        }
    }
}

/// Nodes of interest in a Lagrangian graph.
#[derive(Debug, Clone, Copy)]
pub struct LagrangianNodes {
    pub root: NodeId,
    pub tau_s: NodeId,
    pub log_pout: NodeId,
    pub p_avg: NodeId,
}

/// τ·unit + λ(log P_K − log ε) + υ(p_avg − p̄).
pub fn lagrangian_from_parts(
    tau_s: f64,
    log_pout: f64,
    p_avg: f64,
    link: &LinkConfig,
    duals: Multipliers,
    unit: LatencyUnit,
) -> f64 {
    tau_s * unit.factor()
        + duals.lambda * (log_pout - link.epsilon.ln())
        + duals.upsilon * (p_avg - link.p_bar_watts())
}

/// Lagrangian of a fixed policy with latency in seconds.
pub fn lagrangian(
    scheme: Scheme,
    params: &ChannelParams,
    link: &LinkConfig,
    policy: &PowerPolicy,
    duals: Multipliers,
) -> Result<f64> {
    let rep = evaluate(scheme, params, policy, link)?;
    Ok(lagrangian_from_parts(
        rep.tau,
        rep.outage_k().ln(),
        rep.p_avg,
        link,
        duals,
        LatencyUnit::Seconds,
    ))
}

/// Adds the Lagrangian of the K×1 power column `policy` to `graph`.
pub fn build_lagrangian(
    graph: &mut Graph,
    scheme: Scheme,
    params: &ChannelParams,
    link: &LinkConfig,
    policy: NodeId,
    duals: Multipliers,
    unit: LatencyUnit,
) -> Result<LagrangianNodes> {
    let k_max = params.k();
    let mut outages = Vec::with_capacity(k_max);
    let mut powers = Vec::with_capacity(k_max);
    let mut prod: Option<NodeId> = None;
    let mut xi_prod = 1.0;
    for k in 1..=k_max {
        let p = graph.element(policy, k - 1, 0);
        powers.push(p);
        prod = Some(match prod {
            None => p,
            Some(q) => graph.mul(q, p),
        });
        xi_prod *= params.xi_sq[k - 1];
        let c =
            scheme_coefficient(scheme, link.rate, k) / (correlation_factor(params, k)? * xi_prod);
        let c = graph.scalar(c);
        let raw = graph.div(c, prod.expect("set above"));
        outages.push(graph.ceil_clamp(raw, OUTAGE_CLAMP));
    }

    let one = graph.scalar(1.0);
    let mut attempts = one;
    for out in &outages[..k_max - 1] {
        attempts = graph.add(attempts, *out);
    }
    let last = *outages.last().expect("K >= 1");
    let success = graph.sub(one, last);
    let ratio = graph.div(attempts, success);
    let tau_s = graph.scale(ratio, link.latency_floor());

    let mut p_avg = powers[0];
    for k in 1..k_max {
        let term = graph.mul(powers[k], outages[k - 1]);
        p_avg = graph.add(p_avg, term);
    }

    let log_pout = graph.log(last);
    let log_eps = graph.scalar(link.epsilon.ln());
    let p_bar = graph.scalar(link.p_bar_watts());

    let lat = graph.scale(tau_s, unit.factor());
    let out_gap = graph.sub(log_pout, log_eps);
    let out_term = graph.scale(out_gap, duals.lambda);
    let pow_gap = graph.sub(p_avg, p_bar);
    let pow_term = graph.scale(pow_gap, duals.upsilon);
    let partial = graph.add(lat, out_term);
    let root = graph.add(partial, pow_term);
    Ok(LagrangianNodes {
        root,
        tau_s,
        log_pout,
        p_avg,
    })
}

/// Full per-sample graph: GCN policy feeding the Lagrangian. Returns the
/// graph, its weight parameter nodes and the Lagrangian nodes.
pub fn build_policy_lagrangian(
    weights: &GcnWeights,
    normalization: Normalization,
    scheme: Scheme,
    params: &ChannelParams,
    link: &LinkConfig,
    duals: Multipliers,
    unit: LatencyUnit,
) -> Result<(Graph, Vec<NodeId>, LagrangianNodes)> {
    let adj = adjacency(params, normalization)?;
    let mut g = Graph::new();
    let ids: Vec<NodeId> = weights
        .matrices
        .iter()
        .map(|m| g.parameter(m.clone()))
        .collect();
    let policy = gcn::build_forward(&mut g, &adj, &weights.spec, &ids, link.p_bar_watts())?;
    let nodes = build_lagrangian(&mut g, scheme, params, link, policy, duals, unit)?;
    Ok((g, ids, nodes))
}

/// The fixed training set of correlation coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub values: Vec<f64>,
    seed: u64,
}

impl Dataset {
    pub fn new(config: &TrainConfig) -> Self {
        let values = match config.rho_distribution {
            RhoDistribution::Fixed(r) => vec![r; config.dataset_size],
            RhoDistribution::Uniform => {
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                rng.set_stream(1);
                (0..config.dataset_size)
                    .map(|_| rng.random::<f64>())
                    .collect()
            }
        };
        Self {
            values,
            seed: config.seed,
        }
    }

    /// Seeded permutation of sample indices for one epoch.
    pub fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(2 + epoch as u64);
        let mut order: Vec<usize> = (0..self.values.len()).collect();
        order.shuffle(&mut rng);
        order
    }
}

pub fn sample_rho_batch(
    config: &TrainConfig,
    dataset: &Dataset,
    order: &[usize],
    batch_index: usize,
) -> Vec<f64> {
    let start = batch_index * config.batch_size;
    order[start..start + config.batch_size]
        .iter()
        .map(|&i| dataset.values[i])
        .collect()
}

/// Bias-corrected Adam step, in place.
pub fn adam_update(
    weights: &mut [Matrix],
    grads: &[Matrix],
    moments: &mut AdamState,
    config: &TrainConfig,
) -> Result<()> {
    if weights.len() != grads.len() || weights.len() != moments.m.len() {
        return Err(Error::shape(
            format!("{} gradient tensors", weights.len()),
            grads.len().to_string(),
        ));
    }
    moments.step += 1;
    let t = moments.step as i32;
    let c1 = 1.0 - config.beta1.powi(t);
    let c2 = 1.0 - config.beta2.powi(t);
    for ((w, g), (m, v)) in weights
        .iter_mut()
        .zip(grads)
        .zip(moments.m.iter_mut().zip(moments.v.iter_mut()))
    {
        if w.shape() != g.shape() {
            return Err(Error::shape(
                format!("{}x{}", w.rows(), w.cols()),
                format!("{}x{}", g.rows(), g.cols()),
            ));
        }
        let it = w
            .as_mut_slice()
            .iter_mut()
            .zip(g.as_slice())
            .zip(m.as_mut_slice().iter_mut().zip(v.as_mut_slice().iter_mut()));
        for ((wi, gi), (mi, vi)) in it {
            *mi = config.beta1 * *mi + (1.0 - config.beta1) * gi;
            *vi = config.beta2 * *vi + (1.0 - config.beta2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *wi -= config.lr_weights * m_hat / (v_hat.sqrt() + config.eps_hat);
        }
    }
    Ok(())
}

struct SampleEval {
    graph: Graph,
    root: NodeId,
    tau_s: f64,
    log_pout: f64,
    p_avg: f64,
    grads: Option<Vec<Matrix>>,
}

fn eval_sample(
    state: &TrainState,
    rho: f64,
    scheme: Scheme,
    template: &ChannelParams,
    link: &LinkConfig,
    config: &TrainConfig,
) -> Result<SampleEval> {
    let params = template.with_rho(rho)?;
    let (mut graph, _, nodes) = build_policy_lagrangian(
        &state.weights,
        state.normalization,
        scheme,
        &params,
        link,
        state.duals,
        config.latency_unit,
    )?;
    graph.forward(nodes.root)?;
    Ok(SampleEval {
        tau_s: graph.value(nodes.tau_s).item(),
        log_pout: graph.value(nodes.log_pout).item(),
        p_avg: graph.value(nodes.p_avg).item(),
        root: nodes.root,
        graph,
        grads: None,
    })
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// One primal-dual iteration on `batch`.
pub fn train_step(
    state: &mut TrainState,
    batch: &[f64],
    scheme: Scheme,
    template: &ChannelParams,
    link: &LinkConfig,
    config: &TrainConfig,
) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    // identical ρ values give identical samples; evaluate each once
    let mut unique: Vec<f64> = Vec::new();
    let mut slot: HashMap<u64, usize> = HashMap::new();
    let index: Vec<usize> = batch
        .iter()
        .map(|r| {
            *slot.entry(r.to_bits()).or_insert_with(|| {
                unique.push(*r);
                unique.len() - 1
            })
        })
        .collect();
    let mut evals: Vec<SampleEval> = {
        let st = &*state;
        unique
            .par_iter()
            .map(|&rho| eval_sample(st, rho, scheme, template, link, config))
            .collect::<Result<_>>()?
    };
    let mut taus: Vec<f64> = index.iter().map(|&u| evals[u].tau_s).collect();
    let threshold = config.guard_factor * median(&mut taus);
    evals
        .par_iter_mut()
        .filter(|e| e.tau_s <= threshold)
        .try_for_each(|e| -> Result<()> {
            e.grads = Some(e.graph.backward(e.root)?.gradients);
            Ok(())
        })?;

    let iteration = state.iteration;
    let non_finite = |what: &str| Error::NonFinite {
        iteration,
        what: what.to_string(),
    };
    let n = batch.len() as f64;
    let (mut sum_tau, mut sum_log, mut sum_pavg) = (0.0, 0.0, 0.0);
    let mut grad_sum: Vec<Matrix> = state
        .weights
        .matrices
        .iter()
        .map(|w| Matrix::zeros(w.rows(), w.cols()))
        .collect();
    let mut included = 0usize;
    for &u in &index {
        let e = &evals[u];
        sum_tau += e.tau_s;
        sum_log += e.log_pout;
        sum_pavg += e.p_avg;
        if let Some(gr) = &e.grads {
            for (acc, g) in grad_sum.iter_mut().zip(gr) {
                acc.add_scaled(g, 1.0);
            }
            included += 1;
        }
    }
    let (mean_tau, mean_log, mean_pavg) = (sum_tau / n, sum_log / n, sum_pavg / n);
    if !(mean_tau.is_finite() && mean_log.is_finite() && mean_pavg.is_finite()) {
        return Err(non_finite("batch statistics"));
    }

    if included > 0 {
        let scale = 1.0 / included as f64;
        let grads: Vec<Matrix> = grad_sum.iter().map(|g| g.scale(scale)).collect();
        if !grads.iter().all(Matrix::is_finite) {
            return Err(non_finite("weight gradient"));
        }
        adam_update(&mut state.weights.matrices, &grads, &mut state.adam, config)?;
        if !state.weights.matrices.iter().all(Matrix::is_finite) {
            return Err(non_finite("weights"));
        }
    } else {
        state.rejected_steps += 1;
    }

    if !config.freeze_duals {
        let d = &mut state.duals;
        d.lambda = (d.lambda + config.lr_lambda * (mean_log - link.epsilon.ln())).max(0.0);
        d.upsilon = (d.upsilon + config.lr_upsilon * (mean_pavg - link.p_bar_watts())).max(0.0);
    }

    state.iteration += 1;
    state.history.push(HistoryRecord {
        iter: state.iteration,
        mean_tau_s: mean_tau,
        mean_log_pout: mean_log,
        mean_pavg_w: mean_pavg,
        lambda: state.duals.lambda,
        upsilon: state.duals.upsilon,
    });
    Ok(())
}

fn run_loop(
    state: &mut TrainState,
    scheme: Scheme,
    template: &ChannelParams,
    link: &LinkConfig,
    config: &TrainConfig,
) -> Result<()> {
    let dataset = Dataset::new(config);
    for epoch in 0..config.epochs {
        let order = dataset.epoch_order(epoch);
        for b in 0..config.batches_per_epoch() {
            let batch = sample_rho_batch(config, &dataset, &order, b);
            train_step(state, &batch, scheme, template, link, config)?;
        }
    }
    Ok(())
}

/// Trains a fresh network for `epochs × ⌊dataset/batch⌋` iterations.
pub fn train(
    scheme: Scheme,
    template: &ChannelParams,
    link: &LinkConfig,
    config: &TrainConfig,
) -> Result<TrainState> {
    config.validate()?;
    link.validate()?;
    template.validate()?;
    let weights = gcn::init_weights(&config.layer_spec, config.seed)?;
    let mut state = TrainState::new(weights, config);
    if config.threads == 0 {
        run_loop(&mut state, scheme, template, link, config)?;
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| run_loop(&mut state, scheme, template, link, config))?;
    }
    Ok(state)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyPoint {
    pub rho: f64,
    pub policy: PowerPolicy,
    pub report: PerformanceReport,
}

/// Runs the trained policy at each ρ and evaluates it analytically.
pub fn evaluate_policy(
    state: &TrainState,
    template: &ChannelParams,
    rho_grid: &[f64],
    scheme: Scheme,
    link: &LinkConfig,
) -> Result<Vec<PolicyPoint>> {
    rho_grid
        .iter()
        .map(|&rho| {
            let params = template.with_rho(rho)?;
            let policy = state.policy_at(template, rho, link.p_bar_watts())?;
            let report = evaluate(scheme, &params, &policy, link)?;
            Ok(PolicyPoint {
                rho,
                policy,
                report,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytics::evaluate;

    fn duals(lambda: f64, upsilon: f64) -> Multipliers {
        Multipliers { lambda, upsilon }
    }

    #[test]
    fn lagrangian_parts() {
        let link = LinkConfig::default();
        let eps = link.epsilon;
        let pbar = link.p_bar_watts();
        let v = lagrangian_from_parts(
            0.055,
            eps.ln() - 1.0,
            pbar - 2.0,
            &link,
            duals(0.1, 0.01),
            LatencyUnit::Seconds,
        );
        assert!((v - (-0.065)).abs() < 1e-12);
        let v = lagrangian_from_parts(
            0.055,
            eps.ln(),
            pbar,
            &link,
            duals(3.0, 7.0),
            LatencyUnit::Seconds,
        );
        assert!((v - 0.055).abs() < 1e-15);
    }

    #[test]
    fn penalty_free_lagrangian_is_latency() {
        let link = LinkConfig::default();
        let par = ChannelParams::uniform(3, 0.5, 1).unwrap();
        let pol = PowerPolicy::new(vec![25.0, 20.0, 15.0]).unwrap();
        let s = Scheme::IncrementalRedundancy;
        let l = lagrangian(s, &par, &link, &pol, duals(0.0, 0.0)).unwrap();
        assert_eq!(l, evaluate(s, &par, &pol, &link).unwrap().tau);
    }

    #[test]
    fn graph_lagrangian_matches_analytics() {
        let link = LinkConfig::default();
        for s in Scheme::ALL {
            for rho in [0.0, 0.5, 0.97] {
                let par = ChannelParams::uniform(3, rho, 1).unwrap();
                let pw = vec![28.0, 19.0, 12.5];
                let pol = PowerPolicy::new(pw.clone()).unwrap();
                let d = duals(0.3, 0.02);
                let mut g = Graph::new();
                let p = g.constant(Matrix::column(&pw));
                let nodes =
                    build_lagrangian(&mut g, s, &par, &link, p, d, LatencyUnit::Seconds).unwrap();
                let v = g.forward(nodes.root).unwrap().item();
                let want = lagrangian(s, &par, &link, &pol, d).unwrap();
                assert!(
                    (v - want).abs() <= 1e-12 * want.abs(),
                    "{s} {rho}: {v} vs {want}"
                );
                let rep = evaluate(s, &par, &pol, &link).unwrap();
                assert!((g.value(nodes.tau_s).item() - rep.tau).abs() <= 1e-12 * rep.tau);
            }
        }
    }

    #[test]
    fn batches_are_seeded() {
        let cfg = TrainConfig {
            seed: 11,
            ..TrainConfig::default()
        };
        let a = Dataset::new(&cfg);
        let b = Dataset::new(&cfg);
        assert_eq!(a, b);
        assert!(a.values.iter().all(|r| (0.0..1.0).contains(r)));
        let order = a.epoch_order(3);
        assert_eq!(order, b.epoch_order(3));
        assert_ne!(order, a.epoch_order(4));
        let batch = sample_rho_batch(&cfg, &a, &order, 2);
        assert_eq!(batch.len(), 50);
        assert_eq!(batch, sample_rho_batch(&cfg, &b, &order, 2));
    }

    #[test]
    fn adam_first_step_is_sign_like() {
        let cfg = TrainConfig::default();
        let mut w = vec![Matrix::column(&[1.0, -2.0, 0.5])];
        let g = vec![Matrix::column(&[0.3, -4.0, 1e-3])];
        let mut m = AdamState::zeros_like(&w);
        adam_update(&mut w, &g, &mut m, &cfg).unwrap();
        let want = [1.0 - 5e-4, -2.0 + 5e-4, 0.5 - 5e-4 * 1e-3 / (1e-3 + 1e-8)];
        for (a, b) in w[0].as_slice().iter().zip(want) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn adam_zero_gradient_keeps_weights() {
        let cfg = TrainConfig::default();
        let w0 = vec![Matrix::from_rows(&[vec![0.1, 0.2]]).unwrap()];
        let mut w = w0.clone();
        let mut m = AdamState::zeros_like(&w);
        adam_update(&mut w, &[Matrix::zeros(1, 2)], &mut m, &cfg).unwrap();
        assert_eq!(w, w0);
    }

    #[test]
    fn adam_opposite_gradients_are_bounded() {
        let cfg = TrainConfig::default();
        let mut w = vec![Matrix::scalar(0.0)];
        let mut m = AdamState::zeros_like(&w);
        adam_update(&mut w, &[Matrix::scalar(2.5)], &mut m, &cfg).unwrap();
        adam_update(&mut w, &[Matrix::scalar(-2.5)], &mut m, &cfg).unwrap();
        assert!(w[0].item().abs() <= 2.0 * cfg.lr_weights);
    }

    fn small_config(seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: 2,
            dataset_size: 40,
            batch_size: 10,
            seed,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn dual_projection_and_update() {
        let link = LinkConfig::default();
        let template = ChannelParams::uniform(3, 0.0, 1).unwrap();
        let cfg = small_config(1);
        let w = gcn::init_weights(&cfg.layer_spec, 1).unwrap();

        // λ = 0 with outage below ε stays at 0
        let mut st = TrainState::new(w.clone(), &cfg);
        st.duals = duals(0.0, 0.0);
        train_step(
            &mut st,
            &[0.2; 4],
            Scheme::IncrementalRedundancy,
            &template,
            &link,
            &cfg,
        )
        .unwrap();
        assert!(st.history[0].mean_log_pout < link.epsilon.ln());
        assert_eq!(st.duals.lambda, 0.0);

        // λ' = λ + θ_λ·(mean log P − log ε)
        let mut st = TrainState::new(w, &cfg);
        train_step(&mut st, &[0.4; 4], Scheme::TypeI, &template, &link, &cfg).unwrap();
        let h = st.history[0];
        let want = (0.1 + 1e-3 * (h.mean_log_pout - link.epsilon.ln())).max(0.0);
        assert!((st.duals.lambda - want).abs() < 1e-15);
        let want_u = (1.0 + 5e-5 * (h.mean_pavg_w - link.p_bar_watts())).max(0.0);
        assert!((st.duals.upsilon - want_u).abs() < 1e-15);
        assert!(st.duals.lambda >= 0.0 && st.duals.upsilon >= 0.0);
    }

    #[test]
    fn guard_rejects_weight_step_but_duals_move() {
        let link = LinkConfig::default();
        let template = ChannelParams::uniform(3, 0.0, 1).unwrap();
        let cfg = TrainConfig {
            guard_factor: 1e-6,
            ..small_config(2)
        };
        let w = gcn::init_weights(&cfg.layer_spec, 2).unwrap();
        let mut st = TrainState::new(w.clone(), &cfg);
        train_step(
            &mut st,
            &[0.5; 3],
            Scheme::ChaseCombining,
            &template,
            &link,
            &cfg,
        )
        .unwrap();
        assert_eq!(st.weights, w);
        assert_eq!(st.rejected_steps, 1);
        assert_eq!(st.adam.step, 0);
        assert_ne!(st.duals.upsilon, cfg.upsilon0);
    }

    #[test]
    fn short_runs_are_reproducible_across_thread_counts() {
        let link = LinkConfig::default();
        let template = ChannelParams::uniform(3, 0.0, 1).unwrap();
        let a = train(
            Scheme::IncrementalRedundancy,
            &template,
            &link,
            &TrainConfig {
                threads: 1,
                ..small_config(5)
            },
        )
        .unwrap();
        let b = train(
            Scheme::IncrementalRedundancy,
            &template,
            &link,
            &TrainConfig {
                threads: 1,
                ..small_config(5)
            },
        )
        .unwrap();
        let c = train(
            Scheme::IncrementalRedundancy,
            &template,
            &link,
            &TrainConfig {
                threads: 3,
                ..small_config(5)
            },
        )
        .unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
        assert_eq!(a.history.len(), 8);
        assert_eq!(a.iteration, 8);
    }

    #[test]
    fn evaluate_policy_single_point() {
        let link = LinkConfig::default();
        let template = ChannelParams::uniform(3, 0.0, 1).unwrap();
        let cfg = small_config(4);
        let st = TrainState::new(gcn::init_weights(&cfg.layer_spec, 4).unwrap(), &cfg);
        let pts = evaluate_policy(&st, &template, &[0.3], Scheme::TypeI, &link).unwrap();
        let par = template.with_rho(0.3).unwrap();
        let pol = st.policy_at(&template, 0.3, link.p_bar_watts()).unwrap();
        assert_eq!(
            pts[0].report,
            evaluate(Scheme::TypeI, &par, &pol, &link).unwrap()
        );
    }

    #[test]
    fn invalid_config_is_rejected() {
        let bad = TrainConfig {
            batch_size: 2000,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            lr_weights: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
