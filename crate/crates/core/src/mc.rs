//! Monte-Carlo link simulation of HARQ outage over correlated fading.
//!
//! Trials are split into fixed chunks; chunk `c` draws from ChaCha8 stream
//! `c` of the configured seed and workers take chunks round-robin. Partial
//! sums are reduced in chunk order, so every estimate is bit-identical for
//! any worker count.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::analytics::{
    asymptotic_outage, report_from_profile, ChannelParams, LinkConfig, PerformanceReport,
    PowerPolicy, Scheme, OUTAGE_CLAMP,
};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Trials per RNG stream.
pub const CHUNK_TRIALS: u64 = 16_384;

/// Importance sampling is used for a round when the analytic outage times
/// the trial count falls below this many expected events.
pub const IS_EVENT_THRESHOLD: f64 = 1000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct McConfig {
    pub trials: u64,
    pub seed: u64,
    pub workers: usize,
}

impl McConfig {
    pub fn new(trials: u64, seed: u64) -> Self {
        Self {
            trials,
            seed,
            workers: 1,
        }
    }

    pub fn with_workers(mut self, workers: usize) -> Self {
        self.workers = workers;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::Config(
                "at least one Monte-Carlo trial is required".into(),
            ));
        }
        if self.workers == 0 {
            return Err(Error::Config("worker count must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct McSample {
    /// α₀ (shared component) followed by α₁..α_K.
    pub alpha: Vec<Complex64>,
    pub h: Vec<Complex64>,
    pub gamma: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub trials: u64,
}

/// Which estimator produced a value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Estimator {
    Plain,
    ImportanceSampled,
}

impl Estimator {
    pub fn tag(self) -> &'static str {
        match self {
            Estimator::Plain => "plain",
            Estimator::ImportanceSampled => "is",
        }
    }
}

/// Circular complex normal with unit variance.
fn complex_normal(rng: &mut impl Rng) -> Complex64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

/// Per-round mixing coefficients (√(1−ρ^{2m}), ρ^m) with m = k+δ−1.
fn mixing(params: &ChannelParams) -> Vec<(f64, f64)> {
    (1..=params.k())
        .map(|k| {
            let c = params.rho.powi(params.lag(k));
            ((1.0 - c * c).sqrt(), c)
        })
        .collect()
}

fn draw_h(params: &ChannelParams, mix: &[(f64, f64)], rng: &mut impl Rng, h: &mut [Complex64]) {
    let a0 = complex_normal(rng);
    for ((hk, (own, shared)), xi_sq) in h.iter_mut().zip(mix).zip(&params.xi_sq) {
        let ak = complex_normal(rng);
        *hk = (ak * *own + a0 * *shared) * xi_sq.sqrt();
    }
}

/// One channel realization: h_k = ξ_k(√(1−ρ^{2m}) α_k + ρ^m α₀).
pub fn sample_channel_gains(
    params: &ChannelParams,
    powers: &[f64],
    rng: &mut impl Rng,
) -> Result<McSample> {
    params.validate()?;
    if powers.len() != params.k() {
        return Err(Error::shape(
            params.k().to_string(),
            powers.len().to_string(),
        ));
    }
    let mix = mixing(params);
    let mut alpha = Vec::with_capacity(params.k() + 1);
    alpha.push(complex_normal(rng));
    let mut h = Vec::with_capacity(params.k());
    for (k, (own, shared)) in mix.iter().enumerate() {
        let ak = complex_normal(rng);
        alpha.push(ak);
        h.push((ak * *own + alpha[0] * *shared) * params.xi_sq[k].sqrt());
    }
    let gamma = h
        .iter()
        .zip(powers)
        .map(|(hk, p)| p * hk.norm_sqr())
        .collect();
    Ok(McSample { alpha, h, gamma })
}

/// Number of leading rounds that end in outage. Success is absorbing, so
/// the packet is in outage after round `k` iff this is at least `k`.
pub fn failed_rounds(scheme: Scheme, gammas: &[f64], rate: f64) -> usize {
    let threshold = rate.exp2();
    let mut acc = match scheme {
        Scheme::IncrementalRedundancy => 1.0,
        _ => 0.0,
    };
    for (j, g) in gammas.iter().enumerate() {
        let decoded = match scheme {
            Scheme::TypeI => 1.0 + g >= threshold,
            Scheme::ChaseCombining => {
                acc += g;
                1.0 + acc >= threshold
            }
            // Π(1+γ_j) ≥ 2^R, i.e. Σ log₂(1+γ_j) ≥ R
            Scheme::IncrementalRedundancy => {
                acc *= 1.0 + g;
                acc >= threshold
            }
        };
        if decoded {
            return j;
        }
    }
    gammas.len()
}

/// True when decoding has failed after all rounds in `gammas`.
pub fn outage_event(scheme: Scheme, gammas: &[f64], rate: f64) -> bool {
    failed_rounds(scheme, gammas, rate) == gammas.len()
}

/// Runs `chunk_fn(rng, n)` over all chunks and returns the results in
/// chunk order.
fn run_chunks<T, F>(mc: &McConfig, chunk_fn: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&mut ChaCha8Rng, u64) -> T + Sync,
{
    mc.validate()?;
    let n_chunks = mc.trials.div_ceil(CHUNK_TRIALS);
    let trials_in = |c: u64| CHUNK_TRIALS.min(mc.trials - c * CHUNK_TRIALS);
    let run = |c: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(mc.seed);
        rng.set_stream(c);
        chunk_fn(&mut rng, trials_in(c))
    };
    let workers = (mc.workers as u64).min(n_chunks).max(1);
    if workers == 1 {
        return Ok((0..n_chunks).map(run).collect());
    }
    let mut tagged: Vec<(u64, T)> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let run = &run;
                scope.spawn(move || {
                    (w..n_chunks)
                        .step_by(workers as usize)
                        .map(|c| (c, run(c)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("Monte-Carlo worker panicked"))
            .collect()
    });
    tagged.sort_by_key(|(c, _)| *c);
    Ok(tagged.into_iter().map(|(_, t)| t).collect())
}

fn check_inputs(params: &ChannelParams, policy: &PowerPolicy) -> Result<()> {
    params.validate()?;
    if policy.len() != params.k() {
        return Err(Error::shape(
            params.k().to_string(),
            policy.len().to_string(),
        ));
    }
    Ok(())
}

/// Plain Monte-Carlo outage after each round 1..=K, for several schemes on
/// shared channel draws. Result is indexed `[scheme][round]`.
pub fn estimate_profiles(
    schemes: &[Scheme],
    params: &ChannelParams,
    policy: &PowerPolicy,
    rate: f64,
    mc: &McConfig,
) -> Result<Vec<Vec<McEstimate>>> {
    check_inputs(params, policy)?;
    let k = params.k();
    let mix = mixing(params);
    let powers = policy.powers();
    let counts = run_chunks(mc, |rng, n| {
        let mut fails = vec![vec![0u64; k + 1]; schemes.len()];
        let mut h = vec![Complex64::new(0.0, 0.0); k];
        let mut gamma = vec![0.0; k];
        for _ in 0..n {
            draw_h(params, &mix, rng, &mut h);
            for ((g, hk), p) in gamma.iter_mut().zip(&h).zip(powers) {
                *g = p * hk.norm_sqr();
            }
            for (s, f) in schemes.iter().zip(fails.iter_mut()) {
                f[failed_rounds(*s, &gamma, rate)] += 1;
            }
        }
        fails
    })?;
    let n = mc.trials;
    Ok((0..schemes.len())
        .map(|s| {
            let mut hist = vec![0u64; k + 1];
            for chunk in &counts {
                for (a, b) in hist.iter_mut().zip(&chunk[s]) {
                    *a += b;
                }
            }
            // outage after round r: at least r failures
            (1..=k)
                .map(|r| {
                    let events: u64 = hist[r..].iter().sum();
                    let mean = events as f64 / n as f64;
                    McEstimate {
                        mean,
                        stderr: (mean * (1.0 - mean) / n as f64).sqrt(),
                        trials: n,
                    }
                })
                .collect()
        })
        .collect())
}

pub fn estimate_outage_profile(
    scheme: Scheme,
    params: &ChannelParams,
    policy: &PowerPolicy,
    rate: f64,
    mc: &McConfig,
) -> Result<Vec<McEstimate>> {
    Ok(estimate_profiles(&[scheme], params, policy, rate, mc)?.remove(0))
}

fn truncate(
    params: &ChannelParams,
    policy: &PowerPolicy,
    k: usize,
) -> Result<(ChannelParams, PowerPolicy)> {
    if k == 0 || k > params.k() || k > policy.len() {
        return Err(Error::Domain(format!(
            "round {k} outside 1..={}",
            params.k()
        )));
    }
    let p = ChannelParams::new(params.rho, params.delta, params.xi_sq[..k].to_vec())?;
    Ok((p, PowerPolicy::from_raw(policy.powers()[..k].to_vec())))
}

/// Plain Monte-Carlo outage after `k` rounds.
pub fn estimate_outage(
    scheme: Scheme,
    params: &ChannelParams,
    policy: &PowerPolicy,
    rate: f64,
    k: usize,
    mc: &McConfig,
) -> Result<McEstimate> {
    let (p, pol) = truncate(params, policy, k)?;
    Ok(*estimate_outage_profile(scheme, &p, &pol, rate, mc)?
        .last()
        .expect("k >= 1"))
}

/// Covariance of (h_1..h_K): ξ_i² on the diagonal, ξ_iξ_jρ^{i+j+2δ−2} off it.
pub fn channel_covariance(params: &ChannelParams) -> Matrix {
    let k = params.k();
    let mut s = Matrix::zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            s[(i, j)] = if i == j {
                params.xi_sq[i]
            } else {
                (params.xi_sq[i] * params.xi_sq[j]).sqrt()
                    * params.rho.powi(params.lag(i + 1) + params.lag(j + 1))
            };
        }
    }
    s
}

/// xᵀAx + yᵀAy for a complex vector x + iy and real symmetric A, i.e. the
/// Hermitian form vᴴAv.
fn hermitian_form(a: &Matrix, v: &[Complex64]) -> f64 {
    let n = v.len();
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            let aij = a[(i, j)];
            total += aij * (v[i].re * v[j].re + v[i].im * v[j].im);
        }
    }
    total
}

/// Importance-sampled outage after each round 1..=K, for several schemes on
/// shared draws.
///
/// Channels are drawn from the model and each round is shrunk by
/// s_j = √min(1, (2^R−1)/(p_j ξ_j²)), which moves the per-round SNR to the
/// decoding threshold. Each draw is weighted by the exact Gaussian
/// likelihood ratio over the leading k×k block of the covariance.
pub fn estimate_profiles_is(
    schemes: &[Scheme],
    params: &ChannelParams,
    policy: &PowerPolicy,
    rate: f64,
    mc: &McConfig,
) -> Result<Vec<Vec<McEstimate>>> {
    check_inputs(params, policy)?;
    let k = params.k();
    let mix = mixing(params);
    let powers = policy.powers();
    let t = rate.exp2() - 1.0;
    let scale: Vec<f64> = powers
        .iter()
        .zip(&params.xi_sq)
        .map(|(p, xi)| (t / (p * xi)).min(1.0).sqrt())
        .collect();
    let sigma = channel_covariance(params);
    let inverses: Vec<Matrix> = (1..=k)
        .map(|r| sigma.leading_block(r).inverse())
        .collect::<Result<_>>()?;
    let log_jacobian: Vec<f64> = (1..=k)
        .map(|r| scale[..r].iter().map(|s| (s * s).ln()).sum())
        .collect();

    // per chunk: [scheme][round] → (Σw, Σw²)
    let sums = run_chunks(mc, |rng, n| {
        let mut acc = vec![vec![(0.0f64, 0.0f64); k]; schemes.len()];
        let mut u = vec![Complex64::new(0.0, 0.0); k];
        let mut h = vec![Complex64::new(0.0, 0.0); k];
        let mut gamma = vec![0.0; k];
        let mut weight = vec![0.0; k];
        for _ in 0..n {
            draw_h(params, &mix, rng, &mut u);
            for j in 0..k {
                h[j] = u[j] * scale[j];
                gamma[j] = powers[j] * h[j].norm_sqr();
            }
            for r in 0..k {
                let inv = &inverses[r];
                let q = hermitian_form(inv, &u[..=r]) - hermitian_form(inv, &h[..=r]);
                weight[r] = (log_jacobian[r] + q).exp();
            }
            for (s, a) in schemes.iter().zip(acc.iter_mut()) {
                let failed = failed_rounds(*s, &gamma, rate);
                for r in 0..failed {
                    a[r].0 += weight[r];
                    a[r].1 += weight[r] * weight[r];
                }
            }
        }
        acc
    })?;
    let n = mc.trials as f64;
    Ok((0..schemes.len())
        .map(|s| {
            (0..k)
                .map(|r| {
                    let (mut s1, mut s2) = (0.0, 0.0);
                    for chunk in &sums {
                        s1 += chunk[s][r].0;
                        s2 += chunk[s][r].1;
                    }
                    let mean = s1 / n;
                    let var = if mc.trials > 1 {
                        ((s2 - n * mean * mean) / (n - 1.0)).max(0.0)
                    } else {
                        0.0
                    };
                    McEstimate {
                        mean,
                        stderr: (var / n).sqrt(),
                        trials: mc.trials,
                    }
                })
                .collect()
        })
        .collect())
}

/// Importance-sampled outage after `k` rounds.
pub fn estimate_outage_is(
    scheme: Scheme,
    params: &ChannelParams,
    policy: &PowerPolicy,
    rate: f64,
    k: usize,
    mc: &McConfig,
) -> Result<McEstimate> {
    let (p, pol) = truncate(params, policy, k)?;
    let prof = estimate_profiles_is(&[scheme], &p, &pol, rate, mc)?;
    Ok(*prof[0].last().expect("k >= 1"))
}

/// Performance figures computed from a plain Monte-Carlo outage profile.
pub fn empirical_performance(
    scheme: Scheme,
    params: &ChannelParams,
    policy: &PowerPolicy,
    link: &LinkConfig,
    mc: &McConfig,
) -> Result<PerformanceReport> {
    link.validate()?;
    let profile: Vec<f64> = estimate_outage_profile(scheme, params, policy, link.rate, mc)?
        .iter()
        .map(|e| e.mean.min(OUTAGE_CLAMP))
        .collect();
    report_from_profile(policy, profile, link)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationRow {
    pub scheme: Scheme,
    pub k: usize,
    pub analytic: f64,
    pub estimate: McEstimate,
    pub estimator: Estimator,
}

impl ValidationRow {
    /// analytic / Monte-Carlo.
    pub fn ratio(&self) -> f64 {
        self.analytic / self.estimate.mean
    }
}

/// Asymptotic versus simulated outage for every scheme and round. Rounds
/// with fewer than [`IS_EVENT_THRESHOLD`] expected events use the
/// importance-sampled estimator.
pub fn validation_report(
    schemes: &[Scheme],
    params: &ChannelParams,
    policy: &PowerPolicy,
    rate: f64,
    mc: &McConfig,
) -> Result<Vec<ValidationRow>> {
    let plain = estimate_profiles(schemes, params, policy, rate, mc)?;
    let mut analytic = Vec::with_capacity(schemes.len());
    let mut need_is = false;
    for s in schemes {
        let row: Vec<f64> = (1..=params.k())
            .map(|k| asymptotic_outage(*s, params, policy, rate, k).map(|(p, _)| p))
            .collect::<Result<_>>()?;
        need_is |= row
            .iter()
            .any(|a| a * (mc.trials as f64) < IS_EVENT_THRESHOLD);
        analytic.push(row);
    }
    let is = if need_is {
        Some(estimate_profiles_is(schemes, params, policy, rate, mc)?)
    } else {
        None
    };
    let mut rows = Vec::new();
    for (si, s) in schemes.iter().enumerate() {
        for k in 1..=params.k() {
            let a = analytic[si][k - 1];
            let (estimate, estimator) = match &is {
                Some(is) if a * (mc.trials as f64) < IS_EVENT_THRESHOLD => {
                    (is[si][k - 1], Estimator::ImportanceSampled)
                }
                _ => (plain[si][k - 1], Estimator::Plain),
            };
            rows.push(ValidationRow {
                scheme: *s,
                k,
                analytic: a,
                estimate,
                estimator,
            });
        }
    }
    Ok(rows)
}
