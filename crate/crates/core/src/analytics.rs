//! Closed-form HARQ performance model.
//!
//! High-SNR outage of Type-I, chase-combining and incremental-redundancy HARQ
//! over time-correlated Rayleigh fading, and the throughput, latency and
//! average-power figures built on it.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Smallest transmit power any policy may use, in watts.
pub const P_MIN: f64 = 1e-6;

/// Outage values are clamped to this before entering throughput and power.
pub const OUTAGE_CLAMP: f64 = 1.0 - 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Scheme {
    TypeI,
    ChaseCombining,
    IncrementalRedundancy,
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [
        Scheme::TypeI,
        Scheme::ChaseCombining,
        Scheme::IncrementalRedundancy,
    ];

    /// Short lowercase tag used in CSV files and on the command line.
    pub fn tag(self) -> &'static str {
        match self {
            Scheme::TypeI => "typei",
            Scheme::ChaseCombining => "cc",
            Scheme::IncrementalRedundancy => "ir",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s
            .trim()
            .to_ascii_lowercase()
            .replace(['-', '_'], "")
            .as_str()
        {
            "typei" | "type1" | "t1" => Ok(Scheme::TypeI),
            "cc" | "chasecombining" => Ok(Scheme::ChaseCombining),
            "ir" | "incrementalredundancy" => Ok(Scheme::IncrementalRedundancy),
            _ => Err(Error::Config(format!(
                "unknown scheme '{s}' (expected typei, cc or ir)"
            ))),
        }
    }
}

/// Statistical channel description: correlation, feedback delay and the
/// per-round average channel powers. The round budget K is `xi_sq.len()`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelParams {
    pub rho: f64,
    pub delta: u32,
    pub xi_sq: Vec<f64>,
}

impl ChannelParams {
    pub fn new(rho: f64, delta: u32, xi_sq: Vec<f64>) -> Result<Self> {
        let p = Self { rho, delta, xi_sq };
        p.validate()?;
        Ok(p)
    }

    /// `k` rounds with unit channel powers.
    pub fn uniform(k: usize, rho: f64, delta: u32) -> Result<Self> {
        Self::new(rho, delta, vec![1.0; k])
    }

    pub fn k(&self) -> usize {
        self.xi_sq.len()
    }

    pub fn with_rho(&self, rho: f64) -> Result<Self> {
        Self::new(rho, self.delta, self.xi_sq.clone())
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::Domain(format!(
                "rho must lie in [0, 1), got {}",
                self.rho
            )));
        }
        if self.delta == 0 {
            return Err(Error::Domain("feedback delay must be at least 1".into()));
        }
        if self.xi_sq.is_empty() {
            return Err(Error::Domain("at least one HARQ round is required".into()));
        }
        if let Some(x) = self.xi_sq.iter().find(|x| !(**x > 0.0 && x.is_finite())) {
            return Err(Error::Domain(format!(
                "channel powers must be positive, got {x}"
            )));
        }
        Ok(())
    }

    /// Exponent `j + δ − 1` of ρ for round `j` (1-based).
    pub(crate) fn lag(&self, j: usize) -> i32 {
        (j as u32 + self.delta - 1) as i32
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinkConfig {
    /// Transmission rate in bps/Hz.
    pub rate: f64,
    /// Information bits per codeword and codeword length in symbols, when
    /// the rate is given as b/M.
    pub bits_per_codeword: Option<u32>,
    pub codeword_len: Option<u32>,
    /// Total payload in bits.
    pub payload_bits: f64,
    /// Bandwidth in Hz.
    pub bandwidth: f64,
    pub epsilon: f64,
    pub p_bar_dbw: f64,
}

impl Default for LinkConfig {
    fn default() -> Self {
        Self {
            rate: 2.0,
            bits_per_codeword: None,
            codeword_len: None,
            payload_bits: 1e6,
            bandwidth: 1e7,
            epsilon: 1e-2,
            p_bar_dbw: 15.0,
        }
    }
}

impl LinkConfig {
    pub fn with_budget(mut self, p_bar_dbw: f64) -> Self {
        self.p_bar_dbw = p_bar_dbw;
        self
    }

    pub fn p_bar_watts(&self) -> f64 {
        dbw_to_watts(self.p_bar_dbw)
    }

    /// Latency with every packet delivered in the first round, N_b/(B·R).
    pub fn latency_floor(&self) -> f64 {
        self.payload_bits / (self.bandwidth * self.rate)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rate > 0.0 && self.rate.is_finite()) {
            return Err(Error::Config(format!(
                "rate must be positive, got {}",
                self.rate
            )));
        }
        if let (Some(b), Some(m)) = (self.bits_per_codeword, self.codeword_len) {
            if m == 0 || (self.rate - b as f64 / m as f64).abs() > 1e-12 * self.rate {
                return Err(Error::Config(format!(
                    "rate {} does not equal b/M = {b}/{m}",
                    self.rate
                )));
            }
        }
        if !(self.payload_bits > 0.0 && self.payload_bits.is_finite()) {
            return Err(Error::Config("payload must be positive".into()));
        }
        if !(self.bandwidth > 0.0 && self.bandwidth.is_finite()) {
            return Err(Error::Config("bandwidth must be positive".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::Config(format!(
                "outage tolerance must lie in (0, 1), got {}",
                self.epsilon
            )));
        }
        if !self.p_bar_dbw.is_finite() {
            return Err(Error::Config("power budget must be finite".into()));
        }
        Ok(())
    }
}

/// Per-round transmit powers in watts.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerPolicy {
    powers: Vec<f64>,
}

impl PowerPolicy {
    /// Builds a policy, raising every entry to at least [`P_MIN`].
    pub fn new(powers: Vec<f64>) -> Result<Self> {
        if powers.iter().any(|p| p.is_nan() || p.is_infinite()) {
            return Err(Error::Domain("powers must be finite".into()));
        }
        Ok(Self {
            powers: powers.into_iter().map(|p| p.max(P_MIN)).collect(),
        })
    }

    /// Keeps the given values as-is. Nonpositive entries are rejected later
    /// by the outage formulas.
    pub fn from_raw(powers: Vec<f64>) -> Self {
        Self { powers }
    }

    pub fn uniform(k: usize, watts: f64) -> Result<Self> {
        Self::new(vec![watts; k])
    }

    pub fn powers(&self) -> &[f64] {
        &self.powers
    }

    pub fn len(&self) -> usize {
        self.powers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.powers.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AsymptoticFactors {
    pub ell: f64,
    pub g_k: f64,
    pub varsigma: f64,
    /// Outage before clamping; may exceed 1 at low SNR.
    pub raw_outage: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerformanceReport {
    pub outage_profile: Vec<f64>,
    pub eta: f64,
    pub tau: f64,
    pub p_avg: f64,
    pub outage_ok: bool,
    pub power_ok: bool,
}

impl PerformanceReport {
    pub fn feasible(&self) -> bool {
        self.outage_ok && self.power_ok
    }

    pub fn outage_k(&self) -> f64 {
        *self.outage_profile.last().expect("non-empty profile")
    }
}

pub fn dbw_to_watts(p_dbw: f64) -> f64 {
    10f64.powf(p_dbw / 10.0)
}

pub fn watts_to_dbw(p_w: f64) -> f64 {
    10.0 * p_w.log10()
}

/// ℓ(ρ, k) = (1 + Σ x_j/(1−x_j)) Π (1−x_j) with x_j = ρ^{2(j+δ−1)}.
pub fn correlation_factor(params: &ChannelParams, k: usize) -> Result<f64> {
    params.validate()?;
    if k == 0 || k > params.k() {
        return Err(Error::Domain(format!(
            "round {k} outside 1..={}",
            params.k()
        )));
    }
    // Expanded as Π(1−x_j) + Σ_j x_j Π_{i≠j}(1−x_i), which keeps ℓ(ρ,1) = 1
    // exact in floating point.
    let x: Vec<f64> = (1..=k)
        .map(|j| params.rho.powi(2 * params.lag(j)))
        .collect();
    let prod_except = |skip: Option<usize>| -> f64 {
        x.iter()
            .enumerate()
            .filter(|(i, _)| Some(*i) != skip)
            .map(|(_, xi)| 1.0 - xi)
            .product()
    };
    let cross: f64 = x
        .iter()
        .enumerate()
        .map(|(j, xj)| xj * prod_except(Some(j)))
        .sum();
    Ok(prod_except(None) + cross)
}

pub fn factorial(k: usize) -> f64 {
    (1..=k).fold(1.0, |acc, i| acc * i as f64)
}

/// G_k(R) = (−1)^k + 2^R Σ_{j<k} (−1)^j (R ln2)^{k−j−1}/(k−j−1)!.
pub fn g_function(rate: f64, k: usize) -> f64 {
    let a = rate * std::f64::consts::LN_2;
    let sign = |n: usize| if n.is_multiple_of(2) { 1.0 } else { -1.0 };
    let series: f64 = (0..k)
        .map(|j| {
            let e = k - j - 1;
            sign(j) * a.powi(e as i32) / factorial(e)
        })
        .sum();
    sign(k) + rate.exp2() * series
}

/// Scheme-dependent numerator of the asymptotic outage at round `k`.
pub fn scheme_coefficient(scheme: Scheme, rate: f64, k: usize) -> f64 {
    let t = rate.exp2() - 1.0;
    match scheme {
        Scheme::TypeI => t.powi(k as i32),
        Scheme::ChaseCombining => t.powi(k as i32) / factorial(k),
        Scheme::IncrementalRedundancy => g_function(rate, k),
    }
}

/// Asymptotic outage after `k` rounds, clamped to `[0, OUTAGE_CLAMP]`.
pub fn asymptotic_outage(
    scheme: Scheme,
    params: &ChannelParams,
    policy: &PowerPolicy,
    rate: f64,
    k: usize,
) -> Result<(f64, AsymptoticFactors)> {
    if policy.len() < k {
        return Err(Error::shape(
            format!("at least {k} powers"),
            policy.len().to_string(),
        ));
    }
    let ell = correlation_factor(params, k)?;
    let mut denom = 1.0;
    for (p, xi) in policy.powers()[..k].iter().zip(&params.xi_sq) {
        if !(*p > 0.0) {
            return Err(Error::Domain(format!(
                "transmit power must be positive, got {p}"
            )));
        }
        denom *= p * xi;
    }
    let varsigma = 1.0 / (ell * denom);
    let coeff = scheme_coefficient(scheme, rate, k);
    let raw = varsigma * coeff;
    let factors = AsymptoticFactors {
        ell,
        g_k: g_function(rate, k),
        varsigma,
        raw_outage: raw,
    };
    Ok((raw.clamp(0.0, OUTAGE_CLAMP), factors))
}

/// Clamped outage after each round 1..=K.
pub fn outage_profile(
    scheme: Scheme,
    params: &ChannelParams,
    policy: &PowerPolicy,
    rate: f64,
) -> Result<Vec<f64>> {
    if policy.len() != params.k() {
        return Err(Error::shape(
            params.k().to_string(),
            policy.len().to_string(),
        ));
    }
    (1..=params.k())
        .map(|k| asymptotic_outage(scheme, params, policy, rate, k).map(|(p, _)| p))
        .collect()
}

/// Long-term average throughput R(1 − P_K)/(1 + Σ_{k<K} P_k).
pub fn ltat(rate: f64, profile: &[f64]) -> f64 {
    let Some((last, head)) = profile.split_last() else {
        return rate;
    };
    rate * (1.0 - last) / (1.0 + head.iter().sum::<f64>())
}

pub fn latency(payload_bits: f64, bandwidth: f64, eta: f64) -> Result<f64> {
    if !(eta > 0.0) {
        return Err(Error::Degenerate(format!(
            "throughput must be positive, got {eta}"
        )));
    }
    Ok(payload_bits / (eta * bandwidth))
}

/// Σ_k p_k P_{k−1} with P_0 = 1.
pub fn average_power(policy: &PowerPolicy, profile: &[f64]) -> Result<f64> {
    if profile.len() != policy.len() {
        return Err(Error::shape(
            policy.len().to_string(),
            profile.len().to_string(),
        ));
    }
    let mut prev = 1.0;
    let mut total = 0.0;
    for (p, out) in policy.powers().iter().zip(profile) {
        total += p * prev;
        prev = *out;
    }
    Ok(total)
}

/// Performance figures from an arbitrary outage profile (analytic or
/// simulated).
pub fn report_from_profile(
    policy: &PowerPolicy,
    profile: Vec<f64>,
    link: &LinkConfig,
) -> Result<PerformanceReport> {
    let eta = ltat(link.rate, &profile);
    let tau = latency(link.payload_bits, link.bandwidth, eta)?;
    let p_avg = average_power(policy, &profile)?;
    let outage_ok = *profile.last().unwrap_or(&0.0) <= link.epsilon;
    let power_ok = p_avg <= link.p_bar_watts();
    Ok(PerformanceReport {
        outage_profile: profile,
        eta,
        tau,
        p_avg,
        outage_ok,
        power_ok,
    })
}

pub fn evaluate(
    scheme: Scheme,
    params: &ChannelParams,
    policy: &PowerPolicy,
    link: &LinkConfig,
) -> Result<PerformanceReport> {
    link.validate()?;
    let profile = outage_profile(scheme, params, policy, link.rate)?;
    report_from_profile(policy, profile, link)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * b.abs().max(1e-300)
    }

    #[test]
    fn dbw_conversion() {
        assert_eq!(dbw_to_watts(0.0), 1.0);
        assert_eq!(dbw_to_watts(10.0), 10.0);
        assert!(close(dbw_to_watts(15.0), 31.6228, 1e-6));
        assert!(close(watts_to_dbw(dbw_to_watts(13.7)), 13.7, 1e-12));
    }

    #[test]
    fn correlation_factor_cases() {
        let p = ChannelParams::uniform(3, 0.0, 1).unwrap();
        assert_eq!(correlation_factor(&p, 3).unwrap(), 1.0);
        let p = ChannelParams::uniform(3, 0.7, 1).unwrap();
        assert!((correlation_factor(&p, 1).unwrap() - 1.0).abs() < 1e-15);
        let p = ChannelParams::uniform(3, 0.5, 1).unwrap();
        assert_eq!(correlation_factor(&p, 2).unwrap(), 0.984375);
        assert!(correlation_factor(&p, 4).is_err());
    }

    #[test]
    fn rho_one_is_a_domain_error() {
        let p = ChannelParams {
            rho: 1.0,
            delta: 1,
            xi_sq: vec![1.0; 2],
        };
        assert!(matches!(correlation_factor(&p, 2), Err(Error::Domain(_))));
    }

    #[test]
    fn g_function_cases() {
        assert_eq!(g_function(2.0, 1), 3.0);
        assert_eq!(g_function(0.0, 4), 0.0);
        assert!((g_function(2.0, 3) - 1.29844).abs() < 1e-5);
    }

    #[test]
    fn single_round_outage_is_scheme_independent() {
        let pol = PowerPolicy::uniform(3, 10.0).unwrap();
        for rho in [0.0, 0.3, 0.9] {
            let par = ChannelParams::uniform(3, rho, 1).unwrap();
            for s in Scheme::ALL {
                let (p, f) = asymptotic_outage(s, &par, &pol, 2.0, 1).unwrap();
                assert!((p - 0.3).abs() < 1e-15);
                assert_eq!(f.ell, 1.0);
            }
        }
    }

    #[test]
    fn chase_combining_is_type_i_over_k_factorial() {
        let par = ChannelParams::uniform(3, 0.4, 1).unwrap();
        let pol = PowerPolicy::new(vec![20.0, 30.0, 40.0]).unwrap();
        let (t1, _) = asymptotic_outage(Scheme::TypeI, &par, &pol, 2.0, 2).unwrap();
        let (cc, _) = asymptotic_outage(Scheme::ChaseCombining, &par, &pol, 2.0, 2).unwrap();
        assert!((cc - t1 / 2.0).abs() < 1e-18);
    }

    #[test]
    fn ir_three_round_value() {
        let par = ChannelParams::uniform(3, 0.5, 1).unwrap();
        let pol = PowerPolicy::uniform(3, 10.0).unwrap();
        let (p, f) = asymptotic_outage(Scheme::IncrementalRedundancy, &par, &pol, 2.0, 3).unwrap();
        assert!(close(f.ell, 0.97998, 1e-5));
        assert!(close(f.varsigma, 1.0204e-3, 1e-4));
        assert!(close(p, 1.325e-3, 1e-3));
    }

    #[test]
    fn outage_clamps_but_reports_raw() {
        let par = ChannelParams::uniform(1, 0.0, 1).unwrap();
        let pol = PowerPolicy::uniform(1, 0.01).unwrap();
        let (p, f) = asymptotic_outage(Scheme::TypeI, &par, &pol, 2.0, 1).unwrap();
        assert_eq!(p, OUTAGE_CLAMP);
        assert!((f.raw_outage - 300.0).abs() < 1e-9);
    }

    #[test]
    fn nonpositive_power_is_rejected() {
        let par = ChannelParams::uniform(2, 0.0, 1).unwrap();
        let pol = PowerPolicy::from_raw(vec![1.0, 0.0]);
        assert!(matches!(
            asymptotic_outage(Scheme::TypeI, &par, &pol, 2.0, 2),
            Err(Error::Domain(_))
        ));
        assert_eq!(PowerPolicy::new(vec![-1.0]).unwrap().powers(), &[P_MIN]);
    }

    #[test]
    fn profile_strictly_decreasing_at_high_snr() {
        let par = ChannelParams::uniform(3, 0.5, 1).unwrap();
        let pol = PowerPolicy::uniform(3, 100.0).unwrap();
        let prof = outage_profile(Scheme::TypeI, &par, &pol, 2.0).unwrap();
        assert!(prof.windows(2).all(|w| w[1] < w[0]));
        let one = ChannelParams::uniform(1, 0.5, 1).unwrap();
        let pol1 = PowerPolicy::uniform(1, 100.0).unwrap();
        let p1 = outage_profile(Scheme::TypeI, &one, &pol1, 2.0).unwrap();
        assert_eq!(
            p1,
            vec![
                asymptotic_outage(Scheme::TypeI, &one, &pol1, 2.0, 1)
                    .unwrap()
                    .0
            ]
        );
    }

    #[test]
    fn scheme_ordering_on_small_grid() {
        for rate in [1.0, 2.0, 3.0] {
            for k in 1..=4 {
                let par = ChannelParams::uniform(k, 0.5, 1).unwrap();
                let pol = PowerPolicy::uniform(k, 10.0).unwrap();
                let t1 = outage_profile(Scheme::TypeI, &par, &pol, rate).unwrap();
                let cc = outage_profile(Scheme::ChaseCombining, &par, &pol, rate).unwrap();
                let ir = outage_profile(Scheme::IncrementalRedundancy, &par, &pol, rate).unwrap();
                for i in 0..k {
                    assert!(ir[i] <= cc[i] && cc[i] <= t1[i], "R={rate} k={k} i={i}");
                }
            }
        }
    }

    #[test]
    fn throughput_and_latency() {
        assert_eq!(ltat(2.0, &[0.0, 0.0, 0.0]), 2.0);
        assert!(close(ltat(2.0, &[0.1, 0.01, 0.001]), 1.8, 1e-12));
        assert!(close(latency(1e6, 1e7, 2.0).unwrap(), 0.05, 1e-15));
        assert!(close(latency(1e6, 1e7, 1.8).unwrap(), 0.05556, 1e-4));
        let a = latency(1e6, 1e7, 1.3).unwrap();
        let b = latency(1e6, 2e7, 1.3).unwrap();
        assert!(close(b, a / 2.0, 1e-15));
        assert!(matches!(latency(1e6, 1e7, 0.0), Err(Error::Degenerate(_))));
    }

    #[test]
    fn average_power_cases() {
        let pol = PowerPolicy::new(vec![2.0, 3.0, 4.0]).unwrap();
        assert_eq!(average_power(&pol, &[0.5, 0.25, 0.1]).unwrap(), 4.5);
        assert_eq!(average_power(&pol, &[0.0, 0.0, 0.0]).unwrap(), 2.0);
        assert_eq!(average_power(&pol, &[1.0, 1.0, 1.0]).unwrap(), 9.0);
    }

    #[test]
    fn evaluate_composes_components() {
        let par = ChannelParams::uniform(3, 0.5, 1).unwrap();
        let link = LinkConfig::default();
        let pol = PowerPolicy::new(vec![29.5, 17.5, 15.2]).unwrap();
        let s = Scheme::IncrementalRedundancy;
        let rep = evaluate(s, &par, &pol, &link).unwrap();
        let prof = outage_profile(s, &par, &pol, 2.0).unwrap();
        assert_eq!(rep.outage_profile, prof);
        assert_eq!(rep.eta, ltat(2.0, &prof));
        assert_eq!(rep.tau, latency(1e6, 1e7, rep.eta).unwrap());
        assert_eq!(rep.p_avg, average_power(&pol, &prof).unwrap());
        assert!(rep.tau >= 0.05 && rep.tau <= 0.06, "tau = {}", rep.tau);
        assert!(rep.feasible());

        let tiny = PowerPolicy::uniform(3, 0.01).unwrap();
        let rep = evaluate(s, &par, &tiny, &link).unwrap();
        assert!(!rep.outage_ok);
        assert!(!rep.feasible());
    }

    #[test]
    fn scheme_parsing() {
        assert_eq!(
            "IR".parse::<Scheme>().unwrap(),
            Scheme::IncrementalRedundancy
        );
        assert_eq!("type-i".parse::<Scheme>().unwrap(), Scheme::TypeI);
        assert_eq!("cc".parse::<Scheme>().unwrap(), Scheme::ChaseCombining);
        assert!("bogus".parse::<Scheme>().is_err());
        for s in Scheme::ALL {
            assert_eq!(s.tag().parse::<Scheme>().unwrap(), s);
        }
    }

    #[test]
    fn link_rate_must_match_codeword() {
        let mut link = LinkConfig {
            bits_per_codeword: Some(200),
            codeword_len: Some(100),
            ..LinkConfig::default()
        };
        assert!(link.validate().is_ok());
        link.codeword_len = Some(300);
        assert!(link.validate().is_err());
    }
}
