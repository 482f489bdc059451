//! Round-correlation graph fed to the GCN.
//!
//! Node `i` is HARQ round `i`; the edge weight between rounds `i < j` is the
//! channel correlation E{h_i* h_j}. Later rounds cannot influence earlier
//! ones, so the matrix is upper triangular.

use std::fmt;
use std::str::FromStr;

use crate::analytics::ChannelParams;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix {
    pub entries: Matrix,
    /// diag(H).
    pub degree: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency {
    pub entries: Matrix,
}

impl NormalizedAdjacency {
    pub fn k(&self) -> usize {
        self.entries.rows()
    }
}

/// How the correlation matrix is turned into a propagation operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Normalization {
    /// D_in^{-1/2} Hᵀ D_in^{-1/2} with D_in the column sums of H: round `j`
    /// aggregates features from rounds `i ≤ j`.
    #[default]
    Causal,
    /// D^{-1/2} H D^{-1/2} with D = diag(H).
    DiagonalDegree,
}

impl Normalization {
    pub fn tag(self) -> &'static str {
        match self {
            Normalization::Causal => "causal",
            Normalization::DiagonalDegree => "diagonal",
        }
    }
}

impl fmt::Display for Normalization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Normalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "causal" => Ok(Normalization::Causal),
            "diagonal" | "diag" => Ok(Normalization::DiagonalDegree),
            _ => Err(Error::Config(format!(
                "unknown normalization '{s}' (expected causal or diagonal)"
            ))),
        }
    }
}

/// H with α_ii = ξ_i² and α_ij = ξ_i ξ_j ρ^{i+j+2δ−2} for i < j.
pub fn correlation_matrix(params: &ChannelParams) -> Result<CorrelationMatrix> {
    params.validate()?;
    let k = params.k();
    let xi: Vec<f64> = params.xi_sq.iter().map(|x| x.sqrt()).collect();
    let mut h = Matrix::zeros(k, k);
    for i in 0..k {
        h[(i, i)] = params.xi_sq[i];
        for j in i + 1..k {
            // 1-based exponent i + j + 2δ − 2
            let e = (i + 1 + j + 1) as i32 + 2 * params.delta as i32 - 2;
            h[(i, j)] = xi[i] * xi[j] * params.rho.powi(e);
        }
    }
    Ok(CorrelationMatrix {
        entries: h,
        degree: params.xi_sq.clone(),
    })
}

pub fn normalize_adjacency(h: &CorrelationMatrix) -> Result<NormalizedAdjacency> {
    let k = h.entries.rows();
    if h.degree.len() != k {
        return Err(Error::shape(k.to_string(), h.degree.len().to_string()));
    }
    if let Some(d) = h.degree.iter().find(|d| !(**d > 0.0)) {
        return Err(Error::Degenerate(format!(
            "degree entry {d} is not positive"
        )));
    }
    let mut a = Matrix::zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            a[(i, j)] = h.entries[(i, j)] / (h.degree[i] * h.degree[j]).sqrt();
        }
    }
    Ok(NormalizedAdjacency { entries: a })
}

pub fn causal_adjacency(h: &CorrelationMatrix) -> Result<NormalizedAdjacency> {
    let k = h.entries.rows();
    let d_in: Vec<f64> = (0..k)
        .map(|j| (0..k).map(|i| h.entries[(i, j)]).sum())
        .collect();
    if let Some(d) = d_in.iter().find(|d| !(**d > 0.0)) {
        return Err(Error::Degenerate(format!("in-degree {d} is not positive")));
    }
    let mut a = Matrix::zeros(k, k);
    for j in 0..k {
        for i in 0..k {
            a[(j, i)] = h.entries[(i, j)] / (d_in[i] * d_in[j]).sqrt();
        }
    }
    Ok(NormalizedAdjacency { entries: a })
}

pub fn adjacency(params: &ChannelParams, norm: Normalization) -> Result<NormalizedAdjacency> {
    let h = correlation_matrix(params)?;
    match norm {
        Normalization::Causal => causal_adjacency(&h),
        Normalization::DiagonalDegree => normalize_adjacency(&h),
    }
}
