//! Graph-convolutional power-allocation policy.
//!
//! Each layer computes V ← σ(Â V W) over the K round nodes, starting from
//! V⁰ = (p̄/K)·1_K. The last layer is linear and its output is floored at
//! [`P_MIN`] to give one transmit power per round.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::analytics::{PowerPolicy, P_MIN};
use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::graph::{Normalization, NormalizedAdjacency};
use crate::matrix::Matrix;

const CHECKPOINT_MAGIC: &str = "HARQGCN-CKPT";
const CHECKPOINT_VERSION: u32 = 1;
/// Redraw limit when an initial draw leaves the network dead or
/// ill-conditioned.
const MAX_INIT_DRAWS: usize = 64;
/// Largest accepted Σ|∂out/∂w| / out at initialization. At the default Adam
/// step of 5e-4 this bounds the first-order output change of one step to
/// one half.
pub const MAX_INIT_SENSITIVITY: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Linear,
}

impl Activation {
    fn tag(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Linear => "linear",
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Linear => x,
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "linear" => Ok(Activation::Linear),
            _ => Err(Error::Config(format!("unknown activation '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    /// Feature widths n_0..n_L.
    pub dims: Vec<usize>,
    /// One activation per weight matrix.
    pub activations: Vec<Activation>,
}

impl Default for LayerSpec {
    fn default() -> Self {
        Self::relu_stack(vec![1, 16, 32, 16, 2, 1])
    }
}

impl LayerSpec {
    /// ReLU on every layer but the last, which is linear.
    pub fn relu_stack(dims: Vec<usize>) -> Self {
        let n = dims.len().saturating_sub(1);
        let mut activations = vec![Activation::Relu; n];
        if let Some(last) = activations.last_mut() {
            *last = Activation::Linear;
        }
        Self { dims, activations }
    }

    pub fn layers(&self) -> usize {
        self.activations.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.len() < 2 || self.activations.len() != self.dims.len() - 1 {
            return Err(Error::Config(format!(
                "layer spec needs n+1 widths for n activations, got {} and {}",
                self.dims.len(),
                self.activations.len()
            )));
        }
        if self.dims[0] != 1 || *self.dims.last().unwrap() != 1 {
            return Err(Error::Config("input and output widths must be 1".into()));
        }
        if self.dims.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GcnWeights {
    pub spec: LayerSpec,
    pub matrices: Vec<Matrix>,
    pub seed: u64,
}

impl GcnWeights {
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.matrices.len() != self.spec.layers() {
            return Err(Error::shape(
                format!("{} weight matrices", self.spec.layers()),
                self.matrices.len().to_string(),
            ));
        }
        for (l, m) in self.matrices.iter().enumerate() {
            let want = (self.spec.dims[l], self.spec.dims[l + 1]);
            if m.shape() != want {
                return Err(Error::shape(
                    format!("layer {l} of {}x{}", want.0, want.1),
                    format!("{}x{}", m.rows(), m.cols()),
                ));
            }
            if !m.is_finite() {
                return Err(Error::Config(format!("layer {l} has non-finite entries")));
            }
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.matrices.iter().map(Matrix::len).sum()
    }
}

fn glorot_draw(spec: &LayerSpec, rng: &mut ChaCha8Rng) -> Vec<Matrix> {
    spec.dims
        .windows(2)
        .map(|w| {
            let lim = (6.0 / (w[0] + w[1]) as f64).sqrt();
            let data = (0..w[0] * w[1])
                .map(|_| rng.random_range(-lim..lim))
                .collect();
            Matrix::from_vec(w[0], w[1], data).expect("sized by construction")
        })
        .collect()
}

/// Plain Glorot-uniform draw, U(±√(6/(n_l+n_{l+1}))).
pub fn glorot_uniform(spec: &LayerSpec, seed: u64) -> Result<GcnWeights> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(GcnWeights {
        spec: spec.clone(),
        matrices: glorot_draw(spec, &mut rng),
        seed,
    })
}

/// Gain of the network on a single isolated node with unit input.
fn unit_gain(spec: &LayerSpec, matrices: &[Matrix]) -> f64 {
    let mut v = Matrix::scalar(1.0);
    for (w, act) in matrices.iter().zip(&spec.activations) {
        v = v.matmul(w).expect("validated shapes").map(|x| act.apply(x));
    }
    v.item()
}

/// Σ|∂out/∂w| / out for an isolated node with unit input.
pub fn init_sensitivity(spec: &LayerSpec, matrices: &[Matrix]) -> Result<f64> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = matrices.iter().map(|m| g.parameter(m.clone())).collect();
    let adj = NormalizedAdjacency {
        entries: Matrix::identity(1),
    };
    let out = build_forward(&mut g, &adj, spec, &ids, 1.0)?;
    let v = g.forward(out)?.item();
    let grads = g.backward(out)?.gradients;
    let l1: f64 = grads
        .iter()
        .flat_map(|m| m.as_slice())
        .map(|x| x.abs())
        .sum();
    Ok(l1 / v)
}

/// Glorot-uniform draw, then the last matrix is rescaled so that an
/// isolated node maps its input to itself. Draws whose ReLU chain is dead
/// (zero gain) or whose output is too sensitive to a single optimizer step
/// (see [`MAX_INIT_SENSITIVITY`]) are discarded and redrawn from the same
/// stream.
pub fn init_weights(spec: &LayerSpec, seed: u64) -> Result<GcnWeights> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_INIT_DRAWS {
        let mut matrices = glorot_draw(spec, &mut rng);
        let gain = unit_gain(spec, &matrices);
        if gain == 0.0 || !gain.is_finite() {
            continue;
        }
        let last = matrices.last_mut().expect("at least one layer");
        *last = last.scale(1.0 / gain);
        if init_sensitivity(spec, &matrices)? > MAX_INIT_SENSITIVITY {
            continue;
        }
        return Ok(GcnWeights {
            spec: spec.clone(),
            matrices,
            seed,
        });
    }
    Err(Error::Degenerate(format!(
        "no live initialization within {MAX_INIT_DRAWS} draws for seed {seed}"
    )))
}

/// Pre-clamp network output, a K×1 column.
pub fn forward_raw(adj: &NormalizedAdjacency, weights: &GcnWeights, p_bar: f64) -> Result<Matrix> {
    weights.validate()?;
    let k = adj.k();
    if adj.entries.cols() != k {
        return Err(Error::shape(
            "square adjacency",
            format!("{k}x{}", adj.entries.cols()),
        ));
    }
    let mut v = Matrix::filled(k, 1, p_bar / k as f64);
    for (w, act) in weights.matrices.iter().zip(&weights.spec.activations) {
        v = adj.entries.matmul(&v)?.matmul(w)?.map(|x| act.apply(x));
    }
    Ok(v)
}

pub fn forward(adj: &NormalizedAdjacency, weights: &GcnWeights, p_bar: f64) -> Result<PowerPolicy> {
    let raw = forward_raw(adj, weights, p_bar)?;
    Ok(clamp_output(raw.as_slice()))
}

pub fn clamp_output(raw: &[f64]) -> PowerPolicy {
    PowerPolicy::from_raw(raw.iter().map(|x| x.max(P_MIN)).collect())
}

/// Adds the policy network to `graph`. `params` are the weight nodes in
/// layer order; returns the floored K×1 power column.
pub fn build_forward(
    graph: &mut Graph,
    adj: &NormalizedAdjacency,
    spec: &LayerSpec,
    params: &[NodeId],
    p_bar: f64,
) -> Result<NodeId> {
    if params.len() != spec.layers() {
        return Err(Error::shape(
            spec.layers().to_string(),
            params.len().to_string(),
        ));
    }
    let k = adj.k();
    let a = graph.constant(adj.entries.clone());
    let mut v = graph.constant(Matrix::filled(k, 1, p_bar / k as f64));
    for (w, act) in params.iter().zip(&spec.activations) {
        let av = graph.matmul(a, v);
        v = graph.matmul(av, *w);
        if *act == Activation::Relu {
            v = graph.relu(v);
        }
    }
    Ok(graph.floor_clamp(v, P_MIN))
}

/// Weights together with the adjacency normalization they were trained
/// against.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub weights: GcnWeights,
    pub normalization: Normalization,
}

impl Checkpoint {
    pub fn write_to(&self, mut out: impl Write) -> Result<()> {
        let w = &self.weights;
        writeln!(out, "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}")?;
        writeln!(out, "seed {}", w.seed)?;
        writeln!(out, "normalization {}", self.normalization)?;
        let dims: Vec<String> = w.spec.dims.iter().map(ToString::to_string).collect();
        writeln!(out, "dims {}", dims.join(" "))?;
        let acts: Vec<&str> = w.spec.activations.iter().map(|a| a.tag()).collect();
        writeln!(out, "activations {}", acts.join(" "))?;
        for (l, m) in w.matrices.iter().enumerate() {
            writeln!(out, "matrix {l} {} {}", m.rows(), m.cols())?;
            for i in 0..m.rows() {
                let row: Vec<String> = m.row(i).iter().map(|x| format!("{x:e}")).collect();
                writeln!(out, "{}", row.join(" "))?;
            }
        }
        Ok(())
    }

    pub fn read_from(input: impl BufRead) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        let mut lines = input.lines();
        let mut next = || -> Result<String> {
            lines
                .next()
                .ok_or_else(|| bad("unexpected end of file"))?
                .map_err(Error::from)
        };
        let header = next()?;
        let mut h = header.split_whitespace();
        if h.next() != Some(CHECKPOINT_MAGIC) {
            return Err(bad("missing magic header"));
        }
        let version: u32 = h
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad("bad version"))?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let field = |line: String, key: &str| -> Result<String> {
            line.strip_prefix(key)
                .map(|s| s.trim().to_string())
                .ok_or_else(|| Error::Checkpoint(format!("expected '{key}' line")))
        };
        let seed: u64 = field(next()?, "seed")?
            .parse()
            .map_err(|_| bad("bad seed"))?;
        let normalization: Normalization = field(next()?, "normalization")?
            .parse()
            .map_err(|_| bad("bad normalization"))?;
        let dims = field(next()?, "dims")?
            .split_whitespace()
            .map(|d| d.parse::<usize>().map_err(|_| bad("bad dims")))
            .collect::<Result<Vec<_>>>()?;
        let activations = field(next()?, "activations")?
            .split_whitespace()
            .map(|a| a.parse::<Activation>().map_err(|_| bad("bad activation")))
            .collect::<Result<Vec<_>>>()?;
        let spec = LayerSpec { dims, activations };
        spec.validate()
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut matrices = Vec::with_capacity(spec.layers());
        for l in 0..spec.layers() {
            let head = field(next()?, "matrix")?;
            let parts: Vec<usize> = head
                .split_whitespace()
                .map(|x| x.parse().map_err(|_| bad("bad matrix header")))
                .collect::<Result<_>>()?;
            if parts.len() != 3 || parts[0] != l {
                return Err(bad("bad matrix header"));
            }
            let (r, c) = (parts[1], parts[2]);
            let mut data = Vec::with_capacity(r * c);
            for _ in 0..r {
                let row = next()?;
                for x in row.split_whitespace() {
                    data.push(x.parse::<f64>().map_err(|_| bad("bad matrix entry"))?);
                }
            }
            matrices
                .push(Matrix::from_vec(r, c, data).map_err(|e| Error::Checkpoint(e.to_string()))?);
        }
        let weights = GcnWeights {
            spec,
            matrices,
            seed,
        };
        weights
            .validate()
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(Self {
            weights,
            normalization,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}
