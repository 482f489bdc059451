//! Reverse-mode differentiation over small dense matrices.
//!
//! A [`Graph`] is built once (define-then-run), evaluated with
//! [`Graph::forward`] and differentiated with [`Graph::backward`]. Nodes are
//! stored in creation order, which is always a topological order.
//!
//! Binary elementwise ops accept equal shapes or a 1×1 operand, which is
//! broadcast.

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Constant,
    Parameter(usize),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Relu(NodeId),
    /// max(x, floor)
    FloorClamp(NodeId, f64),
    /// min(x, ceil)
    CeilClamp(NodeId, f64),
    Log(NodeId),
    /// x^c for a constant exponent c.
    Pow(NodeId, f64),
    Sum(NodeId),
    Neg(NodeId),
    /// Single entry (i, j) as a 1×1 node.
    Element(NodeId, usize, usize),
}

#[derive(Debug, Clone)]
pub struct ComputeNode {
    pub op: Op,
    pub value: Matrix,
    pub adjoint: Matrix,
}

#[derive(Debug, Clone)]
pub struct GradientReport {
    /// One gradient per parameter, in parameter creation order.
    pub gradients: Vec<Matrix>,
    /// Filled in by [`finite_diff_check`].
    pub max_rel_error: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<ComputeNode>,
    params: Vec<NodeId>,
    evaluated: bool,
}

fn leaf(op: Op, value: Matrix) -> ComputeNode {
    let adjoint = Matrix::zeros(value.rows(), value.cols());
    ComputeNode { op, value, adjoint }
}

fn broadcast(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
    if a.shape() == b.shape() {
        let data = a
            .as_slice()
            .iter()
            .zip(b.as_slice())
            .map(|(x, y)| f(*x, *y))
            .collect();
        Matrix::from_vec(a.rows(), a.cols(), data)
    } else if b.is_scalar() {
        let y = b.item();
        Ok(a.map(|x| f(x, y)))
    } else if a.is_scalar() {
        let x = a.item();
        Ok(b.map(|y| f(x, y)))
    } else {
        Err(Error::shape(
            format!("{}x{} or a scalar", a.rows(), a.cols()),
            format!("{}x{}", b.rows(), b.cols()),
        ))
    }
}

/// Adds `contrib` (shaped like the op output) into `adj`, summing over the
/// broadcast dimension when `adj` is 1×1 and the output is not.
fn accumulate(adj: &mut Matrix, contrib: &Matrix) {
    if adj.shape() == contrib.shape() {
        adj.add_scaled(contrib, 1.0);
    } else {
        adj.as_mut_slice()[0] += contrib.sum();
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op) -> NodeId {
        self.evaluated = false;
        self.nodes.push(leaf(op, Matrix::zeros(0, 0)));
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.evaluated = false;
        self.nodes.push(leaf(Op::Constant, value));
        NodeId(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.constant(Matrix::scalar(value))
    }

    pub fn parameter(&mut self, value: Matrix) -> NodeId {
        self.evaluated = false;
        let idx = self.params.len();
        self.nodes.push(leaf(Op::Parameter(idx), value));
        let id = NodeId(self.nodes.len() - 1);
        self.params.push(id);
        id
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Div(a, b))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Relu(a))
    }

    pub fn floor_clamp(&mut self, a: NodeId, floor: f64) -> NodeId {
        self.push(Op::FloorClamp(a, floor))
    }

    pub fn ceil_clamp(&mut self, a: NodeId, ceil: f64) -> NodeId {
        self.push(Op::CeilClamp(a, ceil))
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Log(a))
    }

    pub fn pow(&mut self, a: NodeId, exponent: f64) -> NodeId {
        self.push(Op::Pow(a, exponent))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Neg(a))
    }

    pub fn element(&mut self, a: NodeId, i: usize, j: usize) -> NodeId {
        self.push(Op::Element(a, i, j))
    }

    /// `a * k` for a constant `k`.
    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let c = self.scalar(k);
        self.mul(a, c)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &ComputeNode {
        &self.nodes[id.0]
    }

    pub fn parameters(&self) -> &[NodeId] {
        &self.params
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    /// Rebinds a constant or parameter; dependent values are stale until
    /// the next [`Graph::forward`].
    pub fn set_value(&mut self, id: NodeId, value: Matrix) -> Result<()> {
        let node = &mut self.nodes[id.0];
        match node.op {
            Op::Constant | Op::Parameter(_) => {
                node.adjoint = Matrix::zeros(value.rows(), value.cols());
                node.value = value;
                self.evaluated = false;
                Ok(())
            }
            _ => Err(Error::Config("only leaf nodes can be rebound".into())),
        }
    }

    fn eval_node(&self, op: &Op) -> Result<Matrix> {
        let v = |id: &NodeId| &self.nodes[id.0].value;
        Ok(match op {
            Op::Constant | Op::Parameter(_) => unreachable!("leaves are not recomputed"),
            Op::Add(a, b) => broadcast(v(a), v(b), |x, y| x + y)?,
            Op::Sub(a, b) => broadcast(v(a), v(b), |x, y| x - y)?,
            Op::Mul(a, b) => broadcast(v(a), v(b), |x, y| x * y)?,
            Op::Div(a, b) => {
                if v(b).as_slice().contains(&0.0) {
                    return Err(Error::Domain("division by zero".into()));
                }
                broadcast(v(a), v(b), |x, y| x / y)?
            }
            Op::MatMul(a, b) => v(a).matmul(v(b))?,
            Op::Relu(a) => v(a).map(|x| x.max(0.0)),
            Op::FloorClamp(a, f) => v(a).map(|x| x.max(*f)),
            Op::CeilClamp(a, c) => v(a).map(|x| x.min(*c)),
            Op::Log(a) => {
                if let Some(x) = v(a).as_slice().iter().find(|x| !(**x > 0.0)) {
                    return Err(Error::Domain(format!("log of nonpositive value {x}")));
                }
                v(a).map(f64::ln)
            }
            Op::Pow(a, c) => v(a).map(|x| x.powf(*c)),
            Op::Sum(a) => Matrix::scalar(v(a).sum()),
            Op::Neg(a) => v(a).map(|x| -x),
            Op::Element(a, i, j) => {
                let m = v(a);
                if *i >= m.rows() || *j >= m.cols() {
                    return Err(Error::shape(
                        format!("index within {}x{}", m.rows(), m.cols()),
                        format!("({i}, {j})"),
                    ));
                }
                Matrix::scalar(m[(*i, *j)])
            }
        })
    }

    /// Evaluates every node in creation order and returns the value of
    /// `root`.
    pub fn forward(&mut self, root: NodeId) -> Result<&Matrix> {
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Constant | Op::Parameter(_)) {
                continue;
            }
            let value = self.eval_node(&self.nodes[i].op)?;
            let node = &mut self.nodes[i];
            if node.adjoint.shape() != value.shape() {
                node.adjoint = Matrix::zeros(value.rows(), value.cols());
            }
            node.value = value;
        }
        self.evaluated = true;
        Ok(&self.nodes[root.0].value)
    }

    /// Reverse accumulation from `root`, seeded with ones (so a non-scalar
    /// root is differentiated through its sum).
    pub fn backward(&mut self, root: NodeId) -> Result<GradientReport> {
        if !self.evaluated {
            return Err(Error::Config("backward called before forward".into()));
        }
        for node in &mut self.nodes {
            node.adjoint.fill(0.0);
        }
        self.nodes[root.0].adjoint.fill(1.0);

        for i in (0..=root.0).rev() {
            let op = self.nodes[i].op.clone();
            if matches!(op, Op::Constant | Op::Parameter(_)) {
                continue;
            }
            let g = self.nodes[i].adjoint.clone();
            if g.as_slice().iter().all(|x| *x == 0.0) {
                continue;
            }
            self.propagate(&op, &g)?;
        }

        Ok(GradientReport {
            gradients: self
                .params
                .iter()
                .map(|id| self.nodes[id.0].adjoint.clone())
                .collect(),
            max_rel_error: None,
        })
    }

    fn propagate(&mut self, op: &Op, g: &Matrix) -> Result<()> {
        let val = |s: &Self, id: NodeId| s.nodes[id.0].value.clone();
        match *op {
            Op::Constant | Op::Parameter(_) => {}
            Op::Add(a, b) => {
                accumulate(&mut self.nodes[a.0].adjoint, g);
                accumulate(&mut self.nodes[b.0].adjoint, g);
            }
            Op::Sub(a, b) => {
                accumulate(&mut self.nodes[a.0].adjoint, g);
                accumulate(&mut self.nodes[b.0].adjoint, &g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(self, a), val(self, b));
                let ga = broadcast(g, &vb, |x, y| x * y)?;
                let gb = broadcast(g, &va, |x, y| x * y)?;
                accumulate(&mut self.nodes[a.0].adjoint, &ga);
                accumulate(&mut self.nodes[b.0].adjoint, &gb);
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(self, a), val(self, b));
                let ga = broadcast(g, &vb, |x, y| x / y)?;
                let q = broadcast(&va, &vb, |x, y| x / (y * y))?;
                let gb = broadcast(g, &q, |x, y| -x * y)?;
                accumulate(&mut self.nodes[a.0].adjoint, &ga);
                accumulate(&mut self.nodes[b.0].adjoint, &gb);
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (val(self, a), val(self, b));
                let ga = g.matmul(&vb.transpose())?;
                let gb = va.transpose().matmul(g)?;
                accumulate(&mut self.nodes[a.0].adjoint, &ga);
                accumulate(&mut self.nodes[b.0].adjoint, &gb);
            }
            Op::Relu(a) => self.gated(a, g, |x| x > 0.0),
            Op::FloorClamp(a, f) => self.gated(a, g, |x| x > f),
            Op::CeilClamp(a, c) => self.gated(a, g, |x| x < c),
            Op::Log(a) => {
                let ga = broadcast(g, &val(self, a), |x, y| x / y)?;
                accumulate(&mut self.nodes[a.0].adjoint, &ga);
            }
            Op::Pow(a, c) => {
                let ga = broadcast(g, &val(self, a), |x, y| x * c * y.powf(c - 1.0))?;
                accumulate(&mut self.nodes[a.0].adjoint, &ga);
            }
            Op::Sum(a) => {
                let s = g.item();
                self.nodes[a.0]
                    .adjoint
                    .as_mut_slice()
                    .iter_mut()
                    .for_each(|x| *x += s);
            }
            Op::Neg(a) => accumulate(&mut self.nodes[a.0].adjoint, &g.scale(-1.0)),
            Op::Element(a, i, j) => self.nodes[a.0].adjoint[(i, j)] += g.item(),
        }
        Ok(())
    }

    /// Passes the adjoint through where `active(input)` holds; zero
    /// elsewhere, including exactly at the kink.
    fn gated(&mut self, a: NodeId, g: &Matrix, active: impl Fn(f64) -> bool) {
        let node = &mut self.nodes[a.0];
        for ((adj, x), gi) in node
            .adjoint
            .as_mut_slice()
            .iter_mut()
            .zip(node.value.as_slice())
            .zip(g.as_slice())
        {
            if active(*x) {
                *adj += gi;
            }
        }
    }

    /// On/off pattern of every relu and clamp entry.
    fn activity(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            let (a, test): (NodeId, Box<dyn Fn(f64) -> bool>) = match node.op {
                Op::Relu(a) => (a, Box::new(|x| x > 0.0)),
                Op::FloorClamp(a, f) => (a, Box::new(move |x| x > f)),
                Op::CeilClamp(a, c) => (a, Box::new(move |x| x < c)),
                _ => continue,
            };
            out.extend(self.nodes[a.0].value.as_slice().iter().map(|x| test(*x)));
        }
        out
    }
}

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Debug, Clone)]
pub struct FiniteDiffReport {
    /// Largest relative error over the checked coordinates.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose perturbation flips a relu/clamp on or off, with
    /// their relative error. These are reported but not counted.
    pub excluded: Vec<(usize, usize, f64)>,
    pub analytic: GradientReport,
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

/// Central differences over every parameter entry of a scalar `root`.
pub fn finite_diff_check(graph: &mut Graph, root: NodeId, step: f64) -> Result<FiniteDiffReport> {
    if !(step > 0.0) {
        return Err(Error::Config(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    graph.forward(root)?;
    let base_activity = graph.activity();
    let mut analytic = graph.backward(root)?;

    let mut max_rel = 0.0f64;
    let mut checked = 0;
    let mut excluded = Vec::new();
    let params = graph.params.clone();
    for (pi, id) in params.iter().enumerate() {
        let original = graph.value(*id).clone();
        for e in 0..original.len() {
            let mut probe = |delta: f64| -> Result<(f64, bool)> {
                let mut m = original.clone();
                m.as_mut_slice()[e] += delta;
                graph.set_value(*id, m)?;
                let v = graph.forward(root)?.sum();
                Ok((v, graph.activity() == base_activity))
            };
            let (plus, same_p) = probe(step)?;
            let (minus, same_m) = probe(-step)?;
            let fd = (plus - minus) / (2.0 * step);
            let err = relative_error(analytic.gradients[pi].as_slice()[e], fd);
            if same_p && same_m {
                max_rel = max_rel.max(err);
                checked += 1;
            } else {
                excluded.push((pi, e, err));
            }
        }
        graph.set_value(*id, original)?;
    }
    graph.forward(root)?;
    analytic.max_rel_error = Some(max_rel);
    Ok(FiniteDiffReport {
        max_rel_error: max_rel,
        checked,
        excluded,
        analytic,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_and_relu() {
        let mut g = Graph::new();
        let x = g.parameter(Matrix::scalar(3.0));
        let y = g.mul(x, x);
        assert_eq!(g.forward(y).unwrap().item(), 9.0);
        let r = g.backward(y).unwrap();
        assert_eq!(r.gradients[0].item(), 6.0);

        let c = g.scalar(-2.0);
        let z = g.relu(c);
        assert_eq!(g.forward(z).unwrap().item(), 0.0);
    }

    #[test]
    fn relu_subgradient_at_zero() {
        let mut g = Graph::new();
        let x = g.parameter(Matrix::scalar(0.0));
        let y = g.relu(x);
        g.forward(y).unwrap();
        assert_eq!(g.backward(y).unwrap().gradients[0].item(), 0.0);
    }

    #[test]
    fn bilinear_matmul_gradient() {
        let mut g = Graph::new();
        let a = g.parameter(Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let b = g.constant(Matrix::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap());
        let ab = g.matmul(a, b);
        let s = g.sum(ab);
        g.forward(s).unwrap();
        let grad = &g.backward(s).unwrap().gradients[0];
        // d sum(AB)/dA = 1 Bᵀ: row sums of B in every row
        assert_eq!(grad.as_slice(), &[11.0, 15.0, 11.0, 15.0]);
    }

    #[test]
    fn repeated_backward_is_stable() {
        let mut g = Graph::new();
        let x = g.parameter(Matrix::column(&[0.5, 1.5, -2.0]));
        let l = g.pow(x, 3.0);
        let s = g.sum(l);
        g.forward(s).unwrap();
        let a = g.backward(s).unwrap().gradients[0].clone();
        let b = g.backward(s).unwrap().gradients[0].clone();
        assert_eq!(a, b);
    }

    #[test]
    fn domain_errors() {
        let mut g = Graph::new();
        let x = g.scalar(-1.0);
        let l = g.log(x);
        assert!(matches!(g.forward(l), Err(Error::Domain(_))));

        let mut g = Graph::new();
        let one = g.scalar(1.0);
        let zero = g.scalar(0.0);
        let d = g.div(one, zero);
        assert!(matches!(g.forward(d), Err(Error::Domain(_))));
    }

    #[test]
    fn scalar_broadcast_gradients() {
        let mut g = Graph::new();
        let v = g.parameter(Matrix::column(&[1.0, 2.0, 3.0]));
        let k = g.parameter(Matrix::scalar(2.0));
        let m = g.mul(v, k);
        let d = g.div(m, k);
        let t = g.add(d, m);
        let s = g.sum(t);
        let rep = finite_diff_check(&mut g, s, 1e-5).unwrap();
        assert!(rep.max_rel_error < 1e-8, "{}", rep.max_rel_error);
        assert_eq!(rep.analytic.gradients[1].item(), 6.0);
    }

    #[test]
    fn finite_difference_on_affine_map() {
        let mut g = Graph::new();
        let w = g.parameter(Matrix::from_rows(&[vec![0.3, -1.2], vec![2.0, 0.7]]).unwrap());
        let x = g.constant(Matrix::column(&[1.5, -0.5]));
        let y = g.matmul(w, x);
        let c = g.scalar(4.0);
        let z = g.add(y, c);
        let s = g.sum(z);
        let rep = finite_diff_check(&mut g, s, 1e-4).unwrap();
        assert!(rep.max_rel_error < 1e-8);
        assert_eq!(rep.checked, 4);
    }

    #[test]
    fn finite_difference_on_quadratic() {
        let mut g = Graph::new();
        let x = g.parameter(Matrix::column(&[0.7, -1.3, 2.2]));
        let sq = g.mul(x, x);
        let n = g.neg(sq);
        let s = g.sum(n);
        let rep = finite_diff_check(&mut g, s, 1e-4).unwrap();
        assert!(rep.max_rel_error < 1e-6);
    }

    #[test]
    fn clamp_at_kink_is_excluded_not_failed() {
        let mut g = Graph::new();
        let x = g.parameter(Matrix::column(&[1.0, 3.0]));
        let f = g.floor_clamp(x, 1.0);
        let s = g.sum(f);
        let rep = finite_diff_check(&mut g, s, 1e-4).unwrap();
        assert_eq!(rep.checked, 1);
        assert_eq!(rep.excluded.len(), 1);
        let (_, e, err) = rep.excluded[0];
        assert_eq!(e, 0);
        assert!(err > 0.1);
        assert!(rep.max_rel_error < 1e-8);
    }

    #[test]
    fn element_and_ceil() {
        let mut g = Graph::new();
        let x = g.parameter(Matrix::column(&[0.5, 2.0]));
        let c = g.ceil_clamp(x, 1.0);
        let e0 = g.element(c, 0, 0);
        let e1 = g.element(c, 1, 0);
        let p = g.mul(e0, e1);
        assert_eq!(g.forward(p).unwrap().item(), 0.5);
        let grad = &g.backward(p).unwrap().gradients[0];
        assert_eq!(grad.as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn backward_requires_forward() {
        let mut g = Graph::new();
        let x = g.parameter(Matrix::scalar(1.0));
        let y = g.neg(x);
        assert!(g.backward(y).is_err());
    }

    #[test]
    fn shape_mismatch_surfaces_on_forward() {
        let mut g = Graph::new();
        let a = g.constant(Matrix::zeros(2, 3));
        let b = g.constant(Matrix::zeros(2, 3));
        let m = g.matmul(a, b);
        assert!(matches!(g.forward(m), Err(Error::ShapeMismatch { .. })));
    }
}
