//! Reverse-mode differentiation over a recorded tape of tensor operations.
//!
//! Operations are evaluated as they are recorded, so every node always holds
//! its forward value. Leaves can be rebound (`forward`, `set_value`) and the
//! whole tape re-evaluated in recording order, which is a valid topological
//! order by construction.
//!
//! Gradients are kept in one slot per node. `backward` computes the
//! contribution of a single scalar seed in a scratch buffer and then either
//! overwrites the slots or sums into them, so several losses can be
//! differentiated separately and combined by the caller.

use crate::tensor::{matmul, matmul_nt, matmul_tn, Tensor};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf { name: Option<String> },
    MatMul(NodeId, NodeId),
    BiasAdd(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Softmax(NodeId),
    Log(NodeId),
    Exp(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    /// `out[μ] = x[μ, labels[μ]]`
    Select(NodeId, Vec<usize>),
    /// `out[i, j] = Σ_μ x[μ, i] · 1[labels[μ] = j]`
    Contract {
        input: NodeId,
        labels: Vec<usize>,
        classes: usize,
    },
    StopGradient(NodeId),
    /// `out = 1[x ≥ threshold]`; carries no gradient.
    Mask(NodeId, f64),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::MatMul(..) => "matmul",
            Op::BiasAdd(..) => "bias_add",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(..) => "relu",
            Op::Softmax(..) => "softmax",
            Op::Log(..) => "log",
            Op::Exp(..) => "exp",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Select(..) => "select",
            Op::Contract { .. } => "one_hot_contract",
            Op::StopGradient(..) => "stop_gradient",
            Op::Mask(..) => "mask",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Tensor>,
    stale: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A named leaf whose value is supplied through [`Graph::forward`].
    pub fn input(&mut self, name: &str, value: Tensor) -> NodeId {
        self.leaf(Some(name.to_string()), value)
    }

    /// A named trainable leaf.
    pub fn parameter(&mut self, name: &str, value: Tensor) -> NodeId {
        self.leaf(Some(name.to_string()), value)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(None, value)
    }

    fn leaf(&mut self, name: Option<String>, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf { name },
            value,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient slot of `id` after the last [`Graph::backward`]; `None` before
    /// any backward pass or for nodes recorded after it.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0)
    }

    pub fn zero_grad(&mut self) {
        self.grads.clear();
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::MatMul(a, b))
    }

    pub fn bias_add(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        self.push(Op::BiasAdd(x, bias))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        self.push(Op::Scale(a, factor))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Relu(a))
    }

    /// Row-wise softmax of a matrix.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Softmax(a))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Log(a))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Exp(a))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Mean(a))
    }

    /// Picks `x[μ, labels[μ]]` for every row μ.
    pub fn select(&mut self, x: NodeId, labels: &[usize]) -> Result<NodeId> {
        self.push(Op::Select(x, labels.to_vec()))
    }

    /// `xᵀ · onehot(labels)`: a `[cols(x) × classes]` matrix.
    pub fn one_hot_contract(
        &mut self,
        x: NodeId,
        labels: &[usize],
        classes: usize,
    ) -> Result<NodeId> {
        self.push(Op::Contract {
            input: x,
            labels: labels.to_vec(),
            classes,
        })
    }

    /// Forward value is `x`; backward stops here.
    pub fn stop_gradient(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::StopGradient(x))
    }

    /// Elementwise indicator `x ≥ threshold`, non-differentiable.
    pub fn mask(&mut self, x: NodeId, threshold: f64) -> Result<NodeId> {
        self.push(Op::Mask(x, threshold))
    }

    fn push(&mut self, op: Op) -> Result<NodeId> {
        let value = self.eval(&op)?;
        self.nodes.push(Node { op, value });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Rebinds named inputs and re-evaluates the whole tape. Returns the
    /// value of the last recorded node.
    pub fn forward(&mut self, inputs: &[(&str, Tensor)]) -> Result<Tensor> {
        for (name, value) in inputs {
            let mut bound = false;
            for node in &mut self.nodes {
                if matches!(&node.op, Op::Leaf { name: Some(n) } if n == name) {
                    node.value = value.clone();
                    bound = true;
                }
            }
            if !bound {
                return Err(Error::UnknownInput(name.to_string()));
            }
        }
        self.stale = true;
        self.recompute()?;
        self.nodes
            .last()
            .map(|n| n.value.clone())
            .ok_or_else(|| Error::InvalidInput("empty graph".into()))
    }

    /// Overwrites a leaf's value. The tape is stale until [`Graph::recompute`].
    pub fn set_value(&mut self, leaf: NodeId, value: Tensor) -> Result<()> {
        let node = &mut self.nodes[leaf.0];
        if !matches!(node.op, Op::Leaf { .. }) {
            return Err(Error::InvalidInput(format!(
                "node {} is not a leaf",
                leaf.0
            )));
        }
        node.value = value;
        self.stale = true;
        Ok(())
    }

    pub fn recompute(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf { .. }) {
                continue;
            }
            let value = self.eval(&self.nodes[i].op)?;
            self.nodes[i].value = value;
        }
        self.stale = false;
        Ok(())
    }

    fn eval(&self, op: &Op) -> Result<Tensor> {
        let v = |id: &NodeId| &self.nodes[id.0].value;
        let out = match op {
            Op::Leaf { .. } => unreachable!("leaves are not evaluated"),
            Op::MatMul(a, b) => matmul(v(a), v(b))?,
            Op::BiasAdd(x, b) => {
                let (rows, cols) = v(x).dims2()?;
                let bias = v(b);
                if bias.len() != cols {
                    return Err(Error::shape(
                        "bias_add",
                        format!("bias of {} values for {cols} columns", bias.len()),
                    ));
                }
                let mut out = v(x).clone();
                let data = out.data_mut();
                for r in 0..rows {
                    for (o, &bv) in data[r * cols..(r + 1) * cols].iter_mut().zip(bias.data()) {
                        *o += bv;
                    }
                }
                out
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (x, y) = (v(a), v(b));
                if x.shape() != y.shape() {
                    return Err(Error::shape(
                        op.name(),
                        format!("{:?} vs {:?}", x.shape(), y.shape()),
                    ));
                }
                match op {
                    Op::Add(..) => x.zip(y, |p, q| p + q),
                    Op::Sub(..) => x.zip(y, |p, q| p - q),
                    _ => x.zip(y, |p, q| p * q),
                }
            }
            Op::Scale(a, s) => v(a).map(|x| x * s),
            Op::Relu(a) => v(a).map(|x| if x > 0.0 { x } else { 0.0 }),
            Op::Softmax(a) => softmax_rows(v(a))?,
            Op::Log(a) => v(a).map(f64::ln),
            Op::Exp(a) => v(a).map(f64::exp),
            Op::Sum(a) => Tensor::scalar(v(a).sum()),
            Op::Mean(a) => {
                let x = v(a);
                if x.is_empty() {
                    return Err(Error::shape("mean", "empty tensor"));
                }
                Tensor::scalar(x.sum() / x.len() as f64)
            }
            Op::Select(a, labels) => {
                let x = v(a);
                let (rows, cols) = x.dims2()?;
                check_labels("select", labels, rows, cols)?;
                Tensor::vector(
                    labels
                        .iter()
                        .enumerate()
                        .map(|(mu, &l)| x.data()[mu * cols + l])
                        .collect(),
                )
            }
            Op::Contract {
                input,
                labels,
                classes,
            } => {
                let x = v(input);
                let (rows, cols) = x.dims2()?;
                check_labels("one_hot_contract", labels, rows, *classes)?;
                let mut out = vec![0.0; cols * classes];
                for (mu, &l) in labels.iter().enumerate() {
                    for (i, &xv) in x.row(mu).iter().enumerate() {
                        out[i * classes + l] += xv;
                    }
                }
                Tensor::new(vec![cols, *classes], out)?
            }
            Op::StopGradient(a) => v(a).clone(),
            Op::Mask(a, t) => v(a).map(|x| if x >= *t { 1.0 } else { 0.0 }),
        };
        if !out.is_finite() {
            return Err(Error::NonFinite {
                op: op.name().to_string(),
            });
        }
        Ok(out)
    }

    /// Differentiates the scalar `seed` with respect to every node it
    /// depends on. With `accumulate` the result is added to the existing
    /// slots, otherwise the slots are reset first.
    pub fn backward(&mut self, seed: NodeId, accumulate: bool) -> Result<()> {
        if self.stale {
            return Err(Error::Backward(
                "values are stale; run forward before backward".into(),
            ));
        }
        let seed_value = &self.nodes[seed.0].value;
        if !seed_value.is_scalar() {
            return Err(Error::Backward(format!(
                "seed must be scalar, got shape {:?}",
                seed_value.shape()
            )));
        }

        let mut pass: Vec<Option<Tensor>> = vec![None; seed.0 + 1];
        pass[seed.0] = Some(Tensor::full(seed_value.shape(), 1.0));
        for i in (0..=seed.0).rev() {
            let Some(g) = pass[i].take() else { continue };
            self.propagate(i, &g, &mut pass)?;
            pass[i] = Some(g);
        }

        if !accumulate {
            self.grads.clear();
        }
        for i in self.grads.len()..self.nodes.len() {
            self.grads.push(Tensor::zeros(self.nodes[i].value.shape()));
        }
        for (slot, g) in self.grads.iter_mut().zip(pass) {
            if let Some(g) = g {
                slot.add_assign(&g);
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor, pass: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let v = |id: &NodeId| &self.nodes[id.0].value;
        match &node.op {
            Op::Leaf { .. } | Op::StopGradient(_) | Op::Mask(..) => {}
            Op::MatMul(a, b) => {
                let da = matmul_nt(g, v(b))?;
                let db = matmul_tn(v(a), g)?;
                accumulate(pass, *a, da);
                accumulate(pass, *b, db);
            }
            Op::BiasAdd(x, b) => {
                let (rows, cols) = g.dims2()?;
                let mut db = vec![0.0; cols];
                for r in 0..rows {
                    for (d, &gv) in db.iter_mut().zip(g.row(r)) {
                        *d += gv;
                    }
                }
                accumulate(pass, *x, g.clone());
                accumulate(pass, *b, Tensor::new(v(b).shape().to_vec(), db)?);
            }
            Op::Add(a, b) => {
                accumulate(pass, *a, g.clone());
                accumulate(pass, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(pass, *a, g.clone());
                accumulate(pass, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                accumulate(pass, *a, g.zip(v(b), |p, q| p * q));
                accumulate(pass, *b, g.zip(v(a), |p, q| p * q));
            }
            Op::Scale(a, s) => accumulate(pass, *a, g.map(|x| x * s)),
            Op::Relu(a) => {
                accumulate(pass, *a, g.zip(v(a), |p, x| if x > 0.0 { p } else { 0.0 }));
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let (rows, cols) = y.dims2()?;
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for c in 0..cols {
                        dx[r * cols + c] = yr[c] * (gr[c] - dot);
                    }
                }
                accumulate(pass, *a, Tensor::new(vec![rows, cols], dx)?);
            }
            Op::Log(a) => accumulate(pass, *a, g.zip(v(a), |p, x| p / x)),
            Op::Exp(a) => accumulate(pass, *a, g.zip(&node.value, |p, y| p * y)),
            Op::Sum(a) => {
                accumulate(pass, *a, Tensor::full(v(a).shape(), g.data()[0]));
            }
            Op::Mean(a) => {
                let n = v(a).len() as f64;
                accumulate(pass, *a, Tensor::full(v(a).shape(), g.data()[0] / n));
            }
            Op::Select(a, labels) => {
                let (rows, cols) = v(a).dims2()?;
                let mut dx = vec![0.0; rows * cols];
                for (mu, &l) in labels.iter().enumerate() {
                    dx[mu * cols + l] = g.data()[mu];
                }
                accumulate(pass, *a, Tensor::new(vec![rows, cols], dx)?);
            }
            Op::Contract {
                input,
                labels,
                classes,
            } => {
                let (rows, cols) = v(input).dims2()?;
                let mut dx = vec![0.0; rows * cols];
                for (mu, &l) in labels.iter().enumerate() {
                    for c in 0..cols {
                        dx[mu * cols + c] = g.data()[c * classes + l];
                    }
                }
                accumulate(pass, *input, Tensor::new(vec![rows, cols], dx)?);
            }
        }
        Ok(())
    }

    /// Inputs of relu and mask nodes, which are only piecewise differentiable.
    fn kink_sites(&self) -> Vec<(NodeId, f64, bool)> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some((x, 0.0, true)),
                Op::Mask(x, t) => Some((x, t, false)),
                _ => None,
            })
            .collect()
    }
}

fn accumulate(pass: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut pass[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

fn check_labels(op: &'static str, labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::shape(
            op,
            format!("{} labels for {rows} rows", labels.len()),
        ));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    Ok(())
}

fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (rows, cols) = x.dims2()?;
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = x.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let o = &mut out[r * cols..(r + 1) * cols];
        let mut total = 0.0;
        for (dst, &v) in o.iter_mut().zip(row) {
            *dst = (v - max).exp();
            total += *dst;
        }
        for dst in o.iter_mut() {
            *dst /= total;
        }
    }
    Tensor::new(vec![rows, cols], out)
}

/// Outcome of comparing analytic gradients against central differences.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Max over checked elements of `|analytic − numeric| / max(1, |analytic|)`.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Leaf elements whose perturbation crosses a relu or mask kink.
    pub excluded: Vec<usize>,
    pub tolerance: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

/// Central-difference check of `d seed / d leaf`. The graph is restored to
/// its original leaf value before returning.
pub fn check_gradients(
    graph: &mut Graph,
    seed: NodeId,
    leaf: NodeId,
    step: f64,
    tolerance: f64,
) -> Result<GradCheck> {
    if step.is_nan() || step <= 0.0 {
        return Err(Error::InvalidInput(format!("step must be > 0, got {step}")));
    }
    graph.recompute()?;
    graph.backward(seed, false)?;
    let analytic = graph.grad(leaf).cloned().expect("slot populated by backward");
    let base = graph.value(leaf).clone();

    let sites = graph.kink_sites();
    let pattern = |g: &Graph| -> Vec<bool> {
        sites
            .iter()
            .flat_map(|&(x, t, strict)| {
                g.value(x)
                    .data()
                    .iter()
                    .map(move |&v| if strict { v > t } else { v >= t })
                    .collect::<Vec<_>>()
            })
            .collect()
    };
    let base_pattern = pattern(graph);

    let mut report = GradCheck {
        max_rel_error: 0.0,
        checked: 0,
        excluded: Vec::new(),
        tolerance,
    };
    let evaluate = |g: &mut Graph, k: usize, delta: f64| -> Result<(f64, bool)> {
        let mut t = base.clone();
        t.data_mut()[k] += delta;
        g.set_value(leaf, t)?;
        g.recompute()?;
        Ok((g.value(seed).data()[0], pattern(g) == base_pattern))
    };
    for k in 0..base.len() {
        let (plus, same_plus) = evaluate(graph, k, step)?;
        let (minus, same_minus) = evaluate(graph, k, -step)?;
        if !same_plus || !same_minus {
            report.excluded.push(k);
            continue;
        }
        let numeric = (plus - minus) / (2.0 * step);
        if !numeric.is_finite() {
            graph.set_value(leaf, base)?;
            graph.recompute()?;
            return Err(Error::NonFinite {
                op: "finite difference".into(),
            });
        }
        let a = analytic.data()[k];
        let err = (a - numeric).abs() / a.abs().max(1.0);
        report.max_rel_error = report.max_rel_error.max(err);
        report.checked += 1;
    }
    graph.set_value(leaf, base)?;
    graph.recompute()?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_t(v: &[f64]) -> Tensor {
        Tensor::vector(v.to_vec())
    }

    #[test]
    fn relu_matmul_hand_example() {
        let mut g = Graph::new();
        let x = g.input("x", Tensor::new(vec![1, 2], vec![1., 2.]).unwrap());
        let w = g.parameter("w", Tensor::new(vec![2, 2], vec![1., 0., 0., -1.]).unwrap());
        let h = g.matmul(x, w).unwrap();
        let y = g.relu(h).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 0.0]);
        let again = g
            .forward(&[("x", Tensor::new(vec![1, 2], vec![1., 2.]).unwrap())])
            .unwrap();
        assert_eq!(again.data(), &[1.0, 0.0]);
    }

    #[test]
    fn empty_op_graph_is_identity() {
        let mut g = Graph::new();
        g.input("x", vec_t(&[0.0]));
        let out = g.forward(&[("x", vec_t(&[3., -1., 2.]))]).unwrap();
        assert_eq!(out.data(), &[3., -1., 2.]);
    }

    #[test]
    fn unknown_input_is_rejected() {
        let mut g = Graph::new();
        g.input("x", vec_t(&[0.0]));
        assert!(matches!(
            g.forward(&[("y", vec_t(&[1.0]))]),
            Err(Error::UnknownInput(_))
        ));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.matmul(a, b), Err(Error::Shape { .. })));
        let c = g.constant(Tensor::zeros(&[3]));
        assert!(matches!(g.add(a, c), Err(Error::Shape { .. })));
    }

    #[test]
    fn non_finite_values_are_an_error() {
        let mut g = Graph::new();
        let a = g.constant(vec_t(&[0.0, 1.0]));
        assert!(matches!(g.log(a), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let x = g.parameter("x", vec_t(&[1., 2., 3.]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward(s, false).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2., 4., 6.]);
    }

    #[test]
    fn seed_must_be_scalar() {
        let mut g = Graph::new();
        let x = g.parameter("x", vec_t(&[1., 2.]));
        assert!(matches!(g.backward(x, false), Err(Error::Backward(_))));
    }

    #[test]
    fn backward_on_stale_values_is_rejected() {
        let mut g = Graph::new();
        let x = g.parameter("x", vec_t(&[1., 2.]));
        let s = g.sum(x).unwrap();
        g.set_value(x, vec_t(&[3., 4.])).unwrap();
        assert!(matches!(g.backward(s, false), Err(Error::Backward(_))));
        g.recompute().unwrap();
        assert_eq!(g.value(s).data(), &[7.0]);
        g.backward(s, false).unwrap();
    }

    #[test]
    fn stop_gradient_blocks_and_preserves_value() {
        let mut g = Graph::new();
        let x = g.parameter("x", vec_t(&[0.5, -1.5, 2.0]));
        let blocked = g.stop_gradient(x).unwrap();
        assert_eq!(
            g.value(blocked).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            g.value(x).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        let e = g.exp(blocked).unwrap();
        let s = g.sum(e).unwrap();
        g.backward(s, false).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn blocked_branch_adds_nothing_to_gradient() {
        // loss = sum(x∘x) + sum(exp(stop(x))) must differentiate like sum(x∘x).
        let xs = vec_t(&[0.3, -0.7, 1.1]);
        let mut g = Graph::new();
        let x = g.parameter("x", xs.clone());
        let sq = g.mul(x, x).unwrap();
        let f = g.sum(sq).unwrap();
        let b = g.stop_gradient(x).unwrap();
        let e = g.exp(b).unwrap();
        let gterm = g.sum(e).unwrap();
        let loss = g.add(f, gterm).unwrap();
        g.backward(loss, false).unwrap();

        let mut reference = Graph::new();
        let rx = reference.parameter("x", xs);
        let rsq = reference.mul(rx, rx).unwrap();
        let rf = reference.sum(rsq).unwrap();
        reference.backward(rf, false).unwrap();
        assert_eq!(g.grad(x).unwrap(), reference.grad(rx).unwrap());
    }

    #[test]
    fn two_class_cross_entropy_matches_finite_differences() {
        // −log softmax(v)[0] for v = [0.3, −0.3]; analytic grad σ(v) − e₀.
        let mut g = Graph::new();
        let v = g.parameter("v", Tensor::new(vec![1, 2], vec![0.3, -0.3]).unwrap());
        let sm = g.softmax(v).unwrap();
        let sel = g.select(sm, &[0]).unwrap();
        let lg = g.log(sel).unwrap();
        let m = g.mean(lg).unwrap();
        let loss = g.scale(m, -1.0).unwrap();
        g.backward(loss, false).unwrap();
        let grad = g.grad(v).unwrap().data().to_vec();
        // σ(0.6) = 0.645656..., so grad₀ = −0.354344
        assert!((grad[0] + 0.3543).abs() < 1e-4);
        assert!((grad[1] - 0.3543).abs() < 1e-4);

        let h = 1e-6;
        let ce = |a: f64, b: f64| {
            let (ea, eb) = (a.exp(), b.exp());
            -(ea / (ea + eb)).ln()
        };
        let fd0 = (ce(0.3 + h, -0.3) - ce(0.3 - h, -0.3)) / (2.0 * h);
        let fd1 = (ce(0.3, -0.3 + h) - ce(0.3, -0.3 - h)) / (2.0 * h);
        assert!((grad[0] - fd0).abs() < 1e-4);
        assert!((grad[1] - fd1).abs() < 1e-4);
    }

    #[test]
    fn accumulation_sums_separate_losses() {
        let mut g = Graph::new();
        let x = g.parameter("x", vec_t(&[1., -2.]));
        let sq = g.mul(x, x).unwrap();
        let l1 = g.sum(sq).unwrap();
        let l2 = g.mean(x).unwrap();
        g.backward(l1, false).unwrap();
        g.backward(l2, true).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.5, -3.5]);
        g.backward(l2, false).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.5, 0.5]);
    }

    #[test]
    fn unreachable_nodes_have_zero_gradient() {
        let mut g = Graph::new();
        let x = g.parameter("x", vec_t(&[1., 2.]));
        let y = g.parameter("y", vec_t(&[3., 4.]));
        let s = g.sum(x).unwrap();
        let _other = g.sum(y).unwrap();
        g.backward(s, false).unwrap();
        assert_eq!(g.grad(y).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn quadratic_gradient_check_is_tight() {
        let mut g = Graph::new();
        let x = g.parameter("x", vec_t(&[0.2, -1.3, 4.0]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        let report = check_gradients(&mut g, s, x, 1e-6, 1e-6).unwrap();
        assert!(report.passed(), "{report:?}");
        assert_eq!(report.checked, 3);
    }

    #[test]
    fn relu_kink_is_excluded_not_failed() {
        let mut g = Graph::new();
        let x = g.parameter("x", vec_t(&[0.0, 1.0, -1.0]));
        let r = g.relu(x).unwrap();
        let s = g.sum(r).unwrap();
        let report = check_gradients(&mut g, s, x, 1e-6, 1e-6).unwrap();
        assert_eq!(report.excluded, vec![0]);
        assert_eq!(report.checked, 2);
        assert!(report.passed());
        // relu'(0) is defined as 0
        assert_eq!(g.grad(x).unwrap().data()[0], 0.0);
    }

    #[test]
    fn check_restores_leaf_value() {
        let mut g = Graph::new();
        let x = g.parameter("x", vec_t(&[0.4, 0.6]));
        let e = g.exp(x).unwrap();
        let s = g.sum(e).unwrap();
        let before = g.value(s).clone();
        check_gradients(&mut g, s, x, 1e-6, 1e-6).unwrap();
        assert_eq!(g.value(x).data(), &[0.4, 0.6]);
        assert_eq!(g.value(s), &before);
    }
}
