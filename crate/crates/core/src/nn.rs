//! Dense layers, parameter groups and SGD with momentum and milestone decay.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    /// `[in × out]`
    pub weights: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

impl DenseLayer {
    pub fn new(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(DenseLayer {
            weights: init_parameters(&[inputs, outputs], inputs, rng)?,
            bias: Tensor::zeros(&[outputs]),
        })
    }

    pub fn inputs(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weights.shape()[1]
    }
}

/// Uniform draw in `±sqrt(6 / fan_in)`.
pub fn init_parameters(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Result<Tensor> {
    if fan_in == 0 {
        return Err(Error::InvalidConfig("fan_in must be > 0".into()));
    }
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    #[serde(skip)]
    pub grad: Option<Tensor>,
    pub momentum: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let momentum = Tensor::zeros(value.shape());
        Parameter {
            name: name.into(),
            value,
            grad: None,
            momentum,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterGroup {
    pub name: String,
    pub params: Vec<Parameter>,
}

impl ParameterGroup {
    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn grads(&self) -> Vec<Option<&Tensor>> {
        self.params.iter().map(|p| p.grad.as_ref()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub milestones: Vec<usize>,
    pub decay_factor: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            milestones: vec![15, 22],
            decay_factor: 0.1,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig(format!(
                "milestones must be strictly increasing, got {:?}",
                self.milestones
            )));
        }
        if !(self.decay_factor.is_finite() && self.decay_factor > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "decay_factor must be > 0, got {}",
                self.decay_factor
            )));
        }
        Ok(())
    }

    /// `learning_rate · decay_factor^(#milestones ≤ epoch)`
    pub fn effective_lr(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.learning_rate * self.decay_factor.powi(passed as i32)
    }
}

/// One momentum-SGD update of every parameter in `group`:
/// `buf ← momentum·buf + (grad + weight_decay·param)`, `param ← param − lr·buf`.
pub fn sgd_step(group: &mut ParameterGroup, config: &SgdConfig, epoch: usize) -> Result<()> {
    if let Some(p) = group.params.iter().find(|p| p.grad.is_none()) {
        return Err(Error::MissingGradient(format!("{}.{}", group.name, p.name)));
    }
    let lr = config.effective_lr(epoch);
    for p in &mut group.params {
        let grad = p.grad.as_ref().expect("checked above");
        if grad.shape() != p.value.shape() {
            return Err(Error::shape(
                "sgd_step",
                format!("gradient {:?} for parameter {:?}", grad.shape(), p.value.shape()),
            ));
        }
        let values = p.value.data_mut();
        for ((w, buf), &g) in values
            .iter_mut()
            .zip(p.momentum.data_mut())
            .zip(grad.data())
        {
            *buf = config.momentum * *buf + (g + config.weight_decay * *w);
            *w -= lr * *buf;
        }
    }
    Ok(())
}

/// A chain of dense layers, optionally followed by relu, owning one
/// parameter group laid out as `[w0, b0, w1, b1, ...]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub group: ParameterGroup,
    pub activations: Vec<bool>,
}

/// Graph handles for an [`Mlp`]'s parameters.
#[derive(Clone, Debug)]
pub struct BoundMlp {
    pub params: Vec<NodeId>,
    pub activations: Vec<bool>,
}

impl Mlp {
    /// `dims = [in, h1, ..., out]`; hidden layers use relu, the last layer
    /// uses relu only if `relu_output`.
    pub fn new(name: &str, dims: &[usize], relu_output: bool, rng: &mut impl Rng) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "{name}: layer widths must be positive and at least two, got {dims:?}"
            )));
        }
        let layers = dims
            .windows(2)
            .map(|w| DenseLayer::new(w[0], w[1], rng))
            .collect::<Result<Vec<_>>>()?;
        let n = layers.len();
        let activations = (0..n).map(|i| i + 1 < n || relu_output).collect();
        Mlp::from_layers(name, layers, activations)
    }

    pub fn from_layers(name: &str, layers: Vec<DenseLayer>, activations: Vec<bool>) -> Result<Self> {
        if layers.is_empty() || layers.len() != activations.len() {
            return Err(Error::InvalidConfig(format!(
                "{name}: {} layers with {} activation flags",
                layers.len(),
                activations.len()
            )));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(Error::shape(
                    "mlp",
                    format!("layer {i} emits {} but layer {} takes {}", pair[0].outputs(), i + 1, pair[1].inputs()),
                ));
            }
        }
        let mut params = Vec::with_capacity(layers.len() * 2);
        for (i, layer) in layers.into_iter().enumerate() {
            if layer.bias.len() != layer.outputs() {
                return Err(Error::shape("mlp", format!("layer {i} bias length")));
            }
            params.push(Parameter::new(format!("{i}.weight"), layer.weights));
            params.push(Parameter::new(format!("{i}.bias"), layer.bias));
        }
        Ok(Mlp {
            group: ParameterGroup {
                name: name.to_string(),
                params,
            },
            activations,
        })
    }

    pub fn depth(&self) -> usize {
        self.activations.len()
    }

    pub fn input_dim(&self) -> usize {
        self.group.params[0].value.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.group.params[self.group.params.len() - 2].value.shape()[1]
    }

    pub fn layer(&self, i: usize) -> DenseLayer {
        DenseLayer {
            weights: self.group.params[2 * i].value.clone(),
            bias: self.group.params[2 * i + 1].value.clone(),
        }
    }

    /// Records the parameters as graph leaves named `<group>.<param>`.
    pub fn bind(&self, graph: &mut Graph) -> BoundMlp {
        let params = self
            .group
            .params
            .iter()
            .map(|p| graph.parameter(&format!("{}.{}", self.group.name, p.name), p.value.clone()))
            .collect();
        BoundMlp {
            params,
            activations: self.activations.clone(),
        }
    }

    /// Copies the gradients of bound leaves into the group's buffers.
    pub fn collect_grads(&mut self, graph: &Graph, bound: &BoundMlp) -> Result<()> {
        for (p, &id) in self.group.params.iter_mut().zip(&bound.params) {
            let g = graph
                .grad(id)
                .ok_or_else(|| Error::MissingGradient(p.name.clone()))?;
            p.grad = Some(g.clone());
        }
        Ok(())
    }

    /// Inference without keeping a graph around.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let xi = g.constant(x.clone());
        let out = mlp_forward(&mut g, &bound, xi)?;
        Ok(g.value(out).clone())
    }
}

/// `layer_n(...relu(layer_1(x)))` recorded on `graph`.
pub fn mlp_forward(graph: &mut Graph, mlp: &BoundMlp, x: NodeId) -> Result<NodeId> {
    let mut h = x;
    for (layer, &relu) in mlp.params.chunks(2).zip(&mlp.activations) {
        let lin = graph.matmul(h, layer[0])?;
        h = graph.bias_add(lin, layer[1])?;
        if relu {
            h = graph.relu(h)?;
        }
    }
    Ok(h)
}
