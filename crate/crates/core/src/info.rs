//! Cross-entropy, batch joint distributions and mutual information.
//!
//! The MI proxy compares a head's soft predictions with the true private
//! labels through a soft-count joint table estimated on one batch:
//!
//! ```text
//! table[i, j] = (1/B) Σ_μ σ(v^μ)_i · 1[v̂^μ = j]
//! MI          = Σ_ij table[i, j] · ln(table[i, j] / (row_i · col_j))
//! ```
//!
//! Entries below [`ZERO_THRESHOLD`] contribute nothing to the value or the
//! gradient. All logarithms are natural.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const ZERO_THRESHOLD: f64 = 1e-12;

/// Tolerance on the row sums of soft predictions fed to [`joint_from_batch`].
pub const ROW_SUM_TOLERANCE: f64 = 1e-9;

/// Mean over the batch of `−ln softmax(logits)[label]`.
pub fn cross_entropy(graph: &mut Graph, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    let (rows, classes) = graph.value(logits).dims2()?;
    if labels.len() != rows {
        return Err(Error::shape(
            "cross_entropy",
            format!("{} labels for {rows} rows", labels.len()),
        ));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    let probs = graph.softmax(logits)?;
    let picked = graph.select(probs, labels)?;
    let logs = graph.log(picked)?;
    let mean = graph.mean(logs)?;
    graph.scale(mean, -1.0)
}

/// Soft-count joint table `[C_pred × classes]` of a batch.
pub fn joint_from_batch(
    graph: &mut Graph,
    soft_predictions: NodeId,
    true_labels: &[usize],
    classes: usize,
) -> Result<NodeId> {
    let preds = graph.value(soft_predictions);
    let (batch, _) = preds.dims2()?;
    if batch == 0 {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    for mu in 0..batch {
        let s: f64 = preds.row(mu).iter().sum();
        if (s - 1.0).abs() > ROW_SUM_TOLERANCE || preds.row(mu).iter().any(|&p| p < 0.0) {
            return Err(Error::InvalidInput(format!(
                "row {mu} of soft predictions is not a distribution (sum {s})"
            )));
        }
    }
    let counts = graph.one_hot_contract(soft_predictions, true_labels, classes)?;
    graph.scale(counts, 1.0 / batch as f64)
}

/// Where the private-label marginal `p(v̂ = j)` comes from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "probabilities")]
pub enum Marginal {
    /// Column sums of the batch table.
    #[default]
    Batch,
    /// Fixed class priors, e.g. dataset-wide frequencies.
    Prior(Vec<f64>),
}

/// Differentiable mutual information of a joint table node.
pub fn mi_proxy(graph: &mut Graph, table: NodeId, marginal: &Marginal) -> Result<NodeId> {
    let (rows, cols) = graph.value(table).dims2()?;
    let mask = graph.mask(table, ZERO_THRESHOLD)?;
    let ones = graph.constant(Tensor::ones(&[rows, cols]));
    let excluded = graph.sub(ones, mask)?;
    let kept = graph.mul(table, mask)?;
    let safe = graph.add(kept, excluded)?;

    let col_ones = graph.constant(Tensor::ones(&[cols, 1]));
    let row_marginal = graph.matmul(table, col_ones)?;
    let col_marginal = match marginal {
        Marginal::Batch => {
            let row_ones = graph.constant(Tensor::ones(&[1, rows]));
            graph.matmul(row_ones, table)?
        }
        Marginal::Prior(prior) => {
            if prior.len() != cols || prior.iter().any(|&p| p.is_nan() || p <= 0.0) {
                return Err(Error::InvalidInput(format!(
                    "prior marginal must hold {cols} positive values"
                )));
            }
            graph.constant(Tensor::new(vec![1, cols], prior.clone())?)
        }
    };
    let product = graph.matmul(row_marginal, col_marginal)?;
    let product_kept = graph.mul(product, mask)?;
    let product_safe = graph.add(product_kept, excluded)?;

    let log_joint = graph.log(safe)?;
    let log_product = graph.log(product_safe)?;
    let log_ratio = graph.sub(log_joint, log_product)?;
    let terms = graph.mul(kept, log_ratio)?;
    graph.sum(terms)
}

/// MI proxy value of soft predictions against labels, batch marginals.
pub fn mi_proxy_value(soft_predictions: &Tensor, labels: &[usize], classes: usize) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.constant(soft_predictions.clone());
    let table = joint_from_batch(&mut g, p, labels, classes)?;
    let mi = mi_proxy(&mut g, table, &Marginal::Batch)?;
    Ok(g.value(mi).data()[0])
}

/// A probability table with its marginals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointDistribution {
    pub rows: usize,
    pub cols: usize,
    /// Row-major `[rows × cols]`.
    pub table: Vec<f64>,
    pub row_marginal: Vec<f64>,
    pub col_marginal: Vec<f64>,
}

impl JointDistribution {
    pub fn from_table(rows: usize, cols: usize, table: Vec<f64>) -> Result<Self> {
        if table.len() != rows * cols || table.is_empty() {
            return Err(Error::shape("joint", format!("{} entries for {rows}x{cols}", table.len())));
        }
        if table.iter().any(|&p| !p.is_finite() || p < 0.0) {
            return Err(Error::InvalidInput("joint entries must be finite and >= 0".into()));
        }
        let total: f64 = table.iter().sum();
        if (total - 1.0).abs() > ROW_SUM_TOLERANCE {
            return Err(Error::InvalidInput(format!("joint sums to {total}, not 1")));
        }
        let row_marginal = (0..rows)
            .map(|i| table[i * cols..(i + 1) * cols].iter().sum())
            .collect();
        let col_marginal = (0..cols)
            .map(|j| (0..rows).map(|i| table[i * cols + j]).sum())
            .collect();
        Ok(JointDistribution {
            rows,
            cols,
            table,
            row_marginal,
            col_marginal,
        })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (rows, cols) = t.dims2()?;
        Self::from_table(rows, cols, t.data().to_vec())
    }

    /// Soft-count joint of a batch, evaluated without keeping the graph.
    pub fn from_batch(soft_predictions: &Tensor, labels: &[usize], classes: usize) -> Result<Self> {
        let mut g = Graph::new();
        let p = g.constant(soft_predictions.clone());
        let table = joint_from_batch(&mut g, p, labels, classes)?;
        Self::from_tensor(g.value(table))
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.table[i * self.cols + j]
    }

    /// `Σ p ln(p / (row·col))` over entries `p ≥ ZERO_THRESHOLD`, in nats.
    pub fn mutual_information(&self) -> f64 {
        let mut mi = 0.0;
        for i in 0..self.rows {
            for j in 0..self.cols {
                let p = self.get(i, j);
                if p >= ZERO_THRESHOLD {
                    mi += p * (p / (self.row_marginal[i] * self.col_marginal[j])).ln();
                }
            }
        }
        mi
    }
}

/// Co-occurrence counts of two label sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelJoint {
    pub rows: usize,
    pub cols: usize,
    pub counts: Vec<u64>,
}

impl LabelJoint {
    pub fn new(rows: usize, cols: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != rows * cols {
            return Err(Error::shape("label_joint", format!("{} counts for {rows}x{cols}", counts.len())));
        }
        if counts.iter().sum::<u64>() == 0 {
            return Err(Error::InvalidInput("label joint needs at least one sample".into()));
        }
        Ok(LabelJoint { rows, cols, counts })
    }

    pub fn from_labels(a: &[usize], b: &[usize], rows: usize, cols: usize) -> Result<Self> {
        if a.len() != b.len() {
            return Err(Error::shape("label_joint", "label vectors differ in length"));
        }
        let mut counts = vec![0u64; rows * cols];
        for (&i, &j) in a.iter().zip(b) {
            if i >= rows {
                return Err(Error::LabelOutOfRange { label: i, classes: rows });
            }
            if j >= cols {
                return Err(Error::LabelOutOfRange { label: j, classes: cols });
            }
            counts[i * cols + j] += 1;
        }
        Self::new(rows, cols, counts)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn distribution(&self) -> JointDistribution {
        let total = self.total() as f64;
        let table = self.counts.iter().map(|&c| c as f64 / total).collect();
        JointDistribution::from_table(self.rows, self.cols, table)
            .expect("normalized counts form a distribution")
    }
}

/// Mutual information of the empirical label distribution, in nats.
pub fn label_mi(joint: &LabelJoint) -> f64 {
    joint.distribution().mutual_information()
}
