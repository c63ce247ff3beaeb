//! Target accuracy, private-attribute leakage and post-hoc probes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::datagen::LabeledSet;
use crate::engine::{epoch_permutation, ModelTriple};
use crate::info::{cross_entropy, mi_proxy_value};
use crate::nn::{mlp_forward, sgd_step, Mlp, SgdConfig};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Fraction of rows whose argmax equals the label. Ties go to the lowest
/// index.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let (rows, classes) = logits.dims2()?;
    if rows == 0 {
        return Err(Error::InvalidInput("accuracy of an empty batch".into()));
    }
    if labels.len() != rows {
        return Err(Error::shape("accuracy", format!("{} labels for {rows} rows", labels.len())));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    let hits = (0..rows)
        .filter(|&r| argmax(logits.row(r)) == labels[r])
        .count();
    Ok(hits as f64 / rows as f64)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Hidden widths; empty means one dense layer like the co-trained head.
    #[serde(default)]
    pub hidden: Vec<usize>,
    pub sgd: SgdConfig,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 40,
            batch_size: 100,
            hidden: Vec::new(),
            sgd: SgdConfig {
                milestones: vec![20, 30],
                ..SgdConfig::default()
            },
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("probe epochs and batch_size must be > 0".into()));
        }
        self.sgd.validate()
    }
}

/// Trains a fresh head to predict `data.v` from the frozen encoder's
/// bottleneck.
pub fn train_probe(encoder: &Mlp, data: &LabeledSet, config: &ProbeConfig, seed: u64) -> Result<Mlp> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidInput("probe training set is empty".into()));
    }
    let z = encoder.predict(&data.x)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dims = vec![encoder.output_dim()];
    dims.extend_from_slice(&config.hidden);
    dims.push(data.private_classes);
    let mut probe = Mlp::new("probe", &dims, false, &mut rng)?;

    for epoch in 0..config.epochs {
        let order = epoch_permutation(data.len(), seed, epoch);
        for chunk in order.chunks(config.batch_size) {
            let zb = z.select_rows(chunk)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| data.v[i]).collect();
            let mut g = Graph::new();
            let bound = probe.bind(&mut g);
            let input = g.constant(zb);
            let logits = mlp_forward(&mut g, &bound, input)?;
            let loss = cross_entropy(&mut g, logits, &labels)?;
            g.backward(loss, false)?;
            probe.collect_grads(&g, &bound)?;
            sgd_step(&mut probe.group, &config.sgd, epoch)?;
        }
    }
    Ok(probe)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub target_accuracy: f64,
    /// Accuracy of the co-trained private head.
    pub leakage_accuracy_cotrained: f64,
    /// Accuracy of the post-hoc probe.
    pub leakage_accuracy_probe: f64,
    /// `1 / C`.
    pub chance_level: f64,
    /// MI proxy of the private head over the whole split, in nats.
    pub mi_proxy_final: f64,
    pub n_eval: usize,
}

pub fn evaluate(model: &ModelTriple, test: &LabeledSet, probe: &Mlp) -> Result<EvalResult> {
    if test.is_empty() {
        return Err(Error::InvalidInput("evaluation split is empty".into()));
    }
    let z = model.bottleneck(&test.x)?;
    let target_logits = model.target_head.predict(&z)?;
    let private_logits = model.private_head.predict(&z)?;
    let probe_logits = probe.predict(&z)?;

    let mut g = Graph::new();
    let l = g.constant(private_logits.clone());
    let soft = g.softmax(l)?;
    let mi = mi_proxy_value(g.value(soft), &test.v, test.private_classes)?;

    Ok(EvalResult {
        target_accuracy: accuracy(&target_logits, &test.y)?,
        leakage_accuracy_cotrained: accuracy(&private_logits, &test.v)?,
        leakage_accuracy_probe: accuracy(&probe_logits, &test.v)?,
        chance_level: 1.0 / test.private_classes as f64,
        mi_proxy_final: mi,
        n_eval: test.len(),
    })
}
