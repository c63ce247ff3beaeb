//! One-iteration gradient routing and the epoch loop.
//!
//! Every iteration runs a single forward pass and derives all three
//! gradient sets from it before any parameter moves:
//!
//! * `θ_G` and `θ_F` from `α·CE(y, ŷ) + γ·MI(σ(v), v̂)`, where the MI term
//!   flows through an unblocked copy of `H`; whatever it deposits on `θ_H`
//!   is discarded.
//! * `θ_H` from `CE(v, v̂)` evaluated on `stop_gradient(z)`, so the private
//!   head's own loss never reaches the encoder.
//!
//! The baseline drops the MI term and trains `F`, `G` on the unweighted
//! target loss; `H` is trained identically and acts as a leakage monitor.

use std::fmt;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::datagen::LabeledSet;
use crate::info::{cross_entropy, joint_from_batch, mi_proxy, Marginal};
use crate::nn::{mlp_forward, sgd_step, BoundMlp, Mlp, SgdConfig};
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Baseline,
    Irene,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Baseline => "baseline",
            Mode::Irene => "irene",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "irene" => Ok(Mode::Irene),
            other => Err(Error::InvalidConfig(format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IreneConfig {
    /// Weight of the target loss.
    pub alpha: f64,
    /// Weight of the MI removal term.
    pub gamma: f64,
    pub sgd: SgdConfig,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub marginal: Marginal,
}

impl Default for IreneConfig {
    fn default() -> Self {
        IreneConfig {
            alpha: 0.5,
            gamma: 0.5,
            sgd: SgdConfig::default(),
            epochs: 30,
            batch_size: 100,
            marginal: Marginal::Batch,
        }
    }
}

impl IreneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) || !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "alpha and gamma must be >= 0, got {} and {}",
                self.alpha, self.gamma
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("epochs and batch_size must be > 0".into()));
        }
        self.sgd.validate()
    }
}

/// Encoder `F`, target head `G` and private head `H`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelTriple {
    pub encoder: Mlp,
    pub target_head: Mlp,
    pub private_head: Mlp,
}

impl ModelTriple {
    /// `F: input → hidden… → bottleneck` (relu throughout), `G` and `H` single
    /// dense layers on the bottleneck.
    pub fn new(
        input_dim: usize,
        hidden: &[usize],
        bottleneck: usize,
        target_classes: usize,
        private_classes: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(bottleneck);
        let model = ModelTriple {
            encoder: Mlp::new("encoder", &dims, true, &mut rng)?,
            target_head: Mlp::new("target_head", &[bottleneck, target_classes], false, &mut rng)?,
            private_head: Mlp::new("private_head", &[bottleneck, private_classes], false, &mut rng)?,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        let z = self.encoder.output_dim();
        if self.target_head.input_dim() != z || self.private_head.input_dim() != z {
            return Err(Error::shape(
                "model",
                format!(
                    "bottleneck {z} feeds heads expecting {} and {}",
                    self.target_head.input_dim(),
                    self.private_head.input_dim()
                ),
            ));
        }
        let names = [
            &self.encoder.group.name,
            &self.target_head.group.name,
            &self.private_head.group.name,
        ];
        if names[0] == names[1] || names[0] == names[2] || names[1] == names[2] {
            return Err(Error::InvalidConfig("parameter group names must be distinct".into()));
        }
        Ok(())
    }

    pub fn bottleneck(&self, x: &Tensor) -> Result<Tensor> {
        self.encoder.predict(x)
    }

    fn clear_grads(&mut self) {
        self.encoder.group.clear_grads();
        self.target_head.group.clear_grads();
        self.private_head.group.clear_grads();
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub target_ce: f64,
    pub private_ce: f64,
    pub mi: f64,
}

/// The recorded forward pass of one iteration.
pub(crate) struct StepGraph {
    pub graph: Graph,
    pub encoder: BoundMlp,
    pub target_head: BoundMlp,
    pub private_head: BoundMlp,
    pub target_ce: NodeId,
    pub private_ce: NodeId,
    pub mi: NodeId,
}

pub(crate) fn record_step(
    model: &ModelTriple,
    x: &Tensor,
    y: &[usize],
    v: &[usize],
    marginal: &Marginal,
) -> Result<StepGraph> {
    let private_classes = model.private_head.output_dim();
    let mut g = Graph::new();
    let encoder = model.encoder.bind(&mut g);
    let target_head = model.target_head.bind(&mut g);
    let private_head = model.private_head.bind(&mut g);

    let xi = g.input("x", x.clone());
    let z = mlp_forward(&mut g, &encoder, xi)?;
    let y_logits = mlp_forward(&mut g, &target_head, z)?;
    let target_ce = cross_entropy(&mut g, y_logits, y)?;

    let z_blocked = g.stop_gradient(z)?;
    let v_blocked = mlp_forward(&mut g, &private_head, z_blocked)?;
    let private_ce = cross_entropy(&mut g, v_blocked, v)?;

    let v_open = mlp_forward(&mut g, &private_head, z)?;
    let soft = g.softmax(v_open)?;
    let table = joint_from_batch(&mut g, soft, v, private_classes)?;
    let mi = mi_proxy(&mut g, table, marginal)?;

    Ok(StepGraph {
        graph: g,
        encoder,
        target_head,
        private_head,
        target_ce,
        private_ce,
        mi,
    })
}

/// Populates the gradient buffers of all three groups without stepping.
pub fn compute_gradients(
    model: &mut ModelTriple,
    x: &Tensor,
    y: &[usize],
    v: &[usize],
    config: &IreneConfig,
    mode: Mode,
) -> Result<StepLosses> {
    let mut step = record_step(model, x, y, v, &config.marginal)?;
    let g = &mut step.graph;
    let losses = StepLosses {
        target_ce: g.value(step.target_ce).data()[0],
        private_ce: g.value(step.private_ce).data()[0],
        mi: g.value(step.mi).data()[0],
    };
    if !(losses.target_ce.is_finite() && losses.private_ce.is_finite() && losses.mi.is_finite()) {
        return Err(Error::NonFinite {
            op: format!("loss {losses:?}"),
        });
    }

    model.clear_grads();
    let shared_seed = match mode {
        Mode::Irene => {
            let weighted_ce = g.scale(step.target_ce, config.alpha)?;
            let weighted_mi = g.scale(step.mi, config.gamma)?;
            g.add(weighted_ce, weighted_mi)?
        }
        Mode::Baseline => step.target_ce,
    };
    g.backward(shared_seed, false)?;
    model.encoder.collect_grads(g, &step.encoder)?;
    model.target_head.collect_grads(g, &step.target_head)?;

    // θ_H deposits from the MI stream are dropped here: the slots are reset.
    g.backward(step.private_ce, false)?;
    model.private_head.collect_grads(g, &step.private_head)?;
    Ok(losses)
}

/// One routed update of all three parameter groups.
pub fn iteration(
    x: &Tensor,
    y: &[usize],
    v: &[usize],
    model: &mut ModelTriple,
    config: &IreneConfig,
    mode: Mode,
    epoch: usize,
) -> Result<StepLosses> {
    let losses = compute_gradients(model, x, y, v, config, mode)?;
    sgd_step(&mut model.encoder.group, &config.sgd, epoch)?;
    sgd_step(&mut model.target_head.group, &config.sgd, epoch)?;
    sgd_step(&mut model.private_head.group, &config.sgd, epoch)?;
    Ok(losses)
}

pub fn irene_iteration(
    x: &Tensor,
    y: &[usize],
    v: &[usize],
    model: &mut ModelTriple,
    config: &IreneConfig,
    epoch: usize,
) -> Result<StepLosses> {
    iteration(x, y, v, model, config, Mode::Irene, epoch)
}

pub fn baseline_iteration(
    x: &Tensor,
    y: &[usize],
    v: &[usize],
    model: &mut ModelTriple,
    config: &IreneConfig,
    epoch: usize,
) -> Result<StepLosses> {
    iteration(x, y, v, model, config, Mode::Baseline, epoch)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub target_loss: f64,
    pub private_loss: f64,
    pub mi: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub records: Vec<EpochRecord>,
}

impl TrainTrace {
    pub fn write_csv<W: std::io::Write>(&self, writer: W, config_hash: &str) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["epoch", "target_loss", "private_loss", "mi", "lr", "config_hash"])?;
        for r in &self.records {
            w.write_record([
                r.epoch.to_string(),
                r.target_loss.to_string(),
                r.private_loss.to_string(),
                r.mi.to_string(),
                r.lr.to_string(),
                config_hash.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Shuffle order of `n` samples for `epoch`, a pure function of `(seed, epoch)`.
pub fn epoch_permutation(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Runs `config.epochs` epochs of shuffled mini-batches; the last partial
/// batch is kept.
pub fn train(
    model: &mut ModelTriple,
    data: &LabeledSet,
    config: &IreneConfig,
    mode: Mode,
    seed: u64,
) -> Result<TrainTrace> {
    train_epochs(model, data, config, mode, seed, 0..config.epochs)
}

pub fn train_epochs(
    model: &mut ModelTriple,
    data: &LabeledSet,
    config: &IreneConfig,
    mode: Mode,
    seed: u64,
    epochs: Range<usize>,
) -> Result<TrainTrace> {
    config.validate()?;
    model.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    let mut trace = TrainTrace::default();
    for epoch in epochs {
        let order = epoch_permutation(data.len(), seed, epoch);
        let mut sums = StepLosses::default();
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let (x, y, v) = data.batch(chunk)?;
            let l = iteration(&x, &y, &v, model, config, mode, epoch)?;
            sums.target_ce += l.target_ce;
            sums.private_ce += l.private_ce;
            sums.mi += l.mi;
            batches += 1;
        }
        let n = batches as f64;
        trace.records.push(EpochRecord {
            epoch,
            target_loss: sums.target_ce / n,
            private_loss: sums.private_ce / n,
            mi: sums.mi / n,
            lr: config.sgd.effective_lr(epoch),
        });
    }
    Ok(trace)
}

/// Model parameters with momentum buffers and the next epoch to run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub next_epoch: usize,
    pub model: ModelTriple,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let checkpoint: Checkpoint = serde_json::from_slice(&std::fs::read(path)?)?;
        checkpoint.model.validate()?;
        Ok(checkpoint)
    }
}
