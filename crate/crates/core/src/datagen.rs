//! "Biased-Blobs": a synthetic classification set where a private "color"
//! attribute correlates with the target class at a tunable strength `rho`.
//!
//! Each sample draws `y ~ U(K)`; with probability `(rho − 1/C)/(1 − 1/C)` the
//! attribute is tied to the class (`v = y mod C`), otherwise `v ~ U(C)`. This
//! gives `P(v = y mod C) = rho` exactly, so `rho = 1/C` is independence and
//! `rho = 1` total correlation. Features are a class pattern block followed
//! by a color block, each a fixed unit template times a signal strength,
//! plus isotropic Gaussian noise.
//!
//! Randomness is counter-based: every sample has its own SplitMix64 stream
//! keyed by `(seed, split, index)`, so the data does not depend on
//! generation order. The test split is always drawn with `rho = 1/C`.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::info::JointDistribution;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// SplitMix64 with a Box–Muller Gaussian on top.
#[derive(Clone, Debug)]
pub struct SplitMix64 {
    state: u64,
    spare: Option<f64>,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 {
            state: seed,
            spare: None,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        mix64(self.state)
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn below(&mut self, n: usize) -> usize {
        ((self.next_f64() * n as f64) as usize).min(n - 1)
    }

    pub fn next_gaussian(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(radius * angle.sin());
        radius * angle.cos()
    }
}

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const TEMPLATE_STREAM: u64 = 0x7E3A_11A7_E000_0000;

fn stream_seed(seed: u64, split: Split, index: usize) -> u64 {
    let key = ((split as u64 + 1) << 56) ^ index as u64;
    mix64(seed ^ mix64(key))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train = 0,
    Val = 1,
    Test = 2,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidInput(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiasConfig {
    /// Training samples.
    pub n_samples: usize,
    #[serde(default)]
    pub n_val: usize,
    pub n_test: usize,
    pub target_classes: usize,
    pub private_classes: usize,
    pub rho: f64,
    pub pattern_dim: usize,
    pub color_dim: usize,
    pub pattern_signal: f64,
    pub color_signal: f64,
    pub noise_sigma: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for BiasConfig {
    fn default() -> Self {
        BiasConfig {
            n_samples: 10_000,
            n_val: 0,
            n_test: 2_000,
            target_classes: 10,
            private_classes: 10,
            rho: 0.99,
            pattern_dim: 32,
            color_dim: 8,
            pattern_signal: 3.0,
            color_signal: 6.0,
            noise_sigma: 1.0,
            seed: 0,
        }
    }
}

impl BiasConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.target_classes < 2 || self.private_classes < 2 {
            return bad("target_classes and private_classes must be >= 2".into());
        }
        if self.pattern_dim == 0 || self.color_dim == 0 {
            return bad("pattern_dim and color_dim must be >= 1".into());
        }
        let chance = 1.0 / self.private_classes as f64;
        if !(self.rho >= chance - 1e-12 && self.rho <= 1.0) {
            return bad(format!("rho must lie in [1/C, 1] = [{chance}, 1], got {}", self.rho));
        }
        for (name, v) in [
            ("pattern_signal", self.pattern_signal),
            ("color_signal", self.color_signal),
            ("noise_sigma", self.noise_sigma),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.pattern_dim + self.color_dim
    }

    /// Probability that the attribute is copied from the class.
    pub fn tie_probability(&self, rho: f64) -> f64 {
        let chance = 1.0 / self.private_classes as f64;
        ((rho - chance) / (1.0 - chance)).clamp(0.0, 1.0)
    }
}

/// Features with target and private labels for one split.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    pub x: Tensor,
    pub y: Vec<usize>,
    pub v: Vec<usize>,
    pub target_classes: usize,
    pub private_classes: usize,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>, Vec<usize>)> {
        Ok((
            self.x.select_rows(indices)?,
            indices.iter().map(|&i| self.y[i]).collect(),
            indices.iter().map(|&i| self.v[i]).collect(),
        ))
    }

    /// Fraction of samples whose attribute equals `y mod C`.
    pub fn tie_rate(&self) -> f64 {
        let tied = self
            .y
            .iter()
            .zip(&self.v)
            .filter(|(&y, &v)| y % self.private_classes == v)
            .count();
        tied as f64 / self.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BiasedDataset {
    /// `[N × (pattern_dim + color_dim)]`
    pub features: Tensor,
    pub target_labels: Vec<usize>,
    pub private_labels: Vec<usize>,
    pub splits: Vec<Split>,
    pub target_classes: usize,
    pub private_classes: usize,
}

impl BiasedDataset {
    pub fn len(&self) -> usize {
        self.target_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target_labels.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn subset(&self, split: Split) -> Result<LabeledSet> {
        let idx = self.indices(split);
        Ok(LabeledSet {
            x: self.features.select_rows(&idx)?,
            y: idx.iter().map(|&i| self.target_labels[i]).collect(),
            v: idx.iter().map(|&i| self.private_labels[i]).collect(),
            target_classes: self.target_classes,
            private_classes: self.private_classes,
        })
    }

    /// CSV with header `f0..f{D-1},y,v,split`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let (_, dim) = self.features.dims2()?;
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = (0..dim).map(|i| format!("f{i}")).collect();
        header.extend(["y", "v", "split"].map(String::from));
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut record: Vec<String> = self.features.row(i).iter().map(|v| v.to_string()).collect();
            record.push(self.target_labels[i].to_string());
            record.push(self.private_labels[i].to_string());
            record.push(self.splits[i].to_string());
            w.write_record(&record)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R, target_classes: usize, private_classes: usize) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers()?.clone();
        let n = header.len();
        if n < 4 || &header[n - 3] != "y" || &header[n - 2] != "v" || &header[n - 1] != "split" {
            return Err(Error::InvalidInput("expected trailing columns y,v,split".into()));
        }
        let dim = n - 3;
        let parse_err = |what: &str, line: usize| Error::InvalidInput(format!("bad {what} on record {line}"));
        let (mut data, mut ys, mut vs, mut splits) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (line, record) in r.records().enumerate() {
            let record = record?;
            for field in record.iter().take(dim) {
                data.push(field.parse::<f64>().map_err(|_| parse_err("feature", line))?);
            }
            let y: usize = record[dim].parse().map_err(|_| parse_err("y", line))?;
            let v: usize = record[dim + 1].parse().map_err(|_| parse_err("v", line))?;
            if y >= target_classes {
                return Err(Error::LabelOutOfRange { label: y, classes: target_classes });
            }
            if v >= private_classes {
                return Err(Error::LabelOutOfRange { label: v, classes: private_classes });
            }
            ys.push(y);
            vs.push(v);
            splits.push(record[dim + 2].parse()?);
        }
        Ok(BiasedDataset {
            features: Tensor::new(vec![ys.len(), dim], data)?,
            target_labels: ys,
            private_labels: vs,
            splits,
            target_classes,
            private_classes,
        })
    }
}

fn unit_templates(rng: &mut SplitMix64, count: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| loop {
            let v: Vec<f64> = (0..dim).map(|_| rng.next_gaussian()).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                break v.into_iter().map(|x| x / norm).collect();
            }
        })
        .collect()
}

pub fn generate(config: &BiasConfig) -> Result<BiasedDataset> {
    config.validate()?;
    let (k, c) = (config.target_classes, config.private_classes);
    let mut template_rng = SplitMix64::new(mix64(config.seed ^ TEMPLATE_STREAM));
    let patterns = unit_templates(&mut template_rng, k, config.pattern_dim);
    let colors = unit_templates(&mut template_rng, c, config.color_dim);

    let chance = 1.0 / c as f64;
    let plan = [
        (Split::Train, config.n_samples, config.rho),
        (Split::Val, config.n_val, config.rho),
        (Split::Test, config.n_test, chance),
    ];
    let total: usize = plan.iter().map(|p| p.1).sum();
    let dim = config.feature_dim();
    let mut features = Vec::with_capacity(total * dim);
    let (mut ys, mut vs, mut splits) = (
        Vec::with_capacity(total),
        Vec::with_capacity(total),
        Vec::with_capacity(total),
    );
    for (split, n, rho) in plan {
        let tie = config.tie_probability(rho);
        for i in 0..n {
            let mut rng = SplitMix64::new(stream_seed(config.seed, split, i));
            let y = rng.below(k);
            let tied = rng.next_f64() < tie;
            let free = rng.below(c);
            let v = if tied { y % c } else { free };
            for &t in &patterns[y] {
                features.push(t * config.pattern_signal + config.noise_sigma * rng.next_gaussian());
            }
            for &t in &colors[v] {
                features.push(t * config.color_signal + config.noise_sigma * rng.next_gaussian());
            }
            ys.push(y);
            vs.push(v);
            splits.push(split);
        }
    }
    Ok(BiasedDataset {
        features: Tensor::new(vec![total, dim], features)?,
        target_labels: ys,
        private_labels: vs,
        splits,
        target_classes: k,
        private_classes: c,
    })
}

/// Closed-form `p(y = k, v = c)` of the training split's sampling law.
pub fn exact_label_joint(config: &BiasConfig) -> Result<JointDistribution> {
    config.validate()?;
    let (k, c) = (config.target_classes, config.private_classes);
    let tie = config.tie_probability(config.rho);
    let mut table = vec![0.0; k * c];
    for y in 0..k {
        for v in 0..c {
            let tied = if v == y % c { tie } else { 0.0 };
            table[y * c + v] = (tied + (1.0 - tie) / c as f64) / k as f64;
        }
    }
    JointDistribution::from_table(k, c, table)
}
