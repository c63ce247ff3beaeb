//! Single runs, rho sweeps and plot tables.
//!
//! Every file written here carries the hash of the configuration that
//! produced it (`config_hash`), computed over the canonical JSON form of the
//! config with the output directory left out.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::{generate, BiasConfig, SplitMix64, Split};
use crate::engine::{train, IreneConfig, Mode, ModelTriple, TrainTrace};
use crate::eval::{evaluate, train_probe, EvalResult, ProbeConfig};
use crate::{Error, Result};

/// Values of rho at and above which rows land in the zoomed target panel.
pub const ZOOM_RHO: f64 = 0.9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder_hidden: Vec<usize>,
    pub bottleneck: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder_hidden: vec![64],
            bottleneck: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub rhos: Vec<f64>,
    pub modes: Vec<Mode>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            rhos: vec![0.1, 0.3, 0.5, 0.7, 0.9, 0.95, 0.99],
            modes: vec![Mode::Baseline, Mode::Irene],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    /// One run per seed; a run's seed replaces `data.seed`.
    pub seeds: Vec<u64>,
    pub output: PathBuf,
    pub data: BiasConfig,
    pub model: ModelConfig,
    pub train: IreneConfig,
    pub probe: ProbeConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            mode: Mode::Irene,
            seeds: vec![0, 1, 2, 3, 4],
            output: PathBuf::from("runs"),
            data: BiasConfig::default(),
            model: ModelConfig::default(),
            train: IreneConfig::default(),
            probe: ProbeConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: ExperimentConfig = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is representable as TOML")
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("at least one seed is required".into()));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = self.seeds.iter().find(|s| !seen.insert(**s)) {
            return Err(Error::InvalidConfig(format!("duplicate seed {dup}")));
        }
        if self.model.bottleneck == 0 || self.model.encoder_hidden.contains(&0) {
            return Err(Error::InvalidConfig("layer widths must be positive".into()));
        }
        if self.sweep.rhos.is_empty() || self.sweep.modes.is_empty() {
            return Err(Error::InvalidConfig("sweep needs at least one rho and one mode".into()));
        }
        self.data.validate()?;
        for &rho in &self.sweep.rhos {
            BiasConfig { rho, ..self.data.clone() }.validate()?;
        }
        self.train.validate()?;
        self.probe.validate()
    }

    pub fn with_seed_offset(mut self, offset: u64) -> Self {
        for s in &mut self.seeds {
            *s = s.wrapping_add(offset);
        }
        self
    }

    /// The unscaled protocol: 80 epochs with decay at epochs 40 and 60.
    pub fn full_protocol(mut self) -> Self {
        self.train.epochs = 80;
        self.train.sgd.milestones = vec![40, 60];
        self
    }

    /// Hex SHA-256 prefix of the canonical JSON form, excluding `output`.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output = PathBuf::new();
        let bytes = serde_json::to_vec(&canonical).expect("config serializes");
        hex::encode(&Sha256::digest(&bytes)[..8])
    }
}

/// Seeds for data, initialization, shuffling and the probe, all derived from
/// one run seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSeeds {
    pub data: u64,
    pub init: u64,
    pub shuffle: u64,
    pub probe: u64,
}

impl RunSeeds {
    pub fn derive(seed: u64) -> Self {
        let mut rng = SplitMix64::new(seed);
        RunSeeds {
            data: seed,
            init: rng.next_u64(),
            shuffle: rng.next_u64(),
            probe: rng.next_u64(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutcome {
    pub eval: EvalResult,
    pub trace: TrainTrace,
}

/// Generates data, trains in `mode`, fits the probe and evaluates on the
/// unbiased test split.
pub fn run_single(config: &ExperimentConfig, mode: Mode, seed: u64) -> Result<RunOutcome> {
    config.validate()?;
    let seeds = RunSeeds::derive(seed);
    let data = generate(&BiasConfig {
        seed: seeds.data,
        ..config.data.clone()
    })?;
    let train_set = data.subset(Split::Train)?;
    let test_set = data.subset(Split::Test)?;
    let mut model = ModelTriple::new(
        config.data.feature_dim(),
        &config.model.encoder_hidden,
        config.model.bottleneck,
        config.data.target_classes,
        config.data.private_classes,
        seeds.init,
    )?;
    let trace = train(&mut model, &train_set, &config.train, mode, seeds.shuffle)?;
    let probe = train_probe(&model.encoder, &train_set, &config.probe, seeds.probe)?;
    let eval = evaluate(&model, &test_set, &probe)?;
    Ok(RunOutcome { eval, trace })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub seed: u64,
    pub mode: Mode,
    pub rho: f64,
    pub seeds: RunSeeds,
    pub eval: EvalResult,
    pub notes: BTreeMap<String, String>,
    pub config: ExperimentConfig,
}

impl RunReport {
    pub fn new(config: &ExperimentConfig, mode: Mode, seed: u64, eval: EvalResult) -> Self {
        let notes = [
            ("initialization", "weights uniform in ±sqrt(6/fan_in), biases zero"),
            ("weight_decay", "applied to weights and biases of all three groups"),
            ("test_split", "drawn with rho = 1/C (attribute independent of class)"),
            ("last_partial_batch", "kept"),
            ("lr_schedule", "fixed milestones; plateau-based decay not implemented"),
            ("update_order", "all groups stepped from one forward pass"),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
        RunReport {
            config_hash: config.hash(),
            seed,
            mode,
            rho: config.data.rho,
            seeds: RunSeeds::derive(seed),
            eval,
            notes,
            config: config.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Writes `report_seed<seed>.json` and `trace_seed<seed>.csv` into `dir`.
pub fn write_run(dir: &Path, report: &RunReport, trace: &TrainTrace) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir)?;
    let report_path = dir.join(format!("report_seed{}.json", report.seed));
    std::fs::write(&report_path, report.to_json()? + "\n")?;
    let trace_path = dir.join(format!("trace_seed{}.csv", report.seed));
    trace.write_csv(BufWriter::new(File::create(&trace_path)?), &report.config_hash)?;
    Ok((report_path, trace_path))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub rho: f64,
    pub mode: Mode,
    pub seed: u64,
    pub result: std::result::Result<EvalResult, String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepAggregate {
    pub rho: f64,
    pub mode: Mode,
    pub n: usize,
    pub target_acc: MeanStd,
    pub leak_cotrained: MeanStd,
    pub leak_probe: MeanStd,
    pub chance: f64,
    pub mi_final: MeanStd,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub config_hash: String,
    pub rows: Vec<SweepRow>,
}

const SWEEP_COLUMNS: [&str; 10] = [
    "rho",
    "mode",
    "seed",
    "target_acc",
    "leak_cotrained",
    "leak_probe",
    "chance",
    "mi_final",
    "error",
    "config_hash",
];

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n − 1 denominator); 0 for fewer than two values.
pub fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

fn mean_std(xs: &[f64]) -> MeanStd {
    MeanStd {
        mean: mean(xs),
        std: sample_std(xs),
    }
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    let (rx, ry) = (ranks(xs), ranks(ys));
    let (mx, my) = (mean(&rx), mean(&ry));
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx) * (a - mx)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my) * (b - my)).sum();
    cov / (vx * vy).sqrt()
}

impl SweepResult {
    /// Rows sorted by `(rho, mode, seed)`.
    pub fn new(config_hash: String, mut rows: Vec<SweepRow>) -> Self {
        rows.sort_by(|a, b| {
            a.rho
                .total_cmp(&b.rho)
                .then(a.mode.cmp(&b.mode))
                .then(a.seed.cmp(&b.seed))
        });
        SweepResult { config_hash, rows }
    }

    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| r.result.is_err()).count()
    }

    /// Mean and sample std per `(rho, mode)` over successful rows.
    pub fn aggregates(&self) -> Vec<SweepAggregate> {
        let mut cells: Vec<(f64, Mode)> = Vec::new();
        for r in &self.rows {
            if !cells.iter().any(|&(rho, m)| rho == r.rho && m == r.mode) {
                cells.push((r.rho, r.mode));
            }
        }
        cells
            .into_iter()
            .filter_map(|(rho, mode)| {
                let ok: Vec<&EvalResult> = self
                    .rows
                    .iter()
                    .filter(|r| r.rho == rho && r.mode == mode)
                    .filter_map(|r| r.result.as_ref().ok())
                    .collect();
                if ok.is_empty() {
                    return None;
                }
                let col = |f: fn(&EvalResult) -> f64| ok.iter().map(|e| f(e)).collect::<Vec<_>>();
                Some(SweepAggregate {
                    rho,
                    mode,
                    n: ok.len(),
                    target_acc: mean_std(&col(|e| e.target_accuracy)),
                    leak_cotrained: mean_std(&col(|e| e.leakage_accuracy_cotrained)),
                    leak_probe: mean_std(&col(|e| e.leakage_accuracy_probe)),
                    chance: ok[0].chance_level,
                    mi_final: mean_std(&col(|e| e.mi_proxy_final)),
                })
            })
            .collect()
    }

    pub fn aggregate(&self, rho: f64, mode: Mode) -> Option<SweepAggregate> {
        self.aggregates().into_iter().find(|a| a.rho == rho && a.mode == mode)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(SWEEP_COLUMNS)?;
        for r in &self.rows {
            let mut record = vec![r.rho.to_string(), r.mode.to_string(), r.seed.to_string()];
            match &r.result {
                Ok(e) => {
                    record.extend(
                        [
                            e.target_accuracy,
                            e.leakage_accuracy_cotrained,
                            e.leakage_accuracy_probe,
                            e.chance_level,
                            e.mi_proxy_final,
                        ]
                        .map(|v| v.to_string()),
                    );
                    record.push(String::new());
                }
                Err(msg) => {
                    record.extend(std::iter::repeat_n(String::new(), 5));
                    record.push(format!("ERROR: {msg}"));
                }
            }
            record.push(self.config_hash.clone());
            w.write_record(&record)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers()?.clone();
        let col = |name: &str| {
            header
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::InvalidInput(format!("sweep table lacks column `{name}`")))
        };
        let idx: Vec<usize> = SWEEP_COLUMNS.iter().map(|c| col(c)).collect::<Result<_>>()?;
        let num = |s: &str, what: &str| {
            s.parse::<f64>()
                .map_err(|_| Error::InvalidInput(format!("bad {what} value `{s}`")))
        };
        let mut rows = Vec::new();
        let mut hash = String::new();
        for record in r.records() {
            let rec = record?;
            let f = |k: usize| &rec[idx[k]];
            hash = f(9).to_string();
            let error = f(8);
            let result = if error.is_empty() {
                Ok(EvalResult {
                    target_accuracy: num(f(3), "target_acc")?,
                    leakage_accuracy_cotrained: num(f(4), "leak_cotrained")?,
                    leakage_accuracy_probe: num(f(5), "leak_probe")?,
                    chance_level: num(f(6), "chance")?,
                    mi_proxy_final: num(f(7), "mi_final")?,
                    n_eval: 0,
                })
            } else {
                Err(error.trim_start_matches("ERROR: ").to_string())
            };
            rows.push(SweepRow {
                rho: num(f(0), "rho")?,
                mode: f(1).parse()?,
                seed: f(2)
                    .parse()
                    .map_err(|_| Error::InvalidInput(format!("bad seed `{}`", f(2))))?,
                result,
            });
        }
        Ok(SweepResult::new(hash, rows))
    }

    pub fn write_aggregate_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "rho",
            "mode",
            "n",
            "target_acc_mean",
            "target_acc_std",
            "leak_cotrained_mean",
            "leak_cotrained_std",
            "leak_probe_mean",
            "leak_probe_std",
            "chance",
            "mi_final_mean",
            "mi_final_std",
            "config_hash",
        ])?;
        for a in self.aggregates() {
            let mut rec = vec![a.rho.to_string(), a.mode.to_string(), a.n.to_string()];
            for ms in [a.target_acc, a.leak_cotrained, a.leak_probe] {
                rec.push(ms.mean.to_string());
                rec.push(ms.std.to_string());
            }
            rec.push(a.chance.to_string());
            rec.push(a.mi_final.mean.to_string());
            rec.push(a.mi_final.std.to_string());
            rec.push(self.config_hash.clone());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs every `(rho, mode, seed)` cell of the sweep on `workers` threads.
/// Failed cells are recorded, not propagated.
pub fn run_sweep(config: &ExperimentConfig, workers: usize) -> Result<SweepResult> {
    config.validate()?;
    let mut cells = Vec::new();
    for &rho in &config.sweep.rhos {
        for &mode in &config.sweep.modes {
            for &seed in &config.seeds {
                cells.push((rho, mode, seed));
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("worker pool: {e}")))?;
    let rows = pool.install(|| {
        cells
            .par_iter()
            .map(|&(rho, mode, seed)| {
                let mut cell = config.clone();
                cell.data.rho = rho;
                let result = run_single(&cell, mode, seed)
                    .map(|o| o.eval)
                    .map_err(|e| e.to_string());
                SweepRow { rho, mode, seed, result }
            })
            .collect::<Vec<_>>()
    });
    Ok(SweepResult::new(config.hash(), rows))
}

/// Writes `sweep.csv` and `sweep_aggregate.csv`.
pub fn write_sweep(dir: &Path, result: &SweepResult) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir)?;
    let rows = dir.join("sweep.csv");
    result.write_csv(BufWriter::new(File::create(&rows)?))?;
    let agg = dir.join("sweep_aggregate.csv");
    result.write_aggregate_csv(BufWriter::new(File::create(&agg)?))?;
    Ok((rows, agg))
}

/// Four tables: target accuracy vs rho, the same for `rho ≥ ZOOM_RHO`,
/// leakage vs rho, and leakage vs target accuracy.
pub fn emit_plot_data(result: &SweepResult, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let aggregates = result.aggregates();
    let hash = &result.config_hash;
    let open = |name: &str| -> Result<(PathBuf, csv::Writer<BufWriter<File>>)> {
        let path = dir.join(name);
        let w = csv::Writer::from_writer(BufWriter::new(File::create(&path)?));
        Ok((path, w))
    };

    let (pa, mut a) = open("panel_a_target_vs_rho.csv")?;
    let (pb, mut b) = open("panel_b_target_vs_rho_zoom.csv")?;
    for w in [&mut a, &mut b] {
        w.write_record(["rho", "mode", "n", "target_acc_mean", "target_acc_std", "config_hash"])?;
    }
    for agg in &aggregates {
        let rec = [
            agg.rho.to_string(),
            agg.mode.to_string(),
            agg.n.to_string(),
            agg.target_acc.mean.to_string(),
            agg.target_acc.std.to_string(),
            hash.clone(),
        ];
        a.write_record(&rec)?;
        if agg.rho >= ZOOM_RHO {
            b.write_record(&rec)?;
        }
    }

    let (pc, mut c) = open("panel_c_leakage_vs_rho.csv")?;
    c.write_record([
        "rho",
        "mode",
        "n",
        "leak_cotrained_mean",
        "leak_cotrained_std",
        "leak_probe_mean",
        "leak_probe_std",
        "chance",
        "config_hash",
    ])?;
    let (pd, mut d) = open("panel_d_leakage_vs_target.csv")?;
    d.write_record([
        "mode",
        "rho",
        "target_acc_mean",
        "leak_cotrained_mean",
        "leak_probe_mean",
        "config_hash",
    ])?;
    for agg in &aggregates {
        c.write_record([
            agg.rho.to_string(),
            agg.mode.to_string(),
            agg.n.to_string(),
            agg.leak_cotrained.mean.to_string(),
            agg.leak_cotrained.std.to_string(),
            agg.leak_probe.mean.to_string(),
            agg.leak_probe.std.to_string(),
            agg.chance.to_string(),
            hash.clone(),
        ])?;
        d.write_record([
            agg.mode.to_string(),
            agg.rho.to_string(),
            agg.target_acc.mean.to_string(),
            agg.leak_cotrained.mean.to_string(),
            agg.leak_probe.mean.to_string(),
            hash.clone(),
        ])?;
    }
    for mut w in [a, b, c, d] {
        w.flush()?;
    }
    Ok(vec![pa, pb, pc, pd])
}
