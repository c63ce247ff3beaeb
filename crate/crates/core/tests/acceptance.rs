//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails.

use std::time::{Duration, Instant};

use irene::datagen::{exact_label_joint, BiasConfig, SplitMix64};
use irene::engine::{baseline_iteration, compute_gradients, irene_iteration, IreneConfig, Mode, ModelTriple};
use irene::experiment::{run_single, run_sweep, spearman, ExperimentConfig, RunReport, SweepConfig, SweepResult};
use irene::info::{cross_entropy, joint_from_batch, mi_proxy, mi_proxy_value, Marginal};
use irene::nn::{mlp_forward, Mlp};
use irene::{check_gradients, Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Outcome {
            passed,
            detail: detail.into(),
        }
    }
}

fn random_tensor(rng: &mut SplitMix64, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| scale * (2.0 * rng.next_f64() - 1.0)).collect()).unwrap()
}

fn random_softmax(rng: &mut SplitMix64, b: usize, c: usize) -> Tensor {
    let mut data = Vec::with_capacity(b * c);
    for _ in 0..b {
        let logits: Vec<f64> = (0..c).map(|_| 4.0 * rng.next_gaussian()).collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        data.extend(exps.iter().map(|e| e / total));
    }
    Tensor::new(vec![b, c], data).unwrap()
}

/// Triple loop straight from the definition, sharing no code with the library.
#[allow(clippy::needless_range_loop)]
fn brute_force_mi(soft: &Tensor, labels: &[usize], c: usize) -> f64 {
    let b = labels.len();
    let mut p = vec![vec![0.0; c]; c];
    for i in 0..c {
        for j in 0..c {
            for mu in 0..b {
                if labels[mu] == j {
                    p[i][j] += soft.data()[mu * c + i];
                }
            }
            p[i][j] /= b as f64;
        }
    }
    let row: Vec<f64> = (0..c).map(|i| (0..c).map(|j| p[i][j]).sum()).collect();
    let col: Vec<f64> = (0..c).map(|j| (0..c).map(|i| p[i][j]).sum()).collect();
    let mut mi = 0.0;
    for i in 0..c {
        for j in 0..c {
            if p[i][j] >= 1e-12 {
                mi += p[i][j] * (p[i][j] / (row[i] * col[j])).ln();
            }
        }
    }
    mi
}

fn mi_oracle() -> Outcome {
    let mut rng = SplitMix64::new(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..1_000 {
        let b = 1 + rng.below(16);
        let c = 2 + rng.below(7);
        let soft = random_softmax(&mut rng, b, c);
        let labels: Vec<usize> = (0..b).map(|_| rng.below(c)).collect();
        let got = mi_proxy_value(&soft, &labels, c).unwrap();
        worst = worst.max((got - brute_force_mi(&soft, &labels, c)).abs());
    }
    Outcome::new(worst <= 1e-10, format!("1000 batches, max |diff| = {worst:.2e} (tol 1e-10)"))
}

fn gradient_check() -> Outcome {
    let mut rng = SplitMix64::new(7);
    let (mut worst, mut checked, mut failures) = (0.0f64, 0usize, 0usize);
    let (alpha, gamma) = (0.5, 0.5);
    for case in 0..50 {
        let b = 2 + rng.below(7);
        let d = 2 + rng.below(4);
        let h = 2 + rng.below(4);
        let k = 2 + rng.below(3);
        let c = 2 + rng.below(3);
        let y: Vec<usize> = (0..b).map(|_| rng.below(k)).collect();
        let v: Vec<usize> = (0..b).map(|_| rng.below(c)).collect();

        // CE w.r.t. logits.
        let mut g = Graph::new();
        let logits = g.parameter("logits", random_tensor(&mut rng, &[b, k], 3.0));
        let ce = cross_entropy(&mut g, logits, &y).unwrap();
        let r1 = check_gradients(&mut g, ce, logits, 1e-6, 1e-4).unwrap();

        // γ·MI w.r.t. logits.
        let mut g = Graph::new();
        let logits = g.parameter("logits", random_tensor(&mut rng, &[b, c], 3.0));
        let soft = g.softmax(logits).unwrap();
        let table = joint_from_batch(&mut g, soft, &v, c).unwrap();
        let mi = mi_proxy(&mut g, table, &Marginal::Batch).unwrap();
        let seed = g.scale(mi, gamma).unwrap();
        let r2 = check_gradients(&mut g, seed, logits, 1e-6, 1e-4).unwrap();

        // α·CE + γ·MI w.r.t. θ_F of a one-layer relu encoder.
        let mut init = ChaCha8Rng::seed_from_u64(case);
        let encoder = Mlp::new("f", &[d, h], true, &mut init).unwrap();
        let target = Mlp::new("g", &[h, k], false, &mut init).unwrap();
        let private = Mlp::new("h", &[h, c], false, &mut init).unwrap();
        let mut g = Graph::new();
        let fb = encoder.bind(&mut g);
        let gb = target.bind(&mut g);
        let hb = private.bind(&mut g);
        let x = g.input("x", random_tensor(&mut rng, &[b, d], 2.0));
        let z = mlp_forward(&mut g, &fb, x).unwrap();
        let yl = mlp_forward(&mut g, &gb, z).unwrap();
        let ce = cross_entropy(&mut g, yl, &y).unwrap();
        let vl = mlp_forward(&mut g, &hb, z).unwrap();
        let soft = g.softmax(vl).unwrap();
        let table = joint_from_batch(&mut g, soft, &v, c).unwrap();
        let mi = mi_proxy(&mut g, table, &Marginal::Batch).unwrap();
        let a = g.scale(ce, alpha).unwrap();
        let m = g.scale(mi, gamma).unwrap();
        let total = g.add(a, m).unwrap();
        let r3 = check_gradients(&mut g, total, fb.params[0], 1e-6, 1e-4).unwrap();
        let r4 = check_gradients(&mut g, total, fb.params[1], 1e-6, 1e-4).unwrap();

        for r in [r1, r2, r3, r4] {
            worst = worst.max(r.max_rel_error);
            checked += r.checked;
            if !r.passed() {
                failures += 1;
            }
        }
    }
    Outcome::new(
        failures == 0 && checked > 0,
        format!("50 cases, {checked} elements checked, max rel err {worst:.2e} (tol 1e-4)"),
    )
}

fn routing_isolation() -> Outcome {
    let mut rng = SplitMix64::new(99);
    let (mut a_ok, mut b_ok) = (true, true);
    for trial in 0..20 {
        let bsz = 4 + rng.below(12);
        let x = random_tensor(&mut rng, &[bsz, 6], 2.0);
        let y: Vec<usize> = (0..bsz).map(|_| rng.below(3)).collect();
        let v: Vec<usize> = (0..bsz).map(|_| rng.below(4)).collect();
        let mut permuted = v.clone();
        permuted.rotate_left(1 + trial % (bsz - 1));
        permuted.swap(0, bsz - 1);
        let model = ModelTriple::new(6, &[8], 5, 3, 4, trial as u64).unwrap();

        let no_mi = IreneConfig {
            gamma: 0.0,
            ..IreneConfig::default()
        };
        let encoder_grads = |labels: &[usize]| {
            let mut m = model.clone();
            compute_gradients(&mut m, &x, &y, labels, &no_mi, Mode::Irene).unwrap();
            m.encoder
                .group
                .params
                .iter()
                .map(|p| p.grad.clone().unwrap())
                .collect::<Vec<_>>()
        };
        let (g1, g2) = (encoder_grads(&v), encoder_grads(&permuted));
        a_ok &= g1
            .iter()
            .zip(&g2)
            .all(|(p, q)| p.data().iter().zip(q.data()).all(|(s, t)| s.to_bits() == t.to_bits()));

        let config = IreneConfig::default();
        let (mut ir, mut bl) = (model.clone(), model.clone());
        irene_iteration(&x, &y, &v, &mut ir, &config, 0).unwrap();
        baseline_iteration(&x, &y, &v, &mut bl, &config, 0).unwrap();
        b_ok &= ir
            .private_head
            .group
            .params
            .iter()
            .zip(&bl.private_head.group.params)
            .all(|(p, q)| p.value.data().iter().zip(q.value.data()).all(|(s, t)| s.to_bits() == t.to_bits()));
    }
    Outcome::new(
        a_ok && b_ok,
        format!("20 batches: θ_F grads invariant to v̂ permutation = {a_ok}; θ_H IRENE == baseline bitwise = {b_ok}"),
    )
}

fn mi_of_logits(logits: Vec<Vec<f64>>, labels: &[usize]) -> (f64, f64) {
    let c = logits[0].len();
    let mut g = Graph::new();
    let l = g.constant(Tensor::from_rows(&logits).unwrap());
    let soft = g.softmax(l).unwrap();
    let table = joint_from_batch(&mut g, soft, labels, c).unwrap();
    let mi = mi_proxy(&mut g, table, &Marginal::Batch).unwrap();
    let ce = cross_entropy(&mut g, l, labels).unwrap();
    (g.value(mi).data()[0], g.value(ce).data()[0])
}

fn anti_predictor() -> Outcome {
    let labels = [0, 1, 0, 1, 1, 0, 1, 0];
    let logits = labels
        .iter()
        .map(|&l| if l == 0 { vec![0.0, 50.0] } else { vec![50.0, 0.0] })
        .collect();
    let (mi, ce) = mi_of_logits(logits, &labels);
    let err = (mi - 2f64.ln()).abs();
    Outcome::new(
        err <= 1e-9,
        format!("always-wrong binary head: MI = {mi:.12} (ln 2 ± 1e-9, err {err:.1e}), CE = {ce:.1}"),
    )
}

fn maximum_confusion() -> Outcome {
    let mut rng = SplitMix64::new(5);
    let mut nonzero = Vec::new();
    let mut cases = 0;
    for &c in &[2usize, 4, 8] {
        for &b in &[1usize, 2, 4, 8, 16] {
            for _ in 0..10 {
                let labels: Vec<usize> = (0..b).map(|_| rng.below(c)).collect();
                let (mi, _) = mi_of_logits(vec![vec![0.0; c]; b], &labels);
                cases += 1;
                if mi != 0.0 {
                    nonzero.push((c, b, mi));
                }
            }
        }
    }
    Outcome::new(
        nonzero.is_empty(),
        format!("{cases} uniform batches (C ∈ {{2,4,8}}, B ≤ 16): nonzero MI in {nonzero:?}"),
    )
}

fn criterion_config() -> ExperimentConfig {
    ExperimentConfig {
        seeds: vec![0, 1, 2, 3, 4],
        sweep: SweepConfig {
            rhos: vec![0.1, 0.5, 0.9, 0.99],
            modes: vec![Mode::Baseline, Mode::Irene],
        },
        ..ExperimentConfig::default()
    }
}

fn desk_scale_sweep(sweep: &SweepResult, elapsed: Duration) -> Outcome {
    let rhos = [0.1, 0.5, 0.9, 0.99];
    let mut lines = Vec::new();
    let (mut a_ok, mut b_ok, mut c_ok) = (true, true, true);
    let mut baseline_leak = Vec::new();
    for &rho in &rhos {
        let (Some(b), Some(i)) = (sweep.aggregate(rho, Mode::Baseline), sweep.aggregate(rho, Mode::Irene)) else {
            return Outcome::new(false, format!("missing cells at rho {rho}"));
        };
        let chance = b.chance;
        let above = b.leak_cotrained.mean > chance + 0.05;
        let near = (i.leak_cotrained.mean - chance).abs() <= 0.05;
        let gap = i.target_acc.mean - b.target_acc.mean;
        let close = rho > 0.9 || gap.abs() <= 0.03;
        a_ok &= above;
        b_ok &= near;
        c_ok &= close;
        baseline_leak.push(b.leak_cotrained.mean);
        lines.push(format!(
            "      rho {rho:<4}  baseline leak {:.3}±{:.3} tgt {:.3}  |  irene leak {:.3}±{:.3} tgt {:.3}  |  a:{} b:{} c:{}",
            b.leak_cotrained.mean,
            b.leak_cotrained.std,
            b.target_acc.mean,
            i.leak_cotrained.mean,
            i.leak_cotrained.std,
            i.target_acc.mean,
            mark(above),
            mark(near),
            if rho > 0.9 { "-".to_string() } else { mark(close) },
        ));
    }
    let rank = spearman(&rhos, &baseline_leak);
    a_ok &= rank == 1.0;
    let in_time = elapsed < Duration::from_secs(15 * 60);
    let detail = format!(
        "(a) baseline > chance+5 and increasing (Spearman {rank:.2}): {}; (b) irene within chance±5: {}; \
         (c) irene target within 3 pts for rho ≤ 0.9: {}; {} cells, {} failed, {:.0}s\n{}",
        mark(a_ok),
        mark(b_ok),
        mark(c_ok),
        sweep.rows.len(),
        sweep.failures(),
        elapsed.as_secs_f64(),
        lines.join("\n")
    );
    Outcome::new(a_ok && b_ok && c_ok && in_time && sweep.failures() == 0, detail)
}

fn mark(ok: bool) -> String {
    if ok { "ok" } else { "FAIL" }.to_string()
}

fn label_mi_diagnostic() -> Outcome {
    let at = |rho: f64| {
        exact_label_joint(&BiasConfig {
            rho,
            ..BiasConfig::default()
        })
        .unwrap()
        .mutual_information()
    };
    let zero = at(0.1);
    let values: Vec<f64> = [0.1, 0.3, 0.5, 0.7, 0.9, 0.95, 0.99].iter().map(|&r| at(r)).collect();
    let increasing = values.windows(2).all(|w| w[1] > w[0]);
    Outcome::new(
        zero.abs() <= 1e-12 && increasing,
        format!(
            "MI(rho=1/C) = {zero:.1e}; series {}",
            values.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join(" < ")
        ),
    )
}

fn directional_leakage(sweep: &SweepResult) -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for rho in [0.1, 0.5, 0.9, 0.99] {
        match (sweep.aggregate(rho, Mode::Baseline), sweep.aggregate(rho, Mode::Irene)) {
            (Some(b), Some(i)) => {
                let lower = i.leak_cotrained.mean < b.leak_cotrained.mean;
                ok &= lower;
                parts.push(format!(
                    "rho {rho}: {:.3} < {:.3} (target {:+.3})",
                    i.leak_cotrained.mean,
                    b.leak_cotrained.mean,
                    i.target_acc.mean - b.target_acc.mean
                ));
            }
            _ => ok = false,
        }
    }
    Outcome::new(
        ok,
        format!("qualitative only: IRENE leakage below baseline at every rho; {}", parts.join("; ")),
    )
}

fn determinism() -> Outcome {
    let config = ExperimentConfig {
        seeds: vec![0],
        ..ExperimentConfig::default()
    };
    let report = || {
        let outcome = run_single(&config, config.mode, 0).unwrap();
        serde_json::to_string(&RunReport::new(&config, config.mode, 0, outcome.eval).eval).unwrap()
    };
    let (first, second) = (report(), report());
    Outcome::new(first == second, format!("two default runs, seed 0: metrics {first}"))
}

type Row = (u32, &'static str, Outcome, Duration, Duration);

fn timed(id: u32, name: &'static str, limit: Duration, f: &dyn Fn() -> Outcome) -> Row {
    let start = Instant::now();
    let outcome = f();
    (id, name, outcome, start.elapsed(), limit)
}

fn main() {
    let mut results = vec![
        timed(1, "MI oracle equivalence", Duration::from_secs(5), &mi_oracle),
        timed(2, "gradient correctness", Duration::from_secs(30), &gradient_check),
        timed(3, "routing isolation", Duration::from_secs(5), &routing_isolation),
        timed(4, "anti-predictor MI = ln 2", Duration::from_secs(1), &anti_predictor),
        timed(5, "maximum-confusion zero", Duration::from_secs(1), &maximum_confusion),
    ];

    let workers = std::thread::available_parallelism().map_or(1, |n| n.get());
    let start = Instant::now();
    let sweep = run_sweep(&criterion_config(), workers).expect("sweep config is valid");
    let sweep_time = start.elapsed();
    let mut row = timed(6, "desk-scale bias sweep", Duration::from_secs(15 * 60), &|| {
        desk_scale_sweep(&sweep, sweep_time)
    });
    row.3 += sweep_time;
    results.push(row);

    results.push(timed(7, "label-MI diagnostic", Duration::from_secs(1), &label_mi_diagnostic));
    results.push(timed(8, "directional leakage (qualitative)", Duration::from_secs(1), &|| {
        directional_leakage(&sweep)
    }));
    results.push(timed(9, "run determinism", Duration::from_secs(60), &determinism));

    let mut failed = 0;
    for (id, name, outcome, elapsed, limit) in &results {
        let in_time = elapsed <= limit;
        let pass = outcome.passed && in_time;
        if !pass {
            failed += 1;
        }
        println!(
            "{} [{id}] {name}: {} ({:.2}s, limit {}s{})",
            if pass { "PASS" } else { "FAIL" },
            outcome.detail,
            elapsed.as_secs_f64(),
            limit.as_secs(),
            if in_time { "" } else { ", over time" }
        );
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
