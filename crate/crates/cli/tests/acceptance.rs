//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the report is always printed. The
//! process fails if any criterion fails, except the causality criterion for
//! the generative modes, which is reported but expected to fail: their
//! attention is generated from a summary of the whole sequence.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use genatt::checks::{
    causality_probe, diffusion_roundtrip_error, encoder_causality_gap, fit_collapsed_decoder, metric_oracle_mismatches,
    model_gradient_report, op_gradient_reports, regeneration_study,
};
use genatt::data::synthetic::{generate, SyntheticSpec};
use genatt::data::{filter_min_interactions, leave_one_out_split, EvalExample, TrainExample};
use genatt::evaluation::{evaluate, ndcg_at, EvalConfig, ModelScorer};
use genatt::model::{Mode, Model, ModelConfig};
use genatt::training::{train_epoch, TrainConfig, TrainState};

const OP_TOL: f64 = 1e-6;
const MODEL_TOL: f64 = 1e-3;
const GRADIENT_SECONDS: f64 = 60.0;
const ROUNDTRIP_TOL: f64 = 1e-12;
const ROUNDTRIP_STEPS: usize = 50;
const BETA_START: f64 = 1e-4;
const BETA_END: f64 = 0.02;
const REGENERATIONS: usize = 100;
const REALIZABILITY_N: usize = 4;
const REALIZABILITY_MSE: f64 = 1e-3;
const REALIZABILITY_STEPS: usize = 2000;
const OVERFIT_SEQUENCES: usize = 32;
const OVERFIT_RECALL: f64 = 0.9;
const OVERFIT_EPOCHS: usize = 200;
const TRAINABILITY_SECONDS: f64 = 15.0 * 60.0;
const SPOT_TOL: f64 = 1e-12;
const BENCH_LENGTHS: [usize; 5] = [20, 30, 50, 100, 200];
const BENCH_STEPS: [usize; 3] = [10, 25, 50];

struct Outcome {
    criterion: usize,
    passed: bool,
    expected_failure: bool,
    detail: String,
}

fn genatt(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_genatt"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "genatt {args:?}: {}",
            String::from_utf8_lossy(&out.stderr).trim()
        ))
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn metric(dir: &Path, name: &str, n: usize) -> Result<f64, String> {
    let csv = fs::read_to_string(dir.join("metrics.csv")).map_err(|e| e.to_string())?;
    let prefix = format!("{name},{n},");
    csv.lines()
        .find_map(|l| l.strip_prefix(&prefix))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| format!("{name}@{n} missing from {}", dir.display()))
}

fn gradients() -> (bool, String) {
    let start = Instant::now();
    let ops = op_gradient_reports(false).unwrap();
    let (worst_op, op_err) = ops
        .iter()
        .fold(("", 0.0f64), |a, &(n, e)| if e > a.1 { (n, e) } else { a });
    let mut ok = op_err < OP_TOL;
    let mut detail = format!("ops max {op_err:.2e} ({worst_op})");
    for mode in Mode::ALL {
        let r = model_gradient_report(mode, 21).unwrap();
        ok &= r.max_rel_error < MODEL_TOL;
        detail += &format!(", {mode} {:.2e}", r.max_rel_error);
    }
    let secs = start.elapsed().as_secs_f64();
    ok &= secs < GRADIENT_SECONDS;
    (ok, format!("{detail}; {secs:.1}s"))
}

fn diffusion_algebra() -> (bool, String) {
    let err = diffusion_roundtrip_error(ROUNDTRIP_STEPS, BETA_START, BETA_END, 3).unwrap();
    (
        err <= ROUNDTRIP_TOL,
        format!("max error {err:.2e} over t = 1..={ROUNDTRIP_STEPS}"),
    )
}

fn stochasticity() -> (bool, String) {
    let mut ok = true;
    let mut parts = Vec::new();
    for mode in [Mode::Vae, Mode::Diffusion] {
        let frozen = regeneration_study(mode, true, REGENERATIONS, 5).unwrap();
        let live = regeneration_study(mode, false, REGENERATIONS, 5).unwrap();
        ok &= frozen.identical && live.max_variance > 0.0;
        parts.push(format!(
            "{mode}: degenerate identical={}, live variance {:.2e}",
            frozen.identical, live.max_variance
        ));
    }
    (ok, parts.join("; "))
}

fn realizability() -> (bool, String) {
    let fit = fit_collapsed_decoder(REALIZABILITY_N, REALIZABILITY_STEPS, 0).unwrap();
    (
        fit.mse < REALIZABILITY_MSE,
        format!("logit MSE {:.2e} after {} steps", fit.mse, fit.steps),
    )
}

fn corpus_spec() -> SyntheticSpec {
    SyntheticSpec::parse(&["users=500 items=200 cats=10 seed=1"]).unwrap()
}

/// Next-item Recall@1 on the training targets of `subset`, under the same
/// protocol as test evaluation (the input history is not a candidate).
fn train_recall_at_1(model: &Model<f64>, subset: &[TrainExample]) -> f64 {
    let examples: Vec<EvalExample> = subset
        .iter()
        .map(|t| EvalExample {
            user: t.user,
            seq: t.seq.clone(),
            seen: t.seq.items.iter().copied().filter(|&i| i != 0).collect(),
        })
        .collect();
    let cfg = EvalConfig {
        ks: vec![1],
        ..EvalConfig::default()
    };
    let cats = vec![BTreeSet::new(); model.config.num_items + 1];
    let mut scorer = ModelScorer::new(model, 7);
    let t = evaluate(&mut scorer, &examples, &cats, 0, &cfg).unwrap();
    t.get("recall", Some(1)).unwrap()
}

fn overfit(mode: Mode, subset: &[TrainExample], num_items: usize) -> (f64, usize) {
    let mut mc = ModelConfig::new(mode, num_items).with_dim(32).with_len(20);
    mc.dropout = 0.0;
    mc.seed = 3;
    let mut model = Model::<f64>::init(mc).unwrap();
    let tc = TrainConfig {
        lr: 3e-3,
        batch_size: 8,
        ..TrainConfig::default()
    };
    let mut state = TrainState::new(3, &tc);
    let mut recall = 0.0;
    for epoch in 1..=OVERFIT_EPOCHS {
        train_epoch(&mut model, subset, &mut state, &tc).unwrap();
        if epoch % 10 == 0 || epoch == OVERFIT_EPOCHS {
            recall = train_recall_at_1(&model, subset);
            if recall >= OVERFIT_RECALL {
                return (recall, epoch);
            }
        }
    }
    (recall, OVERFIT_EPOCHS)
}

fn trainability(work: &Path) -> Result<(bool, String), String> {
    let start = Instant::now();
    let log = filter_min_interactions(&generate(&corpus_spec()).unwrap(), 10).unwrap();
    let split = leave_one_out_split(&log, 20);
    let subset = &split.train[..OVERFIT_SEQUENCES];
    let mut ok = true;
    let mut parts = Vec::new();
    for mode in Mode::ALL {
        let (recall, epochs) = overfit(mode, subset, log.num_items());
        ok &= recall >= OVERFIT_RECALL;
        parts.push(format!("{mode} overfit R@1 {recall:.3} at epoch {epochs}"));
    }

    let data = work.join("corpus");
    genatt(&[
        "prepare",
        "--out",
        s(&data),
        "--synthetic",
        "users=500",
        "items=200",
        "cats=10",
        "seed=1",
    ])?;
    let baseline = |scorer: &str| -> Result<f64, String> {
        let out = work.join(scorer);
        genatt(&[
            "eval",
            "--out",
            s(&out),
            "--data",
            s(&data),
            "--scorer",
            scorer,
            "--n",
            "20",
        ])?;
        metric(&out, "ndcg", 10)
    };
    let pop = baseline("popularity")?;
    let random = baseline("random")?;
    parts.push(format!("popularity NDCG@10 {pop:.4}, random {random:.4}"));
    for mode in ["vae", "diffusion"] {
        let run = work.join(format!("train-{mode}"));
        genatt(&[
            "train",
            "--out",
            s(&run),
            "--data",
            s(&data),
            "--mode",
            mode,
            "--seed",
            "3",
            "--d",
            "32",
            "--n",
            "20",
            "--dropout",
            "0.2",
            "--lr",
            "3e-3",
            "--batch-size",
            "32",
            "--max-epochs",
            "10",
            "--patience",
            "5",
        ])?;
        let eval = work.join(format!("eval-{mode}"));
        genatt(&[
            "eval",
            "--out",
            s(&eval),
            "--data",
            s(&data),
            "--checkpoint",
            s(&run.join("checkpoint")),
        ])?;
        let ndcg = metric(&eval, "ndcg", 10)?;
        ok &= ndcg > pop && ndcg > random;
        parts.push(format!("{mode} NDCG@10 {ndcg:.4}"));
    }
    let secs = start.elapsed().as_secs_f64();
    ok &= secs < TRAINABILITY_SECONDS;
    parts.push(format!("{secs:.0}s"));
    Ok((ok, parts.join("; ")))
}

fn metrics() -> (bool, String) {
    let mismatches = metric_oracle_mismatches().unwrap();
    let spot = ndcg_at(3, 5);
    (
        mismatches == 0 && (spot - 0.5).abs() < SPOT_TOL,
        format!("{mismatches} mismatches over 720 rankings x 6 targets; rank 3 NDCG@5 = {spot}"),
    )
}

/// Returns (deterministic outcome, generative outcome).
fn causality() -> ((bool, String), (bool, String)) {
    let log = filter_min_interactions(&generate(&corpus_spec()).unwrap(), 10).unwrap();
    let encoder_gap = encoder_causality_gap(4).unwrap();
    let probe = |mode: Mode| {
        let mut mc = ModelConfig::new(mode, log.num_items()).with_dim(32).with_len(20);
        mc.seed = 3;
        causality_probe(&Model::<f64>::init(mc).unwrap(), 11).unwrap()
    };
    let det = probe(Mode::Deterministic);
    let deterministic = (
        det.is_exact() && encoder_gap == 0.0,
        format!(
            "deterministic hidden gap {:e}, score gap {:e}; recurrent prefix states gap {encoder_gap:e}",
            det.hidden_gap, det.score_gap
        ),
    );
    let mut exact = true;
    let mut parts = Vec::new();
    for mode in [Mode::Vae, Mode::Diffusion] {
        let p = probe(mode);
        exact &= p.is_exact();
        parts.push(format!(
            "{mode} hidden gap {:.2e}, score gap {:.2e}",
            p.hidden_gap, p.score_gap
        ));
    }
    ((deterministic.0, deterministic.1), (exact, parts.join("; ")))
}

fn log_without_timing(path: &Path) -> Result<Vec<String>, String> {
    Ok(fs::read_to_string(path)
        .map_err(|e| e.to_string())?
        .lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head).to_string())
        .collect())
}

fn reproducibility(work: &Path) -> Result<(bool, String), String> {
    let data = work.join("repro-data");
    genatt(&[
        "prepare",
        "--out",
        s(&data),
        "--synthetic",
        "users=120",
        "items=200",
        "cats=10",
        "seed=1",
    ])?;
    let mut ok = true;
    let mut parts = Vec::new();
    for mode in Mode::ALL {
        let mode = mode.to_string();
        let run = |tag: &str| -> Result<std::path::PathBuf, String> {
            let out = work.join(format!("repro-{mode}-{tag}"));
            genatt(&[
                "train",
                "--out",
                s(&out),
                "--data",
                s(&data),
                "--mode",
                &mode,
                "--seed",
                "7",
                "--d",
                "16",
                "--n",
                "20",
                "--max-epochs",
                "3",
                "--batch-size",
                "32",
            ])?;
            Ok(out)
        };
        let (a, b) = (run("a")?, run("b")?);
        let logs = log_without_timing(&a.join("train_log.csv"))? == log_without_timing(&b.join("train_log.csv"))?;
        let bytes = fs::read(a.join("checkpoint")).map_err(|e| e.to_string())?
            == fs::read(b.join("checkpoint")).map_err(|e| e.to_string())?;
        ok &= logs && bytes;
        parts.push(format!("{mode} logs equal={logs} checkpoints equal={bytes}"));
    }
    Ok((ok, parts.join("; ")))
}

fn benchmark(work: &Path) -> Result<(bool, String), String> {
    let data = work.join("corpus");
    let out = work.join("bench");
    let lengths = BENCH_LENGTHS.map(|n| n.to_string()).join(",");
    let steps = BENCH_STEPS.map(|t| t.to_string()).join(",");
    let start = Instant::now();
    // A failing exit code here means the T sweep was not monotone; the CSV
    // is still inspected below.
    let status = genatt(&[
        "bench",
        "--out",
        s(&out),
        "--data",
        s(&data),
        "--users",
        "4",
        "--lengths",
        &lengths,
        "--T-values",
        &steps,
    ]);
    let csv = fs::read_to_string(out.join("bench.csv")).map_err(|e| format!("{e} ({status:?})"))?;
    let mut grid = BTreeSet::new();
    let mut t_times = Vec::new();
    for line in csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        match f[0] {
            "length" => {
                grid.insert((f[1].to_string(), f[2].parse::<usize>().unwrap()));
            }
            "steps" => t_times.push((f[3].parse::<usize>().unwrap(), f[4].parse::<f64>().unwrap())),
            _ => return Err(format!("unexpected row {line}")),
        }
    }
    let full_grid = Mode::ALL
        .iter()
        .all(|m| BENCH_LENGTHS.iter().all(|&n| grid.contains(&(m.to_string(), n))));
    let monotone = t_times.windows(2).all(|w| w[0].1 <= w[1].1);
    let steps_ok = t_times.iter().map(|t| t.0).eq(BENCH_STEPS);
    let complexity = csv.contains("O(nd + n²)") && csv.contains("O(T·n²)");
    let times: Vec<String> = t_times.iter().map(|(t, s)| format!("T={t} {s:.3}s")).collect();
    Ok((
        full_grid && grid.len() == 15 && monotone && steps_ok && complexity && status.is_ok(),
        format!(
            "{} grid rows, diffusion {} ({}), {:.0}s",
            grid.len(),
            times.join(" "),
            if monotone { "non-decreasing" } else { "NOT monotone" },
            start.elapsed().as_secs_f64()
        ),
    ))
}

fn main() {
    let work = tempfile::tempdir().expect("temp dir");
    let mut outcomes = Vec::new();
    let mut record = |criterion: usize, result: Result<(bool, String), String>, expected_failure: bool| {
        let (passed, detail) = result.unwrap_or_else(|e| (false, e));
        let o = Outcome {
            criterion,
            passed,
            expected_failure,
            detail,
        };
        let tag = match (o.passed, o.expected_failure) {
            (true, _) => "PASS",
            (false, false) => "FAIL",
            (false, true) => "FAIL (expected)",
        };
        println!("criterion {}: {tag}: {}", o.criterion, o.detail);
        outcomes.push(o);
    };

    record(1, Ok(gradients()), false);
    record(2, Ok(diffusion_algebra()), false);
    record(3, Ok(stochasticity()), false);
    record(4, Ok(realizability()), false);
    record(5, trainability(work.path()), false);
    record(6, Ok(metrics()), false);
    let (det, gen) = causality();
    record(7, Ok(det), false);
    record(7, Ok((gen.0, format!("generative modes: {}", gen.1))), true);
    record(8, reproducibility(work.path()), false);
    record(9, benchmark(work.path()), false);

    let unexpected: Vec<usize> = outcomes
        .iter()
        .filter(|o| !o.passed && !o.expected_failure)
        .map(|o| o.criterion)
        .collect();
    let expected = outcomes.iter().filter(|o| !o.passed && o.expected_failure).count();
    println!(
        "acceptance: {} passed, {} failed as expected, {} failed",
        outcomes.iter().filter(|o| o.passed).count(),
        expected,
        unexpected.len()
    );
    if !unexpected.is_empty() {
        eprintln!("unexpected failures in criteria {unexpected:?}");
        std::process::exit(1);
    }
}
