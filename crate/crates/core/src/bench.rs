//! Per-epoch training-time harness over sequence lengths and diffusion steps.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use crate::data::{leave_one_out_split, InteractionLog};
use crate::model::{Mode, Model, ModelConfig};
use crate::training::{train_epoch, TrainConfig, TrainState};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub lengths: Vec<usize>,
    /// Diffusion step counts timed at `steps_len`.
    pub steps: Vec<usize>,
    pub steps_len: usize,
    pub d: usize,
    /// Users (from the front of the log) used for timing.
    pub users: usize,
    pub batch_size: usize,
    /// Tape memory allowed per diffusion batch; the batch shrinks to fit.
    pub max_batch_bytes: usize,
    /// Timed epochs per cell; the minimum is reported.
    pub repeats: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            lengths: vec![20, 30, 50, 100, 200],
            steps: vec![10, 25, 50],
            steps_len: 50,
            d: 16,
            users: 16,
            batch_size: 64,
            max_batch_bytes: 1 << 30,
            repeats: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    /// `"length"` for the mode × n grid, `"steps"` for the diffusion T sweep.
    pub sweep: &'static str,
    pub mode: Mode,
    pub n: usize,
    /// Diffusion steps (diffusion rows only).
    pub steps: Option<usize>,
    pub epoch_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

/// Analytic (time, space) complexity of one attention stack per mode.
pub fn complexity(mode: Mode) -> (&'static str, &'static str) {
    match mode {
        Mode::Deterministic => ("O(n²d + nd²)", "O(|I|d + nd + 3d²)"),
        Mode::Vae => ("O(nd + n²)", "O(|I|d + nd + nd_h)"),
        Mode::Diffusion => ("O(T·n²)", "O(|I|d + nd + Td_h)"),
    }
}

impl BenchReport {
    pub fn steps_rows(&self) -> impl Iterator<Item = &BenchRow> {
        self.rows.iter().filter(|r| r.sweep == "steps")
    }

    /// Diffusion epoch time is non-decreasing in T.
    pub fn steps_monotone(&self) -> bool {
        let times: Vec<f64> = self.steps_rows().map(|r| r.epoch_seconds).collect();
        times.windows(2).all(|w| w[0] <= w[1])
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("sweep,mode,n,T,epoch_seconds,time_complexity,space_complexity\n");
        for r in &self.rows {
            let (time, space) = complexity(r.mode);
            let steps = r.steps.map(|t| t.to_string()).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{},{},{:.6},{},{}",
                r.sweep, r.mode, r.n, steps, r.epoch_seconds, time, space
            );
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Rough tape footprint of one sequence: a handful of stack-sized
/// intermediates per reverse step for diffusion.
fn bytes_per_sequence(mc: &ModelConfig) -> usize {
    let stack = mc.stack_shape().per_sample() * std::mem::size_of::<f64>();
    match mc.mode {
        Mode::Diffusion => 8 * stack * (mc.steps + 1),
        _ => 8 * stack,
    }
}

fn time_epoch(log: &InteractionLog, mode: Mode, n: usize, steps: usize, cfg: &BenchConfig) -> Result<f64> {
    let split = leave_one_out_split(log, n);
    let mut mc = ModelConfig::new(mode, log.num_items()).with_dim(cfg.d).with_len(n);
    mc.steps = steps;
    mc.seed = cfg.seed;
    let fit = (cfg.max_batch_bytes / bytes_per_sequence(&mc)).max(1);
    let tc = TrainConfig {
        batch_size: cfg.batch_size.min(fit),
        ..TrainConfig::default()
    };
    let mut best = f64::INFINITY;
    for _ in 0..cfg.repeats.max(1) {
        let mut model = Model::<f64>::init(mc.clone())?;
        let mut state = TrainState::new(cfg.seed, &tc);
        let start = Instant::now();
        train_epoch(&mut model, &split.train, &mut state, &tc)?;
        best = best.min(start.elapsed().as_secs_f64());
    }
    Ok(best)
}

/// Times one training epoch for every (mode, n) cell, with `T = n` for
/// diffusion, and for diffusion over `cfg.steps` at `cfg.steps_len`.
pub fn run_bench(log: &InteractionLog, cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.lengths.is_empty() || cfg.users == 0 {
        return Err(Error::Config("benchmark needs at least one length and one user".into()));
    }
    let mut subset = log.clone();
    subset.users.truncate(cfg.users);
    // The T sweep runs first so the large-n cells cannot disturb it; its
    // rows are still reported after the grid.
    let mut steps_rows = Vec::new();
    for &t in &cfg.steps {
        let epoch_seconds = time_epoch(&subset, Mode::Diffusion, cfg.steps_len, t, cfg)?;
        log::info!("bench diffusion T={t}: {epoch_seconds:.3}s");
        steps_rows.push(BenchRow {
            sweep: "steps",
            mode: Mode::Diffusion,
            n: cfg.steps_len,
            steps: Some(t),
            epoch_seconds,
        });
    }
    let mut rows = Vec::new();
    for mode in Mode::ALL {
        for &n in &cfg.lengths {
            let epoch_seconds = time_epoch(&subset, mode, n, n, cfg)?;
            log::info!("bench {mode} n={n}: {epoch_seconds:.3}s");
            rows.push(BenchRow {
                sweep: "length",
                mode,
                n,
                steps: (mode == Mode::Diffusion).then_some(n),
                epoch_seconds,
            });
        }
    }
    rows.extend(steps_rows);
    Ok(BenchReport { rows })
}
