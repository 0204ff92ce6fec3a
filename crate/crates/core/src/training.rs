//! Joint objective `L = L_rec + γ·L_gen`, Adam updates and early stopping.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use crate::attention::{diffusion_training_loss, GenAux};
use crate::data::{negative_sample, ItemId, SplitSet, TrainExample};
use crate::evaluation::{evaluate, EvalConfig, ModelScorer};
use crate::model::{forward, Mode, Model, Pass};
use crate::params::Bound;
use crate::tensor::{grad_check, Adam, AdamConfig, GradCheckReport, RngStream, Tape, Tensor, TensorError, Var};
use crate::{Error, Result, Scalar};

/// Binary cross-entropy on paired positive/negative logits over valid
/// positions, probabilities clamped to `[1e-7, 1 - 1e-7]`.
pub fn bce_loss<T: Scalar>(tape: &mut Tape<T>, pos: Var, neg: Var, mask: &[bool]) -> Result<Var> {
    if !mask.iter().any(|&m| m) {
        return Err(Error::Numeric("recommendation loss over an empty batch".into()));
    }
    Ok(tape.bce_logits(pos, neg, mask)?)
}

/// `mean_b −½ Σ_j (1 + log_var − mu² − exp(log_var))` against `N(0, I)`.
pub fn kl_loss<T: Scalar>(tape: &mut Tape<T>, mu: Var, log_var: Var) -> Result<Var> {
    let batch = tape.shape(mu).first().copied().unwrap_or(1).max(1);
    let one = tape.add_scalar(log_var, T::one());
    let mu2 = tape.mul(mu, mu)?;
    let var = tape.exp(log_var);
    let t = tape.sub(one, mu2)?;
    let t = tape.sub(t, var)?;
    let s = tape.sum(t);
    Ok(tape.scale(s, T::of(-0.5 / batch as f64)))
}

pub fn total_loss<T: Scalar>(tape: &mut Tape<T>, rec: Var, gen: Var, gamma: f64) -> Result<Var> {
    if gamma < 0.0 {
        return Err(Error::Config(format!("gamma {gamma} must be >= 0")));
    }
    Ok(tape.axpby(rec, gen, T::one(), T::of(gamma))?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Seed of the fixed validation-time noise stream.
    pub eval_seed: u64,
    /// Stochastic passes averaged per validation score.
    pub eval_average: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 128,
            max_epochs: 500,
            patience: 20,
            eval_seed: 2024,
            eval_average: 1,
        }
    }
}

/// Optimizer moments, data-order/noise stream and early-stopping counters.
#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub epoch: usize,
    pub best_metric: f64,
    pub best_epoch: usize,
    pub patience_left: usize,
    pub optimizer: Adam<T>,
    pub rng: RngStream,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(seed: u64, cfg: &TrainConfig) -> Self {
        TrainState {
            epoch: 0,
            best_metric: f64::NEG_INFINITY,
            best_epoch: 0,
            patience_left: cfg.patience,
            optimizer: Adam::new(AdamConfig {
                lr: cfg.lr,
                ..AdamConfig::default()
            }),
            rng: RngStream::new(seed).fork(0x7261),
        }
    }

    /// Records a validation value; returns `true` on strict improvement.
    /// Patience resets to `patience` on improvement and otherwise counts down.
    pub fn observe(&mut self, metric: f64, patience: usize) -> bool {
        if metric > self.best_metric {
            self.best_metric = metric;
            self.best_epoch = self.epoch;
            self.patience_left = patience;
            true
        } else {
            self.patience_left = self.patience_left.saturating_sub(1);
            false
        }
    }

    pub fn exhausted(&self) -> bool {
        self.patience_left == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EpochStats {
    pub rec_loss: f64,
    pub gen_loss: f64,
    pub total_loss: f64,
    pub batches: usize,
}

/// Loss terms of one forward pass on a training batch.
pub struct BatchLoss {
    pub rec: Var,
    pub gen: Var,
    pub total: Var,
}

/// Builds the joint loss for `batch` on `tape`, sampling one negative per
/// supervised position.
pub fn batch_loss<T: Scalar>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    p: &Bound,
    batch: &[&TrainExample],
    rng: &mut RngStream,
    train: bool,
) -> Result<BatchLoss> {
    let cfg = &model.config;
    let n = cfg.n;
    let mut items = Vec::with_capacity(batch.len() * n);
    let mut mask = Vec::with_capacity(batch.len() * n);
    let mut pos_ids = Vec::with_capacity(batch.len() * n);
    let mut neg_ids = Vec::with_capacity(batch.len() * n);
    for ex in batch {
        if ex.seq.len() != n {
            return Err(Error::Config(format!(
                "sequence length {} != model length {n}",
                ex.seq.len()
            )));
        }
        items.extend_from_slice(&ex.seq.items);
        mask.extend_from_slice(&ex.seq.mask);
        let owned: BTreeSet<ItemId> = ex.targets.iter().copied().filter(|&t| t != 0).collect();
        for &t in &ex.targets {
            pos_ids.push(t);
            neg_ids.push(if t == 0 {
                0
            } else {
                negative_sample(&owned, cfg.num_items, rng)?
            });
        }
    }
    let supervised: Vec<bool> = pos_ids.iter().map(|&t| t != 0).collect();
    let mut pass = Pass::train(rng);
    pass.train = train;
    let out = forward(tape, cfg, model.schedule(), p, &items, &mask, &mut pass)?;
    let table = p.get("emb.item")?;
    let h = tape.reshape(out.hidden, vec![batch.len() * n, cfg.d])?;
    let pe = tape.gather_rows(table, &pos_ids)?;
    let ne = tape.gather_rows(table, &neg_ids)?;
    let pos = tape.mul(h, pe)?;
    let pos = tape.sum_axis(pos, 1)?;
    let neg = tape.mul(h, ne)?;
    let neg = tape.sum_axis(neg, 1)?;
    let rec = bce_loss(tape, pos, neg, &supervised)?;
    let gen = match (cfg.mode, out.generated.as_ref().map(|g| &g.aux)) {
        (Mode::Vae, Some(GenAux::Vae(lat))) => kl_loss(tape, lat.mu, lat.log_var)?,
        (Mode::Diffusion, Some(_)) => {
            let h_g = out.h_g.expect("diffusion mode encodes h_g");
            diffusion_training_loss(tape, h_g, model.schedule(), p, cfg.stack_shape(), pass.rng)?
        }
        _ => tape.constant(Tensor::scalar(T::zero())),
    };
    let total = total_loss(tape, rec, gen, cfg.gamma)?;
    Ok(BatchLoss { rec, gen, total })
}

/// One pass over `train` in a freshly shuffled order with Adam updates.
pub fn train_epoch<T: Scalar>(
    model: &mut Model<T>,
    train: &[TrainExample],
    state: &mut TrainState<T>,
    cfg: &TrainConfig,
) -> Result<EpochStats> {
    let mut order: Vec<usize> = (0..train.len()).collect();
    state.rng.shuffle(&mut order);
    let mut stats = EpochStats::default();
    for (bi, chunk) in order.chunks(cfg.batch_size.max(1)).enumerate() {
        let batch: Vec<&TrainExample> = chunk.iter().map(|&i| &train[i]).collect();
        if !batch.iter().any(|ex| ex.targets.iter().any(|&t| t != 0)) {
            continue;
        }
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape, true);
        let loss = batch_loss(&mut tape, model, &p, &batch, &mut state.rng, true)?;
        let (rec, gen, total) = (
            tape.value(loss.rec).item()?.as_f64(),
            tape.value(loss.gen).item()?.as_f64(),
            tape.value(loss.total).item()?.as_f64(),
        );
        if !total.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at batch {bi}: rec={rec} gen={gen} total={total}"
            )));
        }
        tape.backward(loss.total)?;
        state.optimizer.begin_step();
        for (name, &var) in p.iter() {
            if let Some(g) = tape.grad(var) {
                state.optimizer.update(name, model.params.get_mut(name)?, &g);
            }
        }
        model.zero_pad_row()?;
        stats.rec_loss += rec;
        stats.gen_loss += gen;
        stats.total_loss += total;
        stats.batches += 1;
    }
    if stats.batches > 0 {
        let b = stats.batches as f64;
        stats.rec_loss /= b;
        stats.gen_loss /= b;
        stats.total_loss /= b;
    }
    Ok(stats)
}

/// Central-difference check of the full joint loss with respect to every
/// parameter. Dropout is off and the noise stream is re-seeded with `seed`
/// on every evaluation, so the loss is a deterministic function.
pub fn model_grad_check(model: &Model<f64>, batch: &[TrainExample], seed: u64, h: f64) -> Result<GradCheckReport> {
    let names: Vec<String> = model.params.names().cloned().collect();
    let values = names
        .iter()
        .map(|n| model.params.get(n).cloned())
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&TrainExample> = batch.iter().collect();
    let loss = |tape: &mut Tape<f64>, vars: &[Var]| {
        let p = Bound::from_pairs(names.iter().cloned().zip(vars.iter().copied()));
        let mut rng = RngStream::new(seed);
        batch_loss(tape, model, &p, &refs, &mut rng, false)
            .map(|l| l.total)
            .map_err(|e| match e {
                Error::Tensor(t) => t,
                other => TensorError::External(other.to_string()),
            })
    };
    Ok(grad_check(loss, &values, h)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub rec_loss: f64,
    pub gen_loss: f64,
    pub total_loss: f64,
    pub val_ndcg20: f64,
    pub seconds: f64,
}

pub const TRAIN_LOG_HEADER: &str = "epoch,rec_loss,gen_loss,total_loss,val_ndcg20,seconds";

pub fn train_log_csv(log: &[EpochLog]) -> String {
    let mut s = format!("{TRAIN_LOG_HEADER}\n");
    for e in log {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{:.3}",
            e.epoch, e.rec_loss, e.gen_loss, e.total_loss, e.val_ndcg20, e.seconds
        );
    }
    s
}

pub fn write_train_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    fs::write(path, train_log_csv(log)).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct FitResult<T> {
    pub best: Model<T>,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
    /// `true` when patience ran out before `max_epochs`.
    pub stopped_early: bool,
}

/// Trains until validation stalls for `patience` epochs or `max_epochs`
/// is reached; `validate` returns the metric to maximize (NDCG@20).
pub fn fit_with<T, V, F>(
    mut model: Model<T>,
    train: &[TrainExample],
    cfg: &TrainConfig,
    mut validate: V,
    mut on_epoch: F,
) -> Result<FitResult<T>>
where
    T: Scalar,
    V: FnMut(&Model<T>) -> Result<f64>,
    F: FnMut(&EpochLog),
{
    let mut state = TrainState::new(model.config.seed, cfg);
    let mut best = model.clone();
    let mut log = Vec::new();
    let mut stopped_early = false;
    while state.epoch < cfg.max_epochs {
        state.epoch += 1;
        let start = Instant::now();
        let stats = train_epoch(&mut model, train, &mut state, cfg)?;
        let metric = validate(&model)?;
        if state.observe(metric, cfg.patience) {
            best = model.clone();
        }
        let entry = EpochLog {
            epoch: state.epoch,
            rec_loss: stats.rec_loss,
            gen_loss: stats.gen_loss,
            total_loss: stats.total_loss,
            val_ndcg20: metric,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&entry);
        log.push(entry);
        if state.exhausted() {
            stopped_early = true;
            break;
        }
    }
    Ok(FitResult {
        best,
        best_epoch: state.best_epoch,
        log,
        stopped_early,
    })
}

/// [`fit_with`] validated by NDCG@20 on `split.valid` with a fixed-seed
/// inference stream.
pub fn fit<T: Scalar, F: FnMut(&EpochLog)>(
    model: Model<T>,
    split: &SplitSet,
    cfg: &TrainConfig,
    on_epoch: F,
) -> Result<FitResult<T>> {
    let eval_cfg = EvalConfig {
        ks: vec![20],
        ..EvalConfig::default()
    };
    let no_categories = vec![BTreeSet::new(); model.config.num_items + 1];
    let validate = |m: &Model<T>| {
        let mut scorer = ModelScorer::new(m, cfg.eval_seed);
        scorer.average = cfg.eval_average;
        let t = evaluate(&mut scorer, &split.valid, &no_categories, 1, &eval_cfg)?;
        Ok(t.get("ndcg", Some(20)).unwrap_or(0.0))
    };
    fit_with(model, &split.train, cfg, validate, on_epoch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::pad_truncate;
    use crate::model::ModelConfig;

    fn scalar_pair(tape: &mut Tape<f64>, pos: f64, neg: f64) -> (Var, Var) {
        let p = tape.param(Tensor::from_f64(vec![1], &[pos]).unwrap());
        let n = tape.param(Tensor::from_f64(vec![1], &[neg]).unwrap());
        (p, n)
    }

    #[test]
    fn bce_examples() {
        let mut tape = Tape::new();
        let (p, n) = scalar_pair(&mut tape, 0.0, 0.0);
        let l = bce_loss(&mut tape, p, n, &[true]).unwrap();
        assert!((tape.value(l).item().unwrap() - 2f64.ln()).abs() < 1e-12);
        let (p, n) = scalar_pair(&mut tape, 1e4, -1e4);
        let l = bce_loss(&mut tape, p, n, &[true]).unwrap();
        assert!(tape.value(l).item().unwrap() < 1e-6);
        assert!(bce_loss(&mut tape, p, n, &[false]).is_err());
    }

    fn kl(mu: &[f64], lv: &[f64]) -> f64 {
        let mut tape = Tape::new();
        let m = tape.constant(Tensor::from_f64(vec![1, mu.len()], mu).unwrap());
        let l = tape.constant(Tensor::from_f64(vec![1, lv.len()], lv).unwrap());
        let k = kl_loss(&mut tape, m, l).unwrap();
        tape.value(k).item().unwrap()
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert!((kl(&[1.0], &[0.0]) - 0.5).abs() < 1e-12);
        assert!((kl(&[0.0], &[2f64.ln()]) - (-0.5 * (2f64.ln() - 1.0))).abs() < 1e-12);
        assert!((kl(&[0.0], &[2f64.ln()]) - 0.1534).abs() < 1e-4);
    }

    #[test]
    fn total_loss_examples() {
        let mut tape = Tape::<f64>::new();
        let r = tape.constant(Tensor::scalar(0.5));
        let g = tape.constant(Tensor::scalar(0.2));
        let t = total_loss(&mut tape, r, g, 2.0).unwrap();
        assert!((tape.value(t).item().unwrap() - 0.9).abs() < 1e-12);
        let t0 = total_loss(&mut tape, r, g, 0.0).unwrap();
        assert_eq!(tape.value(t0).item().unwrap(), 0.5);
        let t1 = total_loss(&mut tape, r, g, 1.0).unwrap();
        assert!((tape.value(t1).item().unwrap() - 0.7).abs() < 1e-12);
        assert!(total_loss(&mut tape, r, g, -1.0).is_err());
    }

    #[test]
    fn patience_counter() {
        let cfg = TrainConfig::default();
        let mut s = TrainState::<f64>::new(0, &cfg);
        let mut stop = None;
        for epoch in 1..=100 {
            s.epoch = epoch;
            s.observe(0.25, cfg.patience);
            if s.exhausted() {
                stop = Some(epoch);
                break;
            }
        }
        assert_eq!(stop, Some(21));
        let mut s = TrainState::<f64>::new(0, &cfg);
        for epoch in 1..=100 {
            s.epoch = epoch;
            s.observe(epoch as f64, cfg.patience);
            assert!(!s.exhausted());
        }
    }

    fn toy_train(n: usize) -> Vec<TrainExample> {
        (0..6)
            .map(|u| {
                let region: Vec<usize> = (0..5).map(|k| 1 + (u + k * 3) % 12).collect();
                let mut seq = pad_truncate(&region[..4], n);
                seq.target = region[4];
                TrainExample {
                    user: u,
                    seq,
                    targets: pad_truncate(&region, n).items,
                }
            })
            .collect()
    }

    fn tiny(mode: Mode, seed: u64) -> Model<f64> {
        let mut c = ModelConfig::new(mode, 12).with_dim(8).with_len(5);
        c.seed = seed;
        c.layers = 1;
        c.dropout = 0.0;
        Model::init(c).unwrap()
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let mut model = tiny(Mode::Vae, 1);
        let before = model.params.clone();
        let cfg = TrainConfig {
            lr: 0.0,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let mut state = TrainState::new(1, &cfg);
        train_epoch(&mut model, &toy_train(5), &mut state, &cfg).unwrap();
        assert_eq!(model.params, before);
    }

    #[test]
    fn same_seed_same_epoch_stats() {
        let cfg = TrainConfig {
            batch_size: 4,
            ..TrainConfig::default()
        };
        let run = || {
            let mut model = tiny(Mode::Diffusion, 2);
            let mut state = TrainState::new(2, &cfg);
            train_epoch(&mut model, &toy_train(5), &mut state, &cfg).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn constant_validation_stops_at_epoch_21() {
        let cfg = TrainConfig {
            batch_size: 8,
            max_epochs: 100,
            ..TrainConfig::default()
        };
        let res = fit_with(tiny(Mode::Deterministic, 3), &toy_train(5), &cfg, |_| Ok(0.1), |_| {}).unwrap();
        assert_eq!(res.log.len(), 21);
        assert!(res.stopped_early);
        assert_eq!(res.best_epoch, 1);
        let csv = train_log_csv(&res.log);
        assert!(csv.starts_with(TRAIN_LOG_HEADER));
        assert_eq!(csv.lines().count(), 22);
    }

    #[test]
    fn increasing_validation_runs_to_the_cap() {
        let cfg = TrainConfig {
            batch_size: 8,
            max_epochs: 25,
            ..TrainConfig::default()
        };
        let mut k = 0.0;
        let res = fit_with(
            tiny(Mode::Deterministic, 4),
            &toy_train(5),
            &cfg,
            |_| {
                k += 1.0;
                Ok(k)
            },
            |_| {},
        )
        .unwrap();
        assert_eq!(res.log.len(), 25);
        assert!(!res.stopped_early);
        assert_eq!(res.best_epoch, 25);
    }
}
