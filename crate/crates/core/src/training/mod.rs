//! Supervised training on expert action maps.

mod checkpoint;
mod eval;
mod optim;

use std::fmt::Write as _;

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use checkpoint::Checkpoint;
pub use eval::{evaluate_success, greedy_actions, rollout_counts, start_cells, success_of_actions, EvalConfig};
pub use optim::RmsProp;

use crate::envs::PlanningSample;
use crate::error::{Error, Result};
use crate::gradients::{loss_and_gradient, SampleGradient};
use crate::ops;
use crate::planners::{init_params, Differentiation, ModelParams, PlannerSpec};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub rmsprop_alpha: f64,
    pub rmsprop_eps: f64,
    pub seed: u64,
    pub planner: PlannerSpec,
    pub eval: EvalConfig,
}

impl TrainConfig {
    pub fn new(planner: PlannerSpec, seed: u64) -> Self {
        Self {
            epochs: 60,
            batch_size: 32,
            lr: 1e-3,
            rmsprop_alpha: 0.99,
            rmsprop_eps: 1e-8,
            seed,
            planner,
            eval: EvalConfig {
                seed,
                ..EvalConfig::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.planner.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be non-negative, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.rmsprop_alpha) {
            return Err(Error::Config(format!(
                "rmsprop_alpha must lie in [0, 1), got {}",
                self.rmsprop_alpha
            )));
        }
        if !(self.rmsprop_eps > 0.0) {
            return Err(Error::Config(format!(
                "rmsprop_eps must be positive, got {}",
                self.rmsprop_eps
            )));
        }
        if self.eval.horizon_factor == 0 || self.eval.sampled_starts == 0 {
            return Err(Error::Config(
                "evaluation horizon and start count must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Snapshot of a ChaCha stream position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Mean masked cross-entropy over free non-goal cells.
pub fn cross_entropy_loss(logits: &Tensor, expert: &[u8]) -> Result<f64> {
    Ok(ops::masked_cross_entropy(logits, expert)?.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_success: f64,
    pub diverged_batches: usize,
    pub fwd_iters_mean: f64,
    pub bwd_iters_mean: f64,
    pub fwd_time_s: f64,
    pub bwd_time_s: f64,
}

pub const CURVE_HEADER: &str =
    "epoch,train_loss,val_success,diverged_batches,fwd_iters_mean,bwd_iters_mean,fwd_time_s,bwd_time_s";

pub fn curve_csv(records: &[EpochRecord]) -> String {
    let mut out = String::from(CURVE_HEADER);
    out.push('\n');
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{},{:.6},{:.6}",
            r.epoch,
            r.train_loss,
            r.val_success,
            r.diverged_batches,
            r.fwd_iters_mean,
            r.bwd_iters_mean,
            r.fwd_time_s,
            r.bwd_time_s
        )
        .expect("writing to a String cannot fail");
    }
    out
}

fn is_divergence(e: &Error) -> bool {
    matches!(e, Error::Diverged { .. } | Error::NonFinite { .. })
}

fn check_dataset(spec: &PlannerSpec, name: &str, samples: &[PlanningSample]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Config(format!("{name} set is empty")));
    }
    if let Some(s) = samples.iter().find(|s| s.grid.size != spec.map_size) {
        return Err(Error::Config(format!(
            "{name} set has a {}×{} map but the planner expects {}",
            s.grid.size, s.grid.size, spec.map_size
        )));
    }
    Ok(())
}

/// Per-batch outcome: averaged gradient plus bookkeeping, or divergence.
struct BatchResult {
    grads: ModelParams,
    loss_sum: f64,
    fwd_iters: usize,
    bwd_iters: usize,
    fwd_time_s: f64,
    bwd_time_s: f64,
}

fn batch_gradient(spec: &PlannerSpec, params: &ModelParams, batch: &[&PlanningSample]) -> Result<Option<BatchResult>> {
    let results: Vec<Result<SampleGradient>> = batch.par_iter().map(|s| loss_and_gradient(spec, params, s)).collect();
    let mut out = BatchResult {
        grads: params.zeros_like(),
        loss_sum: 0.0,
        fwd_iters: 0,
        bwd_iters: 0,
        fwd_time_s: 0.0,
        bwd_time_s: 0.0,
    };
    // fixed sample-index reduction order keeps training bit-reproducible
    for r in results {
        match r {
            Ok(g) => {
                out.grads.add_scaled(1.0, &g.grads)?;
                out.loss_sum += g.loss;
                out.fwd_iters += g.forward.iterations;
                out.bwd_iters += g.vjp_replays;
                out.fwd_time_s += g.fwd_time_s;
                out.bwd_time_s += g.bwd_time_s;
            }
            Err(e) if is_divergence(&e) => {
                debug!("sample diverged: {e}");
                return Ok(None);
            }
            Err(e) => return Err(e),
        }
    }
    let inv = 1.0 / batch.len() as f64;
    for (_, t) in out.grads.iter_mut() {
        *t = t.scale(inv);
    }
    Ok(Some(out))
}

#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub params: ModelParams,
    pub optimizer: RmsProp,
    pub epoch: usize,
    pub best_val: f64,
    pub best_epoch: usize,
    /// Snapshot taken at the best validation epoch of this session.
    pub best: Option<Checkpoint>,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let params = init_params(&config.planner, config.seed)?;
        let optimizer = RmsProp::new(&params, config.lr, config.rmsprop_alpha, config.rmsprop_eps);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Self {
            config,
            params,
            optimizer,
            epoch: 0,
            best_val: f64::NEG_INFINITY,
            best_epoch: 0,
            best: None,
            rng,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.config.validate()?;
        let expected = init_params(&ck.config.planner, 0)?;
        let names_match = expected
            .iter()
            .zip(ck.params.iter())
            .all(|((a, ta), (b, tb))| a == b && ta.shape() == tb.shape())
            && expected.len() == ck.params.len();
        if !names_match {
            return Err(Error::Config("checkpoint tensors do not match its planner spec".into()));
        }
        let c = &ck.config;
        Ok(Self {
            config: ck.config,
            params: ck.params.clone(),
            optimizer: RmsProp {
                lr: c.lr,
                alpha: c.rmsprop_alpha,
                eps: c.rmsprop_eps,
                state: ck.optimizer.clone(),
            },
            epoch: ck.epoch,
            best_val: ck.best_val,
            best_epoch: ck.best_epoch,
            best: None,
            rng: ck.rng.restore(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config,
            params: self.params.clone(),
            optimizer: self.optimizer.state.clone(),
            epoch: self.epoch,
            best_val: self.best_val,
            best_epoch: self.best_epoch,
            rng: RngState::capture(&self.rng),
        }
    }

    pub fn run_epoch(&mut self, train: &[PlanningSample], val: &[PlanningSample]) -> Result<EpochRecord> {
        let spec = self.config.planner;
        check_dataset(&spec, "training", train)?;
        check_dataset(&spec, "validation", val)?;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);

        let mut batches = 0;
        let mut diverged = 0;
        let mut used = 0;
        let (mut loss_sum, mut fwd_iters, mut bwd_iters, mut fwd_t, mut bwd_t) = (0.0, 0, 0, 0.0, 0.0);
        for chunk in order.chunks(self.config.batch_size) {
            batches += 1;
            let batch: Vec<&PlanningSample> = chunk.iter().map(|&i| &train[i]).collect();
            match batch_gradient(&spec, &self.params, &batch)? {
                Some(b) => {
                    let mut next = self.params.clone();
                    let mut opt = self.optimizer.clone();
                    opt.step(&mut next, &b.grads)?;
                    if !next.is_finite() {
                        warn!(
                            "epoch {}: update produced non-finite parameters, batch skipped",
                            self.epoch + 1
                        );
                        diverged += 1;
                        continue;
                    }
                    self.params = next;
                    self.optimizer = opt;
                    used += batch.len();
                    loss_sum += b.loss_sum;
                    fwd_iters += b.fwd_iters;
                    bwd_iters += b.bwd_iters;
                    fwd_t += b.fwd_time_s;
                    bwd_t += b.bwd_time_s;
                }
                None => {
                    warn!("epoch {}: batch {batches} diverged and was skipped", self.epoch + 1);
                    diverged += 1;
                }
            }
        }
        if 2 * diverged > batches {
            return Err(Error::TooManyDiverged {
                epoch: self.epoch + 1,
                diverged,
                batches,
            });
        }

        let val_success = evaluate_success(&spec, &self.params, val, &self.config.eval)?;
        self.epoch += 1;
        if val_success > self.best_val {
            self.best_val = val_success;
            self.best_epoch = self.epoch;
            self.best = Some(self.checkpoint());
        }
        let per = |x: usize| if used == 0 { 0.0 } else { x as f64 / used as f64 };
        let record = EpochRecord {
            epoch: self.epoch,
            train_loss: if used == 0 { f64::NAN } else { loss_sum / used as f64 },
            val_success,
            diverged_batches: diverged,
            fwd_iters_mean: per(fwd_iters),
            bwd_iters_mean: per(bwd_iters),
            fwd_time_s: fwd_t,
            bwd_time_s: bwd_t,
        };
        info!(
            "epoch {} loss {:.4} val {:.4} diverged {} ({})",
            record.epoch,
            record.train_loss,
            record.val_success,
            record.diverged_batches,
            match spec.differentiation {
                Differentiation::Implicit => "implicit",
                Differentiation::Explicit => "explicit",
            }
        );
        Ok(record)
    }

    /// Runs the remaining epochs, calling `on_epoch` after each one.
    pub fn run<F>(
        &mut self,
        train: &[PlanningSample],
        val: &[PlanningSample],
        mut on_epoch: F,
    ) -> Result<Vec<EpochRecord>>
    where
        F: FnMut(&Self, &EpochRecord) -> Result<()>,
    {
        let mut records = Vec::new();
        while self.epoch < self.config.epochs {
            let r = self.run_epoch(train, val)?;
            on_epoch(self, &r)?;
            records.push(r);
        }
        Ok(records)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub last: Checkpoint,
    pub best: Checkpoint,
    pub curve: Vec<EpochRecord>,
}

/// Trains from scratch for `config.epochs` epochs.
pub fn train(config: TrainConfig, train: &[PlanningSample], val: &[PlanningSample]) -> Result<TrainOutcome> {
    let mut t = Trainer::new(config)?;
    let curve = t.run(train, val, |_, _| Ok(()))?;
    let last = t.checkpoint();
    Ok(TrainOutcome {
        best: t.best.clone().unwrap_or_else(|| last.clone()),
        last,
        curve,
    })
}
