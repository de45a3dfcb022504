//! Joint optimization of the downstream model θ and the regularizer's
//! auxiliary parameters (μ, V, translator).
//!
//! Each step computes the cross-entropy `L̂` and the regularizer `δ̂` on one
//! mini-batch, moves θ along `∇θ(L̂ + βδ̂)` and the auxiliary parameters along
//! `∇δ̂` only, each with its own Adam state. With `bilevel_inner_steps = k >
//! 0`, k auxiliary updates on the same batch precede the θ update.

mod optim;
mod record;

use serde::{Deserialize, Serialize};

pub use optim::{adam_update, Adam, Moments, Schedule, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use record::{EvalRecord, RunHeader, RunRecord, StepRecord};

use crate::error::{Error, Result};
use crate::featurestore::Dataset;
use crate::models::{Activation, Checkpoint, Extractor, ExtractorKind, LinearHead, Model};
use crate::numerics::{Matrix, Tape};
use crate::regularizers::{
    pretrain_paraphraser, Regularizer, RegularizerKind, RegularizerSpec,
};
use crate::rng::{stream, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub kind: ExtractorKind,
    pub hidden: Vec<usize>,
    pub d_phi: usize,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ExtractorKind::Mlp,
            hidden: vec![64],
            d_phi: 32,
            activation: Activation::Tanh,
        }
    }
}

impl ModelConfig {
    pub fn build(&self, d_in: usize, n_classes: usize, rng: &mut Rng) -> Model {
        let extractor = match self.kind {
            ExtractorKind::Mlp => {
                Extractor::mlp(d_in, &self.hidden, self.d_phi, self.activation, rng)
            }
            ExtractorKind::Linear => Extractor::linear(d_in, self.d_phi, rng),
        };
        let head = LinearHead::new(self.d_phi, n_classes, rng);
        Model { extractor, head }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub lr_theta: f64,
    pub lr_mu: f64,
    pub schedule: Schedule,
    pub bilevel_inner_steps: usize,
    pub seed: u64,
    /// `None` trains without any regularizer (plain transfer).
    pub regularizer: Option<RegularizerSpec>,
    pub model: ModelConfig,
    /// Evaluate every this many steps; 0 evaluates only after the last step.
    pub eval_every: usize,
    pub paraphraser_steps: usize,
    pub paraphraser_lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            steps: 2000,
            lr_theta: 1e-3,
            lr_mu: 1e-2,
            schedule: Schedule::CosineToZero,
            bilevel_inner_steps: 0,
            seed: 0,
            regularizer: None,
            model: ModelConfig::default(),
            eval_every: 0,
            paraphraser_steps: crate::regularizers::PARAPHRASER_STEPS,
            paraphraser_lr: 1e-2,
        }
    }
}

impl TrainConfig {
    pub fn beta(&self) -> f64 {
        self.regularizer.as_ref().map_or(0.0, |r| r.beta)
    }

    pub fn with_beta(&self, beta: f64) -> Self {
        let mut c = self.clone();
        if let Some(r) = &mut c.regularizer {
            r.beta = beta;
        }
        c
    }

    /// Smallest usable batch: relational distillation compares triples.
    pub fn min_batch(&self) -> usize {
        match &self.regularizer {
            Some(r) if r.beta > 0.0 && r.kind == RegularizerKind::Rkd => 3,
            _ => 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if self.steps < 1 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        for (name, v) in [("lr_theta", self.lr_theta), ("lr_mu", self.lr_mu)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.beta() >= 0.0) || !self.beta().is_finite() {
            return Err(Error::Config(format!("beta must be >= 0, got {}", self.beta())));
        }
        Ok(())
    }
}

/// One mini-batch: inputs, labels and the aligned cached pre-trained rows.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Matrix,
    pub y: Vec<usize>,
    pub psi: Matrix,
}

impl Batch {
    pub fn gather(data: &Dataset, rows: &[usize]) -> Self {
        Self {
            x: data.inputs.select_rows(rows),
            y: data.labels.select(rows),
            psi: data.psi.select_rows(rows),
        }
    }
}

/// Rates for one step after the schedule multiplier has been applied.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRates {
    pub lr_theta: f64,
    pub lr_mu: f64,
    pub beta: f64,
    pub bilevel_inner_steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub reg: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub regularizer: Option<Regularizer>,
    pub theta_opt: Adam,
    pub aux_opt: Adam,
    pub step: usize,
}

impl TrainState {
    /// Seeded initialization. Factor transfer pre-trains its paraphraser on
    /// `psi_fit` here.
    pub fn init(config: &TrainConfig, d_in: usize, n_classes: usize, psi_fit: &Matrix) -> Result<Self> {
        let model = config.model.build(
            d_in,
            n_classes,
            &mut Rng::derive(config.seed, stream::MODEL_INIT),
        );
        let regularizer = match &config.regularizer {
            Some(spec) if spec.beta > 0.0 => {
                let mut aux_rng = Rng::derive(config.seed, stream::AUX_INIT);
                let mut reg =
                    Regularizer::new(spec, config.model.d_phi, psi_fit.cols(), &mut aux_rng);
                if let Regularizer::Ft { nets } = &mut reg {
                    pretrain_paraphraser(
                        psi_fit,
                        nets,
                        config.paraphraser_steps,
                        config.paraphraser_lr,
                    )?;
                }
                Some(reg)
            }
            _ => None,
        };
        Ok(Self {
            model,
            regularizer,
            theta_opt: Adam::default(),
            aux_opt: Adam::default(),
            step: 0,
        })
    }

    /// Records L̂ and, when a regularizer is active, δ̂ on a fresh tape.
    fn record(&self, batch: &Batch) -> Result<(Tape, crate::numerics::Var, Option<crate::numerics::Var>)> {
        let mut tape = Tape::new();
        let x = tape.constant(batch.x.clone());
        let fv = self.model.record(&mut tape, x)?;
        let loss = tape.cross_entropy(fv.logits, &batch.y)?;
        let reg = match &self.regularizer {
            Some(r) => {
                let psi = tape.constant(batch.psi.clone());
                Some(r.record(&mut tape, fv.phi, psi)?)
            }
            None => None,
        };
        Ok((tape, loss, reg))
    }

    fn check_finite(&self, loss: f64, reg: f64) -> Result<()> {
        if loss.is_finite() && reg.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite {
                step: self.step,
                loss,
                reg,
            })
        }
    }

    fn aux_update(&mut self, batch: &Batch, lr_mu: f64) -> Result<()> {
        let (tape, loss, reg) = self.record(batch)?;
        let reg = reg.expect("aux update needs a regularizer");
        self.check_finite(tape.value(loss).item(), tape.value(reg).item())?;
        let grads = tape.backward(reg)?;
        if let Some(r) = &mut self.regularizer {
            self.aux_opt.step(r.params_mut(), &grads, lr_mu);
        }
        Ok(())
    }

    /// One update of θ (and, in joint mode, of the auxiliary parameters).
    pub fn train_step(&mut self, batch: &Batch, rates: &StepRates) -> Result<StepStats> {
        let active = self.regularizer.is_some() && rates.beta > 0.0;
        if active && rates.bilevel_inner_steps > 0 {
            for _ in 0..rates.bilevel_inner_steps {
                self.aux_update(batch, rates.lr_mu)?;
            }
        }

        let (mut tape, loss, reg) = self.record(batch)?;
        let loss_value = tape.value(loss).item();
        let reg_value = reg.map_or(0.0, |r| tape.value(r).item());
        self.check_finite(loss_value, reg_value)?;

        let total = match reg {
            Some(r) if active => {
                let weighted = tape.scale(r, rates.beta);
                tape.add(loss, weighted)?
            }
            _ => loss,
        };
        let theta_grads = tape.backward(total)?;
        let aux_grads = match reg {
            Some(r) if active && rates.bilevel_inner_steps == 0 => Some(tape.backward(r)?),
            _ => None,
        };

        self.theta_opt
            .step(self.model.params_mut(), &theta_grads, rates.lr_theta);
        if let (Some(grads), Some(r)) = (aux_grads, &mut self.regularizer) {
            self.aux_opt.step(r.params_mut(), &grads, rates.lr_mu);
        }
        self.step += 1;
        Ok(StepStats {
            loss: loss_value,
            reg: reg_value,
        })
    }
}

/// Mini-batch index stream: a fresh seeded shuffle each epoch, dropping a
/// trailing batch smaller than `min_batch`.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    rows: Vec<usize>,
    batch_size: usize,
    min_batch: usize,
    order: Vec<usize>,
    cursor: usize,
    rng: Rng,
}

impl BatchSampler {
    pub fn new(rows: &[usize], batch_size: usize, seed: u64) -> Result<Self> {
        Self::with_min_batch(rows, batch_size, 2, seed)
    }

    pub fn with_min_batch(
        rows: &[usize],
        batch_size: usize,
        min_batch: usize,
        seed: u64,
    ) -> Result<Self> {
        let min_batch = min_batch.max(2);
        if rows.len() < min_batch || batch_size < min_batch {
            return Err(Error::Input(format!(
                "need batches of at least {min_batch} rows, got batch_size {batch_size} over {} rows",
                rows.len()
            )));
        }
        let mut s = Self {
            rows: rows.to_vec(),
            batch_size: batch_size.min(rows.len()),
            min_batch,
            order: Vec::new(),
            cursor: 0,
            rng: Rng::derive(seed, stream::BATCHES),
        };
        s.reshuffle();
        Ok(s)
    }

    fn reshuffle(&mut self) {
        self.order = self.rows.clone();
        self.rng.shuffle(&mut self.order);
        self.cursor = 0;
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.order.len() - self.cursor < self.min_batch {
            self.reshuffle();
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let out = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        out
    }
}

/// Result of one training run: the record plus the final state.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub record: RunRecord,
    pub state: TrainState,
}

impl RunOutcome {
    /// Accuracy on `split` at the final evaluation.
    pub fn final_accuracy(&self, split: &str) -> Option<f64> {
        self.record.final_accuracy(split)
    }

    pub fn test_error(&self) -> Option<f64> {
        self.final_accuracy("test").map(|a| 1.0 - a)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ckpt = self.state.model.to_checkpoint();
        if let Some(r) = &self.state.regularizer {
            for (name, m) in r.params() {
                ckpt.insert(name, m.clone());
            }
        }
        ckpt.meta.insert("method".into(), self.record.header.method.clone());
        ckpt.meta
            .insert("beta".into(), format!("{}", self.record.header.beta));
        ckpt
    }
}

/// Trains on `fit_rows` and evaluates on each named split.
pub fn train_on(
    config: &TrainConfig,
    data: &Dataset,
    fit_rows: &[usize],
    eval_splits: &[(&str, &[usize])],
    init: Option<&Checkpoint>,
) -> Result<RunOutcome> {
    config.validate()?;
    let psi_fit = data.psi.select_rows(fit_rows);
    let mut state = TrainState::init(config, data.inputs.cols(), data.n_classes(), &psi_fit)?;
    if let Some(ckpt) = init {
        state.model.load_from(ckpt, "extractor.")?;
    }
    let mut sampler =
        BatchSampler::with_min_batch(fit_rows, config.batch_size, config.min_batch(), config.seed)?;
    let mut record = RunRecord::new(RunHeader::from_config(config));

    let evaluate = |state: &TrainState, record: &mut RunRecord, step: usize| -> Result<()> {
        for (name, rows) in eval_splits {
            if rows.is_empty() {
                continue;
            }
            let x = data.inputs.select_rows(rows);
            let acc = state.model.accuracy(&x, &data.labels.select(rows))?;
            record.evals.push(EvalRecord {
                step,
                split: name.to_string(),
                accuracy: acc,
            });
        }
        Ok(())
    };

    for t in 0..config.steps {
        let mult = config.schedule.multiplier(t, config.steps);
        let rates = StepRates {
            lr_theta: config.lr_theta * mult,
            lr_mu: config.lr_mu * mult,
            beta: config.beta(),
            bilevel_inner_steps: config.bilevel_inner_steps,
        };
        let rows = sampler.next_batch();
        let batch = Batch::gather(data, &rows);
        let stats = state.train_step(&batch, &rates)?;
        record.steps.push(StepRecord {
            step: t,
            loss: stats.loss,
            reg: stats.reg,
            lr_theta: rates.lr_theta,
            lr_mu: rates.lr_mu,
        });
        let done = t + 1;
        if config.eval_every > 0 && done % config.eval_every == 0 && done < config.steps {
            evaluate(&state, &mut record, done)?;
        }
    }
    evaluate(&state, &mut record, config.steps)?;
    Ok(RunOutcome { record, state })
}

/// Trains on the full training split (train plus holdout) and evaluates on
/// test.
pub fn run_training(config: &TrainConfig, data: &Dataset) -> Result<RunOutcome> {
    let fit = data.splits.train_full();
    train_on(config, data, &fit, &[("test", &data.splits.test)], None)
}

/// β chosen from holdout accuracies: the best accuracy wins, ties go to the
/// smaller β. `scores` are `(beta, accuracy)` pairs.
pub fn pick_beta(scores: &[(f64, f64)]) -> Option<f64> {
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut best: Option<(f64, f64)> = None;
    for (beta, acc) in sorted {
        if best.map_or(true, |(_, a)| acc > a) {
            best = Some((beta, acc));
        }
    }
    best.map(|(b, _)| b)
}

#[derive(Debug, Clone)]
pub struct BetaSelection {
    pub beta: f64,
    /// `(beta, holdout accuracy)` per grid point, ascending β.
    pub holdout: Vec<(f64, f64)>,
    pub outcome: RunOutcome,
}

/// Trains once per grid point on the train split, scores each on the
/// holdout split, then retrains on train plus holdout at the winning β.
pub fn select_beta(config: &TrainConfig, data: &Dataset, grid: &[f64]) -> Result<BetaSelection> {
    select_beta_with_init(config, data, grid, None)
}

pub fn select_beta_with_init(
    config: &TrainConfig,
    data: &Dataset,
    grid: &[f64],
    init: Option<&Checkpoint>,
) -> Result<BetaSelection> {
    if grid.is_empty() {
        return Err(Error::Usage("beta grid is empty".into()));
    }
    if config.regularizer.is_none() {
        return Err(Error::Usage("beta selection needs a regularizer".into()));
    }
    let mut grid = grid.to_vec();
    grid.sort_by(f64::total_cmp);
    grid.dedup();

    let mut holdout = Vec::with_capacity(grid.len());
    if grid.len() > 1 {
        if data.splits.holdout.is_empty() {
            return Err(Error::Usage("beta selection needs a holdout split".into()));
        }
        for &beta in &grid {
            let run = train_on(
                &config.with_beta(beta),
                data,
                &data.splits.train,
                &[("holdout", &data.splits.holdout)],
                init,
            )?;
            holdout.push((beta, run.final_accuracy("holdout").unwrap_or(0.0)));
        }
    }
    let beta = if grid.len() == 1 {
        grid[0]
    } else {
        pick_beta(&holdout).expect("non-empty grid")
    };

    let fit = data.splits.train_full();
    let mut outcome = train_on(
        &config.with_beta(beta),
        data,
        &fit,
        &[("test", &data.splits.test)],
        init,
    )?;
    outcome.record.header.beta_grid = Some(grid);
    outcome.record.header.holdout_scores = holdout.clone();
    Ok(BetaSelection {
        beta,
        holdout,
        outcome,
    })
}

/// Default β grid per regularizer kind.
pub fn default_beta_grid(kind: RegularizerKind) -> Vec<f64> {
    match kind {
        RegularizerKind::Aft | RegularizerKind::L2 => vec![3.0, 10.0, 30.0],
        RegularizerKind::Kd | RegularizerKind::Rkd | RegularizerKind::Ft => {
            vec![0.1, 1.0, 10.0, 100.0]
        }
    }
}
