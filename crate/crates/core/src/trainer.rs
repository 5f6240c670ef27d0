//! Minibatch Adam training of a [`CtrModel`].

use crate::attention::{CtrModel, LossBreakdown, SequenceBatch};
use crate::collective::{Mode, Side};
use crate::error::{Error, Result};
use crate::numkit::{adam_step, derive_seed, AdamState, Rng};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Users per minibatch.
    pub batch_users: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_users: 16,
            learning_rate: 0.01,
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.batch_users == 0 {
            problems.push("batch_users must be >= 1".to_string());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            problems.push(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::usage(problems.join("; ")))
        }
    }
}

/// Loss components averaged over an epoch's minibatches.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub bce: f64,
    pub peak: f64,
    pub balance: f64,
    pub aux: f64,
    pub total: f64,
}

pub const EPOCH_CSV_HEADER: &str = "epoch,bce,peak,balance,aux,total";

impl EpochLog {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{:.9},{:.9},{:.9},{:.9},{:.9}",
            self.epoch, self.bce, self.peak, self.balance, self.aux, self.total
        )
    }
}

/// Owns the optimizer state for one model.
pub struct Trainer {
    config: TrainConfig,
    states: Vec<AdamState>,
    epochs_done: usize,
}

impl Trainer {
    pub fn new(model: &CtrModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let states = model
            .params
            .tensors()
            .iter()
            .map(|(_, t)| AdamState::for_param(t, config.learning_rate))
            .collect();
        Ok(Self {
            config,
            states,
            epochs_done: 0,
        })
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    /// One pass over `data` in a seed-determined order.
    pub fn epoch(&mut self, model: &mut CtrModel, data: &[SequenceBatch]) -> Result<EpochLog> {
        if data.is_empty() {
            return Err(Error::usage("training needs at least one user"));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        Rng::new(derive_seed(self.config.seed, self.epochs_done as u64)).shuffle(&mut order);

        let mut sum = LossBreakdown::default();
        let mut steps = 0usize;
        for chunk in order.chunks(self.config.batch_users) {
            let batch: Vec<SequenceBatch> = chunk.iter().map(|&i| data[i].clone()).collect();
            let (loss, grads) = model.loss_and_grad(&batch)?;
            if !loss.total.is_finite() {
                return Err(Error::Numeric(format!(
                    "training loss became {} in epoch {}",
                    loss.total,
                    self.epochs_done + 1
                )));
            }
            for ((param, (_, grad)), state) in model
                .params
                .tensors_mut()
                .into_iter()
                .zip(grads.tensors())
                .zip(&mut self.states)
            {
                adam_step(param, grad, state)?;
            }
            if !model.params.is_finite() {
                return Err(Error::Numeric(format!(
                    "parameters became non-finite in epoch {}",
                    self.epochs_done + 1
                )));
            }
            sum.bce += loss.bce;
            sum.peak += loss.peak;
            sum.balance += loss.balance;
            sum.aux += loss.aux;
            sum.total += loss.total;
            steps += 1;
        }
        self.epochs_done += 1;
        let k = steps as f64;
        Ok(EpochLog {
            epoch: self.epochs_done,
            bce: sum.bce / k,
            peak: sum.peak / k,
            balance: sum.balance / k,
            aux: sum.aux / k,
            total: sum.total / k,
        })
    }
}

/// Runs `config.epochs` epochs, handing each log to `on_epoch`.
pub fn train(
    model: &mut CtrModel,
    data: &[SequenceBatch],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    let mut trainer = Trainer::new(model, config.clone())?;
    let mut logs = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        let log = trainer.epoch(model, data)?;
        on_epoch(&log);
        logs.push(log);
    }
    Ok(logs)
}

/// Mean training-mode gate `σ(M[i, I_i])` over every routed item of every
/// shared side. `None` when nothing is routed.
pub fn mean_selected_gate(model: &CtrModel, data: &[SequenceBatch]) -> Result<Option<f64>> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for b in data {
        let kv = model.history_kv(&b.history, Mode::Training)?;
        for side in [Side::Keys, Side::Values] {
            if let Some(map) = kv.trace.routing(side) {
                let gates = map.gates();
                sum += gates.iter().sum::<f64>();
                count += gates.len();
            }
        }
    }
    Ok((count > 0).then(|| sum / count as f64))
}
