//! Loss, optimizer, schedules and the epoch loop, plus the evaluation
//! suites run on trained models.

mod optim;
mod reports;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{record_forward, softmax_cross_entropy, ParamGrads, TapeOptions};
use crate::error::{Error, Result};
use crate::event_io::LabeledGrid;
use crate::spiking::{Architecture, Network, NetworkOptions};

pub use optim::{
    clip_grad_norm, project_flat, project_params, radam_step, schedule_lr, OptimizerState,
    RADAM_BETA1, RADAM_BETA2, RADAM_EPSILON,
};
pub use reports::{
    anytime_eval, history_csv, sparsity_audit, stride_vs_pool_study, AnytimePoint, LayerSparsity,
    SparsityAudit, StudyReport, StudyRow, StudyRun,
};

/// Learning-rate schedule, keyed on the epoch index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    /// `lr0 · factor^⌊epoch/every⌋`.
    Step { factor: f64, every: usize },
    /// `lr0/2 · (1 + cos(π · (epoch mod period)/period))`.
    CosineWarmRestarts { period: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub architecture: String,
    /// Timesteps per training sample.
    pub timesteps: usize,
    /// Bin width `Δt` in microseconds.
    pub bin_width_us: u64,
    pub lr0: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub schedule: Schedule,
    pub grad_clip_norm: f64,
    pub alpha: f64,
    pub beta_init: f64,
    pub threshold_init: f64,
    pub seed: u64,
    pub max_epochs: usize,
    pub dropout: f64,
    pub readout_bias: bool,
    pub detach_norm: bool,
    /// Truncated BPTT window; `None` backpropagates through every timestep.
    pub truncation: Option<usize>,
}

impl Default for TrainConfig {
    /// The recipe for `4sc5-8sc5-8sc3-16sc3-11` on DVS128 Gesture.
    fn default() -> Self {
        TrainConfig {
            architecture: "4sc5-8sc5-8sc3-16sc3-11".into(),
            timesteps: 150,
            bin_width_us: 10_000,
            lr0: 1e-2,
            weight_decay: 1e-5,
            batch_size: 48,
            schedule: Schedule::CosineWarmRestarts { period: 30 },
            grad_clip_norm: 5.0,
            alpha: 3.0,
            beta_init: 0.7,
            threshold_init: 0.3,
            seed: 0,
            max_epochs: 31,
            dropout: 0.5,
            readout_bias: true,
            detach_norm: false,
            truncation: None,
        }
    }
}

impl TrainConfig {
    /// Desk-scale recipe for `2sc5-4sc3-4` on the 64×64 synthetic
    /// moving-edge data with `T = 20`.
    pub fn synthetic() -> Self {
        TrainConfig {
            architecture: "2sc5-4sc3-4".into(),
            timesteps: 20,
            batch_size: 8,
            max_epochs: 20,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<Architecture> {
        let arch: Architecture = self.architecture.parse()?;
        let mut bad = Vec::new();
        if self.timesteps == 0 {
            bad.push("timesteps");
        }
        if self.bin_width_us == 0 {
            bad.push("bin_width_us");
        }
        if !(self.lr0 >= 0.0) {
            bad.push("lr0");
        }
        if !(self.weight_decay >= 0.0) {
            bad.push("weight_decay");
        }
        if self.batch_size == 0 {
            bad.push("batch_size");
        }
        match self.schedule {
            Schedule::Step { factor, every } if !(factor > 0.0) || every == 0 => {
                bad.push("schedule")
            }
            Schedule::CosineWarmRestarts { period: 0 } => bad.push("schedule"),
            _ => {}
        }
        if !(self.grad_clip_norm > 0.0) {
            bad.push("grad_clip_norm");
        }
        if !(self.alpha >= 0.0) {
            bad.push("alpha");
        }
        if !(0.0..=1.0).contains(&self.beta_init) {
            bad.push("beta_init");
        }
        if !(self.threshold_init >= 0.0) {
            bad.push("threshold_init");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            bad.push("dropout");
        }
        if self.truncation == Some(0) {
            bad.push("truncation");
        }
        if !bad.is_empty() {
            return Err(Error::Config(format!("invalid values for {}", bad.join(", "))));
        }
        Ok(arch)
    }

    pub fn network_options(&self) -> NetworkOptions {
        NetworkOptions {
            beta_init: self.beta_init,
            threshold_init: self.threshold_init,
            alpha: self.alpha,
            dropout: self.dropout,
            readout_bias: self.readout_bias,
        }
    }

    fn tape_options(&self) -> TapeOptions {
        TapeOptions {
            detach_norm: self.detach_norm,
            truncation: self.truncation,
        }
    }
}

/// Builds the configured network for `height × width` single-channel grids.
pub fn init_model(config: &TrainConfig, height: usize, width: usize) -> Result<Network> {
    let arch = config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    Network::new(&arch, 1, height, width, config.network_options(), &mut rng)
}

/// Softmax cross-entropy of the mean over timesteps of `per_timestep_logits`.
pub fn loss_mean_logits(per_timestep_logits: &[Vec<f64>], label: usize) -> Result<f64> {
    if per_timestep_logits.is_empty() {
        return Err(Error::Usage("no timesteps to average".into()));
    }
    let mean = crate::spiking::mean_rows(per_timestep_logits);
    Ok(softmax_cross_entropy(&mean, label)?.0)
}

/// One row of the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub epoch_seconds: f64,
    /// Mean spikes per training sample, all layers, during the epoch.
    pub train_spikes: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best test accuracy.
    pub model: Network,
    /// Parameters after the last epoch.
    pub final_model: Network,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_test_acc: f64,
}

/// Trains from a fresh [`init_model`].
pub fn train(config: &TrainConfig, train: &[LabeledGrid], test: &[LabeledGrid]) -> Result<TrainOutcome> {
    train_with_progress(config, train, test, |_| {})
}

/// [`train`], calling `progress` after every epoch.
pub fn train_with_progress<F: FnMut(&EpochRecord)>(
    config: &TrainConfig,
    train: &[LabeledGrid],
    test: &[LabeledGrid],
    mut progress: F,
) -> Result<TrainOutcome> {
    let first = train
        .first()
        .ok_or_else(|| Error::Usage("training set is empty".into()))?;
    let mut model = init_model(config, first.grid.height(), first.grid.width())?;
    let layout = model.param_layout();
    let mut params = model.params();
    let mut opt = OptimizerState::new(params.len());
    let tape_options = config.tape_options();

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(config.max_epochs);
    let mut best: Option<(usize, f64, Network)> = None;

    for epoch in 0..config.max_epochs {
        let started = Instant::now();
        let lr = schedule_lr(config, epoch);
        let mut shuffle = ChaCha8Rng::seed_from_u64(config.seed);
        shuffle.set_stream(epoch as u64);
        order.shuffle(&mut shuffle);

        let (mut loss_sum, mut correct, mut spikes) = (0.0, 0usize, 0usize);
        for batch in order.chunks(config.batch_size) {
            let results: Vec<SampleResult> = batch
                .par_iter()
                .map(|&i| {
                    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ DROPOUT_SEED_MIX);
                    rng.set_stream(((epoch as u64) << 32) | i as u64);
                    sample_gradient(&model, &train[i], config.timesteps, &mut rng, tape_options)
                })
                .collect::<Result<_>>()?;
            let mut grads = ParamGrads::zeros(layout.clone());
            let scale = 1.0 / batch.len() as f64;
            for r in &results {
                grads.add_scaled(&r.grads, scale);
                loss_sum += r.loss;
                correct += r.correct as usize;
                spikes += r.spikes;
            }
            clip_grad_norm(grads.values_mut(), config.grad_clip_norm);
            radam_step(&mut params, grads.values(), &mut opt, lr, config.weight_decay);
            project_flat(&mut params, &layout);
            model.set_params(&params)?;
        }

        let test_acc = if test.is_empty() {
            0.0
        } else {
            evaluate(&model, test, config.timesteps)?
        };
        let n = train.len() as f64;
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / n,
            train_acc: correct as f64 / n,
            test_acc,
            epoch_seconds: started.elapsed().as_secs_f64(),
            train_spikes: spikes as f64 / n,
        };
        progress(&record);
        if best.as_ref().is_none_or(|(_, acc, _)| test_acc > *acc) {
            best = Some((epoch, test_acc, model.clone()));
        }
        history.push(record);
    }

    let (best_epoch, best_test_acc, best_model) = best.unwrap_or((0, 0.0, model.clone()));
    Ok(TrainOutcome {
        model: best_model,
        final_model: model,
        history,
        best_epoch,
        best_test_acc,
    })
}

const DROPOUT_SEED_MIX: u64 = 0x9e37_79b9_7f4a_7c15;

struct SampleResult {
    grads: ParamGrads,
    loss: f64,
    correct: bool,
    spikes: usize,
}

fn sample_gradient(
    model: &Network,
    sample: &LabeledGrid,
    timesteps: usize,
    rng: &mut ChaCha8Rng,
    options: TapeOptions,
) -> Result<SampleResult> {
    let mut tape = record_forward(model, &sample.grid, timesteps, sample.label, Some(rng), options)?;
    let correct = argmax(tape.mean_logits()) == sample.label;
    let spikes = tape.spike_counts().iter().sum();
    let loss = tape.loss();
    let grads = tape.backward()?;
    Ok(SampleResult {
        grads,
        loss,
        correct,
        spikes,
    })
}

/// Index of the largest value, first on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Predicted class of every sample, each run from zeroed states.
pub fn predict(model: &Network, data: &[LabeledGrid], t_eval: usize) -> Result<Vec<usize>> {
    data.par_iter()
        .map(|s| {
            let mut states = model.fresh_states();
            let out = model.forward_with(&mut states, &s.grid, 0..t_eval)?;
            Ok(argmax(&out.mean_logits))
        })
        .collect()
}

/// Fraction of samples whose mean-logit argmax equals the label.
pub fn evaluate(model: &Network, data: &[LabeledGrid], t_eval: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Usage("evaluation set is empty".into()));
    }
    let predictions = predict(model, data, t_eval)?;
    let correct = predictions
        .iter()
        .zip(data)
        .filter(|(p, s)| **p == s.label)
        .count();
    Ok(correct as f64 / data.len() as f64)
}
