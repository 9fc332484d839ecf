//! Multi-task objective, Adam and the training loop.

mod adam;
mod loss;

use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::eval::{classify_metrics, MetricReport};
use crate::labeling::{Task, TaskSet};
use crate::model::{EncodedInstance, Model};
use crate::numerics::{grad_check, GradCheckConfig, GradCheckReport, Gradients, Tape};
use crate::{Error, Result};

pub use adam::{Adam, AdamConfig};
pub use loss::{
    aux_lambda, combine_losses, loss_aux, loss_main, loss_ta, loss_total, main_lambda, read_losses,
    record_losses, AuxWeightMode, LossVars, LossWeights, TaskLosses,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a validation-F1 improvement before stopping.
    pub patience: usize,
    pub l2: f64,
    pub seed: u64,
    pub tasks: TaskSet,
    /// Auxiliary labels flipped in the training data.
    pub invert: TaskSet,
    pub alpha_sp: f64,
    pub alpha_rt: f64,
    pub alpha_ta: f64,
    pub aux_weight_mode: AuxWeightMode,
    /// Upper bound on every derived class weight.
    pub weight_cap: f64,
    /// Overrides the derived `#neg / #pos`.
    pub lambda_main: Option<f64>,
    pub mu_main: f64,
    pub threshold: f64,
    /// Also score the training set after every epoch.
    pub eval_train: bool,
    /// Stop as soon as validation F1 reaches this value.
    pub target_f1: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch_size: 32,
            max_epochs: 30,
            patience: 5,
            l2: 1e-5,
            seed: 0,
            tasks: TaskSet::ALL,
            invert: TaskSet::NONE,
            alpha_sp: 0.2,
            alpha_rt: 0.2,
            alpha_ta: 0.2,
            aux_weight_mode: AuxWeightMode::Paper,
            weight_cap: 100.0,
            lambda_main: None,
            mu_main: 1.0,
            threshold: 0.5,
            eval_train: false,
            target_f1: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return bad("batch_size, max_epochs and patience must be positive".into());
        }
        if self.l2 < 0.0 || self.weight_cap <= 0.0 {
            return bad("l2 must be >= 0 and weight_cap > 0".into());
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            l2: self.l2,
            ..AdamConfig::default()
        }
    }

    /// Class weights from the (already inverted) training labels.
    pub fn loss_weights(&self, train: &[EncodedInstance]) -> Result<LossWeights> {
        let cap = self.weight_cap;
        let w = LossWeights {
            lambda_main: self
                .lambda_main
                .unwrap_or_else(|| main_lambda(train.iter().map(|i| i.y_main), cap)),
            mu_main: self.mu_main,
            lambda_sp: aux_lambda(train.iter().map(|i| i.y_sp), self.aux_weight_mode, cap),
            lambda_rt: aux_lambda(train.iter().map(|i| i.y_rt), self.aux_weight_mode, cap),
            alpha_sp: self.alpha_sp,
            alpha_rt: self.alpha_rt,
            alpha_ta: self.alpha_ta,
        };
        w.validate()?;
        Ok(w)
    }
}

/// Flips the selected auxiliary labels of encoded instances.
pub fn invert_encoded(inst: &mut EncodedInstance, tasks: TaskSet) {
    if tasks.contains(Task::Sp) {
        inst.y_sp = !inst.y_sp;
    }
    if tasks.contains(Task::Rt) {
        inst.y_rt = !inst.y_rt;
    }
    if tasks.contains(Task::Ta) {
        inst.y_ta.iter_mut().for_each(|y| *y = !*y);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean per-instance loss of every enabled task.
    pub train_loss: TaskLosses,
    pub train_total: f64,
    pub train_f1: Option<f64>,
    pub valid: MetricReport,
    pub wall_seconds: f64,
}

impl EpochLog {
    /// The log with timing zeroed, for run-to-run comparison.
    pub fn without_timing(&self) -> EpochLog {
        EpochLog {
            wall_seconds: 0.0,
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainOutcome {
    pub logs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_valid_f1: f64,
    /// Optimizer steps taken when the best epoch finished.
    pub best_step: u64,
    pub total_steps: u64,
    pub weights: LossWeights,
    pub stopped_early: bool,
}

fn mix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Dropout stream for one instance at one optimizer step.
pub fn dropout_rng(seed: u64, step: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed ^ mix(step ^ mix(index as u64))))
}

/// Gradient of the weighted objective for one instance, plus the enabled
/// task losses.
pub fn instance_gradients(
    model: &Model,
    inst: &EncodedInstance,
    weights: &LossWeights,
    enabled: TaskSet,
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<(Gradients, TaskLosses)> {
    let mut tape = Tape::new(&model.store);
    let vars = model.forward(&mut tape, inst, dropout)?;
    let losses = record_losses(&mut tape, &vars, inst, weights)?;
    let total = combine_losses(&mut tape, &losses, weights, weights.active(enabled))?;
    let mut grads = Gradients::for_store(&model.store);
    tape.backward(total, &mut grads)?;
    Ok((grads, read_losses(&tape, &losses, enabled)))
}

/// Finite-difference check of the full weighted objective on one instance
/// (eval mode, no dropout).
pub fn check_model_gradients(
    model: &Model,
    inst: &EncodedInstance,
    weights: &LossWeights,
    enabled: TaskSet,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let (analytic, _) = instance_gradients(model, inst, weights, enabled, None)?;
    let active = weights.active(enabled);
    let mut store = model.store.clone();
    grad_check(
        &mut store,
        &analytic,
        |s| {
            let mut tape = Tape::new(s);
            let vars = model.forward(&mut tape, inst, None)?;
            let losses = record_losses(&mut tape, &vars, inst, weights)?;
            let total = combine_losses(&mut tape, &losses, weights, active)?;
            Ok(tape.scalar(total))
        },
        cfg,
    )
}

/// Batches of indices with similar turn counts, in a seeded order.
pub fn bucketed_batches(
    data: &[EncodedInstance],
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed ^ mix(epoch as u64 + 1)));
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    order.sort_by_key(|&i| data[i].num_turns());
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    batches.shuffle(&mut rng);
    batches
}

/// One optimizer step over `batch`. Per-instance gradients are computed in
/// parallel and reduced in index order, so the result does not depend on
/// the thread count.
#[allow(clippy::too_many_arguments)]
fn train_step(
    model: &mut Model,
    adam: &mut Adam,
    data: &[EncodedInstance],
    batch: &[usize],
    weights: &LossWeights,
    enabled: TaskSet,
    seed: u64,
    epoch: usize,
) -> Result<TaskLosses> {
    let step = adam.steps();
    let scale = 1.0 / batch.len() as f64;
    let width = rayon::current_num_threads().max(1);
    let mut sum = TaskLosses::default();
    for chunk in batch.chunks(width) {
        let results: Vec<Result<(Gradients, TaskLosses)>> = chunk
            .par_iter()
            .map(|&i| {
                let mut rng = dropout_rng(seed, step, i);
                instance_gradients(model, &data[i], weights, enabled, Some(&mut rng))
            })
            .collect();
        for (r, &i) in results.into_iter().zip(chunk) {
            let (g, l) = r?;
            let total = loss_total(&l, weights);
            if !total.is_finite() || !g.all_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step,
                    detail: format!(
                        "non-finite loss or gradient on {}@{} (loss {total})",
                        data[i].conv_id, data[i].position
                    ),
                });
            }
            model.store.accumulate(&g, scale);
            sum.add(&l);
        }
    }
    adam.step(&mut model.store);
    model.store.zero_grads();
    Ok(sum)
}

/// Main-task metrics of `model` on `data`.
pub fn evaluate(model: &Model, data: &[EncodedInstance], threshold: f64) -> Result<MetricReport> {
    let scores = model.predict_main(data)?;
    let labels: Vec<bool> = data.iter().map(|i| i.y_main).collect();
    classify_metrics(&scores, &labels, threshold)
}

/// Trains `model` in place and leaves it at the best-validation-F1 epoch.
/// `on_epoch` sees every log line as soon as the epoch finishes.
pub fn train(
    model: &mut Model,
    train_data: &[EncodedInstance],
    valid_data: &[EncodedInstance],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_data.is_empty() || valid_data.is_empty() {
        return Err(Error::InvalidInput(format!(
            "training needs non-empty splits (train {}, valid {})",
            train_data.len(),
            valid_data.len()
        )));
    }
    let mut data = train_data.to_vec();
    if !cfg.invert.is_empty() {
        data.iter_mut().for_each(|i| invert_encoded(i, cfg.invert));
    }
    let weights = cfg.loss_weights(&data)?;
    info!("loss weights {weights:?}, tasks [{}]", cfg.tasks);

    let mut adam = Adam::new(&model.store, cfg.adam());
    let mut logs = Vec::new();
    let mut best: Option<(f64, usize, u64, crate::numerics::ParamStore)> = None;
    let mut since_best = 0;
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        let mut sum = TaskLosses::default();
        for batch in bucketed_batches(&data, cfg.batch_size, cfg.seed, epoch) {
            let l = train_step(
                model, &mut adam, &data, &batch, &weights, cfg.tasks, cfg.seed, epoch,
            )?;
            sum.add(&l);
        }
        let train_loss = sum.scaled(1.0 / data.len() as f64);
        let valid = evaluate(model, valid_data, cfg.threshold)?;
        let train_f1 = if cfg.eval_train {
            Some(evaluate(model, &data, cfg.threshold)?.f1)
        } else {
            None
        };
        let log = EpochLog {
            epoch,
            train_total: loss_total(&train_loss, &weights),
            train_loss,
            train_f1,
            valid,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        info!(
            "epoch {epoch}: loss {:.4}, valid f1 {:.4}",
            log.train_total, log.valid.f1
        );
        on_epoch(&log)?;
        let f1 = log.valid.f1;
        logs.push(log);

        if best.as_ref().is_none_or(|b| f1 > b.0) {
            best = Some((f1, epoch, adam.steps(), model.store.clone()));
            since_best = 0;
        } else {
            since_best += 1;
        }
        if cfg.target_f1.is_some_and(|t| f1 >= t) {
            stopped_early = epoch < cfg.max_epochs;
            break;
        }
        if since_best >= cfg.patience {
            stopped_early = epoch < cfg.max_epochs;
            info!("no validation improvement for {since_best} epochs; stopping");
            break;
        }
    }

    let (best_valid_f1, best_epoch, best_step, store) = best.expect("at least one epoch ran");
    model.store = store;
    Ok(TrainOutcome {
        logs,
        best_epoch,
        best_valid_f1,
        best_step,
        total_steps: adam.steps(),
        weights,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{extract_instances, Vocabulary};
    use crate::model::{encode_instances, ModelConfig};
    use crate::synth::{generate_corpus, SynthConfig};

    fn setup(n: usize) -> (Model, Vec<EncodedInstance>) {
        let convs = generate_corpus(&SynthConfig::benchmark(n, 1)).unwrap();
        let vocab = Vocabulary::build(&convs, 1).unwrap();
        let insts = extract_instances(&convs, 2).unwrap();
        let cfg = ModelConfig {
            embed_dim: 6,
            hidden_dim: 5,
            ..ModelConfig::new(vocab.len())
        };
        (
            Model::new(cfg, 3).unwrap(),
            encode_instances(&insts, &vocab),
        )
    }

    #[test]
    fn batches_cover_every_instance_once() {
        let (_, data) = setup(30);
        let batches = bucketed_batches(&data, 8, 0, 1);
        let mut all: Vec<usize> = batches.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..data.len()).collect::<Vec<_>>());
        assert_eq!(batches, bucketed_batches(&data, 8, 0, 1));
    }

    #[test]
    fn patience_stops_training() {
        let (mut model, data) = setup(20);
        let cfg = TrainConfig {
            lr: 1e-12,
            max_epochs: 20,
            patience: 3,
            ..Default::default()
        };
        let out = train(&mut model, &data, &data, &cfg, |_| Ok(())).unwrap();
        assert!(out.stopped_early);
        assert_eq!(out.logs.len(), out.best_epoch + 3);
    }

    #[test]
    fn same_seed_same_curves() {
        let (model, data) = setup(20);
        let cfg = TrainConfig {
            lr: 1e-2,
            max_epochs: 3,
            batch_size: 8,
            ..Default::default()
        };
        let run = || {
            let mut m = model.clone();
            let out = train(&mut m, &data, &data, &cfg, |_| Ok(())).unwrap();
            let logs: Vec<EpochLog> = out.logs.iter().map(EpochLog::without_timing).collect();
            (logs, m)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn empty_split_and_bad_config_fail() {
        let (mut model, data) = setup(5);
        assert!(train(&mut model, &data, &[], &TrainConfig::default(), |_| Ok(())).is_err());
        let bad = TrainConfig {
            batch_size: 0,
            ..Default::default()
        };
        assert!(matches!(
            train(&mut model, &data, &data, &bad, |_| Ok(())),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn inversion_flips_aux_weights() {
        let (_, data) = setup(30);
        let cfg = TrainConfig::default();
        let w = cfg.loss_weights(&data).unwrap();
        let mut flipped = data.clone();
        flipped
            .iter_mut()
            .for_each(|i| invert_encoded(i, TaskSet::only(Task::Sp)));
        let wf = cfg.loss_weights(&flipped).unwrap();
        assert!((w.lambda_sp * wf.lambda_sp - 1.0).abs() < 1e-12);
        assert_eq!(w.lambda_rt, wf.lambda_rt);
        assert_eq!(w.lambda_main, wf.lambda_main);
    }
}
