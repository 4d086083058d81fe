//! Joint multi-exit training, fixed-cycle training and the epoch loop.

use std::path::Path;
use std::time::Instant;

use indexmap::IndexMap;
use pcn_tensor::{AdamW, AdamWConfig, Scalar, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::artifact::{csv_writer, Provenance};
use crate::data::{batches, Dataset};
use crate::error::{Error, Result};
use crate::exits::{predict_all_exits, HEAD_DROPOUT};
use crate::model::{PcModel, Phase};

pub const MAX_SHIFT: i64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Joint,
    /// Train only exit `i` after exactly `i` cycles.
    FixedCycle(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    /// Per-exit loss weights; empty means `1/T` each.
    pub lambdas: Vec<f64>,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub dropout: f64,
    pub translate: bool,
    pub hflip: bool,
    pub seed: u64,
    /// Stop once the last trained exit reaches this accuracy on the
    /// (unaugmented) training set in evaluation mode.
    pub target_train_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Joint,
            lambdas: Vec::new(),
            learning_rate: 1e-3,
            weight_decay: 0.01,
            batch_size: 64,
            epochs: 500,
            dropout: HEAD_DROPOUT,
            translate: true,
            hflip: true,
            seed: 0,
            target_train_accuracy: None,
        }
    }
}

impl TrainConfig {
    pub fn fixed_cycle(i: usize) -> Self {
        Self { mode: TrainMode::FixedCycle(i), epochs: 200, ..Self::default() }
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig { learning_rate: self.learning_rate, weight_decay: self.weight_decay, ..AdamWConfig::default() }
    }

    pub fn validate(&self, max_cycles: usize) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("learning rate must be positive and weight decay non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if let TrainMode::FixedCycle(i) = self.mode {
            if i == 0 || i > max_cycles {
                return Err(Error::Config(format!("fixed cycle {i} outside 1..={max_cycles}")));
            }
        }
        if let Some(a) = self.target_train_accuracy {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::Config(format!("target accuracy {a} outside [0, 1]")));
            }
        }
        self.lambdas(max_cycles).map(|_| ())
    }

    /// Effective loss weights for `max_cycles` exits.
    pub fn lambdas(&self, max_cycles: usize) -> Result<Vec<f64>> {
        let l = if self.lambdas.is_empty() {
            vec![1.0 / max_cycles as f64; max_cycles]
        } else {
            self.lambdas.clone()
        };
        if l.len() != max_cycles {
            return Err(Error::Config(format!("{} loss weights for {max_cycles} exits", l.len())));
        }
        check_lambdas(&l)?;
        Ok(l)
    }

    /// Exits that receive a loss, 1-based.
    pub fn trained_exits(&self, max_cycles: usize) -> Vec<usize> {
        match self.mode {
            TrainMode::Joint => (1..=max_cycles).collect(),
            TrainMode::FixedCycle(i) => vec![i],
        }
    }
}

fn check_lambdas(lambdas: &[f64]) -> Result<()> {
    if let Some(l) = lambdas.iter().find(|l| !(**l >= 0.0) || !l.is_finite()) {
        return Err(Error::Config(format!("loss weight {l} must be finite and non-negative")));
    }
    if lambdas.iter().sum::<f64>() <= 0.0 {
        return Err(Error::Config("loss weights sum to zero".into()));
    }
    Ok(())
}

/// `sum_i lambda_i * loss_i`.
pub fn joint_loss(losses: &[f64], lambdas: &[f64]) -> Result<f64> {
    if losses.len() != lambdas.len() {
        return Err(Error::Config(format!("{} losses for {} weights", losses.len(), lambdas.len())));
    }
    check_lambdas(lambdas)?;
    Ok(losses.iter().zip(lambdas).map(|(l, w)| l * w).sum())
}

/// Flips (optional) then shifts one `C x S x S` image by `(dx, dy)` pixels;
/// vacated pixels become zero. Pixel `(r, c)` lands on `(r + dy, c + dx)`.
pub fn augment_with(image: &[f32], channels: usize, size: usize, flip: bool, dx: i64, dy: i64) -> Vec<f32> {
    let plane = size * size;
    let s = size as i64;
    let mut out = vec![0.0; image.len()];
    for c in 0..channels {
        for r in 0..s {
            let src_r = r - dy;
            if !(0..s).contains(&src_r) {
                continue;
            }
            for col in 0..s {
                let mut src_c = col - dx;
                if !(0..s).contains(&src_c) {
                    continue;
                }
                if flip {
                    src_c = s - 1 - src_c;
                }
                out[c * plane + (r * s + col) as usize] = image[c * plane + (src_r * s + src_c) as usize];
            }
        }
    }
    out
}

/// Random horizontal flip (p = 0.5) and shift of up to four pixels per axis.
pub fn augment<R: Rng + ?Sized>(
    image: &[f32],
    channels: usize,
    size: usize,
    hflip: bool,
    translate: bool,
    rng: &mut R,
) -> Vec<f32> {
    let flip = hflip && rng.random_bool(0.5);
    let (dx, dy) = if translate {
        (rng.random_range(-MAX_SHIFT..=MAX_SHIFT), rng.random_range(-MAX_SHIFT..=MAX_SHIFT))
    } else {
        (0, 0)
    };
    augment_with(image, channels, size, flip, dx, dy)
}

/// Result of one optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    /// Cross-entropy of each exit, `None` for exits not evaluated.
    pub losses: Vec<Option<f64>>,
    pub total: f64,
    /// Correct predictions of each evaluated exit in this batch.
    pub correct: Vec<usize>,
}

/// Loss graph of one batch: per-exit cross-entropies and their weighted sum.
pub struct Objective {
    pub losses: Vec<Option<Var>>,
    pub logits: Vec<Option<Var>>,
    pub total: Var,
}

/// Builds the training objective in `session`: init pass, `cycles` cycles,
/// head `t` on cycle `t` for each `t` with a weight in `lambdas` (1-based,
/// `lambdas[t-1]`). Returns the objective and the init-pass statistics.
pub fn build_objective<T: Scalar>(
    session: &mut crate::model::Session<'_, T>,
    images: Tensor<T>,
    labels: &[usize],
    cycles: usize,
    lambdas: &[Option<f64>],
    dropout: Option<(f64, &mut dyn rand::RngCore)>,
) -> Result<(Objective, Vec<pcn_tensor::BatchStats<T>>)> {
    let x = session.input(images);
    let (mut state, stats) = session.init_pass(x, Phase::Train)?;
    let mut losses = vec![None; lambdas.len()];
    let mut logits_out = vec![None; lambdas.len()];
    let mut total: Option<Var> = None;
    let mut dropout = dropout;
    for t in 1..=cycles {
        session.run_cycle(&mut state)?;
        let Some(Some(w)) = lambdas.get(t - 1) else { continue };
        let f = session.exit_features(&state)?;
        let d = dropout.as_mut().map(|(p, rng)| (*p, &mut **rng as &mut dyn rand::RngCore));
        let logits = session.classify(f, t, d)?;
        let g = session.graph_mut();
        let ce = g.softmax_cross_entropy(logits, labels)?;
        let weighted = g.scale_const(ce, T::cast(*w))?;
        total = Some(match total {
            Some(acc) => g.add(acc, weighted)?,
            None => weighted,
        });
        losses[t - 1] = Some(ce);
        logits_out[t - 1] = Some(logits);
    }
    let total = total.ok_or_else(|| Error::Usage("objective has no exits".into()))?;
    Ok((Objective { losses, logits: logits_out, total }, stats))
}

fn argmax_rows<T: Scalar>(t: &Tensor<T>) -> Vec<usize> {
    let k = t.shape()[1];
    t.data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Model plus optimizer state and the training random stream.
pub struct Trainer<T: Scalar = f32> {
    pub model: PcModel<T>,
    pub config: TrainConfig,
    optimizer: AdamW<T>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: PcModel<T>, config: TrainConfig) -> Result<Self> {
        config.validate(model.config.max_cycles)?;
        let optimizer = AdamW::new(config.optimizer());
        let rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_da7a);
        Ok(Self { model, config, optimizer, rng })
    }

    pub fn optimizer(&self) -> &AdamW<T> {
        &self.optimizer
    }

    /// One step of the configured mode.
    pub fn train_step(&mut self, images: Tensor<T>, labels: &[usize]) -> Result<StepOutput> {
        match self.config.mode {
            TrainMode::Joint => self.train_step_joint(images, labels),
            TrainMode::FixedCycle(i) => self.train_step_fixed(images, labels, i),
        }
    }

    /// All `T` cycles unrolled; every exit weighted by its lambda.
    pub fn train_step_joint(&mut self, images: Tensor<T>, labels: &[usize]) -> Result<StepOutput> {
        let max = self.model.config.max_cycles;
        let lambdas: Vec<Option<f64>> = self.config.lambdas(max)?.into_iter().map(Some).collect();
        self.step(images, labels, max, &lambdas)
    }

    /// Exactly `i` cycles; only exit `i` is scored and only parameters it
    /// reaches are updated.
    pub fn train_step_fixed(&mut self, images: Tensor<T>, labels: &[usize], i: usize) -> Result<StepOutput> {
        let max = self.model.config.max_cycles;
        if i == 0 || i > max {
            return Err(Error::Config(format!("fixed cycle {i} outside 1..={max}")));
        }
        let mut lambdas = vec![None; max];
        lambdas[i - 1] = Some(1.0);
        self.step(images, labels, i, &lambdas)
    }

    fn step(&mut self, images: Tensor<T>, labels: &[usize], cycles: usize, lambdas: &[Option<f64>]) -> Result<StepOutput> {
        let p = self.config.dropout;
        let (grads, stats, out) = {
            let mut s = self.model.session(true)?;
            let dropout = (p > 0.0).then_some((p, &mut self.rng as &mut dyn rand::RngCore));
            let (obj, stats) = build_objective(&mut s, images, labels, cycles, lambdas, dropout)?;
            let losses: Vec<Option<f64>> = obj.losses.iter().map(|l| l.map(|v| s.value(v).data()[0].as_f64())).collect();
            let total = s.value(obj.total).data()[0].as_f64();
            if !total.is_finite() || losses.iter().flatten().any(|l| !l.is_finite()) {
                return Err(self.divergence(&losses, total));
            }
            let correct = obj
                .logits
                .iter()
                .map(|l| match l {
                    Some(v) => argmax_rows(s.value(*v)).iter().zip(labels).filter(|(a, b)| a == b).count(),
                    None => 0,
                })
                .collect();
            let grads = s.param_grads(obj.total)?;
            (grads, stats, StepOutput { losses, total, correct })
        };
        self.apply(&grads)?;
        self.model.update_running_stats(&stats)?;
        Ok(out)
    }

    fn apply(&mut self, grads: &IndexMap<String, Tensor<T>>) -> Result<()> {
        self.optimizer.step(&mut self.model.params, grads)?;
        self.model.clamp_rates()
    }

    fn divergence(&self, losses: &[Option<f64>], total: f64) -> Error {
        let rates = self.model.rates().map(|r| format!("a={:?} b={:?}", r.a, r.b)).unwrap_or_default();
        let largest = self
            .model
            .params
            .iter()
            .map(|(n, p)| (n, p.tensor.data().iter().fold(0.0f64, |m, v| m.max(v.as_f64().abs()))))
            .fold(("", 0.0), |acc, (n, v)| if !(v <= acc.1) { (n, v) } else { acc });
        Error::Divergence(format!(
            "non-finite loss at optimizer step {}: total={total}, per-exit={losses:?}, rates {rates}, largest |param| {} in {}",
            self.optimizer.steps() + 1,
            largest.1,
            largest.0
        ))
    }

    /// Augmented tensor for a batch of training indices.
    pub fn batch_inputs(&mut self, data: &Dataset, indices: &[usize]) -> Result<Tensor<T>> {
        let (hflip, translate) = (self.config.hflip, self.config.translate);
        if !hflip && !translate {
            return data.batch_tensor(indices);
        }
        let n = data.image_len();
        let mut buf = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            let img = augment(data.image(i), data.channels, data.size, hflip, translate, &mut self.rng);
            buf.extend(img.into_iter().map(|v| T::cast(v as f64)));
        }
        Ok(Tensor::new(&[indices.len(), data.channels, data.size, data.size], buf)?)
    }

    /// One pass over `data` with the shuffle of `epoch`.
    pub fn train_epoch(&mut self, data: &Dataset, epoch: usize) -> Result<EpochTrain> {
        if data.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        let max = self.model.config.max_cycles;
        let order = batches(data.len(), self.config.batch_size, true, self.config.seed.wrapping_add(epoch as u64))?;
        let mut loss_sum = vec![0.0; max];
        let mut correct = vec![0usize; max];
        let mut steps = 0;
        for idx in order {
            let x = self.batch_inputs(data, &idx)?;
            let labels = data.batch_labels(&idx);
            let out = self.train_step(x, &labels)?;
            for t in 0..max {
                if let Some(l) = out.losses[t] {
                    loss_sum[t] += l * idx.len() as f64;
                }
                correct[t] += out.correct[t];
            }
            steps += 1;
        }
        let n = data.len() as f64;
        Ok(EpochTrain {
            losses: loss_sum.iter().map(|l| l / n).collect(),
            accuracy: correct.iter().map(|&c| c as f64 / n).collect(),
            steps,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochTrain {
    pub losses: Vec<f64>,
    pub accuracy: Vec<f64>,
    pub steps: usize,
}

/// Evaluation-mode accuracy of every exit.
pub fn evaluate_exits<T: Scalar>(model: &PcModel<T>, data: &Dataset, batch_size: usize) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let mut correct = vec![0usize; model.config.max_cycles];
    for idx in batches(data.len(), batch_size, false, 0)? {
        let x = data.batch_tensor::<T>(&idx)?;
        let labels = data.batch_labels(&idx);
        for (t, preds) in predict_all_exits(model, &x)?.iter().enumerate() {
            correct[t] += preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
        }
    }
    Ok(correct.iter().map(|&c| c as f64 / data.len() as f64).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss per exit (trained exits only are meaningful).
    pub losses: Vec<f64>,
    pub train_accuracy: Vec<f64>,
    /// Evaluation accuracy per exit on the held-out split, if any.
    pub test_accuracy: Option<Vec<f64>>,
    pub wall_time_s: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub provenance: Provenance,
    pub trained_exits: Vec<usize>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainReport {
    /// `epoch, exit, loss, accuracy, train_accuracy, wall_time_s`, one row
    /// per trained exit per epoch. `accuracy` is the held-out accuracy, or
    /// empty without a held-out split.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv_writer(path, &self.provenance)?;
        w.write_record(["epoch", "exit", "loss", "accuracy", "train_accuracy", "wall_time_s"])?;
        for e in &self.epochs {
            for &t in &self.trained_exits {
                let acc = e.test_accuracy.as_ref().map(|a| format!("{:.6}", a[t - 1])).unwrap_or_default();
                w.write_record([
                    e.epoch.to_string(),
                    t.to_string(),
                    format!("{:.9}", e.losses[t - 1]),
                    acc,
                    format!("{:.6}", e.train_accuracy[t - 1]),
                    format!("{:.3}", e.wall_time_s),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::Io { path: path.into(), source: e })?;
        Ok(())
    }
}

pub struct TrainOutcome<T: Scalar> {
    pub report: TrainReport,
    pub best: PcModel<T>,
    pub last: PcModel<T>,
}

/// Full training run. `on_epoch` sees every record as it is produced.
pub fn run_training<T: Scalar>(
    model: PcModel<T>,
    config: TrainConfig,
    train: &Dataset,
    test: Option<&Dataset>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome<T>> {
    if train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let provenance = Provenance::new(model.config.hash(), config.seed);
    let max = model.config.max_cycles;
    let trained = config.trained_exits(max);
    let mut trainer = Trainer::new(model, config)?;
    let mut best: Option<(f64, usize, PcModel<T>)> = None;
    let mut records = Vec::new();
    let mut stopped_early = false;
    for epoch in 1..=trainer.config.epochs {
        let start = Instant::now();
        let tr = trainer.train_epoch(train, epoch)?;
        let test_accuracy = test.map(|d| evaluate_exits(&trainer.model, d, trainer.config.batch_size)).transpose()?;
        let rec = EpochRecord {
            epoch,
            losses: tr.losses,
            train_accuracy: tr.accuracy,
            test_accuracy,
            wall_time_s: start.elapsed().as_secs_f64(),
            steps: tr.steps,
        };
        on_epoch(&rec);
        let score_source = rec.test_accuracy.as_ref().unwrap_or(&rec.train_accuracy);
        let score = trained.iter().map(|&t| score_source[t - 1]).sum::<f64>() / trained.len() as f64;
        if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
            best = Some((score, epoch, trainer.model.clone()));
        }
        records.push(rec);
        if let Some(target) = trainer.config.target_train_accuracy {
            let last = *trained.last().expect("at least one trained exit");
            let acc = evaluate_exits(&trainer.model, train, trainer.config.batch_size)?[last - 1];
            if acc >= target {
                stopped_early = epoch < trainer.config.epochs;
                break;
            }
        }
    }
    let (_, best_epoch, best_model) = best.ok_or_else(|| Error::Config("zero training epochs".into()))?;
    Ok(TrainOutcome {
        report: TrainReport { provenance, trained_exits: trained, epochs: records, best_epoch, stopped_early },
        best: best_model,
        last: trainer.model,
    })
}
