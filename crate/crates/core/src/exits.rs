//! Exit heads, confidence scoring and the early-exit inference loop.

use std::path::Path;

use pcn_tensor::kernels::softmax;
use pcn_tensor::{Scalar, Tensor};

use crate::artifact::{csv_writer, Provenance};
use crate::error::{Error, Result};
use crate::model::{PcModel, Phase};

pub const HEAD_DROPOUT: f64 = 0.1;

/// Exit as soon as confidence strictly exceeds `threshold`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExitPolicy {
    threshold: f64,
}

impl ExitPolicy {
    pub fn new(threshold: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&threshold) {
            return Err(Error::Config(format!("threshold {threshold} outside [0, 1]")));
        }
        Ok(Self { threshold })
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    /// Whether a sample leaves after cycle `t` of `max_cycles`.
    pub fn should_exit(&self, confidence: f64, t: usize, max_cycles: usize) -> bool {
        confidence > self.threshold || t >= max_cycles
    }

    /// Exit cycle for a scripted confidence sequence (one entry per cycle).
    pub fn exit_cycle(&self, confidences: &[f64]) -> usize {
        let max = confidences.len();
        (1..=max).find(|&t| self.should_exit(confidences[t - 1], t, max)).unwrap_or(max)
    }
}

/// Maximum class probability.
pub fn confidence<T: Scalar>(probs: &[T]) -> T {
    probs.iter().copied().fold(T::zero(), T::max)
}

fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExitOutcome {
    pub exit_cycle: usize,
    pub probs: Vec<f64>,
    pub confidence: f64,
    pub predicted_class: usize,
    pub cycles_executed: usize,
    /// Confidence of every head evaluated for this sample, in cycle order.
    pub confidences: Vec<f64>,
}

fn outcome<T: Scalar>(probs: &[T], cycle: usize, confidences: Vec<f64>) -> ExitOutcome {
    ExitOutcome {
        exit_cycle: cycle,
        probs: probs.iter().map(|p| p.as_f64()).collect(),
        confidence: confidence(probs).as_f64(),
        predicted_class: argmax(probs),
        cycles_executed: cycle,
        confidences,
    }
}

/// Head `t` probabilities for `features` `[B, C_L]`, evaluation mode.
pub fn classify<T: Scalar>(model: &PcModel<T>, features: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
    let mut s = model.session(false)?;
    let f = s.input(features.clone());
    let logits = s.classify(f, t, None)?;
    Ok(softmax(s.value(logits))?)
}

/// Per-cycle head probabilities `[B, K]` for cycles `1..=cycles`, stopping
/// early once `stop` says every sample is done.
fn run_heads<T: Scalar>(
    model: &PcModel<T>,
    x: &Tensor<T>,
    cycles: usize,
    mut stop: impl FnMut(usize, &Tensor<T>) -> bool,
) -> Result<()> {
    let max = model.config.max_cycles;
    if cycles == 0 || cycles > max {
        return Err(Error::Usage(format!("cycle count {cycles} outside 1..={max}")));
    }
    let mut s = model.session(false)?;
    let input = s.input(x.clone());
    let (mut state, _) = s.init_pass(input, Phase::Eval)?;
    for t in 1..=cycles {
        s.run_cycle(&mut state)?;
        let f = s.exit_features(&state)?;
        let logits = s.classify(f, t, None)?;
        let probs = softmax(s.value(logits))?;
        if stop(t, &probs) {
            break;
        }
    }
    Ok(())
}

/// Early-exit inference on a batch; samples leave independently.
pub fn infer_early_exit<T: Scalar>(model: &PcModel<T>, x: &Tensor<T>, policy: ExitPolicy) -> Result<Vec<ExitOutcome>> {
    let max = model.config.max_cycles;
    let batch = x.dims4()?[0];
    let mut done: Vec<Option<ExitOutcome>> = vec![None; batch];
    let mut confs = vec![Vec::new(); batch];
    run_heads(model, x, max, |t, probs| {
        let k = probs.shape()[1];
        for (i, slot) in done.iter_mut().enumerate() {
            if slot.is_some() {
                continue;
            }
            let p = &probs.data()[i * k..(i + 1) * k];
            let c = confidence(p).as_f64();
            confs[i].push(c);
            if policy.should_exit(c, t, max) {
                *slot = Some(outcome(p, t, std::mem::take(&mut confs[i])));
            }
        }
        done.iter().all(Option::is_some)
    })?;
    Ok(done.into_iter().map(|o| o.expect("every sample exits by the last cycle")).collect())
}

/// Exactly `cycles` cycles, classified by head `cycles`.
pub fn infer_fixed_cycles<T: Scalar>(model: &PcModel<T>, x: &Tensor<T>, cycles: usize) -> Result<Vec<ExitOutcome>> {
    let batch = x.dims4()?[0];
    let mut confs = vec![Vec::new(); batch];
    let mut out = Vec::new();
    run_heads(model, x, cycles, |t, probs| {
        let k = probs.shape()[1];
        for (i, c) in confs.iter_mut().enumerate() {
            c.push(confidence(&probs.data()[i * k..(i + 1) * k]).as_f64());
        }
        if t == cycles {
            out = (0..batch)
                .map(|i| outcome(&probs.data()[i * k..(i + 1) * k], t, std::mem::take(&mut confs[i])))
                .collect();
        }
        false
    })?;
    Ok(out)
}

/// Head predictions of every exit, `[t][sample]`, from one unrolled pass.
pub fn predict_all_exits<T: Scalar>(model: &PcModel<T>, x: &Tensor<T>) -> Result<Vec<Vec<usize>>> {
    let mut preds = Vec::new();
    run_heads(model, x, model.config.max_cycles, |_, probs| {
        let k = probs.shape()[1];
        preds.push(probs.data().chunks(k).map(argmax).collect());
        false
    })?;
    Ok(preds)
}

/// Top forward map after each cycle `1..=cycles`.
pub fn top_feature_trajectory<T: Scalar>(model: &PcModel<T>, x: &Tensor<T>, cycles: usize) -> Result<Vec<Tensor<T>>> {
    let mut s = model.session(false)?;
    let input = s.input(x.clone());
    let (mut state, _) = s.init_pass(input, Phase::Eval)?;
    let top = state.num_layers();
    let mut out = Vec::with_capacity(cycles);
    for _ in 0..cycles {
        s.run_cycle(&mut state)?;
        out.push(s.value(state.forward_map(top)).clone());
    }
    Ok(out)
}

/// Relative change `|C(t+1) - C(t)| / |C(t)|` of each sample's top map along
/// a trajectory. Returns `[sample][t]`.
pub fn relative_changes<T: Scalar>(trajectory: &[Tensor<T>]) -> Result<Vec<Vec<f64>>> {
    let Some(first) = trajectory.first() else {
        return Ok(Vec::new());
    };
    let batch = first.dims4()?[0];
    let per = first.len() / batch;
    let mut out = vec![Vec::new(); batch];
    for pair in trajectory.windows(2) {
        let (a, b) = (pair[0].data(), pair[1].data());
        for (i, row) in out.iter_mut().enumerate() {
            let r = i * per..(i + 1) * per;
            let diff: f64 = a[r.clone()].iter().zip(&b[r.clone()]).map(|(x, y)| (*y - *x).as_f64().powi(2)).sum();
            let base: f64 = a[r].iter().map(|x| x.as_f64().powi(2)).sum();
            row.push(if base > 0.0 { diff.sqrt() / base.sqrt() } else { 0.0 });
        }
    }
    Ok(out)
}

/// One row of the per-sample exit log.
#[derive(Debug, Clone, PartialEq)]
pub struct ExitRecord {
    pub sample_id: usize,
    pub label: usize,
    pub outcome: ExitOutcome,
}

impl ExitRecord {
    pub fn correct(&self) -> bool {
        self.outcome.predicted_class == self.label
    }
}

/// Writes `sample_id, label, predicted, correct, exit_cycle, conf_1..conf_T`;
/// confidences of cycles never run are left empty.
pub fn write_exit_log(path: &Path, records: &[ExitRecord], max_cycles: usize, provenance: &Provenance) -> Result<()> {
    let mut w = csv_writer(path, provenance)?;
    let mut header: Vec<String> = ["sample_id", "label", "predicted", "correct", "exit_cycle"].map(String::from).to_vec();
    header.extend((1..=max_cycles).map(|t| format!("conf_{t}")));
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![
            r.sample_id.to_string(),
            r.label.to_string(),
            r.outcome.predicted_class.to_string(),
            u8::from(r.correct()).to_string(),
            r.outcome.exit_cycle.to_string(),
        ];
        row.extend((0..max_cycles).map(|t| r.outcome.confidences.get(t).map(|c| format!("{c:.9}")).unwrap_or_default()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::Io { path: path.into(), source: e })?;
    Ok(())
}
