//! Parameter and FLOP accounting, latency benchmarks and exit statistics.

use std::path::Path;
use std::time::Instant;

use pcn_tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::artifact::{csv_writer, Provenance};
use crate::config::ModelConfig;
use crate::data::{batches, Dataset};
use crate::error::{Error, Result};
use crate::exits::{infer_early_exit, infer_fixed_cycles, ExitPolicy, ExitRecord};
use crate::model::PcModel;

pub const FLOP_CONVENTION: &str = "2 FLOPs per multiply-accumulate in conv, deconv and fully-connected layers; \
batchnorm, error subtraction, max-pool, ReLU and rate arithmetic at 1 FLOP per output element; \
the feedback blend of a hidden layer at 2 per element; exit heads counted separately";
pub const BYTES_PER_PARAM: usize = 4;
pub const WARMUP_RUNS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ParamBreakdown {
    pub ff_conv: usize,
    pub fb_deconv: usize,
    pub batchnorm: usize,
    pub heads: usize,
    pub rates: usize,
}

impl ParamBreakdown {
    pub fn total(&self) -> usize {
        self.ff_conv + self.fb_deconv + self.batchnorm + self.heads + self.rates
    }
}

/// Trainable parameters implied by `config`; batchnorm running statistics
/// are buffers and not counted.
pub fn count_params(config: &ModelConfig) -> ParamBreakdown {
    let mut b = ParamBreakdown::default();
    for l in 1..=config.num_layers() {
        let (cin, cout) = (config.channels(l - 1), config.channels(l));
        b.ff_conv += cout * cin * 9 + cout;
        b.fb_deconv += cout * cin * 9 + cin;
        b.batchnorm += 2 * cout;
    }
    b.heads = config.max_cycles * (config.feature_len() * config.num_classes + config.num_classes);
    b.rates = 2 * config.num_layers() - 1;
    b
}

/// Costs of one forward sweep, one feedback sweep and one exit head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopModel {
    pub forward_sweep: u64,
    pub feedback_sweep: u64,
    pub head: u64,
}

impl FlopModel {
    pub fn new(config: &ModelConfig) -> Self {
        let sizes = config.spatial_sizes();
        let (mut ff, mut fb) = (0u64, 0u64);
        for l in 1..=config.num_layers() {
            let (cin, cout) = (config.channels(l - 1) as u64, config.channels(l) as u64);
            let (hin, hout) = (sizes[l - 1] as u64, sizes[l] as u64);
            let conv_out = cout * hin * hin;
            let out = cout * hout * hout;
            let pool = if config.layers[l - 1].pool_after { out } else { 0 };
            // conv, then batchnorm or error subtraction, pool, ReLU, rate update
            ff += 2 * cout * cin * 9 * hin * hin + conv_out + pool + out + out;
            // deconv input is layer l's map; the blend into C_b[l-1] skips the image
            fb += 2 * cin * cout * 9 * hout * hout;
            if l >= 2 {
                fb += 2 * cin * hin * hin;
            }
        }
        let c = config.feature_len() as u64;
        let top = *sizes.last().expect("at least one layer") as u64;
        let head = c * top * top + 2 * c * config.num_classes as u64;
        Self { forward_sweep: ff, feedback_sweep: fb, head }
    }

    /// Backbone FLOPs for `cycles` cycles; the first cycle holds two forward
    /// sweeps (initial plus corrective).
    pub fn flops(&self, cycles: usize) -> Result<u64> {
        if cycles == 0 {
            return Err(Error::Config("FLOPs need at least one cycle".into()));
        }
        let first = 2 * self.forward_sweep + self.feedback_sweep;
        Ok(first + (cycles as u64 - 1) * (self.forward_sweep + self.feedback_sweep))
    }
}

pub fn count_flops(config: &ModelConfig, cycles: usize) -> Result<u64> {
    FlopModel::new(config).flops(cycles)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub repetitions: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
}

impl LatencyStats {
    pub fn from_samples(samples_ms: &[f64]) -> Result<Self> {
        if samples_ms.is_empty() {
            return Err(Error::Config("latency statistics need at least one repetition".into()));
        }
        let mut s = samples_ms.to_vec();
        s.sort_by(f64::total_cmp);
        let pct = |q: f64| s[((q * s.len() as f64).ceil() as usize).clamp(1, s.len()) - 1];
        Ok(Self {
            repetitions: s.len(),
            mean_ms: s.iter().sum::<f64>() / s.len() as f64,
            p50_ms: pct(0.5),
            p95_ms: pct(0.95),
        })
    }
}

/// Wall-clock time of single-sample inference forced to `cycles` cycles,
/// after [`WARMUP_RUNS`] untimed runs.
pub fn bench_latency<T: Scalar>(model: &PcModel<T>, cycles: usize, repetitions: usize) -> Result<LatencyStats> {
    let c = &model.config;
    let x = Tensor::<T>::from_fn(&[1, c.input_channels, c.input_size, c.input_size], |i| {
        T::cast(((i * 7919) % 255) as f64 / 255.0 - 0.5)
    })?;
    for _ in 0..WARMUP_RUNS {
        infer_fixed_cycles(model, &x, cycles)?;
    }
    let mut samples = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let start = Instant::now();
        std::hint::black_box(infer_fixed_cycles(model, &x, cycles)?);
        samples.push(start.elapsed().as_secs_f64() * 1e3);
    }
    LatencyStats::from_samples(&samples)
}

/// Least-squares line through `(xs, ys)`: `(slope, intercept, r_squared)`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Result<(f64, f64, f64)> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Config("linear fit needs at least two paired points".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(Error::Config("linear fit needs distinct x values".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let ss_res: f64 = xs.iter().zip(ys).map(|(x, y)| (y - slope * x - intercept).powi(2)).sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Ok((slope, intercept, r2))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitProfile {
    pub threshold: f64,
    /// Samples leaving at each cycle, index `t - 1`.
    pub exited: Vec<usize>,
    pub correct: Vec<usize>,
    pub accuracy: f64,
    pub mean_cycles: f64,
}

impl ExitProfile {
    pub fn from_records(threshold: f64, max_cycles: usize, records: &[ExitRecord]) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Data("exit profile of an empty dataset".into()));
        }
        let mut exited = vec![0; max_cycles];
        let mut correct = vec![0; max_cycles];
        for r in records {
            exited[r.outcome.exit_cycle - 1] += 1;
            correct[r.outcome.exit_cycle - 1] += usize::from(r.correct());
        }
        let n = records.len() as f64;
        Ok(Self {
            threshold,
            accuracy: correct.iter().sum::<usize>() as f64 / n,
            mean_cycles: records.iter().map(|r| r.outcome.exit_cycle as f64).sum::<f64>() / n,
            exited,
            correct,
        })
    }

    pub fn total(&self) -> usize {
        self.exited.iter().sum()
    }
}

/// Early-exit inference over `data` at `threshold`.
pub fn exit_profile<T: Scalar>(
    model: &PcModel<T>,
    data: &Dataset,
    threshold: f64,
    batch_size: usize,
) -> Result<(ExitProfile, Vec<ExitRecord>)> {
    if data.is_empty() {
        return Err(Error::Data("exit profile of an empty dataset".into()));
    }
    let policy = ExitPolicy::new(threshold)?;
    let mut records = Vec::with_capacity(data.len());
    for idx in batches(data.len(), batch_size, false, 0)? {
        let x = data.batch_tensor::<T>(&idx)?;
        for (&i, outcome) in idx.iter().zip(infer_early_exit(model, &x, policy)?) {
            records.push(ExitRecord { sample_id: i, label: data.labels[i] as usize, outcome });
        }
    }
    let profile = ExitProfile::from_records(threshold, model.config.max_cycles, &records)?;
    Ok((profile, records))
}

/// `threshold, cycle, exited, correct`.
pub fn write_exit_profile_csv(path: &Path, profiles: &[ExitProfile], provenance: &Provenance) -> Result<()> {
    let mut w = csv_writer(path, provenance)?;
    w.write_record(["threshold", "cycle", "exited", "correct"])?;
    for p in profiles {
        for t in 0..p.exited.len() {
            w.write_record([format!("{}", p.threshold), (t + 1).to_string(), p.exited[t].to_string(), p.correct[t].to_string()])?;
        }
    }
    w.flush().map_err(|e| Error::Io { path: path.into(), source: e })?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleCost {
    pub cycle: usize,
    pub flops: u64,
    pub latency_ms: Option<f64>,
}

/// `cycle, flops, latency_ms`; latency is empty when not measured.
pub fn write_flops_csv(path: &Path, rows: &[CycleCost], provenance: &Provenance) -> Result<()> {
    let mut w = csv_writer(path, provenance)?;
    w.write_record(["cycle", "flops", "latency_ms"])?;
    for r in rows {
        w.write_record([r.cycle.to_string(), r.flops.to_string(), r.latency_ms.map(|l| format!("{l:.6}")).unwrap_or_default()])?;
    }
    w.flush().map_err(|e| Error::Io { path: path.into(), source: e })?;
    Ok(())
}

/// Static costs of a model configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub model: String,
    pub config_hash: String,
    pub params: ParamBreakdown,
    pub total_params: usize,
    pub size_mb: f64,
    pub flop_model: FlopModel,
    /// Backbone FLOPs for cycles `1..=T`.
    pub flops_per_cycle: Vec<u64>,
    pub flop_convention: String,
    pub latency: Option<Vec<LatencyStats>>,
}

impl CostReport {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = count_params(config);
        let fm = FlopModel::new(config);
        let total = params.total();
        Ok(Self {
            model: config.model_id.to_string(),
            config_hash: config.hash(),
            params,
            total_params: total,
            size_mb: (total * BYTES_PER_PARAM) as f64 / 1e6,
            flop_model: fm,
            flops_per_cycle: (1..=config.max_cycles).map(|t| fm.flops(t)).collect::<Result<_>>()?,
            flop_convention: FLOP_CONVENTION.to_string(),
            latency: None,
        })
    }

    pub fn render_text(&self) -> String {
        let p = &self.params;
        let mut s = format!("model {} (config {})\n", self.model, self.config_hash);
        s += "parameters\n";
        for (name, v) in [
            ("ff conv", p.ff_conv),
            ("fb deconv", p.fb_deconv),
            ("batchnorm", p.batchnorm),
            ("exit heads", p.heads),
            ("rates", p.rates),
        ] {
            s += &format!("  {name:<12}{v:>12}\n");
        }
        s += &format!("  {:<12}{:>12}\n", "total", self.total_params);
        s += &format!("size {:.3} MB\n", self.size_mb);
        s += &format!(
            "forward sweep {} FLOPs, feedback sweep {} FLOPs, exit head {} FLOPs\n",
            self.flop_model.forward_sweep, self.flop_model.feedback_sweep, self.flop_model.head
        );
        for (t, f) in self.flops_per_cycle.iter().enumerate() {
            s += &format!("  cycles {}: {:.4e} FLOPs", t + 1, *f as f64);
            if let Some(l) = self.latency.as_ref().and_then(|l| l.get(t)) {
                s += &format!("  {:.3} ms (p50 {:.3}, p95 {:.3})", l.mean_ms, l.p50_ms, l.p95_ms);
            }
            s += "\n";
        }
        s += &format!("convention: {}\n", self.flop_convention);
        s
    }
}
