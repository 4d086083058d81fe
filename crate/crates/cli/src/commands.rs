use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use pcn_core::artifact::Provenance;
use pcn_core::exits::{infer_early_exit, infer_fixed_cycles, write_exit_log, ExitRecord};
use pcn_core::profile::{bench_latency, exit_profile, write_exit_profile_csv, write_flops_csv, CycleCost};
use pcn_core::train::evaluate_exits;
use pcn_core::{run_training, Checkpoint, CostReport, ExitPolicy, ModelConfig, ModelId, PcModel, RunConfig};
use serde_json::json;

use crate::{BenchArgs, EvalArgs, ModelArgs, ProfileArgs, TrainArgs};

const EVAL_BATCH: usize = 100;

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn provenance_json(p: &Provenance) -> serde_json::Value {
    json!({ "config_hash": p.config_hash, "seed": p.seed, "format_version": p.format_version })
}

pub fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
        cfg.train.seed = seed;
    }
    let out = args.out.unwrap_or_else(|| cfg.output.dir.clone());
    let model_cfg = cfg.model_config()?;
    let data = cfg.load_data()?;
    create_dir(&out)?;
    fs::write(out.join("run_config.toml"), cfg.to_toml_string()?)?;
    eprintln!(
        "training model {} ({} cycles) on {} samples for up to {} epochs",
        model_cfg.model_id,
        model_cfg.max_cycles,
        data.train.len(),
        cfg.train.epochs
    );
    let model = PcModel::<f32>::new(model_cfg, cfg.seed)?;
    let outcome = run_training(model, cfg.train.clone(), &data.train, data.test.as_ref(), |r| {
        let loss: Vec<String> = r.losses.iter().map(|l| format!("{l:.4}")).collect();
        let acc = r.test_accuracy.as_ref().unwrap_or(&r.train_accuracy);
        let acc: Vec<String> = acc.iter().map(|a| format!("{:.3}", a)).collect();
        eprintln!("epoch {:>4}  loss [{}]  acc [{}]  {:.1}s", r.epoch, loss.join(" "), acc.join(" "), r.wall_time_s);
    })?;
    let report = &outcome.report;
    report.write_csv(&out.join("train_report.csv"))?;
    let last_epoch = report.epochs.last().map_or(0, |e| e.epoch);
    Checkpoint::new(outcome.best, data.normalization.clone(), cfg.seed, report.best_epoch)
        .save(&out.join("best.pcnn"))?;
    Checkpoint::new(outcome.last, data.normalization, cfg.seed, last_epoch).save(&out.join("final.pcnn"))?;
    write_json(
        &out.join("train_summary.json"),
        &json!({
            "provenance": provenance_json(&report.provenance),
            "epochs_run": report.epochs.len(),
            "best_epoch": report.best_epoch,
            "stopped_early": report.stopped_early,
            "final": report.epochs.last(),
        }),
    )?;
    eprintln!("wrote {}", out.display());
    Ok(())
}

fn per_sample(model: &PcModel<f32>, data: &pcn_core::Dataset, policy: Option<ExitPolicy>, cycles: usize) -> Result<Vec<ExitRecord>> {
    let mut records = Vec::with_capacity(data.len());
    for idx in pcn_core::data::batches(data.len(), EVAL_BATCH, false, 0)? {
        let x = data.batch_tensor::<f32>(&idx)?;
        let outs = match policy {
            Some(p) => infer_early_exit(model, &x, p)?,
            None => infer_fixed_cycles(model, &x, cycles)?,
        };
        for (&i, outcome) in idx.iter().zip(outs) {
            records.push(ExitRecord { sample_id: i, label: data.labels[i] as usize, outcome });
        }
    }
    Ok(records)
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let cfg = RunConfig::load(&args.config)?;
    let data = cfg.load_eval_split(&ck.header.normalization)?;
    let model = &ck.model;
    let c = &model.config;
    if data.channels != c.input_channels || data.size != c.input_size || data.num_classes != c.num_classes {
        bail!("evaluation data does not match the checkpoint's model input");
    }
    let prov = Provenance::new(ck.header.config_hash.clone(), ck.header.seed);
    let max = c.max_cycles;
    let n = data.len() as f64;
    let summary = if let Some(theta) = args.threshold {
        let policy = ExitPolicy::new(theta)?;
        let records = per_sample(model, &data, Some(policy), max)?;
        let profile = pcn_core::ExitProfile::from_records(theta, max, &records)?;
        if let Some(out) = &args.out {
            create_dir(out)?;
            write_exit_log(&out.join("exit_log.csv"), &records, max, &prov)?;
        }
        json!({
            "mode": "threshold",
            "threshold": theta,
            "samples": data.len(),
            "accuracy": profile.accuracy,
            "mean_cycles": profile.mean_cycles,
            "exit_profile": profile,
        })
    } else if let Some(t) = args.cycles {
        let records = per_sample(model, &data, None, t)?;
        if let Some(out) = &args.out {
            create_dir(out)?;
            write_exit_log(&out.join("exit_log.csv"), &records, max, &prov)?;
        }
        let correct = records.iter().filter(|r| r.correct()).count() as f64;
        json!({ "mode": "fixed", "cycles": t, "samples": data.len(), "accuracy": correct / n })
    } else {
        let acc = evaluate_exits(model, &data, EVAL_BATCH)?;
        json!({ "mode": "fixed_sweep", "samples": data.len(), "accuracy_per_exit": acc })
    };
    let mut summary = summary;
    summary["provenance"] = provenance_json(&prov);
    summary["checkpoint_epoch"] = json!(ck.header.epoch);
    match &args.out {
        Some(out) => {
            create_dir(out)?;
            write_json(&out.join("metrics.json"), &summary)?;
        }
        None => println!("{}", serde_json::to_string_pretty(&summary)?),
    }
    Ok(())
}

/// Model from `--preset`, `--config` or `--checkpoint` (with its seed).
fn resolve_model(args: &ModelArgs, seed: u64) -> Result<(PcModel<f32>, u64)> {
    let cycles = args.cycles;
    if let Some(path) = &args.checkpoint {
        if cycles.is_some() {
            bail!("--cycles cannot change a checkpoint's model");
        }
        let ck = Checkpoint::load(path)?;
        return Ok((ck.model, ck.header.seed));
    }
    let config = if let Some(path) = &args.config {
        let run = RunConfig::load(path)?;
        let mut m = run.model.clone();
        if let Some(t) = cycles {
            m.max_cycles = t;
        }
        m.build()?
    } else {
        let name = args.preset.as_deref().unwrap_or("A");
        let id: ModelId = name.parse()?;
        ModelConfig::preset(id, cycles.unwrap_or(pcn_core::config::DEFAULT_CYCLES))?
    };
    Ok((PcModel::new(config, seed)?, seed))
}

pub fn inspect(args: ModelArgs) -> Result<()> {
    let (model, _) = resolve_model(&args, 0)?;
    let report = CostReport::new(&model.config)?;
    let value = serde_json::to_value(&report)?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&value)?);
    } else {
        print!("{}", report.render_text());
    }
    if let Some(out) = &args.out {
        create_dir(out)?;
        let mut v = value;
        v["provenance"] = provenance_json(&Provenance::new(model.config.hash(), 0));
        write_json(&out.join("cost_report.json"), &v)?;
        fs::write(out.join("cost_report.txt"), report.render_text())?;
    }
    Ok(())
}

pub fn bench(args: BenchArgs) -> Result<()> {
    let (model, seed) = resolve_model(&args.model, args.seed)?;
    if args.repetitions == 0 {
        bail!("--repetitions must be at least 1");
    }
    let mut report = CostReport::new(&model.config)?;
    let mut lat = Vec::new();
    for t in 1..=model.config.max_cycles {
        let stats = bench_latency(&model, t, args.repetitions)?;
        eprintln!("cycles {t}: mean {:.3} ms, p50 {:.3} ms, p95 {:.3} ms", stats.mean_ms, stats.p50_ms, stats.p95_ms);
        lat.push(stats);
    }
    let rows: Vec<CycleCost> = lat
        .iter()
        .enumerate()
        .map(|(i, s)| CycleCost { cycle: i + 1, flops: report.flops_per_cycle[i], latency_ms: Some(s.mean_ms) })
        .collect();
    report.latency = Some(lat);
    let xs: Vec<f64> = rows.iter().map(|r| r.cycle as f64).collect();
    let ys: Vec<f64> = rows.iter().filter_map(|r| r.latency_ms).collect();
    let fit = pcn_core::profile::linear_fit(&xs, &ys).ok();
    if args.model.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        print!("{}", report.render_text());
        if let Some((slope, intercept, r2)) = fit {
            println!("latency fit: {slope:.4} ms/cycle + {intercept:.4} ms, R^2 {r2:.4}");
        }
    }
    if let Some(out) = &args.model.out {
        create_dir(out)?;
        let prov = Provenance::new(model.config.hash(), seed);
        write_flops_csv(&out.join("flops_per_cycle.csv"), &rows, &prov)?;
        let mut v = serde_json::to_value(&report)?;
        v["provenance"] = provenance_json(&prov);
        v["latency_fit"] = json!(fit.map(|(s, i, r2)| json!({ "slope_ms": s, "intercept_ms": i, "r_squared": r2 })));
        write_json(&out.join("bench.json"), &v)?;
    }
    Ok(())
}

pub fn profile_exits(args: ProfileArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let cfg = RunConfig::load(&args.config)?;
    let data = cfg.load_eval_split(&ck.header.normalization)?;
    let thresholds = if args.threshold.is_empty() {
        (0..=10).map(|i| i as f64 / 10.0).collect()
    } else {
        args.threshold.clone()
    };
    create_dir(&args.out)?;
    let prov = Provenance::new(ck.header.config_hash.clone(), ck.header.seed);
    let mut profiles = Vec::new();
    for &theta in &thresholds {
        let (p, _) = exit_profile(&ck.model, &data, theta, EVAL_BATCH)?;
        eprintln!("threshold {theta:.2}: accuracy {:.4}, mean cycles {:.3}, exits {:?}", p.accuracy, p.mean_cycles, p.exited);
        profiles.push(p);
    }
    write_exit_profile_csv(&args.out.join("exit_profile.csv"), &profiles, &prov)?;
    write_json(
        &args.out.join("exit_profile.json"),
        &json!({ "provenance": provenance_json(&prov), "samples": data.len(), "profiles": profiles }),
    )?;
    Ok(())
}
