//! The five pipeline commands.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::json;
use slimbio_core::bench::{self, BenchReport, EnergyReading, LatencyStats, Mode, ReportRow};
use slimbio_core::datagen::{self, Phantom, PhantomSpec};
use slimbio_core::executor;
use slimbio_core::graph::Graph;
use slimbio_core::metrics::{self, MetricKind};
use slimbio_core::pruner::{self, FinetuneSpec};
use slimbio_core::quantizer;
use slimbio_core::tensor::Tensor;
use slimbio_core::trainer;

use crate::config::{Command, InferSection, MetricSection, RunConfig};
use crate::error::CliError;
use crate::manifest::{self, FileDigest, Manifest, RunRecord, Stage};

type Result<T> = std::result::Result<T, CliError>;

/// Output directory: `--out` wins over the config's `output`.
fn out_dir(cfg: &RunConfig, out: Option<&Path>) -> Result<PathBuf> {
    let dir = out
        .map(Path::to_path_buf)
        .or_else(|| cfg.output.clone())
        .ok_or_else(|| CliError::Config {
            path: "output".into(),
            message: "no output directory (use --out or `output`)".into(),
        })?;
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn stage(name: &str, g: &Graph, detail: serde_json::Value) -> Result<Stage> {
    Ok(Stage {
        name: name.into(),
        params: g.param_count(),
        sha256: manifest::sha256_hex(&g.to_bytes()?),
        detail,
    })
}

fn load_pairs(dir: &Path) -> Result<(PhantomSpec, Vec<Phantom>)> {
    let (spec, set) = datagen::read_dataset(dir)?;
    if set.is_empty() {
        return Err(CliError::Pipeline(format!("dataset {} is empty", dir.display())));
    }
    Ok((spec, set))
}

/// load -> validate -> fold batchnorm -> [prune -> fine-tune] ->
/// [calibrate -> convert] -> save. Mode fp32 only loads and saves.
pub fn cmd_compress(cfg: &RunConfig, out: Option<&Path>) -> Result<PathBuf> {
    cfg.validate(Command::Compress)?;
    let dir = out_dir(cfg, out)?;
    let model_path = cfg.model.as_ref().expect("validated");
    let mut g = Graph::load_model(model_path)?;
    g.validate()?;
    let params_before = g.param_count();
    let mut stages = vec![stage("load", &g, json!({ "path": model_path }))?];

    if cfg.mode != Mode::Fp32 {
        let folded = g.fold_batchnorm();
        g = folded.graph;
        stages.push(stage("fold_batchnorm", &g, json!({ "unfoldable": folded.unfoldable }))?);
    }
    if cfg.mode.prunes() {
        let p = cfg.prune.as_ref().expect("validated");
        let plan = pruner::plan_prune(&g, p.criterion, p.sparsity)?;
        let predicted = pruner::predict_params(&g, &plan)?;
        g = pruner::apply_prune(&g, &plan)?;
        let kept: serde_json::Map<String, serde_json::Value> =
            plan.keep.iter().map(|(k, v)| (k.clone(), json!(v.len()))).collect();
        stages.push(stage(
            "prune",
            &g,
            json!({ "criterion": p.criterion, "sparsity": p.sparsity, "predicted_params": predicted, "kept_filters": kept }),
        )?);
        if let Some(ft) = &p.finetune {
            let (_, set) = load_pairs(p.train_data.as_ref().expect("validated"))?;
            let data: Vec<(Tensor, Tensor)> = set.into_iter().map(|s| (s.input, s.target)).collect();
            let outcome = trainer::finetune(&g, &data, p.loss, ft)?;
            g = outcome.graph;
            fs::write(dir.join("loss_curve.csv"), trainer::loss_curve_csv(&outcome.losses))?;
            stages.push(stage(
                "finetune",
                &g,
                json!({ "sgd": ft, "loss": p.loss, "first_loss": outcome.losses.first(), "last_loss": outcome.losses.last() }),
            )?);
        }
    }
    if cfg.mode.quantizes() {
        let q = cfg.quant.as_ref().expect("validated");
        let (_, set) = load_pairs(&q.calib_data)?;
        let samples: Vec<Tensor> = set.into_iter().take(q.calib_samples).map(|s| s.input).collect();
        let kind = q.observer_kind();
        let cal = quantizer::calibrate(&g, &samples, kind)?;
        stages.push(stage(
            "calibrate",
            &g,
            json!({ "observer": kind, "samples": samples.len(), "degenerate": cal.degenerate }),
        )?);
        g = quantizer::convert_int8(&g, &cal.params)?;
        stages.push(stage(
            "convert_int8",
            &g,
            json!({ "int8_weights": quantizer::int8_weight_count(&g) }),
        )?);
    }

    let out_model = dir.join("model.ebm");
    g.save_model(&out_model)?;
    let record = RunRecord {
        command: Command::Compress.name().into(),
        mode: cfg.mode,
        config: cfg.clone(),
        inputs: vec![FileDigest::of(model_path)?],
        outputs: vec![FileDigest::of(&out_model)?],
        params_before: Some(params_before),
        params_after: Some(g.param_count()),
        stages,
        extra: json!({}),
    };
    Manifest::append(&dir, record)?;
    log::info!("compressed {} -> {}", model_path.display(), out_model.display());
    Ok(dir)
}

/// Prediction for one image, tiled when a window is configured.
pub fn predict(g: &Graph, input: &Tensor, infer: &InferSection) -> Result<Tensor> {
    Ok(match &infer.window {
        Some(w) => executor::run_tiled(g, input, w, infer.overlap)?,
        None => executor::run_single(g, input)?,
    })
}

/// Scores one prediction against its target.
pub fn score(pred: &Tensor, target: &Tensor, m: &MetricSection) -> Result<f64> {
    Ok(match m.kind {
        MetricKind::Pearson if is_constant(pred) && !is_constant(target) => {
            // a collapsed model carries no signal; score it as uncorrelated
            log::warn!("constant prediction scored as Pearson 0");
            0.0
        }
        MetricKind::Pearson => metrics::pearson(pred, target)?,
        MetricKind::Dice => metrics::dice(pred, target, m.threshold)?,
        MetricKind::Ap50 => {
            let mask: Vec<f32> = pred
                .to_f32_vec()
                .into_iter()
                .map(|v| if f64::from(v) > m.threshold { 1.0 } else { 0.0 })
                .collect();
            let mask = Tensor::from_f32(pred.shape().to_vec(), mask)?;
            metrics::ap50(&metrics::connected_components(&mask)?, target)?
        }
    })
}

fn is_constant(t: &Tensor) -> bool {
    let v = t.to_f32_vec();
    v.iter().all(|&x| x == v[0])
}

/// Mean metric of `g` over a dataset.
pub fn evaluate(g: &Graph, set: &[Phantom], infer: &InferSection, m: &MetricSection) -> Result<f64> {
    let mut total = 0.0;
    for p in set {
        total += score(&predict(g, &p.input, infer)?, &p.target, m)?;
    }
    Ok(total / set.len() as f64)
}

fn task_name(cfg: &RunConfig, spec: &PhantomSpec) -> String {
    cfg.task.clone().unwrap_or_else(|| spec.task.name().to_string())
}

fn model_bytes(path: &Path) -> Result<u64> {
    Ok(fs::metadata(path)?.len())
}

/// Tiled inference over the configured dataset: writes predictions,
/// per-image metrics and appends one row to the directory's report.
pub fn cmd_infer(cfg: &RunConfig, out: Option<&Path>) -> Result<BenchReport> {
    cfg.validate(Command::Infer)?;
    let dir = out_dir(cfg, out)?;
    let infer = cfg.infer.as_ref().expect("validated");
    let model_path = cfg.model.as_ref().expect("validated");
    let g = Graph::load_model(model_path)?;
    let (spec, set) = load_pairs(&infer.data)?;

    let (energy, result) = bench::measure_energy(
        || -> Result<(Vec<Tensor>, Vec<f64>)> {
            let mut preds = Vec::with_capacity(set.len());
            let mut secs = Vec::with_capacity(set.len());
            for p in &set {
                let t0 = Instant::now();
                preds.push(predict(&g, &p.input, infer)?);
                secs.push(t0.elapsed().as_secs_f64());
            }
            Ok((preds, secs))
        },
        &cfg.energy,
    )?;
    let (preds, secs) = result?;
    let pred_dir = dir.join("predictions");
    fs::create_dir_all(&pred_dir)?;
    let mut scores = Vec::with_capacity(set.len());
    let mut outputs = Vec::with_capacity(set.len());
    for (i, (pred, p)) in preds.iter().zip(&set).enumerate() {
        scores.push(score(pred, &p.target, &cfg.metric)?);
        let path = pred_dir.join(format!("{i:04}_pred.ebt"));
        pred.write_ebt(&path)?;
        outputs.push(FileDigest::of(&path)?);
    }
    let accuracy = scores.iter().sum::<f64>() / scores.len() as f64;
    fs::write(
        dir.join("metrics.json"),
        serde_json::to_string_pretty(&json!({ "metric": cfg.metric.kind.name(), "per_image": scores, "mean": accuracy }))?,
    )?;

    let row = ReportRow {
        task: task_name(cfg, &spec),
        mode: cfg.mode,
        latency: LatencyStats::from_samples(&secs, 0)?,
        energy: per_image(&energy, set.len()),
        accuracy,
        accuracy_metric: cfg.metric.kind.name().into(),
        image_shape: set[0].input.shape().to_vec(),
        model_bytes: model_bytes(model_path)?,
    };
    let report_path = dir.join("report.json");
    let mut report = if report_path.exists() {
        BenchReport::load(&report_path)?
    } else {
        BenchReport::default()
    };
    report.rows.push(row);
    report.write(&dir)?;

    let record = RunRecord {
        command: Command::Infer.name().into(),
        mode: cfg.mode,
        config: cfg.clone(),
        inputs: vec![FileDigest::of(model_path)?],
        outputs,
        params_before: None,
        params_after: Some(g.param_count()),
        stages: vec![],
        extra: json!({ "window": infer.window, "overlap": infer.overlap, "metric": cfg.metric.kind.name(), "mean": accuracy }),
    };
    Manifest::append(&dir, record)?;
    Ok(report)
}

fn per_image(r: &EnergyReading, images: usize) -> EnergyReading {
    EnergyReading::new(r.backend, r.joules / images.max(1) as f64, r.samples)
}

/// Pruning sweep over criteria x ratios; writes sweep.csv, sweep.json and a
/// summary naming the recommended cell.
pub fn cmd_sweep(cfg: &RunConfig, out: Option<&Path>) -> Result<pruner::SweepResult> {
    cfg.validate(Command::Sweep)?;
    let dir = out_dir(cfg, out)?;
    let infer = cfg.infer.as_ref().expect("validated");
    let s = cfg.sweep.clone().unwrap_or_default();
    let model_path = cfg.model.as_ref().expect("validated");
    let g = Graph::load_model(model_path)?.fold_batchnorm().graph;
    let (_, set) = load_pairs(&infer.data)?;

    let train: Vec<(Tensor, Tensor)>;
    let ft_spec = match (&cfg.prune, s.finetune) {
        (Some(p), true) => {
            let (_, t) = load_pairs(p.train_data.as_ref().expect("validated"))?;
            train = t.into_iter().map(|p| (p.input, p.target)).collect();
            Some(FinetuneSpec {
                data: &train,
                loss: p.loss,
                cfg: p.finetune.clone().expect("validated"),
            })
        }
        _ => None,
    };
    let eval = |g: &Graph| evaluate(g, &set, infer, &cfg.metric).map_err(|e| pruner::PruneError::Eval(e.to_string()));
    let result = pruner::sweep(&g, eval, &s.criteria, &s.ratios, ft_spec.as_ref(), set[0].input.shape())?;

    fs::write(dir.join("sweep.csv"), result.to_csv())?;
    fs::write(dir.join("sweep.json"), serde_json::to_string_pretty(&result)?)?;
    fs::write(dir.join("summary.txt"), sweep_summary(&result, s.min_params_reduction, cfg.metric.kind))?;
    let record = RunRecord {
        command: Command::Sweep.name().into(),
        mode: cfg.mode,
        config: cfg.clone(),
        inputs: vec![FileDigest::of(model_path)?],
        outputs: vec![FileDigest::of(&dir.join("sweep.csv"))?],
        params_before: Some(result.baseline_params),
        params_after: None,
        stages: vec![],
        extra: json!({ "recommended": result.recommend(s.min_params_reduction) }),
    };
    Manifest::append(&dir, record)?;
    Ok(result)
}

fn sweep_summary(r: &pruner::SweepResult, floor: f64, metric: MetricKind) -> String {
    let mut s = format!(
        "baseline {} {:.4}, params {}, flops {}\n",
        metric.name(),
        r.baseline_accuracy,
        r.baseline_params,
        r.baseline_flops
    );
    match r.recommend(floor) {
        Some(best) => s.push_str(&format!(
            "recommended: {} at sparsity {} ({} {:.4}, drop {:.4}, params -{:.1}%)\n",
            best.criterion,
            best.ratio,
            metric.name(),
            best.accuracy,
            r.baseline_accuracy - best.accuracy,
            100.0 * (1.0 - best.params as f64 / r.baseline_params.max(1) as f64)
        )),
        None => s.push_str(&format!("no cell removes at least {:.0}% of parameters\n", floor * 100.0)),
    }
    s
}

/// Latency and energy per image for every configured model over the
/// inference dataset; writes report.{txt,csv,json}.
pub fn cmd_bench(cfg: &RunConfig, out: Option<&Path>) -> Result<BenchReport> {
    cfg.validate(Command::Bench)?;
    let dir = out_dir(cfg, out)?;
    let infer = cfg.infer.as_ref().expect("validated");
    let (runs, warmup) = cfg.bench.as_ref().map_or((5, 1), |b| (b.runs, b.warmup));
    let (spec, set) = load_pairs(&infer.data)?;
    let mut report = BenchReport::default();
    let mut inputs = Vec::new();
    for entry in cfg.bench_entries() {
        let g = Graph::load_model(&entry.model)?;
        let accuracy = evaluate(&g, &set, infer, &cfg.metric)?;
        let n = set.len();
        let mut next = 0;
        let (energy, latency) = bench::measure_energy(
            || {
                bench::time_run(
                    || {
                        let r = predict(&g, &set[next % n].input, infer).map(drop);
                        next += 1;
                        r
                    },
                    runs * n,
                    warmup * n,
                )
            },
            &cfg.energy,
        )?;
        report.rows.push(ReportRow {
            task: task_name(cfg, &spec),
            mode: entry.mode,
            latency: latency?,
            energy: per_image(&energy, (runs + warmup) * n),
            accuracy,
            accuracy_metric: cfg.metric.kind.name().into(),
            image_shape: set[0].input.shape().to_vec(),
            model_bytes: model_bytes(&entry.model)?,
        });
        inputs.push(FileDigest::of(&entry.model)?);
    }
    report.write(&dir)?;
    let record = RunRecord {
        command: Command::Bench.name().into(),
        mode: cfg.mode,
        config: cfg.clone(),
        inputs,
        outputs: vec![FileDigest::of(&dir.join("report.json"))?],
        params_before: None,
        params_after: None,
        stages: vec![],
        extra: json!({ "runs": runs, "warmup": warmup, "images": set.len() }),
    };
    Manifest::append(&dir, record)?;
    Ok(report)
}

/// Writes one phantom dataset per split below the output directory.
pub fn cmd_datagen(cfg: &RunConfig, out: Option<&Path>) -> Result<PathBuf> {
    cfg.validate(Command::Datagen)?;
    let dir = out_dir(cfg, out)?;
    let d = cfg.datagen.as_ref().expect("validated");
    let mut spec = PhantomSpec::default_for(d.task);
    if let Some(shape) = &d.shape {
        spec.shape = shape.clone();
    }
    if let Some(sigma) = d.noise_sigma {
        spec.noise_sigma = sigma;
    }
    spec.validate().map_err(|e| CliError::Config {
        path: "datagen".into(),
        message: e.to_string(),
    })?;
    let mut seed = cfg.seed;
    let mut outputs = Vec::new();
    for (split, &count) in &d.splits {
        let split_spec = spec.clone().with_seed(seed);
        let set = datagen::generate_set(&split_spec, count)?;
        let split_dir = dir.join(split);
        datagen::write_dataset(&split_dir, &split_spec, &set)?;
        let mut names: Vec<PathBuf> = fs::read_dir(&split_dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
        names.sort();
        for path in names {
            outputs.push(FileDigest::of(&path)?);
        }
        seed = seed.wrapping_add(count as u64);
    }
    let record = RunRecord {
        command: Command::Datagen.name().into(),
        mode: cfg.mode,
        config: cfg.clone(),
        inputs: vec![],
        outputs,
        params_before: None,
        params_after: None,
        stages: vec![],
        extra: json!({ "spec": spec }),
    };
    Manifest::append(&dir, record)?;
    Ok(dir)
}
