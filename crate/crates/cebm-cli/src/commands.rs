//! Command implementations behind the `cebm` binary. Each command returns
//! either success or a [`Failure`] carrying one of the documented exit
//! codes, so `main` stays a thin dispatcher.

use std::path::{Path, PathBuf};

use cebm_core::autodiff::TensorValue;
use cebm_core::dataio::{
    export_samples, gen_constant_images, gen_synthetic_opt, load_checkpoint, load_idx,
    save_checkpoint, write_csv, Checkpoint, Dataset, SyntheticOptions,
};
use cebm_core::eval::{
    auroc, collapse_metrics, encode_dataset, few_label_probe, knn_report, ood_scores,
    EncodedSet, PerClass, ScoreKind,
};
use cebm_core::model::Model;
use cebm_core::rng::{step_stream, Purpose};
use cebm_core::sampler::{sgld_run, SgldConfig};
use cebm_core::trainer::{train, TrainEvent};
use cebm_core::Error as CoreError;

use crate::config::{DataSource, MetricKind, OodKind, PerClassSpec, RunConfig};

/// Exit code partition shared with the binary's documentation.
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_DIVERGENCE: u8 = 4;
pub const EXIT_METRIC: u8 = 5;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub msg: String,
}

impl Failure {
    fn new(code: u8, msg: impl Into<String>) -> Self {
        Self {
            code,
            msg: msg.into(),
        }
    }

    fn config(msg: impl Into<String>) -> Self {
        Self::new(EXIT_CONFIG, msg)
    }

    fn data(msg: impl Into<String>) -> Self {
        Self::new(EXIT_DATA, msg)
    }
}

/// Map a library error onto the exit partition. Divergence and non-finite
/// failures are always exit 4 and payload/I/O failures exit 3; anything else
/// takes the phase's default code.
fn classify(e: &CoreError, default_code: u8) -> u8 {
    match e {
        CoreError::Divergence { .. } | CoreError::NonFinite { .. } => EXIT_DIVERGENCE,
        CoreError::Format { .. } | CoreError::Io(_) => EXIT_DATA,
        _ => default_code,
    }
}

fn fail_with(default_code: u8) -> impl Fn(CoreError) -> Failure {
    move |e| Failure::new(classify(&e, default_code), e.to_string())
}

fn read_config(path: &Path) -> Result<RunConfig, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::config(format!("cannot read config {}: {e}", path.display())))?;
    RunConfig::parse(&text)
        .map_err(|e| Failure::config(format!("config {}: {e}", path.display())))
}

fn ensure_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Failure::data(format!("cannot create {}: {e}", dir.display())))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    std::fs::write(path, bytes)
        .map_err(|e| Failure::data(format!("cannot write {}: {e}", path.display())))
}

/// Deterministic split streams: the train split draws from step 0 of the
/// data-order purpose, the eval split from step 1.
fn synthetic_split(cfg: &RunConfig, split: &str, step: u64, n_per_class: usize) -> Result<Dataset, Failure> {
    let opts = SyntheticOptions {
        num_classes: cfg.data.num_classes,
        noise_std: cfg.data.noise_std,
        jitter: cfg.data.jitter,
    };
    let mut rng = step_stream(cfg.seed, Purpose::DataOrder, step);
    let data = gen_synthetic_opt(cfg.data.kind, n_per_class, cfg.data.image_size, opts, &mut rng)
        .map_err(fail_with(EXIT_CONFIG))?;
    let idx: Vec<usize> = (0..data.len()).collect();
    data.subset(&idx, split).map_err(fail_with(EXIT_DATA))
}

fn load_split(cfg: &RunConfig, split: &str) -> Result<Dataset, Failure> {
    match cfg.data.source {
        DataSource::Synthetic => {
            let (step, n) = if split == "train" {
                (0, cfg.data.train_per_class)
            } else {
                (1, cfg.data.eval_per_class)
            };
            synthetic_split(cfg, split, step, n)
        }
        DataSource::Idx => {
            let (images, labels) = if split == "train" {
                (&cfg.data.train_images, &cfg.data.train_labels)
            } else {
                (&cfg.data.eval_images, &cfg.data.eval_labels)
            };
            let (images, labels) = match (images, labels) {
                (Some(i), Some(l)) => (i, l),
                _ => {
                    return Err(Failure::config(format!(
                        "data.{split}_images and data.{split}_labels are required for source = \"idx\""
                    )))
                }
            };
            let data = load_idx(images, labels, cfg.data.target_size)
                .map_err(fail_with(EXIT_DATA))?;
            let idx: Vec<usize> = (0..data.len()).collect();
            data.subset(&idx, split).map_err(fail_with(EXIT_DATA))
        }
    }
}

fn diagnostics_rows(rows: &[cebm_core::trainer::DiagRow]) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|r| {
            vec![
                r.step as f64,
                r.e_data,
                r.e_model,
                r.gap,
                r.grad_norm,
                r.buffer_occ as f64,
            ]
        })
        .collect()
}

const DIAG_HEADER: [&str; 6] = ["step", "e_data", "e_model", "gap", "grad_norm", "buffer_occ"];

pub fn cmd_train(config_path: &Path) -> Result<(), Failure> {
    let cfg = read_config(config_path)?;
    let out = cfg.out_dir();
    ensure_dir(&out)?;

    let echo = cfg.echo();
    let echo_path = out.join("config.echo.toml");
    write_bytes(&echo_path, echo.as_bytes())?;

    let data = load_split(&cfg, "train")?;
    let model = cfg
        .model
        .build(data.image_shape(), cfg.seed)
        .map_err(fail_with(EXIT_CONFIG))?;
    let train_cfg = cfg.to_train_config();

    println!(
        "training {} on {} ({} images, shape {:?}) for {} steps",
        model.kind_tag(),
        data.name(),
        data.len(),
        data.image_shape(),
        train_cfg.total_steps
    );

    let mut rows = Vec::new();
    let result = train(model, &data, &train_cfg, |event| {
        match event {
            TrainEvent::Diagnostics(row) => rows.push(row.clone()),
            TrainEvent::Checkpoint { model, step } => {
                let name = if step == train_cfg.total_steps {
                    "final.ckpt".to_string()
                } else {
                    format!("ckpt_{step:06}.ckpt")
                };
                let ckpt = Checkpoint::of_model(model, step, cfg.seed, echo.clone())?;
                save_checkpoint(out.join(name), &ckpt)?;
            }
        }
        Ok(())
    });

    // Diagnostics collected so far are written even when training aborts,
    // so divergent runs leave their trace behind.
    let diag_path = out.join("diagnostics.csv");
    write_csv(&diag_path, &DIAG_HEADER, &diagnostics_rows(&rows))
        .map_err(fail_with(EXIT_DATA))?;

    let outcome = result.map_err(fail_with(EXIT_CONFIG))?;

    if train_cfg.total_steps == 0 {
        let ckpt = Checkpoint::of_model(&outcome.model, 0, cfg.seed, echo.clone())
            .map_err(fail_with(EXIT_DATA))?;
        save_checkpoint(out.join("final.ckpt"), &ckpt).map_err(fail_with(EXIT_DATA))?;
    }

    if let Some(last) = outcome.diagnostics.last() {
        println!(
            "done: step {} gap {:+.4} e_data {:+.4} e_model {:+.4}",
            last.step, last.gap, last.e_data, last.e_model
        );
    } else {
        println!("done: no optimization steps requested");
    }
    println!("wrote {}", echo_path.display());
    println!("wrote {}", diag_path.display());
    println!("wrote {}", out.join("final.ckpt").display());
    Ok(())
}

pub fn cmd_sample(
    ckpt_path: &Path,
    steps: usize,
    count: usize,
    out_path: &Path,
) -> Result<(), Failure> {
    if count == 0 {
        return Err(Failure::config("--count must be at least 1"));
    }
    let ckpt = load_checkpoint(ckpt_path).map_err(fail_with(EXIT_DATA))?;
    let model = ckpt.instantiate().map_err(fail_with(EXIT_DATA))?;
    let shape = model.input_shape();

    let mut init_rng = step_stream(ckpt.seed, Purpose::Buffer, ckpt.step);
    let numel = count * shape[0] * shape[1] * shape[2];
    let pixels: Vec<f64> = (0..numel).map(|_| rand::Rng::gen::<f64>(&mut init_rng)).collect();
    let init = TensorValue::new(vec![count, shape[0], shape[1], shape[2]], pixels)
        .map_err(fail_with(EXIT_DATA))?;

    let sgld_cfg = SgldConfig {
        steps,
        ..SgldConfig::sampling()
    };
    sgld_cfg.validate().map_err(fail_with(EXIT_CONFIG))?;
    let mut chain_rng = step_stream(ckpt.seed, Purpose::Sgld, ckpt.step);
    let samples =
        sgld_run(&model, &init, &sgld_cfg, &mut chain_rng).map_err(fail_with(EXIT_DIVERGENCE))?;

    if let Some(parent) = out_path.parent() {
        if !parent.as_os_str().is_empty() {
            ensure_dir(parent)?;
        }
    }
    let grid_cols = (count as f64).sqrt().ceil() as usize;
    export_samples(out_path, &samples, grid_cols, ckpt.step, ckpt.seed)
        .map_err(fail_with(EXIT_DATA))?;
    println!(
        "wrote {} ({} samples, {} sgld steps, grid {} wide)",
        out_path.display(),
        count,
        steps,
        grid_cols
    );
    Ok(())
}

/// Flat pixel vectors as an encoded set, for the baseline the k-NN report
/// is compared against.
fn pixel_set(data: &Dataset) -> Result<EncodedSet, Failure> {
    let n = data.len();
    let dim: usize = data.image_shape().iter().product();
    let codes = data.images().data()[..n * dim].to_vec();
    EncodedSet::new(codes, dim, data.labels().to_vec(), data.num_classes(), "pixels")
        .map_err(fail_with(EXIT_DATA))
}

fn build_ood_dataset(cfg: &RunConfig, shape: [usize; 3]) -> Result<Dataset, Failure> {
    let ood = cfg.data.ood.as_ref().ok_or_else(|| {
        Failure::new(
            EXIT_METRIC,
            "metric ood requested but no [data.ood] section is configured",
        )
    })?;
    match ood.kind {
        OodKind::Constant => {
            let mut images = Vec::new();
            let mut n = 0;
            for &value in &ood.values {
                let d = gen_constant_images(ood.count_per_value, shape, value)
                    .map_err(fail_with(EXIT_CONFIG))?;
                images.extend_from_slice(d.images().data());
                n += d.len();
            }
            let tensor = TensorValue::new(vec![n, shape[0], shape[1], shape[2]], images)
                .map_err(fail_with(EXIT_DATA))?;
            Dataset::new("constants", "ood", tensor, vec![0; n], 1).map_err(fail_with(EXIT_DATA))
        }
        OodKind::Idx => {
            let (images, labels) = (
                ood.images.as_ref().expect("validated"),
                ood.labels.as_ref().expect("validated"),
            );
            load_idx(images, labels, cfg.data.target_size).map_err(fail_with(EXIT_DATA))
        }
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Failure::new(EXIT_METRIC, format!("json encode: {e}")))?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

fn finite_json(name: &str, v: f64) -> Result<serde_json::Value, Failure> {
    serde_json::Number::from_f64(v)
        .map(serde_json::Value::Number)
        .ok_or_else(|| Failure::new(EXIT_METRIC, format!("{name} is not finite: {v}")))
}

fn metric_knn(
    cfg: &RunConfig,
    out: &Path,
    eval_data: &Dataset,
    eval_codes: &EncodedSet,
) -> Result<Vec<PathBuf>, Failure> {
    let code_report = knn_report(eval_codes, cfg.eval.k).map_err(fail_with(EXIT_METRIC))?;
    let pixel_report =
        knn_report(&pixel_set(eval_data)?, cfg.eval.k).map_err(fail_with(EXIT_METRIC))?;

    let json_path = out.join("knn.json");
    write_json(
        &json_path,
        &serde_json::json!({
            "k": cfg.eval.k,
            "n": eval_codes.len(),
            "same_class_fraction": finite_json("same_class_fraction", code_report.same_class_fraction)?,
            "pixel_same_class_fraction": finite_json("pixel_same_class_fraction", pixel_report.same_class_fraction)?,
        }),
    )?;

    let l = eval_codes.num_classes();
    let header_owned: Vec<String> = std::iter::once("query_class".to_string())
        .chain((0..l).map(|c| format!("neighbor_class_{c}")))
        .collect();
    let header: Vec<&str> = header_owned.iter().map(String::as_str).collect();
    let rows: Vec<Vec<f64>> = code_report
        .confusion
        .iter()
        .enumerate()
        .map(|(c, row)| std::iter::once(c as f64).chain(row.iter().copied()).collect())
        .collect();
    let csv_path = out.join("knn_confusion.csv");
    write_csv(&csv_path, &header, &rows).map_err(fail_with(EXIT_DATA))?;
    Ok(vec![json_path, csv_path])
}

fn metric_ood(
    cfg: &RunConfig,
    out: &Path,
    model: &Model,
    eval_data: &Dataset,
) -> Result<Vec<PathBuf>, Failure> {
    let ood_data = build_ood_dataset(cfg, model.input_shape())?;
    let scores = ood_scores(model, eval_data, &ood_data, ScoreKind::LogDensity)
        .map_err(fail_with(EXIT_METRIC))?;
    let value = auroc(&scores.in_scores, &scores.out_scores).map_err(fail_with(EXIT_METRIC))?;
    let json_path = out.join("ood.json");
    write_json(
        &json_path,
        &serde_json::json!({
            "score_kind": "log_density",
            "auroc": finite_json("auroc", value)?,
            "n_in": scores.in_scores.len(),
            "n_out": scores.out_scores.len(),
            "out_source": ood_data.name(),
        }),
    )?;
    Ok(vec![json_path])
}

fn metric_fewlabel(
    cfg: &RunConfig,
    out: &Path,
    train_codes: &EncodedSet,
    eval_codes: &EncodedSet,
) -> Result<Vec<PathBuf>, Failure> {
    let mut entries = Vec::new();
    for &spec in &cfg.eval.per_class {
        let (per_class, label) = match spec {
            PerClassSpec::Count(n) => (PerClass::Count(n), serde_json::json!(n)),
            PerClassSpec::Full => (PerClass::Full, serde_json::json!("full")),
        };
        let report = few_label_probe(train_codes, eval_codes, per_class, cfg.eval.repeats, cfg.seed)
            .map_err(fail_with(EXIT_METRIC))?;
        entries.push(serde_json::json!({
            "per_class": label,
            "mean_accuracy": finite_json("mean_accuracy", report.mean_accuracy)?,
            "std_accuracy": finite_json("std_accuracy", report.std_accuracy)?,
        }));
    }
    let json_path = out.join("fewlabel.json");
    write_json(
        &json_path,
        &serde_json::json!({
            "repeats": cfg.eval.repeats,
            "seed": cfg.seed,
            "entries": entries,
        }),
    )?;
    Ok(vec![json_path])
}

fn metric_collapse(
    cfg: &RunConfig,
    out: &Path,
    model: &Model,
    eval_data: &Dataset,
) -> Result<Vec<PathBuf>, Failure> {
    let report = collapse_metrics(model, eval_data, cfg.eval.mc_batch, cfg.seed)
        .map_err(fail_with(EXIT_METRIC))?;
    let json_path = out.join("collapse.json");
    write_json(
        &json_path,
        &serde_json::json!({
            "n": eval_data.len(),
            "mc_batch": cfg.eval.mc_batch,
            "kl_aggregate_to_bias": finite_json("kl_aggregate_to_bias", report.kl_aggregate_to_bias)?,
            "mutual_information": finite_json("mutual_information", report.mutual_information)?,
        }),
    )?;
    Ok(vec![json_path])
}

pub fn cmd_eval(
    ckpt_path: &Path,
    config_path: &Path,
    metrics_cli: &[MetricKind],
) -> Result<(), Failure> {
    let cfg = read_config(config_path)?;
    let ckpt = load_checkpoint(ckpt_path).map_err(fail_with(EXIT_DATA))?;
    let model = ckpt.instantiate().map_err(fail_with(EXIT_DATA))?;

    let mut metrics: Vec<MetricKind> = if metrics_cli.is_empty() {
        cfg.eval.metrics.clone()
    } else {
        metrics_cli.to_vec()
    };
    metrics.dedup();
    if metrics.is_empty() {
        return Err(Failure::config("no metrics requested"));
    }

    let out = cfg.out_dir();
    ensure_dir(&out)?;

    let eval_data = load_split(&cfg, "eval")?;
    if eval_data.image_shape() != model.input_shape() {
        return Err(Failure::data(format!(
            "checkpoint expects {:?} images but the eval split has {:?}",
            model.input_shape(),
            eval_data.image_shape()
        )));
    }
    let needs_codes = metrics
        .iter()
        .any(|m| matches!(m, MetricKind::Knn | MetricKind::Fewlabel));
    let eval_codes = if needs_codes {
        Some(encode_dataset(&model, &eval_data).map_err(fail_with(EXIT_METRIC))?)
    } else {
        None
    };
    let train_codes = if metrics.contains(&MetricKind::Fewlabel) {
        let train_data = load_split(&cfg, "train")?;
        Some(encode_dataset(&model, &train_data).map_err(fail_with(EXIT_METRIC))?)
    } else {
        None
    };

    let mut failures: Vec<String> = Vec::new();
    for metric in &metrics {
        let result = match metric {
            MetricKind::Knn => metric_knn(&cfg, &out, &eval_data, eval_codes.as_ref().unwrap()),
            MetricKind::Ood => metric_ood(&cfg, &out, &model, &eval_data),
            MetricKind::Fewlabel => metric_fewlabel(
                &cfg,
                &out,
                train_codes.as_ref().unwrap(),
                eval_codes.as_ref().unwrap(),
            ),
            MetricKind::Collapse => metric_collapse(&cfg, &out, &model, &eval_data),
        };
        match result {
            Ok(paths) => {
                for p in paths {
                    println!("{}: wrote {}", metric.name(), p.display());
                }
            }
            Err(f) => failures.push(format!("{}: {}", metric.name(), f.msg)),
        }
    }

    if failures.is_empty() {
        Ok(())
    } else {
        Err(Failure::new(
            EXIT_METRIC,
            format!(
                "{} of {} metrics failed:\n  {}",
                failures.len(),
                metrics.len(),
                failures.join("\n  ")
            ),
        ))
    }
}
