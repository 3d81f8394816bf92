//! Command implementations: orchestrate the core harness and write
//! every declared artifact under the output directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use skidiag::config::ExperimentConfig;
use skidiag::error::{Error, Result};
use skidiag::harness::{
    self, aggregate, Aggregate, FailedRun, PretrainOutcome, Regime, RunReport,
};
use skidiag::locator::{self, LocatorMethod};
use skidiag::model::{load_checkpoint, save_checkpoint};
use skidiag::probes::{probe_sweep, ProbeData};
use skidiag::report::{self, plot::PlotKind, plot::PlotSpec, plot::Series};
use skidiag::rng::stream_seed;

use crate::{Cli, Command};

pub fn run(cli: &Cli) -> Result<()> {
    let config = load_config(cli)?;
    match &cli.command {
        Command::Pretrain { regime } => cmd_pretrain(cli, &config, regime),
        Command::Finetune { regime, strategy } => cmd_finetune(cli, &config, regime, strategy),
        Command::Locate { metrics, method, out } => cmd_locate(cli, &config, metrics, method.as_deref(), out.as_deref()),
        Command::Probe { checkpoint, out } => cmd_probe(cli, &config, checkpoint, out.as_deref()),
        Command::Aggregate { dir } => cmd_aggregate(cli, dir.as_deref()),
        Command::Plot { kind, input, out } => cmd_plot(kind, input, out),
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    Ok(cfg)
}

fn parse_regimes(filter: &str) -> Result<Vec<Regime>> {
    match filter {
        "all" => Ok(vec![Regime::Under, Regime::Over]),
        "under" => Ok(vec![Regime::Under]),
        "over" => Ok(vec![Regime::Over]),
        other => Err(Error::InvalidInput(format!(
            "unknown regime {other:?} (expected under, over, or all)"
        ))),
    }
}

fn checkpoint_path(out_dir: &Path, regime: Regime, seed: u64) -> PathBuf {
    out_dir.join(format!("checkpoint-{}-seed{}.ckpt", regime.as_str(), seed))
}

fn pretrain_meta(cfg: &ExperimentConfig, regime: Regime, seed: u64) -> BTreeMap<String, String> {
    let mut meta = cfg.meta.clone();
    meta.insert("seed".into(), seed.to_string());
    meta.insert("regime".into(), regime.as_str().into());
    meta.insert("rng".into(), "xoshiro256++ via named streams".into());
    meta.insert(
        "stream.pretrain".into(),
        stream_seed(seed, "pretrain.shuffle").to_string(),
    );
    meta
}

/// Serializable view of a pretraining outcome (losses plus held-out
/// source measurements).
#[derive(serde::Serialize)]
struct PretrainRecord<'a> {
    schema: &'static str,
    regime: &'a str,
    seed: u64,
    steps: usize,
    final_train_loss: Option<f64>,
    source_val_accuracy: f64,
    source_val_mean_max_softmax: f64,
    source_val_mean_loss: f64,
    entropy_per_layer: &'a [f64],
    min_entropy: f64,
    losses: &'a [f64],
}

fn write_pretrain_artifacts(
    cli: &Cli,
    cfg: &ExperimentConfig,
    out: &PretrainOutcome,
) -> Result<()> {
    let ckpt = checkpoint_path(&cli.out_dir, out.regime, out.seed);
    save_checkpoint(&out.state, &pretrain_meta(cfg, out.regime, out.seed), &ckpt)?;
    let record = PretrainRecord {
        schema: "skidiag.pretrain/1",
        regime: out.regime.as_str(),
        seed: out.seed,
        steps: out.losses.len(),
        final_train_loss: out.losses.last().copied(),
        source_val_accuracy: out.source_val.accuracy,
        source_val_mean_max_softmax: out.source_val.mean_max_softmax,
        source_val_mean_loss: out.source_val.mean_loss,
        entropy_per_layer: &out.entropy_per_layer,
        min_entropy: out.min_entropy,
        losses: &out.losses,
    };
    report::write_json(
        &cli.out_dir
            .join(format!("pretrain-{}-seed{}.json", out.regime.as_str(), out.seed)),
        &record,
    )?;
    println!(
        "pretrained {} seed {}: source val acc {:.4}, confidence {:.4} -> {}",
        out.regime.as_str(),
        out.seed,
        out.source_val.accuracy,
        out.source_val.mean_max_softmax,
        ckpt.display()
    );
    Ok(())
}

fn cmd_pretrain(cli: &Cli, cfg: &ExperimentConfig, regime_filter: &str) -> Result<()> {
    let regimes = parse_regimes(regime_filter)?;
    let exp = cfg.to_experiment();
    exp.validate()?;
    let task = harness::task::generate_task(&exp.task, &exp.sizes)?;
    for spec in exp.regimes.iter().filter(|r| regimes.contains(&r.regime)) {
        for &seed in &exp.seeds {
            let out = harness::pretrain(&exp.model, &task, spec, seed)?;
            write_pretrain_artifacts(cli, cfg, &out)?;
        }
    }
    Ok(())
}

fn cmd_finetune(
    cli: &Cli,
    cfg: &ExperimentConfig,
    regime_filter: &str,
    strategy_filter: &str,
) -> Result<()> {
    let regimes = parse_regimes(regime_filter)?;
    let exp = cfg.to_experiment();
    exp.validate()?;
    let strategies: Vec<_> = exp
        .strategies
        .iter()
        .filter(|s| strategy_filter == "all" || s.kind.as_str() == strategy_filter)
        .cloned()
        .collect();
    if strategies.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no configured strategy matches {strategy_filter:?}"
        )));
    }
    let task = harness::task::generate_task(&exp.task, &exp.sizes)?;
    let mut reports = Vec::new();
    let mut failed = Vec::new();
    for &regime in &regimes {
        for &seed in &exp.seeds {
            let ckpt = checkpoint_path(&cli.out_dir, regime, seed);
            if !ckpt.exists() {
                return Err(Error::InvalidState(format!(
                    "missing checkpoint {}; run `skidiag pretrain` first",
                    ckpt.display()
                )));
            }
            let (state, _meta) = load_checkpoint(&ckpt)?;
            for strategy in &strategies {
                match harness::finetune(&state, &task, strategy, &exp.locator, &exp.diag, seed) {
                    Ok(mut report) => {
                        report.regime = Some(regime);
                        write_run_artifacts(cli, &report)?;
                        reports.push(report);
                    }
                    Err(e) => {
                        eprintln!(
                            "run failed: {} {} seed {}: {e}",
                            regime.as_str(),
                            strategy.kind.as_str(),
                            seed
                        );
                        failed.push(FailedRun {
                            regime,
                            strategy: strategy.kind,
                            seed,
                            error: e.to_string(),
                        });
                    }
                }
            }
        }
    }
    if reports.is_empty() {
        return Err(Error::RunFailure("every fine-tuning run failed".into()));
    }
    let agg = aggregate(&reports, failed);
    report::write_json(&cli.out_dir.join("summary.json"), &agg)?;
    print!("{}", report::aggregate_table(&agg));
    Ok(())
}

fn run_slug(report: &RunReport) -> String {
    format!(
        "{}-{}-seed{}",
        report.regime.map_or("none", |r| r.as_str()),
        report.strategy.kind.as_str(),
        report.seed
    )
}

fn write_run_artifacts(cli: &Cli, report: &RunReport) -> Result<()> {
    let slug = run_slug(report);
    report::write_json(&cli.out_dir.join(format!("run-{slug}.json")), report)?;
    report::write_text(
        &cli.out_dir.join(format!("metrics-{slug}.csv")),
        &report::metrics_csv(&report.diagnostics),
    )?;
    report::write_text(
        &cli.out_dir.join(format!("probes-{slug}.csv")),
        &report::probe_csv(&report.probe),
    )?;
    report::write_json(
        &cli.out_dir.join(format!("locator-{slug}.json")),
        &report.locator,
    )?;
    println!(
        "run {slug}: final target accuracy {:.4}, {} trainable params, band {:?}",
        report.final_val_accuracy, report.trainable_params, report.locator.band
    );
    Ok(())
}

fn cmd_locate(
    cli: &Cli,
    cfg: &ExperimentConfig,
    metrics: &Path,
    method: Option<&str>,
    out: Option<&Path>,
) -> Result<()> {
    let text = std::fs::read_to_string(metrics)
        .map_err(|e| Error::Io(format!("cannot read {}: {e}", metrics.display())))?;
    let log = report::parse_metrics_csv(&text)?;
    let mut lcfg = cfg.locator.clone();
    if let Some(m) = method {
        lcfg.method = match m {
            "greedy" => LocatorMethod::Greedy,
            "ski-maxima" => LocatorMethod::SkiMaxima,
            other => {
                return Err(Error::InvalidInput(format!(
                    "unknown method {other:?} (expected greedy or ski-maxima)"
                )))
            }
        };
    }
    let h = log.mean_entropy();
    let g = log.mean_activation_grad();
    let result = locator::locate(&h, &g, &lcfg)?;
    let band: Vec<String> = result.band.iter().map(|l| l.to_string()).collect();
    println!("band {{{}}}", band.join(","));
    let path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cli.out_dir.join("locate.json"));
    report::write_json(&path, &result)?;
    Ok(())
}

fn cmd_probe(cli: &Cli, cfg: &ExperimentConfig, checkpoint: &Path, out: Option<&Path>) -> Result<()> {
    let (state, _meta) = load_checkpoint(checkpoint)?;
    let exp = cfg.to_experiment();
    let task = harness::task::generate_task(&exp.task, &exp.sizes)?;
    let probe_train = exp.diag.probe_train.min(task.target_train.len());
    let probe_val = exp.diag.probe_val.min(task.target_val.len());
    let seed = cli.seed.or_else(|| exp.seeds.first().copied()).unwrap_or(42);
    let report_data = probe_sweep(
        &state,
        &ProbeData {
            train_tokens: &task.target_train.tokens[..probe_train],
            train_labels: &task.target_train.labels[..probe_train],
            val_tokens: &task.target_val.tokens[..probe_val],
            val_labels: &task.target_val.labels[..probe_val],
        },
        exp.diag.probe_hidden.unwrap_or(exp.model.d_model),
        stream_seed(seed, "probes"),
    )?;
    let path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cli.out_dir.join("probes.csv"));
    report::write_text(&path, &report::probe_csv(&report_data))?;
    for (layer, (lin, mlp)) in report_data
        .linear
        .iter()
        .zip(report_data.mlp.iter())
        .enumerate()
    {
        println!("layer {layer}: linear {lin:.4} mlp {mlp:.4}");
    }
    Ok(())
}

fn cmd_aggregate(cli: &Cli, dir: Option<&Path>) -> Result<()> {
    let dir = dir.unwrap_or(&cli.out_dir);
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::Io(format!("cannot read {}: {e}", dir.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .map(|n| n.starts_with("run-") && n.ends_with(".json"))
                .unwrap_or(false)
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::InvalidState(format!(
            "no run-*.json reports in {}",
            dir.display()
        )));
    }
    let reports: Vec<RunReport> = paths
        .iter()
        .map(|p| report::read_run_report(p))
        .collect::<Result<_>>()?;
    let agg = aggregate(&reports, Vec::new());
    report::write_json(&cli.out_dir.join("summary.json"), &agg)?;
    print!("{}", report::aggregate_table(&agg));
    Ok(())
}

fn series_label(report: &RunReport) -> String {
    run_slug(report)
}

fn cmd_plot(kind: &str, inputs: &[PathBuf], out: &Path) -> Result<()> {
    let kind = PlotKind::parse(kind)?;
    let mut series = Vec::new();
    let mut meta = String::new();
    if kind == PlotKind::AccuracyVsParams {
        // expects one aggregate summary
        let text = std::fs::read_to_string(&inputs[0])
            .map_err(|e| Error::Io(format!("cannot read {}: {e}", inputs[0].display())))?;
        let agg: Aggregate = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("summary decode: {e}")))?;
        for cell in &agg.cells {
            series.push(Series {
                label: format!("{}/{}", cell.strategy.as_str(), cell.regime.as_str()),
                values: vec![cell.trainable_params as f64, cell.accuracy_mean],
            });
        }
        meta = format!("seeds={:?}", agg.seeds);
    } else {
        for path in inputs {
            let report = report::read_run_report(path)?;
            let label = series_label(&report);
            match kind {
                PlotKind::EntropyByLayer => series.push(Series {
                    label,
                    values: report.diagnostics.mean_entropy(),
                }),
                PlotKind::ActgradByLayer => series.push(Series {
                    label,
                    values: report.diagnostics.mean_activation_grad(),
                }),
                PlotKind::ParamgradByLayer => series.push(Series {
                    label,
                    values: report.diagnostics.mean_param_grad(),
                }),
                PlotKind::DeltackaByLayer => series.push(Series {
                    label,
                    values: report.delta_cka.clone(),
                }),
                PlotKind::ProbeAccuracyByLayer => {
                    series.push(Series {
                        label: format!("{label}-linear"),
                        values: report.probe.linear.clone(),
                    });
                    series.push(Series {
                        label: format!("{label}-mlp"),
                        values: report.probe.mlp.clone(),
                    });
                }
                PlotKind::AccuracyVsParams => unreachable!(),
            }
            if meta.is_empty() {
                meta = format!("seed={}", report.seed);
            }
        }
    }
    let spec = PlotSpec {
        kind,
        title: format!("{}", plot_title(kind)),
        series,
        meta,
    };
    skidiag::report::plot::render_plot(&spec, out)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn plot_title(kind: PlotKind) -> &'static str {
    match kind {
        PlotKind::EntropyByLayer => "attention entropy by layer",
        PlotKind::ActgradByLayer => "activation gradient norm by layer",
        PlotKind::ParamgradByLayer => "parameter gradient norm by layer",
        PlotKind::DeltackaByLayer => "delta CKA by layer",
        PlotKind::ProbeAccuracyByLayer => "probe accuracy by layer",
        PlotKind::AccuracyVsParams => "accuracy vs trainable parameters",
    }
}
