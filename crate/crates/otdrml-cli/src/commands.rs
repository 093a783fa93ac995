//! Subcommand implementations. Every artifact-producing command writes a
//! `run_manifest.json` recording the resolved configuration, input
//! checksums, output paths, tool version, and wall-clock time, so a run is
//! reproducible from its manifest alone.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::json;

use otdrml::dataset::{build_dataset, build_eval_variant, Dataset, DatasetVariant};
use otdrml::detectors::{mc_matched_filter_pd, optimum_bound_pd};
use otdrml::error::{OtdrError, Result};
use otdrml::eval::{
    compare_detectors, render_fig4, render_fig5, render_fig6, render_fig7, render_fig8,
    sweep_detection, sweep_localization, sweep_reflectance, P_FA_LEVELS,
};
use otdrml::model::{ModelConfig, ModelConfigPatch, TrainRunManifest};
use otdrml::nn::Adam;
use otdrml::sim::{build_pulse_template, simulate_batch, ConfigFormat, SimConfig, SimConfigPatch};
use otdrml::util::{derive_seed, sha256_file};
use otdrml::MultiTaskNet;

use crate::{
    BoundArgs, DatasetBuildArgs, DatasetVariantsArgs, EvalCommonArgs, EvalCompareArgs,
    EvalDetectArgs, Lambda, SimulateArgs, TrainArgs,
};

#[derive(Serialize)]
struct RunManifest {
    tool_version: &'static str,
    subcommand: &'static str,
    config: serde_json::Value,
    /// Input path → SHA-256 checksum.
    inputs: BTreeMap<String, String>,
    /// Paths written, relative to the output target.
    outputs: Vec<String>,
    wall_clock_s: f64,
}

fn write_run_manifest(
    path: &Path,
    subcommand: &'static str,
    config: serde_json::Value,
    inputs: &[&Path],
    outputs: &[String],
    t0: Instant,
) -> Result<()> {
    let mut checksums = BTreeMap::new();
    for p in inputs {
        checksums.insert(p.display().to_string(), sha256_file(p)?);
    }
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION"),
        subcommand,
        config,
        inputs: checksums,
        outputs: outputs.to_vec(),
        wall_clock_s: t0.elapsed().as_secs_f64(),
    };
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| OtdrError::Format(format!("encoding run manifest: {e}")))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn config_format(path: &Path) -> Result<ConfigFormat> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("toml") => Ok(ConfigFormat::Toml),
        Some("json") => Ok(ConfigFormat::Json),
        _ => Err(OtdrError::Format(format!(
            "config file {} must end in .toml or .json",
            path.display()
        ))),
    }
}

/// Defaults ← config file ← flags, then validate.
fn resolve_sim_config(config: Option<&Path>, seed: Option<u64>) -> Result<SimConfig> {
    let mut patch = match config {
        Some(path) => SimConfigPatch::parse(&fs::read_to_string(path)?, config_format(path)?)?,
        None => SimConfigPatch::default(),
    };
    if let Some(s) = seed {
        patch.rng_seed = Some(s);
    }
    patch.resolve()
}

fn config_json<T: Serialize>(value: &T) -> Result<serde_json::Value> {
    serde_json::to_value(value).map_err(|e| OtdrError::Format(format!("encoding config: {e}")))
}

fn input_list(config: Option<&PathBuf>, rest: &[&Path]) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = config.into_iter().cloned().collect();
    v.extend(rest.iter().map(|p| p.to_path_buf()));
    v
}

fn range_stats<I: Iterator<Item = f64>>(values: I) -> serde_json::Value {
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    let mut sum = 0.0;
    let mut n = 0u64;
    for v in values {
        min = min.min(v);
        max = max.max(v);
        sum += v;
        n += 1;
    }
    if n == 0 {
        json!(null)
    } else {
        json!({ "min": min, "mean": sum / n as f64, "max": max })
    }
}

pub(crate) fn simulate(args: SimulateArgs) -> Result<()> {
    let t0 = Instant::now();
    let cfg = resolve_sim_config(args.config.as_deref(), args.seed)?;
    let traces = simulate_batch(&cfg, args.traces)?;
    fs::create_dir_all(&args.out)?;

    let mut csv = String::from(
        "trace_id,seed,snr_db,reflectance_db,event_position_m,event_position_idx,event_start_idx\n",
    );
    for (i, t) in traces.iter().enumerate() {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            i,
            t.seed,
            t.snr_db,
            t.reflectance_db,
            t.event_position_m,
            t.event_position_idx,
            t.event_start_idx,
        ));
    }
    fs::write(args.out.join("traces.csv"), csv)?;

    let mut outputs = vec!["traces.csv".to_string(), "summary.json".to_string()];
    for (i, t) in traces.iter().take(args.dump).enumerate() {
        let mut dump = String::from("sample_idx,distance_m,power\n");
        for (k, v) in t.samples.iter().enumerate() {
            dump.push_str(&format!("{},{},{}\n", k, k as f64 * cfg.sample_spacing_m, v));
        }
        let name = format!("trace_{i}.csv");
        fs::write(args.out.join(&name), dump)?;
        outputs.push(name);
    }

    let summary = json!({
        "n_traces": traces.len(),
        "trace_len_samples": cfg.trace_len_samples,
        "sample_spacing_m": cfg.sample_spacing_m,
        "snr_db": range_stats(traces.iter().map(|t| t.snr_db)),
        "reflectance_db": range_stats(traces.iter().map(|t| t.reflectance_db)),
    });
    let summary_text = serde_json::to_string_pretty(&summary)
        .map_err(|e| OtdrError::Format(format!("encoding summary: {e}")))?;
    fs::write(args.out.join("summary.json"), summary_text + "\n")?;

    outputs.push("run_manifest.json".into());
    let inputs = input_list(args.config.as_ref(), &[]);
    write_run_manifest(
        &args.out.join("run_manifest.json"),
        "simulate",
        config_json(&cfg)?,
        &inputs.iter().map(PathBuf::as_path).collect::<Vec<_>>(),
        &outputs,
        t0,
    )?;
    println!("simulated {} traces into {}", traces.len(), args.out.display());
    Ok(())
}

pub(crate) fn dataset_build(args: DatasetBuildArgs) -> Result<()> {
    let t0 = Instant::now();
    let cfg = resolve_sim_config(args.config.as_deref(), args.seed)?;
    let ds = build_dataset(&cfg, args.traces)?;
    ds.save(&args.out)?;

    let outputs = vec![
        "manifest.json".to_string(),
        "sequences.bin".to_string(),
        "split.csv".to_string(),
        "run_manifest.json".to_string(),
    ];
    let inputs = input_list(args.config.as_ref(), &[]);
    write_run_manifest(
        &args.out.join("run_manifest.json"),
        "dataset build",
        config_json(&cfg)?,
        &inputs.iter().map(PathBuf::as_path).collect::<Vec<_>>(),
        &outputs,
        t0,
    )?;
    let m = &ds.manifest;
    println!(
        "built {} sequences ({} positive / {} negative; splits {}/{}/{}) into {}",
        m.n_sequences,
        m.n_positive,
        m.n_negative,
        m.split_sizes.train,
        m.split_sizes.val,
        m.split_sizes.test,
        args.out.display(),
    );
    Ok(())
}

pub(crate) fn dataset_variants(args: DatasetVariantsArgs) -> Result<()> {
    let t0 = Instant::now();
    let cfg = resolve_sim_config(args.config.as_deref(), args.seed)?;
    let kinds: Vec<DatasetVariant> = match args.kind.as_str() {
        "all" => vec![DatasetVariant::Whole, DatasetVariant::Partial, DatasetVariant::Mixed],
        k => vec![k.parse()?],
    };

    let mut outputs = Vec::new();
    for &kind in &kinds {
        let ds = build_eval_variant(&cfg, args.traces, kind)?;
        let dir = args.out.join(kind.as_str());
        ds.save(&dir)?;
        outputs.push(format!("{}/", kind.as_str()));
        println!(
            "built {} variant: {} sequences into {}",
            kind.as_str(),
            ds.manifest.n_sequences,
            dir.display(),
        );
    }

    outputs.push("run_manifest.json".into());
    let inputs = input_list(args.config.as_ref(), &[]);
    write_run_manifest(
        &args.out.join("run_manifest.json"),
        "dataset variants",
        config_json(&cfg)?,
        &inputs.iter().map(PathBuf::as_path).collect::<Vec<_>>(),
        &outputs,
        t0,
    )?;
    Ok(())
}

pub(crate) fn train(args: TrainArgs) -> Result<()> {
    let t0 = Instant::now();
    let ds = Dataset::load(&args.dataset)?;

    let mut patch = match &args.config {
        Some(path) => ModelConfigPatch::parse(&fs::read_to_string(path)?, config_format(path)?)?,
        None => ModelConfigPatch::default(),
    };
    if let Some(v) = args.lr {
        patch.lr = Some(v);
    }
    if let Some(v) = args.batch {
        patch.batch_size = Some(v);
    }
    if let Some(v) = args.epochs {
        patch.max_epochs = Some(v);
    }
    if let Some(Lambda(w)) = args.lambda {
        patch.loss_weights = Some(w);
    }
    if let Some(v) = args.seed {
        patch.seed = Some(v);
    }
    let cfg = patch.apply(&ModelConfig::default())?;

    let (net, history) = otdrml::model::train_with_progress(&ds, &cfg, |e| {
        eprintln!(
            "epoch {:>3}  lr {:.2e}  train {:.6}  val {:.6}",
            e.epoch, e.lr, e.train_total, e.val_total,
        );
    })?;
    fs::create_dir_all(&args.out)?;
    let ckpt = args.out.join("model.ckpt");
    // The checkpoint's optimizer state is fresh: training restores the
    // best-validation weights, for which the final Adam moments do not
    // correspond anyway.
    net.save_checkpoint(&ckpt, &Adam::new(net.n_params(), cfg.lr))?;
    history.save_csv(&args.out.join("history.csv"))?;
    TrainRunManifest {
        model: cfg.clone(),
        dataset_sha256: ds.manifest.sequences_sha256.clone(),
        best_epoch: history.best_epoch,
        best_val_total: history.best_val_total,
    }
    .save(&args.out.join("model_manifest.json"))?;

    let outputs = vec![
        "model.ckpt".to_string(),
        "history.csv".to_string(),
        "model_manifest.json".to_string(),
        "run_manifest.json".to_string(),
    ];
    let seq_file = args.dataset.join("sequences.bin");
    let inputs = input_list(args.config.as_ref(), &[&seq_file]);
    write_run_manifest(
        &args.out.join("run_manifest.json"),
        "train",
        config_json(&cfg)?,
        &inputs.iter().map(PathBuf::as_path).collect::<Vec<_>>(),
        &outputs,
        t0,
    )?;
    println!(
        "trained {} epochs (best epoch {}, val loss {:.6}); checkpoint at {}",
        history.epochs.len(),
        history.best_epoch,
        history.best_val_total,
        ckpt.display(),
    );
    Ok(())
}

fn load_net(path: &Path) -> Result<MultiTaskNet> {
    Ok(MultiTaskNet::load_checkpoint(path)?.0)
}

pub(crate) fn eval_detect(args: EvalDetectArgs) -> Result<()> {
    let t0 = Instant::now();
    let net = load_net(&args.model)?;
    let ds = Dataset::load(&args.dataset)?;
    let levels: Vec<f64> = match args.pfa {
        Some(p) => vec![p],
        None => P_FA_LEVELS.to_vec(),
    };
    let (report, raw) = sweep_detection(&net, &ds, &levels)?;

    fs::create_dir_all(&args.out)?;
    report.save_csv(&args.out.join("report.csv"))?;
    raw.save(&args.out.join("raw_scores.bin"))?;
    render_fig4(&report, ds.manifest.variant.as_str(), &args.out.join("fig4_pd_vs_snr.svg"))?;

    let outputs = vec![
        "report.csv".to_string(),
        "raw_scores.bin".to_string(),
        "fig4_pd_vs_snr.svg".to_string(),
        "run_manifest.json".to_string(),
    ];
    let seq_file = args.dataset.join("sequences.bin");
    let inputs = [args.model.as_path(), seq_file.as_path()];
    write_run_manifest(
        &args.out.join("run_manifest.json"),
        "eval detect",
        json!({ "p_fa_levels": levels }),
        &inputs,
        &outputs,
        t0,
    )?;
    println!(
        "wrote detection report ({} rows) to {}",
        report.rows.len(),
        args.out.display(),
    );
    Ok(())
}

pub(crate) fn eval_localize(args: EvalCommonArgs) -> Result<()> {
    let t0 = Instant::now();
    let net = load_net(&args.model)?;

    let mut datasets = Vec::new();
    let mut seq_files = Vec::new();
    for name in ["whole", "partial", "mixed"] {
        let dir = args.dataset.join(name);
        if dir.is_dir() {
            datasets.push(Dataset::load(&dir)?);
            seq_files.push(dir.join("sequences.bin"));
        }
    }
    if datasets.is_empty() {
        return Err(OtdrError::Data(format!(
            "no variant subdirectories (whole/partial/mixed) under {}; \
             build them with `dataset variants`",
            args.dataset.display()
        )));
    }

    let refs: Vec<&Dataset> = datasets.iter().collect();
    let (report, raws) = sweep_localization(&net, &refs, args.pfa)?;

    fs::create_dir_all(&args.out)?;
    report.save_csv(&args.out.join("report.csv"))?;
    let mut outputs = vec!["report.csv".to_string()];
    for raw in &raws {
        let name = format!("raw_scores_{}.bin", raw.dataset_variant);
        raw.save(&args.out.join(&name))?;
        outputs.push(name);
    }
    render_fig5(&report, args.pfa, &args.out.join("fig5_pos_rmse.svg"))?;
    outputs.push("fig5_pos_rmse.svg".into());
    outputs.push("run_manifest.json".into());

    let mut inputs = vec![args.model.clone()];
    inputs.extend(seq_files);
    write_run_manifest(
        &args.out.join("run_manifest.json"),
        "eval localize",
        json!({ "p_fa": args.pfa }),
        &inputs.iter().map(PathBuf::as_path).collect::<Vec<_>>(),
        &outputs,
        t0,
    )?;
    println!(
        "wrote localization report over {} variant(s) to {}",
        raws.len(),
        args.out.display(),
    );
    Ok(())
}

pub(crate) fn eval_reflectance(args: EvalCommonArgs) -> Result<()> {
    let t0 = Instant::now();
    let net = load_net(&args.model)?;
    let ds = Dataset::load(&args.dataset)?;
    let (report, raw) = sweep_reflectance(&net, &ds, args.pfa)?;

    fs::create_dir_all(&args.out)?;
    report.save_csv(&args.out.join("report.csv"))?;
    raw.save(&args.out.join("raw_scores.bin"))?;
    render_fig6(
        &report,
        ds.manifest.variant.as_str(),
        args.pfa,
        &args.out.join("fig6_refl_rmse.svg"),
    )?;

    let outputs = vec![
        "report.csv".to_string(),
        "raw_scores.bin".to_string(),
        "fig6_refl_rmse.svg".to_string(),
        "run_manifest.json".to_string(),
    ];
    let seq_file = args.dataset.join("sequences.bin");
    let inputs = [args.model.as_path(), seq_file.as_path()];
    write_run_manifest(
        &args.out.join("run_manifest.json"),
        "eval reflectance",
        json!({ "p_fa": args.pfa }),
        &inputs,
        &outputs,
        t0,
    )?;
    println!("wrote reflectance report to {}", args.out.display());
    Ok(())
}

pub(crate) fn eval_compare(args: EvalCompareArgs) -> Result<()> {
    let t0 = Instant::now();
    let net = load_net(&args.model)?;
    let ds = Dataset::load(&args.dataset)?;
    if ds.manifest.variant != DatasetVariant::Whole {
        return Err(OtdrError::Data(format!(
            "compare expects a whole-variant dataset, got '{}'; \
             build one with `dataset variants --kind whole`",
            ds.manifest.variant.as_str()
        )));
    }
    let template = build_pulse_template(&ds.manifest.sim)?;
    let seed = args.seed.unwrap_or(ds.manifest.sim.rng_seed);
    let (report, raws) = compare_detectors(&net, &template, &ds, args.pfa, args.mc_trials, seed)?;

    fs::create_dir_all(&args.out)?;
    report.save_csv(&args.out.join("report.csv"))?;
    let mut outputs = vec!["report.csv".to_string()];
    for raw in &raws {
        let name = format!("raw_scores_{}.bin", raw.detector_name);
        raw.save(&args.out.join(&name))?;
        outputs.push(name);
    }
    render_fig7(&report, "whole", args.pfa, &args.out.join("fig7_detector_comparison.svg"))?;
    render_fig8(&report, "whole", args.pfa, &args.out.join("fig8_position_comparison.svg"))?;
    outputs.push("fig7_detector_comparison.svg".into());
    outputs.push("fig8_position_comparison.svg".into());
    outputs.push("run_manifest.json".into());

    let seq_file = args.dataset.join("sequences.bin");
    let inputs = [args.model.as_path(), seq_file.as_path()];
    write_run_manifest(
        &args.out.join("run_manifest.json"),
        "eval compare",
        json!({ "p_fa": args.pfa, "mc_trials": args.mc_trials, "seed": seed }),
        &inputs,
        &outputs,
        t0,
    )?;
    println!(
        "wrote detector comparison ({} rows) to {}",
        report.rows.len(),
        args.out.display(),
    );
    Ok(())
}

pub(crate) fn bound(args: BoundArgs) -> Result<()> {
    let t0 = Instant::now();
    let cfg = resolve_sim_config(args.config.as_deref(), None)?;
    let template = build_pulse_template(&cfg)?;
    let grid = args.snr.values();

    let mut csv = String::from("snr_db,p_fa,delta,p_d,p_d_mc_matched_filter\n");
    for (i, &snr_db) in grid.iter().enumerate() {
        let b = optimum_bound_pd(snr_db, args.pfa)?;
        let mc = mc_matched_filter_pd(
            &template,
            snr_db,
            args.pfa,
            args.mc_trials,
            derive_seed(args.seed, &[0xB0, i as u64]),
        )?;
        csv.push_str(&format!("{},{},{},{},{}\n", b.snr_db, b.p_fa, b.delta, b.p_d, mc));
    }

    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(&args.out, csv)?;

    let manifest_path = args.out.with_extension("manifest.json");
    let out_name = args
        .out
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| args.out.display().to_string());
    let inputs = input_list(args.config.as_ref(), &[]);
    write_run_manifest(
        &manifest_path,
        "bound",
        json!({
            "p_fa": args.pfa,
            "snr_lo": args.snr.lo,
            "snr_hi": args.snr.hi,
            "snr_step": args.snr.step,
            "mc_trials": args.mc_trials,
            "seed": args.seed,
            "sim": config_json(&cfg)?,
        }),
        &inputs.iter().map(PathBuf::as_path).collect::<Vec<_>>(),
        &[out_name],
        t0,
    )?;
    println!("wrote {} bound points to {}", grid.len(), args.out.display());
    Ok(())
}
