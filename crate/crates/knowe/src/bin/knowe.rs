//! Command-line front end: run experiments, sweep the ablation grid, run the
//! analysis suite, and generate or export feature files.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use knowe::analysis;
use knowe::checkpoint::save_checkpoint;
use knowe::config::RunConfig;
use knowe::data::{save_feature_file, LabeledDataset, Sample};
use knowe::error::{Error, Result};
use knowe::protocol::{run_base_session, run_experiment, RunFlags};
use knowe::report;
use knowe::rng::{derive_seed, RunRng};

#[derive(Parser)]
#[command(name = "knowe", version, about = "Coarse-to-fine incremental learning laboratory")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct CommonArgs {
    /// JSON config file; overrides the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config value.
    #[arg(long)]
    seed: Option<u64>,
    /// Built-in starting point when no config file is given.
    #[arg(long, default_value = "desk", value_parser = ["paper", "desk"])]
    preset: String,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Comma-separated key=value run-flag overrides
    /// (e.g. "normalize_weights=false,mode=ft_baseline").
    #[arg(long)]
    flags: Option<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one experiment and write sessions.csv, summary.json,
    /// confusion_t{t}.csv, norms.csv, and a model checkpoint.
    Run(CommonArgs),
    /// Run the 8-combination flag grid and write ablation.csv and
    /// conjectures.json.
    Ablate(CommonArgs),
    /// Run the stability/plasticity/weight-growth analyses and write
    /// stability.csv, plasticity.csv, norm_trace.csv.
    Analyze(CommonArgs),
    /// Generate the configured synthetic dataset as a feature CSV.
    GenData(CommonArgs),
    /// Train the base embedding and export trunk features as a feature CSV.
    ExportFeatures(CommonArgs),
}

fn resolve_config(args: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::preset(&args.preset)?,
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(spec) = &args.flags {
        cfg.apply_flag_overrides(spec)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_run(args: &CommonArgs) -> Result<()> {
    let cfg = resolve_config(args)?;
    let stream = cfg.build_stream()?;
    let res = run_experiment(
        &stream,
        cfg.flags,
        &cfg.net,
        &cfg.base_opt,
        &cfg.session_opt,
        cfg.seed,
        None,
    )?;
    report::write_sessions_csv(&args.out, &res.reports)?;
    report::write_summary_json(&args.out, &res.summary, &res.reports)?;
    report::write_confusion_csvs(&args.out, &res.reports)?;
    report::write_norms_csv(&args.out, &res.reports)?;
    save_checkpoint(&args.out.join("model.knwe"), &res.model, cfg.seed)?;
    println!(
        "run complete: {} sessions, A_bar = {:.4}, F = {}",
        stream.sessions,
        res.summary.a_bar,
        res.summary
            .f
            .map_or("NA".into(), |f| format!("{f:.4}"))
    );
    println!("reports written to {}", args.out.display());
    Ok(())
}

fn cmd_ablate(args: &CommonArgs) -> Result<()> {
    let cfg = resolve_config(args)?;
    let stream = cfg.build_stream()?;
    let seeds: Vec<u64> = (0..cfg.analysis.seeds as u64).map(|i| cfg.seed + i).collect();
    let outcome = analysis::ablation_grid(
        &stream,
        &cfg.net,
        &cfg.base_opt,
        &cfg.session_opt,
        &seeds,
        cfg.analysis.eps_points,
    )?;
    report::write_ablation_csv(&args.out, &outcome)?;
    report::write_conjectures_json(&args.out, &outcome)?;
    println!(
        "ablation complete: {} cells; c2={} c3={} c4={} biconditional={}",
        outcome.cells.len(),
        outcome.c2,
        outcome.c3,
        outcome.c4,
        outcome.biconditional
    );
    Ok(())
}

fn cmd_analyze(args: &CommonArgs) -> Result<()> {
    let cfg = resolve_config(args)?;
    let stream = cfg.build_stream()?;
    let seeds: Vec<u64> = (0..cfg.analysis.seeds as u64).map(|i| cfg.seed + i).collect();

    let stability = analysis::compare_variants(
        &stream,
        &cfg.net,
        &cfg.base_opt,
        &cfg.session_opt,
        &seeds,
    )?;
    report::write_stability_csv(&args.out, &stability)?;

    // Descent probe over random normalized heads and batches at desk scale.
    let mut trials = Vec::with_capacity(100);
    for trial in 0..100u64 {
        let mut rng = RunRng::new(derive_seed(cfg.seed, &format!("plasticity-{trial}")));
        use rand::Rng;
        let dim = cfg.net.feat_dim;
        let cols = 6;
        let columns: Vec<Vec<f64>> = (0..cols)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let head = knowe::classifier::ClassifierHead::new(columns, true, cfg.net.lambda)?;
        let feats: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let batch: Vec<(&[f64], usize)> = feats
            .iter()
            .map(|f| (&f[..], rng.random_range(0..cols)))
            .collect();
        trials.push(analysis::plasticity_probe(&head, &batch, &analysis::LR_GRID)?);
    }
    report::write_plasticity_csv(&args.out, &trials)?;

    // Weight growth of raw unfrozen heads.
    let mut flags = RunFlags::knowe();
    flags.normalize_weights = false;
    flags.freeze_classifier = false;
    let traces: Vec<(u64, analysis::NormTrace)> = seeds
        .iter()
        .map(|&s| {
            let res = run_experiment(
                &stream,
                flags,
                &cfg.net,
                &cfg.base_opt,
                &cfg.session_opt,
                s,
                None,
            )?;
            Ok((s, analysis::weight_norm_trace(&res)?))
        })
        .collect::<Result<_>>()?;
    report::write_norm_trace_csv(&args.out, &traces)?;

    println!(
        "analysis complete: median D (a,b,c,d) = {:?}; outputs in {}",
        stability.median_d,
        args.out.display()
    );
    Ok(())
}

fn cmd_gen_data(args: &CommonArgs) -> Result<()> {
    let cfg = resolve_config(args)?;
    let ds = cfg.build_dataset()?;
    std::fs::create_dir_all(&args.out)?;
    let path = args.out.join("features.csv");
    save_feature_file(&path, &ds)?;
    println!(
        "wrote {} samples ({} coarse / {} fine classes, dim {}) to {}",
        ds.samples.len(),
        ds.hierarchy.coarse_count(),
        ds.hierarchy.fine_count(),
        ds.input_dim,
        path.display()
    );
    Ok(())
}

fn cmd_export_features(args: &CommonArgs) -> Result<()> {
    let cfg = resolve_config(args)?;
    let ds = cfg.build_dataset()?;
    let stream = cfg.build_stream()?;
    let model = run_base_session(
        &stream,
        cfg.flags,
        &cfg.net,
        &cfg.base_opt,
        derive_seed(cfg.seed, "base"),
    )?;
    let samples: Vec<Sample> = ds
        .samples
        .iter()
        .map(|s| {
            Ok(Sample {
                x: model.net.feature(&s.x)?,
                coarse: s.coarse,
                fine: s.fine,
            })
        })
        .collect::<Result<_>>()?;
    let embedded = LabeledDataset {
        hierarchy: ds.hierarchy.clone(),
        input_dim: cfg.net.feat_dim,
        samples,
    };
    std::fs::create_dir_all(&args.out)?;
    let path = args.out.join("embedded_features.csv");
    save_feature_file(&path, &embedded)?;
    println!(
        "wrote {} embedded features (dim {}) to {}",
        embedded.samples.len(),
        embedded.input_dim,
        path.display()
    );
    Ok(())
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("KNWE_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| Error::Config(format!("KNWE_THREADS={v:?} is not a thread count")))?;
        if n == 0 {
            return Err(Error::Config("KNWE_THREADS must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = init_threads().and_then(|()| match &cli.cmd {
        Cmd::Run(args) => cmd_run(args),
        Cmd::Ablate(args) => cmd_ablate(args),
        Cmd::Analyze(args) => cmd_analyze(args),
        Cmd::GenData(args) => cmd_gen_data(args),
        Cmd::ExportFeatures(args) => cmd_export_features(args),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config(_)) => {
            eprintln!("config error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
