//! Command-line pipeline: phantom generation, graph diagnostics, training,
//! prediction, evaluation, and CDVH export.
//!
//! Every run prints its resolved configuration before doing work, and all
//! outputs are reproducible: identical flags and seed give identical bytes.
//! `--threads` only changes wall time. Exit codes: 0 success, 2 usage error,
//! 3 data error, 4 numerical failure.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::eval::{
    cdvh, compare_models, default_bins, mask_on_dose_grid, write_cdvh_csvs, write_metrics_json,
    DEFAULT_CDVH_BINS,
};
use crate::graph::{build_graph, GraphConfig, GraphStats};
use crate::model::{EncoderConfig, EncoderKind, Model};
use crate::phantom::{generate_dataset, load_dataset, write_dataset, PhantomConfig};
use crate::train::{init_model, split_indices, train_prepared, ModelKind, TrainConfig};
use crate::volume::{read_bundle, read_f32_raw, write_prediction, PlanBundle};

#[derive(Parser)]
#[command(
    name = "dosegnn",
    version,
    about = "3D dose prediction on mismatched CT/dose grids"
)]
struct Cli {
    /// Worker thread cap (affects wall time only, never output bytes).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic plan generation.
    Phantom {
        #[command(subcommand)]
        command: PhantomCommand,
    },
    /// Bipartite graph diagnostics.
    Graph {
        #[command(subcommand)]
        command: GraphCommand,
    },
    /// Train a predictor on the train split of a dataset.
    Train(TrainArgs),
    /// Predict a dose volume for one plan bundle.
    Predict(PredictArgs),
    /// RMSE of one model on one plan with ground truth.
    Evaluate(EvaluateArgs),
    /// Export a CDVH curve for one structure of one plan.
    Cdvh(CdvhArgs),
    /// Evaluate models on the test split: metrics.json + CDVH CSVs.
    Report(ReportArgs),
}

#[derive(Subcommand)]
enum PhantomCommand {
    /// Write `case_NNNN/` bundles plus `dataset.json`.
    Generate(PhantomArgs),
}

#[derive(Subcommand)]
enum GraphCommand {
    /// Build the graph for one plan and print its statistics.
    Stats(GraphStatsArgs),
}

#[derive(Args)]
struct PhantomArgs {
    #[arg(long, default_value_t = 20)]
    count: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Isotropic CT voxel count per axis.
    #[arg(long, default_value_t = 48)]
    ct_dim: usize,
    /// Isotropic dose voxel count per axis.
    #[arg(long, default_value_t = 20)]
    dose_dim: usize,
    /// CT spacing, mm.
    #[arg(long, default_value_t = 1.0)]
    ct_spacing: f64,
    /// Dose spacing, mm.
    #[arg(long, default_value_t = 2.5)]
    dose_spacing: f64,
    /// Requested dose-origin jitter half-range, mm.
    #[arg(long, default_value_t = 3.0)]
    jitter: f64,
    #[arg(long, default_value_t = 8.0)]
    ptv_radius_min: f64,
    #[arg(long, default_value_t = 14.0)]
    ptv_radius_max: f64,
    /// Prescription dose, Gy.
    #[arg(long, default_value_t = 60.0)]
    rx: f64,
    /// Dose falloff length, mm.
    #[arg(long, default_value_t = 8.0)]
    tau: f64,
    #[arg(long, default_value_t = 0.3)]
    angular_amplitude: f64,
    #[arg(long, default_value_t = 2)]
    oars: usize,
}

#[derive(Args)]
struct GraphStatsArgs {
    /// Plan bundle directory.
    #[arg(long)]
    plan: PathBuf,
    #[arg(long, default_value_t = 5.0)]
    threshold_mm: f64,
    /// Defaults to the threshold.
    #[arg(long)]
    ct_margin_mm: Option<f64>,
    /// Optional `graph.json` output path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory (written by `phantom generate`).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: String,
    #[arg(long, default_value = "mlp")]
    encoder: String,
    #[arg(long, default_value_t = 5.0)]
    threshold_mm: f64,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Training report path; defaults to `report.json` next to `--out`.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Neighbor count for heuristic 2.
    #[arg(long, default_value_t = 8)]
    k: usize,
    #[arg(long, default_value_t = 5)]
    patch_size: usize,
    #[arg(long, default_value_t = 64)]
    embed_dim: usize,
    #[arg(long, default_value_t = 15)]
    n_train: usize,
    #[arg(long, default_value_t = 5)]
    n_test: usize,
}

#[derive(Args)]
struct PredictArgs {
    /// Model JSON file.
    #[arg(long)]
    model: PathBuf,
    /// Plan bundle directory.
    #[arg(long)]
    plan: PathBuf,
    /// Output directory for `pred.f32` + `pred.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    plan: PathBuf,
    /// Optional JSON output path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CdvhArgs {
    #[arg(long)]
    plan: PathBuf,
    #[arg(long)]
    structure: String,
    /// Raw f32 dose file on the plan's dose geometry; defaults to the
    /// bundle's ground truth.
    #[arg(long)]
    pred: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_CDVH_BINS)]
    bins: usize,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    data: PathBuf,
    /// Model file; repeatable.
    #[arg(long = "model", required = true)]
    models: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 15)]
    n_train: usize,
    #[arg(long, default_value_t = 5)]
    n_test: usize,
    #[arg(long, default_value_t = 5.0)]
    threshold_mm: f64,
}

pub fn main() {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        // Ignored if a pool already exists (e.g. under a test harness).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    if let Err(e) = run(cli.command) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn print_config(command: &str, config: serde_json::Value) {
    let doc = serde_json::json!({ "command": command, "config": config });
    println!("{}", serde_json::to_string_pretty(&doc).unwrap());
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Phantom {
            command: PhantomCommand::Generate(args),
        } => phantom_generate(args),
        Command::Graph {
            command: GraphCommand::Stats(args),
        } => graph_stats(args),
        Command::Train(args) => train(args),
        Command::Predict(args) => predict(args),
        Command::Evaluate(args) => evaluate(args),
        Command::Cdvh(args) => cdvh_export(args),
        Command::Report(args) => report(args),
    }
}

fn phantom_generate(args: PhantomArgs) -> Result<()> {
    let cfg = PhantomConfig {
        seed: args.seed,
        ct_dims: [args.ct_dim; 3],
        dose_dims: [args.dose_dim; 3],
        ct_spacing: [args.ct_spacing; 3],
        dose_spacing: [args.dose_spacing; 3],
        dose_origin_jitter: args.jitter,
        ptv_radius_range: [args.ptv_radius_min, args.ptv_radius_max],
        prescription_dose: args.rx,
        falloff_tau: args.tau,
        angular_amplitude: args.angular_amplitude,
        n_oars: args.oars,
    };
    print_config(
        "phantom generate",
        serde_json::json!({ "count": args.count, "config": cfg }),
    );
    let bundles = generate_dataset(&cfg, args.count)?;
    write_dataset(&args.out, &cfg, &bundles)?;
    println!("wrote {} cases to {}", bundles.len(), args.out.display());
    Ok(())
}

fn graph_stats(args: GraphStatsArgs) -> Result<()> {
    let cfg = GraphConfig {
        threshold: args.threshold_mm,
        ct_margin: args.ct_margin_mm.unwrap_or(args.threshold_mm),
    };
    print_config(
        "graph stats",
        serde_json::json!({ "plan": args.plan.display().to_string(), "graph": cfg }),
    );
    let plan = read_bundle(&args.plan)?;
    let graph = build_graph(&plan.ct.geom, &plan.dose_geom, &cfg)?;
    let stats = GraphStats::of(&graph, &cfg);
    let text = serde_json::to_string_pretty(&stats).expect("stats serialize");
    println!("{text}");
    if let Some(out) = args.out {
        std::fs::write(&out, text).map_err(|e| Error::io(&out, e))?;
    }
    Ok(())
}

fn load_named_dataset(dir: &Path) -> Result<Vec<(String, PlanBundle)>> {
    let cases = load_dataset(dir)?;
    if cases.is_empty() {
        return Err(Error::Usage(format!("no cases in {}", dir.display())));
    }
    Ok(cases)
}

fn train(args: TrainArgs) -> Result<()> {
    let kind: ModelKind = args.model.parse()?;
    let encoder_kind: EncoderKind = args.encoder.parse()?;
    let encoder = EncoderConfig {
        kind: encoder_kind,
        patch_size: args.patch_size,
        embed_dim: args.embed_dim,
        ..EncoderConfig::default()
    };
    let graph = GraphConfig::with_threshold(args.threshold_mm);
    let train_cfg = TrainConfig {
        epochs: args.epochs,
        learning_rate: args.lr,
        seed: args.seed,
        n_train: args.n_train,
        n_test: args.n_test,
        ..TrainConfig::default()
    };
    print_config(
        "train",
        serde_json::json!({
            "model": args.model,
            "encoder": encoder,
            "graph": graph,
            "train": train_cfg,
            "k": args.k,
        }),
    );

    let cases = load_named_dataset(&args.data)?;
    let split = split_indices(cases.len(), &train_cfg)?;
    let train_set: Vec<&PlanBundle> = split.train.iter().map(|&i| &cases[i].1).collect();
    let model = init_model(kind, &encoder, &graph, args.k, args.seed)?;
    let (model, train_report) = train_prepared(model, &train_set, &train_cfg)?;
    model.save(&args.out)?;

    let report_path = args.report.unwrap_or_else(|| {
        args.out
            .parent()
            .unwrap_or(Path::new("."))
            .join("report.json")
    });
    let doc = serde_json::json!({
        "model": args.model,
        "encoder": encoder,
        "graph": graph,
        "train": train_cfg,
        "k": args.k,
        "train_cases": split.train.iter().map(|&i| cases[i].0.clone()).collect::<Vec<_>>(),
        "report": train_report,
    });
    std::fs::write(
        &report_path,
        serde_json::to_string_pretty(&doc).expect("report serialize"),
    )
    .map_err(|e| Error::io(&report_path, e))?;
    println!(
        "trained {} ({} epochs); model -> {}, report -> {}",
        args.model,
        train_report.epoch_loss.len(),
        args.out.display(),
        report_path.display()
    );
    Ok(())
}

fn predict(args: PredictArgs) -> Result<()> {
    let model = Model::load(&args.model)?;
    print_config(
        "predict",
        serde_json::json!({ "model_kind": model.kind(), "model_config": model.config_value() }),
    );
    let plan = read_bundle(&args.plan)?;
    let values = model.predict(&plan, None)?;
    let echo = serde_json::json!({
        "model_kind": model.kind(),
        "model_config": model.config_value(),
    });
    let path = write_prediction(&args.out, &plan.dose_geom, &values, echo)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn evaluate(args: EvaluateArgs) -> Result<()> {
    let model = Model::load(&args.model)?;
    print_config(
        "evaluate",
        serde_json::json!({ "model_kind": model.kind(), "model_config": model.config_value() }),
    );
    let plan = read_bundle(&args.plan)?;
    let truth: Vec<f64> = plan
        .dose_truth()?
        .values
        .iter()
        .map(|&v| f64::from(v))
        .collect();
    let pred = model.predict(&plan, None)?;
    let value = crate::eval::rmse(&pred, &truth)?;
    let doc = serde_json::json!({ "model_kind": model.kind(), "rmse_gy": value });
    let text = serde_json::to_string_pretty(&doc).expect("serialize");
    println!("{text}");
    if let Some(out) = args.out {
        std::fs::write(&out, text).map_err(|e| Error::io(&out, e))?;
    }
    Ok(())
}

fn cdvh_export(args: CdvhArgs) -> Result<()> {
    print_config(
        "cdvh",
        serde_json::json!({
            "structure": args.structure,
            "bins": args.bins,
            "source": if args.pred.is_some() { "prediction" } else { "truth" },
        }),
    );
    if args.bins < 2 {
        return Err(Error::Usage("need at least 2 bins".into()));
    }
    let plan = read_bundle(&args.plan)?;
    let dose: Vec<f64> = match &args.pred {
        Some(path) => read_f32_raw(path, plan.dose_geom.num_voxels())?
            .iter()
            .map(|&v| f64::from(v))
            .collect(),
        None => plan
            .dose_truth()?
            .values
            .iter()
            .map(|&v| f64::from(v))
            .collect(),
    };
    let mask = plan
        .structures
        .iter()
        .find(|s| s.name == args.structure)
        .ok_or_else(|| Error::Usage(format!("no structure named '{}'", args.structure)))?;
    let dose_mask = mask_on_dose_grid(mask, &plan.ct.geom, &plan.dose_geom);
    let bins = default_bins(plan.prescription_dose, args.bins);
    let curve = cdvh(&dose, &dose_mask, &args.structure, &bins)?;
    let mut text = String::from("dose_gy,volume_pct\n");
    for (b, v) in curve.dose_gy.iter().zip(&curve.volume_pct) {
        text.push_str(&format!("{b:.6},{v:.6}\n"));
    }
    std::fs::write(&args.out, text).map_err(|e| Error::io(&args.out, e))?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn report(args: ReportArgs) -> Result<()> {
    if args.models.is_empty() {
        return Err(Error::Usage("at least one --model is required".into()));
    }
    let graph = GraphConfig::with_threshold(args.threshold_mm);
    let train_cfg = TrainConfig {
        seed: args.seed,
        n_train: args.n_train,
        n_test: args.n_test,
        ..TrainConfig::default()
    };
    print_config(
        "report",
        serde_json::json!({
            "graph": graph,
            "seed": args.seed,
            "n_train": args.n_train,
            "n_test": args.n_test,
            "models": args.models.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
        }),
    );

    let cases = load_named_dataset(&args.data)?;
    let split = split_indices(cases.len(), &train_cfg)?;
    let test_set: Vec<(&str, &PlanBundle)> = split
        .test
        .iter()
        .map(|&i| (cases[i].0.as_str(), &cases[i].1))
        .collect();

    let mut loaded = Vec::new();
    for path in &args.models {
        let name = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Usage(format!("bad model path {}", path.display())))?
            .to_string();
        loaded.push((name, Model::load(path)?));
    }
    let named: Vec<(&str, &Model)> = loaded.iter().map(|(n, m)| (n.as_str(), m)).collect();

    let eval_report = compare_models(&named, &test_set, &graph)?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let metrics_path = args.out.join("metrics.json");
    write_metrics_json(&eval_report, &metrics_path)?;
    write_cdvh_csvs(&eval_report, &args.out)?;
    for m in &eval_report.models {
        println!("{}: mean test RMSE {:.4} Gy", m.name, m.mean_rmse);
    }
    println!("wrote {}", metrics_path.display());
    Ok(())
}
