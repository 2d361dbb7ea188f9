//! `mprkit`: phantom cohorts, MPR caches, training and cross-validation.

use clap::{Args, Parser, Subcommand};
use mprkit::eval::{
    compute_metrics, cross_validate, group_lesions, make_splits, partition, read_report, render_summary_table, roc_svg,
    write_csv, write_report, CnnLearner, CvOptions, PredictionRow, SplitRow, TtaMode,
};
use mprkit::labels::{build_cache, load_cache, AssembleOptions, DatasetManifest, LabeledSample, Pathway, Target};
use mprkit::nn::{predict, save_checkpoint, TrainConfig};
use mprkit::phantom::{generate_cohort, CohortOptions, Grid, LesionCount};
use mprkit::shaping::PaddingStrategy;
use serde::Serialize;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Debug, Parser)]
#[command(name = "mprkit", version, about = "Lesion classification on reformatted coronary image stacks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic phantom cohort and its dataset manifest.
    Phantom(PhantomArgs),
    /// Reformat every lesion of a manifest into a sample cache.
    Reformat(ReformatArgs),
    /// Train and evaluate a single split.
    Train(TrainArgs),
    /// Repeated patient-wise k-fold cross-validation.
    Cv(CvArgs),
    /// Render the CSVs of a `cv` run as a table and ROC plot.
    Report(ReportArgs),
}

#[derive(Debug, Args, Serialize)]
struct SeedArg {
    /// Master seed.
    #[arg(long, env = "MPRKIT_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args, Serialize)]
struct PhantomArgs {
    #[arg(long)]
    patients: usize,
    /// Total number of lesions (one per branch).
    #[arg(long)]
    lesions: usize,
    #[command(flatten)]
    seed: SeedArg,
    #[arg(long)]
    out: PathBuf,
    /// Grid size `X,Y,Z` in voxels.
    #[arg(long, value_delimiter = ',', default_values_t = [128, 128, 128])]
    dims: Vec<usize>,
    /// Isotropic voxel spacing (mm).
    #[arg(long, default_value_t = 0.5)]
    spacing: f64,
    #[arg(long, default_value_t = 0.0)]
    grade_min: f64,
    #[arg(long, default_value_t = 0.9)]
    grade_max: f64,
    /// Image noise standard deviation (HU).
    #[arg(long, default_value_t = 20.0)]
    noise: f64,
}

#[derive(Debug, Args, Serialize)]
struct ReformatArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 18)]
    views: usize,
    /// zero | stretch | intermediate
    #[arg(long, default_value = "intermediate")]
    padding: String,
    /// Override the strategy's target length.
    #[arg(long)]
    target_len: Option<usize>,
    /// 2.5d | cubes
    #[arg(long, default_value = "2.5d")]
    pathway: String,
    /// In-plane slice size in pixels.
    #[arg(long, default_value_t = 32)]
    slice_size: usize,
    /// In-plane pixel spacing (mm).
    #[arg(long, default_value_t = 0.5)]
    pixel_spacing: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct TrainingArgs {
    #[arg(long, default_value_t = 4)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
}

#[derive(Debug, Args, Serialize)]
struct TrainArgs {
    #[arg(long)]
    cache: PathBuf,
    /// significant | revascularised
    #[arg(long, default_value = "significant")]
    target: String,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    rep: usize,
    #[arg(long, default_value_t = 0)]
    fold: usize,
    #[command(flatten)]
    seed: SeedArg,
    #[command(flatten)]
    training: TrainingArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct CvArgs {
    #[arg(long)]
    cache: PathBuf,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 5)]
    reps: usize,
    /// on | off | both; a bare `--tta` means on.
    #[arg(long, default_value = "both", num_args = 0..=1, default_missing_value = "on")]
    tta: String,
    /// Worker threads (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
    /// Comma-separated targets.
    #[arg(long, value_delimiter = ',', default_values_t = ["significant".to_string(), "revascularised".to_string()])]
    targets: Vec<String>,
    #[command(flatten)]
    seed: SeedArg,
    #[command(flatten)]
    training: TrainingArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct ReportArgs {
    /// Directory holding the CSVs of a `cv` run.
    #[arg(long)]
    input: PathBuf,
    /// Defaults to the input directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Failure classes mapped to exit codes.
enum Failure {
    Usage(String),
    Data(mprkit::Error),
}

impl From<mprkit::Error> for Failure {
    fn from(e: mprkit::Error) -> Self {
        Failure::Data(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Data(e.into())
    }
}

type CmdResult = Result<(), Failure>;

fn usage<T>(msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure::Usage(msg.into()))
}

fn parse<T: std::str::FromStr<Err = mprkit::Error>>(s: &str) -> Result<T, Failure> {
    s.parse().map_err(|e: mprkit::Error| Failure::Usage(e.to_string()))
}

/// `run.json`: the subcommand and every resolved setting.
fn write_run_json(out: &Path, command: &str, args: &impl Serialize, resolved: serde_json::Value) -> CmdResult {
    fs::create_dir_all(out)?;
    let doc = serde_json::json!({
        "tool": "mprkit",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "args": args,
        "resolved": resolved,
    });
    fs::write(out.join("run.json"), serde_json::to_string_pretty(&doc).expect("run config serializes") + "\n")?;
    Ok(())
}

fn cmd_phantom(a: &PhantomArgs) -> CmdResult {
    if a.patients == 0 || a.lesions < a.patients {
        return usage(format!("need at least one lesion per patient ({} lesions, {} patients)", a.lesions, a.patients));
    }
    if a.dims.len() != 3 {
        return usage(format!("--dims takes three values X,Y,Z, got {}", a.dims.len()));
    }
    let opts = CohortOptions {
        n_patients: a.patients,
        lesions: LesionCount::Total(a.lesions),
        grade_range: (a.grade_min, a.grade_max),
        seed: a.seed.seed,
        grid: Grid { dims: [a.dims[0], a.dims[1], a.dims[2]], spacing_mm: a.spacing },
        noise_sigma_hu: a.noise,
        ..Default::default()
    };
    let manifest = generate_cohort(&opts, &a.out)?;
    write_run_json(&a.out, "phantom", a, serde_json::to_value(&opts).expect("options serialize"))?;
    println!(
        "{} patients, {} lesions -> {}",
        manifest.patients.len(),
        manifest.n_lesions(),
        a.out.join("manifest.json").display()
    );
    Ok(())
}

fn cmd_reformat(a: &ReformatArgs) -> CmdResult {
    let mut padding: PaddingStrategy = parse(&a.padding)?;
    if let Some(t) = a.target_len {
        padding = padding.with_target(t);
    }
    let pathway: Pathway = parse(&a.pathway)?;
    if a.views == 0 {
        return usage("--views must be >= 1");
    }
    let opts = AssembleOptions {
        n_views: a.views,
        padding,
        pathway,
        slice_size: a.slice_size,
        in_plane_spacing_mm: a.pixel_spacing,
    };
    let manifest = DatasetManifest::load(&a.manifest)?;
    let base = a.manifest.parent().unwrap_or(Path::new("."));
    let index = build_cache(&manifest, base, &opts, &a.out)?;
    write_run_json(&a.out, "reformat", a, serde_json::to_value(opts).expect("options serialize"))?;
    let s = index.summary;
    println!(
        "{} lesions x {} views = {} samples of shape {:?} ({} significant, {} revascularised)",
        s.lesions,
        opts.n_views,
        s.samples,
        opts.sample_shape(),
        s.significant,
        s.revascularised
    );
    Ok(())
}

fn train_config(t: &TrainingArgs) -> Result<TrainConfig, Failure> {
    if t.epochs == 0 || t.batch_size < 2 || t.lr.is_nan() || t.lr <= 0.0 {
        return usage("--epochs >= 1, --batch-size >= 2 and --lr > 0 required");
    }
    Ok(TrainConfig { learning_rate: t.lr, batch_size: t.batch_size, epochs: t.epochs, ..Default::default() })
}

fn patient_ids(samples: &[LabeledSample]) -> Vec<String> {
    samples.iter().map(|s| s.patient_id.clone()).collect()
}

fn cmd_train(a: &TrainArgs) -> CmdResult {
    let target: Target = parse(&a.target)?;
    let config = train_config(&a.training)?;
    let (_, samples) = load_cache(&a.cache)?;
    let plan = make_splits(&patient_ids(&samples), a.k, a.rep + 1, a.seed.seed)?;
    let Some(split) = plan.splits.iter().find(|s| s.repetition == a.rep && s.fold == a.fold) else {
        return usage(format!("fold {} does not exist for k = {}", a.fold, a.k));
    };
    let lesions = group_lesions(&samples)?;
    let (train, test) = partition(&samples, &lesions, split)?;
    let model = CnnLearner { config }.fit_model(&train, target, split.init_seed)?;
    fs::create_dir_all(&a.out)?;
    save_checkpoint(&model, &a.out.join("model.ckpt"))?;

    let mut rows = Vec::new();
    let mut preds = Vec::new();
    let labels: Vec<bool> = test.iter().map(|l| l.label(target)).collect();
    for tta in [false, true] {
        let scores = test
            .iter()
            .map(|l| predict(&model, &l.views.iter().map(|s| s.tensor.as_slice()).collect::<Vec<_>>(), tta))
            .collect::<mprkit::Result<Vec<f64>>>()?;
        let m = compute_metrics(&labels, &scores, 0.5)?;
        rows.push(SplitRow {
            target,
            tta,
            split_rep: split.repetition,
            split_fold: split.fold,
            auc: m.auc,
            accuracy: m.accuracy,
            f1: m.f1,
            sensitivity: m.sensitivity,
            specificity: m.specificity,
            mcc: m.mcc,
        });
        for ((l, &y), &s) in test.iter().zip(&labels).zip(&scores) {
            preds.push(PredictionRow {
                target,
                tta,
                split_rep: split.repetition,
                split_fold: split.fold,
                patient_id: l.patient_id.to_string(),
                lesion_id: l.lesion_id.to_string(),
                label: y,
                score: s,
            });
        }
    }
    write_csv(&rows, &a.out.join("metrics.csv"))?;
    write_csv(&preds, &a.out.join("predictions.csv"))?;
    write_run_json(
        &a.out,
        "train",
        a,
        serde_json::json!({ "train_config": TrainConfig { seed: split.init_seed, target, ..config }, "split": split }),
    )?;
    for r in &rows {
        println!(
            "{target} tta={}: auc {} accuracy {:.3} mcc {:.3}",
            r.tta,
            r.auc.map_or("n/a".into(), |v| format!("{v:.3}")),
            r.accuracy,
            r.mcc
        );
    }
    Ok(())
}

fn cmd_cv(a: &CvArgs) -> CmdResult {
    let tta: TtaMode = parse(&a.tta)?;
    let targets = a.targets.iter().map(|t| parse::<Target>(t)).collect::<Result<Vec<_>, _>>()?;
    let config = train_config(&a.training)?;
    if a.jobs == Some(0) {
        return usage("--jobs must be >= 1");
    }
    let (_, samples) = load_cache(&a.cache)?;
    let plan = make_splits(&patient_ids(&samples), a.k, a.reps, a.seed.seed)?;
    let opts = CvOptions { targets, tta, threshold: 0.5, jobs: a.jobs };
    let report = cross_validate(&samples, &plan, &CnnLearner { config }, &opts)?;
    write_report(&report, &a.out)?;
    fs::write(a.out.join("splits.json"), serde_json::to_string_pretty(&plan).expect("plan serializes") + "\n")?;
    write_run_json(
        &a.out,
        "cv",
        a,
        serde_json::json!({
            "train_config": config,
            "cv_options": { "targets": opts.targets, "tta": opts.tta, "threshold": opts.threshold },
            "init_seeds": plan.splits.iter().map(|s| s.init_seed).collect::<Vec<_>>(),
        }),
    )?;
    print!("{}", render_summary_table(&report.summary));
    Ok(())
}

fn cmd_report(a: &ReportArgs) -> CmdResult {
    let report = read_report(&a.input)?;
    let out = a.out.clone().unwrap_or_else(|| a.input.clone());
    fs::create_dir_all(&out)?;
    let table = render_summary_table(&report.summary);
    fs::write(out.join("report.md"), &table)?;
    fs::write(out.join("roc.svg"), roc_svg(&report.predictions))?;
    write_run_json(&out, "report", a, serde_json::Value::Null)?;
    print!("{table}");
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Phantom(a) => cmd_phantom(a),
        Command::Reformat(a) => cmd_reformat(a),
        Command::Train(a) => cmd_train(a),
        Command::Cv(a) => cmd_cv(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
