//! Command-line driver: training, evaluation, the ablation suite, the
//! subsample sweep, scattering dumps, shape checking and gradient checking.
//!
//! Every run is described by a config file (see [`crate::config`]); the
//! flags `--seed`, `--out`, `--arm`, `--fraction` and `--ablation` override
//! individual settings without editing the file. All outputs land under
//! the output directory. Exit codes: 0 success, 1 configuration error
//! (the message names the offending key or flag), 2 runtime error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{DataSection, RunConfig};
use crate::data::{generate_texture_dataset, load_image_folder, Dataset, Split};
use crate::error::{Error, Result};
use crate::fusion::AblationMode;
use crate::gradcheck;
use crate::io;
use crate::metrics::MetricsReport;
use crate::network::{build_spec, static_shape_check, Model};
use crate::tensor::{Shape, Tensor};
use crate::train::{run_ablation_suite, train, TrainConfig};

#[derive(Parser)]
#[command(
    name = "ehybrid",
    about = "Hybrid scattering/CNN classifier: training, ablation and inspection tools",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one arm and write checkpoint + CSV reports.
    Train(RunArgs),
    /// Evaluate the checkpoint in the output directory on the test split.
    Eval(RunArgs),
    /// Train and compare the four ablation arms.
    Ablate(RunArgs),
    /// Train the {1.0, 0.5, 0.25} x {hybrid, baseline} grid.
    SubsampleSweep(RunArgs),
    /// Write scattering coefficients of the test split and the filter bank.
    ScatterDump(RunArgs),
    /// Print the static per-stage shape table.
    ShapeCheck(RunArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ArmArg {
    Hybrid,
    Baseline,
}

impl ArmArg {
    fn label(self) -> &'static str {
        match self {
            ArmArg::Hybrid => "hybrid",
            ArmArg::Baseline => "baseline",
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AblationArg {
    None,
    Scat,
    Net,
}

impl From<AblationArg> for AblationMode {
    fn from(a: AblationArg) -> AblationMode {
        match a {
            AblationArg::None => AblationMode::None,
            AblationArg::Scat => AblationMode::ScatDisabled,
            AblationArg::Net => AblationMode::NetDisabled,
        }
    }
}

#[derive(Args)]
struct RunArgs {
    /// Config file (flat `section.key = value` format).
    #[arg(long)]
    config: PathBuf,
    /// Overrides train.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides output.dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Which arm to build.
    #[arg(long, value_enum, default_value = "hybrid")]
    arm: ArmArg,
    /// Overrides train.subsample_fraction.
    #[arg(long)]
    fraction: Option<f64>,
    /// Overrides train.ablation.
    #[arg(long, value_enum)]
    ablation: Option<AblationArg>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Seed for the random test points.
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

/// Parses argv and runs the requested command, returning the process exit
/// code.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes; everything else is
            // a configuration problem.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match cli.command {
        Command::Train(args) => cmd_train(&args),
        Command::Eval(args) => cmd_eval(&args),
        Command::Ablate(args) => cmd_ablate(&args),
        Command::SubsampleSweep(args) => cmd_sweep(&args),
        Command::ScatterDump(args) => cmd_scatter_dump(&args),
        Command::ShapeCheck(args) => cmd_shape_check(&args),
        Command::Gradcheck(args) => cmd_gradcheck(&args),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Loads the config, applies flag overrides, validates, and resolves the
/// output directory.
fn prepare(args: &RunArgs) -> Result<(RunConfig, PathBuf)> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if let Some(fraction) = args.fraction {
        cfg.train.subsample_fraction = fraction;
    }
    if let Some(ablation) = args.ablation {
        cfg.train.ablation = ablation.into();
    }
    cfg.validate()?;
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(&cfg.out_dir));
    std::fs::create_dir_all(&out)?;
    Ok((cfg, out))
}

/// Materializes the train/test datasets described by the config.
fn load_datasets(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let (train_set, test_set) = match &cfg.data {
        DataSection::Synthetic {
            classes,
            per_class,
            seed,
        } => generate_texture_dataset(*classes, *per_class, cfg.model.resolution, *seed)?,
        DataSection::Folder { path } => {
            let root = Path::new(path);
            let train_set =
                load_image_folder(&root.join("train"), cfg.model.resolution, Split::Train)?;
            let test_set =
                load_image_folder(&root.join("test"), cfg.model.resolution, Split::Test)?;
            if train_set.class_names != test_set.class_names {
                return Err(Error::Data(format!(
                    "train and test splits under {path} disagree on class names"
                )));
            }
            (train_set, test_set)
        }
    };
    let classes = train_set.class_names.len();
    if classes != cfg.model.num_classes {
        return Err(Error::Config(format!(
            "model.num_classes = {} but the data has {classes} classes",
            cfg.model.num_classes
        )));
    }
    if let Some(shape) = train_set.image_shape() {
        if shape.c != cfg.model.input_channels {
            return Err(Error::Config(format!(
                "model.input_channels = {} but the data has {} channels",
                cfg.model.input_channels, shape.c
            )));
        }
    }
    Ok((train_set, test_set))
}

fn write_run_reports(
    out: &Path,
    arm: &str,
    report: &MetricsReport,
) -> Result<()> {
    io::write_per_class_ap_csv(&out.join("per_class_ap.csv"), &report.per_class_ap)?;
    io::write_summary_csv(&out.join("summary.csv"), report)?;
    io::write_final_csv(&out.join("final.csv"), &[(arm.to_string(), report.map)])?;
    Ok(())
}

fn cmd_train(args: &RunArgs) -> Result<()> {
    let (cfg, out) = prepare(args)?;
    let (train_set, test_set) = load_datasets(&cfg)?;
    let spec = build_spec(&cfg.spec_options(args.arm == ArmArg::Baseline))?;
    let mut model = Model::new(spec, cfg.train.seed)?;
    let report = train(&mut model, &train_set, &test_set, &cfg.train)?;
    io::write_checkpoint(model.store(), &out.join("checkpoint.ckpt"))?;
    write_run_reports(&out, args.arm.label(), &report)?;
    println!(
        "{} arm trained for {} epochs: mAP {:.4} ({} classes)",
        args.arm.label(),
        cfg.train.epochs,
        report.map,
        test_set.class_names.len()
    );
    Ok(())
}

fn cmd_eval(args: &RunArgs) -> Result<()> {
    let (cfg, out) = prepare(args)?;
    let (_, test_set) = load_datasets(&cfg)?;
    let spec = build_spec(&cfg.spec_options(args.arm == ArmArg::Baseline))?;
    let mut model = Model::new(spec, cfg.train.seed)?;
    io::load_checkpoint(model.store_mut(), &out.join("checkpoint.ckpt"))?;
    let ap = crate::train::evaluate(&model, &test_set, cfg.train.batch_size, cfg.train.ablation)?;
    io::write_per_class_ap_csv(&out.join("per_class_ap.csv"), &ap.per_class)?;
    println!("{} arm evaluated: mAP {:.4}", args.arm.label(), ap.map);
    for (class, value) in &ap.per_class {
        println!("  class {class} ({}) AP {value:.4}", test_set.class_names[*class]);
    }
    if !ap.skipped_classes.is_empty() {
        println!("  classes without positives: {:?}", ap.skipped_classes);
    }
    Ok(())
}

fn cmd_ablate(args: &RunArgs) -> Result<()> {
    let (cfg, out) = prepare(args)?;
    let (train_set, test_set) = load_datasets(&cfg)?;
    let report = run_ablation_suite(&cfg.spec_options(false), &train_set, &test_set, &cfg.train)?;
    let mut rows = Vec::new();
    for arm in &report.arms {
        let arm_dir = out.join(&arm.name);
        std::fs::create_dir_all(&arm_dir)?;
        write_run_reports(&arm_dir, &arm.name, &arm.report)?;
        rows.push((arm.name.clone(), arm.map));
        println!("{:<14} mAP {:.4}", arm.name, arm.map);
    }
    io::write_final_csv(&out.join("final.csv"), &rows)?;
    for (arm, delta) in &report.deltas {
        println!("hybrid - {arm}: {delta:+.4}");
    }
    Ok(())
}

fn cmd_sweep(args: &RunArgs) -> Result<()> {
    let (cfg, out) = prepare(args)?;
    let (train_set, test_set) = load_datasets(&cfg)?;
    let mut rows = Vec::new();
    for &fraction in &[1.0, 0.5, 0.25] {
        for arm in [ArmArg::Hybrid, ArmArg::Baseline] {
            let label = format!("{}@{fraction}", arm.label());
            let spec = build_spec(&cfg.spec_options(arm == ArmArg::Baseline))?;
            let mut model = Model::new(spec, cfg.train.seed)?;
            let run_cfg = TrainConfig {
                subsample_fraction: fraction,
                ..cfg.train
            };
            let report = train(&mut model, &train_set, &test_set, &run_cfg)?;
            let cell = out.join(label.replace('@', "_f"));
            std::fs::create_dir_all(&cell)?;
            write_run_reports(&cell, &label, &report)?;
            println!("{label:<16} mAP {:.4}", report.map);
            rows.push((label, report.map));
        }
    }
    io::write_final_csv(&out.join("final.csv"), &rows)?;
    Ok(())
}

fn cmd_scatter_dump(args: &RunArgs) -> Result<()> {
    let (cfg, out) = prepare(args)?;
    let (_, test_set) = load_datasets(&cfg)?;
    let spec = build_spec(&cfg.spec_options(false))?;
    let model = Model::new(spec, cfg.train.seed)?;
    let scales = model.spec().fusion_scales();
    for &j in &scales {
        // One stacked tensor per scale over the whole test split.
        let mut stacked: Option<(Shape, Vec<f64>)> = None;
        for img in &test_set.images {
            let coeffs = model
                .compute_scatterings(img)?
                .remove(&j)
                .expect("scale listed by the spec");
            let s = coeffs.shape();
            let (_, data) = stacked.get_or_insert_with(|| (s, Vec::new()));
            data.extend_from_slice(coeffs.data());
        }
        let (s, data) = stacked.expect("non-empty test split");
        let tensor = Tensor::from_vec(Shape::new(test_set.len(), s.c, s.h, s.w), data)?;
        let path = out.join(format!("scatter_j{j}.bin"));
        io::write_tensor(&tensor, &path)?;
        println!(
            "wrote {} ({} samples, {} channels at {}x{})",
            path.display(),
            test_set.len(),
            s.c,
            s.h,
            s.w
        );
    }
    for &j in &scales {
        let dir = out.join(format!("filters_j{j}"));
        io::write_filter_dump(model.bank(j)?, &dir)?;
        println!("wrote {}", dir.join("manifest.txt").display());
    }
    Ok(())
}

fn cmd_shape_check(args: &RunArgs) -> Result<()> {
    let (cfg, _) = prepare(args)?;
    let spec = build_spec(&cfg.spec_options(args.arm == ArmArg::Baseline))?;
    let table = static_shape_check(&spec)?;
    println!("{:<14} {:<22} {:>10} {:>9}", "stage", "operator", "resolution", "channels");
    for row in &table {
        println!(
            "{:<14} {:<22} {:>10} {:>9}",
            row.name, row.operator, row.resolution, row.channels
        );
    }
    Ok(())
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<()> {
    let cases = gradcheck::run_all(args.seed)?;
    let mut failed = 0;
    for case in &cases {
        let verdict = if case.passed() { "ok" } else { "FAIL" };
        println!(
            "{verdict:<5} {:<28} max rel err {:.3e} (tolerance {:.0e})",
            case.name, case.max_rel_err, case.tolerance
        );
        if !case.passed() {
            failed += 1;
        }
    }
    if failed > 0 {
        return Err(Error::Numeric(format!(
            "{failed} of {} gradient checks failed",
            cases.len()
        )));
    }
    println!("all {} gradient checks passed", cases.len());
    Ok(())
}
