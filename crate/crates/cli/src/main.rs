use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use w3_core::cost::{self, Variant};
use w3_core::data::{clip_spec, dump_dataset, generate_clip, generate_dataset, load_clip, Split};
use w3_core::gradcheck::{self, Scope};

use w3_cli::manifest::{self, Manifest};
use w3_cli::{exit_code, export, resolve_out_dir, run, Exit};

#[derive(Parser)]
#[command(
    name = "w3",
    version,
    about = "Factorised video attention: training, checks and cost reports"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model (stage 1) or a feature-mimicking student (stage 2).
    Train(TrainArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Print the analytic FLOPs report of a ResNet-50 variant.
    Flops(FlopsArgs),
    /// Write last-stage attention masks of one clip as graymaps and CSV.
    ExportAttention(ExportArgs),
    /// Dump a generated dataset split as one binary file per clip.
    GenData(GenDataArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Config file (key = value lines).
    #[arg(long, required_unless_present = "manifest", conflicts_with = "manifest")]
    config: Option<PathBuf>,
    /// Re-run exactly what a previous manifest describes.
    #[arg(long, conflicts_with_all = ["stage", "teacher", "ablate"])]
    manifest: Option<PathBuf>,
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    stage: Option<u8>,
    /// Stage-1 checkpoint used as the frozen teacher in stage 2.
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// Comma-separated components to switch off: mfr, afr, sa, ta, w3.
    #[arg(long)]
    ablate: Option<String>,
    /// Output directory (default: $W3_OUT_DIR, else ./w3-out).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value = "op")]
    scope: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Table,
    Csv,
}

#[derive(Args)]
struct FlopsArgs {
    /// tsm, cbam, nl or w3.
    #[arg(long, default_value = "w3")]
    variant: String,
    #[arg(long, default_value_t = 16)]
    frames: usize,
    #[arg(long, value_enum, default_value = "table")]
    format: Format,
    /// Exit with status 4 unless every published reference value is matched.
    #[arg(long)]
    assert_paper: bool,
    /// Number of non-local blocks.
    #[arg(long, default_value_t = cost::DEFAULT_NONLOCAL_BLOCKS)]
    nl_blocks: usize,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Config or manifest describing the checkpoint's architecture.
    #[arg(long)]
    config: PathBuf,
    /// A clip file written by gen-data.
    #[arg(long, conflicts_with = "index")]
    clip: Option<PathBuf>,
    /// Index of a generated clip in the config's dataset.
    #[arg(long)]
    index: Option<usize>,
    #[arg(long, value_enum, default_value = "val")]
    split: SplitArg,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
        }
    }
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_enum, default_value = "train")]
    split: SplitArg,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn train(args: TrainArgs) -> Result<()> {
    let m = match args.manifest {
        Some(path) => {
            let mut m = Manifest::load(&path)?;
            if let Some(out) = args.out {
                m.out_dir = out;
            }
            m
        }
        None => {
            let path = args.config.expect("clap enforces --config or --manifest");
            let config = manifest::load_config(&path)?;
            let stage = args.stage.unwrap_or(1);
            if stage == 1 && args.teacher.is_some() {
                return Err(Exit::usage("--teacher only applies to --stage 2").into());
            }
            let ablate = manifest::parse_ablations(args.ablate.as_deref().unwrap_or(""))?;
            run::manifest_for(config, stage, args.teacher, ablate, resolve_out_dir(args.out))
        }
    };
    let outcome = run::execute(&m)?;
    println!(
        "stage {} best val top1 {:.4} at epoch {}",
        m.stage, outcome.best_val_top1, outcome.best_epoch
    );
    println!("checkpoint {}", m.checkpoint().display());
    println!("metrics    {}", m.metrics().display());
    println!("manifest   {}", m.path().display());
    Ok(())
}

fn gradcheck_cmd(args: GradcheckArgs) -> Result<()> {
    let scope: Scope = args
        .scope
        .parse()
        .map_err(|e: w3_core::Error| Exit::usage(e.to_string()))?;
    let tol = scope.tolerance();
    let mut worst = 0.0f64;
    for case in gradcheck::suite(scope, args.seed)? {
        for g in &case.groups {
            println!(
                "{:<28} {:<16} {:>10.3e}  ({} coords)",
                case.case, g.name, g.rel_error, g.coords_checked
            );
            worst = worst.max(g.rel_error);
        }
    }
    let ok = worst < tol;
    println!(
        "worst relative error {worst:.3e}, tolerance {tol:.0e}: {}",
        if ok { "PASS" } else { "FAIL" }
    );
    if !ok {
        return Err(Exit::numeric("gradient check failed").into());
    }
    Ok(())
}

fn flops(args: FlopsArgs) -> Result<()> {
    let variant: Variant = args
        .variant
        .parse()
        .map_err(|e: w3_core::Error| Exit::usage(e.to_string()))?;
    let report = cost::variant_cost(variant, args.frames, args.nl_blocks)?;
    match args.format {
        Format::Table => print!("{}", report.to_table()),
        Format::Csv => print!("{}", report.to_csv()),
    }
    if args.assert_paper {
        let checks = cost::calibration_checks(variant, &report);
        if checks.is_empty() {
            return Err(Exit::usage(format!(
                "no reference values for {} at {} frames",
                args.variant, args.frames
            ))
            .into());
        }
        let mut failed = 0;
        for c in &checks {
            let verdict = if c.passed() { "ok" } else { "OUT OF RANGE" };
            eprintln!(
                "check {}: {:.4} in [{:.4}, {:.4}] {verdict}",
                c.name, c.value, c.lo, c.hi
            );
            failed += usize::from(!c.passed());
        }
        if failed > 0 {
            return Err(Exit::assertion(format!("{failed} calibration check(s) failed")).into());
        }
    }
    Ok(())
}

fn export_attention(args: ExportArgs) -> Result<()> {
    let cfg = manifest::load_config(&args.config)?;
    let model = run::load_model(&args.checkpoint, &cfg.backbone, cfg.flags)?;
    let clip = match (&args.clip, args.index) {
        (Some(path), _) => {
            load_clip(path)
                .with_context(|| format!("cannot read clip {}", path.display()))?
                .0
        }
        (None, Some(i)) => generate_clip(&clip_spec(&cfg.data_config(), cfg.data.seed, args.split.into(), i))?,
        (None, None) => return Err(Exit::usage("give --clip or --index").into()),
    };
    let maps = export::last_stage_masks(&model, &clip)?;
    let dir = resolve_out_dir(args.out);
    let written = export::write_maps(&maps, (cfg.backbone.height, cfg.backbone.width), &dir)?;
    println!("wrote {} files to {}", written.len(), dir.display());
    Ok(())
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    let cfg = manifest::load_config(&args.config)?;
    let split: Split = args.split.into();
    let n = match split {
        Split::Train => cfg.data.n_train_per_class,
        Split::Val => cfg.data.n_val_per_class,
    };
    let ds = generate_dataset(&cfg.data_config(), n, cfg.data.seed, split)?;
    let dir = resolve_out_dir(args.out);
    dump_dataset(&ds, &dir)?;
    println!("wrote {} clips to {}", ds.len(), dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::Flops(a) => flops(a),
        Command::ExportAttention(a) => export_attention(a),
        Command::GenData(a) => gen_data(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
