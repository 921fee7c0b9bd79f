use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use xct_core::phantom::StyleShiftParams;
use xct_core::training::Stage;
use xct_core::{ClassMix, Plane};

mod commands;
mod run;

#[derive(Parser, Debug)]
#[command(name = "xct", version, about = "Single-view X-ray to CT reconstruction on synthetic phantoms")]
struct Cli {
    /// Print the full default config of the given kind as JSON and exit.
    #[arg(long, value_enum, value_name = "KIND", num_args = 0..=1, default_missing_value = "train")]
    print_default_config: Option<ConfigKind>,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ConfigKind {
    Train,
    Classifier,
    Ablation,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a paired dataset (or, with --unpaired/--shift, a style-shifted unpaired set).
    Phantom(PhantomArgs),
    /// Paired training from scratch (pretrain or baseline stage).
    Train(TrainArgs),
    /// Alternating paired/unpaired fine-tuning from a pretrained checkpoint.
    Finetune(FinetuneArgs),
    /// Reconstruction and classification metrics of a checkpoint on a test set.
    Eval(EvalArgs),
    /// Sweep lambda4 over several seeds and tabulate the metrics.
    Ablate(AblateArgs),
    /// Mean-intensity projection of a volume.
    Drr(DrrArgs),
    /// Write a volume as one PGM image per slice.
    Export(ExportArgs),
}

#[derive(Args, Debug)]
struct OutArgs {
    /// Output directory; must be empty or absent.
    #[arg(long)]
    out: PathBuf,
    /// Write into a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct PhantomArgs {
    #[arg(long)]
    n: usize,
    /// Volume side; volumes are side^3.
    #[arg(long, default_value_t = 32)]
    side: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Healthy,sick,tb proportions.
    #[arg(long, default_value = "0.3333333333333333,0.3333333333333333,0.3333333333333334")]
    class_mix: ClassMix,
    /// Sample from the shifted geometry prior and style-shift the X-rays.
    #[arg(long)]
    unpaired: bool,
    /// Style shift as gamma,contrast,noise_sigma,vignette; implies --unpaired.
    #[arg(long, value_parser = parse_shift)]
    shift: Option<StyleShiftParams>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum PairedStage {
    Pretrain,
    Baseline,
}

impl From<PairedStage> for Stage {
    fn from(s: PairedStage) -> Self {
        match s {
            PairedStage::Pretrain => Stage::Pretrain,
            PairedStage::Baseline => Stage::Baseline,
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Training config (JSON); defaults apply to omitted fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Paired dataset directory.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = PairedStage::Pretrain)]
    stage: PairedStage,
    /// Continue from a checkpoint of an earlier run in the same directory.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    /// Training config (JSON); defaults to the config stored in --start.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Unpaired X-ray set directory.
    #[arg(long)]
    unpaired: PathBuf,
    /// Pretrained checkpoint to start from.
    #[arg(long, required_unless_present = "resume")]
    start: Option<PathBuf>,
    #[arg(long, conflicts_with = "start")]
    resume: Option<PathBuf>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Unpaired test set directory.
    #[arg(long)]
    test: PathBuf,
    /// Paired dataset for the proxy classifier; without it only reconstruction metrics are reported.
    #[arg(long)]
    classifier_data: Option<PathBuf>,
    /// Classifier training config (JSON).
    #[arg(long)]
    classifier_config: Option<PathBuf>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args, Debug)]
struct AblateArgs {
    /// Ablation config (JSON); defaults apply to omitted fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    unpaired: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    classifier_data: Option<PathBuf>,
    /// Comma-separated lambda4 values; overrides the config.
    #[arg(long, value_delimiter = ',')]
    lambda4: Option<Vec<f64>>,
    /// Number of seeds, counted up from the base config seed; overrides the config.
    #[arg(long)]
    seeds: Option<usize>,
    /// Parallel workers; XCT_THREADS takes precedence.
    #[arg(long)]
    jobs: Option<usize>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args, Debug)]
struct DrrArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "coronal")]
    plane: Plane,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value = "coronal")]
    plane: Plane,
    #[command(flatten)]
    out: OutArgs,
}

fn parse_shift(s: &str) -> Result<StyleShiftParams, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| format!("shift: {e}"))?;
    let [gamma, contrast, noise_sigma, vignette] = v[..] else {
        return Err(format!("shift needs 4 entries (gamma,contrast,noise,vignette), got {}", v.len()));
    };
    if gamma <= 0.0 || v.iter().any(|x| !x.is_finite()) || noise_sigma < 0.0 {
        return Err("shift needs finite values, gamma > 0 and noise >= 0".into());
    }
    Ok(StyleShiftParams {
        gamma,
        contrast,
        noise_sigma,
        vignette,
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp_secs()
        .init();
    let cli = Cli::parse();
    let result = match (cli.print_default_config, cli.command) {
        (Some(kind), _) => commands::print_default_config(kind),
        (None, Some(cmd)) => commands::dispatch(cmd),
        (None, None) => Err(run::usage("no command given (see --help)")),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(run::exit_code(&e) as u8)
        }
    }
}
