use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use layerdiff_core::rgba::ImageFormat;
use layerdiff_core::ErrorCategory;

mod commands;

#[derive(Parser, Debug)]
#[command(name = "layerdiff", version, about = "Layered RGBA design generation and decomposition")]
struct Cli {
    /// Run config (JSON). Without it the desk preset is used with paths
    /// relative to the working directory.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Preset used when no --config is given.
    #[arg(long, global = true, default_value = "desk")]
    preset: String,

    /// Print per-step training losses every N steps (0 = quiet).
    #[arg(long, global = true, default_value_t = 100)]
    log_every: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Png,
    Lrga,
}

impl From<Format> for ImageFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Png => ImageFormat::Png,
            Format::Lrga => ImageFormat::Lrga,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the selected preset as a config file.
    InitConfig {
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate the synthetic layered corpus.
    GenData {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "png")]
        format: Format,
    },
    /// Train the RGBA autoencoder on the corpus.
    TrainVae {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the diffusion transformer on encoded corpus designs.
    TrainDit {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        vae: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from the checkpoint at --out when it exists.
        #[arg(long)]
        resume: bool,
    },
    /// Text to layers; `--layers 0` generates a single image.
    Generate {
        #[command(flatten)]
        prompt: PromptArgs,
        #[arg(long)]
        layers: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        models: ModelArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "png")]
        format: Format,
    },
    /// Split an image into layers.
    Decompose {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        layers: usize,
        #[command(flatten)]
        prompt: PromptArgs,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        models: ModelArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "png")]
        format: Format,
    },
    /// Blend `<prefix>layer<k>` images of a directory back to front.
    Composite {
        dir: PathBuf,
        #[arg(long, default_value = "")]
        prefix: String,
        /// Output image; defaults to `<dir>/<prefix>recomposed.<ext>`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "png")]
        format: Format,
    },
    /// Reconstruction and decomposition metrics over the corpus.
    Eval {
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        models: ModelArgs,
        /// Number of layered designs to decompose.
        #[arg(long, default_value_t = 4)]
        designs: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(clap::Args, Debug)]
struct PromptArgs {
    /// Free text (expanded by the template expander) or a sectioned prompt
    /// starting with `Scene Description:`.
    #[arg(long, conflicts_with = "prompt_file")]
    prompt: Option<String>,
    #[arg(long)]
    prompt_file: Option<PathBuf>,
}

#[derive(clap::Args, Debug)]
struct ModelArgs {
    #[arg(long)]
    vae: Option<PathBuf>,
    #[arg(long)]
    dit: Option<PathBuf>,
    /// Euler steps; defaults to the config's dit.steps.
    #[arg(long)]
    steps: Option<usize>,
}

fn exit_code(category: ErrorCategory) -> u8 {
    match category {
        ErrorCategory::Config => 3,
        ErrorCategory::Data => 4,
        ErrorCategory::Io => 5,
        ErrorCategory::Numeric => 6,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let cat = e.category();
            eprintln!("error[{}]: {e}", cat.as_str());
            ExitCode::from(exit_code(cat))
        }
    }
}
