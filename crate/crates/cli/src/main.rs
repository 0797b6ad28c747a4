mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{ObserverMode, RefinementArg, RunConfig, TranscoderArg, VocabularyArg};

#[derive(Parser)]
#[command(name = "facesim", version, about = "Expression detection by transcoding and latent-space matching")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic corpus to PNGs plus a manifest.
    GenData {
        #[arg(long)]
        identities: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Fit the transcoder and the hierarchical latent model.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        tuning: Tuning,
    },
    /// Transcode one image, match it in latent space and classify it.
    Detect {
        /// Directory written by `train`.
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Treat the input as already in the observer's identity.
        #[arg(long)]
        skip_transcode: bool,
        #[command(flatten)]
        tuning: Tuning,
    },
    /// Run the cross-validated protocol, or only the fixture checks.
    Evaluate {
        #[arg(long, required_unless_present = "fixtures")]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Recompute the published metric averages and p-values; needs no corpus.
        #[arg(long)]
        fixtures: bool,
        #[command(flatten)]
        tuning: Tuning,
    },
    /// Write the training latents of a fitted model as CSV.
    ExportLatents {
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Settings shared by the model-using commands; unset flags keep the
/// `--config` value or the default.
#[derive(Args, Default)]
struct Tuning {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Transcoder latent dimension L.
    #[arg(long = "l")]
    latent_dim: Option<usize>,
    #[arg(long)]
    q_leaf: Option<usize>,
    #[arg(long)]
    q_root: Option<usize>,
    #[arg(long, value_enum)]
    transcoder: Option<TranscoderArg>,
    #[arg(long, value_enum)]
    vocabulary: Option<VocabularyArg>,
    #[arg(long)]
    vocabulary_count: Option<usize>,
    #[arg(long, value_enum)]
    refinement: Option<RefinementArg>,
    #[arg(long)]
    max_refine_iters: Option<usize>,
    #[arg(long)]
    gplvm_max_iters: Option<usize>,
    #[arg(long, value_enum)]
    observer_mode: Option<ObserverMode>,
}

impl Tuning {
    fn resolve(&self, command: &str) -> error::CliResult<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        c.command = command.to_string();
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { c.$f = v; } )* };
        }
        set!(seed, latent_dim, q_leaf, q_root, transcoder, vocabulary, vocabulary_count, refinement, max_refine_iters, gplvm_max_iters, observer_mode);
        Ok(c)
    }
}

fn run(cli: Cli) -> error::CliResult<()> {
    match cli.command {
        Command::GenData {
            identities,
            seed,
            width,
            height,
            out,
            config,
        } => {
            let mut c = match &config {
                Some(p) => RunConfig::load(p)?,
                None => RunConfig::default(),
            };
            c.command = "gen-data".into();
            c.identities = identities.unwrap_or(c.identities);
            c.seed = seed.unwrap_or(c.seed);
            c.dims = (width.unwrap_or(c.dims.0), height.unwrap_or(c.dims.1));
            c.out = Some(out);
            commands::gen_data(&c)
        }
        Command::Train { corpus, out, tuning } => {
            let mut c = tuning.resolve("train")?;
            c.corpus = Some(corpus);
            c.out = Some(out);
            commands::train(&c)
        }
        Command::Detect {
            models,
            image,
            out,
            skip_transcode,
            tuning,
        } => {
            let mut c = tuning.resolve("detect")?;
            c.out = Some(out);
            commands::detect(&c, &models, &image, skip_transcode)
        }
        Command::Evaluate {
            corpus,
            out,
            fixtures,
            tuning,
        } => {
            let mut c = tuning.resolve("evaluate")?;
            c.corpus = corpus;
            c.out = out;
            if fixtures {
                commands::evaluate_fixtures(&c)
            } else {
                commands::evaluate(&c)
            }
        }
        Command::ExportLatents { models, out } => commands::export_latents(&models, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
