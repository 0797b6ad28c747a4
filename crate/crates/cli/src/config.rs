use std::path::{Path, PathBuf};

use facesim::dataset::ExpressionLabel;
use facesim::eval::{PipelineConfig, TranscoderPath};
use facesim::gplvm::{FitOptions, VocabularyStrategy};
use facesim::imagecore::SsimParams;
use facesim::matcher::{MatchConfig, Refinement};
use facesim::transcoder::TranscodeMode;
use serde::{Deserialize, Serialize};

use crate::error::{config, CliError, CliResult};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ObserverMode {
    /// Identity 0 is the observer.
    #[default]
    Single,
    /// The pixel-mean of every subject replaces the observer.
    Average,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum RefinementArg {
    None,
    PatternSearch,
    Barrier,
}

impl From<RefinementArg> for Refinement {
    fn from(r: RefinementArg) -> Self {
        match r {
            RefinementArg::None => Refinement::None,
            RefinementArg::PatternSearch => Refinement::PatternSearch,
            RefinementArg::Barrier => Refinement::Barrier,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum TranscoderArg {
    Joint,
    Pca,
}

impl From<TranscoderArg> for TranscoderPath {
    fn from(t: TranscoderArg) -> Self {
        match t {
            TranscoderArg::Joint => TranscoderPath::Joint,
            TranscoderArg::Pca => TranscoderPath::Pca,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum VocabularyArg {
    Grid,
    Gaussian,
}

/// Fully resolved settings of one command, written to `run.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub command: String,
    pub corpus: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Corpus seed for `gen-data`, fold and vocabulary seed elsewhere.
    pub seed: u64,
    pub identities: usize,
    pub dims: (usize, usize),
    pub latent_dim: usize,
    pub q_leaf: usize,
    pub q_root: usize,
    pub transcoder: TranscoderArg,
    pub vocabulary: VocabularyArg,
    pub vocabulary_count: usize,
    pub refinement: RefinementArg,
    pub max_refine_iters: usize,
    pub gplvm_max_iters: usize,
    pub observer_mode: ObserverMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            command: String::new(),
            corpus: None,
            out: None,
            seed: 42,
            identities: 29,
            dims: (140, 154),
            latent_dim: 9,
            q_leaf: 2,
            q_root: 2,
            transcoder: TranscoderArg::Joint,
            vocabulary: VocabularyArg::Grid,
            vocabulary_count: 400,
            refinement: RefinementArg::PatternSearch,
            max_refine_iters: 100,
            gplvm_max_iters: 500,
            observer_mode: ObserverMode::Single,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| CliError::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Checks every value against the preconditions of the stage that uses it.
    pub fn validate(&self) -> CliResult<()> {
        let classes = ExpressionLabel::ALL.len();
        if self.identities < 2 {
            return Err(config(
                "identities",
                format!("need >= 2 identities (observer plus a subject), got {}", self.identities),
            ));
        }
        if self.latent_dim == 0 || self.latent_dim > classes - 1 {
            return Err(config(
                "latent_dim",
                format!("L = {} must lie in 1..={} (one less than the number of expressions)", self.latent_dim, classes - 1),
            ));
        }
        for (key, q) in [("q_leaf", self.q_leaf), ("q_root", self.q_root)] {
            if q == 0 || q > classes {
                return Err(config(key, format!("must lie in 1..={classes}, got {q}")));
            }
        }
        if self.vocabulary_count == 0 {
            return Err(config("vocabulary_count", "must be at least 1"));
        }
        Ok(())
    }

    /// Images of `dims` must hold the matching window.
    pub fn validate_dims(&self, dims: (usize, usize)) -> CliResult<()> {
        self.match_config()
            .ssim_params
            .validate(dims.0, dims.1)
            .map_err(|e| config("dims", e.to_string()))
    }

    pub fn match_config(&self) -> MatchConfig {
        MatchConfig {
            vocabulary_strategy: match self.vocabulary {
                VocabularyArg::Grid => VocabularyStrategy::Grid,
                VocabularyArg::Gaussian => VocabularyStrategy::Gaussian { seed: self.seed },
            },
            vocabulary_count: self.vocabulary_count,
            refinement: self.refinement.into(),
            max_refine_iters: self.max_refine_iters,
            latent_bounds: None,
            ssim_params: SsimParams::default(),
        }
    }

    pub fn fit_options(&self) -> FitOptions {
        FitOptions {
            max_iters: self.gplvm_max_iters,
            ..FitOptions::default()
        }
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            fold_seed: self.seed,
            transcoder_path: self.transcoder.into(),
            latent_dim: self.latent_dim,
            transcode_mode: TranscodeMode::Mean,
            q_leaf: self.q_leaf,
            q_root: self.q_root,
            fit_options: self.fit_options(),
            matcher: self.match_config(),
            report_pca_transcode: true,
        }
    }
}
