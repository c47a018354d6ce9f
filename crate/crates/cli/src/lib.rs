//! Library side of the `vidpred` binary: run configuration, evaluation
//! helpers and one function per subcommand.

pub mod commands;
pub mod eval;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vidpred::data::{load_dataset, synth_generate, SynthSpec, VideoClip};
use vidpred::metrics::EmbedderConfig;
use vidpred::nets::GeneratorConfig;
use vidpred::rnn::UnitKind;
use vidpred::trainer::TrainConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Run(#[from] vidpred::Error),
}

impl CliError {
    /// 1 for bad invocations and configurations, 2 for runtime failures.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Run(vidpred::Error::Config(_)) => 1,
            CliError::Run(_) => 2,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Run(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Run(e.into())
    }
}

impl From<vidpred_tensor::TensorError> for CliError {
    fn from(e: vidpred_tensor::TensorError) -> Self {
        CliError::Run(e.into())
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Where training and evaluation clips come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub spec: SynthSpec,
    /// Generation seed and size of the synthetic training split.
    pub seed: u64,
    pub clips: usize,
    /// Held-out synthetic split used when no dataset file is given.
    pub eval_seed: u64,
    pub eval_clips: usize,
    /// A `.tvid` file replacing the synthetic training split.
    pub dataset: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            spec: SynthSpec::default(),
            seed: 1000,
            clips: 3000,
            eval_seed: 2000,
            eval_clips: 512,
            dataset: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricConfig {
    pub embedder: EmbedderConfig,
    /// A saved embedder to load instead of training one.
    pub embedder_dir: Option<PathBuf>,
    /// Videos per side for FVD and IS.
    pub samples: usize,
    pub seed: u64,
    /// Continuation counts for the best-of-ℓ SSIM curves.
    pub best_of: Vec<usize>,
    /// Conditioning clips averaged in each best-of-ℓ curve.
    pub ssim_clips: usize,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            embedder: EmbedderConfig::default(),
            embedder_dir: None,
            samples: 256,
            seed: 3000,
            best_of: vec![1, 5, 25],
            ssim_clips: 8,
        }
    }
}

/// Everything one run needs, read from a single JSON file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: DataConfig,
    pub metrics: MetricConfig,
}

pub const RUN_FILE: &str = "run.json";

impl RunConfig {
    /// The desk-scale setup: 32×32 video, `ch = 16`, TSRU_p and the
    /// stronger decomposition for 20k steps at batch 16.
    pub fn desk() -> Self {
        RunConfig {
            train: TrainConfig {
                generator: GeneratorConfig {
                    ch: 16,
                    start_res: 4,
                    stages: 3,
                    unit: UnitKind::TsruP,
                    ..GeneratorConfig::default()
                },
                ..TrainConfig::default()
            },
            ..RunConfig::default()
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        self.train.validate()?;
        self.data.spec.validate()?;
        self.metrics.embedder.validate()?;
        let g = &self.train.generator;
        if self.data.spec.frames < g.frames() {
            return Err(CliError::Usage(format!(
                "data.spec.frames = {} is shorter than the {} frames the generator needs",
                self.data.spec.frames,
                g.frames()
            )));
        }
        if self.metrics.samples < 2 {
            return Err(CliError::Usage("metrics.samples must be at least 2".into()));
        }
        if self.metrics.best_of.contains(&0) {
            return Err(CliError::Usage("metrics.best_of entries must be positive".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str, origin: &str) -> CliResult<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| CliError::Usage(format!("{origin}: {e}")))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        Self::from_json(&text, &path.display().to_string())
    }

    /// The training split: the dataset file if configured, else synthetic.
    pub fn train_clips(&self) -> CliResult<Vec<VideoClip>> {
        match &self.data.dataset {
            Some(p) => Ok(load_dataset(p)?),
            None => Ok(synth_generate(&self.data.spec, self.data.seed, self.data.clips)?),
        }
    }

    pub fn eval_clips(&self, dataset: Option<&Path>) -> CliResult<Vec<VideoClip>> {
        match dataset {
            Some(p) => Ok(load_dataset(p)?),
            None => Ok(synth_generate(&self.data.spec, self.data.eval_seed, self.data.eval_clips)?),
        }
    }
}

/// Run configuration stored next to a checkpoint directory, with its
/// training section replaced by the checkpoint's own.
pub fn run_config_for(checkpoint: &Path, explicit: Option<&Path>, train: &TrainConfig) -> CliResult<RunConfig> {
    let mut cfg = match explicit {
        Some(p) => RunConfig::load(p)?,
        None => {
            let beside = checkpoint.parent().map(|d| d.join(RUN_FILE));
            match beside {
                Some(p) if p.exists() => RunConfig::load(&p)?,
                _ => RunConfig::default(),
            }
        }
    };
    cfg.train = train.clone();
    Ok(cfg)
}
