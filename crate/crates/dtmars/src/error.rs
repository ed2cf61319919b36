use std::fmt;
use std::path::PathBuf;

/// Pipeline stage a runtime failure came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Synth,
    Load,
    DetectorPretrain,
    Gan,
    Translate,
    DetectorFinetune,
    Evaluate,
    Rows,
    Checkpoint,
    Report,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Synth => "synth",
            Stage::Load => "load",
            Stage::DetectorPretrain => "detector-pretrain",
            Stage::Gan => "gan",
            Stage::Translate => "translate",
            Stage::DetectorFinetune => "detector-finetune",
            Stage::Evaluate => "evaluate",
            Stage::Rows => "rows",
            Stage::Checkpoint => "checkpoint",
            Stage::Report => "report",
        };
        f.write_str(s)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    /// Bad input: config, dataset layout or label contents.
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("[{stage}] {source}")]
    Core {
        stage: Stage,
        #[source]
        source: dtmars_core::Error,
    },
    #[error("[{stage}] {path}: {source}")]
    Io {
        stage: Stage,
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("[{stage}] {message}")]
    Runtime { stage: Stage, message: String },
}

impl PipelineError {
    pub fn io(stage: Stage, path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { stage, path: path.into(), source }
    }

    pub fn runtime(stage: Stage, message: impl Into<String>) -> Self {
        Self::Runtime { stage, message: message.into() }
    }

    /// Process exit code: 1 for validation errors, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Validation(_) => 1,
            Self::Core { source: dtmars_core::Error::Config(_), .. } => 1,
            _ => 2,
        }
    }
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

/// Tags core errors with the stage they surfaced in.
pub trait StageExt<T> {
    fn stage(self, stage: Stage) -> Result<T>;
}

impl<T> StageExt<T> for dtmars_core::Result<T> {
    fn stage(self, stage: Stage) -> Result<T> {
        self.map_err(|source| PipelineError::Core { stage, source })
    }
}
