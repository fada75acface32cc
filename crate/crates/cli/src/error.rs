use std::fmt;

/// Pipeline stages in execution order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Dataset,
    Model,
    Genset,
    Attack,
    Evaluate,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Dataset,
        Stage::Model,
        Stage::Genset,
        Stage::Attack,
        Stage::Evaluate,
        Stage::Report,
    ];

    /// Directory and manifest name.
    pub fn name(self) -> &'static str {
        match self {
            Stage::Dataset => "dataset",
            Stage::Model => "model",
            Stage::Genset => "genset",
            Stage::Attack => "attack",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| format!("unknown stage {s:?}; expected one of dataset, model, genset, attack, evaluate, report"))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("ingestion error: {0}")]
    Ingest(String),

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: reidpatch::Error,
    },
}

impl CliError {
    pub fn in_stage(stage: Stage) -> impl FnOnce(reidpatch::Error) -> CliError {
        move |source| CliError::Stage { stage, source }
    }

    /// Process exit code for this error class. Usage errors exit with 2.
    pub fn exit_code(&self) -> i32 {
        use reidpatch::Error as E;
        match self {
            CliError::Config(_) => 3,
            CliError::Ingest(_) => 4,
            CliError::Stage { source, .. } => match source {
                E::Config(_) | E::InvalidArgument(_) => 3,
                E::Io(_) | E::Format { .. } | E::Codec(_) => 4,
                E::Training(_) | E::Numerical(_) => 5,
                E::Optimization { .. } | E::Sampling(_) | E::Augmentation(_) | E::Geometry(_) => 6,
                E::Protocol(_) => 7,
            },
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
