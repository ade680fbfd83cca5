use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("schedule configuration: {0}")]
    ScheduleConfig(String),

    #[error("dimension mismatch: expected {expected:?}, found {found:?}")]
    Dimension { expected: Vec<usize>, found: Vec<usize> },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("timestep {t} out of range for operation `{op}` (T = {total})")]
    TimestepRange { op: &'static str, t: usize, total: usize },

    #[error("numeric divergence at timestep {t}: {what}")]
    NumericDivergence { t: usize, what: String },

    #[error("optimizer diverged at timestep {t} (loss {loss:.3e} > 10x initial {initial:.3e}); try a smaller step")]
    OptimizerDivergence { t: usize, loss: f64, initial: f64 },

    #[error("tiling: {0}")]
    Tiling(String),

    #[error("resize: {0}")]
    Resize(String),

    #[error("geometry: {0}")]
    Geometry(String),

    #[error("synchronization barrier: {0}")]
    SyncBarrier(String),

    #[error("metric: {0}")]
    Metric(String),

    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: usize, msg: String },

    #[error("config: {0}")]
    Config(String),

    #[error("cannot access {path}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("image codec: {0}")]
    Codec(String),

    /// Pipeline failure with the stage, patch and timestep it happened in.
    #[error("stage `{stage}`{}{} failed", fmt_patch(*patch), fmt_t(*t))]
    Stage {
        stage: &'static str,
        patch: Option<usize>,
        t: Option<usize>,
        #[source]
        source: Box<Error>,
    },
}

fn fmt_patch(p: Option<usize>) -> String {
    p.map(|p| format!(" patch {p}")).unwrap_or_default()
}

fn fmt_t(t: Option<usize>) -> String {
    t.map(|t| format!(" t={t}")).unwrap_or_default()
}

impl Error {
    pub(crate) fn dims(expected: &[usize], found: &[usize]) -> Self {
        Error::Dimension {
            expected: expected.to_vec(),
            found: found.to_vec(),
        }
    }

    pub(crate) fn at_stage(self, stage: &'static str, patch: Option<usize>, t: Option<usize>) -> Self {
        Error::Stage {
            stage,
            patch,
            t,
            source: Box::new(self),
        }
    }

    /// Innermost error, looking through stage wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            e => e,
        }
    }

    /// True for numeric blow-ups (NaN trajectories, optimizer divergence).
    pub fn is_numeric(&self) -> bool {
        matches!(
            self.root(),
            Error::NumericDivergence { .. } | Error::OptimizerDivergence { .. }
        )
    }
}
