use thiserror::Error;

use crate::event::SimTime;

/// Errors surfaced by the simulator, the scenario loader and the analysis
/// toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid scenario: {0}")]
    Validation(String),

    #[error("cannot schedule event at {at} (clock is at {now})")]
    ScheduleInPast { at: SimTime, now: SimTime },

    #[error("cannot run until {end}: clock is already at {now}")]
    EndBeforeClock { end: SimTime, now: SimTime },

    #[error("analysis error: {0}")]
    Analysis(String),

    #[error("trajectory diverged at t = {t} s (|x| = {norm:e})")]
    Divergence { t: f64, norm: f64 },

    #[error("unknown suite `{0}`")]
    UnknownSuite(String),

    #[error("bad override `{0}`")]
    Override(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Process exit code for the command-line front end: 2 for configuration
    /// problems, 3 for runtime divergence, 1 for anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Parse { .. }
            | Error::Validation(_)
            | Error::UnknownSuite(_)
            | Error::Override(_) => 2,
            Error::Divergence { .. } => 3,
            _ => 1,
        }
    }
}
