//! Chunk-based memory planning for large-model training: trace model,
//! hardware profiles, chunk/activation layouts, analytic cost models, the
//! constrained configuration search and a discrete-event iteration
//! simulator.

pub mod cli;
pub mod cost;
pub mod hardware;
pub mod layout;
pub mod presets;
pub mod search;
pub mod sim;
pub mod trace;

use thiserror::Error;

/// Any domain failure, tagged with the module that raised it.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Trace(#[from] trace::TraceError),
    #[error(transparent)]
    Hardware(#[from] hardware::HardwareError),
    #[error(transparent)]
    Layout(#[from] layout::LayoutError),
    #[error(transparent)]
    Search(#[from] search::SearchError),
    #[error(transparent)]
    Sim(#[from] sim::SimError),
    #[error(transparent)]
    Preset(#[from] presets::PresetError),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{0}")]
    Format(String),
}

impl Error {
    pub fn module(&self) -> &'static str {
        match self {
            Error::Trace(_) => "trace",
            Error::Hardware(_) => "hardware",
            Error::Layout(_) => "layout",
            Error::Search(_) => "search",
            Error::Sim(_) => "sim",
            Error::Preset(_) => "presets",
            Error::Io { .. } => "io",
            Error::Format(_) => "format",
        }
    }

    /// Variant name of the wrapped module error, e.g. `NoFeasibleConfig`.
    pub fn kind(&self) -> String {
        let debug = match self {
            Error::Trace(e) => format!("{e:?}"),
            Error::Hardware(e) => format!("{e:?}"),
            Error::Layout(e) => format!("{e:?}"),
            Error::Search(e) => format!("{e:?}"),
            Error::Sim(e) => format!("{e:?}"),
            Error::Preset(e) => format!("{e:?}"),
            Error::Io { .. } => "Io".into(),
            Error::Format(_) => "Format".into(),
        };
        debug
            .chars()
            .take_while(|c| c.is_alphanumeric() || *c == '_')
            .collect()
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Format(e.to_string())
    }
}
