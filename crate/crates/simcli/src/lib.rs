//! Orchestration for simulated device fleets: provisioning, tamper
//! injection, multi-device scenarios and latency benchmarks.

pub mod bench;
pub mod consortium;
pub mod devtree;
pub mod scenario;
pub mod transport;

use devintegrity::applet::AppletError;
use devintegrity::measure::MeasureError;
use devintegrity::pdl::PdlError;
use devintegrity::verifier::VerifierError;
use devintegrity::wire::WireError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("unknown device {0}")]
    UnknownDevice(String),
    #[error("vendor benchmark does not match the measured hash")]
    BenchmarkMismatch,
    #[error("audit failed: {0}")]
    Corruption(String),
    #[error("verifier rejected request: {class}: {detail}")]
    Remote { class: String, detail: String },
    #[error(transparent)]
    Applet(#[from] AppletError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error(transparent)]
    Ledger(#[from] PdlError),
    #[error(transparent)]
    Verifier(#[from] VerifierError),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl SimError {
    /// Class name printed on standard error by the CLI.
    pub fn class(&self) -> String {
        match self {
            SimError::ConfigInvalid(_) => "ConfigInvalid".into(),
            SimError::UnknownDevice(_) => "UnknownDevice".into(),
            SimError::BenchmarkMismatch => "BenchmarkMismatch".into(),
            SimError::Corruption(_) => "Corruption".into(),
            SimError::Remote { class, .. } if class == "BenchmarkMismatch" => class.clone(),
            SimError::Remote { class, .. } => format!("Remote{class}"),
            SimError::Applet(AppletError::WrongState { .. }) => "WrongState".into(),
            SimError::Applet(_) => "AppletError".into(),
            SimError::Measure(MeasureError::MissingArtifact(_)) => "MissingArtifact".into(),
            SimError::Measure(_) => "MeasureError".into(),
            SimError::Ledger(e) => format!("Ledger{}", pdl_class(e)),
            SimError::Verifier(e) => e.class().into(),
            SimError::Wire(_) => "MalformedMessage".into(),
            SimError::Io(_) => "StorageFailure".into(),
        }
    }
}

fn pdl_class(e: &PdlError) -> &'static str {
    match e {
        PdlError::UnknownSigner(_) => "UnknownSigner",
        PdlError::UnknownParticipant(_) => "UnknownParticipant",
        PdlError::BadSignature(_) => "BadSignature",
        PdlError::QuorumNotMet { .. } => "QuorumNotMet",
        PdlError::BadConfirmation => "BadConfirmation",
        PdlError::WrongRole { .. } => "WrongRole",
        PdlError::InvalidParticipants(_) => "InvalidParticipants",
        PdlError::InvalidRecord(_) => "InvalidRecord",
        PdlError::NotFound => "NotFound",
        PdlError::Corrupt(_) => "Corrupt",
        PdlError::Io(_) => "Io",
    }
}

pub type Result<T, E = SimError> = std::result::Result<T, E>;
