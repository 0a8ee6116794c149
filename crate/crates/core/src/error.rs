use thiserror::Error;

use crate::domain::TreatmentArm;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("site {0}: empty dataset")]
    EmptyDataset(String),
    #[error("site {site}: invalid dataset: {problems}")]
    InvalidDataset { site: String, problems: String },
    #[error("csv line {line}: {message}")]
    Csv { line: u64, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("degenerate response")]
    DegenerateResponse,
    #[error("singular design")]
    SingularDesign,
    #[error("singular matrix in {0}")]
    Singular(&'static str),
    #[error("insufficient arm size ({arm}, {n_arm})")]
    InsufficientArm { arm: TreatmentArm, n_arm: usize },
    #[error("no arm-{arm} patients in {context}")]
    EmptyArm { arm: TreatmentArm, context: &'static str },
    #[error("tilt infeasible: {0}")]
    TiltInfeasible(String),
    #[error("tilt did not converge (residual {residual_norm:.3e})")]
    TiltNotConverged { residual_norm: f64 },
    #[error("general corrections implemented for continuous outcome only")]
    GeneralModeBinary,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("site {site}: no feasible half/half split after {attempts} draws")]
    SplitInfeasible { site: String, attempts: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Protocol(#[from] crate::federation::ProtocolError),
    #[error("site {site}: {source}")]
    Site {
        site: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn at_site(self, site: &str) -> Error {
        match self {
            e @ Error::Site { .. } => e,
            e => Error::Site {
                site: site.to_string(),
                source: Box::new(e),
            },
        }
    }
}
