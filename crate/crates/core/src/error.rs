use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("point lies outside the domain of {0}")]
    OutsideDomain(String),

    #[error("point is not inside the action-angle chart: {0}")]
    NotInChart(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("function is not centered on the torus (mean {0:e})")]
    NotCentered(f64),

    #[error("function is not band-limited on the grid (tail ratio {0:e})")]
    NotBandLimited(f64),

    #[error("generator is not elliptic on the fiber (frequency matrix determinant {0:e})")]
    NotElliptic(f64),

    #[error("resonant Fourier mode {mode:?}: |lambda| = {lambda:e}")]
    Resonance { mode: Vec<i64>, lambda: f64 },

    #[error("operation requires {expected} model, got `{got}`")]
    WrongModel { expected: &'static str, got: String },

    #[error("perturbation `{0}` has no generating Hamiltonian")]
    NotHamiltonian(String),

    #[error("implicit step did not converge after {0} iterations")]
    NonConvergence(usize),

    #[error("all {0} paths exited the chart before the comparison time")]
    AllPathsExited(usize),

    #[error("not applicable: {0}")]
    NotApplicable(String),
}

impl Error {
    /// Stable short class name, used for machine-readable CLI errors.
    pub fn class(&self) -> &'static str {
        match self {
            Error::DimensionMismatch { .. } | Error::InvalidParameter { .. } => "validation",
            Error::NonFinite(_) | Error::NonConvergence(_) => "numerical",
            Error::OutsideDomain(_) | Error::NotInChart(_) => "domain",
            Error::NotCentered(_) | Error::NotBandLimited(_) => "poisson-input",
            Error::NotElliptic(_) | Error::Resonance { .. } => "resonance",
            Error::WrongModel { .. } | Error::NotHamiltonian(_) => "model",
            Error::AllPathsExited(_) => "early-exit",
            Error::NotApplicable(_) => "not-applicable",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
