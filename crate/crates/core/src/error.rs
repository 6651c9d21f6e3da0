use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("degenerate simplex (volume {0:e})")]
    DegenerateSimplex(f64),
    #[error("point lies outside the simplex")]
    OutsideSimplex,
    #[error("barycentric point is not on the face between subcells {0} and {1}")]
    NotOnFace(usize, usize),
    #[error("degenerate slice [{a:?}, {b:?}]: {reason}")]
    DegenerateSlice {
        a: [f64; 2],
        b: [f64; 2],
        reason: &'static str,
    },
    #[error("point {0:?} is outside the covered region")]
    OutsideRegion([f64; 2]),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("invalid domain: {0}")]
    InvalidDomain(String),
    #[error("collar construction failed: {0}")]
    Collar(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("budget not met: {0}")]
    Budget(String),
}

impl Error {
    /// True for failures that a fresh random shift is expected to cure.
    pub fn is_degenerate(&self) -> bool {
        matches!(self, Error::DegenerateSlice { .. })
    }
}
