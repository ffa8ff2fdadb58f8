use thiserror::Error;

/// Errors raised by the solver library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error(
        "discount dominance violated: need r > 2C_mu + C_sigma^2 + int C_j^2 dnu, \
         got r = {discount} <= {threshold}"
    )]
    DiscountTooSmall { discount: f64, threshold: f64 },

    #[error("non-finite {what} at {location:?}")]
    NonFinite { what: String, location: Vec<f64> },

    #[error("integrability condition `{condition}` violated: {detail}")]
    Divergent { condition: String, detail: String },

    #[error("coercivity bound not covered: search radius {search} < R_B = {required}")]
    CoercivityNotCovered { search: f64, required: f64 },

    #[error("grid too small: {0}")]
    GridTooSmall(String),

    #[error("box too narrow: off-box jump mass {mass:.3e} at core nodes exceeds {threshold:.1e}")]
    BoxTooNarrow { mass: f64, threshold: f64 },

    #[error("non-monotone stencil at node {node}: {detail}; use the upwind drift scheme")]
    NonMonotone { node: usize, detail: String },

    #[error("newton iteration did not converge at eps = {eps:.3e}; residual history {residuals:?}")]
    NewtonDiverged { eps: f64, residuals: Vec<f64> },

    #[error("outer iteration did not converge after {} steps; distances {distances:?}", distances.len())]
    OuterDiverged { distances: Vec<f64> },

    #[error("state blow-up at step {step}: |X| = {norm:.3e}")]
    BlowUp { step: usize, norm: f64 },

    #[error("impulse loop at t = {time:.4}: post-impulse state {state:?} is still in the action region")]
    ImpulseLoop { time: f64, state: Vec<f64> },

    #[error("{0}")]
    EmptyRegion(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
