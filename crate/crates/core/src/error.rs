use thiserror::Error;

/// Every failure the library can report.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum LerisError {
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("receiver lies behind the emitter (irradiance angle {angle_rad} rad)")]
    BehindEmitter { angle_rad: f64 },

    #[error("mode power ratio {ratio} has no real distance solution")]
    InfeasibleRatio { ratio: f64 },

    #[error("ranges are inconsistent: line-sphere discriminant {discriminant}")]
    InconsistentRanges { discriminant: f64 },

    #[error("both trilateration roots are feasible: {first:?} and {second:?}")]
    AmbiguousSolution { first: [f64; 3], second: [f64; 3] },

    #[error("no trilateration root lies inside the room and the anchor footprints")]
    NoFeasibleRoot,

    #[error("direction matrix is ill-conditioned (det {det:e}, condition number {condition_number:e})")]
    IllConditioned { det: f64, condition_number: f64 },

    #[error("only {found} usable anchors, at least 3 are required")]
    InsufficientAnchors { found: usize },

    #[error("ranging is noise dominated: alpha {alpha:e} does not exceed z_R^2/d^2 = {bound:e}")]
    NoiseDominated { alpha: f64, bound: f64 },

    #[error("quadrature did not converge: {coarse:e} at 2x step vs {fine:e}, relative change {relative_change:e}")]
    Quadrature {
        coarse: f64,
        fine: f64,
        relative_change: f64,
    },

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("validation failed: {}", .0.join("; "))]
    Validation(Vec<String>),

    #[error("i/o error: {0}")]
    Io(String),
}

impl LerisError {
    /// Short stable tag used in machine-readable error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            LerisError::DegenerateGeometry(_) => "degenerate_geometry",
            LerisError::InvalidArgument(_) => "invalid_argument",
            LerisError::BehindEmitter { .. } => "behind_emitter",
            LerisError::InfeasibleRatio { .. } => "infeasible_ratio",
            LerisError::InconsistentRanges { .. } => "inconsistent_ranges",
            LerisError::AmbiguousSolution { .. } => "ambiguous_solution",
            LerisError::NoFeasibleRoot => "no_feasible_root",
            LerisError::IllConditioned { .. } => "ill_conditioned",
            LerisError::InsufficientAnchors { .. } => "insufficient_anchors",
            LerisError::NoiseDominated { .. } => "noise_dominated",
            LerisError::Quadrature { .. } => "quadrature",
            LerisError::Configuration(_) => "configuration",
            LerisError::Validation(_) => "validation",
            LerisError::Io(_) => "io",
        }
    }
}

impl From<std::io::Error> for LerisError {
    fn from(e: std::io::Error) -> Self {
        LerisError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, LerisError>;
