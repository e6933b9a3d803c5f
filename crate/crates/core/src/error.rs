use num_complex::Complex64;
use thiserror::Error;

/// Errors raised by the map, tree, pressure, measure and validator layers.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum LabError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("{value} is an omitted value of the map and has no preimage on the requested sheets")]
    OmittedValue { value: Complex64 },

    #[error("{value} is a critical value; its preimages are degenerate")]
    CriticalValue { value: Complex64 },

    #[error("inverse branch did not converge on sheet {sheet} for w = {value}")]
    NonConvergence { value: Complex64, sheet: i64 },

    #[error("tree node {node} at depth {depth} has no preimages: {source}")]
    OmittedValueAtNode {
        depth: usize,
        node: Complex64,
        source: Box<LabError>,
    },

    #[error("preimage tree exceeded the node budget of {budget} at depth {depth}")]
    TreeBudgetExceeded { depth: usize, budget: usize },

    #[error("pressure needs at least {required} depths, got {got}")]
    InsufficientDepth { required: usize, got: usize },

    #[error("restriction excludes every preimage at depth {depth}")]
    DegenerateRestriction { depth: usize },

    #[error("restricted pressure did not stabilise: last two radii differ by {gap:.4} (tolerance {tol})")]
    NoStabilization { gap: f64, tol: f64 },

    #[error("bad bracket: P({t_lo}) = {p_lo:.4} ± {e_lo:.4}, P({t_hi}) = {p_hi:.4} ± {e_hi:.4}")]
    BadBracket {
        t_lo: f64,
        p_lo: f64,
        e_lo: f64,
        t_hi: f64,
        p_hi: f64,
        e_hi: f64,
    },

    #[error("pressure regime is inconclusive: {0}")]
    Inconclusive(String),

    #[error("normaliser underflowed or is not positive")]
    DegenerateNormalizer,

    #[error("test disc around {center} with radius {radius} is not certified injective")]
    NonInjectiveTestSet { center: Complex64, radius: f64 },

    #[error("reweighted mass is not finite")]
    InfiniteMass,

    #[error("inverse branch is undefined on the disc: it meets the singular set at {point}")]
    BranchUndefined { point: Complex64 },

    #[error("only {count} boxes survive at the finest scale (need {required})")]
    TooFewCells { count: usize, required: usize },

    #[error("map is not hyperbolic: {0}")]
    NotHyperbolic(String),
}

pub type Result<T> = std::result::Result<T, LabError>;
