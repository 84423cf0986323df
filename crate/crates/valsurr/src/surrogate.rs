//! The surrogate abstraction the feedback synthesizer consumes:
//! anything exposing a value and a gradient at a point.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SurrogateError {
    #[error("point {point:?} left the surrogate's training box: {detail}")]
    OutOfDomain { point: Vec<f64>, detail: String },
    #[error("dimension mismatch: surrogate expects {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("surrogate evaluation failed: {0}")]
    Evaluation(String),
}

impl SurrogateError {
    pub(crate) fn from_tt(e: crate::tt::TTError, x: &[f64]) -> Self {
        match e {
            crate::tt::TTError::Basis(crate::basis::BasisError::OutOfDomain { x: coord, a, b }) => {
                SurrogateError::OutOfDomain {
                    point: x.to_vec(),
                    detail: format!("coordinate {coord} outside [{a}, {b}]"),
                }
            }
            crate::tt::TTError::DimensionMismatch { expected, got } => {
                SurrogateError::DimensionMismatch { expected, got }
            }
            other => SurrogateError::Evaluation(other.to_string()),
        }
    }
}

/// Scalar field with a gradient, defined on a box.
pub trait Surrogate {
    fn value(&self, x: &[f64]) -> Result<f64, SurrogateError>;
    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>, SurrogateError>;
    /// Free parameters of the representation (reported, never asserted).
    fn dofs(&self) -> usize;
}

/// Closed-form scalar field wrapped as a surrogate; used to feed exact
/// value functions into feedback laws in tests and baselines.
pub struct AnalyticSurrogate<V, G>
where
    V: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    value: V,
    gradient: G,
}

impl<V, G> AnalyticSurrogate<V, G>
where
    V: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    pub fn new(value: V, gradient: G) -> Self {
        Self { value, gradient }
    }
}

impl<V, G> Surrogate for AnalyticSurrogate<V, G>
where
    V: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    fn value(&self, x: &[f64]) -> Result<f64, SurrogateError> {
        Ok((self.value)(x))
    }

    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>, SurrogateError> {
        Ok((self.gradient)(x))
    }

    fn dofs(&self) -> usize {
        0
    }
}
