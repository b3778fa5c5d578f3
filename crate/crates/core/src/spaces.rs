//! Tagged linear-algebra types.
//!
//! States carry a tag identifying the space they live in: `H` is the state
//! Hilbert space of the finite-dimensional surrogate, `HBar` the larger space
//! reached by the unbounded control operator. Both share the same coordinate
//! representation in the model basis; the tag selects the norm and gates the
//! operations that are only defined on one of the two spaces.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::CoreError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpaceTag {
    H,
    HBar,
}

/// A state in `H` or `HBar`, as coefficients in a fixed model basis.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    pub coords: DVector<f64>,
    pub space: SpaceTag,
}

impl StateVector {
    pub fn new(coords: DVector<f64>, space: SpaceTag) -> Result<Self, CoreError> {
        if !coords.iter().all(|x| x.is_finite()) {
            return Err(CoreError::invalid("state vector has non-finite entries"));
        }
        Ok(StateVector { coords, space })
    }

    pub fn in_h(coords: DVector<f64>) -> Self {
        StateVector { coords, space: SpaceTag::H }
    }

    pub fn in_hbar(coords: DVector<f64>) -> Self {
        StateVector { coords, space: SpaceTag::HBar }
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }
}

/// A linear operator between tagged spaces, stored densely.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorMatrix {
    pub entries: DMatrix<f64>,
    pub domain: SpaceTag,
    pub codomain: SpaceTag,
}

impl OperatorMatrix {
    pub fn new(entries: DMatrix<f64>, domain: SpaceTag, codomain: SpaceTag) -> Result<Self, CoreError> {
        if !entries.iter().all(|x| x.is_finite()) {
            return Err(CoreError::invalid("operator matrix has non-finite entries"));
        }
        Ok(OperatorMatrix { entries, domain, codomain })
    }

    pub fn on_h(entries: DMatrix<f64>) -> Self {
        OperatorMatrix { entries, domain: SpaceTag::H, codomain: SpaceTag::H }
    }

    pub fn apply(&self, x: &StateVector) -> Result<StateVector, CoreError> {
        if x.space != self.domain {
            return Err(CoreError::invalid("operator applied to vector from the wrong space"));
        }
        if x.dim() != self.entries.ncols() {
            return Err(CoreError::DimensionMismatch { expected: self.entries.ncols(), got: x.dim() });
        }
        Ok(StateVector { coords: &self.entries * &x.coords, space: self.codomain })
    }

    /// Relative asymmetry `|M - M^T| / |M|` in Frobenius norm.
    pub fn asymmetry(&self) -> f64 {
        let norm = self.entries.norm();
        if norm == 0.0 {
            return 0.0;
        }
        (&self.entries - self.entries.transpose()).norm() / norm
    }
}

/// Positive nodes and weights for a time quadrature on `(0, t]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuadratureRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn new(nodes: Vec<f64>, weights: Vec<f64>) -> Result<Self, CoreError> {
        if nodes.len() != weights.len() {
            return Err(CoreError::DimensionMismatch { expected: nodes.len(), got: weights.len() });
        }
        if !nodes.windows(2).all(|p| p[0] < p[1]) || nodes.first().copied().unwrap_or(1.0) <= 0.0 {
            return Err(CoreError::invalid("quadrature nodes must be strictly increasing and positive"));
        }
        if !weights.iter().all(|&w| w > 0.0) {
            return Err(CoreError::invalid("quadrature weights must be positive"));
        }
        Ok(QuadratureRule { nodes, weights })
    }

    /// 64-node composite Gauss-Legendre rule on `(0, t)`.
    pub fn gauss_legendre(t: f64) -> Self {
        let (nodes, weights) = crate::numeric::gauss_legendre_on(64, 0.0, t);
        QuadratureRule { nodes, weights }
    }
}
