//! Splits an adapter delta against the source weight's bases into the
//! range-range block, the null-null block, and the two cross blocks.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::linalg::{Matrix, Space, SpectralBases};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComponentNorms {
    pub total: f64,
    pub par: f64,
    pub perp: f64,
    pub residual: f64,
}

#[derive(Debug, Clone)]
pub struct DecomposedDelta {
    /// `P_{U∥} ΔW P_{V∥}`
    pub par: Matrix,
    /// `P_{U⊥} ΔW P_{V⊥}`
    pub perp: Matrix,
    /// The cross blocks `P_{U∥} ΔW P_{V⊥} + P_{U⊥} ΔW P_{V∥}`. Never transferred.
    pub residual: Matrix,
    pub norms: ComponentNorms,
}

impl DecomposedDelta {
    pub fn shape(&self) -> (usize, usize) {
        self.par.shape()
    }

    /// `par + perp`, the part of the delta that transfer carries over.
    pub fn kept(&self) -> Matrix {
        &self.par + &self.perp
    }
}

pub fn decompose_adapter(delta: &Matrix, bases: &SpectralBases) -> Result<DecomposedDelta> {
    bases.check_shape(delta)?;
    let par = bases.sandwich(delta, Space::Range)?;
    let perp = bases.sandwich(delta, Space::Null)?;
    let residual = delta - &par - &perp;
    let norms = ComponentNorms {
        total: delta.norm(),
        par: par.norm(),
        perp: perp.norm(),
        residual: residual.norm(),
    };
    Ok(DecomposedDelta {
        par,
        perp,
        residual,
        norms,
    })
}
