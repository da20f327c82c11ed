//! Derivative jets of `θ(z)` at a point, in double precision.

use crate::error::Result;
use crate::theta::{jet_index, log_derivative_from_jet, theta_jet, theta_scale};
use crate::{Characteristic, MultiIndex, Point, RiemannMatrix, C64};

/// All derivatives of `θ[ch](z, Ω)` up to a fixed total order.
#[derive(Clone, Debug)]
pub struct ThetaJet {
    order: usize,
    values: Vec<C64>,
    scale: f64,
}

impl ThetaJet {
    pub fn new(omega: &RiemannMatrix, z: &Point, order: usize, eps: f64) -> Result<Self> {
        Self::with_char(omega, &Characteristic::zero(), z, order, eps)
    }

    pub fn with_char(
        omega: &RiemannMatrix,
        ch: &Characteristic,
        z: &Point,
        order: usize,
        eps: f64,
    ) -> Result<Self> {
        let values = theta_jet(z, omega, ch, order, eps)?;
        let scale = theta_scale(omega, [z[0].im, z[1].im]);
        Ok(ThetaJet {
            order,
            values,
            scale,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn value(&self) -> C64 {
        self.values[0]
    }

    pub fn d(&self, m: MultiIndex) -> C64 {
        assert!(
            m.total() <= self.order,
            "jet of order {} lacks {m}",
            self.order
        );
        self.values[jet_index(m, self.order)]
    }

    /// Derivative along the listed coordinates, e.g. `&[0, 1]` for `θ_{12}`.
    pub fn partial(&self, coords: &[usize]) -> C64 {
        self.d(MultiIndex::from_coordinates(coords))
    }

    pub fn grad(&self) -> [C64; 2] {
        [self.partial(&[0]), self.partial(&[1])]
    }

    /// Natural magnitude of the series at this point.
    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// `∂^d log θ` at this point, refusing `|θ| < floor · scale`.
    pub fn log_deriv(&self, d: MultiIndex, floor: f64) -> Result<C64> {
        let sub: Vec<C64> = MultiIndex::up_to(d.total())
            .into_iter()
            .map(|m| self.d(m))
            .collect();
        log_derivative_from_jet(&sub, d, floor * self.scale)
    }
}
