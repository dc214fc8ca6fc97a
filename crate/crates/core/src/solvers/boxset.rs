use nalgebra::DVector;

use crate::error::{check_dim, Error, Result};

/// Axis-aligned box `lower <= w <= upper`. Infinite bounds are allowed.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxSet {
    lower: DVector<f64>,
    upper: DVector<f64>,
}

impl BoxSet {
    pub fn new(lower: DVector<f64>, upper: DVector<f64>) -> Result<Self> {
        check_dim(lower.len(), upper.len())?;
        for i in 0..lower.len() {
            if lower[i].is_nan() || upper[i].is_nan() || lower[i] > upper[i] {
                return Err(Error::InvalidArgument(format!(
                    "box bound {i}: lower {} exceeds upper {}",
                    lower[i], upper[i]
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn uniform(dim: usize, lower: f64, upper: f64) -> Result<Self> {
        Self::new(DVector::from_element(dim, lower), DVector::from_element(dim, upper))
    }

    pub fn unbounded(dim: usize) -> Self {
        Self { lower: DVector::from_element(dim, f64::NEG_INFINITY), upper: DVector::from_element(dim, f64::INFINITY) }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &DVector<f64> {
        &self.lower
    }

    pub fn upper(&self) -> &DVector<f64> {
        &self.upper
    }

    pub fn contains(&self, v: &DVector<f64>, tol: f64) -> bool {
        v.len() == self.dim()
            && v.iter()
                .zip(self.lower.iter().zip(self.upper.iter()))
                .all(|(x, (lo, hi))| *x >= lo - tol && *x <= hi + tol)
    }

    /// Clamps `v` into the box in place. Caller guarantees matching dimension.
    pub(crate) fn clamp_in_place(&self, v: &mut DVector<f64>) {
        for i in 0..v.len() {
            v[i] = v[i].clamp(self.lower[i], self.upper[i]);
        }
    }

    /// A point of the box closest to the origin.
    pub fn anchor(&self) -> DVector<f64> {
        let mut z = DVector::zeros(self.dim());
        self.clamp_in_place(&mut z);
        z
    }
}

/// Euclidean projection onto a box (coordinatewise clamp).
pub fn project_box(v: &DVector<f64>, bx: &BoxSet) -> Result<DVector<f64>> {
    check_dim(bx.dim(), v.len())?;
    let mut out = v.clone();
    bx.clamp_in_place(&mut out);
    Ok(out)
}
