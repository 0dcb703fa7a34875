//! 3D scalar grids with physical spacing.
//!
//! Axis convention, fixed project-wide: `i` (first axis, length H) runs
//! superior–inferior, `j` (second, W) left–right, `k` (third, D)
//! anterior–posterior. A frontal radiograph therefore indexes `(i, j)` and
//! integrates over `k`. Storage is i-fastest: `idx = i + H*(j + W*k)`.

use crate::error::CoreError;

/// Interpretation of the scalar values a [`Volume`] carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unit {
    /// Hounsfield units, valid range [-1024, 3071].
    Hu,
    /// Normalized intensities in [-1, 1].
    Normalized,
    /// Linear attenuation coefficients in mm^-1, non-negative.
    Attenuation,
}

impl Unit {
    pub fn as_str(self) -> &'static str {
        match self {
            Unit::Hu => "HU",
            Unit::Normalized => "normalized",
            Unit::Attenuation => "attenuation",
        }
    }

    pub(crate) fn to_tag(self) -> u8 {
        match self {
            Unit::Hu => 0,
            Unit::Normalized => 1,
            Unit::Attenuation => 2,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Unit::Hu),
            1 => Some(Unit::Normalized),
            2 => Some(Unit::Attenuation),
            _ => None,
        }
    }
}

/// A dense 3D scalar grid with voxel spacing in millimetres.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: (usize, usize, usize),
    spacing: (f64, f64, f64),
    unit: Unit,
    values: Vec<f32>,
}

impl Volume {
    /// Build a volume, validating shape, spacing, finiteness, and the value
    /// range implied by `unit`.
    pub fn new(
        dims: (usize, usize, usize),
        spacing: (f64, f64, f64),
        unit: Unit,
        values: Vec<f32>,
    ) -> Result<Self, CoreError> {
        let (h, w, d) = dims;
        if h == 0 || w == 0 || d == 0 {
            return Err(CoreError::invalid("volume dims must be positive"));
        }
        if spacing.0 <= 0.0 || spacing.1 <= 0.0 || spacing.2 <= 0.0 {
            return Err(CoreError::invalid("voxel spacing must be > 0"));
        }
        let expect = h * w * d;
        if values.len() != expect {
            return Err(CoreError::dims(format!(
                "value count {} does not match dims {}x{}x{} = {}",
                values.len(),
                h,
                w,
                d,
                expect
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(CoreError::invalid("volume contains non-finite values"));
        }
        match unit {
            Unit::Normalized => {
                if values.iter().any(|&v| !(-1.0..=1.0).contains(&v)) {
                    return Err(CoreError::invalid(
                        "normalized volume has values outside [-1, 1]",
                    ));
                }
            }
            Unit::Attenuation => {
                if values.iter().any(|&v| v < 0.0) {
                    return Err(CoreError::invalid(
                        "attenuation volume has negative values",
                    ));
                }
            }
            Unit::Hu => {}
        }
        Ok(Volume {
            dims,
            spacing,
            unit,
            values,
        })
    }

    pub fn filled(
        dims: (usize, usize, usize),
        spacing: (f64, f64, f64),
        unit: Unit,
        value: f32,
    ) -> Result<Self, CoreError> {
        let n = dims.0 * dims.1 * dims.2;
        Volume::new(dims, spacing, unit, vec![value; n])
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn spacing(&self) -> (f64, f64, f64) {
        self.spacing
    }

    pub fn unit(&self) -> Unit {
        self.unit
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Linear index of voxel `(i, j, k)`; `i` varies fastest.
    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        debug_assert!(i < self.dims.0 && j < self.dims.1 && k < self.dims.2);
        i + self.dims.0 * (j + self.dims.1 * k)
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> f32 {
        self.values[self.index(i, j, k)]
    }

    /// Replace the payload, keeping geometry. Intended for value transforms
    /// that preserve shape; re-validates against `unit`.
    pub fn with_values(&self, unit: Unit, values: Vec<f32>) -> Result<Self, CoreError> {
        Volume::new(self.dims, self.spacing, unit, values)
    }
}

/// Window an HU volume into [-1, 1]: `clamp((x-lo)/(hi-lo), 0, 1)*2 - 1`.
/// Monotone in `x`; `lo` maps to -1 and `hi` to +1.
pub fn normalize_hu(v: &Volume, window: (f64, f64)) -> Result<Volume, CoreError> {
    if v.unit() != Unit::Hu {
        return Err(CoreError::UnitMismatch {
            expected: "HU".into(),
            actual: v.unit().as_str().into(),
        });
    }
    let (lo, hi) = window;
    if !(lo < hi) {
        return Err(CoreError::invalid(format!(
            "normalization window must satisfy lo < hi, got ({lo}, {hi})"
        )));
    }
    let inv = 1.0 / (hi - lo);
    let out = v
        .values()
        .iter()
        .map(|&x| {
            let t = ((x as f64 - lo) * inv).clamp(0.0, 1.0);
            (t * 2.0 - 1.0) as f32
        })
        .collect();
    v.with_values(Unit::Normalized, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hu_volume(vals: Vec<f32>) -> Volume {
        Volume::new((vals.len(), 1, 1), (1.0, 1.0, 1.0), Unit::Hu, vals).unwrap()
    }

    #[test]
    fn rejects_bad_construction() {
        assert!(Volume::new((0, 4, 4), (1.0, 1.0, 1.0), Unit::Hu, vec![]).is_err());
        assert!(Volume::new((2, 2, 2), (1.0, -1.0, 1.0), Unit::Hu, vec![0.0; 8]).is_err());
        assert!(Volume::new((2, 2, 2), (1.0, 1.0, 1.0), Unit::Hu, vec![0.0; 7]).is_err());
        assert!(
            Volume::new((2, 2, 2), (1.0, 1.0, 1.0), Unit::Normalized, vec![1.5; 8]).is_err()
        );
        assert!(
            Volume::new((2, 2, 2), (1.0, 1.0, 1.0), Unit::Attenuation, vec![-0.1; 8]).is_err()
        );
    }

    #[test]
    fn index_is_i_fastest() {
        let v = Volume::filled((3, 4, 5), (1.0, 1.0, 1.0), Unit::Hu, 0.0).unwrap();
        assert_eq!(v.index(0, 0, 0), 0);
        assert_eq!(v.index(1, 0, 0), 1);
        assert_eq!(v.index(0, 1, 0), 3);
        assert_eq!(v.index(0, 0, 1), 12);
        assert_eq!(v.index(2, 3, 4), 2 + 3 * (3 + 4 * 4));
    }

    #[test]
    fn normalize_endpoints_and_midpoint() {
        let v = hu_volume(vec![-1000.0, 0.0, 400.0, 1000.0, 2000.0]);
        let n = normalize_hu(&v, (-1000.0, 1000.0)).unwrap();
        assert_eq!(n.values()[0], -1.0);
        assert_eq!(n.values()[1], 0.0);
        // window=(-1000,1000), x=400 -> 0.4
        assert!((n.values()[2] - 0.4).abs() < 1e-7);
        assert_eq!(n.values()[3], 1.0);
        // above the window clamps to +1
        assert_eq!(n.values()[4], 1.0);
    }

    #[test]
    fn normalize_rejects_degenerate_window() {
        let v = hu_volume(vec![0.0]);
        assert!(normalize_hu(&v, (10.0, 10.0)).is_err());
        assert!(normalize_hu(&v, (10.0, -10.0)).is_err());
    }
}
