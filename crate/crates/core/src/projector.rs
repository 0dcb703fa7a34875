//! Parallel-beam radiograph synthesis from attenuation volumes.
//!
//! The frontal projection is an axis-aligned discrete line integral along the
//! anterior–posterior axis, summed in ascending k so results are reproducible;
//! parallelism only spans output pixels. Oblique angles rotate the beam about
//! the superior–inferior axis and integrate by trilinear sampling.

use crate::error::CoreError;
use crate::parallel;
use crate::volume::{Unit, Volume};

/// What a [`Radiograph`]'s pixels mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RadiographDomain {
    /// Accumulated attenuation (dimensionless), >= 0 and unbounded.
    LineIntegral,
    /// Beer–Lambert detector intensity, in (0, 1].
    Intensity,
}

impl RadiographDomain {
    pub(crate) fn to_tag(self) -> u8 {
        match self {
            RadiographDomain::LineIntegral => 0,
            RadiographDomain::Intensity => 1,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(RadiographDomain::LineIntegral),
            1 => Some(RadiographDomain::Intensity),
            _ => None,
        }
    }
}

/// 2D projection image, geometrically aligned with the volume's coronal
/// plane: pixel (i, j) faces volume column (i, j, ·). Stored i-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Radiograph {
    pub dims: (usize, usize),
    pub domain: RadiographDomain,
    pub values: Vec<f64>,
}

impl Radiograph {
    pub fn new(
        dims: (usize, usize),
        domain: RadiographDomain,
        values: Vec<f64>,
    ) -> Result<Self, CoreError> {
        if dims.0 == 0 || dims.1 == 0 {
            return Err(CoreError::invalid("radiograph dims must be positive"));
        }
        if values.len() != dims.0 * dims.1 {
            return Err(CoreError::dims(format!(
                "radiograph payload {} != {}x{}",
                values.len(),
                dims.0,
                dims.1
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(CoreError::invalid("radiograph has non-finite values"));
        }
        match domain {
            RadiographDomain::LineIntegral => {
                if values.iter().any(|&v| v < 0.0) {
                    return Err(CoreError::invalid("line integrals must be >= 0"));
                }
            }
            RadiographDomain::Intensity => {
                if values.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                    return Err(CoreError::invalid("intensities must be in [0, 1]"));
                }
            }
        }
        Ok(Radiograph { dims, domain, values })
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i + self.dims.0 * j]
    }

    /// Min-max rescale to [0, 1]; a constant image maps to all zeros.
    /// This is the domain the learning pipeline consumes.
    pub fn rescaled_unit(&self) -> Vec<f64> {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in &self.values {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !(hi > lo) {
            return vec![0.0; self.values.len()];
        }
        let inv = 1.0 / (hi - lo);
        self.values.iter().map(|&v| (v - lo) * inv).collect()
    }
}

/// Beam and material model parameters.
#[derive(Debug, Clone, Copy)]
pub struct ProjectorConfig {
    /// Linear attenuation of water in mm^-1 (~60 keV effective energy).
    pub mu_water: f64,
    /// Emit Beer–Lambert intensities instead of line integrals.
    pub intensity_output: bool,
    /// Rotation about the superior–inferior axis; 0 = frontal.
    pub gantry_angle_deg: f64,
}

impl Default for ProjectorConfig {
    fn default() -> Self {
        ProjectorConfig {
            mu_water: 0.0206,
            intensity_output: false,
            gantry_angle_deg: 0.0,
        }
    }
}

impl ProjectorConfig {
    pub fn validate(&self) -> Result<(), CoreError> {
        if !(self.mu_water > 0.0) {
            return Err(CoreError::invalid("mu_water must be > 0"));
        }
        if !self.gantry_angle_deg.is_finite() {
            return Err(CoreError::invalid("gantry angle must be finite"));
        }
        Ok(())
    }
}

/// HU -> linear attenuation: `mu = mu_water * (1 + HU/1000)`, clamped at 0.
pub fn hu_to_attenuation(v: &Volume, mu_water: f64) -> Result<Volume, CoreError> {
    if v.unit() != Unit::Hu {
        return Err(CoreError::UnitMismatch {
            expected: "HU".into(),
            actual: v.unit().as_str().into(),
        });
    }
    if !(mu_water > 0.0) {
        return Err(CoreError::invalid("mu_water must be > 0"));
    }
    let out = v
        .values()
        .iter()
        .map(|&hu| (mu_water * (1.0 + hu as f64 / 1000.0)).max(0.0) as f32)
        .collect();
    v.with_values(Unit::Attenuation, out)
}

/// Axis-aligned frontal projection: `out(i,j) = sum_k mu(i,j,k) * sz`.
pub fn project_frontal(v: &Volume) -> Result<Radiograph, CoreError> {
    if v.unit() != Unit::Attenuation {
        return Err(CoreError::UnitMismatch {
            expected: "attenuation".into(),
            actual: v.unit().as_str().into(),
        });
    }
    let (h, w, d) = v.dims();
    let sz = v.spacing().2;
    let vals = v.values();
    let mut out = vec![0.0f64; h * w];
    parallel::for_each_chunk_mut(&mut out, h, |j, col| {
        for (i, pixel) in col.iter_mut().enumerate() {
            let mut acc = 0.0f64;
            let mut idx = i + h * j;
            for _ in 0..d {
                acc += vals[idx] as f64;
                idx += h * w;
            }
            *pixel = acc * sz;
        }
    });
    Radiograph::new((h, w), RadiographDomain::LineIntegral, out)
}

/// Parallel-beam projection rotated by `angle_deg` about the i axis, using
/// trilinear sampling at `samples_per_voxel` steps per voxel pitch. At
/// angle 0 the sampling grid passes through voxel centres and this reduces
/// to [`project_frontal`].
pub fn project_angle(
    v: &Volume,
    angle_deg: f64,
    samples_per_voxel: usize,
) -> Result<Radiograph, CoreError> {
    if v.unit() != Unit::Attenuation {
        return Err(CoreError::UnitMismatch {
            expected: "attenuation".into(),
            actual: v.unit().as_str().into(),
        });
    }
    if !angle_deg.is_finite() {
        return Err(CoreError::invalid("angle must be finite"));
    }
    if samples_per_voxel == 0 {
        return Err(CoreError::invalid("samples_per_voxel must be >= 1"));
    }
    let (h, w, d) = v.dims();
    let (sx, sy, sz) = v.spacing();
    let theta = angle_deg.to_radians();
    // Ray direction and detector axis in the (j, k) plane; theta = 0 gives
    // d = +k and detector axis = +j.
    let dir = (-theta.sin(), theta.cos());
    let det = (theta.cos(), theta.sin());
    let ext_j = w as f64 * sy;
    let ext_k = d as f64 * sz;
    let cj = ext_j / 2.0;
    let ck = ext_k / 2.0;
    let step_target = sy.min(sz) / samples_per_voxel as f64;

    let mut out = vec![0.0f64; h * w];
    parallel::for_each_chunk_mut(&mut out, h, |t, col| {
        // Detector pixel centre offset from the rotation centre.
        let off = (t as f64 + 0.5) * sy - cj;
        let oj = cj + off * det.0;
        let ok = ck + off * det.1;
        // Clip the ray to the (j, k) bounding box.
        let clip = clip_to_box((oj, ok), dir, ext_j, ext_k);
        let Some((s0, s1)) = clip else {
            for pixel in col.iter_mut() {
                *pixel = 0.0;
            }
            return;
        };
        let path = s1 - s0;
        let n = (path / step_target).round().max(1.0) as usize;
        let ds = path / n as f64;
        for (i, pixel) in col.iter_mut().enumerate() {
            let pi = (i as f64 + 0.5) * sx;
            let mut acc = 0.0f64;
            for m in 0..n {
                let s = s0 + (m as f64 + 0.5) * ds;
                let pj = oj + s * dir.0;
                let pk = ok + s * dir.1;
                acc += sample_trilinear(v, pi, pj, pk, sx, sy, sz);
            }
            *pixel = acc * ds;
        }
    });
    Radiograph::new((h, w), RadiographDomain::LineIntegral, out)
}

/// Entry/exit parameters of a 2D ray against the box [0,ext_j]x[0,ext_k].
fn clip_to_box(origin: (f64, f64), dir: (f64, f64), ext_j: f64, ext_k: f64) -> Option<(f64, f64)> {
    let mut s0 = f64::NEG_INFINITY;
    let mut s1 = f64::INFINITY;
    for (o, d, ext) in [(origin.0, dir.0, ext_j), (origin.1, dir.1, ext_k)] {
        if d.abs() < 1e-12 {
            if o < 0.0 || o > ext {
                return None;
            }
        } else {
            let (a, b) = ((0.0 - o) / d, (ext - o) / d);
            s0 = s0.max(a.min(b));
            s1 = s1.min(a.max(b));
        }
    }
    (s1 > s0).then_some((s0, s1))
}

/// Trilinear interpolation over voxel centres; zero outside the grid.
fn sample_trilinear(v: &Volume, pi: f64, pj: f64, pk: f64, sx: f64, sy: f64, sz: f64) -> f64 {
    let (h, w, d) = v.dims();
    let gi = pi / sx - 0.5;
    let gj = pj / sy - 0.5;
    let gk = pk / sz - 0.5;
    let i0 = gi.floor();
    let j0 = gj.floor();
    let k0 = gk.floor();
    let (fi, fj, fk) = (gi - i0, gj - j0, gk - k0);
    let mut acc = 0.0;
    for (di, wi) in [(0i64, 1.0 - fi), (1, fi)] {
        let ii = i0 as i64 + di;
        if wi == 0.0 || ii < 0 || ii >= h as i64 {
            continue;
        }
        for (dj, wj) in [(0i64, 1.0 - fj), (1, fj)] {
            let jj = j0 as i64 + dj;
            if wj == 0.0 || jj < 0 || jj >= w as i64 {
                continue;
            }
            for (dk, wk) in [(0i64, 1.0 - fk), (1, fk)] {
                let kk = k0 as i64 + dk;
                if wk == 0.0 || kk < 0 || kk >= d as i64 {
                    continue;
                }
                acc += wi * wj * wk * v.at(ii as usize, jj as usize, kk as usize) as f64;
            }
        }
    }
    acc
}

/// Beer–Lambert transmission: `I = exp(-line_integral)`, in (0, 1].
pub fn to_intensity(r: &Radiograph) -> Result<Radiograph, CoreError> {
    if r.domain != RadiographDomain::LineIntegral {
        return Err(CoreError::invalid(
            "to_intensity expects a line-integral radiograph",
        ));
    }
    let out = r.values.iter().map(|&x| (-x).exp()).collect();
    Radiograph::new(r.dims, RadiographDomain::Intensity, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn att_volume(dims: (usize, usize, usize), spacing: (f64, f64, f64), mu: f32) -> Volume {
        Volume::filled(dims, spacing, Unit::Attenuation, mu).unwrap()
    }

    #[test]
    fn hu_conversion_landmarks() {
        let v = Volume::new(
            (3, 1, 1),
            (1.0, 1.0, 1.0),
            Unit::Hu,
            vec![0.0, -1000.0, 500.0],
        )
        .unwrap();
        let mu = hu_to_attenuation(&v, 0.0206).unwrap();
        assert!((mu.values()[0] - 0.0206).abs() < 1e-9);
        assert_eq!(mu.values()[1], 0.0);
        assert!((mu.values()[2] - 0.0309).abs() < 1e-9);
    }

    #[test]
    fn uniform_volume_integral() {
        // mu = 0.02/mm over 100 voxels of 1 mm -> 2.0 everywhere.
        let v = att_volume((4, 4, 100), (1.0, 1.0, 1.0), 0.02);
        let r = project_frontal(&v).unwrap();
        for &p in &r.values {
            assert!((p - 2.0).abs() < 1e-6, "{p}");
        }
        let i = to_intensity(&r).unwrap();
        for &p in &i.values {
            assert!((p - (-2.0f64).exp()).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_volume_projects_to_zero() {
        let v = att_volume((5, 6, 7), (1.0, 1.0, 1.0), 0.0);
        let r = project_frontal(&v).unwrap();
        assert!(r.values.iter().all(|&p| p == 0.0));
    }

    #[test]
    fn point_source_hits_one_pixel() {
        let mut vals = vec![0.0f32; 8 * 9 * 10];
        let v0 = Volume::new((8, 9, 10), (1.0, 1.0, 1.0), Unit::Attenuation, vals.clone()).unwrap();
        vals[v0.index(3, 4, 5)] = 0.5;
        let v = Volume::new((8, 9, 10), (1.0, 1.0, 1.0), Unit::Attenuation, vals).unwrap();
        let r = project_frontal(&v).unwrap();
        for j in 0..9 {
            for i in 0..8 {
                let expect = if (i, j) == (3, 4) { 0.5 } else { 0.0 };
                assert_eq!(r.at(i, j), expect);
            }
        }
    }

    #[test]
    fn angle_zero_matches_frontal() {
        let params = crate::phantom::PhantomParams::for_extent(11, [64.0, 64.0, 64.0]);
        let (hu, _) = crate::phantom::generate_phantom(&params, (16, 16, 16), (4.0, 4.0, 4.0))
            .unwrap();
        let mu = hu_to_attenuation(&hu, 0.0206).unwrap();
        let frontal = project_frontal(&mu).unwrap();
        let rotated = project_angle(&mu, 0.0, 1).unwrap();
        for (a, b) in frontal.values.iter().zip(&rotated.values) {
            let rel = (a - b).abs() / a.abs().max(1e-12);
            assert!(rel < 1e-6, "a={a} b={b}");
        }
    }

    #[test]
    fn intensity_is_monotone_decreasing() {
        let r = Radiograph::new(
            (1, 4),
            RadiographDomain::LineIntegral,
            vec![0.0, 0.5, 1.0, 2.0],
        )
        .unwrap();
        let i = to_intensity(&r).unwrap();
        assert_eq!(i.values[0], 1.0);
        assert!((i.values[3] - 0.13534).abs() < 1e-5);
        for pair in i.values.windows(2) {
            assert!(pair[0] > pair[1]);
        }
    }

    #[test]
    fn rejects_wrong_units_and_bad_args() {
        let hu = Volume::filled((4, 4, 4), (1.0, 1.0, 1.0), Unit::Hu, 0.0).unwrap();
        assert!(project_frontal(&hu).is_err());
        let mu = att_volume((4, 4, 4), (1.0, 1.0, 1.0), 0.01);
        assert!(project_angle(&mu, f64::NAN, 2).is_err());
        assert!(project_angle(&mu, 10.0, 0).is_err());
    }
}
