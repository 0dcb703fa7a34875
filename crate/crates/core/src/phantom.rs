//! Procedural thorax-like phantoms.
//!
//! A phantom is a pure function of `(params, dims, spacing)`: the seed drives
//! one up-front jitter pass over organ geometry and intensities (ChaCha8,
//! fixed draw order), after which every voxel is evaluated RNG-free, so the
//! voxel loop parallelizes without changing the result.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::CoreError;
use crate::parallel;
use crate::volume::{Unit, Volume};

pub const BACKGROUND_HU: f32 = -1000.0;

/// Organ labels carried by a [`LabelMap`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum OrganLabel {
    Background = 0,
    Body = 1,
    Lung = 2,
    Spine = 3,
    Rib = 4,
    Heart = 5,
}

impl OrganLabel {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(OrganLabel::Background),
            1 => Some(OrganLabel::Body),
            2 => Some(OrganLabel::Lung),
            3 => Some(OrganLabel::Spine),
            4 => Some(OrganLabel::Rib),
            5 => Some(OrganLabel::Heart),
            _ => None,
        }
    }
}

/// Per-voxel organ labels, same dims and ordering as the paired [`Volume`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub dims: (usize, usize, usize),
    pub values: Vec<u8>,
}

impl LabelMap {
    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> u8 {
        self.values[i + self.dims.0 * (j + self.dims.1 * k)]
    }
}

/// Axis-aligned ellipsoid in physical (i, j, k) millimetre coordinates.
#[derive(Debug, Clone, Copy)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub radii: [f64; 3],
}

impl Ellipsoid {
    #[inline]
    fn contains(&self, p: [f64; 3]) -> bool {
        let mut s = 0.0;
        for a in 0..3 {
            let t = (p[a] - self.center[a]) / self.radii[a];
            s += t * t;
        }
        s <= 1.0
    }
}

/// Mean HU per organ before per-phantom jitter.
#[derive(Debug, Clone, Copy)]
pub struct OrganHu {
    pub lung: f64,
    pub body: f64,
    pub heart: f64,
    pub rib: f64,
    pub spine: f64,
}

impl Default for OrganHu {
    fn default() -> Self {
        // Typical tissue values; heart sits above soft tissue so the
        // lung < body < heart < rib < spine ordering survives +-10% jitter.
        OrganHu {
            lung: -800.0,
            body: 40.0,
            heart: 50.0,
            rib: 500.0,
            spine: 700.0,
        }
    }
}

/// Everything that determines a phantom apart from the target grid.
#[derive(Debug, Clone)]
pub struct PhantomParams {
    pub seed: u64,
    pub body: Ellipsoid,
    pub lung_left: Ellipsoid,
    pub lung_right: Ellipsoid,
    pub heart: Ellipsoid,
    /// Spine cylinder: (j, k) centre in mm; runs the full body height.
    pub spine_center_jk: [f64; 2],
    pub spine_radius: f64,
    /// Rib cage: number of bands along i, band thickness in mm, and the
    /// relative elliptical shell (lo, hi) of the body cross-section they
    /// occupy.
    pub rib_count: usize,
    pub rib_thickness: f64,
    pub rib_shell: (f64, f64),
    pub hu: OrganHu,
    /// Relative jitter applied per phantom to organ HU means.
    pub hu_jitter: f64,
    /// Relative jitter applied per phantom to radii and centres.
    pub geom_jitter: f64,
}

impl PhantomParams {
    /// Default thorax layout for a volume of physical extent `extent` mm.
    pub fn for_extent(seed: u64, extent: [f64; 3]) -> Self {
        let c = [extent[0] / 2.0, extent[1] / 2.0, extent[2] / 2.0];
        let he = c; // half extent
        let ell = |ci: f64, cj: f64, ck: f64, ri: f64, rj: f64, rk: f64| Ellipsoid {
            center: [c[0] + ci * he[0], c[1] + cj * he[1], c[2] + ck * he[2]],
            radii: [ri * he[0], rj * he[1], rk * he[2]],
        };
        PhantomParams {
            seed,
            body: ell(0.0, 0.0, 0.0, 0.92, 0.80, 0.74),
            lung_right: ell(0.0, -0.40, -0.06, 0.58, 0.30, 0.46),
            lung_left: ell(0.0, 0.40, -0.06, 0.58, 0.30, 0.46),
            heart: ell(0.10, 0.12, -0.22, 0.30, 0.26, 0.24),
            spine_center_jk: [c[1], c[2] + 0.50 * he[2]],
            spine_radius: 0.12 * he[1].min(he[2]),
            rib_count: 5,
            rib_thickness: 0.05 * extent[0],
            rib_shell: (0.78, 0.97),
            hu: OrganHu::default(),
            hu_jitter: 0.10,
            geom_jitter: 0.15,
        }
    }

    /// Validate radii, jitter ranges, and the organ HU ordering
    /// lung < body < heart < rib < spine under worst-case jitter.
    pub fn validate(&self) -> Result<(), CoreError> {
        let radii_ok = [&self.body, &self.lung_left, &self.lung_right, &self.heart]
            .iter()
            .all(|e| e.radii.iter().all(|&r| r > 0.0))
            && self.spine_radius > 0.0
            && self.rib_thickness > 0.0;
        if !radii_ok {
            return Err(CoreError::invalid("phantom radii must be > 0"));
        }
        if !(0.0..0.5).contains(&self.hu_jitter) || !(0.0..0.5).contains(&self.geom_jitter) {
            return Err(CoreError::invalid("jitter fractions must be in [0, 0.5)"));
        }
        if !(self.rib_shell.0 > 0.0 && self.rib_shell.0 < self.rib_shell.1 && self.rib_shell.1 <= 1.0)
        {
            return Err(CoreError::invalid("rib shell must satisfy 0 < lo < hi <= 1"));
        }
        let j = self.hu_jitter;
        let hi = |m: f64| m + m.abs() * j;
        let lo = |m: f64| m - m.abs() * j;
        let o = &self.hu;
        let ordered = hi(o.lung) < lo(o.body)
            && hi(o.body) < lo(o.heart)
            && hi(o.heart) < lo(o.rib)
            && hi(o.rib) < lo(o.spine);
        if !ordered {
            return Err(CoreError::invalid(
                "organ HU means must satisfy lung < body < heart < rib < spine under jitter",
            ));
        }
        Ok(())
    }
}

/// Geometry and intensities after the seeded jitter pass.
struct JitteredPhantom {
    body: Ellipsoid,
    lung_left: Ellipsoid,
    lung_right: Ellipsoid,
    heart: Ellipsoid,
    spine_center_jk: [f64; 2],
    spine_radius: f64,
    rib_count: usize,
    rib_thickness: f64,
    rib_shell: (f64, f64),
    hu: OrganHu,
}

fn jitter_ellipsoid(rng: &mut ChaCha8Rng, e: &Ellipsoid, frac: f64) -> Ellipsoid {
    let mut out = *e;
    for a in 0..3 {
        let u: f64 = rng.gen_range(-1.0..1.0);
        out.radii[a] = e.radii[a] * (1.0 + u * frac);
    }
    for a in 0..3 {
        let u: f64 = rng.gen_range(-1.0..1.0);
        out.center[a] = e.center[a] + u * frac * e.radii[a] * 0.5;
    }
    out
}

impl JitteredPhantom {
    /// Draw order is part of the format: body, right lung, left lung, heart,
    /// spine, ribs, then the five HU means.
    fn sample(params: &PhantomParams) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let gj = params.geom_jitter;
        let body = jitter_ellipsoid(&mut rng, &params.body, gj);
        let lung_right = jitter_ellipsoid(&mut rng, &params.lung_right, gj);
        let lung_left = jitter_ellipsoid(&mut rng, &params.lung_left, gj);
        let heart = jitter_ellipsoid(&mut rng, &params.heart, gj);
        let spine_center_jk = [
            params.spine_center_jk[0] + rng.gen_range(-1.0..1.0) * gj * params.spine_radius,
            params.spine_center_jk[1] + rng.gen_range(-1.0..1.0) * gj * params.spine_radius,
        ];
        let spine_radius = params.spine_radius * (1.0 + rng.gen_range(-1.0..1.0) * gj);
        let rib_thickness = params.rib_thickness * (1.0 + rng.gen_range(-1.0..1.0) * gj);
        let hj = params.hu_jitter;
        let mut hu_mean = |m: f64| m * (1.0 + rng.gen_range(-1.0..1.0) * hj);
        let hu = OrganHu {
            lung: hu_mean(params.hu.lung),
            body: hu_mean(params.hu.body),
            heart: hu_mean(params.hu.heart),
            rib: hu_mean(params.hu.rib),
            spine: hu_mean(params.hu.spine),
        };
        JitteredPhantom {
            body,
            lung_left,
            lung_right,
            heart,
            spine_center_jk,
            spine_radius,
            rib_count: params.rib_count,
            rib_thickness,
            rib_shell: params.rib_shell,
            hu,
        }
    }

    fn label_at(&self, p: [f64; 3]) -> OrganLabel {
        if !self.body.contains(p) {
            return OrganLabel::Background;
        }
        let mut label = OrganLabel::Body;
        if self.lung_left.contains(p) || self.lung_right.contains(p) {
            label = OrganLabel::Lung;
        }
        if self.heart.contains(p) {
            label = OrganLabel::Heart;
        }
        if self.in_rib(p) {
            label = OrganLabel::Rib;
        }
        if self.in_spine(p) {
            label = OrganLabel::Spine;
        }
        label
    }

    fn in_spine(&self, p: [f64; 3]) -> bool {
        let dj = p[1] - self.spine_center_jk[0];
        let dk = p[2] - self.spine_center_jk[1];
        dj * dj + dk * dk <= self.spine_radius * self.spine_radius
    }

    /// Ribs live on an elliptical shell of the body cross-section, in
    /// periodic bands along i.
    fn in_rib(&self, p: [f64; 3]) -> bool {
        let ti = (p[0] - self.body.center[0]) / self.body.radii[0];
        let cross = 1.0 - ti * ti;
        if cross <= 0.0 {
            return false;
        }
        let scale = cross.sqrt();
        let rj = self.body.radii[1] * scale;
        let rk = self.body.radii[2] * scale;
        let dj = (p[1] - self.body.center[1]) / rj;
        let dk = (p[2] - self.body.center[2]) / rk;
        let rho = (dj * dj + dk * dk).sqrt();
        if rho < self.rib_shell.0 || rho > self.rib_shell.1 {
            return false;
        }
        let span = 2.0 * self.body.radii[0];
        let period = span / self.rib_count as f64;
        let offset = p[0] - (self.body.center[0] - self.body.radii[0]);
        let phase = offset.rem_euclid(period);
        phase < self.rib_thickness
    }

    fn hu_for(&self, label: OrganLabel) -> f32 {
        match label {
            OrganLabel::Background => BACKGROUND_HU,
            OrganLabel::Body => self.hu.body as f32,
            OrganLabel::Lung => self.hu.lung as f32,
            OrganLabel::Spine => self.hu.spine as f32,
            OrganLabel::Rib => self.hu.rib as f32,
            OrganLabel::Heart => self.hu.heart as f32,
        }
    }
}

/// Generate an HU volume and its label map. Deterministic for fixed inputs;
/// background voxels are exactly -1000 HU.
pub fn generate_phantom(
    params: &PhantomParams,
    dims: (usize, usize, usize),
    spacing: (f64, f64, f64),
) -> Result<(Volume, LabelMap), CoreError> {
    if dims.0 < 16 || dims.1 < 16 || dims.2 < 16 {
        return Err(CoreError::invalid(format!(
            "phantom dims must be >= 16 per axis, got {dims:?}"
        )));
    }
    if spacing.0 <= 0.0 || spacing.1 <= 0.0 || spacing.2 <= 0.0 {
        return Err(CoreError::invalid("phantom spacing must be > 0"));
    }
    params.validate()?;

    let ph = JitteredPhantom::sample(params);
    let (h, w, d) = dims;
    let plane = h * w;
    let mut hu = vec![0.0f32; plane * d];
    let mut labels = vec![0u8; plane * d];

    // One (i, j) plane per k; chunks are disjoint so this is thread-count
    // independent.
    parallel::for_each_chunk_mut(&mut hu, plane, |k, out| {
        let pk = (k as f64 + 0.5) * spacing.2;
        for j in 0..w {
            let pj = (j as f64 + 0.5) * spacing.1;
            for i in 0..h {
                let pi = (i as f64 + 0.5) * spacing.0;
                let label = ph.label_at([pi, pj, pk]);
                out[i + h * j] = ph.hu_for(label);
            }
        }
    });
    parallel::for_each_chunk_mut(&mut labels, plane, |k, out| {
        let pk = (k as f64 + 0.5) * spacing.2;
        for j in 0..w {
            let pj = (j as f64 + 0.5) * spacing.1;
            for i in 0..h {
                let pi = (i as f64 + 0.5) * spacing.0;
                out[i + h * j] = ph.label_at([pi, pj, pk]) as u8;
            }
        }
    });

    let volume = Volume::new(dims, spacing, Unit::Hu, hu)?;
    Ok((volume, LabelMap { dims, values: labels }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean_hu_for_label(v: &Volume, m: &LabelMap, label: OrganLabel) -> f64 {
        let mut sum = 0.0;
        let mut count = 0usize;
        for (x, &l) in v.values().iter().zip(&m.values) {
            if l == label as u8 {
                sum += *x as f64;
                count += 1;
            }
        }
        assert!(count > 0, "label {label:?} never appears");
        sum / count as f64
    }

    #[test]
    fn deterministic_for_fixed_params() {
        let params = PhantomParams::for_extent(7, [160.0, 160.0, 160.0]);
        let dims = (32, 32, 32);
        let sp = (5.0, 5.0, 5.0);
        let (v1, m1) = generate_phantom(&params, dims, sp).unwrap();
        let (v2, m2) = generate_phantom(&params, dims, sp).unwrap();
        assert_eq!(v1.values(), v2.values());
        assert_eq!(m1, m2);
    }

    #[test]
    fn background_is_exactly_air() {
        let params = PhantomParams::for_extent(3, [160.0, 160.0, 160.0]);
        let (v, m) = generate_phantom(&params, (32, 32, 32), (5.0, 5.0, 5.0)).unwrap();
        for (x, &l) in v.values().iter().zip(&m.values) {
            if l == 0 {
                assert_eq!(*x, BACKGROUND_HU);
            }
        }
    }

    #[test]
    fn organ_means_are_ordered() {
        for seed in [1u64, 9, 42] {
            let params = PhantomParams::for_extent(seed, [160.0, 160.0, 160.0]);
            let (v, m) = generate_phantom(&params, (32, 32, 32), (5.0, 5.0, 5.0)).unwrap();
            let lung = mean_hu_for_label(&v, &m, OrganLabel::Lung);
            let body = mean_hu_for_label(&v, &m, OrganLabel::Body);
            let spine = mean_hu_for_label(&v, &m, OrganLabel::Spine);
            assert!(lung < body && body < spine, "lung {lung} body {body} spine {spine}");
        }
    }

    #[test]
    fn spine_sits_posterior() {
        let params = PhantomParams::for_extent(5, [160.0, 160.0, 160.0]);
        let (_, m) = generate_phantom(&params, (32, 32, 32), (5.0, 5.0, 5.0)).unwrap();
        let (h, w, d) = m.dims;
        let mut k_sum = 0usize;
        let mut n = 0usize;
        for k in 0..d {
            for j in 0..w {
                for i in 0..h {
                    if m.at(i, j, k) == OrganLabel::Spine as u8 {
                        k_sum += k;
                        n += 1;
                    }
                }
            }
        }
        assert!(n > 0);
        assert!(k_sum as f64 / n as f64 > d as f64 / 2.0);
    }

    #[test]
    fn rejects_small_dims_and_bad_spacing() {
        let params = PhantomParams::for_extent(1, [160.0, 160.0, 160.0]);
        assert!(generate_phantom(&params, (8, 32, 32), (5.0, 5.0, 5.0)).is_err());
        assert!(generate_phantom(&params, (32, 32, 32), (0.0, 5.0, 5.0)).is_err());
    }

    #[test]
    fn rejects_unordered_hu_means() {
        let mut params = PhantomParams::for_extent(1, [160.0, 160.0, 160.0]);
        params.hu.heart = params.hu.body; // intervals collide
        assert!(params.validate().is_err());
    }
}
