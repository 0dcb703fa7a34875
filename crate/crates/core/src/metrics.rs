//! Reconstruction quality metrics: PSNR, volumetric SSIM, and a seeded
//! random-feature perceptual distance.
//!
//! The perceptual metric is a surrogate: a frozen 3-scale random-conv feature
//! extractor with channel-unit-normalized features. It is deterministic per
//! seed and monotone under growing distortion, but its values are not
//! comparable to any pretrained-network LPIPS figures; reports label the
//! column "perceptual (surrogate)".

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::parallel;
use crate::volume::Volume;

/// Peak signal-to-noise ratio in dB: `10*log10(L^2/MSE)`. Identical inputs
/// return `cap_db` instead of infinity.
pub fn psnr(a: &Volume, b: &Volume, range: f64, cap_db: f64) -> Result<f64, CoreError> {
    if a.dims() != b.dims() {
        return Err(CoreError::dims("psnr inputs differ in dims"));
    }
    if !(range > 0.0) {
        return Err(CoreError::invalid("psnr range must be > 0"));
    }
    let mut acc = 0.0f64;
    for (x, y) in a.values().iter().zip(b.values()) {
        let d = *x as f64 - *y as f64;
        acc += d * d;
    }
    let mse = acc / a.len() as f64;
    if mse == 0.0 {
        return Ok(cap_db);
    }
    Ok((10.0 * (range * range / mse).log10()).min(cap_db))
}

/// Volumetric SSIM with a uniform cubic window (default 7^3), averaged over
/// all fully-interior window positions. Uniform rather than Gaussian
/// weighting so results are exactly reproducible.
pub fn ssim3d(
    a: &Volume,
    b: &Volume,
    window: usize,
    k1: f64,
    k2: f64,
    range: f64,
) -> Result<f64, CoreError> {
    if a.dims() != b.dims() {
        return Err(CoreError::dims("ssim inputs differ in dims"));
    }
    let (h, w, d) = a.dims();
    if window == 0 || h < window || w < window || d < window {
        return Err(CoreError::invalid(format!(
            "volume {h}x{w}x{d} smaller than ssim window {window}"
        )));
    }
    let c1 = (k1 * range) * (k1 * range);
    let c2 = (k2 * range) * (k2 * range);
    let (vh, vw, vd) = (h - window + 1, w - window + 1, d - window + 1);
    let n_win = (window * window * window) as f64;
    let av = a.values();
    let bv = b.values();

    let mut scores = vec![0.0f64; vh * vw * vd];
    parallel::for_each_chunk_mut(&mut scores, vh * vw, |k0, plane| {
        for j0 in 0..vw {
            for i0 in 0..vh {
                let mut sa = 0.0;
                let mut sb = 0.0;
                let mut saa = 0.0;
                let mut sbb = 0.0;
                let mut sab = 0.0;
                for dk in 0..window {
                    for dj in 0..window {
                        let base = i0 + h * ((j0 + dj) + w * (k0 + dk));
                        for di in 0..window {
                            let x = av[base + di] as f64;
                            let y = bv[base + di] as f64;
                            sa += x;
                            sb += y;
                            saa += x * x;
                            sbb += y * y;
                            sab += x * y;
                        }
                    }
                }
                let ma = sa / n_win;
                let mb = sb / n_win;
                let va = saa / n_win - ma * ma;
                let vb = sbb / n_win - mb * mb;
                let cov = sab / n_win - ma * mb;
                let score = ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                plane[i0 + vh * j0] = score;
            }
        }
    });
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Frozen random 3D conv features at three scales.
pub struct PerceptualNet {
    seed: u64,
    channels: usize,
    weights: Vec<f64>, // [channels][3*3*3]
}

const PERC_SCALES: usize = 3;

impl PerceptualNet {
    pub fn new(seed: u64) -> Self {
        let channels = 6;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x70657263); // domain-separated stream
        let scale = (27.0f64).sqrt().recip();
        let weights = (0..channels * 27)
            .map(|_| rng.gen_range(-1.0..1.0) * scale)
            .collect();
        PerceptualNet { seed, channels, weights }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Raw 3x3x3 kernel bank, `[channels * 27]`.
    pub fn kernel(&self) -> &[f64] {
        &self.weights
    }

    /// Mean squared difference of unit-normalized features, summed over
    /// scales. Zero iff inputs are identical at every scale.
    pub fn distance(&self, a: &Volume, b: &Volume) -> Result<f64, CoreError> {
        if a.dims() != b.dims() {
            return Err(CoreError::dims("perceptual inputs differ in dims"));
        }
        let mut ga: Vec<f64> = a.values().iter().map(|&v| v as f64).collect();
        let mut gb: Vec<f64> = b.values().iter().map(|&v| v as f64).collect();
        let mut dims = a.dims();
        let mut total = 0.0;
        for _ in 0..PERC_SCALES {
            if dims.0 < 3 || dims.1 < 3 || dims.2 < 3 {
                break;
            }
            let fa = self.features(&ga, dims);
            let fb = self.features(&gb, dims);
            let n = fa.len();
            let mut acc = 0.0;
            for (x, y) in fa.iter().zip(&fb) {
                let d = x - y;
                acc += d * d;
            }
            total += acc / n as f64;
            ga = downsample2(&ga, dims);
            gb = downsample2(&gb, dims);
            dims = (dims.0 / 2, dims.1 / 2, dims.2 / 2);
        }
        Ok(total)
    }

    /// 3^3 random conv (zero padding) followed by per-voxel channel unit
    /// normalization.
    fn features(&self, grid: &[f64], dims: (usize, usize, usize)) -> Vec<f64> {
        let (h, w, d) = dims;
        let n = h * w * d;
        let c = self.channels;
        let mut feat = vec![0.0f64; c * n];
        parallel::for_each_chunk_mut(&mut feat, n, |ci, out| {
            let kw = &self.weights[ci * 27..(ci + 1) * 27];
            for k in 0..d {
                for j in 0..w {
                    for i in 0..h {
                        let mut acc = 0.0;
                        let mut tap = 0;
                        for dk in 0..3usize {
                            let kk = k as i64 + dk as i64 - 1;
                            for dj in 0..3usize {
                                let jj = j as i64 + dj as i64 - 1;
                                for di in 0..3usize {
                                    let ii = i as i64 + di as i64 - 1;
                                    if ii >= 0
                                        && ii < h as i64
                                        && jj >= 0
                                        && jj < w as i64
                                        && kk >= 0
                                        && kk < d as i64
                                    {
                                        let idx =
                                            ii as usize + h * (jj as usize + w * kk as usize);
                                        acc += kw[tap] * grid[idx];
                                    }
                                    tap += 1;
                                }
                            }
                        }
                        out[i + h * (j + w * k)] = acc;
                    }
                }
            }
        });
        // Unit-normalize the channel vector at each voxel.
        for v in 0..n {
            let mut norm = 0.0;
            for ci in 0..c {
                let f = feat[ci * n + v];
                norm += f * f;
            }
            let inv = 1.0 / (norm.sqrt() + 1e-9);
            for ci in 0..c {
                feat[ci * n + v] *= inv;
            }
        }
        feat
    }
}

fn downsample2(grid: &[f64], dims: (usize, usize, usize)) -> Vec<f64> {
    let (h, w, d) = dims;
    let (h2, w2, d2) = (h / 2, w / 2, d / 2);
    let mut out = vec![0.0f64; h2 * w2 * d2];
    for k in 0..d2 {
        for j in 0..w2 {
            for i in 0..h2 {
                let mut acc = 0.0;
                for dk in 0..2 {
                    for dj in 0..2 {
                        for di in 0..2 {
                            acc += grid[(2 * i + di) + h * ((2 * j + dj) + w * (2 * k + dk))];
                        }
                    }
                }
                out[i + h2 * (j + w2 * k)] = acc / 8.0;
            }
        }
    }
    out
}

/// Per-case metric row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case_id: String,
    pub psnr_db: f64,
    pub ssim: f64,
    pub perceptual: f64,
}

/// Mean and standard deviation of one metric column.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ColumnStats {
    pub mean: f64,
    pub std: f64,
}

/// Aggregated evaluation report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub cases: Vec<CaseMetrics>,
    pub psnr_db: ColumnStats,
    pub ssim: ColumnStats,
    pub perceptual: ColumnStats,
}

fn column_stats(values: &[f64]) -> ColumnStats {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    // Sample std; a single row has std 0 by convention.
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    ColumnStats { mean, std }
}

/// Population mean and sample std per metric over the given rows.
pub fn aggregate(rows: Vec<CaseMetrics>) -> Result<MetricReport, CoreError> {
    if rows.is_empty() {
        return Err(CoreError::invalid("cannot aggregate an empty report"));
    }
    let take = |f: fn(&CaseMetrics) -> f64| rows.iter().map(f).collect::<Vec<_>>();
    let psnr_db = column_stats(&take(|r| r.psnr_db));
    let ssim = column_stats(&take(|r| r.ssim));
    let perceptual = column_stats(&take(|r| r.perceptual));
    Ok(MetricReport {
        cases: rows,
        psnr_db,
        ssim,
        perceptual,
    })
}

impl MetricReport {
    /// CSV with per-case rows followed by the aggregate rows. Fixed float
    /// formatting keeps reruns byte-identical.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("case,psnr_db,ssim,perceptual_surrogate\n");
        use std::fmt::Write;
        for c in &self.cases {
            let _ = writeln!(
                s,
                "{},{:.6},{:.6},{:.6}",
                c.case_id, c.psnr_db, c.ssim, c.perceptual
            );
        }
        let _ = writeln!(
            s,
            "mean,{:.6},{:.6},{:.6}",
            self.psnr_db.mean, self.ssim.mean, self.perceptual.mean
        );
        let _ = writeln!(
            s,
            "std,{:.6},{:.6},{:.6}",
            self.psnr_db.std, self.ssim.std, self.perceptual.std
        );
        s
    }

    /// JSON summary with the configuration echoed alongside the stats.
    pub fn to_json_summary(&self, config_echo: serde_json::Value) -> serde_json::Value {
        serde_json::json!({
            "psnr_db": { "mean": self.psnr_db.mean, "std": self.psnr_db.std },
            "ssim": { "mean": self.ssim.mean, "std": self.ssim.std },
            "perceptual_surrogate": { "mean": self.perceptual.mean, "std": self.perceptual.std },
            "cases": self.cases,
            "config": config_echo,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Unit;

    fn vol(vals: Vec<f32>, dims: (usize, usize, usize)) -> Volume {
        Volume::new(dims, (1.0, 1.0, 1.0), Unit::Hu, vals).unwrap()
    }

    #[test]
    fn psnr_closed_form_and_cap() {
        let dims = (8, 8, 8);
        let a = vol(vec![0.2; 512], dims);
        let b = vol(vec![0.7; 512], dims);
        // 10*log10(4/0.25) = 12.0412
        let p = psnr(&a, &b, 2.0, 99.0).unwrap();
        assert!((p - 12.0412).abs() < 1e-3, "{p}");
        assert_eq!(psnr(&a, &a, 2.0, 99.0).unwrap(), 99.0);
        assert_eq!(
            psnr(&a, &b, 2.0, 99.0).unwrap(),
            psnr(&b, &a, 2.0, 99.0).unwrap()
        );
    }

    #[test]
    fn ssim_identity_and_constant_closed_form() {
        let dims = (8, 8, 8);
        let vals: Vec<f32> = (0..512).map(|i| ((i * 37 % 100) as f32) / 100.0).collect();
        let a = vol(vals, dims);
        assert_eq!(ssim3d(&a, &a, 7, 0.01, 0.03, 1.0).unwrap(), 1.0);

        let c1v = 0.3f64;
        let c2v = 0.6f64;
        let a = vol(vec![c1v as f32; 512], dims);
        let b = vol(vec![c2v as f32; 512], dims);
        let c1 = 0.01f64 * 0.01 * 4.0; // (k1*L)^2 with L=2
        let expect = (2.0 * c1v * c2v + c1) / (c1v * c1v + c2v * c2v + c1);
        let got = ssim3d(&a, &b, 7, 0.01, 0.03, 2.0).unwrap();
        assert!((got - expect).abs() < 1e-9, "{got} vs {expect}");
    }

    #[test]
    fn ssim_rejects_small_volumes() {
        let a = vol(vec![0.0; 27], (3, 3, 3));
        assert!(ssim3d(&a, &a, 7, 0.01, 0.03, 1.0).is_err());
    }

    #[test]
    fn perceptual_identity_zero_and_deterministic() {
        let dims = (8, 8, 8);
        let vals: Vec<f32> = (0..512).map(|i| ((i * 13 % 64) as f32) / 64.0).collect();
        let a = vol(vals.clone(), dims);
        let net = PerceptualNet::new(17);
        assert_eq!(net.distance(&a, &a).unwrap(), 0.0);

        let mut other = vals;
        other[100] += 0.5;
        let b = vol(other, dims);
        let d1 = net.distance(&a, &b).unwrap();
        let d2 = PerceptualNet::new(17).distance(&a, &b).unwrap();
        assert!(d1 > 0.0);
        assert!((d1 - d2).abs() < 1e-12);
        // Symmetry of the squared-difference form.
        assert!((net.distance(&b, &a).unwrap() - d1).abs() < 1e-12);
    }

    #[test]
    fn aggregate_mean_and_sample_std() {
        let rows = vec![
            CaseMetrics { case_id: "a".into(), psnr_db: 22.0, ssim: 0.5, perceptual: 0.1 },
            CaseMetrics { case_id: "b".into(), psnr_db: 24.0, ssim: 0.7, perceptual: 0.3 },
        ];
        let rep = aggregate(rows).unwrap();
        assert!((rep.psnr_db.mean - 23.0).abs() < 1e-12);
        assert!((rep.psnr_db.std - 2.0f64.sqrt()).abs() < 1e-12);

        let one = aggregate(vec![CaseMetrics {
            case_id: "a".into(),
            psnr_db: 22.0,
            ssim: 0.5,
            perceptual: 0.1,
        }])
        .unwrap();
        assert_eq!(one.psnr_db.std, 0.0);
        assert!(aggregate(vec![]).is_err());
    }

    #[test]
    fn aggregate_is_order_invariant() {
        let r1 = vec![
            CaseMetrics { case_id: "a".into(), psnr_db: 20.0, ssim: 0.4, perceptual: 0.2 },
            CaseMetrics { case_id: "b".into(), psnr_db: 30.0, ssim: 0.9, perceptual: 0.4 },
        ];
        let mut r2 = r1.clone();
        r2.reverse();
        let a = aggregate(r1).unwrap();
        let b = aggregate(r2).unwrap();
        assert_eq!(a.psnr_db.mean, b.psnr_db.mean);
        assert_eq!(a.ssim.std, b.ssim.std);
    }
}
