//! The quantization codebook: nearest-entry assignment in raw or
//! z-score-normalized space, usage telemetry, and the paired codebook /
//! commitment loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xct_core::parallel;

use crate::latent::LatentGrid;
use crate::trainer::TrainError;

/// Which geometry nearest-entry lookup uses. `Raw` compares vectors as they
/// are; `Normalized` compares them in the homogeneous space: the query set
/// standardized by its own scalar statistics and the codebook standardized
/// by the whole table's statistics. The shared statistics are what keep
/// every entry trainable, not only the currently-selected ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum LookupMode {
    Raw,
    Normalized,
}

pub const STANDARDIZE_EPS: f64 = 1e-6;

/// z-score a vector: `(v - mean)/(std + 1e-6)`, population std; a
/// near-constant vector (std < 1e-6) maps to the zero vector.
pub fn zscore_normalize(v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    xct_nn::graph::zscore_row(v, &mut out);
    out
}

/// Scalar mean/std over a value set (population std).
pub fn standardize_stats(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Apply `(v - mean)/(std + eps)` elementwise.
pub fn standardize(values: &[f64], mean: f64, std: f64) -> Vec<f64> {
    let inv = 1.0 / (std + STANDARDIZE_EPS);
    values.iter().map(|v| (v - mean) * inv).collect()
}

/// Table of `n` embedding vectors of dimension `n_z`, with usage counters.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub n: usize,
    pub n_z: usize,
    /// `[entry][channel]`
    pub entries: Vec<f64>,
    pub usage: Vec<u64>,
}

impl Codebook {
    pub fn new(n: usize, n_z: usize, entries: Vec<f64>) -> Result<Self, TrainError> {
        if n == 0 || n_z == 0 {
            return Err(TrainError::config("codebook n and n_z must be > 0"));
        }
        if entries.len() != n * n_z {
            return Err(TrainError::shape(format!(
                "codebook payload {} != {n} x {n_z}",
                entries.len()
            )));
        }
        if !entries.iter().all(|v| v.is_finite()) {
            return Err(TrainError::config("codebook entries must be finite"));
        }
        Ok(Codebook {
            n,
            n_z,
            entries,
            usage: vec![0; n],
        })
    }

    /// Uniform(-1/n, 1/n) initialization.
    pub fn init_uniform(n: usize, n_z: usize, seed: u64) -> Result<Self, TrainError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x636f6465); // codebook stream
        let bound = 1.0 / n as f64;
        let entries = (0..n * n_z)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        Codebook::new(n, n_z, entries)
    }

    pub fn entry(&self, i: usize) -> &[f64] {
        &self.entries[i * self.n_z..(i + 1) * self.n_z]
    }

    /// The whole table standardized by its own scalar statistics: the
    /// homogeneous-space representation downstream stages consume.
    pub fn standardized_entries(&self) -> Vec<f64> {
        let (mean, std) = standardize_stats(&self.entries);
        standardize(&self.entries, mean, std)
    }

    /// Nearest entry index for one vector; ties break to the lowest index.
    /// In `Normalized` mode a single query is standardized by its own
    /// values' statistics (the batch-of-one case).
    pub fn assign_one(&self, v: &[f64], mode: LookupMode) -> usize {
        match mode {
            LookupMode::Raw => nearest(v, &self.entries, self.n, self.n_z),
            LookupMode::Normalized => {
                let (m, s) = standardize_stats(v);
                let vn = standardize(v, m, s);
                nearest(&vn, &self.standardized_entries(), self.n, self.n_z)
            }
        }
    }

    /// Nearest entry per site for a `[sites * n_z]` matrix; parallel over
    /// sites, result independent of thread count. In `Normalized` mode the
    /// whole query set shares one standardization.
    pub fn assign_batch(&self, sites: &[f64], mode: LookupMode) -> Vec<usize> {
        debug_assert_eq!(sites.len() % self.n_z, 0);
        let count = sites.len() / self.n_z;
        match mode {
            LookupMode::Raw => parallel::map_indexed(count, |s| {
                nearest(
                    &sites[s * self.n_z..(s + 1) * self.n_z],
                    &self.entries,
                    self.n,
                    self.n_z,
                )
            }),
            LookupMode::Normalized => {
                let (m, s) = standardize_stats(sites);
                let queries = standardize(sites, m, s);
                let table = self.standardized_entries();
                parallel::map_indexed(count, |si| {
                    nearest(
                        &queries[si * self.n_z..(si + 1) * self.n_z],
                        &table,
                        self.n,
                        self.n_z,
                    )
                })
            }
        }
    }

    pub fn record_usage(&mut self, indices: &[usize]) {
        for &i in indices {
            self.usage[i] += 1;
        }
    }

    pub fn reset_usage(&mut self) {
        self.usage.fill(0);
    }

    /// Fraction of entries selected at least once since the last reset.
    pub fn usage_fraction(&self) -> f64 {
        let used = self.usage.iter().filter(|&&u| u > 0).count();
        used as f64 / self.n as f64
    }

    pub fn total_usage(&self) -> u64 {
        self.usage.iter().sum()
    }
}

fn nearest(v: &[f64], table: &[f64], n: usize, n_z: usize) -> usize {
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for i in 0..n {
        let row = &table[i * n_z..(i + 1) * n_z];
        let mut d = 0.0;
        for (a, b) in v.iter().zip(row) {
            let t = a - b;
            d += t * t;
        }
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// Quantize a continuous latent grid against the codebook: per-site nearest
/// entry (ties to the lowest index), usage counters incremented, and the
/// two-term codebook/commitment loss averaged over sites. The loss is
/// computed in normalized space when `homogeneous` is set, raw space
/// otherwise.
///
/// The quantized vectors follow the lookup convention: raw entries in `Raw`
/// mode, z-scored entries in `Normalized` mode (the homogeneous-space
/// representation downstream stages consume).
pub fn quantize(
    z: &LatentGrid,
    cb: &mut Codebook,
    mode: LookupMode,
    homogeneous: bool,
) -> Result<(LatentGrid, f64), TrainError> {
    if z.quantized() {
        return Err(TrainError::config("latent grid is already quantized"));
    }
    if z.n_z != cb.n_z {
        return Err(TrainError::shape(format!(
            "latent channels {} != codebook dim {}",
            z.n_z, cb.n_z
        )));
    }
    let indices = cb.assign_batch(&z.values, mode);
    cb.record_usage(&indices);

    let sites = z.sites();
    let mut values = vec![0.0; sites * z.n_z];
    match mode {
        LookupMode::Raw => {
            for (s, &idx) in indices.iter().enumerate() {
                values[s * z.n_z..(s + 1) * z.n_z].copy_from_slice(cb.entry(idx));
            }
        }
        LookupMode::Normalized => {
            let table = cb.standardized_entries();
            for (s, &idx) in indices.iter().enumerate() {
                values[s * z.n_z..(s + 1) * z.n_z]
                    .copy_from_slice(&table[idx * z.n_z..(idx + 1) * z.n_z]);
            }
        }
    }

    // Both stop-gradient terms have the same value; training distinguishes
    // them only by which side receives the gradient.
    let mut loss = 0.0;
    if homogeneous {
        let (zm, zs) = standardize_stats(&z.values);
        let zn = standardize(&z.values, zm, zs);
        // In Raw mode `values` are raw entries: standardize them by the
        // codebook statistics; in Normalized mode they already are.
        let qn = match mode {
            LookupMode::Raw => {
                let (m, s) = standardize_stats(&cb.entries);
                standardize(&values, m, s)
            }
            LookupMode::Normalized => values.clone(),
        };
        for (a, b) in zn.iter().zip(&qn) {
            let d = a - b;
            loss += 2.0 * d * d;
        }
    } else {
        for (a, b) in z.values.iter().zip(&values) {
            let d = a - b;
            loss += 2.0 * d * d;
        }
    }
    loss /= sites as f64;

    let grid = LatentGrid::new(z.dims, z.n_z, values, Some(indices))?;
    Ok((grid, loss))
}
