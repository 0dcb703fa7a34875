//! Nearest-entry assignment against an independent exhaustive-scan oracle.
//!
//! The oracle recomputes distances with its own z-score and argmin code so a
//! shared bug cannot hide; ties must break to the lowest index in both.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xct_models::{Codebook, LookupMode};

/// Independent standardization: scalar mean/std over a value set.
fn oracle_standardize(values: &[f64]) -> Vec<f64> {
    let n = values.len() as f64;
    let mean: f64 = values.iter().sum::<f64>() / n;
    let var: f64 = values.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var.sqrt() + 1e-6);
    values.iter().map(|x| (x - mean) * inv).collect()
}

/// Exhaustive scan over a query *set*: in Normalized mode the queries share
/// one standardization and the table is standardized by its own statistics.
fn oracle_assign_set(queries: &[f64], cb: &Codebook, mode: LookupMode) -> Vec<usize> {
    let n_z = cb.n_z;
    let (qs, table) = match mode {
        LookupMode::Raw => (queries.to_vec(), cb.entries.clone()),
        LookupMode::Normalized => (
            oracle_standardize(queries),
            oracle_standardize(&cb.entries),
        ),
    };
    (0..queries.len() / n_z)
        .map(|s| {
            let q = &qs[s * n_z..(s + 1) * n_z];
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for i in 0..cb.n {
                let row = &table[i * n_z..(i + 1) * n_z];
                let d: f64 = q.iter().zip(row).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best_d {
                    best_d = d;
                    best = i;
                }
            }
            best
        })
        .collect()
}

fn oracle_nearest(v: &[f64], cb: &Codebook, mode: LookupMode) -> usize {
    oracle_assign_set(v, cb, mode)[0]
}

#[test]
fn assignment_matches_exhaustive_scan_both_modes() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for trial in 0..200 {
        let n = rng.gen_range(2..=64);
        let n_z = rng.gen_range(2..=16);
        let entries: Vec<f64> = (0..n * n_z).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let cb = Codebook::new(n, n_z, entries).unwrap();
        let v: Vec<f64> = (0..n_z).map(|_| rng.gen_range(-2.0..2.0)).collect();
        for mode in [LookupMode::Raw, LookupMode::Normalized] {
            let got = cb.assign_one(&v, mode);
            let expect = oracle_nearest(&v, &cb, mode);
            assert_eq!(got, expect, "trial {trial} mode {mode:?}");
        }
    }
}

#[test]
fn batch_assignment_matches_set_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cb = Codebook::init_uniform(48, 8, 3).unwrap();
    let sites: Vec<f64> = (0..64 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
    for mode in [LookupMode::Raw, LookupMode::Normalized] {
        let got = cb.assign_batch(&sites, mode);
        let expect = oracle_assign_set(&sites, &cb, mode);
        assert_eq!(got, expect, "mode {mode:?}");
    }
}

#[test]
fn duplicated_entries_tie_break_to_lowest_index() {
    // Entry 3 duplicates entry 1; the scan must return 1.
    let mut entries = vec![0.0; 5 * 4];
    for (i, chunk) in entries.chunks_mut(4).enumerate() {
        chunk.fill(i as f64);
    }
    entries.copy_within(4..8, 12);
    let cb = Codebook::new(5, 4, entries).unwrap();
    assert_eq!(cb.assign_one(&[1.0, 1.0, 1.0, 1.0], LookupMode::Raw), 1);
}
