//! Small shared helpers: stable hashing, seeded gaussian streams, file IO.

use crate::tensor::Mat;
use std::path::Path;

/// FNV-1a 64-bit hash. Stable across runs and platforms, unlike the std
/// hasher, so it is safe to persist (vocab hashes, config hashes).
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

pub fn hash_str(s: &str) -> u64 {
    fnv1a64(s.as_bytes())
}

/// Hash of a matrix's exact bit pattern; used for freeze-contract checks.
pub fn mat_checksum(m: &Mat) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for v in &m.data {
        for b in v.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    h ^= m.rows as u64;
    h = h.wrapping_mul(0x100000001b3);
    h ^= m.cols as u64;
    h.wrapping_mul(0x100000001b3)
}

/// SplitMix64 step; the workhorse behind hash-seeded deterministic streams.
#[inline]
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Uniform f64 in [0, 1) from a SplitMix64 state.
#[inline]
pub fn splitmix_f64(state: &mut u64) -> f64 {
    (splitmix64(state) >> 11) as f64 / (1u64 << 53) as f64
}

/// Deterministic standard-normal stream seeded by an arbitrary u64.
/// Box-Muller over SplitMix64; independent of the `rand` crate so the
/// values are stable even across rand version bumps.
pub fn seeded_normals(seed: u64, n: usize) -> Vec<f64> {
    let mut state = seed ^ 0x5851f42d4c957f2d;
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let u1 = splitmix_f64(&mut state).max(1e-300);
        let u2 = splitmix_f64(&mut state);
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        out.push(r * theta.cos());
        if out.len() < n {
            out.push(r * theta.sin());
        }
    }
    out
}

/// Matrix of i.i.d. normals drawn from `rng` with the given std.
pub fn randn(rng: &mut impl rand::Rng, rows: usize, cols: usize, std: f64) -> Mat {
    use rand_distr::Distribution;
    let dist = rand_distr::Normal::new(0.0, std).expect("std must be finite and positive");
    Mat::from_fn(rows, cols, |_, _| dist.sample(rng))
}

/// Write a serde-serializable value as pretty JSON with a trailing newline.
pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> crate::Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s)?;
    Ok(())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> crate::Result<T> {
    let s = std::fs::read_to_string(path)
        .map_err(|e| crate::Error::Data(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_str(&s)?)
}
