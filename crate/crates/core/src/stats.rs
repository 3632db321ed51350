//! Small numeric helpers shared across the crate.
//!
//! Every percentile in this crate uses the nearest-rank rule: the value at
//! 1-based rank `ceil(q·n)` of the ascending sample, with `q = 0` mapping to
//! the first element.

/// Nearest-rank percentile of an ascending-sorted, non-empty slice.
pub fn nearest_rank<T: Copy>(sorted: &[T], q: f64) -> T {
    assert!(!sorted.is_empty(), "nearest_rank on empty sample");
    sorted[nearest_rank_index(sorted.len(), q)]
}

/// Zero-based index selected by the nearest-rank rule for a sample of size `n`.
pub fn nearest_rank_index(n: usize, q: f64) -> usize {
    debug_assert!(n > 0);
    // 1e-9 absorbs products like 0.07 * 100 = 7.000000000000001
    let rank = (q.clamp(0.0, 1.0) * n as f64 - 1e-9).ceil() as usize;
    rank.clamp(1, n) - 1
}

/// Classic median (mean of the two middle values for even sizes).
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of empty sample");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.max(0.0).sqrt())
}

/// SplitMix64 finalizer; used to derive stable per-item seeds.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable 64-bit hash of a string (FNV-1a), independent of platform and
/// toolchain.
pub fn stable_hash(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Derives a seed from a base seed and a sequence of stream identifiers.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(mix64(base), |acc, &p| mix64(acc ^ mix64(p)))
}
