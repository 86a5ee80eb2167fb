//! Small shared helpers: seeded RNG streams, hashing, float formatting.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Deterministic RNG for a `(seed, stream)` pair.
///
/// Distinct streams give independent sequences for the same user seed, so
/// e.g. weight init and minibatch shuffling never share draws.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// `sin` and `cos` of an angle in degrees, exact at multiples of 90 and odd
/// in the angle (`sin(-a) == -sin(a)` bitwise).
pub fn sin_cos_deg(deg: f64) -> (f64, f64) {
    let quadrant = (deg / 90.0).round();
    let rem = (deg - 90.0 * quadrant).to_radians();
    let (s, c) = if rem == 0.0 { (0.0, 1.0) } else { rem.sin_cos() };
    match (quadrant as i64).rem_euclid(4) {
        0 => (s, c),
        1 => (c, -s),
        2 => (-s, -c),
        _ => (-c, s),
    }
}

/// Formats a real with nine digits after the decimal point, never
/// printing a negative zero.
pub fn fmt_fixed9(x: f64) -> String {
    let s = format!("{x:.9}");
    match s.strip_prefix('-') {
        Some(rest) if rest.bytes().all(|b| b == b'0' || b == b'.') => rest.to_string(),
        _ => s,
    }
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Population standard deviation.
pub fn population_std(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let m = mean(values);
    let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / values.len() as f64;
    var.sqrt()
}
