//! Closed forms for re-optimization under a constant forecast error.
//!
//! With real supply `(1 − r)` times the forecast and `k` equal re-optimization rounds, a single
//! contract ends with a fraction `(r/k)·Π_{i=1}^{k−1}(1 + r/i)` of its demand undelivered
//! (negative values are over-delivery).

/// Error rate `r = 1 − real/forecast` for a forecast that is `multiplier` times the real supply.
pub fn error_rate(multiplier: f64) -> f64 {
    1.0 - 1.0 / multiplier
}

/// Exact terminal under-delivery fraction after `k` rounds with error rate `r`.
///
/// # Panics
/// If `r ≥ 1` or `k = 0`.
pub fn theorem1_exact(r: f64, k: u32) -> f64 {
    assert!(r < 1.0 && k >= 1, "need r < 1 and k ≥ 1");
    (1..k).fold(r / k as f64, |acc, i| acc * (1.0 + r / i as f64))
}

/// Upper bound on `|theorem1_exact(r, k)|`: `(r + r²)/k^{1−r}` for `r > 0`, `|r|/k^{1−r}` for
/// `r < 0` and zero for `r = 0`.
///
/// # Panics
/// If `r ≥ 1` or `k = 0`.
pub fn theorem1_bound(r: f64, k: u32) -> f64 {
    assert!(r < 1.0 && k >= 1, "need r < 1 and k ≥ 1");
    let scale = (k as f64).powf(1.0 - r);
    if r > 0.0 {
        (r + r * r) / scale
    } else {
        r.abs() / scale
    }
}
