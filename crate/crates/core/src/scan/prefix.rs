/// Composition of two affine recurrence steps `h ↦ A·h + b`, applying
/// `first` then `second`.
#[inline]
pub fn combine(first: (f64, f64), second: (f64, f64)) -> (f64, f64) {
    (first.0 * second.0, second.0 * first.1 + second.1)
}

/// Hillis–Steele inclusive scan of `(a, u)` pairs under [`combine`].
///
/// Both slices hold `len` elements of `width` interleaved lanes
/// (`element * width + lane`). On return `a[j]` is the product of transitions
/// `0..=j` and `u[j]` the state reached from a zero initial state.
pub fn inclusive_scan_in_place(a: &mut [f64], u: &mut [f64], len: usize, width: usize) {
    debug_assert!(a.len() >= len * width && u.len() >= len * width);
    let mut offset = 1;
    while offset < len {
        for j in (offset..len).rev() {
            let (cur, prev) = (j * width, (j - offset) * width);
            for k in 0..width {
                u[cur + k] += a[cur + k] * u[prev + k];
                a[cur + k] *= a[prev + k];
            }
        }
        offset *= 2;
    }
}
