//! Small vector helpers shared across modules.
//!
//! Points and covectors are plain `&[f64]` slices so every module works in
//! any dimension without pulling a linear-algebra type into public APIs.

/// Euclidean inner product.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Euclidean norm.
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Japanese bracket `(1 + |a|^2)^{1/2}`.
pub fn bracket(a: &[f64]) -> f64 {
    (1.0 + dot(a, a)).sqrt()
}

/// Scalar bracket `(1 + t^2)^{1/2}`.
pub fn bracket_scalar(t: f64) -> f64 {
    (1.0 + t * t).sqrt()
}

/// `out = a + c * b`.
pub fn axpy(out: &mut [f64], a: &[f64], c: f64, b: &[f64]) {
    for i in 0..out.len() {
        out[i] = a[i] + c * b[i];
    }
}

/// Componentwise distance `|a - b|`.
pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// True when every entry is finite.
pub fn all_finite(a: &[f64]) -> bool {
    a.iter().all(|v| v.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_and_norm_agree() {
        let v = [3.0, 4.0];
        assert_eq!(dot(&v, &v), 25.0);
        assert_eq!(norm(&v), 5.0);
    }

    #[test]
    fn bracket_of_origin_is_one() {
        assert_eq!(bracket(&[0.0, 0.0]), 1.0);
        assert_eq!(bracket_scalar(0.0), 1.0);
    }
}
