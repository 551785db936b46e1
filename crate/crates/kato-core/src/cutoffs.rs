//! Piecewise-polynomial cutoff functions with exact derivatives.
//!
//! Every smooth cutoff in the crate (escape-function weights, spectral
//! window functions, wavepacket tapers, almost-analytic extensions) is built
//! from polynomial smoothsteps, so any derivative order is available in
//! closed form.

/// Dense polynomial in one variable, coefficients in ascending degree.
#[derive(Debug, Clone, PartialEq)]
pub struct Poly {
    pub coeffs: Vec<f64>,
}

impl Poly {
    pub fn new(coeffs: Vec<f64>) -> Self {
        Poly { coeffs }
    }

    pub fn constant(c: f64) -> Self {
        Poly { coeffs: vec![c] }
    }

    pub fn eval(&self, t: f64) -> f64 {
        self.coeffs.iter().rev().fold(0.0, |acc, &c| acc * t + c)
    }

    pub fn derivative(&self) -> Poly {
        if self.coeffs.len() <= 1 {
            return Poly::constant(0.0);
        }
        let coeffs = self
            .coeffs
            .iter()
            .enumerate()
            .skip(1)
            .map(|(k, &c)| k as f64 * c)
            .collect();
        Poly { coeffs }
    }
}

/// Monotone polynomial smoothstep on [0, 1] of smoothness class `C^k`.
///
/// `S(0) = 0`, `S(1) = 1`, with the first `k` derivatives vanishing at both
/// endpoints. `S'` is proportional to `t^k (1-t)^k`, so `S` itself is a
/// polynomial of degree `2k + 1`.
pub fn smoothstep_poly(k: usize) -> Poly {
    let mut coeffs = vec![0.0; 2 * k + 2];
    let mut binom = 1.0;
    for j in 0..=k {
        let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
        coeffs[k + j + 1] = sign * binom / (k + j + 1) as f64;
        binom *= (k - j) as f64 / (j + 1) as f64;
    }
    let p = Poly { coeffs };
    let scale = 1.0 / p.eval(1.0);
    Poly {
        coeffs: p.coeffs.iter().map(|c| c * scale).collect(),
    }
}

#[derive(Debug, Clone)]
struct Piece {
    lo: f64,
    hi: f64,
    /// Polynomial in the local variable u = (t - lo) / (hi - lo).
    poly: Poly,
}

/// Piecewise-polynomial function of one variable, constant outside the
/// covered intervals (value of the adjacent constant extension).
#[derive(Debug, Clone)]
pub struct CutoffFn {
    pieces: Vec<Piece>,
    left_value: f64,
    right_value: f64,
    /// Smoothness class of the construction (for documentation and checks).
    pub smoothness: usize,
}

impl CutoffFn {
    /// 0 for `t <= lo`, 1 for `t >= hi`, monotone `C^k` rise in between.
    pub fn step_up(lo: f64, hi: f64, k: usize) -> Self {
        assert!(hi > lo, "step_up needs lo < hi");
        CutoffFn {
            pieces: vec![Piece {
                lo,
                hi,
                poly: smoothstep_poly(k),
            }],
            left_value: 0.0,
            right_value: 1.0,
            smoothness: k,
        }
    }

    /// 1 for `t <= lo`, 0 for `t >= hi`, monotone `C^k` fall in between.
    pub fn step_down(lo: f64, hi: f64, k: usize) -> Self {
        assert!(hi > lo, "step_down needs lo < hi");
        let s = smoothstep_poly(k);
        let mut coeffs = s.coeffs.clone();
        for c in coeffs.iter_mut() {
            *c = -*c;
        }
        coeffs[0] += 1.0;
        CutoffFn {
            pieces: vec![Piece {
                lo,
                hi,
                poly: Poly { coeffs },
            }],
            left_value: 1.0,
            right_value: 0.0,
            smoothness: k,
        }
    }

    /// 0 outside `[a, d]`, 1 on `[b, c]`, `C^k` ramps on `[a, b]` and `[c, d]`.
    pub fn plateau(a: f64, b: f64, c: f64, d: f64, k: usize) -> Self {
        assert!(a < b && b <= c && c < d, "plateau needs a < b <= c < d");
        let up = smoothstep_poly(k);
        let mut down_coeffs = up.coeffs.clone();
        for x in down_coeffs.iter_mut() {
            *x = -*x;
        }
        down_coeffs[0] += 1.0;
        let mut pieces = vec![Piece { lo: a, hi: b, poly: up }];
        if c > b {
            pieces.push(Piece {
                lo: b,
                hi: c,
                poly: Poly::constant(1.0),
            });
        }
        pieces.push(Piece {
            lo: c,
            hi: d,
            poly: Poly { coeffs: down_coeffs },
        });
        CutoffFn {
            pieces,
            left_value: 0.0,
            right_value: 0.0,
            smoothness: k,
        }
    }

    pub fn eval(&self, t: f64) -> f64 {
        self.deriv(t, 0)
    }

    /// Exact derivative of the given order (order 0 is the value).
    pub fn deriv(&self, t: f64, order: usize) -> f64 {
        let first = self.pieces.first().expect("cutoff has pieces");
        let last = self.pieces.last().expect("cutoff has pieces");
        if t < first.lo {
            return if order == 0 { self.left_value } else { 0.0 };
        }
        if t >= last.hi {
            return if order == 0 { self.right_value } else { 0.0 };
        }
        for piece in &self.pieces {
            if t >= piece.lo && t < piece.hi {
                let width = piece.hi - piece.lo;
                let u = (t - piece.lo) / width;
                let mut p = piece.poly.clone();
                for _ in 0..order {
                    p = p.derivative();
                }
                return p.eval(u) / width.powi(order as i32);
            }
        }
        unreachable!("piece intervals cover [lo, hi)");
    }

    /// Support interval `[lo, hi]` outside of which the function is constant.
    pub fn ramp_interval(&self) -> (f64, f64) {
        (
            self.pieces.first().unwrap().lo,
            self.pieces.last().unwrap().hi,
        )
    }

    /// Breakpoints of the piecewise-polynomial representation, in order.
    /// Quadratures align panels to these so each panel sees a single
    /// polynomial piece.
    pub fn knots(&self) -> Vec<f64> {
        let mut k = Vec::with_capacity(self.pieces.len() + 1);
        k.push(self.pieces[0].lo);
        for p in &self.pieces {
            k.push(p.hi);
        }
        k
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn smoothstep_matches_classic_cubic_and_quintic() {
        let s1 = smoothstep_poly(1);
        assert_relative_eq!(s1.eval(0.5), 0.5, epsilon = 1e-14);
        assert_relative_eq!(s1.eval(0.25), 3.0 * 0.0625 - 2.0 * 0.015625, epsilon = 1e-14);
        let s2 = smoothstep_poly(2);
        let t: f64 = 0.3;
        let quintic = 10.0 * t.powi(3) - 15.0 * t.powi(4) + 6.0 * t.powi(5);
        assert_relative_eq!(s2.eval(t), quintic, epsilon = 1e-14);
    }

    #[test]
    fn step_up_endpoint_derivatives_vanish_to_order_k() {
        let k = 4;
        let f = CutoffFn::step_up(2.0, 3.0, k);
        assert_eq!(f.eval(1.9), 0.0);
        assert_eq!(f.eval(3.1), 1.0);
        for order in 1..=k {
            assert!(f.deriv(2.0, order).abs() < 1e-12);
            assert!(f.deriv(3.0 - 1e-13, order).abs() < 1e-8);
        }
        assert!(f.deriv(2.5, 1) > 0.0);
    }

    #[test]
    fn plateau_is_one_on_core_and_zero_outside() {
        let f = CutoffFn::plateau(0.5, 0.8, 1.6, 2.0, 3);
        assert_eq!(f.eval(0.4), 0.0);
        assert_eq!(f.eval(1.0), 1.0);
        assert_eq!(f.eval(1.6 - 1e-12), 1.0);
        assert_eq!(f.eval(2.5), 0.0);
        assert!(f.eval(0.65) > 0.0 && f.eval(0.65) < 1.0);
    }

    #[test]
    fn derivative_matches_finite_difference() {
        let f = CutoffFn::step_down(-1.0, 2.0, 3);
        let h = 1e-6;
        for &t in &[-0.5, 0.3, 1.7] {
            let fd = (f.eval(t + h) - f.eval(t - h)) / (2.0 * h);
            assert_relative_eq!(f.deriv(t, 1), fd, epsilon = 1e-7, max_relative = 1e-6);
        }
    }

    #[test]
    fn step_down_complements_step_up() {
        let up = CutoffFn::step_up(0.0, 1.0, 2);
        let down = CutoffFn::step_down(0.0, 1.0, 2);
        for i in 0..=20 {
            let t = i as f64 / 20.0;
            assert_relative_eq!(up.eval(t) + down.eval(t), 1.0, epsilon = 1e-14);
        }
    }
}
