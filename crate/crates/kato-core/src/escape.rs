//! Escape-function hierarchy and its differential inequalities.
//!
//! The chain runs `e0 -> lambda -> Phi -> lambda1`.  The base symbol `e0`
//! is the metric pairing of position and momentum scaled by the momentum
//! weight; `lambda` compresses it into a bounded weight that is switched on
//! only where the momentum dominates the position weight; `Phi` localizes
//! near the incoming cone at large radius; and `lambda1 = Phi^2 lambda` is
//! the localized escape symbol whose Hamilton derivative must grow along
//! the flow.  `check_escape_inequalities` sweeps a phase-space grid,
//! verifies the two sign conditions that couple `lambda` and `Phi`, and
//! fits the constants of the drift lower bound.

use crate::cutoffs::CutoffFn;
use crate::symbols::SymbolField;
use crate::util::{bracket, bracket_scalar, norm};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EscapeError {
    #[error("invalid escape parameters: {0}")]
    InvalidParams(&'static str),
    #[error("finite-difference Hamilton derivative unstable at x={x:?}, xi={xi:?} (disagreement {disagreement:.3e})")]
    DerivativeUnstable {
        x: Vec<f64>,
        xi: Vec<f64>,
        disagreement: f64,
    },
    #[error("drift inequality admits no positive constant; witness x={x:?}, xi={xi:?}")]
    InequalityViolated { x: Vec<f64>, xi: Vec<f64> },
    #[error("grid does not intersect the localized support")]
    EmptySupport,
    #[error("grid sweep supports dimension 2, got {0}")]
    DimensionUnsupported(usize),
}

/// Thresholds of the escape construction.  `epsilon` sets the step width of
/// the sign partition, `rho` the momentum-domination cutoff, `delta` the
/// incoming aperture, `nu` the weight exponent of the drift bound, `m0` the
/// large constant that dominates the bounded weight, and `r0`/`xi0_norm`
/// the spatial and momentum localization scales.
#[derive(Debug, Clone, Serialize)]
pub struct EscapeParams {
    pub epsilon: f64,
    pub rho: f64,
    pub nu: f64,
    pub m0: f64,
    pub delta: f64,
    pub r0: f64,
    pub xi0_norm: f64,
}

impl Default for EscapeParams {
    fn default() -> Self {
        EscapeParams {
            epsilon: 0.01,
            rho: 0.2,
            nu: 0.1,
            m0: 10.0,
            delta: 0.1,
            r0: 1.0,
            xi0_norm: 1.0,
        }
    }
}

impl EscapeParams {
    pub fn validate(&self) -> Result<(), EscapeError> {
        if !(self.epsilon > 0.0 && self.epsilon <= self.delta / 4.0) {
            return Err(EscapeError::InvalidParams(
                "epsilon must be positive and well below delta",
            ));
        }
        if !(self.rho > 0.0) {
            return Err(EscapeError::InvalidParams("rho must be positive"));
        }
        if !(self.nu > 0.0) {
            return Err(EscapeError::InvalidParams("nu must be positive"));
        }
        if !(self.m0 >= 1.0) {
            return Err(EscapeError::InvalidParams("m0 must be at least 1"));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(EscapeError::InvalidParams(
                "delta must lie in (0, 1) as a direction cosine",
            ));
        }
        if !(self.r0 > 0.0 && self.xi0_norm > 0.0) {
            return Err(EscapeError::InvalidParams(
                "localization scales must be positive",
            ));
        }
        Ok(())
    }
}

/// The five smooth cutoffs of the construction, realized as polynomial
/// smoothstep ramps with exactly the required supports.
#[derive(Debug, Clone)]
pub struct CutoffFamily {
    /// Monotone step: 0 below `epsilon`, 1 above `2 epsilon`.
    pub psi: CutoffFn,
    /// Momentum-domination switch: 1 below `rho/2`, 0 above `rho`.
    pub chi: CutoffFn,
    /// Radial switch: 0 below `r0`, 1 above `5 r0 / 2`.
    pub phi1: CutoffFn,
    /// Direction switch: 1 below `-delta`, 0 above `-delta/2`.
    pub phi2: CutoffFn,
    /// Momentum floor: 0 below `xi0/4`, 1 above `xi0/2`.
    pub phi3: CutoffFn,
}

const CUTOFF_SMOOTHNESS: usize = 4;

impl CutoffFamily {
    pub fn new(params: &EscapeParams) -> Result<Self, EscapeError> {
        params.validate()?;
        let k = CUTOFF_SMOOTHNESS;
        Ok(CutoffFamily {
            psi: CutoffFn::step_up(params.epsilon, 2.0 * params.epsilon, k),
            chi: CutoffFn::step_down(params.rho / 2.0, params.rho, k),
            phi1: CutoffFn::step_up(params.r0, 2.5 * params.r0, k),
            phi2: CutoffFn::step_down(-params.delta, -params.delta / 2.0, k),
            phi3: CutoffFn::step_up(params.xi0_norm / 4.0, params.xi0_norm / 2.0, k),
        })
    }

    /// Even partition member `1 - psi(t) - psi(-t)`, supported near zero.
    pub fn psi0(&self, t: f64) -> f64 {
        1.0 - self.psi.eval(t) - self.psi.eval(-t)
    }

    /// Odd partition member `psi(-t) - psi(t)`, equal to `-sgn(t)` away
    /// from the step.
    pub fn psi1(&self, t: f64) -> f64 {
        self.psi.eval(-t) - self.psi.eval(t)
    }

    /// Closed form of the derivative of `psi0`: `-sgn(t) psi'(|t|)`.
    pub fn psi0_deriv(&self, t: f64) -> f64 {
        -t.signum() * self.psi.deriv(t.abs(), 1)
    }

    /// Closed form of the derivative of `psi1`: `-psi'(|t|)`.
    pub fn psi1_deriv(&self, t: f64) -> f64 {
        -self.psi.deriv(t.abs(), 1)
    }
}

/// Base escape symbol: the radial pairing scaled by the momentum weight,
/// `e0 = a(x, xi) / <xi>`.
pub fn e0(field: &SymbolField, x: &[f64], xi: &[f64]) -> f64 {
    field.a_form(x, xi) / bracket(xi)
}

/// Radial pairing `a(x, xi) = sum_jk a^{jk}(x) x_j xi_k`, the quantity
/// monitored along incoming rays.
pub fn incoming_symbol_a(field: &SymbolField, x: &[f64], xi: &[f64]) -> f64 {
    field.a_form(x, xi)
}

/// Hamilton derivative of a scalar phase-space function along the full
/// symbol's flow, by Richardson-extrapolated central differences.
pub fn hamilton_derivative<F>(
    field: &SymbolField,
    f: &F,
    x: &[f64],
    xi: &[f64],
) -> Result<f64, EscapeError>
where
    F: Fn(&[f64], &[f64]) -> f64,
{
    let d = field.dim;
    let mut xdot = vec![0.0; d];
    let mut xidot = vec![0.0; d];
    field.flow_field_full(x, xi, &mut xdot, &mut xidot);
    let mut out = 0.0;
    let mut bx = x.to_vec();
    let mut bxi = xi.to_vec();
    for j in 0..d {
        if xdot[j] != 0.0 {
            let g = richardson_partial(
                |v| {
                    bx[j] = v;
                    f(&bx, xi)
                },
                x[j],
            )
            .map_err(|dis| unstable(x, xi, dis))?;
            bx[j] = x[j];
            out += xdot[j] * g;
        }
        if xidot[j] != 0.0 {
            let g = richardson_partial(
                |v| {
                    bxi[j] = v;
                    f(x, &bxi)
                },
                xi[j],
            )
            .map_err(|dis| unstable(x, xi, dis))?;
            bxi[j] = xi[j];
            out += xidot[j] * g;
        }
    }
    Ok(out)
}

fn unstable(x: &[f64], xi: &[f64], disagreement: f64) -> EscapeError {
    EscapeError::DerivativeUnstable {
        x: x.to_vec(),
        xi: xi.to_vec(),
        disagreement,
    }
}

/// Central difference at two step sizes with Richardson extrapolation.
/// Errors with the raw disagreement when the two estimates are mutually
/// inconsistent, which flags non-smooth integrands.
fn richardson_partial(mut g: impl FnMut(f64) -> f64, t0: f64) -> Result<f64, f64> {
    let h = 1e-6 * (1.0 + t0.abs());
    let d1 = (g(t0 + h) - g(t0 - h)) / (2.0 * h);
    let d2 = (g(t0 + 0.5 * h) - g(t0 - 0.5 * h)) / h;
    let est = (4.0 * d2 - d1) / 3.0;
    let dis = (d2 - d1).abs();
    if dis > 1e-2 * (1.0 + est.abs()) {
        return Err(dis);
    }
    Ok(est)
}

/// Bounded escape weight.  With `t = e0/<x>`, the plateau value is `t` near
/// the sign change and `m0 - <e0>^{-nu}` once the sign is resolved, and the
/// whole expression is switched on only where `<x> <= rho sqrt(p + V)`,
/// i.e. where the momentum dominates the position weight.
pub fn lambda_symbol(
    params: &EscapeParams,
    cutoffs: &CutoffFamily,
    field: &SymbolField,
    x: &[f64],
    xi: &[f64],
) -> f64 {
    let e = e0(field, x, xi);
    let bx = bracket(x);
    let t = e / bx;
    let weight = params.m0 - bracket_scalar(e).powf(-params.nu);
    let inner = t * cutoffs.psi0(t) - weight * cutoffs.psi1(t);
    let s = bx / field.p_full(x, xi).sqrt();
    -inner * cutoffs.chi.eval(s)
}

/// Incoming-cone localizer `phi1(|x|) phi2(a/(|x||xi|)) phi3(|xi|)`,
/// valued in [0, 1].
pub fn phi_symbol(
    params: &EscapeParams,
    cutoffs: &CutoffFamily,
    field: &SymbolField,
    x: &[f64],
    xi: &[f64],
) -> f64 {
    let _ = params;
    let nx = norm(x);
    let nxi = norm(xi);
    if nx * nxi < 1e-300 {
        return 0.0;
    }
    let cosdir = field.a_form(x, xi) / (nx * nxi);
    cutoffs.phi1.eval(nx) * cutoffs.phi2.eval(cosdir) * cutoffs.phi3.eval(nxi)
}

/// Localized escape symbol `lambda1 = Phi^2 lambda`.
pub fn lambda1_symbol(
    params: &EscapeParams,
    cutoffs: &CutoffFamily,
    field: &SymbolField,
    x: &[f64],
    xi: &[f64],
) -> f64 {
    let phi = phi_symbol(params, cutoffs, field, x, xi);
    phi * phi * lambda_symbol(params, cutoffs, field, x, xi)
}

/// Polar product grid over phase space: positions on `x_radii` times
/// `x_angles` directions, momenta on `xi_moduli` times `xi_angles`
/// directions.
#[derive(Debug, Clone)]
pub struct EscapeGrid {
    pub x_radii: Vec<f64>,
    pub x_angles: usize,
    pub xi_moduli: Vec<f64>,
    pub xi_angles: usize,
}

impl EscapeGrid {
    /// The reference sweep: 64 x 64 position cells over radii up to
    /// `10 r0`, 32 x 32 momentum cells.  The momentum moduli run
    /// log-spaced up to `80 xi0` so that the grid reaches the
    /// momentum-dominated region `<x> <= rho sqrt(p + V)` at every radius;
    /// with the default `rho` that region starts near `|xi| = <x>/rho`.
    pub fn standard(params: &EscapeParams) -> Self {
        EscapeGrid::with_shape(params, 64, 64, 32, 32)
    }

    /// Same coverage at configurable resolution.
    pub fn with_shape(
        params: &EscapeParams,
        nr: usize,
        na: usize,
        nm: usize,
        nb: usize,
    ) -> Self {
        let r_lo = 0.5 * params.r0;
        let r_hi = 10.0 * params.r0;
        let x_radii = (0..nr)
            .map(|i| r_lo + (r_hi - r_lo) * i as f64 / (nr - 1) as f64)
            .collect();
        let m_lo = 0.25 * params.xi0_norm;
        let m_hi = 80.0 * params.xi0_norm;
        let lr = (m_hi / m_lo).ln();
        let xi_moduli = (0..nm)
            .map(|i| m_lo * (lr * i as f64 / (nm - 1) as f64).exp())
            .collect();
        EscapeGrid {
            x_radii,
            x_angles: na,
            xi_moduli,
            xi_angles: nb,
        }
    }

    pub fn len(&self) -> usize {
        self.x_radii.len() * self.x_angles * self.xi_moduli.len() * self.xi_angles
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn point(&self, idx: usize) -> ([f64; 2], [f64; 2]) {
        let nb = self.xi_angles;
        let nm = self.xi_moduli.len();
        let na = self.x_angles;
        let ib = idx % nb;
        let im = (idx / nb) % nm;
        let ia = (idx / (nb * nm)) % na;
        let ir = idx / (nb * nm * na);
        let r = self.x_radii[ir];
        let ta = 2.0 * std::f64::consts::PI * ia as f64 / na as f64;
        let m = self.xi_moduli[im];
        let tb = 2.0 * std::f64::consts::PI * (ib as f64 + 0.5) / nb as f64;
        (
            [r * ta.cos(), r * ta.sin()],
            [m * tb.cos(), m * tb.sin()],
        )
    }
}

/// Witness phase-space point attached to a reported margin.
#[derive(Debug, Clone, Serialize)]
pub struct PhaseSample {
    pub x: Vec<f64>,
    pub xi: Vec<f64>,
}

/// Grid-sweep results: worst-case margins for the sign conditions, the
/// fitted drift constants, and bookkeeping counts.
#[derive(Debug, Clone, Serialize)]
pub struct EscapeReport {
    /// Minimum of `H e0 - |xi| + 1` over the outer shells; nonnegative
    /// when the base symbol grows along the flow.
    pub radial_growth_margin: f64,
    /// Minimum of `-H Phi` over the support of `lambda`; nonnegative when
    /// the localizer is monotone along the flow where the weight acts.
    pub transport_sign_margin: f64,
    pub transport_witness: Option<PhaseSample>,
    /// Minimum of `lambda` over the support of `Phi`; nonnegative when the
    /// weight keeps a single sign where the localizer acts.
    pub support_sign_margin: f64,
    pub support_witness: Option<PhaseSample>,
    /// Largest constant `C` with
    /// `-H lambda1 >= C <x>^{-1-nu} Phi^2 (|x| + |xi|) - C' Phi^2`
    /// on every grid point, after fixing the smallest feasible `C'`.
    pub drift_constant: f64,
    pub drift_offset: f64,
    /// Minimum of the per-unit-`Phi^2` residual `u + C' - C v` over the
    /// support; zero at the binding point by construction.
    pub min_residual: f64,
    pub lambda1_max: f64,
    pub grid_points: usize,
    pub support_points: usize,
}

struct Accum {
    transport: f64,
    transport_w: Option<PhaseSample>,
    support: f64,
    support_w: Option<PhaseSample>,
    min_u: f64,
    min_u_w: Option<PhaseSample>,
    uv: Vec<(f64, f64)>,
    lambda1_max: f64,
    support_points: usize,
    err: Option<EscapeError>,
}

impl Accum {
    fn new() -> Self {
        Accum {
            transport: f64::INFINITY,
            transport_w: None,
            support: f64::INFINITY,
            support_w: None,
            min_u: f64::INFINITY,
            min_u_w: None,
            uv: Vec::new(),
            lambda1_max: 0.0,
            support_points: 0,
            err: None,
        }
    }

    fn merge(mut self, mut other: Accum) -> Accum {
        if self.err.is_none() {
            self.err = other.err.take();
        }
        if other.transport < self.transport {
            self.transport = other.transport;
            self.transport_w = other.transport_w.take();
        }
        if other.support < self.support {
            self.support = other.support;
            self.support_w = other.support_w.take();
        }
        if other.min_u < self.min_u {
            self.min_u = other.min_u;
            self.min_u_w = other.min_u_w.take();
        }
        self.lambda1_max = self.lambda1_max.max(other.lambda1_max);
        self.support_points += other.support_points;
        self.uv.append(&mut other.uv);
        self
    }
}

/// Sweeps the grid, checks both sign conditions, and fits the drift
/// constants `C` (maximal) and `C'` (minimal) of the lower bound on
/// `-H lambda1`.  Points with `Phi^2 <= 1e-12` contribute nothing, since
/// both sides of the bound vanish with `Phi^2`.
pub fn check_escape_inequalities(
    params: &EscapeParams,
    cutoffs: &CutoffFamily,
    field: &SymbolField,
    grid: &EscapeGrid,
) -> Result<EscapeReport, EscapeError> {
    params.validate()?;
    if field.dim != 2 {
        return Err(EscapeError::DimensionUnsupported(field.dim));
    }
    let n = grid.len();
    let acc = (0..n)
        .into_par_iter()
        .fold(Accum::new, |mut acc, idx| {
            if acc.err.is_some() {
                return acc;
            }
            let (x, xi) = grid.point(idx);
            let lam = lambda_symbol(params, cutoffs, field, &x, &xi);
            let phi = phi_symbol(params, cutoffs, field, &x, &xi);
            let phi2 = phi * phi;
            if lam.abs() > 1e-14 {
                let hphi = match hamilton_derivative(
                    field,
                    &|a, b| phi_symbol(params, cutoffs, field, a, b),
                    &x,
                    &xi,
                ) {
                    Ok(v) => v,
                    Err(e) => {
                        acc.err = Some(e);
                        return acc;
                    }
                };
                if -hphi < acc.transport {
                    acc.transport = -hphi;
                    acc.transport_w = Some(sample(&x, &xi));
                }
            }
            if phi2 > 1e-12 {
                acc.support_points += 1;
                if lam < acc.support {
                    acc.support = lam;
                    acc.support_w = Some(sample(&x, &xi));
                }
                acc.lambda1_max = acc.lambda1_max.max((phi2 * lam).abs());
                let q = match hamilton_derivative(
                    field,
                    &|a, b| lambda1_symbol(params, cutoffs, field, a, b),
                    &x,
                    &xi,
                ) {
                    Ok(v) => -v,
                    Err(e) => {
                        acc.err = Some(e);
                        return acc;
                    }
                };
                let u = q / phi2;
                let v = bracket(&x).powf(-(1.0 + params.nu)) * (norm(&x) + norm(&xi));
                if u < acc.min_u {
                    acc.min_u = u;
                    acc.min_u_w = Some(sample(&x, &xi));
                }
                acc.uv.push((u, v));
            }
            acc
        })
        .reduce(Accum::new, Accum::merge);
    if let Some(e) = acc.err {
        return Err(e);
    }
    if acc.uv.is_empty() {
        return Err(EscapeError::EmptySupport);
    }
    let offset = acc.min_u.min(0.0).abs() + 1e-6 * (1.0 + acc.min_u.abs());
    let mut constant = f64::INFINITY;
    for &(u, v) in &acc.uv {
        constant = constant.min((u + offset) / v);
    }
    if !(constant > 0.0) {
        let w = acc.min_u_w.unwrap();
        return Err(EscapeError::InequalityViolated { x: w.x, xi: w.xi });
    }
    let mut min_residual = f64::INFINITY;
    for &(u, v) in &acc.uv {
        min_residual = min_residual.min(u + offset - constant * v);
    }
    Ok(EscapeReport {
        radial_growth_margin: radial_growth_margin(field)?,
        transport_sign_margin: acc.transport,
        transport_witness: acc.transport_w,
        support_sign_margin: acc.support,
        support_witness: acc.support_w,
        drift_constant: constant,
        drift_offset: offset,
        min_residual,
        lambda1_max: acc.lambda1_max,
        grid_points: n,
        support_points: acc.support_points,
    })
}

fn sample(x: &[f64], xi: &[f64]) -> PhaseSample {
    PhaseSample {
        x: x.to_vec(),
        xi: xi.to_vec(),
    }
}

/// Minimum of `H e0 - |xi| + 1` over shells `r0 <= |x| <= 10 r0` and
/// moduli `0.1 <= |xi| <= 10`: the growth bound satisfied by the base
/// symbol away from the obstacle.
fn radial_growth_margin(field: &SymbolField) -> Result<f64, EscapeError> {
    let (nr, na, nm, nb) = (16usize, 12usize, 16usize, 12usize);
    let mut worst = f64::INFINITY;
    for ir in 0..nr {
        let r = field.r0 * (1.0 + 9.0 * ir as f64 / (nr - 1) as f64);
        for ia in 0..na {
            let ta = 2.0 * std::f64::consts::PI * ia as f64 / na as f64;
            let x = [r * ta.cos(), r * ta.sin()];
            for im in 0..nm {
                let m = 0.1 + 9.9 * im as f64 / (nm - 1) as f64;
                for ib in 0..nb {
                    let tb = 2.0 * std::f64::consts::PI * (ib as f64 + 0.5) / nb as f64;
                    let xi = [m * tb.cos(), m * tb.sin()];
                    let g = hamilton_derivative(field, &|a, b| e0(field, a, b), &x, &xi)?;
                    worst = worst.min(g - m + 1.0);
                }
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (EscapeParams, CutoffFamily, SymbolField) {
        let params = EscapeParams::default();
        let cutoffs = CutoffFamily::new(&params).unwrap();
        (params, cutoffs, SymbolField::flat(2))
    }

    #[test]
    fn partition_identity_holds_pointwise() {
        let (_, cutoffs, _) = setup();
        for i in 0..1000 {
            let t = -0.25 + 0.5 * i as f64 / 999.0;
            let s = cutoffs.psi0(t) + cutoffs.psi.eval(t) + cutoffs.psi.eval(-t);
            assert!((s - 1.0).abs() < 1e-12, "partition off at t={t}: {s}");
        }
    }

    #[test]
    fn derived_cutoff_derivatives_match_closed_forms() {
        let (_, cutoffs, _) = setup();
        let h = 1e-7;
        for i in 0..200 {
            let t = -0.05 + 0.1 * (i as f64 + 0.31) / 200.0;
            let fd0 = (cutoffs.psi0(t + h) - cutoffs.psi0(t - h)) / (2.0 * h);
            let fd1 = (cutoffs.psi1(t + h) - cutoffs.psi1(t - h)) / (2.0 * h);
            assert!((fd0 - cutoffs.psi0_deriv(t)).abs() < 1e-6, "psi0' at {t}");
            assert!((fd1 - cutoffs.psi1_deriv(t)).abs() < 1e-6, "psi1' at {t}");
        }
    }

    #[test]
    fn base_symbol_and_hamilton_derivative_on_flat() {
        let (_, _, field) = setup();
        let v = e0(&field, &[1.0, 0.0], &[1.0, 0.0]);
        assert_relative_eq!(v, 1.0 / 2.0f64.sqrt(), epsilon = 1e-14);
        let g = hamilton_derivative(&field, &|x, xi| e0(&field, x, xi), &[1.0, 0.0], &[1.0, 0.0])
            .unwrap();
        assert_relative_eq!(g, 2.0f64.sqrt(), epsilon = 1e-9);
        assert_relative_eq!(
            incoming_symbol_a(&field, &[3.0, 0.0], &[-1.0, 0.0]),
            -3.0,
            epsilon = 1e-14
        );
        assert_relative_eq!(
            incoming_symbol_a(&field, &[3.0, 0.0], &[0.0, 2.0]),
            0.0,
            epsilon = 1e-14
        );
    }

    #[test]
    fn hamilton_derivative_flags_kinks() {
        let (_, _, field) = setup();
        let res = hamilton_derivative(
            &field,
            &|x, _| x[0].abs(),
            &[2.5e-7, 0.0],
            &[1.0, 0.0],
        );
        assert!(matches!(res, Err(EscapeError::DerivativeUnstable { .. })));
    }

    #[test]
    fn weight_vanishes_outside_momentum_window() {
        let (params, cutoffs, field) = setup();
        let lam = lambda_symbol(&params, &cutoffs, &field, &[5.0, 0.0], &[0.3, 0.0]);
        assert_eq!(lam, 0.0);
    }

    #[test]
    fn weight_sign_tracks_deep_incoming_and_outgoing() {
        let (params, cutoffs, field) = setup();
        let x = [2.0, 0.0];
        for sign in [-1.0, 1.0] {
            let xi = [30.0 * sign, 0.0];
            let e = e0(&field, &x, &xi);
            let expect = -sign * (params.m0 - bracket_scalar(e).powf(-params.nu));
            let lam = lambda_symbol(&params, &cutoffs, &field, &x, &xi);
            assert_relative_eq!(lam, expect, epsilon = 1e-12);
            assert!(lam * sign < 0.0);
        }
    }

    #[test]
    fn localizer_saturates_and_vanishes() {
        let (params, cutoffs, field) = setup();
        let phi = phi_symbol(&params, &cutoffs, &field, &[3.0, 0.0], &[-1.0, 0.0]);
        assert_eq!(phi, 1.0);
        let inner = phi_symbol(&params, &cutoffs, &field, &[0.9, 0.0], &[-1.0, 0.0]);
        assert_eq!(inner, 0.0);
        let h = 1e-6;
        for j in 0..2 {
            let mut xp = [3.0, 0.0];
            let mut xm = xp;
            xp[j] += h;
            xm[j] -= h;
            let g = (phi_symbol(&params, &cutoffs, &field, &xp, &[-1.0, 0.0])
                - phi_symbol(&params, &cutoffs, &field, &xm, &[-1.0, 0.0]))
                / (2.0 * h);
            assert!(g.abs() <= 1e-10, "gradient leak in x[{j}]: {g}");
        }
    }

    #[test]
    fn localizer_is_momentum_scale_invariant() {
        let (params, cutoffs, field) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let x = [rng.gen_range(-8.0..8.0), rng.gen_range(-8.0..8.0)];
            let ang = rng.gen_range(0.0..std::f64::consts::TAU);
            let h: f64 = rng.gen_range(0.05..1.0);
            let m = rng.gen_range(0.5 / h..8.0 / h);
            let xi = [m * ang.cos(), m * ang.sin()];
            let hxi = [h * xi[0], h * xi[1]];
            if norm(&hxi) < 0.5 * params.xi0_norm {
                continue;
            }
            let a = phi_symbol(&params, &cutoffs, &field, &x, &hxi);
            let b = phi_symbol(&params, &cutoffs, &field, &x, &xi);
            assert!((a - b).abs() < 1e-12, "scale break at x={x:?} xi={xi:?} h={h}");
        }
    }

    #[test]
    fn inequality_report_on_reduced_grid() {
        let (params, cutoffs, field) = setup();
        let grid = EscapeGrid::with_shape(&params, 16, 16, 12, 12);
        let report = check_escape_inequalities(&params, &cutoffs, &field, &grid).unwrap();
        assert!(report.support_points > 0);
        assert!(
            report.transport_sign_margin >= -1e-9,
            "transport margin {}",
            report.transport_sign_margin
        );
        assert!(
            report.support_sign_margin >= -1e-12,
            "support margin {}",
            report.support_sign_margin
        );
        assert!(report.drift_constant > 0.0);
        assert!(report.min_residual >= -1e-12);
        assert!(report.lambda1_max <= params.m0 + 1e-9);
        assert!(
            report.radial_growth_margin > 0.0,
            "radial growth margin {}",
            report.radial_growth_margin
        );
    }

    #[test]
    fn invalid_params_are_rejected() {
        let mut p = EscapeParams::default();
        p.epsilon = 0.09;
        assert!(matches!(
            CutoffFamily::new(&p),
            Err(EscapeError::InvalidParams(_))
        ));
    }
}
