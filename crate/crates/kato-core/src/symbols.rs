//! Coefficient fields, obstacle geometry, and assumption verification.
//!
//! A `SymbolField` carries the metric coefficients `a` and the potential `V`
//! of the divergence-form operator; an `Obstacle` carries the excluded
//! compact region through a level function and parametrized boundary curves.

use crate::cutoffs::CutoffFn;
use crate::util::{all_finite, bracket, dist, dot, norm};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SymbolsError {
    #[error("field value is not finite at x = {at:?}")]
    NonFiniteField { at: Vec<f64> },
    #[error("dimension mismatch: field has dimension {field_dim}, point has {point_dim}")]
    DimensionMismatch { field_dim: usize, point_dim: usize },
    #[error("boundary projection did not converge from x = {from:?}")]
    ProjectionDiverged { from: Vec<f64> },
    #[error("point is too deep inside the obstacle for a reliable projection: x = {at:?}")]
    InsideObstacle { at: Vec<f64> },
    #[error("obstacle has no boundary to project onto")]
    NoBoundary,
    #[error("off-diagonal metric coefficients are not supported here")]
    AnisotropyUnsupported,
}

/// Metric coefficient family. All shipped metrics are diagonal; the
/// diagonal is returned per point.
#[derive(Clone)]
pub enum Metric {
    /// Identity coefficients.
    Flat,
    /// Constant diagonal.
    DiagConst(Vec<f64>),
    /// `a(x) = (1 + amp * exp(-|x|^2 / width^2)) * Id`.
    ConformalBump { amp: f64, width: f64 },
    /// Blend `chi * Id + (1 - chi) * base` with a radial cutoff `chi(|x|)`,
    /// used by the operator extension.
    Blended { base: Box<Metric>, chi: CutoffFn },
}

impl Metric {
    /// Writes the diagonal of `a(x)` into `out` (length = dimension).
    pub fn diag(&self, x: &[f64], out: &mut [f64]) {
        match self {
            Metric::Flat => out.fill(1.0),
            Metric::DiagConst(d) => out.copy_from_slice(d),
            Metric::ConformalBump { amp, width } => {
                let c = 1.0 + amp * (-dot(x, x) / (width * width)).exp();
                out.fill(c);
            }
            Metric::Blended { base, chi } => {
                base.diag(x, out);
                let w = chi.eval(norm(x));
                for v in out.iter_mut() {
                    *v = w + (1.0 - w) * *v;
                }
            }
        }
    }

    /// Writes `grad[i * d + j] = d a_jj / d x_i`.
    pub fn diag_grad(&self, x: &[f64], grad: &mut [f64]) {
        let d = x.len();
        match self {
            Metric::Flat | Metric::DiagConst(_) => grad.fill(0.0),
            Metric::ConformalBump { amp, width } => {
                let w2 = width * width;
                let c = amp * (-dot(x, x) / w2).exp();
                for i in 0..d {
                    let gi = -2.0 * x[i] / w2 * c;
                    for j in 0..d {
                        grad[i * d + j] = gi;
                    }
                }
            }
            Metric::Blended { base, chi } => {
                base.diag_grad(x, grad);
                let r = norm(x);
                let w = chi.eval(r);
                let dw = chi.deriv(r, 1);
                let mut base_diag = vec![0.0; d];
                base.diag(x, &mut base_diag);
                for i in 0..d {
                    let dr_dxi = if r > 0.0 { x[i] / r } else { 0.0 };
                    for j in 0..d {
                        grad[i * d + j] = dw * dr_dxi * (1.0 - base_diag[j])
                            + (1.0 - w) * grad[i * d + j];
                    }
                }
            }
        }
    }
}

/// Potential family.
#[derive(Clone)]
pub enum Potential {
    Const(f64),
    /// `V(x) = 1 + |x|^2`.
    OnePlusSquare,
    /// `V(x) = exp(|x|)`; grows too fast for the admissible class and is
    /// shipped as a deliberate failure witness.
    ExpNorm,
    /// Blend `chi + (1 - chi) * base` with a radial cutoff.
    Blended { base: Box<Potential>, chi: CutoffFn },
}

impl Potential {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Potential::Const(v) => *v,
            Potential::OnePlusSquare => 1.0 + dot(x, x),
            Potential::ExpNorm => norm(x).exp(),
            Potential::Blended { base, chi } => {
                let w = chi.eval(norm(x));
                w + (1.0 - w) * base.eval(x)
            }
        }
    }

    pub fn grad(&self, x: &[f64], out: &mut [f64]) {
        match self {
            Potential::Const(_) => out.fill(0.0),
            Potential::OnePlusSquare => {
                for (o, xi) in out.iter_mut().zip(x) {
                    *o = 2.0 * xi;
                }
            }
            Potential::ExpNorm => {
                let r = norm(x);
                let e = r.exp();
                for (o, xi) in out.iter_mut().zip(x) {
                    *o = if r > 0.0 { e * xi / r } else { 0.0 };
                }
            }
            Potential::Blended { base, chi } => {
                base.grad(x, out);
                let r = norm(x);
                let w = chi.eval(r);
                let dw = chi.deriv(r, 1);
                let vb = base.eval(x);
                for (i, o) in out.iter_mut().enumerate() {
                    let dr_dxi = if r > 0.0 { x[i] / r } else { 0.0 };
                    *o = dw * dr_dxi * (1.0 - vb) + (1.0 - w) * *o;
                }
            }
        }
    }
}

/// Coefficient field of the operator `sum_j D_j (a^{jj} D_j) + V`.
#[derive(Clone)]
pub struct SymbolField {
    pub dim: usize,
    pub metric: Metric,
    pub potential: Potential,
    /// Uniform ellipticity constant `c` with `a(x) >= c * Id` expected.
    pub ellipticity: f64,
    /// Radius enclosing the obstacle and any coefficient structure.
    pub r0: f64,
    /// Localization radius for the near-boundary cutoffs; defaults to `2 * r0`.
    pub r1: f64,
}

impl SymbolField {
    pub fn flat(dim: usize) -> Self {
        SymbolField {
            dim,
            metric: Metric::Flat,
            potential: Potential::Const(1.0),
            ellipticity: 1.0,
            r0: 1.0,
            r1: 2.0,
        }
    }

    pub fn with_r0(mut self, r0: f64) -> Self {
        self.r0 = r0;
        self.r1 = 2.0 * r0;
        self
    }

    pub fn with_r1(mut self, r1: f64) -> Self {
        self.r1 = r1;
        self
    }

    /// Principal symbol `p(x, xi) = sum_j a^{jj}(x) xi_j^2`.
    pub fn p(&self, x: &[f64], xi: &[f64]) -> f64 {
        let mut a = vec![0.0; self.dim];
        self.metric.diag(x, &mut a);
        a.iter().zip(xi).map(|(aj, xj)| aj * xj * xj).sum()
    }

    /// Radial pairing `a(x, xi) = sum_j a^{jj}(x) x_j xi_j`, the escape
    /// direction indicator.
    pub fn a_form(&self, x: &[f64], xi: &[f64]) -> f64 {
        self.a_pair(x, x, xi)
    }

    /// Kinetic bilinear pairing `sum_j a^{jj}(x) u_j v_j`.
    pub fn a_pair(&self, x: &[f64], u: &[f64], v: &[f64]) -> f64 {
        let mut a = vec![0.0; self.dim];
        self.metric.diag(x, &mut a);
        a.iter()
            .zip(u.iter().zip(v))
            .map(|(aj, (uj, vj))| aj * uj * vj)
            .sum()
    }

    /// Hamilton vector field of `p`: `xdot_j = 2 a^{jj} xi_j`,
    /// `xidot_i = - sum_j (d a^{jj} / d x_i) xi_j^2`.
    pub fn flow_field(&self, x: &[f64], xi: &[f64], xdot: &mut [f64], xidot: &mut [f64]) {
        let d = self.dim;
        let mut a = vec![0.0; d];
        self.metric.diag(x, &mut a);
        for j in 0..d {
            xdot[j] = 2.0 * a[j] * xi[j];
        }
        let mut grad = vec![0.0; d * d];
        self.metric.diag_grad(x, &mut grad);
        for i in 0..d {
            let mut s = 0.0;
            for j in 0..d {
                s += grad[i * d + j] * xi[j] * xi[j];
            }
            xidot[i] = -s;
        }
    }

    pub fn v(&self, x: &[f64]) -> f64 {
        self.potential.eval(x)
    }

    /// Full symbol `p + V`, strictly positive for admissible fields since
    /// the potential is bounded below by one.
    pub fn p_full(&self, x: &[f64], xi: &[f64]) -> f64 {
        self.p(x, xi) + self.v(x)
    }

    /// Hamilton vector field of the full symbol `p + V`: the kinetic field
    /// plus the force term `xidot_i -= dV/dx_i`.
    pub fn flow_field_full(&self, x: &[f64], xi: &[f64], xdot: &mut [f64], xidot: &mut [f64]) {
        self.flow_field(x, xi, xdot, xidot);
        let mut g = vec![0.0; self.dim];
        self.potential.grad(x, &mut g);
        for (xd, gj) in xidot.iter_mut().zip(&g) {
            *xd -= gj;
        }
    }
}

/// Compact excluded region described by a level function `b` with
/// `K = {b <= 0}` and domain `{b > 0}`.
#[derive(Debug, Clone, Serialize)]
pub enum ObstacleKind {
    /// Free space, no boundary.
    None,
    /// Disk of given radius centered at the origin.
    Disk { radius: f64 },
    /// Circular wall enclosing the domain: `K = {|x| >= radius}`.
    InvertedDisk { radius: f64 },
    /// Axis-aligned ellipse `x^2/a^2 + y^2/b^2 <= 1`.
    Ellipse { a: f64, b: f64 },
    /// Polar curve `|x| <= base + amp * cos(lobes * phi)`; concave dents
    /// appear once `amp * (1 + lobes^2) > base`.
    Kidney { base: f64, amp: f64, lobes: u32 },
    /// Two disks of equal radius centered at `(\pm separation / 2, 0)`.
    TwoDisks { separation: f64, radius: f64 },
}

#[derive(Debug, Clone, Serialize)]
pub struct Obstacle {
    pub kind: ObstacleKind,
}

impl Obstacle {
    pub fn none() -> Self {
        Obstacle { kind: ObstacleKind::None }
    }

    pub fn disk(radius: f64) -> Self {
        Obstacle { kind: ObstacleKind::Disk { radius } }
    }

    pub fn inverted_disk(radius: f64) -> Self {
        Obstacle { kind: ObstacleKind::InvertedDisk { radius } }
    }

    pub fn ellipse(a: f64, b: f64) -> Self {
        Obstacle { kind: ObstacleKind::Ellipse { a, b } }
    }

    pub fn kidney(base: f64, amp: f64, lobes: u32) -> Self {
        Obstacle { kind: ObstacleKind::Kidney { base, amp, lobes } }
    }

    pub fn two_disks(separation: f64, radius: f64) -> Self {
        Obstacle { kind: ObstacleKind::TwoDisks { separation, radius } }
    }

    pub fn has_boundary(&self) -> bool {
        !matches!(self.kind, ObstacleKind::None)
    }

    /// Smallest radius enclosing the obstacle (the wall radius for the
    /// inverted disk).
    pub fn bounding_radius(&self) -> f64 {
        match self.kind {
            ObstacleKind::None => 1.0,
            ObstacleKind::Disk { radius } | ObstacleKind::InvertedDisk { radius } => radius,
            ObstacleKind::Ellipse { a, b } => a.max(b),
            ObstacleKind::Kidney { base, amp, .. } => base + amp,
            ObstacleKind::TwoDisks { separation, radius } => separation / 2.0 + radius,
        }
    }

    /// Characteristic boundary feature scale, used for projection guards.
    pub fn feature_scale(&self) -> f64 {
        match self.kind {
            ObstacleKind::None => 1.0,
            ObstacleKind::Disk { radius }
            | ObstacleKind::InvertedDisk { radius }
            | ObstacleKind::TwoDisks { radius, .. } => radius,
            ObstacleKind::Ellipse { a, b } => a.min(b),
            ObstacleKind::Kidney { base, amp, .. } => base - amp,
        }
    }

    /// Level function; negative inside the obstacle, positive in the domain.
    pub fn level(&self, x: &[f64]) -> f64 {
        match &self.kind {
            ObstacleKind::None => f64::INFINITY,
            ObstacleKind::Disk { radius } => norm(x) - radius,
            ObstacleKind::InvertedDisk { radius } => radius - norm(x),
            ObstacleKind::Ellipse { a, b } => {
                ((x[0] / a).powi(2) + (x[1] / b).powi(2)).sqrt() - 1.0
            }
            ObstacleKind::Kidney { base, amp, lobes } => {
                let phi = x[1].atan2(x[0]);
                norm(x) - (base + amp * (*lobes as f64 * phi).cos())
            }
            ObstacleKind::TwoDisks { separation, radius } => {
                let c = separation / 2.0;
                let b1 = dist(x, &[c, 0.0]) - radius;
                let b2 = dist(x, &[-c, 0.0]) - radius;
                b1.min(b2)
            }
        }
    }

    /// Gradient of the level function (of the active branch for unions).
    pub fn grad_level(&self, x: &[f64], out: &mut [f64]) {
        match &self.kind {
            ObstacleKind::None => out.fill(0.0),
            ObstacleKind::Disk { .. } => {
                let r = norm(x);
                for (o, xi) in out.iter_mut().zip(x) {
                    *o = if r > 0.0 { xi / r } else { 0.0 };
                }
            }
            ObstacleKind::InvertedDisk { .. } => {
                let r = norm(x);
                for (o, xi) in out.iter_mut().zip(x) {
                    *o = if r > 0.0 { -xi / r } else { 0.0 };
                }
            }
            ObstacleKind::Ellipse { a, b } => {
                let q = ((x[0] / a).powi(2) + (x[1] / b).powi(2)).sqrt();
                out[0] = x[0] / (a * a * q.max(1e-300));
                out[1] = x[1] / (b * b * q.max(1e-300));
            }
            ObstacleKind::Kidney { amp, lobes, .. } => {
                let r = norm(x);
                let phi = x[1].atan2(x[0]);
                let m = *lobes as f64;
                let dr_dphi = -amp * m * (m * phi).sin();
                let r2 = (r * r).max(1e-300);
                out[0] = x[0] / r - dr_dphi * (-x[1] / r2);
                out[1] = x[1] / r - dr_dphi * (x[0] / r2);
            }
            ObstacleKind::TwoDisks { separation, radius } => {
                let c = separation / 2.0;
                let center = if dist(x, &[c, 0.0]) - radius <= dist(x, &[-c, 0.0]) - radius {
                    [c, 0.0]
                } else {
                    [-c, 0.0]
                };
                let r = dist(x, &center).max(1e-300);
                out[0] = (x[0] - center[0]) / r;
                out[1] = (x[1] - center[1]) / r;
            }
        }
    }

    /// Parametrized boundary components with analytic curvature data.
    pub fn components(&self) -> Vec<CurveComponent> {
        match &self.kind {
            ObstacleKind::None => vec![],
            ObstacleKind::Disk { radius } => vec![CurveComponent {
                shape: CurveShape::Circle {
                    center: [0.0, 0.0],
                    radius: *radius,
                    domain_inside: false,
                    mirrored: false,
                },
            }],
            ObstacleKind::InvertedDisk { radius } => vec![CurveComponent {
                shape: CurveShape::Circle {
                    center: [0.0, 0.0],
                    radius: *radius,
                    domain_inside: true,
                    mirrored: false,
                },
            }],
            ObstacleKind::Ellipse { a, b } => vec![CurveComponent {
                shape: CurveShape::Ellipse { a: *a, b: *b },
            }],
            ObstacleKind::Kidney { base, amp, lobes } => vec![CurveComponent {
                shape: CurveShape::Polar {
                    base: *base,
                    amp: *amp,
                    lobes: *lobes,
                },
            }],
            ObstacleKind::TwoDisks { separation, radius } => {
                let c = separation / 2.0;
                [[c, 0.0], [-c, 0.0]]
                    .into_iter()
                    .map(|center| CurveComponent {
                        shape: CurveShape::Circle {
                            center,
                            radius: *radius,
                            domain_inside: false,
                            mirrored: center[0] > 0.0,
                        },
                    })
                    .collect()
            }
        }
    }
}

#[derive(Debug, Clone)]
pub enum CurveShape {
    Circle {
        center: [f64; 2],
        radius: f64,
        /// True when the domain is enclosed by the curve.
        domain_inside: bool,
        /// True when the parametrization is `center - R (cos, sin)`, placing
        /// `theta = 0` on the side facing the origin.  Symmetric orbits that
        /// bounce between two disks then meet both walls at a parameter where
        /// the trigonometric values are exact, so the reflected state carries
        /// no spurious transverse component.
        mirrored: bool,
    },
    Ellipse {
        a: f64,
        b: f64,
    },
    Polar {
        base: f64,
        amp: f64,
        lobes: u32,
    },
}

/// One boundary component as a closed plane curve `gamma(theta)`,
/// `theta in [0, 2 pi)`, oriented so the unit normal
/// `n = (gamma'_y, -gamma'_x)/|gamma'|` points into the domain.
#[derive(Debug, Clone)]
pub struct CurveComponent {
    pub shape: CurveShape,
}

impl CurveComponent {
    pub fn gamma(&self, th: f64) -> [f64; 2] {
        match &self.shape {
            CurveShape::Circle { center, radius, domain_inside, mirrored } => {
                let t = if *domain_inside { -th } else { th };
                let s = if *mirrored { -radius } else { *radius };
                [center[0] + s * t.cos(), center[1] + s * t.sin()]
            }
            CurveShape::Ellipse { a, b } => [a * th.cos(), b * th.sin()],
            CurveShape::Polar { base, amp, lobes } => {
                let r = base + amp * (*lobes as f64 * th).cos();
                [r * th.cos(), r * th.sin()]
            }
        }
    }

    pub fn gamma_d1(&self, th: f64) -> [f64; 2] {
        match &self.shape {
            CurveShape::Circle { radius, domain_inside, mirrored, .. } => {
                let (s, t) = if *domain_inside { (-1.0, -th) } else { (1.0, th) };
                let s = if *mirrored { -s } else { s };
                [-radius * s * t.sin(), radius * s * t.cos()]
            }
            CurveShape::Ellipse { a, b } => [-a * th.sin(), b * th.cos()],
            CurveShape::Polar { base, amp, lobes } => {
                let m = *lobes as f64;
                let r = base + amp * (m * th).cos();
                let dr = -amp * m * (m * th).sin();
                [
                    dr * th.cos() - r * th.sin(),
                    dr * th.sin() + r * th.cos(),
                ]
            }
        }
    }

    pub fn gamma_d2(&self, th: f64) -> [f64; 2] {
        match &self.shape {
            CurveShape::Circle { radius, domain_inside, mirrored, .. } => {
                let t = if *domain_inside { -th } else { th };
                let s = if *mirrored { -radius } else { *radius };
                [-s * t.cos(), -s * t.sin()]
            }
            CurveShape::Ellipse { a, b } => [-a * th.cos(), -b * th.sin()],
            CurveShape::Polar { base, amp, lobes } => {
                let m = *lobes as f64;
                let r = base + amp * (m * th).cos();
                let dr = -amp * m * (m * th).sin();
                let ddr = -amp * m * m * (m * th).cos();
                [
                    ddr * th.cos() - 2.0 * dr * th.sin() - r * th.cos(),
                    ddr * th.sin() + 2.0 * dr * th.cos() - r * th.sin(),
                ]
            }
        }
    }

    /// Parametrization speed `|gamma'(theta)|`.
    pub fn speed(&self, th: f64) -> f64 {
        norm(&self.gamma_d1(th))
    }

    /// Signed curvature `cross(gamma', gamma'') / |gamma'|^3`; positive where
    /// the obstacle is convex as seen from the domain.
    pub fn curvature(&self, th: f64) -> f64 {
        let d1 = self.gamma_d1(th);
        let d2 = self.gamma_d2(th);
        let cross = d1[0] * d2[1] - d1[1] * d2[0];
        cross / norm(&d1).powi(3)
    }

    /// Unit normal pointing into the domain.
    pub fn normal(&self, th: f64) -> [f64; 2] {
        let d1 = self.gamma_d1(th);
        let g = norm(&d1);
        [d1[1] / g, -d1[0] / g]
    }
}

/// Result of projecting a point onto the obstacle boundary.
#[derive(Debug, Clone)]
pub struct Projection {
    pub foot: Vec<f64>,
    /// Nonnegative distance `|x - foot|`.
    pub distance: f64,
    /// Distance signed by the level function (negative inside the obstacle).
    pub signed_distance: f64,
    /// Unit normal at the foot pointing into the domain.
    pub normal: Vec<f64>,
    /// Index of the boundary component carrying the foot.
    pub component: usize,
    /// Curve parameter of the foot on that component.
    pub theta: f64,
}

/// Closest-point projection onto the obstacle boundary.
///
/// Dense sampling seeds a Newton iteration on the stationarity condition
/// `(x - gamma(theta)) . gamma'(theta) = 0`; the closest component wins.
pub fn project_to_boundary(obstacle: &Obstacle, x: &[f64]) -> Result<Projection, SymbolsError> {
    let components = obstacle.components();
    if components.is_empty() {
        return Err(SymbolsError::NoBoundary);
    }
    let b = obstacle.level(x);
    if b < -0.45 * obstacle.feature_scale() {
        return Err(SymbolsError::InsideObstacle { at: x.to_vec() });
    }
    let mut best: Option<Projection> = None;
    for (ci, comp) in components.iter().enumerate() {
        let mut th_best = 0.0;
        let mut d_best = f64::INFINITY;
        let n_seed = 128;
        for i in 0..n_seed {
            let th = i as f64 * std::f64::consts::TAU / n_seed as f64;
            let d = dist(x, &comp.gamma(th));
            if d < d_best {
                d_best = d;
                th_best = th;
            }
        }
        let mut th = th_best;
        let mut converged = false;
        for _ in 0..60 {
            let g = comp.gamma(th);
            let d1 = comp.gamma_d1(th);
            let d2 = comp.gamma_d2(th);
            let rvec = [x[0] - g[0], x[1] - g[1]];
            let f = rvec[0] * d1[0] + rvec[1] * d1[1];
            let fp = -dot(&d1, &d1) + rvec[0] * d2[0] + rvec[1] * d2[1];
            if fp.abs() < 1e-300 {
                break;
            }
            let step = f / fp;
            th -= step;
            if step.abs() < 1e-14 {
                converged = true;
                break;
            }
        }
        if !converged {
            let g = comp.gamma(th);
            let d1 = comp.gamma_d1(th);
            let resid = (x[0] - g[0]) * d1[0] + (x[1] - g[1]) * d1[1];
            if resid.abs() > 1e-9 * (1.0 + dist(x, &g)) {
                return Err(SymbolsError::ProjectionDiverged { from: x.to_vec() });
            }
        }
        let foot = comp.gamma(th);
        let d = dist(x, &foot);
        if best.as_ref().map_or(true, |p| d < p.distance) {
            let n = comp.normal(th);
            best = Some(Projection {
                foot: foot.to_vec(),
                distance: d,
                signed_distance: if b < 0.0 { -d } else { d },
                normal: n.to_vec(),
                component: ci,
                theta: th.rem_euclid(std::f64::consts::TAU),
            });
        }
    }
    Ok(best.expect("at least one component"))
}

/// One named verification with its worst observed value.
#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub worst_value: f64,
    pub threshold: f64,
    pub witness: Option<Vec<f64>>,
    pub details: String,
}

/// Aggregated outcome of an assumption audit.
#[derive(Debug, Clone, Serialize)]
pub struct AssumptionReport {
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

impl AssumptionReport {
    fn from_checks(checks: Vec<CheckResult>) -> Self {
        AssumptionReport {
            passed: checks.iter().all(|c| c.passed),
            checks,
        }
    }
}

fn sample_shell(dim: usize, radius: f64, n: usize, rng: &mut impl rand::Rng) -> Vec<Vec<f64>> {
    use rand::prelude::*;
    let normal_ish = |rng: &mut dyn RngCore| {
        let u1: f64 = rng.gen_range(1e-12..1.0);
        let u2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        (-2.0 * u1.ln()).sqrt() * u2.cos()
    };
    (0..n)
        .map(|_| {
            let mut v: Vec<f64> = (0..dim).map(|_| normal_ish(rng)).collect();
            let nv = norm(&v).max(1e-12);
            for c in v.iter_mut() {
                *c *= radius / nv;
            }
            v
        })
        .collect()
}

/// Verifies uniform ellipticity `a(x) >= c Id` and the normalization
/// `V(x) >= 1` on randomized shells out to `16 * r0`.
pub fn check_ellipticity(field: &SymbolField, samples_per_shell: usize, seed: u64) -> AssumptionReport {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let shells = [0.1, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0].map(|f| f * field.r0);
    let mut min_eig = f64::INFINITY;
    let mut min_v = f64::INFINITY;
    let mut eig_witness = None;
    let mut v_witness = None;
    let mut finite = true;
    let mut finite_witness = None;
    for &r in &shells {
        for x in sample_shell(field.dim, r, samples_per_shell, &mut rng) {
            let mut a = vec![0.0; field.dim];
            field.metric.diag(&x, &mut a);
            let v = field.potential.eval(&x);
            if !all_finite(&a) || !v.is_finite() {
                finite = false;
                finite_witness.get_or_insert_with(|| x.clone());
                continue;
            }
            let e = a.iter().cloned().fold(f64::INFINITY, f64::min);
            if e < min_eig {
                min_eig = e;
                eig_witness = Some(x.clone());
            }
            if v < min_v {
                min_v = v;
                v_witness = Some(x.clone());
            }
        }
    }
    let checks = vec![
        CheckResult {
            name: "finite_coefficients".into(),
            passed: finite,
            worst_value: if finite { 0.0 } else { f64::NAN },
            threshold: 0.0,
            witness: finite_witness,
            details: "all sampled coefficient values are finite".into(),
        },
        CheckResult {
            name: "uniform_ellipticity".into(),
            passed: min_eig >= field.ellipticity * (1.0 - 1e-12),
            worst_value: min_eig,
            threshold: field.ellipticity,
            witness: eig_witness,
            details: format!(
                "smallest metric eigenvalue over sampled shells, required >= {}",
                field.ellipticity
            ),
        },
        CheckResult {
            name: "potential_lower_bound".into(),
            passed: min_v >= 1.0 - 1e-12,
            worst_value: min_v,
            threshold: 1.0,
            witness: v_witness,
            details: "V >= 1 normalization".into(),
        },
    ];
    AssumptionReport::from_checks(checks)
}

fn directional_fd(f: &dyn Fn(&[f64]) -> f64, x: &[f64], dir: usize, order: usize) -> f64 {
    let h = 1e-5 * (1.0 + norm(x));
    let mut xp = x.to_vec();
    let mut xm = x.to_vec();
    xp[dir] += h;
    xm[dir] -= h;
    match order {
        1 => (f(&xp) - f(&xm)) / (2.0 * h),
        2 => (f(&xp) - 2.0 * f(x) + f(&xm)) / (h * h),
        _ => panic!("only first and second differences are used"),
    }
}

/// Audits the symbol-class decay `|D^beta a| <= C <x>^{-|beta|}` and
/// `|D^beta V| <= C <x>^{2-|beta|}` for `|beta| <= max_order` on dyadic
/// shells `{2, 4, 8, 16} * r0`, fitting `C` on the innermost shell.
pub fn check_symbol_class(
    field: &SymbolField,
    max_order: usize,
    samples_per_shell: usize,
    seed: u64,
) -> AssumptionReport {
    use rand::SeedableRng;
    assert!(max_order <= 2, "symbol-class audit covers orders 0..=2");
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let shells: Vec<f64> = [2.0, 4.0, 8.0, 16.0].iter().map(|f| f * field.r0).collect();
    let d = field.dim;

    let metric = field.metric.clone();
    let potential = field.potential.clone();
    let a_entry = move |j: usize| {
        let metric = metric.clone();
        move |x: &[f64]| {
            let mut a = vec![0.0; x.len()];
            metric.diag(x, &mut a);
            a[j]
        }
    };
    let v_fn = move |x: &[f64]| potential.eval(x);

    // ratios[shell][order] = max over samples of the weighted derivative size
    let mut ratio_a = vec![vec![0.0f64; max_order + 1]; shells.len()];
    let mut ratio_v = vec![vec![0.0f64; max_order + 1]; shells.len()];
    let mut decay = vec![0.0f64; shells.len()];
    let mut witness_a: Option<Vec<f64>> = None;
    let mut witness_v: Option<Vec<f64>> = None;

    for (si, &r) in shells.iter().enumerate() {
        for x in sample_shell(d, r, samples_per_shell, &mut rng) {
            let w = bracket(&x);
            for j in 0..d {
                let aj = a_entry(j);
                let val = aj(&x).abs();
                if val > ratio_a[si][0] {
                    ratio_a[si][0] = val;
                }
                for i in 0..d {
                    if max_order >= 1 {
                        let d1 = directional_fd(&aj, &x, i, 1).abs() * w;
                        if d1 > ratio_a[si][1] {
                            ratio_a[si][1] = d1;
                            if si > 0 {
                                witness_a = Some(x.clone());
                            }
                        }
                        let g = directional_fd(&aj, &x, i, 1).abs();
                        let dv = norm(&x) * g;
                        if dv > decay[si] {
                            decay[si] = dv;
                        }
                    }
                    if max_order >= 2 {
                        let d2 = directional_fd(&aj, &x, i, 2).abs() * w * w;
                        if d2 > ratio_a[si][2] {
                            ratio_a[si][2] = d2;
                        }
                    }
                }
            }
            let v0 = v_fn(&x).abs() / (w * w);
            if v0 > ratio_v[si][0] {
                ratio_v[si][0] = v0;
                if si > 0 {
                    witness_v = Some(x.clone());
                }
            }
            for i in 0..d {
                if max_order >= 1 {
                    let d1 = directional_fd(&v_fn, &x, i, 1).abs() / w;
                    if d1 > ratio_v[si][1] {
                        ratio_v[si][1] = d1;
                        if si > 0 {
                            witness_v = Some(x.clone());
                        }
                    }
                }
                if max_order >= 2 {
                    let d2 = directional_fd(&v_fn, &x, i, 2).abs();
                    if d2 > ratio_v[si][2] {
                        ratio_v[si][2] = d2;
                    }
                }
            }
        }
    }

    // A ratio sequence over dyadic shells stays bounded exactly when its
    // consecutive growth factors settle near one; any power of |x| left in
    // the weighted derivative shows up as a persistent factor >= 2.
    let growth_cap = 1.5;
    let noise_floor = 1e-4;
    let score = |ratios: &[Vec<f64>], ord: usize| -> (f64, f64) {
        let seq: Vec<f64> = ratios.iter().map(|r| r[ord]).collect();
        let c_fit = seq.iter().cloned().fold(0.0, f64::max);
        let growth = seq
            .windows(2)
            .map(|w| w[1] / w[0].max(noise_floor))
            .fold(0.0, f64::max);
        (c_fit, growth)
    };
    let mut checks = Vec::new();
    for ord in 0..=max_order {
        let (c_fit, growth) = score(&ratio_a, ord);
        let passed = c_fit <= noise_floor || growth <= growth_cap;
        checks.push(CheckResult {
            name: format!("metric_symbol_order_{ord}"),
            passed,
            worst_value: growth,
            threshold: growth_cap,
            witness: if passed { None } else { witness_a.clone() },
            details: format!(
                "dyadic-shell growth of |D^{ord} a| <x>^{ord}, fitted C = {c_fit:.3e}"
            ),
        });
        let (c_fit_v, growth_v) = score(&ratio_v, ord);
        let passed_v = c_fit_v <= noise_floor || growth_v <= growth_cap;
        checks.push(CheckResult {
            name: format!("potential_symbol_order_{ord}"),
            passed: passed_v,
            worst_value: growth_v,
            threshold: growth_cap,
            witness: if passed_v { None } else { witness_v.clone() },
            details: format!(
                "dyadic-shell growth of |D^{ord} V| <x>^({ord}-2), fitted C = {c_fit_v:.3e}"
            ),
        });
    }
    if max_order >= 1 {
        let worst = decay.iter().cloned().fold(0.0, f64::max);
        let growth = decay
            .windows(2)
            .map(|w| w[1] / w[0].max(noise_floor))
            .fold(0.0, f64::max);
        let passed = worst <= noise_floor || growth <= growth_cap;
        checks.push(CheckResult {
            name: "metric_gradient_decay".into(),
            passed,
            worst_value: growth,
            threshold: growth_cap,
            witness: None,
            details: format!("dyadic-shell growth of |x| |grad a|, largest value {worst:.3e}"),
        });
    }
    AssumptionReport::from_checks(checks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn flat_field_hamiltonian_and_flow() {
        let f = SymbolField::flat(2);
        assert_eq!(f.p(&[3.0, 1.0], &[2.0, -1.0]), 5.0);
        let mut xd = [0.0; 2];
        let mut xid = [0.0; 2];
        f.flow_field(&[0.0, 0.0], &[1.0, 2.0], &mut xd, &mut xid);
        assert_eq!(xd, [2.0, 4.0]);
        assert_eq!(xid, [0.0, 0.0]);
    }

    #[test]
    fn conformal_bump_gradient_matches_fd() {
        let f = SymbolField {
            metric: Metric::ConformalBump { amp: 0.1, width: 1.0 },
            ..SymbolField::flat(2)
        };
        let x = [0.7, -0.3];
        let mut grad = vec![0.0; 4];
        f.metric.diag_grad(&x, &mut grad);
        for i in 0..2 {
            let h = 1e-6;
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[i] += h;
            xm[i] -= h;
            let mut ap = vec![0.0; 2];
            let mut am = vec![0.0; 2];
            f.metric.diag(&xp, &mut ap);
            f.metric.diag(&xm, &mut am);
            let fd = (ap[0] - am[0]) / (2.0 * h);
            assert_relative_eq!(grad[i * 2], fd, epsilon = 1e-8, max_relative = 1e-6);
        }
    }

    #[test]
    fn diag_const_ellipticity_passes_with_c_one() {
        let f = SymbolField {
            metric: Metric::DiagConst(vec![2.0, 1.0]),
            ..SymbolField::flat(2)
        };
        let report = check_ellipticity(&f, 50, 7);
        assert!(report.passed);
    }

    #[test]
    fn degenerate_metric_fails_ellipticity_with_witness() {
        let f = SymbolField {
            metric: Metric::ConformalBump { amp: -0.999, width: 2.0 },
            ..SymbolField::flat(2)
        };
        let report = check_ellipticity(&f, 50, 7);
        assert!(!report.passed);
        let failing = report
            .checks
            .iter()
            .find(|c| c.name == "uniform_ellipticity")
            .unwrap();
        assert!(!failing.passed);
        assert!(failing.witness.is_some());
        assert!(failing.worst_value < 1.0);
    }

    #[test]
    fn harmonic_potential_is_admissible_exponential_is_not() {
        let ok = SymbolField {
            potential: Potential::OnePlusSquare,
            ..SymbolField::flat(2)
        };
        assert!(check_symbol_class(&ok, 2, 40, 11).passed);
        let bad = SymbolField {
            potential: Potential::ExpNorm,
            ..SymbolField::flat(2)
        };
        let report = check_symbol_class(&bad, 2, 40, 11);
        assert!(!report.passed);
        assert!(report
            .checks
            .iter()
            .any(|c| c.name.starts_with("potential_symbol") && !c.passed));
    }

    #[test]
    fn disk_projection_is_radial_and_idempotent() {
        let obs = Obstacle::disk(1.0);
        let p = project_to_boundary(&obs, &[2.0, 0.0]).unwrap();
        assert_relative_eq!(p.foot[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(p.foot[1], 0.0, epsilon = 1e-10);
        assert_relative_eq!(p.distance, 1.0, epsilon = 1e-12);
        assert_relative_eq!(p.normal[0], 1.0, epsilon = 1e-12);
        let p2 = project_to_boundary(&obs, &p.foot).unwrap();
        assert!(dist(&p2.foot, &p.foot) < 1e-10);
    }

    #[test]
    fn ellipse_projection_matches_dense_sampling() {
        let obs = Obstacle::ellipse(2.0, 1.0);
        let x = [1.7, 1.3];
        let p = project_to_boundary(&obs, &x).unwrap();
        let comp = &obs.components()[0];
        let mut best = f64::INFINITY;
        for i in 0..200_000 {
            let th = i as f64 * std::f64::consts::TAU / 200_000.0;
            best = best.min(dist(&x, &comp.gamma(th)));
        }
        assert!((p.distance - best).abs() < 1e-8, "newton {} dense {}", p.distance, best);
    }

    #[test]
    fn deep_interior_point_is_rejected() {
        let obs = Obstacle::disk(1.0);
        assert!(matches!(
            project_to_boundary(&obs, &[0.01, 0.0]),
            Err(SymbolsError::InsideObstacle { .. })
        ));
    }

    #[test]
    fn kidney_has_concave_arc_when_amplitude_is_large() {
        let obs = Obstacle::kidney(1.0, 0.3, 2);
        let comp = &obs.components()[0];
        assert!(comp.curvature(0.0) > 0.0);
        assert!(comp.curvature(std::f64::consts::FRAC_PI_2) < 0.0);
    }

    #[test]
    fn curve_normals_point_into_domain() {
        for obs in [Obstacle::disk(1.0), Obstacle::ellipse(2.0, 1.0), Obstacle::kidney(1.0, 0.3, 2)] {
            let comp = &obs.components()[0];
            for i in 0..16 {
                let th = i as f64 * std::f64::consts::TAU / 16.0;
                let g = comp.gamma(th);
                let n = comp.normal(th);
                let probe = [g[0] + 1e-4 * n[0], g[1] + 1e-4 * n[1]];
                assert!(obs.level(&probe) > 0.0, "normal leaves the domain at theta = {th}");
            }
        }
        let inv = Obstacle::inverted_disk(1.0);
        let comp = &inv.components()[0];
        let g = comp.gamma(0.3);
        let n = comp.normal(0.3);
        let probe = [g[0] + 1e-4 * n[0], g[1] + 1e-4 * n[1]];
        assert!(inv.level(&probe) > 0.0);
    }

    #[test]
    fn two_disk_level_takes_nearest_component() {
        let obs = Obstacle::two_disks(4.0, 1.0);
        assert_relative_eq!(obs.level(&[0.0, 0.0]), 1.0, epsilon = 1e-12);
        assert!(obs.level(&[2.0, 0.0]) < 0.0);
        let p = project_to_boundary(&obs, &[0.5, 0.0]).unwrap();
        assert_relative_eq!(p.foot[0], 1.0, epsilon = 1e-9);
    }

    #[test]
    fn inverted_disk_has_negative_curvature() {
        let obs = Obstacle::inverted_disk(1.0);
        let comp = &obs.components()[0];
        assert!(comp.curvature(1.1) < 0.0);
    }
}
