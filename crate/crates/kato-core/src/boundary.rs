//! Boundary normal-form charts and glancing classification.
//!
//! Near a boundary component the principal symbol is brought to the form
//! `p = xi1^2 + r(x1, x', xi')`, where `x1` is the normal coordinate and
//! `(x', xi')` live on the boundary. Hyperbolic, glancing, and elliptic
//! regions are read off from the sign of `r0 + tau`, and the glancing set is
//! subdivided by the normal derivative of `r` and its iterated Hamilton
//! derivatives.

use crate::symbols::{CurveComponent, Metric, Obstacle, ObstacleKind, SymbolField};
use crate::util::dot;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BoundaryError {
    #[error("no normal-form chart is available for this metric and obstacle")]
    ChartUnsupported,
    #[error("point is outside every chart tube: nearest x1 = {x1}, tube = {tube}")]
    OutOfTube { x1: f64, tube: f64 },
    #[error("chart has no ambient embedding")]
    NoEmbedding,
    #[error("obstacle has no boundary")]
    NoBoundary,
}

/// Phase-space point in chart coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct ChartPoint {
    pub x1: f64,
    pub xp: f64,
    pub xi1: f64,
    pub xip: f64,
}

/// Normal-form chart: `p = xi1^2 + r(x1, x', xi')` on `0 <= x1 < tube`.
pub trait Chart {
    fn r(&self, x1: f64, xp: f64, xip: f64) -> f64;

    fn dr_dx1(&self, x1: f64, xp: f64, xip: f64) -> f64 {
        let h = 1e-6 * (1.0 + x1.abs());
        let d1 = (self.r(x1 + h, xp, xip) - self.r(x1 - h, xp, xip)) / (2.0 * h);
        let d2 = (self.r(x1 + 0.5 * h, xp, xip) - self.r(x1 - 0.5 * h, xp, xip)) / h;
        (4.0 * d2 - d1) / 3.0
    }

    fn r0(&self, xp: f64, xip: f64) -> f64 {
        self.r(0.0, xp, xip)
    }

    /// Gradient of `r0` in `(x', xi')`.
    fn r0_grad(&self, xp: f64, xip: f64) -> (f64, f64) {
        let hx = 1e-5 * (1.0 + xp.abs());
        let hxi = 1e-5 * (1.0 + xip.abs());
        let dp = fd_richardson(&|t| self.r0(t, xip), xp, hx);
        let dip = fd_richardson(&|t| self.r0(xp, t), xip, hxi);
        (dp, dip)
    }

    /// Width of the normal collar on which the chart is valid.
    fn tube(&self) -> f64;

    /// Ambient phase point to chart coordinates; `None` when the chart has
    /// no embedding.
    fn to_chart(&self, x: &[f64], xi: &[f64]) -> Option<ChartPoint>;

    /// Chart coordinates back to the ambient phase space.
    fn from_chart(&self, p: &ChartPoint) -> Option<(Vec<f64>, Vec<f64>)>;
}

fn fd_richardson(f: &dyn Fn(f64) -> f64, t: f64, h: f64) -> f64 {
    let d1 = (f(t + h) - f(t - h)) / (2.0 * h);
    let d2 = (f(t + 0.5 * h) - f(t - 0.5 * h)) / h;
    (4.0 * d2 - d1) / 3.0
}

/// Chart along a parametrized boundary curve in a flat ambient metric.
///
/// With `X(x1, theta) = gamma(theta) + x1 n(theta)` the flat symbol becomes
/// `xi1^2 + xip^2 / (g (1 + kappa x1))^2`, where `g` is the parametrization
/// speed and `kappa` the signed curvature.
pub struct CurveChart {
    comp: CurveComponent,
    tube: f64,
}

impl CurveChart {
    pub fn new(comp: CurveComponent) -> Self {
        let mut max_kappa = 0.0f64;
        for i in 0..512 {
            let th = i as f64 * std::f64::consts::TAU / 512.0;
            max_kappa = max_kappa.max(comp.curvature(th).abs());
        }
        let tube = 0.5 / max_kappa.max(1e-12);
        CurveChart { comp, tube }
    }

    fn width(&self, x1: f64, th: f64) -> f64 {
        let g = self.comp.speed(th);
        g * (1.0 + self.comp.curvature(th) * x1)
    }

    /// Nearest-parameter projection of an ambient point onto the curve.
    pub fn project(&self, x: &[f64]) -> (f64, f64) {
        let mut th_best = 0.0;
        let mut d_best = f64::INFINITY;
        for i in 0..256 {
            let th = i as f64 * std::f64::consts::TAU / 256.0;
            let g = self.comp.gamma(th);
            let d = (x[0] - g[0]).powi(2) + (x[1] - g[1]).powi(2);
            if d < d_best {
                d_best = d;
                th_best = th;
            }
        }
        let mut th = th_best;
        for _ in 0..60 {
            let g = self.comp.gamma(th);
            let d1 = self.comp.gamma_d1(th);
            let d2 = self.comp.gamma_d2(th);
            let rv = [x[0] - g[0], x[1] - g[1]];
            let f = rv[0] * d1[0] + rv[1] * d1[1];
            let fp = -dot(&d1, &d1) + rv[0] * d2[0] + rv[1] * d2[1];
            if fp.abs() < 1e-300 {
                break;
            }
            let step = f / fp;
            th -= step;
            if step.abs() < 1e-14 {
                break;
            }
        }
        let foot = self.comp.gamma(th);
        let n = self.comp.normal(th);
        let x1 = (x[0] - foot[0]) * n[0] + (x[1] - foot[1]) * n[1];
        (x1, th.rem_euclid(std::f64::consts::TAU))
    }
}

impl Chart for CurveChart {
    fn r(&self, x1: f64, xp: f64, xip: f64) -> f64 {
        let w = self.width(x1, xp);
        xip * xip / (w * w)
    }

    fn dr_dx1(&self, x1: f64, xp: f64, xip: f64) -> f64 {
        let g = self.comp.speed(xp);
        let kappa = self.comp.curvature(xp);
        let w = self.width(x1, xp);
        -2.0 * xip * xip * g * kappa / (w * w * w)
    }

    fn r0_grad(&self, xp: f64, xip: f64) -> (f64, f64) {
        let g = self.comp.speed(xp);
        let d1 = self.comp.gamma_d1(xp);
        let d2 = self.comp.gamma_d2(xp);
        let gp = dot(&d1, &d2) / g;
        (-2.0 * xip * xip * gp / g.powi(3), 2.0 * xip / (g * g))
    }

    fn tube(&self) -> f64 {
        self.tube
    }

    fn to_chart(&self, x: &[f64], xi: &[f64]) -> Option<ChartPoint> {
        let (x1, th) = self.project(x);
        let n = self.comp.normal(th);
        let d1 = self.comp.gamma_d1(th);
        let g = self.comp.speed(th);
        let that = [d1[0] / g, d1[1] / g];
        let w = self.width(x1, th);
        Some(ChartPoint {
            x1,
            xp: th,
            xi1: n[0] * xi[0] + n[1] * xi[1],
            xip: w * (that[0] * xi[0] + that[1] * xi[1]),
        })
    }

    fn from_chart(&self, p: &ChartPoint) -> Option<(Vec<f64>, Vec<f64>)> {
        let foot = self.comp.gamma(p.xp);
        let n = self.comp.normal(p.xp);
        let d1 = self.comp.gamma_d1(p.xp);
        let g = self.comp.speed(p.xp);
        let that = [d1[0] / g, d1[1] / g];
        let w = self.width(p.x1, p.xp);
        let x = vec![foot[0] + p.x1 * n[0], foot[1] + p.x1 * n[1]];
        let xi = vec![
            n[0] * p.xi1 + that[0] * p.xip / w,
            n[1] * p.xi1 + that[1] * p.xip / w,
        ];
        Some((x, xi))
    }
}

/// Chart around a centered disk in a radial isotropic metric `c(|x|) Id`.
///
/// The normal coordinate is the metric arclength `x1 = int c^{-1/2} dr`
/// along radial lines, which brings the symbol to
/// `xi1^2 + c(rho) xip^2 / rho^2` with `rho` the radius at depth `x1`.
pub struct DiskChart {
    radius: f64,
    metric: Metric,
    r_grid: Vec<f64>,
    x1_grid: Vec<f64>,
}

impl DiskChart {
    pub fn new(radius: f64, metric: Metric, extent: f64) -> Result<Self, BoundaryError> {
        if !Self::is_radial_isotropic(&metric, radius) {
            return Err(BoundaryError::ChartUnsupported);
        }
        let n = 4096;
        let r_max = radius + extent;
        let mut r_grid = Vec::with_capacity(n + 1);
        let mut x1_grid = Vec::with_capacity(n + 1);
        let h = (r_max - radius) / n as f64;
        let chart = DiskChart {
            radius,
            metric,
            r_grid: vec![],
            x1_grid: vec![],
        };
        let mut acc = 0.0;
        r_grid.push(radius);
        x1_grid.push(0.0);
        for i in 0..n {
            let a = radius + i as f64 * h;
            acc += gauss5(|r| chart.c(r).powf(-0.5), a, a + h);
            r_grid.push(a + h);
            x1_grid.push(acc);
        }
        Ok(DiskChart { r_grid, x1_grid, ..chart })
    }

    fn is_radial_isotropic(metric: &Metric, radius: f64) -> bool {
        let mut a = [0.0; 2];
        for i in 0..40 {
            let r = radius * (0.2 + 0.2 * i as f64);
            let th = 0.37 + i as f64;
            let x = [r * th.cos(), r * th.sin()];
            metric.diag(&x, &mut a);
            if (a[0] - a[1]).abs() > 1e-12 * (1.0 + a[0].abs()) {
                return false;
            }
            let x_axis = [r, 0.0];
            let mut a2 = [0.0; 2];
            metric.diag(&x_axis, &mut a2);
            if (a[0] - a2[0]).abs() > 1e-12 * (1.0 + a[0].abs()) {
                return false;
            }
        }
        true
    }

    fn c(&self, r: f64) -> f64 {
        let mut a = [0.0; 2];
        self.metric.diag(&[r, 0.0], &mut a);
        a[0]
    }

    fn c_prime(&self, r: f64) -> f64 {
        let mut g = [0.0; 4];
        self.metric.diag_grad(&[r, 0.0], &mut g);
        g[0]
    }

    /// Radius at normal depth `x1`, from the table plus a Newton correction.
    pub fn rho(&self, x1: f64) -> f64 {
        let last = *self.x1_grid.last().unwrap();
        let x1c = x1.clamp(0.0, last);
        let idx = self
            .x1_grid
            .partition_point(|&v| v < x1c)
            .clamp(1, self.x1_grid.len() - 1);
        let (x1a, ra) = (self.x1_grid[idx - 1], self.r_grid[idx - 1]);
        let mut r = ra + (x1c - x1a) * self.c(ra).sqrt();
        for _ in 0..8 {
            let f = gauss5(|s| self.c(s).powf(-0.5), ra, r) - (x1c - x1a);
            let df = self.c(r).powf(-0.5);
            let step = f / df;
            r -= step;
            if step.abs() < 1e-14 * (1.0 + r.abs()) {
                break;
            }
        }
        r
    }

    /// Normal depth of radius `r`.
    pub fn depth(&self, r: f64) -> f64 {
        let idx = self
            .r_grid
            .partition_point(|&v| v < r)
            .clamp(1, self.r_grid.len() - 1);
        let ra = self.r_grid[idx - 1];
        self.x1_grid[idx - 1] + gauss5(|s| self.c(s).powf(-0.5), ra, r)
    }
}

fn gauss5(f: impl Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    const X: [f64; 5] = [
        -0.906179845938664,
        -0.5384693101056831,
        0.0,
        0.5384693101056831,
        0.906179845938664,
    ];
    const W: [f64; 5] = [
        0.23692688505618908,
        0.47862867049936647,
        0.5688888888888889,
        0.47862867049936647,
        0.23692688505618908,
    ];
    let c = 0.5 * (a + b);
    let hw = 0.5 * (b - a);
    hw * X.iter().zip(W).map(|(&x, w)| w * f(c + hw * x)).sum::<f64>()
}

impl Chart for DiskChart {
    fn r(&self, x1: f64, _xp: f64, xip: f64) -> f64 {
        let rho = self.rho(x1);
        self.c(rho) * xip * xip / (rho * rho)
    }

    fn dr_dx1(&self, x1: f64, _xp: f64, xip: f64) -> f64 {
        let rho = self.rho(x1);
        let c = self.c(rho);
        let cp = self.c_prime(rho);
        c.sqrt() * (cp * rho - 2.0 * c) * xip * xip / rho.powi(3)
    }

    fn r0_grad(&self, _xp: f64, xip: f64) -> (f64, f64) {
        let c = self.c(self.radius);
        (0.0, 2.0 * c * xip / (self.radius * self.radius))
    }

    fn tube(&self) -> f64 {
        0.98 * *self.x1_grid.last().unwrap()
    }

    fn to_chart(&self, x: &[f64], xi: &[f64]) -> Option<ChartPoint> {
        let r = (x[0] * x[0] + x[1] * x[1]).sqrt();
        let th = x[1].atan2(x[0]).rem_euclid(std::f64::consts::TAU);
        let er = [x[0] / r, x[1] / r];
        Some(ChartPoint {
            x1: if r >= self.radius {
                self.depth(r)
            } else {
                -self.depth(2.0 * self.radius - r)
            },
            xp: th,
            xi1: self.c(r).sqrt() * (er[0] * xi[0] + er[1] * xi[1]),
            xip: x[0] * xi[1] - x[1] * xi[0],
        })
    }

    fn from_chart(&self, p: &ChartPoint) -> Option<(Vec<f64>, Vec<f64>)> {
        let rho = self.rho(p.x1);
        let (s, c) = p.xp.sin_cos();
        let er = [c, s];
        let et = [-s, c];
        let cv = self.c(rho);
        let x = vec![rho * c, rho * s];
        let xi = vec![
            er[0] * p.xi1 / cv.sqrt() + et[0] * p.xip / rho,
            er[1] * p.xi1 / cv.sqrt() + et[1] * p.xip / rho,
        ];
        Some((x, xi))
    }
}

/// Chart defined directly by a closure for `r`, for classification tests of
/// model normal forms; it has no ambient embedding.
pub struct SyntheticChart {
    pub r_fn: Box<dyn Fn(f64, f64, f64) -> f64 + Send + Sync>,
    pub tube: f64,
}

impl SyntheticChart {
    pub fn new(r_fn: impl Fn(f64, f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        SyntheticChart {
            r_fn: Box::new(r_fn),
            tube: 1.0,
        }
    }
}

impl Chart for SyntheticChart {
    fn r(&self, x1: f64, xp: f64, xip: f64) -> f64 {
        (self.r_fn)(x1, xp, xip)
    }

    fn tube(&self) -> f64 {
        self.tube
    }

    fn to_chart(&self, _x: &[f64], _xi: &[f64]) -> Option<ChartPoint> {
        None
    }

    fn from_chart(&self, _p: &ChartPoint) -> Option<(Vec<f64>, Vec<f64>)> {
        None
    }
}

/// Classification of a boundary phase point on the characteristic set.
#[derive(Debug, Clone, PartialEq)]
pub enum BoundaryClass {
    /// `r0 + tau > 0`: no real normal momentum.
    Elliptic,
    /// Transversal crossing; `xi1_plus` is the outgoing normal momentum.
    Hyperbolic { xi1_plus: f64 },
    /// Glancing with the ray curving away from the boundary.
    Diffractive,
    /// Glancing with the ray curving toward the boundary.
    Gliding,
    /// Glancing of finite order `k >= 3`: the first nonvanishing iterated
    /// Hamilton derivative of the normal derivative has order `k - 2`.
    HigherOrder { k: usize },
    /// No derivative up to the probe depth separated from zero.
    Undetermined,
}

#[derive(Debug, Clone)]
pub struct ClassifyOpts {
    /// Relative half-width of the glancing band in `r0 + tau`.
    pub glancing_band: f64,
    /// Relative half-width of the zero band for `dr/dx1`.
    pub curvature_band: f64,
    /// Highest glancing order probed.
    pub k_max: usize,
}

impl Default for ClassifyOpts {
    fn default() -> Self {
        ClassifyOpts {
            glancing_band: 1e-6,
            curvature_band: 1e-6,
            k_max: 5,
        }
    }
}

/// Normal momenta `(+xi1, -xi1)` solving `xi1^2 + r0 + tau = 0`, when real.
pub fn hyperbolic_roots(chart: &dyn Chart, xp: f64, xip: f64, tau: f64) -> Option<(f64, f64)> {
    let e = -(chart.r0(xp, xip) + tau);
    if e > 0.0 {
        let root = e.sqrt();
        Some((root, -root))
    } else {
        None
    }
}

/// One Hamilton derivative `H_{r0} f` on the boundary phase space.
pub fn hamilton_derivative(
    chart: &dyn Chart,
    f: &dyn Fn(f64, f64) -> f64,
    xp: f64,
    xip: f64,
    step: f64,
) -> f64 {
    let (drp, drip) = chart.r0_grad(xp, xip);
    let hx = step * (1.0 + xp.abs());
    let hxi = step * (1.0 + xip.abs());
    let dfp = fd_richardson(&|t| f(t, xip), xp, hx);
    let dfip = fd_richardson(&|t| f(xp, t), xip, hxi);
    drip * dfp - drp * dfip
}

/// Iterated Hamilton derivative `H_{r0}^j f`, with finite-difference steps
/// widened at each nesting level to hold off roundoff.
pub fn iterated_hamilton_derivative(
    chart: &dyn Chart,
    f: &dyn Fn(f64, f64) -> f64,
    j: usize,
    xp: f64,
    xip: f64,
) -> f64 {
    if j == 0 {
        return f(xp, xip);
    }
    let step = 1e-3 * (1 << (j - 1)) as f64;
    hamilton_derivative(
        chart,
        &|a, b| iterated_hamilton_derivative(chart, f, j - 1, a, b),
        xp,
        xip,
        step,
    )
}

/// Classifies the boundary point `(x', xi')` at time covariable `tau`.
pub fn classify(
    chart: &dyn Chart,
    xp: f64,
    xip: f64,
    tau: f64,
    opts: &ClassifyOpts,
) -> BoundaryClass {
    let r0 = chart.r0(xp, xip);
    let e = r0 + tau;
    let band = opts.glancing_band * (xip * xip + tau.abs()) + 1e-30;
    if e > band {
        return BoundaryClass::Elliptic;
    }
    if e < -band {
        return BoundaryClass::Hyperbolic { xi1_plus: (-e).sqrt() };
    }
    let drdx1 = chart.dr_dx1(0.0, xp, xip);
    let band2 = opts.curvature_band * xip * xip + 1e-30;
    if drdx1 < -band2 {
        return BoundaryClass::Diffractive;
    }
    if drdx1 > band2 {
        return BoundaryClass::Gliding;
    }
    let f0 = |a: f64, b: f64| chart.dr_dx1(0.0, a, b);
    for j in 1..=opts.k_max.saturating_sub(2) {
        let val = iterated_hamilton_derivative(chart, &f0, j, xp, xip);
        let threshold = 1e-5 * (1.0 + xip.abs()).powi(j as i32 + 2);
        if val.abs() > threshold {
            return BoundaryClass::HigherOrder { k: j + 2 };
        }
    }
    BoundaryClass::Undetermined
}

/// Chart collection covering every boundary component of an obstacle.
pub struct Atlas {
    pub charts: Vec<Box<dyn Chart + Send + Sync>>,
}

impl Atlas {
    pub fn new(field: &SymbolField, obstacle: &Obstacle) -> Result<Self, BoundaryError> {
        if !obstacle.has_boundary() {
            return Err(BoundaryError::NoBoundary);
        }
        let flat = matches!(field.metric, Metric::Flat);
        if flat {
            let charts = obstacle
                .components()
                .into_iter()
                .map(|c| Box::new(CurveChart::new(c)) as Box<dyn Chart + Send + Sync>)
                .collect();
            return Ok(Atlas { charts });
        }
        if let ObstacleKind::Disk { radius } = obstacle.kind {
            let chart = DiskChart::new(radius, field.metric.clone(), 3.0 * radius)?;
            return Ok(Atlas {
                charts: vec![Box::new(chart)],
            });
        }
        Err(BoundaryError::ChartUnsupported)
    }

    /// Chart index and coordinates of the nearest boundary component.
    pub fn locate(&self, x: &[f64], xi: &[f64]) -> Result<(usize, ChartPoint), BoundaryError> {
        let mut best: Option<(usize, ChartPoint)> = None;
        for (i, chart) in self.charts.iter().enumerate() {
            if let Some(cp) = chart.to_chart(x, xi) {
                if best.as_ref().map_or(true, |(_, b)| cp.x1.abs() < b.x1.abs()) {
                    best = Some((i, cp));
                }
            }
        }
        let (i, cp) = best.ok_or(BoundaryError::NoEmbedding)?;
        let tube = self.charts[i].tube();
        if cp.x1.abs() > tube {
            return Err(BoundaryError::OutOfTube { x1: cp.x1, tube });
        }
        Ok((i, cp))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn unit_disk_chart() -> CurveChart {
        CurveChart::new(Obstacle::disk(1.0).components().remove(0))
    }

    #[test]
    fn unit_disk_chart_matches_polar_normal_form() {
        let chart = unit_disk_chart();
        assert_relative_eq!(chart.r(0.3, 1.0, 0.7), 0.49 / 1.69, epsilon = 1e-12);
        assert_relative_eq!(chart.dr_dx1(0.0, 0.5, 1.0), -2.0, epsilon = 1e-12);
        let (dp, dip) = chart.r0_grad(0.5, 0.7);
        assert_relative_eq!(dp, 0.0, epsilon = 1e-12);
        assert_relative_eq!(dip, 1.4, epsilon = 1e-12);
    }

    #[test]
    fn curve_chart_roundtrip_preserves_symbol() {
        let field = SymbolField::flat(2);
        for obs in [Obstacle::disk(1.0), Obstacle::ellipse(2.0, 1.0), Obstacle::kidney(1.0, 0.3, 2)] {
            let chart = CurveChart::new(obs.components().remove(0));
            let x = [1.9, 0.7];
            let xi = [0.4, -1.1];
            let cp = chart.to_chart(&x, &xi).unwrap();
            let p_chart = cp.xi1 * cp.xi1 + chart.r(cp.x1, cp.xp, cp.xip);
            assert_relative_eq!(p_chart, field.p(&x, &xi), epsilon = 1e-10);
            let (x2, xi2) = chart.from_chart(&cp).unwrap();
            for i in 0..2 {
                assert_relative_eq!(x2[i], x[i], epsilon = 1e-9);
                assert_relative_eq!(xi2[i], xi[i], epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn disk_chart_reduces_to_curve_chart_for_flat_metric() {
        let disk = DiskChart::new(1.0, Metric::Flat, 3.0).unwrap();
        let curve = unit_disk_chart();
        for &(x1, xip) in &[(0.0, 1.0), (0.4, 0.7), (1.3, -0.5)] {
            assert_relative_eq!(disk.r(x1, 0.3, xip), curve.r(x1, 0.3, xip), epsilon = 1e-9);
            assert_relative_eq!(
                disk.dr_dx1(x1, 0.3, xip),
                curve.dr_dx1(x1, 0.3, xip),
                epsilon = 1e-8
            );
        }
    }

    #[test]
    fn conformal_disk_chart_roundtrips_and_preserves_symbol() {
        let metric = Metric::ConformalBump { amp: 0.4, width: 2.0 };
        let field = SymbolField {
            metric: metric.clone(),
            ..SymbolField::flat(2)
        };
        let chart = DiskChart::new(1.0, metric, 3.0).unwrap();
        let x = [1.3, 0.9];
        let xi = [-0.6, 1.2];
        let cp = chart.to_chart(&x, &xi).unwrap();
        let p_chart = cp.xi1 * cp.xi1 + chart.r(cp.x1, cp.xp, cp.xip);
        assert_relative_eq!(p_chart, field.p(&x, &xi), epsilon = 1e-9);
        let (x2, xi2) = chart.from_chart(&cp).unwrap();
        for i in 0..2 {
            assert_relative_eq!(x2[i], x[i], epsilon = 1e-8);
            assert_relative_eq!(xi2[i], xi[i], epsilon = 1e-8);
        }
    }

    #[test]
    fn disk_chart_depth_is_metric_arclength() {
        let metric = Metric::ConformalBump { amp: 0.4, width: 2.0 };
        let chart = DiskChart::new(1.0, metric.clone(), 3.0).unwrap();
        let mut acc = 0.0;
        let n = 200_000;
        let h = 1.0 / n as f64;
        let mut a = [0.0; 2];
        for i in 0..n {
            let r = 1.0 + (i as f64 + 0.5) * h;
            metric.diag(&[r, 0.0], &mut a);
            acc += h * a[0].powf(-0.5);
        }
        assert_relative_eq!(chart.depth(2.0), acc, epsilon = 1e-9);
        assert_relative_eq!(chart.rho(chart.depth(2.0)), 2.0, epsilon = 1e-10);
    }

    #[test]
    fn classify_covers_all_five_clean_classes() {
        let chart = unit_disk_chart();
        let opts = ClassifyOpts::default();
        // Energy 1 ray hitting transversally: xi1^2 = 0.51.
        let hyp = classify(&chart, 0.0, 0.7, -1.0, &opts);
        match hyp {
            BoundaryClass::Hyperbolic { xi1_plus } => {
                assert_relative_eq!(xi1_plus, 0.51f64.sqrt(), epsilon = 1e-12)
            }
            other => panic!("expected hyperbolic, got {other:?}"),
        }
        assert_eq!(classify(&chart, 0.0, 0.7, -0.2, &opts), BoundaryClass::Elliptic);
        assert_eq!(classify(&chart, 0.0, 1.0, -1.0, &opts), BoundaryClass::Diffractive);

        let wall = CurveChart::new(Obstacle::inverted_disk(1.0).components().remove(0));
        assert_eq!(classify(&wall, 0.0, 1.0, -1.0, &opts), BoundaryClass::Gliding);

        let synth = SyntheticChart::new(|x1, xp, xip| xip * xip * (1.0 + x1 * xp));
        assert_eq!(
            classify(&synth, 0.0, 1.0, -1.0, &opts),
            BoundaryClass::HigherOrder { k: 3 }
        );
    }

    #[test]
    fn kidney_inflection_is_third_order_glancing() {
        let obs = Obstacle::kidney(1.0, 0.3, 2);
        let comp = obs.components().remove(0);
        let mut lo = 0.0f64;
        let mut hi = std::f64::consts::FRAC_PI_2;
        assert!(comp.curvature(lo) > 0.0 && comp.curvature(hi) < 0.0);
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if comp.curvature(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let th_star = 0.5 * (lo + hi);
        let chart = CurveChart::new(comp);
        let tau = -chart.r0(th_star, 1.0);
        assert_eq!(
            classify(&chart, th_star, 1.0, tau, &ClassifyOpts::default()),
            BoundaryClass::HigherOrder { k: 3 }
        );
    }

    #[test]
    fn hyperbolic_roots_are_symmetric() {
        let chart = unit_disk_chart();
        let (plus, minus) = hyperbolic_roots(&chart, 0.0, 0.5, -1.0).unwrap();
        assert_relative_eq!(plus, -minus, epsilon = 1e-15);
        assert_relative_eq!(plus * plus + chart.r0(0.0, 0.5) - 1.0, 0.0, epsilon = 1e-12);
        assert!(hyperbolic_roots(&chart, 0.0, 1.2, -1.0).is_none());
    }

    #[test]
    fn iterated_hamilton_derivative_matches_hand_computation() {
        // r0 = xip^2, f = xp xip^2: H f = 2 xip d_xp f = 2 xip^3.
        let synth = SyntheticChart::new(|x1, xp, xip| xip * xip * (1.0 + x1 * xp));
        let f = |xp: f64, xip: f64| xp * xip * xip;
        let h1 = iterated_hamilton_derivative(&synth, &f, 1, 0.0, 1.0);
        assert_relative_eq!(h1, 2.0, epsilon = 1e-7);
        let h2 = iterated_hamilton_derivative(&synth, &f, 2, 0.0, 1.0);
        assert!(h2.abs() < 1e-4, "H^2 f = {h2}");
    }

    #[test]
    fn atlas_locates_nearest_component() {
        let field = SymbolField::flat(2);
        let obs = Obstacle::two_disks(4.0, 1.0);
        let atlas = Atlas::new(&field, &obs).unwrap();
        assert_eq!(atlas.charts.len(), 2);
        let (idx, cp) = atlas.locate(&[0.6, 0.0], &[1.0, 0.0]).unwrap();
        assert_eq!(idx, 0);
        assert_relative_eq!(cp.x1, 0.4, epsilon = 1e-9);
        let err = atlas.locate(&[20.0, 0.0], &[1.0, 0.0]);
        assert!(matches!(err, Err(BoundaryError::OutOfTube { .. })));
    }

    #[test]
    fn anisotropic_metric_has_no_chart() {
        let field = SymbolField {
            metric: Metric::DiagConst(vec![2.0, 1.0]),
            ..SymbolField::flat(2)
        };
        assert!(matches!(
            Atlas::new(&field, &Obstacle::disk(1.0)),
            Err(BoundaryError::ChartUnsupported)
        ));
    }
}
