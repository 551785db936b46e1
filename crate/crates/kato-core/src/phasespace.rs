//! Semiclassical quantization and Husimi diagnostics on the discrete grids.
//!
//! The spatial factor of the anisotropic quantization acts through the grid
//! Fourier transform in the Kohn-Nirenberg ordering: the state is extended
//! by zero to the bounding rectangle, transformed, multiplied by the symbol
//! sampled at `(x, h eta)`, and transformed back. The positive surrogate for
//! the phase-space density is the Husimi transform, the squared overlap with
//! coherent states of width `sqrt(h)`, computed by windowed patch FFTs so
//! that every momentum row of the measure comes from a single transform.
//!
//! The time axis joins through a second, windowed Fourier transform of the
//! complex Husimi amplitudes along a snapshot trajectory. Frequencies are
//! converted with the anisotropic scaling `tau = -h^2 omega`, where `omega`
//! is the analysis frequency of the kernel `exp(-i omega t)`; a spectral
//! mode `exp(i lambda t) v` then lands at `tau = -h^2 lambda`, which places
//! the evolution's mass on the characteristic set `tau + p(x, xi) = 0`.
//!
//! The centroid tracker compares first moments of the Husimi measure with
//! the generalized billiard flow under the dispersive dictionary `s = t/h`.
//! Gaussian smoothing preserves first moments, so the Husimi centroid equals
//! the plain position and momentum expectations of the state, and the
//! tracker evaluates those directly. Under the group `exp(itP)` a carrier
//! at `+xi0/h` travels with velocity `-2 xi0/h`, so the ray matching a
//! packet launched at `(x0, xi0)` is the one through `(x0, -xi0)`; the
//! tracker reads the ray's momentum through the same sign flip so that both
//! columns of the comparison describe one physical packet.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};
use thiserror::Error;

use crate::discrete::{DiscreteOperator, GridShape};
use crate::evolve::{chebyshev_exp_step, EvolveError, Trajectory, WaveState};
use crate::genflow::GeneralizedTrajectory;
use crate::symbols::SymbolField;

/// Truncation radius of the coherent-state window in units of `sqrt(h)`.
/// The clipped amplitude is `exp(-WINDOW_SCALE^2 / 2)`, far below every
/// tolerance used here.
const WINDOW_SCALE: f64 = 7.0;

/// Hard cap on the number of stored phase-space cells.
const MEASURE_CAP: usize = 50_000_000;

#[derive(Debug, Error)]
pub enum PhaseSpaceError {
    #[error("state is identically zero")]
    ZeroData,
    #[error("state carries {got} values but the grid has {expected} nodes")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("phase grid step {step:.4e} on the {axis} axis exceeds sqrt(h)/2 = {required:.4e}")]
    GridTooCoarse {
        axis: &'static str,
        step: f64,
        required: f64,
    },
    #[error("symbol varies across the Nyquist seam at |xi| = {reach:.3}, alias-safe band is {limit:.3}")]
    AliasRisk { reach: f64, limit: f64 },
    #[error("phase-space grid would hold {entries} cells, cap is {cap}")]
    MeasureTooLarge { entries: usize, cap: usize },
    #[error("trajectory snapshots are not uniformly spaced")]
    NonUniformSnapshots,
    #[error("need at least {required} snapshots, got {got}")]
    TooFewSnapshots { got: usize, required: usize },
    #[error("bad tracking window: dt = {dt:.3e}, horizon = {t_final:.3e}")]
    BadWindow { dt: f64, t_final: f64 },
    #[error(transparent)]
    Evolve(#[from] EvolveError),
}

/// View of the operator grid as a full rectangle of `nx * ny` cells with
/// excluded nodes (obstacle interior) held at zero.
struct RectEmbed {
    nx: usize,
    ny: usize,
    dim: usize,
    origin: [f64; 2],
    dx: f64,
}

impl RectEmbed {
    fn of(op: &DiscreteOperator) -> RectEmbed {
        match &op.shape {
            GridShape::Interval { n } => RectEmbed {
                nx: *n,
                ny: 1,
                dim: 1,
                origin: [op.dx, 0.0],
                dx: op.dx,
            },
            GridShape::Box2d {
                nx, ny, origin, ..
            } => RectEmbed {
                nx: *nx,
                ny: *ny,
                dim: 2,
                origin: *origin,
                dx: op.dx,
            },
        }
    }

    fn len(&self) -> usize {
        self.nx * self.ny
    }

    fn scatter(&self, op: &DiscreteOperator, u: &[Complex64]) -> Vec<Complex64> {
        let mut rect = vec![Complex64::new(0.0, 0.0); self.len()];
        for iy in 0..self.ny {
            for ix in 0..self.nx {
                if let Some(idx) = op.shape.node_index(ix, iy) {
                    rect[iy * self.nx + ix] = u[idx];
                }
            }
        }
        rect
    }
}

fn signed_bin(k: usize, n: usize) -> i64 {
    if k <= n / 2 {
        k as i64
    } else {
        k as i64 - n as i64
    }
}

/// Angular frequency of DFT bin `k` on `n` samples spaced `dx`.
fn bin_freq(k: usize, n: usize, dx: f64) -> f64 {
    2.0 * PI * signed_bin(k, n) as f64 / (n as f64 * dx)
}

/// In-place forward DFT of a row-major `nx * ny` rectangle (`ny = 1` for
/// one-dimensional grids). Unnormalized, kernel `exp(-i x eta)`.
fn fft_rect(buf: &mut [Complex64], nx: usize, ny: usize, planner: &mut FftPlanner<f64>) {
    let fx = planner.plan_fft_forward(nx);
    fx.process(buf);
    if ny > 1 {
        let fy = planner.plan_fft_forward(ny);
        let mut cols = vec![Complex64::new(0.0, 0.0); buf.len()];
        for iy in 0..ny {
            for ix in 0..nx {
                cols[ix * ny + iy] = buf[iy * nx + ix];
            }
        }
        fy.process(&mut cols);
        for iy in 0..ny {
            for ix in 0..nx {
                buf[iy * nx + ix] = cols[ix * ny + iy];
            }
        }
    }
}

/// Applies the Kohn-Nirenberg quantization of `symbol` at scale `h`:
/// `(Op(a) u)(x) = N^{-1} sum_eta a(x, h eta) u_hat(eta) exp(i x eta)` on
/// the zero-extended rectangle. The discrete multiplier lives on the
/// frequency torus, so the symbol must be single-valued across the Nyquist
/// seam: on the outer fifth of the band the guard compares each lattice
/// value against its wrapped partner over a 3 x 3 sample of positions,
/// to one part in a million.
/// Derivative-type symbols that keep growing through the seam fail the
/// probe; constants, and windows vanishing past 80 percent of the scaled
/// Nyquist band, pass. The periodic transform is accurate for states with
/// negligible mass at the rectangle edge.
pub fn quantize_spatial<F>(
    op: &DiscreteOperator,
    symbol: F,
    h: f64,
    u: &WaveState,
) -> Result<WaveState, PhaseSpaceError>
where
    F: Fn(&[f64], &[f64]) -> f64,
{
    let embed = RectEmbed::of(op);
    if u.values.len() != op.n() {
        return Err(PhaseSpaceError::ShapeMismatch {
            expected: op.n(),
            got: u.values.len(),
        });
    }
    let mut planner = FftPlanner::new();
    let mut rect = embed.scatter(op, &u.values);
    fft_rect(&mut rect, embed.nx, embed.ny, &mut planner);

    let limit = 0.8 * PI * h / embed.dx;
    let probes = probe_positions(&embed);
    let freq_x: Vec<f64> = (0..embed.nx)
        .map(|k| h * bin_freq(k, embed.nx, embed.dx))
        .collect();
    let freq_y: Vec<f64> = (0..embed.ny)
        .map(|k| h * bin_freq(k, embed.ny, embed.dx))
        .collect();
    let band = PI * h / embed.dx;
    let wrap = |v: f64| {
        if v.abs() > limit {
            v - 2.0 * band * v.signum()
        } else {
            v
        }
    };
    for &xi_y in &freq_y {
        for &xi_x in &freq_x {
            let reach = if embed.dim == 1 {
                xi_x.abs()
            } else {
                xi_x.abs().max(xi_y.abs())
            };
            if reach <= limit {
                continue;
            }
            let xi = [xi_x, xi_y];
            let partner = [wrap(xi_x), wrap(xi_y)];
            for p in &probes {
                let a = symbol(&p[..embed.dim], &xi[..embed.dim]);
                let b = symbol(&p[..embed.dim], &partner[..embed.dim]);
                if (a - b).abs() > 1e-6 * (1.0 + a.abs().max(b.abs())) {
                    return Err(PhaseSpaceError::AliasRisk { reach, limit });
                }
            }
        }
    }

    let n_total = embed.len() as f64;
    let mut out = vec![Complex64::new(0.0, 0.0); op.n()];
    let mut tw_x = vec![Complex64::new(0.0, 0.0); embed.nx];
    let mut tw_y = vec![Complex64::new(0.0, 0.0); embed.ny];
    for iy in 0..embed.ny {
        for ix in 0..embed.nx {
            let Some(idx) = op.shape.node_index(ix, iy) else {
                continue;
            };
            let x = op.nodes[idx];
            for (k, tw) in tw_x.iter_mut().enumerate() {
                *tw = Complex64::from_polar(1.0, 2.0 * PI * (ix * k) as f64 / embed.nx as f64);
            }
            for (k, tw) in tw_y.iter_mut().enumerate() {
                *tw = Complex64::from_polar(1.0, 2.0 * PI * (iy * k) as f64 / embed.ny as f64);
            }
            let mut acc = Complex64::new(0.0, 0.0);
            for ky in 0..embed.ny {
                let row = ky * embed.nx;
                let ty = tw_y[ky];
                for kx in 0..embed.nx {
                    let xi = [freq_x[kx], freq_y[ky]];
                    let a = symbol(&x[..embed.dim], &xi[..embed.dim]);
                    if a != 0.0 {
                        acc += a * rect[row + kx] * tw_x[kx] * ty;
                    }
                }
            }
            out[idx] = acc / n_total;
        }
    }
    Ok(WaveState {
        values: out,
        t: u.t,
    })
}

fn probe_positions(embed: &RectEmbed) -> Vec<[f64; 2]> {
    let span_x = (embed.nx - 1) as f64 * embed.dx;
    let span_y = (embed.ny - 1) as f64 * embed.dx;
    let mut pts = Vec::new();
    for fy in [0.0, 0.5, 1.0] {
        for fx in [0.0, 0.5, 1.0] {
            pts.push([
                embed.origin[0] + fx * span_x,
                embed.origin[1] + fy * span_y,
            ]);
        }
    }
    pts
}

/// Requested phase-space lattice; momentum rows snap to the patch FFT bins,
/// so the realized spacing never exceeds the requested one.
#[derive(Debug, Clone)]
pub struct PhaseGrid {
    pub x_min: Vec<f64>,
    pub x_max: Vec<f64>,
    pub x_step: f64,
    pub xi_min: Vec<f64>,
    pub xi_max: Vec<f64>,
    pub xi_step: f64,
}

/// Discrete Husimi measure: the squared coherent-state overlaps
/// `|<g_{x0,xi0,h}, u>|^2 / (2 pi h)^d` on a product lattice.
#[derive(Debug)]
pub struct HusimiMeasure {
    pub h: f64,
    pub dim: usize,
    /// Position axis per dimension; the flattened order is row-major with
    /// the last axis fastest.
    pub x_axes: Vec<Vec<f64>>,
    /// Momentum axis per dimension, on the patch FFT lattice.
    pub xi_axes: Vec<Vec<f64>>,
    /// Density values, position-major: `density[ix * xi_count + ixi]`.
    pub density: Vec<f64>,
    /// Position cell volume `x_step^d`.
    pub x_cell: f64,
    /// Momentum cell volume.
    pub xi_cell: f64,
    /// Squared norm of the sampled state.
    pub state_norm_sq: f64,
}

fn decode(axes: &[Vec<f64>], mut flat: usize) -> Vec<f64> {
    let mut out = vec![0.0; axes.len()];
    for d in (0..axes.len()).rev() {
        let n = axes[d].len();
        out[d] = axes[d][flat % n];
        flat /= n;
    }
    out
}

impl HusimiMeasure {
    pub fn x_count(&self) -> usize {
        self.x_axes.iter().map(|a| a.len()).product()
    }

    pub fn xi_count(&self) -> usize {
        self.xi_axes.iter().map(|a| a.len()).product()
    }

    pub fn x_point(&self, flat: usize) -> Vec<f64> {
        decode(&self.x_axes, flat)
    }

    pub fn xi_point(&self, flat: usize) -> Vec<f64> {
        decode(&self.xi_axes, flat)
    }

    /// Quadrature mass `sum density * dx0^d * dxi0^d`; the resolution of
    /// identity makes this the squared norm up to window and lattice tails.
    pub fn total_mass(&self) -> f64 {
        self.density.iter().sum::<f64>() * self.x_cell * self.xi_cell
    }

    /// Location of the largest density value.
    pub fn peak(&self) -> (Vec<f64>, Vec<f64>) {
        let mut best = 0usize;
        for (i, v) in self.density.iter().enumerate() {
            if *v > self.density[best] {
                best = i;
            }
        }
        let nxi = self.xi_count();
        (self.x_point(best / nxi), self.xi_point(best % nxi))
    }

    /// Mass inside the phase-space ball of radius `r` around `(x, xi)`.
    pub fn mass_within(&self, x: &[f64], xi: &[f64], r: f64) -> f64 {
        let nxi = self.xi_count();
        let mut sum = 0.0;
        for (i, v) in self.density.iter().enumerate() {
            let xp = self.x_point(i / nxi);
            let xip = self.xi_point(i % nxi);
            let mut d2 = 0.0;
            for d in 0..self.dim {
                d2 += (xp[d] - x[d]).powi(2) + (xip[d] - xi[d]).powi(2);
            }
            if d2 <= r * r {
                sum += v;
            }
        }
        sum * self.x_cell * self.xi_cell
    }
}

/// Geometry of the coherent-state window patch shared by the Husimi
/// builders: patch corner and extent per center, FFT pad, bin selection.
struct PatchPlan {
    rw: i64,
    extent: usize,
    pad: usize,
    /// Selected FFT bins per dimension as `(bin, xi)` sorted by `xi`.
    bins: Vec<Vec<(usize, f64)>>,
    fft: Arc<dyn Fft<f64>>,
    norm: f64,
}

impl PatchPlan {
    fn new(
        embed: &RectEmbed,
        h: f64,
        xi_step: f64,
        xi_min: &[f64],
        xi_max: &[f64],
        planner: &mut FftPlanner<f64>,
    ) -> PatchPlan {
        let rw = (WINDOW_SCALE * h.sqrt() / embed.dx).ceil() as i64;
        let extent = (2 * rw + 1) as usize;
        let freq_cells = (2.0 * PI * h / (xi_step * embed.dx)).ceil() as usize;
        let pad = extent.max(freq_cells).next_power_of_two();
        let mut bins = Vec::new();
        for d in 0..embed.dim {
            let mut list: Vec<(usize, f64)> = (0..pad)
                .map(|k| (k, h * bin_freq(k, pad, embed.dx)))
                .filter(|(_, xi)| *xi >= xi_min[d] && *xi <= xi_max[d])
                .collect();
            list.sort_by(|a, b| a.1.total_cmp(&b.1));
            bins.push(list);
        }
        // |<g, u>|^2 = (pi h)^{-d/2} dx^d |F|^2, then divided by (2 pi h)^d.
        let d = embed.dim as f64;
        let norm = embed.dx.powf(d) / ((PI * h).powf(d / 2.0) * (2.0 * PI * h).powf(d));
        PatchPlan {
            rw,
            extent,
            pad,
            bins,
            fft: planner.plan_fft_forward(pad),
            norm,
        }
    }

    fn buffer_len(&self, dim: usize) -> usize {
        if dim == 1 {
            self.pad
        } else {
            self.pad * self.pad
        }
    }

    /// Fills `buf` with the windowed state around `x0` and transforms it.
    /// The DFT phase is anchored at the patch corner, a fixed offset per
    /// center, so moduli and snapshot-to-snapshot phase differences are
    /// exact.
    fn transform(
        &self,
        embed: &RectEmbed,
        op: &DiscreteOperator,
        u: &[Complex64],
        x0: &[f64],
        h: f64,
        buf: &mut [Complex64],
    ) {
        buf.fill(Complex64::new(0.0, 0.0));
        let icx = ((x0[0] - embed.origin[0]) / embed.dx).round() as i64 - self.rw;
        let icy = if embed.dim == 2 {
            ((x0[1] - embed.origin[1]) / embed.dx).round() as i64 - self.rw
        } else {
            0
        };
        let ny_ext = if embed.dim == 1 { 1 } else { self.extent };
        for oy in 0..ny_ext {
            let iy = icy + oy as i64;
            if iy < 0 || iy >= embed.ny as i64 {
                continue;
            }
            for ox in 0..self.extent {
                let ix = icx + ox as i64;
                if ix < 0 || ix >= embed.nx as i64 {
                    continue;
                }
                let Some(idx) = op.shape.node_index(ix as usize, iy as usize) else {
                    continue;
                };
                let node = op.nodes[idx];
                let mut d2 = (node[0] - x0[0]).powi(2);
                if embed.dim == 2 {
                    d2 += (node[1] - x0[1]).powi(2);
                }
                let w = (-d2 / (2.0 * h)).exp();
                if embed.dim == 1 {
                    buf[ox] = w * u[idx];
                } else {
                    buf[oy * self.pad + ox] = w * u[idx];
                }
            }
        }
        if embed.dim == 1 {
            self.fft.process(buf);
        } else {
            self.fft.process(buf);
            let pad = self.pad;
            let mut cols = vec![Complex64::new(0.0, 0.0); buf.len()];
            for iy in 0..pad {
                for ix in 0..pad {
                    cols[ix * pad + iy] = buf[iy * pad + ix];
                }
            }
            self.fft.process(&mut cols);
            for iy in 0..pad {
                for ix in 0..pad {
                    buf[iy * pad + ix] = cols[ix * pad + iy];
                }
            }
        }
    }

    fn read_bin(&self, buf: &[Complex64], dim: usize, kx: usize, ky: usize) -> Complex64 {
        if dim == 1 {
            buf[kx]
        } else {
            buf[ky * self.pad + kx]
        }
    }
}

fn axis_points(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let count = ((hi - lo) / step).floor() as usize + 1;
    (0..count).map(|i| lo + i as f64 * step).collect()
}

/// Computes the Husimi measure of `u` on the requested lattice. Position
/// centers follow the request exactly; momentum rows use the patch FFT
/// lattice restricted to the requested range, whose spacing is at most the
/// requested step.
pub fn husimi(
    op: &DiscreteOperator,
    u: &WaveState,
    h: f64,
    grid: &PhaseGrid,
) -> Result<HusimiMeasure, PhaseSpaceError> {
    let embed = RectEmbed::of(op);
    if u.values.len() != op.n() {
        return Err(PhaseSpaceError::ShapeMismatch {
            expected: op.n(),
            got: u.values.len(),
        });
    }
    let required = h.sqrt() / 2.0;
    if grid.x_step > required * (1.0 + 1e-12) {
        return Err(PhaseSpaceError::GridTooCoarse {
            axis: "position",
            step: grid.x_step,
            required,
        });
    }
    if grid.xi_step > required * (1.0 + 1e-12) {
        return Err(PhaseSpaceError::GridTooCoarse {
            axis: "momentum",
            step: grid.xi_step,
            required,
        });
    }
    let mut planner = FftPlanner::new();
    let plan = PatchPlan::new(
        &embed,
        h,
        grid.xi_step,
        &grid.xi_min,
        &grid.xi_max,
        &mut planner,
    );
    let x_axes: Vec<Vec<f64>> = (0..embed.dim)
        .map(|d| axis_points(grid.x_min[d], grid.x_max[d], grid.x_step))
        .collect();
    let xi_axes: Vec<Vec<f64>> = plan
        .bins
        .iter()
        .map(|list| list.iter().map(|(_, xi)| *xi).collect())
        .collect();
    let nx: usize = x_axes.iter().map(|a| a.len()).product();
    let nxi: usize = xi_axes.iter().map(|a| a.len()).product();
    let entries = nx.checked_mul(nxi).unwrap_or(usize::MAX);
    if entries > MEASURE_CAP {
        return Err(PhaseSpaceError::MeasureTooLarge {
            entries,
            cap: MEASURE_CAP,
        });
    }
    let xi_cell = plan
        .bins
        .iter()
        .map(|list| {
            if list.len() > 1 {
                list[1].1 - list[0].1
            } else {
                grid.xi_step
            }
        })
        .product();

    let centers: Vec<Vec<f64>> = (0..nx)
        .map(|flat| decode(&x_axes, flat))
        .collect();
    let density: Vec<f64> = centers
        .par_iter()
        .map_init(
            || vec![Complex64::new(0.0, 0.0); plan.buffer_len(embed.dim)],
            |buf, x0| {
                plan.transform(&embed, op, &u.values, x0, h, buf);
                let mut row = Vec::with_capacity(nxi);
                if embed.dim == 1 {
                    for (kx, _) in &plan.bins[0] {
                        let a = plan.read_bin(buf, 1, *kx, 0);
                        row.push(a.norm_sqr() * plan.norm);
                    }
                } else {
                    for (kx, _) in &plan.bins[0] {
                        for (ky, _) in &plan.bins[1] {
                            let a = plan.read_bin(buf, 2, *kx, *ky);
                            row.push(a.norm_sqr() * plan.norm);
                        }
                    }
                }
                row
            },
        )
        .flatten()
        .collect();

    Ok(HusimiMeasure {
        h,
        dim: embed.dim,
        x_axes,
        xi_axes,
        density,
        x_cell: grid.x_step.powi(embed.dim as i32),
        xi_cell,
        state_norm_sq: u.values.iter().map(|z| z.norm_sqr()).sum(),
    })
}

/// Controls for the space-time refinement of the Husimi analysis.
#[derive(Debug, Clone)]
pub struct TauGrid {
    /// Band half-width around the characteristic set in units of `sqrt(h)`.
    pub c_band: f64,
    /// Zero-padding factor of the temporal transform.
    pub pad: usize,
    /// Spacing of the position centers in units of `sqrt(h)`.
    pub x_stride_scale: f64,
    /// Requested momentum spacing in units of `sqrt(h)`.
    pub xi_step_scale: f64,
    /// Relative floor on `|amplitude|^2` below which a phase cell is
    /// dropped from the temporal analysis; measured against the largest
    /// amplitude of the same snapshot.
    pub amp_floor: f64,
    /// Relative floor on the windowed patch mass below which a position
    /// center is skipped entirely.
    pub mass_floor: f64,
}

impl Default for TauGrid {
    fn default() -> Self {
        TauGrid {
            c_band: 5.0,
            pad: 4,
            x_stride_scale: 1.0,
            xi_step_scale: 1.0,
            amp_floor: 1e-4,
            mass_floor: 1e-5,
        }
    }
}

/// Mass fraction of the space-time Husimi density within
/// `|tau + p(x, xi)| <= c_band sqrt(h)` of the characteristic set.
///
/// The spatial Husimi amplitudes of each snapshot are collected on a strided
/// lattice of centers, restricted to cells that ever carry mass above the
/// configured floors, and each retained cell's amplitude history receives a
/// Hann window and a zero-padded Fourier transform. Bin `m` of that
/// transform carries the analysis frequency `omega_m`, converted to
/// `tau = -h^2 omega_m`; the reported fraction is in-band spectral mass over
/// total spectral mass of the retained cells.
pub fn check_support_sigma(
    op: &DiscreteOperator,
    field: &SymbolField,
    trajectory: &Trajectory,
    h: f64,
    tau: &TauGrid,
) -> Result<f64, PhaseSpaceError> {
    let embed = RectEmbed::of(op);
    let states = &trajectory.states;
    if states.len() < 8 {
        return Err(PhaseSpaceError::TooFewSnapshots {
            got: states.len(),
            required: 8,
        });
    }
    for s in states {
        if s.values.len() != op.n() {
            return Err(PhaseSpaceError::ShapeMismatch {
                expected: op.n(),
                got: s.values.len(),
            });
        }
    }
    let dt = states[1].t - states[0].t;
    if dt <= 0.0 {
        return Err(PhaseSpaceError::NonUniformSnapshots);
    }
    for w in states.windows(2) {
        if ((w[1].t - w[0].t) - dt).abs() > 1e-6 * dt {
            return Err(PhaseSpaceError::NonUniformSnapshots);
        }
    }
    if states[0].norm() == 0.0 {
        return Err(PhaseSpaceError::ZeroData);
    }

    let mut planner = FftPlanner::new();
    let sqrt_h = h.sqrt();
    let xi_lo = vec![f64::NEG_INFINITY; embed.dim];
    let xi_hi = vec![f64::INFINITY; embed.dim];
    let plan = PatchPlan::new(
        &embed,
        h,
        tau.xi_step_scale * sqrt_h,
        &xi_lo,
        &xi_hi,
        &mut planner,
    );
    let stride = ((tau.x_stride_scale * sqrt_h / embed.dx).round() as usize).max(1);
    let cand_x: Vec<usize> = (0..embed.nx).step_by(stride).collect();
    let cand_y: Vec<usize> = if embed.dim == 1 {
        vec![0]
    } else {
        (0..embed.ny).step_by(stride).collect()
    };

    // Amplitude histories per retained phase cell, keyed by center index
    // and FFT bin; holes are backfilled with zeros.
    let mut series: HashMap<(u32, u32, u32), Vec<Complex64>> = HashMap::new();
    let n_snap = states.len();
    for (s_idx, state) in states.iter().enumerate() {
        // Summed-area table of |u|^2 over the rectangle for the patch-mass
        // floor.
        let mut sat = vec![0.0f64; (embed.nx + 1) * (embed.ny + 1)];
        for iy in 0..embed.ny {
            for ix in 0..embed.nx {
                let cell = op
                    .shape
                    .node_index(ix, iy)
                    .map(|idx| state.values[idx].norm_sqr())
                    .unwrap_or(0.0);
                sat[(iy + 1) * (embed.nx + 1) + ix + 1] = cell
                    + sat[iy * (embed.nx + 1) + ix + 1]
                    + sat[(iy + 1) * (embed.nx + 1) + ix]
                    - sat[iy * (embed.nx + 1) + ix];
            }
        }
        let total = sat[(embed.ny) * (embed.nx + 1) + embed.nx];
        if total == 0.0 {
            continue;
        }
        let patch_mass = |icx: i64, icy: i64| -> f64 {
            let x0 = icx.clamp(0, embed.nx as i64) as usize;
            let x1 = (icx + plan.extent as i64).clamp(0, embed.nx as i64) as usize;
            let y0 = icy.clamp(0, embed.ny as i64) as usize;
            let y1 = (icy + plan.extent as i64).clamp(0, embed.ny as i64) as usize;
            sat[y1 * (embed.nx + 1) + x1] + sat[y0 * (embed.nx + 1) + x0]
                - sat[y0 * (embed.nx + 1) + x1]
                - sat[y1 * (embed.nx + 1) + x0]
        };

        let mut live: Vec<(u32, [f64; 2])> = Vec::new();
        for (ay, &iy) in cand_y.iter().enumerate() {
            for (ax, &ix) in cand_x.iter().enumerate() {
                let x0 = [
                    embed.origin[0] + ix as f64 * embed.dx,
                    embed.origin[1] + iy as f64 * embed.dx,
                ];
                let icx = ix as i64 - plan.rw;
                let icy = if embed.dim == 1 {
                    0
                } else {
                    iy as i64 - plan.rw
                };
                if patch_mass(icx, icy) >= tau.mass_floor * total {
                    live.push(((ay * cand_x.len() + ax) as u32, x0));
                }
            }
        }

        // Per-center candidate lists, thresholded first against the local
        // patch maximum and then against the snapshot maximum; the double
        // filter reproduces a single global threshold exactly.
        let candidates: Vec<(f64, Vec<(u32, u32, Complex64)>)> = live
            .par_iter()
            .map_init(
                || vec![Complex64::new(0.0, 0.0); plan.buffer_len(embed.dim)],
                |buf, (center, x0)| {
                    plan.transform(&embed, op, &state.values, &x0[..], h, buf);
                    let mut local_max = 0.0f64;
                    let view = if embed.dim == 1 {
                        &buf[..plan.pad]
                    } else {
                        &buf[..]
                    };
                    for a in view {
                        local_max = local_max.max(a.norm_sqr());
                    }
                    let mut kept = Vec::new();
                    let floor = tau.amp_floor * local_max;
                    if embed.dim == 1 {
                        for kx in 0..plan.pad {
                            let a = buf[kx];
                            if a.norm_sqr() >= floor {
                                kept.push((*center, kx as u32, a));
                            }
                        }
                    } else {
                        for ky in 0..plan.pad {
                            for kx in 0..plan.pad {
                                let a = buf[ky * plan.pad + kx];
                                if a.norm_sqr() >= floor {
                                    kept.push((*center, (ky * plan.pad + kx) as u32, a));
                                }
                            }
                        }
                    }
                    (local_max, kept)
                },
            )
            .collect();
        let snap_max = candidates
            .iter()
            .map(|(m, _)| *m)
            .fold(0.0f64, f64::max);
        let floor = tau.amp_floor * snap_max;
        for (_, kept) in candidates {
            for (center, bin, a) in kept {
                if a.norm_sqr() >= floor {
                    let kx = bin % plan.pad as u32;
                    let ky = bin / plan.pad as u32;
                    let entry = series.entry((center, kx, ky)).or_default();
                    entry.resize(s_idx, Complex64::new(0.0, 0.0));
                    entry.push(a);
                }
            }
        }
    }
    if series.is_empty() {
        return Err(PhaseSpaceError::ZeroData);
    }

    let len = (tau.pad.max(1) * n_snap).next_power_of_two();
    let fft_t = planner.plan_fft_forward(len);
    let hann: Vec<f64> = (0..n_snap)
        .map(|s| 0.5 * (1.0 - (2.0 * PI * s as f64 / (n_snap - 1) as f64).cos()))
        .collect();
    let band = tau.c_band * sqrt_h;
    let mut in_band = 0.0;
    let mut total_mass = 0.0;
    let mut buf = vec![Complex64::new(0.0, 0.0); len];
    let cx = cand_x.len() as u32;
    for ((center, kx, ky), history) in &series {
        buf.fill(Complex64::new(0.0, 0.0));
        for (s, a) in history.iter().enumerate() {
            buf[s] = hann[s] * a;
        }
        fft_t.process(&mut buf);
        let ix = cand_x[(*center % cx) as usize];
        let iy = cand_y[(*center / cx) as usize];
        let x0 = [
            embed.origin[0] + ix as f64 * embed.dx,
            embed.origin[1] + iy as f64 * embed.dx,
        ];
        let xi = [
            h * bin_freq(*kx as usize, plan.pad, embed.dx),
            h * bin_freq(*ky as usize, plan.pad, embed.dx),
        ];
        let p0 = field.p(&x0[..embed.dim], &xi[..embed.dim]);
        for (m, z) in buf.iter().enumerate() {
            let w = z.norm_sqr();
            if w == 0.0 {
                continue;
            }
            let omega = bin_freq(m, len, dt);
            let tau_val = -h * h * omega;
            total_mass += w;
            if (tau_val + p0).abs() <= band {
                in_band += w;
            }
        }
    }
    if total_mass == 0.0 {
        return Err(PhaseSpaceError::ZeroData);
    }
    Ok(in_band / total_mass)
}

/// One row of a centroid track: state moments against the reference ray.
#[derive(Debug, Clone)]
pub struct CentroidSample {
    pub t: f64,
    pub x: Vec<f64>,
    pub xi: Vec<f64>,
    pub ray_x: Vec<f64>,
    pub ray_xi: Vec<f64>,
    pub error: f64,
}

/// Husimi centroid history with its worst deviation from the ray.
#[derive(Debug)]
pub struct CentroidTrack {
    pub samples: Vec<CentroidSample>,
    pub max_error: f64,
}

impl CentroidTrack {
    /// Largest deviation over samples at `t >= t0`, for reading the settled
    /// error after a boundary interaction.
    pub fn max_error_after(&self, t0: f64) -> f64 {
        self.samples
            .iter()
            .filter(|s| s.t >= t0 - 1e-12)
            .map(|s| s.error)
            .fold(0.0, f64::max)
    }
}

/// Propagates `u0` with Chebyshev exponential steps and compares the state's
/// phase-space centroid against the generalized ray at parameter `s = t/h`.
///
/// The centroid is the first moment of the Husimi measure, which Gaussian
/// smoothing leaves equal to the plain expectations: the position mean under
/// `|u|^2` and `h` times the frequency mean under `|u_hat|^2`. The supplied
/// flow must be launched at `(x0, -xi0)` when the packet carries `xi0`; its
/// momentum is reported sign-flipped so both columns describe the packet.
pub fn track_centroid(
    op: &DiscreteOperator,
    u0: &WaveState,
    flow: &GeneralizedTrajectory,
    h: f64,
    t_final: f64,
    dt: f64,
) -> Result<CentroidTrack, PhaseSpaceError> {
    let embed = RectEmbed::of(op);
    if u0.values.len() != op.n() {
        return Err(PhaseSpaceError::ShapeMismatch {
            expected: op.n(),
            got: u0.values.len(),
        });
    }
    if !(dt > 0.0) || !(t_final > 0.0) || dt > t_final * (1.0 + 1e-12) {
        return Err(PhaseSpaceError::BadWindow { dt, t_final });
    }
    if u0.norm() == 0.0 {
        return Err(PhaseSpaceError::ZeroData);
    }
    let n_steps = ((t_final / dt).round() as usize).max(1);
    let dt = t_final / n_steps as f64;
    let (glo, ghi) = op.matrix.gershgorin();

    let mut planner = FftPlanner::new();
    let mut values = u0.values.clone();
    let mut samples = Vec::with_capacity(n_steps + 1);
    let mut max_error = 0.0f64;
    for step in 0..=n_steps {
        let t = step as f64 * dt;
        let (x_bar, xi_bar) = centroid_moments(op, &embed, &values, h, &mut planner);
        let pt = flow.sample(t / h);
        let ray_x = pt.x.clone();
        let ray_xi: Vec<f64> = pt.xi.iter().map(|v| -v).collect();
        let mut err2 = 0.0;
        for d in 0..embed.dim {
            err2 += (x_bar[d] - ray_x[d]).powi(2) + (xi_bar[d] - ray_xi[d]).powi(2);
        }
        let error = err2.sqrt();
        max_error = max_error.max(error);
        samples.push(CentroidSample {
            t,
            x: x_bar,
            xi: xi_bar,
            ray_x,
            ray_xi,
            error,
        });
        if step < n_steps {
            values = chebyshev_exp_step(&op.matrix, glo, ghi, dt, &values, 1e-10);
        }
    }
    Ok(CentroidTrack {
        samples,
        max_error,
    })
}

/// Position and momentum means of the state on the embedding rectangle.
fn centroid_moments(
    op: &DiscreteOperator,
    embed: &RectEmbed,
    values: &[Complex64],
    h: f64,
    planner: &mut FftPlanner<f64>,
) -> (Vec<f64>, Vec<f64>) {
    let mut mass = 0.0;
    let mut x_bar = vec![0.0; embed.dim];
    for (node, v) in op.nodes.iter().zip(values) {
        let w = v.norm_sqr();
        mass += w;
        for d in 0..embed.dim {
            x_bar[d] += w * node[d];
        }
    }
    for v in &mut x_bar {
        *v /= mass;
    }
    let mut rect = embed.scatter(op, values);
    fft_rect(&mut rect, embed.nx, embed.ny, planner);
    let mut spec_mass = 0.0;
    let mut xi_bar = vec![0.0; embed.dim];
    for ky in 0..embed.ny {
        let fy = bin_freq(ky, embed.ny, embed.dx);
        for kx in 0..embed.nx {
            let w = rect[ky * embed.nx + kx].norm_sqr();
            spec_mass += w;
            xi_bar[0] += w * bin_freq(kx, embed.nx, embed.dx);
            if embed.dim == 2 {
                xi_bar[1] += w * fy;
            }
        }
    }
    for v in &mut xi_bar {
        *v *= h / spec_mass;
    }
    (x_bar, xi_bar)
}

/// Builds a snapshot trajectory with Chebyshev exponential steps, for grids
/// too large to factor. Snapshots are uniform from `0` to `t_final`
/// inclusive; unitarity drift is recorded from the step norms.
pub fn chebyshev_trajectory(
    op: &DiscreteOperator,
    u0: &WaveState,
    t_final: f64,
    snapshots: usize,
    tol: f64,
) -> Result<Trajectory, PhaseSpaceError> {
    if snapshots < 2 || !(t_final > 0.0) {
        return Err(PhaseSpaceError::BadWindow {
            dt: t_final / snapshots.max(1) as f64,
            t_final,
        });
    }
    if u0.norm() == 0.0 {
        return Err(PhaseSpaceError::ZeroData);
    }
    let dt = t_final / (snapshots - 1) as f64;
    let (glo, ghi) = op.matrix.gershgorin();
    let norm0 = u0.norm();
    let mut states = vec![WaveState {
        values: u0.values.clone(),
        t: 0.0,
    }];
    let mut norm_drift = 0.0f64;
    let mut step_drift = 0.0f64;
    for s in 1..snapshots {
        let prev = states.last().unwrap();
        let values = chebyshev_exp_step(&op.matrix, glo, ghi, dt, &prev.values, tol);
        let state = WaveState {
            values,
            t: s as f64 * dt,
        };
        step_drift = step_drift.max((state.norm() - prev.norm()).abs() / norm0);
        norm_drift = norm_drift.max((state.norm() - norm0).abs() / norm0);
        states.push(state);
    }
    Ok(Trajectory {
        states,
        dt,
        norm_drift,
        step_drift,
        energy_drift: 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cutoffs::CutoffFn;
    use crate::discrete::{assemble, assemble_fourth_order, GridSpec, SpectralData};
    use crate::evolve::{propagate, WavepacketFamily};
    use crate::genflow::{evolve_generalized, GenFlowOpts};
    use crate::hamflow::PhasePoint;
    use crate::symbols::Obstacle;

    fn flat_field(dim: usize) -> SymbolField {
        SymbolField::flat(dim)
    }

    fn free_box(half_width: f64, dx: f64) -> DiscreteOperator {
        assemble(
            &flat_field(2),
            &Obstacle::none(),
            &GridSpec::Box2d { half_width, dx },
        )
        .unwrap()
    }

    fn coherent_state(op: &DiscreteOperator, center: [f64; 2], carrier: [f64; 2], h: f64) -> WaveState {
        WavepacketFamily::new(center, carrier, vec![h])
            .initial_state(op, &Obstacle::none(), h)
            .unwrap()
    }

    #[test]
    fn identity_symbol_acts_as_identity() {
        let op = free_box(1.0, 0.05);
        let h = 0.25;
        let u = coherent_state(&op, [0.1, -0.2], [0.4, 0.3], h);
        let v = quantize_spatial(&op, |_, _| 1.0, h, &u).unwrap();
        let err: f64 = v
            .values
            .iter()
            .zip(&u.values)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max);
        assert!(err <= 1e-12, "identity defect {err:.3e}");
    }

    #[test]
    fn windowed_momentum_symbol_matches_the_spectral_derivative() {
        let field = flat_field(1);
        let op = assemble(&field, &Obstacle::none(), &GridSpec::Interval { n: 256 }).unwrap();
        let h = 1.0 / 16.0;
        let mid = PI / 2.0;
        let mut values: Vec<Complex64> = op
            .nodes
            .iter()
            .map(|x| {
                let amp = (-(x[0] - mid).powi(2) / (2.0 * h)).exp();
                Complex64::from_polar(amp, 0.5 * x[0] / h)
            })
            .collect();
        let norm = values.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        for v in &mut values {
            *v /= norm;
        }
        let u = WaveState { values, t: 0.0 };

        let window = CutoffFn::plateau(-6.0, -5.0, 5.0, 6.0, 4);
        let v = quantize_spatial(&op, |_, xi| xi[0] * window.eval(xi[0]), h, &u).unwrap();

        // Reference route: plain Fourier multiplier h*eta on the embedded
        // line, no window, evaluated directly.
        let n = op.n();
        let mut planner = FftPlanner::new();
        let mut hat = u.values.clone();
        planner.plan_fft_forward(n).process(&mut hat);
        for (k, z) in hat.iter_mut().enumerate() {
            *z *= h * bin_freq(k, n, op.dx);
        }
        planner.plan_fft_inverse(n).process(&mut hat);
        let scale = 1.0 / n as f64;
        let diff: f64 = v
            .values
            .iter()
            .zip(&hat)
            .map(|(a, b)| (a - b * scale).norm_sqr())
            .sum::<f64>()
            .sqrt();
        let reference: f64 = hat
            .iter()
            .map(|z| (z * scale).norm_sqr())
            .sum::<f64>()
            .sqrt();
        assert!(
            diff <= 1e-7 * reference,
            "windowed derivative defect {:.3e} against {:.3e}",
            diff,
            reference
        );
    }

    #[test]
    fn out_of_band_symbol_is_rejected() {
        let op = free_box(0.5, 0.05);
        let h = 0.25;
        let u = coherent_state(&op, [0.0, 0.0], [0.5, 0.0], h);
        let err = quantize_spatial(&op, |_, xi| xi[0], h, &u).unwrap_err();
        assert!(matches!(err, PhaseSpaceError::AliasRisk { .. }), "{err}");
    }

    /// Continuum value of the one-dimensional factor `<u, f(x) g(hD) u>`
    /// for a coherent state at `(xs, ks)` and Gaussian windows of variance
    /// `w2` centered at `cx` (position) and `cxi` (momentum), by direct
    /// midpoint quadrature of the Fourier representation. Serves as the
    /// independent oracle for the grid pipeline: state, symbol, and packet
    /// all separate across coordinates.
    fn kn_factor_continuum(h: f64, xs: f64, ks: f64, cx: f64, cxi: f64, w2: f64) -> Complex64 {
        let n = 3000usize;
        let m = 2000usize;
        let spread = 12.0 * h.sqrt();
        let dx = 2.0 * spread / n as f64;
        let dk = 2.0 * spread / m as f64;
        let mut acc = Complex64::new(0.0, 0.0);
        for i in 0..n {
            let x = xs - spread + (i as f64 + 0.5) * dx;
            let u = Complex64::from_polar(
                (PI * h).powf(-0.25) * (-(x - xs).powi(2) / (2.0 * h)).exp(),
                x * ks / h,
            );
            let f = (-(x - cx).powi(2) / (2.0 * w2)).exp();
            let mut gu = Complex64::new(0.0, 0.0);
            for j in 0..m {
                let xi = ks - spread + (j as f64 + 0.5) * dk;
                let eta = xi / h;
                let uhat = Complex64::from_polar(
                    (4.0 * PI * h).powf(0.25) * (-h * (eta - ks / h).powi(2) / 2.0).exp(),
                    -xs * (eta - ks / h),
                );
                let g = (-(xi - cxi).powi(2) / (2.0 * w2)).exp();
                gu += g * uhat * Complex64::from_polar(1.0, x * eta) * (dk / h);
            }
            acc += u.conj() * f * (gu / (2.0 * PI)) * dx;
        }
        acc
    }

    /// Continuum anti-Wick factor: the coordinate-pair contribution to the
    /// Husimi quadrature is the symbol smoothed by a variance-`h` kernel in
    /// both position and momentum, in closed form for Gaussian windows.
    fn aw_factor_continuum(h: f64, xs: f64, ks: f64, cx: f64, cxi: f64, w2: f64) -> f64 {
        let conv = |center: f64, at: f64| {
            (w2 / (w2 + h)).sqrt() * (-(at - center).powi(2) / (2.0 * (w2 + h))).exp()
        };
        conv(cx, xs) * conv(cxi, ks)
    }

    fn kn_vs_husimi(h: f64) -> (Complex64, f64) {
        let op = free_box(1.8, 1.0 / 26.0);
        let u = coherent_state(&op, [0.15, -0.1], [0.9, 0.3], h);
        let symbol = |x: &[f64], xi: &[f64]| {
            let d2 = (x[0] - 0.2).powi(2)
                + (x[1] + 0.1).powi(2)
                + (xi[0] - 0.8).powi(2)
                + (xi[1] - 0.2).powi(2);
            (-d2 / 0.72).exp()
        };
        let v = quantize_spatial(&op, symbol, h, &u).unwrap();
        let element: Complex64 = u
            .values
            .iter()
            .zip(&v.values)
            .map(|(a, b)| a.conj() * b)
            .sum();

        let grid = PhaseGrid {
            x_min: vec![-1.7, -1.7],
            x_max: vec![1.7, 1.7],
            x_step: 0.99 * h.sqrt() / 2.0,
            xi_min: vec![-1.3, -1.9],
            xi_max: vec![2.9, 2.3],
            xi_step: 0.99 * h.sqrt() / 2.0,
        };
        let measure = husimi(&op, &u, h, &grid).unwrap();
        let nxi = measure.xi_count();
        let mut quad = 0.0;
        for (i, dens) in measure.density.iter().enumerate() {
            let xp = measure.x_point(i / nxi);
            let xip = measure.xi_point(i % nxi);
            quad += symbol(&xp, &xip) * dens;
        }
        quad *= measure.x_cell * measure.xi_cell;
        (element, quad)
    }

    #[test]
    fn gaussian_symbol_matrix_element_matches_husimi_quadrature() {
        let w2 = 0.36;
        let mut gaps = Vec::new();
        for h in [0.125, 0.0625] {
            let (element, quad) = kn_vs_husimi(h);
            let oracle_element = kn_factor_continuum(h, 0.15, 0.9, 0.2, 0.8, w2)
                * kn_factor_continuum(h, -0.1, 0.3, -0.1, 0.2, w2);
            let oracle_quad = aw_factor_continuum(h, 0.15, 0.9, 0.2, 0.8, w2)
                * aw_factor_continuum(h, -0.1, 0.3, -0.1, 0.2, w2);
            assert!(
                (element - oracle_element).norm() <= 0.03,
                "element {element:?} vs oracle {oracle_element:?} at h = {h}"
            );
            assert!(
                (quad - oracle_quad).abs() <= 0.03,
                "quadrature {quad:.4} vs oracle {oracle_quad:.4} at h = {h}"
            );
            let gap = (element - Complex64::new(quad, 0.0)).norm();
            assert!(gap <= 2.4 * h, "gap {gap:.4} at h = {h}");
            gaps.push(gap);
        }
        assert!(
            gaps[1] <= 0.85 * gaps[0],
            "gap did not shrink with h: {:.4} -> {:.4}",
            gaps[0],
            gaps[1]
        );
    }

    #[test]
    fn husimi_of_a_coherent_state_peaks_at_its_parameters() {
        let h = 0.125;
        let op = free_box(1.6, 0.05);
        let center = [0.2, -0.3];
        let carrier = [0.7, 0.4];
        let u = coherent_state(&op, center, carrier, h);
        let grid = PhaseGrid {
            x_min: vec![-1.5, -1.5],
            x_max: vec![1.5, 1.5],
            x_step: 0.99 * h.sqrt() / 2.0,
            xi_min: vec![-1.5, -1.5],
            xi_max: vec![2.5, 2.5],
            xi_step: 0.99 * h.sqrt() / 2.0,
        };
        let measure = husimi(&op, &u, h, &grid).unwrap();
        assert!(measure.density.iter().all(|v| *v >= 0.0));

        let (px, pxi) = measure.peak();
        let dist = ((px[0] - center[0]).powi(2)
            + (px[1] - center[1]).powi(2)
            + (pxi[0] - carrier[0]).powi(2)
            + (pxi[1] - carrier[1]).powi(2))
        .sqrt();
        assert!(dist <= h.sqrt(), "peak off by {dist:.3}");

        // Closed form: the overlap density of two coherent frames puts
        // 1 - exp(-u/2)(1 + u/2) of the mass inside radius r, u = r^2/h;
        // r = 3 sqrt(h) gives 0.9389.
        let near = measure.mass_within(&center, &carrier, 3.0 * h.sqrt());
        assert!(near >= 0.5, "mass near peak {near:.3}");
        assert!(
            (near - 0.9389).abs() <= 0.04,
            "mass near peak {near:.4} vs closed form 0.9389"
        );
    }

    #[test]
    fn husimi_total_mass_matches_the_state_norm() {
        let h = 0.125;
        let op = free_box(1.6, 0.05);
        let u = coherent_state(&op, [0.2, -0.3], [0.7, 0.4], h);
        let grid = PhaseGrid {
            x_min: vec![-1.5, -1.5],
            x_max: vec![1.5, 1.5],
            x_step: 0.99 * h.sqrt() / 2.0,
            xi_min: vec![-1.5, -1.5],
            xi_max: vec![2.5, 2.5],
            xi_step: 0.99 * h.sqrt() / 2.0,
        };
        let measure = husimi(&op, &u, h, &grid).unwrap();
        let mass = measure.total_mass();
        assert!(
            (mass - measure.state_norm_sq).abs() <= 1e-3,
            "mass {mass:.6} vs norm {:.6}",
            measure.state_norm_sq
        );
    }

    #[test]
    fn two_coherent_bumps_split_the_mass() {
        let h = 0.125;
        let op = free_box(2.6, 0.05);
        let c1 = [0.9, 0.0];
        let c2 = [-0.9, 0.0];
        let k1 = [0.0, 0.9];
        let k2 = [0.0, -0.9];
        let g1 = coherent_state(&op, c1, k1, h);
        let g2 = coherent_state(&op, c2, k2, h);
        let mut values: Vec<Complex64> = g1
            .values
            .iter()
            .zip(&g2.values)
            .map(|(a, b)| a + b)
            .collect();
        let norm = values.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        for v in &mut values {
            *v /= norm;
        }
        let u = WaveState { values, t: 0.0 };
        let grid = PhaseGrid {
            x_min: vec![-2.2, -2.2],
            x_max: vec![2.2, 2.2],
            x_step: 0.99 * h.sqrt() / 2.0,
            xi_min: vec![-1.7, -1.7],
            xi_max: vec![1.7, 1.7],
            xi_step: 0.99 * h.sqrt() / 2.0,
        };
        let measure = husimi(&op, &u, h, &grid).unwrap();
        let r = 3.0 * h.sqrt();
        let m1 = measure.mass_within(&c1, &k1, r);
        let m2 = measure.mass_within(&c2, &k2, r);
        assert!((0.42..=0.52).contains(&m1), "first bump mass {m1:.3}");
        assert!((0.42..=0.52).contains(&m2), "second bump mass {m2:.3}");
        assert!((m1 - m2).abs() <= 0.05, "bump imbalance {m1:.3} vs {m2:.3}");
    }

    #[test]
    fn coarse_phase_grid_is_rejected() {
        let h = 0.125;
        let op = free_box(0.8, 0.05);
        let u = coherent_state(&op, [0.0, 0.0], [0.5, 0.0], h);
        let grid = PhaseGrid {
            x_min: vec![-0.5, -0.5],
            x_max: vec![0.5, 0.5],
            x_step: h.sqrt(),
            xi_min: vec![-1.0, -1.0],
            xi_max: vec![1.0, 1.0],
            xi_step: 0.99 * h.sqrt() / 2.0,
        };
        let err = husimi(&op, &u, h, &grid).unwrap_err();
        assert!(matches!(err, PhaseSpaceError::GridTooCoarse { .. }), "{err}");
    }

    #[test]
    fn husimi_mass_is_conserved_under_propagation() {
        let h = 0.125;
        let op = free_box(1.8, 0.05);
        let u0 = coherent_state(&op, [0.3, 0.0], [0.8, 0.0], h);
        let traj = propagate(&op, &u0, 0.02, 1e-3, 5).unwrap();
        let grid = PhaseGrid {
            x_min: vec![-1.7, -1.7],
            x_max: vec![1.7, 1.7],
            x_step: 0.99 * h.sqrt() / 2.0,
            xi_min: vec![-1.8, -1.8],
            xi_max: vec![2.6, 2.6],
            xi_step: 0.99 * h.sqrt() / 2.0,
        };
        let first = husimi(&op, &traj.states[0], h, &grid).unwrap().total_mass();
        let last = husimi(&op, traj.states.last().unwrap(), h, &grid)
            .unwrap()
            .total_mass();
        assert!(
            (first - last).abs() <= 2e-3,
            "husimi mass drifted from {first:.6} to {last:.6}"
        );
    }

    #[test]
    fn eigenmode_concentrates_on_the_characteristic_set() {
        let field = flat_field(1);
        let op = assemble(&field, &Obstacle::none(), &GridSpec::Interval { n: 200 }).unwrap();
        let spectral = SpectralData::compute(&op).unwrap();
        let mode = 30;
        let lambda = spectral.eigenvalues[mode];
        let h = 0.05;
        // Synthetic closed-form history exp(i lambda t) v.
        let dt = 1e-3;
        let states: Vec<WaveState> = (0..64)
            .map(|s| {
                let t = s as f64 * dt;
                let phase = Complex64::from_polar(1.0, lambda * t);
                WaveState {
                    values: (0..op.n())
                        .map(|i| phase * spectral.basis[(i, mode)])
                        .collect(),
                    t,
                }
            })
            .collect();
        let traj = Trajectory {
            states,
            dt,
            norm_drift: 0.0,
            step_drift: 0.0,
            energy_drift: 0.0,
        };
        let fraction =
            check_support_sigma(&op, &field, &traj, h, &TauGrid::default()).unwrap();
        assert!(fraction >= 0.9, "characteristic-set fraction {fraction:.3}");
    }

    #[test]
    fn zero_state_has_no_sigma_fraction() {
        let field = flat_field(1);
        let op = assemble(&field, &Obstacle::none(), &GridSpec::Interval { n: 64 }).unwrap();
        let zero = WaveState {
            values: vec![Complex64::new(0.0, 0.0); op.n()],
            t: 0.0,
        };
        let states: Vec<WaveState> = (0..10)
            .map(|s| WaveState {
                values: zero.values.clone(),
                t: s as f64 * 1e-3,
            })
            .collect();
        let traj = Trajectory {
            states,
            dt: 1e-3,
            norm_drift: 0.0,
            step_drift: 0.0,
            energy_drift: 0.0,
        };
        let err = check_support_sigma(&op, &field, &traj, 0.05, &TauGrid::default()).unwrap_err();
        assert!(matches!(err, PhaseSpaceError::ZeroData), "{err}");
    }

    #[test]
    fn free_wavepacket_sits_on_the_characteristic_set() {
        let field = flat_field(2);
        let h = 1.0 / 16.0;
        let op = assemble(
            &field,
            &Obstacle::none(),
            &GridSpec::Box2d {
                half_width: 2.8,
                dx: h / 2.0,
            },
        )
        .unwrap();
        let u0 = coherent_state(&op, [0.77, 0.0], [1.0, 0.0], h);
        let traj = chebyshev_trajectory(&op, &u0, 0.048, 25, 1e-10).unwrap();
        let fraction =
            check_support_sigma(&op, &field, &traj, h, &TauGrid::default()).unwrap();
        assert!(fraction >= 0.8, "characteristic-set fraction {fraction:.3}");
    }

    #[test]
    fn centroid_of_a_coherent_state_matches_its_parameters() {
        let field = flat_field(2);
        let h = 1.0 / 16.0;
        let op = free_box(1.5, h / 2.0);
        let center = [0.3, -0.2];
        let carrier = [0.8, 0.5];
        let u0 = coherent_state(&op, center, carrier, h);
        let flow = evolve_generalized(
            &field,
            None,
            &PhasePoint::new(0.0, vec![0.3, -0.2], vec![-0.8, -0.5]),
            1e-3,
            &GenFlowOpts::default(),
        )
        .unwrap();
        let track = track_centroid(&op, &u0, &flow, h, 1e-4, 1e-4).unwrap();
        let first = &track.samples[0];
        let dx = ((first.x[0] - center[0]).powi(2) + (first.x[1] - center[1]).powi(2)).sqrt();
        let dxi =
            ((first.xi[0] - carrier[0]).powi(2) + (first.xi[1] - carrier[1]).powi(2)).sqrt();
        assert!(dx <= h.sqrt() / 2.0, "position centroid off by {dx:.4}");
        assert!(dxi <= h.sqrt() / 2.0, "momentum centroid off by {dxi:.4}");
    }

    #[test]
    fn free_flight_centroid_follows_the_reversed_ray() {
        let field = flat_field(2);
        let h = 1.0 / 32.0;
        let op = assemble_fourth_order(
            &field,
            &Obstacle::none(),
            &GridSpec::Box2d {
                half_width: 2.8,
                dx: h / 2.0,
            },
        )
        .unwrap();
        let u0 = coherent_state(&op, [0.5, 0.0], [1.0, 0.0], h);
        let flow = evolve_generalized(
            &field,
            None,
            &PhasePoint::new(0.0, vec![0.5, 0.0], vec![-1.0, 0.0]),
            1.0,
            &GenFlowOpts::default(),
        )
        .unwrap();
        let t_final = 0.5 * h;
        let track = track_centroid(&op, &u0, &flow, h, t_final, t_final / 20.0).unwrap();
        assert!(
            track.max_error <= 0.1,
            "free-flight centroid error {:.4}",
            track.max_error
        );
    }

    #[test]
    fn reflected_centroid_stays_near_the_billiard_ray() {
        let field = flat_field(2);
        let obstacle = Obstacle::disk(1.0);
        let h = 1.0 / 16.0;
        let op = assemble_fourth_order(
            &field,
            &obstacle,
            &GridSpec::Box2d {
                half_width: 3.4,
                dx: h / 2.0,
            },
        )
        .unwrap();
        let u0 = WavepacketFamily::new([2.0, 0.0], [1.0, 0.0], vec![h])
            .initial_state(&op, &obstacle, h)
            .unwrap();
        let flow = evolve_generalized(
            &field,
            Some(&obstacle),
            &PhasePoint::new(0.0, vec![2.0, 0.0], vec![-1.0, 0.0]),
            1.2,
            &GenFlowOpts::default(),
        )
        .unwrap();
        assert_eq!(flow.reflection_count(), 1);
        let t_final = h;
        let track = track_centroid(&op, &u0, &flow, h, t_final, t_final / 40.0).unwrap();
        let settled = track.max_error_after(0.7 * t_final);
        assert!(
            settled <= 0.6,
            "post-bounce centroid error {settled:.4} (max {:.4})",
            track.max_error
        );
    }
}
