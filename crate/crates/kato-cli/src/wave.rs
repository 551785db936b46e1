//! Wave-side commands: the filtered smoothing scan across scales, the
//! boundary-flux diagnostic, and the phase-space measurements (support
//! fraction on the characteristic set, Husimi dumps, centroid tracking).

use serde::Deserialize;

use kato_core::discrete::{assemble, assemble_fourth_order, DiscreteOperator, GridSpec};
use kato_core::evolve::{
    boundary_flux, filtered_smoothing_scan, propagate, ScanOpts, WavepacketFamily,
};
use kato_core::genflow::{evolve_generalized, GenFlowOpts};
use kato_core::hamflow::PhasePoint;
use kato_core::phasespace::{
    chebyshev_trajectory, check_support_sigma, husimi, track_centroid, PhaseGrid, TauGrid,
};

use crate::config::{ConfigError, LoadedConfig};
use crate::report::{cell, RunReport};
use crate::scenario::{CutoffConfig, Scenario};
use crate::CliError;

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct SmoothAssert {
    /// Ceiling for `max_h Q(h) / min_h Q(h)` of the band-scaled quotient.
    pub max_growth: Option<f64>,
    /// Window for the quarter-power over band-scaled form ratio.
    pub form_window: Option<[f64; 2]>,
    /// Ceiling for the end-of-window wide-cutoff mass fraction.
    pub max_tail: Option<f64>,
    /// Ceiling for the end-of-window wall mass fraction.
    pub max_wall: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmoothSection {
    pub center: [f64; 2],
    pub direction: [f64; 2],
    pub scales: Vec<f64>,
    /// Inner spatial cutoff of the quarter-power form.
    pub chi0: CutoffConfig,
    /// Wider spatial cutoff of the band-scaled form.
    pub chi1: CutoffConfig,
    /// Spectral band filter applied as `theta(h^2 P)`.
    pub theta: CutoffConfig,
    pub t_final: Option<f64>,
    pub window_scales: Option<f64>,
    pub points_per_scale: Option<f64>,
    pub snapshots: Option<usize>,
    pub chebyshev_tol: Option<f64>,
    pub node_cap: Option<usize>,
    #[serde(default)]
    pub assert: SmoothAssert,
}

pub fn run_smooth_scan(
    loaded: LoadedConfig<SmoothSection>,
    report: &mut RunReport,
) -> Result<(), CliError> {
    let sec = &loaded.section;
    let scenario = loaded.scenario()?;
    if sec.scales.is_empty() || sec.scales.iter().any(|&h| !(h > 0.0)) {
        return Err(ConfigError::Invalid("scales must be positive".to_string()).into());
    }
    let family = WavepacketFamily::new(sec.center, sec.direction, sec.scales.clone());
    let chi0 = sec.chi0.build()?;
    let chi1 = sec.chi1.build()?;
    let theta = sec.theta.build()?;
    let mut opts = ScanOpts::default();
    if let Some(v) = sec.t_final {
        opts.t_final = v;
    }
    if let Some(v) = sec.window_scales {
        opts.window_scales = v;
    }
    if let Some(v) = sec.points_per_scale {
        opts.points_per_scale = v;
    }
    if let Some(v) = sec.snapshots {
        opts.snapshots = v;
    }
    if let Some(v) = sec.chebyshev_tol {
        opts.chebyshev_tol = v;
    }
    if let Some(v) = sec.node_cap {
        opts.node_cap = v;
    }

    let points = filtered_smoothing_scan(
        &scenario.field,
        &scenario.obstacle,
        &family,
        &chi0,
        &chi1,
        &theta,
        &opts,
    )?;

    let rows: Vec<Vec<String>> = points
        .iter()
        .map(|p| {
            vec![
                cell(p.h),
                format!("{}", p.grid_nodes),
                cell(p.box_half_width),
                cell(p.t_window),
                cell(p.quotient_quarter_power),
                cell(p.quotient_band_scaled),
                cell(p.form_ratio),
                cell(p.tail_fraction),
                cell(p.wall_fraction),
            ]
        })
        .collect();
    report.write_csv(
        "scan.csv",
        "h,nodes,half_width,t_window,quarter_power,band_scaled,form_ratio,tail,wall",
        &rows,
    )?;
    report.write_json("points.json", &points)?;

    let q_max = points
        .iter()
        .map(|p| p.quotient_band_scaled)
        .fold(f64::NEG_INFINITY, f64::max);
    let q_min = points
        .iter()
        .map(|p| p.quotient_band_scaled)
        .fold(f64::INFINITY, f64::min);
    let growth = if q_min > 0.0 { q_max / q_min } else { f64::INFINITY };
    let tail = points.iter().map(|p| p.tail_fraction).fold(0.0, f64::max);
    let wall = points.iter().map(|p| p.wall_fraction).fold(0.0, f64::max);
    for p in &points {
        report.line(format!(
            "h = {:.6}: Q = {:.4} on {} nodes (window {:.4}, form ratio {:.3})",
            p.h, p.quotient_band_scaled, p.grid_nodes, p.t_window, p.form_ratio
        ));
    }
    report.line(format!("quotient spread max/min = {growth:.4}"));

    if let Some(ceil) = sec.assert.max_growth {
        report.check_at_most("quotient growth", growth, ceil);
    }
    if let Some([lo, hi]) = sec.assert.form_window {
        let ok = points
            .iter()
            .all(|p| p.form_ratio >= lo && p.form_ratio <= hi);
        report.check(
            "form ratio",
            ok,
            format!("all scales within [{lo}, {hi}]"),
        );
    }
    if let Some(ceil) = sec.assert.max_tail {
        report.check_at_most("tail fraction", tail, ceil);
    }
    if let Some(ceil) = sec.assert.max_wall {
        report.check_at_most("wall fraction", wall, ceil);
    }
    Ok(())
}

/// Grid and packet shared by `flux` and `measure`.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PacketGrid {
    /// Packet scale; also the semiclassical unit of the measurement.
    pub h: f64,
    pub half_width: f64,
    /// Grid spacing; defaults to `h / 2`.
    pub dx: Option<f64>,
    /// Use the wide-stencil interior assembly.
    #[serde(default)]
    pub fourth_order: bool,
    pub center: [f64; 2],
    pub direction: [f64; 2],
}

impl PacketGrid {
    fn assemble(
        &self,
        scenario: &Scenario,
    ) -> Result<(DiscreteOperator, kato_core::evolve::WaveState), CliError> {
        if !(self.h > 0.0 && self.half_width > 0.0) {
            return Err(
                ConfigError::Invalid("h and half_width must be positive".to_string()).into(),
            );
        }
        let dx = self.dx.unwrap_or(self.h / 2.0);
        if !(dx > 0.0 && dx < self.half_width) {
            return Err(ConfigError::Invalid(format!(
                "grid spacing {dx} does not fit the box"
            ))
            .into());
        }
        let spec = GridSpec::Box2d {
            half_width: self.half_width,
            dx,
        };
        let op = if self.fourth_order {
            assemble_fourth_order(&scenario.field, &scenario.obstacle, &spec)?
        } else {
            assemble(&scenario.field, &scenario.obstacle, &spec)?
        };
        let family = WavepacketFamily::new(self.center, self.direction, vec![self.h]);
        let u0 = family.initial_state(&op, &scenario.obstacle, self.h)?;
        Ok((op, u0))
    }
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct FluxAssert {
    /// Ceiling for the flux over interior-norm ratio.
    pub max_ratio: Option<f64>,
    /// Ceiling for the propagation norm drift.
    pub max_norm_drift: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FluxSection {
    pub grid: PacketGrid,
    pub t_final: f64,
    pub dt: f64,
    /// Snapshot stride of the stored trajectory.
    pub stride: Option<usize>,
    /// Spatial cutoff weighting the trace.
    pub chi: CutoffConfig,
    #[serde(default)]
    pub assert: FluxAssert,
}

pub fn run_flux(
    loaded: LoadedConfig<FluxSection>,
    report: &mut RunReport,
) -> Result<(), CliError> {
    let sec = &loaded.section;
    let scenario = loaded.scenario()?;
    if !(sec.t_final > 0.0 && sec.dt > 0.0 && sec.dt <= sec.t_final) {
        return Err(
            ConfigError::Invalid("need 0 < dt <= t_final for the flux window".to_string()).into(),
        );
    }
    let chi = sec.chi.build()?;
    let (op, u0) = sec.grid.assemble(&scenario)?;
    let traj = propagate(&op, &u0, sec.t_final, sec.dt, sec.stride.unwrap_or(1))?;
    let flux = boundary_flux(&op, &traj, &chi, sec.grid.h)?;

    report.write_json(
        "flux.json",
        &serde_json::json!({
            "flux": flux.flux,
            "interior": flux.interior,
            "ratio": flux.ratio,
            "norm_drift": traj.norm_drift,
            "snapshots": traj.states.len(),
            "nodes": op.n(),
        }),
    )?;
    report.line(format!(
        "flux {:.6e} against interior {:.6e} (ratio {:.4}) over {} snapshots",
        flux.flux,
        flux.interior,
        flux.ratio,
        traj.states.len()
    ));
    if let Some(ceil) = sec.assert.max_ratio {
        report.check_at_most("flux ratio", flux.ratio, ceil);
    }
    if let Some(ceil) = sec.assert.max_norm_drift {
        report.check_at_most("norm drift", traj.norm_drift, ceil);
    }
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupportSection {
    pub t_final: f64,
    pub snapshots: usize,
    pub chebyshev_tol: Option<f64>,
    pub c_band: Option<f64>,
    pub pad: Option<usize>,
    pub x_stride_scale: Option<f64>,
    pub xi_step_scale: Option<f64>,
    pub amp_floor: Option<f64>,
    pub mass_floor: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CentroidSection {
    /// Ray start; for a packet with carrier `xi0` the matching billiard
    /// ray runs through `(x0, -xi0)`.
    pub x0: Vec<f64>,
    pub xi0: Vec<f64>,
    pub t_final: f64,
    pub dt: f64,
    /// Fraction of the window to skip before reading the tracking error.
    #[serde(default)]
    pub settle_fraction: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HusimiSection {
    pub x_min: Vec<f64>,
    pub x_max: Vec<f64>,
    pub x_step: f64,
    pub xi_min: Vec<f64>,
    pub xi_max: Vec<f64>,
    pub xi_step: f64,
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct MeasureAssert {
    /// Floor for the characteristic-set mass fraction.
    pub min_sigma_fraction: Option<f64>,
    /// Ceiling for the centroid tracking error after settling.
    pub max_centroid_error: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasureSection {
    pub grid: PacketGrid,
    pub support: Option<SupportSection>,
    pub centroid: Option<CentroidSection>,
    pub husimi: Option<HusimiSection>,
    #[serde(default)]
    pub assert: MeasureAssert,
}

pub fn run_measure(
    loaded: LoadedConfig<MeasureSection>,
    report: &mut RunReport,
) -> Result<(), CliError> {
    let sec = &loaded.section;
    let scenario = loaded.scenario()?;
    if sec.support.is_none() && sec.centroid.is_none() && sec.husimi.is_none() {
        return Err(ConfigError::Invalid(
            "measure needs at least one of [measure.support], [measure.centroid], [measure.husimi]"
                .to_string(),
        )
        .into());
    }
    let h = sec.grid.h;
    let (op, u0) = sec.grid.assemble(&scenario)?;
    report.line(format!("grid of {} nodes at h = {h}", op.n()));

    if let Some(hs) = &sec.husimi {
        let grid = PhaseGrid {
            x_min: hs.x_min.clone(),
            x_max: hs.x_max.clone(),
            x_step: hs.x_step,
            xi_min: hs.xi_min.clone(),
            xi_max: hs.xi_max.clone(),
            xi_step: hs.xi_step,
        };
        let measure = husimi(&op, &u0, h, &grid)?;
        let mut bytes = Vec::with_capacity(8 * measure.density.len());
        for v in &measure.density {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        report.write_binary("density.bin", &bytes)?;
        report.write_json(
            "density.json",
            &serde_json::json!({
                "h": measure.h,
                "mass": measure.total_mass(),
                "state_norm_sq": measure.state_norm_sq,
                "x_axes": measure.x_axes,
                "xi_axes": measure.xi_axes,
                "x_cell": measure.x_cell,
                "xi_cell": measure.xi_cell,
                "layout": "position-major float64 little-endian",
            }),
        )?;
        report.line(format!(
            "Husimi dump: {} cells, mass {:.6}",
            measure.density.len(),
            measure.total_mass()
        ));
    }

    if let Some(sup) = &sec.support {
        if sup.snapshots < 8 {
            return Err(ConfigError::Invalid(
                "support analysis needs at least 8 snapshots".to_string(),
            )
            .into());
        }
        let traj = chebyshev_trajectory(
            &op,
            &u0,
            sup.t_final,
            sup.snapshots,
            sup.chebyshev_tol.unwrap_or(1e-9),
        )?;
        let mut tau = TauGrid::default();
        if let Some(v) = sup.c_band {
            tau.c_band = v;
        }
        if let Some(v) = sup.pad {
            tau.pad = v;
        }
        if let Some(v) = sup.x_stride_scale {
            tau.x_stride_scale = v;
        }
        if let Some(v) = sup.xi_step_scale {
            tau.xi_step_scale = v;
        }
        if let Some(v) = sup.amp_floor {
            tau.amp_floor = v;
        }
        if let Some(v) = sup.mass_floor {
            tau.mass_floor = v;
        }
        let fraction = check_support_sigma(&op, &scenario.field, &traj, h, &tau)?;
        report.write_json(
            "sigma.json",
            &serde_json::json!({
                "fraction": fraction,
                "snapshots": sup.snapshots,
                "t_final": sup.t_final,
                "c_band": tau.c_band,
            }),
        )?;
        report.line(format!(
            "characteristic-set mass fraction {fraction:.4} over {} snapshots",
            sup.snapshots
        ));
        if let Some(floor) = sec.assert.min_sigma_fraction {
            report.check_at_least("sigma fraction", fraction, floor);
        }
    }

    if let Some(cen) = &sec.centroid {
        let dim = scenario.field.dim;
        if cen.x0.len() != dim || cen.xi0.len() != dim {
            return Err(ConfigError::Invalid(format!(
                "centroid ray start must carry {dim} coordinates and momenta"
            ))
            .into());
        }
        if !(cen.t_final > 0.0 && cen.dt > 0.0) {
            return Err(
                ConfigError::Invalid("centroid window needs t_final, dt > 0".to_string()).into(),
            );
        }
        if !(0.0..1.0).contains(&cen.settle_fraction) {
            return Err(ConfigError::Invalid(
                "settle_fraction must lie in [0, 1)".to_string(),
            )
            .into());
        }
        let start = PhasePoint::new(0.0, cen.x0.clone(), cen.xi0.clone());
        let flow = evolve_generalized(
            &scenario.field,
            scenario.obstacle_ref(),
            &start,
            1.05 * cen.t_final / h,
            &GenFlowOpts::default(),
        )?;
        let track = track_centroid(&op, &u0, &flow, h, cen.t_final, cen.dt)?;
        let rows: Vec<Vec<String>> = track
            .samples
            .iter()
            .map(|s| {
                vec![
                    cell(s.t),
                    cell(s.x[0]),
                    cell(s.x.get(1).copied().unwrap_or(0.0)),
                    cell(s.xi[0]),
                    cell(s.xi.get(1).copied().unwrap_or(0.0)),
                    cell(s.ray_x[0]),
                    cell(s.ray_x.get(1).copied().unwrap_or(0.0)),
                    cell(s.ray_xi[0]),
                    cell(s.ray_xi.get(1).copied().unwrap_or(0.0)),
                    cell(s.error),
                ]
            })
            .collect();
        report.write_csv(
            "centroid.csv",
            "t,xbar1,xbar2,xibar1,xibar2,ray_x1,ray_x2,ray_xi1,ray_xi2,error",
            &rows,
        )?;
        let error = track.max_error_after(cen.settle_fraction * cen.t_final);
        report.line(format!(
            "centroid tracked over {} snapshots; error {error:.4} after settling (peak {:.4})",
            track.samples.len(),
            track.max_error
        ));
        if let Some(ceil) = sec.assert.max_centroid_error {
            report.check_at_most("centroid error", error, ceil);
        }
    }
    Ok(())
}
