//! Flow-side commands: boundary classification sweeps, generalized
//! trajectory dumps, the randomized non-trapping verdict, and the
//! incoming-time machinery with its monitor bounds.

use std::path::Path;

use rayon::prelude::*;
use serde::Deserialize;

use kato_core::boundary::{classify, BoundaryClass, ClassifyOpts, CurveChart};
use kato_core::genflow::{
    check_nontrapping, evolve_generalized, find_incoming_time, monitor_f, EventKind,
    GenFlowOpts, RayVerdict, TrajectoryEnd,
};
use kato_core::hamflow::PhasePoint;

use crate::config::{ConfigError, LoadedConfig};
use crate::report::{cell, RunReport};
use crate::CliError;

fn class_label(class: &BoundaryClass) -> &'static str {
    match class {
        BoundaryClass::Elliptic => "elliptic",
        BoundaryClass::Hyperbolic { .. } => "hyperbolic",
        BoundaryClass::Diffractive => "diffractive",
        BoundaryClass::Gliding => "gliding",
        BoundaryClass::HigherOrder { .. } => "higher-order",
        BoundaryClass::Undetermined => "undetermined",
    }
}

const CLASS_LABELS: [&str; 6] = [
    "elliptic",
    "hyperbolic",
    "diffractive",
    "gliding",
    "higher-order",
    "undetermined",
];

fn default_n_theta() -> usize {
    48
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ClassifyAssert {
    /// Class labels that must occur at least once.
    #[serde(default)]
    pub expect: Vec<String>,
    /// Class labels that must not occur at all.
    #[serde(default)]
    pub forbid: Vec<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifySection {
    /// Time covariable on the boundary; energy-1 rays sit at `tau = -1`.
    pub tau: f64,
    /// Boundary parameter samples per component.
    #[serde(default = "default_n_theta")]
    pub n_theta: usize,
    /// Tangential momenta swept at each boundary point.
    pub xip_values: Vec<f64>,
    pub glancing_band: Option<f64>,
    pub curvature_band: Option<f64>,
    pub k_max: Option<usize>,
    #[serde(default)]
    pub assert: ClassifyAssert,
}

pub fn run_classify(
    loaded: LoadedConfig<ClassifySection>,
    report: &mut RunReport,
) -> Result<(), CliError> {
    let sec = &loaded.section;
    let scenario = loaded.scenario()?;
    if !scenario.obstacle.has_boundary() {
        return Err(ConfigError::Invalid(
            "classify needs a scenario with an obstacle".to_string(),
        )
        .into());
    }
    if sec.n_theta == 0 || sec.xip_values.is_empty() {
        return Err(ConfigError::Invalid(
            "classify needs n_theta > 0 and at least one xip value".to_string(),
        )
        .into());
    }
    for label in sec.assert.expect.iter().chain(&sec.assert.forbid) {
        if !CLASS_LABELS.contains(&label.as_str()) {
            return Err(ConfigError::Invalid(format!(
                "unknown class label {label:?} in assertions"
            ))
            .into());
        }
    }
    let mut opts = ClassifyOpts::default();
    if let Some(b) = sec.glancing_band {
        opts.glancing_band = b;
    }
    if let Some(b) = sec.curvature_band {
        opts.curvature_band = b;
    }
    if let Some(k) = sec.k_max {
        opts.k_max = k;
    }

    let charts: Vec<CurveChart> = scenario
        .obstacle
        .components()
        .into_iter()
        .map(CurveChart::new)
        .collect();
    let mut jobs_list = Vec::new();
    for (ci, _) in charts.iter().enumerate() {
        for it in 0..sec.n_theta {
            let th = 2.0 * std::f64::consts::PI * it as f64 / sec.n_theta as f64;
            for &xip in &sec.xip_values {
                jobs_list.push((ci, th, xip));
            }
        }
    }
    let rows: Vec<(usize, f64, f64, BoundaryClass)> = jobs_list
        .par_iter()
        .map(|&(ci, th, xip)| (ci, th, xip, classify(&charts[ci], th, xip, sec.tau, &opts)))
        .collect();

    let mut counts = std::collections::BTreeMap::new();
    let mut csv = Vec::with_capacity(rows.len());
    for (ci, th, xip, class) in &rows {
        let label = class_label(class);
        *counts.entry(label).or_insert(0usize) += 1;
        let detail = match class {
            BoundaryClass::Hyperbolic { xi1_plus } => cell(*xi1_plus),
            BoundaryClass::HigherOrder { k } => format!("{k}"),
            _ => String::new(),
        };
        csv.push(vec![
            format!("{ci}"),
            cell(*th),
            cell(*xip),
            cell(sec.tau),
            label.to_string(),
            detail,
        ]);
    }
    report.write_csv("points.csv", "component,theta,xip,tau,class,detail", &csv)?;
    report.write_json("counts.json", &counts)?;

    report.line(format!(
        "classified {} boundary points over {} components",
        rows.len(),
        charts.len()
    ));
    for (label, count) in &counts {
        report.line(format!("  {label}: {count}"));
    }
    for label in &sec.assert.expect {
        let n = counts.get(label.as_str()).copied().unwrap_or(0);
        report.check(
            &format!("expect {label}"),
            n > 0,
            format!("{n} occurrences"),
        );
    }
    for label in &sec.assert.forbid {
        let n = counts.get(label.as_str()).copied().unwrap_or(0);
        report.check(
            &format!("forbid {label}"),
            n == 0,
            format!("{n} occurrences"),
        );
    }
    Ok(())
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct FlowAssert {
    pub min_reflections: Option<usize>,
    pub max_reflections: Option<usize>,
    /// Required stop reason: "time" or "radius".
    pub require_end: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSection {
    pub x0: Vec<f64>,
    pub xi0: Vec<f64>,
    /// Flow time budget.
    pub t_max: f64,
    /// Dump spacing along the trajectory.
    pub sample_dt: f64,
    pub stop_radius: Option<f64>,
    pub max_events: Option<usize>,
    #[serde(default)]
    pub assert: FlowAssert,
}

fn event_label(kind: &EventKind) -> String {
    match kind {
        EventKind::Reflection => "reflection".to_string(),
        EventKind::DiffractivePass => "diffractive-pass".to_string(),
        EventKind::GlidingArc { .. } => "gliding-arc".to_string(),
        EventKind::HigherOrderPass { k } => format!("higher-order-pass-{k}"),
    }
}

pub fn run_flow(
    loaded: LoadedConfig<FlowSection>,
    report: &mut RunReport,
) -> Result<(), CliError> {
    let sec = &loaded.section;
    let scenario = loaded.scenario()?;
    let dim = scenario.field.dim;
    if sec.x0.len() != dim || sec.xi0.len() != dim {
        return Err(ConfigError::Invalid(format!(
            "start point must carry {dim} coordinates and momenta"
        ))
        .into());
    }
    if !(sec.t_max > 0.0 && sec.sample_dt > 0.0) {
        return Err(
            ConfigError::Invalid("t_max and sample_dt must be positive".to_string()).into(),
        );
    }
    let mut opts = GenFlowOpts::default();
    opts.stop_radius = sec.stop_radius;
    if let Some(m) = sec.max_events {
        opts.max_events = m;
    }
    let start = PhasePoint::new(0.0, sec.x0.clone(), sec.xi0.clone());
    let traj = evolve_generalized(
        &scenario.field,
        scenario.obstacle_ref(),
        &start,
        sec.t_max,
        &opts,
    )?;

    let t_end = traj.t_end();
    let n = (t_end / sec.sample_dt).floor() as usize;
    let mut rows = Vec::with_capacity(n + 2);
    for i in 0..=n {
        let t = i as f64 * sec.sample_dt;
        rows.push(sample_row(&traj.sample(t)));
    }
    rows.push(sample_row(&traj.sample(t_end)));
    report.write_csv("trajectory.csv", "t,x1,x2,xi1,xi2", &rows)?;

    let events: Vec<Vec<String>> = traj
        .events
        .iter()
        .map(|e| {
            vec![
                cell(e.t),
                event_label(&e.kind),
                class_label(&e.class).to_string(),
                cell(e.point_in.x[0]),
                cell(e.point_in.x.get(1).copied().unwrap_or(0.0)),
                cell(e.point_out.xi[0]),
                cell(e.point_out.xi.get(1).copied().unwrap_or(0.0)),
            ]
        })
        .collect();
    report.write_csv("events.csv", "t,kind,class,x1,x2,xi1_out,xi2_out", &events)?;

    let reflections = traj.reflection_count();
    let end_label = match traj.end {
        TrajectoryEnd::TimeExhausted => "time",
        TrajectoryEnd::RadiusReached { .. } => "radius",
    };
    report.line(format!(
        "flow ran to t = {t_end:.6} ({end_label}), {} events, {reflections} reflections",
        traj.events.len()
    ));
    if let Some(m) = sec.assert.min_reflections {
        report.check(
            "min reflections",
            reflections >= m,
            format!("{reflections} >= {m}"),
        );
    }
    if let Some(m) = sec.assert.max_reflections {
        report.check(
            "max reflections",
            reflections <= m,
            format!("{reflections} <= {m}"),
        );
    }
    if let Some(want) = &sec.assert.require_end {
        report.check(
            "end condition",
            want == end_label,
            format!("{end_label} == {want}"),
        );
    }
    Ok(())
}

fn sample_row(p: &PhasePoint) -> Vec<String> {
    vec![
        cell(p.t),
        cell(p.x[0]),
        cell(p.x.get(1).copied().unwrap_or(0.0)),
        cell(p.xi[0]),
        cell(p.xi.get(1).copied().unwrap_or(0.0)),
    ]
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct NontrapAssert {
    /// "all-escaped" or "any-trapped".
    pub require: Option<String>,
    /// With "any-trapped": least reflection count of a trapped ray.
    pub min_trapped_reflections: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NontrapSection {
    pub n_rays: usize,
    pub t_max: f64,
    pub exit_radius: f64,
    pub seed: u64,
    #[serde(default)]
    pub assert: NontrapAssert,
}

pub fn run_nontrap(
    loaded: LoadedConfig<NontrapSection>,
    report: &mut RunReport,
) -> Result<(), CliError> {
    let sec = &loaded.section;
    let scenario = loaded.scenario()?;
    if sec.n_rays == 0 || !(sec.t_max > 0.0) {
        return Err(
            ConfigError::Invalid("n_rays and t_max must be positive".to_string()).into(),
        );
    }
    let r0 = scenario
        .obstacle_ref()
        .map(|o| o.bounding_radius())
        .unwrap_or(1.0);
    if sec.exit_radius < 3.0 * r0 {
        return Err(ConfigError::Invalid(format!(
            "exit_radius {} must be at least three bounding radii ({})",
            sec.exit_radius,
            3.0 * r0
        ))
        .into());
    }
    let outcome = check_nontrapping(
        &scenario.field,
        scenario.obstacle_ref(),
        sec.n_rays,
        sec.t_max,
        sec.exit_radius,
        sec.seed,
        &GenFlowOpts::default(),
    )?;

    let mut rows = Vec::with_capacity(outcome.rays.len());
    let mut escaped = 0usize;
    let mut best_trapped = 0usize;
    for (i, (start, verdict)) in outcome.rays.iter().enumerate() {
        let (label, tf, tb, refl) = match verdict {
            RayVerdict::Escaped {
                t_forward,
                t_backward,
            } => {
                escaped += 1;
                ("escaped", *t_forward, *t_backward, 0)
            }
            RayVerdict::Trapped { reflections } => {
                best_trapped = best_trapped.max(*reflections);
                ("trapped", f64::NAN, f64::NAN, *reflections)
            }
        };
        rows.push(vec![
            format!("{i}"),
            cell(start.x[0]),
            cell(start.x[1]),
            cell(start.xi[0]),
            cell(start.xi[1]),
            label.to_string(),
            cell(tf),
            cell(tb),
            format!("{refl}"),
        ]);
    }
    report.write_csv(
        "rays.csv",
        "ray,x1,x2,xi1,xi2,verdict,t_forward,t_backward,reflections",
        &rows,
    )?;
    report.line(format!(
        "{escaped}/{} rays escaped to radius {}",
        sec.n_rays, sec.exit_radius
    ));

    match sec.assert.require.as_deref() {
        None => {}
        Some("all-escaped") => {
            report.check(
                "all escaped",
                outcome.all_escaped,
                format!("{escaped}/{}", sec.n_rays),
            );
        }
        Some("any-trapped") => {
            let floor = sec.assert.min_trapped_reflections.unwrap_or(1);
            report.check(
                "trapped ray",
                best_trapped >= floor,
                format!("max trapped reflections {best_trapped} >= {floor}"),
            );
        }
        Some(other) => {
            return Err(ConfigError::Invalid(format!(
                "unknown nontrap requirement {other:?}"
            ))
            .into());
        }
    }
    Ok(())
}

fn default_monitor_samples() -> usize {
    400
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct IncomingAssert {
    /// Every start must produce an incoming witness.
    #[serde(default)]
    pub require_found: bool,
    /// Floor for both witness margins.
    pub min_margin: Option<f64>,
    /// Floor for `dF1/ds / |xi0|^2` over the backward regime.
    pub min_radial_rate: Option<f64>,
    /// Ceiling for `dF2/ds / (delta |xi0|^2)` over the backward regime.
    pub max_barrier_rate: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IncomingSection {
    /// Incoming aperture as a direction cosine.
    pub delta: f64,
    /// Backward time budget.
    pub t_back_max: f64,
    /// Start rows `[x1, x2, xi1, xi2]`.
    pub starts: Vec<Vec<f64>>,
    #[serde(default = "default_monitor_samples")]
    pub monitor_samples: usize,
    #[serde(default)]
    pub assert: IncomingAssert,
}

struct IncomingRow {
    found: bool,
    s1: f64,
    radius_margin: f64,
    direction_margin: f64,
    radial_rate: f64,
    barrier_rate: f64,
}

pub fn run_incoming(
    loaded: LoadedConfig<IncomingSection>,
    report: &mut RunReport,
) -> Result<(), CliError> {
    let sec = &loaded.section;
    let scenario = loaded.scenario()?;
    let dim = scenario.field.dim;
    if !(sec.delta > 0.0 && sec.delta < 1.0) {
        return Err(ConfigError::Invalid(format!(
            "delta must be a direction cosine in (0, 1), got {}",
            sec.delta
        ))
        .into());
    }
    if sec.starts.is_empty() {
        return Err(ConfigError::Invalid("no starts given".to_string()).into());
    }
    for s in &sec.starts {
        if s.len() != 2 * dim {
            return Err(ConfigError::Invalid(format!(
                "each start carries {} numbers (position then momentum)",
                2 * dim
            ))
            .into());
        }
    }
    let opts = GenFlowOpts::default();
    let results: Vec<Result<IncomingRow, CliError>> = sec
        .starts
        .par_iter()
        .map(|s| {
            let x = s[..dim].to_vec();
            let xi = s[dim..].to_vec();
            let xi_sq: f64 = xi.iter().map(|v| v * v).sum();
            let start = PhasePoint::new(0.0, x.clone(), xi.clone());
            let witness = find_incoming_time(
                &scenario.field,
                scenario.obstacle_ref(),
                &start,
                sec.delta,
                sec.t_back_max,
                &opts,
            )?;
            // The backward regime of an incoming start is the outgoing ray
            // with flipped momentum; monitoring it samples the same rates.
            let flipped = PhasePoint::new(0.0, x, xi.iter().map(|v| -v).collect());
            let back = evolve_generalized(
                &scenario.field,
                scenario.obstacle_ref(),
                &flipped,
                sec.t_back_max,
                &opts,
            )?;
            let mon = monitor_f(&scenario.field, &back, sec.delta, sec.monitor_samples);
            Ok(match witness {
                Some(w) => IncomingRow {
                    found: true,
                    s1: w.s1,
                    radius_margin: w.radius_margin,
                    direction_margin: w.direction_margin,
                    radial_rate: mon.min_df1 / xi_sq,
                    barrier_rate: mon.max_df2 / (sec.delta * xi_sq),
                },
                None => IncomingRow {
                    found: false,
                    s1: f64::NAN,
                    radius_margin: f64::NAN,
                    direction_margin: f64::NAN,
                    radial_rate: mon.min_df1 / xi_sq,
                    barrier_rate: mon.max_df2 / (sec.delta * xi_sq),
                },
            })
        })
        .collect();

    let mut rows = Vec::with_capacity(results.len());
    let mut found_all = true;
    let mut min_margin = f64::INFINITY;
    let mut min_radial = f64::INFINITY;
    let mut max_barrier = f64::NEG_INFINITY;
    for (i, r) in results.into_iter().enumerate() {
        let row = r?;
        found_all &= row.found;
        if row.found {
            min_margin = min_margin.min(row.radius_margin.min(row.direction_margin));
        }
        min_radial = min_radial.min(row.radial_rate);
        max_barrier = max_barrier.max(row.barrier_rate);
        rows.push(vec![
            format!("{i}"),
            if row.found { "yes" } else { "no" }.to_string(),
            cell(row.s1),
            cell(row.radius_margin),
            cell(row.direction_margin),
            cell(row.radial_rate),
            cell(row.barrier_rate),
        ]);
    }
    report.write_csv(
        "witnesses.csv",
        "start,found,s1,radius_margin,direction_margin,radial_rate,barrier_rate",
        &rows,
    )?;
    report.line(format!(
        "{} starts; min margin {min_margin:.3e}, radial rate >= {min_radial:.3}, barrier rate <= {max_barrier:.3}",
        sec.starts.len()
    ));

    if sec.assert.require_found {
        report.check("witness found", found_all, "every start".to_string());
    }
    if let Some(floor) = sec.assert.min_margin {
        report.check_at_least("witness margins", min_margin, floor);
    }
    if let Some(floor) = sec.assert.min_radial_rate {
        report.check_at_least("radial rate", min_radial, floor);
    }
    if let Some(ceil) = sec.assert.max_barrier_rate {
        report.check_at_most("barrier rate", max_barrier, ceil);
    }
    Ok(())
}
