//! Generalized bicharacteristic flow through boundary interactions.
//!
//! Interior Hamiltonian arcs are concatenated across boundary events:
//! transversal hits reflect the normal momentum, tangential hits at convex
//! points pass through, concave tangencies glide along the boundary under
//! the tangential Hamiltonian until the glancing condition breaks, and
//! higher-order tangencies are resolved by probing a microstep ahead.
//! On top of the flow sit the non-trapping verdict, the incoming-time
//! search, and the escape-monitor used by the resolvent machinery.

use crate::boundary::{classify, Atlas, BoundaryClass, BoundaryError, ChartPoint, ClassifyOpts};
use crate::hamflow::{
    flow_interior, refine_crossing, ArcEnd, FlowError, FlowOpts, InteriorArc, PhasePoint,
};
use crate::symbols::{Obstacle, SymbolField};
use crate::util::norm;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GenFlowError {
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Boundary(#[from] BoundaryError),
    #[error("boundary hit classified {class:?} at t = {t}; not reachable by a real ray")]
    UnexpectedClass { class: BoundaryClass, t: f64 },
    #[error("event limit {limit} reached at t = {t}")]
    EventLimit { limit: usize, t: f64 },
    #[error("higher-order tangency could not be resolved at t = {t}")]
    TangencyUnresolved { t: f64 },
}

/// What happened at one boundary interaction.
#[derive(Debug, Clone, PartialEq)]
pub enum EventKind {
    Reflection,
    DiffractivePass,
    /// Gliding arc along the boundary ending at `t_end`.
    GlidingArc { t_end: f64 },
    HigherOrderPass { k: usize },
}

/// Record of one boundary event with ambient in and out states.
#[derive(Debug, Clone)]
pub struct EventRecord {
    pub t: f64,
    pub kind: EventKind,
    pub chart: usize,
    pub class: BoundaryClass,
    pub point_in: PhasePoint,
    pub point_out: PhasePoint,
}

#[derive(Debug, Clone)]
struct GlidingNodes {
    chart: usize,
    /// Nodes `(t, xp, xip)` along the boundary integral curve.
    nodes: Vec<(f64, f64, f64)>,
}

enum Segment {
    Interior(InteriorArc),
    Gliding(GlidingNodes),
}

/// Options of the generalized flow.
#[derive(Debug, Clone)]
pub struct GenFlowOpts {
    pub flow: FlowOpts,
    pub classify: ClassifyOpts,
    /// Inward nudge after a tangential pass, relative to the bounding radius.
    pub penetration_factor: f64,
    /// Fixed step of the boundary (gliding) integrator.
    pub gliding_dt: f64,
    pub max_events: usize,
    /// Stop once `|x|` exceeds this radius.
    pub stop_radius: Option<f64>,
}

impl Default for GenFlowOpts {
    fn default() -> Self {
        GenFlowOpts {
            flow: FlowOpts::default(),
            classify: ClassifyOpts::default(),
            penetration_factor: 1e-9,
            gliding_dt: 1e-3,
            max_events: 200_000,
            stop_radius: None,
        }
    }
}

/// Why the generalized trajectory stopped.
#[derive(Debug, Clone, PartialEq)]
pub enum TrajectoryEnd {
    TimeExhausted,
    RadiusReached { radius: f64 },
}

/// Piecewise trajectory of the generalized flow.
pub struct GeneralizedTrajectory {
    pub start: PhasePoint,
    pub end_point: PhasePoint,
    pub end: TrajectoryEnd,
    pub events: Vec<EventRecord>,
    segments: Vec<Segment>,
    atlas: Option<Arc<Atlas>>,
}

impl GeneralizedTrajectory {
    pub fn t_end(&self) -> f64 {
        self.end_point.t
    }

    pub fn reflection_count(&self) -> usize {
        self.events
            .iter()
            .filter(|e| e.kind == EventKind::Reflection)
            .count()
    }

    /// Samples the trajectory at time `t`, clamped to its time range.
    pub fn sample(&self, t: f64) -> PhasePoint {
        if t <= self.start.t {
            return self.start.clone();
        }
        if t >= self.end_point.t {
            return self.end_point.clone();
        }
        for seg in &self.segments {
            match seg {
                Segment::Interior(arc) => {
                    if t <= arc.t_end() {
                        return arc.sample(t);
                    }
                }
                Segment::Gliding(g) => {
                    let t_last = g.nodes.last().unwrap().0;
                    if t <= t_last {
                        let atlas = self.atlas.as_ref().expect("gliding needs an atlas");
                        let idx = g.nodes.partition_point(|n| n.0 < t).max(1);
                        let (t0, xp0, xip0) = g.nodes[idx - 1];
                        let (t1, xp1, xip1) = g.nodes[idx.min(g.nodes.len() - 1)];
                        let w = if t1 > t0 { (t - t0) / (t1 - t0) } else { 0.0 };
                        let cp = ChartPoint {
                            x1: 0.0,
                            xp: xp0 + w * (xp1 - xp0),
                            xi1: 0.0,
                            xip: xip0 + w * (xip1 - xip0),
                        };
                        let (x, xi) = atlas.charts[g.chart]
                            .from_chart(&cp)
                            .expect("gliding chart is embedded");
                        return PhasePoint::new(t, x, xi);
                    }
                }
            }
        }
        self.end_point.clone()
    }
}

fn boundary_field(atlas: &Atlas, chart: usize, xp: f64, xip: f64) -> (f64, f64) {
    let (drp, drip) = atlas.charts[chart].r0_grad(xp, xip);
    (drip, -drp)
}

fn rk4_boundary(atlas: &Atlas, chart: usize, xp: f64, xip: f64, dt: f64) -> (f64, f64) {
    let f = |a: f64, b: f64| boundary_field(atlas, chart, a, b);
    let (k1p, k1i) = f(xp, xip);
    let (k2p, k2i) = f(xp + 0.5 * dt * k1p, xip + 0.5 * dt * k1i);
    let (k3p, k3i) = f(xp + 0.5 * dt * k2p, xip + 0.5 * dt * k2i);
    let (k4p, k4i) = f(xp + dt * k3p, xip + dt * k3i);
    (
        xp + dt / 6.0 * (k1p + 2.0 * k2p + 2.0 * k3p + k4p),
        xip + dt / 6.0 * (k1i + 2.0 * k2i + 2.0 * k3i + k4i),
    )
}

struct Driver<'a> {
    field: &'a SymbolField,
    obstacle: Option<&'a Obstacle>,
    atlas: Option<Arc<Atlas>>,
    opts: &'a GenFlowOpts,
    pen_tol: f64,
    near_tol: f64,
}

impl Driver<'_> {
    fn near_boundary(&self, x: &[f64]) -> bool {
        self.obstacle
            .map(|o| o.level(x).abs() <= self.near_tol)
            .unwrap_or(false)
    }

    /// Resolves one boundary interaction, appending the event (and a gliding
    /// segment when one occurs) and returning the interior restart point, or
    /// `None` when the time budget ran out while gliding.
    fn handle_boundary(
        &self,
        state: &PhasePoint,
        t_max: f64,
        events: &mut Vec<EventRecord>,
        segments: &mut Vec<Segment>,
    ) -> Result<Option<PhasePoint>, GenFlowError> {
        let atlas = self.atlas.as_ref().expect("boundary handling needs an atlas");
        let (ci, cp) = atlas.locate(&state.x, &state.xi)?;
        let chart = &atlas.charts[ci];
        let energy = self.field.p(&state.x, &state.xi);
        let tau = -energy;
        let class = classify(chart.as_ref(), cp.xp, cp.xip, tau, &self.opts.classify);
        match class {
            BoundaryClass::Hyperbolic { xi1_plus } => {
                if cp.xi1 > 0.0 {
                    // Already outgoing; push into the interior and continue.
                    let out = self.lift(ci, cp.xp, cp.xi1, cp.xip, state.t)?;
                    return Ok(Some(out));
                }
                let out = self.lift(ci, cp.xp, xi1_plus, cp.xip, state.t)?;
                events.push(EventRecord {
                    t: state.t,
                    kind: EventKind::Reflection,
                    chart: ci,
                    class,
                    point_in: state.clone(),
                    point_out: out.clone(),
                });
                Ok(Some(out))
            }
            BoundaryClass::Diffractive => {
                let out = self.lift(ci, cp.xp, cp.xi1.abs(), cp.xip, state.t)?;
                events.push(EventRecord {
                    t: state.t,
                    kind: EventKind::DiffractivePass,
                    chart: ci,
                    class,
                    point_in: state.clone(),
                    point_out: out.clone(),
                });
                Ok(Some(out))
            }
            BoundaryClass::Gliding => {
                self.glide(ci, cp, state, t_max, events, segments)
            }
            BoundaryClass::HigherOrder { k } => {
                // Probe the glancing condition a microstep ahead along the
                // boundary field to pick the continuation branch.
                let mut xp = cp.xp;
                let mut xip = cp.xip;
                let micro = self.opts.gliding_dt * 0.1;
                let mut branch = None;
                for _ in 0..64 {
                    let (nxp, nxip) = rk4_boundary(atlas, ci, xp, xip, micro);
                    xp = nxp;
                    xip = nxip;
                    let slope = chart.dr_dx1(0.0, xp, xip);
                    let band = self.opts.classify.curvature_band * xip * xip + 1e-30;
                    if slope < -band {
                        branch = Some(false);
                        break;
                    }
                    if slope > band {
                        branch = Some(true);
                        break;
                    }
                }
                match branch {
                    Some(false) | None => {
                        let out = self.lift(ci, cp.xp, cp.xi1.abs(), cp.xip, state.t)?;
                        events.push(EventRecord {
                            t: state.t,
                            kind: EventKind::HigherOrderPass { k },
                            chart: ci,
                            class,
                            point_in: state.clone(),
                            point_out: out.clone(),
                        });
                        Ok(Some(out))
                    }
                    Some(true) => self.glide(ci, cp, state, t_max, events, segments),
                }
            }
            BoundaryClass::Elliptic | BoundaryClass::Undetermined => {
                Err(GenFlowError::UnexpectedClass { class, t: state.t })
            }
        }
    }

    /// Places a chart point slightly inside the domain and re-embeds it.
    fn lift(
        &self,
        chart_idx: usize,
        xp: f64,
        xi1: f64,
        xip: f64,
        t: f64,
    ) -> Result<PhasePoint, GenFlowError> {
        let atlas = self.atlas.as_ref().unwrap();
        let x1 = if xi1 > 1e-6 { 0.0 } else { self.pen_tol };
        let (x, xi) = atlas.charts[chart_idx]
            .from_chart(&ChartPoint { x1, xp, xi1, xip })
            .ok_or(BoundaryError::NoEmbedding)?;
        Ok(PhasePoint::new(t, x, xi))
    }

    fn glide(
        &self,
        ci: usize,
        cp: ChartPoint,
        state: &PhasePoint,
        t_max: f64,
        events: &mut Vec<EventRecord>,
        segments: &mut Vec<Segment>,
    ) -> Result<Option<PhasePoint>, GenFlowError> {
        let atlas = self.atlas.as_ref().unwrap();
        let chart = &atlas.charts[ci];
        let energy = chart.r0(cp.xp, cp.xip);
        let mut nodes = vec![(state.t, cp.xp, cp.xip)];
        let mut t = state.t;
        let mut xp = cp.xp;
        let mut xip = cp.xip;
        let dt = self.opts.gliding_dt;
        let mut lifted: Option<(f64, f64, f64)> = None;
        while t < t_max {
            let step = dt.min(t_max - t);
            let (nxp, mut nxip) = rk4_boundary(atlas, ci, xp, xip, step);
            // Project back onto the energy shell r0 = energy.
            let r0 = chart.r0(nxp, nxip);
            if r0 > 0.0 && energy > 0.0 {
                nxip *= (energy / r0).sqrt();
            }
            let slope = chart.dr_dx1(0.0, nxp, nxip);
            if slope <= 0.0 {
                // Liftoff: locate the boundary of the gliding region.
                let slope_at = |s: f64| {
                    let (axp, axip) = rk4_boundary(atlas, ci, xp, xip, s);
                    chart.dr_dx1(0.0, axp, axip)
                };
                let s0 = chart.dr_dx1(0.0, xp, xip);
                let s_hit = if s0 > 0.0 && slope < 0.0 {
                    refine_crossing(&slope_at, 0.0, step, s0, slope)
                } else {
                    step
                };
                let (axp, axip) = rk4_boundary(atlas, ci, xp, xip, s_hit);
                lifted = Some((t + s_hit, axp, axip));
                break;
            }
            t += step;
            xp = nxp;
            xip = nxip;
            nodes.push((t, xp, xip));
        }
        match lifted {
            Some((t_lift, lxp, lxip)) => {
                nodes.push((t_lift, lxp, lxip));
                let out = self.lift(ci, lxp, 0.0, lxip, t_lift)?;
                events.push(EventRecord {
                    t: state.t,
                    kind: EventKind::GlidingArc { t_end: t_lift },
                    chart: ci,
                    class: BoundaryClass::Gliding,
                    point_in: state.clone(),
                    point_out: out.clone(),
                });
                segments.push(Segment::Gliding(GlidingNodes { chart: ci, nodes }));
                Ok(Some(out))
            }
            None => {
                if nodes.last().map(|n| n.0) != Some(t_max) {
                    nodes.push((t_max, xp, xip));
                }
                let cp_end = ChartPoint { x1: 0.0, xp, xi1: 0.0, xip };
                let (x, xi) = atlas.charts[ci]
                    .from_chart(&cp_end)
                    .ok_or(BoundaryError::NoEmbedding)?;
                events.push(EventRecord {
                    t: state.t,
                    kind: EventKind::GlidingArc { t_end: t_max },
                    chart: ci,
                    class: BoundaryClass::Gliding,
                    point_in: state.clone(),
                    point_out: PhasePoint::new(t_max, x, xi),
                });
                segments.push(Segment::Gliding(GlidingNodes { chart: ci, nodes }));
                Ok(None)
            }
        }
    }
}

/// Evolves the generalized flow from `start` until `t_max`, a configured
/// stop radius, or an unresolvable event.
pub fn evolve_generalized(
    field: &SymbolField,
    obstacle: Option<&Obstacle>,
    start: &PhasePoint,
    t_max: f64,
    opts: &GenFlowOpts,
) -> Result<GeneralizedTrajectory, GenFlowError> {
    let atlas = match obstacle {
        Some(obs) if obs.has_boundary() => Some(Arc::new(Atlas::new(field, obs)?)),
        _ => None,
    };
    let scale = obstacle.map(|o| o.bounding_radius()).unwrap_or(1.0);
    let pen_tol = opts.penetration_factor * scale;
    let driver = Driver {
        field,
        obstacle: obstacle.filter(|o| o.has_boundary()),
        atlas: atlas.clone(),
        opts,
        pen_tol,
        near_tol: 0.3 * pen_tol,
    };
    let mut flow_opts = opts.flow.clone();
    flow_opts.stop_radius = opts.stop_radius;
    flow_opts.boundary_tol = flow_opts.boundary_tol.min(0.05 * pen_tol);

    let mut events: Vec<EventRecord> = Vec::new();
    let mut segments: Vec<Segment> = Vec::new();
    let mut state = start.clone();
    // A restart returned by the boundary handler may still sit on the
    // boundary (reflections keep x1 = 0 exact); it goes straight to the
    // interior integrator instead of being handled again.
    let mut fresh_restart = false;

    loop {
        if events.len() >= opts.max_events {
            return Err(GenFlowError::EventLimit {
                limit: opts.max_events,
                t: state.t,
            });
        }
        if state.t >= t_max {
            break;
        }
        if !fresh_restart && driver.near_boundary(&state.x) {
            match driver.handle_boundary(&state, t_max, &mut events, &mut segments)? {
                Some(next) => {
                    state = next;
                    fresh_restart = true;
                    continue;
                }
                None => {
                    // Gliding consumed the remaining time.
                    let last = match segments.last() {
                        Some(Segment::Gliding(g)) => g,
                        _ => unreachable!("gliding segment was just pushed"),
                    };
                    let ev = events.last().unwrap();
                    state = ev.point_out.clone();
                    let _ = last;
                    break;
                }
            }
        }
        fresh_restart = false;
        let arc = flow_interior(field, driver.obstacle, &state, t_max, &flow_opts)?;
        let arc_end = arc.end.clone();
        let end_point = arc.end_point.clone();
        segments.push(Segment::Interior(arc));
        match arc_end {
            ArcEnd::TimeExhausted => {
                state = end_point;
                break;
            }
            ArcEnd::RadiusReached { radius } => {
                return Ok(GeneralizedTrajectory {
                    start: start.clone(),
                    end_point: end_point.clone(),
                    end: TrajectoryEnd::RadiusReached { radius },
                    events,
                    segments,
                    atlas,
                });
            }
            ArcEnd::BoundaryHit(hit) => {
                state = hit.point;
            }
        }
    }

    Ok(GeneralizedTrajectory {
        start: start.clone(),
        end_point: state,
        end: TrajectoryEnd::TimeExhausted,
        events,
        segments,
        atlas,
    })
}

/// Verdict of one ray of the non-trapping scan.
#[derive(Debug, Clone, PartialEq)]
pub enum RayVerdict {
    /// Reached the exit radius moving outward in both time directions.
    Escaped { t_forward: f64, t_backward: f64 },
    /// Stayed within the exit radius for the whole time budget.
    Trapped { reflections: usize },
}

/// Outcome of the randomized non-trapping scan.
pub struct NonTrappingReport {
    pub rays: Vec<(PhasePoint, RayVerdict)>,
    pub all_escaped: bool,
}

fn flip(p: &PhasePoint) -> PhasePoint {
    PhasePoint::new(0.0, p.x.clone(), p.xi.iter().map(|v| -v).collect())
}

fn escape_one_direction(
    field: &SymbolField,
    obstacle: Option<&Obstacle>,
    start: &PhasePoint,
    t_max: f64,
    exit_radius: f64,
    opts: &GenFlowOpts,
) -> Result<Option<f64>, GenFlowError> {
    let mut o = opts.clone();
    o.stop_radius = Some(exit_radius);
    let traj = evolve_generalized(field, obstacle, start, t_max, &o)?;
    match traj.end {
        TrajectoryEnd::RadiusReached { .. } => {
            let p = &traj.end_point;
            let outward = field.a_form(&p.x, &p.xi);
            if outward > 0.0 {
                Ok(Some(p.t))
            } else {
                Ok(None)
            }
        }
        TrajectoryEnd::TimeExhausted => Ok(None),
    }
}

/// Samples random rays near the obstacle and checks that each escapes to
/// `exit_radius` in both time directions.
pub fn check_nontrapping(
    field: &SymbolField,
    obstacle: Option<&Obstacle>,
    n_rays: usize,
    t_max: f64,
    exit_radius: f64,
    seed: u64,
    opts: &GenFlowOpts,
) -> Result<NonTrappingReport, GenFlowError> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let r0 = obstacle.map(|o| o.bounding_radius()).unwrap_or(1.0);
    assert!(exit_radius >= 3.0 * r0, "exit radius must enclose the obstacle");
    let mut rays = Vec::with_capacity(n_rays);
    let mut all_escaped = true;
    for _ in 0..n_rays {
        let x = loop {
            let cand = [
                rng.gen_range(-2.0 * r0..2.0 * r0),
                rng.gen_range(-2.0 * r0..2.0 * r0),
            ];
            let clear = obstacle.map_or(true, |o| o.level(&cand) > 1e-3 * r0);
            if clear && norm(&cand) <= 2.0 * r0 {
                break cand;
            }
        };
        let phi = rng.gen_range(0.0..std::f64::consts::TAU);
        let start = PhasePoint::new(0.0, x.to_vec(), vec![phi.cos(), phi.sin()]);
        let fwd = escape_one_direction(field, obstacle, &start, t_max, exit_radius, opts)?;
        let bwd = escape_one_direction(field, obstacle, &flip(&start), t_max, exit_radius, opts)?;
        let verdict = match (fwd, bwd) {
            (Some(tf), Some(tb)) => RayVerdict::Escaped {
                t_forward: tf,
                t_backward: tb,
            },
            _ => {
                all_escaped = false;
                let traj = evolve_generalized(field, obstacle, &start, t_max, opts)?;
                RayVerdict::Trapped {
                    reflections: traj.reflection_count(),
                }
            }
        };
        rays.push((start, verdict));
    }
    Ok(NonTrappingReport { rays, all_escaped })
}

/// Earliest backward time at which a ray is incoming: far away and moving
/// inward against the radial form.
#[derive(Debug, Clone)]
pub struct IncomingTime {
    /// Negative time at which the incoming condition first holds.
    pub s1: f64,
    pub point: PhasePoint,
    /// Margins of the two conditions at `s1`.
    pub radius_margin: f64,
    pub direction_margin: f64,
}

/// Searches backward for the first time `s1 < 0` with `|x| >= 3 r0` and
/// `a(x, xi) <= -3 delta |x| |xi|`.
pub fn find_incoming_time(
    field: &SymbolField,
    obstacle: Option<&Obstacle>,
    start: &PhasePoint,
    delta: f64,
    t_back_max: f64,
    opts: &GenFlowOpts,
) -> Result<Option<IncomingTime>, GenFlowError> {
    let traj = evolve_generalized(field, obstacle, &flip(start), t_back_max, opts)?;
    let r0 = field.r0;
    let margin = |p: &PhasePoint| -> (f64, f64) {
        // The trajectory runs in flipped momenta; unflip for the test.
        let xi: Vec<f64> = p.xi.iter().map(|v| -v).collect();
        let rad = norm(&p.x) - 3.0 * r0;
        let dir = -3.0 * delta * norm(&p.x) * norm(&xi) - field.a_form(&p.x, &xi);
        (rad, dir)
    };
    let pred = |p: &PhasePoint| -> f64 {
        let (rad, dir) = margin(p);
        rad.min(dir)
    };
    let n = ((t_back_max / 1e-3) as usize).clamp(10, 2_000_000);
    let dt = traj.t_end() / n as f64;
    if dt <= 0.0 {
        return Ok(None);
    }
    let mut prev_t = 0.0;
    let mut prev_v = pred(&traj.sample(0.0));
    if prev_v >= 0.0 {
        let p0 = traj.sample(0.0);
        let (rad, dir) = margin(&p0);
        return Ok(Some(IncomingTime {
            s1: 0.0,
            point: PhasePoint::new(0.0, p0.x.clone(), p0.xi.iter().map(|v| -v).collect()),
            radius_margin: rad,
            direction_margin: dir,
        }));
    }
    for i in 1..=n {
        let t = i as f64 * dt;
        let v = pred(&traj.sample(t));
        if v >= 0.0 {
            let f = |tt: f64| pred(&traj.sample(tt));
            let t_hit = refine_crossing(&f, prev_t, t, prev_v, v);
            let p = traj.sample(t_hit);
            let (rad, dir) = margin(&p);
            return Ok(Some(IncomingTime {
                s1: -t_hit,
                point: PhasePoint::new(
                    -t_hit,
                    p.x.clone(),
                    p.xi.iter().map(|v| -v).collect(),
                ),
                radius_margin: rad,
                direction_margin: dir,
            }));
        }
        prev_t = t;
        prev_v = v;
    }
    Ok(None)
}

/// Sampled derivative bounds of the escape monitor along a trajectory.
#[derive(Debug, Clone)]
pub struct MonitorReport {
    /// Smallest observed derivative of the radial form.
    pub min_df1: f64,
    /// Largest observed derivative of the barrier term `3 delta |x| |xi|`.
    pub max_df2: f64,
    pub samples: usize,
}

/// Differentiates the two monitor terms along a generalized trajectory,
/// skipping a small window around each boundary event.
pub fn monitor_f(
    field: &SymbolField,
    traj: &GeneralizedTrajectory,
    delta: f64,
    n_samples: usize,
) -> MonitorReport {
    let t0 = traj.start.t;
    let t1 = traj.t_end();
    let h = 1e-6 * (t1 - t0).max(1e-6);
    let skip = 50.0 * h;
    let f1 = |p: &PhasePoint| field.a_form(&p.x, &p.xi);
    let f2 = |p: &PhasePoint| 3.0 * delta * norm(&p.x) * norm(&p.xi);
    let mut min_df1 = f64::INFINITY;
    let mut max_df2 = f64::NEG_INFINITY;
    let mut used = 0;
    for i in 0..n_samples {
        let t = t0 + (t1 - t0) * (i as f64 + 0.5) / n_samples as f64;
        if t - h < t0 || t + h > t1 {
            continue;
        }
        let near_event = traj.events.iter().any(|e| {
            let t_end = match e.kind {
                EventKind::GlidingArc { t_end } => t_end,
                _ => e.t,
            };
            (t >= e.t - skip) && (t <= t_end + skip)
        });
        if near_event {
            continue;
        }
        let pm = traj.sample(t - h);
        let pp = traj.sample(t + h);
        let df1 = (f1(&pp) - f1(&pm)) / (2.0 * h);
        let df2 = (f2(&pp) - f2(&pm)) / (2.0 * h);
        min_df1 = min_df1.min(df1);
        max_df2 = max_df2.max(df2);
        used += 1;
    }
    MonitorReport {
        min_df1,
        max_df2,
        samples: used,
    }
}
