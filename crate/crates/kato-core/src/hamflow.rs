//! Interior Hamiltonian flow with dense output and boundary events.
//!
//! Integrates `xdot = d_xi p`, `xidot = -d_x p` away from the obstacle with
//! an embedded Dormand-Prince 5(4) pair. Accepted steps keep a fourth-order
//! interpolant, so arcs can be sampled at arbitrary times and boundary
//! crossings can be located to high precision after the fact.

use crate::symbols::{Obstacle, SymbolField};
use crate::util::norm;
use thiserror::Error;

/// Point of phase space with the flow time at which it was reached.
#[derive(Debug, Clone, PartialEq)]
pub struct PhasePoint {
    pub t: f64,
    pub x: Vec<f64>,
    pub xi: Vec<f64>,
}

impl PhasePoint {
    pub fn new(t: f64, x: Vec<f64>, xi: Vec<f64>) -> Self {
        PhasePoint { t, x, xi }
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }
}

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("flow starts inside the obstacle, level = {level}")]
    StartsInsideObstacle { level: f64 },
    #[error("step limit of {steps} reached at t = {t}")]
    StepLimit { steps: usize, t: f64 },
    #[error("energy drift {drift:e} exceeds tolerance {tol:e} at t = {t}")]
    EnergyDrift { drift: f64, tol: f64, t: f64 },
    #[error("step size underflow at t = {t}")]
    StepUnderflow { t: f64 },
}

/// Integrator options; defaults favor accuracy over speed.
#[derive(Debug, Clone)]
pub struct FlowOpts {
    pub rtol: f64,
    pub atol: f64,
    /// Hard cap on the step size, on top of the adaptive choice.
    pub max_step: Option<f64>,
    /// Stop once `|x|` exceeds this radius.
    pub stop_radius: Option<f64>,
    /// Accept a boundary hit when `|level| <= boundary_tol` after refinement.
    pub boundary_tol: f64,
    /// A hit with `|d level / dt|` below this multiple of the speed is
    /// flagged as grazing.
    pub grazing_tol: f64,
    /// Relative Hamiltonian-drift tolerance.
    pub energy_tol: f64,
    pub max_steps: usize,
}

impl Default for FlowOpts {
    fn default() -> Self {
        FlowOpts {
            rtol: 1e-11,
            atol: 1e-13,
            max_step: None,
            stop_radius: None,
            boundary_tol: 1e-10,
            grazing_tol: 1e-3,
            energy_tol: 1e-9,
            max_steps: 500_000,
        }
    }
}

/// Why an arc stopped.
#[derive(Debug, Clone)]
pub enum ArcEnd {
    /// Ran to the requested final time.
    TimeExhausted,
    /// Crossed the obstacle boundary.
    BoundaryHit(BoundaryHit),
    /// Left the ball of the configured stop radius.
    RadiusReached { radius: f64 },
}

/// Boundary crossing refined to the hit tolerance.
#[derive(Debug, Clone)]
pub struct BoundaryHit {
    pub point: PhasePoint,
    /// Time derivative of the level function at the hit (negative: the flow
    /// moves into the obstacle).
    pub level_rate: f64,
    /// True when the crossing is nearly tangential.
    pub grazing: bool,
}

/// One accepted step with its interpolation data.
#[derive(Debug, Clone)]
struct DenseSegment {
    t0: f64,
    h: f64,
    rcont: [Vec<f64>; 5],
}

impl DenseSegment {
    fn eval(&self, t: f64, out: &mut [f64]) {
        let th = ((t - self.t0) / self.h).clamp(0.0, 1.0);
        let th1 = 1.0 - th;
        for i in 0..out.len() {
            out[i] = self.rcont[0][i]
                + th * (self.rcont[1][i]
                    + th1 * (self.rcont[2][i] + th * (self.rcont[3][i] + th1 * self.rcont[4][i])));
        }
    }
}

/// Integrated interior arc with dense output.
#[derive(Debug, Clone)]
pub struct InteriorArc {
    pub dim: usize,
    pub start: PhasePoint,
    pub end_point: PhasePoint,
    pub end: ArcEnd,
    /// Largest relative Hamiltonian drift seen at accepted nodes.
    pub p_drift: f64,
    pub steps: usize,
    pub rejected: usize,
    segments: Vec<DenseSegment>,
}

impl InteriorArc {
    pub fn t_end(&self) -> f64 {
        self.end_point.t
    }

    /// Samples the arc at time `t`, clamped to `[start.t, t_end]`.
    pub fn sample(&self, t: f64) -> PhasePoint {
        let d = self.dim;
        if self.segments.is_empty() || t <= self.start.t {
            let mut p = self.start.clone();
            p.t = t.max(self.start.t);
            return p;
        }
        if t >= self.end_point.t {
            return self.end_point.clone();
        }
        let idx = self
            .segments
            .partition_point(|s| s.t0 + s.h < t)
            .min(self.segments.len() - 1);
        let mut y = vec![0.0; 2 * d];
        self.segments[idx].eval(t, &mut y);
        PhasePoint::new(t, y[..d].to_vec(), y[d..].to_vec())
    }
}

const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
const ER: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];
const D: [f64; 7] = [
    -12715105075.0 / 11282082432.0,
    0.0,
    87487479700.0 / 32700410799.0,
    -10690763975.0 / 1880347072.0,
    701980252875.0 / 199316789632.0,
    -1453857185.0 / 822651844.0,
    69997945.0 / 29380423.0,
];

/// Root refinement by the Illinois variant of regula falsi on `[a, b]`
/// with `f(a) * f(b) <= 0`.
pub fn refine_crossing(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fb: f64) -> f64 {
    let (mut a, mut b, mut fa, mut fb) = (a, b, fa, fb);
    if fa == 0.0 {
        return a;
    }
    if fb == 0.0 {
        return b;
    }
    let mut side = 0i8;
    for _ in 0..200 {
        let m = (fa * b - fb * a) / (fa - fb);
        let fm = f(m);
        if fm == 0.0 || (b - a).abs() < 1e-15 * (1.0 + m.abs()) {
            return m;
        }
        if (fm > 0.0) == (fa > 0.0) {
            a = m;
            fa = fm;
            if side == 1 {
                fb *= 0.5;
            }
            side = 1;
        } else {
            b = m;
            fb = fm;
            if side == -1 {
                fa *= 0.5;
            }
            side = -1;
        }
    }
    0.5 * (a + b)
}

struct Stepper<'a> {
    field: &'a SymbolField,
    dim: usize,
}

impl Stepper<'_> {
    fn rhs(&self, y: &[f64], dy: &mut [f64]) {
        let d = self.dim;
        let (xd, xid) = dy.split_at_mut(d);
        self.field.flow_field(&y[..d], &y[d..], xd, xid);
    }
}

/// Integrates the Hamiltonian flow until the time runs out, the boundary is
/// crossed, or the stop radius is reached.
pub fn flow_interior(
    field: &SymbolField,
    obstacle: Option<&Obstacle>,
    start: &PhasePoint,
    t_max: f64,
    opts: &FlowOpts,
) -> Result<InteriorArc, FlowError> {
    let d = field.dim;
    assert_eq!(start.x.len(), d);
    assert_eq!(start.xi.len(), d);
    let stepper = Stepper { field, dim: d };
    let feature = obstacle.map(|o| o.feature_scale()).unwrap_or(1.0);

    if let Some(obs) = obstacle {
        let b0 = obs.level(&start.x);
        if b0 < -1e-6 * feature {
            return Err(FlowError::StartsInsideObstacle { level: b0 });
        }
    }

    let mut y: Vec<f64> = start.x.iter().chain(start.xi.iter()).cloned().collect();
    let mut t = start.t;
    let p0 = field.p(&start.x, &start.xi);
    let mut p_drift = 0.0f64;

    let mut k: Vec<Vec<f64>> = (0..7).map(|_| vec![0.0; 2 * d]).collect();
    stepper.rhs(&y, &mut k[0]);

    let speed0 = norm(&k[0][..d]).max(1e-12);
    let mut h = (0.01 * (1.0 + norm(&y[..d])) / speed0).min(t_max - t).max(1e-12);
    if let Some(hm) = opts.max_step {
        h = h.min(hm);
    }

    let mut segments: Vec<DenseSegment> = Vec::new();
    let mut steps = 0usize;
    let mut rejected = 0usize;
    let mut armed = obstacle.map_or(false, |o| o.level(&start.x) > opts.boundary_tol);
    let mut y_new = vec![0.0; 2 * d];
    let mut y_stage = vec![0.0; 2 * d];
    let mut err_vec = vec![0.0; 2 * d];

    loop {
        if steps >= opts.max_steps {
            return Err(FlowError::StepLimit { steps, t });
        }
        if t >= t_max {
            break;
        }
        let mut h_try = h.min(t_max - t);
        if let Some(hm) = opts.max_step {
            h_try = h_try.min(hm);
        }
        if let Some(obs) = obstacle {
            let b_now = obs.level(&y[..d]);
            let v_now = norm(&k[0][..d]).max(1e-12);
            // Never step further than a fraction of the current boundary
            // distance, so no step can vault a shallow crossing; the floor
            // keeps progress alive once the distance is tiny.
            let guard = if armed {
                (0.25 * b_now / v_now).max(1e-4 * feature / v_now)
            } else {
                1e-2 * feature / v_now
            };
            h_try = h_try.min(guard);
        }
        if h_try < 1e-15 * (1.0 + t.abs()) {
            return Err(FlowError::StepUnderflow { t });
        }

        for s in 1..7 {
            for i in 0..2 * d {
                let mut acc = 0.0;
                for (j, kj) in k.iter().enumerate().take(s) {
                    acc += A[s][j] * kj[i];
                }
                y_stage[i] = y[i] + h_try * acc;
            }
            let _ = C[s];
            if s == 6 {
                y_new.copy_from_slice(&y_stage);
            }
            let (head, tail) = k.split_at_mut(s);
            let _ = head;
            stepper.rhs(&y_stage, &mut tail[0]);
        }

        let mut err = 0.0f64;
        for i in 0..2 * d {
            let mut e = 0.0;
            for (j, kj) in k.iter().enumerate() {
                e += ER[j] * kj[i];
            }
            err_vec[i] = h_try * e;
            let sc = opts.atol + opts.rtol * y[i].abs().max(y_new[i].abs());
            err += (err_vec[i] / sc).powi(2);
        }
        err = (err / (2 * d) as f64).sqrt();

        if err > 1.0 {
            rejected += 1;
            let fac = (0.9 * err.powf(-0.2)).clamp(0.2, 1.0);
            h = h_try * fac;
            continue;
        }

        // FSAL: k[6] is the derivative at the accepted endpoint.
        let mut rcont = [
            y.clone(),
            vec![0.0; 2 * d],
            vec![0.0; 2 * d],
            vec![0.0; 2 * d],
            vec![0.0; 2 * d],
        ];
        for i in 0..2 * d {
            let ydiff = y_new[i] - y[i];
            let bspl = h_try * k[0][i] - ydiff;
            rcont[1][i] = ydiff;
            rcont[2][i] = bspl;
            rcont[3][i] = ydiff - h_try * k[6][i] - bspl;
            let mut acc = 0.0;
            for (j, kj) in k.iter().enumerate() {
                acc += D[j] * kj[i];
            }
            rcont[4][i] = h_try * acc;
        }
        let segment = DenseSegment { t0: t, h: h_try, rcont };

        let mut stop: Option<(f64, ArcEnd)> = None;

        if let Some(obs) = obstacle {
            let n_probe = if obs.level(&y[..d]) < 0.1 * feature { 16 } else { 8 };
            let mut t_prev = t;
            let mut b_prev = obs.level(&y[..d]);
            let mut buf = vec![0.0; 2 * d];
            for q in 1..=n_probe {
                let tq = t + h_try * q as f64 / n_probe as f64;
                segment.eval(tq, &mut buf);
                let bq = obs.level(&buf[..d]);
                if !armed {
                    if bq > opts.boundary_tol {
                        armed = true;
                    }
                } else if bq < 0.0 {
                    let seg = &segment;
                    let level_at = |tt: f64| {
                        let mut bb = vec![0.0; 2 * d];
                        seg.eval(tt, &mut bb);
                        obs.level(&bb[..d])
                    };
                    let t_hit = refine_crossing(&level_at, t_prev, tq, b_prev, bq);
                    segment.eval(t_hit, &mut buf);
                    let eps = 1e-7 * h_try.max(1e-12);
                    let rate = (level_at(t_hit + eps) - level_at(t_hit - eps)) / (2.0 * eps);
                    let speed = {
                        let mut dy = vec![0.0; 2 * d];
                        stepper.rhs(&buf, &mut dy);
                        norm(&dy[..d]).max(1e-12)
                    };
                    let hit = BoundaryHit {
                        point: PhasePoint::new(t_hit, buf[..d].to_vec(), buf[d..].to_vec()),
                        level_rate: rate,
                        grazing: rate.abs() < opts.grazing_tol * speed,
                    };
                    stop = Some((t_hit, ArcEnd::BoundaryHit(hit)));
                    break;
                }
                t_prev = tq;
                b_prev = bq;
            }
        }

        if let Some(r_stop) = opts.stop_radius {
            let mut buf = vec![0.0; 2 * d];
            let mut t_prev = t;
            let mut f_prev = norm(&y[..d]) - r_stop;
            if f_prev < 0.0 {
                for q in 1..=8 {
                    let tq = t + h_try * q as f64 / 8.0;
                    segment.eval(tq, &mut buf);
                    let fq = norm(&buf[..d]) - r_stop;
                    if fq >= 0.0 {
                        let seg = &segment;
                        let radius_at = |tt: f64| {
                            let mut bb = vec![0.0; 2 * d];
                            seg.eval(tt, &mut bb);
                            norm(&bb[..d]) - r_stop
                        };
                        let t_hit = refine_crossing(&radius_at, t_prev, tq, f_prev, fq);
                        if stop.as_ref().map_or(true, |(ts, _)| t_hit < *ts) {
                            stop = Some((t_hit, ArcEnd::RadiusReached { radius: r_stop }));
                        }
                        break;
                    }
                    t_prev = tq;
                    f_prev = fq;
                }
            }
        }

        steps += 1;

        if let Some((t_stop, end)) = stop {
            let mut buf = vec![0.0; 2 * d];
            segment.eval(t_stop, &mut buf);
            let end_point = PhasePoint::new(t_stop, buf[..d].to_vec(), buf[d..].to_vec());
            let p_end = field.p(&end_point.x, &end_point.xi);
            p_drift = p_drift.max((p_end - p0).abs() / (1.0 + p0.abs()));
            segments.push(segment);
            return Ok(InteriorArc {
                dim: d,
                start: start.clone(),
                end_point,
                end,
                p_drift,
                steps,
                rejected,
                segments,
            });
        }

        t += h_try;
        y.copy_from_slice(&y_new);
        k.swap(0, 6);
        segments.push(segment);

        let p_now = field.p(&y[..d], &y[d..]);
        let drift = (p_now - p0).abs() / (1.0 + p0.abs());
        p_drift = p_drift.max(drift);
        if drift > opts.energy_tol {
            return Err(FlowError::EnergyDrift {
                drift,
                tol: opts.energy_tol,
                t,
            });
        }

        let fac = (0.9 * err.max(1e-10).powf(-0.2)).clamp(0.2, 5.0);
        h = h_try * fac;
    }

    let end_point = PhasePoint::new(t, y[..d].to_vec(), y[d..].to_vec());
    Ok(InteriorArc {
        dim: d,
        start: start.clone(),
        end_point,
        end: ArcEnd::TimeExhausted,
        p_drift,
        steps,
        rejected,
        segments,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::symbols::Metric;
    use approx::assert_relative_eq;

    #[test]
    fn flat_flow_is_straight_line() {
        let f = SymbolField::flat(2);
        let start = PhasePoint::new(0.0, vec![1.0, -2.0], vec![0.5, 0.25]);
        let arc = flow_interior(&f, None, &start, 3.0, &FlowOpts::default()).unwrap();
        let p = arc.sample(2.0);
        assert_relative_eq!(p.x[0], 1.0 + 2.0 * 0.5 * 2.0, epsilon = 1e-9);
        assert_relative_eq!(p.x[1], -2.0 + 2.0 * 0.25 * 2.0, epsilon = 1e-9);
        assert_relative_eq!(p.xi[0], 0.5, epsilon = 1e-12);
        assert!(matches!(arc.end, ArcEnd::TimeExhausted));
        assert!(arc.p_drift < 1e-12);
    }

    #[test]
    fn variable_metric_conserves_energy_and_reverses() {
        let f = SymbolField {
            metric: Metric::ConformalBump { amp: 0.3, width: 2.0 },
            ..SymbolField::flat(2)
        };
        let start = PhasePoint::new(0.0, vec![-3.0, 0.4], vec![1.0, 0.1]);
        let arc = flow_interior(&f, None, &start, 4.0, &FlowOpts::default()).unwrap();
        assert!(arc.p_drift < 1e-9, "drift {}", arc.p_drift);
        let end = arc.end_point.clone();
        let back_start = PhasePoint::new(0.0, end.x.clone(), end.xi.iter().map(|v| -v).collect());
        let back = flow_interior(&f, None, &back_start, 4.0, &FlowOpts::default()).unwrap();
        for i in 0..2 {
            assert_relative_eq!(back.end_point.x[i], start.x[i], epsilon = 1e-7);
            assert_relative_eq!(-back.end_point.xi[i], start.xi[i], epsilon = 1e-7);
        }
    }

    #[test]
    fn transversal_disk_hit_is_located_precisely() {
        let f = SymbolField::flat(2);
        let obs = Obstacle::disk(1.0);
        let start = PhasePoint::new(0.0, vec![-3.0, 0.3], vec![0.5, 0.0]);
        let arc = flow_interior(&f, Some(&obs), &start, 10.0, &FlowOpts::default()).unwrap();
        match &arc.end {
            ArcEnd::BoundaryHit(hit) => {
                let expected_x = -(1.0f64 - 0.09).sqrt();
                assert_relative_eq!(hit.point.x[0], expected_x, epsilon = 1e-9);
                assert_relative_eq!(hit.point.x[1], 0.3, epsilon = 1e-9);
                assert!(obs.level(&hit.point.x).abs() <= 1e-10);
                assert!(hit.level_rate < 0.0);
                assert!(!hit.grazing);
                assert_relative_eq!(hit.point.t, 3.0 + expected_x, epsilon = 1e-9);
            }
            other => panic!("expected boundary hit, got {other:?}"),
        }
    }

    #[test]
    fn tangent_ray_passes_the_disk() {
        let f = SymbolField::flat(2);
        let obs = Obstacle::disk(1.0);
        let start = PhasePoint::new(0.0, vec![-3.0, 1.0], vec![0.5, 0.0]);
        let arc = flow_interior(&f, Some(&obs), &start, 12.0, &FlowOpts::default()).unwrap();
        assert!(matches!(arc.end, ArcEnd::TimeExhausted));
        assert_relative_eq!(arc.end_point.x[0], 9.0, epsilon = 1e-8);
    }

    #[test]
    fn near_tangent_hit_is_flagged_grazing() {
        let f = SymbolField::flat(2);
        let obs = Obstacle::disk(1.0);
        let start = PhasePoint::new(0.0, vec![-3.0, 1.0 - 1e-7], vec![0.5, 0.0]);
        let arc = flow_interior(&f, Some(&obs), &start, 12.0, &FlowOpts::default()).unwrap();
        match &arc.end {
            ArcEnd::BoundaryHit(hit) => {
                assert!(hit.grazing, "level rate {}", hit.level_rate);
            }
            other => panic!("expected grazing hit, got {other:?}"),
        }
    }

    #[test]
    fn stop_radius_ends_the_arc() {
        let f = SymbolField::flat(2);
        let opts = FlowOpts {
            stop_radius: Some(5.0),
            ..FlowOpts::default()
        };
        let start = PhasePoint::new(0.0, vec![0.0, 0.0], vec![1.0, 0.0]);
        let arc = flow_interior(&f, None, &start, 100.0, &opts).unwrap();
        match arc.end {
            ArcEnd::RadiusReached { radius } => assert_eq!(radius, 5.0),
            ref other => panic!("expected radius stop, got {other:?}"),
        }
        assert_relative_eq!(norm(&arc.end_point.x), 5.0, epsilon = 1e-9);
        assert_relative_eq!(arc.end_point.t, 2.5, epsilon = 1e-9);
    }

    #[test]
    fn start_on_boundary_moving_inward_does_not_retrigger() {
        let f = SymbolField::flat(2);
        let obs = Obstacle::disk(1.0);
        let start = PhasePoint::new(0.0, vec![-1.0, 0.0], vec![-0.5, 0.5]);
        let arc = flow_interior(&f, Some(&obs), &start, 1.0, &FlowOpts::default()).unwrap();
        assert!(matches!(arc.end, ArcEnd::TimeExhausted));
        assert!(obs.level(&arc.end_point.x) > 0.5);
    }

    #[test]
    fn deep_interior_start_is_rejected() {
        let f = SymbolField::flat(2);
        let obs = Obstacle::disk(1.0);
        let start = PhasePoint::new(0.0, vec![0.5, 0.0], vec![1.0, 0.0]);
        assert!(matches!(
            flow_interior(&f, Some(&obs), &start, 1.0, &FlowOpts::default()),
            Err(FlowError::StartsInsideObstacle { .. })
        ));
    }

    #[test]
    fn dense_output_matches_nodes_between_samples() {
        let f = SymbolField {
            metric: Metric::ConformalBump { amp: 0.2, width: 1.5 },
            ..SymbolField::flat(2)
        };
        let start = PhasePoint::new(0.0, vec![-2.0, 0.3], vec![1.0, 0.2]);
        let arc = flow_interior(&f, None, &start, 2.0, &FlowOpts::default()).unwrap();
        for i in 0..=20 {
            let t = 2.0 * i as f64 / 20.0;
            let a = arc.sample(t);
            let direct = flow_interior(&f, None, &start, t.max(1e-9), &FlowOpts::default()).unwrap();
            for j in 0..2 {
                assert_relative_eq!(a.x[j], direct.end_point.x[j], epsilon = 1e-8);
            }
        }
    }
}
