//! Scenario files: the geometric and coefficient data shared by every
//! experiment. A scenario fixes the dimension, the obstacle, the metric
//! and potential families, and the localization constants; commands add
//! their own parameters on top.

use kato_core::cutoffs::CutoffFn;
use kato_core::symbols::{Metric, Obstacle, Potential, SymbolField};
use serde::Deserialize;

use crate::config::ConfigError;

/// Obstacle selection. Every shipped kind is a smooth level set.
#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ObstacleConfig {
    /// Free space; the domain is all of the plane.
    None,
    /// Disk of the given radius, centered at the origin.
    Disk { radius: f64 },
    /// Domain inside a circular wall; the boundary is concave from the
    /// domain side, which produces gliding points.
    InvertedDisk { radius: f64 },
    /// Axis-aligned ellipse with semi-axes `a`, `b`.
    Ellipse { a: f64, b: f64 },
    /// Two disks with centers `(+-separation/2, 0)`.
    TwoDisks { separation: f64, radius: f64 },
    /// Disk perturbed by an angular bump; nonconvex for sufficient `amp`.
    Kidney { base: f64, amp: f64, lobes: u32 },
}

impl ObstacleConfig {
    fn build(&self) -> Result<Obstacle, ConfigError> {
        let positive = |v: f64, what: &str| {
            if v > 0.0 && v.is_finite() {
                Ok(v)
            } else {
                Err(ConfigError::Invalid(format!("{what} must be positive, got {v}")))
            }
        };
        Ok(match self {
            ObstacleConfig::None => Obstacle::none(),
            ObstacleConfig::Disk { radius } => Obstacle::disk(positive(*radius, "radius")?),
            ObstacleConfig::InvertedDisk { radius } => {
                Obstacle::inverted_disk(positive(*radius, "radius")?)
            }
            ObstacleConfig::Ellipse { a, b } => {
                Obstacle::ellipse(positive(*a, "a")?, positive(*b, "b")?)
            }
            ObstacleConfig::TwoDisks { separation, radius } => {
                let s = positive(*separation, "separation")?;
                let r = positive(*radius, "radius")?;
                if s <= 2.0 * r {
                    return Err(ConfigError::Invalid(format!(
                        "two disks of radius {r} overlap at separation {s}"
                    )));
                }
                Obstacle::two_disks(s, r)
            }
            ObstacleConfig::Kidney { base, amp, lobes } => {
                let b = positive(*base, "base")?;
                let a = positive(*amp, "amp")?;
                if a >= b {
                    return Err(ConfigError::Invalid(format!(
                        "kidney amplitude {a} must stay below the base radius {b}"
                    )));
                }
                Obstacle::kidney(b, a, *lobes)
            }
        })
    }

    fn has_boundary(&self) -> bool {
        !matches!(self, ObstacleConfig::None)
    }
}

/// Metric coefficient selection.
#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MetricConfig {
    Flat,
    /// Constant diagonal coefficients, one entry per dimension.
    DiagConst { values: Vec<f64> },
    /// `(1 + amp exp(-|x|^2/width^2)) Id`.
    ConformalBump { amp: f64, width: f64 },
}

impl MetricConfig {
    fn build(&self, dim: usize) -> Result<(Metric, f64), ConfigError> {
        match self {
            MetricConfig::Flat => Ok((Metric::Flat, 1.0)),
            MetricConfig::DiagConst { values } => {
                if values.len() != dim {
                    return Err(ConfigError::Invalid(format!(
                        "diag-const carries {} entries for dimension {dim}",
                        values.len()
                    )));
                }
                let mut lo = f64::INFINITY;
                for &v in values {
                    if !(v > 0.0 && v.is_finite()) {
                        return Err(ConfigError::Invalid(format!(
                            "diag-const entries must be positive, got {v}"
                        )));
                    }
                    lo = lo.min(v);
                }
                Ok((Metric::DiagConst(values.clone()), lo))
            }
            MetricConfig::ConformalBump { amp, width } => {
                if !(*amp > -1.0 && amp.is_finite()) {
                    return Err(ConfigError::Invalid(format!(
                        "bump amplitude {amp} breaks ellipticity (needs amp > -1)"
                    )));
                }
                if !(*width > 0.0 && width.is_finite()) {
                    return Err(ConfigError::Invalid(format!(
                        "bump width must be positive, got {width}"
                    )));
                }
                Ok((
                    Metric::ConformalBump {
                        amp: *amp,
                        width: *width,
                    },
                    (1.0 + amp.min(0.0)).max(1e-12),
                ))
            }
        }
    }
}

/// Potential selection.
#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PotentialConfig {
    Constant { value: f64 },
    /// `V(x) = 1 + |x|^2`.
    OnePlusSquare,
    /// `V(x) = exp(|x|)`; outside the admissible growth class, shipped as
    /// a failure witness for the symbol-class audits.
    ExpNorm,
}

impl PotentialConfig {
    fn build(&self) -> Result<Potential, ConfigError> {
        Ok(match self {
            PotentialConfig::Constant { value } => {
                if !(*value > 0.0 && value.is_finite()) {
                    return Err(ConfigError::Invalid(format!(
                        "constant potential must be positive, got {value}"
                    )));
                }
                Potential::Const(*value)
            }
            PotentialConfig::OnePlusSquare => Potential::OnePlusSquare,
            PotentialConfig::ExpNorm => Potential::ExpNorm,
        })
    }
}

fn default_dim() -> usize {
    2
}

fn default_one() -> f64 {
    1.0
}

fn default_obstacle() -> ObstacleConfig {
    ObstacleConfig::None
}

fn default_metric() -> MetricConfig {
    MetricConfig::Flat
}

fn default_potential() -> PotentialConfig {
    PotentialConfig::Constant { value: 1.0 }
}

/// Scenario table: everything the coefficient field and obstacle need.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default = "default_dim")]
    pub dim: usize,
    /// Lower ellipticity bound `c` with `a(x) >= c Id`; checked against
    /// the metric family at build time.
    #[serde(default = "default_one")]
    pub ellipticity: f64,
    /// Radius enclosing the obstacle and any coefficient structure.
    #[serde(default = "default_one")]
    pub r0: f64,
    /// Near-boundary localization radius; defaults to `2 r0`.
    pub r1: Option<f64>,
    #[serde(default = "default_obstacle")]
    pub obstacle: ObstacleConfig,
    #[serde(default = "default_metric")]
    pub metric: MetricConfig,
    #[serde(default = "default_potential")]
    pub potential: PotentialConfig,
}

/// Built scenario handed to the command drivers.
pub struct Scenario {
    pub field: SymbolField,
    pub obstacle: Obstacle,
}

impl Scenario {
    /// `Some(&obstacle)` when the scenario actually has a boundary; flow
    /// APIs treat a missing obstacle as free space.
    pub fn obstacle_ref(&self) -> Option<&Obstacle> {
        if self.obstacle.has_boundary() {
            Some(&self.obstacle)
        } else {
            None
        }
    }
}

impl ScenarioConfig {
    pub fn build(&self) -> Result<Scenario, ConfigError> {
        if !(1..=2).contains(&self.dim) {
            return Err(ConfigError::Invalid(format!(
                "dimension {} unsupported (shipped scenarios are 1d and 2d)",
                self.dim
            )));
        }
        if self.obstacle.has_boundary() && self.dim != 2 {
            return Err(ConfigError::Invalid(
                "obstacles require dimension 2".to_string(),
            ));
        }
        if !(self.r0 > 0.0 && self.r0.is_finite()) {
            return Err(ConfigError::Invalid(format!(
                "r0 must be positive, got {}",
                self.r0
            )));
        }
        let r1 = self.r1.unwrap_or(2.0 * self.r0);
        if r1 <= self.r0 {
            return Err(ConfigError::Invalid(format!(
                "r1 = {r1} must exceed r0 = {}",
                self.r0
            )));
        }
        let (metric, metric_floor) = self.metric.build(self.dim)?;
        if !(self.ellipticity > 0.0 && self.ellipticity <= metric_floor + 1e-12) {
            return Err(ConfigError::Invalid(format!(
                "ellipticity constant {} is not honored by the metric (floor {metric_floor})",
                self.ellipticity
            )));
        }
        let potential = self.potential.build()?;
        let obstacle = self.obstacle.build()?;
        if obstacle.has_boundary() && obstacle.bounding_radius() > self.r0 {
            return Err(ConfigError::Invalid(format!(
                "obstacle of bounding radius {} sticks out of r0 = {}",
                obstacle.bounding_radius(),
                self.r0
            )));
        }
        let field = SymbolField {
            dim: self.dim,
            metric,
            potential,
            ellipticity: self.ellipticity,
            r0: self.r0,
            r1,
        };
        Ok(Scenario { field, obstacle })
    }
}

/// Cutoff description used by several command sections.
#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum CutoffConfig {
    /// 0 to 1 ramp over `[lo, hi]`, smoothstep order `k`.
    StepUp { lo: f64, hi: f64, k: usize },
    /// 1 to 0 ramp over `[lo, hi]`.
    StepDown { lo: f64, hi: f64, k: usize },
    /// Up over `[a, b]`, one on `[b, c]`, down over `[c, d]`.
    Plateau {
        a: f64,
        b: f64,
        c: f64,
        d: f64,
        k: usize,
    },
}

impl CutoffConfig {
    pub fn build(&self) -> Result<CutoffFn, ConfigError> {
        let ordered = |lo: f64, hi: f64| {
            if lo < hi {
                Ok(())
            } else {
                Err(ConfigError::Invalid(format!(
                    "cutoff knots must increase, got [{lo}, {hi}]"
                )))
            }
        };
        match self {
            CutoffConfig::StepUp { lo, hi, k } => {
                ordered(*lo, *hi)?;
                Ok(CutoffFn::step_up(*lo, *hi, *k))
            }
            CutoffConfig::StepDown { lo, hi, k } => {
                ordered(*lo, *hi)?;
                Ok(CutoffFn::step_down(*lo, *hi, *k))
            }
            CutoffConfig::Plateau { a, b, c, d, k } => {
                ordered(*a, *b)?;
                ordered(*b, *c)?;
                ordered(*c, *d)?;
                Ok(CutoffFn::plateau(*a, *b, *c, *d, *k))
            }
        }
    }
}
