//! Operator-side commands: the escape-function inequality sweep and the
//! 1d spectral checks (functional-calculus backends, commutator scaling,
//! resolvent bound, dyadic decomposition).

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Deserialize;

use kato_core::cutoffs::CutoffFn;
use kato_core::discrete::{
    apply_function, assemble, commutator_scan, fit_loglog_slope, littlewood_paley,
    resolvent_check, AlmostAnalyticExtension, Backend, DiscreteOperator, GridSpec, HsOpts,
    ScanVariant, SpectralData,
};
use kato_core::escape::{check_escape_inequalities, CutoffFamily, EscapeGrid, EscapeParams};

use crate::config::{ConfigError, LoadedConfig};
use crate::report::{cell, RunReport};
use crate::scenario::CutoffConfig;
use crate::CliError;

fn flat_interval(n: usize) -> Result<DiscreteOperator, CliError> {
    use kato_core::symbols::{Obstacle, SymbolField};
    Ok(assemble(
        &SymbolField::flat(1),
        &Obstacle::none(),
        &GridSpec::Interval { n },
    )?)
}

fn random_vec(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|t| t * t).sum::<f64>().sqrt()
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct EscapeAssert {
    /// Floor for all three sign margins.
    pub min_margin: Option<f64>,
    /// The fitted drift constant must be strictly positive.
    #[serde(default)]
    pub require_positive_drift: bool,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EscapeSection {
    pub epsilon: Option<f64>,
    pub rho: Option<f64>,
    pub nu: Option<f64>,
    pub m0: Option<f64>,
    pub delta: Option<f64>,
    pub r0: Option<f64>,
    pub xi0_norm: Option<f64>,
    /// Grid shape: radii, position angles, momentum moduli, momentum angles.
    pub grid: Option<[usize; 4]>,
    #[serde(default)]
    pub assert: EscapeAssert,
}

pub fn run_escape_check(
    loaded: LoadedConfig<EscapeSection>,
    report: &mut RunReport,
) -> Result<(), CliError> {
    let sec = &loaded.section;
    let scenario = loaded.scenario()?;
    let mut params = EscapeParams::default();
    if let Some(v) = sec.epsilon {
        params.epsilon = v;
    }
    if let Some(v) = sec.rho {
        params.rho = v;
    }
    if let Some(v) = sec.nu {
        params.nu = v;
    }
    if let Some(v) = sec.m0 {
        params.m0 = v;
    }
    if let Some(v) = sec.delta {
        params.delta = v;
    }
    if let Some(v) = sec.r0 {
        params.r0 = v;
    }
    if let Some(v) = sec.xi0_norm {
        params.xi0_norm = v;
    }
    params.validate()?;
    let cutoffs = CutoffFamily::new(&params)?;
    let [nr, na, nm, nb] = sec.grid.unwrap_or([64, 64, 32, 32]);
    if nr < 2 || na == 0 || nm < 2 || nb == 0 {
        return Err(ConfigError::Invalid("grid shape too small".to_string()).into());
    }
    let grid = EscapeGrid::with_shape(&params, nr, na, nm, nb);
    let outcome = check_escape_inequalities(&params, &cutoffs, &scenario.field, &grid)?;
    report.write_json("report.json", &outcome)?;

    report.line(format!(
        "swept {} phase-space points ({} in the localized support)",
        outcome.grid_points, outcome.support_points
    ));
    report.line(format!(
        "margins: radial {:.3e}, transport {:.3e}, support {:.3e}",
        outcome.radial_growth_margin, outcome.transport_sign_margin, outcome.support_sign_margin
    ));
    report.line(format!(
        "drift bound: C = {:.4e}, C' = {:.4e}",
        outcome.drift_constant, outcome.drift_offset
    ));
    if let Some(floor) = sec.assert.min_margin {
        report.check_at_least("radial margin", outcome.radial_growth_margin, floor);
        report.check_at_least("transport margin", outcome.transport_sign_margin, floor);
        report.check_at_least("support margin", outcome.support_sign_margin, floor);
    }
    if sec.assert.require_positive_drift {
        report.check(
            "drift constant",
            outcome.drift_constant > 0.0,
            format!("C = {:.4e} > 0", outcome.drift_constant),
        );
    }
    Ok(())
}

fn default_n_nodes() -> usize {
    200
}

fn default_n_vectors() -> usize {
    20
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct FuncalcAssert {
    /// Ceiling for the relative backend discrepancy.
    pub max_rel_gap: Option<f64>,
    /// Floor for the fitted decay order of the extension's dbar.
    pub min_dbar_slope: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FuncalcSection {
    #[serde(default = "default_n_nodes")]
    pub n_nodes: usize,
    /// Semiclassical scale applied as `theta(h^2 P)`.
    pub h: f64,
    #[serde(default = "default_n_vectors")]
    pub n_vectors: usize,
    pub seed: u64,
    #[serde(default)]
    pub assert: FuncalcAssert,
}

pub fn run_funcalc_check(
    loaded: LoadedConfig<FuncalcSection>,
    report: &mut RunReport,
) -> Result<(), CliError> {
    let sec = &loaded.section;
    if !(sec.h > 0.0) || sec.n_nodes < 8 || sec.n_vectors == 0 {
        return Err(ConfigError::Invalid(
            "funcalc-check needs h > 0, n_nodes >= 8, n_vectors >= 1".to_string(),
        )
        .into());
    }
    let op = flat_interval(sec.n_nodes)?;
    let spectral = SpectralData::compute(&op)?;
    let ext = AlmostAnalyticExtension::standard();
    let hs_opts = HsOpts::default();

    let gaps: Vec<Result<(f64, f64), CliError>> = (0..sec.n_vectors)
        .into_par_iter()
        .map(|k| {
            let v = random_vec(sec.n_nodes, sec.seed.wrapping_add(k as u64));
            let eig = apply_function(&op, &ext, sec.h, &v, &Backend::Eigen(&spectral))?;
            let hs = apply_function(&op, &ext, sec.h, &v, &Backend::Hs(&hs_opts))?;
            let gap = eig
                .iter()
                .zip(&hs)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            Ok((gap, gap / l2(&v)))
        })
        .collect();
    let mut rows = Vec::with_capacity(sec.n_vectors);
    let mut worst_rel = 0.0f64;
    for (k, g) in gaps.into_iter().enumerate() {
        let (gap, rel) = g?;
        worst_rel = worst_rel.max(rel);
        rows.push(vec![format!("{k}"), cell(gap), cell(rel)]);
    }
    report.write_csv("backends.csv", "vector,gap,rel_gap", &rows)?;

    let xs: Vec<f64> = (0..60).map(|i| 0.5 + 1.5 * i as f64 / 59.0).collect();
    let ladder = [1e-1, 1e-2, 1e-3, 1e-4];
    let mut dbar_rows = Vec::new();
    let mut pts = Vec::new();
    for &y in &ladder {
        let sup = xs
            .iter()
            .map(|&x| ext.dbar(x, y).norm())
            .fold(0.0f64, f64::max);
        pts.push((y, sup));
        dbar_rows.push(vec![cell(y), cell(sup)]);
    }
    let slope = fit_loglog_slope(&pts);
    report.write_csv("dbar.csv", "y,sup_dbar", &dbar_rows)?;
    report.write_json(
        "summary.json",
        &serde_json::json!({
            "max_rel_gap": worst_rel,
            "dbar_slope": slope,
            "extension_order": ext.order,
        }),
    )?;

    report.line(format!(
        "backend agreement over {} vectors: worst relative gap {worst_rel:.3e}",
        sec.n_vectors
    ));
    report.line(format!("dbar decay slope {slope:.4} (order {})", ext.order));
    if let Some(ceil) = sec.assert.max_rel_gap {
        report.check_at_most("backend gap", worst_rel, ceil);
    }
    if let Some(floor) = sec.assert.min_dbar_slope {
        report.check_at_least("dbar slope", slope, floor);
    }
    Ok(())
}

fn variant_from_label(label: &str) -> Result<ScanVariant, ConfigError> {
    Ok(match label {
        "cutoff-commutator" => ScanVariant::CutoffCommutator,
        "filtered-gradient" => ScanVariant::FilteredGradient,
        "commutator-gradient" => ScanVariant::CommutatorGradient,
        "quarter-power-commutator" => ScanVariant::QuarterPowerCommutator,
        other => {
            return Err(ConfigError::Invalid(format!(
                "unknown scan variant {other:?}"
            )))
        }
    })
}

fn variant_label(v: ScanVariant) -> &'static str {
    match v {
        ScanVariant::CutoffCommutator => "cutoff-commutator",
        ScanVariant::FilteredGradient => "filtered-gradient",
        ScanVariant::CommutatorGradient => "commutator-gradient",
        ScanVariant::QuarterPowerCommutator => "quarter-power-commutator",
    }
}

fn default_variants() -> Vec<String> {
    vec![
        "cutoff-commutator".to_string(),
        "filtered-gradient".to_string(),
        "commutator-gradient".to_string(),
        "quarter-power-commutator".to_string(),
    ]
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct CommutatorAssert {
    /// Slope windows `[lo, hi]` per variant label.
    #[serde(default)]
    pub slopes: std::collections::BTreeMap<String, [f64; 2]>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommutatorSection {
    pub n_nodes: usize,
    pub chi: CutoffConfig,
    pub theta: CutoffConfig,
    /// Scales `h = 2^-k` for the listed exponents.
    pub h_exponents: Vec<u32>,
    #[serde(default = "default_variants")]
    pub variants: Vec<String>,
    #[serde(default)]
    pub assert: CommutatorAssert,
}

pub fn run_commutator_scan(
    loaded: LoadedConfig<CommutatorSection>,
    only_variant: Option<&str>,
    report: &mut RunReport,
) -> Result<(), CliError> {
    let sec = &loaded.section;
    if sec.h_exponents.len() < 2 || sec.n_nodes < 8 {
        return Err(ConfigError::Invalid(
            "commutator-scan needs n_nodes >= 8 and at least two scales".to_string(),
        )
        .into());
    }
    let labels: Vec<String> = match only_variant {
        Some(v) => vec![v.to_string()],
        None => sec.variants.clone(),
    };
    let variants = labels
        .iter()
        .map(|l| variant_from_label(l))
        .collect::<Result<Vec<_>, _>>()?;
    let chi_fn = sec.chi.build()?;
    let theta = sec.theta.build()?;
    let h_list: Vec<f64> = sec
        .h_exponents
        .iter()
        .map(|&k| (2.0f64).powi(-(k as i32)))
        .collect();

    let op = flat_interval(sec.n_nodes)?;
    let spectral = SpectralData::compute(&op)?;
    let chi = op.sample(|p| chi_fn.eval(p[0]));

    let mut rows = Vec::new();
    let mut slopes = std::collections::BTreeMap::new();
    for &variant in &variants {
        let scan = commutator_scan(&op, &spectral, &chi, &theta, &h_list, variant)?;
        let label = variant_label(variant);
        for (h, norm) in &scan.norms {
            rows.push(vec![label.to_string(), cell(*h), cell(*norm)]);
        }
        report.line(format!("{label}: slope {:.4}", scan.slope));
        slopes.insert(label.to_string(), scan.slope);
    }
    report.write_csv("norms.csv", "variant,h,norm", &rows)?;
    report.write_json("slopes.json", &slopes)?;

    for (label, window) in &sec.assert.slopes {
        let Some(slope) = slopes.get(label) else {
            continue;
        };
        report.check(
            &format!("slope {label}"),
            (window[0]..=window[1]).contains(slope),
            format!("{slope:.4} in [{}, {}]", window[0], window[1]),
        );
    }
    Ok(())
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ResolventAssert {
    /// Ceiling for `|u| |Im z| / |f| - 1`.
    pub max_slack: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolventSection {
    pub n_nodes: usize,
    /// Semiclassical scale: the solve is `(h^2 P - z) u = f`.
    pub h: f64,
    pub z_re: Vec<f64>,
    pub z_im: Vec<f64>,
    #[serde(default = "default_n_vectors")]
    pub n_vectors: usize,
    pub seed: u64,
    #[serde(default)]
    pub assert: ResolventAssert,
}

pub fn run_resolvent_check(
    loaded: LoadedConfig<ResolventSection>,
    report: &mut RunReport,
) -> Result<(), CliError> {
    let sec = &loaded.section;
    if sec.z_re.is_empty() || sec.z_im.is_empty() || sec.n_vectors == 0 {
        return Err(ConfigError::Invalid(
            "resolvent-check needs z values and vectors".to_string(),
        )
        .into());
    }
    for &im in &sec.z_im {
        if im == 0.0 {
            return Err(
                ConfigError::Invalid("Im z must be nonzero for the resolvent".to_string()).into(),
            );
        }
    }
    let op = flat_interval(sec.n_nodes)?;
    let mut combos = Vec::new();
    for &re in &sec.z_re {
        for &im in &sec.z_im {
            for k in 0..sec.n_vectors {
                combos.push((re, im, k));
            }
        }
    }
    let outcomes: Vec<Result<(Vec<String>, f64), CliError>> = combos
        .par_iter()
        .map(|&(re, im, k)| {
            let f = random_vec(sec.n_nodes, sec.seed.wrapping_add(k as u64));
            let rep = resolvent_check(&op, Complex64::new(re, im), sec.h, &f)?;
            let row = vec![
                cell(re),
                cell(im),
                format!("{k}"),
                cell(rep.u_norm),
                cell(rep.f_norm),
                cell(rep.simple_ratio),
                cell(rep.fitted_constant),
            ];
            Ok((row, rep.simple_ratio))
        })
        .collect();
    let mut rows = Vec::with_capacity(outcomes.len());
    let mut worst = f64::NEG_INFINITY;
    for r in outcomes {
        let (row, ratio) = r?;
        worst = worst.max(ratio);
        rows.push(row);
    }
    report.write_csv(
        "checks.csv",
        "z_re,z_im,vector,u_norm,f_norm,simple_ratio,fitted_constant",
        &rows,
    )?;
    report.line(format!(
        "{} solves; worst |u| |Im z| / |f| = {worst:.12}",
        rows.len()
    ));
    if let Some(slack) = sec.assert.max_slack {
        report.check_at_most("resolvent bound", worst, 1.0 + slack);
    }
    Ok(())
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct LpAssert {
    /// Ceiling for the reconstruction residual relative to `max(|v|, 1)`.
    pub max_residual: Option<f64>,
    /// Window for the summed piece energy over `|v|^2`.
    pub energy_window: Option<[f64; 2]>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LpSection {
    pub n_nodes: usize,
    #[serde(default = "default_n_vectors")]
    pub n_vectors: usize,
    pub seed: u64,
    /// Top dyadic exponent; defaults to the first covering the spectrum.
    pub p_max: Option<u32>,
    #[serde(default)]
    pub assert: LpAssert,
}

pub fn run_lp_check(
    loaded: LoadedConfig<LpSection>,
    report: &mut RunReport,
) -> Result<(), CliError> {
    let sec = &loaded.section;
    if sec.n_nodes < 8 || sec.n_vectors == 0 {
        return Err(ConfigError::Invalid(
            "lp-check needs n_nodes >= 8 and n_vectors >= 1".to_string(),
        )
        .into());
    }
    let op = flat_interval(sec.n_nodes)?;
    let spectral = SpectralData::compute(&op)?;
    let lambda_max = *spectral
        .eigenvalues
        .last()
        .expect("spectrum nonempty");
    let p_max = sec
        .p_max
        .unwrap_or_else(|| lambda_max.log2().ceil().max(0.0) as u32);

    let outcomes: Vec<Result<(f64, f64), CliError>> = (0..sec.n_vectors)
        .into_par_iter()
        .map(|k| {
            let v = random_vec(sec.n_nodes, sec.seed.wrapping_add(k as u64));
            let lp = littlewood_paley(&spectral, &v, p_max)?;
            let rec = lp.reconstruction();
            let residual = rec
                .iter()
                .zip(&v)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
                / l2(&v).max(1.0);
            let ratio = lp.energies.iter().sum::<f64>() / l2(&v).powi(2);
            Ok((residual, ratio))
        })
        .collect();
    let mut rows = Vec::with_capacity(sec.n_vectors);
    let mut worst_residual = 0.0f64;
    let mut ratio_lo = f64::INFINITY;
    let mut ratio_hi = f64::NEG_INFINITY;
    for (k, o) in outcomes.into_iter().enumerate() {
        let (residual, ratio) = o?;
        worst_residual = worst_residual.max(residual);
        ratio_lo = ratio_lo.min(ratio);
        ratio_hi = ratio_hi.max(ratio);
        rows.push(vec![format!("{k}"), cell(residual), cell(ratio)]);
    }
    report.write_csv("vectors.csv", "vector,residual,energy_ratio", &rows)?;
    report.line(format!(
        "{} vectors at p_max = {p_max}: residual <= {worst_residual:.3e}, energy ratio in [{ratio_lo:.4}, {ratio_hi:.4}]",
        sec.n_vectors
    ));
    if let Some(ceil) = sec.assert.max_residual {
        report.check_at_most("reconstruction residual", worst_residual, ceil);
    }
    if let Some([lo, hi]) = sec.assert.energy_window {
        report.check(
            "energy ratio",
            ratio_lo >= lo && ratio_hi <= hi,
            format!("[{ratio_lo:.4}, {ratio_hi:.4}] within [{lo}, {hi}]"),
        );
    }
    Ok(())
}
