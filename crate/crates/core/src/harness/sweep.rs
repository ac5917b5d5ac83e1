//! Noise-level sweeps and stability slope fits.
//!
//! A sweep runs noise -> inversion -> error scoring over a grid of levels
//! and seeds against one prepared experiment, then fits a power law to the
//! level-error curve. The zero-level run measures the discretization floor
//! of the whole pipeline; the fit subtracts it in quadrature so the fitted
//! exponent reflects the response to data error, not scheme error.
//!
//! Points run in whatever thread pool is installed; every point draws from
//! its own RNG stream keyed by (seed, level index), and rows are collected
//! in the fixed point order, so reports are byte-identical at any thread
//! count.

use rayon::prelude::*;

use crate::carleman;
use crate::inversion::solve_outer;
use crate::mfg::{CipData, DataMode};

use super::config::mode_name;
use super::noise::{add_noise, NoiseSpec};
use super::profile::Experiment;
use super::{HarnessError, Result};

/// One (level, seed) inversion outcome. Failed points keep their place in
/// the row list with the failure text and quiet-NaN metrics.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub delta: f64,
    pub seed: u64,
    pub mode: DataMode,
    pub lambda_used: f64,
    pub err_gamma: f64,
    pub err_full: f64,
    pub residual: f64,
    pub failure: Option<String>,
}

impl SweepRow {
    pub fn succeeded(&self) -> bool {
        self.failure.is_none()
    }
}

/// Fitted power law `error ~ B * delta^alpha` in log-log coordinates.
#[derive(Debug, Clone, Copy)]
pub struct SlopeFit {
    pub alpha_hat: f64,
    pub b_hat: f64,
    pub r2: f64,
    /// Points entering the regression (after baseline subtraction).
    pub points: usize,
}

/// Sweep outcome: ordered rows, the fit when defined, and the predicted
/// exponent of the incomplete-data stability estimate for comparison.
#[derive(Debug, Clone)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub fit: Option<SlopeFit>,
    /// Set when the fit is undefined (too few usable levels).
    pub fit_note: Option<String>,
    pub alpha_predicted: f64,
}

/// Per-point RNG stream id: one splitmix64 round over the seed and the
/// level's position in the ladder.
fn mix_seed(seed: u64, level_index: u64) -> u64 {
    let mut z = seed ^ level_index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Run the full (levels x seeds) grid in the ambient thread pool.
///
/// A zero-level baseline point (first seed) is prepended when the ladder
/// does not already contain zero, so the fit's floor subtraction always has
/// a measurement to work from. Row order is the point order: baseline
/// first, then levels in the given order, seeds nested inside each level.
/// Individual failures are recorded in their row and the sweep continues.
pub fn run_sweep(
    exp: &Experiment,
    deltas: &[f64],
    seeds: &[u64],
    mode: DataMode,
) -> Result<SweepResult> {
    if deltas.is_empty() || seeds.is_empty() {
        return Err(HarnessError::Invalid("sweep needs at least one level and one seed".into()));
    }
    for &d in deltas {
        if !d.is_finite() || !(0.0..1.0).contains(&d) {
            return Err(HarnessError::Invalid(format!("sweep level {d} outside [0, 1)")));
        }
    }
    let observed = exp.observed(mode)?;

    let mut points: Vec<(usize, f64, u64)> = Vec::with_capacity(deltas.len() * seeds.len() + 1);
    if !deltas.contains(&0.0) {
        points.push((deltas.len(), 0.0, seeds[0]));
    }
    for (i, &d) in deltas.iter().enumerate() {
        for &s in seeds {
            points.push((i, d, s));
        }
    }

    let rows: Vec<SweepRow> = points
        .par_iter()
        .map(|&(idx, delta, seed)| run_point(exp, &observed, mode, idx, delta, seed))
        .collect();

    let (fit, fit_note) = match fit_slope(&rows) {
        Ok(f) => (Some(f), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let alpha_predicted = carleman::holder_exponent(exp.gamma(), exp.grid.a(0), exp.nu0())?;
    Ok(SweepResult { rows, fit, fit_note, alpha_predicted })
}

fn run_point(
    exp: &Experiment,
    observed: &CipData,
    mode: DataMode,
    level_index: usize,
    delta: f64,
    seed: u64,
) -> SweepRow {
    let mut lambda_used = f64::NAN;
    let attempt = (|| -> Result<(f64, f64, f64)> {
        let noise = NoiseSpec::new(delta, mix_seed(seed, level_index as u64))?;
        let noisy = add_noise(observed, &noise)?;
        lambda_used = exp.lambda_for(mode, delta)?;
        let eps = exp.eps_for_level(delta);
        let prob = exp.problem(noisy, lambda_used, eps, exp.sweep_solve)?;
        let mut res = solve_outer(&prob)?;
        let report = res.score_against(&exp.b_true, exp.gamma())?;
        let residual = res.residual_history.last().copied().unwrap_or(f64::NAN);
        Ok((report.l2_gamma, report.l2_full, residual))
    })();
    match attempt {
        Ok((err_gamma, err_full, residual)) => SweepRow {
            delta,
            seed,
            mode,
            lambda_used,
            err_gamma,
            err_full,
            residual,
            failure: None,
        },
        Err(e) => SweepRow {
            delta,
            seed,
            mode,
            lambda_used,
            err_gamma: f64::NAN,
            err_full: f64::NAN,
            residual: f64::NAN,
            failure: Some(e.to_string()),
        },
    }
}

/// Log-log least squares of the collar error against the level.
///
/// The zero-level rows define the floor; their mean-square error is removed
/// from each positive-level row in quadrature before taking logs. Rows at
/// or below the floor drop out. At least three distinct positive levels
/// must survive.
pub fn fit_slope(rows: &[SweepRow]) -> Result<SlopeFit> {
    let mut floor_sq = 0.0;
    let mut floor_n = 0usize;
    for r in rows {
        if r.succeeded() && r.delta == 0.0 && r.err_gamma.is_finite() {
            floor_sq += r.err_gamma * r.err_gamma;
            floor_n += 1;
        }
    }
    if floor_n > 0 {
        floor_sq /= floor_n as f64;
    }

    let mut pts: Vec<(f64, f64)> = Vec::new();
    for r in rows {
        if !r.succeeded() || r.delta <= 0.0 || !r.err_gamma.is_finite() {
            continue;
        }
        let adj_sq = r.err_gamma * r.err_gamma - floor_sq;
        if adj_sq > 0.0 {
            pts.push((r.delta.ln(), 0.5 * adj_sq.ln()));
        }
    }
    let mut distinct: Vec<u64> = pts.iter().map(|(x, _)| x.to_bits()).collect();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(HarnessError::InsufficientPoints { found: distinct.len() });
    }

    let n = pts.len() as f64;
    let mx = pts.iter().map(|(x, _)| x).sum::<f64>() / n;
    let my = pts.iter().map(|(_, y)| y).sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for &(x, y) in &pts {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
    }
    let alpha_hat = sxy / sxx;
    let intercept = my - alpha_hat * mx;
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for &(x, y) in &pts {
        let e = y - (intercept + alpha_hat * x);
        ss_res += e * e;
        ss_tot += (y - my) * (y - my);
    }
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    Ok(SlopeFit { alpha_hat, b_hat: intercept.exp(), r2, points: pts.len() })
}

// ---------------------------------------------------------------------------
// report rendering

pub const CSV_HEADER: &str = "delta,seed,mode,lambda,err_gamma,err_full";

/// Render rows to CSV. Floats use the shortest round-trip form, so equal
/// values always produce equal bytes.
pub fn rows_to_csv(rows: &[SweepRow]) -> String {
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.delta,
            r.seed,
            mode_name(r.mode),
            r.lambda_used,
            r.err_gamma,
            r.err_full
        ));
    }
    out
}

/// JSON mirror of the sweep: same row fields as the CSV plus the residual,
/// failures, and the fit, under a versioned schema tag. Non-finite floats
/// render as null.
pub fn result_to_json(res: &SweepResult) -> serde_json::Value {
    let rows: Vec<serde_json::Value> = res
        .rows
        .iter()
        .map(|r| {
            serde_json::json!({
                "delta": r.delta,
                "seed": r.seed,
                "mode": mode_name(r.mode),
                "lambda": r.lambda_used,
                "err_gamma": r.err_gamma,
                "err_full": r.err_full,
                "residual": r.residual,
                "failure": r.failure,
            })
        })
        .collect();
    serde_json::json!({
        "schema": "mfglab.sweep.v1",
        "alpha_predicted": res.alpha_predicted,
        "fit": res.fit.map(|f| {
            serde_json::json!({
                "alpha_hat": f.alpha_hat,
                "b_hat": f.b_hat,
                "r2": f.r2,
                "points": f.points,
            })
        }),
        "fit_note": res.fit_note,
        "rows": rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::ExperimentConfig;
    use crate::harness::profile::build_experiment;

    fn row(delta: f64, err: f64) -> SweepRow {
        SweepRow {
            delta,
            seed: 1,
            mode: DataMode::Complete,
            lambda_used: 1.01,
            err_gamma: err,
            err_full: err,
            residual: 0.0,
            failure: None,
        }
    }

    #[test]
    fn exact_linear_power_law_is_recovered() {
        let rows: Vec<SweepRow> = [1e-4, 1e-3, 1e-2].iter().map(|&d| row(d, 2.0 * d)).collect();
        let fit = fit_slope(&rows).unwrap();
        assert!((fit.alpha_hat - 1.0).abs() < 1e-12);
        assert!((fit.b_hat - 2.0).abs() < 1e-12);
        assert!((fit.r2 - 1.0).abs() < 1e-12);
        assert_eq!(fit.points, 3);
    }

    #[test]
    fn quarter_power_law_is_recovered() {
        let rows: Vec<SweepRow> =
            [1e-4, 3e-4, 1e-3, 3e-3, 1e-2].iter().map(|&d| row(d, 0.7 * d.powf(0.25))).collect();
        let fit = fit_slope(&rows).unwrap();
        assert!((fit.alpha_hat - 0.25).abs() < 1e-10);
        assert!((fit.b_hat - 0.7).abs() < 1e-10);
    }

    #[test]
    fn baseline_is_subtracted_in_quadrature() {
        let floor = 3e-3;
        let mut rows = vec![row(0.0, floor)];
        for &d in &[1e-3, 3e-3, 1e-2] {
            let err = ((2.0 * d) * (2.0 * d) + floor * floor).sqrt();
            rows.push(row(d, err));
        }
        let fit = fit_slope(&rows).unwrap();
        assert!((fit.alpha_hat - 1.0).abs() < 1e-10);
        assert!((fit.b_hat - 2.0).abs() < 1e-10);
    }

    #[test]
    fn too_few_distinct_levels_is_an_error() {
        let rows = vec![row(1e-3, 1e-3), row(1e-3, 1.1e-3), row(1e-2, 5e-3)];
        match fit_slope(&rows) {
            Err(HarnessError::InsufficientPoints { found }) => assert_eq!(found, 2),
            other => panic!("expected insufficient points, got {other:?}"),
        }
    }

    #[test]
    fn rows_below_the_floor_drop_out() {
        let mut rows = vec![row(0.0, 1e-3)];
        rows.push(row(1e-5, 0.5e-3));
        rows.push(row(1e-4, 1.2e-3));
        rows.push(row(1e-3, 4e-3));
        rows.push(row(1e-2, 40e-3));
        let fit = fit_slope(&rows).unwrap();
        assert_eq!(fit.points, 3);
    }

    #[test]
    fn csv_header_and_shape_are_stable() {
        let rows = vec![row(1e-3, 2e-3)];
        let csv = rows_to_csv(&rows);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "delta,seed,mode,lambda,err_gamma,err_full");
        let data = lines.next().unwrap();
        assert_eq!(data.split(',').count(), 6);
        assert!(data.starts_with("0.001,1,complete,1.01,"));
    }

    #[test]
    fn json_mirror_is_versioned_and_null_safe() {
        let mut rows = vec![row(1e-3, 2e-3)];
        rows.push(SweepRow { failure: Some("boom".into()), err_gamma: f64::NAN, ..rows[0].clone() });
        let res = SweepResult { rows, fit: None, fit_note: Some("n/a".into()), alpha_predicted: 0.4 };
        let v = result_to_json(&res);
        assert_eq!(v["schema"], "mfglab.sweep.v1");
        assert!(v["rows"][1]["err_gamma"].is_null());
        assert_eq!(v["rows"][1]["failure"], "boom");
    }

    /// End-to-end mini sweep at a coarse grid: the single-level ladder is
    /// flagged as unfittable, rows stay ordered, and the rendered CSV is
    /// byte-identical across thread counts.
    #[test]
    fn mini_sweep_is_thread_invariant() {
        let mut cfg = ExperimentConfig::default();
        cfg.grid.nx = vec![31];
        cfg.grid.nt = 21;
        cfg.sweep.outer_iters = Some(4);
        cfg.sweep.cg_max_iters = Some(1500);
        let exp = build_experiment(&cfg).unwrap();
        let deltas = [3e-3];
        let seeds = [11u64];

        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| run_sweep(&exp, &deltas, &seeds, DataMode::Complete)).unwrap()
        };
        let a = run(1);
        let b = run(4);

        assert_eq!(a.rows.len(), 2, "baseline point plus one level");
        assert_eq!(a.rows[0].delta, 0.0);
        assert!(a.fit.is_none());
        assert!(a.fit_note.is_some());
        for r in &a.rows {
            assert!(r.succeeded(), "row failed: {:?}", r.failure);
        }
        assert_eq!(rows_to_csv(&a.rows), rows_to_csv(&b.rows));
        assert_eq!(
            serde_json::to_string(&result_to_json(&a)).unwrap(),
            serde_json::to_string(&result_to_json(&b)).unwrap()
        );
    }
}
