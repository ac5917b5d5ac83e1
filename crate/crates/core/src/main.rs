//! Command-line front end.
//!
//! Every subcommand is driven by one TOML config (defaults apply when the
//! flag is omitted) and writes its outputs into `--out`: binary `.field`
//! files for grid functions and versioned JSON documents for everything
//! structured. Exit codes: 0 success, 2 configuration or input error,
//! 3 numerical failure or failed verification.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use mfglab::carleman::{calibrate_lambda0, check_integral, standard_battery, OperatorSign};
use mfglab::grid::{time_slice_space, write_field};
use mfglab::harness::config::{mode_name, parse_mode, ExperimentConfig};
use mfglab::harness::profile::{build_experiment, instance_coefficients, solve_instance};
use mfglab::harness::{
    add_noise_with_report, result_to_json, rows_to_csv, run_sweep, HarnessError, NoiseReport,
    NoiseSpec, SweepRow,
};
use mfglab::inversion::solve_outer;
use mfglab::mfg::{generate_cip_data, LateralData, MfgError};
use mfglab::transform::{diff_triple, residual_bounds, satisfied_fraction, transform};

type Result<T> = std::result::Result<T, HarnessError>;

#[derive(Parser)]
#[command(
    name = "mfglab",
    version,
    about = "Forward solves, data extraction, estimate checks, and inversions \
             for a coupled mean-field game system"
)]
struct Cli {
    /// Experiment configuration (TOML). Documented defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Directory for emitted fields and reports.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// Worker threads for sweep points. Results do not depend on this.
    #[arg(long, global = true, value_name = "N", default_value_t = 1)]
    threads: usize,
    /// Override the noise seed from the config.
    #[arg(long, global = true, value_name = "SEED")]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Solve the coupled system forward and write both unknowns.
    Forward,
    /// Extract the measurement bundle, optionally noisy, to channel files.
    MakeData,
    /// Calibrate the weight threshold and scan the estimate's constant.
    VerifyCarleman,
    /// Check the endpoint identities of the difference transformation.
    TransformCheck,
    /// Run one inversion at the configured noise level.
    Invert,
    /// Run the level/seed sweep and fit the stability slope.
    Sweep,
    /// Re-render the sweep report from its JSON mirror.
    Report,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", render_error(&e));
            ExitCode::from(exit_class(&e))
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.noise.seed = seed;
    }
    cfg.validate()?;
    fs::create_dir_all(&cli.out)?;
    match cli.cmd {
        Cmd::Forward => cmd_forward(&cfg, &cli.out),
        Cmd::MakeData => cmd_make_data(&cfg, &cli.out),
        Cmd::VerifyCarleman => cmd_verify_carleman(&cfg, &cli.out),
        Cmd::TransformCheck => cmd_transform_check(&cfg, &cli.out),
        Cmd::Invert => cmd_invert(&cfg, &cli.out),
        Cmd::Sweep => cmd_sweep(&cfg, &cli.out, cli.threads),
        Cmd::Report => cmd_report(&cli.out),
    }
}

fn render_error(e: &HarnessError) -> String {
    match e {
        HarnessError::Mfg(MfgError::CornerMismatch { .. }) => format!("corner consistency: {e}"),
        _ => e.to_string(),
    }
}

/// Exit classes per the external contract: bad inputs are 2, everything
/// that failed while computing is 3.
fn exit_class(e: &HarnessError) -> u8 {
    match e {
        HarnessError::Config(_)
        | HarnessError::Invalid(_)
        | HarnessError::Io(_)
        | HarnessError::Json(_)
        | HarnessError::Mfg(MfgError::CornerMismatch { .. }) => 2,
        _ => 3,
    }
}

fn write_json(path: &Path, doc: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(doc)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn noise_report_json(report: &NoiseReport) -> serde_json::Value {
    let rows: Vec<serde_json::Value> = report
        .channels
        .iter()
        .map(|c| {
            json!({
                "channel": c.channel.name(),
                "measured": c.measured,
                "binding": c.binding.map(|b| b.name()),
            })
        })
        .collect();
    json!(rows)
}

// ---------------------------------------------------------------------------
// subcommands

fn cmd_forward(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let grid = cfg.grid_spec()?;
    let (coeffs, _) = instance_coefficients(cfg, &grid, true)?;
    let sol = solve_instance(cfg, &coeffs)?;
    write_field(&sol.u, &out.join("u.field"))?;
    write_field(&sol.m, &out.join("m.field"))?;
    let doc = json!({
        "schema": "mfglab.forward.v1",
        "n": grid.n(),
        "nx": (0..grid.n()).map(|d| grid.nx(d)).collect::<Vec<_>>(),
        "nt": grid.nt(),
        "picard_residuals": sol.picard_residuals,
        "files": {"u": "u.field", "m": "m.field"},
    });
    write_json(&out.join("forward.json"), &doc)?;
    println!(
        "forward: converged in {} fixed-point iterations, wrote u.field m.field",
        sol.picard_residuals.len()
    );
    Ok(())
}

fn write_lateral(
    out: &Path,
    prefix: &str,
    data: &LateralData,
    files: &mut serde_json::Map<String, serde_json::Value>,
) -> Result<()> {
    let mut entries = Vec::new();
    for (face, f) in data {
        let name =
            format!("{prefix}_ax{}{}.field", face.axis, if face.positive { 'p' } else { 'm' });
        write_field(f, &out.join(&name))?;
        entries.push(json!({"face": face.to_string(), "file": name}));
    }
    files.insert(prefix.to_string(), json!(entries));
    Ok(())
}

fn cmd_make_data(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let grid = cfg.grid_spec()?;
    let (coeffs, _) = instance_coefficients(cfg, &grid, true)?;
    let sol = solve_instance(cfg, &coeffs)?;
    let mode = cfg.mode()?;
    let clean = generate_cip_data(&sol.u, &sol.m, mode)?;
    let channels = cfg.noise_channels()?;
    let spec = NoiseSpec::new(cfg.noise.delta, cfg.noise.seed)?.with_channels(&channels)?;
    let (noisy, report) = add_noise_with_report(&clean, &spec)?;

    let mut files = serde_json::Map::new();
    for (name, field) in [
        ("u_initial", &noisy.u_initial),
        ("u_final", &noisy.u_final),
        ("m_initial", &noisy.m_initial),
        ("m_final", &noisy.m_final),
    ] {
        let file = format!("{name}.field");
        write_field(field, &out.join(&file))?;
        files.insert(name.to_string(), json!(file));
    }
    write_lateral(out, "u_dirichlet", &noisy.u_dirichlet, &mut files)?;
    write_lateral(out, "u_neumann", &noisy.u_neumann, &mut files)?;
    write_lateral(out, "m_dirichlet", &noisy.m_dirichlet, &mut files)?;
    write_lateral(out, "m_neumann", &noisy.m_neumann, &mut files)?;

    let doc = json!({
        "schema": "mfglab.data.v1",
        "mode": mode_name(mode),
        "delta": spec.delta(),
        "seed": spec.seed(),
        "channels": channels.iter().map(|c| c.name()).collect::<Vec<_>>(),
        "files": files,
        "noise": noise_report_json(&report),
    });
    write_json(&out.join("data.json"), &doc)?;
    println!(
        "make-data: {} mode at level {}, wrote {} endpoint files and data.json",
        mode_name(mode),
        spec.delta(),
        4
    );
    Ok(())
}

fn cmd_verify_carleman(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let grid = cfg.grid_spec()?;
    let battery = standard_battery(&grid)?;
    let base = cfg.carleman_params()?;
    let lambda0 = calibrate_lambda0(&battery, &base, cfg.carleman.lambda_max)?;
    let steps = cfg.carleman.lambda_steps;
    let mut rows = Vec::new();
    let mut all_positive = true;
    for i in 0..steps {
        let lambda = lambda0 + cfg.carleman.lambda_window * i as f64 / (steps - 1) as f64;
        let p = base.with_lambda(lambda)?;
        let mut entry = serde_json::Map::new();
        entry.insert("lambda".into(), json!(lambda));
        for (key, sign) in
            [("backward", OperatorSign::Backward), ("forward", OperatorSign::Forward)]
        {
            let mut min_c = f64::INFINITY;
            let mut min_c_full = f64::INFINITY;
            for u in &battery {
                let rep = check_integral(u, &p, sign)?;
                min_c = min_c.min(rep.admissible_c);
                min_c_full = min_c_full.min(rep.admissible_c_full);
            }
            all_positive &= min_c > 0.0;
            entry.insert(
                key.into(),
                json!({"min_admissible_c": min_c, "min_admissible_c_full": min_c_full}),
            );
        }
        rows.push(serde_json::Value::Object(entry));
    }
    let doc = json!({
        "schema": "mfglab.carleman.v1",
        "lambda0": lambda0,
        "battery_size": battery.len(),
        "all_positive": all_positive,
        "rows": rows,
    });
    write_json(&out.join("carleman.json"), &doc)?;
    println!(
        "verify-carleman: lambda0 = {lambda0:.6}, {steps} window points, admissible constant {}",
        if all_positive { "positive throughout" } else { "NOT positive everywhere" }
    );
    if !all_positive {
        return Err(HarnessError::Check(
            "admissible constant not positive across the window".into(),
        ));
    }
    Ok(())
}

fn cmd_transform_check(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let exp = build_experiment(cfg)?;
    let mode = cfg.mode()?;
    let data1 = generate_cip_data(&exp.truth.u, &exp.truth.m, mode)?;
    let data2 = generate_cip_data(&exp.reference.u, &exp.reference.m, mode)?;
    let tf = transform(
        &exp.coeffs_true,
        &exp.b_ref,
        &exp.truth,
        &exp.reference,
        &data1,
        &data2,
        exp.solve.c_min,
    )?;
    let bundle =
        diff_triple(&exp.truth, &exp.reference, &exp.b_true, &exp.b_ref, &data1, &data2)?;

    let last = exp.grid.nt() - 1;
    let w0_sup = time_slice_space(&tf.w, 0)?.linf();
    let wt_sup = time_slice_space(&tf.w, last)?.linf();
    let v0 = time_slice_space(&tf.v, 0)?;
    let vt = time_slice_space(&tf.v, last)?;
    let amplitude_gap = v0.add(&tf.b_tilde)?.linf();
    let endpoint_gap = v0.sub(&vt)?.linf();

    let mut ladder = Vec::new();
    for c1 in [1.0, 2.0, 5.0, 10.0, 20.0, 50.0] {
        let rb = residual_bounds(&tf, &bundle, c1)?;
        ladder.push(json!({
            "c1": c1,
            "fraction_v": satisfied_fraction(&rb.lhs_v, &rb.rhs_v),
            "fraction_w": satisfied_fraction(&rb.lhs_w, &rb.rhs_w),
        }));
    }

    let tol = cfg.transform.tol;
    let pass = w0_sup <= tol && wt_sup <= tol && amplitude_gap <= tol && endpoint_gap <= tol;
    let doc = json!({
        "schema": "mfglab.transform.v1",
        "tol": tol,
        "pass": pass,
        "w_start_sup": w0_sup,
        "w_end_sup": wt_sup,
        "v_start_plus_amplitude_sup": amplitude_gap,
        "v_start_vs_end_sup": endpoint_gap,
        "inequality_ladder": ladder,
    });
    write_json(&out.join("transform.json"), &doc)?;
    println!(
        "transform-check: |w(0)| {w0_sup:.3e}, |w(T)| {wt_sup:.3e}, \
         |v(0)+b~| {amplitude_gap:.3e}, |v(0)-v(T)| {endpoint_gap:.3e} (tol {tol:.1e})"
    );
    if !pass {
        return Err(HarnessError::Check(format!("endpoint identity sup exceeds {tol}")));
    }
    Ok(())
}

fn cmd_invert(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let exp = build_experiment(cfg)?;
    let mode = cfg.mode()?;
    let observed = exp.observed(mode)?;
    let delta = cfg.noise.delta;
    let channels = cfg.noise_channels()?;
    let spec = NoiseSpec::new(delta, cfg.noise.seed)?.with_channels(&channels)?;
    let (noisy, noise_report) = add_noise_with_report(&observed, &spec)?;
    let lambda = exp.lambda_for(mode, delta)?;
    let eps = exp.eps_for_level(delta);
    let problem = exp.problem(noisy, lambda, eps, exp.solve)?;
    let mut res = solve_outer(&problem)?;
    let errors = res.score_against(&exp.b_true, exp.gamma())?;

    write_field(&res.b_hat, &out.join("b_hat.field"))?;
    write_field(&res.u_hat, &out.join("u_hat.field"))?;
    write_field(&res.m_hat, &out.join("m_hat.field"))?;
    let doc = json!({
        "schema": "mfglab.invert.v1",
        "mode": mode_name(mode),
        "delta": delta,
        "seed": spec.seed(),
        "lambda": lambda,
        "eps": eps,
        "converged": res.converged,
        "residual_history": res.residual_history,
        "errors": {
            "l2_gamma": errors.l2_gamma,
            "l2_complement": errors.l2_complement,
            "l2_full": errors.l2_full,
            "linf": errors.linf,
        },
        "noise": noise_report_json(&noise_report),
        "files": {"b_hat": "b_hat.field", "u_hat": "u_hat.field", "m_hat": "m_hat.field"},
    });
    write_json(&out.join("invert.json"), &doc)?;
    println!(
        "invert: collar L2 error {:.6e}, full-domain {:.6e}, converged: {}",
        errors.l2_gamma, errors.l2_full, res.converged
    );
    Ok(())
}

fn cmd_sweep(cfg: &ExperimentConfig, out: &Path, threads: usize) -> Result<()> {
    let exp = build_experiment(cfg)?;
    let mode = cfg.mode()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| HarnessError::Invalid(format!("thread pool: {e}")))?;
    let result = pool.install(|| run_sweep(&exp, &cfg.sweep.deltas, &cfg.sweep.seeds, mode))?;

    fs::write(out.join("sweep.csv"), rows_to_csv(&result.rows))?;
    write_json(&out.join("sweep.json"), &result_to_json(&result))?;
    let failed = result.rows.iter().filter(|r| !r.succeeded()).count();
    match &result.fit {
        Some(fit) => println!(
            "sweep: {} rows ({} failed), alpha_hat {:.4} (predicted {:.4}), r2 {:.4}",
            result.rows.len(),
            failed,
            fit.alpha_hat,
            result.alpha_predicted,
            fit.r2
        ),
        None => println!(
            "sweep: {} rows ({} failed), fit undefined: {}",
            result.rows.len(),
            failed,
            result.fit_note.as_deref().unwrap_or("no note")
        ),
    }
    if failed == result.rows.len() {
        return Err(HarnessError::Check("every sweep point failed".into()));
    }
    Ok(())
}

fn row_from_json(v: &serde_json::Value) -> Result<SweepRow> {
    let num = |key: &str| v[key].as_f64().unwrap_or(f64::NAN);
    let seed = v["seed"]
        .as_u64()
        .ok_or_else(|| HarnessError::Config("sweep row is missing a seed".into()))?;
    let mode = parse_mode(
        v["mode"]
            .as_str()
            .ok_or_else(|| HarnessError::Config("sweep row is missing a mode".into()))?,
    )?;
    Ok(SweepRow {
        delta: num("delta"),
        seed,
        mode,
        lambda_used: num("lambda"),
        err_gamma: num("err_gamma"),
        err_full: num("err_full"),
        residual: num("residual"),
        failure: v["failure"].as_str().map(String::from),
    })
}

fn cmd_report(out: &Path) -> Result<()> {
    let path = out.join("sweep.json");
    let text = fs::read_to_string(&path)
        .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
    let doc: serde_json::Value = serde_json::from_str(&text)?;
    if doc["schema"] != "mfglab.sweep.v1" {
        return Err(HarnessError::Config(format!(
            "{}: unrecognized schema {}",
            path.display(),
            doc["schema"]
        )));
    }
    let rows: Vec<SweepRow> = doc["rows"]
        .as_array()
        .ok_or_else(|| HarnessError::Config(format!("{}: missing rows", path.display())))?
        .iter()
        .map(row_from_json)
        .collect::<Result<_>>()?;
    fs::write(out.join("report.csv"), rows_to_csv(&rows))?;

    let failed = rows.iter().filter(|r| !r.succeeded()).count();
    println!("report: {} rows ({} failed), wrote report.csv", rows.len(), failed);
    let fit = &doc["fit"];
    if fit.is_null() {
        if let Some(note) = doc["fit_note"].as_str() {
            println!("  fit undefined: {note}");
        }
    } else {
        println!(
            "  fitted slope {} (amplitude {}, r2 {}, {} points), predicted exponent {}",
            fit["alpha_hat"],
            fit["b_hat"],
            fit["r2"],
            fit["points"],
            doc["alpha_predicted"]
        );
    }
    let mut by_level: Vec<(f64, Vec<f64>)> = Vec::new();
    for r in rows.iter().filter(|r| r.succeeded()) {
        match by_level.iter_mut().find(|(d, _)| *d == r.delta) {
            Some((_, errs)) => errs.push(r.err_gamma),
            None => by_level.push((r.delta, vec![r.err_gamma])),
        }
    }
    for (delta, errs) in &by_level {
        let mean = errs.iter().sum::<f64>() / errs.len() as f64;
        println!("  level {delta}: mean collar error {mean:.6e} over {} seeds", errs.len());
    }
    Ok(())
}
