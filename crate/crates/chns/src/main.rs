//! Command-line front end.
//!
//! ```text
//! chns simulate <config>                 run the time stepper
//! chns equilibrate <config>             multi-start energy minimization
//! chns verify <suite> [--size N]        run a verification suite
//! chns rate-fit <csv> [--column NAME]   fit the decay rate of a time series
//! ```
//!
//! Exit codes: 0 success, 1 failed check, 2 usage or config error.

use chns::config::{parse_config, RunConfig};
use chns::diagnostics;
use chns::error::Result;
use chns::evolution::{self, StepperConfig};
use chns::output::{self, JsonValue};
use chns::stationary::{self, FlowOptions};
use chns::verify;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let code = match args.first().map(|s| s.as_str()) {
        Some("simulate") => cmd_simulate(&args[1..]),
        Some("equilibrate") => cmd_equilibrate(&args[1..]),
        Some("verify") => cmd_verify(&args[1..]),
        Some("rate-fit") => cmd_rate_fit(&args[1..]),
        Some("--help") | Some("-h") | Some("help") => {
            print_usage();
            Ok(0)
        }
        _ => {
            print_usage();
            Ok(2)
        }
    };
    match code {
        Ok(0) => ExitCode::from(0),
        Ok(n) => ExitCode::from(n as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn print_usage() {
    eprintln!("usage:");
    eprintln!("  chns simulate <config>");
    eprintln!("  chns equilibrate <config>");
    eprintln!(
        "  chns verify <suite> [--size N]      suites: {}",
        verify::SUITES.join(", ")
    );
    eprintln!("  chns rate-fit <csv> [--column NAME]");
}

fn load_config(path: &str) -> Result<RunConfig> {
    let text = fs::read_to_string(path)?;
    parse_config(&text)
}

fn cmd_simulate(args: &[String]) -> Result<i32> {
    let Some(path) = args.first() else {
        print_usage();
        return Ok(2);
    };
    let cfg = load_config(path)?;
    let out_dir = PathBuf::from(&cfg.out_dir);
    fs::create_dir_all(&out_dir)?;
    // normalized config dump next to the outputs
    fs::write(out_dir.join("config.normalized"), cfg.dump())?;

    let stepper: StepperConfig = cfg.stepper()?;
    let mut state = output::build_initial_state(&cfg)?;
    let params = cfg.params;
    let potential = cfg.potential()?;

    let mut records = vec![diagnostics::record(
        &state, &params, &potential, cfg.a1, None,
    )?];
    let mut snapshots = 0u64;
    output::write_vtk_snapshot(&state, &out_dir.join(format!("snap_{snapshots:06}.vtk")))?;
    snapshots += 1;

    let mut cfl_warned = false;
    let t0 = std::time::Instant::now();
    evolution::run(&mut state, &stepper, cfg.t_end, cfg.max_steps, |s, rep| {
        if rep.cfl_warning && !cfl_warned {
            eprintln!(
                "warning: CFL number {:.2} exceeds 0.8 at step {}; consider a smaller dt",
                rep.cfl, s.step
            );
            cfl_warned = true;
        }
        if s.step % cfg.csv_every == 0 {
            let rec = diagnostics::record(s, &params, &potential, cfg.a1, records.last())?;
            records.push(rec);
        }
        if s.step % cfg.snapshot_every == 0 {
            output::write_vtk_snapshot(s, &out_dir.join(format!("snap_{snapshots:06}.vtk")))?;
            snapshots += 1;
        }
        if s.step % cfg.checkpoint_every == 0 {
            output::save_checkpoint(s, &out_dir.join("checkpoint.chns"))?;
        }
        Ok(true)
    })?;

    if records.last().map(|r| r.step) != Some(state.step) {
        let rec = diagnostics::record(&state, &params, &potential, cfg.a1, records.last())?;
        records.push(rec);
    }
    let final_rec = *records.last().expect("at least the initial record exists");
    output::write_vtk_snapshot(&state, &out_dir.join(format!("snap_{snapshots:06}.vtk")))?;
    output::save_checkpoint(&state, &out_dir.join("final.chns"))?;
    output::write_timeseries_csv(&out_dir.join("timeseries.csv"), &records)?;

    let mass = diagnostics::mass_report(&state, &params);
    let summary = output::json_line(&[
        ("t", JsonValue::Num(state.t)),
        ("steps", JsonValue::Num(state.step as f64)),
        ("E_total", JsonValue::Num(final_rec.e_total)),
        ("F_free", JsonValue::Num(final_rec.f_free)),
        ("separation", JsonValue::Num(final_rec.separation)),
        ("clip_events", JsonValue::Num(state.clip_events as f64)),
        ("phi_mean", JsonValue::Num(mass.phi_mean)),
        (
            "phi_mean_err_discrete",
            JsonValue::Num(mass.abs_error_discrete),
        ),
        ("sigma_drift", JsonValue::Num(mass.sigma_drift)),
        ("wall_seconds", JsonValue::Num(t0.elapsed().as_secs_f64())),
    ]);
    fs::write(out_dir.join("summary.json"), format!("{summary}\n"))?;
    println!(
        "simulate: {} steps to t = {:.6}, {} snapshots, E = {:.6}, output in {}",
        state.step,
        state.t,
        snapshots + 1,
        final_rec.e_total,
        out_dir.display()
    );
    Ok(0)
}

fn cmd_equilibrate(args: &[String]) -> Result<i32> {
    let Some(path) = args.first() else {
        print_usage();
        return Ok(2);
    };
    let cfg = load_config(path)?;
    let out_dir = PathBuf::from(&cfg.out_dir);
    fs::create_dir_all(&out_dir)?;
    let grid = cfg.grid()?;
    let potential = cfg.potential()?;
    let opts = FlowOptions {
        gamma: cfg.equil_gamma,
        dt: cfg.equil_dt,
        tol: cfg.equil_tol,
        max_steps: cfg.equil_max_steps,
        ..Default::default()
    };
    let report = stationary::minimize_energy(
        grid,
        cfg.phi_mean,
        cfg.sigma_mean,
        &cfg.params,
        &potential,
        cfg.equil_n_starts,
        cfg.equil_seed,
        &opts,
    )?;

    // candidate table
    let mut table = String::from("candidate,converged,energy,residual,separation,iterations\n");
    for (i, c) in report.candidates.iter().enumerate() {
        table.push_str(&format!(
            "{i},{},{:.16e},{:.16e},{:.16e},{}\n",
            c.converged, c.energy, c.residual, c.separation, c.iterations
        ));
    }
    fs::write(out_dir.join("candidates.csv"), table)?;

    let best = &report.best;
    let eq_state = chns::evolution::SimState::new(
        chns::grid::VectorField::zeros(grid),
        best.phi_inf.clone(),
        best.sigma_inf.clone(),
        &cfg.params,
        &potential,
    )?;
    output::save_checkpoint(&eq_state, &out_dir.join("equilibrium.chns"))?;
    output::write_vtk_snapshot(&eq_state, &out_dir.join("equilibrium.vtk"))?;
    let summary = output::json_line(&[
        ("converged", JsonValue::Bool(best.converged)),
        ("energy", JsonValue::Num(best.energy)),
        ("residual", JsonValue::Num(best.residual)),
        ("separation", JsonValue::Num(best.separation)),
        ("iterations", JsonValue::Num(best.iterations as f64)),
        ("candidates", JsonValue::Num(report.candidates.len() as f64)),
    ]);
    fs::write(out_dir.join("equilibrium.json"), format!("{summary}\n"))?;
    println!(
        "equilibrate: best candidate energy {:.8}, residual {:.3e}, separation {:.4}, converged {}",
        best.energy, best.residual, best.separation, best.converged
    );
    Ok(if best.converged { 0 } else { 1 })
}

fn cmd_verify(args: &[String]) -> Result<i32> {
    let Some(suite) = args.first() else {
        print_usage();
        return Ok(2);
    };
    let mut size: Option<usize> = None;
    let mut i = 1;
    while i < args.len() {
        match args[i].as_str() {
            "--size" => {
                let Some(v) = args.get(i + 1) else {
                    eprintln!("--size requires a value");
                    return Ok(2);
                };
                size = Some(v.parse().map_err(|_| chns::Error::Config {
                    line: 0,
                    msg: format!("bad --size value `{v}`"),
                })?);
                i += 2;
            }
            other => {
                eprintln!("unknown flag `{other}`");
                return Ok(2);
            }
        }
    }
    let checks = verify::run_suite(suite, size)?;
    let mut report = String::new();
    let mut all_pass = true;
    for c in &checks {
        println!("{}", verify::format_check(c));
        all_pass &= c.pass;
        report.push_str(&output::json_line(&[
            ("criterion", JsonValue::Num(c.criterion as f64)),
            ("name", JsonValue::Str(c.name.clone())),
            ("pass", JsonValue::Bool(c.pass)),
            ("value", JsonValue::Num(c.value)),
            ("threshold", JsonValue::Num(c.threshold)),
            ("detail", JsonValue::Str(c.detail.clone())),
        ]));
        report.push('\n');
    }
    let report_path = format!("chns_verify_{suite}.jsonl");
    fs::write(&report_path, report)?;
    println!(
        "{} checks, {} failed; report written to {report_path}",
        checks.len(),
        checks.iter().filter(|c| !c.pass).count()
    );
    Ok(if all_pass { 0 } else { 1 })
}

fn cmd_rate_fit(args: &[String]) -> Result<i32> {
    let Some(path) = args.first() else {
        print_usage();
        return Ok(2);
    };
    let mut column = String::from("distance");
    let mut i = 1;
    while i < args.len() {
        match args[i].as_str() {
            "--column" => {
                let Some(v) = args.get(i + 1) else {
                    eprintln!("--column requires a value");
                    return Ok(2);
                };
                column = v.clone();
                i += 2;
            }
            other => {
                eprintln!("unknown flag `{other}`");
                return Ok(2);
            }
        }
    }
    let (cols, rows) = output::read_csv(Path::new(path))?;
    let t_idx = cols
        .iter()
        .position(|c| c == "t")
        .ok_or(chns::Error::Config {
            line: 0,
            msg: "CSV has no `t` column".into(),
        })?;
    let d_idx = cols
        .iter()
        .position(|c| *c == column)
        .ok_or(chns::Error::Config {
            line: 0,
            msg: format!(
                "CSV has no `{column}` column (columns: {})",
                cols.join(", ")
            ),
        })?;
    let series: Vec<(f64, f64)> = rows
        .iter()
        .map(|r| (r[t_idx], r[d_idx]))
        .filter(|(_, d)| *d > 0.0 && d.is_finite())
        .collect();
    let fit = diagnostics::fit_convergence_rate(&series, None)?;
    println!(
        "rate-fit: kappa = {:.6}, exponent p = {:.6}, r^2 = {:.6}, exponential = {}, window = [{:.3}, {:.3}]",
        fit.kappa, fit.exponent, fit.r_squared, fit.flagged_exponential, fit.window.0, fit.window.1
    );
    let line = output::json_line(&[
        ("kappa", JsonValue::Num(fit.kappa)),
        ("exponent", JsonValue::Num(fit.exponent)),
        ("r_squared", JsonValue::Num(fit.r_squared)),
        (
            "flagged_exponential",
            JsonValue::Bool(fit.flagged_exponential),
        ),
        ("window_start", JsonValue::Num(fit.window.0)),
        ("window_end", JsonValue::Num(fit.window.1)),
    ]);
    fs::write("chns_rate_fit.jsonl", format!("{line}\n"))?;
    Ok(0)
}
