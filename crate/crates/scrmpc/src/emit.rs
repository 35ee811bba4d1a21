//! Result emission: trajectory/control CSVs, certificate and verification
//! JSON, tube-rectangle polylines, bench tables, and run logs.
//!
//! All numbers print through the shortest round-trip float formatter, so
//! repeated seeded runs emit byte-identical files.

use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::Serialize;
use serde_json::json;
use thiserror::Error;

use crate::restriction::Tube;
use crate::scenario::BenchRow;
use crate::scr::{CertifiedSolution, MarginCertificate, RunLog, VerificationReport};

#[derive(Debug, Error)]
pub enum EmitError {
    #[error("cannot write {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("serialization failed: {0}")]
    Json(#[from] serde_json::Error),
}

fn write_file(path: &Path, content: &str) -> Result<PathBuf, EmitError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|source| EmitError::Io { path: parent.display().to_string(), source })?;
    }
    std::fs::write(path, content).map_err(|source| EmitError::Io { path: path.display().to_string(), source })?;
    Ok(path.to_path_buf())
}

fn push_num(line: &mut String, v: f64) {
    line.push(',');
    line.push_str(&format!("{v}"));
}

/// Trajectory CSV: one row per stage with state components followed by the
/// tube bounds per transformed coordinate. Headers are always written, so an
/// empty run produces a headers-only file.
pub fn write_trajectory_csv(
    path: &Path,
    states: &[DVector<f64>],
    tube: Option<&Tube>,
    state_dim: usize,
    tube_dim: usize,
) -> Result<PathBuf, EmitError> {
    let mut out = String::from("t");
    for i in 0..state_dim {
        out.push_str(&format!(",x{i}"));
    }
    for i in 0..tube_dim {
        out.push_str(&format!(",z_upper{i}"));
    }
    for i in 0..tube_dim {
        out.push_str(&format!(",z_lower{i}"));
    }
    out.push('\n');
    for (t, x) in states.iter().enumerate() {
        let mut line = format!("{t}");
        for v in x.iter() {
            push_num(&mut line, *v);
        }
        if let Some(tube) = tube {
            for v in tube.upper[t].iter() {
                push_num(&mut line, *v);
            }
            for v in tube.lower[t].iter() {
                push_num(&mut line, *v);
            }
        }
        out.push_str(&line);
        out.push('\n');
    }
    write_file(path, &out)
}

pub fn write_controls_csv(path: &Path, controls: &[DVector<f64>], control_dim: usize) -> Result<PathBuf, EmitError> {
    let mut out = String::from("t");
    for j in 0..control_dim {
        out.push_str(&format!(",u{j}"));
    }
    out.push('\n');
    for (t, u) in controls.iter().enumerate() {
        let mut line = format!("{t}");
        for v in u.iter() {
            push_num(&mut line, *v);
        }
        out.push_str(&line);
        out.push('\n');
    }
    write_file(path, &out)
}

fn tube_json(tube: &Tube) -> serde_json::Value {
    json!({
        "upper": tube.upper.iter().map(|v| v.iter().copied().collect::<Vec<f64>>()).collect::<Vec<_>>(),
        "lower": tube.lower.iter().map(|v| v.iter().copied().collect::<Vec<f64>>()).collect::<Vec<_>>(),
    })
}

/// Certificate JSON: margin radii, worst-case cost bound, convergence and
/// solver statistics, the constraint census, and the exact re-check slacks.
pub fn write_certificate_json(path: &Path, cert: &CertifiedSolution) -> Result<PathBuf, EmitError> {
    let value = json!({
        "gamma_init": cert.gamma_init,
        "gamma_dyn": cert.gamma_dyn,
        "cost_upper": cert.cost_upper,
        "iterations": cert.iterations,
        "status": cert.status,
        "objective_history": cert.objective_history,
        "census": cert.census,
        "check": cert.check,
        "solve_time_s": cert.solve_time_s,
        "solver_iterations_last": cert.solver_iterations_last,
        "tube": tube_json(&cert.tube),
    });
    write_file(path, &serde_json::to_string_pretty(&value)?)
}

pub fn write_margin_json(path: &Path, cert: &MarginCertificate) -> Result<PathBuf, EmitError> {
    let value = json!({
        "gamma": cert.gamma,
        "mode": cert.mode,
        "diagnostic": cert.diagnostic,
        "check": cert.check,
        "solve_time_s": cert.solve_time_s,
        "tube": cert.tube.as_ref().map(tube_json),
    });
    write_file(path, &serde_json::to_string_pretty(&value)?)
}

pub fn write_verification_json(path: &Path, report: &VerificationReport) -> Result<PathBuf, EmitError> {
    write_file(path, &serde_json::to_string_pretty(report)?)
}

/// Plot-ready tube rectangles over a pair of transformed coordinates: five
/// corner rows per stage closing each loop.
pub fn write_tube_boxes_csv(path: &Path, tube: &Tube, coord_x: usize, coord_y: usize) -> Result<PathBuf, EmitError> {
    let mut out = String::from("stage,corner,x,y\n");
    for t in 0..tube.stages() {
        let (lx, ux) = (tube.lower[t][coord_x], tube.upper[t][coord_x]);
        let (ly, uy) = (tube.lower[t][coord_y], tube.upper[t][coord_y]);
        let corners = [(lx, ly), (ux, ly), (ux, uy), (lx, uy), (lx, ly)];
        for (c, (x, y)) in corners.iter().enumerate() {
            out.push_str(&format!("{t},{c},{x},{y}\n"));
        }
    }
    write_file(path, &out)
}

pub fn write_bench_table_csv(path: &Path, rows: &[BenchRow]) -> Result<PathBuf, EmitError> {
    let mut out = String::from("horizon,avg_solver_time_s,constraint_count,avg_scr_iterations,nominal_cost\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.horizon, r.avg_solver_time_s, r.constraint_count, r.avg_scr_iterations, r.nominal_cost
        ));
    }
    write_file(path, &out)
}

#[derive(Serialize)]
struct RunSummary<'a> {
    realized_cost: f64,
    replan_period: usize,
    cycles: &'a [crate::scr::CycleLog],
    events: &'a [String],
}

/// Closed-loop run artifacts: executed trajectory and controls as CSV plus a
/// cycle/event log as JSON.
pub fn write_run_log(dir: &Path, log: &RunLog, state_dim: usize, control_dim: usize) -> Result<Vec<PathBuf>, EmitError> {
    let mut written = Vec::new();
    written.push(write_trajectory_csv(&dir.join("closed_loop_states.csv"), &log.states, None, state_dim, 0)?);
    written.push(write_controls_csv(&dir.join("closed_loop_controls.csv"), &log.controls, control_dim)?);
    let summary = RunSummary {
        realized_cost: log.realized_cost,
        replan_period: log.replan_period,
        cycles: &log.cycles,
        events: &log.events,
    };
    written.push(write_file(&dir.join("run_log.json"), &serde_json::to_string_pretty(&summary)?)?);
    if let Some(tube) = log.tubes.first() {
        let dim = tube.upper.first().map_or(0, |v| v.len());
        if dim >= 2 {
            written.push(write_tube_boxes_csv(&dir.join("first_plan_tube.csv"), tube, 0, 1)?);
        }
    }
    Ok(written)
}

/// Everything a `solve` run emits.
pub fn emit_solution(dir: &Path, cert: &CertifiedSolution, state_dim: usize, control_dim: usize) -> Result<Vec<PathBuf>, EmitError> {
    let tube_dim = cert.tube.upper.first().map_or(0, |v| v.len());
    let mut written = Vec::new();
    written.push(write_trajectory_csv(&dir.join("trajectory.csv"), &cert.nominal_states, Some(&cert.tube), state_dim, tube_dim)?);
    written.push(write_controls_csv(&dir.join("controls.csv"), &cert.controls, control_dim)?);
    written.push(write_certificate_json(&dir.join("certificate.json"), cert)?);
    if tube_dim >= 2 {
        written.push(write_tube_boxes_csv(&dir.join("tube_boxes.csv"), &cert.tube, 0, 1)?);
    }
    Ok(written)
}
