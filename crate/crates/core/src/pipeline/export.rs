//! Run artifacts: metadata, per-iteration reports, trajectory CSVs and the
//! SVG overlay.

use std::fmt::Write as _;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{io_err, svg, IterationReport, PipelineError, PipelineRun, RunStatus};
use crate::hlm::Subtask;
use crate::sim::{EnvironmentMap, TrajectorySample};
use crate::verify::render_estimates;

pub const TRAJECTORY_HEADER: &str =
    "time_s,x_m,y_m,heading_rad,v_mps,w_radps,active_subtask_id,position_error_m,heading_error_rad";

pub fn write_trajectory_csv(path: &Path, samples: &[TrajectorySample]) -> Result<(), PipelineError> {
    let csv_err = |e: csv::Error| PipelineError::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    w.write_record(TRAJECTORY_HEADER.split(',')).map_err(csv_err)?;
    for s in samples {
        w.serialize(s).map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))
}

/// Parses a trajectory CSV. The header must match [`TRAJECTORY_HEADER`]
/// exactly.
pub fn read_trajectory_csv(reader: impl Read) -> Result<Vec<TrajectorySample>, String> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = r.headers().map_err(|e| e.to_string())?;
    let got: Vec<&str> = header.iter().collect();
    let want: Vec<&str> = TRAJECTORY_HEADER.split(',').collect();
    if got != want {
        return Err(format!("unexpected header `{}`", got.join(",")));
    }
    r.deserialize().map(|row| row.map_err(|e| e.to_string())).collect()
}

#[derive(Serialize)]
struct RunMetadata<'a> {
    status: RunStatus,
    iterations: usize,
    final_path: Option<&'a [crate::hlm::SubtaskId]>,
    achieved_bound: Option<f64>,
    composition_rollouts: usize,
}

fn write_file(path: &Path, contents: &[u8], manifest: &mut Vec<PathBuf>) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    std::fs::write(path, contents).map_err(io_err(path))?;
    manifest.push(path.to_path_buf());
    Ok(())
}

pub fn render_report_text(report: &IterationReport, gate_on_lower_bound: bool) -> String {
    let mut out = String::new();
    let join = |set: &std::collections::BTreeSet<crate::hlm::SubtaskId>| {
        set.iter().map(|c| c.as_str()).collect::<Vec<_>>().join(",")
    };
    let _ = writeln!(out, "iteration {}", report.iteration);
    let path: Vec<&str> = report.synthesis.path.iter().map(|c| c.as_str()).collect();
    let _ = writeln!(out, "path {}", path.join(" -> "));
    let _ = writeln!(out, "achieved_bound {:.6}", report.synthesis.achieved_bound);
    for (c, cap) in &report.caps {
        let _ = writeln!(out, "cap {c} {cap:.4}");
    }
    let _ = writeln!(out, "trained [{}]", join(&report.trained));
    let _ = writeln!(out, "reused [{}]", join(&report.reused));
    let _ = writeln!(out, "retrained [{}]", join(&report.retrained));
    let _ = writeln!(out, "underperformers [{}]", join(&report.underperformers));
    for (c, cap) in &report.caps_added {
        let _ = writeln!(out, "cap_added {c} {cap:.4}");
    }
    let estimates: Vec<_> = report.estimates.values().cloned().collect();
    out.push_str(&render_estimates(
        &estimates,
        &report.synthesis.params,
        gate_on_lower_bound,
    ));
    if let Some(check) = &report.composition_check {
        let _ = writeln!(
            out,
            "composition {}/{} observed {:.4} bound {:.4} tolerance {:.4} violation {}",
            check.observed_successes, check.n_runs, check.observed_rate, check.bound, check.tolerance, check.violation
        );
    }
    out
}

/// Writes `run.json`, `reports/iteration_NN.{json,txt}`,
/// `trajectories/composition_NNN.csv` and, when there is at least one
/// rollout, `overlay.svg`. Returns the written paths in order.
pub fn export_results(
    run: &PipelineRun,
    subtasks: &[Subtask],
    env: &EnvironmentMap,
    gate_on_lower_bound: bool,
    output_dir: &Path,
) -> Result<Vec<PathBuf>, PipelineError> {
    let mut manifest = Vec::new();
    let last = run.reports.last();
    let meta = RunMetadata {
        status: run.status,
        iterations: run.reports.len(),
        final_path: last.map(|r| r.synthesis.path.as_slice()),
        achieved_bound: last.map(|r| r.synthesis.achieved_bound),
        composition_rollouts: run.rollouts.len(),
    };
    let json = serde_json::to_vec_pretty(&meta).expect("metadata serializes");
    write_file(&output_dir.join("run.json"), &json, &mut manifest)?;

    for report in &run.reports {
        let stem = format!("iteration_{:02}", report.iteration);
        let json = serde_json::to_vec_pretty(report).expect("report serializes");
        write_file(
            &output_dir.join("reports").join(format!("{stem}.json")),
            &json,
            &mut manifest,
        )?;
        let text = render_report_text(report, gate_on_lower_bound);
        write_file(
            &output_dir.join("reports").join(format!("{stem}.txt")),
            text.as_bytes(),
            &mut manifest,
        )?;
    }

    if run.rollouts.is_empty() {
        return Ok(manifest);
    }
    let dir = output_dir.join("trajectories");
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    for r in &run.rollouts {
        let path = dir.join(format!("composition_{:03}.csv", r.index));
        write_trajectory_csv(&path, &r.trajectory)?;
        manifest.push(path);
    }
    let tracks: Vec<&[TrajectorySample]> = run.rollouts.iter().map(|r| r.trajectory.as_slice()).collect();
    let doc = svg::render_overlay(env, subtasks, &tracks);
    write_file(&output_dir.join("overlay.svg"), doc.as_bytes(), &mut manifest)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::CompositionRollout;
    use crate::sim::Rect;
    use crate::verify::CompositionOutcome;

    fn sample(t: f64) -> TrajectorySample {
        TrajectorySample {
            time_s: t,
            x_m: 1.5 * t,
            y_m: -0.25,
            heading_rad: 0.1,
            v_mps: 1.0,
            w_radps: 0.0,
            active_subtask_id: "c0".into(),
            position_error_m: 3.0 - t,
            heading_error_rad: 0.1,
        }
    }

    fn env() -> EnvironmentMap {
        EnvironmentMap::open(
            Rect {
                min_x: -5.0,
                min_y: -5.0,
                max_x: 5.0,
                max_y: 5.0,
            },
            0.3,
        )
    }

    #[test]
    fn csv_header_is_exact_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let rows = vec![sample(0.0), sample(0.05), sample(0.1)];
        write_trajectory_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), TRAJECTORY_HEADER);
        let back = read_trajectory_csv(text.as_bytes()).unwrap();
        assert_eq!(back, rows);
    }

    #[test]
    fn csv_rejects_wrong_header() {
        let text = "time,x\n0,1\n";
        assert!(read_trajectory_csv(text.as_bytes()).is_err());
    }

    #[test]
    fn empty_run_writes_only_metadata() {
        let dir = tempfile::tempdir().unwrap();
        let run = PipelineRun {
            status: RunStatus::Infeasible,
            reports: Vec::new(),
            rollouts: Vec::new(),
        };
        let manifest = export_results(&run, &[], &env(), false, dir.path()).unwrap();
        assert_eq!(manifest, vec![dir.path().join("run.json")]);
    }

    #[test]
    fn one_rollout_gives_one_csv_and_one_svg() {
        let dir = tempfile::tempdir().unwrap();
        let run = PipelineRun {
            status: RunStatus::OverallSuccess,
            reports: Vec::new(),
            rollouts: vec![CompositionRollout {
                index: 0,
                outcome: CompositionOutcome::Success,
                trajectory: vec![sample(0.0), sample(0.05)],
            }],
        };
        let manifest = export_results(&run, &[], &env(), false, dir.path()).unwrap();
        let csvs = manifest
            .iter()
            .filter(|p| p.extension().is_some_and(|e| e == "csv"))
            .count();
        let svgs = manifest
            .iter()
            .filter(|p| p.extension().is_some_and(|e| e == "svg"))
            .count();
        assert_eq!((csvs, svgs), (1, 1));
    }
}
