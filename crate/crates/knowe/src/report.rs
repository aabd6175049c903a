//! Report emission: CSV tables and JSON summaries, written atomically
//! (temp file + rename). Accuracies in CSVs are percent with two decimals;
//! JSON keeps raw fractions. Absent values render as NA / null.

use std::path::Path;

use serde_json::json;

use crate::analysis::{AblationOutcome, NormTrace, PlasticityReport, StabilityReport, VARIANTS};
use crate::error::Result;
use crate::protocol::{ExperimentSummary, SessionReport};

/// Write bytes to `path` atomically within its parent directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    let tmp = dir.join(format!(".{name}.tmp-{}", std::process::id()));
    std::fs::write(&tmp, bytes)?;
    if let Err(e) = std::fs::rename(&tmp, path) {
        let _ = std::fs::remove_file(&tmp);
        return Err(e.into());
    }
    Ok(())
}

fn pct(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{:.2}", v * 100.0),
        None => "NA".into(),
    }
}

/// `sessions.csv`: one row per session with the accuracy breakdown.
pub fn write_sessions_csv(dir: &Path, reports: &[SessionReport]) -> Result<()> {
    let mut out = String::from("t,A_c,A_f,A_t,now_acc\n");
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.t,
            pct(r.a_c),
            pct(r.a_f),
            pct(Some(r.a_t)),
            pct(r.now_acc)
        ));
    }
    write_atomic(&dir.join("sessions.csv"), out.as_bytes())
}

/// `summary.json`: aggregate metrics plus the per-session rows.
pub fn write_summary_json(
    dir: &Path,
    summary: &ExperimentSummary,
    reports: &[SessionReport],
) -> Result<()> {
    let sessions: Vec<_> = reports
        .iter()
        .map(|r| {
            json!({
                "t": r.t,
                "A_c": r.a_c,
                "A_f": r.a_f,
                "A_t": r.a_t,
                "now_acc": r.now_acc,
            })
        })
        .collect();
    let doc = json!({
        "A_bar": summary.a_bar,
        "F": summary.f,
        "F_f": summary.f_f,
        "F_c": summary.f_c,
        "sessions": sessions,
    });
    write_atomic(
        &dir.join("summary.json"),
        serde_json::to_string_pretty(&doc)?.as_bytes(),
    )
}

/// `confusion_t{t}.csv`: rows are present true-class columns, columns are
/// every head column.
pub fn write_confusion_csvs(dir: &Path, reports: &[SessionReport]) -> Result<()> {
    for r in reports {
        let n_cols = r.confusion.first().map_or(0, |row| row.len());
        let mut out = String::from("true_col");
        for j in 0..n_cols {
            out.push_str(&format!(",pred_{j}"));
        }
        out.push('\n');
        for (row_label, counts) in r.confusion_rows.iter().zip(&r.confusion) {
            out.push_str(&row_label.to_string());
            for c in counts {
                out.push_str(&format!(",{c}"));
            }
            out.push('\n');
        }
        write_atomic(&dir.join(format!("confusion_t{}.csv", r.t)), out.as_bytes())?;
    }
    Ok(())
}

/// `norms.csv`: Frobenius norm of every existing block at every session.
pub fn write_norms_csv(dir: &Path, reports: &[SessionReport]) -> Result<()> {
    let mut out = String::from("t,block,frobenius_norm\n");
    for r in reports {
        for (block, n) in r.block_norms.iter().enumerate() {
            out.push_str(&format!("{},{},{n}\n", r.t, block));
        }
    }
    write_atomic(&dir.join("norms.csv"), out.as_bytes())
}

/// `ablation.csv`: one row per flag combination per seed.
pub fn write_ablation_csv(dir: &Path, outcome: &AblationOutcome) -> Result<()> {
    let mut out = String::from("normalize,freeze_classifier,freeze_embedding,seed,A_bar,F\n");
    for c in &outcome.cells {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            c.normalize,
            c.freeze_classifier,
            c.freeze_embedding,
            c.seed,
            pct(Some(c.a_bar)),
            match c.f {
                Some(f) => format!("{f:.6}"),
                None => "NA".into(),
            }
        ));
    }
    write_atomic(&dir.join("ablation.csv"), out.as_bytes())
}

/// `conjectures.json`: the truth table plus the implication verdicts.
pub fn write_conjectures_json(dir: &Path, outcome: &AblationOutcome) -> Result<()> {
    let doc = json!({
        "truth_table": outcome.rows,
        "c2": outcome.c2,
        "c3": outcome.c3,
        "c4": outcome.c4,
        "biconditional": outcome.biconditional,
    });
    write_atomic(
        &dir.join("conjectures.json"),
        serde_json::to_string_pretty(&doc)?.as_bytes(),
    )
}

/// `stability.csv`: one row per head variant with its median decay.
pub fn write_stability_csv(dir: &Path, report: &StabilityReport) -> Result<()> {
    let mut out = String::from("variant,normalize,freeze_classifier,median_D,skipped_probes\n");
    for v in VARIANTS {
        let i = VARIANTS.iter().position(|&x| x == v).unwrap();
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            v.label(),
            v.normalize(),
            v.freeze_classifier(),
            report.median_d[i],
            report.skipped[i]
        ));
    }
    write_atomic(&dir.join("stability.csv"), out.as_bytes())
}

/// `plasticity.csv`: per-trial descent results; `descent_fraction` is the
/// aggregate over non-stationary trials, repeated on every row.
pub fn write_plasticity_csv(dir: &Path, trials: &[PlasticityReport]) -> Result<()> {
    let non_stationary: Vec<&PlasticityReport> =
        trials.iter().filter(|t| !t.stationary).collect();
    let descended = non_stationary
        .iter()
        .filter(|t| {
            t.deltas
                .iter()
                .any(|&(lr, d)| lr == 1e-3 && d < 0.0)
        })
        .count();
    let fraction = if non_stationary.is_empty() {
        1.0
    } else {
        descended as f64 / non_stationary.len() as f64
    };
    let mut out =
        String::from("trial,stationary,inner_product,delta_at_lr_1e3,largest_descending_lr,descent_fraction\n");
    for (i, t) in trials.iter().enumerate() {
        let delta = t
            .deltas
            .iter()
            .find(|&&(lr, _)| lr == 1e-3)
            .map(|&(_, d)| d);
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            i,
            t.stationary,
            t.inner_product,
            delta.map_or("NA".into(), |d| format!("{d:e}")),
            t.largest_descending_lr
                .map_or("NA".into(), |l| format!("{l}")),
            fraction
        ));
    }
    write_atomic(&dir.join("plasticity.csv"), out.as_bytes())
}

/// `norm_trace.csv`: per-seed incremental block norms with the growth verdict.
pub fn write_norm_trace_csv(dir: &Path, traces: &[(u64, NormTrace)]) -> Result<()> {
    let mut out =
        String::from("seed,session,block_norm,growth_fraction,pairs_total,pairs_excluded\n");
    for (seed, t) in traces {
        for (i, n) in t.norms.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{n},{},{},{}\n",
                seed,
                i + 1,
                t.growth_fraction,
                t.pairs_total,
                t.pairs_excluded
            ));
        }
    }
    write_atomic(&dir.join("norm_trace.csv"), out.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fake_report(t: usize) -> SessionReport {
        SessionReport {
            t,
            a_c: if t == 0 { Some(0.9) } else { None },
            a_f: if t > 0 { Some(0.5) } else { None },
            a_t: 0.75,
            now_acc: if t > 0 { Some(0.6) } else { None },
            confusion_rows: vec![0, 1],
            confusion: vec![vec![3, 1], vec![0, 4]],
            block_norms: vec![1.0; t + 1],
        }
    }

    #[test]
    fn sessions_csv_format() {
        let dir = tempfile::tempdir().unwrap();
        write_sessions_csv(dir.path(), &[fake_report(0), fake_report(1)]).unwrap();
        let text = std::fs::read_to_string(dir.path().join("sessions.csv")).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "t,A_c,A_f,A_t,now_acc");
        assert_eq!(lines[1], "0,90.00,NA,75.00,NA");
        assert_eq!(lines[2], "1,NA,50.00,75.00,60.00");
    }

    #[test]
    fn summary_json_keys() {
        let dir = tempfile::tempdir().unwrap();
        let summary = ExperimentSummary {
            a_bar: 0.42,
            f: Some(0.1),
            f_f: vec![(2, 0.05)],
            f_c: vec![(1, 0.02)],
        };
        write_summary_json(dir.path(), &summary, &[fake_report(0)]).unwrap();
        let doc: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap())
                .unwrap();
        assert_eq!(doc["A_bar"], 0.42);
        assert_eq!(doc["F"], 0.1);
        assert!(doc["sessions"].is_array());
        assert_eq!(doc["sessions"][0]["A_f"], serde_json::Value::Null);
    }

    #[test]
    fn confusion_and_norms_files() {
        let dir = tempfile::tempdir().unwrap();
        let reports = [fake_report(0), fake_report(1)];
        write_confusion_csvs(dir.path(), &reports).unwrap();
        write_norms_csv(dir.path(), &reports).unwrap();
        let c0 = std::fs::read_to_string(dir.path().join("confusion_t0.csv")).unwrap();
        assert!(c0.starts_with("true_col,pred_0,pred_1\n"));
        assert!(c0.contains("0,3,1"));
        assert!(dir.path().join("confusion_t1.csv").exists());
        let norms = std::fs::read_to_string(dir.path().join("norms.csv")).unwrap();
        assert_eq!(norms.lines().count(), 1 + 1 + 2);
    }

    #[test]
    fn atomic_write_replaces_existing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.csv");
        write_atomic(&path, b"first").unwrap();
        write_atomic(&path, b"second").unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "second");
    }
}
