use std::collections::BTreeMap;
use std::fmt::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{RunSummary, SUMMARY_FILE};
use crate::error::{Error, Result};
use crate::fed::TrainMode;
use crate::model::Selection;

/// Collects `summary.json` files from the given run directories and any
/// directories below them, in path order.
pub fn load_summaries(roots: &[PathBuf]) -> Result<Vec<RunSummary>> {
    let mut files = Vec::new();
    for r in roots {
        collect(r, &mut files)?;
    }
    files.sort();
    files.dedup();
    if files.is_empty() {
        return Err(Error::Data("no summary.json found under the given directories".into()));
    }
    files
        .iter()
        .map(|f| Ok(serde_json::from_slice(&std::fs::read(f)?)?))
        .collect()
}

fn collect(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let direct = dir.join(SUMMARY_FILE);
    if direct.is_file() {
        out.push(direct);
    }
    if dir.is_dir() {
        for entry in std::fs::read_dir(dir)? {
            let p = entry?.path();
            if p.is_dir() {
                collect(&p, out)?;
            }
        }
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Accuracy table (modes × tasks, mean final accuracy over seeds) followed by
/// a model-size and communication table.
pub fn render_report(summaries: &[RunSummary]) -> String {
    let mut tasks: Vec<&str> = summaries.iter().map(|s| s.task.as_str()).collect();
    tasks.sort_unstable();
    tasks.dedup();
    let mut cells: BTreeMap<(usize, &str), Vec<f64>> = BTreeMap::new();
    let mut by_mode: BTreeMap<usize, Vec<&RunSummary>> = BTreeMap::new();
    let rank = |m: TrainMode| TrainMode::ALL.iter().position(|&x| x == m).expect("mode is listed");
    for s in summaries {
        cells.entry((rank(s.mode), s.task.as_str())).or_default().push(s.final_acc);
        by_mode.entry(rank(s.mode)).or_default().push(s);
    }

    let mut md = String::new();
    let _ = writeln!(md, "## Accuracy (%)\n");
    let _ = writeln!(md, "| Method | {} | Avg | Seeds |", tasks.join(" | "));
    let _ = writeln!(md, "|---|{}---:|---:|", "---:|".repeat(tasks.len()));
    for (&r, runs) in &by_mode {
        let mut row = format!("| {} |", TrainMode::ALL[r]);
        let mut task_means = Vec::new();
        for t in &tasks {
            match cells.get(&(r, *t)) {
                Some(v) => {
                    let m = mean(v);
                    task_means.push(m);
                    let _ = write!(row, " {:.1} |", 100.0 * m);
                }
                None => row.push_str(" - |"),
            }
        }
        let seeds = runs.iter().map(|s| s.seed).collect::<std::collections::BTreeSet<_>>().len();
        let _ = writeln!(row, " {:.1} | {} |", 100.0 * mean(&task_means), seeds);
        md.push_str(&row);
    }

    let _ = writeln!(md, "\n## Model size and communication\n");
    let _ = writeln!(
        md,
        "| Method | Global params | Client params | Params per message | Message / global | Bytes sent (up + down) |"
    );
    let _ = writeln!(md, "|---|---:|---:|---:|---:|---:|");
    for (&r, runs) in &by_mode {
        let s = runs[0];
        let federated = s.mode.is_federated();
        let bytes: Vec<f64> = runs.iter().map(|s| (s.uploaded_bytes + s.downloaded_bytes) as f64).collect();
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} | {} | {:.0} |",
            TrainMode::ALL[r],
            s.params.global,
            if federated { s.params.aux.to_string() } else { "-".into() },
            if federated { s.params.payload.to_string() } else { "-".into() },
            if federated { format!("{:.2}%", 100.0 * s.params.payload_ratio) } else { "-".into() },
            mean(&bytes),
        );
    }
    md
}

/// One grid point of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub selection: Selection,
    pub prompt_lr: f64,
    pub rounds: usize,
    pub local_steps: usize,
    pub summary: RunSummary,
}

/// Final accuracy per selection strategy (rows) and hyperparameter setting (columns).
pub fn render_sweep(rows: &[SweepRow]) -> String {
    let setting = |r: &SweepRow| format!("lr {:e}, T {}, steps {}", r.prompt_lr, r.rounds, r.local_steps);
    let mut settings: Vec<String> = Vec::new();
    for r in rows {
        let s = setting(r);
        if !settings.contains(&s) {
            settings.push(s);
        }
    }
    let mut md = String::new();
    let _ = writeln!(md, "## Layer selection: final accuracy (%)\n");
    let _ = writeln!(md, "| Selection | {} | Best |", settings.join(" | "));
    let _ = writeln!(md, "|---|{}---:|", "---:|".repeat(settings.len()));
    for sel in Selection::ALL {
        let mine: Vec<&SweepRow> = rows.iter().filter(|r| r.selection == sel).collect();
        if mine.is_empty() {
            continue;
        }
        let mut line = format!("| {} |", sel);
        let mut best = f64::NEG_INFINITY;
        for s in &settings {
            match mine.iter().find(|r| setting(r) == *s) {
                Some(r) => {
                    best = best.max(r.summary.final_acc);
                    let _ = write!(line, " {:.1} |", 100.0 * r.summary.final_acc);
                }
                None => line.push_str(" - |"),
            }
        }
        let _ = writeln!(line, " {:.1} |", 100.0 * best);
        md.push_str(&line);
    }
    md
}
