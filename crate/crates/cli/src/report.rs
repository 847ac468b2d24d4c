use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use vcil_core::analyzer::{Relation, RelationCurve};
use vcil_core::fmt_sig;
use vcil_core::harness::{missing_run_files, AccuracyMatrix, BudgetReport, ExperimentConfig};

#[derive(Debug)]
pub struct ReportError(pub String);

type Result<T> = std::result::Result<T, ReportError>;

struct Run {
    dir: PathBuf,
    config: ExperimentConfig,
    matrix: AccuracyMatrix,
    budget: BudgetReport,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| ReportError(format!("cannot read {}: {e}", path.display())))
}

fn load(dir: &Path) -> Result<Run> {
    let missing = missing_run_files(dir);
    if !missing.is_empty() {
        return Err(ReportError(format!(
            "incomplete run {}: missing {}",
            dir.display(),
            missing.join(", ")
        )));
    }
    let bad = |f: &str, e: String| ReportError(format!("{}/{f}: {e}", dir.display()));
    let config = serde_json::from_str(&read(&dir.join("config.json"))?).map_err(|e| bad("config.json", e.to_string()))?;
    let matrix =
        AccuracyMatrix::from_csv(&read(&dir.join("accuracy_matrix.csv"))?).map_err(|e| bad("accuracy_matrix.csv", e.to_string()))?;
    let budget = serde_json::from_str(&read(&dir.join("budget.json"))?).map_err(|e| bad("budget.json", e.to_string()))?;
    if matrix.pooled.is_empty() {
        return Err(bad("accuracy_matrix.csv", "no rows".into()));
    }
    Ok(Run {
        dir: dir.to_path_buf(),
        config,
        matrix,
        budget,
    })
}

struct Scores {
    acc_n: f64,
    bwf: Option<f64>,
    avg: f64,
    avg_excl_last: f64,
}

fn scores(m: &AccuracyMatrix) -> Scores {
    Scores {
        acc_n: m.acc_n().unwrap_or(0.0),
        bwf: m.bwf().ok(),
        avg: m.avg_acc(false).unwrap_or(0.0),
        avg_excl_last: m.avg_acc(true).unwrap_or(0.0),
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or("n/a".into(), fmt_sig)
}

fn flags(c: &ExperimentConfig) -> [bool; 3] {
    let t = &c.train;
    [
        t.expansion.separate_adapters && !t.expansion.mlp_adapter,
        t.causal.relation_recovery,
        t.causal.compensation,
    ]
}

fn mark(b: bool) -> &'static str {
    if b {
        "y"
    } else {
        "-"
    }
}

fn single(run: &Run) -> (String, String) {
    let s = scores(&run.matrix);
    let mut text = format!("run {}\n", run.dir.display());
    let _ = writeln!(text, "{:<12}{:<14}per task", "after_task", "acc_pooled");
    for (i, row) in run.matrix.rows.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|v| fmt_sig(*v)).collect();
        let _ = writeln!(text, "{:<12}{:<14}{}", i, fmt_sig(run.matrix.pooled[i]), cells.join(" "));
    }
    let _ = writeln!(text, "Acc_N          {}", fmt_sig(s.acc_n));
    let _ = writeln!(text, "BWF            {}", opt(s.bwf));
    let _ = writeln!(text, "avg_acc        {}", fmt_sig(s.avg));
    let _ = writeln!(text, "avg_acc_excl_last  {}", fmt_sig(s.avg_excl_last));
    let _ = writeln!(text, "{:<6}{:<12}{:<12}ratio", "task", "trainable", "total");
    for t in &run.budget.tasks {
        let _ = writeln!(text, "{:<6}{:<12}{:<12}{}", t.task, t.trainable, t.total, fmt_sig(t.ratio));
    }
    let _ = writeln!(
        text,
        "storage {} params, {} bytes; exemplars {} ({} bytes)",
        run.budget.storage_params, run.budget.storage_bytes, run.budget.exemplar_count, run.budget.exemplar_bytes
    );
    let mut csv = String::from("after_task,acc_pooled\n");
    for (i, a) in run.matrix.pooled.iter().enumerate() {
        let _ = writeln!(csv, "{i},{}", fmt_sig(*a));
    }
    let _ = writeln!(
        csv,
        "\nacc_n,bwf,avg_acc,avg_acc_excl_last\n{},{},{},{}",
        fmt_sig(s.acc_n),
        opt(s.bwf),
        fmt_sig(s.avg),
        fmt_sig(s.avg_excl_last)
    );
    (text, csv)
}

fn grid(runs: &[Run]) -> (String, String) {
    let mut text = format!(
        "{:<8}{:<4}{:<4}{:<13}{:<13}{:<13}run\n",
        "sep_ada", "rr", "cc", "acc_n", "bwf", "avg_acc"
    );
    let mut csv = String::from("run,sep_ada,rr,cc,acc_n,bwf,avg_acc,avg_acc_excl_last\n");
    for r in runs {
        let s = scores(&r.matrix);
        let [a, rr, cc] = flags(&r.config);
        let _ = writeln!(
            text,
            "{:<8}{:<4}{:<4}{:<13}{:<13}{:<13}{}",
            mark(a),
            mark(rr),
            mark(cc),
            fmt_sig(s.acc_n),
            opt(s.bwf),
            fmt_sig(s.avg),
            r.dir.display()
        );
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            r.dir.display(),
            a,
            rr,
            cc,
            fmt_sig(s.acc_n),
            opt(s.bwf),
            fmt_sig(s.avg),
            fmt_sig(s.avg_excl_last)
        );
    }
    (text, csv)
}

/// Text table and CSV for one run, or an ablation grid for several.
pub fn report(dirs: &[PathBuf]) -> Result<(String, String)> {
    let mut runs = Vec::with_capacity(dirs.len());
    let mut missing = Vec::new();
    for d in dirs {
        match load(d) {
            Ok(r) => runs.push(r),
            Err(e) => missing.push(e.0),
        }
    }
    if !missing.is_empty() {
        return Err(ReportError(missing.join("\n")));
    }
    Ok(if runs.len() == 1 { single(&runs[0]) } else { grid(&runs) })
}

const PAIRS: [&str; 4] = ["inc_S/inc_T", "inc_S/mem_T", "inc_T/mem_S", "mem_S/mem_T"];

/// Per-file sign structure of the relation curves in `run/relation_curves`.
pub fn analyze(run: &Path) -> Result<(String, String)> {
    let dir = run.join("relation_curves");
    let mut files: Vec<PathBuf> = match fs::read_dir(&dir) {
        Ok(rd) => rd
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .collect(),
        Err(_) => return Err(ReportError(format!("no relation curves under {}", dir.display()))),
    };
    files.sort();
    let mut text = String::new();
    let mut csv = String::from("file,pair,points,mean_cos,cooperation,conflict,neutral,last\n");
    for f in files {
        let curve = RelationCurve::from_csv(&read(&f)?).map_err(|e| ReportError(format!("{}: {e}", f.display())))?;
        let name = f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let _ = writeln!(text, "{name} ({} points)", curve.points.len());
        for (k, pair) in PAIRS.iter().enumerate() {
            let n = curve.points.len();
            let mean = if n == 0 {
                0.0
            } else {
                curve.points.iter().map(|p| p.cosines[k]).sum::<f64>() / n as f64
            };
            let count = |r: Relation| curve.points.iter().filter(|p| p.labels[k] == r).count();
            let (co, cf, ne) = (count(Relation::Cooperation), count(Relation::Conflict), count(Relation::Neutral));
            let last = curve.points.last().map_or("n/a", |p| p.labels[k].name());
            let _ = writeln!(
                text,
                "  {pair:<12} mean {:<14} cooperation {co} conflict {cf} neutral {ne} last {last}",
                fmt_sig(mean)
            );
            let _ = writeln!(csv, "{name},{pair},{n},{},{co},{cf},{ne},{last}", fmt_sig(mean));
        }
    }
    if text.is_empty() {
        text.push_str("no relation curves recorded\n");
    }
    Ok((text, csv))
}
