//! `report`: metric summaries across result files, and the acceptance run.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Mutex;

use serde::Serialize;
use serde_json::Value;

use spederlab::diagnostics::CheckReport;
use spederlab::experiments::{self, Outcome};
use spederlab::io;
use spederlab::online::RunRecord;
use spederlab::{Error, Result};

use crate::ReportArgs;

#[derive(Debug, Default)]
pub struct Collected {
    pub metrics: BTreeMap<String, Vec<f64>>,
    pub checks: Vec<CheckReport>,
}

#[derive(Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub metric: String,
    pub count: usize,
    pub mean: f64,
    pub std: f64,
}

impl Collected {
    fn push(&mut self, key: String, value: f64) {
        self.metrics.entry(key).or_default().push(value);
    }

    /// Adds one result file. Run CSVs contribute their last record.
    pub fn add_file(&mut self, path: &Path) -> Result<()> {
        let text = io::read_text(path)?;
        if path.extension().is_some_and(|e| e == "csv") {
            let rows: Vec<RunRecord> = io::records_from_csv(&text, path)?;
            let last = rows.last().ok_or_else(|| Error::Parse {
                path: path.display().to_string(),
                line: 1,
                message: "no records".into(),
            })?;
            return self.add_object(&serde_json::to_value(last).expect("records serialize"), "");
        }
        let value: Value = io::from_json(&text, path)?;
        match value {
            Value::Array(_) => {
                let reports: Vec<CheckReport> = io::from_json(&text, path)?;
                for r in reports {
                    self.push(format!("{}.violations", r.name), r.violations as f64);
                    self.push(format!("{}.max_violation_magnitude", r.name), r.max_violation_magnitude);
                    self.checks.push(r);
                }
                Ok(())
            }
            Value::Object(_) => self.add_object(&value, ""),
            _ => Err(Error::Parse { path: path.display().to_string(), line: 1, message: "expected an object or a list".into() }),
        }
    }

    fn add_object(&mut self, value: &Value, prefix: &str) -> Result<()> {
        if let Value::Object(map) = value {
            for (k, v) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                match v {
                    Value::Number(n) => self.push(key, n.as_f64().unwrap_or(f64::NAN)),
                    Value::String(s) => {
                        if let Ok(x) = s.parse::<f64>() {
                            self.push(key, x);
                        }
                    }
                    Value::Object(_) => self.add_object(v, &key)?,
                    _ => {}
                }
            }
        }
        Ok(())
    }

    /// Mean and population standard deviation per metric.
    pub fn summary(&self) -> Vec<SummaryRow> {
        self.metrics
            .iter()
            .map(|(k, xs)| {
                let n = xs.len() as f64;
                let mean = xs.iter().sum::<f64>() / n;
                let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
                SummaryRow { metric: k.clone(), count: xs.len(), mean, std: var.sqrt() }
            })
            .collect()
    }
}

pub fn run(args: &ReportArgs, threads: usize) -> Result<()> {
    if args.acceptance {
        return acceptance(args, threads);
    }
    if args.files.is_empty() {
        return Err(Error::ValidationFailure("report needs at least one file or --acceptance".into()));
    }
    let mut c = Collected::default();
    for f in &args.files {
        c.add_file(f)?;
    }
    let rows = c.summary();
    let csv = io::records_to_csv(&rows)?;
    match &args.out {
        Some(out) => {
            io::write_atomic(out, csv.as_bytes())?;
            crate::sidecar("report", args.seed, args, &[out])?;
        }
        None => print!("{csv}"),
    }
    for r in &c.checks {
        println!("{} {}: {} violations in {} instances", if r.passed() { "PASS" } else { "FAIL" }, r.name, r.violations, r.instances_checked);
    }
    Ok(())
}

/// Runs every criterion (in parallel up to `threads`) and prints one line each.
fn acceptance(args: &ReportArgs, threads: usize) -> Result<()> {
    let ids: Vec<&str> = experiments::CRITERIA.to_vec();
    let next = Mutex::new(0usize);
    let results: Mutex<Vec<(usize, Result<Outcome>)>> = Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..threads.min(ids.len()) {
            scope.spawn(|| loop {
                let i = {
                    let mut n = next.lock().expect("no poisoned lock");
                    let i = *n;
                    *n += 1;
                    i
                };
                if i >= ids.len() {
                    break;
                }
                let r = experiments::run_criterion(ids[i], args.seed);
                results.lock().expect("no poisoned lock").push((i, r));
            });
        }
    });
    let mut results = results.into_inner().expect("no poisoned lock");
    results.sort_by_key(|r| r.0);
    let mut outcomes = Vec::new();
    for (i, r) in results {
        match r {
            Ok(o) => {
                println!("{}", experiments::verdict_line(&o));
                outcomes.push(o);
            }
            Err(e) => println!("FAIL {}: {e}", ids[i]),
        }
    }
    if let Some(out) = &args.out {
        io::write_json(out, &outcomes)?;
        crate::sidecar("report", args.seed, args, &[out])?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(v: f64) -> RunRecord {
        RunRecord {
            episode: 1,
            value_optimal: 1.0,
            value_current: v,
            regret_cumulative: 0.5,
            bonus_mean: 0.1,
            l2_model_error: 0.0,
            optimism_margin: 0.2,
        }
    }

    #[test]
    fn single_and_identical_files_have_zero_std() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.csv");
        io::write_run_records(&a, &[record(0.3), record(0.4)]).unwrap();
        let mut c = Collected::default();
        c.add_file(&a).unwrap();
        let rows = c.summary();
        let v = rows.iter().find(|r| r.metric == "value_current").unwrap();
        assert_eq!((v.mean, v.std, v.count), (0.4, 0.0, 1));
        c.add_file(&a).unwrap();
        assert!(c.summary().iter().all(|r| r.std == 0.0 && r.count == 2));
    }

    #[test]
    fn reports_and_objects_are_flattened() {
        let dir = tempfile::tempdir().unwrap();
        let r = dir.path().join("r.json");
        let mut rep = CheckReport::new("duality");
        rep.record(0.0, 1.0);
        io::write_json(&r, &vec![rep]).unwrap();
        let m = dir.path().join("m.json");
        std::fs::write(&m, r#"{"return_cloned": 2.0, "nested": {"x": 1}}"#).unwrap();
        let mut c = Collected::default();
        c.add_file(&r).unwrap();
        c.add_file(&m).unwrap();
        assert_eq!(c.metrics["duality.violations"], vec![0.0]);
        assert_eq!(c.metrics["nested.x"], vec![1.0]);
        assert_eq!(c.checks.len(), 1);
    }

    #[test]
    fn parse_errors_name_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.json");
        std::fs::write(&bad, "{\n  \"a\": \n").unwrap();
        let err = Collected::default().add_file(&bad).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
    }
}
