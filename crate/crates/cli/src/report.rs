//! Study artifacts: CSV tables, a JSON summary with criterion flags, a plot.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::plot::Plot;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Table {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn new(name: &str, header: &[&str]) -> Self {
        Self { name: name.to_string(), header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r.iter().map(|v| format!("{v:.15e}")))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Outcome of one acceptance criterion.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CriterionOutcome {
    pub id: u8,
    pub title: String,
    pub passed: bool,
    /// measured quantities by name
    pub measured: BTreeMap<String, f64>,
    /// the pass condition in words
    pub requirement: String,
    pub note: String,
}

impl CriterionOutcome {
    pub fn new(id: u8, title: &str, requirement: &str) -> Self {
        Self { id, title: title.to_string(), passed: true, measured: BTreeMap::new(), requirement: requirement.to_string(), note: String::new() }
    }

    pub fn measure(&mut self, name: &str, value: f64) -> &mut Self {
        self.measured.insert(name.to_string(), value);
        self
    }

    /// Records `value` and folds `ok` into the verdict.
    pub fn check(&mut self, name: &str, value: f64, ok: bool) -> &mut Self {
        self.measure(name, value);
        self.passed &= ok && value.is_finite();
        self
    }

    /// One line: `criterion N: PASS|FAIL title (name=value, ...)`.
    pub fn line(&self) -> String {
        let vals: Vec<String> = self.measured.iter().map(|(k, v)| format!("{k}={v:.4e}")).collect();
        format!(
            "criterion {}: {} {} [{}] ({})",
            self.id,
            if self.passed { "PASS" } else { "FAIL" },
            self.title,
            self.requirement,
            vals.join(", ")
        )
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Provenance {
    pub config_sha256: String,
    pub code_version: String,
    pub grid_hashes: Vec<String>,
}

/// Everything one study produces.
#[derive(Clone, Debug, Default)]
pub struct Study {
    pub criteria: Vec<CriterionOutcome>,
    pub tables: Vec<Table>,
    pub plot: Option<Plot>,
    pub grid_hashes: Vec<String>,
    /// extra structured data for the summary
    pub details: serde_json::Map<String, serde_json::Value>,
}

impl Study {
    pub fn merge(&mut self, other: Study) {
        self.criteria.extend(other.criteria);
        self.tables.extend(other.tables);
        if self.plot.is_none() {
            self.plot = other.plot;
        }
        for h in other.grid_hashes {
            if !self.grid_hashes.contains(&h) {
                self.grid_hashes.push(h);
            }
        }
        self.details.extend(other.details);
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Summary {
    pub command: String,
    pub criteria: Vec<CriterionOutcome>,
    pub all_passed: bool,
    pub tables: Vec<String>,
    pub details: serde_json::Map<String, serde_json::Value>,
    pub provenance: Provenance,
}

/// The written result of a run.
#[derive(Clone, Debug)]
pub struct StudyReport {
    pub run_dir: PathBuf,
    pub summary: Summary,
    pub tables: Vec<Table>,
    /// sha256 of the summary JSON
    pub report_hash: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Next free `run-NNNN` directory; existing runs are never touched.
fn next_run_dir(output_dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(output_dir).with_context(|| format!("creating {}", output_dir.display()))?;
    let mut next = 1usize;
    for entry in fs::read_dir(output_dir)? {
        let name = entry?.file_name().to_string_lossy().to_string();
        if let Some(n) = name.strip_prefix("run-").and_then(|s| s.parse::<usize>().ok()) {
            next = next.max(n + 1);
        }
    }
    loop {
        let dir = output_dir.join(format!("run-{next:04}"));
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => next += 1,
            Err(e) => return Err(e).with_context(|| format!("creating {}", dir.display())),
        }
    }
}

/// Writes the study into a fresh run directory and appends to `reports.jsonl`.
pub fn write_study(output_dir: &Path, command: &str, config_toml: &str, study: Study) -> Result<StudyReport> {
    let run_dir = next_run_dir(output_dir)?;
    fs::write(run_dir.join("config.toml"), config_toml)?;
    let mut names = Vec::new();
    for t in &study.tables {
        let file = format!("{}.csv", t.name);
        t.write(&run_dir.join(&file))?;
        names.push(file);
    }
    if let Some(p) = &study.plot {
        fs::write(run_dir.join(format!("{command}.svg")), p.to_svg())?;
    }
    let all_passed = study.criteria.iter().all(|c| c.passed);
    let summary = Summary {
        command: command.to_string(),
        criteria: study.criteria,
        all_passed,
        tables: names,
        details: study.details,
        provenance: Provenance {
            config_sha256: sha256_hex(config_toml.as_bytes()),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            grid_hashes: study.grid_hashes,
        },
    };
    let json = serde_json::to_string_pretty(&summary)?;
    let report_hash = sha256_hex(json.as_bytes());
    fs::write(run_dir.join("summary.json"), &json)?;
    let line = serde_json::json!({
        "run": run_dir.file_name().map(|s| s.to_string_lossy().to_string()),
        "command": command,
        "all_passed": all_passed,
        "criteria": summary.criteria.iter().map(|c| serde_json::json!({"id": c.id, "passed": c.passed})).collect::<Vec<_>>(),
        "report_hash": report_hash,
    });
    let mut log = OpenOptions::new().create(true).append(true).open(output_dir.join("reports.jsonl"))?;
    writeln!(log, "{line}")?;
    Ok(StudyReport { run_dir, summary, tables: study.tables, report_hash })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn study() -> Study {
        let mut t = Table::new("sweep", &["x", "y"]);
        t.push(vec![1.0, 2.0]);
        let mut c = CriterionOutcome::new(4, "demo", "y > 0");
        c.check("y", 2.0, true);
        Study { criteria: vec![c], tables: vec![t], ..Default::default() }
    }

    #[test]
    fn runs_are_append_only() {
        let dir = tempfile::tempdir().unwrap();
        let a = write_study(dir.path(), "hydro", "seed = 1\n", study()).unwrap();
        let b = write_study(dir.path(), "hydro", "seed = 1\n", study()).unwrap();
        assert!(a.run_dir.ends_with("run-0001") && b.run_dir.ends_with("run-0002"));
        assert_eq!(a.report_hash, b.report_hash);
        let log = fs::read_to_string(dir.path().join("reports.jsonl")).unwrap();
        assert_eq!(log.lines().count(), 2);
        assert!(a.run_dir.join("sweep.csv").exists());
        let s: Summary = serde_json::from_str(&fs::read_to_string(a.run_dir.join("summary.json")).unwrap()).unwrap();
        assert_eq!(s.criteria[0].id, 4);
        assert!(s.all_passed);
    }

    #[test]
    fn nonfinite_measurement_fails() {
        let mut c = CriterionOutcome::new(1, "demo", "finite");
        c.check("x", f64::NAN, true);
        assert!(!c.passed);
        assert!(c.line().starts_with("criterion 1: FAIL"));
    }
}
