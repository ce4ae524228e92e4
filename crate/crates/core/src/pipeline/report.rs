//! Aggregation of fold accuracies into the architecture × loss × feature grid.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::train::LossMode;
use crate::error::{Error, Result};
use crate::models::Arch;
use crate::signal::FeatureKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellKey {
    pub feature_kind: FeatureKind,
    pub loss_mode: LossMode,
    pub arch: Arch,
}

impl CellKey {
    /// The eight cells in table order: feature block, then loss, then arch.
    pub fn grid() -> Vec<CellKey> {
        let mut v = Vec::with_capacity(8);
        for feature_kind in [FeatureKind::PreprocessedEeg, FeatureKind::IcaComponents] {
            for loss_mode in [LossMode::Ce, LossMode::Scl] {
                for arch in [Arch::Eegnet, Arch::Deepconvnet] {
                    v.push(CellKey {
                        feature_kind,
                        loss_mode,
                        arch,
                    });
                }
            }
        }
        v
    }
}

impl std::fmt::Display for CellKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}/{}", self.feature_kind.short(), self.loss_mode, self.arch)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldRecord {
    pub key: CellKey,
    pub subject: String,
    pub fold: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectResult {
    pub subject: String,
    /// Test accuracy per fold; `None` where the fold is missing.
    pub folds: Vec<Option<f64>>,
    /// Mean over folds, present only when every fold is.
    pub mean: Option<f64>,
    /// Population standard deviation over folds.
    pub std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub key: CellKey,
    pub complete: bool,
    pub subjects: Vec<SubjectResult>,
    /// Mean of the subject means, present only when the cell is complete.
    pub mean: Option<f64>,
    /// Population standard deviation of the subject means.
    pub std: Option<f64>,
    /// Run directory the cell came from, when merged.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

impl Cell {
    pub fn has_data(&self) -> bool {
        self.subjects.iter().any(|s| s.folds.iter().any(Option::is_some))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub folds: usize,
    pub subjects: Vec<String>,
    /// Always the full grid, in table order.
    pub cells: Vec<Cell>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Builds the full grid from fold records. Subjects are listed in sorted
/// order; a repeated (cell, subject, fold) is an error.
pub fn aggregate_report(records: &[FoldRecord], folds: usize) -> Result<RunReport> {
    if folds == 0 {
        return Err(Error::invalid("folds must be positive"));
    }
    let subjects: Vec<String> = records
        .iter()
        .map(|r| r.subject.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut table: BTreeMap<(CellKey, &str), Vec<Option<f64>>> = BTreeMap::new();
    for r in records {
        if r.fold >= folds {
            return Err(Error::invalid(format!("{} {}: fold {} out of range", r.key, r.subject, r.fold)));
        }
        if !(0.0..=1.0).contains(&r.accuracy) {
            return Err(Error::invalid(format!("{} {}: accuracy {} outside [0, 1]", r.key, r.subject, r.accuracy)));
        }
        let slot = &mut table.entry((r.key, r.subject.as_str())).or_insert_with(|| vec![None; folds])[r.fold];
        if slot.is_some() {
            return Err(Error::invalid(format!("{} {} fold {} reported twice", r.key, r.subject, r.fold)));
        }
        *slot = Some(r.accuracy);
    }
    let cells = CellKey::grid()
        .into_iter()
        .map(|key| {
            let rows: Vec<SubjectResult> = subjects
                .iter()
                .map(|s| {
                    let folds = table.get(&(key, s.as_str())).cloned().unwrap_or_else(|| vec![None; folds]);
                    let present: Option<Vec<f64>> = folds.iter().copied().collect();
                    let (mean, std) = match present {
                        Some(v) => {
                            let (m, s) = mean_std(&v);
                            (Some(m), Some(s))
                        }
                        None => (None, None),
                    };
                    SubjectResult {
                        subject: s.clone(),
                        folds,
                        mean,
                        std,
                    }
                })
                .collect();
            let means: Option<Vec<f64>> = rows.iter().map(|r| r.mean).collect();
            let (complete, mean, std) = match means {
                Some(v) if !v.is_empty() => {
                    let (m, s) = mean_std(&v);
                    (true, Some(m), Some(s))
                }
                _ => (false, None, None),
            };
            Cell {
                key,
                complete,
                subjects: rows,
                mean,
                std,
                source: None,
            }
        })
        .collect();
    Ok(RunReport {
        folds,
        subjects,
        cells,
    })
}

impl RunReport {
    pub fn cell(&self, key: CellKey) -> Option<&Cell> {
        self.cells.iter().find(|c| c.key == key)
    }

    pub fn records(&self) -> Vec<FoldRecord> {
        let mut out = Vec::new();
        for c in &self.cells {
            for s in &c.subjects {
                for (fold, acc) in s.folds.iter().enumerate() {
                    if let Some(a) = acc {
                        out.push(FoldRecord {
                            key: c.key,
                            subject: s.subject.clone(),
                            fold,
                            accuracy: *a,
                        });
                    }
                }
            }
        }
        out
    }

    pub fn incomplete_cells(&self) -> usize {
        self.cells.iter().filter(|c| !c.complete).count()
    }

    /// Aligned text table: one block per feature kind, rows = subjects and
    /// Average, columns = loss × architecture, accuracies in percent.
    pub fn render_text(&self) -> String {
        const W: usize = 13;
        let fmt = |v: Option<f64>| v.map_or("--".to_string(), |x| format!("{:.2}", 100.0 * x));
        let mut out = String::new();
        for feature in [FeatureKind::PreprocessedEeg, FeatureKind::IcaComponents] {
            let title = match feature {
                FeatureKind::IcaComponents => "ICA Components",
                _ => "Preprocessed EEG",
            };
            let keys: Vec<CellKey> = CellKey::grid().into_iter().filter(|k| k.feature_kind == feature).collect();
            let cells: Vec<Option<&Cell>> = keys.iter().map(|&k| self.cell(k)).collect();
            let _ = writeln!(out, "{title}");
            let _ = writeln!(
                out,
                "{:<W$}{:<w2$}{}",
                "",
                "Cross-Entropy Loss",
                "Supervised Contrastive Loss",
                w2 = 2 * W
            );
            let _ = write!(out, "{:<W$}", "Subject");
            for k in &keys {
                let _ = write!(out, "{:>W$}", k.arch.to_string());
            }
            out.push('\n');
            for (si, s) in self.subjects.iter().enumerate() {
                let _ = write!(out, "{s:<W$}");
                for c in &cells {
                    let v = c.and_then(|c| c.subjects.get(si)).and_then(|r| r.mean);
                    let _ = write!(out, "{:>W$}", fmt(v));
                }
                out.push('\n');
            }
            let _ = write!(out, "{:<W$}", "Average");
            for c in &cells {
                let _ = write!(out, "{:>W$}", fmt(c.and_then(|c| c.mean)));
            }
            out.push('\n');
            let missing: Vec<String> = cells
                .iter()
                .zip(&keys)
                .filter(|(c, _)| !c.is_some_and(|c| c.complete))
                .map(|(_, k)| format!("{} {}", k.loss_mode, k.arch))
                .collect();
            if !missing.is_empty() {
                let _ = writeln!(out, "incomplete: {}", missing.join(", "));
            }
            out.push('\n');
        }
        out
    }
}

/// Merges per-run reports into one grid. A cell with data in two runs is a
/// conflict naming both sources.
pub fn merge_reports(reports: &[(String, RunReport)]) -> Result<RunReport> {
    let folds = reports
        .first()
        .ok_or_else(|| Error::invalid("no reports to merge"))?
        .1
        .folds;
    let mut owner: BTreeMap<CellKey, &str> = BTreeMap::new();
    let mut records = Vec::new();
    for (source, r) in reports {
        if r.folds != folds {
            return Err(Error::invalid(format!("{source} uses {} folds, expected {folds}", r.folds)));
        }
        for c in r.cells.iter().filter(|c| c.has_data()) {
            if let Some(prev) = owner.insert(c.key, source) {
                return Err(Error::invalid(format!("cell {} appears in both {prev} and {source}", c.key)));
            }
        }
        records.extend(
            r.records()
                .into_iter()
                .filter(|rec| owner.get(&rec.key) == Some(&source.as_str())),
        );
    }
    let mut merged = aggregate_report(&records, folds)?;
    for c in &mut merged.cells {
        c.source = owner.get(&c.key).map(|s| s.to_string());
    }
    Ok(merged)
}
