//! Report tables and their CSV / markdown emitters.
//!
//! Tables mirror the layout of the published full-scale experiment: attack
//! settings as rows, one fingerprint-by-arm column per metric, and one table
//! per merge method with the mixing weights as rows. Builders are pure
//! functions over structured results so layouts can be pinned in tests
//! without running a pipeline.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::fingerprint::EvalReport;
use crate::pipeline::config::Arm;

/// Output format for [`emit_report`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
}

impl ReportFormat {
    pub fn extension(&self) -> &'static str {
        match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Markdown => "md",
        }
    }
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<ReportFormat> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "md" | "markdown" => Ok(ReportFormat::Markdown),
            other => Err(Error::argument(format!(
                "unknown report format `{other}`; expected csv or md"
            ))),
        }
    }
}

/// A rectangular report table: one label column plus data columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    /// File stem and markdown heading.
    pub name: String,
    /// Header of the label column.
    pub row_header: String,
    pub columns: Vec<String>,
    /// Row label plus one cell per column.
    pub rows: Vec<(String, Vec<String>)>,
}

impl Table {
    pub fn new(
        name: impl Into<String>,
        row_header: impl Into<String>,
        columns: Vec<String>,
    ) -> Table {
        Table {
            name: name.into(),
            row_header: row_header.into(),
            columns,
            rows: Vec::new(),
        }
    }

    pub fn push_row(&mut self, label: impl Into<String>, cells: Vec<String>) {
        debug_assert_eq!(cells.len(), self.columns.len());
        self.rows.push((label.into(), cells));
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(&self.row_header);
        for col in &self.columns {
            out.push(',');
            out.push_str(&csv_safe(col));
        }
        out.push('\n');
        for (label, cells) in &self.rows {
            out.push_str(&csv_safe(label));
            for cell in cells {
                out.push(',');
                out.push_str(&csv_safe(cell));
            }
            out.push('\n');
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "### {}\n", self.name);
        out.push_str("| ");
        out.push_str(&self.row_header);
        for col in &self.columns {
            let _ = write!(out, " | {col}");
        }
        out.push_str(" |\n|");
        for _ in 0..=self.columns.len() {
            out.push_str(" --- |");
        }
        out.push('\n');
        for (label, cells) in &self.rows {
            let _ = write!(out, "| {label}");
            for cell in cells {
                let _ = write!(out, " | {cell}");
            }
            out.push_str(" |\n");
        }
        out
    }

    pub fn render(&self, format: ReportFormat) -> String {
        match format {
            ReportFormat::Csv => self.to_csv(),
            ReportFormat::Markdown => self.to_markdown(),
        }
    }
}

fn csv_safe(cell: &str) -> String {
    cell.replace(',', ";")
}

/// Writes each table to `dir/{name}.{ext}`. Returns the written paths in
/// table order.
pub fn emit_report(tables: &[Table], dir: impl AsRef<Path>, format: ReportFormat) -> Result<Vec<PathBuf>> {
    if tables.is_empty() {
        return Err(Error::argument("no tables to emit"));
    }
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for table in tables {
        let path = dir.join(format!("{}.{}", table.name, format.extension()));
        std::fs::write(&path, table.render(format)).map_err(|e| Error::io(&path, e))?;
        paths.push(path);
    }
    Ok(paths)
}

/// One measured cell of the experiment grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmFsr {
    pub fingerprint: String,
    pub arm: Arm,
    /// `none` for the clean post-injection measurement.
    pub attack_id: String,
    pub fsr: f64,
    pub harmlessness: Option<f64>,
}

pub fn fsr_cell(fsr: f64) -> String {
    format!("{fsr:.2}")
}

fn delta_cell(delta: f64) -> String {
    format!("{delta:+.3}")
}

/// Column labels `fp:arm` for every fingerprint crossed with the two adapter
/// arms, fingerprints sorted, direct before transfer.
fn fp_arm_columns(results: &[ArmFsr]) -> Vec<(String, Arm)> {
    let mut fps: Vec<String> = results.iter().map(|r| r.fingerprint.clone()).collect();
    fps.sort();
    fps.dedup();
    let mut cols = Vec::new();
    for fp in fps {
        for arm in [Arm::LoraDirect, Arm::LoraTransfer] {
            cols.push((fp.clone(), arm));
        }
    }
    cols
}

fn lookup(results: &[ArmFsr], fp: &str, arm: Arm, attack_id: &str) -> Option<f64> {
    results
        .iter()
        .find(|r| r.fingerprint == fp && r.arm == arm && r.attack_id == attack_id)
        .map(|r| r.fsr)
}

/// Clean fingerprint success per arm: fingerprints as rows, arms as columns.
pub fn effectiveness_table(results: &[ArmFsr], arms: &[Arm]) -> Table {
    let mut fps: Vec<String> = results.iter().map(|r| r.fingerprint.clone()).collect();
    fps.sort();
    fps.dedup();
    let mut table = Table::new(
        "effectiveness",
        "fingerprint",
        arms.iter().map(|a| a.id().to_string()).collect(),
    );
    for fp in fps {
        let cells = arms
            .iter()
            .map(|&arm| {
                lookup(results, &fp, arm, "none")
                    .map(fsr_cell)
                    .unwrap_or_else(|| "-".to_string())
            })
            .collect();
        table.push_row(fp, cells);
    }
    table
}

/// Post-attack fingerprint success: attack settings as rows, one
/// fingerprint-by-arm column each.
pub fn attack_table(name: &str, attack_ids: &[String], results: &[ArmFsr]) -> Table {
    let cols = fp_arm_columns(results);
    let mut table = Table::new(
        name,
        "attack",
        cols.iter().map(|(fp, arm)| format!("{fp}:{arm}")).collect(),
    );
    for attack_id in attack_ids {
        let cells = cols
            .iter()
            .map(|(fp, arm)| {
                lookup(results, fp, *arm, attack_id)
                    .map(fsr_cell)
                    .unwrap_or_else(|| "-".to_string())
            })
            .collect();
        table.push_row(attack_id.clone(), cells);
    }
    table
}

/// Row label for a merge with fingerprinted weight `alpha1`.
pub fn merge_alpha_label(alpha1: f64) -> String {
    format!("{:.1}:{:.1}", alpha1, 1.0 - alpha1)
}

/// One table per merge method. `results` attack ids must follow the
/// `merge:{method}:{label}` convention used by the pipeline.
pub fn merge_tables(methods: &[String], alphas: &[f64], results: &[ArmFsr]) -> Vec<Table> {
    methods
        .iter()
        .map(|method| {
            let ids: Vec<String> = alphas
                .iter()
                .map(|&a| format!("merge:{method}:{}", merge_alpha_label(a)))
                .collect();
            let mut table = attack_table(&format!("merge-{method}"), &ids, results);
            table.row_header = "weights".to_string();
            for (label, _) in &mut table.rows {
                // Row labels show only the mixing weights; the method is in
                // the table name.
                if let Some(rest) = label.strip_prefix(&format!("merge:{method}:")) {
                    *label = rest.to_string();
                }
            }
            table
        })
        .collect()
}

/// One stacking measurement: which arm supplied each adapter, and the two
/// resulting success rates.
#[derive(Debug, Clone, PartialEq)]
pub struct StackingEntry {
    pub arms: Vec<(String, Arm)>,
    pub fsr: Vec<(String, f64)>,
}

pub fn stacking_table(entries: &[StackingEntry]) -> Table {
    let mut fps: Vec<String> = entries
        .iter()
        .flat_map(|e| e.fsr.iter().map(|(fp, _)| fp.clone()))
        .collect();
    fps.sort();
    fps.dedup();
    let mut table = Table::new(
        "stacking",
        "adapters",
        fps.iter().map(|fp| format!("fsr:{fp}")).collect(),
    );
    for entry in entries {
        let label = entry
            .arms
            .iter()
            .map(|(fp, arm)| format!("{fp}={arm}"))
            .collect::<Vec<_>>()
            .join(" ");
        let cells = fps
            .iter()
            .map(|fp| {
                entry
                    .fsr
                    .iter()
                    .find(|(f, _)| f == fp)
                    .map(|(_, v)| fsr_cell(*v))
                    .unwrap_or_else(|| "-".to_string())
            })
            .collect();
        table.push_row(label, cells);
    }
    table
}

/// Trigger success of unfingerprinted checkpoints, expected all zero.
pub fn baseline_table(rows: &[(String, Vec<(String, f64)>)]) -> Table {
    let mut fps: Vec<String> = rows
        .iter()
        .flat_map(|(_, cells)| cells.iter().map(|(fp, _)| fp.clone()))
        .collect();
    fps.sort();
    fps.dedup();
    let mut table = Table::new(
        "baseline",
        "model",
        fps.iter().map(|fp| format!("fsr:{fp}")).collect(),
    );
    for (model, cells) in rows {
        let row = fps
            .iter()
            .map(|fp| {
                cells
                    .iter()
                    .find(|(f, _)| f == fp)
                    .map(|(_, v)| fsr_cell(*v))
                    .unwrap_or_else(|| "-".to_string())
            })
            .collect();
        table.push_row(model.clone(), row);
    }
    table
}

/// Benchmark accuracy before and after injection, per fingerprint and arm.
pub fn harmlessness_table(rows: &[(String, f64, f64)]) -> Table {
    let mut table = Table::new(
        "harmlessness",
        "model",
        vec![
            "benchmark_clean".to_string(),
            "benchmark_fingerprinted".to_string(),
            "delta".to_string(),
        ],
    );
    for (model, clean, fingerprinted) in rows {
        table.push_row(
            model.clone(),
            vec![
                format!("{clean:.3}"),
                format!("{fingerprinted:.3}"),
                delta_cell(fingerprinted - clean),
            ],
        );
    }
    table
}

/// Side-by-side deltas between the direct and transferred arms, one row per
/// fingerprint and attack setting. Rows outside the `fp:arm` model id
/// convention (baselines, full fine-tune arms) are skipped; a fingerprint
/// and attack measured on only one of the two adapter arms is an error.
pub fn compare_arms(report: &EvalReport) -> Result<Table> {
    struct Cell {
        direct: Option<(f64, Option<f64>)>,
        transfer: Option<(f64, Option<f64>)>,
    }
    let mut groups: std::collections::BTreeMap<(String, String, String), Cell> =
        std::collections::BTreeMap::new();
    for row in &report.rows {
        let Some((fp, arm)) = row.model_id.split_once(':') else {
            continue;
        };
        let arm = match arm.parse::<Arm>() {
            Ok(Arm::LoraDirect) => Arm::LoraDirect,
            Ok(Arm::LoraTransfer) => Arm::LoraTransfer,
            _ => continue,
        };
        // Clean rows sort ahead of attacks within a fingerprint.
        let sort_key = if row.attack_id == "none" {
            String::new()
        } else {
            row.attack_id.clone()
        };
        let entry = groups
            .entry((fp.to_string(), sort_key, row.attack_id.clone()))
            .or_insert(Cell {
                direct: None,
                transfer: None,
            });
        let value = (row.fsr, row.harmlessness);
        match arm {
            Arm::LoraDirect => entry.direct = Some(value),
            Arm::LoraTransfer => entry.transfer = Some(value),
            Arm::FullFtDirect => unreachable!(),
        }
    }
    if groups.is_empty() {
        return Err(Error::argument(
            "report has no fp:arm rows for the adapter arms",
        ));
    }
    let mut table = Table::new(
        "arm-comparison",
        "setting",
        vec![
            "fsr_direct".to_string(),
            "fsr_transfer".to_string(),
            "fsr_delta".to_string(),
            "harmless_direct".to_string(),
            "harmless_transfer".to_string(),
            "harmless_delta".to_string(),
        ],
    );
    for ((fp, _, attack_id), cell) in groups {
        let (d_fsr, d_harm) = cell.direct.ok_or_else(|| {
            Error::argument(format!("`{fp}` / `{attack_id}` missing the lora-direct arm"))
        })?;
        let (t_fsr, t_harm) = cell.transfer.ok_or_else(|| {
            Error::argument(format!(
                "`{fp}` / `{attack_id}` missing the lora-transfer arm"
            ))
        })?;
        let label = if attack_id == "none" {
            format!("{fp} clean")
        } else {
            format!("{fp} {attack_id}")
        };
        let harm_cell = |v: Option<f64>| v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into());
        let harm_delta = match (d_harm, t_harm) {
            (Some(d), Some(t)) => delta_cell(t - d),
            _ => "-".to_string(),
        };
        table.push_row(
            label,
            vec![
                fsr_cell(d_fsr),
                fsr_cell(t_fsr),
                delta_cell(t_fsr - d_fsr),
                harm_cell(d_harm),
                harm_cell(t_harm),
                harm_delta,
            ],
        );
    }
    Ok(table)
}
