//! Columnar result tables and the report bundle.
//!
//! Every section is a tab-separated table with a header row. Stages write
//! their sections into their own directories; [`assemble_report`] collects
//! them and lists the sections that are missing.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dppr::RegressionMetrics;
use crate::error::{Error, Result};

pub const REGRESSION: &str = "regression";
pub const ALIGNMENT: &str = "alignment";
pub const CUMULATIVE: &str = "cumulative";
pub const QSTATS: &str = "qstats";
pub const CCA: &str = "cca";

/// Section names in bundle order.
pub const SECTIONS: [&str; 5] = [REGRESSION, ALIGNMENT, CUMULATIVE, QSTATS, CCA];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

/// Shortest text that parses back to the same value.
pub fn fmt_num(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else {
        format!("{v}")
    }
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Table {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) -> Result<()> {
        if row.len() != self.columns.len() {
            return Err(Error::shape(
                "table",
                format!("row has {} cells, table has {} columns", row.len(), self.columns.len()),
            ));
        }
        if row.iter().any(|c| c.contains(['\t', '\n'])) {
            return Err(Error::InvalidInput("table cells may not contain tabs or newlines".into()));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn to_tsv(&self) -> String {
        let mut out = self.columns.join("\t");
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.join("\t"));
            out.push('\n');
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .filter(|h| !h.is_empty())
            .ok_or_else(|| Error::Record { record: 0, line: 1, detail: "missing header row".into() })?;
        let mut table = Table {
            columns: header.split('\t').map(str::to_string).collect(),
            rows: Vec::new(),
        };
        for (i, line) in lines.enumerate() {
            let row: Vec<String> = line.split('\t').map(str::to_string).collect();
            if row.len() != table.columns.len() {
                return Err(Error::Record {
                    record: i,
                    line: i + 2,
                    detail: format!("{} cells for {} columns", row.len(), table.columns.len()),
                });
            }
            table.rows.push(row);
        }
        Ok(table)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Table::from_tsv(&text).map_err(|e| match e {
            Error::Record { record, line, detail } => Error::Record {
                record,
                line,
                detail: format!("{}: {detail}", path.display()),
            },
            other => other,
        })
    }

    /// Values of a numeric column.
    pub fn column(&self, name: &str) -> Result<Vec<f64>> {
        let j = self
            .columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::InvalidInput(format!("no column `{name}`")))?;
        self.rows
            .iter()
            .map(|r| {
                r[j].parse::<f64>()
                    .map_err(|_| Error::InvalidInput(format!("column `{name}` holds non-numeric `{}`", r[j])))
            })
            .collect()
    }
}

/// Regression metrics per window size, one row per window.
pub fn regression_table(rows: &[(usize, RegressionMetrics)]) -> Table {
    let mut t = Table::new(&["window", "mse", "rmse", "mape", "r2", "mae"]);
    for (w, m) in rows {
        t.rows.push(vec![w.to_string(), fmt_num(m.mse), fmt_num(m.rmse), fmt_num(m.mape), fmt_num(m.r2), fmt_num(m.mae)]);
    }
    t
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub sections: BTreeMap<String, Table>,
    /// Sections with no input, in bundle order.
    pub absent: Vec<String>,
    /// Stage directory each section was read from.
    pub sources: BTreeMap<String, String>,
}

pub const BUNDLE_FILE: &str = "bundle.json";

/// Collects `<section>.tsv` from the stage directories under `artifacts`.
/// A section found in more than one stage directory is an error.
pub fn assemble_report(artifacts: &Path) -> Result<ReportBundle> {
    let mut dirs: Vec<_> = fs::read_dir(artifacts)
        .map_err(|e| Error::io(artifacts, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(artifacts, err)))
        .collect::<Result<_>>()?;
    // Earlier bundles are outputs, not stage directories.
    dirs.retain(|p| p.is_dir() && !p.join(BUNDLE_FILE).exists());
    dirs.sort();
    let mut bundle = ReportBundle {
        sections: BTreeMap::new(),
        absent: Vec::new(),
        sources: BTreeMap::new(),
    };
    for name in SECTIONS {
        let found: Vec<_> = dirs.iter().map(|d| d.join(format!("{name}.tsv"))).filter(|p| p.is_file()).collect();
        match found.as_slice() {
            [] => bundle.absent.push(name.to_string()),
            [path] => {
                bundle.sections.insert(name.to_string(), Table::load(path)?);
                let stage = path.parent().and_then(Path::file_name).map(|s| s.to_string_lossy().into_owned());
                bundle.sources.insert(name.to_string(), stage.unwrap_or_default());
            }
            many => {
                return Err(Error::InvalidInput(format!(
                    "section `{name}` is present in {} stage directories",
                    many.len()
                )))
            }
        }
    }
    Ok(bundle)
}

impl ReportBundle {
    /// Writes every present section as TSV plus the combined JSON bundle.
    pub fn write(&self, out: &Path) -> Result<()> {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        for (name, table) in &self.sections {
            table.save(&out.join(format!("{name}.tsv")))?;
        }
        let path = out.join(BUNDLE_FILE);
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::io(path, e))
    }
}
