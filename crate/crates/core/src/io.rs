//! File formats: BOLD and stimulus CSVs, covariate tables, JSON documents
//! and posterior draws. Numbers are written in shortest round-trip form.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CdcmError, Result};
use crate::group::CovariateColumn;
use crate::inference::PosteriorDraws;
use crate::linalg::Matrix;
use crate::model::design::{block_partition, StimulusDesign};
use crate::simulator::MAX_RANGE;

/// Shortest decimal string that parses back to the same `f64`.
pub fn format_f64(v: f64) -> String {
    format!("{v:?}")
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CdcmError::Io(format!("{}: {e}", path.display())))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CdcmError::Io(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, text).map_err(|e| CdcmError::Io(format!("{}: {e}", path.display())))
}

/// Header and string cells of a CSV, with the 1-based line of each row.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
    pub lines: Vec<u64>,
}

pub fn parse_table(text: &str, source: &str) -> Result<Table> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| csv_error(source, e))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(CdcmError::Parse(format!("{source}: missing header row")));
    }
    let mut rows = Vec::new();
    let mut lines = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(source, e))?;
        lines.push(record.position().map_or(0, |p| p.line()));
        rows.push(record.iter().map(str::to_string).collect());
    }
    Ok(Table { header, rows, lines })
}

/// Quotes a CSV field when it contains a delimiter, quote or line break.
pub fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn header_line(names: &[String]) -> String {
    let fields: Vec<String> = names.iter().map(|n| csv_field(n)).collect();
    fields.join(",")
}

fn csv_error(source: &str, e: csv::Error) -> CdcmError {
    match e.kind() {
        csv::ErrorKind::UnequalLengths { pos, expected_len, len } => CdcmError::Parse(format!(
            "{source}: line {}: expected {expected_len} fields, found {len}",
            pos.as_ref().map_or(0, |p| p.line())
        )),
        _ => CdcmError::Parse(format!(
            "{source}: line {}: {e}",
            e.position().map_or(0, |p| p.line())
        )),
    }
}

/// Parses an all-numeric CSV into its header and an `n x p` matrix.
pub fn parse_numeric_csv(text: &str, source: &str) -> Result<(Vec<String>, Matrix)> {
    let table = parse_table(text, source)?;
    if table.rows.is_empty() {
        return Err(CdcmError::Parse(format!("{source}: no data rows")));
    }
    let p = table.header.len();
    let mut m = Matrix::zeros(table.rows.len(), p);
    for (i, (row, line)) in table.rows.iter().zip(&table.lines).enumerate() {
        for (j, cell) in row.iter().enumerate() {
            m[(i, j)] = cell
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| {
                    CdcmError::Parse(format!(
                        "{source}: line {line}, column '{}': '{cell}' is not a finite number",
                        table.header[j]
                    ))
                })?;
        }
    }
    Ok((table.header, m))
}

/// CSV text with a header row, LF line endings and shortest round-trip numbers.
pub fn matrix_to_csv(names: &[String], m: &Matrix) -> String {
    let mut out = header_line(names);
    out.push('\n');
    for i in 0..m.nrows() {
        let row: Vec<String> = m.row(i).iter().map(|v| format_f64(*v)).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn write_matrix_csv(path: &Path, names: &[String], m: &Matrix) -> Result<()> {
    if names.len() != m.ncols() {
        return Err(CdcmError::DimensionMismatch(format!(
            "{} column names for {} columns",
            names.len(),
            m.ncols()
        )));
    }
    write_text(path, &matrix_to_csv(names, m))
}

/// BOLD series (`n x d`) with ROI names taken from the header.
#[derive(Debug, Clone, PartialEq)]
pub struct BoldData {
    pub roi_names: Vec<String>,
    pub y: Matrix,
    /// Set when some ROI's range exceeds the admissible maximum of 4.
    pub range_warning: Option<String>,
}

pub fn parse_bold_csv(text: &str, source: &str) -> Result<BoldData> {
    let (roi_names, y) = parse_numeric_csv(text, source)?;
    let wide: Vec<String> = (0..y.ncols())
        .filter_map(|j| {
            let col = y.column(j);
            let range = col.max() - col.min();
            (range > MAX_RANGE).then(|| format!("{} (range {range:.3})", roi_names[j]))
        })
        .collect();
    let range_warning = (!wide.is_empty()).then(|| {
        let msg = format!(
            "{source}: BOLD range exceeds {MAX_RANGE} for {}; consider rescaling",
            wide.join(", ")
        );
        log::warn!("{msg}");
        msg
    });
    Ok(BoldData {
        roi_names,
        y,
        range_warning,
    })
}

pub fn read_bold_csv(path: &Path) -> Result<BoldData> {
    parse_bold_csv(&read_text(path)?, &path.display().to_string())
}

/// Timing metadata stored next to a stimulus CSV as `<stem>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignMeta {
    pub tr_seconds: f64,
    #[serde(default = "default_prescan_rest")]
    pub prescan_rest: bool,
}

fn default_prescan_rest() -> bool {
    true
}

pub fn design_sidecar(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Reads an `n x m` stimulus CSV. The repetition time comes from `tr` when
/// given and from the JSON sidecar otherwise.
pub fn read_design(path: &Path, tr: Option<f64>) -> Result<StimulusDesign> {
    let (_, u) = parse_numeric_csv(&read_text(path)?, &path.display().to_string())?;
    let sidecar = design_sidecar(path);
    let meta: Option<DesignMeta> = if sidecar.exists() {
        Some(read_json(&sidecar)?)
    } else {
        None
    };
    let r = tr.or(meta.as_ref().map(|m| m.tr_seconds)).ok_or_else(|| {
        CdcmError::InvalidInput(format!(
            "{}: repetition time unknown; pass --tr or provide {}",
            path.display(),
            sidecar.display()
        ))
    })?;
    let rows = (0..u.nrows()).map(|i| u.row(i).iter().copied().collect()).collect();
    let design = block_partition(rows, r)?;
    Ok(design.with_prescan_rest(meta.map_or(true, |m| m.prescan_rest)))
}

/// Writes the stimulus CSV and its timing sidecar.
pub fn write_design(path: &Path, design: &StimulusDesign) -> Result<()> {
    let names: Vec<String> = (1..=design.m).map(|k| format!("u{k}")).collect();
    let u = Matrix::from_fn(design.n, design.m, |i, j| design.u[i][j]);
    write_matrix_csv(path, &names, &u)?;
    write_json(
        &design_sidecar(path),
        &DesignMeta {
            tr_seconds: design.r,
            prescan_rest: design.prescan_rest,
        },
    )
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_str(&read_text(path)?)
        .map_err(|e| CdcmError::Parse(format!("{}: line {}: {e}", path.display(), e.line())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

/// Covariate table keyed by an optional `subject` column.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateTable {
    pub subjects: Option<Vec<String>>,
    pub columns: Vec<CovariateColumn>,
}

/// A column is continuous when every non-empty cell parses as a number;
/// empty cells are missing.
pub fn parse_covariates(text: &str, source: &str) -> Result<CovariateTable> {
    let table = parse_table(text, source)?;
    if table.rows.is_empty() {
        return Err(CdcmError::Parse(format!("{source}: no data rows")));
    }
    let cell = |i: usize, j: usize| -> Option<&str> {
        let c = table.rows[i][j].as_str();
        (!c.is_empty() && !c.eq_ignore_ascii_case("na")).then_some(c)
    };
    let mut subjects = None;
    let mut columns = Vec::new();
    for (j, name) in table.header.iter().enumerate() {
        let n = table.rows.len();
        if name.eq_ignore_ascii_case("subject") {
            let ids = (0..n)
                .map(|i| {
                    cell(i, j).map(str::to_string).ok_or_else(|| {
                        CdcmError::Parse(format!("{source}: line {}: missing subject id", table.lines[i]))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            subjects = Some(ids);
            continue;
        }
        let numeric: Option<Vec<Option<f64>>> = (0..n)
            .map(|i| match cell(i, j) {
                None => Some(None),
                Some(c) => c.parse::<f64>().ok().filter(|v| v.is_finite()).map(Some),
            })
            .collect();
        columns.push(match numeric {
            Some(values) => CovariateColumn::Continuous {
                name: name.clone(),
                values,
            },
            None => CovariateColumn::Categorical {
                name: name.clone(),
                values: (0..n).map(|i| cell(i, j).map(str::to_string)).collect(),
            },
        });
    }
    Ok(CovariateTable { subjects, columns })
}

pub fn read_covariates(path: &Path) -> Result<CovariateTable> {
    parse_covariates(&read_text(path)?, &path.display().to_string())
}

/// Draws as CSV with a leading `chain` column (1-based).
pub fn draws_to_csv(pd: &PosteriorDraws) -> String {
    let mut out = String::from("chain,");
    out.push_str(&header_line(&pd.names));
    out.push('\n');
    for i in 0..pd.draws.nrows() {
        out.push_str(&(pd.chain[i] + 1).to_string());
        for v in pd.draws.row(i).iter() {
            out.push(',');
            out.push_str(&format_f64(*v));
        }
        out.push('\n');
    }
    out
}

pub fn write_draws_csv(path: &Path, pd: &PosteriorDraws) -> Result<()> {
    write_text(path, &draws_to_csv(pd))
}

/// Inverse of [`draws_to_csv`]; diagnostics are not restored.
pub fn parse_draws_csv(text: &str, source: &str) -> Result<PosteriorDraws> {
    let (header, m) = parse_numeric_csv(text, source)?;
    if header.first().map(String::as_str) != Some("chain") {
        return Err(CdcmError::Parse(format!("{source}: first column must be 'chain'")));
    }
    let mut chain = Vec::with_capacity(m.nrows());
    for (i, v) in m.column(0).iter().enumerate() {
        if !(*v >= 1.0 && v.fract() == 0.0) {
            return Err(CdcmError::Parse(format!("{source}: line {}: bad chain index {v}", i + 2)));
        }
        chain.push(*v as usize - 1);
    }
    let draws = m.columns(1, m.ncols() - 1).into_owned();
    let mut pd = PosteriorDraws::from_matrix(header[1..].to_vec(), draws);
    pd.chain = chain;
    Ok(pd)
}

pub fn read_draws_csv(path: &Path) -> Result<PosteriorDraws> {
    parse_draws_csv(&read_text(path)?, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn motion_shape() {
        let mut text = String::from("V1,V5,SPC\n");
        for i in 0..360 {
            let t = i as f64 * 0.1;
            text.push_str(&format!("{},{},{}\n", t.sin(), t.cos(), 0.5 * t.sin()));
        }
        let b = parse_bold_csv(&text, "motion.csv").unwrap();
        assert_eq!((b.y.nrows(), b.y.ncols()), (360, 3));
        assert_eq!(b.roi_names, vec!["V1", "V5", "SPC"]);
        assert!(b.range_warning.is_none());
    }

    #[test]
    fn empty_and_ragged() {
        assert!(matches!(parse_bold_csv("", "e.csv"), Err(CdcmError::Parse(_))));
        assert!(matches!(parse_bold_csv("a,b\n", "h.csv"), Err(CdcmError::Parse(_))));
        let err = parse_bold_csv("a,b\n1,2\n3\n", "r.csv").unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
        let err = parse_bold_csv("a,b\n1,2\n3,x\n4,5\n", "n.csv").unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
    }

    #[test]
    fn wide_range_warns() {
        let b = parse_bold_csv("a\n0\n5.2\n1\n", "w.csv").unwrap();
        assert!(b.range_warning.unwrap().contains("range"));
    }

    #[test]
    fn covariate_classification() {
        let t = parse_covariates("subject,age,sex,pmat\ns1,22-25,M,14\ns2,26-30,F,\n", "c.csv").unwrap();
        assert_eq!(t.subjects.unwrap(), vec!["s1", "s2"]);
        assert!(matches!(t.columns[0], CovariateColumn::Categorical { .. }));
        assert!(matches!(t.columns[1], CovariateColumn::Categorical { .. }));
        match &t.columns[2] {
            CovariateColumn::Continuous { values, .. } => assert_eq!(values, &vec![Some(14.0), None]),
            _ => panic!("pmat should be continuous"),
        }
    }

    #[test]
    fn draws_round_trip() {
        let m = Matrix::from_fn(4, 2, |i, j| i as f64 * 0.1 - j as f64);
        let mut pd = PosteriorDraws::from_matrix(vec!["A[1,2]".into(), "b".into()], m);
        pd.chain = vec![0, 0, 1, 1];
        let back = parse_draws_csv(&draws_to_csv(&pd), "d.csv").unwrap();
        assert_eq!(back.draws, pd.draws);
        assert_eq!(back.chain, pd.chain);
        assert_eq!(back.names, pd.names);
    }

    proptest! {
        #[test]
        fn csv_round_trip_is_bit_identical(
            vals in proptest::collection::vec(proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO, 1..60),
            cols in 1usize..4,
        ) {
            let rows = vals.len() / cols;
            prop_assume!(rows > 0);
            let m = Matrix::from_fn(rows, cols, |i, j| vals[i * cols + j]);
            let names: Vec<String> = (0..cols).map(|j| format!("c{j}")).collect();
            let text = matrix_to_csv(&names, &m);
            let (back_names, back) = parse_numeric_csv(&text, "p.csv").unwrap();
            prop_assert_eq!(&back_names, &names);
            for (a, b) in m.iter().zip(back.iter()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
            prop_assert_eq!(matrix_to_csv(&back_names, &back), text);
        }
    }
}
