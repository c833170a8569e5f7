//! Cohort CSV reader and writer.
//!
//! The header is fixed; cells are comma-separated without quoting. Empty cells
//! and the literal `NA` are treated as missing.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use super::{Feature, PatientRecord, Race, Sex};
use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "id,age,sex,race,gcs,apache_iii,sofa_24h,charlson,spo2_min,heart_rate,resp_rate,map_mean,creatinine_max,lactate_max,troponin_max,platelet_min,bilirubin_max,wbc_max,urine_24h,mech_vent,code_status,died_in_hospital";

const N_COLUMNS: usize = 22;
const FIRST_CLINICAL_COLUMN: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct RejectedRow {
    /// 1-based data row (the header is row 0).
    pub row: usize,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct IngestReport {
    pub records: Vec<PatientRecord>,
    pub rejected: Vec<RejectedRow>,
    /// Number of cells filled by mean imputation, per clinical feature.
    pub imputed: Vec<(Feature, usize)>,
}

pub fn ingest_csv(path: &Path, impute: bool) -> Result<IngestReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_cohort_csv(&text, impute)
}

fn is_missing(cell: &str) -> bool {
    cell.is_empty() || cell == "NA"
}

struct RawRow {
    row: usize,
    id: String,
    age: u32,
    sex: Sex,
    race: Race,
    clinical: [Option<f64>; 15],
    mech_vent: bool,
    code_status: bool,
    died: bool,
}

pub fn parse_cohort_csv(text: &str, impute: bool) -> Result<IngestReport> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Schema("empty file: no header".into()))?;
    check_header(header.trim_end_matches('\r'))?;

    let mut raw_rows = Vec::new();
    let mut rejected = Vec::new();
    let mut ids = HashSet::new();
    for (idx, line) in lines.enumerate() {
        let row = idx + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != N_COLUMNS {
            return Err(Error::Validation {
                row,
                column: "*".into(),
                message: format!("expected {N_COLUMNS} cells, found {}", cells.len()),
            });
        }
        match parse_row(row, &cells)? {
            Ok(r) => {
                if !ids.insert(r.id.clone()) {
                    return Err(Error::Validation {
                        row,
                        column: "id".into(),
                        message: format!("duplicate id `{}`", r.id),
                    });
                }
                raw_rows.push(r);
            }
            Err(reason) => rejected.push(RejectedRow { row, reason }),
        }
    }
    if raw_rows.is_empty() && rejected.is_empty() {
        return Err(Error::Schema("empty file: no data rows".into()));
    }

    let mut means = [0.0f64; 15];
    let mut imputed = Vec::new();
    for (j, feature) in Feature::CLINICAL.iter().enumerate() {
        let present: Vec<f64> = raw_rows.iter().filter_map(|r| r.clinical[j]).collect();
        let missing = raw_rows.len() - present.len();
        if missing == 0 {
            continue;
        }
        if !impute {
            let first = raw_rows
                .iter()
                .find(|r| r.clinical[j].is_none())
                .expect("a missing cell");
            return Err(Error::Validation {
                row: first.row,
                column: feature.name().into(),
                message: "missing value and imputation is off".into(),
            });
        }
        if present.is_empty() {
            return Err(Error::Degenerate(format!(
                "column `{}` has no observed values to impute from",
                feature.name()
            )));
        }
        means[j] = present.iter().sum::<f64>() / present.len() as f64;
        imputed.push((*feature, missing));
    }

    let records = raw_rows
        .into_iter()
        .map(|r| {
            let mut p = PatientRecord {
                id: r.id,
                age: r.age,
                sex: r.sex,
                race: r.race,
                gcs: 0.0,
                apache_iii: 0.0,
                sofa_24h: 0.0,
                charlson: 0.0,
                spo2_min: 0.0,
                heart_rate: 0.0,
                resp_rate: 0.0,
                map_mean: 0.0,
                creatinine_max: 0.0,
                lactate_max: 0.0,
                troponin_max: 0.0,
                platelet_min: 0.0,
                bilirubin_max: 0.0,
                wbc_max: 0.0,
                urine_24h: 0.0,
                mech_vent: r.mech_vent,
                code_status: r.code_status,
                died_in_hospital: r.died,
            };
            for (j, f) in Feature::CLINICAL.iter().enumerate() {
                p.set(*f, r.clinical[j].unwrap_or(means[j]));
            }
            p
        })
        .collect();

    Ok(IngestReport {
        records,
        rejected,
        imputed,
    })
}

fn check_header(header: &str) -> Result<()> {
    let expected: Vec<&str> = CSV_HEADER.split(',').collect();
    let got: Vec<&str> = header.split(',').map(str::trim).collect();
    for (i, want) in expected.iter().enumerate() {
        match got.get(i) {
            Some(g) if g == want => {}
            Some(g) => {
                return Err(Error::Schema(format!(
                    "header column {} is `{}`, expected `{}`",
                    i + 1,
                    g,
                    want
                )))
            }
            None => return Err(Error::Schema(format!("header is missing column `{want}`"))),
        }
    }
    if got.len() > expected.len() {
        return Err(Error::Schema(format!(
            "unexpected extra header column `{}`",
            got[expected.len()]
        )));
    }
    Ok(())
}

/// Outer error: hard validation failure. Inner error: row rejected (missing
/// demographics or outcome).
fn parse_row(row: usize, cells: &[&str]) -> Result<std::result::Result<RawRow, String>> {
    let invalid = |column: &str, message: String| Error::Validation {
        row,
        column: column.to_string(),
        message,
    };

    let id = cells[0];
    if is_missing(id) {
        return Ok(Err("missing id".into()));
    }
    for (col, name) in [(1, "age"), (2, "sex"), (3, "race"), (21, "died_in_hospital")] {
        if is_missing(cells[col]) {
            return Ok(Err(format!("missing {name}")));
        }
    }

    let age: u32 = cells[1]
        .parse()
        .map_err(|_| invalid("age", format!("`{}` is not a whole number of years", cells[1])))?;
    if age < 18 {
        return Err(invalid("age", format!("age {age} below adult inclusion minimum 18")));
    }
    if age > 120 {
        return Err(invalid("age", format!("age {age} above 120")));
    }
    let sex: Sex = cells[2].parse().map_err(|e: Error| invalid("sex", e.to_string()))?;
    let race: Race = cells[3].parse().map_err(|e: Error| invalid("race", e.to_string()))?;

    let mut clinical = [None; 15];
    for (j, f) in Feature::CLINICAL.iter().enumerate() {
        let cell = cells[FIRST_CLINICAL_COLUMN + j];
        if is_missing(cell) {
            continue;
        }
        let v: f64 = cell
            .parse()
            .map_err(|_| invalid(f.name(), format!("`{cell}` is not a number")))?;
        f.check_range(v).map_err(|m| invalid(f.name(), m))?;
        clinical[j] = Some(v);
    }

    let flag = |col: usize, name: &str| -> Result<bool> {
        match cells[col] {
            "0" => Ok(false),
            "1" => Ok(true),
            other => Err(invalid(name, format!("`{other}` is not 0 or 1"))),
        }
    };
    let mech_vent = if is_missing(cells[19]) {
        false
    } else {
        flag(19, "mech_vent")?
    };
    let code_status = if is_missing(cells[20]) {
        false
    } else {
        flag(20, "code_status")?
    };
    let died = flag(21, "died_in_hospital")?;

    Ok(Ok(RawRow {
        row,
        id: id.to_string(),
        age,
        sex,
        race,
        clinical,
        mech_vent,
        code_status,
        died,
    }))
}

/// Renders a cohort in the documented CSV layout. Output is byte-stable.
pub fn write_cohort_csv(records: &[PatientRecord]) -> String {
    let mut out = String::with_capacity(records.len() * 128 + CSV_HEADER.len() + 1);
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in records {
        let _ = write!(out, "{},{},{},{}", r.id, r.age, r.sex, r.race);
        for f in Feature::CLINICAL {
            let _ = write!(out, ",{}", r.get(f));
        }
        let _ = writeln!(
            out,
            ",{},{},{}",
            u8::from(r.mech_vent),
            u8::from(r.code_status),
            u8::from(r.died_in_hospital)
        );
    }
    out
}
