use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, LodError, Result};

pub const STUDY_HEADER: &str = "model,linearization,p_star,H,k,iterations,e_lod,e_h,wall_ms,status";
pub const ITERATION_HEADER: &str = "model,linearization,p_star,H,k,iteration,e_lod,status";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Ok,
    Failed,
}

/// One `(H, k)` result of a convergence study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub model: String,
    pub linearization: String,
    pub p_star: String,
    #[serde(rename = "H")]
    pub h: f64,
    pub k: usize,
    pub iterations: usize,
    pub e_lod: f64,
    pub e_h: f64,
    pub wall_ms: f64,
    pub status: Status,
}

/// Error after one iteration of the multiscale solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRow {
    pub model: String,
    pub linearization: String,
    pub p_star: String,
    #[serde(rename = "H")]
    pub h: f64,
    pub k: usize,
    pub iteration: usize,
    pub e_lod: f64,
    pub status: Status,
}

fn csv_err(e: csv::Error) -> LodError {
    LodError::Format(format!("table: {e}"))
}

pub fn to_csv<T: Serialize>(rows: &[T], header: &str) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    let body = String::from_utf8(w.into_inner().map_err(|e| invalid(e.to_string()))?).expect("csv output is UTF-8");
    Ok(format!("{header}\n{body}"))
}

pub fn write_table<T: Serialize>(path: &Path, rows: &[T], header: &str) -> Result<()> {
    crate::io::write_atomic(path, to_csv(rows, header)?.as_bytes())
}

pub fn parse_study(text: &str) -> Result<Vec<StudyRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers().map_err(csv_err)?.iter().collect::<Vec<_>>().join(",");
    if header != STUDY_HEADER {
        return Err(invalid(format!("unexpected table header `{header}`")));
    }
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

pub fn read_study(path: &Path) -> Result<Vec<StudyRow>> {
    parse_study(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn study_table_roundtrip() {
        let row = StudyRow {
            model: "exp2".into(),
            linearization: "kacanov".into(),
            p_star: "ulod(16;4;g1)".into(),
            h: 0.0625,
            k: 3,
            iterations: 7,
            e_lod: 0.012345678901234567,
            e_h: f64::NAN,
            wall_ms: 0.0,
            status: Status::Failed,
        };
        let text = to_csv(std::slice::from_ref(&row), STUDY_HEADER).unwrap();
        assert!(text.starts_with("model,linearization,p_star,H,k,iterations,e_lod,e_h,wall_ms,status\n"));
        assert!(text.ends_with(",failed\n"));
        let back = parse_study(&text).unwrap();
        assert_eq!(back[0].e_lod, row.e_lod);
        assert!(back[0].e_h.is_nan());
        assert!(parse_study("a,b\n1,2\n").is_err());
    }
}
