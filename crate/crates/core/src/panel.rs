//! Ragged longitudinal panels and their CSV representation.
//!
//! Each subject is observed for `min(T, m)` consecutive periods starting at 1,
//! where `T` is the first period with a lapse indicator of 1 (or `m + 1`).

use std::io::{Read, Write};
use std::path::Path;

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub id: u64,
    /// Lapse indicator per observed period; only the last may be 1.
    pub lapse: Vec<u8>,
    /// Outcomes per observed period, `y[t][j]`.
    pub y: Vec<Vec<f64>>,
    /// Covariates per observed period, `x[t][c]`, in dataset column order.
    pub x: Vec<Vec<f64>>,
}

impl Subject {
    pub fn n_obs(&self) -> usize {
        self.lapse.len()
    }

    /// Lapse time `T` in `1..=m+1`.
    pub fn lapse_time(&self, m: usize) -> usize {
        match self.lapse.iter().position(|&l| l == 1) {
            Some(t) => t + 1,
            None => m + 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    pub m: usize,
    pub outcome_names: Vec<String>,
    pub covariate_names: Vec<String>,
    pub subjects: Vec<Subject>,
}

const FIXED: [&str; 3] = ["subject_id", "period", "lapse"];

impl PanelDataset {
    pub fn p(&self) -> usize {
        self.outcome_names.len()
    }

    pub fn n(&self) -> usize {
        self.subjects.len()
    }

    pub fn n_rows(&self) -> usize {
        self.subjects.iter().map(Subject::n_obs).sum()
    }

    /// Column position of a covariate.
    pub fn covariate_index(&self, name: &str) -> Result<usize> {
        self.covariate_names
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::Data(format!("unknown covariate column '{name}'")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::Data("horizon m must be at least 1".into()));
        }
        if self.subjects.is_empty() {
            return Err(Error::Data("dataset has no subjects".into()));
        }
        for s in &self.subjects {
            let n = s.n_obs();
            if n == 0 || n > self.m {
                return Err(Error::Data(format!("subject {} has {n} periods (m = {})", s.id, self.m)));
            }
            if s.y.len() != n || s.x.len() != n {
                return Err(Error::Data(format!("subject {} has ragged columns", s.id)));
            }
            if let Some(t) = s.lapse.iter().position(|&l| l == 1) {
                if t + 1 != n {
                    return Err(Error::Data(format!("subject {} has rows after lapse", s.id)));
                }
            } else if n != self.m {
                return Err(Error::Data(format!(
                    "subject {} stops at period {n} without lapsing",
                    s.id
                )));
            }
            for (y, x) in s.y.iter().zip(&s.x) {
                if y.len() != self.p() || x.len() != self.covariate_names.len() {
                    return Err(Error::Data(format!("subject {} has wrong row width", s.id)));
                }
                if y.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                    return Err(Error::Data(format!("subject {} has an invalid outcome", s.id)));
                }
                if x.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Data(format!("subject {} has a non-finite covariate", s.id)));
                }
            }
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let mut header: Vec<&str> = FIXED.to_vec();
        header.extend(self.outcome_names.iter().map(String::as_str));
        header.extend(self.covariate_names.iter().map(String::as_str));
        wtr.write_record(&header)?;
        for s in &self.subjects {
            for t in 0..s.n_obs() {
                let mut rec = vec![s.id.to_string(), (t + 1).to_string(), s.lapse[t].to_string()];
                rec.extend(s.y[t].iter().map(|v| v.to_string()));
                rec.extend(s.x[t].iter().map(|v| v.to_string()));
                wtr.write_record(&rec)?;
            }
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn to_csv_file(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    /// Parse a panel. Outcome columns are `y1, y2, ...`; every other column
    /// after the fixed ones is a covariate. `m` defaults to the largest period.
    pub fn read_csv<R: Read>(r: R, m: Option<usize>) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
        let header = rdr.headers()?.clone();
        let names: Vec<String> = header.iter().map(|h| h.trim().to_string()).collect();
        for (i, f) in FIXED.iter().enumerate() {
            if names.get(i).map(String::as_str) != Some(*f) {
                return Err(Error::Data(format!("column {} must be '{f}'", i + 1)));
            }
        }
        let is_outcome = |n: &str| n.len() > 1 && n.starts_with('y') && n[1..].chars().all(|c| c.is_ascii_digit());
        let outcome_cols: Vec<usize> = (3..names.len()).filter(|&i| is_outcome(&names[i])).collect();
        let covariate_cols: Vec<usize> = (3..names.len()).filter(|&i| !is_outcome(&names[i])).collect();
        if outcome_cols.is_empty() {
            return Err(Error::Data("no outcome columns (y1, y2, ...)".into()));
        }
        for (k, &c) in outcome_cols.iter().enumerate() {
            if names[c] != format!("y{}", k + 1) {
                return Err(Error::Data(format!("outcome column '{}' out of order", names[c])));
            }
        }

        let mut subjects: Vec<Subject> = Vec::new();
        for (row, rec) in rdr.records().enumerate() {
            let line = row + 2;
            let rec = rec?;
            let bad = |what: &str| Error::Data(format!("row {line}: {what}"));
            if rec.len() != names.len() {
                return Err(bad("wrong number of fields"));
            }
            let num = |i: usize| -> Result<f64> {
                rec[i].trim().parse::<f64>().map_err(|_| bad(&format!("'{}' is not a number in column {}", &rec[i], names[i])))
            };
            let id: u64 = rec[0].trim().parse().map_err(|_| bad("subject_id must be a nonnegative integer"))?;
            let period: usize = rec[1].trim().parse().map_err(|_| bad("period must be a positive integer"))?;
            let lapse: u8 = match rec[2].trim() {
                "0" => 0,
                "1" => 1,
                _ => return Err(bad("lapse must be 0 or 1")),
            };
            let y = outcome_cols.iter().map(|&c| num(c)).collect::<Result<Vec<_>>>()?;
            if y.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(bad("outcomes must be finite and nonnegative"));
            }
            let x = covariate_cols.iter().map(|&c| num(c)).collect::<Result<Vec<_>>>()?;
            if x.iter().any(|v| !v.is_finite()) {
                return Err(bad("covariates must be finite"));
            }
            let new_subject = subjects.last().is_none_or(|s| s.id != id);
            if new_subject {
                if subjects.iter().any(|s| s.id == id) {
                    return Err(bad(&format!("subject {id} is not contiguous")));
                }
                if period != 1 {
                    return Err(bad(&format!("subject {id} does not start at period 1")));
                }
                subjects.push(Subject { id, lapse: vec![], y: vec![], x: vec![] });
            }
            let s = subjects.last_mut().expect("subject pushed above");
            if period != s.n_obs() + 1 {
                return Err(bad(&format!("subject {id}: period {period} is duplicated or not contiguous")));
            }
            if s.lapse.last() == Some(&1) {
                return Err(bad(&format!("subject {id} has a row after lapse")));
            }
            if m.is_some_and(|m| period > m) {
                return Err(bad(&format!("period {period} exceeds m")));
            }
            s.lapse.push(lapse);
            s.y.push(y);
            s.x.push(x);
        }
        if subjects.is_empty() {
            return Err(Error::Data("file contains no data rows".into()));
        }
        let m = m.unwrap_or_else(|| subjects.iter().map(Subject::n_obs).max().unwrap_or(0));
        let ds = PanelDataset {
            m,
            outcome_names: outcome_cols.iter().map(|&c| names[c].clone()).collect(),
            covariate_names: covariate_cols.iter().map(|&c| names[c].clone()).collect(),
            subjects,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn from_csv_file(path: &Path, m: Option<usize>) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?, m)
    }
}
