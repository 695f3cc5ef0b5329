//! Irregular longitudinal data with scalar covariates.
//!
//! A [`FunctionalDataset`] is a list of subjects, each observed at its own set
//! of times, together with `p` covariates of interest (`x`) and `q` nuisance
//! covariates (`z`, whose first column is the intercept). Construction only
//! canonicalizes ordering; [`FunctionalDataset::validate`] reports every broken
//! invariant and [`FunctionalDataset::ensure_valid`] turns them into an error.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub id: String,
    pub times: Vec<f64>,
    pub responses: Vec<f64>,
    pub x: Vec<f64>,
    pub z: Vec<f64>,
}

impl SubjectRecord {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    fn sort_by_time(&mut self) {
        if self.times.windows(2).all(|w| w[0] < w[1]) || self.times.len() != self.responses.len() {
            return;
        }
        let mut idx: Vec<usize> = (0..self.times.len()).collect();
        idx.sort_by(|&a, &b| self.times[a].total_cmp(&self.times[b]));
        self.times = idx.iter().map(|&i| self.times[i]).collect();
        self.responses = idx.iter().map(|&i| self.responses[i]).collect();
    }
}

/// Invariant a dataset can violate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rule {
    NoSubjects,
    EmptySubject,
    LengthMismatch,
    DuplicateTime,
    NonFinite,
    CovariateDimension,
    Intercept,
    OutsideDomain,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Rule::NoSubjects => "dataset has no subjects",
            Rule::EmptySubject => "subject has no observations",
            Rule::LengthMismatch => "times and responses differ in length",
            Rule::DuplicateTime => "observation times must be strictly increasing",
            Rule::NonFinite => "all values must be finite",
            Rule::CovariateDimension => "covariate counts must match across subjects",
            Rule::Intercept => "first nuisance covariate must equal 1",
            Rule::OutsideDomain => "time outside the time domain",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub subject: Option<String>,
    pub rule: Rule,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.subject {
            Some(s) => write!(f, "subject {}: {} ({})", s, self.rule, self.detail),
            None => write!(f, "{} ({})", self.rule, self.detail),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionalDataset {
    subjects: Vec<SubjectRecord>,
    p: usize,
    q: usize,
    time_domain: Option<(f64, f64)>,
}

impl FunctionalDataset {
    /// Sorts subjects by id and each subject's observations by time.
    ///
    /// `p` and `q` are taken from the first subject; mismatches are left for
    /// [`validate`](Self::validate) to report.
    pub fn new(mut subjects: Vec<SubjectRecord>) -> Self {
        subjects.sort_by(|a, b| a.id.cmp(&b.id));
        for s in &mut subjects {
            s.sort_by_time();
        }
        let (p, q) = subjects.first().map_or((0, 0), |s| (s.x.len(), s.z.len()));
        FunctionalDataset {
            subjects,
            p,
            q,
            time_domain: None,
        }
    }

    pub fn with_time_domain(mut self, lo: f64, hi: f64) -> Self {
        self.time_domain = Some((lo, hi));
        self
    }

    pub fn subjects(&self) -> &[SubjectRecord] {
        &self.subjects
    }

    pub fn n(&self) -> usize {
        self.subjects.len()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn total_observations(&self) -> usize {
        self.subjects.iter().map(|s| s.len()).sum()
    }

    /// Explicit time domain if one was set, else the range of pooled times.
    pub fn time_domain(&self) -> (f64, f64) {
        if let Some(d) = self.time_domain {
            return d;
        }
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for t in self.subjects.iter().flat_map(|s| s.times.iter()) {
            lo = lo.min(*t);
            hi = hi.max(*t);
        }
        (lo, hi)
    }

    pub fn pooled_times(&self) -> Vec<f64> {
        self.subjects
            .iter()
            .flat_map(|s| s.times.iter().copied())
            .collect()
    }

    pub fn stacked_responses(&self) -> Vec<f64> {
        self.subjects
            .iter()
            .flat_map(|s| s.responses.iter().copied())
            .collect()
    }

    pub fn covariates(&self) -> Vec<Vec<f64>> {
        self.subjects.iter().map(|s| s.x.clone()).collect()
    }

    /// Same subjects, times and covariates with new stacked responses.
    pub fn with_responses(&self, stacked: &[f64]) -> Result<Self> {
        if stacked.len() != self.total_observations() {
            return Err(Error::DimensionMismatch(format!(
                "{} responses for {} observations",
                stacked.len(),
                self.total_observations()
            )));
        }
        let mut out = self.clone();
        let mut off = 0;
        for s in &mut out.subjects {
            let m = s.len();
            s.responses.copy_from_slice(&stacked[off..off + m]);
            off += m;
        }
        Ok(out)
    }

    /// Copy with every subject's interest covariates replaced.
    pub fn with_covariates(&self, x: &[Vec<f64>]) -> Result<Self> {
        if x.len() != self.n() {
            return Err(Error::DimensionMismatch(format!(
                "{} covariate rows for {} subjects",
                x.len(),
                self.n()
            )));
        }
        let mut out = self.clone();
        for (s, xi) in out.subjects.iter_mut().zip(x) {
            s.x = xi.clone();
        }
        out.p = x.first().map_or(0, |v| v.len());
        Ok(out)
    }

    /// Every invariant violation, one entry per subject and rule.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.subjects.is_empty() {
            out.push(Violation {
                subject: None,
                rule: Rule::NoSubjects,
                detail: "n = 0".to_string(),
            });
            return out;
        }
        let domain = self.time_domain;
        for s in &self.subjects {
            let mut push = |rule: Rule, detail: String| {
                out.push(Violation {
                    subject: Some(s.id.clone()),
                    rule,
                    detail,
                })
            };
            if s.times.is_empty() {
                push(Rule::EmptySubject, "m_i = 0".to_string());
            }
            if s.times.len() != s.responses.len() {
                push(
                    Rule::LengthMismatch,
                    format!("{} times, {} responses", s.times.len(), s.responses.len()),
                );
            }
            if let Some(w) = s.times.windows(2).find(|w| w[0] >= w[1]) {
                push(Rule::DuplicateTime, format!("time {} repeated", w[1]));
            }
            let non_finite = s
                .times
                .iter()
                .chain(&s.responses)
                .chain(&s.x)
                .chain(&s.z)
                .any(|v| !v.is_finite());
            if non_finite {
                push(Rule::NonFinite, "NaN or infinite value".to_string());
            }
            if s.x.len() != self.p || s.z.len() != self.q {
                push(
                    Rule::CovariateDimension,
                    format!(
                        "p = {}, q = {} (expected {}, {})",
                        s.x.len(),
                        s.z.len(),
                        self.p,
                        self.q
                    ),
                );
            }
            match s.z.first() {
                Some(1.0) => {}
                Some(&z1) => push(Rule::Intercept, format!("Z_1 = {}", z1)),
                None => push(Rule::Intercept, "no nuisance columns".to_string()),
            }
            if let Some((lo, hi)) = domain {
                if let Some(t) = s.times.iter().find(|t| **t < lo || **t > hi) {
                    push(
                        Rule::OutsideDomain,
                        format!("time {} not in [{}, {}]", t, lo, hi),
                    );
                }
            }
        }
        out
    }

    pub fn ensure_valid(&self) -> Result<()> {
        let v = self.validate();
        if v.is_empty() {
            return Ok(());
        }
        let mut msg = String::new();
        for (k, viol) in v.iter().enumerate() {
            if k > 0 {
                msg.push_str("; ");
            }
            msg.push_str(&viol.to_string());
        }
        Err(Error::InvalidData(msg))
    }

    /// True when every subject is observed at the same times.
    pub fn is_dense(&self) -> bool {
        match self.subjects.split_first() {
            Some((first, rest)) => rest.iter().all(|s| s.times == first.times),
            None => false,
        }
    }
}

/// One row of a long-format table.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationRow {
    pub id: String,
    pub time: f64,
    pub response: f64,
    pub x: Vec<f64>,
    pub z: Vec<f64>,
}

/// Groups long-format rows into subjects.
///
/// X and Z must be constant within a subject (compared bitwise) and times
/// must not repeat. Unless the first Z column is identically 1 over all rows,
/// an intercept column is prepended.
pub fn from_rows(
    rows: impl IntoIterator<Item = ObservationRow>,
    x_names: &[String],
    z_names: &[String],
) -> Result<FunctionalDataset> {
    let mut groups: BTreeMap<String, SubjectRecord> = BTreeMap::new();
    let mut first_z_is_one = !z_names.is_empty();
    let mut any = false;
    for row in rows {
        any = true;
        if row.x.len() != x_names.len() || row.z.len() != z_names.len() {
            return Err(Error::DimensionMismatch(format!(
                "row for subject {} has {} x and {} z values",
                row.id,
                row.x.len(),
                row.z.len()
            )));
        }
        if row.z.first().is_some_and(|&z| z != 1.0) {
            first_z_is_one = false;
        }
        match groups.get_mut(&row.id) {
            Some(rec) => {
                for (k, (a, b)) in rec.x.iter().zip(&row.x).enumerate() {
                    if a.to_bits() != b.to_bits() {
                        return Err(Error::InconsistentCovariate {
                            subject: row.id,
                            column: x_names[k].clone(),
                        });
                    }
                }
                for (k, (a, b)) in rec.z.iter().zip(&row.z).enumerate() {
                    if a.to_bits() != b.to_bits() {
                        return Err(Error::InconsistentCovariate {
                            subject: row.id,
                            column: z_names[k].clone(),
                        });
                    }
                }
                rec.times.push(row.time);
                rec.responses.push(row.response);
            }
            None => {
                groups.insert(
                    row.id.clone(),
                    SubjectRecord {
                        id: row.id,
                        times: alloc::vec![row.time],
                        responses: alloc::vec![row.response],
                        x: row.x,
                        z: row.z,
                    },
                );
            }
        }
    }
    if !any {
        return Err(Error::InvalidData("no rows".to_string()));
    }
    let mut subjects: Vec<SubjectRecord> = groups.into_values().collect();
    for s in &mut subjects {
        if !first_z_is_one {
            s.z.insert(0, 1.0);
        }
        s.sort_by_time();
        if let Some(w) = s.times.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::DuplicateTime {
                subject: s.id.clone(),
                time: w[0],
            });
        }
    }
    Ok(FunctionalDataset::new(subjects))
}
