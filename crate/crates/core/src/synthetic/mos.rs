//! Mean opinion score tables from 1..5 ratings.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub method_tag: String,
    pub domain_tag: String,
    pub score: u8,
    pub rater_id: String,
}

/// Means per `(method, domain)` cell, rows and columns in first-seen order.
#[derive(Debug, Clone, PartialEq)]
pub struct MosTable {
    pub methods: Vec<String>,
    pub domains: Vec<String>,
    cells: BTreeMap<(usize, usize), (u64, usize)>,
}

impl MosTable {
    fn new() -> Self {
        Self {
            methods: Vec::new(),
            domains: Vec::new(),
            cells: BTreeMap::new(),
        }
    }

    fn add(&mut self, method: &str, domain: &str, score: u8) {
        let m = index_of(&mut self.methods, method);
        let d = index_of(&mut self.domains, domain);
        let cell = self.cells.entry((m, d)).or_insert((0, 0));
        cell.0 += u64::from(score);
        cell.1 += 1;
    }

    /// Arithmetic mean, `None` for a cell without ratings.
    pub fn mean(&self, method: &str, domain: &str) -> Option<f64> {
        let m = self.methods.iter().position(|x| x == method)?;
        let d = self.domains.iter().position(|x| x == domain)?;
        self.cells.get(&(m, d)).map(|&(sum, n)| sum as f64 / n as f64)
    }

    pub fn count(&self, method: &str, domain: &str) -> usize {
        let m = self.methods.iter().position(|x| x == method);
        let d = self.domains.iter().position(|x| x == domain);
        match (m, d) {
            (Some(m), Some(d)) => self.cells.get(&(m, d)).map_or(0, |c| c.1),
            _ => 0,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.methods.len(), self.domains.len())
    }

    /// Grid with a `method` header column; means to 3 decimals, empty when absent.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method");
        for d in &self.domains {
            out.push(',');
            out.push_str(d);
        }
        out.push('\n');
        for m in &self.methods {
            out.push_str(m);
            for d in &self.domains {
                out.push(',');
                if let Some(v) = self.mean(m, d) {
                    let _ = write!(out, "{v:.3}");
                }
            }
            out.push('\n');
        }
        out
    }
}

fn index_of(list: &mut Vec<String>, key: &str) -> usize {
    match list.iter().position(|x| x == key) {
        Some(i) => i,
        None => {
            list.push(key.to_string());
            list.len() - 1
        }
    }
}

/// Overall grid plus one grid per metric.
///
/// A `method_tag` of the form `method:metric` contributes to the overall
/// cell of `method` and to the `metric` grid; a plain tag only to the overall grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MosReport {
    pub overall: MosTable,
    pub per_metric: BTreeMap<String, MosTable>,
}

pub fn mos_aggregate(records: &[RatingRecord]) -> Result<MosReport> {
    let mut overall = MosTable::new();
    let mut per_metric: BTreeMap<String, MosTable> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        if !(1..=5).contains(&r.score) {
            return Err(Error::Validation(format!(
                "rating {i}: score {} outside 1..5",
                r.score
            )));
        }
        let (method, metric) = match r.method_tag.split_once(':') {
            Some((m, metric)) => (m, Some(metric)),
            None => (r.method_tag.as_str(), None),
        };
        overall.add(method, &r.domain_tag, r.score);
        if let Some(metric) = metric {
            per_metric
                .entry(metric.to_string())
                .or_insert_with(MosTable::new)
                .add(method, &r.domain_tag, r.score);
        }
    }
    Ok(MosReport { overall, per_metric })
}

/// Reads `method_tag,domain_tag,score,rater_id` rows (header required).
pub fn read_ratings_csv<R: Read>(reader: R) -> Result<Vec<RatingRecord>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| Error::Validation(format!("ratings row {}: {e}", i + 1)))?;
        if row.len() != 4 {
            return Err(Error::Validation(format!(
                "ratings row {}: expected 4 fields, got {}",
                i + 1,
                row.len()
            )));
        }
        let score: i64 = row[2]
            .parse()
            .map_err(|_| Error::Validation(format!("ratings row {}: score {:?} is not an integer", i + 1, &row[2])))?;
        if !(1..=5).contains(&score) {
            return Err(Error::Validation(format!("ratings row {}: score {score} outside 1..5", i + 1)));
        }
        out.push(RatingRecord {
            method_tag: row[0].to_string(),
            domain_tag: row[1].to_string(),
            score: score as u8,
            rater_id: row[3].to_string(),
        });
    }
    Ok(out)
}
