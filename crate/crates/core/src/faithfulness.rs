//! Comprehensiveness and sufficiency of prototype explanations, measured by
//! zeroing classifier rows and watching the predicted-class logit.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::datastore::{Dataset, TokenEmbeddingSample};
use crate::error::{Error, Result};
use crate::model::{forward, logits, ForwardTrace, HeadParameters};
use crate::report::{num, CsvTable};

pub const DEFAULT_K_PERCENTS: [f64; 5] = [1.0, 5.0, 10.0, 20.0, 50.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Most similar prototypes.
    Top,
    /// Least similar prototypes.
    Bottom,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Top => "top",
            Direction::Bottom => "bottom",
        })
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "top" => Ok(Direction::Top),
            "bottom" => Ok(Direction::Bottom),
            _ => Err(Error::Config(format!("direction must be top or bottom, got {s:?}"))),
        }
    }
}

/// `max(1, floor(k·N/100))` prototype indices ordered by similarity, ties to the lower index.
pub fn top_k_prototypes(sims: &[f64], k_percent: f64, which: Direction) -> Result<Vec<usize>> {
    if !(k_percent > 0.0 && k_percent <= 100.0) {
        return Err(Error::Config(format!("k_percent must lie in (0, 100], got {k_percent}")));
    }
    let n = sims.len();
    let count = ((k_percent * n as f64 / 100.0).floor() as usize).max(1).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    // stable sort: equal similarities keep ascending index order
    match which {
        Direction::Top => order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a])),
        Direction::Bottom => order.sort_by(|&a, &b| sims[a].total_cmp(&sims[b])),
    }
    order.truncate(count);
    Ok(order)
}

fn confidence(trace: &ForwardTrace, sample_id: usize) -> Result<(usize, f64)> {
    let pred = trace.predicted();
    let pr = trace.logits[pred];
    if pr == 0.0 {
        return Err(Error::UndefinedConfidence { sample_id });
    }
    Ok((pred, pr))
}

fn complement(set: &[usize], n: usize) -> Result<Vec<usize>> {
    let mut keep = vec![true; n];
    for &j in set {
        *keep
            .get_mut(j)
            .ok_or_else(|| Error::Index(format!("prototype {j} out of range for N={n}")))? = false;
    }
    Ok((0..n).filter(|&j| keep[j]).collect())
}

/// Relative drop of the predicted-class logit when `set` is masked out.
pub fn comp(trace: &ForwardTrace, params: &HeadParameters, set: &[usize], sample_id: usize) -> Result<f64> {
    let (pred, pr) = confidence(trace, sample_id)?;
    let without = logits(&trace.sims, params, Some(set))?[pred];
    Ok((pr - without) / pr)
}

/// Relative drop of the predicted-class logit when only `set` is kept.
pub fn suff(trace: &ForwardTrace, params: &HeadParameters, set: &[usize], sample_id: usize) -> Result<f64> {
    let (pred, pr) = confidence(trace, sample_id)?;
    let rest = complement(set, params.num_prototypes())?;
    let only = logits(&trace.sims, params, Some(&rest))?[pred];
    Ok((pr - only) / pr)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FaithfulnessRow {
    pub sample_id: usize,
    pub k: f64,
    pub direction: Direction,
    pub comp: f64,
    pub suff: f64,
    pub pr: f64,
    pub pred: usize,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FaithfulnessCell {
    pub k: f64,
    pub direction: Direction,
    pub mean_comp: f64,
    pub mean_suff: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FaithfulnessReport {
    pub k_values: Vec<f64>,
    /// One cell per (k, direction), k-major, top before bottom.
    pub cells: Vec<FaithfulnessCell>,
    pub rows: Vec<FaithfulnessRow>,
    /// Samples whose predicted-class logit is exactly zero.
    pub skipped: Vec<usize>,
}

impl FaithfulnessReport {
    pub fn cell(&self, k: f64, direction: Direction) -> Option<&FaithfulnessCell> {
        self.cells.iter().find(|c| c.k == k && c.direction == direction)
    }

    /// Mean Comp per k for one direction, in `k_values` order.
    pub fn comp_curve(&self, direction: Direction) -> Vec<f64> {
        self.k_values
            .iter()
            .filter_map(|&k| self.cell(k, direction).map(|c| c.mean_comp))
            .collect()
    }

    pub fn suff_curve(&self, direction: Direction) -> Vec<f64> {
        self.k_values
            .iter()
            .filter_map(|&k| self.cell(k, direction).map(|c| c.mean_suff))
            .collect()
    }
}

fn sample_rows(
    sample: &TokenEmbeddingSample,
    params: &HeadParameters,
    k_values: &[f64],
) -> Result<Option<Vec<FaithfulnessRow>>> {
    let trace = forward(sample, params)?;
    if trace.logits[trace.predicted()] == 0.0 {
        return Ok(None);
    }
    let mut rows = Vec::with_capacity(k_values.len() * 2);
    for &k in k_values {
        for direction in [Direction::Top, Direction::Bottom] {
            let set = top_k_prototypes(&trace.sims, k, direction)?;
            rows.push(FaithfulnessRow {
                sample_id: sample.sample_id,
                k,
                direction,
                comp: comp(&trace, params, &set, sample.sample_id)?,
                suff: suff(&trace, params, &set, sample.sample_id)?,
                pr: trace.logits[trace.predicted()],
                pred: trace.predicted(),
                label: sample.target.class(),
            });
        }
    }
    Ok(Some(rows))
}

pub fn faithfulness_report(params: &HeadParameters, data: &Dataset, k_values: &[f64]) -> Result<FaithfulnessReport> {
    if data.is_empty() {
        return Err(Error::Config("faithfulness needs a nonempty dataset".into()));
    }
    if k_values.is_empty() {
        return Err(Error::Config("k list is empty".into()));
    }
    for &k in k_values {
        top_k_prototypes(&[0.0], k, Direction::Top)?;
    }
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for s in &data.samples {
        match sample_rows(s, params, k_values)? {
            Some(r) => rows.extend(r),
            None => skipped.push(s.sample_id),
        }
    }
    let mut cells = Vec::with_capacity(k_values.len() * 2);
    for &k in k_values {
        for direction in [Direction::Top, Direction::Bottom] {
            let (mut c, mut s, mut count) = (0.0, 0.0, 0usize);
            for r in rows.iter().filter(|r| r.k == k && r.direction == direction) {
                c += r.comp;
                s += r.suff;
                count += 1;
            }
            let denom = count.max(1) as f64;
            cells.push(FaithfulnessCell {
                k,
                direction,
                mean_comp: if count > 0 { c / denom } else { f64::NAN },
                mean_suff: if count > 0 { s / denom } else { f64::NAN },
                samples: count,
            });
        }
    }
    Ok(FaithfulnessReport {
        k_values: k_values.to_vec(),
        cells,
        rows,
        skipped,
    })
}

/// Per-sample detail table.
pub fn faithfulness_table(report: &FaithfulnessReport) -> Result<CsvTable> {
    let mut t = CsvTable::new(["sample_id", "k", "direction", "comp", "suff", "pr", "pred", "label"]);
    t.comment("confidence = predicted-class logit; k% count = max(1, floor(k*N/100))");
    if !report.skipped.is_empty() {
        t.comment(format!("skipped (predicted logit exactly 0): {:?}", report.skipped));
    }
    for r in &report.rows {
        t.push(vec![
            r.sample_id.to_string(),
            num(r.k),
            r.direction.to_string(),
            num(r.comp),
            num(r.suff),
            num(r.pr),
            r.pred.to_string(),
            r.label.to_string(),
        ])?;
    }
    Ok(t)
}

/// Mean Comp/Suff per (k, direction).
pub fn summary_table(report: &FaithfulnessReport) -> Result<CsvTable> {
    let mut t = CsvTable::new(["k", "direction", "mean_comp", "mean_suff", "samples"]);
    t.comment(format!("skipped samples: {}", report.skipped.len()));
    for c in &report.cells {
        t.push(vec![
            num(c.k),
            c.direction.to_string(),
            num(c.mean_comp),
            num(c.mean_suff),
            c.samples.to_string(),
        ])?;
    }
    Ok(t)
}
