use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Label of genuine (real) samples; scores are the probability of this class.
pub const REAL: u8 = 1;

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::Metric(format!("score {i} is NaN")));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Metric(format!("label {l} is not binary")));
    }
    let pos = labels.iter().filter(|&&l| l == REAL).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Metric("both classes must be present".into()));
    }
    Ok((pos, neg))
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half. Computed from midranks.
pub fn compute_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = check_inputs(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // doubled ranks keep everything integral
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank2 = (i + 1 + j + 1) as u128;
        for &k in &order[i..=j] {
            if labels[k] == REAL {
                rank_sum2 += midrank2;
            }
        }
        i = j + 1;
    }
    let (pos, neg) = (pos as u128, neg as u128);
    let u2 = rank_sum2 - pos * (pos + 1);
    Ok(u2 as f64 / (2 * pos * neg) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub video_id: Option<String>,
    pub score: f64,
    pub label: u8,
}

/// Reads a JSON-lines score file; blank lines are skipped.
pub fn read_scores(path: &Path) -> Result<Vec<ScoreRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ScoreRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Manifest(format!("{} line {}: {e}", path.display(), n + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_scores(path: &Path, records: &[ScoreRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Per-video mean score and label. Records without a video id form their own
/// single-frame video.
pub fn video_scores(records: &[ScoreRecord]) -> Result<(Vec<f64>, Vec<u8>)> {
    let mut groups: BTreeMap<&str, (f64, usize, u8)> = BTreeMap::new();
    for r in records {
        let key = r.video_id.as_deref().unwrap_or(&r.id);
        let entry = groups.entry(key).or_insert((0.0, 0, r.label));
        if entry.2 != r.label {
            return Err(Error::Metric(format!("video {key} mixes labels")));
        }
        entry.0 += r.score;
        entry.1 += 1;
    }
    Ok(groups.values().map(|&(s, n, l)| (s / n as f64, l)).unzip())
}

/// AUC over videos, each scored by the mean of its frame scores.
pub fn video_auc(records: &[ScoreRecord]) -> Result<f64> {
    let (scores, labels) = video_scores(records)?;
    compute_auc(&scores, &labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdPolicy {
    /// Threshold where FAR and FRR are closest on the evaluated scores.
    #[default]
    EqualError,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRow {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

impl ThresholdRow {
    pub fn hter(&self) -> f64 {
        (self.far + self.frr) / 2.0
    }
}

/// FAR: share of negatives accepted (`score ≥ t`). FRR: share of positives
/// rejected (`score < t`).
pub fn rates_at(scores: &[f64], labels: &[u8], threshold: f64) -> Result<ThresholdRow> {
    let (pos, neg) = check_inputs(scores, labels)?;
    let mut fa = 0usize;
    let mut fr = 0usize;
    for (&s, &l) in scores.iter().zip(labels) {
        if l == REAL && s < threshold {
            fr += 1;
        }
        if l != REAL && s >= threshold {
            fa += 1;
        }
    }
    Ok(ThresholdRow {
        threshold,
        far: fa as f64 / neg as f64,
        frr: fr as f64 / pos as f64,
    })
}

/// FAR/FRR at every distinct score and at +∞, ascending.
pub fn threshold_table(scores: &[f64], labels: &[u8]) -> Result<Vec<ThresholdRow>> {
    let (pos, neg) = check_inputs(scores, labels)?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rows = Vec::new();
    // sweeping upward: at threshold s_i, everything below is rejected
    let mut rejected_pos = 0usize;
    let mut rejected_neg = 0usize;
    let mut i = 0;
    while i < idx.len() {
        let t = scores[idx[i]];
        rows.push(ThresholdRow {
            threshold: t,
            far: (neg - rejected_neg) as f64 / neg as f64,
            frr: rejected_pos as f64 / pos as f64,
        });
        while i < idx.len() && scores[idx[i]] == t {
            if labels[idx[i]] == REAL {
                rejected_pos += 1;
            } else {
                rejected_neg += 1;
            }
            i += 1;
        }
    }
    rows.push(ThresholdRow {
        threshold: f64::INFINITY,
        far: 0.0,
        frr: 1.0,
    });
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HterResult {
    pub hter: f64,
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

/// Half total error rate. The equal-error policy picks the candidate
/// threshold minimizing |FAR − FRR|, then HTER, then the threshold itself.
pub fn compute_hter(scores: &[f64], labels: &[u8], policy: ThresholdPolicy) -> Result<HterResult> {
    let row = match policy {
        ThresholdPolicy::Fixed(t) => rates_at(scores, labels, t)?,
        ThresholdPolicy::EqualError => {
            let table = threshold_table(scores, labels)?;
            let key = |r: &ThresholdRow| ((r.far - r.frr).abs(), r.hter(), r.threshold);
            *table
                .iter()
                .min_by(|a, b| {
                    let (ka, kb) = (key(a), key(b));
                    ka.0.total_cmp(&kb.0)
                        .then(ka.1.total_cmp(&kb.1))
                        .then(ka.2.total_cmp(&kb.2))
                })
                .expect("table has at least the +inf row")
        }
    };
    Ok(HterResult {
        hter: row.hter(),
        threshold: row.threshold,
        far: row.far,
        frr: row.frr,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub frame_auc: f64,
    pub video_auc: f64,
    pub hter: f64,
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
    pub table: Vec<ThresholdRow>,
}

pub fn evaluate(records: &[ScoreRecord], policy: ThresholdPolicy) -> Result<EvalReport> {
    let scores: Vec<f64> = records.iter().map(|r| r.score).collect();
    let labels: Vec<u8> = records.iter().map(|r| r.label).collect();
    let h = compute_hter(&scores, &labels, policy)?;
    Ok(EvalReport {
        frame_auc: compute_auc(&scores, &labels)?,
        video_auc: video_auc(records)?,
        hter: h.hter,
        threshold: h.threshold,
        far: h.far,
        frr: h.frr,
        table: threshold_table(&scores, &labels)?,
    })
}
