//! Verification scoring: cosine scores, EER and normalized minimum DCF.
//!
//! Both metrics sweep the same threshold set: every unique score plus one
//! threshold above the maximum (reject everything). A trial is accepted when
//! its score is `>=` the threshold.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Target priors reported by [`EvalReport`].
pub const P_TARGETS: [f64; 2] = [0.01, 0.05];

pub fn cosine_score(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "cannot score vectors of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Numeric("cosine score of a zero vector".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// One operating point of the sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub p_miss: f64,
    pub p_fa: f64,
}

/// Miss and false-alarm rates at every threshold, ascending.
pub fn operating_points(scores: &[f64], labels: &[bool]) -> Result<Vec<OperatingPoint>> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::Numeric(format!("score {i} is not finite")));
    }
    let n_tgt = labels.iter().filter(|&&l| l).count();
    let n_non = labels.len() - n_tgt;
    if n_tgt == 0 || n_non == 0 {
        return Err(Error::Input(
            "need at least one target and one nontarget trial".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut points = Vec::new();
    // Everything below the current threshold is rejected.
    let mut misses = 0usize;
    let mut rejected_non = 0usize;
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        points.push(OperatingPoint {
            threshold,
            p_miss: misses as f64 / n_tgt as f64,
            p_fa: (n_non - rejected_non) as f64 / n_non as f64,
        });
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] {
                misses += 1;
            } else {
                rejected_non += 1;
            }
            i += 1;
        }
    }
    points.push(OperatingPoint {
        threshold: f64::INFINITY,
        p_miss: 1.0,
        p_fa: 0.0,
    });
    Ok(points)
}

/// Equal error rate as `(FAR + FRR)/2` at the threshold minimizing
/// `|FAR − FRR|` (ties toward the lower threshold). Returns `(eer, threshold)`.
pub fn compute_eer(scores: &[f64], labels: &[bool]) -> Result<(f64, f64)> {
    let points = operating_points(scores, labels)?;
    let mut best = points[0];
    for p in &points[1..] {
        if (p.p_fa - p.p_miss).abs() < (best.p_fa - best.p_miss).abs() {
            best = *p;
        }
    }
    Ok(((best.p_fa + best.p_miss) / 2.0, best.threshold))
}

/// Minimum detection cost normalized by the best trivial system.
pub fn compute_min_dcf(
    scores: &[f64],
    labels: &[bool],
    p_target: f64,
    c_miss: f64,
    c_fa: f64,
) -> Result<f64> {
    if !(p_target > 0.0 && p_target < 1.0) {
        return Err(Error::Input(format!("p_target {p_target} outside (0, 1)")));
    }
    if !(c_miss > 0.0 && c_fa > 0.0) {
        return Err(Error::Input("detection costs must be positive".into()));
    }
    let points = operating_points(scores, labels)?;
    let min_cost = points
        .iter()
        .map(|p| c_miss * p.p_miss * p_target + c_fa * p.p_fa * (1.0 - p_target))
        .fold(f64::INFINITY, f64::min);
    Ok(min_cost / (c_miss * p_target).min(c_fa * (1.0 - p_target)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DcfPoint {
    pub p_target: f64,
    pub min_dcf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub eer: f64,
    pub eer_threshold: f64,
    pub min_dcf: Vec<DcfPoint>,
    pub num_target: usize,
    pub num_nontarget: usize,
}

impl EvalReport {
    pub fn from_scores(scores: &[f64], labels: &[bool]) -> Result<Self> {
        let (eer, eer_threshold) = compute_eer(scores, labels)?;
        let min_dcf = P_TARGETS
            .iter()
            .map(|&p| {
                Ok(DcfPoint {
                    p_target: p,
                    min_dcf: compute_min_dcf(scores, labels, p, 1.0, 1.0)?,
                })
            })
            .collect::<Result<_>>()?;
        let num_target = labels.iter().filter(|&&l| l).count();
        Ok(Self {
            eer,
            eer_threshold,
            min_dcf,
            num_target,
            num_nontarget: labels.len() - num_target,
        })
    }

    pub fn min_dcf_at(&self, p_target: f64) -> Option<f64> {
        self.min_dcf
            .iter()
            .find(|d| d.p_target == p_target)
            .map(|d| d.min_dcf)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trial {
    pub enroll: String,
    pub test: String,
    pub target: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialList {
    pub entries: Vec<Trial>,
}

impl TrialList {
    pub fn labels(&self) -> Vec<bool> {
        self.entries.iter().map(|t| t.target).collect()
    }

    pub fn num_targets(&self) -> usize {
        self.entries.iter().filter(|t| t.target).count()
    }

    /// Parses `<label 0|1> <enroll-id> <test-id>` lines. Blank lines are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.is_empty() {
                continue;
            }
            let [label, enroll, test] = fields[..] else {
                return Err(Error::format(
                    "trial list",
                    format!("line {}: expected 3 fields, got {}", lineno + 1, fields.len()),
                ));
            };
            let target = match label {
                "1" => true,
                "0" => false,
                other => {
                    return Err(Error::format(
                        "trial list",
                        format!("line {}: label must be 0 or 1, got {other:?}", lineno + 1),
                    ))
                }
            };
            entries.push(Trial {
                enroll: enroll.to_owned(),
                test: test.to_owned(),
                target,
            });
        }
        Ok(Self { entries })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.entries {
            let _ = writeln!(out, "{} {} {}", u8::from(t.target), t.enroll, t.test);
        }
        out
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

/// Renders `<enroll-id> <test-id> <score>` lines in trial order.
pub fn format_scores(trials: &TrialList, scores: &[f64]) -> String {
    let mut out = String::new();
    for (t, s) in trials.entries.iter().zip(scores) {
        let _ = writeln!(out, "{} {} {s}", t.enroll, t.test);
    }
    out
}

pub fn parse_scores(text: &str) -> Result<Vec<(String, String, f64)>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let [enroll, test, score] = fields[..] else {
            return Err(Error::format(
                "score file",
                format!("line {}: expected 3 fields", lineno + 1),
            ));
        };
        let score: f64 = score.parse().map_err(|_| {
            Error::format("score file", format!("line {}: bad score {score:?}", lineno + 1))
        })?;
        out.push((enroll.to_owned(), test.to_owned(), score));
    }
    Ok(out)
}
