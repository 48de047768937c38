//! Ranking, cumulative-strength cutoff and consistency filtering.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::scoring::SegmentScore;
use crate::trace::Segment;
use crate::{ndjson, Error, Result};

pub const DEFAULT_TAU: f64 = 0.7;
pub const DEFAULT_BETA: f64 = 0.8;

/// Slack on the cumulative comparison so a threshold of 1.0 is reached by
/// the full prefix despite rounding in the normalized strengths.
pub const CUMULATIVE_SLACK: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionPolicy {
    pub tau: f64,
    pub beta: f64,
    pub include_boundaries: bool,
}

impl Default for SelectionPolicy {
    fn default() -> Self {
        Self { tau: DEFAULT_TAU, beta: DEFAULT_BETA, include_boundaries: true }
    }
}

impl SelectionPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Config(format!("tau {} outside (0, 1]", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!("beta {} outside [0, 1]", self.beta)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub ranking: Vec<usize>,
    pub k_star: usize,
    pub important: BTreeSet<usize>,
    pub policy: SelectionPolicy,
}

/// Segment indices by normalized strength, descending; ties keep index order.
pub fn rank_segments(scores: &[SegmentScore]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].normalized_strength.total_cmp(&scores[a].normalized_strength));
    order
}

/// Smallest prefix of `ranking` whose normalized strength reaches `tau`,
/// or the whole ranking if none does.
pub fn cutoff(scores: &[SegmentScore], ranking: &[usize], tau: f64) -> usize {
    let mut cum = 0.0;
    for (k, &m) in ranking.iter().enumerate() {
        cum += scores[m].normalized_strength;
        if cum >= tau - CUMULATIVE_SLACK {
            return k + 1;
        }
    }
    ranking.len()
}

pub fn boundary_indices(segments: &[Segment]) -> impl Iterator<Item = usize> + '_ {
    segments.iter().filter(|s| s.is_first || s.is_last).map(|s| s.seg_index)
}

pub fn select_important(
    scores: &[SegmentScore],
    segments: &[Segment],
    policy: &SelectionPolicy,
) -> Result<SelectionResult> {
    policy.validate()?;
    if scores.is_empty() {
        return Err(Error::Domain("no segment scores to select from".into()));
    }
    if scores.len() != segments.len() {
        return Err(Error::Join(format!("{} scores for {} segments", scores.len(), segments.len())));
    }
    let ranking = rank_segments(scores);
    let k_star = cutoff(scores, &ranking, policy.tau);
    let mut important: BTreeSet<usize> =
        ranking[..k_star].iter().copied().filter(|&m| scores[m].consistency <= policy.beta).collect();
    if policy.include_boundaries {
        important.extend(boundary_indices(segments));
    }
    Ok(SelectionResult { ranking, k_star, important, policy: *policy })
}

/// One line of a selection file. Segment-level methods fill `important`;
/// token-level ablations fill `token_ones` with `[start, end)` runs instead.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub trace_id: String,
    pub method: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ranking: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_star: Option<usize>,
    pub important: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<SelectionPolicy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_ones: Option<Vec<[usize; 2]>>,
}

impl SelectionRecord {
    pub fn from_result(trace_id: &str, method: &str, r: &SelectionResult) -> Self {
        Self {
            trace_id: trace_id.to_string(),
            method: method.to_string(),
            ranking: r.ranking.clone(),
            k_star: Some(r.k_star),
            important: r.important.iter().copied().collect(),
            policy: Some(r.policy),
            token_ones: None,
        }
    }

    pub fn important_set(&self) -> BTreeSet<usize> {
        self.important.iter().copied().collect()
    }
}

pub fn write_selections(path: &Path, records: &[SelectionRecord]) -> Result<()> {
    ndjson::write(path, records)
}

pub fn read_selections(path: &Path) -> Result<Vec<SelectionRecord>> {
    ndjson::read(path)
}
