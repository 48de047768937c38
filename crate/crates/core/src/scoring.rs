//! Segment strength and direction consistency from token attributions.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::trace::Segment;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AggregationMode {
    /// `Σ|IG| / √N`
    #[default]
    SqrtNormalizedSum,
    /// `Σ|IG|`
    DirectSum,
    /// Mean of the `⌈0.2·N⌉` largest `|IG|`.
    Top20Mean,
}

impl AggregationMode {
    pub fn id(self) -> &'static str {
        match self {
            Self::SqrtNormalizedSum => "sqrt-normalized-sum",
            Self::DirectSum => "direct-sum",
            Self::Top20Mean => "top20-mean",
        }
    }

    fn strength(self, igs: &[f64]) -> f64 {
        let abs_sum: f64 = igs.iter().map(|v| v.abs()).sum();
        match self {
            Self::SqrtNormalizedSum => abs_sum / (igs.len() as f64).sqrt(),
            Self::DirectSum => abs_sum,
            Self::Top20Mean => {
                let mut abs: Vec<f64> = igs.iter().map(|v| v.abs()).collect();
                abs.sort_by(|a, b| b.total_cmp(a));
                let k = (igs.len() * 2).div_ceil(10);
                abs[..k].iter().sum::<f64>() / k as f64
            }
        }
    }
}

impl std::str::FromStr for AggregationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sqrt-normalized-sum" | "sqrt" => Ok(Self::SqrtNormalizedSum),
            "direct-sum" | "sum" => Ok(Self::DirectSum),
            "top20-mean" | "top20" => Ok(Self::Top20Mean),
            other => Err(Error::Config(format!("unknown aggregation mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentScore {
    pub seg_index: usize,
    pub strength: f64,
    pub normalized_strength: f64,
    pub consistency: f64,
    pub aggregation_mode: AggregationMode,
}

/// `|Σ IG| / Σ|IG|`, with an all-zero segment counted as fully consistent.
pub fn consistency(igs: &[f64]) -> f64 {
    let abs_sum: f64 = igs.iter().map(|v| v.abs()).sum();
    if abs_sum == 0.0 {
        return 1.0;
    }
    let signed: f64 = igs.iter().sum();
    (signed.abs() / abs_sum).min(1.0)
}

/// Raw strength and consistency per segment; `normalized_strength` is left at 0.
pub fn segment_scores(segments: &[Segment], cot_igs: &[f64], mode: AggregationMode) -> Result<Vec<SegmentScore>> {
    if let Some(last) = segments.last() {
        if last.last >= cot_igs.len() {
            return Err(Error::Join(format!(
                "attribution covers {} tokens, segments need {}",
                cot_igs.len(),
                last.last + 1
            )));
        }
    }
    Ok(segments
        .iter()
        .map(|s| {
            let igs = &cot_igs[s.tokens()];
            SegmentScore {
                seg_index: s.seg_index,
                strength: mode.strength(igs),
                normalized_strength: 0.0,
                consistency: consistency(igs),
                aggregation_mode: mode,
            }
        })
        .collect())
}

/// Divides by the trace total; all-zero strengths become uniform.
pub fn normalize_strengths(scores: &mut [SegmentScore]) {
    let total: f64 = scores.iter().map(|s| s.strength).sum();
    let m = scores.len() as f64;
    for s in scores.iter_mut() {
        s.normalized_strength = if total > 0.0 { s.strength / total } else { 1.0 / m };
    }
}

pub fn score_trace(segments: &[Segment], cot_igs: &[f64], mode: AggregationMode) -> Result<Vec<SegmentScore>> {
    let mut scores = segment_scores(segments, cot_igs, mode)?;
    normalize_strengths(&mut scores);
    Ok(scores)
}

pub const CSV_HEADER: &str = "trace_id,seg_index,strength,normalized_strength,consistency";

pub fn write_scores_csv(path: &Path, rows: &[(String, Vec<SegmentScore>)]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{CSV_HEADER}")?;
    for (id, scores) in rows {
        for s in scores {
            writeln!(out, "{},{},{:e},{:e},{:e}", id, s.seg_index, s.strength, s.normalized_strength, s.consistency)?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads the CSV written by [`write_scores_csv`], grouping rows by trace in
/// file order. Values round-trip exactly.
pub fn read_scores_csv(path: &Path, mode: AggregationMode) -> Result<Vec<(String, Vec<SegmentScore>)>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == CSV_HEADER => {}
        _ => return Err(Error::Format(format!("{}: missing score header", path.display()))),
    }
    let mut out: Vec<(String, Vec<SegmentScore>)> = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let bad = |what: &str| Error::Parse { line: i + 1, message: what.to_string() };
        let cols: Vec<&str> = line.rsplitn(5, ',').collect();
        if cols.len() != 5 {
            return Err(bad("expected 5 columns"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad("bad number"));
        let score = SegmentScore {
            seg_index: cols[3].parse().map_err(|_| bad("bad seg_index"))?,
            strength: num(cols[2])?,
            normalized_strength: num(cols[1])?,
            consistency: num(cols[0])?,
            aggregation_mode: mode,
        };
        let id = cols[4];
        match out.last_mut() {
            Some((last, v)) if last == id => v.push(score),
            _ => out.push((id.to_string(), vec![score])),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seg(i: usize, first: usize, last: usize) -> Segment {
        Segment { seg_index: i, first, last, start: first, end: last + 1, is_first: i == 0, is_last: false }
    }

    fn one(igs: &[f64], mode: AggregationMode) -> SegmentScore {
        segment_scores(&[seg(0, 0, igs.len() - 1)], igs, mode).unwrap().remove(0)
    }

    #[test]
    fn mixed_sign_segment() {
        let s = one(&[0.6, -0.2, 0.2], AggregationMode::SqrtNormalizedSum);
        assert!((s.strength - 1.0 / 3f64.sqrt()).abs() < 1e-12);
        assert!((s.consistency - 0.6).abs() < 1e-12);
    }

    #[test]
    fn consistency_edge_cases() {
        assert_eq!(consistency(&[0.3, 0.1]), 1.0);
        assert_eq!(consistency(&[1.0, -1.0]), 0.0);
        let z = one(&[0.0, 0.0], AggregationMode::SqrtNormalizedSum);
        assert_eq!((z.strength, z.consistency), (0.0, 1.0));
    }

    #[test]
    fn alternate_modes() {
        assert_eq!(one(&[1.0, -2.0], AggregationMode::DirectSum).strength, 3.0);
        // ⌈0.2·6⌉ = 2 → mean of 5 and 4
        let s = one(&[1.0, -5.0, 2.0, 4.0, 0.0, 3.0], AggregationMode::Top20Mean);
        assert_eq!(s.strength, 4.5);
        assert_eq!(one(&[-7.0], AggregationMode::Top20Mean).strength, 7.0);
        assert!("l2".parse::<AggregationMode>().is_err());
    }

    #[test]
    fn normalization() {
        let mk = |v: &[f64]| -> Vec<SegmentScore> {
            v.iter()
                .enumerate()
                .map(|(i, &s)| SegmentScore {
                    seg_index: i,
                    strength: s,
                    normalized_strength: 0.0,
                    consistency: 1.0,
                    aggregation_mode: AggregationMode::default(),
                })
                .collect()
        };
        let mut a = mk(&[2.0, 1.0, 1.0]);
        normalize_strengths(&mut a);
        assert_eq!(a.iter().map(|s| s.normalized_strength).collect::<Vec<_>>(), vec![0.5, 0.25, 0.25]);
        let mut b = mk(&[3.0]);
        normalize_strengths(&mut b);
        assert_eq!(b[0].normalized_strength, 1.0);
        let mut c = mk(&[0.0; 4]);
        normalize_strengths(&mut c);
        assert!(c.iter().all(|s| s.normalized_strength == 0.25));
    }

    #[test]
    fn short_attribution_is_join_error() {
        assert!(matches!(segment_scores(&[seg(0, 0, 3)], &[1.0], AggregationMode::DirectSum), Err(Error::Join(_))));
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        let segs = [seg(0, 0, 1), seg(1, 2, 2)];
        let rows =
            vec![("a,b".to_string(), score_trace(&segs, &[0.1, -1.0 / 3.0, 2.5], AggregationMode::default()).unwrap())];
        write_scores_csv(&p, &rows).unwrap();
        assert_eq!(read_scores_csv(&p, AggregationMode::default()).unwrap(), rows);
    }

    proptest! {
        #[test]
        fn scale_invariance(igs in prop::collection::vec(-5.0f64..5.0, 2..30), cut in 1usize..29, c in 0.01f64..100.0) {
            let cut = cut.min(igs.len() - 1);
            let segs = [seg(0, 0, cut - 1), seg(1, cut, igs.len() - 1)];
            let a = score_trace(&segs, &igs, AggregationMode::default()).unwrap();
            let scaled: Vec<f64> = igs.iter().map(|v| v * c).collect();
            let b = score_trace(&segs, &scaled, AggregationMode::default()).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x.consistency - y.consistency).abs() < 1e-9);
                prop_assert!((x.normalized_strength - y.normalized_strength).abs() < 1e-9);
                prop_assert!((0.0..=1.0).contains(&x.consistency));
            }
            let total: f64 = a.iter().map(|s| s.normalized_strength).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }

        #[test]
        fn adding_a_token_raises_direct_sum(igs in prop::collection::vec(-5.0f64..5.0, 1..20), g in 1e-6f64..5.0, neg: bool) {
            let base = one(&igs, AggregationMode::DirectSum).strength;
            let mut more = igs.clone();
            more.push(if neg { -g } else { g });
            prop_assert!(one(&more, AggregationMode::DirectSum).strength > base);
        }
    }
}
