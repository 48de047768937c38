//! Per-token loss masks over the training target (cot tokens, then answer
//! tokens) and the full and selective cross-entropy losses.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::grad_oracle::{trace_layout, CausalLm};
use crate::trace::ReasoningTrace;
use crate::{ndjson, Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossMask {
    pub trace_id: String,
    pub length: usize,
    /// Sorted, disjoint `[start, end)` runs of ones.
    pub ones: Vec<[usize; 2]>,
}

impl LossMask {
    pub fn from_flags(trace_id: &str, flags: &[bool]) -> Self {
        let mut ones = Vec::new();
        let mut run: Option<usize> = None;
        for (i, &f) in flags.iter().enumerate() {
            match (f, run) {
                (true, None) => run = Some(i),
                (false, Some(s)) => {
                    ones.push([s, i]);
                    run = None;
                }
                _ => {}
            }
        }
        if let Some(s) = run {
            ones.push([s, flags.len()]);
        }
        Self { trace_id: trace_id.to_string(), length: flags.len(), ones }
    }

    pub fn to_flags(&self) -> Vec<bool> {
        let mut flags = vec![false; self.length];
        for &[s, e] in &self.ones {
            flags[s..e].iter_mut().for_each(|f| *f = true);
        }
        flags
    }

    pub fn support(&self) -> usize {
        self.ones.iter().map(|[s, e]| e - s).sum()
    }

    pub fn coverage_ratio(&self) -> f64 {
        if self.length == 0 {
            0.0
        } else {
            self.support() as f64 / self.length as f64
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut prev_end = 0;
        for (i, &[s, e]) in self.ones.iter().enumerate() {
            if s >= e || e > self.length || (i > 0 && s < prev_end) {
                return Err(Error::Format(format!(
                    "mask {}: range [{s}, {e}) is empty, out of bounds or overlapping",
                    self.trace_id
                )));
            }
            prev_end = e;
        }
        Ok(())
    }
}

/// Ones on every token of an important segment, plus the answer tokens when
/// `answer_always_on` is set.
pub fn build_loss_mask(
    trace: &ReasoningTrace,
    important: &BTreeSet<usize>,
    answer_always_on: bool,
) -> Result<LossMask> {
    if let Some(&m) = important.iter().next_back() {
        if m >= trace.num_segments() {
            return Err(Error::Join(format!(
                "{}: segment {m} selected but trace has {}",
                trace.trace_id,
                trace.num_segments()
            )));
        }
    }
    let mut flags = vec![false; trace.target_len()];
    for &m in important {
        flags[trace.segments[m].tokens()].iter_mut().for_each(|f| *f = true);
    }
    if answer_always_on {
        flags[trace.num_tokens()..].iter_mut().for_each(|f| *f = true);
    }
    Ok(LossMask::from_flags(&trace.trace_id, &flags))
}

/// Negative log-likelihood of every target token given everything before it.
pub fn target_nlls(lm: &dyn CausalLm, trace: &ReasoningTrace) -> Result<Vec<f64>> {
    let layout = trace_layout(lm, trace)?;
    let lp = lm.log_probs(&layout.ids)?;
    Ok(layout.cot.clone().chain(layout.answer.clone()).map(|p| -lp.get(p - 1, layout.ids[p] as usize)).collect())
}

/// Mean NLL over the target, or over the mask's ones when a mask is given.
pub fn compute_loss(lm: &dyn CausalLm, trace: &ReasoningTrace, mask: Option<&LossMask>) -> Result<f64> {
    let nll = target_nlls(lm, trace)?;
    masked_mean(&nll, mask)
}

pub fn masked_mean(nll: &[f64], mask: Option<&LossMask>) -> Result<f64> {
    match mask {
        None => Ok(nll.iter().sum::<f64>() / nll.len() as f64),
        Some(m) => {
            if m.length != nll.len() {
                return Err(Error::Join(format!(
                    "mask {} has length {}, target has {}",
                    m.trace_id,
                    m.length,
                    nll.len()
                )));
            }
            m.validate()?;
            let support = m.support();
            if support == 0 {
                return Err(Error::EmptySupport);
            }
            let flags = m.to_flags();
            let total: f64 = nll.iter().zip(&flags).filter(|(_, &f)| f).map(|(v, _)| v).sum();
            Ok(total / support as f64)
        }
    }
}

pub fn write_mask(path: &Path, masks: &[LossMask]) -> Result<()> {
    for m in masks {
        m.validate()?;
    }
    ndjson::write(path, masks)
}

pub fn read_mask(path: &Path) -> Result<Vec<LossMask>> {
    let masks: Vec<LossMask> = ndjson::read(path)?;
    for m in &masks {
        m.validate()?;
    }
    Ok(masks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad_oracle::{ModelDims, ReferenceModel, BYTE_VOCAB};
    use crate::segmenter::{default_keywords, KeywordProfile};
    use crate::trace::{ByteTokenizer, TraceRecord};
    use proptest::prelude::*;

    fn trace(cot: &str, answer: &str) -> ReasoningTrace {
        ReasoningTrace::build(
            TraceRecord {
                trace_id: "m".into(),
                query: "2+2?".into(),
                answer: answer.into(),
                cot: cot.into(),
                tokens: None,
                answer_tokens: None,
            },
            &default_keywords(KeywordProfile::PaperMain),
            &ByteTokenizer,
        )
        .unwrap()
    }

    fn model() -> ReferenceModel {
        ReferenceModel::init(
            5,
            ModelDims { vocab_size: BYTE_VOCAB, embed_dim: 8, context_len: 128, ffn_dim: 16, rotary: false },
        )
        .unwrap()
    }

    #[test]
    fn runs_from_flags() {
        let m = LossMask::from_flags("x", &[true, true, true, true, false, false, false, false, true, true]);
        assert_eq!(m.ones, vec![[0, 4], [8, 10]]);
        assert!((m.coverage_ratio() - 0.6).abs() < 1e-15);
        assert_eq!(LossMask::from_flags("x", &m.to_flags()), m);
    }

    #[test]
    fn all_and_nothing() {
        let t = trace("abc\n\nWait def\n\nHmm", "4");
        let all: BTreeSet<usize> = (0..t.num_segments()).collect();
        let full = build_loss_mask(&t, &all, true).unwrap();
        assert_eq!(full.ones, vec![[0, t.target_len()]]);
        assert_eq!(full.coverage_ratio(), 1.0);
        let none = build_loss_mask(&t, &BTreeSet::new(), false).unwrap();
        assert!(none.ones.is_empty());
        assert_eq!(none.coverage_ratio(), 0.0);
    }

    #[test]
    fn segment_runs() {
        let t = trace("abc\n\nWait def\n\nWait g", "4");
        let m = build_loss_mask(&t, &BTreeSet::from([0, 2]), false).unwrap();
        let s = &t.segments;
        assert_eq!(m.ones, vec![[0, s[0].last + 1], [s[2].first, s[2].last + 1]]);
        assert!(matches!(build_loss_mask(&t, &BTreeSet::from([7]), true), Err(Error::Join(_))));
    }

    #[test]
    fn full_mask_equals_plain_loss_bitwise() {
        let lm = model();
        let t = trace("so 2+2\n\nWait, it is 4", "4");
        let ones = LossMask { trace_id: "m".into(), length: t.target_len(), ones: vec![[0, t.target_len()]] };
        let a = compute_loss(&lm, &t, None).unwrap();
        let b = compute_loss(&lm, &t, Some(&ones)).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn zeroed_model_loss_is_log_vocab() {
        let lm = ReferenceModel::zeroed(ModelDims {
            vocab_size: BYTE_VOCAB,
            embed_dim: 4,
            context_len: 64,
            ffn_dim: 4,
            rotary: false,
        })
        .unwrap();
        let loss = compute_loss(&lm, &trace("abc def", "12"), None).unwrap();
        assert!((loss - (BYTE_VOCAB as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn partial_mask_is_mean_of_selected() {
        let lm = model();
        let t = trace("abcdef", "1");
        let nll = target_nlls(&lm, &t).unwrap();
        let m = LossMask { trace_id: "m".into(), length: t.target_len(), ones: vec![[2, 4]] };
        let loss = compute_loss(&lm, &t, Some(&m)).unwrap();
        assert!((loss - (nll[2] + nll[3]) / 2.0).abs() < 1e-15);
        let split = LossMask { ones: vec![[2, 3], [3, 4]], ..m.clone() };
        assert_eq!(compute_loss(&lm, &t, Some(&split)).unwrap(), loss);
        let empty = LossMask { ones: vec![], ..m };
        assert!(matches!(compute_loss(&lm, &t, Some(&empty)), Err(Error::EmptySupport)));
    }

    #[test]
    fn file_round_trip_and_overlap() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("mask.ndjson");
        let masks = vec![
            LossMask { trace_id: "a".into(), length: 6, ones: vec![[0, 4]] },
            LossMask { trace_id: "b".into(), length: 3, ones: vec![] },
        ];
        write_mask(&p, &masks).unwrap();
        assert_eq!(read_mask(&p).unwrap(), masks);
        std::fs::write(&p, "{\"trace_id\":\"a\",\"length\":6,\"ones\":[[0,4],[3,6]]}\n").unwrap();
        assert!(matches!(read_mask(&p), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn flags_round_trip(flags in prop::collection::vec(any::<bool>(), 0..64)) {
            let m = LossMask::from_flags("p", &flags);
            prop_assert!(m.validate().is_ok());
            prop_assert_eq!(m.to_flags(), flags.clone());
            prop_assert_eq!(m.support(), flags.iter().filter(|f| **f).count());
        }
    }
}
