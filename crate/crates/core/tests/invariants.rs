use std::collections::BTreeSet;

use cotseg_core::analytics::{
    bleu, bleu_vs_preceding, decision_segment, normalize_answer, parse_verdict, strength_cdf,
};
use cotseg_core::attribution::{integrated_gradients, AttributionConfig, Baseline};
use cotseg_core::baselines::{
    confidence_steps, ratio_prefix, run_baseline, top_token_flags, BaselineInputs, BaselineMethod, BaselinePolicy,
    BaselineSelection,
};
use cotseg_core::grad_oracle::hooks::LinearScorer;
use cotseg_core::grad_oracle::{
    read_dump, write_dump, DumpHeader, DumpRecord, GradOracle, ModelDims, ReferenceModel, BYTE_VOCAB,
};
use cotseg_core::masking::{build_loss_mask, masked_mean, LossMask};
use cotseg_core::scoring::{consistency, score_trace, AggregationMode};
use cotseg_core::segmenter::{default_keywords, KeywordProfile};
use cotseg_core::selection::{select_important, SelectionPolicy};
use cotseg_core::trace::{
    load_traces, read_traces, write_corpus, write_traces, ByteTokenizer, CorpusSchema, ReasoningTrace, TraceRecord,
};
use proptest::prelude::*;

fn cot_strategy() -> impl Strategy<Value = String> {
    let pieces = prop::sample::select(vec![
        "we add",
        " 12",
        " + 30",
        " = 42.",
        "\n\nWait, ",
        "\n\nAlternatively, ",
        "\n\nHowever, ",
        "\n\nBut wait, ",
        "so 7",
        "é",
        " ",
    ]);
    prop::collection::vec(pieces, 1..24).prop_map(|v| v.concat())
}

fn build(id: &str, cot: &str, answer: &str) -> ReasoningTrace {
    ReasoningTrace::build(
        TraceRecord {
            trace_id: id.into(),
            query: "What is 12 + 30?".into(),
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

fn small_model() -> ReferenceModel {
    ReferenceModel::init(
        21,
        ModelDims { vocab_size: BYTE_VOCAB, embed_dim: 8, context_len: 256, ffn_dim: 16, rotary: false },
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn traces_round_trip_and_partition_tokens(cots in prop::collection::vec(cot_strategy(), 1..5)) {
        let traces: Vec<ReasoningTrace> = cots.iter().enumerate().map(|(i, c)| build(&format!("t{i}"), c, "42")).collect();
        for t in &traces {
            let mut all: Vec<usize> = t.segments.iter().flat_map(|s| s.tokens()).collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..t.num_tokens()).collect::<Vec<_>>());
        }
        let dir = tempfile::tempdir().unwrap();
        let seg = dir.path().join("segments.ndjson");
        write_traces(&seg, &traces).unwrap();
        prop_assert_eq!(&read_traces(&seg).unwrap(), &traces);
        let corpus = dir.path().join("corpus.ndjson");
        write_corpus(&corpus, &traces).unwrap();
        let ks = default_keywords(KeywordProfile::PaperMain);
        prop_assert_eq!(&load_traces(&corpus, CorpusSchema::NdjsonV1, &ks, &ByteTokenizer).unwrap(), &traces);
    }

    #[test]
    fn dump_round_trip_is_identity(
        igs in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 0..20), 1..6),
        steps in 1usize..400,
        gap in prop::option::of(0.0f64..1.0),
    ) {
        let header = DumpHeader {
            format_version: 1,
            model_id: "m".into(),
            baseline: "pad".into(),
            steps,
            keyword_profile: "paper-main".into(),
            score_target: "answer-logprob-sum".into(),
            attributed_region: "cot-only".into(),
            tokenizer: None,
            extra: Default::default(),
        };
        let records: Vec<DumpRecord> = igs
            .into_iter()
            .enumerate()
            .map(|(i, v)| DumpRecord { trace_id: format!("r{i}"), token_igs: v, completeness_gap: gap, query_tokens: 0, tokens: None, extra: Default::default() })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.ndjson");
        write_dump(&p, &header, &records).unwrap();
        let (h, r) = read_dump(&p).unwrap();
        prop_assert_eq!(h, header);
        prop_assert_eq!(r, records);
    }

    #[test]
    fn linear_hook_preserves_sign_and_zeroes_baseline_tokens(
        w in prop::collection::vec(-2.0f64..2.0, 1..5),
        cot in "[a-e]{1,12}",
        base in 0u8..5,
    ) {
        let hook = LinearScorer::new(w.clone());
        let t = build("lin", &cot, "7");
        let base_id = hook.token_id(&[b'a' + base]).unwrap();
        let cfg = AttributionConfig { steps: 7, baseline: Baseline::Token(base_id), ..Default::default() };
        let ig = integrated_gradients(&hook, &t, &cfg).unwrap();
        let xb = hook.embed(base_id);
        for (n, byte) in cot.bytes().enumerate() {
            let x = hook.embed(hook.token_id(&[byte]).unwrap());
            let expected: f64 = (0..w.len()).map(|i| w[i] * (x[i] - xb[i])).sum();
            if byte == b'a' + base {
                prop_assert_eq!(ig.igs[n], 0.0);
            } else if expected.abs() > 1e-9 {
                prop_assert_eq!(ig.igs[n].signum(), expected.signum());
            }
        }
    }

    #[test]
    fn consistency_is_bounded_and_scale_free(igs in prop::collection::vec(-1e3f64..1e3, 0..40), c in 1e-3f64..1e3) {
        let v = consistency(&igs);
        prop_assert!((0.0..=1.0).contains(&v));
        let scaled: Vec<f64> = igs.iter().map(|x| x * c).collect();
        prop_assert!((consistency(&scaled) - v).abs() <= 1e-12);
    }

    #[test]
    fn important_set_survives_rescaling(cot in cot_strategy(), seed in any::<u64>(), c in prop::sample::select(vec![0.1, 3.0, 100.0, 0.37])) {
        let t = build("r", &cot, "42");
        let mut x = seed;
        let igs: Vec<f64> = (0..t.num_tokens())
            .map(|_| {
                x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((x >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect();
        let scaled: Vec<f64> = igs.iter().map(|v| v * c).collect();
        for mode in [AggregationMode::SqrtNormalizedSum, AggregationMode::DirectSum, AggregationMode::Top20Mean] {
            let a = select_important(&score_trace(&t.segments, &igs, mode).unwrap(), &t.segments, &SelectionPolicy::default()).unwrap();
            let b = select_important(&score_trace(&t.segments, &scaled, mode).unwrap(), &t.segments, &SelectionPolicy::default()).unwrap();
            prop_assert_eq!(a.important, b.important);
        }
    }

    #[test]
    fn mask_edges_fall_on_segment_or_answer_boundaries(cot in cot_strategy(), pick in prop::collection::btree_set(0usize..12, 0..6), answer_on in any::<bool>()) {
        let t = build("m", &cot, "42");
        let important: BTreeSet<usize> = pick.into_iter().filter(|&m| m < t.num_segments()).collect();
        let mask = build_loss_mask(&t, &important, answer_on).unwrap();
        let mut edges: BTreeSet<usize> = t.segments.iter().flat_map(|s| [s.first, s.last + 1]).collect();
        edges.insert(t.num_tokens());
        edges.insert(t.target_len());
        for [s, e] in &mask.ones {
            prop_assert!(edges.contains(s) && edges.contains(e));
        }
        prop_assert_eq!(mask.length, t.target_len());
    }

    #[test]
    fn selective_loss_ignores_range_splits(nll in prop::collection::vec(0.0f64..10.0, 2..40), a in 0usize..40, b in 0usize..40) {
        let n = nll.len();
        let (lo, hi) = (a.min(b) % n, (a.max(b) % n).max(a.min(b) % n) + 1);
        let whole = LossMask { trace_id: "s".into(), length: n, ones: vec![[lo, hi]] };
        let full = LossMask { trace_id: "s".into(), length: n, ones: vec![[0, n]] };
        prop_assert_eq!(masked_mean(&nll, Some(&full)).unwrap().to_bits(), masked_mean(&nll, None).unwrap().to_bits());
        if hi - lo >= 2 {
            let mid = lo + (hi - lo) / 2;
            let split = LossMask { trace_id: "s".into(), length: n, ones: vec![[lo, mid], [mid, hi]] };
            prop_assert_eq!(masked_mean(&nll, Some(&split)).unwrap().to_bits(), masked_mean(&nll, Some(&whole)).unwrap().to_bits());
        }
    }

    #[test]
    fn confidence_steps_have_no_lookahead(correct in prop::collection::vec(0usize..=8, 1..12), cut in 1usize..12, tail in prop::collection::vec(0usize..=8, 0..6)) {
        let cut = cut.min(correct.len());
        let (set_a, steps_a) = confidence_steps(&correct, 8, 0.0);
        let mut changed = correct[..cut].to_vec();
        changed.extend(tail);
        let (set_b, steps_b) = confidence_steps(&changed, 8, 0.0);
        prop_assert_eq!(&steps_a[..cut], &steps_b[..cut]);
        let early = |s: &BTreeSet<usize>| s.iter().copied().filter(|&m| m + 1 < cut).collect::<Vec<_>>();
        prop_assert_eq!(early(&set_a), early(&set_b));
    }

    #[test]
    fn ratio_prefix_lands_within_one_segment(cot in cot_strategy(), values in prop::collection::vec(-5.0f64..5.0, 32), ratio in 0.05f64..1.0) {
        let t = build("p", &cot, "42");
        let sel = ratio_prefix(&t, &values[..t.num_segments()], ratio);
        let kept: usize = sel.iter().map(|&m| t.segments[m].n_tokens()).sum();
        let target = ratio * t.num_tokens() as f64;
        let largest = t.segments.iter().map(|s| s.n_tokens()).max().unwrap() as f64;
        prop_assert!(kept as f64 >= target - 1e-9 || sel.len() == t.num_segments());
        prop_assert!((kept as f64 - target).abs() <= largest);
    }

    #[test]
    fn token_ablations_are_valid_masks(igs in prop::collection::vec(-3.0f64..3.0, 1..50), ratio in 0.01f64..1.0, signed in any::<bool>()) {
        let flags = top_token_flags(&igs, ratio, signed);
        prop_assert_eq!(flags.len(), igs.len());
        prop_assert_eq!(flags.iter().filter(|f| **f).count(), ((ratio * igs.len() as f64).ceil() as usize).min(igs.len()));
        prop_assert!(LossMask::from_flags("a", &flags).validate().is_ok());
    }

    #[test]
    fn cdf_is_monotone_and_complete(traces in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 1..15), 1..10), buckets in 1usize..40) {
        let normalized: Vec<Vec<f64>> = traces
            .iter()
            .map(|v| {
                let s: f64 = v.iter().sum();
                if s > 0.0 { v.iter().map(|x| x / s).collect() } else { vec![1.0 / v.len() as f64; v.len()] }
            })
            .collect();
        let cdf = strength_cdf(&normalized, buckets).unwrap();
        prop_assert_eq!(cdf.len(), buckets);
        prop_assert!(cdf.windows(2).all(|w| w[0].cumulative <= w[1].cumulative));
        prop_assert!((cdf.last().unwrap().cumulative - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn bleu_copy_is_one_and_reference_order_is_irrelevant(a in "[a-d ]{1,30}", b in "[a-d ]{1,30}", c in "[a-d ]{1,30}") {
        prop_assume!(!a.split_whitespace().collect::<Vec<_>>().is_empty());
        prop_assert_eq!(bleu(&a, &[&b, &a, &c]), 1.0);
        prop_assert_eq!(bleu(&a, &[&b, &c]).to_bits(), bleu(&a, &[&c, &b]).to_bits());
    }

    #[test]
    fn decision_segment_is_the_first_match(cot in cot_strategy()) {
        let t = build("d", &cot, "42");
        let needle = normalize_answer("42");
        match decision_segment(&t) {
            Ok(d) => {
                prop_assert!(normalize_answer(t.segment_text(d)).contains(&needle));
                prop_assert!((0..d).all(|m| !normalize_answer(t.segment_text(m)).contains(&needle)));
            }
            Err(_) => prop_assert!((0..t.num_segments()).all(|m| !normalize_answer(t.segment_text(m)).contains(&needle))),
        }
    }

    #[test]
    fn verdict_parse_is_pure_and_takes_last_box(noise in "[a-z {}\\\\]{0,40}", verdicts in prop::collection::vec(any::<bool>(), 0..4)) {
        let text: String = verdicts.iter().map(|v| format!("{noise} \\boxed{{{}}} ", u8::from(*v))).collect::<String>() + &noise;
        let first = parse_verdict(&text);
        prop_assert_eq!(first, parse_verdict(&text));
        if let Some(&last) = verdicts.last() {
            if !noise.contains("boxed") {
                prop_assert_eq!(first, Some(last));
            }
        }
    }
}

#[test]
fn every_baseline_returns_a_valid_selection() {
    let lm = small_model();
    let t = build("b", "We add 12 and 30.\n\nWait, 12 + 30 = 42.\n\nHowever, check.\n\nBut wait, so 42.", "42");
    let cot_igs: Vec<f64> = (0..t.num_tokens()).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0).collect();
    let scores = score_trace(&t.segments, &cot_igs, AggregationMode::default()).unwrap();
    let inputs = BaselineInputs { lm: Some(&lm), scores: Some(&scores), cot_igs: Some(&cot_igs), tau: 0.7 };
    let policy = BaselinePolicy { k_samples: 3, seed: 5, ..Default::default() };
    for m in BaselineMethod::ALL {
        match run_baseline(m, &t, &inputs, &policy).unwrap() {
            BaselineSelection::Segments(set) => {
                assert!(!m.is_token_level());
                assert!(set.iter().all(|&i| i < t.num_segments()), "{}", m.id());
            }
            BaselineSelection::Tokens(flags) => {
                assert!(m.is_token_level());
                assert_eq!(flags.len(), t.num_tokens());
            }
        }
        let again = run_baseline(m, &t, &inputs, &policy).unwrap();
        assert_eq!(again, run_baseline(m, &t, &inputs, &policy).unwrap(), "{} is not deterministic", m.id());
    }
}

#[test]
fn bleu_vs_preceding_scores_verbatim_repeat_as_one() {
    let t = build("r", "We add 12 and 30.\n\nWait, 12 + 30 = 42.\n\nWait, 12 + 30 = 42.", "42");
    assert_eq!(bleu_vs_preceding(&t, 2), 1.0);
    assert_eq!(bleu_vs_preceding(&t, 0), 0.0);
}
