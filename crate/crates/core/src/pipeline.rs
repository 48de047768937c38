//! Staged runs over a corpus. Every stage reads the artifacts of earlier
//! stages from the output directory, writes its own, and records content
//! hashes in `manifest.json`. Reruns with the same config and inputs produce
//! byte-identical files.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analytics::{
    interior_triples, judge_many, positional_stats, segment_stats, strength_cdf, write_cdf_csv, HttpTransport,
    JudgeConfig, JudgeTransport, SegmentStats,
};
use crate::attribution::{attribute_corpus, dump_header, AttributionConfig, TokenAttribution};
use crate::baselines::{run_baseline, BaselineInputs, BaselineMethod, BaselinePolicy, BaselineSelection};
use crate::grad_oracle::{dump_warnings, join_dump, read_dump, write_dump, ModelDims, ReferenceModel};
use crate::masking::{build_loss_mask, read_mask, write_mask, LossMask};
use crate::scoring::{read_scores_csv, score_trace, write_scores_csv, AggregationMode, SegmentScore};
use crate::segmenter::{default_keywords, KeywordProfile, KeywordSet};
use crate::selection::{
    boundary_indices, read_selections, select_important, write_selections, SelectionPolicy, SelectionRecord,
    SelectionResult,
};
use crate::synth::{build_traces, generate, train_reference, SynthConfig, TrainConfig};
use crate::trace::{load_traces, read_traces, write_corpus, write_traces, ByteTokenizer, CorpusSchema, ReasoningTrace};
use crate::{ndjson, Error, Result};

pub const TOOL_VERSION: &str = concat!("cotseg ", env!("CARGO_PKG_VERSION"));

/// Method name written by the `select` stage.
pub const IG_METHOD: &str = "integrated-gradients";

pub const SEGMENTS_FILE: &str = "segments.ndjson";
pub const DUMP_FILE: &str = "dump.ndjson";
pub const SCORES_FILE: &str = "scores.csv";
pub const SELECTIONS_FILE: &str = "selections.ndjson";
pub const MASKS_FILE: &str = "masks.ndjson";
pub const BASELINES_FILE: &str = "baselines.ndjson";
pub const ANALYTICS_FILE: &str = "segment_analytics.csv";
pub const CDF_FILE: &str = "strength_cdf.csv";
pub const POSITIONAL_FILE: &str = "positional.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    Segment,
    Attribute,
    Score,
    Select,
    Mask,
    Baseline,
    Analyze,
    Report,
}

impl Stage {
    pub const ALL: [Self; 8] = [
        Self::Segment,
        Self::Attribute,
        Self::Score,
        Self::Select,
        Self::Mask,
        Self::Baseline,
        Self::Analyze,
        Self::Report,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Self::Segment => "segment",
            Self::Attribute => "attribute",
            Self::Score => "score",
            Self::Select => "select",
            Self::Mask => "mask",
            Self::Baseline => "baseline",
            Self::Analyze => "analyze",
            Self::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|st| st.id() == s).ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }
}

/// Everything a run needs. Unset fields take their defaults when loaded from
/// JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: Option<PathBuf>,
    pub schema: CorpusSchema,
    pub keyword_profile: KeywordProfile,
    /// One keyword per line; replaces the built-in profile when set.
    pub keywords_file: Option<PathBuf>,
    /// Saved reference model; when unset a fresh model is initialized from
    /// `seed` and `model_dims`.
    pub model: Option<PathBuf>,
    pub model_dims: ModelDims,
    pub attribution: AttributionConfig,
    pub aggregation: AggregationMode,
    pub selection: SelectionPolicy,
    pub answer_always_on: bool,
    pub baselines: Vec<BaselineMethod>,
    /// Its `seed` is replaced by the run seed.
    pub baseline_policy: BaselinePolicy,
    pub cdf_buckets: usize,
    /// Truncation judge for the `analyze` stage; off when unset.
    pub judge: Option<JudgeConfig>,
    pub output_dir: PathBuf,
    pub seed: u64,
    /// Worker threads per stage; 0 uses every core.
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            corpus: None,
            schema: CorpusSchema::default(),
            keyword_profile: KeywordProfile::PaperMain,
            keywords_file: None,
            model: None,
            model_dims: ModelDims::default(),
            attribution: AttributionConfig::default(),
            aggregation: AggregationMode::default(),
            selection: SelectionPolicy::default(),
            answer_always_on: true,
            baselines: BaselineMethod::ALL.to_vec(),
            baseline_policy: BaselinePolicy::default(),
            cdf_buckets: 20,
            judge: None,
            output_dir: PathBuf::from("cotseg-out"),
            seed: 0,
            workers: 0,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// The config as recorded in the manifest: nested seeds follow `seed`.
    pub fn effective(&self) -> Self {
        let mut cfg = self.clone();
        cfg.baseline_policy.seed = cfg.seed;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.attribution.validate()?;
        self.selection.validate()?;
        self.baseline_policy.validate()?;
        if self.cdf_buckets == 0 {
            return Err(Error::Config("cdf_buckets must be at least 1".into()));
        }
        if let Some(j) = &self.judge {
            j.round1.validate()?;
            j.round2.validate()?;
        }
        Ok(())
    }

    /// Hex SHA-256 of the effective config's JSON.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(&self.effective()).expect("config serializes"))
    }

    pub fn keywords(&self) -> Result<KeywordSet> {
        match &self.keywords_file {
            Some(p) => KeywordSet::from_file(p),
            None => Ok(default_keywords(self.keyword_profile)),
        }
    }

    pub fn load_model(&self) -> Result<ReferenceModel> {
        match &self.model {
            Some(p) => ReferenceModel::load(p),
            None => ReferenceModel::init(self.seed, self.model_dims),
        }
    }

    fn artifact(&self, name: &str) -> PathBuf {
        self.output_dir.join(name)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub config_hash: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    /// Effective configs by hash; only hashes referenced by a stage are kept.
    pub configs: BTreeMap<String, RunConfig>,
    pub stages: BTreeMap<String, StageRecord>,
}

impl Default for Manifest {
    fn default() -> Self {
        Self { tool_version: TOOL_VERSION.into(), configs: BTreeMap::new(), stages: BTreeMap::new() }
    }
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Ok(Self::default());
        }
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    fn record(&mut self, stage: Stage, cfg: &RunConfig, entry: StageRecord) {
        self.tool_version = TOOL_VERSION.into();
        self.configs.insert(entry.config_hash.clone(), cfg.effective());
        self.stages.insert(stage.id().into(), entry);
        let live: BTreeSet<&String> = self.stages.values().map(|s| &s.config_hash).collect();
        self.configs.retain(|h, _| live.contains(h));
    }
}

/// What a stage produced.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StageReport {
    pub outputs: Vec<PathBuf>,
    pub warnings: Vec<String>,
}

/// Inputs and outputs a stage touched, hashed into the manifest afterwards.
#[derive(Default)]
struct Touched {
    inputs: Vec<(String, PathBuf)>,
    outputs: Vec<PathBuf>,
    warnings: Vec<String>,
}

impl Touched {
    fn input(&mut self, key: &str, path: &Path) {
        self.inputs.push((key.to_string(), path.to_path_buf()));
    }

    /// An artifact of `producer`; missing means `producer` has not run.
    fn upstream(&mut self, cfg: &RunConfig, name: &str, producer: Stage) -> Result<PathBuf> {
        let path = cfg.artifact(name);
        if !path.is_file() {
            return Err(Error::PipelineOrder { stage: producer.id().into(), missing: path });
        }
        self.input(name, &path);
        Ok(path)
    }

    fn output(&mut self, cfg: &RunConfig, name: &str) -> PathBuf {
        let path = cfg.artifact(name);
        self.outputs.push(path.clone());
        path
    }
}

/// Runs one stage inside a pool of `cfg.workers` threads.
pub fn run(stage: Stage, cfg: &RunConfig) -> Result<StageReport> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.output_dir)
        .map_err(|e| Error::Config(format!("output directory {}: {e}", cfg.output_dir.display())))?;
    let pool =
        rayon::ThreadPoolBuilder::new().num_threads(cfg.workers).build().map_err(|e| Error::Config(e.to_string()))?;
    let cfg = cfg.effective();
    let mut touched = Touched::default();
    pool.install(|| match stage {
        Stage::Segment => segment_stage(&cfg, &mut touched),
        Stage::Attribute => attribute_stage(&cfg, &mut touched),
        Stage::Score => score_stage(&cfg, &mut touched),
        Stage::Select => select_stage(&cfg, &mut touched),
        Stage::Mask => mask_stage(&cfg, &mut touched),
        Stage::Baseline => baseline_stage(&cfg, &mut touched),
        Stage::Analyze => analyze_stage(&cfg, &mut touched),
        Stage::Report => report_stage(&cfg, &mut touched),
    })?;

    let file_name = |p: &Path| p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let mut entry = StageRecord { config_hash: cfg.hash(), ..Default::default() };
    for (key, path) in &touched.inputs {
        entry.inputs.insert(key.clone(), file_hash(path)?);
    }
    for path in &touched.outputs {
        entry.outputs.insert(file_name(path), file_hash(path)?);
    }
    let manifest_path = cfg.artifact(MANIFEST_FILE);
    let mut manifest = Manifest::load(&manifest_path)?;
    manifest.record(stage, &cfg, entry);
    manifest.save(&manifest_path)?;
    Ok(StageReport { outputs: touched.outputs, warnings: touched.warnings })
}

/// Runs every stage in order.
pub fn run_all(cfg: &RunConfig) -> Result<Vec<(Stage, StageReport)>> {
    Stage::ALL.into_iter().map(|s| run(s, cfg).map(|r| (s, r))).collect()
}

fn segment_stage(cfg: &RunConfig, t: &mut Touched) -> Result<()> {
    let corpus = cfg.corpus.as_deref().ok_or_else(|| Error::Config("segment needs a corpus path".into()))?;
    t.input("corpus", corpus);
    if let Some(k) = &cfg.keywords_file {
        t.input("keywords", k);
    }
    let traces = load_traces(corpus, cfg.schema, &cfg.keywords()?, &ByteTokenizer)?;
    write_traces(&t.output(cfg, SEGMENTS_FILE), &traces)
}

fn model_input(cfg: &RunConfig, t: &mut Touched) -> Result<ReferenceModel> {
    if let Some(p) = &cfg.model {
        t.input("model", p);
    }
    cfg.load_model()
}

fn attribute_stage(cfg: &RunConfig, t: &mut Touched) -> Result<()> {
    let traces = read_traces(&t.upstream(cfg, SEGMENTS_FILE, Stage::Segment)?)?;
    let model = model_input(cfg, t)?;
    let igs = attribute_corpus(&model, &traces, &cfg.attribution)?;
    let header = dump_header(&model, &cfg.attribution, cfg.keywords()?.id());
    let records: Vec<_> = igs.iter().map(TokenAttribution::to_dump_record).collect();
    write_dump(&t.output(cfg, DUMP_FILE), &header, &records)
}

fn read_attributions(dump: &Path, t: &mut Touched, traces: &[ReasoningTrace]) -> Result<Vec<TokenAttribution>> {
    let (header, records) = read_dump(dump)?;
    t.warnings.extend(dump_warnings(&header, &records));
    join_dump(traces, records)?.into_iter().map(|r| TokenAttribution::from_dump(&header, r)).collect()
}

fn score_stage(cfg: &RunConfig, t: &mut Touched) -> Result<()> {
    let dump = t.upstream(cfg, DUMP_FILE, Stage::Attribute)?;
    let traces = read_traces(&t.upstream(cfg, SEGMENTS_FILE, Stage::Segment)?)?;
    let igs = read_attributions(&dump, t, &traces)?;
    let rows = traces
        .iter()
        .zip(&igs)
        .map(|(tr, a)| Ok((tr.trace_id.clone(), score_trace(&tr.segments, a.cot_igs(), cfg.aggregation)?)))
        .collect::<Result<Vec<_>>>()?;
    write_scores_csv(&t.output(cfg, SCORES_FILE), &rows)
}

/// Scores in trace order; every trace must have a row group of matching size.
fn read_scores(path: &Path, cfg: &RunConfig, traces: &[ReasoningTrace]) -> Result<Vec<Vec<SegmentScore>>> {
    let rows = read_scores_csv(path, cfg.aggregation)?;
    let mut by_id: HashMap<String, Vec<SegmentScore>> = HashMap::with_capacity(rows.len());
    for (id, scores) in rows {
        if by_id.insert(id.clone(), scores).is_some() {
            return Err(Error::Join(format!("scores for trace {id:?} are not contiguous")));
        }
    }
    traces
        .iter()
        .map(|tr| {
            let s = by_id
                .remove(&tr.trace_id)
                .ok_or_else(|| Error::Join(format!("trace {:?} has no scores", tr.trace_id)))?;
            if s.len() != tr.num_segments() || s.iter().enumerate().any(|(i, x)| x.seg_index != i) {
                return Err(Error::Join(format!("trace {:?}: scores do not match its segments", tr.trace_id)));
            }
            Ok(s)
        })
        .collect()
}

fn select_stage(cfg: &RunConfig, t: &mut Touched) -> Result<()> {
    let scores = t.upstream(cfg, SCORES_FILE, Stage::Score)?;
    let traces = read_traces(&t.upstream(cfg, SEGMENTS_FILE, Stage::Segment)?)?;
    let scores = read_scores(&scores, cfg, &traces)?;
    let records = traces
        .iter()
        .zip(&scores)
        .map(|(tr, s)| {
            let r = select_important(s, &tr.segments, &cfg.selection)?;
            Ok(SelectionRecord::from_result(&tr.trace_id, IG_METHOD, &r))
        })
        .collect::<Result<Vec<_>>>()?;
    write_selections(&t.output(cfg, SELECTIONS_FILE), &records)
}

/// Selection records in trace order for one method.
fn selections_by_trace<'a>(
    traces: &[ReasoningTrace],
    records: &'a [SelectionRecord],
    method: &str,
) -> Result<Vec<&'a SelectionRecord>> {
    let by_id: HashMap<&str, &SelectionRecord> =
        records.iter().filter(|r| r.method == method).map(|r| (r.trace_id.as_str(), r)).collect();
    traces
        .iter()
        .map(|tr| {
            by_id
                .get(tr.trace_id.as_str())
                .copied()
                .ok_or_else(|| Error::Join(format!("trace {:?} has no {method} selection", tr.trace_id)))
        })
        .collect()
}

fn mask_stage(cfg: &RunConfig, t: &mut Touched) -> Result<()> {
    let selections = t.upstream(cfg, SELECTIONS_FILE, Stage::Select)?;
    let traces = read_traces(&t.upstream(cfg, SEGMENTS_FILE, Stage::Segment)?)?;
    let records = read_selections(&selections)?;
    let masks = traces
        .iter()
        .zip(selections_by_trace(&traces, &records, IG_METHOD)?)
        .map(|(tr, r)| build_loss_mask(tr, &r.important_set(), cfg.answer_always_on))
        .collect::<Result<Vec<LossMask>>>()?;
    write_mask(&t.output(cfg, MASKS_FILE), &masks)
}

fn baseline_stage(cfg: &RunConfig, t: &mut Touched) -> Result<()> {
    let scores = t.upstream(cfg, SCORES_FILE, Stage::Score)?;
    let dump = t.upstream(cfg, DUMP_FILE, Stage::Attribute)?;
    let traces = read_traces(&t.upstream(cfg, SEGMENTS_FILE, Stage::Segment)?)?;
    let scores = read_scores(&scores, cfg, &traces)?;
    let igs = read_attributions(&dump, t, &traces)?;
    let model = model_input(cfg, t)?;
    let per_trace = traces
        .par_iter()
        .zip(&scores)
        .zip(&igs)
        .map(|((tr, s), a)| {
            let inputs = BaselineInputs {
                lm: Some(&model),
                scores: Some(s),
                cot_igs: Some(a.cot_igs()),
                tau: cfg.selection.tau,
            };
            cfg.baselines
                .iter()
                .map(|&m| {
                    let mut rec = SelectionRecord {
                        trace_id: tr.trace_id.clone(),
                        method: m.id().into(),
                        ranking: Vec::new(),
                        k_star: None,
                        important: Vec::new(),
                        policy: None,
                        token_ones: None,
                    };
                    match run_baseline(m, tr, &inputs, &cfg.baseline_policy)? {
                        BaselineSelection::Segments(mut set) => {
                            if cfg.selection.include_boundaries {
                                set.extend(boundary_indices(&tr.segments));
                            }
                            rec.important = set.into_iter().collect();
                        }
                        BaselineSelection::Tokens(flags) => {
                            rec.token_ones = Some(LossMask::from_flags(&tr.trace_id, &flags).ones);
                        }
                    }
                    Ok(rec)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    write_selections(&t.output(cfg, BASELINES_FILE), &per_trace.concat())
}

pub const ANALYTICS_HEADER: &str =
    "trace_id,seg_index,n_tokens,mean_nll,mean_entropy,bleu_vs_preceding,is_truncated,normalized_strength,consistency";

fn analyze_stage(cfg: &RunConfig, t: &mut Touched) -> Result<()> {
    let scores = t.upstream(cfg, SCORES_FILE, Stage::Score)?;
    let traces = read_traces(&t.upstream(cfg, SEGMENTS_FILE, Stage::Segment)?)?;
    let scores = read_scores(&scores, cfg, &traces)?;
    let model = model_input(cfg, t)?;
    let mut stats = traces.par_iter().map(|tr| segment_stats(&model, tr)).collect::<Result<Vec<_>>>()?;
    if let Some(judge) = &cfg.judge {
        let transport = HttpTransport::new(judge)?;
        judge_corpus(judge, &transport, &traces, &mut stats)?;
    }

    let mut out = std::io::BufWriter::new(std::fs::File::create(t.output(cfg, ANALYTICS_FILE))?);
    writeln!(out, "{ANALYTICS_HEADER}")?;
    for ((tr, st), sc) in traces.iter().zip(&stats).zip(&scores) {
        for (s, score) in st.iter().zip(sc) {
            let truncated = match s.is_truncated {
                Some(v) => u8::from(v).to_string(),
                None => String::new(),
            };
            writeln!(
                out,
                "{},{},{},{:e},{:e},{:e},{},{:e},{:e}",
                tr.trace_id,
                s.seg_index,
                tr.segments[s.seg_index].n_tokens(),
                s.mean_nll,
                s.mean_entropy,
                s.bleu_vs_preceding,
                truncated,
                score.normalized_strength,
                score.consistency
            )?;
        }
    }
    out.flush()?;

    let strengths: Vec<Vec<f64>> = scores.iter().map(|s| s.iter().map(|x| x.normalized_strength).collect()).collect();
    write_cdf_csv(&t.output(cfg, CDF_FILE), &strength_cdf(&strengths, cfg.cdf_buckets)?)
}

/// Fills `is_truncated` for every interior segment. A transport failure
/// aborts; an undecided verdict leaves the flag unset.
pub fn judge_corpus(
    cfg: &JudgeConfig,
    transport: &dyn JudgeTransport,
    traces: &[ReasoningTrace],
    stats: &mut [Vec<SegmentStats>],
) -> Result<()> {
    let mut slots = Vec::new();
    let mut triples = Vec::new();
    for (i, tr) in traces.iter().enumerate() {
        for (m, triple) in interior_triples(tr) {
            slots.push((i, m));
            triples.push(triple);
        }
    }
    for ((i, m), verdict) in slots.into_iter().zip(judge_many(cfg, transport, &triples)?) {
        match verdict {
            Ok(v) => stats[i][m].is_truncated = Some(v),
            Err(Error::JudgeUndecided) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(())
}

fn selection_result(r: &SelectionRecord, fallback: &SelectionPolicy) -> SelectionResult {
    SelectionResult {
        ranking: r.ranking.clone(),
        k_star: r.k_star.unwrap_or(r.ranking.len()),
        important: r.important_set(),
        policy: r.policy.unwrap_or(*fallback),
    }
}

/// Share of cot tokens a record keeps.
fn token_coverage(trace: &ReasoningTrace, r: &SelectionRecord) -> f64 {
    let total = trace.num_tokens();
    if total == 0 {
        return 0.0;
    }
    let kept: usize = match &r.token_ones {
        Some(ones) => ones.iter().map(|[a, b]| b - a).sum(),
        None => r.important.iter().filter_map(|&m| trace.segments.get(m)).map(|s| s.n_tokens()).sum(),
    };
    kept as f64 / total as f64
}

pub const SUMMARY_HEADER: &str = "method,traces,mean_segments,mean_kept_segment_fraction,mean_token_coverage";

fn report_stage(cfg: &RunConfig, t: &mut Touched) -> Result<()> {
    let selections = t.upstream(cfg, SELECTIONS_FILE, Stage::Select)?;
    let scores = t.upstream(cfg, SCORES_FILE, Stage::Score)?;
    let traces = read_traces(&t.upstream(cfg, SEGMENTS_FILE, Stage::Segment)?)?;
    let scores = read_scores(&scores, cfg, &traces)?;
    let records = read_selections(&selections)?;
    let ours = selections_by_trace(&traces, &records, IG_METHOD)?;
    let results: Vec<SelectionResult> = ours.iter().map(|r| selection_result(r, &cfg.selection)).collect();
    let items: Vec<_> = traces.iter().zip(&results).zip(&scores).map(|((tr, r), s)| (tr, r, s.as_slice())).collect();
    let pos = positional_stats(&items);

    let mut out = std::io::BufWriter::new(std::fs::File::create(t.output(cfg, POSITIONAL_FILE))?);
    writeln!(out, "metric,value")?;
    for (k, v) in [
        ("traces", pos.traces),
        ("excluded_traces", pos.excluded_traces),
        ("important", pos.important),
        ("important_after", pos.important_after),
        ("unimportant", pos.unimportant),
        ("unimportant_before", pos.unimportant_before),
        ("low_strength", pos.low_strength),
        ("low_strength_before", pos.low_strength_before),
        ("high_consistency", pos.high_consistency),
        ("high_consistency_after", pos.high_consistency_after),
    ] {
        writeln!(out, "{k},{v}")?;
    }
    for (k, v) in [
        ("important_after_fraction", pos.important_after_fraction()),
        ("unimportant_before_fraction", pos.unimportant_before_fraction()),
        ("low_strength_before_fraction", pos.low_strength_before_fraction()),
        ("high_consistency_after_fraction", pos.high_consistency_after_fraction()),
    ] {
        writeln!(out, "{k},{v:e}")?;
    }
    out.flush()?;

    let mut methods: Vec<(String, Vec<&SelectionRecord>)> = vec![(IG_METHOD.into(), ours)];
    let baseline_path = cfg.artifact(BASELINES_FILE);
    let baseline_records = if baseline_path.is_file() {
        t.input(BASELINES_FILE, &baseline_path);
        read_selections(&baseline_path)?
    } else {
        Vec::new()
    };
    let mut seen: Vec<&str> = Vec::new();
    for r in &baseline_records {
        if !seen.contains(&r.method.as_str()) {
            seen.push(&r.method);
        }
    }
    for m in seen {
        methods.push((m.to_string(), selections_by_trace(&traces, &baseline_records, m)?));
    }

    let mut out = std::io::BufWriter::new(std::fs::File::create(t.output(cfg, SUMMARY_FILE))?);
    writeln!(out, "{SUMMARY_HEADER}")?;
    let n = traces.len().max(1) as f64;
    for (method, recs) in &methods {
        let mut segs = 0.0;
        let mut kept = 0.0;
        let mut cover = 0.0;
        for (tr, r) in traces.iter().zip(recs) {
            segs += tr.num_segments() as f64;
            if r.token_ones.is_none() {
                kept += r.important.len() as f64 / tr.num_segments().max(1) as f64;
            }
            cover += token_coverage(tr, r);
        }
        let kept = if recs.iter().any(|r| r.token_ones.is_some()) { String::new() } else { format!("{:e}", kept / n) };
        writeln!(out, "{method},{},{:e},{kept},{:e}", traces.len(), segs / n, cover / n)?;
    }
    out.flush()?;
    Ok(())
}

/// Reads the masks written by the `mask` stage.
pub fn read_masks(cfg: &RunConfig) -> Result<Vec<LossMask>> {
    let path = cfg.artifact(MASKS_FILE);
    if !path.is_file() {
        return Err(Error::PipelineOrder { stage: Stage::Mask.id().into(), missing: path });
    }
    read_mask(&path)
}

/// Per-trace segment kinds written next to a synthetic corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KindsRecord {
    pub trace_id: String,
    pub kinds: Vec<crate::synth::SegmentKind>,
}

/// Writes a synthetic corpus and, optionally, its segment kinds.
pub fn write_synth_corpus(cfg: &SynthConfig, keywords: &KeywordSet, corpus: &Path, kinds: Option<&Path>) -> Result<()> {
    let synth = generate(cfg);
    let traces = build_traces(&synth, keywords)?;
    write_corpus(corpus, &traces)?;
    if let Some(path) = kinds {
        let records: Vec<KindsRecord> =
            synth.iter().map(|s| KindsRecord { trace_id: s.record.trace_id.clone(), kinds: s.kinds.clone() }).collect();
        ndjson::write(path, &records)?;
    }
    Ok(())
}

/// Trains a reference model on a corpus and saves it; returns the loss of
/// every step.
pub fn train_model(
    corpus: &Path,
    schema: CorpusSchema,
    keywords: &KeywordSet,
    cfg: &TrainConfig,
    out: &Path,
) -> Result<Vec<f64>> {
    let traces = load_traces(corpus, schema, keywords, &ByteTokenizer)?;
    if traces.is_empty() {
        return Err(Error::Domain(format!("{}: no traces to train on", corpus.display())));
    }
    let (model, losses) = train_reference(&traces, cfg)?;
    model.save(out)?;
    Ok(losses)
}
