use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cotseg_core::baselines::BaselineMethod;
use cotseg_core::pipeline::{self, RunConfig, Stage, StageReport};
use cotseg_core::scoring::AggregationMode;
use cotseg_core::segmenter::{default_keywords, KeywordProfile, KeywordSet};
use cotseg_core::synth::{SynthConfig, TrainConfig};
use cotseg_core::trace::CorpusSchema;
use cotseg_core::{Error, Result};

/// Segment-level attribution over reasoning traces.
#[derive(Parser, Debug)]
#[command(name = "cotseg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Split corpus traces into segments
    Segment(StageArgs),
    /// Integrated gradients for every cot token
    Attribute(StageArgs),
    /// Segment strength and consistency
    Score(StageArgs),
    /// Important segments by strength threshold and consistency filter
    Select(StageArgs),
    /// Per-token loss masks from the selection
    Mask(StageArgs),
    /// Competing importance measures
    Baseline(StageArgs),
    /// Per-segment statistics and the strength CDF
    Analyze(StageArgs),
    /// Positional statistics and method summary
    Report(StageArgs),
    /// Every stage in order
    All(StageArgs),
    /// Write a toy arithmetic corpus with injected redundancy
    Synth(SynthArgs),
    /// Train the reference model on a corpus
    Train(TrainArgs),
}

#[derive(Args, Debug, Default)]
struct StageArgs {
    /// JSON run config; flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Output directory for artifacts and the manifest
    #[arg(long)]
    out: Option<PathBuf>,
    /// Saved reference model
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, conflicts_with = "keywords_file")]
    keywords: Option<KeywordProfile>,
    #[arg(long)]
    keywords_file: Option<PathBuf>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    /// Integration steps
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    aggregation: Option<AggregationMode>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    include_boundaries: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    answer_always_on: Option<bool>,
    /// Token share for the ratio-matched baselines
    #[arg(long)]
    ratio: Option<f64>,
    /// Samples per prefix for the confidence-gain baseline
    #[arg(long)]
    k_samples: Option<usize>,
    /// Comma-separated baseline methods
    #[arg(long, value_delimiter = ',')]
    baselines: Option<Vec<BaselineMethod>>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 0 uses every core
    #[arg(long)]
    workers: Option<usize>,
}

impl StageArgs {
    /// Defaults, then the config file, then flags.
    fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        if let Some(v) = &self.corpus {
            cfg.corpus = Some(v.clone());
        }
        if let Some(v) = &self.out {
            cfg.output_dir = v.clone();
        }
        if let Some(v) = &self.model {
            cfg.model = Some(v.clone());
        }
        if let Some(v) = self.keywords {
            cfg.keyword_profile = v;
            cfg.keywords_file = None;
        }
        if let Some(v) = &self.keywords_file {
            cfg.keywords_file = Some(v.clone());
        }
        if let Some(v) = self.tau {
            cfg.selection.tau = v;
        }
        if let Some(v) = self.beta {
            cfg.selection.beta = v;
        }
        if let Some(v) = self.steps {
            cfg.attribution.steps = v;
        }
        if let Some(v) = self.aggregation {
            cfg.aggregation = v;
        }
        if let Some(v) = self.include_boundaries {
            cfg.selection.include_boundaries = v;
        }
        if let Some(v) = self.answer_always_on {
            cfg.answer_always_on = v;
        }
        if let Some(v) = self.ratio {
            cfg.baseline_policy.token_ratio_target = v;
        }
        if let Some(v) = self.k_samples {
            cfg.baseline_policy.k_samples = v;
        }
        if let Some(v) = &self.baselines {
            cfg.baselines = v.clone();
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.workers {
            cfg.workers = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Corpus NDJSON to write
    #[arg(long)]
    out: PathBuf,
    /// Also write the generated kind of every segment
    #[arg(long)]
    kinds: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    n: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// No injected repeats, truncations or fillers
    #[arg(long)]
    clean: bool,
    #[arg(long, default_value_t = 4)]
    max_addends: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Where to save the trained model
    #[arg(long)]
    model_out: PathBuf,
    /// JSON training config; flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    keywords: Option<KeywordProfile>,
}

fn print_report(stage: Stage, report: &StageReport) {
    for w in &report.warnings {
        eprintln!("warning: {stage}: {w}");
    }
    for p in &report.outputs {
        println!("{stage}: wrote {}", p.display());
    }
}

fn run_stage(stage: Stage, args: &StageArgs) -> Result<()> {
    let report = pipeline::run(stage, &args.run_config()?)?;
    print_report(stage, &report);
    Ok(())
}

fn synth(args: &SynthArgs) -> Result<()> {
    let base = SynthConfig { n_traces: args.n, seed: args.seed, max_addends: args.max_addends, ..Default::default() };
    let cfg = if args.clean { SynthConfig::clean(args.n, args.seed, args.max_addends) } else { base };
    pipeline::write_synth_corpus(&cfg, &default_keywords(KeywordProfile::PaperMain), &args.out, args.kinds.as_deref())?;
    println!("synth: wrote {}", args.out.display());
    Ok(())
}

fn train(args: &TrainArgs) -> Result<()> {
    let mut cfg: TrainConfig = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => TrainConfig::default(),
    };
    if let Some(v) = args.steps {
        cfg.steps = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    let keywords: KeywordSet = default_keywords(args.keywords.unwrap_or(KeywordProfile::PaperMain));
    let losses = pipeline::train_model(&args.corpus, CorpusSchema::default(), &keywords, &cfg, &args.model_out)?;
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        println!("train: loss {first:.4} -> {last:.4} over {} steps", losses.len());
    }
    println!("train: wrote {}", args.model_out.display());
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Segment(a) => run_stage(Stage::Segment, a),
        Command::Attribute(a) => run_stage(Stage::Attribute, a),
        Command::Score(a) => run_stage(Stage::Score, a),
        Command::Select(a) => run_stage(Stage::Select, a),
        Command::Mask(a) => run_stage(Stage::Mask, a),
        Command::Baseline(a) => run_stage(Stage::Baseline, a),
        Command::Analyze(a) => run_stage(Stage::Analyze, a),
        Command::Report(a) => run_stage(Stage::Report, a),
        Command::All(a) => {
            for (stage, report) in pipeline::run_all(&a.run_config()?)? {
                print_report(stage, &report);
            }
            Ok(())
        }
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
