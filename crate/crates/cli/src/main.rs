//! `captrans`: command-line front end for language-model pre-training,
//! transfer into caption generators, evaluation, tuning and the experiment
//! grid.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use captrans::capgen::{generate_captions, read_generations, write_generations, CaptionGenerator, TransferMode};
use captrans::lm::{perplexity_geometric, LanguageModel};
use captrans::metrics::{cider_score, wmd_similarity_report, write_report_csv, ReferenceSet, ReportRow, WordEmbeddings};
use captrans::runner::partial::PARTIAL_RESULTS_FILE;
use captrans::runner::{
    build_caption_generator, emit_plot_data, lm_fair_perplexity, run_grid, run_partial_training, run_tune_job,
    train_caption_generator, train_language_model, CapgenHyperparams, CaptionTask, ExperimentConfig, HyperparamSet,
    LmHyperparams, LmSchedule, PlotFigure, RowType, SyntheticConfig, SyntheticTask, TuneJob,
};
use captrans::text::corpus::MAX_SENTENCE_TOKENS;
use captrans::text::{filter_by_length, CaptionDataset, Corpus, CorpusSource, ImageFeatures, Sentence, Split, Vocabulary};
use captrans::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_TRIALS: u8 = 4;

#[derive(Parser, Debug)]
#[command(name = "captrans", version, about = "Language-model transfer into merge-architecture caption generators")]
struct Cli {
    /// Base seed; overrides the seed in a config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON config: hyperparameters, a tuning job, an experiment or a synthetic task, depending on the command.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Continue from the ledger or history already in the output directory.
    #[arg(long, global = true)]
    resume: bool,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Only log errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Normalise raw text (one sentence per line) into a token JSONL corpus.
    Preprocess {
        #[arg(long)]
        input: PathBuf,
        /// Drop sentences longer than this many tokens.
        #[arg(long, default_value_t = MAX_SENTENCE_TOKENS)]
        max_tokens: usize,
    },
    /// Build a vocabulary from a corpus.
    BuildVocab {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 5)]
        min_count: usize,
    },
    /// Train a language model with early stopping.
    TrainLm {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: PathBuf,
        #[arg(long, default_value_t = 5)]
        min_count: usize,
        /// Train exactly this many epochs instead of early stopping.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Build a caption generator whose prefix encoder is copied from a language model.
    Transfer {
        #[arg(long)]
        lm: PathBuf,
        #[arg(long, value_enum)]
        mode: CliTransferMode,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Train a caption generator (fresh, transferred from --lm, or continuing --init).
    TrainCapgen {
        #[command(flatten)]
        data: DataArgs,
        /// Language-model checkpoint to transfer from.
        #[arg(long, conflicts_with = "init")]
        lm: Option<PathBuf>,
        #[arg(long, value_enum, requires = "lm")]
        mode: Option<CliTransferMode>,
        /// Caption-generator checkpoint to start from (e.g. the output of `transfer`).
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Decode captions for a split with beam search.
    Generate {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum, default_value_t = CliSplit::Test)]
        split: CliSplit,
        #[arg(long)]
        beam_width: Option<usize>,
    },
    /// Score generated captions with CIDEr and WMD similarity.
    Evaluate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        generations: PathBuf,
        #[arg(long, value_enum, default_value_t = CliSplit::Test)]
        split: CliSplit,
        /// Word embeddings file for WMD.
        #[arg(long, conflicts_with = "embeddings_from")]
        embeddings: Option<PathBuf>,
        /// Take WMD embeddings from a language-model checkpoint.
        #[arg(long)]
        embeddings_from: Option<PathBuf>,
    },
    /// Perplexity of a language model on a corpus, or of a caption generator on a split.
    Perplexity {
        #[arg(long)]
        model: PathBuf,
        /// Corpus for a language model.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = CliSplit::Test)]
        split: CliSplit,
    },
    /// Tune hyperparameters (config: a tuning job).
    Tune,
    /// Run the transfer grid (config: an experiment).
    Grid,
    /// Run partial pre-training (config: an experiment with a `partial` section).
    Partial {
        /// Language-model row to use instead of the one named in the config.
        #[arg(long = "type", value_enum)]
        row_type: Option<CliRowType>,
    },
    /// Write plot-ready TSV data from a results CSV.
    PlotData {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        figure: String,
    },
    /// Generate the synthetic captioning task (config: optional synthetic settings).
    Synth,
}

#[derive(Args, Debug)]
struct DataArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long, default_value_t = 5)]
    min_count: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum CliTransferMode {
    Frozen,
    FineTuned,
}

impl From<CliTransferMode> for TransferMode {
    fn from(m: CliTransferMode) -> Self {
        match m {
            CliTransferMode::Frozen => TransferMode::Frozen,
            CliTransferMode::FineTuned => TransferMode::FineTuned,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum CliRowType {
    SameCaptions,
    DifferentCaptions,
    GeneralText,
}

impl From<CliRowType> for RowType {
    fn from(t: CliRowType) -> Self {
        match t {
            CliRowType::SameCaptions => RowType::SameCaptions,
            CliRowType::DifferentCaptions => RowType::DifferentCaptions,
            CliRowType::GeneralText => RowType::GeneralText,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum CliSplit {
    Train,
    Val,
    Test,
}

impl From<CliSplit> for Split {
    fn from(s: CliSplit) -> Self {
        match s {
            CliSplit::Train => Split::Train,
            CliSplit::Val => Split::Val,
            CliSplit::Test => Split::Test,
        }
    }
}

/// Result of a command: whether any trial failed.
enum Outcome {
    Ok,
    TrialFailures(usize),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet {
        log::LevelFilter::Error
    } else {
        match cli.verbose {
            0 => log::LevelFilter::Warn,
            1 => log::LevelFilter::Info,
            _ => log::LevelFilter::Debug,
        }
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();
    match run(&cli) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::TrialFailures(n)) => {
            eprintln!("warning: {n} trial(s) failed; see the results file");
            ExitCode::from(EXIT_TRIALS)
        }
        Err(e) => {
            eprintln!("error: {}", render(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}

/// The error chain joined by ": ", skipping causes a parent message already includes.
fn render(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !out.ends_with(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        Some(Error::Config(_) | Error::Argument(_)) => EXIT_CONFIG,
        Some(_) => EXIT_DATA,
        None if e.downcast_ref::<UsageError>().is_some() => EXIT_CONFIG,
        None => EXIT_DATA,
    }
}

#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

impl Cli {
    fn out(&self) -> Result<&Path> {
        let out = self.out.as_deref().ok_or_else(|| usage("--out is required for this command"))?;
        std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        Ok(out)
    }

    fn config(&self) -> Result<&Path> {
        self.config.as_deref().ok_or_else(|| usage("--config is required for this command"))
    }

    fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    /// Hyperparameters from --config, or the desk defaults.
    fn hyperparams<T: HyperparamSet>(&self, desk: fn() -> T) -> Result<T> {
        let hp = match &self.config {
            Some(p) => T::load_file(p)?,
            None => desk(),
        };
        hp.check()?;
        Ok(hp)
    }
}

struct LoadedData {
    dataset: CaptionDataset,
    features: ImageFeatures,
    min_count: usize,
}

impl LoadedData {
    fn load(d: &DataArgs) -> Result<Self> {
        let dataset = CaptionDataset::load_jsonl(&d.dataset)?;
        let features = ImageFeatures::load(&d.features)?;
        features.check_covers(&dataset)?;
        Ok(LoadedData {
            dataset,
            features,
            min_count: d.min_count,
        })
    }

    fn task(&self) -> CaptionTask<'_> {
        CaptionTask {
            dataset: &self.dataset,
            features: &self.features,
            min_count: self.min_count,
        }
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn checkpoint_kind(dir: &Path) -> Result<String> {
    let path = dir.join("config.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
    let v: serde_json::Value = serde_json::from_str(&text).map_err(Error::from)?;
    v.get("kind")
        .and_then(|k| k.as_str())
        .map(String::from)
        .ok_or_else(|| Error::Format { path, reason: "no checkpoint kind".into() }.into())
}

fn run(cli: &Cli) -> Result<Outcome> {
    match &cli.command {
        Command::Preprocess { input, max_tokens } => {
            let corpus = Corpus::read_text(input, CorpusSource::Other)?;
            let before = corpus.len();
            let kept = filter_by_length(&corpus, *max_tokens);
            let stem = input.file_stem().map_or_else(|| "corpus".into(), |s| s.to_string_lossy().into_owned());
            let path = cli.out()?.join(format!("{stem}.jsonl"));
            kept.write_jsonl(&path)?;
            println!("{} sentences kept of {before} -> {}", kept.len(), path.display());
        }
        Command::BuildVocab { corpus, min_count } => {
            let c = Corpus::read(corpus, CorpusSource::Other)?;
            let vocab = Vocabulary::build(&c.sentences, *min_count);
            let path = cli.out()?.join("vocab.json");
            vocab.save(&path)?;
            println!("{} tokens (min count {min_count}) -> {}", vocab.len(), path.display());
        }
        Command::TrainLm {
            train,
            val,
            min_count,
            epochs,
        } => {
            let hp = cli.hyperparams(LmHyperparams::desk)?;
            let out = cli.out()?;
            let tr = Corpus::read(train, CorpusSource::Other)?.sentences;
            let va = Corpus::read(val, CorpusSource::Other)?.sentences;
            let schedule = epochs.map_or(LmSchedule::EarlyStopping, |epochs| LmSchedule::Exactly {
                epochs,
                require_improvement: false,
            });
            let (lm, history) = train_language_model(&tr, &va, &hp, *min_count, schedule, cli.seed())?;
            lm.save(out)?;
            write_json(&out.join("history.json"), &history)?;
            println!(
                "selected epoch {} val perplexity {}",
                history.selected_epoch,
                history.selected_val_perplexity().map_or("n/a".into(), |p| format!("{p:.4}"))
            );
        }
        Command::Transfer { lm, mode, data } => {
            let hp = cli.hyperparams(CapgenHyperparams::desk)?;
            let out = cli.out()?;
            let d = LoadedData::load(data)?;
            let lm = LanguageModel::load(lm)?;
            let cg = build_caption_generator(&d.task(), &hp, Some(&lm), (*mode).into(), cli.seed())?;
            cg.save(out)?;
            println!("transferred ({}) caption generator -> {}", TransferMode::from(*mode).as_str(), out.display());
        }
        Command::TrainCapgen { data, lm, mode, init } => {
            let hp = cli.hyperparams(CapgenHyperparams::desk)?;
            let out = cli.out()?;
            let d = LoadedData::load(data)?;
            let mut cg = match (init, lm) {
                (Some(p), _) => CaptionGenerator::load(p)?,
                (None, Some(p)) => {
                    let lm = LanguageModel::load(p)?;
                    let mode = mode.map_or(TransferMode::FineTuned, TransferMode::from);
                    build_caption_generator(&d.task(), &hp, Some(&lm), mode, cli.seed())?
                }
                (None, None) => build_caption_generator(&d.task(), &hp, None, TransferMode::None, cli.seed())?,
            };
            let history = train_caption_generator(&mut cg, &d.task(), &hp, cli.seed())?;
            cg.save(out)?;
            write_json(&out.join("history.json"), &history)?;
            println!(
                "selected epoch {} val perplexity {}",
                history.selected_epoch,
                history.selected_val_perplexity().map_or("n/a".into(), |p| format!("{p:.4}"))
            );
        }
        Command::Generate {
            model,
            data,
            split,
            beam_width,
        } => {
            let out = cli.out()?;
            let d = LoadedData::load(data)?;
            let cg = CaptionGenerator::load(model)?;
            let mut gen = captrans::capgen::GenerationConfig::default();
            if let Some(b) = beam_width {
                gen.beam_width = *b;
            }
            let items = d.dataset.split((*split).into());
            let gens = generate_captions(&cg, &items, &d.features, &gen)?;
            let path = out.join("generations.jsonl");
            write_generations(&path, &gens)?;
            println!("{} captions -> {}", gens.len(), path.display());
        }
        Command::Evaluate {
            dataset,
            generations,
            split,
            embeddings,
            embeddings_from,
        } => {
            let out = cli.out()?;
            let ds = CaptionDataset::load_jsonl(dataset)?;
            let emb = match (embeddings, embeddings_from) {
                (Some(p), _) => WordEmbeddings::load(p)?,
                (None, Some(p)) => {
                    let lm = LanguageModel::load(p)?;
                    WordEmbeddings::from_table(lm.vocab(), lm.params().value(lm.encoder().embedding()))?
                }
                (None, None) => bail!(usage("evaluate needs --embeddings or --embeddings-from")),
            };
            let split: Split = (*split).into();
            let items = ds.split(split);
            let refs = ReferenceSet::from_items(&items)?;
            let cands: BTreeMap<String, Sentence> = read_generations(generations)?
                .into_iter()
                .map(|g| (g.image_id, Sentence::from_text(&g.caption)))
                .collect();
            let split_name = match split {
                Split::Train => "train",
                Split::Val => "val",
                Split::Test => "test",
            };
            let rows = vec![
                ReportRow::new("cider", split_name, cider_score(&cands, &refs)?),
                ReportRow::new("wmd", split_name, wmd_similarity_report(&cands, &refs, &emb)?),
            ];
            let path = out.join("report.csv");
            write_report_csv(&path, &rows)?;
            for r in &rows {
                println!("{} {} {:.6} ({} images, {} skipped)", r.metric, r.split, r.value, r.n_images, r.n_skipped);
            }
        }
        Command::Perplexity {
            model,
            corpus,
            dataset,
            features,
            split,
        } => match checkpoint_kind(model)?.as_str() {
            "language-model" => {
                let corpus = corpus.as_ref().ok_or_else(|| usage("a language model needs --corpus"))?;
                let lm = LanguageModel::load(model)?;
                let s = Corpus::read(corpus, CorpusSource::Other)?.sentences;
                let enc: Vec<Vec<usize>> = s.iter().map(|x| lm.vocab().encode(x)).collect();
                println!("perplexity {:.6}", perplexity_geometric(&lm, &enc)?);
                println!("fair_perplexity {:.6}", lm_fair_perplexity(&lm, &s)?);
            }
            "caption-generator" => {
                let (Some(dataset), Some(features)) = (dataset, features) else {
                    bail!(usage("a caption generator needs --dataset and --features"));
                };
                let cg = CaptionGenerator::load(model)?;
                let d = LoadedData::load(&DataArgs {
                    dataset: dataset.clone(),
                    features: features.clone(),
                    min_count: 5,
                })?;
                let items = d.dataset.split((*split).into());
                let ex = captrans::capgen::build_examples(&items, &d.features, cg.vocab())?;
                let p = captrans::capgen::caption_perplexity(&cg, &ex, captrans::lm::PerplexityMode::Token)?;
                println!("perplexity {p:.6}");
            }
            other => bail!(Error::Data(format!("unknown checkpoint kind {other}"))),
        },
        Command::Tune => {
            let mut job = TuneJob::load(cli.config()?)?;
            if let Some(s) = cli.seed {
                job.tuner.seed = s;
            }
            let o = run_tune_job(&job, cli.out()?, cli.resume)?;
            println!(
                "best trial {} fitness {:.6} ({} of {} failed)",
                o.best.trial,
                o.best.fitness.unwrap_or(f64::NAN),
                o.n_failed(),
                o.history.len()
            );
            if o.n_failed() > 0 {
                return Ok(Outcome::TrialFailures(o.n_failed()));
            }
        }
        Command::Grid => {
            let mut cfg = ExperimentConfig::load(cli.config()?)?;
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            let g = run_grid(&cfg, cli.out()?, cli.resume)?;
            println!("{} rows ({} run now, {} failed)", g.rows.len(), g.executed, g.n_failed());
            if g.n_failed() > 0 {
                return Ok(Outcome::TrialFailures(g.n_failed()));
            }
        }
        Command::Partial { row_type } => {
            let mut cfg = ExperimentConfig::load(cli.config()?)?;
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            if let (Some(t), Some(pc)) = (row_type, cfg.partial.as_mut()) {
                pc.row_type = (*t).into();
            }
            let p = run_partial_training(&cfg, cli.out()?, cli.resume)?;
            println!(
                "{} rows ({} run now, {} failed) -> {}",
                p.rows.len(),
                p.executed,
                p.n_failed(),
                PARTIAL_RESULTS_FILE
            );
            if p.n_failed() > 0 {
                return Ok(Outcome::TrialFailures(p.n_failed()));
            }
        }
        Command::PlotData { results, figure } => {
            let figure: PlotFigure = figure.parse()?;
            let path = cli.out()?.join(figure.file_name());
            let n = emit_plot_data(results, figure, &path)?;
            println!("{n} rows -> {}", path.display());
        }
        Command::Synth => {
            let mut cfg = match &cli.config {
                Some(p) => {
                    let text = std::fs::read_to_string(p).map_err(|e| Error::Io { path: p.clone(), source: e })?;
                    serde_json::from_str::<SyntheticConfig>(&text)
                        .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
                }
                None => SyntheticConfig::default(),
            };
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            let out = cli.out()?;
            SyntheticTask::generate(&cfg)?.write(out)?;
            println!("synthetic task -> {}", out.display());
        }
    }
    Ok(Outcome::Ok)
}
