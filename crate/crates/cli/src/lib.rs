//! Command-line front end for the `trimod` tagger.

use std::ffi::OsString;
use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use trimod::bundle;
use trimod::checks::{check_module, CheckModule};
use trimod::data::{
    corpus_stats, load_visual_features, load_wordlist, parse_corpus, stats_table, Post, VisualFeatureStore,
};
use trimod::embeddings::{load_word_vectors, WordVectors};
use trimod::gradcheck::DEFAULT_EPS;
use trimod::model::TriMod;
use trimod::segmenter::{
    make_synthetic_pairs, segment, train_segmenter, Segmenter, SegmenterDims, SegmenterTrainConfig,
};
use trimod::training::{evaluate, run_ablation, train_from, RunConfig};
use trimod::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_NUMERIC: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Gradient checks pass below this relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "trimod", version, about = "Multimodal named entity tagger for social media posts")]
pub struct Cli {
    /// Log more (repeat for debug output).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a tagger and save the best model on the dev set.
    Train(TrainArgs),
    /// Score a model against a tagged corpus.
    Eval(EvalArgs),
    /// Tag a corpus.
    Predict(PredictArgs),
    /// Split hashtags read one per line from standard input.
    Segment(SegmentArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Count entities per type.
    Stats(StatsArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub dev: PathBuf,
    /// Visual feature file; its dimension sets the model's visual input size.
    #[arg(long)]
    pub visual: Option<PathBuf>,
    /// Pre-trained word vectors; their dimension sets the word size.
    #[arg(long)]
    pub word_vectors: Option<PathBuf>,
    /// `key = value` settings applied over the defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "model.trimod")]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lr_decay: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub k_steps: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub l1: Option<f64>,
    #[arg(long)]
    pub l2: Option<f64>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    #[arg(long)]
    pub word_dim: Option<usize>,
    #[arg(long)]
    pub char_embedding_dim: Option<usize>,
    #[arg(long)]
    pub char_hidden: Option<usize>,
    #[arg(long)]
    pub word_hidden: Option<usize>,
    #[arg(long)]
    pub fused_dim: Option<usize>,
    /// Fuse only the text feature.
    #[arg(long)]
    pub text_only: bool,
    /// Pin forbidden BIO2 transitions in the CRF.
    #[arg(long)]
    pub bio2_constraints: bool,
    /// Run the regularization comparison instead of a single training run.
    #[arg(long)]
    pub ablation: bool,
    /// Continue from a saved model.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Also save the final epoch's model here.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Write the per-epoch report (or the ablation table) as CSV.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Train a hashtag segmenter on concatenations of these words first.
    #[arg(long, conflicts_with = "segmenter")]
    pub wordlist: Option<PathBuf>,
    /// Number of synthetic hashtags built from the word list.
    #[arg(long, default_value_t = 1000)]
    pub segmenter_examples: usize,
    /// Reuse the segmenter stored in another model file.
    #[arg(long)]
    pub segmenter: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub visual: Option<PathBuf>,
    #[arg(long)]
    pub per_category: bool,
    /// Also write the scores as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub visual: Option<PathBuf>,
    /// Append the fusion attention weights of each token.
    #[arg(long)]
    pub explain: bool,
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct SegmentArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Split at case changes, digits and punctuation instead.
    #[arg(long)]
    pub heuristic: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// One of embeddings, encoders, segmenter, fusion, emissions, loss, end-to-end.
    #[arg(long)]
    pub module: Option<String>,
    #[arg(long, default_value_t = DEFAULT_EPS)]
    pub eps: f64,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// Corpus file; repeat for several splits.
    #[arg(long, required = true)]
    pub corpus: Vec<PathBuf>,
}

/// Failure of a command, mapped to an exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Check(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(Error::NonFinite(_) | Error::NonFiniteGradient(_)) | CliError::Check(_) => EXIT_NUMERIC,
            _ => EXIT_USAGE,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parse `args` (program name first), run the command and return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
    let stdout = io::stdout();
    let mut out = stdout.lock();
    let result = match cli.command {
        Command::Train(a) => cmd_train(&a, &mut out),
        Command::Eval(a) => cmd_eval(&a, &mut out),
        Command::Predict(a) => cmd_predict(&a, &mut out),
        Command::Segment(a) => cmd_segment(&a, io::stdin().lock(), &mut out),
        Command::Gradcheck(a) => cmd_gradcheck(&a, &mut out),
        Command::Stats(a) => cmd_stats(&a, &mut out),
    };
    let _ = out.flush();
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn emit(out: &mut dyn Write, text: &str) -> CliResult<()> {
    out.write_all(text.as_bytes())
        .map_err(|e| Error::io("<stdout>", e).into())
}

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e).into())
}

fn visual_or_empty(path: Option<&Path>, dim: usize) -> Result<VisualFeatureStore> {
    match path {
        Some(p) => load_visual_features(p),
        None => Ok(VisualFeatureStore::new(dim)),
    }
}

fn load_model(path: &Path) -> Result<TriMod> {
    Ok(TriMod::from_bundle(&bundle::load(path)?)?.model)
}

/// Settings in increasing precedence: defaults (or the resumed model's),
/// the config file, then flags.
fn run_config(a: &TrainArgs, base: RunConfig) -> Result<(RunConfig, Vec<&'static str>)> {
    let mut rc = base;
    let mut explicit = Vec::new();
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        rc.apply_text(&text, &path.display().to_string())?;
        if text.lines().any(|l| l.split('#').next().unwrap_or("").contains("visual_dim")) {
            explicit.push("visual_dim");
        }
    }
    let flags: [(&str, Option<String>); 14] = [
        ("seed", a.seed.map(|v| v.to_string())),
        ("epochs", a.epochs.map(|v| v.to_string())),
        ("learning_rate", a.lr.map(|v| v.to_string())),
        ("lr_decay", a.lr_decay.map(|v| v.to_string())),
        ("batch_size", a.batch_size.map(|v| v.to_string())),
        ("k_steps", a.k_steps.map(|v| v.to_string())),
        ("dropout", a.dropout.map(|v| v.to_string())),
        ("l1", a.l1.map(|v| v.to_string())),
        ("l2", a.l2.map(|v| v.to_string())),
        ("clip_norm", a.clip_norm.map(|v| v.to_string())),
        ("word_dim", a.word_dim.map(|v| v.to_string())),
        ("char_embedding_dim", a.char_embedding_dim.map(|v| v.to_string())),
        ("char_hidden", a.char_hidden.map(|v| v.to_string())),
        ("word_hidden", a.word_hidden.map(|v| v.to_string())),
    ];
    for (key, value) in flags {
        if let Some(v) = value {
            rc.set(key, &v)?;
        }
    }
    if let Some(v) = a.fused_dim {
        rc.set("fused_dim", &v.to_string())?;
    }
    if a.text_only {
        rc.model.text_only = true;
    }
    if a.bio2_constraints {
        rc.model.bio2_constraints = true;
    }
    rc.train.validate()?;
    Ok((rc, explicit))
}

fn build_segmenter(a: &TrainArgs, seed: u64) -> Result<Option<Segmenter>> {
    if let Some(path) = &a.segmenter {
        return bundle::load_segmenter(path).map(Some);
    }
    let Some(path) = &a.wordlist else {
        return Ok(None);
    };
    let words = load_wordlist(path)?;
    let examples = make_synthetic_pairs(&words, a.segmenter_examples, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let alphabet = words.iter().flat_map(|w| w.chars()).flat_map(char::to_lowercase);
    let mut seg = Segmenter::new(alphabet, SegmenterDims::default(), &mut rng)?;
    let config = SegmenterTrainConfig {
        seed,
        ..Default::default()
    };
    let trace = train_segmenter(&mut seg, &examples, &config)?;
    if let Some(last) = trace.last() {
        info!("segmenter training accuracy {:.4}", last.accuracy);
    }
    Ok(Some(seg))
}

pub fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> CliResult<()> {
    let restored = a.resume.as_deref().map(bundle::load).transpose()?;
    let restored = restored.as_ref().map(TriMod::from_bundle).transpose()?;
    let base = match &restored {
        Some(r) => RunConfig {
            train: r.train.clone(),
            model: r.model.config.clone(),
        },
        None => RunConfig::default(),
    };
    let (mut rc, explicit) = run_config(a, base)?;
    let train_posts = parse_corpus(&a.train)?;
    let dev_posts = parse_corpus(&a.dev)?;
    if train_posts.is_empty() {
        return Err(CliError::Usage(format!("{}: no posts", a.train.display())));
    }
    let visual = match &a.visual {
        Some(path) => {
            let v = load_visual_features(path)?;
            if (explicit.contains(&"visual_dim") || restored.is_some()) && v.dim() != rc.model.visual {
                return Err(Error::Config(format!(
                    "{} holds {}-dimensional vectors but the configuration says {}",
                    path.display(),
                    v.dim(),
                    rc.model.visual
                ))
                .into());
            }
            rc.model.visual = v.dim();
            v
        }
        None => VisualFeatureStore::new(rc.model.visual),
    };
    let vectors: Option<WordVectors> = a.word_vectors.as_deref().map(load_word_vectors).transpose()?;
    let seed = rc.train.seed;

    if a.ablation {
        let segmenter = build_segmenter(a, seed)?;
        let fresh = || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            TriMod::new(rc.model.clone(), &train_posts, vectors.as_ref(), segmenter.clone(), &mut rng)
        };
        let table = run_ablation(fresh, &train_posts, &dev_posts, &visual, &rc.train)?;
        emit(out, &table.to_table())?;
        if let Some(path) = &a.report {
            write_file(path, &table.to_csv())?;
        }
        return Ok(());
    }

    let (model, done) = match restored {
        Some(r) => (r.model, r.epochs_done),
        None => {
            let segmenter = build_segmenter(a, seed)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (TriMod::new(rc.model, &train_posts, vectors.as_ref(), segmenter, &mut rng)?, 0)
        }
    };
    if done >= rc.train.epochs {
        return Err(CliError::Usage(format!(
            "the model already has {done} epochs; ask for more with --epochs"
        )));
    }
    let outcome = train_from(model, done, &train_posts, &dev_posts, &visual, &rc.train)?;
    emit(out, &outcome.report.to_table())?;
    if let Some(best) = outcome.report.best() {
        emit(
            out,
            &format!("best dev F1 {:.2} at epoch {}\n", 100.0 * best.dev_f1, outcome.best_epoch),
        )?;
    }
    bundle::save(&outcome.best.to_bundle(&rc.train, outcome.best_epoch), &a.out)?;
    if let Some(path) = &a.checkpoint {
        bundle::save(&outcome.last.to_bundle(&rc.train, rc.train.epochs), path)?;
    }
    if let Some(path) = &a.report {
        write_file(path, &outcome.report.to_csv())?;
    }
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> CliResult<()> {
    let model = load_model(&a.model)?;
    let posts = parse_corpus(&a.test)?;
    if posts.iter().any(|p| p.tags.is_none()) {
        return Err(CliError::Usage(format!("{}: every post needs tags", a.test.display())));
    }
    let visual = visual_or_empty(a.visual.as_deref(), model.config.visual)?;
    let report = evaluate(&model, &posts, &visual)?;
    emit(out, &report.to_table(a.per_category))?;
    if let Some(path) = &a.csv {
        write_file(path, &report.to_csv())?;
    }
    Ok(())
}

/// Corpus text of `posts` with predicted tags and, optionally, the
/// attention weights of each token as `modality=weight` columns.
pub fn format_predictions(model: &TriMod, posts: &[Post], visual: &VisualFeatureStore, explain: bool) -> Result<String> {
    let names = model.modalities();
    let mut text = String::new();
    for (i, post) in posts.iter().enumerate() {
        if i > 0 {
            text.push('\n');
        }
        let p = model.predict(&model.prepare(post, visual)?)?;
        if let Some(id) = &post.image_id {
            text.push_str(&format!("# img: {id}\n"));
        }
        for (t, token) in post.tokens.iter().enumerate() {
            text.push_str(&format!("{token}\t{}", p.tags[t]));
            if explain {
                for (m, w) in names.iter().zip(&p.weights[t]) {
                    text.push_str(&format!("\t{}={w:.6}", m.as_str()));
                }
            }
            text.push('\n');
        }
    }
    Ok(text)
}

pub fn cmd_predict(a: &PredictArgs, out: &mut dyn Write) -> CliResult<()> {
    let model = load_model(&a.model)?;
    let posts = parse_corpus(&a.input)?;
    let visual = visual_or_empty(a.visual.as_deref(), model.config.visual)?;
    emit(out, &format_predictions(&model, &posts, &visual, a.explain)?)
}

pub fn cmd_segment(a: &SegmentArgs, input: impl BufRead, out: &mut dyn Write) -> CliResult<()> {
    let model = match &a.model {
        Some(path) => Some(bundle::load_segmenter(path)?),
        None => None,
    };
    for line in input.lines() {
        let line = line.map_err(|e| Error::io("<stdin>", e))?;
        let tag = line.trim();
        let tag = tag.strip_prefix('#').unwrap_or(tag);
        let words = segment(model.as_ref(), tag)?;
        emit(out, &format!("{}\n", words.join(" ")))?;
    }
    Ok(())
}

pub fn cmd_gradcheck(a: &GradcheckArgs, out: &mut dyn Write) -> CliResult<()> {
    let modules = match &a.module {
        Some(name) => vec![name.parse::<CheckModule>()?],
        None => CheckModule::ALL.to_vec(),
    };
    emit(out, &format!("{:<12} {:>14} {:>8}  {}\n", "module", "max_rel_error", "checked", "worst"))?;
    let mut failed = Vec::new();
    for m in modules {
        let r = check_module(m, a.eps)?;
        let worst = r
            .worst_param
            .as_deref()
            .map(|p| format!("{p}[{}]", r.worst_index))
            .unwrap_or_default();
        let ok = r.max_relative_error < GRADCHECK_TOLERANCE;
        emit(
            out,
            &format!(
                "{:<12} {:>14.3e} {:>8}  {} {}\n",
                m.as_str(),
                r.max_relative_error,
                r.coordinates_checked,
                worst,
                if ok { "ok" } else { "FAIL" }
            ),
        )?;
        if !ok {
            failed.push(m.as_str());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Check(format!("gradient check failed for {}", failed.join(", "))))
    }
}

pub fn cmd_stats(a: &StatsArgs, out: &mut dyn Write) -> CliResult<()> {
    let mut splits = Vec::new();
    for path in &a.corpus {
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        splits.push((name, corpus_stats(&parse_corpus(path)?)));
    }
    let rows: Vec<(&str, _)> = splits.iter().map(|(n, s)| (n.as_str(), *s)).collect();
    emit(out, &stats_table(&rows))
}
