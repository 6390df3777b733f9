mod manifest;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use sensekit::corpus::read_documents;
use sensekit::eval::{
    eval_scws, eval_wsi, nearest_neighbors, parse_scws, parse_wsi, ContextSpan, EvalOptions,
};
use sensekit::io::{export_text, load_model, read_model_header, save_model, save_teacher};
use sensekit::teacher::{
    export_posteriors, fit_teacher, teacher_sense_posterior, validate_records, TeacherFitConfig,
    DEFAULT_TEACHER_DIM,
};
use sensekit::{
    Corpus, ErrorKind, IterContext, KdDirection, PosteriorStore, RecordStore, Scalar, TrainConfig,
    TrainContext, Trainer, VocabMode, Vocabulary,
};

use manifest::{default_path, RunManifest};

#[derive(Parser)]
#[command(
    name = "sensekit",
    version,
    about = "Multi-sense word embeddings with attention sense selection"
)]
struct Cli {
    /// Worker threads. 1 gives bitwise reproducible training.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    /// Floating point width used for computation and stored models.
    #[arg(long, global = true, value_enum, default_value_t = FloatWidth::F32)]
    float: FloatWidth,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Count corpus tokens and write a vocabulary (`word<TAB>count` lines).
    BuildVocab(BuildVocabArgs),
    /// Train a sense model.
    Train(TrainArgs),
    /// Fit teacher sense vectors on encoder records and export their posteriors.
    FitTeacher(FitTeacherArgs),
    /// Train a sense model regularized towards teacher posteriors.
    Distill(DistillArgs),
    /// Score a model on a WSI or SCWS dataset.
    Eval(EvalArgs),
    /// Nearest neighbours of a word's selected sense in a context.
    Nn(NnArgs),
    /// Check a teacher record file against a vocabulary.
    ValidateRecords(ValidateArgs),
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum FloatWidth {
    F32,
    F64,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum IterMode {
    SharedWindow,
    WordCentered,
}

impl From<IterMode> for IterContext {
    fn from(m: IterMode) -> Self {
        match m {
            IterMode::SharedWindow => IterContext::SharedWindow,
            IterMode::WordCentered => IterContext::WordCentered,
        }
    }
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum TrainMode {
    Global,
    Iterative,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum KdMode {
    /// -T^2 sum_k q_k log t_k, student posterior outside the log.
    StudentOutside,
    /// -T^2 sum_k t_k log q_k.
    TeacherOutside,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Task {
    Wsi,
    Scws,
}

#[derive(Clone, Copy, ValueEnum, Serialize, PartialEq)]
#[serde(rename_all = "kebab-case")]
enum Metric {
    Ari,
    AvgSimC,
    MaxSimC,
}

#[derive(Args, Serialize)]
struct BuildVocabArgs {
    /// Corpus files; blank lines separate paragraphs, `<<<DOC>>>` lines documents.
    #[arg(long, required = true, num_args = 1..)]
    corpus: Vec<PathBuf>,
    /// Drop words seen fewer times.
    #[arg(long, default_value_t = 1, conflicts_with = "words")]
    min_count: u64,
    /// Keep exactly the words listed in this file (one per line), in order.
    #[arg(long)]
    words: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct ModelArgs {
    #[arg(long, required = true, num_args = 1..)]
    corpus: Vec<PathBuf>,
    #[arg(long)]
    vocab: PathBuf,
    /// Model file to write.
    #[arg(long)]
    out: PathBuf,
    /// Also write a text export (`word`, `word#k` rows).
    #[arg(long)]
    export_text: Option<PathBuf>,
    /// Embedding dimension D.
    #[arg(long, default_value_t = 300)]
    dim: usize,
    /// Senses per word K.
    #[arg(long, default_value_t = 3)]
    senses: usize,
    /// Context words on each side of the center, Δ.
    #[arg(long, default_value_t = 5)]
    window: usize,
    /// Negative samples per context word, n.
    #[arg(long, default_value_t = 10)]
    negatives: usize,
    /// Adam learning rate.
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    #[arg(long, default_value_t = 2)]
    epochs: usize,
    /// Windows per Adam step.
    #[arg(long, default_value_t = 2048)]
    batch: usize,
    #[arg(long, env = "SENSEKIT_SEED", default_value_t = 0)]
    seed: u64,
    /// Step-1 contexts of the iterative context embedding.
    #[arg(long, value_enum, default_value_t = IterMode::SharedWindow)]
    iter_context: IterMode,
    /// Context embedding used for the sense posterior during training.
    #[arg(long, value_enum, default_value_t = TrainMode::Global)]
    train_context: TrainMode,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args, Serialize)]
struct DistillArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Teacher posterior store (TPO1) keyed by window position.
    #[arg(long)]
    posteriors: PathBuf,
    /// Weight α of the transfer loss.
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    /// Distillation temperature T.
    #[arg(long, default_value_t = 4.0)]
    temperature: f64,
    #[arg(long, value_enum, default_value_t = KdMode::StudentOutside)]
    kd_direction: KdMode,
}

#[derive(Args, Serialize)]
struct FitTeacherArgs {
    /// Teacher record file (TSE1).
    #[arg(long)]
    records: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Fitted teacher parameters (TSP1).
    #[arg(long)]
    out: PathBuf,
    /// Posterior store (TPO1) for `distill`.
    #[arg(long)]
    posteriors_out: PathBuf,
    /// Senses per word K.
    #[arg(long, default_value_t = 3)]
    senses: usize,
    /// Expected encoder width Dt; must match the record file.
    #[arg(long, default_value_t = DEFAULT_TEACHER_DIM)]
    teacher_dim: usize,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    /// Temperature T of the exported posteriors.
    #[arg(long, default_value_t = 4.0)]
    temperature: f64,
    #[arg(long, env = "SENSEKIT_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Serialize)]
struct ContextArgs {
    /// Context words on each side of the target, Δ.
    #[arg(long, default_value_t = 5, conflicts_with = "full_context")]
    window: usize,
    /// Use every token of the given context.
    #[arg(long)]
    full_context: bool,
    #[arg(long, value_enum, default_value_t = IterMode::SharedWindow)]
    iter_context: IterMode,
}

impl ContextArgs {
    fn options(&self) -> EvalOptions {
        EvalOptions {
            span: if self.full_context {
                ContextSpan::Full
            } else {
                ContextSpan::Window(self.window)
            },
            iter_context: self.iter_context.into(),
        }
    }
}

#[derive(Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// WSI: `target<TAB>gold<TAB>context`. SCWS: `word1<TAB>word2<TAB>score<TAB>context1<TAB>context2`.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum)]
    task: Task,
    /// Defaults to ari for wsi and both similarity metrics for scws.
    #[arg(long, value_enum)]
    metric: Option<Metric>,
    /// Write the JSON report here (and its manifest next to it).
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    context: ContextArgs,
}

#[derive(Args, Serialize)]
struct NnArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    word: String,
    /// Text around the word; `<b>word</b>` marks the occurrence to use.
    #[arg(long)]
    context: String,
    #[arg(long, default_value_t = 10)]
    top: usize,
    /// Write a run manifest here.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[command(flatten)]
    ctx: ContextArgs,
}

#[derive(Args, Serialize)]
struct ValidateArgs {
    #[arg(long)]
    records: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = rayon_threads(cli.threads) {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn rayon_threads(n: usize) -> Result<()> {
    anyhow::ensure!(n > 0, "--threads must be positive");
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()?;
    Ok(())
}

/// 2 usage, 3 data or format, 4 numeric.
fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<sensekit::Error>() {
            return match err.kind() {
                ErrorKind::Usage => 2,
                ErrorKind::Data => 3,
                ErrorKind::Numeric => 4,
            };
        }
    }
    3
}

fn run(cli: Cli) -> Result<()> {
    let threads = cli.threads;
    match (cli.command, cli.float) {
        (Command::BuildVocab(a), _) => build_vocab(&a),
        (Command::Train(a), FloatWidth::F32) => train::<f32>(&a.model, None, threads, &a),
        (Command::Train(a), FloatWidth::F64) => train::<f64>(&a.model, None, threads, &a),
        (Command::Distill(a), FloatWidth::F32) => train::<f32>(&a.model, Some(&a), threads, &a),
        (Command::Distill(a), FloatWidth::F64) => train::<f64>(&a.model, Some(&a), threads, &a),
        (Command::FitTeacher(a), FloatWidth::F32) => fit::<f32>(&a),
        (Command::FitTeacher(a), FloatWidth::F64) => fit::<f64>(&a),
        (Command::Eval(a), _) => match model_width(&a.model)? {
            4 => eval::<f32>(&a),
            _ => eval::<f64>(&a),
        },
        (Command::Nn(a), _) => match model_width(&a.model)? {
            4 => nn::<f32>(&a),
            _ => nn::<f64>(&a),
        },
        (Command::ValidateRecords(a), _) => validate(&a),
    }
}

/// Stored models are read at their own width, whatever `--float` says.
fn model_width(path: &Path) -> Result<u8> {
    Ok(read_model_header(path)?.float_width)
}

fn load_vocab(path: &Path) -> Result<Vocabulary> {
    Ok(Vocabulary::load(path)?)
}

fn build_vocab(a: &BuildVocabArgs) -> Result<()> {
    let mut inputs: Vec<&Path> = a.corpus.iter().map(PathBuf::as_path).collect();
    let docs = read_documents(&a.corpus)?;
    let mode = match &a.words {
        Some(path) => {
            inputs.push(path);
            let text =
                fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            VocabMode::Fixed(
                text.lines()
                    .map(str::trim)
                    .filter(|l| !l.is_empty())
                    .map(String::from)
                    .collect(),
            )
        }
        None => VocabMode::MinCount(a.min_count),
    };
    let manifest = RunManifest::start("build-vocab", a, &inputs)?;
    let vocab = Vocabulary::build(docs.iter().flatten().flatten().map(String::as_str), &mode)?;
    vocab.save(&a.out)?;
    println!("{} words", vocab.len());
    manifest.finish(&[&a.out], &default_path(&a.out))
}

fn train<F: Scalar>(
    m: &ModelArgs,
    distill: Option<&DistillArgs>,
    threads: usize,
    record: &impl Serialize,
) -> Result<()> {
    let mut inputs: Vec<&Path> = m.corpus.iter().map(PathBuf::as_path).collect();
    inputs.push(&m.vocab);
    if let Some(d) = distill {
        inputs.push(&d.posteriors);
    }
    let command = if distill.is_some() {
        "distill"
    } else {
        "train"
    };
    let config = serde_json::json!({ "args": record, "threads": threads, "float": F::WIDTH * 8 });
    let manifest = RunManifest::start(command, &config, &inputs)?;

    let vocab = load_vocab(&m.vocab)?;
    let corpus = Corpus::from_documents(&read_documents(&m.corpus)?, &vocab);
    let mut config = TrainConfig {
        window: m.window,
        negatives: m.negatives,
        senses: m.senses,
        dim: m.dim,
        lr: m.lr,
        epochs: m.epochs,
        batch_size: m.batch,
        seed: m.seed,
        iter_context: m.iter_context.into(),
        train_context: match m.train_context {
            TrainMode::Global => TrainContext::Global,
            TrainMode::Iterative => TrainContext::Iterative,
        },
        threads,
        ..TrainConfig::default()
    };
    let teacher = match distill {
        Some(d) => {
            config.distill = true;
            config.alpha = d.alpha;
            config.temperature = d.temperature;
            config.kd_direction = match d.kd_direction {
                KdMode::StudentOutside => KdDirection::StudentOutside,
                KdMode::TeacherOutside => KdDirection::TeacherOutside,
            };
            Some(PosteriorStore::load(&d.posteriors)?)
        }
        None => None,
    };
    anyhow::ensure!(
        !corpus.is_empty(),
        sensekit::Error::InvalidArgument("corpus has no in-vocabulary tokens".into())
    );
    let mut trainer = Trainer::<F>::new(&vocab, config)?;
    println!("epoch\tmean_loss\tmean_transfer_loss\twindows");
    for _ in 0..m.epochs {
        let stats = trainer.run_epoch(&corpus, teacher.as_ref())?;
        println!("{stats}");
    }
    let params = trainer.into_params();
    if !params.is_finite() {
        return Err(sensekit::Error::NonFinite("trained parameters").into());
    }
    save_model(&params, &vocab, &m.out)?;
    let mut outputs: Vec<&Path> = vec![&m.out];
    if let Some(path) = &m.export_text {
        export_text(&params, &vocab, path)?;
        outputs.push(path);
    }
    manifest.finish(&outputs, &default_path(&m.out))
}

fn fit<F: Scalar>(a: &FitTeacherArgs) -> Result<()> {
    let manifest = RunManifest::start("fit-teacher", a, &[&a.records, &a.vocab])?;
    let vocab = load_vocab(&a.vocab)?;
    let store = RecordStore::load(&a.records, Some(&vocab))?;
    let fitted = fit_teacher::<F>(
        &store,
        &TeacherFitConfig {
            vocab_size: vocab.len(),
            senses: a.senses,
            dim: a.teacher_dim,
            epochs: a.epochs,
            lr: a.lr,
            batch_size: a.batch,
            seed: a.seed,
        },
    )?;
    println!("epoch\tmean_loss");
    for (i, l) in fitted.epoch_losses.iter().enumerate() {
        println!("{}\t{l:.6}", i + 1);
    }
    if !fitted
        .params
        .sense
        .iter()
        .chain(&fitted.params.disamb)
        .all(|x| x.is_finite())
    {
        return Err(sensekit::Error::NonFinite("teacher parameters").into());
    }
    let posteriors = export_posteriors(&store, &fitted.params, F::of(a.temperature))?;
    // how records split over senses, by argmax at T = 1
    let mut split = vec![0usize; a.senses];
    for rec in &store.records {
        split[teacher_sense_posterior(rec.center, rec, &fitted.params, F::one())?.best()] += 1;
    }
    println!("sense\trecords");
    for (k, n) in split.iter().enumerate() {
        println!("{k}\t{n}");
    }
    save_teacher(&fitted.params, &vocab, &a.out)?;
    posteriors.save(&a.posteriors_out)?;
    manifest.finish(&[&a.out, &a.posteriors_out], &default_path(&a.out))
}

#[derive(Serialize)]
struct MetricReport {
    dataset: String,
    metric: &'static str,
    value: f64,
    skipped: usize,
}

fn eval<F: Scalar>(a: &EvalArgs) -> Result<()> {
    let manifest = RunManifest::start("eval", a, &[&a.model, &a.vocab, &a.dataset])?;
    let vocab = load_vocab(&a.vocab)?;
    let params = load_model::<F>(&a.model, &vocab)?;
    let text = fs::read_to_string(&a.dataset)
        .with_context(|| format!("reading {}", a.dataset.display()))?;
    let dataset = a
        .dataset
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let opts = a.context.options();
    let mut reports = Vec::new();
    match a.task {
        Task::Wsi => {
            if matches!(a.metric, Some(m) if m != Metric::Ari) {
                return Err(sensekit::Error::InvalidArgument(
                    "wsi supports --metric ari only".into(),
                )
                .into());
            }
            let report = eval_wsi(&parse_wsi(&text)?, &vocab, &params, &opts)?;
            println!("word\tinstances\tari");
            for w in &report.words {
                println!("{}\t{}\t{:.6}", w.word, w.instances, w.ari);
            }
            reports.push(MetricReport {
                dataset,
                metric: "ari",
                value: report.mean_ari,
                skipped: report.skipped_instances,
            });
        }
        Task::Scws => {
            if a.metric == Some(Metric::Ari) {
                return Err(sensekit::Error::InvalidArgument(
                    "scws supports avg-sim-c and max-sim-c".into(),
                )
                .into());
            }
            let report = eval_scws(&parse_scws(&text)?, &vocab, &params, &opts)?;
            let mut push = |metric, value| {
                reports.push(MetricReport {
                    dataset: dataset.clone(),
                    metric,
                    value,
                    skipped: report.skipped,
                })
            };
            match a.metric {
                Some(Metric::AvgSimC) => push("avgsimc", report.avg_simc),
                Some(Metric::MaxSimC) => push("maxsimc", report.max_simc),
                _ => {
                    push("avgsimc", report.avg_simc);
                    push("maxsimc", report.max_simc);
                }
            }
        }
    }
    println!("dataset\tmetric\tvalue\tskipped");
    for r in &reports {
        println!("{}\t{}\t{:.6}\t{}", r.dataset, r.metric, r.value, r.skipped);
    }
    if let Some(out) = &a.out {
        let json = match reports.as_slice() {
            [one] => serde_json::to_string_pretty(one)?,
            many => serde_json::to_string_pretty(many)?,
        };
        sensekit::io::write_atomic(out, json.as_bytes())?;
        manifest.finish(&[out], &default_path(out))?;
    }
    Ok(())
}

fn nn<F: Scalar>(a: &NnArgs) -> Result<()> {
    let manifest = RunManifest::start("nn", a, &[&a.model, &a.vocab])?;
    let vocab = load_vocab(&a.vocab)?;
    let params = load_model::<F>(&a.model, &vocab)?;
    let found = nearest_neighbors(
        &a.word,
        &a.context,
        &vocab,
        &params,
        a.top,
        &a.ctx.options(),
    )?;
    println!("sense {}\tp(k) {:.4}", found.sense, found.probability.f64());
    for (rank, (w, cos)) in found.ranked.iter().enumerate() {
        println!("{}\t{}\t{:.6}", rank + 1, vocab.word(*w), cos.f64());
    }
    if let Some(path) = &a.manifest {
        manifest.finish(&[], path)?;
    }
    Ok(())
}

fn validate(a: &ValidateArgs) -> Result<()> {
    let vocab = load_vocab(&a.vocab)?;
    let report = validate_records(&a.records, &vocab)?;
    let mut counts = BTreeMap::new();
    counts.insert("records", report.records);
    counts.insert("vectors", report.vectors);
    counts.insert("dim", report.dim);
    counts.insert("delta", report.delta);
    for (k, v) in counts {
        println!("{k}\t{v}");
    }
    println!("violations\t0");
    Ok(())
}
