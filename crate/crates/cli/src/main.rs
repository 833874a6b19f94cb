use std::path::{Path, PathBuf};
use std::process::ExitCode;

use avjoint::dataio::{
    embeddings_to_csv, export_csv, generate_synthetic, import_csv, load_checkpoint, read_corpus, save_checkpoint,
    write_atomic, write_corpus, write_embeddings, Corpus, SyntheticSpec,
};
use avjoint::retrieval::{build_store, label_recall_at_k, query_cross_modal, recall_table, Direction};
use avjoint::trainer::{parse_widths, OptimizerKind, TrainState, Trainer, TrainingConfig, TrainingLog};
use avjoint::{Error, Result};
use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};

/// Default seed for every subcommand when no flag or config file sets one.
const SEED_ENV: &str = "AVJOINT_SEED";

#[derive(Parser)]
#[command(
    name = "avjoint",
    version,
    about = "Joint audio-visual embeddings and cross-modal retrieval"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic correlated corpus (.bin, or .csv by extension).
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint.
    Train(Box<TrainArgs>),
    /// Print Recall@K tables in both directions.
    Eval(EvalArgs),
    /// Rank the other modality for one video.
    Query(QueryArgs),
    /// Export both embedding matrices with ids.
    Embed(EmbedArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long = "n", visible_alias = "num-records", default_value_t = 4096)]
    num_records: usize,
    #[arg(long = "classes", visible_alias = "num-classes", default_value_t = 32)]
    num_classes: usize,
    #[arg(long, default_value_t = 16)]
    latent_dim: usize,
    #[arg(long, default_value_t = 0.1)]
    noise_sigma: f64,
    #[arg(long, default_value_t = 1)]
    labels_per_record: usize,
    #[arg(long, default_value_t = 1024)]
    visual_dim: usize,
    #[arg(long, default_value_t = 128)]
    audio_dim: usize,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
#[command(group(ArgGroup::new("overrides").multiple(true).args([
    "config", "margin", "p_negative", "batch_size", "lambda", "lambda_step", "learning_rate",
    "optimizer", "l2", "l2_on_classifier", "class_loss_on_negatives", "visual_widths",
    "audio_widths", "embedding_dim", "num_classes", "max_rejection_attempts", "seed",
])))]
struct TrainArgs {
    /// Corpus file (.bin or .csv).
    #[arg(long)]
    corpus: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// `key = value` file applied on top of the defaults; flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Pin the reference hyperparameters, refusing any override.
    #[arg(long, conflicts_with_all = ["overrides", "epochs", "resume"])]
    reference_defaults: bool,
    /// Continue from a checkpoint with its stored configuration.
    #[arg(long, conflicts_with = "overrides")]
    resume: Option<PathBuf>,
    /// Stop after this global step.
    #[arg(long)]
    max_steps: Option<u64>,
    /// Per-step loss log (delimited).
    #[arg(long)]
    log: Option<PathBuf>,

    #[arg(long = "margin", visible_alias = "margin-alpha")]
    margin: Option<f64>,
    #[arg(long)]
    p_negative: Option<f64>,
    #[arg(long = "batch", visible_alias = "batch-size")]
    batch_size: Option<usize>,
    #[arg(long = "lambda", visible_alias = "lambda-value")]
    lambda: Option<f64>,
    #[arg(long = "lambda-step", visible_alias = "lambda-activation-step")]
    lambda_step: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long = "lr", visible_alias = "learning-rate")]
    learning_rate: Option<f64>,
    #[arg(long, value_enum)]
    optimizer: Option<OptimizerArg>,
    #[arg(long = "l2", visible_alias = "l2-coefficient")]
    l2: Option<f64>,
    #[arg(long)]
    l2_on_classifier: Option<bool>,
    #[arg(long)]
    class_loss_on_negatives: Option<bool>,
    /// Comma-separated hidden widths, e.g. `2000,2000,700,700`.
    #[arg(long)]
    visual_widths: Option<String>,
    #[arg(long)]
    audio_widths: Option<String>,
    #[arg(long)]
    embedding_dim: Option<usize>,
    /// Defaults to the number of classes in the corpus.
    #[arg(long)]
    num_classes: Option<usize>,
    #[arg(long)]
    max_rejection_attempts: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum OptimizerArg {
    Adam,
    Sgd,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, value_delimiter = ',', default_value = "256,512,1024")]
    pools: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
    ks: Vec<usize>,
    /// Seed for drawing the pools.
    #[arg(long)]
    seed: Option<u64>,
    /// Also write the table in delimited form.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also report label-level recall over the whole corpus.
    #[arg(long)]
    label_recall: bool,
}

#[derive(Args)]
struct QueryArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    id: String,
    /// a2v / audio-to-video or v2a / video-to-audio.
    #[arg(long, value_parser = parse_direction)]
    direction: Direction,
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Drop the query's own counterpart from the list.
    #[arg(long)]
    exclude_self: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum EmbedFormat {
    Csv,
    Bin,
}

#[derive(Args)]
struct EmbedArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    out: PathBuf,
    /// Defaults to csv for a `.csv` path, binary otherwise.
    #[arg(long, value_enum)]
    format: Option<EmbedFormat>,
}

fn parse_direction(s: &str) -> std::result::Result<Direction, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = env_seed().and_then(|seed| match cli.command {
        Command::GenData(a) => gen_data(a, seed),
        Command::Train(a) => train(*a, seed),
        Command::Eval(a) => eval(a, seed),
        Command::Query(a) => query(a),
        Command::Embed(a) => embed(a),
    });
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|e| Error::Config(format!("{SEED_ENV}={v:?}: {e}"))),
        Err(_) => Ok(None),
    }
}

fn is_csv(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

fn load_corpus(path: &Path) -> Result<Corpus> {
    if is_csv(path) {
        import_csv(path)
    } else {
        read_corpus(path)
    }
}

fn gen_data(a: GenDataArgs, env_seed: Option<u64>) -> Result<()> {
    let spec = SyntheticSpec {
        num_records: a.num_records,
        num_classes: a.num_classes,
        latent_dim: a.latent_dim,
        noise_sigma: a.noise_sigma,
        labels_per_record: a.labels_per_record,
        visual_dim: a.visual_dim,
        audio_dim: a.audio_dim,
        seed: a.seed.or(env_seed).unwrap_or(0),
    };
    let corpus = generate_synthetic(&spec)?;
    if is_csv(&a.out) {
        export_csv(&a.out, &corpus)?;
    } else {
        write_corpus(&a.out, &corpus)?;
    }
    println!(
        "wrote {}: {} records, visual dim {}, audio dim {}, {} classes",
        a.out.display(),
        corpus.len(),
        corpus.visual_dim(),
        corpus.audio_dim(),
        corpus.num_classes()
    );
    Ok(())
}

/// Defaults, then corpus shape, then the seed variable, then the config
/// file, then flags.
fn training_config(a: &TrainArgs, corpus: &Corpus, env_seed: Option<u64>) -> Result<TrainingConfig> {
    let mut c = TrainingConfig {
        visual_input_dim: corpus.visual_dim(),
        audio_input_dim: corpus.audio_dim(),
        ..TrainingConfig::default()
    };
    if a.reference_defaults {
        c.seed = env_seed.unwrap_or(c.seed);
        return Ok(c);
    }
    c.num_classes = corpus.num_classes();
    if let Some(seed) = env_seed {
        c.seed = seed;
    }
    if let Some(path) = &a.config {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        c.apply_kv(&text)?;
    }
    macro_rules! set {
        ($($flag:ident => $field:ident),* $(,)?) => {
            $(if let Some(v) = a.$flag.clone() { c.$field = v; })*
        };
    }
    set!(
        margin => margin_alpha,
        p_negative => p_negative,
        batch_size => batch_size,
        lambda => lambda_value,
        lambda_step => lambda_activation_step,
        epochs => epochs,
        learning_rate => learning_rate,
        l2 => l2_coefficient,
        l2_on_classifier => l2_on_classifier,
        class_loss_on_negatives => class_loss_on_negatives,
        embedding_dim => embedding_dim,
        num_classes => num_classes,
        max_rejection_attempts => max_rejection_attempts,
        seed => seed,
    );
    match a.optimizer {
        Some(OptimizerArg::Sgd) => c.optimizer = OptimizerKind::Sgd,
        Some(OptimizerArg::Adam) if !matches!(c.optimizer, OptimizerKind::Adam { .. }) => {
            c.optimizer = OptimizerKind::ADAM_DEFAULT
        }
        _ => {}
    }
    if let Some(w) = &a.visual_widths {
        c.visual_widths = parse_widths(w).map_err(|e| Error::Config(format!("--visual-widths: {e}")))?;
    }
    if let Some(w) = &a.audio_widths {
        c.audio_widths = parse_widths(w).map_err(|e| Error::Config(format!("--audio-widths: {e}")))?;
    }
    Ok(c)
}

fn train(a: TrainArgs, env_seed: Option<u64>) -> Result<()> {
    let corpus = load_corpus(&a.corpus)?;
    let mut trainer = match &a.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            ckpt.check_corpus(&corpus)?;
            let mut config = ckpt.config;
            if let Some(epochs) = a.epochs {
                config.epochs = epochs;
            }
            Trainer::resume(&corpus, config, ckpt.state)?
        }
        None => {
            let config = training_config(&a, &corpus, env_seed)?;
            config.validate()?;
            Trainer::new(&corpus, config)?
        }
    };
    log::info!(
        "training {} steps ({} per epoch) from step {}",
        trainer.total_steps(),
        trainer.steps_per_epoch(),
        trainer.state().global_step
    );
    let log = trainer.run(a.max_steps, |row| {
        log::debug!("{}", row.to_line());
    })?;
    let state: &TrainState = trainer.state();
    save_checkpoint(&a.out, trainer.config(), state)?;
    if let Some(path) = &a.log {
        write_atomic(path, log.to_delimited().as_bytes())?;
    }
    report_training(&log, state, &a.out);
    Ok(())
}

fn report_training(log: &TrainingLog, state: &TrainState, out: &Path) {
    match log.rows.last() {
        Some(row) => println!(
            "step {}: l_cos {:.6} l_class {:.6} l2 {:.6} total {:.6}",
            row.step, row.loss.l_cos, row.loss.l_class, row.loss.l2, row.loss.total
        ),
        None => println!("no steps run"),
    }
    println!("wrote {} at step {}", out.display(), state.global_step);
}

fn load_store(m: &ModelArgs) -> Result<avjoint::retrieval::EmbeddingStore> {
    let corpus = load_corpus(&m.corpus)?;
    if corpus.is_empty() {
        return Err(Error::EmptyStore);
    }
    let ckpt = load_checkpoint(&m.checkpoint)?;
    ckpt.check_corpus(&corpus)?;
    build_store(&ckpt.state.model, corpus.records())
}

fn eval(a: EvalArgs, env_seed: Option<u64>) -> Result<()> {
    let store = load_store(&a.model)?;
    let table = recall_table(&store, &a.pools, &a.ks, a.seed.or(env_seed).unwrap_or(0))?;
    print!("{table}");
    if let Some(path) = &a.out {
        write_atomic(path, table.to_delimited().as_bytes())?;
    }
    if a.label_recall {
        for dir in Direction::BOTH {
            for &k in &a.ks {
                println!("label recall {dir} @{k}: {:.4}", label_recall_at_k(&store, k, dir)?);
            }
        }
    }
    Ok(())
}

fn query(a: QueryArgs) -> Result<()> {
    let store = load_store(&a.model)?;
    let result = query_cross_modal(&store, &a.id, a.direction, a.exclude_self, Some(a.k))?;
    for (r, hit) in result.hits.iter().enumerate() {
        println!("{}\t{}\t{:.6}", r + 1, hit.id, hit.score);
    }
    Ok(())
}

fn embed(a: EmbedArgs) -> Result<()> {
    let store = load_store(&a.model)?;
    let csv = match a.format {
        Some(EmbedFormat::Csv) => true,
        Some(EmbedFormat::Bin) => false,
        None => is_csv(&a.out),
    };
    if csv {
        write_atomic(&a.out, embeddings_to_csv(&store).as_bytes())?;
    } else {
        write_embeddings(&a.out, &store)?;
    }
    println!(
        "wrote {} embeddings of dim {} to {}",
        store.len(),
        store.dim(),
        a.out.display()
    );
    Ok(())
}
