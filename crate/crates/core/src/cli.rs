//! The `setvec` command line.
//!
//! Exit codes: 0 on success, 2 for usage and validation errors, 3 for runtime failures.

use std::collections::{BTreeMap, HashSet};
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::corpus::synthetic::{
    gen_synthetic, FACTORS_FILE, ITEMS_FILE, LABELED_SETS_FILE, SETS_FILE,
};
use crate::corpus::{load_corpus, load_labeled_sets, read_factors, Corpus, SyntheticSpec};
use crate::encoder::{ConvStage, EncoderConfig, PoolKind};
use crate::error::{Error, Result};
use crate::evaluation::{
    compare_set_vs_pairwise, generate_suite, oracle_embeddings, run_analogy_suite, shuffled_labels,
    train_classifier, AnalogySuite, FactorKind, LabeledSetDataset, MlpConfig,
};
use crate::query::{
    extract_from_images, nearest, project_2d, projection_tsv, EmbeddingMatrix, Metric,
};
use crate::trainer::{
    load_checkpoint, resume, save_checkpoint, AdamConfig, Checkpoint, TrainConfig, TrainOptions,
};

/// Name of the analogy suite written by `gen-corpus`.
pub const SUITE_FILE: &str = "analogy_suite.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.sv2c";
pub const LOSS_FILE: &str = "loss.csv";

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "setvec",
    version,
    args_override_self = true,
    about = "Learn item embeddings from style sets and query them"
)]
pub struct Cli {
    /// Worker threads; 1 keeps every run bit-reproducible.
    #[arg(long, env = "SETVEC_THREADS", default_value_t = 1, global = true)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic corpus with ground-truth factors.
    GenCorpus(GenCorpusArgs),
    /// Train the input and context encoders.
    Train(TrainArgs),
    /// Export the input-network embedding of every item.
    Embed(EmbedArgs),
    /// Nearest neighbours of an item or vector.
    Query(QueryArgs),
    /// Score an analogy suite.
    Analogy(AnalogyArgs),
    /// Classify labeled sets from averaged item embeddings.
    Classify(ClassifyArgs),
    /// Compare set training with training on the pairwise transform.
    Ablate(AblateArgs),
    /// Principal-component projection to 2D.
    Project(ProjectArgs),
    /// Re-run the command recorded in a run manifest.
    Replay(ReplayArgs),
}

#[derive(Args, Debug, Serialize)]
pub struct GenCorpusArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub styles: usize,
    #[arg(long, default_value_t = 20)]
    pub items_per_style: usize,
    #[arg(long, value_delimiter = ',', default_values_t = ["top".to_string(), "bottom".to_string(), "shoes".to_string()])]
    pub categories: Vec<String>,
    /// Square image side in pixels.
    #[arg(long, default_value_t = 32)]
    pub image_size: usize,
    #[arg(long, default_value_t = 2)]
    pub palette: usize,
    #[arg(long, default_value_t = 2)]
    pub patterns: usize,
    #[arg(long, default_value_t = 500)]
    pub sets: usize,
    /// Relative weights of set sizes 2, 3 and 4.
    #[arg(long, value_delimiter = ',', default_values_t = [0.4, 0.6, 0.0])]
    pub set_size_weights: Vec<f64>,
    #[arg(long, default_value_t = 2000)]
    pub labeled_sets: usize,
    #[arg(long, default_value_t = 0.0)]
    pub reuse_skew: f64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Analogy questions to generate; skipped when the corpus cannot supply them.
    #[arg(long, default_value_t = 50)]
    pub questions: usize,
    #[arg(long, default_value = "color")]
    pub analogy_factor: FactorKind,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct TrainFlags {
    #[arg(long, default_value_t = 5)]
    pub epochs: usize,
    /// Style sets per batch.
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub beta1: f64,
    #[arg(long, default_value_t = 0.999)]
    pub beta2: f64,
    #[arg(long, default_value_t = 1e-8)]
    pub adam_eps: f64,
    /// Negatives per pair.
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Embedding dimension.
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    /// Output channels of each convolution stage.
    #[arg(long, value_delimiter = ',', default_values_t = [16, 32, 64])]
    pub channels: Vec<usize>,
    #[arg(long, default_value_t = 2)]
    pub convs_per_stage: usize,
    #[arg(long, default_value = "max")]
    pub pool: PoolKind,
    #[arg(long)]
    pub no_batch_norm: bool,
    /// Steps between periodic checkpoints; 0 disables them.
    #[arg(long, default_value_t = 0)]
    pub checkpoint_interval: usize,
    #[arg(long)]
    pub nondeterministic: bool,
}

impl TrainFlags {
    pub fn config(&self, input_shape: [usize; 3]) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.adam_eps,
            k: self.k,
            seed: self.seed,
            encoder: EncoderConfig {
                input_shape,
                conv_stages: self
                    .channels
                    .iter()
                    .map(|&c| ConvStage {
                        out_channels: c,
                        conv_count: self.convs_per_stage,
                        pool: self.pool,
                    })
                    .collect(),
                embedding_dim: self.dim,
                batch_norm: !self.no_batch_norm,
            },
            checkpoint_interval: self.checkpoint_interval,
            deterministic: !self.nondeterministic,
            ..TrainConfig::default()
        }
    }
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct MlpFlags {
    #[arg(long, value_delimiter = ',', default_values_t = [64])]
    pub hidden: Vec<usize>,
    #[arg(long, default_value_t = 300)]
    pub mlp_epochs: usize,
    #[arg(long, default_value_t = 1e-2)]
    pub mlp_lr: f64,
    #[arg(long, default_value_t = 0.1)]
    pub test_fraction: f64,
}

impl MlpFlags {
    fn config(&self) -> MlpConfig {
        MlpConfig {
            hidden: self.hidden.clone(),
            epochs: self.mlp_epochs,
            adam: AdamConfig {
                learning_rate: self.mlp_lr,
                ..AdamConfig::default()
            },
        }
    }
}

#[derive(Args, Debug, Serialize)]
pub struct TrainArgs {
    /// Corpus directory holding items.tsv and sets.tsv.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from this checkpoint up to --epochs; its stored settings win over the other flags.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Args, Debug, Serialize)]
pub struct EmbedArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, required_unless_present = "oracle", conflicts_with = "oracle")]
    pub checkpoint: Option<PathBuf>,
    /// Write one-hot category and factor codes from the corpus's factors.tsv instead.
    #[arg(long)]
    pub oracle: Option<FactorKind>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
}

#[derive(Args, Debug, Serialize)]
pub struct QueryArgs {
    #[arg(long)]
    pub matrix: PathBuf,
    #[arg(long, required_unless_present = "vector", conflicts_with = "vector")]
    pub item: Option<String>,
    /// Comma-separated query vector.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub vector: Option<Vec<f64>>,
    #[arg(long, default_value_t = 5)]
    pub top: usize,
    #[arg(long, value_delimiter = ',')]
    pub exclude: Vec<String>,
    #[arg(long)]
    pub category: Option<String>,
    #[arg(long, default_value = "cosine")]
    pub metric: Metric,
    /// Also write the ranking here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct AnalogyArgs {
    #[arg(long)]
    pub suite: PathBuf,
    #[arg(long)]
    pub matrix: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
    /// Factor sidecar; defaults to factors.tsv beside the suite.
    #[arg(long)]
    pub factors: Option<PathBuf>,
    #[arg(long, default_value = "cosine")]
    pub metric: Metric,
}

#[derive(Args, Debug, Serialize)]
pub struct ClassifyArgs {
    #[arg(long)]
    pub matrix: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Labeled sets; defaults to labeled_sets.tsv in the corpus directory.
    #[arg(long)]
    pub labeled: Option<PathBuf>,
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Permute the labels first, giving a chance-level baseline.
    #[arg(long)]
    pub shuffle_labels: bool,
    #[command(flatten)]
    pub mlp: MlpFlags,
}

#[derive(Args, Debug, Serialize)]
pub struct AblateArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub labeled: Option<PathBuf>,
    #[arg(long)]
    pub report: PathBuf,
    #[command(flatten)]
    pub train: TrainFlags,
    #[command(flatten)]
    pub mlp: MlpFlags,
}

#[derive(Args, Debug, Serialize)]
pub struct ProjectArgs {
    #[arg(long)]
    pub matrix: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
}

/// Written beside every output as `<subcommand>.manifest.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub version: String,
    pub seed: Option<u64>,
    /// Arguments after the program name, as given.
    pub argv: Vec<String>,
    /// Every setting with defaults filled in.
    pub config: serde_json::Value,
    pub inputs: BTreeMap<String, PathBuf>,
    pub outputs: BTreeMap<String, PathBuf>,
}

struct Run<'a> {
    argv: &'a [String],
}

impl Run<'_> {
    fn manifest(
        &self,
        name: &str,
        dir: &Path,
        config: &impl Serialize,
        seed: Option<u64>,
        inputs: &[(&str, &Path)],
        outputs: &[(&str, &Path)],
    ) -> Result<()> {
        let own = |pairs: &[(&str, &Path)]| {
            pairs
                .iter()
                .map(|(k, p)| (k.to_string(), p.to_path_buf()))
                .collect()
        };
        let m = RunManifest {
            subcommand: name.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            argv: self.argv.to_vec(),
            config: serde_json::to_value(config).expect("config serializes"),
            inputs: own(inputs),
            outputs: own(outputs),
        };
        let path = dir.join(format!("{name}.manifest.json"));
        write_text(
            &path,
            &(serde_json::to_string_pretty(&m).expect("manifest serializes") + "\n"),
        )
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn open_corpus(dir: &Path) -> Result<Corpus> {
    load_corpus(dir.join(ITEMS_FILE), dir.join(SETS_FILE))
}

fn load_dataset(
    corpus: &Corpus,
    dir: &Path,
    labeled: Option<&Path>,
    test_fraction: f64,
) -> Result<LabeledSetDataset> {
    let path = labeled.map_or_else(|| dir.join(LABELED_SETS_FILE), Path::to_path_buf);
    Ok(LabeledSetDataset {
        sets: load_labeled_sets(&path, corpus)?,
        test_fraction,
    })
}

fn image_shape(images: &[crate::tensor::Tensor]) -> Result<[usize; 3]> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidConfig("corpus has no items".into()))?;
    let s = first.shape();
    Ok([s[0], s[1], s[2]])
}

fn json(value: &impl Serialize) -> String {
    serde_json::to_string_pretty(value).expect("report serializes") + "\n"
}

fn gen_corpus(run: &Run, a: &GenCorpusArgs) -> Result<()> {
    let weights: [f64; 3] = a
        .set_size_weights
        .as_slice()
        .try_into()
        .map_err(|_| Error::InvalidConfig("--set-size-weights takes three values".into()))?;
    let spec = SyntheticSpec {
        n_styles: a.styles,
        n_items_per_category_per_style: a.items_per_style,
        categories: a.categories.clone(),
        image_shape: [3, a.image_size, a.image_size],
        palette_size: a.palette,
        patterns_per_style: a.patterns,
        n_sets: a.sets,
        set_size_weights: weights,
        n_labeled_sets: a.labeled_sets,
        reuse_skew: a.reuse_skew,
        seed: a.seed,
    };
    spec.validate()?;
    create_dir(&a.out)?;
    let generated = gen_synthetic(&spec, &a.out)?;
    let mut outputs: Vec<(&str, PathBuf)> = [
        ("items", ITEMS_FILE),
        ("sets", SETS_FILE),
        ("factors", FACTORS_FILE),
        ("labeled_sets", LABELED_SETS_FILE),
    ]
    .into_iter()
    .map(|(k, f)| (k, a.out.join(f)))
    .collect();
    if a.questions > 0 {
        match generate_suite(
            &generated.corpus,
            &generated.factors,
            a.analogy_factor,
            a.questions,
            a.seed,
        ) {
            Ok(suite) => {
                suite.write_json(&a.out.join(SUITE_FILE))?;
                outputs.push(("analogy_suite", a.out.join(SUITE_FILE)));
            }
            Err(e) => eprintln!("note: no analogy suite written: {e}"),
        }
    }
    let outputs: Vec<(&str, &Path)> = outputs.iter().map(|(k, p)| (*k, p.as_path())).collect();
    run.manifest(
        "gen-corpus",
        &a.out,
        &serde_json::json!({ "flags": a, "spec": spec }),
        Some(a.seed),
        &[],
        &outputs,
    )?;
    eprintln!(
        "wrote {} items, {} sets and {} labeled sets to {}",
        generated.corpus.items().len(),
        generated.corpus.sets().len(),
        generated.labeled.len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_train(run: &Run, a: &TrainArgs) -> Result<()> {
    let corpus = open_corpus(&a.corpus)?;
    let images = corpus.load_images()?;
    let state = match &a.resume {
        Some(path) => {
            let mut ck = load_checkpoint(path)?;
            ck.config.epochs = a.train.epochs;
            ck
        }
        None => Checkpoint::init(&a.train.config(image_shape(&images)?))?,
    };
    if state.config.encoder.input_shape != image_shape(&images)? {
        return Err(Error::InvalidConfig(format!(
            "checkpoint expects images of shape {:?}",
            state.config.encoder.input_shape
        )));
    }
    corpus.check_pool(state.config.k)?;
    create_dir(&a.out)?;
    let checkpoint_dir = a.out.join("checkpoints");
    if state.config.checkpoint_interval > 0 {
        create_dir(&checkpoint_dir)?;
    }
    let mut report = |epoch: u64, loss: f64| eprintln!("epoch {} mean loss {loss:.6}", epoch + 1);
    let options = TrainOptions {
        checkpoint_dir: Some(checkpoint_dir),
        max_steps: None,
        on_epoch: Some(&mut report),
    };
    let config = state.config.clone();
    let (ck, log) = resume(&corpus, &images, state, options)?;
    let ck_path = a.out.join(CHECKPOINT_FILE);
    save_checkpoint(&ck, &ck_path)?;
    let loss_path = a.out.join(LOSS_FILE);
    let mut outputs = vec![("checkpoint", ck_path.as_path())];
    if !log.is_empty() {
        log.write_csv(&loss_path)?;
        outputs.push(("loss", loss_path.as_path()));
    }
    let mut inputs = vec![("corpus", a.corpus.as_path())];
    if let Some(r) = &a.resume {
        inputs.push(("resume", r.as_path()));
    }
    run.manifest(
        "train",
        &a.out,
        &serde_json::json!({ "flags": a, "train": config }),
        Some(config.seed),
        &inputs,
        &outputs,
    )?;
    eprintln!(
        "trained {} steps; checkpoint at {}",
        ck.step,
        ck_path.display()
    );
    Ok(())
}

fn cmd_embed(run: &Run, a: &EmbedArgs) -> Result<()> {
    let corpus = open_corpus(&a.corpus)?;
    let matrix = match (&a.checkpoint, a.oracle) {
        (_, Some(kind)) => {
            let factors = read_factors(a.corpus.join(FACTORS_FILE))?;
            oracle_embeddings(&corpus, &factors, kind)?
        }
        (Some(path), None) => {
            let ck = load_checkpoint(path)?;
            let images = corpus.load_images()?;
            extract_from_images(&ck.input, &corpus, &images, a.batch_size)?
        }
        (None, None) => return Err(Error::InvalidConfig("give --checkpoint or --oracle".into())),
    };
    let dir = parent_dir(&a.out);
    create_dir(&dir)?;
    matrix.write_tsv(&a.out)?;
    let mut inputs = vec![("corpus", a.corpus.as_path())];
    if let Some(c) = &a.checkpoint {
        inputs.push(("checkpoint", c.as_path()));
    }
    run.manifest(
        "embed",
        &dir,
        a,
        None,
        &inputs,
        &[("matrix", a.out.as_path())],
    )
}

fn cmd_query(run: &Run, a: &QueryArgs) -> Result<()> {
    let matrix = EmbeddingMatrix::read_tsv(&a.matrix, a.metric)?;
    let query = match (&a.item, &a.vector) {
        (Some(id), _) => matrix.vector(id)?.to_vec(),
        (None, Some(v)) => v.clone(),
        (None, None) => return Err(Error::InvalidConfig("give --item or --vector".into())),
    };
    let exclude: HashSet<String> = a.exclude.iter().cloned().collect();
    let ranked = nearest(&query, &matrix, a.top, &exclude, a.category.as_deref())?;
    let mut out = String::from("rank\titem_id\tcategory\tscore\n");
    for (i, s) in ranked.iter().enumerate() {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            i + 1,
            s.id,
            s.category,
            s.score
        ));
    }
    print!("{out}");
    let dir = match &a.out {
        Some(path) => {
            let dir = parent_dir(path);
            create_dir(&dir)?;
            write_text(path, &out)?;
            dir
        }
        None => parent_dir(&a.matrix),
    };
    let outputs: Vec<(&str, &Path)> = a.out.iter().map(|p| ("ranking", p.as_path())).collect();
    run.manifest(
        "query",
        &dir,
        a,
        None,
        &[("matrix", a.matrix.as_path())],
        &outputs,
    )
}

fn cmd_analogy(run: &Run, a: &AnalogyArgs) -> Result<()> {
    let suite = AnalogySuite::read_json(&a.suite)?;
    let matrix = EmbeddingMatrix::read_tsv(&a.matrix, a.metric)?;
    let factor_path = a
        .factors
        .clone()
        .unwrap_or_else(|| parent_dir(&a.suite).join(FACTORS_FILE));
    let factors = if factor_path.exists() {
        Some(read_factors(&factor_path)?)
    } else {
        None
    };
    let report = run_analogy_suite(&suite, &matrix, factors.as_ref())?;
    let dir = parent_dir(&a.report);
    create_dir(&dir)?;
    write_text(&a.report, &json(&report))?;
    match report.accuracy {
        Some(acc) => eprintln!("accuracy {acc:.4} over {} questions", report.n_questions),
        None => eprintln!("empty suite"),
    }
    let mut inputs = vec![("suite", a.suite.as_path()), ("matrix", a.matrix.as_path())];
    if factors.is_some() {
        inputs.push(("factors", factor_path.as_path()));
    }
    run.manifest(
        "analogy",
        &dir,
        a,
        None,
        &inputs,
        &[("report", a.report.as_path())],
    )
}

#[derive(Serialize)]
struct ClassifyReport {
    accuracy: f64,
    n_train: usize,
    n_test: usize,
    classes: Vec<String>,
    shuffled_labels: bool,
}

fn cmd_classify(run: &Run, a: &ClassifyArgs) -> Result<()> {
    let corpus = open_corpus(&a.corpus)?;
    let matrix = EmbeddingMatrix::read_tsv(&a.matrix, Metric::Cosine)?;
    let mut dataset = load_dataset(
        &corpus,
        &a.corpus,
        a.labeled.as_deref(),
        a.mlp.test_fraction,
    )?;
    if a.shuffle_labels {
        dataset = shuffled_labels(&dataset, a.seed);
    }
    let (train_idx, test_idx) = dataset.split(a.seed)?;
    let (clf, accuracy) = train_classifier(&dataset, &matrix, &a.mlp.config(), a.seed)?;
    let report = ClassifyReport {
        accuracy,
        n_train: train_idx.len(),
        n_test: test_idx.len(),
        classes: clf.classes,
        shuffled_labels: a.shuffle_labels,
    };
    let dir = parent_dir(&a.report);
    create_dir(&dir)?;
    write_text(&a.report, &json(&report))?;
    eprintln!("held-out accuracy {accuracy:.4}");
    run.manifest(
        "classify",
        &dir,
        a,
        Some(a.seed),
        &[
            ("matrix", a.matrix.as_path()),
            ("corpus", a.corpus.as_path()),
        ],
        &[("report", a.report.as_path())],
    )
}

fn cmd_ablate(run: &Run, a: &AblateArgs) -> Result<()> {
    let corpus = open_corpus(&a.corpus)?;
    let images = corpus.load_images()?;
    let dataset = load_dataset(
        &corpus,
        &a.corpus,
        a.labeled.as_deref(),
        a.mlp.test_fraction,
    )?;
    let config = a.train.config(image_shape(&images)?);
    let report = compare_set_vs_pairwise(&corpus, &images, &dataset, &config, &a.mlp.config())?;
    let dir = parent_dir(&a.report);
    create_dir(&dir)?;
    write_text(&a.report, &json(&report))?;
    eprintln!(
        "set {:.4} pairwise {:.4} delta {:.4}",
        report.set_acc, report.pair_acc, report.delta
    );
    run.manifest(
        "ablate",
        &dir,
        &serde_json::json!({ "flags": a, "train": config }),
        Some(config.seed),
        &[("corpus", a.corpus.as_path())],
        &[("report", a.report.as_path())],
    )
}

fn cmd_project(run: &Run, a: &ProjectArgs) -> Result<()> {
    let matrix = EmbeddingMatrix::read_tsv(&a.matrix, Metric::Cosine)?;
    let coords = project_2d(&matrix)?;
    let dir = parent_dir(&a.out);
    create_dir(&dir)?;
    write_text(&a.out, &projection_tsv(&matrix, &coords))?;
    run.manifest(
        "project",
        &dir,
        a,
        None,
        &[("matrix", a.matrix.as_path())],
        &[("projection", a.out.as_path())],
    )
}

fn cmd_replay(a: &ReplayArgs) -> Result<i32> {
    let text = fs::read_to_string(&a.manifest).map_err(|e| Error::io(&a.manifest, e))?;
    let m: RunManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: a.manifest.clone(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    if m.argv.first().map(String::as_str) == Some("replay") {
        return Err(Error::InvalidConfig(
            "a replay manifest cannot be replayed".into(),
        ));
    }
    Ok(run_from(
        std::iter::once("setvec".to_string()).chain(m.argv),
    ))
}

fn dispatch(cli: &Cli, argv: &[String]) -> Result<i32> {
    let run = Run { argv };
    match &cli.command {
        Command::GenCorpus(a) => gen_corpus(&run, a)?,
        Command::Train(a) => cmd_train(&run, a)?,
        Command::Embed(a) => cmd_embed(&run, a)?,
        Command::Query(a) => cmd_query(&run, a)?,
        Command::Analogy(a) => cmd_analogy(&run, a)?,
        Command::Classify(a) => cmd_classify(&run, a)?,
        Command::Ablate(a) => cmd_ablate(&run, a)?,
        Command::Project(a) => cmd_project(&run, a)?,
        Command::Replay(a) => return cmd_replay(a),
    }
    Ok(EXIT_OK)
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                EXIT_VALIDATION
            } else {
                EXIT_OK
            };
        }
    };
    if cli.threads == 0 {
        eprintln!("error: --threads must be at least 1");
        return EXIT_VALIDATION;
    }
    // A pool may already exist when commands run in-process; the first one stays.
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global();
    let argv: Vec<String> = args
        .iter()
        .skip(1)
        .map(|a| a.to_string_lossy().into_owned())
        .collect();
    match dispatch(&cli, &argv) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                EXIT_VALIDATION
            } else {
                EXIT_RUNTIME
            }
        }
    }
}
