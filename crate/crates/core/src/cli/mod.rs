//! The `xmic` command-line tool.
//!
//! Every verb resolves a [`RunConfig`] (defaults, then the `--config` file,
//! then flags), prints it to stderr as one JSON line, and runs. Exit codes:
//! 0 on success, 1 for invalid invocations or configurations, 2 for
//! failures while running.

mod config;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use crate::adapters::{save_checkpoint, load_checkpoint, Model, NormFlags, SpatialMode, Strategy, TextSide};
use crate::data::{
    attach_labels, partition_shared_novel, read_manifest, read_store, write_atomic, write_store,
    ClassVocabulary, ClipSet, Partition, Task,
};
use crate::encoders::{
    synth_generate, synth_generate_domains, SyntheticDataset, TextClassifier, ToyTextEncoder, MANIFEST_FILE,
    STORE_FILE, TEXT_FILE, VOCAB_FILE,
};
use crate::error::{Result, XmicError};
use crate::eval::{activation_cost_profile, evaluate_cross_dataset, CostRecord, EvalOptions, EvalReport, ReportFormat};
use crate::gradcheck;
use crate::training::{train_run, EvalHook};

pub use config::{DataConfig, EvalSection, ProfileConfig, RunConfig, SynthConfig};

/// Held-out clips written by `gen-synth` next to the training store.
pub const TEST_STORE_FILE: &str = "test.bin";
/// Config written by `gen-synth`, ready for `train --config`.
pub const TRAIN_CONFIG_FILE: &str = "train.json";

#[derive(Debug, Parser)]
#[command(name = "xmic", version, about = "Cross-modal instance conditioning on frozen embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a seeded synthetic dataset (one or two domains).
    GenSynth(GenSynthArgs),
    /// Validate stores, manifest and vocabulary and summarize them.
    Ingest(IngestArgs),
    /// Train a model and write its checkpoint, metrics and final report.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or an untrained model) within and across datasets.
    Eval(EvalArgs),
    /// Train and evaluate one variant per setting of an ablation axis.
    Ablate(AblateArgs),
    /// Count shared and novel classes between two vocabularies.
    Partition(PartitionArgs),
    /// Run the finite-difference gradient check suite.
    Gradcheck(GradcheckArgs),
    /// Count text-side activations per strategy and batch size.
    Profile(ProfileArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct DataArgs {
    #[arg(long)]
    store_v: Option<PathBuf>,
    /// Store of the second visual encoder; defaults to --store-v.
    #[arg(long)]
    store_v2: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long, value_parser = parse_task)]
    task: Option<Task>,
    #[arg(long)]
    eval_store: Option<PathBuf>,
    #[arg(long)]
    eval_manifest: Option<PathBuf>,
    #[arg(long)]
    eval_vocab: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ModelArgs {
    /// Components joined by '+', e.g. xmic, early-uni+xmic, xmic+tt+vv, zero-shot.
    #[arg(long, value_parser = parse_strategy)]
    strategy: Option<Strategy>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Comma list of n1,n2,n3 or "none".
    #[arg(long, value_parser = parse_norm)]
    norm: Option<NormFlags>,
}

#[derive(Debug, Args)]
struct TrainFlags {
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
}

#[derive(Debug, Args)]
struct GenSynthArgs {
    #[command(flatten)]
    common: Common,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct IngestArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    store_v: Option<PathBuf>,
    #[arg(long)]
    store_v2: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long, value_parser = parse_task)]
    task: Option<Task>,
    /// Also write the summary as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    train: TrainFlags,
    /// Directory for metrics.jsonl and report.json (and the checkpoint
    /// unless --ckpt is given).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long, value_parser = parse_format)]
    format: Option<ReportFormat>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Frames sampled per clip.
    #[arg(long)]
    frames: Option<usize>,
    /// Checkpoint to evaluate; without it an untrained model is built from
    /// the configuration.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Report file.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = parse_format)]
    format: Option<ReportFormat>,
}

#[derive(Debug, Args)]
struct AblateArgs {
    /// norm, alpha, frames, spatial, compose or temporal.
    kind: String,
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    train: TrainFlags,
    /// Report file.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = parse_format)]
    format: Option<ReportFormat>,
}

#[derive(Debug, Args)]
struct PartitionArgs {
    #[arg(long)]
    vocab_a: PathBuf,
    #[arg(long)]
    vocab_b: PathBuf,
    #[arg(long, value_parser = parse_task, default_value = "noun")]
    task: Task,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 11)]
    seed: u64,
}

#[derive(Debug, Args)]
struct ProfileArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Profile one strategy instead of the default set.
    #[arg(long, value_parser = parse_strategy)]
    strategy: Option<Strategy>,
    #[arg(long)]
    frames: Option<usize>,
    /// Profile one batch size instead of the configured list.
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = parse_format)]
    format: Option<ReportFormat>,
}

fn parse_task(s: &str) -> std::result::Result<Task, String> {
    s.parse().map_err(|e: XmicError| e.to_string())
}

fn parse_strategy(s: &str) -> std::result::Result<Strategy, String> {
    let st: Strategy = s.parse().map_err(|e: XmicError| e.to_string())?;
    st.validate().map_err(|e| e.to_string())?;
    Ok(st)
}

fn parse_norm(s: &str) -> std::result::Result<NormFlags, String> {
    s.parse().map_err(|e: XmicError| e.to_string())
}

fn parse_format(s: &str) -> std::result::Result<ReportFormat, String> {
    s.parse().map_err(|e: XmicError| e.to_string())
}

/// Exit code for a library error: configuration problems are validation
/// failures, everything else happened while running.
pub fn exit_code(e: &XmicError) -> i32 {
    match e {
        XmicError::Config(_)
        | XmicError::BadSpec(_)
        | XmicError::UnknownKind(_)
        | XmicError::IncompatibleComposition(_) => 1,
        _ => 2,
    }
}

/// Parses `argv` (program name first), runs the verb and returns the exit
/// code. Usage errors print the verb's help to stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            let _ = e.print();
            let mut cmd = Cli::command();
            let verb = argv.get(1).and_then(|v| v.to_str()).unwrap_or_default();
            let help = match cmd.find_subcommand_mut(verb) {
                Some(sub) => sub.render_help(),
                None => cmd.render_help(),
            };
            eprintln!("\n{help}");
            return 1;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenSynth(a) => gen_synth(a),
        Command::Ingest(a) => ingest(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Partition(a) => partition(a),
        Command::Gradcheck(a) => run_gradcheck(a),
        Command::Profile(a) => profile(a),
    }
}

fn print_resolved(value: &impl Serialize) {
    let line = serde_json::to_string(value).expect("config serializes");
    eprintln!("resolved config: {line}");
}

fn base_config(path: Option<&Path>) -> Result<RunConfig> {
    path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = base_config(self.config.as_deref())?;
        if let Some(s) = self.seed {
            cfg.model.seed = s;
            cfg.train.seed = s;
            cfg.synth.seed = s;
        }
        Ok(cfg)
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn set_opt<T>(slot: &mut Option<T>, v: Option<T>) {
    if v.is_some() {
        *slot = v;
    }
}

impl DataArgs {
    fn apply(self, cfg: &mut RunConfig) {
        let d = &mut cfg.data;
        set_opt(&mut d.store_v, self.store_v);
        set_opt(&mut d.store_v2, self.store_v2);
        set_opt(&mut d.manifest, self.manifest);
        set_opt(&mut d.vocab, self.vocab);
        set_opt(&mut d.eval_store, self.eval_store);
        set_opt(&mut d.eval_manifest, self.eval_manifest);
        set_opt(&mut d.eval_vocab, self.eval_vocab);
        set(&mut cfg.train.task, self.task);
    }
}

impl ModelArgs {
    fn is_empty(&self) -> bool {
        self.strategy.is_none() && self.alpha.is_none() && self.norm.is_none()
    }

    fn apply(self, cfg: &mut RunConfig) {
        set(&mut cfg.model.strategy, self.strategy);
        set(&mut cfg.model.alpha, self.alpha);
        set(&mut cfg.model.norm, self.norm);
    }
}

impl TrainFlags {
    fn apply(self, cfg: &mut RunConfig) {
        let t = &mut cfg.train;
        set(&mut t.frames, self.frames);
        set(&mut t.epochs, self.epochs);
        set(&mut t.lr, self.lr);
        set(&mut t.batch_size, self.batch);
        set(&mut t.temperature, self.temperature);
    }
}

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| XmicError::Config(format!("missing {what}")))
}

/// Reads a store, labels it from `manifest` and pairs it with an optional
/// second-encoder store.
pub fn load_clip_set(
    store: &Path,
    store2: Option<&Path>,
    manifest: &Path,
    vocab: &ClassVocabulary,
) -> Result<ClipSet> {
    let entries = read_manifest(manifest)?;
    let mut v = read_store(store)?;
    attach_labels(&mut v, &entries)?;
    let v2 = store2.map(read_store).transpose()?;
    ClipSet::new(v, v2, vocab)
}

/// Frozen class-text embeddings: read from `text` when given, otherwise
/// embedded by the toy text encoder of `model`.
pub fn load_text(text: Option<&Path>, vocab: &ClassVocabulary, model: &crate::adapters::ModelConfig) -> Result<TextClassifier> {
    match text {
        Some(p) => TextClassifier::read(p, vocab.task())?.aligned_to(vocab),
        None => ToyTextEncoder::new(model.dim, model.dim, model.text_context, model.text_encoder_seed)?
            .classifier(vocab),
    }
}

/// Everything a training or evaluation run reads from disk.
pub struct Workspace {
    pub train: ClipSet,
    pub test: Option<ClipSet>,
    pub text: TextClassifier,
    pub cross: Option<(ClipSet, TextClassifier)>,
    pub partition: Option<Partition>,
}

impl Workspace {
    pub fn load(cfg: &RunConfig, need_train: bool) -> Result<Self> {
        let d = &cfg.data;
        let task = cfg.train.task;
        let vocab = ClassVocabulary::read(required(&d.vocab, "--vocab")?, task)?;
        let manifest = required(&d.manifest, "--manifest")?;
        let text = load_text(d.text.as_deref(), &vocab, &cfg.model)?;
        let test = d
            .test_store
            .as_deref()
            .map(|s| {
                let m = d.test_manifest.as_deref().unwrap_or(manifest);
                load_clip_set(s, d.test_store_v2.as_deref(), m, &vocab)
            })
            .transpose()?;
        let train = if need_train || test.is_none() {
            load_clip_set(required(&d.store_v, "--store-v")?, d.store_v2.as_deref(), manifest, &vocab)?
        } else {
            test.clone().expect("checked above")
        };
        let (cross, partition) = match &d.eval_store {
            None => (None, None),
            Some(es) => {
                let evocab = ClassVocabulary::read(required(&d.eval_vocab, "--eval-vocab")?, task)?;
                let eset = load_clip_set(
                    es,
                    d.eval_store_v2.as_deref(),
                    required(&d.eval_manifest, "--eval-manifest")?,
                    &evocab,
                )?;
                let etext = load_text(d.eval_text.as_deref(), &evocab, &cfg.model)?;
                let partition = partition_shared_novel(&vocab, &evocab)?;
                (Some((eset, etext)), Some(partition))
            }
        };
        for (name, set) in [("training", Some(&train)), ("test", test.as_ref()), ("evaluation", cross.as_ref().map(|c| &c.0))] {
            if let Some(s) = set {
                if s.dim() != cfg.model.dim {
                    return Err(XmicError::DimMismatch(format!(
                        "{name} clips have D={}, model is configured for D={}",
                        s.dim(),
                        cfg.model.dim
                    )));
                }
            }
        }
        Ok(Self {
            train,
            test,
            text,
            cross,
            partition,
        })
    }

    fn eval_set(&self) -> &ClipSet {
        self.test.as_ref().unwrap_or(&self.train)
    }

    /// Evaluates `model` within the held-out (or training) clips and across
    /// the evaluation dataset when one is configured.
    pub fn evaluate(&self, model: &Model, options: &EvalOptions) -> Result<EvalReport> {
        let enc = model.config.text_encoder()?;
        let within = TextSide::new(self.text.clone(), enc.clone())?;
        let cross = self
            .cross
            .as_ref()
            .map(|(s, t)| TextSide::new(t.clone(), enc.clone()).map(|t| (s, t)))
            .transpose()?;
        evaluate_cross_dataset(
            model,
            (self.eval_set(), &within),
            cross.as_ref().map(|(s, t)| (*s, t)),
            self.partition.as_ref(),
            options,
        )
    }

    /// Trains a fresh model from `cfg`, logging one evaluation per epoch.
    pub fn train(&self, cfg: &RunConfig) -> Result<crate::training::TrainOutcome> {
        let model = Model::new(cfg.model.clone())?;
        let enc = model.config.text_encoder()?;
        let text = TextSide::new(self.text.clone(), enc.clone())?;
        let within = TextSide::new(self.text.clone(), enc.clone())?;
        let cross = self
            .cross
            .as_ref()
            .map(|(s, t)| TextSide::new(t.clone(), enc.clone()).map(|t| (s, t)))
            .transpose()?;
        let hook = EvalHook {
            within: (self.eval_set(), &within),
            cross: cross.as_ref().map(|(s, t)| (*s, t)),
            partition: self.partition.as_ref(),
            options: eval_options(cfg),
        };
        train_run(model, &text, &self.train, &cfg.train, Some(&hook))
    }
}

fn eval_options(cfg: &RunConfig) -> EvalOptions {
    EvalOptions {
        frames: cfg.train.eval_frames(),
        restrict_rows: cfg.eval.restrict_rows,
    }
}

fn render(rows: &[(String, EvalReport)], format: ReportFormat) -> Result<String> {
    Ok(match format {
        ReportFormat::Table => EvalReport::table(rows),
        ReportFormat::Csv => EvalReport::csv(rows),
        ReportFormat::Json => {
            if let [(_, r)] = rows {
                r.to_json()?
            } else {
                let v: Vec<_> = rows.iter().map(|(l, r)| json!({"variant": l, "report": r})).collect();
                serde_json::to_string_pretty(&v)? + "\n"
            }
        }
    })
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    let mut stdout = std::io::stdout().lock();
    stdout
        .write_all(text.as_bytes())
        .map_err(|e| XmicError::io("<stdout>", e))?;
    if let Some(p) = out {
        write_atomic(p, text.as_bytes())?;
    }
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| XmicError::io(dir, e))
}

fn rel(p: &str) -> Option<PathBuf> {
    Some(PathBuf::from(p))
}

/// Writes `ds` with its first `train` clips of every class in the main
/// store and the rest in [`TEST_STORE_FILE`].
fn write_split(ds: &SyntheticDataset, dir: &Path, train: usize) -> Result<bool> {
    let per = ds.spec.clips_per_class;
    if train >= per {
        ds.write_to(dir)?;
        return Ok(false);
    }
    let (mut head, mut tail) = (Vec::new(), Vec::new());
    for (i, r) in ds.records.iter().enumerate() {
        let side = if i % per < train { &mut head } else { &mut tail };
        side.push(r.clone());
    }
    let mut kept = ds.clone();
    kept.records = head;
    kept.write_to(dir)?;
    write_store(&dir.join(TEST_STORE_FILE), &tail)?;
    Ok(true)
}

fn gen_synth(a: GenSynthArgs) -> Result<()> {
    let mut cfg = a.common.resolve()?;
    print_resolved(&cfg);
    let s = cfg.synth.clone();
    create_dir(&a.out)?;
    let mut summary = String::new();
    let data = match s.shared_classes {
        None => {
            let ds = synth_generate(&s.spec_a())?;
            let split = write_split(&ds, &a.out, s.clips_per_class)?;
            let _ = writeln!(summary, "wrote {} clips of {} classes to {}", ds.records.len(), s.classes, a.out.display());
            DataConfig {
                store_v: rel(STORE_FILE),
                manifest: rel(MANIFEST_FILE),
                vocab: rel(VOCAB_FILE),
                text: rel(TEXT_FILE),
                test_store: split.then(|| PathBuf::from(TEST_STORE_FILE)),
                ..DataConfig::default()
            }
        }
        Some(shared) => {
            let (da, db) = synth_generate_domains(&s.spec_a(), &s.spec_b(), shared)?;
            let split = write_split(&da, &a.out.join("a"), s.clips_per_class)?;
            db.write_to(&a.out.join("b"))?;
            let _ = writeln!(
                summary,
                "wrote domains a ({} classes) and b ({} classes, {shared} shared) to {}",
                da.spec.classes,
                db.spec.classes,
                a.out.display()
            );
            DataConfig {
                store_v: rel("a/store.bin"),
                manifest: rel("a/manifest.jsonl"),
                vocab: rel("a/vocab.txt"),
                text: rel("a/text.bin"),
                test_store: split.then(|| PathBuf::from("a").join(TEST_STORE_FILE)),
                eval_store: rel("b/store.bin"),
                eval_manifest: rel("b/manifest.jsonl"),
                eval_vocab: rel("b/vocab.txt"),
                eval_text: rel("b/text.bin"),
                ..DataConfig::default()
            }
        }
    };
    cfg.data = data;
    cfg.model.dim = s.dim;
    cfg.out = None;
    cfg.ckpt = None;
    let mut json = serde_json::to_vec_pretty(&cfg)?;
    json.push(b'\n');
    write_atomic(&a.out.join(TRAIN_CONFIG_FILE), &json)?;
    emit(&summary, None)
}

#[derive(Serialize)]
struct IngestSummary {
    clips: usize,
    dim: usize,
    frames: Vec<usize>,
    classes: usize,
    task: String,
    second_store: bool,
    with_hands: usize,
}

fn ingest(a: IngestArgs) -> Result<()> {
    let mut cfg = base_config(a.config.as_deref())?;
    set_opt(&mut cfg.data.store_v, a.store_v);
    set_opt(&mut cfg.data.store_v2, a.store_v2);
    set_opt(&mut cfg.data.manifest, a.manifest);
    set_opt(&mut cfg.data.vocab, a.vocab);
    set(&mut cfg.train.task, a.task);
    print_resolved(&cfg);
    let d = &cfg.data;
    let vocab = ClassVocabulary::read(required(&d.vocab, "--vocab")?, cfg.train.task)?;
    let set = load_clip_set(
        required(&d.store_v, "--store-v")?,
        d.store_v2.as_deref(),
        required(&d.manifest, "--manifest")?,
        &vocab,
    )?;
    let mut frames: Vec<usize> = (0..set.len()).map(|i| set.record(i).frames()).collect();
    frames.sort_unstable();
    frames.dedup();
    let summary = IngestSummary {
        clips: set.len(),
        dim: set.dim(),
        frames,
        classes: vocab.len(),
        task: cfg.train.task.to_string(),
        second_store: d.store_v2.is_some(),
        with_hands: (0..set.len()).filter(|&i| set.second(i).hand.is_some()).count(),
    };
    let text = serde_json::to_string_pretty(&summary)? + "\n";
    emit(&text, a.out.as_deref())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = a.common.resolve()?;
    a.data.apply(&mut cfg);
    a.model.apply(&mut cfg);
    a.train.apply(&mut cfg);
    set_opt(&mut cfg.out, a.out);
    set_opt(&mut cfg.ckpt, a.ckpt);
    print_resolved(&cfg);
    cfg.train.validate()?;
    let ckpt = match (&cfg.ckpt, &cfg.out) {
        (Some(c), _) => c.clone(),
        (None, Some(o)) => o.join("model.ckpt"),
        (None, None) => return Err(XmicError::Config("train needs --ckpt or --out".into())),
    };
    let ws = Workspace::load(&cfg, true)?;
    let outcome = ws.train(&cfg)?;
    let report = ws.evaluate(&outcome.model, &eval_options(&cfg))?;
    if let Some(o) = &cfg.out {
        create_dir(o)?;
        write_atomic(&o.join("metrics.jsonl"), outcome.metrics_jsonl()?.as_bytes())?;
        write_atomic(&o.join("report.json"), report.to_json()?.as_bytes())?;
    }
    if let Some(p) = ckpt.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(p)?;
    }
    save_checkpoint(&ckpt, &outcome.model)?;
    let label = cfg.model.strategy.to_string();
    emit(&render(&[(label, report)], a.format.unwrap_or(ReportFormat::Table))?, None)
}

fn eval(a: EvalArgs) -> Result<()> {
    let mut cfg = a.common.resolve()?;
    let model_flags = !a.model.is_empty();
    a.data.apply(&mut cfg);
    a.model.apply(&mut cfg);
    if let Some(n) = a.frames {
        cfg.train.eval_frames = Some(n);
    }
    set_opt(&mut cfg.ckpt, a.ckpt);
    let model = match &cfg.ckpt {
        Some(p) => {
            if model_flags {
                return Err(XmicError::Config(
                    "--strategy, --alpha and --norm cannot change a checkpoint".into(),
                ));
            }
            let m = load_checkpoint(p)?;
            cfg.model = m.config.clone();
            m
        }
        None => Model::new(cfg.model.clone())?,
    };
    print_resolved(&cfg);
    cfg.train.validate()?;
    let ws = Workspace::load(&cfg, false)?;
    let report = ws.evaluate(&model, &eval_options(&cfg))?;
    let label = cfg.model.strategy.to_string();
    emit(&render(&[(label, report)], a.format.unwrap_or(ReportFormat::Json))?, a.out.as_deref())
}

/// Ablation axes and their variants, labelled as in the report rows.
pub fn ablation_variants(kind: &str, base: &RunConfig) -> Result<Vec<(String, RunConfig)>> {
    let with = |label: String, f: &dyn Fn(&mut RunConfig)| {
        let mut c = base.clone();
        f(&mut c);
        (label, c)
    };
    let variants = match kind {
        "norm" => ["n1", "none", "n2,n3", "n1,n2,n3", "n1,n2", "n1,n3"]
            .iter()
            .map(|s| {
                let n: NormFlags = s.parse()?;
                Ok(with(n.to_string(), &|c| c.model.norm = n))
            })
            .collect::<Result<Vec<_>>>()?,
        "alpha" => [0.1, 0.5, 1.0, 2.0, 5.0]
            .iter()
            .map(|&x| with(format!("alpha={x}"), &|c| c.model.alpha = x))
            .collect(),
        "frames" => [2usize, 4, 8, 16, 32]
            .iter()
            .map(|&n| {
                with(format!("frames={n}"), &|c| {
                    c.train.frames = n;
                    c.train.eval_frames = Some(n);
                })
            })
            .collect(),
        "spatial" => [SpatialMode::Full, SpatialMode::Hand, SpatialMode::FullHand]
            .iter()
            .map(|&m| with(m.to_string(), &|c| c.model.spatial = m))
            .collect(),
        "compose" => ["early-uni+xmic", "early-cross+xmic", "xmic", "xmic+tt", "xmic+vv", "xmic+tt+vv"]
            .iter()
            .map(|s| {
                let st: Strategy = s.parse()?;
                Ok(with(st.to_string(), &|c| c.model.strategy = st.clone()))
            })
            .collect::<Result<Vec<_>>>()?,
        "temporal" => [true, false]
            .iter()
            .map(|&t| {
                let label = if t { "temporal-attention" } else { "mean-pool" };
                with(label.to_string(), &|c| c.model.temporal = t)
            })
            .collect(),
        other => return Err(XmicError::UnknownKind(other.to_string())),
    };
    Ok(variants)
}

fn ablate(a: AblateArgs) -> Result<()> {
    let mut cfg = a.common.resolve()?;
    a.data.apply(&mut cfg);
    a.model.apply(&mut cfg);
    a.train.apply(&mut cfg);
    let variants = ablation_variants(&a.kind, &cfg)?;
    print_resolved(&json!({"kind": a.kind, "base": cfg}));
    cfg.train.validate()?;
    let ws = Workspace::load(&cfg, true)?;
    let mut rows = Vec::with_capacity(variants.len());
    for (label, vc) in variants {
        eprintln!("ablate {}: {label}", a.kind);
        let outcome = ws.train(&vc)?;
        rows.push((label, ws.evaluate(&outcome.model, &eval_options(&vc))?));
    }
    emit(&render(&rows, a.format.unwrap_or(ReportFormat::Table))?, a.out.as_deref())
}

fn partition(a: PartitionArgs) -> Result<()> {
    print_resolved(&json!({"vocab_a": a.vocab_a, "vocab_b": a.vocab_b, "task": a.task}));
    let va = ClassVocabulary::read(&a.vocab_a, a.task)?;
    let vb = ClassVocabulary::read(&a.vocab_b, a.task)?;
    let (s, na, nb) = partition_shared_novel(&va, &vb)?.counts();
    emit(&format!("shared={s} novel_a={na} novel_b={nb}\n"), None)
}

fn run_gradcheck(a: GradcheckArgs) -> Result<()> {
    print_resolved(&json!({"seed": a.seed}));
    let mut out = String::new();
    let mut failed = 0;
    for (name, r) in gradcheck::suite(a.seed)? {
        let status = if r.passed() { "ok" } else { "FAIL" };
        failed += usize::from(!r.passed());
        let _ = writeln!(out, "{status:<4} {name:<28} checked={:<5} max_rel={:.3e}", r.checked, r.max_rel_error);
    }
    emit(&out, None)?;
    if failed > 0 {
        return Err(XmicError::CheckFailed(format!("{failed} gradient checks failed")));
    }
    Ok(())
}

/// Strategies profiled when `--strategy` is absent.
pub const PROFILE_STRATEGIES: [&str; 6] = ["zero-shot", "early-uni", "early-cross", "tt+vv", "xmic", "early-uni+xmic"];

fn profile(a: ProfileArgs) -> Result<()> {
    let mut cfg = base_config(a.config.as_deref())?;
    if let Some(b) = a.batch {
        cfg.profile.batches = vec![b];
    }
    set(&mut cfg.train.frames, a.frames);
    print_resolved(&json!({"profile": cfg.profile, "frames": cfg.train.frames, "strategy": a.strategy}));
    let strategies = match a.strategy {
        Some(s) => vec![s],
        None => PROFILE_STRATEGIES.iter().map(|s| s.parse()).collect::<Result<_>>()?,
    };
    let p = &cfg.profile;
    let mut records = Vec::new();
    for s in &strategies {
        for &b in &p.batches {
            records.push(activation_cost_profile(s, b, p.classes, p.prompt_len, p.dim, cfg.train.frames)?);
        }
    }
    let text = render_costs(&records, a.format.unwrap_or(ReportFormat::Table))?;
    emit(&text, a.out.as_deref())
}

fn render_costs(rows: &[CostRecord], format: ReportFormat) -> Result<String> {
    let cells = |r: &CostRecord| {
        [
            r.strategy.clone(),
            r.batch.to_string(),
            r.classes.to_string(),
            r.prompt_len.to_string(),
            r.dim.to_string(),
            r.frames.to_string(),
            r.encoder_passes.to_string(),
            r.encoder_activations.to_string(),
            r.conditioning_activations.to_string(),
        ]
    };
    const HEAD: [&str; 9] = ["strategy", "batch", "classes", "prompt_len", "dim", "frames", "encoder_passes", "encoder_activations", "conditioning_activations"];
    Ok(match format {
        ReportFormat::Json => serde_json::to_string_pretty(rows)? + "\n",
        ReportFormat::Csv => {
            let mut out = HEAD.join(",") + "\n";
            for r in rows {
                out += &(cells(r).join(",") + "\n");
            }
            out
        }
        ReportFormat::Table => {
            let mut out = String::new();
            let w = rows.iter().map(|r| r.strategy.len()).max().unwrap_or(0).max(HEAD[0].len());
            let _ = write!(out, "{:<w$}", HEAD[0]);
            for h in &HEAD[1..] {
                let _ = write!(out, " {h:>12}");
            }
            out.push('\n');
            for r in rows {
                let c = cells(r);
                let _ = write!(out, "{:<w$}", c[0]);
                for v in &c[1..] {
                    let _ = write!(out, " {v:>12}");
                }
                out.push('\n');
            }
            out
        }
    })
}
