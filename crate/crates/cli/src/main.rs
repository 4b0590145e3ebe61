//! `paraknow`: every pipeline stage as a standalone command over checkpoint files, plus
//! `run` for the whole pipeline. Verbosity is read from `PARAKNOW_LOG` (default `info`).

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use paraknow_core::checkpoint::{self, ContentKind};
use paraknow_core::extract::{build_extraction_plan, randomize_plan, ExtractionOptions, LayerStrategy, SubmatrixStrategy};
use paraknow_core::heatmap::export_heatmap;
use paraknow_core::inject::{build_injected_model, InitStrategy};
use paraknow_core::pipeline::{draw_seed_samples, load_config, run_stages, PipelineConfig, Stage};
use paraknow_core::sensitivity::{accumulate_sensitivity, layer_scores};
use paraknow_core::tinylm::{init_model, ModelConfig, RoleGroup};
use paraknow_core::train::{
    evaluate_exact_match, finetune, make_task, train_params, Hyperparams, MaskMode, TaskDataset, TaskSpec, TrainLog,
    VOCAB_SIZE,
};

#[derive(Parser)]
#[command(name = "paraknow", version, about = "Sensitivity-guided parametric knowledge transfer between tiny LMs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from scratch on a task (teacher, or a student warm-up).
    TrainTeacher(TrainTeacherArgs),
    /// Accumulate parameter sensitivity over k seed samples.
    Score(ScoreArgs),
    /// Map layers and select sub-matrices; writes an extraction plan.
    Extract(ExtractArgs),
    /// Factorize a plan into LoRA modules on a student.
    Inject(InjectArgs),
    /// Fine-tune the LoRA factors of an injected model.
    Finetune(FinetuneArgs),
    /// Greedy exact-match accuracy of a model or injected model.
    Eval(EvalArgs),
    /// Export the per-layer, per-role sensitivity heatmap as CSV.
    Heatmap(HeatmapArgs),
    /// Run the pipeline (or a contiguous range of its stages).
    Run(RunArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Mask {
    AnswerOnly,
    Full,
}

impl From<Mask> for MaskMode {
    fn from(m: Mask) -> Self {
        match m {
            Mask::AnswerOnly => MaskMode::AnswerOnly,
            Mask::Full => MaskMode::Full,
        }
    }
}

#[derive(Args)]
struct TaskArgs {
    /// modular_add:N, copy:L, reverse:L or sort_digits:L.
    #[arg(long, default_value = "modular_add:2")]
    task: TaskSpec,
    #[arg(long, default_value_t = 0)]
    task_seed: u64,
    #[arg(long, default_value_t = 5000)]
    n_train: usize,
    #[arg(long, default_value_t = 500)]
    n_eval: usize,
}

impl TaskArgs {
    fn dataset(&self) -> Result<TaskDataset> {
        Ok(make_task(self.task, self.n_train, self.n_eval, self.task_seed)?)
    }
}

/// Overrides on top of a command-specific base recipe.
#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Global gradient-norm ceiling.
    #[arg(long, conflicts_with = "no_clip")]
    clip: Option<f64>,
    #[arg(long)]
    no_clip: bool,
    #[arg(long, value_enum)]
    loss_mask: Option<Mask>,
    /// Batch-order seed.
    #[arg(long)]
    train_seed: Option<u64>,
}

impl TrainArgs {
    fn apply(&self, mut hp: Hyperparams) -> Hyperparams {
        hp.epochs = self.epochs.unwrap_or(hp.epochs);
        hp.batch_size = self.batch_size.unwrap_or(hp.batch_size);
        hp.learning_rate = self.lr.unwrap_or(hp.learning_rate);
        if self.no_clip {
            hp.clip_norm = None;
        } else if self.clip.is_some() {
            hp.clip_norm = self.clip;
        }
        hp.loss_mask = self.loss_mask.map_or(hp.loss_mask, Into::into);
        hp.seed = self.train_seed.unwrap_or(hp.seed);
        hp
    }
}

#[derive(Args)]
struct TrainTeacherArgs {
    #[arg(long, default_value_t = 4)]
    layers: usize,
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 128)]
    ffn: usize,
    #[arg(long, default_value_t = 16)]
    max_seq: usize,
    /// Weight-initialization seed.
    #[arg(long, default_value_t = 1)]
    model_seed: u64,
    #[command(flatten)]
    task: TaskArgs,
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long, short)]
    out: PathBuf,
    /// Per-step loss log (JSONL).
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    task: TaskArgs,
    #[arg(long, default_value_t = 32)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    sample_seed: u64,
    #[arg(long, value_enum, default_value = "full")]
    mask: Mask,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    teacher: PathBuf,
    #[arg(long)]
    sensitivity: PathBuf,
    /// Student checkpoint; only its configuration is used.
    #[arg(long)]
    student: PathBuf,
    /// sensitivity, top, last or random:SEED.
    #[arg(long, default_value = "sensitivity")]
    layer_strategy: LayerStrategy,
    #[arg(long, default_value = "contiguous")]
    submatrix_strategy: SubmatrixStrategy,
    #[arg(long, value_delimiter = ',', default_value = "embed,attn,ffn")]
    roles: Vec<RoleGroup>,
    #[arg(long, short)]
    out: PathBuf,
    /// Also write the plan's JSON sidecar.
    #[arg(long)]
    sidecar: Option<PathBuf>,
}

#[derive(Args)]
struct InjectArgs {
    #[arg(long)]
    student: PathBuf,
    #[arg(long)]
    plan: PathBuf,
    #[arg(long, default_value_t = 8)]
    rank: usize,
    /// paper_default, lora_residual, gaussian_zero:SEED or random_submatrix:SEED.
    #[arg(long, default_value = "paper_default")]
    init: InitStrategy,
    /// Needed by random_submatrix to re-draw the plan's sub-matrices.
    #[arg(long)]
    teacher: Option<PathBuf>,
    #[arg(long)]
    sensitivity: Option<PathBuf>,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    task: TaskArgs,
    /// Fine-tune on the first n train examples.
    #[arg(long, default_value_t = 1000)]
    n_finetune: usize,
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long, short)]
    out: PathBuf,
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    task: TaskArgs,
}

#[derive(Args)]
struct HeatmapArgs {
    #[arg(long)]
    sensitivity: PathBuf,
    /// Normalized CSV; raw sums go next to it as `<stem>.sums.csv`.
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// Pipeline configuration JSON; defaults to the reference configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long, default_value = "teacher")]
    from: Stage,
    #[arg(long, default_value = "report")]
    to: Stage,
    /// Re-seed fine-tuning and seeded baselines.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    task: Option<TaskSpec>,
    #[arg(long)]
    task_seed: Option<u64>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_finetune: Option<usize>,
    #[arg(long)]
    n_eval: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    seed_sample_seed: Option<u64>,
    #[arg(long, value_enum)]
    sensitivity_mask: Option<Mask>,
    #[arg(long)]
    layer_strategy: Option<LayerStrategy>,
    #[arg(long)]
    submatrix_strategy: Option<SubmatrixStrategy>,
    #[arg(long, value_delimiter = ',')]
    roles: Option<Vec<RoleGroup>>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    init: Option<InitStrategy>,
    /// Comparison arm; repeat for several. Replaces the configured baselines.
    #[arg(long = "baseline")]
    baselines: Vec<InitStrategy>,
    #[arg(long)]
    teacher_checkpoint: Option<PathBuf>,
    #[arg(long)]
    student_checkpoint: Option<PathBuf>,
    /// Fine-tuning overrides.
    #[command(flatten)]
    train: TrainArgs,
    /// Print the effective configuration and exit.
    #[arg(long)]
    print_config: bool,
}

impl RunArgs {
    fn config(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(p) => load_config(p)?,
            None => PipelineConfig::reference("paraknow-run"),
        };
        if let Some(s) = self.seed {
            cfg = cfg.with_seed(s);
        }
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = self.$field.clone() {
                    cfg.$field = v;
                }
            )*};
        }
        set!(output_dir, task, task_seed, n_train, n_finetune, n_eval, k, seed_sample_seed);
        set!(layer_strategy, submatrix_strategy, rank, init);
        if let Some(m) = self.sensitivity_mask {
            cfg.sensitivity_mask = m.into();
        }
        if let Some(r) = &self.roles {
            cfg.roles = r.iter().copied().collect();
        }
        if !self.baselines.is_empty() {
            cfg.baselines = self.baselines.clone();
        }
        if self.teacher_checkpoint.is_some() {
            cfg.teacher_checkpoint = self.teacher_checkpoint.clone();
        }
        if self.student_checkpoint.is_some() {
            cfg.student_checkpoint = self.student_checkpoint.clone();
        }
        cfg.finetune_hyperparams = self.train.apply(cfg.finetune_hyperparams.clone());
        Ok(cfg)
    }
}

fn write_log(path: Option<&Path>, log: &TrainLog) -> Result<()> {
    if let Some(p) = path {
        fs::write(p, log.to_jsonl()).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn print(value: serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(&value).expect("JSON values serialize"));
}

fn train_teacher(a: &TrainTeacherArgs) -> Result<()> {
    let cfg = ModelConfig {
        vocab_size: VOCAB_SIZE,
        max_seq_len: a.max_seq,
        num_layers: a.layers,
        hidden_dim: a.hidden,
        num_heads: a.heads,
        ffn_dim: a.ffn,
        seed: a.model_seed,
    };
    let base = PipelineConfig::reference("").teacher_hyperparams;
    let hp = a.train.apply(base);
    let data = a.task.dataset()?;
    let (model, log) = train_params(init_model(&cfg)?, &data, &hp)?;
    checkpoint::save_model(&model, &a.out)?;
    write_log(a.log.as_deref(), &log)?;
    let mut summary = log.summary();
    summary["accuracy"] = json!(evaluate_exact_match(&model, &data)?);
    print(summary);
    Ok(())
}

fn score(a: &ScoreArgs) -> Result<()> {
    let model = checkpoint::load_model(&a.model)?;
    let seeds = draw_seed_samples(&a.task.dataset()?, a.k, a.sample_seed, a.mask.into())?;
    let map = accumulate_sensitivity(&model, &seeds.samples)?;
    checkpoint::save_sensitivity(&map, &a.out)?;
    print(json!({ "seed_sample_ids": seeds.ids, "layer_scores": layer_scores(&map).0 }));
    Ok(())
}

fn extract(a: &ExtractArgs) -> Result<()> {
    let teacher = checkpoint::load_model(&a.teacher)?;
    let map = checkpoint::load_sensitivity(&a.sensitivity)?;
    let student = checkpoint::load_model(&a.student)?;
    let options = ExtractionOptions {
        layer_strategy: a.layer_strategy,
        submatrix_strategy: a.submatrix_strategy,
        roles: a.roles.iter().copied().collect::<BTreeSet<_>>(),
        seed_sample_ids: vec![],
    };
    let plan = build_extraction_plan(&teacher, &map, student.config(), &options)?;
    checkpoint::save_plan(&plan, &a.out)?;
    if let Some(p) = &a.sidecar {
        fs::write(p, serde_json::to_string_pretty(&plan.sidecar())?).with_context(|| format!("writing {}", p.display()))?;
    }
    print(json!({ "layer_mapping": plan.mapping.pairs, "matrices": plan.entries.len() }));
    Ok(())
}

fn inject(a: &InjectArgs) -> Result<()> {
    let student = checkpoint::load_model(&a.student)?;
    let mut plan = checkpoint::load_plan(&a.plan)?;
    if let InitStrategy::RandomSubmatrix { seed } = a.init {
        let (Some(t), Some(s)) = (&a.teacher, &a.sensitivity) else {
            bail!("random_submatrix needs --teacher and --sensitivity to re-draw sub-matrices");
        };
        plan = randomize_plan(&plan, &checkpoint::load_model(t)?, &checkpoint::load_sensitivity(s)?, seed)?;
    }
    let m = build_injected_model(&student, &plan, a.rank, a.init)?;
    checkpoint::save_injected(&m, &a.out)?;
    print(json!({ "strategy": a.init.to_string(), "trainable": m.num_trainable(), "modules": m.lora().len() }));
    Ok(())
}

fn finetune_cmd(a: &FinetuneArgs) -> Result<()> {
    let m = checkpoint::load_injected(&a.model)?;
    let mut data = a.task.dataset()?;
    data.train.truncate(a.n_finetune);
    let hp = a.train.apply(PipelineConfig::reference("").finetune_hyperparams);
    let (tuned, log) = finetune(m, &data, &hp)?;
    checkpoint::save_injected(&tuned, &a.out)?;
    write_log(a.log.as_deref(), &log)?;
    let mut summary = log.summary();
    summary["accuracy"] = json!(evaluate_exact_match(&tuned, &data)?);
    print(summary);
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let data = a.task.dataset()?;
    let container = checkpoint::read_file(&a.model)?;
    let kind = container.kind;
    let accuracy = match kind {
        ContentKind::Model => evaluate_exact_match(&checkpoint::model_from_container(container)?, &data)?,
        ContentKind::Injected => evaluate_exact_match(&checkpoint::injected_from_container(container)?, &data)?,
        other => bail!("{} holds a {other:?} container, not a model", a.model.display()),
    };
    print(json!({ "accuracy": accuracy, "n_eval": data.eval.len() }));
    Ok(())
}

fn heatmap(a: &HeatmapArgs) -> Result<()> {
    let (norm, sums) = export_heatmap(&checkpoint::load_sensitivity(&a.sensitivity)?, &a.out)?;
    print(json!({ "normalized": norm, "sums": sums }));
    Ok(())
}

fn run(a: &RunArgs) -> Result<()> {
    let cfg = a.config()?;
    if a.print_config {
        println!("{}", serde_json::to_string_pretty(&cfg)?);
        return Ok(());
    }
    if a.from > a.to {
        bail!("--from {} comes after --to {}", a.from, a.to);
    }
    match run_stages(&cfg, a.from, a.to)? {
        Some(report) => print(json!({
            "teacher_accuracy": report.teacher_accuracy,
            "student_base_accuracy": report.student_base_accuracy,
            "arms": report.arms.iter().map(|(k, v)| (k.clone(), v.accuracy)).collect::<std::collections::BTreeMap<_, _>>(),
            "accuracy_differences": report.accuracy_differences,
            "report": cfg.output_dir.join(paraknow_core::pipeline::artifacts::REPORT),
        })),
        None => log::info!("stages {}..={} done in {}", a.from, a.to, cfg.output_dir.display()),
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PARAKNOW_LOG", "info")).init();
    match Cli::parse().command {
        Command::TrainTeacher(a) => train_teacher(&a),
        Command::Score(a) => score(&a),
        Command::Extract(a) => extract(&a),
        Command::Inject(a) => inject(&a),
        Command::Finetune(a) => finetune_cmd(&a),
        Command::Eval(a) => eval(&a),
        Command::Heatmap(a) => heatmap(&a),
        Command::Run(a) => run(&a),
    }
}
