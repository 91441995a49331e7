//! Experiment harness: run configuration, meta-training with validation and
//! checkpointing, multi-seed evaluation, sweeps, ablations and feature export.
//!
//! Output layout under `output_dir`:
//!
//! ```text
//! report.json             RunReport
//! metrics.jsonl           one metric record per test episode, all seeds
//! seed-<s>/run_log.jsonl  one record per meta iteration
//! seed-<s>/metrics.jsonl  test records of that seed
//! seed-<s>/best.ckpt      θ and learning rates with the best validation F1
//! seed-<s>/state.ckpt     full training state for resuming
//! ```

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::checkpoint::Checkpoint;
use crate::data::{
    generate_corpus, load_jsonl, sample_task, split_by_label, Corpus, CorpusSpec, EpisodeSpec, LabelIndex,
    LabelPool, SplitRule, Splits, Task,
};
use crate::encoder::{EncoderConfig, EventModel, FeatureMode, PromptId, PromptTemplate, VERBALIZER_GROUP};
use crate::error::{Error, Result};
use crate::matcher::{micro_f1, project_2d, zero_shot_metrics};
use crate::meta::{
    few_shot_meta_step, inner_adapt, zero_shot_meta_step, Adam, AdaptiveLRSchedule, MetaConfig, MetaState,
    Objective, PairLabels, StepOutcome,
};
use crate::metrics::{clustering_metrics, silhouette, MetricRecord};
use crate::objective::{EventBatch, EventObjective, LossBreakdown, LossConfig, MMDConfig};
use crate::params::ParameterSet;
use crate::rng::seeded_rng;
use crate::tensor::Tensor;

const TRAIN_STREAM: u64 = 0x7_4a1;
const VALID_STREAM: u64 = 0x7_a11d;
const TEST_STREAM: u64 = 0x7_e57;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    ZeroShot,
    #[default]
    FewShot,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "zero_shot" => Ok(Mode::ZeroShot),
            "few_shot" => Ok(Mode::FewShot),
            _ => Err(Error::Config(format!("unknown mode {s:?} (expected zero_shot or few_shot)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum CorpusSource {
    Synthetic(CorpusSpec),
    Jsonl { path: PathBuf },
}

impl Default for CorpusSource {
    fn default() -> Self {
        CorpusSource::Synthetic(CorpusSpec {
            num_event_types: 50,
            ..CorpusSpec::default()
        })
    }
}

/// Model variant trained by a run. Everything except `Full` removes one
/// component.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    /// Verbalizer reads the slot distribution only.
    NoTrigger,
    /// Classification head on the trigger feature only.
    NoVerbalizer,
    /// Supervised training on pooled training labels, episodic fine-tuning at test only.
    NoMetaLearner,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Full => "full",
            Variant::NoTrigger => "no_trigger",
            Variant::NoVerbalizer => "no_verbalizer",
            Variant::NoMetaLearner => "no_meta_learner",
        })
    }
}

/// Removable component named on the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Trigger,
    Verbalizer,
    MetaLearner,
}

impl Component {
    pub fn variant(self) -> Variant {
        match self {
            Component::Trigger => Variant::NoTrigger,
            Component::Verbalizer => Variant::NoVerbalizer,
            Component::MetaLearner => Variant::NoMetaLearner,
        }
    }
}

impl std::str::FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "trigger" => Ok(Component::Trigger),
            "verbalizer" => Ok(Component::Verbalizer),
            "meta_learner" => Ok(Component::MetaLearner),
            _ => Err(Error::Config(format!(
                "unknown ablation component {s:?} (expected trigger, verbalizer or meta_learner)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub corpus: CorpusSource,
    pub split: SplitRule,
    pub split_seed: u64,
    /// `seed` here fixes the validation and test episodes, shared by all runs.
    pub episode: EpisodeSpec,
    /// `vocab_size` and `prompt` are filled in from the corpus and `prompt`.
    pub encoder: EncoderConfig,
    pub meta: MetaConfig,
    pub loss: LossConfig,
    pub mmd: MMDConfig,
    pub prompt: PromptId,
    /// Template tokens when `prompt` is `Custom`.
    pub prompt_tokens: Vec<String>,
    pub variant: Variant,
    /// First training seed; seeds are `seed..seed + num_seeds`.
    pub seed: u64,
    pub num_seeds: usize,
    pub valid_episodes: usize,
    pub test_episodes: usize,
    pub output_dir: PathBuf,
    /// Continue from `state.ckpt` files left by an interrupted run.
    pub resume: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::FewShot,
            corpus: CorpusSource::default(),
            split: SplitRule::default(),
            split_seed: 0,
            episode: EpisodeSpec::default(),
            encoder: EncoderConfig::default(),
            meta: MetaConfig::default(),
            loss: LossConfig::default(),
            mmd: MMDConfig::default(),
            prompt: PromptId::A,
            prompt_tokens: Vec::new(),
            variant: Variant::Full,
            seed: 0,
            num_seeds: 3,
            valid_episodes: 10,
            test_episodes: 20,
            output_dir: PathBuf::from("runs/default"),
            resume: false,
        }
    }
}

impl RunConfig {
    /// Reads a TOML or JSON config, chosen by extension (JSON for `.json`).
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        let cfg: RunConfig = if is_json {
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        Ok(cfg)
    }

    /// Applies mode-implied settings: zero-shot runs have no support set.
    pub fn normalized(&self) -> Self {
        let mut c = self.clone();
        if c.mode == Mode::ZeroShot {
            c.episode.k_shot = 0;
        }
        c
    }

    pub fn template(&self) -> Result<PromptTemplate> {
        match self.prompt {
            PromptId::Custom => PromptTemplate::custom(self.prompt_tokens.clone()),
            id => PromptTemplate::builtin(id),
        }
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.num_seeds as u64).map(|i| self.seed + i).collect()
    }

    pub fn feature_mode(&self) -> FeatureMode {
        match self.variant {
            Variant::NoTrigger => FeatureMode::SlotOnly,
            Variant::NoVerbalizer => FeatureMode::TriggerOnly,
            Variant::Full | Variant::NoMetaLearner => FeatureMode::Full,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.episode.validate()?;
        self.meta.validate()?;
        self.loss.validate()?;
        self.mmd.validate()?;
        self.template()?;
        if self.mode == Mode::FewShot && self.episode.k_shot == 0 {
            return Err(Error::Config("few_shot mode needs k_shot >= 1".into()));
        }
        if self.num_seeds == 0 {
            return Err(Error::Config("num_seeds must be at least 1".into()));
        }
        if self.test_episodes == 0 {
            return Err(Error::Config("test_episodes must be at least 1".into()));
        }
        if let CorpusSource::Synthetic(spec) = &self.corpus {
            spec.validate()?;
        }
        Ok(())
    }

    fn identity(&self) -> Value {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        c.resume = false;
        serde_json::to_value(c).expect("config serializes")
    }
}

/// Corpus, label splits and the encoder configuration of a run.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub corpus: Corpus,
    pub splits: Splits,
    pub encoder: EncoderConfig,
}

fn check_pool(name: &str, pool: &LabelPool, labels: usize, per_label: usize) -> Result<()> {
    let ok = pool.values().filter(|v| v.len() >= per_label).count();
    if ok < labels {
        return Err(Error::Config(format!(
            "{name} split needs {labels} labels with at least {per_label} examples each, it has {ok}"
        )));
    }
    Ok(())
}

/// Builds the corpus and splits and checks every pool can supply its episodes.
pub fn prepare(config: &RunConfig) -> Result<Prepared> {
    let config = config.normalized();
    config.validate()?;
    let corpus = match &config.corpus {
        CorpusSource::Synthetic(spec) => generate_corpus(spec)?,
        CorpusSource::Jsonl { path } => load_jsonl(path, LabelIndex::Build)?,
    };
    let splits = split_by_label(&corpus.pool, config.split, config.split_seed)?;
    let ep = &config.episode;
    let n = ep.n_way;
    let eval_need = ep.k_shot + ep.query_per_class;
    match config.mode {
        Mode::ZeroShot if config.variant != Variant::NoMetaLearner => {
            let support_shot = ep.query_per_class;
            check_pool("train", &splits.train, 2 * n, support_shot.max(ep.query_per_class))?;
        }
        _ => check_pool("train", &splits.train, n, eval_need)?,
    }
    if config.valid_episodes > 0 {
        check_pool("validation", &splits.valid, n, eval_need)?;
    }
    check_pool("test", &splits.test, n, eval_need)?;
    let encoder = EncoderConfig {
        vocab_size: corpus.vocab.len(),
        prompt: config.template()?,
        feature_mode: config.feature_mode(),
        ..config.encoder.clone()
    };
    encoder.validate()?;
    for ex in corpus.pool.values().flatten() {
        if encoder.prompt.tokens.len() + ex.tokens.len() > encoder.max_len {
            return Err(Error::Config(format!(
                "max_len {} cannot hold the prompt plus a {}-token context",
                encoder.max_len,
                ex.tokens.len()
            )));
        }
    }
    Ok(Prepared { corpus, splits, encoder })
}

/// Fixed evaluation episodes: a function of the episode seed only, so every
/// training seed and every sweep value sees the same tasks.
pub fn sample_episodes(pool: &LabelPool, spec: &EpisodeSpec, count: usize, stream: u64) -> Result<Vec<Task>> {
    let mut rng = seeded_rng(spec.seed, &[stream]);
    (0..count).map(|_| sample_task(pool, spec, &mut rng)).collect()
}

/// Scores one evaluation episode. Few-shot: adapt a fresh head on the
/// support set and classify the query. Zero-shot: cluster query features and
/// relabel with the Hungarian matching.
pub fn evaluate_episode(
    objective: &EventObjective<'_>,
    theta: &ParameterSet,
    schedule: &AdaptiveLRSchedule,
    steps: usize,
    task: &Task,
) -> Result<MetricRecord> {
    let model = objective.model;
    let gold = task.query_classes();
    let n = task.n_way();
    if task.support.is_empty() {
        let features = task
            .query
            .iter()
            .map(|ex| model.event_features(theta, ex))
            .collect::<Result<Vec<_>>>()?;
        return Ok(zero_shot_metrics(&features, &gold, n, task.task_id)?.1);
    }
    let init = model.with_head(theta, n);
    let support =
        EventBatch::new(task.support.clone(), task.support_classes())?.chunks(objective.batch_cap);
    let adapted = inner_adapt(objective, &init, &support, schedule, steps, false)?;
    let pred = model.predict(&adapted.phi, &task.query)?;
    let f1 = micro_f1(&pred, &gold)?;
    Ok(clustering_metrics(&pred, &gold)?.with_f1(f1))
}

fn evaluate_all(
    objective: &EventObjective<'_>,
    theta: &ParameterSet,
    schedule: &AdaptiveLRSchedule,
    steps: usize,
    tasks: &[Task],
) -> Result<Vec<MetricRecord>> {
    // episodes fan out; each one runs its own gradient steps sequentially
    let inner = EventObjective {
        execution: crate::parallel::Execution::Sequential,
        ..objective.clone()
    };
    objective
        .execution
        .map(tasks, |t| evaluate_episode(&inner, theta, schedule, steps, t))
        .into_iter()
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationPoint {
    /// Number of meta updates applied before this evaluation.
    pub iteration: usize,
    pub metrics: MetricRecord,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    /// Mean query loss of each meta iteration.
    pub loss_curve: Vec<f64>,
    pub validation: Vec<ValidationPoint>,
    pub best_iteration: usize,
    pub best_valid_f1: f64,
    pub skipped_steps: usize,
    pub test: MetricRecord,
    pub test_episodes: Vec<MetricRecord>,
    pub checkpoint: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub seeds: Vec<SeedReport>,
    /// Mean and standard deviation of the per-seed test means.
    pub mean: MetricRecord,
    pub std: MetricRecord,
    pub test_task_ids: Vec<u64>,
    pub wall_clock_secs: f64,
}

impl RunReport {
    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LogRecord {
    pub seed: u64,
    pub iteration: usize,
    pub task_ids: Vec<u64>,
    pub losses: Vec<LossBreakdown>,
    pub mean_loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
    pub skipped: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pairs: Option<Vec<PairLabels>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub validation: Option<MetricRecord>,
}

fn schedule_section(schedule: &AdaptiveLRSchedule) -> ParameterSet {
    let mut p = ParameterSet::new();
    for (g, a) in schedule.groups.iter().zip(&schedule.alpha) {
        p.push(g.clone(), "alpha", Tensor::from_vec(1, a.len(), a.clone()));
    }
    p
}

fn schedule_from(section: &ParameterSet, learnable: bool) -> AdaptiveLRSchedule {
    AdaptiveLRSchedule {
        groups: section.entries().iter().map(|e| e.name.clone()).collect(),
        alpha: section.entries().iter().map(|e| e.tensor.data.clone()).collect(),
        learnable,
    }
}

fn model_checkpoint(config: &RunConfig, prepared: &Prepared, seed: u64, theta: &ParameterSet, schedule: &AdaptiveLRSchedule, iteration: usize, f1: f64) -> Checkpoint {
    Checkpoint::new(json!({
        "kind": "model",
        "config": config,
        "encoder": prepared.encoder,
        "seed": seed,
        "iteration": iteration,
        "valid_f1": f1,
        "learnable": schedule.learnable,
    }))
    .with_section("theta", theta.without_group(VERBALIZER_GROUP))
    .with_section("schedule", schedule_section(schedule))
}

fn adam_section(opt: &Adam) -> ParameterSet {
    let mut p = ParameterSet::new();
    p.push("m", "adam", Tensor::from_vec(1, opt.m.len(), opt.m.clone()));
    p.push("v", "adam", Tensor::from_vec(1, opt.v.len(), opt.v.clone()));
    p
}

fn adam_from(header: &Value, section: &ParameterSet) -> Result<Adam> {
    let mut opt: Adam = serde_json::from_value(header.clone())?;
    opt.m = section.get("m").map(|t| t.data.clone()).unwrap_or_default();
    opt.v = section.get("v").map(|t| t.data.clone()).unwrap_or_default();
    Ok(opt)
}

fn bare(opt: &Adam) -> Adam {
    Adam {
        m: Vec::new(),
        v: Vec::new(),
        ..opt.clone()
    }
}

/// Progress of one seed, persisted in `state.ckpt`.
struct Progress {
    state: MetaState,
    loss_curve: Vec<f64>,
    validation: Vec<ValidationPoint>,
    best_iteration: usize,
    best_f1: f64,
}

fn save_state(path: &Path, config: &RunConfig, seed: u64, p: &Progress) -> Result<()> {
    Checkpoint::new(json!({
        "kind": "state",
        "config": config.identity(),
        "seed": seed,
        "iteration": p.state.iteration,
        "skipped_steps": p.state.skipped_steps,
        "learnable": p.state.schedule.learnable,
        "theta_opt": bare(&p.state.theta_opt),
        "alpha_opt": bare(&p.state.alpha_opt),
        "loss_curve": p.loss_curve,
        "validation": p.validation,
        "best_iteration": p.best_iteration,
        "best_f1": p.best_f1,
    }))
    .with_section("theta", p.state.theta.clone())
    .with_section("schedule", schedule_section(&p.state.schedule))
    .with_section("theta_opt", adam_section(&p.state.theta_opt))
    .with_section("alpha_opt", adam_section(&p.state.alpha_opt))
    .write(path)
}

fn load_state(path: &Path, config: &RunConfig, seed: u64) -> Result<Option<Progress>> {
    if !path.exists() {
        return Ok(None);
    }
    let ck = Checkpoint::read(path)?;
    let h = &ck.header;
    if h["kind"] != "state" || h["config"] != config.identity() || h["seed"] != json!(seed) {
        return Err(Error::Checkpoint(format!(
            "{} belongs to a different run configuration",
            path.display()
        )));
    }
    let section = |name: &str| {
        ck.section(name)
            .ok_or_else(|| Error::Checkpoint(format!("{} lacks section {name}", path.display())))
    };
    let learnable = h["learnable"].as_bool().unwrap_or(false);
    let state = MetaState {
        theta: section("theta")?.clone(),
        schedule: schedule_from(section("schedule")?, learnable),
        theta_opt: adam_from(&h["theta_opt"], section("theta_opt")?)?,
        alpha_opt: adam_from(&h["alpha_opt"], section("alpha_opt")?)?,
        iteration: serde_json::from_value(h["iteration"].clone())?,
        skipped_steps: serde_json::from_value(h["skipped_steps"].clone())?,
    };
    Ok(Some(Progress {
        state,
        loss_curve: serde_json::from_value(h["loss_curve"].clone())?,
        validation: serde_json::from_value(h["validation"].clone())?,
        best_iteration: serde_json::from_value(h["best_iteration"].clone())?,
        best_f1: serde_json::from_value(h["best_f1"].clone())?,
    }))
}

/// Drops log lines past `iteration`, which a resumed run will redo.
fn truncate_log(path: &Path, iteration: usize) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let keep: Vec<String> = BufReader::new(File::open(path)?)
        .lines()
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|l| {
            serde_json::from_str::<LogRecord>(l).is_ok_and(|r| r.iteration < iteration)
        })
        .collect();
    let mut f = BufWriter::new(File::create(path)?);
    for l in keep {
        writeln!(f, "{l}")?;
    }
    Ok(())
}

/// Plain supervised step on pooled training labels with one persistent head
/// over all training classes.
fn supervised_step(
    objective: &EventObjective<'_>,
    state: &mut MetaState,
    pool: &LabelPool,
    spec: &EpisodeSpec,
    config: &MetaConfig,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<StepOutcome> {
    let class_of: std::collections::BTreeMap<usize, usize> =
        pool.keys().enumerate().map(|(i, &l)| (l, i)).collect();
    let mut batches = Vec::new();
    let mut task_ids = Vec::new();
    for _ in 0..config.tasks_per_meta_batch {
        let t = sample_task(pool, spec, rng)?;
        task_ids.push(t.task_id);
        let examples: Vec<_> = t.support.iter().chain(&t.query).cloned().collect();
        let classes = examples.iter().map(|e| class_of[&e.label]).collect();
        batches.extend(EventBatch::new(examples, classes)?.chunks(config.inner_batch_cap));
    }
    let results = config
        .execution
        .map(&batches, |b| objective.value_and_grad(&state.theta, b));
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;
    let inv = 1.0 / results.len() as f64;
    let mut avg = state.theta.zeros_like();
    for (_, g) in &results {
        avg.axpy(inv, g);
    }
    let lr = config.lr_at(state.iteration);
    let mut outcome = StepOutcome {
        iteration: state.iteration,
        task_losses: results.iter().map(|(l, _)| *l).collect(),
        task_ids,
        grad_norm: avg.norm(),
        lr,
        skipped: false,
    };
    if !avg.is_finite() {
        log::warn!("non-finite gradient at iteration {}; update skipped", state.iteration);
        state.skipped_steps += 1;
        outcome.skipped = true;
    } else if lr != 0.0 {
        state.theta_opt.step_set(&mut state.theta, &avg, lr);
    }
    state.iteration += 1;
    Ok(outcome)
}

/// Everything one training run shares across seeds.
pub struct RunContext {
    pub config: RunConfig,
    pub prepared: Prepared,
    pub model: EventModel,
    pub valid_tasks: Vec<Task>,
    pub test_tasks: Vec<Task>,
}

impl RunContext {
    pub fn new(config: &RunConfig) -> Result<Self> {
        let config = config.normalized();
        let prepared = prepare(&config)?;
        let model = EventModel::new(prepared.encoder.clone(), &prepared.corpus.vocab)?;
        let valid_tasks = if config.valid_episodes > 0 {
            sample_episodes(&prepared.splits.valid, &config.episode, config.valid_episodes, VALID_STREAM)?
        } else {
            Vec::new()
        };
        let test_tasks = sample_episodes(&prepared.splits.test, &config.episode, config.test_episodes, TEST_STREAM)?;
        Ok(Self {
            config,
            prepared,
            model,
            valid_tasks,
            test_tasks,
        })
    }

    pub fn objective(&self) -> EventObjective<'_> {
        let mut o = EventObjective::new(
            &self.model,
            self.config.loss,
            self.config.mmd,
            self.config.meta.execution,
        );
        o.batch_cap = self.config.meta.inner_batch_cap;
        o
    }

    fn initial_state(&self, seed: u64) -> MetaState {
        let cfg = &self.config;
        let theta = self.model.init_params(seed);
        let schedule = cfg.meta.schedule_for(&self.model.with_head(&theta, cfg.episode.n_way));
        let theta = if cfg.variant == Variant::NoMetaLearner {
            self.model.with_head(&theta, self.prepared.splits.train.len())
        } else {
            theta
        };
        MetaState::new(theta, schedule, &cfg.meta)
    }

    pub fn evaluate(&self, theta: &ParameterSet, schedule: &AdaptiveLRSchedule, tasks: &[Task]) -> Result<Vec<MetricRecord>> {
        evaluate_all(&self.objective(), theta, schedule, self.config.meta.inner_steps, tasks)
    }

    fn train_step(&self, state: &mut MetaState, seed: u64) -> Result<(StepOutcome, Option<Vec<PairLabels>>)> {
        let cfg = &self.config;
        let obj = self.objective();
        let mut rng = seeded_rng(seed, &[TRAIN_STREAM, state.iteration as u64]);
        let pool = &self.prepared.splits.train;
        match (cfg.variant, cfg.mode) {
            (Variant::NoMetaLearner, _) => {
                Ok((supervised_step(&obj, state, pool, &cfg.episode, &cfg.meta, &mut rng)?, None))
            }
            (_, Mode::FewShot) => {
                Ok((few_shot_meta_step(&obj, state, pool, &cfg.episode, &cfg.meta, &mut rng)?, None))
            }
            (_, Mode::ZeroShot) => {
                let (o, pairs) = zero_shot_meta_step(&obj, state, pool, &cfg.episode, &cfg.meta, &mut rng)?;
                Ok((o, Some(pairs)))
            }
        }
    }

    fn validate_now(&self, p: &mut Progress, seed: u64, best_path: &Path) -> Result<MetricRecord> {
        let records = self.evaluate(&p.state.theta, &p.state.schedule, &self.valid_tasks)?;
        let mean = MetricRecord::mean(&records);
        p.validation.push(ValidationPoint {
            iteration: p.state.iteration,
            metrics: mean,
        });
        if p.validation.len() == 1 || mean.f1 > p.best_f1 {
            p.best_f1 = mean.f1;
            p.best_iteration = p.state.iteration;
            model_checkpoint(
                &self.config,
                &self.prepared,
                seed,
                &p.state.theta,
                &p.state.schedule,
                p.state.iteration,
                mean.f1,
            )
            .write(best_path)?;
        }
        Ok(mean)
    }

    /// Trains one seed, then tests the best-validation checkpoint as read
    /// back from disk.
    pub fn run_seed(&self, seed: u64, dir: &Path) -> Result<SeedReport> {
        Ok(self
            .run_seed_until(seed, dir, self.config.meta.total_iterations)?
            .expect("runs to completion"))
    }

    /// Stops after `stop` iterations, as an interrupted run would, returning
    /// `None` if that is before the end of training.
    fn run_seed_until(&self, seed: u64, dir: &Path, stop: usize) -> Result<Option<SeedReport>> {
        let cfg = &self.config;
        fs::create_dir_all(dir)?;
        let best_path = dir.join("best.ckpt");
        let state_path = dir.join("state.ckpt");
        let log_path = dir.join("run_log.jsonl");
        let resumed = if cfg.resume { load_state(&state_path, cfg, seed)? } else { None };
        let mut p = match resumed {
            Some(p) => {
                log::info!("seed {seed}: resuming at iteration {}", p.state.iteration);
                truncate_log(&log_path, p.state.iteration)?;
                p
            }
            None => {
                if log_path.exists() {
                    fs::remove_file(&log_path)?;
                }
                Progress {
                    state: self.initial_state(seed),
                    loss_curve: Vec::new(),
                    validation: Vec::new(),
                    best_iteration: 0,
                    best_f1: f64::NEG_INFINITY,
                }
            }
        };
        let mut log = BufWriter::new(fs::OpenOptions::new().create(true).append(true).open(&log_path)?);
        let validating = !self.valid_tasks.is_empty();
        if p.validation.is_empty() && p.state.iteration == 0 {
            if validating {
                self.validate_now(&mut p, seed, &best_path)?;
            }
            save_state(&state_path, cfg, seed, &p)?;
        }
        while p.state.iteration < cfg.meta.total_iterations {
            if p.state.iteration >= stop {
                log.flush()?;
                return Ok(None);
            }
            let (outcome, pairs) = self.train_step(&mut p.state, seed)?;
            let mean_loss =
                outcome.task_losses.iter().map(|l| l.total).sum::<f64>() / outcome.task_losses.len() as f64;
            p.loss_curve.push(mean_loss);
            let done = p.state.iteration;
            let due = done % cfg.meta.validate_every == 0 || done == cfg.meta.total_iterations;
            let validation = if due && validating {
                Some(self.validate_now(&mut p, seed, &best_path)?)
            } else {
                None
            };
            let rec = LogRecord {
                seed,
                iteration: outcome.iteration,
                task_ids: outcome.task_ids,
                losses: outcome.task_losses,
                mean_loss,
                grad_norm: outcome.grad_norm,
                lr: outcome.lr,
                skipped: outcome.skipped,
                pairs,
                validation,
            };
            writeln!(log, "{}", serde_json::to_string(&rec)?)?;
            if due {
                log.flush()?;
                save_state(&state_path, cfg, seed, &p)?;
            }
        }
        log.flush()?;
        if !validating {
            // without validation episodes the final parameters are kept
            p.best_iteration = p.state.iteration;
            p.best_f1 = f64::NAN;
            model_checkpoint(cfg, &self.prepared, seed, &p.state.theta, &p.state.schedule, p.state.iteration, p.best_f1)
                .write(&best_path)?;
        }

        let (theta, schedule) = read_model(&best_path)?;
        let test_episodes = self.evaluate(&theta, &schedule, &self.test_tasks)?;
        let mut f = BufWriter::new(File::create(dir.join("metrics.jsonl"))?);
        for r in &test_episodes {
            writeln!(f, "{}", serde_json::to_string(r)?)?;
        }
        f.flush()?;
        Ok(Some(SeedReport {
            seed,
            loss_curve: p.loss_curve,
            validation: p.validation,
            best_iteration: p.best_iteration,
            best_valid_f1: p.best_f1,
            skipped_steps: p.state.skipped_steps,
            test: MetricRecord::mean(&test_episodes),
            test_episodes,
            checkpoint: best_path,
        }))
    }
}

/// θ and learning rates stored in a model checkpoint.
pub fn read_model(path: &Path) -> Result<(ParameterSet, AdaptiveLRSchedule)> {
    let ck = Checkpoint::read(path)?;
    if ck.header["kind"] != "model" {
        return Err(Error::Checkpoint(format!("{} is not a model checkpoint", path.display())));
    }
    let theta = ck
        .section("theta")
        .ok_or_else(|| Error::Checkpoint("missing theta section".into()))?
        .clone();
    let schedule = schedule_from(
        ck.section("schedule")
            .ok_or_else(|| Error::Checkpoint("missing schedule section".into()))?,
        ck.header["learnable"].as_bool().unwrap_or(false),
    );
    Ok((theta, schedule))
}

/// Full training run over all seeds; writes the report, metric records,
/// logs and checkpoints under `config.output_dir`.
pub fn run_train(config: &RunConfig) -> Result<RunReport> {
    let start = Instant::now();
    let ctx = RunContext::new(config)?;
    let out = &ctx.config.output_dir;
    fs::create_dir_all(out)?;
    let mut seeds = Vec::new();
    for seed in ctx.config.seeds() {
        log::info!("training seed {seed}");
        seeds.push(ctx.run_seed(seed, &out.join(format!("seed-{seed}")))?);
    }
    let means: Vec<MetricRecord> = seeds.iter().map(|s| s.test).collect();
    let report = RunReport {
        config: ctx.config.clone(),
        mean: MetricRecord::mean(&means),
        std: MetricRecord::std(&means),
        test_task_ids: ctx.test_tasks.iter().map(|t| t.task_id).collect(),
        seeds,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    write_json(&out.join("report.json"), &report)?;
    let mut f = BufWriter::new(File::create(out.join("metrics.jsonl"))?);
    for s in &report.seeds {
        for r in &s.test_episodes {
            writeln!(f, "{}", serde_json::to_string(r)?)?;
        }
    }
    f.flush()?;
    Ok(report)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    writeln!(f)?;
    f.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: PathBuf,
    pub episodes: Vec<MetricRecord>,
    pub mean: MetricRecord,
}

fn checkpoint_context(path: &Path) -> Result<(RunContext, ParameterSet, AdaptiveLRSchedule)> {
    let ck = Checkpoint::read(path)?;
    let config: RunConfig = serde_json::from_value(ck.header["config"].clone())
        .map_err(|e| Error::Checkpoint(format!("{}: unreadable run config: {e}", path.display())))?;
    let ctx = RunContext::new(&config)?;
    let stored: EncoderConfig = serde_json::from_value(ck.header["encoder"].clone())?;
    if stored != ctx.prepared.encoder {
        return Err(Error::Checkpoint(format!(
            "{}: encoder configuration does not match the rebuilt corpus",
            path.display()
        )));
    }
    let (theta, schedule) = read_model(path)?;
    ctx.model.check_params(&theta, false)?;
    let layout = ctx.model.init_params(0);
    if !theta.same_layout(&layout) {
        return Err(Error::Checkpoint(format!("{}: parameter layout does not match the model", path.display())));
    }
    Ok((ctx, theta, schedule))
}

/// Re-evaluates a model checkpoint on the test episodes of its own run.
pub fn run_eval(checkpoint: &Path) -> Result<EvalReport> {
    let (ctx, theta, schedule) = checkpoint_context(checkpoint)?;
    let episodes = ctx.evaluate(&theta, &schedule, &ctx.test_tasks)?;
    Ok(EvalReport {
        checkpoint: checkpoint.to_path_buf(),
        mean: MetricRecord::mean(&episodes),
        episodes,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub episode: usize,
    pub x: f64,
    pub y: f64,
    pub gold: usize,
    pub cluster: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExportSummary {
    pub rows: usize,
    /// Silhouette of the projected points under gold labels, averaged over episodes.
    pub mean_silhouette: f64,
    pub metrics: Vec<MetricRecord>,
}

/// Projects query features of the first `episodes` test episodes to 2-D and
/// writes one JSON row per example. Cluster ids come from the same k-means
/// call that produces the episode's metrics.
pub fn export_features(checkpoint: &Path, episodes: usize, output: &Path) -> Result<ExportSummary> {
    let (ctx, theta, _) = checkpoint_context(checkpoint)?;
    let tasks = if episodes > ctx.test_tasks.len() {
        let mut spec = ctx.config.episode;
        spec.k_shot = 0;
        sample_episodes(&ctx.prepared.splits.test, &spec, episodes, TEST_STREAM)?
    } else {
        ctx.test_tasks[..episodes].to_vec()
    };
    if let Some(parent) = output.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut f = BufWriter::new(File::create(output)?);
    let mut rows = 0;
    let mut sil = Vec::new();
    let mut metrics = Vec::new();
    for (i, task) in tasks.iter().enumerate() {
        let gold = task.query_classes();
        let features = task
            .query
            .iter()
            .map(|ex| ctx.model.event_features(&theta, ex))
            .collect::<Result<Vec<_>>>()?;
        let (clusters, record) = zero_shot_metrics(&features, &gold, task.n_way(), task.task_id)?;
        let xy = project_2d(&features)?;
        for ((p, &g), &c) in xy.iter().zip(&gold).zip(&clusters.cluster_ids) {
            let row = FeatureRow {
                episode: i,
                x: p[0],
                y: p[1],
                gold: g,
                cluster: c,
            };
            writeln!(f, "{}", serde_json::to_string(&row)?)?;
            rows += 1;
        }
        let pts: Vec<Vec<f64>> = xy.iter().map(|p| p.to_vec()).collect();
        sil.push(silhouette(&pts, &gold)?);
        metrics.push(record);
    }
    f.flush()?;
    Ok(ExportSummary {
        rows,
        mean_silhouette: sil.iter().sum::<f64>() / sil.len().max(1) as f64,
        metrics,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    LambdaC,
    Prompt,
    InnerSteps,
    KShot,
}

impl std::str::FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "lambda_c" => Ok(SweepParam::LambdaC),
            "prompt" => Ok(SweepParam::Prompt),
            "inner_steps" => Ok(SweepParam::InnerSteps),
            "k_shot" => Ok(SweepParam::KShot),
            _ => Err(Error::Config(format!(
                "unknown sweep parameter {s:?} (expected lambda_c, prompt, inner_steps or k_shot)"
            ))),
        }
    }
}

impl std::fmt::Display for SweepParam {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SweepParam::LambdaC => "lambda_c",
            SweepParam::Prompt => "prompt",
            SweepParam::InnerSteps => "inner_steps",
            SweepParam::KShot => "k_shot",
        })
    }
}

impl SweepParam {
    /// `config` with the parameter set to `value`.
    pub fn apply(self, config: &RunConfig, value: &str) -> Result<RunConfig> {
        let bad = |e: String| Error::Config(format!("{self} value {value:?}: {e}"));
        let mut c = config.clone();
        match self {
            SweepParam::LambdaC => c.loss.lambda_c = value.parse().map_err(|e| bad(format!("{e}")))?,
            SweepParam::Prompt => c.prompt = value.parse()?,
            SweepParam::InnerSteps => c.meta.inner_steps = value.parse().map_err(|e| bad(format!("{e}")))?,
            SweepParam::KShot => {
                if c.mode == Mode::ZeroShot {
                    return Err(Error::Config("k_shot sweeps need few_shot mode".into()));
                }
                c.episode.k_shot = value.parse().map_err(|e| bad(format!("{e}")))?
            }
        }
        c.normalized().validate()?;
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub value: String,
    pub mean: MetricRecord,
    pub std: MetricRecord,
    pub output_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub parameter: SweepParam,
    pub rows: Vec<SummaryRow>,
    #[serde(skip)]
    pub reports: Vec<RunReport>,
}

fn write_rows(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    for r in rows {
        writeln!(f, "{}", serde_json::to_string(r)?)?;
    }
    f.flush()?;
    Ok(())
}

/// One run per value with shared seeds and episodes. Writes
/// `sweep_<param>.jsonl` summary rows in the given order.
pub fn run_sweep(config: &RunConfig, parameter: SweepParam, values: &[String]) -> Result<SweepReport> {
    let mut report = SweepReport {
        parameter,
        rows: Vec::new(),
        reports: Vec::new(),
    };
    if values.is_empty() {
        log::warn!("sweep over {parameter} has no values; nothing to do");
        return Ok(report);
    }
    let configs = values
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let mut c = parameter.apply(config, v)?;
            c.output_dir = config.output_dir.join("sweep").join(format!("{parameter}-{i}-{v}"));
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?;
    for (v, c) in values.iter().zip(configs) {
        let r = run_train(&c)?;
        report.rows.push(SummaryRow {
            value: v.clone(),
            mean: r.mean,
            std: r.std,
            output_dir: c.output_dir.clone(),
        });
        report.reports.push(r);
    }
    fs::create_dir_all(&config.output_dir)?;
    write_rows(&config.output_dir.join(format!("sweep_{parameter}.jsonl")), &report.rows)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<SummaryRow>,
    #[serde(skip)]
    pub reports: Vec<RunReport>,
}

/// The full model plus one run per removed component, trained and evaluated
/// identically. Writes `ablation.jsonl`.
pub fn run_ablation(config: &RunConfig, components: &[Component]) -> Result<AblationReport> {
    let mut variants = vec![Variant::Full];
    for c in components {
        let v = c.variant();
        if !variants.contains(&v) {
            variants.push(v);
        }
    }
    let mut report = AblationReport {
        rows: Vec::new(),
        reports: Vec::new(),
    };
    for v in variants {
        let mut c = config.clone();
        c.variant = v;
        c.output_dir = config.output_dir.join("ablation").join(v.to_string());
        let r = run_train(&c)?;
        report.rows.push(SummaryRow {
            value: v.to_string(),
            mean: r.mean,
            std: r.std,
            output_dir: c.output_dir.clone(),
        });
        report.reports.push(r);
    }
    fs::create_dir_all(&config.output_dir)?;
    write_rows(&config.output_dir.join("ablation.jsonl"), &report.rows)?;
    Ok(report)
}
