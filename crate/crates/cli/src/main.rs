//! `metaevent` command-line harness.
//!
//! Exit codes: 0 success, 1 configuration error, 2 runtime failure.

use clap::{Args, Parser, Subcommand};
use metaevent::data::SplitRule;
use metaevent::encoder::PromptId;
use metaevent::error::Error;
use metaevent::experiment::{
    export_features, run_ablation, run_eval, run_sweep, run_train, Component, CorpusSource, Mode, RunConfig,
    SweepParam, Variant,
};
use metaevent::meta::LrScheduler;
use metaevent::objective::Bandwidth;
use metaevent::parallel::Execution;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Directory that relative output paths are resolved against.
const OUTPUT_ROOT_ENV: &str = "METAEVENT_OUTPUT_ROOT";

#[derive(Parser, Debug)]
#[command(name = "metaevent", version, about = "Meta-learned zero- and few-shot event detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Meta-train over all seeds and test the best-validation checkpoints.
    Train(RunArgs),
    /// One training run per value of a single parameter.
    Sweep {
        #[arg(long, value_parser = parse_from_str::<SweepParam>)]
        param: SweepParam,
        /// Comma-separated values, e.g. `0,0.1,0.5,1,5`.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        values: Vec<String>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// The full model against runs with components removed.
    Ablate {
        /// Comma-separated subset of trigger, verbalizer, meta_learner.
        #[arg(long, value_delimiter = ',', default_value = "trigger,verbalizer,meta_learner", value_parser = parse_from_str::<Component>)]
        components: Vec<Component>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Write 2-D projected query features of test episodes for plotting.
    ExportFeatures {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1)]
        episodes: usize,
        #[arg(long)]
        output: PathBuf,
    },
    /// Re-evaluate a checkpoint on the test episodes of its run.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also write the per-episode metric records here as JSONL.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn parse_from_str<T: std::str::FromStr<Err = Error>>(s: &str) -> Result<T, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_bandwidth(s: &str) -> Result<Bandwidth, String> {
    if s.eq_ignore_ascii_case("median") || s.eq_ignore_ascii_case("median_heuristic") {
        return Ok(Bandwidth::MedianHeuristic);
    }
    s.parse::<f64>()
        .map(Bandwidth::Fixed)
        .map_err(|_| format!("bandwidth must be `median` or a positive number, got {s:?}"))
}

fn parse_split(s: &str) -> Result<SplitRule, String> {
    let parts: Vec<&str> = s.split(',').collect();
    let bad = || format!("split must be `train,valid,test` label counts or `train,valid` ratios, got {s:?}");
    match parts.as_slice() {
        [a, b, c] => Ok(SplitRule::Counts {
            train: a.trim().parse().map_err(|_| bad())?,
            valid: b.trim().parse().map_err(|_| bad())?,
            test: c.trim().parse().map_err(|_| bad())?,
        }),
        [a, b] => Ok(SplitRule::Ratio {
            train: a.trim().parse().map_err(|_| bad())?,
            valid: b.trim().parse().map_err(|_| bad())?,
        }),
        _ => Err(bad()),
    }
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    match s.replace('-', "_").as_str() {
        "full" => Ok(Variant::Full),
        "no_trigger" => Ok(Variant::NoTrigger),
        "no_verbalizer" => Ok(Variant::NoVerbalizer),
        "no_meta_learner" => Ok(Variant::NoMetaLearner),
        _ => Err(format!("unknown variant {s:?}")),
    }
}

fn parse_scheduler(s: &str) -> Result<LrScheduler, String> {
    match s {
        "none" => Ok(LrScheduler::None),
        "cosine" => Ok(LrScheduler::Cosine),
        _ => Err(format!("unknown scheduler {s:?} (expected none or cosine)")),
    }
}

/// Flags mirroring `RunConfig`. Each one overrides the config file.
#[derive(Args, Debug, Default)]
struct RunArgs {
    /// TOML or JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_from_str::<Mode>)]
    mode: Option<Mode>,

    /// JSONL dataset instead of the synthetic corpus.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    num_event_types: Option<usize>,
    #[arg(long)]
    triggers_per_type: Option<usize>,
    #[arg(long)]
    background_vocab: Option<usize>,
    #[arg(long)]
    examples_per_type: Option<usize>,
    #[arg(long)]
    trigger_noise: Option<f64>,
    #[arg(long)]
    corpus_seed: Option<u64>,
    /// `train,valid,test` label counts or `train,valid` ratios.
    #[arg(long, value_parser = parse_split)]
    split: Option<SplitRule>,
    #[arg(long)]
    split_seed: Option<u64>,

    #[arg(long)]
    n_way: Option<usize>,
    #[arg(long)]
    k_shot: Option<usize>,
    #[arg(long)]
    query_per_class: Option<usize>,
    #[arg(long)]
    episode_seed: Option<u64>,

    #[arg(long)]
    num_layers: Option<usize>,
    #[arg(long)]
    num_heads: Option<usize>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    ffn_dim: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,

    #[arg(long)]
    inner_steps: Option<usize>,
    #[arg(long)]
    tasks_per_meta_batch: Option<usize>,
    #[arg(long)]
    meta_lr: Option<f64>,
    #[arg(long)]
    inner_lr: Option<f64>,
    #[arg(long)]
    verbalizer_lr_multiplier: Option<f64>,
    #[arg(long)]
    alpha_lr: Option<f64>,
    #[arg(long)]
    learn_alpha: Option<bool>,
    #[arg(long)]
    second_order: Option<bool>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long, value_parser = parse_scheduler)]
    scheduler: Option<LrScheduler>,
    #[arg(long)]
    total_iterations: Option<usize>,
    #[arg(long)]
    validate_every: Option<usize>,
    #[arg(long)]
    inner_batch_cap: Option<usize>,
    /// Run everything on the calling thread.
    #[arg(long)]
    sequential: bool,

    #[arg(long)]
    lambda_c: Option<f64>,
    /// `median` or a fixed kernel width.
    #[arg(long, value_parser = parse_bandwidth)]
    bandwidth: Option<Bandwidth>,
    #[arg(long, value_parser = parse_from_str::<PromptId>)]
    prompt: Option<PromptId>,
    /// Space-separated tokens of a custom template, with one `<mask>`.
    #[arg(long)]
    prompt_tokens: Option<String>,
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,

    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    num_seeds: Option<usize>,
    #[arg(long)]
    valid_episodes: Option<usize>,
    #[arg(long)]
    test_episodes: Option<usize>,
    /// Relative paths are resolved under $METAEVENT_OUTPUT_ROOT when set.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    resume: bool,
}

macro_rules! set {
    ($src:expr => $dst:expr) => {
        if let Some(v) = $src {
            $dst = v;
        }
    };
}

impl RunArgs {
    fn to_config(&self) -> Result<RunConfig, Error> {
        let mut c = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        set!(self.mode => c.mode);
        if let Some(p) = &self.dataset {
            c.corpus = CorpusSource::Jsonl { path: p.clone() };
        }
        let corpus_flags = self.num_event_types.is_some()
            || self.triggers_per_type.is_some()
            || self.background_vocab.is_some()
            || self.examples_per_type.is_some()
            || self.trigger_noise.is_some()
            || self.corpus_seed.is_some();
        match &mut c.corpus {
            CorpusSource::Synthetic(spec) => {
                set!(self.num_event_types => spec.num_event_types);
                set!(self.triggers_per_type => spec.triggers_per_type);
                set!(self.background_vocab => spec.background_vocab);
                set!(self.examples_per_type => spec.examples_per_type);
                set!(self.trigger_noise => spec.trigger_noise);
                set!(self.corpus_seed => spec.seed);
            }
            CorpusSource::Jsonl { .. } if corpus_flags => {
                return Err(Error::Config("synthetic corpus flags cannot be combined with a dataset".into()));
            }
            CorpusSource::Jsonl { .. } => {}
        }
        set!(self.split => c.split);
        set!(self.split_seed => c.split_seed);
        set!(self.n_way => c.episode.n_way);
        set!(self.k_shot => c.episode.k_shot);
        set!(self.query_per_class => c.episode.query_per_class);
        set!(self.episode_seed => c.episode.seed);
        set!(self.num_layers => c.encoder.num_layers);
        set!(self.num_heads => c.encoder.num_heads);
        set!(self.hidden_dim => c.encoder.hidden_dim);
        set!(self.ffn_dim => c.encoder.ffn_dim);
        set!(self.max_len => c.encoder.max_len);
        set!(self.inner_steps => c.meta.inner_steps);
        set!(self.tasks_per_meta_batch => c.meta.tasks_per_meta_batch);
        set!(self.meta_lr => c.meta.meta_lr);
        set!(self.inner_lr => c.meta.inner_lr);
        set!(self.verbalizer_lr_multiplier => c.meta.verbalizer_lr_multiplier);
        set!(self.alpha_lr => c.meta.alpha_lr);
        set!(self.learn_alpha => c.meta.learn_alpha);
        set!(self.second_order => c.meta.second_order);
        set!(self.weight_decay => c.meta.weight_decay);
        set!(self.scheduler => c.meta.scheduler);
        set!(self.total_iterations => c.meta.total_iterations);
        set!(self.validate_every => c.meta.validate_every);
        set!(self.inner_batch_cap => c.meta.inner_batch_cap);
        if self.sequential {
            c.meta.execution = Execution::Sequential;
        }
        set!(self.lambda_c => c.loss.lambda_c);
        set!(self.bandwidth => c.mmd.bandwidth);
        set!(self.prompt => c.prompt);
        if let Some(t) = &self.prompt_tokens {
            c.prompt = PromptId::Custom;
            c.prompt_tokens = t.split_whitespace().map(str::to_string).collect();
        }
        set!(self.variant => c.variant);
        set!(self.seed => c.seed);
        set!(self.num_seeds => c.num_seeds);
        set!(self.valid_episodes => c.valid_episodes);
        set!(self.test_episodes => c.test_episodes);
        set!(self.output_dir.clone() => c.output_dir);
        c.resume |= self.resume;
        c.output_dir = resolve_output(&c.output_dir);
        c.normalized().validate()?;
        Ok(c)
    }
}

fn resolve_output(dir: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if dir.is_relative() => PathBuf::from(root).join(dir),
        _ => dir.to_path_buf(),
    }
}

fn print_json<T: serde::Serialize + ?Sized>(value: &T) -> Result<(), Error> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Train(args) => {
            let report = run_train(&args.to_config()?)?;
            print_json(&serde_json::json!({
                "output_dir": report.config.output_dir,
                "mean": report.mean,
                "std": report.std,
                "wall_clock_secs": report.wall_clock_secs,
            }))
        }
        Command::Sweep { param, values, run } => {
            let report = run_sweep(&run.to_config()?, param, &values)?;
            print_json(&report)
        }
        Command::Ablate { components, run } => {
            let report = run_ablation(&run.to_config()?, &components)?;
            print_json(&report)
        }
        Command::ExportFeatures {
            checkpoint,
            episodes,
            output,
        } => {
            let summary = export_features(&checkpoint, episodes, &resolve_output(&output))?;
            print_json(&summary)
        }
        Command::Eval { checkpoint, output } => {
            let report = run_eval(&checkpoint)?;
            if let Some(out) = output {
                let out = resolve_output(&out);
                if let Some(parent) = out.parent() {
                    std::fs::create_dir_all(parent)?;
                }
                let lines: Vec<String> = report
                    .episodes
                    .iter()
                    .map(serde_json::to_string)
                    .collect::<Result<_, _>>()?;
                std::fs::write(&out, lines.join("\n") + "\n")?;
            }
            print_json(&report)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 1 } else { 2 })
        }
    }
}
