mod commands;
mod support;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use optexit_core::analysis::Signal;
use optexit_core::baselines::Policy;
use optexit_core::features::FeatureSource;

#[derive(Parser, Debug)]
#[command(name = "optexit", version, about = "Early exit for chain-of-thought reasoning")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Reasoning-model endpoint: an http(s) URL or `mock:<script.jsonl>`.
    #[arg(long, global = true)]
    pub endpoint: Option<String>,
    /// Endpoint for curation calls; defaults to --endpoint.
    #[arg(long, global = true)]
    pub pipeline_endpoint: Option<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Upper bound on concurrent HTTP requests.
    #[arg(long, global = true, default_value_t = 8)]
    pub max_inflight: usize,
    /// Output file (or directory for `synth`); stdout when omitted.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Model name sent to HTTP endpoints.
    #[arg(long, global = true, default_value = "default")]
    pub model: String,
    /// Run data-parallel loops on one thread.
    #[arg(long, global = true)]
    pub sequential: bool,
}

#[derive(Args, Debug, Clone)]
pub struct ExitArgs {
    #[arg(long, default_value_t = 10)]
    pub window: usize,
    #[arg(long, default_value_t = 6)]
    pub majority: usize,
    /// Probability threshold; defaults to the one stored in the probe.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Decide on partial windows during the first W tokens.
    #[arg(long)]
    pub allow_partial: bool,
    #[arg(long, default_value_t = 32768)]
    pub max_cot_tokens: usize,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample CoT traces with top-K logprobs for a prompts file.
    Generate {
        /// JSONL with `id`, `prompt` and optional `source`.
        #[arg(long)]
        prompts: PathBuf,
        #[arg(long, default_value_t = 20)]
        k: usize,
        #[arg(long, default_value_t = 1)]
        samples: usize,
        #[arg(long, default_value_t = 0.7)]
        temperature: f64,
        #[arg(long, default_value_t = 32768)]
        max_tokens: usize,
    },
    /// Write the scripted demo corpus (`traces.jsonl`, `script.jsonl`) into --out.
    Synth {
        #[arg(long, default_value_t = 20)]
        n: usize,
    },
    /// Locate the answer position in each trace and write labeled traces.
    Curate {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 4)]
        max_retries: usize,
        #[arg(long, default_value_t = 0.9)]
        min_fuzzy: f64,
        /// Per-trace status CSV.
        #[arg(long)]
        report: Option<PathBuf>,
        /// TOML file overriding the built-in prompt templates.
        #[arg(long)]
        prompts: Option<PathBuf>,
        #[arg(long, default_value_t = 1024)]
        max_tokens: usize,
    },
    /// Train the exit probe on labeled traces.
    TrainProbe {
        /// Labeled file or a directory of them.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "logprob")]
        features: FeatureSource,
        /// Directory holding `<trace_id>.optx` files; defaults to the data directory.
        #[arg(long)]
        sidecar_dir: Option<PathBuf>,
        /// `linear`, `mlp` or `mlp:W1,W2,...`
        #[arg(long, default_value = "linear")]
        arch: optexit_core::probe::Arch,
        #[arg(long, default_value_t = 0.01)]
        lr: f64,
        #[arg(long, default_value_t = 0.9)]
        momentum: f64,
        #[arg(long, default_value_t = 200)]
        epochs: usize,
        #[arg(long, default_value_t = 256)]
        batch_size: usize,
        #[arg(long, default_value_t = 20)]
        patience: usize,
        #[arg(long, default_value_t = 0.2)]
        val_frac: f64,
        #[arg(long, default_value_t = 0.7)]
        tau: f64,
        /// Per-epoch CSV log.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Stream fresh generations and stop them when the probe votes to exit.
    Run {
        #[arg(long)]
        probe: PathBuf,
        #[arg(long, default_value = "logprob")]
        features: FeatureSource,
        /// Reference traces supplying prompts, full-run length and answer.
        #[arg(long)]
        traces: PathBuf,
        #[command(flatten)]
        exit: ExitArgs,
        #[arg(long, default_value_t = 20)]
        k: usize,
        #[arg(long, default_value_t = 1024)]
        max_tokens: usize,
        /// JSONL of `trace_id`, `answer` ground truth.
        #[arg(long)]
        answers: Option<PathBuf>,
    },
    /// Replay a policy over stored traces.
    Evaluate {
        #[arg(long)]
        policy: Policy,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        probe: Option<PathBuf>,
        #[arg(long, default_value = "logprob")]
        features: FeatureSource,
        #[arg(long)]
        sidecar_dir: Option<PathBuf>,
        #[command(flatten)]
        exit: ExitArgs,
        #[arg(long, default_value_t = 64)]
        deer_chunk: usize,
        #[arg(long, default_value_t = 0.95)]
        deer_threshold: f64,
        #[arg(long, default_value_t = 64)]
        dynasor_interval: usize,
        #[arg(long, default_value_t = 8)]
        dynasor_w: usize,
        #[arg(long, default_value_t = 1024)]
        max_tokens: usize,
        #[arg(long)]
        answers: Option<PathBuf>,
    },
    /// Hindsight-optimal reasoning length per trace.
    Horl {
        #[arg(long)]
        dataset: PathBuf,
        /// `exact` or `grid`.
        #[arg(long, default_value = "exact")]
        strategy: String,
        #[arg(long, default_value_t = 21)]
        grid_points: usize,
        #[arg(long, default_value_t = 1024)]
        max_tokens: usize,
    },
    /// Accuracy and compression when keeping a fixed fraction of each CoT.
    Sweep {
        #[arg(long)]
        dataset: PathBuf,
        /// `start:end:step` or a comma list.
        #[arg(long, default_value = "0.05:1.0:0.05")]
        fractions: String,
        /// Labeled traces for the answer-arrival marker; used automatically
        /// when --dataset is labeled.
        #[arg(long)]
        labeled: Option<PathBuf>,
        #[arg(long)]
        answers: Option<PathBuf>,
        #[arg(long)]
        svg: Option<PathBuf>,
        #[arg(long, default_value_t = 1024)]
        max_tokens: usize,
    },
    /// Signal studies over labeled traces.
    Analyze {
        #[command(subcommand)]
        which: Analysis,
    },
    /// Aggregate result files into a benchmark table.
    Report {
        /// `results.csv` or `dataset=results.csv`; repeatable.
        #[arg(long = "results", required = true)]
        results: Vec<String>,
    },
    /// Non-dominated rows of a benchmark table.
    Pareto {
        #[arg(long)]
        table: PathBuf,
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long)]
        svg: Option<PathBuf>,
    },
    /// Serve a mock script over the chat-completions API.
    MockServe {
        #[arg(long)]
        script: PathBuf,
        #[arg(long, default_value_t = 8000)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
}

#[derive(Subcommand, Debug)]
pub enum Analysis {
    /// Signal averaged around the answer position.
    EventLock {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "confidence")]
        signal: Signal,
        #[arg(long, default_value_t = 100)]
        pre: usize,
        #[arg(long, default_value_t = 100)]
        post: usize,
        /// Moving-average width for the SVG curve.
        #[arg(long, default_value_t = 1)]
        smooth: usize,
        #[arg(long)]
        svg: Option<PathBuf>,
    },
    /// Occurrence rate of a token before and after the answer.
    TokenShift {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "hmm")]
        needle: String,
    },
    /// Shift rates binned by CoT length.
    RateLength {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "hmm")]
        needle: String,
        #[arg(long, default_value_t = 10)]
        bins: usize,
    },
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    let g = &cli.global;
    match cli.command {
        Command::Generate { prompts, k, samples, temperature, max_tokens } => {
            commands::generate(g, &prompts, k, samples, temperature, max_tokens)
        }
        Command::Synth { n } => commands::synth(g, n),
        Command::Curate { input, max_retries, min_fuzzy, report, prompts, max_tokens } => {
            commands::curate(g, &input, max_retries, min_fuzzy, report.as_deref(), prompts.as_deref(), max_tokens)
        }
        Command::TrainProbe {
            data,
            features,
            sidecar_dir,
            arch,
            lr,
            momentum,
            epochs,
            batch_size,
            patience,
            val_frac,
            tau,
            log,
        } => {
            let config = optexit_core::probe::TrainConfig {
                arch,
                learning_rate: lr,
                momentum,
                batch_size,
                max_epochs: epochs,
                early_stop_patience: patience,
                validation_fraction: val_frac,
                decision_threshold: tau,
                seed: g.seed.unwrap_or(7),
                exec: support::exec_mode(g),
            };
            commands::train_probe(g, &data, features, sidecar_dir.as_deref(), &config, log.as_deref())
        }
        Command::Run { probe, features, traces, exit, k, max_tokens, answers } => {
            commands::run(g, &probe, features, &traces, &exit, k, max_tokens, answers.as_deref())
        }
        Command::Evaluate {
            policy,
            dataset,
            probe,
            features,
            sidecar_dir,
            exit,
            deer_chunk,
            deer_threshold,
            dynasor_interval,
            dynasor_w,
            max_tokens,
            answers,
        } => commands::evaluate(
            g,
            &commands::EvaluateArgs {
                policy,
                dataset,
                probe,
                features,
                sidecar_dir,
                exit,
                deer: optexit_core::baselines::DeerConfig { chunk_tokens: deer_chunk, prob_threshold: deer_threshold },
                dynasor: optexit_core::baselines::DynasorConfig {
                    interval_tokens: dynasor_interval,
                    consistency_w: dynasor_w,
                    ..Default::default()
                },
                max_tokens,
                answers,
            },
        ),
        Command::Horl { dataset, strategy, grid_points, max_tokens } => {
            commands::horl(g, &dataset, &strategy, grid_points, max_tokens)
        }
        Command::Sweep { dataset, fractions, labeled, answers, svg, max_tokens } => commands::sweep(
            g,
            &dataset,
            &fractions,
            labeled.as_deref(),
            answers.as_deref(),
            svg.as_deref(),
            max_tokens,
        ),
        Command::Analyze { which } => commands::analyze(g, which),
        Command::Report { results } => commands::report(g, &results),
        Command::Pareto { table, dataset, svg } => commands::pareto(g, &table, dataset.as_deref(), svg.as_deref()),
        Command::MockServe { script, port, host } => commands::mock_serve(&script, &host, port),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(support::exit_code(&e))
        }
    }
}
