use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};

use optexit_core::analysis::{
    event_locked_average, rate_length_csv, rate_vs_length, shift_csv, shift_summary, token_shift_rates,
    SignalSeries,
};
use optexit_core::answer::{answers_match, parse_boxed};
use optexit_core::baselines::{deer_outcome, dynasor_outcome, nothinking, DeerConfig, DynasorConfig, Policy, ThinkMarkers};
use optexit_core::curation::{assemble_dataset, CurationConfig, Prompts};
use optexit_core::exec;
use optexit_core::exit::{
    full_run_answer, horl as horl_search, parse_fractions, replay_session, run_session, truncation_sweep, vanilla,
    ExitConfig, ExitOutcome, HorlStrategy, SessionParams, Warmup,
};
use optexit_core::features::{attach_features, sidecar_name, FeatureMatrix, FeatureSource, LogprobFeatures};
use optexit_core::llm::{LlmClient, LlmRequest, RoleTag};
use optexit_core::probe::{load_model, save_model, train, ProbeModel, TrainConfig, TrainExample};
use optexit_core::report::{
    line_svg, pareto as pareto_rows, pareto_svg, parse_results_csv, parse_table_csv, report as report_rows,
    results_csv, table_csv, ReportInput, ResultRow, ScoredOutcome,
};
use optexit_core::synth::{scripted_corpus, SynthConfig};
use optexit_core::trace::{load_labeled, save_labeled, save_traces, THINK_CLOSE};
use optexit_core::{LabeledTrace, Trace};
use optexit_gateway::MockServer;

use crate::support::{
    emit, exec_mode, load_answers, load_labeled_any, load_traces_any, make_llm, require_out, usage, write_file,
};
use crate::{Analysis, ExitArgs, Global};

fn score(policy: &str, trace: &Trace, outcome: ExitOutcome, answers: &HashMap<String, String>) -> ScoredOutcome {
    let truth = answers.get(&trace.trace_id).cloned().or_else(|| full_run_answer(trace));
    let correct = match (&outcome.answer, truth) {
        (Some(a), Some(t)) => answers_match(a, &t),
        _ => false,
    };
    ScoredOutcome { policy: policy.into(), dataset: trace.source.clone(), outcome, correct }
}

/// Writes the results CSV and prints the aggregate table to stderr.
fn emit_results(g: &Global, mut scored: Vec<ScoredOutcome>) -> Result<()> {
    scored.sort_by(|a, b| a.outcome.trace_id.cmp(&b.outcome.trace_id));
    let rows: Vec<ResultRow> = scored.iter().map(ResultRow::from).collect();
    emit(g, &results_csv(&rows)?)?;
    let inputs: Vec<ReportInput> = scored.iter().map(ReportInput::from).collect();
    if !inputs.is_empty() {
        eprint!("{}", table_csv(&report_rows(&inputs)?));
    }
    Ok(())
}

fn exit_config(args: &ExitArgs, probe: &ProbeModel) -> ExitConfig {
    ExitConfig {
        window: args.window,
        majority_min: args.majority,
        prob_threshold: args.tau.unwrap_or(probe.decision_threshold),
        max_cot_tokens: args.max_cot_tokens,
        warmup: if args.allow_partial { Warmup::AllowPartial } else { Warmup::RequireFullWindow },
    }
}

fn features_for(trace: &Trace, source: FeatureSource, sidecar_dir: &Path) -> Result<FeatureMatrix> {
    Ok(match source {
        FeatureSource::Logprob => LogprobFeatures::matrix(trace),
        FeatureSource::Sidecar => {
            let path = sidecar_dir.join(sidecar_name(&trace.trace_id));
            attach_features(trace, &path).with_context(|| format!("attaching {}", path.display()))?
        }
    })
}

fn parent_dir(path: &Path) -> PathBuf {
    if path.is_dir() {
        return path.to_path_buf();
    }
    path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."))
}

pub fn generate(g: &Global, prompts: &Path, k: usize, samples: usize, temperature: f64, max_tokens: usize) -> Result<()> {
    let out = require_out(g)?;
    if k == 0 || samples == 0 {
        return Err(usage("--k and --samples must be at least 1"));
    }
    let llm = make_llm(g, g.endpoint.as_deref())?;
    let text = fs::read_to_string(prompts).with_context(|| format!("reading {}", prompts.display()))?;
    let default_source = prompts.file_stem().map_or("prompts".into(), |s| s.to_string_lossy().into_owned());
    let mut jobs = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let v: serde_json::Value =
            serde_json::from_str(line).with_context(|| format!("{}:{}", prompts.display(), n + 1))?;
        let get = |key: &str| v.get(key).and_then(|x| x.as_str()).map(str::to_string);
        let id = get("id").ok_or_else(|| anyhow!("{}:{}: missing `id`", prompts.display(), n + 1))?;
        let prompt = get("prompt").ok_or_else(|| anyhow!("{}:{}: missing `prompt`", prompts.display(), n + 1))?;
        let source = get("source").unwrap_or_else(|| default_source.clone());
        for s in 0..samples {
            let trace_id = if samples == 1 { id.clone() } else { format!("{id}-s{s}") };
            jobs.push((trace_id, prompt.clone(), source.clone()));
        }
    }
    let results = exec::map(exec_mode(g), &jobs, |(trace_id, prompt, source)| {
        let mut req = LlmRequest::new(RoleTag::Generate, prompt.clone()).with_logprobs(k);
        req.temperature = temperature;
        req.max_tokens = max_tokens;
        let done = llm.complete(&req)?;
        Ok::<_, anyhow::Error>(split_generation(trace_id, prompt, source, &g.model, done.tokens))
    });
    let mut traces = Vec::new();
    for r in results {
        match r? {
            Some(t) => traces.push(t),
            None => eprintln!("warning: empty generation skipped"),
        }
    }
    save_traces(out, &traces)?;
    eprintln!("wrote {} traces", traces.len());
    Ok(())
}

/// Splits a generation at the first think-close token.
fn split_generation(
    trace_id: &str,
    prompt: &str,
    source: &str,
    model: &str,
    mut tokens: Vec<optexit_core::TokenRecord>,
) -> Option<Trace> {
    if tokens.is_empty() {
        return None;
    }
    let k = tokens.iter().map(|t| t.top_k.len()).min().unwrap_or(0).max(1);
    for (i, t) in tokens.iter_mut().enumerate() {
        t.index = i;
        t.top_k.truncate(k);
    }
    let cut = tokens.iter().position(|t| t.token_text.contains(THINK_CLOSE)).map_or(tokens.len(), |i| i + 1);
    let solution: String = tokens[cut..].iter().map(|t| t.token_text.as_str()).collect();
    tokens.truncate(cut);
    Some(Trace {
        trace_id: trace_id.into(),
        prompt: prompt.into(),
        final_answer: parse_boxed(&solution),
        cot_tokens: tokens,
        solution_text: solution,
        source: source.into(),
        model: model.into(),
        k,
    })
}

pub fn synth(g: &Global, n: usize) -> Result<()> {
    let dir = require_out(g)?;
    let corpus = scripted_corpus(&SynthConfig { n_traces: n, seed: g.seed.unwrap_or(11), ..SynthConfig::default() });
    fs::create_dir_all(dir)?;
    save_traces(&dir.join("traces.jsonl"), &corpus.traces)?;
    corpus.script.save(&dir.join("script.jsonl"))?;
    eprintln!("wrote {} traces and their mock script to {}", n, dir.display());
    Ok(())
}

pub fn curate(
    g: &Global,
    input: &Path,
    max_retries: usize,
    min_fuzzy: f64,
    report: Option<&Path>,
    prompts: Option<&Path>,
    max_tokens: usize,
) -> Result<()> {
    let out = require_out(g)?;
    if max_retries == 0 || !(0.0..=1.0).contains(&min_fuzzy) {
        return Err(usage("--max-retries must be >= 1 and --min-fuzzy within [0, 1]"));
    }
    let traces = load_traces_any(input)?;
    let prompts = match prompts {
        Some(p) => Prompts::load(p).map_err(|e| anyhow!("loading {}: {e}", p.display()))?,
        None => Prompts::default(),
    };
    let config = CurationConfig {
        max_retries,
        min_fuzzy_score: min_fuzzy,
        prompts,
        max_tokens,
        exec: exec_mode(g),
        ..CurationConfig::default()
    };
    let llm = make_llm(g, g.pipeline_endpoint.as_deref().or(g.endpoint.as_deref()))?;
    let (data, rep) = assemble_dataset(&traces, &config, llm.as_ref())?;
    save_labeled(out, &data)?;
    if let Some(path) = report {
        write_file(path, rep.to_csv().as_bytes())?;
    }
    eprintln!("curated {}/{} traces ({:.1}%)", rep.succeeded(), rep.attempted(), rep.success_rate());
    Ok(())
}

pub fn train_probe(
    g: &Global,
    data: &Path,
    features: FeatureSource,
    sidecar_dir: Option<&Path>,
    config: &TrainConfig,
    log: Option<&Path>,
) -> Result<()> {
    let out = require_out(g)?;
    let labeled = load_labeled_any(data)?;
    let dir = sidecar_dir.map_or_else(|| parent_dir(data), Path::to_path_buf);
    let examples = labeled
        .iter()
        .map(|lt| {
            Ok(TrainExample {
                trace_id: lt.trace.trace_id.clone(),
                features: features_for(&lt.trace, features, &dir)?,
                labels: lt.labels.clone(),
                loss_mask: lt.loss_mask.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (model, rep) = train(&examples, config)?;
    save_model(out, &model)?;
    if let Some(path) = log {
        let mut s = String::from("epoch,train_loss,val_macro_f1\n");
        for e in &rep.epochs {
            s.push_str(&format!("{},{},{}\n", e.epoch, e.train_loss, e.val_macro_f1));
        }
        write_file(path, s.as_bytes())?;
    }
    eprintln!(
        "trained on {} traces, validated on {}; best epoch {} with macro-F1 {:.4}",
        rep.train_traces.len(),
        rep.val_traces.len(),
        rep.best_epoch,
        rep.best_val_macro_f1
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn run(
    g: &Global,
    probe: &Path,
    features: FeatureSource,
    traces: &Path,
    exit: &ExitArgs,
    k: usize,
    max_tokens: usize,
    answers: Option<&Path>,
) -> Result<()> {
    if features != FeatureSource::Logprob {
        return Err(usage("live runs only support --features logprob"));
    }
    let probe = load_model(probe)?;
    let config = exit_config(exit, &probe);
    config.validate()?;
    let traces = load_traces_any(traces)?;
    let answers = load_answers(answers)?;
    let llm = make_llm(g, g.endpoint.as_deref())?;
    let params = SessionParams { top_logprobs: k, solution_max_tokens: max_tokens, ..SessionParams::default() };
    let outcomes = exec::map(exec_mode(g), &traces, |t| {
        run_session(t, &probe, &mut LogprobFeatures::new(), &config, &params, llm.as_ref())
            .with_context(|| format!("trace {}", t.trace_id))
    });
    let mut scored = Vec::new();
    for (t, o) in traces.iter().zip(outcomes) {
        scored.push(score("optexit", t, o?, &answers));
    }
    emit_results(g, scored)
}

pub struct EvaluateArgs {
    pub policy: Policy,
    pub dataset: PathBuf,
    pub probe: Option<PathBuf>,
    pub features: FeatureSource,
    pub sidecar_dir: Option<PathBuf>,
    pub exit: ExitArgs,
    pub deer: DeerConfig,
    pub dynasor: DynasorConfig,
    pub max_tokens: usize,
    pub answers: Option<PathBuf>,
}

pub fn evaluate(g: &Global, a: &EvaluateArgs) -> Result<()> {
    let traces = load_traces_any(&a.dataset)?;
    let answers = load_answers(a.answers.as_deref())?;
    let probe = match (a.policy, &a.probe) {
        (Policy::OptExit, None) => return Err(usage("--policy optexit needs --probe")),
        (Policy::OptExit, Some(p)) => Some(load_model(p)?),
        _ => None,
    };
    let config = probe.as_ref().map(|p| exit_config(&a.exit, p));
    if let Some(c) = &config {
        c.validate()?;
    }
    let llm: Option<Box<dyn LlmClient>> = match a.policy {
        Policy::Vanilla => None,
        _ => Some(make_llm(g, g.endpoint.as_deref())?),
    };
    let dir = a.sidecar_dir.clone().unwrap_or_else(|| parent_dir(&a.dataset));
    let markers = ThinkMarkers::default();
    let outcomes = exec::map(exec_mode(g), &traces, |t| -> Result<ExitOutcome> {
        let llm = llm.as_deref();
        let o = match a.policy {
            Policy::Vanilla => vanilla(t)?,
            Policy::NoThinking => nothinking(&t.trace_id, &t.prompt, Some(t), &markers, llm.unwrap(), a.max_tokens)?,
            Policy::Deer => deer_outcome(t, &a.deer, llm.unwrap(), a.max_tokens)?,
            Policy::Dynasor => dynasor_outcome(t, &a.dynasor, llm.unwrap(), a.max_tokens)?,
            Policy::OptExit => {
                let f = features_for(t, a.features, &dir)?;
                replay_session(t, &f, probe.as_ref().unwrap(), config.as_ref().unwrap(), llm.unwrap(), a.max_tokens)?
            }
        };
        Ok(o)
    });
    let mut scored = Vec::new();
    for (t, o) in traces.iter().zip(outcomes) {
        let o = o.with_context(|| format!("trace {}", t.trace_id))?;
        scored.push(score(a.policy.as_str(), t, o, &answers));
    }
    emit_results(g, scored)
}

pub fn horl(g: &Global, dataset: &Path, strategy: &str, grid_points: usize, max_tokens: usize) -> Result<()> {
    let strategy = match strategy.parse::<HorlStrategy>().map_err(usage)? {
        HorlStrategy::Grid { .. } if grid_points < 2 => return Err(usage("--grid-points must be >= 2")),
        HorlStrategy::Grid { .. } => HorlStrategy::Grid { points: grid_points },
        s => s,
    };
    let mut traces = load_traces_any(dataset)?;
    traces.sort_by(|a, b| a.trace_id.cmp(&b.trace_id));
    let llm = make_llm(g, g.endpoint.as_deref())?;
    let lengths = exec::map(exec_mode(g), &traces, |t| horl_search(t, llm.as_ref(), strategy, max_tokens));
    let mut s = String::from("trace_id,M,horl,ratio\n");
    let mut ratios = Vec::new();
    for (t, h) in traces.iter().zip(lengths) {
        let h = h.with_context(|| format!("trace {}", t.trace_id))?;
        let ratio = h as f64 / t.len() as f64;
        ratios.push(ratio);
        s.push_str(&format!("{},{},{},{}\n", t.trace_id, t.len(), h, ratio));
    }
    emit(g, &s)?;
    if !ratios.is_empty() {
        eprintln!("mean HORL/M {:.3} over {} traces", ratios.iter().sum::<f64>() / ratios.len() as f64, ratios.len());
    }
    Ok(())
}

pub fn sweep(
    g: &Global,
    dataset: &Path,
    fractions: &str,
    labeled: Option<&Path>,
    answers: Option<&Path>,
    svg: Option<&Path>,
    max_tokens: usize,
) -> Result<()> {
    let fractions = parse_fractions(fractions).map_err(|e| usage(e.to_string()))?;
    let traces = load_traces_any(dataset)?;
    let answers = load_answers(answers)?;
    let llm = make_llm(g, g.endpoint.as_deref())?;
    let mut result = truncation_sweep(&traces, &fractions, &answers, llm.as_ref(), max_tokens, exec_mode(g))?;
    let marker_data: Option<Vec<LabeledTrace>> = match labeled {
        Some(p) => Some(load_labeled_any(p)?),
        None => load_labeled(dataset).ok(),
    };
    if let Some(data) = marker_data {
        result = result.with_marker(&data);
    }
    emit(g, &result.to_csv())?;
    if let Some(path) = svg {
        let pts: Vec<(f64, f64)> = result.points.iter().map(|p| (p.fraction, p.mean_accuracy)).collect();
        let plot = line_svg("Truncation sweep", "fraction of CoT kept", "accuracy", &pts, result.answer_marker);
        write_file(path, plot.as_bytes())?;
    }
    Ok(())
}

pub fn analyze(g: &Global, which: Analysis) -> Result<()> {
    match which {
        Analysis::EventLock { data, signal, pre, post, smooth, svg } => {
            let labeled = load_labeled_any(&data)?;
            let series = labeled
                .iter()
                .map(|lt| SignalSeries::from_trace(&lt.trace, signal))
                .collect::<Result<Vec<_>, _>>()?;
            let positions: Vec<usize> = labeled.iter().map(|lt| lt.answer.token_index).collect();
            let avg = event_locked_average(&series, &positions, (pre, post))?;
            emit(g, &avg.to_csv())?;
            if let Some(path) = svg {
                let curve = avg.smoothed_mean(smooth);
                let pts: Vec<(f64, f64)> = avg.offsets.iter().zip(curve).map(|(&o, m)| (o as f64, m)).collect();
                let plot = line_svg("Event-locked signal", "offset from answer", "mean", &pts, Some(0.0));
                write_file(&path, plot.as_bytes())?;
            }
        }
        Analysis::TokenShift { data, needle } => {
            let labeled = load_labeled_any(&data)?;
            let points: Vec<_> =
                labeled.iter().map(|lt| token_shift_rates(&lt.trace, lt.answer.token_index, &needle)).collect();
            emit(g, &shift_csv(&points))?;
            let s = shift_summary(&points)?;
            eprintln!(
                "`{needle}`: {:.1}% above diagonal, {:.1}% at origin, n={}",
                s.above_diagonal_pct, s.at_origin_pct, s.n
            );
        }
        Analysis::RateLength { data, needle, bins } => {
            let labeled = load_labeled_any(&data)?;
            let points: Vec<_> =
                labeled.iter().map(|lt| token_shift_rates(&lt.trace, lt.answer.token_index, &needle)).collect();
            emit(g, &rate_length_csv(&rate_vs_length(&points, bins)?))?;
        }
    }
    Ok(())
}

pub fn report(g: &Global, results: &[String]) -> Result<()> {
    let mut inputs = Vec::new();
    for spec in results {
        let (dataset, path) = match spec.split_once('=') {
            Some((d, p)) => (d.to_string(), PathBuf::from(p)),
            None => ("all".to_string(), PathBuf::from(spec)),
        };
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let rows = parse_results_csv(&text).with_context(|| format!("parsing {}", path.display()))?;
        inputs.extend(rows.iter().map(|r| ReportInput::from_row(r, &dataset)));
    }
    emit(g, &table_csv(&report_rows(&inputs)?))
}

pub fn pareto(g: &Global, table: &Path, dataset: Option<&str>, svg: Option<&Path>) -> Result<()> {
    let text = fs::read_to_string(table).with_context(|| format!("reading {}", table.display()))?;
    let mut rows = parse_table_csv(&text)?;
    if let Some(d) = dataset {
        rows.retain(|r| r.dataset == d);
        if rows.is_empty() {
            bail!("no rows for dataset `{d}`");
        }
    }
    let front = pareto_rows(&rows)?;
    emit(g, &table_csv(&front))?;
    if let Some(path) = svg {
        write_file(path, pareto_svg(&rows, &front).as_bytes())?;
    }
    Ok(())
}

pub fn mock_serve(script: &Path, host: &str, port: u16) -> Result<()> {
    let script = optexit_core::llm::mock::MockScript::load(script)
        .with_context(|| format!("loading {}", script.display()))?;
    let server = MockServer::start_on(host, script, port, 8)?;
    println!("serving on {}", server.url());
    server.wait();
    Ok(())
}
