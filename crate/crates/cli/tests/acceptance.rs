//! One PASS/FAIL line per acceptance criterion. Runs without the libtest
//! harness so the lines show up in plain `cargo test` output.

use std::collections::HashMap;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use optexit_core::analysis::{
    event_locked_average, rate_vs_length, shift_summary, token_confidence, token_shift_rates, ShiftPoint,
    SignalSeries,
};
use optexit_core::curation::{assemble_dataset, curate_trace, CurationConfig, CurationError, Prompts};
use optexit_core::exit::controller::first_exit;
use optexit_core::exit::{horl, truncation_sweep, Decision, ExitConfig, ExitSession, HorlStrategy};
use optexit_core::features::{read_optx, write_optx, FeatureMatrix};
use optexit_core::llm::mock::{Matcher, MockEntry, MockScript, ScriptedLlm};
use optexit_core::llm::RoleTag;
use optexit_core::probe::loss::{loss_and_grad, Sample};
use optexit_core::probe::train::separable_fixture;
use optexit_core::probe::{class_weights, load_model, save_model, train, Arch, ClassWeights, ProbeModel, TrainConfig};
use optexit_core::synth::{scripted_corpus, SynthConfig};
use optexit_core::trace::{assign_labels, load_labeled, load_traces, save_labeled, save_traces};
use optexit_core::{AnswerPosition, ExecMode, TokenRecord, TopKEntry, Trace};
use optexit_gateway::MockServer;

type Check = Result<(), String>;
type Criterion = (&'static str, fn() -> Check);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

fn record(logprobs: &[f64]) -> TokenRecord {
    TokenRecord {
        index: 0,
        token_id: 0,
        token_text: "x".into(),
        chosen_logprob: logprobs[0],
        top_k: logprobs.iter().map(|&logprob| TopKEntry { token_id: 0, logprob }).collect(),
    }
}

fn token_confidence_oracle() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for case in 0..1000 {
        let k = rng.gen_range(1..=20);
        let mut lps: Vec<f64> = (0..k).map(|_| -rng.gen_range(0.0..15.0)).collect();
        lps.sort_by(|a, b| b.total_cmp(a));
        let direct = lps.iter().map(|lp| -lp).sum::<f64>() / k as f64;
        let c = token_confidence(&record(&lps)).map_err(|e| e.to_string())?;
        let rel = (c - direct).abs() / direct.abs().max(1e-300);
        ensure!(rel < 1e-12 || c == direct, "case {case}: {c} vs {direct}");
    }
    for v in [10usize, 1000] {
        let c = token_confidence(&record(&[-(v as f64).ln(); 20])).map_err(|e| e.to_string())?;
        ensure!((c - (v as f64).ln()).abs() <= 1e-12, "uniform over {v}: {c}");
    }
    ensure!(start.elapsed() < Duration::from_secs(1), "took {:?}", start.elapsed());
    Ok(())
}

fn class_weight_identity() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    for _ in 0..1000 {
        let (n0, n1) = (rng.gen_range(1..1_000_000usize), rng.gen_range(1..1_000_000usize));
        let w = class_weights(n0, n1).map_err(|e| e.to_string())?;
        let total = (n0 + n1) as f64;
        ensure!((n0 as f64 * w.w0 + n1 as f64 * w.w1 - total).abs() <= 1e-9 * total, "({n0},{n1})");
    }
    for (n0, n1, w0, w1) in [(500, 500, 1.0, 1.0), (900, 100, 5.0 / 9.0, 5.0), (3, 1, 2.0 / 3.0, 2.0)] {
        let w = class_weights(n0, n1).map_err(|e| e.to_string())?;
        ensure!((w.w0 - w0).abs() < 1e-9 && (w.w1 - w1).abs() < 1e-9, "({n0},{n1}) gave {w:?}");
    }
    Ok(())
}

fn gradient_check() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let h = 1e-6;
    for arch in [Arch::Linear, Arch::Mlp { hidden: vec![6] }] {
        for case in 0..100 {
            let dim = rng.gen_range(1..6);
            let n = arch.param_count(dim);
            let weights = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let model = ProbeModel::new(arch.clone(), dim, weights, 0.7).map_err(|e| e.to_string())?;
            let rows: Vec<(Vec<f64>, u8)> = (0..rng.gen_range(1..12))
                .map(|_| ((0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect(), rng.gen_range(0..2u8)))
                .collect();
            let samples: Vec<Sample<'_>> = rows.iter().map(|(x, y)| Sample { x, y: *y }).collect();
            let w = ClassWeights { w0: rng.gen_range(0.2..3.0), w1: rng.gen_range(0.2..3.0) };
            let loss = |m: &ProbeModel| loss_and_grad(m, &samples, w, ExecMode::Sequential).unwrap().0;
            let (_, grad) = loss_and_grad(&model, &samples, w, ExecMode::Sequential).map_err(|e| e.to_string())?;
            let fd: Vec<f64> = (0..n)
                .map(|j| {
                    let (mut plus, mut minus) = (model.clone(), model.clone());
                    plus.weights[j] += h;
                    minus.weights[j] -= h;
                    (loss(&plus) - loss(&minus)) / (2.0 * h)
                })
                .collect();
            let diff = grad.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let scale = grad.iter().chain(&fd).map(|v| v * v).sum::<f64>().sqrt().max(1e-8);
            ensure!(diff / scale < 1e-4, "{arch:?} case {case}: rel err {}", diff / scale);
        }
    }
    Ok(())
}

fn probe_learns_separable_fixture() -> Check {
    let start = Instant::now();
    let data = separable_fixture(200, 30, 1.0, 104);
    let cfg = TrainConfig { max_epochs: 200, exec: ExecMode::Sequential, seed: 5, ..TrainConfig::default() };
    let (a, report) = train(&data, &cfg).map_err(|e| e.to_string())?;
    ensure!(report.best_val_macro_f1 >= 0.95, "macro-F1 {}", report.best_val_macro_f1);
    ensure!(start.elapsed() < Duration::from_secs(30), "took {:?}", start.elapsed());
    let (b, _) = train(&data, &cfg).map_err(|e| e.to_string())?;
    let same = a.weights.len() == b.weights.len()
        && a.weights.iter().zip(&b.weights).all(|(x, y)| x.to_bits() == y.to_bits());
    ensure!(same, "weights differ across identical seeds");
    Ok(())
}

fn reference_exit(bits: &[bool], window: usize, majority: usize) -> Option<usize> {
    (window..=bits.len()).find(|&t| bits[t - window..t].iter().filter(|&&b| b).count() >= majority)
}

fn exit_rule_matches_reference() -> Check {
    let cfg = ExitConfig::default();
    let bits = |s: &str| s.chars().map(|c| c == '1').collect::<Vec<_>>();
    let exit = |b: &[bool]| first_exit(&cfg, b).map_err(|e| e.to_string());
    ensure!(exit(&bits("0000111111"))? == Some(10), "0000111111");
    ensure!(exit(&bits(&"10".repeat(30)))?.is_none(), "alternating stream exited");
    ensure!(exit(&[false; 50])?.is_none(), "all-zero stream exited");

    let mut rng = ChaCha8Rng::seed_from_u64(105);
    for _ in 0..10_000 {
        let p_one = rng.gen_range(0.0..1.0);
        let probs: Vec<f64> = (0..rng.gen_range(0..60))
            .map(|_| if rng.gen_bool(p_one) { rng.gen_range(0.7..1.0) } else { rng.gen_range(0.0..0.7) })
            .collect();
        let b: Vec<bool> = probs.iter().map(|&p| p >= cfg.prob_threshold).collect();
        let want = reference_exit(&b, 10, 6);
        ensure!(exit(&b)? == want, "bits {b:?}");
        let mut s = ExitSession::new(cfg.clone()).map_err(|e| e.to_string())?;
        let mut got = None;
        for (i, &p) in probs.iter().enumerate() {
            if s.step(p).map_err(|e| e.to_string())? == Decision::Exit {
                got = Some(i + 1);
                break;
            }
        }
        ensure!(got == want, "probabilities {probs:?}");
    }
    Ok(())
}

fn scripted_trace(m: usize, hits: &[usize]) -> (Trace, ScriptedLlm) {
    let cot_tokens = (0..m)
        .map(|i| TokenRecord {
            index: i,
            token_id: i as u32,
            token_text: format!(" s{i}"),
            chosen_logprob: -0.1,
            top_k: vec![TopKEntry { token_id: i as u32, logprob: -0.1 }],
        })
        .collect();
    let trace = Trace {
        trace_id: "h".into(),
        prompt: format!("prompt {m} {hits:?}"),
        cot_tokens,
        solution_text: "\\boxed{9}".into(),
        final_answer: Some("9".into()),
        source: "t".into(),
        model: "m".into(),
        k: 1,
    };
    let mut entries = Vec::new();
    let mut i = 0;
    while i < hits.len() {
        let lo = hits[i];
        let mut hi = lo + 1;
        while i + 1 < hits.len() && hits[i + 1] == hi {
            hi += 1;
            i += 1;
        }
        let matcher = Matcher::prompt(&trace.prompt).from_index(lo).until_index(hi);
        entries.push(MockEntry::text(RoleTag::SolveAfterTruncation, matcher, "\\boxed{9}"));
        i += 1;
    }
    (trace, ScriptedLlm::new(MockScript::new(entries).unwrap()))
}

fn horl_exact_and_grid() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    for case in 0..200 {
        let m = rng.gen_range(2..=50);
        let monotone = case % 2 == 0;
        let hits: Vec<usize> = if monotone {
            (rng.gen_range(0..=m + 2)..m).collect()
        } else {
            (1..m).filter(|_| rng.gen_bool(0.2)).collect()
        };
        let (trace, llm) = scripted_trace(m, &hits);
        let brute = (1..m).find(|i| hits.contains(i)).unwrap_or(m);
        let exact = horl(&trace, &llm, HorlStrategy::ExactScan, 16).map_err(|e| e.to_string())?;
        ensure!(exact == brute, "m={m} hits={hits:?}: exact {exact} vs {brute}");
        let grid = horl(&trace, &llm, HorlStrategy::Grid { points: 21 }, 16).map_err(|e| e.to_string())?;
        ensure!(grid >= exact, "grid {grid} below exact {exact}");
        ensure!(!monotone || grid == exact, "monotone m={m}: grid {grid} vs exact {exact}");
    }
    for (from, want) in [(7usize, 7usize), (0, 1)] {
        let hits: Vec<usize> = (from..20).collect();
        let (trace, llm) = scripted_trace(20, &hits);
        let got = horl(&trace, &llm, HorlStrategy::ExactScan, 16).map_err(|e| e.to_string())?;
        ensure!(got == want, "answer from {from}: horl {got}, expected {want}");
    }
    Ok(())
}

fn curation_feedback_loop() -> Check {
    let corpus = scripted_corpus(&SynthConfig { n_traces: 1, ..SynthConfig::default() });
    let t = corpus.traces[0].clone();
    let q = corpus.answer_tokens[0];
    let answer = optexit_core::answer::parse_boxed(&t.solution_text).ok_or("no boxed answer")?;
    let cfg = CurationConfig { exec: ExecMode::Sequential, ..CurationConfig::default() };
    let p = Prompts::default();
    let cot = t.cot_text();
    let wrong = "let me think".to_string();
    let right = format!("so the value is {answer}");
    let script = MockScript::new(vec![
        MockEntry::text(RoleTag::Identify, Matcher::prompt(&p.identify_prompt(&answer, &cot, &[])), wrong.clone()),
        MockEntry::text(
            RoleTag::Identify,
            Matcher::prompt(&p.identify_prompt(&answer, &cot, std::slice::from_ref(&wrong))),
            right.clone(),
        ),
        MockEntry::text(RoleTag::Verify, Matcher::prompt(&p.verify_prompt(&wrong, &answer)), "False"),
        MockEntry::text(RoleTag::Verify, Matcher::prompt(&p.verify_prompt(&right, &answer)), "True"),
    ])
    .map_err(|e| e.to_string())?;
    let llm = ScriptedLlm::new(script);
    let lt = curate_trace(&t, &cfg, &llm).map_err(|e| e.to_string())?;
    ensure!(lt.answer.retries_used == 1, "retries_used {}", lt.answer.retries_used);
    ensure!(lt.answer.token_index == q + 1, "token_index {} vs {}", lt.answer.token_index, q + 1);
    ensure!(llm.requests()[2].user_prompt.contains(&wrong), "rejected span not fed back");

    let refuse = MockScript::new(vec![
        MockEntry::text(RoleTag::Identify, Matcher::any(), "the value"),
        MockEntry::text(RoleTag::Verify, Matcher::any(), "False"),
    ])
    .map_err(|e| e.to_string())?;
    for k in [1usize, 4] {
        let llm = ScriptedLlm::new(refuse.clone());
        let config = CurationConfig { max_retries: k, ..cfg.clone() };
        match curate_trace(&t, &config, &llm) {
            Err(CurationError::RetriesExhausted { attempts, .. }) if attempts == k => {}
            other => return Err(format!("K={k}: {other:?}")),
        }
        ensure!(llm.calls_for(RoleTag::Verify) == k, "K={k}: {} verify calls", llm.calls_for(RoleTag::Verify));
    }
    match assemble_dataset(&[t], &cfg, &ScriptedLlm::new(refuse)) {
        Err(CurationError::AllFailed(_)) => Ok(()),
        other => Err(format!("dataset with no successes: {other:?}")),
    }
}

fn optexit(args: &[&str]) -> Result<Vec<u8>, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_optexit"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("optexit {args:?}: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(out.stdout)
}

/// synth, curate, train, run and report in `dir`; returns every artifact.
fn pipeline(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let p = |name: &str| dir.join(name).to_string_lossy().into_owned();
    optexit(&["synth", "--out", &p("corpus")])?;
    let server = MockServer::start_file(&dir.join("corpus/script.jsonl"), 0).map_err(|e| e.to_string())?;
    let url = server.url();
    let traces = p("corpus/traces.jsonl");
    optexit(&["--endpoint", &url, "curate", "--in", &traces, "--out", &p("labeled.jsonl")])?;
    optexit(&["--sequential", "train-probe", "--data", &p("labeled.jsonl"), "--out", &p("probe.opxm")])?;
    optexit(&["--endpoint", &url, "run", "--probe", &p("probe.opxm"), "--traces", &traces, "--out", &p("results.csv")])?;
    optexit(&["report", "--results", &format!("synth={}", p("results.csv")), "--out", &p("table.csv")])?;
    ["labeled.jsonl", "probe.opxm", "results.csv", "table.csv"]
        .iter()
        .map(|f| std::fs::read(dir.join(f)).map(|b| (f.to_string(), b)).map_err(|e| e.to_string()))
        .collect()
}

fn end_to_end_cli() -> Check {
    let start = Instant::now();
    let dirs = [tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?];
    let first = pipeline(dirs[0].path())?;
    let second = pipeline(dirs[1].path())?;
    for ((name, a), (_, b)) in first.iter().zip(&second) {
        ensure!(a == b, "{name} differs between runs");
    }
    let table = String::from_utf8_lossy(&first[3].1).into_owned();
    let row = table.lines().find(|l| l.starts_with("optexit,")).ok_or("no optexit row")?;
    let cols: Vec<&str> = row.split(',').collect();
    let accuracy: f64 = cols[2].parse().map_err(|_| format!("bad row {row}"))?;
    let cr: f64 = cols[4].parse().map_err(|_| format!("bad row {row}"))?;
    ensure!(accuracy == 100.0, "accuracy {accuracy}");
    ensure!(cr <= 60.0, "compression {cr}%");
    ensure!(start.elapsed() < Duration::from_secs(120), "took {:?}", start.elapsed());
    Ok(())
}

fn sweep_plateau() -> Check {
    let corpus = scripted_corpus(&SynthConfig::default());
    let fractions: Vec<f64> = (1..=20).map(|i| i as f64 * 0.05).collect();
    let res = truncation_sweep(&corpus.traces, &fractions, &HashMap::new(), &corpus.llm(), 64, ExecMode::Parallel)
        .map_err(|e| e.to_string())?;
    let at = |f: f64| res.points.iter().find(|p| (p.fraction - f).abs() < 1e-9).map(|p| p.mean_accuracy);
    ensure!(at(0.5).is_some() && at(0.5) == at(1.0), "acc(0.5) {:?} vs acc(1.0) {:?}", at(0.5), at(1.0));
    Ok(())
}

fn analysis_oracles() -> Check {
    let spike = |id: &str, at: usize| {
        let mut values = vec![0.0; 12];
        values[at] = 10.0;
        SignalSeries { trace_id: id.into(), values }
    };
    let series = vec![spike("a", 3), spike("b", 6), spike("c", 8)];
    let ela = event_locked_average(&series, &[3, 6, 8], (3, 3)).map_err(|e| e.to_string())?;
    ensure!(ela.at(0).map(|(m, s, _)| (m, s)) == Some((10.0, 0.0)), "offset 0: {:?}", ela.at(0));

    let pt = |b: f64, a: f64, len: usize| ShiftPoint { trace_id: len.to_string(), rate_before: b, rate_after: a, cot_length: len };
    let s = shift_summary(&[pt(0.5, 0.33, 1), pt(0.1, 0.2, 2), pt(0.0, 0.0, 3)]).map_err(|e| e.to_string())?;
    ensure!((s.above_diagonal_pct - 100.0 / 3.0).abs() < 0.01, "above {}", s.above_diagonal_pct);
    ensure!((s.at_origin_pct - 100.0 / 3.0).abs() < 0.01, "origin {}", s.at_origin_pct);

    let points: Vec<ShiftPoint> = (1..=100).map(|l| pt(0.5, 0.5, l)).collect();
    let bins = rate_vs_length(&points, 10).map_err(|e| e.to_string())?;
    ensure!(bins.len() == 10 && bins[0].n == 10, "first bin {:?}", bins.first());

    let words = ["hmm", "a", "hmm", "b", "ANS", "c", "hmm"];
    let trace = Trace {
        trace_id: "s".into(),
        prompt: "p".into(),
        cot_tokens: words
            .iter()
            .enumerate()
            .map(|(i, w)| TokenRecord {
                index: i,
                token_id: i as u32,
                token_text: w.to_string(),
                chosen_logprob: 0.0,
                top_k: vec![TopKEntry { token_id: i as u32, logprob: 0.0 }],
            })
            .collect(),
        solution_text: String::new(),
        final_answer: None,
        source: "t".into(),
        model: "m".into(),
        k: 1,
    };
    let shift = token_shift_rates(&trace, 4, "hmm");
    ensure!(shift.rate_before == 0.5, "before {}", shift.rate_before);
    ensure!((shift.rate_after - 1.0 / 3.0).abs() < 1e-12, "after {}", shift.rate_after);
    Ok(())
}

fn same_bytes(a: &Path, b: &Path) -> Check {
    let (x, y) = (std::fs::read(a).map_err(|e| e.to_string())?, std::fs::read(b).map_err(|e| e.to_string())?);
    ensure!(x == y, "{} and {} differ", a.display(), b.display());
    Ok(())
}

fn file_round_trips() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let err = |e: &dyn std::fmt::Display| e.to_string();
    let corpus = scripted_corpus(&SynthConfig { n_traces: 4, ..SynthConfig::default() });

    save_traces(&a, &corpus.traces).map_err(|e| err(&e))?;
    save_traces(&b, &load_traces(&a).map_err(|e| err(&e))?).map_err(|e| err(&e))?;
    same_bytes(&a, &b)?;

    let mut labeled = Vec::new();
    for (t, &q) in corpus.traces.iter().zip(&corpus.answer_tokens) {
        let pos = AnswerPosition {
            trace_id: t.trace_id.clone(),
            span_text: "span \"quoted\"".into(),
            char_start: 1,
            char_end: 4,
            token_index: q + 1,
            verified: true,
            retries_used: 1,
        };
        labeled.push(assign_labels(t.clone(), pos).map_err(|e| err(&e))?);
    }
    save_labeled(&a, &labeled).map_err(|e| err(&e))?;
    save_labeled(&b, &load_labeled(&a).map_err(|e| err(&e))?).map_err(|e| err(&e))?;
    same_bytes(&a, &b)?;

    let m = FeatureMatrix::from_rows("x", &[vec![0.1, -2.5, 3.0], vec![1.0, 1.5, 1e-7]]);
    write_optx(&a, &m).map_err(|e| err(&e))?;
    write_optx(&b, &read_optx(&a, "x").map_err(|e| err(&e))?).map_err(|e| err(&e))?;
    same_bytes(&a, &b)?;

    let model = ProbeModel::new(Arch::Mlp { hidden: vec![3] }, 2, (0..13).map(|i| i as f64 / 7.0).collect(), 0.7)
        .map_err(|e| err(&e))?;
    save_model(&a, &model).map_err(|e| err(&e))?;
    save_model(&b, &load_model(&a).map_err(|e| err(&e))?).map_err(|e| err(&e))?;
    same_bytes(&a, &b)
}

fn main() {
    let checks: [Criterion; 11] = [
        ("token confidence matches the direct mean", token_confidence_oracle),
        ("class weights balance both classes", class_weight_identity),
        ("probe gradients match finite differences", gradient_check),
        ("probe learns a separable fixture deterministically", probe_learns_separable_fixture),
        ("exit rule matches the reference simulator", exit_rule_matches_reference),
        ("horl exact scan and grid search", horl_exact_and_grid),
        ("curation feeds back rejected spans and gives up after K", curation_feedback_loop),
        ("end-to-end CLI run over HTTP mock", end_to_end_cli),
        ("truncation sweep plateaus after the answer", sweep_plateau),
        ("analysis oracles", analysis_oracles),
        ("trace, labeled, OPTX and OPXM files round-trip", file_round_trips),
    ];
    let mut failed = Vec::new();
    for (name, check) in checks {
        let result = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        match result {
            Ok(()) => println!("PASS {name}"),
            Err(reason) => {
                println!("FAIL {name}: {reason}");
                failed.push(name);
            }
        }
    }
    if !failed.is_empty() {
        eprintln!("{} of {} criteria failed", failed.len(), checks.len());
        std::process::exit(1);
    }
    println!("all {} criteria passed", checks.len());
}
