use std::collections::HashMap;

use optexit_core::baselines::{deer_outcome, dynasor_outcome, nothinking, DeerConfig, DynasorConfig, ThinkMarkers};
use optexit_core::curation::{assemble_dataset, CurationConfig};
use optexit_core::exit::{replay_session, run_session, truncation_sweep, vanilla, ExitConfig, SessionParams};
use optexit_core::features::LogprobFeatures;
use optexit_core::probe::{train, TrainConfig, TrainExample};
use optexit_core::report::{report, ReportInput, ScoredOutcome};
use optexit_core::synth::{scripted_corpus, SynthConfig};
use optexit_core::{ExecMode, LabeledTrace};

fn examples(data: &[LabeledTrace]) -> Vec<TrainExample> {
    data.iter()
        .map(|lt| TrainExample {
            trace_id: lt.trace.trace_id.clone(),
            features: LogprobFeatures::matrix(&lt.trace),
            labels: lt.labels.clone(),
            loss_mask: lt.loss_mask.clone(),
        })
        .collect()
}

fn run_pipeline(mode: ExecMode) -> (Vec<ScoredOutcome>, Vec<f64>) {
    let corpus = scripted_corpus(&SynthConfig::default());
    let llm = corpus.llm();
    let cfg = CurationConfig { exec: mode, ..CurationConfig::default() };
    let (data, report_rows) = assemble_dataset(&corpus.traces, &cfg, &llm).unwrap();
    assert_eq!(report_rows.succeeded(), 20);

    let train_cfg = TrainConfig { exec: mode, ..TrainConfig::default() };
    let (probe, rep) = train(&examples(&data), &train_cfg).unwrap();
    assert!(rep.best_val_macro_f1 > 0.9, "{rep:?}");

    let exit_cfg = ExitConfig::default();
    let params = SessionParams { top_logprobs: 4, ..SessionParams::default() };
    let mut scored = Vec::new();
    for t in &corpus.traces {
        let live = run_session(t, &probe, &mut LogprobFeatures::new(), &exit_cfg, &params, &llm).unwrap();
        let replay = replay_session(t, &LogprobFeatures::matrix(t), &probe, &exit_cfg, &llm, 1024).unwrap();
        assert_eq!(live, replay);
        let correct = live.matched_full_run_answer;
        scored.push(ScoredOutcome { policy: "optexit".into(), dataset: t.source.clone(), outcome: live, correct });
        let v = vanilla(t).unwrap();
        scored.push(ScoredOutcome { policy: "vanilla".into(), dataset: t.source.clone(), correct: v.matched_full_run_answer, outcome: v });
    }
    (scored, probe.weights)
}

#[test]
fn scripted_end_to_end() {
    let started = std::time::Instant::now();
    let (scored, weights) = run_pipeline(ExecMode::Parallel);
    let inputs: Vec<ReportInput> = scored.iter().map(ReportInput::from).collect();
    let rows = report(&inputs).unwrap();
    let opt = rows.iter().find(|r| r.policy == "optexit").unwrap();
    let van = rows.iter().find(|r| r.policy == "vanilla").unwrap();
    assert!(opt.mean_cr_pct <= 60.0, "{opt:?}");
    assert_eq!(opt.accuracy_pct, 100.0);
    assert_eq!(van.mean_cr_pct, 100.0);

    let (again, weights_again) = run_pipeline(ExecMode::Sequential);
    assert_eq!(weights, weights_again);
    assert_eq!(scored, again);
    assert!(started.elapsed().as_secs() < 120);
}

#[test]
fn baselines_run_on_the_scripted_corpus() {
    let corpus = scripted_corpus(&SynthConfig { n_traces: 4, ..SynthConfig::default() });
    let llm = corpus.llm();
    for t in &corpus.traces {
        let d = deer_outcome(t, &DeerConfig { chunk_tokens: 8, prob_threshold: 0.9 }, &llm, 64).unwrap();
        assert!(d.compression_rate > 0.0 && d.compression_rate <= 1.0);
        let dy = dynasor_outcome(t, &DynasorConfig { interval_tokens: 4, consistency_w: 3, ..Default::default() }, &llm, 64)
            .unwrap();
        assert!(dy.matched_full_run_answer);
        let nt = nothinking(&t.trace_id, &t.prompt, Some(t), &ThinkMarkers::default(), &llm, 64).unwrap();
        assert!(nt.empty_think && !nt.matched_full_run_answer);
    }
}

#[test]
fn sweep_plateaus_once_answers_have_arrived() {
    let corpus = scripted_corpus(&SynthConfig::default());
    let llm = corpus.llm();
    for (t, q) in corpus.traces.iter().zip(&corpus.answer_tokens) {
        assert!(*q < t.len().div_ceil(2));
    }
    let fractions: Vec<f64> = (1..=20).map(|i| i as f64 * 0.05).collect();
    let res = truncation_sweep(&corpus.traces, &fractions, &HashMap::new(), &llm, 64, ExecMode::Parallel).unwrap();
    let at = |f: f64| res.points.iter().find(|p| (p.fraction - f).abs() < 1e-9).unwrap().mean_accuracy;
    assert_eq!(at(0.5), at(1.0));
    assert_eq!(at(1.0), 1.0);
    assert!(at(0.1) < 1.0);
}
