//! Scripted corpus for offline runs: traces whose token confidence jumps when
//! the answer is written, plus the mock script answering every pipeline call.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::curation::Prompts;
use crate::llm::mock::{Matcher, MockEntry, MockScript, ScriptToken, ScriptedLlm};
use crate::llm::{LlmClient, LlmRequest, RoleTag};
use crate::trace::{Trace, THINK_CLOSE, THINK_OPEN};

const FILLER: &[&str] = &[
    " let", " me", " think", " about", " this", " carefully", " wait", " hmm", " first", " consider",
    " the", " terms", " and", " check", " each", " step", " again", " maybe", " we", " can",
];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_traces: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Range of the answer token position as a fraction of M.
    pub arrival: (f64, f64),
    pub k: usize,
    pub seed: u64,
    pub source: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_traces: 20,
            min_len: 60,
            max_len: 100,
            arrival: (0.2, 0.45),
            k: 4,
            seed: 11,
            source: "synthetic".into(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub traces: Vec<Trace>,
    /// Per trace, the index of the token that completes the answer.
    pub answer_tokens: Vec<usize>,
    pub script: MockScript,
}

impl SynthCorpus {
    pub fn llm(&self) -> ScriptedLlm {
        ScriptedLlm::new(self.script.clone())
    }
}

fn flat(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let top = rng.gen_range(0.2..0.3);
    (0..k).map(|j| top * 0.8f64.powi(j as i32)).collect()
}

fn peaked(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let top = rng.gen_range(0.93..0.99);
    let rest = (1.0 - top) / (k as f64 + 1.0);
    (0..k).map(|j| if j == 0 { top } else { rest / j as f64 }).collect()
}

fn tok(text: impl Into<String>, probs: Vec<f64>) -> ScriptToken {
    ScriptToken { text: text.into(), id: None, probs, chosen_prob: None }
}

/// Builds the corpus. Answer token `q` of each trace is preceded by
/// " so the value is"; truncated continuations return the answer iff at least
/// `q + 1` CoT tokens are kept.
pub fn scripted_corpus(config: &SynthConfig) -> SynthCorpus {
    let prompts = Prompts::default();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut entries = Vec::new();
    let mut plan = Vec::new();
    for t in 0..config.n_traces {
        let m = rng.gen_range(config.min_len.max(16)..=config.max_len.max(config.min_len.max(16)));
        let frac = rng.gen_range(config.arrival.0..=config.arrival.1);
        let q = ((frac * m as f64).round() as usize).clamp(6, m - 3);
        let answer = (17 + 13 * t).to_string();
        let prompt = format!("Problem {t}: what is the value of item {t}?");

        let mut toks = vec![tok(THINK_OPEN, peaked(&mut rng, config.k))];
        for i in 1..m - 1 {
            let lead = [" so", " the", " value", " is"];
            let text = if i == q {
                format!(" {answer}")
            } else if i + 4 >= q && i < q {
                lead[i + 4 - q].to_string()
            } else {
                FILLER[rng.gen_range(0..FILLER.len())].to_string()
            };
            let probs = if i >= q { peaked(&mut rng, config.k) } else { flat(&mut rng, config.k) };
            toks.push(tok(text, probs));
        }
        toks.push(tok(THINK_CLOSE, peaked(&mut rng, config.k)));
        for text in ["\nThe", " answer", " is"] {
            toks.push(tok(text, peaked(&mut rng, config.k)));
        }
        toks.push(tok(format!(" \\boxed{{{answer}}}."), peaked(&mut rng, config.k)));

        entries.push(MockEntry::tokens(RoleTag::Generate, Matcher::prompt(&prompt), toks));
        entries.push(MockEntry::text(
            RoleTag::SolveAfterTruncation,
            Matcher::prompt(&prompt).from_index(q + 1),
            format!("The answer is \\boxed{{{answer}}}."),
        ));
        plan.push((t, m, q, answer, prompt));
    }
    let generate_only = MockScript::new(entries.clone()).expect("synthetic script is unambiguous");
    let llm = ScriptedLlm::new(generate_only);

    let mut traces = Vec::new();
    let mut answer_tokens = Vec::new();
    for (t, m, q, answer, prompt) in plan {
        let req = LlmRequest::new(RoleTag::Generate, prompt.clone()).with_logprobs(config.k);
        let done = llm.complete(&req).expect("scripted generation");
        let trace = Trace {
            trace_id: format!("syn-{t:03}"),
            prompt,
            cot_tokens: done.tokens[..m].to_vec(),
            solution_text: done.tokens[m..].iter().map(|r| r.token_text.as_str()).collect(),
            final_answer: None,
            source: config.source.clone(),
            model: "scripted".into(),
            k: config.k,
        };
        let span = format!("so the value is {answer}");
        let identify = prompts.identify_prompt(&answer, &trace.cot_text(), &[]);
        entries.push(MockEntry::text(RoleTag::Identify, Matcher::prompt(&identify), span.clone()));
        entries.push(MockEntry::text(
            RoleTag::Verify,
            Matcher::prompt(&prompts.verify_prompt(&span, &answer)),
            "True",
        ));
        traces.push(trace);
        answer_tokens.push(q);
    }
    SynthCorpus {
        traces,
        answer_tokens,
        script: MockScript::new(entries).expect("synthetic script is unambiguous"),
    }
}
