use std::collections::HashMap;
use std::error::Error as StdError;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

use optexit_core::baselines::BaselineError;
use optexit_core::curation::CurationError;
use optexit_core::exit::ExitError;
use optexit_core::llm::mock::{MockScript, ScriptedLlm};
use optexit_core::llm::{LlmClient, LlmError};
use optexit_core::trace::{load_labeled, load_traces};
use optexit_core::{ExecMode, LabeledTrace, Trace};
use optexit_gateway::{HttpConfig, HttpLlm, ServeError};

use crate::Global;

/// Bad invocation detected after argument parsing.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl StdError for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn llm_is_transport(e: &LlmError) -> bool {
    matches!(e, LlmError::Transport { .. } | LlmError::Timeout | LlmError::MalformedResponse(_))
}

fn curation_is_transport(e: &CurationError) -> bool {
    match e {
        CurationError::Llm(l) => llm_is_transport(l),
        CurationError::AllFailed(first) => curation_is_transport(first),
        _ => false,
    }
}

fn exit_is_transport(e: &ExitError) -> bool {
    matches!(e, ExitError::Llm(l) if llm_is_transport(l))
}

fn is_transport(e: &(dyn StdError + 'static)) -> bool {
    if let Some(l) = e.downcast_ref::<LlmError>() {
        return llm_is_transport(l);
    }
    if let Some(c) = e.downcast_ref::<CurationError>() {
        return curation_is_transport(c);
    }
    if let Some(x) = e.downcast_ref::<ExitError>() {
        return exit_is_transport(x);
    }
    if let Some(b) = e.downcast_ref::<BaselineError>() {
        return match b {
            BaselineError::Llm(l) => llm_is_transport(l),
            BaselineError::Exit(x) => exit_is_transport(x),
            _ => false,
        };
    }
    matches!(e.downcast_ref::<ServeError>(), Some(ServeError::PortInUse(_) | ServeError::Io(_)))
}

/// 1 usage, 3 transport, 2 anything else.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 1;
        }
        if is_transport(cause) {
            return 3;
        }
    }
    2
}

pub fn exec_mode(g: &Global) -> ExecMode {
    if g.sequential {
        ExecMode::Sequential
    } else {
        ExecMode::default()
    }
}

/// `mock:<script>` runs the script in process; anything else is an HTTP URL.
pub fn make_llm(g: &Global, endpoint: Option<&str>) -> Result<Box<dyn LlmClient>> {
    let endpoint = endpoint.ok_or_else(|| usage("--endpoint is required for this command"))?;
    if let Some(path) = endpoint.strip_prefix("mock:") {
        let script = MockScript::load(Path::new(path)).with_context(|| format!("loading mock script {path}"))?;
        return Ok(Box::new(ScriptedLlm::new(script)));
    }
    if !(endpoint.starts_with("http://") || endpoint.starts_with("https://")) {
        return Err(usage(format!("endpoint `{endpoint}` is neither an http(s) URL nor mock:<script>")));
    }
    let config = HttpConfig {
        model: g.model.clone(),
        max_inflight: g.max_inflight,
        ..HttpConfig::new(endpoint)
    };
    Ok(Box::new(HttpLlm::new(config)?))
}

/// Writes to --out, or stdout without one.
pub fn emit(g: &Global, text: &str) -> Result<()> {
    match &g.out {
        Some(path) => write_file(path, text.as_bytes()),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn require_out(g: &Global) -> Result<&Path> {
    g.out.as_deref().ok_or_else(|| usage("--out is required for this command"))
}

fn jsonl_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    files.sort();
    Ok(files)
}

/// Loads a labeled file, or every `*.jsonl` in a directory.
pub fn load_labeled_any(path: &Path) -> Result<Vec<LabeledTrace>> {
    if path.is_dir() {
        let mut out = Vec::new();
        for f in jsonl_files(path)? {
            out.extend(load_labeled(&f).with_context(|| format!("loading {}", f.display()))?);
        }
        return Ok(out);
    }
    load_labeled(path).with_context(|| format!("loading {}", path.display()))
}

/// Loads plain or labeled traces.
pub fn load_traces_any(path: &Path) -> Result<Vec<Trace>> {
    load_traces(path).with_context(|| format!("loading {}", path.display()))
}

/// Ground-truth answers from JSONL lines with `trace_id` and `answer`.
pub fn load_answers(path: Option<&Path>) -> Result<HashMap<String, String>> {
    let Some(path) = path else {
        return Ok(HashMap::new());
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut map = HashMap::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let v: serde_json::Value =
            serde_json::from_str(line).with_context(|| format!("{}:{}", path.display(), n + 1))?;
        let field = |k: &str| {
            v.get(k)
                .and_then(|x| x.as_str())
                .map(str::to_string)
                .ok_or_else(|| anyhow::anyhow!("{}:{}: missing `{k}`", path.display(), n + 1))
        };
        map.insert(field("trace_id")?, field("answer")?);
    }
    Ok(map)
}
