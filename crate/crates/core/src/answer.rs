//! Answer string handling shared by curation, exit evaluation and baselines.

const BOXED: &str = "\\boxed{";

/// Trims, collapses internal whitespace and strips trailing punctuation.
pub fn normalize_answer(s: &str) -> String {
    let collapsed = s.split_whitespace().collect::<Vec<_>>().join(" ");
    collapsed
        .trim_end_matches(['.', ',', ';', ':', '!', '?'])
        .trim_end()
        .to_string()
}

/// Answer equality under [`normalize_answer`].
pub fn answers_match(a: &str, b: &str) -> bool {
    let a = normalize_answer(a);
    !a.is_empty() && a == normalize_answer(b)
}

/// Reads a brace-balanced group starting right after an opening `{`.
/// Returns the inner text, or `None` if the group never closes.
fn balanced_group(s: &str) -> Option<&str> {
    let mut depth = 1usize;
    for (i, c) in s.char_indices() {
        match c {
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&s[..i]);
                }
            }
            _ => {}
        }
    }
    None
}

/// Contents of the last closed `\boxed{...}` marker in `text`.
pub fn parse_boxed(text: &str) -> Option<String> {
    text.match_indices(BOXED)
        .filter_map(|(at, _)| balanced_group(&text[at + BOXED.len()..]))
        .last()
        .map(normalize_answer)
        .filter(|a| !a.is_empty())
}

/// Interim answer from a continuation of a prompt that ends in an open
/// `\boxed{`: the text up to the brace that closes it. A complete `\boxed{}`
/// in the reply takes precedence. Replies that never close yield `None`.
pub fn parse_interim(reply: &str) -> Option<String> {
    if let Some(a) = parse_boxed(reply) {
        return Some(a);
    }
    balanced_group(reply)
        .map(normalize_answer)
        .filter(|a| !a.is_empty())
}
