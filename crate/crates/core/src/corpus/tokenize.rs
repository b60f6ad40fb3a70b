/// Lowercase word-level tokenizer.
///
/// Runs of alphanumeric characters form tokens; every other non-whitespace
/// character becomes a token of its own.
pub fn tokenize(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in lower.chars() {
        if ch.is_alphanumeric() {
            word.push(ch);
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        if !ch.is_whitespace() {
            out.push(ch.to_string());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

/// Space-joined rendering of a token list.
pub fn detokenize(tokens: &[String]) -> String {
    tokens.join(" ")
}
