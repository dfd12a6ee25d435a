//! Closed-vocabulary whitespace tokenizer and the zero-shot prompt template.
//!
//! Punctuation in the attach-left set is split into standalone tokens when
//! tokenizing and re-attached (no preceding space) when detokenizing, so
//! `render_prompt` + `detokenize` reproduces the prompt template verbatim.

use std::collections::HashMap;

use crate::error::{Error, Result};

/// Tokens that bind to the preceding word when rendering text.
const ATTACH_LEFT: [&str; 6] = [":", ",", "!", "?", ";", "."];

pub const PROMPT_PREFIX: [&str; 4] = ["In", "this", "text", ":"];
pub const PROMPT_SUFFIX: [&str; 6] = [",", "the", "emotion", "implied", "is", ":"];

pub const UNK_TOKEN: &str = "<unk>";

#[derive(Clone, Debug)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Builds a vocabulary from tokens in first-seen order, with `<unk>`
    /// always at id 0.
    pub fn build<I: IntoIterator<Item = String>>(tokens: I) -> Self {
        let mut v = Vocab { tokens: Vec::new(), index: HashMap::new() };
        v.intern(UNK_TOKEN);
        for t in tokens {
            v.intern(&t);
        }
        v
    }

    fn intern(&mut self, tok: &str) -> u32 {
        if let Some(&id) = self.index.get(tok) {
            return id;
        }
        let id = self.tokens.len() as u32;
        self.tokens.push(tok.to_string());
        self.index.insert(tok.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, tok: &str) -> Option<u32> {
        self.index.get(tok).copied()
    }

    pub fn id_or_unk(&self, tok: &str) -> u32 {
        self.index.get(tok).copied().unwrap_or(0)
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<u32> {
        tokens.iter().map(|t| self.id_or_unk(t)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }
}

/// Splits on whitespace, then peels attach-left punctuation off token edges.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        split_chunk(chunk, &mut out);
    }
    out
}

fn split_chunk(chunk: &str, out: &mut Vec<String>) {
    let is_punct = |c: char| ATTACH_LEFT.iter().any(|p| p.chars().next() == Some(c));
    let mut rest = chunk;
    let mut lead = Vec::new();
    while let Some(c) = rest.chars().next() {
        if rest.chars().count() > 1 && is_punct(c) {
            lead.push(c.to_string());
            rest = &rest[c.len_utf8()..];
        } else {
            break;
        }
    }
    let mut tail = Vec::new();
    while let Some(c) = rest.chars().last() {
        if rest.chars().count() > 1 && is_punct(c) {
            tail.push(c.to_string());
            rest = &rest[..rest.len() - c.len_utf8()];
        } else {
            break;
        }
    }
    out.extend(lead);
    if !rest.is_empty() {
        out.push(rest.to_string());
    }
    out.extend(tail.into_iter().rev());
}

/// Joins tokens with spaces, attaching punctuation to the preceding word.
pub fn detokenize(tokens: &[String]) -> String {
    let mut s = String::new();
    for tok in tokens {
        if s.is_empty() || ATTACH_LEFT.contains(&tok.as_str()) {
            s.push_str(tok);
        } else {
            s.push(' ');
            s.push_str(tok);
        }
    }
    s
}

/// Renders the zero-shot prompt `In this text: <text>, the emotion implied
/// is:` as a token sequence. The final token is the closing `:` whose
/// next-token logits carry the emotion prediction.
pub fn render_prompt(text: &[String]) -> Result<Vec<String>> {
    if text.is_empty() {
        return Err(Error::config("render_prompt: text must be non-empty"));
    }
    let mut toks: Vec<String> = PROMPT_PREFIX.iter().map(|s| s.to_string()).collect();
    toks.extend(text.iter().cloned());
    toks.extend(PROMPT_SUFFIX.iter().map(|s| s.to_string()));
    Ok(toks)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn prompt_matches_template_string() {
        let p = render_prompt(&toks(&["I", "won", "the", "game"])).unwrap();
        assert_eq!(detokenize(&p), "In this text: I won the game, the emotion implied is:");
        assert_eq!(p.last().unwrap(), ":");
    }

    #[test]
    fn render_then_tokenize_round_trips() {
        let p = render_prompt(&toks(&["quiet", "rain", ",", "cold", "!"])).unwrap();
        let s = detokenize(&p);
        assert_eq!(tokenize(&s), p);
    }

    #[test]
    fn prompts_differ_only_in_the_slot() {
        let a = render_prompt(&toks(&["one", "two"])).unwrap();
        let b = render_prompt(&toks(&["ten", "two"])).unwrap();
        assert_eq!(a.len(), b.len());
        let diff: Vec<usize> =
            (0..a.len()).filter(|&i| a[i] != b[i]).collect();
        assert_eq!(diff, vec![PROMPT_PREFIX.len()]);
    }

    #[test]
    fn empty_text_is_an_error() {
        assert!(render_prompt(&[]).is_err());
    }

    #[test]
    fn tokenize_peels_edge_punctuation() {
        assert_eq!(tokenize("game, over!"), toks(&["game", ",", "over", "!"]));
        assert_eq!(tokenize("text: a"), toks(&["text", ":", "a"]));
        assert_eq!(tokenize("-- alone"), toks(&["--", "alone"]));
    }

    #[test]
    fn vocab_maps_unknown_to_unk() {
        let v = Vocab::build(toks(&["a", "b"]));
        assert_eq!(v.id_or_unk("zzz"), 0);
        assert_eq!(v.token(0), UNK_TOKEN);
        assert_eq!(v.id("b"), Some(2));
    }
}
