//! LaTeX math tokenization and vocabulary management.
//!
//! Tokenization is greedy left-to-right: `\name` (longest alphabetic run)
//! is one command token, `{ } ^ _` are single tokens, any other non-space
//! character is a single symbol token, and whitespace only separates.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};

pub const BOS_ID: usize = 0;
pub const EOS_ID: usize = 1;
pub const PAD_ID: usize = 2;
pub const UNK_ID: usize = 3;

pub const CONTROL_TOKENS: [&str; 4] = ["<s>", "</s>", "<pad>", "<unk>"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenKind {
    Command,
    Brace,
    Symbol,
    Control,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Token {
    pub text: String,
    pub kind: TokenKind,
}

impl Token {
    pub fn symbol(text: impl Into<String>) -> Self {
        Token {
            text: text.into(),
            kind: TokenKind::Symbol,
        }
    }

    pub fn command(text: impl Into<String>) -> Self {
        Token {
            text: text.into(),
            kind: TokenKind::Command,
        }
    }

    fn brace(text: impl Into<String>) -> Self {
        Token {
            text: text.into(),
            kind: TokenKind::Brace,
        }
    }

    /// Reconstructs the kind from the token text, for vocabulary round trips.
    pub fn from_text(text: &str) -> Self {
        if CONTROL_TOKENS.contains(&text) {
            Token {
                text: text.into(),
                kind: TokenKind::Control,
            }
        } else if text.starts_with('\\') {
            Token::command(text)
        } else if text == "{" || text == "}" {
            Token::brace(text)
        } else {
            Token::symbol(text)
        }
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

/// Splits a LaTeX math string into tokens. Braces must balance.
pub fn tokenize(latex: &str) -> Result<Vec<Token>> {
    let bytes: Vec<char> = latex.chars().collect();
    let mut tokens = Vec::new();
    let mut depth: i64 = 0;
    let mut open_positions = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let ch = bytes[i];
        if ch.is_whitespace() {
            i += 1;
            continue;
        }
        match ch {
            '\\' => {
                let start = i;
                i += 1;
                let mut name = String::new();
                while i < bytes.len() && bytes[i].is_ascii_alphabetic() {
                    name.push(bytes[i]);
                    i += 1;
                }
                if name.is_empty() {
                    // Escaped single character such as `\{`.
                    if i >= bytes.len() {
                        return Err(Error::Parse {
                            position: start,
                            message: "dangling backslash".into(),
                        });
                    }
                    name.push(bytes[i]);
                    i += 1;
                }
                tokens.push(Token::command(format!("\\{}", name)));
            }
            '{' => {
                depth += 1;
                open_positions.push(i);
                tokens.push(Token::brace("{"));
                i += 1;
            }
            '}' => {
                depth -= 1;
                if depth < 0 {
                    return Err(Error::Parse {
                        position: i,
                        message: "unbalanced closing brace".into(),
                    });
                }
                open_positions.pop();
                tokens.push(Token::brace("}"));
                i += 1;
            }
            '^' | '_' => {
                tokens.push(Token::symbol(ch.to_string()));
                i += 1;
            }
            _ => {
                tokens.push(Token::symbol(ch.to_string()));
                i += 1;
            }
        }
    }
    if depth != 0 {
        return Err(Error::Parse {
            position: *open_positions.last().unwrap_or(&0),
            message: "unbalanced opening brace".into(),
        });
    }
    Ok(tokens)
}

/// Joins tokens back into a LaTeX string: a single space after command
/// tokens, nothing otherwise. The output re-tokenizes to the same list.
pub fn detokenize(tokens: &[Token]) -> Result<String> {
    let mut out = String::new();
    for (i, t) in tokens.iter().enumerate() {
        if t.kind == TokenKind::Control {
            let is_trailing_eos = i == tokens.len() - 1 && t.text == CONTROL_TOKENS[EOS_ID];
            if !is_trailing_eos {
                return Err(Error::Validation(format!(
                    "control token {} inside sequence",
                    t.text
                )));
            }
            continue;
        }
        out.push_str(&t.text);
        if t.kind == TokenKind::Command {
            out.push(' ');
        }
    }
    Ok(out.trim_end().to_string())
}

/// Dense token-to-id mapping. Controls occupy ids 0..=3; the remaining ids
/// are corpus tokens sorted lexicographically.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<Token>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn build(corpus: &[Vec<Token>]) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::InvalidInput("vocabulary from empty corpus".into()));
        }
        let mut distinct: Vec<String> = corpus
            .iter()
            .flatten()
            .filter(|t| t.kind != TokenKind::Control)
            .map(|t| t.text.clone())
            .collect();
        distinct.sort();
        distinct.dedup();
        Ok(Self::from_texts(distinct))
    }

    fn from_texts(corpus_tokens: Vec<String>) -> Self {
        let mut tokens: Vec<Token> = CONTROL_TOKENS
            .iter()
            .map(|t| Token {
                text: (*t).to_string(),
                kind: TokenKind::Control,
            })
            .collect();
        tokens.extend(corpus_tokens.iter().map(|t| Token::from_text(t)));
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.text.clone(), i))
            .collect();
        Vocabulary { tokens, ids }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id_of(&self, text: &str) -> Option<usize> {
        self.ids.get(text).copied()
    }

    pub fn token(&self, id: usize) -> &Token {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    /// Maps tokens to ids; out-of-vocabulary tokens become UNK.
    pub fn encode(&self, tokens: &[Token]) -> Vec<usize> {
        tokens
            .iter()
            .map(|t| self.id_of(&t.text).unwrap_or(UNK_ID))
            .collect()
    }

    /// Maps ids back to tokens. UNK is rejected: decode must fail loudly.
    pub fn decode(&self, ids: &[usize]) -> Result<Vec<Token>> {
        ids.iter()
            .map(|&id| {
                if id == UNK_ID {
                    return Err(Error::Validation("cannot decode UNK".into()));
                }
                self.tokens
                    .get(id)
                    .cloned()
                    .ok_or_else(|| Error::Validation(format!("id {} out of vocabulary", id)))
            })
            .collect()
    }

    /// One token per line; the line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let text: String = self
            .tokens
            .iter()
            .map(|t| format!("{}\n", t.text))
            .collect();
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_lines(text.lines())
    }

    pub fn from_lines<'a>(lines: impl Iterator<Item = &'a str>) -> Result<Self> {
        let all: Vec<String> = lines.map(|l| l.to_string()).collect();
        if all.len() < CONTROL_TOKENS.len() {
            return Err(Error::Validation("vocabulary file too short".into()));
        }
        for (i, control) in CONTROL_TOKENS.iter().enumerate() {
            if all[i] != *control {
                return Err(Error::Validation(format!(
                    "vocabulary line {} must be {}, got {}",
                    i, control, all[i]
                )));
            }
        }
        Ok(Self::from_texts(all[CONTROL_TOKENS.len()..].to_vec()))
    }
}

/// A complete id sequence: BOS-initial, EOS-final, no interior padding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
}

impl TokenSequence {
    /// Wraps encoded content ids with BOS/EOS.
    pub fn complete(content_ids: Vec<usize>) -> Self {
        let mut ids = Vec::with_capacity(content_ids.len() + 2);
        ids.push(BOS_ID);
        ids.extend(content_ids);
        ids.push(EOS_ID);
        TokenSequence { ids }
    }

    pub fn content(&self) -> &[usize] {
        let start = usize::from(self.ids.first() == Some(&BOS_ID));
        let end = self.ids.len() - usize::from(self.ids.last() == Some(&EOS_ID));
        &self.ids[start..end]
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn texts(tokens: &[Token]) -> Vec<&str> {
        tokens.iter().map(|t| t.text.as_str()).collect()
    }

    #[test]
    fn tokenize_superscript() {
        let tokens = tokenize("x^{2}").unwrap();
        assert_eq!(texts(&tokens), ["x", "^", "{", "2", "}"]);
    }

    #[test]
    fn tokenize_fraction() {
        let tokens = tokenize("\\frac{a}{b}").unwrap();
        assert_eq!(texts(&tokens), ["\\frac", "{", "a", "}", "{", "b", "}"]);
        assert_eq!(tokens[0].kind, TokenKind::Command);
    }

    #[test]
    fn tokenize_drops_whitespace() {
        let tokens = tokenize("  a +\tb \n").unwrap();
        assert_eq!(texts(&tokens), ["a", "+", "b"]);
    }

    #[test]
    fn tokenize_longest_command_run() {
        let tokens = tokenize("\\alpha\\beta x").unwrap();
        assert_eq!(texts(&tokens), ["\\alpha", "\\beta", "x"]);
    }

    #[test]
    fn tokenize_left_paren_as_two_tokens() {
        let tokens = tokenize("\\left(x\\right)").unwrap();
        assert_eq!(texts(&tokens), ["\\left", "(", "x", "\\right", ")"]);
    }

    #[test]
    fn tokenize_unbalanced_braces() {
        match tokenize("a{b") {
            Err(Error::Parse { position, .. }) => assert_eq!(position, 1),
            other => panic!("expected parse error, got {:?}", other),
        }
        match tokenize("a}b") {
            Err(Error::Parse { position, .. }) => assert_eq!(position, 1),
            other => panic!("expected parse error, got {:?}", other),
        }
    }

    #[test]
    fn detokenize_basic() {
        let tokens = tokenize("x^{2}").unwrap();
        assert_eq!(detokenize(&tokens).unwrap(), "x^{2}");
        assert_eq!(detokenize(&[]).unwrap(), "");
    }

    #[test]
    fn detokenize_spaces_after_commands() {
        let tokens = tokenize("\\frac{a}{b}+\\alpha c").unwrap();
        let s = detokenize(&tokens).unwrap();
        assert_eq!(s, "\\frac {a}{b}+\\alpha c");
        assert_eq!(tokenize(&s).unwrap(), tokens);
    }

    #[test]
    fn detokenize_rejects_interior_control() {
        let mut tokens = tokenize("ab").unwrap();
        tokens.insert(1, Token::from_text("<pad>"));
        assert!(matches!(detokenize(&tokens), Err(Error::Validation(_))));
    }

    #[test]
    fn detokenize_allows_trailing_eos() {
        let mut tokens = tokenize("ab").unwrap();
        tokens.push(Token::from_text("</s>"));
        assert_eq!(detokenize(&tokens).unwrap(), "ab");
    }

    fn fixture_corpus() -> Vec<String> {
        let atoms = ["1", "2", "3", "x", "y", "z", "a", "b", "+", "-", "("];
        let mut out = Vec::new();
        for (i, a) in atoms.iter().enumerate() {
            for (j, b) in atoms.iter().enumerate() {
                if out.len() >= 50 {
                    break;
                }
                match (i + j) % 5 {
                    0 => out.push(format!("{}^{{{}}}", a, b)),
                    1 => out.push(format!("{}_{{{}}}", a, b)),
                    2 => out.push(format!("\\frac{{{}}}{{{}}}", a, b)),
                    3 => out.push(format!("{}+{}", a, b)),
                    _ => out.push(format!("\\left( {} \\right)", a)),
                }
            }
        }
        out.truncate(50);
        out
    }

    #[test]
    fn round_trip_over_fixture_corpus() {
        // Whitespace-normalized comparison: spaces carry no meaning in math.
        let strip = |s: &str| s.chars().filter(|c| !c.is_whitespace()).collect::<String>();
        for s in fixture_corpus() {
            let tokens = tokenize(&s).unwrap();
            let out = detokenize(&tokens).unwrap();
            assert_eq!(strip(&out), strip(&s), "round trip of {:?}", s);
            assert_eq!(tokenize(&out).unwrap(), tokens);
            // tokenize . detokenize . tokenize is identity on token lists.
            assert_eq!(tokenize(&detokenize(&tokens).unwrap()).unwrap(), tokens);
        }
    }

    #[test]
    fn vocabulary_counts_and_order() {
        let corpus = vec![
            tokenize("a").unwrap(),
            tokenize("b").unwrap(),
            tokenize("a").unwrap(),
        ];
        let v = Vocabulary::build(&corpus).unwrap();
        assert_eq!(v.len(), 6); // 4 controls + a, b
        assert_eq!(v.token(4).text, "a");
        assert_eq!(v.token(5).text, "b");
        assert_eq!(v.id_of("<s>"), Some(BOS_ID));
        assert_eq!(v.id_of("</s>"), Some(EOS_ID));
        assert_eq!(v.id_of("<pad>"), Some(PAD_ID));
        assert_eq!(v.id_of("<unk>"), Some(UNK_ID));
    }

    #[test]
    fn vocabulary_matches_set_union_oracle() {
        let corpus: Vec<Vec<Token>> = fixture_corpus()
            .iter()
            .map(|s| tokenize(s).unwrap())
            .collect();
        let v = Vocabulary::build(&corpus).unwrap();
        let mut set = std::collections::BTreeSet::new();
        for tokens in &corpus {
            for t in tokens {
                set.insert(t.text.clone());
            }
        }
        assert_eq!(v.len(), set.len() + 4);
        for (i, text) in set.iter().enumerate() {
            assert_eq!(v.id_of(text), Some(i + 4));
        }
    }

    #[test]
    fn vocabulary_rebuild_is_stable() {
        let corpus: Vec<Vec<Token>> = fixture_corpus()
            .iter()
            .map(|s| tokenize(s).unwrap())
            .collect();
        let a = Vocabulary::build(&corpus).unwrap();
        let b = Vocabulary::build(&corpus).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn encode_unknown_maps_to_unk_and_decode_rejects() {
        let v = Vocabulary::build(&[tokenize("ab").unwrap()]).unwrap();
        let ids = v.encode(&tokenize("aq").unwrap());
        assert_eq!(ids[1], UNK_ID);
        assert!(v.decode(&ids).is_err());
        let ok = v.encode(&tokenize("ab").unwrap());
        let back = v.decode(&ok).unwrap();
        assert_eq!(detokenize(&back).unwrap(), "ab");
    }

    #[test]
    fn encode_decode_identity_without_unk() {
        let corpus: Vec<Vec<Token>> = fixture_corpus()
            .iter()
            .map(|s| tokenize(s).unwrap())
            .collect();
        let v = Vocabulary::build(&corpus).unwrap();
        for tokens in &corpus {
            let ids = v.encode(tokens);
            assert!(ids.iter().all(|&id| id != UNK_ID));
            assert_eq!(&v.decode(&ids).unwrap(), tokens);
        }
    }

    #[test]
    fn vocabulary_save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let corpus: Vec<Vec<Token>> = fixture_corpus()
            .iter()
            .map(|s| tokenize(s).unwrap())
            .collect();
        let v = Vocabulary::build(&corpus).unwrap();
        v.save(&path).unwrap();
        let loaded = Vocabulary::load(&path).unwrap();
        assert_eq!(v, loaded);
    }

    #[test]
    fn token_sequence_content_strips_controls() {
        let seq = TokenSequence::complete(vec![5, 6, 7]);
        assert_eq!(seq.ids, vec![BOS_ID, 5, 6, 7, EOS_ID]);
        assert_eq!(seq.content(), &[5, 6, 7]);
    }
}
