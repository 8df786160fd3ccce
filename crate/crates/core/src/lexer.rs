//! C-family lexer with per-token kind classification.
//!
//! The surface is deliberately generic: `[A-Za-z_][A-Za-z0-9_]*` identifiers,
//! `$`-sigiled local variables, `//` and `/* */` comments, single- and
//! double-quoted strings with backslash escapes, decimal/float numbers, and
//! 1–3 character punctuation matched by maximal munch. Comments and
//! whitespace never reach the token stream.
//!
//! Whitespace inside a string literal is rewritten to an escape sequence
//! (`\x20`, `\t`, `\n`, `\r`, `\u{..}`) so that no token text ever contains
//! whitespace. Re-lexing the rewritten literal yields the same text.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reserved words. Kind shares depend on this exact list; do not edit
/// without regenerating analysis baselines.
pub const KEYWORDS: [&str; 30] = [
    "function", "return", "if", "else", "class", "new", "for", "foreach", "while", "do",
    "switch", "case", "break", "continue", "default", "try", "catch", "finally", "throw",
    "public", "private", "protected", "static", "const", "as", "echo", "true", "false", "null",
    "use",
];

const PUNCT3: [&str; 9] = ["===", "!==", "<=>", "**=", "...", "<<=", ">>=", "??=", "?->"];
const PUNCT2: [&str; 22] = [
    "==", "!=", "<=", ">=", "&&", "||", "++", "--", "+=", "-=", "*=", "/=", ".=", "%=", "->",
    "=>", "::", "<<", ">>", "??", "**", "|>",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenKind {
    LocalVariable,
    Identifier,
    Keyword,
    StringLiteral,
    NumberLiteral,
    Punctuation,
}

impl TokenKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TokenKind::LocalVariable => "local_variable",
            TokenKind::Identifier => "identifier",
            TokenKind::Keyword => "keyword",
            TokenKind::StringLiteral => "string_literal",
            TokenKind::NumberLiteral => "number_literal",
            TokenKind::Punctuation => "punctuation",
        }
    }

    pub fn parse(s: &str) -> Option<TokenKind> {
        Some(match s {
            "local_variable" => TokenKind::LocalVariable,
            "identifier" => TokenKind::Identifier,
            "keyword" => TokenKind::Keyword,
            "string_literal" => TokenKind::StringLiteral,
            "number_literal" => TokenKind::NumberLiteral,
            "punctuation" => TokenKind::Punctuation,
            _ => return None,
        })
    }
}

impl fmt::Display for TokenKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    pub kind: TokenKind,
    pub byte_offset: usize,
}

impl Token {
    pub fn new(text: impl Into<String>, kind: TokenKind, byte_offset: usize) -> Self {
        Token {
            text: text.into(),
            kind,
            byte_offset,
        }
    }

    /// Builds a token whose kind is derived from its text alone.
    pub fn classified(text: impl Into<String>, byte_offset: usize) -> Self {
        let text = text.into();
        let kind = classify(&text);
        Token {
            text,
            kind,
            byte_offset,
        }
    }

    /// Character length, counting the `$` sigil.
    pub fn char_len(&self) -> usize {
        self.text.chars().count()
    }

    pub fn is_identifier_like(&self) -> bool {
        is_identifier_like(self.kind)
    }
}

/// True for the kinds that are completion targets.
pub fn is_identifier_like(kind: TokenKind) -> bool {
    matches!(kind, TokenKind::LocalVariable | TokenKind::Identifier)
}

pub fn is_keyword(text: &str) -> bool {
    KEYWORDS.contains(&text)
}

fn is_ident_start(c: char) -> bool {
    c.is_ascii_alphabetic() || c == '_'
}

fn is_ident_continue(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_'
}

/// Kind of a single already-lexed token text.
///
/// Agrees with [`tokenize`] on every token it emits, so logs that store
/// bare token texts can be turned back into typed tokens.
pub fn classify(text: &str) -> TokenKind {
    let mut chars = text.chars();
    match chars.next() {
        Some('$') if chars.next().is_some_and(is_ident_start) => TokenKind::LocalVariable,
        Some(c) if is_ident_start(c) => {
            if is_keyword(text) {
                TokenKind::Keyword
            } else {
                TokenKind::Identifier
            }
        }
        Some(c) if c.is_ascii_digit() => TokenKind::NumberLiteral,
        Some('"') | Some('\'') if text.len() >= 2 => TokenKind::StringLiteral,
        _ => TokenKind::Punctuation,
    }
}

struct Lexer<'a> {
    src: &'a str,
    bytes: &'a [u8],
    pos: usize,
    out: Vec<Token>,
}

impl<'a> Lexer<'a> {
    fn new(src: &'a str) -> Self {
        Lexer {
            src,
            bytes: src.as_bytes(),
            pos: 0,
            out: Vec::new(),
        }
    }

    fn peek(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn peek_at(&self, byte_ahead: usize) -> Option<u8> {
        self.bytes.get(self.pos + byte_ahead).copied()
    }

    fn eat_while(&mut self, pred: impl Fn(char) -> bool) {
        while let Some(c) = self.peek() {
            if !pred(c) {
                break;
            }
            self.pos += c.len_utf8();
        }
    }

    fn push(&mut self, start: usize, kind: TokenKind) {
        self.out
            .push(Token::new(&self.src[start..self.pos], kind, start));
    }

    fn run(mut self) -> Result<Vec<Token>> {
        while let Some(c) = self.peek() {
            let start = self.pos;
            if c.is_whitespace() {
                self.pos += c.len_utf8();
            } else if c == '/' && self.peek_at(1) == Some(b'/') {
                self.eat_while(|c| c != '\n');
            } else if c == '/' && self.peek_at(1) == Some(b'*') {
                match self.src[start + 2..].find("*/") {
                    Some(end) => self.pos = start + 2 + end + 2,
                    None => {
                        return Err(Error::Lex {
                            offset: start,
                            message: "unterminated block comment".into(),
                        })
                    }
                }
            } else if c == '$' && self.peek_at(1).is_some_and(|b| is_ident_start(b as char)) {
                self.pos += 1;
                self.eat_while(is_ident_continue);
                self.push(start, TokenKind::LocalVariable);
            } else if is_ident_start(c) {
                self.eat_while(is_ident_continue);
                let kind = if is_keyword(&self.src[start..self.pos]) {
                    TokenKind::Keyword
                } else {
                    TokenKind::Identifier
                };
                self.push(start, kind);
            } else if c.is_ascii_digit() {
                self.number();
                self.push(start, TokenKind::NumberLiteral);
            } else if c == '"' || c == '\'' {
                self.string(c)?;
            } else {
                self.punct();
                self.push(start, TokenKind::Punctuation);
            }
        }
        Ok(self.out)
    }

    fn number(&mut self) {
        self.eat_while(|c| c.is_ascii_digit());
        if self.peek() == Some('.') && self.peek_at(1).is_some_and(|b| b.is_ascii_digit()) {
            self.pos += 1;
            self.eat_while(|c| c.is_ascii_digit());
        }
        if matches!(self.peek(), Some('e') | Some('E')) {
            let mut ahead = 1;
            if matches!(self.peek_at(1), Some(b'+') | Some(b'-')) {
                ahead = 2;
            }
            if self.peek_at(ahead).is_some_and(|b| b.is_ascii_digit()) {
                self.pos += ahead;
                self.eat_while(|c| c.is_ascii_digit());
            }
        }
    }

    fn string(&mut self, quote: char) -> Result<()> {
        let start = self.pos;
        self.pos += 1;
        let mut text = String::new();
        text.push(quote);
        loop {
            let Some(c) = self.peek() else {
                return Err(Error::Lex {
                    offset: start,
                    message: "unterminated string literal".into(),
                });
            };
            self.pos += c.len_utf8();
            if c == '\\' {
                text.push('\\');
                let Some(next) = self.peek() else {
                    return Err(Error::Lex {
                        offset: start,
                        message: "unterminated string literal".into(),
                    });
                };
                self.pos += next.len_utf8();
                push_escaped(&mut text, next);
            } else if c == quote {
                text.push(c);
                break;
            } else if c.is_whitespace() {
                text.push('\\');
                push_escaped(&mut text, c);
            } else {
                text.push(c);
            }
        }
        self.out
            .push(Token::new(text, TokenKind::StringLiteral, start));
        Ok(())
    }

    fn punct(&mut self) {
        let rest = &self.src[self.pos..];
        for table in [&PUNCT3[..], &PUNCT2[..]] {
            if let Some(p) = table.iter().find(|p| rest.starts_with(**p)) {
                self.pos += p.len();
                return;
            }
        }
        self.pos += rest.chars().next().map_or(1, char::len_utf8);
    }
}

/// Appends the character following a backslash, spelling whitespace as an escape.
fn push_escaped(text: &mut String, c: char) {
    match c {
        ' ' => text.push_str("x20"),
        '\t' => text.push('t'),
        '\n' => text.push('n'),
        '\r' => text.push('r'),
        c if c.is_whitespace() => text.push_str(&format!("u{{{:x}}}", c as u32)),
        c => text.push(c),
    }
}

/// Lexes `text` into tokens, dropping comments and whitespace.
pub fn tokenize(text: &str) -> Result<Vec<Token>> {
    Lexer::new(text).run()
}

/// Joins token texts with single spaces.
pub fn join(tokens: &[Token]) -> String {
    let mut out = String::new();
    for (i, t) in tokens.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(&t.text);
    }
    out
}

#[derive(Serialize)]
struct DumpLine<'a> {
    text: &'a str,
    kind: TokenKind,
    offset: usize,
}

/// Debug dump: one `{"text","kind","offset"}` object per line.
pub fn write_jsonl(tokens: &[Token], mut out: impl Write) -> std::io::Result<()> {
    for t in tokens {
        let line = DumpLine {
            text: &t.text,
            kind: t.kind,
            offset: t.byte_offset,
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
