//! Hand-rolled lexer for the CFT S-expression surface. Tracks line/column
//! for every token so parse errors point at source.

use super::parser::ParseError;

#[derive(Debug, Clone, PartialEq)]
pub(super) enum TokenKind {
    LParen,
    RParen,
    /// Bare word: opcodes, `module`, `shared`, `offset=4`, numbers.
    Word(String),
    /// `$`-prefixed identifier, sigil stripped.
    Id(String),
    /// Quoted string literal, unescaped.
    Str(String),
}

#[derive(Debug, Clone)]
pub(super) struct Token {
    pub kind: TokenKind,
    pub line: u32,
    pub col: u32,
}

pub(super) fn lex(src: &str) -> Result<Vec<Token>, ParseError> {
    let mut tokens = Vec::new();
    let mut chars = src.chars().peekable();
    let mut line: u32 = 1;
    let mut col: u32 = 1;

    macro_rules! bump {
        ($c:expr) => {{
            if $c == '\n' {
                line += 1;
                col = 1;
            } else {
                col += 1;
            }
        }};
    }

    while let Some(&c) = chars.peek() {
        let (tline, tcol) = (line, col);
        match c {
            ' ' | '\t' | '\r' | '\n' => {
                chars.next();
                bump!(c);
            }
            ';' => {
                // line comment: `;; ...`
                chars.next();
                bump!(c);
                if chars.peek() != Some(&';') {
                    return Err(ParseError::syntax(tline, tcol, "stray ';'"));
                }
                for c in chars.by_ref() {
                    bump!(c);
                    if c == '\n' {
                        break;
                    }
                }
            }
            '(' => {
                chars.next();
                bump!(c);
                // block comment: `(; ... ;)`, nesting allowed
                if chars.peek() == Some(&';') {
                    chars.next();
                    bump!(';');
                    let mut depth = 1u32;
                    let mut prev = '\0';
                    loop {
                        let Some(c) = chars.next() else {
                            return Err(ParseError::syntax(tline, tcol, "unterminated block comment"));
                        };
                        bump!(c);
                        if prev == '(' && c == ';' {
                            depth += 1;
                            prev = '\0';
                        } else if prev == ';' && c == ')' {
                            depth -= 1;
                            if depth == 0 {
                                break;
                            }
                            prev = '\0';
                        } else {
                            prev = c;
                        }
                    }
                } else {
                    tokens.push(Token { kind: TokenKind::LParen, line: tline, col: tcol });
                }
            }
            ')' => {
                chars.next();
                bump!(c);
                tokens.push(Token { kind: TokenKind::RParen, line: tline, col: tcol });
            }
            '"' => {
                chars.next();
                bump!(c);
                let mut s = String::new();
                loop {
                    let Some(c) = chars.next() else {
                        return Err(ParseError::syntax(tline, tcol, "unterminated string literal"));
                    };
                    bump!(c);
                    match c {
                        '"' => break,
                        '\\' => {
                            let Some(e) = chars.next() else {
                                return Err(ParseError::syntax(tline, tcol, "unterminated escape"));
                            };
                            bump!(e);
                            match e {
                                'n' => s.push('\n'),
                                't' => s.push('\t'),
                                '\\' => s.push('\\'),
                                '"' => s.push('"'),
                                _ => {
                                    return Err(ParseError::syntax(
                                        line,
                                        col,
                                        format!("unsupported escape '\\{e}'"),
                                    ))
                                }
                            }
                        }
                        '\n' => {
                            return Err(ParseError::syntax(tline, tcol, "newline in string literal"))
                        }
                        _ => s.push(c),
                    }
                }
                tokens.push(Token { kind: TokenKind::Str(s), line: tline, col: tcol });
            }
            '$' => {
                chars.next();
                bump!(c);
                let mut s = String::new();
                while let Some(&c) = chars.peek() {
                    if is_id_char(c) {
                        s.push(c);
                        chars.next();
                        bump!(c);
                    } else {
                        break;
                    }
                }
                if s.is_empty() {
                    return Err(ParseError::syntax(tline, tcol, "empty identifier after '$'"));
                }
                tokens.push(Token { kind: TokenKind::Id(s), line: tline, col: tcol });
            }
            c if is_word_char(c) => {
                let mut s = String::new();
                while let Some(&c) = chars.peek() {
                    if is_word_char(c) {
                        s.push(c);
                        chars.next();
                        bump!(c);
                    } else {
                        break;
                    }
                }
                tokens.push(Token { kind: TokenKind::Word(s), line: tline, col: tcol });
            }
            _ => {
                return Err(ParseError::syntax(
                    tline,
                    tcol,
                    format!("unexpected character {c:?}"),
                ));
            }
        }
    }
    Ok(tokens)
}

fn is_id_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '-')
}

fn is_word_char(c: char) -> bool {
    // opcodes (`i32.rem_u`), sizes (`0x10`), `offset=4`, sign prefixes
    c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '=' | '-' | '+')
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lexes_minimal_module() {
        let toks = lex("(module (memory shared 1 1))").unwrap();
        assert_eq!(toks.len(), 9);
        assert!(matches!(toks[0].kind, TokenKind::LParen));
        assert!(matches!(&toks[1].kind, TokenKind::Word(w) if w == "module"));
    }

    #[test]
    fn tracks_positions() {
        let toks = lex("(module\n  (func $f))").unwrap();
        let func = toks.iter().find(|t| t.kind == TokenKind::Word("func".into())).unwrap();
        assert_eq!((func.line, func.col), (2, 4));
    }

    #[test]
    fn comments_are_skipped() {
        let toks = lex(";; header\n(module (; inner (; nested ;) ;) )").unwrap();
        assert_eq!(toks.len(), 3);
    }

    #[test]
    fn rejects_garbage() {
        assert!(lex("(module \u{7f})").is_err());
        assert!(lex("\"open").is_err());
        assert!(lex("(; never closed").is_err());
    }
}
