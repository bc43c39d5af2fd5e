//! Hand-rolled lexer producing a token stream with source positions.

use super::ast::Loc;
use super::ParseError;

#[derive(Debug, Clone, PartialEq)]
pub enum Tok {
    Ident(String),
    Int(i64),
    Float(f64),
    // keywords
    Var,
    For,
    From,
    To,
    If,
    Else,
    Sync,
    Break,
    // punctuation
    Colon,
    ColonColon,
    Assign, // :=
    Semi,
    Comma,
    Dot,
    LParen,
    RParen,
    LBrace,
    RBrace,
    LBracket,
    RBracket,
    Plus,
    Minus,
    Star,
    Slash,
    Lt,
    Gt,
    Le,
    Ge,
    EqEq,
    Ne,
    Eof,
}

impl Tok {
    pub fn describe(&self) -> String {
        match self {
            Tok::Ident(s) => format!("identifier `{s}`"),
            Tok::Int(v) => format!("integer literal `{v}`"),
            Tok::Float(v) => format!("float literal `{v}`"),
            Tok::Var => "`var`".into(),
            Tok::For => "`for`".into(),
            Tok::From => "`from`".into(),
            Tok::To => "`to`".into(),
            Tok::If => "`if`".into(),
            Tok::Else => "`else`".into(),
            Tok::Sync => "`sync`".into(),
            Tok::Break => "`break`".into(),
            Tok::Colon => "`:`".into(),
            Tok::ColonColon => "`::`".into(),
            Tok::Assign => "`:=`".into(),
            Tok::Semi => "`;`".into(),
            Tok::Comma => "`,`".into(),
            Tok::Dot => "`.`".into(),
            Tok::LParen => "`(`".into(),
            Tok::RParen => "`)`".into(),
            Tok::LBrace => "`{`".into(),
            Tok::RBrace => "`}`".into(),
            Tok::LBracket => "`[`".into(),
            Tok::RBracket => "`]`".into(),
            Tok::Plus => "`+`".into(),
            Tok::Minus => "`-`".into(),
            Tok::Star => "`*`".into(),
            Tok::Slash => "`/`".into(),
            Tok::Lt => "`<`".into(),
            Tok::Gt => "`>`".into(),
            Tok::Le => "`<=`".into(),
            Tok::Ge => "`>=`".into(),
            Tok::EqEq => "`==`".into(),
            Tok::Ne => "`!=`".into(),
            Tok::Eof => "end of input".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Token {
    pub tok: Tok,
    pub loc: Loc,
}

pub fn lex(src: &str, origin: &str) -> Result<Vec<Token>, ParseError> {
    let mut toks = Vec::new();
    let bytes = src.as_bytes();
    let mut i = 0usize;
    let mut line = 1u32;
    let mut col = 1u32;

    macro_rules! push {
        ($tok:expr, $loc:expr) => {
            toks.push(Token { tok: $tok, loc: $loc })
        };
    }

    while i < bytes.len() {
        let c = bytes[i];
        let loc = Loc { line, col };
        match c {
            b' ' | b'\t' | b'\r' => {
                i += 1;
                col += 1;
            }
            b'\n' => {
                i += 1;
                line += 1;
                col = 1;
            }
            b'/' if i + 1 < bytes.len() && bytes[i + 1] == b'/' => {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            }
            b'/' => {
                push!(Tok::Slash, loc);
                i += 1;
                col += 1;
            }
            b'+' => {
                push!(Tok::Plus, loc);
                i += 1;
                col += 1;
            }
            b'-' => {
                push!(Tok::Minus, loc);
                i += 1;
                col += 1;
            }
            b'*' => {
                push!(Tok::Star, loc);
                i += 1;
                col += 1;
            }
            b';' => {
                push!(Tok::Semi, loc);
                i += 1;
                col += 1;
            }
            b',' => {
                push!(Tok::Comma, loc);
                i += 1;
                col += 1;
            }
            b'.' => {
                push!(Tok::Dot, loc);
                i += 1;
                col += 1;
            }
            b'(' => {
                push!(Tok::LParen, loc);
                i += 1;
                col += 1;
            }
            b')' => {
                push!(Tok::RParen, loc);
                i += 1;
                col += 1;
            }
            b'{' => {
                push!(Tok::LBrace, loc);
                i += 1;
                col += 1;
            }
            b'}' => {
                push!(Tok::RBrace, loc);
                i += 1;
                col += 1;
            }
            b'[' => {
                push!(Tok::LBracket, loc);
                i += 1;
                col += 1;
            }
            b']' => {
                push!(Tok::RBracket, loc);
                i += 1;
                col += 1;
            }
            b':' => {
                if i + 1 < bytes.len() && bytes[i + 1] == b':' {
                    push!(Tok::ColonColon, loc);
                    i += 2;
                    col += 2;
                } else if i + 1 < bytes.len() && bytes[i + 1] == b'=' {
                    push!(Tok::Assign, loc);
                    i += 2;
                    col += 2;
                } else {
                    push!(Tok::Colon, loc);
                    i += 1;
                    col += 1;
                }
            }
            b'<' => {
                if i + 1 < bytes.len() && bytes[i + 1] == b'=' {
                    push!(Tok::Le, loc);
                    i += 2;
                    col += 2;
                } else {
                    push!(Tok::Lt, loc);
                    i += 1;
                    col += 1;
                }
            }
            b'>' => {
                if i + 1 < bytes.len() && bytes[i + 1] == b'=' {
                    push!(Tok::Ge, loc);
                    i += 2;
                    col += 2;
                } else {
                    push!(Tok::Gt, loc);
                    i += 1;
                    col += 1;
                }
            }
            b'=' => {
                if i + 1 < bytes.len() && bytes[i + 1] == b'=' {
                    push!(Tok::EqEq, loc);
                    i += 2;
                    col += 2;
                } else {
                    return Err(ParseError::Lex {
                        origin: origin.into(),
                        loc,
                        message: "stray `=`; did you mean `:=` or `==`?".into(),
                    });
                }
            }
            b'!' => {
                if i + 1 < bytes.len() && bytes[i + 1] == b'=' {
                    push!(Tok::Ne, loc);
                    i += 2;
                    col += 2;
                } else {
                    return Err(ParseError::Lex {
                        origin: origin.into(),
                        loc,
                        message: "stray `!`; only `!=` is supported".into(),
                    });
                }
            }
            b'0'..=b'9' => {
                let start = i;
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
                let mut is_float = false;
                // Fractional part: a dot followed by a digit. A bare dot is
                // left to the parser (property access never follows a digit
                // in this language, but the rule keeps lexing local).
                if i + 1 < bytes.len() && bytes[i] == b'.' && bytes[i + 1].is_ascii_digit() {
                    is_float = true;
                    i += 1;
                    while i < bytes.len() && bytes[i].is_ascii_digit() {
                        i += 1;
                    }
                }
                // Exponent: e/E [+/-] digits.
                if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                    let mut j = i + 1;
                    if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                        j += 1;
                    }
                    if j < bytes.len() && bytes[j].is_ascii_digit() {
                        is_float = true;
                        i = j;
                        while i < bytes.len() && bytes[i].is_ascii_digit() {
                            i += 1;
                        }
                    }
                }
                let text = &src[start..i];
                col += (i - start) as u32;
                if is_float {
                    let v: f64 = text.parse().map_err(|_| ParseError::Lex {
                        origin: origin.into(),
                        loc,
                        message: format!("invalid float literal `{text}`"),
                    })?;
                    push!(Tok::Float(v), loc);
                } else {
                    let v: i64 = text.parse().map_err(|_| ParseError::Lex {
                        origin: origin.into(),
                        loc,
                        message: format!("integer literal `{text}` out of range"),
                    })?;
                    push!(Tok::Int(v), loc);
                }
            }
            c if c.is_ascii_alphabetic() || c == b'_' => {
                let start = i;
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                let text = &src[start..i];
                col += (i - start) as u32;
                let tok = match text {
                    "var" => Tok::Var,
                    "for" => Tok::For,
                    "from" => Tok::From,
                    "to" => Tok::To,
                    "if" => Tok::If,
                    "else" => Tok::Else,
                    "sync" => Tok::Sync,
                    "break" => Tok::Break,
                    _ => Tok::Ident(text.to_string()),
                };
                push!(tok, loc);
            }
            other => {
                return Err(ParseError::Lex {
                    origin: origin.into(),
                    loc,
                    message: format!("unexpected character `{}`", other as char),
                });
            }
        }
    }
    toks.push(Token {
        tok: Tok::Eof,
        loc: Loc { line, col },
    });
    Ok(toks)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kinds(src: &str) -> Vec<Tok> {
        lex(src, "<test>")
            .unwrap()
            .into_iter()
            .map(|t| t.tok)
            .collect()
    }

    #[test]
    fn punctuation_and_compound_tokens() {
        assert_eq!(
            kinds(":: := : <= >= == != < >"),
            vec![
                Tok::ColonColon,
                Tok::Assign,
                Tok::Colon,
                Tok::Le,
                Tok::Ge,
                Tok::EqEq,
                Tok::Ne,
                Tok::Lt,
                Tok::Gt,
                Tok::Eof
            ]
        );
    }

    #[test]
    fn numeric_literals() {
        assert_eq!(
            kinds("1 23 1.5 0.0001 1e-4 2.5E3"),
            vec![
                Tok::Int(1),
                Tok::Int(23),
                Tok::Float(1.5),
                Tok::Float(0.0001),
                Tok::Float(1e-4),
                Tok::Float(2.5e3),
                Tok::Eof
            ]
        );
    }

    #[test]
    fn comments_and_positions() {
        let toks = lex("a // rest ignored\n  b", "<test>").unwrap();
        assert_eq!(toks[0].loc, Loc { line: 1, col: 1 });
        assert_eq!(toks[1].loc, Loc { line: 2, col: 3 });
        assert_eq!(toks[1].tok, Tok::Ident("b".into()));
    }

    #[test]
    fn keywords_not_identifiers() {
        assert_eq!(
            kinds("var forx for"),
            vec![Tok::Var, Tok::Ident("forx".into()), Tok::For, Tok::Eof]
        );
    }

    #[test]
    fn rejects_stray_equals() {
        assert!(lex("a = 1", "<test>").is_err());
    }
}
