use super::ast::Loc;
use super::FrontendError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Tok {
    Ident(String),
    Int(i64),
    Punct(&'static str),
    Eof,
}

#[derive(Debug, Clone)]
pub struct Token {
    pub tok: Tok,
    pub loc: Loc,
}

// Longest first.
const PUNCTS: &[&str] = &[
    "<<=", ">>=", "...", "->", "++", "--", "&&", "||", "<=", ">=", "==", "!=", "+=", "-=", "*=",
    "/=", "%=", "<<", ">>", "(", ")", "{", "}", "[", "]", ";", ",", ".", "=", "<", ">", "+", "-",
    "*", "/", "%", "!", "&", "|", "^", "~", "?", ":",
];

pub fn tokenize(src: &str) -> Result<Vec<Token>, FrontendError> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    let mut line = 1u32;
    let mut col = 1u32;
    let mut at_line_start = true;

    macro_rules! bump {
        () => {{
            if bytes[i] == b'\n' {
                line += 1;
                col = 1;
                at_line_start = true;
            } else {
                col += 1;
            }
            i += 1;
        }};
    }

    while i < bytes.len() {
        let c = bytes[i];
        if c == b'\n' || c == b' ' || c == b'\t' || c == b'\r' {
            bump!();
            continue;
        }
        let loc = Loc { line, col };
        if c == b'#' && at_line_start {
            let start = i;
            while i < bytes.len() && bytes[i] != b'\n' {
                bump!();
            }
            let directive = src[start..i].trim();
            let word = directive[1..].trim_start();
            if !word.starts_with("include") {
                return Err(FrontendError::Unsupported {
                    feature: "preprocessor directive".into(),
                    loc,
                });
            }
            continue;
        }
        at_line_start = false;
        if c == b'/' && bytes.get(i + 1) == Some(&b'/') {
            while i < bytes.len() && bytes[i] != b'\n' {
                bump!();
            }
            continue;
        }
        if c == b'/' && bytes.get(i + 1) == Some(&b'*') {
            bump!();
            bump!();
            loop {
                if i + 1 >= bytes.len() {
                    return Err(FrontendError::parse(loc, "unterminated comment"));
                }
                if bytes[i] == b'*' && bytes[i + 1] == b'/' {
                    bump!();
                    bump!();
                    break;
                }
                bump!();
            }
            continue;
        }
        if c.is_ascii_alphabetic() || c == b'_' {
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                bump!();
            }
            out.push(Token {
                tok: Tok::Ident(src[start..i].to_string()),
                loc,
            });
            continue;
        }
        if c.is_ascii_digit() {
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric()) {
                bump!();
            }
            let text = src[start..i].trim_end_matches(['u', 'U', 'l', 'L']);
            let value = if let Some(hex) = text.strip_prefix("0x").or(text.strip_prefix("0X")) {
                i64::from_str_radix(hex, 16)
            } else {
                text.parse::<i64>()
            }
            .map_err(|_| FrontendError::parse(loc, format!("bad integer literal `{}`", &src[start..i])))?;
            out.push(Token {
                tok: Tok::Int(value),
                loc,
            });
            continue;
        }
        if c == b'\'' {
            // character literal: 'a' or '\n'
            let (value, len) = match (bytes.get(i + 1), bytes.get(i + 2), bytes.get(i + 3)) {
                (Some(b'\\'), Some(e), Some(b'\'')) => {
                    let v = match e {
                        b'n' => 10,
                        b't' => 9,
                        b'0' => 0,
                        other => *other as i64,
                    };
                    (v, 4)
                }
                (Some(ch), Some(b'\''), _) => (*ch as i64, 3),
                _ => return Err(FrontendError::parse(loc, "bad character literal")),
            };
            for _ in 0..len {
                bump!();
            }
            out.push(Token {
                tok: Tok::Int(value),
                loc,
            });
            continue;
        }
        if c == b'"' {
            return Err(FrontendError::parse(loc, "string literals are not supported"));
        }
        let rest = &src[i..];
        match PUNCTS.iter().find(|p| rest.starts_with(**p)) {
            Some(p) => {
                for _ in 0..p.len() {
                    bump!();
                }
                out.push(Token {
                    tok: Tok::Punct(p),
                    loc,
                });
            }
            None => {
                return Err(FrontendError::parse(
                    loc,
                    format!("unexpected character `{}`", rest.chars().next().unwrap()),
                ))
            }
        }
    }
    out.push(Token {
        tok: Tok::Eof,
        loc: Loc { line, col },
    });
    Ok(out)
}
