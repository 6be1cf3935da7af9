//! Lenient JSON decoding for model replies.
//!
//! Replies are tried as strict JSON first. Failing that, a sequence of
//! repairs is applied and the result is flagged as repaired:
//! markdown fences are stripped, the first balanced object or array is cut
//! out of surrounding prose, single-quoted strings and bare words are quoted,
//! Python literals are mapped, trailing commas dropped, and doubled braces
//! (`{{ ... }}`, as printed in format-string examples) collapsed.

use serde_json::Value;

#[derive(Debug, Clone, PartialEq)]
pub struct Lenient {
    pub value: Value,
    pub repaired: bool,
}

pub fn parse_lenient(raw: &str) -> Result<Lenient, String> {
    let trimmed = raw.trim();
    if let Ok(value) = serde_json::from_str(trimmed) {
        return Ok(Lenient { value, repaired: false });
    }
    let unfenced = strip_code_fences(trimmed);
    let block = extract_balanced(unfenced).ok_or_else(|| "no JSON object or array found".to_string())?;
    let mut last_err = String::new();
    for candidate in [
        block.to_string(),
        normalize(block),
        normalize(&collapse_double_braces(block)),
    ] {
        match serde_json::from_str(&candidate) {
            Ok(value) => return Ok(Lenient { value, repaired: true }),
            Err(e) => last_err = e.to_string(),
        }
    }
    Err(format!("not JSON after repair: {last_err}"))
}

fn strip_code_fences(s: &str) -> &str {
    let Some(start) = s.find("```") else {
        return s;
    };
    let after = &s[start + 3..];
    // Skip the info string (```json).
    let body_start = after.find('\n').map(|i| i + 1).unwrap_or(0);
    let body = &after[body_start..];
    match body.find("```") {
        Some(end) => body[..end].trim(),
        None => body.trim(),
    }
}

/// Returns the first balanced `{...}` or `[...]` span, respecting
/// double-quoted strings.
fn extract_balanced(s: &str) -> Option<&str> {
    let start = s.find(['{', '['])?;
    let mut depth = 0usize;
    let mut in_str = false;
    let mut esc = false;
    for (i, ch) in s[start..].char_indices() {
        if in_str {
            match ch {
                _ if esc => esc = false,
                '\\' => esc = true,
                '"' => in_str = false,
                _ => {}
            }
            continue;
        }
        match ch {
            '"' => in_str = true,
            '{' | '[' => depth += 1,
            '}' | ']' => {
                depth = depth.checked_sub(1)?;
                if depth == 0 {
                    return Some(&s[start..start + i + 1]);
                }
            }
            _ => {}
        }
    }
    None
}

fn collapse_double_braces(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars().peekable();
    let mut in_str = false;
    let mut esc = false;
    while let Some(c) = chars.next() {
        if in_str {
            out.push(c);
            match c {
                _ if esc => esc = false,
                '\\' => esc = true,
                '"' => in_str = false,
                _ => {}
            }
            continue;
        }
        match c {
            '"' => {
                in_str = true;
                out.push(c);
            }
            '{' | '}' if chars.peek() == Some(&c) => {
                chars.next();
                out.push(c);
            }
            _ => out.push(c),
        }
    }
    out
}

#[derive(Clone, Copy, PartialEq)]
enum Ctx {
    ObjectKey,
    ObjectValue,
    Array,
}

/// Token-level rewrite into strict JSON.
fn normalize(s: &str) -> String {
    let chars: Vec<char> = s.chars().collect();
    let mut out = String::with_capacity(s.len() + 16);
    let mut stack: Vec<Ctx> = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        match c {
            '"' => {
                let start = i;
                i += 1;
                let mut esc = false;
                while i < chars.len() {
                    let ch = chars[i];
                    if esc {
                        esc = false;
                    } else if ch == '\\' {
                        esc = true;
                    } else if ch == '"' {
                        break;
                    }
                    i += 1;
                }
                out.extend(&chars[start..(i + 1).min(chars.len())]);
                i += 1;
                continue;
            }
            '\'' => {
                let mut text = String::new();
                i += 1;
                while i < chars.len() && chars[i] != '\'' {
                    if chars[i] == '\\' && i + 1 < chars.len() {
                        i += 1;
                    }
                    text.push(chars[i]);
                    i += 1;
                }
                out.push_str(&serde_json::to_string(&text).expect("string encodes"));
                i += 1;
                continue;
            }
            '{' => stack.push(Ctx::ObjectKey),
            '[' => stack.push(Ctx::Array),
            '}' | ']' => {
                stack.pop();
            }
            ':' => {
                if let Some(top) = stack.last_mut() {
                    if *top == Ctx::ObjectKey {
                        *top = Ctx::ObjectValue;
                    }
                }
            }
            ',' => {
                let next = chars[i + 1..].iter().find(|c| !c.is_whitespace());
                if matches!(next, Some('}') | Some(']') | None) {
                    i += 1;
                    continue;
                }
                if let Some(top) = stack.last_mut() {
                    if *top == Ctx::ObjectValue {
                        *top = Ctx::ObjectKey;
                    }
                }
            }
            c if c.is_whitespace() => {}
            _ => {
                let in_key = stack.last() == Some(&Ctx::ObjectKey);
                let start = i;
                while i < chars.len() {
                    let ch = chars[i];
                    if matches!(ch, ',' | '}' | ']') || (in_key && ch == ':') {
                        break;
                    }
                    i += 1;
                }
                let token: String = chars[start..i].iter().collect();
                out.push_str(&bare_token(token.trim()));
                let trailing = token.len() - token.trim_end().len();
                out.extend(std::iter::repeat_n(' ', trailing));
                continue;
            }
        }
        out.push(c);
        i += 1;
    }
    out
}

fn bare_token(token: &str) -> String {
    match token {
        "true" | "false" | "null" => token.to_string(),
        "True" => "true".into(),
        "False" => "false".into(),
        "None" => "null".into(),
        _ if serde_json::from_str::<serde_json::Number>(token).is_ok() => token.to_string(),
        _ => serde_json::to_string(token).expect("string encodes"),
    }
}
