//! Plain-text `key = value` configuration files.
//!
//! One pair per line; blank lines and `#` comments are ignored. Keys are
//! kept in file order and duplicates are rejected.

use crate::error::{Error, Result};

pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Parse(format!(
                "line {}: expected key=value, got '{line}'",
                lineno + 1
            ))
        })?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Parse(format!("line {}: empty key", lineno + 1)));
        }
        if out.iter().any(|(existing, _)| existing == k) {
            return Err(Error::Parse(format!(
                "line {}: duplicate key '{k}'",
                lineno + 1
            )));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

pub fn render_kv(pairs: &[(String, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

/// Parses a value, naming the key in the error.
pub fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Parse(format!("invalid value '{value}' for '{key}'")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_whitespace() {
        let kv = parse_kv("# header\n N = 32\n\nd=16 # trailing\n").unwrap();
        assert_eq!(
            kv,
            vec![("N".into(), "32".into()), ("d".into(), "16".into())]
        );
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(parse_kv("N 32").is_err());
        assert!(parse_kv("=3").is_err());
        assert!(parse_kv("a=1\na=2").is_err());
    }

    #[test]
    fn render_round_trips() {
        let kv = vec![
            ("seed".to_string(), "7".to_string()),
            ("kernel".to_string(), "bilateral".to_string()),
        ];
        assert_eq!(parse_kv(&render_kv(&kv)).unwrap(), kv);
    }

    #[test]
    fn value_errors_name_the_key() {
        let err = parse_value::<usize>("layers", "two").unwrap_err();
        assert!(err.to_string().contains("layers"));
    }
}
