//! Line-oriented `key = value` text used for configs and manifests.
//! Blank lines and `#` comments are skipped; keys keep file order.

use std::path::Path;

use crate::error::{Error, Result};

pub fn parse(text: &str, origin: &Path) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::format(origin, format!("line {}: expected `key = value`", n + 1))
        })?;
        let key = k.trim();
        if key.is_empty() {
            return Err(Error::format(origin, format!("line {}: empty key", n + 1)));
        }
        if out.iter().any(|(existing, _)| existing == key) {
            return Err(Error::format(origin, format!("line {}: duplicate key `{key}`", n + 1)));
        }
        out.push((key.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn render<'a>(entries: impl IntoIterator<Item = (&'a str, String)>) -> String {
    let mut s = String::new();
    for (k, v) in entries {
        s.push_str(k);
        s.push_str(" = ");
        s.push_str(&v);
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_rejects_duplicates() {
        let p = Path::new("t.cfg");
        let kv = parse("# header\nseed = 3\n\nalign=both # inline\n", p).unwrap();
        assert_eq!(kv, vec![("seed".into(), "3".into()), ("align".into(), "both".into())]);
        assert!(parse("a = 1\na = 2\n", p).is_err());
        assert!(parse("no equals sign\n", p).is_err());
    }
}
