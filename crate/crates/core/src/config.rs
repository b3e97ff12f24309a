//! `key = value` configuration text.

use std::collections::BTreeMap;

/// Parses `key = value` lines. Blank lines and `#` comments are skipped.
/// A key given twice keeps the last value; see [`parse_kv_multi`] for
/// repeatable keys.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>, String> {
    Ok(parse_kv_multi(text)?.into_iter().collect())
}

/// Like [`parse_kv`] but keeps every occurrence in file order.
pub fn parse_kv_multi(text: &str) -> Result<Vec<(String, String)>, String> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected key = value", n + 1))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(format!("line {}: empty key", n + 1));
        }
        out.push((k.to_owned(), v.trim().to_owned()));
    }
    Ok(out)
}

/// Decimal or `0x`-prefixed hexadecimal byte.
pub fn parse_u8(s: &str) -> Result<u8, String> {
    let s = s.trim();
    let r = match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        Some(hex) => u8::from_str_radix(hex, 16),
        None => s.parse(),
    };
    r.map_err(|_| format!("invalid byte value {s:?}"))
}

pub fn parse_bool(s: &str) -> Result<bool, String> {
    match s.trim() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        other => Err(format!("invalid boolean {other:?}")),
    }
}
