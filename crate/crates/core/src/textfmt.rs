//! Shared framing for the line-oriented text formats.
//!
//! Every file starts with a magic line, `version: 1`, a fixed sequence of
//! `key: value` lines and a `checksum:` line holding the first 8 bytes of
//! the SHA-256 of all preceding header bytes. Any single-byte change to the
//! header therefore fails to parse or fails the checksum.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub(crate) const FORMAT_VERSION: u32 = 1;

pub(crate) fn digest_hex(bytes: &[u8], len: usize) -> String {
    let digest = Sha256::digest(bytes);
    hex::encode(&digest[..len])
}

pub(crate) fn write_header(out: &mut String, magic: &str, fields: &[(&str, String)]) {
    let start = out.len();
    out.push_str(magic);
    out.push('\n');
    out.push_str(&format!("version: {FORMAT_VERSION}\n"));
    for (k, v) in fields {
        out.push_str(&format!("{k}: {v}\n"));
    }
    let sum = digest_hex(&out.as_bytes()[start..], 8);
    out.push_str(&format!("checksum: {sum}\n"));
}

/// Line cursor that remembers 1-based line numbers.
pub(crate) struct Lines<'a> {
    text: &'a str,
    pos: usize,
    line: usize,
}

impl<'a> Lines<'a> {
    pub(crate) fn new(text: &'a str) -> Self {
        Self {
            text,
            pos: 0,
            line: 0,
        }
    }

    /// Byte offset of the next unread line.
    pub(crate) fn offset(&self) -> usize {
        self.pos
    }

    pub(crate) fn line_number(&self) -> usize {
        self.line
    }

    pub(crate) fn is_done(&self) -> bool {
        self.pos >= self.text.len()
    }

    /// Next LF-terminated line, without the terminator. A final line without
    /// a newline is reported as truncated.
    pub(crate) fn next_line(&mut self) -> Result<Option<(usize, &'a str)>> {
        if self.is_done() {
            return Ok(None);
        }
        self.line += 1;
        let rest = &self.text[self.pos..];
        match rest.find('\n') {
            Some(end) => {
                self.pos += end + 1;
                Ok(Some((self.line, &rest[..end])))
            }
            None => Err(Error::parse(
                self.line,
                "truncated file: last line has no terminating newline",
            )),
        }
    }

    pub(crate) fn expect_line(&mut self, what: &str) -> Result<(usize, &'a str)> {
        self.next_line()?.ok_or_else(|| {
            Error::parse(
                self.line + 1,
                format!("unexpected end of file, expected {what}"),
            )
        })
    }
}

/// Parsed header: values in the order the keys were requested.
#[derive(Debug)]
pub(crate) struct Header {
    values: Vec<(usize, String)>,
}

impl Header {
    pub(crate) fn raw(&self, index: usize) -> &str {
        &self.values[index].1
    }

    pub(crate) fn parse<T: std::str::FromStr>(&self, index: usize, key: &str) -> Result<T> {
        let (line, v) = &self.values[index];
        v.parse()
            .map_err(|_| Error::parse(*line, format!("invalid value {v:?} for `{key}`")))
    }
}

pub(crate) fn read_header(lines: &mut Lines<'_>, magic: &str, keys: &[&str]) -> Result<Header> {
    let start = lines.offset();
    let (n, first) = lines.expect_line("magic line")?;
    if first != magic {
        return Err(Error::Format(format!(
            "line {n}: expected magic {magic:?}, found {first:?}"
        )));
    }
    let (n, version_line) = lines.expect_line("version")?;
    let version = key_value(n, version_line, "version")?;
    match version.parse::<u32>() {
        Ok(FORMAT_VERSION) => {}
        _ => {
            return Err(Error::Version {
                found: version.to_string(),
                supported: FORMAT_VERSION,
            })
        }
    }
    let mut values = Vec::with_capacity(keys.len());
    for key in keys {
        let (n, line) = lines.expect_line(key)?;
        values.push((n, key_value(n, line, key)?.to_string()));
    }
    let covered = lines.text[start..lines.offset()].as_bytes();
    let expected = digest_hex(covered, 8);
    let (n, line) = lines.expect_line("checksum")?;
    let found = key_value(n, line, "checksum")?;
    if found != expected {
        return Err(Error::Format(format!(
            "line {n}: header checksum mismatch (stored {found}, computed {expected})"
        )));
    }
    Ok(Header { values })
}

fn key_value<'a>(line_no: usize, line: &'a str, key: &str) -> Result<&'a str> {
    match line.split_once(": ") {
        Some((k, v)) if k == key && !v.is_empty() => Ok(v),
        _ => Err(Error::parse(
            line_no,
            format!("expected `{key}: <value>`, found {line:?}"),
        )),
    }
}

pub(crate) fn read_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    String::from_utf8(bytes)
        .map_err(|e| Error::Format(format!("{}: not UTF-8: {e}", path.display())))
}

pub(crate) fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub(crate) fn parse_f64(line: usize, field: &str, s: &str) -> Result<f64> {
    let v: f64 = s
        .parse()
        .map_err(|_| Error::parse(line, format!("invalid number {s:?} for {field}")))?;
    if !v.is_finite() {
        return Err(Error::parse(line, format!("non-finite {field}: {s}")));
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> String {
        let mut s = String::new();
        write_header(&mut s, "MAGIC", &[("a", "1".into()), ("b", "xyz".into())]);
        s.push_str("body\n");
        s
    }

    #[test]
    fn header_round_trip() {
        let s = sample();
        let mut lines = Lines::new(&s);
        let h = read_header(&mut lines, "MAGIC", &["a", "b"]).unwrap();
        assert_eq!(h.parse::<u32>(0, "a").unwrap(), 1);
        assert_eq!(h.raw(1), "xyz");
        assert_eq!(lines.next_line().unwrap(), Some((6, "body")));
        assert_eq!(lines.next_line().unwrap(), None);
    }

    #[test]
    fn every_header_byte_is_protected() {
        let s = sample();
        let header_len = s.find("body").unwrap();
        for i in 0..header_len {
            for replacement in [b'0', b'x', b' ', b'\n', b':'] {
                let mut bytes = s.clone().into_bytes();
                if bytes[i] == replacement {
                    continue;
                }
                bytes[i] = replacement;
                let text = String::from_utf8(bytes).unwrap();
                let mut lines = Lines::new(&text);
                assert!(
                    read_header(&mut lines, "MAGIC", &["a", "b"]).is_err(),
                    "corruption at byte {i} -> {:?} accepted",
                    replacement as char
                );
            }
        }
    }

    #[test]
    fn future_version_is_refused() {
        let s = sample().replacen("version: 1", "version: 2", 1);
        let err = read_header(&mut Lines::new(&s), "MAGIC", &["a", "b"]).unwrap_err();
        assert!(matches!(err, Error::Version { .. }));
    }

    #[test]
    fn missing_final_newline_is_truncation() {
        let mut lines = Lines::new("abc");
        assert!(matches!(
            lines.next_line(),
            Err(Error::Parse { line: 1, .. })
        ));
    }
}
