//! Small helpers for the line-oriented model and checkpoint files.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Writes `contents` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = Path::new(&tmp);
    let mut f = fs::File::create(tmp).map_err(|e| Error::io(tmp, e))?;
    f.write_all(contents).and_then(|_| f.sync_all()).map_err(|e| Error::io(tmp, e))?;
    fs::rename(tmp, path).map_err(|e| Error::io(path, e))
}

pub(crate) struct LineCursor<'a> {
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
    last: usize,
}

impl<'a> LineCursor<'a> {
    pub fn new(text: &'a str) -> Self {
        Self { lines: text.lines().enumerate(), last: 0 }
    }

    pub fn err(&self, msg: impl std::fmt::Display) -> Error {
        Error::ModelFormat(format!("line {}: {msg}", self.last))
    }

    pub fn next_line(&mut self) -> Result<&'a str> {
        match self.lines.next() {
            Some((i, l)) => {
                self.last = i + 1;
                Ok(l)
            }
            None => Err(Error::ModelFormat("unexpected end of file".into())),
        }
    }

    /// Reads `key value` and returns `value`.
    pub fn field(&mut self, key: &str) -> Result<&'a str> {
        let line = self.next_line()?;
        match line.split_once(' ') {
            Some((k, v)) if k == key => Ok(v.trim()),
            _ if line == key => Ok(""),
            _ => Err(self.err(format!("expected '{key}', found {line:?}"))),
        }
    }

    pub fn parsed<V: FromStr>(&mut self, key: &str) -> Result<V> {
        let v = self.field(key)?;
        v.parse().map_err(|_| self.err(format!("bad value for '{key}': {v:?}")))
    }

    pub fn expect(&mut self, line: &str) -> Result<()> {
        let got = self.next_line()?;
        if got != line {
            return Err(self.err(format!("expected '{line}', found {got:?}")));
        }
        Ok(())
    }

    pub fn values<V: FromStr>(&mut self, expected: usize) -> Result<Vec<V>> {
        let line = self.next_line()?;
        let vals = line
            .split_whitespace()
            .map(|t| t.parse::<V>().map_err(|_| self.err(format!("bad number {t:?}"))))
            .collect::<Result<Vec<V>>>()?;
        if vals.len() != expected {
            return Err(self.err(format!("shape mismatch: expected {expected} values, found {}", vals.len())));
        }
        Ok(vals)
    }
}

pub(crate) fn join<V: std::fmt::Display>(vals: &[V]) -> String {
    let mut s = String::new();
    for (i, v) in vals.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        s.push_str(&v.to_string());
    }
    s
}
