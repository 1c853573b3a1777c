//! `user<TAB>cluster` files shared by every clusterer and by the planted truth.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Label written for a user that could not be assigned.
pub const UNASSIGNED: &str = "-";

pub fn to_tsv<L: std::fmt::Display>(rows: &[(String, L)]) -> String {
    let mut out = String::new();
    for (u, l) in rows {
        writeln!(out, "{u}\t{l}").unwrap();
    }
    out
}

pub fn parse(text: &str) -> Result<Vec<(String, String)>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
        .map(|(i, line)| match line.split('\t').collect::<Vec<_>>()[..] {
            [u, l] if !u.is_empty() && !l.is_empty() => Ok((u.to_string(), l.to_string())),
            _ => Err(Error::parse(i + 1, "expected user<TAB>cluster")),
        })
        .collect()
}

pub fn write<L: std::fmt::Display>(path: impl AsRef<Path>, rows: &[(String, L)]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_tsv(rows)).map_err(|e| Error::io(path, e))
}

pub fn read(path: impl AsRef<Path>) -> Result<Vec<(String, String)>> {
    let path = path.as_ref();
    parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}
