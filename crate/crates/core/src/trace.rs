//! Per-iteration objective traces (`iter,<objective>,max_param_delta` CSV).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    pub objective: f64,
    pub max_param_delta: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    /// Column name of the objective, e.g. `log_objective` or `log_likelihood`.
    pub objective_name: String,
    pub rows: Vec<TraceRow>,
}

impl Trace {
    pub fn new(objective_name: impl Into<String>) -> Self {
        Trace {
            objective_name: objective_name.into(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, iter: usize, objective: f64, max_param_delta: f64) {
        self.rows.push(TraceRow {
            iter,
            objective,
            max_param_delta,
        });
    }

    pub fn objectives(&self) -> impl Iterator<Item = f64> + '_ {
        self.rows.iter().map(|r| r.objective)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("iter,{},max_param_delta\n", self.objective_name);
        for r in &self.rows {
            writeln!(out, "{},{},{}", r.iter, r.objective, r.max_param_delta).unwrap();
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let header = lines
            .next()
            .map(|(_, h)| h)
            .ok_or_else(|| Error::parse(1, "empty trace file"))?;
        let cols: Vec<&str> = header.split(',').collect();
        let objective_name = match cols[..] {
            ["iter", name, "max_param_delta"] if !name.is_empty() => name.to_string(),
            _ => {
                return Err(Error::parse(
                    1,
                    format!("expected header iter,<objective>,max_param_delta, got {header:?}"),
                ))
            }
        };
        let mut trace = Trace::new(objective_name);
        for (i, line) in lines {
            if line.is_empty() {
                continue;
            }
            let line_no = i + 1;
            let fields: Vec<&str> = line.split(',').collect();
            let [iter, obj, delta] = fields[..] else {
                return Err(Error::parse(line_no, "expected 3 comma-separated fields"));
            };
            let bad = |what: &str| Error::parse(line_no, format!("bad {what}"));
            trace.push(
                iter.parse().map_err(|_| bad("iteration"))?,
                obj.parse().map_err(|_| bad("objective"))?,
                delta.parse().map_err(|_| bad("delta"))?,
            );
        }
        Ok(trace)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let mut t = Trace::new("log_likelihood");
        t.push(1, -12.5, 0.25);
        t.push(2, -11.000000000000002, 1e-7);
        let text = t.to_csv();
        assert!(text.starts_with("iter,log_likelihood,max_param_delta\n1,-12.5,0.25\n"));
        assert_eq!(Trace::from_csv(&text).unwrap(), t);
    }

    #[test]
    fn rejects_bad_header_and_rows() {
        assert!(Trace::from_csv("a,b\n").is_err());
        assert!(Trace::from_csv("").is_err());
        assert!(matches!(
            Trace::from_csv("iter,x,max_param_delta\n1,oops,0\n"),
            Err(Error::Parse { line: 2, .. })
        ));
    }
}
