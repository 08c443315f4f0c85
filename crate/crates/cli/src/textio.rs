//! Input/output value files.
//!
//! Bit-wire programs read and write newline-delimited decimal integers,
//! one per Input/Output instruction, in emission order. Batch programs
//! read and write rows of fixed-precision decimals, one row per
//! ciphertext slot vector, space-separated. Formatting is exact (scale
//! 2^20 values have finite decimal forms), so byte-level output
//! comparison is meaningful.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use memprog_core::drivers::{format_fixed, parse_fixed};
use memprog_core::engine::{ValueSink, ValueSource};

pub struct TextValueSource {
    lines: std::io::Lines<BufReader<File>>,
    path: String,
    line_no: usize,
}

impl TextValueSource {
    pub fn open(path: &Path) -> Result<TextValueSource> {
        let file =
            File::open(path).with_context(|| format!("opening input file {}", path.display()))?;
        Ok(TextValueSource {
            lines: BufReader::new(file).lines(),
            path: path.display().to_string(),
            line_no: 0,
        })
    }

    fn next_line(&mut self) -> Result<String, String> {
        loop {
            self.line_no += 1;
            match self.lines.next() {
                None => return Err(format!("{}: input underrun", self.path)),
                Some(Err(e)) => return Err(format!("{}: {e}", self.path)),
                Some(Ok(line)) => {
                    let line = line.trim();
                    if !line.is_empty() && !line.starts_with('#') {
                        return Ok(line.to_string());
                    }
                }
            }
        }
    }
}

impl ValueSource for TextValueSource {
    fn next_int(&mut self) -> Result<u128, String> {
        let line = self.next_line()?;
        line.parse::<u128>()
            .map_err(|e| format!("{}:{}: {e}", self.path, self.line_no))
    }

    fn next_row(&mut self, dimension: usize) -> Result<Vec<i64>, String> {
        let line = self.next_line()?;
        let row: Result<Vec<i64>, _> = line
            .split_ascii_whitespace()
            .map(|tok| parse_fixed(tok).map_err(|e| format!("{}:{}: {e}", self.path, self.line_no)))
            .collect();
        let row = row?;
        if row.len() != dimension {
            return Err(format!(
                "{}:{}: row has {} values, expected {dimension}",
                self.path,
                self.line_no,
                row.len()
            ));
        }
        Ok(row)
    }
}

pub struct TextValueSink {
    out: BufWriter<File>,
    path: String,
}

impl TextValueSink {
    pub fn create(path: &Path) -> Result<TextValueSink> {
        let file = File::create(path)
            .with_context(|| format!("creating output file {}", path.display()))?;
        Ok(TextValueSink {
            out: BufWriter::new(file),
            path: path.display().to_string(),
        })
    }

    pub fn finish(mut self) -> Result<()> {
        self.out
            .flush()
            .with_context(|| format!("flushing {}", self.path))
    }
}

impl ValueSink for TextValueSink {
    fn push_int(&mut self, _width: u16, value: u128) -> Result<(), String> {
        writeln!(self.out, "{value}").map_err(|e| format!("{}: {e}", self.path))
    }

    fn push_row(&mut self, row: &[i64]) -> Result<(), String> {
        let mut line = String::new();
        for (i, &v) in row.iter().enumerate() {
            if i > 0 {
                line.push(' ');
            }
            line.push_str(&format_fixed(v));
        }
        writeln!(self.out, "{line}").map_err(|e| format!("{}: {e}", self.path))
    }
}

/// Writes the worker input files and the expected-output file for a
/// generated workload dataset.
pub fn write_dataset(
    data: &memprog_core::workloads::WorkloadData,
    prefix: &Path,
) -> Result<Vec<std::path::PathBuf>> {
    let mut written = Vec::new();
    for (w, input) in data.per_worker.iter().enumerate() {
        let path = prefix.with_extension(format!("{w}.input"));
        let mut sink = TextValueSink::create(&path)?;
        for &v in &input.ints {
            sink.push_int(0, v).map_err(anyhow::Error::msg)?;
        }
        for row in &input.rows {
            sink.push_row(row).map_err(anyhow::Error::msg)?;
        }
        sink.finish()?;
        written.push(path);
    }
    let expected = prefix.with_extension("expected");
    let mut sink = TextValueSink::create(&expected)?;
    for &v in &data.expected_ints {
        sink.push_int(0, v).map_err(anyhow::Error::msg)?;
    }
    for row in &data.expected_rows {
        sink.push_row(row).map_err(anyhow::Error::msg)?;
    }
    sink.finish()?;
    written.push(expected);
    Ok(written)
}
