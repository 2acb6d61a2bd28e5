use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::DataError;

/// Instruction-following example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructSample {
    pub instruction: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<String>,
    pub output: String,
}

impl InstructSample {
    pub fn new(instruction: impl Into<String>, input: Option<String>, output: impl Into<String>) -> Self {
        InstructSample { instruction: instruction.into(), input, output: output.into() }
    }

    /// Non-empty input, if any.
    pub fn input(&self) -> Option<&str> {
        self.input.as_deref().filter(|s| !s.is_empty())
    }
}

fn string_field(
    obj: &serde_json::Map<String, Value>,
    line: usize,
    field: &'static str,
) -> Result<Option<String>, DataError> {
    match obj.get(field) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(s.clone())),
        Some(other) => {
            Err(DataError::InvalidField { line, field, reason: format!("expected a string, found {other}") })
        }
    }
}

/// Parses one JSON object per line. Blank lines are skipped; line numbers in
/// errors are 1-based.
pub fn parse_jsonl(reader: impl BufRead) -> Result<Vec<InstructSample>, DataError> {
    let mut samples = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let text = line.map_err(|e| DataError::Io(format!("line {line_no}: {e}")))?;
        if text.trim().is_empty() {
            continue;
        }
        let value: Value =
            serde_json::from_str(&text).map_err(|e| DataError::Json { line: line_no, message: e.to_string() })?;
        let Value::Object(obj) = value else {
            return Err(DataError::Json { line: line_no, message: "expected a JSON object".into() });
        };
        let required = |field: &'static str| -> Result<String, DataError> {
            let s = string_field(&obj, line_no, field)?.ok_or(DataError::MissingField { line: line_no, field })?;
            if s.is_empty() {
                return Err(DataError::InvalidField { line: line_no, field, reason: "must not be empty".into() });
            }
            Ok(s)
        };
        let instruction = required("instruction")?;
        let output = required("output")?;
        let input = string_field(&obj, line_no, "input")?;
        samples.push(InstructSample { instruction, input, output });
    }
    Ok(samples)
}

pub fn load_jsonl_dataset(path: impl AsRef<Path>) -> Result<Vec<InstructSample>, DataError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| DataError::Io(format!("{}: {e}", path.display())))?;
    parse_jsonl(BufReader::new(file))
}

pub fn write_jsonl(path: impl AsRef<Path>, samples: &[InstructSample]) -> Result<(), DataError> {
    let path = path.as_ref();
    let io = |e: std::io::Error| DataError::Io(format!("{}: {e}", path.display()));
    let mut out = std::io::BufWriter::new(File::create(path).map_err(io)?);
    for s in samples {
        let line = serde_json::to_string(s).map_err(|e| DataError::Io(e.to_string()))?;
        writeln!(out, "{line}").map_err(io)?;
    }
    out.flush().map_err(io)
}

const WORDS: &[&str] = &[
    "apple", "river", "stone", "cloud", "lamp", "garden", "window", "tiger", "paper", "silver", "orange", "forest",
    "bridge", "candle", "rocket", "pencil", "mirror", "violet", "harbor", "meadow", "copper", "falcon", "island",
    "marble",
];

fn words(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> Vec<&'static str> {
    let n = rng.random_range(lo..=hi);
    (0..n).map(|_| *WORDS.choose(rng).expect("word list is not empty")).collect()
}

/// Seeded synthetic instruction corpus. Every output is a deterministic
/// function of the instruction and input, so a small model can learn it.
pub fn synthetic_corpus(num_samples: usize, seed: u64) -> Vec<InstructSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..num_samples)
        .map(|_| match rng.random_range(0..5) {
            0 => {
                let w = words(&mut rng, 1, 6).join(" ");
                let out = w.chars().rev().collect::<String>();
                InstructSample::new("Reverse the text.", Some(w), out)
            }
            1 => {
                let w = words(&mut rng, 1, 8).join(" ");
                InstructSample::new("Convert the text to upper case.", Some(w.clone()), w.to_uppercase())
            }
            2 => {
                let (a, b) = (rng.random_range(0..1000u32), rng.random_range(0..1000u32));
                InstructSample::new(format!("What is {a} plus {b}?"), None, (a + b).to_string())
            }
            3 => {
                let w = words(&mut rng, 2, 10);
                InstructSample::new("Count the words.", Some(w.join(" ")), w.len().to_string())
            }
            _ => {
                let w = *WORDS.choose(&mut rng).expect("word list is not empty");
                let n = rng.random_range(1..=5);
                InstructSample::new(format!("Repeat the word {n} times."), Some(w.to_string()), vec![w; n].join(" "))
            }
        })
        .collect()
}

/// Contiguous slice of a dataset written like `train[:95%]` or `train[95%:]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub start: f64,
    pub end: f64,
}

impl SplitSpec {
    pub fn parse(spec: &str) -> Result<Self, DataError> {
        let bad = || DataError::Split(spec.to_string());
        let spec_trim = spec.trim();
        let Some(open) = spec_trim.find('[') else {
            return Ok(SplitSpec { start: 0.0, end: 1.0 });
        };
        let body = spec_trim[open + 1..].strip_suffix(']').ok_or_else(bad)?;
        let (lo, hi) = body.split_once(':').ok_or_else(bad)?;
        let frac = |s: &str, default: f64| -> Result<f64, DataError> {
            let s = s.trim();
            if s.is_empty() {
                return Ok(default);
            }
            let pct: f64 = s.strip_suffix('%').ok_or_else(bad)?.trim().parse().map_err(|_| bad())?;
            if !(0.0..=100.0).contains(&pct) {
                return Err(bad());
            }
            Ok(pct / 100.0)
        };
        let (start, end) = (frac(lo, 0.0)?, frac(hi, 1.0)?);
        if start > end {
            return Err(bad());
        }
        Ok(SplitSpec { start, end })
    }

    /// Index range of this split in a dataset of `len` items.
    pub fn range(&self, len: usize) -> std::ops::Range<usize> {
        let at = |f: f64| ((f * len as f64).round() as usize).min(len);
        at(self.start)..at(self.end)
    }
}
