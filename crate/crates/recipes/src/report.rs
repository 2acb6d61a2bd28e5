use std::fmt::Write as _;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::RecipeError;

/// One optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based and contiguous.
    pub step: u64,
    pub epoch: u64,
    pub loss: f32,
    pub lr: f32,
    /// Non-pad tokens consumed by the step.
    pub tokens: usize,
    pub wall_ms: f64,
    pub peak_forward_bytes: usize,
    pub peak_loss_bytes: usize,
    pub peak_backward_bytes: usize,
    pub peak_optimizer_bytes: usize,
    /// Most gradient bytes alive at once during the step.
    pub peak_grad_bytes: usize,
    /// Forward-phase peak above what was live when the step began.
    pub forward_activation_bytes: usize,
    pub val_loss: Option<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps: u64,
    pub total_tokens: usize,
    pub total_wall_s: f64,
    /// `total_tokens / total_wall_s`.
    pub tokens_per_sec: f64,
    pub peak_memory_bytes: usize,
    pub final_loss: Option<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecipeRunReport {
    pub recipe: String,
    pub steps: Vec<StepRecord>,
}

impl RecipeRunReport {
    pub fn new(recipe: impl Into<String>) -> Self {
        RecipeRunReport { recipe: recipe.into(), steps: Vec::new() }
    }

    pub fn losses(&self) -> Vec<f32> {
        self.steps.iter().map(|s| s.loss).collect()
    }

    pub fn summary(&self) -> RunSummary {
        let total_tokens = self.steps.iter().map(|s| s.tokens).sum();
        let total_wall_s = self.steps.iter().map(|s| s.wall_ms).sum::<f64>() / 1000.0;
        let peak = |s: &StepRecord| {
            s.peak_forward_bytes.max(s.peak_loss_bytes).max(s.peak_backward_bytes).max(s.peak_optimizer_bytes)
        };
        RunSummary {
            steps: self.steps.len() as u64,
            total_tokens,
            total_wall_s,
            tokens_per_sec: if total_wall_s > 0.0 { total_tokens as f64 / total_wall_s } else { 0.0 },
            peak_memory_bytes: self.steps.iter().map(peak).max().unwrap_or(0),
            final_loss: self.steps.last().map(|s| s.loss),
        }
    }

    pub fn write_csv(&self, out: impl Write) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        for s in &self.steps {
            w.serialize(s)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn summary_text(&self) -> String {
        let s = self.summary();
        let mut out = String::new();
        let _ = writeln!(out, "recipe: {}", self.recipe);
        let _ = writeln!(out, "steps: {}", s.steps);
        if let Some(l) = s.final_loss {
            let _ = writeln!(out, "final loss: {l:.6}");
        }
        let _ =
            writeln!(out, "tokens: {} in {:.3} s ({:.1} tokens/s)", s.total_tokens, s.total_wall_s, s.tokens_per_sec);
        let _ = writeln!(out, "peak memory: {:.2} MiB", s.peak_memory_bytes as f64 / (1 << 20) as f64);
        out
    }

    /// `report.csv` and `summary.txt` under `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), RecipeError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| RecipeError::io(dir, e))?;
        let csv_path = dir.join("report.csv");
        let file = File::create(&csv_path).map_err(|e| RecipeError::io(&csv_path, e))?;
        self.write_csv(file).map_err(|e| RecipeError::io(&csv_path, e))?;
        let txt = dir.join("summary.txt");
        std::fs::write(&txt, self.summary_text()).map_err(|e| RecipeError::io(&txt, e))
    }
}

/// Streams step rows to `log_dir/metrics.csv`, flushing at step boundaries.
pub struct CsvLogger {
    writer: csv::Writer<File>,
    path: std::path::PathBuf,
}

impl CsvLogger {
    pub fn create(log_dir: impl AsRef<Path>) -> Result<Self, RecipeError> {
        let dir = log_dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| RecipeError::io(dir, e))?;
        let path = dir.join("metrics.csv");
        let file = File::create(&path).map_err(|e| RecipeError::io(&path, e))?;
        Ok(CsvLogger { writer: csv::Writer::from_writer(file), path })
    }

    pub fn log(&mut self, record: &StepRecord) -> Result<(), RecipeError> {
        self.writer.serialize(record).map_err(|e| RecipeError::io(&self.path, e))?;
        self.writer.flush().map_err(|e| RecipeError::io(&self.path, e))
    }
}
