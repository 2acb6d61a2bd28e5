//! Central-difference gradient checks.
//!
//! Non-scalar outputs are reduced with a fixed random weighting so every output
//! element contributes. Finite-difference evaluations run without a tape and
//! accumulate the weighted sum in f64. Central differences at two step sizes
//! are Richardson-combined: a wider step keeps f32 rounding noise in the
//! forward pass small relative to the difference, and the extrapolation
//! removes the truncation error the wider step would otherwise add.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ops;
use super::param::Parameter;
use super::tape::Tape;
use super::tensor::Tensor;
use super::TensorError;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Wider of the two finite-difference steps (the other is half of it).
    pub step: f32,
    /// Allowed relative error.
    pub rtol: f64,
    /// Magnitude below which errors are measured absolutely: the relative
    /// error is `|a - n| / max(|a|, |n|, floor)`.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { step: 2e-2, rtol: 1e-3, floor: 5e-2, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub entries_checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<Mismatch>,
    pub failures: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.entries_checked > 0
    }

    fn record(&mut self, cfg: &GradCheckConfig, input: usize, index: usize, analytic: f64, numeric: f64) {
        let scale = analytic.abs().max(numeric.abs()).max(cfg.floor);
        let rel = (analytic - numeric).abs() / scale;
        self.entries_checked += 1;
        if !rel.is_finite() || rel > cfg.rtol {
            self.failures += 1;
        }
        if !(rel <= self.max_rel_error) {
            self.max_rel_error = rel;
            self.worst = Some(Mismatch { input, index, analytic, numeric });
        }
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.entries_checked += other.entries_checked;
        self.failures += other.failures;
        if other.max_rel_error > self.max_rel_error || other.max_rel_error.is_nan() {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
    }
}

fn weights(numel: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    (0..numel).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}

fn weighted_sum(out: &Tensor, w: &[f32]) -> f64 {
    out.data().iter().zip(w).map(|(&o, &w)| f64::from(o) * f64::from(w)).sum()
}

fn reduce(out: &Tensor, w: &[f32]) -> Result<Tensor, TensorError> {
    let wt = Tensor::new(out.shape(), w.to_vec())?;
    ops::sum_all(&ops::mul(out, &wt)?)
}

// Divides by the step actually taken: `x + h` is rounded to f32.
fn central((f_plus, x_plus): (f64, f32), (f_minus, x_minus): (f64, f32)) -> f64 {
    (f_plus - f_minus) / (f64::from(x_plus) - f64::from(x_minus))
}

// Combines central differences at steps h and h/2, cancelling the h^2 term.
fn richardson(wide: f64, narrow: f64) -> f64 {
    (4.0 * narrow - wide) / 3.0
}

/// Checks d f / d inputs for a function of plain tensors.
pub fn check_inputs(
    inputs: &[Tensor],
    f: impl Fn(&[Tensor]) -> Result<Tensor, TensorError>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport, TensorError> {
    let tape = Tape::new();
    let leaves: Vec<Tensor> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = f(&leaves)?;
    let w = weights(out.numel(), cfg.seed);
    let loss = reduce(&out, &w)?;
    let mut analytic = Vec::with_capacity(inputs.len());
    if loss.requires_grad() {
        tape.backward(&loss)?;
    }
    for leaf in &leaves {
        analytic.push(tape.grad(leaf).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; leaf.numel()]));
    }

    let mut report = GradCheckReport::default();
    let h = cfg.step;
    for (k, input) in inputs.iter().enumerate() {
        for i in 0..input.numel() {
            let eval = |delta: f32| -> Result<(f64, f32), TensorError> {
                let mut moved: Vec<Tensor> = inputs.iter().map(Tensor::detach).collect();
                let mut data = input.to_vec();
                data[i] += delta;
                let at = data[i];
                moved[k] = Tensor::new(input.shape(), data)?;
                Ok((weighted_sum(&f(&moved)?, &w), at))
            };
            let numeric = richardson(central(eval(h)?, eval(-h)?), central(eval(h / 2.0)?, eval(-h / 2.0)?));
            report.record(cfg, k, i, f64::from(analytic[k][i]), numeric);
        }
    }
    Ok(report)
}

/// Checks d f / d params for a forward pass that reads `params` through the
/// given tape.
pub fn check_parameters(
    params: &[Parameter],
    f: impl Fn(&Tape) -> Result<Tensor, TensorError>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport, TensorError> {
    for p in params {
        p.zero_grad();
    }
    let tape = Tape::new();
    let out = f(&tape)?;
    let w = weights(out.numel(), cfg.seed);
    let loss = reduce(&out, &w)?;
    if loss.requires_grad() {
        tape.backward(&loss)?;
    }
    drop(tape);
    let analytic: Vec<Vec<f32>> =
        params.iter().map(|p| p.take_grad().map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; p.numel()])).collect();

    let mut report = GradCheckReport::default();
    let h = cfg.step;
    for (k, p) in params.iter().enumerate() {
        let original = p.to_vec();
        for i in 0..p.numel() {
            let eval = |delta: f32| -> Result<(f64, f32), TensorError> {
                let mut data = original.clone();
                data[i] += delta;
                let at = data[i];
                p.set_value(&data)?;
                let out = f(&Tape::no_grad())?;
                Ok((weighted_sum(&out, &w), at))
            };
            let wide = eval(h).and_then(|plus| Ok(central(plus, eval(-h)?)));
            let narrow = eval(h / 2.0).and_then(|plus| Ok(central(plus, eval(-h / 2.0)?)));
            p.set_value(&original)?;
            let numeric = richardson(wide?, narrow?);
            report.record(cfg, k, i, f64::from(analytic[k][i]), numeric);
        }
    }
    Ok(report)
}
