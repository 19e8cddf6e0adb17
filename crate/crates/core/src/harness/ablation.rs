//! The three-mode ablation: full model, without the CLIP branch, and
//! without cross-domain learning, each over the same seeds and data.

use std::fmt::Write as _;

use serde::Serialize;

use super::config::TrainConfig;
use super::experiment::{run_experiment, PreparedData, RunResult};
use super::train::MetricsRecord;
use crate::error::Result;
use crate::model::Mode;
use crate::tensor::Real;

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub mode: Mode,
    pub seed: u64,
    pub test_top1: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ModeSummary {
    pub mode: Mode,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single seed.
    pub std: f64,
    pub runs: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

fn label(mode: Mode) -> &'static str {
    match mode {
        Mode::Full => "CCVQA",
        Mode::NoClip => "CCVQA w/o CLIP",
        Mode::NoCrossdomain => "CCVQA w/o Cross-domain Learning",
    }
}

impl AblationTable {
    pub fn from_runs(runs: &[RunResult]) -> Self {
        Self {
            rows: runs
                .iter()
                .map(|r| AblationRow {
                    mode: r.mode,
                    seed: r.seed,
                    test_top1: r.test.top1,
                })
                .collect(),
        }
    }

    pub fn summary(&self, mode: Mode) -> ModeSummary {
        let xs: Vec<f64> = self.rows.iter().filter(|r| r.mode == mode).map(|r| r.test_top1).collect();
        let n = xs.len();
        let mean = if n == 0 { 0.0 } else { xs.iter().sum::<f64>() / n as f64 };
        let std = if n < 2 {
            0.0
        } else {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        ModeSummary { mode, mean, std, runs: n }
    }

    /// Aligned text with one line per mode: mean and standard deviation of
    /// test top-1 accuracy in percent, then the individual runs.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<34} {:>8} {:>7}  runs", "Method", "top-1 %", "std");
        for mode in Mode::ALL {
            let m = self.summary(mode);
            let runs: Vec<String> = self
                .rows
                .iter()
                .filter(|r| r.mode == mode)
                .map(|r| format!("{:.1}", 100.0 * r.test_top1))
                .collect();
            let _ = writeln!(
                s,
                "{:<34} {:>8.1} {:>7.1}  {}",
                label(mode),
                100.0 * m.mean,
                100.0 * m.std,
                runs.join(" ")
            );
        }
        s
    }
}

/// Trains every mode under every seed. `on_metrics` sees each record along
/// with the mode and seed that produced it.
pub fn run_ablation<T: Real>(
    cfg: &TrainConfig,
    data: &PreparedData,
    mut on_metrics: impl FnMut(Mode, u64, &MetricsRecord),
) -> Result<(AblationTable, Vec<RunResult>)> {
    let mut runs = Vec::new();
    for mode in Mode::ALL {
        for &seed in &cfg.ablation_seeds {
            let (r, _) = run_experiment::<T>(cfg, data, mode, seed, |m| on_metrics(mode, seed, m))?;
            runs.push(r);
        }
    }
    Ok((AblationTable::from_runs(&runs), runs))
}
