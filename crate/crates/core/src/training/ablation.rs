//! Seeded sweeps over view subsets, fusion and λ.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{finetune, MetricsReport, TrainConfig, TrainOutcome};
use crate::dataio::TimeSeriesDataset;
use crate::error::{Error, Result};
use crate::model::{Model, ViewMask};

/// Axes of a sweep; every combination runs once per seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationGrid {
    pub views: Vec<ViewMask>,
    pub fusion: Vec<bool>,
    pub lambda: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for AblationGrid {
    fn default() -> Self {
        Self {
            views: vec![ViewMask::ALL],
            fusion: vec![true],
            lambda: vec![0.1],
            seeds: (0..5).collect(),
        }
    }
}

impl AblationGrid {
    /// The seven view subsets with everything else at its default.
    pub fn view_subsets() -> Self {
        Self {
            views: ViewMask::all_subsets(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (axis, len) in [
            ("views", self.views.len()),
            ("fusion", self.fusion.len()),
            ("lambda", self.lambda.len()),
            ("seeds", self.seeds.len()),
        ] {
            if len == 0 {
                return Err(Error::Config(format!("grid axis '{axis}' has no values")));
            }
        }
        if let Some(l) = self.lambda.iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
            return Err(Error::Config(format!("grid axis 'lambda' has invalid value {l}")));
        }
        Ok(())
    }

    pub fn settings(&self) -> Vec<Setting> {
        let mut out = Vec::new();
        for &views in &self.views {
            for &fusion in &self.fusion {
                for &lambda in &self.lambda {
                    out.push(Setting { views, fusion, lambda });
                }
            }
        }
        out
    }
}

/// One point of the grid, independent of the seed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Setting {
    pub views: ViewMask,
    pub fusion: bool,
    pub lambda: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: Setting,
    pub seed: u64,
    pub metrics: MetricsReport,
}

/// Mean and population standard deviation over seeds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub setting: Setting,
    pub runs: usize,
    pub accuracy: Stat,
    pub macro_precision: Stat,
    pub macro_recall: Stat,
    pub macro_f1: Stat,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationResults {
    pub rows: Vec<AblationRow>,
    pub aggregates: Vec<Aggregate>,
}

const METRICS: [&str; 4] = ["accuracy", "macro_precision", "macro_recall", "macro_f1"];

fn metric_values(m: &MetricsReport) -> [f64; 4] {
    [m.accuracy, m.macro_precision, m.macro_recall, m.macro_f1]
}

impl Aggregate {
    fn stats(&self) -> [Stat; 4] {
        [self.accuracy, self.macro_precision, self.macro_recall, self.macro_f1]
    }
}

impl AblationResults {
    fn from_rows(rows: Vec<AblationRow>, settings: &[Setting]) -> Self {
        let aggregates = settings
            .iter()
            .map(|s| {
                let runs: Vec<[f64; 4]> = rows
                    .iter()
                    .filter(|r| r.setting == *s)
                    .map(|r| metric_values(&r.metrics))
                    .collect();
                let stat = |k: usize| Stat::of(&runs.iter().map(|r| r[k]).collect::<Vec<_>>());
                Aggregate {
                    setting: *s,
                    runs: runs.len(),
                    accuracy: stat(0),
                    macro_precision: stat(1),
                    macro_recall: stat(2),
                    macro_f1: stat(3),
                }
            })
            .collect();
        Self { rows, aggregates }
    }

    /// Per-seed rows, then a `mean` and a `std` row per setting.
    pub fn to_csv(&self) -> String {
        let mut out = format!("views,fusion,lambda,seed,{}\n", METRICS.join(","));
        let prefix = |s: &Setting| format!("\"{}\",{},{}", s.views, s.fusion, s.lambda);
        for r in &self.rows {
            let v = metric_values(&r.metrics).map(|x| x.to_string());
            let _ = writeln!(out, "{},{},{}", prefix(&r.setting), r.seed, v.join(","));
        }
        for a in &self.aggregates {
            let stats = a.stats();
            let means = stats.map(|s| s.mean.to_string());
            let stds = stats.map(|s| s.std.to_string());
            let _ = writeln!(out, "{},mean,{}", prefix(&a.setting), means.join(","));
            let _ = writeln!(out, "{},std,{}", prefix(&a.setting), stds.join(","));
        }
        out
    }

    /// One line per setting with `mean ± std` cells.
    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| views | fusion | lambda | runs | accuracy | macro precision | macro recall | macro F1 |\n");
        out.push_str("|---|---|---|---|---|---|---|---|\n");
        for a in &self.aggregates {
            let cells: Vec<String> = a.stats().iter().map(|s| format!("{:.4} ± {:.4}", s.mean, s.std)).collect();
            let _ = writeln!(
                out,
                "| {{{}}} | {} | {} | {} | {} |",
                a.setting.views,
                if a.setting.fusion { "on" } else { "off" },
                a.setting.lambda,
                a.runs,
                cells.join(" | ")
            );
        }
        out
    }
}

/// Fine-tunes one model per (setting, seed) on `target`, starting from
/// `init` when given. `progress` sees each row and its full outcome as it
/// completes; an error from it aborts the sweep.
pub fn run_ablation_grid(
    base: &TrainConfig,
    grid: &AblationGrid,
    target: &TimeSeriesDataset,
    init: Option<&Model>,
    progress: &mut dyn FnMut(&AblationRow, &TrainOutcome) -> Result<()>,
) -> Result<AblationResults> {
    grid.validate()?;
    let settings = grid.settings();
    let mut rows = Vec::with_capacity(settings.len() * grid.seeds.len());
    for s in &settings {
        for &seed in &grid.seeds {
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.lambda = s.lambda;
            cfg.model.views = s.views;
            cfg.model.fusion = s.fusion;
            let outcome = finetune(init, target, &cfg)?;
            let metrics = outcome
                .test
                .clone()
                .ok_or_else(|| Error::Dataset("ablation target has an empty test split".into()))?;
            let row = AblationRow {
                setting: *s,
                seed,
                metrics,
            };
            progress(&row, &outcome)?;
            rows.push(row);
        }
    }
    Ok(AblationResults::from_rows(rows, &settings))
}
