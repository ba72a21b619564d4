//! Ablation grids over the pooling and loss axes.

use std::path::{Path, PathBuf};

use mqmha::harness::{evaluate, train, Dataset, PoolingChoice, TrainConfig};
use mqmha::loss::LossConfig;
use mqmha::pooling::{PoolingConfig, WeightMode};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::report::{Report, ReportRow};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Pooling,
    Loss,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Pooling => "pooling",
            Axis::Loss => "loss",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub label: String,
    pub pooling: PoolingChoice,
    pub loss: LossConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub axis: Axis,
    pub points: Vec<SweepPoint>,
}

impl SweepSpec {
    /// Head/query grid on top of plain AM-Softmax. Two-layer rows keep the
    /// hidden width of `template` when it is an attentive config.
    pub fn pooling_axis(config: &ExperimentConfig) -> Self {
        let d = *config.encoder.widths.last().unwrap_or(&0);
        let loss = LossConfig {
            margin_prime: 0.0,
            k_top: 0,
            ..config.loss.clone()
        };
        let hidden = match &config.pooling {
            PoolingChoice::Mqmha(p) => p.hidden,
            PoolingChoice::Statistics { .. } => mqmha::pooling::DEFAULT_HIDDEN,
        };
        let mut poolings = vec![PoolingChoice::statistics()];
        let mut add = |p: PoolingConfig| poolings.push(PoolingChoice::Mqmha(p));
        for h in [1, 2, 4, 8, 16, 32] {
            add(PoolingConfig::new(d, h, 1, 1));
        }
        for q in [2, 4, 8] {
            add(PoolingConfig::new(d, 1, q, 1));
        }
        for q in [2, 4, 8] {
            add(PoolingConfig::new(d, 16, q, 1));
        }
        add(PoolingConfig::new(d, 16, 4, 2).with_hidden(hidden));
        add(PoolingConfig::new(d, 16, 4, 2).with_hidden(hidden).with_weight_mode(WeightMode::Unique));
        let points = poolings
            .into_iter()
            .map(|pooling| SweepPoint {
                label: pooling.label(),
                pooling,
                loss: loss.clone(),
            })
            .collect();
        Self {
            axis: Axis::Pooling,
            points,
        }
    }

    /// Margin and inter-topK grid on top of plain statistics pooling.
    pub fn loss_axis(config: &ExperimentConfig) -> Self {
        let base = LossConfig {
            margin: 0.2,
            margin_prime: 0.0,
            k_top: 0,
            ..config.loss.clone()
        };
        let mut losses = Vec::new();
        for m in [0.20, 0.22, 0.24, 0.26] {
            losses.push(LossConfig { margin: m, ..base.clone() });
        }
        for mp in [0.02, 0.04, 0.06, 0.08] {
            losses.push(LossConfig {
                margin_prime: mp,
                k_top: 5,
                ..base.clone()
            });
        }
        for k in [1, 2, 5, 10] {
            losses.push(LossConfig {
                margin_prime: 0.06,
                k_top: k,
                ..base.clone()
            });
        }
        let points = losses
            .into_iter()
            .enumerate()
            .map(|(i, loss)| SweepPoint {
                label: if i == 0 {
                    format!("{} (baseline)", loss.label())
                } else {
                    loss.label()
                },
                pooling: PoolingChoice::statistics(),
                loss,
            })
            .collect();
        Self {
            axis: Axis::Loss,
            points,
        }
    }

    pub fn for_axis(axis: Axis, config: &ExperimentConfig) -> Self {
        match axis {
            Axis::Pooling => Self::pooling_axis(config),
            Axis::Loss => Self::loss_axis(config),
        }
    }

    /// Validates every grid point before anything runs.
    pub fn validate(&self, config: &ExperimentConfig) -> CliResult<()> {
        for point in &self.points {
            let candidate = ExperimentConfig {
                pooling: point.pooling.clone(),
                loss: point.loss.clone(),
                ..config.clone()
            };
            candidate
                .validate()
                .map_err(|e| CliError::Validation(format!("grid point {:?}: {e}", point.label)))?;
        }
        Ok(())
    }

    /// Indices of the distinct `(pooling, loss)` pairs, in first-seen order,
    /// and for each point the index of the distinct run it reuses.
    fn unique_runs(&self) -> (Vec<usize>, Vec<usize>) {
        let mut seen: Vec<usize> = Vec::new();
        let mut map = Vec::with_capacity(self.points.len());
        for (i, p) in self.points.iter().enumerate() {
            let found = seen
                .iter()
                .position(|&j| self.points[j].pooling == p.pooling && self.points[j].loss == p.loss);
            map.push(found.unwrap_or_else(|| {
                seen.push(i);
                seen.len() - 1
            }));
        }
        (seen, map)
    }
}

/// Training settings of a sweep run: the experiment's, shortened per the
/// `sweep` section.
pub fn sweep_train_config(config: &ExperimentConfig) -> TrainConfig {
    TrainConfig {
        max_steps: config.sweep.max_steps,
        validate_every: config.sweep.validate_every,
        margin_warmup_steps: config.sweep.margin_warmup_steps,
        ..config.train.clone()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RunRecord {
    label: String,
    pooling: PoolingChoice,
    loss: LossConfig,
    train: TrainConfig,
    report: mqmha::metrics::EvalReport,
    initial_loss: Option<f64>,
    final_loss: Option<f64>,
}

fn run_dir_name(index: usize, label: &str) -> String {
    let slug: String = label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect();
    let mut compact = String::new();
    for c in slug.chars() {
        if !(c == '_' && compact.ends_with('_')) {
            compact.push(c);
        }
    }
    format!("{index:02}-{}", compact.trim_matches('_'))
}

/// Trains and evaluates every distinct grid point and returns the table.
/// Each run writes `run.json` into its own directory under `out/runs`.
pub fn run_sweep(
    spec: &SweepSpec,
    config: &ExperimentConfig,
    dataset: &Dataset,
    out: &Path,
    parallel: bool,
) -> CliResult<Report> {
    spec.validate(config)?;
    let train_cfg = sweep_train_config(config);
    let (unique, map) = spec.unique_runs();
    let run = |(slot, &i): (usize, &usize)| -> CliResult<ReportRow> {
        let point = &spec.points[i];
        let outcome = train(dataset, &config.encoder, &point.pooling, &point.loss, &train_cfg)?;
        let report = evaluate(&outcome.model, dataset, &dataset.trials)?;
        let dir: PathBuf = out.join("runs").join(run_dir_name(slot, &point.label));
        std::fs::create_dir_all(&dir)?;
        let record = RunRecord {
            label: point.label.clone(),
            pooling: point.pooling.clone(),
            loss: point.loss.clone(),
            train: train_cfg.clone(),
            initial_loss: outcome.trace.initial(),
            final_loss: outcome.trace.final_mean(1),
            report: report.clone(),
        };
        std::fs::write(dir.join("run.json"), serde_json::to_string_pretty(&record)? + "\n")?;
        Ok(ReportRow::from_eval(point.label.clone(), &report))
    };
    let rows: Vec<ReportRow> = if parallel {
        unique.par_iter().enumerate().map(run).collect::<CliResult<_>>()?
    } else {
        unique.iter().enumerate().map(run).collect::<CliResult<_>>()?
    };
    let by_point: Vec<ReportRow> = spec
        .points
        .iter()
        .zip(&map)
        .map(|(p, &u)| ReportRow {
            config: p.label.clone(),
            ..rows[u].clone()
        })
        .collect();
    let title = match spec.axis {
        Axis::Pooling => "Results of pooling configurations",
        Axis::Loss => "Results of margin and inter-topK settings",
    };
    Ok(Report::new(title, by_point))
}

/// Expected row labels per axis, for callers that check table structure.
pub fn row_labels(spec: &SweepSpec) -> Vec<&str> {
    spec.points.iter().map(|p| p.label.as_str()).collect()
}

/// Number of distinct runs a sweep performs.
pub fn distinct_runs(spec: &SweepSpec) -> usize {
    spec.unique_runs().0.len()
}
