//! Mask-interior accuracy metrics and multi-run experiment reports.
//!
//! Every metric compares a predicted fragment with the true fragment of the
//! same mask. `no_sky` and `structures` return `None` when the truth has no
//! cell in their class; such instances are skipped when aggregating.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusSplit, TileAlphabet};
use crate::dataset::{decode, DatasetError, Fragment, MaskRect, Sample};
use crate::models::{InpaintItem, Inpainter, ModelError};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("prediction covers {pred:?} but truth covers {truth:?}")]
    ShapeMismatch { pred: MaskRect, truth: MaskRect },
    #[error("fragment for {mask:?} holds {found} cells")]
    MalformedFragment { mask: MaskRect, found: usize },
    #[error("model {model} returned {found} fragments for {expected} instances")]
    MissingPredictions { model: String, expected: usize, found: usize },
    #[error("experiment needs at least one run and one model")]
    EmptyExperiment,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Metric {
    TileByTile,
    NoSky,
    Structures,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::TileByTile, Metric::NoSky, Metric::Structures];

    pub fn tag(&self) -> &'static str {
        match self {
            Metric::TileByTile => "TbyT",
            Metric::NoSky => "NoSky",
            Metric::Structures => "Struct",
        }
    }
}

/// Cells counted by the structures metric: any symbol in `symbols`, plus
/// `ground` cells at rows up to `max_ground_row` (raised ground forms stairs).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructureSet {
    pub symbols: BTreeSet<char>,
    pub ground: Option<char>,
    pub max_ground_row: usize,
}

impl StructureSet {
    /// Pipe tiles plus ground above the bottom two rows of a 16-row window.
    pub fn for_alphabet(alphabet: &TileAlphabet) -> Self {
        Self {
            symbols: alphabet.structure_symbols(),
            ground: alphabet.ground_symbol(),
            max_ground_row: 13,
        }
    }

    pub fn contains(&self, symbol: char, row: usize) -> bool {
        self.symbols.contains(&symbol) || (Some(symbol) == self.ground && row <= self.max_ground_row)
    }
}

fn check(pred: &Fragment, truth: &Fragment) -> Result<(), EvalError> {
    if pred.mask != truth.mask {
        return Err(EvalError::ShapeMismatch {
            pred: pred.mask,
            truth: truth.mask,
        });
    }
    for f in [pred, truth] {
        if f.cells.len() != f.mask.area() {
            return Err(EvalError::MalformedFragment {
                mask: f.mask,
                found: f.cells.len(),
            });
        }
    }
    Ok(())
}

fn accuracy(pred: &Fragment, truth: &Fragment, keep: impl Fn(usize, char) -> bool) -> Option<f64> {
    let mut total = 0usize;
    let mut hits = 0usize;
    for ((r, _, t), &p) in truth.iter().zip(&pred.cells) {
        if keep(r, t) {
            total += 1;
            hits += usize::from(p == t);
        }
    }
    (total > 0).then(|| 100.0 * hits as f64 / total as f64)
}

/// Percentage of mask cells predicted exactly.
pub fn tile_by_tile(pred: &Fragment, truth: &Fragment) -> Result<f64, EvalError> {
    check(pred, truth)?;
    Ok(accuracy(pred, truth, |_, _| true).unwrap_or(100.0))
}

/// Accuracy over cells whose true tile is not sky.
pub fn no_sky(pred: &Fragment, truth: &Fragment, sky: char) -> Result<Option<f64>, EvalError> {
    check(pred, truth)?;
    Ok(accuracy(pred, truth, |_, t| t != sky))
}

/// Accuracy over cells whose true tile is a structure tile.
pub fn structures(pred: &Fragment, truth: &Fragment, set: &StructureSet) -> Result<Option<f64>, EvalError> {
    check(pred, truth)?;
    Ok(accuracy(pred, truth, |r, t| set.contains(t, r)))
}

/// Scores of one prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub tile_by_tile: f64,
    pub no_sky: Option<f64>,
    pub structures: Option<f64>,
}

impl Scores {
    pub fn get(&self, metric: Metric) -> Option<f64> {
        match metric {
            Metric::TileByTile => Some(self.tile_by_tile),
            Metric::NoSky => self.no_sky,
            Metric::Structures => self.structures,
        }
    }
}

pub fn score(pred: &Fragment, truth: &Fragment, sky: char, set: &StructureSet) -> Result<Scores, EvalError> {
    Ok(Scores {
        tile_by_tile: tile_by_tile(pred, truth)?,
        no_sky: no_sky(pred, truth, sky)?,
        structures: structures(pred, truth, set)?,
    })
}

/// One scored prediction, kept so every aggregate can be recomputed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub run: usize,
    pub model: String,
    pub level_id: String,
    pub window_col: usize,
    pub mask_col: usize,
    pub scores: Scores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub runs: usize,
    pub seed: u64,
    pub structures: StructureSet,
}

/// Mean and sample standard deviation over runs; `None` when no run had a
/// defined value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: Option<f64>,
    pub std: Option<f64>,
    /// Runs contributing a value.
    pub runs: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                mean: None,
                std: None,
                runs: 0,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Self {
            mean: Some(mean),
            std: Some(std),
            runs: n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelColumn {
    pub id: String,
    pub label: String,
    /// Masked samples evaluated per run.
    pub instances: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub metric: Metric,
    /// One summary per level column, in column order.
    pub levels: Vec<Summary>,
    /// Per run: mean of that run's defined level means; summarized over runs.
    pub average: Summary,
}

impl ReportRow {
    pub fn label(&self) -> String {
        format!("{}-{}", self.model, self.metric.tag())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config: ExperimentConfig,
    pub levels: Vec<LevelColumn>,
    pub rows: Vec<ReportRow>,
}

impl MetricsReport {
    pub fn row(&self, model: &str, metric: Metric) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.model == model && r.metric == metric)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_csv(&self) -> Result<String, EvalError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["model", "metric", "level", "mean", "std", "runs", "instances"])?;
        let fmt = |v: Option<f64>| v.map(|v| format!("{v:.4}")).unwrap_or_default();
        for row in &self.rows {
            for (col, s) in self.levels.iter().zip(&row.levels) {
                w.write_record([
                    row.model.as_str(),
                    row.metric.tag(),
                    col.id.as_str(),
                    &fmt(s.mean),
                    &fmt(s.std),
                    &s.runs.to_string(),
                    &col.instances.to_string(),
                ])?;
            }
            let total: usize = self.levels.iter().map(|c| c.instances).sum();
            w.write_record([
                row.model.as_str(),
                row.metric.tag(),
                "Avg",
                &fmt(row.average.mean),
                &fmt(row.average.std),
                &row.average.runs.to_string(),
                &total.to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| EvalError::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Fixed-width table: one row per model and metric, one column per level plus the average.
    pub fn to_table(&self) -> String {
        let cell = |s: &Summary| match (s.mean, s.std) {
            (Some(m), Some(d)) => format!("{m:.2} ± {d:.2}"),
            _ => "-".to_owned(),
        };
        let mut header = vec![String::new()];
        header.extend(self.levels.iter().map(|l| l.label.clone()));
        header.push("Avg".into());
        let mut lines = vec![header];
        for row in &self.rows {
            let mut line = vec![row.label()];
            line.extend(row.levels.iter().map(cell));
            line.push(cell(&row.average));
            lines.push(line);
        }
        let widths: Vec<usize> = (0..lines[0].len())
            .map(|i| lines.iter().map(|l| l[i].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for line in lines {
            let padded: Vec<String> = line
                .iter()
                .zip(&widths)
                .map(|(s, &w)| format!("{s}{}", " ".repeat(w - s.chars().count())))
                .collect();
            let _ = writeln!(out, "{}", padded.join("  ").trim_end());
        }
        out
    }

    /// Writes `report.json`, `report.csv` and `report.txt` under `dir`.
    pub fn write_all(&self, dir: &Path) -> Result<(), EvalError> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), self.to_json())?;
        std::fs::write(dir.join("report.csv"), self.to_csv()?)?;
        std::fs::write(dir.join("report.txt"), self.to_table())?;
        Ok(())
    }
}

/// Builds the report from instance logs: per run, the mean over defined
/// instances of each (model, metric, level); then mean and std over runs.
pub fn aggregate(
    instances: &[InstanceRecord],
    models: &[String],
    levels: &[LevelColumn],
    config: &ExperimentConfig,
) -> MetricsReport {
    // (model, metric, level, run) -> (sum, count)
    let mut acc: BTreeMap<(&str, Metric, &str, usize), (f64, usize)> = BTreeMap::new();
    for rec in instances {
        for m in Metric::ALL {
            if let Some(v) = rec.scores.get(m) {
                let e = acc.entry((&rec.model, m, &rec.level_id, rec.run)).or_default();
                e.0 += v;
                e.1 += 1;
            }
        }
    }
    let mut rows = Vec::new();
    for model in models {
        for metric in Metric::ALL {
            let run_mean = |level: &str, run: usize| {
                acc.get(&(model.as_str(), metric, level, run))
                    .map(|&(s, n)| s / n as f64)
            };
            let level_summaries = levels
                .iter()
                .map(|l| {
                    let vals: Vec<f64> = (0..config.runs).filter_map(|r| run_mean(&l.id, r)).collect();
                    Summary::of(&vals)
                })
                .collect();
            let run_avgs: Vec<f64> = (0..config.runs)
                .filter_map(|r| {
                    let defined: Vec<f64> = levels.iter().filter_map(|l| run_mean(&l.id, r)).collect();
                    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
                })
                .collect();
            rows.push(ReportRow {
                model: model.clone(),
                metric,
                levels: level_summaries,
                average: Summary::of(&run_avgs),
            });
        }
    }
    MetricsReport {
        config: config.clone(),
        levels: levels.to_vec(),
        rows,
    }
}

/// A model under evaluation. `build` is called once per run and should
/// return a freshly trained (or freshly seeded) inpainter for that run.
pub struct Contender<'a, T> {
    pub id: String,
    #[allow(clippy::type_complexity)]
    pub build: Box<dyn Fn(usize) -> Result<Box<dyn Inpainter<T> + 'a>, ModelError> + 'a>,
}

/// Per-instance seed for stochastic inpainters.
pub fn instance_seed(base: u64, run: usize, index: usize) -> u64 {
    base ^ (run as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (index as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutput {
    pub report: MetricsReport,
    pub instances: Vec<InstanceRecord>,
}

/// Evaluates every contender on `test` for `config.runs` runs. Level columns
/// follow the order of `split.test`.
pub fn run_experiment<T: Scalar>(
    contenders: &[Contender<'_, T>],
    test: &[Sample<T>],
    split: &CorpusSplit,
    alphabet: &TileAlphabet,
    config: &ExperimentConfig,
) -> Result<ExperimentOutput, EvalError> {
    if contenders.is_empty() || config.runs == 0 {
        return Err(EvalError::EmptyExperiment);
    }
    let truths: Vec<Fragment> = test
        .iter()
        .map(|s| Ok(Fragment::from_grid(&decode(&s.target, alphabet)?, &s.mask)))
        .collect::<Result<_, DatasetError>>()?;
    let levels: Vec<LevelColumn> = split
        .test
        .iter()
        .map(|l| LevelColumn {
            id: l.id.clone(),
            label: l.label(),
            instances: test.iter().filter(|s| s.provenance.level_id == l.id).count(),
        })
        .collect();
    let sky = alphabet.sky_symbol();
    let mut instances = Vec::with_capacity(contenders.len() * config.runs * test.len());
    for run in 0..config.runs {
        for c in contenders {
            log::info!("run {}/{}: {}", run + 1, config.runs, c.id);
            let model = (c.build)(run)?;
            let items: Vec<InpaintItem<'_, T>> = test
                .iter()
                .enumerate()
                .map(|(i, s)| InpaintItem {
                    input: &s.input,
                    mask: s.mask,
                    seed: instance_seed(config.seed, run, i),
                })
                .collect();
            let preds = model.inpaint_items(&items)?;
            if preds.len() != test.len() {
                return Err(EvalError::MissingPredictions {
                    model: c.id.clone(),
                    expected: test.len(),
                    found: preds.len(),
                });
            }
            for ((s, pred), truth) in test.iter().zip(&preds).zip(&truths) {
                instances.push(InstanceRecord {
                    run,
                    model: c.id.clone(),
                    level_id: s.provenance.level_id.clone(),
                    window_col: s.provenance.window_col,
                    mask_col: s.provenance.mask_col,
                    scores: score(pred, truth, sky, &config.structures)?,
                });
            }
        }
    }
    let models: Vec<String> = contenders.iter().map(|c| c.id.clone()).collect();
    let report = aggregate(&instances, &models, &levels, config);
    Ok(ExperimentOutput { report, instances })
}
