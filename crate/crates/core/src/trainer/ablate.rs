//! Grids of training runs over configuration overrides.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::{train, TrainConfig, TrainReport};
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::evaluation::RetrievalResult;
use crate::objectives::{LossBreakdown, Variant};

/// One swept key. Dotted keys reach nested fields, e.g. `model.embed_dim`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axis {
    pub key: String,
    pub values: Vec<Value>,
}

/// An explicitly listed cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridCell {
    #[serde(default)]
    pub label: Option<String>,
    pub overrides: Map<String, Value>,
}

/// Base configuration plus the cells to run: listed `cells` first, then the
/// cartesian product of `axes`. Each cell runs once per entry of `seeds`, or
/// once with the base seed when `seeds` is empty.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationGrid {
    pub base: Map<String, Value>,
    pub cells: Vec<GridCell>,
    pub axes: Vec<Axis>,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RowStatus {
    Ok,
    Error,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalSummary {
    pub recall_at: BTreeMap<usize, f64>,
    pub median_rank: f64,
}

impl From<&RetrievalResult> for RetrievalSummary {
    fn from(r: &RetrievalResult) -> Self {
        Self { recall_at: r.recall_at.clone(), median_rank: r.median_rank }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowMetrics {
    pub config_hash: String,
    pub final_loss: LossBreakdown,
    pub text_to_video: Option<RetrievalSummary>,
    pub video_to_text: Option<RetrievalSummary>,
}

impl RowMetrics {
    /// Held-out text-to-video recall at `k`.
    pub fn t2v_recall(&self, k: usize) -> Option<f64> {
        self.text_to_video.as_ref()?.recall_at.get(&k).copied()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub seed: u64,
    pub overrides: Map<String, Value>,
    pub status: RowStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<RowMetrics>,
    /// Full report; kept in memory only.
    #[serde(skip)]
    pub report: Option<TrainReport>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// Rows with the given label, in seed order.
    pub fn rows_for<'a>(&'a self, label: &'a str) -> impl Iterator<Item = &'a AblationRow> + 'a {
        self.rows.iter().filter(move |r| r.label == label)
    }
}

impl AblationGrid {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// The cells in run order as (label, overrides).
    pub fn expand(&self) -> Vec<(String, Map<String, Value>)> {
        let mut out: Vec<(String, Map<String, Value>)> = self
            .cells
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let label = c.label.clone().unwrap_or_else(|| {
                    let parts: Vec<String> = c.overrides.iter().map(|(k, v)| value_label(k, v)).collect();
                    if parts.is_empty() {
                        format!("cell {i}")
                    } else {
                        parts.join(" / ")
                    }
                });
                (label, c.overrides.clone())
            })
            .collect();
        if !self.axes.is_empty() && self.axes.iter().all(|a| !a.values.is_empty()) {
            let mut combos: Vec<Vec<(&str, &Value)>> = vec![vec![]];
            for axis in &self.axes {
                combos = combos
                    .into_iter()
                    .flat_map(|prefix| {
                        axis.values.iter().map(move |v| {
                            let mut next = prefix.clone();
                            next.push((axis.key.as_str(), v));
                            next
                        })
                    })
                    .collect();
            }
            for combo in combos {
                let label = combo.iter().map(|(k, v)| value_label(k, v)).collect::<Vec<_>>().join(" / ");
                let overrides = combo.into_iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
                out.push((label, overrides));
            }
        }
        out
    }

    fn cell_config(&self, overrides: &Map<String, Value>, seed: Option<u64>) -> Result<TrainConfig> {
        let mut cfg = Value::Object(self.base.clone());
        for (k, v) in overrides {
            set_path(&mut cfg, k, v.clone())?;
        }
        if let Some(s) = seed {
            set_path(&mut cfg, "seed", Value::from(s))?;
        }
        let cfg: TrainConfig = serde_json::from_value(cfg).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Display label for one override; variant names use their table labels.
fn value_label(key: &str, v: &Value) -> String {
    if key == "variant" {
        if let Ok(var) = serde_json::from_value::<Variant>(v.clone()) {
            return var.label().to_string();
        }
    }
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn set_path(root: &mut Value, key: &str, v: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override {key}: {part} is not inside an object")))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), v);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    Ok(())
}

fn run_cell(
    grid: &AblationGrid,
    corpus: &Corpus,
    label: String,
    overrides: Map<String, Value>,
    seed: Option<u64>,
) -> AblationRow {
    let result = grid.cell_config(&overrides, seed).and_then(|cfg| train(&cfg, corpus).map(|out| (cfg, out.report)));
    let seed_used = |cfg: Option<&TrainConfig>| cfg.map(|c| c.seed).or(seed).unwrap_or(0);
    match result {
        Ok((cfg, report)) => {
            let held = report.heldout.as_ref();
            AblationRow {
                label,
                seed: seed_used(Some(&cfg)),
                overrides,
                status: RowStatus::Ok,
                error: None,
                metrics: Some(RowMetrics {
                    config_hash: report.config_hash.clone(),
                    final_loss: report.final_loss().copied().unwrap_or_default(),
                    text_to_video: held.map(|m| (&m.text_to_video).into()),
                    video_to_text: held.map(|m| (&m.video_to_text).into()),
                }),
                report: Some(report),
            }
        }
        Err(e) => AblationRow {
            label,
            seed: seed_used(None),
            overrides,
            status: RowStatus::Error,
            error: Some(e.to_string()),
            metrics: None,
            report: None,
        },
    }
}

/// Runs every cell of the grid, up to `parallel` at a time. Cell failures are
/// recorded in their row and do not stop the grid.
pub fn ablate(grid: &AblationGrid, corpus: &Corpus, parallel: usize) -> AblationTable {
    let seeds: Vec<Option<u64>> =
        if grid.seeds.is_empty() { vec![None] } else { grid.seeds.iter().copied().map(Some).collect() };
    let jobs: Vec<(String, Map<String, Value>, Option<u64>)> = grid
        .expand()
        .into_iter()
        .flat_map(|(label, ov)| seeds.iter().map(move |&s| (label.clone(), ov.clone(), s)))
        .collect();
    let slots: Mutex<Vec<Option<AblationRow>>> = Mutex::new(vec![None; jobs.len()]);
    let next = AtomicUsize::new(0);
    let workers = parallel.clamp(1, jobs.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some((label, ov, seed)) = jobs.get(i).cloned() else {
                    break;
                };
                let row = run_cell(grid, corpus, label, ov, seed);
                slots.lock().expect("no worker panics while holding the lock")[i] = Some(row);
            });
        }
    });
    AblationTable { rows: slots.into_inner().unwrap().into_iter().map(|r| r.expect("every job ran")).collect() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn grid(v: Value) -> AblationGrid {
        serde_json::from_value(v).unwrap()
    }

    #[test]
    fn variant_axis_uses_table_labels() {
        let g = grid(json!({"axes": [{"key": "variant", "values": ["none", "identity", "full", "hybrid", "cross"]}]}));
        let labels: Vec<String> = g.expand().into_iter().map(|(l, _)| l).collect();
        assert_eq!(labels, vec!["None", "Identity", "Full", "Hybrid", "Cross"]);
    }

    #[test]
    fn batch_axis_and_product() {
        let g = grid(json!({"axes": [{"key": "batch_size", "values": [8, 16, 32, 64]}]}));
        let labels: Vec<String> = g.expand().into_iter().map(|(l, _)| l).collect();
        assert_eq!(labels, vec!["8", "16", "32", "64"]);
        let g = grid(json!({"axes": [
            {"key": "variant", "values": ["none", "cross"]},
            {"key": "model.embed_dim", "values": [8, 16]}
        ]}));
        let cells = g.expand();
        assert_eq!(cells.len(), 4);
        assert_eq!(cells[1].0, "None / 16");
        let cfg = g.cell_config(&cells[1].1, Some(3)).unwrap();
        assert_eq!(cfg.model.embed_dim, 16);
        assert_eq!(cfg.seed, 3);
    }

    #[test]
    fn empty_grid_runs_nothing() {
        let corpus = Corpus::empty(crate::corpus::CorpusHeader {
            version: 1,
            feature_dim: 2,
            video_len: 2,
            caption_len_max: 3,
            vocab_size: 5,
            num_classes: 0,
        });
        assert!(ablate(&AblationGrid::default(), &corpus, 2).rows.is_empty());
    }

    #[test]
    fn bad_cells_are_recorded_and_the_grid_continues() {
        let corpus = Corpus::empty(crate::corpus::CorpusHeader {
            version: 1,
            feature_dim: 2,
            video_len: 2,
            caption_len_max: 3,
            vocab_size: 5,
            num_classes: 0,
        });
        let g = grid(json!({"cells": [
            {"label": "typo", "overrides": {"batchsize": 4}},
            {"overrides": {"batch_size": 4}}
        ]}));
        let t = ablate(&g, &corpus, 1);
        assert_eq!(t.rows.len(), 2);
        assert!(t.rows.iter().all(|r| r.status == RowStatus::Error));
        assert!(t.rows[0].error.as_ref().unwrap().contains("batchsize"));
        assert!(t.rows[1].error.as_ref().unwrap().contains("empty corpus"));
        assert_eq!(t.rows[1].label, "4");
    }
}
