//! Variant grids: which support vectors guide the query, and which support
//! losses train. Each row is trained and evaluated independently.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::Serialize;

use crate::episodes::Dataset;
use crate::error::{Error, Result};
use crate::inference::{evaluate, Fusion, MetricsReport, ModelPredictor, Protocol};
use crate::network::{Model, Variant, VectorKind};
use crate::training::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Grid {
    Vectors,
    Losses,
}

impl FromStr for Grid {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vectors" => Ok(Grid::Vectors),
            "losses" => Ok(Grid::Losses),
            _ => Err(Error::Config(format!(
                "unknown grid `{s}` (expected vectors or losses)"
            ))),
        }
    }
}

impl std::fmt::Display for Grid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Grid::Vectors => "vectors",
            Grid::Losses => "losses",
        })
    }
}

fn variant(vectors: &[VectorKind], s1: bool, s2: bool) -> Variant {
    Variant {
        query_vectors: vectors.to_vec(),
        support_initial_loss: s1,
        support_refined_loss: s2,
    }
}

/// Row labels and variants of a grid, in report order.
///
/// The vector grid trains every row with both support losses except the
/// `v_s` row, which never forms the primary/auxiliary pair and so keeps only
/// the initial support loss.
pub fn grid_variants(grid: Grid) -> Vec<(&'static str, Variant)> {
    use VectorKind::*;
    match grid {
        Grid::Vectors => vec![
            ("v_s", variant(&[Initial], true, false)),
            ("v_pri", variant(&[Primary], true, true)),
            ("v_aux", variant(&[Auxiliary], true, true)),
            ("v_pri+v_aux", variant(&[Primary, Auxiliary], true, true)),
            (
                "v_s+v_pri+v_aux",
                variant(&[Initial, Primary, Auxiliary], true, true),
            ),
        ],
        Grid::Losses => vec![
            ("L_s1", variant(&[Primary, Auxiliary], true, false)),
            ("L_s2", variant(&[Primary, Auxiliary], false, true)),
            ("L_s1+L_s2", variant(&[Primary, Auxiliary], true, true)),
        ],
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub label: String,
    pub variant: String,
    #[serde(rename = "mIoU")]
    pub miou: f64,
    #[serde(rename = "FB_IoU")]
    pub fb_iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationTable {
    pub grid: Grid,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }

    /// Aligned plain-text table with a header line.
    pub fn to_text(&self) -> String {
        let label_w = self
            .rows
            .iter()
            .map(|r| r.label.len())
            .max()
            .unwrap_or(0)
            .max("row".len());
        let mut out = format!("{:<label_w$}  {:>8}  {:>8}\n", "row", "mIoU", "FB-IoU");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<label_w$}  {:>8.4}  {:>8.4}",
                r.label, r.miou, r.fb_iou
            );
        }
        out
    }

    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// Labels of the rows sharing the highest mIoU.
    pub fn best_rows(&self) -> Vec<&str> {
        let best = self
            .rows
            .iter()
            .map(|r| r.miou)
            .fold(f64::NEG_INFINITY, f64::max);
        self.rows
            .iter()
            .filter(|r| r.miou == best)
            .map(|r| r.label.as_str())
            .collect()
    }
}

/// Trains each row of `grid` with `trainer` (given `base` with the row's
/// variant) and evaluates it under `protocol` with average fusion.
pub fn run_ablation(
    grid: Grid,
    dataset: &Dataset,
    base: &TrainConfig,
    protocol: &Protocol,
    mut trainer: impl FnMut(&TrainConfig) -> Result<Model>,
) -> Result<AblationTable> {
    let mut rows = Vec::new();
    for (label, variant) in grid_variants(grid) {
        let config = TrainConfig {
            variant: variant.clone(),
            ..base.clone()
        };
        let model = trainer(&config)?;
        let report = evaluate_model(&model, dataset, protocol)?;
        rows.push(AblationRow {
            label: label.to_string(),
            variant: variant.to_string(),
            miou: report.miou,
            fb_iou: report.fb_iou,
        });
    }
    Ok(AblationTable { grid, rows })
}

pub fn evaluate_model(
    model: &Model,
    dataset: &Dataset,
    protocol: &Protocol,
) -> Result<MetricsReport> {
    let predictor = ModelPredictor {
        segmenter: model,
        fusion: Fusion::Average,
    };
    evaluate(&predictor, dataset, protocol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episodes::{generate_synthetic_dataset, Side, SyntheticConfig};
    use crate::network::ArchConfig;
    use crate::training::train;

    #[test]
    fn grid_sizes_and_widths() {
        assert_eq!(grid_variants(Grid::Vectors).len(), 5);
        assert_eq!(grid_variants(Grid::Losses).len(), 3);
        let widths: Vec<usize> = grid_variants(Grid::Vectors)
            .iter()
            .map(|(_, v)| v.query_vectors.len())
            .collect();
        assert_eq!(widths, vec![1, 1, 1, 2, 3]);
        for (_, v) in grid_variants(Grid::Vectors)
            .into_iter()
            .chain(grid_variants(Grid::Losses))
        {
            v.validate().unwrap();
        }
        assert_eq!(grid_variants(Grid::Vectors)[3].1, Variant::sgm());
        assert_eq!(grid_variants(Grid::Losses)[2].1, Variant::sgm());
    }

    #[test]
    fn grid_parses() {
        assert_eq!("vectors".parse::<Grid>().unwrap(), Grid::Vectors);
        assert_eq!("losses".parse::<Grid>().unwrap(), Grid::Losses);
        assert!("both".parse::<Grid>().is_err());
    }

    #[test]
    fn tiny_grid_runs_and_formats() {
        let ds = generate_synthetic_dataset(&SyntheticConfig::new(4, 8, 32, 3)).unwrap();
        let base = TrainConfig {
            epochs: 1,
            episodes_per_epoch: 2,
            arch: ArchConfig {
                stem_channels: 4,
                feature_dim: 6,
                head_kernel: 3,
            },
            ..TrainConfig::default()
        };
        let protocol = Protocol {
            side: Side::Test,
            shots: 1,
            queries: 1,
            episodes: 3,
            seeds: vec![0],
            jobs: 1,
        };
        let mut seen = Vec::new();
        let table = run_ablation(Grid::Losses, &ds, &base, &protocol, |c| {
            seen.push(c.variant.clone());
            Ok(train(&ds, c)?.0)
        })
        .unwrap();
        assert_eq!(seen.len(), 3);
        assert_eq!(table.rows.len(), 3);
        let text = table.to_text();
        assert_eq!(text.lines().count(), 4);
        assert!(text.lines().nth(3).unwrap().starts_with("L_s1+L_s2"));
        let json: serde_json::Value = serde_json::from_str(&table.to_json()).unwrap();
        assert_eq!(json["grid"], "losses");
        assert_eq!(json["rows"][1]["label"], "L_s2");
        assert!(!table.best_rows().is_empty());
    }
}
