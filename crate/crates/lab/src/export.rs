//! CSV tables and grayscale heatmaps.

use std::path::Path;

use abft_core::analysis::{ConnectivityGrid, Heatmap, LayerAttentionProfile, ShiftMap};
use abft_core::train::{PretrainReport, RunLog};
use serde::Serialize;

use crate::Result;

/// Writes `rows` as CSV with a header taken from the row type.
pub fn write_rows<S: Serialize>(path: &Path, rows: &[S]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| crate::LabError::io(path, e))?;
    Ok(())
}

#[derive(Serialize)]
struct RunLogRow {
    step: usize,
    mean_loss: f64,
    mean_induction_count: f64,
    #[serde(rename = "A")]
    a: Option<f64>,
    #[serde(rename = "B")]
    b: Option<f64>,
    wall_ms: f64,
}

pub fn write_runlog(path: &Path, log: &RunLog) -> Result<()> {
    let rows: Vec<RunLogRow> = log
        .records
        .iter()
        .map(|r| RunLogRow {
            step: r.step,
            mean_loss: r.mean_loss,
            mean_induction_count: r.mean_induction_count,
            a: r.a,
            b: r.b,
            wall_ms: r.wall_ms,
        })
        .collect();
    write_rows(path, &rows)
}

#[derive(Serialize)]
struct CurveRow {
    step: usize,
    train_loss: f64,
    heldout_loss: Option<f64>,
}

pub fn write_pretrain_curve(path: &Path, report: &PretrainReport) -> Result<()> {
    let rows: Vec<CurveRow> = report
        .curve
        .iter()
        .map(|p| CurveRow {
            step: p.step,
            train_loss: p.train_loss,
            heldout_loss: p.heldout_loss,
        })
        .collect();
    write_rows(path, &rows)
}

#[derive(Serialize)]
struct ProfileRow<'a> {
    checkpoint: &'a str,
    layer: usize,
    s: f64,
    s_plus: f64,
}

pub fn write_profiles(path: &Path, profiles: &[(String, LayerAttentionProfile)]) -> Result<()> {
    let mut rows = Vec::new();
    for (name, p) in profiles {
        for (layer, (&s, &s_plus)) in p.s.iter().zip(&p.s_plus).enumerate() {
            rows.push(ProfileRow {
                checkpoint: name,
                layer,
                s,
                s_plus,
            });
        }
    }
    write_rows(path, &rows)
}

#[derive(Serialize)]
struct GridRow {
    #[serde(rename = "alpha_E")]
    alpha_e: f64,
    #[serde(rename = "alpha_A")]
    alpha_a: f64,
    accuracy: f64,
}

pub fn write_grid(path: &Path, grid: &ConnectivityGrid) -> Result<()> {
    let rows: Vec<GridRow> = grid
        .points
        .iter()
        .map(|p| GridRow {
            alpha_e: p.alpha_e,
            alpha_a: p.alpha_a,
            accuracy: p.accuracy,
        })
        .collect();
    write_rows(path, &rows)
}

#[derive(Serialize)]
struct ShiftRow<'a> {
    before: &'a str,
    after: &'a str,
    tensor: &'a str,
    kind: &'static str,
    layer: Option<usize>,
    distance: f64,
}

pub fn write_shift(path: &Path, maps: &[(String, String, ShiftMap)]) -> Result<()> {
    let mut rows = Vec::new();
    for (before, after, map) in maps {
        for e in &map.entries {
            rows.push(ShiftRow {
                before,
                after,
                tensor: &e.name,
                kind: e.kind.name(),
                layer: e.layer,
                distance: e.distance,
            });
        }
    }
    write_rows(path, &rows)
}

/// 8-bit grayscale image, one row per head, one column per token; each row
/// is scaled by its own maximum.
pub fn write_heatmap(path: &Path, map: &Heatmap) -> Result<()> {
    let mut pixels = Vec::with_capacity(map.rows * map.cols);
    for row in map.values.chunks(map.cols) {
        let max = row.iter().cloned().fold(0.0f64, f64::max);
        pixels.extend(row.iter().map(|&v| if max > 0.0 { (255.0 * v / max).round() as u8 } else { 0 }));
    }
    let img = image::GrayImage::from_raw(map.cols as u32, map.rows as u32, pixels).expect("buffer matches dimensions");
    img.save_with_format(path, image::ImageFormat::Pnm)?;
    Ok(())
}
