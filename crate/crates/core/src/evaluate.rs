//! Per-class IoU/Dice (background excluded) and report tables.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datasets::{Dataset, LabelMask};
use crate::error::{Error, Result};
use crate::model::Segmenter;

pub const DISC: u8 = 1;
pub const CUP: u8 = 2;

fn overlap(pred: &LabelMask, gt: &LabelMask, class: u8) -> (usize, usize, usize) {
    assert_eq!(pred.shape(), gt.shape(), "metric inputs must share a shape");
    let mut inter = 0;
    let mut np = 0;
    let mut ng = 0;
    for (&p, &g) in pred.values().iter().zip(gt.values()) {
        let (p, g) = (p == class, g == class);
        inter += (p && g) as usize;
        np += p as usize;
        ng += g as usize;
    }
    (inter, np, ng)
}

/// `|pred ∩ gt| / |pred ∪ gt|` for one class; 1.0 when both are empty.
pub fn iou(pred: &LabelMask, gt: &LabelMask, class: u8) -> f64 {
    let (inter, np, ng) = overlap(pred, gt, class);
    let union = np + ng - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// `2|pred ∩ gt| / (|pred| + |gt|)` for one class; 1.0 when both are empty.
pub fn dice(pred: &LabelMask, gt: &LabelMask, class: u8) -> f64 {
    let (inter, np, ng) = overlap(pred, gt, class);
    if np + ng == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (np + ng) as f64
    }
}

/// Metrics of one sample, in percent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub iou_disc: f64,
    pub iou_cup: f64,
    pub dice_disc: f64,
    pub dice_cup: f64,
}

impl SampleMetrics {
    pub fn compute(id: &str, pred: &LabelMask, gt: &LabelMask) -> Self {
        Self {
            id: id.to_string(),
            iou_disc: 100.0 * iou(pred, gt, DISC),
            iou_cup: 100.0 * iou(pred, gt, CUP),
            dice_disc: 100.0 * dice(pred, gt, DISC),
            dice_cup: 100.0 * dice(pred, gt, CUP),
        }
    }
}

/// Macro-averaged metrics over a test set, in percent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub target: String,
    pub iou_disc: f64,
    pub iou_cup: f64,
    pub dice_disc: f64,
    pub dice_cup: f64,
    pub per_sample: Vec<SampleMetrics>,
}

impl MetricsReport {
    pub fn from_samples(method: &str, target: &str, per_sample: Vec<SampleMetrics>) -> Self {
        let n = per_sample.len().max(1) as f64;
        let mean = |f: fn(&SampleMetrics) -> f64| per_sample.iter().map(f).sum::<f64>() / n;
        Self {
            method: method.to_string(),
            target: target.to_string(),
            iou_disc: mean(|s| s.iou_disc),
            iou_cup: mean(|s| s.iou_cup),
            dice_disc: mean(|s| s.dice_disc),
            dice_cup: mean(|s| s.dice_cup),
            per_sample,
        }
    }

    /// `(dice_disc + dice_cup) / 2`, in percent.
    pub fn mean_dice(&self) -> f64 {
        (self.dice_disc + self.dice_cup) / 2.0
    }

    pub fn row(&self) -> ReportRow {
        ReportRow {
            method: self.method.clone(),
            target: self.target.clone(),
            iou_disc: self.iou_disc,
            iou_cup: self.iou_cup,
            dice_disc: self.dice_disc,
            dice_cup: self.dice_cup,
        }
    }
}

pub fn evaluate_model<S: Segmenter + ?Sized>(
    model: &S,
    dataset: &Dataset,
    method: &str,
    target: &str,
) -> Result<MetricsReport> {
    let per_sample = dataset
        .iter()
        .map(|s| Ok(SampleMetrics::compute(&s.id, &model.segment(&s.image)?, &s.label)))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport::from_samples(method, target, per_sample))
}

/// One table row: `method, target, iou_disc, iou_cup, dice_disc, dice_cup`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub target: String,
    pub iou_disc: f64,
    pub iou_cup: f64,
    pub dice_disc: f64,
    pub dice_cup: f64,
}

const COLUMNS: [&str; 6] = ["method", "target", "iou_disc", "iou_cup", "dice_disc", "dice_cup"];

/// Writes `path` as CSV and a Markdown rendering next to it (`.md`).
pub fn emit_report(rows: &[ReportRow], path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io_at(parent, e))?;
    }
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    w.write_record(COLUMNS)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io_at(path, e))?;

    let mut md = String::from("| Method | Target | IoU disc (%) | IoU cup (%) | Dice disc (%) | Dice cup (%) |\n");
    md.push_str("|---|---|---:|---:|---:|---:|\n");
    for r in rows {
        md.push_str(&format!(
            "| {} | {} | {:.2} | {:.2} | {:.2} | {:.2} |\n",
            r.method, r.target, r.iou_disc, r.iou_cup, r.dice_disc, r.dice_cup
        ));
    }
    let md_path = path.with_extension("md");
    fs::write(&md_path, md).map_err(|e| Error::io_at(&md_path, e))
}

pub fn read_report(path: &Path) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != COLUMNS {
        return Err(Error::Config(format!(
            "{}: unexpected report columns {header:?}",
            path.display()
        )));
    }
    Ok(r.deserialize().collect::<Result<Vec<ReportRow>, _>>()?)
}
