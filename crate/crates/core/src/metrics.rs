//! Tracking quality metrics (success AUC, precision) and the CSV results
//! format shared by the track, eval, and ablate commands.

use std::path::Path;

use crate::error::{Error, Result};
use crate::head::BBox;

/// Intersection over union of two center-size boxes; 0 when either is
/// degenerate or they are disjoint.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    if !a.is_valid() || !b.is_valid() {
        return 0.0;
    }
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub fn center_error(a: &BBox, b: &BBox) -> f64 {
    ((a.cx - b.cx).powi(2) + (a.cy - b.cy).powi(2)).sqrt()
}

pub const AUC_THRESHOLD_STEP: f64 = 0.05;

/// OTB-style success AUC: mean success rate over IoU thresholds
/// {0, 0.05, ..., 1.0}, where a frame succeeds when IoU >= threshold.
pub fn success_auc(ious: &[f64]) -> Result<f64> {
    if ious.is_empty() {
        return Err(Error::Data("no frames to evaluate".into()));
    }
    let steps = 21;
    let mut acc = 0.0;
    for i in 0..steps {
        let tau = i as f64 * AUC_THRESHOLD_STEP;
        let hits = ious.iter().filter(|&&v| v >= tau).count();
        acc += hits as f64 / ious.len() as f64;
    }
    Ok(acc / steps as f64)
}

/// Fraction of frames whose center error is at most `px`.
pub fn precision(errors: &[f64], px: f64) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::Data("no frames to evaluate".into()));
    }
    Ok(errors.iter().filter(|&&e| e <= px).count() as f64 / errors.len() as f64)
}

// ── results format ──────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub frame: usize,
    pub pred: BBox,
    pub gt: BBox,
}

pub const RESULTS_HEADER: &str = "frame,pred_x,pred_y,pred_w,pred_h,gt_x,gt_y,gt_w,gt_h";

pub fn write_results(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut out = String::from(RESULTS_HEADER);
    out.push('\n');
    for r in rows {
        let (px, py, pw, ph) = r.pred.to_xywh();
        let (gx, gy, gw, gh) = r.gt.to_xywh();
        out.push_str(&format!(
            "{},{px},{py},{pw},{ph},{gx},{gy},{gw},{gh}\n",
            r.frame
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == RESULTS_HEADER => {}
        _ => return Err(Error::Data("missing results header".into())),
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 9 {
            return Err(Error::Data(format!(
                "results line {} has {} fields",
                i + 2,
                parts.len()
            )));
        }
        let mut v = [0.0f64; 9];
        for (slot, p) in v.iter_mut().zip(&parts) {
            *slot = p
                .trim()
                .parse()
                .map_err(|_| Error::Data(format!("bad number '{p}' at results line {}", i + 2)))?;
        }
        rows.push(ResultRow {
            frame: v[0] as usize,
            pred: BBox::from_xywh(v[1], v[2], v[3], v[4]),
            gt: BBox::from_xywh(v[5], v[6], v[7], v[8]),
        });
    }
    if rows.is_empty() {
        return Err(Error::Data("results file has no rows".into()));
    }
    Ok(rows)
}

/// Per-sequence summary metrics in a fixed order.
pub fn summarize(rows: &[ResultRow]) -> Result<Vec<(String, f64)>> {
    let ious: Vec<f64> = rows.iter().map(|r| iou(&r.pred, &r.gt)).collect();
    let errs: Vec<f64> = rows.iter().map(|r| center_error(&r.pred, &r.gt)).collect();
    Ok(vec![
        ("success_auc".into(), success_auc(&ious)?),
        (
            "mean_iou".into(),
            ious.iter().sum::<f64>() / ious.len() as f64,
        ),
        ("precision_5px".into(), precision(&errs, 5.0)?),
        ("precision_10px".into(), precision(&errs, 10.0)?),
        ("precision_20px".into(), precision(&errs, 20.0)?),
    ])
}

pub fn write_metrics(path: &Path, metrics: &[(String, f64)]) -> Result<()> {
    let mut out = String::from("metric,value\n");
    for (k, v) in metrics {
        out.push_str(&format!("{k},{v}\n"));
    }
    std::fs::write(path, out)?;
    Ok(())
}
