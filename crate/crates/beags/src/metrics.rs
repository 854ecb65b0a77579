//! Segmentation and rendering metrics: Acc / IoU / BIoU under the extracted
//! and rendered protocols, PSNR, and the unseen-mass diagnostic.

use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::image2::{BoolImage, ColorImage, Image2};
use crate::occupancy::{occupancy_loss, ClassVoxelGrid, OccupancyGradient};
use crate::raster::{render, render_class_subset, RenderOptions};
use crate::surfel::GaussianSurfel;

/// IoU (1 when both masks are empty) and pixel accuracy.
pub fn binary_iou_acc(pred: &BoolImage, gt: &BoolImage) -> Result<(f64, f64)> {
    if !pred.same_size(gt) {
        return Err(Error::config("mask sizes differ"));
    }
    let mut inter = 0u64;
    let mut union = 0u64;
    let mut agree = 0u64;
    for (p, g) in pred.data().iter().zip(gt.data()) {
        inter += (*p && *g) as u64;
        union += (*p || *g) as u64;
        agree += (p == g) as u64;
    }
    let iou = if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    };
    Ok((iou, agree as f64 / pred.data().len() as f64))
}

/// Erosion by a centered (2r+1)-square, computed separably.
fn erode_square(mask: &BoolImage, r: u32) -> BoolImage {
    let (w, h) = (mask.width(), mask.height());
    let mut rows = Image2::filled(w, h, false);
    for y in 0..h {
        for x in 0..w {
            let x0 = x.saturating_sub(r);
            let x1 = (x + r).min(w - 1);
            // Pixels closer than r to the border erode away.
            let mut all = x >= r && x + r < w;
            for xx in x0..=x1 {
                all &= *mask.get(xx, y);
            }
            rows.set(x, y, all);
        }
    }
    let mut out = Image2::filled(w, h, false);
    for y in 0..h {
        for x in 0..w {
            let y0 = y.saturating_sub(r);
            let y1 = (y + r).min(h - 1);
            let mut all = y >= r && y + r < h;
            for yy in y0..=y1 {
                all &= *rows.get(x, yy);
            }
            out.set(x, y, all);
        }
    }
    out
}

/// Boundary band: the mask minus its erosion.
pub fn boundary_region(mask: &BoolImage, width_px: u32) -> BoolImage {
    let eroded = erode_square(mask, width_px);
    let mut out = mask.clone();
    for (o, e) in out.data_mut().iter_mut().zip(eroded.data()) {
        *o = *o && !*e;
    }
    out
}

/// Default band width: 2% of the image diagonal, at least one pixel.
pub fn default_boundary_width(w: u32, h: u32) -> u32 {
    let d = ((w * w + h * h) as f64).sqrt();
    (0.02 * d).round().max(1.0) as u32
}

/// IoU restricted to bands around the mask contours.
pub fn boundary_iou(pred: &BoolImage, gt: &BoolImage) -> Result<f64> {
    if !pred.same_size(gt) {
        return Err(Error::config("mask sizes differ"));
    }
    let width = default_boundary_width(pred.width(), pred.height());
    boundary_iou_with_width(pred, gt, width)
}

pub fn boundary_iou_with_width(pred: &BoolImage, gt: &BoolImage, width_px: u32) -> Result<f64> {
    if !pred.same_size(gt) {
        return Err(Error::config("mask sizes differ"));
    }
    let pb = boundary_region(pred, width_px);
    let gb = boundary_region(gt, width_px);
    Ok(binary_iou_acc(&pb, &gb)?.0)
}

/// 10 log10(1 / MSE) over [0,1] images, capped at 99 dB.
pub fn psnr(a: &ColorImage, b: &ColorImage) -> Result<f64> {
    if !a.same_size(b) {
        return Err(Error::config("image sizes differ"));
    }
    let mut mse = 0.0;
    for (x, y) in a.data().iter().zip(b.data()) {
        let d = x - y;
        mse += d.norm_squared();
    }
    mse /= (a.data().len() * 3) as f64;
    if mse == 0.0 {
        return Ok(99.0);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(99.0))
}

/// The occupancy objective evaluated at a fixed sampling seed; the
/// before/after diagnostic for residual hidden geometry.
pub fn unseen_mass(
    scene: &[GaussianSurfel],
    grids: &[ClassVoxelGrid],
    z: usize,
    seed: u64,
) -> Result<f64> {
    Ok(occupancy_loss(scene, grids, z, seed, OccupancyGradient::AlphaOnly)?.value)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassRow {
    pub class: u32,
    pub acc: f64,
    pub iou: f64,
    pub biou: f64,
    pub mask_count: usize,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ProtocolScores {
    pub per_class: Vec<ClassRow>,
    /// Scene-level means over all (class, view) masks.
    pub mean_acc: f64,
    pub mean_iou: f64,
    pub mean_biou: f64,
    pub skipped_masks: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricReport {
    pub scene: String,
    pub extracted: ProtocolScores,
    pub rendered: ProtocolScores,
    pub psnr_before: Option<f64>,
    pub psnr_after: Option<f64>,
    pub unseen_before: Option<f64>,
    pub unseen_after: Option<f64>,
}

/// Ground-truth masks per class and view; `None` marks a missing mask, which
/// is skipped with a warning count.
pub struct GtMasks {
    /// classes[c][v] for class id c+1 (class 0 is background, never scored).
    pub per_class: Vec<Vec<Option<BoolImage>>>,
}

impl GtMasks {
    pub fn num_classes_scored(&self) -> usize {
        self.per_class.len()
    }
}

fn aggregate(rows: Vec<(u32, Vec<(f64, f64, f64)>)>, skipped: usize) -> ProtocolScores {
    let mut per_class = Vec::new();
    let mut all = Vec::new();
    for (class, scores) in rows {
        if scores.is_empty() {
            continue;
        }
        let n = scores.len() as f64;
        per_class.push(ClassRow {
            class,
            acc: scores.iter().map(|s| s.1).sum::<f64>() / n,
            iou: scores.iter().map(|s| s.0).sum::<f64>() / n,
            biou: scores.iter().map(|s| s.2).sum::<f64>() / n,
            mask_count: scores.len(),
        });
        all.extend(scores);
    }
    let n = all.len().max(1) as f64;
    ProtocolScores {
        mean_acc: all.iter().map(|s| s.1).sum::<f64>() / n,
        mean_iou: all.iter().map(|s| s.0).sum::<f64>() / n,
        mean_biou: all.iter().map(|s| s.2).sum::<f64>() / n,
        per_class,
        skipped_masks: skipped,
    }
}

/// Extracted protocol: each class rendered on its own, alpha binarized, and
/// compared against occlusion-free silhouette masks.
pub fn eval_extracted(
    scene: &[GaussianSurfel],
    cams: &[Camera],
    gt: &GtMasks,
    alpha_threshold: f64,
) -> Result<ProtocolScores> {
    let mut rows = Vec::new();
    let mut skipped = 0;
    for (ci, views) in gt.per_class.iter().enumerate() {
        let class = ci as u32 + 1;
        let mut scores = Vec::new();
        for (v, cam) in cams.iter().enumerate() {
            let Some(gt_mask) = views.get(v).and_then(|m| m.as_ref()) else {
                skipped += 1;
                continue;
            };
            let out = render_class_subset(scene, cam, class, &RenderOptions::default())?;
            let pred = out.alpha.map(|&a| a >= alpha_threshold);
            let (iou, acc) = binary_iou_acc(&pred, gt_mask)?;
            let biou = boundary_iou(&pred, gt_mask)?;
            scores.push((iou, acc, biou));
        }
        rows.push((class, scores));
    }
    Ok(aggregate(rows, skipped))
}

/// Rendered protocol: one full render per view; the per-pixel class comes
/// from the semantic channel.
pub fn eval_rendered(
    scene: &[GaussianSurfel],
    cams: &[Camera],
    gt: &GtMasks,
) -> Result<ProtocolScores> {
    let mut semantic = Vec::new();
    for cam in cams {
        semantic.push(render(scene, cam, &RenderOptions::default())?.semantic);
    }
    let mut rows = Vec::new();
    let mut skipped = 0;
    for (ci, views) in gt.per_class.iter().enumerate() {
        let class = ci as u32 + 1;
        let mut scores = Vec::new();
        for v in 0..cams.len() {
            let Some(gt_mask) = views.get(v).and_then(|m| m.as_ref()) else {
                skipped += 1;
                continue;
            };
            let pred = semantic[v].map(|&c| c == class);
            let (iou, acc) = binary_iou_acc(&pred, gt_mask)?;
            let biou = boundary_iou(&pred, gt_mask)?;
            scores.push((iou, acc, biou));
        }
        rows.push((class, scores));
    }
    Ok(aggregate(rows, skipped))
}

/// Plain-text table with one row per class and protocol, plus means.
pub fn format_report_table(report: &MetricReport) -> String {
    let mut out = String::new();
    out.push_str(&format!("scene: {}\n", report.scene));
    out.push_str(&format!(
        "{:<12} {:>6} {:>8} {:>8} {:>8}\n",
        "protocol", "class", "Acc", "IoU", "BIoU"
    ));
    let section = |name: &str, scores: &ProtocolScores, out: &mut String| {
        for row in &scores.per_class {
            out.push_str(&format!(
                "{:<12} {:>6} {:>8.3} {:>8.3} {:>8.3}\n",
                name, row.class, row.acc, row.iou, row.biou
            ));
        }
        out.push_str(&format!(
            "{:<12} {:>6} {:>8.3} {:>8.3} {:>8.3}\n",
            name, "mean", scores.mean_acc, scores.mean_iou, scores.mean_biou
        ));
    };
    section("extracted", &report.extracted, &mut out);
    section("rendered", &report.rendered, &mut out);
    if let (Some(b), Some(a)) = (report.psnr_before, report.psnr_after) {
        out.push_str(&format!("psnr: {b:.2} -> {a:.2} dB\n"));
    }
    if let (Some(b), Some(a)) = (report.unseen_before, report.unseen_after) {
        out.push_str(&format!("unseen mass: {b:.6} -> {a:.6}\n"));
    }
    out
}
