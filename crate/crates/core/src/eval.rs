//! Average-precision scoring under the standard detection protocol:
//! greedy score-ordered matching at an IoU threshold, per-category AP
//! (interpolated 11-point or continuous area), and mean AP across
//! categories.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::ImageAnnotation;
use crate::detector::Detection;
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::scalar::Real;
use crate::Scalar;

/// Outcome of matching one detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchFlag {
    TruePositive,
    FalsePositive,
    /// Claimed only a difficult ground-truth box: dropped from scoring.
    Ignored,
}

/// How the precision/recall curve is summarized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ApStyle {
    /// Mean of the max precision at recalls {0.0, 0.1, ..., 1.0}.
    ElevenPoint,
    /// Area under the monotonicity-corrected curve.
    Continuous,
}

impl ApStyle {
    pub fn label(self) -> &'static str {
        match self {
            ApStyle::ElevenPoint => "11point",
            ApStyle::Continuous => "continuous",
        }
    }
}

impl fmt::Display for ApStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for ApStyle {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "11point" | "11" | "eleven" | "interpolated" => Ok(ApStyle::ElevenPoint),
            "continuous" | "area" => Ok(ApStyle::Continuous),
            other => Err(format!(
                "unknown AP style {other:?} (expected 11point or continuous)"
            )),
        }
    }
}

/// Matching threshold plus AP style.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Protocol {
    pub iou_thresh: f64,
    pub style: ApStyle,
}

impl Default for Protocol {
    fn default() -> Self {
        Protocol {
            iou_thresh: 0.5,
            style: ApStyle::ElevenPoint,
        }
    }
}

/// Greedy matching for one image and category.
///
/// Detections must already be in descending score order. Each detection
/// claims the not-yet-matched clean ground-truth box it overlaps most
/// (lowest index on exact ties); a claim at or above `iou_thresh` is a
/// true positive and consumes that box, anything else falls through to
/// the difficult boxes (never consumed, detection ignored) and otherwise
/// counts as a false positive.
pub fn match_detections<T: Real>(
    dets: &[(BBox<f64>, T)],
    gts: &[(BBox<f64>, bool)],
    iou_thresh: f64,
) -> Vec<MatchFlag> {
    debug_assert!(
        dets.windows(2).all(|w| w[0].1 >= w[1].1),
        "detections must be sorted by descending score"
    );
    let clean: Vec<&BBox<f64>> = gts.iter().filter(|g| !g.1).map(|g| &g.0).collect();
    let difficult: Vec<&BBox<f64>> = gts.iter().filter(|g| g.1).map(|g| &g.0).collect();
    let mut matched = vec![false; clean.len()];
    let mut flags = Vec::with_capacity(dets.len());
    for (b, _) in dets {
        let mut best = (0.0f64, usize::MAX);
        for (i, g) in clean.iter().enumerate() {
            if matched[i] {
                continue;
            }
            let ov = iou(b, g);
            if ov > best.0 {
                best = (ov, i);
            }
        }
        if best.0 >= iou_thresh {
            matched[best.1] = true;
            flags.push(MatchFlag::TruePositive);
            continue;
        }
        let diff_best = difficult.iter().map(|g| iou(b, g)).fold(0.0f64, f64::max);
        if diff_best >= iou_thresh {
            flags.push(MatchFlag::Ignored);
        } else {
            flags.push(MatchFlag::FalsePositive);
        }
    }
    flags
}

/// Average precision from score-ordered match flags.
///
/// Ignored flags are dropped. Recall comparisons against the 11-point
/// grid are done in integers (`10 * tp >= j * total_gt`), so grid-edge
/// recalls never suffer float rounding.
pub fn average_precision(flags: &[MatchFlag], total_gt: usize, style: ApStyle) -> Result<f64> {
    if total_gt == 0 {
        return Err(Error::NoGroundTruth);
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    // Per-prefix (true-positive count, precision).
    let mut points: Vec<(usize, f64)> = Vec::new();
    for f in flags {
        match f {
            MatchFlag::TruePositive => tp += 1,
            MatchFlag::FalsePositive => fp += 1,
            MatchFlag::Ignored => continue,
        }
        points.push((tp, tp as f64 / (tp + fp) as f64));
    }
    let ap = match style {
        ApStyle::ElevenPoint => {
            let mut sum = 0.0;
            for j in 0..=10usize {
                let best = points
                    .iter()
                    .filter(|(k, _)| 10 * *k >= j * total_gt)
                    .map(|&(_, p)| p)
                    .fold(0.0f64, f64::max);
                sum += best;
            }
            sum / 11.0
        }
        ApStyle::Continuous => {
            // Right-to-left precision envelope, then the area under it.
            let mut env = points.iter().map(|&(_, p)| p).collect::<Vec<f64>>();
            for i in (0..env.len().saturating_sub(1)).rev() {
                env[i] = env[i].max(env[i + 1]);
            }
            let mut area = 0.0;
            let mut prev_recall = 0.0;
            for (&(k, _), &p) in points.iter().zip(&env) {
                let recall = k as f64 / total_gt as f64;
                area += (recall - prev_recall) * p;
                prev_recall = recall;
            }
            area
        }
    };
    Ok(ap)
}

/// Per-category slice of an evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryEval {
    pub category: String,
    pub ap: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub missed: usize,
    pub total_gt: usize,
}

/// Evaluation over every category that has ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_category: Vec<CategoryEval>,
    /// Arithmetic mean of the per-category APs.
    pub map_score: f64,
    pub protocol: Protocol,
}

impl EvalReport {
    /// Plain-text table for terminals and logs.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let name_w = self
            .per_category
            .iter()
            .map(|c| c.category.len())
            .chain(["category".len()])
            .max()
            .unwrap_or(8);
        out.push_str(&format!(
            "{:<name_w$}  {:>7}  {:>6}  {:>6}  {:>6}  {:>6}\n",
            "category", "AP", "TP", "FP", "miss", "GT"
        ));
        for c in &self.per_category {
            out.push_str(&format!(
                "{:<name_w$}  {:>7.4}  {:>6}  {:>6}  {:>6}  {:>6}\n",
                c.category, c.ap, c.true_positives, c.false_positives, c.missed, c.total_gt
            ));
        }
        out.push_str(&format!(
            "{:<name_w$}  {:>7.4}  ({} {})\n",
            "mAP",
            self.map_score,
            self.protocol.style.label(),
            format_args!("IoU>={}", self.protocol.iou_thresh),
        ));
        out
    }
}

fn box_lex(a: &BBox<f64>, b: &BBox<f64>) -> std::cmp::Ordering {
    a.x1.total_cmp(&b.x1)
        .then(a.y1.total_cmp(&b.y1))
        .then(a.w.total_cmp(&b.w))
        .then(a.h.total_cmp(&b.h))
}

/// Scores detections against ground truth.
///
/// Detections are (image id, detection) pairs; the refined box is used
/// when present. Matching runs per image in global score order; the
/// precision/recall curve pools every image of a category. Categories
/// with no clean ground truth in the split are skipped (their AP is
/// undefined); detections for them are likewise dropped.
pub fn evaluate(
    detections: &[(String, Detection<Scalar>)],
    ground_truth: &[ImageAnnotation],
    categories: &[String],
    protocol: &Protocol,
) -> Result<EvalReport> {
    let gt_by_id: HashMap<&str, &ImageAnnotation> =
        ground_truth.iter().map(|a| (a.id.as_str(), a)).collect();
    for (id, d) in detections {
        if !gt_by_id.contains_key(id.as_str()) {
            return Err(Error::UnknownImageId(id.clone()));
        }
        if d.category >= categories.len() {
            return Err(Error::UnknownCategory(format!(
                "category index {}",
                d.category
            )));
        }
    }

    let mut per_category = Vec::new();
    for (cat_idx, name) in categories.iter().enumerate() {
        let total_gt: usize = ground_truth
            .iter()
            .flat_map(|a| a.objects.iter())
            .filter(|o| &o.category == name && !o.difficult)
            .count();
        if total_gt == 0 {
            continue;
        }

        // Group this category's detections by image, newest-score first.
        let mut by_image: HashMap<&str, Vec<(BBox<f64>, f64)>> = HashMap::new();
        for (id, d) in detections.iter().filter(|(_, d)| d.category == cat_idx) {
            let eff = d.refined.unwrap_or(d.bbox);
            by_image
                .entry(id.as_str())
                .or_default()
                .push((eff, d.score));
        }
        // (score, image id, box, flag) in global order.
        let mut scored: Vec<(f64, &str, BBox<f64>, MatchFlag)> = Vec::new();
        for (id, dets) in by_image.iter_mut() {
            dets.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| box_lex(&a.0, &b.0)));
            let ann = gt_by_id[id];
            let gts: Vec<(BBox<f64>, bool)> = ann
                .objects
                .iter()
                .filter(|o| &o.category == name)
                .map(|o| (o.bbox, o.difficult))
                .collect();
            let flags = match_detections(dets, &gts, protocol.iou_thresh);
            for ((b, s), f) in dets.iter().zip(flags) {
                scored.push((*s, id, *b, f));
            }
        }
        scored.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then_with(|| a.1.cmp(b.1))
                .then_with(|| box_lex(&a.2, &b.2))
        });
        let flags: Vec<MatchFlag> = scored.iter().map(|s| s.3).collect();
        let ap = average_precision(&flags, total_gt, protocol.style)?;
        let tp = flags.iter().filter(|f| **f == MatchFlag::TruePositive).count();
        let fp = flags
            .iter()
            .filter(|f| **f == MatchFlag::FalsePositive)
            .count();
        per_category.push(CategoryEval {
            category: name.clone(),
            ap,
            true_positives: tp,
            false_positives: fp,
            missed: total_gt - tp,
            total_gt,
        });
    }
    if per_category.is_empty() {
        return Err(Error::NoGroundTruth);
    }
    let map_score =
        per_category.iter().map(|c| c.ap).sum::<f64>() / per_category.len() as f64;
    Ok(EvalReport {
        per_category,
        map_score,
        protocol: *protocol,
    })
}
