//! Brute-force reference implementations used by the verification suite.
//!
//! Everything here trades speed for obviousness: no shared passes, no
//! incremental state, no parallelism. Each function recomputes whatever it
//! needs from first principles so that agreement with the production code
//! is meaningful evidence, not a tautology. All oracles are f64-only.
//!
//! Not part of the supported API surface.

use crate::color::{ab_to_unit, rgb_to_lab};
use crate::error::Result;
use crate::eval::MatchFlag;
use crate::featgrid::{
    DescriptorConfig, FeatureGrid, CHANNELS, GRADIENT_CHANNELS, INSENSITIVE_BINS, SENSITIVE_BINS,
    TEMPLATE_CELLS,
};
use crate::geometry::BBox;
use crate::raster::RasterImage;

/// The 9 base snapping directions at 20 degree steps (same spec table as
/// the production descriptor; duplicated here on purpose).
const REF_UU: [f64; 9] = [
    1.0000, 0.9397, 0.7660, 0.5000, 0.1736, -0.1736, -0.5000, -0.7660, -0.9397,
];
const REF_VV: [f64; 9] = [
    0.0000, 0.3420, 0.6428, 0.8660, 0.9848, 0.9848, 0.8660, 0.6428, 0.3420,
];

/// Central-difference gradient at one pixel, taken on the color channel
/// with the largest squared gradient magnitude (first channel wins ties).
fn ref_gradient(img: &RasterImage<f64>, x: u32, y: u32) -> (f64, f64) {
    let left = img.get(x.saturating_sub(1), y);
    let right = img.get((x + 1).min(img.width() - 1), y);
    let up = img.get(x, y.saturating_sub(1));
    let down = img.get(x, (y + 1).min(img.height() - 1));
    let mut pick = (0.0, 0.0);
    let mut pick_mag = f64::NEG_INFINITY;
    for ch in 0..3 {
        let dx = right[ch] - left[ch];
        let dy = down[ch] - up[ch];
        let m = dx * dx + dy * dy;
        if m > pick_mag {
            pick_mag = m;
            pick = (dx, dy);
        }
    }
    pick
}

/// Orientation histogram of one full lattice cell, recomputed from raw
/// pixels: hard assignment to the best-dot-product contrast-sensitive
/// bin, the magnitude split evenly across exactly tied bins.
fn ref_cell_histogram(
    img: &RasterImage<f64>,
    cell: usize,
    lat_r: usize,
    lat_c: usize,
) -> [f64; SENSITIVE_BINS] {
    let mut hist = [0.0f64; SENSITIVE_BINS];
    for py in 0..cell {
        for px in 0..cell {
            let x = (lat_c * cell + px) as u32;
            let y = (lat_r * cell + py) as u32;
            let (dx, dy) = ref_gradient(img, x, y);
            let mag = (dx * dx + dy * dy).sqrt();
            if mag == 0.0 {
                continue;
            }
            let mut dots = [0.0f64; SENSITIVE_BINS];
            for o in 0..9 {
                dots[o] = REF_UU[o] * dx + REF_VV[o] * dy;
                dots[o + 9] = -dots[o];
            }
            let best = dots.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let winners: Vec<usize> = (0..SENSITIVE_BINS).filter(|&o| dots[o] == best).collect();
            for &o in &winners {
                hist[o] += mag / winners.len() as f64;
            }
        }
    }
    hist
}

/// Gradient energy of one lattice cell: the squared L2 norm of its 9
/// contrast-insensitive sums.
fn ref_cell_energy(img: &RasterImage<f64>, cell: usize, lat_r: usize, lat_c: usize) -> f64 {
    let h = ref_cell_histogram(img, cell, lat_r, lat_c);
    (0..INSENSITIVE_BINS)
        .map(|o| {
            let s = h[o] + h[o + 9];
            s * s
        })
        .sum()
}

/// Per-pixel, per-cell reference descriptor. Every interior cell is
/// computed in isolation: its histogram and the nine neighborhood
/// energies are rebuilt from raw pixels each time.
pub fn reference_feature_grid(
    img: &RasterImage<f64>,
    cfg: &DescriptorConfig,
) -> Result<FeatureGrid<f64>> {
    let cell = cfg.cell_size as usize;
    let lat_cols = img.width() as usize / cell;
    let lat_rows = img.height() as usize / cell;
    if lat_cols < 3 || lat_rows < 3 {
        return Err(crate::error::Error::ImageTooSmall {
            width: img.width(),
            height: img.height(),
            min: 3 * cfg.cell_size,
        });
    }
    let rows = lat_rows - 2;
    let cols = lat_cols - 2;
    let mut values = vec![0.0f64; rows * cols * CHANNELS];
    for r in 0..rows {
        for c in 0..cols {
            let (lr, lc) = (r + 1, c + 1);
            let hist = ref_cell_histogram(img, cell, lr, lc);

            // Normalizers from the four 2x2 blocks around this cell, in
            // (up,left), (up,right), (down,left), (down,right) order.
            let e = |dr: i64, dc: i64| {
                ref_cell_energy(
                    img,
                    cell,
                    (lr as i64 + dr) as usize,
                    (lc as i64 + dc) as usize,
                )
            };
            let own = e(0, 0);
            let mut norms = [0.0f64; 4];
            for (k, (dr, dc)) in [(-1i64, -1i64), (-1, 1), (1, -1), (1, 1)].iter().enumerate() {
                let block = own + e(0, *dc) + e(*dr, 0) + e(*dr, *dc);
                norms[k] = 1.0 / (block + 1e-4).sqrt();
            }

            let out = &mut values[(r * cols + c) * CHANNELS..][..CHANNELS];
            for o in 0..SENSITIVE_BINS {
                let t: f64 = norms
                    .iter()
                    .map(|n| (hist[o] * n).min(cfg.truncation))
                    .sum();
                out[o] = 0.5 * t / 4.0;
            }
            for o in 0..INSENSITIVE_BINS {
                let s = hist[o] + hist[o + 9];
                let t: f64 = norms.iter().map(|n| (s * n).min(cfg.truncation)).sum();
                out[SENSITIVE_BINS + o] = 0.5 * t / 4.0;
            }
            for (k, n) in norms.iter().enumerate() {
                let t: f64 = (0..SENSITIVE_BINS)
                    .map(|o| (hist[o] * n).min(cfg.truncation))
                    .sum();
                out[SENSITIVE_BINS + INSENSITIVE_BINS + k] = t / SENSITIVE_BINS as f64;
            }

            let mut a_sum = 0.0;
            let mut b_sum = 0.0;
            for py in 0..cell {
                for px in 0..cell {
                    let lab = rgb_to_lab::<f64>(
                        img.get((lc * cell + px) as u32, (lr * cell + py) as u32),
                    );
                    a_sum += ab_to_unit(lab[1]);
                    b_sum += ab_to_unit(lab[2]);
                }
            }
            out[GRADIENT_CHANNELS] = a_sum / (cell * cell) as f64;
            out[GRADIENT_CHANNELS + 1] = b_sum / (cell * cell) as f64;
        }
    }
    Ok(FeatureGrid::from_raw(rows, cols, cfg.cell_size, values))
}

/// Triple-loop template scorer: for every placement, accumulate
/// weight x grid products cell by cell, channel by channel.
pub fn reference_score(weights: &[f64], bias: f64, grid: &FeatureGrid<f64>) -> Vec<f64> {
    let rows = grid.rows() - TEMPLATE_CELLS + 1;
    let cols = grid.cols() - TEMPLATE_CELLS + 1;
    let mut out = vec![0.0f64; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let mut acc = 0.0;
            for wr in 0..TEMPLATE_CELLS {
                for wc in 0..TEMPLATE_CELLS {
                    let cell = grid.cell(r + wr, c + wc);
                    let wbase = (wr * TEMPLATE_CELLS + wc) * CHANNELS;
                    for ch in 0..CHANNELS {
                        acc += weights[wbase + ch] * cell[ch];
                    }
                }
            }
            out[r * cols + c] = acc + bias;
        }
    }
    out
}

/// Self-contained IoU (continuous areas, empty boxes overlap nothing).
fn ref_iou(a: &BBox<f64>, b: &BBox<f64>) -> f64 {
    if a.w <= 0.0 || a.h <= 0.0 || b.w <= 0.0 || b.h <= 0.0 {
        return 0.0;
    }
    let ix = (a.x1 + a.w).min(b.x1 + b.w) - a.x1.max(b.x1);
    let iy = (a.y1 + a.h).min(b.y1 + b.h) - a.y1.max(b.y1);
    if ix <= 0.0 || iy <= 0.0 {
        return 0.0;
    }
    let inter = ix * iy;
    inter / (a.w * a.h + b.w * b.h - inter)
}

/// Quadratic suppression: repeatedly promote the best unsuppressed box
/// (descending score, box-lexicographic tie-break) and strike everything
/// it overlaps by strictly more than `thresh`. Returns kept indices.
pub fn reference_nms(boxes: &[BBox<f64>], scores: &[f64], thresh: f64) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len());
    let mut alive: Vec<bool> = vec![true; boxes.len()];
    let mut kept = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..boxes.len() {
            if !alive[i] {
                continue;
            }
            best = Some(match best {
                None => i,
                Some(j) => {
                    let ord = scores[i].total_cmp(&scores[j]).then_with(|| {
                        boxes[j]
                            .x1
                            .total_cmp(&boxes[i].x1)
                            .then(boxes[j].y1.total_cmp(&boxes[i].y1))
                            .then(boxes[j].w.total_cmp(&boxes[i].w))
                            .then(boxes[j].h.total_cmp(&boxes[i].h))
                    });
                    if ord == std::cmp::Ordering::Greater {
                        i
                    } else {
                        j
                    }
                }
            });
        }
        let Some(i) = best else { break };
        kept.push(i);
        alive[i] = false;
        for (j, a) in alive.iter_mut().enumerate() {
            if *a && ref_iou(&boxes[i], &boxes[j]) > thresh {
                *a = false;
            }
        }
    }
    kept
}

/// Exhaustive detection/ground-truth matcher. Detections must arrive in
/// descending score order. Each one scans every clean ground-truth box,
/// claims the unmatched one with the highest IoU (lowest index on exact
/// ties) when that IoU clears the threshold, else is ignored if any
/// difficult box clears the threshold, else is a false positive.
pub fn reference_match(
    dets: &[(BBox<f64>, f64)],
    gts: &[(BBox<f64>, bool)],
    iou_thresh: f64,
) -> Vec<MatchFlag> {
    let mut taken = vec![false; gts.len()];
    let mut flags = Vec::with_capacity(dets.len());
    for (db, _) in dets {
        let mut winner: Option<(usize, f64)> = None;
        for (gi, (gb, difficult)) in gts.iter().enumerate() {
            if *difficult || taken[gi] {
                continue;
            }
            let ov = ref_iou(db, gb);
            let better = match winner {
                None => ov > 0.0,
                Some((_, bov)) => ov > bov,
            };
            if better {
                winner = Some((gi, ov));
            }
        }
        if let Some((gi, ov)) = winner {
            if ov >= iou_thresh {
                taken[gi] = true;
                flags.push(MatchFlag::TruePositive);
                continue;
            }
        }
        let hits_difficult = gts
            .iter()
            .filter(|(_, d)| *d)
            .any(|(gb, _)| ref_iou(db, gb) >= iou_thresh);
        flags.push(if hits_difficult {
            MatchFlag::Ignored
        } else {
            MatchFlag::FalsePositive
        });
    }
    flags
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_nms_handles_edge_inputs() {
        assert!(reference_nms(&[], &[], 0.3).is_empty());
        // Identical boxes: only the first survives.
        let b = BBox::new(0.0, 0.0, 10.0, 10.0);
        let kept = reference_nms(&[b, b, b], &[1.0, 1.0, 1.0], 0.3);
        assert_eq!(kept.len(), 1);
        // Disjoint boxes: everything survives.
        let boxes = [
            BBox::new(0.0, 0.0, 5.0, 5.0),
            BBox::new(50.0, 0.0, 5.0, 5.0),
        ];
        assert_eq!(reference_nms(&boxes, &[0.2, 0.9], 0.3), vec![1, 0]);
    }

    #[test]
    fn reference_match_claims_best_box_once() {
        let g = BBox::new(0.0, 0.0, 10.0, 10.0);
        let dets = [(g, 2.0), (g, 1.0)];
        let flags = reference_match(&dets, &[(g, false)], 0.5);
        assert_eq!(flags, vec![MatchFlag::TruePositive, MatchFlag::FalsePositive]);
        // A difficult box absorbs without consuming.
        let flags = reference_match(&dets, &[(g, true)], 0.5);
        assert_eq!(flags, vec![MatchFlag::Ignored, MatchFlag::Ignored]);
    }

    #[test]
    fn reference_grid_agrees_with_production_on_one_image() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        let img: RasterImage<f64> = RasterImage::from_fn(64, 64, |_, _| {
            [
                rng.random_range(0..=255u32) as f64 / 255.0,
                rng.random_range(0..=255u32) as f64 / 255.0,
                rng.random_range(0..=255u32) as f64 / 255.0,
            ]
        });
        let cfg = DescriptorConfig::default();
        let prod = crate::featgrid::compute_feature_grid(&img, &cfg).unwrap();
        let oracle = reference_feature_grid(&img, &cfg).unwrap();
        assert_eq!((prod.rows(), prod.cols()), (oracle.rows(), oracle.cols()));
        let max = prod
            .values()
            .iter()
            .zip(oracle.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max < 1e-6, "max abs diff {max}");
    }

    #[test]
    fn ref_iou_matches_closed_form() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        let b = BBox::new(5.0, 5.0, 10.0, 10.0);
        // Intersection 25, union 175.
        assert!((ref_iou(&a, &b) - 25.0 / 175.0).abs() < 1e-12);
        assert_eq!(ref_iou(&a, &BBox::new(0.0, 0.0, 0.0, 10.0)), 0.0);
    }
}
