//! Element mining.
//!
//! Candidates start as whitened templates `w = (Σ+λI)^{-1}(x−μ)` seeded
//! from random positive patches (μ, Σ: negative-patch statistics with
//! shrinkage `λ = 0.01·trace(Σ)/dim`). Each candidate is refit for a fixed
//! number of rounds on the top-m positive firings of one half of the
//! source images, then ranked by a density-ratio score measured on the
//! held-out half: the fraction of its top-k firings that are positive
//! patches. Near-duplicates (by weight cosine or firing overlap) are
//! dropped in rank order.
//!
//! Patch sampling is split into a geometry-only planning pass (which
//! windows, using [`crate::pyramid::plan_levels`]) and a pixel pass that
//! builds each contributing image's pyramid exactly once.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::Dataset;
use crate::elementbank::{dedupe_candidates, Element, ElementKind};
use crate::error::{Error, Result};
use crate::featgrid::{flip_patch, TEMPLATE_CELLS};
use crate::geometry::{dilate, flip_box, iou, BBox};
use crate::linalg::Cholesky;
use crate::pyramid::{
    build_pyramid, plan_levels, window_footprint, LevelGeometry, PyramidConfig,
};
use crate::scalar::Real;
use crate::Scalar;

/// One training patch: a template-window feature vector plus provenance.
#[derive(Debug, Clone)]
pub struct PatchSample<T> {
    pub features: Vec<T>,
    /// Index of the source image in dataset order.
    pub source_image: u32,
    /// Pixel footprint of the window in the source image.
    pub source_box: BBox<f64>,
    pub positive: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MiningConfig {
    pub seed: u64,
    /// Candidate initializations per requested element.
    pub candidate_factor: usize,
    /// Refit iterations per candidate.
    pub rounds: usize,
    /// Firings averaged in each refit.
    pub top_m: usize,
    /// Firings inspected by the density-ratio score.
    pub ranking_k: usize,
    /// Dedupe: maximum weight cosine between kept elements.
    pub max_cosine: f64,
    /// Dedupe: maximum firing-set Jaccard between kept elements.
    pub max_firing_overlap: f64,
    /// Ground-truth dilation used when sampling positive windows.
    pub dilate_fraction: f64,
    /// Also mine from mirrored positives.
    pub mine_flips: bool,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig {
            seed: 0,
            candidate_factor: 5,
            rounds: 5,
            top_m: 20,
            ranking_k: 50,
            max_cosine: 0.95,
            max_firing_overlap: 0.5,
            dilate_fraction: 0.25,
            mine_flips: true,
        }
    }
}

/// IoU filter that makes a positive window "localization grade".
pub const LOCALIZATION_MIN_IOU: f64 = 0.8;

/// Deterministic stream separation for nested RNGs.
pub(crate) fn mix_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h ^= p
            .wrapping_add(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(h << 6)
            .wrapping_add(h >> 2);
        h = h.wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h ^= h >> 27;
    }
    h
}

// ---------------------------------------------------------------------
// Negative statistics

/// Mean and shrinkage-regularized covariance factor of negative patches,
/// fit once and shared by every candidate.
#[derive(Debug, Clone)]
pub struct NegativeStats<T> {
    mean: Vec<T>,
    chol: Cholesky<T>,
    dim: usize,
}

impl<T: Real> NegativeStats<T> {
    pub fn fit(negatives: &[PatchSample<T>]) -> Result<Self> {
        if negatives.len() < 2 {
            return Err(Error::insufficient(
                "negative patches for covariance",
                2,
                negatives.len(),
            ));
        }
        let dim = negatives[0].features.len();
        for s in negatives {
            if s.features.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: s.features.len(),
                });
            }
        }
        let n = negatives.len();
        let mut mean = vec![T::zero(); dim];
        for s in negatives {
            for (m, v) in mean.iter_mut().zip(&s.features) {
                *m = *m + *v;
            }
        }
        let inv_n = T::of(1.0 / n as f64);
        for m in &mut mean {
            *m = *m * inv_n;
        }

        let diffs: Vec<Vec<T>> = negatives
            .iter()
            .map(|s| {
                s.features
                    .iter()
                    .zip(&mean)
                    .map(|(v, m)| *v - *m)
                    .collect()
            })
            .collect();
        let inv_denom = T::of(1.0 / (n - 1) as f64);
        let mut cov = vec![T::zero(); dim * dim];
        cov.par_chunks_mut(dim).enumerate().for_each(|(i, row)| {
            for d in &diffs {
                let di = d[i];
                for (r, v) in row.iter_mut().zip(d.iter()) {
                    *r = *r + di * *v;
                }
            }
            for r in row.iter_mut() {
                *r = *r * inv_denom;
            }
        });
        let trace: f64 = (0..dim).map(|i| cov[i * dim + i].as_f64()).sum();
        let lambda = T::of(0.01 * trace / dim as f64);
        for i in 0..dim {
            cov[i * dim + i] = cov[i * dim + i] + lambda;
        }
        let chol = Cholesky::factor(&cov, dim).ok_or(Error::DegenerateNegatives)?;
        Ok(NegativeStats { mean, chol, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mean(&self) -> &[T] {
        &self.mean
    }

    /// Whitened template targeting patch `x`: solve `(Σ+λI) w = x − μ`,
    /// scaled to unit length (scoring scale is calibrated downstream).
    pub fn whitened_template(&self, x: &[T]) -> Vec<T> {
        assert_eq!(x.len(), self.dim);
        let d: Vec<T> = x.iter().zip(&self.mean).map(|(v, m)| *v - *m).collect();
        let mut w = self.chol.solve(&d);
        let norm = w
            .iter()
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt();
        if norm > 0.0 {
            let inv = T::of(1.0 / norm);
            for v in &mut w {
                *v = *v * inv;
            }
        }
        w
    }
}

// ---------------------------------------------------------------------
// Core mining

fn dot<T: Real>(w: &[T], x: &[T]) -> f64 {
    w.iter().zip(x).map(|(a, b)| (*a * *b).as_f64()).sum()
}

/// Scores of `patches` under `w`, ordered by score descending then index
/// ascending.
fn score_order<T: Real>(w: &[T], patches: &[&PatchSample<T>]) -> Vec<(f64, usize)> {
    let mut v: Vec<(f64, usize)> = patches
        .iter()
        .enumerate()
        .map(|(i, p)| (dot(w, &p.features), i))
        .collect();
    v.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    v
}

/// Mine `n` elements for one `(category, kind)` from labeled patches.
/// Fits the negative statistics internally; use
/// [`mine_elements_with_stats`] to share them across calls.
pub fn mine_elements<T: Real>(
    positives: &[PatchSample<T>],
    negatives: &[PatchSample<T>],
    n: usize,
    category: usize,
    kind: ElementKind,
    cfg: &MiningConfig,
) -> Result<Vec<Element<T>>> {
    let stats = NegativeStats::fit(negatives)?;
    mine_elements_with_stats(positives, negatives, &stats, n, category, kind, cfg)
}

pub fn mine_elements_with_stats<T: Real>(
    positives: &[PatchSample<T>],
    negatives: &[PatchSample<T>],
    stats: &NegativeStats<T>,
    n: usize,
    category: usize,
    kind: ElementKind,
    cfg: &MiningConfig,
) -> Result<Vec<Element<T>>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    if positives.is_empty() {
        return Err(Error::insufficient("positive patches", 1, 0));
    }
    let dim = stats.dim();
    for s in positives.iter().chain(negatives) {
        if s.features.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: s.features.len(),
            });
        }
    }

    // 50/50 split of source images: one half refits candidates, the
    // held-out half prices them.
    let mut ids: Vec<u32> = positives
        .iter()
        .chain(negatives)
        .map(|s| s.source_image)
        .collect();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() < 2 {
        return Err(Error::insufficient(
            "distinct source images for the mining split",
            2,
            ids.len(),
        ));
    }
    let mut rng =
        ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, &[category as u64, kind.as_byte() as u64]));
    ids.shuffle(&mut rng);
    let refit_ids: HashSet<u32> = ids[..ids.len().div_ceil(2)].iter().copied().collect();

    let refit_pos: Vec<&PatchSample<T>> = positives
        .iter()
        .filter(|s| refit_ids.contains(&s.source_image))
        .collect();
    // Held-out pool with patch ids in the [positives ++ negatives] space.
    let mut rank: Vec<(u32, bool, &[T])> = Vec::new();
    for (i, s) in positives.iter().enumerate() {
        if !refit_ids.contains(&s.source_image) {
            rank.push((i as u32, true, s.features.as_slice()));
        }
    }
    for (j, s) in negatives.iter().enumerate() {
        if !refit_ids.contains(&s.source_image) {
            rank.push(((positives.len() + j) as u32, false, s.features.as_slice()));
        }
    }
    if refit_pos.is_empty() {
        return Err(Error::insufficient("refit-split positive patches", 1, 0));
    }
    if rank.is_empty() {
        return Err(Error::insufficient("ranking-split patches", 1, 0));
    }

    let pool = n * cfg.candidate_factor.max(1);
    let init: Vec<usize> = if refit_pos.len() >= pool {
        rand::seq::index::sample(&mut rng, refit_pos.len(), pool).into_vec()
    } else {
        (0..pool).map(|_| rng.random_range(0..refit_pos.len())).collect()
    };
    let m_eff = cfg.top_m.clamp(1, refit_pos.len());

    struct Cand<T> {
        weights: Vec<T>,
        bias: f64,
        density: f64,
        firings: Vec<u32>,
    }
    let cands: Vec<Cand<T>> = init
        .par_iter()
        .map(|&ix| {
            let mut w = stats.whitened_template(&refit_pos[ix].features);
            for _ in 0..cfg.rounds.max(1) {
                let order = score_order(&w, &refit_pos);
                let mut mean = vec![T::zero(); dim];
                for &(_, pi) in &order[..m_eff] {
                    for (m, v) in mean.iter_mut().zip(&refit_pos[pi].features) {
                        *m = *m + *v;
                    }
                }
                let inv = T::of(1.0 / m_eff as f64);
                for m in &mut mean {
                    *m = *m * inv;
                }
                w = stats.whitened_template(&mean);
            }
            // Bias: the m-th best firing under the final weights lands at 0.
            let order = score_order(&w, &refit_pos);
            let bias = -order[m_eff - 1].0;

            // Held-out density ratio over the top-k firings.
            let mut scored: Vec<(f64, u32, bool)> = rank
                .iter()
                .map(|(id, is_pos, f)| (dot(&w, f), *id, *is_pos))
                .collect();
            scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let k_eff = cfg.ranking_k.clamp(1, scored.len());
            let top = &scored[..k_eff];
            let positives_in_top = top.iter().filter(|t| t.2).count();
            let mut firings: Vec<u32> = top.iter().map(|t| t.1).collect();
            firings.sort_unstable();
            Cand {
                weights: w,
                bias,
                density: positives_in_top as f64 / k_eff as f64,
                firings,
            }
        })
        .collect();

    // Rank by density (ties: earlier candidate), dedupe, keep n.
    let mut order: Vec<usize> = (0..cands.len()).collect();
    order.sort_by(|&a, &b| {
        cands[b]
            .density
            .partial_cmp(&cands[a].density)
            .unwrap()
            .then(a.cmp(&b))
    });
    let weights_ranked: Vec<Vec<T>> = order.iter().map(|&i| cands[i].weights.clone()).collect();
    let firings_ranked: Vec<Vec<u32>> = order.iter().map(|&i| cands[i].firings.clone()).collect();
    let kept = dedupe_candidates(
        &weights_ranked,
        &firings_ranked,
        cfg.max_cosine,
        cfg.max_firing_overlap,
    );
    if kept.len() < n {
        return Err(Error::insufficient(
            "deduplicated element candidates",
            n,
            kept.len(),
        ));
    }
    Ok(kept[..n]
        .iter()
        .enumerate()
        .map(|(out_i, &ri)| {
            let c = &cands[order[ri]];
            Element {
                id: out_i as u64,
                category,
                kind,
                bias: c.bias,
                weights: c.weights.clone(),
                mining_score: Some(c.density),
            }
        })
        .collect())
}

// ---------------------------------------------------------------------
// Patch sampling from images

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Polarity {
    Positive,
    Negative,
}

/// A template window addressed by image / level / response position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct WindowRef {
    pub image: u32,
    pub level: usize,
    pub r: usize,
    pub c: usize,
}

fn window_grid(g: &LevelGeometry) -> (usize, usize) {
    (
        g.rows.saturating_sub(TEMPLATE_CELLS - 1),
        g.cols.saturating_sub(TEMPLATE_CELLS - 1),
    )
}

/// Windows (level, r, c) whose pixel footprint lies inside one of the
/// dilated ground-truth boxes, optionally filtered by IoU with the
/// undilated box. Geometry only — no pixels touched.
fn qualifying_positive_windows(
    levels: &[LevelGeometry],
    gts: &[BBox<f64>],
    dilate_fraction: f64,
    min_iou: Option<f64>,
    cell: f64,
) -> Vec<(usize, usize, usize)> {
    const EPS: f64 = 1e-9;
    let side_cells = (TEMPLATE_CELLS + 2) as f64;
    let mut out = Vec::new();
    for (li, g) in levels.iter().enumerate() {
        let (win_rows, win_cols) = window_grid(g);
        if win_rows == 0 || win_cols == 0 {
            continue;
        }
        for gt in gts {
            let dil = dilate(gt, dilate_fraction);
            let s = g.scale;
            // Containment in level-pixel terms: cell*c >= dil.x1*s and
            // cell*(c + side_cells) <= dil.x2*s.
            let c_lo = ((dil.x1 * s / cell) - EPS).ceil().max(0.0) as i64;
            let c_hi = (((dil.x2() * s / cell) - side_cells) + EPS).floor() as i64;
            let r_lo = ((dil.y1 * s / cell) - EPS).ceil().max(0.0) as i64;
            let r_hi = (((dil.y2() * s / cell) - side_cells) + EPS).floor() as i64;
            let c_hi = c_hi.min(win_cols as i64 - 1);
            let r_hi = r_hi.min(win_rows as i64 - 1);
            for r in r_lo..=r_hi {
                for c in c_lo..=c_hi {
                    if let Some(t) = min_iou {
                        let fp = window_footprint(r as usize, c as usize, cell as u32, s);
                        if iou(&fp, gt) <= t {
                            continue;
                        }
                    }
                    out.push((li, r as usize, c as usize));
                }
            }
        }
    }
    out.sort_unstable();
    out.dedup();
    out
}

/// Plan a seeded uniform sample of `count` windows without touching
/// pixels. Positives come from windows inside dilated ground-truth boxes
/// of `category` (difficult instances excluded); negatives uniformly from
/// all windows of images with no instance of `category`. Errors when
/// fewer than `count` qualifying windows exist.
pub fn plan_patch_sample(
    dataset: &Dataset,
    category: &str,
    polarity: Polarity,
    count: usize,
    min_iou: Option<f64>,
    pyr_cfg: &PyramidConfig,
    cfg: &MiningConfig,
) -> Result<Vec<WindowRef>> {
    dataset.category_index(category)?;
    let cell = pyr_cfg.descriptor.cell_size as f64;
    let cat_idx = dataset.category_index(category)? as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(
        cfg.seed,
        &[
            cat_idx,
            match polarity {
                Polarity::Positive => 1,
                Polarity::Negative => 2,
            },
            min_iou.map(f64::to_bits).unwrap_or(0),
        ],
    ));

    let mut chosen: Vec<WindowRef> = match polarity {
        Polarity::Positive => {
            let mut pool: Vec<WindowRef> = Vec::new();
            for (img_idx, ann) in dataset.images.iter().enumerate() {
                let gts: Vec<BBox<f64>> = ann
                    .boxes_of(category)
                    .filter(|o| !o.difficult)
                    .map(|o| o.bbox)
                    .collect();
                if gts.is_empty() {
                    continue;
                }
                let (_, levels) = plan_levels(pyr_cfg, ann.width, ann.height);
                for (level, r, c) in
                    qualifying_positive_windows(&levels, &gts, cfg.dilate_fraction, min_iou, cell)
                {
                    pool.push(WindowRef {
                        image: img_idx as u32,
                        level,
                        r,
                        c,
                    });
                }
            }
            if pool.len() < count {
                return Err(Error::insufficient(
                    "qualifying positive windows",
                    count,
                    pool.len(),
                ));
            }
            rand::seq::index::sample(&mut rng, pool.len(), count)
                .into_iter()
                .map(|i| pool[i])
                .collect()
        }
        Polarity::Negative => {
            // (image, per-level window grids, running total) spans.
            let mut spans: Vec<(u32, Vec<(usize, usize)>)> = Vec::new();
            let mut total = 0usize;
            for (img_idx, ann) in dataset.images.iter().enumerate() {
                if ann.objects.iter().any(|o| o.category == category) {
                    continue;
                }
                let (_, levels) = plan_levels(pyr_cfg, ann.width, ann.height);
                let grids: Vec<(usize, usize)> = levels.iter().map(window_grid).collect();
                let n: usize = grids.iter().map(|(r, c)| r * c).sum();
                if n > 0 {
                    total += n;
                    spans.push((img_idx as u32, grids));
                }
            }
            if total < count {
                return Err(Error::insufficient("negative windows", count, total));
            }
            let mut flat: Vec<usize> = rand::seq::index::sample(&mut rng, total, count).into_vec();
            flat.sort_unstable();
            let mut out = Vec::with_capacity(count);
            let mut base = 0usize;
            let mut span_i = 0usize;
            for f in flat {
                // Advance to the span owning flat index f.
                loop {
                    let span_n: usize = spans[span_i].1.iter().map(|(r, c)| r * c).sum();
                    if f < base + span_n {
                        break;
                    }
                    base += span_n;
                    span_i += 1;
                }
                let (image, grids) = &spans[span_i];
                let mut local = f - base;
                for (level, &(wr, wc)) in grids.iter().enumerate() {
                    let n = wr * wc;
                    if local < n {
                        out.push(WindowRef {
                            image: *image,
                            level,
                            r: local / wc,
                            c: local % wc,
                        });
                        break;
                    }
                    local -= n;
                }
            }
            out
        }
    };
    chosen.sort_unstable();
    Ok(chosen)
}

/// Extract several window plans in one pass, building each contributing
/// image's pyramid exactly once. Every plan must be sorted by image
/// (as [`plan_patch_sample`] returns them). Output `i` aligns with
/// `plans[i]`.
pub fn extract_patch_plans(
    dataset: &Dataset,
    plans: &[(&[WindowRef], Polarity)],
    pyr_cfg: &PyramidConfig,
) -> Result<Vec<Vec<PatchSample<Scalar>>>> {
    let mut needed: Vec<u32> = plans
        .iter()
        .flat_map(|(p, _)| p.iter().map(|w| w.image))
        .collect();
    needed.sort_unstable();
    needed.dedup();

    let cell = pyr_cfg.descriptor.cell_size;
    let mut out: Vec<Vec<PatchSample<Scalar>>> =
        plans.iter().map(|(p, _)| Vec::with_capacity(p.len())).collect();
    let mut cursors = vec![0usize; plans.len()];
    for img_idx in needed {
        let ann = &dataset.images[img_idx as usize];
        let img = dataset.load_image(&ann.id)?;
        let pyr = build_pyramid(&img, pyr_cfg)?;
        for (pi, (plan, polarity)) in plans.iter().enumerate() {
            let cur = &mut cursors[pi];
            while *cur < plan.len() && plan[*cur].image == img_idx {
                let w = plan[*cur];
                let level = &pyr.levels[w.level];
                out[pi].push(PatchSample {
                    features: level.grid.copy_window(w.r, w.c),
                    source_image: w.image,
                    source_box: window_footprint(w.r, w.c, cell, level.scale),
                    positive: *polarity == Polarity::Positive,
                });
                *cur += 1;
            }
        }
    }
    for (pi, (plan, _)) in plans.iter().enumerate() {
        debug_assert_eq!(out[pi].len(), plan.len(), "plan not sorted by image?");
    }
    Ok(out)
}

/// Seeded uniform patch sample (see [`plan_patch_sample`] for the window
/// pools). `min_iou` restricts positives to localization-grade windows.
pub fn sample_patches(
    dataset: &Dataset,
    category: &str,
    polarity: Polarity,
    count: usize,
    min_iou: Option<f64>,
    pyr_cfg: &PyramidConfig,
    cfg: &MiningConfig,
) -> Result<Vec<PatchSample<Scalar>>> {
    let plan = plan_patch_sample(dataset, category, polarity, count, min_iou, pyr_cfg, cfg)?;
    let mut out = extract_patch_plans(dataset, &[(&plan, polarity)], pyr_cfg)?;
    Ok(out.pop().unwrap())
}

/// Augment positives with their mirrored twins (feature-space flip; the
/// twin keeps the source image and gets the mirrored footprint).
pub fn augment_with_flips(
    dataset: &Dataset,
    patches: Vec<PatchSample<Scalar>>,
) -> Vec<PatchSample<Scalar>> {
    let mut out = Vec::with_capacity(patches.len() * 2);
    for p in patches {
        let width = dataset.images[p.source_image as usize].width as f64;
        let twin = PatchSample {
            features: flip_patch(&p.features),
            source_image: p.source_image,
            source_box: flip_box(&p.source_box, width),
            positive: p.positive,
        };
        out.push(p);
        out.push(twin);
    }
    out
}
