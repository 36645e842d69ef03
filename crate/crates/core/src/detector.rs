//! Category classifiers over pooled element features: training-set
//! assembly, linear SVM fitting with one (configurable) round of hard
//! negative mining, greedy NMS, box-regression wiring, and the per-image
//! detect path.
//!
//! Training walks the split twice. Pass one builds the per-image scoring
//! context once (plus its mirrored twin for the flipped positives) and
//! collects, for every category simultaneously: ground-truth positive
//! features, a seeded reservoir subsample of negative-proposal features
//! (max IoU below the negative ceiling against that category's ground
//! truth), and regression triples (ground-truth boxes themselves plus
//! proposals overlapping one by at least the regression floor). Pass two
//! rescans every negative-eligible proposal with the interim classifiers
//! and appends each category's highest-scoring false positives before one
//! retrain.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::collections::HashSet;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::Dataset;
use crate::elementbank::ElementBank;
use crate::error::{Error, Result};
use crate::featurize::{ImageResponses, PoolingScheme, ProposalFeature};
use crate::geometry::{flip_box, iou, BBox};
use crate::mining::mix_seed;
use crate::pyramid::PyramidConfig;
use crate::raster::RasterImage;
use crate::regressor::{fit_regressor, BoxRegressor, REGRESSION_MIN_IOU};
use crate::scalar::Real;
use crate::svm::{train_svm, LinearSvm, SvmConfig};
use crate::Scalar;

/// Hyperparameters recorded into every trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub svm: SvmConfig,
    /// Proposals whose best IoU against the category's ground truth is
    /// below this are negatives; anything at or above it (short of being
    /// a ground-truth positive) is discarded.
    pub neg_max_iou: f64,
    /// Reservoir cap on initial negatives per category.
    pub max_negatives: usize,
    /// Reservoir cap on regression triples per category.
    pub max_regression_pairs: usize,
    /// A rescanned negative is "hard" when it scores above this.
    pub hard_negative_floor: f64,
    /// At most this many hard negatives are appended per round.
    pub hard_negative_cap: usize,
    /// Full-rescan rounds; one suffices in practice.
    pub hard_negative_rounds: usize,
    /// Proposal/ground-truth IoU floor for regression triples.
    pub regression_min_iou: f64,
    /// Ridge strength for the box regressor.
    pub ridge_lambda: f64,
    /// Master seed; per-category/per-round streams are derived from it.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            svm: SvmConfig::default(),
            neg_max_iou: 0.2,
            max_negatives: 10_000,
            max_regression_pairs: 5_000,
            hard_negative_floor: -1.0,
            hard_negative_cap: 5_000,
            hard_negative_rounds: 1,
            regression_min_iou: REGRESSION_MIN_IOU,
            ridge_lambda: 1.0,
            seed: 0,
        }
    }
}

/// A trained per-category detector head.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryModel<T> {
    /// Index into the dataset/bank category table.
    pub category: usize,
    pub svm: LinearSvm<T>,
    pub regressor: Option<BoxRegressor<T>>,
    pub train_config: TrainConfig,
}

/// One scored box.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection<T> {
    pub bbox: BBox<f64>,
    pub category: usize,
    /// SVM margin.
    pub score: T,
    /// Regressor-refined box, present iff a regressor was applied.
    pub refined: Option<BBox<f64>>,
}

/// Per-category counters from training, for reporting and tests.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CategoryTrainReport {
    pub category: usize,
    pub positives: usize,
    pub negatives: usize,
    pub hard_negatives_added: usize,
    pub regression_pairs: usize,
    pub regressor_fitted: bool,
}

/// Whole-run training summary.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub per_category: Vec<CategoryTrainReport>,
    /// Proposals that could not be featurized (too small) over pass one.
    pub skipped_proposals: usize,
}

/// Detect-time knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectConfig {
    /// Per-category NMS overlap threshold.
    pub nms_thresh: f64,
    /// Only detections scoring strictly above this are emitted; kept low
    /// so precision/recall curves retain their low-confidence tails.
    pub score_floor: f64,
}

impl Default for DetectConfig {
    fn default() -> Self {
        DetectConfig {
            nms_thresh: 0.3,
            score_floor: -1.1,
        }
    }
}

/// Result of detecting over one image.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectOutcome<T> {
    /// Grouped by model order; descending score within a category.
    pub detections: Vec<Detection<T>>,
    /// Proposals skipped because they could not be featurized.
    pub skipped_proposals: usize,
}

fn box_lex(a: &BBox<f64>, b: &BBox<f64>) -> Ordering {
    a.x1.total_cmp(&b.x1)
        .then(a.y1.total_cmp(&b.y1))
        .then(a.w.total_cmp(&b.w))
        .then(a.h.total_cmp(&b.h))
}

/// Greedy non-maximum suppression over one image and category: keep the
/// best remaining box, drop everything overlapping it by strictly more
/// than `thresh`. Score ties break by box lexicographic order, so the
/// result is independent of input order.
pub fn nms_indices<T: Real>(boxes: &[BBox<f64>], scores: &[T], thresh: f64) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len());
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .as_f64()
            .total_cmp(&scores[a].as_f64())
            .then_with(|| box_lex(&boxes[a], &boxes[b]))
    });
    let mut kept: Vec<usize> = Vec::new();
    'cand: for &i in &order {
        for &k in &kept {
            if iou(&boxes[k], &boxes[i]).as_f64() > thresh {
                continue 'cand;
            }
        }
        kept.push(i);
    }
    kept
}

/// NMS over ready-made detections (one category, one image).
pub fn nms<T: Real>(detections: &[Detection<T>], thresh: f64) -> Vec<Detection<T>> {
    let boxes: Vec<BBox<f64>> = detections.iter().map(|d| d.bbox).collect();
    let scores: Vec<T> = detections.iter().map(|d| d.score).collect();
    nms_indices(&boxes, &scores, thresh)
        .into_iter()
        .map(|i| detections[i].clone())
        .collect()
}

/// Indices of the top-`cap` scores strictly above `floor`, descending,
/// ties by ascending index.
pub fn select_hard_negatives<T: Real>(scores: &[T], floor: f64, cap: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len())
        .filter(|&i| scores[i].as_f64() > floor)
        .collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .as_f64()
            .total_cmp(&scores[a].as_f64())
            .then(a.cmp(&b))
    });
    idx.truncate(cap);
    idx
}

/// Deterministic uniform reservoir subsample over a stream.
struct Reservoir<R> {
    cap: usize,
    seen: usize,
    rng: ChaCha8Rng,
    items: Vec<R>,
}

impl<R> Reservoir<R> {
    fn new(cap: usize, seed: u64) -> Self {
        Reservoir {
            cap,
            seen: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            items: Vec::new(),
        }
    }

    fn offer(&mut self, item: R) {
        if self.cap == 0 {
            return;
        }
        if self.items.len() < self.cap {
            self.items.push(item);
        } else {
            let j = self.rng.random_range(0..=self.seen);
            if j < self.cap {
                self.items[j] = item;
            }
        }
        self.seen += 1;
    }
}

/// A subsampled negative with its stream identity (for hard-negative
/// deduplication).
struct NegSample<T> {
    img: u32,
    prop: u32,
    features: Vec<T>,
}

/// Hard-negative candidate ordered by (score desc, image asc, proposal
/// asc); `BinaryHeap<Reverse<_>>` keeps the least-preferred on top.
struct HardCand<T> {
    score: f64,
    img: u32,
    prop: u32,
    features: Vec<T>,
}

impl<T> PartialEq for HardCand<T> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl<T> Eq for HardCand<T> {}
impl<T> PartialOrd for HardCand<T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<T> Ord for HardCand<T> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then_with(|| other.img.cmp(&self.img))
            .then_with(|| other.prop.cmp(&self.prop))
    }
}

/// Everything pass one gathers for one category.
struct CategoryPool<T> {
    positives: Vec<Vec<T>>,
    negatives: Reservoir<NegSample<T>>,
    regression: Reservoir<(Vec<T>, BBox<f64>, BBox<f64>)>,
}

/// Trains one model per dataset category and reports counts.
///
/// Ground-truth boxes flagged difficult are never positives (nor
/// regression anchors), but they still veto overlapping proposals from
/// the negative pool.
pub fn train_category_models(
    dataset: &Dataset,
    bank: &ElementBank<Scalar>,
    scheme: PoolingScheme,
    pyramid: &PyramidConfig,
    cfg: &TrainConfig,
) -> Result<(Vec<CategoryModel<Scalar>>, TrainReport)> {
    let n_cat = dataset.categories.len();
    let feat_dim = bank.len() * scheme.region_count();
    let mut pools: Vec<CategoryPool<Scalar>> = (0..n_cat)
        .map(|c| CategoryPool {
            positives: Vec::new(),
            negatives: Reservoir::new(cfg.max_negatives, mix_seed(cfg.seed, &[12, c as u64])),
            regression: Reservoir::new(
                cfg.max_regression_pairs,
                mix_seed(cfg.seed, &[13, c as u64]),
            ),
        })
        .collect();
    let mut report = TrainReport {
        per_category: (0..n_cat)
            .map(|c| CategoryTrainReport {
                category: c,
                ..CategoryTrainReport::default()
            })
            .collect(),
        skipped_proposals: 0,
    };

    // Pass one: featurize each image once (twice when it has positives).
    for (img_idx, ann) in dataset.images.iter().enumerate() {
        let proposals = dataset.proposals_of(&ann.id)?.to_vec();
        let image = dataset.load_image(&ann.id)?;
        let ctx = ImageResponses::build(&image, bank, pyramid)?;
        let feats = featurize_all(&ctx, &proposals, scheme, &mut report.skipped_proposals);

        let has_positive = ann.objects.iter().any(|o| !o.difficult);
        let flipped_ctx = if has_positive {
            Some(image.flip_horizontal())
        } else {
            None
        };
        let flipped_ctx = match &flipped_ctx {
            Some(img) => Some(ImageResponses::build(img, bank, pyramid)?),
            None => None,
        };

        for (cat, pool) in pools.iter_mut().enumerate() {
            let name = &dataset.categories[cat];
            let gt_all: Vec<&BBox<f64>> = ann
                .objects
                .iter()
                .filter(|o| &o.category == name)
                .map(|o| &o.bbox)
                .collect();
            let gt_clean: Vec<&BBox<f64>> = ann
                .objects
                .iter()
                .filter(|o| &o.category == name && !o.difficult)
                .map(|o| &o.bbox)
                .collect();

            for g in &gt_clean {
                if let Ok(f) = ctx.featurize(g, scheme) {
                    pool.regression.offer((f.values.clone(), **g, **g));
                    pool.positives.push(f.values);
                }
                if let Some(fctx) = &flipped_ctx {
                    let fb = flip_box(g, ann.width as f64);
                    if let Ok(f) = fctx.featurize(&fb, scheme) {
                        pool.positives.push(f.values);
                    }
                }
            }

            for (p_idx, (p, feat)) in proposals.iter().zip(&feats).enumerate() {
                let Some(feat) = feat else { continue };
                let best = gt_all
                    .iter()
                    .map(|g| iou(p, g))
                    .fold(0.0f64, f64::max);
                if best < cfg.neg_max_iou {
                    pool.negatives.offer(NegSample {
                        img: img_idx as u32,
                        prop: p_idx as u32,
                        features: feat.values.clone(),
                    });
                }
                // Regression anchors come from clean ground truth only.
                let best_clean = gt_clean
                    .iter()
                    .max_by(|a, b| iou(p, a).total_cmp(&iou(p, b)));
                if let Some(g) = best_clean {
                    if iou(p, g) >= cfg.regression_min_iou {
                        pool.regression.offer((feat.values.clone(), *p, **g));
                    }
                }
            }
        }
    }

    // Initial models.
    let mut models: Vec<CategoryModel<Scalar>> = Vec::with_capacity(n_cat);
    for (cat, pool) in pools.iter().enumerate() {
        let rep = &mut report.per_category[cat];
        rep.positives = pool.positives.len();
        rep.negatives = pool.negatives.items.len();
        rep.regression_pairs = pool.regression.items.len();
        if pool.positives.is_empty() {
            return Err(Error::insufficient(
                format!(
                    "ground-truth positives for category {:?}",
                    dataset.categories[cat]
                ),
                1,
                0,
            ));
        }
        let neg_feats: Vec<Vec<Scalar>> = pool
            .negatives
            .items
            .iter()
            .map(|n| n.features.clone())
            .collect();
        let svm = train_svm(
            &pool.positives,
            &neg_feats,
            &svm_round_config(cfg, cat, 0),
        )?;
        debug_assert_eq!(svm.weights.len(), feat_dim);

        let regressor = {
            let feats: Vec<Vec<Scalar>> = pool.regression.items.iter().map(|t| t.0.clone()).collect();
            let props: Vec<BBox<Scalar>> = pool.regression.items.iter().map(|t| t.1).collect();
            let gts: Vec<BBox<Scalar>> = pool.regression.items.iter().map(|t| t.2).collect();
            match fit_regressor(&feats, &props, &gts, cfg.ridge_lambda) {
                Ok(r) => Some(r),
                Err(Error::InsufficientPairs { .. }) => None,
                Err(e) => return Err(e),
            }
        };
        rep.regressor_fitted = regressor.is_some();
        models.push(CategoryModel {
            category: cat,
            svm,
            regressor,
            train_config: cfg.clone(),
        });
    }

    // Hard-negative rounds: full rescan, append, retrain once per round.
    for round in 1..=cfg.hard_negative_rounds {
        let initial_ids: Vec<HashSet<(u32, u32)>> = pools
            .iter()
            .map(|p| p.negatives.items.iter().map(|n| (n.img, n.prop)).collect())
            .collect();
        let mut heaps: Vec<BinaryHeap<std::cmp::Reverse<HardCand<Scalar>>>> =
            (0..n_cat).map(|_| BinaryHeap::new()).collect();

        for (img_idx, ann) in dataset.images.iter().enumerate() {
            let proposals = dataset.proposals_of(&ann.id)?.to_vec();
            let image = dataset.load_image(&ann.id)?;
            let ctx = ImageResponses::build(&image, bank, pyramid)?;
            let mut sink = 0usize;
            let feats = featurize_all(&ctx, &proposals, scheme, &mut sink);

            for (cat, heap) in heaps.iter_mut().enumerate() {
                let name = &dataset.categories[cat];
                let gt_all: Vec<&BBox<f64>> = ann
                    .objects
                    .iter()
                    .filter(|o| &o.category == name)
                    .map(|o| &o.bbox)
                    .collect();
                for (p_idx, (p, feat)) in proposals.iter().zip(&feats).enumerate() {
                    let Some(feat) = feat else { continue };
                    let best = gt_all.iter().map(|g| iou(p, g)).fold(0.0f64, f64::max);
                    if best >= cfg.neg_max_iou {
                        continue;
                    }
                    if initial_ids[cat].contains(&(img_idx as u32, p_idx as u32)) {
                        continue;
                    }
                    let score = models[cat].svm.score(&feat.values).as_f64();
                    if score <= cfg.hard_negative_floor {
                        continue;
                    }
                    let cand = HardCand {
                        score,
                        img: img_idx as u32,
                        prop: p_idx as u32,
                        features: feat.values.clone(),
                    };
                    if heap.len() < cfg.hard_negative_cap {
                        heap.push(std::cmp::Reverse(cand));
                    } else if let Some(min) = heap.peek() {
                        if cand > min.0 {
                            heap.pop();
                            heap.push(std::cmp::Reverse(cand));
                        }
                    }
                }
            }
        }

        for (cat, heap) in heaps.into_iter().enumerate() {
            if heap.is_empty() {
                continue; // nothing hard: the model stands unchanged
            }
            let mut hard: Vec<HardCand<Scalar>> = heap.into_iter().map(|r| r.0).collect();
            hard.sort_by(|a, b| b.cmp(a));
            report.per_category[cat].hard_negatives_added += hard.len();
            let pool = &pools[cat];
            let mut neg_feats: Vec<Vec<Scalar>> = pool
                .negatives
                .items
                .iter()
                .map(|n| n.features.clone())
                .collect();
            neg_feats.extend(hard.into_iter().map(|h| h.features));
            models[cat].svm = train_svm(
                &pool.positives,
                &neg_feats,
                &svm_round_config(cfg, cat, round),
            )?;
        }
    }

    Ok((models, report))
}

fn svm_round_config(cfg: &TrainConfig, category: usize, round: usize) -> SvmConfig {
    SvmConfig {
        seed: mix_seed(cfg.seed, &[11, category as u64, round as u64]),
        ..cfg.svm.clone()
    }
}

fn featurize_all<T: Real>(
    ctx: &ImageResponses<T>,
    proposals: &[BBox<f64>],
    scheme: PoolingScheme,
    skipped: &mut usize,
) -> Vec<Option<ProposalFeature<T>>> {
    proposals
        .iter()
        .map(|p| match ctx.featurize(p, scheme) {
            Ok(f) => Some(f),
            Err(Error::RegionTooSmall { .. }) => {
                *skipped += 1;
                None
            }
            Err(_) => {
                *skipped += 1;
                None
            }
        })
        .collect()
}

/// Scores every proposal with every category model against a prebuilt
/// image context: floor filter, per-category NMS, then regression of the
/// survivors.
pub fn detect_proposals<T: Real>(
    ctx: &ImageResponses<T>,
    proposals: &[BBox<f64>],
    scheme: PoolingScheme,
    models: &[CategoryModel<T>],
    cfg: &DetectConfig,
) -> Result<DetectOutcome<T>> {
    let feat_dim = ctx.bank.len() * scheme.region_count();
    for m in models {
        if m.svm.weights.len() != feat_dim {
            return Err(Error::ContractMismatch(format!(
                "model for category {} expects features of length {}, bank x scheme gives {}",
                m.category,
                m.svm.weights.len(),
                feat_dim
            )));
        }
    }
    let mut skipped = 0usize;
    let feats = featurize_all(ctx, proposals, scheme, &mut skipped);

    let mut detections = Vec::new();
    for model in models {
        let mut idxs: Vec<usize> = Vec::new();
        let mut boxes: Vec<BBox<f64>> = Vec::new();
        let mut scores: Vec<T> = Vec::new();
        for (i, feat) in feats.iter().enumerate() {
            let Some(feat) = feat else { continue };
            let s = model.svm.score(&feat.values);
            if s.as_f64() > cfg.score_floor {
                idxs.push(i);
                boxes.push(proposals[i]);
                scores.push(s);
            }
        }
        for k in nms_indices(&boxes, &scores, cfg.nms_thresh) {
            let feat = feats[idxs[k]].as_ref().expect("kept implies featurized");
            let refined = model.regressor.as_ref().map(|r| {
                let values: Vec<T> = feat.values.clone();
                r.refine(&boxes[k].cast(), &values).cast()
            });
            detections.push(Detection {
                bbox: boxes[k],
                category: model.category,
                score: scores[k],
                refined,
            });
        }
    }
    Ok(DetectOutcome {
        detections,
        skipped_proposals: skipped,
    })
}

/// Convenience wrapper: build the image context, then detect.
pub fn detect_image<T: Real>(
    image: &RasterImage<T>,
    proposals: &[BBox<f64>],
    bank: &ElementBank<T>,
    scheme: PoolingScheme,
    pyramid: &PyramidConfig,
    models: &[CategoryModel<T>],
    cfg: &DetectConfig,
) -> Result<DetectOutcome<T>> {
    let ctx = ImageResponses::build(image, bank, pyramid)?;
    detect_proposals(&ctx, proposals, scheme, models, cfg)
}
