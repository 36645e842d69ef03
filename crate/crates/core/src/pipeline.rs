//! End-to-end orchestration and the on-disk artifacts that chain the
//! stages together: mining an element bank over every category, the
//! trained-model container, the detections text format, and a detection
//! driver that walks a dataset split.
//!
//! Artifact integrity is tracked by a hash chain: the model file stores
//! the SHA-256 of the bank file it was trained against, and a detections
//! file carries both digests in its header, so any stage can refuse
//! mismatched inputs before doing real work.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::dataset::Dataset;
use crate::detector::{detect_proposals, CategoryModel, DetectConfig, Detection};
use crate::elementbank::{Element, ElementBank, ElementKind, Reader};
use crate::error::{Error, Result};
use crate::featurize::{ImageResponses, PoolingScheme};
use crate::geometry::BBox;
use crate::mining::{
    augment_with_flips, extract_patch_plans, mine_elements_with_stats, plan_patch_sample,
    MiningConfig, NegativeStats, PatchSample, Polarity, WindowRef, LOCALIZATION_MIN_IOU,
};
use crate::pyramid::{build_pyramid, FeaturePyramid, PyramidConfig, PyramidLevel};
use crate::raster::RasterImage;
use crate::regressor::BoxRegressor;
use crate::Scalar;
use crate::svm::{LinearSvm, SvmConfig};
use crate::{detector::TrainConfig, featgrid::FeatureGrid};

// ---------------------------------------------------------------------
// Bank mining across categories
// ---------------------------------------------------------------------

/// Categories with fewer qualifying positive windows than this are
/// reported as failures rather than mined from a useless handful.
const POSITIVE_PLAN_FLOOR: usize = 16;

/// Patch budgets (positives, negatives) for mining `total` elements in
/// one category. More templates need more support, with a floor so tiny
/// requests still see a representative sample and a cap to bound the
/// covariance fit.
fn patch_budget(total: usize) -> (usize, usize) {
    let pos = (10 * total).clamp(200, 500);
    (pos, 3 * pos)
}

/// Per-category outcome of [`mine_bank`]. A category that could not be
/// mined reports `failure` and contributes no elements; the run keeps
/// going for the others.
#[derive(Debug, Clone, PartialEq)]
pub struct MiningSummary {
    pub category: String,
    /// Discriminative / localization elements kept.
    pub discriminative: usize,
    pub localization: usize,
    /// Positive patches in the discriminative pool (after flips).
    pub positives: usize,
    /// Localization-grade positive patches (after flips).
    pub loc_positives: usize,
    /// Negative patches (after flips), shared by both kinds.
    pub negatives: usize,
    pub failure: Option<String>,
}

impl MiningSummary {
    fn failed(category: &str, why: String) -> Self {
        MiningSummary {
            category: category.to_string(),
            discriminative: 0,
            localization: 0,
            positives: 0,
            loc_positives: 0,
            negatives: 0,
            failure: Some(why),
        }
    }
}

/// Plan up to `want` windows, settling for what exists when the pool is
/// smaller but at least `floor` (the sampler rejects short pools
/// outright; the retry keeps the same seed, so the result is still
/// deterministic).
fn plan_up_to(
    dataset: &Dataset,
    category: &str,
    polarity: Polarity,
    want: usize,
    floor: usize,
    min_iou: Option<f64>,
    pyr_cfg: &PyramidConfig,
    cfg: &MiningConfig,
) -> Result<Vec<WindowRef>> {
    match plan_patch_sample(dataset, category, polarity, want, min_iou, pyr_cfg, cfg) {
        Err(Error::InsufficientData { found, .. }) if found >= floor && found < want => {
            plan_patch_sample(dataset, category, polarity, found, min_iou, pyr_cfg, cfg)
        }
        other => other,
    }
}

/// Mine up to `n` elements, settling for fewer when deduplication keeps
/// a shorter list (the miner rejects such requests outright). Lowering
/// the request also shrinks the candidate pool, which can shrink the
/// survivor set again, so this walks the request down until it is
/// satisfiable; the walk is deterministic and strictly decreasing.
fn mine_up_to(
    positives: &[PatchSample<Scalar>],
    negatives: &[PatchSample<Scalar>],
    stats: &NegativeStats<Scalar>,
    n: usize,
    category: usize,
    kind: ElementKind,
    cfg: &MiningConfig,
) -> Result<Vec<Element<Scalar>>> {
    let mut want = n;
    loop {
        match mine_elements_with_stats(positives, negatives, stats, want, category, kind, cfg) {
            Err(Error::InsufficientData { what, found, .. })
                if what == "deduplicated element candidates" && found > 0 && found < want =>
            {
                want = found;
            }
            other => return other,
        }
    }
}

struct CategoryPlan {
    discriminative: Vec<WindowRef>,
    localization: Vec<WindowRef>,
    negatives: Vec<WindowRef>,
}

/// Mine a bank of `n_discriminative` + `n_localization` elements per
/// category over the whole dataset. Categories that cannot be mined
/// (no annotations, too few windows, degenerate statistics) are
/// reported in their [`MiningSummary`] and skipped; the call fails only
/// when every category fails.
///
/// Element ids are renumbered 0..len in canonical bank order.
pub fn mine_bank(
    dataset: &Dataset,
    n_discriminative: usize,
    n_localization: usize,
    pyr_cfg: &PyramidConfig,
    cfg: &MiningConfig,
) -> Result<(ElementBank<Scalar>, Vec<MiningSummary>)> {
    if n_discriminative + n_localization == 0 {
        return Err(Error::insufficient("elements requested per category", 1, 0));
    }
    let (pos_want, neg_want) = patch_budget(n_discriminative + n_localization);
    let neg_floor = (2 * cfg.ranking_k).max(4);

    // Plan every category first so one shared extraction pass can build
    // each image's pyramid exactly once.
    let plans: Vec<std::result::Result<CategoryPlan, String>> = dataset
        .categories
        .iter()
        .map(|cat| {
            let plan = || -> Result<CategoryPlan> {
                let discriminative = if n_discriminative > 0 {
                    plan_up_to(
                        dataset,
                        cat,
                        Polarity::Positive,
                        pos_want,
                        POSITIVE_PLAN_FLOOR,
                        None,
                        pyr_cfg,
                        cfg,
                    )?
                } else {
                    Vec::new()
                };
                let localization = if n_localization > 0 {
                    plan_up_to(
                        dataset,
                        cat,
                        Polarity::Positive,
                        pos_want,
                        POSITIVE_PLAN_FLOOR,
                        Some(LOCALIZATION_MIN_IOU),
                        pyr_cfg,
                        cfg,
                    )?
                } else {
                    Vec::new()
                };
                let negatives = plan_up_to(
                    dataset,
                    cat,
                    Polarity::Negative,
                    neg_want,
                    neg_floor,
                    None,
                    pyr_cfg,
                    cfg,
                )?;
                Ok(CategoryPlan {
                    discriminative,
                    localization,
                    negatives,
                })
            };
            plan().map_err(|e| e.to_string())
        })
        .collect();

    let mut flat: Vec<(&[WindowRef], Polarity)> = Vec::new();
    for plan in plans.iter().flatten() {
        flat.push((&plan.discriminative, Polarity::Positive));
        flat.push((&plan.localization, Polarity::Positive));
        flat.push((&plan.negatives, Polarity::Negative));
    }
    let mut extracted = extract_patch_plans(dataset, &flat, pyr_cfg)?;

    let mut elements: Vec<Element<Scalar>> = Vec::new();
    let mut summaries = Vec::with_capacity(dataset.categories.len());
    let mut slot = 0usize;
    for (cat_idx, cat) in dataset.categories.iter().enumerate() {
        let plan = match &plans[cat_idx] {
            Err(why) => {
                summaries.push(MiningSummary::failed(cat, why.clone()));
                continue;
            }
            Ok(p) => p,
        };
        let mut disc_pos = std::mem::take(&mut extracted[slot]);
        let mut loc_pos = std::mem::take(&mut extracted[slot + 1]);
        let mut negatives = std::mem::take(&mut extracted[slot + 2]);
        slot += 3;
        debug_assert_eq!(disc_pos.len(), plan.discriminative.len());
        if cfg.mine_flips {
            disc_pos = augment_with_flips(dataset, disc_pos);
            loc_pos = augment_with_flips(dataset, loc_pos);
            negatives = augment_with_flips(dataset, negatives);
        }

        let mined = || -> Result<(Vec<Element<Scalar>>, Vec<Element<Scalar>>)> {
            let stats = NegativeStats::fit(&negatives)?;
            let disc = if n_discriminative > 0 {
                mine_up_to(
                    &disc_pos,
                    &negatives,
                    &stats,
                    n_discriminative,
                    cat_idx,
                    ElementKind::Discriminative,
                    cfg,
                )?
            } else {
                Vec::new()
            };
            let loc = if n_localization > 0 {
                mine_up_to(
                    &loc_pos,
                    &negatives,
                    &stats,
                    n_localization,
                    cat_idx,
                    ElementKind::Localization,
                    cfg,
                )?
            } else {
                Vec::new()
            };
            Ok((disc, loc))
        }();
        match mined {
            Ok((disc, loc)) => {
                summaries.push(MiningSummary {
                    category: cat.clone(),
                    discriminative: disc.len(),
                    localization: loc.len(),
                    positives: disc_pos.len(),
                    loc_positives: loc_pos.len(),
                    negatives: negatives.len(),
                    failure: None,
                });
                // Mining returns each kind in descending score already,
                // and categories arrive in table order, so appending
                // keeps the bank canonical.
                elements.extend(disc);
                elements.extend(loc);
            }
            Err(e) => summaries.push(MiningSummary::failed(cat, e.to_string())),
        }
    }

    if elements.is_empty() {
        let reasons: Vec<String> = summaries
            .iter()
            .filter_map(|s| {
                s.failure
                    .as_ref()
                    .map(|f| format!("{}: {f}", s.category))
            })
            .collect();
        return Err(Error::insufficient(
            format!("categories with mined elements ({})", reasons.join("; ")),
            1,
            0,
        ));
    }
    for (i, e) in elements.iter_mut().enumerate() {
        e.id = i as u64;
    }
    let bank = ElementBank {
        categories: dataset.categories.clone(),
        elements,
        descriptor: pyr_cfg.descriptor,
    };
    debug_assert!(bank.ordering_is_canonical());
    Ok((bank, summaries))
}

// ---------------------------------------------------------------------
// Model file
// ---------------------------------------------------------------------

pub const MODEL_MAGIC: &[u8; 5] = b"MLDM1";

/// Trained detector artifact: one model per successfully trained
/// category, plus the provenance needed to validate inputs at detect
/// time (bank digest, pooling scheme, category table).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    /// SHA-256 (hex) of the bank file the models were trained against.
    pub bank_hash: String,
    pub scheme: PoolingScheme,
    pub categories: Vec<String>,
    pub models: Vec<CategoryModel<Scalar>>,
}

fn write_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    w.write_all(&(s.len() as u16).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

fn write_f64s(w: &mut impl Write, xs: &[f64]) -> std::io::Result<()> {
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_models(file: &ModelFile, path: &Path) -> Result<()> {
    for m in &file.models {
        if m.category >= file.categories.len() {
            return Err(Error::ContractMismatch(format!(
                "model category index {} outside table of {}",
                m.category,
                file.categories.len()
            )));
        }
    }
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MODEL_MAGIC)?;
    write_str(&mut w, &file.bank_hash)?;
    write_str(&mut w, file.scheme.label())?;
    w.write_all(&(file.categories.len() as u32).to_le_bytes())?;
    for name in &file.categories {
        write_str(&mut w, name)?;
    }
    w.write_all(&(file.models.len() as u32).to_le_bytes())?;
    for m in &file.models {
        w.write_all(&(m.category as u16).to_le_bytes())?;
        let t = &m.train_config;
        write_f64s(&mut w, &[t.svm.cost, t.svm.tol])?;
        w.write_all(&(t.svm.max_epochs as u64).to_le_bytes())?;
        w.write_all(&t.svm.seed.to_le_bytes())?;
        w.write_all(&t.neg_max_iou.to_le_bytes())?;
        w.write_all(&(t.max_negatives as u64).to_le_bytes())?;
        w.write_all(&(t.max_regression_pairs as u64).to_le_bytes())?;
        w.write_all(&t.hard_negative_floor.to_le_bytes())?;
        w.write_all(&(t.hard_negative_cap as u64).to_le_bytes())?;
        w.write_all(&(t.hard_negative_rounds as u64).to_le_bytes())?;
        w.write_all(&t.regression_min_iou.to_le_bytes())?;
        w.write_all(&t.ridge_lambda.to_le_bytes())?;
        w.write_all(&t.seed.to_le_bytes())?;

        w.write_all(&(m.svm.weights.len() as u32).to_le_bytes())?;
        w.write_all(&m.svm.bias.to_le_bytes())?;
        write_f64s(&mut w, &m.svm.weights)?;

        match &m.regressor {
            None => w.write_all(&[0u8])?,
            Some(r) => {
                w.write_all(&[1u8])?;
                w.write_all(&(r.feat_mean.len() as u32).to_le_bytes())?;
                w.write_all(&r.ridge_lambda.to_le_bytes())?;
                write_f64s(&mut w, &r.feat_mean)?;
                write_f64s(&mut w, &r.feat_std)?;
                for head in 0..4 {
                    w.write_all(&r.biases[head].to_le_bytes())?;
                    write_f64s(&mut w, &r.weights[head])?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn read_f64s(r: &mut Reader<'_>, n: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(r.f64()?);
    }
    Ok(out)
}

pub fn read_models(path: &Path) -> Result<ModelFile> {
    let buf = std::fs::read(path)?;
    let mut r = Reader {
        buf: &buf,
        pos: 0,
        path,
        kind: "model",
    };
    if r.take(5)? != MODEL_MAGIC {
        return Err(Error::malformed("model", path, "bad magic"));
    }
    let n = r.u16()? as usize;
    let bank_hash = r.string(n)?;
    let n = r.u16()? as usize;
    let scheme_label = r.string(n)?;
    let scheme: PoolingScheme = scheme_label
        .parse()
        .map_err(|_| Error::malformed("model", path, format!("unknown scheme '{scheme_label}'")))?;
    let n_categories = r.u32()? as usize;
    let mut categories = Vec::with_capacity(n_categories);
    for _ in 0..n_categories {
        let n = r.u16()? as usize;
        categories.push(r.string(n)?);
    }
    let n_models = r.u32()? as usize;
    let mut models = Vec::with_capacity(n_models);
    for _ in 0..n_models {
        let category = r.u16()? as usize;
        if category >= categories.len() {
            return Err(Error::malformed(
                "model",
                path,
                format!("category index {category} outside table of {n_categories}"),
            ));
        }
        let train_config = TrainConfig {
            svm: SvmConfig {
                cost: r.f64()?,
                tol: r.f64()?,
                max_epochs: r.u64()? as usize,
                seed: r.u64()?,
            },
            neg_max_iou: r.f64()?,
            max_negatives: r.u64()? as usize,
            max_regression_pairs: r.u64()? as usize,
            hard_negative_floor: r.f64()?,
            hard_negative_cap: r.u64()? as usize,
            hard_negative_rounds: r.u64()? as usize,
            regression_min_iou: r.f64()?,
            ridge_lambda: r.f64()?,
            seed: r.u64()?,
        };
        let dim = r.u32()? as usize;
        let bias = r.f64()?;
        let weights = read_f64s(&mut r, dim)?;
        let svm = LinearSvm { weights, bias };
        let regressor = match r.u8()? {
            0 => None,
            1 => {
                let rdim = r.u32()? as usize;
                if rdim != dim {
                    return Err(Error::malformed(
                        "model",
                        path,
                        format!("regressor dimension {rdim} does not match svm dimension {dim}"),
                    ));
                }
                let ridge_lambda = r.f64()?;
                let feat_mean = read_f64s(&mut r, rdim)?;
                let feat_std = read_f64s(&mut r, rdim)?;
                let mut biases = [0.0; 4];
                let mut weights: [Vec<f64>; 4] = Default::default();
                for head in 0..4 {
                    biases[head] = r.f64()?;
                    weights[head] = read_f64s(&mut r, rdim)?;
                }
                Some(BoxRegressor {
                    feat_mean,
                    feat_std,
                    weights,
                    biases,
                    ridge_lambda,
                })
            }
            b => {
                return Err(Error::malformed(
                    "model",
                    path,
                    format!("bad regressor flag {b}"),
                ))
            }
        };
        models.push(CategoryModel {
            category,
            svm,
            regressor,
            train_config,
        });
    }
    if r.pos != buf.len() {
        return Err(Error::malformed("model", path, "trailing bytes"));
    }
    Ok(ModelFile {
        bank_hash,
        scheme,
        categories,
        models,
    })
}

// ---------------------------------------------------------------------
// Detections file
// ---------------------------------------------------------------------

/// Parsed detections artifact. The digests are `None` when the file was
/// produced without provenance headers (e.g. by an external tool).
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionsFile {
    pub bank_hash: Option<String>,
    pub model_hash: Option<String>,
    pub detections: Vec<(String, Detection<Scalar>)>,
}

fn box_text(b: &BBox<f64>) -> String {
    format!("{} {} {} {}", b.x1, b.y1, b.w, b.h)
}

/// One text record per detection: image id, category name, score,
/// proposal box as "x1 y1 w h", and the refined box (or "-"), all
/// tab-separated. Floats use the shortest representation that parses
/// back exactly, so a write→read→write cycle is byte-stable.
pub fn write_detections(file: &DetectionsFile, categories: &[String], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "# detections v1")?;
    if let Some(h) = &file.bank_hash {
        writeln!(w, "# bank {h}")?;
    }
    if let Some(h) = &file.model_hash {
        writeln!(w, "# model {h}")?;
    }
    for (image, d) in &file.detections {
        let name = categories.get(d.category).ok_or_else(|| {
            Error::ContractMismatch(format!(
                "detection category index {} outside table of {}",
                d.category,
                categories.len()
            ))
        })?;
        let refined = match &d.refined {
            Some(r) => box_text(r),
            None => "-".to_string(),
        };
        writeln!(
            w,
            "{image}\t{name}\t{}\t{}\t{refined}",
            d.score,
            box_text(&d.bbox)
        )?;
    }
    w.flush()?;
    Ok(())
}

fn parse_box(field: &str, path: &Path, line: usize) -> Result<BBox<f64>> {
    let parts: Vec<&str> = field.split_whitespace().collect();
    if parts.len() != 4 {
        return Err(Error::Parse {
            path: path.display().to_string(),
            line,
            msg: format!("expected 'x1 y1 w h', got '{field}'"),
        });
    }
    let mut vals = [0.0f64; 4];
    for (v, p) in vals.iter_mut().zip(&parts) {
        *v = p.parse().map_err(|_| Error::Parse {
            path: path.display().to_string(),
            line,
            msg: format!("bad number '{p}'"),
        })?;
    }
    Ok(BBox::new(vals[0], vals[1], vals[2], vals[3]))
}

pub fn read_detections(path: &Path, categories: &[String]) -> Result<DetectionsFile> {
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.display().to_string(),
        line,
        msg,
    };
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut out = DetectionsFile {
        bank_hash: None,
        model_hash: None,
        detections: Vec::new(),
    };
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if let Some(comment) = trimmed.strip_prefix('#') {
            let mut words = comment.split_whitespace();
            match (words.next(), words.next()) {
                (Some("bank"), Some(h)) => out.bank_hash = Some(h.to_string()),
                (Some("model"), Some(h)) => out.model_hash = Some(h.to_string()),
                _ => {}
            }
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(parse_err(
                lineno,
                format!("expected 5 tab-separated fields, got {}", fields.len()),
            ));
        }
        let category = categories
            .iter()
            .position(|c| c == fields[1])
            .ok_or_else(|| parse_err(lineno, format!("unknown category '{}'", fields[1])))?;
        let score: f64 = fields[2]
            .parse()
            .map_err(|_| parse_err(lineno, format!("bad score '{}'", fields[2])))?;
        let bbox = parse_box(fields[3], path, lineno)?;
        let refined = match fields[4].trim() {
            "-" => None,
            f => Some(parse_box(f, path, lineno)?),
        };
        out.detections.push((
            fields[0].to_string(),
            Detection {
                bbox,
                category,
                score,
                refined,
            },
        ));
    }
    Ok(out)
}

// ---------------------------------------------------------------------
// Hash chain
// ---------------------------------------------------------------------

/// SHA-256 digest of a file's bytes, lowercase hex.
pub fn sha256_hex(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

/// Check a recorded digest against the file it claims to describe.
pub fn verify_hash(expected: &str, path: &Path, what: &str) -> Result<()> {
    let actual = sha256_hex(path)?;
    if actual != expected {
        return Err(Error::ContractMismatch(format!(
            "{what} hash mismatch for {}: file digests to {actual}, record says {expected}",
            path.display()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------
// Pyramid cache
// ---------------------------------------------------------------------

/// Environment variable naming a pyramid cache directory.
pub const CACHE_ENV: &str = "MLDETECT_CACHE";

const CACHE_MAGIC: &[u8; 5] = b"MLPC1";

/// File-backed store of built feature pyramids, keyed by image content
/// and pyramid parameters. Lookups are best-effort: missing, stale, or
/// corrupt entries are rebuilt from pixels and rewritten; a failed write
/// never fails the caller.
pub struct PyramidCache {
    dir: PathBuf,
}

static CACHE_TMP_SEQ: AtomicU64 = AtomicU64::new(0);

impl PyramidCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(PyramidCache { dir })
    }

    /// Cache named by [`CACHE_ENV`], when set and non-empty.
    pub fn from_env() -> Result<Option<Self>> {
        match std::env::var_os(CACHE_ENV) {
            Some(dir) if !dir.is_empty() => Ok(Some(Self::new(PathBuf::from(dir))?)),
            _ => Ok(None),
        }
    }

    fn entry_path(&self, image: &RasterImage<Scalar>, cfg: &PyramidConfig) -> PathBuf {
        let mut h = Sha256::new();
        h.update(CACHE_MAGIC);
        h.update(image.width().to_le_bytes());
        h.update(image.height().to_le_bytes());
        for v in image.data() {
            h.update(v.to_le_bytes());
        }
        h.update(cfg.scales_per_octave.to_le_bytes());
        h.update(cfg.min_dim.to_le_bytes());
        h.update([cfg.upsample_small as u8]);
        h.update(cfg.descriptor.cell_size.to_le_bytes());
        h.update(cfg.descriptor.truncation.to_le_bytes());
        self.dir.join(format!("{:x}.pyr", h.finalize()))
    }

    /// Restore a pyramid for this image/config, or `None` on any miss.
    pub fn load(
        &self,
        image: &RasterImage<Scalar>,
        cfg: &PyramidConfig,
    ) -> Option<FeaturePyramid<Scalar>> {
        let buf = std::fs::read(self.entry_path(image, cfg)).ok()?;
        let mut r = Reader {
            buf: &buf,
            pos: 0,
            path: Path::new("cache"),
            kind: "pyramid cache",
        };
        let mut parse = || -> Result<FeaturePyramid<Scalar>> {
            if r.take(5)? != CACHE_MAGIC {
                return Err(Error::malformed("pyramid cache", Path::new("cache"), "magic"));
            }
            let upsampled = r.u8()? != 0;
            let input_width = r.u32()?;
            let input_height = r.u32()?;
            let n_levels = r.u32()? as usize;
            let mut levels = Vec::with_capacity(n_levels);
            for _ in 0..n_levels {
                let scale = r.f64()?;
                let rows = r.u64()? as usize;
                let cols = r.u64()? as usize;
                let cell_size = r.u32()?;
                let n = r.u64()? as usize;
                let values = read_f64s(&mut r, n)?;
                let grid = FeatureGrid::from_parts(rows, cols, cell_size, values)?;
                levels.push(PyramidLevel { scale, grid });
            }
            if r.pos != buf.len() {
                return Err(Error::malformed("pyramid cache", Path::new("cache"), "trailing"));
            }
            Ok(FeaturePyramid {
                levels,
                upsampled,
                input_width,
                input_height,
                config: *cfg,
            })
        };
        let pyr = parse().ok()?;
        (pyr.input_width == image.width() && pyr.input_height == image.height()).then_some(pyr)
    }

    /// Persist a built pyramid (atomically: write-then-rename, so
    /// concurrent readers only ever see complete entries).
    pub fn store(
        &self,
        image: &RasterImage<Scalar>,
        cfg: &PyramidConfig,
        pyramid: &FeaturePyramid<Scalar>,
    ) -> Result<()> {
        let path = self.entry_path(image, cfg);
        let tmp = self.dir.join(format!(
            ".{}.{}.{}.tmp",
            std::process::id(),
            CACHE_TMP_SEQ.fetch_add(1, Ordering::Relaxed),
            path.file_name().unwrap_or_default().to_string_lossy()
        ));
        {
            let mut w = BufWriter::new(std::fs::File::create(&tmp)?);
            w.write_all(CACHE_MAGIC)?;
            w.write_all(&[pyramid.upsampled as u8])?;
            w.write_all(&pyramid.input_width.to_le_bytes())?;
            w.write_all(&pyramid.input_height.to_le_bytes())?;
            w.write_all(&(pyramid.levels.len() as u32).to_le_bytes())?;
            for level in &pyramid.levels {
                w.write_all(&level.scale.to_le_bytes())?;
                w.write_all(&(level.grid.rows() as u64).to_le_bytes())?;
                w.write_all(&(level.grid.cols() as u64).to_le_bytes())?;
                w.write_all(&level.grid.cell_size().to_le_bytes())?;
                w.write_all(&(level.grid.values().len() as u64).to_le_bytes())?;
                write_f64s(&mut w, level.grid.values())?;
            }
            w.flush()?;
        }
        std::fs::rename(&tmp, &path)?;
        Ok(())
    }
}

/// Build this image's pyramid, consulting `cache` when given. A cache
/// entry is bit-identical to a fresh build, so cached and uncached runs
/// produce the same downstream artifacts.
pub fn pyramid_or_build(
    cache: Option<&PyramidCache>,
    image: &RasterImage<Scalar>,
    cfg: &PyramidConfig,
) -> Result<FeaturePyramid<Scalar>> {
    let Some(cache) = cache else {
        return build_pyramid(image, cfg);
    };
    if let Some(p) = cache.load(image, cfg) {
        return Ok(p);
    }
    let p = build_pyramid(image, cfg)?;
    let _ = cache.store(image, cfg, &p); // best-effort; a full disk must not fail the run
    Ok(p)
}

// ---------------------------------------------------------------------
// Dataset-level detection
// ---------------------------------------------------------------------

/// Counters from one detection run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DetectRunReport {
    pub images: usize,
    pub detections: usize,
    /// Proposals that could not be featurized (too small everywhere).
    pub skipped_proposals: usize,
}

/// Run every category model over every image of the dataset. Images are
/// processed in dataset (split) order and detections keep per-image
/// grouping, so output order is deterministic regardless of thread
/// count. `models` must index into `dataset.categories`.
pub fn detect_dataset(
    dataset: &Dataset,
    bank: &ElementBank<Scalar>,
    scheme: PoolingScheme,
    models: &[CategoryModel<Scalar>],
    pyr_cfg: &PyramidConfig,
    det_cfg: &DetectConfig,
    cache: Option<&PyramidCache>,
) -> Result<(Vec<(String, Detection<Scalar>)>, DetectRunReport)> {
    let feat_dim = bank.len() * scheme.region_count();
    for m in models {
        if m.svm.weights.len() != feat_dim {
            return Err(Error::ContractMismatch(format!(
                "model for category {} expects features of length {}, bank x scheme gives {feat_dim}",
                m.category,
                m.svm.weights.len(),
            )));
        }
        if m.category >= dataset.categories.len() {
            return Err(Error::ContractMismatch(format!(
                "model category index {} outside table of {}",
                m.category,
                dataset.categories.len()
            )));
        }
    }

    let per_image: Vec<Result<(Vec<Detection<Scalar>>, usize)>> = dataset
        .images
        .par_iter()
        .map(|ann| {
            let image = dataset.load_image(&ann.id)?;
            let proposals = dataset.proposals_of(&ann.id)?;
            let pyramid = pyramid_or_build(cache, &image, pyr_cfg)?;
            let ctx = ImageResponses::with_pyramid(&image, bank, pyramid);
            let out = detect_proposals(&ctx, proposals, scheme, models, det_cfg)?;
            Ok((out.detections, out.skipped_proposals))
        })
        .collect();

    let mut detections = Vec::new();
    let mut report = DetectRunReport {
        images: dataset.images.len(),
        ..Default::default()
    };
    for (ann, result) in dataset.images.iter().zip(per_image) {
        let (dets, skipped) = result?;
        report.skipped_proposals += skipped;
        report.detections += dets.len();
        detections.extend(dets.into_iter().map(|d| (ann.id.clone(), d)));
    }
    Ok((detections, report))
}
