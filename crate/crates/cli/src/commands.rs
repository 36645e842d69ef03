//! One function per CLI subcommand. Thin, deterministic orchestration of
//! the library: load inputs, validate the provenance chain, run, write,
//! report. All file writes are full rewrites, so re-running a command
//! with identical inputs reproduces identical bytes.

use std::path::Path;

use anyhow::{bail, Context, Result};
use mldetect_core::dataset::{Dataset, Split};
use mldetect_core::detector::{train_category_models, DetectConfig, TrainConfig};
use mldetect_core::elementbank::{read_bank, write_bank, ElementKind};
use mldetect_core::eval::{evaluate, ApStyle, Protocol};
use mldetect_core::featurize::PoolingScheme;
use mldetect_core::mining::MiningConfig;
use mldetect_core::pipeline::{
    detect_dataset, mine_bank, read_detections, read_models, sha256_hex, verify_hash,
    write_detections, write_models, DetectionsFile, ModelFile, PyramidCache,
};
use mldetect_core::synthetic::{generate_corpus, SyntheticConfig};
use mldetect_core::{ElementBankF, PyramidConfig, RasterImage, Scalar};

use crate::viz;

fn pyramid_config(scales_per_octave: u32) -> PyramidConfig {
    PyramidConfig {
        scales_per_octave,
        ..Default::default()
    }
}

/// Bank and dataset must describe the same category table; everything
/// downstream indexes into it.
fn check_categories(bank: &ElementBankF, dataset: &Dataset) -> Result<()> {
    if bank.categories != dataset.categories {
        bail!(
            "bank categories {:?} do not match dataset categories {:?}",
            bank.categories,
            dataset.categories
        );
    }
    Ok(())
}

pub fn cmd_make_synthetic(
    out: &Path,
    train_images: usize,
    test_images: usize,
    width: u32,
    height: u32,
    seed: u64,
) -> Result<()> {
    let cfg = SyntheticConfig {
        train_images,
        test_images,
        width,
        height,
        seed,
        ..Default::default()
    };
    let manifest = generate_corpus(out, &cfg).context("generating synthetic corpus")?;
    println!(
        "synthetic corpus: {train_images} train / {test_images} test images at {width}x{height}"
    );
    println!("manifest: {}", manifest.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_mine(
    manifest: &Path,
    out: &Path,
    elements: usize,
    localization: usize,
    seed: u64,
    scales_per_octave: u32,
    mine_flips: bool,
) -> Result<()> {
    let dataset = Dataset::load(manifest, Split::Train).context("loading training split")?;
    let cfg = MiningConfig {
        seed,
        mine_flips,
        ..Default::default()
    };
    let (bank, summaries) = mine_bank(
        &dataset,
        elements,
        localization,
        &pyramid_config(scales_per_octave),
        &cfg,
    )
    .context("mining element bank")?;

    for s in &summaries {
        if let Some(reason) = &s.failure {
            println!("{}: FAILED - {reason}", s.category);
            continue;
        }
        // Elements are stored in descending mining-score order, so the
        // first/last of each kind bracket the score range.
        let scores = |kind: ElementKind| -> String {
            let v: Vec<f64> = bank
                .elements
                .iter()
                .filter(|e| e.kind == kind && dataset.categories[e.category] == s.category)
                .filter_map(|e| e.mining_score)
                .collect();
            match (v.first(), v.last()) {
                (Some(hi), Some(lo)) => format!("{hi:.3}..{lo:.3}"),
                _ => "-".into(),
            }
        };
        println!(
            "{}: {} discriminative (score {}), {} localization (score {}); {} positives, {} localization positives, {} negatives",
            s.category,
            s.discriminative,
            scores(ElementKind::Discriminative),
            s.localization,
            scores(ElementKind::Localization),
            s.positives,
            s.loc_positives,
            s.negatives,
        );
    }
    write_bank(&bank, out).context("writing bank")?;
    println!("bank: {} elements -> {}", bank.len(), out.display());
    Ok(())
}

pub fn cmd_train(
    manifest: &Path,
    bank_path: &Path,
    out: &Path,
    scheme: PoolingScheme,
    scales_per_octave: u32,
    seed: u64,
) -> Result<()> {
    let dataset = Dataset::load(manifest, Split::Train).context("loading training split")?;
    let bank: ElementBankF = read_bank(bank_path).context("reading bank")?;
    check_categories(&bank, &dataset)?;
    let bank_hash = sha256_hex(bank_path)?;

    let cfg = TrainConfig {
        seed,
        ..Default::default()
    };
    let (models, report) = train_category_models(
        &dataset,
        &bank,
        scheme,
        &pyramid_config(scales_per_octave),
        &cfg,
    )
    .context("training category models")?;

    for r in &report.per_category {
        println!(
            "{}: {} positives, {} negatives (+{} hard), {} regression pairs{}",
            dataset.categories[r.category],
            r.positives,
            r.negatives,
            r.hard_negatives_added,
            r.regression_pairs,
            if r.regressor_fitted {
                ""
            } else {
                " (regressor not fitted)"
            },
        );
    }
    if report.skipped_proposals > 0 {
        println!(
            "note: {} proposals were too small to featurize",
            report.skipped_proposals
        );
    }

    let file = ModelFile {
        bank_hash,
        scheme,
        categories: dataset.categories.clone(),
        models,
    };
    write_models(&file, out).context("writing models")?;
    println!(
        "models: {} categories ({} scheme) -> {}",
        file.models.len(),
        scheme.label(),
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_detect(
    manifest: &Path,
    bank_path: &Path,
    models_path: &Path,
    out: &Path,
    split: Split,
    scales_per_octave: u32,
    nms: f64,
) -> Result<()> {
    // Validate the provenance chain before any heavy work.
    let model_file = read_models(models_path).context("reading models")?;
    verify_hash(&model_file.bank_hash, bank_path, "bank")?;
    let bank: ElementBankF = read_bank(bank_path).context("reading bank")?;
    let dataset = Dataset::load(manifest, split).context("loading split")?;
    check_categories(&bank, &dataset)?;

    let cache = PyramidCache::from_env()?;
    let det_cfg = DetectConfig {
        nms_thresh: nms,
        ..Default::default()
    };
    let (detections, report) = detect_dataset(
        &dataset,
        &bank,
        model_file.scheme,
        &model_file.models,
        &pyramid_config(scales_per_octave),
        &det_cfg,
        cache.as_ref(),
    )
    .context("running detector")?;

    let file = DetectionsFile {
        bank_hash: Some(model_file.bank_hash.clone()),
        model_hash: Some(sha256_hex(models_path)?),
        detections,
    };
    write_detections(&file, &dataset.categories, out).context("writing detections")?;
    println!(
        "detections: {} over {} images ({} proposals skipped) -> {}",
        report.detections,
        report.images,
        report.skipped_proposals,
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_eval(
    manifest: &Path,
    detections_path: &Path,
    split: Split,
    iou: f64,
    style: ApStyle,
    bank_path: Option<&Path>,
    models_path: Option<&Path>,
) -> Result<()> {
    let dataset = Dataset::load(manifest, split).context("loading split")?;
    let file = read_detections(detections_path, &dataset.categories)
        .context("reading detections")?;
    if let (Some(expected), Some(path)) = (&file.bank_hash, bank_path) {
        verify_hash(expected, path, "bank")?;
    }
    if let (Some(expected), Some(path)) = (&file.model_hash, models_path) {
        verify_hash(expected, path, "models")?;
    }
    let report = evaluate(
        &file.detections,
        &dataset.images,
        &dataset.categories,
        &Protocol {
            iou_thresh: iou,
            style,
        },
    )
    .context("evaluating detections")?;
    print!("{}", report.render_table());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_visualize_elements(
    manifest: &Path,
    bank_path: &Path,
    out_dir: &Path,
    models_path: Option<&Path>,
    top: usize,
    scales_per_octave: u32,
) -> Result<()> {
    let dataset = Dataset::load(manifest, Split::Train).context("loading training split")?;
    let bank: ElementBankF = read_bank(bank_path).context("reading bank")?;
    check_categories(&bank, &dataset)?;
    let model_file = match models_path {
        Some(p) => {
            let mf = read_models(p).context("reading models")?;
            verify_hash(&mf.bank_hash, bank_path, "bank")?;
            Some(mf)
        }
        None => None,
    };
    let cache = PyramidCache::from_env()?;
    let report = viz::visualize_elements(
        &dataset,
        &bank,
        model_file.as_ref(),
        &pyramid_config(scales_per_octave),
        top,
        out_dir,
        cache.as_ref(),
    )
    .context("rendering element averages")?;
    let starved = report
        .windows_averaged
        .iter()
        .filter(|&&n| n < top)
        .count();
    println!(
        "visualization: {} files -> {}",
        report.files_written,
        out_dir.display()
    );
    if starved > 0 {
        println!("note: {starved} elements had fewer than {top} firings and averaged what existed");
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_reconstruct(
    manifest: &Path,
    image_id: &str,
    detections_path: &Path,
    bank_path: &Path,
    models_path: &Path,
    averages: &Path,
    out: &Path,
    top_elements: usize,
    scales_per_octave: u32,
) -> Result<()> {
    use mldetect_core::dataset::Manifest;

    // Whole-chain validation first: models against bank, detections
    // against both (when the file carries digests).
    let model_file = read_models(models_path).context("reading models")?;
    verify_hash(&model_file.bank_hash, bank_path, "bank")?;
    let manifest_data = Manifest::load(manifest).context("reading manifest")?;
    let det_file = read_detections(detections_path, &manifest_data.categories)
        .context("reading detections")?;
    if let Some(expected) = &det_file.bank_hash {
        verify_hash(expected, bank_path, "bank")?;
    }
    if let Some(expected) = &det_file.model_hash {
        verify_hash(expected, models_path, "models")?;
    }
    let bank: ElementBankF = read_bank(bank_path).context("reading bank")?;

    let root = manifest.parent().unwrap_or(Path::new("."));
    let image_path = root
        .join(&manifest_data.images_dir)
        .join(format!("{image_id}.png"));
    let image: RasterImage<Scalar> =
        RasterImage::load(&image_path).with_context(|| format!("loading {image_id}"))?;

    let dets: Vec<_> = det_file
        .detections
        .iter()
        .filter(|(id, _)| id == image_id)
        .map(|(_, d)| d.clone())
        .collect();
    if dets.is_empty() {
        bail!("no detections for image {image_id:?} in {}", detections_path.display());
    }

    let composite = viz::reconstruct_image(
        &image,
        &dets,
        &bank,
        &model_file,
        averages,
        &pyramid_config(scales_per_octave),
        top_elements,
    )
    .context("reconstructing")?;
    composite.save_png(out).context("writing composite")?;
    println!(
        "reconstruction: {} detections of {image_id} -> {}",
        dets.len(),
        out.display()
    );
    Ok(())
}
