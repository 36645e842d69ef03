//! Visualization artifacts: per-element average images, index and
//! SVM-weight sheets, and detection reconstructions.
//!
//! An element is summarized by averaging the pixel windows of its
//! best-scoring firings over the training set, each rescaled to a
//! common 64x64 tile. A detection is "reconstructed" by pasting those
//! averages back at the firing locations of its strongest contributing
//! elements, blended by a contribution-weighted mean.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use mldetect_core::dataset::Dataset;
use mldetect_core::detector::Detection;
use mldetect_core::featurize::{Firing, ImageResponses};
use mldetect_core::pipeline::{pyramid_or_build, ModelFile, PyramidCache};
use mldetect_core::{BBox, Error, PyramidConfig, RasterImage, Result, Scalar};
use mldetect_core::ElementBankF as ElementBank;
use rayon::prelude::*;

/// Side of the common tile every firing window is rescaled to.
pub const AVERAGE_SIZE: u32 = 64;
/// Firings averaged per element.
pub const DEFAULT_TOP_FIRINGS: usize = 10;
/// Elements pasted per detection during reconstruction.
pub const DEFAULT_TOP_ELEMENTS: usize = 20;
/// Padding between montage tiles, px.
const SHEET_PAD: u32 = 2;

/// File name of one element's average image, by bank index.
pub fn element_image_name(index: usize) -> String {
    format!("element_{index:04}.png")
}

/// A firing tagged with its source image (index into the split order).
#[derive(Debug, Clone)]
pub struct SourcedFiring {
    pub image: usize,
    pub firing: Firing<Scalar>,
}

/// Per element, the `k` best firings pooled over every image of the
/// split: descending score, ties broken by ascending (image, level,
/// row, column) so the result is independent of thread scheduling.
pub fn collect_top_firings(
    dataset: &Dataset,
    bank: &ElementBank,
    pyr_cfg: &PyramidConfig,
    k: usize,
    cache: Option<&PyramidCache>,
) -> Result<Vec<Vec<SourcedFiring>>> {
    let per_image: Vec<Result<Vec<Vec<Firing<Scalar>>>>> = dataset
        .images
        .par_iter()
        .map(|ann| {
            let img = dataset.load_image(&ann.id)?;
            let pyr = pyramid_or_build(cache, &img, pyr_cfg)?;
            let ctx = ImageResponses::with_pyramid(&img, bank, pyr);
            Ok((0..bank.len()).map(|e| ctx.top_firings(e, k)).collect())
        })
        .collect();

    let mut merged: Vec<Vec<SourcedFiring>> = vec![Vec::new(); bank.len()];
    for (image, per_elem) in per_image.into_iter().enumerate() {
        for (e, firings) in per_elem?.into_iter().enumerate() {
            merged[e].extend(
                firings
                    .into_iter()
                    .map(|firing| SourcedFiring { image, firing }),
            );
        }
    }
    for list in &mut merged {
        list.sort_by(|a, b| {
            b.firing
                .score
                .total_cmp(&a.firing.score)
                .then(a.image.cmp(&b.image))
                .then(a.firing.level.cmp(&b.firing.level))
                .then(a.firing.r.cmp(&b.firing.r))
                .then(a.firing.c.cmp(&b.firing.c))
        });
        list.truncate(k);
    }
    Ok(merged)
}

/// Crop `b` (clipped to the image) and rescale to the canonical tile.
fn window_crop(img: &RasterImage<Scalar>, b: &BBox<f64>) -> Option<RasterImage<Scalar>> {
    let x0 = b.x1.floor().clamp(0.0, img.width() as f64) as u32;
    let y0 = b.y1.floor().clamp(0.0, img.height() as f64) as u32;
    let x1 = b.x2().ceil().clamp(0.0, img.width() as f64) as u32;
    let y1 = b.y2().ceil().clamp(0.0, img.height() as f64) as u32;
    if x1 <= x0 || y1 <= y0 {
        return None;
    }
    Some(
        img.crop(x0, y0, x1 - x0, y1 - y0)
            .resize(AVERAGE_SIZE, AVERAGE_SIZE),
    )
}

/// Plain per-pixel mean; an empty set yields a mid-gray tile.
fn mean_image(windows: &[RasterImage<Scalar>]) -> RasterImage<Scalar> {
    if windows.is_empty() {
        return RasterImage::from_fn(AVERAGE_SIZE, AVERAGE_SIZE, |_, _| [0.5; 3]);
    }
    let inv = 1.0 / windows.len() as f64;
    RasterImage::from_fn(AVERAGE_SIZE, AVERAGE_SIZE, |x, y| {
        let mut acc = [0.0f64; 3];
        for w in windows {
            let p = w.get(x, y);
            for (a, v) in acc.iter_mut().zip(p) {
                *a += v;
            }
        }
        acc.map(|a| a * inv)
    })
}

/// Average each element's selected windows. Images are loaded once each;
/// the averaging itself runs in firing-rank order, so the output is
/// deterministic. Returns the averages plus how many windows fed each.
fn average_element_windows(
    dataset: &Dataset,
    selections: &[Vec<SourcedFiring>],
) -> Result<(Vec<RasterImage<Scalar>>, Vec<usize>)> {
    let mut crops: Vec<Vec<Option<RasterImage<Scalar>>>> =
        selections.iter().map(|l| vec![None; l.len()]).collect();
    let mut by_image: HashMap<usize, Vec<(usize, usize)>> = HashMap::new();
    for (e, list) in selections.iter().enumerate() {
        for (rank, sf) in list.iter().enumerate() {
            by_image.entry(sf.image).or_default().push((e, rank));
        }
    }
    for (image, slots) in by_image {
        let img = dataset.load_image(&dataset.images[image].id)?;
        for (e, rank) in slots {
            crops[e][rank] = window_crop(&img, &selections[e][rank].firing.pixel_box);
        }
    }
    let mut averages = Vec::with_capacity(selections.len());
    let mut counts = Vec::with_capacity(selections.len());
    for list in crops {
        let used: Vec<RasterImage<Scalar>> = list.into_iter().flatten().collect();
        counts.push(used.len());
        averages.push(mean_image(&used));
    }
    Ok((averages, counts))
}

/// Tile images left-to-right, top-to-bottom (input order) on a mid-gray
/// sheet with `pad` pixels of spacing. Tiles may differ in size; the
/// lattice pitch follows the largest.
pub fn montage(tiles: &[RasterImage<Scalar>], cols: usize, pad: u32) -> RasterImage<Scalar> {
    assert!(cols > 0, "montage needs at least one column");
    if tiles.is_empty() {
        return RasterImage::from_fn(pad.max(1), pad.max(1), |_, _| [0.5; 3]);
    }
    let tw = tiles.iter().map(|t| t.width()).max().unwrap();
    let th = tiles.iter().map(|t| t.height()).max().unwrap();
    let rows = tiles.len().div_ceil(cols);
    let w = pad + cols as u32 * (tw + pad);
    let h = pad + rows as u32 * (th + pad);
    let mut sheet = RasterImage::from_fn(w, h, |_, _| [0.5; 3]);
    for (i, tile) in tiles.iter().enumerate() {
        let ox = pad + (i % cols) as u32 * (tw + pad);
        let oy = pad + (i / cols) as u32 * (th + pad);
        for y in 0..tile.height() {
            for x in 0..tile.width() {
                sheet.set(ox + x, oy + y, tile.get(x, y));
            }
        }
    }
    sheet
}

/// What [`visualize_elements`] wrote.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VizReport {
    /// Windows actually averaged per element (≤ the requested top-k).
    pub windows_averaged: Vec<usize>,
    /// PNG files written under the output directory.
    pub files_written: usize,
}

/// Write one average image per element (named by bank index), an index
/// sheet over the whole bank in bank order, and — when models are given —
/// per-category sheets of the three most positively and most negatively
/// SVM-weighted elements (weight of the element's whole-box dimension).
pub fn visualize_elements(
    dataset: &Dataset,
    bank: &ElementBank,
    models: Option<&ModelFile>,
    pyr_cfg: &PyramidConfig,
    top_k: usize,
    out_dir: &Path,
    cache: Option<&PyramidCache>,
) -> Result<VizReport> {
    if let Some(mf) = models {
        let nr = mf.scheme.region_count();
        for m in &mf.models {
            if m.svm.weights.len() != bank.len() * nr {
                return Err(Error::ContractMismatch(format!(
                    "model for category {} has {} weights, bank x scheme gives {}",
                    m.category,
                    m.svm.weights.len(),
                    bank.len() * nr
                )));
            }
        }
    }
    std::fs::create_dir_all(out_dir)?;
    let selections = collect_top_firings(dataset, bank, pyr_cfg, top_k, cache)?;
    let (averages, counts) = average_element_windows(dataset, &selections)?;

    let mut files = 0usize;
    for (i, avg) in averages.iter().enumerate() {
        avg.save_png(&out_dir.join(element_image_name(i)))?;
        files += 1;
    }
    let cols = (averages.len().max(1) as f64).sqrt().ceil() as usize;
    montage(&averages, cols, SHEET_PAD).save_png(&out_dir.join("index.png"))?;
    files += 1;

    if let Some(mf) = models {
        let nr = mf.scheme.region_count();
        for m in &mf.models {
            let name = &mf.categories[m.category];
            let weight = |e: usize| m.svm.weights[e * nr];
            let mut order: Vec<usize> = (0..bank.len()).collect();
            order.sort_by(|&a, &b| weight(b).total_cmp(&weight(a)).then(a.cmp(&b)));
            let pick = |idx: &mut dyn Iterator<Item = &usize>| -> Vec<RasterImage<Scalar>> {
                idx.take(3).map(|&e| averages[e].clone()).collect()
            };
            let top = pick(&mut order.iter());
            let bottom = pick(&mut order.iter().rev());
            montage(&top, top.len().max(1), SHEET_PAD)
                .save_png(&out_dir.join(format!("sheet_{name}_positive.png")))?;
            montage(&bottom, bottom.len().max(1), SHEET_PAD)
                .save_png(&out_dir.join(format!("sheet_{name}_negative.png")))?;
            files += 2;
        }
    }
    Ok(VizReport {
        windows_averaged: counts,
        files_written: files,
    })
}

// ---------------------------------------------------------------------
// Reconstruction
// ---------------------------------------------------------------------

/// Per element, its strongest (contribution, feature dim) pair, where
/// contribution = pooled response x SVM weight, maximized over the
/// region dimensions that have a located firing (the first such
/// dimension wins exact ties). Result is sorted by descending
/// contribution, ties by ascending element index.
pub fn rank_contributions(
    values: &[Scalar],
    firings: &[Option<Firing<Scalar>>],
    weights: &[Scalar],
    region_count: usize,
) -> Vec<(usize, f64, usize)> {
    assert_eq!(values.len(), weights.len());
    assert_eq!(values.len(), firings.len());
    assert_eq!(values.len() % region_count, 0);
    let mut ranked = Vec::with_capacity(values.len() / region_count);
    for e in 0..values.len() / region_count {
        let mut best: Option<(f64, usize)> = None;
        for ri in 0..region_count {
            let dim = e * region_count + ri;
            if firings[dim].is_none() {
                continue;
            }
            let c = values[dim] * weights[dim];
            if best.is_none_or(|(bc, _)| c > bc) {
                best = Some((c, dim));
            }
        }
        if let Some((c, dim)) = best {
            ranked.push((e, c, dim));
        }
    }
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked
}

/// Contribution-weighted mean of rescaled tiles on a mid-gray canvas.
/// Each transfer is (tile, destination box in canvas pixels, weight);
/// non-positive weights are skipped. Pixels no transfer covers stay
/// mid-gray.
pub fn blend_transfers(
    width: u32,
    height: u32,
    transfers: &[(RasterImage<Scalar>, BBox<f64>, f64)],
) -> RasterImage<Scalar> {
    let n = width as usize * height as usize;
    let mut acc = vec![[0.0f64; 3]; n];
    let mut wsum = vec![0.0f64; n];
    for (tile, place, weight) in transfers {
        if *weight <= 0.0 {
            continue;
        }
        let x0 = place.x1.floor().clamp(0.0, width as f64) as u32;
        let y0 = place.y1.floor().clamp(0.0, height as f64) as u32;
        let x1 = place.x2().ceil().clamp(0.0, width as f64) as u32;
        let y1 = place.y2().ceil().clamp(0.0, height as f64) as u32;
        if x1 <= x0 || y1 <= y0 {
            continue;
        }
        let scaled = tile.resize(x1 - x0, y1 - y0);
        for y in 0..(y1 - y0) {
            for x in 0..(x1 - x0) {
                let p = scaled.get(x, y);
                let i = (y0 + y) as usize * width as usize + (x0 + x) as usize;
                for (a, v) in acc[i].iter_mut().zip(p) {
                    *a += weight * v;
                }
                wsum[i] += weight;
            }
        }
    }
    RasterImage::from_fn(width, height, |x, y| {
        let i = y as usize * width as usize + x as usize;
        if wsum[i] > 0.0 {
            acc[i].map(|a| a / wsum[i])
        } else {
            [0.5; 3]
        }
    })
}

/// Lazy loader over a visualize-elements output directory.
pub struct AverageStore {
    dir: PathBuf,
    cache: HashMap<usize, RasterImage<Scalar>>,
}

impl AverageStore {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        AverageStore {
            dir: dir.into(),
            cache: HashMap::new(),
        }
    }

    pub fn get(&mut self, element: usize) -> Result<&RasterImage<Scalar>> {
        if !self.cache.contains_key(&element) {
            let path = self.dir.join(element_image_name(element));
            if !path.exists() {
                return Err(Error::MissingAverages(self.dir.display().to_string()));
            }
            let img = RasterImage::load(&path)?;
            self.cache.insert(element, img);
        }
        Ok(&self.cache[&element])
    }
}

/// Rebuild what the detector "saw" in one image: for each detection,
/// featurize its proposal with firing tracking, rank elements by
/// response x SVM weight, and paste the top contributors' average
/// images at their firing windows (scaled to each window's pyramid
/// footprint), blended across all detections by contribution-weighted
/// mean. Detections whose proposal cannot be featurized are skipped.
pub fn reconstruct_image(
    image: &RasterImage<Scalar>,
    detections: &[Detection<Scalar>],
    bank: &ElementBank,
    model_file: &ModelFile,
    averages_dir: &Path,
    pyr_cfg: &PyramidConfig,
    top_elements: usize,
) -> Result<RasterImage<Scalar>> {
    let nr = model_file.scheme.region_count();
    let by_cat: HashMap<usize, &mldetect_core::detector::CategoryModel<Scalar>> =
        model_file.models.iter().map(|m| (m.category, m)).collect();
    for m in &model_file.models {
        if m.svm.weights.len() != bank.len() * nr {
            return Err(Error::ContractMismatch(format!(
                "model for category {} has {} weights, bank x scheme gives {}",
                m.category,
                m.svm.weights.len(),
                bank.len() * nr
            )));
        }
    }

    let ctx = ImageResponses::build(image, bank, pyr_cfg)?;
    let mut store = AverageStore::new(averages_dir);
    let mut transfers: Vec<(RasterImage<Scalar>, BBox<f64>, f64)> = Vec::new();
    for d in detections {
        let Some(model) = by_cat.get(&d.category) else {
            return Err(Error::ContractMismatch(format!(
                "no model for category index {}",
                d.category
            )));
        };
        let (feat, firings) = match ctx.featurize_with_positions(&d.bbox, model_file.scheme) {
            Ok(v) => v,
            Err(Error::RegionTooSmall { .. }) => continue,
            Err(e) => return Err(e),
        };
        let ranked = rank_contributions(&feat.values, &firings, &model.svm.weights, nr);
        for &(e, c, dim) in ranked.iter().take(top_elements) {
            if c <= 0.0 {
                break; // descending order: nothing positive remains
            }
            let firing = firings[dim].as_ref().expect("ranked dims are located");
            transfers.push((store.get(e)?.clone(), firing.pixel_box, c));
        }
    }
    Ok(blend_transfers(image.width(), image.height(), &transfers))
}

#[cfg(test)]
mod tests {
    use super::*;
    use mldetect_core::dataset::{write_annotations, ImageAnnotation, Manifest, Split};
    use mldetect_core::elementbank::{Element, ElementKind};
    use mldetect_core::featgrid::{DescriptorConfig, PATCH_DIM};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn noise_bank(seed: u64, count: usize) -> ElementBank {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let elements = (0..count)
            .map(|i| Element {
                id: i as u64,
                category: 0,
                kind: ElementKind::Discriminative,
                bias: 0.0,
                weights: (0..PATCH_DIM)
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect(),
                mining_score: None,
            })
            .collect();
        ElementBank {
            categories: vec!["obj".into()],
            elements,
            descriptor: DescriptorConfig::default(),
        }
    }

    /// A dataset of `n` images rendered by `paint`, all in the train
    /// split, one category, no objects, empty proposals.
    fn disk_dataset(
        dir: &Path,
        n: usize,
        size: (u32, u32),
        mut paint: impl FnMut(usize, u32, u32) -> [f64; 3],
    ) -> Dataset {
        let images_dir = dir.join("images");
        std::fs::create_dir_all(&images_dir).unwrap();
        let mut anns = Vec::new();
        let mut split = String::new();
        for i in 0..n {
            let id = format!("img_{i:02}");
            let img: RasterImage<Scalar> =
                RasterImage::from_fn(size.0, size.1, |x, y| paint(i, x, y));
            img.save_png(&images_dir.join(format!("{id}.png"))).unwrap();
            anns.push(ImageAnnotation {
                id: id.clone(),
                width: size.0,
                height: size.1,
                objects: vec![],
            });
            split.push_str(&id);
            split.push('\n');
        }
        write_annotations(&anns, &dir.join("annotations.txt")).unwrap();
        std::fs::write(dir.join("train.txt"), &split).unwrap();
        std::fs::write(dir.join("test.txt"), "").unwrap();
        std::fs::write(dir.join("proposals.txt"), "").unwrap();
        Manifest {
            categories: vec!["obj".into()],
            images_dir: "images".into(),
            annotations: "annotations.txt".into(),
            proposals: "proposals.txt".into(),
            train_split: "train.txt".into(),
            test_split: "test.txt".into(),
        }
        .save(&dir.join("manifest.json"))
        .unwrap();
        Dataset::load(&dir.join("manifest.json"), Split::Train).unwrap()
    }

    /// u8-quantized pseudo-texture, identical across images.
    fn texture(_: usize, x: u32, y: u32) -> [f64; 3] {
        let v = |k: u32| ((x.wrapping_mul(31) ^ y.wrapping_mul(17) ^ k) % 256) as f64 / 255.0;
        [v(0), v(97), v(193)]
    }

    #[test]
    fn identical_images_average_to_the_window_itself() {
        let dir = tempfile::tempdir().unwrap();
        let ds = disk_dataset(dir.path(), 3, (96, 96), texture);
        let bank = noise_bank(5, 2);
        let cfg = PyramidConfig {
            scales_per_octave: 1,
            upsample_small: false,
            ..Default::default()
        };

        // Top-1: the average IS the (rescaled) window, bitwise.
        let sel = collect_top_firings(&ds, &bank, &cfg, 1, None).unwrap();
        let (avgs, counts) = average_element_windows(&ds, &sel).unwrap();
        assert_eq!(counts, vec![1, 1]);
        let img = ds.load_image("img_00").unwrap();
        for e in 0..2 {
            let expect = window_crop(&img, &sel[e][0].firing.pixel_box).unwrap();
            assert_eq!(avgs[e].data(), expect.data(), "element {e}");
        }

        // Top-3 over three identical images: ties resolve to the same
        // window from each image, so the mean still equals the window.
        let sel = collect_top_firings(&ds, &bank, &cfg, 3, None).unwrap();
        let (avgs, counts) = average_element_windows(&ds, &sel).unwrap();
        assert_eq!(counts, vec![3, 3]);
        for e in 0..2 {
            let images: Vec<usize> = sel[e].iter().map(|s| s.image).collect();
            assert_eq!(images, vec![0, 1, 2], "tie-break walks images in order");
            let expect = window_crop(&img, &sel[e][0].firing.pixel_box).unwrap();
            let diff = avgs[e]
                .data()
                .iter()
                .zip(expect.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(diff < 1e-12, "element {e}: diff {diff}");
        }
    }

    #[test]
    fn top_k_rule_and_short_supply() {
        let dir = tempfile::tempdir().unwrap();
        // 128x128, one level (spo 1, no upsample): 14x14 lattice -> 12x12
        // interior -> 7x7 = 49 positions >= 10.
        let ds = disk_dataset(dir.path(), 1, (128, 128), texture);
        let bank = noise_bank(6, 1);
        let cfg = PyramidConfig {
            scales_per_octave: 1,
            upsample_small: false,
            ..Default::default()
        };
        let sel = collect_top_firings(&ds, &bank, &cfg, 10, None).unwrap();
        assert_eq!(sel[0].len(), 10, "exactly ten when supply allows");
        let (_, counts) = average_element_windows(&ds, &sel).unwrap();
        assert_eq!(counts[0], 10);
        // Scores arrive sorted descending.
        assert!(sel[0]
            .windows(2)
            .all(|w| w[0].firing.score >= w[1].firing.score));

        // 80x80 -> 10x10 lattice -> 8x8 interior -> 3x3 = 9 positions < 10.
        let dir2 = tempfile::tempdir().unwrap();
        let ds2 = disk_dataset(dir2.path(), 1, (80, 80), texture);
        let sel2 = collect_top_firings(&ds2, &bank, &cfg, 10, None).unwrap();
        assert_eq!(sel2[0].len(), 9, "averages what exists below ten");
    }

    #[test]
    fn visualize_writes_expected_files_in_bank_order() {
        let dir = tempfile::tempdir().unwrap();
        let ds = disk_dataset(dir.path(), 2, (96, 96), |i, x, y| {
            let t = texture(i, x, y);
            [t[0], (t[1] + i as f64 * 0.07).min(1.0), t[2]]
        });
        let bank = noise_bank(7, 5);
        let cfg = PyramidConfig {
            scales_per_octave: 1,
            upsample_small: false,
            ..Default::default()
        };
        let out = dir.path().join("viz");
        let report = visualize_elements(&ds, &bank, None, &cfg, 4, &out, None).unwrap();
        assert_eq!(report.windows_averaged, vec![4; 5]);
        assert_eq!(report.files_written, 6, "five elements plus the index");
        for i in 0..5 {
            assert!(out.join(element_image_name(i)).exists());
        }

        // The index sheet tiles bank order: element i sits at row i/cols,
        // col i%cols with the shared pitch.
        let sheet = RasterImage::<Scalar>::load(&out.join("index.png")).unwrap();
        let cols = 3; // ceil(sqrt(5))
        let pitch = AVERAGE_SIZE + SHEET_PAD;
        assert_eq!(sheet.width(), SHEET_PAD + cols as u32 * pitch);
        for (i, name) in (0..5).map(|i| (i, element_image_name(i))) {
            let tile = RasterImage::<Scalar>::load(&out.join(name)).unwrap();
            let ox = SHEET_PAD + (i % cols) as u32 * pitch;
            let oy = SHEET_PAD + (i / cols) as u32 * pitch;
            for (x, y) in [(0u32, 0u32), (31, 17), (63, 63)] {
                assert_eq!(sheet.get(ox + x, oy + y), tile.get(x, y), "element {i}");
            }
        }
    }

    #[test]
    fn montage_pads_with_gray_and_keeps_order() {
        let tiles: Vec<RasterImage<Scalar>> = (0..5)
            .map(|i| RasterImage::from_fn(8, 8, move |_, _| [i as f64 / 10.0; 3]))
            .collect();
        let sheet = montage(&tiles, 2, 2);
        assert_eq!(sheet.width(), 2 + 2 * 10);
        assert_eq!(sheet.height(), 2 + 3 * 10);
        for (i, tile) in tiles.iter().enumerate() {
            let ox = 2 + (i % 2) as u32 * 10;
            let oy = 2 + (i / 2) as u32 * 10;
            assert_eq!(sheet.get(ox, oy), tile.get(0, 0), "tile {i}");
        }
        // Padding and the sixth (empty) slot stay gray.
        assert_eq!(sheet.get(0, 0), [0.5; 3]);
        assert_eq!(sheet.get(13, 25), [0.5; 3]);
    }

    fn dummy_firing(v: f64) -> Firing<Scalar> {
        Firing {
            score: v,
            level: 0,
            r: 0,
            c: 0,
            pixel_box: BBox::new(0.0, 0.0, 10.0, 10.0),
        }
    }

    #[test]
    fn contribution_ranking_matches_enumeration_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..50 {
            let nr = if trial % 2 == 0 { 5 } else { 7 };
            let ne = rng.random_range(1..20usize);
            let n = ne * nr;
            let values: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let weights: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let firings: Vec<Option<Firing<Scalar>>> = (0..n)
                .map(|i| {
                    // Whole-box dims always fire; others drop out randomly.
                    if i % nr == 0 || rng.random_bool(0.7) {
                        Some(dummy_firing(values[i]))
                    } else {
                        None
                    }
                })
                .collect();
            let got = rank_contributions(&values, &firings, &weights, nr);

            // [DERIVED] oracle: enumerate every (element, dim) product,
            // pick each element's max over located dims (first dim wins
            // ties), then sort by (contribution desc, element asc).
            let mut oracle: Vec<(usize, f64, usize)> = (0..ne)
                .map(|e| {
                    let mut best_c = f64::NEG_INFINITY;
                    let mut best_dim = usize::MAX;
                    for ri in 0..nr {
                        let dim = e * nr + ri;
                        if firings[dim].is_none() {
                            continue;
                        }
                        let c = values[dim] * weights[dim];
                        if c > best_c {
                            best_c = c;
                            best_dim = dim;
                        }
                    }
                    (e, best_c, best_dim)
                })
                .collect();
            oracle.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            assert_eq!(got, oracle, "trial {trial}");
        }
    }

    #[test]
    fn blend_with_equal_weights_is_the_plain_mean() {
        let a: RasterImage<Scalar> = RasterImage::from_fn(4, 4, |_, _| [0.2, 0.4, 0.6]);
        let b: RasterImage<Scalar> = RasterImage::from_fn(4, 4, |_, _| [0.8, 0.0, 0.2]);
        let place_a = BBox::new(0.0, 0.0, 4.0, 4.0);
        let place_b = BBox::new(2.0, 0.0, 4.0, 4.0);
        let out = blend_transfers(
            8,
            4,
            &[(a.clone(), place_a, 0.3), (b.clone(), place_b, 0.3)],
        );
        // Overlap x in [2,4): mean of the two colors.
        let got = out.get(3, 1);
        for (g, want) in got.iter().zip([0.5, 0.2, 0.4]) {
            assert!((g - want).abs() < 1e-12, "{got:?}");
        }
        // Single-cover and uncovered pixels.
        for (g, want) in out.get(1, 1).iter().zip([0.2, 0.4, 0.6]) {
            assert!((g - want).abs() < 1e-12);
        }
        assert_eq!(out.get(7, 3), [0.5; 3], "beyond both transfers is gray");
    }

    #[test]
    fn single_transfer_reproduces_the_tile_at_its_location() {
        let tile: RasterImage<Scalar> =
            RasterImage::from_fn(6, 6, |x, y| [(x as f64) / 6.0, (y as f64) / 6.0, 0.3]);
        let out = blend_transfers(
            20,
            20,
            &[(tile.clone(), BBox::new(5.0, 7.0, 6.0, 6.0), 0.7)],
        );
        for y in 0..6 {
            for x in 0..6 {
                let got = out.get(5 + x, 7 + y);
                let want = tile.get(x, y);
                for (g, w) in got.iter().zip(want) {
                    assert!((g - w).abs() < 1e-12);
                }
            }
        }
        assert_eq!(out.get(0, 0), [0.5; 3]);
        // Non-positive weights contribute nothing.
        let none = blend_transfers(20, 20, &[(tile, BBox::new(5.0, 7.0, 6.0, 6.0), 0.0)]);
        assert_eq!(none.get(7, 9), [0.5; 3]);
    }

    #[test]
    fn average_store_reports_missing_averages() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = AverageStore::new(dir.path());
        let err = store.get(0).unwrap_err();
        assert!(matches!(err, Error::MissingAverages(_)), "{err}");

        let tile: RasterImage<Scalar> = RasterImage::from_fn(8, 8, |_, _| [0.1, 0.2, 0.3]);
        tile.save_png(&dir.path().join(element_image_name(0))).unwrap();
        assert_eq!(store.get(0).unwrap().width(), 8);
    }
}
