//! Built-in synthetic shapes corpus: three visually distinct object
//! classes (discs, blocks, wedges) planted over cluttered backgrounds,
//! with annotations, grid proposals, splits, and a manifest — everything
//! the pipeline needs, generated deterministically from one seed.
//!
//! Classes differ in contour (curved, square, diagonal) and in color
//! tendency, so both the gradient and color channels of the descriptor
//! carry signal. Backgrounds get soft large-scale shading, small
//! distractor shapes well below object scale, and pixel noise, so
//! detection is non-trivial but attainable at desk scale.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{
    grid_proposer, write_annotations, write_proposals, ImageAnnotation, Manifest,
    ObjectAnnotation,
};
use crate::error::Result;
use crate::geometry::{iou, BBox};
use crate::mining::mix_seed;
use crate::raster::RasterImage;
use crate::BBoxF;

/// Corpus categories in canonical order.
pub const CATEGORIES: [&str; 3] = ["disc", "block", "wedge"];

/// Square proposal-grid sizes matched to the object size range.
pub fn default_proposal_sizes() -> Vec<f64> {
    vec![64.0, 76.0, 91.0, 108.0, 128.0]
}

/// Generation knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub train_images: usize,
    pub test_images: usize,
    pub width: u32,
    pub height: u32,
    pub seed: u64,
    pub proposal_sizes: Vec<f64>,
    pub proposal_stride: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            train_images: 300,
            test_images: 100,
            width: 256,
            height: 256,
            seed: 0,
            proposal_sizes: default_proposal_sizes(),
            proposal_stride: 16.0,
        }
    }
}

/// Object side-length range in pixels.
const OBJ_MIN: f64 = 64.0;
const OBJ_MAX: f64 = 120.0;
/// Minimum distance from any object box to the image border.
const MARGIN: f64 = 8.0;

#[derive(Clone, Copy)]
struct Rgb([f64; 3]);

fn jitter_color(rng: &mut ChaCha8Rng, base: [f64; 3], spread: f64) -> Rgb {
    let mut c = base;
    for v in c.iter_mut() {
        *v = (*v + rng.random_range(-spread..spread)).clamp(0.0, 1.0);
    }
    Rgb(c)
}

fn class_color(rng: &mut ChaCha8Rng, class: usize) -> Rgb {
    let base = match class {
        0 => [0.78, 0.24, 0.20], // disc: reddish
        1 => [0.20, 0.30, 0.80], // block: bluish
        _ => [0.22, 0.68, 0.28], // wedge: greenish
    };
    jitter_color(rng, base, 0.14)
}

fn fill_ellipse(img: &mut RasterImage<f64>, cx: f64, cy: f64, rx: f64, ry: f64, color: Rgb) {
    let x0 = ((cx - rx).floor().max(0.0)) as u32;
    let x1 = ((cx + rx).ceil().min(img.width() as f64 - 1.0)) as u32;
    let y0 = ((cy - ry).floor().max(0.0)) as u32;
    let y1 = ((cy + ry).ceil().min(img.height() as f64 - 1.0)) as u32;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let dx = (x as f64 + 0.5 - cx) / rx;
            let dy = (y as f64 + 0.5 - cy) / ry;
            if dx * dx + dy * dy <= 1.0 {
                img.set(x, y, color.0);
            }
        }
    }
}

fn fill_rect(img: &mut RasterImage<f64>, b: &BBoxF, color: Rgb) {
    let x0 = b.x1.floor().max(0.0) as u32;
    let x1 = (b.x2().ceil().min(img.width() as f64) as u32).max(x0 + 1);
    let y0 = b.y1.floor().max(0.0) as u32;
    let y1 = (b.y2().ceil().min(img.height() as f64) as u32).max(y0 + 1);
    for y in y0..y1.min(img.height()) {
        for x in x0..x1.min(img.width()) {
            img.set(x, y, color.0);
        }
    }
}

/// Upward-pointing isosceles triangle spanning the box.
fn fill_triangle(img: &mut RasterImage<f64>, b: &BBoxF, color: Rgb) {
    let apex_x = b.x1 + b.w / 2.0;
    let x0 = b.x1.floor().max(0.0) as u32;
    let x1 = b.x2().ceil().min(img.width() as f64) as u32;
    let y0 = b.y1.floor().max(0.0) as u32;
    let y1 = b.y2().ceil().min(img.height() as f64) as u32;
    for y in y0..y1 {
        let t = ((y as f64 + 0.5 - b.y1) / b.h).clamp(0.0, 1.0);
        // Width of the triangle slab at this row grows linearly from 0
        // (apex) to the full base.
        let half = t * b.w / 2.0;
        for x in x0..x1 {
            if ((x as f64 + 0.5) - apex_x).abs() <= half {
                img.set(x, y, color.0);
            }
        }
    }
}

/// Draws one object of `class` whose bounding box is `b`. Each class
/// combines a distinct silhouette with distinct internal structure laid
/// out proportionally to the box, so instances share recurring local
/// patterns at matching pyramid scales: discs carry a concentric ring
/// and a bright core, blocks an inset frame with center cross bars,
/// wedges horizontal stripes and a bright tip. The internal detail is
/// what gives the miner several distinguishable templates per class
/// instead of one dominant outline.
fn draw_object(img: &mut RasterImage<f64>, class: usize, b: &BBoxF, color: Rgb) {
    let dark = Rgb(color.0.map(|v| (v * 0.42).clamp(0.0, 1.0)));
    let light = Rgb(color.0.map(|v| (v * 0.55 + 0.42).clamp(0.0, 1.0)));
    let x0 = b.x1.floor().max(0.0) as u32;
    let x1 = (b.x2().ceil().min(img.width() as f64) as u32).max(x0 + 1);
    let y0 = b.y1.floor().max(0.0) as u32;
    let y1 = (b.y2().ceil().min(img.height() as f64) as u32).max(y0 + 1);
    for y in y0..y1.min(img.height()) {
        for x in x0..x1.min(img.width()) {
            // Unit-box coordinates of the pixel center.
            let u = (x as f64 + 0.5 - b.x1) / b.w;
            let v = (y as f64 + 0.5 - b.y1) / b.h;
            let zone = match class {
                0 => {
                    let (dx, dy) = (2.0 * (u - 0.5), 2.0 * (v - 0.5));
                    let r2 = dx * dx + dy * dy;
                    if r2 > 1.0 {
                        None
                    } else if r2 <= 0.22 * 0.22 {
                        Some(light)
                    } else if (0.52 * 0.52..=0.68 * 0.68).contains(&r2) {
                        Some(dark)
                    } else {
                        Some(color)
                    }
                }
                1 => {
                    let edge = u.min(1.0 - u).min(v).min(1.0 - v);
                    if edge < 0.0 {
                        None
                    } else if (0.13..=0.21).contains(&edge) {
                        Some(dark)
                    } else if edge > 0.21 && ((u - 0.5).abs() <= 0.04 || (v - 0.5).abs() <= 0.04) {
                        Some(dark)
                    } else {
                        Some(color)
                    }
                }
                _ => {
                    // Upward triangle: slab half-width grows with v.
                    if (u - 0.5).abs() > v / 2.0 {
                        None
                    } else if v <= 0.2 {
                        Some(light)
                    } else if (0.40..=0.48).contains(&v)
                        || (0.60..=0.68).contains(&v)
                        || (0.80..=0.88).contains(&v)
                    {
                        Some(dark)
                    } else {
                        Some(color)
                    }
                }
            };
            if let Some(c) = zone {
                img.set(x, y, c.0);
            }
        }
    }
}

fn background(rng: &mut ChaCha8Rng, width: u32, height: u32) -> RasterImage<f64> {
    let base: [f64; 3] = [
        rng.random_range(0.38..0.62),
        rng.random_range(0.38..0.62),
        rng.random_range(0.38..0.62),
    ];
    // Soft large-scale shading: a few wide radial blobs.
    let blobs: Vec<(f64, f64, f64, [f64; 3])> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.0..width as f64),
                rng.random_range(0.0..height as f64),
                rng.random_range(80.0..220.0),
                [
                    rng.random_range(-0.12..0.12),
                    rng.random_range(-0.12..0.12),
                    rng.random_range(-0.12..0.12),
                ],
            )
        })
        .collect();
    let mut noise_rng = ChaCha8Rng::seed_from_u64(rng.random::<u64>());
    let mut img = RasterImage::from_fn(width, height, |x, y| {
        let mut px = base;
        for (bx, by, r, tint) in &blobs {
            let d2 = ((x as f64 - bx).powi(2) + (y as f64 - by).powi(2)) / (r * r);
            let w = (-d2).exp();
            for (p, t) in px.iter_mut().zip(tint) {
                *p += w * t;
            }
        }
        for p in px.iter_mut() {
            *p = (*p + noise_rng.random_range(-0.025..0.025)).clamp(0.0, 1.0);
        }
        px
    });
    // Small distractor shapes, all well below object scale.
    let n = rng.random_range(8..16);
    for _ in 0..n {
        let size = rng.random_range(6.0..26.0);
        let x = rng.random_range(0.0..(width as f64 - size));
        let y = rng.random_range(0.0..(height as f64 - size));
        let base = [
            rng.random_range(0.1..0.9),
            rng.random_range(0.1..0.9),
            rng.random_range(0.1..0.9),
        ];
        let color = jitter_color(rng, base, 0.05);
        let b = BBox::new(x, y, size, size * rng.random_range(0.4..1.6));
        match rng.random_range(0..3) {
            0 => fill_rect(&mut img, &b, color),
            1 => fill_ellipse(
                &mut img,
                b.x1 + b.w / 2.0,
                b.y1 + b.h / 2.0,
                b.w / 2.0,
                b.h / 2.0,
                color,
            ),
            _ => fill_triangle(&mut img, &b, color),
        }
    }
    img
}

/// Renders one image and its annotations. `first_class` pins the class
/// of the first planted object so every class is guaranteed presence in
/// any split of three or more images.
fn render_image(
    rng: &mut ChaCha8Rng,
    width: u32,
    height: u32,
    first_class: usize,
) -> (RasterImage<f64>, Vec<(usize, BBoxF)>) {
    let mut img = background(rng, width, height);
    let n_objects = rng.random_range(1..=2usize);
    let mut placed: Vec<(usize, BBoxF)> = Vec::new();
    for k in 0..n_objects {
        let class = if k == 0 {
            first_class
        } else {
            rng.random_range(0..CATEGORIES.len())
        };
        // Size with mild aspect jitter; rejection-sample a location that
        // stays clear of previously placed objects.
        for _try in 0..60 {
            let w = rng.random_range(OBJ_MIN..=OBJ_MAX);
            let h = (w * rng.random_range(0.9..1.1)).clamp(OBJ_MIN * 0.9, OBJ_MAX * 1.1);
            let x = rng.random_range(MARGIN..(width as f64 - MARGIN - w));
            let y = rng.random_range(MARGIN..(height as f64 - MARGIN - h));
            let b = BBox::new(x, y, w, h);
            if placed.iter().all(|(_, p)| iou(&b, p) < 0.05) {
                placed.push((class, b));
                break;
            }
        }
    }
    for (class, b) in &placed {
        let color = class_color(rng, *class);
        draw_object(&mut img, *class, b, color);
    }
    (img, placed)
}

/// Generates the full corpus under `dir`: images/, annotations,
/// proposals, split lists, and `manifest.json`. Returns the manifest
/// path.
pub fn generate_corpus(dir: &Path, cfg: &SyntheticConfig) -> Result<std::path::PathBuf> {
    let images_dir = dir.join("images");
    std::fs::create_dir_all(&images_dir)?;

    let mut annotations: Vec<ImageAnnotation> = Vec::new();
    let mut proposals: Vec<(String, BBoxF)> = Vec::new();
    let mut train_ids = Vec::new();
    let mut test_ids = Vec::new();

    let splits = [
        ("train", cfg.train_images, 31u64),
        ("test", cfg.test_images, 32u64),
    ];
    for (tag, count, stream) in splits {
        for i in 0..count {
            let id = format!("{tag}_{i:04}");
            let mut rng =
                ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, &[stream, i as u64]));
            let (img, objects) =
                render_image(&mut rng, cfg.width, cfg.height, i % CATEGORIES.len());
            img.save_png(&images_dir.join(format!("{id}.png")))?;
            annotations.push(ImageAnnotation {
                id: id.clone(),
                width: cfg.width,
                height: cfg.height,
                objects: objects
                    .iter()
                    .map(|(class, b)| ObjectAnnotation {
                        category: CATEGORIES[*class].to_string(),
                        bbox: *b,
                        difficult: false,
                    })
                    .collect(),
            });
            for p in grid_proposer::<f64>(
                cfg.width,
                cfg.height,
                &cfg.proposal_sizes,
                cfg.proposal_stride,
            ) {
                proposals.push((id.clone(), p));
            }
            match tag {
                "train" => train_ids.push(id),
                _ => test_ids.push(id),
            }
        }
    }

    write_annotations(&annotations, &dir.join("annotations.txt"))?;
    write_proposals(&proposals, &dir.join("proposals.txt"))?;
    std::fs::write(dir.join("train.txt"), train_ids.join("\n") + "\n")?;
    std::fs::write(dir.join("test.txt"), test_ids.join("\n") + "\n")?;
    let manifest = Manifest {
        categories: CATEGORIES.iter().map(|s| s.to_string()).collect(),
        images_dir: "images".into(),
        annotations: "annotations.txt".into(),
        proposals: "proposals.txt".into(),
        train_split: "train.txt".into(),
        test_split: "test.txt".into(),
    };
    let path = dir.join("manifest.json");
    manifest.save(&path)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Dataset, Split};

    fn small_cfg() -> SyntheticConfig {
        SyntheticConfig {
            train_images: 6,
            test_images: 2,
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn generation_is_byte_deterministic() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        generate_corpus(d1.path(), &small_cfg()).unwrap();
        generate_corpus(d2.path(), &small_cfg()).unwrap();
        for f in ["annotations.txt", "proposals.txt", "train.txt", "manifest.json"] {
            assert_eq!(
                std::fs::read(d1.path().join(f)).unwrap(),
                std::fs::read(d2.path().join(f)).unwrap(),
                "{f}"
            );
        }
        assert_eq!(
            std::fs::read(d1.path().join("images/train_0000.png")).unwrap(),
            std::fs::read(d2.path().join("images/train_0000.png")).unwrap()
        );
        // A different seed changes the pixels.
        let d3 = tempfile::tempdir().unwrap();
        generate_corpus(
            d3.path(),
            &SyntheticConfig {
                seed: 1,
                ..small_cfg()
            },
        )
        .unwrap();
        assert_ne!(
            std::fs::read(d1.path().join("images/train_0000.png")).unwrap(),
            std::fs::read(d3.path().join("images/train_0000.png")).unwrap()
        );
    }

    #[test]
    fn corpus_loads_and_respects_its_own_contract() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate_corpus(dir.path(), &small_cfg()).unwrap();
        let train = Dataset::load(&manifest, Split::Train).unwrap();
        let test = Dataset::load(&manifest, Split::Test).unwrap();
        assert_eq!(train.images.len(), 6);
        assert_eq!(test.images.len(), 2);
        let mut seen = [false; 3];
        for ds in [&train, &test] {
            for ann in &ds.images {
                assert!(!ann.objects.is_empty() && ann.objects.len() <= 2);
                assert!(!ds.proposals_of(&ann.id).unwrap().is_empty());
                for o in &ann.objects {
                    let b = &o.bbox;
                    assert!(b.x1 >= MARGIN && b.y1 >= MARGIN);
                    assert!(b.x2() <= 256.0 - MARGIN && b.y2() <= 256.0 - MARGIN);
                    assert!(b.w >= OBJ_MIN * 0.9 - 1e-9 && b.w <= OBJ_MAX * 1.1 + 1e-9);
                    seen[CATEGORIES.iter().position(|c| *c == o.category).unwrap()] = true;
                }
            }
        }
        assert_eq!(seen, [true; 3], "every class appears");
        // Images decode at the declared size.
        let img = train.load_image(&train.images[0].id).unwrap();
        assert_eq!((img.width(), img.height()), (256, 256));
    }

    #[test]
    fn grid_proposals_cover_every_object() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate_corpus(dir.path(), &small_cfg()).unwrap();
        let train = Dataset::load(&manifest, Split::Train).unwrap();
        let mut worst: f64 = 1.0;
        for ann in &train.images {
            let props = train.proposals_of(&ann.id).unwrap();
            for o in &ann.objects {
                let best = props
                    .iter()
                    .map(|p| iou(p, &o.bbox))
                    .fold(0.0f64, f64::max);
                worst = worst.min(best);
            }
        }
        assert!(
            worst >= 0.5,
            "an object slipped through the proposal grid: best IoU {worst}"
        );
    }
}
