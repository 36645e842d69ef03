//! Dataset plumbing: the manifest file, ground-truth annotations, proposal
//! lists, and split handling.
//!
//! Annotations are line-delimited text, one record per image:
//!
//! ```text
//! image_id width height [category x1 y1 w h difficult]...
//! ```
//!
//! Proposals are one box per line: `image_id x1 y1 w h`. The manifest is a
//! small JSON file tying the pieces together; all paths are resolved
//! relative to its directory.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::raster::RasterImage;
use crate::scalar::Real;
use crate::{BBoxF, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectAnnotation {
    pub category: String,
    pub bbox: BBoxF,
    pub difficult: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageAnnotation {
    pub id: String,
    pub width: u32,
    pub height: u32,
    pub objects: Vec<ObjectAnnotation>,
}

impl ImageAnnotation {
    /// Boxes of one category (difficult ones included; callers filter).
    pub fn boxes_of<'a>(
        &'a self,
        category: &'a str,
    ) -> impl Iterator<Item = &'a ObjectAnnotation> + 'a {
        self.objects.iter().filter(move |o| o.category == category)
    }
}

pub fn write_annotations(images: &[ImageAnnotation], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for img in images {
        write!(w, "{} {} {}", img.id, img.width, img.height)?;
        for o in &img.objects {
            write!(
                w,
                " {} {} {} {} {} {}",
                o.category,
                o.bbox.x1,
                o.bbox.y1,
                o.bbox.w,
                o.bbox.h,
                if o.difficult { 1 } else { 0 }
            )?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_annotations(path: &Path) -> Result<Vec<ImageAnnotation>> {
    let parse_err = |line: usize, msg: &str| Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.to_string(),
    };
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (ln, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let ln = ln + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let mut tok = line.split_whitespace();
        let id = tok
            .next()
            .ok_or_else(|| parse_err(ln, "missing image id"))?
            .to_string();
        let width: u32 = tok
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| parse_err(ln, "bad width"))?;
        let height: u32 = tok
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| parse_err(ln, "bad height"))?;
        let rest: Vec<&str> = tok.collect();
        if rest.len() % 6 != 0 {
            return Err(parse_err(ln, "object fields must come in groups of 6"));
        }
        let mut objects = Vec::with_capacity(rest.len() / 6);
        for chunk in rest.chunks_exact(6) {
            let nums: Vec<f64> = chunk[1..5]
                .iter()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| parse_err(ln, "bad box coordinate"))?;
            let difficult = match chunk[5] {
                "0" => false,
                "1" => true,
                _ => return Err(parse_err(ln, "difficult flag must be 0 or 1")),
            };
            objects.push(ObjectAnnotation {
                category: chunk[0].to_string(),
                bbox: BBox::new(nums[0], nums[1], nums[2], nums[3]),
                difficult,
            });
        }
        out.push(ImageAnnotation {
            id,
            width,
            height,
            objects,
        });
    }
    Ok(out)
}

pub fn write_proposals(proposals: &[(String, BBoxF)], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for (id, b) in proposals {
        writeln!(w, "{} {} {} {} {}", id, b.x1, b.y1, b.w, b.h)?;
    }
    w.flush()?;
    Ok(())
}

/// Read proposals keyed by image id, preserving in-file order per image.
pub fn read_proposals(path: &Path) -> Result<HashMap<String, Vec<BBoxF>>> {
    let file = std::fs::File::open(path)?;
    let mut out: HashMap<String, Vec<BBoxF>> = HashMap::new();
    for (ln, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let tok: Vec<&str> = line.split_whitespace().collect();
        let bad = |msg: &str| Error::Parse {
            path: path.display().to_string(),
            line: ln + 1,
            msg: msg.to_string(),
        };
        if tok.len() != 5 {
            return Err(bad("expected: image_id x1 y1 w h"));
        }
        let nums: Vec<f64> = tok[1..]
            .iter()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad("bad box coordinate"))?;
        out.entry(tok[0].to_string())
            .or_default()
            .push(BBox::new(nums[0], nums[1], nums[2], nums[3]));
    }
    Ok(out)
}

/// On-disk manifest describing a dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub categories: Vec<String>,
    pub images_dir: String,
    pub annotations: String,
    pub proposals: String,
    pub train_split: String,
    pub test_split: String,
}

impl Manifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Manifest> {
        let file = std::fs::File::open(path)?;
        Ok(serde_json::from_reader(BufReader::new(file))?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// A loaded dataset split: annotations in split order plus proposals.
#[derive(Debug)]
pub struct Dataset {
    pub categories: Vec<String>,
    pub images: Vec<ImageAnnotation>,
    pub proposals: HashMap<String, Vec<BBoxF>>,
    images_dir: PathBuf,
}

impl Dataset {
    /// Load the manifest's `split` relative to the manifest location.
    /// Validates that annotation categories appear in the category table
    /// and that split ids have annotation records.
    pub fn load(manifest_path: &Path, split: Split) -> Result<Dataset> {
        let manifest = Manifest::load(manifest_path)?;
        let root = manifest_path.parent().unwrap_or(Path::new("."));
        let annotations = read_annotations(&root.join(&manifest.annotations))?;
        let proposals = read_proposals(&root.join(&manifest.proposals))?;
        let split_file = match split {
            Split::Train => &manifest.train_split,
            Split::Test => &manifest.test_split,
        };
        let split_path = root.join(split_file);
        let ids: Vec<String> = BufReader::new(std::fs::File::open(&split_path)?)
            .lines()
            .collect::<std::io::Result<Vec<_>>>()?
            .into_iter()
            .map(|l| l.trim().to_string())
            .filter(|l| !l.is_empty())
            .collect();

        let by_id: HashMap<&str, &ImageAnnotation> =
            annotations.iter().map(|a| (a.id.as_str(), a)).collect();
        let mut images = Vec::with_capacity(ids.len());
        for id in &ids {
            let ann = by_id
                .get(id.as_str())
                .ok_or_else(|| Error::UnknownImageId(id.clone()))?;
            for o in &ann.objects {
                if !manifest.categories.contains(&o.category) {
                    return Err(Error::UnknownCategory(o.category.clone()));
                }
            }
            images.push((*ann).clone());
        }
        Ok(Dataset {
            categories: manifest.categories,
            images,
            proposals,
            images_dir: root.join(&manifest.images_dir),
        })
    }

    pub fn load_image(&self, id: &str) -> Result<RasterImage<Scalar>> {
        RasterImage::load(&self.images_dir.join(format!("{id}.png")))
    }

    /// Proposals of one image; an image with no proposal records is an
    /// ingestion error (detection and negative sampling need them).
    pub fn proposals_of(&self, id: &str) -> Result<&[BBoxF]> {
        match self.proposals.get(id) {
            Some(p) if !p.is_empty() => Ok(p),
            _ => Err(Error::MissingProposals(id.to_string())),
        }
    }

    pub fn category_index(&self, name: &str) -> Result<usize> {
        self.categories
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::UnknownCategory(name.to_string()))
    }
}

/// Sliding-grid proposal generator: square windows at the given sizes,
/// stepped by `stride`, clipped to the image. Windows whose clipped form
/// would lose more than half their area are skipped.
pub fn grid_proposer<T: Real>(
    width: u32,
    height: u32,
    sizes: &[f64],
    stride: f64,
) -> Vec<BBox<T>> {
    let mut out = Vec::new();
    let (wf, hf) = (width as f64, height as f64);
    for &size in sizes {
        if size > wf.max(hf) {
            continue;
        }
        let mut y = 0.0;
        while y + size / 2.0 <= hf {
            let mut x = 0.0;
            while x + size / 2.0 <= wf {
                let b = BBox::new(x, y, size, size);
                let clipped = crate::geometry::clip(&b, wf, hf);
                if let Ok(c) = clipped {
                    if c.area() >= 0.5 * b.area() {
                        out.push(c.cast::<T>());
                    }
                }
                x += stride;
            }
            y += stride;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_annotations() -> Vec<ImageAnnotation> {
        vec![
            ImageAnnotation {
                id: "img_000".into(),
                width: 320,
                height: 240,
                objects: vec![
                    ObjectAnnotation {
                        category: "circle".into(),
                        bbox: BBox::new(10.0, 20.0, 80.0, 80.0),
                        difficult: false,
                    },
                    ObjectAnnotation {
                        category: "square".into(),
                        bbox: BBox::new(150.0, 60.0, 70.5, 70.0),
                        difficult: true,
                    },
                ],
            },
            ImageAnnotation {
                id: "img_001".into(),
                width: 320,
                height: 240,
                objects: vec![],
            },
        ]
    }

    #[test]
    fn annotations_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ann.txt");
        let anns = sample_annotations();
        write_annotations(&anns, &path).unwrap();
        let back = read_annotations(&path).unwrap();
        assert_eq!(back, anns);
    }

    #[test]
    fn annotations_reject_malformed_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.txt");
        std::fs::write(&path, "img_0 320 240 circle 1 2 3\n").unwrap();
        let err = read_annotations(&path).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");
    }

    #[test]
    fn proposals_round_trip_preserves_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("props.txt");
        let props = vec![
            ("a".to_string(), BBox::new(0.0, 0.0, 10.0, 10.0)),
            ("b".to_string(), BBox::new(5.0, 5.0, 20.0, 20.0)),
            ("a".to_string(), BBox::new(8.0, 0.0, 10.0, 12.0)),
        ];
        write_proposals(&props, &path).unwrap();
        let m = read_proposals(&path).unwrap();
        assert_eq!(m["a"].len(), 2);
        assert_eq!(m["a"][1], BBox::new(8.0, 0.0, 10.0, 12.0));
        assert_eq!(m["b"].len(), 1);
    }

    #[test]
    fn dataset_load_validates_and_orders() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("images")).unwrap();
        write_annotations(&sample_annotations(), &dir.path().join("ann.txt")).unwrap();
        write_proposals(
            &[("img_000".to_string(), BBox::new(0.0, 0.0, 64.0, 64.0))],
            &dir.path().join("props.txt"),
        )
        .unwrap();
        std::fs::write(dir.path().join("train.txt"), "img_001\nimg_000\n").unwrap();
        std::fs::write(dir.path().join("test.txt"), "").unwrap();
        let manifest = Manifest {
            categories: vec!["circle".into(), "square".into()],
            images_dir: "images".into(),
            annotations: "ann.txt".into(),
            proposals: "props.txt".into(),
            train_split: "train.txt".into(),
            test_split: "test.txt".into(),
        };
        let mpath = dir.path().join("manifest.json");
        manifest.save(&mpath).unwrap();

        let ds = Dataset::load(&mpath, Split::Train).unwrap();
        // Split order, not annotation order.
        assert_eq!(ds.images[0].id, "img_001");
        assert_eq!(ds.images[1].id, "img_000");
        assert!(ds.proposals_of("img_000").is_ok());
        assert!(matches!(
            ds.proposals_of("img_001"),
            Err(Error::MissingProposals(_))
        ));

        // Unknown category in annotations must be rejected.
        let manifest_bad = Manifest {
            categories: vec!["circle".into()],
            ..manifest
        };
        let mpath2 = dir.path().join("manifest2.json");
        manifest_bad.save(&mpath2).unwrap();
        assert!(matches!(
            Dataset::load(&mpath2, Split::Train),
            Err(Error::UnknownCategory(_))
        ));
    }

    #[test]
    fn grid_proposer_covers_image() {
        let props: Vec<BBoxF> = grid_proposer(128, 96, &[64.0], 16.0);
        assert!(!props.is_empty());
        for p in &props {
            assert!(p.x1 >= 0.0 && p.y1 >= 0.0);
            assert!(p.x2() <= 128.0 && p.y2() <= 96.0);
        }
        // A centered object should have a high-IoU proposal.
        let gt = BBox::new(30.0, 20.0, 64.0, 64.0);
        let best = props
            .iter()
            .map(|p| crate::geometry::iou(p, &gt))
            .fold(0.0f64, f64::max);
        assert!(best > 0.6, "best IoU {best}");
    }
}
