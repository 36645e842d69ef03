//! Proposal ingestion and a deterministic fallback proposer.
//!
//! The toolkit does not segment images itself; proposals normally come
//! from an external tool via a text file ingested here. The grid
//! proposer exists for tests and for datasets that arrive without any
//! proposal file: it tiles each image with a multi-scale square lattice.

use std::collections::HashMap;
use std::path::Path;

use mldetect_core::dataset::read_proposals;
use mldetect_core::{BBoxF, Result};

/// Read a proposals file (one `image_id x1 y1 w h` line per box),
/// preserving in-file order per image. Malformed lines error with their
/// line number; an empty file is legal but warned about, since a
/// detector without proposals can never fire.
pub fn ingest_proposals(path: &Path) -> Result<HashMap<String, Vec<BBoxF>>> {
    let map = read_proposals(path)?;
    if map.is_empty() {
        eprintln!(
            "warning: proposals file {} lists no boxes",
            path.display()
        );
    }
    Ok(map)
}

/// Deterministic multi-scale lattice of square boxes, fully inside the
/// image. Order: sizes in the given order, then rows top-to-bottom,
/// then columns left-to-right; positions are multiples of `stride`.
/// Sizes larger than the image contribute nothing.
pub fn grid_proposer(width: u32, height: u32, stride: f64, sizes: &[f64]) -> Vec<BBoxF> {
    assert!(stride > 0.0, "stride must be positive");
    let (w, h) = (width as f64, height as f64);
    let mut boxes = Vec::new();
    for &s in sizes {
        if s <= 0.0 || s > w || s > h {
            continue;
        }
        let mut y = 0.0;
        while y + s <= h {
            let mut x = 0.0;
            while x + s <= w {
                boxes.push(BBoxF::new(x, y, s, s));
                x += stride;
            }
            y += stride;
        }
    }
    boxes
}
