//! Mid-level elements: 6x6x33 linear templates with a bias, organized into
//! a per-category bank, plus the response-map scorer used everywhere a
//! template meets a feature grid.
//!
//! Bank file format (`MLEB1`, little-endian): magic, category table,
//! descriptor parameters, element count, then per-element records of
//! (id: u64, category index: u16, kind byte, bias: f64, 1188 x f32
//! weights). A human-readable `<path>.manifest` sidecar lists ids,
//! categories, kinds and mining scores.

use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::featgrid::{DescriptorConfig, FeatureGrid, CHANNELS, PATCH_DIM, TEMPLATE_CELLS};
use crate::scalar::Real;

pub const BANK_MAGIC: &[u8; 5] = b"MLEB1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementKind {
    Discriminative,
    Localization,
}

impl ElementKind {
    pub fn as_byte(self) -> u8 {
        match self {
            ElementKind::Discriminative => 0,
            ElementKind::Localization => 1,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(ElementKind::Discriminative),
            1 => Some(ElementKind::Localization),
            _ => None,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            ElementKind::Discriminative => "discriminative",
            ElementKind::Localization => "localization",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Element<T> {
    pub id: u64,
    /// Index into the bank's category table.
    pub category: usize,
    pub kind: ElementKind,
    pub bias: f64,
    /// 6x6x33 template, row-major cells, channel-minor.
    pub weights: Vec<T>,
    /// Density-ratio score assigned at mining time; not stored in the
    /// binary bank (the manifest sidecar carries it).
    pub mining_score: Option<f64>,
}

impl<T: Real> Element<T> {
    /// Horizontally mirrored twin: responds to flipped inputs exactly as
    /// this element responds to the originals.
    pub fn flipped(&self) -> Self {
        Element {
            id: self.id,
            category: self.category,
            kind: self.kind,
            bias: self.bias,
            weights: crate::featgrid::flip_patch(&self.weights),
            mining_score: self.mining_score,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ElementBank<T> {
    pub categories: Vec<String>,
    /// Grouped by category (table order), discriminative before
    /// localization, descending mining score within each group.
    pub elements: Vec<Element<T>>,
    pub descriptor: DescriptorConfig,
}

impl<T: Real> ElementBank<T> {
    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn category_index(&self, name: &str) -> Option<usize> {
        self.categories.iter().position(|c| c == name)
    }

    /// Indices of this bank's elements belonging to a category.
    pub fn elements_of(&self, category: usize) -> Vec<usize> {
        (0..self.elements.len())
            .filter(|&i| self.elements[i].category == category)
            .collect()
    }

    /// Check the grouped-and-sorted ordering invariant: grouped by
    /// category, discriminative before localization, descending mining
    /// score (ties by id) within each group.
    pub fn ordering_is_canonical(&self) -> bool {
        self.elements.windows(2).all(|w| {
            let (a, b) = (&w[0], &w[1]);
            let ka = (a.category, a.kind.as_byte());
            let kb = (b.category, b.kind.as_byte());
            if ka != kb {
                return ka < kb;
            }
            let sa = a.mining_score.unwrap_or(0.0);
            let sb = b.mining_score.unwrap_or(0.0);
            sa > sb || (sa == sb && a.id <= b.id)
        })
    }
}

/// Dense map of template responses over a grid's valid placements.
#[derive(Debug, Clone)]
pub struct ResponseMap<T> {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<T>,
}

impl<T: Real> ResponseMap<T> {
    #[inline]
    pub fn at(&self, r: usize, c: usize) -> T {
        self.values[r * self.cols + c]
    }
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = T::zero();
    for (x, y) in a.iter().zip(b) {
        acc = acc + *x * *y;
    }
    acc
}

/// Score one template at every valid position of a grid (valid cross
/// correlation plus bias). Preconditions: grid at least 6x6 cells.
pub fn score_grid<T: Real>(weights: &[T], bias: f64, grid: &FeatureGrid<T>) -> ResponseMap<T> {
    assert_eq!(weights.len(), PATCH_DIM);
    assert!(grid.rows() >= TEMPLATE_CELLS && grid.cols() >= TEMPLATE_CELLS);
    let rows = grid.rows() - TEMPLATE_CELLS + 1;
    let cols = grid.cols() - TEMPLATE_CELLS + 1;
    let mut values = vec![T::zero(); rows * cols];
    score_into(weights, bias, grid, &mut values);
    ResponseMap { rows, cols, values }
}

fn score_into<T: Real>(weights: &[T], bias: f64, grid: &FeatureGrid<T>, out: &mut [T]) {
    let rows = grid.rows() - TEMPLATE_CELLS + 1;
    let cols = grid.cols() - TEMPLATE_CELLS + 1;
    let row_len = TEMPLATE_CELLS * CHANNELS;
    let gvals = grid.values();
    let b = T::of(bias);
    for r in 0..rows {
        for c in 0..cols {
            let mut acc = T::zero();
            for wr in 0..TEMPLATE_CELLS {
                let gstart = ((r + wr) * grid.cols() + c) * CHANNELS;
                acc = acc + dot(&weights[wr * row_len..(wr + 1) * row_len], &gvals[gstart..gstart + row_len]);
            }
            out[r * cols + c] = acc + b;
        }
    }
}

/// Response planes for a whole set of elements over one grid, element
/// order preserved. Parallelized per element; each plane is bitwise
/// identical to the corresponding [`score_grid`] call.
pub fn score_bank<T: Real>(elements: &[Element<T>], grid: &FeatureGrid<T>) -> Vec<ResponseMap<T>> {
    elements
        .par_iter()
        .map(|e| score_grid(&e.weights, e.bias, grid))
        .collect()
}

/// Near-duplicate filter for ranked candidates. `firings[i]` holds the
/// candidate's top-k firing patch ids (any consistent id space). Walking
/// in rank order, a candidate is dropped when, against any kept one,
/// weight cosine exceeds `max_cosine` or firing-set Jaccard exceeds
/// `max_firing_overlap`. Returns kept indices in rank order.
pub fn dedupe_candidates<T: Real>(
    weights: &[Vec<T>],
    firings: &[Vec<u32>],
    max_cosine: f64,
    max_firing_overlap: f64,
) -> Vec<usize> {
    assert_eq!(weights.len(), firings.len());
    let norms: Vec<f64> = weights
        .iter()
        .map(|w| w.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt())
        .collect();
    let mut kept: Vec<usize> = Vec::new();
    'cand: for i in 0..weights.len() {
        for &j in &kept {
            let cos = cosine(&weights[i], &weights[j], norms[i], norms[j]);
            if cos > max_cosine {
                continue 'cand;
            }
            if jaccard(&firings[i], &firings[j]) > max_firing_overlap {
                continue 'cand;
            }
        }
        kept.push(i);
    }
    kept
}

fn cosine<T: Real>(a: &[T], b: &[T], na: f64, nb: f64) -> f64 {
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let d: f64 = a.iter().zip(b).map(|(x, y)| x.as_f64() * y.as_f64()).sum();
    d / (na * nb)
}

/// Jaccard of two sorted id sets.
fn jaccard(a: &[u32], b: &[u32]) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 0.0;
    }
    let mut i = 0;
    let mut j = 0;
    let mut inter = 0usize;
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    inter as f64 / (a.len() + b.len() - inter) as f64
}

// ---------------------------------------------------------------------
// Bank file I/O
// ---------------------------------------------------------------------

pub fn write_bank<T: Real>(bank: &ElementBank<T>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(BANK_MAGIC)?;
    w.write_all(&(bank.categories.len() as u32).to_le_bytes())?;
    for name in &bank.categories {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u16).to_le_bytes())?;
        w.write_all(bytes)?;
    }
    w.write_all(&bank.descriptor.cell_size.to_le_bytes())?;
    w.write_all(&bank.descriptor.truncation.to_le_bytes())?;
    w.write_all(&(CHANNELS as u32).to_le_bytes())?;
    w.write_all(&(TEMPLATE_CELLS as u32).to_le_bytes())?;
    w.write_all(&(bank.elements.len() as u32).to_le_bytes())?;
    for e in &bank.elements {
        w.write_all(&e.id.to_le_bytes())?;
        w.write_all(&(e.category as u16).to_le_bytes())?;
        w.write_all(&[e.kind.as_byte()])?;
        w.write_all(&e.bias.to_le_bytes())?;
        for v in &e.weights {
            w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
        }
    }
    w.flush()?;

    // Human-readable companion.
    let manifest = path.with_extension(match path.extension() {
        Some(ext) => format!("{}.manifest", ext.to_string_lossy()),
        None => "manifest".to_string(),
    });
    let mut m = BufWriter::new(std::fs::File::create(manifest)?);
    writeln!(m, "# element bank manifest: id  category  kind  mining_score")?;
    for e in &bank.elements {
        writeln!(
            m,
            "{}\t{}\t{}\t{}",
            e.id,
            bank.categories[e.category],
            e.kind.label(),
            e.mining_score.map(|s| format!("{s:.6}")).unwrap_or_else(|| "-".into()),
        )?;
    }
    m.flush()?;
    Ok(())
}

pub(crate) struct Reader<'a> {
    pub(crate) buf: &'a [u8],
    pub(crate) pos: usize,
    pub(crate) path: &'a Path,
    pub(crate) kind: &'static str,
}

impl<'a> Reader<'a> {
    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::malformed(self.kind, self.path, "truncated file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::malformed(self.kind, self.path, "invalid UTF-8 name"))
    }
}

pub fn read_bank<T: Real>(path: &Path) -> Result<ElementBank<T>> {
    let buf = std::fs::read(path)?;
    let mut r = Reader {
        buf: &buf,
        pos: 0,
        path,
        kind: "element bank",
    };
    if r.take(5)? != BANK_MAGIC {
        return Err(Error::malformed("element bank", path, "bad magic"));
    }
    let n_cat = r.u32()? as usize;
    let mut categories = Vec::with_capacity(n_cat);
    for _ in 0..n_cat {
        let len = r.u16()? as usize;
        categories.push(r.string(len)?);
    }
    let cell_size = r.u32()?;
    let truncation = r.f64()?;
    let channels = r.u32()? as usize;
    let template = r.u32()? as usize;
    if channels != CHANNELS || template != TEMPLATE_CELLS {
        return Err(Error::malformed(
            "element bank",
            path,
            format!("descriptor shape {template}x{template}x{channels} unsupported"),
        ));
    }
    let n_elem = r.u32()? as usize;
    let mut elements = Vec::with_capacity(n_elem);
    for _ in 0..n_elem {
        let id = r.u64()?;
        let category = r.u16()? as usize;
        if category >= categories.len() {
            return Err(Error::malformed("element bank", path, "category index out of range"));
        }
        let kind = ElementKind::from_byte(r.u8()?)
            .ok_or_else(|| Error::malformed("element bank", path, "bad kind byte"))?;
        let bias = r.f64()?;
        let mut weights = Vec::with_capacity(PATCH_DIM);
        for _ in 0..PATCH_DIM {
            weights.push(T::of(r.f32()? as f64));
        }
        elements.push(Element {
            id,
            category,
            kind,
            bias,
            weights,
            mining_score: None,
        });
    }
    if r.pos != buf.len() {
        return Err(Error::malformed("element bank", path, "trailing bytes"));
    }
    Ok(ElementBank {
        categories,
        elements,
        descriptor: DescriptorConfig {
            cell_size,
            truncation,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featgrid::compute_feature_grid;
    use crate::raster::RasterImage;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rand_element(rng: &mut impl Rng, id: u64, category: usize) -> Element<f64> {
        Element {
            id,
            category,
            kind: ElementKind::Discriminative,
            bias: rng.random_range(-1.0..1.0),
            weights: (0..PATCH_DIM).map(|_| rng.random_range(-1.0..1.0)).collect(),
            mining_score: Some(rng.random::<f64>()),
        }
    }

    fn rand_grid(seed: u64, rows: usize, cols: usize) -> FeatureGrid<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = RasterImage::from_fn(
            (cols as u32 + 2) * 8,
            (rows as u32 + 2) * 8,
            |_, _| [rng.random(), rng.random(), rng.random()],
        );
        let g = compute_feature_grid(&img, &DescriptorConfig::default()).unwrap();
        assert_eq!((g.rows(), g.cols()), (rows, cols));
        g
    }

    #[test]
    fn score_map_dimensions() {
        let grid = rand_grid(1, 10, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let e = rand_element(&mut rng, 0, 0);
        let map = score_grid(&e.weights, e.bias, &grid);
        assert_eq!((map.rows, map.cols), (5, 3));
    }

    #[test]
    fn exact_template_match_peaks_at_its_window() {
        let grid = rand_grid(3, 9, 9);
        // Template equal to the window at (2, 1): by Cauchy-Schwarz its
        // normalized response peaks exactly there.
        let w = grid.copy_window(2, 1);
        let norm: f64 = w.iter().map(|v| v * v).sum();
        let weights: Vec<f64> = w.iter().map(|v| v / norm.max(1e-12)).collect();
        let map = score_grid(&weights, 0.0, &grid);
        let mut best = (0, 0);
        let mut best_v = f64::NEG_INFINITY;
        for r in 0..map.rows {
            for c in 0..map.cols {
                if map.at(r, c) > best_v {
                    best_v = map.at(r, c);
                    best = (r, c);
                }
            }
        }
        assert_eq!(best, (2, 1));
        assert!((best_v - 1.0).abs() < 1e-9);
    }

    #[test]
    fn bias_shifts_scores_uniformly() {
        let grid = rand_grid(4, 8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let e = rand_element(&mut rng, 0, 0);
        let m0 = score_grid(&e.weights, 0.0, &grid);
        let m1 = score_grid(&e.weights, 2.5, &grid);
        for (a, b) in m0.values.iter().zip(&m1.values) {
            assert!((b - a - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn score_bank_matches_individual_scoring() {
        let grid = rand_grid(6, 9, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let elements: Vec<Element<f64>> = (0..5).map(|i| rand_element(&mut rng, i, 0)).collect();
        let stack = score_bank(&elements, &grid);
        for (e, plane) in elements.iter().zip(&stack) {
            let solo = score_grid(&e.weights, e.bias, &grid);
            assert_eq!(solo.values, plane.values, "planes must be bitwise equal");
        }
    }

    #[test]
    fn flipped_element_scores_flipped_grid_identically() {
        let grid = rand_grid(8, 8, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let e = rand_element(&mut rng, 0, 0);
        let m = score_grid(&e.weights, e.bias, &grid);
        let ef = e.flipped();
        let mf = score_grid(&ef.weights, ef.bias, &grid.flip_horizontal());
        // Position (r, c) corresponds to mirrored position (r, cols-1-c).
        for r in 0..m.rows {
            for c in 0..m.cols {
                let diff = (m.at(r, c) - mf.at(r, m.cols - 1 - c)).abs();
                assert!(diff < 1e-9, "({r},{c}) diff {diff}");
            }
        }
    }

    #[test]
    fn dedupe_drops_clones_and_overlaps() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a: Vec<f64> = (0..PATCH_DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
        let scaled: Vec<f64> = a.iter().map(|v| v * 3.0).collect(); // cosine 1 with a
        let mut b: Vec<f64> = (0..PATCH_DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
        // Make b distinctly non-parallel to a.
        b[0] += 10.0;
        let weights = vec![a, scaled, b];
        let firings = vec![
            vec![1, 2, 3, 4, 5],
            vec![10, 11, 12, 13, 14],
            vec![1, 2, 3, 4, 6], // Jaccard 4/6 with the first
        ];
        let kept = dedupe_candidates(&weights, &firings, 0.95, 0.5);
        assert_eq!(kept, vec![0]);
        // With laxer thresholds all three survive.
        let kept = dedupe_candidates(&weights, &firings, 1.1, 1.1);
        assert_eq!(kept, vec![0, 1, 2]);
    }

    #[test]
    fn bank_round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bank.mleb");
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let bank = ElementBank {
            categories: vec!["circle".into(), "square".into()],
            elements: vec![
                rand_element(&mut rng, 0, 0),
                rand_element(&mut rng, 1, 0),
                rand_element(&mut rng, 2, 1),
            ],
            descriptor: DescriptorConfig::default(),
        };
        write_bank(&bank, &path).unwrap();
        let bytes1 = std::fs::read(&path).unwrap();

        let loaded: ElementBank<f64> = read_bank(&path).unwrap();
        assert_eq!(loaded.categories, bank.categories);
        assert_eq!(loaded.elements.len(), 3);
        assert_eq!(loaded.elements[2].category, 1);

        let path2 = dir.path().join("bank2.mleb");
        write_bank(&loaded, &path2).unwrap();
        let bytes2 = std::fs::read(&path2).unwrap();
        assert_eq!(bytes1, bytes2, "write-read-write must be byte stable");

        assert!(dir.path().join("bank.mleb.manifest").exists());
    }

    #[test]
    fn read_rejects_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.mleb");
        std::fs::write(&path, b"NOTABANK").unwrap();
        assert!(matches!(
            read_bank::<f64>(&path),
            Err(Error::MalformedFile { .. })
        ));

        let path2 = dir.path().join("trunc.mleb");
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let bank = ElementBank {
            categories: vec!["c".into()],
            elements: vec![rand_element(&mut rng, 0, 0)],
            descriptor: DescriptorConfig::default(),
        };
        write_bank(&bank, &path2).unwrap();
        let bytes = std::fs::read(&path2).unwrap();
        std::fs::write(&path2, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(
            read_bank::<f64>(&path2),
            Err(Error::MalformedFile { .. })
        ));
    }
}
