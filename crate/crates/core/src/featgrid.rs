//! Cell-grid appearance descriptor: 31 gradient channels plus 2 color
//! channels per 8x8 pixel cell.
//!
//! Per cell the gradient part follows the classic analytic recipe:
//!
//! * gradients by central difference `[-1, 0, 1]` (clamped at borders) on
//!   the color channel with the largest squared magnitude at that pixel;
//! * hard assignment of the magnitude to one of 18 contrast-sensitive
//!   orientation bins via snapping to a fixed direction table — when
//!   several bins tie exactly, the vote is split evenly among them (this
//!   makes the descriptor exactly covariant under horizontal flips, see
//!   [`flip_channel_permutation`]);
//! * four neighborhood L2 normalizations (the 2x2 cell blocks containing
//!   the cell), each truncated at 0.2;
//! * features: 18 sensitive values (0.5 x the mean of the four truncated
//!   normalizations), 9 contrast-insensitive values (same combination of
//!   the paired-bin sums), and 4 normalization-energy values (per-bin mean
//!   of the 18 truncated sensitive responses under that normalization).
//!   Every gradient feature therefore lies in [0, 0.2].
//!
//! Channels 31 and 32 are the per-cell means of the CIE Lab a and b
//! components rescaled to [0, 1] via `(v + 128) / 255`.
//!
//! A one-cell margin feeds the neighborhood normalization, so an image of
//! `h x w` pixels yields an interior grid of `h/8 - 2` by `w/8 - 2` cells
//! (64x64 pixels -> 6x6 cells). Pixels beyond the last full cell are
//! ignored.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::color::{ab_to_unit, rgb_to_lab};
use crate::error::{Error, Result};
use crate::raster::RasterImage;
use crate::scalar::Real;

/// Orientation bin count (contrast-sensitive).
pub const SENSITIVE_BINS: usize = 18;
/// Contrast-insensitive bin count.
pub const INSENSITIVE_BINS: usize = 9;
/// Gradient channels: 18 sensitive + 9 insensitive + 4 energy.
pub const GRADIENT_CHANNELS: usize = SENSITIVE_BINS + INSENSITIVE_BINS + 4;
/// Color channels (Lab a, b).
pub const COLOR_CHANNELS: usize = 2;
/// Total channels per cell.
pub const CHANNELS: usize = GRADIENT_CHANNELS + COLOR_CHANNELS;
/// Template side in cells: elements and patch windows are 6x6 cells.
pub const TEMPLATE_CELLS: usize = 6;
/// Feature count of one 6x6x33 window.
pub const PATCH_DIM: usize = TEMPLATE_CELLS * TEMPLATE_CELLS * CHANNELS;

/// Snapping directions for the 9 base orientations (20 degree steps).
/// The table is exactly mirror symmetric (`UU[9-o] = -UU[o]`,
/// `VV[9-o] = VV[o]` as literals), which the flip covariance relies on.
const UU: [f64; 9] = [
    1.0000, 0.9397, 0.7660, 0.5000, 0.1736, -0.1736, -0.5000, -0.7660, -0.9397,
];
const VV: [f64; 9] = [
    0.0000, 0.3420, 0.6428, 0.8660, 0.9848, 0.9848, 0.8660, 0.6428, 0.3420,
];

/// Descriptor parameters. Only the defaults are exercised by the shipped
/// pipeline, but the cell size is honored throughout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DescriptorConfig {
    pub cell_size: u32,
    pub truncation: f64,
}

impl Default for DescriptorConfig {
    fn default() -> Self {
        DescriptorConfig {
            cell_size: 8,
            truncation: 0.2,
        }
    }
}

/// Interior cell grid of descriptor values.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid<T> {
    rows: usize,
    cols: usize,
    cell_size: u32,
    /// Row-major cells, channel-minor: `values[(r*cols + c)*CHANNELS + ch]`.
    values: Vec<T>,
}

impl<T: Real> FeatureGrid<T> {
    /// Reassemble a grid from its serialized parts (see [`Self::values`]
    /// for the layout). The length must match `rows * cols * CHANNELS`.
    pub fn from_parts(rows: usize, cols: usize, cell_size: u32, values: Vec<T>) -> Result<Self> {
        if values.len() != rows * cols * CHANNELS {
            return Err(Error::DimensionMismatch {
                expected: rows * cols * CHANNELS,
                got: values.len(),
            });
        }
        Ok(FeatureGrid {
            rows,
            cols,
            cell_size,
            values,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn cell_size(&self) -> u32 {
        self.cell_size
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    #[inline]
    pub fn cell(&self, r: usize, c: usize) -> &[T] {
        let i = (r * self.cols + c) * CHANNELS;
        &self.values[i..i + CHANNELS]
    }

    /// Copy the 6x6 window with top-left interior cell (r0, c0) into a
    /// contiguous `PATCH_DIM` vector (row-major cells, channel-minor).
    pub fn copy_window(&self, r0: usize, c0: usize) -> Vec<T> {
        assert!(r0 + TEMPLATE_CELLS <= self.rows && c0 + TEMPLATE_CELLS <= self.cols);
        let mut out = Vec::with_capacity(PATCH_DIM);
        for r in 0..TEMPLATE_CELLS {
            let start = ((r0 + r) * self.cols + c0) * CHANNELS;
            out.extend_from_slice(&self.values[start..start + TEMPLATE_CELLS * CHANNELS]);
        }
        out
    }

    /// Mirrored grid: columns reversed and channels permuted. Satisfies
    /// `grid(flip(img)) == grid(img).flip_horizontal()` exactly for images
    /// whose width is a multiple of the cell size.
    pub fn flip_horizontal(&self) -> Self {
        let perm = flip_channel_permutation();
        let mut values = vec![T::zero(); self.values.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                let src = self.cell(r, c);
                let dst = ((r * self.cols) + (self.cols - 1 - c)) * CHANNELS;
                for ch in 0..CHANNELS {
                    values[dst + perm[ch]] = src[ch];
                }
            }
        }
        FeatureGrid {
            rows: self.rows,
            cols: self.cols,
            cell_size: self.cell_size,
            values,
        }
    }

    pub fn from_raw(rows: usize, cols: usize, cell_size: u32, values: Vec<T>) -> Self {
        assert_eq!(values.len(), rows * cols * CHANNELS);
        FeatureGrid {
            rows,
            cols,
            cell_size,
            values,
        }
    }
}

/// Channel permutation applied alongside column mirroring under a
/// horizontal flip: sensitive bin `o -> (9 - o) mod 18`, insensitive bin
/// `o -> (9 - o) mod 9`, the four energy features swap left/right
/// neighborhoods, color channels are fixed.
pub fn flip_channel_permutation() -> [usize; CHANNELS] {
    let mut perm = [0usize; CHANNELS];
    for o in 0..SENSITIVE_BINS {
        perm[o] = (9 + SENSITIVE_BINS - o) % SENSITIVE_BINS;
    }
    for o in 0..INSENSITIVE_BINS {
        perm[SENSITIVE_BINS + o] = SENSITIVE_BINS + (9 + INSENSITIVE_BINS - o) % INSENSITIVE_BINS;
    }
    // Normalizer order: (up,left), (up,right), (down,left), (down,right).
    let base = SENSITIVE_BINS + INSENSITIVE_BINS;
    perm[base] = base + 1;
    perm[base + 1] = base;
    perm[base + 2] = base + 3;
    perm[base + 3] = base + 2;
    perm[GRADIENT_CHANNELS] = GRADIENT_CHANNELS;
    perm[GRADIENT_CHANNELS + 1] = GRADIENT_CHANNELS + 1;
    perm
}

/// Horizontally mirror a 6x6x33 patch feature vector: column reversal
/// plus [`flip_channel_permutation`]. An involution, and exactly the
/// feature of the mirrored window in the flipped image.
pub fn flip_patch<T: Real>(patch: &[T]) -> Vec<T> {
    assert_eq!(patch.len(), PATCH_DIM);
    let perm = flip_channel_permutation();
    let mut out = vec![T::zero(); PATCH_DIM];
    for r in 0..TEMPLATE_CELLS {
        for c in 0..TEMPLATE_CELLS {
            let src = (r * TEMPLATE_CELLS + c) * CHANNELS;
            let dst = (r * TEMPLATE_CELLS + (TEMPLATE_CELLS - 1 - c)) * CHANNELS;
            for ch in 0..CHANNELS {
                out[dst + perm[ch]] = patch[src + ch];
            }
        }
    }
    out
}

/// Per-pixel gradient: central difference on the max-response color
/// channel. Returns (dx, dy).
#[inline]
fn pixel_gradient<T: Real>(img: &RasterImage<T>, x: u32, y: u32) -> (T, T) {
    let w = img.width();
    let h = img.height();
    let xl = img.get(x.saturating_sub(1), y);
    let xr = img.get((x + 1).min(w - 1), y);
    let yu = img.get(x, y.saturating_sub(1));
    let yd = img.get(x, (y + 1).min(h - 1));
    let mut best = (T::zero(), T::zero());
    let mut best_mag = T::neg_infinity();
    for c in 0..3 {
        let dx = xr[c] - xl[c];
        let dy = yd[c] - yu[c];
        let mag = dx * dx + dy * dy;
        if mag > best_mag {
            best_mag = mag;
            best = (dx, dy);
        }
    }
    best
}

/// Snap a gradient to the 18 contrast-sensitive bins. Writes the vote
/// (magnitude, split evenly on exact ties) through `vote`.
#[inline]
fn snap_vote<T: Real>(dx: T, dy: T, mut vote: impl FnMut(usize, T)) {
    let mag = (dx * dx + dy * dy).sqrt();
    if mag == T::zero() {
        return;
    }
    let mut scores = [T::zero(); SENSITIVE_BINS];
    let mut best = T::neg_infinity();
    for o in 0..9 {
        let dot = T::of(UU[o]) * dx + T::of(VV[o]) * dy;
        scores[o] = dot;
        scores[o + 9] = -dot;
        if dot > best {
            best = dot;
        }
        if -dot > best {
            best = -dot;
        }
    }
    let ties = scores.iter().filter(|&&s| s == best).count();
    let share = mag / T::of(ties as f64);
    for (o, &s) in scores.iter().enumerate() {
        if s == best {
            vote(o, share);
        }
    }
}

/// Compute the descriptor grid of a whole image.
pub fn compute_feature_grid<T: Real>(
    img: &RasterImage<T>,
    cfg: &DescriptorConfig,
) -> Result<FeatureGrid<T>> {
    let cell = cfg.cell_size as usize;
    assert!(cell >= 2, "cell size must be at least 2 px");
    let lat_cols = img.width() as usize / cell;
    let lat_rows = img.height() as usize / cell;
    if lat_cols < 3 || lat_rows < 3 {
        return Err(Error::ImageTooSmall {
            width: img.width(),
            height: img.height(),
            min: 3 * cfg.cell_size,
        });
    }

    // Pass 1: orientation histograms over the full cell lattice.
    let mut hist = vec![T::zero(); lat_rows * lat_cols * SENSITIVE_BINS];
    for y in 0..(lat_rows * cell) as u32 {
        let lr = y as usize / cell;
        for x in 0..(lat_cols * cell) as u32 {
            let lc = x as usize / cell;
            let (dx, dy) = pixel_gradient(img, x, y);
            let base = (lr * lat_cols + lc) * SENSITIVE_BINS;
            snap_vote(dx, dy, |o, v| hist[base + o] = hist[base + o] + v);
        }
    }

    // Pass 2: per-cell gradient energy (sum of squared insensitive sums).
    let mut energy = vec![T::zero(); lat_rows * lat_cols];
    for (i, e) in energy.iter_mut().enumerate() {
        let h = &hist[i * SENSITIVE_BINS..(i + 1) * SENSITIVE_BINS];
        let mut sum = T::zero();
        for o in 0..INSENSITIVE_BINS {
            let s = h[o] + h[o + 9];
            sum = sum + s * s;
        }
        *e = sum;
    }

    // Pass 3: interior features.
    let rows = lat_rows - 2;
    let cols = lat_cols - 2;
    let trunc = T::of(cfg.truncation);
    let eps = T::of(1e-4);
    let quarter = T::of(0.25);
    let half = T::of(0.5);
    let inv18 = T::of(1.0 / SENSITIVE_BINS as f64);
    let mut values = vec![T::zero(); rows * cols * CHANNELS];

    let e_at = |lr: usize, lc: usize| energy[lr * lat_cols + lc];
    for r in 0..rows {
        let lr = r + 1;
        for c in 0..cols {
            let lc = c + 1;
            // 2x2 block normalizers: (up,left), (up,right), (down,left),
            // (down,right) around the cell.
            let mut norms = [T::zero(); 4];
            for (k, (dr, dc)) in [(-1i64, -1i64), (-1, 1), (1, -1), (1, 1)].iter().enumerate() {
                let nr = (lr as i64 + dr) as usize;
                let nc = (lc as i64 + dc) as usize;
                let sum = e_at(lr, lc) + e_at(lr, nc) + e_at(nr, lc) + e_at(nr, nc);
                norms[k] = T::one() / (sum + eps).sqrt();
            }

            let h = &hist[(lr * lat_cols + lc) * SENSITIVE_BINS..][..SENSITIVE_BINS];
            let out = &mut values[(r * cols + c) * CHANNELS..][..CHANNELS];
            let mut texture = [T::zero(); 4];
            for o in 0..SENSITIVE_BINS {
                let mut acc = T::zero();
                for (k, n) in norms.iter().enumerate() {
                    let t = (h[o] * *n).min(trunc);
                    acc = acc + t;
                    texture[k] = texture[k] + t;
                }
                out[o] = half * quarter * acc;
            }
            for o in 0..INSENSITIVE_BINS {
                let sum = h[o] + h[o + 9];
                let mut acc = T::zero();
                for n in norms.iter() {
                    acc = acc + (sum * *n).min(trunc);
                }
                out[SENSITIVE_BINS + o] = half * quarter * acc;
            }
            for k in 0..4 {
                out[SENSITIVE_BINS + INSENSITIVE_BINS + k] = inv18 * texture[k];
            }

            // Color: mean rescaled Lab a/b over the cell's pixels.
            let mut a_sum = T::zero();
            let mut b_sum = T::zero();
            for py in 0..cell {
                for px in 0..cell {
                    let lab = rgb_to_lab(img.get((lc * cell + px) as u32, (lr * cell + py) as u32));
                    a_sum = a_sum + ab_to_unit(lab[1]);
                    b_sum = b_sum + ab_to_unit(lab[2]);
                }
            }
            let inv_n = T::of(1.0 / (cell * cell) as f64);
            out[GRADIENT_CHANNELS] = a_sum * inv_n;
            out[GRADIENT_CHANNELS + 1] = b_sum * inv_n;
        }
    }

    Ok(FeatureGrid {
        rows,
        cols,
        cell_size: cfg.cell_size,
        values,
    })
}

/// Write the debug dump: one text header line `rows cols channels
/// cell_size`, then the values row-major cell-major channel-minor as
/// little-endian f32.
pub fn write_grid_dump<T: Real>(grid: &FeatureGrid<T>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        w,
        "{} {} {} {}",
        grid.rows, grid.cols, CHANNELS, grid.cell_size
    )?;
    for v in &grid.values {
        w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_grid_dump<T: Real>(path: &Path) -> Result<FeatureGrid<T>> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut header = String::new();
    r.read_line(&mut header)?;
    let fields: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::malformed("grid dump", path, e.to_string()))?;
    let [rows, cols, channels, cell_size] = fields[..] else {
        return Err(Error::malformed("grid dump", path, "header needs 4 fields"));
    };
    if channels != CHANNELS {
        return Err(Error::malformed(
            "grid dump",
            path,
            format!("expected {CHANNELS} channels, header says {channels}"),
        ));
    }
    let n = rows * cols * channels;
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)
        .map_err(|_| Error::malformed("grid dump", path, "truncated payload"))?;
    let values = bytes
        .chunks_exact(4)
        .map(|b| T::of(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
        .collect();
    Ok(FeatureGrid {
        rows,
        cols,
        cell_size: cell_size as u32,
        values,
    })
}
