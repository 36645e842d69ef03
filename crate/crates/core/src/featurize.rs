//! Proposal featurization: spatial max-pooling of element responses.
//!
//! Per image, every element of the bank is slid over every pyramid level
//! once ([`ImageResponses`]); each proposal then reads its region views
//! out of those shared response maps. A proposal's feature is, per
//! element and per pooling region, the maximum response over all view
//! positions assigned to the region — jointly across levels.
//!
//! Position membership: each view's positions are spread uniformly over
//! the unit square (position p of n gets center (p+0.5)/n per axis), and
//! a position belongs to a sub-region when that center falls inside its
//! rectangle; boundary ties go to the lower-index region, and region 0
//! (the whole box) always contains every position. A sub-region left
//! empty at every level receives the minimum pooled value among the
//! element's non-empty regions, keeping the feature scale consistent.

use crate::elementbank::{score_bank, ElementBank, ResponseMap};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::pyramid::{build_pyramid, extract_region_views, FeaturePyramid, PyramidConfig, RegionView};
use crate::raster::RasterImage;
use crate::scalar::Real;
use crate::featgrid::TEMPLATE_CELLS;

/// Spatial pooling layout over a proposal box.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolingScheme {
    /// Whole box plus the 2x2 quadrants.
    FiveRegion,
    /// Whole box plus vertical thirds plus horizontal thirds.
    SevenRegion,
}

const THIRD: f64 = 1.0 / 3.0;

/// [x1, y1, x2, y2] unit-square fractions; index 0 is the whole box.
const FIVE_REGIONS: [[f64; 4]; 5] = [
    [0.0, 0.0, 1.0, 1.0],
    [0.0, 0.0, 0.5, 0.5],
    [0.5, 0.0, 1.0, 0.5],
    [0.0, 0.5, 0.5, 1.0],
    [0.5, 0.5, 1.0, 1.0],
];

const SEVEN_REGIONS: [[f64; 4]; 7] = [
    [0.0, 0.0, 1.0, 1.0],
    [0.0, 0.0, THIRD, 1.0],
    [THIRD, 0.0, 2.0 * THIRD, 1.0],
    [2.0 * THIRD, 0.0, 1.0, 1.0],
    [0.0, 0.0, 1.0, THIRD],
    [0.0, THIRD, 1.0, 2.0 * THIRD],
    [0.0, 2.0 * THIRD, 1.0, 1.0],
];

impl PoolingScheme {
    pub fn region_count(self) -> usize {
        self.regions().len()
    }

    /// Region rectangles; index 0 is the whole box.
    pub fn regions(self) -> &'static [[f64; 4]] {
        match self {
            PoolingScheme::FiveRegion => &FIVE_REGIONS,
            PoolingScheme::SevenRegion => &SEVEN_REGIONS,
        }
    }

    pub fn as_byte(self) -> u8 {
        match self {
            PoolingScheme::FiveRegion => 5,
            PoolingScheme::SevenRegion => 7,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            5 => Some(PoolingScheme::FiveRegion),
            7 => Some(PoolingScheme::SevenRegion),
            _ => None,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            PoolingScheme::FiveRegion => "five",
            PoolingScheme::SevenRegion => "seven",
        }
    }
}

impl std::str::FromStr for PoolingScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "five" | "5" => Ok(PoolingScheme::FiveRegion),
            "seven" | "7" => Ok(PoolingScheme::SevenRegion),
            other => Err(Error::ContractMismatch(format!(
                "unknown pooling scheme {other:?} (expected \"five\" or \"seven\")"
            ))),
        }
    }
}

impl std::fmt::Display for PoolingScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Pooled feature vector of one proposal: `|bank| * |regions|` values,
/// element-major then region-minor, in bank order.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalFeature<T> {
    pub values: Vec<T>,
    pub proposal: BBox<f64>,
    pub scheme: PoolingScheme,
}

/// One element firing: a scored template window located back in
/// original-image pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Firing<T> {
    pub score: T,
    pub level: usize,
    /// Response-map coordinates within the level.
    pub r: usize,
    pub c: usize,
    /// The window's footprint in original-image pixels.
    pub pixel_box: BBox<f64>,
}

/// Original-image pixel footprint of the response window at `(level, r,
/// c)`: template cells offset by the one-cell interior margin, mapped
/// through the level's absolute scale.
pub fn window_pixel_box<T: Real>(
    pyramid: &FeaturePyramid<T>,
    level: usize,
    r: usize,
    c: usize,
) -> BBox<f64> {
    let lv = &pyramid.levels[level];
    let cell = lv.grid.cell_size() as f64;
    let size = TEMPLATE_CELLS as f64 * cell;
    BBox::new(
        (c as f64 + 1.0) * cell / lv.scale,
        (r as f64 + 1.0) * cell / lv.scale,
        size / lv.scale,
        size / lv.scale,
    )
}

/// One scoring position of a proposal's views with its normalized center.
#[derive(Debug, Clone, Copy)]
struct PoolPosition {
    level: usize,
    /// Flat index into that level's response maps.
    index: usize,
    u: f64,
    v: f64,
}

/// Boundary ties go to the lower-index region: intervals are (lo, hi],
/// with the unit-square edge at 0 closed.
fn axis_contains(lo: f64, hi: f64, t: f64) -> bool {
    (t > lo && t <= hi) || (lo == 0.0 && t == 0.0)
}

fn region_contains(rect: &[f64; 4], u: f64, v: f64) -> bool {
    axis_contains(rect[0], rect[2], u) && axis_contains(rect[1], rect[3], v)
}

fn positions_of_views(views: &[RegionView], map_cols: &[usize]) -> Vec<PoolPosition> {
    let mut out = Vec::new();
    for view in views {
        let pos_rows = view.rows - TEMPLATE_CELLS + 1;
        let pos_cols = view.cols - TEMPLATE_CELLS + 1;
        let stride = map_cols[view.level];
        for pr in 0..pos_rows {
            for pc in 0..pos_cols {
                out.push(PoolPosition {
                    level: view.level,
                    index: (view.r0 + pr) * stride + (view.c0 + pc),
                    u: (pc as f64 + 0.5) / pos_cols as f64,
                    v: (pr as f64 + 0.5) / pos_rows as f64,
                });
            }
        }
    }
    out
}

/// Max response over the view positions whose center falls inside
/// `region` (`None` = the whole box), jointly across levels.
/// `maps_per_level[l]` is the element's response map at pyramid level
/// `l`. Returns `None` when no position lands in the region.
pub fn pool<T: Real>(
    maps_per_level: &[ResponseMap<T>],
    views: &[RegionView],
    region: Option<&[f64; 4]>,
) -> Option<T> {
    let cols: Vec<usize> = maps_per_level.iter().map(|m| m.cols).collect();
    let mut best: Option<T> = None;
    for p in positions_of_views(views, &cols) {
        if let Some(rect) = region {
            if !region_contains(rect, p.u, p.v) {
                continue;
            }
        }
        let val = maps_per_level[p.level].values[p.index];
        best = Some(match best {
            Some(b) if b >= val => b,
            _ => val,
        });
    }
    best
}

/// Shared per-image scoring state: the feature pyramid plus every
/// element's response map at every level. Build once per image; featurize
/// any number of proposals against it.
pub struct ImageResponses<'a, T: Real> {
    pub bank: &'a ElementBank<T>,
    pub pyramid: FeaturePyramid<T>,
    image: &'a RasterImage<T>,
    /// responses[level][element]
    responses: Vec<Vec<ResponseMap<T>>>,
    /// Response-map column counts per level.
    map_cols: Vec<usize>,
}

impl<'a, T: Real> ImageResponses<'a, T> {
    pub fn build(
        image: &'a RasterImage<T>,
        bank: &'a ElementBank<T>,
        cfg: &PyramidConfig,
    ) -> Result<Self> {
        Ok(Self::with_pyramid(image, bank, build_pyramid(image, cfg)?))
    }

    /// Score the bank over an already-built pyramid (e.g. one restored
    /// from a cache). `pyramid` must have been built from `image`.
    pub fn with_pyramid(
        image: &'a RasterImage<T>,
        bank: &'a ElementBank<T>,
        pyramid: FeaturePyramid<T>,
    ) -> Self {
        let responses: Vec<Vec<ResponseMap<T>>> = pyramid
            .levels
            .iter()
            .map(|l| score_bank(&bank.elements, &l.grid))
            .collect();
        let map_cols = pyramid
            .levels
            .iter()
            .map(|l| l.grid.cols() - TEMPLATE_CELLS + 1)
            .collect();
        ImageResponses {
            bank,
            pyramid,
            image,
            responses,
            map_cols,
        }
    }

    /// Featurize one proposal. Proposals too small for the main pyramid
    /// fall back to a cropped, 2x-upsampled pyramid of their own.
    pub fn featurize(&self, b: &BBox<f64>, scheme: PoolingScheme) -> Result<ProposalFeature<T>> {
        Ok(self.featurize_impl::<false>(b, scheme)?.0)
    }

    /// Featurize plus, per pooled dimension, the firing that supplied its
    /// maximum (`None` for regions filled by the empty-region sentinel).
    /// Firings are located in original-image pixels, including on the
    /// crop-and-upsample fallback path.
    pub fn featurize_with_positions(
        &self,
        b: &BBox<f64>,
        scheme: PoolingScheme,
    ) -> Result<(ProposalFeature<T>, Vec<Option<Firing<T>>>)> {
        let (feature, firings) = self.featurize_impl::<true>(b, scheme)?;
        Ok((feature, firings.expect("tracking was requested")))
    }

    fn featurize_impl<const TRACK: bool>(
        &self,
        b: &BBox<f64>,
        scheme: PoolingScheme,
    ) -> Result<(ProposalFeature<T>, Option<Vec<Option<Firing<T>>>>)> {
        match extract_region_views(&self.pyramid, b) {
            Ok(views) => {
                let positions = positions_of_views(&views, &self.map_cols);
                Ok(self.assemble::<TRACK>(
                    b,
                    scheme,
                    &positions,
                    &self.responses,
                    &self.pyramid,
                    (0.0, 0.0),
                ))
            }
            Err(Error::RegionTooSmall { .. }) => self.featurize_upsampled::<TRACK>(b, scheme),
            Err(e) => Err(e),
        }
    }

    /// Crop-and-upsample fallback for proposals below the pyramid's
    /// template floor.
    fn featurize_upsampled<const TRACK: bool>(
        &self,
        b: &BBox<f64>,
        scheme: PoolingScheme,
    ) -> Result<(ProposalFeature<T>, Option<Vec<Option<Firing<T>>>>)> {
        let region_too_small = || Error::RegionTooSmall {
            x1: b.x1,
            y1: b.y1,
            w: b.w,
            h: b.h,
        };
        let (iw, ih) = (self.image.width(), self.image.height());
        let x0 = b.x1.floor().clamp(0.0, iw as f64) as u32;
        let y0 = b.y1.floor().clamp(0.0, ih as f64) as u32;
        let x1 = b.x2().ceil().clamp(0.0, iw as f64) as u32;
        let y1 = b.y2().ceil().clamp(0.0, ih as f64) as u32;
        if x1 <= x0 || y1 <= y0 {
            return Err(region_too_small());
        }
        let crop = self.image.crop(x0, y0, x1 - x0, y1 - y0);
        let mut cfg = self.pyramid.config;
        cfg.upsample_small = true;
        let pyr = build_pyramid(&crop, &cfg).map_err(|_| region_too_small())?;
        let shifted = BBox::new(b.x1 - x0 as f64, b.y1 - y0 as f64, b.w, b.h);
        let views = extract_region_views(&pyr, &shifted).map_err(|_| region_too_small())?;
        let responses: Vec<Vec<ResponseMap<T>>> = pyr
            .levels
            .iter()
            .map(|l| score_bank(&self.bank.elements, &l.grid))
            .collect();
        let cols: Vec<usize> = pyr
            .levels
            .iter()
            .map(|l| l.grid.cols() - TEMPLATE_CELLS + 1)
            .collect();
        let positions = positions_of_views(&views, &cols);
        Ok(self.assemble::<TRACK>(
            b,
            scheme,
            &positions,
            &responses,
            &pyr,
            (x0 as f64, y0 as f64),
        ))
    }

    /// One sweep over positions per element, updating every matching
    /// region's maximum; empty regions take the element's minimum pooled
    /// value. With TRACK, also records the position that won each region
    /// (first winner on ties, in deterministic view order), resolved to
    /// original-image pixels via `pyramid` shifted by `origin`.
    #[allow(clippy::too_many_arguments)]
    fn assemble<const TRACK: bool>(
        &self,
        b: &BBox<f64>,
        scheme: PoolingScheme,
        positions: &[PoolPosition],
        responses: &[Vec<ResponseMap<T>>],
        pyramid: &FeaturePyramid<T>,
        origin: (f64, f64),
    ) -> (ProposalFeature<T>, Option<Vec<Option<Firing<T>>>>) {
        let regions = scheme.regions();
        let nr = regions.len();
        // Membership is element-independent: precompute it per position.
        let memberships: Vec<u32> = positions
            .iter()
            .map(|p| {
                let mut mask = 1u32;
                for (ri, rect) in regions.iter().enumerate().skip(1) {
                    if region_contains(rect, p.u, p.v) {
                        mask |= 1 << ri;
                    }
                }
                mask
            })
            .collect();

        let ne = self.bank.elements.len();
        let mut values = vec![T::zero(); ne * nr];
        let mut winners: Vec<Option<(usize, usize)>> = if TRACK {
            vec![None; ne * nr]
        } else {
            Vec::new()
        };
        for e in 0..ne {
            let mut maxima: Vec<Option<T>> = vec![None; nr];
            for (p, mask) in positions.iter().zip(&memberships) {
                let val = responses[p.level][e].values[p.index];
                for (ri, slot) in maxima.iter_mut().enumerate() {
                    if mask & (1 << ri) != 0 {
                        match slot {
                            Some(m) if *m >= val => {}
                            _ => {
                                *slot = Some(val);
                                if TRACK {
                                    winners[e * nr + ri] = Some((p.level, p.index));
                                }
                            }
                        }
                    }
                }
            }
            let sentinel = maxima
                .iter()
                .flatten()
                .copied()
                .fold(None::<T>, |acc, v| match acc {
                    Some(a) if a <= v => Some(a),
                    _ => Some(v),
                })
                .expect("whole region cannot be empty when views exist");
            for (ri, slot) in maxima.iter().enumerate() {
                match slot {
                    Some(v) => values[e * nr + ri] = *v,
                    None => {
                        values[e * nr + ri] = sentinel;
                        // The sentinel is borrowed from another region;
                        // it has no location of its own.
                        if TRACK {
                            winners[e * nr + ri] = None;
                        }
                    }
                }
            }
        }
        let feature = ProposalFeature {
            values,
            proposal: *b,
            scheme,
        };
        if !TRACK {
            return (feature, None);
        }
        let map_cols: Vec<usize> = pyramid
            .levels
            .iter()
            .map(|l| l.grid.cols() - TEMPLATE_CELLS + 1)
            .collect();
        let firings = winners
            .iter()
            .enumerate()
            .map(|(i, w)| {
                w.map(|(level, index)| {
                    let (r, c) = (index / map_cols[level], index % map_cols[level]);
                    let mut pb = window_pixel_box(pyramid, level, r, c);
                    pb.x1 += origin.0;
                    pb.y1 += origin.1;
                    Firing {
                        score: feature.values[i],
                        level,
                        r,
                        c,
                        pixel_box: pb,
                    }
                })
            })
            .collect();
        (feature, Some(firings))
    }

    /// The `k` best-scoring windows of one element over the whole image
    /// (every level, every position), descending score with ties broken
    /// by ascending (level, r, c).
    pub fn top_firings(&self, element: usize, k: usize) -> Vec<Firing<T>> {
        let mut all: Vec<Firing<T>> = Vec::new();
        for (level, maps) in self.responses.iter().enumerate() {
            let map = &maps[element];
            for (index, &score) in map.values.iter().enumerate() {
                let (r, c) = (index / map.cols, index % map.cols);
                all.push(Firing {
                    score,
                    level,
                    r,
                    c,
                    pixel_box: window_pixel_box(&self.pyramid, level, r, c),
                });
            }
        }
        all.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.level.cmp(&b.level))
                .then(a.r.cmp(&b.r))
                .then(a.c.cmp(&b.c))
        });
        all.truncate(k);
        all
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::elementbank::{Element, ElementKind};
    use crate::featgrid::{flip_patch, DescriptorConfig, PATCH_DIM};
    use crate::geometry::flip_box;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn quantized_noise(seed: u64, w: u32, h: u32) -> RasterImage<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RasterImage::from_fn(w, h, |_, _| {
            [
                (rng.random_range(0..=255u32) as f64) / 255.0,
                (rng.random_range(0..=255u32) as f64) / 255.0,
                (rng.random_range(0..=255u32) as f64) / 255.0,
            ]
        })
    }

    fn random_bank(seed: u64, count: usize) -> ElementBank<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let elements = (0..count)
            .map(|i| Element {
                id: i as u64,
                category: 0,
                kind: ElementKind::Discriminative,
                bias: rng.random_range(-0.2..0.2),
                weights: (0..PATCH_DIM)
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect(),
                mining_score: Some(1.0 - 0.01 * i as f64),
            })
            .collect();
        ElementBank {
            categories: vec!["obj".into()],
            elements,
            descriptor: DescriptorConfig::default(),
        }
    }

    #[test]
    fn dimension_and_layout_contract() {
        let img = quantized_noise(1, 160, 128);
        let bank = random_bank(2, 6);
        let ctx = ImageResponses::build(&img, &bank, &PyramidConfig::default()).unwrap();
        let b = BBox::new(8.0, 8.0, 120.0, 96.0);
        let five = ctx.featurize(&b, PoolingScheme::FiveRegion).unwrap();
        let seven = ctx.featurize(&b, PoolingScheme::SevenRegion).unwrap();
        assert_eq!(five.values.len(), 6 * 5);
        assert_eq!(seven.values.len(), 6 * 7);

        // Element-major layout: a prefix bank yields a prefix feature.
        let sub = ElementBank {
            categories: bank.categories.clone(),
            elements: bank.elements[..2].to_vec(),
            descriptor: bank.descriptor,
        };
        let ctx_sub = ImageResponses::build(&img, &sub, &PyramidConfig::default()).unwrap();
        let five_sub = ctx_sub.featurize(&b, PoolingScheme::FiveRegion).unwrap();
        assert_eq!(five_sub.values, five.values[..10].to_vec());
    }

    #[test]
    fn whole_region_dominates_subregions() {
        let img = quantized_noise(3, 200, 150);
        let bank = random_bank(4, 3);
        let ctx = ImageResponses::build(&img, &bank, &PyramidConfig::default()).unwrap();
        for scheme in [PoolingScheme::FiveRegion, PoolingScheme::SevenRegion] {
            let f = ctx.featurize(&BBox::new(10.0, 6.0, 150.0, 120.0), scheme).unwrap();
            let nr = scheme.region_count();
            for e in 0..3 {
                let whole = f.values[e * nr];
                for ri in 1..nr {
                    assert!(
                        whole >= f.values[e * nr + ri],
                        "element {e} region {ri} exceeds whole"
                    );
                }
            }
        }
    }

    /// A 64x64 aligned box yields one position at each of two levels; all
    /// regions collapse to the same value (ties go to one quadrant, the
    /// rest take the sentinel), and that value is the max of the two
    /// direct response-map entries.
    #[test]
    fn single_position_box_pools_to_its_response() {
        let img = quantized_noise(5, 256, 256);
        let bank = random_bank(6, 2);
        let ctx = ImageResponses::build(&img, &bank, &PyramidConfig::default()).unwrap();
        let b = BBox::new(16.0, 24.0, 64.0, 64.0);
        let views = extract_region_views(&ctx.pyramid, &b).unwrap();
        assert_eq!(views.len(), 2, "64 px box should fit exactly two levels");
        for v in &views {
            assert_eq!((v.rows, v.cols), (6, 6));
        }
        let f = ctx.featurize(&b, PoolingScheme::FiveRegion).unwrap();
        for (e, _) in bank.elements.iter().enumerate() {
            let expect = views
                .iter()
                .map(|v| ctx.responses[v.level][e].at(v.r0, v.c0))
                .fold(f64::NEG_INFINITY, f64::max);
            for ri in 0..5 {
                assert_eq!(f.values[e * 5 + ri], expect, "element {e} region {ri}");
            }
        }
    }

    /// Brute-force membership oracle: recompute each region's max by
    /// enumerating positions independently, including the sentinel rule.
    #[test]
    fn featurize_matches_bruteforce_pool() {
        let img = quantized_noise(7, 224, 176);
        let bank = random_bank(8, 4);
        let ctx = ImageResponses::build(&img, &bank, &PyramidConfig::default()).unwrap();
        for b in [
            BBox::new(4.0, 8.0, 180.0, 80.0),
            BBox::new(40.0, 30.0, 70.0, 130.0),
            BBox::new(100.5, 59.25, 99.5, 76.75),
        ] {
            for scheme in [PoolingScheme::FiveRegion, PoolingScheme::SevenRegion] {
                let f = ctx.featurize(&b, scheme).unwrap();
                let views = extract_region_views(&ctx.pyramid, &b).unwrap();
                let nr = scheme.region_count();
                for (e, _) in bank.elements.iter().enumerate() {
                    let maps: Vec<ResponseMap<f64>> = ctx.responses.iter()
                        .map(|level| level[e].clone())
                        .collect();
                    let pooled: Vec<Option<f64>> = scheme
                        .regions()
                        .iter()
                        .enumerate()
                        .map(|(ri, rect)| {
                            pool(&maps, &views, if ri == 0 { None } else { Some(rect) })
                        })
                        .collect();
                    let sentinel = pooled
                        .iter()
                        .flatten()
                        .fold(f64::INFINITY, |a, &v| a.min(v));
                    for ri in 0..nr {
                        let expect = pooled[ri].unwrap_or(sentinel);
                        assert_eq!(f.values[e * nr + ri], expect, "region {ri}");
                    }
                }
            }
        }
    }

    /// Flip covariance at the feature level: the whole-region pooled
    /// value of an element on (image, box) equals that of its flipped
    /// twin on (flipped image, flipped box).
    ///
    /// Covariance is exact only when every pyramid level mirrors onto
    /// itself: resampling and the floor/ceil cell coverage are
    /// mirror-symmetric only at widths that stay multiples of the cell
    /// size. Pinning min_dim so just the scale-1 level of a 256x192
    /// image survives keeps the check as a strict equality instead of
    /// a loose cross-scale tolerance.
    #[test]
    fn whole_region_is_flip_covariant() {
        let img = quantized_noise(9, 256, 192);
        let flipped_img = img.flip_horizontal();
        let bank = random_bank(10, 4);
        let flipped_bank = ElementBank {
            categories: bank.categories.clone(),
            elements: bank.elements.iter().map(|e| e.flipped()).collect(),
            descriptor: bank.descriptor,
        };
        let cfg = PyramidConfig {
            min_dim: 162,
            ..PyramidConfig::default()
        };
        let ctx = ImageResponses::build(&img, &bank, &cfg).unwrap();
        let ctx_f = ImageResponses::build(&flipped_img, &flipped_bank, &cfg).unwrap();
        for b in [
            BBox::new(40.0, 32.0, 96.0, 80.0),
            BBox::new(0.0, 0.0, 256.0, 192.0),
            BBox::new(130.0, 50.0, 100.0, 100.0),
        ] {
            let bf = flip_box(&b, 256.0);
            let a = ctx.featurize(&b, PoolingScheme::FiveRegion).unwrap();
            let z = ctx_f.featurize(&bf, PoolingScheme::FiveRegion).unwrap();
            for e in 0..4 {
                let d = (a.values[e * 5] - z.values[e * 5]).abs();
                assert!(d < 1e-6, "element {e}: whole-region drift {d}");
            }
        }
    }

    #[test]
    fn small_proposals_use_upsampled_fallback() {
        let img = quantized_noise(11, 256, 256);
        let bank = random_bank(12, 2);
        let ctx = ImageResponses::build(&img, &bank, &PyramidConfig::default()).unwrap();
        // 40x40: below the 64 px template floor, rescued by the 2x crop.
        let f = ctx
            .featurize(&BBox::new(100.0, 80.0, 40.0, 40.0), PoolingScheme::FiveRegion)
            .unwrap();
        assert_eq!(f.values.len(), 10);
        assert!(f.values.iter().all(|v| v.is_finite()));
        // A sliver can't be rescued even by upsampling.
        let err = ctx
            .featurize(&BBox::new(0.0, 0.0, 9.0, 200.0), PoolingScheme::FiveRegion)
            .unwrap_err();
        assert!(matches!(err, Error::RegionTooSmall { .. }), "{err}");
        // Degenerate/out-of-image boxes propagate the same error.
        let err = ctx
            .featurize(&BBox::new(-50.0, -50.0, 30.0, 30.0), PoolingScheme::FiveRegion)
            .unwrap_err();
        assert!(matches!(err, Error::RegionTooSmall { .. }));
    }

    #[test]
    fn flip_patch_is_involutive_here_too() {
        // Guards the helper the flip tests lean on.
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let p: Vec<f64> = (0..PATCH_DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
        assert_eq!(flip_patch(&flip_patch(&p)), p);
    }

    #[test]
    fn top_firings_match_exhaustive_enumeration() {
        let img = quantized_noise(21, 200, 160);
        let bank = random_bank(22, 3);
        let ctx = ImageResponses::build(&img, &bank, &PyramidConfig::default()).unwrap();
        for e in 0..3 {
            // [DERIVED] oracle: flatten every (level, r, c) score and sort
            // with the same tie-break, independently of the method's loop.
            let mut oracle: Vec<(f64, usize, usize, usize)> = Vec::new();
            for (level, maps) in ctx.responses.iter().enumerate() {
                let m = &maps[e];
                for r in 0..m.rows {
                    for c in 0..m.cols {
                        oracle.push((m.at(r, c), level, r, c));
                    }
                }
            }
            oracle.sort_by(|a, b| {
                b.0.partial_cmp(&a.0)
                    .unwrap()
                    .then(a.1.cmp(&b.1))
                    .then(a.2.cmp(&b.2))
                    .then(a.3.cmp(&b.3))
            });
            let got = ctx.top_firings(e, 10);
            assert_eq!(got.len(), 10);
            for (g, o) in got.iter().zip(&oracle) {
                assert_eq!((g.score, g.level, g.r, g.c), *o);
            }
            // More requested than exist: everything comes back.
            let all = ctx.top_firings(e, usize::MAX);
            assert_eq!(all.len(), oracle.len());
        }
    }

    #[test]
    fn window_pixel_box_inverts_grid_geometry() {
        let img = quantized_noise(23, 192, 128);
        let bank = random_bank(24, 1);
        let ctx = ImageResponses::build(&img, &bank, &PyramidConfig::default()).unwrap();
        for (level, lv) in ctx.pyramid.levels.iter().enumerate() {
            let cell = lv.grid.cell_size() as f64;
            let b = window_pixel_box(&ctx.pyramid, level, 0, 0);
            // Row/col 0 starts one interior-margin cell in from the border.
            assert!((b.x1 * lv.scale - cell).abs() < 1e-9);
            assert!((b.y1 * lv.scale - cell).abs() < 1e-9);
            // The window spans exactly the template extent at this scale.
            assert!((b.w * lv.scale - cell * TEMPLATE_CELLS as f64).abs() < 1e-9);
            assert_eq!(b.w, b.h);
            // Stepping one cell right moves the box by one cell of pixels.
            let b2 = window_pixel_box(&ctx.pyramid, level, 0, 1);
            assert!(((b2.x1 - b.x1) * lv.scale - cell).abs() < 1e-9);
        }
        // At a level with scale 1.0 the box is in native pixels.
        let native = ctx
            .pyramid
            .levels
            .iter()
            .position(|l| (l.scale - 1.0).abs() < 1e-12)
            .expect("identity level exists");
        let b = window_pixel_box(&ctx.pyramid, native, 2, 3);
        let cell = ctx.pyramid.levels[native].grid.cell_size() as f64;
        assert_eq!(b.x1, (3.0 + 1.0) * cell);
        assert_eq!(b.y1, (2.0 + 1.0) * cell);
        assert_eq!(b.w, cell * TEMPLATE_CELLS as f64);
    }

    #[test]
    fn tracked_positions_agree_with_values() {
        let img = quantized_noise(25, 224, 192);
        let bank = random_bank(26, 4);
        let ctx = ImageResponses::build(&img, &bank, &PyramidConfig::default()).unwrap();
        let b = BBox::new(16.0, 12.0, 180.0, 150.0);
        for scheme in [PoolingScheme::FiveRegion, PoolingScheme::SevenRegion] {
            let plain = ctx.featurize(&b, scheme).unwrap();
            let (tracked, firings) = ctx.featurize_with_positions(&b, scheme).unwrap();
            // Tracking must not perturb the feature itself.
            assert_eq!(plain.values, tracked.values);
            assert_eq!(firings.len(), tracked.values.len());
            let nr = scheme.regions().len();
            let mut located = 0usize;
            for (i, f) in firings.iter().enumerate() {
                match f {
                    Some(f) => {
                        located += 1;
                        // The firing's score is the pooled value, and the
                        // response map agrees at its coordinates.
                        assert_eq!(f.score, tracked.values[i]);
                        let e = i / nr;
                        assert_eq!(ctx.responses[f.level][e].at(f.r, f.c), f.score);
                        // Its pixel window lands inside the image bounds.
                        assert!(f.pixel_box.x1 >= -1e-9 && f.pixel_box.y1 >= -1e-9);
                        assert!(f.pixel_box.x2() <= 224.0 + 1e-9);
                        assert!(f.pixel_box.y2() <= 192.0 + 1e-9);
                    }
                    None => {
                        // Sentinel slots carry the element's minimum pooled
                        // value, copied from some other (located) region.
                        let e = i / nr;
                        let min = (0..nr)
                            .filter(|ri| firings[e * nr + ri].is_some())
                            .map(|ri| tracked.values[e * nr + ri])
                            .fold(f64::INFINITY, f64::min);
                        assert_eq!(tracked.values[i], min);
                    }
                }
            }
            // The whole-box region always has a located maximum.
            for e in 0..4 {
                assert!(firings[e * nr].is_some());
            }
            assert!(located >= 4, "at least the whole-box regions fire");
        }
    }

    #[test]
    fn tracked_positions_on_fallback_path_are_in_image_coords() {
        let img = quantized_noise(27, 256, 256);
        let bank = random_bank(28, 2);
        let ctx = ImageResponses::build(&img, &bank, &PyramidConfig::default()).unwrap();
        // Below the template floor: exercises the crop-and-upsample path.
        let b = BBox::new(100.0, 80.0, 40.0, 40.0);
        let plain = ctx.featurize(&b, PoolingScheme::FiveRegion).unwrap();
        let (tracked, firings) = ctx
            .featurize_with_positions(&b, PoolingScheme::FiveRegion)
            .unwrap();
        assert_eq!(plain.values, tracked.values);
        let any = firings.iter().flatten().count();
        assert!(any > 0, "fallback path still locates maxima");
        for f in firings.iter().flatten() {
            // Crop origin is (100, 80): windows must sit at or after it,
            // i.e. the offset was applied (crop-local coords would allow
            // x1 well below 100 only via the 1-cell margin, never < 90).
            assert!(f.pixel_box.x1 >= 90.0, "x1={}", f.pixel_box.x1);
            assert!(f.pixel_box.y1 >= 70.0, "y1={}", f.pixel_box.y1);
            assert!(f.pixel_box.x2() <= 150.0, "x2={}", f.pixel_box.x2());
            assert!(f.pixel_box.y2() <= 130.0, "y2={}", f.pixel_box.y2());
        }
    }
}
