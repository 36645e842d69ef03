//! Axis-aligned boxes and the overlap arithmetic the rest of the pipeline
//! leans on. Boxes are stored as (x1, y1, w, h) with the origin at the top
//! left; all operations keep w and h non-negative.

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox<T> {
    pub x1: T,
    pub y1: T,
    pub w: T,
    pub h: T,
}

impl<T: Real> BBox<T> {
    pub fn new(x1: T, y1: T, w: T, h: T) -> Self {
        BBox { x1, y1, w, h }
    }

    /// Corner-form constructor; degenerate inputs collapse to zero extent.
    pub fn from_corners(x1: T, y1: T, x2: T, y2: T) -> Self {
        BBox {
            x1,
            y1,
            w: (x2 - x1).max(T::zero()),
            h: (y2 - y1).max(T::zero()),
        }
    }

    #[inline]
    pub fn x2(&self) -> T {
        self.x1 + self.w
    }

    #[inline]
    pub fn y2(&self) -> T {
        self.y1 + self.h
    }

    #[inline]
    pub fn area(&self) -> T {
        self.w * self.h
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.w <= T::zero() || self.h <= T::zero()
    }

    pub fn center(&self) -> (T, T) {
        let half = T::of(0.5);
        (self.x1 + self.w * half, self.y1 + self.h * half)
    }

    /// Intersection box; empty (w = h = 0) when the boxes do not overlap.
    pub fn intersect(&self, other: &Self) -> Self {
        let x1 = self.x1.max(other.x1);
        let y1 = self.y1.max(other.y1);
        let x2 = self.x2().min(other.x2());
        let y2 = self.y2().min(other.y2());
        BBox::from_corners(x1, y1, x2, y2)
    }

    /// Convert to another scalar width (used at file boundaries).
    pub fn cast<U: Real>(&self) -> BBox<U> {
        BBox {
            x1: U::of(self.x1.as_f64()),
            y1: U::of(self.y1.as_f64()),
            w: U::of(self.w.as_f64()),
            h: U::of(self.h.as_f64()),
        }
    }
}

/// Intersection-over-union in the continuous-area convention (no +1 pixel
/// bookkeeping). Empty boxes never overlap anything.
pub fn iou<T: Real>(a: &BBox<T>, b: &BBox<T>) -> T {
    if a.is_empty() || b.is_empty() {
        return T::zero();
    }
    let inter = a.intersect(b).area();
    if inter <= T::zero() {
        return T::zero();
    }
    let union = a.area() + b.area() - inter;
    inter / union
}

/// Grow a box about its center by `frac` of its size per axis
/// (`frac = 0.25` turns 100x100 into 125x125 around the same center).
pub fn dilate<T: Real>(b: &BBox<T>, frac: T) -> BBox<T> {
    let half = T::of(0.5);
    let dw = b.w * frac;
    let dh = b.h * frac;
    BBox {
        x1: b.x1 - dw * half,
        y1: b.y1 - dh * half,
        w: b.w + dw,
        h: b.h + dh,
    }
}

/// Clip a box to an image of `width` x `height` pixels. Errors when nothing
/// remains.
pub fn clip<T: Real>(b: &BBox<T>, width: T, height: T) -> Result<BBox<T>> {
    let clipped = b.intersect(&BBox::new(T::zero(), T::zero(), width, height));
    if clipped.is_empty() {
        return Err(Error::EmptyAfterClip {
            width: width.as_f64(),
            height: height.as_f64(),
        });
    }
    Ok(clipped)
}

/// Mirror a box horizontally inside an image of `width` pixels.
pub fn flip_box<T: Real>(b: &BBox<T>, width: T) -> BBox<T> {
    BBox {
        x1: width - b.x1 - b.w,
        y1: b.y1,
        w: b.w,
        h: b.h,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn iou_identical_is_one() {
        let b = BBox::new(3.0, 4.0, 10.0, 20.0);
        assert_relative_eq!(iou(&b, &b), 1.0);
    }

    #[test]
    fn iou_disjoint_is_zero() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        let b = BBox::new(20.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &b), 0.0);
        // Touching edges count as zero overlap.
        let c = BBox::new(10.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &c), 0.0);
    }

    #[test]
    fn iou_half_shift() {
        // Two 10x10 boxes offset by half a side: inter 50, union 150.
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        let b = BBox::new(5.0, 0.0, 10.0, 10.0);
        assert_relative_eq!(iou(&a, &b), 1.0 / 3.0);
    }

    #[test]
    fn iou_empty_box_is_zero() {
        let a = BBox::new(0.0, 0.0, 0.0, 10.0);
        let b = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &b), 0.0);
    }

    #[test]
    fn dilate_quarter_grows_area_25_percent_per_axis() {
        let b = BBox::new(10.0, 10.0, 100.0, 100.0);
        let d = dilate(&b, 0.25);
        assert_relative_eq!(d.w, 125.0);
        assert_relative_eq!(d.h, 125.0);
        // Centered growth keeps the center put.
        assert_relative_eq!(d.center().0, b.center().0);
        assert_relative_eq!(d.center().1, b.center().1);
        assert_relative_eq!(d.area() / b.area(), 1.25 * 1.25);
    }

    #[test]
    fn clip_trims_and_errors_when_empty() {
        let b = BBox::new(-5.0, -5.0, 20.0, 20.0);
        let c = clip(&b, 100.0, 100.0).unwrap();
        assert_eq!(c, BBox::new(0.0, 0.0, 15.0, 15.0));

        let outside = BBox::new(200.0, 0.0, 10.0, 10.0);
        assert!(matches!(
            clip(&outside, 100.0, 100.0),
            Err(Error::EmptyAfterClip { .. })
        ));
    }

    #[test]
    fn flip_is_involutive() {
        let b = BBox::new(10.0, 5.0, 30.0, 40.0);
        let f = flip_box(&b, 200.0);
        assert_eq!(f.x1, 160.0);
        assert_eq!(flip_box(&f, 200.0), b);
    }

    #[test]
    fn works_in_f32_too() {
        // Inter 2*4 = 8, union 32 - 8 = 24.
        let a: BBox<f32> = BBox::new(0.0, 0.0, 4.0, 4.0);
        let b = BBox::new(2.0, 0.0, 4.0, 4.0);
        assert_relative_eq!(iou(&a, &b), 1.0f32 / 3.0);
    }

    fn arb_box() -> impl Strategy<Value = BBox<f64>> {
        (0.0..500.0, 0.0..500.0, 0.5..300.0, 0.5..300.0)
            .prop_map(|(x, y, w, h)| BBox::new(x, y, w, h))
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b);
            let ba = iou(&b, &a);
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((0.0..=1.0 + 1e-12).contains(&ab));
        }

        #[test]
        fn dilate_area_matches_square_law(b in arb_box(), f in 0.0..1.0f64) {
            let d = dilate(&b, f);
            let expect = b.area() * (1.0 + f) * (1.0 + f);
            prop_assert!((d.area() - expect).abs() <= 1e-9 * expect.max(1.0));
        }

        #[test]
        fn clip_is_idempotent(b in arb_box()) {
            if let Ok(c1) = clip(&b, 400.0, 400.0) {
                let c2 = clip(&c1, 400.0, 400.0).unwrap();
                prop_assert_eq!(c1, c2);
            }
        }

        #[test]
        fn intersection_never_negative(a in arb_box(), b in arb_box()) {
            let i = a.intersect(&b);
            prop_assert!(i.w >= 0.0 && i.h >= 0.0);
        }
    }
}
