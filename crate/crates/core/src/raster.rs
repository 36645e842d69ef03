//! In-memory RGB raster with the handful of pixel operations the pipeline
//! needs: load/save, bilinear resize, horizontal flip, crop, and 2x
//! upsampling. Values live in [0, 1] interleaved RGB.

use std::path::Path;

use crate::error::Result;
use crate::scalar::Real;

#[derive(Debug, Clone)]
pub struct RasterImage<T> {
    width: u32,
    height: u32,
    /// Interleaved RGB, row-major: data[(y*width + x)*3 + c].
    data: Vec<T>,
}

impl<T: Real> RasterImage<T> {
    pub fn new(width: u32, height: u32) -> Self {
        RasterImage {
            width,
            height,
            data: vec![T::zero(); (width as usize) * (height as usize) * 3],
        }
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> [f64; 3]) -> Self {
        let mut img = RasterImage::new(width, height);
        for y in 0..height {
            for x in 0..width {
                let px = f(x, y);
                img.set(x, y, [T::of(px[0]), T::of(px[1]), T::of(px[2])]);
            }
        }
        img
    }

    pub fn from_rgb8(width: u32, height: u32, rgb: &[u8]) -> Self {
        assert_eq!(rgb.len(), width as usize * height as usize * 3);
        let scale = T::of(1.0 / 255.0);
        RasterImage {
            width,
            height,
            data: rgb.iter().map(|&v| T::of(v as f64) * scale).collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)?.into_rgb8();
        Ok(Self::from_rgb8(img.width(), img.height(), img.as_raw()))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let img = image::RgbImage::from_raw(self.width, self.height, buf)
            .expect("buffer sized from dimensions");
        img.save(path)?;
        Ok(())
    }

    #[inline]
    pub fn width(&self) -> u32 {
        self.width
    }

    #[inline]
    pub fn height(&self) -> u32 {
        self.height
    }

    /// Interleaved RGB, row-major: `data[(y*width + x)*3 + c]`.
    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> [T; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, px: [T; 3]) {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        self.data[i] = px[0];
        self.data[i + 1] = px[1];
        self.data[i + 2] = px[2];
    }

    /// Clamped pixel fetch (replicates the border).
    #[inline]
    fn get_clamped(&self, x: i64, y: i64) -> [T; 3] {
        let xc = x.clamp(0, self.width as i64 - 1) as u32;
        let yc = y.clamp(0, self.height as i64 - 1) as u32;
        self.get(xc, yc)
    }

    /// Bilinear resample to `new_w` x `new_h` with half-pixel center
    /// alignment (the usual convention: destination pixel centers map to
    /// `(i + 0.5) * src/dst - 0.5` in source coordinates).
    pub fn resize(&self, new_w: u32, new_h: u32) -> Self {
        assert!(new_w > 0 && new_h > 0, "resize target must be non-empty");
        if new_w == self.width && new_h == self.height {
            return self.clone();
        }
        let sx = self.width as f64 / new_w as f64;
        let sy = self.height as f64 / new_h as f64;
        let mut out = RasterImage::new(new_w, new_h);
        for y in 0..new_h {
            let fy = (y as f64 + 0.5) * sy - 0.5;
            let y0 = fy.floor();
            let wy = T::of(fy - y0);
            let y0 = y0 as i64;
            for x in 0..new_w {
                let fx = (x as f64 + 0.5) * sx - 0.5;
                let x0 = fx.floor();
                let wx = T::of(fx - x0);
                let x0 = x0 as i64;

                let p00 = self.get_clamped(x0, y0);
                let p10 = self.get_clamped(x0 + 1, y0);
                let p01 = self.get_clamped(x0, y0 + 1);
                let p11 = self.get_clamped(x0 + 1, y0 + 1);
                let one = T::one();
                let mut px = [T::zero(); 3];
                for c in 0..3 {
                    let top = p00[c] * (one - wx) + p10[c] * wx;
                    let bot = p01[c] * (one - wx) + p11[c] * wx;
                    px[c] = top * (one - wy) + bot * wy;
                }
                out.set(x, y, px);
            }
        }
        out
    }

    /// Resample by a scale factor, rounding target dimensions to the nearest
    /// pixel (at least 1).
    pub fn rescale(&self, factor: f64) -> Self {
        let w = ((self.width as f64 * factor).round() as u32).max(1);
        let h = ((self.height as f64 * factor).round() as u32).max(1);
        self.resize(w, h)
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = RasterImage::new(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                out.set(self.width - 1 - x, y, self.get(x, y));
            }
        }
        out
    }

    /// Crop the integer pixel rectangle, clamped to the image bounds.
    pub fn crop(&self, x1: u32, y1: u32, w: u32, h: u32) -> Self {
        let x1 = x1.min(self.width.saturating_sub(1));
        let y1 = y1.min(self.height.saturating_sub(1));
        let w = w.min(self.width - x1).max(1);
        let h = h.min(self.height - y1).max(1);
        let mut out = RasterImage::new(w, h);
        for y in 0..h {
            for x in 0..w {
                out.set(x, y, self.get(x1 + x, y1 + y));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_identity_and_downsample_dims() {
        let img: RasterImage<f64> =
            RasterImage::from_fn(16, 8, |x, y| [(x + y) as f64 / 24.0; 3]);
        let same = img.resize(16, 8);
        assert_eq!(same.get(5, 3), img.get(5, 3));
        let half = img.rescale(0.5);
        assert_eq!((half.width(), half.height()), (8, 4));
    }

    #[test]
    fn resize_of_constant_stays_constant() {
        let img: RasterImage<f64> = RasterImage::from_fn(32, 32, |_, _| [0.25, 0.5, 0.75]);
        let small = img.resize(13, 9);
        for y in 0..9 {
            for x in 0..13 {
                let px = small.get(x, y);
                assert!((px[0] - 0.25).abs() < 1e-12);
                assert!((px[2] - 0.75).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn flip_round_trips_and_mirrors() {
        let img: RasterImage<f64> = RasterImage::from_fn(7, 3, |x, y| [x as f64, y as f64, 0.0]);
        let flipped = img.flip_horizontal();
        assert_eq!(flipped.get(0, 1)[0], 6.0);
        let back = flipped.flip_horizontal();
        for y in 0..3 {
            for x in 0..7 {
                assert_eq!(back.get(x, y), img.get(x, y));
            }
        }
    }

    #[test]
    fn resize_commutes_with_flip_to_rounding() {
        // Bilinear with center alignment is symmetric, so flip-then-resize
        // matches resize-then-flip up to float noise.
        let img: RasterImage<f64> = RasterImage::from_fn(40, 24, |x, y| {
            [((x as f64 * 0.7).sin() + (y as f64 * 0.3).cos()) * 0.25 + 0.5; 3]
        });
        let a = img.flip_horizontal().resize(29, 17);
        let b = img.resize(29, 17).flip_horizontal();
        for y in 0..17 {
            for x in 0..29 {
                assert!((a.get(x, y)[0] - b.get(x, y)[0]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn crop_extracts_expected_window() {
        let img: RasterImage<f64> =
            RasterImage::from_fn(10, 10, |x, y| [(y * 10 + x) as f64, 0.0, 0.0]);
        let c = img.crop(3, 4, 4, 2);
        assert_eq!((c.width(), c.height()), (4, 2));
        assert_eq!(c.get(0, 0)[0], 43.0);
        assert_eq!(c.get(3, 1)[0], 56.0);
    }
}
