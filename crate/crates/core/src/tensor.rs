//! Scalar trait, H×W×C grids and the bilinear resampler shared by crops,
//! the local UAP transform and cross-architecture resizing.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::AddAssign;

use num_traits::{Float, NumCast};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floating point element type. `f32` is the working precision, `f64` is used
/// for gradient verification.
pub trait Real: Float + NumCast + Copy + Send + Sync + Debug + Default + Sum + AddAssign + 'static {
    #[inline]
    fn lit(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("f64 literal is representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        <f64 as NumCast>::from(self).unwrap_or(f64::NAN)
    }

    #[inline]
    fn cast_from<U: Real>(v: U) -> Self {
        Self::lit(v.as_f64())
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Height, width, channels of a pixel-space array.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Shape {
    pub const fn new(h: usize, w: usize, c: usize) -> Self {
        Self { h, w, c }
    }

    pub const fn len(&self) -> usize {
        self.h * self.w * self.c
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub const fn index(&self, y: usize, x: usize, ch: usize) -> usize {
        (y * self.w + x) * self.c + ch
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.h, self.w, self.c)
    }
}

/// Row-major H×W×C array.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Real> Grid<T> {
    pub fn zeros(shape: Shape) -> Self {
        Self { shape, data: vec![T::zero(); shape.len()] }
    }

    pub fn filled(shape: Shape, value: T) -> Self {
        Self { shape, data: vec![value; shape.len()] }
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::Contract(format!(
                "grid of shape {shape} needs {} values, got {}",
                shape.len(),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, ch: usize) -> T {
        self.data[self.shape.index(y, x, ch)]
    }

    pub fn cast<U: Real>(&self) -> Grid<U> {
        Grid { shape: self.shape, data: self.data.iter().map(|&v| U::cast_from(v)).collect() }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Grid { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Largest absolute entry.
    pub fn linf(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn min_value(&self) -> T {
        self.data.iter().copied().fold(T::infinity(), T::min)
    }

    pub fn max_value(&self) -> T {
        self.data.iter().copied().fold(T::neg_infinity(), T::max)
    }

    pub fn ensure_shape(&self, expected: Shape, what: &str) -> Result<()> {
        if self.shape != expected {
            return Err(Error::Contract(format!("{what}: expected shape {expected}, got {}", self.shape)));
        }
        Ok(())
    }
}

/// Axis-aligned crop in pixel-centre coordinates. The crop spans sample
/// positions `y0 ..= y0 + h - 1` and `x0 ..= x0 + w - 1`, so a full-frame crop
/// of an H×W grid is `{0, 0, H, W}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropBox {
    pub y0: f64,
    pub x0: f64,
    pub h: f64,
    pub w: f64,
}

/// Smallest crop side in pixels.
pub const MIN_CROP_SIDE: f64 = 2.0;

impl CropBox {
    pub fn full(shape: Shape) -> Self {
        Self { y0: 0.0, x0: 0.0, h: shape.h as f64, w: shape.w as f64 }
    }

    /// Square-aspect crop covering `area_fraction` of the frame, placed at
    /// relative offsets `(fy, fx) ∈ [0,1]²` of the free range.
    pub fn from_fraction(shape: Shape, area_fraction: f64, fy: f64, fx: f64) -> Self {
        let side = area_fraction.clamp(0.0, 1.0).sqrt();
        let h = (side * shape.h as f64).clamp(MIN_CROP_SIDE.min(shape.h as f64), shape.h as f64);
        let w = (side * shape.w as f64).clamp(MIN_CROP_SIDE.min(shape.w as f64), shape.w as f64);
        let y0 = fy.clamp(0.0, 1.0) * (shape.h as f64 - h);
        let x0 = fx.clamp(0.0, 1.0) * (shape.w as f64 - w);
        Self { y0, x0, h, w }
    }
}

/// Validated `(lo, hi)` crop area fractions with `0 < lo <= hi <= 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AreaRange {
    pub lo: f64,
    pub hi: f64,
}

impl AreaRange {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!("area range ({lo}, {hi}) must satisfy 0 < lo <= hi <= 1")));
        }
        Ok(Self { lo, hi })
    }

    pub const fn full() -> Self {
        Self { lo: 1.0, hi: 1.0 }
    }

    pub fn is_full(&self) -> bool {
        self.lo == 1.0 && self.hi == 1.0
    }

    /// Draws a crop with area fraction uniform on `[lo, hi]` and uniform position.
    pub fn sample<R: rand::Rng + ?Sized>(&self, shape: Shape, rng: &mut R) -> CropBox {
        let area = if self.lo == self.hi { self.lo } else { rng.random_range(self.lo..=self.hi) };
        let fy: f64 = rng.random();
        let fx: f64 = rng.random();
        CropBox::from_fraction(shape, area, fy, fx)
    }
}

#[derive(Debug, Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

fn taps(start: f64, extent: f64, src_len: usize, out_len: usize) -> Vec<Tap> {
    let step = if out_len > 1 { (extent - 1.0) / (out_len as f64 - 1.0) } else { 0.0 };
    let offset = if out_len > 1 { 0.0 } else { (extent - 1.0) / 2.0 };
    let last = src_len - 1;
    (0..out_len)
        .map(|u| {
            let pos = (start + offset + u as f64 * step).clamp(0.0, last as f64);
            let lo = (pos.floor() as usize).min(last);
            let hi = (lo + 1).min(last);
            Tap { lo, hi, frac: if hi == lo { 0.0 } else { pos - lo as f64 } }
        })
        .collect()
}

/// Bilinear resampling of a crop of a source grid onto an output grid, kept
/// as an explicit linear map so it can be applied forward and transposed.
///
/// Sampling is corner-aligned: output row `u` of `H_out` reads source row
/// `y0 + u·(h−1)/(H_out−1)`.
#[derive(Debug, Clone)]
pub struct Resampler {
    src: Shape,
    dst: Shape,
    rows: Vec<Tap>,
    cols: Vec<Tap>,
}

impl Resampler {
    pub fn new(src: Shape, crop: CropBox, out_h: usize, out_w: usize) -> Self {
        let dst = Shape::new(out_h, out_w, src.c);
        Self {
            src,
            dst,
            rows: taps(crop.y0, crop.h, src.h, out_h),
            cols: taps(crop.x0, crop.w, src.w, out_w),
        }
    }

    /// Plain resize of the full frame.
    pub fn resize(src: Shape, out_h: usize, out_w: usize) -> Self {
        Self::new(src, CropBox::full(src), out_h, out_w)
    }

    pub fn src_shape(&self) -> Shape {
        self.src
    }

    pub fn dst_shape(&self) -> Shape {
        self.dst
    }

    /// Forward resampling. Accumulates in `f64` and clamps each output into
    /// the hull of its four source taps, so the result is a convex combination
    /// of the inputs up to rounding in the output type.
    pub fn apply<T: Real>(&self, src: &Grid<T>) -> Grid<T> {
        assert_eq!(src.shape(), self.src, "resampler source shape");
        let c = self.src.c;
        let s = src.as_slice();
        let mut out = Vec::with_capacity(self.dst.len());
        for ry in &self.rows {
            for rx in &self.cols {
                let i00 = self.src.index(ry.lo, rx.lo, 0);
                let i01 = self.src.index(ry.lo, rx.hi, 0);
                let i10 = self.src.index(ry.hi, rx.lo, 0);
                let i11 = self.src.index(ry.hi, rx.hi, 0);
                for ch in 0..c {
                    let (a, b, cc, d) = (s[i00 + ch], s[i01 + ch], s[i10 + ch], s[i11 + ch]);
                    let top = a.as_f64() * (1.0 - rx.frac) + b.as_f64() * rx.frac;
                    let bottom = cc.as_f64() * (1.0 - rx.frac) + d.as_f64() * rx.frac;
                    let v = T::lit(top * (1.0 - ry.frac) + bottom * ry.frac);
                    let lo = a.min(b).min(cc).min(d);
                    let hi = a.max(b).max(cc).max(d);
                    out.push(v.max(lo).min(hi));
                }
            }
        }
        Grid { shape: self.dst, data: out }
    }

    /// Transpose of [`Resampler::apply`]: scatters an output-space gradient
    /// back onto the source grid.
    pub fn adjoint<T: Real>(&self, grad_out: &[T]) -> Vec<T> {
        assert_eq!(grad_out.len(), self.dst.len(), "resampler adjoint length");
        let c = self.src.c;
        let mut g = vec![T::zero(); self.src.len()];
        let mut k = 0;
        for ry in &self.rows {
            let wy0 = T::lit(1.0 - ry.frac);
            let wy1 = T::lit(ry.frac);
            for rx in &self.cols {
                let wx0 = T::lit(1.0 - rx.frac);
                let wx1 = T::lit(rx.frac);
                let i00 = self.src.index(ry.lo, rx.lo, 0);
                let i01 = self.src.index(ry.lo, rx.hi, 0);
                let i10 = self.src.index(ry.hi, rx.lo, 0);
                let i11 = self.src.index(ry.hi, rx.hi, 0);
                for ch in 0..c {
                    let v = grad_out[k];
                    k += 1;
                    g[i00 + ch] += v * wy0 * wx0;
                    g[i01 + ch] += v * wy0 * wx1;
                    g[i10 + ch] += v * wy1 * wx0;
                    g[i11 + ch] += v * wy1 * wx1;
                }
            }
        }
        g
    }
}

/// Bilinear resize of a whole grid.
pub fn resize_bilinear<T: Real>(src: &Grid<T>, out_h: usize, out_w: usize) -> Grid<T> {
    if src.shape().h == out_h && src.shape().w == out_w {
        return src.clone();
    }
    Resampler::resize(src.shape(), out_h, out_w).apply(src)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(f64::MIN_POSITIVE)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(shape: Shape) -> Grid<f64> {
        Grid::from_vec(shape, (0..shape.len()).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap()
    }

    #[test]
    fn full_crop_is_identity() {
        let g = ramp(Shape::new(9, 7, 2));
        let out = Resampler::new(g.shape(), CropBox::full(g.shape()), 9, 7).apply(&g);
        assert_eq!(out, g);
    }

    #[test]
    fn adjoint_matches_dot_product_identity() {
        let src = Shape::new(6, 5, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let crop = AreaRange::new(0.3, 0.9).unwrap().sample(src, &mut rng);
        let map = Resampler::new(src, crop, 8, 4);
        let x = ramp(src);
        let y: Vec<f64> = (0..map.dst_shape().len()).map(|i| (i as f64 * 1.3).cos()).collect();
        let ax = map.apply(&x);
        let lhs: f64 = ax.as_slice().iter().zip(&y).map(|(a, b)| a * b).sum();
        let aty = map.adjoint(&y);
        let rhs: f64 = x.as_slice().iter().zip(&aty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12, "{lhs} vs {rhs}");
    }

    #[test]
    fn degenerate_crop_is_clamped_to_two_pixels() {
        let crop = CropBox::from_fraction(Shape::new(64, 64, 3), 1e-6, 0.5, 0.5);
        assert_eq!(crop.h, MIN_CROP_SIDE);
        assert_eq!(crop.w, MIN_CROP_SIDE);
    }

    #[test]
    fn area_range_rejects_bad_bounds() {
        assert!(AreaRange::new(0.0, 1.0).is_err());
        assert!(AreaRange::new(0.6, 0.5).is_err());
        assert!(AreaRange::new(0.5, 1.1).is_err());
        assert!(AreaRange::new(1.0, 1.0).is_ok());
    }
}
