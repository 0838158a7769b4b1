//! The universal perturbation δ: initialisation, ℓ∞ projection, the local
//! crop-and-resize transform, application to images, resizing across input
//! resolutions, and the `UAPF` file format.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::ImageTensor;
use crate::error::{Error, Result};
use crate::tensor::{AreaRange, CropBox, Grid, Real, Resampler, Shape};

pub const UAP_MAGIC: &[u8; 4] = b"UAPF";
pub const UAP_VERSION: u16 = 1;

/// Budget stored as an exact rational on the `[0, 1]` pixel scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Epsilon {
    pub num: u64,
    pub den: u64,
}

impl Epsilon {
    pub fn new(num: u64, den: u64) -> Result<Self> {
        if den == 0 {
            return Err(Error::Config("epsilon denominator must be positive".into()));
        }
        Ok(Self { num, den })
    }

    /// `n/255`.
    pub const fn per_255(n: u64) -> Self {
        Self { num: n, den: 255 }
    }

    pub fn value(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// The budget in `f32`, the precision of stored perturbations.
    pub fn as_f32(&self) -> f32 {
        self.value() as f32
    }
}

impl fmt::Display for Epsilon {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl FromStr for Epsilon {
    type Err = Error;

    /// Accepts `n/d` or a decimal such as `0.05`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("cannot parse epsilon {s:?}"));
        if let Some((n, d)) = s.split_once('/') {
            return Epsilon::new(n.trim().parse().map_err(|_| bad())?, d.trim().parse().map_err(|_| bad())?);
        }
        let s = s.trim();
        let (int, frac) = s.split_once('.').unwrap_or((s, ""));
        if frac.len() > 12 || !frac.chars().all(|c| c.is_ascii_digit()) {
            return Err(bad());
        }
        let den = 10u64.pow(frac.len() as u32);
        let int: u64 = if int.is_empty() { 0 } else { int.parse().map_err(|_| bad())? };
        let frac_v: u64 = if frac.is_empty() { 0 } else { frac.parse().map_err(|_| bad())? };
        Epsilon::new(int * den + frac_v, den)
    }
}

/// Where a perturbation came from.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Provenance {
    /// Fingerprint of the surrogate model pair.
    pub source_model: String,
    pub source_arch: String,
    pub dataset: String,
    pub variant: String,
    pub seed: u64,
    pub steps: usize,
    #[serde(default)]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Uap {
    pub delta: Grid<f32>,
    pub epsilon: Epsilon,
    pub provenance: Provenance,
}

impl Uap {
    pub fn shape(&self) -> Shape {
        self.delta.shape()
    }

    pub fn linf(&self) -> f32 {
        self.delta.linf()
    }

    /// Hex SHA-256 of the serialised file.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(encode_uap(self)))
    }
}

/// Entries i.i.d. uniform on `[−ε, ε]`.
pub fn init_uap<R: Rng + ?Sized>(shape: Shape, epsilon: Epsilon, rng: &mut R) -> Uap {
    let eps = epsilon.as_f32();
    let data = if eps == 0.0 { vec![0.0; shape.len()] } else { (0..shape.len()).map(|_| rng.random_range(-eps..=eps)).collect() };
    Uap { delta: Grid::from_vec(shape, data).expect("sized"), epsilon, provenance: Provenance::default() }
}

/// Element-wise clamp to `[−ε, ε]`.
pub fn project_linf<T: Real>(delta: &Grid<T>, epsilon: T) -> Grid<T> {
    delta.map(|v| v.max(-epsilon).min(epsilon))
}

/// One draw of the local transform: a random crop of δ resized back to full
/// frame. Linear in δ, so it carries its own adjoint for backpropagation.
#[derive(Debug, Clone)]
pub struct LocalTransform {
    map: Resampler,
    crop: CropBox,
}

impl LocalTransform {
    pub fn sample<R: Rng + ?Sized>(shape: Shape, area: AreaRange, rng: &mut R) -> Self {
        Self::from_crop(shape, area.sample(shape, rng))
    }

    pub fn identity(shape: Shape) -> Self {
        Self::from_crop(shape, CropBox::full(shape))
    }

    pub fn from_crop(shape: Shape, crop: CropBox) -> Self {
        Self { map: Resampler::new(shape, crop, shape.h, shape.w), crop }
    }

    pub fn crop(&self) -> CropBox {
        self.crop
    }

    pub fn apply<T: Real>(&self, delta: &Grid<T>) -> Grid<T> {
        self.map.apply(delta)
    }

    /// Pulls a gradient w.r.t. the transformed perturbation back onto δ.
    pub fn pull_back<T: Real>(&self, grad: &[T]) -> Vec<T> {
        self.map.adjoint(grad)
    }
}

/// `A_s(δ)` for a fresh crop with area fraction uniform in `area`.
pub fn local_transform<R: Rng + ?Sized>(delta: &Grid<f32>, area: AreaRange, rng: &mut R) -> Grid<f32> {
    LocalTransform::sample(delta.shape(), area, rng).apply(delta)
}

/// `clamp(x + δ, 0, 1)`.
pub fn apply(image: &ImageTensor, delta: &Grid<f32>) -> Result<ImageTensor> {
    delta.ensure_shape(image.shape(), "apply perturbation")?;
    let data = image.as_slice().iter().zip(delta.as_slice()).map(|(&x, &d)| (x + d).clamp(0.0, 1.0)).collect();
    Grid::from_vec(image.shape(), data)
}

/// Bilinear resize to another input resolution, re-projected onto the ε ball.
pub fn resize_uap(uap: &Uap, new_shape: Shape) -> Result<Uap> {
    if new_shape.c != uap.shape().c || new_shape.h == 0 || new_shape.w == 0 {
        return Err(Error::Contract(format!("cannot resize {} perturbation to {new_shape}", uap.shape())));
    }
    if new_shape == uap.shape() {
        return Ok(uap.clone());
    }
    let resized = Resampler::resize(uap.shape(), new_shape.h, new_shape.w).apply(&uap.delta);
    let mut provenance = uap.provenance.clone();
    provenance.notes.push(format!("resized {} -> {}", uap.shape(), new_shape));
    Ok(Uap { delta: project_linf(&resized, uap.epsilon.as_f32()), epsilon: uap.epsilon, provenance })
}

pub(crate) fn encode_uap(uap: &Uap) -> Vec<u8> {
    let json = serde_json::to_vec(&uap.provenance).expect("provenance serialises");
    let s = uap.shape();
    let mut out = Vec::with_capacity(40 + json.len() + 4 * s.len());
    out.extend_from_slice(UAP_MAGIC);
    out.extend_from_slice(&UAP_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for v in [s.h, s.w, s.c] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&uap.epsilon.num.to_le_bytes());
    out.extend_from_slice(&uap.epsilon.den.to_le_bytes());
    for v in uap.delta.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub(crate) fn decode_uap(buf: &[u8]) -> Result<Uap> {
    let mut pos = 0;
    let mut take = |n: usize| -> Result<&[u8]> {
        if pos + n > buf.len() {
            return Err(Error::Format("truncated UAP file".into()));
        }
        pos += n;
        Ok(&buf[pos - n..pos])
    };
    if take(4)? != UAP_MAGIC {
        return Err(Error::Format("bad UAP magic".into()));
    }
    let version = u16::from_le_bytes(take(2)?.try_into().unwrap());
    if version != UAP_VERSION {
        return Err(Error::Format(format!("unsupported UAP version {version}")));
    }
    let len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let provenance: Provenance = serde_json::from_slice(take(len)?).map_err(|e| Error::Format(format!("corrupt provenance: {e}")))?;
    let mut dims = [0usize; 3];
    for d in &mut dims {
        *d = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    }
    let num = u64::from_le_bytes(take(8)?.try_into().unwrap());
    let den = u64::from_le_bytes(take(8)?.try_into().unwrap());
    let epsilon = Epsilon::new(num, den).map_err(|_| Error::Format("zero epsilon denominator".into()))?;
    let shape = Shape::new(dims[0], dims[1], dims[2]);
    let payload = take(shape.len() * 4)?;
    let data: Vec<f32> = payload.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
    if pos != buf.len() {
        return Err(Error::Format("trailing bytes after UAP payload".into()));
    }
    let eps = epsilon.as_f32();
    if let Some((i, v)) = data.iter().enumerate().find(|(_, v)| v.is_nan() || v.abs() > eps) {
        return Err(Error::Format(format!("entry {i} = {v} violates the budget {epsilon}")));
    }
    Ok(Uap { delta: Grid::from_vec(shape, data)?, epsilon, provenance })
}

pub fn save_uap(uap: &Uap, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_uap(uap))?;
    Ok(())
}

pub fn load_uap(path: impl AsRef<Path>) -> Result<Uap> {
    decode_uap(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const S: Shape = Shape::new(16, 12, 3);

    #[test]
    fn init_respects_the_budget() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let u = init_uap(S, Epsilon::per_255(12), &mut rng);
        assert!(u.linf() <= 12.0 / 255.0);
        let z = init_uap(S, Epsilon::new(0, 1).unwrap(), &mut rng);
        assert!(z.delta.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_mean_is_centred() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let eps = Epsilon::per_255(12);
        let u = init_uap(Shape::new(64, 64, 3), eps, &mut rng);
        let n = u.delta.as_slice().len() as f64;
        let mean = u.delta.as_slice().iter().map(|&v| v as f64).sum::<f64>() / n;
        let sigma = eps.value() / 3f64.sqrt();
        assert!(mean.abs() <= 3.0 * sigma / n.sqrt(), "mean {mean}");
    }

    #[test]
    fn projection_clamps_and_is_idempotent() {
        let g = Grid::from_vec(Shape::new(1, 2, 2), vec![0.5f32, -0.5, 0.01, 1.0]).unwrap();
        let p = project_linf(&g, 0.25);
        assert_eq!(p.as_slice(), &[0.25, -0.25, 0.01, 0.25]);
        assert_eq!(project_linf(&p, 0.25), p);
    }

    #[test]
    fn constant_field_is_invariant_under_local_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = Grid::filled(S, 0.03f32);
        for _ in 0..20 {
            let out = local_transform(&g, AreaRange::new(0.25, 1.0).unwrap(), &mut rng);
            assert!(out.as_slice().iter().all(|&v| v == 0.03));
        }
        let id = local_transform(&g, AreaRange::full(), &mut rng);
        assert_eq!(id, g);
    }

    #[test]
    fn apply_saturates_and_checks_shape() {
        let x = ImageTensor::filled(S, 1.0);
        let d = Grid::filled(S, 0.02f32);
        assert!(apply(&x, &d).unwrap().as_slice().iter().all(|&v| v == 1.0));
        let zero = Grid::zeros(S);
        assert_eq!(apply(&x, &zero).unwrap(), x);
        assert!(matches!(apply(&x, &Grid::zeros(Shape::new(8, 8, 3))), Err(Error::Contract(_))));
    }

    #[test]
    fn resize_to_same_shape_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u = init_uap(S, Epsilon::per_255(8), &mut rng);
        assert_eq!(resize_uap(&u, S).unwrap(), u);
        let r = resize_uap(&u, Shape::new(24, 20, 3)).unwrap();
        assert_eq!(r.shape(), Shape::new(24, 20, 3));
        assert!(r.linf() <= u.epsilon.as_f32());
        assert_eq!(r.provenance.notes.len(), 1);
    }

    #[test]
    fn epsilon_parsing() {
        assert_eq!("12/255".parse::<Epsilon>().unwrap(), Epsilon::per_255(12));
        assert_eq!("0.05".parse::<Epsilon>().unwrap(), Epsilon::new(5, 100).unwrap());
        assert_eq!("1".parse::<Epsilon>().unwrap().value(), 1.0);
        assert!("x/3".parse::<Epsilon>().is_err());
        assert!("1/0".parse::<Epsilon>().is_err());
    }

    #[test]
    fn tampered_payload_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let u = init_uap(S, Epsilon::per_255(12), &mut rng);
        let mut bytes = encode_uap(&u);
        assert_eq!(decode_uap(&bytes).unwrap(), u);
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&0.2f32.to_le_bytes());
        assert!(matches!(decode_uap(&bytes), Err(Error::Format(_))));
        let mut bad = encode_uap(&u);
        bad[1] = b'Z';
        assert!(matches!(decode_uap(&bad), Err(Error::Format(_))));
    }
}
