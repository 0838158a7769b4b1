//! Minimal differentiable layers with explicit backward passes.
//!
//! Activations are flat row-major buffers tagged with a [`Dims`] value. A
//! [`Network`] is an ordered list of layers followed by optional L2
//! normalisation; it can return gradients with respect to its input, its
//! parameters, or both.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape};

/// Activation layout flowing between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dims {
    /// Spatial map, H×W×C.
    Map(Shape),
    /// `rows` tokens of width `width`; a plain vector is a single row.
    Rows { rows: usize, width: usize },
}

impl Dims {
    pub fn len(&self) -> usize {
        match *self {
            Dims::Map(s) => s.len(),
            Dims::Rows { rows, width } => rows * width,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T> {
    /// 3×3 convolution, zero padding 1. Weight layout `[ky][kx][in][out]`.
    Conv3x3 { input: Shape, out_c: usize, stride: usize, weight: Vec<T>, bias: Vec<T> },
    Tanh,
    /// Flattens any layout into one row.
    Flatten,
    /// Row-wise affine map `y = x·W + b`, weight layout `[in][out]`.
    Dense { in_dim: usize, out_dim: usize, weight: Vec<T>, bias: Vec<T> },
    /// Splits a spatial map into non-overlapping `patch × patch` tokens.
    Patchify { patch: usize },
    /// Adds a learned `[rows][width]` table.
    AddPositional { table: Vec<T> },
    /// Single-head self-attention with residual: `X + softmax(QKᵀ/√d)·V·Wo`.
    SelfAttention { dim: usize, wq: Vec<T>, wk: Vec<T>, wv: Vec<T>, wo: Vec<T> },
    /// Averages token rows.
    MeanRows,
}

#[derive(Debug, Clone)]
struct AttentionCache<T> {
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    attn: Vec<T>,
    mixed: Vec<T>,
}

// c[n×m] (+)= a[n×k] · b[k×m]
fn matmul<T: Real>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut c = vec![T::zero(); n * m];
    for i in 0..n {
        let row = &mut c[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (cv, &bv) in row.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

// aᵀ[k×n] · b[n×m] with a stored as n×k
fn matmul_at_b<T: Real>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut c = vec![T::zero(); k * m];
    for i in 0..n {
        let brow = &b[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let row = &mut c[p * m..(p + 1) * m];
            for (cv, &bv) in row.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

// a[n×k] · bᵀ with b stored as m×k
fn matmul_a_bt<T: Real>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut c = vec![T::zero(); n * m];
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b[j * k..(j + 1) * k];
            c[i * m + j] = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
        }
    }
    c
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn conv_out(n: usize, stride: usize) -> usize {
    (n - 1) / stride + 1
}

impl<T: Real> Layer<T> {
    pub fn output_dims(&self, input: Dims) -> Result<Dims> {
        let bad = |what: &str| Err(Error::Contract(format!("{what} cannot take input {input:?}")));
        Ok(match (self, input) {
            (Layer::Conv3x3 { input: s, out_c, stride, .. }, Dims::Map(got)) if *s == got => {
                Dims::Map(Shape::new(conv_out(s.h, *stride), conv_out(s.w, *stride), *out_c))
            }
            (Layer::Conv3x3 { .. }, _) => return bad("conv3x3"),
            (Layer::Tanh, d) => d,
            (Layer::Flatten, d) => Dims::Rows { rows: 1, width: d.len() },
            (Layer::Dense { in_dim, out_dim, .. }, Dims::Rows { rows, width }) if width == *in_dim => {
                Dims::Rows { rows, width: *out_dim }
            }
            (Layer::Dense { .. }, _) => return bad("dense"),
            (Layer::Patchify { patch }, Dims::Map(s)) if s.h % patch == 0 && s.w % patch == 0 => {
                Dims::Rows { rows: (s.h / patch) * (s.w / patch), width: patch * patch * s.c }
            }
            (Layer::Patchify { .. }, _) => return bad("patchify"),
            (Layer::AddPositional { table }, d @ Dims::Rows { .. }) if table.len() == d.len() => d,
            (Layer::AddPositional { .. }, _) => return bad("positional table"),
            (Layer::SelfAttention { dim, .. }, d @ Dims::Rows { width, .. }) if width == *dim => d,
            (Layer::SelfAttention { .. }, _) => return bad("self-attention"),
            (Layer::MeanRows, Dims::Rows { width, .. }) => Dims::Rows { rows: 1, width },
            (Layer::MeanRows, _) => return bad("mean over rows"),
        })
    }

    /// Parameter blocks in declared order.
    pub fn params(&self) -> Vec<&[T]> {
        match self {
            Layer::Conv3x3 { weight, bias, .. } | Layer::Dense { weight, bias, .. } => vec![weight, bias],
            Layer::AddPositional { table } => vec![table],
            Layer::SelfAttention { wq, wk, wv, wo, .. } => vec![wq, wk, wv, wo],
            Layer::Tanh | Layer::Flatten | Layer::Patchify { .. } | Layer::MeanRows => vec![],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<T>> {
        match self {
            Layer::Conv3x3 { weight, bias, .. } | Layer::Dense { weight, bias, .. } => vec![weight, bias],
            Layer::AddPositional { table } => vec![table],
            Layer::SelfAttention { wq, wk, wv, wo, .. } => vec![wq, wk, wv, wo],
            Layer::Tanh | Layer::Flatten | Layer::Patchify { .. } | Layer::MeanRows => vec![],
        }
    }

    pub fn cast<U: Real>(&self) -> Layer<U> {
        let c = |v: &Vec<T>| v.iter().map(|&x| U::cast_from(x)).collect::<Vec<U>>();
        match self {
            Layer::Conv3x3 { input, out_c, stride, weight, bias } => {
                Layer::Conv3x3 { input: *input, out_c: *out_c, stride: *stride, weight: c(weight), bias: c(bias) }
            }
            Layer::Tanh => Layer::Tanh,
            Layer::Flatten => Layer::Flatten,
            Layer::Dense { in_dim, out_dim, weight, bias } => {
                Layer::Dense { in_dim: *in_dim, out_dim: *out_dim, weight: c(weight), bias: c(bias) }
            }
            Layer::Patchify { patch } => Layer::Patchify { patch: *patch },
            Layer::AddPositional { table } => Layer::AddPositional { table: c(table) },
            Layer::SelfAttention { dim, wq, wk, wv, wo } => {
                Layer::SelfAttention { dim: *dim, wq: c(wq), wk: c(wk), wv: c(wv), wo: c(wo) }
            }
            Layer::MeanRows => Layer::MeanRows,
        }
    }

    fn forward(&self, x: &[T], dims: Dims) -> (Vec<T>, Option<AttentionCache<T>>) {
        match self {
            Layer::Conv3x3 { input, out_c, stride, weight, bias } => {
                (conv_forward(x, *input, *out_c, *stride, weight, bias), None)
            }
            Layer::Tanh => (x.iter().map(|v| v.tanh()).collect(), None),
            Layer::Flatten => (x.to_vec(), None),
            Layer::Dense { in_dim, out_dim, weight, bias } => {
                let rows = x.len() / in_dim;
                let mut y = matmul(x, weight, rows, *in_dim, *out_dim);
                for r in 0..rows {
                    add_into(&mut y[r * out_dim..(r + 1) * out_dim], bias);
                }
                (y, None)
            }
            Layer::Patchify { patch } => {
                let Dims::Map(s) = dims else { unreachable!("checked by output_dims") };
                (patchify(x, s, *patch), None)
            }
            Layer::AddPositional { table } => (x.iter().zip(table).map(|(&a, &b)| a + b).collect(), None),
            Layer::SelfAttention { dim, wq, wk, wv, wo } => {
                let d = *dim;
                let n = x.len() / d;
                let q = matmul(x, wq, n, d, d);
                let k = matmul(x, wk, n, d, d);
                let v = matmul(x, wv, n, d, d);
                let scale = T::lit(1.0 / (d as f64).sqrt());
                let mut attn = matmul_a_bt(&q, &k, n, d, n);
                for row in attn.chunks_mut(n) {
                    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                    let mut z = T::zero();
                    for a in row.iter_mut() {
                        *a = ((*a - m) * scale).exp();
                        z += *a;
                    }
                    for a in row.iter_mut() {
                        *a = *a / z;
                    }
                }
                let mixed = matmul(&attn, &v, n, n, d);
                let mut y = matmul(&mixed, wo, n, d, d);
                add_into(&mut y, x);
                (y, Some(AttentionCache { q, k, v, attn, mixed }))
            }
            Layer::MeanRows => {
                let Dims::Rows { rows, width } = dims else { unreachable!("checked by output_dims") };
                let mut y = vec![T::zero(); width];
                for r in 0..rows {
                    add_into(&mut y, &x[r * width..(r + 1) * width]);
                }
                let inv = T::lit(1.0 / rows as f64);
                (y.into_iter().map(|v| v * inv).collect(), None)
            }
        }
    }

    /// Backward pass. `grads`, when given, receives parameter gradients added
    /// onto the existing values (one buffer per parameter block).
    #[allow(clippy::too_many_arguments)]
    fn backward(
        &self,
        x: &[T],
        y: &[T],
        dims: Dims,
        aux: Option<&AttentionCache<T>>,
        g: &[T],
        grads: Option<&mut [Vec<T>]>,
        need_input: bool,
    ) -> Vec<T> {
        match self {
            Layer::Conv3x3 { input, out_c, stride, weight, .. } => {
                conv_backward(x, *input, *out_c, *stride, weight, g, grads, need_input)
            }
            Layer::Tanh => g.iter().zip(y).map(|(&gv, &yv)| gv * (T::one() - yv * yv)).collect(),
            Layer::Flatten => g.to_vec(),
            Layer::Dense { in_dim, out_dim, weight, .. } => {
                let rows = x.len() / in_dim;
                if let Some(grads) = grads {
                    let gw = matmul_at_b(x, g, rows, *in_dim, *out_dim);
                    add_into(&mut grads[0], &gw);
                    for r in 0..rows {
                        add_into(&mut grads[1], &g[r * out_dim..(r + 1) * out_dim]);
                    }
                }
                if need_input {
                    matmul_a_bt(g, weight, rows, *out_dim, *in_dim)
                } else {
                    Vec::new()
                }
            }
            Layer::Patchify { patch } => {
                let Dims::Map(s) = dims else { unreachable!() };
                unpatchify(g, s, *patch)
            }
            Layer::AddPositional { .. } => {
                if let Some(grads) = grads {
                    add_into(&mut grads[0], g);
                }
                g.to_vec()
            }
            Layer::SelfAttention { dim, wq, wk, wv, wo } => {
                let cache = aux.expect("attention cache");
                let d = *dim;
                let n = x.len() / d;
                let scale = T::lit(1.0 / (d as f64).sqrt());
                let d_mixed = matmul_a_bt(g, wo, n, d, d);
                let d_attn = matmul_a_bt(&d_mixed, &cache.v, n, d, n);
                let d_v = matmul_at_b(&cache.attn, &d_mixed, n, n, d);
                let mut d_scores = vec![T::zero(); n * n];
                for i in 0..n {
                    let a = &cache.attn[i * n..(i + 1) * n];
                    let da = &d_attn[i * n..(i + 1) * n];
                    let dot: T = a.iter().zip(da).map(|(&p, &q)| p * q).sum();
                    for j in 0..n {
                        d_scores[i * n + j] = a[j] * (da[j] - dot) * scale;
                    }
                }
                let d_q = matmul(&d_scores, &cache.k, n, n, d);
                let d_k = matmul_at_b(&d_scores, &cache.q, n, n, d);
                if let Some(grads) = grads {
                    add_into(&mut grads[0], &matmul_at_b(x, &d_q, n, d, d));
                    add_into(&mut grads[1], &matmul_at_b(x, &d_k, n, d, d));
                    add_into(&mut grads[2], &matmul_at_b(x, &d_v, n, d, d));
                    add_into(&mut grads[3], &matmul_at_b(&cache.mixed, g, n, d, d));
                }
                let mut dx = g.to_vec();
                add_into(&mut dx, &matmul_a_bt(&d_q, wq, n, d, d));
                add_into(&mut dx, &matmul_a_bt(&d_k, wk, n, d, d));
                add_into(&mut dx, &matmul_a_bt(&d_v, wv, n, d, d));
                dx
            }
            Layer::MeanRows => {
                let Dims::Rows { rows, width } = dims else { unreachable!() };
                let inv = T::lit(1.0 / rows as f64);
                let mut dx = Vec::with_capacity(rows * width);
                for _ in 0..rows {
                    dx.extend(g.iter().map(|&v| v * inv));
                }
                dx
            }
        }
    }
}

fn conv_forward<T: Real>(x: &[T], s: Shape, out_c: usize, stride: usize, w: &[T], b: &[T]) -> Vec<T> {
    let (oh, ow) = (conv_out(s.h, stride), conv_out(s.w, stride));
    let in_c = s.c;
    let mut y = Vec::with_capacity(oh * ow * out_c);
    for oy in 0..oh {
        for ox in 0..ow {
            let mut acc = b.to_vec();
            for ky in 0..3 {
                let iy = (oy * stride + ky) as isize - 1;
                if iy < 0 || iy >= s.h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let ix = (ox * stride + kx) as isize - 1;
                    if ix < 0 || ix >= s.w as isize {
                        continue;
                    }
                    let xi = s.index(iy as usize, ix as usize, 0);
                    let wbase = (ky * 3 + kx) * in_c * out_c;
                    for ci in 0..in_c {
                        let xv = x[xi + ci];
                        let wrow = &w[wbase + ci * out_c..wbase + (ci + 1) * out_c];
                        for (a, &wv) in acc.iter_mut().zip(wrow) {
                            *a += xv * wv;
                        }
                    }
                }
            }
            y.extend_from_slice(&acc);
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
fn conv_backward<T: Real>(
    x: &[T],
    s: Shape,
    out_c: usize,
    stride: usize,
    w: &[T],
    g: &[T],
    mut grads: Option<&mut [Vec<T>]>,
    need_input: bool,
) -> Vec<T> {
    let (oh, ow) = (conv_out(s.h, stride), conv_out(s.w, stride));
    let in_c = s.c;
    let mut dx = if need_input { vec![T::zero(); s.len()] } else { Vec::new() };
    for oy in 0..oh {
        for ox in 0..ow {
            let go = &g[(oy * ow + ox) * out_c..(oy * ow + ox + 1) * out_c];
            if let Some(grads) = grads.as_deref_mut() {
                add_into(&mut grads[1], go);
            }
            for ky in 0..3 {
                let iy = (oy * stride + ky) as isize - 1;
                if iy < 0 || iy >= s.h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let ix = (ox * stride + kx) as isize - 1;
                    if ix < 0 || ix >= s.w as isize {
                        continue;
                    }
                    let xi = s.index(iy as usize, ix as usize, 0);
                    let wbase = (ky * 3 + kx) * in_c * out_c;
                    for ci in 0..in_c {
                        let wrow = &w[wbase + ci * out_c..wbase + (ci + 1) * out_c];
                        if need_input {
                            dx[xi + ci] += wrow.iter().zip(go).map(|(&a, &b)| a * b).sum::<T>();
                        }
                        if let Some(grads) = grads.as_deref_mut() {
                            let xv = x[xi + ci];
                            let gw = &mut grads[0][wbase + ci * out_c..wbase + (ci + 1) * out_c];
                            for (a, &b) in gw.iter_mut().zip(go) {
                                *a += xv * b;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

fn patchify<T: Real>(x: &[T], s: Shape, p: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for py in 0..s.h / p {
        for px in 0..s.w / p {
            for y in 0..p {
                let start = s.index(py * p + y, px * p, 0);
                out.extend_from_slice(&x[start..start + p * s.c]);
            }
        }
    }
    out
}

fn unpatchify<T: Real>(g: &[T], s: Shape, p: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); s.len()];
    let mut k = 0;
    for py in 0..s.h / p {
        for px in 0..s.w / p {
            for y in 0..p {
                let start = s.index(py * p + y, px * p, 0);
                dx[start..start + p * s.c].copy_from_slice(&g[k..k + p * s.c]);
                k += p * s.c;
            }
        }
    }
    dx
}

/// Forward activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Trace<T> {
    acts: Vec<Vec<T>>,
    dims: Vec<Dims>,
    aux: Vec<Option<AttentionCache<T>>>,
    norm: Option<T>,
}

impl<T: Real> Trace<T> {
    /// Network output (normalised when the network normalises).
    pub fn output(&self) -> &[T] {
        self.acts.last().expect("non-empty trace")
    }
}

/// Layer stack with optional output L2 normalisation.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    input: Dims,
    layers: Vec<Layer<T>>,
    normalize: bool,
}

impl<T: Real> Network<T> {
    pub fn new(input: Dims, layers: Vec<Layer<T>>, normalize: bool) -> Result<Self> {
        let mut d = input;
        for l in &layers {
            d = l.output_dims(d)?;
        }
        Ok(Self { input, layers, normalize })
    }

    pub fn input_dims(&self) -> Dims {
        self.input
    }

    pub fn output_dim(&self) -> usize {
        self.layers.iter().fold(self.input, |d, l| l.output_dims(d).expect("validated")).len()
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn params(&self) -> Vec<&[T]> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn zero_grads(&self) -> Vec<Vec<T>> {
        self.params().iter().map(|p| vec![T::zero(); p.len()]).collect()
    }

    pub fn cast<U: Real>(&self) -> Network<U> {
        Network { input: self.input, layers: self.layers.iter().map(|l| l.cast()).collect(), normalize: self.normalize }
    }

    pub fn forward(&self, x: &[T]) -> Result<Trace<T>> {
        if x.len() != self.input.len() {
            return Err(Error::Contract(format!("network expects {} inputs, got {}", self.input.len(), x.len())));
        }
        let mut acts = vec![x.to_vec()];
        let mut dims = vec![self.input];
        let mut aux = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let d = *dims.last().unwrap();
            let (y, a) = l.forward(acts.last().unwrap(), d);
            dims.push(l.output_dims(d)?);
            acts.push(y);
            aux.push(a);
        }
        let mut norm = None;
        if self.normalize {
            let raw = acts.last().unwrap();
            let n = raw.iter().map(|&v| v * v).sum::<T>().sqrt().max(T::lit(1e-12));
            let y = raw.iter().map(|&v| v / n).collect();
            acts.push(y);
            norm = Some(n);
        }
        Ok(Trace { acts, dims, aux, norm })
    }

    /// Output only.
    pub fn infer(&self, x: &[T]) -> Result<Vec<T>> {
        let mut t = self.forward(x)?;
        Ok(t.acts.pop().unwrap())
    }

    /// Backpropagates `grad_out` (gradient w.r.t. the network output). Returns
    /// the input gradient when `need_input` is set; parameter gradients are
    /// accumulated into `grads` when given.
    pub fn backward(&self, trace: &Trace<T>, grad_out: &[T], mut grads: Option<&mut [Vec<T>]>, need_input: bool) -> Vec<T> {
        let mut g = grad_out.to_vec();
        let n_layers = self.layers.len();
        if let Some(n) = trace.norm {
            let y = trace.output();
            let dot: T = y.iter().zip(&g).map(|(&a, &b)| a * b).sum();
            g = g.iter().zip(y).map(|(&gv, &yv)| (gv - yv * dot) / n).collect();
        }
        let mut offsets = Vec::with_capacity(n_layers);
        let mut off = 0;
        for l in &self.layers {
            offsets.push(off);
            off += l.params().len();
        }
        for (i, l) in self.layers.iter().enumerate().rev() {
            if i == 0 && !need_input && grads.is_none() {
                break;
            }
            let n_blocks = l.params().len();
            let layer_grads = grads.as_deref_mut().map(|gr| &mut gr[offsets[i]..offsets[i] + n_blocks]);
            let want_input = i > 0 || need_input;
            g = l.backward(&trace.acts[i], &trace.acts[i + 1], trace.dims[i], trace.aux[i].as_ref(), &g, layer_grads, want_input);
        }
        if need_input {
            g
        } else {
            Vec::new()
        }
    }
}

/// Uniform Glorot-style initialisation.
pub fn glorot<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize, len: usize) -> Vec<f32> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..len).map(|_| rng.random_range(-a..a) as f32).collect()
}

pub fn gaussian<R: Rng + ?Sized>(rng: &mut R, std: f64, len: usize) -> Vec<f32> {
    let n = Normal::new(0.0, std).expect("valid std");
    (0..len).map(|_| n.sample(rng) as f32).collect()
}
