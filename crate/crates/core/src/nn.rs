//! Small layer-sequential networks with hand-written reverse-mode gradients.
//!
//! The vocabulary is exactly what the prox auto-encoder needs: "same"-padded
//! 1×1 and 3×3 convolutions, ReLU/tanh/sigmoid, residual blocks
//! `x + conv(relu(conv(x)))` and per-channel affine maps. Tensors are NCHW.
//! Everything is generic over [`Scalar`] so the same code trains in `f32` and
//! is gradient-checked in `f64`.

use std::fmt::Debug;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, MrfError, Result};

pub trait Scalar:
    num_traits::Float + Default + Debug + Send + Sync + 'static + std::iter::Sum + std::ops::AddAssign
{
    /// C ← α·A·B + β·C with arbitrary strides (see `matrixmultiply`).
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize, k: usize, n: usize, alpha: Self,
        a: *const Self, rsa: isize, csa: isize,
        b: *const Self, rsb: isize, csb: isize,
        beta: Self, c: *mut Self, rsc: isize, csc: isize,
    );
    fn of(v: f64) -> Self;
    fn f64(self) -> f64;
}

impl Scalar for f32 {
    unsafe fn gemm(
        m: usize, k: usize, n: usize, alpha: f32,
        a: *const f32, rsa: isize, csa: isize,
        b: *const f32, rsb: isize, csb: isize,
        beta: f32, c: *mut f32, rsc: isize, csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
    fn of(v: f64) -> f32 {
        v as f32
    }
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    unsafe fn gemm(
        m: usize, k: usize, n: usize, alpha: f64,
        a: *const f64, rsa: isize, csa: isize,
        b: *const f64, rsb: isize, csb: isize,
        beta: f64, c: *mut f64, rsc: isize, csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
    fn of(v: f64) -> f64 {
        v
    }
    fn f64(self) -> f64 {
        self
    }
}

/// Row-major A (m×k) times B (k×n) into C (m×n), accumulating when `acc`.
fn mm<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize, acc: bool) {
    let beta = if acc { T::one() } else { T::zero() };
    unsafe { T::gemm(m, k, n, T::one(), a.as_ptr(), k as isize, 1, b.as_ptr(), n as isize, 1, beta, c.as_mut_ptr(), n as isize, 1) }
}

/// Aᵀ·B with A stored (k×m).
fn mm_at<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize, acc: bool) {
    let beta = if acc { T::one() } else { T::zero() };
    unsafe { T::gemm(m, k, n, T::one(), a.as_ptr(), 1, m as isize, b.as_ptr(), n as isize, 1, beta, c.as_mut_ptr(), n as isize, 1) }
}

/// A·Bᵀ with B stored (n×k).
fn mm_bt<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize, acc: bool) {
    let beta = if acc { T::one() } else { T::zero() };
    unsafe { T::gemm(m, k, n, T::one(), a.as_ptr(), k as isize, 1, b.as_ptr(), 1, k as isize, beta, c.as_mut_ptr(), n as isize, 1) }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4<T> {
    pub dims: [usize; 4],
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor4<T> {
    pub fn zeros(dims: [usize; 4]) -> Self {
        Tensor4 {
            dims,
            data: vec![T::zero(); dims.iter().product()],
        }
    }

    pub fn from_vec(dims: [usize; 4], data: Vec<T>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) || data.len() != dims.iter().product::<usize>() {
            return shape_err(format!("{} values for tensor {dims:?}", data.len()));
        }
        Ok(Tensor4 { dims, data })
    }

    pub fn batch(&self) -> usize {
        self.dims[0]
    }

    pub fn channels(&self) -> usize {
        self.dims[1]
    }

    pub fn plane(&self) -> usize {
        self.dims[2] * self.dims[3]
    }

    /// Slice of one batch item (C × H × W).
    pub fn item(&self, b: usize) -> &[T] {
        let sz = self.dims[1] * self.plane();
        &self.data[b * sz..(b + 1) * sz]
    }

    pub fn item_mut(&mut self, b: usize) -> &mut [T] {
        let sz = self.dims[1] * self.plane();
        &mut self.data[b * sz..(b + 1) * sz]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor4 {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor4<U> {
        Tensor4 {
            dims: self.dims,
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv { k: usize, in_ch: usize, out_ch: usize },
    Relu,
    Tanh,
    Sigmoid,
    ResidualBlock { channels: usize },
    ScaleShift { channels: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// Checks channel compatibility and returns (input channels, output channels).
    pub fn validate(&self) -> Result<(usize, usize)> {
        let mut current: Option<usize> = None;
        let mut first = None;
        for (i, l) in self.layers.iter().enumerate() {
            let (cin, cout) = match *l {
                LayerSpec::Conv { k, in_ch, out_ch } => {
                    if k != 1 && k != 3 {
                        return Err(MrfError::Param(format!("layer {i}: kernel {k} not in {{1, 3}}")));
                    }
                    if in_ch == 0 || out_ch == 0 {
                        return Err(MrfError::Param(format!("layer {i}: zero channels")));
                    }
                    (Some(in_ch), Some(out_ch))
                }
                LayerSpec::ResidualBlock { channels } | LayerSpec::ScaleShift { channels } => (Some(channels), Some(channels)),
                _ => (None, None),
            };
            if let (Some(c), Some(cur)) = (cin, current) {
                if c != cur {
                    return shape_err(format!("layer {i} expects {c} channels, previous layer gives {cur}"));
                }
            }
            if first.is_none() {
                first = cin;
            }
            if cout.is_some() {
                current = cout;
            }
        }
        match (first, current) {
            (Some(a), Some(b)) => Ok((a, b)),
            _ => Err(MrfError::Param("network has no channel-defining layer".into())),
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match *l {
                LayerSpec::Conv { k, in_ch, out_ch } => conv_params(k, in_ch, out_ch),
                LayerSpec::ResidualBlock { channels } => 2 * conv_params(3, channels, channels),
                LayerSpec::ScaleShift { channels } => 2 * channels,
                _ => 0,
            })
            .sum()
    }
}

fn conv_params(k: usize, cin: usize, cout: usize) -> usize {
    cout * cin * k * k + cout
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv<T> {
    pub k: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    /// [out][in][ky][kx]
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Conv<T> {
    fn init(k: usize, in_ch: usize, out_ch: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = (in_ch * k * k) as f64;
        let bound = (3.0 / fan_in).sqrt();
        Conv {
            k,
            in_ch,
            out_ch,
            weight: (0..out_ch * in_ch * k * k).map(|_| T::of(rng.gen_range(-bound..bound))).collect(),
            bias: vec![T::zero(); out_ch],
        }
    }

    fn cols(&self) -> usize {
        self.in_ch * self.k * self.k
    }

    /// One batch item: x (in × H × W) → y (out × H × W).
    fn forward_item(&self, x: &[T], h: usize, w: usize, y: &mut [T]) {
        let hw = h * w;
        for (o, row) in y.chunks_exact_mut(hw).enumerate() {
            row.iter_mut().for_each(|v| *v = self.bias[o]);
        }
        if self.k == 1 {
            mm(&self.weight, x, y, self.out_ch, self.in_ch, hw, true);
        } else {
            self.forward_shifted(x, h, w, y);
        }
    }

    /// 3×3 convolution as nine GEMMs over a zero-padded copy of `x`. Output
    /// rows are computed `w + 2` wide so every tap is a constant offset; the
    /// two extra columns per row are dropped.
    fn forward_shifted(&self, x: &[T], h: usize, w: usize, y: &mut [T]) {
        let (pw, ph) = (w + 2, h + 2);
        let plane = ph * pw;
        let mut pad = vec![T::zero(); self.in_ch * plane + 2];
        for ci in 0..self.in_ch {
            for r in 0..h {
                let dst = ci * plane + (r + 1) * pw + 1;
                pad[dst..dst + w].copy_from_slice(&x[ci * h * w + r * w..][..w]);
            }
        }
        let n = h * pw;
        let mut wide = vec![T::zero(); self.out_ch * n];
        for tap in 0..9 {
            let offset = (tap / 3) * pw + tap % 3;
            unsafe {
                T::gemm(
                    self.out_ch, self.in_ch, n, T::one(),
                    self.weight.as_ptr().add(tap), (self.in_ch * 9) as isize, 9,
                    pad.as_ptr().add(offset), plane as isize, 1,
                    T::one(), wide.as_mut_ptr(), n as isize, 1,
                );
            }
        }
        for o in 0..self.out_ch {
            for r in 0..h {
                let src = &wide[o * n + r * pw..][..w];
                y[o * h * w + r * w..][..w].iter_mut().zip(src).for_each(|(d, s)| *d += *s);
            }
        }
    }

    /// Accumulates weight/bias grads, returns dx for one item.
    fn backward_item(&self, x: &[T], dy: &[T], h: usize, w: usize, dw: &mut [T], db: &mut [T]) -> Vec<T> {
        let hw = h * w;
        for (o, row) in dy.chunks_exact(hw).enumerate() {
            db[o] += row.iter().copied().sum::<T>();
        }
        if self.k == 1 {
            mm_bt(dy, x, dw, self.out_ch, hw, self.in_ch, true);
            let mut dx = vec![T::zero(); self.in_ch * hw];
            mm_at(&self.weight, dy, &mut dx, self.in_ch, self.out_ch, hw, false);
            dx
        } else {
            let col = im2col3(x, self.in_ch, h, w);
            mm_bt(dy, &col, dw, self.out_ch, hw, self.cols(), true);
            let mut dcol = vec![T::zero(); self.cols() * hw];
            mm_at(&self.weight, dy, &mut dcol, self.cols(), self.out_ch, hw, false);
            col2im3(&dcol, self.in_ch, h, w)
        }
    }

    fn forward(&self, x: &Tensor4<T>) -> Tensor4<T> {
        let [n, _, h, w] = x.dims;
        let mut y = Tensor4::zeros([n, self.out_ch, h, w]);
        for b in 0..n {
            self.forward_item(x.item(b), h, w, y.item_mut(b));
        }
        y
    }

    fn backward(&self, x: &Tensor4<T>, dy: &Tensor4<T>, dw: &mut [T], db: &mut [T]) -> Tensor4<T> {
        let [n, _, h, w] = x.dims;
        let mut dx = Tensor4::zeros(x.dims);
        for b in 0..n {
            let g = self.backward_item(x.item(b), dy.item(b), h, w, dw, db);
            dx.item_mut(b).copy_from_slice(&g);
        }
        dx
    }
}

/// Zero-padded 3×3 patch matrix: rows (c, ky, kx), columns pixels.
fn im2col3<T: Scalar>(x: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let hw = h * w;
    let mut col = vec![T::zero(); c * 9 * hw];
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                for yy in 0..h {
                    let sy = yy as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let dst = &mut row[yy * w..(yy + 1) * w];
                    // dst[x] = src[x + kx - 1]
                    match kx {
                        0 => dst[1..].copy_from_slice(&src[..w - 1]),
                        1 => dst.copy_from_slice(src),
                        _ => dst[..w - 1].copy_from_slice(&src[1..]),
                    }
                }
            }
        }
    }
    col
}

fn col2im3<T: Scalar>(col: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let hw = h * w;
    let mut x = vec![T::zero(); c * hw];
    for ci in 0..c {
        let plane = &mut x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                for yy in 0..h {
                    let sy = yy as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    let src = &row[yy * w..(yy + 1) * w];
                    match kx {
                        0 => dst[..w - 1].iter_mut().zip(&src[1..]).for_each(|(d, s)| *d += *s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, s)| *d += *s),
                        _ => dst[1..].iter_mut().zip(&src[..w - 1]).for_each(|(d, s)| *d += *s),
                    }
                }
            }
        }
    }
    x
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer<T> {
    Conv(Conv<T>),
    Relu,
    Tanh,
    Sigmoid,
    Residual(Conv<T>, Conv<T>),
    ScaleShift { scale: Vec<T>, shift: Vec<T> },
}

static NEXT_NET_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug)]
pub struct Network<T> {
    pub spec: NetworkSpec,
    pub layers: Vec<Layer<T>>,
    id: u64,
    version: u64,
}

impl<T: Scalar> Clone for Network<T> {
    fn clone(&self) -> Self {
        Network {
            spec: self.spec.clone(),
            layers: self.layers.clone(),
            id: NEXT_NET_ID.fetch_add(1, Ordering::Relaxed),
            version: 0,
        }
    }
}

impl<T: Scalar> PartialEq for Network<T> {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.layers == other.layers
    }
}

/// Activations recorded by [`Network::forward`].
#[derive(Debug)]
pub struct Cache<T> {
    net_id: u64,
    version: u64,
    /// input of every layer, plus the final output
    acts: Vec<Tensor4<T>>,
    /// residual blocks: relu(conv1(x))
    inner: Vec<Option<Tensor4<T>>>,
}

impl<T: Scalar> Cache<T> {
    pub fn output(&self) -> &Tensor4<T> {
        self.acts.last().expect("cache holds the output")
    }

    /// Sign pattern of every ReLU input, for kink detection in gradient checks.
    pub fn relu_pattern(&self, net: &Network<T>) -> Vec<bool> {
        let mut out = Vec::new();
        for (i, l) in net.layers.iter().enumerate() {
            match l {
                Layer::Relu => out.extend(self.acts[i + 1].data.iter().map(|v| *v > T::zero())),
                Layer::Residual(..) => {
                    if let Some(t) = &self.inner[i] {
                        out.extend(t.data.iter().map(|v| *v > T::zero()))
                    }
                }
                _ => {}
            }
        }
        out
    }
}

impl<T: Scalar> Network<T> {
    pub fn from_spec(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = spec
            .layers
            .iter()
            .map(|l| match *l {
                LayerSpec::Conv { k, in_ch, out_ch } => Layer::Conv(Conv::init(k, in_ch, out_ch, &mut rng)),
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::Tanh => Layer::Tanh,
                LayerSpec::Sigmoid => Layer::Sigmoid,
                LayerSpec::ResidualBlock { channels } => Layer::Residual(
                    Conv::init(3, channels, channels, &mut rng),
                    Conv::init(3, channels, channels, &mut rng),
                ),
                LayerSpec::ScaleShift { channels } => Layer::ScaleShift {
                    scale: vec![T::one(); channels],
                    shift: vec![T::zero(); channels],
                },
            })
            .collect();
        Ok(Network {
            spec: spec.clone(),
            layers,
            id: NEXT_NET_ID.fetch_add(1, Ordering::Relaxed),
            version: 0,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.spec.validate().map(|c| c.0).unwrap_or(0)
    }

    pub fn out_channels(&self) -> usize {
        self.spec.validate().map(|c| c.1).unwrap_or(0)
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn params(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = Vec::new();
        for l in &self.layers {
            match l {
                Layer::Conv(c) => {
                    out.push(&c.weight);
                    out.push(&c.bias);
                }
                Layer::Residual(a, b) => {
                    out.extend([&a.weight[..], &a.bias[..], &b.weight[..], &b.bias[..]]);
                }
                Layer::ScaleShift { scale, shift } => {
                    out.push(scale);
                    out.push(shift);
                }
                _ => {}
            }
        }
        out
    }

    /// Mutable parameter views; invalidates outstanding caches.
    pub fn params_mut(&mut self) -> Vec<&mut [T]> {
        self.version += 1;
        let mut out: Vec<&mut [T]> = Vec::new();
        for l in &mut self.layers {
            match l {
                Layer::Conv(c) => {
                    out.push(&mut c.weight);
                    out.push(&mut c.bias);
                }
                Layer::Residual(a, b) => {
                    out.push(&mut a.weight);
                    out.push(&mut a.bias);
                    out.push(&mut b.weight);
                    out.push(&mut b.bias);
                }
                Layer::ScaleShift { scale, shift } => {
                    out.push(scale);
                    out.push(shift);
                }
                _ => {}
            }
        }
        out
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            match l {
                Layer::Conv(_) => out.extend([format!("layer{i}.conv.weight"), format!("layer{i}.conv.bias")]),
                Layer::Residual(..) => out.extend([
                    format!("layer{i}.res.conv1.weight"),
                    format!("layer{i}.res.conv1.bias"),
                    format!("layer{i}.res.conv2.weight"),
                    format!("layer{i}.res.conv2.bias"),
                ]),
                Layer::ScaleShift { .. } => out.extend([format!("layer{i}.scale"), format!("layer{i}.shift")]),
                _ => {}
            }
        }
        out
    }

    /// Flattened parameter vector.
    pub fn flat_params(&self) -> Vec<T> {
        self.params().concat()
    }

    pub fn set_flat_params(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.param_count() {
            return shape_err(format!("{} values for {} parameters", flat.len(), self.param_count()));
        }
        let mut offset = 0;
        for p in self.params_mut() {
            p.copy_from_slice(&flat[offset..offset + p.len()]);
            offset += p.len();
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        let mut out = Network::<U>::from_spec(&self.spec, 0).expect("spec already validated");
        let flat: Vec<U> = self.flat_params().iter().map(|v| U::of(v.f64())).collect();
        out.set_flat_params(&flat).expect("same spec");
        out
    }

    fn check_input(&self, x: &Tensor4<T>) -> Result<()> {
        if x.channels() != self.in_channels() {
            return shape_err(format!("network expects {} input channels, got {}", self.in_channels(), x.channels()));
        }
        Ok(())
    }

    /// Evaluation without recording activations.
    pub fn infer(&self, input: &Tensor4<T>) -> Result<Tensor4<T>> {
        self.check_input(input)?;
        let mut x = input.clone();
        for l in &self.layers {
            x = match l {
                Layer::Residual(a, b) => {
                    let mut y = b.forward(&relu(&a.forward(&x)));
                    y.data.iter_mut().zip(&x.data).for_each(|(o, i)| *o += *i);
                    y
                }
                other => apply_simple(other, &x),
            };
        }
        Ok(x)
    }

    pub fn forward(&self, input: &Tensor4<T>) -> Result<(Tensor4<T>, Cache<T>)> {
        self.check_input(input)?;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        let mut inner = Vec::with_capacity(self.layers.len());
        acts.push(input.clone());
        for l in &self.layers {
            let x = acts.last().expect("non-empty");
            let (y, mid) = match l {
                Layer::Residual(a, b) => {
                    let h = relu(&a.forward(x));
                    let mut y = b.forward(&h);
                    y.data.iter_mut().zip(&x.data).for_each(|(o, i)| *o += *i);
                    (y, Some(h))
                }
                other => (apply_simple(other, x), None),
            };
            acts.push(y);
            inner.push(mid);
        }
        let out = acts.last().expect("non-empty").clone();
        Ok((
            out,
            Cache {
                net_id: self.id,
                version: self.version,
                acts,
                inner,
            },
        ))
    }

    /// Reverse pass: returns per-parameter gradients (ordered as [`Network::params`])
    /// and the gradient with respect to the input.
    pub fn backward(&self, cache: &Cache<T>, grad_output: &Tensor4<T>) -> Result<(Vec<Vec<T>>, Tensor4<T>)> {
        if cache.net_id != self.id || cache.version != self.version || cache.acts.len() != self.layers.len() + 1 {
            return Err(MrfError::Usage("activation cache is stale or from another network".into()));
        }
        if grad_output.dims != cache.output().dims {
            return shape_err(format!("output gradient {:?} vs output {:?}", grad_output.dims, cache.output().dims));
        }
        let mut grads: Vec<Vec<T>> = self.params().iter().map(|p| vec![T::zero(); p.len()]).collect();
        let mut slot = grads.len();
        let mut g = grad_output.clone();
        for (i, l) in self.layers.iter().enumerate().rev() {
            let x = &cache.acts[i];
            let y = &cache.acts[i + 1];
            g = match l {
                Layer::Conv(c) => {
                    slot -= 2;
                    let (dw, rest) = grads[slot..].split_at_mut(1);
                    c.backward(x, &g, &mut dw[0], &mut rest[0])
                }
                Layer::Relu => zip_map(&g, y, |gv, yv| if yv > T::zero() { gv } else { T::zero() }),
                Layer::Tanh => zip_map(&g, y, |gv, yv| gv * (T::one() - yv * yv)),
                Layer::Sigmoid => zip_map(&g, y, |gv, yv| gv * yv * (T::one() - yv)),
                Layer::Residual(a, b) => {
                    slot -= 4;
                    let h = cache.inner[i].as_ref().expect("residual cache");
                    let (ga, gb) = grads[slot..slot + 4].split_at_mut(2);
                    let (gbw, gbb) = gb.split_at_mut(1);
                    let dh = b.backward(h, &g, &mut gbw[0], &mut gbb[0]);
                    let dh = zip_map(&dh, h, |gv, hv| if hv > T::zero() { gv } else { T::zero() });
                    let (gaw, gab) = ga.split_at_mut(1);
                    let mut dx = a.backward(x, &dh, &mut gaw[0], &mut gab[0]);
                    dx.data.iter_mut().zip(&g.data).for_each(|(d, s)| *d += *s);
                    dx
                }
                Layer::ScaleShift { scale, .. } => {
                    slot -= 2;
                    let [n, c, _, _] = x.dims;
                    let p = x.plane();
                    let mut dx = g.clone();
                    for bi in 0..n {
                        for ch in 0..c {
                            let off = (bi * c + ch) * p;
                            let (gs, xs) = (&g.data[off..off + p], &x.data[off..off + p]);
                            grads[slot][ch] += gs.iter().zip(xs).map(|(a, b)| *a * *b).sum::<T>();
                            grads[slot + 1][ch] += gs.iter().copied().sum::<T>();
                            dx.data[off..off + p].iter_mut().for_each(|v| *v = *v * scale[ch]);
                        }
                    }
                    dx
                }
            };
        }
        Ok((grads, g))
    }
}

fn relu<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

fn apply_simple<T: Scalar>(l: &Layer<T>, x: &Tensor4<T>) -> Tensor4<T> {
    match l {
        Layer::Conv(c) => c.forward(x),
        Layer::Relu => relu(x),
        Layer::Tanh => x.map(|v| T::one() - (T::one() + T::one()) / ((v + v).exp() + T::one())),
        Layer::Sigmoid => x.map(|v| T::one() / (T::one() + (-v).exp())),
        Layer::ScaleShift { scale, shift } => {
            let mut y = x.clone();
            let p = x.plane();
            let c = x.channels();
            for (idx, chunk) in y.data.chunks_exact_mut(p).enumerate() {
                let ch = idx % c;
                chunk.iter_mut().for_each(|v| *v = *v * scale[ch] + shift[ch]);
            }
            y
        }
        Layer::Residual(..) => unreachable!("handled by caller"),
    }
}

fn zip_map<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>, f: impl Fn(T, T) -> T) -> Tensor4<T> {
    Tensor4 {
        dims: a.dims,
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    }
}

/// Mean squared error and its gradient with respect to `pred`.
pub fn mse<T: Scalar>(pred: &[T], target: &[T]) -> (T, Vec<T>) {
    let n = T::of(pred.len().max(1) as f64);
    let diff: Vec<T> = pred.iter().zip(target).map(|(&p, &t)| p - t).collect();
    let loss = diff.iter().map(|&d| d * d).sum::<T>() / n;
    let two = T::of(2.0);
    (loss, diff.into_iter().map(|d| two * d / n).collect())
}

/// ADAM with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64, shapes: &[usize]) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }

    pub fn for_params(lr: f64, params: &[&[T]]) -> Self {
        Adam::new(lr, &params.iter().map(|p| p.len()).collect::<Vec<_>>())
    }

    /// Applies one update. `names` label parameter groups in error messages.
    pub fn update(&mut self, params: &mut [&mut [T]], grads: &[Vec<T>], names: &[String]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return shape_err(format!("ADAM tracks {} groups, got {} params / {} grads", self.m.len(), params.len(), grads.len()));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[i].len() || g.len() != p.len() {
                return shape_err(format!("parameter group {i} changed size"));
            }
            if g.iter().any(|v| !v.is_finite()) {
                let name = names.get(i).cloned().unwrap_or_else(|| format!("group{i}"));
                return Err(MrfError::Training(format!("non-finite gradient in {name}")));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (ob1, ob2) = (T::of(1.0 - self.beta1), T::of(1.0 - self.beta2));
        let step_size = T::of(self.lr / bc1);
        let inv_bc2 = T::of(1.0 / bc2.sqrt());
        let eps = T::of(self.eps);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..p.len() {
                m[k] = b1 * m[k] + ob1 * g[k];
                v[k] = b2 * v[k] + ob2 * g[k] * g[k];
                p[k] = p[k] - step_size * m[k] / (v[k].sqrt() * inv_bc2 + eps);
            }
        }
        Ok(())
    }
}

/// Central finite-difference check of [`Network::backward`] on a random subset
/// of at least `n_params` parameters (all of them if fewer exist). `loss`
/// maps the output to (value, dvalue/doutput). Parameters whose ±eps
/// perturbation flips any ReLU are resampled. Returns the max relative error.
pub fn grad_check(
    net: &Network<f64>,
    input: &Tensor4<f64>,
    loss: &dyn Fn(&Tensor4<f64>) -> (f64, Tensor4<f64>),
    eps: f64,
    n_params: usize,
    seed: u64,
) -> Result<f64> {
    let mut net = net.clone();
    let (out, cache) = net.forward(input)?;
    let (_, gout) = loss(&out);
    let (grads, _) = net.backward(&cache, &gout)?;
    let pattern = cache.relu_pattern(&net);
    let analytic: Vec<f64> = grads.concat();
    let base = net.flat_params();
    let total = base.len();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..total).collect();
    for i in (1..total).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for &p in &order {
        if checked >= n_params {
            break;
        }
        let mut eval = |delta: f64| -> Result<(f64, Vec<bool>)> {
            let mut w = base.clone();
            w[p] += delta;
            net.set_flat_params(&w)?;
            let (o, c) = net.forward(input)?;
            Ok((loss(&o).0, c.relu_pattern(&net)))
        };
        let (lp, pp) = eval(eps)?;
        let (lm, pm) = eval(-eps)?;
        if pp != pattern || pm != pattern {
            continue;
        }
        let numeric = (lp - lm) / (2.0 * eps);
        let a = analytic[p];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(err);
        checked += 1;
    }
    if checked < n_params.min(total) {
        log::warn!("gradient check covered only {checked} parameters away from ReLU kinks");
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_tensor(dims: [usize; 4], seed: u64) -> Tensor4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor4::from_vec(dims, (0..dims.iter().product()).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn half_mse(out: &Tensor4<f64>) -> (f64, Tensor4<f64>) {
        let target = rand_tensor(out.dims, 99);
        let (l, g) = mse(&out.data, &target.data);
        (l, Tensor4::from_vec(out.dims, g).unwrap())
    }

    #[test]
    fn identity_conv_and_zero_residual() {
        let spec = NetworkSpec { layers: vec![LayerSpec::Conv { k: 1, in_ch: 3, out_ch: 3 }] };
        let mut net = Network::<f64>::from_spec(&spec, 0).unwrap();
        if let Layer::Conv(c) = &mut net.layers[0] {
            c.weight = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        }
        let x = rand_tensor([2, 3, 4, 5], 1);
        assert_eq!(net.infer(&x).unwrap(), x);

        let spec = NetworkSpec { layers: vec![LayerSpec::ResidualBlock { channels: 3 }] };
        let mut net = Network::<f64>::from_spec(&spec, 0).unwrap();
        for p in net.params_mut() {
            p.iter_mut().for_each(|v| *v = 0.0);
        }
        assert_eq!(net.infer(&x).unwrap(), x);
    }

    #[test]
    fn zero_weights_emit_bias() {
        let spec = NetworkSpec {
            layers: vec![
                LayerSpec::Conv { k: 3, in_ch: 2, out_ch: 4 },
                LayerSpec::Relu,
                LayerSpec::Conv { k: 1, in_ch: 4, out_ch: 2 },
            ],
        };
        let mut net = Network::<f64>::from_spec(&spec, 3).unwrap();
        for p in net.params_mut() {
            p.iter_mut().for_each(|v| *v = 0.0);
        }
        if let Layer::Conv(c) = &mut net.layers[2] {
            c.bias = vec![0.25, -1.5];
        }
        let y = net.infer(&rand_tensor([1, 2, 3, 3], 2)).unwrap();
        assert!(y.data[..9].iter().all(|&v| v == 0.25));
        assert!(y.data[9..].iter().all(|&v| v == -1.5));
    }

    #[test]
    fn same_padding_preserves_size() {
        let spec = NetworkSpec { layers: vec![LayerSpec::Conv { k: 3, in_ch: 2, out_ch: 5 }, LayerSpec::Conv { k: 1, in_ch: 5, out_ch: 1 }] };
        let net = Network::<f32>::from_spec(&spec, 0).unwrap();
        let y = net.infer(&Tensor4::zeros([3, 2, 7, 4])).unwrap();
        assert_eq!(y.dims, [3, 1, 7, 4]);
    }

    #[test]
    fn conv3_matches_direct_convolution() {
        let spec = NetworkSpec { layers: vec![LayerSpec::Conv { k: 3, in_ch: 2, out_ch: 3 }] };
        let net = Network::<f64>::from_spec(&spec, 4).unwrap();
        let x = rand_tensor([1, 2, 5, 6], 5);
        let y = net.infer(&x).unwrap();
        let Layer::Conv(c) = &net.layers[0] else { unreachable!() };
        let (h, w) = (5isize, 6isize);
        for o in 0..3 {
            for yy in 0..h {
                for xx in 0..w {
                    let mut acc = c.bias[o];
                    for i in 0..2 {
                        for ky in 0..3isize {
                            for kx in 0..3isize {
                                let (sy, sx) = (yy + ky - 1, xx + kx - 1);
                                if sy >= 0 && sy < h && sx >= 0 && sx < w {
                                    acc += c.weight[((o * 2 + i) * 3 + ky as usize) * 3 + kx as usize] * x.data[(i as isize * h * w + sy * w + sx) as usize];
                                }
                            }
                        }
                    }
                    assert!((y.data[(o as isize * h * w + yy * w + xx) as usize] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_output_gradient_gives_zero_gradients() {
        let spec = NetworkSpec { layers: vec![LayerSpec::Conv { k: 3, in_ch: 2, out_ch: 4 }, LayerSpec::Tanh, LayerSpec::ResidualBlock { channels: 4 }] };
        let net = Network::<f64>::from_spec(&spec, 1).unwrap();
        let (out, cache) = net.forward(&rand_tensor([2, 2, 4, 4], 3)).unwrap();
        let (g, gi) = net.backward(&cache, &Tensor4::zeros(out.dims)).unwrap();
        assert!(g.iter().flatten().all(|&v| v == 0.0));
        assert!(gi.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_regression_gradient_closed_form() {
        // one 1×1 conv without bias contribution: pixels are samples, channels features
        let spec = NetworkSpec { layers: vec![LayerSpec::Conv { k: 1, in_ch: 3, out_ch: 1 }] };
        let net = Network::<f64>::from_spec(&spec, 7).unwrap();
        let x = rand_tensor([1, 3, 2, 4], 8);
        let y = rand_tensor([1, 1, 2, 4], 9);
        let (out, cache) = net.forward(&x).unwrap();
        let (_, g) = mse(&out.data, &y.data);
        let (grads, _) = net.backward(&cache, &Tensor4::from_vec(out.dims, g).unwrap()).unwrap();
        let Layer::Conv(c) = &net.layers[0] else { unreachable!() };
        let n = 8.0;
        for f in 0..3 {
            let expected: f64 = (0..8)
                .map(|p| {
                    let pred: f64 = (0..3).map(|k| c.weight[k] * x.data[k * 8 + p]).sum::<f64>() + c.bias[0];
                    2.0 / n * x.data[f * 8 + p] * (pred - y.data[p])
                })
                .sum();
            assert!((grads[0][f] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn stale_cache_rejected() {
        let spec = NetworkSpec { layers: vec![LayerSpec::Conv { k: 1, in_ch: 1, out_ch: 1 }] };
        let mut net = Network::<f64>::from_spec(&spec, 0).unwrap();
        let other = net.clone();
        let (out, cache) = net.forward(&rand_tensor([1, 1, 2, 2], 0)).unwrap();
        assert!(matches!(other.backward(&cache, &out), Err(MrfError::Usage(_))));
        net.params_mut();
        assert!(matches!(net.backward(&cache, &out), Err(MrfError::Usage(_))));
    }

    #[test]
    fn incompatible_specs_rejected() {
        let bad = NetworkSpec { layers: vec![LayerSpec::Conv { k: 3, in_ch: 2, out_ch: 4 }, LayerSpec::Conv { k: 1, in_ch: 5, out_ch: 1 }] };
        assert!(Network::<f32>::from_spec(&bad, 0).is_err());
        let bad_k = NetworkSpec { layers: vec![LayerSpec::Conv { k: 5, in_ch: 2, out_ch: 4 }] };
        assert!(Network::<f32>::from_spec(&bad_k, 0).is_err());
        let net = Network::<f32>::from_spec(&NetworkSpec { layers: vec![LayerSpec::Conv { k: 1, in_ch: 2, out_ch: 1 }] }, 0).unwrap();
        assert!(net.infer(&Tensor4::zeros([1, 3, 2, 2])).is_err());
    }

    #[test]
    fn gradient_check_every_layer_type() {
        let spec = NetworkSpec {
            layers: vec![
                LayerSpec::ScaleShift { channels: 2 },
                LayerSpec::Conv { k: 3, in_ch: 2, out_ch: 4 },
                LayerSpec::Relu,
                LayerSpec::ResidualBlock { channels: 4 },
                LayerSpec::Conv { k: 1, in_ch: 4, out_ch: 4 },
                LayerSpec::Tanh,
                LayerSpec::Conv { k: 1, in_ch: 4, out_ch: 3 },
                LayerSpec::Sigmoid,
            ],
        };
        let net = Network::<f64>::from_spec(&spec, 11).unwrap();
        let x = rand_tensor([2, 2, 5, 5], 12);
        let err = grad_check(&net, &x, &half_mse, 1e-5, 200, 13).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn linear_network_gradient_is_exact() {
        let spec = NetworkSpec {
            layers: vec![LayerSpec::Conv { k: 3, in_ch: 2, out_ch: 3 }, LayerSpec::Conv { k: 1, in_ch: 3, out_ch: 2 }, LayerSpec::ScaleShift { channels: 2 }],
        };
        let net = Network::<f64>::from_spec(&spec, 21).unwrap();
        let err = grad_check(&net, &rand_tensor([1, 2, 4, 4], 22), &half_mse, 1e-5, 200, 23).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn adam_basics() {
        let mut w = vec![1.0f64];
        let mut opt = Adam::<f64>::new(0.1, &[1]);
        opt.update(&mut [&mut w], &[vec![0.0]], &[]).unwrap();
        assert_eq!(w, vec![1.0]);
        assert_eq!(opt.step, 1);

        let mut w = vec![0.0f64];
        let mut opt = Adam::<f64>::new(1e-3, &[1]);
        opt.update(&mut [&mut w], &[vec![3.0]], &[]).unwrap();
        assert!((w[0] + 1e-3).abs() < 1e-9);

        let mut w = vec![1.0f64];
        let mut opt = Adam::<f64>::new(1e-2, &[1]);
        for _ in 0..500 {
            let g = vec![2.0 * w[0]];
            opt.update(&mut [&mut w], &[g], &[]).unwrap();
        }
        assert!(w[0].abs() < 1e-2, "{}", w[0]);

        let err = opt.update(&mut [&mut w], &[vec![f64::NAN]], &["enc.w".into()]).unwrap_err();
        assert!(err.to_string().contains("enc.w"));
    }
}
