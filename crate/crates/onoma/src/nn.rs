//! Minimal neural-network layers with hand-written backward passes.
//!
//! Everything is generic over the float type so gradient checks can run in
//! f64 while training runs in f32. Convolutions are fixed to the 4x4
//! kernel / stride 2 / padding 1 geometry used by the mask estimator, which
//! halves (conv) or doubles (transposed conv) both spatial axes exactly.

use ndarray::{s, Array1, Array2, Array4, ArrayD, ArrayView2, Axis, Ix1, Ix2};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::iter::Sum;

pub trait Scalar:
    ndarray::NdFloat + num_traits::Float + num_traits::FromPrimitive + Sum + Serialize
{
    fn from_f(v: f64) -> Self {
        num_traits::FromPrimitive::from_f64(v).unwrap()
    }
    fn to_f(self) -> f64;
}
impl Scalar for f32 {
    fn to_f(self) -> f64 {
        self as f64
    }
}
impl Scalar for f64 {
    fn to_f(self) -> f64 {
        self
    }
}

pub const KERNEL: usize = 4;
pub const STRIDE: usize = 2;
pub const PAD: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateId(pub usize);

/// Named tensor store for trainable parameters.
#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<ArrayD<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn register(&mut self, name: &str, value: ArrayD<T>) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter {name}"
        );
        let id = self.values.len();
        self.index.insert(name.to_string(), id);
        self.names.push(name.to_string());
        self.values.push(value);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<T> {
        &mut self.values[id.0]
    }

    pub fn get2(&self, id: ParamId) -> ArrayView2<'_, T> {
        self.values[id.0].view().into_dimensionality::<Ix2>().unwrap()
    }

    pub fn get1(&self, id: ParamId) -> ndarray::ArrayView1<'_, T> {
        self.values[id.0].view().into_dimensionality::<Ix1>().unwrap()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<T>)> {
        self.names.iter().map(|n| n.as_str()).zip(self.values.iter())
    }

    pub fn tensors_mut(&mut self) -> &mut [ArrayD<T>] {
        &mut self.values
    }

    pub fn tensors(&self) -> &[ArrayD<T>] {
        &self.values
    }

    /// Total scalar count, for flat indexing in gradient checks.
    pub fn flat_len(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn get_flat(&self, mut i: usize) -> T {
        for v in &self.values {
            if i < v.len() {
                return *v.as_slice().unwrap().get(i).unwrap();
            }
            i -= v.len();
        }
        panic!("flat index out of range");
    }

    pub fn set_flat(&mut self, mut i: usize, value: T) {
        for v in &mut self.values {
            if i < v.len() {
                v.as_slice_mut().unwrap()[i] = value;
                return;
            }
            i -= v.len();
        }
        panic!("flat index out of range");
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self
                .values
                .iter()
                .map(|v| v.mapv(|x| U::from_f(x.to_f())))
                .collect(),
            index: self.index.clone(),
        }
    }
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients parallel to a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Grads<T> {
    pub values: Vec<ArrayD<T>>,
}

impl<T: Scalar> Grads<T> {
    pub fn zeros_like(ps: &ParamStore<T>) -> Self {
        Self {
            values: ps.values.iter().map(|v| ArrayD::zeros(v.raw_dim())).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<T> {
        &self.values[id.0]
    }

    pub fn add_to(&mut self, id: ParamId, delta: &ArrayD<T>) {
        self.values[id.0] += delta;
    }

    pub fn get_flat(&self, mut i: usize) -> T {
        for v in &self.values {
            if i < v.len() {
                return v.as_slice().unwrap()[i];
            }
            i -= v.len();
        }
        panic!("flat index out of range");
    }

    pub fn scale(&mut self, factor: T) {
        for v in &mut self.values {
            v.mapv_inplace(|x| x * factor);
        }
    }

    pub fn accumulate(&mut self, other: &Grads<T>) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }
}

/// Non-trainable layer state (batch-norm running statistics).
#[derive(Debug, Clone)]
pub struct BnState<T> {
    pub names: Vec<String>,
    pub values: Vec<ArrayD<T>>,
}

impl<T: Scalar> BnState<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn register(&mut self, name: &str, value: ArrayD<T>) -> StateId {
        let id = self.values.len();
        self.names.push(name.to_string());
        self.values.push(value);
        StateId(id)
    }

    pub fn cast<U: Scalar>(&self) -> BnState<U> {
        BnState {
            names: self.names.clone(),
            values: self
                .values
                .iter()
                .map(|v| v.mapv(|x| U::from_f(x.to_f())))
                .collect(),
        }
    }
}

impl<T: Scalar> Default for BnState<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Forward phase: training updates batch-norm running statistics in place,
/// inference reads them.
pub enum Phase<'a, T> {
    Train(&'a mut BnState<T>),
    Eval(&'a BnState<T>),
}

fn uniform<T: Scalar>(rng: &mut ChaCha20Rng, shape: &[usize], bound: f64) -> ArrayD<T> {
    ArrayD::from_shape_simple_fn(shape.to_vec(), || {
        T::from_f(rng.gen_range(-bound..bound))
    })
}

/// Orthogonal square matrix via Gram-Schmidt on a Gaussian draw.
fn orthogonal<T: Scalar>(rng: &mut ChaCha20Rng, n: usize) -> Array2<T> {
    let mut m = Array2::<f64>::from_shape_simple_fn((n, n), || StandardNormal.sample(rng));
    for i in 0..n {
        for j in 0..i {
            let dot = m.row(i).dot(&m.row(j));
            let rj = m.row(j).to_owned();
            m.row_mut(i).zip_mut_with(&rj, |a, &b| *a -= dot * b);
        }
        let norm = m.row(i).dot(&m.row(i)).sqrt().max(1e-12);
        m.row_mut(i).mapv_inplace(|v| v / norm);
    }
    m.mapv(|v| T::from_f(v))
}

// ---------------------------------------------------------------------------
// im2col / col2im for the fixed 4x4 / stride 2 / pad 1 geometry
// ---------------------------------------------------------------------------

fn im2col<T: Scalar>(x: &Array4<T>) -> Array2<T> {
    let (b, c, h, w) = x.dim();
    let (ho, wo) = (h / STRIDE, w / STRIDE);
    let mut cols = Array2::<T>::zeros((c * KERNEL * KERNEL, b * ho * wo));
    for bi in 0..b {
        for ci in 0..c {
            for kh in 0..KERNEL {
                for kw in 0..KERNEL {
                    let row = (ci * KERNEL + kh) * KERNEL + kw;
                    for oh in 0..ho {
                        let ih = (oh * STRIDE + kh).wrapping_sub(PAD);
                        if ih >= h {
                            continue;
                        }
                        for ow in 0..wo {
                            let iw = (ow * STRIDE + kw).wrapping_sub(PAD);
                            if iw >= w {
                                continue;
                            }
                            cols[(row, (bi * ho + oh) * wo + ow)] = x[(bi, ci, ih, iw)];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add columns back into (B, C, H, W).
fn col2im<T: Scalar>(cols: &ArrayView2<T>, b: usize, c: usize, h: usize, w: usize) -> Array4<T> {
    let (ho, wo) = (h / STRIDE, w / STRIDE);
    let mut x = Array4::<T>::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            for kh in 0..KERNEL {
                for kw in 0..KERNEL {
                    let row = (ci * KERNEL + kh) * KERNEL + kw;
                    for oh in 0..ho {
                        let ih = (oh * STRIDE + kh).wrapping_sub(PAD);
                        if ih >= h {
                            continue;
                        }
                        for ow in 0..wo {
                            let iw = (ow * STRIDE + kw).wrapping_sub(PAD);
                            if iw >= w {
                                continue;
                            }
                            x[(bi, ci, ih, iw)] =
                                x[(bi, ci, ih, iw)] + cols[(row, (bi * ho + oh) * wo + ow)];
                        }
                    }
                }
            }
        }
    }
    x
}

fn to_bchw<T: Scalar>(mat: &Array2<T>, b: usize, c: usize, h: usize, w: usize) -> Array4<T> {
    // mat is (C, B*H*W) with column index (bi*H + hi)*W + wi.
    let mut out = Array4::<T>::zeros((b, c, h, w));
    for ci in 0..c {
        for bi in 0..b {
            for hi in 0..h {
                for wi in 0..w {
                    out[(bi, ci, hi, wi)] = mat[(ci, (bi * h + hi) * w + wi)];
                }
            }
        }
    }
    out
}

fn from_bchw<T: Scalar>(x: &Array4<T>) -> Array2<T> {
    let (b, c, h, w) = x.dim();
    let mut mat = Array2::<T>::zeros((c, b * h * w));
    for ci in 0..c {
        for bi in 0..b {
            for hi in 0..h {
                for wi in 0..w {
                    mat[(ci, (bi * h + hi) * w + wi)] = x[(bi, ci, hi, wi)];
                }
            }
        }
    }
    mat
}

// ---------------------------------------------------------------------------
// Conv2d (downsampling)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub cin: usize,
    pub cout: usize,
}

pub struct Conv2dCache<T> {
    cols: Array2<T>,
    in_dim: (usize, usize, usize, usize),
}

impl Conv2d {
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        rng: &mut ChaCha20Rng,
        name: &str,
        cin: usize,
        cout: usize,
    ) -> Self {
        let fan_in = (cin * KERNEL * KERNEL) as f64;
        let bound = (1.0 / fan_in).sqrt();
        let w = ps.register(
            &format!("{name}.weight"),
            uniform(rng, &[cout, cin * KERNEL * KERNEL], bound),
        );
        let b = ps.register(&format!("{name}.bias"), uniform(rng, &[cout], bound));
        Self { w, b, cin, cout }
    }

    pub fn forward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        x: &Array4<T>,
    ) -> (Array4<T>, Conv2dCache<T>) {
        let (b, c, h, w) = x.dim();
        assert_eq!(c, self.cin, "conv input channels");
        assert!(h % STRIDE == 0 && w % STRIDE == 0, "conv input not divisible");
        let cols = im2col(x);
        let mut out_mat = ps.get2(self.w).dot(&cols);
        let bias = ps.get1(self.b);
        for (ci, mut row) in out_mat.rows_mut().into_iter().enumerate() {
            row += bias[ci];
        }
        let out = to_bchw(&out_mat, b, self.cout, h / STRIDE, w / STRIDE);
        (
            out,
            Conv2dCache {
                cols,
                in_dim: (b, c, h, w),
            },
        )
    }

    pub fn backward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        grads: &mut Grads<T>,
        cache: &Conv2dCache<T>,
        dy: &Array4<T>,
    ) -> Array4<T> {
        let (b, c, h, w) = cache.in_dim;
        let dy_mat = from_bchw(dy);
        grads.add_to(self.w, &dy_mat.dot(&cache.cols.t()).into_dyn());
        grads.add_to(self.b, &dy_mat.sum_axis(Axis(1)).into_dyn());
        let dcols = ps.get2(self.w).t().dot(&dy_mat);
        col2im(&dcols.view(), b, c, h, w)
    }
}

// ---------------------------------------------------------------------------
// ConvTranspose2d (upsampling); adjoint of Conv2d with the same geometry.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvTranspose2d {
    pub w: ParamId,
    pub b: ParamId,
    pub cin: usize,
    pub cout: usize,
}

pub struct ConvTranspose2dCache<T> {
    x_mat: Array2<T>,
    out_dim: (usize, usize, usize, usize),
}

impl ConvTranspose2d {
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        rng: &mut ChaCha20Rng,
        name: &str,
        cin: usize,
        cout: usize,
    ) -> Self {
        let fan_in = (cin * KERNEL * KERNEL / (STRIDE * STRIDE)) as f64;
        let bound = (1.0 / fan_in.max(1.0)).sqrt();
        let w = ps.register(
            &format!("{name}.weight"),
            uniform(rng, &[cin, cout * KERNEL * KERNEL], bound),
        );
        let b = ps.register(&format!("{name}.bias"), uniform(rng, &[cout], bound));
        Self { w, b, cin, cout }
    }

    pub fn forward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        x: &Array4<T>,
    ) -> (Array4<T>, ConvTranspose2dCache<T>) {
        let (b, c, h, w) = x.dim();
        assert_eq!(c, self.cin, "deconv input channels");
        let (ho, wo) = (h * STRIDE, w * STRIDE);
        let x_mat = from_bchw(x);
        let cols = ps.get2(self.w).t().dot(&x_mat);
        let mut out = col2im(&cols.view(), b, self.cout, ho, wo);
        let bias = ps.get1(self.b);
        for ci in 0..self.cout {
            out.slice_mut(s![.., ci, .., ..]).mapv_inplace(|v| v + bias[ci]);
        }
        (
            out,
            ConvTranspose2dCache {
                x_mat,
                out_dim: (b, self.cout, ho, wo),
            },
        )
    }

    pub fn backward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        grads: &mut Grads<T>,
        cache: &ConvTranspose2dCache<T>,
        dy: &Array4<T>,
    ) -> Array4<T> {
        let (b, _c, h, w) = cache.out_dim;
        debug_assert_eq!(dy.dim(), cache.out_dim);
        let dy_cols = im2col(dy);
        grads.add_to(self.w, &cache.x_mat.dot(&dy_cols.t()).into_dyn());
        let mut db = Array1::<T>::zeros(self.cout);
        for ci in 0..self.cout {
            db[ci] = dy.slice(s![.., ci, .., ..]).sum();
        }
        grads.add_to(self.b, &db.into_dyn());
        let dx_mat = ps.get2(self.w).dot(&dy_cols);
        to_bchw(&dx_mat, b, self.cin, h / STRIDE, w / STRIDE)
    }
}

// ---------------------------------------------------------------------------
// BatchNorm2d
// ---------------------------------------------------------------------------

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: StateId,
    pub running_var: StateId,
    pub channels: usize,
}

pub struct BatchNorm2dCache<T> {
    xhat: Array4<T>,
    inv_std: Array1<T>,
}

impl BatchNorm2d {
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        bn: &mut BnState<T>,
        name: &str,
        channels: usize,
    ) -> Self {
        let gamma = ps.register(&format!("{name}.gamma"), ArrayD::ones(vec![channels]));
        let beta = ps.register(&format!("{name}.beta"), ArrayD::zeros(vec![channels]));
        let running_mean = bn.register(&format!("{name}.running_mean"), ArrayD::zeros(vec![channels]));
        let running_var = bn.register(&format!("{name}.running_var"), ArrayD::ones(vec![channels]));
        Self {
            gamma,
            beta,
            running_mean,
            running_var,
            channels,
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        phase: &mut Phase<'_, T>,
        x: &Array4<T>,
    ) -> (Array4<T>, Option<BatchNorm2dCache<T>>) {
        let (b, c, h, w) = x.dim();
        assert_eq!(c, self.channels);
        let n = T::from_f((b * h * w) as f64);
        let gamma = ps.get1(self.gamma).to_owned();
        let beta = ps.get1(self.beta).to_owned();
        match phase {
            Phase::Train(state) => {
                let mut mean = Array1::<T>::zeros(c);
                let mut var = Array1::<T>::zeros(c);
                for ci in 0..c {
                    let slice = x.slice(s![.., ci, .., ..]);
                    let m = slice.sum() / n;
                    mean[ci] = m;
                    var[ci] = slice.mapv(|v| (v - m) * (v - m)).sum() / n;
                }
                let inv_std = var.mapv(|v| T::one() / (v + T::from_f(BN_EPS)).sqrt());
                let mut xhat = x.clone();
                for ci in 0..c {
                    let (m, is) = (mean[ci], inv_std[ci]);
                    xhat.slice_mut(s![.., ci, .., ..])
                        .mapv_inplace(|v| (v - m) * is);
                }
                let mut y = xhat.clone();
                for ci in 0..c {
                    let (g, be) = (gamma[ci], beta[ci]);
                    y.slice_mut(s![.., ci, .., ..]).mapv_inplace(|v| v * g + be);
                }
                let mom = T::from_f(BN_MOMENTUM);
                let rm = &mut state.values[self.running_mean.0];
                for ci in 0..c {
                    let v = rm.as_slice_mut().unwrap();
                    v[ci] = v[ci] * (T::one() - mom) + mean[ci] * mom;
                }
                let rv = &mut state.values[self.running_var.0];
                for ci in 0..c {
                    let v = rv.as_slice_mut().unwrap();
                    v[ci] = v[ci] * (T::one() - mom) + var[ci] * mom;
                }
                (y, Some(BatchNorm2dCache { xhat, inv_std }))
            }
            Phase::Eval(state) => {
                let rm = &state.values[self.running_mean.0];
                let rv = &state.values[self.running_var.0];
                let mut y = x.clone();
                for ci in 0..c {
                    let m = rm.as_slice().unwrap()[ci];
                    let is = T::one() / (rv.as_slice().unwrap()[ci] + T::from_f(BN_EPS)).sqrt();
                    let (g, be) = (gamma[ci], beta[ci]);
                    y.slice_mut(s![.., ci, .., ..])
                        .mapv_inplace(|v| (v - m) * is * g + be);
                }
                (y, None)
            }
        }
    }

    pub fn backward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        grads: &mut Grads<T>,
        cache: &BatchNorm2dCache<T>,
        dy: &Array4<T>,
    ) -> Array4<T> {
        let (b, c, h, w) = dy.dim();
        let n = T::from_f((b * h * w) as f64);
        let gamma = ps.get1(self.gamma);
        let mut dgamma = Array1::<T>::zeros(c);
        let mut dbeta = Array1::<T>::zeros(c);
        let mut dx = Array4::<T>::zeros((b, c, h, w));
        for ci in 0..c {
            let dyc = dy.slice(s![.., ci, .., ..]);
            let xh = cache.xhat.slice(s![.., ci, .., ..]);
            let sum_dy = dyc.sum();
            let sum_dy_xhat = (&dyc * &xh).sum();
            dgamma[ci] = sum_dy_xhat;
            dbeta[ci] = sum_dy;
            let scale = gamma[ci] * cache.inv_std[ci];
            let mean_dy = sum_dy / n;
            let mean_dy_xhat = sum_dy_xhat / n;
            let mut dxc = dx.slice_mut(s![.., ci, .., ..]);
            ndarray::Zip::from(&mut dxc).and(&dyc).and(&xh).for_each(|d, &g, &x| {
                *d = scale * (g - mean_dy - x * mean_dy_xhat);
            });
        }
        grads.add_to(self.gamma, &dgamma.into_dyn());
        grads.add_to(self.beta, &dbeta.into_dyn());
        dx
    }
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

pub fn leaky_relu<T: Scalar>(x: &Array4<T>, slope: f64) -> (Array4<T>, Array4<T>) {
    let a = T::from_f(slope);
    let y = x.mapv(|v| if v > T::zero() { v } else { v * a });
    (y, x.clone())
}

pub fn leaky_relu_backward<T: Scalar>(input: &Array4<T>, dy: &Array4<T>, slope: f64) -> Array4<T> {
    let a = T::from_f(slope);
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(input).for_each(|d, &x| {
        if x <= T::zero() {
            *d = *d * a;
        }
    });
    dx
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub din: usize,
    pub dout: usize,
}

pub struct LinearCache<T> {
    x: Array2<T>,
}

impl Linear {
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        rng: &mut ChaCha20Rng,
        name: &str,
        din: usize,
        dout: usize,
    ) -> Self {
        let bound = (1.0 / din as f64).sqrt();
        let w = ps.register(&format!("{name}.weight"), uniform(rng, &[dout, din], bound));
        let b = ps.register(&format!("{name}.bias"), uniform(rng, &[dout], bound));
        Self { w, b, din, dout }
    }

    /// x: (B, din) -> (B, dout)
    pub fn forward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        x: &Array2<T>,
    ) -> (Array2<T>, LinearCache<T>) {
        let mut y = x.dot(&ps.get2(self.w).t());
        let bias = ps.get1(self.b);
        for mut row in y.rows_mut() {
            row += &bias;
        }
        (y, LinearCache { x: x.clone() })
    }

    pub fn backward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        grads: &mut Grads<T>,
        cache: &LinearCache<T>,
        dy: &Array2<T>,
    ) -> Array2<T> {
        grads.add_to(self.w, &dy.t().dot(&cache.x).into_dyn());
        grads.add_to(self.b, &dy.sum_axis(Axis(0)).into_dyn());
        dy.dot(&ps.get2(self.w))
    }
}

// ---------------------------------------------------------------------------
// LSTM (single layer, one direction)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Lstm {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub input_dim: usize,
    pub hidden: usize,
}

pub struct LstmCache<T> {
    /// Per step: input row, previous h, previous c, gate activations (i,f,g,o), c.
    steps: Vec<LstmStep<T>>,
}

struct LstmStep<T> {
    x: Array1<T>,
    h_prev: Array1<T>,
    c_prev: Array1<T>,
    i: Array1<T>,
    f: Array1<T>,
    g: Array1<T>,
    o: Array1<T>,
    c: Array1<T>,
}

impl Lstm {
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        rng: &mut ChaCha20Rng,
        name: &str,
        input_dim: usize,
        hidden: usize,
    ) -> Self {
        let bound = (1.0 / input_dim as f64).sqrt();
        let w_ih = ps.register(
            &format!("{name}.w_ih"),
            uniform(rng, &[4 * hidden, input_dim], bound),
        );
        // Orthogonal recurrent blocks, one per gate.
        let mut w_hh_init = Array2::<T>::zeros((4 * hidden, hidden));
        for gate in 0..4 {
            let q = orthogonal::<T>(rng, hidden);
            w_hh_init
                .slice_mut(s![gate * hidden..(gate + 1) * hidden, ..])
                .assign(&q);
        }
        let w_hh = ps.register(&format!("{name}.w_hh"), w_hh_init.into_dyn());
        let bias = ps.register(&format!("{name}.bias"), ArrayD::zeros(vec![4 * hidden]));
        Self {
            w_ih,
            w_hh,
            bias,
            input_dim,
            hidden,
        }
    }

    /// Runs the sequence (rows of `xs`) and returns the final hidden state.
    pub fn forward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        xs: &Array2<T>,
    ) -> (Array1<T>, LstmCache<T>) {
        let hsz = self.hidden;
        let w_ih = ps.get2(self.w_ih);
        let w_hh = ps.get2(self.w_hh);
        let bias = ps.get1(self.bias);
        let mut h = Array1::<T>::zeros(hsz);
        let mut c = Array1::<T>::zeros(hsz);
        let mut steps = Vec::with_capacity(xs.nrows());
        for x in xs.rows() {
            let x = x.to_owned();
            let z = w_ih.dot(&x) + w_hh.dot(&h) + &bias;
            let i = z.slice(s![0..hsz]).mapv(sigmoid);
            let f = z.slice(s![hsz..2 * hsz]).mapv(sigmoid);
            let g = z.slice(s![2 * hsz..3 * hsz]).mapv(|v| v.tanh());
            let o = z.slice(s![3 * hsz..4 * hsz]).mapv(sigmoid);
            let c_new = &f * &c + &i * &g;
            let h_new = &o * &c_new.mapv(|v| v.tanh());
            steps.push(LstmStep {
                x,
                h_prev: h,
                c_prev: c,
                i,
                f,
                g,
                o,
                c: c_new.clone(),
            });
            h = h_new;
            c = c_new;
        }
        (h, LstmCache { steps })
    }

    /// BPTT from a gradient on the final hidden state. Input gradients are
    /// not propagated (inputs are constant one-hot rows).
    pub fn backward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        grads: &mut Grads<T>,
        cache: &LstmCache<T>,
        dh_final: &Array1<T>,
    ) {
        let hsz = self.hidden;
        let w_hh = ps.get2(self.w_hh);
        let mut dw_ih = Array2::<T>::zeros((4 * hsz, self.input_dim));
        let mut dw_hh = Array2::<T>::zeros((4 * hsz, hsz));
        let mut dbias = Array1::<T>::zeros(4 * hsz);
        let mut dh = dh_final.clone();
        let mut dc = Array1::<T>::zeros(hsz);
        for step in cache.steps.iter().rev() {
            let tanh_c = step.c.mapv(|v| v.tanh());
            let do_ = &dh * &tanh_c;
            dc = dc + &dh * &step.o * &tanh_c.mapv(|v| T::one() - v * v);
            let di = &dc * &step.g;
            let df = &dc * &step.c_prev;
            let dg = &dc * &step.i;
            let dc_prev = &dc * &step.f;
            // sigma'(z) = s * (1 - s), tanh'(z) = 1 - g^2, from activations.
            let mut dz = Array1::<T>::zeros(4 * hsz);
            for k in 0..hsz {
                dz[k] = di[k] * step.i[k] * (T::one() - step.i[k]);
                dz[hsz + k] = df[k] * step.f[k] * (T::one() - step.f[k]);
                dz[2 * hsz + k] = dg[k] * (T::one() - step.g[k] * step.g[k]);
                dz[3 * hsz + k] = do_[k] * step.o[k] * (T::one() - step.o[k]);
            }
            for r in 0..4 * hsz {
                let dzr = dz[r];
                if dzr == T::zero() {
                    continue;
                }
                for (ci, &xv) in step.x.iter().enumerate() {
                    dw_ih[(r, ci)] = dw_ih[(r, ci)] + dzr * xv;
                }
                for (ci, &hv) in step.h_prev.iter().enumerate() {
                    dw_hh[(r, ci)] = dw_hh[(r, ci)] + dzr * hv;
                }
            }
            dbias += &dz;
            dh = w_hh.t().dot(&dz);
            dc = dc_prev;
        }
        grads.add_to(self.w_ih, &dw_ih.into_dyn());
        grads.add_to(self.w_hh, &dw_hh.into_dyn());
        grads.add_to(self.bias, &dbias.into_dyn());
    }
}

// ---------------------------------------------------------------------------
// Optimizers: Adam and RAdam (variance-rectified Adam)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    /// RAdam: Adam with the variance-rectification warmup schedule.
    RectifiedAdaptiveMoment,
    AdaptiveMoment,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::RectifiedAdaptiveMoment,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    pub config: OptimizerConfig,
    pub step: u64,
    pub m: Vec<ArrayD<T>>,
    pub v: Vec<ArrayD<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(config: OptimizerConfig, ps: &ParamStore<T>) -> Self {
        Self {
            config,
            step: 0,
            m: ps.tensors().iter().map(|p| ArrayD::zeros(p.raw_dim())).collect(),
            v: ps.tensors().iter().map(|p| ArrayD::zeros(p.raw_dim())).collect(),
        }
    }

    pub fn apply(&mut self, ps: &mut ParamStore<T>, grads: &Grads<T>) {
        self.step += 1;
        let t = self.step as f64;
        let c = &self.config;
        let bias1 = 1.0 - c.beta1.powf(t);
        let bias2 = 1.0 - c.beta2.powf(t);
        let rho_inf = 2.0 / (1.0 - c.beta2) - 1.0;
        let rho_t = rho_inf - 2.0 * t * c.beta2.powf(t) / bias2;
        let rectified = match c.kind {
            OptimizerKind::AdaptiveMoment => None,
            OptimizerKind::RectifiedAdaptiveMoment => {
                if rho_t > 4.0 {
                    let r = ((rho_t - 4.0) * (rho_t - 2.0) * rho_inf
                        / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t))
                        .sqrt();
                    Some(r)
                } else {
                    None
                }
            }
        };
        let b1 = T::from_f(c.beta1);
        let b2 = T::from_f(c.beta2);
        for (idx, param) in ps.tensors_mut().iter_mut().enumerate() {
            let g = &grads.values[idx];
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            ndarray::Zip::from(m.view_mut()).and(g).for_each(|mi, &gi| {
                *mi = b1 * *mi + (T::one() - b1) * gi;
            });
            ndarray::Zip::from(v.view_mut()).and(g).for_each(|vi, &gi| {
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
            });
            match (c.kind, rectified) {
                (OptimizerKind::AdaptiveMoment, _) => {
                    let lr = T::from_f(c.learning_rate / bias1);
                    let eps = T::from_f(c.eps);
                    let inv_bias2 = T::from_f(1.0 / bias2);
                    ndarray::Zip::from(param.view_mut())
                        .and(m.view())
                        .and(v.view())
                        .for_each(|p, &mi, &vi| {
                            *p = *p - lr * mi / ((vi * inv_bias2).sqrt() + eps);
                        });
                }
                (OptimizerKind::RectifiedAdaptiveMoment, Some(r)) => {
                    let lr = T::from_f(c.learning_rate * r / bias1);
                    let eps = T::from_f(c.eps);
                    let inv_bias2 = T::from_f(1.0 / bias2);
                    ndarray::Zip::from(param.view_mut())
                        .and(m.view())
                        .and(v.view())
                        .for_each(|p, &mi, &vi| {
                            *p = *p - lr * mi / ((vi * inv_bias2).sqrt() + eps);
                        });
                }
                (OptimizerKind::RectifiedAdaptiveMoment, None) => {
                    // Warmup: un-rectified SGD-with-momentum step.
                    let lr = T::from_f(c.learning_rate / bias1);
                    ndarray::Zip::from(param.view_mut()).and(m.view()).for_each(|p, &mi| {
                        *p = *p - lr * mi;
                    });
                }
            }
        }
    }
}
