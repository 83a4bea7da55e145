//! Minimal conv/dense network with hand-written backprop.
//!
//! Parameters and gradients live in flat vectors so the optimizer and the
//! checkpoint format see one contiguous array. Activations are NHWC.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub};

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub trait Scalar:
    Copy
    + Debug
    + Default
    + PartialOrd
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + MulAssign
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;

    /// `c = alpha * a(m x k) * b(k x n) + beta * c`, all row-major with
    /// explicit strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], a_s: (isize, isize), b: &[Self], b_s: (isize, isize), beta: Self, c: &mut [Self]);
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            #[inline]
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            #[inline]
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], a_s: (isize, isize), b: &[Self], b_s: (isize, isize), beta: Self, c: &mut [Self]) {
                if m == 0 || n == 0 {
                    return;
                }
                assert!(c.len() >= m * n);
                // SAFETY: strides describe in-bounds views of `a` and `b`
                // (checked by callers' shapes); `c` holds m*n elements.
                unsafe {
                    $gemm(m, k, n, alpha, a.as_ptr(), a_s.0, a_s.1, b.as_ptr(), b_s.0, b_s.1, beta, c.as_mut_ptr(), n as isize, 1);
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Row-major, no transpose.
const fn rm(cols: usize) -> (isize, isize) {
    (cols as isize, 1)
}

/// Row-major storage read as its transpose.
const fn tr(cols: usize) -> (isize, isize) {
    (1, cols as isize)
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv {
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        in_hw: (usize, usize),
        out_hw: (usize, usize),
        w: usize,
        b: usize,
    },
    Dense {
        nin: usize,
        nout: usize,
        w: usize,
        b: usize,
    },
    Relu {
        n: usize,
    },
}

impl Layer {
    pub fn out_len(&self) -> usize {
        match *self {
            Layer::Conv { cout, out_hw, .. } => cout * out_hw.0 * out_hw.1,
            Layer::Dense { nout, .. } => nout,
            Layer::Relu { n } => n,
        }
    }

    fn param_count(&self) -> usize {
        match *self {
            Layer::Conv { cin, cout, k, .. } => k * k * cin * cout + cout,
            Layer::Dense { nin, nout, .. } => nin * nout + nout,
            Layer::Relu { .. } => 0,
        }
    }
}

/// Sequential trunk with separate actor and critic heads.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<T: Scalar> {
    pub trunk: Vec<Layer>,
    pub actor: Layer,
    pub critic: Layer,
    pub input_len: usize,
    pub params: Vec<T>,
}

/// Builder for [`Network`] layouts.
pub struct NetBuilder {
    layers: Vec<Layer>,
    shape: (usize, usize, usize),
    next: usize,
}

impl NetBuilder {
    /// Input of `h x w x c` (NHWC).
    pub fn new(h: usize, w: usize, c: usize) -> Self {
        Self {
            layers: Vec::new(),
            shape: (h, w, c),
            next: 0,
        }
    }

    fn flat(&self) -> usize {
        self.shape.0 * self.shape.1 * self.shape.2
    }

    fn push(&mut self, l: Layer) {
        self.next += l.param_count();
        self.layers.push(l);
    }

    pub fn conv(mut self, cout: usize, k: usize, stride: usize, pad: usize) -> Self {
        let (h, w, cin) = self.shape;
        let out_hw = ((h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1);
        let w_off = self.next;
        self.push(Layer::Conv {
            cin,
            cout,
            k,
            stride,
            pad,
            in_hw: (h, w),
            out_hw,
            w: w_off,
            b: w_off + k * k * cin * cout,
        });
        self.shape = (out_hw.0, out_hw.1, cout);
        self
    }

    pub fn dense(mut self, nout: usize) -> Self {
        let nin = self.flat();
        let w = self.next;
        self.push(Layer::Dense { nin, nout, w, b: w + nin * nout });
        self.shape = (1, 1, nout);
        self
    }

    pub fn relu(mut self) -> Self {
        let n = self.flat();
        self.layers.push(Layer::Relu { n });
        self
    }

    pub fn heads<T: Scalar>(self, actions: usize, input: (usize, usize, usize)) -> Network<T> {
        let nin = self.flat();
        let mut next = self.next;
        let actor = Layer::Dense {
            nin,
            nout: actions,
            w: next,
            b: next + nin * actions,
        };
        next += actor.param_count();
        let critic = Layer::Dense { nin, nout: 1, w: next, b: next + nin };
        next += critic.param_count();
        Network {
            trunk: self.layers,
            actor,
            critic,
            input_len: input.0 * input.1 * input.2,
            params: vec![T::ZERO; next],
        }
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.shape
    }
}

/// Saved activations of one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    batch: usize,
    /// Per trunk layer: its input (im2col matrix for convolutions).
    inputs: Vec<Vec<T>>,
    /// Output of the last trunk layer.
    features: Vec<T>,
    pub logits: Vec<T>,
    pub values: Vec<T>,
}

fn im2col<T: Scalar>(x: &[T], batch: usize, l: &Layer) -> Vec<T> {
    let Layer::Conv { cin, k, stride, pad, in_hw, out_hw, .. } = *l else { unreachable!() };
    let (h, w) = in_hw;
    let (ho, wo) = out_hw;
    let row = k * k * cin;
    let mut cols = vec![T::ZERO; batch * ho * wo * row];
    for b in 0..batch {
        let xb = &x[b * h * w * cin..(b + 1) * h * w * cin];
        for oy in 0..ho {
            for ox in 0..wo {
                let r = ((b * ho + oy) * wo + ox) * row;
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let src = (iy as usize * w + ix as usize) * cin;
                        let dst = r + (ky * k + kx) * cin;
                        cols[dst..dst + cin].copy_from_slice(&xb[src..src + cin]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], batch: usize, l: &Layer) -> Vec<T> {
    let Layer::Conv { cin, k, stride, pad, in_hw, out_hw, .. } = *l else { unreachable!() };
    let (h, w) = in_hw;
    let (ho, wo) = out_hw;
    let row = k * k * cin;
    let mut x = vec![T::ZERO; batch * h * w * cin];
    for b in 0..batch {
        let xb = &mut x[b * h * w * cin..(b + 1) * h * w * cin];
        for oy in 0..ho {
            for ox in 0..wo {
                let r = ((b * ho + oy) * wo + ox) * row;
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let dst = (iy as usize * w + ix as usize) * cin;
                        let src = r + (ky * k + kx) * cin;
                        for c in 0..cin {
                            xb[dst + c] += cols[src + c];
                        }
                    }
                }
            }
        }
    }
    x
}

/// `y[rows x nout] = x[rows x nin] * W + b`.
fn affine<T: Scalar>(x: &[T], rows: usize, nin: usize, nout: usize, params: &[T], w: usize, b: usize) -> Vec<T> {
    let mut y = Vec::with_capacity(rows * nout);
    for _ in 0..rows {
        y.extend_from_slice(&params[b..b + nout]);
    }
    T::gemm(rows, nin, nout, T::ONE, x, rm(nin), &params[w..w + nin * nout], rm(nout), T::ONE, &mut y);
    y
}

/// Accumulates weight and bias gradients; returns the input gradient if
/// requested.
#[allow(clippy::too_many_arguments)]
fn affine_back<T: Scalar>(
    x: &[T],
    dy: &[T],
    rows: usize,
    nin: usize,
    nout: usize,
    params: &[T],
    grads: &mut [T],
    w: usize,
    b: usize,
    need_dx: bool,
) -> Option<Vec<T>> {
    T::gemm(nin, rows, nout, T::ONE, x, tr(nin), dy, rm(nout), T::ONE, &mut grads[w..w + nin * nout]);
    let gb = &mut grads[b..b + nout];
    for r in 0..rows {
        for (g, d) in gb.iter_mut().zip(&dy[r * nout..(r + 1) * nout]) {
            *g += *d;
        }
    }
    need_dx.then(|| {
        let mut dx = vec![T::ZERO; rows * nin];
        T::gemm(rows, nout, nin, T::ONE, dy, rm(nout), &params[w..w + nin * nout], tr(nout), T::ZERO, &mut dx);
        dx
    })
}

impl<T: Scalar> Network<T> {
    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn action_count(&self) -> usize {
        match self.actor {
            Layer::Dense { nout, .. } => nout,
            _ => unreachable!(),
        }
    }

    /// Orthogonal weights scaled by `gain`, zero biases. Hidden layers use
    /// sqrt(2), the actor head `actor_gain`, the critic head 1.
    pub fn init_orthogonal<R: Rng>(&mut self, rng: &mut R, actor_gain: f64) {
        let hidden = std::f64::consts::SQRT_2;
        let layers: Vec<(Layer, f64)> = self
            .trunk
            .iter()
            .map(|l| (l.clone(), hidden))
            .chain([(self.actor.clone(), actor_gain), (self.critic.clone(), 1.0)])
            .collect();
        for (l, gain) in layers {
            let (w, fan_in, fan_out, b, nb) = match l {
                Layer::Conv { cin, cout, k, w, b, .. } => (w, k * k * cin, cout, b, cout),
                Layer::Dense { nin, nout, w, b } => (w, nin, nout, b, nout),
                Layer::Relu { .. } => continue,
            };
            let q = orthogonal(rng, fan_in, fan_out);
            for i in 0..fan_in {
                for j in 0..fan_out {
                    self.params[w + i * fan_out + j] = T::from_f64(gain * q[(i, j)]);
                }
            }
            self.params[b..b + nb].fill(T::ZERO);
        }
    }

    /// Runs the network on `batch` inputs of `input_len` each.
    pub fn forward(&self, x: &[T], batch: usize) -> Tape<T> {
        assert_eq!(x.len(), batch * self.input_len, "input size");
        let p = &self.params;
        let mut inputs = Vec::with_capacity(self.trunk.len());
        let mut cur = x.to_vec();
        for l in &self.trunk {
            let next = match *l {
                Layer::Conv { cin, cout, k, out_hw, w, b, .. } => {
                    let cols = im2col(&cur, batch, l);
                    let rows = batch * out_hw.0 * out_hw.1;
                    let y = affine(&cols, rows, k * k * cin, cout, p, w, b);
                    inputs.push(cols);
                    y
                }
                Layer::Dense { nin, nout, w, b } => {
                    let y = affine(&cur, batch, nin, nout, p, w, b);
                    inputs.push(cur);
                    y
                }
                Layer::Relu { .. } => {
                    let y = cur.iter().map(|&v| if v > T::ZERO { v } else { T::ZERO }).collect();
                    inputs.push(cur);
                    y
                }
            };
            cur = next;
        }
        let head = |l: &Layer| match *l {
            Layer::Dense { nin, nout, w, b } => affine(&cur, batch, nin, nout, p, w, b),
            _ => unreachable!(),
        };
        let logits = head(&self.actor);
        let values = head(&self.critic);
        Tape {
            batch,
            inputs,
            features: cur,
            logits,
            values,
        }
    }

    /// Backpropagates head gradients (`dlogits`: batch x actions,
    /// `dvalues`: batch) into `grads`, which is accumulated into.
    pub fn backward(&self, tape: &Tape<T>, dlogits: &[T], dvalues: &[T], grads: &mut [T]) {
        let p = &self.params;
        let batch = tape.batch;
        let mut dfeat = vec![T::ZERO; tape.features.len()];
        for (l, dy) in [(&self.actor, dlogits), (&self.critic, dvalues)] {
            let Layer::Dense { nin, nout, w, b } = *l else { unreachable!() };
            let dx = affine_back(&tape.features, dy, batch, nin, nout, p, grads, w, b, true).unwrap();
            for (a, d) in dfeat.iter_mut().zip(dx) {
                *a += d;
            }
        }
        let mut dy = dfeat;
        for (i, l) in self.trunk.iter().enumerate().rev() {
            let x = &tape.inputs[i];
            let need = i > 0;
            dy = match *l {
                Layer::Conv { cin, cout, k, out_hw, w, b, .. } => {
                    let rows = batch * out_hw.0 * out_hw.1;
                    match affine_back(x, &dy, rows, k * k * cin, cout, p, grads, w, b, need) {
                        Some(dcols) => col2im(&dcols, batch, l),
                        None => break,
                    }
                }
                Layer::Dense { nin, nout, w, b } => match affine_back(x, &dy, batch, nin, nout, p, grads, w, b, need) {
                    Some(dx) => dx,
                    None => break,
                },
                Layer::Relu { .. } => dy.iter().zip(x).map(|(&d, &v)| if v > T::ZERO { d } else { T::ZERO }).collect(),
            };
        }
    }
}

/// `rows x cols` matrix with orthonormal columns (or rows, if wider).
fn orthogonal<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    let (big, small) = (rows.max(cols), rows.min(cols));
    let a = DMatrix::from_fn(big, small, |_, _| StandardNormal.sample(rng));
    let qr = a.qr();
    let mut q = qr.q();
    // Sign fix makes the draw uniform over the orthogonal group.
    let r = qr.r();
    for j in 0..small {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    if rows >= cols {
        q
    } else {
        q.transpose()
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-5,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn step<T: Scalar>(&mut self, params: &mut [T], grads: &[T]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i].to_f64();
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let upd = self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
            params[i] = T::from_f64(params[i].to_f64() - upd);
        }
    }
}

/// Scales `g` so its L2 norm is at most `max`; returns the original norm.
pub fn clip_grad_norm<T: Scalar>(g: &mut [T], max: f64) -> f64 {
    let norm = g.iter().map(|v| v.to_f64().powi(2)).sum::<f64>().sqrt();
    if norm > max && norm > 0.0 {
        let s = T::from_f64(max / norm);
        for v in g.iter_mut() {
            *v *= s;
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn conv_net() -> Network<f64> {
        let mut n = NetBuilder::new(6, 6, 2).conv(3, 3, 2, 1).relu().conv(2, 2, 1, 0).relu().dense(4).relu().heads(3, (6, 6, 2));
        n.init_orthogonal(&mut ChaCha8Rng::seed_from_u64(1), 1.0);
        // Non-zero biases exercise the bias gradients.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for v in n.params.iter_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
        n
    }

    /// Scalar test loss: weighted sum of logits and squared values.
    fn loss(n: &Network<f64>, x: &[f64], batch: usize, wl: &[f64]) -> f64 {
        let t = n.forward(x, batch);
        t.logits.iter().zip(wl).map(|(a, b)| a * b).sum::<f64>() + t.values.iter().map(|v| 0.5 * v * v).sum::<f64>()
    }

    #[test]
    fn conv_net_gradients_match_finite_differences() {
        let mut n = conv_net();
        let batch = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..batch * n.input_len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wl: Vec<f64> = (0..batch * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let t = n.forward(&x, batch);
        let mut g = vec![0.0; n.param_count()];
        n.backward(&t, &wl, &t.values.clone(), &mut g);
        let h = 1e-6;
        for i in 0..n.param_count() {
            let orig = n.params[i];
            n.params[i] = orig + h;
            let up = loss(&n, &x, batch, &wl);
            n.params[i] = orig - h;
            let down = loss(&n, &x, batch, &wl);
            n.params[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let err = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-6);
            assert!(err < 1e-4, "param {i}: analytic {} vs fd {fd}", g[i]);
        }
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        let l = NetBuilder::new(5, 4, 2).conv(1, 3, 2, 1).layers.remove(0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Vec<f64> = (0..2 * 5 * 4 * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cols = im2col(&x, 2, &l);
        let y: Vec<f64> = (0..cols.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let back = col2im(&y, 2, &l);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn conv_matches_direct_loops() {
        let n = conv_net();
        let Layer::Conv { cin, cout, k, stride, pad, in_hw, out_hw, w, b } = n.trunk[0] else { panic!() };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Vec<f64> = (0..n.input_len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cols = im2col(&x, 1, &n.trunk[0]);
        let y = affine(&cols, out_hw.0 * out_hw.1, k * k * cin, cout, &n.params, w, b);
        for oy in 0..out_hw.0 {
            for ox in 0..out_hw.1 {
                for co in 0..cout {
                    let mut s = n.params[b + co];
                    for ky in 0..k {
                        for kx in 0..k {
                            let (iy, ix) = ((oy * stride + ky) as isize - pad as isize, (ox * stride + kx) as isize - pad as isize);
                            if iy < 0 || ix < 0 || iy >= in_hw.0 as isize || ix >= in_hw.1 as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                let xv = x[(iy as usize * in_hw.1 + ix as usize) * cin + ci];
                                s += xv * n.params[w + ((ky * k + kx) * cin + ci) * cout + co];
                            }
                        }
                    }
                    assert!((y[(oy * out_hw.1 + ox) * cout + co] - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn orthogonal_init_is_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (r, c) in [(8, 3), (3, 8), (5, 5)] {
            let q = orthogonal(&mut rng, r, c);
            let g = if r >= c { q.transpose() * &q } else { &q * q.transpose() };
            let eye = DMatrix::<f64>::identity(g.nrows(), g.ncols());
            assert!((g - eye).abs().max() < 1e-10);
        }
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = vec![3.0f64, -2.0];
        let mut opt = Adam::new(2, 0.1);
        for _ in 0..500 {
            let g = vec![2.0 * p[0], 2.0 * p[1]];
            opt.step(&mut p, &g);
        }
        assert!(p[0].abs() < 1e-2 && p[1].abs() < 1e-2, "{p:?}");
    }

    #[test]
    fn grad_clip_caps_norm() {
        let mut g = vec![3.0f32, 4.0];
        assert_eq!(clip_grad_norm(&mut g, 0.5), 5.0);
        let n = (g[0] * g[0] + g[1] * g[1]).sqrt();
        assert!((n - 0.5).abs() < 1e-6);
    }
}
