//! Small dense networks with hand-written backpropagation.
//!
//! Parameters of a whole network live in one flat vector so optimisers and
//! gradient reductions are plain slice loops. Batches are row-major
//! `rows × features` matrices.

use std::fmt::Debug;
use std::ops::{AddAssign, Range};

use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{self, Execution};

/// Scalar type a network can be evaluated in.
pub trait Real: Float + Default + Debug + Send + Sync + AddAssign + std::iter::Sum + 'static {
    const NAME: &'static str;

    fn of(x: f64) -> Self;
    fn f64(self) -> f64;

    /// `C = α A B + β C` for row-major buffers with explicit strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
    );
}

macro_rules! impl_real {
    ($t:ty, $name:literal, $kernel:path) => {
        impl Real for $t {
            const NAME: &'static str = $name;

            #[inline]
            fn of(x: f64) -> Self {
                x as $t
            }

            #[inline]
            fn f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(c.len() >= m * n);
                if m > 0 && n > 0 {
                    let last_a = (m as isize - 1) * rsa + (k as isize - 1).max(0) * csa;
                    let last_b = (k as isize - 1).max(0) * rsb + (n as isize - 1) * csb;
                    assert!(k == 0 || (last_a as usize) < a.len() && (last_b as usize) < b.len());
                }
                // SAFETY: the asserts above bound every index the kernel reads or writes.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    )
                }
            }
        }
    };
}

impl_real!(f32, "f32", matrixmultiply::sgemm);
impl_real!(f64, "f64", matrixmultiply::dgemm);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    /// Tanh approximation of the Gaussian error linear unit.
    Gelu,
    Tanh,
}

const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_A: f64 = 0.044_715;

impl Activation {
    #[inline]
    fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Gelu => {
                let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
                T::of(0.5) * x * (T::one() + u.tanh())
            }
            Activation::Tanh => x.tanh(),
        }
    }

    #[inline]
    fn derivative<T: Real>(self, x: T) -> T {
        match self {
            Activation::Gelu => {
                let x2 = x * x;
                let u = T::of(GELU_C) * (x + T::of(GELU_A) * x2 * x);
                let t = u.tanh();
                let du = T::of(GELU_C) * (T::one() + T::of(3.0 * GELU_A) * x2);
                T::of(0.5) * (T::one() + t) + T::of(0.5) * x * (T::one() - t * t) * du
            }
            Activation::Tanh => {
                let t = x.tanh();
                T::one() - t * t
            }
        }
    }

    pub fn code(self) -> u32 {
        match self {
            Activation::Gelu => 0,
            Activation::Tanh => 1,
        }
    }

    pub fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(Activation::Gelu),
            1 => Ok(Activation::Tanh),
            _ => Err(Error::Format(format!("unknown activation code {code}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct LayerShape {
    inputs: usize,
    outputs: usize,
    w: usize,
    b: usize,
}

/// Fully connected network: hidden layers use `activation`, the head is linear.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T: Real> {
    widths: Vec<usize>,
    activation: Activation,
    layers: Vec<LayerShape>,
    pub params: Vec<T>,
}

/// Intermediate values of a forward pass, kept for backpropagation.
pub struct Tape<T> {
    rows: usize,
    /// Inputs of each layer (the first is the batch itself).
    inputs: Vec<Vec<T>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Vec<T>>,
    pub output: Vec<T>,
}

impl<T: Real> Mlp<T> {
    /// `widths = [inputs, hidden…, outputs]`, all parameters zero.
    pub fn zeros(widths: &[usize], activation: Activation) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::InvalidArgument(format!("bad layer widths {widths:?}")));
        }
        let mut layers = Vec::with_capacity(widths.len() - 1);
        let mut offset = 0;
        for pair in widths.windows(2) {
            let (inputs, outputs) = (pair[0], pair[1]);
            layers.push(LayerShape {
                inputs,
                outputs,
                w: offset,
                b: offset + inputs * outputs,
            });
            offset += inputs * outputs + outputs;
        }
        Ok(Self {
            widths: widths.to_vec(),
            activation,
            layers,
            params: vec![T::zero(); offset],
        })
    }

    /// Glorot-uniform weights, zero biases. With `zero_head` the output
    /// layer starts at zero, so the network initially outputs zeros.
    pub fn glorot(widths: &[usize], activation: Activation, zero_head: bool, rng: &mut impl Rng) -> Result<Self> {
        let mut net = Self::zeros(widths, activation)?;
        let last = net.layers.len() - 1;
        for (l, shape) in net.layers.clone().into_iter().enumerate() {
            if zero_head && l == last {
                continue;
            }
            let limit = (6.0 / (shape.inputs + shape.outputs) as f64).sqrt();
            for p in &mut net.params[shape.w..shape.b] {
                *p = T::of(rng.random_range(-limit..limit));
            }
        }
        Ok(net)
    }

    pub fn from_params(widths: &[usize], activation: Activation, params: Vec<T>) -> Result<Self> {
        let mut net = Self::zeros(widths, activation)?;
        if params.len() != net.params.len() {
            return Err(Error::DimensionMismatch {
                expected: net.params.len(),
                found: params.len(),
            });
        }
        net.params = params;
        Ok(net)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn inputs(&self) -> usize {
        self.widths[0]
    }

    pub fn outputs(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn affine(&self, shape: &LayerShape, x: &[T], rows: usize) -> Vec<T> {
        let mut y = Vec::with_capacity(rows * shape.outputs);
        let bias = &self.params[shape.b..shape.b + shape.outputs];
        for _ in 0..rows {
            y.extend_from_slice(bias);
        }
        T::gemm(
            rows,
            shape.inputs,
            shape.outputs,
            T::one(),
            x,
            shape.inputs as isize,
            1,
            &self.params[shape.w..shape.b],
            shape.outputs as isize,
            1,
            T::one(),
            &mut y,
        );
        y
    }

    /// Forward pass without storing intermediates.
    pub fn predict(&self, x: &[T], rows: usize) -> Vec<T> {
        assert_eq!(x.len(), rows * self.inputs());
        let last = self.layers.len() - 1;
        let mut cur = x.to_vec();
        for (l, shape) in self.layers.iter().enumerate() {
            let mut y = self.affine(shape, &cur, rows);
            if l < last {
                for v in &mut y {
                    *v = self.activation.apply(*v);
                }
            }
            cur = y;
        }
        cur
    }

    pub fn forward(&self, x: &[T], rows: usize) -> Tape<T> {
        assert_eq!(x.len(), rows * self.inputs());
        let last = self.layers.len() - 1;
        let mut inputs = vec![x.to_vec()];
        let mut pre = Vec::with_capacity(last);
        let mut output = Vec::new();
        for (l, shape) in self.layers.iter().enumerate() {
            let y = self.affine(shape, inputs.last().unwrap(), rows);
            if l < last {
                let act = y.iter().map(|&v| self.activation.apply(v)).collect();
                pre.push(y);
                inputs.push(act);
            } else {
                output = y;
            }
        }
        Tape {
            rows,
            inputs,
            pre,
            output,
        }
    }

    /// Accumulate `∂L/∂params` into `grad` given `∂L/∂output`.
    pub fn backward(&self, tape: &Tape<T>, dout: &[T], grad: &mut [T]) {
        let rows = tape.rows;
        assert_eq!(dout.len(), rows * self.outputs());
        assert_eq!(grad.len(), self.params.len());
        let mut delta = dout.to_vec();
        for l in (0..self.layers.len()).rev() {
            let shape = self.layers[l];
            let x = &tape.inputs[l];
            // dW += xᵀ δ
            T::gemm(
                shape.inputs,
                rows,
                shape.outputs,
                T::one(),
                x,
                1,
                shape.inputs as isize,
                &delta,
                shape.outputs as isize,
                1,
                T::one(),
                &mut grad[shape.w..shape.b],
            );
            let gb = &mut grad[shape.b..shape.b + shape.outputs];
            for r in 0..rows {
                for (g, d) in gb.iter_mut().zip(&delta[r * shape.outputs..(r + 1) * shape.outputs]) {
                    *g += *d;
                }
            }
            if l == 0 {
                break;
            }
            // δ ← (δ Wᵀ) ⊙ σ'(pre)
            let mut next = vec![T::zero(); rows * shape.inputs];
            T::gemm(
                rows,
                shape.outputs,
                shape.inputs,
                T::one(),
                &delta,
                shape.outputs as isize,
                1,
                &self.params[shape.w..shape.b],
                1,
                shape.outputs as isize,
                T::zero(),
                &mut next,
            );
            for (v, &z) in next.iter_mut().zip(&tape.pre[l - 1]) {
                *v = *v * self.activation.derivative(z);
            }
            delta = next;
        }
    }

    /// Gradient of the network output with respect to its input, for one row.
    pub fn input_gradient(&self, x: &[T], dout: &[T]) -> Vec<T> {
        let tape = self.forward(x, 1);
        let mut delta = dout.to_vec();
        for l in (0..self.layers.len()).rev() {
            let shape = self.layers[l];
            let mut next = vec![T::zero(); shape.inputs];
            T::gemm(
                1,
                shape.outputs,
                shape.inputs,
                T::one(),
                &delta,
                shape.outputs as isize,
                1,
                &self.params[shape.w..shape.b],
                1,
                shape.outputs as isize,
                T::zero(),
                &mut next,
            );
            if l > 0 {
                for (v, &z) in next.iter_mut().zip(&tape.pre[l - 1]) {
                    *v = *v * self.activation.derivative(z);
                }
            }
            delta = next;
        }
        delta
    }

    pub fn cast<U: Real>(&self) -> Mlp<U> {
        Mlp {
            widths: self.widths.clone(),
            activation: self.activation,
            layers: self.layers.clone(),
            params: self.params.iter().map(|p| U::of(p.f64())).collect(),
        }
    }
}

/// Rows per gradient chunk. Chunk boundaries never depend on the thread
/// count, so reductions are bitwise reproducible.
pub const GRAD_CHUNK: usize = 128;

/// Sum of per-chunk `(loss, gradient)` contributions over `0..rows`.
///
/// `f(range, grad)` adds the gradient of its chunk's loss into `grad` and
/// returns the chunk loss.
pub fn chunked_gradient<T, F>(exec: Execution, rows: usize, params: usize, f: F) -> (f64, Vec<T>)
where
    T: Real,
    F: Fn(Range<usize>, &mut [T]) -> f64 + Sync + Send,
{
    let parts = par::map_chunks(exec, rows, GRAD_CHUNK, |range| {
        let mut g = vec![T::zero(); params];
        let loss = f(range, &mut g);
        (loss, g)
    });
    let mut total = 0.0;
    let mut grad = vec![T::zero(); params];
    for (loss, g) in parts {
        total += loss;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += *b;
        }
    }
    (total, grad)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T: Real> {
    pub config: AdamConfig,
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub steps: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(params: usize, config: AdamConfig) -> Self {
        Self {
            config,
            m: vec![T::zero(); params],
            v: vec![T::zero(); params],
            steps: 0,
        }
    }

    pub fn step(&mut self, params: &mut [T], grad: &[T], lr: f64) {
        self.steps += 1;
        let c = self.config;
        let b1 = T::of(c.beta1);
        let b2 = T::of(c.beta2);
        let corr1 = 1.0 - c.beta1.powi(self.steps as i32);
        let corr2 = 1.0 - c.beta2.powi(self.steps as i32);
        let step = T::of(lr * corr2.sqrt() / corr1);
        let eps = T::of(c.eps * corr2.sqrt());
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = b1 * self.m[i] + (T::one() - b1) * g;
            self.v[i] = b2 * self.v[i] + (T::one() - b2) * g * g;
            params[i] = params[i] - step * self.m[i] / (self.v[i].sqrt() + eps);
        }
    }
}

/// Cosine decay from `lr` to zero over `total` epochs.
pub fn cosine_lr(lr: f64, epoch: usize, total: usize) -> f64 {
    if total == 0 {
        return lr;
    }
    0.5 * lr * (1.0 + (std::f64::consts::PI * epoch as f64 / total as f64).cos())
}

/// Deterministic permutation of `0..n`.
pub fn shuffled(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net(widths: &[usize], act: Activation) -> Mlp<f64> {
        Mlp::glorot(widths, act, false, &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
    }

    fn batch(rows: usize, cols: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Reference forward pass with explicit loops.
    fn naive(net: &Mlp<f64>, x: &[f64]) -> Vec<f64> {
        let mut cur = x.to_vec();
        let last = net.layers.len() - 1;
        for (l, s) in net.layers.iter().enumerate() {
            let mut y = vec![0.0; s.outputs];
            for o in 0..s.outputs {
                y[o] = net.params[s.b + o];
                for i in 0..s.inputs {
                    y[o] += cur[i] * net.params[s.w + i * s.outputs + o];
                }
                if l < last {
                    y[o] = net.activation.apply(y[o]);
                }
            }
            cur = y;
        }
        cur
    }

    #[test]
    fn batched_forward_matches_loops() {
        let n = net(&[5, 7, 6, 3], Activation::Gelu);
        let x = batch(4, 5);
        let y = n.predict(&x, 4);
        for r in 0..4 {
            let want = naive(&n, &x[r * 5..(r + 1) * 5]);
            for o in 0..3 {
                assert!((y[r * 3 + o] - want[o]).abs() < 1e-14);
            }
        }
        assert_eq!(n.forward(&x, 4).output, y);
    }

    #[test]
    fn activation_derivatives_match_differences() {
        for act in [Activation::Gelu, Activation::Tanh] {
            for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
                let h = 1e-6;
                let fd = (act.apply(x + h) - act.apply(x - h)) / (2.0 * h);
                assert!((fd - act.derivative(x)).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        for act in [Activation::Gelu, Activation::Tanh] {
            let mut n = net(&[4, 8, 8, 3], act);
            let x = batch(5, 4);
            let w = batch(5, 3);
            let loss = |n: &Mlp<f64>| n.predict(&x, 5).iter().zip(&w).map(|(y, w)| y * y * w).sum::<f64>();
            let tape = n.forward(&x, 5);
            let dout: Vec<f64> = tape.output.iter().zip(&w).map(|(y, w)| 2.0 * y * w).collect();
            let mut grad = vec![0.0; n.param_count()];
            n.backward(&tape, &dout, &mut grad);
            for i in 0..n.param_count() {
                let p0 = n.params[i];
                let h = 1e-6;
                n.params[i] = p0 + h;
                let lp = loss(&n);
                n.params[i] = p0 - h;
                let lm = loss(&n);
                n.params[i] = p0;
                let fd = (lp - lm) / (2.0 * h);
                assert!((fd - grad[i]).abs() <= 1e-6 * fd.abs().max(1e-3), "{i}: {fd} vs {}", grad[i]);
            }
            let xi = &x[..4];
            let gi = n.input_gradient(xi, &[1.0, -0.5, 2.0]);
            for j in 0..4 {
                let h = 1e-6;
                let mut a = xi.to_vec();
                let mut b = xi.to_vec();
                a[j] += h;
                b[j] -= h;
                let f = |v: &[f64]| {
                    let y = n.predict(v, 1);
                    y[0] - 0.5 * y[1] + 2.0 * y[2]
                };
                let fd = (f(&a) - f(&b)) / (2.0 * h);
                assert!((fd - gi[j]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn zero_head_outputs_zero() {
        let n: Mlp<f64> = Mlp::glorot(&[3, 16, 2], Activation::Gelu, true, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(n.predict(&batch(6, 3), 6).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn chunked_gradient_is_mode_independent() {
        let n = net(&[3, 8, 2], Activation::Gelu);
        let x = batch(300, 3);
        let run = |exec| {
            chunked_gradient::<f64, _>(exec, 300, n.param_count(), |r, g| {
                let rows = r.len();
                let tape = n.forward(&x[r.start * 3..r.end * 3], rows);
                n.backward(&tape, &tape.output, g);
                tape.output.iter().map(|v| 0.5 * v * v).sum()
            })
        };
        let (la, ga) = run(Execution::Serial);
        let (lb, gb) = run(Execution::Parallel);
        assert_eq!(la.to_bits(), lb.to_bits());
        assert_eq!(ga, gb);
    }

    #[test]
    fn adam_minimises_quadratic() {
        let mut p = vec![3.0f64, -2.0];
        let mut opt = Adam::new(2, AdamConfig::default());
        for _ in 0..3000 {
            let g: Vec<f64> = p.iter().map(|x| 2.0 * x).collect();
            opt.step(&mut p, &g, 1e-2);
        }
        assert!(p.iter().all(|x| x.abs() < 1e-3));
    }

    #[test]
    fn f32_matches_f64() {
        let n = net(&[5, 16, 4], Activation::Gelu);
        let x = batch(3, 5);
        let a = n.predict(&x, 3);
        let n32: Mlp<f32> = n.cast();
        let x32: Vec<f32> = x.iter().map(|&v| v as f32).collect();
        let b = n32.predict(&x32, 3);
        for (u, v) in a.iter().zip(&b) {
            assert!((u - *v as f64).abs() < 1e-5);
        }
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(1e-3, 0, 10), 1e-3);
        assert!(cosine_lr(1e-3, 10, 10).abs() < 1e-18);
    }
}
