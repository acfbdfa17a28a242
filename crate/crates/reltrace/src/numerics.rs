//! Dense numeric kernels shared by all modules, plus seedable randomness.
//!
//! Everything here operates on row-major f64 [`Tensor`]s. The kernels are
//! deliberately plain loops: model sizes in this crate are desk scale and
//! the decomposition identities downstream are exactness claims, so full
//! 64-bit accumulation matters more than throughput.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Row-major dense tensor of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.contains(&0) {
            return Err(Error::Shape(format!("zero extent in shape {shape:?}")));
        }
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} implies {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    /// Element accessor for rank-2 tensors.
    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[r * self.shape[1] + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[r * self.shape[1] + c] = v;
    }

    /// Row slice for rank-2 tensors.
    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        let w = self.shape[1];
        &self.data[r * w..(r + 1) * w]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let w = self.shape[1];
        &mut self.data[r * w..(r + 1) * w]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Random tensor with entries uniform in [-scale, scale).
    pub fn random(shape: Vec<usize>, scale: f64, rng: &mut Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.uniform(-scale, scale)).collect();
        Self { shape, data }
    }
}

/// Matrix product of rank-2 tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 || b.shape.len() != 2 {
        return Err(Error::Shape("matmul requires rank-2 tensors".into()));
    }
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return Err(Error::Shape(format!("matmul inner extents {k} vs {k2}")));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = a.row(i);
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = b.row(p);
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Max-shifted softmax over a slice with temperature `tau`.
pub fn softmax_slice(v: &[f64], tau: f64) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::Shape("softmax of empty input".into()));
    }
    if !tau.is_finite() || tau <= 0.0 {
        return Err(Error::Config(format!("softmax temperature must be positive, got {tau}")));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("softmax input".into()));
    }
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = v.iter().map(|&x| ((x - max) / tau).exp()).collect();
    let sum: f64 = out.iter().sum();
    for x in &mut out {
        *x /= sum;
    }
    Ok(out)
}

/// Softmax over a rank-1 tensor.
pub fn softmax(v: &Tensor, tau: f64) -> Result<Tensor> {
    if v.shape.len() != 1 {
        return Err(Error::Shape("softmax requires a rank-1 tensor".into()));
    }
    Tensor::new(v.shape.clone(), softmax_slice(&v.data, tau)?)
}

/// RMS normalization of a vector; returns `gamma ⊙ (r·x)` together with the
/// scalar scale `r = 1/sqrt(mean(x²)+eps)` so downstream tracing can freeze it.
pub fn rmsnorm(x: &[f64], gamma: &[f64], eps: f64) -> Result<(Vec<f64>, f64)> {
    if x.is_empty() || x.len() != gamma.len() {
        return Err(Error::Shape(format!(
            "rmsnorm lengths: x={} gamma={}",
            x.len(),
            gamma.len()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("rmsnorm input".into()));
    }
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let scale = 1.0 / (ms + eps).sqrt();
    let y = x.iter().zip(gamma).map(|(&v, &g)| g * (scale * v)).collect();
    Ok((y, scale))
}

/// Elementwise SiLU: `x · σ(x)`.
pub fn silu(x: &Tensor) -> Tensor {
    let data = x.data.iter().map(|&v| silu_scalar(v)).collect();
    Tensor { shape: x.shape.clone(), data }
}

#[inline]
pub fn silu_scalar(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Seedable deterministic random stream (ChaCha8; identical seed ⇒ identical
/// stream across platforms).
#[derive(Debug, Clone)]
pub struct Rng {
    inner: ChaCha8Rng,
    seed: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { inner: ChaCha8Rng::seed_from_u64(seed), seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent substream for unit `index` (episodes, layers, ...).
    pub fn substream(&self, index: u64) -> Rng {
        Rng::new(mix(self.seed, index))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.gen()
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.inner.gen_range(lo..hi)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    /// Sample `k` distinct indices from `[0, n)`, order randomized.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot sample {k} of {n}");
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below(n - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }
}

/// SplitMix64 finalizer used to derive per-unit seeds.
fn mix(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
