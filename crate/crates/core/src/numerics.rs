//! Dense linear algebra, seeded sampling and the Adam optimizer.
//!
//! Everything is `f64`. Matrices are row-major. Random streams come from
//! [`RngState`], a thin wrapper around ChaCha8 (`rand_chacha`), whose output
//! is specified bit-for-bit and identical on every platform. Independent
//! substreams are derived by hashing a base seed together with stream ids
//! through the SplitMix64 finalizer, so any (seed, ids) pair can be
//! regenerated without replaying the parent stream.

use std::ops::{Index, IndexMut};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::new",
                format!("{rows}x{cols} needs {} values, got {}", rows * cols, data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("Matrix::from_rows", "ragged rows"));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// `self · other`. Each output entry accumulates its products in
    /// increasing inner-index order starting from `0.0`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", self.shape(), other.shape()),
            ));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::shape(
                "t_matmul",
                format!("{:?}ᵀ x {:?}", self.shape(), other.shape()),
            ));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = other.row(k);
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::shape(
                "matmul_t",
                format!("{:?} x {:?}ᵀ", self.shape(), other.shape()),
            ));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a_row = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] =
                    a_row.iter().zip(other.row(j)).map(|(a, b)| a * b).sum();
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|x| *x *= factor);
    }

    /// `self += factor * other`.
    pub fn add_scaled(&mut self, other: &Matrix, factor: f64) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                "add_scaled",
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += factor * b;
        }
        Ok(())
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// `log(sum(exp(row)))`, stable for large magnitudes.
pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// SplitMix64 output function.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic seed for the substream `ids` of `seed`.
pub fn derive_seed(seed: u64, ids: &[u64]) -> u64 {
    ids.iter()
        .fold(splitmix64(seed), |acc, &id| splitmix64(acc ^ splitmix64(id)))
}

/// Seeded random stream (ChaCha8). Same seed and call order give the same
/// samples on every platform.
#[derive(Debug, Clone)]
pub struct RngState {
    seed: u64,
    inner: ChaCha8Rng,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream keyed by `(seed, ids)`. Does not advance `self`.
    pub fn substream(&self, ids: &[u64]) -> RngState {
        RngState::new(derive_seed(self.seed, ids))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random::<u64>()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// Matrix of independent `Bernoulli(p)` draws in `{0, 1}`.
pub fn bernoulli_sample(rng: &mut RngState, p: f64, rows: usize, cols: usize) -> Result<Matrix> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!(
            "bernoulli probability {p} outside [0, 1]"
        )));
    }
    let data = (0..rows * cols)
        .map(|_| if rng.uniform() < p { 1.0 } else { 0.0 })
        .collect();
    Matrix::new(rows, cols, data)
}

/// Glorot/Xavier uniform initialization in `[-a, a)`, `a = sqrt(6 / (rows + cols))`.
pub fn glorot_init(rng: &mut RngState, rows: usize, cols: usize) -> Matrix {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| (2.0 * rng.uniform() - 1.0) * limit)
        .collect();
    Matrix {
        rows,
        cols,
        data,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.005,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam moment buffers for a fixed list of parameter matrices.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[Matrix]) -> Self {
        let zeros = || params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        Self {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Matrix] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Matrix] {
        &self.second
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(params: &mut [Matrix], grads: &[Matrix], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(Error::shape(
            "adam_step",
            format!(
                "{} params, {} grads, {} moment buffers",
                params.len(),
                grads.len(),
                state.first.len()
            ),
        ));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.first) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::shape(
                "adam_step",
                format!("param {:?}, grad {:?}, moment {:?}", p.shape(), g.shape(), m.shape()),
            ));
        }
    }
    state.step += 1;
    let AdamConfig {
        learning_rate,
        beta1,
        beta2,
        epsilon,
    } = state.config;
    let t = state.step as i32;
    let bias1 = 1.0 - beta1.powi(t);
    let bias2 = 1.0 - beta2.powi(t);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.first.iter_mut())
        .zip(state.second.iter_mut())
    {
        for (((pi, &gi), mi), vi) in p
            .data
            .iter_mut()
            .zip(&g.data)
            .zip(m.data.iter_mut())
            .zip(v.data.iter_mut())
        {
            *mi = beta1 * *mi + (1.0 - beta1) * gi;
            *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            let m_hat = *mi / bias1;
            let v_hat = *vi / bias2;
            *pi -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0;
                for k in 0..a.cols() {
                    acc += a[(i, k)] * b[(k, j)];
                }
                out[(i, j)] = acc;
            }
        }
        out
    }

    fn random_matrix(rng: &mut RngState, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.normal()).collect();
        Matrix::new(rows, cols, data).unwrap()
    }

    #[test]
    fn identity_times_m() {
        let m = Matrix::from_rows(&[vec![1.5, -2.0], vec![0.25, 7.0]]).unwrap();
        assert_eq!(Matrix::identity(2).matmul(&m).unwrap(), m);
    }

    #[test]
    fn hand_product() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c, Matrix::from_rows(&[vec![2.0], vec![4.0]]).unwrap());
    }

    #[test]
    fn matmul_matches_triple_loop_exactly() {
        let mut rng = RngState::new(11);
        let a = random_matrix(&mut rng, 7, 5);
        let b = random_matrix(&mut rng, 5, 3);
        assert_eq!(a.matmul(&b).unwrap(), naive_matmul(&a, &b));
    }

    #[test]
    fn transposed_products_agree() {
        let mut rng = RngState::new(5);
        let a = random_matrix(&mut rng, 4, 6);
        let b = random_matrix(&mut rng, 4, 3);
        let c = random_matrix(&mut rng, 2, 6);
        let expect = a.transpose().matmul(&b).unwrap();
        assert!(a.t_matmul(&b).unwrap().max_abs_diff(&expect) < 1e-13);
        let expect = a.matmul(&c.transpose()).unwrap();
        assert!(a.matmul_t(&c).unwrap().max_abs_diff(&expect) < 1e-13);
    }

    #[test]
    fn matmul_shape_error() {
        let a = Matrix::zeros(2, 3);
        assert!(matches!(a.matmul(&a), Err(Error::Shape { .. })));
        assert!(Matrix::new(2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn softmax_examples() {
        let m = Matrix::from_rows(&[vec![0.0, 0.0, 0.0]]).unwrap();
        for &p in softmax_rows(&m).row(0) {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax_rows(&Matrix::from_rows(&[vec![1000.0, 0.0]]).unwrap());
        assert_eq!(s.row(0), &[1.0, 0.0]);

        let s = softmax_rows(&Matrix::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap());
        let denom: f64 = [1.0f64, 2.0, 3.0].iter().map(|x| x.exp()).sum();
        for (k, &p) in s.row(0).iter().enumerate() {
            let direct = ((k + 1) as f64).exp() / denom;
            assert!((p - direct).abs() < 1e-15);
        }
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut params = vec![Matrix::from_rows(&[vec![0.3, -1.0]]).unwrap()];
        let mut state = AdamState::new(AdamConfig::default(), &params);
        let start = params.clone();
        adam_step(&mut params, &[Matrix::zeros(1, 2)], &mut state).unwrap();
        assert_eq!(params, start);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn adam_moments_decay_under_zero_gradient() {
        let mut params = vec![Matrix::from_rows(&[vec![0.3, -1.0]]).unwrap()];
        let mut state = AdamState::new(AdamConfig::default(), &params);
        let g = Matrix::from_rows(&[vec![0.5, -0.5]]).unwrap();
        adam_step(&mut params, &[g], &mut state).unwrap();
        let m1 = state.first_moments()[0].clone();
        let v1 = state.second_moments()[0].clone();
        adam_step(&mut params, &[Matrix::zeros(1, 2)], &mut state).unwrap();
        for k in 0..2 {
            assert_eq!(state.first_moments()[0][(0, k)], 0.9 * m1[(0, k)]);
            assert_eq!(state.second_moments()[0][(0, k)], 0.999 * v1[(0, k)]);
        }
    }

    #[test]
    fn adam_first_step_hand_formula() {
        // With zero moments, step 1 gives m̂ = g and v̂ = g², so the update is
        // lr · g / (|g| + eps).
        let lr = 0.005;
        let g = 0.2;
        let mut params = vec![Matrix::from_rows(&[vec![1.0]]).unwrap()];
        let mut state = AdamState::new(AdamConfig::with_learning_rate(lr), &params);
        adam_step(&mut params, &[Matrix::from_rows(&[vec![g]]).unwrap()], &mut state).unwrap();
        let expect = 1.0 - lr * g / (g.abs() + 1e-8);
        assert!((params[0][(0, 0)] - expect).abs() < 1e-15);
    }

    #[test]
    fn adam_two_steps_match_scalar_reference() {
        fn scalar_adam(mut p: f64, grads: &[f64]) -> f64 {
            let (lr, b1, b2, eps) = (0.01, 0.9, 0.999, 1e-8);
            let (mut m, mut v) = (0.0, 0.0);
            for (t, &g) in grads.iter().enumerate() {
                let t = (t + 1) as i32;
                m = b1 * m + (1.0 - b1) * g;
                v = b2 * v + (1.0 - b2) * g * g;
                let m_hat = m / (1.0 - b1.powi(t));
                let v_hat = v / (1.0 - b2.powi(t));
                p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            p
        }
        let grads = [0.7, -0.3];
        let mut params = vec![Matrix::from_rows(&[vec![0.4]]).unwrap()];
        let mut state = AdamState::new(AdamConfig::with_learning_rate(0.01), &params);
        for g in grads {
            adam_step(&mut params, &[Matrix::from_rows(&[vec![g]]).unwrap()], &mut state).unwrap();
        }
        assert_eq!(params[0][(0, 0)], scalar_adam(0.4, &grads));
        assert_eq!(state.step_count(), 2);
    }

    #[test]
    fn adam_shape_mismatch() {
        let mut params = vec![Matrix::zeros(2, 2)];
        let mut state = AdamState::new(AdamConfig::default(), &params);
        assert!(adam_step(&mut params, &[Matrix::zeros(2, 3)], &mut state).is_err());
        assert_eq!(state.step_count(), 0);
    }

    #[test]
    fn bernoulli_extremes_and_mean() {
        let mut rng = RngState::new(1);
        assert!(bernoulli_sample(&mut rng, 0.0, 10, 10).unwrap().data().iter().all(|&x| x == 0.0));
        assert!(bernoulli_sample(&mut rng, 1.0, 10, 10).unwrap().data().iter().all(|&x| x == 1.0));
        let m = bernoulli_sample(&mut rng, 0.3, 1000, 100).unwrap();
        let mean = m.data().iter().sum::<f64>() / 1e5;
        assert!((mean - 0.3).abs() < 0.01, "mean {mean}");
        assert!(bernoulli_sample(&mut rng, 1.5, 1, 1).is_err());
        assert!(bernoulli_sample(&mut rng, -0.1, 1, 1).is_err());
    }

    #[test]
    fn glorot_bounds_variance_determinism() {
        let mut rng = RngState::new(3);
        let x = glorot_init(&mut rng, 1, 1)[(0, 0)];
        assert!(x.abs() <= 3f64.sqrt());

        let m = glorot_init(&mut rng, 200, 500);
        let n = m.data().len() as f64;
        let mean = m.data().iter().sum::<f64>() / n;
        let var = m.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let expect = 2.0 / 700.0;
        assert!((var / expect - 1.0).abs() < 0.05, "var {var} vs {expect}");

        let a = glorot_init(&mut RngState::new(9), 4, 6);
        let b = glorot_init(&mut RngState::new(9), 4, 6);
        assert_eq!(a, b);
    }

    #[test]
    fn substreams_are_reproducible_and_distinct() {
        let base = RngState::new(42);
        let mut a = base.substream(&[1, 2]);
        let mut b = base.substream(&[1, 2]);
        let mut c = base.substream(&[2, 1]);
        let xa: Vec<f64> = (0..8).map(|_| a.uniform()).collect();
        let xb: Vec<f64> = (0..8).map(|_| b.uniform()).collect();
        let xc: Vec<f64> = (0..8).map(|_| c.uniform()).collect();
        assert_eq!(xa, xb);
        assert_ne!(xa, xc);
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(row in prop::collection::vec(-1e6f64..1e6, 1..12)) {
            let m = Matrix::from_rows(&[row]).unwrap();
            let s = softmax_rows(&m);
            let sum: f64 = s.row(0).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(s.data().iter().all(|&p| p >= 0.0));
        }

        #[test]
        fn matmul_is_naive_on_random_shapes(r in 1usize..6, k in 1usize..6, c in 1usize..6, seed in any::<u64>()) {
            let mut rng = RngState::new(seed);
            let a = random_matrix(&mut rng, r, k);
            let b = random_matrix(&mut rng, k, c);
            prop_assert_eq!(a.matmul(&b).unwrap(), naive_matmul(&a, &b));
        }
    }
}
