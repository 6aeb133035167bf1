//! Dense tensors, seedable random streams and small numerically stable
//! helpers shared by the rest of the crate.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Error, Result};

/// Row-major dense tensor of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(shape_err(&shape, values.len()));
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            values: vec![0.0; n],
        }
    }

    /// One-dimensional tensor owning `values`.
    pub fn from_vec(values: Vec<f64>) -> Self {
        Self {
            shape: vec![values.len()],
            values,
        }
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Self::zeros(&other.shape)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Number of rows and columns of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(shape(format!("expected rank-2 tensor, got shape {other:?}"))),
        }
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.shape[self.shape.len() - 1];
        &self.values[i * cols..(i + 1) * cols]
    }

    pub fn sum_squares(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    pub fn scale(&mut self, factor: f64) {
        self.values.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn fill(&mut self, value: f64) {
        self.values.iter_mut().for_each(|v| *v = value);
    }

    /// `self += factor * other`.
    pub fn add_scaled(&mut self, other: &Tensor, factor: f64) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape(format!(
                "cannot add {:?} to {:?}",
                other.shape, self.shape
            )));
        }
        self.values
            .iter_mut()
            .zip(&other.values)
            .for_each(|(a, b)| *a += factor * b);
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

fn shape_err(dims: &[usize], len: usize) -> Error {
    shape(format!(
        "shape {dims:?} needs {} values, got {len}",
        dims.iter().product::<usize>()
    ))
}

/// Deterministic, platform independent random stream.
///
/// A stream is identified by `(seed, stream_id)`; the same pair always yields
/// the same sequence. Child streams with distinct ids never share a keystream.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha20Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            rng,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Fresh stream derived from this stream's identity and `id`. Does not
    /// advance `self`.
    pub fn child(&self, id: u64) -> RngStream {
        let derived = splitmix64(self.stream_id ^ splitmix64(id.wrapping_add(0x9e37_79b9)));
        RngStream::new(self.seed, derived)
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        // 53 random mantissa bits.
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        // Lemire's multiply-shift; bias is < 2^-32 for our ranges.
        ((self.rng.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// I.i.d. `N(0, sigma^2)` entries. Draws standard normals and scales them, so
/// the same stream at two sigmas gives proportional tensors.
pub fn gaussian_sample(dims: &[usize], sigma: f64, rng: &mut RngStream) -> Result<Tensor> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(invalid(format!("sigma must be finite and >= 0, got {sigma}")));
    }
    let n: usize = dims.iter().product();
    let values = (0..n).map(|_| sigma * rng.standard_normal()).collect();
    Tensor::new(dims.to_vec(), values)
}

/// Euclidean norm over all entries.
pub fn l2_norm(t: &Tensor) -> f64 {
    t.sum_squares().sqrt()
}

/// Central-difference gradient of `f` at `x`.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(invalid(format!("step must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut grad = Tensor::zeros_like(x);
    for i in 0..x.len() {
        let orig = probe.values[i];
        probe.values[i] = orig + h;
        let plus = f(&probe)?;
        probe.values[i] = orig - h;
        let minus = f(&probe)?;
        probe.values[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!(
                "objective not finite around coordinate {i}"
            )));
        }
        grad.values[i] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// `ln Γ(x)` for `x >= 1024` via the Stirling series.
fn ln_gamma_large(x: f64) -> f64 {
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    (x - 0.5) * x.ln() - x
        + 0.5 * (2.0 * std::f64::consts::PI).ln()
        + inv * (1.0 / 12.0 - inv2 * (1.0 / 360.0 - inv2 / 1260.0))
}

/// `ln C(n, k)`.
pub fn log_binomial(n: u64, k: u64) -> Result<f64> {
    if k > n {
        return Err(invalid(format!("log_binomial: k={k} exceeds n={n}")));
    }
    let k = k.min(n - k);
    if k <= 1024 {
        // Exact product form, one log per factor.
        let nk = (n - k) as f64;
        Ok((1..=k).map(|i| ((nk + i as f64) / i as f64).ln()).sum())
    } else {
        Ok(ln_gamma_large((n + 1) as f64)
            - ln_gamma_large((k + 1) as f64)
            - ln_gamma_large((n - k + 1) as f64))
    }
}

/// `ln Σ exp(x_i)` without overflow.
pub fn logsumexp(xs: &[f64]) -> Result<f64> {
    let max = xs
        .iter()
        .copied()
        .fold(None, |acc: Option<f64>, x| Some(acc.map_or(x, |a| a.max(x))))
        .ok_or_else(|| invalid("logsumexp of an empty list"))?;
    if max == f64::NEG_INFINITY {
        return Ok(f64::NEG_INFINITY);
    }
    if !max.is_finite() {
        return Ok(max);
    }
    let sum: f64 = xs.iter().map(|x| (x - max).exp()).sum();
    Ok(max + sum.ln())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_shape_is_checked() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![0.0; 5]),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn zero_sigma_gives_zeros() {
        let mut rng = RngStream::new(7, 0);
        let t = gaussian_sample(&[3], 0.0, &mut rng).unwrap();
        assert_eq!(t.values(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn negative_sigma_rejected() {
        let mut rng = RngStream::new(7, 0);
        assert!(matches!(
            gaussian_sample(&[3], -1.0, &mut rng),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn gaussian_moments() {
        let mut rng = RngStream::new(1234, 0);
        let n = 1_000_000;
        let t = gaussian_sample(&[n], 2.0, &mut rng).unwrap();
        let mean = t.values().iter().sum::<f64>() / n as f64;
        let var = t.values().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 4.0).abs() < 0.04, "variance {var}");
    }

    #[test]
    fn same_seed_same_stream_bitwise_identical() {
        let a = gaussian_sample(&[64], 1.5, &mut RngStream::new(42, 0)).unwrap();
        let b = gaussian_sample(&[64], 1.5, &mut RngStream::new(42, 0)).unwrap();
        let bits = |t: &Tensor| t.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        let c = gaussian_sample(&[64], 1.5, &mut RngStream::new(42, 1)).unwrap();
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn sigma_scaling_property() {
        let a = gaussian_sample(&[100], 1.0, &mut RngStream::new(3, 9)).unwrap();
        let b = gaussian_sample(&[100], 3.5, &mut RngStream::new(3, 9)).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert_eq!(x * 3.5, *y);
        }
    }

    #[test]
    fn child_streams_differ() {
        let root = RngStream::new(5, 0);
        let mut a = root.child(1);
        let mut b = root.child(2);
        let mut a2 = root.child(1);
        let (x, y, z) = (a.next_u64(), b.next_u64(), a2.next_u64());
        assert_ne!(x, y);
        assert_eq!(x, z);
    }

    #[test]
    fn l2_norm_basic() {
        assert_eq!(l2_norm(&Tensor::from_vec(vec![0.0, 0.0, 0.0])), 0.0);
        assert_eq!(l2_norm(&Tensor::from_vec(vec![3.0, 4.0])), 5.0);
    }

    #[test]
    fn l2_norm_matches_loop() {
        let t = gaussian_sample(&[100], 1.0, &mut RngStream::new(11, 0)).unwrap();
        let mut acc = 0.0;
        for v in t.values() {
            acc += v * v;
        }
        assert!((l2_norm(&t) - acc.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn finite_diff_quadratic_and_constant() {
        let x = Tensor::from_vec(vec![1.0, 2.0]);
        let g = finite_diff_grad(|t| Ok(t.sum_squares()), &x, 1e-5).unwrap();
        assert!((g.values()[0] - 2.0).abs() < 1e-8);
        assert!((g.values()[1] - 4.0).abs() < 1e-8);
        let g = finite_diff_grad(|_| Ok(3.0), &x, 1e-5).unwrap();
        assert!(g.values().iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn finite_diff_mae_linear_model() {
        // y = a*x + b on points (0,1), (1,0), (2,4); at a=1, b=0.5 residuals
        // are -0.5, 1.5, -1.5 so the subgradient is well defined.
        let xs = [0.0, 1.0, 2.0];
        let ys = [1.0, 0.0, 4.0];
        let mae = |t: &Tensor| -> Result<f64> {
            let (a, b) = (t.values()[0], t.values()[1]);
            Ok(xs.iter().zip(&ys).map(|(x, y)| (a * x + b - y).abs()).sum::<f64>() / 3.0)
        };
        let g = finite_diff_grad(mae, &Tensor::from_vec(vec![1.0, 0.5]), 1e-5).unwrap();
        // d/da = (sign(-0.5)*0 + sign(1.5)*1 + sign(-1.5)*2)/3 = -1/3
        // d/db = (-1 + 1 - 1)/3 = -1/3
        assert!((g.values()[0] + 1.0 / 3.0).abs() < 1e-8);
        assert!((g.values()[1] + 1.0 / 3.0).abs() < 1e-8);
    }

    #[test]
    fn finite_diff_propagates_non_finite() {
        let x = Tensor::from_vec(vec![1.0]);
        assert!(matches!(
            finite_diff_grad(|_| Ok(f64::NAN), &x, 1e-5),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn log_binomial_values() {
        assert!((log_binomial(5, 2).unwrap() - 10f64.ln()).abs() < 1e-15);
        assert_eq!(log_binomial(512, 0).unwrap(), 0.0);
        assert!(log_binomial(3, 4).is_err());
    }

    #[test]
    fn log_binomial_stirling_branch_is_continuous() {
        // k = 1024 takes the product branch, k = 1025 the Stirling branch.
        let n = 4000;
        let exact = log_binomial(n, 1024).unwrap();
        let step = ((n - 1024) as f64 / 1025.0).ln();
        let next = log_binomial(n, 1025).unwrap();
        assert!((next - (exact + step)).abs() / next < 1e-12);
    }

    #[test]
    fn logsumexp_values() {
        assert!((logsumexp(&[0.0, 0.0]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!((logsumexp(&[1000.0, 1000.0]).unwrap() - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert!(logsumexp(&[]).is_err());
        assert_eq!(
            logsumexp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]).unwrap(),
            f64::NEG_INFINITY
        );
    }

    #[test]
    fn logsumexp_matches_naive() {
        let mut rng = RngStream::new(99, 0);
        let xs: Vec<f64> = (0..50).map(|_| rng.uniform() * 20.0 - 10.0).collect();
        let naive = xs.iter().map(|x| x.exp()).sum::<f64>().ln();
        let got = logsumexp(&xs).unwrap();
        assert!((got - naive).abs() / naive.abs() < 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn norm_is_homogeneous(vals in proptest::collection::vec(-1e3f64..1e3, 1..40), a in -50f64..50.0) {
                let t = Tensor::from_vec(vals.clone());
                let scaled = Tensor::from_vec(vals.iter().map(|v| a * v).collect());
                let lhs = l2_norm(&scaled);
                let rhs = a.abs() * l2_norm(&t);
                prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.max(1e-300));
            }

            #[test]
            fn logsumexp_shift(vals in proptest::collection::vec(-50f64..50.0, 1..30), c in -100f64..100.0) {
                let shifted: Vec<f64> = vals.iter().map(|v| v + c).collect();
                let lhs = logsumexp(&shifted).unwrap();
                let rhs = logsumexp(&vals).unwrap() + c;
                prop_assert!((lhs - rhs).abs() < 1e-12 * (1.0 + rhs.abs()));
            }
        }
    }
}
