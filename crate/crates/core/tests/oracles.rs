//! Arbitrary-precision checks of the privacy arithmetic.

use num_bigint::BigInt;

use dpmobility::numeric::log_binomial;
use dpmobility::privacy::{gaussian_sigma, rdp_subsampled_gaussian};

fn binomial(n: u64, k: u64) -> BigInt {
    let mut c = BigInt::from(1u32);
    for i in 0..k {
        c = c * (n - i) / (i + 1);
    }
    c
}

/// Natural log of a positive integer, via its leading decimal digits.
fn ln_big(x: &BigInt) -> f64 {
    let s = x.to_string();
    let lead = s.len().min(17);
    let m: f64 = s[..lead].parse().unwrap();
    m.ln() + (s.len() - lead) as f64 * std::f64::consts::LN_10
}

/// `e^(num/den) · 2^bits` in fixed point (Taylor series, exact integer steps).
fn exp_fixed(num: u64, den: u64, bits: u64) -> BigInt {
    let one = BigInt::from(1u32) << bits;
    let mut term = one.clone();
    let mut sum = one;
    let mut n = 1u64;
    while term > BigInt::from(0u32) {
        term = term * num / (den * n);
        sum += &term;
        n += 1;
    }
    sum
}

/// Direct evaluation of the binomial sum for q = a/b and σ² = s2, returning
/// `ln(Σ)/(α − 1)`.
fn rdp_oracle(a: u64, b: u64, s2: u64, alpha: u64) -> f64 {
    const BITS: u64 = 600;
    let denom = BigInt::from(b).pow(alpha as u32);
    let one = BigInt::from(1u32) << BITS;
    // Σ − 1 = Σ_{k≥2} C(α,k) (b−a)^{α−k} a^k / b^α · (e^{k(k−1)/(2σ²)} − 1).
    let mut excess = BigInt::from(0u32);
    for k in 2..=alpha {
        let weight = binomial(alpha, k) * BigInt::from(b - a).pow((alpha - k) as u32) * BigInt::from(a).pow(k as u32);
        let e = exp_fixed(k * (k - 1), 2 * s2, BITS) - &one;
        excess += weight * e / &denom;
    }
    let scaled = (excess * BigInt::from(10u32).pow(40)) >> BITS;
    let x: f64 = scaled.to_string().parse::<f64>().unwrap() / 1e40;
    x.ln_1p() / (alpha - 1) as f64
}

#[test]
fn rdp_matches_big_number_sum_at_order_512() {
    let want = rdp_oracle(5, 3120, 35 * 35, 512);
    let got = rdp_subsampled_gaussian(5.0 / 3120.0, 35.0, 512).unwrap();
    assert!((got / want - 1.0).abs() < 1e-9, "{got} vs {want}");
}

#[test]
fn rdp_matches_big_number_sum_small_orders() {
    for alpha in [2u64, 3, 17, 64] {
        let want = rdp_oracle(10, 3120, 140 * 140, alpha);
        let got = rdp_subsampled_gaussian(10.0 / 3120.0, 140.0, alpha as u32).unwrap();
        assert!((got / want - 1.0).abs() < 1e-9, "alpha {alpha}: {got} vs {want}");
    }
}

#[test]
fn log_binomial_matches_exact_integers() {
    for (n, k) in [(512u64, 256u64), (64, 3), (1000, 999), (4096, 2048), (3000, 1500)] {
        let want = ln_big(&binomial(n, k));
        let got = log_binomial(n, k).unwrap();
        assert!((got / want - 1.0).abs() < 1e-12, "C({n},{k}): {got} vs {want}");
    }
}

#[test]
fn gaussian_sigma_high_precision_values() {
    // Reference values evaluated with 40-digit arithmetic.
    let cases = [
        (1.0, 0.5, 0.125, 4.291932052578694479),
        (1.0, 0.0357, 1e-7, 160.1361103101099919),
        (1.0, 0.0650, 1e-7, 87.95167904724502634),
        (1.0, 0.0399, 1e-7, 143.2796776458878875),
        (2.5, 0.9, 1e-5, 13.45779239612608173),
    ];
    for (d, e, delta, want) in cases {
        let got = gaussian_sigma(d, e, delta).unwrap();
        assert!((got / want - 1.0).abs() < 1e-9, "{got} vs {want}");
    }
}
