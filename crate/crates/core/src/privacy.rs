//! Gaussian mechanism, Rényi-DP accounting for subsampled Gaussian noise,
//! and the sequential-composition ledger.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{CountSource, MobilitySeries};
use crate::error::{invalid, Error, Result};
use crate::numeric::{log_binomial, logsumexp, RngStream};

/// Orders {2, …, 64} ∪ {128, 256, 512}.
pub const DEFAULT_ORDERS: [u32; 66] = {
    let mut o = [0u32; 66];
    let mut i = 0;
    while i < 63 {
        o[i] = i as u32 + 2;
        i += 1;
    }
    o[63] = 128;
    o[64] = 256;
    o[65] = 512;
    o
};

/// `(ε, δ)` target plus the ℓ2 sensitivity of one release.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyParams {
    pub epsilon: f64,
    pub delta: f64,
    /// One user sits in one region per snapshot, so 1 by default.
    pub sensitivity: f64,
}

impl PrivacyParams {
    pub fn new(epsilon: f64, delta: f64) -> Self {
        Self {
            epsilon,
            delta,
            sensitivity: 1.0,
        }
    }

    pub fn sigma(&self) -> Result<f64> {
        gaussian_sigma(self.sensitivity, self.epsilon, self.delta)
    }
}

/// Provenance attached to every series a mechanism produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyRecord {
    mechanism: String,
    epsilon: f64,
    delta: f64,
    sensitivity: f64,
    sigma: f64,
    releases: usize,
    clamped: bool,
}

impl PrivacyRecord {
    pub fn mechanism(&self) -> &str {
        &self.mechanism
    }

    /// Per-release ε.
    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn sensitivity(&self) -> f64 {
        self.sensitivity
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Number of snapshots released, each costing `(ε, δ)`.
    pub fn releases(&self) -> usize {
        self.releases
    }

    pub fn clamped(&self) -> bool {
        self.clamped
    }
}

/// Noise scale of the Gaussian mechanism.
pub fn gaussian_sigma(sensitivity: f64, epsilon: f64, delta: f64) -> Result<f64> {
    if !(sensitivity > 0.0 && sensitivity.is_finite()) {
        return Err(invalid(format!("sensitivity must be positive, got {sensitivity}")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(invalid(format!("delta must lie in (0, 1), got {delta}")));
    }
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::OutOfValidity(format!(
            "Gaussian mechanism needs epsilon in (0, 1), got {epsilon}"
        )));
    }
    Ok(sensitivity / epsilon * (2.0 * (1.25 / delta).ln()).sqrt())
}

/// Adds independent `N(0, σ²)` noise to every count.
///
/// Noise is drawn in row-major order, so the same `rng` state yields the same
/// noise field regardless of the input values. With `clamp_nonnegative`,
/// negative noisy counts are raised to zero.
pub fn sanitize_series(
    source: &impl CountSource,
    params: &PrivacyParams,
    rng: &mut RngStream,
    clamp_nonnegative: bool,
) -> Result<MobilitySeries> {
    let sigma = params.sigma()?;
    let mut counts = Vec::with_capacity(source.len() * source.regions().len());
    for t in 0..source.len() {
        for &v in source.row(t) {
            if !v.is_finite() {
                return Err(invalid("series has missing values; clean it before sanitizing"));
            }
            let noisy = v + sigma * rng.standard_normal();
            counts.push(if clamp_nonnegative { noisy.max(0.0) } else { noisy });
        }
    }
    let record = PrivacyRecord {
        mechanism: "gaussian".into(),
        epsilon: params.epsilon,
        delta: params.delta,
        sensitivity: params.sensitivity,
        sigma,
        releases: source.len(),
        clamped: clamp_nonnegative,
    };
    Ok(MobilitySeries::new(
        source.timestamps().to_vec(),
        counts,
        source.regions().to_vec(),
    )?
    .with_privacy(record))
}

/// `ln(e^x − 1)` for `x > 0`.
fn ln_expm1(x: f64) -> f64 {
    if x > 1.0 {
        x + (-(-x).exp()).ln_1p()
    } else {
        x.exp_m1().ln()
    }
}

/// Per-step RDP of the Poisson-subsampled Gaussian at integer order `alpha`.
///
/// Uses the binomial expansion. Since the `k = 0, 1` terms and the `1` parts
/// of the remaining terms sum to one, the log of the sum is taken as
/// `ln1p(Σ_{k≥2} C(α,k)(1−q)^{α−k} q^k (e^{k(k−1)/(2σ²)} − 1))`, which keeps
/// full relative precision when the result is tiny.
pub fn rdp_subsampled_gaussian(q: f64, sigma: f64, alpha: u32) -> Result<f64> {
    if alpha < 2 {
        return Err(invalid(format!("RDP order must be an integer ≥ 2, got {alpha}")));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(invalid(format!("sampling rate must lie in [0, 1], got {q}")));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(invalid(format!("noise multiplier must be positive, got {sigma}")));
    }
    let a = alpha as f64;
    if q == 0.0 {
        return Ok(0.0);
    }
    if q == 1.0 {
        return Ok(a / (2.0 * sigma * sigma));
    }
    let ln_q = q.ln();
    let ln_1mq = (-q).ln_1p();
    let mut terms = Vec::with_capacity(alpha as usize - 1);
    for k in 2..=alpha as u64 {
        let kf = k as f64;
        let exponent = kf * (kf - 1.0) / (2.0 * sigma * sigma);
        terms.push(
            log_binomial(alpha as u64, k)?
                + (a - kf) * ln_1mq
                + kf * ln_q
                + ln_expm1(exponent),
        );
    }
    let l = logsumexp(&terms)?;
    let ln_sum = if l > 0.0 {
        l + (-l).exp().ln_1p()
    } else {
        l.exp().ln_1p()
    };
    Ok(ln_sum / (a - 1.0))
}

/// RDP values over a list of orders at fixed `(q, σ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdpCurve {
    pub orders: Vec<u32>,
    pub rdp: Vec<f64>,
}

impl RdpCurve {
    pub fn compute(q: f64, sigma: f64, orders: &[u32]) -> Result<Self> {
        let rdp = orders
            .iter()
            .map(|&a| rdp_subsampled_gaussian(q, sigma, a))
            .collect::<Result<_>>()?;
        Ok(Self {
            orders: orders.to_vec(),
            rdp,
        })
    }

    /// Converts `steps` compositions to `(ε, best order)` at `delta`.
    pub fn to_dp(&self, steps: u64, delta: f64) -> Result<(f64, u32)> {
        if !(delta > 0.0 && delta < 1.0) {
            return Err(invalid(format!("delta must lie in (0, 1), got {delta}")));
        }
        let log_inv_delta = -delta.ln();
        self.orders
            .iter()
            .zip(&self.rdp)
            .map(|(&a, &r)| (steps as f64 * r + log_inv_delta / (a as f64 - 1.0), a))
            .min_by(|x, y| x.0.total_cmp(&y.0))
            .ok_or_else(|| invalid("order list is empty"))
    }
}

/// `(ε, δ)` guarantee after `steps` noisy steps with sampling rate `q`, using
/// the conversion `ε = min_α steps·RDP(α) + ln(1/δ)/(α − 1)`.
pub fn compute_epsilon(q: f64, sigma: f64, steps: u64, delta: f64, orders: &[u32]) -> Result<(f64, u32)> {
    RdpCurve::compute(q, sigma, orders)?.to_dp(steps, delta)
}

/// Text form printed by the accountant command.
pub fn format_accountant(epsilon: f64, order: u32, delta: f64) -> String {
    format!("eps={epsilon:.6} at order={order} (delta={delta:e})")
}

/// True iff `n` releases at `delta` each stay below a total of `1/n`.
pub fn delta_budget_check(delta: f64, n: u64) -> bool {
    let n = n as f64;
    n * delta < 1.0 / n
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub label: String,
    pub epsilon: f64,
    pub delta: f64,
}

/// Append-only record of mechanism invocations on the same population.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BudgetLedger {
    entries: Vec<LedgerEntry>,
    population: usize,
}

impl BudgetLedger {
    pub fn new(population: usize) -> Self {
        Self {
            entries: Vec::new(),
            population,
        }
    }

    pub fn push(&mut self, label: impl Into<String>, epsilon: f64, delta: f64) -> Result<()> {
        if !(epsilon >= 0.0 && epsilon.is_finite()) || !(0.0..1.0).contains(&delta) {
            return Err(invalid(format!("bad ledger entry ε={epsilon}, δ={delta}")));
        }
        self.entries.push(LedgerEntry {
            label: label.into(),
            epsilon,
            delta,
        });
        Ok(())
    }

    /// Adds `count` identical entries labelled `label#i`.
    pub fn push_repeated(&mut self, label: &str, epsilon: f64, delta: f64, count: usize) -> Result<()> {
        for i in 0..count {
            self.push(format!("{label}#{i}"), epsilon, delta)?;
        }
        Ok(())
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn population(&self) -> usize {
        self.population
    }

    /// `(Σ ε, Σ δ)` under sequential composition.
    pub fn totals(&self) -> (f64, f64) {
        let mut eps = KahanSum::default();
        let mut delta = KahanSum::default();
        for e in &self.entries {
            eps.add(e.epsilon);
            delta.add(e.delta);
        }
        (eps.value(), delta.value())
    }

    /// Columns `label,epsilon,delta,cumulative_epsilon,cumulative_delta`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["label", "epsilon", "delta", "cumulative_epsilon", "cumulative_delta"])?;
        let mut eps = KahanSum::default();
        let mut delta = KahanSum::default();
        for e in &self.entries {
            eps.add(e.epsilon);
            delta.add(e.delta);
            w.write_record([
                e.label.clone(),
                e.epsilon.to_string(),
                e.delta.to_string(),
                eps.value().to_string(),
                delta.value().to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn ledger_total(ledger: &BudgetLedger) -> (f64, f64) {
    ledger.totals()
}

#[derive(Default)]
struct KahanSum {
    sum: f64,
    c: f64,
}

impl KahanSum {
    fn add(&mut self, x: f64) {
        let y = x - self.c;
        let t = self.sum + y;
        self.c = (t - self.sum) - y;
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::testing::series_from_fn;

    #[test]
    fn orders_grid() {
        assert_eq!(DEFAULT_ORDERS[0], 2);
        assert_eq!(DEFAULT_ORDERS[62], 64);
        assert_eq!(&DEFAULT_ORDERS[63..], &[128, 256, 512]);
    }

    #[test]
    fn sigma_values() {
        let s = gaussian_sigma(1.0, 0.5, 0.125).unwrap();
        assert!((s - (2.0 * 10f64.ln()).sqrt() / 0.5).abs() < 1e-12);
        assert!((s - 4.2919).abs() < 1e-4);
        assert!((gaussian_sigma(1.0, 0.0357, 1e-7).unwrap() - 160.13).abs() < 0.01);
        let a = gaussian_sigma(1.0, 0.3, 1e-5).unwrap();
        assert_eq!(gaussian_sigma(2.0, 0.3, 1e-5).unwrap(), 2.0 * a);
    }

    #[test]
    fn sigma_validity_edge() {
        assert!(gaussian_sigma(1.0, 0.99, 1e-7).is_ok());
        assert!(matches!(gaussian_sigma(1.0, 1.0, 1e-7), Err(Error::OutOfValidity(_))));
        assert!(matches!(gaussian_sigma(1.0, 0.0, 1e-7), Err(Error::OutOfValidity(_))));
        assert!(gaussian_sigma(1.0, 0.5, 0.0).is_err());
    }

    #[test]
    fn sanitize_noise_variance() {
        let s = series_from_fn(100, 6, |_, _| 0.0);
        let p = PrivacyParams::new(0.5, 1e-3);
        let sigma = p.sigma().unwrap();
        let out = sanitize_series(&s, &p, &mut RngStream::new(7, 0), false).unwrap();
        let n = out.counts().len() as f64;
        let mean = out.counts().iter().sum::<f64>() / n;
        let var = out.counts().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((var / (sigma * sigma) - 1.0).abs() < 0.02, "var ratio {}", var / (sigma * sigma));
        let rec = out.privacy().unwrap();
        assert_eq!(rec.sigma(), sigma);
        assert_eq!(rec.releases(), 4800);
        assert_eq!(out.timestamps(), s.timestamps());
    }

    #[test]
    fn noise_field_independent_of_input() {
        let a = series_from_fn(2, 3, |_, _| 0.0);
        let b = series_from_fn(2, 3, |t, r| (t * 7 + r * 100) as f64);
        let p = PrivacyParams::new(0.4, 1e-5);
        let na = sanitize_series(&a, &p, &mut RngStream::new(3, 1), false).unwrap();
        let nb = sanitize_series(&b, &p, &mut RngStream::new(3, 1), false).unwrap();
        for i in 0..a.counts().len() {
            let da = na.counts()[i] - a.counts()[i];
            let db = nb.counts()[i] - b.counts()[i];
            assert!((da - db).abs() < 1e-9);
        }
    }

    #[test]
    fn clamp_is_post_processing() {
        let s = series_from_fn(1, 2, |_, _| 0.0);
        let p = PrivacyParams::new(0.5, 1e-3);
        let out = sanitize_series(&s, &p, &mut RngStream::new(1, 0), true).unwrap();
        assert!(out.counts().iter().all(|v| *v >= 0.0));
        assert!(out.privacy().unwrap().clamped());
        // Slicing keeps the record.
        assert_eq!(out.slice(0..3).privacy(), out.privacy());
    }

    #[test]
    fn rdp_degenerate_cases() {
        for a in [2, 7, 512] {
            assert_eq!(rdp_subsampled_gaussian(0.0, 3.0, a).unwrap(), 0.0);
        }
        assert_eq!(rdp_subsampled_gaussian(1.0, 1.0, 2).unwrap(), 1.0);
        assert!(rdp_subsampled_gaussian(0.1, 1.0, 1).is_err());
    }

    #[test]
    fn rdp_small_order_closed_form() {
        // α = 2: ln(1 + q²(e^{1/σ²} − 1)).
        let (q, s) = (0.01f64, 2.0f64);
        let expect = (q * q * (1.0 / (s * s)).exp_m1()).ln_1p();
        let got = rdp_subsampled_gaussian(q, s, 2).unwrap();
        assert!((got / expect - 1.0).abs() < 1e-13);
    }

    #[test]
    fn rdp_full_sampling_matches_gaussian_any_order() {
        for a in [2u32, 3, 10, 64] {
            let got = rdp_subsampled_gaussian(1.0, 4.0, a).unwrap();
            assert!((got - a as f64 / 32.0).abs() < 1e-12);
        }
        // The expansion path approaches the same value as q → 1.
        let near = rdp_subsampled_gaussian(1.0 - 1e-12, 4.0, 10).unwrap();
        assert!((near - 10.0 / 32.0).abs() < 1e-6);
    }

    #[test]
    fn rdp_nondecreasing_in_order() {
        let curve = RdpCurve::compute(5.0 / 3120.0, 35.0, &DEFAULT_ORDERS).unwrap();
        for w in curve.rdp.windows(2) {
            assert!(w[1] >= w[0]);
        }
    }

    #[test]
    fn table_epsilons() {
        let cases = [
            (5.0, 35.0, 62400, 0.0650),
            (10.0, 140.0, 31200, 0.0357),
            (5.0, 500.0, 62400, 0.0317),
        ];
        for (b, sigma, steps, expect) in cases {
            let (eps, order) = compute_epsilon(b / 3120.0, sigma, steps, 1e-7, &DEFAULT_ORDERS).unwrap();
            assert!((eps / expect - 1.0).abs() < 0.02, "{eps} vs {expect}");
            assert_eq!(order, 512);
        }
    }

    #[test]
    fn gaussian_conversion_degeneracy() {
        let sigma = 3.0;
        let (eps, _) = compute_epsilon(1.0, sigma, 1, 1e-5, &DEFAULT_ORDERS).unwrap();
        let direct = DEFAULT_ORDERS
            .iter()
            .map(|&a| a as f64 / (2.0 * sigma * sigma) + (1e5f64).ln() / (a as f64 - 1.0))
            .fold(f64::INFINITY, f64::min);
        assert!((eps - direct).abs() < 1e-12);
    }

    #[test]
    fn zero_steps_leaves_conversion_term() {
        let (eps, order) = compute_epsilon(0.01, 1.0, 0, 1e-7, &DEFAULT_ORDERS).unwrap();
        assert_eq!(order, 512);
        assert!((eps - (1e7f64).ln() / 511.0).abs() < 1e-12);
    }

    #[test]
    fn ledger_sums() {
        let mut l = BudgetLedger::new(3120);
        assert_eq!(l.totals(), (0.0, 0.0));
        l.push_repeated("snapshot", 0.0650, 1e-7, 3120).unwrap();
        let (e, d) = ledger_total(&l);
        assert!((e - 202.8).abs() < 1e-9);
        assert!((d - 3.12e-4).abs() < 1e-15);
        let mut l2 = BudgetLedger::new(3120);
        l2.push_repeated("snapshot", 0.0399, 1e-7, 3120).unwrap();
        assert!((l2.totals().0 - 124.488).abs() < 1e-9);
    }

    #[test]
    fn ledger_csv_cumulative() {
        let mut l = BudgetLedger::new(2);
        l.push("a", 0.5, 1e-7).unwrap();
        l.push("b", 0.25, 1e-7).unwrap();
        let mut out = Vec::new();
        l.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "label,epsilon,delta,cumulative_epsilon,cumulative_delta");
        assert!(lines[2].starts_with("b,0.25,0.0000001,0.75,"));
    }

    #[test]
    fn delta_budget() {
        assert!(delta_budget_check(1e-7, 3120));
        assert!(!delta_budget_check(1e-6, 3120));
        assert!(delta_budget_check(0.0, 10));
    }

    #[test]
    fn accountant_line() {
        assert_eq!(format_accountant(0.065, 512, 1e-7), "eps=0.065000 at order=512 (delta=1e-7)");
    }
}
