//! Persistent-spread estimation from intersected sketches.
//!
//! Intersecting the per-period sketches of a flow (register-wise min) keeps
//! the registers set by persistent elements but also whatever transient
//! elements happened to collide in every period. The estimator here models
//! the distribution of an intersection register exactly and recovers the
//! persistent spread `n*` by maximum likelihood over the register-value
//! histogram, together with an error model and confidence intervals.
//!
//! The same machinery runs at two scales: per-flow sketches of `s` registers
//! and whole shared arrays of `m` registers (see [`crate::vsketch`]).

use thiserror::Error;

use crate::hll::HllSketch;
use crate::math::normal_quantile;

/// Floor applied to `n_j - n*` so the model never evaluates at the
/// singularity where a period carries no transients at all.
const TRANSIENT_FLOOR: f64 = 1e-6;

/// Inclusion-exclusion over subsets costs `2^t`; refuse beyond this.
const UNION_BASELINE_MAX_PERIODS: usize = 6;

#[derive(Debug, Error, PartialEq)]
pub enum EstimatorError {
    #[error("invalid model: {0}")]
    BadModel(String),
    #[error("histogram does not match model: {0}")]
    HistogramMismatch(String),
    #[error("sketch does not match model: {0}")]
    SketchMismatch(String),
    #[error("derivative singular: period {period} margin {margin} below floor")]
    DerivativeSingularity { period: usize, margin: f64 },
    #[error("need at least two periods, got {0}")]
    TooFewPeriods(usize),
    #[error("union baseline capped at {cap} periods, got {got}")]
    TooManyPeriods { got: usize, cap: usize },
    #[error("per-period estimates missing or mismatched: {0}")]
    BadPerPeriod(String),
}

/// Statistical context for the intersection estimator: register count per
/// sketch, register cap, and the per-period cardinality estimates that are
/// treated as plug-in constants.
#[derive(Debug, Clone, PartialEq)]
pub struct IntersectionModel {
    registers: f64,
    cap: u8,
    per_period: Vec<f64>,
}

impl IntersectionModel {
    pub fn new(registers: usize, cap: u8, per_period: Vec<f64>) -> Result<Self, EstimatorError> {
        if registers == 0 {
            return Err(EstimatorError::BadModel("zero registers".into()));
        }
        if cap == 0 {
            return Err(EstimatorError::BadModel("register cap must be >= 1".into()));
        }
        if per_period.is_empty() {
            return Err(EstimatorError::BadModel("no per-period estimates".into()));
        }
        if per_period.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(EstimatorError::BadModel(
                "per-period estimates must be finite and nonnegative".into(),
            ));
        }
        Ok(IntersectionModel {
            registers: registers as f64,
            cap,
            per_period,
        })
    }

    pub fn registers(&self) -> f64 {
        self.registers
    }

    pub fn cap(&self) -> u8 {
        self.cap
    }

    pub fn periods(&self) -> usize {
        self.per_period.len()
    }

    pub fn per_period(&self) -> &[f64] {
        &self.per_period
    }

    /// Smallest per-period estimate; `n*` cannot exceed it.
    pub fn min_per_period(&self) -> f64 {
        self.per_period.iter().cloned().fold(f64::INFINITY, f64::min)
    }
}

/// Counts `N_k` of registers carrying value `k`, the sufficient statistic
/// for the likelihood.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegisterHistogram {
    counts: Vec<u64>,
}

impl RegisterHistogram {
    pub fn from_registers(registers: &[u8], cap: u8) -> Result<Self, EstimatorError> {
        let mut counts = vec![0u64; cap as usize + 1];
        for &r in registers {
            if r > cap {
                return Err(EstimatorError::HistogramMismatch(format!(
                    "register value {r} exceeds cap {cap}"
                )));
            }
            counts[r as usize] += 1;
        }
        Ok(RegisterHistogram { counts })
    }

    pub fn from_sketch(sketch: &HllSketch) -> Self {
        Self::from_registers(sketch.registers(), sketch.cap())
            .expect("sketch registers are capped by construction")
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn cap(&self) -> u8 {
        (self.counts.len() - 1) as u8
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

#[inline]
fn clamped_transients(model: &IntersectionModel, n_star: f64) -> impl Iterator<Item = f64> + '_ {
    model
        .per_period
        .iter()
        .map(move |&nj| (nj - n_star).max(TRANSIENT_FLOOR))
}

/// `G_s(n*, k)`: probability that an intersection register is at most `k`,
/// under per-period loads fixed by the model.
///
/// `G = exp(-n*/(s 2^k)) * (1 - prod_j (1 - exp(-(n_j - n*)/(s 2^k))))`.
pub fn generation_function(model: &IntersectionModel, n_star: f64, k: u32) -> f64 {
    let scale = model.registers * (k as f64).exp2();
    let persistent = (-n_star.max(0.0) / scale).exp();
    let mut prod = 1.0f64;
    for transient in clamped_transients(model, n_star) {
        prod *= -f64::exp_m1(-transient / scale);
    }
    persistent * (1.0 - prod)
}

/// Partial derivative of [`generation_function`] with respect to `n*`, with
/// the per-period totals held fixed.
///
/// Signals a singularity instead of evaluating when some period's transient
/// margin `n_j - n*` sits below the clamp floor.
pub fn generation_function_derivative(
    model: &IntersectionModel,
    n_star: f64,
    k: u32,
) -> Result<f64, EstimatorError> {
    for (period, &nj) in model.per_period.iter().enumerate() {
        let margin = nj - n_star;
        if margin < TRANSIENT_FLOOR {
            return Err(EstimatorError::DerivativeSingularity { period, margin });
        }
    }
    Ok(derivative_unchecked(model, n_star, k))
}

fn derivative_unchecked(model: &IntersectionModel, n_star: f64, k: u32) -> f64 {
    let scale = model.registers * (k as f64).exp2();
    let persistent = (-n_star.max(0.0) / scale).exp();
    let mut prod = 1.0f64;
    let mut inv_sum = 0.0f64;
    for transient in clamped_transients(model, n_star) {
        let x = transient / scale;
        prod *= -f64::exp_m1(-x);
        inv_sum += 1.0 / f64::exp_m1(x);
    }
    (persistent / scale) * ((1.0 + inv_sum) * prod - 1.0)
}

/// Distribution of one intersection register over values `0..=H`.
///
/// `pmf[0] = G(n*,0)`, `pmf[k] = G(n*,k) - G(n*,k-1)` for interior `k`, and
/// the cap absorbs the tail: `pmf[H] = 1 - G(n*,H-1)`.
pub fn register_pmf(model: &IntersectionModel, n_star: f64) -> Vec<f64> {
    let cap = model.cap as usize;
    let mut pmf = vec![0.0; cap + 1];
    let mut prev = 0.0;
    for (k, slot) in pmf.iter_mut().enumerate().take(cap) {
        let g = generation_function(model, n_star, k as u32);
        *slot = if k == 0 { g } else { (g - prev).max(0.0) };
        prev = g;
    }
    pmf[cap] = (1.0 - prev).max(0.0);
    pmf
}

/// Derivative of [`register_pmf`] entry by entry; sums to zero.
pub fn register_pmf_derivative(model: &IntersectionModel, n_star: f64) -> Vec<f64> {
    let cap = model.cap as usize;
    let mut out = vec![0.0; cap + 1];
    let mut prev = 0.0;
    for (k, slot) in out.iter_mut().enumerate().take(cap) {
        let d = derivative_unchecked(model, n_star, k as u32);
        *slot = if k == 0 { d } else { d - prev };
        prev = d;
    }
    out[cap] = -prev;
    out
}

/// Log-likelihood of a register histogram at a candidate `n*`, up to the
/// `n*`-independent multinomial constant. `-inf` when the histogram has mass
/// on a zero-probability value.
pub fn log_likelihood(model: &IntersectionModel, hist: &RegisterHistogram, n_star: f64) -> f64 {
    let pmf = register_pmf(model, n_star);
    let mut ll = 0.0;
    for (count, p) in hist.counts.iter().zip(&pmf) {
        if *count == 0 {
            continue;
        }
        if *p <= 0.0 {
            return f64::NEG_INFINITY;
        }
        ll += *count as f64 * p.ln();
    }
    ll
}

/// Derivative of the log-likelihood with respect to `n*`.
pub fn score(model: &IntersectionModel, hist: &RegisterHistogram, n_star: f64) -> f64 {
    let pmf = register_pmf(model, n_star);
    let dpmf = register_pmf_derivative(model, n_star);
    let mut total = 0.0;
    for ((count, p), dp) in hist.counts.iter().zip(&pmf).zip(&dpmf) {
        if *count == 0 {
            continue;
        }
        if *p <= 0.0 {
            if *dp == 0.0 {
                continue;
            }
            return if *dp > 0.0 {
                f64::INFINITY
            } else {
                f64::NEG_INFINITY
            };
        }
        total += *count as f64 * dp / p;
    }
    total
}

/// Per-register variance of the score at `n*`, evaluated from the closed
/// form (the three-term sum over k = 0, interior, and the cap).
pub fn sigma_squared(model: &IntersectionModel, n_star: f64) -> f64 {
    let s = model.registers;
    let cap = model.cap as usize;
    let g: Vec<f64> = (0..cap)
        .map(|k| generation_function(model, n_star, k as u32))
        .collect();

    let mut total = g[0] / (s * s);
    for k in 1..cap {
        let denom = g[k] - g[k - 1];
        if denom <= 0.0 {
            continue; // value k has zero probability; contributes nothing
        }
        let num = g[k] - 2.0 * g[k - 1];
        let scale = s * (k as f64).exp2();
        total += num * num / (scale * scale * denom);
    }
    let tail = 1.0 - g[cap - 1];
    if tail > 0.0 {
        let scale = s * ((cap - 1) as f64).exp2();
        total += g[cap - 1] * g[cap - 1] / (scale * scale * tail);
    }
    total
}

/// Calibration divisor applied to `(n* sigma)^2` to produce `psi^2`.
///
/// The error model predicts a relative standard error of `1/(sqrt(s) psi)`.
/// Candidate normalizations divide `(n* sigma)^2` by powers of `s`; the
/// Monte-Carlo calibration in the acceptance suite (measured estimator error
/// against the prediction) selects `s^0`, consistent with the score variance
/// of `s` independent registers being `s sigma^2`.
#[inline]
fn psi_normalization(_registers: f64) -> f64 {
    1.0
}

/// `psi^2`, the normalized score variance entering the error model.
///
/// Written as its own three-term expansion rather than delegating to
/// [`sigma_squared`]; a test checks the two routes agree.
pub fn psi_squared(model: &IntersectionModel, n_star: f64) -> f64 {
    let s = model.registers;
    let cap = model.cap as usize;
    let g: Vec<f64> = (0..cap)
        .map(|k| generation_function(model, n_star, k as u32))
        .collect();

    let n2 = n_star * n_star;
    let mut total = n2 * g[0] / (s * s);
    for k in 1..cap {
        let denom = g[k] - g[k - 1];
        if denom <= 0.0 {
            continue;
        }
        let num = g[k] - 2.0 * g[k - 1];
        let pow = (2 * k) as f64;
        total += n2 * num * num / (s * s * pow.exp2() * denom);
    }
    let tail = 1.0 - g[cap - 1];
    if tail > 0.0 {
        let pow = (2 * (cap - 1)) as f64;
        total += n2 * g[cap - 1] * g[cap - 1] / (s * s * pow.exp2() * tail);
    }
    total / psi_normalization(s)
}

/// Predicted relative standard error `1/(sqrt(s) psi)` at a given `n*`.
pub fn predicted_relative_stderr(model: &IntersectionModel, n_star: f64) -> f64 {
    if n_star <= 0.0 {
        return f64::INFINITY;
    }
    let psi2 = psi_squared(model, n_star);
    if psi2 <= 0.0 {
        return f64::INFINITY;
    }
    1.0 / (model.registers.sqrt() * psi2.sqrt())
}

/// Symmetric confidence interval at level `1 - epsilon` around an estimate,
/// using the plug-in `n*` in the error model. The lower bound is clamped at
/// zero since spreads are nonnegative.
pub fn confidence_interval(
    n_star_hat: f64,
    model: &IntersectionModel,
    level: f64,
) -> (f64, f64) {
    assert!((0.0..=1.0).contains(&level), "level must be in [0,1]");
    if n_star_hat <= 0.0 {
        return (0.0, 0.0);
    }
    let z = normal_quantile(0.5 + level / 2.0);
    let half = z * n_star_hat * predicted_relative_stderr(model, n_star_hat);
    if !half.is_finite() {
        return (n_star_hat, n_star_hat);
    }
    ((n_star_hat - half).max(0.0), n_star_hat + half)
}

/// Solver and error-model outputs attached to an estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostics {
    pub iterations: u32,
    pub bracket: (f64, f64),
    /// Maximizer sat at an endpoint of the search interval.
    pub boundary: bool,
    /// Noise cancellation produced a negative value that was clamped to 0.
    pub clamped: bool,
    /// Estimate is statistically indistinguishable from zero.
    pub noise: bool,
    /// False when the error model could not be evaluated.
    pub stderr_valid: bool,
}

/// A persistent-spread estimate with its error model.
#[derive(Debug, Clone, PartialEq)]
pub struct PersistentEstimate {
    pub n_star_hat: f64,
    /// Relative standard error estimate.
    pub stderr: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub diagnostics: Diagnostics,
}

const DEFAULT_CI_LEVEL: f64 = 0.95;

fn solver_tolerance(scale: f64) -> f64 {
    (1e-4 * scale).max(0.5)
}

/// Maximum-likelihood persistent-spread estimate from an intersection
/// sketch, for models built on dedicated per-flow sketches.
pub fn mle_estimate(
    model: &IntersectionModel,
    intersection: &HllSketch,
) -> Result<PersistentEstimate, EstimatorError> {
    if intersection.s() != model.registers as usize || intersection.cap() != model.cap {
        return Err(EstimatorError::SketchMismatch(format!(
            "model expects s={} cap={}, sketch has s={} cap={}",
            model.registers,
            model.cap,
            intersection.s(),
            intersection.cap()
        )));
    }
    mle_from_histogram(model, &RegisterHistogram::from_sketch(intersection))
}

/// Maximum-likelihood estimate from a register-value histogram. The
/// estimate depends on the intersection only through this histogram.
pub fn mle_from_histogram(
    model: &IntersectionModel,
    hist: &RegisterHistogram,
) -> Result<PersistentEstimate, EstimatorError> {
    if model.periods() < 2 {
        return Err(EstimatorError::TooFewPeriods(model.periods()));
    }
    if hist.cap() != model.cap {
        return Err(EstimatorError::HistogramMismatch(format!(
            "histogram cap {} vs model cap {}",
            hist.cap(),
            model.cap
        )));
    }
    if hist.total() != model.registers as u64 {
        return Err(EstimatorError::HistogramMismatch(format!(
            "histogram total {} vs model registers {}",
            hist.total(),
            model.registers
        )));
    }

    let upper = (model.min_per_period() - 1.0).max(0.0);
    if upper <= 0.0 {
        return Ok(finish_estimate(model, 0.0, 0, (0.0, 0.0), true));
    }

    // Golden-section search for the log-likelihood maximum on [0, upper].
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let (mut lo, mut hi) = (0.0f64, upper);
    let mut c = hi - INV_PHI * (hi - lo);
    let mut d = lo + INV_PHI * (hi - lo);
    let mut ll_c = log_likelihood(model, hist, c);
    let mut ll_d = log_likelihood(model, hist, d);
    let mut iterations = 0u32;
    while hi - lo > solver_tolerance(0.5 * (lo + hi)) && iterations < 200 {
        if ll_c >= ll_d {
            hi = d;
            d = c;
            ll_d = ll_c;
            c = hi - INV_PHI * (hi - lo);
            ll_c = log_likelihood(model, hist, c);
        } else {
            lo = c;
            c = d;
            ll_c = ll_d;
            d = lo + INV_PHI * (hi - lo);
            ll_d = log_likelihood(model, hist, d);
        }
        iterations += 1;
    }
    let mut best = if ll_c >= ll_d { c } else { d };

    // Refine on the score's sign change when the final bracket holds one.
    let score_lo = score(model, hist, lo);
    let score_hi = score(model, hist, hi);
    if score_lo > 0.0 && score_hi < 0.0 {
        let (mut a, mut b) = (lo, hi);
        while b - a > 0.25 * solver_tolerance(best) && iterations < 400 {
            let mid = 0.5 * (a + b);
            if score(model, hist, mid) > 0.0 {
                a = mid;
            } else {
                b = mid;
            }
            iterations += 1;
        }
        best = 0.5 * (a + b);
    }

    // Endpoints can strictly dominate any interior point.
    let ll_best = log_likelihood(model, hist, best);
    let ll_zero = log_likelihood(model, hist, 0.0);
    let ll_upper = log_likelihood(model, hist, upper);
    if ll_zero >= ll_best && ll_zero >= ll_upper {
        best = 0.0;
    } else if ll_upper > ll_best {
        best = upper;
    }

    let tol = solver_tolerance(best);
    let boundary = best <= tol || best >= upper - tol;
    Ok(finish_estimate(model, best, iterations, (0.0, upper), boundary))
}

fn finish_estimate(
    model: &IntersectionModel,
    n_star_hat: f64,
    iterations: u32,
    bracket: (f64, f64),
    boundary: bool,
) -> PersistentEstimate {
    let stderr = predicted_relative_stderr(model, n_star_hat);
    let (ci_low, ci_high) = confidence_interval(n_star_hat, model, DEFAULT_CI_LEVEL);
    PersistentEstimate {
        n_star_hat,
        stderr,
        ci_low,
        ci_high,
        diagnostics: Diagnostics {
            iterations,
            bracket,
            boundary,
            clamped: false,
            noise: n_star_hat <= solver_tolerance(n_star_hat),
            stderr_valid: stderr.is_finite(),
        },
    }
}

/// Inclusion-exclusion baseline: expresses the intersection cardinality as
/// an alternating sum of union cardinalities, each estimated from the
/// register-wise union of the corresponding period sketches. Costs `2^t`
/// sketch unions, so `t` is capped. Singleton subsets use the supplied
/// per-period estimates. The result can be negative under sketch noise.
pub fn union_baseline_estimate(
    sketches: &[HllSketch],
    per_period: &[f64],
) -> Result<f64, EstimatorError> {
    let t = sketches.len();
    if t < 2 {
        return Err(EstimatorError::TooFewPeriods(t));
    }
    if t > UNION_BASELINE_MAX_PERIODS {
        return Err(EstimatorError::TooManyPeriods {
            got: t,
            cap: UNION_BASELINE_MAX_PERIODS,
        });
    }
    if per_period.len() != t {
        return Err(EstimatorError::BadPerPeriod(format!(
            "{} per-period estimates for {} sketches",
            per_period.len(),
            t
        )));
    }

    let mut total = 0.0;
    for mask in 1u32..(1 << t) {
        let size = mask.count_ones();
        let estimate = if size == 1 {
            per_period[mask.trailing_zeros() as usize]
        } else {
            let subset: Vec<HllSketch> = (0..t)
                .filter(|j| mask & (1 << j) != 0)
                .map(|j| sketches[j].clone())
                .collect();
            HllSketch::union(&subset)
                .map_err(|e| EstimatorError::BadPerPeriod(e.to_string()))?
                .estimate()
        };
        if size % 2 == 1 {
            total += estimate;
        } else {
            total -= estimate;
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hash::Rng;
    use crate::hll::ElementHasher;

    fn model(s: usize, cap: u8, n_hat: &[f64]) -> IntersectionModel {
        IntersectionModel::new(s, cap, n_hat.to_vec()).unwrap()
    }

    #[test]
    fn histogram_examples() {
        let zero = HllSketch::new(512, 5).unwrap();
        let hist = RegisterHistogram::from_sketch(&zero);
        assert_eq!(hist.counts()[0], 512);
        assert_eq!(hist.counts()[1..].iter().sum::<u64>(), 0);

        let hist = RegisterHistogram::from_registers(&[1, 1, 3, 0], 31).unwrap();
        assert_eq!(hist.counts()[0], 1);
        assert_eq!(hist.counts()[1], 2);
        assert_eq!(hist.counts()[3], 1);
        assert_eq!(hist.total(), 4);
    }

    #[test]
    fn histogram_totals_match_register_count() {
        let hasher = ElementHasher::new(3);
        let mut rng = Rng::new(10);
        for _ in 0..5 {
            let mut sk = HllSketch::new(128, 5).unwrap();
            for _ in 0..rng.below(4000) {
                sk.record_u64(&hasher, rng.next_u64());
            }
            assert_eq!(RegisterHistogram::from_sketch(&sk).total(), 128);
        }
    }

    #[test]
    fn generation_function_frozen_value() {
        // s=512, t=2, n*=1000, n_1=n_2=2000, k=3; independent arithmetic route
        let m = model(512, 31, &[2000.0, 2000.0]);
        let got = generation_function(&m, 1000.0, 3);
        let scale = 512.0 * 8.0;
        let f = (-1000.0f64 / scale).exp();
        let expected = f * (1.0 - (1.0 - f) * (1.0 - f));
        assert!((got - expected).abs() < 1e-14, "got {got} expected {expected}");
        assert!((got - 0.74661).abs() < 5e-5);
    }

    #[test]
    fn generation_function_limits() {
        let m = model(512, 31, &[2000.0, 2500.0, 3000.0]);
        // huge k: exponent arguments vanish, G -> 1
        assert!((generation_function(&m, 1000.0, 60) - 1.0).abs() < 1e-9);
        // no transients: G = exp(-n*/(s 2^k)) up to the clamp
        let m_eq = model(512, 31, &[1500.0, 1500.0]);
        let g = generation_function(&m_eq, 1500.0, 2);
        let expected = (-1500.0f64 / (512.0 * 4.0)).exp();
        assert!((g - expected).abs() < 1e-6, "g={g} expected={expected}");
    }

    #[test]
    fn pmf_normalizes_and_matches_generation_function() {
        let mut rng = Rng::new(77);
        for _ in 0..200 {
            let s = [128usize, 512, 2048][rng.below(3) as usize];
            let t = 2 + rng.below(9) as usize;
            let n_star = rng.next_f64() * 20_000.0;
            let n_hat: Vec<f64> = (0..t)
                .map(|_| n_star + 1.0 + rng.next_f64() * 30_000.0)
                .collect();
            let m = model(s, 31, &n_hat);
            let pmf = register_pmf(&m, n_star);
            let sum: f64 = pmf.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "sum={sum}");
            assert!(pmf.iter().all(|p| (0.0..=1.0).contains(p)));
            // interior entries are differences of G
            for (k, &p) in pmf.iter().enumerate().take(31).skip(1) {
                let expected = generation_function(&m, n_star, k as u32)
                    - generation_function(&m, n_star, k as u32 - 1);
                assert!((p - expected.max(0.0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pmf_degenerate_zero_model() {
        let m = model(512, 31, &[0.0, 0.0]);
        let pmf = register_pmf(&m, 0.0);
        assert!((pmf[0] - 1.0).abs() < 1e-9);
        assert!(pmf[1..].iter().all(|&p| p < 1e-9));
    }

    #[test]
    fn derivative_matches_finite_differences() {
        let mut rng = Rng::new(41);
        let mut checked = 0;
        while checked < 120 {
            let s = [128usize, 512][rng.below(2) as usize];
            let t = 1 + rng.below(8) as usize;
            let n_star = 50.0 + rng.next_f64() * 10_000.0;
            let n_hat: Vec<f64> = (0..t)
                .map(|_| n_star + 100.0 + rng.next_f64() * 20_000.0)
                .collect();
            let k = rng.below(10) as u32;
            let m = model(s, 31, &n_hat);
            let analytic = generation_function_derivative(&m, n_star, k).unwrap();
            // Richardson-extrapolated central difference: the plain centered
            // quotient at delta = 1e-3 n* carries O(delta^2) truncation error
            // above the tolerance when n*/(s 2^k) is large.
            let central = |delta: f64| {
                (generation_function(&m, n_star + delta, k)
                    - generation_function(&m, n_star - delta, k))
                    / (2.0 * delta)
            };
            let delta = 1e-3 * n_star;
            let fd = (4.0 * central(delta / 2.0) - central(delta)) / 3.0;
            if fd.abs() < 1e-12 {
                assert!(analytic.abs() < 1e-9);
            } else {
                let rel = (analytic - fd).abs() / fd.abs();
                assert!(rel < 1e-5, "s={s} t={t} k={k} rel={rel}");
            }
            checked += 1;
        }
    }

    #[test]
    fn derivative_single_period_form() {
        // with one period the distribution no longer depends on n*, and the
        // closed form collapses to zero via the identity
        // (1 + 1/(e^x - 1)) (1 - e^{-x}) = 1
        let m = model(512, 31, &[5000.0]);
        for k in 0..8 {
            let d = generation_function_derivative(&m, 2000.0, k).unwrap();
            assert!(d.abs() < 1e-12, "k={k} d={d}");
            let explicit = {
                let scale = 512.0 * (k as f64).exp2();
                let x = (5000.0 - 2000.0) / scale;
                (1.0 / scale)
                    * (-2000.0f64 / scale).exp()
                    * ((1.0 + 1.0 / x.exp_m1()) * (-f64::exp_m1(-x)) - 1.0)
            };
            assert!((d - explicit).abs() < 1e-12);
        }
        // large k drives the derivative to zero in general
        let m2 = model(512, 31, &[4000.0, 6000.0]);
        assert!(generation_function_derivative(&m2, 1000.0, 40)
            .unwrap()
            .abs()
            < 1e-12);
    }

    #[test]
    fn derivative_signals_singularity() {
        let m = model(512, 31, &[1000.0, 2000.0]);
        assert!(matches!(
            generation_function_derivative(&m, 1000.0, 0),
            Err(EstimatorError::DerivativeSingularity { period: 0, .. })
        ));
    }

    #[test]
    fn log_likelihood_basics() {
        // all mass at value 0 of a degenerate model where pmf[0] = 1
        let m = model(512, 31, &[0.0, 0.0]);
        let hist = RegisterHistogram::from_registers(&vec![0u8; 512], 31).unwrap();
        let ll = log_likelihood(&m, &hist, 0.0);
        assert!(ll.abs() < 1e-6, "ll={ll}");

        // probabilities never exceed one, so the log-likelihood is <= 0
        let m = model(128, 31, &[3000.0, 4000.0]);
        let mut rng = Rng::new(5);
        let regs: Vec<u8> = (0..128).map(|_| rng.below(8) as u8).collect();
        let hist = RegisterHistogram::from_registers(&regs, 31).unwrap();
        for n_star in [0.0, 100.0, 1000.0, 2500.0] {
            assert!(log_likelihood(&m, &hist, n_star) <= 1e-12);
        }

        // mass on an impossible value yields -inf
        let m0 = model(16, 31, &[1.0, 1.0]);
        let mut counts = vec![0u8; 16];
        counts[0] = 31;
        let hist = RegisterHistogram::from_registers(&counts, 31).unwrap();
        assert_eq!(log_likelihood(&m0, &hist, 0.0), f64::NEG_INFINITY);
    }

    #[test]
    fn score_matches_finite_difference_of_log_likelihood() {
        let hasher = ElementHasher::new(9);
        let mut rng = Rng::new(12);
        // build a realistic intersection histogram
        let t = 5;
        let n_star_true = 4000u64;
        let persistent: Vec<u64> = (0..n_star_true).map(|_| rng.next_u64()).collect();
        let mut periods = Vec::new();
        for _ in 0..t {
            let mut sk = HllSketch::new(512, 5).unwrap();
            for &e in &persistent {
                sk.record_u64(&hasher, e);
            }
            for _ in 0..4000 {
                sk.record_u64(&hasher, rng.next_u64());
            }
            periods.push(sk);
        }
        let n_hat: Vec<f64> = periods.iter().map(|p| p.estimate()).collect();
        let m = model(512, 31, &n_hat);
        let inter = HllSketch::intersect(&periods).unwrap();
        let hist = RegisterHistogram::from_sketch(&inter);

        for n_star in [500.0, 2000.0, 4000.0, 6000.0] {
            let delta = 1e-4 * n_star;
            let fd = (log_likelihood(&m, &hist, n_star + delta)
                - log_likelihood(&m, &hist, n_star - delta))
                / (2.0 * delta);
            let sc = score(&m, &hist, n_star);
            let rel = (sc - fd).abs() / fd.abs().max(1e-9);
            assert!(rel < 1e-5, "n*={n_star} score={sc} fd={fd} rel={rel}");
        }
    }

    #[test]
    fn pmf_derivative_sums_to_zero() {
        // equivalent to the idealized-histogram score being zero
        let m = model(512, 31, &[9000.0, 12_000.0, 8000.0]);
        for n_star in [100.0, 1000.0, 5000.0] {
            let total: f64 = register_pmf_derivative(&m, n_star).iter().sum();
            assert!(total.abs() < 1e-12, "n*={n_star} total={total}");
        }
    }

    #[test]
    fn mle_degenerate_all_zero() {
        let m = model(512, 31, &[0.0, 0.0]);
        let zero = HllSketch::new(512, 5).unwrap();
        let est = mle_estimate(&m, &zero).unwrap();
        assert_eq!(est.n_star_hat, 0.0);
        assert!(est.diagnostics.boundary);
    }

    #[test]
    fn mle_requires_two_periods() {
        let m = model(512, 31, &[100.0]);
        let zero = HllSketch::new(512, 5).unwrap();
        assert!(matches!(
            mle_estimate(&m, &zero),
            Err(EstimatorError::TooFewPeriods(1))
        ));
    }

    #[test]
    fn mle_recovers_known_spread() {
        let hasher = ElementHasher::new(31);
        let mut ratios = Vec::new();
        for trial in 0..30u64 {
            let mut rng = Rng::derive(5000, 1, trial);
            let n_star = 10_000u64;
            let persistent: Vec<u64> = (0..n_star).map(|_| rng.next_u64()).collect();
            let t = 5;
            let mut periods = Vec::new();
            for _ in 0..t {
                let mut sk = HllSketch::new(512, 5).unwrap();
                for &e in &persistent {
                    sk.record_u64(&hasher, e);
                }
                for _ in 0..n_star {
                    sk.record_u64(&hasher, rng.next_u64());
                }
                periods.push(sk);
            }
            let n_hat: Vec<f64> = periods.iter().map(|p| p.estimate()).collect();
            let m = model(512, 31, &n_hat);
            let inter = HllSketch::intersect(&periods).unwrap();
            let est = mle_estimate(&m, &inter).unwrap();
            ratios.push(est.n_star_hat / n_star as f64);
        }
        let mean_ratio = crate::math::mean(&ratios);
        assert!(
            (mean_ratio - 1.0).abs() < 0.04,
            "mean ratio {mean_ratio} over {} trials",
            ratios.len()
        );
    }

    #[test]
    fn mle_depends_only_on_histogram_and_period_order_is_irrelevant() {
        let hasher = ElementHasher::new(4);
        let mut rng = Rng::new(88);
        let persistent: Vec<u64> = (0..3000).map(|_| rng.next_u64()).collect();
        let mut periods = Vec::new();
        for extra in [2000usize, 5000, 3500] {
            let mut sk = HllSketch::new(256, 5).unwrap();
            for &e in &persistent {
                sk.record_u64(&hasher, e);
            }
            for _ in 0..extra {
                sk.record_u64(&hasher, rng.next_u64());
            }
            periods.push(sk);
        }
        let inter = HllSketch::intersect(&periods).unwrap();
        let n_hat: Vec<f64> = periods.iter().map(|p| p.estimate()).collect();

        let m = model(256, 31, &n_hat);
        let est = mle_estimate(&m, &inter).unwrap();

        // permute register positions: same histogram, same estimate
        let mut regs = inter.registers().to_vec();
        regs.reverse();
        regs.rotate_left(37);
        let permuted = HllSketch::from_registers(regs, 5).unwrap();
        let est_perm = mle_estimate(&m, &permuted).unwrap();
        assert_eq!(est.n_star_hat, est_perm.n_star_hat);

        // permute the per-period estimates: model is symmetric in periods
        let mut shuffled = n_hat.clone();
        shuffled.swap(0, 2);
        let m2 = model(256, 31, &shuffled);
        let est_shuf = mle_from_histogram(&m2, &RegisterHistogram::from_sketch(&inter)).unwrap();
        assert!((est.n_star_hat - est_shuf.n_star_hat).abs() < 1e-9);
    }

    #[test]
    fn psi_squared_positive_and_consistent_with_sigma() {
        let m = model(512, 31, &[20_000.0; 10]);
        for n_star in [500.0, 5_000.0, 10_000.0, 15_000.0] {
            let psi2 = psi_squared(&m, n_star);
            assert!(psi2 > 0.0, "psi2={psi2} at n*={n_star}");
            let via_sigma = n_star * n_star * sigma_squared(&m, n_star);
            let rel = (psi2 - via_sigma).abs() / via_sigma;
            assert!(rel < 1e-12, "n*={n_star} rel={rel}");
        }
    }

    #[test]
    fn confidence_interval_level_zero_degenerates() {
        let m = model(512, 31, &[20_000.0; 4]);
        let (lo, hi) = confidence_interval(5_000.0, &m, 0.0);
        assert!((lo - 5_000.0).abs() < 1e-9);
        assert!((hi - 5_000.0).abs() < 1e-9);
        let (lo95, hi95) = confidence_interval(5_000.0, &m, 0.95);
        assert!(lo95 < 5_000.0 && hi95 > 5_000.0);
    }

    #[test]
    fn union_baseline_limits() {
        let hasher = ElementHasher::new(14);
        let mut rng = Rng::new(3);
        let shared: Vec<u64> = (0..8_000).map(|_| rng.next_u64()).collect();

        // identical sets across two periods: estimate ~= per-period estimate
        let mut sk = HllSketch::new(512, 5).unwrap();
        for &e in &shared {
            sk.record_u64(&hasher, e);
        }
        let est = union_baseline_estimate(&[sk.clone(), sk.clone()], &[sk.estimate(); 2]).unwrap();
        assert!((est - sk.estimate()).abs() < 1e-9);

        // disjoint sets: estimate ~= 0 within sketch noise
        let mut a = HllSketch::new(512, 5).unwrap();
        let mut b = HllSketch::new(512, 5).unwrap();
        for _ in 0..8_000 {
            a.record_u64(&hasher, rng.next_u64());
            b.record_u64(&hasher, rng.next_u64());
        }
        let est = union_baseline_estimate(&[a.clone(), b.clone()], &[a.estimate(), b.estimate()])
            .unwrap();
        assert!(est.abs() < 3.0 * 8_000.0 * 3.0 * 1.04 / (512.0f64).sqrt());

        // period cap
        let many: Vec<HllSketch> = (0..7).map(|_| HllSketch::new(16, 5).unwrap()).collect();
        assert!(matches!(
            union_baseline_estimate(&many, &[0.0; 7]),
            Err(EstimatorError::TooManyPeriods { got: 7, cap: 6 })
        ));
    }
}
