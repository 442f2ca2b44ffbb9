//! Conventional superiority tests used as benchmarks: the one-sided Fisher
//! exact test and a Wald test on the treatment coefficient of a logistic
//! regression. Their rejection thresholds can be calibrated on simulated null
//! p-values.

use serde::{Deserialize, Serialize};
use statrs::function::factorial::ln_binomial;

use crate::alloc_dist::ArmCounts;
use crate::error::{Error, Result};
use crate::numeric::normal_cdf;
use crate::trial_engine::TrialRecord;

pub const IRLS_MAX_ITER: u32 = 50;
pub const IRLS_TOL: f64 = 1e-10;
/// Treatment coefficients beyond this magnitude indicate separation.
pub const SEPARATION_BOUND: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparator {
    Fisher,
    Glm,
}

impl std::str::FromStr for Comparator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fisher" => Ok(Self::Fisher),
            "glm" => Ok(Self::Glm),
            _ => Err(Error::Config(format!("unknown comparator '{s}' (fisher|glm)"))),
        }
    }
}

/// Successes and failures on control and experimental arms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Table2x2 {
    pub control_successes: u64,
    pub control_failures: u64,
    pub exp_successes: u64,
    pub exp_failures: u64,
}

impl Table2x2 {
    pub fn new(control_successes: u64, control_failures: u64, exp_successes: u64, exp_failures: u64) -> Self {
        Self {
            control_successes,
            control_failures,
            exp_successes,
            exp_failures,
        }
    }

    pub fn from_counts(control: ArmCounts, experimental: ArmCounts) -> Self {
        Self::new(
            control.successes as u64,
            control.failures as u64,
            experimental.successes as u64,
            experimental.failures as u64,
        )
    }

    /// Table from per-patient `(arm, success)` pairs, arm 0 control and arm 1
    /// experimental.
    pub fn from_patients(data: &[(u32, bool)]) -> Result<Self> {
        let mut t = Self::new(0, 0, 0, 0);
        for &(arm, success) in data {
            match (arm, success) {
                (0, true) => t.control_successes += 1,
                (0, false) => t.control_failures += 1,
                (1, true) => t.exp_successes += 1,
                (1, false) => t.exp_failures += 1,
                _ => return Err(Error::Config(format!("arm {arm} is not 0 or 1"))),
            }
        }
        Ok(t)
    }

    pub fn control_n(&self) -> u64 {
        self.control_successes + self.control_failures
    }

    pub fn exp_n(&self) -> u64 {
        self.exp_successes + self.exp_failures
    }

    pub fn total(&self) -> u64 {
        self.control_n() + self.exp_n()
    }
}

/// A p-value with a flag for inputs the test cannot handle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub p_value: f64,
    pub degenerate: bool,
}

/// One-sided Fisher exact test of the experimental arm being better:
/// `P(exp successes >= observed)` given both margins.
pub fn fisher_one_sided(t: &Table2x2) -> TestResult {
    let n = t.total();
    let successes = t.control_successes + t.exp_successes;
    let n_exp = t.exp_n();
    if t.control_n() == 0 || n_exp == 0 || successes == 0 || successes == n {
        return TestResult {
            p_value: 1.0,
            degenerate: true,
        };
    }
    let failures = n - successes;
    let lo = n_exp.saturating_sub(failures);
    let hi = n_exp.min(successes);
    let norm = ln_binomial(n, n_exp);
    let term = |k: u64| (ln_binomial(successes, k) + ln_binomial(failures, n_exp - k) - norm).exp();
    let obs = t.exp_successes;
    // sum the shorter side for accuracy
    let p = if obs - lo <= hi - obs {
        1.0 - (lo..obs).map(term).sum::<f64>()
    } else {
        (obs..=hi).map(term).sum::<f64>()
    };
    TestResult {
        p_value: p.clamp(0.0, 1.0),
        degenerate: false,
    }
}

/// Logistic fit of `logit(p) = b0 + b1·T`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlmFit {
    pub intercept: f64,
    pub beta1: f64,
    pub se_beta1: f64,
    /// One-sided Wald p-value for `beta1 > 0`.
    pub p_value: f64,
    pub iterations: u32,
    /// Separation, a singular fit or non-convergence; `p_value` is then 1.
    pub flagged: bool,
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn flagged_fit(intercept: f64, beta1: f64, iterations: u32) -> GlmFit {
    GlmFit {
        intercept,
        beta1,
        se_beta1: f64::NAN,
        p_value: 1.0,
        iterations,
        flagged: true,
    }
}

/// Maximum-likelihood logistic regression on the treatment indicator by
/// iteratively reweighted least squares, with a one-sided Wald test.
pub fn glm_wald(t: &Table2x2) -> Result<GlmFit> {
    let (n0, n1) = (t.control_n() as f64, t.exp_n() as f64);
    if n0 == 0.0 || n1 == 0.0 {
        return Err(Error::Config("logistic regression needs patients on both arms".into()));
    }
    let (s0, s1) = (t.control_successes as f64, t.exp_successes as f64);
    let rate_at_edge = |s: f64, n: f64| s == 0.0 || s == n;
    if rate_at_edge(s0, n0) || rate_at_edge(s1, n1) {
        return Ok(flagged_fit(f64::NAN, f64::NAN, 0));
    }
    let deviance = |p0: f64, p1: f64| {
        let ll = |s: f64, n: f64, p: f64| s * p.ln() + (n - s) * (1.0 - p).ln();
        -2.0 * (ll(s0, n0, p0) + ll(s1, n1, p1))
    };

    let (mut b0, mut b1) = (0.0f64, 0.0f64);
    let mut dev = deviance(0.5, 0.5);
    for iter in 1..=IRLS_MAX_ITER {
        let (p0, p1) = (logistic(b0), logistic(b0 + b1));
        let (w0, w1) = (n0 * p0 * (1.0 - p0), n1 * p1 * (1.0 - p1));
        // information matrix [[w0 + w1, w1], [w1, w1]] and score
        let (g0, g1) = (s0 - n0 * p0 + s1 - n1 * p1, s1 - n1 * p1);
        let det = (w0 + w1) * w1 - w1 * w1;
        if !(det > 0.0) {
            return Ok(flagged_fit(b0, b1, iter));
        }
        b0 += (w1 * g0 - w1 * g1) / det;
        b1 += (-w1 * g0 + (w0 + w1) * g1) / det;
        if b1.abs() > SEPARATION_BOUND {
            return Ok(flagged_fit(b0, b1, iter));
        }
        let next = deviance(logistic(b0), logistic(b0 + b1));
        let change = (dev - next).abs();
        dev = next;
        if change < IRLS_TOL {
            let (p0, p1) = (logistic(b0), logistic(b0 + b1));
            let (w0, w1) = (n0 * p0 * (1.0 - p0), n1 * p1 * (1.0 - p1));
            let se = ((w0 + w1) / (w0 * w1)).sqrt();
            return Ok(GlmFit {
                intercept: b0,
                beta1: b1,
                se_beta1: se,
                p_value: 1.0 - normal_cdf(b1 / se),
                iterations: iter,
                flagged: false,
            });
        }
    }
    Ok(flagged_fit(b0, b1, IRLS_MAX_ITER))
}

/// Logistic Wald test on per-patient `(arm, success)` pairs.
pub fn glm_wald_patients(data: &[(u32, bool)]) -> Result<GlmFit> {
    glm_wald(&Table2x2::from_patients(data)?)
}

pub fn comparator_p_value(method: Comparator, t: &Table2x2) -> Result<TestResult> {
    Ok(match method {
        Comparator::Fisher => fisher_one_sided(t),
        Comparator::Glm => {
            let fit = glm_wald(t)?;
            TestResult {
                p_value: fit.p_value,
                degenerate: fit.flagged,
            }
        }
    })
}

/// Control versus `arm` in one category, or pooled over categories.
pub fn record_table(record: &TrialRecord, category: Option<usize>, arm: usize) -> Table2x2 {
    Table2x2::from_counts(record.arm_tally(category, 0), record.arm_tally(category, arm))
}

/// p-value of `method` on a simulated trial. An arm with no patients gives
/// a degenerate non-rejection.
pub fn record_p_value(method: Comparator, record: &TrialRecord, category: Option<usize>, arm: usize) -> TestResult {
    let t = record_table(record, category, arm);
    if t.control_n() == 0 || t.exp_n() == 0 {
        return TestResult {
            p_value: 1.0,
            degenerate: true,
        };
    }
    comparator_p_value(method, &t).expect("both arms have patients")
}

/// Largest observed null p-value `v` such that rejecting when `p <= v`
/// rejects at most `alpha` of the null replications. Returns 0 when even the
/// smallest p-value is too frequent.
pub fn calibrate_threshold(null_p_values: &[f64], alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("alpha {alpha} must lie in (0, 1)")));
    }
    let allowed = alpha * null_p_values.len() as f64;
    if allowed < 50.0 {
        return Err(Error::Config(format!(
            "calibration needs alpha * reps >= 50, got {allowed}"
        )));
    }
    let mut ps = null_p_values.to_vec();
    ps.sort_by(|a, b| a.total_cmp(b));
    let mut threshold = 0.0;
    let mut i = 0;
    while i < ps.len() {
        let v = ps[i];
        let mut j = i;
        while j < ps.len() && ps[j] == v {
            j += 1;
        }
        if j as f64 > allowed {
            break;
        }
        threshold = v;
        i = j;
    }
    Ok(threshold)
}

pub fn rejects(p_value: f64, threshold: f64) -> bool {
    p_value <= threshold
}
