//! Superiority test on the allocation probabilities.
//!
//! Each block's recorded allocation probability to the tested arm is
//! dichotomised at `θ = 1/A` (strictly greater counts as 1). The statistic
//! `Q` is the number of post-burn-in blocks with bit 1. Its null law, with all
//! arms sharing one success probability, is computed exactly for small two-arm
//! designs or estimated by simulating null trials. The decision rule is the
//! randomized level-α test at the critical value `c_q`.

use std::io::{Read, Write};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::alloc_dist::DEFAULT_MC_RUNS;
use crate::error::{Error, Result};
use crate::gittins::GittinsTable;
use crate::null_chain::{ChainContext, Integration};
use crate::trial_engine::{replicate_map, AllocationRule, Scenario, TrialRecord};

/// Default post-prior patient budget for exact recursion with quadrature.
pub const QUADRATURE_MAX_PATIENTS: u32 = 12;
/// Default post-prior patient budget for the expectation approximation.
pub const APPROX_MAX_PATIENTS: u32 = 20;
pub const DEFAULT_BURN_IN: u32 = 2;

/// Design quantities that determine the null law of `Q` for one category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NullDesign {
    pub n_blocks: u32,
    pub block_size: u32,
    pub n_categories: u32,
    #[serde(default = "two")]
    pub n_arms: u32,
    #[serde(default)]
    pub category_weights: Option<Vec<f64>>,
    #[serde(default = "default_mc_runs")]
    pub mc_runs: u32,
    #[serde(default = "default_burn_in")]
    pub burn_in: u32,
    pub threshold: f64,
    /// Category whose allocation probabilities are tested.
    #[serde(default)]
    pub category: u32,
    #[serde(default = "one")]
    pub tested_arm: u32,
    /// Overrides of the default exact-recursion budgets.
    #[serde(default)]
    pub max_exact_patients: Option<u32>,
}

fn two() -> u32 {
    2
}
fn one() -> u32 {
    1
}
pub(crate) fn default_mc_runs() -> u32 {
    DEFAULT_MC_RUNS
}
pub(crate) fn default_burn_in() -> u32 {
    DEFAULT_BURN_IN
}

impl NullDesign {
    /// Two-arm design with threshold 1/2 and the default burn-in.
    pub fn new(n_blocks: u32, block_size: u32, n_categories: u32) -> Self {
        Self {
            n_blocks,
            block_size,
            n_categories,
            n_arms: 2,
            category_weights: None,
            mc_runs: DEFAULT_MC_RUNS,
            burn_in: DEFAULT_BURN_IN,
            threshold: 0.5,
            category: 0,
            tested_arm: 1,
            max_exact_patients: None,
        }
    }

    pub fn with_burn_in(mut self, burn_in: u32) -> Self {
        self.burn_in = burn_in;
        self
    }

    pub fn with_arms(mut self, n_arms: u32) -> Self {
        self.n_arms = n_arms;
        self.threshold = 1.0 / n_arms as f64;
        self
    }

    pub fn effective_blocks(&self) -> u32 {
        self.n_blocks - self.burn_in
    }

    pub fn category_weight(&self, z: u32) -> f64 {
        match &self.category_weights {
            Some(w) => w[z as usize] / w.iter().sum::<f64>(),
            None => 1.0 / self.n_categories as f64,
        }
    }

    pub fn weights(&self) -> Vec<f64> {
        (0..self.n_categories).map(|z| self.category_weight(z)).collect()
    }

    pub(crate) fn exact_max_patients(&self, mode: Integration) -> u32 {
        self.max_exact_patients.unwrap_or(match mode {
            Integration::Quadrature => QUADRATURE_MAX_PATIENTS,
            Integration::ExpectationApprox => APPROX_MAX_PATIENTS,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_blocks == 0 || self.block_size == 0 || self.n_categories == 0 {
            return Err(Error::Config("blocks, block size and categories must be positive".into()));
        }
        if self.n_arms < 2 {
            return Err(Error::Config("need at least two arms".into()));
        }
        if self.burn_in >= self.n_blocks {
            return Err(Error::Config(format!(
                "burn-in {} must be below the number of blocks {}",
                self.burn_in, self.n_blocks
            )));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config("threshold must lie in (0, 1)".into()));
        }
        if self.category >= self.n_categories || self.tested_arm >= self.n_arms || self.tested_arm == 0 {
            return Err(Error::Config("tested category/arm out of range".into()));
        }
        if self.mc_runs == 0 {
            return Err(Error::Config("mc_runs must be positive".into()));
        }
        if let Some(w) = &self.category_weights {
            if w.len() != self.n_categories as usize || w.iter().any(|v| *v < 0.0) || w.iter().sum::<f64>() <= 0.0 {
                return Err(Error::Config("invalid category weights".into()));
            }
        }
        Ok(())
    }

    /// Null trial scenario with every arm succeeding with `p_common`.
    pub fn null_scenario(&self, p_common: f64, gittins: crate::gittins::GittinsConfig) -> Scenario {
        Scenario {
            n_patients: self.n_blocks * self.block_size,
            block_size: self.block_size,
            n_categories: self.n_categories,
            n_arms: self.n_arms,
            success_probs: vec![vec![p_common; self.n_categories as usize]; self.n_arms as usize],
            allocation_rule: AllocationRule::Flgi,
            mc_runs: self.mc_runs,
            gittins,
            burn_in: self.burn_in,
            category_weights: self.category_weights.clone(),
            seed: 0,
            recompute_inference_probs: false,
        }
    }
}

/// Dichotomised allocation probabilities of one category and arm.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlphaSequence {
    pub bits: Vec<u8>,
    pub burn_in: u32,
}

impl AlphaSequence {
    /// Bits that enter `Q`.
    pub fn counted(&self) -> &[u8] {
        &self.bits[(self.burn_in as usize).min(self.bits.len())..]
    }
}

pub fn dichotomize(alloc_probs: &[f64], threshold: f64, burn_in: u32) -> Result<AlphaSequence> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config("threshold must lie in (0, 1)".into()));
    }
    if burn_in as usize >= alloc_probs.len() {
        return Err(Error::Config(format!(
            "burn-in {burn_in} leaves no blocks out of {}",
            alloc_probs.len()
        )));
    }
    Ok(AlphaSequence {
        bits: alloc_probs.iter().map(|&p| u8::from(p > threshold)).collect(),
        burn_in,
    })
}

pub fn q_statistic(seq: &AlphaSequence) -> u32 {
    seq.counted().iter().map(|&b| b as u32).sum()
}

/// Number of reachable two-arm states after `k` blocks of `block_size`
/// patients: `Σ_{η=0}^{kB} C(η+3, 3)`.
pub fn state_count(k: u32, block_size: u32) -> u128 {
    let n = k as u128 * block_size as u128;
    (0..=n).map(|eta| (eta + 3) * (eta + 2) * (eta + 1) / 6).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExactMode {
    Quadrature,
    ExpectationApprox,
}

impl From<ExactMode> for Integration {
    fn from(m: ExactMode) -> Self {
        match m {
            ExactMode::Quadrature => Integration::Quadrature,
            ExactMode::ExpectationApprox => Integration::ExpectationApprox,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NullOrigin {
    Exact(ExactMode),
    MonteCarlo { reps: u64 },
}

/// Null law of `Q` over `0..=K_eff`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QNull {
    pub design: NullDesign,
    pub pmf: Vec<f64>,
    pub origin: NullOrigin,
    pub p_common: f64,
}

impl QNull {
    pub fn k_eff(&self) -> u32 {
        (self.pmf.len() - 1) as u32
    }

    /// `P(Q > c)`.
    pub fn tail_gt(&self, c: u32) -> f64 {
        self.pmf.iter().skip(c as usize + 1).sum()
    }

    /// `P(Q >= c)`.
    pub fn tail_ge(&self, c: u32) -> f64 {
        self.pmf.iter().skip(c as usize).sum()
    }

    pub fn mean(&self) -> f64 {
        self.pmf.iter().enumerate().map(|(q, p)| q as f64 * p).sum()
    }

    /// Empirical null from observed `Q` values.
    pub fn from_q_values(design: NullDesign, p_common: f64, qs: &[u32]) -> Result<Self> {
        if qs.is_empty() {
            return Err(Error::Config("no null replications".into()));
        }
        let k_eff = design.effective_blocks();
        let mut counts = vec![0u64; k_eff as usize + 1];
        for &q in qs {
            if q > k_eff {
                return Err(Error::Contract(format!("Q = {q} exceeds K_eff = {k_eff}")));
            }
            counts[q as usize] += 1;
        }
        let n = qs.len() as f64;
        Ok(Self {
            design,
            pmf: counts.iter().map(|&c| c as f64 / n).collect(),
            origin: NullOrigin::MonteCarlo { reps: qs.len() as u64 },
            p_common,
        })
    }

    /// CSV with header `q,prob`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["q", "prob"])?;
        for (q, p) in self.pmf.iter().enumerate() {
            w.write_record(&[q.to_string(), format!("{p:.15}")])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a `q,prob` CSV. The design fields not recoverable from the file
    /// are taken from `design`, whose effective block count must match.
    pub fn read_csv<R: Read>(input: R, design: NullDesign) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let mut pmf = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let q: usize = rec
                .get(0)
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| Error::Config("bad q column".into()))?;
            let p: f64 = rec
                .get(1)
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| Error::Config("bad prob column".into()))?;
            if q != pmf.len() {
                return Err(Error::Config(format!("q values must be 0,1,2,...; got {q}")));
            }
            pmf.push(p);
        }
        if pmf.is_empty() {
            return Err(Error::Config("empty null file".into()));
        }
        if pmf.len() as u32 != design.effective_blocks() + 1 {
            return Err(Error::Contract(format!(
                "null covers Q in 0..={}, design has K_eff = {}",
                pmf.len() - 1,
                design.effective_blocks()
            )));
        }
        Ok(Self {
            design,
            pmf,
            origin: NullOrigin::MonteCarlo { reps: 0 },
            p_common: f64::NAN,
        })
    }
}

/// Exact null law of `Q` for one category of a two-arm design.
pub fn exact_q_null(design: &NullDesign, p_common: f64, table: &GittinsTable, mode: ExactMode) -> Result<QNull> {
    let mut ctx = ChainContext::new(design, table, p_common, mode.into())?;
    ctx.check_budget(design.n_blocks * design.block_size, "exact Q-null recursion")?;
    let pmf = ctx.q_distribution()?;
    Ok(QNull {
        design: design.clone(),
        pmf,
        origin: NullOrigin::Exact(mode),
        p_common,
    })
}

/// Monte-Carlo null law of `Q` from `reps` simulated null trials.
pub fn mc_q_null(design: &NullDesign, p_common: f64, table: &GittinsTable, reps: u64, seed: u64) -> Result<QNull> {
    design.validate()?;
    if reps == 0 {
        return Err(Error::Config("reps must be at least 1".into()));
    }
    let gittins = crate::gittins::GittinsConfig {
        discount: table.discount(),
        horizon: table.horizon(),
    };
    let scn = design.null_scenario(p_common, gittins);
    let (z, arm) = (design.category as usize, design.tested_arm as usize);
    let (theta, burn_in) = (design.threshold, design.burn_in);
    let qs = replicate_map(&scn, table, reps, seed, |rec| {
        let seq = dichotomize(&rec.alloc_series(z, arm), theta, burn_in).expect("validated design");
        q_statistic(&seq)
    })?;
    QNull::from_q_values(design.clone(), p_common, &qs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CriticalValue {
    pub c_q: u32,
    /// Rejection probability when `Q == c_q`.
    pub gamma: f64,
}

/// Smallest `c_q` with `P(Q > c_q) < alpha`, plus the randomization weight
/// that makes the test exactly level `alpha`.
pub fn critical_value(null: &QNull, alpha: f64) -> Result<CriticalValue> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("alpha {alpha} must lie in (0, 1)")));
    }
    let k_eff = null.k_eff();
    let c_q = (0..=k_eff)
        .find(|&c| null.tail_gt(c) < alpha)
        .unwrap_or(k_eff);
    let at = null.pmf[c_q as usize];
    let gamma = if at > 0.0 {
        ((alpha - null.tail_gt(c_q)) / at).clamp(0.0, 1.0)
    } else {
        0.0
    };
    Ok(CriticalValue { c_q, gamma })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestDecision {
    pub q: u32,
    pub c_q: u32,
    pub gamma: f64,
    pub alpha: f64,
    pub reject: bool,
    /// `P(Q >= q)` under the null.
    pub p_value: f64,
}

/// Randomized decision for an observed `q`; `u` is a uniform draw used only
/// when `q == c_q`.
pub fn decide(q: u32, null: &QNull, crit: CriticalValue, alpha: f64, u: f64) -> TestDecision {
    let reject = q > crit.c_q || (q == crit.c_q && u < crit.gamma);
    TestDecision {
        q,
        c_q: crit.c_q,
        gamma: crit.gamma,
        alpha,
        reject,
        p_value: null.tail_ge(q),
    }
}

/// Tests from a series of per-block allocation probabilities.
pub fn test_alloc_probs<R: Rng>(probs: &[f64], null: &QNull, alpha: f64, rng: &mut R) -> Result<TestDecision> {
    let d = &null.design;
    if probs.len() as u32 != d.effective_blocks() + d.burn_in {
        return Err(Error::Contract(format!(
            "{} allocation probabilities but the null expects {} blocks",
            probs.len(),
            d.effective_blocks() + d.burn_in
        )));
    }
    let seq = dichotomize(probs, d.threshold, d.burn_in)?;
    let q = q_statistic(&seq);
    let crit = critical_value(null, alpha)?;
    Ok(decide(q, null, crit, alpha, rng.gen::<f64>()))
}

/// Runs the allocation-probability test for `category` and `arm` of a
/// simulated trial.
pub fn run_qtest(
    record: &TrialRecord,
    category: usize,
    arm: usize,
    null: &QNull,
    alpha: f64,
    seed: u64,
) -> Result<TestDecision> {
    let d = &null.design;
    let mismatch = record.n_blocks() as u32 != d.n_blocks
        || record.block_size != d.block_size
        || record.n_categories != d.n_categories
        || record.n_arms != d.n_arms
        || record.burn_in != d.burn_in
        || (d.threshold - 1.0 / record.n_arms as f64).abs() > 1e-12;
    if mismatch {
        return Err(Error::Contract(format!(
            "null design (K={}, B={}, n_z={}, A={}, burn-in={}, θ={}) does not match the trial \
             (K={}, B={}, n_z={}, A={}, burn-in={})",
            d.n_blocks,
            d.block_size,
            d.n_categories,
            d.n_arms,
            d.burn_in,
            d.threshold,
            record.n_blocks(),
            record.block_size,
            record.n_categories,
            record.n_arms,
            record.burn_in
        )));
    }
    if category >= record.n_categories as usize || arm >= record.n_arms as usize {
        return Err(Error::Contract("category or arm out of range".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    test_alloc_probs(&record.alloc_series(category, arm), null, alpha, &mut rng)
}

/// Per-comparison level for `n_tests` pairwise tests.
pub fn pairwise_alpha(alpha: f64, n_tests: u32, bonferroni: bool) -> f64 {
    if bonferroni && n_tests > 1 {
        alpha / n_tests as f64
    } else {
        alpha
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn null_from(pmf: Vec<f64>) -> QNull {
        let k = pmf.len() as u32 - 1;
        QNull {
            design: NullDesign::new(k, 2, 1).with_burn_in(0),
            pmf,
            origin: NullOrigin::MonteCarlo { reps: 1 },
            p_common: 0.5,
        }
    }

    #[test]
    fn dichotomize_examples() {
        let s = dichotomize(&[0.5; 6], 0.5, 0).unwrap();
        assert!(s.bits.iter().all(|&b| b == 0));
        let s = dichotomize(&[0.2, 0.9, 0.6, 0.4], 0.5, 2).unwrap();
        assert_eq!(s.counted(), &[1, 0]);
        assert_eq!(q_statistic(&s), 1);
        let s = dichotomize(&[0.3, 0.25, 0.26], 0.25, 0).unwrap();
        assert_eq!(s.bits, vec![1, 0, 1]);
        assert!(dichotomize(&[0.1, 0.2], 0.5, 2).is_err());
    }

    #[test]
    fn q_examples() {
        let s = dichotomize(&[0.9; 8], 0.5, 0).unwrap();
        assert_eq!(q_statistic(&s), 8);
        let alt: Vec<f64> = (0..10).map(|i| if i % 2 == 0 { 0.7 } else { 0.3 }).collect();
        assert_eq!(q_statistic(&dichotomize(&alt, 0.5, 0).unwrap()), 5);
        let s = dichotomize(&[0.9; 40], 0.25, 2).unwrap();
        assert_eq!(q_statistic(&s), 38);
    }

    #[test]
    fn state_counts() {
        assert_eq!(state_count(1, 2), 15);
        assert_eq!(state_count(1, 1), 5);
        assert_eq!(state_count(0, 2), 1);
        // Σ_{η=0}^{n} C(η+3,3) = C(n+4,4)
        assert_eq!(state_count(10, 2), 10626);
        assert_eq!(state_count(1000, 1000), {
            let n: u128 = 1_000_000;
            (n + 4) * (n + 3) * (n + 2) * (n + 1) / 24
        });
    }

    #[test]
    fn critical_value_of_point_mass_at_zero() {
        let null = null_from(vec![1.0, 0.0, 0.0]);
        let cv = critical_value(&null, 0.05).unwrap();
        assert_eq!(cv.c_q, 0);
        assert!((cv.gamma - 0.05).abs() < 1e-15);
    }

    #[test]
    fn critical_value_is_exact_level() {
        let null = null_from(vec![0.1, 0.2, 0.3, 0.25, 0.1, 0.05]);
        for alpha in [0.01, 0.05, 0.1, 0.3] {
            let cv = critical_value(&null, alpha).unwrap();
            let size = null.tail_gt(cv.c_q) + cv.gamma * null.pmf[cv.c_q as usize];
            assert!((size - alpha).abs() < 1e-12);
            assert!(null.tail_gt(cv.c_q) < alpha);
            assert!(cv.c_q == 0 || null.tail_gt(cv.c_q - 1) >= alpha);
        }
    }

    #[test]
    fn decision_rules() {
        let null = null_from(vec![0.1, 0.2, 0.3, 0.25, 0.1, 0.05]);
        let cv = critical_value(&null, 0.1).unwrap();
        assert_eq!(cv.c_q, 4);
        let d = decide(5, &null, cv, 0.1, 0.99);
        assert!(d.reject);
        assert!((d.p_value - 0.05).abs() < 1e-15);
        assert!(!decide(3, &null, cv, 0.1, 0.0).reject);
        assert!(decide(4, &null, cv, 0.1, 0.0).reject);
        assert!(!decide(4, &null, cv, 0.1, 0.999).reject);
    }

    #[test]
    fn csv_round_trip() {
        let null = null_from(vec![0.25, 0.5, 0.25]);
        let mut buf = Vec::new();
        null.write_csv(&mut buf).unwrap();
        let back = QNull::read_csv(&buf[..], null.design.clone()).unwrap();
        assert_eq!(back.pmf, null.pmf);
        assert!(QNull::read_csv(&buf[..], NullDesign::new(5, 2, 1).with_burn_in(0)).is_err());
    }

    #[test]
    fn bonferroni() {
        assert_eq!(pairwise_alpha(0.05, 3, false), 0.05);
        assert!((pairwise_alpha(0.06, 3, true) - 0.02).abs() < 1e-15);
    }
}
