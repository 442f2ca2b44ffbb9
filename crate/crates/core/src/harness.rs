//! Simulation studies: calibrated power grids, block-size sweeps, patient
//! benefit summaries and the four-arm example.
//!
//! Every study draws its replications from seed streams derived from a single
//! user seed. Calibration and evaluation use disjoint streams.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::comparators::{calibrate_threshold, record_p_value, rejects, Comparator};
use crate::error::{Error, Result};
use crate::gittins::{GittinsConfig, GittinsTable};
use crate::numeric::mix_seed;
use crate::qtest::{critical_value, decide, dichotomize, q_statistic, CriticalValue, NullDesign, QNull};
use crate::trial_engine::{replicate_map, AllocationRule, Scenario, TrialRecord};

pub const DEFAULT_POWER_REPS: u64 = 2000;
pub const DEFAULT_CALIBRATION_REPS: u64 = 5000;
pub const RECOMMENDED_MIN_BLOCKS: u32 = 20;

// stream tags for derived seeds
const STREAM_CALIBRATION: u64 = 0;
const STREAM_EVALUATION: u64 = 1;
const STREAM_EQUAL: u64 = 0x45_51_55_41_4c;
const STREAM_UNIFORM: u64 = 0x55_4e_49_46;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Allocation-probability test on FLGI trials.
    AllocProb,
    FisherFlgi,
    GlmFlgi,
    FisherEqual,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::AllocProb, Method::FisherFlgi, Method::GlmFlgi, Method::FisherEqual];

    pub fn name(self) -> &'static str {
        match self {
            Method::AllocProb => "alloc_prob",
            Method::FisherFlgi => "fisher_flgi",
            Method::GlmFlgi => "glm_flgi",
            Method::FisherEqual => "fisher_equal",
        }
    }

    fn comparator(self) -> Option<Comparator> {
        match self {
            Method::AllocProb => None,
            Method::FisherFlgi | Method::FisherEqual => Some(Comparator::Fisher),
            Method::GlmFlgi => Some(Comparator::Glm),
        }
    }

    fn rule(self) -> AllocationRule {
        match self {
            Method::FisherEqual => AllocationRule::Equal,
            _ => AllocationRule::Flgi,
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method '{s}'")))
    }
}

fn default_p_control() -> f64 {
    0.5
}
fn default_reps() -> u64 {
    DEFAULT_POWER_REPS
}
fn default_calibration_reps() -> u64 {
    DEFAULT_CALIBRATION_REPS
}
fn default_alpha() -> f64 {
    0.05
}
fn default_methods() -> Vec<Method> {
    Method::ALL.to_vec()
}

/// A power study over every combination of sample size, category count and
/// block size, evaluated at each experimental success probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentGrid {
    #[serde(default = "default_p_control")]
    pub p_control: f64,
    pub p_experimental: Vec<f64>,
    pub n_patients: Vec<u32>,
    pub n_categories: Vec<u32>,
    pub block_sizes: Vec<u32>,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default = "default_reps")]
    pub reps: u64,
    #[serde(default = "default_calibration_reps")]
    pub calibration_reps: u64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "crate::qtest::default_mc_runs")]
    pub mc_runs: u32,
    #[serde(default = "crate::qtest::default_burn_in")]
    pub burn_in: u32,
    #[serde(default)]
    pub gittins: GittinsConfig,
    /// Run comparators on all categories together instead of the tested one.
    #[serde(default)]
    pub pooled: bool,
    #[serde(default)]
    pub tested_category: u32,
}

impl ExperimentGrid {
    pub fn validate(&self) -> Result<()> {
        let axes_empty = self.p_experimental.is_empty()
            || self.n_patients.is_empty()
            || self.n_categories.is_empty()
            || self.block_sizes.is_empty()
            || self.methods.is_empty();
        if axes_empty {
            return Err(Error::Config("every grid axis needs at least one value".into()));
        }
        if self.reps == 0 {
            return Err(Error::Config("reps must be positive".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config("alpha must lie in (0, 1)".into()));
        }
        if self.alpha * (self.calibration_reps as f64) < 50.0 {
            return Err(Error::Config(format!(
                "calibration needs alpha * calibration_reps >= 50, got {}",
                self.alpha * self.calibration_reps as f64
            )));
        }
        for d in self.designs() {
            self.scenario(d, self.p_control).validate()?;
            if self.tested_category >= d.n_categories {
                return Err(Error::Config(format!(
                    "tested category {} does not exist with {} categories",
                    self.tested_category, d.n_categories
                )));
            }
        }
        for p in &self.p_experimental {
            if !(0.0..=1.0).contains(p) {
                return Err(Error::Config(format!("success probability {p} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Design points in axis order: sample size, then categories, then block size.
    pub fn designs(&self) -> Vec<DesignPoint> {
        let mut out = Vec::new();
        for &n_patients in &self.n_patients {
            for &n_categories in &self.n_categories {
                for &block_size in &self.block_sizes {
                    out.push(DesignPoint {
                        n_patients,
                        n_categories,
                        block_size,
                    });
                }
            }
        }
        out
    }

    pub fn scenario(&self, d: DesignPoint, p_experimental: f64) -> Scenario {
        let mut scn = Scenario::two_arm(d.n_patients, d.block_size, d.n_categories, self.p_control, p_experimental);
        scn.mc_runs = self.mc_runs;
        scn.burn_in = self.burn_in;
        scn.gittins = self.gittins;
        scn
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DesignPoint {
    pub n_patients: u32,
    pub n_categories: u32,
    pub block_size: u32,
}

impl DesignPoint {
    pub fn id(&self) -> String {
        format!("N{}_Z{}_B{}", self.n_patients, self.n_categories, self.block_size)
    }
}

/// Non-fatal warnings for designs outside the recommended range.
pub fn validate_design(scn: &Scenario) -> Vec<String> {
    let mut warnings = Vec::new();
    if scn.allocation_rule == AllocationRule::Flgi && scn.block_size > scn.n_categories {
        warnings.push(format!(
            "block size {} exceeds the number of categories {}; power and patient benefit degrade",
            scn.block_size, scn.n_categories
        ));
    }
    if scn.n_blocks() < RECOMMENDED_MIN_BLOCKS {
        warnings.push(format!(
            "{} blocks is below the recommended minimum of {RECOMMENDED_MIN_BLOCKS}",
            scn.n_blocks()
        ));
    }
    warnings
}

/// Rejection rate of one method with its Monte-Carlo standard error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: Method,
    pub rejection_rate: f64,
    pub se: f64,
    /// Rate when rejecting at the nominal level without calibration;
    /// comparators only.
    pub unadjusted_rate: Option<f64>,
    /// Calibrated p-value threshold, or `c_q` for the allocation test.
    pub threshold: f64,
    /// Boundary rejection probability of the allocation test.
    pub gamma: f64,
}

/// Patient benefit under one allocation rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenefitSummary {
    pub rule: AllocationRule,
    /// Mean percentage of patients on an arm with the best success probability.
    pub pct_best: f64,
    pub pct_best_se: f64,
    pub mean_successes: f64,
    pub mean_successes_se: f64,
    pub reps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub scenario_id: String,
    pub design: DesignPoint,
    pub p_control: f64,
    pub p_experimental: f64,
    pub methods: Vec<MethodResult>,
    pub benefit: Vec<BenefitSummary>,
    pub reps: u64,
    pub calibration_reps: u64,
    pub calibration_seed: u64,
    pub evaluation_seed: u64,
    pub runtime_secs: f64,
    pub warnings: Vec<String>,
}

impl ScenarioResult {
    pub fn method(&self, m: Method) -> Option<&MethodResult> {
        self.methods.iter().find(|r| r.method == m)
    }

    pub fn benefit(&self, rule: AllocationRule) -> Option<&BenefitSummary> {
        self.benefit.iter().find(|b| b.rule == rule)
    }

    pub fn rows(&self) -> Vec<ResultRow> {
        let mut rows = Vec::new();
        let row = |method: &str, metric: &str, value: f64, se: f64| ResultRow {
            scenario_id: self.scenario_id.clone(),
            method: method.to_string(),
            metric: metric.to_string(),
            value,
            se,
        };
        for m in &self.methods {
            rows.push(row(m.method.name(), "rejection_rate", m.rejection_rate, m.se));
            if let Some(u) = m.unadjusted_rate {
                rows.push(row(m.method.name(), "rejection_rate_unadjusted", u, binomial_se(u, self.reps)));
            }
            rows.push(row(m.method.name(), "threshold", m.threshold, f64::NAN));
        }
        for b in &self.benefit {
            let name = rule_name(b.rule);
            rows.push(row(name, "pct_best", b.pct_best, b.pct_best_se));
            rows.push(row(name, "mean_successes", b.mean_successes, b.mean_successes_se));
        }
        rows
    }
}

fn rule_name(rule: AllocationRule) -> &'static str {
    match rule {
        AllocationRule::Flgi => "flgi_allocation",
        AllocationRule::Equal => "equal_allocation",
    }
}

/// One line of a results CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub scenario_id: String,
    pub method: String,
    pub metric: String,
    pub value: f64,
    pub se: f64,
}

pub fn binomial_se(rate: f64, reps: u64) -> f64 {
    (rate * (1.0 - rate) / reps as f64).sqrt()
}

fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// What the studies need from each simulated trial.
#[derive(Debug, Clone, PartialEq)]
struct TrialSummary {
    /// `Q` of each experimental arm in the tested category.
    q: Vec<u32>,
    /// Comparator p-values per experimental arm.
    fisher: Vec<f64>,
    glm: Vec<f64>,
    pct_best: f64,
    successes: f64,
    on_arm: Vec<u32>,
}

struct SummaryOptions {
    category: usize,
    pooled: bool,
    glm: bool,
}

fn summarize(rec: &TrialRecord, scn: &Scenario, opts: &SummaryOptions) -> TrialSummary {
    let theta = 1.0 / rec.n_arms as f64;
    let comparator_cat = if opts.pooled { None } else { Some(opts.category) };
    let arms = 1..rec.n_arms as usize;
    TrialSummary {
        q: arms
            .clone()
            .map(|a| {
                let seq = dichotomize(&rec.alloc_series(opts.category, a), theta, rec.burn_in).expect("valid scenario");
                q_statistic(&seq)
            })
            .collect(),
        fisher: arms
            .clone()
            .map(|a| record_p_value(Comparator::Fisher, rec, comparator_cat, a).p_value)
            .collect(),
        glm: if opts.glm {
            arms.map(|a| record_p_value(Comparator::Glm, rec, comparator_cat, a).p_value).collect()
        } else {
            Vec::new()
        },
        pct_best: 100.0 * rec.fraction_on_best(&scn.success_probs),
        successes: rec.total_successes() as f64,
        on_arm: rec.arm_counts(),
    }
}

fn simulate_summaries(
    scn: &Scenario,
    table: &GittinsTable,
    reps: u64,
    seed: u64,
    opts: &SummaryOptions,
) -> Result<Vec<TrialSummary>> {
    replicate_map(scn, table, reps, seed, |rec| summarize(rec, scn, opts))
}

fn benefit_of(rule: AllocationRule, sims: &[TrialSummary]) -> BenefitSummary {
    let pct: Vec<f64> = sims.iter().map(|s| s.pct_best).collect();
    let succ: Vec<f64> = sims.iter().map(|s| s.successes).collect();
    let (pct_best, pct_best_se) = mean_and_se(&pct);
    let (mean_successes, mean_successes_se) = mean_and_se(&succ);
    BenefitSummary {
        rule,
        pct_best,
        pct_best_se,
        mean_successes,
        mean_successes_se,
        reps: sims.len() as u64,
    }
}

/// Patient-benefit summary of a scenario over `reps` replications.
pub fn run_benefit(scn: &Scenario, table: &GittinsTable, reps: u64, seed: u64) -> Result<BenefitSummary> {
    let opts = SummaryOptions {
        category: 0,
        pooled: true,
        glm: false,
    };
    let sims = simulate_summaries(scn, table, reps, seed, &opts)?;
    Ok(benefit_of(scn.allocation_rule, &sims))
}

/// Uniform draws for randomized decisions, one per replication.
fn uniforms(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, STREAM_UNIFORM));
    (0..n).map(|_| rng.gen::<f64>()).collect()
}

fn alloc_rejections(qs: &[u32], null: &QNull, crit: CriticalValue, alpha: f64, seed: u64) -> Vec<bool> {
    let u = uniforms(seed, qs.len());
    qs.iter()
        .zip(u)
        .map(|(&q, u)| decide(q, null, crit, alpha, u).reject)
        .collect()
}

fn rate(flags: impl Iterator<Item = bool>) -> f64 {
    let (mut hits, mut n) = (0u64, 0u64);
    for f in flags {
        hits += f as u64;
        n += 1;
    }
    hits as f64 / n as f64
}

struct Calibration {
    null: Option<(QNull, CriticalValue)>,
    thresholds: BTreeMap<Method, f64>,
}

fn tables_for(grid: &ExperimentGrid) -> Result<BTreeMap<u32, GittinsTable>> {
    let mut out = BTreeMap::new();
    let needs_flgi = grid.methods.iter().any(|m| m.rule() == AllocationRule::Flgi);
    for &n in &grid.n_patients {
        let size = if needs_flgi { n + 6 } else { 2 };
        out.insert(n, GittinsTable::from_config(&grid.gittins, size)?);
    }
    Ok(out)
}

/// Calibrates every method on null trials, then estimates rejection rates at
/// each experimental success probability.
pub fn run_power_grid(grid: &ExperimentGrid) -> Result<Vec<ScenarioResult>> {
    grid.validate()?;
    let tables = tables_for(grid)?;
    let z = grid.tested_category as usize;
    let wants = |m: Method| grid.methods.contains(&m);
    let flgi_needed = grid.methods.iter().any(|m| m.rule() == AllocationRule::Flgi);
    let mut results = Vec::new();

    for (d_idx, d) in grid.designs().into_iter().enumerate() {
        let table = &tables[&d.n_patients];
        let cal_seed = mix_seed(mix_seed(grid.seed, STREAM_CALIBRATION), d_idx as u64);
        let eval_base = mix_seed(mix_seed(grid.seed, STREAM_EVALUATION), d_idx as u64);
        let opts = SummaryOptions {
            category: z,
            pooled: grid.pooled,
            glm: wants(Method::GlmFlgi),
        };
        let started = Instant::now();

        let null_scn = grid.scenario(d, grid.p_control);
        let mut cal = Calibration {
            null: None,
            thresholds: BTreeMap::new(),
        };
        if flgi_needed {
            let sims = simulate_summaries(&null_scn, table, grid.calibration_reps, cal_seed, &opts)?;
            if wants(Method::AllocProb) {
                let mut design = NullDesign::new(null_scn.n_blocks(), d.block_size, d.n_categories)
                    .with_burn_in(grid.burn_in);
                design.category = grid.tested_category;
                design.mc_runs = grid.mc_runs;
                let qs: Vec<u32> = sims.iter().map(|s| s.q[0]).collect();
                let null = QNull::from_q_values(design, grid.p_control, &qs)?;
                let crit = critical_value(&null, grid.alpha)?;
                cal.null = Some((null, crit));
            }
            if wants(Method::FisherFlgi) {
                let ps: Vec<f64> = sims.iter().map(|s| s.fisher[0]).collect();
                cal.thresholds.insert(Method::FisherFlgi, calibrate_threshold(&ps, grid.alpha)?);
            }
            if wants(Method::GlmFlgi) {
                let ps: Vec<f64> = sims.iter().map(|s| s.glm[0]).collect();
                cal.thresholds.insert(Method::GlmFlgi, calibrate_threshold(&ps, grid.alpha)?);
            }
        }
        if wants(Method::FisherEqual) {
            let scn = null_scn.clone().with_rule(AllocationRule::Equal);
            let sims = simulate_summaries(&scn, table, grid.calibration_reps, mix_seed(cal_seed, STREAM_EQUAL), &opts)?;
            let ps: Vec<f64> = sims.iter().map(|s| s.fisher[0]).collect();
            cal.thresholds.insert(Method::FisherEqual, calibrate_threshold(&ps, grid.alpha)?);
        }
        let cal_secs = started.elapsed().as_secs_f64();

        for (j, &p1) in grid.p_experimental.iter().enumerate() {
            let started = Instant::now();
            let eval_seed = mix_seed(eval_base, j as u64);
            let scn = grid.scenario(d, p1);
            let mut methods = Vec::new();
            let mut benefit = Vec::new();
            if flgi_needed {
                let sims = simulate_summaries(&scn, table, grid.reps, eval_seed, &opts)?;
                for m in grid.methods.iter().copied().filter(|m| m.rule() == AllocationRule::Flgi) {
                    methods.push(evaluate(m, &sims, &cal, grid.alpha, eval_seed)?);
                }
                benefit.push(benefit_of(AllocationRule::Flgi, &sims));
            }
            if wants(Method::FisherEqual) {
                let eq = scn.clone().with_rule(AllocationRule::Equal);
                let sims = simulate_summaries(&eq, table, grid.reps, mix_seed(eval_seed, STREAM_EQUAL), &opts)?;
                methods.push(evaluate(Method::FisherEqual, &sims, &cal, grid.alpha, eval_seed)?);
                benefit.push(benefit_of(AllocationRule::Equal, &sims));
            }
            methods.sort_by_key(|m| grid.methods.iter().position(|g| *g == m.method));
            results.push(ScenarioResult {
                scenario_id: format!("{}_p{}", d.id(), p1),
                design: d,
                p_control: grid.p_control,
                p_experimental: p1,
                methods,
                benefit,
                reps: grid.reps,
                calibration_reps: grid.calibration_reps,
                calibration_seed: cal_seed,
                evaluation_seed: eval_seed,
                runtime_secs: started.elapsed().as_secs_f64() + if j == 0 { cal_secs } else { 0.0 },
                warnings: validate_design(&scn),
            });
        }
    }
    Ok(results)
}

fn evaluate(m: Method, sims: &[TrialSummary], cal: &Calibration, alpha: f64, seed: u64) -> Result<MethodResult> {
    let reps = sims.len() as u64;
    if m == Method::AllocProb {
        let (null, crit) = cal.null.as_ref().expect("allocation test calibrated");
        let qs: Vec<u32> = sims.iter().map(|s| s.q[0]).collect();
        let r = rate(alloc_rejections(&qs, null, *crit, alpha, seed).into_iter());
        return Ok(MethodResult {
            method: m,
            rejection_rate: r,
            se: binomial_se(r, reps),
            unadjusted_rate: None,
            threshold: crit.c_q as f64,
            gamma: crit.gamma,
        });
    }
    let threshold = cal.thresholds[&m];
    let ps: Vec<f64> = match m.comparator() {
        Some(Comparator::Glm) => sims.iter().map(|s| s.glm[0]).collect(),
        _ => sims.iter().map(|s| s.fisher[0]).collect(),
    };
    let r = rate(ps.iter().map(|&p| rejects(p, threshold)));
    Ok(MethodResult {
        method: m,
        rejection_rate: r,
        se: binomial_se(r, reps),
        unadjusted_rate: Some(rate(ps.iter().map(|&p| rejects(p, alpha)))),
        threshold,
        gamma: 0.0,
    })
}

/// Power grid over block sizes; the other axes come from `grid`.
pub fn run_block_size_sweep(grid: &ExperimentGrid, block_sizes: &[u32]) -> Result<Vec<ScenarioResult>> {
    if block_sizes.is_empty() {
        return Err(Error::Config("no block sizes to sweep".into()));
    }
    let mut g = grid.clone();
    g.block_sizes = block_sizes.to_vec();
    run_power_grid(&g)
}

/// Success probabilities of the three four-arm scenarios, control first.
pub fn multiarm_probs(scenario: u32) -> Result<Vec<f64>> {
    match scenario {
        1 => Ok(vec![0.5; 4]),
        // one minus the observed adverse-event rate of each arm
        2 => Ok(vec![10.0 / 19.0, 16.0 / 21.0, 14.0 / 21.0, 13.0 / 19.0]),
        3 => Ok(vec![0.53, 0.61, 0.69, 0.77]),
        _ => Err(Error::Config(format!("multi-arm scenario {scenario} is not 1, 2 or 3"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiArmConfig {
    #[serde(default = "default_multiarm_reps")]
    pub reps: u64,
    #[serde(default = "default_multiarm_null_reps")]
    pub null_reps: u64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub bonferroni: bool,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "crate::qtest::default_mc_runs")]
    pub mc_runs: u32,
    #[serde(default)]
    pub gittins: GittinsConfig,
}

fn default_multiarm_reps() -> u64 {
    5000
}
fn default_multiarm_null_reps() -> u64 {
    10_000
}

impl Default for MultiArmConfig {
    fn default() -> Self {
        Self {
            reps: default_multiarm_reps(),
            null_reps: default_multiarm_null_reps(),
            alpha: default_alpha(),
            bonferroni: false,
            seed: 0,
            mc_runs: crate::alloc_dist::DEFAULT_MC_RUNS,
            gittins: GittinsConfig::default(),
        }
    }
}

pub const MULTIARM_PATIENTS: u32 = 80;
pub const MULTIARM_BLOCK: u32 = 2;
pub const MULTIARM_BURN_IN: u32 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiArmResult {
    pub scenario: u32,
    pub arm_probs: Vec<f64>,
    /// Experimental arm with the highest success probability.
    pub best_arm: u32,
    pub c_q: u32,
    pub gamma: f64,
    pub alpha: f64,
    /// Allocation-test rejection rate of each experimental arm against control.
    pub alloc_rejection: Vec<f64>,
    /// Fisher test at the nominal level under FLGI allocation.
    pub fisher_flgi_rejection: Vec<f64>,
    /// Fisher test at the nominal level under equal allocation.
    pub fisher_equal_rejection: Vec<f64>,
    pub flgi_benefit: BenefitSummary,
    pub equal_benefit: BenefitSummary,
    pub mean_on_arm_flgi: Vec<f64>,
    pub reps: u64,
    pub null_reps: u64,
}

impl MultiArmResult {
    pub fn alloc_rejection_best(&self) -> f64 {
        self.alloc_rejection[self.best_arm as usize - 1]
    }

    pub fn fisher_equal_best(&self) -> f64 {
        self.fisher_equal_rejection[self.best_arm as usize - 1]
    }

    pub fn rows(&self) -> Vec<ResultRow> {
        let id = format!("multiarm_s{}", self.scenario);
        let row = |method: String, metric: &str, value: f64, se: f64| ResultRow {
            scenario_id: id.clone(),
            method,
            metric: metric.to_string(),
            value,
            se,
        };
        let mut rows = vec![row("alloc_prob".into(), "critical_value", self.c_q as f64, f64::NAN)];
        for a in 0..self.alloc_rejection.len() {
            let arm = a + 1;
            for (method, r) in [
                ("alloc_prob", self.alloc_rejection[a]),
                ("fisher_flgi", self.fisher_flgi_rejection[a]),
                ("fisher_equal", self.fisher_equal_rejection[a]),
            ] {
                rows.push(row(format!("{method}_arm{arm}"), "rejection_rate", r, binomial_se(r, self.reps)));
            }
        }
        for b in [&self.flgi_benefit, &self.equal_benefit] {
            rows.push(row(rule_name(b.rule).into(), "pct_best", b.pct_best, b.pct_best_se));
            rows.push(row(rule_name(b.rule).into(), "mean_successes", b.mean_successes, b.mean_successes_se));
        }
        for (a, n) in self.mean_on_arm_flgi.iter().enumerate() {
            rows.push(row(rule_name(AllocationRule::Flgi).into(), &format!("mean_on_arm{a}"), *n, f64::NAN));
        }
        rows
    }
}

/// Null design of the four-arm example.
pub fn multiarm_null_design(cfg: &MultiArmConfig) -> NullDesign {
    let mut d = NullDesign::new(MULTIARM_PATIENTS / MULTIARM_BLOCK, MULTIARM_BLOCK, 1)
        .with_burn_in(MULTIARM_BURN_IN)
        .with_arms(4);
    d.mc_runs = cfg.mc_runs;
    d
}

/// Simulated four-arm trial under FLGI (allocation test and Fisher) and
/// under equal randomization (Fisher), for each requested scenario.
pub fn run_multiarm_example(scenarios: &[u32], cfg: &MultiArmConfig) -> Result<(QNull, Vec<MultiArmResult>)> {
    if cfg.reps == 0 {
        return Err(Error::Config("reps must be positive".into()));
    }
    let probs: Vec<Vec<f64>> = scenarios.iter().map(|&s| multiarm_probs(s)).collect::<Result<_>>()?;
    let design = multiarm_null_design(cfg);
    let table = GittinsTable::from_config(&cfg.gittins, MULTIARM_PATIENTS + 6)?;
    let null_seed = mix_seed(mix_seed(cfg.seed, STREAM_CALIBRATION), 0);
    let null = crate::qtest::mc_q_null(&design, 0.5, &table, cfg.null_reps, null_seed)?;
    let alpha = crate::qtest::pairwise_alpha(cfg.alpha, 3, cfg.bonferroni);
    let crit = critical_value(&null, alpha)?;
    let opts = SummaryOptions {
        category: 0,
        pooled: true,
        glm: false,
    };

    let mut out = Vec::new();
    for (&s, arm_probs) in scenarios.iter().zip(probs) {
        let seed = mix_seed(mix_seed(cfg.seed, STREAM_EVALUATION), s as u64);
        let mut scn = Scenario::multi_arm(MULTIARM_PATIENTS, MULTIARM_BLOCK, 1, &arm_probs);
        scn.burn_in = MULTIARM_BURN_IN;
        scn.mc_runs = cfg.mc_runs;
        scn.gittins = cfg.gittins;
        let flgi = simulate_summaries(&scn, &table, cfg.reps, seed, &opts)?;
        let eq_scn = scn.clone().with_rule(AllocationRule::Equal);
        let equal = simulate_summaries(&eq_scn, &table, cfg.reps, mix_seed(seed, STREAM_EQUAL), &opts)?;

        let n_exp = arm_probs.len() - 1;
        let alloc_rejection = (0..n_exp)
            .map(|a| {
                let qs: Vec<u32> = flgi.iter().map(|t| t.q[a]).collect();
                rate(alloc_rejections(&qs, &null, crit, alpha, mix_seed(seed, a as u64)).into_iter())
            })
            .collect();
        let fisher_rate = |sims: &[TrialSummary], a: usize| rate(sims.iter().map(|t| rejects(t.fisher[a], alpha)));
        let best_arm = (1..arm_probs.len())
            .max_by(|&a, &b| arm_probs[a].total_cmp(&arm_probs[b]).then(b.cmp(&a)))
            .expect("at least two arms") as u32;
        let mean_on_arm_flgi = (0..arm_probs.len())
            .map(|a| flgi.iter().map(|t| t.on_arm[a] as f64).sum::<f64>() / flgi.len() as f64)
            .collect();
        out.push(MultiArmResult {
            scenario: s,
            best_arm,
            c_q: crit.c_q,
            gamma: crit.gamma,
            alpha,
            alloc_rejection,
            fisher_flgi_rejection: (0..n_exp).map(|a| fisher_rate(&flgi, a)).collect(),
            fisher_equal_rejection: (0..n_exp).map(|a| fisher_rate(&equal, a)).collect(),
            flgi_benefit: benefit_of(AllocationRule::Flgi, &flgi),
            equal_benefit: benefit_of(AllocationRule::Equal, &equal),
            mean_on_arm_flgi,
            arm_probs,
            reps: cfg.reps,
            null_reps: cfg.null_reps,
        });
    }
    Ok((null, out))
}

/// Writes rows as CSV with header `scenario_id,method,metric,value,se`.
pub fn write_rows_csv<W: Write>(rows: &[ResultRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Configuration, seeds and results of one study, written next to its CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest<C, R> {
    pub study: String,
    pub version: String,
    pub config: C,
    pub results: R,
    pub notes: Vec<String>,
}

impl<C: Serialize, R: Serialize> Manifest<C, R> {
    pub fn new(study: &str, config: C, results: R) -> Self {
        Self {
            study: study.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            results,
            notes: Vec::new(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), self)?;
        Ok(())
    }
}

/// Writes `results.csv` and `manifest.json` into `dir`.
pub fn persist<C: Serialize, R: Serialize>(dir: &Path, study: &str, config: C, results: R, rows: &[ResultRow], notes: Vec<String>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let csv_file = std::fs::File::create(dir.join("results.csv"))?;
    write_rows_csv(rows, std::io::BufWriter::new(csv_file))?;
    let mut manifest = Manifest::new(study, config, results);
    manifest.notes = notes;
    manifest.write(&dir.join("manifest.json"))
}
