//! Distribution of the forward-looking Gittins allocation probability for a
//! single biomarker category and a single block.
//!
//! A block of `B` patients is simulated from the current posterior counts:
//! each patient lands in category `z` with probability `w_z`, is allocated to
//! the arm with the largest Gittins index (ties split uniformly) and succeeds
//! with that arm's posterior mean. `X` is the number of patients in `z` and
//! `Y` the number of those allocated to the tested arm. The allocation
//! probability is `ΣY / ΣX` over `n` independent simulated blocks.
//!
//! This module provides the exact joint law of `(X, Y)`, the Monte-Carlo
//! estimator, the Gaussian-ratio CDF and density of the estimator, and the
//! mixture of those laws over the states reachable under a common success
//! probability.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::gittins::{GittinsTable, TIE_EPSILON};
use crate::null_chain::{decode, ChainContext, Integration};
use crate::numeric::{binom_pmf, normal_cdf, normal_pdf};
use crate::qtest::NullDesign;

/// Default number of simulated blocks behind one allocation probability.
pub const DEFAULT_MC_RUNS: u32 = 1000;

/// Default cap on tree nodes visited by [`exact_joint_xy`].
pub const DEFAULT_NODE_BUDGET: u64 = 10_000_000;

/// Variances of `Y - cX` below this are treated as zero.
pub const DEGENERATE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ArmCounts {
    pub successes: u32,
    pub failures: u32,
}

impl ArmCounts {
    pub const PRIOR: ArmCounts = ArmCounts {
        successes: 1,
        failures: 1,
    };

    pub fn new(successes: u32, failures: u32) -> Self {
        Self {
            successes,
            failures,
        }
    }

    pub fn total(&self) -> u32 {
        self.successes + self.failures
    }

    pub fn posterior_mean(&self) -> f64 {
        self.successes as f64 / self.total() as f64
    }

    pub fn record(&mut self, success: bool) {
        if success {
            self.successes += 1;
        } else {
            self.failures += 1;
        }
    }
}

/// Prior-inclusive success/failure counts of every arm in one category.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CategoryState {
    pub arms: Vec<ArmCounts>,
}

impl CategoryState {
    /// The uninformative `(1, 1)` prior on every arm.
    pub fn prior(n_arms: usize) -> Self {
        Self {
            arms: vec![ArmCounts::PRIOR; n_arms],
        }
    }

    /// Two-arm state `(s0, f0, s1, f1)`; arm 0 is control.
    pub fn two_arm(s0: u32, f0: u32, s1: u32, f1: u32) -> Self {
        Self {
            arms: vec![ArmCounts::new(s0, f0), ArmCounts::new(s1, f1)],
        }
    }

    pub fn n_arms(&self) -> usize {
        self.arms.len()
    }

    /// State with arms `a` and `b` exchanged; for two arms this is the mirror state.
    pub fn swapped(&self, a: usize, b: usize) -> Self {
        let mut out = self.clone();
        out.arms.swap(a, b);
        out
    }

    pub fn mirror(&self) -> Self {
        self.swapped(0, self.arms.len() - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.arms.len() < 2 {
            return Err(Error::Config("a category state needs at least two arms".into()));
        }
        if let Some(a) = self.arms.iter().position(|a| a.successes < 1 || a.failures < 1) {
            return Err(Error::Domain(format!(
                "arm {a} has counts below the (1,1) prior: {:?}",
                self.arms[a]
            )));
        }
        Ok(())
    }

    pub fn check_table(&self, table: &GittinsTable, extra: u32) -> Result<()> {
        for a in &self.arms {
            let (s, f) = (a.successes + extra, a.failures + extra);
            if a.total() + extra > table.max_count() {
                return Err(Error::Lookup {
                    s,
                    f,
                    max_count: table.max_count(),
                });
            }
        }
        Ok(())
    }

    /// Parses `s0,f0,s1,f1[,s2,f2...]`.
    pub fn parse(text: &str) -> Result<Self> {
        let nums: Vec<u32> = text
            .split(',')
            .map(|t| t.trim().parse::<u32>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Config(format!("bad state {text:?}: {e}")))?;
        if nums.len() < 4 || !nums.len().is_multiple_of(2) {
            return Err(Error::Config(format!(
                "state needs an even number (>= 4) of counts, got {text:?}"
            )));
        }
        let state = Self {
            arms: nums.chunks(2).map(|c| ArmCounts::new(c[0], c[1])).collect(),
        };
        state.validate()?;
        Ok(state)
    }
}

/// Writes the indices of the arms whose Gittins index is within
/// [`TIE_EPSILON`] of the largest one.
pub(crate) fn leaders(arms: &[ArmCounts], table: &GittinsTable, out: &mut Vec<usize>) {
    out.clear();
    let mut best = f64::NEG_INFINITY;
    let mut gis = [0.0f64; 16];
    for (i, a) in arms.iter().enumerate() {
        let g = table.value(a.successes, a.failures);
        if i < gis.len() {
            gis[i] = g;
        }
        if g > best {
            best = g;
        }
    }
    for (i, a) in arms.iter().enumerate() {
        let g = if i < gis.len() {
            gis[i]
        } else {
            table.value(a.successes, a.failures)
        };
        if best - g <= TIE_EPSILON {
            out.push(i);
        }
    }
}

/// Options for the exact tree computation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TreeConfig {
    pub block_size: u32,
    /// Probability that a patient belongs to the category.
    pub category_weight: f64,
    pub tested_arm: usize,
    pub node_budget: u64,
}

impl TreeConfig {
    pub fn new(block_size: u32, n_categories: u32) -> Self {
        Self {
            block_size,
            category_weight: 1.0 / n_categories as f64,
            tested_arm: 1,
            node_budget: DEFAULT_NODE_BUDGET,
        }
    }

    pub fn with_tested_arm(mut self, arm: usize) -> Self {
        self.tested_arm = arm;
        self
    }
}

/// Exact joint probability mass function of `(X, Y)` for one block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointXy {
    pub block_size: u32,
    pub category_weight: f64,
    /// `conditional[x][y] = P(Y = y | X = x)`.
    pub conditional: Vec<Vec<f64>>,
    /// Row-major `(B+1) x (B+1)`, entry `x * (B+1) + y`.
    pub pmf: Vec<f64>,
}

impl JointXy {
    pub fn get(&self, x: u32, y: u32) -> f64 {
        let n = self.block_size as usize + 1;
        self.pmf[x as usize * n + y as usize]
    }

    pub fn conditional(&self, y: u32, x: u32) -> f64 {
        self.conditional[x as usize][y as usize]
    }

    pub fn marginal_x(&self) -> Vec<f64> {
        (0..=self.block_size)
            .map(|x| (0..=self.block_size).map(|y| self.get(x, y)).sum())
            .collect()
    }

    pub fn total_mass(&self) -> f64 {
        self.pmf.iter().sum()
    }

    /// `(x, y, prob)` triples in row-major order.
    pub fn entries(&self) -> impl Iterator<Item = (u32, u32, f64)> + '_ {
        let b = self.block_size;
        (0..=b).flat_map(move |x| (0..=b).map(move |y| (x, y, self.get(x, y))))
    }

    /// Degenerate joint law concentrated on a single cell.
    pub fn point(block_size: u32, x: u32, y: u32) -> Self {
        let n = block_size as usize + 1;
        let mut pmf = vec![0.0; n * n];
        pmf[x as usize * n + y as usize] = 1.0;
        let mut conditional = vec![vec![0.0; n]; n];
        conditional[x as usize][y as usize] = 1.0;
        Self {
            block_size,
            category_weight: 1.0,
            conditional,
            pmf,
        }
    }
}

/// Exact joint law of `(X, Y)` from `state`.
///
/// Branches are expanded patient by patient within the category; branches
/// that reach the same posterior state are merged, since the Gittins rule
/// only depends on the state. After each in-category patient the mass is
/// grouped by the number of allocations to the tested arm, which gives
/// `P(Y = y | X = x)`, and the joint law follows from `X ~ Bin(B, w)`.
pub fn exact_joint_xy(state: &CategoryState, cfg: &TreeConfig, table: &GittinsTable) -> Result<JointXy> {
    state.validate()?;
    if cfg.tested_arm >= state.n_arms() {
        return Err(Error::Config(format!(
            "tested arm {} out of range for {} arms",
            cfg.tested_arm,
            state.n_arms()
        )));
    }
    if !(0.0..=1.0).contains(&cfg.category_weight) {
        return Err(Error::Config("category weight must be a probability".into()));
    }
    let b = cfg.block_size;
    state.check_table(table, b.saturating_sub(1))?;

    let n = b as usize + 1;
    let base = state.arms[cfg.tested_arm].total();
    let mut conditional = vec![vec![0.0; n]; n];
    conditional[0][0] = 1.0;

    let mut frontier: BTreeMap<Vec<ArmCounts>, f64> = BTreeMap::new();
    frontier.insert(state.arms.clone(), 1.0);
    let mut nodes: u64 = 1;
    let mut lead = Vec::with_capacity(state.n_arms());
    for x in 1..n {
        let mut next: BTreeMap<Vec<ArmCounts>, f64> = BTreeMap::new();
        for (arms, prob) in &frontier {
            leaders(arms, table, &mut lead);
            let share = prob / lead.len() as f64;
            for &a in &lead {
                let p = arms[a].posterior_mean();
                for (success, q) in [(true, p), (false, 1.0 - p)] {
                    if q == 0.0 {
                        continue;
                    }
                    let mut child = arms.clone();
                    child[a].record(success);
                    *next.entry(child).or_insert(0.0) += share * q;
                    nodes += 1;
                }
            }
            if nodes > cfg.node_budget {
                return Err(Error::Resource {
                    what: "exact tree enumeration",
                    used: nodes,
                    budget: cfg.node_budget,
                    hint: "use the Monte-Carlo estimator (mc_alloc_prob) instead",
                });
            }
        }
        for (arms, prob) in &next {
            let y = (arms[cfg.tested_arm].total() - base) as usize;
            conditional[x][y] += prob;
        }
        frontier = next;
    }

    let mut pmf = vec![0.0; n * n];
    for x in 0..n {
        let px = binom_pmf(x as u32, b, cfg.category_weight);
        for y in 0..=x {
            pmf[x * n + y] = px * conditional[x][y];
        }
    }
    Ok(JointXy {
        block_size: b,
        category_weight: cfg.category_weight,
        conditional,
        pmf,
    })
}

/// Probability of moving into `state` from the predecessor obtained by
/// removing outcome `success` from arm `kappa`, under the Gittins rule with
/// posterior-mean outcomes.
///
/// Zero when the predecessor's arm `kappa` is not a leader, the posterior
/// probability of the outcome divided by the number of tied leaders otherwise.
pub fn gi_transition_prob(
    state: &CategoryState,
    kappa: usize,
    success: bool,
    table: &GittinsTable,
) -> Result<f64> {
    if kappa >= state.n_arms() {
        return Err(Error::Domain(format!("arm {kappa} out of range")));
    }
    let mut pred = state.clone();
    let arm = &mut pred.arms[kappa];
    if success {
        if arm.successes < 2 {
            return Err(Error::Domain(format!(
                "no predecessor: arm {kappa} has only the prior success"
            )));
        }
        arm.successes -= 1;
    } else {
        if arm.failures < 2 {
            return Err(Error::Domain(format!(
                "no predecessor: arm {kappa} has only the prior failure"
            )));
        }
        arm.failures -= 1;
    }
    pred.validate()?;
    pred.check_table(table, 0)?;
    let mut lead = Vec::new();
    leaders(&pred.arms, table, &mut lead);
    if !lead.contains(&kappa) {
        return Ok(0.0);
    }
    let a = pred.arms[kappa];
    let p = if success {
        a.posterior_mean()
    } else {
        1.0 - a.posterior_mean()
    };
    Ok(p / lead.len() as f64)
}

/// Tallies behind one Monte-Carlo allocation probability.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocEstimate {
    pub x_total: u64,
    pub y_totals: Vec<u64>,
}

impl AllocEstimate {
    /// `ΣY_a / ΣX`, or 0 when the category never appeared.
    pub fn prob(&self, arm: usize) -> f64 {
        if self.x_total == 0 {
            0.0
        } else {
            self.y_totals[arm] as f64 / self.x_total as f64
        }
    }

    pub fn probs(&self) -> Vec<f64> {
        (0..self.y_totals.len()).map(|a| self.prob(a)).collect()
    }
}

/// Scratch buffers for repeated Monte-Carlo estimation.
#[derive(Debug, Default)]
pub(crate) struct McScratch {
    arms: Vec<ArmCounts>,
    lead: Vec<usize>,
    cum_weights: Vec<f64>,
}

/// Monte-Carlo estimate of the allocation probabilities of every category.
///
/// Runs `n_runs` independent simulated blocks of `block_size` patients, each
/// starting from `states`. Patients draw their category from `weights`.
pub(crate) fn mc_alloc_estimates_with<R: Rng>(
    states: &[CategoryState],
    block_size: u32,
    weights: &[f64],
    n_runs: u32,
    table: &GittinsTable,
    rng: &mut R,
    scratch: &mut McScratch,
) -> Vec<AllocEstimate> {
    let n_z = states.len();
    let n_arms = states[0].n_arms();
    let mut out: Vec<AllocEstimate> = (0..n_z)
        .map(|_| AllocEstimate {
            x_total: 0,
            y_totals: vec![0; n_arms],
        })
        .collect();

    scratch.cum_weights.clear();
    let mut acc = 0.0;
    for w in weights {
        acc += w;
        scratch.cum_weights.push(acc);
    }

    for _ in 0..n_runs {
        scratch.arms.clear();
        for s in states {
            scratch.arms.extend_from_slice(&s.arms);
        }
        for _ in 0..block_size {
            let z = if n_z == 1 {
                0
            } else {
                let u: f64 = rng.gen::<f64>() * acc;
                scratch
                    .cum_weights
                    .iter()
                    .position(|&c| u < c)
                    .unwrap_or(n_z - 1)
            };
            let arms = &mut scratch.arms[z * n_arms..(z + 1) * n_arms];
            leaders(arms, table, &mut scratch.lead);
            let a = if scratch.lead.len() == 1 {
                scratch.lead[0]
            } else {
                scratch.lead[rng.gen_range(0..scratch.lead.len())]
            };
            let success = rng.gen::<f64>() < arms[a].posterior_mean();
            arms[a].record(success);
            out[z].x_total += 1;
            out[z].y_totals[a] += 1;
        }
    }
    out
}

/// Monte-Carlo allocation estimates for every category and arm.
pub fn mc_alloc_estimates<R: Rng>(
    states: &[CategoryState],
    block_size: u32,
    weights: &[f64],
    n_runs: u32,
    table: &GittinsTable,
    rng: &mut R,
) -> Result<Vec<AllocEstimate>> {
    if states.is_empty() || states.len() != weights.len() {
        return Err(Error::Config(
            "need one category weight per category state".into(),
        ));
    }
    if n_runs == 0 {
        return Err(Error::Config("n_runs must be at least 1".into()));
    }
    let n_arms = states[0].n_arms();
    for s in states {
        s.validate()?;
        if s.n_arms() != n_arms {
            return Err(Error::Config("categories disagree on the number of arms".into()));
        }
        s.check_table(table, block_size)?;
    }
    if weights.iter().any(|w| *w < 0.0) || weights.iter().sum::<f64>() <= 0.0 {
        return Err(Error::Config("category weights must be non-negative with positive sum".into()));
    }
    let mut scratch = McScratch::default();
    Ok(mc_alloc_estimates_with(
        states,
        block_size,
        weights,
        n_runs,
        table,
        rng,
        &mut scratch,
    ))
}

/// Seeded Monte-Carlo allocation probability of the last arm (the
/// experimental arm in a two-arm trial) for each category.
pub fn mc_alloc_prob(
    states: &[CategoryState],
    block_size: u32,
    weights: &[f64],
    n_runs: u32,
    table: &GittinsTable,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let est = mc_alloc_estimates(states, block_size, weights, n_runs, table, &mut rng)?;
    let tested = states[0].n_arms() - 1;
    Ok(est.iter().map(|e| e.prob(tested)).collect())
}

/// Moments of `(X, Y)` for one simulated block, plus the number of
/// simulated blocks behind each allocation probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AllocMoments {
    pub mu_x: f64,
    pub mu_y: f64,
    pub var_x: f64,
    pub var_y: f64,
    pub cov: f64,
    pub n_mc: u32,
}

impl AllocMoments {
    /// `Var(Y - cX)`.
    pub fn denominator(&self, c: f64) -> f64 {
        self.var_y + c * c * self.var_x - 2.0 * c * self.cov
    }

    /// Location of the density's mode, `μ_y / μ_x`.
    pub fn mode(&self) -> f64 {
        if self.mu_x > 0.0 {
            self.mu_y / self.mu_x
        } else {
            0.0
        }
    }
}

pub fn moments_from_joint(joint: &JointXy, n_mc: u32) -> AllocMoments {
    let (mut mu_x, mut mu_y) = (0.0, 0.0);
    for (x, y, p) in joint.entries() {
        mu_x += p * x as f64;
        mu_y += p * y as f64;
    }
    let (mut var_x, mut var_y, mut cov) = (0.0, 0.0, 0.0);
    for (x, y, p) in joint.entries() {
        let dx = x as f64 - mu_x;
        let dy = y as f64 - mu_y;
        var_x += p * dx * dx;
        var_y += p * dy * dy;
        cov += p * dx * dy;
    }
    AllocMoments {
        mu_x,
        mu_y,
        var_x: var_x.max(0.0),
        var_y: var_y.max(0.0),
        cov,
        n_mc,
    }
}

/// Gaussian-ratio CDF of the allocation probability at `c`.
pub fn alloc_cdf(c: f64, m: &AllocMoments) -> Result<f64> {
    let d = m.denominator(c);
    if d <= DEGENERATE_EPS {
        return Err(Error::Degenerate { point: m.mode() });
    }
    let root_n = (m.n_mc as f64).sqrt();
    Ok(normal_cdf(root_n * (c * m.mu_x - m.mu_y) / d.sqrt()))
}

/// Density matching [`alloc_cdf`].
pub fn alloc_pdf(c: f64, m: &AllocMoments) -> Result<f64> {
    let d = m.denominator(c);
    if d <= DEGENERATE_EPS {
        return Err(Error::Degenerate { point: m.mode() });
    }
    let root_n = (m.n_mc as f64).sqrt();
    let num = m.mu_x * m.var_y + c * m.mu_y * m.var_x - m.mu_y * m.cov - c * m.cov * m.mu_x;
    let z = root_n * (c * m.mu_x - m.mu_y) / d.sqrt();
    Ok(root_n * num / d.powf(1.5) * normal_pdf(z))
}

/// Law of the allocation probability on `[0, 1]`: either the Gaussian-ratio
/// approximation with its tails clipped onto the endpoints, or a point mass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum AllocLaw {
    Gaussian(AllocMoments),
    PointMass(f64),
}

impl AllocLaw {
    pub fn from_moments(m: AllocMoments) -> Self {
        if m.mu_x <= 0.0 {
            return AllocLaw::PointMass(0.0);
        }
        if m.denominator(m.mode()) <= DEGENERATE_EPS {
            AllocLaw::PointMass(m.mode().clamp(0.0, 1.0))
        } else {
            AllocLaw::Gaussian(m)
        }
    }

    /// `P(p <= c)`.
    pub fn cdf(&self, c: f64) -> f64 {
        if c < 0.0 {
            return 0.0;
        }
        if c >= 1.0 {
            return 1.0;
        }
        match self {
            AllocLaw::PointMass(p) => {
                if c >= *p {
                    1.0
                } else {
                    0.0
                }
            }
            AllocLaw::Gaussian(m) => match alloc_cdf(c, m) {
                Ok(v) => v,
                Err(_) => {
                    if c >= m.mode() {
                        1.0
                    } else {
                        0.0
                    }
                }
            },
        }
    }

    /// Density on the open interval `(0, 1)`; zero for point masses.
    pub fn pdf(&self, c: f64) -> f64 {
        match self {
            AllocLaw::PointMass(_) => 0.0,
            AllocLaw::Gaussian(m) => alloc_pdf(c, m).unwrap_or(0.0),
        }
    }

    /// Mass clipped onto `c = 0`.
    pub fn mass_at_zero(&self) -> f64 {
        match self {
            AllocLaw::PointMass(p) => f64::from(u8::from(*p <= 0.0)),
            AllocLaw::Gaussian(_) => self.cdf(0.0),
        }
    }

    /// Mass clipped onto `c = 1`.
    pub fn mass_at_one(&self) -> f64 {
        match self {
            AllocLaw::PointMass(p) => f64::from(u8::from(*p >= 1.0)),
            AllocLaw::Gaussian(m) => match alloc_cdf(1.0, m) {
                Ok(v) => 1.0 - v,
                Err(_) => f64::from(u8::from(m.mode() >= 1.0)),
            },
        }
    }

    /// Rough spread used to place quadrature breakpoints.
    pub(crate) fn scale(&self) -> f64 {
        match self {
            AllocLaw::PointMass(_) => 0.0,
            AllocLaw::Gaussian(m) => {
                (m.denominator(m.mode()).max(0.0) / m.n_mc as f64).sqrt() / m.mu_x
            }
        }
    }
}

/// Mixture of per-state allocation-probability laws at the start of a block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureNull {
    pub block: u32,
    /// `(P(ζ), moments of the state's law, state)`.
    pub components: Vec<MixtureComponent>,
    pub point_mass_at_0: f64,
    pub point_mass_at_1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub state: CategoryState,
    pub weight: f64,
    pub moments: AllocMoments,
}

impl MixtureNull {
    pub fn total_mass(&self) -> f64 {
        self.components.iter().map(|c| c.weight).sum::<f64>()
            + self.point_mass_at_0
            + self.point_mass_at_1
    }

    /// `g`'s cumulative distribution, point masses included.
    pub fn cdf(&self, c: f64) -> f64 {
        if c < 0.0 {
            return 0.0;
        }
        let mut total = self.point_mass_at_0;
        if c >= 1.0 {
            total += self.point_mass_at_1;
        }
        for comp in &self.components {
            total += comp.weight * AllocLaw::from_moments(comp.moments).cdf(c);
        }
        total.min(1.0)
    }

    /// Mixture density on `(0, 1)`, point masses excluded.
    pub fn pdf(&self, c: f64) -> f64 {
        self.components
            .iter()
            .map(|comp| comp.weight * AllocLaw::from_moments(comp.moments).pdf(c))
            .sum()
    }
}

/// Mixture null of the allocation probability at the start of block `k`
/// (1-based) when every arm succeeds with probability `p_common`.
pub fn mixture_null(
    k: u32,
    design: &NullDesign,
    table: &GittinsTable,
    p_common: f64,
) -> Result<MixtureNull> {
    design.validate()?;
    if k < 1 || k > design.n_blocks {
        return Err(Error::Config(format!(
            "block {k} outside 1..={}",
            design.n_blocks
        )));
    }
    let mut ctx = ChainContext::new(design, table, p_common, Integration::Quadrature)?;
    ctx.check_budget((k - 1) * design.block_size, "mixture null state enumeration")?;
    let states = ctx.state_distribution(k - 1)?;
    let mut out = MixtureNull {
        block: k,
        components: Vec::new(),
        point_mass_at_0: 0.0,
        point_mass_at_1: 0.0,
    };
    for (key, weight) in states {
        let info = ctx.state_info(key)?;
        match info.law {
            AllocLaw::PointMass(p) if p <= 0.0 => out.point_mass_at_0 += weight,
            AllocLaw::PointMass(p) if p >= 1.0 => out.point_mass_at_1 += weight,
            _ => out.components.push(MixtureComponent {
                state: decode(key),
                weight,
                moments: info.moments,
            }),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::OnceLock;

    fn table() -> &'static GittinsTable {
        static T: OnceLock<GittinsTable> = OnceLock::new();
        T.get_or_init(|| GittinsTable::build(0.99, 300, 24).unwrap())
    }

    #[test]
    fn prior_block_of_two() {
        let j = exact_joint_xy(&CategoryState::prior(2), &TreeConfig::new(2, 1), table()).unwrap();
        assert_eq!(j.conditional(2, 2), 0.25);
        assert_eq!(j.conditional(1, 2), 0.5);
        assert_eq!(j.conditional(0, 2), 0.25);
        assert_eq!(j.get(2, 2), 0.25);
    }

    #[test]
    fn joint_scales_with_category_count() {
        for nz in 1..=4u32 {
            let j = exact_joint_xy(&CategoryState::prior(2), &TreeConfig::new(2, nz), table())
                .unwrap();
            let expect = 1.0 / (4.0 * (nz * nz) as f64);
            assert!((j.get(2, 2) - expect).abs() < 1e-15);
            assert!((j.total_mass() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dominated_state_never_allocates_experimental() {
        let j = exact_joint_xy(&CategoryState::two_arm(5, 1, 1, 5), &TreeConfig::new(2, 1), table())
            .unwrap();
        assert_eq!(j.conditional(0, 2), 1.0);
        let p = mc_alloc_prob(&[CategoryState::two_arm(5, 1, 1, 5)], 2, &[1.0], 500, table(), 3)
            .unwrap();
        assert_eq!(p, vec![0.0]);
    }

    #[test]
    fn node_budget_is_enforced() {
        let mut cfg = TreeConfig::new(6, 1);
        cfg.node_budget = 10;
        match exact_joint_xy(&CategoryState::prior(2), &cfg, table()) {
            Err(Error::Resource { .. }) => {}
            other => panic!("expected resource error, got {other:?}"),
        }
    }

    #[test]
    fn transition_probabilities() {
        let t = table();
        let p = gi_transition_prob(&CategoryState::two_arm(1, 1, 2, 1), 1, true, t).unwrap();
        assert_eq!(p, 0.25);
        let p = gi_transition_prob(&CategoryState::two_arm(2, 1, 1, 1), 0, true, t).unwrap();
        assert_eq!(p, 0.25);
        // predecessor (2,1,1,1): arm 1 loses the comparison
        let p = gi_transition_prob(&CategoryState::two_arm(2, 1, 2, 1), 1, true, t).unwrap();
        assert_eq!(p, 0.0);
        assert!(matches!(
            gi_transition_prob(&CategoryState::prior(2), 1, true, t),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn degenerate_moments() {
        let m = moments_from_joint(&JointXy::point(3, 3, 0), 1000);
        assert_eq!((m.mu_x, m.mu_y, m.var_x, m.var_y, m.cov), (3.0, 0.0, 0.0, 0.0, 0.0));
        assert!(matches!(alloc_cdf(0.2, &m), Err(Error::Degenerate { .. })));
        let law = AllocLaw::from_moments(m);
        assert_eq!(law, AllocLaw::PointMass(0.0));
        assert_eq!(law.cdf(0.0), 1.0);
    }

    #[test]
    fn prior_moments() {
        let j = exact_joint_xy(&CategoryState::prior(2), &TreeConfig::new(2, 1), table()).unwrap();
        let m = moments_from_joint(&j, 1000);
        assert_eq!(m.mu_x, 2.0);
        assert_eq!(m.var_x, 0.0);
        assert_eq!(m.mu_y, 1.0);
        assert!((alloc_cdf(0.5, &m).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn parse_state() {
        assert_eq!(
            CategoryState::parse("1,2,3,4").unwrap(),
            CategoryState::two_arm(1, 2, 3, 4)
        );
        assert!(CategoryState::parse("1,2,3").is_err());
        assert!(CategoryState::parse("0,1,1,1").is_err());
    }

    #[test]
    fn empty_category_gives_zero() {
        let e = AllocEstimate {
            x_total: 0,
            y_totals: vec![0, 0],
        };
        assert_eq!(e.prob(1), 0.0);
    }
}
