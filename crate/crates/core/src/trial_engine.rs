//! Block-wise simulation of a biomarker-stratified trial.
//!
//! At the start of every block each category gets a vector of allocation
//! probabilities, either from the forward-looking Gittins estimate or the
//! fixed `1/A`. Patients then arrive one at a time, draw a category, are
//! randomized with that category's probabilities and respond with the true
//! success probability of their arm and category.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alloc_dist::{mc_alloc_estimates_with, ArmCounts, CategoryState, McScratch, DEFAULT_MC_RUNS};
use crate::error::{Error, Result};
use crate::gittins::{GittinsConfig, GittinsTable};
use crate::numeric::mix_seed;
use crate::qtest::{default_burn_in, default_mc_runs, DEFAULT_BURN_IN};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllocationRule {
    #[serde(alias = "FLGI")]
    Flgi,
    #[serde(alias = "EQUAL", alias = "Equal")]
    Equal,
}

/// Configuration of one simulated trial. `success_probs[a][z]` is the true
/// success probability of arm `a` in category `z`; arm 0 is the control.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub n_patients: u32,
    pub block_size: u32,
    pub n_categories: u32,
    #[serde(default = "two")]
    pub n_arms: u32,
    pub success_probs: Vec<Vec<f64>>,
    #[serde(default = "flgi")]
    pub allocation_rule: AllocationRule,
    #[serde(default = "default_mc_runs")]
    pub mc_runs: u32,
    #[serde(default)]
    pub gittins: GittinsConfig,
    #[serde(default = "default_burn_in")]
    pub burn_in: u32,
    #[serde(default)]
    pub category_weights: Option<Vec<f64>>,
    #[serde(default)]
    pub seed: u64,
    /// Estimate the recorded probabilities with a second, independent
    /// simulation instead of reusing the ones that drove randomization.
    #[serde(default)]
    pub recompute_inference_probs: bool,
}

fn two() -> u32 {
    2
}
fn flgi() -> AllocationRule {
    AllocationRule::Flgi
}

impl Scenario {
    /// Two-arm scenario with the same success probabilities in every category.
    pub fn two_arm(n_patients: u32, block_size: u32, n_categories: u32, p_control: f64, p_experimental: f64) -> Self {
        let n = n_categories as usize;
        Self {
            n_patients,
            block_size,
            n_categories,
            n_arms: 2,
            success_probs: vec![vec![p_control; n], vec![p_experimental; n]],
            allocation_rule: AllocationRule::Flgi,
            mc_runs: DEFAULT_MC_RUNS,
            gittins: GittinsConfig::default(),
            burn_in: DEFAULT_BURN_IN,
            category_weights: None,
            seed: 0,
            recompute_inference_probs: false,
        }
    }

    /// Scenario whose arms have the given success probabilities in every category.
    pub fn multi_arm(n_patients: u32, block_size: u32, n_categories: u32, arm_probs: &[f64]) -> Self {
        let mut s = Self::two_arm(n_patients, block_size, n_categories, 0.5, 0.5);
        s.n_arms = arm_probs.len() as u32;
        s.success_probs = arm_probs.iter().map(|&p| vec![p; n_categories as usize]).collect();
        s
    }

    pub fn with_rule(mut self, rule: AllocationRule) -> Self {
        self.allocation_rule = rule;
        self
    }

    pub fn n_blocks(&self) -> u32 {
        self.n_patients / self.block_size
    }

    /// Smallest Gittins table that covers every lookup a trial can make.
    pub fn required_max_count(&self) -> u32 {
        self.n_patients + 2
    }

    pub fn default_table_size(&self) -> u32 {
        self.n_patients + 6
    }

    pub fn build_table(&self) -> Result<GittinsTable> {
        GittinsTable::from_config(&self.gittins, self.default_table_size())
    }

    pub fn weights(&self) -> Vec<f64> {
        match &self.category_weights {
            Some(w) => {
                let total: f64 = w.iter().sum();
                w.iter().map(|v| v / total).collect()
            }
            None => vec![1.0 / self.n_categories as f64; self.n_categories as usize],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.block_size == 0 || self.n_patients == 0 {
            return bad("n_patients and block_size must be positive".into());
        }
        if !self.n_patients.is_multiple_of(self.block_size) {
            return bad(format!(
                "n_patients {} is not a multiple of block_size {}",
                self.n_patients, self.block_size
            ));
        }
        if self.n_categories == 0 || self.n_arms < 2 {
            return bad("need at least one category and two arms".into());
        }
        if self.success_probs.len() != self.n_arms as usize
            || self.success_probs.iter().any(|r| r.len() != self.n_categories as usize)
        {
            return bad(format!(
                "success_probs must be {} arms x {} categories",
                self.n_arms, self.n_categories
            ));
        }
        if self.success_probs.iter().flatten().any(|p| !(0.0..=1.0).contains(p)) {
            return bad("success probabilities must lie in [0, 1]".into());
        }
        if self.burn_in >= self.n_blocks() {
            return bad(format!(
                "burn_in {} must be below the number of blocks {}",
                self.burn_in,
                self.n_blocks()
            ));
        }
        if self.mc_runs == 0 {
            return bad("mc_runs must be positive".into());
        }
        if let Some(w) = &self.category_weights {
            if w.len() != self.n_categories as usize || w.iter().any(|v| !(*v >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
                return bad("category_weights must be one non-negative weight per category".into());
            }
        }
        if !(0.0..1.0).contains(&self.gittins.discount) || self.gittins.horizon == 0 {
            return bad("invalid Gittins configuration".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub block: u32,
    pub category: u32,
    pub arm: u32,
    pub success: bool,
}

/// Everything a trial produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub n_patients: u32,
    pub block_size: u32,
    pub n_categories: u32,
    pub n_arms: u32,
    pub burn_in: u32,
    /// `alloc_probs[k][z][a]`: probability recorded at the start of block `k`.
    pub alloc_probs: Vec<Vec<Vec<f64>>>,
    pub patients: Vec<PatientRecord>,
    pub final_states: Vec<CategoryState>,
    /// `tallies[z][a]`: observed successes and failures, prior excluded.
    pub tallies: Vec<Vec<ArmCounts>>,
}

impl TrialRecord {
    pub fn n_blocks(&self) -> usize {
        self.alloc_probs.len()
    }

    /// Per-block allocation probabilities of `arm` in category `z`.
    pub fn alloc_series(&self, z: usize, arm: usize) -> Vec<f64> {
        self.alloc_probs.iter().map(|b| b[z][arm]).collect()
    }

    pub fn total_successes(&self) -> u32 {
        self.patients.iter().filter(|p| p.success).count() as u32
    }

    pub fn arm_counts(&self) -> Vec<u32> {
        let mut c = vec![0; self.n_arms as usize];
        for p in &self.patients {
            c[p.arm as usize] += 1;
        }
        c
    }

    /// Fraction of patients given an arm with the highest true success
    /// probability in their category.
    pub fn fraction_on_best(&self, success_probs: &[Vec<f64>]) -> f64 {
        let best: Vec<f64> = (0..self.n_categories as usize)
            .map(|z| success_probs.iter().map(|r| r[z]).fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let on_best = self
            .patients
            .iter()
            .filter(|p| success_probs[p.arm as usize][p.category as usize] >= best[p.category as usize])
            .count();
        on_best as f64 / self.patients.len() as f64
    }

    /// Successes and failures of `arm`, in one category or pooled.
    pub fn arm_tally(&self, category: Option<usize>, arm: usize) -> ArmCounts {
        let zs: Vec<usize> = match category {
            Some(z) => vec![z],
            None => (0..self.n_categories as usize).collect(),
        };
        zs.iter().fold(ArmCounts::new(0, 0), |acc, &z| {
            let t = self.tallies[z][arm];
            ArmCounts::new(acc.successes + t.successes, acc.failures + t.failures)
        })
    }

    /// Rebuilds the final states from the prior and the patient log.
    pub fn replay_states(&self) -> Vec<CategoryState> {
        let mut states = vec![CategoryState::prior(self.n_arms as usize); self.n_categories as usize];
        for p in &self.patients {
            states[p.category as usize].arms[p.arm as usize].record(p.success);
        }
        states
    }
}

fn categorical<R: Rng>(rng: &mut R, probs: &[f64]) -> usize {
    let total: f64 = probs.iter().sum();
    let u = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// Simulates one trial. Deterministic given `seed`.
pub fn run_trial(scn: &Scenario, table: &GittinsTable, seed: u64) -> Result<TrialRecord> {
    check_inputs(scn, table)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scratch = McScratch::default();
    Ok(simulate(scn, table, &mut rng, &mut scratch))
}

fn check_inputs(scn: &Scenario, table: &GittinsTable) -> Result<()> {
    scn.validate()?;
    if scn.allocation_rule == AllocationRule::Flgi && table.max_count() < scn.required_max_count() {
        return Err(Error::Config(format!(
            "Gittins table covers s+f <= {}, the trial needs {}",
            table.max_count(),
            scn.required_max_count()
        )));
    }
    Ok(())
}

fn flgi_probs<R: Rng>(
    scn: &Scenario,
    states: &[CategoryState],
    weights: &[f64],
    table: &GittinsTable,
    rng: &mut R,
    scratch: &mut McScratch,
) -> Vec<Vec<f64>> {
    let uniform = 1.0 / scn.n_arms as f64;
    mc_alloc_estimates_with(states, scn.block_size, weights, scn.mc_runs, table, rng, scratch)
        .iter()
        .map(|e| {
            if e.x_total == 0 {
                vec![uniform; scn.n_arms as usize]
            } else {
                e.probs()
            }
        })
        .collect()
}

fn simulate<R: Rng>(scn: &Scenario, table: &GittinsTable, rng: &mut R, scratch: &mut McScratch) -> TrialRecord {
    let (n_z, n_a) = (scn.n_categories as usize, scn.n_arms as usize);
    let weights = scn.weights();
    let mut states = vec![CategoryState::prior(n_a); n_z];
    let mut tallies = vec![vec![ArmCounts::new(0, 0); n_a]; n_z];
    let mut patients = Vec::with_capacity(scn.n_patients as usize);
    let mut alloc_probs = Vec::with_capacity(scn.n_blocks() as usize);

    for block in 0..scn.n_blocks() {
        let probs = match scn.allocation_rule {
            AllocationRule::Equal => vec![vec![1.0 / n_a as f64; n_a]; n_z],
            AllocationRule::Flgi => flgi_probs(scn, &states, &weights, table, rng, scratch),
        };
        let recorded = if scn.recompute_inference_probs && scn.allocation_rule == AllocationRule::Flgi {
            flgi_probs(scn, &states, &weights, table, rng, scratch)
        } else {
            probs.clone()
        };
        for _ in 0..scn.block_size {
            let z = if n_z == 1 { 0 } else { categorical(rng, &weights) };
            let arm = categorical(rng, &probs[z]);
            let success = rng.gen::<f64>() < scn.success_probs[arm][z];
            states[z].arms[arm].record(success);
            tallies[z][arm].record(success);
            patients.push(PatientRecord {
                block,
                category: z as u32,
                arm: arm as u32,
                success,
            });
        }
        alloc_probs.push(recorded);
    }

    TrialRecord {
        n_patients: scn.n_patients,
        block_size: scn.block_size,
        n_categories: scn.n_categories,
        n_arms: scn.n_arms,
        burn_in: scn.burn_in,
        alloc_probs,
        patients,
        final_states: states,
        tallies,
    }
}

/// Lazily simulated replications; replication `i` uses seed
/// `mix_seed(seed, i)`.
pub fn replicate<'a>(
    scn: &'a Scenario,
    table: &'a GittinsTable,
    reps: u64,
    seed: u64,
) -> impl Iterator<Item = Result<TrialRecord>> + 'a {
    (0..reps).map(move |i| run_trial(scn, table, mix_seed(seed, i)))
}

/// Runs `reps` replications in parallel and maps each record through `f`.
/// Results come back in replication order, so they do not depend on the
/// thread count.
pub fn replicate_map<T, F>(scn: &Scenario, table: &GittinsTable, reps: u64, seed: u64, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&TrialRecord) -> T + Sync,
{
    if reps == 0 {
        return Err(Error::Config("reps must be at least 1".into()));
    }
    check_inputs(scn, table)?;
    Ok((0..reps)
        .into_par_iter()
        .map_init(McScratch::default, |scratch, i| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, i));
            f(&simulate(scn, table, &mut rng, scratch))
        })
        .collect())
}
