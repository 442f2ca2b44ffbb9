//! Forward recursion over the posterior states of one category when every
//! arm succeeds with the same probability.
//!
//! At the start of each block the allocation probability `c` is drawn from
//! the law of the current state (see [`AllocLaw`]). Each of the `B` patients
//! falls in the category with probability `w`, joins the experimental arm
//! with probability `c` and succeeds with probability `p_common`. Because the
//! next state depends on `c` only through the polynomial `c^y (1-c)^(x-y)`,
//! a region of `c` enters the recursion through the integrals
//! `∫_R c^y (1-c)^(x-y) dF(c)` for `0 <= y <= x <= B`.

use std::collections::{BTreeMap, HashMap};

use crate::alloc_dist::{exact_joint_xy, moments_from_joint, AllocLaw, AllocMoments, ArmCounts, CategoryState, TreeConfig};
use crate::error::{Error, Result};
use crate::gittins::GittinsTable;
use crate::numeric::{adaptive_simpson, binom_coeff, binom_pmf};
use crate::qtest::NullDesign;

/// Absolute tolerance of each adaptive Simpson piece.
pub(crate) const QUADRATURE_TOL: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Integration {
    Quadrature,
    /// Evaluate the transition at the conditional mean of `c` in each region.
    ExpectationApprox,
}

#[derive(Debug, Clone)]
pub(crate) struct StateInfo {
    pub law: AllocLaw,
    pub moments: AllocMoments,
    /// Region `c <= θ` (α = 0).
    pub below: Vec<f64>,
    /// Region `c > θ` (α = 1).
    pub above: Vec<f64>,
}

pub(crate) struct ChainContext<'a> {
    design: &'a NullDesign,
    table: &'a GittinsTable,
    mode: Integration,
    weight: f64,
    /// `x_weights[x] = P(X = x)`.
    x_weights: Vec<f64>,
    /// `outcome[n][k] = P(k successes out of n)`.
    outcome: Vec<Vec<f64>>,
    index: HashMap<u64, usize>,
    infos: Vec<StateInfo>,
}

#[inline]
fn tri(x: usize, y: usize) -> usize {
    x * (x + 1) / 2 + y
}

pub(crate) fn encode(arms: &[ArmCounts]) -> u64 {
    debug_assert_eq!(arms.len(), 2);
    ((arms[0].successes as u64) << 48)
        | ((arms[0].failures as u64) << 32)
        | ((arms[1].successes as u64) << 16)
        | arms[1].failures as u64
}

pub(crate) fn decode(key: u64) -> CategoryState {
    let part = |shift: u32| ((key >> shift) & 0xFFFF) as u32;
    CategoryState::two_arm(part(48), part(32), part(16), part(0))
}

impl<'a> ChainContext<'a> {
    pub fn new(
        design: &'a NullDesign,
        table: &'a GittinsTable,
        p_common: f64,
        mode: Integration,
    ) -> Result<Self> {
        design.validate()?;
        if design.n_arms != 2 {
            return Err(Error::Config(
                "exact null recursion supports two arms only; use the Monte-Carlo null".into(),
            ));
        }
        if !(0.0..=1.0).contains(&p_common) {
            return Err(Error::Config(format!("p_common {p_common} is not a probability")));
        }
        let need = 2 + design.n_blocks * design.block_size + design.block_size;
        if table.max_count() < need {
            return Err(Error::Config(format!(
                "Gittins table covers s+f <= {}, the null recursion needs {need}",
                table.max_count()
            )));
        }
        if need >= u16::MAX as u32 {
            return Err(Error::Config("trial too long for exact recursion".into()));
        }
        let b = design.block_size;
        let weight = design.category_weight(design.category);
        let x_weights = (0..=b).map(|x| binom_pmf(x, b, weight)).collect();
        let outcome = (0..=b)
            .map(|n| (0..=n).map(|k| binom_pmf(k, n, p_common)).collect())
            .collect();
        Ok(Self {
            design,
            table,
            mode,
            weight,
            x_weights,
            outcome,
            index: HashMap::new(),
            infos: Vec::new(),
        })
    }

    pub fn check_budget(&self, patients: u32, what: &'static str) -> Result<()> {
        let budget = self.design.exact_max_patients(self.mode);
        if patients > budget {
            return Err(Error::Resource {
                what,
                used: patients as u64,
                budget: budget as u64,
                hint: "estimate the null by Monte Carlo (mc_q_null) instead",
            });
        }
        Ok(())
    }

    pub fn state_info(&mut self, key: u64) -> Result<&StateInfo> {
        let i = self.info_index(key)?;
        Ok(&self.infos[i])
    }

    fn info_index(&mut self, key: u64) -> Result<usize> {
        if let Some(&i) = self.index.get(&key) {
            return Ok(i);
        }
        let info = self.compute_info(key)?;
        self.infos.push(info);
        let i = self.infos.len() - 1;
        self.index.insert(key, i);
        Ok(i)
    }

    fn compute_info(&self, key: u64) -> Result<StateInfo> {
        let state = decode(key);
        let cfg = TreeConfig {
            block_size: self.design.block_size,
            category_weight: self.weight,
            tested_arm: 1,
            node_budget: crate::alloc_dist::DEFAULT_NODE_BUDGET,
        };
        let joint = exact_joint_xy(&state, &cfg, self.table)?;
        let moments = moments_from_joint(&joint, self.design.mc_runs);
        let law = AllocLaw::from_moments(moments);
        let (below, above) = region_terms(&law, self.design.block_size, self.design.threshold, self.mode);
        Ok(StateInfo {
            law,
            moments,
            below,
            above,
        })
    }

    /// Calls `emit(next_key, prob)` for every successor of `key` given the
    /// region integrals `terms`.
    fn transitions(&self, key: u64, terms: &[f64], mut emit: impl FnMut(u64, f64)) {
        let b = self.design.block_size as usize;
        let s = decode(key);
        let (a0, a1) = (s.arms[0], s.arms[1]);
        for x in 0..=b {
            let px = self.x_weights[x];
            if px == 0.0 {
                continue;
            }
            for y in 0..=x {
                let base = px * binom_coeff(x as u32, y as u32) * terms[tri(x, y)];
                if base == 0.0 {
                    continue;
                }
                let (n0, n1) = (x - y, y);
                for k0 in 0..=n0 {
                    let p0 = self.outcome[n0][k0];
                    for k1 in 0..=n1 {
                        let p = base * p0 * self.outcome[n1][k1];
                        if p == 0.0 {
                            continue;
                        }
                        let next = [
                            ArmCounts::new(a0.successes + k0 as u32, a0.failures + (n0 - k0) as u32),
                            ArmCounts::new(a1.successes + k1 as u32, a1.failures + (n1 - k1) as u32),
                        ];
                        emit(encode(&next), p);
                    }
                }
            }
        }
    }

    /// Distribution over states after `blocks` blocks, sorted by key.
    pub fn state_distribution(&mut self, blocks: u32) -> Result<Vec<(u64, f64)>> {
        let mut dist: BTreeMap<u64, f64> = BTreeMap::new();
        dist.insert(encode(&CategoryState::prior(2).arms), 1.0);
        for _ in 0..blocks {
            let mut next = BTreeMap::new();
            for (&key, &prob) in &dist {
                let i = self.info_index(key)?;
                let info = &self.infos[i];
                let terms: Vec<f64> = info.below.iter().zip(&info.above).map(|(a, b)| a + b).collect();
                self.transitions(key, &terms, |k, p| *next.entry(k).or_insert(0.0) += prob * p);
            }
            dist = next;
        }
        Ok(dist.into_iter().collect())
    }

    /// Law of `Q`, the number of counted blocks whose allocation probability
    /// exceeds the threshold.
    pub fn q_distribution(&mut self) -> Result<Vec<f64>> {
        let k_total = self.design.n_blocks;
        let burn_in = self.design.burn_in;
        let k_eff = (k_total - burn_in) as usize;
        let mut pmf = vec![0.0; k_eff + 1];
        let mut dist: BTreeMap<(u64, u32), f64> = BTreeMap::new();
        dist.insert((encode(&CategoryState::prior(2).arms), 0), 1.0);
        for k in 1..=k_total {
            let counted = k > burn_in;
            let last = k == k_total;
            let mut next = BTreeMap::new();
            for (&(key, q), &prob) in &dist {
                let i = self.info_index(key)?;
                let info = &self.infos[i];
                for (terms, alpha) in [(&info.below, 0u32), (&info.above, 1u32)] {
                    let mass = terms[0];
                    if mass == 0.0 {
                        continue;
                    }
                    let q_next = q + if counted { alpha } else { 0 };
                    if last {
                        pmf[q_next as usize] += prob * mass;
                    } else {
                        self.transitions(key, terms, |kk, p| {
                            *next.entry((kk, q_next)).or_insert(0.0) += prob * p
                        });
                    }
                }
            }
            dist = next;
        }
        Ok(pmf)
    }
}

/// Region integrals `∫_R c^y (1-c)^(x-y) dF(c)` for `c <= θ` and `c > θ`,
/// indexed by `tri(x, y)`.
pub(crate) fn region_terms(law: &AllocLaw, b: u32, theta: f64, mode: Integration) -> (Vec<f64>, Vec<f64>) {
    let b = b as usize;
    let len = tri(b, b) + 1;
    let mut below = vec![0.0; len];
    let mut above = vec![0.0; len];
    match *law {
        AllocLaw::PointMass(r) => {
            let target = if r > theta { &mut above } else { &mut below };
            for x in 0..=b {
                for y in 0..=x {
                    target[tri(x, y)] = r.powi(y as i32) * (1.0 - r).powi((x - y) as i32);
                }
            }
        }
        AllocLaw::Gaussian(_) => {
            let integrand = |c: f64, out: &mut [f64]| {
                let dens = law.pdf(c);
                let mut i = 0;
                for x in 0..=b {
                    for y in 0..=x {
                        out[i] = dens * c.powi(y as i32) * (1.0 - c).powi((x - y) as i32);
                        i += 1;
                    }
                }
            };
            let mode_at = match law {
                AllocLaw::Gaussian(m) => m.mode(),
                _ => unreachable!(),
            };
            let scale = law.scale();
            let mut cuts: Vec<f64> = [-16.0, -8.0, -4.0, -2.0, -1.0, 0.0, 1.0, 2.0, 4.0, 8.0, 16.0]
                .iter()
                .map(|k| mode_at + k * scale)
                .collect();
            cuts.push(theta);
            let integrate = |lo: f64, hi: f64, acc: &mut [f64]| {
                let mut pts: Vec<f64> = cuts.iter().copied().filter(|&c| c > lo && c < hi).collect();
                pts.push(lo);
                pts.push(hi);
                pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
                for w in pts.windows(2) {
                    adaptive_simpson(&integrand, w[0], w[1], QUADRATURE_TOL, acc);
                }
            };
            integrate(0.0, theta, &mut below);
            integrate(theta, 1.0, &mut above);
            // endpoint masses from the clipped tails
            let at_zero = law.mass_at_zero();
            let at_one = law.mass_at_one();
            for x in 0..=b {
                below[tri(x, 0)] += at_zero;
                above[tri(x, x)] += at_one;
            }
            let mass_below = law.cdf(theta);
            let mass_above = 1.0 - mass_below;
            normalize(&mut below, b, mass_below);
            normalize(&mut above, b, mass_above);
        }
    }
    if mode == Integration::ExpectationApprox {
        for terms in [&mut below, &mut above] {
            let mass = terms[tri(0, 0)];
            if mass <= 0.0 {
                continue;
            }
            let mean = terms[tri(1, 1)] / mass;
            for x in 2..=b {
                for y in 0..=x {
                    terms[tri(x, y)] = mass * mean.powi(y as i32) * (1.0 - mean).powi((x - y) as i32);
                }
            }
        }
    }
    (below, above)
}

/// Rescales each row so that `Σ_y C(x,y) I[x][y]` equals the region mass.
fn normalize(terms: &mut [f64], b: usize, mass: f64) {
    for x in 0..=b {
        let row: f64 = (0..=x)
            .map(|y| binom_coeff(x as u32, y as u32) * terms[tri(x, y)])
            .sum();
        if row > 0.0 {
            let scale = mass / row;
            for y in 0..=x {
                terms[tri(x, y)] *= scale;
            }
        } else {
            for y in 0..=x {
                terms[tri(x, y)] = 0.0;
            }
        }
    }
}
