//! Independent reference computations checked against the library.

use std::collections::HashMap;

use flgi_core::alloc_dist::{
    exact_joint_xy, gi_transition_prob, mc_alloc_estimates, mixture_null, moments_from_joint, AllocLaw, CategoryState,
    TreeConfig,
};
use flgi_core::comparators::{fisher_one_sided, glm_wald, Table2x2};
use flgi_core::gittins::GittinsTable;
use flgi_core::qtest::{exact_q_null, ExactMode, NullDesign};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Gittins index by bisection on the retirement reward with a full 2-D value
/// table over added successes and failures.
fn gittins_oracle(s: u32, f: u32, discount: f64, horizon: usize) -> f64 {
    let pull_value = |lambda: f64| -> f64 {
        let retire = lambda / (1.0 - discount);
        let mean = |i: usize, j: usize| (s as f64 + i as f64) / ((s + f) as f64 + (i + j) as f64);
        // v[i][j] for i + j == depth
        let mut v: Vec<Vec<f64>> = vec![vec![0.0; horizon + 1]; horizon + 1];
        for i in 0..=horizon {
            let j = horizon - i;
            v[i][j] = retire.max(mean(i, j) / (1.0 - discount));
        }
        let mut root = 0.0;
        for depth in (0..horizon).rev() {
            for i in 0..=depth {
                let j = depth - i;
                let p = mean(i, j);
                let pull = p + discount * (p * v[i + 1][j] + (1.0 - p) * v[i][j + 1]);
                v[i][j] = pull.max(retire);
                if depth == 0 {
                    root = pull;
                }
            }
        }
        root - retire
    };
    let (mut lo, mut hi) = (s as f64 / (s + f) as f64, 1.0);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if pull_value(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[test]
fn gittins_matches_bisection_oracle() {
    let table = GittinsTable::build(0.99, 300, 7).unwrap();
    for (s, f, gi) in table.entries() {
        let oracle = gittins_oracle(s, f, 0.99, 300);
        assert!((gi - oracle).abs() < 2e-6, "GI({s},{f}) = {gi}, oracle {oracle}");
    }
    let table = GittinsTable::build(0.8, 60, 10).unwrap();
    for (s, f, gi) in table.entries() {
        let oracle = gittins_oracle(s, f, 0.8, 60);
        assert!((gi - oracle).abs() < 2e-6, "GI({s},{f}) = {gi}, oracle {oracle}");
    }
}

#[test]
fn gittins_truncation_converges() {
    let short = GittinsTable::build(0.99, 300, 30).unwrap();
    let long = GittinsTable::build(0.99, 450, 30).unwrap();
    for ((s, f, a), (_, _, b)) in short.entries().zip(long.entries()) {
        assert!((a - b).abs() < 1e-4, "GI({s},{f}) moved from {a} to {b}");
    }
}

/// `P(Y = y | X = x)` by expanding every patient path without merging,
/// weighting each step with the transition probability into the child.
fn naive_conditional(state: &CategoryState, block: u32, tested: usize, table: &GittinsTable) -> Vec<Vec<f64>> {
    fn walk(
        state: &CategoryState,
        depth: u32,
        y: usize,
        prob: f64,
        tested: usize,
        table: &GittinsTable,
        out: &mut Vec<Vec<f64>>,
    ) {
        out[depth as usize][y] += prob;
        if depth + 1 == out.len() as u32 {
            return;
        }
        for a in 0..state.n_arms() {
            for success in [true, false] {
                let mut child = state.clone();
                child.arms[a].record(success);
                let p = gi_transition_prob(&child, a, success, table).unwrap();
                if p > 0.0 {
                    walk(&child, depth + 1, y + usize::from(a == tested), prob * p, tested, table, out);
                }
            }
        }
    }
    let n = block as usize + 1;
    let mut out = vec![vec![0.0; n]; n];
    walk(state, 0, 0, 1.0, tested, table, &mut out);
    out
}

#[test]
fn merged_tree_matches_unmerged_paths() {
    let table = GittinsTable::build(0.99, 300, 24).unwrap();
    let states = [
        CategoryState::two_arm(1, 1, 1, 1),
        CategoryState::two_arm(2, 1, 1, 2),
        CategoryState::two_arm(3, 4, 2, 2),
        CategoryState::two_arm(1, 5, 4, 1),
        CategoryState::two_arm(6, 2, 5, 3),
        CategoryState::parse("1,1,2,1,1,2").unwrap(),
        CategoryState::parse("1,1,1,1,1,1,1,1").unwrap(),
    ];
    for st in &states {
        for (b, n_z) in [(1, 1), (2, 2), (3, 1), (4, 3), (5, 2)] {
            let tested = st.n_arms() - 1;
            let cfg = TreeConfig::new(b, n_z).with_tested_arm(tested);
            let joint = exact_joint_xy(st, &cfg, &table).unwrap();
            let naive = naive_conditional(st, b, tested, &table);
            for x in 0..=b {
                let px = flgi_core::numeric::binom_pmf(x, b, 1.0 / n_z as f64);
                for y in 0..=x {
                    let c = naive[x as usize][y as usize];
                    assert!((joint.conditional(y, x) - c).abs() < 1e-12, "{st:?} B={b} x={x} y={y}");
                    assert!((joint.get(x, y) - px * c).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn exact_ratio_agrees_with_monte_carlo() {
    let table = GittinsTable::build(0.99, 300, 30).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let n_runs = 200_000;
    for (st, b) in [
        (CategoryState::two_arm(1, 1, 1, 1), 2),
        (CategoryState::two_arm(3, 2, 2, 3), 4),
        (CategoryState::two_arm(5, 5, 4, 4), 3),
        (CategoryState::two_arm(2, 6, 3, 2), 6),
    ] {
        let joint = exact_joint_xy(&st, &TreeConfig::new(b, 1), &table).unwrap();
        let m = moments_from_joint(&joint, n_runs);
        let est = mc_alloc_estimates(std::slice::from_ref(&st), b, &[1.0], n_runs, &table, &mut rng).unwrap();
        let sd = (m.denominator(m.mode()) / n_runs as f64).sqrt() / m.mu_x;
        let diff = (est[0].prob(1) - m.mode()).abs();
        assert!(diff <= 4.5 * sd + 1e-12, "{st:?}: mc {} vs {} (sd {sd})", est[0].prob(1), m.mode());
    }
}

fn choose(n: u64, k: u64) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

#[test]
fn fisher_matches_integer_enumeration() {
    for a in 0..=7u64 {
        for b in 0..=7u64 {
            for c in 0..=7u64 {
                for d in 0..=7u64 {
                    let t = Table2x2::new(a, b, c, d);
                    let r = fisher_one_sided(&t);
                    let (n_exp, succ, fail) = (c + d, a + c, b + d);
                    if r.degenerate {
                        assert_eq!(r.p_value, 1.0);
                        continue;
                    }
                    let total = choose(a + b + c + d, n_exp);
                    let tail: u128 = (c..=n_exp.min(succ))
                        .map(|k| choose(succ, k) * choose(fail, n_exp - k))
                        .sum();
                    let exact = tail as f64 / total as f64;
                    assert!(
                        (r.p_value - exact).abs() <= 1e-12 * exact.max(1e-3),
                        "{t:?}: {} vs {exact}",
                        r.p_value
                    );
                }
            }
        }
    }
}

#[test]
fn glm_matches_saturated_closed_form() {
    for (a, b, c, d) in [(3, 7, 6, 4), (1, 1, 1, 1), (12, 3, 9, 9), (5, 20, 15, 10), (2, 9, 8, 1)] {
        let t = Table2x2::new(a, b, c, d);
        let fit = glm_wald(&t).unwrap();
        let (a, b, c, d) = (a as f64, b as f64, c as f64, d as f64);
        let log_or = ((c / d) / (a / b)).ln();
        let se = (1.0 / a + 1.0 / b + 1.0 / c + 1.0 / d).sqrt();
        assert!(!fit.flagged);
        assert!((fit.beta1 - log_or).abs() < 1e-8, "{t:?}");
        assert!((fit.se_beta1 - se).abs() < 1e-8);
        assert!((fit.intercept - (a / b).ln()).abs() < 1e-8);
        // score equations: residuals orthogonal to intercept and treatment
        let p0 = 1.0 / (1.0 + (-fit.intercept).exp());
        let p1 = 1.0 / (1.0 + (-(fit.intercept + fit.beta1)).exp());
        let r1 = c - (c + d) * p1;
        let r0 = a - (a + b) * p0;
        assert!(r1.abs() < 1e-8 && (r0 + r1).abs() < 1e-8);
    }
}

/// Simulates the state chain with `c` drawn from each state's allocation law.
struct ChainOracle<'a> {
    design: &'a NullDesign,
    table: &'a GittinsTable,
    laws: HashMap<CategoryState, AllocLaw>,
}

impl<'a> ChainOracle<'a> {
    fn new(design: &'a NullDesign, table: &'a GittinsTable) -> Self {
        Self {
            design,
            table,
            laws: HashMap::new(),
        }
    }

    fn law(&mut self, st: &CategoryState) -> AllocLaw {
        if let Some(l) = self.laws.get(st) {
            return *l;
        }
        let cfg = TreeConfig::new(self.design.block_size, self.design.n_categories);
        let joint = exact_joint_xy(st, &cfg, self.table).unwrap();
        let law = AllocLaw::from_moments(moments_from_joint(&joint, self.design.mc_runs));
        self.laws.insert(st.clone(), law);
        law
    }

    fn sample(law: &AllocLaw, rng: &mut ChaCha8Rng) -> f64 {
        if let AllocLaw::PointMass(p) = law {
            return *p;
        }
        let u: f64 = rng.gen();
        if u < law.mass_at_zero() {
            return 0.0;
        }
        if u >= 1.0 - law.mass_at_one() {
            return 1.0;
        }
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..50 {
            let mid = 0.5 * (lo + hi);
            if law.cdf(mid) < u {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    /// Returns `Q` and the allocation probability drawn at each block.
    fn run(&mut self, p_common: f64, rng: &mut ChaCha8Rng) -> (u32, Vec<f64>) {
        let d = self.design;
        let w = 1.0 / d.n_categories as f64;
        let mut st = CategoryState::prior(2);
        let mut q = 0;
        let mut cs = Vec::new();
        for k in 0..d.n_blocks {
            let law = self.law(&st);
            let c = Self::sample(&law, rng);
            cs.push(c);
            if k >= d.burn_in && c > d.threshold {
                q += 1;
            }
            for _ in 0..d.block_size {
                if rng.gen::<f64>() >= w {
                    continue;
                }
                let arm = usize::from(rng.gen::<f64>() < c);
                let success = rng.gen::<f64>() < p_common;
                st.arms[arm].record(success);
            }
        }
        (q, cs)
    }
}

#[test]
fn exact_null_matches_chain_simulation() {
    let table = GittinsTable::build(0.99, 300, 30).unwrap();
    let reps = 60_000;
    for (k, b, n_z, burn_in, p) in [(5, 2, 1, 0, 0.5), (4, 3, 2, 1, 0.3), (6, 2, 2, 2, 0.6)] {
        let design = NullDesign::new(k, b, n_z).with_burn_in(burn_in);
        let exact = exact_q_null(&design, p, &table, ExactMode::Quadrature).unwrap();
        let mut oracle = ChainOracle::new(&design, &table);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut counts = vec![0u64; exact.pmf.len()];
        for _ in 0..reps {
            counts[oracle.run(p, &mut rng).0 as usize] += 1;
        }
        for (q, (&c, &e)) in counts.iter().zip(&exact.pmf).enumerate() {
            let f = c as f64 / reps as f64;
            let se = (e * (1.0 - e) / reps as f64).sqrt();
            assert!((f - e).abs() <= 4.5 * se + 1e-4, "K={k} B={b} q={q}: sim {f} vs exact {e}");
        }
    }
}

#[test]
fn mixture_null_matches_chain_simulation() {
    let table = GittinsTable::build(0.99, 300, 30).unwrap();
    let design = NullDesign::new(5, 2, 1).with_burn_in(0);
    let reps = 40_000;
    let block = 4;
    let mix = mixture_null(block, &design, &table, 0.5).unwrap();
    assert!((mix.total_mass() - 1.0).abs() < 1e-12);
    let mut oracle = ChainOracle::new(&design, &table);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let draws: Vec<f64> = (0..reps).map(|_| oracle.run(0.5, &mut rng).1[block as usize - 1]).collect();
    for c in [0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0] {
        let emp = draws.iter().filter(|&&v| v <= c).count() as f64 / reps as f64;
        let g = mix.cdf(c);
        let se = (g * (1.0 - g) / reps as f64).sqrt();
        assert!((emp - g).abs() <= 4.5 * se + 1e-4, "c={c}: sim {emp} vs mixture {g}");
    }
}
