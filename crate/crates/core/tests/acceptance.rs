//! End-to-end acceptance checks. Runs as a plain binary:
//! `cargo test --release -p flgi-core --test acceptance`.
//! Prints one PASS/FAIL line per criterion and exits non-zero on any failure.

use std::process::ExitCode;
use std::time::Instant;

use flgi_core::alloc_dist::{exact_joint_xy, mc_alloc_estimates, moments_from_joint, CategoryState, TreeConfig};
use flgi_core::gittins::GittinsTable;
use flgi_core::harness::{
    run_benefit, run_multiarm_example, run_power_grid, ExperimentGrid, Method, MultiArmConfig,
};
use flgi_core::qtest::{critical_value, exact_q_null, mc_q_null, ExactMode, NullDesign, QNull};
use flgi_core::trial_engine::Scenario;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<Vec<(bool, String)>, flgi_core::Error>;

fn check(ok: bool, detail: impl Into<String>) -> (bool, String) {
    (ok, detail.into())
}

fn within(value: f64, target: f64, tol: f64) -> bool {
    (value - target).abs() <= tol
}

fn exact_tree() -> Outcome {
    let table = GittinsTable::build(0.99, 300, 8)?;
    let joint = exact_joint_xy(&CategoryState::two_arm(1, 1, 1, 1), &TreeConfig::new(2, 1), &table)?;
    let v = joint.conditional(2, 2);
    Ok(vec![check(v == 0.25, format!("P(Y=2|X=2) = {v}"))])
}

fn symmetric(null: &QNull, tol: f64) -> bool {
    let k = null.pmf.len() - 1;
    (0..=k).all(|q| (null.pmf[q] - null.pmf[k - q]).abs() <= tol)
}

fn q_null_tail() -> Outcome {
    let table = GittinsTable::build(0.99, 300, 30)?;
    let design = NullDesign::new(10, 2, 2).with_burn_in(0);
    let approx = exact_q_null(&design, 0.5, &table, ExactMode::ExpectationApprox)?;
    let mc = mc_q_null(&design, 0.5, &table, 50_000, 2024)?;
    let crit = critical_value(&approx, 0.05)?;
    let crit_mc = critical_value(&mc, 0.05)?;
    Ok(vec![
        check(within(approx.pmf[10], 0.043, 0.005), format!("exact approx P(Q=10) = {:.4}", approx.pmf[10])),
        check(within(mc.pmf[10], 0.043, 0.008), format!("MC (50k) P(Q=10) = {:.4}", mc.pmf[10])),
        check(symmetric(&approx, 0.005), "exact pmf symmetric about 5"),
        check(symmetric(&mc, 0.008), "MC pmf symmetric about 5"),
        check(crit.c_q == 9, format!("c_q = {} (exact), {} (MC)", crit.c_q, crit_mc.c_q)),
    ])
}

fn type_one_error() -> Outcome {
    let grid: ExperimentGrid = serde_json::from_value(serde_json::json!({
        "p_experimental": [0.5],
        "n_patients": [40],
        "n_categories": [1],
        "block_sizes": [2],
        "methods": ["alloc_prob", "fisher_flgi"],
        "reps": 5000,
        "calibration_reps": 20000,
        "seed": 40,
    }))
    .expect("static grid");
    let r = &run_power_grid(&grid)?[0];
    let alloc = r.method(Method::AllocProb).expect("alloc");
    let fisher = r.method(Method::FisherFlgi).expect("fisher");
    let unadjusted = fisher.unadjusted_rate.unwrap_or(f64::NAN);
    Ok(vec![
        check(
            within(alloc.rejection_rate, 0.05, 0.007),
            format!("alloc-prob type I = {:.2}% (c_q {}, gamma {:.3})", 100.0 * alloc.rejection_rate, alloc.threshold, alloc.gamma),
        ),
        check(unadjusted < 0.05, format!("unadjusted Fisher type I = {:.2}%", 100.0 * unadjusted)),
    ])
}

fn patient_benefit() -> Outcome {
    let mut out = Vec::new();
    for (n, n_z, p1, pct, pct_tol, succ, succ_tol) in
        [(40, 1, 0.7, 77.0, 3.0, 26.0, 1.0), (80, 2, 0.8, 87.0, 3.0, 61.0, 1.5)]
    {
        let scn = Scenario::two_arm(n, 2, n_z, 0.5, p1);
        let table = scn.build_table()?;
        let b = run_benefit(&scn, &table, 2000, 1000 + n as u64)?;
        out.push(check(
            within(b.pct_best, pct, pct_tol),
            format!("N={n} n_z={n_z}: {:.1}% on best (target {pct} ± {pct_tol})", b.pct_best),
        ));
        out.push(check(
            within(b.mean_successes, succ, succ_tol),
            format!("N={n} n_z={n_z}: {:.2} successes (target {succ} ± {succ_tol})", b.mean_successes),
        ));
    }
    Ok(out)
}

fn power_grid(n: u32, n_z: u32, p1: f64, reps: u64, calibration_reps: u64) -> ExperimentGrid {
    serde_json::from_value(serde_json::json!({
        "p_experimental": [p1],
        "n_patients": [n],
        "n_categories": [n_z],
        "block_sizes": [2],
        "methods": ["alloc_prob", "fisher_flgi", "fisher_equal"],
        "reps": reps,
        "calibration_reps": calibration_reps,
        "seed": 80 + n_z,
    }))
    .expect("static grid")
}

fn power_ordering() -> Outcome {
    let mut out = Vec::new();
    for n_z in [1, 4] {
        let r = &run_power_grid(&power_grid(80, n_z, 0.8, 2000, 5000))?[0];
        let rate = |m| r.method(m).expect("method").rejection_rate * 100.0;
        let (alloc, fisher, equal) = (rate(Method::AllocProb), rate(Method::FisherFlgi), rate(Method::FisherEqual));
        out.push(check(
            alloc >= fisher + 10.0,
            format!("N=80 n_z={n_z}: alloc {alloc:.1}% >= Fisher/FLGI {fisher:.1}% + 10"),
        ));
        out.push(check(
            (alloc - equal).abs() <= 10.0,
            format!("N=80 n_z={n_z}: |alloc {alloc:.1}% - Fisher/Equal {equal:.1}%| <= 10"),
        ));
    }
    let r = &run_power_grid(&power_grid(160, 4, 0.7, 500, 1000))?[0];
    let rate = |m| r.method(m).expect("method").rejection_rate * 100.0;
    let (alloc, fisher) = (rate(Method::AllocProb), rate(Method::FisherFlgi));
    out.push(check(
        alloc > fisher,
        format!("N=160 n_z=4 diff 0.2: alloc {alloc:.1}% > Fisher/FLGI {fisher:.1}%"),
    ));
    Ok(out)
}

fn multi_arm() -> Outcome {
    let cfg = MultiArmConfig {
        reps: 5000,
        null_reps: 20_000,
        seed: 42,
        ..MultiArmConfig::default()
    };
    let (_, results) = run_multiarm_example(&[2, 3], &cfg)?;
    let mut out = vec![check(
        results[0].c_q == 30,
        format!("c_q = {} (gamma {:.3})", results[0].c_q, results[0].gamma),
    )];
    for (r, target) in results.iter().zip([34.0, 41.0]) {
        let v = 100.0 * r.alloc_rejection_best();
        out.push(check(
            within(v, target, 3.0),
            format!("scenario {}: alloc-prob rejects {v:.1}% (target {target} ± 3; Fisher/Equal {:.1}%)", r.scenario, 100.0 * r.fisher_equal_best()),
        ));
    }
    Ok(out)
}

fn property_suites() -> Outcome {
    let mut out = Vec::new();
    let table = GittinsTable::build(0.99, 300, 40)?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);

    let mut worst = 0.0f64;
    for _ in 0..50 {
        let st = CategoryState::two_arm(rng.gen_range(1..10), rng.gen_range(1..10), rng.gen_range(1..10), rng.gen_range(1..10));
        let b = rng.gen_range(1..6);
        let cfg = TreeConfig::new(b, rng.gen_range(1..4));
        let a = exact_joint_xy(&st, &cfg, &table)?;
        let m = exact_joint_xy(&st.mirror(), &cfg, &table)?;
        for x in 0..=b {
            for y in 0..=x {
                worst = worst.max((a.get(x, y) - m.get(x, x - y)).abs());
            }
        }
    }
    out.push(check(worst < 1e-12, format!("mirror identity over 50 states, max error {worst:.1e}")));

    let mut monotone = true;
    for (s, f, gi) in table.entries() {
        if table.covers(s + 1, f) {
            monotone &= table.index(s + 1, f)? > gi;
        }
        if table.covers(s, f + 1) {
            monotone &= table.index(s, f + 1)? < gi;
        }
    }
    out.push(check(monotone, "GI monotone over the whole table"));

    let mut worst_tv = 0.0f64;
    let mut cases = 0;
    for b in 1..=12u32 {
        for k in 1..=12 / b {
            for n_z in 1..=3 {
                let d = NullDesign::new(k, b, n_z).with_burn_in(0);
                let quad = exact_q_null(&d, 0.5, &table, ExactMode::Quadrature)?;
                let approx = exact_q_null(&d, 0.5, &table, ExactMode::ExpectationApprox)?;
                let tv = 0.5 * quad.pmf.iter().zip(&approx.pmf).map(|(a, b)| (a - b).abs()).sum::<f64>();
                worst_tv = worst_tv.max(tv);
                cases += 1;
            }
        }
    }
    out.push(check(worst_tv <= 0.02, format!("approx vs quadrature TV over {cases} designs, max {worst_tv:.1e}")));

    let n_runs = 100_000;
    let mut agree = true;
    for (st, b) in [(CategoryState::two_arm(1, 1, 1, 1), 2), (CategoryState::two_arm(3, 2, 2, 3), 4)] {
        let joint = exact_joint_xy(&st, &TreeConfig::new(b, 1), &table)?;
        let m = moments_from_joint(&joint, n_runs);
        let est = mc_alloc_estimates(std::slice::from_ref(&st), b, &[1.0], n_runs, &table, &mut rng)?;
        let sd = (m.denominator(m.mode()) / n_runs as f64).sqrt() / m.mu_x;
        agree &= (est[0].prob(1) - m.mode()).abs() <= 4.5 * sd;
    }
    out.push(check(agree, "Monte-Carlo allocation probability agrees with the exact tree"));

    let d = NullDesign::new(6, 2, 2).with_burn_in(1);
    let exact = exact_q_null(&d, 0.5, &table, ExactMode::Quadrature)?;
    let reps = 20_000;
    let mc = mc_q_null(&d, 0.5, &table, reps, 3)?;
    let worst_z = exact
        .pmf
        .iter()
        .zip(&mc.pmf)
        .map(|(a, b)| (a - b).abs() - 0.01 - 4.5 * (a * (1.0 - a) / reps as f64).sqrt())
        .fold(f64::NEG_INFINITY, f64::max);
    out.push(check(worst_z <= 0.0, "Monte-Carlo Q null agrees with the exact chain"));
    Ok(out)
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome, f64); 7] = [
        ("exact tree value", exact_tree, 1.0),
        ("Q-null tail", q_null_tail, 600.0),
        ("type I exactness", type_one_error, 1200.0),
        ("patient benefit", patient_benefit, 1800.0),
        ("power ordering", power_ordering, f64::INFINITY),
        ("multi-arm example", multi_arm, 3600.0),
        ("property suites", property_suites, f64::INFINITY),
    ];
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, run, budget) in criteria {
        if !only.is_empty() && !only.iter().any(|o| name.contains(o.as_str())) {
            continue;
        }
        let started = Instant::now();
        let result = run();
        let secs = started.elapsed().as_secs_f64();
        let checks = match result {
            Ok(mut c) => {
                if budget.is_finite() {
                    c.push(check(secs < budget, format!("runtime {secs:.2}s < {budget:.0}s")));
                }
                c
            }
            Err(e) => vec![check(false, format!("error: {e}"))],
        };
        let ok = checks.iter().all(|(ok, _)| *ok);
        failed += usize::from(!ok);
        println!("{} {name} ({secs:.1}s)", if ok { "PASS" } else { "FAIL" });
        for (ok, detail) in checks {
            println!("    [{}] {detail}", if ok { "ok" } else { "x" });
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
