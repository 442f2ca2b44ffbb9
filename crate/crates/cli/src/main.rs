use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use flgi_core::alloc_dist::{exact_joint_xy, mc_alloc_estimates, moments_from_joint, CategoryState, TreeConfig};
use flgi_core::comparators::{fisher_one_sided, glm_wald, rejects, Comparator, Table2x2};
use flgi_core::gittins::{GittinsTable, DEFAULT_DISCOUNT, DEFAULT_HORIZON};
use flgi_core::harness::{
    persist, run_block_size_sweep, run_multiarm_example, run_power_grid, validate_design, ExperimentGrid,
    MultiArmConfig, ResultRow,
};
use flgi_core::numeric::mix_seed;
use flgi_core::qtest::{
    exact_q_null, mc_q_null, run_qtest, test_alloc_probs, ExactMode, NullDesign, QNull,
};
use flgi_core::trial_engine::{replicate, Scenario};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

/// Forward-looking Gittins index trials and the allocation-probability test.
///
/// Worker threads follow RAYON_NUM_THREADS.
#[derive(Parser)]
#[command(name = "flgi", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Tabulate Gittins indices as CSV `s,f,index`.
    GittinsTable {
        #[arg(long, default_value_t = DEFAULT_DISCOUNT)]
        discount: f64,
        #[arg(long, default_value_t = DEFAULT_HORIZON)]
        horizon: u32,
        #[arg(long)]
        max_count: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Exact joint law of (X, Y) for one block (CSV `x,y,prob`), or a
    /// Monte-Carlo allocation estimate (JSON).
    AllocDist {
        /// Posterior counts `s0,f0,s1,f1[,...]`, prior included.
        #[arg(long)]
        state: String,
        #[arg(long)]
        block_size: u32,
        #[arg(long, default_value_t = 1)]
        categories: u32,
        #[arg(long, conflicts_with = "mc")]
        exact: bool,
        /// Number of simulated blocks.
        #[arg(long)]
        mc: Option<u32>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_DISCOUNT)]
        discount: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate replicated trials from a JSON scenario.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1)]
        reps: u64,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Null law (CSV `q,prob`) for the allocation-probability test.
        #[arg(long)]
        null: Option<PathBuf>,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        /// Also write one trace CSV per replication.
        #[arg(long)]
        traces: bool,
    },
    /// Null distribution of Q as CSV `q,prob`.
    QNull {
        #[arg(long)]
        blocks: u32,
        #[arg(long)]
        block_size: u32,
        #[arg(long, default_value_t = 1)]
        categories: u32,
        #[arg(long, default_value_t = 0.5)]
        p_common: f64,
        #[arg(long, value_enum, conflicts_with = "mc")]
        exact: Option<ExactArg>,
        /// Number of simulated null trials.
        #[arg(long)]
        mc: Option<u64>,
        #[arg(long, default_value_t = 2)]
        burn_in: u32,
        #[arg(long, default_value_t = 2)]
        arms: u32,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_DISCOUNT)]
        discount: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Superiority test on allocation probabilities or on per-patient outcomes.
    Test {
        /// One allocation probability per block (last CSV column).
        #[arg(long, requires = "null")]
        alloc_probs: Option<PathBuf>,
        #[arg(long)]
        null: Option<PathBuf>,
        #[arg(long, default_value_t = 2)]
        burn_in: u32,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// Per-patient CSV `category,arm,outcome`.
        #[arg(long, conflicts_with = "alloc_probs")]
        patients: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = MethodArg::Fisher)]
        method: MethodArg,
        #[arg(long, default_value_t = 0)]
        category: u32,
        /// Pool all categories instead of testing one.
        #[arg(long)]
        pooled: bool,
        #[arg(long, default_value_t = 1)]
        arm: u32,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write JSON here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Calibrated power study from a JSON grid.
    Power {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Power study over block sizes.
    Blocksweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "2,4,8")]
        block_sizes: Vec<u32>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Four-arm example with three success-rate scenarios.
    Multiarm {
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        scenario: Vec<u32>,
        #[arg(long, default_value_t = 5000)]
        reps: u64,
        #[arg(long, default_value_t = 10_000)]
        null_reps: u64,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        #[arg(long)]
        bonferroni: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ExactArg {
    Quadrature,
    Approx,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Fisher,
    Glm,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("cannot create {}", path.display()))?,
    ))
}

fn warn_all(warnings: &[String]) {
    for w in warnings {
        eprintln!("warning: {w}");
    }
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GittinsTable {
            discount,
            horizon,
            max_count,
            out,
        } => {
            let table = GittinsTable::build(discount, horizon, max_count)?;
            table.write_csv(create(&out)?)?;
        }
        Command::AllocDist {
            state,
            block_size,
            categories,
            exact,
            mc,
            seed,
            discount,
            out,
        } => {
            let state = CategoryState::parse(&state)?;
            let table = GittinsTable::build(discount, DEFAULT_HORIZON, state.arms.iter().map(|a| a.total()).max().unwrap_or(2) + block_size + 2)?;
            match mc {
                Some(runs) if !exact => {
                    let states = vec![state.clone(); categories as usize];
                    let weights = vec![1.0 / categories as f64; categories as usize];
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let est = mc_alloc_estimates(&states, block_size, &weights, runs, &table, &mut rng)?;
                    let body = json!({
                        "state": state.arms.iter().flat_map(|a| [a.successes, a.failures]).collect::<Vec<_>>(),
                        "block_size": block_size,
                        "categories": categories,
                        "mc_runs": runs,
                        "seed": seed,
                        "x_total": est[0].x_total,
                        "y_totals": est[0].y_totals,
                        "alloc_probs": est[0].probs(),
                    });
                    serde_json::to_writer_pretty(create(&out)?, &body)?;
                }
                _ => {
                    let joint = exact_joint_xy(&state, &TreeConfig::new(block_size, categories), &table)?;
                    let mut w = csv::Writer::from_writer(create(&out)?);
                    w.write_record(["x", "y", "prob"])?;
                    for (x, y, p) in joint.entries() {
                        w.write_record(&[x.to_string(), y.to_string(), format!("{p:.15}")])?;
                    }
                    w.flush()?;
                    let m = moments_from_joint(&joint, flgi_core::alloc_dist::DEFAULT_MC_RUNS);
                    eprintln!(
                        "E[X]={:.6} E[Y]={:.6} Var X={:.6} Var Y={:.6} Cov={:.6}",
                        m.mu_x, m.mu_y, m.var_x, m.var_y, m.cov
                    );
                }
            }
        }
        Command::Simulate {
            config,
            reps,
            seed,
            out,
            null,
            alpha,
            traces,
        } => simulate(&config, reps, seed, &out, null.as_deref(), alpha, traces)?,
        Command::QNull {
            blocks,
            block_size,
            categories,
            p_common,
            exact,
            mc,
            burn_in,
            arms,
            threshold,
            seed,
            discount,
            out,
        } => {
            let mut design = NullDesign::new(blocks, block_size, categories)
                .with_burn_in(burn_in)
                .with_arms(arms);
            if let Some(t) = threshold {
                design.threshold = t;
            }
            design.validate()?;
            let table = GittinsTable::build(discount, DEFAULT_HORIZON, blocks * block_size + block_size + 6)?;
            let null = match (exact, mc) {
                (_, Some(reps)) => mc_q_null(&design, p_common, &table, reps, seed)?,
                (Some(ExactArg::Quadrature), None) => exact_q_null(&design, p_common, &table, ExactMode::Quadrature)?,
                (_, None) => exact_q_null(&design, p_common, &table, ExactMode::ExpectationApprox)?,
            };
            null.write_csv(create(&out)?)?;
        }
        Command::Test {
            alloc_probs,
            null,
            burn_in,
            threshold,
            patients,
            method,
            category,
            pooled,
            arm,
            alpha,
            seed,
            out,
        } => {
            let body = match (alloc_probs, patients) {
                (Some(probs_file), None) => {
                    let probs = read_probs(&probs_file)?;
                    let null_file = null.expect("clap enforces --null");
                    let k_eff = count_rows(&null_file)?.saturating_sub(1) as u32;
                    let mut design = NullDesign::new(k_eff + burn_in, 1, 1).with_burn_in(burn_in);
                    design.threshold = threshold;
                    let null = QNull::read_csv(File::open(&null_file)?, design)?;
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    serde_json::to_value(test_alloc_probs(&probs, &null, alpha, &mut rng)?)?
                }
                (None, Some(patients_file)) => {
                    let t = read_patients(&patients_file, if pooled { None } else { Some(category) }, arm)?;
                    match method {
                        MethodArg::Fisher => {
                            let r = fisher_one_sided(&t);
                            json!({"method": Comparator::Fisher, "table": t, "p_value": r.p_value,
                                   "degenerate": r.degenerate, "alpha": alpha, "reject": rejects(r.p_value, alpha)})
                        }
                        MethodArg::Glm => {
                            let fit = glm_wald(&t)?;
                            json!({"method": Comparator::Glm, "table": t, "fit": fit, "p_value": fit.p_value,
                                   "alpha": alpha, "reject": rejects(fit.p_value, alpha)})
                        }
                    }
                }
                _ => bail!("give either --alloc-probs with --null, or --patients"),
            };
            match out {
                Some(path) => serde_json::to_writer_pretty(create(&path)?, &body)?,
                None => println!("{}", serde_json::to_string_pretty(&body)?),
            }
        }
        Command::Power { config, out } => {
            let grid = read_grid(&config)?;
            let results = run_power_grid(&grid)?;
            let rows: Vec<ResultRow> = results.iter().flat_map(|r| r.rows()).collect();
            persist(&out, "power", &grid, &results, &rows, grid_notes(&grid))?;
        }
        Command::Blocksweep {
            config,
            block_sizes,
            out,
        } => {
            let grid = read_grid(&config)?;
            let results = run_block_size_sweep(&grid, &block_sizes)?;
            let rows: Vec<ResultRow> = results.iter().flat_map(|r| r.rows()).collect();
            persist(&out, "blocksweep", &grid, &results, &rows, grid_notes(&grid))?;
        }
        Command::Multiarm {
            scenario,
            reps,
            null_reps,
            alpha,
            bonferroni,
            seed,
            out,
        } => {
            let cfg = MultiArmConfig {
                reps,
                null_reps,
                alpha,
                bonferroni,
                seed,
                ..MultiArmConfig::default()
            };
            let (null, results) = run_multiarm_example(&scenario, &cfg)?;
            let rows: Vec<ResultRow> = results.iter().flat_map(|r| r.rows()).collect();
            let notes = vec![
                "scenario 2 success rates are one minus the observed adverse-event rate per arm".to_string(),
            ];
            persist(&out, "multiarm", &cfg, &results, &rows, notes)?;
            null.write_csv(create(&out.join("q_null.csv"))?)?;
        }
    }
    Ok(())
}

fn grid_notes(grid: &ExperimentGrid) -> Vec<String> {
    let mut notes = Vec::new();
    for d in grid.designs() {
        for w in validate_design(&grid.scenario(d, grid.p_control)) {
            notes.push(format!("{}: {w}", d.id()));
        }
    }
    warn_all(&notes);
    notes
}

fn read_grid(path: &Path) -> Result<ExperimentGrid> {
    let file = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    Ok(serde_json::from_reader(BufReader::new(file))?)
}

fn count_rows(path: &Path) -> Result<usize> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.records().count())
}

/// Last numeric column of every line; a non-numeric first line is a header.
fn read_probs(path: &Path) -> Result<Vec<f64>> {
    let file = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let field = line.rsplit(',').next().unwrap_or("").trim();
        if field.is_empty() {
            continue;
        }
        match field.parse::<f64>() {
            Ok(p) => out.push(p),
            Err(_) if i == 0 => continue,
            Err(_) => bail!("line {}: {field:?} is not a probability", i + 1),
        }
    }
    Ok(out)
}

fn read_patients(path: &Path, category: Option<u32>, arm: u32) -> Result<Table2x2> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("cannot open {}", path.display()))?;
    let mut data = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let field = |i: usize| -> Result<u32> {
            rec.get(i)
                .and_then(|v| v.trim().parse().ok())
                .with_context(|| format!("bad record {rec:?}"))
        };
        let (z, a, y) = (field(0)?, field(1)?, field(2)?);
        if category.is_some_and(|c| c != z) || (a != 0 && a != arm) {
            continue;
        }
        data.push((u32::from(a != 0), y != 0));
    }
    Ok(Table2x2::from_patients(&data)?)
}

#[allow(clippy::too_many_arguments)]
fn simulate(
    config: &Path,
    reps: u64,
    seed: Option<u64>,
    out: &Path,
    null: Option<&Path>,
    alpha: f64,
    traces: bool,
) -> Result<()> {
    let file = File::open(config).with_context(|| format!("cannot open {}", config.display()))?;
    let scn: Scenario = serde_json::from_reader(BufReader::new(file))?;
    scn.validate()?;
    warn_all(&validate_design(&scn));
    let seed = seed.unwrap_or(scn.seed);
    let table = scn.build_table()?;
    let null = match null {
        Some(path) => {
            let mut design = NullDesign::new(scn.n_blocks(), scn.block_size, scn.n_categories)
                .with_burn_in(scn.burn_in)
                .with_arms(scn.n_arms);
            design.category_weights = scn.category_weights.clone();
            Some(QNull::read_csv(File::open(path)?, design)?)
        }
        None => None,
    };
    std::fs::create_dir_all(out)?;

    let (n_z, n_a) = (scn.n_categories as usize, scn.n_arms as usize);
    let mut header = vec!["rep".to_string(), "seed".into(), "successes".into()];
    header.extend((0..n_a).map(|a| format!("n_arm{a}")));
    for z in 0..n_z {
        for a in 1..n_a {
            header.push(format!("q_z{z}_arm{a}"));
            header.push(format!("fisher_p_z{z}_arm{a}"));
            if null.is_some() {
                header.push(format!("reject_z{z}_arm{a}"));
            }
        }
    }
    let mut w = csv::Writer::from_writer(create(&out.join("summary.csv"))?);
    w.write_record(&header)?;
    for (rep, record) in replicate(&scn, &table, reps, seed).enumerate() {
        let record = record?;
        let rep_seed = mix_seed(seed, rep as u64);
        let mut row = vec![rep.to_string(), rep_seed.to_string(), record.total_successes().to_string()];
        row.extend(record.arm_counts().iter().map(u32::to_string));
        for z in 0..n_z {
            for a in 1..n_a {
                let probs = record.alloc_series(z, a);
                let q = probs
                    .iter()
                    .skip(scn.burn_in as usize)
                    .filter(|&&p| p > 1.0 / n_a as f64)
                    .count();
                row.push(q.to_string());
                let t = Table2x2::from_counts(record.arm_tally(Some(z), 0), record.arm_tally(Some(z), a));
                row.push(format!("{:.10}", fisher_one_sided(&t).p_value));
                if let Some(null) = &null {
                    let d = run_qtest(&record, z, a, null, alpha, mix_seed(rep_seed, (z * n_a + a) as u64))?;
                    row.push(u8::from(d.reject).to_string());
                }
            }
        }
        w.write_record(&row)?;
        if traces {
            write_trace(&out.join(format!("trace_{rep:05}.csv")), &record)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_trace(path: &Path, record: &flgi_core::trial_engine::TrialRecord) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "block,category,arm,alloc_prob")?;
    for (k, block) in record.alloc_probs.iter().enumerate() {
        for (z, probs) in block.iter().enumerate() {
            for (a, p) in probs.iter().enumerate() {
                writeln!(w, "{k},{z},{a},{p}")?;
            }
        }
    }
    w.flush()?;
    let mut w = create(&path.with_extension("patients.csv"))?;
    writeln!(w, "category,arm,outcome")?;
    for p in &record.patients {
        writeln!(w, "{},{},{}", p.category, p.arm, u8::from(p.success))?;
    }
    w.flush()?;
    Ok(())
}
