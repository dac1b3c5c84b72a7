use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use exitlab::backbone::{BackboneError, ConditionedSampler};
use exitlab::conditioning::{
    martingale_convergence_experiment, rejection_condition_poisson, weak_convergence_experiment, AcceptanceRule,
    TestFunctional,
};
use exitlab::domain_pde::{
    poisson_kernel, semilinear_residual_norm, solve_constant_data, solve_large_solution, green_apply, Side,
    MIN_LARGE_CELLS,
};
use exitlab::harness::{run_acceptance_suite, Suite};
use exitlab::sbm_sim::{replicate, tilt_rate, ChainSampler, ExtinctionSampler, SimError, SimulationLaw};
use exitlab::{AtomicMeasure, ConfigError, Domain1D, ExperimentConfig, GridFunction, MeanEstimate};
use serde_json::json;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(name = "exitlab", version, about = "Super-Brownian exit measures on an interval: solvers, samplers and checks")]
struct Cli {
    /// JSON experiment configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    replicates: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve u⁽ⁿ⁾, the large solution and kernels; write refinement data.
    Pde,
    /// Sample exit measures.
    Simulate {
        #[arg(long, value_enum, default_value_t = Which::Exit)]
        which: Which,
    },
    /// Rejection-conditioned samples, conditional dispersion and weak convergence.
    Condition,
    /// Backbone samples of the conditioned exit measure.
    Backbone,
    /// Run the acceptance checks.
    Verify {
        #[arg(long, default_value = "all")]
        suite: String,
    },
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Which {
    Exit,
    Chain,
    Killed,
    Extinction,
}

impl Which {
    fn name(self) -> &'static str {
        match self {
            Which::Exit => "exit",
            Which::Chain => "chain",
            Which::Killed => "killed",
            Which::Extinction => "extinction",
        }
    }
}

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

/// Output directory plus the provenance stamped into every file.
struct Output {
    dir: PathBuf,
    hash: String,
    seed: u64,
}

impl Output {
    fn new(cfg: &ExperimentConfig) -> Result<Self> {
        let dir = PathBuf::from(&cfg.out_dir);
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let out = Output { dir, hash: cfg.hash(), seed: cfg.seed };
        fs::write(out.path("config.json"), cfg.to_json_string() + "\n")?;
        Ok(out)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn csv(&self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(self.path(name))?);
        writeln!(w, "# config_hash={} seed={}", self.hash, self.seed)?;
        writeln!(w, "{}", header.join(","))?;
        for r in rows {
            writeln!(w, "{}", r.join(","))?;
        }
        w.flush()?;
        Ok(())
    }

    fn jsonl(&self, name: &str, records: impl IntoIterator<Item = serde_json::Value>) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(self.path(name))?);
        for mut r in records {
            if let Some(obj) = r.as_object_mut() {
                obj.insert("config_hash".into(), json!(self.hash));
                obj.insert("seed".into(), json!(self.seed));
            }
            writeln!(w, "{}", serde_json::to_string(&r)?)?;
        }
        w.flush()?;
        Ok(())
    }

    fn json(&self, name: &str, mut value: serde_json::Value) -> Result<()> {
        if let Some(obj) = value.as_object_mut() {
            obj.insert("config_hash".into(), json!(self.hash));
            obj.insert("seed".into(), json!(self.seed));
        }
        fs::write(self.path(name), serde_json::to_string_pretty(&value)? + "\n")?;
        Ok(())
    }
}

fn f(x: f64) -> String {
    format!("{:.10e}", x + 0.0)
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, ConfigError> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| ConfigError::Parse(format!("{}: {e}", p.display())))?;
            ExperimentConfig::from_json_str(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.to_string_lossy().into_owned();
    }
    if let Some(r) = cli.replicates {
        cfg.replicates = r;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn side_masses(m: &AtomicMeasure, d: &Domain1D) -> serde_json::Value {
    let [l, r] = m.side_masses(d);
    json!({"left": l + 0.0, "right": r + 0.0, "total": l + r + 0.0})
}

fn cmd_pde(cfg: &ExperimentConfig, out: &Output) -> Result<()> {
    let d = cfg.domain_1d()?;
    let m = cfg.grid_size;
    let grid = exitlab::Grid::new(d, m);
    let mut sols: Vec<(u32, GridFunction)> = Vec::new();
    for &n in &cfg.n_schedule {
        sols.push((n, solve_constant_data(d, n as f64, m)?));
    }
    sols.sort_by_key(|(n, _)| *n);
    let mut header = vec!["x".to_string()];
    header.extend(sols.iter().map(|(n, _)| format!("u_n{n}")));
    let rows: Vec<Vec<String>> = (0..=m)
        .map(|j| std::iter::once(f(grid.x(j))).chain(sols.iter().map(|(_, s)| f(s.values[j]))).collect())
        .collect();
    out.csv("u_n.csv", &header.iter().map(String::as_str).collect::<Vec<_>>(), &rows)?;

    let large = solve_large_solution(d, m.max(MIN_LARGE_CELLS))?;
    let rows: Vec<Vec<String>> = (1..large.grid.cells)
        .map(|j| {
            let x = large.grid.x(j);
            let s = d.distance_to_boundary(x);
            vec![f(x), f(large.values[j]), f(large.values[j] * s * s)]
        })
        .collect();
    out.csv("large_solution.csv", &["x", "u", "u_times_dist_sq"], &rows)?;

    let u_n = solve_constant_data(d, cfg.nu_level as f64, m)?;
    let kill = tilt_rate(&u_n);
    let kl = poisson_kernel(d, &kill, Side::Left)?;
    let kr = poisson_kernel(d, &kill, Side::Right)?;
    let g1 = green_apply(d, &kill, &GridFunction::constant(grid, 1.0))?;
    let rows: Vec<Vec<String>> =
        (0..=m).map(|j| vec![f(grid.x(j)), f(kl.values[j]), f(kr.values[j]), f(g1.values[j])]).collect();
    out.csv("kernels.csv", &["x", "kernel_left", "kernel_right", "green_of_one"], &rows)?;

    let mut rows = Vec::new();
    let mut cells = 64;
    while cells <= m.max(64) {
        let v = solve_constant_data(d, 1.0, cells)?;
        let u = solve_large_solution(d, cells)?;
        rows.push(vec![cells.to_string(), f(semilinear_residual_norm(&v)), f(v.eval(d.midpoint())), f(u.eval(d.midpoint()))]);
        cells *= 2;
    }
    out.csv("refinement.csv", &["cells", "residual_u1", "u1_mid", "large_mid"], &rows)?;

    let monotone = sols.windows(2).all(|w| w[0].1.values.iter().zip(&w[1].1.values).all(|(a, b)| a <= b))
        && sols.last().is_none_or(|(_, s)| (1..m).all(|j| s.values[j] <= large.eval(grid.x(j))));
    out.json(
        "pde_meta.json",
        json!({"n_schedule": sols.iter().map(|(n, _)| n).collect::<Vec<_>>(), "monotone_family": monotone, "cells": m}),
    )?;
    println!("wrote u_n.csv, large_solution.csv, kernels.csv, refinement.csv to {}", out.dir.display());
    Ok(())
}

fn cmd_simulate(cfg: &ExperimentConfig, out: &Output, which: Which) -> Result<()> {
    let sim = cfg.simulator()?;
    let d = sim.domain;
    let mu = cfg.mu_measure();
    let ex = cfg.exhaustion(&sim)?;
    let mut domains = ex.clone();
    domains.push(d);
    let cells = cfg.family_cells();
    let paths: Vec<Vec<AtomicMeasure>> = match which {
        Which::Exit => {
            let chain = ChainSampler::new(&sim, &SimulationLaw::plain(), &[d])?;
            replicate(cfg.replicates, cfg.seed, "cli.simulate.exit", |rng| chain.sample(&mu, rng))?
        }
        Which::Chain => {
            let chain = ChainSampler::new(&sim, &SimulationLaw::plain(), &domains)?;
            replicate(cfg.replicates, cfg.seed, "cli.simulate.chain", |rng| chain.sample(&mu, rng))?
        }
        Which::Killed => {
            let law = SimulationLaw::killed_at_level(cfg.nu_level, d, cells)?;
            let chain = ChainSampler::new(&sim, &law, &[d])?;
            replicate(cfg.replicates, cfg.seed, "cli.simulate.killed", |rng| chain.sample(&mu, rng))?
        }
        Which::Extinction => {
            let u = solve_large_solution(d, cfg.grid_size.max(MIN_LARGE_CELLS))?;
            let sampler = ExtinctionSampler::new(&sim, &u, &ex)?;
            replicate(cfg.replicates, cfg.seed, "cli.simulate.extinction", |rng| sampler.sample(&mu, rng))?
        }
    };
    let stage_domains: Vec<Domain1D> = match which {
        Which::Chain | Which::Extinction => domains.clone(),
        _ => vec![d],
    };
    let n_values = cfg.n_schedule.clone();
    let records = paths.iter().enumerate().map(|(i, p)| {
        let last = p.last().expect("stages");
        let dk = stage_domains.last().expect("domains");
        let functionals: serde_json::Map<String, serde_json::Value> = n_values
            .iter()
            .map(|n| (format!("exp_minus_{n}_mass"), json!((-(*n as f64) * last.total_mass()).exp())))
            .collect();
        json!({
            "replicate": i,
            "exit_atoms": last,
            "total_mass": last.total_mass() + 0.0,
            "stages": p.iter().zip(&stage_domains).map(|(m, sd)| side_masses(m, sd)).collect::<Vec<_>>(),
            "final_sides": side_masses(last, dk),
            "functionals": functionals,
        })
    });
    let name = which.name();
    out.jsonl(&format!("simulate_{name}.jsonl"), records)?;
    let rows: Vec<Vec<String>> = if paths.is_empty() {
        Vec::new()
    } else {
        (0..stage_domains.len())
            .map(|k| {
                let masses: Vec<f64> = paths.iter().map(|p| p[k].total_mass()).collect();
                let e = MeanEstimate::from_samples(&masses);
                vec![(k + 1).to_string(), f(stage_domains[k].left), f(stage_domains[k].right), f(e.estimate), f(e.stderr)]
            })
            .collect()
    };
    out.csv(&format!("simulate_{name}_summary.csv"), &["stage", "left", "right", "mean_mass", "stderr"], &rows)?;
    println!("wrote {} replicates of '{name}' to {}", paths.len(), out.dir.display());
    Ok(())
}

fn cmd_condition(cfg: &ExperimentConfig, out: &Output) -> Result<()> {
    let sim = cfg.simulator()?;
    let d = sim.domain;
    let mu = cfg.mu_measure();
    let want = cfg.replicates;
    let n = cfg.nu_level;
    let target = cfg.nu_counts;
    let (records, summary) = if want == 0 {
        (Vec::new(), Vec::new())
    } else {
        let rej = rejection_condition_poisson(
            &sim,
            &mu,
            &[],
            target,
            n,
            AcceptanceRule::LikelihoodRatio,
            want,
            want * cfg.verify.budget_factor,
            cfg.seed,
        )?;
        let records: Vec<serde_json::Value> = rej
            .samples
            .iter()
            .map(|c| {
                json!({"n": n, "counts": target, "accepted": true, "functionals": side_masses(c.exit(), &d)})
            })
            .collect();
        let r = rej.report;
        let summary = vec![vec![
            n.to_string(),
            target[0].to_string(),
            target[1].to_string(),
            r.attempts.to_string(),
            r.accepted.to_string(),
            f(r.acceptance_rate),
            f(r.acceptance_stderr),
            f(r.event_probability.estimate),
        ]];
        (records, summary)
    };
    out.jsonl("condition_samples.jsonl", records)?;
    out.csv(
        "condition_summary.csv",
        &["n", "left", "right", "attempts", "accepted", "acceptance_rate", "stderr", "mean_likelihood_ratio"],
        &summary,
    )?;

    let rows: Vec<Vec<String>> = if want < 2 {
        Vec::new()
    } else {
        martingale_convergence_experiment(&sim, &mu, TestFunctional::ExpFirstExit { f: 1.0 }, &cfg.n_schedule, want, 32, cfg.seed)?
            .iter()
            .map(|r| {
                vec![
                    r.n.to_string(),
                    f(r.mean_of_conditional_means),
                    f(r.unconditional.estimate),
                    f(r.unconditional.stderr),
                    f(r.dispersion),
                    f(r.dispersion_stderr),
                    f(r.total_variance),
                ]
            })
            .collect()
    };
    out.csv(
        "condition_dispersion.csv",
        &["n", "mean_conditional", "mean", "stderr", "dispersion", "dispersion_stderr", "variance"],
        &rows,
    )?;

    let stage = sim.stage(&SimulationLaw::plain(), &d)?;
    let exits: Vec<[f64; 2]> =
        replicate(want, cfg.seed, "cli.condition.weak", |rng| Ok(stage.run(&mu, &[], rng)?.side_masses(&d)))?;
    let rows: Vec<Vec<String>> = if exits.is_empty() {
        Vec::new()
    } else {
        weak_convergence_experiment(&exits, &cfg.n_schedule, cfg.verify.weak_draws, cfg.seed)
            .iter()
            .map(|r| vec![r.n.to_string(), f(r.distance.estimate), f(r.distance.stderr)])
            .collect()
    };
    out.csv("condition_weak.csv", &["n", "l1_distance", "stderr"], &rows)?;
    println!("wrote conditioning outputs to {}", out.dir.display());
    Ok(())
}

fn cmd_backbone(cfg: &ExperimentConfig, out: &Output) -> Result<()> {
    let sim = cfg.simulator()?;
    let mu = cfg.mu_measure();
    let ex = cfg.exhaustion(&sim)?;
    let sampler = ConditionedSampler::new(&sim, &mu, cfg.nu_counts, cfg.nu_level, &ex, cfg.family_cells())?;
    let mut domains = ex.clone();
    domains.push(sim.domain);
    let draws = replicate(cfg.replicates, cfg.seed, "cli.backbone", |rng| {
        sampler.sample(rng).map_err(|e| SimError::Input(e.to_string()))
    })?;
    let records = draws.iter().enumerate().map(|(i, dr)| {
        let per = |ms: &[AtomicMeasure]| ms.iter().zip(&domains).map(|(m, dd)| side_masses(m, dd)).collect::<Vec<_>>();
        json!({
            "replicate": i,
            "z": per(&dr.z),
            "w": per(&dr.w),
            "y": per(&dr.y),
            "tree_nodes": dr.tree.nodes.len(),
            "capped_steps": dr.tree.capped_steps,
        })
    });
    out.jsonl("backbone_z.jsonl", records)?;
    out.jsonl(
        "backbone_trees.jsonl",
        draws.iter().take(10).enumerate().map(|(i, dr)| json!({"replicate": i, "tree": dr.tree.to_json()})),
    )?;
    println!("wrote {} backbone draws to {}", draws.len(), out.dir.display());
    Ok(())
}

fn cmd_verify(cfg: &ExperimentConfig, out: &Output, suite: Suite) -> Result<u8> {
    let outcome = run_acceptance_suite(cfg, cfg.seed, suite);
    let table = outcome.table();
    print!("{table}");
    fs::write(out.path("report.txt"), format!("# config_hash={} seed={}\n{table}", out.hash, out.seed))?;
    out.json("report.json", serde_json::to_value(&outcome)?)?;
    Ok(outcome.exit_code as u8)
}

fn run(cli: &Cli, cfg: &ExperimentConfig) -> Result<u8> {
    if let Command::Verify { suite } = &cli.command {
        let suite: Suite = match suite.parse() {
            Ok(s) => s,
            Err(e) => {
                eprintln!("usage error: {e}");
                return Ok(EXIT_CONFIG);
            }
        };
        let out = Output::new(cfg)?;
        return cmd_verify(cfg, &out, suite);
    }
    let out = Output::new(cfg)?;
    match &cli.command {
        Command::Pde => cmd_pde(cfg, &out)?,
        Command::Simulate { which } => cmd_simulate(cfg, &out, *which)?,
        Command::Condition => cmd_condition(cfg, &out)?,
        Command::Backbone => cmd_backbone(cfg, &out)?,
        Command::Verify { .. } => unreachable!(),
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    exitlab::seeding::install_thread_limit();
    let cfg = match load_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("configuration error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    match run(&cli, &cfg) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            if let Some(BackboneError::TooManyAtoms { .. }) = e.downcast_ref::<BackboneError>() {
                eprintln!("resource error: {e}");
            } else {
                eprintln!("error: {e:#}");
            }
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
