use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use compose_rl::hlm::SubtaskId;
use compose_rl::pipeline::{
    export_results, read_trajectory_csv, run_pipeline, svg, write_trajectory_csv, PipelineConfig, PipelineError,
    PolicyStore, RunStatus,
};
use compose_rl::policy::train_subtask_policy;
use compose_rl::seed::derive_seed;
use compose_rl::sim::FidelityConfig;
use compose_rl::synthesis::{synthesize, SynthesisError, SynthesisProblem};
use compose_rl::verify::{estimate_success_probability, execute_composition, render_estimates};

const EXIT_OTHER: u8 = 1;
const EXIT_INFEASIBLE: u8 = 2;
const EXIT_ITERATION_LIMIT: u8 = 3;
const EXIT_CONFIG: u8 = 4;

#[derive(Parser)]
#[command(
    name = "compose-rl",
    version,
    about = "Compositional RL pipeline for planar robot tasks"
)]
struct Cli {
    /// Pipeline config file (TOML).
    #[arg(long, global = true, default_value = "config.toml")]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Simulator tier for train, verify and compose.
    #[arg(long, global = true, value_enum)]
    fidelity: Option<Fidelity>,
    /// Overrides the config output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Fidelity {
    Low,
    High,
}

#[derive(Subcommand)]
enum Command {
    /// Check the config, composability and task compatibility.
    Validate,
    /// Print the synthesized meta-policy and subtask requirements.
    Synthesize,
    /// Train one subtask policy and store it.
    Train { subtask: String },
    /// Estimate one stored subtask policy's success probability.
    Verify { subtask: String },
    /// Run the full iterative pipeline and export results.
    Run,
    /// Execute the synthesized composition once and export its trajectory.
    Compose,
    /// Re-render the SVG overlay from exported trajectory CSVs.
    Plot,
}

enum Failure {
    Config(String),
    Other(String),
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(c) => Failure::Config(c.to_string()),
            other => Failure::Other(other.to_string()),
        }
    }
}

fn other(e: impl std::fmt::Display) -> Failure {
    Failure::Other(e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Other(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_OTHER)
        }
    }
}

fn execute(cli: &Cli) -> Result<u8, Failure> {
    let mut config = PipelineConfig::load(&cli.config).map_err(|e| Failure::Config(e.to_string()))?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.output_dir = out.clone();
    }
    let tier = |default: Fidelity| -> &FidelityConfig {
        match cli.fidelity.unwrap_or(default) {
            Fidelity::Low => &config.fidelity_low,
            Fidelity::High => &config.fidelity_high,
        }
    };
    let lookup = |id: &str| {
        config
            .subtask(&SubtaskId::from(id))
            .map(|s| s.subtask())
            .ok_or_else(|| Failure::Config(format!("unknown subtask `{id}`")))
    };

    match &cli.command {
        Command::Validate => {
            let hlm = config.hlm().map_err(|e| Failure::Config(e.to_string()))?;
            println!(
                "ok: {} subtasks, {} high-level states",
                config.subtasks.len(),
                hlm.states().len()
            );
            Ok(0)
        }
        Command::Synthesize => {
            let hlm = config.hlm().map_err(|e| Failure::Config(e.to_string()))?;
            let problem = SynthesisProblem::new(hlm, config.task.min_success_probability);
            match synthesize(&problem) {
                Ok(r) => {
                    println!("meta-policy:");
                    for (state, c) in &r.meta_policy.choice {
                        println!("  {state} -> {c}");
                    }
                    println!("subtask\tp_c");
                    for (c, p) in &r.params.values {
                        println!("{c}\t{p:.6}");
                    }
                    println!("achieved_bound\t{:.6}", r.achieved_bound);
                    Ok(0)
                }
                Err(SynthesisError::Infeasible | SynthesisError::NoPath) => {
                    println!("infeasible");
                    Ok(EXIT_INFEASIBLE)
                }
                Err(e) => Err(other(e)),
            }
        }
        Command::Train { subtask } => {
            let st = lookup(subtask)?;
            let budget = compose_rl::policy::TrainBudget {
                seed: derive_seed(config.seed, &format!("train/{}", st.id), config.budget.seed),
                ..config.budget
            };
            let report = train_subtask_policy(
                config.learner_for(&st.id),
                &st,
                &config.environment,
                tier(Fidelity::Low),
                &config.reward,
                &budget,
                None,
            )
            .map_err(other)?;
            for cp in &report.checkpoints {
                println!("step {}\tsuccess {:.3}", cp.steps, cp.success_rate);
            }
            let path = PolicyStore::new(&config.output_dir).save(&st, &report.policy)?;
            println!("saved {}", path.display());
            Ok(0)
        }
        Command::Verify { subtask } => {
            let st = lookup(subtask)?;
            let policy = PolicyStore::new(&config.output_dir)
                .load(&st)?
                .ok_or_else(|| Failure::from(PipelineError::MissingPolicy(st.id.clone())))?;
            let est = estimate_success_probability(
                &policy,
                &st,
                &config.environment,
                tier(Fidelity::Low),
                config.n_verify,
                config.alpha,
                derive_seed(config.seed, &format!("verify/{}", st.id), 0),
            )
            .map_err(other)?;
            let params = [(st.id.clone(), 0.0)].into_iter().collect();
            print!("{}", render_estimates(&[est], &params, config.gate_on_lower_bound));
            Ok(0)
        }
        Command::Run => {
            let run = run_pipeline(&config)?;
            let manifest = export_results(
                &run,
                &config.subtask_list(),
                &config.environment,
                config.gate_on_lower_bound,
                &config.output_dir,
            )?;
            for r in &run.reports {
                let path: Vec<&str> = r.synthesis.path.iter().map(|c| c.as_str()).collect();
                let caps: Vec<String> = r.caps_added.iter().map(|(c, p)| format!("{c}={p:.3}")).collect();
                println!(
                    "iteration {}: path {} bound {:.4} caps_added [{}]",
                    r.iteration,
                    path.join(" -> "),
                    r.synthesis.achieved_bound,
                    caps.join(", ")
                );
            }
            println!("status {:?}, {} files written", run.status, manifest.len());
            Ok(match run.status {
                RunStatus::OverallSuccess => 0,
                RunStatus::Infeasible => EXIT_INFEASIBLE,
                RunStatus::IterationLimit => EXIT_ITERATION_LIMIT,
            })
        }
        Command::Compose => {
            let hlm = config.hlm().map_err(|e| Failure::Config(e.to_string()))?;
            let problem = SynthesisProblem::new(hlm.clone(), config.task.min_success_probability);
            let synthesis = match synthesize(&problem) {
                Ok(r) => r,
                Err(SynthesisError::Infeasible | SynthesisError::NoPath) => {
                    println!("infeasible");
                    return Ok(EXIT_INFEASIBLE);
                }
                Err(e) => return Err(other(e)),
            };
            let store = PolicyStore::new(&config.output_dir);
            let subtasks = config.subtask_list();
            let mut policies = BTreeMap::new();
            for c in &synthesis.path {
                let st = lookup(c.as_str())?;
                let p = store
                    .load(&st)?
                    .ok_or_else(|| Failure::from(PipelineError::MissingPolicy(c.clone())))?;
                policies.insert(c.clone(), p);
            }
            let result = execute_composition(
                &hlm,
                &synthesis.meta_policy,
                &subtasks,
                &policies,
                &config.task,
                &config.environment,
                tier(Fidelity::High),
                derive_seed(config.seed, "compose", 0),
            )
            .map_err(other)?;
            let dir = config.output_dir.join("trajectories");
            std::fs::create_dir_all(&dir).map_err(other)?;
            let csv = dir.join("compose.csv");
            write_trajectory_csv(&csv, &result.trajectory)?;
            let doc = svg::render_overlay(&config.environment, &subtasks, &[result.trajectory.as_slice()]);
            let svg_path = config.output_dir.join("compose.svg");
            std::fs::write(&svg_path, doc).map_err(other)?;
            for (state, c) in &result.high_level_trace {
                println!("{state} -> {c}");
            }
            println!("outcome {:?}", result.outcome);
            println!("wrote {} and {}", csv.display(), svg_path.display());
            Ok(0)
        }
        Command::Plot => {
            let dir = config.output_dir.join("trajectories");
            let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)
                .map_err(|e| other(format!("{}: {e}", dir.display())))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "csv"))
                .collect();
            paths.sort();
            let mut tracks = Vec::new();
            for p in &paths {
                let file = std::fs::File::open(p).map_err(|e| other(format!("{}: {e}", p.display())))?;
                tracks.push(read_trajectory_csv(file).map_err(|e| other(format!("{}: {e}", p.display())))?);
            }
            let refs: Vec<&[_]> = tracks.iter().map(Vec::as_slice).collect();
            let doc = svg::render_overlay(&config.environment, &config.subtask_list(), &refs);
            let out = config.output_dir.join("overlay.svg");
            std::fs::write(&out, doc).map_err(other)?;
            println!("rendered {} trajectories to {}", paths.len(), out.display());
            Ok(0)
        }
    }
}
