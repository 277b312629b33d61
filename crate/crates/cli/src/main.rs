//! `bidomain`: operator inspection, model checks, single runs and Monte-Carlo
//! experiments for the stochastic bidomain system.
//!
//! Exit codes: 0 success or `within_bound`, 2 `violated_beyond_CI`,
//! 3 `inconclusive`, 1 any error.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use bidomain_core::experiments::{tail_bound, ExperimentReport};
use bidomain_core::{
    build_operator, check_model, check_summability, invariant_support, make_spectrum, simulate, small_noise_deviation,
    stationary_coupling, tail_probability, SampleBox, SimInputs, Verdict,
};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::Config;
use crate::run::{Manifest, RunDir};

type Failure = Box<dyn std::error::Error>;

#[derive(Parser, Debug)]
#[command(name = "bidomain", version, about = "Stochastic bidomain simulator and verification harness")]
struct Cli {
    #[command(subcommand)]
    command: CommandArgs,

    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Re-run from a previous manifest instead of a config file.
    #[arg(long, global = true, conflicts_with = "config")]
    manifest: Option<PathBuf>,

    /// Master seed; overrides `sim.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Monte-Carlo replicas; overrides `experiment.replicas`.
    #[arg(long, global = true)]
    replicas: Option<usize>,

    /// Worker threads. Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Parent of the run directory [env: BIDOMAIN_OUT_DIR, default: runs].
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
enum CommandArgs {
    /// Spectrum, operator constants and fingerprint.
    OperatorInfo {
        /// Also report noise summability.
        #[arg(long)]
        #[serde(default)]
        noise: bool,
    },
    /// Growth, dissipativity, monotonicity and coefficient conditions.
    CheckModel,
    /// One trajectory with its energy ledger.
    Simulate,
    /// A Monte-Carlo experiment.
    Experiment {
        #[arg(value_enum)]
        kind: ExperimentKind,
    },
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum ExperimentKind {
    SmallNoise,
    Tail,
    Stationary,
    Support,
}

struct Outcome {
    report: serde_json::Value,
    files: Vec<(String, String)>,
    code: u8,
}

fn verdict_code(v: Verdict) -> u8 {
    match v {
        Verdict::WithinBound => 0,
        Verdict::ViolatedBeyondCi => 2,
        Verdict::Inconclusive => 3,
    }
}

fn experiment_outcome(rep: ExperimentReport) -> Result<Outcome, Failure> {
    let code = verdict_code(rep.verdict);
    let csv = rep.per_replica.to_csv();
    Ok(Outcome {
        report: serde_json::to_value(&rep)?,
        files: vec![("replicas.csv".into(), csv)],
        code,
    })
}

fn execute(command: CommandArgs, cfg: &Config) -> Result<Outcome, Failure> {
    let grid = cfg.grid()?;
    let spec = cfg.conductivity(&grid);
    let op = build_operator(&spec, &grid)?;
    let model = cfg.model();
    let (rule, modes) = cfg.decay_rule();

    match command {
        CommandArgs::OperatorInfo { noise } => {
            let c = op.constants();
            let eig = op.eigenvalues();
            let mut report = json!({
                "command": "operator-info",
                "nodes": op.len(),
                "dimension": grid.dimension(),
                "leading_eigenvalues": &eig[..eig.len().min(21)],
                "lambda_max": op.lambda_max(),
                "symmetry_defect": op.symmetry_defect(),
                "constants": c,
                "operator_fingerprint": run::fingerprint(&op, &spec),
            });
            if noise {
                let spectrum = make_spectrum(rule, modes, &op)?;
                report["noise"] = serde_json::to_value(check_summability(&spectrum, &op))?;
            }
            let mut csv = String::from("k,lambda\n");
            for (k, l) in eig.iter().enumerate() {
                csv.push_str(&format!("{k},{l:e}\n"));
            }
            Ok(Outcome { report, files: vec![("eigenvalues.csv".into(), csv)], code: 0 })
        }
        CommandArgs::CheckModel => {
            let c = op.constants();
            let rep = check_model(&model, SampleBox::default(), Some((c.alpha, c.poincare_cp)))?;
            Ok(Outcome { report: serde_json::to_value(&rep)?, files: Vec::new(), code: 0 })
        }
        CommandArgs::Simulate => {
            let spectrum = make_spectrum(rule, modes, &op)?;
            let mut sim = cfg.sim_config(&grid);
            sim.c3 = Some(sim.resolve_c3(&model)?);
            let init = cfg.initial_state(&grid);
            let rec = simulate(&init, &sim, &op, &model, &spectrum, cfg.sim.seed)?;
            let last = rec.ledger.rows.last().cloned();
            let mut state_csv = String::from("node,x,y,u,w\n");
            let s = &rec.final_state;
            for (i, (u, w)) in s.u.values().iter().zip(s.w.values()).enumerate() {
                let x = grid.coords(i);
                let y = if grid.dimension() == 2 { x[1] } else { 0.0 };
                state_csv.push_str(&format!("{i},{:e},{y:e},{u:e},{w:e}\n", x[0]));
            }
            let report = json!({
                "command": "simulate",
                "steps": rec.steps,
                "t_final": s.t,
                "sup_energy": rec.ledger.sup_energy(),
                "final_row": last,
            });
            Ok(Outcome {
                report,
                files: vec![("ledger.csv".into(), rec.ledger.to_csv()), ("final_state.csv".into(), state_csv)],
                code: 0,
            })
        }
        CommandArgs::Experiment { kind } => {
            let spectrum = make_spectrum(rule, modes, &op)?;
            let mut sim = cfg.sim_config(&grid);
            sim.c3 = Some(sim.resolve_c3(&model)?);
            let init = cfg.initial_state(&grid);
            let mc = cfg.mc();
            let inputs = SimInputs { op: &op, model: &model, spectrum: &spectrum, config: &sim, initial: &init };
            let rep = match kind {
                ExperimentKind::SmallNoise => small_noise_deviation(&cfg.experiment.epsilons, inputs, &mc)?,
                ExperimentKind::Tail => {
                    let eps = sim.epsilon;
                    let t = sim.steps() as f64 * sim.dt;
                    let r = cfg.experiment.radius.unwrap_or_else(|| {
                        // radius giving a bound of 0.3
                        (4.0 * spectrum.trace() * eps * eps * t * 10f64.ln()).sqrt()
                    });
                    eprintln!("tail: radius {r}, analytic bound {}", tail_bound(r, eps, spectrum.trace(), t));
                    tail_probability(r, eps, inputs, &mc)?
                }
                ExperimentKind::Stationary => stationary_coupling(cfg.stationary(), inputs, &mc)?,
                ExperimentKind::Support => {
                    let mut s = sim.clone();
                    s.record_every = 1;
                    let inputs = SimInputs { config: &s, ..inputs };
                    invariant_support(&cfg.experiment.horizons, inputs, &mc)?
                }
            };
            for d in &rep.diagnostics {
                eprintln!("diagnostic: {d}");
            }
            experiment_outcome(rep)
        }
    }
}

fn load(cli: &Cli) -> Result<(CommandArgs, Config), Failure> {
    let (command, mut cfg) = match (&cli.config, &cli.manifest) {
        (_, Some(path)) => {
            let m = Manifest::read(path)?;
            let recorded: CommandArgs = serde_json::from_value(m.command.clone())?;
            if recorded != cli.command {
                return Err(format!("manifest {} records command {}, not the one requested", path.display(), m.command).into());
            }
            let mut cfg: Config = serde_json::from_value(m.config)?;
            cfg.sim.seed = m.seed;
            (recorded, cfg)
        }
        (Some(path), None) => {
            let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
            let cfg = Config::parse(&text).map_err(|e| format!("{}: {e}", path.display()))?;
            (cli.command, cfg)
        }
        (None, None) => return Err("either --config or --manifest is required".into()),
    };
    if let Some(seed) = cli.seed {
        cfg.sim.seed = seed;
    }
    if let Some(r) = cli.replicas {
        if r < 2 {
            return Err("--replicas must be >= 2".into());
        }
        cfg.experiment.replicas = r;
    }
    Ok((command, cfg))
}

fn main_inner(cli: Cli) -> Result<u8, Failure> {
    if let Some(t) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(t).build_global()?;
    }
    let (command, cfg) = load(&cli)?;
    let parent = cli
        .out_dir
        .clone()
        .or_else(|| std::env::var_os("BIDOMAIN_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"));

    // the fingerprint needs the operator; built once more inside `execute`
    let grid = cfg.grid()?;
    let spec = cfg.conductivity(&grid);
    let fingerprint = run::fingerprint(&build_operator(&spec, &grid)?, &spec);

    let mut dir = RunDir::create(&parent, cfg.sim.seed)?;
    let mut manifest = Manifest::start(serde_json::to_value(command)?, serde_json::to_value(&cfg)?, cfg.sim.seed, fingerprint);
    manifest.threads = cli.threads;
    dir.write_manifest(&manifest)?;
    eprintln!("run directory: {}", dir.path().display());

    let result = execute(command, &cfg);
    match result {
        Ok(out) => {
            let report = serde_json::to_string_pretty(&out.report)? + "\n";
            for (name, body) in &out.files {
                dir.write_output(&mut manifest, name, body)?;
            }
            dir.write_output(&mut manifest, "report.json", &report)?;
            manifest.finish("ok");
            dir.write_manifest(&manifest)?;
            print!("{report}");
            Ok(out.code)
        }
        Err(e) => {
            manifest.finish(&format!("error: {e}"));
            dir.write_manifest(&manifest)?;
            Err(e)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match main_inner(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn verdicts_map_to_exit_codes() {
        assert_eq!(verdict_code(Verdict::WithinBound), 0);
        assert_eq!(verdict_code(Verdict::ViolatedBeyondCi), 2);
        assert_eq!(verdict_code(Verdict::Inconclusive), 3);
    }

    #[test]
    fn command_survives_manifest_round_trip() {
        let c = CommandArgs::Experiment { kind: ExperimentKind::SmallNoise };
        let v = serde_json::to_value(c).unwrap();
        assert_eq!(v, json!({"name": "experiment", "kind": "small-noise"}));
        assert_eq!(serde_json::from_value::<CommandArgs>(v).unwrap(), c);
    }
}
