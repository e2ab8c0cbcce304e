use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use dcecc::asm::Branch;
use dcecc::config::{apply_overrides, load_scenario, Algorithm, ScenarioSpec};
use dcecc::experiments::{run_suite, run_to_dir, Suite, SuiteOptions};
use dcecc::fluid::{
    classify_trajectory, delay_robustness_bounds, eigenvalues, h0_width, integrate_fluid, sliding_condition,
    BranchMode, FluidSystem, OmegaStarForm, QcnStabilityParams,
};
use dcecc::{Error, Result};

#[derive(Parser)]
#[command(name = "dcecc", version, about = "Link-layer congestion control simulator and fluid-model analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ScenarioArgs {
    /// Scenario file, or the name of a bundled one.
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_algorithm)]
    algorithm: Option<Algorithm>,
    /// `key=value`, repeatable; dotted keys reach nested fields.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn parse_algorithm(s: &str) -> std::result::Result<Algorithm, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one scenario and write trace.csv and metrics.txt.
    Run {
        /// Scenario file (same as --scenario).
        path: Option<PathBuf>,
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run an experiment suite: one subdirectory per point plus summary.csv.
    Suite {
        name: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_parser = parse_algorithm)]
        algorithm: Option<Algorithm>,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Fluid-model analyses; CSV on stdout or to --out.
    Analyze {
        #[command(subcommand)]
        kind: Analysis,
        #[arg(long, global = true)]
        out: Option<PathBuf>,
    },
    /// Parse and check a scenario without running it.
    Validate {
        path: Option<PathBuf>,
        #[command(flatten)]
        scenario: ScenarioArgs,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum RegimeArg {
    Approach,
    Sliding,
}

#[derive(Clone, Copy, ValueEnum)]
enum BranchArg {
    Plus,
    Minus,
}

#[derive(Subcommand)]
enum Analysis {
    /// Sliding condition of the scenario's approach and sliding gains.
    SlidingCheck {
        #[command(flatten)]
        scenario: ScenarioArgs,
    },
    /// Eigenvalues and trajectory shape of every regime and branch.
    Eigen {
        #[command(flatten)]
        scenario: ScenarioArgs,
    },
    /// Smallest feedback delay at which QCN loses stability.
    QcnTau {
        /// Link capacity in bits/s; repeatable. Defaults to 10, 25, 40 and 100 Gb/s.
        #[arg(long)]
        capacity: Vec<f64>,
        /// Parameter file; defaults to the bundled one.
        #[arg(long)]
        params: Option<PathBuf>,
        /// Use the alternative form of the phase-crossing frequency.
        #[arg(long)]
        printed: bool,
    },
    /// Delay-robustness bounds and the width of the region around the
    /// stable point.
    H0 {
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// Feedback delay in seconds.
        #[arg(long)]
        tau: f64,
        /// State size |x1| + |x2| at which to evaluate the bounds; defaults to q0.
        #[arg(long)]
        l: Option<f64>,
    },
    /// Integrate the switched fluid model.
    FluidSim {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long, default_value_t = 0.0)]
        tau: f64,
        /// Initial queue offset in packets.
        #[arg(long, default_value_t = 50.0)]
        x1: f64,
        /// Initial rate offset in packets/s.
        #[arg(long, default_value_t = 0.0)]
        x2: f64,
        #[arg(long, value_enum, default_value = "sliding")]
        regime: RegimeArg,
        /// Hold one branch instead of switching.
        #[arg(long, value_enum)]
        frozen: Option<BranchArg>,
        #[arg(long)]
        t_end: Option<f64>,
        #[arg(long)]
        dt: Option<f64>,
    },
}

fn load(path: Option<&Path>, args: &ScenarioArgs) -> Result<ScenarioSpec> {
    let path = path
        .or(args.scenario.as_deref())
        .unwrap_or_else(|| Path::new("dumbbell3.cfg"));
    let mut spec = load_scenario(path)?;
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    if let Some(a) = args.algorithm {
        spec.algorithm = a;
    }
    apply_overrides(&spec, &args.overrides)
}

fn fluid(spec: &ScenarioSpec) -> Result<[FluidSystem; 2]> {
    spec.fluid_systems()
        .ok_or_else(|| Error::Validation("scenario has no bottleneck carrying traffic".into()))
}

const REGIMES: [&str; 2] = ["approach", "sliding"];

fn analyze(kind: &Analysis) -> Result<String> {
    let mut out = String::new();
    match kind {
        Analysis::SlidingCheck { scenario } => {
            let spec = load(None, scenario)?;
            out.push_str("regime,lhs_minus,lhs_plus,holds\n");
            for (name, sys) in REGIMES.iter().zip(fluid(&spec)?) {
                let c = sliding_condition(&sys);
                let _ = writeln!(out, "{name},{},{},{}", c.lhs_minus, c.lhs_plus, c.holds);
            }
        }
        Analysis::Eigen { scenario } => {
            let spec = load(None, scenario)?;
            out.push_str("regime,branch,root1_re,root1_im,root2_re,root2_im,shape,sliding_consistent\n");
            for (name, sys) in REGIMES.iter().zip(fluid(&spec)?) {
                for branch in [Branch::Plus, Branch::Minus] {
                    let (l1, l2) = eigenvalues(&sys, branch);
                    let shape = if l1.im != 0.0 { "spiral" } else { "parabola" };
                    let consistent = classify_trajectory(&sys, branch).is_ok();
                    let b = if branch == Branch::Plus { "plus" } else { "minus" };
                    let _ = writeln!(
                        out,
                        "{name},{b},{},{},{},{},{shape},{consistent}",
                        l1.re, l1.im, l2.re, l2.im
                    );
                }
            }
        }
        Analysis::QcnTau {
            capacity,
            params,
            printed,
        } => {
            let mut base = match params {
                Some(p) => toml::from_str(&std::fs::read_to_string(p)?)
                    .map_err(|e| Error::Parse {
                        line: 0,
                        message: e.to_string(),
                    })?,
                None => QcnStabilityParams::recommended(),
            };
            if *printed {
                base.omega_star = OmegaStarForm::Printed;
            }
            let caps = if capacity.is_empty() {
                vec![10e9, 25e9, 40e9, 100e9]
            } else {
                capacity.clone()
            };
            out.push_str("capacity_bps,omega_star,omega_bar,tau_min_s\n");
            for c in caps {
                let s = base.with_capacity(c).evaluate()?;
                let _ = writeln!(out, "{c},{},{},{}", s.omega_star, s.omega_bar, s.tau_min);
            }
        }
        Analysis::H0 { scenario, tau, l } => {
            let spec = load(None, scenario)?;
            let l = l.unwrap_or(spec.q0_packets);
            out.push_str("regime,tau_s,nu1,nu2,drift_amplitude,e1_bound,h0_width_pkts\n");
            for (name, sys) in REGIMES.iter().zip(fluid(&spec)?) {
                let r = delay_robustness_bounds(&sys, *tau)?;
                let e1 = r.e1_bound(l);
                let width = h0_width(&sys, e1).map_or("inf".to_string(), |d| d.to_string());
                let _ = writeln!(
                    out,
                    "{name},{tau},{},{},{},{e1},{width}",
                    r.nu1,
                    r.nu2,
                    r.drift_amplitude * l
                );
            }
        }
        Analysis::FluidSim {
            scenario,
            tau,
            x1,
            x2,
            regime,
            frozen,
            t_end,
            dt,
        } => {
            let spec = load(None, scenario)?;
            let [approach, sliding] = fluid(&spec)?;
            let mut sys = match regime {
                RegimeArg::Approach => approach,
                RegimeArg::Sliding => sliding,
            };
            sys.tau = *tau;
            let time_const = sys.w / sys.pc();
            let stiff = sys.branch_gains(Branch::Plus).0.max(sys.branch_gains(Branch::Minus).0);
            let dt = dt.unwrap_or_else(|| {
                let mut h = time_const.min(1.0 / stiff.sqrt()) / 200.0;
                if *tau > 0.0 {
                    h = h.min(tau / 10.0);
                }
                h
            });
            let mode = match frozen {
                None => BranchMode::Switched,
                Some(BranchArg::Plus) => BranchMode::Frozen(Branch::Plus),
                Some(BranchArg::Minus) => BranchMode::Frozen(Branch::Minus),
            };
            let traj = integrate_fluid(&sys, [*x1, *x2], t_end.unwrap_or(10.0 * time_const), dt, mode)?;
            out.push_str("t_s,q_pkts,x1_pkts,x2_pps,fb\n");
            let stride = (traj.len() / 5000).max(1);
            for i in (0..traj.len()).step_by(stride) {
                let (a, b) = (traj.x1[i], traj.x2[i]);
                let _ = writeln!(out, "{},{},{a},{b},{}", traj.t[i], sys.q0 + a, sys.feedback(a, b));
            }
        }
    }
    Ok(out)
}

/// Writes to stdout, treating a closed pipe as success.
fn emit(text: &str) -> Result<()> {
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { path, scenario, out } => {
            let spec = load(path.as_deref(), &scenario)?;
            let (metrics, digest) = run_to_dir(&spec, &out)?;
            emit(&format!("{}trace_sha256={digest}\n", metrics.to_kv()))?;
        }
        Command::Suite {
            name,
            out,
            seed,
            algorithm,
            overrides,
        } => {
            let suite: Suite = name.parse()?;
            let out = out.unwrap_or_else(|| PathBuf::from("out").join(suite.name()));
            let opts = SuiteOptions {
                seed,
                algorithm,
                overrides,
            };
            let report = run_suite(suite, &out, &opts)?;
            emit(&std::fs::read_to_string(&report.summary_path)?)?;
        }
        Command::Analyze { kind, out } => {
            let csv = analyze(&kind)?;
            match out {
                Some(p) => std::fs::write(p, csv)?,
                None => emit(&csv)?,
            }
        }
        Command::Validate { path, scenario } => {
            let spec = load(path.as_deref(), &scenario)?;
            println!(
                "{}: {} hosts, {} switches, {} links, {} flows",
                spec.name,
                spec.hosts.len(),
                spec.switches.len(),
                spec.links.len(),
                spec.flows.len()
            );
            if let Some(checks) = spec.sliding_checks() {
                for (name, c) in REGIMES.iter().zip(checks) {
                    println!("{name} sliding condition: {}", if c.holds { "holds" } else { "fails" });
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
