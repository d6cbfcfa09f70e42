use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use step_core::config::PlannerConfig;
use step_core::dynamics::{ModelKind, State, Trajectory};
use step_core::geom::{plan_geometric, GeomOutcome, GeometricPath};
use step_core::gridmap::{GridMap, Point2};
use step_core::mpc::{build_sqp_qp, reference_trajectory, Scene};
use step_core::polygeom::decompose_risk_obstacles;
use step_core::polygeom::Roi;
use step_core::render::{render_map, Overlays, RenderStyle};
use step_core::risk::{build_risk_map, RiskLevel};
use step_core::sim::{episode_seed, generate_random_world, monte_carlo, run_episode, WorldSpec};
use step_core::{Error, Result};

#[derive(Parser)]
#[command(name = "step", version, about = "Risk-aware traversability planning toolkit")]
struct Cli {
    /// Planner configuration (TOML); every field is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// CVaR risk level, overriding the configuration.
    #[arg(long, global = true)]
    alpha: Option<f64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum, PartialEq, Eq)]
enum Format {
    Text,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a random world; writes the observed map.
    GenWorld {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also write the ground-truth map here.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Compute risk factors, aggregate risk and CVaR from elevation.
    BuildRisk {
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// A* over position risk.
    PlanGeometric {
        #[arg(long)]
        map: PathBuf,
        /// Start as `x,y`.
        #[arg(long, allow_hyphen_values = true)]
        start: String,
        #[arg(long, allow_hyphen_values = true)]
        goal: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// One MPC replan along a geometric path.
    PlanMpc {
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        path: PathBuf,
        /// Initial state: `x,y,theta,v` (diff-drive) or six values.
        #[arg(long, allow_hyphen_values = true)]
        state: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write the first SQP subproblem as JSON.
        #[arg(long)]
        dump_qp: Option<PathBuf>,
        /// Report wall time on stderr.
        #[arg(long)]
        timing: bool,
    },
    /// One closed-loop episode on a random world.
    Simulate {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Batch of episodes over several risk levels.
    MonteCarlo {
        #[arg(long, default_value_t = 50)]
        runs: usize,
        #[arg(long, value_delimiter = ',', default_values_t = [0.05, 0.3, 0.5, 0.7, 0.95])]
        alphas: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Per-run table (CSV).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Aggregates (JSON).
        #[arg(long)]
        summary: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
        /// Fill the wall_time_ms column (makes output run-dependent).
        #[arg(long)]
        timing: bool,
    },
    /// Draw the risk classes of a map with optional overlays (PPM).
    Render {
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        path: Option<PathBuf>,
        #[arg(long)]
        trajectory: Option<PathBuf>,
        /// Outline obstacle polygons at this CVaR threshold.
        #[arg(long)]
        obstacles: Option<f64>,
        #[arg(long, default_value_t = 4)]
        scale: usize,
    },
}

fn parse_floats(text: &str, what: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|t| {
            t.trim().parse::<f64>().map_err(|e| Error::Parse {
                context: what.into(),
                message: format!("{t:?}: {e}"),
            })
        })
        .collect()
}

fn parse_point(text: &str, what: &str) -> Result<Point2> {
    match parse_floats(text, what)?[..] {
        [x, y] => Ok([x, y]),
        _ => Err(Error::Parse {
            context: what.into(),
            message: format!("expected x,y, got {text:?}"),
        }),
    }
}

fn parse_state(text: &str, kind: ModelKind) -> Result<State> {
    let v = parse_floats(text, "state")?;
    match (kind, &v[..]) {
        (ModelKind::DiffDrive, [x, y, th, vx]) => Ok(State::diff_drive(*x, *y, *th, *vx)),
        (_, [x, y, th, vx, vy, w]) => Ok(State::general(*x, *y, *th, *vx, *vy, *w)),
        _ => Err(Error::Parse {
            context: "state".into(),
            message: format!("expected 4 (diff-drive) or 6 values, got {}", v.len()),
        }),
    }
}

fn write_out(out: Option<&Path>, body: &[u8]) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, body).map_err(|e| Error::Io {
            path: p.to_path_buf(),
            source: e,
        }),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(body).and_then(|_| stdout.flush()).map_err(|e| Error::Io {
                path: "<stdout>".into(),
                source: e,
            })
        }
    }
}

fn json_value(text: &str) -> serde_json::Value {
    serde_json::from_str(text).expect("library output is valid JSON")
}

fn load_config(cli: &Cli) -> Result<PlannerConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PlannerConfig::load(p)?,
        None => PlannerConfig::default(),
    };
    if let Some(a) = cli.alpha {
        cfg.set_alpha(RiskLevel::new(a)?);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::GenWorld { seed, out, truth } => {
            let world = generate_random_world(&WorldSpec {
                seed,
                ..cfg.sim.world.clone()
            })?;
            let (true_map, observed) = world.maps();
            observed.save(&out)?;
            if let Some(t) = truth {
                true_map.save(&t)?;
            }
            let line = json!({"seed": seed, "start": world.start, "goal": world.goal});
            println!("{line}");
        }
        Command::BuildRisk { map, out } => {
            let mut m = GridMap::load(&map)?;
            build_risk_map(&mut m, &cfg.risk.factors, cfg.geometric.alpha)?;
            m.save(&out)?;
        }
        Command::PlanGeometric { map, start, goal, out } => {
            let m = GridMap::load(&map)?;
            let start = parse_point(&start, "start")?;
            let goal = parse_point(&goal, "goal")?;
            match plan_geometric(&m, start, goal, &cfg.geometric)? {
                GeomOutcome::Path(p) => {
                    write_out(out.as_deref(), p.to_json().as_bytes())?;
                    eprintln!(
                        "path: {} poses, length {:.3} m, risk {:.4}, cost {:.4}",
                        p.poses.len(),
                        p.total_length,
                        p.total_risk,
                        p.cost
                    );
                }
                GeomOutcome::NoPath { reason } => {
                    return Err(Error::InvalidArgument(format!("no path: {reason}")));
                }
            }
        }
        Command::PlanMpc {
            map,
            path,
            state,
            seed,
            out,
            dump_qp,
            timing,
        } => {
            let m = GridMap::load(&map)?;
            let path = GeometricPath::load(&path)?;
            let mpc = cfg.mpc()?;
            let x0 = parse_state(&state, mpc.model.kind)?;
            if let Some(dump) = dump_qp {
                let scene = Scene::new(&m, mpc.cfg.alpha, mpc.cfg.rho_max, Some(mpc.planning_roi(&x0)))?;
                let reference = reference_trajectory(&mpc, &scene, &x0, &path);
                let follow = mpc.model.rollout(x0, &vec![Default::default(); mpc.cfg.horizon]);
                build_sqp_qp(&mpc, &scene, &follow, &reference)?.qp.save(&dump)?;
            }
            let res = mpc.replan(&x0, None, &path, &m, seed)?;
            let body = json!({
                "feasible": res.feasible,
                "source": res.source,
                "alpha": res.alpha_used,
                "stats": res.stats,
                "trajectory": json_value(&res.trajectory.to_json(&mpc.model)),
            });
            write_out(out.as_deref(), format!("{}\n", serde_json::to_string_pretty(&body).expect("json")).as_bytes())?;
            if timing {
                eprintln!("replan wall time: {:.3} ms", res.stats.wall_time_ms);
            }
        }
        Command::Simulate { seed, out } => {
            let world = generate_random_world(&WorldSpec {
                seed,
                ..cfg.sim.world.clone()
            })?;
            let ep = run_episode(&world, world.start, world.goal, &cfg, episode_seed(seed))?;
            let states: Vec<[f64; 3]> = ep.states.iter().map(State::pose).collect();
            let body = json!({
                "seed": seed,
                "alpha": cfg.mpc.alpha,
                "start": world.start,
                "goal": world.goal,
                "success": ep.success,
                "failure_reason": ep.failure_reason,
                "path_length_m": ep.path_length,
                "max_risk": ep.max_risk,
                "mean_cvar": ep.mean_cvar,
                "steps": ep.steps,
                "infeasible_cycles": ep.infeasible_cycles,
                "poses": states,
            });
            write_out(out.as_deref(), format!("{}\n", serde_json::to_string_pretty(&body).expect("json")).as_bytes())?;
        }
        Command::MonteCarlo {
            runs,
            alphas,
            seed,
            jobs,
            out,
            summary,
            format,
            timing,
        } => {
            let levels = alphas.iter().map(|a| RiskLevel::new(*a)).collect::<Result<Vec<_>>>()?;
            let report = monte_carlo(runs, &levels, &cfg, seed, jobs, timing)?;
            let csv = report.to_csv()?;
            if let Some(p) = &out {
                write_out(Some(p), csv.as_bytes())?;
            }
            if let Some(p) = &summary {
                write_out(Some(p), format!("{}\n", report.summary_json()).as_bytes())?;
            }
            match format {
                Format::Csv if out.is_none() => write_out(None, csv.as_bytes())?,
                Format::Csv => {}
                Format::Text => {
                    let mut text = String::from("alpha  runs  success  median_path_m  median_max_risk\n");
                    for g in &report.aggregates {
                        let med = |q: Option<step_core::sim::Quartiles>| q.map_or("-".to_string(), |q| format!("{:.3}", q.median));
                        text.push_str(&format!(
                            "{:<5}  {:>4}  {:>7.2}  {:>13}  {:>15}\n",
                            g.alpha,
                            g.runs,
                            g.success_rate,
                            med(g.path_length_m),
                            med(g.max_risk)
                        ));
                    }
                    let fmt = |v: Option<f64>| v.map_or("undefined".to_string(), |v| format!("{v:.3}"));
                    text.push_str(&format!(
                        "spearman(alpha, path_length) = {}\nspearman(alpha, max_risk) = {}\n",
                        fmt(report.spearman_alpha_path_length),
                        fmt(report.spearman_alpha_max_risk)
                    ));
                    write_out(None, text.as_bytes())?;
                }
            }
        }
        Command::Render {
            map,
            out,
            path,
            trajectory,
            obstacles,
            scale,
        } => {
            let m = GridMap::load(&map)?;
            let level = cfg.geometric.alpha;
            let path = path.map(|p| GeometricPath::load(&p)).transpose()?;
            let traj = trajectory
                .map(|p| {
                    let text = std::fs::read_to_string(&p).map_err(|e| Error::Io { path: p.clone(), source: e })?;
                    // accept both a bare trajectory and plan-mpc output
                    let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Parse {
                        context: p.display().to_string(),
                        message: e.to_string(),
                    })?;
                    let inner = v.get("trajectory").cloned().unwrap_or(v);
                    Trajectory::from_json(&inner.to_string())
                })
                .transpose()?;
            let polys = match obstacles {
                Some(t) => decompose_risk_obstacles(&m, level, t, Roi::whole(&m))?,
                None => Vec::new(),
            };
            let overlays = Overlays {
                paths: path.iter().map(|p| &p.poses[..]).collect(),
                trajectories: traj.iter().map(|t| t.states.iter().map(State::position).collect()).collect(),
                polygons: polys.iter().collect(),
            };
            let style = RenderStyle {
                pixels_per_cell: scale,
                ..RenderStyle::default()
            };
            render_map(&m, level, &overlays, &style)?.save(&out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("STEP_LOG")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {}: {msg}", e.kind());
            ExitCode::FAILURE
        }
    }
}
