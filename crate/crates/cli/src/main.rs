use std::net::TcpListener;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use handgf_cli::config::RunConfig;
use handgf_cli::error::{CliError, Result};
use handgf_cli::pipeline::{ablation_modes, comparison_table, write_traces, Run};
use handgf_cli::plot;
use handgf_cli::server::{serve, Catalog, ServeOptions};
use handgf_core::eval::{format_reports, MetricsReport};
use handgf_core::graspdata::Split;
use handgf_core::graspgf::ScoreModel;
use handgf_core::nn::Checkpoint;
use handgf_core::rl::{alignment_trace, parse_curve, AblationFlags, ResidualPolicy, WristNoise};

#[derive(Parser)]
#[command(
    name = "handgf",
    version,
    about = "Planar human-assisting grasping: data, training, evaluation and live sessions"
)]
struct Cli {
    /// Run configuration (TOML with sections hand, objects, trajgen, gf, rl, eval, server).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed; artifacts go to `<run root>/<config hash>-s<seed>`.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the grasp dataset and its object split.
    SynthData,
    /// Build the training and test trajectory pattern libraries.
    GenPatterns,
    /// Train the gradient field.
    TrainGf,
    /// Train a residual policy.
    TrainRl {
        #[arg(long, default_value = "full")]
        flags: String,
    },
    /// Evaluate one flag combination.
    Eval {
        #[arg(long, default_value = "full")]
        flags: String,
        #[arg(long, default_value = "train")]
        split: String,
        /// Wrist observation noise as `degrees,centimeters`.
        #[arg(long)]
        noise: Option<String>,
        /// Also evaluate every noise level of the config.
        #[arg(long)]
        noise_sweep: bool,
        /// Write state traces of every episode.
        #[arg(long)]
        trace: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare the action-mode ablations on one split.
    Ablate {
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Roll out a few episodes and write their full state traces.
    Demo {
        #[arg(long, default_value = "full")]
        flags: String,
        #[arg(long, default_value_t = 1)]
        episodes: usize,
    },
    /// Serve interactive sessions over TCP.
    Serve {
        #[arg(long)]
        addr: Option<String>,
    },
    /// Render training curves and action traces to SVG.
    Plot {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_split(s: &str) -> Result<Split> {
    Split::from_name(s).ok_or_else(|| CliError::Config(format!("unknown split {s:?}")))
}

fn parse_noise(s: &str) -> Result<WristNoise> {
    let bad = || CliError::Config(format!("noise must be `degrees,centimeters`, got {s:?}"));
    let (d, c) = s.split_once(',').ok_or_else(bad)?;
    let deg: f64 = d.trim().parse().map_err(|_| bad())?;
    let cm: f64 = c.trim().parse().map_err(|_| bad())?;
    if !(deg >= 0.0 && cm >= 0.0) {
        return Err(bad());
    }
    Ok(WristNoise { deg, cm })
}

fn flags(s: &str) -> Result<AblationFlags> {
    Ok(AblationFlags::parse(s)?)
}

fn run_command(cli: Cli) -> Result<()> {
    let path = cli
        .config
        .ok_or_else(|| CliError::Config("missing --config".into()))?;
    let cfg = RunConfig::load(&path)?;
    let run = Run::open(cfg, cli.seed, &Run::root_from_env())?;
    log::info!("run directory {}", run.dir.display());
    match cli.command {
        Command::SynthData => {
            let ds = run.dataset()?;
            println!(
                "{} grasps over {} objects",
                ds.examples.len(),
                ds.splits.len()
            );
        }
        Command::GenPatterns => {
            let (train, test) = run.patterns()?;
            println!(
                "{} training patterns, {} test patterns",
                train.len(),
                test.len()
            );
        }
        Command::TrainGf => {
            run.gf()?;
            println!("{}", run.path("gf.ckpt").display());
        }
        Command::TrainRl { flags: f } => {
            let f = flags(&f)?;
            if f.no_rl {
                return Err(CliError::Config("no_rl has no policy to train".into()));
            }
            run.policy(&f)?;
            println!("trained {}", f.name());
        }
        Command::Eval {
            flags: f,
            split,
            noise,
            noise_sweep,
            trace,
            out,
        } => {
            let f = flags(&f)?;
            let split = parse_split(&split)?;
            let mut levels = vec![noise.as_deref().map(parse_noise).transpose()?];
            if noise_sweep {
                levels.extend(
                    run.cfg
                        .eval
                        .noise_levels
                        .iter()
                        .map(|&(deg, cm)| Some(WristNoise { deg, cm })),
                );
            }
            let mut reports: Vec<MetricsReport> = Vec::new();
            for (i, n) in levels.into_iter().enumerate() {
                let (r, episodes) = run.evaluate(&f, split, n, trace)?;
                if trace {
                    write_traces(
                        &run.path(&format!("eval_trace_{}_{i}.txt", f.name())),
                        &run.hash,
                        &episodes,
                    )?;
                }
                reports.push(r);
            }
            let text = format_reports(&reports);
            let out = out
                .unwrap_or_else(|| run.path(&format!("report_{}_{}.txt", split.name(), f.name())));
            std::fs::write(&out, &text)?;
            print!("{text}");
        }
        Command::Ablate { split, out } => {
            let split = parse_split(&split)?;
            let mut rows = Vec::new();
            for (name, f) in ablation_modes() {
                let (r, _) = run.evaluate(&f, split, None, false)?;
                rows.push((name, r));
            }
            let reports: Vec<MetricsReport> = rows.iter().map(|(_, r)| r.clone()).collect();
            let table = comparison_table(&rows);
            let text = format!(
                "# config {}\n{table}\n{}",
                run.hash,
                format_reports(&reports)
            );
            let out = out.unwrap_or_else(|| run.path(&format!("ablation_{}.txt", split.name())));
            std::fs::write(&out, &text)?;
            print!("{table}");
        }
        Command::Demo { flags: f, episodes } => {
            let p = run.demo(&flags(&f)?, episodes.max(1))?;
            println!("{}", p.display());
        }
        Command::Serve { addr } => {
            let gf_path = run.path("gf.ckpt");
            let gf = if gf_path.exists() {
                Some(ScoreModel::from_checkpoint(&Checkpoint::load(&gf_path)?)?)
            } else {
                log::warn!("no trained gradient field in {}", run.dir.display());
                None
            };
            let mut policies = Vec::new();
            for entry in std::fs::read_dir(&run.dir)? {
                let p = entry?.path();
                let name = p
                    .file_name()
                    .and_then(|n| n.to_str())
                    .unwrap_or_default()
                    .to_string();
                if let Some(key) = name
                    .strip_prefix("policy_")
                    .and_then(|n| n.strip_suffix(".ckpt"))
                {
                    let (pol, _) = ResidualPolicy::from_checkpoint(&Checkpoint::load(&p)?)?;
                    policies.push((key.to_string(), pol));
                }
            }
            let ds = run.dataset()?;
            let catalog = Catalog {
                hand: run.cfg.hand.model.clone(),
                env: run.cfg.hand.env.clone(),
                objects: run.library(),
                grasps: ds.examples.clone(),
                gf,
                policies,
            };
            let addr = addr.unwrap_or_else(|| run.cfg.server.addr.clone());
            let listener = TcpListener::bind(&addr)?;
            eprintln!("listening on {}", listener.local_addr()?);
            let opts = ServeOptions {
                tick_hz: run.cfg.server.tick_hz,
                lockstep: run.cfg.server.lockstep,
                max_sessions: None,
            };
            serve(listener, &catalog, &opts)?;
        }
        Command::Plot { out } => {
            let dir = out.unwrap_or_else(|| run.dir.clone());
            std::fs::create_dir_all(&dir)?;
            let mut curves = Vec::new();
            let mut names: Vec<PathBuf> = std::fs::read_dir(&run.dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    p.file_name()
                        .and_then(|n| n.to_str())
                        .is_some_and(|n| n.starts_with("curve_") && n.ends_with(".txt"))
                })
                .collect();
            names.sort();
            for p in names {
                let label = p
                    .file_stem()
                    .and_then(|n| n.to_str())
                    .unwrap_or_default()
                    .trim_start_matches("curve_");
                curves.push((
                    label.to_string(),
                    parse_curve(&std::fs::read_to_string(&p)?)?,
                ));
            }
            if curves.is_empty() {
                return Err(CliError::Data(
                    "no training curves in the run directory".into(),
                ));
            }
            plot::training_curves(&dir.join("training_curves.svg"), &curves)?;
            let (_, episodes) =
                run.evaluate(&AblationFlags::default(), Split::Train, None, false)?;
            plot::action_trace(&dir.join("action_trace.svg"), &alignment_trace(&episodes))?;
            println!("{}", dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run_command(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("handgf: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
