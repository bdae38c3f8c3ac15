use clap::{Parser, Subcommand, ValueEnum};
use eot::config::ConfigFile;
use eot::experiment::{evaluate, run_experiment, track, tracker_setup, Method, RunConfig, ScenarioSource};
use eot::io::{load_scenario, load_trace, save_scenario, save_trace, TraceMeta, TRACE_SCHEMA};
use eot::report::{load_glob, save_metrics, write_report};
use eot::scenario::{generate, ScenarioKind, ScenarioParams};
use eot::{EotError, Result};
use eot_core::MotionModel;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "eot", version, about = "Radar and camera extended object tracking experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    LaneChange,
    UTurn,
}

impl From<Kind> for ScenarioKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::LaneChange => ScenarioKind::LaneChange,
            Kind::UTurn => ScenarioKind::UTurn,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Motion {
    Ctrv,
    Cv,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize a scenario file
    Generate {
        #[arg(long, value_enum)]
        scenario: Kind,
        #[arg(long, default_value_t = 10.0)]
        alpha: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the tracker over a scenario file and write the trace
    Track {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "ctrv")]
        motion: Motion,
        #[arg(long, value_enum, default_value = "on")]
        es: Switch,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a trace against the scenario truth
    Evaluate {
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        est: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize metrics files
    Report {
        #[arg(long = "in")]
        input: String,
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        plot_data: Option<PathBuf>,
    },
    /// Generate, track and score a batch of seeds for every method
    Run {
        #[arg(long, value_enum)]
        scenario: Kind,
        #[arg(long, default_value_t = 10.0)]
        alpha: f64,
        /// Seeds 0..N
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        /// Subset of CTRV+ES, CTRV, CV+ES, CV (default: all)
        #[arg(long, value_delimiter = ',')]
        methods: Vec<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<ConfigFile> {
    path.map(ConfigFile::load).transpose().map(Option::unwrap_or_default)
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Generate { scenario, alpha, seed, out } => {
            if !alpha.is_finite() || alpha <= 0.0 {
                return Err(EotError::Config("--alpha must be positive".into()));
            }
            let sc = generate(&ScenarioParams::preset(scenario.into(), alpha), seed);
            save_scenario(&out, &sc)?;
            log::info!("wrote {} frames to {}", sc.frames.len(), out.display());
        }
        Cmd::Track { config, motion, es, input, out } => {
            let cfg = load_config(config.as_deref())?;
            let method = Method {
                motion: match motion {
                    Motion::Ctrv => MotionModel::Ctrv,
                    Motion::Cv => MotionModel::Cv,
                },
                es_fusion: matches!(es, Switch::On),
            };
            let sc = load_scenario(&input)?;
            let (mut hp, template) = tracker_setup(sc.meta.as_ref(), &cfg)?;
            method.apply(&mut hp);
            let trace = track(&sc, &hp, &template)?;
            let meta = TraceMeta { schema: TRACE_SCHEMA.into(), method: method.to_string() };
            save_trace(&out, &meta, &trace)?;
        }
        Cmd::Evaluate { truth, est, out } => {
            let sc = load_scenario(&truth)?;
            let (meta, trace) = load_trace(&est)?;
            let method = meta.map(|m| m.method).unwrap_or_else(|| "unknown".into());
            let m = evaluate(&sc, &trace, &method)?;
            save_metrics(&out, &m)?;
            println!("{method}: mean IOU xy {:.3} yz {:.3} zx {:.3}, RMSE_v {:.3} m/s", m.mean_iou_xy, m.mean_iou_yz, m.mean_iou_zx, m.rmse_v);
        }
        Cmd::Report { input, csv, plot_data } => {
            let runs = load_glob(&input)?;
            if runs.is_empty() {
                log::warn!("no metrics files match `{input}`");
            }
            write_report(&runs, &csv, plot_data.as_deref())?;
        }
        Cmd::Run { scenario, alpha, seeds, methods, config, out_dir } => {
            let cfg = load_config(config.as_deref())?;
            let methods: Vec<Method> = if methods.is_empty() {
                Method::ALL.to_vec()
            } else {
                methods.iter().map(|m| m.parse()).collect::<Result<_>>()?
            };
            std::fs::create_dir_all(&out_dir).map_err(|e| EotError::Io { path: out_dir.clone(), source: e })?;
            let params = ScenarioParams::preset(scenario.into(), alpha);
            for method in methods {
                let rc = RunConfig {
                    method,
                    config: cfg.clone(),
                    source: ScenarioSource::Generated(Box::new(params.clone())),
                    seeds: (0..seeds).collect(),
                };
                for (seed, r) in rc.seeds.iter().zip(run_experiment(&rc)?) {
                    let stem = format!("{}_{}_a{}_s{seed}", params.kind.name(), method.to_string().replace('+', "-"), alpha);
                    save_metrics(&out_dir.join(format!("{stem}.metrics.json")), &r.metrics)?;
                    save_trace(&out_dir.join(format!("{stem}.trace.jsonl")), &r.trace_meta, &r.trace)?;
                    println!("{stem}: IOU_xy {:.3} RMSE_v {:.3}", r.metrics.mean_iou_xy, r.metrics.rmse_v);
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
