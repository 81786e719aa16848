use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use dircp::config::{default_toml, OutputFormat, RunConfig, SEED_ENV};
use dircp::eval::{reports_csv, run_method, svg_line_chart, sweep, threshold_key, EvalContext};
use dircp::geometry::write_box_list;
use dircp::learn::train_scorer;
use dircp::pipeline::Method;
use dircp::scenario::generate;
use dircp::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

/// Direction-aware collaborative perception simulator.
#[derive(Parser, Debug)]
#[command(name = "dircp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML config file; omitted keys take their defaults.
    config: Option<PathBuf>,
    /// Output directory, overriding `output.directory`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Evaluate each configured method on every seed and write reports.
    Run {
        #[command(flatten)]
        common: Common,
        /// Communication budget, overriding `comms.q_max`.
        #[arg(long)]
        budget: Option<f64>,
    },
    /// Evaluate budgets x sigmas x methods and write tables and curves.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated budgets, overriding `eval.budgets`.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        budgets: Option<Vec<f64>>,
        /// Comma-separated loss sigmas, overriding `eval.sigmas`.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        sigmas: Option<Vec<f64>>,
        /// Number of evaluation seeds, overriding `eval.n_seeds`.
        #[arg(long)]
        seeds: Option<usize>,
        /// Worker threads (default: all cores).
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Train the query scorer and write a checkpoint and loss log.
    Train {
        #[command(flatten)]
        common: Common,
        /// Gradient steps, overriding `train.steps`.
        #[arg(long)]
        steps: Option<usize>,
        /// Learning rate, overriding `train.lr`.
        #[arg(long)]
        lr: Option<f64>,
        /// Loss sigma, overriding `loss.sigma`.
        #[arg(long)]
        sigma: Option<f64>,
    },
    /// Write one generated scene and its ground-truth boxes.
    ExportScene {
        #[command(flatten)]
        common: Common,
        /// Scene seed, overriding `scenario.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn config_help() -> String {
    format!(
        "Config keys and defaults ({SEED_ENV} overrides scenario.seed):\n\n{}",
        default_toml()
    )
}

fn load_config(common: &Common) -> Result<(RunConfig, PathBuf), Error> {
    let mut cfg = match &common.config {
        None => RunConfig::default(),
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                Error::Config(vec![format!("cannot read config {}: {e}", path.display())])
            })?;
            let cfg: RunConfig = RunConfig::from_toml_str(&text).map_err(|e| match e {
                Error::Config(p) => Error::Config(
                    p.into_iter()
                        .map(|m| format!("{}: {m}", path.display()))
                        .collect(),
                ),
                other => other,
            })?;
            cfg
        }
    };
    cfg.apply_seed_env()?;
    if let Some(out) = &common.out {
        cfg.output.directory = out.display().to_string();
    }
    let dir = PathBuf::from(&cfg.output.directory);
    Ok((cfg, dir))
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<(), Error> {
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

fn prepare_dir(cfg: &RunConfig, dir: &Path) -> Result<(), Error> {
    cfg.validate()?;
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.display().to_string(),
        source,
    })?;
    write(dir, "effective_config.toml", &cfg.to_toml())
}

fn cmd_run(common: &Common, budget: Option<f64>) -> Result<(), Error> {
    let (mut cfg, dir) = load_config(common)?;
    if let Some(b) = budget {
        cfg.comms.q_max = b;
    }
    prepare_dir(&cfg, &dir)?;
    let scenes = cfg.prepare_scenes(&cfg.eval_seeds())?;
    let attention = cfg.attention()?;
    let scorer = cfg.scorer(&attention)?;
    let settings = cfg.settings();
    let ctx = EvalContext {
        settings: &settings,
        attention: &attention,
        thresholds: &cfg.eval.iou_thresholds,
    };
    let mut reports = Vec::new();
    let mut trace = None;
    for &m in &cfg.eval.methods {
        let (report, fused) = run_method(&scenes, m, cfg.comms.q_max, &scorer, &ctx)?;
        if trace.is_none() || (m != Method::Single && trace.as_ref().is_some_and(|(tm, _)| *tm == Method::Single)) {
            trace = fused.map(|f| (m, f));
        }
        reports.push(report);
    }
    if cfg.wants(OutputFormat::Json) {
        write(&dir, "report.json", &serde_json::to_string_pretty(&reports).expect("reports serialize"))?;
    }
    if cfg.wants(OutputFormat::Csv) {
        write(&dir, "report.csv", &reports_csv(&reports))?;
    }
    if let Some((_, fused)) = trace {
        write(&dir, "attention_trace.csv", &fused.attention_csv())?;
    }
    for r in &reports {
        let key = threshold_key(cfg.eval.iou_thresholds[0]);
        println!(
            "{:<9} AP@{key}={:.4} bytes={}",
            r.method.name(),
            r.metrics.ap_at_iou[&key],
            r.metrics.bytes_transmitted
        );
    }
    Ok(())
}

fn cmd_sweep(
    common: &Common,
    budgets: Option<Vec<f64>>,
    sigmas: Option<Vec<f64>>,
    seeds: Option<usize>,
    jobs: Option<usize>,
) -> Result<(), Error> {
    let (mut cfg, dir) = load_config(common)?;
    if let Some(b) = budgets {
        cfg.eval.budgets = b;
    }
    if let Some(s) = sigmas {
        cfg.eval.sigmas = s;
    }
    if let Some(n) = seeds {
        cfg.eval.n_seeds = n;
    }
    if jobs == Some(0) {
        return Err(Error::Config(vec!["--jobs must be at least 1".into()]));
    }
    prepare_dir(&cfg, &dir)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .map_err(|e| Error::Config(vec![format!("cannot start worker pool: {e}")]))?;
    let table = pool.install(|| -> Result<_, Error> {
        let scenes = cfg.prepare_scenes(&cfg.eval_seeds())?;
        let attention = cfg.attention()?;
        let settings = cfg.settings();
        let ctx = EvalContext {
            settings: &settings,
            attention: &attention,
            thresholds: &cfg.eval.iou_thresholds,
        };
        sweep(&scenes, &cfg.sweep_spec(), &cfg.scorer_policy()?, &ctx)
    })?;
    if cfg.wants(OutputFormat::Csv) {
        write(&dir, "sweep.csv", &table.to_csv())?;
    }
    if cfg.wants(OutputFormat::Json) {
        write(&dir, "sweep.json", &table.to_json())?;
    }
    if cfg.wants(OutputFormat::Svg) {
        for t in &cfg.eval.iou_thresholds {
            let key = threshold_key(*t);
            let overall = table.curves(|r| Some(r.ap_at_iou[&key]));
            write(
                &dir,
                &format!("ap_iou{key}_vs_budget.svg"),
                &svg_line_chart(&format!("AP@IoU={key}"), "budget", "AP", &overall),
            )?;
            let masked = table.curves(|r| r.masked_sector_ap[&key]);
            write(
                &dir,
                &format!("masked_ap_iou{key}_vs_budget.svg"),
                &svg_line_chart(&format!("masked-sector AP@PD-IoU={key}"), "budget", "AP", &masked),
            )?;
        }
    }
    println!("{} rows written to {}", table.rows.len(), dir.display());
    Ok(())
}

fn cmd_train(common: &Common, steps: Option<usize>, lr: Option<f64>, sigma: Option<f64>) -> Result<(), Error> {
    let (mut cfg, dir) = load_config(common)?;
    if let Some(s) = steps {
        cfg.train.steps = s;
    }
    if let Some(l) = lr {
        cfg.train.lr = l;
    }
    if let Some(s) = sigma {
        cfg.loss.sigma = s;
    }
    prepare_dir(&cfg, &dir)?;
    let attention = cfg.attention()?;
    let batch = cfg.training_batch()?;
    let out = train_scorer(&cfg.scorer_init(), &attention, &batch, &cfg.train_config())?;
    let path = dir.join("scorer.dcpw");
    std::fs::write(&path, out.params.to_checkpoint()).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    write(&dir, "train_log.csv", &out.log_csv())?;
    println!(
        "dw_loss {:.6} -> {:.6} over {} steps",
        out.initial_loss(),
        out.final_loss(),
        cfg.train.steps
    );
    Ok(())
}

fn cmd_export_scene(common: &Common, seed: Option<u64>) -> Result<(), Error> {
    let (mut cfg, dir) = load_config(common)?;
    if let Some(s) = seed {
        cfg.scenario.seed = s;
    }
    prepare_dir(&cfg, &dir)?;
    let world = generate(&cfg.scenario_config(cfg.scenario.seed))?;
    write(&dir, "scene.json", &world.to_json())?;
    write(&dir, "truth_boxes.csv", &write_box_list(&world.vehicles))?;
    println!("scene {} with {} vehicles", cfg.scenario.seed, world.vehicles.len());
    Ok(())
}

fn main() -> ExitCode {
    let help = config_help();
    let mut cmd = Cli::command().after_help(help.clone());
    for name in ["run", "sweep", "train", "export-scene"] {
        let h = help.clone();
        cmd = cmd.mut_subcommand(name, move |c| c.after_help(h));
    }
    let cli = match Cli::from_arg_matches(&cmd.get_matches()) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let result = match &cli.command {
        Command::Run { common, budget } => cmd_run(common, *budget),
        Command::Sweep {
            common,
            budgets,
            sigmas,
            seeds,
            jobs,
        } => cmd_sweep(common, budgets.clone(), sigmas.clone(), *seeds, *jobs),
        Command::Train {
            common,
            steps,
            lr,
            sigma,
        } => cmd_train(common, *steps, *lr, *sigma),
        Command::ExportScene { common, seed } => cmd_export_scene(common, *seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is_config() => {
            eprintln!("error: {e}");
            eprintln!("run `dircp --help` for usage and config keys");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
