use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use switchwatch::config::Config;
use switchwatch::experiment::{self, adaptation_label, Layout, Method, TrainOutcome};
use switchwatch::metrics::report;
use switchwatch::selftest;
use switchwatch::train::trainer::describe;
use switchwatch::train::ModelKind;

#[derive(Parser, Debug)]
#[command(name = "switchwatch", version, about = "Online partner-switch detection benchmark")]
struct Cli {
    /// TOML configuration. Defaults to `<out>/config.toml` when that exists.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output root.
    #[arg(long, global = true, env = "SWITCHWATCH_OUT", default_value = "switchwatch-out")]
    out: PathBuf,

    /// Override any configuration leaf, e.g. `--set train.epochs=20`.
    #[arg(long = "set", global = true, value_name = "TABLE.KEY=VALUE")]
    set: Vec<String>,

    /// Worker threads for episode-parallel stages; 0 uses all cores.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(flatten)]
    run: RunFlags,

    #[command(flatten)]
    ws: WorkspaceFlags,

    #[command(subcommand)]
    cmd: Cmd,
}

/// One flag per workspace field.
#[derive(Args, Debug, Default)]
struct WorkspaceFlags {
    /// Workspace extent along x, metres.
    #[arg(long, global = true)]
    width: Option<f64>,
    /// Workspace extent along y, metres.
    #[arg(long, global = true)]
    depth: Option<f64>,
    /// Separation below which a step is a collision.
    #[arg(long, global = true)]
    collision_dist: Option<f64>,
    /// Separation counted as close range (CRT).
    #[arg(long, global = true)]
    close_range_dist: Option<f64>,
    /// Steps per episode.
    #[arg(long, global = true)]
    episode_len: Option<usize>,
    /// Earliest switch step.
    #[arg(long, global = true)]
    switch_lo: Option<usize>,
    /// Latest switch step.
    #[arg(long, global = true)]
    switch_hi: Option<usize>,
    /// Also applied to both learned models.
    #[arg(long, global = true)]
    dt: Option<f64>,
    /// Also applied to both learned models.
    #[arg(long, global = true)]
    v_max: Option<f64>,
    /// Passive partner jitter amplitude.
    #[arg(long, global = true)]
    jitter_eps: Option<f64>,
    /// Grasp radius around the object.
    #[arg(long, global = true)]
    grasp_eps: Option<f64>,
    /// Per-axis Gaussian velocity noise of the active partner types.
    #[arg(long, global = true)]
    motion_noise: Option<f64>,
}

/// Experiment size and method selection.
#[derive(Args, Debug, Default)]
struct RunFlags {
    /// Comma-separated experiment seeds.
    #[arg(long, global = true, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Comma-separated methods: uatom, gru, bocpd, Oracle, Ctx, NoDetect.
    #[arg(long, global = true, value_delimiter = ',', value_parser = parse_method)]
    methods: Option<Vec<Method>>,
    /// Training episodes per transition and seed.
    #[arg(long, global = true)]
    train_per_transition: Option<usize>,
    /// Evaluation episodes per transition, seed and method.
    #[arg(long, global = true)]
    eval_per_transition: Option<usize>,
}

fn parse_method(s: &str) -> Result<Method, String> {
    Method::from_label(s).ok_or_else(|| format!("unknown method {s}"))
}

impl RunFlags {
    fn apply(&self, cfg: &mut Config) {
        let r = &mut cfg.run;
        if let Some(v) = &self.seeds {
            r.seeds = v.clone();
        }
        if let Some(v) = &self.methods {
            r.methods = v.clone();
        }
        if let Some(v) = self.train_per_transition {
            r.train_per_transition = v;
        }
        if let Some(v) = self.eval_per_transition {
            r.eval_per_transition = v;
        }
    }
}

impl WorkspaceFlags {
    fn apply(&self, cfg: &mut Config) {
        let w = &mut cfg.workspace;
        macro_rules! put {
            ($($f:ident),*) => {$( if let Some(v) = self.$f { w.$f = v; } )*};
        }
        put!(width, depth, collision_dist, close_range_dist, episode_len, switch_lo, switch_hi, jitter_eps, grasp_eps, motion_noise);
        if let Some(dt) = self.dt {
            w.dt = dt;
            cfg.uatom.dt = dt;
            cfg.gru.dt = dt;
        }
        if let Some(v) = self.v_max {
            cfg.workspace.v_max = v;
            cfg.uatom.v_max = v;
            cfg.gru.v_max = v;
        }
    }
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Write the resolved config and the per-seed training sets.
    Gen,
    /// Train the learned detectors, resuming compatible checkpoints.
    Train {
        /// `uatom`, `gru` or `all`.
        #[arg(long, default_value = "all")]
        kind: String,
        /// Restrict to one seed of the configured list.
        #[arg(long)]
        seed: Option<u64>,
        /// Replace checkpoints trained under a different configuration.
        #[arg(long)]
        overwrite: bool,
    },
    /// Closed-loop evaluation of every condition; writes `<out>/eval`.
    Eval,
    /// Aggregate `<out>/eval` into CSV and markdown tables under `<out>/report`.
    Report,
    /// Numerical oracles and invariant suites.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// gen, train, eval and report in sequence.
    Run,
}

fn resolve(cli: &Cli) -> switchwatch::Result<Config> {
    let stored = cli.out.join("config.toml");
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None if stored.exists() => Config::load(&stored)?,
        None => Config::default(),
    };
    cli.ws.apply(&mut cfg);
    cli.run.apply(&mut cfg);
    for s in &cli.set {
        cfg.set(s)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn kinds(arg: &str) -> switchwatch::Result<Vec<ModelKind>> {
    match arg {
        "all" => Ok(vec![ModelKind::Uatom, ModelKind::Gru]),
        k => Ok(vec![k.parse()?]),
    }
}

fn train(cfg: &Config, layout: &Layout, kind: &str, seed: Option<u64>, overwrite: bool) -> switchwatch::Result<()> {
    let seeds: Vec<u64> = match seed {
        Some(s) if cfg.run.seeds.contains(&s) => vec![s],
        Some(s) => {
            return Err(switchwatch::Error::InvalidInput(format!(
                "seed {s} is not in run.seeds {:?}",
                cfg.run.seeds
            )))
        }
        None => cfg.run.seeds.clone(),
    };
    for k in kinds(kind)? {
        for &s in &seeds {
            let outcome = experiment::train_seed(cfg, layout, k, s, overwrite, |rec| {
                let mut line = Vec::new();
                let _ = describe(rec, &mut line);
                log::info!("{} seed {s}: {}", k.name(), String::from_utf8_lossy(&line).trim_end());
            })?;
            match outcome {
                TrainOutcome::Cached => log::info!("{} seed {s}: checkpoint complete, skipped", k.name()),
                TrainOutcome::Trained { from_epoch } => {
                    log::info!("{} seed {s}: trained from epoch {from_epoch}", k.name())
                }
            }
        }
    }
    Ok(())
}

fn eval(cfg: &Config, layout: &Layout) -> switchwatch::Result<()> {
    let out = experiment::evaluate(cfg, layout)?;
    experiment::write_eval(layout, &out, &cfg.eval.tolerances)?;
    log::info!("{} evaluation episodes -> {}", out.episodes.len(), layout.eval_dir().display());
    Ok(())
}

fn report(cfg: &Config, layout: &Layout) -> switchwatch::Result<()> {
    let md = report::generate(&layout.eval_dir(), &layout.report_dir(), adaptation_label(cfg.ego.adaptation))?;
    println!("{md}");
    Ok(())
}

fn run(cli: &Cli) -> switchwatch::Result<bool> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .map_err(|e| switchwatch::Error::InvalidInput(e.to_string()))?;
    }
    if let Cmd::Selftest { seed } = cli.cmd {
        let checks = selftest::run_all(seed);
        for c in &checks {
            println!("{} {:<24} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        }
        return Ok(checks.iter().all(|c| c.passed));
    }
    let cfg = resolve(cli)?;
    let layout = Layout::new(&cli.out);
    match &cli.cmd {
        Cmd::Gen => {
            let m = experiment::generate(&cfg, &layout)?;
            println!("{}", serde_json::to_string_pretty(&m)?);
        }
        Cmd::Train { kind, seed, overwrite } => train(&cfg, &layout, kind, *seed, *overwrite)?,
        Cmd::Eval => eval(&cfg, &layout)?,
        Cmd::Report => report(&cfg, &layout)?,
        Cmd::Run => {
            experiment::generate(&cfg, &layout)?;
            train(&cfg, &layout, "all", None, false)?;
            eval(&cfg, &layout)?;
            report(&cfg, &layout)?;
        }
        Cmd::Selftest { .. } => unreachable!(),
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
