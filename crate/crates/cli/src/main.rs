use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use deepbass::em::{IterationReport, StatusReporter};
use deepbass::experiments::{
    export_decision_grid, preset, preset_names, preset_text, run_dir, run_experiment_with, run_once_with,
    write_decision_grid, Bounds, DatasetConfig, ExperimentConfig, OracleConfig,
};
use deepbass::models::Checkpoint;
use deepbass::oracle::{OracleQueue, QueueConfig, RemoteOracle, RunState, SystemClock};
use deepbass_oracle_http::{serve, ServiceState};

#[derive(Parser, Debug)]
#[command(name = "deepbass", version, about = "Active semi-supervised training with MC-dropout pseudo-labels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug, Clone, Default)]
struct Overrides {
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of repetitions.
    #[arg(long)]
    runs: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Directory with the MNIST IDX files.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// EM iterations.
    #[arg(long)]
    iterations: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run an experiment from a config file or a preset name.
    Run {
        config: String,
        #[command(flatten)]
        overrides: Overrides,
        /// Print only the summary.
        #[arg(long, short)]
        quiet: bool,
    },
    /// Export the red-class probability grid of a 2-D checkpoint as CSV.
    Grid {
        checkpoint: PathBuf,
        /// x_min,x_max,y_min,y_max
        #[arg(allow_hyphen_values = true)]
        bounds: String,
        /// Points per axis, `N` or `NXxNY`.
        resolution: String,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List presets, or print one as TOML.
    Presets {
        #[arg(long)]
        show: Option<String>,
    },
    /// Run one repetition with a human oracle served over HTTP.
    ServeOracle {
        config: String,
        #[command(flatten)]
        overrides: Overrides,
        /// Address to listen on; overrides the config.
        #[arg(long)]
        bind: Option<String>,
        /// Shared run token; overrides the config.
        #[arg(long)]
        token: Option<String>,
        /// Stop serving when the run finishes instead of waiting for Ctrl-C.
        #[arg(long)]
        exit_when_done: bool,
    },
}

fn load_config(name: &str, o: &Overrides) -> Result<ExperimentConfig> {
    let mut cfg = if Path::new(name).exists() {
        ExperimentConfig::load(Path::new(name))?
    } else if preset_names().contains(&name) {
        preset(name)?
    } else {
        bail!(
            "{name:?} is neither a config file nor a preset; presets: {}",
            preset_names().join(", ")
        );
    };
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    if let Some(r) = o.runs {
        cfg.runs = r;
    }
    if let Some(out) = &o.out {
        cfg.output_dir = out.clone();
    }
    if let Some(i) = o.iterations {
        cfg.loop_cfg.iterations = i;
    }
    if let (Some(d), DatasetConfig::Mnist { dir, .. }) = (&o.data_dir, &mut cfg.dataset) {
        *dir = d.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn progress_line(run: usize, r: &IterationReport) -> String {
    let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
    format!(
        "run {run} iter {:>3}  val_acc {:.4}  labeled {:>5}  pseudo {:>6}  pseudo_err {}  theta {}{}",
        r.iteration,
        r.val_acc,
        r.n_labeled,
        r.n_pseudo,
        opt(r.pseudo_err),
        opt(r.theta),
        r.oracle_error.as_deref().map(|e| format!("  oracle: {e}")).unwrap_or_default()
    )
}

fn parse_resolution(s: &str) -> Result<(usize, usize)> {
    let parse = |p: &str| p.trim().parse::<usize>().with_context(|| format!("resolution {s:?}"));
    match s.split_once(['x', 'X']) {
        Some((a, b)) => Ok((parse(a)?, parse(b)?)),
        None => {
            let n = parse(s)?;
            Ok((n, n))
        }
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            config,
            overrides,
            quiet,
        } => {
            let cfg = load_config(&config, &overrides)?;
            let summary = run_experiment_with(&cfg, &mut |run, r| {
                if !quiet {
                    eprintln!("{}", progress_line(run, r));
                }
            })?;
            for r in &summary.runs {
                if let Some(e) = &r.error {
                    eprintln!("run {} failed: {e}", r.run);
                }
            }
            let pct = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{:.2}", 100.0 * x));
            println!(
                "{}: {}/{} runs completed, mean {}%, std {}; results in {}",
                summary.name,
                summary.completed,
                summary.runs.len(),
                pct(summary.mean),
                pct(summary.std),
                run_dir(&cfg).display()
            );
        }
        Command::Grid {
            checkpoint,
            bounds,
            resolution,
            out,
        } => {
            let model = Checkpoint::load(&checkpoint)?;
            let bounds: Bounds = bounds.parse()?;
            let points = export_decision_grid(&model, bounds, parse_resolution(&resolution)?)?;
            match out {
                Some(path) => write_decision_grid(&points, &path)?,
                None => {
                    println!("x,y,p_red");
                    for p in points {
                        println!("{},{},{}", p.x, p.y, p.p_red);
                    }
                }
            }
        }
        Command::Presets { show } => match show {
            Some(name) => print!("{}", preset_text(&name)?),
            None => {
                for name in preset_names() {
                    let first = preset_text(name)?.lines().next().unwrap_or("");
                    println!("{name:<26} {}", first.trim_start_matches("# "));
                }
            }
        },
        Command::ServeOracle {
            config,
            overrides,
            bind,
            token,
            exit_when_done,
        } => serve_oracle(load_config(&config, &overrides)?, bind, token, exit_when_done)?,
    }
    Ok(())
}

fn serve_oracle(cfg: ExperimentConfig, bind: Option<String>, token: Option<String>, exit_when_done: bool) -> Result<()> {
    let (cfg_bind, timeout, journal, cfg_token) = match &cfg.oracle {
        OracleConfig::Remote {
            bind,
            timeout_secs,
            journal,
            token,
        } => (Some(bind.clone()), *timeout_secs, journal.clone(), token.clone()),
        OracleConfig::Simulated => (None, None, None, None),
    };
    let bind = bind.or(cfg_bind).unwrap_or_else(|| "127.0.0.1:8080".into());
    let token = token.or(cfg_token);
    cfg.check_paths()?;
    let dir = run_dir(&cfg);
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let classes = deepbass::models::ModelSpec::named(&cfg.model)?.num_classes()?;
    let queue = OracleQueue::with_clock(
        QueueConfig {
            run_id: cfg.name.clone(),
            classes,
            timeout: timeout.map(Duration::from_secs),
            journal: journal.or_else(|| Some(dir.join("oracle-journal.jsonl"))),
        },
        Arc::new(SystemClock),
    )?;
    queue.update_status(|s| {
        s.iterations = cfg.loop_cfg.iterations;
        s.labels_budget = cfg.loop_cfg.label_budget();
    });

    let rt = tokio::runtime::Runtime::new()?;
    let listener = rt.block_on(tokio::net::TcpListener::bind(&bind))?;
    eprintln!(
        "serving run {:?} on http://{}/v1/runs/{}/requests",
        cfg.name,
        listener.local_addr()?,
        cfg.name
    );
    let (done_tx, done_rx) = tokio::sync::oneshot::channel::<()>();
    let state = ServiceState::new([queue.clone()], token);
    let server = rt.spawn(serve(listener, state, async move {
        let ctrl_c = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        if exit_when_done {
            tokio::select! {
                _ = ctrl_c => {}
                _ = done_rx => {}
            }
        } else {
            ctrl_c.await;
        }
    }));

    let mut oracle = RemoteOracle::new(queue.clone());
    let mut status = StatusReporter(queue.clone());
    let result = run_once_with(
        &cfg,
        0,
        &dir,
        &mut |r| {
            eprintln!("{}", progress_line(0, r));
            deepbass::em::Reporter::report(&mut status, r)
        },
        Some(&mut oracle),
    );
    queue.update_status(|s| {
        s.state = if result.is_ok() {
            RunState::Completed
        } else {
            RunState::Failed
        }
    });
    match &result {
        Ok(out) => eprintln!(
            "run finished: final validation accuracy {:.4}{}",
            out.reports.last().map_or(f64::NAN, |r| r.val_acc),
            if exit_when_done { "" } else { "; press Ctrl-C to stop serving" }
        ),
        Err(e) => eprintln!("run failed: {e}"),
    }
    let _ = done_tx.send(());
    rt.block_on(server)??;
    result.map(|_| ()).map_err(Into::into)
}
