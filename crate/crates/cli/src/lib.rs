//! Command-line front end: `datagen`, `train`, `eval`, `bench` and `inspect`.

use std::ffi::OsString;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use ragl::bench::{bench_scaling, format_bench, format_matrix, inspect_weights};
use ragl::checkpoint::{atomic_write, load_checkpoint, save_checkpoint};
use ragl::config::RunConfig;
use ragl::data::{
    format_text_series, geo_adjacency, load_series, parse_text_series, save_series, split_and_window, NormStats,
    SplitRatios, TrafficSeries, WindowSet,
};
use ragl::embedding::steps_per_day;
use ragl::metrics::DEFAULT_HORIZONS;
use ragl::model::{AdjacencyKind, Forecaster};
use ragl::synth::synth_generate;
use ragl::trainer::{evaluate, train, write_history};

#[derive(Parser, Debug)]
#[command(name = "ragl", version, about = "Traffic forecasting with regularized adaptive graph learning")]
struct Cli {
    /// Print every setting with its default value and exit.
    #[arg(long)]
    print_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// Settings file; flags take precedence over it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one setting, e.g. `--set model.d_node=32`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    /// Print the resolved settings and exit.
    #[arg(long)]
    print_config: bool,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
            None => RunConfig::default(),
        };
        for o in &self.overrides {
            cfg.set_override(o)?;
        }
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SeriesFormat {
    Binary,
    Text,
}

#[derive(Clone, Copy, Debug, ValueEnum, PartialEq)]
enum EvalSplit {
    Train,
    Val,
    Test,
    All,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a seeded synthetic traffic series.
    Datagen {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        /// Sampling interval in seconds.
        #[arg(long)]
        interval: Option<u32>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "binary")]
        format: SeriesFormat,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train a model and write its best checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        /// Per-epoch history CSV. Defaults to `<out>.history.csv`.
        #[arg(long)]
        history: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate a checkpoint and print the metrics table.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_HORIZONS.to_vec())]
        horizons: Vec<usize>,
        #[arg(long, value_enum, default_value = "test")]
        split: EvalSplit,
        /// Also write the table to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time the graph operators over a list of node counts.
    Bench {
        #[arg(long, value_delimiter = ',')]
        n: Option<Vec<usize>>,
        #[arg(long)]
        dnode: Option<usize>,
        #[arg(long)]
        d: Option<usize>,
        #[arg(long)]
        reps: Option<usize>,
        /// Threads for matrix products. Above 1 requires a build with the
        /// `threading` feature.
        #[arg(long)]
        threads: Option<usize>,
        /// Also write the records as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Write each layer's summed diffusion weights.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

/// Parses `argv` (including the program name), runs the command and
/// returns the process exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if cli.print_config {
        print!("{}", RunConfig::default().to_text());
        return Ok(());
    }
    let Some(command) = cli.command else {
        bail!("no subcommand given; see --help");
    };
    match command {
        Command::Datagen {
            n,
            steps,
            interval,
            seed,
            out,
            format,
            cfg,
        } => {
            let mut rc = cfg.resolve()?;
            let s = &mut rc.synth;
            s.n_nodes = n.unwrap_or(s.n_nodes);
            s.steps = steps.unwrap_or(s.steps);
            s.interval_seconds = interval.unwrap_or(s.interval_seconds);
            s.seed = seed.unwrap_or(s.seed);
            if cfg.print_config {
                print!("{}", rc.to_text());
                return Ok(());
            }
            datagen(&rc, &out, format)
        }
        Command::Train {
            data,
            out,
            epochs,
            history,
            cfg,
        } => {
            let mut rc = cfg.resolve()?;
            rc.train.epochs = epochs.unwrap_or(rc.train.epochs);
            if cfg.print_config {
                print!("{}", rc.to_text());
                return Ok(());
            }
            let history = history.unwrap_or_else(|| {
                let mut p = out.clone().into_os_string();
                p.push(".history.csv");
                p.into()
            });
            train_cmd(&rc, &data, &out, &history)
        }
        Command::Eval {
            checkpoint,
            data,
            horizons,
            split,
            out,
        } => eval_cmd(&checkpoint, &data, &horizons, split, out.as_deref()),
        Command::Bench {
            n,
            dnode,
            d,
            reps,
            threads,
            json,
            cfg,
        } => {
            let mut rc = cfg.resolve()?;
            let b = &mut rc.bench;
            b.n_list = n.unwrap_or(std::mem::take(&mut b.n_list));
            b.d_node = dnode.unwrap_or(b.d_node);
            b.d = d.unwrap_or(b.d);
            b.reps = reps.unwrap_or(b.reps);
            b.threads = threads.unwrap_or(b.threads);
            if cfg.print_config {
                print!("{}", rc.to_text());
                return Ok(());
            }
            bench_cmd(&rc, json.as_deref())
        }
        Command::Inspect { checkpoint, out_dir } => inspect_cmd(&checkpoint, &out_dir),
    }
}

fn is_text(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "txt")
}

fn load_data(path: &Path) -> Result<TrafficSeries> {
    let series = if is_text(path) {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        parse_text_series(&text)?
    } else {
        load_series(path)?
    };
    Ok(series)
}

fn datagen(rc: &RunConfig, out: &Path, format: SeriesFormat) -> Result<()> {
    let series = synth_generate(&rc.synth)?;
    match format {
        SeriesFormat::Binary => save_series(&series, out)?,
        SeriesFormat::Text => atomic_write(out, format_text_series(&series).as_bytes())?,
    }
    println!(
        "wrote {} steps x {} nodes x {} channels to {}",
        series.steps(),
        series.n_nodes(),
        series.channels(),
        out.display()
    );
    Ok(())
}

fn train_cmd(rc: &RunConfig, data: &Path, out: &Path, history: &Path) -> Result<()> {
    let series = Arc::new(load_data(data).with_context(|| format!("loading {}", data.display()))?);
    let spd = steps_per_day(series.interval_seconds)?;
    let cfg = rc.model_for(series.n_nodes(), series.channels(), spd);
    cfg.validate()?;
    let splits = split_and_window(series.clone(), rc.data.split, cfg.horizon_in, cfg.horizon_out)?;
    let norm = NormStats::fit(&splits.train)?;
    let geo = if cfg.adjacency == AdjacencyKind::Geo {
        let Some(dist) = &series.distances else {
            bail!("geographic adjacency needs a distance block in {}", data.display());
        };
        Some(geo_adjacency(dist, rc.data.geo_sigma, rc.data.geo_threshold)?)
    } else {
        None
    };
    let model = Forecaster::new(cfg, norm, geo, rc.model_seed)?;
    println!(
        "training on {} windows, validating on {}, {} parameters",
        splits.train.len(),
        splits.val.len(),
        model.params.count_scalars()
    );
    let outcome = train(model, &rc.train, &splits.train, &splits.val, |r, _| {
        println!(
            "epoch {:>4}  lr {:.2e}  train loss {:.4}  val MAE {:.4}  {:.1}s",
            r.epoch, r.lr, r.train_loss, r.val_mae, r.wall_seconds
        );
        ControlFlow::Continue(())
    })?;
    let mut csv = Vec::new();
    write_history(&outcome.history, &mut csv)?;
    save_checkpoint(&outcome.best, out)?;
    atomic_write(history, &csv)?;
    println!(
        "best val MAE {:.4} at epoch {}; checkpoint {}",
        outcome.best_val_mae(),
        outcome.best_epoch,
        out.display()
    );
    if !splits.test.is_empty() {
        print!("{}", evaluate(&outcome.best, &splits.test, &DEFAULT_HORIZONS)?.to_table());
    }
    Ok(())
}

fn eval_set(series: Arc<TrafficSeries>, model: &Forecaster, split: EvalSplit) -> Result<WindowSet> {
    let (t_in, t_out) = (model.cfg.horizon_in, model.cfg.horizon_out);
    if split == EvalSplit::All {
        let steps = series.steps();
        return Ok(WindowSet::new(series, 0, steps, t_in, t_out)?);
    }
    let s = split_and_window(series, SplitRatios::default(), t_in, t_out)?;
    Ok(match split {
        EvalSplit::Train => s.train,
        EvalSplit::Val => s.val,
        _ => s.test,
    })
}

fn eval_cmd(checkpoint: &Path, data: &Path, horizons: &[usize], split: EvalSplit, out: Option<&Path>) -> Result<()> {
    let model = load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let series = Arc::new(load_data(data).with_context(|| format!("loading {}", data.display()))?);
    let set = eval_set(series, &model, split)?;
    let table = evaluate(&model, &set, horizons)?.to_table();
    if let Some(p) = out {
        atomic_write(p, table.as_bytes())?;
    }
    print!("{table}");
    Ok(())
}

fn bench_cmd(rc: &RunConfig, json: Option<&Path>) -> Result<()> {
    if rc.bench.threads > 1 {
        std::env::set_var("MATMUL_NUM_THREADS", rc.bench.threads.to_string());
    }
    let report = bench_scaling(&rc.bench)?;
    if let Some(p) = json {
        atomic_write(p, &serde_json::to_vec_pretty(&report)?)?;
    }
    print!("{}", format_bench(&report));
    Ok(())
}

fn inspect_cmd(checkpoint: &Path, out_dir: &Path) -> Result<()> {
    let model = load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let layers = inspect_weights(&model)?;
    std::fs::create_dir_all(out_dir)?;
    let mut summary = String::from("layer identity_distance\n");
    for l in &layers {
        summary.push_str(&format!("{} {}\n", l.layer, l.identity_distance));
    }
    for l in &layers {
        atomic_write(&out_dir.join(format!("layer_{}.txt", l.layer)), format_matrix(&l.summed).as_bytes())?;
    }
    atomic_write(&out_dir.join("identity_distance.txt"), summary.as_bytes())?;
    print!("{summary}");
    Ok(())
}
