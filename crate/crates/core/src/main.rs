use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dida::config::{load_config, ConfigError};
use dida::data::{cache, DatasetSplit};
use dida::eval::{render_synth_grid, target_accuracy};
use dida::models::Checkpoint;
use dida::pipeline::{
    build_dataset, derive_seed, load_dataset, probe_pair, run_control, run_dida, run_paired, write_cache, Prepared,
    RunConfig, RunReport,
};
use dida::synthesis::synthesize;

#[derive(Parser)]
#[command(name = "dida", version, about = "Iterated domain adaptation with disentangled synthesis")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run config; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted override such as `da.epochs=5`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Sets the init, data and pairing seeds at once.
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset cache root (falls back to $DIDA_CACHE).
    #[arg(long)]
    cache: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Materialize the configured dataset into a cache directory.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Regenerate even if the cache exists.
        #[arg(long)]
        force: bool,
    },
    /// Run the DiDA loop.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the equal-budget control arm.
    Control {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run both arms, sharing the common prefix; writes `<out>/dida` and `<out>/control`.
    Paired {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Accuracy of a checkpoint on the test halves.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Linear-ish probes on the common and specific features of a checkpoint.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Synthesize `n` samples from a checkpoint and write a source/synthetic/target grid.
    Grid {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long)]
        cache: Option<PathBuf>,
    },
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn resolve(args: &ConfigArgs) -> Result<RunConfig, Failure> {
    let mut cfg = load_config(args.config.as_deref(), &args.sets)?;
    if let Some(s) = args.seed {
        cfg.set_seed(s);
    }
    cfg.validate().map_err(|e| Failure::Config(e.to_string()))?;
    eprintln!(
        "seeds: init={} data={} pairing={} dataset={}",
        cfg.seeds.init,
        cfg.seeds.data,
        cfg.seeds.pairing,
        cfg.dataset_seed()
    );
    Ok(cfg)
}

fn cache_root(explicit: Option<&Path>) -> Option<PathBuf> {
    explicit.map(Path::to_path_buf).or_else(|| std::env::var_os("DIDA_CACHE").map(PathBuf::from))
}

fn data(cfg: &RunConfig, cache: Option<&Path>) -> Result<Prepared, Failure> {
    load_dataset(cfg, cache_root(cache).as_deref()).map_err(runtime)
}

fn out_dir(cfg: &RunConfig, out: Option<PathBuf>) -> PathBuf {
    out.or_else(|| cfg.output_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs").join(&cfg.run_id))
}

fn summarize(report: &RunReport, dir: &Path) {
    for r in &report.records {
        println!(
            "{} i={} target_acc={:.2} source_acc={:.2} pool={}",
            report.arm, r.i, r.target_acc, r.source_acc, r.pool_size
        );
    }
    println!("{} written to {}", report.arm, dir.display());
}

fn histogram(name: &str, split: &DatasetSplit) {
    for (half, samples) in [("train", &split.train), ("test", &split.test)] {
        let h = DatasetSplit::class_histogram(samples, &split.truth, split.num_classes);
        println!("{name} {half}: {} samples, classes {:?}", samples.len(), h);
    }
}

fn from_checkpoint(path: &Path, cache: Option<&Path>) -> Result<(Checkpoint, RunConfig, Prepared), Failure> {
    let ck = Checkpoint::load(path).map_err(runtime)?;
    let cfg: RunConfig = toml::from_str(&ck.config_echo).map_err(|e| Failure::Config(e.to_string()))?;
    let p = data(&cfg, cache)?;
    let expect = cfg.model_config(p.source.num_classes, p.source.image_shape);
    if ck.bundle.config() != &expect {
        return Err(Failure::Config("checkpoint does not match its recorded config".into()));
    }
    Ok((ck, cfg, p))
}

fn execute(cli: Cli) -> Result<(), Failure> {
    match cli.cmd {
        Cmd::GenData { cfg, out, force } => {
            let rc = resolve(&cfg)?;
            if cache::exists(&out) && !force {
                println!("cache present at {}, nothing to do", out.display());
                return Ok(());
            }
            let p = build_dataset(&rc).map_err(runtime)?;
            write_cache(&rc, &out, &p).map_err(runtime)?;
            histogram("source", &p.source);
            histogram("target", &p.target);
            println!("wrote {}", out.display());
        }
        Cmd::Run { cfg, out } => {
            let rc = resolve(&cfg)?;
            let p = data(&rc, cfg.cache.as_deref())?;
            let dir = out_dir(&rc, out);
            summarize(&run_dida(&rc, &p, Some(&dir)).map_err(runtime)?, &dir);
        }
        Cmd::Control { cfg, out } => {
            let rc = resolve(&cfg)?;
            let p = data(&rc, cfg.cache.as_deref())?;
            let dir = out_dir(&rc, out);
            summarize(&run_control(&rc, &p, Some(&dir)).map_err(runtime)?, &dir);
        }
        Cmd::Paired { cfg, out } => {
            let rc = resolve(&cfg)?;
            let p = data(&rc, cfg.cache.as_deref())?;
            let dir = out_dir(&rc, out);
            let (dd, dc) = (dir.join("dida"), dir.join("control"));
            let (a, b) = run_paired(&rc, &p, Some(&dd), Some(&dc)).map_err(runtime)?;
            summarize(&a, &dd);
            summarize(&b, &dc);
        }
        Cmd::Eval { checkpoint, cache } => {
            let (ck, _, p) = from_checkpoint(&checkpoint, cache.as_deref())?;
            let t = target_accuracy(&ck.bundle, &p.target.test, &p.target.truth).map_err(runtime)?;
            let s = target_accuracy(&ck.bundle, &p.source.test, &p.source.truth).map_err(runtime)?;
            println!("target_acc={t:.2} source_acc={s:.2}");
        }
        Cmd::Probe { checkpoint, cache } => {
            let (ck, cfg, p) = from_checkpoint(&checkpoint, cache.as_deref())?;
            let (c, s) = probe_pair(&ck.bundle, &p, &cfg.eval.probe).map_err(runtime)?;
            println!("probe_common={c:.2} probe_specific={s:.2} chance={:.2}", 100.0 / p.source.num_classes as f64);
        }
        Cmd::Grid { checkpoint, out, n, cache } => {
            let (ck, cfg, p) = from_checkpoint(&checkpoint, cache.as_deref())?;
            if n == 0 {
                return Err(Failure::Config("n must be >= 1".into()));
            }
            let seed = derive_seed(cfg.seeds.pairing, "grid", 0);
            let set = synthesize(&ck.bundle, &p.source.train, &p.target.train, cfg.synthesis.pairing, n, seed, 0)
                .map_err(runtime)?;
            let find = |split: &DatasetSplit, id: &str| {
                split.train.iter().find(|s| s.id == id).map(|s| s.image.clone()).expect("provenance id")
            };
            let triples: Vec<_> = set
                .samples
                .iter()
                .zip(&set.provenance)
                .map(|(s, pv)| (find(&p.source, &pv.source_id), s.image.clone(), find(&p.target, &pv.target_id)))
                .collect();
            render_synth_grid(&out, &triples).map_err(runtime)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
