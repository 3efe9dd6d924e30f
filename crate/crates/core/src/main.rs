use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use icreg::experiments::{
    build_oracle, parse_config, run_bernstein, run_sweep_with, run_verify_oracle, test_prompts,
    train_single, verify_network, ArchChoice, Cell, CellResult, CellStatus, ConfigEntry,
    ExperimentConfig, OracleKind, RunResult,
};
use icreg::tasks::{load_dataset, save_dataset};
use icreg::training::{evaluate, history_csv, load_checkpoint, save_checkpoint, Architecture};
use icreg::transformer::codec::{load_network, save_network};

#[derive(Parser)]
#[command(name = "icreg", version, about = "In-context regression with constructed and trained transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// paper-fig1 or desk; defaults to desk when no config file is given.
    #[arg(long)]
    preset: Option<String>,
    /// Seed list, e.g. `0,1,2`.
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    degree: Option<usize>,
    /// Architecture list, e.g. `theory,linear,softmax,oracle`.
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    ablation: Option<String>,
    /// Swept axis for ablation and spline runs: n or L.
    #[arg(long)]
    sweep: Option<String>,
    /// Fixed context length.
    #[arg(long)]
    n: Option<usize>,
    /// Fixed training set size.
    #[arg(long = "L")]
    l: Option<usize>,
    /// Any other key, as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Print each finished cell to stderr.
    #[arg(long)]
    verbose: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Poly,
    Vector,
    LinearSpline,
    QuadraticSpline,
}

#[derive(Subcommand)]
enum Command {
    /// Build an oracle network and save it.
    Construct {
        #[arg(long, value_enum, default_value = "poly")]
        kind: Kind,
        #[arg(long, default_value_t = 4)]
        degree: usize,
        #[arg(long)]
        n: usize,
        /// Number of spline bins `m`.
        #[arg(long, default_value_t = 4)]
        bins: usize,
        #[arg(long, default_value_t = 2)]
        out_dim: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the exactness suite, or check a stored oracle network.
    VerifyOracle {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        network: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        prompts: usize,
    },
    /// Test MSE against context length.
    ScaleN {
        #[command(flatten)]
        common: Common,
    },
    /// Test MSE against training set size.
    #[command(name = "scale-L", alias = "scale-l")]
    ScaleL {
        #[command(flatten)]
        common: Common,
    },
    Ablation {
        #[command(flatten)]
        common: Common,
    },
    Spline {
        #[command(flatten)]
        common: Common,
    },
    /// Covariance concentration diagnostic.
    Bernstein {
        #[command(flatten)]
        common: Common,
    },
    /// Train one model and write its checkpoint, history and datasets.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Test MSE of a checkpoint or network file.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, conflicts_with = "network")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        network: Option<PathBuf>,
        /// Dataset file; generated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

type Failure = Box<dyn std::error::Error>;

fn load(common: &Common, experiment: Option<&str>) -> Result<ExperimentConfig, Failure> {
    let text = match &common.config {
        Some(p) => std::fs::read_to_string(p)?,
        None => String::new(),
    };
    let preset = match (&common.preset, &common.config) {
        (Some(p), _) => Some(p.as_str()),
        (None, None) => Some("desk"),
        (None, Some(_)) => None,
    };
    let mut over = Vec::new();
    if let Some(e) = experiment {
        over.push(ConfigEntry {
            at: "subcommand".into(),
            key: "experiment".into(),
            value: e.into(),
        });
    }
    let mut flag = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            over.push(ConfigEntry::flag(k, v));
        }
    };
    flag("seeds", common.seed.clone());
    flag("out", common.out.as_ref().map(|p| p.display().to_string()));
    flag("jobs", common.jobs.map(|v| v.to_string()));
    flag("epochs", common.epochs.map(|v| v.to_string()));
    flag("batch", common.batch.map(|v| v.to_string()));
    flag("lr", common.lr.clone());
    flag("degree", common.degree.map(|v| v.to_string()));
    flag("architectures", common.arch.clone());
    flag("ablation", common.ablation.clone());
    flag("sweep", common.sweep.clone());
    flag("n", common.n.map(|v| v.to_string()));
    flag("L", common.l.map(|v| v.to_string()));
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| format!("--set expects KEY=VALUE, got `{kv}`"))?;
        over.push(ConfigEntry {
            at: format!("flag --set {k}"),
            key: k.trim().into(),
            value: v.trim().into(),
        });
    }
    Ok(parse_config(&text, preset, &over)?)
}

fn report_cell(r: &CellResult) {
    let status = match &r.status {
        CellStatus::Ok => "ok".to_string(),
        CellStatus::Failed(m) => format!("failed: {m}"),
    };
    eprintln!(
        "{} n={} L={} seed={} test_mse={:e} init_mse={:e} {status}",
        r.cell.arch.name(),
        r.cell.n,
        r.cell.l,
        r.cell.seed,
        r.test_mse,
        r.init_mse
    );
}

fn sweep(common: &Common, experiment: &str) -> Result<ExitCode, Failure> {
    let cfg = load(common, Some(experiment))?;
    let verbose = common.verbose;
    let result = run_sweep_with(&cfg, &|r| {
        if verbose {
            report_cell(r)
        }
    });
    result.write(&cfg.out)?;
    print!("{}", result.curve_csv());
    for f in &result.fits {
        if let Some(s) = f.slope {
            println!("# {} slope {s:.4}", f.architecture.name());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn first_trained(cfg: &ExperimentConfig) -> Result<Architecture, Failure> {
    cfg.architectures
        .iter()
        .find_map(|a| match a {
            ArchChoice::Trained(t) => Some(*t),
            ArchChoice::Oracle => None,
        })
        .ok_or_else(|| "no trainable architecture configured".into())
}

fn run_train(common: &Common) -> Result<ExitCode, Failure> {
    let cfg = load(common, None)?;
    let arch = first_trained(&cfg)?;
    let seed = cfg.seeds[0];
    let (n, l) = (cfg.n, cfg.l);
    let t = train_single(&cfg, arch, n, l, seed, true)?;
    let out = &t.outcome;
    let dir = &cfg.out;
    std::fs::create_dir_all(dir)?;
    save_checkpoint(&out.net, &out.optimizer, &dir.join("checkpoint.bin"))?;
    save_network(&out.net, &dir.join("network.bin"))?;
    save_dataset(&t.train, &dir.join("train.data"))?;
    save_dataset(&t.test, &dir.join("test.data"))?;
    std::fs::write(dir.join("history.csv"), history_csv(&out.history))?;
    let result = RunResult {
        config: cfg.clone(),
        cells: vec![CellResult {
            cell: Cell {
                arch: ArchChoice::Trained(arch),
                n,
                l,
                seed,
            },
            test_mse: t.test_mse,
            init_mse: t.init_mse,
            final_train_mse: out.history.last().map(|h| h.train_mse),
            status: CellStatus::Ok,
        }],
        points: Vec::new(),
        fits: Vec::new(),
    };
    std::fs::write(dir.join("results.csv"), result.results_csv())?;
    std::fs::write(dir.join("manifest.txt"), result.manifest())?;
    println!("init_mse = {:e}", t.init_mse);
    println!("test_mse = {:e}", t.test_mse);
    println!("ratio = {:.4}", t.test_mse / t.init_mse);
    Ok(ExitCode::SUCCESS)
}

fn run_eval(
    common: &Common,
    checkpoint: Option<&Path>,
    network: Option<&Path>,
    data: Option<&Path>,
) -> Result<ExitCode, Failure> {
    let net = match (checkpoint, network) {
        (Some(c), _) => load_checkpoint(c)?.0,
        (None, Some(n)) => load_network(n)?,
        (None, None) => return Err("give --checkpoint or --network".into()),
    };
    let prompts = match data {
        Some(p) => load_dataset(p)?.prompts,
        None => {
            let cfg = load(common, None)?;
            test_prompts(&cfg, cfg.n, cfg.seeds[0])?
        }
    };
    println!("test_mse = {:e}", evaluate(&net, &prompts)?);
    Ok(ExitCode::SUCCESS)
}

fn run(cli: Cli) -> Result<ExitCode, Failure> {
    match cli.command {
        Command::Construct {
            kind,
            degree,
            n,
            bins,
            out_dim,
            out,
        } => {
            let kind = match kind {
                Kind::Poly => OracleKind::Poly { d: degree },
                Kind::Vector => OracleKind::Vector { d: degree, out_dim },
                Kind::LinearSpline => OracleKind::LinearSpline { m: bins },
                Kind::QuadraticSpline => OracleKind::QuadraticSpline { m: bins },
            };
            let net = build_oracle(kind, n)?;
            save_network(&net, &out)?;
            println!(
                "{}: {} blocks, {} heads, max weight {:e}",
                net.metadata,
                net.blocks.len(),
                net.head_count(),
                net.max_abs_weight()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::VerifyOracle {
            common,
            network,
            prompts,
        } => {
            let cfg = load(&common, Some("verify_oracle"))?;
            let report = match network {
                Some(p) => verify_network(&load_network(&p)?, prompts, cfg.seeds[0])?,
                None => run_verify_oracle(&cfg)?,
            };
            print!("{}", report.to_text());
            Ok(if report.passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
        Command::ScaleN { common } => sweep(&common, "scale_n"),
        Command::ScaleL { common } => sweep(&common, "scale_L"),
        Command::Ablation { common } => sweep(&common, "ablation"),
        Command::Spline { common } => sweep(&common, "spline"),
        Command::Bernstein { common } => {
            let cfg = load(&common, Some("bernstein"))?;
            let run = run_bernstein(&cfg)?;
            run.write(&cfg.out)?;
            print!("{}", run.csv());
            if let Some(s) = run.slope {
                println!("# slope {s:.4}");
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Train { common } => run_train(&common),
        Command::Eval {
            common,
            checkpoint,
            network,
            data,
        } => run_eval(
            &common,
            checkpoint.as_deref(),
            network.as_deref(),
            data.as_deref(),
        ),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
