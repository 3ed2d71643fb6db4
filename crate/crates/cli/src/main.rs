use std::path::PathBuf;
use std::process::ExitCode;

use bandwig::analytics::{saddle_data, DEFAULT_ETA};
use bandwig::harness::{self, Experiment, RunConfig, RunManifest, MANIFEST_FILE};
use bandwig::susy_dual::DualForm;
use bandwig::Error;
use clap::{Args, Parser, Subcommand};

const EXIT_ASSERTION: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "bandwig", version, about = "Random band matrix experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Base seed (overrides `base_seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (overrides `workers`).
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args, Clone)]
struct SusyArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    sides: Option<Vec<usize>>,
    #[arg(long = "w")]
    w: Option<usize>,
    #[arg(long)]
    energy: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    form: Option<DualForm>,
    #[arg(long)]
    nodes: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Averaged density of states per bandwidth and the semicircle trend.
    DosSweep(Common),
    /// Two-point function R(x), its decay fit and the derivative identity.
    RxDecay(Common),
    /// Dual quadrature against oracles and Monte Carlo.
    SusyCheck(SusyArgs),
    /// Grassmann and superdeterminant identity suite.
    GrassmannCheck(Common),
    /// Kernel exactness and decay checks.
    KernelAudit(Common),
    /// Saddle identities over an energy grid, plus well profiles.
    SaddleTable(Common),
    /// Print the saddle data at one energy as JSON.
    Saddle {
        #[arg(long, allow_hyphen_values = true)]
        energy: f64,
        #[arg(long, default_value_t = DEFAULT_ETA)]
        eta: f64,
    },
    /// Print the config schema as JSON.
    Schema,
}

fn load(experiment: Experiment, common: &Common) -> Result<RunConfig, Error> {
    let mut config = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::new(experiment),
    };
    if config.experiment != experiment {
        return Err(Error::Config {
            field: "experiment".into(),
            reason: format!("config is for `{}`, subcommand is `{experiment}`", config.experiment),
        });
    }
    if let Some(out) = &common.out {
        config.output_dir = out.clone();
    }
    if let Some(seed) = common.seed {
        config.base_seed = seed;
    }
    if let Some(w) = common.workers {
        config.workers = w;
    }
    Ok(config)
}

fn susy_config(args: &SusyArgs) -> Result<RunConfig, Error> {
    let mut c = load(Experiment::SusyCheck, &args.common)?;
    if args.common.config.is_none() {
        c.d = 1;
        c.sides = vec![1];
        c.bandwidths = vec![1];
    }
    if let Some(d) = args.d {
        c.d = d;
    }
    if let Some(s) = &args.sides {
        c.sides = s.clone();
    }
    if let Some(w) = args.w {
        c.bandwidths = vec![w];
    }
    if let Some(e) = args.energy {
        c.energies = vec![e];
    }
    if let Some(eps) = args.epsilon {
        c.epsilons = vec![eps];
    }
    if let Some(f) = args.form {
        c.forms = vec![f];
    }
    if let Some(n) = args.nodes {
        c.nodes = n;
    }
    Ok(c)
}

fn report(m: &RunManifest) -> ExitCode {
    for w in &m.warnings {
        eprintln!("warning: {w}");
    }
    for a in &m.assertions {
        let tag = if a.passed { "PASS" } else { "FAIL" };
        println!("{tag} {}: {}", a.name, a.detail);
    }
    println!(
        "{} task(s), {} output file(s); manifest {}",
        m.tasks.len(),
        m.all_outputs().len(),
        m.config.output_dir.join(MANIFEST_FILE).display()
    );
    if m.passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_ASSERTION)
    }
}

fn fail(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    match e {
        Error::Config { .. } => ExitCode::from(EXIT_CONFIG),
        _ => ExitCode::from(EXIT_RUNTIME),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let config = match &cli.command {
        Command::DosSweep(c) => load(Experiment::DosSweep, c),
        Command::RxDecay(c) => load(Experiment::RxDecay, c),
        Command::SusyCheck(a) => susy_config(a),
        Command::GrassmannCheck(c) => load(Experiment::GrassmannCheck, c),
        Command::KernelAudit(c) => load(Experiment::KernelAudit, c),
        Command::SaddleTable(c) => load(Experiment::SaddleTable, c),
        Command::Saddle { energy, eta } => {
            return match saddle_data(*energy, *eta) {
                Ok(s) => {
                    println!("{}", serde_json::to_string_pretty(&s).expect("saddle data serialises"));
                    ExitCode::SUCCESS
                }
                Err(e) => fail(&Error::Config {
                    field: "energy".into(),
                    reason: e.to_string(),
                }),
            };
        }
        Command::Schema => {
            println!("{}", serde_json::to_string_pretty(&harness::schema()).expect("schema serialises"));
            return ExitCode::SUCCESS;
        }
    };
    match config.and_then(|c| harness::run(&c)) {
        Ok(m) => report(&m),
        Err(e) => fail(&e),
    }
}
