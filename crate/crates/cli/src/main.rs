use std::fs;
use std::io::{self, BufReader};
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use vbmcts::agents::AgentKind;
use vbmcts::complexity::{report, ComplexityInputs};
use vbmcts::env::external::serve;
use vbmcts::env::{read_records, MdpConfig, SurrogateEnv, SurrogateParams};
use vbmcts::harness::{
    curves_by_agent, curves_svg, exhaustive_oracle, run_experiment, write_curves_csv, EmitFlags,
    EnvSpec, ResultsTable, RunConfig,
};
use vbmcts::ActionGrid;

#[derive(Parser)]
#[command(name = "vbmcts", version, about = "Variance-bonus MCTS experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate agents over a seed sweep.
    Run(RunArgs),
    /// Rebuild learning curves and the results table from persisted records.
    Curve(CurveArgs),
    /// Brute-force the best open-loop policy on a reduced grid.
    Oracle(OracleArgs),
    /// Evaluate the sample-complexity quantities for a JSON input file.
    Bound(BoundArgs),
    /// Serve the surrogate environment over stdin/stdout (JSON lines).
    Serve(ServeArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `surrogate`, or `external:<program> [args...]`.
    #[arg(long)]
    env: Option<String>,
    /// Comma-separated agent names.
    #[arg(long, value_delimiter = ',')]
    agents: Option<Vec<AgentKind>>,
    /// Seeds as a list (`1,2,3`) or an inclusive range (`0-9`).
    #[arg(long)]
    seeds: Option<String>,
    /// Training episodes per run.
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated outputs from `csv`, `json`, `svg`.
    #[arg(long, value_delimiter = ',')]
    emit: Option<Vec<String>>,
    /// Planner iterations per training step.
    #[arg(long)]
    iterations: Option<usize>,
    /// Planner iterations per step of the final decision.
    #[arg(long)]
    final_iterations: Option<usize>,
    /// Seconds to wait for each external environment response.
    #[arg(long, default_value_t = 30.0)]
    timeout: f64,
}

#[derive(Args)]
struct CurveArgs {
    /// `records.jsonl` written by `run`.
    #[arg(long)]
    records: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    svg: bool,
}

#[derive(Args)]
struct OracleArgs {
    /// Comma-separated coverage levels.
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.5,1.0")]
    grid: Vec<f64>,
    #[arg(long, default_value_t = 5)]
    horizon: u32,
    /// JSON surrogate parameters.
    #[arg(long)]
    params: Option<PathBuf>,
}

#[derive(Args)]
struct BoundArgs {
    /// JSON document with the complexity inputs.
    #[arg(long)]
    config: PathBuf,
    /// Covering-ball diameter.
    #[arg(long, default_value_t = 0.5)]
    d_max: f64,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON surrogate parameters.
    #[arg(long)]
    params: Option<PathBuf>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &PathBuf) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    if let Some((a, b)) = s.split_once('-') {
        let (a, b): (u64, u64) = (a.trim().parse()?, b.trim().parse()?);
        if a > b {
            bail!("empty seed range {s}");
        }
        return Ok((a..=b).collect());
    }
    s.split(',')
        .map(|v| v.trim().parse().with_context(|| format!("bad seed {v:?}")))
        .collect()
}

fn parse_env(s: &str, timeout: f64) -> Result<EnvSpec> {
    if s == "surrogate" {
        return Ok(EnvSpec::default());
    }
    if let Some(cmd) = s.strip_prefix("external:") {
        let command: Vec<String> = cmd.split_whitespace().map(String::from).collect();
        if command.is_empty() {
            bail!("external environment needs a command");
        }
        return Ok(EnvSpec::External {
            command,
            timeout_secs: timeout,
        });
    }
    bail!("unknown environment {s:?}; use `surrogate` or `external:<command>`")
}

fn parse_emit(items: &[String]) -> Result<EmitFlags> {
    let mut emit = EmitFlags {
        csv: false,
        json: false,
        svg: false,
    };
    for item in items {
        match item.trim() {
            "csv" => emit.csv = true,
            "json" => emit.json = true,
            "svg" => emit.svg = true,
            other => bail!("unknown output kind {other:?}"),
        }
    }
    Ok(emit)
}

fn print_table(table: &ResultsTable) {
    println!("{:<16}{:>12}{:>12}{:>12}", "agent", "median", "max", "min");
    for row in &table.rows {
        let note = if row.failed_seeds.is_empty() {
            String::new()
        } else {
            format!("  (failed seeds: {:?})", row.failed_seeds)
        };
        println!(
            "{:<16}{:>12.3}{:>12.3}{:>12.3}{note}",
            row.agent, row.median, row.max, row.min
        );
    }
}

fn run(args: RunArgs) -> Result<()> {
    let mut config: RunConfig = match &args.config {
        Some(path) => read_json(path)?,
        None => RunConfig::default(),
    };
    if let Some(env) = &args.env {
        config.env = parse_env(env, args.timeout)?;
    }
    if let Some(agents) = args.agents {
        config.agents = agents;
    }
    if let Some(seeds) = &args.seeds {
        config.seeds = parse_seeds(seeds)?;
    }
    if let Some(episodes) = args.episodes {
        config.episodes_budget = episodes;
    }
    if let Some(out) = args.out {
        config.out_dir = Some(out);
    }
    if let Some(emit) = &args.emit {
        config.emit = parse_emit(emit)?;
    }
    if let Some(n) = args.iterations {
        config.agent.planner.max_iterations = n;
    }
    if let Some(n) = args.final_iterations {
        config.agent.final_iterations = n;
    }
    let output = run_experiment(&config)?;
    print_table(&output.table);
    for f in &output.failures {
        eprintln!("failed: {} seed {}: {}", f.agent, f.seed, f.error);
    }
    if let Some(dir) = &config.out_dir {
        eprintln!("outputs written to {}", dir.display());
    }
    Ok(())
}

fn curve(args: CurveArgs) -> Result<()> {
    let records = read_records(&args.records)?;
    let curves = curves_by_agent(&records)?;
    fs::create_dir_all(&args.out)?;
    write_curves_csv(&args.out.join("curves.csv"), &curves)?;
    if args.svg {
        fs::write(args.out.join("curves.svg"), curves_svg(&curves))?;
    }
    let table = ResultsTable::from_records(&records);
    if !table.rows.is_empty() {
        print_table(&table);
    }
    for c in &curves {
        let last = c.mean_best_so_far.last().copied().unwrap_or(f64::NAN);
        println!("{}: {} episodes, mean best-so-far {last:.3}", c.agent, c.mean_best_so_far.len());
    }
    Ok(())
}

fn oracle(args: OracleArgs) -> Result<()> {
    let params: SurrogateParams = match &args.params {
        Some(p) => read_json(p)?,
        None => SurrogateParams::default(),
    };
    let grid = ActionGrid::from_levels(args.grid)?;
    let mdp = MdpConfig {
        horizon: args.horizon,
        ..MdpConfig::default()
    };
    let (policy, value) = exhaustive_oracle(&EnvSpec::Surrogate { params }, grid.actions(), &mdp)?;
    println!("value {value:.6}");
    for (t, a) in policy.actions().iter().enumerate() {
        println!("t={} itn={} irs={}", t + 1, a.itn, a.irs);
    }
    Ok(())
}

fn bound(args: BoundArgs) -> Result<()> {
    let inputs: ComplexityInputs = read_json(&args.config)?;
    let r = report(&inputs, args.d_max)?;
    println!("{}", serde_json::to_string_pretty(&r)?);
    Ok(())
}

fn serve_cmd(args: ServeArgs) -> Result<()> {
    let params: SurrogateParams = match &args.params {
        Some(p) => read_json(p)?,
        None => SurrogateParams::default(),
    };
    let mut env = SurrogateEnv::new(params, MdpConfig::default(), args.seed)?;
    let stdin = io::stdin();
    serve(&mut env, BufReader::new(stdin.lock()), io::stdout().lock())?;
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Run(a) => run(a),
        Command::Curve(a) => curve(a),
        Command::Oracle(a) => oracle(a),
        Command::Bound(a) => bound(a),
        Command::Serve(a) => serve_cmd(a),
    }
}
