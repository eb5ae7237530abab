//! Experiment runner, summaries and reporting.
//!
//! Every number in a [`ResultsTable`] is derived from the evaluation records
//! of a run, so a table can be rebuilt from a persisted `records.jsonl`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{run_agent, AgentConfig, AgentError, AgentKind, Policy};
use crate::env::external::{ExternalEnv, DEFAULT_TIMEOUT};
use crate::env::{
    run_episode, EnvError, Environment, EpisodeRecord, MdpConfig, RecordKind, RecordWriter,
    SurrogateEnv, SurrogateParams,
};
use crate::features::ActionPair;

/// Environment variable capping the number of parallel (agent, seed) cells.
pub const WORKERS_ENV: &str = "VBMCTS_WORKERS";

/// Largest search space [`exhaustive_oracle`] will enumerate.
pub const ORACLE_CAP: u64 = 1_000_000;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("invalid run configuration: {0}")]
    InvalidConfig(String),
    #[error("every seed failed for agent {agent}; first error: {first}")]
    AllSeedsFailed { agent: String, first: String },
    #[error("no records to summarize")]
    EmptyRecords,
    #[error("search space of {size} sequences exceeds the cap of {cap}")]
    SearchSpaceTooLarge { size: f64, cap: u64 },
    #[error("the oracle needs a deterministic surrogate environment")]
    NondeterministicEnv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvSpec {
    Surrogate {
        #[serde(default)]
        params: SurrogateParams,
    },
    External {
        /// Program followed by its arguments.
        command: Vec<String>,
        #[serde(default = "default_timeout_secs")]
        timeout_secs: f64,
    },
}

fn default_timeout_secs() -> f64 {
    DEFAULT_TIMEOUT.as_secs_f64()
}

impl Default for EnvSpec {
    fn default() -> Self {
        EnvSpec::Surrogate {
            params: SurrogateParams::default(),
        }
    }
}

impl EnvSpec {
    pub fn build(&self, mdp: &MdpConfig, seed: u64) -> Result<Box<dyn Environment + Send>, EnvError> {
        Ok(match self {
            EnvSpec::Surrogate { params } => {
                Box::new(SurrogateEnv::new(params.clone(), mdp.clone(), seed)?)
            }
            EnvSpec::External {
                command,
                timeout_secs,
            } => Box::new(ExternalEnv::spawn(
                command,
                mdp.horizon,
                Duration::from_secs_f64(*timeout_secs),
            )?),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmitFlags {
    pub csv: bool,
    pub json: bool,
    pub svg: bool,
}

impl Default for EmitFlags {
    fn default() -> Self {
        EmitFlags {
            csv: true,
            json: true,
            svg: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub env: EnvSpec,
    pub agents: Vec<AgentKind>,
    pub seeds: Vec<u64>,
    pub episodes_budget: usize,
    pub out_dir: Option<PathBuf>,
    pub emit: EmitFlags,
    /// Shared agent settings; the budget and seed are set per cell.
    pub agent: AgentConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            env: EnvSpec::default(),
            agents: AgentKind::ALL.to_vec(),
            seeds: (0..10).collect(),
            episodes_budget: 20,
            out_dir: None,
            emit: EmitFlags::default(),
            agent: AgentConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.agents.is_empty() {
            return Err(HarnessError::InvalidConfig("at least one agent is required".into()));
        }
        if self.seeds.is_empty() {
            return Err(HarnessError::InvalidConfig("at least one seed is required".into()));
        }
        self.cell_config(self.seeds[0]).validate()?;
        Ok(())
    }

    fn cell_config(&self, seed: u64) -> AgentConfig {
        AgentConfig {
            episodes_budget: self.episodes_budget,
            rng_seed: seed,
            ..self.agent.clone()
        }
    }
}

/// Median, max and min of final-policy returns for one agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub agent: String,
    pub median: f64,
    pub max: f64,
    pub min: f64,
    pub seeds: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failed_seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ResultsTable {
    pub rows: Vec<TableRow>,
}

/// Median with the two middle values averaged for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

impl ResultsTable {
    /// Builds one row per agent from evaluation records, in order of first appearance.
    pub fn from_records(records: &[EpisodeRecord]) -> Self {
        let mut order: Vec<&str> = Vec::new();
        let mut returns: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        for r in records.iter().filter(|r| r.kind == RecordKind::Evaluation) {
            if !returns.contains_key(r.agent_name.as_str()) {
                order.push(&r.agent_name);
            }
            returns.entry(&r.agent_name).or_default().push(r.total_return);
        }
        let rows = order
            .into_iter()
            .map(|agent| {
                let v = &returns[agent];
                TableRow {
                    agent: agent.to_string(),
                    median: median(v).expect("non-empty"),
                    max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                    min: v.iter().copied().fold(f64::INFINITY, f64::min),
                    seeds: v.len(),
                    failed_seeds: Vec::new(),
                }
            })
            .collect();
        ResultsTable { rows }
    }

    pub fn row(&self, agent: &str) -> Option<&TableRow> {
        self.rows.iter().find(|r| r.agent == agent)
    }
}

/// A cell that did not complete.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub agent: String,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub table: ResultsTable,
    /// Training and evaluation records of every successful cell, ordered by
    /// agent, then seed, then episode.
    pub records: Vec<EpisodeRecord>,
    pub policies: Vec<(String, u64, Policy)>,
    pub failures: Vec<CellFailure>,
}

struct CellResult {
    records: Vec<EpisodeRecord>,
    policy: Policy,
}

fn run_cell(config: &RunConfig, kind: AgentKind, seed: u64) -> Result<CellResult, HarnessError> {
    let agent_config = config.cell_config(seed);
    let mut env = config.env.build(&agent_config.mdp, seed)?;
    let run = run_agent(kind, &mut env, &agent_config)?;
    drop(env);

    // scored once on a fresh instance, outside the training budget
    let mut fresh = config.env.build(&agent_config.mdp, seed)?;
    let transitions = run_episode(&mut fresh, run.policy.actions())?;
    let total_return = agent_config
        .mdp
        .discounted_return(transitions.iter().map(|t| t.reward));
    let mut records = run.records;
    records.push(EpisodeRecord {
        seed,
        agent_name: kind.name().to_string(),
        episode: records.len() + 1,
        kind: RecordKind::Evaluation,
        transitions,
        total_return,
        model_points: Vec::new(),
    });
    log::info!("{kind} seed {seed}: final return {total_return:.3}");
    Ok(CellResult {
        records,
        policy: run.policy,
    })
}

fn worker_count() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Runs every (agent, seed) cell, aggregates the table and writes outputs.
pub fn run_experiment(config: &RunConfig) -> Result<ExperimentOutput, HarnessError> {
    config.validate()?;
    let cells: Vec<(AgentKind, u64)> = config
        .agents
        .iter()
        .flat_map(|&a| config.seeds.iter().map(move |&s| (a, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count())
        .build()
        .map_err(|e| HarnessError::InvalidConfig(e.to_string()))?;
    let results: Vec<Result<CellResult, HarnessError>> = pool.install(|| {
        cells
            .par_iter()
            .map(|&(kind, seed)| run_cell(config, kind, seed))
            .collect()
    });

    let mut records = Vec::new();
    let mut policies = Vec::new();
    let mut failures = Vec::new();
    for (&(kind, seed), result) in cells.iter().zip(results) {
        match result {
            Ok(cell) => {
                records.extend(cell.records);
                policies.push((kind.name().to_string(), seed, cell.policy));
            }
            Err(e) => {
                log::warn!("{kind} seed {seed} failed: {e}");
                failures.push(CellFailure {
                    agent: kind.name().to_string(),
                    seed,
                    error: e.to_string(),
                });
            }
        }
    }
    for &kind in &config.agents {
        if failures.iter().filter(|f| f.agent == kind.name()).count() == config.seeds.len() {
            let first = failures
                .iter()
                .find(|f| f.agent == kind.name())
                .map(|f| f.error.clone())
                .unwrap_or_default();
            return Err(HarnessError::AllSeedsFailed {
                agent: kind.name().to_string(),
                first,
            });
        }
    }

    let mut table = ResultsTable::from_records(&records);
    for row in &mut table.rows {
        row.failed_seeds = failures
            .iter()
            .filter(|f| f.agent == row.agent)
            .map(|f| f.seed)
            .collect();
    }
    let output = ExperimentOutput {
        table,
        records,
        policies,
        failures,
    };
    if let Some(dir) = &config.out_dir {
        write_outputs(dir, &output, config.emit)?;
    }
    Ok(output)
}

/// Writes `records.jsonl` always, plus the CSV/JSON/SVG files selected by `emit`.
pub fn write_outputs(
    dir: &Path,
    output: &ExperimentOutput,
    emit: EmitFlags,
) -> Result<(), HarnessError> {
    fs::create_dir_all(dir)?;
    let path = dir.join("records.jsonl");
    if path.exists() {
        fs::remove_file(&path)?;
    }
    let mut writer = RecordWriter::append(&path)?;
    for r in &output.records {
        writer.write(r)?;
    }
    writer.flush()?;

    let curves = curves_by_agent(&output.records)?;
    if emit.csv {
        write_records_csv(&dir.join("records.csv"), &output.records)?;
        write_table_csv(&dir.join("table.csv"), &output.table)?;
        write_curves_csv(&dir.join("curves.csv"), &curves)?;
    }
    if emit.json {
        let doc = serde_json::json!({
            "table": output.table,
            "failures": output.failures,
        });
        fs::write(dir.join("table.json"), serde_json::to_string_pretty(&doc)?)?;
    }
    if emit.svg {
        fs::write(dir.join("curves.svg"), curves_svg(&curves))?;
    }
    Ok(())
}

pub fn write_records_csv(path: &Path, records: &[EpisodeRecord]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["agent", "seed", "episode", "step", "itn", "irs", "reward", "cumulative"])?;
    for r in records {
        let mut cumulative = 0.0;
        for t in &r.transitions {
            cumulative += t.reward;
            w.write_record([
                r.agent_name.clone(),
                r.seed.to_string(),
                r.episode.to_string(),
                t.state.timestep.to_string(),
                t.action.itn.to_string(),
                t.action.irs.to_string(),
                t.reward.to_string(),
                cumulative.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_table_csv(path: &Path, table: &ResultsTable) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["agent", "median", "max", "min"])?;
    for row in &table.rows {
        w.write_record([
            row.agent.clone(),
            row.median.to_string(),
            row.max.to_string(),
            row.min.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Running maximum of training-episode returns, in episode order.
pub fn learning_curve(records: &[EpisodeRecord]) -> Result<Vec<f64>, HarnessError> {
    let mut training: Vec<&EpisodeRecord> = records
        .iter()
        .filter(|r| r.kind == RecordKind::Training)
        .collect();
    if training.is_empty() {
        return Err(HarnessError::EmptyRecords);
    }
    training.sort_by_key(|r| r.episode);
    let mut best = f64::NEG_INFINITY;
    Ok(training
        .iter()
        .map(|r| {
            best = best.max(r.total_return);
            best
        })
        .collect())
}

/// Cross-seed mean curves for one agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSeries {
    pub agent: String,
    pub mean_best_so_far: Vec<f64>,
    pub mean_return: Vec<f64>,
}

/// Averages per-seed curves over seeds; episodes missing from shorter runs
/// are averaged over the seeds that have them.
pub fn mean_curves(agent: &str, records: &[EpisodeRecord]) -> Result<CurveSeries, HarnessError> {
    let mut by_seed: BTreeMap<u64, Vec<EpisodeRecord>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.agent_name == agent) {
        by_seed.entry(r.seed).or_default().push(r.clone());
    }
    if by_seed.is_empty() {
        return Err(HarnessError::EmptyRecords);
    }
    let mut best_sum: Vec<(f64, usize)> = Vec::new();
    let mut ret_sum: Vec<(f64, usize)> = Vec::new();
    for recs in by_seed.values() {
        let curve = learning_curve(recs)?;
        let mut training: Vec<&EpisodeRecord> =
            recs.iter().filter(|r| r.kind == RecordKind::Training).collect();
        training.sort_by_key(|r| r.episode);
        for (i, (b, r)) in curve.iter().zip(&training).enumerate() {
            if best_sum.len() <= i {
                best_sum.push((0.0, 0));
                ret_sum.push((0.0, 0));
            }
            best_sum[i].0 += b;
            best_sum[i].1 += 1;
            ret_sum[i].0 += r.total_return;
            ret_sum[i].1 += 1;
        }
    }
    let avg = |v: Vec<(f64, usize)>| v.into_iter().map(|(s, n)| s / n as f64).collect();
    Ok(CurveSeries {
        agent: agent.to_string(),
        mean_best_so_far: avg(best_sum),
        mean_return: avg(ret_sum),
    })
}

/// [`mean_curves`] for every agent in order of first appearance.
pub fn curves_by_agent(records: &[EpisodeRecord]) -> Result<Vec<CurveSeries>, HarnessError> {
    let mut agents: Vec<&str> = Vec::new();
    for r in records {
        if !agents.contains(&r.agent_name.as_str()) {
            agents.push(&r.agent_name);
        }
    }
    agents.into_iter().map(|a| mean_curves(a, records)).collect()
}

pub fn write_curves_csv(path: &Path, curves: &[CurveSeries]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["agent", "episode", "mean_best_so_far", "mean_return"])?;
    for c in curves {
        for (i, (b, r)) in c.mean_best_so_far.iter().zip(&c.mean_return).enumerate() {
            w.write_record([c.agent.clone(), (i + 1).to_string(), b.to_string(), r.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// Line chart of the mean best-so-far curves.
pub fn curves_svg(curves: &[CurveSeries]) -> String {
    let (w, h, pad) = (640.0, 400.0, 50.0);
    let values = curves.iter().flat_map(|c| c.mean_best_so_far.iter().copied());
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    });
    let (lo, hi) = if lo.is_finite() && hi > lo { (lo, hi) } else { (lo - 1.0, lo + 1.0) };
    let episodes = curves.iter().map(|c| c.mean_best_so_far.len()).max().unwrap_or(1).max(2);
    let x = |i: usize| pad + (w - 2.0 * pad) * i as f64 / (episodes - 1) as f64;
    let y = |v: f64| h - pad - (h - 2.0 * pad) * (v - lo) / (hi - lo);

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <line x1=\"{pad}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <text x=\"{cx}\" y=\"{ty}\" text-anchor=\"middle\">episode</text>\n\
         <text x=\"{pad}\" y=\"{ly}\" text-anchor=\"start\">mean best-so-far return ({lo:.1} to {hi:.1})</text>\n",
        b = h - pad,
        r = w - pad,
        cx = w / 2.0,
        ty = h - 15.0,
        ly = pad - 15.0,
    );
    for (k, c) in curves.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let points: Vec<String> = c
            .mean_best_so_far
            .iter()
            .enumerate()
            .map(|(i, &v)| format!("{:.1},{:.1}", x(i), y(v)))
            .collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n",
            points.join(" ")
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{}</text>\n",
            w - pad - 100.0,
            pad + 15.0 * (k as f64 + 1.0),
            c.agent
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

/// Optimal open-loop action sequence over `grid` by brute force.
///
/// Sequences are enumerated in lexicographic grid order and the first one
/// reaching the maximum return is kept.
pub fn exhaustive_oracle(
    env_spec: &EnvSpec,
    grid: &[ActionPair],
    mdp: &MdpConfig,
) -> Result<(Policy, f64), HarnessError> {
    let EnvSpec::Surrogate { params } = env_spec else {
        return Err(HarnessError::NondeterministicEnv);
    };
    if !params.is_deterministic() {
        return Err(HarnessError::NondeterministicEnv);
    }
    if grid.is_empty() {
        return Err(HarnessError::InvalidConfig("empty oracle grid".into()));
    }
    let size = (grid.len() as f64).powi(mdp.horizon as i32);
    if size > ORACLE_CAP as f64 {
        return Err(HarnessError::SearchSpaceTooLarge {
            size,
            cap: ORACLE_CAP,
        });
    }
    let mut env = SurrogateEnv::new(params.clone(), mdp.clone(), 0)?;
    env.reset()?;
    let mut best: Option<(Vec<ActionPair>, f64)> = None;
    let mut prefix = Vec::with_capacity(mdp.horizon as usize);
    search_sequences(&env, grid, mdp, 0.0, 1.0, &mut prefix, &mut best)?;
    let (actions, value) = best.expect("non-empty grid");
    Ok((Policy(actions), value))
}

// Depth-first over cloned environments; each leaf is one complete sequence
// played from a fresh reset.
fn search_sequences(
    env: &SurrogateEnv,
    grid: &[ActionPair],
    mdp: &MdpConfig,
    value: f64,
    discount: f64,
    prefix: &mut Vec<ActionPair>,
    best: &mut Option<(Vec<ActionPair>, f64)>,
) -> Result<(), HarnessError> {
    if prefix.len() == mdp.horizon as usize {
        if best.as_ref().is_none_or(|b| value > b.1) {
            *best = Some((prefix.clone(), value));
        }
        return Ok(());
    }
    for &a in grid {
        let mut next = env.clone();
        let out = next.step(a)?;
        prefix.push(a);
        search_sequences(
            &next,
            grid,
            mdp,
            value + discount * out.reward,
            discount * mdp.gamma,
            prefix,
            best,
        )?;
        prefix.pop();
    }
    Ok(())
}

/// Per-step greedy policy on the true environment.
pub fn greedy_policy(
    params: &SurrogateParams,
    grid: &[ActionPair],
    mdp: &MdpConfig,
) -> Result<(Policy, f64), HarnessError> {
    let mut env = SurrogateEnv::new(params.clone(), mdp.clone(), 0)?;
    env.reset()?;
    let mut actions = Vec::new();
    let mut value = 0.0;
    let mut discount = 1.0;
    for _ in 0..mdp.horizon {
        let mut best: Option<(ActionPair, f64)> = None;
        for &a in grid {
            let r = env.clone().step(a)?.reward;
            if best.is_none_or(|b| r > b.1) {
                best = Some((a, r));
            }
        }
        let (a, _) = best.ok_or_else(|| HarnessError::InvalidConfig("empty grid".into()))?;
        let r = env.step(a)?.reward;
        value += discount * r;
        discount *= mdp.gamma;
        actions.push(a);
    }
    Ok((Policy(actions), value))
}
