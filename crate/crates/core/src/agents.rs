//! The variance-bonus tree-search agent and the comparison agents.
//!
//! Every agent gets the same budget of environment episodes and returns an
//! open-loop policy of `T` grid actions as its final decision. Model-based
//! agents start with one uniformly random episode.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{EnvError, Environment, EpisodeRecord, MdpConfig, RecordKind, Transition};
use crate::features::{phi_unchecked, ActionGrid, ActionPair, State};
use crate::gp::{select_hyperparams, FittedGp, GpError, GpHyperParams, SearchConfig, TrainingSet};
use crate::planner::{plan, PlannerConfig, PlannerError, RewardMode, WorldModel};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error(transparent)]
    Planner(#[from] PlannerError),
    #[error("invalid agent configuration: {0}")]
    InvalidConfig(String),
    #[error("unknown agent {0:?}")]
    UnknownAgent(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    VbMcts,
    Random,
    SmabThompson,
    Cem,
    GpRmax,
    GpMc,
}

impl AgentKind {
    pub const ALL: [AgentKind; 6] = [
        AgentKind::VbMcts,
        AgentKind::Random,
        AgentKind::SmabThompson,
        AgentKind::Cem,
        AgentKind::GpRmax,
        AgentKind::GpMc,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AgentKind::VbMcts => "vb_mcts",
            AgentKind::Random => "random",
            AgentKind::SmabThompson => "smab_thompson",
            AgentKind::Cem => "cem",
            AgentKind::GpRmax => "gp_rmax",
            AgentKind::GpMc => "gp_mc",
        }
    }
}

impl fmt::Display for AgentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AgentKind {
    type Err = AgentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        AgentKind::ALL
            .into_iter()
            .find(|k| k.name() == key || (key == "vbmcts" && *k == AgentKind::VbMcts))
            .ok_or_else(|| AgentError::UnknownAgent(s.to_string()))
    }
}

/// When hyperparameters are re-selected during model-based training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HyperSchedule {
    #[default]
    EveryEpisode,
    EveryStep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RmaxConfig {
    /// "Unknown" threshold as a fraction of the model's prior variance.
    pub variance_fraction: f64,
    /// Optimistic per-step reward; the MDP's upper reward bound when unset.
    pub r_max: Option<f64>,
}

impl Default for RmaxConfig {
    fn default() -> Self {
        RmaxConfig {
            variance_fraction: 0.5,
            r_max: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GpMcConfig {
    /// Posterior samples per candidate sequence.
    pub samples: usize,
    /// Random candidate sequences per decision.
    pub pool: usize,
}

impl Default for GpMcConfig {
    fn default() -> Self {
        GpMcConfig {
            samples: 200,
            pool: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CemConfig {
    pub population: usize,
    pub elite_fraction: f64,
    pub iterations: usize,
    pub initial_std: f64,
    pub min_std: f64,
}

impl Default for CemConfig {
    fn default() -> Self {
        CemConfig {
            population: 30,
            elite_fraction: 0.2,
            iterations: 6,
            initial_std: 0.3,
            min_std: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SmabConfig {
    pub prior_mean: f64,
    pub prior_variance: f64,
    pub observation_variance: f64,
}

impl Default for SmabConfig {
    fn default() -> Self {
        SmabConfig {
            prior_mean: 0.0,
            prior_variance: 100.0 * 100.0,
            observation_variance: 10.0 * 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    /// Environment episodes available for training, the random one included.
    pub episodes_budget: usize,
    /// Planner settings for training episodes. Horizon, discount and reward
    /// mode are overwritten from the other fields.
    pub planner: PlannerConfig,
    /// Search iterations for each step of the final decision.
    pub final_iterations: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub mdp: MdpConfig,
    pub rng_seed: u64,
    pub hyper_search: SearchConfig,
    pub hyper_schedule: HyperSchedule,
    pub rmax: RmaxConfig,
    pub gp_mc: GpMcConfig,
    pub cem: CemConfig,
    pub smab: SmabConfig,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            episodes_budget: 20,
            planner: PlannerConfig::default(),
            final_iterations: 100_000,
            beta1: 3.5,
            beta2: 0.0,
            mdp: MdpConfig::default(),
            rng_seed: 0,
            hyper_search: SearchConfig::default(),
            hyper_schedule: HyperSchedule::EveryEpisode,
            rmax: RmaxConfig::default(),
            gp_mc: GpMcConfig::default(),
            cem: CemConfig::default(),
            smab: SmabConfig::default(),
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<(), AgentError> {
        if self.episodes_budget < 1 {
            return Err(AgentError::InvalidConfig("episodes_budget must be >= 1".into()));
        }
        if self.beta1 < 0.0 || self.beta2 < 0.0 {
            return Err(AgentError::InvalidConfig(
                "exploration weights must be non-negative".into(),
            ));
        }
        if self.final_iterations < 1 {
            return Err(AgentError::InvalidConfig("final_iterations must be >= 1".into()));
        }
        self.mdp.validate()?;
        self.base_planner().validate()?;
        Ok(())
    }

    pub fn grid(&self) -> ActionGrid {
        self.planner.action_grid.clone()
    }

    fn base_planner(&self) -> PlannerConfig {
        PlannerConfig {
            horizon: self.mdp.horizon,
            gamma: self.mdp.gamma,
            ..self.planner.clone()
        }
        .clamped()
    }

    fn planner_for(&self, mode: RewardMode, iterations: usize, episode: usize, step: u32) -> PlannerConfig {
        PlannerConfig {
            reward_mode: mode,
            max_iterations: iterations,
            rng_seed: derive_seed(self.rng_seed, episode as u64 * 1_000 + step as u64),
            ..self.base_planner()
        }
    }
}

fn derive_seed(base: u64, salt: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = base ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Open-loop sequence of `T` grid actions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy(pub Vec<ActionPair>);

impl Policy {
    pub fn actions(&self) -> &[ActionPair] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn validate(&self, horizon: u32, grid: &ActionGrid) -> Result<(), String> {
        if self.0.len() != horizon as usize {
            return Err(format!("policy has {} actions, horizon is {horizon}", self.0.len()));
        }
        match self.0.iter().find(|a| grid.index_of(**a).is_none()) {
            Some(a) => Err(format!("action ({}, {}) is not on the grid", a.itn, a.irs)),
            None => Ok(()),
        }
    }
}

/// Outcome of one training run.
#[derive(Debug, Clone)]
pub struct AgentRun {
    pub policy: Policy,
    pub records: Vec<EpisodeRecord>,
    pub model: Option<FittedGp>,
}

struct Recorder<'a> {
    agent: &'a str,
    seed: u64,
    records: Vec<EpisodeRecord>,
}

impl Recorder<'_> {
    fn push(&mut self, transitions: Vec<Transition>, model_points: Vec<usize>, gamma: f64) {
        let mut g = 1.0;
        let mut total = 0.0;
        for t in &transitions {
            total += g * t.reward;
            g *= gamma;
        }
        self.records.push(EpisodeRecord {
            seed: self.seed,
            agent_name: self.agent.to_string(),
            episode: self.records.len() + 1,
            kind: RecordKind::Training,
            transitions,
            total_return: total,
            model_points,
        });
    }
}

fn step_env<E: Environment + ?Sized>(
    env: &mut E,
    state: State,
    action: ActionPair,
    episode: usize,
) -> Result<(Transition, bool), AgentError> {
    let out = env
        .step(action)
        .map_err(|e| e.in_episode(episode, state.timestep))?;
    Ok((
        Transition {
            state,
            action,
            reward: out.reward,
            next_state: out.state,
        },
        out.done,
    ))
}

/// Plays a fixed action list from a fresh reset.
fn play<E: Environment + ?Sized>(
    env: &mut E,
    actions: &[ActionPair],
    episode: usize,
) -> Result<Vec<Transition>, AgentError> {
    let mut state = env.reset().map_err(|e| e.in_episode(episode, 0))?;
    let mut out = Vec::with_capacity(actions.len());
    for &a in actions {
        let (t, done) = step_env(env, state, a, episode)?;
        state = t.next_state;
        out.push(t);
        if done {
            break;
        }
    }
    Ok(out)
}

fn random_actions(grid: &ActionGrid, horizon: u32, rng: &mut impl Rng) -> Vec<ActionPair> {
    (0..horizon)
        .map(|_| grid.actions()[rng.random_range(0..grid.len())])
        .collect()
}

/// Learned model with the current training data.
struct ModelState {
    data: TrainingSet,
    hyperparams: GpHyperParams,
    gp: FittedGp,
}

impl ModelState {
    fn new() -> Result<Self, AgentError> {
        let data = TrainingSet::default();
        let hyperparams = GpHyperParams::default_for(crate::FEATURE_DIM);
        let gp = FittedGp::fit_standardized(data.clone(), hyperparams.clone())?;
        Ok(ModelState {
            data,
            hyperparams,
            gp,
        })
    }

    fn add(&mut self, transitions: &[Transition]) {
        for t in transitions {
            self.data
                .push(phi_unchecked(&t.state, t.action).as_slice(), t.reward);
        }
    }

    fn reselect(&mut self, search: &SearchConfig, salt: u64) {
        let search = SearchConfig {
            seed: derive_seed(search.seed, salt),
            ..search.clone()
        };
        self.hyperparams = select_hyperparams(&self.data, &search).hyperparams;
    }

    fn refit(&mut self) -> Result<(), AgentError> {
        self.gp = FittedGp::fit_standardized(self.data.clone(), self.hyperparams.clone())?;
        Ok(())
    }
}

fn initial_episode<E: Environment + ?Sized>(
    env: &mut E,
    config: &AgentConfig,
    rng: &mut ChaCha8Rng,
    recorder: &mut Recorder,
    model: &mut ModelState,
) -> Result<(), AgentError> {
    let actions = random_actions(&config.planner.action_grid, config.mdp.horizon, rng);
    let transitions = play(env, &actions, 1)?;
    model.add(&transitions);
    model.reselect(&config.hyper_search, 1);
    model.refit()?;
    recorder.push(transitions, Vec::new(), config.mdp.gamma);
    Ok(())
}

/// Closed-loop training with the tree-search planner: one random episode,
/// then a refit after every transition.
fn train_planning<E, F>(
    env: &mut E,
    config: &AgentConfig,
    agent: &str,
    mode_for: F,
) -> Result<(FittedGp, Vec<EpisodeRecord>), AgentError>
where
    E: Environment + ?Sized,
    F: Fn(&FittedGp) -> RewardMode,
{
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let mut recorder = Recorder {
        agent,
        seed: config.rng_seed,
        records: Vec::new(),
    };
    let mut model = ModelState::new()?;
    initial_episode(env, config, &mut rng, &mut recorder, &mut model)?;

    for episode in 2..=config.episodes_budget {
        if config.hyper_schedule == HyperSchedule::EveryEpisode && episode > 2 {
            model.reselect(&config.hyper_search, episode as u64);
            model.refit()?;
        }
        let mut state = env.reset().map_err(|e| e.in_episode(episode, 0))?;
        let mut history = Vec::with_capacity(config.mdp.horizon as usize);
        let mut transitions = Vec::with_capacity(config.mdp.horizon as usize);
        let mut points = Vec::with_capacity(config.mdp.horizon as usize);
        while state.timestep <= config.mdp.horizon {
            let planner = config.planner_for(
                mode_for(&model.gp),
                config.planner.max_iterations,
                episode,
                state.timestep,
            );
            let action = plan(&state, &history, &model.gp, &planner)?;
            points.push(model.gp.len());
            let (t, done) = step_env(env, state, action, episode)?;
            model.add(std::slice::from_ref(&t));
            if config.hyper_schedule == HyperSchedule::EveryStep {
                model.reselect(&config.hyper_search, episode as u64 * 1_000 + state.timestep as u64);
            }
            model.refit()?;
            transitions.push(t);
            history.push(action);
            state = t.next_state;
            if done {
                break;
            }
        }
        log::debug!("{agent} seed {} episode {episode} done", config.rng_seed);
        recorder.push(transitions, points, config.mdp.gamma);
    }
    Ok((model.gp, recorder.records))
}

/// Trains the variance-bonus agent; returns the final model and all records.
pub fn train_vbmcts<E: Environment + ?Sized>(
    env: &mut E,
    config: &AgentConfig,
) -> Result<(FittedGp, Vec<EpisodeRecord>), AgentError> {
    let mode = RewardMode::VarianceBonus {
        beta1: config.beta1,
        beta2: config.beta2,
    };
    train_planning(env, config, AgentKind::VbMcts.name(), |_| mode)
}

fn rmax_mode(config: &AgentConfig, gp: &FittedGp) -> RewardMode {
    RewardMode::Optimistic {
        r_max: config.rmax.r_max.unwrap_or(config.mdp.reward_bounds.1),
        variance_threshold: config.rmax.variance_fraction * gp.prior_variance(),
    }
}

/// Plans every step of the final decision on the model's mean predictions,
/// moving through mean-predicted states.
pub fn final_policy<M: WorldModel + ?Sized>(
    model: &M,
    config: &AgentConfig,
) -> Result<Policy, AgentError> {
    let mut state = State::start();
    let mut history = Vec::with_capacity(config.mdp.horizon as usize);
    while state.timestep <= config.mdp.horizon {
        let planner = config.planner_for(RewardMode::Mean, config.final_iterations, 0, state.timestep);
        let action = plan(&state, &history, model, &planner)?;
        let reward = model.predict_mean(&history, &state, action);
        history.push(action);
        state = state.advance(action, reward);
    }
    Ok(Policy(history))
}

/// Runs a comparison agent under the episode budget.
pub fn baseline_policy<E: Environment + ?Sized>(
    kind: AgentKind,
    env: &mut E,
    config: &AgentConfig,
) -> Result<(Policy, Vec<EpisodeRecord>), AgentError> {
    config.validate()?;
    match kind {
        AgentKind::Random => random_search(env, config),
        AgentKind::SmabThompson => smab_thompson(env, config),
        AgentKind::Cem => cem(env, config),
        AgentKind::GpRmax => {
            let (gp, records) =
                train_planning(env, config, kind.name(), |gp| rmax_mode(config, gp))?;
            Ok((final_policy(&gp, config)?, records))
        }
        AgentKind::GpMc => gp_mc(env, config).map(|(p, r, _)| (p, r)),
        AgentKind::VbMcts => Err(AgentError::UnknownAgent(
            "vb_mcts is not a baseline; use run_agent".into(),
        )),
    }
}

/// Trains any agent and produces its final decision.
pub fn run_agent<E: Environment + ?Sized>(
    kind: AgentKind,
    env: &mut E,
    config: &AgentConfig,
) -> Result<AgentRun, AgentError> {
    match kind {
        AgentKind::VbMcts => {
            let (gp, records) = train_vbmcts(env, config)?;
            let policy = final_policy(&gp, config)?;
            Ok(AgentRun {
                policy,
                records,
                model: Some(gp),
            })
        }
        AgentKind::GpRmax => {
            config.validate()?;
            let (gp, records) =
                train_planning(env, config, kind.name(), |gp| rmax_mode(config, gp))?;
            let policy = final_policy(&gp, config)?;
            Ok(AgentRun {
                policy,
                records,
                model: Some(gp),
            })
        }
        AgentKind::GpMc => {
            config.validate()?;
            let (policy, records, gp) = gp_mc(env, config)?;
            Ok(AgentRun {
                policy,
                records,
                model: Some(gp),
            })
        }
        _ => {
            let (policy, records) = baseline_policy(kind, env, config)?;
            Ok(AgentRun {
                policy,
                records,
                model: None,
            })
        }
    }
}

fn best_episode(records: &[EpisodeRecord]) -> Policy {
    let mut best = &records[0];
    for r in &records[1..] {
        if r.total_return > best.total_return {
            best = r;
        }
    }
    Policy(best.actions())
}

fn random_search<E: Environment + ?Sized>(
    env: &mut E,
    config: &AgentConfig,
) -> Result<(Policy, Vec<EpisodeRecord>), AgentError> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let mut recorder = Recorder {
        agent: AgentKind::Random.name(),
        seed: config.rng_seed,
        records: Vec::new(),
    };
    for episode in 1..=config.episodes_budget {
        let actions = random_actions(&config.planner.action_grid, config.mdp.horizon, &mut rng);
        let transitions = play(env, &actions, episode)?;
        recorder.push(transitions, Vec::new(), config.mdp.gamma);
    }
    Ok((best_episode(&recorder.records), recorder.records))
}

/// One Gaussian bandit per timestep with one arm per grid action.
fn smab_thompson<E: Environment + ?Sized>(
    env: &mut E,
    config: &AgentConfig,
) -> Result<(Policy, Vec<EpisodeRecord>), AgentError> {
    let grid = &config.planner.action_grid;
    let horizon = config.mdp.horizon as usize;
    let prior = (config.smab.prior_mean, config.smab.prior_variance);
    let obs_var = config.smab.observation_variance;
    // (mean, variance) per timestep and arm
    let mut posterior = vec![vec![prior; grid.len()]; horizon];
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let mut recorder = Recorder {
        agent: AgentKind::SmabThompson.name(),
        seed: config.rng_seed,
        records: Vec::new(),
    };

    for episode in 1..=config.episodes_budget {
        let mut state = env.reset().map_err(|e| e.in_episode(episode, 0))?;
        let mut transitions = Vec::with_capacity(horizon);
        for arms in posterior.iter_mut() {
            let mut best = (0, f64::NEG_INFINITY);
            for (i, &(m, v)) in arms.iter().enumerate() {
                let z: f64 = StandardNormal.sample(&mut rng);
                let draw = m + v.sqrt() * z;
                if draw > best.1 {
                    best = (i, draw);
                }
            }
            let action = grid.actions()[best.0];
            let (t, done) = step_env(env, state, action, episode)?;
            let (m, v) = arms[best.0];
            let post_var = 1.0 / (1.0 / v + 1.0 / obs_var);
            arms[best.0] = (post_var * (m / v + t.reward / obs_var), post_var);
            state = t.next_state;
            transitions.push(t);
            if done {
                break;
            }
        }
        recorder.push(transitions, Vec::new(), config.mdp.gamma);
    }

    let policy = posterior
        .iter()
        .map(|arms| {
            let mut best = 0;
            for (i, arm) in arms.iter().enumerate() {
                if arm.0 > arms[best].0 {
                    best = i;
                }
            }
            grid.actions()[best]
        })
        .collect();
    Ok((Policy(policy), recorder.records))
}

/// Cross-entropy search over the `2T` action components, scored on the
/// environment until the budget runs out.
fn cem<E: Environment + ?Sized>(
    env: &mut E,
    config: &AgentConfig,
) -> Result<(Policy, Vec<EpisodeRecord>), AgentError> {
    let grid = &config.planner.action_grid;
    let levels = grid.levels();
    let (lo, hi) = (levels[0], levels[levels.len() - 1]);
    let horizon = config.mdp.horizon as usize;
    let cfg = &config.cem;
    let mut mean = vec![0.5 * (lo + hi); 2 * horizon];
    let mut std = vec![cfg.initial_std; 2 * horizon];
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let mut recorder = Recorder {
        agent: AgentKind::Cem.name(),
        seed: config.rng_seed,
        records: Vec::new(),
    };
    let to_actions = |v: &[f64]| -> Vec<ActionPair> {
        v.chunks_exact(2).map(|c| grid.snap(c[0], c[1])).collect()
    };

    for _ in 0..cfg.iterations {
        let remaining = config.episodes_budget - recorder.records.len();
        let population = cfg.population.min(remaining);
        if population == 0 {
            break;
        }
        let mut scored = Vec::with_capacity(population);
        for _ in 0..population {
            let v: Vec<f64> = mean
                .iter()
                .zip(&std)
                .map(|(&m, &s)| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    (m + s * z).clamp(lo, hi)
                })
                .collect();
            let episode = recorder.records.len() + 1;
            let transitions = play(env, &to_actions(&v), episode)?;
            recorder.push(transitions, Vec::new(), config.mdp.gamma);
            scored.push((recorder.records.last().expect("pushed").total_return, v));
        }
        scored.sort_by(|a, b| b.0.total_cmp(&a.0));
        let elites = ((cfg.elite_fraction * population as f64).ceil() as usize).clamp(1, population);
        for d in 0..mean.len() {
            let m = scored[..elites].iter().map(|s| s.1[d]).sum::<f64>() / elites as f64;
            let var = scored[..elites]
                .iter()
                .map(|s| (s.1[d] - m).powi(2))
                .sum::<f64>()
                / elites as f64;
            mean[d] = m;
            std[d] = var.sqrt().max(cfg.min_std);
        }
    }
    Ok((Policy(to_actions(&mean)), recorder.records))
}

/// Picks the sequence with the best sample-mean return among a random pool.
///
/// States along each sequence follow the model's mean predictions. Only the
/// discounted sum of a joint sample matters, and that sum is Gaussian with
/// variance `w' S w`, so it is drawn directly from that marginal.
fn gp_mc_decide(
    gp: &FittedGp,
    config: &AgentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<ActionPair>, AgentError> {
    let grid = &config.planner.action_grid;
    let horizon = config.mdp.horizon;
    let weights: Vec<f64> = (0..horizon).map(|k| config.mdp.gamma.powi(k as i32)).collect();
    let mut best: Option<(f64, Vec<ActionPair>)> = None;
    for _ in 0..config.gp_mc.pool.max(1) {
        let actions = random_actions(grid, horizon, rng);
        let mut state = State::start();
        let mut feats = Vec::with_capacity(actions.len());
        for &a in &actions {
            let f = phi_unchecked(&state, a);
            let mean = gp.predict_mean_unchecked(f.as_slice());
            feats.push(f);
            state = state.advance(a, mean);
        }
        let xs: Vec<&[f64]> = feats.iter().map(|f| f.as_slice()).collect();
        let (means, cov) = gp.predict_joint(&xs)?;
        let mu: f64 = means.iter().zip(&weights).map(|(m, w)| m * w).sum();
        let mut var = 0.0;
        for i in 0..weights.len() {
            for j in 0..weights.len() {
                var += weights[i] * cov[(i, j)] * weights[j];
            }
        }
        let dist = Normal::new(mu, var.max(0.0).sqrt()).expect("finite moments");
        let k = config.gp_mc.samples.max(1);
        let score = (0..k).map(|_| dist.sample(rng)).sum::<f64>() / k as f64;
        if best.as_ref().is_none_or(|b| score > b.0) {
            best = Some((score, actions));
        }
    }
    Ok(best.expect("non-empty pool").1)
}

fn gp_mc<E: Environment + ?Sized>(
    env: &mut E,
    config: &AgentConfig,
) -> Result<(Policy, Vec<EpisodeRecord>, FittedGp), AgentError> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let mut recorder = Recorder {
        agent: AgentKind::GpMc.name(),
        seed: config.rng_seed,
        records: Vec::new(),
    };
    let mut model = ModelState::new()?;
    initial_episode(env, config, &mut rng, &mut recorder, &mut model)?;
    for episode in 2..=config.episodes_budget {
        if episode > 2 {
            model.reselect(&config.hyper_search, episode as u64);
            model.refit()?;
        }
        let actions = gp_mc_decide(&model.gp, config, &mut rng)?;
        let transitions = play(env, &actions, episode)?;
        let points = vec![model.gp.len(); transitions.len()];
        model.add(&transitions);
        model.refit()?;
        recorder.push(transitions, points, config.mdp.gamma);
    }
    model.reselect(&config.hyper_search, config.episodes_budget as u64 + 1);
    model.refit()?;
    let policy = gp_mc_decide(&model.gp, config, &mut rng)?;
    Ok((Policy(policy), recorder.records, model.gp))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{CountingEnv, SurrogateEnv};
    use crate::gp::Prediction;
    use crate::planner::{FnModel, SurrogateModel};

    fn quick_config(budget: usize) -> AgentConfig {
        AgentConfig {
            episodes_budget: budget,
            planner: PlannerConfig {
                max_iterations: 60,
                expansion_top_k: 10,
                ..PlannerConfig::default()
            },
            final_iterations: 200,
            gp_mc: GpMcConfig {
                samples: 20,
                pool: 50,
            },
            hyper_search: SearchConfig {
                max_ascent_steps: 5,
                random_starts: 0,
                ..SearchConfig::default()
            },
            ..AgentConfig::default()
        }
    }

    #[test]
    fn agent_names_round_trip() {
        for kind in AgentKind::ALL {
            assert_eq!(kind.name().parse::<AgentKind>().unwrap(), kind);
        }
        assert_eq!("VBMCTS".parse::<AgentKind>().unwrap(), AgentKind::VbMcts);
        assert!("cma_es".parse::<AgentKind>().is_err());
    }

    #[test]
    fn vbmcts_training_accounts_for_every_transition() {
        let config = quick_config(4);
        let mut env = CountingEnv::new(SurrogateEnv::with_defaults(0));
        let (gp, records) = train_vbmcts(&mut env, &config).unwrap();
        assert_eq!(gp.len(), 20);
        assert_eq!(records.len(), 4);
        assert_eq!(env.steps(), 20);
        assert!(records[0].model_points.is_empty());
        for (k, r) in records.iter().enumerate().skip(1) {
            r.validate(1.0).unwrap();
            let expected: Vec<usize> = (0..5).map(|t| 5 + (k - 1) * 5 + t).collect();
            assert_eq!(r.model_points, expected);
        }
    }

    #[test]
    fn budget_of_one_trains_on_the_random_episode_only() {
        let config = quick_config(1);
        let mut env = CountingEnv::new(SurrogateEnv::with_defaults(0));
        let (gp, records) = train_vbmcts(&mut env, &config).unwrap();
        assert_eq!(gp.len(), 5);
        assert_eq!(records.len(), 1);
        assert_eq!(env.steps(), 5);
    }

    #[test]
    fn every_agent_respects_the_budget() {
        let config = quick_config(6);
        for kind in AgentKind::ALL {
            let mut env = CountingEnv::new(SurrogateEnv::with_defaults(0));
            let run = run_agent(kind, &mut env, &config).unwrap();
            assert!(env.steps() <= 6 * 5, "{kind}: {} steps", env.steps());
            assert!(run.records.len() <= 6);
            run.policy.validate(5, &config.grid()).unwrap();
            for r in &run.records {
                assert_eq!(r.agent_name, kind.name());
                r.validate(1.0).unwrap();
            }
        }
    }

    #[test]
    fn random_picks_the_best_episode() {
        let config = quick_config(20);
        let mut env = SurrogateEnv::with_defaults(0);
        let (policy, records) = baseline_policy(AgentKind::Random, &mut env, &config).unwrap();
        assert_eq!(records.len(), 20);
        let best = records
            .iter()
            .map(|r| r.total_return)
            .fold(f64::NEG_INFINITY, f64::max);
        let chosen = records.iter().find(|r| r.actions() == policy.0).unwrap();
        assert_eq!(chosen.total_return, best);
    }

    /// Environment whose reward is 100 for one fixed action and 0 otherwise.
    struct Spike {
        target: ActionPair,
        t: u32,
    }

    impl Environment for Spike {
        fn reset(&mut self) -> Result<State, EnvError> {
            self.t = 1;
            Ok(State::start())
        }
        fn step(&mut self, action: ActionPair) -> Result<crate::env::StepOutcome, EnvError> {
            let reward = if action == self.target { 100.0 } else { 0.0 };
            self.t += 1;
            Ok(crate::env::StepOutcome {
                state: State {
                    prev_reward: reward,
                    prev_action: action,
                    timestep: self.t,
                },
                reward,
                done: self.t > 5,
            })
        }
        fn horizon(&self) -> u32 {
            5
        }
    }

    #[test]
    fn smab_locks_onto_a_dominant_arm() {
        let config = AgentConfig {
            planner: PlannerConfig {
                action_grid: ActionGrid::from_levels(vec![0.5, 1.0]).unwrap(),
                expansion_top_k: 4,
                ..PlannerConfig::default()
            },
            episodes_budget: 20,
            ..AgentConfig::default()
        };
        let target = ActionPair { itn: 1.0, irs: 0.5 };
        let mut env = Spike { target, t: 1 };
        let (policy, _) = baseline_policy(AgentKind::SmabThompson, &mut env, &config).unwrap();
        assert_eq!(policy.0, vec![target; 5]);
    }

    #[test]
    fn final_policy_is_deterministic_and_valid() {
        let config = quick_config(3);
        let mut env = SurrogateEnv::with_defaults(0);
        let (gp, _) = train_vbmcts(&mut env, &config).unwrap();
        let a = final_policy(&gp, &config).unwrap();
        let b = final_policy(&gp, &config).unwrap();
        assert_eq!(a, b);
        a.validate(5, &config.grid()).unwrap();
    }

    #[test]
    fn rmax_with_everything_unknown_takes_the_first_action() {
        let model = FnModel(|_: &[ActionPair], _: &State, _: ActionPair| Prediction {
            mean: 0.0,
            variance: 1e6,
        });
        let config = quick_config(1);
        let planner = config.planner_for(
            RewardMode::Optimistic {
                r_max: 120.0,
                variance_threshold: 1.0,
            },
            500,
            1,
            1,
        );
        let a = plan(&State::start(), &[], &model, &planner).unwrap();
        assert_eq!(a, config.grid().get(0).unwrap());
    }

    #[test]
    fn lookup_model_final_policy_is_reasonable() {
        let config = AgentConfig {
            planner: PlannerConfig {
                action_grid: ActionGrid::from_levels(vec![0.1, 0.5, 1.0]).unwrap(),
                expansion_top_k: 9,
                ..PlannerConfig::default()
            },
            final_iterations: 20_000,
            ..AgentConfig::default()
        };
        let policy = final_policy(&SurrogateModel::default(), &config).unwrap();
        policy.validate(5, &config.grid()).unwrap();
        let mut env = SurrogateEnv::with_defaults(0);
        let ret: f64 = play(&mut env, &policy.0, 1)
            .unwrap()
            .iter()
            .map(|t| t.reward)
            .sum();
        // optimum on this grid is 289.856 (brute force)
        assert!(ret > 285.0, "return {ret}");
    }
}
