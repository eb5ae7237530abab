//! The finite-horizon intervention MDP.
//!
//! [`SurrogateEnv`] is a deterministic stand-in simulator with delayed action
//! effects. Its per-step reward is
//!
//! ```text
//! r_t = A (1 - exp(-k1 itn_t - k2 irs_t res_t)) - C1 itn_t - C2 irs_t + B itn_{t-1} (1 - itn_t)
//! res_t = max(0, 1 - rho_res * sum_{j<t} irs_j)
//! ```
//!
//! Spraying erodes its own future efficacy through `res_t`, and a net
//! campaign leaves a carry-over benefit into the following year, so the
//! per-step greedy choice is not optimal over the horizon.
//!
//! [`external::ExternalEnv`] drives any process speaking the JSON-lines
//! protocol in [`external`].

pub mod external;

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{ActionPair, State};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("step called after the episode finished")]
    StepAfterDone,
    #[error("action ({itn}, {irs}) is not on the {step} action grid")]
    OffGrid { itn: f64, irs: f64, step: f64 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("protocol error: {message} (line: {line:?})")]
    Protocol { message: String, line: String },
    #[error("timed out after {0:?} waiting for the environment")]
    Timeout(std::time::Duration),
    #[error("environment stream closed")]
    StreamClosed,
    #[error("episode {episode}, step {step}: {source}")]
    InEpisode {
        episode: usize,
        step: u32,
        #[source]
        source: Box<EnvError>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl EnvError {
    pub fn in_episode(self, episode: usize, step: u32) -> Self {
        EnvError::InEpisode {
            episode,
            step,
            source: Box::new(self),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MdpConfig {
    pub horizon: u32,
    pub gamma: f64,
    pub action_grid_step: f64,
    /// `(R_min, R_max)` per step.
    pub reward_bounds: (f64, f64),
}

impl Default for MdpConfig {
    fn default() -> Self {
        MdpConfig {
            horizon: 5,
            gamma: 1.0,
            action_grid_step: 0.1,
            reward_bounds: (-70.0, 120.0),
        }
    }
}

impl MdpConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        if self.horizon < 1 {
            return Err(EnvError::InvalidConfig("horizon must be >= 1".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(EnvError::InvalidConfig(format!(
                "gamma must lie in (0, 1], got {}",
                self.gamma
            )));
        }
        let k = (1.0 / self.action_grid_step).round();
        if !(self.action_grid_step > 0.0) || (k * self.action_grid_step - 1.0).abs() > 1e-9 {
            return Err(EnvError::InvalidConfig(format!(
                "grid step {} does not divide 1.0",
                self.action_grid_step
            )));
        }
        if self.reward_bounds.0 > self.reward_bounds.1 {
            return Err(EnvError::InvalidConfig("reward bounds reversed".into()));
        }
        Ok(())
    }

    /// `sum_k gamma^k r_k`.
    pub fn discounted_return(&self, rewards: impl IntoIterator<Item = f64>) -> f64 {
        let mut g = 1.0;
        let mut total = 0.0;
        for r in rewards {
            total += g * r;
            g *= self.gamma;
        }
        total
    }
}

/// Constants of the surrogate reward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SurrogateParams {
    pub efficacy_scale: f64,
    pub itn_rate: f64,
    pub irs_rate: f64,
    pub itn_cost: f64,
    pub irs_cost: f64,
    pub carryover_bonus: f64,
    pub resistance_rate: f64,
    pub observation_noise: f64,
}

impl Default for SurrogateParams {
    fn default() -> Self {
        SurrogateParams {
            efficacy_scale: 120.0,
            itn_rate: 1.2,
            irs_rate: 1.5,
            itn_cost: 30.0,
            irs_cost: 40.0,
            carryover_bonus: 20.0,
            resistance_rate: 0.25,
            observation_noise: 0.0,
        }
    }
}

impl SurrogateParams {
    pub fn validate(&self) -> Result<(), EnvError> {
        let all = [
            self.efficacy_scale,
            self.itn_rate,
            self.irs_rate,
            self.itn_cost,
            self.irs_cost,
            self.carryover_bonus,
            self.resistance_rate,
            self.observation_noise,
        ];
        if all.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(EnvError::InvalidConfig(format!(
                "surrogate parameters must be non-negative: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn is_deterministic(&self) -> bool {
        self.observation_noise == 0.0
    }

    /// Remaining IRS efficacy after `cumulative_irs` of past spraying.
    pub fn resistance_factor(&self, cumulative_irs: f64) -> f64 {
        (1.0 - self.resistance_rate * cumulative_irs).max(0.0)
    }

    /// Noise-free reward of `action` given the hidden memory of the episode.
    pub fn reward(&self, prev_itn: f64, cumulative_irs: f64, action: ActionPair) -> f64 {
        let res = self.resistance_factor(cumulative_irs);
        let protection =
            1.0 - (-self.itn_rate * action.itn - self.irs_rate * action.irs * res).exp();
        self.efficacy_scale * protection - self.itn_cost * action.itn - self.irs_cost * action.irs
            + self.carryover_bonus * prev_itn * (1.0 - action.itn)
    }

    /// Noise-free reward of `action` after the actions in `history`.
    pub fn reward_after(&self, history: &[ActionPair], action: ActionPair) -> f64 {
        let cumulative: f64 = history.iter().map(|a| a.irs).sum();
        let prev_itn = history.last().map_or(0.0, |a| a.itn);
        self.reward(prev_itn, cumulative, action)
    }
}

/// Result of one environment step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub state: State,
    pub reward: f64,
    pub done: bool,
}

/// Episodic environment with the `reset`/`step` contract.
pub trait Environment {
    fn reset(&mut self) -> Result<State, EnvError>;
    fn step(&mut self, action: ActionPair) -> Result<StepOutcome, EnvError>;
    fn horizon(&self) -> u32;
}

impl<E: Environment + ?Sized> Environment for Box<E> {
    fn reset(&mut self) -> Result<State, EnvError> {
        (**self).reset()
    }
    fn step(&mut self, action: ActionPair) -> Result<StepOutcome, EnvError> {
        (**self).step(action)
    }
    fn horizon(&self) -> u32 {
        (**self).horizon()
    }
}

/// Deterministic (by default) surrogate simulator.
#[derive(Debug, Clone)]
pub struct SurrogateEnv {
    params: SurrogateParams,
    mdp: MdpConfig,
    state: State,
    cumulative_irs: f64,
    resistance: f64,
    done: bool,
    rng: ChaCha8Rng,
}

impl SurrogateEnv {
    pub fn new(params: SurrogateParams, mdp: MdpConfig, seed: u64) -> Result<Self, EnvError> {
        params.validate()?;
        mdp.validate()?;
        Ok(SurrogateEnv {
            params,
            mdp,
            state: State::start(),
            cumulative_irs: 0.0,
            resistance: 1.0,
            done: false,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn with_defaults(seed: u64) -> Self {
        Self::new(SurrogateParams::default(), MdpConfig::default(), seed)
            .expect("default configuration is valid")
    }

    pub fn params(&self) -> &SurrogateParams {
        &self.params
    }

    pub fn mdp(&self) -> &MdpConfig {
        &self.mdp
    }

    pub fn state(&self) -> State {
        self.state
    }

    /// Current IRS efficacy multiplier.
    pub fn resistance(&self) -> f64 {
        self.resistance
    }
}

impl Environment for SurrogateEnv {
    fn reset(&mut self) -> Result<State, EnvError> {
        self.state = State::start();
        self.cumulative_irs = 0.0;
        self.resistance = 1.0;
        self.done = false;
        Ok(self.state)
    }

    fn step(&mut self, action: ActionPair) -> Result<StepOutcome, EnvError> {
        if self.done {
            return Err(EnvError::StepAfterDone);
        }
        if !action.is_on_grid(self.mdp.action_grid_step) {
            return Err(EnvError::OffGrid {
                itn: action.itn,
                irs: action.irs,
                step: self.mdp.action_grid_step,
            });
        }
        self.resistance = self.params.resistance_factor(self.cumulative_irs);
        let mut reward =
            self.params
                .reward(self.state.prev_action.itn, self.cumulative_irs, action);
        if self.params.observation_noise > 0.0 {
            let noise = Normal::new(0.0, self.params.observation_noise)
                .expect("validated noise scale");
            reward += noise.sample(&mut self.rng);
        }
        self.cumulative_irs += action.irs;
        let done = self.state.timestep >= self.mdp.horizon;
        self.state = self.state.advance(action, reward);
        self.done = done;
        Ok(StepOutcome {
            state: self.state,
            reward,
            done,
        })
    }

    fn horizon(&self) -> u32 {
        self.mdp.horizon
    }
}

/// Counts every `step` call made through it.
#[derive(Debug)]
pub struct CountingEnv<E> {
    inner: E,
    steps: usize,
    resets: usize,
}

impl<E: Environment> CountingEnv<E> {
    pub fn new(inner: E) -> Self {
        CountingEnv {
            inner,
            steps: 0,
            resets: 0,
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn resets(&self) -> usize {
        self.resets
    }

    pub fn into_inner(self) -> E {
        self.inner
    }
}

impl<E: Environment> Environment for CountingEnv<E> {
    fn reset(&mut self) -> Result<State, EnvError> {
        self.resets += 1;
        self.inner.reset()
    }

    fn step(&mut self, action: ActionPair) -> Result<StepOutcome, EnvError> {
        self.steps += 1;
        self.inner.step(action)
    }

    fn horizon(&self) -> u32 {
        self.inner.horizon()
    }
}

/// `(s_t, a_t, r_t, s_{t+1})`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: State,
    pub action: ActionPair,
    pub reward: f64,
    pub next_state: State,
}

/// Whether an episode counted against the training budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    #[default]
    Training,
    /// Scoring run of the final decision, outside the trial budget.
    Evaluation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub seed: u64,
    pub agent_name: String,
    /// 1-based episode index within the run.
    pub episode: usize,
    #[serde(default)]
    pub kind: RecordKind,
    pub transitions: Vec<Transition>,
    pub total_return: f64,
    /// Training-set size of the model that chose each action (model-based agents).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub model_points: Vec<usize>,
}

impl EpisodeRecord {
    pub fn rewards(&self) -> impl Iterator<Item = f64> + '_ {
        self.transitions.iter().map(|t| t.reward)
    }

    pub fn actions(&self) -> Vec<ActionPair> {
        self.transitions.iter().map(|t| t.action).collect()
    }

    /// Checks the record invariants: consecutive timesteps starting at 1,
    /// the state recurrence, and the discounted return.
    pub fn validate(&self, gamma: f64) -> Result<(), String> {
        let mut g = 1.0;
        let mut total = 0.0;
        for (i, t) in self.transitions.iter().enumerate() {
            if t.state.timestep as usize != i + 1 {
                return Err(format!("transition {i} has timestep {}", t.state.timestep));
            }
            if t.next_state != t.state.advance(t.action, t.reward) {
                return Err(format!("transition {i} breaks the state recurrence"));
            }
            total += g * t.reward;
            g *= gamma;
        }
        if (total - self.total_return).abs() > 1e-9 * (1.0 + total.abs()) {
            return Err(format!(
                "total_return {} differs from the reward sum {total}",
                self.total_return
            ));
        }
        Ok(())
    }
}

/// Runs `actions` from a fresh reset and records the episode.
pub fn run_episode(
    env: &mut dyn Environment,
    actions: &[ActionPair],
) -> Result<Vec<Transition>, EnvError> {
    let mut state = env.reset()?;
    let mut transitions = Vec::with_capacity(actions.len());
    for &action in actions {
        let out = env.step(action)?;
        transitions.push(Transition {
            state,
            action,
            reward: out.reward,
            next_state: out.state,
        });
        state = out.state;
        if out.done {
            break;
        }
    }
    Ok(transitions)
}

/// Appends one JSON document per line.
#[derive(Debug)]
pub struct RecordWriter {
    file: File,
}

impl RecordWriter {
    pub fn append(path: impl AsRef<Path>) -> Result<Self, EnvError> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(RecordWriter { file })
    }

    pub fn write(&mut self, record: &EpisodeRecord) -> Result<(), EnvError> {
        let line = serde_json::to_string(record)?;
        writeln!(self.file, "{line}")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<(), EnvError> {
        self.file.flush()?;
        Ok(())
    }
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<EpisodeRecord>, EnvError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
