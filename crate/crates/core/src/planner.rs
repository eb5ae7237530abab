//! Monte Carlo tree search over a learned world model.
//!
//! The tree is descended with the model's mean predictions only; the planner
//! never touches an environment. Each simulation runs selection, expansion,
//! rollout evaluation of the new leaf, and backup along the traversed edges.
//! The edge reward into a leaf is added during backup, so a leaf's rollout
//! value covers only the steps after it.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::SurrogateParams;
use crate::features::{phi_unchecked, ActionGrid, ActionPair, State};
use crate::gp::{FittedGp, Prediction};

#[derive(Debug, Error)]
pub enum PlannerError {
    #[error("root state at timestep {timestep} is past the horizon {horizon}")]
    RootTerminal { timestep: u32, horizon: u32 },
    #[error("node {0} is terminal and cannot be expanded")]
    ExpandTerminal(usize),
    #[error("node {0} is already expanded")]
    AlreadyExpanded(usize),
    #[error("node {0} has not been expanded")]
    Unexpanded(usize),
    #[error("backup needs a non-empty path")]
    EmptyPath,
    #[error("invalid planner configuration: {0}")]
    InvalidConfig(String),
    #[error("trace output: {0}")]
    Trace(#[from] std::io::Error),
}

/// One-step reward model used by the planner.
///
/// `history` holds every action taken since the start of the episode, before
/// `state`. Learned models typically ignore it; exact simulators need it.
pub trait WorldModel {
    fn predict(&self, history: &[ActionPair], state: &State, action: ActionPair) -> Prediction;

    fn predict_mean(&self, history: &[ActionPair], state: &State, action: ActionPair) -> f64 {
        self.predict(history, state, action).mean
    }
}

impl<M: WorldModel + ?Sized> WorldModel for &M {
    fn predict(&self, history: &[ActionPair], state: &State, action: ActionPair) -> Prediction {
        (**self).predict(history, state, action)
    }

    fn predict_mean(&self, history: &[ActionPair], state: &State, action: ActionPair) -> f64 {
        (**self).predict_mean(history, state, action)
    }
}

impl WorldModel for FittedGp {
    fn predict(&self, _history: &[ActionPair], state: &State, action: ActionPair) -> Prediction {
        self.predict_unchecked(phi_unchecked(state, action).as_slice())
    }

    fn predict_mean(&self, _history: &[ActionPair], state: &State, action: ActionPair) -> f64 {
        self.predict_mean_unchecked(phi_unchecked(state, action).as_slice())
    }
}

/// Exact, zero-variance model of the surrogate simulator.
#[derive(Debug, Clone, Default)]
pub struct SurrogateModel(pub SurrogateParams);

impl WorldModel for SurrogateModel {
    fn predict(&self, history: &[ActionPair], _state: &State, action: ActionPair) -> Prediction {
        Prediction {
            mean: self.0.reward_after(history, action),
            variance: 0.0,
        }
    }
}

/// Adapts a closure into a [`WorldModel`].
pub struct FnModel<F>(pub F);

impl<F> WorldModel for FnModel<F>
where
    F: Fn(&[ActionPair], &State, ActionPair) -> Prediction,
{
    fn predict(&self, history: &[ActionPair], state: &State, action: ActionPair) -> Prediction {
        (self.0)(history, state, action)
    }
}

/// Reward the tree maximizes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum RewardMode {
    /// `mean + (beta1 + beta2) * variance`.
    VarianceBonus { beta1: f64, beta2: f64 },
    /// Predicted mean only.
    Mean,
    /// Predicted mean where the model is confident; any edge whose variance
    /// exceeds `variance_threshold` is valued `r_max` for every remaining
    /// step and not searched further.
    Optimistic { r_max: f64, variance_threshold: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutPolicy {
    Random,
    Greedy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerConfig {
    pub c_puct: f64,
    pub max_iterations: usize,
    pub expansion_top_k: usize,
    pub rollout_policy: RolloutPolicy,
    pub rollouts_per_leaf: usize,
    pub reward_mode: RewardMode,
    pub rng_seed: u64,
    pub horizon: u32,
    pub gamma: f64,
    pub action_grid: ActionGrid,
    /// Apply the selection rule to Q values min-max scaled per depth.
    pub normalize_q: bool,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            c_puct: 5.0,
            max_iterations: 100_000,
            expansion_top_k: 50,
            rollout_policy: RolloutPolicy::Random,
            rollouts_per_leaf: 1,
            reward_mode: RewardMode::VarianceBonus {
                beta1: 3.5,
                beta2: 0.0,
            },
            rng_seed: 0,
            horizon: 5,
            gamma: 1.0,
            action_grid: ActionGrid::standard(),
            normalize_q: true,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<(), PlannerError> {
        let bad = |m: String| Err(PlannerError::InvalidConfig(m));
        if self.max_iterations < 1 {
            return bad("max_iterations must be >= 1".into());
        }
        if self.expansion_top_k < 1 || self.expansion_top_k > self.action_grid.len() {
            return bad(format!(
                "expansion_top_k {} must lie in [1, {}]",
                self.expansion_top_k,
                self.action_grid.len()
            ));
        }
        if self.rollouts_per_leaf < 1 {
            return bad("rollouts_per_leaf must be >= 1".into());
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma {} outside (0, 1]", self.gamma));
        }
        if let RewardMode::VarianceBonus { beta1, beta2 } = self.reward_mode {
            if beta1 < 0.0 || beta2 < 0.0 {
                return bad("exploration weights must be non-negative".into());
            }
        }
        Ok(())
    }

    /// Copy with `expansion_top_k` clamped to the grid size.
    pub fn clamped(mut self) -> Self {
        self.expansion_top_k = self.expansion_top_k.clamp(1, self.action_grid.len());
        self
    }
}

/// Configured one-step value of taking an action.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepValue {
    pub reward: f64,
    /// The edge ends the search (optimistic substitution).
    pub cut: bool,
}

fn step_value<M: WorldModel + ?Sized>(
    model: &M,
    config: &PlannerConfig,
    history: &[ActionPair],
    state: &State,
    action: ActionPair,
) -> (StepValue, f64) {
    match config.reward_mode {
        RewardMode::Mean => {
            let mean = model.predict_mean(history, state, action);
            (
                StepValue {
                    reward: mean,
                    cut: false,
                },
                mean,
            )
        }
        RewardMode::VarianceBonus { beta1, beta2 } => {
            let p = model.predict(history, state, action);
            (
                StepValue {
                    reward: p.mean + (beta1 + beta2) * p.variance,
                    cut: false,
                },
                p.mean,
            )
        }
        RewardMode::Optimistic {
            r_max,
            variance_threshold,
        } => {
            let p = model.predict(history, state, action);
            if p.variance > variance_threshold {
                let remaining = config.horizon + 1 - state.timestep;
                let mut value = 0.0;
                let mut g = 1.0;
                for _ in 0..remaining {
                    value += g * r_max;
                    g *= config.gamma;
                }
                (
                    StepValue {
                        reward: value,
                        cut: true,
                    },
                    p.mean,
                )
            } else {
                (
                    StepValue {
                        reward: p.mean,
                        cut: false,
                    },
                    p.mean,
                )
            }
        }
    }
}

/// Per-edge statistics: mean backed-up value and visit count.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EdgeStats {
    pub q_value: f64,
    pub visit_count: u32,
}

impl EdgeStats {
    /// Running-mean update with one more backed-up value.
    pub fn update(&mut self, value: f64) {
        let n = self.visit_count as f64;
        self.q_value = (n * self.q_value + value) / (n + 1.0);
        self.visit_count += 1;
    }
}

/// Selection rule: `argmax_a Q(a) + (c_puct / |A|) * sqrt(sum_b N(b)) / (1 + N(a))`.
///
/// Ties go to the lowest index. Returns `None` for an empty slice.
pub fn select_edge(edges: &[EdgeStats], c_puct: f64) -> Option<usize> {
    select_scored(edges, c_puct, |e| e.q_value)
}

fn select_scored(
    edges: &[EdgeStats],
    c_puct: f64,
    value: impl Fn(&EdgeStats) -> f64,
) -> Option<usize> {
    let total: u32 = edges.iter().map(|e| e.visit_count).sum();
    let coef = c_puct / edges.len() as f64 * (total as f64).sqrt();
    let mut best: Option<(usize, f64)> = None;
    for (i, e) in edges.iter().enumerate() {
        let score = value(e) + coef / (1.0 + e.visit_count as f64);
        if best.is_none_or(|(_, b)| score > b) {
            best = Some((i, score));
        }
    }
    best.map(|(i, _)| i)
}

#[derive(Debug, Clone)]
pub struct Edge {
    pub action: ActionPair,
    pub grid_index: usize,
    /// Configured one-step reward of this edge.
    pub reward: f64,
    pub stats: EdgeStats,
    pub child: usize,
}

#[derive(Debug, Clone)]
pub struct Node {
    /// Mean-predicted state.
    pub state: State,
    /// Actions from the episode start up to this node.
    pub history: Vec<ActionPair>,
    /// Candidate edges in grid order.
    pub edges: Vec<Edge>,
    pub expanded: bool,
    pub terminal: bool,
}

impl Node {
    pub fn edge_stats(&self) -> Vec<EdgeStats> {
        self.edges.iter().map(|e| e.stats).collect()
    }
}

/// Asymmetric search tree stored as an arena; node 0 is the root.
#[derive(Debug, Clone)]
pub struct SearchTree {
    nodes: Vec<Node>,
    // (min, max) of backed-up Q values per depth below the root
    depth_bounds: Vec<Option<(f64, f64)>>,
    root_timestep: u32,
    horizon: u32,
    simulations: usize,
}

impl SearchTree {
    pub fn new(root: State, history: Vec<ActionPair>, horizon: u32) -> Result<Self, PlannerError> {
        if root.timestep > horizon {
            return Err(PlannerError::RootTerminal {
                timestep: root.timestep,
                horizon,
            });
        }
        Ok(SearchTree {
            nodes: vec![Node {
                state: root,
                history,
                edges: Vec::new(),
                expanded: false,
                terminal: false,
            }],
            depth_bounds: vec![None; (horizon + 1 - root.timestep) as usize],
            root_timestep: root.timestep,
            horizon,
            simulations: 0,
        })
    }

    pub fn root(&self) -> &Node {
        &self.nodes[0]
    }

    pub fn node(&self, id: usize) -> &Node {
        &self.nodes[id]
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn simulations(&self) -> usize {
        self.simulations
    }

    /// Scores every grid action with the configured reward, keeps the
    /// `expansion_top_k` best (lower grid index on ties) and creates their
    /// mean-predicted children.
    pub fn expand<M: WorldModel + ?Sized>(
        &mut self,
        id: usize,
        model: &M,
        config: &PlannerConfig,
    ) -> Result<(), PlannerError> {
        let node = &self.nodes[id];
        if node.terminal || node.state.timestep > self.horizon {
            return Err(PlannerError::ExpandTerminal(id));
        }
        if node.expanded {
            return Err(PlannerError::AlreadyExpanded(id));
        }
        let state = node.state;
        let history = node.history.clone();
        let mut scored: Vec<(usize, StepValue, f64)> = config
            .action_grid
            .actions()
            .iter()
            .enumerate()
            .map(|(i, &a)| {
                let (v, mean) = step_value(model, config, &history, &state, a);
                (i, v, mean)
            })
            .collect();
        scored.sort_by(|a, b| b.1.reward.total_cmp(&a.1.reward).then(a.0.cmp(&b.0)));
        scored.truncate(config.expansion_top_k.min(scored.len()));
        scored.sort_by_key(|s| s.0);

        let mut edges = Vec::with_capacity(scored.len());
        for (grid_index, value, mean) in scored {
            let action = config.action_grid.get(grid_index).expect("index from grid");
            let child_state = state.advance(action, mean);
            let mut child_history = history.clone();
            child_history.push(action);
            let child = self.nodes.len();
            self.nodes.push(Node {
                state: child_state,
                history: child_history,
                edges: Vec::new(),
                expanded: false,
                terminal: value.cut || child_state.timestep > self.horizon,
            });
            edges.push(Edge {
                action,
                grid_index,
                reward: value.reward,
                stats: EdgeStats::default(),
                child,
            });
        }
        let node = &mut self.nodes[id];
        node.edges = edges;
        node.expanded = true;
        Ok(())
    }

    /// Applies the raw selection rule at an expanded node.
    pub fn select_action(&self, id: usize, c_puct: f64) -> Result<ActionPair, PlannerError> {
        let node = &self.nodes[id];
        if !node.expanded || node.edges.is_empty() {
            return Err(PlannerError::Unexpanded(id));
        }
        let i = select_edge(&node.edge_stats(), c_puct).expect("non-empty");
        Ok(node.edges[i].action)
    }

    fn select_index(&self, id: usize, config: &PlannerConfig) -> usize {
        let node = &self.nodes[id];
        let stats = node.edge_stats();
        if !config.normalize_q {
            return select_edge(&stats, config.c_puct).expect("expanded node has edges");
        }
        let depth = (node.state.timestep - self.root_timestep) as usize;
        let bounds = self.depth_bounds[depth];
        select_scored(&stats, config.c_puct, |e| {
            if e.visit_count == 0 {
                return 0.0;
            }
            match bounds {
                Some((lo, hi)) if hi > lo => (e.q_value - lo) / (hi - lo),
                _ => 0.5,
            }
        })
        .expect("expanded node has edges")
    }

    /// Propagates `leaf_value` from the leaf back to the root along `path`
    /// (root-first list of `(node, edge)` pairs).
    pub fn backup(
        &mut self,
        path: &[(usize, usize)],
        leaf_value: f64,
        gamma: f64,
    ) -> Result<(), PlannerError> {
        if path.is_empty() {
            return Err(PlannerError::EmptyPath);
        }
        let mut value = leaf_value;
        for &(id, e) in path.iter().rev() {
            let depth = (self.nodes[id].state.timestep - self.root_timestep) as usize;
            let edge = &mut self.nodes[id].edges[e];
            value = gamma * value + edge.reward;
            edge.stats.update(value);
            let q = edge.stats.q_value;
            let slot = &mut self.depth_bounds[depth];
            *slot = Some(match *slot {
                Some((lo, hi)) => (lo.min(q), hi.max(q)),
                None => (q, q),
            });
        }
        Ok(())
    }

    /// One select/expand/evaluate/backup cycle. Returns the traversed path
    /// and the leaf value.
    pub fn simulate<M: WorldModel + ?Sized>(
        &mut self,
        model: &M,
        config: &PlannerConfig,
        sim_index: u64,
    ) -> Result<(Vec<(usize, usize)>, f64), PlannerError> {
        if !self.nodes[0].expanded {
            self.expand(0, model, config)?;
        }
        let mut id = 0;
        let mut path = Vec::with_capacity(self.horizon as usize);
        loop {
            let node = &self.nodes[id];
            if node.terminal || !node.expanded {
                break;
            }
            let e = self.select_index(id, config);
            path.push((id, e));
            id = self.nodes[id].edges[e].child;
        }
        let leaf_value = if self.nodes[id].terminal {
            0.0
        } else {
            self.expand(id, model, config)?;
            let leaf = &self.nodes[id];
            rollout_value(&leaf.state, &leaf.history, model, config, sim_index)
        };
        self.backup(&path, leaf_value, config.gamma)?;
        self.simulations += 1;
        Ok((path, leaf_value))
    }

    /// Max-child decision: the visited root edge with the highest Q, lowest
    /// grid index on ties.
    pub fn best_root_action(&self) -> Option<ActionPair> {
        let edges = &self.nodes[0].edges;
        let visited = edges.iter().filter(|e| e.stats.visit_count > 0);
        let pool: Vec<&Edge> = if visited.clone().next().is_some() {
            visited.collect()
        } else {
            edges.iter().collect()
        };
        let mut best: Option<&Edge> = None;
        for e in pool {
            if best.is_none_or(|b| e.stats.q_value > b.stats.q_value) {
                best = Some(e);
            }
        }
        best.map(|e| e.action)
    }
}

/// Average configured return of `rollouts_per_leaf` playouts from `state` to
/// the horizon, moving through mean-predicted states.
pub fn rollout_value<M: WorldModel + ?Sized>(
    state: &State,
    history: &[ActionPair],
    model: &M,
    config: &PlannerConfig,
    sim_index: u64,
) -> f64 {
    if state.timestep > config.horizon {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    rng.set_stream(sim_index);
    let grid = config.action_grid.actions();
    let mut total = 0.0;
    let mut hist = Vec::with_capacity(config.horizon as usize);
    for _ in 0..config.rollouts_per_leaf {
        hist.clear();
        hist.extend_from_slice(history);
        let mut s = *state;
        let mut g = 1.0;
        let mut value = 0.0;
        while s.timestep <= config.horizon {
            let (action, v, mean) = match config.rollout_policy {
                RolloutPolicy::Random => {
                    let a = grid[rng.random_range(0..grid.len())];
                    let (v, mean) = step_value(model, config, &hist, &s, a);
                    (a, v, mean)
                }
                RolloutPolicy::Greedy => {
                    let mut best: Option<(ActionPair, StepValue, f64)> = None;
                    for &a in grid {
                        let (v, mean) = step_value(model, config, &hist, &s, a);
                        if best.is_none_or(|b| v.reward > b.1.reward) {
                            best = Some((a, v, mean));
                        }
                    }
                    best.expect("grid is non-empty")
                }
            };
            value += g * v.reward;
            if v.cut {
                break;
            }
            g *= config.gamma;
            hist.push(action);
            s = s.advance(action, mean);
        }
        total += value;
    }
    total / config.rollouts_per_leaf as f64
}

/// Searches from `root` and returns the max-child action.
pub fn plan<M: WorldModel + ?Sized>(
    root: &State,
    history: &[ActionPair],
    model: &M,
    config: &PlannerConfig,
) -> Result<ActionPair, PlannerError> {
    Ok(search(root, history, model, config, None)?
        .best_root_action()
        .expect("root has candidate edges"))
}

/// Like [`plan`], writing one JSON line per simulation with the traversed
/// actions and the leaf value.
pub fn plan_traced<M: WorldModel + ?Sized>(
    root: &State,
    history: &[ActionPair],
    model: &M,
    config: &PlannerConfig,
    trace: &mut dyn Write,
) -> Result<ActionPair, PlannerError> {
    Ok(search(root, history, model, config, Some(trace))?
        .best_root_action()
        .expect("root has candidate edges"))
}

/// Runs the full search and returns the tree.
pub fn search<M: WorldModel + ?Sized>(
    root: &State,
    history: &[ActionPair],
    model: &M,
    config: &PlannerConfig,
    mut trace: Option<&mut dyn Write>,
) -> Result<SearchTree, PlannerError> {
    config.validate()?;
    let mut tree = SearchTree::new(*root, history.to_vec(), config.horizon)?;
    for sim in 0..config.max_iterations {
        let (path, leaf_value) = tree.simulate(model, config, sim as u64)?;
        if let Some(out) = trace.as_deref_mut() {
            let actions: Vec<[f64; 2]> = path
                .iter()
                .map(|&(n, e)| tree.node(n).edges[e].action.as_array())
                .collect();
            let line = serde_json::json!({
                "simulation": sim,
                "path": actions,
                "leaf_value": leaf_value,
            });
            writeln!(out, "{line}")?;
        }
    }
    Ok(tree)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn stats(q: &[f64], n: &[u32]) -> Vec<EdgeStats> {
        q.iter()
            .zip(n)
            .map(|(&q_value, &visit_count)| EdgeStats {
                q_value,
                visit_count,
            })
            .collect()
    }

    #[test]
    fn selection_examples() {
        assert_eq!(select_edge(&stats(&[1.0, 0.0], &[3, 1]), 5.0), Some(1));
        assert_eq!(select_edge(&stats(&[0.0; 4], &[0; 4]), 5.0), Some(0));
        assert_eq!(select_edge(&stats(&[0.0, 0.0], &[0, 10]), 5.0), Some(0));
        assert_eq!(select_edge(&[], 5.0), None);
    }

    #[test]
    fn backup_examples() {
        let mut e = EdgeStats {
            q_value: 2.0,
            visit_count: 1,
        };
        e.update(4.0);
        assert_eq!(
            e,
            EdgeStats {
                q_value: 3.0,
                visit_count: 2
            }
        );
        let mut e = EdgeStats::default();
        e.update(5.0);
        assert_eq!(
            e,
            EdgeStats {
                q_value: 5.0,
                visit_count: 1
            }
        );
    }

    fn constant_model(r: f64) -> FnModel<impl Fn(&[ActionPair], &State, ActionPair) -> Prediction> {
        FnModel(move |_: &[ActionPair], _: &State, _: ActionPair| Prediction {
            mean: r,
            variance: 0.0,
        })
    }

    fn small_config() -> PlannerConfig {
        PlannerConfig {
            action_grid: ActionGrid::from_levels(vec![0.1, 0.5, 1.0]).unwrap(),
            expansion_top_k: 9,
            horizon: 3,
            max_iterations: 200,
            reward_mode: RewardMode::Mean,
            ..PlannerConfig::default()
        }
    }

    #[test]
    fn backup_accumulates_edge_rewards() {
        let model = constant_model(2.0);
        let config = small_config();
        let mut tree = SearchTree::new(State::start(), vec![], 3).unwrap();
        tree.expand(0, &model, &config).unwrap();
        let child = tree.node(0).edges[0].child;
        tree.expand(child, &model, &config).unwrap();
        tree.backup(&[(0, 0), (child, 0)], 3.0, 1.0).unwrap();
        // v at child edge = 3 + 2 = 5, at root edge = 5 + 2 = 7
        assert_eq!(tree.node(child).edges[0].stats.q_value, 5.0);
        assert_eq!(tree.node(0).edges[0].stats.q_value, 7.0);
        assert!(matches!(
            tree.backup(&[], 1.0, 1.0),
            Err(PlannerError::EmptyPath)
        ));
    }

    #[test]
    fn expansion_truncates_with_grid_tie_break() {
        // rewards equal for every action -> the lowest grid indices survive
        let model = constant_model(1.0);
        let mut config = small_config();
        config.expansion_top_k = 4;
        let mut tree = SearchTree::new(State::start(), vec![], 3).unwrap();
        tree.expand(0, &model, &config).unwrap();
        let kept: Vec<usize> = tree.root().edges.iter().map(|e| e.grid_index).collect();
        assert_eq!(kept, vec![0, 1, 2, 3]);
        assert!(matches!(
            tree.expand(0, &model, &config),
            Err(PlannerError::AlreadyExpanded(0))
        ));

        // top_k = 1 keeps the argmax of the one-step scores
        let model = FnModel(|_: &[ActionPair], _: &State, a: ActionPair| Prediction {
            mean: -(a.itn - 0.5).abs() - (a.irs - 1.0).abs(),
            variance: 0.0,
        });
        config.expansion_top_k = 1;
        let mut tree = SearchTree::new(State::start(), vec![], 3).unwrap();
        tree.expand(0, &model, &config).unwrap();
        assert_eq!(tree.root().edges.len(), 1);
        assert_eq!(tree.root().edges[0].action, ActionPair { itn: 0.5, irs: 1.0 });

        // full grid, no truncation
        let mut config = PlannerConfig {
            expansion_top_k: 100,
            reward_mode: RewardMode::Mean,
            ..PlannerConfig::default()
        };
        config.max_iterations = 1;
        let mut tree = SearchTree::new(State::start(), vec![], 5).unwrap();
        tree.expand(0, &constant_model(0.0), &config).unwrap();
        assert_eq!(tree.root().edges.len(), 100);
    }

    #[test]
    fn expansion_and_selection_preconditions() {
        let config = small_config();
        let model = constant_model(1.0);
        let mut tree = SearchTree::new(State::start(), vec![], 1).unwrap();
        assert!(matches!(
            tree.select_action(0, 5.0),
            Err(PlannerError::Unexpanded(0))
        ));
        tree.expand(0, &model, &config).unwrap();
        let child = tree.root().edges[0].child;
        assert!(tree.node(child).terminal);
        assert!(matches!(
            tree.expand(child, &model, &config),
            Err(PlannerError::ExpandTerminal(_))
        ));
        let past = State {
            timestep: 4,
            ..State::start()
        };
        assert!(matches!(
            plan(&past, &[], &model, &config),
            Err(PlannerError::RootTerminal { .. })
        ));
    }

    #[test]
    fn rollout_examples() {
        let model = constant_model(7.0);
        let mut config = small_config();
        let terminal = State {
            timestep: 4,
            ..State::start()
        };
        assert_eq!(rollout_value(&terminal, &[], &model, &config, 0), 0.0);
        config.action_grid = ActionGrid::from_levels(vec![0.5]).unwrap();
        config.expansion_top_k = 1;
        let last = State {
            timestep: 3,
            ..State::start()
        };
        assert_eq!(rollout_value(&last, &[], &model, &config, 0), 7.0);
    }

    #[test]
    fn rollout_is_reproducible_per_simulation_index() {
        let model = SurrogateModel::default();
        let config = PlannerConfig {
            reward_mode: RewardMode::Mean,
            ..PlannerConfig::default()
        };
        let s = State::start();
        let a = rollout_value(&s, &[], &model, &config, 17);
        let b = rollout_value(&s, &[], &model, &config, 17);
        let c = rollout_value(&s, &[], &model, &config, 18);
        assert_eq!(a.to_bits(), b.to_bits());
        assert_ne!(a, c);
    }

    #[test]
    fn optimistic_edges_cut_the_search() {
        let model = FnModel(|_: &[ActionPair], _: &State, _: ActionPair| Prediction {
            mean: 1.0,
            variance: 10.0,
        });
        let mut config = small_config();
        config.reward_mode = RewardMode::Optimistic {
            r_max: 120.0,
            variance_threshold: 0.5,
        };
        config.max_iterations = 50;
        let tree = search(&State::start(), &[], &model, &config, None).unwrap();
        for e in &tree.root().edges {
            assert!(tree.node(e.child).terminal);
            assert_eq!(e.reward, 360.0);
        }
        assert_eq!(
            tree.best_root_action(),
            Some(ActionPair { itn: 0.1, irs: 0.1 })
        );
    }

    #[test]
    fn single_candidate_root_is_forced() {
        let mut config = small_config();
        config.expansion_top_k = 1;
        config.max_iterations = 3;
        let model = SurrogateModel::default();
        let a = plan(&State::start(), &[], &model, &config).unwrap();
        let mut tree = SearchTree::new(State::start(), vec![], 3).unwrap();
        tree.expand(0, &model, &config).unwrap();
        assert_eq!(a, tree.root().edges[0].action);
    }

    #[test]
    fn search_invariants() {
        let model = SurrogateModel::default();
        for normalize_q in [true, false] {
            let config = PlannerConfig {
                normalize_q,
                max_iterations: 500,
                ..small_config()
            };
            let tree = search(&State::start(), &[], &model, &config, None).unwrap();
            let root_visits: u32 = tree.root().edges.iter().map(|e| e.stats.visit_count).sum();
            assert_eq!(root_visits as usize, tree.simulations());
            assert_eq!(tree.simulations(), 500);
            // per-step reward bounds of the surrogate
            let (lo, hi) = (-70.0, 120.0);
            for node in tree.nodes() {
                let remaining = (config.horizon + 1 - node.state.timestep) as f64;
                for e in &node.edges {
                    if e.stats.visit_count == 0 {
                        assert_eq!(e.stats.q_value, 0.0);
                    }
                    assert!(e.stats.q_value >= remaining * lo - 1e-9);
                    assert!(e.stats.q_value <= remaining * hi + 1e-9);
                    // every visit to a non-root node except the expanding one
                    // continues into exactly one child edge
                    let child = tree.node(e.child);
                    if child.expanded && !child.terminal {
                        let below: u32 = child.edges.iter().map(|c| c.stats.visit_count).sum();
                        assert_eq!(below + 1, e.stats.visit_count);
                    }
                }
            }
        }
    }

    #[test]
    fn better_subtree_wins_across_seeds() {
        // the first action pays nothing now but unlocks 5 per later step
        let target = ActionPair { itn: 1.0, irs: 0.5 };
        let model = FnModel(move |h: &[ActionPair], _: &State, a: ActionPair| Prediction {
            mean: match h.first() {
                None if a == target => 0.0,
                None => 1.0,
                Some(first) if *first == target => 5.0,
                Some(_) => 0.0,
            },
            variance: 0.0,
        });
        for seed in 0..10 {
            let config = PlannerConfig {
                action_grid: ActionGrid::from_levels(vec![0.5, 1.0]).unwrap(),
                expansion_top_k: 4,
                horizon: 3,
                max_iterations: 5_000,
                reward_mode: RewardMode::Mean,
                rng_seed: seed,
                ..PlannerConfig::default()
            };
            assert_eq!(plan(&State::start(), &[], &model, &config).unwrap(), target);
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let model = SurrogateModel::default();
        let config = PlannerConfig {
            max_iterations: 300,
            reward_mode: RewardMode::Mean,
            ..PlannerConfig::default()
        };
        let a = plan(&State::start(), &[], &model, &config).unwrap();
        let b = plan(&State::start(), &[], &model, &config).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn trace_has_one_line_per_simulation() {
        let mut out = Vec::new();
        let config = PlannerConfig {
            max_iterations: 25,
            ..small_config()
        };
        plan_traced(
            &State::start(),
            &[],
            &SurrogateModel::default(),
            &config,
            &mut out,
        )
        .unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().count(), 25);
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first["simulation"], 0);
    }

    #[test]
    fn variance_bonus_mode_prefers_uncertain_actions() {
        let model = FnModel(|_: &[ActionPair], _: &State, a: ActionPair| Prediction {
            mean: 1.0,
            variance: if a.itn == 1.0 && a.irs == 1.0 { 1.0 } else { 0.0 },
        });
        let mut config = small_config();
        config.horizon = 1;
        config.reward_mode = RewardMode::VarianceBonus {
            beta1: 3.5,
            beta2: 0.0,
        };
        let a = plan(&State::start(), &[], &model, &config).unwrap();
        assert_eq!(a, ActionPair { itn: 1.0, irs: 1.0 });
        config.reward_mode = RewardMode::Mean;
        let a = plan(&State::start(), &[], &model, &config).unwrap();
        assert_eq!(a, ActionPair { itn: 0.1, irs: 0.1 });
        assert_relative_eq!(1.0 + 3.5 * 1.0, 4.5);
    }
}
