//! Observation types and the fixed 14-dimensional feature map used as GP input.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of entries produced by [`phi`].
pub const FEATURE_DIM: usize = 14;

const GRID_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeatureError {
    #[error("timestep must be >= 1, got {0}")]
    InvalidTimestep(u32),
    #[error("action component {name} = {value} is outside [0, 1]")]
    ComponentOutOfRange { name: &'static str, value: f64 },
    #[error("action ({itn}, {irs}) is not on the {step} grid")]
    OffGrid { itn: f64, irs: f64, step: f64 },
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
}

/// Population coverage of insecticide-treated nets and indoor residual spraying.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionPair {
    pub itn: f64,
    pub irs: f64,
}

impl ActionPair {
    /// The previous-action placeholder of the start state.
    pub const NONE: ActionPair = ActionPair { itn: 0.0, irs: 0.0 };

    /// Builds an action, rejecting components outside `[0, 1]`.
    pub fn new(itn: f64, irs: f64) -> Result<Self, FeatureError> {
        let action = ActionPair { itn, irs };
        action.check_range()?;
        Ok(action)
    }

    pub fn check_range(&self) -> Result<(), FeatureError> {
        for (name, value) in [("itn", self.itn), ("irs", self.irs)] {
            if !(0.0..=1.0).contains(&value) || value.is_nan() {
                return Err(FeatureError::ComponentOutOfRange { name, value });
            }
        }
        Ok(())
    }

    /// True when both components are positive multiples of `step` no larger than one.
    pub fn is_on_grid(&self, step: f64) -> bool {
        [self.itn, self.irs].iter().all(|&v| {
            let k = (v / step).round();
            k >= 1.0 && v <= 1.0 + GRID_TOL && (v - k * step).abs() < GRID_TOL
        })
    }

    pub fn as_array(&self) -> [f64; 2] {
        [self.itn, self.irs]
    }
}

/// MDP observation `(r_{t-1}, a_{t-1}, t)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub prev_reward: f64,
    pub prev_action: ActionPair,
    pub timestep: u32,
}

impl State {
    pub fn start() -> Self {
        State {
            prev_reward: 0.0,
            prev_action: ActionPair::NONE,
            timestep: 1,
        }
    }

    /// The successor state after taking `action` and receiving `reward`.
    pub fn advance(&self, action: ActionPair, reward: f64) -> Self {
        State {
            prev_reward: reward,
            prev_action: action,
            timestep: self.timestep + 1,
        }
    }
}

impl Default for State {
    fn default() -> Self {
        State::start()
    }
}

/// Output of [`phi`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector(pub [f64; FEATURE_DIM]);

impl FeatureVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl AsRef<[f64]> for FeatureVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Feature map `phi(s, a)`.
///
/// Entries, in order: `t, t mod 2, t mod 3, r_{t-1}`, the previous action,
/// the current action, then the cross terms `a_itn*a_irs`, `p_itn*p_irs`,
/// `a_itn*p_itn`, `a_irs*p_irs`, `a_itn*(1-p_itn)`, `a_irs*(1-p_irs)` where
/// `p` is the previous action.
pub fn phi(state: &State, action: ActionPair) -> Result<FeatureVector, FeatureError> {
    if state.timestep < 1 {
        return Err(FeatureError::InvalidTimestep(state.timestep));
    }
    action.check_range()?;
    state.prev_action.check_range()?;
    Ok(phi_unchecked(state, action))
}

pub(crate) fn phi_unchecked(state: &State, action: ActionPair) -> FeatureVector {
    let t = state.timestep;
    let p = state.prev_action;
    let a = action;
    FeatureVector([
        t as f64,
        (t % 2) as f64,
        (t % 3) as f64,
        state.prev_reward,
        p.itn,
        p.irs,
        a.itn,
        a.irs,
        a.itn * a.irs,
        p.itn * p.irs,
        a.itn * p.itn,
        a.irs * p.irs,
        a.itn * (1.0 - p.itn),
        a.irs * (1.0 - p.irs),
    ])
}

/// Discrete action set in ITN-major order (index = itn_level * levels + irs_level).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionGrid {
    levels: Vec<f64>,
    actions: Vec<ActionPair>,
}

impl ActionGrid {
    /// Every multiple of `step` in `(0, 1]` for both components.
    pub fn uniform(step: f64) -> Result<Self, FeatureError> {
        let count = (1.0 / step).round();
        if !(step > 0.0) || count < 1.0 || (count * step - 1.0).abs() > GRID_TOL {
            return Err(FeatureError::InvalidGrid(format!(
                "step {step} does not divide 1.0 evenly"
            )));
        }
        let levels = (1..=count as usize)
            .map(|k| (k as f64 * step * 1e9).round() / 1e9)
            .collect();
        Self::from_levels(levels)
    }

    /// The default 10x10 grid with step 0.1.
    pub fn standard() -> Self {
        Self::uniform(0.1).expect("0.1 divides 1.0")
    }

    /// Cartesian product of `levels` with itself.
    pub fn from_levels(levels: Vec<f64>) -> Result<Self, FeatureError> {
        if levels.is_empty() {
            return Err(FeatureError::InvalidGrid("no levels".into()));
        }
        if levels.iter().any(|v| !(*v > 0.0 && *v <= 1.0)) {
            return Err(FeatureError::InvalidGrid(format!(
                "levels must lie in (0, 1]: {levels:?}"
            )));
        }
        if levels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(FeatureError::InvalidGrid(
                "levels must be strictly increasing".into(),
            ));
        }
        let actions = levels
            .iter()
            .flat_map(|&itn| levels.iter().map(move |&irs| ActionPair { itn, irs }))
            .collect();
        Ok(ActionGrid { levels, actions })
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn actions(&self) -> &[ActionPair] {
        &self.actions
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<ActionPair> {
        self.actions.get(index).copied()
    }

    pub fn index_of(&self, action: ActionPair) -> Option<usize> {
        let find = |v: f64| self.levels.iter().position(|l| (l - v).abs() < GRID_TOL);
        Some(find(action.itn)? * self.levels.len() + find(action.irs)?)
    }

    /// Nearest grid action to an arbitrary point, clamping to the level range.
    pub fn snap(&self, itn: f64, irs: f64) -> ActionPair {
        let nearest = |v: f64| {
            self.levels
                .iter()
                .copied()
                .min_by(|a, b| (a - v).abs().total_cmp(&(b - v).abs()))
                .expect("grid has levels")
        };
        ActionPair {
            itn: nearest(itn),
            irs: nearest(irs),
        }
    }
}

impl Default for ActionGrid {
    fn default() -> Self {
        Self::standard()
    }
}
