//! Tabular Q-learning over the augmented state `(observation, RM state,
//! TM state)`.
//!
//! The machines only supply memory: after every step both advance on the
//! label of the observation just left. Rewards come from the environment.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envs::DetPomdp;
use crate::machine::StateId;
use crate::{RewardMachine, TransitionMachine};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QLearningError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("episode {episode}, step {step}: {machine} has no transition from state {state} on {label}")]
    UndefinedMachineTransition {
        episode: usize,
        step: usize,
        machine: &'static str,
        state: String,
        label: String,
    },
    #[error("episode {episode}: Q-value became {value}")]
    NonFinite { episode: usize, value: f64 },
}

/// How the exploiting branch of ε-greedy picks among equally valued actions.
///
/// With a zero-initialised table every action ties until the first reward
/// arrives, so `LowestIndex` keeps repeating action 0 and explores only
/// through the ε branch. `Random` draws from the seeded training RNG and is
/// just as reproducible.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieBreak {
    LowestIndex,
    #[default]
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QLearningConfig {
    pub learning_rate: f64,
    pub discount: f64,
    pub epsilon: f64,
    pub epsilon_decay: f64,
    pub epsilon_floor: f64,
    pub episodes: usize,
    pub max_steps: usize,
    pub tie_break: TieBreak,
    pub seed: u64,
}

impl Default for QLearningConfig {
    fn default() -> Self {
        QLearningConfig {
            learning_rate: 0.1,
            discount: 0.95,
            epsilon: 0.3,
            epsilon_decay: 0.995,
            epsilon_floor: 0.01,
            episodes: 1500,
            max_steps: 1000,
            tie_break: TieBreak::Random,
            seed: 0,
        }
    }
}

impl QLearningConfig {
    pub fn validate(&self) -> Result<(), QLearningError> {
        let bad = |m: &str| Err(QLearningError::InvalidConfig(m.to_owned()));
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return bad("learning_rate must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.discount) {
            return bad("discount must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return bad("epsilon must lie in [0, 1]");
        }
        if !(self.epsilon_decay > 0.0 && self.epsilon_decay <= 1.0) {
            return bad("epsilon_decay must lie in (0, 1]");
        }
        if !(0.0..=self.epsilon).contains(&self.epsilon_floor) {
            return bad("epsilon_floor must lie in [0, epsilon]");
        }
        if self.max_steps == 0 {
            return bad("max_steps must be positive");
        }
        Ok(())
    }
}

/// `(observation index, RM state, TM state)`
pub type AugmentedState = (usize, StateId, StateId);

/// Q-values for the augmented states met so far; unseen states read as 0.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct QTable {
    index: HashMap<AugmentedState, usize>,
    keys: Vec<AugmentedState>,
    values: Vec<Vec<f64>>,
    actions: usize,
}

#[derive(Serialize)]
struct QRow<'a> {
    obs: String,
    rm_state: String,
    tm_state: String,
    values: &'a [f64],
}

impl QTable {
    pub fn new(actions: usize) -> Self {
        QTable {
            actions,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    fn row(&mut self, x: AugmentedState) -> usize {
        let n = self.keys.len();
        *self.index.entry(x).or_insert_with(|| {
            self.keys.push(x);
            self.values.push(vec![0.0; self.actions]);
            n
        })
    }

    pub fn get(&self, x: AugmentedState) -> Option<&[f64]> {
        self.index.get(&x).map(|&i| self.values[i].as_slice())
    }

    /// Highest-valued action, ties to the lowest index.
    pub fn greedy(&self, x: AugmentedState) -> usize {
        self.get(x).map_or(0, argmax)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().flatten().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn to_json(&self, env: &DetPomdp, tm: &TransitionMachine, rm: &RewardMachine) -> serde_json::Value {
        let mut order: Vec<usize> = (0..self.keys.len()).collect();
        order.sort_by_key(|&i| self.keys[i]);
        let rows: Vec<QRow> = order
            .into_iter()
            .map(|i| {
                let (o, u, q) = self.keys[i];
                QRow {
                    obs: env.observations()[o].to_string(),
                    rm_state: rm.core().state_name(u),
                    tm_state: tm.core().state_name(q),
                    values: &self.values[i],
                }
            })
            .collect();
        serde_json::json!({ "actions": env.actions(), "rows": rows })
    }
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (a, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = a;
        }
    }
    best
}

fn random_argmax(values: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let best = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ties = values.iter().filter(|&&v| v == best).count();
    let pick = if ties > 1 { rng.random_range(0..ties) } else { 0 };
    values.iter().enumerate().filter(|&(_, &v)| v == best).nth(pick).map_or(0, |(a, _)| a)
}

/// Per-episode returns plus the Markov check of the augmented state.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub table: QTable,
    /// Undiscounted return of every training episode.
    pub curve: Vec<f64>,
    /// Times an (augmented state, action) pair was followed by a different
    /// next augmented state than on its first occurrence.
    pub markov_violations: usize,
    pub final_epsilon: f64,
}

/// Tracks both machines along an episode.
struct Memory<'m> {
    tm: &'m TransitionMachine,
    rm: &'m RewardMachine,
    q: StateId,
    u: StateId,
}

impl<'m> Memory<'m> {
    fn new(tm: &'m TransitionMachine, rm: &'m RewardMachine) -> Self {
        Memory {
            tm,
            rm,
            q: tm.q0(),
            u: rm.u0(),
        }
    }

    fn advance(&mut self, env: &DetPomdp, s: usize, episode: usize, step: usize) -> Result<(), QLearningError> {
        let label = env.label(s);
        let undefined = |machine, state| QLearningError::UndefinedMachineTransition {
            episode,
            step,
            machine,
            state,
            label: label.to_string(),
        };
        self.q = self
            .tm
            .delta_q(self.q, label)
            .ok_or_else(|| undefined("transition machine", self.tm.core().state_name(self.q)))?;
        self.u = self
            .rm
            .delta_u(self.u, label)
            .ok_or_else(|| undefined("reward machine", self.rm.core().state_name(self.u)))?;
        Ok(())
    }
}

const TERMINAL: usize = usize::MAX;

/// ε-greedy Q-learning; ε shrinks by the decay factor after every episode.
pub fn train(
    env: &DetPomdp,
    tm: &TransitionMachine,
    rm: &RewardMachine,
    cfg: &QLearningConfig,
) -> Result<TrainOutcome, QLearningError> {
    cfg.validate()?;
    let na = env.num_actions();
    let mut table = QTable::new(na);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut seen_next: HashMap<(usize, usize), usize> = HashMap::new();
    let mut violations = 0;
    let mut curve = Vec::with_capacity(cfg.episodes);
    let mut epsilon = cfg.epsilon;
    for episode in 0..cfg.episodes {
        let mut s = env.initial();
        let mut mem = Memory::new(tm, rm);
        let mut x = table.row((env.obs_index(s), mem.u, mem.q));
        let mut total = 0.0;
        for step in 0..cfg.max_steps {
            let a = if rng.random_bool(epsilon) {
                rng.random_range(0..na)
            } else {
                match cfg.tie_break {
                    TieBreak::LowestIndex => argmax(&table.values[x]),
                    TieBreak::Random => random_argmax(&table.values[x], &mut rng),
                }
            };
            let st = env.step(s, a);
            let r = st.reward.to_f64();
            total += r;
            let (target, next) = if st.done {
                (r, TERMINAL)
            } else {
                mem.advance(env, s, episode, step)?;
                let y = table.row((env.obs_index(st.next), mem.u, mem.q));
                let best = table.values[y].iter().copied().fold(f64::NEG_INFINITY, f64::max);
                (r + cfg.discount * best, y)
            };
            match seen_next.get(&(x, a)) {
                Some(&prev) if prev != next => violations += 1,
                Some(_) => {}
                None => {
                    seen_next.insert((x, a), next);
                }
            }
            let qa = &mut table.values[x][a];
            *qa += cfg.learning_rate * (target - *qa);
            if !qa.is_finite() {
                return Err(QLearningError::NonFinite { episode, value: *qa });
            }
            if st.done {
                break;
            }
            s = st.next;
            x = next;
        }
        curve.push(total);
        epsilon = (epsilon * cfg.epsilon_decay).max(cfg.epsilon_floor);
    }
    Ok(TrainOutcome {
        table,
        curve,
        markov_violations: violations,
        final_epsilon: epsilon,
    })
}

/// Mean undiscounted return of the greedy policy (ε = 0) over `episodes`
/// runs. The environment is deterministic, so every run is identical; the
/// seed is accepted for interface symmetry with [`train`].
pub fn evaluate_greedy(
    env: &DetPomdp,
    tm: &TransitionMachine,
    rm: &RewardMachine,
    table: &QTable,
    episodes: usize,
    max_steps: usize,
    _seed: u64,
) -> Result<f64, QLearningError> {
    if episodes == 0 {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for episode in 0..episodes {
        let mut s = env.initial();
        let mut mem = Memory::new(tm, rm);
        for step in 0..max_steps {
            let a = table.greedy((env.obs_index(s), mem.u, mem.q));
            let st = env.step(s, a);
            sum += st.reward.to_f64();
            if st.done {
                break;
            }
            mem.advance(env, s, episode, step)?;
            s = st.next;
        }
    }
    Ok(sum / episodes as f64)
}

/// Trailing mean over at most `window` episodes.
pub fn moving_average(curve: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(curve.len());
    let mut acc = 0.0;
    for (i, &v) in curve.iter().enumerate() {
        acc += v;
        if i >= window {
            acc -= curve[i - window];
        }
        out.push(acc / (i + 1).min(window) as f64);
    }
    out
}

pub const CURVE_WINDOW: usize = 100;

/// `episode,total_reward,moving_avg` rows.
pub fn curve_csv(curve: &[f64]) -> String {
    let mut out = String::from("episode,total_reward,moving_avg\n");
    for (i, (r, m)) in curve.iter().zip(moving_average(curve, CURVE_WINDOW)).enumerate() {
        writeln!(out, "{i},{r},{m}").expect("writing to a string");
    }
    out
}
