//! Deterministic POMDPs, the benchmark environments and a random-agent trace
//! generator.
//!
//! Every environment is tabulated: hidden states are enumerated up front and
//! `P`, `R`, `Z` become flat arrays. Termination is a property of a
//! (state, action) pair: the episode ends after taking `a` in `s`.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::hash::Hash;
use std::sync::Arc;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::machine::{RmCore, TmCore};
use crate::symbols::{LabelSet, ObsAction, Observation, Reward};
use crate::traces::{LabeledTrace, TraceStep};
use crate::{RewardMachine, TransitionMachine};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EnvError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("no environment satisfying all constraints after {attempts} attempts; last violation: {last}")]
    GenerationFailure { attempts: usize, last: String },
}

/// One transition of a [`DetPomdp`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Step<'a> {
    pub next: usize,
    pub obs: &'a Observation,
    pub label: &'a LabelSet,
    pub reward: Reward,
    pub done: bool,
}

/// A tabulated deterministic POMDP.
#[derive(Clone, Debug)]
pub struct DetPomdp {
    actions: Vec<Arc<str>>,
    observations: Vec<Observation>,
    obs_labels: Vec<LabelSet>,
    state_names: Vec<String>,
    state_obs: Vec<usize>,
    // Indexed by s * |A| + a.
    next: Vec<usize>,
    reward: Vec<Reward>,
    ends: Vec<bool>,
    initial: usize,
    gamma: f64,
}

impl DetPomdp {
    /// Tabulate a model given by closures over an explicit state list.
    ///
    /// `step` returns the successor, the reward and whether the episode ends.
    pub fn tabulate<H: Clone + Eq + Hash + std::fmt::Debug>(
        actions: &[&str],
        states: &[H],
        initial: &H,
        observe: impl Fn(&H) -> String,
        label: impl Fn(&str) -> LabelSet,
        step: impl Fn(&H, &str) -> (H, Reward, bool),
        gamma: f64,
    ) -> Self {
        assert!((0.0..=1.0).contains(&gamma), "discount must lie in [0, 1]");
        let index: HashMap<&H, usize> = states.iter().enumerate().map(|(i, h)| (h, i)).collect();
        let mut obs_index: HashMap<String, usize> = HashMap::new();
        let mut observations = Vec::new();
        let mut obs_labels = Vec::new();
        let mut state_obs = Vec::with_capacity(states.len());
        for h in states {
            let o = observe(h);
            let id = *obs_index.entry(o.clone()).or_insert_with(|| {
                obs_labels.push(label(&o));
                observations.push(Observation::Plain(o.into()));
                observations.len() - 1
            });
            state_obs.push(id);
        }
        let n_a = actions.len();
        let mut next = Vec::with_capacity(states.len() * n_a);
        let mut reward = Vec::with_capacity(states.len() * n_a);
        let mut ends = Vec::with_capacity(states.len() * n_a);
        for h in states {
            for a in actions {
                let (h2, r, done) = step(h, a);
                let Some(&j) = index.get(&h2) else {
                    panic!("successor {h2:?} of {h:?} under {a} is not enumerated");
                };
                next.push(j);
                reward.push(r);
                ends.push(done);
            }
        }
        DetPomdp {
            actions: actions.iter().map(|&a| a.into()).collect(),
            observations,
            obs_labels,
            state_names: states.iter().map(|h| format!("{h:?}")).collect(),
            state_obs,
            next,
            reward,
            ends,
            initial: index[initial],
            gamma,
        }
    }

    pub fn num_states(&self) -> usize {
        self.state_obs.len()
    }

    pub fn num_actions(&self) -> usize {
        self.actions.len()
    }

    pub fn actions(&self) -> &[Arc<str>] {
        &self.actions
    }

    pub fn action_index(&self, name: &str) -> Option<usize> {
        self.actions.iter().position(|a| &**a == name)
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn initial(&self) -> usize {
        self.initial
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn state_name(&self, s: usize) -> &str {
        &self.state_names[s]
    }

    /// Z(s)
    pub fn observe(&self, s: usize) -> &Observation {
        &self.observations[self.state_obs[s]]
    }

    pub fn obs_index(&self, s: usize) -> usize {
        self.state_obs[s]
    }

    /// L(Z(s))
    pub fn label(&self, s: usize) -> &LabelSet {
        &self.obs_labels[self.state_obs[s]]
    }

    /// All atomic propositions occurring in some label.
    pub fn propositions(&self) -> BTreeSet<&str> {
        self.obs_labels
            .iter()
            .flat_map(|l| l.props().iter().map(|p| &**p))
            .collect()
    }

    pub fn successor(&self, s: usize, a: usize) -> usize {
        self.next[s * self.actions.len() + a]
    }

    pub fn reward(&self, s: usize, a: usize) -> Reward {
        self.reward[s * self.actions.len() + a]
    }

    pub fn ends(&self, s: usize, a: usize) -> bool {
        self.ends[s * self.actions.len() + a]
    }

    /// (P(s,a), Z(P(s,a)), L(Z(P(s,a))), R(s,a), episode end).
    pub fn step(&self, s: usize, a: usize) -> Step<'_> {
        let next = self.successor(s, a);
        Step {
            next,
            obs: self.observe(next),
            label: self.label(next),
            reward: self.reward(s, a),
            done: self.ends(s, a),
        }
    }
}

fn prop_label(props: &[&str]) -> LabelSet {
    LabelSet::new(props.iter().copied())
}

pub const FIG1_ACTIONS: [&str; 5] = ["up", "down", "left", "right", "sit"];

/// The four-area house: fetch the key in orangeroom, use the toilet in
/// cyanroom (locked without the key), then sit on the sofa in limegreenroom.
///
/// Hidden state is (area, key, toilet). Sitting in limegreenroom ends the
/// episode, paying 1 only after the toilet visit.
pub fn build_fig1_env() -> DetPomdp {
    const AREAS: [&str; 4] = ["orangeroom", "corridor", "cyanroom", "limegreenroom"];
    let states: Vec<(&str, bool, bool)> = AREAS
        .iter()
        .flat_map(|&o| [false, true].into_iter().flat_map(move |k| [(o, k, false), (o, k, true)]))
        .collect();
    let enter = |area: &'static str, key: bool, toilet: bool| {
        (area, key || area == "orangeroom", toilet || area == "cyanroom")
    };
    DetPomdp::tabulate(
        &FIG1_ACTIONS,
        &states,
        &("corridor", false, false),
        |h| h.0.to_owned(),
        |o| match o {
            "orangeroom" => prop_label(&["key"]),
            "cyanroom" => prop_label(&["toilet"]),
            "limegreenroom" => prop_label(&["sofa"]),
            _ => LabelSet::empty(),
        },
        |&(area, key, toilet), a| {
            let stay = ((area, key, toilet), Reward::ZERO, false);
            match (area, a) {
                ("corridor", "left") => (enter("orangeroom", key, toilet), Reward::ZERO, false),
                ("corridor", "up") if key => (enter("cyanroom", key, toilet), Reward::ZERO, false),
                ("corridor", "right") => (enter("limegreenroom", key, toilet), Reward::ZERO, false),
                ("orangeroom", "down") | ("cyanroom", "down") | ("limegreenroom", "left") => {
                    (enter("corridor", key, toilet), Reward::ZERO, false)
                }
                ("limegreenroom", "sit") => {
                    let r = if toilet { Reward::from_int(1) } else { Reward::ZERO };
                    ((area, key, toilet), r, true)
                }
                _ => stay,
            }
        },
        0.95,
    )
}

type Cell = (usize, usize);

pub fn cell_name((r, c): Cell) -> String {
    format!("r{r}c{c}")
}

const MOVES: [&str; 4] = ["up", "down", "left", "right"];

fn move_cell((r, c): Cell, action: &str, size: usize) -> Cell {
    match action {
        "up" if r > 0 => (r - 1, c),
        "down" if r + 1 < size => (r + 1, c),
        "left" if c > 0 => (r, c - 1),
        "right" if c + 1 < size => (r, c + 1),
        _ => (r, c),
    }
}

fn cells(size: usize) -> impl Iterator<Item = Cell> {
    (0..size).flat_map(move |r| (0..size).map(move |c| (r, c)))
}

/// An `n×n` grid with phase labels `l1 … lk` on distinct cells. Visiting
/// `l{p+1}` in phase `p` advances the phase; `sit` in the final phase pays 1
/// and ends the episode. The agent starts in the corner `(0,0)`.
pub fn build_phase_grid(size: usize, phases: usize) -> Result<DetPomdp, EnvError> {
    if size < 2 || phases < 1 {
        return Err(EnvError::InvalidParams(format!(
            "phase grid needs size >= 2 and phases >= 1, got {size} and {phases}"
        )));
    }
    if phases >= size * size {
        return Err(EnvError::InvalidParams(format!(
            "{phases} phase labels do not fit on a {size}x{size} grid beside the start cell"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(((size as u64) << 32) | phases as u64);
    let mut free: Vec<Cell> = cells(size).filter(|&c| c != (0, 0)).collect();
    free.shuffle(&mut rng);
    let phase_of: HashMap<Cell, usize> = free[..phases].iter().enumerate().map(|(i, &c)| (c, i + 1)).collect();
    let label_of: HashMap<String, usize> = phase_of.iter().map(|(&c, &p)| (cell_name(c), p)).collect();
    let states: Vec<(Cell, usize)> = cells(size).flat_map(|c| (0..=phases).map(move |p| (c, p))).collect();
    let mut actions = MOVES.to_vec();
    actions.push("sit");
    Ok(DetPomdp::tabulate(
        &actions,
        &states,
        &((0, 0), 0),
        |(c, _)| cell_name(*c),
        |o| match label_of.get(o) {
            Some(p) => LabelSet::single(format!("l{p}")),
            None => LabelSet::empty(),
        },
        |&(cell, p), a| {
            let p = if phase_of.get(&cell) == Some(&(p + 1)) { p + 1 } else { p };
            if a == "sit" {
                return if p == phases {
                    ((cell, p), Reward::from_int(1), true)
                } else {
                    ((cell, p), Reward::ZERO, false)
                };
            }
            ((move_cell(cell, a, size), p), Reward::ZERO, false)
        },
        0.95,
    ))
}

/// Parameters of the random grid generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorParams {
    pub grid: usize,
    pub tm_states: usize,
    pub rm_states: usize,
    pub labels: usize,
    pub extra_edge_prob: f64,
    pub impassable_frac: f64,
    /// Labels sit within this Chebyshev distance of the start; 0 means anywhere.
    pub label_window: usize,
    pub seed: u64,
    pub max_retries: usize,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        GeneratorParams {
            grid: 25,
            tm_states: 7,
            rm_states: 3,
            labels: 5,
            extra_edge_prob: 0.3,
            impassable_frac: 0.3,
            label_window: 4,
            seed: 0,
            max_retries: 1000,
        }
    }
}

/// Ground truth of a generated grid.
///
/// Label `i` is the proposition `p{i}` on `label_cells[i]`. Both machines
/// move on every step by the label of the current cell (the empty label is a
/// self-loop). A labeled cell is impassable while the transition machine's
/// updated state lists it in `impassable`. Each step pays the reward of the
/// reward-machine transition that the next cell's label triggers; the
/// episode ends when that transition enters `rm_terminal`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthSpec {
    pub grid: usize,
    pub start: Cell,
    pub label_cells: Vec<Cell>,
    /// `tm_delta[q][l]`
    pub tm_delta: Vec<Vec<usize>>,
    /// `impassable[q]`: label indices blocked in TM state `q`.
    pub impassable: Vec<BTreeSet<usize>>,
    /// `rm_delta[u][l]`
    pub rm_delta: Vec<Vec<usize>>,
    /// `rm_reward[u][l]`: reward of the transition `rm_delta[u][l]`.
    pub rm_reward: Vec<Vec<Reward>>,
    pub rm_terminal: usize,
}

/// Hidden state of a generated grid: cell, TM state, RM state, with neither
/// machine having consumed the cell's label yet.
type GridState = (Cell, usize, usize);

pub fn prop_name(l: usize) -> String {
    format!("p{l}")
}

impl GroundTruthSpec {
    fn label_index(&self) -> HashMap<Cell, usize> {
        self.label_cells.iter().enumerate().map(|(i, &c)| (c, i)).collect()
    }

    fn tm_after(&self, q: usize, l: Option<usize>) -> usize {
        l.map_or(q, |l| self.tm_delta[q][l])
    }

    fn rm_after(&self, u: usize, l: Option<usize>) -> usize {
        l.map_or(u, |l| self.rm_delta[u][l])
    }

    /// One step of the hidden dynamics from a non-terminal RM state.
    fn dynamics(&self, labels: &HashMap<Cell, usize>, (cell, q, u): GridState, a: &str) -> (GridState, Reward, bool) {
        let here = labels.get(&cell).copied();
        let (q, u) = (self.tm_after(q, here), self.rm_after(u, here));
        let mut target = move_cell(cell, a, self.grid);
        if let Some(l) = labels.get(&target) {
            if self.impassable[q].contains(l) {
                target = cell;
            }
        }
        match labels.get(&target) {
            Some(&l) => (
                (target, q, u),
                self.rm_reward[u][l],
                self.rm_delta[u][l] == self.rm_terminal,
            ),
            None => ((target, q, u), Reward::ZERO, false),
        }
    }

    pub fn build_env(&self) -> DetPomdp {
        let labels = self.label_index();
        let by_name: HashMap<String, usize> = labels.iter().map(|(&c, &l)| (cell_name(c), l)).collect();
        let states: Vec<GridState> = cells(self.grid)
            .flat_map(|c| (0..self.tm_delta.len()).flat_map(move |q| (0..self.rm_delta.len()).map(move |u| (c, q, u))))
            .collect();
        DetPomdp::tabulate(
            &MOVES,
            &states,
            &(self.start, 0, 0),
            |(c, _, _)| cell_name(*c),
            |o| by_name.get(o).map_or_else(LabelSet::empty, |&l| LabelSet::single(prop_name(l))),
            |&h, a| self.dynamics(&labels, h, a),
            0.95,
        )
    }

    fn beta_symbols(&self) -> Vec<(Option<usize>, LabelSet)> {
        std::iter::once((None, LabelSet::empty()))
            .chain((0..self.label_cells.len()).map(|l| (Some(l), LabelSet::single(prop_name(l)))))
            .collect()
    }

    /// The ground-truth transition machine over plain observations.
    pub fn tm_machine(&self) -> TransitionMachine {
        let labels = self.label_index();
        let mut m = TmCore::with_states(self.tm_delta.len());
        for q in 0..self.tm_delta.len() {
            for (l, b) in self.beta_symbols() {
                m.set_transition(q, &b, self.tm_after(q, l)).expect("state in range");
            }
            for cell in cells(self.grid) {
                for a in MOVES {
                    let ((next, _, _), _, _) = self.dynamics(&labels, (cell, q, 0), a);
                    let input = ObsAction::plain(&cell_name(cell), a);
                    m.set_emission(q, &input, Observation::plain(cell_name(next))).expect("state in range");
                }
            }
        }
        TransitionMachine::new(m)
    }

    /// The ground-truth reward machine over observations supplemented with
    /// the states of [`GroundTruthSpec::tm_machine`]. The terminal state has
    /// self-loops and no emissions.
    pub fn rm_machine(&self) -> RewardMachine {
        let labels = self.label_index();
        let tm_names = TransitionMachine::new(TmCore::with_states(self.tm_delta.len()));
        let mut m = RmCore::with_states(self.rm_delta.len());
        for u in 0..self.rm_delta.len() {
            for (l, b) in self.beta_symbols() {
                let to = if u == self.rm_terminal { u } else { self.rm_after(u, l) };
                m.set_transition(u, &b, to).expect("state in range");
            }
            if u == self.rm_terminal {
                continue;
            }
            for q in 0..self.tm_delta.len() {
                let qname = tm_names.core().state_name(q);
                for cell in cells(self.grid) {
                    for a in MOVES {
                        let (_, r, _) = self.dynamics(&labels, (cell, q, u), a);
                        let obs = Observation::plain(cell_name(cell)).augment(qname.clone());
                        m.set_emission(u, &ObsAction::new(obs, a), r).expect("state in range");
                    }
                }
            }
        }
        RewardMachine::new(m)
    }

    /// Every structural constraint of the generator, as a list of violations.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let (nq, nu, nl) = (self.tm_delta.len(), self.rm_delta.len(), self.label_cells.len());
        if self.tm_delta.iter().any(|row| row.len() != nl || row.iter().any(|&t| t >= nq)) {
            out.push("transition machine is not complete and deterministic".into());
        }
        if self.rm_delta.iter().any(|row| row.len() != nl || row.iter().any(|&t| t >= nu))
            || self.rm_reward.iter().any(|row| row.len() != nl)
            || self.rm_reward.len() != nu
        {
            out.push("reward machine is not complete and deterministic".into());
            return out;
        }
        if self.impassable.len() != nq {
            out.push("impassable sets do not match the transition machine".into());
            return out;
        }
        // Only transitions on labels the agent can actually step onto count.
        let tm_succ = |q: usize| {
            (0..nl)
                .filter(|l| !self.impassable[q].contains(l))
                .map(|l| self.tm_delta[q][l])
                .collect::<Vec<_>>()
        };
        for q in 0..nq {
            let seen = reachable(q, nq, tm_succ);
            if seen.iter().any(|&v| !v) {
                out.push(format!("transition machine is not strongly connected through passable cells from q{q}"));
                break;
            }
        }
        for l in 0..nl {
            if self.impassable.iter().all(|s| s.contains(&l)) {
                out.push(format!("label cell {l} is impassable in every state"));
            }
        }
        let distinct: BTreeSet<_> = self.impassable.iter().collect();
        if distinct.len() != nq {
            out.push("two transition-machine states block the same cells".into());
        }
        let mut seen = BTreeSet::new();
        for &c in &self.label_cells {
            if c.0 % 2 == 0 || c.1 % 2 == 0 || c.0 >= self.grid || c.1 >= self.grid || !seen.insert(c) {
                out.push(format!("label cell {c:?} is not a distinct odd-coordinate cell"));
            }
        }
        if self.label_cells.contains(&self.start) {
            out.push("start cell carries a label".into());
        }
        let t = self.rm_terminal;
        for u in 0..nu {
            if u == t {
                continue;
            }
            for l in 0..nl {
                let v = self.rm_delta[u][l];
                let r = self.rm_reward[u][l];
                if v == t && r <= Reward::ZERO {
                    out.push(format!("transition u{u} -{l}-> terminal has non-positive reward {r}"));
                }
                if v == u && !r.is_zero() {
                    out.push(format!("self-loop u{u} -{l}-> carries reward {r}"));
                }
            }
            if !reachable(u, nu, |x| if x == t { vec![] } else { self.rm_delta[x].clone() })[t] {
                out.push(format!("u{u} cannot reach the terminal state"));
            }
        }
        for cycle in simple_cycles(nu, t, &self.rm_delta) {
            let total = cycle
                .iter()
                .fold(Reward::ZERO, |acc, &(u, l)| acc + self.rm_reward[u][l]);
            if total >= Reward::ZERO {
                out.push(format!("reward-machine cycle {cycle:?} has total reward {total}"));
            }
        }
        out
    }
}

fn reachable(from: usize, n: usize, succ: impl Fn(usize) -> Vec<usize>) -> Vec<bool> {
    let mut seen = vec![false; n];
    seen[from] = true;
    let mut queue = VecDeque::from([from]);
    while let Some(x) = queue.pop_front() {
        for y in succ(x) {
            if !seen[y] {
                seen[y] = true;
                queue.push_back(y);
            }
        }
    }
    seen
}

/// Simple cycles of length ≥ 2 avoiding `terminal`, as (state, label) edges.
/// Self-loops are excluded: they carry no reward by construction.
fn simple_cycles(n: usize, terminal: usize, delta: &[Vec<usize>]) -> Vec<Vec<(usize, usize)>> {
    fn extend(
        start: usize,
        at: usize,
        delta: &[Vec<usize>],
        terminal: usize,
        path: &mut Vec<(usize, usize)>,
        on_path: &mut Vec<bool>,
        out: &mut Vec<Vec<(usize, usize)>>,
    ) {
        for (l, &v) in delta[at].iter().enumerate() {
            if v == at || v == terminal || v < start {
                continue;
            }
            path.push((at, l));
            if v == start {
                out.push(path.clone());
            } else if !on_path[v] {
                on_path[v] = true;
                extend(start, v, delta, terminal, path, on_path, out);
                on_path[v] = false;
            }
            path.pop();
        }
    }
    let mut out = Vec::new();
    for start in 0..n {
        if start == terminal {
            continue;
        }
        let mut on_path = vec![false; n];
        on_path[start] = true;
        extend(start, start, delta, terminal, &mut Vec::new(), &mut on_path, &mut out);
    }
    out
}

fn odd_cells(size: usize) -> Vec<Cell> {
    cells(size).filter(|&(r, c)| r % 2 == 1 && c % 2 == 1).collect()
}

fn draw_tm(p: &GeneratorParams, rng: &mut ChaCha8Rng) -> (Vec<Vec<usize>>, Vec<BTreeSet<usize>>) {
    let (nq, nl) = (p.tm_states, p.labels);
    let mut delta: Vec<Vec<Option<usize>>> = vec![vec![None; nl]; nq];
    let mut order: Vec<usize> = (0..nq).collect();
    order.shuffle(rng);
    for i in 0..nq {
        let l = rng.random_range(0..nl);
        delta[order[i]][l] = Some(order[(i + 1) % nq]);
    }
    for row in delta.iter_mut() {
        for slot in row.iter_mut() {
            if slot.is_none() && rng.random_bool(p.extra_edge_prob) {
                *slot = Some(rng.random_range(0..nq));
            }
        }
    }
    let delta = delta
        .into_iter()
        .map(|row| row.into_iter().map(|t| t.unwrap_or_else(|| rng.random_range(0..nq))).collect())
        .collect();
    let impassable = (0..nq)
        .map(|_| (0..nl).filter(|_| rng.random_bool(p.impassable_frac)).collect())
        .collect();
    (delta, impassable)
}

/// Maximum reward collectable along forward (increasing-index) paths from
/// `from` to `to`, or None if `to` is not forward-reachable.
fn max_forward_gain(from: usize, to: usize, delta: &[Vec<usize>], reward: &[Vec<Reward>]) -> Option<Reward> {
    let mut best: Vec<Option<Reward>> = vec![None; delta.len()];
    best[from] = Some(Reward::ZERO);
    for u in from..to {
        let Some(here) = best[u] else { continue };
        for (l, &v) in delta[u].iter().enumerate() {
            if v > u && v <= to {
                let cand = here + reward[u][l].max(Reward::ZERO);
                if best[v].is_none_or(|b| cand > b) {
                    best[v] = Some(cand);
                }
            }
        }
    }
    best[to]
}

fn draw_rm(p: &GeneratorParams, rng: &mut ChaCha8Rng) -> (Vec<Vec<usize>>, Vec<Vec<Reward>>) {
    let (nu, nl) = (p.rm_states, p.labels);
    let t = nu - 1;
    let mut delta = vec![vec![0; nl]; nu];
    for (u, row) in delta.iter_mut().enumerate() {
        for slot in row.iter_mut() {
            *slot = if u == t {
                u
            } else {
                // Mostly self-loops; forward edges advance one state at a time.
                match rng.random_range(0..5) {
                    0 => u + 1,
                    1 if u > 0 => rng.random_range(0..u),
                    _ => u,
                }
            };
        }
    }
    // Every state must be entered from an earlier one and lead forward.
    for v in 1..t {
        if !(0..v).any(|u| delta[u].contains(&v)) {
            let u = rng.random_range(0..v);
            let l = rng.random_range(0..nl);
            delta[u][l] = v;
        }
    }
    for u in (0..t).rev() {
        let reaches = reachable(u, nu, |x| if x == t { vec![] } else { delta[x].clone() })[t];
        if !reaches {
            let l = rng.random_range(0..nl);
            delta[u][l] = t;
        }
    }
    let mut reward = vec![vec![Reward::ZERO; nl]; nu];
    for u in 0..t {
        for l in 0..nl {
            let v = delta[u][l];
            if v == t {
                reward[u][l] = Reward::from_int(rng.random_range(5..=10));
            } else if v > u {
                reward[u][l] = Reward::from_int(rng.random_range(0..=1));
            }
        }
    }
    // Back edges cost more than any forward gain that closes their cycle.
    for u in 0..t {
        for l in 0..nl {
            let v = delta[u][l];
            if v < u {
                let gain = max_forward_gain(v, u, &delta, &reward).unwrap_or(Reward::ZERO);
                reward[u][l] = -(gain + Reward::from_int(1));
            }
        }
    }
    (delta, reward)
}

/// Random grid world with a hidden transition machine and reward machine.
pub fn generate_random_env(params: &GeneratorParams) -> Result<(DetPomdp, GroundTruthSpec), EnvError> {
    let p = params;
    if p.grid < 3 {
        return Err(EnvError::InvalidParams("need grid >= 3".into()));
    }
    let mid = p.grid / 2;
    let start = (mid - mid % 2, mid - mid % 2);
    let odd: Vec<Cell> = odd_cells(p.grid)
        .into_iter()
        .filter(|&(r, c)| p.label_window == 0 || (r.abs_diff(start.0).max(c.abs_diff(start.1)) <= p.label_window))
        .collect();
    if p.grid < 3 || p.tm_states == 0 || p.rm_states < 2 || p.labels == 0 {
        return Err(EnvError::InvalidParams(
            "need grid >= 3, tm_states >= 1, rm_states >= 2, labels >= 1".into(),
        ));
    }
    if !(0.0..=1.0).contains(&p.extra_edge_prob) || !(0.0..=1.0).contains(&p.impassable_frac) {
        return Err(EnvError::InvalidParams("probabilities must lie in [0, 1]".into()));
    }
    if p.labels > odd.len() {
        return Err(EnvError::InvalidParams(format!(
            "{} labels do not fit on {} odd-coordinate cells in the window",
            p.labels,
            odd.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut last = String::new();
    for _ in 0..p.max_retries.max(1) {
        let label_cells: Vec<Cell> = odd.choose_multiple(&mut rng, p.labels).copied().collect();
        let (tm_delta, impassable) = draw_tm(p, &mut rng);
        let (rm_delta, rm_reward) = draw_rm(p, &mut rng);
        let spec = GroundTruthSpec {
            grid: p.grid,
            start,
            label_cells,
            tm_delta,
            impassable,
            rm_delta,
            rm_reward,
            rm_terminal: p.rm_states - 1,
        };
        match spec.violations().into_iter().next() {
            None => return Ok((spec.build_env(), spec)),
            Some(v) => last = v,
        }
    }
    Err(EnvError::GenerationFailure {
        attempts: p.max_retries.max(1),
        last,
    })
}

/// A serializable recipe for an environment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvSpec {
    Fig1,
    PhaseGrid { size: usize, phases: usize },
    Generated { ground_truth: GroundTruthSpec },
}

impl EnvSpec {
    pub fn build(&self) -> Result<DetPomdp, EnvError> {
        match self {
            EnvSpec::Fig1 => Ok(build_fig1_env()),
            EnvSpec::PhaseGrid { size, phases } => build_phase_grid(*size, *phases),
            EnvSpec::Generated { ground_truth } => {
                if let Some(v) = ground_truth.violations().into_iter().next() {
                    return Err(EnvError::InvalidParams(v));
                }
                Ok(ground_truth.build_env())
            }
        }
    }

    pub fn ground_truth(&self) -> Option<&GroundTruthSpec> {
        match self {
            EnvSpec::Generated { ground_truth } => Some(ground_truth),
            _ => None,
        }
    }
}

/// Roll out one episode under `pick`, stopping at episode end or `max_len`.
pub fn rollout(env: &DetPomdp, max_len: usize, mut pick: impl FnMut(usize) -> usize) -> LabeledTrace {
    let mut s = env.initial();
    let mut steps = Vec::new();
    for _ in 0..max_len.max(1) {
        let a = pick(s);
        let st = env.step(s, a);
        steps.push(TraceStep::new(env.label(s).clone(), env.observe(s).clone(), env.actions()[a].clone(), st.reward));
        s = st.next;
        if st.done {
            break;
        }
    }
    LabeledTrace::new(steps).expect("at least one step")
}

/// `n` episodes of a uniformly random agent. Episode `i` draws from stream
/// `i` of a generator seeded with `seed`, so the corpus does not depend on
/// thread scheduling.
pub fn generate_traces(env: &DetPomdp, n: usize, max_len: usize, seed: u64) -> Vec<LabeledTrace> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            rollout(env, max_len, |_| rng.random_range(0..env.num_actions()))
        })
        .collect()
}

/// Optimal discounted values and a greedy policy (ties to the lowest action).
#[derive(Clone, Debug)]
pub struct ValueIteration {
    pub values: Vec<f64>,
    pub policy: Vec<usize>,
    pub iterations: usize,
}

pub fn value_iteration(env: &DetPomdp, gamma: f64, tol: f64) -> ValueIteration {
    let (ns, na) = (env.num_states(), env.num_actions());
    let q = |v: &[f64], s: usize, a: usize| {
        let cont = if env.ends(s, a) { 0.0 } else { gamma * v[env.successor(s, a)] };
        env.reward(s, a).to_f64() + cont
    };
    let mut values = vec![0.0; ns];
    let mut iterations = 0;
    loop {
        iterations += 1;
        let mut delta: f64 = 0.0;
        for s in 0..ns {
            let best = (0..na).map(|a| q(&values, s, a)).fold(f64::NEG_INFINITY, f64::max);
            delta = delta.max((best - values[s]).abs());
            values[s] = best;
        }
        if delta <= tol || iterations >= 100_000 {
            break;
        }
    }
    let policy = (0..ns)
        .map(|s| {
            let mut best = 0;
            for a in 1..na {
                if q(&values, s, a) > q(&values, s, best) + 1e-9 {
                    best = a;
                }
            }
            best
        })
        .collect();
    ValueIteration {
        values,
        policy,
        iterations,
    }
}

/// Undiscounted return of the greedy value-iteration policy from the
/// initial state.
pub fn optimal_return(env: &DetPomdp, gamma: f64, max_len: usize) -> Reward {
    let vi = value_iteration(env, gamma, 1e-10);
    rollout(env, max_len, |s| vi.policy[s]).total_reward()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn act<'e>(env: &'e DetPomdp, s: usize, a: &str) -> Step<'e> {
        env.step(s, env.action_index(a).unwrap())
    }

    fn walk(env: &DetPomdp, actions: &[&str]) -> (usize, Reward, bool) {
        let mut s = env.initial();
        let mut total = Reward::ZERO;
        for a in actions {
            let st = act(env, s, a);
            total = total + st.reward;
            if st.done {
                return (st.next, total, true);
            }
            s = st.next;
        }
        (s, total, false)
    }

    #[test]
    fn fig1_shape() {
        let env = build_fig1_env();
        assert_eq!(env.observations().len(), 4);
        assert_eq!(env.num_states(), 16);
        assert_eq!(env.propositions(), BTreeSet::from(["key", "sofa", "toilet"]));
        assert_eq!(env.observe(env.initial()), &Observation::plain("corridor"));
    }

    #[test]
    fn fig1_door_needs_key() {
        let env = build_fig1_env();
        let s0 = env.initial();
        assert_eq!(act(&env, s0, "up").obs, &Observation::plain("corridor"));
        let (s, _, _) = walk(&env, &["left", "down"]);
        let st = act(&env, s, "up");
        assert_eq!(st.obs, &Observation::plain("cyanroom"));
        assert_eq!(st.label, &LabelSet::single("toilet"));
    }

    #[test]
    fn fig1_sofa_rewards_only_after_toilet() {
        let env = build_fig1_env();
        let (_, r, done) = walk(&env, &["right", "sit"]);
        assert!(done && r.is_zero());
        let (_, r, done) = walk(&env, &["left", "down", "up", "down", "right", "sit"]);
        assert!(done);
        assert_eq!(r, Reward::from_int(1));
    }

    #[test]
    fn fig1_optimum_is_one() {
        let env = build_fig1_env();
        assert_eq!(optimal_return(&env, 0.95, 100), Reward::from_int(1));
    }

    #[test]
    fn phase_grid_rejects_bad_params() {
        assert!(build_phase_grid(1, 1).is_err());
        assert!(build_phase_grid(2, 0).is_err());
        assert!(build_phase_grid(2, 4).is_err());
        let env = build_phase_grid(3, 3).unwrap();
        assert_eq!(env.num_states(), 9 * 4);
        assert_eq!(optimal_return(&env, 0.95, 200), Reward::from_int(1));
    }

    #[test]
    fn sit_before_final_phase_is_noop() {
        let env = build_phase_grid(2, 1).unwrap();
        let st = act(&env, env.initial(), "sit");
        assert!(!st.done);
        assert!(st.reward.is_zero());
    }

    #[test]
    fn generator_meets_constraints() {
        for seed in 0..5 {
            let params = GeneratorParams { seed, ..Default::default() };
            let (env, spec) = generate_random_env(&params).unwrap();
            assert!(spec.violations().is_empty());
            assert_eq!(env.num_states(), 625 * 7 * 3);
            for l in 0..5 {
                assert!(spec.impassable.iter().any(|s| !s.contains(&l)));
            }
        }
    }

    #[test]
    fn rm_cycles_are_negative() {
        let (_, spec) = generate_random_env(&GeneratorParams { seed: 3, ..Default::default() }).unwrap();
        // Independent enumeration: every closed walk of length 2 or 3 over
        // non-terminal, non-self-loop edges.
        let t = spec.rm_terminal;
        let edges: Vec<(usize, usize, Reward)> = (0..spec.rm_delta.len())
            .filter(|&u| u != t)
            .flat_map(|u| (0..5).map(move |l| (u, l)))
            .map(|(u, l)| (u, spec.rm_delta[u][l], spec.rm_reward[u][l]))
            .filter(|&(u, v, _)| u != v && v != t)
            .collect();
        for &(a, b, r1) in &edges {
            for &(c, d, r2) in &edges {
                if b == c && d == a {
                    assert!(r1 + r2 < Reward::ZERO);
                }
                for &(e, f, r3) in &edges {
                    if b == c && d == e && f == a && a != d {
                        assert!(r1 + r2 + r3 < Reward::ZERO);
                    }
                }
            }
        }
    }

    #[test]
    fn traces_are_reproducible() {
        let env = build_fig1_env();
        let a = generate_traces(&env, 20, 30, 7);
        let b = generate_traces(&env, 20, 30, 7);
        assert_eq!(a, b);
        assert_ne!(a, generate_traces(&env, 20, 30, 8));
        assert!(generate_traces(&env, 0, 30, 7).is_empty());
        assert!(a.iter().all(|t| t.len() <= 30));
    }

    #[test]
    fn ground_truth_machines_replay_traces() {
        let (env, spec) = generate_random_env(&GeneratorParams { seed: 1, ..Default::default() }).unwrap();
        let tm = spec.tm_machine();
        let rm = spec.rm_machine();
        for t in generate_traces(&env, 20, 200, 1) {
            let (mut q, mut u) = (tm.q0(), rm.u0());
            let steps = t.steps();
            for (i, st) in steps.iter().enumerate() {
                if let Some(next) = steps.get(i + 1) {
                    assert_eq!(tm.delta_p(q, &st.obs, &st.action), Some(&next.obs));
                }
                let aug = st.obs.augment(tm.core().state_name(q));
                assert_eq!(rm.delta_r(u, &aug, &st.action), Some(st.reward));
                q = tm.delta_q(q, &st.label).unwrap();
                u = rm.delta_u(u, &st.label).unwrap();
            }
        }
    }

    #[test]
    fn env_spec_round_trips() {
        let (_, spec) = generate_random_env(&GeneratorParams { grid: 9, seed: 2, ..Default::default() }).unwrap();
        let recipe = EnvSpec::Generated { ground_truth: spec };
        let json = serde_json::to_string(&recipe).unwrap();
        let back: EnvSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, recipe);
        let fig: EnvSpec = serde_json::from_str(r#"{"kind":"fig1"}"#).unwrap();
        assert_eq!(fig.build().unwrap().num_states(), 16);
    }
}
