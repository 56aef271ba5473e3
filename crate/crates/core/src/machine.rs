//! Dual-behavior Mealy machines.
//!
//! A [`Dbmm`] has two disjoint input alphabets. α-inputs produce an output and
//! leave the state unchanged; β-inputs move the machine and produce nothing.
//! Both maps are partial: the learner manipulates incomplete machines and only
//! the recovery steps in [`crate::preprocess`] complete them.
//!
//! States are dense indices. Symbols are interned per alphabet so that the
//! learner can compare outputs and look up edges by integer id.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt::{self, Debug, Display, Write as _};
use std::hash::Hash;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::symbols::{LabelSet, ObsAction, Observation, Reward};

pub type StateId = usize;

/// Bound shared by every alphabet symbol.
pub trait Symbol: Clone + Eq + Hash + Ord + Debug {}
impl<T: Clone + Eq + Hash + Ord + Debug> Symbol for T {}

/// An element of a mixed input sequence.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Input<A, B> {
    Alpha(A),
    Beta(B),
}

impl<A, B> Input<A, B> {
    pub fn is_alpha(&self) -> bool {
        matches!(self, Input::Alpha(_))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MachineError {
    #[error("unknown state {0}")]
    UnknownState(StateId),
    #[error("input {0} is not in the machine's alphabet")]
    UnknownInput(String),
    #[error("no transition from state {state} on {input} (input position {position})")]
    UndefinedTransition {
        position: usize,
        state: StateId,
        input: String,
    },
    #[error("no output at state {state} for {input} (input position {position})")]
    UndefinedOutput {
        position: usize,
        state: StateId,
        input: String,
    },
    #[error("malformed machine: {0}")]
    Malformed(String),
}

/// Interning table for one alphabet.
#[derive(Clone, Debug)]
pub struct Alphabet<T> {
    symbols: Vec<T>,
    index: HashMap<T, u32>,
}

impl<T: Symbol> Default for Alphabet<T> {
    fn default() -> Self {
        Alphabet {
            symbols: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<T: Symbol> Alphabet<T> {
    pub fn intern(&mut self, sym: &T) -> u32 {
        if let Some(&id) = self.index.get(sym) {
            return id;
        }
        let id = self.symbols.len() as u32;
        self.symbols.push(sym.clone());
        self.index.insert(sym.clone(), id);
        id
    }

    pub fn id(&self, sym: &T) -> Option<u32> {
        self.index.get(sym).copied()
    }

    pub fn get(&self, id: u32) -> &T {
        &self.symbols[id as usize]
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn contains(&self, sym: &T) -> bool {
        self.index.contains_key(sym)
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.symbols.iter()
    }

    /// Symbols in their natural order.
    pub fn sorted(&self) -> Vec<&T> {
        let mut v: Vec<&T> = self.symbols.iter().collect();
        v.sort();
        v
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub(crate) struct StateData {
    /// β-input id → successor.
    pub transitions: BTreeMap<u32, StateId>,
    /// α-input id → output id.
    pub emissions: BTreeMap<u32, u32>,
}

/// A dual-behavior Mealy machine with partial transition and output maps.
#[derive(Clone, Debug)]
pub struct Dbmm<A, B, O> {
    pub(crate) alpha: Alphabet<A>,
    pub(crate) beta: Alphabet<B>,
    pub(crate) outputs: Alphabet<O>,
    pub(crate) states: Vec<StateData>,
    pub(crate) initial: StateId,
    state_prefix: String,
}

impl<A: Symbol, B: Symbol, O: Symbol> Default for Dbmm<A, B, O> {
    fn default() -> Self {
        Self::new()
    }
}

impl<A: Symbol, B: Symbol, O: Symbol> Dbmm<A, B, O> {
    /// A machine with a single initial state and empty alphabets.
    pub fn new() -> Self {
        Dbmm {
            alpha: Alphabet::default(),
            beta: Alphabet::default(),
            outputs: Alphabet::default(),
            states: vec![StateData::default()],
            initial: 0,
            state_prefix: "s".to_owned(),
        }
    }

    /// A machine with `n` states (at least one), state 0 initial.
    pub fn with_states(n: usize) -> Self {
        let mut m = Self::new();
        m.states = vec![StateData::default(); n.max(1)];
        m
    }

    pub fn with_prefix(mut self, prefix: &str) -> Self {
        self.state_prefix = prefix.to_owned();
        self
    }

    pub fn state_prefix(&self) -> &str {
        &self.state_prefix
    }

    pub fn state_name(&self, q: StateId) -> String {
        format!("{}{}", self.state_prefix, q)
    }

    pub fn add_state(&mut self) -> StateId {
        self.states.push(StateData::default());
        self.states.len() - 1
    }

    pub fn num_states(&self) -> usize {
        self.states.len()
    }

    pub fn initial(&self) -> StateId {
        self.initial
    }

    pub fn set_initial(&mut self, q: StateId) -> Result<(), MachineError> {
        self.check_state(q)?;
        self.initial = q;
        Ok(())
    }

    pub fn alpha_alphabet(&self) -> &Alphabet<A> {
        &self.alpha
    }

    pub fn beta_alphabet(&self) -> &Alphabet<B> {
        &self.beta
    }

    pub fn output_alphabet(&self) -> &Alphabet<O> {
        &self.outputs
    }

    pub fn declare_alpha(&mut self, sym: &A) {
        self.alpha.intern(sym);
    }

    pub fn declare_beta(&mut self, sym: &B) {
        self.beta.intern(sym);
    }

    fn check_state(&self, q: StateId) -> Result<(), MachineError> {
        if q < self.states.len() {
            Ok(())
        } else {
            Err(MachineError::UnknownState(q))
        }
    }

    /// Define (or overwrite) `𝒯(from, input) = to`.
    pub fn set_transition(&mut self, from: StateId, input: &B, to: StateId) -> Result<(), MachineError> {
        self.check_state(from)?;
        self.check_state(to)?;
        let id = self.beta.intern(input);
        self.states[from].transitions.insert(id, to);
        Ok(())
    }

    /// Define (or overwrite) `𝒢(state, input) = output`.
    pub fn set_emission(&mut self, state: StateId, input: &A, output: O) -> Result<(), MachineError> {
        self.check_state(state)?;
        let a = self.alpha.intern(input);
        let o = self.outputs.intern(&output);
        self.states[state].emissions.insert(a, o);
        Ok(())
    }

    pub fn remove_emission(&mut self, state: StateId, input: &A) -> Option<O> {
        let a = self.alpha.id(input)?;
        let o = self.states.get_mut(state)?.emissions.remove(&a)?;
        Some(self.outputs.get(o).clone())
    }

    /// `𝒯(state, input)`; `Ok(None)` when the transition is undefined.
    pub fn step_beta(&self, state: StateId, input: &B) -> Result<Option<StateId>, MachineError> {
        self.check_state(state)?;
        let id = self
            .beta
            .id(input)
            .ok_or_else(|| MachineError::UnknownInput(format!("{input:?}")))?;
        Ok(self.states[state].transitions.get(&id).copied())
    }

    /// `𝒢(state, input)`; `Ok(None)` when no output is recorded.
    pub fn output_alpha(&self, state: StateId, input: &A) -> Result<Option<&O>, MachineError> {
        self.check_state(state)?;
        let id = self
            .alpha
            .id(input)
            .ok_or_else(|| MachineError::UnknownInput(format!("{input:?}")))?;
        Ok(self.states[state]
            .emissions
            .get(&id)
            .map(|&o| self.outputs.get(o)))
    }

    /// Lenient lookup: unknown symbols count as undefined.
    pub fn next_state(&self, state: StateId, input: &B) -> Option<StateId> {
        let id = self.beta.id(input)?;
        self.states.get(state)?.transitions.get(&id).copied()
    }

    /// Lenient lookup: unknown symbols count as undefined.
    pub fn output(&self, state: StateId, input: &A) -> Option<&O> {
        let id = self.alpha.id(input)?;
        let o = self.states.get(state)?.emissions.get(&id)?;
        Some(self.outputs.get(*o))
    }

    /// Run `inputs` from the initial state, collecting one output per α-input.
    pub fn run(&self, inputs: &[Input<A, B>]) -> Result<Vec<O>, MachineError> {
        self.run_from(self.initial, inputs).map(|(_, out)| out)
    }

    /// Run from an arbitrary state; also returns the state reached.
    pub fn run_from(
        &self,
        start: StateId,
        inputs: &[Input<A, B>],
    ) -> Result<(StateId, Vec<O>), MachineError> {
        self.check_state(start)?;
        let mut q = start;
        let mut out = Vec::new();
        for (position, input) in inputs.iter().enumerate() {
            match input {
                Input::Alpha(a) => match self.output_alpha(q, a)? {
                    Some(o) => out.push(o.clone()),
                    None => {
                        return Err(MachineError::UndefinedOutput {
                            position,
                            state: q,
                            input: format!("{a:?}"),
                        })
                    }
                },
                Input::Beta(b) => match self.step_beta(q, b)? {
                    Some(next) => q = next,
                    None => {
                        return Err(MachineError::UndefinedTransition {
                            position,
                            state: q,
                            input: format!("{b:?}"),
                        })
                    }
                },
            }
        }
        Ok((q, out))
    }

    /// State reached from the initial state by a β-word, if defined.
    pub fn reach<'a, I>(&self, word: I) -> Option<StateId>
    where
        I: IntoIterator<Item = &'a B>,
        B: 'a,
    {
        word.into_iter()
            .try_fold(self.initial, |q, b| self.next_state(q, b))
    }

    pub fn transitions(&self) -> impl Iterator<Item = (StateId, &B, StateId)> + '_ {
        self.states.iter().enumerate().flat_map(move |(q, s)| {
            s.transitions
                .iter()
                .map(move |(&b, &t)| (q, self.beta.get(b), t))
        })
    }

    pub fn emissions(&self) -> impl Iterator<Item = (StateId, &A, &O)> + '_ {
        self.states.iter().enumerate().flat_map(move |(q, s)| {
            s.emissions
                .iter()
                .map(move |(&a, &o)| (q, self.alpha.get(a), self.outputs.get(o)))
        })
    }

    pub fn emissions_of(&self, q: StateId) -> impl Iterator<Item = (&A, &O)> + '_ {
        self.states[q]
            .emissions
            .iter()
            .map(move |(&a, &o)| (self.alpha.get(a), self.outputs.get(o)))
    }

    pub fn transitions_of(&self, q: StateId) -> impl Iterator<Item = (&B, StateId)> + '_ {
        self.states[q]
            .transitions
            .iter()
            .map(move |(&b, &t)| (self.beta.get(b), t))
    }

    pub fn num_transitions(&self) -> usize {
        self.states.iter().map(|s| s.transitions.len()).sum()
    }

    pub fn num_emissions(&self) -> usize {
        self.states.iter().map(|s| s.emissions.len()).sum()
    }

    /// Largest number of α-inputs defined at a single state.
    pub fn max_defined_alpha(&self) -> usize {
        self.states.iter().map(|s| s.emissions.len()).max().unwrap_or(0)
    }

    /// Reachable states in breadth-first order, successors visited by β-symbol order.
    pub fn bfs_order(&self) -> Vec<StateId> {
        let mut beta_rank: Vec<u32> = (0..self.beta.len() as u32).collect();
        beta_rank.sort_by(|&x, &y| self.beta.get(x).cmp(self.beta.get(y)));
        let mut seen = vec![false; self.states.len()];
        let mut order = vec![self.initial];
        seen[self.initial] = true;
        let mut queue = VecDeque::from([self.initial]);
        while let Some(q) = queue.pop_front() {
            for &b in &beta_rank {
                if let Some(&t) = self.states[q].transitions.get(&b) {
                    if !seen[t] {
                        seen[t] = true;
                        order.push(t);
                        queue.push_back(t);
                    }
                }
            }
        }
        order
    }

    /// Drop unreachable states and renumber the rest in canonical BFS order.
    pub fn trim(&self) -> Self {
        let order = self.bfs_order();
        let mut rename = vec![usize::MAX; self.states.len()];
        for (new, &old) in order.iter().enumerate() {
            rename[old] = new;
        }
        let states = order
            .iter()
            .map(|&old| {
                let s = &self.states[old];
                StateData {
                    transitions: s
                        .transitions
                        .iter()
                        .map(|(&b, &t)| (b, rename[t]))
                        .collect(),
                    emissions: s.emissions.clone(),
                }
            })
            .collect();
        Dbmm {
            alpha: self.alpha.clone(),
            beta: self.beta.clone(),
            outputs: self.outputs.clone(),
            states,
            initial: 0,
            state_prefix: self.state_prefix.clone(),
        }
    }

    pub(crate) fn from_parts(
        alpha: Alphabet<A>,
        beta: Alphabet<B>,
        outputs: Alphabet<O>,
        states: Vec<StateData>,
        initial: StateId,
    ) -> Self {
        Dbmm {
            alpha,
            beta,
            outputs,
            states,
            initial,
            state_prefix: "s".to_owned(),
        }
    }

    /// Replace the state storage, keeping alphabets.
    pub(crate) fn with_state_data(&self, states: Vec<StateData>, initial: StateId) -> Self {
        Dbmm {
            alpha: self.alpha.clone(),
            beta: self.beta.clone(),
            outputs: self.outputs.clone(),
            states,
            initial,
            state_prefix: self.state_prefix.clone(),
        }
    }

    /// Same machine, transitions and emissions copied symbol by symbol into
    /// a machine with the given (larger or reordered) alphabets.
    pub fn rebased(&self, alpha: &[A], beta: &[B]) -> Self {
        let mut m = Dbmm::with_states(self.num_states()).with_prefix(&self.state_prefix);
        m.initial = self.initial;
        for a in alpha {
            m.declare_alpha(a);
        }
        for b in beta {
            m.declare_beta(b);
        }
        for a in self.alpha.iter() {
            m.declare_alpha(a);
        }
        for b in self.beta.iter() {
            m.declare_beta(b);
        }
        for (q, b, t) in self.transitions() {
            m.set_transition(q, b, t).expect("states exist");
        }
        for (q, a, o) in self.emissions() {
            m.set_emission(q, a, o.clone()).expect("states exist");
        }
        m
    }
}

/// True iff the reachable parts of `a` and `b` are identical up to renaming
/// of states: a bijection that maps initial to initial and preserves every
/// defined transition and output (and undefinedness).
pub fn isomorphic<A: Symbol, B: Symbol, O: Symbol>(a: &Dbmm<A, B, O>, b: &Dbmm<A, B, O>) -> bool {
    let mut fwd: HashMap<StateId, StateId> = HashMap::new();
    let mut bwd: HashMap<StateId, StateId> = HashMap::new();
    let mut queue = VecDeque::new();
    fwd.insert(a.initial, b.initial);
    bwd.insert(b.initial, a.initial);
    queue.push_back((a.initial, b.initial));
    while let Some((p, q)) = queue.pop_front() {
        let ea: BTreeMap<&A, &O> = a.emissions_of(p).collect();
        let eb: BTreeMap<&A, &O> = b.emissions_of(q).collect();
        if ea != eb {
            return false;
        }
        let ta: BTreeMap<&B, StateId> = a.transitions_of(p).collect();
        let tb: BTreeMap<&B, StateId> = b.transitions_of(q).collect();
        if ta.len() != tb.len() {
            return false;
        }
        for (sym, &pa) in &ta {
            let Some(&qb) = tb.get(sym) else {
                return false;
            };
            match (fwd.get(&pa), bwd.get(&qb)) {
                (Some(&x), Some(&y)) => {
                    if x != qb || y != pa {
                        return false;
                    }
                }
                (None, None) => {
                    fwd.insert(pa, qb);
                    bwd.insert(qb, pa);
                    queue.push_back((pa, qb));
                }
                _ => return false,
            }
        }
    }
    true
}

/// Serialized form of a machine.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MachineJson<A, B, O> {
    pub states: Vec<String>,
    pub initial: String,
    pub alpha: Vec<A>,
    pub beta: Vec<B>,
    pub outputs: Vec<O>,
    pub transitions: Vec<(String, B, String)>,
    pub emissions: Vec<(String, A, O)>,
}

impl<A, B, O> Dbmm<A, B, O>
where
    A: Symbol + Serialize + DeserializeOwned,
    B: Symbol + Serialize + DeserializeOwned,
    O: Symbol + Serialize + DeserializeOwned,
{
    /// Export with alphabets sorted and state names `prefix + index`.
    pub fn to_json(&self) -> MachineJson<A, B, O> {
        let mut alpha: Vec<A> = self.alpha.iter().cloned().collect();
        let mut beta: Vec<B> = self.beta.iter().cloned().collect();
        let mut outputs: Vec<O> = self.outputs.iter().cloned().collect();
        alpha.sort();
        beta.sort();
        outputs.sort();
        let mut transitions: Vec<(String, B, String)> = Vec::with_capacity(self.num_transitions());
        for q in 0..self.states.len() {
            let mut row: Vec<(&B, StateId)> = self.transitions_of(q).collect();
            row.sort();
            transitions.extend(
                row.into_iter()
                    .map(|(b, t)| (self.state_name(q), b.clone(), self.state_name(t))),
            );
        }
        let mut emissions = Vec::with_capacity(self.num_emissions());
        for q in 0..self.states.len() {
            let mut row: Vec<(&A, &O)> = self.emissions_of(q).collect();
            row.sort();
            emissions.extend(
                row.into_iter()
                    .map(|(a, o)| (self.state_name(q), a.clone(), o.clone())),
            );
        }
        MachineJson {
            states: (0..self.states.len()).map(|q| self.state_name(q)).collect(),
            initial: self.state_name(self.initial),
            alpha,
            beta,
            outputs,
            transitions,
            emissions,
        }
    }

    pub fn from_json(json: &MachineJson<A, B, O>) -> Result<Self, MachineError> {
        if json.states.is_empty() {
            return Err(MachineError::Malformed("no states".into()));
        }
        let mut index = HashMap::new();
        for (i, name) in json.states.iter().enumerate() {
            if index.insert(name.as_str(), i).is_some() {
                return Err(MachineError::Malformed(format!("duplicate state {name}")));
            }
        }
        let state = |name: &str| {
            index
                .get(name)
                .copied()
                .ok_or_else(|| MachineError::Malformed(format!("unknown state {name}")))
        };
        // Both alphabets may share a Rust type; compare their JSON forms.
        let alpha_keys: std::collections::HashSet<String> = json
            .alpha
            .iter()
            .map(|a| serde_json::to_string(a).unwrap_or_default())
            .collect();
        if let Some(b) = json
            .beta
            .iter()
            .find(|b| alpha_keys.contains(&serde_json::to_string(b).unwrap_or_default()))
        {
            return Err(MachineError::Malformed(format!(
                "symbol {b:?} is in both the alpha and the beta alphabet"
            )));
        }
        let mut m = Dbmm::with_states(json.states.len());
        m.initial = state(&json.initial)?;
        for a in &json.alpha {
            m.declare_alpha(a);
        }
        for b in &json.beta {
            m.declare_beta(b);
        }
        for o in &json.outputs {
            m.outputs.intern(o);
        }
        for (from, b, to) in &json.transitions {
            if !m.beta.contains(b) {
                return Err(MachineError::UnknownInput(format!("{b:?}")));
            }
            let (from, to) = (state(from)?, state(to)?);
            let id = m.beta.intern(b);
            if m.states[from].transitions.insert(id, to).is_some() {
                return Err(MachineError::Malformed(format!(
                    "two transitions from {} on {b:?}",
                    json.states[from]
                )));
            }
        }
        for (q, a, o) in &json.emissions {
            if !m.alpha.contains(a) {
                return Err(MachineError::UnknownInput(format!("{a:?}")));
            }
            if !m.outputs.contains(o) {
                return Err(MachineError::Malformed(format!("output {o:?} not declared")));
            }
            let q = state(q)?;
            let (ai, oi) = (m.alpha.intern(a), m.outputs.intern(o));
            if m.states[q].emissions.insert(ai, oi).is_some() {
                return Err(MachineError::Malformed(format!(
                    "two outputs at {} for {a:?}",
                    json.states[q]
                )));
            }
        }
        // Recover a common prefix such as "q" from names like "q0", "q1".
        let prefix = json.states[0].trim_end_matches(|c: char| c.is_ascii_digit());
        if json
            .states
            .iter()
            .enumerate()
            .all(|(i, n)| *n == format!("{prefix}{i}"))
        {
            m.state_prefix = prefix.to_owned();
        }
        Ok(m)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&self.to_json()).expect("machine serializes")
    }

    pub fn from_json_str(s: &str) -> Result<Self, MachineError> {
        let json: MachineJson<A, B, O> =
            serde_json::from_str(s).map_err(|e| MachineError::Malformed(e.to_string()))?;
        Self::from_json(&json)
    }
}

fn dot_escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

impl<A: Symbol + Display, B: Symbol + Display, O: Symbol + Display> Dbmm<A, B, O> {
    /// Graphviz rendering. β-edges are labeled with their input, parallel
    /// edges between the same pair of states are collapsed into one label.
    /// Each node lists its α-emissions as `input/output`.
    pub fn to_dot(&self, name: &str) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "digraph \"{}\" {{", dot_escape(name));
        let _ = writeln!(out, "  rankdir=LR;");
        let _ = writeln!(out, "  node [shape=box, fontname=\"monospace\"];");
        let _ = writeln!(out, "  __start [shape=point];");
        let _ = writeln!(out, "  __start -> \"{}\";", self.state_name(self.initial));
        for q in 0..self.states.len() {
            let mut lines = vec![self.state_name(q)];
            let mut ems: Vec<(&A, &O)> = self.emissions_of(q).collect();
            ems.sort();
            lines.extend(ems.into_iter().map(|(a, o)| format!("{a}/{o}")));
            let label = lines
                .iter()
                .map(|l| dot_escape(l))
                .collect::<Vec<_>>()
                .join("\\l");
            let _ = writeln!(out, "  \"{}\" [label=\"{}\\l\"];", self.state_name(q), label);
        }
        let mut grouped: BTreeMap<(StateId, StateId), Vec<&B>> = BTreeMap::new();
        for (q, b, t) in self.transitions() {
            grouped.entry((q, t)).or_default().push(b);
        }
        for ((q, t), mut syms) in grouped {
            syms.sort();
            let label = syms
                .iter()
                .map(|b| b.to_string())
                .collect::<Vec<_>>()
                .join(" | ");
            let _ = writeln!(
                out,
                "  \"{}\" -> \"{}\" [label=\"{}\"];",
                self.state_name(q),
                self.state_name(t),
                dot_escape(&label)
            );
        }
        out.push_str("}\n");
        out
    }
}

impl<A: Symbol, B: Symbol, O: Symbol> fmt::Display for Dbmm<A, B, O> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "DBMM({} states, {} transitions, {} emissions)",
            self.num_states(),
            self.num_transitions(),
            self.num_emissions()
        )
    }
}

pub type TmCore = Dbmm<ObsAction, LabelSet, Observation>;
pub type RmCore = Dbmm<ObsAction, LabelSet, Reward>;

/// A transition machine: its state selects the next-observation map δ_P.
///
/// The same map is written δ_T in the resolvence definition; both names refer
/// to [`TransitionMachine::delta_p`].
#[derive(Clone, Debug)]
pub struct TransitionMachine(TmCore);

impl TransitionMachine {
    pub fn new(core: TmCore) -> Self {
        TransitionMachine(core.with_prefix("q"))
    }

    pub fn core(&self) -> &TmCore {
        &self.0
    }

    pub fn into_core(self) -> TmCore {
        self.0
    }

    pub fn states(&self) -> usize {
        self.0.num_states()
    }

    pub fn q0(&self) -> StateId {
        self.0.initial()
    }

    /// δ_Q
    pub fn delta_q(&self, q: StateId, label: &LabelSet) -> Option<StateId> {
        self.0.next_state(q, label)
    }

    /// δ_P
    pub fn delta_p(&self, q: StateId, obs: &Observation, action: &str) -> Option<&Observation> {
        self.0.output(q, &ObsAction::new(obs.clone(), action))
    }
}

/// A reward machine: its state selects the reward map δ_R.
#[derive(Clone, Debug)]
pub struct RewardMachine(RmCore);

impl RewardMachine {
    pub fn new(core: RmCore) -> Self {
        RewardMachine(core.with_prefix("u"))
    }

    pub fn core(&self) -> &RmCore {
        &self.0
    }

    pub fn into_core(self) -> RmCore {
        self.0
    }

    pub fn states(&self) -> usize {
        self.0.num_states()
    }

    pub fn u0(&self) -> StateId {
        self.0.initial()
    }

    /// δ_U
    pub fn delta_u(&self, u: StateId, label: &LabelSet) -> Option<StateId> {
        self.0.next_state(u, label)
    }

    /// δ_R
    pub fn delta_r(&self, u: StateId, obs: &Observation, action: &str) -> Option<Reward> {
        self.0.output(u, &ObsAction::new(obs.clone(), action)).copied()
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub type Toy = Dbmm<String, String, i64>;

    pub fn a(s: &str) -> Input<String, String> {
        Input::Alpha(s.to_owned())
    }

    pub fn b(s: &str) -> Input<String, String> {
        Input::Beta(s.to_owned())
    }

    /// Two states swapped by `a`; `x` reports which state is current.
    pub fn toggle() -> Toy {
        let mut m = Toy::with_states(2);
        m.set_transition(0, &"a".into(), 1).unwrap();
        m.set_transition(1, &"a".into(), 0).unwrap();
        m.set_emission(0, &"x".into(), 0).unwrap();
        m.set_emission(1, &"x".into(), 1).unwrap();
        m
    }

    #[test]
    fn toggle_steps_on_its_label() {
        let m = toggle();
        assert_eq!(m.step_beta(0, &"a".into()).unwrap(), Some(1));
    }

    #[test]
    fn self_loop_stays_put() {
        let mut m = Toy::with_states(2);
        m.set_transition(1, &"l".into(), 1).unwrap();
        assert_eq!(m.step_beta(1, &"l".into()).unwrap(), Some(1));
    }

    #[test]
    fn step_and_output_report_errors_and_undefined() {
        let mut m = toggle();
        m.declare_beta(&"b".into());
        assert_eq!(m.step_beta(0, &"b".into()).unwrap(), None);
        assert_eq!(m.step_beta(7, &"a".into()), Err(MachineError::UnknownState(7)));
        assert!(matches!(
            m.step_beta(0, &"zzz".into()),
            Err(MachineError::UnknownInput(_))
        ));
        m.declare_alpha(&"y".into());
        assert_eq!(m.output_alpha(0, &"y".into()).unwrap(), None);
        assert_eq!(m.output_alpha(1, &"x".into()).unwrap(), Some(&1));
        assert!(matches!(
            m.output_alpha(0, &"nope".into()),
            Err(MachineError::UnknownInput(_))
        ));
    }

    #[test]
    fn run_toggle_hand_simulated() {
        // q0 -x-> 0, a -> q1 -x-> 1, a -> q0 -x-> 0
        let m = toggle();
        let out = m.run(&[a("x"), b("a"), a("x"), b("a"), a("x")]).unwrap();
        assert_eq!(out, vec![0, 1, 0]);
    }

    #[test]
    fn run_edge_cases() {
        let m = toggle();
        assert!(m.run(&[]).unwrap().is_empty());
        let mut one = Toy::with_states(1);
        one.set_transition(0, &"l".into(), 0).unwrap();
        let betas: Vec<_> = (0..5).map(|_| b("l")).collect();
        assert!(one.run(&betas).unwrap().is_empty());
    }

    #[test]
    fn run_reports_position_of_undefined_step() {
        let mut m = toggle();
        m.declare_beta(&"c".into());
        m.declare_alpha(&"y".into());
        let err = m.run(&[a("x"), b("c")]).unwrap_err();
        assert_eq!(
            err,
            MachineError::UndefinedTransition {
                position: 1,
                state: 0,
                input: "\"c\"".into()
            }
        );
        let err = m.run(&[b("a"), a("y")]).unwrap_err();
        assert!(matches!(err, MachineError::UndefinedOutput { position: 1, state: 1, .. }));
    }

    #[test]
    fn renamed_machine_is_isomorphic() {
        let m = toggle();
        // Same toggle with states listed in the opposite order.
        let mut r = Toy::with_states(2);
        r.set_initial(1).unwrap();
        r.set_transition(1, &"a".into(), 0).unwrap();
        r.set_transition(0, &"a".into(), 1).unwrap();
        r.set_emission(1, &"x".into(), 0).unwrap();
        r.set_emission(0, &"x".into(), 1).unwrap();
        assert!(isomorphic(&m, &r));
        assert!(isomorphic(&r, &m));
    }

    #[test]
    fn one_state_versus_two_is_not_isomorphic() {
        let mut one = Toy::with_states(1);
        one.set_transition(0, &"a".into(), 0).unwrap();
        one.set_emission(0, &"x".into(), 0).unwrap();
        assert!(!isomorphic(&one, &toggle()));
    }

    /// Breadth-first search over the product for an input word on which the
    /// two machines disagree (different output or different definedness).
    fn distinguishing_word(m1: &Toy, m2: &Toy) -> Option<Vec<Input<String, String>>> {
        let alphas: Vec<String> = m1.alpha.iter().chain(m2.alpha.iter()).cloned().collect();
        let betas: Vec<String> = m1.beta.iter().chain(m2.beta.iter()).cloned().collect();
        let mut seen = std::collections::HashSet::new();
        let mut queue = VecDeque::from([(m1.initial(), m2.initial(), Vec::new())]);
        while let Some((p, q, word)) = queue.pop_front() {
            if !seen.insert((p, q)) {
                continue;
            }
            for x in &alphas {
                if m1.output(p, x) != m2.output(q, x) {
                    let mut w = word.clone();
                    w.push(Input::Alpha(x.clone()));
                    return Some(w);
                }
            }
            for l in &betas {
                match (m1.next_state(p, l), m2.next_state(q, l)) {
                    (Some(p2), Some(q2)) => {
                        let mut w = word.clone();
                        w.push(Input::Beta(l.clone()));
                        queue.push_back((p2, q2, w));
                    }
                    (None, None) => {}
                    _ => {
                        let mut w = word.clone();
                        w.push(Input::Beta(l.clone()));
                        return Some(w);
                    }
                }
            }
        }
        None
    }

    #[test]
    fn toggle_with_swapped_outputs_is_distinguishable_and_not_isomorphic() {
        let m = toggle();
        let mut swapped = toggle();
        swapped.set_emission(0, &"x".into(), 1).unwrap();
        swapped.set_emission(1, &"x".into(), 0).unwrap();
        let w = distinguishing_word(&m, &swapped).expect("machines differ");
        assert_eq!(w, vec![a("x")]);
        assert_ne!(m.run(&w).unwrap(), swapped.run(&w).unwrap());
        assert!(!isomorphic(&m, &swapped));
        assert!(distinguishing_word(&m, &m.trim()).is_none());
    }

    #[test]
    fn trim_drops_unreachable_states() {
        let mut m = toggle();
        let orphan = m.add_state();
        m.set_emission(orphan, &"x".into(), 9).unwrap();
        let t = m.trim();
        assert_eq!(t.num_states(), 2);
        assert!(isomorphic(&m, &t));
    }

    #[test]
    fn json_round_trip_and_validation() {
        let m = toggle();
        let s = m.to_json_string();
        let back = Toy::from_json_str(&s).unwrap();
        assert!(isomorphic(&m, &back));
        assert_eq!(back.to_json_string(), s);

        let mut json = m.to_json();
        json.beta.push("x".into());
        assert!(matches!(Toy::from_json(&json), Err(MachineError::Malformed(_))));

        let mut json = m.to_json();
        json.transitions.push(("s0".into(), "a".into(), "s0".into()));
        assert!(matches!(Toy::from_json(&json), Err(MachineError::Malformed(_))));
    }

    #[test]
    fn dot_lists_edges_and_emissions() {
        let dot = toggle().to_dot("toggle");
        assert!(dot.contains("\"s0\" -> \"s1\" [label=\"a\"]"));
        assert!(dot.contains("x/1"));
    }

    #[test]
    fn tm_and_rm_wrappers_expose_their_maps() {
        let mut core = TmCore::with_states(2);
        let key = LabelSet::single("key");
        core.set_transition(0, &key, 1).unwrap();
        let up = ObsAction::plain("corridor", "up");
        core.set_emission(0, &up, Observation::plain("corridor")).unwrap();
        core.set_emission(1, &up, Observation::plain("cyanroom")).unwrap();
        let tm = TransitionMachine::new(core);
        assert_eq!(tm.delta_q(0, &key), Some(1));
        assert_eq!(
            tm.delta_p(1, &Observation::plain("corridor"), "up"),
            Some(&Observation::plain("cyanroom"))
        );
        assert_eq!(tm.core().state_name(1), "q1");

        let mut core = RmCore::with_states(2);
        let toilet = LabelSet::single("toilet");
        let sit = ObsAction::plain("limegreenroom", "sit");
        core.set_transition(0, &toilet, 1).unwrap();
        core.set_emission(0, &sit, Reward::ZERO).unwrap();
        core.set_emission(1, &sit, Reward::from_int(1)).unwrap();
        let rm = RewardMachine::new(core);
        let lime = Observation::plain("limegreenroom");
        assert_eq!(rm.delta_r(1, &lime, "sit"), Some(Reward::from_int(1)));
        assert_eq!(rm.delta_r(rm.u0(), &lime, "sit"), Some(Reward::ZERO));
    }
}
