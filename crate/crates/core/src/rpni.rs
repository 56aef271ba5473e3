//! DB-RPNI: prefix-tree construction followed by red-blue state merging.
//!
//! The prefix tree transducer (PTT) has one state per distinct β-prefix of
//! the samples; α-inputs record their outputs on the state of the β-prefix
//! they follow. State merging then walks the blue frontier in length-lex
//! order of access strings and tries to fold each blue state into the red
//! states in promotion order. A fold that would put two different outputs on
//! the same (state, α-input) fails and leaves the machine untouched.
//!
//! With a structure-complete sample the result is the minimal machine that
//! reproduces the samples. Runtime is `O(|U|·|L|·T·F)` in that case and
//! `O(T³·F)` in general, where `T` is the PTT size, `|U|` the target size,
//! `|L|` the number of β-inputs and `F` the largest number of α-inputs
//! defined on one state. These bounds are not enforced; [`InferenceStats`]
//! reports `T` and `F` so they can be checked against a run.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::machine::{Alphabet, Dbmm, StateData, StateId, Symbol};
use crate::traces::{Event, SampleSet};

/// Two samples that put different outputs on the same β-prefix and α-input.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleConflict {
    pub first_sample: usize,
    pub second_sample: usize,
    pub input: String,
    pub first_output: String,
    pub second_output: String,
}

impl fmt::Display for SampleConflict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "samples {} and {} disagree on {}: {} vs {}",
            self.first_sample, self.second_sample, self.input, self.first_output, self.second_output
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LearnError {
    #[error("inconsistent samples ({} conflict(s)); first: {}", .0.len(), .0[0])]
    InconsistentSamples(Vec<SampleConflict>),
}

impl LearnError {
    pub fn conflicts(&self) -> &[SampleConflict] {
        match self {
            LearnError::InconsistentSamples(c) => c,
        }
    }
}

/// A tree-shaped machine representing a sample set exactly.
///
/// States are numbered in length-lex order of their access strings.
#[derive(Clone, Debug)]
pub struct PrefixTreeTransducer<A, B, O> {
    machine: Dbmm<A, B, O>,
    parent: Vec<Option<(StateId, u32)>>,
}

impl<A: Symbol, B: Symbol, O: Symbol> PrefixTreeTransducer<A, B, O> {
    pub fn machine(&self) -> &Dbmm<A, B, O> {
        &self.machine
    }

    pub fn into_machine(self) -> Dbmm<A, B, O> {
        self.machine
    }

    pub fn num_states(&self) -> usize {
        self.machine.num_states()
    }

    /// The β-word leading from the root to `q`.
    pub fn access_string(&self, q: StateId) -> Vec<B> {
        let mut word = Vec::new();
        let mut cur = q;
        while let Some((p, b)) = self.parent[cur] {
            word.push(self.machine.beta.get(b).clone());
            cur = p;
        }
        word.reverse();
        word
    }
}

/// Build the prefix tree transducer of `samples`.
///
/// Every pair of samples that disagree on some (β-prefix, α-input) key is
/// reported with both sample indices.
pub fn build_ptt<A: Symbol, B: Symbol, O: Symbol>(
    samples: &SampleSet<A, B, O>,
) -> Result<PrefixTreeTransducer<A, B, O>, LearnError> {
    let mut alpha = Alphabet::default();
    let mut beta = Alphabet::default();
    let mut outputs = Alphabet::default();
    for a in &samples.alpha_alphabet {
        alpha.intern(a);
    }
    for b in &samples.beta_alphabet {
        beta.intern(b);
    }
    let mut states = vec![StateData::default()];
    // (state, α) → index of the sample that first set the output.
    let mut origin: HashMap<(StateId, u32), usize> = HashMap::new();
    let mut conflicts = Vec::new();
    for (idx, sample) in samples.samples.iter().enumerate() {
        let mut q = 0;
        for event in &sample.events {
            match event {
                Event::Alpha(a, o) => {
                    let (ai, oi) = (alpha.intern(a), outputs.intern(o));
                    match states[q].emissions.get(&ai) {
                        None => {
                            states[q].emissions.insert(ai, oi);
                            origin.insert((q, ai), idx);
                        }
                        Some(&prev) if prev != oi => conflicts.push(SampleConflict {
                            first_sample: origin[&(q, ai)],
                            second_sample: idx,
                            input: format!("{a:?}"),
                            first_output: format!("{:?}", outputs.get(prev)),
                            second_output: format!("{o:?}"),
                        }),
                        Some(_) => {}
                    }
                }
                Event::Beta(b) => {
                    let bi = beta.intern(b);
                    q = match states[q].transitions.get(&bi) {
                        Some(&next) => next,
                        None => {
                            states.push(StateData::default());
                            let next = states.len() - 1;
                            states[q].transitions.insert(bi, next);
                            next
                        }
                    };
                }
            }
        }
    }
    if !conflicts.is_empty() {
        return Err(LearnError::InconsistentSamples(conflicts));
    }
    let machine = Dbmm::from_parts(alpha, beta, outputs, states, 0).trim();
    let mut parent = vec![None; machine.num_states()];
    for (q, s) in machine.states.iter().enumerate() {
        for (&b, &t) in &s.transitions {
            parent[t] = Some((q, b));
        }
    }
    Ok(PrefixTreeTransducer { machine, parent })
}

/// Local compatibility: every α-input defined at both states has the same output.
pub fn compatible<A: Symbol, B: Symbol, O: Symbol>(machine: &Dbmm<A, B, O>, u: StateId, v: StateId) -> bool {
    let (eu, ev) = (&machine.states[u].emissions, &machine.states[v].emissions);
    let (small, large) = if eu.len() <= ev.len() { (eu, ev) } else { (ev, eu) };
    small
        .iter()
        .all(|(a, o)| large.get(a).is_none_or(|o2| o2 == o))
}

/// Pending changes of a successful fold.
struct FoldPlan {
    edges: HashMap<(StateId, u32), StateId>,
    emissions: HashMap<(StateId, u32), u32>,
    absorbed: Vec<StateId>,
}

/// Fold the tree rooted at `blue` into `red` without touching `states`.
///
/// `parent_edges` are the edges currently entering `blue`; they are
/// redirected to `red`. Returns `None` if any implied pair of states is
/// locally incompatible.
fn plan_fold(
    states: &[StateData],
    red: StateId,
    blue: StateId,
    parent_edges: &[(StateId, u32)],
) -> Option<FoldPlan> {
    let mut plan = FoldPlan {
        edges: parent_edges.iter().map(|&key| (key, red)).collect(),
        emissions: HashMap::new(),
        absorbed: Vec::new(),
    };
    let mut stack = vec![(red, blue)];
    while let Some((target, source)) = stack.pop() {
        plan.absorbed.push(source);
        for (&a, &o) in &states[source].emissions {
            let existing = plan
                .emissions
                .get(&(target, a))
                .or_else(|| states[target].emissions.get(&a));
            match existing {
                Some(&o2) if o2 != o => return None,
                Some(_) => {}
                None => {
                    plan.emissions.insert((target, a), o);
                }
            }
        }
        for (&b, &child) in &states[source].transitions {
            let existing = plan
                .edges
                .get(&(target, b))
                .or_else(|| states[target].transitions.get(&b))
                .copied();
            match existing {
                Some(next) => stack.push((next, child)),
                None => {
                    plan.edges.insert((target, b), child);
                }
            }
        }
    }
    Some(plan)
}

fn commit(states: &mut [StateData], plan: &FoldPlan) {
    for (&(q, b), &t) in &plan.edges {
        states[q].transitions.insert(b, t);
    }
    for (&(q, a), &o) in &plan.emissions {
        states[q].emissions.insert(a, o);
    }
    for &q in &plan.absorbed {
        states[q] = StateData::default();
    }
}

/// Merge `blue` into `red` together with every pair the merge implies.
///
/// `blue` must root a tree hanging off the rest of the machine (the shape
/// every blue state has during red-blue merging). Returns `None` when some
/// implied pair is incompatible. The result has unreachable states removed
/// and is renumbered in BFS order.
pub fn try_merge<A: Symbol, B: Symbol, O: Symbol>(
    machine: &Dbmm<A, B, O>,
    red: StateId,
    blue: StateId,
) -> Option<Dbmm<A, B, O>> {
    if red == blue {
        return Some(machine.clone());
    }
    let parents: Vec<(StateId, u32)> = machine
        .states
        .iter()
        .enumerate()
        .flat_map(|(q, s)| {
            s.transitions
                .iter()
                .filter(move |(_, &t)| t == blue)
                .map(move |(&b, _)| (q, b))
        })
        .collect();
    let plan = plan_fold(&machine.states, red, blue, &parents)?;
    let mut states = machine.states.clone();
    commit(&mut states, &plan);
    let initial = if machine.initial == blue { red } else { machine.initial };
    Some(machine.with_state_data(states, initial).trim())
}

/// Red states in promotion order and the blue frontier.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MergeFrontier {
    pub red: Vec<StateId>,
    /// Blue state → the red state and β-input id of its unique incoming edge.
    pub blue: BTreeMap<StateId, (StateId, u32)>,
}

impl MergeFrontier {
    fn new(states: &[StateData], root: StateId) -> (Self, Vec<bool>) {
        let mut is_red = vec![false; states.len()];
        is_red[root] = true;
        let mut f = MergeFrontier {
            red: vec![root],
            blue: BTreeMap::new(),
        };
        f.add_children(states, root, &is_red);
        (f, is_red)
    }

    fn add_children(&mut self, states: &[StateData], q: StateId, is_red: &[bool]) {
        for (&b, &t) in &states[q].transitions {
            if !is_red[t] {
                self.blue.insert(t, (q, b));
            }
        }
    }
}

/// Counters of one inference run.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InferenceStats {
    /// `T`: states of the prefix tree transducer.
    pub ptt_states: usize,
    pub final_states: usize,
    pub merge_attempts: usize,
    pub merges: usize,
    pub promotions: usize,
    /// `F`: most α-inputs defined at one PTT state.
    pub max_alpha_per_state: usize,
    pub beta_inputs: usize,
}

/// Red-blue state merging over a prefix tree transducer.
pub fn state_merging<A: Symbol, B: Symbol, O: Symbol>(
    ptt: &PrefixTreeTransducer<A, B, O>,
) -> (Dbmm<A, B, O>, InferenceStats) {
    let machine = &ptt.machine;
    let mut states = machine.states.clone();
    let mut stats = InferenceStats {
        ptt_states: states.len(),
        max_alpha_per_state: machine.max_defined_alpha(),
        beta_inputs: machine.beta.len(),
        ..Default::default()
    };
    let (mut frontier, mut is_red) = MergeFrontier::new(&states, machine.initial);
    while let Some((&blue, &(parent, label))) = frontier.blue.iter().next() {
        frontier.blue.remove(&blue);
        let mut merged = false;
        for &red in &frontier.red {
            stats.merge_attempts += 1;
            if let Some(plan) = plan_fold(&states, red, blue, &[(parent, label)]) {
                commit(&mut states, &plan);
                // Subtrees adopted by red states join the frontier.
                for (&(q, b), &t) in &plan.edges {
                    if is_red[q] && !is_red[t] {
                        frontier.blue.insert(t, (q, b));
                    }
                }
                merged = true;
                stats.merges += 1;
                break;
            }
        }
        if !merged {
            is_red[blue] = true;
            frontier.red.push(blue);
            frontier.add_children(&states, blue, &is_red);
            stats.promotions += 1;
        }
    }
    let result = machine.with_state_data(states, machine.initial).trim();
    stats.final_states = result.num_states();
    (result, stats)
}

/// Infer a machine reproducing every sample.
pub fn infer<A: Symbol, B: Symbol, O: Symbol>(
    samples: &SampleSet<A, B, O>,
) -> Result<Dbmm<A, B, O>, LearnError> {
    infer_with_stats(samples).map(|(m, _)| m)
}

pub fn infer_with_stats<A: Symbol, B: Symbol, O: Symbol>(
    samples: &SampleSet<A, B, O>,
) -> Result<(Dbmm<A, B, O>, InferenceStats), LearnError> {
    let ptt = build_ptt(samples)?;
    Ok(state_merging(&ptt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::machine::isomorphic;
    use crate::machine::tests::{toggle, Toy};
    use crate::traces::Sample;

    type Set = SampleSet<String, String, i64>;

    /// `spec` alternates α outputs and β labels: "x0 a x1" style tokens.
    fn sample(tokens: &str) -> Sample<String, String, i64> {
        Sample {
            events: tokens
                .split_whitespace()
                .map(|t| {
                    let (sym, out) = t.split_at(1);
                    if out.is_empty() {
                        Event::Beta(sym.to_owned())
                    } else {
                        Event::Alpha(sym.to_owned(), out.parse().unwrap())
                    }
                })
                .collect(),
        }
    }

    #[test]
    fn ptt_has_one_state_per_beta_prefix() {
        let ptt = build_ptt(&Set::new(vec![sample("x0 a x1 b x0")])).unwrap();
        assert_eq!(ptt.num_states(), 3);
        assert_eq!(ptt.access_string(2), vec!["a".to_string(), "b".to_string()]);
    }

    #[test]
    fn ptt_without_edge_is_undefined() {
        let ptt = build_ptt(&Set::new(vec![sample("x0 a x0")])).unwrap();
        let mut m = ptt.into_machine();
        m.declare_beta(&"b".into());
        assert_eq!(m.step_beta(0, &"b".into()).unwrap(), None);
    }

    #[test]
    fn ptt_rejects_inconsistent_samples_with_indices() {
        let err = build_ptt(&Set::new(vec![sample("x0"), sample("y1"), sample("x1")])).unwrap_err();
        let c = &err.conflicts()[0];
        assert_eq!((c.first_sample, c.second_sample), (0, 2));
    }

    #[test]
    fn ptt_states_are_length_lex_ordered() {
        let ptt = build_ptt(&Set::new(vec![sample("x0 b x0 a x0"), sample("x0 a x0")])).unwrap();
        let words: Vec<Vec<String>> = (0..ptt.num_states()).map(|q| ptt.access_string(q)).collect();
        let mut sorted = words.clone();
        sorted.sort_by(|u, v| u.len().cmp(&v.len()).then(u.cmp(v)));
        assert_eq!(words, sorted);
    }

    #[test]
    fn compatibility_cases() {
        let mut m = Toy::with_states(2);
        m.set_emission(0, &"x".into(), 0).unwrap();
        m.set_emission(1, &"x".into(), 0).unwrap();
        assert!(compatible(&m, 0, 1));
        m.set_emission(1, &"x".into(), 1).unwrap();
        assert!(!compatible(&m, 0, 1));
        let mut m = Toy::with_states(2);
        m.set_emission(0, &"x".into(), 0).unwrap();
        m.set_emission(1, &"y".into(), 1).unwrap();
        assert!(compatible(&m, 0, 1));
    }

    #[test]
    fn fold_into_toggle() {
        // root -a-> s1 -a-> s2 with x outputs 0, 1, 0.
        let ptt = build_ptt(&Set::new(vec![sample("x0 a x1 a x0")])).unwrap();
        let m = ptt.machine();
        let merged = try_merge(m, 0, 2).expect("root and aa agree on x");
        assert_eq!(merged.num_states(), 2);
        assert!(isomorphic(&merged, &toggle()));
        assert!(try_merge(m, 0, 1).is_none());
        // the failed attempt did not touch the input
        assert_eq!(m.num_states(), 3);
    }

    #[test]
    fn merge_with_itself_is_identity() {
        let ptt = build_ptt(&Set::new(vec![sample("x0")])).unwrap();
        let m = try_merge(ptt.machine(), 0, 0).unwrap();
        assert!(isomorphic(&m, ptt.machine()));
    }

    #[test]
    fn merging_learns_toggle() {
        let set = Set::new(vec![sample("x0 a x1 a x0 a x1"), sample("a x1 a x0")]);
        let (m, stats) = infer_with_stats(&set).unwrap();
        assert!(isomorphic(&m, &toggle()));
        assert!(stats.merges + stats.promotions <= stats.ptt_states);
    }

    #[test]
    fn uniform_outputs_collapse_to_one_state() {
        let set = Set::new(vec![sample("x0 a x0 b x0"), sample("b x0 a x0 a")]);
        let m = infer(&set).unwrap();
        assert_eq!(m.num_states(), 1);
    }

    #[test]
    fn empty_sample_set_gives_single_state() {
        let m = infer(&Set::default()).unwrap();
        assert_eq!(m.num_states(), 1);
        assert_eq!(m.num_transitions(), 0);
        assert_eq!(m.num_emissions(), 0);
    }

    #[test]
    fn nondeterminism_during_fold_is_merged_recursively() {
        // Merging "b" into the root forces its a-child into the root's a-child.
        let set = Set::new(vec![sample("x0 a y1"), sample("b x0 a z2")]);
        let (m, _) = infer_with_stats(&set).unwrap();
        for s in &set.samples {
            assert_eq!(m.run(&s.inputs()).unwrap(), s.alpha_outputs());
        }
        assert_eq!(m.num_states(), 1);
    }
}
