//! Independent verifiers: exhaustive minimal-machine search, resolvence
//! checking against an environment and structure-completeness checking.
//!
//! Nothing here shares code with the learner beyond the machine type itself;
//! the prefix tree is rebuilt from scratch.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::hash::Hash;

use serde::Serialize;
use thiserror::Error;

use crate::envs::DetPomdp;
use crate::machine::{Dbmm, StateId, Symbol};
use crate::symbols::Observation;
use crate::traces::{Event, SampleSet};
use crate::{RewardMachine, TransitionMachine};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OracleError {
    #[error("partition search exceeded its budget of {0} assignments")]
    SearchBudgetExceeded(u64),
    #[error("history enumeration exceeded its budget of {0} nodes")]
    DepthBudgetExceeded(usize),
    #[error("samples {0} and {1} disagree on the same prefix and α-input")]
    Inconsistent(usize, usize),
}

fn invert<T>(map: HashMap<T, usize>) -> Vec<T> {
    let mut v: Vec<(usize, T)> = map.into_iter().map(|(s, i)| (i, s)).collect();
    v.sort_by_key(|(i, _)| *i);
    v.into_iter().map(|(_, s)| s).collect()
}

fn intern<T: Clone + Eq + Hash>(map: &mut HashMap<T, usize>, sym: &T) -> usize {
    let n = map.len();
    *map.entry(sym.clone()).or_insert(n)
}

/// Prefix tree over β-projections, symbols interned to dense ids.
struct Tree<A, B, O> {
    alphas: Vec<A>,
    betas: Vec<B>,
    outputs: Vec<O>,
    children: Vec<BTreeMap<usize, usize>>,
    emit: Vec<BTreeMap<usize, usize>>,
    parent: Vec<Option<(usize, usize)>>,
}

impl<A: Symbol, B: Symbol, O: Symbol> Tree<A, B, O> {
    fn build(samples: &SampleSet<A, B, O>) -> Result<Self, OracleError> {
        let (mut ai, mut bi, mut oi) = (HashMap::new(), HashMap::new(), HashMap::new());
        let mut children = vec![BTreeMap::new()];
        let mut emit: Vec<BTreeMap<usize, usize>> = vec![BTreeMap::new()];
        let mut parent = vec![None];
        let mut first_writer: HashMap<(usize, usize), usize> = HashMap::new();
        for (k, s) in samples.samples.iter().enumerate() {
            let mut v = 0;
            for e in &s.events {
                match e {
                    Event::Beta(b) => {
                        let b = intern(&mut bi, b);
                        v = match children[v].get(&b) {
                            Some(&c) => c,
                            None => {
                                children.push(BTreeMap::new());
                                emit.push(BTreeMap::new());
                                parent.push(Some((v, b)));
                                let c = children.len() - 1;
                                children[v].insert(b, c);
                                c
                            }
                        };
                    }
                    Event::Alpha(a, o) => {
                        let (a, o) = (intern(&mut ai, a), intern(&mut oi, o));
                        match emit[v].get(&a) {
                            Some(&prev) if prev != o => {
                                return Err(OracleError::Inconsistent(first_writer[&(v, a)], k));
                            }
                            Some(_) => {}
                            None => {
                                emit[v].insert(a, o);
                                first_writer.insert((v, a), k);
                            }
                        }
                    }
                }
            }
        }
        Ok(Tree {
            alphas: invert(ai),
            betas: invert(bi),
            outputs: invert(oi),
            children,
            emit,
            parent,
        })
    }

    fn len(&self) -> usize {
        self.children.len()
    }

    /// Node ids in breadth-first order from the root.
    fn bfs(&self) -> Vec<usize> {
        let mut order = vec![0];
        let mut i = 0;
        while i < order.len() {
            let v = order[i];
            order.extend(self.children[v].values().copied());
            i += 1;
        }
        order
    }

    fn conflict(&self, u: usize, v: usize) -> bool {
        self.emit[u]
            .iter()
            .any(|(a, o)| self.emit[v].get(a).is_some_and(|p| p != o))
    }

    fn access(&self, mut v: usize) -> Vec<B> {
        let mut w = Vec::new();
        while let Some((p, b)) = self.parent[v] {
            w.push(self.betas[b].clone());
            v = p;
        }
        w.reverse();
        w
    }
}

enum Undo {
    Output(usize, usize),
    Trans(usize, usize),
}

struct Search<'t, A, B, O> {
    tree: &'t Tree<A, B, O>,
    order: Vec<usize>,
    max_classes: usize,
    class_of: Vec<usize>,
    used: usize,
    out: Vec<HashMap<usize, usize>>,
    trans: Vec<HashMap<usize, usize>>,
    undo: Vec<Undo>,
    steps: u64,
    budget: u64,
}

impl<A: Symbol, B: Symbol, O: Symbol> Search<'_, A, B, O> {
    /// Put node `v` into class `c`, recording every new fact; false when an
    /// output clashes (the facts recorded so far stay on the undo log).
    fn place(&mut self, v: usize, c: usize) -> bool {
        self.class_of[v] = c;
        for (&a, &o) in &self.tree.emit[v] {
            match self.out[c].get(&a) {
                Some(&p) if p != o => return false,
                Some(_) => {}
                None => {
                    self.out[c].insert(a, o);
                    self.undo.push(Undo::Output(c, a));
                }
            }
        }
        true
    }

    fn rollback(&mut self, mark: usize) {
        while self.undo.len() > mark {
            match self.undo.pop().expect("non-empty") {
                Undo::Output(c, a) => {
                    self.out[c].remove(&a);
                }
                Undo::Trans(c, b) => {
                    self.trans[c].remove(&b);
                }
            }
        }
    }

    /// Assign classes to `order[pos..]`. Forced placements run in a loop;
    /// recursion happens only where a class transition is still open.
    fn run(&mut self, mut pos: usize) -> Result<bool, OracleError> {
        let mark = self.undo.len();
        let used_before = self.used;
        while pos < self.order.len() {
            self.steps += 1;
            if self.steps > self.budget {
                return Err(OracleError::SearchBudgetExceeded(self.budget));
            }
            let v = self.order[pos];
            let (p, b) = self.tree.parent[v].expect("only the root has no parent");
            let cp = self.class_of[p];
            if let Some(&c) = self.trans[cp].get(&b) {
                if !self.place(v, c) {
                    self.rollback(mark);
                    self.used = used_before;
                    return Ok(false);
                }
                pos += 1;
                continue;
            }
            let limit = (self.used + 1).min(self.max_classes);
            for c in 0..limit {
                let inner = self.undo.len();
                let fresh = c == self.used;
                if fresh {
                    self.used += 1;
                }
                self.trans[cp].insert(b, c);
                self.undo.push(Undo::Trans(cp, b));
                if self.place(v, c) && self.run(pos + 1)? {
                    return Ok(true);
                }
                self.rollback(inner);
                if fresh {
                    self.used -= 1;
                }
            }
            self.rollback(mark);
            self.used = used_before;
            return Ok(false);
        }
        Ok(true)
    }

    fn machine(&self) -> Dbmm<A, B, O> {
        let mut m = Dbmm::with_states(self.used);
        for a in &self.tree.alphas {
            m.declare_alpha(a);
        }
        for b in &self.tree.betas {
            m.declare_beta(b);
        }
        for c in 0..self.used {
            for (&a, &o) in &self.out[c] {
                m.set_emission(c, &self.tree.alphas[a], self.tree.outputs[o].clone())
                    .expect("class in range");
            }
            for (&b, &t) in &self.trans[c] {
                m.set_transition(c, &self.tree.betas[b], t).expect("class in range");
            }
        }
        m.trim()
    }
}

/// Default cap on node placements in [`brute_force_minimal`].
pub const SEARCH_BUDGET: u64 = 200_000_000;

/// Smallest machine with at most `max_states` states reproducing every
/// sample, found by exhaustive search over canonical partitions of the
/// prefix tree. `None` when no such machine exists.
pub fn brute_force_minimal<A: Symbol, B: Symbol, O: Symbol>(
    samples: &SampleSet<A, B, O>,
    max_states: usize,
) -> Result<Option<Dbmm<A, B, O>>, OracleError> {
    brute_force_minimal_with_budget(samples, max_states, SEARCH_BUDGET)
}

pub fn brute_force_minimal_with_budget<A: Symbol, B: Symbol, O: Symbol>(
    samples: &SampleSet<A, B, O>,
    max_states: usize,
    budget: u64,
) -> Result<Option<Dbmm<A, B, O>>, OracleError> {
    let tree = Tree::build(samples)?;
    let order = tree.bfs();
    let mut steps = 0;
    for m in 1..=max_states {
        let mut search = Search {
            tree: &tree,
            order: order.clone(),
            max_classes: m,
            class_of: vec![0; tree.len()],
            used: 1,
            out: vec![HashMap::new(); m],
            trans: vec![HashMap::new(); m],
            undo: Vec::new(),
            steps,
            budget,
        };
        let ok = search.place(0, 0) && search.run(1)?;
        if ok {
            return Ok(Some(search.machine()));
        }
        steps = search.steps;
    }
    Ok(None)
}

/// The machine a resolvence check runs against.
#[derive(Clone, Copy, Debug)]
pub enum MachineRef<'a> {
    Tm(&'a TransitionMachine),
    /// A reward machine; with `supplement`, its observations are paired with
    /// the states of that transition machine.
    Rm {
        rm: &'a RewardMachine,
        supplement: Option<&'a TransitionMachine>,
    },
}

/// A feasible history on which the machine mispredicts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Counterexample {
    /// Actions leading to the offending step, then the offending action.
    pub actions: Vec<String>,
    /// Observations along the history, one per action.
    pub observations: Vec<String>,
    pub expected: String,
    /// None when the machine has no prediction or no transition.
    pub predicted: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ResolventReport {
    pub resolvent: bool,
    pub explored: usize,
    pub counterexample: Option<Counterexample>,
}

/// Default cap on (state, machine state) pairs in [`check_resolvent`].
pub const HISTORY_BUDGET: usize = 20_000_000;

/// Check the machine's predictions on every feasible history of up to
/// `depth` steps. Histories are enumerated breadth-first, memoized on the
/// pair (environment state, machine states).
///
/// A transition machine is not asked about actions that end the episode:
/// no successor observation exists for them.
pub fn check_resolvent(machine: MachineRef<'_>, env: &DetPomdp, depth: usize) -> Result<ResolventReport, OracleError> {
    check_resolvent_with_budget(machine, env, depth, HISTORY_BUDGET)
}

pub fn check_resolvent_with_budget(
    machine: MachineRef<'_>,
    env: &DetPomdp,
    depth: usize,
    budget: usize,
) -> Result<ResolventReport, OracleError> {
    // Node: (env state, TM state, RM state); unused components stay 0.
    let (tm, rm) = match machine {
        MachineRef::Tm(tm) => (Some(tm), None),
        MachineRef::Rm { rm, supplement } => (supplement, Some(rm)),
    };
    let q0 = tm.map_or(0, TransitionMachine::q0);
    let u0 = rm.map_or(0, RewardMachine::u0);
    let root = (env.initial(), q0, u0);
    // (env state, TM state, RM state), parent link (node, action), depth.
    type Node = ((usize, StateId, StateId), Option<(usize, usize)>, usize);
    let mut nodes: Vec<Node> = vec![(root, None, 0)];
    let mut seen: HashMap<(usize, StateId, StateId), usize> = HashMap::from([(root, 0)]);
    let mut queue = VecDeque::from([0usize]);

    let history = |nodes: &[Node], at: usize, a: usize| {
        let mut actions = vec![env.actions()[a].to_string()];
        let mut observations = vec![env.observe(nodes[at].0 .0).to_string()];
        let mut cur = at;
        while let Some((p, pa)) = nodes[cur].1 {
            actions.push(env.actions()[pa].to_string());
            observations.push(env.observe(nodes[p].0 .0).to_string());
            cur = p;
        }
        actions.reverse();
        observations.reverse();
        (actions, observations)
    };
    let fail = |nodes: &Vec<_>, at, a, expected: String, predicted: Option<String>| {
        let (actions, observations) = history(nodes, at, a);
        ResolventReport {
            resolvent: false,
            explored: nodes.len(),
            counterexample: Some(Counterexample {
                actions,
                observations,
                expected,
                predicted,
            }),
        }
    };

    while let Some(idx) = queue.pop_front() {
        let ((s, q, u), _, d) = nodes[idx];
        if d >= depth {
            continue;
        }
        let obs = env.observe(s);
        let label = env.label(s);
        for a in 0..env.num_actions() {
            let action = &env.actions()[a];
            let ends = env.ends(s, a);
            match (machine, rm) {
                (MachineRef::Tm(tm), _) => {
                    if ends {
                        continue;
                    }
                    let expected = env.observe(env.successor(s, a));
                    let predicted = tm.delta_p(q, obs, action);
                    if predicted != Some(expected) {
                        return Ok(fail(&nodes, idx, a, expected.to_string(), predicted.map(Observation::to_string)));
                    }
                }
                (_, Some(rm)) => {
                    let seen_obs = match tm {
                        Some(tm) => obs.augment(tm.core().state_name(q)),
                        None => obs.clone(),
                    };
                    let expected = env.reward(s, a);
                    let predicted = rm.delta_r(u, &seen_obs, action);
                    if predicted != Some(expected) {
                        return Ok(fail(&nodes, idx, a, expected.to_string(), predicted.map(|r| r.to_string())));
                    }
                }
                _ => unreachable!("reward check always has a reward machine"),
            }
            if ends || d + 1 >= depth {
                continue;
            }
            let q2 = match tm {
                Some(tm) => tm.delta_q(q, label),
                None => Some(0),
            };
            let u2 = match rm {
                Some(rm) => rm.delta_u(u, label),
                None => Some(0),
            };
            let (Some(q2), Some(u2)) = (q2, u2) else {
                return Ok(fail(&nodes, idx, a, format!("a transition on {label}"), None));
            };
            let key = (env.successor(s, a), q2, u2);
            if let std::collections::hash_map::Entry::Vacant(slot) = seen.entry(key) {
                if nodes.len() >= budget {
                    return Err(OracleError::DepthBudgetExceeded(budget));
                }
                slot.insert(nodes.len());
                nodes.push((key, Some((idx, a)), d + 1));
                queue.push_back(nodes.len() - 1);
            }
        }
    }
    Ok(ResolventReport {
        resolvent: true,
        explored: nodes.len(),
        counterexample: None,
    })
}

/// The three structure-completeness conditions evaluated against a target.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct CompletenessReport {
    pub state_coverage: bool,
    pub uncovered_states: Vec<StateId>,
    pub transition_coverage: bool,
    /// (state, β-input) pairs of the target never exercised by the samples.
    pub uncovered_transitions: Vec<(StateId, String)>,
    pub conflict_convergence: bool,
    /// Some β-prefix pairs reaching distinct target states without
    /// conflicting evidence (truncated to a few examples).
    pub non_conflicting_pairs: Vec<(String, String)>,
}

impl CompletenessReport {
    pub fn complete(&self) -> bool {
        self.state_coverage && self.transition_coverage && self.conflict_convergence
    }
}

const REPORTED_PAIRS: usize = 16;

/// Evaluate state coverage, transition coverage and conflict convergence of
/// `samples` with respect to `target`.
///
/// Two prefixes conflict when the samples pin an output for a common α-input
/// after both β-projections and the outputs differ. Prefixes the target
/// cannot follow are ignored. An empty sample set fails all three.
pub fn check_structure_complete<A: Symbol, B: Symbol, O: Symbol>(
    samples: &SampleSet<A, B, O>,
    target: &Dbmm<A, B, O>,
) -> Result<CompletenessReport, OracleError> {
    if samples.is_empty() {
        return Ok(CompletenessReport {
            uncovered_states: (0..target.num_states()).collect(),
            uncovered_transitions: target.transitions().map(|(q, b, _)| (q, format!("{b:?}"))).collect(),
            ..Default::default()
        });
    }
    let tree = Tree::build(samples)?;
    let mut state: Vec<Option<StateId>> = vec![None; tree.len()];
    state[0] = Some(target.initial());
    for v in tree.bfs().into_iter().skip(1) {
        let (p, b) = tree.parent[v].expect("non-root");
        state[v] = state[p].and_then(|q| target.next_state(q, &tree.betas[b]));
    }

    let mut covered = vec![false; target.num_states()];
    let mut exercised = std::collections::HashSet::new();
    for (v, q) in state.iter().enumerate() {
        if let &Some(q) = q {
            covered[q] = true;
            for &b in tree.children[v].keys() {
                exercised.insert((q, tree.betas[b].clone()));
            }
        }
    }
    let uncovered_states: Vec<StateId> = (0..target.num_states()).filter(|&q| !covered[q]).collect();
    let uncovered_transitions: Vec<(StateId, String)> = target
        .transitions()
        .filter(|(q, b, _)| !exercised.contains(&(*q, (*b).clone())))
        .map(|(q, b, _)| (q, format!("{b:?}")))
        .collect();

    let mut by_state: BTreeMap<StateId, Vec<usize>> = BTreeMap::new();
    for (v, q) in state.iter().enumerate() {
        if let Some(q) = q {
            by_state.entry(*q).or_default().push(v);
        }
    }
    let groups: Vec<&Vec<usize>> = by_state.values().collect();
    let mut convergent = true;
    let mut pairs = Vec::new();
    'outer: for (i, g1) in groups.iter().enumerate() {
        for g2 in &groups[i + 1..] {
            for &u in g1.iter() {
                for &v in g2.iter() {
                    if !tree.conflict(u, v) {
                        convergent = false;
                        pairs.push((format!("{:?}", tree.access(u)), format!("{:?}", tree.access(v))));
                        if pairs.len() >= REPORTED_PAIRS {
                            break 'outer;
                        }
                    }
                }
            }
        }
    }
    Ok(CompletenessReport {
        state_coverage: uncovered_states.is_empty(),
        uncovered_states,
        transition_coverage: uncovered_transitions.is_empty(),
        uncovered_transitions,
        conflict_convergence: convergent,
        non_conflicting_pairs: pairs,
    })
}
