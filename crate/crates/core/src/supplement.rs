//! Observation supplement: pair each observation with the transition-machine
//! state it was made in, so that reward inference sees Markovian inputs.
//!
//! Step `i` is paired with the state reached after consuming
//! `l_0 … l_{i-1}`; `l_i` itself is consumed after recording.

use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::machine::{StateId, TransitionMachine};
use crate::traces::{LabeledTrace, TraceStep};

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize)]
pub enum SupplementError {
    #[error("trace {trace}, step {step}: transition machine has no transition from {state} on {label}")]
    UndefinedTransition {
        trace: usize,
        step: usize,
        state: String,
        label: String,
    },
    #[error("{} trace(s) could not be supplemented; first: {}", .0.len(), .0[0])]
    Corpus(Vec<SupplementError>),
}

/// A trace whose observations carry transition-machine state names.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AugmentedTrace {
    trace: LabeledTrace,
    states: Vec<StateId>,
}

impl AugmentedTrace {
    pub fn trace(&self) -> &LabeledTrace {
        &self.trace
    }

    pub fn into_trace(self) -> LabeledTrace {
        self.trace
    }

    /// The TM state paired with each step.
    pub fn states(&self) -> &[StateId] {
        &self.states
    }

    /// Drop the machine-state component of every observation.
    pub fn project(&self) -> LabeledTrace {
        let steps = self
            .trace
            .steps()
            .iter()
            .map(|s| TraceStep {
                obs: s.obs.project(),
                ..s.clone()
            })
            .collect();
        LabeledTrace::new(steps).expect("non-empty by construction")
    }
}

fn supplement_indexed(
    tm: &TransitionMachine,
    trace: &LabeledTrace,
    index: usize,
) -> Result<AugmentedTrace, SupplementError> {
    let n = trace.len();
    let names: Vec<Arc<str>> = (0..tm.states()).map(|q| tm.core().state_name(q).into()).collect();
    let mut q = tm.q0();
    let mut steps = Vec::with_capacity(n);
    let mut states = Vec::with_capacity(n);
    for (i, step) in trace.steps().iter().enumerate() {
        steps.push(TraceStep {
            obs: step.obs.augment(names[q].clone()),
            ..step.clone()
        });
        states.push(q);
        // The final label has no step left to influence.
        if i + 1 < n {
            q = tm
                .delta_q(q, &step.label)
                .ok_or_else(|| SupplementError::UndefinedTransition {
                    trace: index,
                    step: i,
                    state: tm.core().state_name(q),
                    label: step.label.to_string(),
                })?;
        }
    }
    Ok(AugmentedTrace {
        trace: LabeledTrace::new(steps).expect("non-empty by construction"),
        states,
    })
}

pub fn supplement_trace(
    tm: &TransitionMachine,
    trace: &LabeledTrace,
) -> Result<AugmentedTrace, SupplementError> {
    supplement_indexed(tm, trace, 0)
}

/// Supplement every trace. All failing traces are reported.
pub fn supplement_corpus(
    tm: &TransitionMachine,
    traces: &[LabeledTrace],
) -> Result<Vec<AugmentedTrace>, SupplementError> {
    let results: Vec<_> = traces
        .par_iter()
        .enumerate()
        .map(|(i, t)| supplement_indexed(tm, t, i))
        .collect();
    let mut out = Vec::with_capacity(results.len());
    let mut errors = Vec::new();
    for r in results {
        match r {
            Ok(t) => out.push(t),
            Err(e) => errors.push(e),
        }
    }
    if errors.is_empty() {
        Ok(out)
    } else {
        Err(SupplementError::Corpus(errors))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::machine::TmCore;
    use crate::symbols::{LabelSet, Observation, Reward};

    fn step(label: &[&str], obs: &str) -> TraceStep {
        TraceStep::new(
            LabelSet::new(label.iter().copied()),
            Observation::plain(obs),
            "up",
            Reward::ZERO,
        )
    }

    /// Two states; {key} toggles, ∅ stays.
    fn key_toggle() -> TransitionMachine {
        let mut m = TmCore::with_states(2);
        let key = LabelSet::single("key");
        let none = LabelSet::empty();
        m.set_transition(0, &key, 1).unwrap();
        m.set_transition(1, &key, 0).unwrap();
        m.set_transition(0, &none, 0).unwrap();
        m.set_transition(1, &none, 1).unwrap();
        TransitionMachine::new(m)
    }

    #[test]
    fn single_step_pairs_with_initial_state() {
        let t = LabeledTrace::new(vec![step(&["key"], "a")]).unwrap();
        let aug = supplement_trace(&key_toggle(), &t).unwrap();
        assert_eq!(aug.states(), [0]);
        assert_eq!(aug.trace().steps()[0].obs, Observation::plain("a").augment("q0"));
    }

    #[test]
    fn states_lag_labels_by_one_step() {
        let t = LabeledTrace::new(vec![step(&[], "a"), step(&["key"], "b"), step(&[], "c")]).unwrap();
        let aug = supplement_trace(&key_toggle(), &t).unwrap();
        assert_eq!(aug.states(), [0, 0, 1]);
        let names: Vec<_> = aug.trace().steps().iter().map(|s| s.obs.clone()).collect();
        assert_eq!(
            names,
            [
                Observation::plain("a").augment("q0"),
                Observation::plain("b").augment("q0"),
                Observation::plain("c").augment("q1"),
            ]
        );
        assert_eq!(aug.project(), t);
    }

    #[test]
    fn unknown_label_reports_step() {
        let t = LabeledTrace::new(vec![step(&[], "a"), step(&["sofa"], "b"), step(&[], "c")]).unwrap();
        let err = supplement_corpus(&key_toggle(), &[t.clone(), t]).unwrap_err();
        let SupplementError::Corpus(errs) = err else { panic!() };
        assert_eq!(errs.len(), 2);
        assert!(matches!(errs[1], SupplementError::UndefinedTransition { trace: 1, step: 1, .. }));
    }

    #[test]
    fn final_label_is_never_consumed() {
        let t = LabeledTrace::new(vec![step(&[], "a"), step(&["sofa"], "b")]).unwrap();
        assert!(supplement_trace(&key_toggle(), &t).is_ok());
    }

    #[test]
    fn empty_corpus() {
        assert!(supplement_corpus(&key_toggle(), &[]).unwrap().is_empty());
    }
}
