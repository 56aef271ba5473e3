//! Sample-set reduction rules and the matching recovery steps.
//!
//! * Redundant α-inputs: an α-input whose output is the same at every
//!   occurrence in the sample set carries no information about the state.
//!   It is removed before inference and re-attached to every state after.
//! * Trivial β-inputs: β-inputs known to cause no state change (by default
//!   the empty label set). They are removed before inference and restored as
//!   self-loops on every state.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::machine::{Dbmm, StateId, Symbol};
use crate::traces::{Event, Sample, SampleSet};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PreprocessError {
    #[error("trivial β-input {0} is not in the sample alphabet")]
    UnknownBeta(String),
    #[error("state {state} already emits {existing} on {input}, recorded constant is {recorded}")]
    Conflict {
        state: StateId,
        input: String,
        existing: String,
        recorded: String,
    },
}

/// What the reduction rules removed: the constant-output map ℛ and the set
/// of trivial β-inputs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReductionRecord<A, B, O> {
    pub redundant_alpha: Vec<(A, O)>,
    pub trivial_beta: Vec<B>,
}

impl<A, B, O> Default for ReductionRecord<A, B, O> {
    fn default() -> Self {
        ReductionRecord {
            redundant_alpha: Vec::new(),
            trivial_beta: Vec::new(),
        }
    }
}

impl<A: Symbol, B: Symbol, O: Symbol> ReductionRecord<A, B, O> {
    pub fn is_empty(&self) -> bool {
        self.redundant_alpha.is_empty() && self.trivial_beta.is_empty()
    }

    pub fn constant_for(&self, input: &A) -> Option<&O> {
        self.redundant_alpha
            .binary_search_by(|(a, _)| a.cmp(input))
            .ok()
            .map(|i| &self.redundant_alpha[i].1)
    }

    /// Union of two records, kept sorted.
    pub fn merged(&self, other: &Self) -> Self {
        let alpha: BTreeMap<A, O> = self
            .redundant_alpha
            .iter()
            .chain(&other.redundant_alpha)
            .cloned()
            .collect();
        let beta: BTreeSet<B> = self
            .trivial_beta
            .iter()
            .chain(&other.trivial_beta)
            .cloned()
            .collect();
        ReductionRecord {
            redundant_alpha: alpha.into_iter().collect(),
            trivial_beta: beta.into_iter().collect(),
        }
    }
}

/// Remove every α-input whose observed output never varies.
///
/// An α-input seen only once counts as constant.
pub fn remove_redundant_alpha<A: Symbol, B: Symbol, O: Symbol>(
    samples: &SampleSet<A, B, O>,
) -> (SampleSet<A, B, O>, ReductionRecord<A, B, O>) {
    // None marks an α-input seen with two different outputs.
    let mut census: HashMap<&A, Option<&O>> = HashMap::new();
    for s in &samples.samples {
        for e in &s.events {
            if let Event::Alpha(a, o) = e {
                census
                    .entry(a)
                    .and_modify(|seen| {
                        if seen.is_some_and(|prev| prev != o) {
                            *seen = None;
                        }
                    })
                    .or_insert(Some(o));
            }
        }
    }
    let constant: BTreeMap<A, O> = census
        .into_iter()
        .filter_map(|(a, o)| o.map(|o| (a.clone(), o.clone())))
        .collect();
    let record = ReductionRecord {
        redundant_alpha: constant.iter().map(|(a, o)| (a.clone(), o.clone())).collect(),
        trivial_beta: Vec::new(),
    };
    let reduced = samples
        .samples
        .iter()
        .map(|s| Sample {
            events: s
                .events
                .iter()
                .filter(|e| !matches!(e, Event::Alpha(a, _) if constant.contains_key(a)))
                .cloned()
                .collect(),
        })
        .collect();
    let out = SampleSet {
        samples: reduced,
        alpha_alphabet: samples
            .alpha_alphabet
            .iter()
            .filter(|a| !constant.contains_key(a))
            .cloned()
            .collect(),
        beta_alphabet: samples.beta_alphabet.clone(),
        reduction_log: samples.reduction_log.merged(&record),
    };
    (out, record)
}

/// Set `𝒢(q, i) = ℛ(i)` on every state for every recorded `i`.
pub fn restore_redundant_alpha<A: Symbol, B: Symbol, O: Symbol>(
    machine: &Dbmm<A, B, O>,
    record: &ReductionRecord<A, B, O>,
) -> Result<Dbmm<A, B, O>, PreprocessError> {
    let mut m = machine.clone();
    for (input, constant) in &record.redundant_alpha {
        m.declare_alpha(input);
        for q in 0..m.num_states() {
            match m.output(q, input) {
                Some(existing) if existing != constant => {
                    return Err(PreprocessError::Conflict {
                        state: q,
                        input: format!("{input:?}"),
                        existing: format!("{existing:?}"),
                        recorded: format!("{constant:?}"),
                    })
                }
                Some(_) => {}
                None => m
                    .set_emission(q, input, constant.clone())
                    .expect("state index in range"),
            }
        }
    }
    Ok(m)
}

/// Delete all occurrences of the given β-inputs.
///
/// Each must belong to the alphabet or have been removed before, so a
/// second application with the same set changes nothing.
pub fn remove_trivial_beta<A: Symbol, B: Symbol, O: Symbol>(
    samples: &SampleSet<A, B, O>,
    trivial: &BTreeSet<B>,
) -> Result<SampleSet<A, B, O>, PreprocessError> {
    if let Some(b) = trivial
        .iter()
        .find(|b| !samples.beta_alphabet.contains(*b) && !samples.reduction_log.trivial_beta.contains(b))
    {
        return Err(PreprocessError::UnknownBeta(format!("{b:?}")));
    }
    let record = ReductionRecord {
        redundant_alpha: Vec::new(),
        trivial_beta: trivial.iter().cloned().collect(),
    };
    Ok(SampleSet {
        samples: samples
            .samples
            .iter()
            .map(|s| Sample {
                events: s
                    .events
                    .iter()
                    .filter(|e| !matches!(e, Event::Beta(b) if trivial.contains(b)))
                    .cloned()
                    .collect(),
            })
            .collect(),
        alpha_alphabet: samples.alpha_alphabet.clone(),
        beta_alphabet: samples.beta_alphabet.difference(trivial).cloned().collect(),
        reduction_log: samples.reduction_log.merged(&record),
    })
}

/// Add `𝒯(q, i) = q` on every state for every recorded trivial `i`.
pub fn restore_trivial_beta<A: Symbol, B: Symbol, O: Symbol>(
    machine: &Dbmm<A, B, O>,
    record: &ReductionRecord<A, B, O>,
) -> Dbmm<A, B, O> {
    let mut m = machine.clone();
    for b in &record.trivial_beta {
        m.declare_beta(b);
        for q in 0..m.num_states() {
            m.set_transition(q, b, q).expect("state index in range");
        }
    }
    m
}

type Reduced<A, B, O> = (SampleSet<A, B, O>, ReductionRecord<A, B, O>);

/// Both reduction rules, α first. The returned record covers both.
pub fn reduce<A: Symbol, B: Symbol, O: Symbol>(
    samples: &SampleSet<A, B, O>,
    trivial: &BTreeSet<B>,
) -> Result<Reduced<A, B, O>, PreprocessError> {
    let (without_alpha, alpha_record) = remove_redundant_alpha(samples);
    let reduced = remove_trivial_beta(&without_alpha, trivial)?;
    let record = alpha_record.merged(&ReductionRecord {
        redundant_alpha: Vec::new(),
        trivial_beta: trivial.iter().cloned().collect(),
    });
    Ok((reduced, record))
}

/// Both recovery steps.
pub fn restore<A: Symbol, B: Symbol, O: Symbol>(
    machine: &Dbmm<A, B, O>,
    record: &ReductionRecord<A, B, O>,
) -> Result<Dbmm<A, B, O>, PreprocessError> {
    let m = restore_redundant_alpha(machine, record)?;
    Ok(restore_trivial_beta(&m, record))
}
