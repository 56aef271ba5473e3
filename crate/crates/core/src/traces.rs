//! Labeled traces and the sample sets derived from them.
//!
//! A trace step `(l_i, o_i, a_i, r_i)` contributes the α-input `(o_i, a_i)`
//! followed by the β-input `l_i`. Labels sit only between α-inputs: the label
//! of the final step is never consumed by anything downstream, so it is not
//! part of a sample.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::machine::{Input, Symbol};
use crate::preprocess::ReductionRecord;
use crate::symbols::{LabelSet, ObsAction, Observation, Reward};

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: parse error: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: schema violation: {message}")]
    Schema { line: usize, message: String },
    #[error("trace {index} has {len} step(s); at least 2 are needed for a transition sample")]
    TraceTooShort { index: usize, len: usize },
    #[error("trace has no steps")]
    Empty,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceStep {
    pub label: LabelSet,
    pub obs: Observation,
    pub action: Arc<str>,
    pub reward: Reward,
}

impl TraceStep {
    pub fn new(label: LabelSet, obs: Observation, action: impl Into<Arc<str>>, reward: Reward) -> Self {
        TraceStep {
            label,
            obs,
            action: action.into(),
            reward,
        }
    }

    pub fn alpha(&self) -> ObsAction {
        ObsAction::new(self.obs.clone(), self.action.clone())
    }
}

/// A non-empty sequence of `(label, observation, action, reward)` steps.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawTrace", into = "RawTrace")]
pub struct LabeledTrace {
    steps: Vec<TraceStep>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTrace {
    steps: Vec<TraceStep>,
}

impl TryFrom<RawTrace> for LabeledTrace {
    type Error = TraceError;
    fn try_from(raw: RawTrace) -> Result<Self, TraceError> {
        LabeledTrace::new(raw.steps)
    }
}

impl From<LabeledTrace> for RawTrace {
    fn from(t: LabeledTrace) -> Self {
        RawTrace { steps: t.steps }
    }
}

impl LabeledTrace {
    pub fn new(steps: Vec<TraceStep>) -> Result<Self, TraceError> {
        if steps.is_empty() {
            return Err(TraceError::Empty);
        }
        Ok(LabeledTrace { steps })
    }

    pub fn steps(&self) -> &[TraceStep] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn total_reward(&self) -> Reward {
        self.steps.iter().fold(Reward::ZERO, |acc, s| acc + s.reward)
    }
}

/// Read one trace per non-blank line.
pub fn read_traces(path: impl AsRef<Path>) -> Result<Vec<LabeledTrace>, TraceError> {
    let path = path.as_ref();
    let io = |source| TraceError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = File::open(path).map_err(io)?;
    parse_traces(BufReader::new(file)).map_err(|e| match e {
        TraceError::Io { source, .. } => io(source),
        other => other,
    })
}

pub fn parse_traces(reader: impl BufRead) -> Result<Vec<LabeledTrace>, TraceError> {
    let mut traces = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|source| TraceError::Io {
            path: "<input>".into(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let trace: LabeledTrace = serde_json::from_str(&line).map_err(|e| {
            if e.is_data() {
                TraceError::Schema {
                    line: line_no,
                    message: e.to_string(),
                }
            } else {
                TraceError::Parse {
                    line: line_no,
                    message: e.to_string(),
                }
            }
        })?;
        traces.push(trace);
    }
    Ok(traces)
}

pub fn write_traces(writer: impl Write, traces: &[LabeledTrace]) -> std::io::Result<()> {
    let mut w = BufWriter::new(writer);
    for t in traces {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

/// One position of a sample: an α-input with its output, or a β-input whose
/// output is the `β_default` placeholder.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Event<A, B, O> {
    Alpha(A, O),
    Beta(B),
}

/// Output side of a sample position.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SampleOutput<O> {
    Value(O),
    BetaDefault,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SampleError {
    #[error("input and output sequences differ in length ({inputs} vs {outputs})")]
    LengthMismatch { inputs: usize, outputs: usize },
    #[error("position {0}: outputs must be β_default exactly at β-inputs")]
    Misaligned(usize),
}

/// An input sequence paired position by position with its outputs.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Sample<A, B, O> {
    pub events: Vec<Event<A, B, O>>,
}

impl<A: Clone, B: Clone, O: Clone> Sample<A, B, O> {
    pub fn new(events: Vec<Event<A, B, O>>) -> Self {
        Sample { events }
    }

    pub fn from_sequences(
        inputs: Vec<Input<A, B>>,
        outputs: Vec<SampleOutput<O>>,
    ) -> Result<Self, SampleError> {
        if inputs.len() != outputs.len() {
            return Err(SampleError::LengthMismatch {
                inputs: inputs.len(),
                outputs: outputs.len(),
            });
        }
        let events = inputs
            .into_iter()
            .zip(outputs)
            .enumerate()
            .map(|(i, pair)| match pair {
                (Input::Alpha(a), SampleOutput::Value(o)) => Ok(Event::Alpha(a, o)),
                (Input::Beta(b), SampleOutput::BetaDefault) => Ok(Event::Beta(b)),
                _ => Err(SampleError::Misaligned(i)),
            })
            .collect::<Result<_, _>>()?;
        Ok(Sample { events })
    }

    pub fn inputs(&self) -> Vec<Input<A, B>> {
        self.events
            .iter()
            .map(|e| match e {
                Event::Alpha(a, _) => Input::Alpha(a.clone()),
                Event::Beta(b) => Input::Beta(b.clone()),
            })
            .collect()
    }

    pub fn outputs(&self) -> Vec<SampleOutput<O>> {
        self.events
            .iter()
            .map(|e| match e {
                Event::Alpha(_, o) => SampleOutput::Value(o.clone()),
                Event::Beta(_) => SampleOutput::BetaDefault,
            })
            .collect()
    }

    /// Outputs of the α positions only, in order.
    pub fn alpha_outputs(&self) -> Vec<O> {
        self.events
            .iter()
            .filter_map(|e| match e {
                Event::Alpha(_, o) => Some(o.clone()),
                Event::Beta(_) => None,
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn alpha_count(&self) -> usize {
        self.events
            .iter()
            .filter(|e| matches!(e, Event::Alpha(..)))
            .count()
    }

    /// α, β, α, β, …, α: the layout produced directly from a trace.
    pub fn is_alternating(&self) -> bool {
        !self.events.is_empty()
            && self.events.len() % 2 == 1
            && self.events.iter().enumerate().all(|(i, e)| match e {
                Event::Alpha(..) => i % 2 == 0,
                Event::Beta(_) => i % 2 == 1,
            })
    }
}

/// A collection of samples with the alphabets they range over and the
/// log of reductions already applied.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(
    serialize = "A: Serialize, B: Serialize, O: Serialize",
    deserialize = "A: Deserialize<'de> + Ord, B: Deserialize<'de> + Ord, O: Deserialize<'de> + Ord"
))]
pub struct SampleSet<A, B, O> {
    pub samples: Vec<Sample<A, B, O>>,
    pub alpha_alphabet: BTreeSet<A>,
    pub beta_alphabet: BTreeSet<B>,
    pub reduction_log: ReductionRecord<A, B, O>,
}

impl<A: Symbol, B: Symbol, O: Symbol> Default for SampleSet<A, B, O> {
    fn default() -> Self {
        SampleSet {
            samples: Vec::new(),
            alpha_alphabet: BTreeSet::new(),
            beta_alphabet: BTreeSet::new(),
            reduction_log: ReductionRecord::default(),
        }
    }
}

impl<A: Symbol, B: Symbol, O: Symbol> SampleSet<A, B, O> {
    /// Alphabets are the symbols occurring in `samples`.
    pub fn new(samples: Vec<Sample<A, B, O>>) -> Self {
        let mut set = SampleSet {
            samples,
            ..Default::default()
        };
        for s in &set.samples {
            for e in &s.events {
                match e {
                    Event::Alpha(a, _) => {
                        set.alpha_alphabet.insert(a.clone());
                    }
                    Event::Beta(b) => {
                        set.beta_alphabet.insert(b.clone());
                    }
                }
            }
        }
        set
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn total_len(&self) -> usize {
        self.samples.iter().map(Sample::len).sum()
    }
}

pub type TmSampleSet = SampleSet<ObsAction, LabelSet, Observation>;
pub type RmSampleSet = SampleSet<ObsAction, LabelSet, Reward>;

fn interleave<O>(
    steps: &[TraceStep],
    alpha_count: usize,
    output: impl Fn(usize) -> O,
) -> Sample<ObsAction, LabelSet, O>
where
    O: Clone,
{
    let mut events = Vec::with_capacity(2 * alpha_count);
    for (i, step) in steps.iter().take(alpha_count).enumerate() {
        if i > 0 {
            events.push(Event::Beta(steps[i - 1].label.clone()));
        }
        events.push(Event::Alpha(step.alpha(), output(i)));
    }
    Sample { events }
}

/// `⟨(o_0,a_0), l_0, …, (o_{n-2},a_{n-2})⟩ → ⟨o_1, β_default, …, o_{n-1}⟩`.
///
/// The last step has no observed successor, so its α-input is dropped.
pub fn to_tm_samples(traces: &[LabeledTrace]) -> Result<TmSampleSet, TraceError> {
    let samples = traces
        .iter()
        .enumerate()
        .map(|(index, t)| {
            let n = t.len();
            if n < 2 {
                return Err(TraceError::TraceTooShort { index, len: n });
            }
            Ok(interleave(t.steps(), n - 1, |i| t.steps()[i + 1].obs.clone()))
        })
        .collect::<Result<_, _>>()?;
    Ok(SampleSet::new(samples))
}

/// `⟨(o_0,a_0), l_0, …, (o_{n-1},a_{n-1})⟩ → ⟨r_0, β_default, …, r_{n-1}⟩`.
pub fn to_rm_samples(traces: &[LabeledTrace]) -> RmSampleSet {
    let samples = traces
        .iter()
        .map(|t| interleave(t.steps(), t.len(), |i| t.steps()[i].reward))
        .collect();
    SampleSet::new(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step(label: &[&str], obs: &str, action: &str, reward: i64) -> TraceStep {
        TraceStep::new(
            LabelSet::new(label.iter().copied()),
            Observation::plain(obs),
            action,
            Reward::from_int(reward),
        )
    }

    #[test]
    fn tm_sample_of_two_step_trace() {
        let t = LabeledTrace::new(vec![
            step(&[], "corridor", "up", 0),
            step(&[], "corridor", "sit", 0),
        ])
        .unwrap();
        let set = to_tm_samples(&[t]).unwrap();
        let s = &set.samples[0];
        assert_eq!(s.inputs(), vec![Input::Alpha(ObsAction::plain("corridor", "up"))]);
        assert_eq!(s.outputs(), vec![SampleOutput::Value(Observation::plain("corridor"))]);
    }

    #[test]
    fn tm_sample_rejects_single_step() {
        let t = LabeledTrace::new(vec![step(&[], "corridor", "sit", 0)]).unwrap();
        assert!(matches!(
            to_tm_samples(&[t]),
            Err(TraceError::TraceTooShort { index: 0, len: 1 })
        ));
    }

    #[test]
    fn tm_sample_records_cyanroom_after_key() {
        let t = LabeledTrace::new(vec![
            step(&["key"], "orangeroom", "down", 0),
            step(&[], "corridor", "up", 0),
            step(&["toilet"], "cyanroom", "down", 0),
        ])
        .unwrap();
        let set = to_tm_samples(&[t]).unwrap();
        let s = &set.samples[0];
        assert_eq!(
            s.events,
            vec![
                Event::Alpha(ObsAction::plain("orangeroom", "down"), Observation::plain("corridor")),
                Event::Beta(LabelSet::single("key")),
                Event::Alpha(ObsAction::plain("corridor", "up"), Observation::plain("cyanroom")),
            ]
        );
        assert!(s.is_alternating());
    }

    #[test]
    fn rm_samples_carry_rewards() {
        let good = LabeledTrace::new(vec![
            step(&[], "corridor", "left", 0),
            step(&["key"], "orangeroom", "down", 0),
            step(&[], "corridor", "up", 0),
            step(&["toilet"], "cyanroom", "down", 0),
            step(&[], "corridor", "right", 0),
            step(&["sofa"], "limegreenroom", "sit", 1),
        ])
        .unwrap();
        let premature = LabeledTrace::new(vec![
            step(&[], "corridor", "right", 0),
            step(&["sofa"], "limegreenroom", "sit", 0),
        ])
        .unwrap();
        let set = to_rm_samples(&[good, premature]);
        let out0 = set.samples[0].alpha_outputs();
        assert_eq!(out0.last(), Some(&Reward::from_int(1)));
        assert!(out0[..out0.len() - 1].iter().all(Reward::is_zero));
        assert!(set.samples[1].alpha_outputs().iter().all(Reward::is_zero));
    }

    #[test]
    fn rm_sample_of_single_step() {
        let t = LabeledTrace::new(vec![step(&[], "corridor", "sit", 0)]).unwrap();
        let set = to_rm_samples(&[t]);
        assert_eq!(
            set.samples[0].inputs(),
            vec![Input::Alpha(ObsAction::plain("corridor", "sit"))]
        );
        assert_eq!(set.samples[0].outputs(), vec![SampleOutput::Value(Reward::ZERO)]);
    }

    #[test]
    fn parse_reports_lines() {
        let good = r#"{"steps": [{"label": ["key"], "obs": "orangeroom", "action": "down", "reward": 0}]}"#;
        let missing = r#"{"steps": [{"label": [], "obs": "corridor", "action": "up"}]}"#;
        let text = format!("{good}\n\n{good}\n");
        assert_eq!(parse_traces(text.as_bytes()).unwrap().len(), 2);
        assert!(parse_traces("".as_bytes()).unwrap().is_empty());

        let text = format!("{good}\n{missing}\n");
        match parse_traces(text.as_bytes()) {
            Err(TraceError::Schema { line, message }) => {
                assert_eq!(line, 2);
                assert!(message.contains("reward"), "{message}");
            }
            other => panic!("expected schema violation, got {other:?}"),
        }
        match parse_traces("{\"steps\": [".as_bytes()) {
            Err(TraceError::Parse { line: 1, .. }) => {}
            other => panic!("expected parse error, got {other:?}"),
        }
        match parse_traces(r#"{"steps": []}"#.as_bytes()) {
            Err(TraceError::Schema { line: 1, .. }) => {}
            other => panic!("expected schema violation, got {other:?}"),
        }
    }

    #[test]
    fn sequences_must_align() {
        let bad = Sample::<String, String, i64>::from_sequences(
            vec![Input::Beta("l".into())],
            vec![SampleOutput::Value(1)],
        );
        assert_eq!(bad, Err(SampleError::Misaligned(0)));
        let bad = Sample::<String, String, i64>::from_sequences(vec![], vec![SampleOutput::BetaDefault]);
        assert!(matches!(bad, Err(SampleError::LengthMismatch { .. })));
    }
}
