//! End-to-end inference: transition machine first, then the reward machine
//! over supplemented observations.

use std::borrow::Cow;
use std::collections::BTreeSet;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::machine::{Dbmm, MachineJson, Symbol};
use crate::preprocess::{reduce, restore, PreprocessError, ReductionRecord};
use crate::rpni::{infer_with_stats, InferenceStats, LearnError};
use crate::supplement::{supplement_corpus, SupplementError};
use crate::symbols::{LabelSet, ObsAction, Observation, Reward};
use crate::traces::{to_rm_samples, Event, to_tm_samples, write_traces, LabeledTrace, SampleSet, TraceError};
use crate::{RewardMachine, TransitionMachine};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// β-inputs known to cause no state change.
    pub trivial_betas: Vec<LabelSet>,
    /// Apply the reduction rules before inference.
    pub reductions: bool,
    /// Pair observations with TM states before reward inference.
    pub supplement: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            trivial_betas: vec![LabelSet::empty()],
            reductions: true,
            supplement: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusDigest {
    pub traces: usize,
    pub steps: usize,
    /// SHA-256 of the corpus in canonical JSONL form.
    pub sha256: String,
}

impl CorpusDigest {
    pub fn of(traces: &[LabeledTrace]) -> Self {
        let mut buf = Vec::new();
        write_traces(&mut buf, traces).expect("writing to memory");
        let hash = Sha256::digest(&buf);
        CorpusDigest {
            traces: traces.len(),
            steps: traces.iter().map(LabeledTrace::len).sum(),
            sha256: hash.iter().map(|b| format!("{b:02x}")).collect(),
        }
    }
}

/// Everything needed to audit or replay a pipeline run.
///
/// `timings` are wall-clock seconds per stage and depend on the hardware;
/// every other field is a deterministic function of corpus and config.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineManifest {
    pub config: PipelineConfig,
    pub corpus: CorpusDigest,
    /// Traces too short to contribute a transition sample.
    pub tm_skipped_traces: usize,
    pub tm_reduction: Option<ReductionRecord<ObsAction, LabelSet, Observation>>,
    pub tm_stats: Option<InferenceStats>,
    pub tm: Option<MachineJson<ObsAction, LabelSet, Observation>>,
    pub rm_reduction: Option<ReductionRecord<ObsAction, LabelSet, Reward>>,
    pub rm_stats: Option<InferenceStats>,
    pub rm: Option<MachineJson<ObsAction, LabelSet, Reward>>,
    pub stages_completed: Vec<String>,
    pub timings: Vec<(String, f64)>,
}

impl PipelineManifest {
    /// The manifest with timings cleared, for comparing runs.
    pub fn without_timings(&self) -> Self {
        PipelineManifest {
            timings: Vec::new(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineFailure {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Learn(#[from] LearnError),
    #[error(transparent)]
    Supplement(#[from] SupplementError),
}

/// A failed run with the manifest of the stages that did complete.
#[derive(Debug, Error)]
#[error("stage {stage}: {failure}")]
pub struct PipelineError {
    pub stage: String,
    pub failure: PipelineFailure,
    pub manifest: Box<PipelineManifest>,
}

impl PipelineError {
    /// True when the corpus itself is at fault rather than the program.
    pub fn is_data_error(&self) -> bool {
        !matches!(self.failure, PipelineFailure::Preprocess(PreprocessError::Conflict { .. }))
    }
}

/// Output of one DB-RPNI pass with reductions and recovery.
struct Pass<O> {
    machine: Dbmm<ObsAction, LabelSet, O>,
    record: ReductionRecord<ObsAction, LabelSet, O>,
    stats: InferenceStats,
}

fn learn<O: Symbol>(
    mut samples: SampleSet<ObsAction, LabelSet, O>,
    config: &PipelineConfig,
) -> Result<Pass<O>, PipelineFailure> {
    let trivial: BTreeSet<LabelSet> = config.trivial_betas.iter().cloned().collect();
    let (reduced, record) = if config.reductions {
        // Trivial β-inputs are declared a priori, so they belong to the
        // alphabet even when the corpus never shows them.
        samples.beta_alphabet.extend(trivial.iter().cloned());
        let out = reduce(&samples, &trivial)?;
        drop(samples);
        out
    } else {
        (samples, ReductionRecord::default())
    };
    let (machine, stats) = infer_with_stats(&reduced)?;
    let machine = restore(&machine, &record)?;
    Ok(Pass { machine, record, stats })
}

/// Extend each transition sample by the label consumed just before the
/// final observation. It carries no output, but the supplement needs the
/// state it leads to when pairing the last step of the trace.
fn append_final_labels(samples: &mut SampleSet<ObsAction, LabelSet, Observation>, traces: &[LabeledTrace]) {
    for (sample, trace) in samples.samples.iter_mut().zip(traces) {
        let label = trace.steps()[trace.len() - 2].label.clone();
        samples.beta_alphabet.insert(label.clone());
        sample.events.push(Event::Beta(label));
    }
}

struct Run {
    manifest: PipelineManifest,
    clock: Instant,
}

impl Run {
    fn done(&mut self, stage: &str) {
        self.manifest.stages_completed.push(stage.to_owned());
        self.manifest
            .timings
            .push((stage.to_owned(), self.clock.elapsed().as_secs_f64()));
        self.clock = Instant::now();
    }

    fn fail(&self, stage: &str, failure: impl Into<PipelineFailure>) -> PipelineError {
        PipelineError {
            stage: stage.to_owned(),
            failure: failure.into(),
            manifest: Box::new(self.manifest.clone()),
        }
    }
}

/// Infer a transition machine and a reward machine from a trace corpus.
pub fn infer_machines(
    traces: &[LabeledTrace],
    config: &PipelineConfig,
) -> Result<(TransitionMachine, RewardMachine, PipelineManifest), PipelineError> {
    let mut run = Run {
        manifest: PipelineManifest {
            config: config.clone(),
            corpus: CorpusDigest::of(traces),
            ..Default::default()
        },
        clock: Instant::now(),
    };
    if traces.is_empty() {
        return Err(run.fail("tm", PipelineFailure::EmptyCorpus));
    }

    let usable: Cow<[LabeledTrace]> = if traces.iter().all(|t| t.len() >= 2) {
        Cow::Borrowed(traces)
    } else {
        Cow::Owned(traces.iter().filter(|t| t.len() >= 2).cloned().collect())
    };
    run.manifest.tm_skipped_traces = traces.len() - usable.len();
    let mut tm_samples = to_tm_samples(&usable).map_err(|e| run.fail("tm", e))?;
    append_final_labels(&mut tm_samples, &usable);
    drop(usable);
    let tm_pass = learn(tm_samples, config).map_err(|e| run.fail("tm", e))?;
    let tm = TransitionMachine::new(tm_pass.machine);
    run.manifest.tm_reduction = Some(tm_pass.record);
    run.manifest.tm_stats = Some(tm_pass.stats);
    run.manifest.tm = Some(tm.core().to_json());
    run.done("tm");

    let rm_traces: Vec<LabeledTrace> = if config.supplement {
        supplement_corpus(&tm, traces)
            .map_err(|e| run.fail("supplement", e))?
            .into_iter()
            .map(|t| t.into_trace())
            .collect()
    } else {
        traces.to_vec()
    };
    run.done("supplement");

    let rm_samples = to_rm_samples(&rm_traces);
    drop(rm_traces);
    let rm_pass = learn(rm_samples, config).map_err(|e| run.fail("rm", e))?;
    let rm = RewardMachine::new(rm_pass.machine);
    run.manifest.rm_reduction = Some(rm_pass.record);
    run.manifest.rm_stats = Some(rm_pass.stats);
    run.manifest.rm = Some(rm.core().to_json());
    run.done("rm");

    Ok((tm, rm, run.manifest))
}

/// Replay the corpus through both machines and list every disagreement.
///
/// The transition machine must predict each next observation; the reward
/// machine, fed observations supplemented with the transition machine's
/// states when `supplement` is set, must predict each reward.
pub fn replay_mismatches(
    tm: &TransitionMachine,
    rm: &RewardMachine,
    traces: &[LabeledTrace],
    supplement: bool,
) -> Vec<String> {
    let mut out = Vec::new();
    for (k, t) in traces.iter().enumerate() {
        let steps = t.steps();
        let (mut q, mut u) = (Some(tm.q0()), Some(rm.u0()));
        for (i, st) in steps.iter().enumerate() {
            if let (Some(qq), Some(next)) = (q, steps.get(i + 1)) {
                let got = tm.delta_p(qq, &st.obs, &st.action);
                if got != Some(&next.obs) {
                    out.push(format!("trace {k} step {i}: TM predicts {got:?}, saw {}", next.obs));
                }
            }
            if let Some(uu) = u {
                let obs = match (supplement, q) {
                    (true, Some(qq)) => st.obs.augment(tm.core().state_name(qq)),
                    (true, None) => {
                        out.push(format!("trace {k} step {i}: TM state undefined"));
                        break;
                    }
                    (false, _) => st.obs.clone(),
                };
                let got = rm.delta_r(uu, &obs, &st.action);
                if got != Some(st.reward) {
                    out.push(format!("trace {k} step {i}: RM predicts {got:?}, saw {}", st.reward));
                }
            }
            if i + 1 < steps.len() {
                q = q.and_then(|qq| tm.delta_q(qq, &st.label));
                u = u.and_then(|uu| rm.delta_u(uu, &st.label));
            }
        }
    }
    out
}
