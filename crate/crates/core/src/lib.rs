//! Passive inference of transition machines and reward machines from traces
//! of deterministic partially observable environments.
//!
//! Both machine kinds are dual-behavior Mealy machines ([`machine::Dbmm`]):
//! label sets drive state changes, observation/action pairs read out the
//! next observation (transition machine) or the reward (reward machine).
//! [`pipeline::infer_machines`] turns a trace corpus into both machines;
//! [`qlearning`] trains a tabular agent over the augmented state
//! `(observation, RM state, TM state)`.

pub mod envs;
pub mod machine;
pub mod oracle;
pub mod pipeline;
pub mod preprocess;
pub mod qlearning;
pub mod rpni;
pub mod supplement;
pub mod symbols;
pub mod traces;

pub use machine::{isomorphic, Dbmm, Input, RewardMachine, StateId, TransitionMachine};
pub use symbols::{LabelSet, ObsAction, Observation, Reward};
pub use traces::{LabeledTrace, SampleSet, TraceStep};
