//! Desk-scale laboratory for latent-trace sequence policies.
//!
//! A model factors as `pi(z, y | x) = pi(z | x) * pi(y | x, z)`: a short trace
//! segment `z` followed by an answer segment `y`, both token sequences from a
//! tiny vocabulary, both produced by tabular softmax policies. Vocabularies and
//! segment caps are kept small enough that every distribution in sight can be
//! enumerated exactly, so each Monte Carlo objective has a brute-force
//! counterpart computed by summing over all traces.
//!
//! Module layout:
//!
//! * [`seq`], [`task`] - sequences, vocabularies, questions with verifiable
//!   answer sets, suite generators and the suite text format.
//! * [`policy`], [`grad`] - tabular softmax policies over contexts, sampling,
//!   log-probabilities, score-function gradients, gradient accumulators.
//! * [`oracle`] - exact marginals, posteriors, KL/entropy, evidence bounds and
//!   maximum-likelihood gradients by full enumeration.
//! * [`estimators`] - sampled multi-trace bound gradients, importance weight
//!   variants, forward-KL posterior gradients, single-draw variance probes.
//! * [`baselines`] - rejection-sampling, binary-reward and group-normalized
//!   policy gradients plus reward-shaping variants, each with an exact mode.
//! * [`trainer`] - the two-phase (posterior step / model step) training loop
//!   with checkpointing and per-step metrics.
//! * [`fixtures`], [`checks`] - calibrated test policies and the machine-run
//!   property suite used by integration tests and the CLI.

pub mod baselines;
pub mod checks;
pub mod estimators;
pub mod fixtures;
pub mod grad;
pub mod math;
pub mod oracle;
pub mod par;
pub mod policy;
pub mod rng;
pub mod seq;
pub mod task;
pub mod trainer;

pub use grad::GradVector;
pub use policy::{Conditioning, ContextKey, ParamTable, Policy, Role};
pub use seq::{Seq, SegmentCaps, Vocab};
pub use task::{AnswerSet, HintPrior, Question, TaskSuite, Verifier};
