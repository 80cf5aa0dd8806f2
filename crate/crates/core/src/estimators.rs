//! Sampling-based estimators of the variational objectives.
//!
//! The importance weight of a proposed trace is
//! `rho(z) = pi(z | x) * S(z) / q(z)` where `S(z)` is either the exact
//! success probability `s(z) = sum_{y in Y_x} pi(y | x, z)` or a sampled
//! estimate of it. The estimators here implement:
//!
//! * the order-`K` bound estimate `log((1/K) sum_k rho_k)` over a rollout
//!   batch, its model gradient `sum_k w~_k grad log pi(z_k, Y_x | x)` with
//!   self-normalized weights `w~_k`, and its proposal gradient where draw `k`
//!   receives the coefficient `log((1/K) sum_j rho_j) - w~_k` (for `K = 1`
//!   this is `log rho_1 - 1`);
//! * the forward-divergence posterior update, which draws traces from the
//!   model's own prior and weighs their posterior scores by estimated
//!   accuracy, plus its fully enumerated counterpart;
//! * a single-draw variance probe contrasting the two success estimators of
//!   a fixed trace: scaled likelihood of a uniformly drawn reference answer
//!   versus the correctness indicator of a policy-drawn answer.
//!
//! Importance ratios always use the untempered policy densities; the sampling
//! temperature only reshapes which traces and answers get drawn, and the two
//! coincide at temperature 1 where the unbiasedness claims hold.

use crate::grad::GradVector;
use crate::oracle::{self, Budget, OracleError};
use crate::par;
use crate::policy::{Conditioning, Policy, PolicyError};
use crate::rng::child_rng;
use crate::seq::Seq;
use crate::task::Question;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("accuracy estimation needs at least one answer draw")]
    NoAnswerDraws,
    #[error("a rollout batch needs at least one trace")]
    EmptyBatch,
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

/// How the success factor of an importance weight is obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RhoMode {
    /// Exact `s(z)`, summed over the answer set.
    Likelihood,
    /// Fraction of `n_answers` policy-drawn answers accepted by the exact
    /// verifier. Unbiased for `s(z)` at temperature 1.
    Accuracy { n_answers: usize },
    /// Accuracy-based weight whose prior/posterior ratio is tempered to its
    /// per-token geometric mean, `ratio^(1/|z|)` with `|z|` counting the
    /// end-of-segment step. A variance-reduction surrogate, not an unbiased
    /// importance weight.
    GeoMeanSurrogate { n_answers: usize },
}

impl RhoMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            RhoMode::Likelihood => "likelihood",
            RhoMode::Accuracy { .. } => "accuracy",
            RhoMode::GeoMeanSurrogate { .. } => "geomean",
        }
    }
}

/// Weight-mode selector without a draw count, as it appears in configs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RhoKind {
    Likelihood,
    Accuracy,
    GeoMeanSurrogate,
}

impl RhoKind {
    pub fn with_draws(self, n_answers: usize) -> RhoMode {
        match self {
            RhoKind::Likelihood => RhoMode::Likelihood,
            RhoKind::Accuracy => RhoMode::Accuracy { n_answers },
            RhoKind::GeoMeanSurrogate => RhoMode::GeoMeanSurrogate { n_answers },
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            RhoKind::Likelihood => "likelihood",
            RhoKind::Accuracy => "accuracy",
            RhoKind::GeoMeanSurrogate => "geomean",
        }
    }
}

impl std::str::FromStr for RhoKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "likelihood" => Ok(RhoKind::Likelihood),
            "accuracy" => Ok(RhoKind::Accuracy),
            "geomean" => Ok(RhoKind::GeoMeanSurrogate),
            other => Err(format!(
                "unknown weight mode `{other}` (expected likelihood, accuracy or geomean)"
            )),
        }
    }
}

/// One importance weight with its factors kept apart for diagnostics.
#[derive(Clone, Debug)]
pub struct RhoSample {
    /// The weight `ratio_factor * success_factor`.
    pub value: f64,
    /// `log pi(z|x) - log q(z)`, before any length normalization.
    pub log_ratio: f64,
    /// Ratio contribution, after the mode's normalization.
    pub ratio_factor: f64,
    /// Exact success probability or sampled accuracy.
    pub success_factor: f64,
    /// Sampled answers with their verdicts; empty in likelihood mode.
    pub answers: Vec<(Seq, bool)>,
}

/// Where rollout traces come from: a hint-conditioned posterior or the
/// model's own trace policy (self-sampling keeps the ratio at exactly 1).
#[derive(Clone, Copy, Debug)]
pub struct Proposal<'a> {
    pub policy: &'a Policy,
    pub cond: Conditioning<'a>,
}

impl<'a> Proposal<'a> {
    pub fn posterior(qphi: &'a Policy, question: u32, hint: &'a Seq) -> Self {
        Proposal {
            policy: qphi,
            cond: Conditioning::Posterior { question, hint },
        }
    }

    pub fn self_trace(model: &'a Policy, question: u32) -> Self {
        Proposal {
            policy: model,
            cond: Conditioning::Trace { question },
        }
    }
}

/// Draws `n` answers for a trace and scores them with the exact verifier.
/// Returns the accepted fraction and the draws themselves.
pub fn accuracy_estimate(
    model: &Policy,
    question: &Question,
    trace: &Seq,
    n: usize,
    temperature: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, Vec<(Seq, bool)>), EstimatorError> {
    if n == 0 {
        return Err(EstimatorError::NoAnswerDraws);
    }
    let cond = Conditioning::Answer {
        question: question.id,
        trace,
    };
    let verifier = question.exact_verifier();
    let mut answers = Vec::with_capacity(n);
    let mut correct = 0usize;
    for _ in 0..n {
        let y = model.sample(cond, temperature, rng)?;
        let ok = verifier.accepts(&y);
        correct += ok as usize;
        answers.push((y, ok));
    }
    Ok((correct as f64 / n as f64, answers))
}

/// Importance weight of one proposed trace given its proposal log-density.
pub fn rho(
    model: &Policy,
    question: &Question,
    trace: &Seq,
    log_q: f64,
    mode: RhoMode,
    temperature: f64,
    rng: &mut ChaCha8Rng,
) -> Result<RhoSample, EstimatorError> {
    let log_pi = model.log_prob(
        Conditioning::Trace {
            question: question.id,
        },
        trace,
    )?;
    let log_ratio = log_pi - log_q;
    let (ratio_factor, success_factor, answers) = match mode {
        RhoMode::Likelihood => {
            let s = oracle::success_prob(model, question, trace)?;
            (log_ratio.exp(), s, Vec::new())
        }
        RhoMode::Accuracy { n_answers } => {
            let (acc, answers) = accuracy_estimate(model, question, trace, n_answers, temperature, rng)?;
            (log_ratio.exp(), acc, answers)
        }
        RhoMode::GeoMeanSurrogate { n_answers } => {
            let (acc, answers) = accuracy_estimate(model, question, trace, n_answers, temperature, rng)?;
            let steps = (trace.len() + 1) as f64;
            ((log_ratio / steps).exp(), acc, answers)
        }
    };
    Ok(RhoSample {
        value: ratio_factor * success_factor,
        log_ratio,
        ratio_factor,
        success_factor,
        answers,
    })
}

/// One proposed trace with its weight.
#[derive(Clone, Debug)]
pub struct BatchItem {
    pub trace: Seq,
    pub log_q: f64,
    pub rho: RhoSample,
    /// Self-normalized weight; uniform when the batch is degenerate.
    pub weight: f64,
}

/// A batch of proposal rollouts with self-normalized importance weights.
#[derive(Clone, Debug)]
pub struct WeightedTraceBatch {
    pub items: Vec<BatchItem>,
    /// Every raw weight was zero, so normalization fell back to uniform.
    pub degenerate: bool,
}

impl WeightedTraceBatch {
    /// Monte Carlo bound estimate `log((1/K) sum rho)`; negative infinity on
    /// a degenerate batch.
    pub fn bound_estimate(&self) -> f64 {
        let total: f64 = self.items.iter().map(|it| it.rho.value).sum();
        (total / self.items.len() as f64).ln()
    }

    /// Mean sampled success factor, a cheap accuracy diagnostic.
    pub fn mean_success_factor(&self) -> f64 {
        let total: f64 = self.items.iter().map(|it| it.rho.success_factor).sum();
        total / self.items.len() as f64
    }
}

/// Draws `k` traces from the proposal and attaches importance weights. Each
/// rollout consumes its own child stream, so reordering rollouts never
/// changes any single rollout's draws.
pub fn sample_weighted_batch(
    model: &Policy,
    proposal: Proposal,
    question: &Question,
    k: usize,
    mode: RhoMode,
    temperature: f64,
    rng: &mut ChaCha8Rng,
) -> Result<WeightedTraceBatch, EstimatorError> {
    if k == 0 {
        return Err(EstimatorError::EmptyBatch);
    }
    let mut items = Vec::with_capacity(k);
    for _ in 0..k {
        let mut child = child_rng(rng);
        let trace = proposal.policy.sample(proposal.cond, temperature, &mut child)?;
        let log_q = proposal.policy.log_prob(proposal.cond, &trace)?;
        let sample = rho(model, question, &trace, log_q, mode, temperature, &mut child)?;
        items.push(BatchItem {
            trace,
            log_q,
            rho: sample,
            weight: 0.0,
        });
    }
    let total: f64 = items.iter().map(|it| it.rho.value).sum();
    let degenerate = total <= 0.0 || total.is_nan();
    for it in &mut items {
        it.weight = if degenerate {
            1.0 / k as f64
        } else {
            it.rho.value / total
        };
    }
    Ok(WeightedTraceBatch { items, degenerate })
}

/// Exact gradient of `log pi(Y_x | x, z)` with respect to the answer table,
/// scaled by `coeff`: the success-conditioned expectation of the answer
/// score.
pub fn answer_grad_exact(
    model: &Policy,
    question: &Question,
    trace: &Seq,
    coeff: f64,
    out: &mut GradVector,
) -> Result<(), EstimatorError> {
    if coeff == 0.0 {
        return Ok(());
    }
    let log_s = oracle::log_success_prob(model, question, trace)?;
    if log_s == f64::NEG_INFINITY {
        return Ok(());
    }
    let cond = Conditioning::Answer {
        question: question.id,
        trace,
    };
    for y in question.answers.members() {
        let c = coeff * (model.log_prob(cond, y)? - log_s).exp();
        model.score_grad(cond, y, c, out)?;
    }
    Ok(())
}

/// Sampled counterpart of [`answer_grad_exact`]: the mean answer score over
/// the accepted draws, which estimates the success-conditioned expectation.
/// Contributes nothing when no draw was accepted.
pub fn answer_grad_sampled(
    model: &Policy,
    question: &Question,
    trace: &Seq,
    answers: &[(Seq, bool)],
    coeff: f64,
    out: &mut GradVector,
) -> Result<(), EstimatorError> {
    let accepted = answers.iter().filter(|(_, ok)| *ok).count();
    if accepted == 0 || coeff == 0.0 {
        return Ok(());
    }
    let cond = Conditioning::Answer {
        question: question.id,
        trace,
    };
    let each = coeff / accepted as f64;
    for (y, ok) in answers {
        if *ok {
            model.score_grad(cond, y, each, out)?;
        }
    }
    Ok(())
}

/// Model gradient of the bound estimate over a weighted batch:
/// `sum_k w~_k [grad log pi(z_k | x) + grad log pi(Y_x | x, z_k)]`. The
/// answer part is exact in likelihood mode and reuses the batch's sampled
/// answers otherwise. A degenerate batch carries no signal and contributes
/// nothing.
pub fn iwae_grad_theta(
    model: &Policy,
    question: &Question,
    batch: &WeightedTraceBatch,
    out: &mut GradVector,
) -> Result<(), EstimatorError> {
    if batch.degenerate {
        return Ok(());
    }
    let cond = Conditioning::Trace {
        question: question.id,
    };
    for it in &batch.items {
        if it.weight == 0.0 {
            continue;
        }
        model.score_grad(cond, &it.trace, it.weight, out)?;
        if it.rho.answers.is_empty() {
            answer_grad_exact(model, question, &it.trace, it.weight, out)?;
        } else {
            answer_grad_sampled(model, question, &it.trace, &it.rho.answers, it.weight, out)?;
        }
    }
    Ok(())
}

/// Proposal gradient of the bound estimate: draw `k` contributes
/// `(log((1/K) sum rho) - w~_k) * grad log q(z_k)`. Returns the bound
/// estimate; a degenerate batch contributes no gradient and reports negative
/// infinity.
pub fn iwae_grad_phi(
    proposal: Proposal,
    batch: &WeightedTraceBatch,
    out: &mut GradVector,
) -> Result<f64, EstimatorError> {
    if batch.degenerate {
        return Ok(f64::NEG_INFINITY);
    }
    let log_mean = batch.bound_estimate();
    for it in &batch.items {
        let coeff = log_mean - it.weight;
        proposal.policy.score_grad(proposal.cond, &it.trace, coeff, out)?;
    }
    Ok(log_mean)
}

/// Outcome of one forward-divergence posterior update.
#[derive(Clone, Copy, Debug)]
pub struct ForwardKlReport {
    /// Mean sampled accuracy across the rollouts.
    pub mean_accuracy: f64,
    /// Every rollout had zero accuracy; no gradient was produced.
    pub degenerate: bool,
}

/// Posterior update that pushes `q(z | x, y')` toward the true posterior by
/// importance-weighting self-samples from the model prior:
/// `sum_m w~_m grad log q(z_m | x, y')` with `w_m` the sampled accuracy of
/// trace `z_m`.
#[allow(clippy::too_many_arguments)]
pub fn forward_kl_grad_phi(
    model: &Policy,
    qphi: &Policy,
    question: &Question,
    hint: &Seq,
    m_rollouts: usize,
    n_answers: usize,
    temperature: f64,
    rng: &mut ChaCha8Rng,
    out: &mut GradVector,
) -> Result<ForwardKlReport, EstimatorError> {
    if m_rollouts == 0 {
        return Err(EstimatorError::EmptyBatch);
    }
    let trace_cond = Conditioning::Trace {
        question: question.id,
    };
    let mut draws = Vec::with_capacity(m_rollouts);
    let mut total = 0.0;
    for _ in 0..m_rollouts {
        let mut child = child_rng(rng);
        let trace = model.sample(trace_cond, temperature, &mut child)?;
        let (acc, _) = accuracy_estimate(model, question, &trace, n_answers, temperature, &mut child)?;
        total += acc;
        draws.push((trace, acc));
    }
    let mean_accuracy = total / m_rollouts as f64;
    if total <= 0.0 || total.is_nan() {
        return Ok(ForwardKlReport {
            mean_accuracy,
            degenerate: true,
        });
    }
    let q_cond = Conditioning::Posterior {
        question: question.id,
        hint,
    };
    for (trace, acc) in &draws {
        if *acc > 0.0 {
            qphi.score_grad(q_cond, trace, acc / total, out)?;
        }
    }
    Ok(ForwardKlReport {
        mean_accuracy,
        degenerate: false,
    })
}

/// Enumerated counterpart of [`forward_kl_grad_phi`]: the exact expectation
/// of the posterior score under the true posterior, which is the negated
/// gradient of `KL(P(z | x, Y_x) || q(z | x, y'))` in the posterior's logits.
pub fn forward_kl_grad_phi_exact(
    model: &Policy,
    qphi: &Policy,
    question: &Question,
    hint: &Seq,
    budget: &Budget,
    out: &mut GradVector,
) -> Result<(), EstimatorError> {
    let posterior = oracle::true_posterior(model, question, budget)?;
    let q_cond = Conditioning::Posterior {
        question: question.id,
        hint,
    };
    for (trace, w) in posterior.traces.iter().zip(&posterior.probs) {
        if *w > 0.0 {
            qphi.score_grad(q_cond, trace, *w, out)?;
        }
    }
    Ok(())
}

/// Which single-draw success estimator a variance probe exercises.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeMode {
    /// `|Y_x| * pi(y | x, z)` for `y` drawn uniformly from the answer set.
    ScaledLikelihood,
    /// Correctness indicator of one policy-drawn answer.
    AccuracyDraw,
}

impl ProbeMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ProbeMode::ScaledLikelihood => "likelihood",
            ProbeMode::AccuracyDraw => "accuracy",
        }
    }
}

/// Empirical and exact moments of a single-draw success estimator.
#[derive(Clone, Copy, Debug)]
pub struct VarianceProbeReport {
    pub mode: ProbeMode,
    pub trials: u64,
    /// Exact `s(z)` both estimators are unbiased for.
    pub exact_success: f64,
    pub empirical_mean: f64,
    pub mean_se: f64,
    pub empirical_var: f64,
    /// Large-sample standard error of the variance estimate,
    /// `sqrt((m4 - var^2) / n)`.
    pub var_se: f64,
    /// Exact variance of one draw: `|Y| sum_y pi(y)^2 - s^2` for the scaled
    /// likelihood, `s (1 - s)` for the indicator.
    pub theory_var: f64,
}

const PROBE_CHUNK: u64 = 10_000;

/// Repeats one single-draw success estimator and compares its spread with
/// the exact theory values. Trials run in fixed-size chunks, each on its own
/// derived stream, so results are independent of worker count.
pub fn variance_probe(
    model: &Policy,
    question: &Question,
    trace: &Seq,
    mode: ProbeMode,
    trials: u64,
    rng: &mut ChaCha8Rng,
) -> Result<VarianceProbeReport, EstimatorError> {
    assert!(trials > 0, "a probe needs at least one trial");
    let cond = Conditioning::Answer {
        question: question.id,
        trace,
    };
    let members = question.answers.members();
    let mut member_probs = Vec::with_capacity(members.len());
    for y in members {
        member_probs.push(model.log_prob(cond, y)?.exp());
    }
    let s: f64 = member_probs.iter().sum();
    let theory_var = match mode {
        ProbeMode::ScaledLikelihood => {
            let sq: f64 = member_probs.iter().map(|p| p * p).sum();
            members.len() as f64 * sq - s * s
        }
        ProbeMode::AccuracyDraw => s * (1.0 - s),
    };

    let n_chunks = trials.div_ceil(PROBE_CHUNK) as usize;
    let streams: Vec<ChaCha8Rng> = (0..n_chunks).map(|_| child_rng(rng)).collect();
    let verifier = question.exact_verifier();
    let partials = par::map_indexed(n_chunks, |c| -> Result<[f64; 4], EstimatorError> {
        let mut stream = streams[c].clone();
        let lo = c as u64 * PROBE_CHUNK;
        let hi = trials.min(lo + PROBE_CHUNK);
        let mut sums = [0.0f64; 4];
        for _ in lo..hi {
            let x = match mode {
                ProbeMode::ScaledLikelihood => {
                    let pick = stream.random_range(0..members.len());
                    members.len() as f64 * member_probs[pick]
                }
                ProbeMode::AccuracyDraw => {
                    let y = model.sample(cond, 1.0, &mut stream)?;
                    verifier.accepts(&y) as u8 as f64
                }
            };
            let x2 = x * x;
            sums[0] += x;
            sums[1] += x2;
            sums[2] += x2 * x;
            sums[3] += x2 * x2;
        }
        Ok(sums)
    });
    let mut raw = [0.0f64; 4];
    for p in partials {
        let p = p?;
        for (acc, v) in raw.iter_mut().zip(p) {
            *acc += v;
        }
    }
    let n = trials as f64;
    let mean = raw[0] / n;
    let m2 = raw[1] / n - mean * mean;
    let m4 = raw[3] / n - 4.0 * mean * raw[2] / n + 6.0 * mean * mean * raw[1] / n
        - 3.0 * mean.powi(4);
    Ok(VarianceProbeReport {
        mode,
        trials,
        exact_success: s,
        empirical_mean: mean,
        mean_se: (m2 / n).sqrt(),
        empirical_var: m2,
        var_se: ((m4 - m2 * m2).max(0.0) / n).sqrt(),
        theory_var,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{
        concentrated_answers, random_fixture, randomize_posterior, row_with_prob, single_uniform,
        two_trace_skewed,
    };
    use crate::oracle::{iwae_grad_phi_exact, segment_dist};
    use crate::policy::ContextKey;
    use crate::rng::derive_rng;

    fn b() -> Budget {
        Budget::default()
    }

    fn random_qphi(suite: &crate::task::TaskSuite, model: &Policy, seed: u64) -> Policy {
        let mut qphi = Policy::uniform(model.vocab, model.caps);
        let mut rng = derive_rng(seed, &[0x9a]);
        randomize_posterior(&mut qphi, suite, 1.5, &mut rng);
        qphi
    }

    /// Per-entry running mean and second moment over gradient draws.
    struct Moments {
        n: f64,
        sum: GradVector,
        sumsq: GradVector,
    }

    impl Moments {
        fn new(width: usize) -> Self {
            Moments {
                n: 0.0,
                sum: GradVector::new(width),
                sumsq: GradVector::new(width),
            }
        }

        fn push(&mut self, g: &GradVector) {
            self.n += 1.0;
            self.sum.add_scaled(g, 1.0);
            for (ctx, row) in g.iter() {
                for (i, v) in row.iter().enumerate() {
                    self.sumsq.add(ctx.clone(), i, v * v);
                }
            }
        }

        /// Asserts the running mean is within three standard errors of the
        /// target on every entry of either support.
        fn assert_close(&self, target: &GradVector, width: usize, label: &str) {
            let contexts: Vec<ContextKey> = self
                .sum
                .iter()
                .map(|(c, _)| c.clone())
                .chain(target.iter().map(|(c, _)| c.clone()))
                .collect();
            for ctx in contexts {
                for slot in 0..width {
                    let mean = self.sum.get(&ctx, slot) / self.n;
                    let msq = self.sumsq.get(&ctx, slot) / self.n;
                    let se = ((msq - mean * mean).max(0.0) / self.n).sqrt();
                    let want = target.get(&ctx, slot);
                    assert!(
                        (mean - want).abs() <= 3.0 * se + 1e-9,
                        "{label} {ctx:?}[{slot}]: mean {mean} vs exact {want} (se {se})"
                    );
                }
            }
        }
    }

    #[test]
    fn likelihood_weight_multiplies_ratio_and_exact_success() {
        let (suite, model) = two_trace_skewed(false);
        let q = &suite.questions[0];
        let qphi = random_qphi(&suite, &model, 7);
        let hint = &q.answers.members()[0];
        let trace = Seq::from([0]);
        let log_q = qphi
            .log_prob(Conditioning::Posterior { question: q.id, hint }, &trace)
            .unwrap();
        let log_pi = model
            .log_prob(Conditioning::Trace { question: q.id }, &trace)
            .unwrap();
        let mut rng = derive_rng(0, &[1]);
        let s = rho(&model, q, &trace, log_q, RhoMode::Likelihood, 1.0, &mut rng).unwrap();
        assert!(s.answers.is_empty());
        assert_eq!(s.log_ratio, log_pi - log_q);
        assert!((s.success_factor - 0.8).abs() < 1e-12);
        assert_eq!(s.value, s.ratio_factor * s.success_factor);
    }

    #[test]
    fn geomean_weight_tempers_the_ratio_per_step() {
        let (suite, model) = two_trace_skewed(false);
        let q = &suite.questions[0];
        let qphi = random_qphi(&suite, &model, 8);
        let hint = &q.answers.members()[0];
        let trace = Seq::from([1]);
        let log_q = qphi
            .log_prob(Conditioning::Posterior { question: q.id, hint }, &trace)
            .unwrap();
        let mut rng = derive_rng(0, &[2]);
        let mode = RhoMode::GeoMeanSurrogate { n_answers: 16 };
        let s = rho(&model, q, &trace, log_q, mode, 1.0, &mut rng).unwrap();
        // One content token plus the end step: the exponent is halved.
        assert!((s.ratio_factor - (s.log_ratio / 2.0).exp()).abs() < 1e-15);
        assert_eq!(s.answers.len(), 16);
    }

    #[test]
    fn batch_weights_normalize_or_fall_back_uniform() {
        let (suite, model) = random_fixture(2, 1.5, &mut derive_rng(4, &[3]));
        let q = &suite.questions[0];
        let qphi = random_qphi(&suite, &model, 4);
        let hint = &q.answers.members()[0];
        let mut rng = derive_rng(4, &[4]);
        let batch = sample_weighted_batch(
            &model,
            Proposal::posterior(&qphi, q.id, hint),
            q,
            8,
            RhoMode::Accuracy { n_answers: 4 },
            1.0,
            &mut rng,
        )
        .unwrap();
        assert!(!batch.degenerate);
        let total: f64 = batch.items.iter().map(|it| it.weight).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(batch.items.iter().all(|it| it.weight >= 0.0));

        // Success mass ~5e-13 on the accepted answer: no draw ever lands on
        // it, so every weight is zero and the batch degenerates to uniform.
        let (suite, mut model) = single_uniform();
        let q = &suite.questions[0];
        for trace in crate::seq::all_segments(model.vocab, model.caps.trace) {
            let cond = Conditioning::Answer { question: q.id, trace: &trace };
            model
                .params
                .set_row(cond.context(Seq::empty()), row_with_prob(3, 0, 1.0 - 1e-12))
                .unwrap();
        }
        let qphi = random_qphi(&suite, &model, 5);
        let mut rng = derive_rng(5, &[5]);
        let batch = sample_weighted_batch(
            &model,
            Proposal::posterior(&qphi, q.id, &q.answers.members()[0]),
            q,
            8,
            RhoMode::Accuracy { n_answers: 4 },
            1.0,
            &mut rng,
        )
        .unwrap();
        assert!(batch.degenerate);
        for it in &batch.items {
            assert_eq!(it.weight, 0.125);
        }
        assert_eq!(batch.bound_estimate(), f64::NEG_INFINITY);
    }

    #[test]
    fn self_sampling_keeps_the_ratio_at_exactly_one() {
        let (suite, model) = random_fixture(1, 2.0, &mut derive_rng(6, &[6]));
        let q = &suite.questions[0];
        let mut rng = derive_rng(6, &[7]);
        let batch = sample_weighted_batch(
            &model,
            Proposal::self_trace(&model, q.id),
            q,
            6,
            RhoMode::Likelihood,
            1.0,
            &mut rng,
        )
        .unwrap();
        for it in &batch.items {
            assert_eq!(it.rho.log_ratio, 0.0);
            assert_eq!(it.rho.ratio_factor, 1.0);
            assert_eq!(it.rho.value, it.rho.success_factor);
        }
    }

    #[test]
    fn single_draw_model_gradient_is_unbiased() {
        let (suite, model) = random_fixture(2, 1.5, &mut derive_rng(9, &[8]));
        let q = &suite.questions[0];
        let qphi = random_qphi(&suite, &model, 9);
        let hint = &q.answers.members()[1];
        let width = model.vocab.width();

        // Exact target: E_q[grad log pi(z, Y|x)] under the proposal.
        let mut target = GradVector::new(width);
        let q_dist = segment_dist(
            &qphi,
            Conditioning::Posterior { question: q.id, hint },
            &b(),
        )
        .unwrap();
        let t_cond = Conditioning::Trace { question: q.id };
        for (z, w) in q_dist.pairs() {
            if w == 0.0 {
                continue;
            }
            model.score_grad(t_cond, &z, w, &mut target).unwrap();
            answer_grad_exact(&model, q, &z, w, &mut target).unwrap();
        }

        let mut rng = derive_rng(9, &[9]);
        let mut moments = Moments::new(width);
        for _ in 0..20_000 {
            let batch = sample_weighted_batch(
                &model,
                Proposal::posterior(&qphi, q.id, hint),
                q,
                1,
                RhoMode::Likelihood,
                1.0,
                &mut rng,
            )
            .unwrap();
            assert_eq!(batch.items[0].weight, 1.0);
            let mut g = GradVector::new(width);
            iwae_grad_theta(&model, q, &batch, &mut g).unwrap();
            moments.push(&g);
        }
        moments.assert_close(&target, width, "theta grad");
    }

    #[test]
    fn single_draw_coefficient_is_log_rho_minus_one() {
        let (suite, model) = random_fixture(1, 2.0, &mut derive_rng(10, &[10]));
        let q = &suite.questions[0];
        let qphi = random_qphi(&suite, &model, 10);
        let hint = &q.answers.members()[0];
        let mut rng = derive_rng(10, &[11]);
        let proposal = Proposal::posterior(&qphi, q.id, hint);
        let batch =
            sample_weighted_batch(&model, proposal, q, 1, RhoMode::Likelihood, 1.0, &mut rng)
                .unwrap();
        let width = model.vocab.width();
        let mut got = GradVector::new(width);
        iwae_grad_phi(proposal, &batch, &mut got).unwrap();

        let item = &batch.items[0];
        let mut want = GradVector::new(width);
        qphi.score_grad(proposal.cond, &item.trace, item.rho.value.ln() - 1.0, &mut want)
            .unwrap();
        assert_eq!(got.max_abs_diff(&want), 0.0);
    }

    #[test]
    fn single_draw_posterior_gradient_is_unbiased() {
        let (suite, model) = random_fixture(2, 1.5, &mut derive_rng(11, &[12]));
        let q = &suite.questions[0];
        let qphi = random_qphi(&suite, &model, 11);
        let hint = &q.answers.members()[0];
        let width = model.vocab.width();

        let mut target = GradVector::new(width);
        iwae_grad_phi_exact(&model, &qphi, q, hint, 1, &b(), &mut target).unwrap();

        let proposal = Proposal::posterior(&qphi, q.id, hint);
        let mut rng = derive_rng(11, &[13]);
        let mut moments = Moments::new(width);
        for _ in 0..20_000 {
            let batch =
                sample_weighted_batch(&model, proposal, q, 1, RhoMode::Likelihood, 1.0, &mut rng)
                    .unwrap();
            let mut g = GradVector::new(width);
            iwae_grad_phi(proposal, &batch, &mut g).unwrap();
            moments.push(&g);
        }
        moments.assert_close(&target, width, "phi grad");
    }

    #[test]
    fn sampled_answer_gradient_averages_accepted_draws() {
        let (suite, model) = two_trace_skewed(false);
        let q = &suite.questions[0];
        let trace = Seq::from([0]);
        let width = model.vocab.width();
        let answers = vec![
            (Seq::from([1]), true),
            (Seq::from([0]), false),
            (Seq::from([1]), true),
        ];
        let mut got = GradVector::new(width);
        answer_grad_sampled(&model, q, &trace, &answers, 0.6, &mut got).unwrap();
        let mut want = GradVector::new(width);
        let cond = Conditioning::Answer { question: q.id, trace: &trace };
        model.score_grad(cond, &Seq::from([1]), 0.6, &mut want).unwrap();
        assert!(got.max_abs_diff(&want) < 1e-15);

        let none = vec![(Seq::from([0]), false)];
        let mut empty = GradVector::new(width);
        answer_grad_sampled(&model, q, &trace, &none, 0.6, &mut empty).unwrap();
        assert!(empty.is_empty());
    }

    #[test]
    fn forward_divergence_exact_matches_finite_differences() {
        let (suite, model) = random_fixture(2, 1.5, &mut derive_rng(12, &[14]));
        let q = &suite.questions[0];
        let qphi = random_qphi(&suite, &model, 12);
        let hint = &q.answers.members()[0];
        let width = model.vocab.width();
        let mut grad = GradVector::new(width);
        forward_kl_grad_phi_exact(&model, &qphi, q, hint, &b(), &mut grad).unwrap();

        let posterior = crate::oracle::true_posterior(&model, q, &b()).unwrap();
        let contexts: Vec<ContextKey> = qphi.params.contexts().cloned().collect();
        for ctx in contexts {
            let relevant = matches!(&ctx, ContextKey::Posterior { hint: h, .. } if h == hint);
            for slot in 0..width {
                let mut hi = qphi.clone();
                hi.params.row_mut(ctx.clone())[slot] += 1e-5;
                let mut lo = qphi.clone();
                lo.params.row_mut(ctx.clone())[slot] -= 1e-5;
                let f = |p: &Policy| {
                    let dist = segment_dist(
                        p,
                        Conditioning::Posterior { question: q.id, hint },
                        &b(),
                    )
                    .unwrap();
                    -crate::oracle::kl(&posterior, &dist)
                };
                let fd = (f(&hi) - f(&lo)) / 2e-5;
                let an = grad.get(&ctx, slot);
                let want = if relevant { fd } else { 0.0 };
                assert!(
                    (an - want).abs() < 1e-6,
                    "{ctx:?}[{slot}]: grad {an} vs fd {want}"
                );
            }
        }
    }

    #[test]
    fn forward_divergence_sampling_approaches_the_exact_update() {
        let (suite, model) = random_fixture(1, 1.2, &mut derive_rng(13, &[15]));
        let q = &suite.questions[0];
        let qphi = random_qphi(&suite, &model, 13);
        let hint = &q.answers.members()[0];
        let width = model.vocab.width();
        let mut exact = GradVector::new(width);
        forward_kl_grad_phi_exact(&model, &qphi, q, hint, &b(), &mut exact).unwrap();

        let mut rng = derive_rng(13, &[16]);
        let mut sampled = GradVector::new(width);
        let report = forward_kl_grad_phi(
            &model, &qphi, q, hint, 20_000, 8, 1.0, &mut rng, &mut sampled,
        )
        .unwrap();
        assert!(!report.degenerate);
        assert!(report.mean_accuracy > 0.0);
        assert!(
            sampled.max_abs_diff(&exact) < 0.02,
            "diff {}",
            sampled.max_abs_diff(&exact)
        );
    }

    #[test]
    fn forward_divergence_flags_hopeless_batches() {
        let (suite, mut model) = single_uniform();
        let q = &suite.questions[0];
        for trace in crate::seq::all_segments(model.vocab, model.caps.trace) {
            let cond = Conditioning::Answer { question: q.id, trace: &trace };
            model
                .params
                .set_row(cond.context(Seq::empty()), row_with_prob(3, 0, 1.0 - 1e-12))
                .unwrap();
        }
        let qphi = random_qphi(&suite, &model, 14);
        let mut rng = derive_rng(14, &[17]);
        let mut out = GradVector::new(model.vocab.width());
        let report = forward_kl_grad_phi(
            &model, &qphi, q, &q.answers.members()[0], 16, 4, 1.0, &mut rng, &mut out,
        )
        .unwrap();
        assert!(report.degenerate);
        assert_eq!(report.mean_accuracy, 0.0);
        assert!(out.is_empty());
    }

    #[test]
    fn variance_probe_matches_theory_on_a_concentrated_set() {
        let (suite, model) = concentrated_answers(4, 0.8);
        let q = &suite.questions[0];
        let trace = Seq::from([0]);
        let mut rng = derive_rng(15, &[18]);
        let like = variance_probe(
            &model, q, &trace, ProbeMode::ScaledLikelihood, 100_000, &mut rng,
        )
        .unwrap();
        let acc =
            variance_probe(&model, q, &trace, ProbeMode::AccuracyDraw, 100_000, &mut rng).unwrap();
        for report in [&like, &acc] {
            assert!(
                (report.empirical_mean - report.exact_success).abs() <= 3.0 * report.mean_se,
                "{:?} mean {} vs exact {}",
                report.mode,
                report.empirical_mean,
                report.exact_success
            );
            assert!(
                (report.empirical_var - report.theory_var).abs() <= 3.0 * report.var_se,
                "{:?} var {} vs theory {}",
                report.mode,
                report.empirical_var,
                report.theory_var
            );
        }
        // Concentration: (|Y|-1) p^2 = 1.92 dwarfs p(1-p) = 0.16.
        assert!((like.theory_var - 1.92).abs() < 1e-9);
        assert!((acc.theory_var - 0.16).abs() < 1e-9);
        assert!(like.empirical_var > 4.0 * acc.empirical_var);
    }

    #[test]
    fn variance_probe_is_seed_deterministic() {
        let (suite, model) = concentrated_answers(2, 0.5);
        let q = &suite.questions[0];
        let trace = Seq::from([1]);
        let run = || {
            let mut rng = derive_rng(16, &[19]);
            variance_probe(&model, q, &trace, ProbeMode::AccuracyDraw, 25_000, &mut rng).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.empirical_mean.to_bits(), b.empirical_mean.to_bits());
        assert_eq!(a.empirical_var.to_bits(), b.empirical_var.to_bits());
    }

    #[test]
    fn zero_draw_and_empty_batch_requests_are_rejected() {
        let (suite, model) = single_uniform();
        let q = &suite.questions[0];
        let mut rng = derive_rng(17, &[20]);
        let err = accuracy_estimate(&model, q, &Seq::from([0]), 0, 1.0, &mut rng).unwrap_err();
        assert!(matches!(err, EstimatorError::NoAnswerDraws));
        let err = sample_weighted_batch(
            &model,
            Proposal::self_trace(&model, q.id),
            q,
            0,
            RhoMode::Likelihood,
            1.0,
            &mut rng,
        )
        .unwrap_err();
        assert!(matches!(err, EstimatorError::EmptyBatch));
    }
}
