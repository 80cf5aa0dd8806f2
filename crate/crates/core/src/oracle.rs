//! Brute-force reference quantities over fully enumerated segment spaces.
//!
//! Everything here is an exact expectation up to float rounding: marginals,
//! posteriors, divergences, variational bounds and their gradients, computed
//! by summing over every trace (and, for the importance-weighted bound, every
//! ordered tuple of traces) instead of sampling. Sampling-based estimators
//! elsewhere are judged against these values.
//!
//! The quantities follow from the two-segment factorization
//! `pi(z, y | x) = pi(z | x) * pi(y | x, z)`:
//!
//! * success probability `s(z) = sum_{y in Y_x} pi(y | x, z)`,
//! * marginal `P(Y_x | x) = sum_z pi(z | x) * s(z)`,
//! * true posterior `P(z | x, Y_x) = pi(z | x) * s(z) / P(Y_x | x)`,
//! * evidence lower bound `E_q[log s(z)] - KL(q || pi(z | x))`,
//! * importance-weighted bound `E_{z_1..K ~ q}[log mean_k rho_k]` with
//!   `rho_k = pi(z_k | x) s(z_k) / q(z_k)`.
//!
//! Enumeration cost is exponential in caps and tuple size, so every
//! enumerating call takes a [`Budget`] and refuses loudly rather than run
//! unbounded or silently truncate.

use crate::grad::GradVector;
use crate::math::log_sum_exp;
use crate::par;
use crate::policy::{Conditioning, Policy, PolicyError};
use crate::seq::{all_segments, segment_count, Seq};
use crate::task::Question;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("enumeration needs {need} segments, budget allows {max}")]
    SegmentBudget { need: u64, max: u64 },
    #[error("enumerating {k}-tuples over {support} traces needs {need} tuples, budget allows {max}")]
    TupleBudget {
        k: usize,
        support: usize,
        need: u64,
        max: u64,
    },
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Enumeration limits for exact computations.
#[derive(Clone, Copy, Debug)]
pub struct Budget {
    /// Largest segment space an exact sum may enumerate.
    pub max_traces: u64,
    /// Largest ordered tuple space the importance-weighted bound may visit.
    pub max_tuples: u64,
}

impl Default for Budget {
    fn default() -> Self {
        Budget {
            max_traces: 20_000,
            max_tuples: 4_000_000,
        }
    }
}

/// Probability distribution over an enumerated segment list, in the fixed
/// enumeration order of [`all_segments`] (length, then lexicographic).
#[derive(Clone, Debug, PartialEq)]
pub struct TraceDist {
    pub traces: Vec<Seq>,
    pub probs: Vec<f64>,
}

impl TraceDist {
    /// Probability of one segment; zero when absent.
    pub fn prob_of(&self, seg: &Seq) -> f64 {
        match self.traces.iter().position(|t| t == seg) {
            Some(i) => self.probs[i],
            None => 0.0,
        }
    }

    /// Pairs of segments and probabilities, handy for imposing the
    /// distribution on a policy.
    pub fn pairs(&self) -> Vec<(Seq, f64)> {
        self.traces.iter().cloned().zip(self.probs.iter().copied()).collect()
    }
}

fn enumerate_segments(
    policy: &Policy,
    cap: usize,
    budget: &Budget,
) -> Result<Vec<Seq>, OracleError> {
    let need = segment_count(policy.vocab, cap);
    if need > budget.max_traces {
        return Err(OracleError::SegmentBudget {
            need,
            max: budget.max_traces,
        });
    }
    Ok(all_segments(policy.vocab, cap))
}

/// Exact distribution of one conditional segment policy, by enumeration.
pub fn segment_dist(
    policy: &Policy,
    cond: Conditioning,
    budget: &Budget,
) -> Result<TraceDist, OracleError> {
    let cap = policy.cap_for(cond.role());
    let traces = enumerate_segments(policy, cap, budget)?;
    let probs = collect_par(traces.len(), |i| {
        Ok(policy.log_prob(cond, &traces[i])?.exp())
    })?;
    Ok(TraceDist { traces, probs })
}

/// Probability that the answer policy emits a member of `Y_x` given a trace.
pub fn success_prob(model: &Policy, question: &Question, trace: &Seq) -> Result<f64, OracleError> {
    Ok(log_success_prob(model, question, trace)?.exp())
}

/// Log of [`success_prob`], summed stably over the answer set.
pub fn log_success_prob(
    model: &Policy,
    question: &Question,
    trace: &Seq,
) -> Result<f64, OracleError> {
    let cond = Conditioning::Answer {
        question: question.id,
        trace,
    };
    let mut terms = Vec::with_capacity(question.answers.len());
    for y in question.answers.members() {
        terms.push(model.log_prob(cond, y)?);
    }
    Ok(log_sum_exp(&terms))
}

/// Probability that the answer merely satisfies the question's format
/// (length range), regardless of correctness.
pub fn log_format_prob(
    model: &Policy,
    question: &Question,
    trace: &Seq,
    budget: &Budget,
) -> Result<f64, OracleError> {
    let cond = Conditioning::Answer {
        question: question.id,
        trace,
    };
    let verifier = question.format_verifier();
    let answers = enumerate_segments(model, model.caps.answer, budget)?;
    let mut terms = Vec::new();
    for y in &answers {
        if verifier.accepts(y) {
            terms.push(model.log_prob(cond, y)?);
        }
    }
    Ok(log_sum_exp(&terms))
}

/// Every trace in support with its log prior and log success probability.
type TraceStats = (Vec<Seq>, Vec<f64>, Vec<f64>);

/// Per-trace log prior and log success probability, enumerated in parallel.
fn per_trace_stats(
    model: &Policy,
    question: &Question,
    budget: &Budget,
) -> Result<TraceStats, OracleError> {
    let traces = enumerate_segments(model, model.caps.trace, budget)?;
    let cond = Conditioning::Trace {
        question: question.id,
    };
    let stats = collect_par(traces.len(), |i| {
        let lp = model.log_prob(cond, &traces[i])?;
        let ls = log_success_prob(model, question, &traces[i])?;
        Ok((lp, ls))
    })?;
    let (log_prior, log_success) = stats.into_iter().unzip();
    Ok((traces, log_prior, log_success))
}

/// Runs a fallible per-index computation across the worker pool and
/// propagates the first error in index order, keeping results deterministic.
fn collect_par<R, F>(n: usize, f: F) -> Result<Vec<R>, OracleError>
where
    R: Send,
    F: Fn(usize) -> Result<R, OracleError> + Sync + Send,
{
    par::map_indexed(n, f).into_iter().collect()
}

/// Log marginal probability of answering correctly, `log P(Y_x | x)`.
pub fn log_marginal_success(
    model: &Policy,
    question: &Question,
    budget: &Budget,
) -> Result<f64, OracleError> {
    let (_, log_prior, log_success) = per_trace_stats(model, question, budget)?;
    let joint: Vec<f64> = log_prior
        .iter()
        .zip(&log_success)
        .map(|(lp, ls)| lp + ls)
        .collect();
    Ok(log_sum_exp(&joint))
}

pub fn marginal_success(
    model: &Policy,
    question: &Question,
    budget: &Budget,
) -> Result<f64, OracleError> {
    Ok(log_marginal_success(model, question, budget)?.exp())
}

/// Marginal probability of emitting a format-valid answer.
pub fn marginal_format(
    model: &Policy,
    question: &Question,
    budget: &Budget,
) -> Result<f64, OracleError> {
    let traces = enumerate_segments(model, model.caps.trace, budget)?;
    let cond = Conditioning::Trace {
        question: question.id,
    };
    let joint = collect_par(traces.len(), |i| {
        let lp = model.log_prob(cond, &traces[i])?;
        let lf = log_format_prob(model, question, &traces[i], budget)?;
        Ok(lp + lf)
    })?;
    Ok(log_sum_exp(&joint).exp())
}

/// True trace posterior `P(z | x, Y_x)`, proportional to prior times success.
pub fn true_posterior(
    model: &Policy,
    question: &Question,
    budget: &Budget,
) -> Result<TraceDist, OracleError> {
    let (traces, log_prior, log_success) = per_trace_stats(model, question, budget)?;
    let joint: Vec<f64> = log_prior
        .iter()
        .zip(&log_success)
        .map(|(lp, ls)| lp + ls)
        .collect();
    let log_z = log_sum_exp(&joint);
    let probs = joint.iter().map(|lj| (lj - log_z).exp()).collect();
    Ok(TraceDist { traces, probs })
}

/// `KL(p || q)` over aligned supports. Infinite when `q` lacks mass somewhere
/// `p` has it; zero-probability `p` entries contribute nothing.
pub fn kl(p: &TraceDist, q: &TraceDist) -> f64 {
    assert_eq!(p.traces, q.traces, "divergence needs aligned supports");
    let mut total = 0.0;
    for (&pi, &qi) in p.probs.iter().zip(&q.probs) {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return f64::INFINITY;
        }
        total += pi * (pi.ln() - qi.ln());
    }
    total
}

/// Shannon entropy in nats.
pub fn entropy(p: &TraceDist) -> f64 {
    p.probs
        .iter()
        .filter(|&&pi| pi > 0.0)
        .map(|&pi| -pi * pi.ln())
        .sum()
}

/// Evidence lower bound `E_q[log s(z)] - KL(q || pi(z|x))` for the
/// hint-conditioned posterior `q(z | x, y')`.
pub fn elbo_exact(
    model: &Policy,
    qphi: &Policy,
    question: &Question,
    hint: &Seq,
    budget: &Budget,
) -> Result<f64, OracleError> {
    let traces = enumerate_segments(model, model.caps.trace, budget)?;
    let q_cond = Conditioning::Posterior {
        question: question.id,
        hint,
    };
    let t_cond = Conditioning::Trace {
        question: question.id,
    };
    let stats = collect_par(traces.len(), |i| {
        let lq = qphi.log_prob(q_cond, &traces[i])?;
        let lp = model.log_prob(t_cond, &traces[i])?;
        let ls = log_success_prob(model, question, &traces[i])?;
        Ok((lq, lp, ls))
    })?;
    let mut expected_log_success = 0.0;
    let mut kl_to_prior = 0.0;
    for (lq, lp, ls) in stats {
        let qz = lq.exp();
        if qz == 0.0 {
            continue;
        }
        expected_log_success += qz * ls;
        kl_to_prior += qz * (lq - lp);
    }
    Ok(expected_log_success - kl_to_prior)
}

/// Support of `q` with per-trace `(log q, log rho)` where
/// `rho = pi(z|x) s(z) / q(z)`. Zero-probability traces are dropped so they
/// contribute exactly nothing to tuple sums.
fn rho_support(
    model: &Policy,
    qphi: &Policy,
    question: &Question,
    hint: &Seq,
    budget: &Budget,
) -> Result<Vec<(f64, f64)>, OracleError> {
    let traces = enumerate_segments(model, model.caps.trace, budget)?;
    let q_cond = Conditioning::Posterior {
        question: question.id,
        hint,
    };
    let t_cond = Conditioning::Trace {
        question: question.id,
    };
    let stats = collect_par(traces.len(), |i| {
        let lq = qphi.log_prob(q_cond, &traces[i])?;
        let lp = model.log_prob(t_cond, &traces[i])?;
        let ls = log_success_prob(model, question, &traces[i])?;
        Ok((lq, lp + ls - lq))
    })?;
    Ok(stats
        .into_iter()
        .filter(|(lq, _)| *lq > f64::NEG_INFINITY)
        .collect())
}

fn tuple_space(support: usize, k: usize, budget: &Budget) -> Result<u64, OracleError> {
    let need = (support as u64)
        .checked_pow(k as u32)
        .filter(|&n| n <= budget.max_tuples)
        .ok_or(OracleError::TupleBudget {
            k,
            support,
            need: (support as u64).saturating_pow(k as u32),
            max: budget.max_tuples,
        })?;
    Ok(need)
}

/// Exact importance-weighted bound of order `k`: the expectation of
/// `log((1/k) sum rho)` over every ordered `k`-tuple of posterior draws.
pub fn iwae_exact(
    model: &Policy,
    qphi: &Policy,
    question: &Question,
    hint: &Seq,
    k: usize,
    budget: &Budget,
) -> Result<f64, OracleError> {
    assert!(k >= 1, "tuple size must be positive");
    let support = rho_support(model, qphi, question, hint, budget)?;
    let n = support.len();
    tuple_space(n, k, budget)?;
    let inner = (n as u64).pow(k as u32 - 1);
    let log_k = (k as f64).ln();
    // Chunk by the leading tuple digit: chunk-major order equals flat order,
    // so the fold is bitwise identical to a sequential scan.
    let partials = collect_par(n, |first| {
        let mut acc = 0.0;
        let mut digits = vec![0usize; k];
        digits[0] = first;
        let mut log_rhos = vec![0.0; k];
        for rest in 0..inner {
            let mut r = rest;
            for d in (1..k).rev() {
                digits[d] = (r % n as u64) as usize;
                r /= n as u64;
            }
            let mut log_w = 0.0;
            for (slot, &d) in digits.iter().enumerate() {
                let (lq, lr) = support[d];
                log_w += lq;
                log_rhos[slot] = lr;
            }
            acc += log_w.exp() * (log_sum_exp(&log_rhos) - log_k);
        }
        Ok(acc)
    })?;
    Ok(partials.into_iter().sum())
}

/// Exact gradient of the log marginal success with respect to the model's
/// logits, via the posterior expectation of the joint score. Returns the
/// marginal success probability.
pub fn exact_mle_grad(
    model: &Policy,
    question: &Question,
    budget: &Budget,
    out: &mut GradVector,
) -> Result<f64, OracleError> {
    let (traces, log_prior, log_success) = per_trace_stats(model, question, budget)?;
    let joint: Vec<f64> = log_prior
        .iter()
        .zip(&log_success)
        .map(|(lp, ls)| lp + ls)
        .collect();
    let log_z = log_sum_exp(&joint);
    let t_cond = Conditioning::Trace {
        question: question.id,
    };
    for (i, z) in traces.iter().enumerate() {
        let w = (joint[i] - log_z).exp();
        if w == 0.0 {
            continue;
        }
        model.score_grad(t_cond, z, w, out)?;
        let a_cond = Conditioning::Answer {
            question: question.id,
            trace: z,
        };
        for y in question.answers.members() {
            let coeff = w * (model.log_prob(a_cond, y)? - log_success[i]).exp();
            model.score_grad(a_cond, y, coeff, out)?;
        }
    }
    Ok(log_z.exp())
}

/// Exact gradient of [`iwae_exact`] with respect to the posterior policy's
/// logits. Each tuple contributes, for every slot `j`, the coefficient
/// `log((1/k) sum rho) - normalized rho_j` on the score of its trace; summing
/// over tuples weighs each by its probability. Returns the bound value.
pub fn iwae_grad_phi_exact(
    model: &Policy,
    qphi: &Policy,
    question: &Question,
    hint: &Seq,
    k: usize,
    budget: &Budget,
    out: &mut GradVector,
) -> Result<f64, OracleError> {
    assert!(k >= 1, "tuple size must be positive");
    let traces = enumerate_segments(model, model.caps.trace, budget)?;
    let q_cond = Conditioning::Posterior {
        question: question.id,
        hint,
    };
    let t_cond = Conditioning::Trace {
        question: question.id,
    };
    let stats = collect_par(traces.len(), |i| {
        let lq = qphi.log_prob(q_cond, &traces[i])?;
        let lp = model.log_prob(t_cond, &traces[i])?;
        let ls = log_success_prob(model, question, &traces[i])?;
        Ok((lq, lp + ls - lq))
    })?;
    let live: Vec<usize> = (0..traces.len())
        .filter(|&i| stats[i].0 > f64::NEG_INFINITY)
        .collect();
    let n = live.len();
    tuple_space(n, k, budget)?;
    let inner = (n as u64).pow(k as u32 - 1);
    let log_k = (k as f64).ln();
    let partials = collect_par(n, |first| {
        let mut bound = 0.0;
        let mut coeffs = vec![0.0; n];
        let mut digits = vec![0usize; k];
        digits[0] = first;
        let mut log_rhos = vec![0.0; k];
        for rest in 0..inner {
            let mut r = rest;
            for d in (1..k).rev() {
                digits[d] = (r % n as u64) as usize;
                r /= n as u64;
            }
            let mut log_w = 0.0;
            for (slot, &d) in digits.iter().enumerate() {
                let (lq, lr) = stats[live[d]];
                log_w += lq;
                log_rhos[slot] = lr;
            }
            let lse = log_sum_exp(&log_rhos);
            let log_mean = lse - log_k;
            let w = log_w.exp();
            bound += w * log_mean;
            for (slot, &d) in digits.iter().enumerate() {
                coeffs[d] += w * (log_mean - (log_rhos[slot] - lse).exp());
            }
        }
        Ok((bound, coeffs))
    })?;
    let mut bound = 0.0;
    let mut coeffs = vec![0.0; n];
    for (b, c) in partials {
        bound += b;
        for (i, ci) in c.into_iter().enumerate() {
            coeffs[i] += ci;
        }
    }
    for (d, &coeff) in coeffs.iter().enumerate() {
        if coeff != 0.0 {
            qphi.score_grad(q_cond, &traces[live[d]], coeff, out)?;
        }
    }
    Ok(bound)
}

/// Hint-prior average of `KL(P(z|x,Y_x) || q(z|x,y'))`, the quantity the
/// posterior-training phase drives toward zero.
pub fn hint_averaged_posterior_kl(
    model: &Policy,
    qphi: &Policy,
    question: &Question,
    budget: &Budget,
) -> Result<f64, OracleError> {
    let posterior = true_posterior(model, question, budget)?;
    let mut total = 0.0;
    for (hint, &weight) in question.answers.members().iter().zip(question.hint_prior.probs()) {
        let q_dist = segment_dist(
            qphi,
            Conditioning::Posterior {
                question: question.id,
                hint,
            },
            budget,
        )?;
        total += weight * kl(&posterior, &q_dist);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{
        random_fixture, randomize_posterior, saturated_question, single_uniform, two_trace_skewed,
    };
    use crate::policy::ContextKey;
    use crate::rng::derive_rng;
    use crate::seq::Seq;

    fn b() -> Budget {
        Budget::default()
    }

    /// Posterior policy with randomized rows for every hint of the fixture.
    fn random_qphi(suite: &crate::task::TaskSuite, model: &Policy, seed: u64) -> Policy {
        let mut qphi = Policy::uniform(model.vocab, model.caps);
        let mut rng = derive_rng(seed, &[0x71]);
        randomize_posterior(&mut qphi, suite, 2.0, &mut rng);
        qphi
    }

    /// Sets `qphi(. | hint)` to the exact true posterior for every hint.
    fn impose_posterior(qphi: &mut Policy, model: &Policy, q: &crate::task::Question) {
        let post = true_posterior(model, q, &b()).unwrap();
        for hint in q.answers.members() {
            qphi.set_conditional(
                Conditioning::Posterior {
                    question: q.id,
                    hint,
                },
                &post.pairs(),
            )
            .unwrap();
        }
    }

    #[test]
    fn uniform_fixture_marginal_is_one_third() {
        let (suite, model) = single_uniform();
        let q = &suite.questions[0];
        let m = marginal_success(&model, q, &b()).unwrap();
        assert!((m - 1.0 / 3.0).abs() < 1e-15, "marginal {m}");
        let post = true_posterior(&model, q, &b()).unwrap();
        assert_eq!(post.traces.len(), 3);
        for p in &post.probs {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn skewed_fixture_posterior_concentrates() {
        let (suite, model) = two_trace_skewed(true);
        let q = &suite.questions[0];
        let m = marginal_success(&model, q, &b()).unwrap();
        assert!((m - 0.5).abs() < 1e-12, "marginal {m}");
        let post = true_posterior(&model, q, &b()).unwrap();
        assert!((post.prob_of(&Seq::from([0])) - 0.8).abs() < 1e-12);
        assert!((post.prob_of(&Seq::from([1])) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn format_marginal_counts_all_valid_lengths() {
        // Uniform fixture: every answer of length 1 is format-valid, so the
        // format marginal is 2/3 while the exact marginal is 1/3.
        let (suite, model) = single_uniform();
        let q = &suite.questions[0];
        let f = marginal_format(&model, q, &b()).unwrap();
        assert!((f - 2.0 / 3.0).abs() < 1e-15, "format marginal {f}");
    }

    #[test]
    fn kl_matches_frozen_constants() {
        let traces = vec![Seq::from([0]), Seq::from([1])];
        let p = TraceDist {
            traces: traces.clone(),
            probs: vec![0.8, 0.2],
        };
        let u = TraceDist {
            traces: traces.clone(),
            probs: vec![0.5, 0.5],
        };
        assert!((kl(&p, &u) - 0.192744757021758).abs() < 1e-15);
        assert!((kl(&u, &p) - 1.25f64.ln()).abs() < 1e-15);
        assert_eq!(kl(&p, &p), 0.0);
        let degenerate = TraceDist {
            traces,
            probs: vec![1.0, 0.0],
        };
        assert_eq!(kl(&p, &degenerate), f64::INFINITY);
        assert!(kl(&degenerate, &p).is_finite());
    }

    #[test]
    fn kl_is_nonnegative_on_random_pairs() {
        let mut rng = derive_rng(11, &[2]);
        let traces = vec![Seq::empty(), Seq::from([0]), Seq::from([1])];
        for _ in 0..50 {
            let draw = |rng: &mut rand_chacha::ChaCha8Rng| {
                let raw: Vec<f64> = (0..3).map(|_| rand::Rng::random_range(rng, 0.01..1.0)).collect();
                let z: f64 = raw.iter().sum();
                TraceDist {
                    traces: traces.clone(),
                    probs: raw.into_iter().map(|v| v / z).collect(),
                }
            };
            let p = draw(&mut rng);
            let q = draw(&mut rng);
            assert!(kl(&p, &q) >= 0.0);
        }
    }

    #[test]
    fn entropy_of_uniform_posterior_is_log_three() {
        let (suite, model) = single_uniform();
        let post = true_posterior(&model, &suite.questions[0], &b()).unwrap();
        assert!((entropy(&post) - 3.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn elbo_equals_log_marginal_minus_posterior_gap() {
        for seed in 0..30u64 {
            let mut rng = derive_rng(seed, &[3]);
            let (suite, model) = random_fixture(1 + (seed % 2) as usize, 2.0, &mut rng);
            let q = &suite.questions[0];
            let qphi = random_qphi(&suite, &model, seed);
            let hint = &q.answers.members()[0];
            let elbo = elbo_exact(&model, &qphi, q, hint, &b()).unwrap();
            let log_p = log_marginal_success(&model, q, &b()).unwrap();
            let post = true_posterior(&model, q, &b()).unwrap();
            let q_dist = segment_dist(
                &qphi,
                Conditioning::Posterior {
                    question: q.id,
                    hint,
                },
                &b(),
            )
            .unwrap();
            let gap = kl(&q_dist, &post);
            assert!(
                (elbo - (log_p - gap)).abs() < 1e-10,
                "seed {seed}: elbo {elbo} vs identity {}",
                log_p - gap
            );
            assert!(elbo <= log_p + 1e-12);
        }
    }

    #[test]
    fn elbo_collapses_at_true_posterior() {
        for seed in 0..10u64 {
            let mut rng = derive_rng(seed, &[4]);
            let (suite, model) = random_fixture(2, 2.0, &mut rng);
            let q = &suite.questions[0];
            let mut qphi = Policy::uniform(model.vocab, model.caps);
            impose_posterior(&mut qphi, &model, q);
            let log_p = log_marginal_success(&model, q, &b()).unwrap();
            for hint in q.answers.members() {
                let elbo = elbo_exact(&model, &qphi, q, hint, &b()).unwrap();
                assert!((elbo - log_p).abs() < 1e-10, "seed {seed}: {elbo} vs {log_p}");
            }
        }
    }

    #[test]
    fn single_draw_bound_equals_elbo() {
        for seed in 0..20u64 {
            let mut rng = derive_rng(seed, &[5]);
            let (suite, model) = random_fixture(1 + (seed % 2) as usize, 2.5, &mut rng);
            let q = &suite.questions[0];
            let qphi = random_qphi(&suite, &model, seed);
            let hint = &q.answers.members()[0];
            let elbo = elbo_exact(&model, &qphi, q, hint, &b()).unwrap();
            let l1 = iwae_exact(&model, &qphi, q, hint, 1, &b()).unwrap();
            assert!((l1 - elbo).abs() < 1e-12, "seed {seed}: {l1} vs {elbo}");
        }
    }

    #[test]
    fn bound_chain_is_monotone_and_capped() {
        let mut strict = false;
        for seed in 0..12u64 {
            let mut rng = derive_rng(seed, &[6]);
            let (suite, model) = random_fixture(1 + (seed % 2) as usize, 2.5, &mut rng);
            let q = &suite.questions[0];
            let qphi = random_qphi(&suite, &model, seed);
            let hint = &q.answers.members()[0];
            let log_p = log_marginal_success(&model, q, &b()).unwrap();
            let mut prev = f64::NEG_INFINITY;
            for k in 1..=3 {
                let lk = iwae_exact(&model, &qphi, q, hint, k, &b()).unwrap();
                assert!(lk >= prev - 1e-10, "seed {seed} k {k}: {lk} < {prev}");
                assert!(lk <= log_p + 1e-10, "seed {seed} k {k}: {lk} > {log_p}");
                if lk > prev + 1e-6 {
                    strict = true;
                }
                prev = lk;
            }
        }
        assert!(strict, "chain never strictly increased on mismatched fixtures");
    }

    #[test]
    fn bound_is_flat_at_true_posterior() {
        let mut rng = derive_rng(9, &[7]);
        let (suite, model) = random_fixture(2, 2.0, &mut rng);
        let q = &suite.questions[0];
        let mut qphi = Policy::uniform(model.vocab, model.caps);
        impose_posterior(&mut qphi, &model, q);
        let log_p = log_marginal_success(&model, q, &b()).unwrap();
        let hint = &q.answers.members()[1];
        for k in 1..=3 {
            let lk = iwae_exact(&model, &qphi, q, hint, k, &b()).unwrap();
            assert!((lk - log_p).abs() < 1e-10, "k {k}: {lk} vs {log_p}");
        }
    }

    /// Central finite difference of `f` with respect to one logit slot.
    fn central_diff(
        policy: &Policy,
        ctx: &ContextKey,
        slot: usize,
        h: f64,
        mut f: impl FnMut(&Policy) -> f64,
    ) -> f64 {
        let mut hi = policy.clone();
        hi.params.row_mut(ctx.clone())[slot] += h;
        let mut lo = policy.clone();
        lo.params.row_mut(ctx.clone())[slot] -= h;
        (f(&hi) - f(&lo)) / (2.0 * h)
    }

    #[test]
    fn exact_mle_grad_matches_finite_differences() {
        for seed in 0..8u64 {
            let mut rng = derive_rng(seed, &[8]);
            let (suite, model) = random_fixture(1 + (seed % 2) as usize, 1.5, &mut rng);
            let q = &suite.questions[0];
            let mut grad = GradVector::new(model.vocab.width());
            exact_mle_grad(&model, q, &b(), &mut grad).unwrap();
            let contexts: Vec<ContextKey> = model.params.contexts().cloned().collect();
            for ctx in contexts {
                for slot in 0..model.vocab.width() {
                    let fd = central_diff(&model, &ctx, slot, 1e-5, |m| {
                        log_marginal_success(m, q, &b()).unwrap()
                    });
                    let an = grad.get(&ctx, slot);
                    assert!(
                        (fd - an).abs() < 1e-6,
                        "seed {seed} {ctx:?}[{slot}]: fd {fd} vs grad {an}"
                    );
                }
            }
        }
    }

    #[test]
    fn saturated_question_has_zero_gradient() {
        let (suite, mut model) = saturated_question();
        let mut rng = derive_rng(1, &[9]);
        crate::fixtures::randomize_model(&mut model, &suite, 2.0, &mut rng);
        let q = &suite.questions[0];
        let mut grad = GradVector::new(model.vocab.width());
        let p = exact_mle_grad(&model, q, &b(), &mut grad).unwrap();
        assert!((p - 1.0).abs() < 1e-12);
        let zero = GradVector::new(model.vocab.width());
        assert!(grad.max_abs_diff(&zero) < 1e-12);
    }

    #[test]
    fn posterior_bound_gradient_matches_finite_differences() {
        for (seed, k) in [(0u64, 1usize), (1, 2), (2, 3), (3, 2)] {
            let mut rng = derive_rng(seed, &[10]);
            let (suite, model) = random_fixture(2, 1.5, &mut rng);
            let q = &suite.questions[0];
            let qphi = random_qphi(&suite, &model, seed);
            let hint = &q.answers.members()[0];
            let mut grad = GradVector::new(model.vocab.width());
            let bound = iwae_grad_phi_exact(&model, &qphi, q, hint, k, &b(), &mut grad).unwrap();
            let direct = iwae_exact(&model, &qphi, q, hint, k, &b()).unwrap();
            assert!((bound - direct).abs() < 1e-12);
            let contexts: Vec<ContextKey> = qphi.params.contexts().cloned().collect();
            for ctx in contexts {
                if ctx.role() != crate::policy::Role::Posterior {
                    continue;
                }
                if let ContextKey::Posterior { hint: h, .. } = &ctx {
                    if h != hint {
                        continue;
                    }
                }
                for slot in 0..qphi.vocab.width() {
                    let fd = central_diff(&qphi, &ctx, slot, 1e-5, |p| {
                        iwae_exact(&model, p, q, hint, k, &b()).unwrap()
                    });
                    let an = grad.get(&ctx, slot);
                    assert!(
                        (fd - an).abs() < 1e-6,
                        "seed {seed} k {k} {ctx:?}[{slot}]: fd {fd} vs grad {an}"
                    );
                }
            }
        }
    }

    #[test]
    fn budgets_refuse_oversized_enumerations() {
        let mut rng = derive_rng(5, &[11]);
        let (suite, model) = random_fixture(1, 1.0, &mut rng);
        let q = &suite.questions[0];
        let tight = Budget {
            max_traces: 3,
            max_tuples: 1_000,
        };
        match marginal_success(&model, q, &tight) {
            Err(OracleError::SegmentBudget { need: 7, max: 3 }) => {}
            other => panic!("expected segment budget refusal, got {other:?}"),
        }
        let qphi = random_qphi(&suite, &model, 5);
        let hint = &q.answers.members()[0];
        let tuple_tight = Budget {
            max_traces: 20_000,
            max_tuples: 10,
        };
        match iwae_exact(&model, &qphi, q, hint, 2, &tuple_tight) {
            Err(OracleError::TupleBudget {
                k: 2,
                support: 7,
                need: 49,
                max: 10,
            }) => {}
            other => panic!("expected tuple budget refusal, got {other:?}"),
        }
    }

    #[test]
    fn hint_averaged_divergence_vanishes_at_posterior() {
        let mut rng = derive_rng(3, &[12]);
        let (suite, model) = random_fixture(2, 2.0, &mut rng);
        let q = &suite.questions[0];
        let mut qphi = Policy::uniform(model.vocab, model.caps);
        impose_posterior(&mut qphi, &model, q);
        let v = hint_averaged_posterior_kl(&model, &qphi, q, &b()).unwrap();
        assert!(v.abs() < 1e-12, "kl {v}");
        let random = random_qphi(&suite, &model, 3);
        assert!(hint_averaged_posterior_kl(&model, &random, q, &b()).unwrap() > 1e-3);
    }
}
