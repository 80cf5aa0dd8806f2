//! Gradient views of common post-training recipes on the same tabular
//! policies, each in a sampled and an enumerated form.
//!
//! All of these act on the trace policy `pi(z | x)` and differ only in the
//! scalar sitting in front of the same divergence pull: with marginal
//! success `P = P(Y_x | x)` and the success posterior `P(z | x, Y_x)`,
//!
//! * rejection fine-tuning pulls with weight `P_ref` toward the *reference*
//!   policy's success posterior;
//! * binary-reward policy gradient is the same pull at reference = current
//!   policy, weight `P` (optionally adding the answer-segment improvement
//!   term `E_pi[grad pi(Y_x | x, z)]`);
//! * group-normalized advantages rescale that pull by `1 / sqrt(P (1 - P))`,
//!   giving weight `sqrt(P / (1 - P))`;
//! * a three-level shaped reward (correct / format-only / rest) splits into a
//!   correctness pull weighted `(alpha - beta) P` plus a format pull weighted
//!   `(beta - gamma) P_fmt`, and the debiased variant divides each pull by
//!   its batch probability, leaving weights `(alpha - beta)` and
//!   `(beta - gamma)`;
//! * self-proposal bound training draws traces from the current policy
//!   itself, so every importance ratio is exactly 1 and the weights reduce to
//!   normalized success probabilities;
//! * the reverse-divergence policy gradient trains the posterior with reward
//!   `log pi(Y_x | x, z) - log(q(z) / pi(z | x))` and equals the single-draw
//!   bound gradient.
//!
//! [`behavior_policy_variance`] gives the exact single-draw variance of the
//! marginal estimator under an arbitrary behavior distribution, minimized (at
//! zero) by the true posterior.

use crate::estimators::{
    iwae_grad_theta, sample_weighted_batch, EstimatorError, Proposal, RhoMode,
};
use crate::grad::GradVector;
use crate::oracle::{self, Budget, TraceDist};
use crate::policy::{Conditioning, Policy};
use crate::rng::child_rng;
use crate::seq::Seq;
use crate::task::Question;
use rand_chacha::ChaCha8Rng;

/// Scalar diagnostics of one method's gradient on one question. Exact routes
/// report `group_size` 0 and exact probabilities in place of batch fractions.
#[derive(Clone, Debug)]
pub struct GradReport {
    pub method: &'static str,
    pub question: u32,
    /// Effective weight on the correctness pull.
    pub weight: f64,
    /// Weight on the format pull, for methods that have one.
    pub weight_format: Option<f64>,
    /// Batch success fraction, or the exact marginal on exact routes.
    pub accuracy: f64,
    pub grad_norm: f64,
    pub group_size: usize,
    /// The group carried no usable signal (no successes, or zero advantage
    /// spread) and the corresponding pull was skipped.
    pub degenerate: bool,
}

#[allow(clippy::too_many_arguments)]
fn report(
    method: &'static str,
    question: u32,
    weight: f64,
    weight_format: Option<f64>,
    accuracy: f64,
    out: &GradVector,
    group_size: usize,
    degenerate: bool,
) -> GradReport {
    GradReport {
        method,
        question,
        weight,
        weight_format,
        accuracy,
        grad_norm: out.l2_norm(),
        group_size,
        degenerate,
    }
}

/// One (trace, answer) rollout with both verifier verdicts.
struct Rollout {
    trace: Seq,
    correct: bool,
    format_ok: bool,
}

fn draw_rollouts(
    sampler: &Policy,
    question: &Question,
    group: usize,
    temperature: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Rollout>, EstimatorError> {
    if group == 0 {
        return Err(EstimatorError::EmptyBatch);
    }
    let t_cond = Conditioning::Trace {
        question: question.id,
    };
    let exact = question.exact_verifier();
    let format = question.format_verifier();
    let mut out = Vec::with_capacity(group);
    for _ in 0..group {
        let mut child = child_rng(rng);
        let trace = sampler.sample(t_cond, temperature, &mut child)?;
        let answer = sampler.sample(
            Conditioning::Answer {
                question: question.id,
                trace: &trace,
            },
            temperature,
            &mut child,
        )?;
        out.push(Rollout {
            trace,
            correct: exact.accepts(&answer),
            format_ok: format.accepts(&answer),
        });
    }
    Ok(out)
}

/// Rejection fine-tuning: rollouts come from a frozen reference policy and
/// the kept (correct) traces get likelihood-trained under the current model,
/// `(1/G) sum_g 1[correct] grad log pi_theta(z_g | x)`.
pub fn rft_grad(
    model: &Policy,
    reference: &Policy,
    question: &Question,
    group: usize,
    temperature: f64,
    rng: &mut ChaCha8Rng,
    out: &mut GradVector,
) -> Result<GradReport, EstimatorError> {
    let rollouts = draw_rollouts(reference, question, group, temperature, rng)?;
    let t_cond = Conditioning::Trace {
        question: question.id,
    };
    let mut kept = 0usize;
    for r in &rollouts {
        if r.correct {
            kept += 1;
            model.score_grad(t_cond, &r.trace, 1.0 / group as f64, out)?;
        }
    }
    let accuracy = kept as f64 / group as f64;
    Ok(report("rft", question.id, accuracy, None, accuracy, out, group, kept == 0))
}

/// Enumerated rejection fine-tuning gradient via the posterior route: the
/// reference marginal times the expectation of the current policy's trace
/// score under the reference success posterior.
pub fn rft_grad_exact(
    model: &Policy,
    reference: &Policy,
    question: &Question,
    budget: &Budget,
    out: &mut GradVector,
) -> Result<GradReport, EstimatorError> {
    let p_ref = oracle::marginal_success(reference, question, budget)?;
    let posterior = oracle::true_posterior(reference, question, budget)?;
    let t_cond = Conditioning::Trace {
        question: question.id,
    };
    for (z, w) in posterior.traces.iter().zip(&posterior.probs) {
        let coeff = p_ref * w;
        if coeff > 0.0 {
            model.score_grad(t_cond, z, coeff, out)?;
        }
    }
    Ok(report("rft-exact", question.id, p_ref, None, p_ref, out, 0, p_ref == 0.0))
}

/// On-policy binary-reward policy gradient,
/// `(1/G) sum_g 1[correct] grad log pi(z_g | x)`, optionally adding the
/// answer-segment term `1[correct] grad log pi(y_g | x, z_g)`.
pub fn birl_grad(
    model: &Policy,
    question: &Question,
    group: usize,
    include_answer_term: bool,
    temperature: f64,
    rng: &mut ChaCha8Rng,
    out: &mut GradVector,
) -> Result<GradReport, EstimatorError> {
    if group == 0 {
        return Err(EstimatorError::EmptyBatch);
    }
    let t_cond = Conditioning::Trace {
        question: question.id,
    };
    let exact = question.exact_verifier();
    let mut correct = 0usize;
    let each = 1.0 / group as f64;
    for _ in 0..group {
        let mut child = child_rng(rng);
        let trace = model.sample(t_cond, temperature, &mut child)?;
        let a_cond = Conditioning::Answer {
            question: question.id,
            trace: &trace,
        };
        let answer = model.sample(a_cond, temperature, &mut child)?;
        if exact.accepts(&answer) {
            correct += 1;
            model.score_grad(t_cond, &trace, each, out)?;
            if include_answer_term {
                model.score_grad(a_cond, &answer, each, out)?;
            }
        }
    }
    let accuracy = correct as f64 / group as f64;
    Ok(report("birl", question.id, accuracy, None, accuracy, out, group, correct == 0))
}

/// Enumerated binary-reward gradient via the direct route,
/// `sum_z pi(z|x) s(z) grad log pi(z|x)`, with the optional answer term
/// `sum_z pi(z|x) sum_{y in Y_x} pi(y|x,z) grad log pi(y|x,z)`.
pub fn birl_grad_exact(
    model: &Policy,
    question: &Question,
    include_answer_term: bool,
    budget: &Budget,
    out: &mut GradVector,
) -> Result<GradReport, EstimatorError> {
    let t_cond = Conditioning::Trace {
        question: question.id,
    };
    let prior = oracle::segment_dist(model, t_cond, budget)?;
    let mut p = 0.0;
    for (z, pz) in prior.traces.iter().zip(&prior.probs) {
        if *pz == 0.0 {
            continue;
        }
        let a_cond = Conditioning::Answer {
            question: question.id,
            trace: z,
        };
        let s = oracle::success_prob(model, question, z)?;
        p += pz * s;
        if s > 0.0 {
            model.score_grad(t_cond, z, pz * s, out)?;
        }
        if include_answer_term {
            for y in question.answers.members() {
                let py = model.log_prob(a_cond, y)?.exp();
                if py > 0.0 {
                    model.score_grad(a_cond, y, pz * py, out)?;
                }
            }
        }
    }
    Ok(report("birl-exact", question.id, p, None, p, out, 0, p == 0.0))
}

/// Group-normalized advantage policy gradient: rewards are centered by the
/// group mean and divided by the group's reward deviation (population by
/// default, Bessel-corrected with `sample_std`). A group with zero spread
/// carries no signal and is skipped.
pub fn grpo_grad(
    model: &Policy,
    question: &Question,
    group: usize,
    sample_std: bool,
    temperature: f64,
    rng: &mut ChaCha8Rng,
    out: &mut GradVector,
) -> Result<GradReport, EstimatorError> {
    let rollouts = draw_rollouts(model, question, group, temperature, rng)?;
    let correct = rollouts.iter().filter(|r| r.correct).count();
    let accuracy = correct as f64 / group as f64;
    let divisor = if sample_std { group.saturating_sub(1) } else { group };
    let variance = if divisor == 0 {
        0.0
    } else {
        rollouts
            .iter()
            .map(|r| {
                let d = r.correct as u8 as f64 - accuracy;
                d * d
            })
            .sum::<f64>()
            / divisor as f64
    };
    if variance == 0.0 {
        return Ok(report("grpo", question.id, 0.0, None, accuracy, out, group, true));
    }
    let std = variance.sqrt();
    let t_cond = Conditioning::Trace {
        question: question.id,
    };
    for r in &rollouts {
        let advantage = (r.correct as u8 as f64 - accuracy) / std;
        model.score_grad(t_cond, &r.trace, advantage / group as f64, out)?;
    }
    let weight = (accuracy / (1.0 - accuracy)).sqrt();
    Ok(report("grpo", question.id, weight, None, accuracy, out, group, false))
}

/// Enumerated limit of the group-normalized gradient:
/// `sum_z pi(z|x) (s(z) - P) / sqrt(P (1 - P)) grad log pi(z|x)`, which is
/// the binary-reward pull rescaled to weight `sqrt(P / (1 - P))`. Saturated
/// questions (P of 0 or 1) have zero spread and are skipped.
pub fn grpo_grad_exact(
    model: &Policy,
    question: &Question,
    budget: &Budget,
    out: &mut GradVector,
) -> Result<GradReport, EstimatorError> {
    let t_cond = Conditioning::Trace {
        question: question.id,
    };
    let prior = oracle::segment_dist(model, t_cond, budget)?;
    let p = oracle::marginal_success(model, question, budget)?;
    let spread = p * (1.0 - p);
    if spread <= 0.0 {
        return Ok(report("grpo-exact", question.id, 0.0, None, p, out, 0, true));
    }
    let std = spread.sqrt();
    for (z, pz) in prior.traces.iter().zip(&prior.probs) {
        if *pz == 0.0 {
            continue;
        }
        let s = oracle::success_prob(model, question, z)?;
        model.score_grad(t_cond, z, pz * (s - p) / std, out)?;
    }
    let weight = (p / (1.0 - p)).sqrt();
    Ok(report("grpo-exact", question.id, weight, None, p, out, 0, false))
}

/// Three-level reward: `alpha` for a correct answer, `beta` for a
/// format-valid but wrong one, `gamma` otherwise. The `debiased` variant
/// divides each indicator by its batch-estimated probability, which removes
/// the success and format probabilities from the pull weights (and drops the
/// mean-zero `gamma` term).
#[derive(Clone, Copy, Debug)]
pub struct RewardShaping {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub debiased: bool,
}

/// Policy gradient of the shaped reward over one on-policy group.
pub fn general_reward_grad(
    model: &Policy,
    question: &Question,
    shaping: RewardShaping,
    group: usize,
    temperature: f64,
    rng: &mut ChaCha8Rng,
    out: &mut GradVector,
) -> Result<GradReport, EstimatorError> {
    let rollouts = draw_rollouts(model, question, group, temperature, rng)?;
    let g = group as f64;
    let correct = rollouts.iter().filter(|r| r.correct).count();
    let formatted = rollouts.iter().filter(|r| r.format_ok).count();
    let p_hat = correct as f64 / g;
    let f_hat = formatted as f64 / g;
    let t_cond = Conditioning::Trace {
        question: question.id,
    };
    let (weight, weight_format, degenerate);
    if shaping.debiased {
        degenerate = correct == 0 || formatted == 0;
        weight = shaping.alpha - shaping.beta;
        weight_format = shaping.beta - shaping.gamma;
        for r in &rollouts {
            let mut coeff = 0.0;
            if r.correct && correct > 0 {
                coeff += (shaping.alpha - shaping.beta) / correct as f64;
            }
            if r.format_ok && formatted > 0 {
                coeff += (shaping.beta - shaping.gamma) / formatted as f64;
            }
            if coeff != 0.0 {
                model.score_grad(t_cond, &r.trace, coeff, out)?;
            }
        }
    } else {
        degenerate = correct == 0 && formatted == 0;
        weight = (shaping.alpha - shaping.beta) * p_hat;
        weight_format = (shaping.beta - shaping.gamma) * f_hat;
        for r in &rollouts {
            let reward = if r.correct {
                shaping.alpha
            } else if r.format_ok {
                shaping.beta
            } else {
                shaping.gamma
            };
            if reward != 0.0 {
                model.score_grad(t_cond, &r.trace, reward / g, out)?;
            }
        }
    }
    Ok(report(
        "shaped",
        question.id,
        weight,
        Some(weight_format),
        p_hat,
        out,
        group,
        degenerate,
    ))
}

/// Enumerated shaped-reward gradient, split into its two pulls:
/// `(alpha-beta) sum_z pi(z) s(z) grad log pi(z|x)`
/// `+ (beta-gamma) sum_z pi(z) f(z) grad log pi(z|x)`
/// `+ gamma * 0` (the constant reward level has zero expected score). The
/// debiased variant divides the pulls by `P` and `P_fmt` respectively.
pub fn general_reward_grad_exact(
    model: &Policy,
    question: &Question,
    shaping: RewardShaping,
    budget: &Budget,
    out: &mut GradVector,
) -> Result<GradReport, EstimatorError> {
    let t_cond = Conditioning::Trace {
        question: question.id,
    };
    let prior = oracle::segment_dist(model, t_cond, budget)?;
    let p = oracle::marginal_success(model, question, budget)?;
    let p_fmt = oracle::marginal_format(model, question, budget)?;
    let (correct_scale, format_scale, weight, weight_format) = if shaping.debiased {
        (
            if p > 0.0 { (shaping.alpha - shaping.beta) / p } else { 0.0 },
            if p_fmt > 0.0 { (shaping.beta - shaping.gamma) / p_fmt } else { 0.0 },
            shaping.alpha - shaping.beta,
            shaping.beta - shaping.gamma,
        )
    } else {
        (
            shaping.alpha - shaping.beta,
            shaping.beta - shaping.gamma,
            (shaping.alpha - shaping.beta) * p,
            (shaping.beta - shaping.gamma) * p_fmt,
        )
    };
    for (z, pz) in prior.traces.iter().zip(&prior.probs) {
        if *pz == 0.0 {
            continue;
        }
        let s = oracle::success_prob(model, question, z)?;
        let f = oracle::log_format_prob(model, question, z, budget)?.exp();
        let coeff = pz * (correct_scale * s + format_scale * f);
        if coeff != 0.0 {
            model.score_grad(t_cond, z, coeff, out)?;
        }
    }
    let degenerate = shaping.debiased && (p == 0.0 || p_fmt == 0.0);
    Ok(report(
        "shaped-exact",
        question.id,
        weight,
        Some(weight_format),
        p,
        out,
        0,
        degenerate,
    ))
}

/// Bound training with the model as its own proposal: traces are self-samples
/// so every importance ratio is exactly 1 and the normalized weights reduce
/// to relative success probabilities. The gradient is the full joint score
/// `sum_k w~_k grad log pi(z_k, Y_x | x)`.
pub fn verifree_grad(
    model: &Policy,
    question: &Question,
    group: usize,
    temperature: f64,
    rng: &mut ChaCha8Rng,
    out: &mut GradVector,
) -> Result<GradReport, EstimatorError> {
    let batch = sample_weighted_batch(
        model,
        Proposal::self_trace(model, question.id),
        question,
        group,
        RhoMode::Likelihood,
        temperature,
        rng,
    )?;
    if !batch.degenerate {
        iwae_grad_theta(model, question, &batch, out)?;
    }
    let mean_success = batch.mean_success_factor();
    Ok(report(
        "verifree",
        question.id,
        mean_success,
        None,
        mean_success,
        out,
        group,
        batch.degenerate,
    ))
}

/// Policy-gradient posterior update with reward
/// `log pi(Y_x|x,z) - log(q(z) / pi(z|x))`: each of `m` posterior draws
/// contributes `(reward - 1) / m` times its score. Draws with zero success
/// probability carry an infinite reward and are skipped (flagged degenerate).
#[allow(clippy::too_many_arguments)]
pub fn reverse_kl_pg_phi(
    model: &Policy,
    qphi: &Policy,
    question: &Question,
    hint: &Seq,
    m: usize,
    temperature: f64,
    rng: &mut ChaCha8Rng,
    out: &mut GradVector,
) -> Result<GradReport, EstimatorError> {
    if m == 0 {
        return Err(EstimatorError::EmptyBatch);
    }
    let q_cond = Conditioning::Posterior {
        question: question.id,
        hint,
    };
    let t_cond = Conditioning::Trace {
        question: question.id,
    };
    let mut degenerate = false;
    let mut reward_sum = 0.0;
    for _ in 0..m {
        let mut child = child_rng(rng);
        let z = qphi.sample(q_cond, temperature, &mut child)?;
        let reward = oracle::log_success_prob(model, question, &z)?
            + model.log_prob(t_cond, &z)?
            - qphi.log_prob(q_cond, &z)?;
        if !reward.is_finite() {
            degenerate = true;
            continue;
        }
        reward_sum += reward;
        qphi.score_grad(q_cond, &z, (reward - 1.0) / m as f64, out)?;
    }
    let mean_reward = reward_sum / m as f64;
    Ok(report(
        "reverse-kl-pg",
        question.id,
        mean_reward,
        None,
        f64::NAN,
        out,
        m,
        degenerate,
    ))
}

/// Enumerated counterpart of [`reverse_kl_pg_phi`]:
/// `sum_z q(z) (reward(z) - 1) grad log q(z)`, which equals the single-draw
/// bound gradient for the posterior.
pub fn reverse_kl_pg_phi_exact(
    model: &Policy,
    qphi: &Policy,
    question: &Question,
    hint: &Seq,
    budget: &Budget,
    out: &mut GradVector,
) -> Result<GradReport, EstimatorError> {
    let q_cond = Conditioning::Posterior {
        question: question.id,
        hint,
    };
    let t_cond = Conditioning::Trace {
        question: question.id,
    };
    let q_dist = oracle::segment_dist(qphi, q_cond, budget)?;
    let mut mean_reward = 0.0;
    for (z, qz) in q_dist.traces.iter().zip(&q_dist.probs) {
        if *qz == 0.0 {
            continue;
        }
        let reward = oracle::log_success_prob(model, question, z)?
            + model.log_prob(t_cond, z)?
            - qz.ln();
        mean_reward += qz * reward;
        qphi.score_grad(q_cond, z, qz * (reward - 1.0), out)?;
    }
    Ok(report(
        "reverse-kl-pg-exact",
        question.id,
        mean_reward,
        None,
        f64::NAN,
        out,
        0,
        false,
    ))
}

/// Exact single-draw variance of the importance-sampled marginal estimator
/// `pi(z|x) s(z) / q(z)` under a behavior distribution `q`:
/// `P^2 (sum_z P(z|x,Y_x)^2 / q(z) - 1)`. Zero exactly when `q` is the true
/// posterior; infinite when `q` misses part of the posterior's support.
pub fn behavior_policy_variance(
    model: &Policy,
    question: &Question,
    behavior: &TraceDist,
    budget: &Budget,
) -> Result<f64, EstimatorError> {
    let posterior = oracle::true_posterior(model, question, budget)?;
    assert_eq!(
        posterior.traces, behavior.traces,
        "behavior distribution must align with the enumerated trace space"
    );
    let p = oracle::marginal_success(model, question, budget)?;
    let mut second_moment_ratio = 0.0;
    for (post, q) in posterior.probs.iter().zip(&behavior.probs) {
        if *post == 0.0 {
            continue;
        }
        if *q == 0.0 {
            return Ok(f64::INFINITY);
        }
        second_moment_ratio += post * post / q;
    }
    Ok(p * p * (second_moment_ratio - 1.0))
}
