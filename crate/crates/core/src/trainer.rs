//! Alternating two-phase training of the model and its trace posterior.
//!
//! Each round runs a posterior phase (model frozen, the hint-conditioned
//! `q(z | x, y')` chases the true posterior via importance-weighted
//! self-samples) followed by a model phase (posterior frozen, the model
//! ascends the order-`K` importance-weighted bound on `log P(Y_x | x)`).
//! Updates are plain momentum ascent on the logit tables.
//!
//! Reproducibility contract: every (phase, round, step, question) tuple
//! derives its own random stream from the run seed, so results are bitwise
//! independent of execution history. Checkpoints serialize the full mutable
//! state (both policies, both velocity tables, the position); a resumed run
//! continues bit-identically to an uninterrupted one.

use crate::estimators::{
    forward_kl_grad_phi, forward_kl_grad_phi_exact, iwae_grad_theta, sample_weighted_batch,
    EstimatorError, Proposal, RhoKind,
};
use crate::grad::GradVector;
use crate::oracle::{exact_mle_grad, hint_averaged_posterior_kl, log_marginal_success, Budget, OracleError};
use crate::policy::{posterior_from_trace, Conditioning, Policy, PolicyError};
use crate::rng::{child_rng, derive_rng};
use crate::task::{Question, TaskSuite};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training needs at least one question")]
    EmptySuite,
    #[error("invalid config: {0}")]
    Config(String),
    #[error("checkpoint line {line}: {msg}")]
    Checkpoint { line: usize, msg: String },
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Which half of a round is running.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Posterior,
    Model,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::Posterior => "posterior",
            Phase::Model => "model",
        }
    }
}

impl std::str::FromStr for Phase {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "posterior" => Ok(Phase::Posterior),
            "model" => Ok(Phase::Model),
            other => Err(format!("unknown phase `{other}`")),
        }
    }
}

/// Whether steps use sampled gradients or their enumerated expectations.
/// The exact mode removes all Monte Carlo noise and is the reachability
/// reference for a configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradMode {
    MonteCarlo,
    Exact,
}

impl GradMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            GradMode::MonteCarlo => "mc",
            GradMode::Exact => "exact",
        }
    }
}

impl std::str::FromStr for GradMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mc" => Ok(GradMode::MonteCarlo),
            "exact" => Ok(GradMode::Exact),
            other => Err(format!("unknown gradient mode `{other}` (expected mc or exact)")),
        }
    }
}

/// Normalization of the likelihood-style losses (posterior phase and warm
/// start). `SentenceSum` keeps the plain summed-score gradient; `DrSft`
/// divides it by a fixed divisor independent of sequence length.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LossNorm {
    SentenceSum,
    DrSft { divisor: f64 },
}

impl LossNorm {
    fn scale(&self) -> f64 {
        match self {
            LossNorm::SentenceSum => 1.0,
            LossNorm::DrSft { divisor } => 1.0 / divisor,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TrainConfig {
    pub rounds: usize,
    pub steps_phi: usize,
    pub steps_theta: usize,
    /// Posterior rollouts per question in a model step.
    pub k_rollouts: usize,
    /// Prior rollouts per question in a posterior step.
    pub m_rollouts: usize,
    /// Answer draws behind each sampled accuracy.
    pub n_answers: usize,
    /// Questions per step; 0 trains on the whole suite every step.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub rho_kind: RhoKind,
    pub temperature: f64,
    pub grad_mode: GradMode,
    pub loss_norm: LossNorm,
    /// Supervised warm-up steps teaching the answer tables the canonical
    /// answer under self-sampled traces, before any variational training.
    pub warm_start_steps: usize,
    pub warm_start_lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            rounds: 3,
            steps_phi: 200,
            steps_theta: 200,
            k_rollouts: 8,
            m_rollouts: 8,
            n_answers: 8,
            batch_size: 0,
            learning_rate: 0.5,
            momentum: 0.0,
            rho_kind: RhoKind::Accuracy,
            temperature: 1.0,
            grad_mode: GradMode::MonteCarlo,
            loss_norm: LossNorm::SentenceSum,
            warm_start_steps: 0,
            warm_start_lr: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::Config(msg));
        if self.rounds == 0 {
            return bad("rounds must be at least 1".into());
        }
        if self.k_rollouts == 0 {
            return bad("K (posterior rollouts) must be at least 1".into());
        }
        if self.m_rollouts == 0 {
            return bad("M (prior rollouts) must be at least 1".into());
        }
        if self.n_answers == 0 {
            return bad("n_answers must be at least 1".into());
        }
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.temperature <= 0.0 || !self.temperature.is_finite() {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if let LossNorm::DrSft { divisor } = self.loss_norm {
            if divisor <= 0.0 || !divisor.is_finite() {
                return bad(format!("loss divisor must be positive, got {divisor}"));
            }
        }
        if self.warm_start_lr <= 0.0 || !self.warm_start_lr.is_finite() {
            return bad(format!("warm_start_lr must be positive, got {}", self.warm_start_lr));
        }
        Ok(())
    }
}

/// Momentum ascent: `v <- momentum * v + g`, `params <- params + lr * v`.
/// Zero momentum reduces each step to plain gradient ascent exactly.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: GradVector,
}

impl Optimizer {
    pub fn new(learning_rate: f64, momentum: f64, width: usize) -> Self {
        Optimizer {
            learning_rate,
            momentum,
            velocity: GradVector::new(width),
        }
    }

    pub fn step(&mut self, policy: &mut Policy, grad: &GradVector) {
        self.velocity.scale(self.momentum);
        self.velocity.add_scaled(grad, 1.0);
        policy.params.apply_update(&self.velocity, self.learning_rate);
    }

    pub fn velocity(&self) -> &GradVector {
        &self.velocity
    }

    pub fn set_velocity(&mut self, velocity: GradVector) {
        self.velocity = velocity;
    }
}

/// Full mutable state of a run: both policies, both optimizers, and the
/// position of the next step to execute.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Policy,
    pub qphi: Policy,
    pub opt_theta: Optimizer,
    pub opt_phi: Optimizer,
    pub round: usize,
    pub phase: Phase,
    pub step: usize,
}

/// Exact and sampled diagnostics recorded after every step.
#[derive(Clone, Copy, Debug)]
pub struct StepMetrics {
    pub round: usize,
    pub phase: Phase,
    pub step: usize,
    /// Exact marginal success, averaged over the suite.
    pub mean_p: f64,
    /// Exact log marginal success, averaged over the suite.
    pub mean_log_p: f64,
    /// Mean Monte Carlo bound estimate over the step's non-degenerate
    /// batches; NaN in posterior steps, exact mode, or when all degenerate.
    pub bound_estimate: f64,
    /// Exact hint-averaged divergence from the true posterior to the trained
    /// one, averaged over the suite.
    pub mean_posterior_kl: f64,
    /// Rollout batches that carried no usable signal this step.
    pub degenerate_batches: usize,
    /// Norm of the batch-mean gradient fed to the optimizer.
    pub grad_norm: f64,
}

const TAG_WARM: u64 = 0x11;
const TAG_PHI: u64 = 0x12;
const TAG_THETA: u64 = 0x13;

fn budget() -> Budget {
    Budget::default()
}

/// Builds the initial state: uniform model, optional supervised warm start,
/// and a posterior initialized from the model's own trace tables.
pub fn init(suite: &TaskSuite, config: &TrainConfig) -> Result<TrainState, TrainError> {
    config.validate()?;
    if suite.questions.is_empty() {
        return Err(TrainError::EmptySuite);
    }
    let mut model = Policy::uniform(suite.vocab, suite.caps);
    warm_start(&mut model, suite, config)?;
    let qphi = posterior_from_trace(&model, suite);
    let width = suite.vocab.width();
    Ok(TrainState {
        model,
        qphi,
        opt_theta: Optimizer::new(config.learning_rate, config.momentum, width),
        opt_phi: Optimizer::new(config.learning_rate, config.momentum, width),
        round: 0,
        phase: Phase::Posterior,
        step: 0,
    })
}

/// Supervised warm-up: likelihood-trains each question's canonical answer
/// under traces sampled from the current model.
fn warm_start(model: &mut Policy, suite: &TaskSuite, config: &TrainConfig) -> Result<(), TrainError> {
    for ws in 0..config.warm_start_steps {
        let mut grad = GradVector::new(suite.vocab.width());
        let mut count = 0usize;
        for q in &suite.questions {
            let mut rng = derive_rng(config.seed, &[TAG_WARM, ws as u64, u64::from(q.id)]);
            let t_cond = Conditioning::Trace { question: q.id };
            for _ in 0..config.k_rollouts {
                let mut child = child_rng(&mut rng);
                let trace = model.sample(t_cond, config.temperature, &mut child)?;
                let a_cond = Conditioning::Answer {
                    question: q.id,
                    trace: &trace,
                };
                model.score_grad(a_cond, q.answers.canonical(), 1.0, &mut grad)?;
                count += 1;
            }
        }
        grad.scale(config.loss_norm.scale() / count as f64);
        model.params.apply_update(&grad, config.warm_start_lr);
    }
    Ok(())
}

/// Questions trained by step `step`: the whole suite, or a deterministic
/// cycling window of `batch_size`.
fn batch_questions<'a>(suite: &'a TaskSuite, config: &TrainConfig, step: usize) -> Vec<&'a Question> {
    let n = suite.questions.len();
    let b = if config.batch_size == 0 || config.batch_size >= n {
        n
    } else {
        config.batch_size
    };
    (0..b).map(|i| &suite.questions[(step * b + i) % n]).collect()
}

fn posterior_step(
    state: &mut TrainState,
    suite: &TaskSuite,
    config: &TrainConfig,
) -> Result<(f64, usize), TrainError> {
    let width = suite.vocab.width();
    let mut grad = GradVector::new(width);
    let mut degenerate = 0usize;
    let batch = batch_questions(suite, config, state.step);
    for q in &batch {
        match config.grad_mode {
            GradMode::MonteCarlo => {
                let mut rng = derive_rng(
                    config.seed,
                    &[TAG_PHI, state.round as u64, state.step as u64, u64::from(q.id)],
                );
                let hint = q.sample_hint(&mut rng);
                let report = forward_kl_grad_phi(
                    &state.model,
                    &state.qphi,
                    q,
                    hint,
                    config.m_rollouts,
                    config.n_answers,
                    config.temperature,
                    &mut rng,
                    &mut grad,
                )?;
                degenerate += report.degenerate as usize;
            }
            GradMode::Exact => {
                for (hint, &w) in q.answers.members().iter().zip(q.hint_prior.probs()) {
                    let mut local = GradVector::new(width);
                    forward_kl_grad_phi_exact(&state.model, &state.qphi, q, hint, &budget(), &mut local)?;
                    grad.add_scaled(&local, w);
                }
            }
        }
    }
    grad.scale(config.loss_norm.scale() / batch.len() as f64);
    let norm = grad.l2_norm();
    state.opt_phi.step(&mut state.qphi, &grad);
    Ok((norm, degenerate))
}

fn model_step(
    state: &mut TrainState,
    suite: &TaskSuite,
    config: &TrainConfig,
) -> Result<(f64, usize, f64), TrainError> {
    let width = suite.vocab.width();
    let mut grad = GradVector::new(width);
    let mut degenerate = 0usize;
    let mut bound_sum = 0.0;
    let mut bound_count = 0usize;
    let batch = batch_questions(suite, config, state.step);
    for q in &batch {
        match config.grad_mode {
            GradMode::MonteCarlo => {
                let mut rng = derive_rng(
                    config.seed,
                    &[TAG_THETA, state.round as u64, state.step as u64, u64::from(q.id)],
                );
                let hint = q.sample_hint(&mut rng);
                let rollouts = sample_weighted_batch(
                    &state.model,
                    Proposal::posterior(&state.qphi, q.id, hint),
                    q,
                    config.k_rollouts,
                    config.rho_kind.with_draws(config.n_answers),
                    config.temperature,
                    &mut rng,
                )?;
                if rollouts.degenerate {
                    degenerate += 1;
                } else {
                    bound_sum += rollouts.bound_estimate();
                    bound_count += 1;
                }
                iwae_grad_theta(&state.model, q, &rollouts, &mut grad)?;
            }
            GradMode::Exact => {
                exact_mle_grad(&state.model, q, &budget(), &mut grad)?;
            }
        }
    }
    grad.scale(1.0 / batch.len() as f64);
    let norm = grad.l2_norm();
    state.opt_theta.step(&mut state.model, &grad);
    let bound = if bound_count > 0 {
        bound_sum / bound_count as f64
    } else {
        f64::NAN
    };
    Ok((norm, degenerate, bound))
}

/// Exact suite-level diagnostics of the current state.
pub fn measure(state: &TrainState, suite: &TaskSuite) -> Result<(f64, f64, f64), TrainError> {
    let mut mean_p = 0.0;
    let mut mean_log_p = 0.0;
    let mut mean_kl = 0.0;
    for q in &suite.questions {
        let lp = log_marginal_success(&state.model, q, &budget())?;
        mean_p += lp.exp();
        mean_log_p += lp;
        mean_kl += hint_averaged_posterior_kl(&state.model, &state.qphi, q, &budget())?;
    }
    let n = suite.questions.len() as f64;
    Ok((mean_p / n, mean_log_p / n, mean_kl / n))
}

/// Executes the step at the state's position and advances it. Returns `None`
/// once every round has finished.
pub fn advance_one(
    state: &mut TrainState,
    suite: &TaskSuite,
    config: &TrainConfig,
) -> Result<Option<StepMetrics>, TrainError> {
    loop {
        if state.round >= config.rounds {
            return Ok(None);
        }
        let limit = match state.phase {
            Phase::Posterior => config.steps_phi,
            Phase::Model => config.steps_theta,
        };
        if state.step >= limit {
            state.step = 0;
            match state.phase {
                Phase::Posterior => state.phase = Phase::Model,
                Phase::Model => {
                    state.phase = Phase::Posterior;
                    state.round += 1;
                }
            }
            continue;
        }
        let position = (state.round, state.phase, state.step);
        let (grad_norm, degenerate, bound) = match state.phase {
            Phase::Posterior => {
                let (norm, degenerate) = posterior_step(state, suite, config)?;
                (norm, degenerate, f64::NAN)
            }
            Phase::Model => model_step(state, suite, config)?,
        };
        let (mean_p, mean_log_p, mean_posterior_kl) = measure(state, suite)?;
        state.step += 1;
        return Ok(Some(StepMetrics {
            round: position.0,
            phase: position.1,
            step: position.2,
            mean_p,
            mean_log_p,
            bound_estimate: bound,
            mean_posterior_kl,
            degenerate_batches: degenerate,
            grad_norm,
        }));
    }
}

/// Runs from the state's position to completion.
pub fn run(
    state: &mut TrainState,
    suite: &TaskSuite,
    config: &TrainConfig,
) -> Result<Vec<StepMetrics>, TrainError> {
    let mut metrics = Vec::new();
    while let Some(m) = advance_one(state, suite, config)? {
        metrics.push(m);
    }
    Ok(metrics)
}

/// Fresh initialization plus a full run.
pub fn train(
    suite: &TaskSuite,
    config: &TrainConfig,
) -> Result<(TrainState, Vec<StepMetrics>), TrainError> {
    let mut state = init(suite, config)?;
    let metrics = run(&mut state, suite, config)?;
    Ok((state, metrics))
}

/// Serializes the full mutable state. The float formatting round-trips
/// bitwise, so save/load/continue reproduces an uninterrupted run exactly.
pub fn save_checkpoint(state: &TrainState, suite: &TaskSuite, config: &TrainConfig) -> String {
    let mut out = String::new();
    out.push_str("checkpoint v1\n");
    out.push_str(&format!("suite {}\n", suite.name));
    out.push_str(&format!("seed {}\n", config.seed));
    out.push_str(&format!("vocab {}\n", suite.vocab.size()));
    out.push_str(&format!("caps {} {}\n", suite.caps.trace, suite.caps.answer));
    out.push_str(&format!(
        "position {} {} {}\n",
        state.round,
        state.phase.as_str(),
        state.step
    ));
    for (name, body) in [
        ("model", state.model.params.to_text()),
        ("posterior", state.qphi.params.to_text()),
        ("velocity-model", state.opt_theta.velocity().to_text()),
        ("velocity-posterior", state.opt_phi.velocity().to_text()),
    ] {
        out.push_str(&format!("[{name}]\n"));
        out.push_str(&body);
    }
    out.push_str("[end]\n");
    out
}

/// Restores a state saved by [`save_checkpoint`], verifying it belongs to
/// this suite and seed.
pub fn load_checkpoint(
    text: &str,
    suite: &TaskSuite,
    config: &TrainConfig,
) -> Result<TrainState, TrainError> {
    config.validate()?;
    let fail = |line: usize, msg: String| TrainError::Checkpoint { line, msg };
    let mut position: Option<(usize, Phase, usize)> = None;
    let mut sections: Vec<(String, String)> = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let lno = idx + 1;
        if let Some(name) = line.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
            sections.push((name.to_string(), String::new()));
            continue;
        }
        if let Some((_, body)) = sections.last_mut() {
            body.push_str(line);
            body.push('\n');
            continue;
        }
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("checkpoint") => {
                if parts.next() != Some("v1") {
                    return Err(fail(lno, "unsupported checkpoint version".into()));
                }
            }
            Some("suite") => {
                let name = parts.next().unwrap_or("");
                if name != suite.name {
                    return Err(fail(
                        lno,
                        format!("checkpoint belongs to suite `{name}`, not `{}`", suite.name),
                    ));
                }
            }
            Some("seed") => {
                let seed: u64 = parts
                    .next()
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| fail(lno, "bad seed".into()))?;
                if seed != config.seed {
                    return Err(fail(
                        lno,
                        format!("checkpoint seed {seed} does not match config seed {}", config.seed),
                    ));
                }
            }
            Some("vocab") => {
                let v: usize = parts
                    .next()
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| fail(lno, "bad vocab".into()))?;
                if v != suite.vocab.size() {
                    return Err(fail(lno, format!("vocab {v} does not match suite", )));
                }
            }
            Some("caps") => {
                let t: usize = parts
                    .next()
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| fail(lno, "bad caps".into()))?;
                let a: usize = parts
                    .next()
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| fail(lno, "bad caps".into()))?;
                if t != suite.caps.trace || a != suite.caps.answer {
                    return Err(fail(lno, "caps do not match suite".into()));
                }
            }
            Some("position") => {
                let round: usize = parts
                    .next()
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| fail(lno, "bad position".into()))?;
                let phase: Phase = parts
                    .next()
                    .ok_or_else(|| fail(lno, "bad position".into()))?
                    .parse()
                    .map_err(|e: String| fail(lno, e))?;
                let step: usize = parts
                    .next()
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| fail(lno, "bad position".into()))?;
                position = Some((round, phase, step));
            }
            Some(other) => return Err(fail(lno, format!("unknown field `{other}`"))),
            None => {}
        }
    }
    let (round, phase, step) = position.ok_or_else(|| fail(0, "missing position".into()))?;
    let width = suite.vocab.width();
    let mut model_text = None;
    let mut posterior_text = None;
    let mut vel_theta_text = None;
    let mut vel_phi_text = None;
    for (name, body) in sections {
        match name.as_str() {
            "model" => model_text = Some(body),
            "posterior" => posterior_text = Some(body),
            "velocity-model" => vel_theta_text = Some(body),
            "velocity-posterior" => vel_phi_text = Some(body),
            "end" => {}
            other => return Err(fail(0, format!("unknown section `[{other}]`"))),
        }
    }
    let missing = |what: &str| fail(0, format!("missing section `[{what}]`"));
    let model_params = crate::policy::ParamTable::from_text(
        &model_text.ok_or_else(|| missing("model"))?,
        width,
    )?;
    let posterior_params = crate::policy::ParamTable::from_text(
        &posterior_text.ok_or_else(|| missing("posterior"))?,
        width,
    )?;
    let vel_theta =
        GradVector::from_text(&vel_theta_text.ok_or_else(|| missing("velocity-model"))?, width)?;
    let vel_phi = GradVector::from_text(
        &vel_phi_text.ok_or_else(|| missing("velocity-posterior"))?,
        width,
    )?;
    let mut model = Policy::uniform(suite.vocab, suite.caps);
    model.params = model_params;
    let mut qphi = Policy::uniform(suite.vocab, suite.caps);
    qphi.params = posterior_params;
    let mut opt_theta = Optimizer::new(config.learning_rate, config.momentum, width);
    opt_theta.set_velocity(vel_theta);
    let mut opt_phi = Optimizer::new(config.learning_rate, config.momentum, width);
    opt_phi.set_velocity(vel_phi);
    Ok(TrainState {
        model,
        qphi,
        opt_theta,
        opt_phi,
        round,
        phase,
        step,
    })
}
