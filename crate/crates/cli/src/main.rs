//! Command-line harness around the trace-policy laboratory.
//!
//! Every subcommand reads a `key = value` config (all keys optional unless
//! noted), writes its declared files plus a `manifest.txt` under `--out`, and
//! machine-checks its own pass/fail predicate into the manifest. Exit status:
//! 0 on success, 1 on an internal invariant violation or a failed check,
//! 2 on a configuration error with a single-line diagnostic on stderr.
//!
//! Outputs are deterministic in (config, seed) and independent of `--threads`.

mod config;
mod manifest;

use clap::{Args, Parser, Subcommand};
use config::{Config, ConfigError};
use manifest::Manifest;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use tracelab_core::baselines::{
    birl_grad_exact, general_reward_grad_exact, grpo_grad_exact, reverse_kl_pg_phi_exact,
    rft_grad_exact, RewardShaping,
};
use tracelab_core::checks;
use tracelab_core::estimators::{
    answer_grad_exact, sample_weighted_batch, variance_probe, EstimatorError, ProbeMode, Proposal,
    RhoMode,
};
use tracelab_core::fixtures::{accuracy_ladder, concentrated_answers, random_fixture, randomize_posterior};
use tracelab_core::oracle::{
    self, exact_mle_grad, hint_averaged_posterior_kl, iwae_exact, iwae_grad_phi_exact,
    log_marginal_success, true_posterior, Budget, OracleError,
};
use tracelab_core::policy::{posterior_from_trace, PolicyError};
use tracelab_core::rng::{child_rng, derive_rng};
use tracelab_core::task::{gen_task_suite, SuiteFamily, TaskError, TaskSuite};
use tracelab_core::trainer::{self, GradMode, LossNorm, TrainConfig, TrainError};
use tracelab_core::GradVector;

#[derive(Parser)]
#[command(
    name = "tracelab",
    version,
    about = "Exactly enumerable latent-trace policies: training runs and estimator diagnostics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a task suite and write its text serialization.
    GenSuite(CommonArgs),
    /// Run the two-phase training loop; writes metrics.csv and checkpoint.txt.
    Train(CommonArgs),
    /// Evaluate a saved checkpoint question by question.
    Eval(CommonArgs),
    /// Estimate single-draw success-estimator variances against closed forms.
    ProbeVariance(CommonArgs),
    /// Exact and sampled evidence bounds as the rollout count K grows.
    BoundSweep(CommonArgs),
    /// Exact-gradient identities tying the training objectives together.
    CompareObjectives(CommonArgs),
    /// Correctness-weight growth with question accuracy, on matched fixtures.
    BiasLadder(CommonArgs),
    /// Run the fast oracle/estimator property suite; nonzero exit on failure.
    OracleCheck(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Config file (`key = value`, `#` comments). Missing keys use defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, created if absent.
    #[arg(long)]
    out: PathBuf,
    /// Overrides every `*.seed` key the command consumes.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (ignored in sequential builds). Never affects outputs.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Internal(String),
    #[error("{failed} of {total} checks failed (see manifest)")]
    ChecksFailed { failed: usize, total: usize },
}

impl CliError {
    fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Config(_) => ExitCode::from(2),
            _ => ExitCode::from(1),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<TaskError> for CliError {
    fn from(e: TaskError) -> Self {
        CliError::Config(format!("suite: {e}"))
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) | TrainError::EmptySuite | TrainError::Checkpoint { .. } => {
                CliError::Config(e.to_string())
            }
            other => CliError::Internal(other.to_string()),
        }
    }
}

impl From<OracleError> for CliError {
    fn from(e: OracleError) -> Self {
        CliError::Internal(e.to_string())
    }
}

impl From<EstimatorError> for CliError {
    fn from(e: EstimatorError) -> Self {
        CliError::Internal(e.to_string())
    }
}

impl From<PolicyError> for CliError {
    fn from(e: PolicyError) -> Self {
        CliError::Internal(e.to_string())
    }
}

impl From<checks::CheckError> for CliError {
    fn from(e: checks::CheckError) -> Self {
        CliError::Internal(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("tracelab: {e}");
            e.exit_code()
        }
    }
}

type CmdFn = fn(Config, &Path) -> Result<Manifest, CliError>;

fn dispatch(command: Command) -> Result<(), CliError> {
    let (args, run): (_, CmdFn) = match command {
        Command::GenSuite(a) => (a, cmd_gen_suite),
        Command::Train(a) => (a, cmd_train),
        Command::Eval(a) => (a, cmd_eval),
        Command::ProbeVariance(a) => (a, cmd_probe_variance),
        Command::BoundSweep(a) => (a, cmd_bound_sweep),
        Command::CompareObjectives(a) => (a, cmd_compare_objectives),
        Command::BiasLadder(a) => (a, cmd_bias_ladder),
        Command::OracleCheck(a) => (a, cmd_oracle_check),
    };
    init_threads(args.threads)?;
    let mut cfg = match &args.config {
        Some(path) => Config::load(path)?,
        None => Config::empty(),
    };
    if let Some(seed) = args.seed {
        cfg.override_seed(seed);
    }
    std::fs::create_dir_all(&args.out)
        .map_err(|e| CliError::Config(format!("cannot create --out {}: {e}", args.out.display())))?;
    let manifest = run(cfg, &args.out)?;
    manifest
        .write(&args.out)
        .map_err(|e| CliError::Internal(format!("cannot write manifest: {e}")))?;
    if manifest.all_checks_pass() {
        Ok(())
    } else {
        let total = manifest_checks_total(&manifest);
        Err(CliError::ChecksFailed {
            failed: total.1,
            total: total.0,
        })
    }
}

fn manifest_checks_total(manifest: &Manifest) -> (usize, usize) {
    let text = manifest.render();
    let total = text.lines().filter(|l| l.starts_with("# check ")).count();
    let failed = text
        .lines()
        .filter(|l| l.starts_with("# check ") && l.contains(": FAIL"))
        .count();
    (total, failed)
}

#[cfg(feature = "parallel")]
fn init_threads(threads: Option<usize>) -> Result<(), CliError> {
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("--threads: {e}")))?;
    }
    Ok(())
}

#[cfg(not(feature = "parallel"))]
fn init_threads(_threads: Option<usize>) -> Result<(), CliError> {
    Ok(())
}

fn write_file(dir: &Path, name: &str, body: &str, manifest: &mut Manifest) -> Result<(), CliError> {
    std::fs::write(dir.join(name), body)
        .map_err(|e| CliError::Internal(format!("cannot write {name}: {e}")))?;
    manifest.record_file(name);
    Ok(())
}

fn budget() -> Budget {
    Budget::default()
}

/// Suite construction shared by every subcommand that trains or evaluates.
fn load_suite(cfg: &Config) -> Result<TaskSuite, CliError> {
    let family = cfg.get_choice("suite.family", "modchain", &["modchain", "parity"])?;
    let n_questions = cfg.get_usize("suite.questions", 8, 1, 256)?;
    let seed = cfg.get_u64("suite.seed", 7)?;
    let family = match family.as_str() {
        "modchain" => SuiteFamily::ModChain {
            modulus: cfg.get_usize("suite.modulus", 3, 2, 9)?,
            n_questions,
        },
        _ => SuiteFamily::Parity {
            bits: cfg.get_usize("suite.bits", 3, 1, 10)?,
            n_questions,
        },
    };
    Ok(gen_task_suite(family, seed)?)
}

fn load_train_config(cfg: &Config) -> Result<TrainConfig, CliError> {
    let rho_kind = cfg
        .get_choice("train.rho_mode", "accuracy", &["likelihood", "accuracy", "geomean"])?
        .parse()
        .map_err(CliError::Config)?;
    let grad_mode: GradMode = cfg
        .get_choice("train.grad_mode", "mc", &["mc", "exact"])?
        .parse()
        .map_err(CliError::Config)?;
    let divisor = cfg.get_f64("train.loss_divisor", 1.0, 1e-9, 1e9)?;
    let loss_norm = match cfg
        .get_choice("train.loss_norm", "sentence-sum", &["sentence-sum", "dr-sft"])?
        .as_str()
    {
        "dr-sft" => LossNorm::DrSft { divisor },
        _ => LossNorm::SentenceSum,
    };
    Ok(TrainConfig {
        rounds: cfg.get_usize("train.T", 1, 1, 64)?,
        steps_phi: cfg.get_usize("train.S_phi", 200, 0, 100_000)?,
        steps_theta: cfg.get_usize("train.S_theta", 200, 0, 100_000)?,
        k_rollouts: cfg.get_usize("train.K", 8, 1, 256)?,
        m_rollouts: cfg.get_usize("train.M", 8, 1, 4096)?,
        n_answers: cfg.get_usize("train.n_answers", 8, 1, 4096)?,
        batch_size: cfg.get_usize("train.batch_size", 0, 0, 256)?,
        learning_rate: cfg.get_f64("train.learning_rate", 2.0, 1e-9, 100.0)?,
        momentum: cfg.get_f64("train.momentum", 0.6, 0.0, 1.0)?,
        rho_kind,
        temperature: cfg.get_f64("train.temperature", 1.0, 1e-6, 100.0)?,
        grad_mode,
        loss_norm,
        warm_start_steps: cfg.get_usize("train.warm_start_steps", 100, 0, 100_000)?,
        warm_start_lr: cfg.get_f64("train.warm_start_lr", 1.0, 1e-9, 100.0)?,
        seed: cfg.get_u64("train.seed", 20)?,
    })
}

fn cmd_gen_suite(cfg: Config, out: &Path) -> Result<Manifest, CliError> {
    let suite = load_suite(&cfg)?;
    let mut manifest = Manifest::new("gen-suite", cfg.finish()?);
    let text = suite.to_text();
    manifest.set_suite_fingerprint(&text);
    write_file(out, "suite.txt", &text, &mut manifest)?;
    manifest.record_check(
        "suite-valid",
        true,
        &format!("{} questions, vocab {}", suite.questions.len(), suite.vocab.size()),
    );
    Ok(manifest)
}

fn float(v: f64) -> String {
    format!("{v:?}")
}

fn cmd_train(cfg: Config, out: &Path) -> Result<Manifest, CliError> {
    let suite = load_suite(&cfg)?;
    let train_cfg = load_train_config(&cfg)?;
    let mut manifest = Manifest::new("train", cfg.finish()?);
    let suite_text = suite.to_text();
    manifest.set_suite_fingerprint(&suite_text);

    let mut state = trainer::init(&suite, &train_cfg)?;
    let (p0, _, _) = trainer::measure(&state, &suite)?;
    let metrics = trainer::run(&mut state, &suite, &train_cfg)?;
    let (p1, _, _) = trainer::measure(&state, &suite)?;

    let mut csv = String::from(
        "round,phase,step,mean_log_p,mean_p,bound_est,kl_to_posterior,degenerate,grad_norm\n",
    );
    for m in &metrics {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            m.round,
            m.phase.as_str(),
            m.step,
            float(m.mean_log_p),
            float(m.mean_p),
            float(m.bound_estimate),
            float(m.mean_posterior_kl),
            m.degenerate_batches,
            float(m.grad_norm),
        ));
    }
    write_file(out, "suite.txt", &suite_text, &mut manifest)?;
    write_file(out, "metrics.csv", &csv, &mut manifest)?;
    write_file(
        out,
        "checkpoint.txt",
        &trainer::save_checkpoint(&state, &suite, &train_cfg),
        &mut manifest,
    )?;
    manifest.record_check(
        "marginal-improved",
        p1 > p0,
        &format!("mean P {p0:.4} -> {p1:.4} over {} steps", metrics.len()),
    );
    Ok(manifest)
}

fn cmd_eval(cfg: Config, out: &Path) -> Result<Manifest, CliError> {
    let suite = load_suite(&cfg)?;
    let train_cfg = load_train_config(&cfg)?;
    let ckpt_path = cfg.get_required("eval.checkpoint")?;
    let text = std::fs::read_to_string(&ckpt_path)
        .map_err(|e| CliError::Config(format!("cannot read checkpoint {ckpt_path}: {e}")))?;
    let state = trainer::load_checkpoint(&text, &suite, &train_cfg)?;
    let mut manifest = Manifest::new("eval", cfg.finish()?);
    manifest.set_suite_fingerprint(&suite.to_text());

    let mut csv = String::from("question,p,log_p,kl_to_posterior\n");
    let mut all_finite = true;
    for q in &suite.questions {
        let log_p = log_marginal_success(&state.model, q, &budget())?;
        let kl = hint_averaged_posterior_kl(&state.model, &state.qphi, q, &budget())?;
        all_finite &= log_p.is_finite() && kl.is_finite();
        csv.push_str(&format!(
            "{},{},{},{}\n",
            q.id,
            float(log_p.exp()),
            float(log_p),
            float(kl)
        ));
    }
    write_file(out, "eval.csv", &csv, &mut manifest)?;
    manifest.record_check(
        "diagnostics-finite",
        all_finite,
        &format!("{} questions evaluated", suite.questions.len()),
    );
    Ok(manifest)
}

fn cmd_probe_variance(cfg: Config, out: &Path) -> Result<Manifest, CliError> {
    let members = cfg.get_list_usize("probe.members", &[2, 4], 2, 4)?;
    let grid = cfg.get_list_f64("probe.grid", &[0.25, 0.5, 0.8], 0.01, 0.99)?;
    let trials = cfg.get_u64("probe.trials", 100_000)?.max(100);
    let seed = cfg.get_u64("probe.seed", 1001)?;
    let mut manifest = Manifest::new("probe-variance", cfg.finish()?);

    let mut dat = String::from(
        "# members\tp\tvar_likelihood\ttheory_likelihood\tvar_accuracy\ttheory_accuracy\n",
    );
    let mut pass = true;
    let mut worst = String::new();
    for (i, &m) in members.iter().enumerate() {
        for (j, &p) in grid.iter().enumerate() {
            let (suite, model) = concentrated_answers(m, p);
            let q = &suite.questions[0];
            let trace = tracelab_core::Seq::empty();
            let mut row = vec![m as f64, p];
            for (mode, closed) in [
                (ProbeMode::ScaledLikelihood, (m as f64 - 1.0) * p * p),
                (ProbeMode::AccuracyDraw, p * (1.0 - p)),
            ] {
                let mut rng = derive_rng(seed, &[i as u64, j as u64, mode as u64]);
                let r = variance_probe(&model, q, &trace, mode, trials, &mut rng)?;
                let ok = (r.empirical_var - closed).abs() <= 3.0 * r.var_se + 1e-9
                    && (r.empirical_mean - r.exact_success).abs() <= 3.0 * r.mean_se;
                if !ok {
                    pass = false;
                    worst = format!(
                        "|Y|={m} p={p} {}: var {:.4} vs {closed:.4}",
                        mode.as_str(),
                        r.empirical_var
                    );
                }
                row.push(r.empirical_var);
                row.push(closed);
            }
            dat.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                row[0] as usize,
                float(row[1]),
                float(row[2]),
                float(row[3]),
                float(row[4]),
                float(row[5]),
            ));
        }
    }
    write_file(out, "variance.dat", &dat, &mut manifest)?;
    let detail = if pass {
        format!(
            "{} grid points x 2 estimators within 3 SE of closed forms, {trials} trials each",
            members.len() * grid.len()
        )
    } else {
        worst
    };
    manifest.record_check("variance-closed-forms", pass, &detail);
    Ok(manifest)
}

fn cmd_bound_sweep(cfg: Config, out: &Path) -> Result<Manifest, CliError> {
    let k_list = cfg.get_list_usize("sweep.k_list", &[1, 2, 3, 4], 1, 6)?;
    if !k_list.windows(2).all(|w| w[1] > w[0]) {
        return Err(CliError::Config(
            "key `sweep.k_list`: values must be strictly increasing".into(),
        ));
    }
    let samples = cfg.get_usize("sweep.samples", 400, 10, 1_000_000)?;
    let amp = cfg.get_f64("sweep.amp", 1.2, 0.0, 10.0)?;
    let seed = cfg.get_u64("sweep.seed", 33)?;
    let mut manifest = Manifest::new("bound-sweep", cfg.finish()?);

    let mut rng = derive_rng(seed, &[0xB0]);
    let (suite, model) = random_fixture(2, amp, &mut rng);
    let mut qphi = posterior_from_trace(&model, &suite);
    randomize_posterior(&mut qphi, &suite, amp, &mut rng);
    let q = &suite.questions[0];
    let hint = q.sample_hint(&mut rng);
    let log_p = log_marginal_success(&model, q, &budget())?;

    let mut dat = String::from("# K\texact_bound\tmc_mean\tmc_se\n");
    let mut exacts = Vec::new();
    let mut mc_consistent = true;
    for &k in &k_list {
        let exact = iwae_exact(&model, &qphi, q, hint, k, &budget())?;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..samples {
            let mut child = child_rng(&mut rng);
            let batch = sample_weighted_batch(
                &model,
                Proposal::posterior(&qphi, q.id, hint),
                q,
                k,
                RhoMode::Likelihood,
                1.0,
                &mut child,
            )?;
            let est = batch.bound_estimate();
            sum += est;
            sumsq += est * est;
        }
        let mean = sum / samples as f64;
        let var = (sumsq / samples as f64 - mean * mean).max(0.0);
        let se = (var / samples as f64).sqrt();
        mc_consistent &= (mean - exact).abs() <= 4.0 * se + 1e-9;
        exacts.push(exact);
        dat.push_str(&format!(
            "{k}\t{}\t{}\t{}\n",
            float(exact),
            float(mean),
            float(se)
        ));
    }
    write_file(out, "bound_sweep.dat", &dat, &mut manifest)?;
    let monotone = exacts.windows(2).all(|w| w[1] >= w[0] - 1e-12)
        && exacts.iter().all(|&b| b <= log_p + 1e-10);
    manifest.record_check(
        "exact-bound-monotone-capped",
        monotone,
        &format!(
            "exact bounds {:?} vs log P {:.6}",
            exacts.iter().map(|b| (b * 1e6).round() / 1e6).collect::<Vec<_>>(),
            log_p
        ),
    );
    manifest.record_check(
        "mc-matches-exact",
        mc_consistent,
        &format!("{samples} sampled tuples per K within 4 SE of the enumerated bound"),
    );
    Ok(manifest)
}

fn cmd_compare_objectives(cfg: Config, out: &Path) -> Result<Manifest, CliError> {
    let fixtures = cfg.get_usize("web.fixtures", 20, 1, 500)?;
    let amp = cfg.get_f64("web.amp", 1.2, 0.0, 10.0)?;
    let seed = cfg.get_u64("web.seed", 55)?;
    let mut manifest = Manifest::new("compare-objectives", cfg.finish()?);

    let tol = 1e-9;
    let names = [
        "rejection-ft-equals-weighted-pull",
        "group-normalized-equals-scaled-pull",
        "shaping-collapse-to-scaled-pull",
        "posterior-expected-draw-equals-mle-grad",
        "reverse-kl-reward-equals-bound-grad",
    ];
    let mut devs = [0.0f64; 5];
    let mut rng = derive_rng(seed, &[0xE0]);
    let mut done = 0usize;
    while done < fixtures {
        let (suite, model) = random_fixture(1 + (done % 2), amp, &mut rng);
        let q = &suite.questions[0];
        let p = oracle::marginal_success(&model, q, &budget())?;
        if !(0.02..=0.98).contains(&p) {
            continue;
        }
        let width = suite.vocab.width();

        let mut birl = GradVector::new(width);
        birl_grad_exact(&model, q, false, &budget(), &mut birl)?;

        let mut rft = GradVector::new(width);
        rft_grad_exact(&model, &model, q, &budget(), &mut rft)?;
        devs[0] = devs[0].max(rft.max_abs_diff(&birl));

        let mut grpo = GradVector::new(width);
        grpo_grad_exact(&model, q, &budget(), &mut grpo)?;
        let mut scaled = birl.clone();
        scaled.scale(1.0 / (p * (1.0 - p)).sqrt());
        devs[1] = devs[1].max(grpo.max_abs_diff(&scaled));

        let shaping = RewardShaping {
            alpha: 1.5,
            beta: 0.25,
            gamma: 0.25,
            debiased: false,
        };
        let mut shaped = GradVector::new(width);
        general_reward_grad_exact(&model, q, shaping, &budget(), &mut shaped)?;
        let mut target = birl.clone();
        target.scale(shaping.alpha - shaping.beta);
        devs[2] = devs[2].max(shaped.max_abs_diff(&target));

        let post = true_posterior(&model, q, &budget())?;
        let mut expected = GradVector::new(width);
        let t_cond = tracelab_core::Conditioning::Trace { question: q.id };
        for (z, w) in post.pairs() {
            if w > 0.0 {
                model.score_grad(t_cond, &z, w, &mut expected)?;
                answer_grad_exact(&model, q, &z, w, &mut expected)?;
            }
        }
        let mut mle = GradVector::new(width);
        exact_mle_grad(&model, q, &budget(), &mut mle)?;
        devs[3] = devs[3].max(expected.max_abs_diff(&mle));

        let mut qphi = posterior_from_trace(&model, &suite);
        randomize_posterior(&mut qphi, &suite, amp, &mut rng);
        let hint = q.sample_hint(&mut rng);
        let mut pg = GradVector::new(width);
        reverse_kl_pg_phi_exact(&model, &qphi, q, hint, &budget(), &mut pg)?;
        let mut bound = GradVector::new(width);
        iwae_grad_phi_exact(&model, &qphi, q, hint, 1, &budget(), &mut bound)?;
        devs[4] = devs[4].max(pg.max_abs_diff(&bound));

        done += 1;
    }

    let mut dat = String::from("# identity\tmax_abs_dev\ttolerance\tpass\n");
    let mut all = true;
    for (name, dev) in names.iter().zip(&devs) {
        let ok = *dev <= tol;
        all &= ok;
        dat.push_str(&format!("{name}\t{}\t{}\t{}\n", float(*dev), float(tol), ok));
    }
    write_file(out, "equivalences.dat", &dat, &mut manifest)?;
    manifest.record_check(
        "identities-hold",
        all,
        &format!(
            "{fixtures} interior fixtures, worst deviation {:.2e}",
            devs.iter().cloned().fold(0.0, f64::max)
        ),
    );
    Ok(manifest)
}

fn cmd_bias_ladder(cfg: Config, out: &Path) -> Result<Manifest, CliError> {
    let grid = cfg.get_list_f64("ladder.grid", &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9], 0.01, 0.99)?;
    if !grid.windows(2).all(|w| w[1] > w[0]) {
        return Err(CliError::Config(
            "key `ladder.grid`: values must be strictly increasing".into(),
        ));
    }
    let mut manifest = Manifest::new("bias-ladder", cfg.finish()?);

    let (suite, model) = accuracy_ladder(&grid);
    let width = suite.vocab.width();
    let mut dat = String::from("# accuracy\trft_weight\tgrpo_weight\tposterior_fit_coeff\n");
    let mut worst_rft: f64 = 0.0;
    let mut worst_grpo: f64 = 0.0;
    let mut drift: f64 = 0.0;
    let mut reference: Option<Vec<f64>> = None;
    for (q, &p) in suite.questions.iter().zip(&grid) {
        let mut sink = GradVector::new(width);
        let rft = rft_grad_exact(&model, &model, q, &budget(), &mut sink)?;
        let grpo = grpo_grad_exact(&model, q, &budget(), &mut sink)?;
        worst_rft = worst_rft.max((rft.weight - p).abs());
        worst_grpo = worst_grpo.max((grpo.weight - (p / (1.0 - p)).sqrt()).abs());
        let post = true_posterior(&model, q, &budget())?;
        match &reference {
            None => reference = Some(post.probs.clone()),
            Some(probs) => {
                for (a, b) in post.probs.iter().zip(probs) {
                    drift = drift.max((a - b).abs());
                }
            }
        }
        dat.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            float(p),
            float(rft.weight),
            float(grpo.weight),
            float(post.probs[0])
        ));
    }
    write_file(out, "bias_ladder.dat", &dat, &mut manifest)?;
    let pass = worst_rft <= 1e-9 && worst_grpo <= 1e-9 && drift <= 1e-9;
    manifest.record_check(
        "weights-track-accuracy",
        pass,
        &format!(
            "|w_rft - p| <= {worst_rft:.2e}, |w_grpo - sqrt(p/(1-p))| <= {worst_grpo:.2e}, \
             posterior-fit coefficient drift {drift:.2e}"
        ),
    );
    Ok(manifest)
}

fn cmd_oracle_check(cfg: Config, out: &Path) -> Result<Manifest, CliError> {
    let mut manifest = Manifest::new("oracle-check", cfg.finish()?);
    let results = checks::property_checks()?;
    let mut text = String::new();
    for r in &results {
        text.push_str(&format!("{r}\n"));
        manifest.record_check(&format!("criterion-{}", r.id), r.pass, &r.detail);
    }
    write_file(out, "checks.txt", &text, &mut manifest)?;
    Ok(manifest)
}
