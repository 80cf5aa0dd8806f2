//! Calibrated questions and policies reused by tests, the property-check
//! suite and the experiment presets.
//!
//! Logit rows are set to logs of target probabilities where exact values
//! matter: `softmax(ln p_1, ..., ln p_n) = (p_1, ..., p_n)` whenever the
//! targets sum to one, so constructions below hit their stated probabilities
//! to within a few ulps.

use crate::policy::{Conditioning, Policy};
use crate::seq::{all_segments, Seq, SegmentCaps, Vocab};
use crate::task::{AnswerSet, Question, TaskSuite};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Logit row whose softmax puts probability `p` on slot `target` and spreads
/// the remainder evenly over the other slots. Requires `0 < p < 1`.
pub fn row_with_prob(width: usize, target: usize, p: f64) -> Vec<f64> {
    assert!(p > 0.0 && p < 1.0, "target probability must be interior");
    let rest = ((1.0 - p) / (width - 1) as f64).ln();
    let mut row = vec![rest; width];
    row[target] = p.ln();
    row
}

/// Single uniform question: vocab `{0,1}`, caps 1/1, accepted answer `[1]`.
/// Every trace answers correctly with probability exactly 1/3 (the uniform
/// three-way softmax), so the marginal success probability is 1/3.
pub fn single_uniform() -> (TaskSuite, Policy) {
    let vocab = Vocab::new(2).unwrap();
    let caps = SegmentCaps { trace: 1, answer: 1 };
    let answers = AnswerSet::new(vec![Seq::from([1])], Seq::from([1])).unwrap();
    let question = Question::new(0, Seq::from([0]), answers, caps.answer);
    let suite = TaskSuite::new("uniform-single".into(), vocab, caps, vec![question]).unwrap();
    let policy = Policy::uniform(vocab, caps);
    (suite, policy)
}

/// Two informative traces: given trace `[0]` the accepted answer `[1]` has
/// probability 0.8, given `[1]` probability 0.2; the empty trace keeps its
/// uniform 1/3 row. With `restrict_traces` the trace policy's end-of-segment
/// logit is -40, leaving the trace distribution uniform over `{[0],[1]}` up
/// to ~2e-18; the marginal then sits at 0.5 within 1e-3 and the posterior
/// puts ~0.8 on `[0]`.
pub fn two_trace_skewed(restrict_traces: bool) -> (TaskSuite, Policy) {
    let vocab = Vocab::new(2).unwrap();
    let caps = SegmentCaps { trace: 1, answer: 1 };
    let answers = AnswerSet::new(vec![Seq::from([1])], Seq::from([1])).unwrap();
    let question = Question::new(0, Seq::from([0]), answers, caps.answer);
    let suite = TaskSuite::new("two-trace-skewed".into(), vocab, caps, vec![question]).unwrap();
    let mut policy = Policy::uniform(vocab, caps);
    for (trace, p) in [(Seq::from([0]), 0.8), (Seq::from([1]), 0.2)] {
        let cond = Conditioning::Answer { question: 0, trace: &trace };
        policy
            .params
            .set_row(cond.context(Seq::empty()), row_with_prob(vocab.width(), 1, p))
            .unwrap();
    }
    if restrict_traces {
        let cond = Conditioning::Trace { question: 0 };
        policy
            .params
            .set_row(cond.context(Seq::empty()), vec![0.0, 0.0, -40.0])
            .unwrap();
    }
    (suite, policy)
}

/// Question whose accepted answers are `n_members` single-token sequences,
/// with the answer table putting probability `p` on the first member and
/// 1e-12 on each other member for every trace. This concentration is the
/// worst case for the uniform-answer-draw success estimator: its single-draw
/// variance approaches `(|Y|-1) p^2` while the indicator draw stays at
/// `p(1-p)`.
pub fn concentrated_answers(n_members: usize, p: f64) -> (TaskSuite, Policy) {
    assert!((2..=4).contains(&n_members));
    let vocab = Vocab::new(4).unwrap();
    let caps = SegmentCaps { trace: 1, answer: 1 };
    let members: Vec<Seq> = (0..n_members as u8).map(|t| Seq::from([t])).collect();
    let answers = AnswerSet::new(members, Seq::from([0])).unwrap();
    let question = Question::new(0, Seq::from([0, 1]), answers, caps.answer);
    let suite =
        TaskSuite::new("concentrated-answers".into(), vocab, caps, vec![question]).unwrap();

    let eps = 1e-12;
    let mut probs = vec![eps; vocab.width()];
    probs[0] = p;
    let spent: f64 = p + 3.0 * eps;
    probs[vocab.end()] = 1.0 - spent;
    let row: Vec<f64> = probs.iter().map(|q| q.ln()).collect();

    let mut policy = Policy::uniform(vocab, caps);
    for trace in all_segments(vocab, caps.trace) {
        let cond = Conditioning::Answer { question: 0, trace: &trace };
        policy.params.set_row(cond.context(Seq::empty()), row.clone()).unwrap();
    }
    (suite, policy)
}

/// One question per requested accuracy, all sharing identical nonuniform
/// trace rows. The answer tables give success probability equal to the
/// question's accuracy for *every* trace, so each trace posterior equals the
/// shared trace prior: the questions differ only in accuracy, not geometry.
pub fn accuracy_ladder(accuracies: &[f64]) -> (TaskSuite, Policy) {
    let vocab = Vocab::new(2).unwrap();
    let caps = SegmentCaps { trace: 1, answer: 1 };
    let mut questions = Vec::new();
    let mut policy = Policy::uniform(vocab, caps);
    for (i, &p) in accuracies.iter().enumerate() {
        let id = i as u32;
        let answers = AnswerSet::new(vec![Seq::from([1])], Seq::from([1])).unwrap();
        questions.push(Question::new(id, Seq::from([0]), answers, caps.answer));
        let trace_cond = Conditioning::Trace { question: id };
        policy
            .params
            .set_row(trace_cond.context(Seq::empty()), vec![0.7, -0.3, 0.25])
            .unwrap();
        for trace in all_segments(vocab, caps.trace) {
            let cond = Conditioning::Answer { question: id, trace: &trace };
            policy
                .params
                .set_row(cond.context(Seq::empty()), row_with_prob(vocab.width(), 1, p))
                .unwrap();
        }
    }
    let suite = TaskSuite::new("accuracy-ladder".into(), vocab, caps, questions).unwrap();
    (suite, policy)
}

/// Question accepting every answer segment (including the empty one), so the
/// success probability is exactly 1 for any policy. Useful as a stationarity
/// fixture: the likelihood gradient vanishes identically.
pub fn saturated_question() -> (TaskSuite, Policy) {
    let vocab = Vocab::new(2).unwrap();
    let caps = SegmentCaps { trace: 1, answer: 1 };
    let members = all_segments(vocab, caps.answer);
    let answers = AnswerSet::new(members, Seq::empty()).unwrap();
    let mut question = Question::new(0, Seq::from([1]), answers, caps.answer);
    question.format_len = (0, caps.answer);
    let suite = TaskSuite::new("saturated".into(), vocab, caps, vec![question]).unwrap();
    let policy = Policy::uniform(vocab, caps);
    (suite, policy)
}

/// Fills every model row reachable under the suite (trace rows, and answer
/// rows for every enumerable trace) with logits uniform on `[-amp, amp]`.
pub fn randomize_model(model: &mut Policy, suite: &TaskSuite, amp: f64, rng: &mut ChaCha8Rng) {
    let vocab = suite.vocab;
    for q in &suite.questions {
        let trace_cond = Conditioning::Trace { question: q.id };
        for prefix in all_segments(vocab, suite.caps.trace.saturating_sub(1)) {
            let row: Vec<f64> = (0..vocab.width()).map(|_| rng.random_range(-amp..amp)).collect();
            model.params.set_row(trace_cond.context(prefix), row).unwrap();
        }
        for trace in all_segments(vocab, suite.caps.trace) {
            let cond = Conditioning::Answer { question: q.id, trace: &trace };
            for prefix in all_segments(vocab, suite.caps.answer.saturating_sub(1)) {
                let row: Vec<f64> =
                    (0..vocab.width()).map(|_| rng.random_range(-amp..amp)).collect();
                model.params.set_row(cond.context(prefix), row).unwrap();
            }
        }
    }
}

/// Fills every posterior row (per question, per hint in the answer set) with
/// logits uniform on `[-amp, amp]`.
pub fn randomize_posterior(qphi: &mut Policy, suite: &TaskSuite, amp: f64, rng: &mut ChaCha8Rng) {
    let vocab = suite.vocab;
    for q in &suite.questions {
        for hint in q.answers.members() {
            let cond = Conditioning::Posterior { question: q.id, hint };
            for prefix in all_segments(vocab, suite.caps.trace.saturating_sub(1)) {
                let row: Vec<f64> =
                    (0..vocab.width()).map(|_| rng.random_range(-amp..amp)).collect();
                qphi.params.set_row(cond.context(prefix), row).unwrap();
            }
        }
    }
}

/// Single-question fixture on vocab `{0,1}` with caps 2/1, a one- or
/// two-member answer set, and a model randomized at amplitude `amp`.
pub fn random_fixture(members: usize, amp: f64, rng: &mut ChaCha8Rng) -> (TaskSuite, Policy) {
    assert!((1..=2).contains(&members));
    let vocab = Vocab::new(2).unwrap();
    let caps = SegmentCaps { trace: 2, answer: 1 };
    let member_list = if members == 1 {
        vec![Seq::from([1])]
    } else {
        vec![Seq::from([0]), Seq::from([1])]
    };
    let canonical = member_list[members - 1].clone();
    let answers = AnswerSet::new(member_list, canonical).unwrap();
    let question = Question::new(0, Seq::from([1, 0]), answers, caps.answer);
    let suite = TaskSuite::new("random-fixture".into(), vocab, caps, vec![question]).unwrap();
    let mut policy = Policy::uniform(vocab, caps);
    randomize_model(&mut policy, &suite, amp, rng);
    (suite, policy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::softmax;
    use crate::rng::derive_rng;

    #[test]
    fn row_with_prob_hits_the_target() {
        let row = row_with_prob(3, 1, 0.8);
        let p = softmax(&row);
        assert!((p[1] - 0.8).abs() < 1e-15);
        assert!((p[0] - 0.1).abs() < 1e-15);
        assert!((p[2] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn skewed_fixture_answer_probabilities() {
        let (suite, policy) = two_trace_skewed(false);
        let q = &suite.questions[0];
        for (trace, want) in [(Seq::from([0]), 0.8), (Seq::from([1]), 0.2), (Seq::empty(), 1.0 / 3.0)] {
            let got = policy
                .log_prob(
                    Conditioning::Answer { question: q.id, trace: &trace },
                    &Seq::from([1]),
                )
                .unwrap()
                .exp();
            assert!((got - want).abs() < 1e-12, "trace {trace:?}: {got} vs {want}");
        }
    }

    #[test]
    fn randomized_fixture_is_seed_deterministic() {
        let mut r1 = derive_rng(3, &[1]);
        let mut r2 = derive_rng(3, &[1]);
        let (_, p1) = random_fixture(2, 1.5, &mut r1);
        let (_, p2) = random_fixture(2, 1.5, &mut r2);
        assert_eq!(p1, p2);
    }
}
