//! Questions with finite verifiable answer sets, grouped into suites.
//!
//! A question pairs a prompt with a small set `Y_x` of accepted answer
//! segments; a verifier checks either exact membership or a format-only
//! predicate (answer length within a declared range, a strict superset of
//! membership). Suites carry one shared vocabulary and shared segment caps so
//! a single policy table serves every question.

use crate::seq::{Seq, SeqError, SegmentCaps, Vocab, MAX_ANSWER_CAP, MAX_TRACE_CAP, MAX_VOCAB};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TaskError {
    #[error(transparent)]
    Seq(#[from] SeqError),
    #[error("answer set must be non-empty")]
    EmptyAnswerSet,
    #[error("canonical answer [{0}] is not a member of the answer set")]
    CanonicalNotMember(String),
    #[error("hint prior needs one probability per answer ({answers}), got {probs}")]
    PriorLength { answers: usize, probs: usize },
    #[error("hint prior must be non-negative with positive total mass")]
    PriorMass,
    #[error("suite name `{0}` must be a single non-empty token")]
    BadName(String),
    #[error("duplicate question id {0}")]
    DuplicateId(u32),
    #[error("question {id}: answer [{answer}] has length {len}, answer cap is {cap}")]
    AnswerOverCap {
        id: u32,
        answer: String,
        len: usize,
        cap: usize,
    },
    #[error("question {id}: answer [{answer}] falls outside the format range {min}..={max}")]
    AnswerOutsideFormat {
        id: u32,
        answer: String,
        min: usize,
        max: usize,
    },
    #[error("trace cap {0} outside 1..={MAX_TRACE_CAP}")]
    TraceCap(usize),
    #[error("answer cap {0} outside 1..={MAX_ANSWER_CAP}")]
    AnswerCap(usize),
    #[error("modulus {m} needs vocab size {need}, cap is {MAX_VOCAB}")]
    ModulusTooLarge { m: usize, need: usize },
    #[error("modulus must be at least 2, got {0}")]
    ModulusTooSmall(usize),
    #[error("requested {want} questions, family only provides {have}")]
    TooManyQuestions { want: usize, have: usize },
    #[error("bit count {0} outside 1..=10")]
    BitCount(usize),
    #[error("suite line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Finite accepted-answer set with one designated canonical member.
/// Members are kept sorted and de-duplicated.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnswerSet {
    members: Vec<Seq>,
    canonical: usize,
}

impl AnswerSet {
    pub fn new(mut members: Vec<Seq>, canonical: Seq) -> Result<Self, TaskError> {
        if members.is_empty() {
            return Err(TaskError::EmptyAnswerSet);
        }
        members.sort();
        members.dedup();
        let canonical = members
            .binary_search(&canonical)
            .map_err(|_| TaskError::CanonicalNotMember(canonical.to_csv()))?;
        Ok(AnswerSet { members, canonical })
    }

    pub fn members(&self) -> &[Seq] {
        &self.members
    }

    pub fn canonical(&self) -> &Seq {
        &self.members[self.canonical]
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, y: &Seq) -> bool {
        self.members.binary_search(y).is_ok()
    }
}

/// Distribution over the members of an answer set, used to draw the hint
/// shown to the posterior policy. Support is the answer set by construction.
#[derive(Clone, Debug, PartialEq)]
pub struct HintPrior {
    probs: Vec<f64>,
}

impl HintPrior {
    pub fn uniform(n: usize) -> Self {
        HintPrior {
            probs: vec![1.0 / n as f64; n],
        }
    }

    /// Normalizes `probs` to sum to one; rejects negative entries and zero
    /// total mass.
    pub fn new(probs: Vec<f64>, answers: usize) -> Result<Self, TaskError> {
        if probs.len() != answers {
            return Err(TaskError::PriorLength {
                answers,
                probs: probs.len(),
            });
        }
        if probs.iter().any(|p| *p < 0.0 || !p.is_finite()) {
            return Err(TaskError::PriorMass);
        }
        let total: f64 = probs.iter().sum();
        if total <= 0.0 {
            return Err(TaskError::PriorMass);
        }
        Ok(HintPrior {
            probs: probs.into_iter().map(|p| p / total).collect(),
        })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

/// Acceptance predicate: exact membership in `Y_x`, or format-only (answer
/// length inside a declared range). Membership implies format acceptance.
#[derive(Clone, Copy, Debug)]
pub enum Verifier<'a> {
    ExactSet(&'a AnswerSet),
    FormatOnly { min_len: usize, max_len: usize },
}

impl Verifier<'_> {
    pub fn accepts(&self, y: &Seq) -> bool {
        match self {
            Verifier::ExactSet(set) => set.contains(y),
            Verifier::FormatOnly { min_len, max_len } => {
                (*min_len..=*max_len).contains(&y.len())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Question {
    pub id: u32,
    pub prompt: Seq,
    pub answers: AnswerSet,
    pub hint_prior: HintPrior,
    /// Inclusive answer-length range accepted by the format-only verifier.
    pub format_len: (usize, usize),
}

impl Question {
    /// Question with a uniform hint prior and format range `1..=answer_cap`.
    pub fn new(id: u32, prompt: Seq, answers: AnswerSet, answer_cap: usize) -> Self {
        let hint_prior = HintPrior::uniform(answers.len());
        Question {
            id,
            prompt,
            answers,
            hint_prior,
            format_len: (1, answer_cap),
        }
    }

    pub fn exact_verifier(&self) -> Verifier<'_> {
        Verifier::ExactSet(&self.answers)
    }

    pub fn format_verifier(&self) -> Verifier<'_> {
        Verifier::FormatOnly {
            min_len: self.format_len.0,
            max_len: self.format_len.1,
        }
    }

    /// Draws a hint from the prior. The result is always a member of `Y_x`.
    pub fn sample_hint<R: Rng + ?Sized>(&self, rng: &mut R) -> &Seq {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, p) in self.hint_prior.probs().iter().enumerate() {
            acc += p;
            if u < acc {
                return &self.answers.members()[i];
            }
        }
        self.answers.members().last().expect("non-empty answer set")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSuite {
    pub name: String,
    pub vocab: Vocab,
    pub caps: SegmentCaps,
    pub questions: Vec<Question>,
}

impl TaskSuite {
    pub fn new(
        name: String,
        vocab: Vocab,
        caps: SegmentCaps,
        questions: Vec<Question>,
    ) -> Result<Self, TaskError> {
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return Err(TaskError::BadName(name));
        }
        if !(1..=MAX_TRACE_CAP).contains(&caps.trace) {
            return Err(TaskError::TraceCap(caps.trace));
        }
        if !(1..=MAX_ANSWER_CAP).contains(&caps.answer) {
            return Err(TaskError::AnswerCap(caps.answer));
        }
        let mut seen = Vec::new();
        for q in &questions {
            if seen.contains(&q.id) {
                return Err(TaskError::DuplicateId(q.id));
            }
            seen.push(q.id);
            q.prompt.check_vocab(vocab)?;
            for y in q.answers.members() {
                y.check_vocab(vocab)?;
                if y.len() > caps.answer {
                    return Err(TaskError::AnswerOverCap {
                        id: q.id,
                        answer: y.to_csv(),
                        len: y.len(),
                        cap: caps.answer,
                    });
                }
                if !q.format_verifier().accepts(y) {
                    return Err(TaskError::AnswerOutsideFormat {
                        id: q.id,
                        answer: y.to_csv(),
                        min: q.format_len.0,
                        max: q.format_len.1,
                    });
                }
            }
        }
        Ok(TaskSuite {
            name,
            vocab,
            caps,
            questions,
        })
    }

    pub fn question(&self, id: u32) -> Option<&Question> {
        self.questions.iter().find(|q| q.id == id)
    }

    /// Questions with more than one accepted answer. Worst-case variance
    /// probes need at least one of these; parity-style suites have none.
    pub fn multi_answer_count(&self) -> usize {
        self.questions
            .iter()
            .filter(|q| q.answers.len() >= 2)
            .count()
    }

    /// Line-oriented text form:
    ///
    /// ```text
    /// suite <name> vocab=<V> Lz=<n> Ly=<n>
    /// q <id> x=<ids csv> Y=<seq;seq;...> canon=<seq>
    /// ```
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "suite {} vocab={} Lz={} Ly={}\n",
            self.name,
            self.vocab.size(),
            self.caps.trace,
            self.caps.answer
        );
        for q in &self.questions {
            let members = q
                .answers
                .members()
                .iter()
                .map(Seq::to_csv)
                .collect::<Vec<_>>()
                .join(";");
            out.push_str(&format!(
                "q {} x={} Y={} canon={}\n",
                q.id,
                q.prompt.to_csv(),
                members,
                q.answers.canonical().to_csv()
            ));
        }
        out
    }

    /// Parses the [`TaskSuite::to_text`] form. Hint priors come back uniform
    /// and format ranges come back as `1..=Ly`, matching what generators
    /// produce, so generated suites round-trip to equal values.
    pub fn from_text(text: &str) -> Result<Self, TaskError> {
        let parse_err = |line: usize, msg: &str| TaskError::Parse {
            line,
            msg: msg.to_string(),
        };
        let mut lines = text.lines().enumerate();
        let (hline, header) = lines
            .next()
            .ok_or_else(|| parse_err(0, "empty suite file"))?;
        let mut fields = header.split_whitespace();
        if fields.next() != Some("suite") {
            return Err(parse_err(hline + 1, "expected `suite` header"));
        }
        let name = fields
            .next()
            .ok_or_else(|| parse_err(hline + 1, "missing suite name"))?
            .to_string();
        let mut vocab_size = None;
        let mut lz = None;
        let mut ly = None;
        for field in fields {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| parse_err(hline + 1, "header fields are key=value"))?;
            let parsed: usize = value
                .parse()
                .map_err(|_| parse_err(hline + 1, "header values are integers"))?;
            match key {
                "vocab" => vocab_size = Some(parsed),
                "Lz" => lz = Some(parsed),
                "Ly" => ly = Some(parsed),
                other => return Err(parse_err(hline + 1, &format!("unknown field `{other}`"))),
            }
        }
        let vocab = Vocab::new(vocab_size.ok_or_else(|| parse_err(hline + 1, "missing vocab="))?)?;
        let caps = SegmentCaps {
            trace: lz.ok_or_else(|| parse_err(hline + 1, "missing Lz="))?,
            answer: ly.ok_or_else(|| parse_err(hline + 1, "missing Ly="))?,
        };
        let mut questions = Vec::new();
        for (lno, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split_whitespace();
            if fields.next() != Some("q") {
                return Err(parse_err(lno + 1, "expected `q` line"));
            }
            let id: u32 = fields
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| parse_err(lno + 1, "missing question id"))?;
            let mut prompt = None;
            let mut members = None;
            let mut canon = None;
            for field in fields {
                let (key, value) = field
                    .split_once('=')
                    .ok_or_else(|| parse_err(lno + 1, "question fields are key=value"))?;
                match key {
                    "x" => prompt = Some(Seq::from_csv(value)?),
                    "Y" => {
                        let mut list = Vec::new();
                        for part in value.split(';') {
                            list.push(Seq::from_csv(part)?);
                        }
                        members = Some(list);
                    }
                    "canon" => canon = Some(Seq::from_csv(value)?),
                    other => {
                        return Err(parse_err(lno + 1, &format!("unknown field `{other}`")))
                    }
                }
            }
            let prompt = prompt.ok_or_else(|| parse_err(lno + 1, "missing x="))?;
            let members = members.ok_or_else(|| parse_err(lno + 1, "missing Y="))?;
            let canon = canon.ok_or_else(|| parse_err(lno + 1, "missing canon="))?;
            let answers = AnswerSet::new(members, canon)?;
            questions.push(Question::new(id, prompt, answers, caps.answer));
        }
        TaskSuite::new(name, vocab, caps, questions)
    }
}

/// Generator families. Both stay inside the enumeration budget by
/// construction and use uniform hint priors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SuiteFamily {
    /// Prompts encode `(a + b) mod m`; each value is accepted under two
    /// surface forms, the digit token `[v]` and a two-token alias
    /// `[alias, v]` where `alias = m`. So `|Y_x| = 2` everywhere.
    ModChain { modulus: usize, n_questions: usize },
    /// Prompts are bitstrings; the single accepted answer is the parity bit,
    /// so `|Y_x| = 1` everywhere.
    Parity { bits: usize, n_questions: usize },
}

/// Builds a suite deterministically from the family parameters and a seed.
/// The seed only controls which prompts are kept and their order.
pub fn gen_task_suite(family: SuiteFamily, seed: u64) -> Result<TaskSuite, TaskError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match family {
        SuiteFamily::ModChain {
            modulus: m,
            n_questions,
        } => {
            if m < 2 {
                return Err(TaskError::ModulusTooSmall(m));
            }
            if m + 1 > MAX_VOCAB {
                return Err(TaskError::ModulusTooLarge { m, need: m + 1 });
            }
            if n_questions > m * m {
                return Err(TaskError::TooManyQuestions {
                    want: n_questions,
                    have: m * m,
                });
            }
            let vocab = Vocab::new(m + 1)?;
            let caps = SegmentCaps { trace: 2, answer: 2 };
            let alias = m as u8;
            let mut pairs: Vec<(u8, u8)> = (0..m as u8)
                .flat_map(|a| (0..m as u8).map(move |b| (a, b)))
                .collect();
            pairs.shuffle(&mut rng);
            let mut questions = Vec::new();
            for (i, (a, b)) in pairs.into_iter().take(n_questions).enumerate() {
                let v = (a + b) % m as u8;
                let answers = AnswerSet::new(
                    vec![Seq::from([v]), Seq::from([alias, v])],
                    Seq::from([v]),
                )?;
                questions.push(Question::new(
                    i as u32,
                    Seq::from([a, b]),
                    answers,
                    caps.answer,
                ));
            }
            TaskSuite::new(
                format!("modchain-m{m}-q{n_questions}-s{seed}"),
                vocab,
                caps,
                questions,
            )
        }
        SuiteFamily::Parity { bits, n_questions } => {
            if !(1..=10).contains(&bits) {
                return Err(TaskError::BitCount(bits));
            }
            let have = 1usize << bits;
            if n_questions > have {
                return Err(TaskError::TooManyQuestions {
                    want: n_questions,
                    have,
                });
            }
            let vocab = Vocab::new(2)?;
            let caps = SegmentCaps { trace: 2, answer: 1 };
            let mut words: Vec<usize> = (0..have).collect();
            words.shuffle(&mut rng);
            let mut questions = Vec::new();
            for (i, w) in words.into_iter().take(n_questions).enumerate() {
                let prompt: Vec<u8> = (0..bits).map(|b| ((w >> b) & 1) as u8).collect();
                let parity = (w.count_ones() % 2) as u8;
                let answers =
                    AnswerSet::new(vec![Seq::from([parity])], Seq::from([parity]))?;
                questions.push(Question::new(
                    i as u32,
                    Seq::new(prompt),
                    answers,
                    caps.answer,
                ));
            }
            TaskSuite::new(
                format!("parity-b{bits}-q{n_questions}-s{seed}"),
                vocab,
                caps,
                questions,
            )
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;

    fn modchain(n: usize, seed: u64) -> TaskSuite {
        gen_task_suite(
            SuiteFamily::ModChain {
                modulus: 3,
                n_questions: n,
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn modchain_answers_encode_the_sum_two_ways() {
        let suite = modchain(8, 7);
        assert_eq!(suite.vocab.size(), 4);
        assert_eq!(suite.questions.len(), 8);
        assert_eq!(suite.multi_answer_count(), 8);
        for q in &suite.questions {
            let [a, b] = q.prompt.ids() else {
                panic!("prompt is two operands")
            };
            let v = (a + b) % 3;
            assert!(q.answers.contains(&Seq::from([v])));
            assert!(q.answers.contains(&Seq::from([3, v])));
            assert_eq!(q.answers.len(), 2);
            assert_eq!(q.answers.canonical(), &Seq::from([v]));
        }
        // Prompts are distinct pairs.
        let mut prompts: Vec<_> = suite.questions.iter().map(|q| q.prompt.clone()).collect();
        prompts.sort();
        prompts.dedup();
        assert_eq!(prompts.len(), 8);
    }

    #[test]
    fn generation_is_deterministic_in_the_seed() {
        assert_eq!(modchain(8, 7).to_text(), modchain(8, 7).to_text());
        assert_ne!(modchain(8, 7).to_text(), modchain(8, 8).to_text());
    }

    #[test]
    fn parity_answer_is_the_parity_token() {
        let suite = gen_task_suite(
            SuiteFamily::Parity {
                bits: 3,
                n_questions: 8,
            },
            5,
        )
        .unwrap();
        assert_eq!(suite.multi_answer_count(), 0);
        for q in &suite.questions {
            let parity = q.prompt.ids().iter().filter(|&&b| b == 1).count() % 2;
            assert_eq!(q.answers.members(), &[Seq::from([parity as u8])]);
        }
    }

    #[test]
    fn verifier_membership_implies_format_acceptance() {
        let suite = modchain(8, 3);
        for q in &suite.questions {
            for y in q.answers.members() {
                assert!(q.exact_verifier().accepts(y));
                assert!(q.format_verifier().accepts(y));
            }
            // Format acceptance is strictly wider: a wrong single digit.
            let wrong = Seq::from([(q.answers.canonical().ids()[0] + 1) % 3]);
            assert!(q.format_verifier().accepts(&wrong));
            assert!(!q.exact_verifier().accepts(&wrong));
            // Over-long and empty answers fail the format.
            assert!(!q.format_verifier().accepts(&Seq::from([0, 0, 0])));
            assert!(!q.format_verifier().accepts(&Seq::empty()));
        }
    }

    #[test]
    fn generator_budget_violations_name_the_cap() {
        let err = gen_task_suite(
            SuiteFamily::ModChain {
                modulus: 8,
                n_questions: 1,
            },
            0,
        )
        .unwrap_err();
        assert_eq!(err, TaskError::ModulusTooLarge { m: 8, need: 9 });
        let err = gen_task_suite(
            SuiteFamily::ModChain {
                modulus: 3,
                n_questions: 10,
            },
            0,
        )
        .unwrap_err();
        assert_eq!(err, TaskError::TooManyQuestions { want: 10, have: 9 });
    }

    #[test]
    fn suite_text_round_trips_to_an_equal_suite() {
        for suite in [
            modchain(8, 7),
            gen_task_suite(
                SuiteFamily::Parity {
                    bits: 2,
                    n_questions: 4,
                },
                1,
            )
            .unwrap(),
        ] {
            let text = suite.to_text();
            let back = TaskSuite::from_text(&text).unwrap();
            assert_eq!(back, suite);
            assert_eq!(back.to_text(), text);
        }
    }

    #[test]
    fn suite_parse_rejects_malformed_lines() {
        assert!(TaskSuite::from_text("").is_err());
        assert!(TaskSuite::from_text("suite s vocab=4 Lz=2\n").is_err());
        let good = modchain(2, 0).to_text();
        let bad = good.replace("canon=", "cannon=");
        assert!(matches!(
            TaskSuite::from_text(&bad),
            Err(TaskError::Parse { .. })
        ));
    }

    #[test]
    fn hint_sampling_follows_the_prior() {
        let suite = modchain(4, 2);
        let q = &suite.questions[0];
        let mut rng = derive_rng(3, &[1]);
        let n = 20_000;
        let hits = (0..n)
            .filter(|_| q.sample_hint(&mut rng) == q.answers.canonical())
            .count();
        // Uniform over two members: expect n/2 within 3 binomial sigmas.
        let sigma = (n as f64 * 0.25).sqrt();
        assert!((hits as f64 - n as f64 / 2.0).abs() < 3.0 * sigma);
    }

    #[test]
    fn skewed_hint_prior_is_respected_and_normalized() {
        let suite = modchain(1, 2);
        let mut q = suite.questions[0].clone();
        q.hint_prior = HintPrior::new(vec![3.0, 1.0], 2).unwrap();
        assert_eq!(q.hint_prior.probs(), &[0.75, 0.25]);
        let mut rng = derive_rng(9, &[4]);
        let n = 20_000;
        let first = &q.answers.members()[0].clone();
        let hits = (0..n).filter(|_| q.sample_hint(&mut rng) == first).count();
        let sigma = (n as f64 * 0.75 * 0.25).sqrt();
        assert!((hits as f64 - n as f64 * 0.75).abs() < 3.0 * sigma);
    }

    #[test]
    fn invalid_priors_and_answer_sets_are_rejected() {
        assert_eq!(
            HintPrior::new(vec![0.5], 2).unwrap_err(),
            TaskError::PriorLength { answers: 2, probs: 1 }
        );
        assert_eq!(
            HintPrior::new(vec![-0.1, 1.1], 2).unwrap_err(),
            TaskError::PriorMass
        );
        assert_eq!(
            HintPrior::new(vec![0.0, 0.0], 2).unwrap_err(),
            TaskError::PriorMass
        );
        assert_eq!(
            AnswerSet::new(vec![], Seq::empty()).unwrap_err(),
            TaskError::EmptyAnswerSet
        );
        assert_eq!(
            AnswerSet::new(vec![Seq::from([1])], Seq::from([0])).unwrap_err(),
            TaskError::CanonicalNotMember("0".into())
        );
    }

    #[test]
    fn suite_constructor_enforces_caps_and_vocab() {
        let vocab = Vocab::new(2).unwrap();
        let caps = SegmentCaps { trace: 2, answer: 1 };
        let set = AnswerSet::new(vec![Seq::from([0, 1])], Seq::from([0, 1])).unwrap();
        let q = Question::new(0, Seq::from([0]), set, 2);
        let err = TaskSuite::new("s".into(), vocab, caps, vec![q]).unwrap_err();
        assert!(matches!(err, TaskError::AnswerOverCap { id: 0, .. }));

        let set = AnswerSet::new(vec![Seq::from([5])], Seq::from([5])).unwrap();
        let q = Question::new(1, Seq::from([0]), set, 1);
        let err = TaskSuite::new("s".into(), vocab, caps, vec![q]).unwrap_err();
        assert_eq!(
            err,
            TaskError::Seq(SeqError::TokenOutOfRange { got: 5, size: 2 })
        );

        let err = TaskSuite::new("two words".into(), vocab, caps, vec![]).unwrap_err();
        assert!(matches!(err, TaskError::BadName(_)));
        let err = TaskSuite::new(
            "s".into(),
            vocab,
            SegmentCaps { trace: 5, answer: 1 },
            vec![],
        )
        .unwrap_err();
        assert_eq!(err, TaskError::TraceCap(5));
    }
}
