//! Training mixtures, conflict test sets, counterfactual augmentation and the
//! context-ablated perplexity filter.
//!
//! Every subject appears in at most one base training example, so each
//! subject-answer pair is unique. Counterfactual augmentation deliberately
//! reuses subjects and is exempt from that rule.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Category, Evaluator, Example, ModelState};
use crate::pretrain::{FactPlan, Pretrained};
use crate::scalar::Scalar;
use crate::token_space::{Token, TokenKind, TokenLayout};

/// Slack allowed when reading a constructed probability back from the state.
const LEVEL_TOLERANCE: f64 = 1e-9;
/// The answer-restricted subject distribution of a C example must be uniform to this.
const UNIFORM_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MixtureCounts {
    pub n_c: usize,
    pub n_cs: usize,
    pub n_s_seen: usize,
    pub n_s_unseen: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub examples: Vec<Example>,
    /// Answers never used in training, unassigned answers first; conflict and
    /// augmentation contexts are drawn from here in order.
    pub held_out_contexts: Vec<Token>,
}

impl Dataset {
    /// Checks uniqueness and derives the held-out contexts.
    pub fn from_examples(examples: Vec<Example>, plan: &FactPlan, layout: &TokenLayout) -> Result<Self> {
        let mut subjects = BTreeSet::new();
        for ex in &examples {
            if ex.category == Category::CounterfactualAug {
                continue;
            }
            if !subjects.insert(ex.subject) {
                return Err(Error::Uniqueness {
                    subject: ex.subject.0,
                    answer: ex.label.0,
                });
            }
        }
        let mut ds = Self {
            examples,
            held_out_contexts: Vec::new(),
        };
        let used = ds.training_answers();
        let unassigned = plan.unassigned_answers(layout);
        let unassigned_set: BTreeSet<Token> = unassigned.iter().copied().collect();
        ds.held_out_contexts = unassigned
            .into_iter()
            .chain(layout.answers().filter(|a| !unassigned_set.contains(a)))
            .filter(|a| !used.contains(a))
            .collect();
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn of(&self, category: Category) -> impl Iterator<Item = &Example> {
        self.examples.iter().filter(move |e| e.category == category)
    }

    pub fn category_counts(&self) -> BTreeMap<Category, usize> {
        let mut out = BTreeMap::new();
        for e in &self.examples {
            *out.entry(e.category).or_insert(0) += 1;
        }
        out
    }

    /// Every answer token that occurs as a context or label.
    pub fn training_answers(&self) -> BTreeSet<Token> {
        self.examples
            .iter()
            .flat_map(|e| e.context.into_iter().chain([e.label]))
            .collect()
    }

    pub fn subjects(&self) -> BTreeSet<Token> {
        self.examples.iter().map(|e| e.subject).collect()
    }

    /// Appends augmentation examples; their contexts leave the held-out pool.
    pub fn with_augmentation(&self, extra: &[Example]) -> Self {
        let mut examples = self.examples.clone();
        examples.extend_from_slice(extra);
        let used: BTreeSet<Token> = extra.iter().flat_map(|e| e.context).collect();
        Self {
            examples,
            held_out_contexts: self
                .held_out_contexts
                .iter()
                .copied()
                .filter(|c| !used.contains(c))
                .collect(),
        }
    }

    /// One record per line: `category<TAB>comma-separated token ids<TAB>label`.
    pub fn to_records(&self, relation: Token) -> String {
        let mut out = String::new();
        for e in &self.examples {
            let ids: Vec<String> = e.tokens(relation).iter().map(|t| t.0.to_string()).collect();
            writeln!(out, "{}\t{}\t{}", e.category, ids.join(","), e.label.0).unwrap();
        }
        out
    }
}

/// Parses the line format written by [`Dataset::to_records`].
pub fn parse_records(text: &str, layout: &TokenLayout) -> Result<Vec<Example>> {
    let bad = |line: usize, why: &str| Error::Config(format!("record line {line}: {why}"));
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [cat, ids, label] = fields[..] else {
            return Err(bad(n, "expected three tab-separated fields"));
        };
        let category: Category = cat.parse()?;
        let ids: Vec<Token> = ids
            .split(',')
            .map(|x| x.trim().parse().map(Token))
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad(n, "token ids must be integers"))?;
        let label = Token(label.trim().parse().map_err(|_| bad(n, "label must be an integer"))?);
        if ids.last() != Some(&layout.relation()) {
            return Err(bad(n, "sequence must end with the relation token"));
        }
        let ex = match ids[..] {
            [c, s, _] => Example::with_context(c, s, label, category),
            [s, _] => Example::subject_only(s, label, category),
            _ => return Err(bad(n, "sequence must have two or three tokens")),
        };
        if let Some(c) = ex.context {
            layout.check(c, TokenKind::Answer, "context")?;
        }
        layout.check(ex.subject, TokenKind::Subject, "subject")?;
        if layout.kind(label).is_none() {
            return Err(Error::InvalidToken {
                token: label.0,
                role: "label",
            });
        }
        out.push(ex);
    }
    Ok(out)
}

fn take<T: Copy>(pool: &[T], start: &mut usize, n: usize, what: &'static str) -> Result<Vec<T>> {
    let available = pool.len().saturating_sub(*start);
    if n > available {
        return Err(Error::InsufficientTokens {
            what,
            needed: n,
            available,
        });
    }
    let out = pool[*start..*start + n].to_vec();
    *start += n;
    Ok(out)
}

fn verification<T>(ex: &Example, reason: String) -> Result<T> {
    Err(Error::CategoryVerification {
        category: ex.category.as_str(),
        subject: ex.subject.0,
        reason,
    })
}

/// Checks that the live state realizes the ordering a category assumes.
pub fn verify_example<T: Scalar>(pre: &Pretrained<T>, ex: &Example) -> Result<()> {
    ex.validate(pre.space())?;
    let p = &pre.params;
    let state = &pre.state;
    let subj = state.subject_distribution(ex.subject);
    let subj_label = subj[ex.label.0].as_f64();
    match ex.category {
        Category::Context | Category::ContextSubject | Category::CounterfactualAug => {
            let Some(c) = ex.context else {
                return verification(ex, "missing context".into());
            };
            if c != ex.label {
                return verification(ex, format!("label {} differs from context {}", ex.label, c));
            }
            let ctx = state.subject_distribution(c)[c.0].as_f64();
            if ctx < p.delta_c - LEVEL_TOLERANCE {
                return verification(ex, format!("context mass {ctx} below delta_c"));
            }
            match ex.category {
                Category::Context => {
                    if pre.plan.is_memorized(ex.subject) {
                        return verification(ex, "subject is memorized".into());
                    }
                    let uniform = 1.0 / p.num_answers as f64;
                    let ans = pre.answer_distribution(ex.subject);
                    let mass = ans[c.0 - pre.layout().answer(0).0].as_f64();
                    if (mass - uniform).abs() > UNIFORM_TOLERANCE {
                        return verification(
                            ex,
                            format!("subject answer mass {mass} on context is not 1/K_A"),
                        );
                    }
                }
                Category::ContextSubject => {
                    if pre.plan.answer_of(ex.subject) != Some(c) || !pre.plan.is_memorized(ex.subject) {
                        return verification(ex, "subject is not memorized with this answer".into());
                    }
                    if subj_label < p.delta_m - LEVEL_TOLERANCE || subj_label <= ctx {
                        return verification(
                            ex,
                            format!("subject mass {subj_label} not above delta_m and context mass {ctx}"),
                        );
                    }
                }
                _ => {
                    let a = pre.plan.answer_of(ex.subject);
                    if !pre.plan.is_memorized(ex.subject) || a == Some(c) {
                        return verification(ex, "needs a memorized subject whose answer differs from the context".into());
                    }
                }
            }
        }
        Category::SubjectSeen => {
            if subj_label < p.delta_m - LEVEL_TOLERANCE {
                return verification(ex, format!("subject mass {subj_label} below delta_m"));
            }
        }
        Category::SubjectUnseen => {
            if subj_label >= p.delta_s {
                return verification(ex, format!("subject mass {subj_label} not below delta_s"));
            }
        }
        Category::ConflictTest => {
            let Some(c) = ex.context else {
                return verification(ex, "missing context".into());
            };
            if c == ex.label {
                return verification(ex, "context equals the parametric answer".into());
            }
            if subj_label < p.delta_m - LEVEL_TOLERANCE {
                return verification(ex, format!("parametric mass {subj_label} below delta_m"));
            }
        }
    }
    Ok(())
}

/// Seeded training mixture with every example verified against `pre.state`.
pub fn make_training_mixture<T: Scalar>(
    pre: &Pretrained<T>,
    counts: MixtureCounts,
    seed: u64,
) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut unmemorized: Vec<Token> = pre.plan.unmemorized_subjects().collect();
    let mut memorized: Vec<Token> = pre.plan.memorized_subjects().collect();
    unmemorized.shuffle(&mut rng);
    memorized.shuffle(&mut rng);
    let (mut iu, mut im) = (0, 0);
    let c_subjects = take(&unmemorized, &mut iu, counts.n_c, "unmemorized subjects")?;
    let cs_subjects = take(&memorized, &mut im, counts.n_cs, "memorized subjects")?;
    let seen = take(&memorized, &mut im, counts.n_s_seen, "memorized subjects")?;
    let unseen = take(&unmemorized, &mut iu, counts.n_s_unseen, "unmemorized subjects")?;

    let answer = |s: Token| pre.plan.answer_of(s).expect("every subject has an answer");
    let mut examples = Vec::with_capacity(counts.n_c + counts.n_cs + counts.n_s_seen + counts.n_s_unseen);
    examples.extend(c_subjects.iter().map(|&s| Example::with_context(answer(s), s, answer(s), Category::Context)));
    examples.extend(cs_subjects.iter().map(|&s| Example::with_context(answer(s), s, answer(s), Category::ContextSubject)));
    examples.extend(seen.iter().map(|&s| Example::subject_only(s, answer(s), Category::SubjectSeen)));
    examples.extend(unseen.iter().map(|&s| Example::subject_only(s, answer(s), Category::SubjectUnseen)));
    for ex in &examples {
        verify_example(pre, ex)?;
    }
    Dataset::from_examples(examples, &pre.plan, &pre.layout())
}

/// Errors if any test context also occurs as a training context or label.
pub fn check_conflict_hygiene(dataset: &Dataset, testset: &[Example]) -> Result<()> {
    let used = dataset.training_answers();
    for ex in testset {
        if let Some(c) = ex.context.filter(|c| used.contains(c)) {
            return Err(Error::ConflictLeak { context: c.0 });
        }
    }
    Ok(())
}

/// Pairs memorized subjects absent from training with held-out contexts that
/// differ from their parametric answers. Labels hold the parametric answer.
pub fn make_conflict_testset<T: Scalar>(
    pre: &Pretrained<T>,
    dataset: &Dataset,
    m: usize,
    seed: u64,
) -> Result<Vec<Example>> {
    if m == 0 {
        return Ok(Vec::new());
    }
    let used_subjects = dataset.subjects();
    let mut subjects: Vec<Token> = pre
        .plan
        .memorized_subjects()
        .filter(|s| !used_subjects.contains(s))
        .collect();
    subjects.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut start = 0;
    let subjects = take(&subjects, &mut start, m, "untrained memorized subjects")?;
    let mut pool = dataset.held_out_contexts.clone();
    let mut out = Vec::with_capacity(m);
    for s in subjects {
        let a = pre.plan.answer_of(s).expect("memorized subjects have answers");
        let Some(pos) = pool.iter().position(|&c| c != a) else {
            return Err(Error::InsufficientTokens {
                what: "held-out contexts",
                needed: m,
                available: out.len(),
            });
        };
        let c = pool.remove(pos);
        out.push(Example::with_context(c, s, a, Category::ConflictTest));
    }
    check_conflict_hygiene(dataset, &out)?;
    for ex in &out {
        verify_example(pre, ex)?;
    }
    Ok(out)
}

/// `k` examples `[c', s, r] → c'` whose subject was memorized with an answer other than `c'`.
///
/// Subjects come from the C+S part of the mixture; contexts come from the
/// held-out pool minus anything the test set uses.
pub fn make_cf_augmentation<T: Scalar>(
    pre: &Pretrained<T>,
    dataset: &Dataset,
    testset: &[Example],
    k: usize,
    seed: u64,
) -> Result<Vec<Example>> {
    if k == 0 {
        return Ok(Vec::new());
    }
    let mut subjects: Vec<Token> = dataset.of(Category::ContextSubject).map(|e| e.subject).collect();
    subjects.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut start = 0;
    let subjects = take(&subjects, &mut start, k, "memorized subjects")?;
    let reserved: BTreeSet<Token> = testset.iter().flat_map(|e| e.context).collect();
    let mut pool: Vec<Token> = dataset
        .held_out_contexts
        .iter()
        .copied()
        .filter(|c| !reserved.contains(c))
        .collect();
    let mut out = Vec::with_capacity(k);
    for s in subjects {
        let a = pre.plan.answer_of(s).expect("memorized subjects have answers");
        let Some(pos) = pool.iter().position(|&c| c != a) else {
            return Err(Error::InsufficientTokens {
                what: "augmentation contexts",
                needed: k,
                available: out.len(),
            });
        };
        let c = pool.remove(pos);
        out.push(Example::with_context(c, s, c, Category::CounterfactualAug));
    }
    for ex in &out {
        verify_example(pre, ex)?;
    }
    Ok(out)
}

/// Removes the `round((1 − keep_fraction)·n)` examples with the lowest loss on
/// the context-ablated input `[s, r]`. Ties keep their original order.
pub fn perplexity_filter<T: Scalar>(
    state: &ModelState<T>,
    dataset: &Dataset,
    keep_fraction: f64,
) -> Result<(Dataset, Dataset)> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::InvalidSpec(format!(
            "keep_fraction must lie in (0, 1], got {keep_fraction}"
        )));
    }
    if let Some(ex) = dataset.examples.iter().find(|e| e.context.is_none()) {
        return Err(Error::InvalidSpec(format!(
            "perplexity filter needs three-token inputs; subject {} has no context",
            ex.subject
        )));
    }
    let ev = Evaluator::new(state);
    let scores: Vec<T> = dataset
        .examples
        .iter()
        .map(|e| ev.eval(&e.without_context()).loss)
        .collect();
    let n = dataset.len();
    let remove = ((1.0 - keep_fraction) * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| scores[i].partial_cmp(&scores[j]).unwrap_or(std::cmp::Ordering::Equal));
    let removed_idx: BTreeSet<usize> = order.into_iter().take(remove).collect();
    let (mut kept, mut removed) = (Vec::new(), Vec::new());
    for (i, e) in dataset.examples.iter().enumerate() {
        if removed_idx.contains(&i) {
            removed.push(*e);
        } else {
            kept.push(*e);
        }
    }
    let split = |examples: Vec<Example>| Dataset {
        examples,
        held_out_contexts: dataset.held_out_contexts.clone(),
    };
    Ok((split(kept), split(removed)))
}

/// Per-example context-ablated losses, in dataset order.
pub fn context_ablated_losses<T: Scalar>(state: &ModelState<T>, dataset: &Dataset) -> Vec<T> {
    let ev = Evaluator::new(state);
    dataset
        .examples
        .iter()
        .map(|e| ev.eval(&e.without_context()).loss)
        .collect()
}
