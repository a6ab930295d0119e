//! One-layer, single-head attention model evaluated at the relation position.
//!
//! The relation token is always the query. For `[c, s, r]` inputs the relation
//! key is hard-masked, so attention is a two-way softmax over `{c, s}`; for
//! `[s, r]` inputs attention is an unmasked softmax over `{s, r}`.
//!
//! Logits at the last position are `z = Σ_y σ_y W_Hᵀ W_V φ(y)` and the loss is
//! next-token cross-entropy against the example label. Gradients are returned
//! as *negative* gradients `−∇L`, the direction a descent step moves in.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::{dot, log_sum_exp, softmax, Scalar};
use crate::token_space::{Token, TokenKind, TokenSpace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Category {
    /// Context is the only predictive feature of the label.
    #[serde(rename = "C")]
    Context,
    /// Subject was memorized in pretraining with the same answer as the context.
    #[serde(rename = "C+S")]
    ContextSubject,
    #[serde(rename = "S_seen")]
    SubjectSeen,
    #[serde(rename = "S_unseen")]
    SubjectUnseen,
    #[serde(rename = "CONFLICT_TEST")]
    ConflictTest,
    #[serde(rename = "CF_AUG")]
    CounterfactualAug,
}

impl Category {
    pub const ALL: [Category; 6] = [
        Category::Context,
        Category::ContextSubject,
        Category::SubjectSeen,
        Category::SubjectUnseen,
        Category::ConflictTest,
        Category::CounterfactualAug,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Context => "C",
            Category::ContextSubject => "C+S",
            Category::SubjectSeen => "S_seen",
            Category::SubjectUnseen => "S_unseen",
            Category::ConflictTest => "CONFLICT_TEST",
            Category::CounterfactualAug => "CF_AUG",
        }
    }

    pub fn has_context(self) -> bool {
        !matches!(self, Category::SubjectSeen | Category::SubjectUnseen)
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Category::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown category {s:?}")))
    }
}

/// A labelled input `[c, s, r]` or `[s, r]`. The relation token is implicit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub context: Option<Token>,
    pub subject: Token,
    pub label: Token,
    pub category: Category,
}

impl Example {
    pub fn with_context(context: Token, subject: Token, label: Token, category: Category) -> Self {
        Self {
            context: Some(context),
            subject,
            label,
            category,
        }
    }

    pub fn subject_only(subject: Token, label: Token, category: Category) -> Self {
        Self {
            context: None,
            subject,
            label,
            category,
        }
    }

    /// Full token sequence including the trailing relation token.
    pub fn tokens(&self, relation: Token) -> Vec<Token> {
        let mut v = Vec::with_capacity(3);
        v.extend(self.context);
        v.push(self.subject);
        v.push(relation);
        v
    }

    /// Same example with the context removed.
    pub fn without_context(&self) -> Self {
        Self {
            context: None,
            ..*self
        }
    }

    pub fn validate<T: Scalar>(&self, space: &TokenSpace<T>) -> Result<()> {
        let l = space.layout();
        if let Some(c) = self.context {
            l.check(c, TokenKind::Answer, "context")?;
        }
        l.check(self.subject, TokenKind::Subject, "subject")?;
        if l.kind(self.label).is_none() {
            return Err(Error::InvalidToken {
                token: self.label.0,
                role: "label",
            });
        }
        Ok(())
    }
}

/// Attention weights of the relation query over the keys of one input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionWeights<T> {
    /// `None` for two-token inputs.
    pub context: Option<T>,
    pub subject: T,
    /// Exactly zero for three-token inputs (masked key).
    pub relation: T,
}

impl<T: Scalar> AttentionWeights<T> {
    pub fn sum(&self) -> T {
        self.context.unwrap_or_else(T::zero) + self.subject + self.relation
    }
}

#[derive(Debug, Clone)]
pub struct ModelState<T> {
    pub w_kq: Matrix<T>,
    pub w_v: Matrix<T>,
    space: Arc<TokenSpace<T>>,
    pub timestep: usize,
}

impl<T: Scalar> ModelState<T> {
    pub fn new(space: Arc<TokenSpace<T>>, w_kq: Matrix<T>, w_v: Matrix<T>) -> Result<Self> {
        let d = space.dim();
        for (name, m) in [("W_KQ", &w_kq), ("W_V", &w_v)] {
            if m.shape() != (d, d) {
                return Err(Error::ShapeMismatch {
                    op: "ModelState::new",
                    expected: format!("{name} {d}x{d}"),
                    found: format!("{}x{}", m.rows(), m.cols()),
                });
            }
        }
        Ok(Self {
            w_kq,
            w_v,
            space,
            timestep: 0,
        })
    }

    pub fn zeros(space: Arc<TokenSpace<T>>) -> Self {
        let d = space.dim();
        Self {
            w_kq: Matrix::zeros(d, d),
            w_v: Matrix::zeros(d, d),
            space,
            timestep: 0,
        }
    }

    /// The frozen head / embedding table.
    pub fn space(&self) -> &TokenSpace<T> {
        &self.space
    }

    pub fn space_arc(&self) -> &Arc<TokenSpace<T>> {
        &self.space
    }

    pub fn is_finite(&self) -> bool {
        self.w_kq.is_finite() && self.w_v.is_finite()
    }

    /// `W_KQ φ(r)`; every attention score is `φ(y)` dotted with this.
    pub fn query(&self) -> Vec<T> {
        self.w_kq
            .matvec(self.space.embedding(self.space.relation()))
    }

    /// Pre-softmax score `φ(y)ᵀ W_KQ φ(r)`.
    pub fn score(&self, y: Token) -> T {
        dot(self.space.embedding(y), &self.query())
    }

    /// `v(y) = W_Hᵀ W_V φ(y)`, the value logits of one token.
    pub fn value_logits(&self, y: Token) -> Vec<T> {
        self.space
            .head_logits(&self.w_v.matvec(self.space.embedding(y)))
    }

    pub fn attention_weights(&self, example: &Example) -> AttentionWeights<T> {
        attention_from_query(&self.space, &self.query(), example)
    }

    /// Logits over the whole vocabulary at the relation position.
    pub fn forward_last_token(&self, example: &Example) -> Vec<T> {
        let att = self.attention_weights(example);
        let mut z = vec![T::zero(); self.space.num_tokens()];
        for (y, w) in keys(&att, example, self.space.relation()) {
            if w == T::zero() {
                continue;
            }
            for (zk, vk) in z.iter_mut().zip(self.value_logits(y)) {
                *zk += w * vk;
            }
        }
        z
    }

    /// `softmax(W_Hᵀ W_V φ(s))`: what the subject alone predicts.
    pub fn subject_distribution(&self, s: Token) -> Vec<T> {
        softmax(&self.value_logits(s))
    }

    /// All value logits at once; row `y` is `v(y)`.
    pub fn value_cache(&self) -> ValueCache<T> {
        let wv_phi = self
            .w_v
            .matmul(self.space.table())
            .expect("W_V and embedding table shapes agree");
        let rows = wv_phi
            .transpose()
            .matmul(self.space.table())
            .expect("square value table");
        ValueCache { rows }
    }
}

fn attention_from_query<T: Scalar>(
    space: &TokenSpace<T>,
    query: &[T],
    example: &Example,
) -> AttentionWeights<T> {
    let s_score = dot(space.embedding(example.subject), query);
    match example.context {
        Some(c) => {
            let w = softmax(&[dot(space.embedding(c), query), s_score]);
            AttentionWeights {
                context: Some(w[0]),
                subject: w[1],
                relation: T::zero(),
            }
        }
        None => {
            let r_score = dot(space.embedding(space.relation()), query);
            let w = softmax(&[s_score, r_score]);
            AttentionWeights {
                context: None,
                subject: w[0],
                relation: w[1],
            }
        }
    }
}

/// Unmasked `(key, weight)` pairs.
fn keys<T: Scalar>(att: &AttentionWeights<T>, ex: &Example, relation: Token) -> Vec<(Token, T)> {
    match (ex.context, att.context) {
        (Some(c), Some(wc)) => vec![(c, wc), (ex.subject, att.subject)],
        _ => vec![(ex.subject, att.subject), (relation, att.relation)],
    }
}

/// Precomputed value logits `v(y)` for every token; valid while `W_V` is unchanged.
#[derive(Debug, Clone)]
pub struct ValueCache<T> {
    rows: Matrix<T>,
}

impl<T: Scalar> ValueCache<T> {
    pub fn value(&self, y: Token) -> &[T] {
        self.rows.row(y.0)
    }

    /// The full `K × K` table `ΦᵀW_VᵀΦ`; row `y` is `v(y)`.
    pub fn as_matrix(&self) -> &Matrix<T> {
        &self.rows
    }
}

/// Everything one forward/backward pass over a single example produces.
#[derive(Debug, Clone)]
pub struct ExampleEval<T> {
    pub attention: AttentionWeights<T>,
    pub logits: Vec<T>,
    pub probs: Vec<T>,
    pub loss: T,
    keys: Vec<(Token, T)>,
    /// `g_y = ⟨v(y), e_label − softmax(z)⟩` per unmasked key.
    key_residuals: Vec<T>,
}

impl<T: Scalar> ExampleEval<T> {
    /// `⟨v(c) − v(s), e_label − softmax(z)⟩` for three-token inputs.
    pub fn context_subject_margin(&self) -> Option<T> {
        (self.keys.len() == 2 && self.attention.context.is_some())
            .then(|| self.key_residuals[0] - self.key_residuals[1])
    }
}

/// Stateless helper bundling a state with its query vector and value cache.
pub struct Evaluator<'a, T> {
    state: &'a ModelState<T>,
    query: Vec<T>,
    values: ValueCache<T>,
}

impl<'a, T: Scalar> Evaluator<'a, T> {
    pub fn new(state: &'a ModelState<T>) -> Self {
        Self {
            query: state.query(),
            values: state.value_cache(),
            state,
        }
    }

    /// Reuses a cache computed for the same `W_V`.
    pub fn with_cache(state: &'a ModelState<T>, values: ValueCache<T>) -> Self {
        Self {
            query: state.query(),
            values,
            state,
        }
    }

    pub fn into_cache(self) -> ValueCache<T> {
        self.values
    }

    pub fn values(&self) -> &ValueCache<T> {
        &self.values
    }

    pub fn eval(&self, ex: &Example) -> ExampleEval<T> {
        let space = self.state.space();
        let attention = attention_from_query(space, &self.query, ex);
        let keys = keys(&attention, ex, space.relation());
        let mut logits = vec![T::zero(); space.num_tokens()];
        for &(y, w) in &keys {
            for (zk, &vk) in logits.iter_mut().zip(self.values.value(y)) {
                *zk += w * vk;
            }
        }
        let probs = softmax(&logits);
        let loss = log_sum_exp(&logits) - logits[ex.label.0];
        let key_residuals = keys
            .iter()
            .map(|&(y, _)| {
                let v = self.values.value(y);
                v[ex.label.0] - dot(v, &probs)
            })
            .collect();
        ExampleEval {
            attention,
            logits,
            probs,
            loss,
            keys,
            key_residuals,
        }
    }

    /// Left factor `u` of the rank-one negative gradient `−∇_{W_KQ} ℓ = u φ(r)ᵀ`.
    pub fn kq_direction(&self, ev: &ExampleEval<T>) -> Vec<T> {
        let space = self.state.space();
        let mean: T = ev
            .keys
            .iter()
            .zip(&ev.key_residuals)
            .map(|(&(_, w), &g)| w * g)
            .sum();
        let mut u = vec![T::zero(); space.dim()];
        for (&(y, w), &g) in ev.keys.iter().zip(&ev.key_residuals) {
            let coef = w * (g - mean);
            for (ui, &e) in u.iter_mut().zip(space.embedding(y)) {
                *ui += coef * e;
            }
        }
        u
    }

    /// Adds `weight · (−∇_{W_V} ℓ) = weight · W_H(e_a − p) xᵀ`, with `x = Σ σ_y φ(y)`.
    pub fn accumulate_v_grad(&self, ex: &Example, ev: &ExampleEval<T>, weight: T, acc: &mut Matrix<T>) {
        let space = self.state.space();
        let mut residual: Vec<T> = ev.probs.iter().map(|&p| -p).collect();
        residual[ex.label.0] += T::one();
        let h = space.head_combine(&residual);
        let mut x = vec![T::zero(); space.dim()];
        for &(y, w) in &ev.keys {
            for (xi, &e) in x.iter_mut().zip(space.embedding(y)) {
                *xi += w * e;
            }
        }
        acc.add_outer(weight, &h, &x);
    }
}

pub fn attention_weights<T: Scalar>(state: &ModelState<T>, example: &Example) -> AttentionWeights<T> {
    state.attention_weights(example)
}

pub fn forward_last_token<T: Scalar>(state: &ModelState<T>, example: &Example) -> Vec<T> {
    state.forward_last_token(example)
}

/// Mean next-token loss at the relation position.
pub fn nll_loss<T: Scalar>(state: &ModelState<T>, dataset: &[Example]) -> Result<T> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let ev = Evaluator::new(state);
    let total: T = dataset.iter().map(|ex| ev.eval(ex).loss).sum();
    Ok(total / T::lit(dataset.len() as f64))
}

/// `−∇_{W_KQ} ℓ` for one example.
pub fn grad_wkq<T: Scalar>(state: &ModelState<T>, example: &Example) -> Matrix<T> {
    let ev = Evaluator::new(state);
    let u = ev.kq_direction(&ev.eval(example));
    Matrix::outer(&u, state.space().embedding(state.space().relation()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

/// `−∇_{W_KQ}` of the summed or averaged loss over a dataset.
pub fn grad_wkq_batch<T: Scalar>(
    state: &ModelState<T>,
    dataset: &[Example],
    reduction: Reduction,
) -> Result<Matrix<T>> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let ev = Evaluator::new(state);
    let mut u = vec![T::zero(); state.space().dim()];
    for ex in dataset {
        for (a, b) in u.iter_mut().zip(ev.kq_direction(&ev.eval(ex))) {
            *a += b;
        }
    }
    if reduction == Reduction::Mean {
        let n = T::lit(dataset.len() as f64);
        u.iter_mut().for_each(|x| *x /= n);
    }
    Ok(Matrix::outer(
        &u,
        state.space().embedding(state.space().relation()),
    ))
}

/// `−∇_{W_V} L` of the mean loss.
pub fn grad_wv<T: Scalar>(state: &ModelState<T>, dataset: &[Example]) -> Result<Matrix<T>> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let ev = Evaluator::new(state);
    let d = state.space().dim();
    let mut acc = Matrix::zeros(d, d);
    let w = T::one() / T::lit(dataset.len() as f64);
    for ex in dataset {
        ev.accumulate_v_grad(ex, &ev.eval(ex), w, &mut acc);
    }
    Ok(acc)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WeightKind {
    KeyQuery,
    Value,
}

/// Central-difference gradient `∇f` of a scalar function of a matrix.
pub fn central_difference<T: Scalar>(
    at: &Matrix<T>,
    step: T,
    mut f: impl FnMut(&Matrix<T>) -> T,
) -> Matrix<T> {
    let mut probe = at.clone();
    let two_h = step + step;
    Matrix::from_fn(at.rows(), at.cols(), |i, j| {
        let orig = probe[(i, j)];
        probe[(i, j)] = orig + step;
        let up = f(&probe);
        probe[(i, j)] = orig - step;
        let down = f(&probe);
        probe[(i, j)] = orig;
        (up - down) / two_h
    })
}

/// Finite-difference estimate of `−∇L` (mean loss) with respect to one weight matrix.
pub fn finite_diff_grad<T: Scalar>(
    state: &ModelState<T>,
    dataset: &[Example],
    which: WeightKind,
    step: T,
) -> Result<Matrix<T>> {
    if step <= T::zero() {
        return Err(Error::InvalidSpec("finite-difference step must be positive".into()));
    }
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut probe = state.clone();
    let at = match which {
        WeightKind::KeyQuery => state.w_kq.clone(),
        WeightKind::Value => state.w_v.clone(),
    };
    let mut g = central_difference(&at, step, |m| {
        match which {
            WeightKind::KeyQuery => probe.w_kq = m.clone(),
            WeightKind::Value => probe.w_v = m.clone(),
        }
        nll_loss(&probe, dataset).expect("nonempty dataset")
    });
    g.scale(-T::one());
    Ok(g)
}

/// Central differences of `−∇L` at selected entries only.
///
/// Cheap enough for full-size states: perturbing `W_KQ` leaves the value
/// cache intact, and perturbing `W_V[i, j]` by `h` is the rank-one cache
/// update `v(y)_k += h φ(y)_j φ(k)_i`.
pub fn finite_diff_entries<T: Scalar>(
    state: &ModelState<T>,
    dataset: &[Example],
    which: WeightKind,
    step: T,
    entries: &[(usize, usize)],
) -> Result<Vec<T>> {
    if step <= T::zero() {
        return Err(Error::InvalidSpec("finite-difference step must be positive".into()));
    }
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let d = state.space().dim();
    if let Some(&(i, j)) = entries.iter().find(|&&(i, j)| i >= d || j >= d) {
        return Err(Error::ShapeMismatch {
            op: "finite_diff_entries",
            expected: format!("indices below {d}"),
            found: format!("({i}, {j})"),
        });
    }
    let base = state.value_cache();
    let phi = state.space().table();
    let n = T::lit(dataset.len() as f64);
    let loss_at = |probe: &ModelState<T>, cache: ValueCache<T>| -> T {
        let ev = Evaluator::with_cache(probe, cache);
        dataset.iter().map(|ex| ev.eval(ex).loss).sum::<T>() / n
    };
    let mut probe = state.clone();
    let mut out = Vec::with_capacity(entries.len());
    for &(i, j) in entries {
        let mut side = |h: T| -> T {
            match which {
                WeightKind::KeyQuery => {
                    let orig = probe.w_kq[(i, j)];
                    probe.w_kq[(i, j)] = orig + h;
                    let l = loss_at(&probe, base.clone());
                    probe.w_kq[(i, j)] = orig;
                    l
                }
                WeightKind::Value => {
                    let mut cache = base.clone();
                    cache.rows.add_outer(h, phi.row(j), phi.row(i));
                    loss_at(&probe, cache)
                }
            }
        };
        let up = side(step);
        let down = side(-step);
        out.push(-(up - down) / (step + step));
    }
    Ok(out)
}

/// Largest entrywise gap between two gradients, relative to the larger of
/// their sup-norms.
pub fn relative_gradient_error<T: Scalar>(analytic: &Matrix<T>, numeric: &Matrix<T>) -> T {
    let scale = analytic.max_abs().max(numeric.max_abs());
    if scale == T::zero() {
        return T::zero();
    }
    analytic.max_abs_diff(numeric) / scale
}
