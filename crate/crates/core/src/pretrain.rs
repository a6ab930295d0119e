//! Synthesized pretrained state.
//!
//! Nothing is learned here. The value matrix is solved directly so that every
//! value inner product `v_0(x, y) = φ(x)ᵀ W_V φ(y)` sits at a prescribed level:
//!
//! * answer tokens predict themselves with probability `δ_C`;
//! * memorized subjects predict their answer with probability `δ_M`;
//! * every other answer entry is `o_c`, every relation entry `o_r`, every subject entry `0`.
//!
//! With `B = (K_A − 1)e^{o_c} + e^{o_r} + K_S` this pins
//! `v_0(c, c) = logit(δ_C) + ln B` and `v_0(a, s) = logit(δ_M) + ln B`.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::ModelState;
use crate::scalar::{softmax, Scalar};
use crate::token_space::{Token, TokenKind, TokenLayout, TokenSpace};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainParams {
    pub num_subjects: usize,
    pub num_answers: usize,
    pub dim: usize,
    /// How many subjects have a memorized fact.
    pub num_memorized: usize,
    pub delta_c: f64,
    pub delta_m: f64,
    pub o_c: f64,
    pub o_r: f64,
    /// Upper bound on the answer mass an unseen subject may carry.
    pub delta_s: f64,
}

impl Default for PretrainParams {
    fn default() -> Self {
        Self {
            num_subjects: 96,
            num_answers: 128,
            dim: 232,
            num_memorized: 56,
            delta_c: 0.10,
            delta_m: 0.50,
            o_c: 0.1,
            o_r: 0.05,
            delta_s: 0.01,
        }
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl PretrainParams {
    pub fn layout(&self) -> TokenLayout {
        TokenLayout::new(self.num_subjects, self.num_answers)
    }

    /// Checks every inequality the construction relies on, naming the first one violated.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Constraint(msg));
        if self.num_subjects == 0 {
            return fail("num_subjects must be positive".into());
        }
        if self.num_answers < 2 {
            return fail("num_answers must be at least 2".into());
        }
        let required = self.layout().min_dim();
        if self.dim < required {
            return Err(Error::DimensionTooSmall {
                dim: self.dim,
                required,
            });
        }
        for (name, p) in [
            ("delta_c", self.delta_c),
            ("delta_m", self.delta_m),
            ("delta_s", self.delta_s),
        ] {
            if !(p > 0.0 && p < 1.0) {
                return fail(format!("{name} must lie in (0, 1), got {p}"));
            }
        }
        let floor = 3.0 / (self.num_answers as f64 - 1.0);
        if self.delta_c <= floor {
            return fail(format!(
                "delta_c > 3/(K_A - 1) required: {} <= {floor}",
                self.delta_c
            ));
        }
        if self.delta_m <= 2.0 * self.delta_c {
            return fail(format!(
                "delta_m > 2*delta_c required: {} <= {}",
                self.delta_m,
                2.0 * self.delta_c
            ));
        }
        if !(self.o_c > 0.0 && self.o_c.is_finite()) {
            return fail(format!("o_c > 0 required, got {}", self.o_c));
        }
        if !(self.o_r > 0.0 && self.o_r.is_finite()) {
            return fail(format!("o_r > 0 required, got {}", self.o_r));
        }
        if self.o_r > self.o_c {
            return fail(format!("o_r <= o_c required: {} > {}", self.o_r, self.o_c));
        }
        if self.num_answers < self.num_subjects {
            return fail(format!(
                "K_A >= K_S required so every subject gets its own answer: {} < {}",
                self.num_answers, self.num_subjects
            ));
        }
        if self.num_memorized > self.num_subjects {
            return fail(format!(
                "num_memorized <= num_subjects required: {} > {}",
                self.num_memorized, self.num_subjects
            ));
        }
        Ok(())
    }

    /// `B = (K_A − 1)e^{o_c} + e^{o_r} + K_S`, the softmax mass off the target entry.
    pub fn background_mass(&self) -> f64 {
        (self.num_answers as f64 - 1.0) * self.o_c.exp() + self.o_r.exp() + self.num_subjects as f64
    }

    /// `v_0(c, c)`.
    pub fn v0_context(&self) -> f64 {
        logit(self.delta_c) + self.background_mass().ln()
    }

    /// `v_0(a, s)` for a memorized subject `s` with answer `a`.
    pub fn v0_memorized(&self) -> f64 {
        logit(self.delta_m) + self.background_mass().ln()
    }
}

/// Which answer each subject is paired with, and which of those facts were memorized.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactPlan {
    pub assignment: BTreeMap<Token, Token>,
    pub memorized: BTreeSet<Token>,
}

impl FactPlan {
    /// Seeded random injective pairing of every subject with an answer; a
    /// seeded subset of `num_memorized` subjects is memorized.
    pub fn random(params: &PretrainParams, seed: u64) -> Result<Self> {
        params.validate()?;
        let layout = params.layout();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut answers: Vec<Token> = layout.answers().collect();
        answers.shuffle(&mut rng);
        let mut subjects: Vec<Token> = layout.subjects().collect();
        subjects.shuffle(&mut rng);
        let assignment = layout.subjects().zip(answers).collect();
        let memorized = subjects.into_iter().take(params.num_memorized).collect();
        Ok(Self {
            assignment,
            memorized,
        })
    }

    pub fn answer_of(&self, s: Token) -> Option<Token> {
        self.assignment.get(&s).copied()
    }

    pub fn is_memorized(&self, s: Token) -> bool {
        self.memorized.contains(&s)
    }

    /// Memorized subjects in id order.
    pub fn memorized_subjects(&self) -> impl Iterator<Item = Token> + '_ {
        self.memorized.iter().copied()
    }

    pub fn unmemorized_subjects(&self) -> impl Iterator<Item = Token> + '_ {
        self.assignment
            .keys()
            .copied()
            .filter(|s| !self.memorized.contains(s))
    }

    /// Answers no subject is paired with, in id order.
    pub fn unassigned_answers(&self, layout: &TokenLayout) -> Vec<Token> {
        let used: BTreeSet<Token> = self.assignment.values().copied().collect();
        layout.answers().filter(|a| !used.contains(a)).collect()
    }

    pub fn validate(&self, layout: &TokenLayout) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (&s, &a) in &self.assignment {
            layout.check(s, TokenKind::Subject, "assigned subject")?;
            layout.check(a, TokenKind::Answer, "assigned answer")?;
            if !seen.insert(a) {
                return Err(Error::Uniqueness {
                    subject: s.0,
                    answer: a.0,
                });
            }
        }
        for &s in &self.memorized {
            if !self.assignment.contains_key(&s) {
                return Err(Error::InvalidToken {
                    token: s.0,
                    role: "memorized subject without an assigned answer",
                });
            }
        }
        Ok(())
    }
}

/// Target value inner products; entry `(x, y)` is `v_0(x, y) = φ(x)ᵀ W_V φ(y)`,
/// so column `y` is the value logit vector of token `y`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueTable<T> {
    pub v: Matrix<T>,
}

pub fn build_value_table<T: Scalar>(params: &PretrainParams, plan: &FactPlan) -> Result<ValueTable<T>> {
    params.validate()?;
    let layout = params.layout();
    plan.validate(&layout)?;
    let k = layout.num_tokens();
    let o_c = T::lit(params.o_c);
    let o_r = T::lit(params.o_r);
    let r = layout.relation();
    let mut v = Matrix::zeros(k, k);
    let baseline_column = |v: &mut Matrix<T>, col: Token| {
        for a in layout.answers() {
            v[(a.0, col.0)] = o_c;
        }
        v[(r.0, col.0)] = o_r;
    };
    for c in layout.answers() {
        baseline_column(&mut v, c);
        v[(c.0, c.0)] = T::lit(params.v0_context());
    }
    baseline_column(&mut v, r);
    let v_mem = T::lit(params.v0_memorized());
    for (&s, &a) in &plan.assignment {
        baseline_column(&mut v, s);
        if plan.is_memorized(s) {
            v[(a.0, s.0)] = v_mem;
        }
    }
    Ok(ValueTable { v })
}

/// Minimum-norm `W_V` with `Φᵀ W_V Φ = V`, i.e. `W_V = (Φ⁺)ᵀ V Φ⁺`.
pub fn solve_wv<T: Scalar>(space: &TokenSpace<T>, table: &ValueTable<T>) -> Result<Matrix<T>> {
    let k = space.num_tokens();
    if table.v.shape() != (k, k) {
        return Err(Error::ShapeMismatch {
            op: "solve_wv",
            expected: format!("{k}x{k} value table"),
            found: format!("{}x{}", table.v.rows(), table.v.cols()),
        });
    }
    let phi = space.table();
    let pinv = phi.pseudo_inverse_full_column_rank()?;
    let w_v = pinv.transpose().matmul(&table.v)?.matmul(&pinv)?;
    let rebuilt = phi.transpose().matmul(&w_v)?.matmul(phi)?;
    let residual = rebuilt.max_abs_diff(&table.v);
    let tolerance = T::solve_tolerance();
    if residual.is_nan() || residual >= tolerance {
        return Err(Error::ResidualTooLarge {
            residual: residual.as_f64(),
            tolerance: tolerance.as_f64(),
        });
    }
    Ok(w_v)
}

/// `W_KQ = 0` (equal attention scores everywhere) and the solved `W_V`.
pub fn build_initial_state<T: Scalar>(
    space: Arc<TokenSpace<T>>,
    params: &PretrainParams,
    plan: &FactPlan,
) -> Result<ModelState<T>> {
    if space.num_subjects() != params.num_subjects
        || space.num_answers() != params.num_answers
        || space.dim() != params.dim
    {
        return Err(Error::ShapeMismatch {
            op: "build_initial_state",
            expected: format!(
                "space ({}, {}, {})",
                params.num_subjects, params.num_answers, params.dim
            ),
            found: format!(
                "({}, {}, {})",
                space.num_subjects(),
                space.num_answers(),
                space.dim()
            ),
        });
    }
    let table = build_value_table(params, plan)?;
    let w_v = solve_wv(&space, &table)?;
    let d = space.dim();
    ModelState::new(space, Matrix::zeros(d, d), w_v)
}

/// True iff the subject alone puts more than `threshold` mass on `a`.
pub fn memorization_check<T: Scalar>(state: &ModelState<T>, s: Token, a: Token, threshold: T) -> bool {
    state.subject_distribution(s)[a.0] > threshold
}

/// Everything derived from one parameter set and seed.
#[derive(Debug, Clone)]
pub struct Pretrained<T> {
    pub params: PretrainParams,
    pub plan: FactPlan,
    pub table: ValueTable<T>,
    pub state: ModelState<T>,
}

impl<T: Scalar> Pretrained<T> {
    pub fn build(params: PretrainParams, seed: u64) -> Result<Self> {
        params.validate()?;
        let space = Arc::new(TokenSpace::build(
            params.num_subjects,
            params.num_answers,
            params.dim,
        )?);
        let plan = FactPlan::random(&params, seed)?;
        let table = build_value_table(&params, &plan)?;
        let w_v = solve_wv(&space, &table)?;
        let d = space.dim();
        let state = ModelState::new(space, Matrix::zeros(d, d), w_v)?;
        Ok(Self {
            params,
            plan,
            table,
            state,
        })
    }

    pub fn space(&self) -> &TokenSpace<T> {
        self.state.space()
    }

    pub fn layout(&self) -> TokenLayout {
        self.space().layout()
    }

    /// `softmax(v(x))` restricted to answers and renormalized.
    pub fn answer_distribution(&self, x: Token) -> Vec<T> {
        let layout = self.layout();
        let v = self.state.value_logits(x);
        softmax(&v[layout.answer(0).0..=layout.answer(layout.num_answers - 1).0])
    }
}
