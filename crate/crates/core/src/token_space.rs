//! Token universe and embedding table.
//!
//! Subjects, answers (which double as contexts) and a single relation token.
//! Every subject embedding is `√½·s̃ + √½·θ_S`, every answer embedding is
//! `√½·c̃ + √½·θ_C`, and all component vectors are distinct standard-basis
//! directions, so the orthogonality constraints hold exactly.
//!
//! Token ids: subjects `0..K_S`, answers `K_S..K_S+K_A`, relation `K_S+K_A`.
//! Basis layout: `s̃_i = e_i`, `c̃_j = e_{K_S+j}`, `θ_S = e_{K_S+K_A}`,
//! `θ_C = e_{K_S+K_A+1}`, `φ(r) = e_{K_S+K_A+2}`; any further dimensions stay unused.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::{dot, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Token(pub usize);

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Subject,
    Answer,
    Relation,
}

impl TokenKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TokenKind::Subject => "subject",
            TokenKind::Answer => "answer",
            TokenKind::Relation => "relation",
        }
    }
}

/// Token id arithmetic, independent of any embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenLayout {
    pub num_subjects: usize,
    pub num_answers: usize,
}

impl TokenLayout {
    pub fn new(num_subjects: usize, num_answers: usize) -> Self {
        Self {
            num_subjects,
            num_answers,
        }
    }

    /// Total vocabulary size `K`.
    pub fn num_tokens(&self) -> usize {
        self.num_subjects + self.num_answers + 1
    }

    /// Smallest embedding dimension that fits every component direction.
    pub fn min_dim(&self) -> usize {
        self.num_subjects + self.num_answers + 3
    }

    pub fn subject(&self, i: usize) -> Token {
        assert!(i < self.num_subjects, "subject index {i} out of range");
        Token(i)
    }

    pub fn answer(&self, j: usize) -> Token {
        assert!(j < self.num_answers, "answer index {j} out of range");
        Token(self.num_subjects + j)
    }

    pub fn relation(&self) -> Token {
        Token(self.num_subjects + self.num_answers)
    }

    pub fn kind(&self, t: Token) -> Option<TokenKind> {
        if t.0 < self.num_subjects {
            Some(TokenKind::Subject)
        } else if t.0 < self.num_subjects + self.num_answers {
            Some(TokenKind::Answer)
        } else if t.0 == self.num_subjects + self.num_answers {
            Some(TokenKind::Relation)
        } else {
            None
        }
    }

    pub fn is_subject(&self, t: Token) -> bool {
        self.kind(t) == Some(TokenKind::Subject)
    }

    pub fn is_answer(&self, t: Token) -> bool {
        self.kind(t) == Some(TokenKind::Answer)
    }

    pub fn subjects(&self) -> impl Iterator<Item = Token> {
        (0..self.num_subjects).map(Token)
    }

    pub fn answers(&self) -> impl Iterator<Item = Token> {
        let base = self.num_subjects;
        (0..self.num_answers).map(move |j| Token(base + j))
    }

    pub fn check(&self, t: Token, kind: TokenKind, role: &'static str) -> Result<()> {
        if self.kind(t) == Some(kind) {
            Ok(())
        } else {
            Err(Error::InvalidToken { token: t.0, role })
        }
    }
}

/// Immutable token universe with its embedding table `φ` (also the frozen head `W_H`).
#[derive(Debug, Clone)]
pub struct TokenSpace<T> {
    layout: TokenLayout,
    dim: usize,
    embeddings: Vec<Vec<T>>,
    /// `d × K`, column `t` is `φ(t)`.
    table: Matrix<T>,
    theta_s: Vec<T>,
    theta_c: Vec<T>,
}

impl<T: Scalar> TokenSpace<T> {
    pub fn build(num_subjects: usize, num_answers: usize, dim: usize) -> Result<Self> {
        let layout = TokenLayout::new(num_subjects, num_answers);
        let required = layout.min_dim();
        if dim < required {
            return Err(Error::DimensionTooSmall { dim, required });
        }
        let basis = |k: usize| {
            let mut v = vec![T::zero(); dim];
            v[k] = T::one();
            v
        };
        let half = T::lit(0.5).sqrt();
        let theta_s = basis(num_subjects + num_answers);
        let theta_c = basis(num_subjects + num_answers + 1);
        let mix = |component: Vec<T>, shared: &[T]| -> Vec<T> {
            component
                .iter()
                .zip(shared)
                .map(|(&a, &b)| half * a + half * b)
                .collect()
        };

        let mut embeddings = Vec::with_capacity(layout.num_tokens());
        for i in 0..num_subjects {
            embeddings.push(mix(basis(i), &theta_s));
        }
        for j in 0..num_answers {
            embeddings.push(mix(basis(num_subjects + j), &theta_c));
        }
        embeddings.push(basis(num_subjects + num_answers + 2));

        let table = Matrix::from_columns(&embeddings);
        Ok(Self {
            layout,
            dim,
            embeddings,
            table,
            theta_s,
            theta_c,
        })
    }

    pub fn layout(&self) -> TokenLayout {
        self.layout
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_tokens(&self) -> usize {
        self.layout.num_tokens()
    }

    pub fn num_subjects(&self) -> usize {
        self.layout.num_subjects
    }

    pub fn num_answers(&self) -> usize {
        self.layout.num_answers
    }

    pub fn relation(&self) -> Token {
        self.layout.relation()
    }

    pub fn embedding(&self, t: Token) -> &[T] {
        &self.embeddings[t.0]
    }

    /// The `d × K` embedding matrix `Φ`, which is also the frozen head `W_H`.
    pub fn table(&self) -> &Matrix<T> {
        &self.table
    }

    pub fn theta_s(&self) -> &[T] {
        &self.theta_s
    }

    pub fn theta_c(&self) -> &[T] {
        &self.theta_c
    }

    /// Subject-specific component `s̃`.
    pub fn subject_component(&self, s: Token) -> Vec<T> {
        let mut v = vec![T::zero(); self.dim];
        v[s.0] = T::one();
        v
    }

    /// Answer-specific component `c̃`.
    pub fn answer_component(&self, c: Token) -> Vec<T> {
        let mut v = vec![T::zero(); self.dim];
        v[c.0] = T::one();
        v
    }

    /// `W_Hᵀ x`, i.e. `(φ(k)·x)_k` over the whole vocabulary.
    pub fn head_logits(&self, x: &[T]) -> Vec<T> {
        self.embeddings.iter().map(|e| dot(e, x)).collect()
    }

    /// `W_H y = Σ_k y_k φ(k)`.
    pub fn head_combine(&self, y: &[T]) -> Vec<T> {
        self.table.matvec(y)
    }

    /// Writes `token_id,kind,v0,...,v{d-1}` rows.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        write!(out, "token_id,kind")?;
        for k in 0..self.dim {
            write!(out, ",v{k}")?;
        }
        writeln!(out)?;
        for (id, e) in self.embeddings.iter().enumerate() {
            let kind = self.layout.kind(Token(id)).expect("token in range");
            write!(out, "{id},{}", kind.as_str())?;
            for x in e {
                write!(out, ",{x}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// The bilinear form `uᵀ M v`.
pub fn project_bilinear<T: Scalar>(m: &Matrix<T>, u: &[T], v: &[T]) -> Result<T> {
    if m.rows() != u.len() || m.cols() != v.len() {
        return Err(Error::ShapeMismatch {
            op: "project_bilinear",
            expected: format!("{}x{} matrix", u.len(), v.len()),
            found: format!("{}x{}", m.rows(), m.cols()),
        });
    }
    Ok(dot(u, &m.matvec(v)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn space(ks: usize, ka: usize, extra: usize) -> TokenSpace<f64> {
        TokenSpace::build(ks, ka, ks + ka + 3 + extra).unwrap()
    }

    #[test]
    fn small_space_dot_products() {
        let sp = space(4, 8, 0);
        assert_eq!(sp.num_tokens(), 13);
        let l = sp.layout();
        for i in 0..4 {
            for j in 0..4 {
                let d = dot(sp.embedding(l.subject(i)), sp.embedding(l.subject(j)));
                let want = if i == j { 1.0 } else { 0.5 };
                assert!((d - want).abs() <= 1e-12, "s{i}·s{j} = {d}");
            }
            for j in 0..8 {
                let d = dot(sp.embedding(l.subject(i)), sp.embedding(l.answer(j)));
                assert!(d.abs() <= 1e-12);
            }
        }
        for i in 0..8 {
            for j in 0..8 {
                let d = dot(sp.embedding(l.answer(i)), sp.embedding(l.answer(j)));
                let want = if i == j { 1.0 } else { 0.5 };
                assert!((d - want).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn distinct_subjects_share_half() {
        let sp = space(5, 6, 2);
        let l = sp.layout();
        assert!((dot(sp.embedding(l.subject(0)), sp.embedding(l.subject(1))) - 0.5).abs() <= 1e-15);
    }

    #[test]
    fn dimension_too_small() {
        let err = TokenSpace::<f64>::build(32, 64, 98).unwrap_err();
        assert!(matches!(
            err,
            Error::DimensionTooSmall {
                dim: 98,
                required: 99
            }
        ));
        assert!(TokenSpace::<f64>::build(32, 64, 99).is_ok());
    }

    #[test]
    fn token_ids_follow_layout() {
        let l = TokenLayout::new(3, 5);
        assert_eq!(l.subject(2), Token(2));
        assert_eq!(l.answer(0), Token(3));
        assert_eq!(l.relation(), Token(8));
        assert_eq!(l.kind(Token(9)), None);
    }

    #[test]
    fn bilinear_examples() {
        let eye = Matrix::<f64>::identity(3);
        let e1 = vec![1.0, 0.0, 0.0];
        assert_eq!(project_bilinear(&eye, &e1, &e1).unwrap(), 1.0);
        let zero = Matrix::<f64>::zeros(3, 3);
        assert_eq!(project_bilinear(&zero, &[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap(), 0.0);
        assert!(project_bilinear(&zero, &[1.0, 2.0], &[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn bilinear_rank_one_matches_dense_product() {
        let a = [1.0_f64, -2.0, 0.5];
        let b = [0.25, 3.0, -1.0];
        let u = [2.0, 1.0, -1.0];
        let v = [0.5, 0.5, 4.0];
        let m = Matrix::outer(&a, &b);
        let expected = dot(&u, &a) * dot(&b, &v);
        // Independent route: explicit double sum over entries.
        let mut dense = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                dense += u[i] * a[i] * b[j] * v[j];
            }
        }
        let got = project_bilinear(&m, &u, &v).unwrap();
        assert!((got - expected).abs() < 1e-14);
        assert!((got - dense).abs() < 1e-14);
    }

    #[test]
    fn csv_dump_has_one_row_per_token() {
        let sp = space(2, 3, 0);
        let mut buf = Vec::new();
        sp.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + sp.num_tokens());
        assert!(text.lines().nth(6).unwrap().starts_with("5,relation"));
    }

    proptest! {
        #[test]
        fn orthogonality_and_norms(ks in 1usize..12, ka in 1usize..16, extra in 0usize..5) {
            let sp = space(ks, ka, extra);
            let l = sp.layout();
            let r = sp.embedding(l.relation()).to_vec();
            prop_assert!((dot(sp.theta_s(), sp.theta_c())).abs() <= 1e-12);
            prop_assert!((dot(sp.theta_s(), sp.theta_s()) - 1.0).abs() <= 1e-12);
            prop_assert!((dot(sp.theta_c(), sp.theta_c()) - 1.0).abs() <= 1e-12);
            for t in 0..sp.num_tokens() {
                let e = sp.embedding(Token(t));
                prop_assert!((dot(e, e) - 1.0).abs() <= 1e-12);
            }
            for s in l.subjects() {
                let st = sp.subject_component(s);
                prop_assert!(dot(sp.theta_c(), sp.embedding(s)).abs() <= 1e-12);
                prop_assert!(dot(sp.theta_c(), &st).abs() <= 1e-12);
                prop_assert!(dot(&r, sp.embedding(s)).abs() <= 1e-12);
                for s2 in l.subjects().filter(|&x| x != s) {
                    prop_assert!(dot(&st, &sp.subject_component(s2)).abs() <= 1e-12);
                }
                for c in l.answers() {
                    prop_assert!(dot(&st, &sp.answer_component(c)).abs() <= 1e-12);
                }
            }
            for c in l.answers() {
                let ct = sp.answer_component(c);
                prop_assert!(dot(sp.theta_s(), sp.embedding(c)).abs() <= 1e-12);
                prop_assert!(dot(sp.theta_s(), &ct).abs() <= 1e-12);
                prop_assert!(dot(&r, sp.embedding(c)).abs() <= 1e-12);
                for c2 in l.answers().filter(|&x| x != c) {
                    prop_assert!(dot(&ct, &sp.answer_component(c2)).abs() <= 1e-12);
                }
            }
        }

        #[test]
        fn construction_is_deterministic(ks in 1usize..8, ka in 1usize..8) {
            let a = space(ks, ka, 1);
            let b = space(ks, ka, 1);
            prop_assert_eq!(a.table().as_slice(), b.table().as_slice());
        }
    }
}
