//! Full-batch gradient descent with per-step diagnostics.
//!
//! Diagnostics at step `t` describe the state *before* the `t`-th update, so a
//! run of `T` steps yields `T + 1` records and record 0 is the pretrained state.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{grad_wv, Category, Evaluator, Example, ModelState};
use crate::scalar::{dot, softmax, Scalar};
use crate::token_space::TokenSpace;

/// Smallest magnitude a sign condition must clear to count.
pub const SIGN_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Trainable {
    #[serde(rename = "kq")]
    KeyQuery,
    #[serde(rename = "v")]
    Value,
    #[serde(rename = "kq+v")]
    Both,
}

impl Trainable {
    pub fn trains_kq(self) -> bool {
        matches!(self, Trainable::KeyQuery | Trainable::Both)
    }

    pub fn trains_v(self) -> bool {
        matches!(self, Trainable::Value | Trainable::Both)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Trainable::KeyQuery => "kq",
            Trainable::Value => "v",
            Trainable::Both => "kq+v",
        }
    }
}

impl fmt::Display for Trainable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Trainable {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kq" => Ok(Trainable::KeyQuery),
            "v" => Ok(Trainable::Value),
            "kq+v" | "v+kq" => Ok(Trainable::Both),
            _ => Err(Error::Config(format!(
                "trainable must be kq, v or kq+v, got {s:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrainSpec<'a, T> {
    pub eta: T,
    pub steps: usize,
    pub trainable: Trainable,
    pub dataset: &'a [Example],
    pub testset: &'a [Example],
}

impl<T: Scalar> TrainSpec<'_, T> {
    /// A zero rate is allowed and leaves the state untouched.
    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= T::zero() && self.eta.is_finite()) {
            return Err(Error::InvalidSpec(format!("eta must be finite and >= 0, got {}", self.eta)));
        }
        if self.steps == 0 {
            return Err(Error::InvalidSpec("steps must be at least 1".into()));
        }
        if self.dataset.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(())
    }
}

/// `θ_Cᵀ(−∇_{W_KQ}L)φ(r)` and `θ_Sᵀ(−∇_{W_KQ}L)φ(r)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Projections<T> {
    pub theta_c: T,
    pub theta_s: T,
}

impl<T: Scalar> Projections<T> {
    pub fn first_phase(&self) -> bool {
        self.theta_c.as_f64() > SIGN_FLOOR && self.theta_s.as_f64() < -SIGN_FLOOR
    }

    pub fn second_phase(&self) -> bool {
        self.theta_c.as_f64() < -SIGN_FLOOR && self.theta_s.as_f64() > SIGN_FLOOR
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord<T> {
    pub step: usize,
    /// Mean loss over the whole training set.
    pub loss_total: T,
    pub loss_by_category: BTreeMap<Category, T>,
    /// Mean loss over both subject-only categories, if any are present.
    pub loss_s: Option<T>,
    /// Mean context attention per three-token category.
    pub sigma_c_by_category: BTreeMap<Category, T>,
    /// Projections of the mean-loss gradient.
    pub grad_proj: Projections<T>,
    pub conflict_metric: Option<T>,
    /// Mean `⟨v(c) − v(s), e_c − softmax(z)⟩` per three-token category; only
    /// recorded while `W_V` is frozen.
    pub m_numeric: BTreeMap<Category, T>,
    /// `softmax(v(s))_c` for each C example, in dataset order.
    pub subject_predictiveness: Vec<T>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DynamicsTrace<T> {
    pub records: Vec<StepRecord<T>>,
}

impl<T: Scalar> DynamicsTrace<T> {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn sigma_c(&self, category: Category) -> Vec<T> {
        self.records
            .iter()
            .map(|r| r.sigma_c_by_category.get(&category).copied().unwrap_or_else(T::nan))
            .collect()
    }

    pub fn conflict_metric(&self) -> Vec<T> {
        self.records
            .iter()
            .map(|r| r.conflict_metric.unwrap_or_else(T::nan))
            .collect()
    }

    pub fn losses(&self) -> Vec<T> {
        self.records.iter().map(|r| r.loss_total).collect()
    }
}

struct Accumulated<T> {
    record: StepRecord<T>,
    /// Mean left factor `u` of `−∇_{W_KQ}L = u φ(r)ᵀ`.
    kq_direction: Vec<T>,
    v_grad: Option<Matrix<T>>,
}

fn mean<T: Scalar>(sum: T, n: usize) -> T {
    sum / T::lit(n as f64)
}

/// Projections of `u φ(r)ᵀ`.
fn project<T: Scalar>(space: &TokenSpace<T>, u: &[T]) -> Projections<T> {
    let r = space.embedding(space.relation());
    let rr = dot(r, r);
    Projections {
        theta_c: dot(space.theta_c(), u) * rr,
        theta_s: dot(space.theta_s(), u) * rr,
    }
}

fn diagnose<T: Scalar>(
    ev: &Evaluator<'_, T>,
    space: &TokenSpace<T>,
    step: usize,
    spec: &TrainSpec<'_, T>,
    want_v_grad: bool,
) -> Accumulated<T> {
    let d = space.dim();
    let n = spec.dataset.len();
    let inv_n = T::one() / T::lit(n as f64);
    let mut loss_total = T::zero();
    let mut cat_loss: BTreeMap<Category, (T, usize)> = BTreeMap::new();
    let mut cat_sigma: BTreeMap<Category, (T, usize)> = BTreeMap::new();
    let mut cat_m: BTreeMap<Category, (T, usize)> = BTreeMap::new();
    let mut s_loss = (T::zero(), 0);
    let mut u = vec![T::zero(); d];
    let mut v_grad = want_v_grad.then(|| Matrix::zeros(d, d));
    let mut subject_predictiveness = Vec::new();

    for ex in spec.dataset {
        let e = ev.eval(ex);
        loss_total += e.loss;
        let entry = cat_loss.entry(ex.category).or_insert((T::zero(), 0));
        entry.0 += e.loss;
        entry.1 += 1;
        if matches!(ex.category, Category::SubjectSeen | Category::SubjectUnseen) {
            s_loss.0 += e.loss;
            s_loss.1 += 1;
        }
        if let Some(sc) = e.attention.context {
            let entry = cat_sigma.entry(ex.category).or_insert((T::zero(), 0));
            entry.0 += sc;
            entry.1 += 1;
        }
        if !spec.trainable.trains_v() {
            if let Some(m) = e.context_subject_margin() {
                let entry = cat_m.entry(ex.category).or_insert((T::zero(), 0));
                entry.0 += m;
                entry.1 += 1;
            }
        }
        if ex.category == Category::Context {
            let q = softmax(ev.values().value(ex.subject));
            subject_predictiveness.push(q[ex.label.0]);
        }
        for (a, b) in u.iter_mut().zip(ev.kq_direction(&e)) {
            *a += b;
        }
        if let Some(acc) = v_grad.as_mut() {
            ev.accumulate_v_grad(ex, &e, inv_n, acc);
        }
    }
    u.iter_mut().for_each(|x| *x *= inv_n);

    let conflict_metric = (!spec.testset.is_empty()).then(|| conflict_metric_with(ev, spec.testset));
    let reduce = |m: BTreeMap<Category, (T, usize)>| -> BTreeMap<Category, T> {
        m.into_iter().map(|(k, (s, c))| (k, mean(s, c))).collect()
    };
    Accumulated {
        record: StepRecord {
            step,
            loss_total: loss_total * inv_n,
            loss_by_category: reduce(cat_loss),
            loss_s: (s_loss.1 > 0).then(|| mean(s_loss.0, s_loss.1)),
            sigma_c_by_category: reduce(cat_sigma),
            grad_proj: project(space, &u),
            conflict_metric,
            m_numeric: reduce(cat_m),
            subject_predictiveness,
        },
        kq_direction: u,
        v_grad,
    }
}

fn conflict_metric_with<T: Scalar>(ev: &Evaluator<'_, T>, testset: &[Example]) -> T {
    let total: T = testset
        .iter()
        .map(|ex| {
            let p = ev.eval(ex).probs;
            let c = ex.context.expect("conflict examples carry a context");
            p[c.0] / (p[c.0] + p[ex.label.0])
        })
        .sum();
    mean(total, testset.len())
}

/// Runs `spec.steps` full-batch descent steps from `state`.
pub fn train<T: Scalar>(state: &ModelState<T>, spec: &TrainSpec<'_, T>) -> Result<(ModelState<T>, DynamicsTrace<T>)> {
    spec.validate()?;
    for ex in spec.dataset.iter().chain(spec.testset) {
        ex.validate(state.space())?;
    }
    if spec.testset.iter().any(|e| e.context.is_none()) {
        return Err(Error::InvalidSpec("conflict examples need a context".into()));
    }
    let space = state.space_arc().clone();
    let r = space.embedding(space.relation()).to_vec();
    let mut state = state.clone();
    let mut trace = DynamicsTrace {
        records: Vec::with_capacity(spec.steps + 1),
    };
    let mut cache = None;
    for t in 0..=spec.steps {
        let ev = match cache.take() {
            Some(c) => Evaluator::with_cache(&state, c),
            None => Evaluator::new(&state),
        };
        let acc = diagnose(&ev, &space, t, spec, t < spec.steps && spec.trainable.trains_v());
        let loss = acc.record.loss_total;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                step: t,
                loss: loss.as_f64(),
            });
        }
        trace.records.push(acc.record);
        if t == spec.steps {
            break;
        }
        let values = ev.into_cache();
        if spec.trainable.trains_kq() {
            state.w_kq.add_outer(spec.eta, &acc.kq_direction, &r);
        }
        if let Some(g) = acc.v_grad {
            state.w_v.add_scaled(spec.eta, &g);
        } else {
            cache = Some(values);
        }
        if !state.is_finite() {
            return Err(Error::Divergence {
                step: t + 1,
                loss: f64::NAN,
            });
        }
        state.timestep += 1;
    }
    Ok((state, trace))
}

/// Projections of the mean-loss `W_KQ` gradient at `state`.
pub fn gradient_projections<T: Scalar>(state: &ModelState<T>, dataset: &[Example]) -> Result<Projections<T>> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let ev = Evaluator::new(state);
    Ok(project(state.space(), &mean_kq_direction(&ev, dataset)))
}

fn summed_kq_direction<T: Scalar>(ev: &Evaluator<'_, T>, dataset: &[Example]) -> Vec<T> {
    let mut u: Option<Vec<T>> = None;
    for ex in dataset {
        let ui = ev.kq_direction(&ev.eval(ex));
        match u.as_mut() {
            Some(acc) => acc.iter_mut().zip(ui).for_each(|(a, b)| *a += b),
            None => u = Some(ui),
        }
    }
    u.unwrap_or_default()
}

fn mean_kq_direction<T: Scalar>(ev: &Evaluator<'_, T>, dataset: &[Example]) -> Vec<T> {
    let mut u = summed_kq_direction(ev, dataset);
    let n = T::lit(dataset.len() as f64);
    u.iter_mut().for_each(|x| *x /= n);
    u
}

/// `0.01 · 2^k` for every `k` keeping the rate at or below `1e4`.
pub fn default_eta_grid() -> Vec<f64> {
    (0..)
        .map(|k| 0.01 * 2f64.powi(k))
        .take_while(|&eta| eta <= 1e4)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EtaSearch<T> {
    /// `None` when no grid rate produces the second-phase signs.
    pub eta_star: Option<T>,
    pub at_t0: Projections<T>,
    pub at_star: Option<Projections<T>>,
    pub grid_size: usize,
}

/// Smallest grid rate whose single `W_KQ` step flips both projection signs.
pub fn find_eta_star<T: Scalar>(state: &ModelState<T>, dataset: &[Example], grid: &[T]) -> Result<EtaSearch<T>> {
    if grid.is_empty() {
        return Err(Error::InvalidSpec("eta grid is empty".into()));
    }
    let ascending = grid.windows(2).all(|w| w[0] < w[1]);
    if !ascending || grid[0].is_nan() || grid[0] <= T::zero() {
        return Err(Error::InvalidSpec("eta grid must be positive and strictly ascending".into()));
    }
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let ev0 = Evaluator::new(state);
    let u0 = mean_kq_direction(&ev0, dataset);
    let at_t0 = project(state.space(), &u0);
    let values = ev0.into_cache();
    let r = state.space().embedding(state.space().relation()).to_vec();
    for &eta in grid {
        let mut probe = state.clone();
        probe.w_kq.add_outer(eta, &u0, &r);
        let ev = Evaluator::with_cache(&probe, values.clone());
        let p = project(probe.space(), &mean_kq_direction(&ev, dataset));
        if p.second_phase() {
            return Ok(EtaSearch {
                eta_star: Some(eta),
                at_t0,
                at_star: Some(p),
                grid_size: grid.len(),
            });
        }
    }
    Ok(EtaSearch {
        eta_star: None,
        at_t0,
        at_star: None,
        grid_size: grid.len(),
    })
}

/// Mean of `p_c / (p_c + p_a)` over conflict examples.
pub fn eval_conflict_metric<T: Scalar>(state: &ModelState<T>, testset: &[Example]) -> Result<T> {
    if testset.is_empty() {
        return Err(Error::EmptyTestset);
    }
    if testset.iter().any(|e| e.context.is_none()) {
        return Err(Error::InvalidSpec("conflict examples need a context".into()));
    }
    Ok(conflict_metric_with(&Evaluator::new(state), testset))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prop2Report<T> {
    /// Projections of the summed gradient on the base set.
    pub old: Projections<T>,
    /// Same with the subject-only points added.
    pub new: Projections<T>,
    /// `Σ (1/√2)σ_sσ_r(v(a,s) − v(a,r))(1 − p_a)` over the added points.
    pub s_contribution_formula: T,
}

impl<T: Scalar> Prop2Report<T> {
    pub fn theta_c_unchanged(&self, tol: f64) -> bool {
        (self.new.theta_c - self.old.theta_c).abs().as_f64() <= tol
    }

    pub fn theta_s_increased(&self) -> bool {
        self.new.theta_s > self.old.theta_s
    }
}

/// Compares the summed `W_KQ` gradient with and without extra `[s, r]` points.
pub fn run_prop2_experiment<T: Scalar>(
    state: &ModelState<T>,
    base: &[Example],
    s_points: &[Example],
) -> Result<Prop2Report<T>> {
    if base.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if s_points.iter().any(|e| e.context.is_some()) {
        return Err(Error::InvalidSpec("subject points must be two-token inputs".into()));
    }
    let ev = Evaluator::new(state);
    let space = state.space();
    let old = project(space, &summed_kq_direction(&ev, base));
    let mut all = base.to_vec();
    all.extend_from_slice(s_points);
    let new = project(space, &summed_kq_direction(&ev, &all));
    let half = T::lit(0.5).sqrt();
    let r = space.relation();
    let s_contribution_formula = s_points
        .iter()
        .map(|ex| {
            let e = ev.eval(ex);
            let a = ex.label.0;
            let gap = ev.values().value(ex.subject)[a] - ev.values().value(r)[a];
            half * e.attention.subject * e.attention.relation * gap * (T::one() - e.probs[a])
        })
        .sum();
    Ok(Prop2Report {
        old,
        new,
        s_contribution_formula,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Prop3Delta<T> {
    pub subject: usize,
    pub context: usize,
    pub before: T,
    pub after: T,
}

impl<T: Scalar> Prop3Delta<T> {
    pub fn delta(&self) -> T {
        self.after - self.before
    }
}

/// One `W_V` step (attention held at the current `W_KQ`); reports
/// `softmax(W_HᵀW_Vφ(s))_c` before and after for every C example.
pub fn run_prop3_experiment<T: Scalar>(
    state: &ModelState<T>,
    dataset: &[Example],
    eta: T,
) -> Result<Vec<Prop3Delta<T>>> {
    if !dataset.iter().any(|e| e.category == Category::Context) {
        return Err(Error::InvalidSpec("subject-predictiveness experiment needs C examples".into()));
    }
    let g = grad_wv(state, dataset)?;
    let mut next = state.clone();
    next.w_v.add_scaled(eta, &g);
    Ok(dataset
        .iter()
        .filter(|e| e.category == Category::Context)
        .map(|e| Prop3Delta {
            subject: e.subject.0,
            context: e.label.0,
            before: state.subject_distribution(e.subject)[e.label.0],
            after: next.subject_distribution(e.subject)[e.label.0],
        })
        .collect())
}

/// Index of the first maximum.
pub fn peak_index<T: Scalar>(xs: &[T]) -> Option<usize> {
    let mut best: Option<(usize, T)> = None;
    for (i, &x) in xs.iter().enumerate() {
        if best.is_none_or(|(_, b)| x > b) {
            best = Some((i, x));
        }
    }
    best.map(|(i, _)| i)
}

/// Number of consecutive steps after `from` that each drop by more than `floor`.
pub fn strict_decline_run<T: Scalar>(xs: &[T], from: usize, floor: f64) -> usize {
    xs.get(from..)
        .unwrap_or(&[])
        .windows(2)
        .take_while(|w| (w[0] - w[1]).as_f64() > floor)
        .count()
}

/// Peak value minus final value.
pub fn post_peak_decline<T: Scalar>(xs: &[T]) -> Option<T> {
    let i = peak_index(xs)?;
    Some(xs[i] - *xs.last()?)
}

pub fn is_non_decreasing<T: Scalar>(xs: &[T]) -> bool {
    xs.windows(2).all(|w| w[1] >= w[0])
}
