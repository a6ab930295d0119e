//! Self-check of a pretrained state: embeddings, the solved value table,
//! closed forms at initialization, and gradients against finite differences.
//!
//! Read-only: running it twice on the same state gives the same report.

use std::fmt::Write as _;

use super::config::{EtaSetting, ExperimentConfig};
use super::run::Check;
use crate::dataset::make_training_mixture;
use crate::dynamics::{default_eta_grid, find_eta_star, gradient_projections, train, TrainSpec, Trainable};
use crate::error::Result;
use crate::model::{finite_diff_entries, grad_wkq_batch, grad_wv, Category, Evaluator, Example, Reduction, WeightKind};
use crate::pretrain::{build_initial_state, Pretrained};
use crate::scalar::softmax;
use crate::theory::{closed_form_a, closed_form_m, closed_form_v0, predict_t1_attention};

const EXACT_TOL: f64 = 1e-12;
const CLOSED_FORM_TOL: f64 = 1e-10;
const FD_TOL: f64 = 1e-6;
const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub rows: Vec<Check>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }

    pub fn row(&self, name: &str) -> Option<&Check> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(0);
        let mut out = String::new();
        for r in &self.rows {
            let tag = if r.passed { "PASS" } else { "FAIL" };
            writeln!(out, "{tag}  {:width$}  {}", r.name, r.detail).unwrap();
        }
        out
    }
}

struct Rows(Vec<Check>);

impl Rows {
    fn within(&mut self, name: &str, err: f64, tol: f64) {
        self.0.push(Check::new(name, err <= tol, format!("max error {err:.3e} (tol {tol:e})")));
    }
}

/// Builds the pretrained state described by `cfg` and checks it.
pub fn verify(cfg: &ExperimentConfig) -> Result<VerifyReport> {
    cfg.validate()?;
    let pre = Pretrained::build(cfg.pretrain_params(), cfg.seed)?;
    verify_pretrained(cfg, &pre)
}

fn max_of(xs: impl IntoIterator<Item = f64>) -> f64 {
    xs.into_iter().fold(0.0, f64::max)
}

/// Checks an existing state against the closed forms implied by `cfg`.
pub fn verify_pretrained(cfg: &ExperimentConfig, pre: &Pretrained<f64>) -> Result<VerifyReport> {
    let params = &pre.params;
    let state = &pre.state;
    let space = state.space();
    let layout = space.layout();
    let tokens: Vec<_> = (0..layout.num_tokens()).map(crate::token_space::Token).collect();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut rows = Rows(Vec::new());

    rows.within(
        "embedding norms",
        max_of(
            tokens
                .iter()
                .map(|&t| space.embedding(t))
                .chain([space.theta_s(), space.theta_c()])
                .map(|e| (dot(e, e) - 1.0).abs()),
        ),
        EXACT_TOL,
    );
    let kinds: Vec<_> = tokens.iter().map(|&t| layout.kind(t)).collect();
    let mut gram_err: f64 = 0.0;
    for (i, &a) in tokens.iter().enumerate() {
        for &b in &tokens[i..] {
            // Two subjects or two answers share a theta direction.
            let want = if a == b {
                1.0
            } else if kinds[a.0] == kinds[b.0] {
                0.5
            } else {
                0.0
            };
            gram_err = gram_err.max((dot(space.embedding(a), space.embedding(b)) - want).abs());
        }
    }
    rows.within("embedding inner products", gram_err, EXACT_TOL);
    rows.within(
        "theta directions orthogonal",
        dot(space.theta_s(), space.theta_c()).abs(),
        EXACT_TOL,
    );

    let cache = state.value_cache();
    let table = &pre.table.v;
    let mut round_trip: f64 = 0.0;
    for &y in &tokens {
        for (k, &v) in cache.value(y).iter().enumerate() {
            round_trip = round_trip.max((v - table[(k, y.0)]).abs());
        }
    }
    rows.within("value table round trip", round_trip, 1e-9);

    rows.within(
        "context self-probability equals delta_c",
        max_of(layout.answers().map(|c| (softmax(cache.value(c))[c.0] - params.delta_c).abs())),
        1e-9,
    );
    rows.within(
        "memorized probability equals delta_m",
        max_of(pre.plan.memorized_subjects().map(|s| {
            let a = pre.plan.answer_of(s).expect("assigned");
            (softmax(cache.value(s))[a.0] - params.delta_m).abs()
        })),
        1e-9,
    );
    let worst_unseen = pre
        .plan
        .unmemorized_subjects()
        .map(|s| {
            let a = pre.plan.answer_of(s).expect("assigned");
            softmax(cache.value(s))[a.0]
        })
        .fold(0.0, f64::max);
    rows.0.push(Check::new(
        "unmemorized mass below delta_s",
        worst_unseen < params.delta_s,
        format!("largest {worst_unseen:.4e} vs {}", params.delta_s),
    ));

    let v0 = closed_form_v0(params);
    rows.within(
        "v0 diagonal matches closed form",
        max_of(layout.answers().map(|c| (cache.value(c)[c.0] - v0.v0_cc).abs())),
        CLOSED_FORM_TOL,
    );
    rows.within(
        "v0 memorized entry matches closed form",
        max_of(pre.plan.memorized_subjects().map(|s| {
            let a = pre.plan.answer_of(s).expect("assigned");
            (cache.value(s)[a.0] - v0.v0_cs_memorized).abs()
        })),
        CLOSED_FORM_TOL,
    );

    // The mixture is drawn from the fact plan; category checks run against the
    // ideal state so a damaged one still gets a full report.
    let reference = Pretrained {
        state: build_initial_state(state.space_arc().clone(), params, &pre.plan)?,
        ..pre.clone()
    };
    let dataset = make_training_mixture(&reference, cfg.mixture_counts(), cfg.seed.wrapping_add(1))?;
    let categories_hold = make_training_mixture(pre, cfg.mixture_counts(), cfg.seed.wrapping_add(1));
    rows.0.push(Check::new(
        "training mixture satisfies its category levels",
        categories_hold.is_ok(),
        match &categories_hold {
            Ok(d) => format!("{} examples", d.len()),
            Err(e) => e.to_string(),
        },
    ));
    let data = &dataset.examples;
    let ev = Evaluator::with_cache(state, cache.clone());
    let m = closed_form_m(params);
    for (cat, want, name) in [
        (Category::Context, m.m_c, "m_C matches closed form"),
        (Category::ContextSubject, m.m_cs, "m_CS matches closed form"),
    ] {
        let err = max_of(
            dataset
                .of(cat)
                .map(|e| (ev.eval(e).context_subject_margin().expect("three-token") - want).abs()),
        );
        rows.within(name, err, CLOSED_FORM_TOL);
    }
    // At t=0 every C example has logits ½v_cc + ½o_c on its label, o_c on
    // other answers, o_r at r and 0 on subjects.
    let b = params.background_mass();
    let z = 0.5 * v0.v0_cc + 0.5 * params.o_c;
    let loss_c = (z.exp() + b).ln() - z;
    rows.within(
        "C-example loss matches closed form",
        max_of(dataset.of(Category::Context).map(|e| (ev.eval(e).loss - loss_c).abs())),
        CLOSED_FORM_TOL,
    );
    let proj = gradient_projections(state, data)?;
    rows.within(
        "theta_S = -theta_C on three-token examples",
        if cfg.n_s_seen + cfg.n_s_unseen == 0 {
            (proj.theta_s + proj.theta_c).abs()
        } else {
            0.0
        },
        EXACT_TOL,
    );
    let invariants = closed_form_a(params, data.len().max(2));
    rows.0.push(Check::new(
        "margin signs and ordering",
        invariants.is_ok() && m.m_c > 0.0 && m.m_cs < 0.0 && m.m_c > m.m_cs.abs(),
        match &invariants {
            Ok(a) => format!("m_C {:.4e}, m_CS {:.4e}, A1 {:.4e}, A2 {:.4e}", m.m_c, m.m_cs, a.a1, a.a2),
            Err(e) => e.to_string(),
        },
    ));

    let d = space.dim();
    let picked: Vec<usize> = (0..d).step_by(11).chain([d - 1]).collect();
    let entries: Vec<(usize, usize)> = picked.iter().flat_map(|&i| picked.iter().map(move |&j| (i, j))).collect();
    for (which, analytic, name) in [
        (WeightKind::KeyQuery, grad_wkq_batch(state, data, Reduction::Mean)?, "W_KQ gradient vs finite differences"),
        (WeightKind::Value, grad_wv(state, data)?, "W_V gradient vs finite differences"),
    ] {
        let numeric = finite_diff_entries(state, data, which, FD_STEP, &entries)?;
        let a: Vec<f64> = entries.iter().map(|&(i, j)| analytic[(i, j)]).collect();
        let scale = max_of(a.iter().chain(&numeric).map(|x| x.abs()));
        let err = if scale == 0.0 {
            0.0
        } else {
            max_of(a.iter().zip(&numeric).map(|(x, y)| (x - y).abs())) / scale
        };
        rows.within(name, err, FD_TOL);
    }

    let even = cfg.n_c == cfg.n_cs && cfg.n_c > 0 && cfg.n_s_seen + cfg.n_s_unseen == 0;
    if even {
        let eta = match cfg.eta {
            EtaSetting::Fixed(e) => Some(e),
            EtaSetting::Auto => find_eta_star(state, data, &default_eta_grid())?.eta_star,
        };
        let check = match eta {
            None => Check::new("t=1 attention matches logistic prediction", false, "no eta* in grid"),
            Some(eta) => {
                let spec = TrainSpec {
                    eta,
                    steps: 1,
                    trainable: Trainable::KeyQuery,
                    dataset: data,
                    testset: &[] as &[Example],
                };
                let (_, trace) = train(state, &spec)?;
                let (pc, pcs) = predict_t1_attention(params, data.len(), eta)?;
                let r1 = &trace.records[1].sigma_c_by_category;
                let err = (r1[&Category::Context] - pc).abs().max((r1[&Category::ContextSubject] - pcs).abs());
                Check::new(
                    "t=1 attention matches logistic prediction",
                    err <= CLOSED_FORM_TOL,
                    format!("eta {eta}, max error {err:.3e}"),
                )
            }
        };
        rows.0.push(check);
    }
    Ok(VerifyReport { rows: rows.0 })
}
