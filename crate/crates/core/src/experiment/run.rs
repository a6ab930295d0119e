//! Named experiments: build the pretrained state and datasets from a config,
//! train, evaluate the experiment's asserted properties and write artifacts.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::Serialize;

use super::config::{EtaSetting, ExperimentConfig, ExperimentKind};
use super::svg::{line_charts, Panel, Series};
use super::trace_csv::write_trace;
use crate::dataset::{
    make_cf_augmentation, make_conflict_testset, make_training_mixture, perplexity_filter, verify_example, Dataset,
};
use crate::dynamics::{
    default_eta_grid, find_eta_star, gradient_projections, is_non_decreasing, peak_index, post_peak_decline, run_prop2_experiment,
    run_prop3_experiment, strict_decline_run, train, DynamicsTrace, TrainSpec, Trainable,
};
use crate::error::{Error, Result};
use crate::model::{Category, Example};
use crate::pretrain::Pretrained;
use crate::theory::{closed_form_a, closed_form_m, predict_t1_attention};

pub const EXIT_PASS: i32 = 0;
pub const EXIT_PROPERTY_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;

/// Tolerance for closed-form against measured comparisons.
const CLOSED_FORM_TOL: f64 = 1e-10;
/// Strict declines must exceed this per step.
const DECLINE_FLOOR: f64 = 1e-12;
/// Consecutive strict declines required after a peak.
const MIN_DECLINE_RUN: usize = 5;

pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Divergence { .. } => EXIT_DIVERGENCE,
        _ => EXIT_CONFIG,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub experiment: ExperimentKind,
    pub checks: Vec<Check>,
    pub metrics: BTreeMap<String, f64>,
    /// Rate used for training, if one was available.
    pub eta: Option<f64>,
    pub eta_searched: bool,
    pub trace: Option<DynamicsTrace<f64>>,
    /// Secondary runs written as `trace_<name>.csv`.
    pub extra_traces: Vec<(String, DynamicsTrace<f64>)>,
}

impl ExperimentResult {
    fn new(experiment: ExperimentKind) -> Self {
        Self {
            experiment,
            checks: Vec::new(),
            metrics: BTreeMap::new(),
            eta: None,
            eta_searched: false,
            trace: None,
            extra_traces: Vec::new(),
        }
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn exit_code(&self) -> i32 {
        if self.passed() {
            EXIT_PASS
        } else {
            EXIT_PROPERTY_FAILURE
        }
    }

    fn check(&mut self, name: &str, passed: bool, detail: impl Into<String>) {
        self.checks.push(Check::new(name, passed, detail));
    }

    fn metric(&mut self, name: &str, value: f64) {
        self.metrics.insert(name.to_string(), value);
    }
}

struct Setup {
    pre: Pretrained<f64>,
    dataset: Dataset,
    testset: Vec<Example>,
}

fn setup(cfg: &ExperimentConfig) -> Result<Setup> {
    cfg.validate()?;
    let pre = Pretrained::build(cfg.pretrain_params(), cfg.seed)?;
    let dataset = make_training_mixture(&pre, cfg.mixture_counts(), cfg.seed.wrapping_add(1))?;
    let testset = make_conflict_testset(&pre, &dataset, cfg.test_size, cfg.seed.wrapping_add(2))?;
    Ok(Setup {
        pre,
        dataset,
        testset,
    })
}

/// Fixed rate, or the grid search on `data`. Records the search as a check.
fn resolve_eta(cfg: &ExperimentConfig, s: &Setup, data: &[Example], res: &mut ExperimentResult) -> Result<Option<f64>> {
    let eta = match cfg.eta {
        EtaSetting::Fixed(eta) => Some(eta),
        EtaSetting::Auto => {
            res.eta_searched = true;
            let search = find_eta_star(&s.pre.state, data, &default_eta_grid())?;
            res.check(
                "eta* found in grid",
                search.eta_star.is_some(),
                match search.eta_star {
                    Some(e) => format!("eta* = {e}"),
                    None => format!("NOT_FOUND in {} grid points", search.grid_size),
                },
            );
            search.eta_star
        }
    };
    res.eta = eta;
    Ok(eta)
}

fn run_training(
    s: &Setup,
    data: &[Example],
    eta: f64,
    steps: usize,
    trainable: Trainable,
) -> Result<DynamicsTrace<f64>> {
    let spec = TrainSpec {
        eta,
        steps,
        trainable,
        dataset: data,
        testset: &s.testset,
    };
    Ok(train(&s.pre.state, &spec)?.1)
}

fn rise_then_fall(res: &mut ExperimentResult, name: &str, xs: &[f64]) {
    let peak = peak_index(xs).unwrap_or(0);
    let run = strict_decline_run(xs, peak, DECLINE_FLOOR);
    let interior = peak > 0 && peak + 1 < xs.len();
    res.metric(&format!("{name}_peak_step"), peak as f64);
    res.metric(&format!("{name}_decline_run"), run as f64);
    res.check(
        &format!("{name} rises then falls"),
        interior && run >= MIN_DECLINE_RUN,
        format!("peak at t={peak} of {}, {run} strict declines after it", xs.len() - 1),
    );
}

fn require(cond: bool, msg: &str) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Config(msg.into()))
    }
}

fn prop1(cfg: &ExperimentConfig, s: &Setup, res: &mut ExperimentResult) -> Result<()> {
    let data = &s.dataset.examples;
    res.metric("n_c_ge_n_cs", f64::from(u8::from(cfg.n_c >= cfg.n_cs)));
    let p0 = gradient_projections(&s.pre.state, data)?;
    res.metric("theta_c_t0", p0.theta_c);
    res.metric("theta_s_t0", p0.theta_s);
    res.check(
        "first phase signs at t=0",
        p0.first_phase(),
        format!("theta_C {:+e}, theta_S {:+e}", p0.theta_c, p0.theta_s),
    );
    let Some(eta) = resolve_eta(cfg, s, data, res)? else {
        return Ok(());
    };
    let trace = run_training(s, data, eta, cfg.steps, cfg.trainable)?;
    let p1 = trace.records[1].grad_proj;
    res.metric("theta_c_t1", p1.theta_c);
    res.metric("theta_s_t1", p1.theta_s);
    res.check(
        "second phase signs at t=1",
        p1.second_phase(),
        format!("theta_C {:+e}, theta_S {:+e}", p1.theta_c, p1.theta_s),
    );

    let r0 = &trace.records[0];
    if let (Some(&m_c), Some(&m_cs)) = (
        r0.m_numeric.get(&Category::Context),
        r0.m_numeric.get(&Category::ContextSubject),
    ) {
        let m = closed_form_m(&s.pre.params);
        res.metric("m_C_numeric", m_c);
        res.metric("m_CS_numeric", m_cs);
        res.metric("m_C_closed_form", m.m_c);
        res.metric("m_CS_closed_form", m.m_cs);
        res.check(
            "m_C matches closed form",
            (m_c - m.m_c).abs() < CLOSED_FORM_TOL,
            format!("{m_c} vs {}", m.m_c),
        );
        res.check(
            "m_CS matches closed form",
            (m_cs - m.m_cs).abs() < CLOSED_FORM_TOL,
            format!("{m_cs} vs {}", m.m_cs),
        );
        res.check(
            "m_C > 0 > m_CS and |m_C| > |m_CS|",
            m_c > 0.0 && m_cs < 0.0 && m_c.abs() > m_cs.abs(),
            format!("m_C {m_c}, m_CS {m_cs}"),
        );
    }
    let even = cfg.n_c == cfg.n_cs && cfg.n_c > 0 && cfg.n_s_seen + cfg.n_s_unseen == 0;
    if even && cfg.trainable == Trainable::KeyQuery {
        let n = data.len();
        let g = closed_form_a(&s.pre.params, n)?;
        res.metric("A1", g.a1);
        res.metric("A2", g.a2);
        let (pc, pcs) = predict_t1_attention(&s.pre.params, n, eta)?;
        let r1 = &trace.records[1];
        for (cat, want, label) in [
            (Category::Context, pc, "C"),
            (Category::ContextSubject, pcs, "C+S"),
        ] {
            let got = r1.sigma_c_by_category[&cat];
            res.check(
                &format!("t=1 sigma_c({label}) matches logistic prediction"),
                (got - want).abs() < CLOSED_FORM_TOL,
                format!("{got} vs {want}"),
            );
        }
    }
    res.trace = Some(trace);
    Ok(())
}

fn prop2(cfg: &ExperimentConfig, s: &Setup, res: &mut ExperimentResult) -> Result<()> {
    let taken: BTreeSet<_> = s
        .dataset
        .subjects()
        .into_iter()
        .chain(s.testset.iter().map(|e| e.subject))
        .collect();
    let points: Vec<Example> = s
        .pre
        .plan
        .memorized_subjects()
        .filter(|x| !taken.contains(x))
        .take(cfg.s_points)
        .map(|x| Example::subject_only(x, s.pre.plan.answer_of(x).expect("assigned"), Category::SubjectSeen))
        .collect();
    if points.len() < cfg.s_points {
        return Err(Error::InsufficientTokens {
            what: "free memorized subjects",
            needed: cfg.s_points,
            available: points.len(),
        });
    }
    for p in &points {
        verify_example(&s.pre, p)?;
    }
    let rep = run_prop2_experiment(&s.pre.state, &s.dataset.examples, &points)?;
    let measured = rep.new.theta_s - rep.old.theta_s;
    res.metric("theta_c_old", rep.old.theta_c);
    res.metric("theta_c_new", rep.new.theta_c);
    res.metric("theta_s_old", rep.old.theta_s);
    res.metric("theta_s_new", rep.new.theta_s);
    res.metric("s_contribution_formula", rep.s_contribution_formula);
    res.check(
        "theta_C projection unchanged",
        rep.theta_c_unchanged(1e-12),
        format!("change {:e}", rep.new.theta_c - rep.old.theta_c),
    );
    res.check(
        "theta_S projection strictly increases",
        rep.theta_s_increased(),
        format!("{} -> {}", rep.old.theta_s, rep.new.theta_s),
    );
    res.check(
        "S contribution matches its closed form",
        (measured - rep.s_contribution_formula).abs() < 1e-12,
        format!("{measured:e} vs {:e}", rep.s_contribution_formula),
    );
    let mut all = s.dataset.examples.clone();
    all.extend(points);
    if let Some(eta) = resolve_eta(cfg, s, &all, res)? {
        res.trace = Some(run_training(s, &all, eta, cfg.steps, cfg.trainable)?);
    }
    Ok(())
}

fn prop3(cfg: &ExperimentConfig, s: &Setup, res: &mut ExperimentResult) -> Result<()> {
    let data = &s.dataset.examples;
    let Some(eta) = resolve_eta(cfg, s, data, res)? else {
        return Ok(());
    };
    let deltas = run_prop3_experiment(&s.pre.state, data, eta)?;
    let min = deltas.iter().map(|d| d.delta()).fold(f64::INFINITY, f64::min);
    res.metric("min_subject_predictiveness_gain", min);
    res.check(
        "one value step raises softmax(v(s))_c for every C example",
        min > 0.0,
        format!("{} examples, smallest gain {min:e}", deltas.len()),
    );
    res.trace = Some(run_training(s, data, eta, cfg.steps, cfg.trainable)?);
    Ok(())
}

fn theorem1(cfg: &ExperimentConfig, s: &Setup, res: &mut ExperimentResult) -> Result<()> {
    require(!s.testset.is_empty(), "theorem1 needs test_size >= 1")?;
    require(cfg.steps >= 2, "theorem1 needs steps >= 2")?;
    let data = &s.dataset.examples;
    let Some(eta) = resolve_eta(cfg, s, data, res)? else {
        return Ok(());
    };
    let trace = run_training(s, data, eta, cfg.steps, cfg.trainable)?;
    let m = trace.conflict_metric();
    for (k, v) in m.iter().take(3).enumerate() {
        res.metric(&format!("M_C_{k}"), *v);
    }
    res.metric("M_C_final", *m.last().unwrap());
    res.check("M_C(1) > M_C(0)", m[1] > m[0], format!("{} vs {}", m[1], m[0]));
    res.check("M_C(1) > M_C(2)", m[1] > m[2], format!("{} vs {}", m[1], m[2]));
    res.trace = Some(trace);
    Ok(())
}

fn trajectory(cfg: &ExperimentConfig, s: &Setup, res: &mut ExperimentResult) -> Result<()> {
    require(!s.testset.is_empty(), "trajectory needs test_size >= 1")?;
    require(cfg.n_cs > 0, "trajectory needs n_cs >= 1")?;
    let data = &s.dataset.examples;
    let Some(eta) = resolve_eta(cfg, s, data, res)? else {
        return Ok(());
    };
    let trace = run_training(s, data, eta, cfg.steps, cfg.trainable)?;
    rise_then_fall(res, "sigma_c_CS", &trace.sigma_c(Category::ContextSubject));
    rise_then_fall(res, "M_C", &trace.conflict_metric());
    res.trace = Some(trace);
    Ok(())
}

fn filter(cfg: &ExperimentConfig, s: &Setup, res: &mut ExperimentResult) -> Result<()> {
    let keep = cfg.keep_fraction();
    let (kept, removed) = perplexity_filter(&s.pre.state, &s.dataset, keep)?;
    let agree = kept.of(Category::Context).count() + removed.of(Category::ContextSubject).count();
    res.metric("keep_fraction", keep);
    res.metric("kept", kept.len() as f64);
    res.metric("partition_agreement", agree as f64 / s.dataset.len() as f64);
    res.check(
        "filter recovers the C / C+S partition",
        agree == s.dataset.len(),
        format!("{agree}/{} examples agree", s.dataset.len()),
    );
    require(!kept.is_empty(), "filter kept no examples")?;
    let Some(eta) = resolve_eta(cfg, s, &s.dataset.examples, res)? else {
        return Ok(());
    };
    let trace = run_training(s, &kept.examples, eta, cfg.steps, cfg.trainable)?;
    let sigma = trace.sigma_c(Category::Context);
    res.metric("sigma_c_C_final", *sigma.last().unwrap());
    res.check(
        "sigma_c on the filtered set never decreases",
        kept.of(Category::Context).count() > 0 && is_non_decreasing(&sigma),
        format!("{} -> {}", sigma[0], sigma[sigma.len() - 1]),
    );
    res.trace = Some(trace);
    Ok(())
}

fn augment(cfg: &ExperimentConfig, s: &Setup, res: &mut ExperimentResult) -> Result<()> {
    require(!s.testset.is_empty(), "augment needs test_size >= 1")?;
    let k = cfg.augment_count();
    let aug = make_cf_augmentation(&s.pre, &s.dataset, &s.testset, k, cfg.seed.wrapping_add(3))?;
    let augmented = s.dataset.with_augmentation(&aug);
    res.metric("augment_count", k as f64);
    let Some(eta) = resolve_eta(cfg, s, &s.dataset.examples, res)? else {
        return Ok(());
    };
    let base = run_training(s, &s.dataset.examples, eta, cfg.steps, cfg.trainable)?;
    let with_aug = run_training(s, &augmented.examples, eta, cfg.steps, cfg.trainable)?;
    let d0 = post_peak_decline(&base.conflict_metric()).unwrap_or(f64::NAN);
    let d1 = post_peak_decline(&with_aug.conflict_metric()).unwrap_or(f64::NAN);
    res.metric("M_C_decline_baseline", d0);
    res.metric("M_C_decline_augmented", d1);
    res.check(
        "augmentation shrinks the post-peak M_C decline",
        d1 < d0,
        format!("{d1:e} with {k} counterfactuals vs {d0:e} without"),
    );
    res.trace = Some(with_aug);
    res.extra_traces.push(("baseline".into(), base));
    Ok(())
}

fn qk_only(cfg: &ExperimentConfig, s: &Setup, res: &mut ExperimentResult) -> Result<()> {
    require(cfg.n_c > 0, "qk-only needs n_c >= 1")?;
    let data = &s.dataset.examples;
    let Some(eta) = resolve_eta(cfg, s, data, res)? else {
        return Ok(());
    };
    let kq = run_training(s, data, eta, cfg.steps, Trainable::KeyQuery)?;
    let joint = run_training(s, data, eta, cfg.steps, Trainable::Both)?;
    let first = &kq.records[0].subject_predictiveness;
    let frozen = kq.records.iter().all(|r| r.subject_predictiveness == *first);
    res.check(
        "kq-only leaves subject predictiveness bit-identical",
        frozen,
        format!("{} C examples over {} steps", first.len(), cfg.steps),
    );
    let (b, a) = (&joint.records[0].subject_predictiveness, &joint.records[1].subject_predictiveness);
    let min_gain = b.iter().zip(a).map(|(b, a)| a - b).fold(f64::INFINITY, f64::min);
    res.metric("joint_min_gain_step1", min_gain);
    res.check(
        "kq+v raises subject predictiveness after step 1",
        min_gain > 0.0,
        format!("smallest gain {min_gain:e}"),
    );
    res.trace = Some(kq);
    res.extra_traces.push(("joint".into(), joint));
    Ok(())
}

/// Runs the configured experiment in memory.
pub fn execute(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    let s = setup(cfg)?;
    let mut res = ExperimentResult::new(cfg.experiment);
    match cfg.experiment {
        ExperimentKind::Prop1 => prop1(cfg, &s, &mut res)?,
        ExperimentKind::Prop2 => prop2(cfg, &s, &mut res)?,
        ExperimentKind::Prop3 => prop3(cfg, &s, &mut res)?,
        ExperimentKind::Theorem1 => theorem1(cfg, &s, &mut res)?,
        ExperimentKind::Trajectory => trajectory(cfg, &s, &mut res)?,
        ExperimentKind::Filter => filter(cfg, &s, &mut res)?,
        ExperimentKind::Augment => augment(cfg, &s, &mut res)?,
        ExperimentKind::QkOnly => qk_only(cfg, &s, &mut res)?,
    }
    if let Some(t) = res.trace.take() {
        let last = t.records.last().expect("non-empty trace");
        res.metric("loss_final", last.loss_total);
        if let Some(m) = last.conflict_metric {
            res.metric("M_C_final", m);
            if let Some(d) = post_peak_decline(&t.conflict_metric()) {
                res.metric("M_C_post_peak_decline", d);
            }
        }
        res.trace = Some(t);
    }
    Ok(res)
}

#[derive(Serialize)]
struct Summary<'a> {
    experiment: &'a str,
    passed: bool,
    exit_code: i32,
    eta: Option<f64>,
    eta_star: Option<f64>,
    eta_searched: bool,
    checks: &'a [Check],
    metrics: &'a BTreeMap<String, f64>,
    config: &'a ExperimentConfig,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub result: ExperimentResult,
    pub exit_code: i32,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn plots(res: &ExperimentResult, trace: &DynamicsTrace<f64>) -> String {
    let c = trace.sigma_c(Category::Context);
    let cs = trace.sigma_c(Category::ContextSubject);
    let m = trace.conflict_metric();
    let loss = trace.losses();
    let mut panels = vec![Panel {
        title: "mean context attention",
        y_label: "sigma_c",
        series: vec![Series { name: "C", values: &c }, Series { name: "C+S", values: &cs }],
    }];
    if m.iter().any(|x| x.is_finite()) {
        panels.push(Panel {
            title: "conflict metric",
            y_label: "M_C",
            series: vec![Series { name: res.experiment.as_str(), values: &m }],
        });
    }
    panels.push(Panel {
        title: "training loss",
        y_label: "loss",
        series: vec![Series { name: "total", values: &loss }],
    });
    line_charts(&panels)
}

/// Runs the experiment and writes `trace.csv`, `summary.json` and optionally
/// `plots.svg` into `out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunOutcome> {
    let result = execute(cfg)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    if let Some(trace) = &result.trace {
        let mut buf = Vec::new();
        write_trace(trace, &mut buf).map_err(|e| Error::io(out_dir, e))?;
        write_file(&out_dir.join("trace.csv"), &buf)?;
        if cfg.plots {
            write_file(&out_dir.join("plots.svg"), plots(&result, trace).as_bytes())?;
        }
    }
    for (name, trace) in &result.extra_traces {
        let mut buf = Vec::new();
        write_trace(trace, &mut buf).map_err(|e| Error::io(out_dir, e))?;
        write_file(&out_dir.join(format!("trace_{name}.csv")), &buf)?;
    }
    let exit_code = result.exit_code();
    let summary = Summary {
        experiment: cfg.experiment.as_str(),
        passed: result.passed(),
        exit_code,
        eta: result.eta,
        eta_star: result.eta.filter(|_| result.eta_searched),
        eta_searched: result.eta_searched,
        checks: &result.checks,
        metrics: &result.metrics,
        config: cfg,
    };
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_file(&out_dir.join("summary.json"), json.as_bytes())?;
    Ok(RunOutcome { result, exit_code })
}
