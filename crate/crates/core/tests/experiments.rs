use std::fs;

use inversion_core::experiment::{
    execute, run_experiment, sweep, verify, verify_pretrained, EtaSetting, ExperimentConfig, ExperimentKind,
    EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_PASS,
};
use inversion_core::{Error, Pretrain};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config(kind: ExperimentKind) -> ExperimentConfig {
    ExperimentConfig {
        experiment: kind,
        steps: 20,
        ..ExperimentConfig::default()
    }
}

#[test]
fn every_experiment_passes_at_defaults() {
    for kind in ExperimentKind::ALL {
        let res = execute(&config(kind)).unwrap();
        let failed: Vec<_> = res.checks.iter().filter(|c| !c.passed).collect();
        assert!(failed.is_empty(), "{kind}: {failed:?}");
        assert!(!res.checks.is_empty(), "{kind} asserted nothing");
        assert!(res.trace.is_some(), "{kind} produced no trace");
    }
}

#[test]
fn artifacts_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_experiment(&config(ExperimentKind::QkOnly), dir.path()).unwrap();
    assert_eq!(out.exit_code, EXIT_PASS);
    for f in ["trace.csv", "trace_joint.csv", "summary.json", "plots.svg"] {
        assert!(dir.path().join(f).is_file(), "missing {f}");
    }
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["passed"], true);
    assert_eq!(summary["eta_star"], 40.96);
    assert_eq!(summary["config"]["experiment"], "qk-only");
    let trace = fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 22);
}

#[test]
fn plots_can_be_disabled() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        plots: false,
        ..config(ExperimentKind::Theorem1)
    };
    run_experiment(&cfg, dir.path()).unwrap();
    assert!(!dir.path().join("plots.svg").exists());
}

#[test]
fn failed_property_sets_exit_code_one() {
    // A tiny fixed rate barely moves attention, so no decline follows the peak.
    let cfg = ExperimentConfig {
        eta: EtaSetting::Fixed(1e-6),
        steps: 10,
        ..config(ExperimentKind::Trajectory)
    };
    let dir = tempfile::tempdir().unwrap();
    let out = run_experiment(&cfg, dir.path()).unwrap();
    assert_eq!(out.exit_code, 1);
    assert!(!out.result.passed());
}

#[test]
fn structural_problems_are_config_errors() {
    let too_few_steps = ExperimentConfig {
        steps: 1,
        ..config(ExperimentKind::Theorem1)
    };
    let err = execute(&too_few_steps).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    let bad_params = ExperimentConfig {
        delta_m: 0.15,
        ..config(ExperimentKind::Prop1)
    };
    let err = execute(&bad_params).unwrap_err();
    assert!(err.to_string().contains("delta_m > 2*delta_c"), "{err}");
    assert_eq!(inversion_core::experiment::exit_code_for(&err), EXIT_CONFIG);
}

#[test]
fn divergence_maps_to_exit_three() {
    let err = Error::Divergence { step: 3, loss: f64::NAN };
    assert_eq!(inversion_core::experiment::exit_code_for(&err), EXIT_DIVERGENCE);
}

#[test]
fn verify_passes_clean_state() {
    let report = verify(&ExperimentConfig::default()).unwrap();
    assert!(report.passed(), "{}", report.to_table());
    assert!(report.rows.len() >= 15);
}

#[test]
fn verify_flags_perturbed_values() {
    let cfg = ExperimentConfig::default();
    let mut pre = Pretrain::build(cfg.pretrain_params(), cfg.seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let d = pre.state.w_v.rows();
    for i in 0..d {
        for j in 0..d {
            pre.state.w_v[(i, j)] += rng.gen_range(-1e-3..1e-3);
        }
    }
    let report = verify_pretrained(&cfg, &pre).unwrap();
    for name in [
        "value table round trip",
        "context self-probability equals delta_c",
        "memorized probability equals delta_m",
        "v0 diagonal matches closed form",
        "m_C matches closed form",
        "m_CS matches closed form",
        "C-example loss matches closed form",
        "training mixture satisfies its category levels",
    ] {
        let row = report.row(name).unwrap();
        assert!(!row.passed, "{name} should fail: {}", row.detail);
    }
    assert!(report.row("embedding norms").unwrap().passed);
}

#[test]
fn sweep_writes_one_directory_per_point_and_an_aggregate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        experiment: ExperimentKind::Prop1,
        steps: 3,
        sweep_param: Some("n_cs".into()),
        sweep_values: vec![8.0, 32.0, 40.0],
        ..ExperimentConfig::default()
    };
    let rows = sweep(&cfg, dir.path()).unwrap();
    assert_eq!(rows.len(), 3);
    for r in &rows {
        assert!(r.dir.join("summary.json").is_file());
    }
    assert!(dir.path().join("n_cs=8").is_dir());
    let agg = fs::read_to_string(dir.path().join("aggregate.csv")).unwrap();
    assert_eq!(agg.lines().count(), 4);
    assert!(agg.lines().next().unwrap().starts_with("n_cs,exit_code,passed,eta"));
    // The n_C >= n_CS precondition is reported, not enforced.
    assert_eq!(rows[2].metrics["n_c_ge_n_cs"], 0.0);
}

#[test]
fn sweep_records_bad_points_and_rejects_empty_grids() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        experiment: ExperimentKind::Prop1,
        steps: 2,
        sweep_param: Some("delta_m".into()),
        sweep_values: vec![0.5, 0.1],
        ..ExperimentConfig::default()
    };
    let rows = sweep(&cfg, dir.path()).unwrap();
    assert!(rows[0].passed);
    assert_eq!(rows[1].exit_code, EXIT_CONFIG);
    assert!(rows[1].error.as_deref().unwrap().contains("delta_m"));

    let empty = ExperimentConfig {
        sweep_values: vec![],
        ..cfg
    };
    assert!(matches!(sweep(&empty, dir.path()), Err(Error::Config(_))));
}

#[test]
fn augmentation_ratio_sweep_endpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        experiment: ExperimentKind::Augment,
        sweep_param: Some("augment_ratio".into()),
        sweep_values: vec![0.0, 0.1, 0.25, 0.5],
        ..ExperimentConfig::default()
    };
    let rows = sweep(&cfg, dir.path()).unwrap();
    let decline: Vec<f64> = rows.iter().map(|r| r.metrics["M_C_decline_augmented"]).collect();
    assert!(decline[3] < decline[0], "{decline:?}");
    // Ratio zero adds nothing, so the run is recorded as a failed property rather than aborting.
    assert_eq!(rows[0].exit_code, 1);
    assert!(rows[1..].iter().all(|r| r.passed));
}

#[test]
fn first_phase_is_recorded_even_without_eta_star() {
    let res = execute(&ExperimentConfig {
        n_cs: 8,
        steps: 2,
        ..config(ExperimentKind::Prop1)
    })
    .unwrap();
    assert!(res.metrics.contains_key("theta_c_t0"));
    assert!(res.checks.iter().any(|c| c.name == "first phase signs at t=0"));
}
