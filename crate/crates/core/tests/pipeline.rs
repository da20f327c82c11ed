//! Run configuration, parameter draws and report assembly.

use std::sync::OnceLock;

use theta_ring::harness::{build, verify, Built, RunConfig, IDENTITIES};
use theta_ring::opcalc::operators_from_json;
use theta_ring::Error;

fn built() -> &'static (RunConfig, Built) {
    static B: OnceLock<(RunConfig, Built)> = OnceLock::new();
    B.get_or_init(|| {
        let cfg = RunConfig::default();
        let b = build(&cfg).unwrap();
        (cfg, b)
    })
}

#[test]
fn partial_config_fills_defaults() {
    let cfg = RunConfig::from_json(r#"{"seed": 5, "build": {"alpha_tol": 1e-9}}"#).unwrap();
    assert_eq!(cfg.seed, 5);
    assert_eq!(cfg.samples, RunConfig::default().samples);
    assert_eq!(cfg.build.alpha_tol, 1e-9);
    assert_eq!(cfg.build.order_cap, RunConfig::default().build.order_cap);
}

#[test]
fn bad_configs_are_input_errors() {
    for text in [
        r#"{"sedd": 1}"#,
        r#"{"radius": 0}"#,
        r#"{"tolerances": {"no_such_identity": 1e-3}}"#,
        r#"{"omega": [[[0, -1], [0, 0]], [[0, 0], [0, 1]]]}"#,
        r#"{"omega": [[[0, 1], [0, 0.3]], [[0, 0.2], [0, 1]]]}"#,
        "not json",
    ] {
        let err = RunConfig::from_json(text).unwrap_err();
        assert!(!err.is_numerical(), "{text}: {err}");
    }
}

#[test]
fn tolerance_overrides_apply_in_order() {
    let mut cfg = RunConfig::default();
    assert_eq!(cfg.tolerance_for("eigen_relations"), 1e-7);
    cfg.tolerance = Some(0.5);
    assert_eq!(cfg.tolerance_for("eigen_relations"), 0.5);
    cfg.tolerances.insert("eigen_relations".into(), 1e-3);
    assert_eq!(cfg.tolerance_for("eigen_relations"), 1e-3);
    assert_eq!(cfg.tolerance_for("module_dimension"), 0.5);
}

#[test]
fn zero_tolerance_fails_every_identity_checked() {
    let (cfg, b) = built();
    let strict = RunConfig {
        tolerance: Some(0.0),
        ..cfg.clone()
    };
    for name in [
        "eigen_relations",
        "second_x_derivative_identity",
        "quadratic_theta_expansion",
    ] {
        let report = verify(&strict, b, Some(name)).unwrap();
        assert!(!report.all_pass);
        assert!(!report.identities[0].pass);
    }
}

#[test]
fn unknown_identity_is_rejected() {
    let (cfg, b) = built();
    assert!(matches!(
        verify(cfg, b, Some("nope")),
        Err(Error::InvalidInput(_))
    ));
}

#[test]
fn single_identity_reports_are_reproducible() {
    let (cfg, b) = built();
    let a = verify(cfg, b, Some("x_z_derivative_identity")).unwrap();
    let c = verify(cfg, b, Some("x_z_derivative_identity")).unwrap();
    assert_eq!(a.to_text(), c.to_text());
    assert_eq!(a.identities.len(), 1);
    assert!(a.identities[0].pass);
}

#[test]
fn ring_artifact_round_trips() {
    let (_, b) = built();
    let art = b.artifact();
    let ops = operators_from_json(&art["ring"]).unwrap();
    let names: Vec<&str> = ops.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(
        names,
        ["L1", "L11", "L12", "L22", "L111", "L112", "L122", "L222", "Z1", "Z2"]
    );
    let again: Vec<(String, &_)> = ops.iter().map(|(n, o)| (n.clone(), o)).collect();
    assert_eq!(theta_ring::opcalc::operators_to_json(&again), art["ring"]);
}

#[test]
fn fixed_parameters_are_used_verbatim() {
    let (cfg, b) = built();
    let s = &b.draw.spectral.params;
    let fixed = RunConfig {
        c: Some(s.c),
        c_prime: Some(s.c_prime),
        c_second: Some(b.draw.second.params.c_prime),
        ..cfg.clone()
    };
    let again = build(&fixed).unwrap();
    assert_eq!(again.draw.spectral.params.c, s.c);
    assert_eq!(again.artifact_text(), b.artifact_text());
}

#[test]
fn identity_list_is_complete() {
    assert_eq!(IDENTITIES.len(), 13);
    for name in IDENTITIES {
        assert!(RunConfig::default().tolerance_for(name) > 0.0);
    }
}
