use befunet::gradcheck::{check_inputs, relative_error, DEFAULT_EPS, DEFAULT_TOL};
use befunet::gradsuite::{run, MODULES};
use befunet::rng::{seeded, uniform};
use befunet::{Error, Tensor};

#[test]
fn dropped_gradient_path_is_caught() {
    let x: Tensor<f64> = uniform(&mut seeded(1), &[3, 4], 0.5, 1.5);
    // x · stop(x): the second factor enters as a constant, so backward
    // yields x where the true derivative is 2x.
    let report = check_inputs(&[x], DEFAULT_EPS, |t, v| {
        let c = t.tensor(v[0]);
        let k = t.input(&c);
        let y = t.mul(v[0], k)?;
        Ok(t.sum(y))
    })
    .unwrap();
    assert!(!report.passed(DEFAULT_TOL));
    assert!((report.max_rel_error - 0.5).abs() < 1e-6, "{report:?}");
}

#[test]
fn exact_gradient_passes() {
    let x: Tensor<f64> = uniform(&mut seeded(2), &[5], -1.0, 1.0);
    let report = check_inputs(&[x], DEFAULT_EPS, |t, v| {
        let y = t.mul(v[0], v[0])?;
        Ok(t.sum(y))
    })
    .unwrap();
    assert!(report.passed(DEFAULT_TOL), "{report:?}");
    assert_eq!(report.checked, 5);
}

#[test]
fn relative_error_floor_scales_with_function() {
    assert_eq!(relative_error(2.0, 1.0, 1.0), 0.5);
    assert!((relative_error(0.0, 1e-9, 1.0) - 1e-5).abs() < 1e-15);
    assert!((relative_error(0.0, 1e-9, 100.0) - 1e-7).abs() < 1e-17);
}

#[test]
fn unknown_module_is_rejected() {
    assert!(matches!(run("optimizer", 1e-5, 1), Err(Error::Parse { .. })));
    assert!(MODULES.contains(&"lcaf"));
}

#[test]
fn loss_module_suite_passes() {
    let results = run("losses", DEFAULT_EPS, 2).unwrap();
    assert!(!results.is_empty());
    for r in results {
        assert!(r.passed(DEFAULT_TOL), "{}/{}: {:?}", r.module, r.name, r.report);
    }
}
