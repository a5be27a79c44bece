//! Python bindings: scenario runs, condition (#) and the divergent-drift offset.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use asymtori::decay::{check_sharp as sharp, DecayFn};
use asymtori::hamiltonian::TimeProfile;
use asymtori::report::{self, summary_json};
use asymtori::scenario::{run, FailureClass, Mode, RunError, Scenario};
use asymtori::verify::counterexample_divergence;

create_exception!(asymtori_py, InputError, PyValueError);
create_exception!(asymtori_py, NumericalError, PyRuntimeError);

fn raise(e: RunError) -> PyErr {
    match e.class {
        FailureClass::Input => InputError::new_err(e.to_string()),
        FailureClass::Numerical => NumericalError::new_err(e.to_string()),
    }
}

fn parse_mode(mode: &str) -> PyResult<Mode> {
    Ok(match mode {
        "check-decay" | "check_decay" => Mode::CheckDecay,
        "solve" => Mode::Solve,
        "verify" => Mode::Verify,
        "counterexample" => Mode::Counterexample,
        other => return Err(InputError::new_err(format!("unknown mode '{other}'"))),
    })
}

fn parse<T: serde::de::DeserializeOwned>(what: &str, text: &str) -> PyResult<T> {
    serde_json::from_str(text).map_err(|e| InputError::new_err(format!("{what}: {e}")))
}

/// Runs a scenario document and returns `summary.json` as a string.
///
/// With `out_dir` the full run directory (curves, plots, torus) is written as well.
#[pyfunction]
#[pyo3(signature = (scenario, mode = "verify", out_dir = None, seed = None))]
fn run_scenario(py: Python<'_>, scenario: &str, mode: &str, out_dir: Option<PathBuf>, seed: Option<u64>) -> PyResult<String> {
    let mode = parse_mode(mode)?;
    let mut sc = Scenario::from_json(scenario).map_err(raise)?;
    if let Some(seed) = seed {
        sc.seed = seed;
    }
    let out = py.detach(|| run(&sc, mode)).map_err(raise)?;
    if let Some(dir) = out_dir {
        report::write_run(&dir, &out).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    }
    Ok(summary_json(&out.summary))
}

/// `(holds, lambda_min, worst_t)` for two decay envelopes given as JSON records.
#[pyfunction]
#[pyo3(signature = (a, b, upsilon, grid_points = 256))]
fn check_sharp(a: &str, b: &str, upsilon: f64, grid_points: usize) -> PyResult<(bool, f64, f64)> {
    let a: DecayFn = parse("a", a)?;
    let b: DecayFn = parse("b", b)?;
    let r = sharp(&a, &b, upsilon, grid_points).map_err(|e| InputError::new_err(e.to_string()))?;
    Ok((r.holds, r.lambda_min, r.worst_t))
}

/// Lift offset of `q' = omega + phat(t)`: `(times, closed_form, integrated, verdict)`.
#[pyfunction]
#[pyo3(signature = (omega, phat, horizon, t0 = 0.0, points = 60, tol = 1e-12))]
fn drift_offset(omega: f64, phat: &str, horizon: f64, t0: f64, points: usize, tol: f64) -> PyResult<(Vec<f64>, Vec<f64>, Vec<f64>, String)> {
    let phat: TimeProfile = parse("phat", phat)?;
    let c = counterexample_divergence(omega, &phat, t0, horizon, points, tol).map_err(|e| InputError::new_err(e.to_string()))?;
    Ok((c.times, c.offset, c.integrated, c.verdict.to_string()))
}

#[pymodule]
fn asymtori_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("InputError", m.py().get_type::<InputError>())?;
    m.add("NumericalError", m.py().get_type::<NumericalError>())?;
    m.add_function(wrap_pyfunction!(run_scenario, m)?)?;
    m.add_function(wrap_pyfunction!(check_sharp, m)?)?;
    m.add_function(wrap_pyfunction!(drift_offset, m)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_parse() {
        assert_eq!(parse_mode("check-decay").unwrap(), Mode::CheckDecay);
        assert_eq!(parse_mode("verify").unwrap(), Mode::Verify);
        assert!(parse_mode("fly").is_err());
    }

    #[test]
    fn sharp_condition_through_json() {
        let exp = r#"{"kind": "exp", "rate": 1.0}"#;
        let (holds, lambda, _) = check_sharp(exp, exp, 0.0, 64).unwrap();
        assert!(holds);
        assert!((lambda - 1.0).abs() < 1e-9);
    }

    #[test]
    fn harmonic_drift_offset_is_logarithmic() {
        let (t, off, _, verdict) = drift_offset(0.5, r#"{"kind": "shifted_power", "shift": 1, "power": 1}"#, 1000.0, 0.0, 20, 1e-12).unwrap();
        for (t, o) in t.iter().zip(&off) {
            assert!((o - (1.0 + t).ln()).abs() < 1e-9);
        }
        assert_eq!(verdict, "no asymptotic torus: divergent drift");
    }
}
