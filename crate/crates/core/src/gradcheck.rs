//! Central finite-difference verification of tape gradients.
//!
//! The checked objective is `sum(f(inputs))`, or `sum(f(inputs) ⊙ R)` for a
//! fixed random cotangent `R` when [`GradCheck::cotangent_seed`] is set (a
//! plain sum has identically zero gradient for row-normalised outputs such
//! as softmax). Errors are measured per coordinate as
//! `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub step: f64,
    pub floor: f64,
    pub cotangent_seed: Option<u64>,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-3,
            cotangent_seed: None,
        }
    }
}

impl GradCheck {
    pub fn weighted(seed: u64) -> Self {
        Self {
            cotangent_seed: Some(seed),
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub worst_input: usize,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

impl GradReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

fn objective<F>(f: &F, tape: &Tape, vars: &[Var], cfg: &GradCheck) -> Result<Var>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let out = f(tape, vars)?;
    let out = match cfg.cotangent_seed {
        Some(seed) => {
            let mut rng = SeededRng::new(seed ^ 0x9e37_79b9_7f4a_7c15);
            let r = tape.constant(Tensor::randn(tape.shape(out), 1.0, &mut rng));
            tape.mul(out, r)?
        }
        None => out,
    };
    tape.sum(out)
}

fn evaluate<F>(f: &F, inputs: &[Tensor], cfg: &GradCheck) -> Result<f64>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let loss = objective(f, &tape, &vars, cfg)?;
    Ok(tape.value(loss).item())
}

/// Compares tape gradients of `f` with respect to every input against
/// central differences.
pub fn check_gradients<F>(f: F, inputs: &[Tensor], cfg: &GradCheck) -> Result<GradReport>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    if cfg.step <= 0.0 {
        return Err(Error::invalid("gradient check step must be positive"));
    }
    let first = evaluate(&f, inputs, cfg)?;
    let second = evaluate(&f, inputs, cfg)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::invalid(format!(
            "gradient check: function is not deterministic ({first} vs {second})"
        )));
    }

    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = objective(&f, &tape, &vars, cfg)?;
    let grads = tape.backward(loss)?;

    let mut report = GradReport {
        max_rel_err: 0.0,
        worst_input: 0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]);
        for k in 0..input.numel() {
            let mut perturbed = |delta: f64| -> Result<f64> {
                let mut data = input.to_vec();
                data[k] += delta;
                work[i] = Tensor::new(input.shape().clone(), data)?;
                evaluate(&f, &work, cfg)
            };
            let plus = perturbed(cfg.step)?;
            let minus = perturbed(-cfg.step)?;
            work[i] = input.clone();
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = analytic.data()[k];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
            report.coordinates += 1;
            if err > report.max_rel_err || report.coordinates == 1 {
                report.max_rel_err = err;
                report.worst_input = i;
                report.worst_index = k;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Single-input form: checks `sum(f(at))` against central differences.
pub fn finite_diff_check<F>(f: F, at: &Tensor, step: f64, tol: f64) -> Result<(bool, GradReport)>
where
    F: Fn(&Tape, Var) -> Result<Var>,
{
    let cfg = GradCheck {
        step,
        ..GradCheck::default()
    };
    let report = check_gradients(|t, v| f(t, v[0]), std::slice::from_ref(at), &cfg)?;
    Ok((report.passed(tol), report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use std::cell::Cell;

    #[test]
    fn identity_has_zero_error() {
        let mut rng = SeededRng::new(4);
        let x = Tensor::randn(Shape::matrix(3, 3).unwrap(), 1.0, &mut rng);
        let (ok, report) = finite_diff_check(|_, v| Ok(v), &x, 1e-5, 1e-9).unwrap();
        assert!(ok);
        assert!(report.max_rel_err < 1e-9, "{report:?}");
    }

    #[test]
    fn softmax_passes() {
        let mut rng = SeededRng::new(5);
        let x = Tensor::randn(Shape::matrix(4, 5).unwrap(), 1.0, &mut rng);
        let (ok, report) = finite_diff_check(|t, v| t.softmax_rows(v), &x, 1e-5, 1e-6).unwrap();
        assert!(ok, "{report:?}");
    }

    #[test]
    fn detects_wrong_gradient() {
        let x = Tensor::from_rows(&[vec![0.3, -0.7]]).unwrap();
        // Forward is x·2 but the recorded rule claims gradient 1.
        let report = check_gradients(
            |t, v| {
                let val = t.value(v[0]).scale(2.0)?;
                Ok(t.record(val, &[v[0]], |g| Ok(vec![Some(g.clone())])))
            },
            &[x],
            &GradCheck::default(),
        )
        .unwrap();
        assert!(report.max_rel_err > 0.4);
    }

    #[test]
    fn detects_nondeterminism() {
        let calls = Cell::new(0.0);
        let x = Tensor::from_rows(&[vec![1.0]]).unwrap();
        let res = check_gradients(
            |t, v| {
                calls.set(calls.get() + 1.0);
                t.scale(v[0], calls.get())
            },
            &[x],
            &GradCheck::default(),
        );
        assert!(res.is_err());
    }
}
