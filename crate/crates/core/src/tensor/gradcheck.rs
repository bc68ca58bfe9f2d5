//! Central-difference verification of analytic gradients.

use super::{OpKind, Tape, Tensor, Var};
use crate::error::{Error, Result};

const MAX_ELEMENTS: usize = 10_000;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    /// Coordinates closer than this to a kink are skipped (at least `2 * epsilon`).
    pub kink_tolerance: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            epsilon: 1e-5,
            kink_tolerance: 1e-6,
        }
    }
}

/// Deterministic projection weights in [-1, 1] used to reduce an output to a scalar.
fn projection(n: usize) -> Tensor {
    let mut state: u64 = 0x9E37_79B9_7F4A_7C15;
    let data = (0..n)
        .map(|_| {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
        .collect();
    Tensor::from_parts(vec![n], data)
}

fn validate(inputs: &[Tensor], epsilon: f64) -> Result<()> {
    if !(epsilon > 0.0 && epsilon <= 1e-3) {
        return Err(Error::invalid(
            "grad_check",
            format!("epsilon {epsilon} outside (0, 1e-3]"),
        ));
    }
    let total: usize = inputs.iter().map(Tensor::len).sum();
    if total > MAX_ELEMENTS {
        return Err(Error::invalid(
            "grad_check",
            format!("{total} input elements exceed the limit of {MAX_ELEMENTS}"),
        ));
    }
    Ok(())
}

/// Max relative error between the analytic gradient of `op` and central differences.
///
/// Non-scalar outputs are reduced with fixed pseudo-random weights so every
/// output coordinate contributes. The error is
/// `|analytic - numeric| / max(1, |analytic|)`, maximized over every input coordinate.
pub fn grad_check(op: &OpKind, inputs: &[Tensor], epsilon: f64) -> Result<f64> {
    let opts = GradCheckOptions {
        epsilon,
        ..GradCheckOptions::default()
    };
    let kinked = op.has_kink_at_zero();
    check(inputs, opts, kinked, |tape, vars| {
        tape.apply(op.clone(), vars)
    })
}

/// Like [`grad_check`] for an arbitrary composition recorded by `f`.
pub fn grad_check_fn<F>(inputs: &[Tensor], opts: GradCheckOptions, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check(inputs, opts, false, f)
}

fn check<F>(inputs: &[Tensor], opts: GradCheckOptions, kinked: bool, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    validate(inputs, opts.epsilon)?;

    let reduce = |tape: &mut Tape, vars: &[Var]| -> Result<Var> {
        let out = f(tape, vars)?;
        let n = tape.value(out).len();
        if n == 1 {
            return Ok(out);
        }
        let flat = tape.reshape(out, &[n])?;
        let w = tape.constant(projection(n));
        let weighted = tape.mul(flat, w)?;
        tape.sum(weighted)
    };

    let mut tape = Tape::new().with_finite_checks(true);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = reduce(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let evaluate = |perturbed: &[Tensor]| -> Result<f64> {
        let mut t = Tape::inference().with_finite_checks(true);
        let vs: Vec<Var> = perturbed.iter().map(|x| t.constant(x.clone())).collect();
        let out = reduce(&mut t, &vs)?;
        Ok(t.value(out).item())
    };

    let skip_within = opts.kink_tolerance.max(2.0 * opts.epsilon);
    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("every input is a parameter leaf");
        for i in 0..inputs[k].len() {
            let x0 = inputs[k].data()[i];
            if kinked && x0.abs() < skip_within {
                continue;
            }
            work[k].data_mut()[i] = x0 + opts.epsilon;
            let plus = evaluate(&work)?;
            work[k].data_mut()[i] = x0 - opts.epsilon;
            let minus = evaluate(&work)?;
            work[k].data_mut()[i] = x0;
            let numeric = (plus - minus) / (2.0 * opts.epsilon);
            let a = analytic.data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
            checked += 1;
        }
    }
    if checked == 0 && inputs.iter().any(|t| !t.is_empty()) {
        return Err(Error::NonDifferentiable(
            "every coordinate sits at a non-differentiable point".into(),
        ));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_scale_is_exact() {
        let x = Tensor::vector(&[0.3, -1.2, 4.0]);
        assert_eq!(grad_check(&OpKind::Scale(0.0), &[x], 1e-5).unwrap(), 0.0);
    }

    #[test]
    fn rejects_bad_epsilon_and_oversized_input() {
        let x = Tensor::vector(&[1.0]);
        assert!(grad_check(&OpKind::Sigmoid, &[x.clone()], 0.0).is_err());
        assert!(grad_check(&OpKind::Sigmoid, &[x], 1e-2).is_err());
        let big = Tensor::zeros(&[10_001]);
        assert!(grad_check(&OpKind::Sigmoid, &[big], 1e-5).is_err());
    }

    #[test]
    fn relu_at_the_kink_is_skipped_or_rejected() {
        let all_kink = Tensor::vector(&[0.0, 0.0]);
        assert!(matches!(
            grad_check(&OpKind::Relu, &[all_kink], 1e-5),
            Err(Error::NonDifferentiable(_))
        ));
        let mixed = Tensor::vector(&[0.0, 0.5, -0.7]);
        assert!(grad_check(&OpKind::Relu, &[mixed], 1e-5).unwrap() < 1e-9);
    }
}
