//! Central finite-difference verification of tape gradients.

use alloc::vec::Vec;
use core::fmt;

use super::tape::{AdResult, Tape, Var};
use super::tensor::{real, Real, Tensor};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GradCheckError {
    NonScalarLoss { shape: Vec<usize> },
    Build(super::tape::AutodiffError),
}

impl fmt::Display for GradCheckError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::NonScalarLoss { shape } => {
                write!(f, "gradient check requires a scalar loss, got {shape:?}")
            }
            Self::Build(e) => write!(f, "gradient check build failed: {e}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for GradCheckError {}

/// Floor for the relative-error denominator; gradients smaller than this are
/// compared on an absolute scale.
const REL_FLOOR: f64 = 1e-3;

/// Compares tape gradients of a scalar loss against central finite
/// differences over every entry of every input, returning the maximum
/// relative error. The builder is re-invoked per evaluation on a tape seeded
/// identically, so stochastic ops (dropout) see the same draws.
pub fn grad_check<F: Real>(
    inputs: &[Tensor<F>],
    seed: u64,
    eps: F,
    mut builder: impl FnMut(&mut Tape<F>, &[Var]) -> AdResult<Var>,
) -> Result<F, GradCheckError> {
    let eval = |tensors: &[Tensor<F>],
                builder: &mut dyn FnMut(&mut Tape<F>, &[Var]) -> AdResult<Var>|
     -> Result<(Tape<F>, Vec<Var>, Var), GradCheckError> {
        let mut tape = Tape::new(true, seed);
        let vars: Vec<Var> = tensors
            .iter()
            .map(|t| tape.input(t.clone(), true))
            .collect();
        let loss = builder(&mut tape, &vars).map_err(GradCheckError::Build)?;
        if tape.value(loss).numel() != 1 {
            return Err(GradCheckError::NonScalarLoss {
                shape: tape.value(loss).shape().to_vec(),
            });
        }
        Ok((tape, vars, loss))
    };

    let (tape, vars, loss) = eval(inputs, &mut builder)?;
    let grads = tape.backward(loss).map_err(GradCheckError::Build)?;

    let mut work: Vec<Tensor<F>> = inputs.to_vec();
    let mut max_rel = F::zero();
    let two = real::<F>(2.0);
    let floor = real::<F>(REL_FLOOR);

    for (i, var) in vars.iter().enumerate() {
        let analytic = grads[var.0].clone();
        for j in 0..inputs[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let (tp, _, lp) = eval(&work, &mut builder)?;
            let f_plus = tp.value(lp).item();
            work[i].data_mut()[j] = orig - eps;
            let (tm, _, lm) = eval(&work, &mut builder)?;
            let f_minus = tm.value(lm).item();
            work[i].data_mut()[j] = orig;

            let fd = (f_plus - f_minus) / (two * eps);
            let an = analytic.as_ref().map_or(F::zero(), |t| t.data()[j]);
            let denom = an.abs().max(fd.abs()).max(floor);
            let rel = (an - fd).abs() / denom;
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn linear_regression_gradients_match() {
        // loss = mean((x·w − y)²) over a small fixed system
        let x = Tensor::new(vec![4, 3], (0..12).map(|i| 0.1 * i as f64 - 0.4).collect());
        let y = Tensor::new(vec![4, 1], vec![0.3, -0.2, 0.9, 0.1]);
        let w = Tensor::new(vec![3, 1], vec![0.5, -0.7, 0.2]);
        let err = grad_check(&[w], 0, 1e-5, |tape, vars| {
            let xv = tape.constant(x.clone());
            let yv = tape.constant(y.clone());
            let pred = tape.matmul(xv, vars[0])?;
            let diff = tape.sub(pred, yv)?;
            let sq = tape.mul(diff, diff)?;
            Ok(tape.mean_all(sq))
        })
        .unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn frozen_input_reports_no_gradient() {
        let mut tape = Tape::<f64>::new(false, 0);
        let a = tape.input(Tensor::scalar(2.0), true);
        let b = tape.input(Tensor::scalar(3.0), false);
        let prod = tape.mul(a, b).unwrap();
        let grads = tape.backward(prod).unwrap();
        assert!(grads[a.0].is_some());
        assert!(grads[b.0].is_none());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f64>::new(false, 0);
        let a = tape.input(Tensor::new(vec![2], vec![1.0, 2.0]), true);
        let err = tape.backward(a).unwrap_err();
        assert!(matches!(
            err,
            super::super::tape::AutodiffError::NonScalarLoss { .. }
        ));
    }
}
