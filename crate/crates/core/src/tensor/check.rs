//! Central-finite-difference gradient verification.

use super::{Result, Tape, Tensor, TensorError};

/// Compare analytic gradients against central finite differences.
///
/// `f` must map the input tensors to a scalar loss. Every input marked
/// `requires_grad` is perturbed element by element with step `eps`, and the
/// worst relative error `|a - n| / max(1e-8, |a| + |n|)` over all elements is
/// returned. The numeric side only ever runs `f` on a non-recording tape, so
/// it stays independent of the backward implementation it checks.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Tensor]) -> Result<Tensor>,
{
    // Analytic pass.
    let mut tape = Tape::new();
    let tracked: Vec<Tensor> = inputs.to_vec();
    let loss = f(&mut tape, &tracked)?;
    if loss.numel() != 1 {
        return Err(TensorError::Contract(
            "grad_check requires a scalar-valued function".into(),
        ));
    }
    let grads = tape.backward(&loss)?;

    let eval = |points: &[Tensor]| -> Result<f64> {
        let mut t = Tape::no_grad();
        f(&mut t, points)?.item()
    };

    let mut max_rel = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        if !input.requires_grad_flag() {
            continue;
        }
        let analytic = grads.wrt(&tracked[i]);
        for j in 0..input.numel() {
            let a = analytic.map_or(0.0, |g| g.data()[j]);

            let mut plus: Vec<Tensor> = inputs.to_vec();
            plus[i].data_mut()[j] += eps;
            let lp = eval(&plus)?;

            let mut minus: Vec<Tensor> = inputs.to_vec();
            minus[i].data_mut()[j] -= eps;
            let lm = eval(&minus)?;

            let n = (lp - lm) / (2.0 * eps);
            let rel = (a - n).abs() / (a.abs() + n.abs()).max(1e-8);
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_loss_grads_match() {
        // loss = sum(x * x); analytic gradient 2x.
        let x = Tensor::from_vec(&[3], vec![0.5, -1.25, 2.0])
            .unwrap()
            .requires_grad(true);
        let err = grad_check(
            |tape, inp| {
                let sq = tape.mul(&inp[0], &inp[0])?;
                Ok(tape.sum_all(&sq))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "relative error {err}");
    }

    #[test]
    fn relu_away_from_kink() {
        let x = Tensor::from_vec(&[4], vec![0.4, -0.9, 1.3, -0.2])
            .unwrap()
            .requires_grad(true);
        let err = grad_check(
            |tape, inp| {
                let r = tape.relu(&inp[0]);
                Ok(tape.sum_all(&r))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn non_scalar_function_rejected() {
        let x = Tensor::zeros(&[2]).unwrap().requires_grad(true);
        let res = grad_check(|_, inp| Ok(inp[0].clone()), &[x], 1e-5);
        assert!(res.is_err());
    }
}
