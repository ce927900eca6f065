use super::{NumError, Result};

/// SGD with heavy-ball momentum: `v ← momentum·v + g; p ← p − lr·v`.
pub fn sgd_step(
    params: &mut [f64],
    grads: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(NumError::Shape {
            op: "sgd_step",
            expected: format!("{} gradients and velocities", params.len()),
            found: format!("{} / {}", grads.len(), velocity.len()),
        });
    }
    if !(lr > 0.0) || !(0.0..1.0).contains(&momentum) {
        return Err(NumError::InvalidArgument(format!(
            "sgd_step requires lr > 0 and momentum in [0, 1), got lr={lr}, momentum={momentum}"
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(NumError::NonFinite {
            context: format!("gradient entry {i} = {}", grads[i]),
        });
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

/// Central-difference gradient estimate of `f` at `point`.
pub fn finite_diff_grad<F>(mut f: F, point: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut x = point.to_vec();
    let mut grad = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let orig = x[i];
        x[i] = orig + step;
        let hi = f(&x);
        x[i] = orig - step;
        let lo = f(&x);
        x[i] = orig;
        if !hi.is_finite() || !lo.is_finite() {
            return Err(NumError::NonFinite {
                context: format!("function evaluation near coordinate {i}"),
            });
        }
        grad.push((hi - lo) / (2.0 * step));
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_step() {
        let (mut p, mut v) = (vec![0.0], vec![0.0]);
        sgd_step(&mut p, &[1.0], &mut v, 0.1, 0.0).unwrap();
        assert!((p[0] + 0.1).abs() < 1e-15);
    }

    #[test]
    fn momentum_two_steps() {
        let (mut p, mut v) = (vec![0.0], vec![0.0]);
        sgd_step(&mut p, &[1.0], &mut v, 0.1, 0.9).unwrap();
        sgd_step(&mut p, &[1.0], &mut v, 0.1, 0.9).unwrap();
        assert!((p[0] + 0.29).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let (mut p, mut v) = (vec![1.5, -2.0], vec![0.0, 0.0]);
        sgd_step(&mut p, &[0.0, 0.0], &mut v, 0.1, 0.9).unwrap();
        assert_eq!(p, vec![1.5, -2.0]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let (mut p, mut v) = (vec![0.0], vec![0.0]);
        assert!(matches!(
            sgd_step(&mut p, &[f64::NAN], &mut v, 0.1, 0.0),
            Err(NumError::NonFinite { .. })
        ));
        assert!(sgd_step(&mut p, &[1.0, 2.0], &mut v, 0.1, 0.0).is_err());
        assert!(sgd_step(&mut p, &[1.0], &mut v, 0.0, 0.0).is_err());
        assert!(sgd_step(&mut p, &[1.0], &mut v, 0.1, 1.0).is_err());
    }

    #[test]
    fn finite_differences() {
        let g = finite_diff_grad(|x| x[0] * x[0], &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
        let g = finite_diff_grad(|_| 4.2, &[1.0, 2.0], 1e-5).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
        let g = finite_diff_grad(|x| x[0] * x[1], &[2.0, 5.0], 1e-5).unwrap();
        assert!((g[0] - 5.0).abs() < 1e-6 && (g[1] - 2.0).abs() < 1e-6);
        assert!(finite_diff_grad(|x| x[0].ln(), &[0.0], 1e-5).is_err());
    }
}
