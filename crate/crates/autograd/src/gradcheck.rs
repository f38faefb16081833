//! Central finite-difference gradient checking.

use crate::tensor::Tensor;

/// Worst-case discrepancy between analytic and numeric gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` maximized over inputs.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

/// Compare the backward-pass gradient of the scalar `f(inputs)` with central
/// differences of step `eps`, for every input in `inputs`.
///
/// Inputs whose numeric and analytic gradients both vanish (norm below
/// `1e-12`) count as exact matches.
pub fn check_gradients<F>(f: F, inputs: &[(Vec<f64>, Vec<usize>)], eps: f64) -> GradCheck
where
    F: Fn(&[Tensor]) -> Tensor,
{
    let leaves: Vec<Tensor> = inputs.iter().map(|(d, s)| Tensor::leaf(d.clone(), s)).collect();
    let out = f(&leaves);
    let grads = out.backward();

    let mut max_rel_err: f64 = 0.0;
    let mut max_abs_err: f64 = 0.0;
    for (which, (data, _)) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(&leaves[which]);
        let mut numeric = vec![0.0; data.len()];
        for j in 0..data.len() {
            let eval = |delta: f64| {
                let args: Vec<Tensor> = inputs
                    .iter()
                    .enumerate()
                    .map(|(i, (d, s))| {
                        if i == which {
                            let mut d = d.clone();
                            d[j] += delta;
                            Tensor::new(d, s)
                        } else {
                            Tensor::new(d.clone(), s)
                        }
                    })
                    .collect();
                f(&args).item()
            };
            numeric[j] = (eval(eps) - eval(-eps)) / (2.0 * eps);
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let scale = na.max(nn);
        let abs = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
        max_abs_err = max_abs_err.max(abs);
        if scale > 1e-12 {
            max_rel_err = max_rel_err.max(diff / scale);
        }
    }
    GradCheck { max_rel_err, max_abs_err }
}
