//! Central-difference verification of recorded adjoints.

use crate::error::{param_err, Error, Result};
use crate::graph::Graph;
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// max over checked coordinates of |analytic - numeric| / max(1, |numeric|)
    pub max_rel_error: f64,
    pub coords_checked: usize,
}

/// Verifies the recorded adjoints of `f` against central differences.
///
/// `f` receives a fresh graph plus differentiable copies of `inputs` and must
/// return a scalar (single-element) output recorded on that graph. Checks
/// every coordinate of every input; see [`grad_check_sampled`] for large
/// inputs. Requires f64: one-sided float32 differences lose too many digits
/// to verify anything.
pub fn grad_check<T, F>(f: F, inputs: &[Tensor<T>], eps: f64) -> Result<f64>
where
    T: Scalar,
    F: Fn(&Graph<T>, &[Tensor<T>]) -> Result<Tensor<T>>,
{
    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
        .collect();
    Ok(grad_check_at(&f, inputs, eps, &coords)?.max_rel_error)
}

/// Like [`grad_check`] but only checks a deterministic subsample of
/// coordinates, spread evenly across each input.
pub fn grad_check_sampled<T, F>(
    f: F,
    inputs: &[Tensor<T>],
    eps: f64,
    max_coords_per_input: usize,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&Graph<T>, &[Tensor<T>]) -> Result<Tensor<T>>,
{
    let mut coords = Vec::new();
    for (i, t) in inputs.iter().enumerate() {
        let n = t.numel();
        let take = n.min(max_coords_per_input);
        for k in 0..take {
            // Even stride with a fixed phase keeps the choice deterministic.
            let j = (k * n + n / 2) / take.max(1) % n;
            coords.push((i, j));
        }
    }
    coords.sort_unstable();
    coords.dedup();
    grad_check_at(&f, inputs, eps, &coords)
}

fn grad_check_at<T, F>(
    f: &F,
    inputs: &[Tensor<T>],
    eps: f64,
    coords: &[(usize, usize)],
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&Graph<T>, &[Tensor<T>]) -> Result<Tensor<T>>,
{
    if T::DTYPE != DType::F64 {
        return Err(Error::Precision(
            "grad_check requires f64 inputs; finite differences in f32 are rejected".into(),
        ));
    }
    if !(1e-7..=1e-3).contains(&eps) {
        return param_err(format!("grad_check eps {eps} outside [1e-7, 1e-3]"));
    }

    let leaves: Vec<Tensor<T>> = inputs
        .iter()
        .map(|t| Tensor::param(t.shape().to_vec(), t.data().to_vec()))
        .collect::<Result<_>>()?;

    let graph = Graph::new();
    let out = f(&graph, &leaves)?;
    if out.numel() != 1 {
        return param_err(format!(
            "grad_check function must return a scalar, got shape {:?}",
            out.shape()
        ));
    }
    graph.backward_from(&out, &Tensor::scalar(T::one()))?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|t| {
            t.grad()
                .map(|g| g.iter().map(|v| v.as_f64()).collect())
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    let eval = |probe: &[Tensor<T>]| -> Result<f64> {
        let g = Graph::new();
        let out = f(&g, probe)?;
        Ok(out.item()?.as_f64())
    };

    let mut max_rel = 0.0f64;
    for &(i, j) in coords {
        let perturbed = |delta: f64| -> Result<Vec<Tensor<T>>> {
            inputs
                .iter()
                .enumerate()
                .map(|(k, t)| {
                    if k == i {
                        let mut data = t.data().to_vec();
                        data[j] = data[j] + T::from_f64(delta);
                        Tensor::from_vec(t.shape().to_vec(), data)
                    } else {
                        Ok(t.clone())
                    }
                })
                .collect()
        };
        let fp = eval(&perturbed(eps)?)?;
        let fm = eval(&perturbed(-eps)?)?;
        let numeric = (fp - fm) / (2.0 * eps);
        let rel = (analytic[i][j] - numeric).abs() / numeric.abs().max(1.0);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        coords_checked: coords.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::from_vec(vec![4], vec![0.3, -1.1, 2.0, 0.5]).unwrap();
        let w = Tensor::from_vec(vec![4], vec![2.0, -1.0, 0.5, 3.0]).unwrap();
        let err = grad_check(
            |g, inputs| g.weighted_sum(&inputs[0], &w),
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-10, "linear gradcheck error {err}");
    }

    #[test]
    fn gelu_at_half() {
        let x = Tensor::from_vec(vec![1], vec![0.5]).unwrap();
        let err = grad_check(
            |g, inputs| {
                let y = g.gelu(&inputs[0])?;
                g.sum_all(&y)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "gelu gradcheck error {err}");
    }

    #[test]
    fn bilinear_point_gradient_interior() {
        let z =
            Tensor::from_vec(vec![3, 3, 2], (0..18).map(|v| v as f64 * 0.37 - 2.0).collect())
                .unwrap();
        let pts = Tensor::from_vec(vec![2, 2], vec![-0.23, 0.41, 0.11, -0.57]).unwrap();
        let weights = Tensor::from_vec(vec![2, 2], vec![0.7, -0.2, 1.3, 0.5]).unwrap();
        let err = grad_check(
            |g, inputs| {
                let out = g.bilinear_sample(&z, &inputs[0])?;
                g.weighted_sum(&out, &weights)
            },
            &[pts],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "bilinear point gradcheck error {err}");
    }

    #[test]
    fn rejects_f32() {
        let x = Tensor::<f32>::from_vec(vec![1], vec![1.0]).unwrap();
        let err = grad_check(|g, inputs| g.sum_all(&inputs[0]), &[x], 1e-5);
        assert!(matches!(err, Err(Error::Precision(_))));
    }

    #[test]
    fn rejects_eps_out_of_range() {
        let x = Tensor::<f64>::from_vec(vec![1], vec![1.0]).unwrap();
        let err = grad_check(|g, inputs| g.sum_all(&inputs[0]), &[x], 1e-2);
        assert!(matches!(err, Err(Error::Parameter(_))));
    }
}
