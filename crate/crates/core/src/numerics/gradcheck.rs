use super::mlp::Parameter;

/// Outcome of comparing an analytic gradient with central differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_relative_error: f64,
    /// Coordinate where the worst error occurred, if any coordinate was probed.
    pub worst_index: Option<usize>,
    pub within_tolerance: bool,
}

/// Compares `analytic` against central finite differences of `f` around
/// `point`. The relative error of one coordinate is
/// `|a - n| / max(1, |a|, |n|)`.
pub fn grad_check<F>(mut f: F, point: &[f64], analytic: &[f64], step: f64, tol: f64) -> GradCheck
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(
        point.len(),
        analytic.len(),
        "analytic gradient must have one entry per coordinate"
    );
    let mut probe = point.to_vec();
    let mut worst = 0.0f64;
    let mut worst_index = None;
    for i in 0..point.len() {
        let x = point[i];
        probe[i] = x + step;
        let plus = f(&probe);
        probe[i] = x - step;
        let minus = f(&probe);
        probe[i] = x;
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic[i];
        let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        let err = if err.is_nan() { f64::INFINITY } else { err };
        if worst_index.is_none() || err > worst {
            worst = err;
            worst_index = Some(i);
        }
    }
    GradCheck {
        max_relative_error: worst,
        worst_index,
        within_tolerance: worst < tol,
    }
}

pub fn flatten_values(params: &[&Parameter]) -> Vec<f64> {
    params
        .iter()
        .flat_map(|p| p.value.data().iter().copied())
        .collect()
}

pub fn flatten_grads(params: &[&Parameter]) -> Vec<f64> {
    params
        .iter()
        .flat_map(|p| p.grad.data().iter().copied())
        .collect()
}

/// Writes a flat vector (as produced by [`flatten_values`]) back into the
/// parameters, in the same order.
pub fn unflatten_values(params: &mut [&mut Parameter], values: &[f64]) {
    let total: usize = params.iter().map(|p| p.len()).sum();
    assert_eq!(total, values.len(), "flat vector length mismatch");
    let mut offset = 0;
    for p in params.iter_mut() {
        let n = p.len();
        p.value
            .data_mut()
            .copy_from_slice(&values[offset..offset + n]);
        offset += n;
    }
}
