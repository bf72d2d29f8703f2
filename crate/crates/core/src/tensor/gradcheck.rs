use super::Tensor;
use crate::error::{Error, Result};

/// Central-difference gradient estimate `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h`
/// for every element of `x`.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite {
                op: "finite_diff_grad",
                layer: format!("probe {i}"),
            });
        }
        out.push((plus - minus) / (2.0 * h));
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// `max |a − b| / max(|a|, |b|, floor)` over paired elements. The floor keeps
/// vanishing gradients from turning rounding noise into large ratios.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
