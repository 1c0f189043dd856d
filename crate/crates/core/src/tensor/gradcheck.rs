//! Finite-difference gradient verification.

use super::{no_grad, Tensor};
use crate::error::{Error, Result};

/// Compares reverse-mode gradients of `f` at `x` against central finite
/// differences with step `h`. Returns the worst relative discrepancy,
/// `|g_ad - g_fd| / max(1, |g_ad|, |g_fd|)`, across all coordinates.
///
/// `f` must map `x` to a scalar and must not retain references to `x`'s
/// buffer across calls. `x` must be a tracked leaf.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    if !x.is_tracked() {
        return Err(Error::Contract(
            "grad_check needs a tracked leaf input".into(),
        ));
    }
    x.clear_grad();
    let y = f(x)?;
    y.backward()?;
    let g_ad = x
        .grad()
        .ok_or_else(|| Error::Contract("function output does not depend on input".into()))?;
    x.clear_grad();

    let n = x.numel();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let orig = x.data()[i];
        x.with_data_mut(|d| d[i] = orig + h);
        let fp = no_grad(|| f(x))?.item()?;
        x.with_data_mut(|d| d[i] = orig - h);
        let fm = no_grad(|| f(x))?.item()?;
        x.with_data_mut(|d| d[i] = orig);
        let g_fd = (fp - fm) / (2.0 * h);
        let denom = 1.0_f64.max(g_ad[i].abs()).max(g_fd.abs());
        worst = worst.max((g_ad[i] - g_fd).abs() / denom);
    }
    Ok(worst)
}
