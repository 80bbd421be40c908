use super::{Result, Tensor};

/// Largest relative deviation between the reverse-mode gradient of `f` at
/// `x` and central differences with step `h`:
/// `max_i |g_i − (f(x+h·e_i) − f(x−h·e_i))/2h| / (|g_i| + 1e-8)`.
///
/// `f` must be deterministic (dropout disabled) and return a scalar.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    finite_diff_check_at(f, x.data(), x.shape(), h)
}

pub fn finite_diff_check_at<F>(f: F, x: &[f64], shape: &[usize], h: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let leaf = Tensor::param(x.to_vec(), shape)?;
    let loss = f(&leaf)?;
    loss.backward()?;
    let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; x.len()]);
    let mut worst: f64 = 0.0;
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&Tensor::from_vec(probe.clone(), shape)?)?.item();
        probe[i] = orig - h;
        let down = f(&Tensor::from_vec(probe.clone(), shape)?)?.item();
        probe[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let rel = (analytic[i] - numeric).abs() / (analytic[i].abs() + 1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}
