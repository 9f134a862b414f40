use super::Tensor;

/// Central-difference gradient of a scalar function:
/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every coordinate.
pub fn finite_diff_grad(f: impl Fn(&Tensor<f64>) -> f64, x: &Tensor<f64>, h: f64) -> Tensor<f64> {
    finite_diff_at(f, x, h, 0..x.len())
}

/// Same as [`finite_diff_grad`] but only for the listed coordinates;
/// other entries are zero.
pub fn finite_diff_at(
    f: impl Fn(&Tensor<f64>) -> f64,
    x: &Tensor<f64>,
    h: f64,
    coords: impl IntoIterator<Item = usize>,
) -> Tensor<f64> {
    let mut grad = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// Fourth-order central difference
/// `(−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h)) / 12h` at the listed
/// coordinates. Its truncation error falls as `h⁴`, so a larger step can be
/// used and rounding noise stays near `ε·|f| / h`.
pub fn finite_diff_at_4th(
    f: impl Fn(&Tensor<f64>) -> f64,
    x: &Tensor<f64>,
    h: f64,
    coords: impl IntoIterator<Item = usize>,
) -> Tensor<f64> {
    let mut grad = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in coords {
        let orig = probe.data()[i];
        let mut at = |delta: f64| {
            probe.data_mut()[i] = orig + delta;
            f(&probe)
        };
        let (p2, p1, m1, m2) = (at(2.0 * h), at(h), at(-h), at(-2.0 * h));
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * h);
    }
    grad
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| rel_err(x, y, floor))
        .fold(0.0, f64::max)
}
