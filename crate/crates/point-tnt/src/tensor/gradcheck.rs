//! Central finite differences: the independent oracle the autodiff engine is
//! checked against. Run it in `f64` with h around 1e-5; in `f32` the
//! truncation and rounding errors are of similar size and the comparison is
//! meaningless.

use super::{no_grad, Element, Tensor};

/// (f(x + h e_i) - f(x - h e_i)) / 2h for every coordinate of `x`.
/// `f` must map a tensor to a scalar tensor and be deterministic
/// (run dropout in eval mode).
pub fn finite_diff_grad<E: Element>(
    f: impl Fn(&Tensor<E>) -> Tensor<E>,
    x: &Tensor<E>,
    h: f64,
) -> Vec<E> {
    let shape = x.shape();
    let base = x.value();
    let he = E::from_f64(h);
    let two_h = E::from_f64(2.0 * h);
    let mut grad = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += he;
        let mut minus = base.clone();
        minus[i] = minus[i] - he;
        let fp = no_grad(|| f(&Tensor::from_vec(&shape, plus).unwrap()).item());
        let fm = no_grad(|| f(&Tensor::from_vec(&shape, minus).unwrap()).item());
        grad.push((fp - fm) / two_h);
    }
    grad
}

/// Central differences of `f()` with respect to selected coordinates of a
/// leaf tensor that `f` reads (e.g. a model parameter). The tensor is
/// restored afterwards.
pub fn finite_diff_wrt<E: Element>(
    f: impl Fn() -> E,
    leaf: &Tensor<E>,
    coords: &[usize],
    h: f64,
) -> Vec<E> {
    let base = leaf.value();
    let he = E::from_f64(h);
    let two_h = E::from_f64(2.0 * h);
    let mut out = Vec::with_capacity(coords.len());
    for &i in coords {
        let mut plus = base.clone();
        plus[i] += he;
        leaf.set_value(plus);
        let fp = f();
        let mut minus = base.clone();
        minus[i] = minus[i] - he;
        leaf.set_value(minus);
        let fm = f();
        out.push((fp - fm) / two_h);
    }
    leaf.set_value(base);
    out
}

/// max_i |a_i - b_i| / max(floor, |a_i|, |b_i|).
pub fn max_rel_err<E: Element>(analytic: &[E], numeric: &[E]) -> f64 {
    let floor = 1e-6f64;
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &b)| {
            let (a, b) = (a.as_f64(), b.as_f64());
            (a - b).abs() / floor.max(a.abs()).max(b.abs())
        })
        .fold(0.0, f64::max)
}

/// Runs `f` forward and backward, then compares the analytic gradient of `x`
/// against central differences. Returns the worst relative error.
pub fn check_unary<E: Element>(
    f: impl Fn(&Tensor<E>) -> Tensor<E>,
    x: &Tensor<E>,
    h: f64,
) -> f64 {
    x.set_requires_grad(true);
    x.zero_grad();
    let loss = f(x);
    loss.backward().expect("backward failed in gradient check");
    let analytic = x.grad().expect("no gradient reached the input");
    let numeric = finite_diff_grad(&f, x, h);
    max_rel_err(&analytic, &numeric)
}
