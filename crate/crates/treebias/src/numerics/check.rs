use super::tape::{Tape, Val};
use super::tensor::Tensor;

/// Compare the analytic gradient of `f` at `point` against central finite
/// differences with step `h`, returning the maximum relative error over
/// coordinates: |analytic − numeric| / max(1e-8, |analytic| + |numeric|).
///
/// `f` must be pure and deterministic, and must produce a scalar node.
pub fn finite_difference_check<F>(f: F, point: &Tensor, h: f64) -> f64
where
    F: Fn(&mut Tape, Val) -> Val,
{
    let mut probe = point.clone();
    probe.requires_grad = true;

    let mut tape = Tape::new();
    let x = tape.leaf(&probe);
    let loss = f(&mut tape, x);
    assert_eq!(
        tape.value(loss).len(),
        1,
        "finite_difference_check: f must return a scalar, got shape {:?}",
        tape.shape(loss)
    );
    let grads = tape.backward(loss);
    let analytic: Vec<f64> = grads
        .wrt(x)
        .map(|g| g.to_vec())
        .unwrap_or_else(|| vec![0.0; point.numel()]);

    let eval = |values: &[f64]| -> f64 {
        let t = Tensor::new(point.shape().to_vec(), values.to_vec());
        let mut tape = Tape::new();
        let x = tape.leaf(&t);
        let loss = f(&mut tape, x);
        tape.item(loss)
    };

    let mut max_rel = 0.0_f64;
    let mut values = point.values().to_vec();
    for i in 0..values.len() {
        let orig = values[i];
        values[i] = orig + h;
        let up = eval(&values);
        values[i] = orig - h;
        let down = eval(&values);
        values[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let rel = (analytic[i] - numeric).abs() / (1e-8_f64).max(analytic[i].abs() + numeric.abs());
        if rel > max_rel {
            max_rel = rel;
        }
    }
    max_rel
}
