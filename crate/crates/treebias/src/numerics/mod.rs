//! Reverse-mode automatic differentiation over dense fp64 tensors.
//!
//! A [`Tape`] records primitive applications as they run (define-by-run);
//! [`Tape::backward`] performs one reverse sweep and hands back gradients
//! for every registered leaf. One tape per utterance; distinct tapes are
//! independent, so utterances can run in parallel with results identical
//! to sequential execution.

mod check;
mod tape;
mod tensor;

pub use check::finite_difference_check;
pub use tape::{Gradients, ParamId, Tape, Val, LOG_CLAMP};
pub use tensor::Tensor;

/// Anything exposing a flat, canonically ordered set of trainable tensors.
///
/// The visit order defines [`ParamId`]s: the k-th visited tensor is
/// `ParamId(k)`. Gradient accumulation, the optimizer, checkpointing and
/// the finite-difference harness all rely on this order being stable.
pub trait TrainableParams {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, _| n += 1);
        n
    }

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit_params(&mut |name, _| names.push(name.to_string()));
        names
    }

    /// Total scalar count across all parameters.
    fn scalar_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, t| n += t.numel());
        n
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let mut tape = Tape::new();
        let x = tape.vector(&[0.0, 0.0, 0.0]);
        let y = tape.softmax(x);
        for &p in tape.value(y) {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn masked_softmax_zeroes_masked_positions() {
        let mut tape = Tape::new();
        let x = tape.vector(&[5.0, 2.0, 7.0]);
        let y = tape.masked_softmax(x, &[true, false, true]);
        let v = tape.value(y);
        let denom = 5f64.exp() + 7f64.exp();
        assert!((v[0] - 5f64.exp() / denom).abs() < 1e-15);
        assert_eq!(v[1], 0.0);
        assert!((v[2] - 7f64.exp() / denom).abs() < 1e-15);
        let sum: f64 = v.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let eye = tape.constant(
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            vec![3, 3],
        );
        let a_vals: Vec<f64> = (0..12).map(|i| i as f64 * 0.5 - 2.0).collect();
        let a = tape.constant(a_vals.clone(), vec![3, 4]);
        let out = tape.matmul(eye, a);
        assert_eq!(tape.value(out), &a_vals[..]);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let t = Tensor::new(vec![2, 2], vec![1.0, -2.0, 3.0, 0.5]).with_grad();
        let x = tape.leaf(&t);
        let loss = tape.sum(x);
        let grads = tape.backward(loss);
        assert_eq!(grads.wrt(x).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn sigmoid_grad_at_zero_is_quarter() {
        let mut tape = Tape::new();
        let t = Tensor::scalar(0.0).with_grad();
        let w = tape.leaf(&t);
        let s = tape.sigmoid(w);
        let loss = tape.sum(s);
        let grads = tape.backward(loss);
        assert!((grads.wrt(w).unwrap()[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn fd_check_square_function() {
        // f(x) = x^2 at x = 3: analytic 6
        let point = Tensor::scalar(3.0);
        let err = finite_difference_check(|tape, x| tape.mul(x, x), &point, 1e-5);
        assert!(err < 1e-7, "rel err {err}");
    }

    #[test]
    fn fd_check_three_layer_composition() {
        // random 3-layer chain: tanh → sigmoid-weighted mixing → log-softmax pick
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w1: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w2: Vec<f64> = (0..25).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let point = Tensor::vector((0..4).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let err = finite_difference_check(
            |tape, x| {
                let m1 = tape.constant(w1.clone(), vec![5, 4]);
                let m2 = tape.constant(w2.clone(), vec![5, 5]);
                let h1 = tape.matvec(m1, x);
                let h1 = tape.tanh(h1);
                let h2 = tape.matvec(m2, h1);
                let h2 = tape.sigmoid(h2);
                let p = tape.softmax(h2);
                let p2 = tape.select(p, 2);
                tape.log(p2)
            },
            &point,
            1e-5,
        );
        assert!(err < 1e-7, "rel err {err}");
    }

    /// Every primitive's analytic gradient matches central differences at
    /// random points.
    #[test]
    fn all_primitives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut worst: (f64, &str) = (0.0, "none");
        let mut check = |name: &'static str, dim: usize, f: &dyn Fn(&mut Tape, Val) -> Val| {
            for _ in 0..100 {
                let point =
                    Tensor::vector((0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect());
                let err = finite_difference_check(f, &point, 1e-5);
                if err > worst.0 {
                    worst = (err, name);
                }
                assert!(err < 1e-4, "{name}: rel err {err} at {:?}", point.values());
            }
        };

        check("add", 6, &|t, x| {
            let a = t.slice(x, 0, 3);
            let b = t.slice(x, 3, 3);
            let s = t.add(a, b);
            t.sum(s)
        });
        check("sub_mul", 6, &|t, x| {
            let a = t.slice(x, 0, 3);
            let b = t.slice(x, 3, 3);
            let d = t.sub(a, b);
            let m = t.mul(d, a);
            t.sum(m)
        });
        check("scale", 4, &|t, x| {
            let s = t.scale(x, -1.7);
            t.sum(s)
        });
        check("mul_scalar", 5, &|t, x| {
            let v = t.slice(x, 0, 4);
            let s = t.select(x, 4);
            let m = t.mul_scalar(v, s);
            t.sum(m)
        });
        check("matmul_transpose", 6, &|t, x| {
            let a = t.slice(x, 0, 6);
            // reuse x twice through different shapes
            let rows = [t.slice(a, 0, 3), t.slice(a, 3, 3)];
            let m = t.stack_rows(&rows);
            let mt = t.transpose(m);
            let p = t.matmul(m, mt);
            let f = t.flatten(p);
            let sq = t.mul(f, f);
            t.sum(sq)
        });
        check("matvec_vecmat_dot", 6, &|t, x| {
            let v = t.slice(x, 0, 2);
            let rows = [t.slice(x, 2, 2), t.slice(x, 4, 2)];
            let m = t.stack_rows(&rows);
            let mv = t.matvec(m, v);
            let vm = t.vecmat(v, m);
            t.dot(mv, vm)
        });
        check("add_rowwise_sum_axis0", 6, &|t, x| {
            let rows = [t.slice(x, 0, 2), t.slice(x, 2, 2)];
            let m = t.stack_rows(&rows);
            let v = t.slice(x, 4, 2);
            let a = t.add_rowwise(m, v);
            let tan = t.tanh(a);
            let cols = t.sum_axis0(tan);
            t.sum(cols)
        });
        check("activations", 4, &|t, x| {
            let s = t.sigmoid(x);
            let h = t.tanh(s);
            let e = t.exp(h);
            let l = t.log(e);
            t.sum(l)
        });
        check("softmax", 5, &|t, x| {
            let p = t.softmax(x);
            let w = t.constant(vec![0.1, -0.4, 2.0, 0.7, -1.3], vec![5]);
            t.dot(p, w)
        });
        check("masked_softmax", 5, &|t, x| {
            let p = t.masked_softmax(x, &[true, false, true, true, false]);
            let w = t.constant(vec![0.4, 9.9, -0.2, 1.1, 9.9], vec![5]);
            t.dot(p, w)
        });
        check("logaddexp", 6, &|t, x| {
            let a = t.slice(x, 0, 3);
            let b = t.slice(x, 3, 3);
            let l = t.logaddexp(a, b);
            t.sum(l)
        });
        check("gather_concat_select", 4, &|t, x| {
            let rows = [t.slice(x, 0, 2), t.slice(x, 2, 2)];
            let m = t.stack_rows(&rows);
            let g = t.gather(m, &[1, 0, 1]);
            let f = t.flatten(g);
            let c = t.concat(&[f, x]);
            let p = t.softmax(c);
            let s = t.select(p, 3);
            t.log(s)
        });

        eprintln!("worst primitive fd error: {} ({})", worst.0, worst.1);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let t = Tensor::vector(vec![1.0, 2.0]).with_grad();
        let x = tape.leaf(&t);
        let y = tape.scale(x, 2.0);
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(move || {
            tape.backward(y);
        }));
        assert!(result.is_err());
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let t =
                Tensor::vector((0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()).with_grad();
            let w: Vec<f64> = (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut tape = Tape::new();
            let x = tape.leaf(&t);
            let m = tape.constant(w, vec![4, 8]);
            let h = tape.matvec(m, x);
            let h = tape.tanh(h);
            let p = tape.softmax(h);
            let s = tape.select(p, 1);
            let loss = tape.log(s);
            let grads = tape.backward(loss);
            grads.wrt(x).unwrap().to_vec()
        };
        let a = run();
        let b = run();
        // bitwise identical
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn param_gradients_surface_by_id() {
        let w = Tensor::vector(vec![0.5, -0.5]).with_grad();
        let mut tape = Tape::new();
        let wv = tape.param(ParamId(3), &w);
        let c = tape.vector(&[2.0, 4.0]);
        let d = tape.dot(wv, c);
        let grads = tape.backward(d);
        let collected: Vec<_> = grads.params().collect();
        assert_eq!(collected.len(), 1);
        assert_eq!(collected[0].0, ParamId(3));
        assert_eq!(collected[0].1, &[2.0, 4.0]);
    }
}
