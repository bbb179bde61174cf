//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Operations are recorded on a [`Tape`] in execution order; [`Tape::backward`]
//! sweeps the record in reverse and accumulates gradients by summation in tape
//! order, so identical inputs give bitwise-identical gradients.
//!
//! [`Tape::checkpoint`] wraps a pure function whose internal activations are
//! thrown away after the forward pass and regenerated during backward. The
//! sampler uses one checkpoint per score-network call, which keeps only the
//! chain of denoised states alive between steps.

mod tape;
mod tensor;

pub use tape::{
    logit, sigmoid, softplus, softplus_inverse, Gradients, MemoryStats, OpKind, Recipe, Tape, Var,
};
pub use tensor::Tensor;

/// Central finite-difference gradient of a scalar function of one tensor.
pub fn finite_difference(
    x: &Tensor,
    h: f64,
    mut f: impl FnMut(&Tensor) -> crate::Result<f64>,
) -> crate::Result<Tensor> {
    let mut grad = Vec::with_capacity(x.numel());
    let base = x.to_vec();
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += h;
        let mut minus = base.clone();
        minus[i] -= h;
        let fp = f(&Tensor::new(x.shape().to_vec(), plus)?)?;
        let fm = f(&Tensor::new(x.shape().to_vec(), minus)?)?;
        grad.push((fp - fm) / (2.0 * h));
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// Max elementwise relative error `|a-b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::rc::Rc;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn sigmoid_softmax_cumsum_values() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::scalar(0.0));
        let s = tape.sigmoid(z);
        assert_eq!(tape.value(s).item(), 0.5);

        let v = tape.constant(Tensor::vector(vec![0.0, 0.0, 1.0]));
        let p = tape.softmax(v);
        let expect = [0.211941, 0.211941, 0.576117];
        for (a, b) in tape.value(p).data().iter().zip(expect) {
            assert!(close(*a, b, 1e-6));
        }
        let c = tape.cumsum(p);
        let expect = [0.211941, 0.423883, 1.0];
        for (a, b) in tape.value(c).data().iter().zip(expect) {
            assert!(close(*a, b, 1e-6));
        }
        let exact = tape.simplex_cumsum(p);
        assert_eq!(tape.value(exact).data()[2], 1.0);
    }

    #[test]
    fn reparam_examples() {
        let mut tape = Tape::new();
        let mean = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let std = tape.leaf(Tensor::scalar(0.0));
        let out = tape
            .gaussian_reparam(mean, std, &Tensor::vector(vec![5.0, 5.0]))
            .unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 2.0]);

        let mut tape = Tape::new();
        let mean = tape.constant(Tensor::vector(vec![0.0, 0.0]));
        let std = tape.leaf(Tensor::vector(vec![2.0, 2.0]));
        let noise = Tensor::vector(vec![1.0, -1.0]);
        let out = tape.gaussian_reparam(mean, std, &noise).unwrap();
        assert_eq!(tape.value(out).data(), &[2.0, -2.0]);
        // d(out_i)/d(std_i) = noise_i; probe each output separately.
        for i in 0..2 {
            let mut seed = vec![0.0; 2];
            seed[i] = 1.0;
            let g = tape.backward_seeded(out, &Tensor::vector(seed)).unwrap();
            assert_eq!(g.get(std).unwrap().data()[i], noise.data()[i]);
        }
    }

    #[test]
    fn polynomial_and_sigmoid_derivatives() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::scalar(3.0));
        let y = tape.square(w);
        assert_eq!(tape.backward(y).unwrap().get(w).unwrap().item(), 6.0);

        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::scalar(0.0));
        let y = tape.sigmoid(w);
        assert_eq!(tape.backward(y).unwrap().get(w).unwrap().item(), 0.25);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::scalar(2.0));
        let a = tape.mul(w, w).unwrap();
        let b = tape.add(a, w).unwrap();
        let g = tape.backward(b).unwrap();
        assert_eq!(g.get(w).unwrap().item(), 5.0);
    }

    #[test]
    fn errors_are_structured() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("matmul"), "{err}");
        let neg = tape.constant(Tensor::vector(vec![1.0, -1.0]));
        assert!(matches!(tape.sqrt(neg), Err(crate::Error::Domain { .. })));
        let v = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(v), Err(crate::Error::Usage(_))));
    }

    #[test]
    fn checkpoint_is_transparent_for_square() {
        let x0 = Tensor::vector(vec![0.3, -1.2, 2.0]);
        let recipe: Recipe = Rc::new(|t: &mut Tape, xs: &[Var]| Ok(t.square(xs[0])));

        let mut plain = Tape::new();
        let x = plain.leaf(x0.clone());
        let y = plain.square(x);
        let l = plain.sum(y);
        let g_plain = plain.backward(l).unwrap();

        let mut ck = Tape::new();
        let x2 = ck.leaf(x0);
        let y2 = ck.checkpoint(recipe, &[x2]).unwrap();
        let l2 = ck.sum(y2);
        assert_eq!(ck.value(y2), plain.value(y));
        let g_ck = ck.backward(l2).unwrap();
        assert_eq!(g_ck.get(x2).unwrap(), g_plain.get(x).unwrap());
    }

    #[test]
    fn nondeterministic_recipe_is_detected() {
        let counter = Rc::new(std::cell::Cell::new(0.0));
        let c = counter.clone();
        let recipe: Recipe = Rc::new(move |t: &mut Tape, xs: &[Var]| {
            c.set(c.get() + 1.0);
            let k = c.get();
            Ok(t.scale(xs[0], k))
        });
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.0));
        let y = tape.checkpoint(recipe, &[x]).unwrap();
        assert!(matches!(tape.backward(y), Err(crate::Error::Integrity(_))));
    }
}
