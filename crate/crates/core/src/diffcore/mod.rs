//! Reverse-mode differentiation over dense `f64` arrays.
//!
//! Every learnable quantity in the crate flows through a [`Tape`]: values are
//! recorded as they are computed and [`Tape::backward`] replays the record in
//! reverse creation order. The tape is rebuilt for every training step.
//!
//! ```
//! use pointrecon::diffcore::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.var(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
//! let loss = x.square().sum();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

mod conv;
mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_at, relative_error, GradCheckReport};
pub use tape::{CustomOp, Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op} is undefined at operand {value}")]
    Domain { op: &'static str, value: f64 },
    #[error("backward needs a single-element root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
    }

    #[test]
    fn add_componentwise() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::from_vec(vec![1.0, 2.0]));
        let b = tape.constant(Tensor::from_vec(vec![3.0, 4.0]));
        assert_eq!(a.add(b).unwrap().value().data(), &[4.0, 6.0]);
    }

    #[test]
    fn sigmoid_at_zero() {
        let tape = Tape::new();
        let x = tape.var(Tensor::scalar(0.0));
        let y = x.sigmoid();
        assert_eq!(y.item(), 0.5);
        let g = tape.backward(y).unwrap();
        assert!((g.get(x).unwrap().item() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn identity_matmul() {
        let tape = Tape::new();
        let eye = tape.constant(Tensor::new(&[3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap());
        let a = Tensor::new(&[3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let av = tape.constant(a.clone());
        assert_eq!(*eye.matmul(av).unwrap().value(), a);
    }

    #[test]
    fn square_sum_gradient() {
        let tape = Tape::new();
        let x = tape.var(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let g = tape.backward(x.mul(x).unwrap().sum()).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[4]));
        match a.add(b) {
            Err(DiffError::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![4]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn domain_errors() {
        let tape = Tape::new();
        let x = tape.var(Tensor::from_vec(vec![1.0, 0.0]));
        assert!(matches!(x.log(), Err(DiffError::Domain { .. })));
        let y = tape.var(Tensor::from_vec(vec![1.0, 1.0]));
        assert!(matches!(y.div(x), Err(DiffError::Domain { .. })));
        assert!(x.add_scalar(1.0).log().is_ok());
    }

    #[test]
    fn non_scalar_root_rejected() {
        let tape = Tape::new();
        let x = tape.var(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(DiffError::NonScalarRoot(_))));
    }

    #[test]
    fn fan_out_accumulates() {
        let tape = Tape::new();
        let x = tape.var(Tensor::scalar(3.0));
        // y = x*x + 2x  -> dy/dx = 2x + 2 = 8
        let y = x.mul(x).unwrap().add(x.mul_scalar(2.0)).unwrap();
        assert_eq!(tape.backward(y).unwrap().get(x).unwrap().item(), 8.0);
    }

    #[test]
    fn empty_and_cleared_tape() {
        let mut tape = Tape::new();
        assert!(tape.is_empty());
        {
            let x = tape.var(Tensor::scalar(1.0));
            let _ = x.exp();
        }
        assert_eq!(tape.len(), 2);
        tape.clear();
        assert!(tape.is_empty());
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = Tensor::from_vec(vec![0.3, -0.7]);
        let r = grad_check(|t, _x| Ok(t.scalar(4.0)), &x, 1e-4, 1e-9).unwrap();
        assert!(r.passed);
        assert_eq!(r.max_abs_error, 0.0);
    }

    #[test]
    fn backward_wrt_skips_other_leaves() {
        let tape = Tape::new();
        let a = tape.var(Tensor::scalar(2.0));
        let b = tape.var(Tensor::scalar(5.0));
        let y = a.mul(b).unwrap();
        let g = tape.backward_wrt(y, &[a]).unwrap();
        assert_eq!(g.get(a).unwrap().item(), 5.0);
        assert!(g.get(b).is_none());
    }

    #[test]
    fn detach_stops_gradient() {
        let tape = Tape::new();
        let x = tape.var(Tensor::scalar(2.0));
        let y = x.mul(x.detach()).unwrap();
        assert_eq!(tape.backward(y).unwrap().get(x).unwrap().item(), 2.0);
    }

    #[test]
    fn min_last_breaks_ties_low() {
        let tape = Tape::new();
        let x = tape.var(Tensor::new(&[2, 3], vec![1., 0., 0., 5., 4., 6.]).unwrap());
        let (m, arg) = x.min_last().unwrap();
        assert_eq!(arg, vec![1, 1]);
        assert_eq!(m.value().data(), &[0., 4.]);
        let g = tape.backward(m.sum()).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0., 1., 0., 0., 1., 0.]);
    }

    type Unary = for<'t> fn(&'t Tape, Var<'t>) -> Result<Var<'t>, DiffError>;

    /// Every primitive against central differences on random smooth inputs.
    #[test]
    fn primitives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cases: Vec<(&str, Unary, Vec<usize>, f64, f64)> = vec![
            ("add", |t, x| {
                let c = t.constant(Tensor::from_vec(vec![0.5, -1.0, 2.0]));
                Ok(x.add(c)?.square().sum())
            }, vec![2, 3], -1.0, 1.0),
            ("sub", |t, x| {
                let c = t.constant(Tensor::from_vec(vec![0.5, -1.0, 2.0]));
                Ok(c.sub(x)?.square().sum())
            }, vec![2, 3], -1.0, 1.0),
            ("mul", |_t, x| {
                let r = x.narrow(0, 0, 1)?;
                Ok(x.mul(r)?.sum())
            }, vec![2, 3], -1.0, 1.0),
            ("div", |_t, x| {
                let d = x.narrow(0, 1, 1)?;
                Ok(x.div(d)?.sum())
            }, vec![2, 3], 0.5, 2.0),
            ("matmul", |_t, x| {
                let xt = x.t()?;
                Ok(x.matmul(xt)?.square().sum())
            }, vec![3, 4], -1.0, 1.0),
            ("conv2d", |t, x| {
                let w = t.constant(Tensor::new(&[2, 2, 3, 3], (0..36).map(|i| (i as f64 * 0.37).sin()).collect())?);
                let b = t.constant(Tensor::from_vec(vec![0.1, -0.3]));
                Ok(x.conv2d(w, b, 2, 1)?.square().mean())
            }, vec![1, 2, 5, 5], -1.0, 1.0),
            ("conv2d weight", |t, w| {
                let x = t.constant(Tensor::new(&[2, 1, 4, 4], (0..32).map(|i| (i as f64 * 0.71).cos()).collect())?);
                let b = t.constant(Tensor::from_vec(vec![0.2]));
                Ok(x.conv2d(w, b, 1, 1)?.square().sum())
            }, vec![1, 1, 3, 3], -1.0, 1.0),
            ("leaky_relu", |_t, x| Ok(x.leaky_relu(0.01).square().sum()), vec![6], 0.1, 1.0),
            ("relu", |_t, x| Ok(x.relu().square().sum()), vec![6], 0.1, 1.0),
            ("sigmoid", |_t, x| Ok(x.sigmoid().sum()), vec![6], -3.0, 3.0),
            ("tanh", |_t, x| Ok(x.tanh().sum()), vec![6], -2.0, 2.0),
            ("exp", |_t, x| Ok(x.exp().sum()), vec![6], -1.0, 1.0),
            ("log", |_t, x| Ok(x.log()?.sum()), vec![6], 0.5, 3.0),
            ("pow", |_t, x| Ok(x.pow(1.5)?.sum()), vec![6], 0.5, 3.0),
            ("sin_cos", |_t, x| Ok(x.sin().mul(x.cos())?.sum()), vec![6], -3.0, 3.0),
            ("abs", |_t, x| Ok(x.abs().square().sum()), vec![6], 0.2, 1.0),
            ("clamp", |_t, x| Ok(x.clamp(-0.5, 0.5).square().sum()), vec![6], -0.4, 0.4),
            ("mean", |_t, x| Ok(x.square().mean()), vec![6], -1.0, 1.0),
            ("sum_axis", |_t, x| Ok(x.sum_axis(1)?.square().sum()), vec![2, 3, 2], -1.0, 1.0),
            ("min", |_t, x| Ok(x.min_last()?.0.square().sum()), vec![3, 4], -1.0, 1.0),
            ("concat", |t, x| {
                let y = x.mul_scalar(2.0);
                Ok(t.concat(&[x, y], 1)?.square().sum())
            }, vec![2, 2], -1.0, 1.0),
            ("reshape_broadcast", |_t, x| {
                let r = x.reshape(&[3, 1])?.broadcast_to(&[3, 4])?;
                Ok(r.mul(r)?.sum())
            }, vec![3], -1.0, 1.0),
            ("index_select", |_t, x| Ok(x.index_select(&[2, 0, 2])?.square().sum()), vec![3, 2], -1.0, 1.0),
        ];
        for (name, f, shape, lo, hi) in cases {
            let x = random(&shape, &mut rng, lo, hi);
            let r = grad_check(f, &x, 1e-5, 1e-6).unwrap();
            assert!(r.passed, "{name}: {r:?}");
        }
    }

    #[test]
    fn backward_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0 = random(&[5], &mut rng, -1.0, 1.0);
        let grad_of = |a: f64, b: f64| {
            let tape = Tape::new();
            let x = tape.var(x0.clone());
            let f = x.sin().sum();
            let g = x.square().sum();
            let root = f.mul_scalar(a).add(g.mul_scalar(b)).unwrap();
            tape.backward(root).unwrap().get_or_zeros(x)
        };
        let (f, g, combo) = (grad_of(1.0, 0.0), grad_of(0.0, 1.0), grad_of(2.5, -0.75));
        for i in 0..5 {
            let expect = 2.5 * f.data()[i] - 0.75 * g.data()[i];
            assert!((combo.data()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x0 = random(&[2, 3, 8, 8], &mut rng, -1.0, 1.0);
        let w0 = random(&[4, 3, 3, 3], &mut rng, -1.0, 1.0);
        let run = || {
            let tape = Tape::new();
            let x = tape.constant(x0.clone());
            let w = tape.var(w0.clone());
            let b = tape.var(Tensor::zeros(&[4]));
            let y = x.conv2d(w, b, 2, 1).unwrap().tanh().sum();
            y.item().to_bits()
        };
        assert_eq!(run(), run());
    }
}
