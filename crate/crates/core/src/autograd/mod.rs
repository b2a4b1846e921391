//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Every backward rule is itself written in terms of differentiable ops, so
//! gradients can be differentiated again (`grad(.., create_graph = true)`).
//! The gradient penalty relies on this.

pub mod kernels;
mod tensor;
mod var;

pub use tensor::Tensor;
pub use var::{backward, grad, grad_enabled, no_grad, Gradients, Var};

/// Central finite-difference estimate of `d f / d x` for a scalar function.
pub fn finite_difference(x: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut out = vec![0.0; x.numel()];
    let mut probe = x.clone();
    for (i, o) in out.iter_mut().enumerate() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        *o = (up - down) / (2.0 * h);
    }
    Tensor::new(x.shape(), out)
}

/// Largest relative error `|a - b| / max(|a|, |b|, floor)` between two tensors.
pub fn max_relative_error(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    assert_eq!(a.shape(), b.shape(), "relative error shape mismatch");
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: &[usize], k: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|i| ((i as f64 + 1.0) * k).sin()).collect())
    }

    /// Checks first-order gradients of `f` at `x` against finite differences.
    fn check(x: Tensor, f: impl Fn(&Var) -> Var) {
        let v = Var::param(x.clone());
        let out = f(&v);
        let g = grad(&out, &[&v], false).remove(0);
        let fd = finite_difference(&x, 1e-6, |t| no_grad(|| f(&Var::constant(t.clone())).item()));
        let err = max_relative_error(g.value(), &fd, 1e-6);
        assert!(err < 1e-5, "relative error {err}");
    }

    #[test]
    fn elementwise_rules() {
        let x = ramp(&[2, 3], 0.7);
        check(x.clone(), |v| v.tanh().sum());
        check(x.clone(), |v| v.sigmoid().mul(&v.exp()).sum());
        check(x.clone(), |v| v.square().add_scalar(1.0).ln().sum());
        check(x.clone(), |v| v.square().add_scalar(0.5).sqrt().sum());
        check(x.clone(), |v| v.add_scalar(3.0).recip().sum());
        check(x.clone(), |v| v.leaky_relu(0.2).mul(v).sum());
        check(x.clone(), |v| v.abs().scale(2.0).sum());
        check(x, |v| v.neg().sub(&v.scale(0.3)).square().mean());
    }

    #[test]
    fn shape_rules() {
        let x = ramp(&[2, 3], 0.3);
        let w = Var::constant(ramp(&[2, 5, 3], 0.9));
        check(x.clone(), |v| v.reshape(&[2, 1, 3]).expand(&[2, 5, 3]).mul(&w).sum());
        check(x.clone(), |v| v.narrow(1, 1, 2).square().sum());
        check(x.clone(), |v| v.pad_axis(0, 1, 4).tanh().sum());
        check(x.clone(), |v| {
            Var::concat(&[v.clone(), v.square()], 1).sum_to(&[1, 6]).square().sum()
        });
        check(x, |v| v.softmax_col_rows().sum());
    }

    impl Var {
        fn softmax_col_rows(&self) -> Var {
            self.reshape(&[6, 1])
                .softmax_col()
                .mul(&Var::constant(ramp(&[6, 1], 1.1)))
        }
    }

    #[test]
    fn matmul_rules() {
        let b = Var::constant(ramp(&[3, 4], 0.4));
        let bt = Var::constant(ramp(&[4, 3], 0.4));
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let shape = if ta { [3, 2] } else { [2, 3] };
            let rhs = if tb { bt.clone() } else { b.clone() };
            check(ramp(&shape, 0.6), move |v| v.matmul_t(&rhs, ta, tb).tanh().sum());
        }
        let a = Var::constant(ramp(&[2, 3], 0.6));
        check(ramp(&[3, 4], 0.2), move |v| a.matmul(v).square().sum());
    }

    #[test]
    fn conv_and_resize_rules() {
        let w = Var::constant(ramp(&[2, 2, 3, 3], 0.35));
        check(ramp(&[1, 2, 5, 5], 0.45), move |v| v.conv2d(&w, 2, 1).tanh().sum());
        let x = Var::constant(ramp(&[2, 2, 5, 4], 0.45));
        check(ramp(&[3, 2, 3, 3], 0.35), move |v| x.conv2d(v, 1, 1).square().sum());
        check(ramp(&[1, 1, 3, 2], 0.8), |v| v.upsample2x().square().sum());
        check(ramp(&[4, 3], 0.5), |v| v.gather_rows(&[1, 3, 1]).square().sum());
    }

    #[test]
    fn double_backward_matches_finite_difference() {
        // d/dw of || d/dx f(x, w) ||^2 for a small conv critic.
        let x = Var::param(ramp(&[2, 1, 6, 6], 0.3));
        let w0 = ramp(&[3, 1, 3, 3], 0.71);
        let w2 = Var::constant(ramp(&[1, 3, 3, 3], 0.19));
        let penalty = |w: &Var| {
            let h = x.conv2d(w, 2, 1).tanh().upsample2x();
            let s = h.conv2d(&w2, 1, 1).leaky_relu(0.2).sum();
            let gx = grad(&s, &[&x], true).remove(0);
            gx.square().sum().sqrt().add_scalar(-1.0).square()
        };
        let w = Var::param(w0.clone());
        let gp = penalty(&w);
        let gw = grad(&gp, &[&w], false).remove(0);
        let fd = finite_difference(&w0, 1e-6, |t| penalty(&Var::param(t.clone())).item());
        let err = max_relative_error(gw.value(), &fd, 1e-6);
        assert!(err < 1e-5, "relative error {err}");
    }

    #[test]
    fn unreachable_input_has_zero_grad() {
        let a = Var::param(Tensor::ones(&[2]));
        let b = Var::param(Tensor::ones(&[2]));
        let g = grad(&a.square().sum(), &[&b], false).remove(0);
        assert_eq!(g.value().data(), &[0.0, 0.0]);
    }

    #[test]
    fn no_grad_records_nothing() {
        let a = Var::param(Tensor::ones(&[2]));
        let out = no_grad(|| a.square());
        assert!(!out.requires_grad());
        assert!(grad_enabled());
    }
}
