//! Minimal layers with explicit forward/backward passes.
//!
//! Weights are row-major `[in, out]` so a layer computes `x · W + b` on a
//! `[rows, in]` input. Backward passes accumulate into each parameter's
//! gradient buffer and return the gradient with respect to the input.

mod lstm;

pub use lstm::{BiLstm, BiLstmCache, Lstm};

use ndarray::{Array, Array1, Array2, Axis, Dimension, Ix1, Ix2, Zip};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::rng::Rng;

/// A tensor together with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<D: Dimension> {
    pub value: Array<f64, D>,
    pub grad: Array<f64, D>,
}

pub type Param1 = Param<Ix1>;
pub type Param2 = Param<Ix2>;

impl<D: Dimension> Param<D> {
    pub fn zeros<Sh: ndarray::ShapeBuilder<Dim = D> + Clone>(shape: Sh) -> Self {
        Self {
            value: Array::zeros(shape.clone()),
            grad: Array::zeros(shape),
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn fill(&mut self, v: f64) {
        self.value.fill(v);
    }

    /// Normal(0, std) truncated at two standard deviations.
    pub fn init_truncated_normal(&mut self, rng: &mut Rng, std: f64) {
        let normal = Normal::new(0.0, std).expect("std is positive");
        self.value.map_inplace(|v| {
            *v = loop {
                let x: f64 = normal.sample(rng);
                if x.abs() <= 2.0 * std {
                    break x;
                }
            }
        });
    }

    pub fn init_uniform(&mut self, rng: &mut Rng, bound: f64) {
        self.value.map_inplace(|v| *v = rng.random_range(-bound..=bound));
    }

    pub fn visit(&self, name: &str, f: &mut dyn FnMut(TensorView<'_>)) {
        f(TensorView {
            name,
            shape: self.value.shape(),
            value: self.value.as_slice().expect("parameters are contiguous"),
            grad: self.grad.as_slice().expect("gradients are contiguous"),
        });
    }

    pub fn visit_mut(&mut self, name: &str, f: &mut dyn FnMut(TensorMut<'_>)) {
        let shape = self.value.shape().to_vec();
        f(TensorMut {
            name,
            shape: &shape,
            value: self.value.as_slice_mut().expect("parameters are contiguous"),
            grad: self.grad.as_slice_mut().expect("gradients are contiguous"),
        });
    }
}

/// Read-only view of one named parameter.
pub struct TensorView<'a> {
    pub name: &'a str,
    pub shape: &'a [usize],
    pub value: &'a [f64],
    pub grad: &'a [f64],
}

/// Mutable view of one named parameter.
pub struct TensorMut<'a> {
    pub name: &'a str,
    pub shape: &'a [usize],
    pub value: &'a mut [f64],
    pub grad: &'a mut [f64],
}

/// Anything that owns named parameters. Visit order is stable and defines
/// the tensor order of checkpoints.
pub trait Module {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(TensorView<'_>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(TensorMut<'_>));

    fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |t| n += t.value.len());
        n
    }

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |t| t.grad.fill(0.0));
    }

    /// `(name, shape)` of every tensor in visit order.
    fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        self.visit("", &mut |t| out.push((t.name.to_string(), t.shape.to_vec())));
        out
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Fully connected layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `[in, out]`
    pub weight: Param2,
    pub bias: Param1,
}

impl Linear {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Param::zeros((inputs, outputs)),
            bias: Param::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.value.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.value.ncols()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight.value) + &self.bias.value
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&mut self, x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
        self.accumulate(x, dy);
        dy.dot(&self.weight.value.t())
    }

    /// Parameter gradients only; for layers whose input needs no gradient.
    pub fn accumulate(&mut self, x: &Array2<f64>, dy: &Array2<f64>) {
        ndarray::linalg::general_mat_mul(1.0, &x.t(), dy, 1.0, &mut self.weight.grad);
        self.bias.grad += &dy.sum_axis(Axis(0));
    }
}

impl Module for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(TensorView<'_>)) {
        self.weight.visit(&join(prefix, "weight"), f);
        self.bias.visit(&join(prefix, "bias"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(TensorMut<'_>)) {
        self.weight.visit_mut(&join(prefix, "weight"), f);
        self.bias.visit_mut(&join(prefix, "bias"), f);
    }
}

/// Row-wise layer normalization with learned scale and shift.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Param1,
    pub beta: Param1,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize, eps: f64) -> Self {
        let mut gamma = Param::zeros(dim);
        gamma.fill(1.0);
        Self {
            gamma,
            beta: Param::zeros(dim),
            eps,
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LayerNormCache) {
        let d = x.ncols() as f64;
        let mean = x.sum_axis(Axis(1)) / d;
        let centered = x - &mean.view().insert_axis(Axis(1));
        let var = centered.mapv(|v| v * v).sum_axis(Axis(1)) / d;
        let inv_std = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        let xhat = centered * inv_std.view().insert_axis(Axis(1));
        let y = &xhat * &self.gamma.value + &self.beta.value;
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: &LayerNormCache, dy: &Array2<f64>) -> Array2<f64> {
        self.gamma.grad += &(dy * &cache.xhat).sum_axis(Axis(0));
        self.beta.grad += &dy.sum_axis(Axis(0));
        let dxhat = dy * &self.gamma.value;
        let d = dy.ncols() as f64;
        let sum_dxhat = dxhat.sum_axis(Axis(1));
        let sum_dxhat_xhat = (&dxhat * &cache.xhat).sum_axis(Axis(1));
        let mut dx = dxhat * d;
        Zip::from(dx.rows_mut())
            .and(cache.xhat.rows())
            .and(&sum_dxhat)
            .and(&sum_dxhat_xhat)
            .and(&cache.inv_std)
            .for_each(|mut row, xhat, &s1, &s2, &inv| {
                Zip::from(&mut row)
                    .and(&xhat)
                    .for_each(|v, &xh| *v = (*v - s1 - xh * s2) * inv / d);
            });
        dx
    }
}

impl Module for LayerNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(TensorView<'_>)) {
        self.gamma.visit(&join(prefix, "weight"), f);
        self.beta.visit(&join(prefix, "bias"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(TensorMut<'_>)) {
        self.gamma.visit_mut(&join(prefix, "weight"), f);
        self.beta.visit_mut(&join(prefix, "bias"), f);
    }
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact (erf-based) GELU.
pub fn gelu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| 0.5 * v * (1.0 + libm::erf(v * std::f64::consts::FRAC_1_SQRT_2)))
}

/// Multiplies `dy` by GELU'(x).
pub fn gelu_backward(x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut dx = dy.clone();
    Zip::from(&mut dx).and(x).for_each(|d, &v| {
        let cdf = 0.5 * (1.0 + libm::erf(v * std::f64::consts::FRAC_1_SQRT_2));
        let pdf = FRAC_1_SQRT_2PI * (-0.5 * v * v).exp();
        *d *= cdf + v * pdf;
    });
    dx
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Numerically stable softmax of each row in place.
pub fn softmax_rows(x: &mut Array2<f64>) {
    for mut row in x.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// Given softmax output `p` and `dL/dp`, returns `dL/dlogits` row-wise.
pub fn softmax_backward(p: &Array2<f64>, dp: &Array2<f64>) -> Array2<f64> {
    let dot = (p * dp).sum_axis(Axis(1));
    let mut out = dp - &dot.insert_axis(Axis(1));
    out *= p;
    out
}

/// Inverted-dropout scale mask (`0` or `1/(1-p)`); `None` when inactive.
pub fn dropout_mask(rng: Option<&mut Rng>, shape: (usize, usize), p: f64) -> Option<Array2<f64>> {
    let rng = rng?;
    if p <= 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - p);
    Some(Array2::from_shape_simple_fn(shape, || {
        if rng.random::<f64>() < p {
            0.0
        } else {
            keep
        }
    }))
}

pub fn apply_mask(x: &mut Array2<f64>, mask: Option<&Array2<f64>>) {
    if let Some(m) = mask {
        *x *= m;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn loss(y: &Array2<f64>, w: &Array2<f64>) -> f64 {
        (y * w).sum()
    }

    /// Central differences of `f` with respect to every entry of `x`.
    fn numeric_grad(x: &Array2<f64>, f: impl Fn(&Array2<f64>) -> f64) -> Array2<f64> {
        let eps = 1e-5;
        let mut g = Array2::zeros(x.raw_dim());
        for idx in 0..x.len() {
            let (r, c) = (idx / x.ncols(), idx % x.ncols());
            let mut xp = x.clone();
            xp[[r, c]] += eps;
            let mut xm = x.clone();
            xm[[r, c]] -= eps;
            g[[r, c]] = (f(&xp) - f(&xm)) / (2.0 * eps);
        }
        g
    }

    fn assert_close(a: &Array2<f64>, b: &Array2<f64>, tol: f64) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())), "{x} vs {y}");
        }
    }

    #[test]
    fn layer_norm_input_gradient() {
        let x = array![[0.3, -1.2, 2.0, 0.5], [1.0, 1.5, -0.5, 0.0]];
        let weights = array![[0.1, 0.7, -0.3, 0.2], [-1.0, 0.4, 0.9, 0.5]];
        let mut ln = LayerNorm::new(4, 1e-5);
        ln.gamma.value = array![1.0, 0.5, 2.0, -1.0];
        ln.beta.value = array![0.0, 0.1, 0.2, 0.3];
        let (_, cache) = ln.forward(&x);
        let dx = ln.backward(&cache, &weights);
        let num = numeric_grad(&x, |x| loss(&ln.forward(x).0, &weights));
        assert_close(&dx, &num, 1e-7);
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let ln = LayerNorm::new(3, 0.0);
        let (y, _) = ln.forward(&array![[1.0, 2.0, 3.0]]);
        assert!((y.sum()).abs() < 1e-12);
        assert!((y.mapv(|v| v * v).sum() / 3.0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gelu_gradient() {
        let x = array![[-3.0, -0.5, 0.0, 0.7, 2.5]];
        let ones = Array2::ones(x.raw_dim());
        let num = numeric_grad(&x, |x| gelu(x).sum());
        assert_close(&gelu_backward(&x, &ones), &num, 1e-8);
        assert!((gelu(&array![[1.0]])[[0, 0]] - 0.841_344_746_068_542_9).abs() < 1e-12);
    }

    #[test]
    fn linear_gradients() {
        let x = array![[0.3, -1.2], [1.0, 0.5], [0.2, 0.2]];
        let mut lin = Linear::zeros(2, 3);
        lin.weight.value = array![[0.1, 0.2, 0.3], [-0.4, 0.5, -0.6]];
        lin.bias.value = array![0.01, 0.02, 0.03];
        let w = array![[1.0, 2.0, -1.0], [0.5, 0.1, 0.2], [0.3, -0.3, 0.9]];
        let dx = lin.backward(&x, &w);
        assert_close(&dx, &numeric_grad(&x, |x| loss(&lin.forward(x), &w)), 1e-8);
        let base = lin.clone();
        let num_w = numeric_grad(&base.weight.value, |wv| {
            let mut l = base.clone();
            l.weight.value = wv.clone();
            loss(&l.forward(&x), &w)
        });
        assert_close(&lin.weight.grad, &num_w, 1e-8);
        assert_eq!(lin.bias.grad, w.sum_axis(Axis(0)));
    }

    #[test]
    fn softmax_gradient() {
        let logits = array![[0.2, -1.0, 3.0], [0.0, 0.0, 0.0]];
        let w = array![[1.0, 0.3, -0.2], [0.5, 0.5, 2.0]];
        let mut p = logits.clone();
        softmax_rows(&mut p);
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-15);
        }
        let num = numeric_grad(&logits, |l| {
            let mut p = l.clone();
            softmax_rows(&mut p);
            loss(&p, &w)
        });
        assert_close(&softmax_backward(&p, &w), &num, 1e-8);
    }

    #[test]
    fn dropout_scales_kept_units() {
        let mut rng = crate::rng::substream(1, "dropout");
        let m = dropout_mask(Some(&mut rng), (100, 100), 0.1).unwrap();
        let kept = m.iter().filter(|&&v| v > 0.0).count();
        assert!((8_800..9_200).contains(&kept));
        assert!(m.iter().all(|&v| v == 0.0 || (v - 1.0 / 0.9).abs() < 1e-15));
        assert!(dropout_mask(None, (2, 2), 0.1).is_none());
        assert!(dropout_mask(Some(&mut rng), (2, 2), 0.0).is_none());
    }
}
