use ndarray::{concatenate, s, Array1, Array2, Axis};

use super::{join, sigmoid, Module, Param, Param1, Param2, TensorMut, TensorView};
use crate::rng::Rng;

/// Single-direction LSTM with separate input-side and hidden-side biases.
/// Gate blocks are ordered input, forget, cell, output.
#[derive(Debug, Clone, PartialEq)]
pub struct Lstm {
    /// `[in, 4H]`
    pub weight_ih: Param2,
    /// `[H, 4H]`
    pub weight_hh: Param2,
    pub bias_ih: Param1,
    pub bias_hh: Param1,
}

#[derive(Debug, Clone)]
pub struct LstmCache {
    x: Array2<f64>,
    /// Activated gates per step, `[T, 4H]`.
    gates: Array2<f64>,
    /// Cell states; row 0 is the initial zero state, `[T+1, H]`.
    c: Array2<f64>,
    /// Hidden states; row 0 is the initial zero state, `[T+1, H]`.
    h: Array2<f64>,
}

impl LstmCache {
    pub fn last_hidden(&self) -> Array1<f64> {
        self.h.row(self.h.nrows() - 1).to_owned()
    }
}

impl Lstm {
    pub fn zeros(inputs: usize, hidden: usize) -> Self {
        Self {
            weight_ih: Param::zeros((inputs, 4 * hidden)),
            weight_hh: Param::zeros((hidden, 4 * hidden)),
            bias_ih: Param::zeros(4 * hidden),
            bias_hh: Param::zeros(4 * hidden),
        }
    }

    pub fn hidden(&self) -> usize {
        self.weight_hh.value.nrows()
    }

    /// Uniform(-1/sqrt(H), 1/sqrt(H)) on every tensor.
    pub fn init(&mut self, rng: &mut Rng) {
        let bound = 1.0 / (self.hidden() as f64).sqrt();
        self.weight_ih.init_uniform(rng, bound);
        self.weight_hh.init_uniform(rng, bound);
        self.bias_ih.init_uniform(rng, bound);
        self.bias_hh.init_uniform(rng, bound);
    }

    /// Runs over all rows of `x` from a zero state.
    pub fn forward(&self, x: &Array2<f64>) -> LstmCache {
        let hsz = self.hidden();
        let steps = x.nrows();
        let pre = x.dot(&self.weight_ih.value) + &self.bias_ih.value + &self.bias_hh.value;
        let mut gates = Array2::zeros((steps, 4 * hsz));
        let mut c = Array2::<f64>::zeros((steps + 1, hsz));
        let mut h = Array2::<f64>::zeros((steps + 1, hsz));
        for t in 0..steps {
            let z = &pre.row(t) + &h.row(t).dot(&self.weight_hh.value);
            let mut g = gates.row_mut(t);
            for k in 0..hsz {
                let i = sigmoid(z[k]);
                let f = sigmoid(z[hsz + k]);
                let cell = z[2 * hsz + k].tanh();
                let o = sigmoid(z[3 * hsz + k]);
                g[k] = i;
                g[hsz + k] = f;
                g[2 * hsz + k] = cell;
                g[3 * hsz + k] = o;
                let ct = f * c[[t, k]] + i * cell;
                c[[t + 1, k]] = ct;
                h[[t + 1, k]] = o * ct.tanh();
            }
        }
        LstmCache {
            x: x.clone(),
            gates,
            c,
            h,
        }
    }

    /// `dh` holds `dL/dh_t` for every step (`[T, H]`). Returns `dL/dx`.
    pub fn backward(&mut self, cache: &LstmCache, dh: &Array2<f64>) -> Array2<f64> {
        let hsz = self.hidden();
        let steps = cache.x.nrows();
        let mut dz = Array2::zeros((steps, 4 * hsz));
        let mut dh_next = Array1::<f64>::zeros(hsz);
        let mut dc_next = Array1::<f64>::zeros(hsz);
        for t in (0..steps).rev() {
            let g = cache.gates.row(t);
            let mut dzt = dz.row_mut(t);
            for k in 0..hsz {
                let (i, f, cell, o) = (g[k], g[hsz + k], g[2 * hsz + k], g[3 * hsz + k]);
                let tc = cache.c[[t + 1, k]].tanh();
                let dht = dh[[t, k]] + dh_next[k];
                let dc = dc_next[k] + dht * o * (1.0 - tc * tc);
                dzt[k] = dc * cell * i * (1.0 - i);
                dzt[hsz + k] = dc * cache.c[[t, k]] * f * (1.0 - f);
                dzt[2 * hsz + k] = dc * i * (1.0 - cell * cell);
                dzt[3 * hsz + k] = dht * tc * o * (1.0 - o);
                dc_next[k] = dc * f;
            }
            dh_next = dz.row(t).dot(&self.weight_hh.value.t());
        }
        let h_prev = cache.h.slice(s![..steps, ..]);
        ndarray::linalg::general_mat_mul(1.0, &h_prev.t(), &dz, 1.0, &mut self.weight_hh.grad);
        ndarray::linalg::general_mat_mul(1.0, &cache.x.t(), &dz, 1.0, &mut self.weight_ih.grad);
        let db = dz.sum_axis(Axis(0));
        self.bias_ih.grad += &db;
        self.bias_hh.grad += &db;
        dz.dot(&self.weight_ih.value.t())
    }

    fn visit_suffixed(&self, prefix: &str, suffix: &str, f: &mut dyn FnMut(TensorView<'_>)) {
        self.weight_ih.visit(&join(prefix, &format!("weight_ih_l0{suffix}")), f);
        self.weight_hh.visit(&join(prefix, &format!("weight_hh_l0{suffix}")), f);
        self.bias_ih.visit(&join(prefix, &format!("bias_ih_l0{suffix}")), f);
        self.bias_hh.visit(&join(prefix, &format!("bias_hh_l0{suffix}")), f);
    }

    fn visit_suffixed_mut(&mut self, prefix: &str, suffix: &str, f: &mut dyn FnMut(TensorMut<'_>)) {
        self.weight_ih.visit_mut(&join(prefix, &format!("weight_ih_l0{suffix}")), f);
        self.weight_hh.visit_mut(&join(prefix, &format!("weight_hh_l0{suffix}")), f);
        self.bias_ih.visit_mut(&join(prefix, &format!("bias_ih_l0{suffix}")), f);
        self.bias_hh.visit_mut(&join(prefix, &format!("bias_hh_l0{suffix}")), f);
    }
}

/// One-layer bidirectional LSTM read out as the concatenation of the final
/// forward state and the final (i.e. position 0) backward state.
#[derive(Debug, Clone, PartialEq)]
pub struct BiLstm {
    pub forward_dir: Lstm,
    pub reverse_dir: Lstm,
}

#[derive(Debug, Clone)]
pub struct BiLstmCache {
    forward_dir: LstmCache,
    reverse_dir: LstmCache,
}

impl BiLstm {
    pub fn zeros(inputs: usize, hidden: usize) -> Self {
        Self {
            forward_dir: Lstm::zeros(inputs, hidden),
            reverse_dir: Lstm::zeros(inputs, hidden),
        }
    }

    pub fn init(&mut self, rng: &mut Rng) {
        self.forward_dir.init(rng);
        self.reverse_dir.init(rng);
    }

    pub fn hidden(&self) -> usize {
        self.forward_dir.hidden()
    }

    /// Returns the `[2H]` readout for the sequence `x` (`[T, in]`, `T >= 1`).
    pub fn forward(&self, x: &Array2<f64>) -> (Array1<f64>, BiLstmCache) {
        let reversed = x.slice(s![..;-1, ..]).to_owned();
        let fw = self.forward_dir.forward(x);
        let rv = self.reverse_dir.forward(&reversed);
        let out = concatenate![Axis(0), fw.last_hidden(), rv.last_hidden()];
        (
            out,
            BiLstmCache {
                forward_dir: fw,
                reverse_dir: rv,
            },
        )
    }

    pub fn backward(&mut self, cache: &BiLstmCache, d_out: &Array1<f64>) -> Array2<f64> {
        let hsz = self.hidden();
        let steps = cache.forward_dir.x.nrows();
        let mut dh = Array2::zeros((steps, hsz));
        dh.row_mut(steps - 1).assign(&d_out.slice(s![..hsz]));
        let dx_fw = self.forward_dir.backward(&cache.forward_dir, &dh);
        dh.row_mut(steps - 1).assign(&d_out.slice(s![hsz..]));
        let dx_rv = self.reverse_dir.backward(&cache.reverse_dir, &dh);
        dx_fw + dx_rv.slice(s![..;-1, ..])
    }
}

impl Module for BiLstm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(TensorView<'_>)) {
        self.forward_dir.visit_suffixed(prefix, "", f);
        self.reverse_dir.visit_suffixed(prefix, "_reverse", f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(TensorMut<'_>)) {
        self.forward_dir.visit_suffixed_mut(prefix, "", f);
        self.reverse_dir.visit_suffixed_mut(prefix, "_reverse", f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn readout_loss(lstm: &BiLstm, x: &Array2<f64>, w: &Array1<f64>) -> f64 {
        lstm.forward(x).0.dot(w)
    }

    #[test]
    fn parameter_count_with_two_bias_vectors() {
        let lstm = BiLstm::zeros(768, 128);
        assert_eq!(lstm.num_parameters(), 919_552);
        let names: Vec<String> = lstm.manifest().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names[0], "weight_ih_l0");
        assert_eq!(names[7], "bias_hh_l0_reverse");
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = crate::rng::substream(11, "lstm-test");
        let mut lstm = BiLstm::zeros(3, 4);
        lstm.init(&mut rng);
        let x = Array2::from_shape_fn((5, 3), |(i, j)| ((i * 3 + j) as f64 * 0.37).sin());
        let w = Array1::from_shape_fn(8, |i| (i as f64 * 0.9).cos());
        let (_, cache) = lstm.forward(&x);
        let mut graded = lstm.clone();
        let dx = graded.backward(&cache, &w);

        let eps = 1e-6;
        for idx in 0..x.len() {
            let (r, c) = (idx / 3, idx % 3);
            let mut xp = x.clone();
            xp[[r, c]] += eps;
            let mut xm = x.clone();
            xm[[r, c]] -= eps;
            let num = (readout_loss(&lstm, &xp, &w) - readout_loss(&lstm, &xm, &w)) / (2.0 * eps);
            assert!((num - dx[[r, c]]).abs() < 1e-8, "dx[{r},{c}] {num} vs {}", dx[[r, c]]);
        }

        let mut grads = Vec::new();
        graded.visit("", &mut |t| grads.push((t.name.to_string(), t.grad.to_vec())));
        for (name, analytic) in grads {
            for (k, &a) in analytic.iter().enumerate() {
                let perturbed = |delta: f64| {
                    let mut l = lstm.clone();
                    l.visit_mut("", &mut |t| {
                        if t.name == name {
                            t.value[k] += delta;
                        }
                    });
                    readout_loss(&l, &x, &w)
                };
                let num = (perturbed(eps) - perturbed(-eps)) / (2.0 * eps);
                assert!((num - a).abs() < 1e-8, "{name}[{k}]: {num} vs {a}");
            }
        }
    }
}
