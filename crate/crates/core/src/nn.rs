//! Minimal dense layers with hand-written backward passes, shared by the
//! alignment encoders and the toy denoiser.

use rand::Rng;

/// Fully connected layer, `y = W x + b`, with `W` stored row-major
/// (`out_dim` rows of `in_dim`).
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self { in_dim, out_dim, weights: vec![0.0; in_dim * out_dim], bias: vec![0.0; out_dim] }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weights = (0..in_dim * out_dim).map(|_| rng.random_range(-limit..limit)).collect();
        Self { in_dim, out_dim, weights, bias: vec![0.0; out_dim] }
    }

    pub fn identity(dim: usize) -> Self {
        let mut d = Self::zeros(dim, dim);
        for i in 0..dim {
            d.weights[i * dim + i] = 1.0;
        }
        d
    }

    pub fn num_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim);
        self.weights
            .chunks_exact(self.in_dim)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &[f64], grad_out: &[f64], grad: &mut Dense) -> Vec<f64> {
        let mut grad_in = vec![0.0; self.in_dim];
        for (o, &g) in grad_out.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.bias[o] += g;
            let row = &self.weights[o * self.in_dim..(o + 1) * self.in_dim];
            let grow = &mut grad.weights[o * self.in_dim..(o + 1) * self.in_dim];
            for i in 0..self.in_dim {
                grow[i] += g * x[i];
                grad_in[i] += g * row[i];
            }
        }
        grad_in
    }

    pub fn write_params(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.weights);
        out.extend_from_slice(&self.bias);
    }

    /// Reads this layer's parameters from the front of `src`, returning the rest.
    pub fn read_params<'a>(&mut self, src: &'a [f64]) -> &'a [f64] {
        let (w, rest) = src.split_at(self.weights.len());
        let (b, rest) = rest.split_at(self.bias.len());
        self.weights.copy_from_slice(w);
        self.bias.copy_from_slice(b);
        rest
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&mut f64)) {
        self.weights.iter_mut().chain(self.bias.iter_mut()).for_each(f);
    }
}

/// Two-layer perceptron, `out = L2 tanh(L1 x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp2 {
    pub hidden: Dense,
    pub output: Dense,
}

pub struct Mlp2Trace {
    pub pre: Vec<f64>,
    pub act: Vec<f64>,
    pub out: Vec<f64>,
}

impl Mlp2 {
    pub fn glorot<R: Rng>(in_dim: usize, hidden: usize, out_dim: usize, rng: &mut R) -> Self {
        Self { hidden: Dense::glorot(in_dim, hidden, rng), output: Dense::glorot(hidden, out_dim, rng) }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            hidden: Dense::zeros(self.hidden.in_dim, self.hidden.out_dim),
            output: Dense::zeros(self.output.in_dim, self.output.out_dim),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.hidden.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.output.out_dim
    }

    pub fn forward(&self, x: &[f64]) -> Mlp2Trace {
        let pre = self.hidden.forward(x);
        let act: Vec<f64> = pre.iter().map(|v| v.tanh()).collect();
        let out = self.output.forward(&act);
        Mlp2Trace { pre, act, out }
    }

    pub fn backward(&self, x: &[f64], trace: &Mlp2Trace, grad_out: &[f64], grad: &mut Mlp2) -> Vec<f64> {
        let g_act = self.output.backward(&trace.act, grad_out, &mut grad.output);
        let g_pre: Vec<f64> = g_act.iter().zip(&trace.act).map(|(g, a)| g * (1.0 - a * a)).collect();
        self.hidden.backward(x, &g_pre, &mut grad.hidden)
    }

    pub fn num_params(&self) -> usize {
        self.hidden.num_params() + self.output.num_params()
    }

    pub fn write_params(&self, out: &mut Vec<f64>) {
        self.hidden.write_params(out);
        self.output.write_params(out);
    }

    pub fn read_params<'a>(&mut self, src: &'a [f64]) -> &'a [f64] {
        let rest = self.hidden.read_params(src);
        self.output.read_params(rest)
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&mut f64)) {
        self.hidden.visit_mut(f);
        self.output.visit_mut(f);
    }
}

/// Writes `f32` parameters as little-endian bytes.
pub fn params_to_le_f32(params: &[f64]) -> Vec<u8> {
    params.iter().flat_map(|&p| (p as f32).to_le_bytes()).collect()
}

pub fn params_from_le_f32(bytes: &[u8]) -> Vec<f64> {
    bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::seeded_rng;

    #[test]
    fn dense_matches_naive_matmul() {
        let mut rng = seeded_rng(1, 0);
        let d = Dense::glorot(3, 2, &mut rng);
        let x = [0.5, -1.0, 2.0];
        let y = d.forward(&x);
        for o in 0..2 {
            let mut acc = d.bias[o];
            for i in 0..3 {
                acc += d.weights[o * 3 + i] * x[i];
            }
            assert!((y[o] - acc).abs() < 1e-15);
        }
    }

    #[test]
    fn mlp_backward_matches_finite_differences() {
        let mut rng = seeded_rng(2, 0);
        let mut m = Mlp2::glorot(4, 5, 3, &mut rng);
        m.hidden.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
        let x = [0.3, -0.7, 1.1, 0.2];
        let w = [1.0, -2.0, 0.5];
        let loss = |m: &Mlp2| m.forward(&x).out.iter().zip(&w).map(|(o, w)| o * w).sum::<f64>();
        let trace = m.forward(&x);
        let mut grad = m.zeros_like();
        m.backward(&x, &trace, &w, &mut grad);
        let mut analytic = Vec::new();
        grad.write_params(&mut analytic);
        let mut flat = Vec::new();
        m.write_params(&mut flat);
        for i in 0..flat.len() {
            let h = 1e-5;
            let mut p = flat.clone();
            p[i] += h;
            m.read_params(&p);
            let up = loss(&m);
            p[i] -= 2.0 * h;
            m.read_params(&p);
            let down = loss(&m);
            let numeric = (up - down) / (2.0 * h);
            assert!((numeric - analytic[i]).abs() < 1e-8, "param {i}: {numeric} vs {}", analytic[i]);
        }
    }

    #[test]
    fn param_round_trip() {
        let mut rng = seeded_rng(3, 0);
        let m = Mlp2::glorot(3, 4, 2, &mut rng);
        let mut flat = Vec::new();
        m.write_params(&mut flat);
        assert_eq!(flat.len(), m.num_params());
        let mut other = m.zeros_like();
        assert!(other.read_params(&flat).is_empty());
        assert_eq!(other, m);
    }
}
