use rand::Rng;

use crate::gemm::gemm;
use crate::Param;

/// Fully connected classifier head, `logits = x·Wᵀ + b`, with `W` stored
/// `out × in`. The output dimension can grow as new classes arrive.
#[derive(Clone, Debug)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Param,
    pub bias: Param,
    input: Option<Vec<f32>>,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (in_dim as f32).sqrt();
        Self {
            in_dim,
            out_dim,
            weight: Param::uniform(vec![out_dim, in_dim], bound, rng),
            bias: Param::uniform(vec![out_dim], bound, rng),
            input: None,
        }
    }

    /// Appends `extra` freshly initialized output rows, keeping existing rows.
    pub fn expand(&mut self, extra: usize, rng: &mut impl Rng) {
        if extra == 0 {
            return;
        }
        let fresh = Linear::new(self.in_dim, extra, rng);
        let mut w = std::mem::take(&mut self.weight.value);
        w.extend_from_slice(&fresh.weight.value);
        let mut b = std::mem::take(&mut self.bias.value);
        b.extend_from_slice(&fresh.bias.value);
        self.out_dim += extra;
        self.weight = Param::new(vec![self.out_dim, self.in_dim], w);
        self.bias = Param::new(vec![self.out_dim], b);
    }

    /// Row `k` of the weight matrix.
    pub fn row(&self, k: usize) -> &[f32] {
        &self.weight.value[k * self.in_dim..(k + 1) * self.in_dim]
    }

    pub fn row_mut(&mut self, k: usize) -> &mut [f32] {
        &mut self.weight.value[k * self.in_dim..(k + 1) * self.in_dim]
    }

    pub fn forward(&self, x: &[f32]) -> Vec<f32> {
        let n = x.len() / self.in_dim;
        assert_eq!(n * self.in_dim, x.len(), "linear input size");
        let mut y = Vec::with_capacity(n * self.out_dim);
        for _ in 0..n {
            y.extend_from_slice(&self.bias.value);
        }
        gemm(false, true, n, self.out_dim, self.in_dim, 1.0, x, &self.weight.value, 1.0, &mut y);
        y
    }

    pub fn forward_train(&mut self, x: &[f32]) -> Vec<f32> {
        self.input = Some(x.to_vec());
        self.forward(x)
    }

    /// Returns the gradient with respect to the input features.
    pub fn backward(&mut self, dy: &[f32]) -> Vec<f32> {
        let x = self.input.as_ref().expect("linear backward without forward");
        let n = x.len() / self.in_dim;
        assert_eq!(dy.len(), n * self.out_dim, "linear grad size");
        gemm(true, false, self.out_dim, self.in_dim, n, 1.0, dy, x, 1.0, &mut self.weight.grad);
        for row in dy.chunks(self.out_dim) {
            for (g, d) in self.bias.grad.iter_mut().zip(row) {
                *g += d;
            }
        }
        let mut dx = vec![0.0; n * self.in_dim];
        gemm(false, false, n, self.in_dim, self.out_dim, 1.0, dy, &self.weight.value, 0.0, &mut dx);
        dx
    }

    pub fn clear_cache(&mut self) {
        self.input = None;
    }
}
