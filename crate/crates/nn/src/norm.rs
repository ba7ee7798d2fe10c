use crate::{Act, Param};

const EPS: f32 = 1e-5;
const MOMENTUM: f32 = 0.1;

/// Per-channel batch normalization over `N×H×W`.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    cache: Option<BnCache>,
}

#[derive(Clone, Debug)]
struct BnCache {
    x_hat: Act,
    inv_std: Vec<f32>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::filled(vec![channels], 1.0),
            beta: Param::filled(vec![channels], 0.0),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&self, x: &Act) -> Act {
        let mut y = x.clone();
        for c in 0..x.c {
            let scale = self.gamma.value[c] / (self.running_var[c] + EPS).sqrt();
            let shift = self.beta.value[c] - self.running_mean[c] * scale;
            y.channel_mut(c).iter_mut().for_each(|v| *v = *v * scale + shift);
        }
        y
    }

    pub fn forward_train(&mut self, x: &Act) -> Act {
        assert_eq!(x.c, self.channels(), "batchnorm channels");
        let m = x.channel_len();
        let mut x_hat = x.clone();
        let mut y = x.clone();
        let mut inv_std = vec![0.0; x.c];
        for c in 0..x.c {
            let src = x.channel(c);
            let mean = src.iter().map(|&v| v as f64).sum::<f64>() / m as f64;
            let var = src.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / m as f64;
            let istd = 1.0 / (var as f32 + EPS).sqrt();
            inv_std[c] = istd;
            let (g, b) = (self.gamma.value[c], self.beta.value[c]);
            let mean32 = mean as f32;
            for ((h, o), &v) in x_hat.channel_mut(c).iter_mut().zip(y.channel_mut(c)).zip(src) {
                *h = (v - mean32) * istd;
                *o = g * *h + b;
            }
            let unbiased = if m > 1 { var * m as f64 / (m - 1) as f64 } else { var };
            self.running_mean[c] = (1.0 - MOMENTUM) * self.running_mean[c] + MOMENTUM * mean32;
            self.running_var[c] = (1.0 - MOMENTUM) * self.running_var[c] + MOMENTUM * unbiased as f32;
        }
        self.cache = Some(BnCache { x_hat, inv_std });
        y
    }

    pub fn backward(&mut self, dy: &Act) -> Act {
        let cache = self.cache.as_ref().expect("batchnorm backward without forward");
        let m = dy.channel_len() as f32;
        let mut dx = dy.clone();
        for c in 0..dy.c {
            let g = dy.channel(c);
            let xh = cache.x_hat.channel(c);
            let sum_g: f32 = g.iter().sum();
            let sum_gx: f32 = g.iter().zip(xh).map(|(a, b)| a * b).sum();
            self.gamma.grad[c] += sum_gx;
            self.beta.grad[c] += sum_g;
            let k = self.gamma.value[c] * cache.inv_std[c] / m;
            for ((d, &gv), &xv) in dx.channel_mut(c).iter_mut().zip(g).zip(xh) {
                *d = k * (m * gv - sum_g - xv * sum_gx);
            }
        }
        dx
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}
