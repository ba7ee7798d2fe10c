use crate::Act;

/// Max pooling with square window; used by the large-input stem.
#[derive(Clone, Debug)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    argmax: Vec<usize>,
    in_shape: (usize, usize, usize, usize),
}

impl MaxPool2d {
    pub fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        Self { kernel, stride, pad, argmax: Vec::new(), in_shape: (0, 0, 0, 0) }
    }

    fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn pool(&self, x: &Act, mut record: Option<&mut Vec<usize>>) -> Act {
        let (ho, wo) = self.out_size(x.h, x.w);
        let mut y = Act::zeros(x.c, x.n, ho, wo);
        let mut o = 0;
        for c in 0..x.c {
            for n in 0..x.n {
                let base = (c * x.n + n) * x.h * x.w;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut best = f32::NEG_INFINITY;
                        let mut best_idx = base;
                        for ky in 0..self.kernel {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= x.h as isize {
                                continue;
                            }
                            for kx in 0..self.kernel {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix < 0 || ix >= x.w as isize {
                                    continue;
                                }
                                let idx = base + iy as usize * x.w + ix as usize;
                                if x.data[idx] > best {
                                    best = x.data[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        y.data[o] = best;
                        if let Some(r) = record.as_deref_mut() {
                            r.push(best_idx);
                        }
                        o += 1;
                    }
                }
            }
        }
        y
    }

    pub fn forward(&self, x: &Act) -> Act {
        self.pool(x, None)
    }

    pub fn forward_train(&mut self, x: &Act) -> Act {
        let mut argmax = Vec::new();
        let y = self.pool(x, Some(&mut argmax));
        self.argmax = argmax;
        self.in_shape = (x.c, x.n, x.h, x.w);
        y
    }

    pub fn backward(&self, dy: &Act) -> Act {
        let (c, n, h, w) = self.in_shape;
        let mut dx = Act::zeros(c, n, h, w);
        for (g, &idx) in dy.data.iter().zip(&self.argmax) {
            dx.data[idx] += *g;
        }
        dx
    }

    pub fn clear_cache(&mut self) {
        self.argmax = Vec::new();
    }
}

/// Spatial mean per channel, producing row-major `N×C` features.
#[derive(Clone, Debug, Default)]
pub struct GlobalAvgPool {
    in_shape: (usize, usize, usize, usize),
}

impl GlobalAvgPool {
    pub fn forward(x: &Act) -> Vec<f32> {
        let plane = x.h * x.w;
        let mut out = vec![0.0; x.n * x.c];
        for c in 0..x.c {
            let ch = x.channel(c);
            for n in 0..x.n {
                let s: f32 = ch[n * plane..(n + 1) * plane].iter().sum();
                out[n * x.c + c] = s / plane as f32;
            }
        }
        out
    }

    pub fn forward_train(&mut self, x: &Act) -> Vec<f32> {
        self.in_shape = (x.c, x.n, x.h, x.w);
        Self::forward(x)
    }

    pub fn backward(&self, grad: &[f32]) -> Act {
        let (c, n, h, w) = self.in_shape;
        let plane = h * w;
        let mut dx = Act::zeros(c, n, h, w);
        for ch in 0..c {
            let dst = dx.channel_mut(ch);
            for i in 0..n {
                let g = grad[i * c + ch] / plane as f32;
                dst[i * plane..(i + 1) * plane].iter_mut().for_each(|v| *v = g);
            }
        }
        dx
    }
}
