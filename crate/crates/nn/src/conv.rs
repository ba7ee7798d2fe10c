use rand::Rng;

use crate::gemm::{gemm_strided, Mat};
use crate::{Act, Param};

/// Bias-free 2-D convolution. Weights are stored `out_c × (in_c·k·k)`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: Param,
    input: Option<Act>,
}

impl Conv2d {
    pub fn new(
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan = in_c * kernel * kernel;
        let weight = Param::kaiming_normal(vec![out_c, fan], fan, rng);
        Self { in_c, out_c, kernel, stride, pad, weight, input: None }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    pub fn forward(&self, x: &Act) -> Act {
        assert_eq!(x.c, self.in_c, "conv input channels");
        let (ho, wo) = self.out_size(x.h, x.w);
        let plane = ho * wo;
        let np = x.n * plane;
        let ckk = self.ckk();
        let w = Mat::row_major(&self.weight.value, ckk);
        let mut y = Act::zeros(self.out_c, x.n, ho, wo);
        for (n0, n1) in self.chunks(x.n, plane) {
            let cnt = (n1 - n0) * plane;
            let out = &mut y.data[n0 * plane..];
            if self.is_pointwise_identity() {
                let cols = Mat { data: &x.data[n0 * plane..], rs: np, cs: 1 };
                gemm_strided(self.out_c, cnt, ckk, 1.0, w, cols, 0.0, out, np);
            } else {
                let cols = im2col(x, n0, n1, self.kernel, self.stride, self.pad, ho, wo);
                gemm_strided(self.out_c, cnt, ckk, 1.0, w, Mat::row_major(&cols, cnt), 0.0, out, np);
            }
        }
        y
    }

    pub fn forward_train(&mut self, x: &Act) -> Act {
        let y = self.forward(x);
        self.input = Some(x.clone());
        y
    }

    pub fn backward(&mut self, dy: &Act) -> Act {
        let x = self.input.as_ref().expect("conv backward without forward");
        let (ho, wo) = self.out_size(x.h, x.w);
        assert_eq!((dy.c, dy.n, dy.h, dy.w), (self.out_c, x.n, ho, wo), "conv grad shape");
        let plane = ho * wo;
        let np = x.n * plane;
        let ckk = self.ckk();
        let w_t = Mat::row_major(&self.weight.value, ckk).t();
        let mut dx = Act::zeros(x.c, x.n, x.h, x.w);
        for (n0, n1) in self.chunks(x.n, plane) {
            let cnt = (n1 - n0) * plane;
            let dy_chunk = Mat { data: &dy.data[n0 * plane..], rs: np, cs: 1 };
            if self.is_pointwise_identity() {
                let x_t = Mat { data: &x.data[n0 * plane..], rs: 1, cs: np };
                gemm_strided(self.out_c, ckk, cnt, 1.0, dy_chunk, x_t, 1.0, &mut self.weight.grad, ckk);
                gemm_strided(ckk, cnt, self.out_c, 1.0, w_t, dy_chunk, 0.0, &mut dx.data[n0 * plane..], np);
            } else {
                let cols = im2col(x, n0, n1, self.kernel, self.stride, self.pad, ho, wo);
                let cols_t = Mat::row_major(&cols, cnt).t();
                gemm_strided(self.out_c, ckk, cnt, 1.0, dy_chunk, cols_t, 1.0, &mut self.weight.grad, ckk);
                let mut dcols = cols;
                gemm_strided(ckk, cnt, self.out_c, 1.0, w_t, dy_chunk, 0.0, &mut dcols, cnt);
                col2im(&dcols, &mut dx, n0, n1, self.kernel, self.stride, self.pad, ho, wo);
            }
        }
        dx
    }

    pub fn clear_cache(&mut self) {
        self.input = None;
    }

    fn ckk(&self) -> usize {
        self.in_c * self.kernel * self.kernel
    }

    fn is_pointwise_identity(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    /// Image ranges whose unfolded columns stay around cache size.
    fn chunks(&self, n: usize, plane: usize) -> impl Iterator<Item = (usize, usize)> {
        let per = (COLS_BUDGET / (self.ckk() * plane).max(1)).max(1);
        (0..n).step_by(per).map(move |n0| (n0, (n0 + per).min(n)))
    }
}

/// Target size, in floats, of one unfolded column block.
const COLS_BUDGET: usize = 1 << 17;

/// Valid output-column range `[lo, hi)` for kernel offset `kx` along one axis.
fn valid_range(kx: usize, stride: usize, pad: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    // ix = ox·stride + kx − pad must lie in [0, in_len).
    let lo = if kx >= pad { 0 } else { (pad - kx).div_ceil(stride) };
    let hi = if in_len + pad > kx {
        ((in_len + pad - kx - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Unfolds images `n0..n1` into a `(C·k·k) × ((n1−n0)·ho·wo)` column matrix.
#[allow(clippy::too_many_arguments)]
fn im2col(x: &Act, n0: usize, n1: usize, k: usize, s: usize, p: usize, ho: usize, wo: usize) -> Vec<f32> {
    let cnt = (n1 - n0) * ho * wo;
    let plane = x.h * x.w;
    let mut cols = vec![0.0f32; x.c * k * k * cnt];
    for c in 0..x.c {
        let chan = x.channel(c);
        for ky in 0..k {
            let (oy_lo, oy_hi) = valid_range(ky, s, p, x.h, ho);
            for kx in 0..k {
                let (ox_lo, ox_hi) = valid_range(kx, s, p, x.w, wo);
                let row = ((c * k + ky) * k + kx) * cnt;
                for n in n0..n1 {
                    let img = &chan[n * plane..(n + 1) * plane];
                    let base = row + (n - n0) * ho * wo;
                    for oy in oy_lo..oy_hi {
                        let iy = oy * s + ky - p;
                        let src = &img[iy * x.w..(iy + 1) * x.w];
                        let dst = &mut cols[base + oy * wo..base + (oy + 1) * wo];
                        if s == 1 {
                            let ix0 = ox_lo + kx - p;
                            dst[ox_lo..ox_hi].copy_from_slice(&src[ix0..ix0 + (ox_hi - ox_lo)]);
                        } else {
                            for ox in ox_lo..ox_hi {
                                dst[ox] = src[ox * s + kx - p];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-adds unfolded column gradients for images `n0..n1` back into `dx`.
#[allow(clippy::too_many_arguments)]
fn col2im(dcols: &[f32], dx: &mut Act, n0: usize, n1: usize, k: usize, s: usize, p: usize, ho: usize, wo: usize) {
    let cnt = (n1 - n0) * ho * wo;
    let (h, w) = (dx.h, dx.w);
    let plane = h * w;
    for c in 0..dx.c {
        let chan = dx.channel_mut(c);
        for ky in 0..k {
            let (oy_lo, oy_hi) = valid_range(ky, s, p, h, ho);
            for kx in 0..k {
                let (ox_lo, ox_hi) = valid_range(kx, s, p, w, wo);
                let row = ((c * k + ky) * k + kx) * cnt;
                for n in n0..n1 {
                    let img = &mut chan[n * plane..(n + 1) * plane];
                    let base = row + (n - n0) * ho * wo;
                    for oy in oy_lo..oy_hi {
                        let iy = oy * s + ky - p;
                        let dst = &mut img[iy * w..(iy + 1) * w];
                        let src = &dcols[base + oy * wo..base + (oy + 1) * wo];
                        if s == 1 {
                            let ix0 = ox_lo + kx - p;
                            for (d, g) in dst[ix0..ix0 + (ox_hi - ox_lo)].iter_mut().zip(&src[ox_lo..ox_hi]) {
                                *d += *g;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                dst[ox * s + kx - p] += src[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct convolution, used as the oracle.
    fn naive_conv(x: &Act, conv: &Conv2d) -> Act {
        let (ho, wo) = conv.out_size(x.h, x.w);
        let k = conv.kernel;
        let mut y = Act::zeros(conv.out_c, x.n, ho, wo);
        for o in 0..conv.out_c {
            for n in 0..x.n {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0f32;
                        for c in 0..x.c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * conv.stride + ky) as isize - conv.pad as isize;
                                    let ix = (ox * conv.stride + kx) as isize - conv.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                        continue;
                                    }
                                    let xv = x.data[((c * x.n + n) * x.h + iy as usize) * x.w + ix as usize];
                                    let wv = conv.weight.value[o * x.c * k * k + (c * k + ky) * k + kx];
                                    acc += xv * wv;
                                }
                            }
                        }
                        y.data[((o * x.n + n) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        y
    }

    fn random_act(c: usize, n: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Act {
        let data = (0..c * n * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        Act::from_vec(c, n, h, w, data)
    }

    #[test]
    fn forward_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(k, s, p, h) in &[(3, 1, 1, 7), (3, 2, 1, 8), (1, 2, 0, 6), (1, 1, 0, 5), (7, 2, 3, 9)] {
            let conv = Conv2d::new(2, 3, k, s, p, &mut rng);
            let x = random_act(2, 2, h, h, &mut rng);
            let got = conv.forward(&x);
            let want = naive_conv(&x, &conv);
            assert!(got.same_shape(&want));
            for (a, b) in got.data.iter().zip(&want.data) {
                assert!((a - b).abs() < 1e-5, "k={k} s={s} p={p}: {a} vs {b}");
            }
        }
    }

    /// Convolution is linear, so central differences are exact up to rounding.
    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &(k, s, p) in &[(3, 1, 1), (3, 2, 1), (1, 2, 0), (1, 1, 0)] {
            let mut conv = Conv2d::new(2, 3, k, s, p, &mut rng);
            let x = random_act(2, 2, 6, 6, &mut rng);
            let y = conv.forward_train(&x);
            let r = random_act(y.c, y.n, y.h, y.w, &mut rng);
            let loss = |conv: &Conv2d, x: &Act| -> f64 {
                conv.forward(x).data.iter().zip(&r.data).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
            };
            let dx = conv.backward(&r);
            let eps = 1e-2f32;
            for i in (0..x.len()).step_by(5) {
                let mut xp = x.clone();
                xp.data[i] += eps;
                let mut xm = x.clone();
                xm.data[i] -= eps;
                let fd = (loss(&conv, &xp) - loss(&conv, &xm)) / (2.0 * eps as f64);
                assert!((fd - dx.data[i] as f64).abs() < 1e-3, "dx[{i}] {fd} vs {}", dx.data[i]);
            }
            for i in (0..conv.weight.len()).step_by(3) {
                let mut cp = conv.clone();
                cp.weight.value[i] += eps;
                let mut cm = conv.clone();
                cm.weight.value[i] -= eps;
                let fd = (loss(&cp, &x) - loss(&cm, &x)) / (2.0 * eps as f64);
                let g = conv.weight.grad[i] as f64;
                assert!((fd - g).abs() < 1e-3 * (1.0 + g.abs()), "dw[{i}] {fd} vs {g}");
            }
        }
    }
}
