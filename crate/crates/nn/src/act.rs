/// A batch of activations in channel-major `C×N×H×W` layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Act {
    pub c: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Act {
    pub fn zeros(c: usize, n: usize, h: usize, w: usize) -> Self {
        Self { c, n, h, w, data: vec![0.0; c * n * h * w] }
    }

    pub fn from_vec(c: usize, n: usize, h: usize, w: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), c * n * h * w, "activation buffer size");
        Self { c, n, h, w, data }
    }

    /// Builds a batch from per-image `C×H×W` buffers.
    pub fn from_images(c: usize, h: usize, w: usize, images: &[Vec<f32>]) -> Self {
        let n = images.len();
        let plane = h * w;
        let mut out = Self::zeros(c, n, h, w);
        for (i, img) in images.iter().enumerate() {
            assert_eq!(img.len(), c * plane);
            for ch in 0..c {
                let dst = (ch * n + i) * plane;
                out.data[dst..dst + plane].copy_from_slice(&img[ch * plane..(ch + 1) * plane]);
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Elements per channel (`N×H×W`).
    pub fn channel_len(&self) -> usize {
        self.n * self.h * self.w
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let len = self.channel_len();
        &self.data[c * len..(c + 1) * len]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let len = self.channel_len();
        &mut self.data[c * len..(c + 1) * len]
    }

    pub fn same_shape(&self, other: &Act) -> bool {
        (self.c, self.n, self.h, self.w) == (other.c, other.n, other.h, other.w)
    }

    pub fn add_assign(&mut self, other: &Act) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }
}
