use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

/// A trainable tensor with its gradient and momentum buffer.
#[derive(Clone, Debug)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
    pub velocity: Vec<f32>,
}

impl Param {
    pub fn new(shape: Vec<usize>, value: Vec<f32>) -> Self {
        let len: usize = shape.iter().product();
        assert_eq!(len, value.len(), "parameter shape/value mismatch");
        Self { shape, grad: vec![0.0; len], velocity: vec![0.0; len], value }
    }

    pub fn filled(shape: Vec<usize>, v: f32) -> Self {
        let len = shape.iter().product();
        Self::new(shape, vec![v; len])
    }

    /// He-normal init, `std = sqrt(2 / fan)`.
    pub fn kaiming_normal(shape: Vec<usize>, fan: usize, rng: &mut impl Rng) -> Self {
        let std = (2.0 / fan as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("finite std");
        let len = shape.iter().product();
        let value = (0..len).map(|_| dist.sample(rng) as f32).collect();
        Self::new(shape, value)
    }

    pub fn uniform(shape: Vec<usize>, bound: f32, rng: &mut impl Rng) -> Self {
        let len = shape.iter().product();
        let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
        let value = (0..len).map(|_| dist.sample(rng)).collect();
        Self::new(shape, value)
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn reset_velocity(&mut self) {
        self.velocity.iter_mut().for_each(|v| *v = 0.0);
    }
}
