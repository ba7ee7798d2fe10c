use crate::{Backbone, Linear, Param};

/// Stochastic gradient descent with momentum and L2 weight decay
/// (`v ← μv + g + λw`, `w ← w − ηv`).
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
}

impl Sgd {
    pub fn update(&self, p: &mut Param) {
        for ((w, g), v) in p.value.iter_mut().zip(&mut p.grad).zip(&mut p.velocity) {
            let d = *g + self.weight_decay * *w;
            *v = self.momentum * *v + d;
            *w -= self.lr * *v;
            *g = 0.0;
        }
    }

    /// Applies one update to every parameter of a backbone and head, then clears gradients.
    pub fn step(&self, backbone: &mut dyn Backbone, head: &mut Linear) {
        backbone.visit_params(&mut |p| self.update(p));
        self.update(&mut head.weight);
        self.update(&mut head.bias);
    }
}

/// Learning rate decayed by `gamma` at each milestone epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiStepLr {
    pub base: f32,
    pub milestones: Vec<usize>,
    pub gamma: f32,
}

impl MultiStepLr {
    pub fn at(&self, epoch: usize) -> f32 {
        let passed = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.base * self.gamma.powi(passed as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_decays_at_milestones() {
        let s = MultiStepLr { base: 0.1, milestones: vec![80, 120], gamma: 0.1 };
        assert_eq!(s.at(0), 0.1);
        assert!((s.at(80) - 0.01).abs() < 1e-9);
        assert!((s.at(150) - 0.001).abs() < 1e-9);
    }

    #[test]
    fn zero_learning_rate_leaves_weights() {
        let mut p = Param::new(vec![2], vec![1.0, -2.0]);
        p.grad = vec![5.0, 5.0];
        Sgd { lr: 0.0, momentum: 0.9, weight_decay: 5e-4 }.update(&mut p);
        assert_eq!(p.value, vec![1.0, -2.0]);
        assert_eq!(p.grad, vec![0.0, 0.0]);
    }

    #[test]
    fn momentum_accumulates() {
        let mut p = Param::new(vec![1], vec![0.0]);
        let opt = Sgd { lr: 1.0, momentum: 0.5, weight_decay: 0.0 };
        p.grad = vec![1.0];
        opt.update(&mut p);
        p.grad = vec![1.0];
        opt.update(&mut p);
        assert_eq!(p.value, vec![-2.5]);
    }
}
