use crate::Act;

#[derive(Clone, Debug, Default)]
pub struct Relu {
    mask: Vec<bool>,
}

impl Relu {
    pub fn forward(x: &Act) -> Act {
        let mut y = x.clone();
        y.data.iter_mut().for_each(|v| *v = v.max(0.0));
        y
    }

    pub fn forward_train(&mut self, x: &Act) -> Act {
        self.mask = x.data.iter().map(|&v| v > 0.0).collect();
        Self::forward(x)
    }

    pub fn backward(&self, dy: &Act) -> Act {
        let mut dx = dy.clone();
        for (d, &m) in dx.data.iter_mut().zip(&self.mask) {
            if !m {
                *d = 0.0;
            }
        }
        dx
    }

    pub fn clear_cache(&mut self) {
        self.mask = Vec::new();
    }
}
