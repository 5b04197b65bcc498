use crate::Param;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 2e-4, beta1: 0.0, beta2: 0.9, eps: 1e-8 }
    }
}

/// Adam with bias correction. Moment buffers are matched to parameters by
/// position, so callers must always pass the same parameter list in the
/// same order.
#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: u32,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self { cfg, m: Vec::new(), v: Vec::new(), t: 0 }
    }

    pub fn step(&mut self, params: Vec<&mut Param>) {
        let params: Vec<&mut Param> = params.into_iter().filter(|p| p.trainable).collect();
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        assert_eq!(self.m.len(), params.len(), "parameter list changed between steps");
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let step = lr * bc2.sqrt() / bc1;
        for ((p, m), v) in params.into_iter().zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                p.value[i] -= step * m[i] / (v[i].sqrt() + eps * bc2.sqrt());
            }
        }
    }
}
