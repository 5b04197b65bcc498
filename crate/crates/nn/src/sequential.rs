use crate::{Layer, Mode, Param, Tensor};

/// An ordered stack of layers. Parameter names are `<layer>.<param>`.
#[derive(Default)]
pub struct Sequential {
    layers: Vec<Box<dyn Layer>>,
}

impl Sequential {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, layer: impl Layer + 'static) -> &mut Self {
        self.layers.push(Box::new(layer));
        self
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Tensor {
        let mut h = x.clone();
        for l in &mut self.layers {
            h = l.forward(&h, mode);
        }
        h
    }

    pub fn backward(&mut self, grad: &Tensor, param_grads: bool) -> Tensor {
        let mut g = grad.clone();
        for l in self.layers.iter_mut().rev() {
            g = l.backward(&g, param_grads);
        }
        g
    }

    pub fn layers(&self) -> &[Box<dyn Layer>] {
        &self.layers
    }

    /// Every tensor with its qualified name, in definition order.
    pub fn named_params(&self) -> Vec<(String, &Param)> {
        self.layers
            .iter()
            .flat_map(|l| l.params().into_iter().map(move |p| (format!("{}.{}", l.name(), p.name), p)))
            .collect()
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                let prefix = l.name().to_string();
                l.params_mut().into_iter().map(move |p| (format!("{prefix}.{}", p.name), p))
            })
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.named_params_mut().into_iter().find(|(n, _)| n == name).map(|(_, p)| p)
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.named_params().into_iter().find(|(n, _)| n == name).map(|(_, p)| p)
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }
}
