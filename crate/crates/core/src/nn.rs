//! Parameterized building blocks over [`Graph`].

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};

/// Scaled normal initialization with standard deviation `1 / sqrt(fan_in)`.
pub fn init_normal(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let std = 1.0 / (rows as f64).sqrt();
    Tensor::from_shape_simple_fn((rows, cols), || {
        let z: f64 = rng.sample(StandardNormal);
        z * std
    })
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add(format!("{name}.w"), init_normal(rng, fan_in, fan_out));
        let b = store.add(format!("{name}.b"), Tensor::zeros((1, fan_out)));
        Self {
            w,
            b,
            fan_in,
            fan_out,
        }
    }

    pub fn zeros(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = store.add(format!("{name}.w"), Tensor::zeros((fan_in, fan_out)));
        let b = store.add(format!("{name}.b"), Tensor::zeros((1, fan_out)));
        Self {
            w,
            b,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let h = g.matmul(x, w);
        g.add_bias(h, b)
    }

    pub fn zero_out(&self, store: &mut ParamStore) {
        store.get_mut(self.w).fill(0.0);
        store.get_mut(self.b).fill(0.0);
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }
}

/// Dense stack with GELU between layers and a linear final layer.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `widths` lists every layer width including input and output.
    pub fn new(store: &mut ParamStore, name: &str, widths: &[usize], rng: &mut impl Rng) -> Self {
        assert!(widths.len() >= 2);
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                h = g.gelu(h);
            }
            h = layer.forward(g, store, h);
        }
        h
    }

    pub fn last(&self) -> &Linear {
        self.layers.last().expect("non-empty mlp")
    }

    pub fn in_width(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn out_width(&self) -> usize {
        self.last().fan_out
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(Linear::params).collect()
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::ones((1, width))),
            bias: store.add(format!("{name}.bias"), Tensor::zeros((1, width))),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.gain, self.bias]
    }
}

/// `x + x * gamma + beta`: feature-wise affine modulation whose identity
/// point is `gamma = beta = 0`.
pub fn film(g: &mut Graph, x: Var, gamma: Var, beta: Var) -> Var {
    let scaled = g.mul(x, gamma);
    let h = g.add(x, scaled);
    g.add(h, beta)
}
