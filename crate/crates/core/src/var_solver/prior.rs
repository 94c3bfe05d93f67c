//! Prior operators `φ` mapping a `[1, T, H, W]` state to a state of the same shape.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};

/// Trainable convolutional prior with a bilinear branch:
/// `φ(x) = W2 * (tanh(W1 * x) + (W3 * x) ⊙ (W4 * x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvNetPrior {
    pub w1: Tensor,
    pub w2: Tensor,
    pub w3: Tensor,
    pub w4: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvNetShape {
    pub channels: usize,
    /// Temporal kernel extent (odd; 1 gives purely spatial filters).
    pub kt: usize,
    /// Spatial kernel extent (odd).
    pub k: usize,
}

impl Default for ConvNetShape {
    fn default() -> Self {
        Self {
            channels: 8,
            kt: 3,
            k: 3,
        }
    }
}

pub(crate) fn normal_tensor(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect())
}

impl ConvNetPrior {
    pub fn new(shape: ConvNetShape, seed: u64) -> Self {
        let ConvNetShape { channels: c, kt, k } = shape;
        assert!(kt % 2 == 1 && k % 2 == 1, "kernel extents must be odd");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fan = (kt * k * k) as f64;
        let inner = [c, 1, kt, k, k];
        Self {
            w1: normal_tensor(&inner, 1.0 / fan.sqrt(), &mut rng),
            w2: normal_tensor(&[1, c, kt, k, k], 0.5 / (fan * c as f64).sqrt(), &mut rng),
            w3: normal_tensor(&inner, 1.0 / fan.sqrt(), &mut rng),
            w4: normal_tensor(&inner, 1.0 / fan.sqrt(), &mut rng),
        }
    }

    pub fn shape(&self) -> ConvNetShape {
        let s = self.w1.shape();
        ConvNetShape {
            channels: s[0],
            kt: s[2],
            k: s[3],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PriorModel {
    Zero,
    /// `φ(x) = x + ν Δx` with the 7-point space-time Laplacian.
    Diffusion { nu: f64 },
    ConvNet(ConvNetPrior),
}

/// 7-point Laplacian over (t, row, col) as a `[1, 1, 3, 3, 3]` filter.
pub fn laplacian_kernel() -> Tensor {
    let mut k = vec![0.0; 27];
    let idx = |a: usize, b: usize, c: usize| (a * 3 + b) * 3 + c;
    k[idx(1, 1, 1)] = -6.0;
    for (a, b, c) in [(0, 1, 1), (2, 1, 1), (1, 0, 1), (1, 2, 1), (1, 1, 0), (1, 1, 2)] {
        k[idx(a, b, c)] = 1.0;
    }
    Tensor::new(vec![1, 1, 3, 3, 3], k)
}

impl PriorModel {
    pub fn kind(&self) -> &'static str {
        match self {
            PriorModel::Zero => "zero",
            PriorModel::Diffusion { .. } => "diffusion",
            PriorModel::ConvNet(_) => "convnet",
        }
    }

    /// Trainable tensors, in the order [`PriorModel::apply`] expects them.
    pub fn params(&self) -> Vec<Tensor> {
        match self {
            PriorModel::ConvNet(p) => vec![p.w1.clone(), p.w2.clone(), p.w3.clone(), p.w4.clone()],
            _ => Vec::new(),
        }
    }

    pub fn set_params(&mut self, params: &[Tensor]) {
        if let PriorModel::ConvNet(p) = self {
            p.w1 = params[0].clone();
            p.w2 = params[1].clone();
            p.w3 = params[2].clone();
            p.w4 = params[3].clone();
        }
    }

    pub fn leaves<'g>(&self, g: &'g Graph) -> Vec<Var<'g>> {
        self.params().into_iter().map(|t| g.leaf(t)).collect()
    }

    /// Applies `φ` with land zeroed before and after every convolution.
    /// `vars` are the leaves returned by [`PriorModel::leaves`].
    pub fn apply<'g>(
        &self,
        g: &'g Graph,
        x: Var<'g>,
        vars: &[Var<'g>],
        ocean: &Rc<Vec<f64>>,
    ) -> Var<'g> {
        let xm = x.mul_const(ocean);
        match self {
            PriorModel::Zero => xm.scale_const(0.0),
            PriorModel::Diffusion { nu } => {
                let lap = xm.conv_same(g.leaf(laplacian_kernel())).mul_const(ocean);
                xm + lap.scale_const(*nu)
            }
            PriorModel::ConvNet(_) => {
                let (w1, w2, w3, w4) = (vars[0], vars[1], vars[2], vars[3]);
                let a = xm.conv_same(w1).tanh();
                let b = xm.conv_same(w3) * xm.conv_same(w4);
                (a + b).mul_const(ocean).conv_same(w2).mul_const(ocean)
            }
        }
    }
}
