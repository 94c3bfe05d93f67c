//! One-level encoder-decoder interpolator with a bilinear residual bottleneck.
//!
//! Input is a window of `T_w` zero-filled frames plus their `T_w` masks,
//! stacked as channels. Layout:
//!
//! ```text
//! e = tanh(We * x + be)                  full resolution
//! p = pool2(e)
//! b = p + (A * p) + (B1 * p) ⊙ (B2 * p)  half resolution
//! d = tanh(Wd * (unpool2(b) + e) + bd)
//! out = Wo * d + bo                      zero-initialized
//! ```

use std::rc::Rc;

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::field::{denormalize, normalize, GappyField, NormStats};
use crate::training::{Sample, Trainable};
use crate::var_solver::prior::normal_tensor;
use crate::var_solver::warn_if_unnormalized;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DirectNetConfig {
    pub hidden: usize,
    /// Frames per input window.
    pub window: usize,
    /// Odd spatial kernel extent.
    pub kernel: usize,
    pub seed: u64,
}

impl Default for DirectNetConfig {
    fn default() -> Self {
        Self {
            hidden: 16,
            window: 5,
            kernel: 3,
            seed: 0,
        }
    }
}

impl DirectNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.window == 0 || self.kernel % 2 == 0 {
            return Err(Error::InvalidSpec(format!("bad direct-net config {self:?}")));
        }
        Ok(())
    }

    /// Shapes of the parameter tensors, in storage order.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let (h, t, k) = (self.hidden, self.window, self.kernel);
        let conv = |o: usize, i: usize| vec![o, i, 1, k, k];
        let mut shapes = vec![conv(h, 2 * t), vec![h]];
        for _ in 0..4 {
            // A, B1, B2, then the decoder
            shapes.push(conv(h, h));
            shapes.push(vec![h]);
        }
        shapes.push(conv(t, h));
        shapes.push(vec![t]);
        shapes
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (h, t, k) = (self.hidden, self.window, self.kernel);
        let kk = k * k;
        (2 * t * h * kk + h) + 4 * (h * h * kk + h) + (h * t * kk + t)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DirectNet {
    pub config: DirectNetConfig,
    params: Vec<Tensor>,
}

impl DirectNet {
    pub fn new(config: DirectNetConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let shapes = config.param_shapes();
        let last = shapes.len() - 2;
        let params = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| {
                if s.len() == 1 || i == last {
                    Tensor::zeros(s)
                } else {
                    let fan = (s[1] * s[3] * s[4]) as f64;
                    normal_tensor(s, 1.0 / fan.sqrt(), &mut rng)
                }
            })
            .collect();
        Ok(Self { config, params })
    }

    pub fn from_params(config: DirectNetConfig, params: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let shapes = config.param_shapes();
        if params.len() != shapes.len() || params.iter().zip(&shapes).any(|(p, s)| p.shape() != s.as_slice()) {
            return Err(Error::ShapeMismatch("direct-net parameters do not match config".into()));
        }
        Ok(Self { config, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    fn check_dims(&self, (t, h, w): (usize, usize, usize)) -> Result<()> {
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::OddDimensions { h, w });
        }
        if t != self.config.window {
            return Err(Error::ShapeMismatch(format!(
                "window of {t} frames, model expects {}",
                self.config.window
            )));
        }
        Ok(())
    }

    fn network<'g>(&self, g: &'g Graph, p: &[Var<'g>], s: &Sample) -> Var<'g> {
        let (t, h, w) = s.dims;
        let mut input = s.obs.clone();
        input.extend_from_slice(&s.obs_mask);
        let x = g.leaf(Tensor::new(vec![2 * t, 1, h, w], input));
        let layer = |x: Var<'g>, i: usize| x.conv_same(p[i]).bias_add(p[i + 1]);
        let e = layer(x, 0).tanh();
        let q = e.pool2();
        let b = q + layer(q, 2) + layer(q, 4) * layer(q, 6);
        let d = layer(b.unpool2() + e, 8).tanh();
        let ocean = Rc::new(s.ocean.clone());
        layer(d, 10).reshape(&[1, t, h, w]).mul_const(&ocean)
    }

    /// Reconstructs one window; `obs` is normalized, `ocean` is the sea mask.
    pub fn forward(&self, obs: &GappyField, ocean: &Array2<bool>) -> Result<Array3<f64>> {
        self.check_dims(obs.dims())?;
        let s = Sample::from_target(obs, ocean, |_| Array2::from_elem(ocean.dim(), false));
        let g = Graph::new();
        let leaves: Vec<Var> = self.params.iter().map(|t| g.leaf(t.clone())).collect();
        let out = self.network(&g, &leaves, &s);
        Ok(Array3::from_shape_vec(obs.dims(), out.value().data().to_vec()).expect("window shape"))
    }

    /// Window-by-window reconstruction of a whole sequence; frames covered by
    /// two windows (the last one is aligned to the end) are averaged.
    pub fn infer(&self, y: &GappyField, stats: &NormStats) -> Result<GappyField> {
        let (t, h, w) = y.dims();
        let tw = self.config.window;
        if t < tw {
            return Err(Error::BadDimensions(format!(
                "{t} frames, direct net needs windows of {tw}"
            )));
        }
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::OddDimensions { h, w });
        }
        let norm = normalize(y, stats)?;
        warn_if_unnormalized(&norm);
        let ocean = y.ocean_mask();
        let mut starts: Vec<usize> = (0..=t - tw).step_by(tw).collect();
        if starts.last() != Some(&(t - tw)) {
            starts.push(t - tw);
        }
        let mut sum = Array3::<f64>::zeros((t, h, w));
        let mut count = vec![0usize; t];
        for &s0 in &starts {
            let out = self.forward(&norm.frames(s0, s0 + tw)?, &ocean)?;
            for k in 0..tw {
                let mut dst = sum.index_axis_mut(ndarray::Axis(0), s0 + k);
                dst += &out.index_axis(ndarray::Axis(0), k);
                count[s0 + k] += 1;
            }
        }
        for (k, c) in count.iter().enumerate() {
            sum.index_axis_mut(ndarray::Axis(0), k).mapv_inplace(|v| v / *c as f64);
        }
        if sum.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged { iteration: 0 });
        }
        let valid = Array3::from_shape_fn((t, h, w), |(_, i, j)| ocean[[i, j]]);
        let out = GappyField::new(sum, valid, y.meta.clone())?;
        denormalize(&out, stats)
    }
}

impl Trainable for DirectNet {
    fn params(&self) -> Vec<Tensor> {
        self.params.clone()
    }

    fn set_params(&mut self, params: &[Tensor]) {
        self.params = params.to_vec();
    }

    fn predict<'g>(&self, g: &'g Graph, params: &[Var<'g>], s: &Sample) -> Result<Var<'g>> {
        self.check_dims(s.dims)?;
        Ok(self.network(g, params, s))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::FieldMeta;

    fn window(t: usize, h: usize, w: usize) -> GappyField {
        let values = Array3::from_shape_fn((t, h, w), |(k, i, j)| ((k + 2 * i + 3 * j) as f64 * 0.2).cos());
        let valid = Array3::from_shape_fn((t, h, w), |(k, i, j)| (k + i + j) % 3 != 0);
        GappyField::new(values, valid, FieldMeta::default()).unwrap()
    }

    #[test]
    fn untrained_output_is_zero() {
        let net = DirectNet::new(DirectNetConfig::default()).unwrap();
        let y = window(5, 8, 6);
        let out = net.forward(&y, &Array2::from_elem((8, 6), true)).unwrap();
        assert_eq!(out.dim(), (5, 8, 6));
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn analytic_count_matches_tensors() {
        for hidden in [4, 16, 128] {
            let cfg = DirectNetConfig {
                hidden,
                ..Default::default()
            };
            assert_eq!(DirectNet::new(cfg).unwrap().param_count(), cfg.param_count());
        }
    }

    #[test]
    fn odd_extent_is_rejected() {
        let net = DirectNet::new(DirectNetConfig::default()).unwrap();
        let y = window(5, 7, 6);
        assert!(matches!(
            net.forward(&y, &Array2::from_elem((7, 6), true)),
            Err(Error::OddDimensions { h: 7, w: 6 })
        ));
    }

    #[test]
    fn wrong_window_length_is_rejected() {
        let net = DirectNet::new(DirectNetConfig::default()).unwrap();
        let y = window(4, 6, 6);
        assert!(net.forward(&y, &Array2::from_elem((6, 6), true)).is_err());
    }

    #[test]
    fn from_params_checks_shapes() {
        let cfg = DirectNetConfig::default();
        let net = DirectNet::new(cfg).unwrap();
        assert!(DirectNet::from_params(cfg, net.params()).is_ok());
        let mut bad = net.params();
        bad.pop();
        assert!(DirectNet::from_params(cfg, bad).is_err());
    }
}
