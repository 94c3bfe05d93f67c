//! Variational reconstruction: cost `U(x) = λ1‖x − y‖²_Ω + λ2‖x − φ(x)‖²`,
//! its gradient, and a fixed or learned unrolled gradient solver.

pub mod prior;

use std::rc::Rc;

use log::warn;
use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::field::{denormalize, normalize, GappyField, NormStats};
use crate::training::{Sample, Trainable};

pub use prior::{laplacian_kernel, ConvNetPrior, ConvNetShape, PriorModel};

/// One reconstruction problem in normalized space.
#[derive(Debug, Clone)]
pub struct Problem {
    dims: (usize, usize, usize),
    /// Observations, zero where missing.
    y: Vec<f64>,
    omega: Rc<Vec<f64>>,
    ocean: Rc<Vec<f64>>,
}

fn flag(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

impl Problem {
    /// `ocean` is the `H × W` sea mask; observed land pixels are ignored.
    pub fn new(y: &GappyField, ocean: &Array2<bool>) -> Result<Self> {
        let (t, h, w) = y.dims();
        if ocean.dim() != (h, w) {
            return Err(Error::ShapeMismatch(format!(
                "ocean mask {:?} vs field {:?}",
                ocean.dim(),
                (h, w)
            )));
        }
        let ocean_flat: Vec<f64> = ocean.iter().map(|&o| flag(o)).collect();
        let mut omega = Vec::with_capacity(t * h * w);
        let mut yv = Vec::with_capacity(t * h * w);
        for ((&v, &ok), k) in y.values().iter().zip(y.valid()).zip(0..) {
            let on = ok && ocean_flat[k % (h * w)] > 0.0;
            omega.push(flag(on));
            yv.push(if on { v } else { 0.0 });
        }
        Ok(Self {
            dims: (t, h, w),
            y: yv,
            omega: Rc::new(omega),
            ocean: Rc::new(ocean_flat),
        })
    }

    /// Ocean taken as every pixel observed at least once.
    pub fn from_field(y: &GappyField) -> Self {
        Self::new(y, &y.ocean_mask()).expect("own ocean mask matches")
    }

    pub(crate) fn from_sample(s: &Sample) -> Self {
        Self {
            dims: s.dims,
            y: s.obs.clone(),
            omega: Rc::new(s.obs_mask.clone()),
            ocean: Rc::new(s.ocean.clone()),
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn observed_count(&self) -> usize {
        self.omega.iter().filter(|&&m| m > 0.0).count()
    }

    fn state_shape(&self) -> Vec<usize> {
        let (t, h, w) = self.dims;
        vec![1, t, h, w]
    }

    fn state_tensor(&self, x: &Array3<f64>) -> Result<Tensor> {
        if x.dim() != self.dims {
            return Err(Error::ShapeMismatch(format!(
                "state {:?} vs observations {:?}",
                x.dim(),
                self.dims
            )));
        }
        Ok(Tensor::new(self.state_shape(), x.iter().copied().collect()))
    }

    fn to_array(&self, t: &Tensor) -> Array3<f64> {
        Array3::from_shape_vec(self.dims, t.data().to_vec()).expect("state shape")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    ZeroFill,
    /// Observed pixels copied, gaps at zero.
    #[default]
    ObsFill,
}

/// Gated recurrent step: `h ← tanh(Wg * αg + Wh * h)`, `x ← x − (γ_k αg + Wt * h)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnedUpdate {
    pub alpha: f64,
    /// Divide `∇U` by its root mean square before scaling by `α`, which bounds
    /// every step regardless of how steep the prior term becomes.
    pub normalize_grad: bool,
    /// One gain per iteration.
    pub gains: Vec<f64>,
    /// `[c, 1, 1, k, k]`
    pub wg: Tensor,
    /// `[c, c, 1, k, k]`
    pub wh: Tensor,
    /// `[1, c, 1, 1, 1]`, zero at construction so the rule starts as plain descent.
    pub wt: Tensor,
}

impl LearnedUpdate {
    pub fn new(iterations: usize, alpha: f64, hidden: usize, k: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fan = (k * k) as f64;
        Self {
            alpha,
            normalize_grad: true,
            gains: vec![1.0; iterations],
            wg: prior::normal_tensor(&[hidden, 1, 1, k, k], 1.0 / fan.sqrt(), &mut rng),
            wh: prior::normal_tensor(
                &[hidden, hidden, 1, k, k],
                0.5 / (fan * hidden as f64).sqrt(),
                &mut rng,
            ),
            wt: Tensor::zeros(&[1, hidden, 1, 1, 1]),
        }
    }

    pub fn hidden(&self) -> usize {
        self.wg.shape()[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum UpdateRule {
    Plain { alpha: f64 },
    Momentum { alpha: f64, beta: f64 },
    Learned(LearnedUpdate),
}

impl UpdateRule {
    pub fn alpha(&self) -> f64 {
        match self {
            UpdateRule::Plain { alpha } | UpdateRule::Momentum { alpha, .. } => *alpha,
            UpdateRule::Learned(l) => l.alpha,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverSpec {
    pub lambda1: f64,
    pub lambda2: f64,
    pub iterations: usize,
    pub update: UpdateRule,
    pub init: InitMode,
}

impl SolverSpec {
    pub fn plain(lambda1: f64, lambda2: f64, iterations: usize, alpha: f64) -> Self {
        Self {
            lambda1,
            lambda2,
            iterations,
            update: UpdateRule::Plain { alpha },
            init: InitMode::ObsFill,
        }
    }

    pub fn learned(iterations: usize, alpha: f64, hidden: usize, seed: u64) -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            iterations,
            update: UpdateRule::Learned(LearnedUpdate::new(iterations, alpha, hidden, 3, seed)),
            init: InitMode::ObsFill,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidSpec(msg.to_string()));
        if self.iterations == 0 {
            return bad("solver needs at least one iteration");
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) || self.lambda1 + self.lambda2 == 0.0 {
            return bad("lambda1 and lambda2 must be nonnegative and not both zero");
        }
        if !(self.update.alpha() > 0.0) {
            return bad("step size alpha must be positive");
        }
        match &self.update {
            UpdateRule::Momentum { beta, .. } if !(0.0..1.0).contains(beta) => {
                bad("momentum beta must lie in [0, 1)")
            }
            UpdateRule::Learned(l) => {
                if l.gains.len() != self.iterations {
                    return bad("learned update needs one gain per iteration");
                }
                if self.lambda1 == 0.0 || self.lambda2 == 0.0 {
                    return bad("learned solver trains log-weights; both lambdas must be positive");
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

/// Added under the square root of the gradient mean square so a zero gradient stays zero.
const GRAD_RMS_FLOOR: f64 = 1e-12;

/// Trained prior plus solver.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalModel {
    pub prior: PriorModel,
    pub solver: SolverSpec,
}

/// Graph leaves for one model evaluation.
struct ModelVars<'g> {
    prior: Vec<Var<'g>>,
    lambda1: Var<'g>,
    lambda2: Var<'g>,
    alpha: Var<'g>,
    gains: Vec<Var<'g>>,
    gate: Option<[Var<'g>; 3]>,
}

impl VariationalModel {
    pub fn new(prior: PriorModel, solver: SolverSpec) -> Result<Self> {
        solver.validate()?;
        Ok(Self { prior, solver })
    }

    /// Vars from the trainable tensors in [`Trainable::params`] order.
    fn vars<'g>(&self, g: &'g Graph, params: &[Var<'g>]) -> ModelVars<'g> {
        let np = self.prior.params().len();
        let prior = params[..np].to_vec();
        match &self.solver.update {
            UpdateRule::Learned(l) => {
                let rest = &params[np..];
                let k = l.gains.len();
                ModelVars {
                    prior,
                    lambda1: rest[0].exp(),
                    lambda2: rest[1].exp(),
                    alpha: rest[2].exp(),
                    gains: rest[3..3 + k].to_vec(),
                    gate: Some([rest[3 + k], rest[4 + k], rest[5 + k]]),
                }
            }
            rule => ModelVars {
                prior,
                lambda1: g.leaf(Tensor::scalar(self.solver.lambda1)),
                lambda2: g.leaf(Tensor::scalar(self.solver.lambda2)),
                alpha: g.leaf(Tensor::scalar(rule.alpha())),
                gains: Vec::new(),
                gate: None,
            },
        }
    }

    fn init_state(&self, p: &Problem) -> Tensor {
        match self.solver.init {
            InitMode::ZeroFill => Tensor::zeros(&p.state_shape()),
            InitMode::ObsFill => Tensor::new(p.state_shape(), p.y.clone()),
        }
    }

    fn hidden_shape(&self, p: &Problem) -> Option<Vec<usize>> {
        match &self.solver.update {
            UpdateRule::Learned(l) => {
                let (t, h, w) = p.dims;
                Some(vec![l.hidden(), t, h, w])
            }
            _ => None,
        }
    }

    /// One solver iteration; returns the new `(x, velocity, hidden)`.
    #[allow(clippy::too_many_arguments)]
    fn step<'g>(
        &self,
        g: &'g Graph,
        mv: &ModelVars<'g>,
        p: &Problem,
        y: Var<'g>,
        k: usize,
        x: Var<'g>,
        vel: Option<Var<'g>>,
        hid: Option<Var<'g>>,
    ) -> (Var<'g>, Option<Var<'g>>, Option<Var<'g>>) {
        let u = cost_var(g, x, y, p, &self.prior, &mv.prior, mv.lambda1, mv.lambda2);
        let mut grad = g.grad(u, &[x])[0];
        if matches!(&self.solver.update, UpdateRule::Learned(l) if l.normalize_grad) {
            let n = grad.value().len() as f64;
            let rms = grad.sum_sq().scale_const(1.0 / n) + g.leaf(Tensor::scalar(GRAD_RMS_FLOOR));
            grad = grad.scale(rms.powf(-0.5));
        }
        let ag = grad.scale(mv.alpha);
        let (x, vel, hid) = match &self.solver.update {
            UpdateRule::Plain { .. } => (x - ag, None, None),
            UpdateRule::Momentum { beta, .. } => {
                let v = vel.expect("velocity").scale_const(*beta) + ag;
                (x - v, Some(v), None)
            }
            UpdateRule::Learned(_) => {
                let [wg, wh, wt] = mv.gate.expect("gate weights");
                let h = (ag.conv_same(wg) + hid.expect("hidden state").conv_same(wh))
                    .tanh()
                    .mul_const(&p.ocean);
                let upd = ag.scale(mv.gains[k]) + h.conv_same(wt);
                (x - upd, None, Some(h))
            }
        };
        (x.mul_const(&p.ocean), vel, hid)
    }

    /// The whole unrolled solve on one graph, for training.
    fn unrolled<'g>(&self, g: &'g Graph, params: &[Var<'g>], p: &Problem) -> Var<'g> {
        let mv = self.vars(g, params);
        let y = g.leaf(Tensor::new(p.state_shape(), p.y.clone()));
        let mut x = g.leaf(self.init_state(p));
        let mut vel = matches!(self.solver.update, UpdateRule::Momentum { .. })
            .then(|| g.leaf(Tensor::zeros(&p.state_shape())));
        let mut hid = self.hidden_shape(p).map(|s| g.leaf(Tensor::zeros(&s)));
        for k in 0..self.solver.iterations {
            (x, vel, hid) = self.step(g, &mv, p, y, k, x, vel, hid);
        }
        x
    }

    /// Runs the solver with a fresh graph per iteration.
    pub fn solve(&self, p: &Problem) -> Result<Array3<f64>> {
        self.solver.validate()?;
        if p.observed_count() == 0 {
            return Err(Error::AllMissing);
        }
        let params = self.params();
        let mut x = self.init_state(p);
        let mut vel = matches!(self.solver.update, UpdateRule::Momentum { .. })
            .then(|| Tensor::zeros(&p.state_shape()));
        let mut hid = self.hidden_shape(p).map(|s| Tensor::zeros(&s));
        for k in 0..self.solver.iterations {
            let g = Graph::new();
            let leaves: Vec<Var> = params.iter().map(|t| g.leaf(t.clone())).collect();
            let mv = self.vars(&g, &leaves);
            let y = g.leaf(Tensor::new(p.state_shape(), p.y.clone()));
            let (xn, vn, hn) = self.step(
                &g,
                &mv,
                p,
                y,
                k,
                g.leaf(x),
                vel.map(|v| g.leaf(v)),
                hid.map(|h| g.leaf(h)),
            );
            x = xn.value().as_ref().clone();
            vel = vn.map(|v| v.value().as_ref().clone());
            hid = hn.map(|h| h.value().as_ref().clone());
            if !x.is_finite() {
                return Err(Error::Diverged { iteration: k + 1 });
            }
        }
        Ok(p.to_array(&x))
    }

    /// Normalizes `y` with `stats`, solves, and maps back; the result is
    /// valid on every ocean pixel.
    pub fn infer(&self, y: &GappyField, stats: &NormStats) -> Result<GappyField> {
        let norm = normalize(y, stats)?;
        warn_if_unnormalized(&norm);
        let ocean = y.ocean_mask();
        let p = Problem::new(&norm, &ocean)?;
        let x = self.solve(&p)?;
        let (t, h, w) = y.dims();
        let valid = Array3::from_shape_fn((t, h, w), |(_, i, j)| ocean[[i, j]]);
        let out = GappyField::new(x, valid, y.meta.clone())?;
        denormalize(&out, stats)
    }
}

/// Logs a warning when the valid mean is far from zero in normalized units.
pub fn warn_if_unnormalized(field: &GappyField) {
    let n = field.valid_count();
    if n == 0 {
        return;
    }
    let mean = field.iter_valid().sum::<f64>() / n as f64;
    if mean.abs() > 5.0 {
        warn!("input mean {mean:.3} is far from zero; was it normalized with its own statistics?");
    }
}

#[allow(clippy::too_many_arguments)]
fn cost_var<'g>(
    g: &'g Graph,
    x: Var<'g>,
    y: Var<'g>,
    p: &Problem,
    prior: &PriorModel,
    prior_vars: &[Var<'g>],
    lambda1: Var<'g>,
    lambda2: Var<'g>,
) -> Var<'g> {
    let fit = (x - y).mul_const(&p.omega).sum_sq();
    let reg = (x - prior.apply(g, x, prior_vars, &p.ocean))
        .mul_const(&p.ocean)
        .sum_sq();
    fit * lambda1 + reg * lambda2
}

fn cost_graph<'g>(
    g: &'g Graph,
    x: &Array3<f64>,
    p: &Problem,
    prior: &PriorModel,
    lambda1: f64,
    lambda2: f64,
) -> Result<(Var<'g>, Var<'g>)> {
    let xv = g.leaf(p.state_tensor(x)?);
    let y = g.leaf(Tensor::new(p.state_shape(), p.y.clone()));
    let pv = prior.leaves(g);
    let l1 = g.leaf(Tensor::scalar(lambda1));
    let l2 = g.leaf(Tensor::scalar(lambda2));
    Ok((cost_var(g, xv, y, p, prior, &pv, l1, l2), xv))
}

pub fn cost(
    x: &Array3<f64>,
    p: &Problem,
    prior: &PriorModel,
    lambda1: f64,
    lambda2: f64,
) -> Result<f64> {
    let g = Graph::new();
    Ok(cost_graph(&g, x, p, prior, lambda1, lambda2)?.0.item())
}

pub fn grad_cost(
    x: &Array3<f64>,
    p: &Problem,
    prior: &PriorModel,
    lambda1: f64,
    lambda2: f64,
) -> Result<Array3<f64>> {
    let g = Graph::new();
    let (u, xv) = cost_graph(&g, x, p, prior, lambda1, lambda2)?;
    let grad = g.grad(u, &[xv])[0];
    Ok(p.to_array(&grad.value()))
}

impl Trainable for VariationalModel {
    /// Prior weights, then for the learned rule: `ln λ1`, `ln λ2`, `ln α`,
    /// the per-iteration gains and the gate filters.
    fn params(&self) -> Vec<Tensor> {
        let mut out = self.prior.params();
        if let UpdateRule::Learned(l) = &self.solver.update {
            out.push(Tensor::scalar(self.solver.lambda1.ln()));
            out.push(Tensor::scalar(self.solver.lambda2.ln()));
            out.push(Tensor::scalar(l.alpha.ln()));
            out.extend(l.gains.iter().map(|&v| Tensor::scalar(v)));
            out.extend([l.wg.clone(), l.wh.clone(), l.wt.clone()]);
        }
        out
    }

    fn set_params(&mut self, params: &[Tensor]) {
        let np = self.prior.params().len();
        self.prior.set_params(&params[..np]);
        if let UpdateRule::Learned(l) = &mut self.solver.update {
            let rest = &params[np..];
            let k = l.gains.len();
            self.solver.lambda1 = rest[0].item().exp();
            self.solver.lambda2 = rest[1].item().exp();
            l.alpha = rest[2].item().exp();
            for (gain, t) in l.gains.iter_mut().zip(&rest[3..3 + k]) {
                *gain = t.item();
            }
            l.wg = rest[3 + k].clone();
            l.wh = rest[4 + k].clone();
            l.wt = rest[5 + k].clone();
        }
    }

    fn predict<'g>(&self, g: &'g Graph, params: &[Var<'g>], s: &Sample) -> Result<Var<'g>> {
        let p = Problem::from_sample(s);
        Ok(self.unrolled(g, params, &p))
    }
}
