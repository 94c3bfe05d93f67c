//! Trained interpolators behind one type, and their `GPM1` checkpoint container.
//!
//! ```text
//! GPM1
//! kind=variational|direct-net|dineof
//! <hyperparameters, one key=value per line>
//! tensors=name:d0xd1x..,name:...
//!
//! <little-endian f64 payload, tensors in header order>
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::info;

use crate::autodiff::Tensor;
use crate::dineof::{cross_validate, impute, DineofConfig};
use crate::direct_net::{DirectNet, DirectNetConfig};
use crate::error::{Error, Result};
use crate::field::{denormalize, normalize, GappyField, NormStats};
use crate::gfd::{parse_key, require, split_container};
use crate::training::Trainable;
use crate::var_solver::{
    ConvNetPrior, InitMode, LearnedUpdate, PriorModel, SolverSpec, UpdateRule, VariationalModel,
};

pub const GPM_MAGIC: &str = "GPM1";

/// Iterative EOF filling; nothing is learned, only its settings are stored.
#[derive(Debug, Clone, PartialEq)]
pub struct DineofModel {
    pub config: DineofConfig,
    /// Fixed number of modes; chosen by cross-validation when `None`.
    pub modes: Option<usize>,
}

impl DineofModel {
    pub fn infer(&self, y: &GappyField, stats: &NormStats) -> Result<GappyField> {
        let norm = normalize(y, stats)?;
        let (t, _, _) = y.dims();
        let n = y.ocean_mask().iter().filter(|&&o| o).count();
        let mut cfg = self.config.clone();
        cfg.max_modes = cfg.max_modes.min(t).min(n);
        let r = match self.modes {
            Some(r) => r,
            None => {
                let cv = cross_validate(&norm, &cfg)?;
                info!("cross-validation picked {} modes", cv.best_r);
                cv.best_r
            }
        };
        let out = impute(&norm, r, &cfg)?;
        denormalize(&out.field, stats)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Variational(VariationalModel),
    Direct(DirectNet),
    Dineof(DineofModel),
}

impl Model {
    pub fn kind(&self) -> &'static str {
        match self {
            Model::Variational(_) => "variational",
            Model::Direct(_) => "direct-net",
            Model::Dineof(_) => "dineof",
        }
    }

    /// Reconstructs `y` after normalizing it with `stats` (those of `y`'s own dataset).
    pub fn infer(&self, y: &GappyField, stats: &NormStats) -> Result<GappyField> {
        match self {
            Model::Variational(m) => m.infer(y, stats),
            Model::Direct(m) => m.infer(y, stats),
            Model::Dineof(m) => m.infer(y, stats),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut header = BTreeMap::new();
        let mut tensors: Vec<(String, Tensor)> = Vec::new();
        match self {
            Model::Variational(m) => encode_variational(m, &mut header, &mut tensors),
            Model::Direct(m) => {
                let c = m.config;
                header.insert("hidden", c.hidden.to_string());
                header.insert("window", c.window.to_string());
                header.insert("kernel", c.kernel.to_string());
                header.insert("seed", c.seed.to_string());
                for (name, t) in DIRECT_NAMES.iter().zip(m.params()) {
                    tensors.push((name.to_string(), t));
                }
            }
            Model::Dineof(m) => {
                let c = &m.config;
                header.insert("max_modes", c.max_modes.to_string());
                header.insert("conv_tol", c.conv_tol.to_string());
                header.insert("max_iters", c.max_iters.to_string());
                header.insert("cv_fraction", c.cv_fraction.to_string());
                header.insert("seed", c.seed.to_string());
                header.insert("modes", m.modes.map_or("cv".into(), |r| r.to_string()));
            }
        }
        let mut text = format!("{GPM_MAGIC}\nkind={}\n", self.kind());
        for (k, v) in &header {
            writeln!(text, "{k}={v}").expect("string write");
        }
        let list: Vec<String> = tensors
            .iter()
            .map(|(n, t)| {
                let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
                format!("{n}:{}", dims.join("x"))
            })
            .collect();
        writeln!(text, "tensors={}\n", list.join(",")).expect("string write");
        let mut out = text.into_bytes();
        for (_, t) in &tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let (map, payload) = split_container(bytes, GPM_MAGIC, path)?;
        let mut tensors = read_tensors(&map, payload)?;
        let model = match require(&map, "kind")? {
            "variational" => Model::Variational(decode_variational(&map, &mut tensors)?),
            "direct-net" => {
                let config = DirectNetConfig {
                    hidden: parse_key(&map, "hidden")?,
                    window: parse_key(&map, "window")?,
                    kernel: parse_key(&map, "kernel")?,
                    seed: parse_key(&map, "seed")?,
                };
                let params = DIRECT_NAMES
                    .iter()
                    .map(|n| take(&mut tensors, n))
                    .collect::<Result<Vec<_>>>()?;
                Model::Direct(DirectNet::from_params(config, params)?)
            }
            "dineof" => Model::Dineof(DineofModel {
                config: DineofConfig {
                    max_modes: parse_key(&map, "max_modes")?,
                    conv_tol: parse_key(&map, "conv_tol")?,
                    max_iters: parse_key(&map, "max_iters")?,
                    cv_fraction: parse_key(&map, "cv_fraction")?,
                    seed: parse_key(&map, "seed")?,
                },
                modes: match require(&map, "modes")? {
                    "cv" => None,
                    _ => Some(parse_key(&map, "modes")?),
                },
            }),
            other => return Err(Error::MalformedHeader(format!("unknown model kind `{other}`"))),
        };
        if let Some(name) = tensors.keys().next() {
            return Err(Error::MalformedHeader(format!("unused tensor `{name}`")));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::decode(&fs::read(path)?, path)
    }
}

const DIRECT_NAMES: [&str; 12] = [
    "enc_w", "enc_b", "a_w", "a_b", "b1_w", "b1_b", "b2_w", "b2_b", "dec_w", "dec_b", "out_w",
    "out_b",
];

fn encode_variational(
    m: &VariationalModel,
    header: &mut BTreeMap<&'static str, String>,
    tensors: &mut Vec<(String, Tensor)>,
) {
    let s = &m.solver;
    header.insert("prior", m.prior.kind().into());
    match &m.prior {
        PriorModel::Diffusion { nu } => {
            header.insert("nu", nu.to_string());
        }
        PriorModel::ConvNet(p) => {
            for (n, t) in [("w1", &p.w1), ("w2", &p.w2), ("w3", &p.w3), ("w4", &p.w4)] {
                tensors.push((n.into(), t.clone()));
            }
        }
        PriorModel::Zero => {}
    }
    header.insert("lambda1", s.lambda1.to_string());
    header.insert("lambda2", s.lambda2.to_string());
    header.insert("iterations", s.iterations.to_string());
    header.insert("alpha", s.update.alpha().to_string());
    header.insert(
        "init",
        match s.init {
            InitMode::ZeroFill => "zero-fill",
            InitMode::ObsFill => "obs-fill",
        }
        .into(),
    );
    match &s.update {
        UpdateRule::Plain { .. } => {
            header.insert("update", "plain".into());
        }
        UpdateRule::Momentum { beta, .. } => {
            header.insert("update", "momentum".into());
            header.insert("beta", beta.to_string());
        }
        UpdateRule::Learned(l) => {
            header.insert("update", "learned".into());
            header.insert("normalize_grad", l.normalize_grad.to_string());
            tensors.push(("gains".into(), Tensor::new(vec![l.gains.len()], l.gains.clone())));
            tensors.push(("wg".into(), l.wg.clone()));
            tensors.push(("wh".into(), l.wh.clone()));
            tensors.push(("wt".into(), l.wt.clone()));
        }
    }
}

fn decode_variational(
    map: &BTreeMap<String, String>,
    tensors: &mut BTreeMap<String, Tensor>,
) -> Result<VariationalModel> {
    let prior = match require(map, "prior")? {
        "zero" => PriorModel::Zero,
        "diffusion" => PriorModel::Diffusion {
            nu: parse_key(map, "nu")?,
        },
        "convnet" => PriorModel::ConvNet(ConvNetPrior {
            w1: take(tensors, "w1")?,
            w2: take(tensors, "w2")?,
            w3: take(tensors, "w3")?,
            w4: take(tensors, "w4")?,
        }),
        other => return Err(Error::MalformedHeader(format!("unknown prior `{other}`"))),
    };
    let alpha: f64 = parse_key(map, "alpha")?;
    let update = match require(map, "update")? {
        "plain" => UpdateRule::Plain { alpha },
        "momentum" => UpdateRule::Momentum {
            alpha,
            beta: parse_key(map, "beta")?,
        },
        "learned" => UpdateRule::Learned(LearnedUpdate {
            alpha,
            normalize_grad: parse_key(map, "normalize_grad")?,
            gains: take(tensors, "gains")?.into_data(),
            wg: take(tensors, "wg")?,
            wh: take(tensors, "wh")?,
            wt: take(tensors, "wt")?,
        }),
        other => return Err(Error::MalformedHeader(format!("unknown update `{other}`"))),
    };
    let init = match require(map, "init")? {
        "zero-fill" => InitMode::ZeroFill,
        "obs-fill" => InitMode::ObsFill,
        other => return Err(Error::MalformedHeader(format!("unknown init `{other}`"))),
    };
    let solver = SolverSpec {
        lambda1: parse_key(map, "lambda1")?,
        lambda2: parse_key(map, "lambda2")?,
        iterations: parse_key(map, "iterations")?,
        update,
        init,
    };
    if let PriorModel::ConvNet(p) = &prior {
        let ok = p.w1.shape().len() == 5
            && p.w1.shape() == p.w3.shape()
            && p.w1.shape() == p.w4.shape()
            && p.w2.shape() == [1, p.w1.shape()[0], p.w1.shape()[2], p.w1.shape()[3], p.w1.shape()[4]];
        if !ok {
            return Err(Error::ShapeMismatch("inconsistent prior filters".into()));
        }
    }
    if let UpdateRule::Learned(l) = &solver.update {
        let c = l.wg.shape().first().copied().unwrap_or(0);
        if l.wh.shape().get(..2) != Some(&[c, c][..]) || l.wt.shape() != [1, c, 1, 1, 1] {
            return Err(Error::ShapeMismatch("inconsistent gate filters".into()));
        }
    }
    VariationalModel::new(prior, solver)
}

fn read_tensors(map: &BTreeMap<String, String>, payload: &[u8]) -> Result<BTreeMap<String, Tensor>> {
    let list = require(map, "tensors")?;
    let mut out = BTreeMap::new();
    let mut offset = 0usize;
    for item in list.split(',').filter(|s| !s.is_empty()) {
        let (name, dims) = item
            .split_once(':')
            .ok_or_else(|| Error::MalformedHeader(format!("bad tensor entry `{item}`")))?;
        let shape: Vec<usize> = dims
            .split('x')
            .map(|d| d.parse().map_err(|_| Error::MalformedHeader(format!("bad tensor shape `{dims}`"))))
            .collect::<Result<_>>()?;
        let n: usize = shape.iter().product();
        let bytes = payload.get(offset..offset + 8 * n).ok_or_else(|| {
            Error::ShapeMismatch(format!("payload too short for tensor `{name}`"))
        })?;
        offset += 8 * n;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        out.insert(name.to_string(), Tensor::new(shape, data));
    }
    if offset != payload.len() {
        return Err(Error::ShapeMismatch(format!(
            "payload has {} bytes, header describes {offset}",
            payload.len()
        )));
    }
    Ok(out)
}

fn take(tensors: &mut BTreeMap<String, Tensor>, name: &str) -> Result<Tensor> {
    tensors
        .remove(name)
        .ok_or_else(|| Error::MalformedHeader(format!("missing tensor `{name}`")))
}
