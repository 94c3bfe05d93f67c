//! Data-interpolating EOF reconstruction.
//!
//! The gappy sequence is unfolded into a `T × N` time-space matrix over the
//! `N` ocean pixels. Missing entries start at zero (the mean in normalized
//! space) and are refilled from the rank-`r` truncation until they stop
//! changing. Observed entries are never touched. The number of modes is
//! chosen by holding out a small random set of valid pixels.

use log::warn;
use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::GappyField;
use crate::obs_sim::rng_for;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DineofConfig {
    pub max_modes: usize,
    /// Relative change of the reconstructed missing values between sweeps.
    pub conv_tol: f64,
    pub max_iters: usize,
    /// Fraction of valid pixels held out when selecting the number of modes.
    pub cv_fraction: f64,
    pub seed: u64,
}

impl Default for DineofConfig {
    fn default() -> Self {
        Self {
            max_modes: 10,
            conv_tol: 1e-5,
            max_iters: 200,
            cv_fraction: 0.03,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EofDecomposition {
    pub modes: usize,
    /// `N × r`, orthonormal columns.
    pub spatial_modes: DMatrix<f64>,
    /// `T × r`, orthonormal columns; the reconstruction is `U diag(s) Vᵀ`.
    pub temporal_amplitudes: DMatrix<f64>,
    /// Nonincreasing.
    pub singular_values: Vec<f64>,
    /// Pixel `(row, col)` of each matrix column.
    pub ocean_pixels: Vec<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct ImputeOutcome {
    pub field: GappyField,
    pub eof: EofDecomposition,
    pub iterations: usize,
    /// False when `max_iters` was reached first; `field` is then the last iterate.
    pub converged: bool,
    /// Frobenius distance between successive reconstructions, one per sweep.
    pub deltas: Vec<f64>,
}

struct Unfolded {
    x: DMatrix<f64>,
    pixels: Vec<(usize, usize)>,
    missing: Vec<(usize, usize)>,
}

fn unfold(obs: &GappyField) -> Unfolded {
    let (t, h, w) = obs.dims();
    let ocean = obs.ocean_mask();
    let pixels: Vec<(usize, usize)> = (0..h)
        .flat_map(|i| (0..w).map(move |j| (i, j)))
        .filter(|&(i, j)| ocean[[i, j]])
        .collect();
    let mut x = DMatrix::zeros(t, pixels.len());
    let mut missing = Vec::new();
    for (n, &(i, j)) in pixels.iter().enumerate() {
        for k in 0..t {
            match obs.get(k, i, j) {
                Some(v) => x[(k, n)] = v,
                None => missing.push((k, n)),
            }
        }
    }
    Unfolded { x, pixels, missing }
}

/// Indices of the `r` largest eigenvalues, descending.
fn top_eigenvectors(gram: DMatrix<f64>, r: usize) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    DMatrix::from_fn(eig.eigenvectors.nrows(), r, |i, k| {
        eig.eigenvectors[(i, order[k])]
    })
}

/// Rank-`r` projection of `x` evaluated at `entries` only.
fn truncated_at(x: &DMatrix<f64>, r: usize, entries: &[(usize, usize)]) -> Vec<f64> {
    let (t, n) = x.shape();
    if t <= n {
        let u = top_eigenvectors(x * x.transpose(), r);
        let coeff = u.transpose() * x;
        entries
            .iter()
            .map(|&(k, c)| (0..r).map(|m| u[(k, m)] * coeff[(m, c)]).sum())
            .collect()
    } else {
        let v = top_eigenvectors(x.transpose() * x, r);
        let proj = x * &v;
        entries
            .iter()
            .map(|&(k, c)| (0..r).map(|m| proj[(k, m)] * v[(c, m)]).sum())
            .collect()
    }
}

fn decompose(x: &DMatrix<f64>, r: usize, pixels: Vec<(usize, usize)>) -> EofDecomposition {
    let svd = x.clone().svd(true, true);
    let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let keep = &order[..r];
    EofDecomposition {
        modes: r,
        spatial_modes: DMatrix::from_fn(vt.ncols(), r, |n, k| vt[(keep[k], n)]),
        temporal_amplitudes: DMatrix::from_fn(u.nrows(), r, |t, k| u[(t, keep[k])]),
        singular_values: keep.iter().map(|&k| svd.singular_values[k]).collect(),
        ocean_pixels: pixels,
    }
}

pub fn impute(obs: &GappyField, r: usize, cfg: &DineofConfig) -> Result<ImputeOutcome> {
    let Unfolded {
        mut x,
        pixels,
        missing,
    } = unfold(obs);
    let (t, n) = x.shape();
    if n == 0 {
        return Err(Error::AllMissing);
    }
    let max = cfg.max_modes.min(t).min(n);
    if r == 0 || r > max {
        return Err(Error::RankTooLarge { requested: r, max });
    }

    let mut deltas = Vec::new();
    let mut converged = missing.is_empty();
    let mut iterations = 0;
    while !converged && iterations < cfg.max_iters {
        iterations += 1;
        let fresh = truncated_at(&x, r, &missing);
        let mut change = 0.0;
        let mut norm = 0.0;
        for (&(k, c), &v) in missing.iter().zip(&fresh) {
            change += (v - x[(k, c)]).powi(2);
            norm += v * v;
            x[(k, c)] = v;
        }
        let change = change.sqrt();
        deltas.push(change);
        let rel = if norm > 0.0 { change / norm.sqrt() } else { change };
        converged = rel < cfg.conv_tol;
    }
    if !converged {
        warn!("iterative EOF did not converge in {iterations} sweeps (r = {r})");
    }

    let (_, h, w) = obs.dims();
    let mut values = Array3::from_elem((t, h, w), f64::NAN);
    let mut valid = Array3::from_elem((t, h, w), false);
    for (c, &(i, j)) in pixels.iter().enumerate() {
        for k in 0..t {
            values[[k, i, j]] = match obs.get(k, i, j) {
                Some(v) => v,
                None => x[(k, c)],
            };
            valid[[k, i, j]] = true;
        }
    }
    let field = GappyField::new(values, valid, obs.meta.clone())?;
    Ok(ImputeOutcome {
        field,
        eof: decompose(&x, r, pixels),
        iterations,
        converged,
        deltas,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvResult {
    pub best_r: usize,
    /// Holdout RMSE for `r = 1..=max_modes`.
    pub curve: Vec<f64>,
}

/// Seeded holdout of valid pixels that leaves every ocean column observed.
pub fn holdout_mask(obs: &GappyField, fraction: f64, seed: u64) -> Result<Array3<bool>> {
    let (t, h, w) = obs.dims();
    let mut candidates: Vec<(usize, usize, usize)> = Vec::new();
    let mut per_pixel = Array2::<usize>::zeros((h, w));
    for k in 0..t {
        for i in 0..h {
            for j in 0..w {
                if obs.valid()[[k, i, j]] {
                    candidates.push((k, i, j));
                    per_pixel[[i, j]] += 1;
                }
            }
        }
    }
    let wanted = (fraction * candidates.len() as f64).ceil() as usize;
    let mut rng = rng_for(seed, 0xCF);
    candidates.shuffle(&mut rng);
    let mut mask = Array3::from_elem((t, h, w), false);
    let mut taken = 0;
    for (k, i, j) in candidates {
        if taken == wanted {
            break;
        }
        if per_pixel[[i, j]] > 1 {
            per_pixel[[i, j]] -= 1;
            mask[[k, i, j]] = true;
            taken += 1;
        }
    }
    if taken == 0 {
        return Err(Error::InsufficientData(
            "no pixel can be held out without emptying a column".into(),
        ));
    }
    Ok(mask)
}

pub fn cross_validate(obs: &GappyField, cfg: &DineofConfig) -> Result<CvResult> {
    if !(cfg.cv_fraction > 0.0 && cfg.cv_fraction <= 0.3) {
        return Err(Error::InvalidSpec(format!(
            "cv_fraction {} outside (0, 0.3]",
            cfg.cv_fraction
        )));
    }
    let (t, _, _) = obs.dims();
    let n = obs.ocean_mask().iter().filter(|&&o| o).count();
    let max = t.min(n);
    if cfg.max_modes == 0 || cfg.max_modes > max {
        return Err(Error::RankTooLarge {
            requested: cfg.max_modes,
            max,
        });
    }
    let held = holdout_mask(obs, cfg.cv_fraction, cfg.seed)?;
    let masked = crate::obs_sim::apply_mask(obs, &held)?;
    let truth: Vec<((usize, usize, usize), f64)> = held
        .indexed_iter()
        .filter(|(_, &m)| m)
        .map(|((k, i, j), _)| ((k, i, j), obs.values()[[k, i, j]]))
        .collect();

    let curve = (1..=cfg.max_modes)
        .map(|r| {
            let out = impute(&masked, r, cfg)?;
            let sse: f64 = truth
                .iter()
                .map(|&((k, i, j), v)| (out.field.values()[[k, i, j]] - v).powi(2))
                .sum();
            Ok((sse / truth.len() as f64).sqrt())
        })
        .collect::<Result<Vec<f64>>>()?;
    let best_r = curve
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(k, _)| k + 1)
        .expect("max_modes >= 1");
    Ok(CvResult { best_r, curve })
}
