//! Synthetic ground truth and simulated cloud gaps.
//!
//! Every generator is a pure function of its seeds, so training can draw fresh
//! masks on the fly and any run can be replayed.

use std::f64::consts::PI;

use ndarray::{Array2, Array3, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{FieldMeta, GappyField};

/// Deterministic 64-bit mixer used to derive independent stream seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(seed, stream))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CloudMaskConfig {
    /// Mean fraction of ocean pixels removed per frame.
    pub target_missing_fraction: f64,
    /// Per-frame fraction is drawn uniformly within `target ± jitter`.
    pub jitter: f64,
    pub blob_count_range: (usize, usize),
    /// Semi-axis range of the elliptical blobs, in pixels.
    pub blob_radius_range: (f64, f64),
    pub seed: u64,
}

impl Default for CloudMaskConfig {
    fn default() -> Self {
        Self {
            target_missing_fraction: 0.45,
            jitter: 0.15,
            blob_count_range: (1, 200),
            blob_radius_range: (1.5, 5.0),
            seed: 0,
        }
    }
}

impl CloudMaskConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.blob_radius_range;
        if !(0.0..1.0).contains(&self.target_missing_fraction)
            || self.blob_count_range.0 > self.blob_count_range.1
            || !(lo > 0.0 && lo <= hi)
            || self.jitter < 0.0
        {
            return Err(Error::InvalidSpec(format!("bad cloud mask config {self:?}")));
        }
        Ok(())
    }
}

/// Union of random ellipses covering ocean pixels; `true` marks a removed pixel.
///
/// Blobs are added until the frame's drawn target fraction is reached or the
/// blob budget runs out. Land pixels are never marked.
pub fn gen_cloud_mask(
    shape: (usize, usize),
    cfg: &CloudMaskConfig,
    frame_seed: u64,
    land: Option<&Array2<bool>>,
) -> Array2<bool> {
    let (h, w) = shape;
    let mut mask = Array2::from_elem((h, w), false);
    let max_blobs = cfg.blob_count_range.1;
    if cfg.target_missing_fraction <= 0.0 || max_blobs == 0 {
        return mask;
    }
    let is_land = |i: usize, j: usize| land.is_some_and(|l| l[[i, j]]);
    let ocean = (0..h)
        .flat_map(|i| (0..w).map(move |j| (i, j)))
        .filter(|&(i, j)| !is_land(i, j))
        .count();
    if ocean == 0 {
        return mask;
    }

    let mut rng = rng_for(cfg.seed, frame_seed);
    let target = (cfg.target_missing_fraction + rng.random_range(-1.0..=1.0) * cfg.jitter)
        .clamp(0.0, 0.98);
    let (rlo, rhi) = cfg.blob_radius_range;
    let mut covered = 0usize;
    for k in 0..max_blobs {
        if k >= cfg.blob_count_range.0 && covered as f64 >= target * ocean as f64 {
            break;
        }
        let ci = rng.random_range(0.0..h as f64);
        let cj = rng.random_range(0.0..w as f64);
        let a = rng.random_range(rlo..=rhi);
        let b = rng.random_range(rlo..=rhi);
        let theta = rng.random_range(0.0..PI);
        let (st, ct) = theta.sin_cos();
        let reach = a.max(b).ceil() as isize + 1;
        let (i0, j0) = (ci.floor() as isize, cj.floor() as isize);
        for i in (i0 - reach).max(0)..=(i0 + reach).min(h as isize - 1) {
            for j in (j0 - reach).max(0)..=(j0 + reach).min(w as isize - 1) {
                let (du, dv) = (i as f64 + 0.5 - ci, j as f64 + 0.5 - cj);
                let (u, v) = (ct * du + st * dv, -st * du + ct * dv);
                let (iu, ju) = (i as usize, j as usize);
                if (u / a).powi(2) + (v / b).powi(2) <= 1.0 && !mask[[iu, ju]] && !is_land(iu, ju) {
                    mask[[iu, ju]] = true;
                    covered += 1;
                }
            }
        }
    }
    mask
}

/// One mask per frame, with frame seeds `base_seed + t`.
pub fn gen_cloud_masks(
    shape: (usize, usize, usize),
    cfg: &CloudMaskConfig,
    base_seed: u64,
    land: Option<&Array2<bool>>,
) -> Array3<bool> {
    let (t, h, w) = shape;
    let mut out = Array3::from_elem((t, h, w), false);
    for (k, mut frame) in out.axis_iter_mut(Axis(0)).enumerate() {
        frame.assign(&gen_cloud_mask((h, w), cfg, base_seed.wrapping_add(k as u64), land));
    }
    out
}

/// Hides `mask`ed pixels; never creates validity.
pub fn apply_mask(field: &GappyField, mask: &Array3<bool>) -> Result<GappyField> {
    if mask.dim() != field.dims() {
        return Err(Error::ShapeMismatch(format!(
            "mask {:?} vs field {:?}",
            mask.dim(),
            field.dims()
        )));
    }
    let mut valid = field.valid().clone();
    Zip::from(&mut valid).and(mask).for_each(|v, &m| *v = *v && !m);
    GappyField::new(field.values().clone(), valid, field.meta.clone())
}

/// Draws one cloud mask per frame and applies it.
pub fn simulate_observations(
    field: &GappyField,
    cfg: &CloudMaskConfig,
    base_seed: u64,
) -> Result<GappyField> {
    let land = field.land_mask();
    let masks = gen_cloud_masks(field.dims(), cfg, base_seed, Some(&land));
    apply_mask(field, &masks)
}

/// Fraction of ocean pixel-frames missing in `obs`, ocean taken from `reference`.
pub fn missing_fraction(obs: &GappyField, reference: &GappyField) -> f64 {
    let ocean = reference.ocean_mask();
    let (t, h, w) = obs.dims();
    let mut total = 0usize;
    let mut missing = 0usize;
    for k in 0..t {
        for i in 0..h {
            for j in 0..w {
                if ocean[[i, j]] {
                    total += 1;
                    if !obs.valid()[[k, i, j]] {
                        missing += 1;
                    }
                }
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        missing as f64 / total as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TruthMode {
    Lowrank,
    AdvectedBlobs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LandRect {
    pub row0: usize,
    pub col0: usize,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticTruthConfig {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub mode: TruthMode,
    /// Exact matrix rank in low-rank mode.
    pub rank: usize,
    /// Displacement per frame, `(rows, cols)`.
    pub velocity: (f64, f64),
    /// Gaussian blob width in pixels.
    pub smoothness: f64,
    pub n_blobs: usize,
    /// Mean of log10 values in advected-blobs mode.
    pub mean_log10: f64,
    /// Scale of log10 anomalies in advected-blobs mode.
    pub amplitude: f64,
    pub land: Option<LandRect>,
    pub seed: u64,
    pub meta: FieldMeta,
}

impl Default for SyntheticTruthConfig {
    fn default() -> Self {
        Self {
            t: 64,
            h: 32,
            w: 32,
            mode: TruthMode::AdvectedBlobs,
            rank: 2,
            velocity: (0.5, 1.0),
            smoothness: 3.0,
            n_blobs: 10,
            mean_log10: -2.5,
            amplitude: 0.25,
            land: None,
            seed: 0,
            meta: FieldMeta {
                var_name: "BBP443".into(),
                units: "m-1".into(),
                ..FieldMeta::default()
            },
        }
    }
}

fn land_grid(cfg: &SyntheticTruthConfig) -> Array2<bool> {
    let mut land = Array2::from_elem((cfg.h, cfg.w), false);
    if let Some(r) = cfg.land {
        for i in r.row0..(r.row0 + r.rows).min(cfg.h) {
            for j in r.col0..(r.col0 + r.cols).min(cfg.w) {
                land[[i, j]] = true;
            }
        }
    }
    land
}

/// Signed minimum-image offset on a periodic axis of length `n`.
fn wrap(d: f64, n: usize) -> f64 {
    let n = n as f64;
    d - n * (d / n).round()
}

pub fn gen_truth(cfg: &SyntheticTruthConfig) -> Result<GappyField> {
    let land = land_grid(cfg);
    let ocean = land.iter().filter(|&&l| !l).count();
    let values = match cfg.mode {
        TruthMode::Lowrank => {
            if cfg.t == 0 || cfg.h == 0 || cfg.w == 0 {
                return Err(Error::BadDimensions(format!("{}x{}x{}", cfg.t, cfg.h, cfg.w)));
            }
            if cfg.rank == 0 || cfg.rank > cfg.t.min(ocean) {
                return Err(Error::BadDimensions(format!(
                    "rank {} outside 1..={}",
                    cfg.rank,
                    cfg.t.min(ocean)
                )));
            }
            lowrank_values(cfg)
        }
        TruthMode::AdvectedBlobs => {
            if cfg.t < 4 || cfg.h < 8 || cfg.w < 8 {
                return Err(Error::BadDimensions(format!(
                    "advected blobs need at least 4x8x8, got {}x{}x{}",
                    cfg.t, cfg.h, cfg.w
                )));
            }
            blob_values(cfg)
        }
    };
    let valid = Array3::from_shape_fn((cfg.t, cfg.h, cfg.w), |(_, i, j)| !land[[i, j]]);
    GappyField::new(values, valid, cfg.meta.clone())
}

fn lowrank_values(cfg: &SyntheticTruthConfig) -> Array3<f64> {
    let mut rng = rng_for(cfg.seed, 1);
    let mut values = Array3::<f64>::zeros((cfg.t, cfg.h, cfg.w));
    for k in 0..cfg.rank {
        let scale = 1.0 / (1.0 + k as f64);
        let u: Vec<f64> = (0..cfg.t).map(|_| rng.sample(StandardNormal)).collect();
        let v: Vec<f64> = (0..cfg.h * cfg.w).map(|_| rng.sample(StandardNormal)).collect();
        for (idx, x) in values.iter_mut().enumerate() {
            let (t, p) = (idx / (cfg.h * cfg.w), idx % (cfg.h * cfg.w));
            *x += scale * u[t] * v[p];
        }
    }
    values
}

struct Blob {
    ci: f64,
    cj: f64,
    amp: f64,
    width: f64,
    period: f64,
    phase: f64,
}

fn blob_values(cfg: &SyntheticTruthConfig) -> Array3<f64> {
    let mut rng = rng_for(cfg.seed, 2);
    let blobs: Vec<Blob> = (0..cfg.n_blobs)
        .map(|_| Blob {
            ci: rng.random_range(0.0..cfg.h as f64),
            cj: rng.random_range(0.0..cfg.w as f64),
            amp: rng.random_range(0.5..1.5) * if rng.random_bool(0.5) { 1.0 } else { -1.0 },
            width: cfg.smoothness * rng.random_range(0.7..1.3),
            period: rng.random_range(30.0..90.0),
            phase: rng.random_range(0.0..2.0 * PI),
        })
        .collect();
    // Low-wavenumber background, periodic on the grid so it advects exactly.
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(1..=2) as f64,
                rng.random_range(0..=2) as f64,
                rng.random_range(0.2..0.5),
                rng.random_range(0.0..2.0 * PI),
            )
        })
        .collect();
    let (vi, vj) = cfg.velocity;
    Array3::from_shape_fn((cfg.t, cfg.h, cfg.w), |(t, i, j)| {
        let tf = t as f64;
        let (pi, pj) = (i as f64 - vi * tf, j as f64 - vj * tf);
        let mut anomaly = 0.0;
        for b in &blobs {
            let di = wrap(pi - b.ci, cfg.h);
            let dj = wrap(pj - b.cj, cfg.w);
            let modulation = 1.0 + 0.3 * (2.0 * PI * tf / b.period + b.phase).sin();
            anomaly +=
                b.amp * modulation * (-(di * di + dj * dj) / (2.0 * b.width * b.width)).exp();
        }
        for &(ki, kj, a, ph) in &waves {
            anomaly += a
                * (2.0 * PI * (ki * pi / cfg.h as f64 + kj * pj / cfg.w as f64) + ph).cos();
        }
        10f64.powf(cfg.mean_log10 + cfg.amplitude * anomaly)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn blobs_cfg() -> SyntheticTruthConfig {
        SyntheticTruthConfig {
            t: 6,
            h: 24,
            w: 24,
            velocity: (1.0, 0.0),
            seed: 11,
            ..Default::default()
        }
    }

    #[test]
    fn lowrank_rank_one() {
        let cfg = SyntheticTruthConfig {
            t: 8,
            h: 8,
            w: 8,
            mode: TruthMode::Lowrank,
            rank: 1,
            ..Default::default()
        };
        let f = gen_truth(&cfg).unwrap();
        let m = DMatrix::from_row_slice(8, 64, f.values().as_slice().unwrap());
        let sv = m.singular_values();
        let mut s: Vec<f64> = sv.iter().copied().collect();
        s.sort_by(|a, b| b.partial_cmp(a).unwrap());
        assert!(s[1] / s[0] < 1e-12);
    }

    #[test]
    fn truth_is_deterministic() {
        let a = gen_truth(&blobs_cfg()).unwrap();
        let b = gen_truth(&blobs_cfg()).unwrap();
        let bits = |f: &GappyField| f.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn truth_dimension_errors() {
        let small = SyntheticTruthConfig {
            t: 3,
            ..blobs_cfg()
        };
        assert!(matches!(gen_truth(&small), Err(Error::BadDimensions(_))));
        let rank = SyntheticTruthConfig {
            t: 4,
            mode: TruthMode::Lowrank,
            rank: 5,
            ..blobs_cfg()
        };
        assert!(matches!(gen_truth(&rank), Err(Error::BadDimensions(_))));
    }

    /// Circular cross-correlation oracle: lag maximizing
    /// `sum a(i, j) * b(i + di, j + dj)` over all lags.
    fn xcorr_peak(a: &Array2<f64>, b: &Array2<f64>) -> (usize, usize) {
        let (h, w) = a.dim();
        let (ma, mb) = (a.mean().unwrap(), b.mean().unwrap());
        let mut best = (f64::NEG_INFINITY, (0, 0));
        for di in 0..h {
            for dj in 0..w {
                let mut s = 0.0;
                for i in 0..h {
                    for j in 0..w {
                        s += (a[[i, j]] - ma) * (b[[(i + di) % h, (j + dj) % w]] - mb);
                    }
                }
                if s > best.0 {
                    best = (s, (di, dj));
                }
            }
        }
        best.1
    }

    #[test]
    fn blobs_advect_at_configured_velocity() {
        let f = gen_truth(&blobs_cfg()).unwrap();
        let logs = f.values().mapv(f64::log10);
        for t in 0..5 {
            let a = logs.index_axis(Axis(0), t).to_owned();
            let b = logs.index_axis(Axis(0), t + 1).to_owned();
            assert_eq!(xcorr_peak(&a, &b), (1, 0));
        }
        let diag = SyntheticTruthConfig {
            velocity: (0.0, 2.0),
            ..blobs_cfg()
        };
        let logs = gen_truth(&diag).unwrap().values().mapv(f64::log10);
        let a = logs.index_axis(Axis(0), 2).to_owned();
        let b = logs.index_axis(Axis(0), 3).to_owned();
        assert_eq!(xcorr_peak(&a, &b), (0, 2));
    }

    #[test]
    fn truth_respects_land() {
        let cfg = SyntheticTruthConfig {
            land: Some(LandRect {
                row0: 0,
                col0: 0,
                rows: 4,
                cols: 6,
            }),
            ..blobs_cfg()
        };
        let f = gen_truth(&cfg).unwrap();
        assert_eq!(f.land_mask().iter().filter(|&&l| l).count(), 24);
        assert_eq!(f.valid_count(), 6 * (24 * 24 - 24));
        assert!(f.iter_valid().all(|v| v > 0.0));
    }

    #[test]
    fn empty_mask_when_no_target() {
        let cfg = CloudMaskConfig {
            target_missing_fraction: 0.0,
            ..Default::default()
        };
        assert!(!gen_cloud_mask((16, 16), &cfg, 3, None).iter().any(|&m| m));
        let none = CloudMaskConfig {
            blob_count_range: (0, 0),
            ..Default::default()
        };
        assert!(!gen_cloud_mask((16, 16), &none, 3, None).iter().any(|&m| m));
    }

    #[test]
    fn masks_replay_and_vary() {
        let cfg = CloudMaskConfig::default();
        let a = gen_cloud_mask((32, 32), &cfg, 7, None);
        assert_eq!(a, gen_cloud_mask((32, 32), &cfg, 7, None));
        assert_ne!(a, gen_cloud_mask((32, 32), &cfg, 8, None));
    }

    #[test]
    fn mean_missing_fraction_tracks_target() {
        let cfg = CloudMaskConfig {
            target_missing_fraction: 0.45,
            seed: 5,
            ..Default::default()
        };
        let frames = 200;
        let total: f64 = (0..frames)
            .map(|k| {
                let m = gen_cloud_mask((64, 64), &cfg, k, None);
                m.iter().filter(|&&x| x).count() as f64 / 4096.0
            })
            .sum();
        let mean = total / frames as f64;
        assert!((0.35..=0.55).contains(&mean), "mean fraction {mean}");
    }

    #[test]
    fn masks_avoid_land() {
        let mut land = Array2::from_elem((16, 16), false);
        land.slice_mut(ndarray::s![..8, ..]).fill(true);
        let cfg = CloudMaskConfig {
            target_missing_fraction: 0.6,
            ..Default::default()
        };
        let m = gen_cloud_mask((16, 16), &cfg, 1, Some(&land));
        assert!(m.iter().zip(land.iter()).all(|(&c, &l)| !(c && l)));
        let frac = m.iter().filter(|&&x| x).count() as f64 / 128.0;
        assert!(frac > 0.3, "ocean fraction {frac}");
    }

    #[test]
    fn apply_mask_contract() {
        let f = gen_truth(&blobs_cfg()).unwrap();
        let empty = Array3::from_elem(f.dims(), false);
        let same = apply_mask(&f, &empty).unwrap();
        assert_eq!(same.valid(), f.valid());
        let full = Array3::from_elem(f.dims(), true);
        assert_eq!(apply_mask(&f, &full).unwrap().valid_count(), 0);
        let mut one = empty.clone();
        one[[2, 3, 4]] = true;
        let hidden = apply_mask(&f, &one).unwrap();
        assert!(!hidden.valid()[[2, 3, 4]]);
        assert!(hidden.values()[[2, 3, 4]].is_nan());
        assert!(f.valid()[[2, 3, 4]]);
        assert!(apply_mask(&f, &Array3::from_elem((1, 2, 3), false)).is_err());
    }

    #[test]
    fn observation_is_subset_of_target() {
        let f = gen_truth(&blobs_cfg()).unwrap();
        let obs = simulate_observations(&f, &CloudMaskConfig::default(), 99).unwrap();
        for ((o, ok), (t, tok)) in obs
            .values()
            .iter()
            .zip(obs.valid())
            .zip(f.values().iter().zip(f.valid()))
        {
            if *ok {
                assert!(*tok);
                assert_eq!(o.to_bits(), t.to_bits());
            }
        }
        assert!(missing_fraction(&obs, &f) > 0.1);
    }
}
