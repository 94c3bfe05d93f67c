//! Scores on pixels visible in the target but hidden from the observation,
//! monthly aggregation, and error-map output.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{Datelike, NaiveDate};
use ndarray::{Array2, Array3, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{compute_stats, denormalize, GappyField, NormStats, Transform};

/// `true` where the target is valid and the observation is not.
pub fn eval_mask(target: &GappyField, obs: &GappyField) -> Result<Array3<bool>> {
    if target.dims() != obs.dims() {
        return Err(Error::ShapeMismatch(format!(
            "target {:?} vs observation {:?}",
            target.dims(),
            obs.dims()
        )));
    }
    let mut mask = target.valid().clone();
    Zip::from(&mut mask).and(obs.valid()).for_each(|m, &o| *m = *m && !o);
    Ok(mask)
}

fn masked_pairs<'a, D: ndarray::Dimension>(
    pred: &'a ndarray::Array<f64, D>,
    target: &'a ndarray::Array<f64, D>,
    mask: &'a ndarray::Array<bool, D>,
) -> Result<impl Iterator<Item = (f64, f64)> + 'a> {
    if pred.shape() != target.shape() || pred.shape() != mask.shape() {
        return Err(Error::ShapeMismatch("prediction, target and mask differ".into()));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::EmptyMask);
    }
    Ok(pred
        .iter()
        .zip(target)
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|((&p, &t), _)| (p, t)))
}

/// `sqrt(mean((log10 pred − log10 target)²))` over the mask.
pub fn rmsle<D: ndarray::Dimension>(
    pred: &ndarray::Array<f64, D>,
    target: &ndarray::Array<f64, D>,
    mask: &ndarray::Array<bool, D>,
) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (p, t) in masked_pairs(pred, target, mask)? {
        for v in [p, t] {
            if !(v > 0.0) {
                return Err(Error::NonPositiveValue(v));
            }
        }
        sum += (p.log10() - t.log10()).powi(2);
        n += 1;
    }
    Ok((sum / n as f64).sqrt())
}

/// Mean of `|target − pred| / |target|`, in percent.
pub fn relative_error<D: ndarray::Dimension>(
    pred: &ndarray::Array<f64, D>,
    target: &ndarray::Array<f64, D>,
    mask: &ndarray::Array<bool, D>,
) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (p, t) in masked_pairs(pred, target, mask)? {
        if t == 0.0 {
            return Err(Error::ZeroTarget);
        }
        sum += (t - p).abs() / t.abs();
        n += 1;
    }
    Ok(100.0 * sum / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub frame: usize,
    pub date: NaiveDate,
    pub n_eval: usize,
    /// `None` when nothing is hidden in this frame.
    pub rmsle: Option<f64>,
    pub re_percent: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rmsle: f64,
    pub re_percent: f64,
    pub n_eval: usize,
    pub frames: Vec<FrameMetrics>,
}

/// Scores a physical-space prediction against the target on the hidden pixels.
pub fn evaluate(pred: &GappyField, target: &GappyField, obs: &GappyField) -> Result<MetricsReport> {
    let mask = eval_mask(target, obs)?;
    if pred.dims() != target.dims() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {:?} vs target {:?}",
            pred.dims(),
            target.dims()
        )));
    }
    // A prediction valid nowhere on the mask (the observation itself, say)
    // leaves nothing to score; one with holes on the mask is incomplete.
    let mut missing = None;
    let mut covered = 0usize;
    Zip::indexed(&mask).and(pred.valid()).for_each(|idx, &m, &p| {
        if m && p {
            covered += 1;
        } else if m && missing.is_none() {
            missing = Some(idx);
        }
    });
    if covered == 0 {
        return Err(Error::EmptyMask);
    }
    if let Some((t, i, j)) = missing {
        return Err(Error::InsufficientData(format!(
            "prediction missing at evaluated pixel ({t}, {i}, {j})"
        )));
    }
    let (p, tv) = (pred.values(), target.values());
    let rmsle_all = rmsle(p, tv, &mask)?;
    let re_all = relative_error(p, tv, &mask)?;
    let frames = (0..mask.dim().0)
        .map(|k| {
            let m = mask.index_axis(ndarray::Axis(0), k).to_owned();
            let pk = p.index_axis(ndarray::Axis(0), k).to_owned();
            let tk = tv.index_axis(ndarray::Axis(0), k).to_owned();
            let n_eval = m.iter().filter(|&&b| b).count();
            Ok(FrameMetrics {
                frame: k,
                date: target.frame_date(k),
                n_eval,
                rmsle: (n_eval > 0).then(|| rmsle(&pk, &tk, &m)).transpose()?,
                re_percent: (n_eval > 0).then(|| relative_error(&pk, &tk, &m)).transpose()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport {
        rmsle: rmsle_all,
        re_percent: re_all,
        n_eval: mask.iter().filter(|&&b| b).count(),
        frames,
    })
}

/// [`evaluate`] for a prediction still in normalized space.
pub fn evaluate_normalized(
    pred: &GappyField,
    target: &GappyField,
    obs: &GappyField,
    stats: &NormStats,
) -> Result<MetricsReport> {
    evaluate(&denormalize(pred, stats)?, target, obs)
}

/// Per-pixel mean over the valid frames dated in `year`-`month`.
pub fn monthly_mean(field: &GappyField, year: i32, month: u32) -> Result<GappyField> {
    let (t, h, w) = field.dims();
    let frames: Vec<usize> = (0..t)
        .filter(|&k| {
            let d = field.frame_date(k);
            d.year() == year && d.month() == month
        })
        .collect();
    if frames.is_empty() {
        return Err(Error::EmptySelection);
    }
    let mut sum = Array2::<f64>::zeros((h, w));
    let mut count = Array2::<usize>::zeros((h, w));
    for &k in &frames {
        for i in 0..h {
            for j in 0..w {
                if let Some(v) = field.get(k, i, j) {
                    sum[[i, j]] += v;
                    count[[i, j]] += 1;
                }
            }
        }
    }
    let values = Array3::from_shape_fn((1, h, w), |(_, i, j)| {
        sum[[i, j]] / count[[i, j]].max(1) as f64
    });
    let valid = Array3::from_shape_fn((1, h, w), |(_, i, j)| count[[i, j]] > 0);
    let mut meta = field.meta.clone();
    meta.time.t0 = NaiveDate::from_ymd_opt(year, month, 1).ok_or(Error::EmptySelection)?;
    GappyField::new(values, valid, meta)
}

/// Distinct `(year, month)` pairs of the time axis, in order.
pub fn months(field: &GappyField) -> Vec<(i32, u32)> {
    let mut out: Vec<(i32, u32)> = Vec::new();
    for k in 0..field.dims().0 {
        let d = field.frame_date(k);
        if out.last() != Some(&(d.year(), d.month())) {
            out.push((d.year(), d.month()));
        }
    }
    out
}

/// Linear grey scale used for an error map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorScale {
    pub min: f64,
    pub max: f64,
}

/// Writes `|log10 pred − log10 target|` on the mask as `<stem>.pgm` (P5),
/// `<stem>.csv` (row,col,error) and `<stem>.scale.txt` (grey 0 = min, 255 = max).
pub fn emit_error_map(
    pred: ArrayView2<f64>,
    target: ArrayView2<f64>,
    mask: ArrayView2<bool>,
    stem: &Path,
) -> Result<ErrorScale> {
    let (h, w) = mask.dim();
    if pred.dim() != (h, w) || target.dim() != (h, w) {
        return Err(Error::ShapeMismatch("error map inputs differ in shape".into()));
    }
    let mut errors = Vec::new();
    for i in 0..h {
        for j in 0..w {
            if mask[[i, j]] {
                let (p, t) = (pred[[i, j]], target[[i, j]]);
                for v in [p, t] {
                    if !(v > 0.0) {
                        return Err(Error::NonPositiveValue(v));
                    }
                }
                errors.push((i, j, (p.log10() - t.log10()).abs()));
            }
        }
    }
    let min = errors.iter().map(|e| e.2).fold(f64::INFINITY, f64::min);
    let max = errors.iter().map(|e| e.2).fold(f64::NEG_INFINITY, f64::max);
    let scale = if errors.is_empty() {
        ErrorScale { min: 0.0, max: 0.0 }
    } else {
        ErrorScale { min, max }
    };

    let mut pixels = vec![0u8; h * w];
    let span = scale.max - scale.min;
    for &(i, j, e) in &errors {
        if span > 0.0 {
            pixels[i * w + j] = (255.0 * (e - scale.min) / span).round() as u8;
        }
    }
    let mut pgm = format!("P5\n{w} {h}\n255\n").into_bytes();
    pgm.extend_from_slice(&pixels);
    fs::write(with_suffix(stem, ".pgm"), pgm)?;

    let mut csv = String::from("row,col,abs_log10_error\n");
    for (i, j, e) in &errors {
        csv.push_str(&format!("{i},{j},{e}\n"));
    }
    fs::write(with_suffix(stem, ".csv"), csv)?;
    fs::write(
        with_suffix(stem, ".scale.txt"),
        format!("min={}\nmax={}\n", scale.min, scale.max),
    )?;
    Ok(scale)
}

fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// `metric,value,n_eval` rows followed by a `frame,date,rmsle,re` section.
pub fn write_report_csv(report: &MetricsReport, path: &Path) -> Result<()> {
    let mut out = fs::File::create(path)?;
    writeln!(out, "metric,value,n_eval")?;
    writeln!(out, "rmsle,{},{}", report.rmsle, report.n_eval)?;
    writeln!(out, "re_percent,{},{}", report.re_percent, report.n_eval)?;
    writeln!(out, "frame,date,rmsle,re")?;
    for f in &report.frames {
        writeln!(out, "{},{},{},{}", f.frame, f.date, opt(f.rmsle), opt(f.re_percent))?;
    }
    Ok(())
}

/// One line per method: `method,RMSLE,RE%`.
pub fn write_comparison_csv(rows: &[(String, MetricsReport)], path: &Path) -> Result<()> {
    let mut out = fs::File::create(path)?;
    writeln!(out, "method,RMSLE,RE%")?;
    for (name, r) in rows {
        writeln!(out, "{name},{:.6},{:.4}", r.rmsle, r.re_percent)?;
    }
    Ok(())
}

/// Reference reconstruction: every ocean pixel set to the mean of the valid
/// values of `obs`, taken in `space`.
pub fn mean_fill(obs: &GappyField, space: Transform) -> Result<GappyField> {
    let stats = compute_stats(obs, space)?;
    let fill = space.inverse(stats.m);
    let (t, h, w) = obs.dims();
    let ocean = obs.ocean_mask();
    let valid = Array3::from_shape_fn((t, h, w), |(_, i, j)| ocean[[i, j]]);
    GappyField::new(Array3::from_elem((t, h, w), fill), valid, obs.meta.clone())
}
