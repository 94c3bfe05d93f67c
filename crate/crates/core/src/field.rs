//! Gappy raster sequences, normalization statistics and time-axis selection.
//!
//! A [`GappyField`] is a `T×H×W` cube of values with a validity mask. Invalid
//! entries always hold NaN, but kernels consult the mask and never test the
//! values themselves.

use chrono::{Duration, NaiveDate};
use ndarray::{s, Array2, Array3, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Regular lat/lon grid anchoring pixel `(0, 0)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoRef {
    pub lat0: f64,
    pub lon0: f64,
    pub dlat: f64,
    pub dlon: f64,
}

impl Default for GeoRef {
    fn default() -> Self {
        Self {
            lat0: 0.0,
            lon0: 0.0,
            dlat: 0.01,
            dlon: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeAxis {
    pub t0: NaiveDate,
    pub dt_days: i64,
}

impl Default for TimeAxis {
    fn default() -> Self {
        Self {
            t0: NaiveDate::from_ymd_opt(2017, 1, 1).unwrap(),
            dt_days: 1,
        }
    }
}

impl TimeAxis {
    pub fn date(&self, t: usize) -> NaiveDate {
        self.t0 + Duration::days(self.dt_days * t as i64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldMeta {
    pub geo: GeoRef,
    pub time: TimeAxis,
    pub var_name: String,
    pub units: String,
}

impl Default for FieldMeta {
    fn default() -> Self {
        Self {
            geo: GeoRef::default(),
            time: TimeAxis::default(),
            var_name: "value".to_string(),
            units: "1".to_string(),
        }
    }
}

/// Sequence of `T` frames of `H×W` pixels with a validity mask.
#[derive(Debug, Clone)]
pub struct GappyField {
    values: Array3<f64>,
    valid: Array3<bool>,
    pub meta: FieldMeta,
}

impl GappyField {
    /// Builds a field, overwriting every invalid entry with NaN.
    pub fn new(mut values: Array3<f64>, valid: Array3<bool>, meta: FieldMeta) -> Result<Self> {
        if values.dim() != valid.dim() {
            return Err(Error::ShapeMismatch(format!(
                "values {:?} vs mask {:?}",
                values.dim(),
                valid.dim()
            )));
        }
        let (t, h, w) = values.dim();
        if t == 0 || h == 0 || w == 0 {
            return Err(Error::BadDimensions(format!("{t}x{h}x{w}")));
        }
        Zip::from(&mut values).and(&valid).for_each(|v, &ok| {
            if !ok {
                *v = f64::NAN;
            }
        });
        Ok(Self {
            values,
            valid,
            meta,
        })
    }

    /// Non-finite entries become missing.
    pub fn from_values(values: Array3<f64>, meta: FieldMeta) -> Result<Self> {
        let valid = values.mapv(f64::is_finite);
        Self::new(values, valid, meta)
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.values.dim()
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    pub fn valid(&self) -> &Array3<bool> {
        &self.valid
    }

    pub fn get(&self, t: usize, i: usize, j: usize) -> Option<f64> {
        self.valid[[t, i, j]].then(|| self.values[[t, i, j]])
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn iter_valid(&self) -> impl Iterator<Item = f64> + '_ {
        self.values
            .iter()
            .zip(self.valid.iter())
            .filter_map(|(&v, &ok)| ok.then_some(v))
    }

    /// Pixels never observed over the whole sequence.
    pub fn land_mask(&self) -> Array2<bool> {
        let (_, h, w) = self.dims();
        Array2::from_shape_fn((h, w), |(i, j)| {
            self.valid.slice(s![.., i, j]).iter().all(|&v| !v)
        })
    }

    pub fn ocean_mask(&self) -> Array2<bool> {
        self.land_mask().mapv(|l| !l)
    }

    pub fn frame_date(&self, t: usize) -> NaiveDate {
        self.meta.time.date(t)
    }

    /// Row-major copy with missing entries replaced by `fill`.
    pub fn filled(&self, fill: f64) -> Vec<f64> {
        self.values
            .iter()
            .zip(self.valid.iter())
            .map(|(&v, &ok)| if ok { v } else { fill })
            .collect()
    }

    pub fn mask_f64(&self) -> Vec<f64> {
        self.valid.iter().map(|&ok| if ok { 1.0 } else { 0.0 }).collect()
    }

    /// Applies `f` to every valid value; the mask is untouched.
    pub fn try_map_valid(&self, f: impl Fn(f64) -> Result<f64>) -> Result<Self> {
        let mut values = self.values.clone();
        for (v, &ok) in values.iter_mut().zip(self.valid.iter()) {
            if ok {
                *v = f(*v)?;
            }
        }
        Ok(Self {
            values,
            valid: self.valid.clone(),
            meta: self.meta.clone(),
        })
    }

    pub fn map_valid(&self, f: impl Fn(f64) -> f64) -> Self {
        self.try_map_valid(|v| Ok(f(v))).expect("infallible map")
    }

    /// Frames `start..end`; `t0` is shifted accordingly.
    pub fn frames(&self, start: usize, end: usize) -> Result<Self> {
        let (t, _, _) = self.dims();
        if start >= end || end > t {
            return Err(Error::EmptySelection);
        }
        let mut meta = self.meta.clone();
        meta.time.t0 = self.frame_date(start);
        Ok(Self {
            values: self.values.slice(s![start..end, .., ..]).to_owned(),
            valid: self.valid.slice(s![start..end, .., ..]).to_owned(),
            meta,
        })
    }

    /// Spatial sub-window; the geo anchor moves with the origin.
    pub fn crop(&self, row0: usize, col0: usize, h: usize, w: usize) -> Result<Self> {
        let (_, fh, fw) = self.dims();
        if h == 0 || w == 0 || row0 + h > fh || col0 + w > fw {
            return Err(Error::ShapeMismatch(format!(
                "crop {h}x{w} at ({row0}, {col0}) outside {fh}x{fw}"
            )));
        }
        let mut meta = self.meta.clone();
        meta.geo.lat0 += row0 as f64 * meta.geo.dlat;
        meta.geo.lon0 += col0 as f64 * meta.geo.dlon;
        Ok(Self {
            values: self
                .values
                .slice(s![.., row0..row0 + h, col0..col0 + w])
                .to_owned(),
            valid: self
                .valid
                .slice(s![.., row0..row0 + h, col0..col0 + w])
                .to_owned(),
            meta,
        })
    }

    pub fn into_parts(self) -> (Array3<f64>, Array3<bool>, FieldMeta) {
        (self.values, self.valid, self.meta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Transform {
    Physical,
    #[default]
    Log10,
}

impl Transform {
    pub fn forward(self, v: f64) -> Result<f64> {
        match self {
            Transform::Physical => Ok(v),
            Transform::Log10 if v > 0.0 => Ok(v.log10()),
            Transform::Log10 => Err(Error::NonPositiveValue(v)),
        }
    }

    pub fn inverse(self, v: f64) -> f64 {
        match self {
            Transform::Physical => v,
            Transform::Log10 => 10f64.powf(v),
        }
    }
}

/// Mean and population variance of a dataset, in the space selected by `space`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub m: f64,
    /// Variance, not standard deviation.
    pub sigma: f64,
    pub space: Transform,
}

impl NormStats {
    pub fn normalize_value(&self, v: f64) -> Result<f64> {
        Ok((self.space.forward(v)? - self.m) / self.sigma.sqrt())
    }

    pub fn denormalize_value(&self, v: f64) -> f64 {
        self.space.inverse(v * self.sigma.sqrt() + self.m)
    }
}

pub fn compute_stats(field: &GappyField, transform: Transform) -> Result<NormStats> {
    let vals = field
        .iter_valid()
        .map(|v| transform.forward(v))
        .collect::<Result<Vec<_>>>()?;
    if vals.is_empty() {
        return Err(Error::AllMissing);
    }
    let n = vals.len() as f64;
    let m = vals.iter().sum::<f64>() / n;
    let sigma = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
    if !(sigma > 0.0) {
        return Err(Error::ZeroVariance);
    }
    Ok(NormStats {
        m,
        sigma,
        space: transform,
    })
}

pub fn normalize(field: &GappyField, stats: &NormStats) -> Result<GappyField> {
    if !(stats.sigma > 0.0) {
        return Err(Error::ZeroVariance);
    }
    field.try_map_valid(|v| stats.normalize_value(v))
}

pub fn denormalize(field: &GappyField, stats: &NormStats) -> Result<GappyField> {
    if !(stats.sigma > 0.0) {
        return Err(Error::ZeroVariance);
    }
    Ok(field.map_valid(|v| stats.denormalize_value(v)))
}

/// Closed date interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DateInterval {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

impl DateInterval {
    pub fn new(start: NaiveDate, end: NaiveDate) -> Self {
        Self { start, end }
    }

    pub fn contains(&self, d: NaiveDate) -> bool {
        self.start <= d && d <= self.end
    }

    pub fn overlaps(&self, other: &DateInterval) -> bool {
        self.start <= other.end && other.start <= self.end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: DateInterval,
    pub valid: DateInterval,
    pub test: DateInterval,
}

impl SplitSpec {
    /// Checks disjointness and that every interval selects a frame of `field`.
    pub fn validate(&self, field: &GappyField) -> Result<()> {
        let parts = [self.train, self.valid, self.test];
        for (a, b) in [(0, 1), (0, 2), (1, 2)] {
            if parts[a].overlaps(&parts[b]) {
                return Err(Error::InvalidSpec(format!(
                    "split intervals {:?} and {:?} overlap",
                    parts[a], parts[b]
                )));
            }
        }
        for p in parts {
            select_frames(field, &p)?;
        }
        Ok(())
    }
}

/// Contiguous run of frames whose dates fall in `interval`.
pub fn select_frames(field: &GappyField, interval: &DateInterval) -> Result<GappyField> {
    let (t, _, _) = field.dims();
    let inside: Vec<usize> = (0..t)
        .filter(|&k| interval.contains(field.frame_date(k)))
        .collect();
    match (inside.first(), inside.last()) {
        (Some(&a), Some(&b)) => field.frames(a, b + 1),
        _ => Err(Error::EmptySelection),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn line(vals: &[f64]) -> GappyField {
        let a = Array3::from_shape_vec((1, 1, vals.len()), vals.to_vec()).unwrap();
        GappyField::from_values(a, FieldMeta::default()).unwrap()
    }

    fn date(y: i32, m: u32, d: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, d).unwrap()
    }

    #[test]
    fn stats_physical() {
        let s = compute_stats(&line(&[2.0, 4.0, f64::NAN, 6.0]), Transform::Physical).unwrap();
        assert!((s.m - 4.0).abs() < 1e-15);
        assert!((s.sigma - 8.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn stats_log10() {
        let s = compute_stats(&line(&[1.0, 10.0, 100.0]), Transform::Log10).unwrap();
        assert!((s.m - 1.0).abs() < 1e-15);
        assert!((s.sigma - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn stats_errors() {
        assert!(matches!(
            compute_stats(&line(&[3.0, 3.0, 3.0]), Transform::Physical),
            Err(Error::ZeroVariance)
        ));
        assert!(matches!(
            compute_stats(&line(&[f64::NAN, f64::NAN]), Transform::Physical),
            Err(Error::AllMissing)
        ));
        assert!(matches!(
            compute_stats(&line(&[1.0, -2.0]), Transform::Log10),
            Err(Error::NonPositiveValue(_))
        ));
    }

    #[test]
    fn normalize_three_values() {
        let f = line(&[2.0, 4.0, 6.0]);
        let s = compute_stats(&f, Transform::Physical).unwrap();
        let n = normalize(&f, &s).unwrap();
        let expect = [-1.224744871391589, 0.0, 1.224744871391589];
        for (a, b) in n.iter_valid().zip(expect) {
            assert!((a - b).abs() < 1e-4);
        }
        let back = denormalize(&n, &s).unwrap();
        for (a, b) in back.iter_valid().zip([2.0, 4.0, 6.0]) {
            assert!(((a - b) / b).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_stats_and_inverse_values() {
        let f = line(&[0.5, -1.0]);
        let id = NormStats {
            m: 0.0,
            sigma: 1.0,
            space: Transform::Physical,
        };
        let n = normalize(&f, &id).unwrap();
        assert_eq!(n.iter_valid().collect::<Vec<_>>(), vec![0.5, -1.0]);

        let s = NormStats {
            m: 5.0,
            sigma: 4.0,
            space: Transform::Physical,
        };
        assert_eq!(s.denormalize_value(0.0), 5.0);
        let s = NormStats {
            m: 1.0,
            sigma: 1.0,
            space: Transform::Log10,
        };
        assert!((s.denormalize_value(1.0) - 100.0).abs() < 1e-12);
    }

    #[test]
    fn normalize_rejects_non_positive_in_log_space() {
        let s = NormStats {
            m: 0.0,
            sigma: 1.0,
            space: Transform::Log10,
        };
        assert!(matches!(
            normalize(&line(&[1.0, 0.0]), &s),
            Err(Error::NonPositiveValue(_))
        ));
    }

    #[test]
    fn land_mask_is_all_time_invalid() {
        let mut v = Array3::<f64>::ones((3, 2, 2));
        for t in 0..3 {
            v[[t, 0, 1]] = f64::NAN;
        }
        v[[1, 1, 1]] = f64::NAN;
        let f = GappyField::from_values(v, FieldMeta::default()).unwrap();
        let land = f.land_mask();
        assert!(land[[0, 1]]);
        assert!(!land[[1, 1]]);
        assert_eq!(land.iter().filter(|&&l| l).count(), 1);
    }

    fn year_field() -> GappyField {
        let v = Array3::from_shape_fn((365, 2, 2), |(t, i, j)| (t + i + j) as f64);
        GappyField::from_values(v, FieldMeta::default()).unwrap()
    }

    #[test]
    fn select_whole_and_january() {
        let f = year_field();
        let all = select_frames(&f, &DateInterval::new(date(2016, 1, 1), date(2018, 1, 1))).unwrap();
        assert_eq!(all.dims(), f.dims());
        assert_eq!(all.meta, f.meta);

        let jan = select_frames(&f, &DateInterval::new(date(2017, 1, 1), date(2017, 1, 31))).unwrap();
        assert_eq!(jan.dims().0, 31);
        assert_eq!(jan.meta.time.t0, f.meta.time.t0);

        let feb = select_frames(&f, &DateInterval::new(date(2017, 2, 1), date(2017, 2, 28))).unwrap();
        assert_eq!(feb.meta.time.t0, date(2017, 2, 1));
        assert_eq!(feb.values()[[0, 0, 0]], 31.0);
    }

    #[test]
    fn select_disjoint_is_empty() {
        let f = year_field();
        let r = select_frames(&f, &DateInterval::new(date(2019, 1, 1), date(2019, 12, 31)));
        assert!(matches!(r, Err(Error::EmptySelection)));
    }

    #[test]
    fn split_validation() {
        let f = year_field();
        let ok = SplitSpec {
            train: DateInterval::new(date(2017, 1, 1), date(2017, 6, 30)),
            valid: DateInterval::new(date(2017, 7, 1), date(2017, 8, 31)),
            test: DateInterval::new(date(2017, 9, 1), date(2017, 12, 31)),
        };
        ok.validate(&f).unwrap();
        let overlapping = SplitSpec {
            valid: DateInterval::new(date(2017, 6, 30), date(2017, 8, 31)),
            ..ok
        };
        assert!(overlapping.validate(&f).is_err());
    }
}
