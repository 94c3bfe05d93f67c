//! Patch layouts for domains larger than a model window, and overlap-mean merging.

use ndarray::{s, Array2, Array3};

use crate::error::{Error, Result};
use crate::field::{FieldMeta, GappyField};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileLayout {
    pub patch_h: usize,
    pub patch_w: usize,
    pub h: usize,
    pub w: usize,
    /// Row-major sorted patch corners.
    pub origins: Vec<(usize, usize)>,
}

/// Evenly spaced origins along one axis, first at 0 and last at `len - patch`.
pub fn plan_axis(len: usize, patch: usize, min_overlap: usize) -> Vec<usize> {
    if patch >= len {
        return vec![0];
    }
    let span = len - patch;
    let stride = patch - min_overlap;
    let n = span.div_ceil(stride) + 1;
    (0..n)
        .map(|i| ((i * span) as f64 / (n - 1) as f64).round() as usize)
        .collect()
}

pub fn plan_tiles(
    h: usize,
    w: usize,
    patch_h: usize,
    patch_w: usize,
    min_overlap_h: usize,
    min_overlap_w: usize,
) -> Result<TileLayout> {
    if patch_h == 0 || patch_w == 0 || patch_h > h || patch_w > w {
        return Err(Error::PatchTooLarge {
            patch_h,
            patch_w,
            h,
            w,
        });
    }
    if min_overlap_h >= patch_h || min_overlap_w >= patch_w {
        return Err(Error::InvalidSpec(format!(
            "overlap {min_overlap_h}x{min_overlap_w} must be smaller than patch {patch_h}x{patch_w}"
        )));
    }
    let rows = plan_axis(h, patch_h, min_overlap_h);
    let cols = plan_axis(w, patch_w, min_overlap_w);
    let origins = rows
        .iter()
        .flat_map(|&r| cols.iter().map(move |&c| (r, c)))
        .collect();
    Ok(TileLayout {
        patch_h,
        patch_w,
        h,
        w,
        origins,
    })
}

impl TileLayout {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    /// Number of patches covering each pixel.
    pub fn coverage(&self) -> Array2<u32> {
        let mut c = Array2::zeros((self.h, self.w));
        for &(r, q) in &self.origins {
            c.slice_mut(s![r..r + self.patch_h, q..q + self.patch_w])
                .mapv_inplace(|v| v + 1);
        }
        c
    }

    /// Smallest overlap between neighbouring patches along rows and columns
    /// (`None` along an axis with a single patch).
    pub fn min_overlaps(&self) -> (Option<usize>, Option<usize>) {
        let axis = |mut v: Vec<usize>, p: usize| {
            v.sort_unstable();
            v.dedup();
            v.windows(2).map(|a| p - (a[1] - a[0])).min()
        };
        (
            axis(self.origins.iter().map(|o| o.0).collect(), self.patch_h),
            axis(self.origins.iter().map(|o| o.1).collect(), self.patch_w),
        )
    }

    pub fn split(&self, field: &GappyField) -> Result<Vec<GappyField>> {
        self.check_domain(field)?;
        self.origins
            .iter()
            .map(|&(r, c)| field.crop(r, c, self.patch_h, self.patch_w))
            .collect()
    }

    fn check_domain(&self, field: &GappyField) -> Result<()> {
        let (_, h, w) = field.dims();
        if (h, w) != (self.h, self.w) {
            return Err(Error::ShapeMismatch(format!(
                "field {h}x{w} vs layout {}x{}",
                self.h, self.w
            )));
        }
        Ok(())
    }
}

/// Mean of all valid patch values covering each pixel.
///
/// Summation follows the sorted origin order, so the result does not depend
/// on the order of `patches`. An `ocean` pixel outside every patch is a
/// [`Error::CoverageGap`]; a covered pixel with no valid value stays missing.
pub fn merge(
    layout: &TileLayout,
    patches: &[((usize, usize), GappyField)],
    ocean: &Array2<bool>,
    meta: FieldMeta,
) -> Result<GappyField> {
    let first = patches.first().ok_or(Error::EmptySelection)?;
    let t = first.1.dims().0;
    let mut order: Vec<&((usize, usize), GappyField)> = patches.iter().collect();
    order.sort_by_key(|p| p.0);
    let mut sum = Array3::<f64>::zeros((t, layout.h, layout.w));
    let mut count = Array3::<u32>::zeros((t, layout.h, layout.w));
    for ((r, c), patch) in order {
        if patch.dims() != (t, layout.patch_h, layout.patch_w) {
            return Err(Error::ShapeMismatch(format!(
                "patch at ({r}, {c}) has shape {:?}",
                patch.dims()
            )));
        }
        if r + layout.patch_h > layout.h || c + layout.patch_w > layout.w {
            return Err(Error::PatchTooLarge {
                patch_h: layout.patch_h,
                patch_w: layout.patch_w,
                h: layout.h,
                w: layout.w,
            });
        }
        let window = s![.., *r..r + layout.patch_h, *c..c + layout.patch_w];
        let mut sv = sum.slice_mut(window);
        let mut cv = count.slice_mut(window);
        ndarray::Zip::from(&mut sv)
            .and(&mut cv)
            .and(patch.values())
            .and(patch.valid())
            .for_each(|s, n, &v, &ok| {
                if ok {
                    *s += v;
                    *n += 1;
                }
            });
    }
    let covered = layout.coverage();
    if let Some(((i, j), _)) = covered
        .indexed_iter()
        .find(|&((i, j), &c)| c == 0 && ocean[[i, j]])
    {
        return Err(Error::CoverageGap { row: i, col: j });
    }
    let valid = count.mapv(|n| n > 0);
    ndarray::Zip::from(&mut sum)
        .and(&count)
        .for_each(|s, &n| *s /= n.max(1) as f64);
    GappyField::new(sum, valid, meta)
}

/// Runs `infer` on every patch of `layout` and merges the results.
///
/// Patches are independent; with `workers > 1` they are spread over threads.
pub fn tile_infer<F>(y: &GappyField, layout: &TileLayout, workers: usize, infer: F) -> Result<GappyField>
where
    F: Fn(&GappyField) -> Result<GappyField> + Sync,
{
    let inputs = layout.split(y)?;
    let outputs: Vec<GappyField> = if workers <= 1 || inputs.len() <= 1 {
        inputs.iter().map(&infer).collect::<Result<_>>()?
    } else {
        let chunk = inputs.len().div_ceil(workers);
        let infer = &infer;
        std::thread::scope(|scope| {
            let handles: Vec<_> = inputs
                .chunks(chunk)
                .map(|part| scope.spawn(move || part.iter().map(infer).collect::<Result<Vec<_>>>()))
                .collect();
            let mut out = Vec::with_capacity(inputs.len());
            for h in handles {
                out.extend(h.join().expect("tile worker panicked")?);
            }
            Ok::<_, Error>(out)
        })?
    };
    let patches: Vec<_> = layout.origins.iter().copied().zip(outputs).collect();
    merge(layout, &patches, &y.ocean_mask(), y.meta.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field(t: usize, h: usize, w: usize) -> GappyField {
        let v = Array3::from_shape_fn((t, h, w), |(k, i, j)| (k * 1000 + i * 37 + j) as f64 * 0.01);
        GappyField::new(v, Array3::from_elem((t, h, w), true), FieldMeta::default()).unwrap()
    }

    #[test]
    fn axis_enumeration() {
        assert_eq!(plan_axis(10, 6, 2), vec![0, 4]);
        assert_eq!(plan_axis(240, 240, 0), vec![0]);
        assert_eq!(plan_axis(300, 240, 180), vec![0, 60]);
        assert_eq!(plan_axis(300, 240, 0), vec![0, 60]);
    }

    #[test]
    fn mediterranean_grid() {
        let l = plan_tiles(1580, 3308, 240, 240, 106, 122).unwrap();
        assert_eq!(l.len(), 297);
        let (rows, cols) = l.min_overlaps();
        assert!(rows.unwrap() >= 106 && cols.unwrap() >= 122);
        assert!(l.coverage().iter().all(|&c| c >= 1));
    }

    #[test]
    fn single_patch_equals_direct_inference() {
        let y = field(2, 6, 8);
        let layout = plan_tiles(6, 8, 6, 8, 0, 0).unwrap();
        let shift = |f: &GappyField| Ok(f.map_valid(|v| v.sqrt() + 1.0));
        let tiled = tile_infer(&y, &layout, 1, shift).unwrap();
        assert_eq!(tiled.values(), shift(&y).unwrap().values());
    }

    #[test]
    fn whole_domain_patch() {
        let l = plan_tiles(16, 20, 16, 20, 3, 3).unwrap();
        assert_eq!(l.origins, vec![(0, 0)]);
    }

    #[test]
    fn bad_plans() {
        assert!(matches!(
            plan_tiles(10, 10, 12, 4, 0, 0),
            Err(Error::PatchTooLarge { .. })
        ));
        assert!(plan_tiles(10, 10, 4, 4, 4, 0).is_err());
    }

    #[test]
    fn overlap_mean() {
        let layout = plan_tiles(1, 3, 1, 2, 0, 1).unwrap();
        assert_eq!(layout.origins, vec![(0, 0), (0, 1)]);
        let patch = |a: f64, b: f64| {
            GappyField::new(
                Array3::from_shape_vec((1, 1, 2), vec![a, b]).unwrap(),
                Array3::from_elem((1, 1, 2), true),
                FieldMeta::default(),
            )
            .unwrap()
        };
        let ocean = Array2::from_elem((1, 3), true);
        let m = merge(
            &layout,
            &[((0, 0), patch(5.0, 1.0)), ((0, 1), patch(3.0, 7.0))],
            &ocean,
            FieldMeta::default(),
        )
        .unwrap();
        assert_eq!(m.values().as_slice().unwrap(), &[5.0, 2.0, 7.0]);
    }

    #[test]
    fn identity_round_trip_and_order_independence() {
        let y = field(2, 24, 30);
        let layout = plan_tiles(24, 30, 10, 12, 3, 4).unwrap();
        let patches: Vec<_> = layout.origins.iter().copied().zip(layout.split(&y).unwrap()).collect();
        let ocean = y.ocean_mask();
        let merged = merge(&layout, &patches, &ocean, y.meta.clone()).unwrap();
        for (a, b) in merged.values().iter().zip(y.values()) {
            assert!((a - b).abs() <= 1e-12);
        }
        let mut rev = patches.clone();
        rev.reverse();
        let merged2 = merge(&layout, &rev, &ocean, y.meta.clone()).unwrap();
        assert_eq!(merged.values(), merged2.values());
        assert!(layout.coverage().iter().all(|&c| c >= 1));
    }

    #[test]
    fn uncovered_ocean_is_reported() {
        let layout = TileLayout {
            patch_h: 2,
            patch_w: 2,
            h: 2,
            w: 4,
            origins: vec![(0, 0)],
        };
        let y = field(1, 2, 4);
        let p = y.crop(0, 0, 2, 2).unwrap();
        let err = merge(&layout, &[((0, 0), p)], &y.ocean_mask(), y.meta.clone()).unwrap_err();
        assert!(matches!(err, Error::CoverageGap { row: 0, col: 2 }));
    }

    #[test]
    fn threaded_tiling_matches_sequential() {
        let y = field(1, 20, 20);
        let layout = plan_tiles(20, 20, 8, 8, 2, 2).unwrap();
        let double = |f: &GappyField| Ok(f.map_valid(|v| 2.0 * v));
        let a = tile_infer(&y, &layout, 1, double).unwrap();
        let b = tile_infer(&y, &layout, 3, double).unwrap();
        assert_eq!(a.values(), b.values());
    }
}
