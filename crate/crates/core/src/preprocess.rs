//! CT preprocessing: HU clipping, cropping, resampling.
//!
//! Cropping clamps to grid bounds rather than zero-padding so downstream
//! metrics never see fabricated voxels. Resampling places voxel centers at
//! `origin + (index + 0.5) * spacing` and clamps boundary samples to the
//! edge.

use crate::error::{Result, UqError};
use crate::volume::{Bundle, GridMeta, LabelVolume, McStack, ProbVolume, ScalarMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResampleMode {
    Nearest,
    Trilinear,
}

impl std::str::FromStr for ResampleMode {
    type Err = UqError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nearest" => Ok(ResampleMode::Nearest),
            "trilinear" => Ok(ResampleMode::Trilinear),
            other => Err(UqError::InvalidArg(format!(
                "unknown resample mode {other:?} (expected nearest|trilinear)"
            ))),
        }
    }
}

/// Clamp every value into `[lo, hi]`. Grid meta is unchanged.
pub fn clip_hu(ct: &ScalarMap, lo: f32, hi: f32) -> Result<ScalarMap> {
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(UqError::InvalidArg(format!("clip bounds need finite lo < hi, got [{lo}, {hi}]")));
    }
    let values = ct.values().iter().map(|&v| v.min(hi).max(lo)).collect();
    ScalarMap::new(ct.meta().clone(), values)
}

/// The clamped crop box: per-axis start index and output extent.
fn crop_box(meta: &GridMeta, center: [i64; 3], size: [usize; 3]) -> Result<([usize; 3], [usize; 3])> {
    if size.iter().any(|&s| s == 0) {
        return Err(UqError::InvalidArg(format!("crop size must be >= 1 per axis, got {size:?}")));
    }
    let dims = meta.dims();
    let mut start = [0usize; 3];
    let mut out = [0usize; 3];
    for a in 0..3 {
        let s0 = center[a] - (size[a] / 2) as i64;
        let e0 = s0 + size[a] as i64;
        let s = s0.max(0);
        let e = e0.min(dims[a] as i64);
        if s >= e {
            return Err(UqError::InvalidArg(format!(
                "crop box (center {center:?}, size {size:?}) has empty intersection with grid {dims:?}"
            )));
        }
        start[a] = s as usize;
        out[a] = (e - s) as usize;
    }
    Ok((start, out))
}

fn cropped_meta(meta: &GridMeta, start: [usize; 3], out: [usize; 3]) -> Result<GridMeta> {
    let spacing = meta.spacing();
    let origin = meta.origin();
    let new_origin = [
        origin[0] + start[0] as f64 * spacing[0],
        origin[1] + start[1] as f64 * spacing[1],
        origin[2] + start[2] as f64 * spacing[2],
    ];
    meta.with_geometry(out, spacing, new_origin)
}

fn copy_box<T: Copy>(meta: &GridMeta, data: &[T], start: [usize; 3], out: [usize; 3]) -> Vec<T> {
    let mut dst = Vec::with_capacity(out[0] * out[1] * out[2]);
    for k in 0..out[2] {
        for j in 0..out[1] {
            let row = meta.index(start[0], start[1] + j, start[2] + k);
            dst.extend_from_slice(&data[row..row + out[0]]);
        }
    }
    dst
}

/// Crop any bundle kind to a box centered at `center` (voxel indices) with
/// the requested size, clamped to grid bounds. The origin shifts by the crop
/// offset times spacing; voxels are copied verbatim.
pub fn crop(vol: &Bundle, center: [i64; 3], size: [usize; 3]) -> Result<Bundle> {
    Ok(match vol {
        Bundle::Label(v) => Bundle::Label(crop_label(v, center, size)?),
        Bundle::Scalar(v) => Bundle::Scalar(crop_scalar(v, center, size)?),
        Bundle::Prob(v) => Bundle::Prob(crop_prob(v, center, size)?),
        Bundle::Stack(v) => Bundle::Stack(crop_stack(v, center, size)?),
    })
}

pub fn crop_label(v: &LabelVolume, center: [i64; 3], size: [usize; 3]) -> Result<LabelVolume> {
    let (start, out) = crop_box(v.meta(), center, size)?;
    LabelVolume::new(cropped_meta(v.meta(), start, out)?, copy_box(v.meta(), v.voxels(), start, out))
}

pub fn crop_scalar(v: &ScalarMap, center: [i64; 3], size: [usize; 3]) -> Result<ScalarMap> {
    let (start, out) = crop_box(v.meta(), center, size)?;
    ScalarMap::new(cropped_meta(v.meta(), start, out)?, copy_box(v.meta(), v.values(), start, out))
}

pub fn crop_prob(v: &ProbVolume, center: [i64; 3], size: [usize; 3]) -> Result<ProbVolume> {
    let (start, out) = crop_box(v.meta(), center, size)?;
    let channels = v
        .channels()
        .iter()
        .map(|ch| copy_box(v.meta(), ch, start, out))
        .collect();
    ProbVolume::new(cropped_meta(v.meta(), start, out)?, channels)
}

pub fn crop_stack(v: &McStack, center: [i64; 3], size: [usize; 3]) -> Result<McStack> {
    let (start, out) = crop_box(v.meta(), center, size)?;
    let meta = cropped_meta(v.meta(), start, out)?;
    let samples = v
        .samples()
        .iter()
        .map(|s| crop_prob(s, center, size))
        .collect::<Result<Vec<_>>>()?;
    McStack::new(meta, samples)
}

struct ResampleGrid {
    out_dims: [usize; 3],
    // per output index and axis: continuous input coordinate
    coords: [Vec<f64>; 3],
}

fn resample_grid(meta: &GridMeta, new_spacing: [f64; 3]) -> Result<ResampleGrid> {
    if new_spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(UqError::InvalidArg(format!("new spacing must be finite and > 0, got {new_spacing:?}")));
    }
    let dims = meta.dims();
    let spacing = meta.spacing();
    let mut out_dims = [0usize; 3];
    let mut coords: [Vec<f64>; 3] = [vec![], vec![], vec![]];
    for a in 0..3 {
        // per-axis ratio first, so equal spacings give an exact 1.0
        out_dims[a] = ((dims[a] as f64 * (spacing[a] / new_spacing[a])).ceil() as usize).max(1);
        let ratio = new_spacing[a] / spacing[a];
        coords[a] = (0..out_dims[a]).map(|i| (i as f64 + 0.5) * ratio - 0.5).collect();
    }
    Ok(ResampleGrid { out_dims, coords })
}

fn nearest_index(u: f64, n: usize) -> usize {
    (u.round().max(0.0) as usize).min(n - 1)
}

fn resample_nearest<T: Copy>(meta: &GridMeta, data: &[T], grid: &ResampleGrid) -> Vec<T> {
    let dims = meta.dims();
    let ix: Vec<usize> = grid.coords[0].iter().map(|&u| nearest_index(u, dims[0])).collect();
    let iy: Vec<usize> = grid.coords[1].iter().map(|&u| nearest_index(u, dims[1])).collect();
    let iz: Vec<usize> = grid.coords[2].iter().map(|&u| nearest_index(u, dims[2])).collect();
    let mut out = Vec::with_capacity(grid.out_dims[0] * grid.out_dims[1] * grid.out_dims[2]);
    for &k in &iz {
        for &j in &iy {
            for &i in &ix {
                out.push(data[meta.index(i, j, k)]);
            }
        }
    }
    out
}

fn resample_trilinear(meta: &GridMeta, data: &[f32], grid: &ResampleGrid) -> Vec<f32> {
    let dims = meta.dims();
    // per axis: (lower index, upper index, fraction), boundary clamped to edge
    let prep = |coords: &[f64], n: usize| -> Vec<(usize, usize, f64)> {
        coords
            .iter()
            .map(|&u| {
                let f = u.floor();
                let t = u - f;
                let i0 = (f.max(0.0) as usize).min(n - 1);
                let i1 = (i0 + 1).min(n - 1);
                if u < 0.0 {
                    (i0, i0, 0.0)
                } else if f as usize >= n - 1 {
                    (i0, i0, 0.0)
                } else {
                    (i0, i1, t)
                }
            })
            .collect()
    };
    let xs = prep(&grid.coords[0], dims[0]);
    let ys = prep(&grid.coords[1], dims[1]);
    let zs = prep(&grid.coords[2], dims[2]);
    let mut out = Vec::with_capacity(grid.out_dims[0] * grid.out_dims[1] * grid.out_dims[2]);
    for &(k0, k1, tz) in &zs {
        for &(j0, j1, ty) in &ys {
            for &(i0, i1, tx) in &xs {
                let at = |i: usize, j: usize, k: usize| data[meta.index(i, j, k)] as f64;
                let c00 = at(i0, j0, k0) * (1.0 - tx) + at(i1, j0, k0) * tx;
                let c10 = at(i0, j1, k0) * (1.0 - tx) + at(i1, j1, k0) * tx;
                let c01 = at(i0, j0, k1) * (1.0 - tx) + at(i1, j0, k1) * tx;
                let c11 = at(i0, j1, k1) * (1.0 - tx) + at(i1, j1, k1) * tx;
                let c0 = c00 * (1.0 - ty) + c10 * ty;
                let c1 = c01 * (1.0 - ty) + c11 * ty;
                out.push((c0 * (1.0 - tz) + c1 * tz) as f32);
            }
        }
    }
    out
}

fn resampled_meta(meta: &GridMeta, grid: &ResampleGrid, new_spacing: [f64; 3]) -> Result<GridMeta> {
    meta.with_geometry(grid.out_dims, new_spacing, meta.origin())
}

/// Resample to a new voxel spacing. Output dims are
/// `ceil(old_dims * old_spacing / new_spacing)`; physical extent is preserved
/// within one voxel. Label volumes require nearest mode.
pub fn resample(vol: &Bundle, new_spacing: [f64; 3], mode: ResampleMode) -> Result<Bundle> {
    Ok(match vol {
        Bundle::Label(v) => Bundle::Label(resample_label(v, new_spacing, mode)?),
        Bundle::Scalar(v) => Bundle::Scalar(resample_scalar(v, new_spacing, mode)?),
        Bundle::Prob(v) => Bundle::Prob(resample_prob(v, new_spacing, mode)?),
        Bundle::Stack(v) => {
            let samples = v
                .samples()
                .iter()
                .map(|s| resample_prob(s, new_spacing, mode))
                .collect::<Result<Vec<_>>>()?;
            let meta = samples[0].meta().clone();
            Bundle::Stack(McStack::new(meta, samples)?)
        }
    })
}

pub fn resample_label(v: &LabelVolume, new_spacing: [f64; 3], mode: ResampleMode) -> Result<LabelVolume> {
    if mode != ResampleMode::Nearest {
        return Err(UqError::InvalidArg(
            "label volumes require nearest-mode resampling (trilinear would invent class ids)".into(),
        ));
    }
    let grid = resample_grid(v.meta(), new_spacing)?;
    LabelVolume::new(
        resampled_meta(v.meta(), &grid, new_spacing)?,
        resample_nearest(v.meta(), v.voxels(), &grid),
    )
}

pub fn resample_scalar(v: &ScalarMap, new_spacing: [f64; 3], mode: ResampleMode) -> Result<ScalarMap> {
    let grid = resample_grid(v.meta(), new_spacing)?;
    let values = match mode {
        ResampleMode::Nearest => resample_nearest(v.meta(), v.values(), &grid),
        ResampleMode::Trilinear => resample_trilinear(v.meta(), v.values(), &grid),
    };
    ScalarMap::new(resampled_meta(v.meta(), &grid, new_spacing)?, values)
}

pub fn resample_prob(v: &ProbVolume, new_spacing: [f64; 3], mode: ResampleMode) -> Result<ProbVolume> {
    let grid = resample_grid(v.meta(), new_spacing)?;
    let channels = v
        .channels()
        .iter()
        .map(|ch| match mode {
            ResampleMode::Nearest => resample_nearest(v.meta(), ch, &grid),
            ResampleMode::Trilinear => resample_trilinear(v.meta(), ch, &grid),
        })
        .collect();
    ProbVolume::new(resampled_meta(v.meta(), &grid, new_spacing)?, channels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta(dims: [usize; 3], spacing: [f64; 3]) -> GridMeta {
        GridMeta::new(dims, spacing, [0.0; 3], vec!["bg".into(), "fg".into()]).unwrap()
    }

    fn scalar(dims: [usize; 3], spacing: [f64; 3], values: Vec<f32>) -> ScalarMap {
        ScalarMap::new(meta(dims, spacing), values).unwrap()
    }

    #[test]
    fn clip_hu_paper_bounds() {
        let ct = scalar([3, 1, 1], [1.0; 3], vec![-500.0, 0.0, 300.0]);
        let out = clip_hu(&ct, -125.0, 225.0).unwrap();
        assert_eq!(out.values(), &[-125.0, 0.0, 225.0]);
        assert_eq!(out.meta(), ct.meta());
    }

    #[test]
    fn clip_hu_identity_inside_band_and_idempotent() {
        let ct = scalar([3, 1, 1], [1.0; 3], vec![-100.0, 0.0, 200.0]);
        let once = clip_hu(&ct, -125.0, 225.0).unwrap();
        assert_eq!(once.values(), ct.values());
        let twice = clip_hu(&once, -125.0, 225.0).unwrap();
        assert_eq!(twice.values(), once.values());
    }

    #[test]
    fn clip_hu_degenerate_narrow_band() {
        let values: Vec<f32> = (0..64).map(|i| (i as f32) - 32.0).collect();
        let ct = scalar([4, 4, 4], [1.0; 3], values);
        let lo = 0.0f32;
        let hi = lo + f32::EPSILON;
        let out = clip_hu(&ct, lo, hi).unwrap();
        assert!(out.values().iter().all(|&v| v >= lo && v <= hi));
    }

    #[test]
    fn clip_hu_rejects_inverted_bounds() {
        let ct = scalar([1, 1, 1], [1.0; 3], vec![0.0]);
        assert!(clip_hu(&ct, 5.0, 5.0).is_err());
        assert!(clip_hu(&ct, 5.0, 1.0).is_err());
    }

    #[test]
    fn clip_hu_is_monotone() {
        let a = scalar([4, 1, 1], [1.0; 3], vec![-300.0, -50.0, 90.0, 400.0]);
        let b = scalar([4, 1, 1], [1.0; 3], vec![-250.0, -50.0, 100.0, 500.0]);
        let ca = clip_hu(&a, -125.0, 225.0).unwrap();
        let cb = clip_hu(&b, -125.0, 225.0).unwrap();
        for (x, y) in ca.values().iter().zip(cb.values()) {
            assert!(x <= y);
        }
    }

    #[test]
    fn crop_interior_octant() {
        let values: Vec<f32> = (0..64).map(|i| i as f32).collect();
        let v = scalar([4, 4, 4], [1.0; 3], values.clone());
        let out = crop_scalar(&v, [2, 2, 2], [2, 2, 2]).unwrap();
        assert_eq!(out.meta().dims(), [2, 2, 2]);
        assert_eq!(out.meta().origin(), [1.0, 1.0, 1.0]);
        let m = v.meta();
        let mut expect = vec![];
        for k in 1..3 {
            for j in 1..3 {
                for i in 1..3 {
                    expect.push(values[m.index(i, j, k)]);
                }
            }
        }
        assert_eq!(out.values(), &expect[..]);
    }

    #[test]
    fn crop_full_size_is_identity() {
        let values: Vec<f32> = (0..24).map(|i| i as f32).collect();
        let v = scalar([2, 3, 4], [1.0; 3], values);
        let out = crop_scalar(&v, [1, 1, 2], [2, 3, 4]).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn crop_overhang_clamps_and_matches_naive_oracle() {
        let dims = [5, 4, 3];
        let values: Vec<f32> = (0..60).map(|i| (i * 7 % 13) as f32).collect();
        let v = scalar(dims, [0.8, 0.8, 2.5], values.clone());
        // center near the (0,0,0) corner so the box overhangs three faces
        let center = [0i64, 0, 0];
        let size = [4usize, 3, 3];
        let out = crop_scalar(&v, center, size).unwrap();

        // naive index-loop oracle
        let m = v.meta();
        let mut starts = [0i64; 3];
        let mut ends = [0i64; 3];
        for a in 0..3 {
            starts[a] = (center[a] - (size[a] / 2) as i64).max(0);
            ends[a] = (center[a] - (size[a] / 2) as i64 + size[a] as i64).min(dims[a] as i64);
        }
        let mut expect = vec![];
        for k in starts[2]..ends[2] {
            for j in starts[1]..ends[1] {
                for i in starts[0]..ends[0] {
                    expect.push(values[m.index(i as usize, j as usize, k as usize)]);
                }
            }
        }
        assert_eq!(
            out.meta().dims(),
            [
                (ends[0] - starts[0]) as usize,
                (ends[1] - starts[1]) as usize,
                (ends[2] - starts[2]) as usize
            ]
        );
        assert_eq!(out.values(), &expect[..]);
        assert_eq!(
            out.meta().origin(),
            [
                starts[0] as f64 * 0.8,
                starts[1] as f64 * 0.8,
                starts[2] as f64 * 2.5
            ]
        );
    }

    #[test]
    fn crop_rejects_empty_intersection() {
        let v = scalar([4, 4, 4], [1.0; 3], vec![0.0; 64]);
        assert!(crop_scalar(&v, [-10, 0, 0], [2, 2, 2]).is_err());
        assert!(crop_scalar(&v, [100, 2, 2], [2, 2, 2]).is_err());
    }

    #[test]
    fn nested_crops_equal_single_crop() {
        let dims = [8, 7, 6];
        let values: Vec<f32> = (0..(8 * 7 * 6)).map(|i| (i * 31 % 97) as f32).collect();
        let v = scalar(dims, [1.0; 3], values);
        // outer box: start (1,1,1) size (6,5,4); inner box in original coords:
        // start (2,3,2) size (3,2,2); inner is nested inside outer.
        let outer = crop_scalar(&v, [1 + 3, 1 + 2, 1 + 2], [6, 5, 4]).unwrap();
        let inner_in_outer = crop_scalar(&outer, [(2 - 1) + 1, (3 - 1) + 1, (2 - 1) + 1], [3, 2, 2]).unwrap();
        let direct = crop_scalar(&v, [2 + 1, 3 + 1, 2 + 1], [3, 2, 2]).unwrap();
        assert_eq!(inner_in_outer, direct);
    }

    #[test]
    fn resample_identity_both_modes() {
        let values: Vec<f32> = (0..24).map(|i| i as f32 * 0.5).collect();
        let v = scalar([2, 3, 4], [0.8, 0.8, 2.5], values);
        for mode in [ResampleMode::Nearest, ResampleMode::Trilinear] {
            let out = resample_scalar(&v, [0.8, 0.8, 2.5], mode).unwrap();
            assert_eq!(out, v, "{mode:?}");
        }
    }

    #[test]
    fn resample_constant_stays_constant() {
        let v = scalar([5, 4, 3], [1.0, 2.0, 3.0], vec![7.25; 60]);
        for mode in [ResampleMode::Nearest, ResampleMode::Trilinear] {
            let out = resample_scalar(&v, [0.6, 0.9, 5.0], mode).unwrap();
            assert!(out.values().iter().all(|&x| x == 7.25), "{mode:?}");
        }
    }

    #[test]
    fn resample_dims_follow_ceil_rule() {
        let v = scalar([10, 10, 10], [1.0; 3], vec![0.0; 1000]);
        let out = resample_scalar(&v, [0.8, 0.8, 2.5], ResampleMode::Nearest).unwrap();
        assert_eq!(out.meta().dims(), [13, 13, 4]);
        // extent preserved within one voxel
        for a in 0..3 {
            let old = 10.0;
            let new = out.meta().dims()[a] as f64 * out.meta().spacing()[a];
            assert!(new >= old && new < old + out.meta().spacing()[a]);
        }
    }

    #[test]
    fn trilinear_downsample_matches_analytic_ramp() {
        // value = physical x coordinate of the voxel center
        let dims = [32usize, 4, 4];
        let spacing = [1.0, 1.0, 1.0];
        let m = meta(dims, spacing);
        let mut values = vec![0.0f32; m.voxel_count()];
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    values[m.index(i, j, k)] = (i as f32 + 0.5) * spacing[0] as f32;
                }
            }
        }
        let v = ScalarMap::new(m, values).unwrap();
        let out = resample_scalar(&v, [2.0, 1.0, 1.0], ResampleMode::Trilinear).unwrap();
        let om = out.meta();
        for k in 0..om.dims()[2] {
            for j in 0..om.dims()[1] {
                for i in 0..om.dims()[0] {
                    // skip clamped boundary samples: interior only
                    let u = (i as f64 + 0.5) * 2.0 / 1.0 - 0.5;
                    if u < 0.0 || u > (dims[0] - 1) as f64 {
                        continue;
                    }
                    let expect = (i as f64 + 0.5) * 2.0;
                    let got = out.values()[om.index(i, j, k)] as f64;
                    assert!((got - expect).abs() < 1e-5, "at {i}: {got} vs {expect}");
                }
            }
        }
    }

    #[test]
    fn nearest_output_values_are_subset_of_input() {
        let values: Vec<f32> = (0..60).map(|i| (i * 13 % 17) as f32).collect();
        let v = scalar([5, 4, 3], [1.0, 2.0, 1.5], values.clone());
        let out = resample_scalar(&v, [0.7, 1.1, 2.2], ResampleMode::Nearest).unwrap();
        for x in out.values() {
            assert!(values.contains(x));
        }
    }

    #[test]
    fn labels_reject_trilinear() {
        let m = meta([2, 2, 1], [1.0; 3]);
        let v = LabelVolume::new(m, vec![0, 1, 1, 0]).unwrap();
        assert!(resample_label(&v, [0.5; 3], ResampleMode::Trilinear).is_err());
        assert!(resample_label(&v, [0.5; 3], ResampleMode::Nearest).is_ok());
    }
}
