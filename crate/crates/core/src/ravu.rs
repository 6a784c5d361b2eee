//! Region-based accuracy-vs-uncertainty curves.
//!
//! Voxels are partitioned into accurate / near-accurate / inaccurate regions
//! by opening the multi-class mismatch mask (erosion then dilation with an
//! odd box filter; out-of-grid neighborhood is background). An uncertainty
//! threshold sweep over the entropy map then yields the two curves
//! `p(u|i) = n_iu / (n_iu + n_ic)` and `p(u|a,~a) = n_au / (n_au + n_ac)`,
//! with near-accurate voxels pooled into the accurate denominator.
//!
//! A voxel is uncertain at threshold `t` iff its entropy is strictly greater
//! than `t`, so zero-entropy voxels stay certain at `t = 0`.

use serde::Serialize;

use crate::error::{Result, UqError};
use crate::volume::{GridMeta, LabelVolume, ScalarMap};

/// Region tag of one voxel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Accurate,
    NearAccurate,
    Inaccurate,
    Excluded,
}

/// Evaluation region of interest.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Roi {
    /// Every voxel participates (a literal reading of the count formulas).
    WholeVolume,
    /// Exclude voxels farther than `radius` voxels (chebyshev) from any
    /// gt-or-pred foreground voxel; keeps background true negatives from
    /// swamping the accurate pool.
    ForegroundBand { radius: usize },
}

impl Roi {
    pub fn parse(s: &str) -> Result<Roi> {
        if s == "whole" {
            return Ok(Roi::WholeVolume);
        }
        if let Some(r) = s.strip_prefix("band:") {
            let radius = r
                .parse()
                .map_err(|_| UqError::InvalidArg(format!("bad band radius {r:?}")))?;
            return Ok(Roi::ForegroundBand { radius });
        }
        Err(UqError::InvalidArg(format!(
            "unknown roi {s:?} (expected whole|band:<radius>)"
        )))
    }

    pub fn describe(&self) -> String {
        match self {
            Roi::WholeVolume => "whole".into(),
            Roi::ForegroundBand { radius } => format!("band:{radius}"),
        }
    }
}

/// Voxel partition into accurate / near-accurate / inaccurate / excluded.
#[derive(Debug, Clone)]
pub struct RegionMask {
    meta: GridMeta,
    region: Vec<Region>,
}

impl RegionMask {
    pub fn meta(&self) -> &GridMeta {
        &self.meta
    }

    pub fn regions(&self) -> &[Region] {
        &self.region
    }

    pub fn count(&self, r: Region) -> usize {
        self.region.iter().filter(|&&x| x == r).count()
    }

    /// Region tags as a label bundle for visualization.
    pub fn to_label_volume(&self) -> Result<LabelVolume> {
        let names = vec![
            "accurate".to_string(),
            "near_accurate".to_string(),
            "inaccurate".to_string(),
            "excluded".to_string(),
        ];
        let meta = self.meta.with_class_names(names)?;
        let voxels = self
            .region
            .iter()
            .map(|r| match r {
                Region::Accurate => 0u8,
                Region::NearAccurate => 1,
                Region::Inaccurate => 2,
                Region::Excluded => 3,
            })
            .collect();
        LabelVolume::new(meta, voxels)
    }
}

/// 1D erosion along one axis with half-window `r`; out-of-grid is background,
/// so windows that leave the grid erode the voxel.
fn erode_axis(mask: &[bool], meta: &GridMeta, axis: usize, r: usize) -> Vec<bool> {
    if r == 0 {
        return mask.to_vec();
    }
    let dims = meta.dims();
    let n = dims[axis];
    let mut out = vec![false; mask.len()];
    for_each_line(meta, axis, |line| {
        for (pos, &idx) in line.iter().enumerate() {
            if pos < r || pos + r >= n {
                continue;
            }
            let mut all = true;
            for w in pos - r..=pos + r {
                if !mask[line[w]] {
                    all = false;
                    break;
                }
            }
            out[idx] = all;
        }
    });
    out
}

fn dilate_axis(mask: &[bool], meta: &GridMeta, axis: usize, r: usize) -> Vec<bool> {
    if r == 0 {
        return mask.to_vec();
    }
    let dims = meta.dims();
    let n = dims[axis];
    let mut out = vec![false; mask.len()];
    for_each_line(meta, axis, |line| {
        for (pos, &idx) in line.iter().enumerate() {
            let lo = pos.saturating_sub(r);
            let hi = (pos + r).min(n - 1);
            let mut any = false;
            for w in lo..=hi {
                if mask[line[w]] {
                    any = true;
                    break;
                }
            }
            out[idx] = any;
        }
    });
    out
}

/// Visit every grid line along `axis` as a list of linear indices.
fn for_each_line(meta: &GridMeta, axis: usize, mut f: impl FnMut(&[usize])) {
    let [nx, ny, nz] = meta.dims();
    let mut line = Vec::new();
    match axis {
        0 => {
            for k in 0..nz {
                for j in 0..ny {
                    line.clear();
                    line.extend((0..nx).map(|i| meta.index(i, j, k)));
                    f(&line);
                }
            }
        }
        1 => {
            for k in 0..nz {
                for i in 0..nx {
                    line.clear();
                    line.extend((0..ny).map(|j| meta.index(i, j, k)));
                    f(&line);
                }
            }
        }
        _ => {
            for j in 0..ny {
                for i in 0..nx {
                    line.clear();
                    line.extend((0..nz).map(|k| meta.index(i, j, k)));
                    f(&line);
                }
            }
        }
    }
}

/// Binary erosion with an odd box structuring element (separable).
pub fn erode_box(mask: &[bool], meta: &GridMeta, filter: [usize; 3]) -> Vec<bool> {
    let mut m = mask.to_vec();
    for axis in 0..3 {
        m = erode_axis(&m, meta, axis, filter[axis] / 2);
    }
    m
}

/// Binary dilation with an odd box structuring element (separable).
pub fn dilate_box(mask: &[bool], meta: &GridMeta, filter: [usize; 3]) -> Vec<bool> {
    let mut m = mask.to_vec();
    for axis in 0..3 {
        m = dilate_axis(&m, meta, axis, filter[axis] / 2);
    }
    m
}

fn check_filter(filter: [usize; 3]) -> Result<()> {
    if filter.iter().any(|&f| f == 0 || f % 2 == 0) {
        return Err(UqError::InvalidArg(format!(
            "opening filter dims must be odd and >= 1, got {filter:?}"
        )));
    }
    Ok(())
}

/// Partition voxels by opening the global multi-class mismatch mask:
/// mismatch voxels surviving the opening are inaccurate, removed ones are
/// near-accurate, matches are accurate, and ROI-excluded voxels are tagged
/// excluded.
pub fn region_partition(
    pred: &LabelVolume,
    gt: &LabelVolume,
    opening_filter: [usize; 3],
    roi: Roi,
) -> Result<RegionMask> {
    pred.meta().ensure_same(gt.meta(), "region partition volumes")?;
    check_filter(opening_filter)?;
    let meta = pred.meta().clone();
    let mismatch: Vec<bool> = pred
        .voxels()
        .iter()
        .zip(gt.voxels())
        .map(|(&p, &g)| p != g)
        .collect();
    let opened = dilate_box(&erode_box(&mismatch, &meta, opening_filter), &meta, opening_filter);

    let included: Option<Vec<bool>> = match roi {
        Roi::WholeVolume => None,
        Roi::ForegroundBand { radius } => {
            let fg: Vec<bool> = pred
                .voxels()
                .iter()
                .zip(gt.voxels())
                .map(|(&p, &g)| p != 0 || g != 0)
                .collect();
            let window = 2 * radius + 1;
            Some(dilate_box(&fg, &meta, [window, window, window]))
        }
    };

    let region = mismatch
        .iter()
        .zip(&opened)
        .enumerate()
        .map(|(idx, (&mis, &op))| {
            if let Some(inc) = &included {
                if !inc[idx] {
                    return Region::Excluded;
                }
            }
            if !mis {
                Region::Accurate
            } else if op {
                Region::Inaccurate
            } else {
                Region::NearAccurate
            }
        })
        .collect();
    Ok(RegionMask { meta, region })
}

/// Threshold grid for the sweep.
#[derive(Debug, Clone, PartialEq)]
pub enum ThresholdSpec {
    Explicit(Vec<f64>),
    /// `points` equally spaced thresholds from 0 to `t_max`
    /// (default `t_max = ln C`).
    Auto { points: usize, t_max: Option<f64> },
}

impl ThresholdSpec {
    pub fn parse(s: &str) -> Result<ThresholdSpec> {
        if let Some(rest) = s.strip_prefix("auto:") {
            let mut parts = rest.splitn(2, ',');
            let points = parts
                .next()
                .unwrap()
                .parse()
                .map_err(|_| UqError::InvalidArg(format!("bad auto threshold count in {s:?}")))?;
            let t_max = match parts.next() {
                Some(t) => Some(
                    t.parse()
                        .map_err(|_| UqError::InvalidArg(format!("bad t_max in {s:?}")))?,
                ),
                None => None,
            };
            return Ok(ThresholdSpec::Auto { points, t_max });
        }
        let values = s
            .split(',')
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|_| UqError::InvalidArg(format!("bad threshold {v:?}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(ThresholdSpec::Explicit(values))
    }

    pub fn describe(&self) -> String {
        match self {
            ThresholdSpec::Explicit(v) => v
                .iter()
                .map(|t| t.to_string())
                .collect::<Vec<_>>()
                .join(","),
            ThresholdSpec::Auto { points, t_max } => match t_max {
                Some(t) => format!("auto:{points},{t}"),
                None => format!("auto:{points}"),
            },
        }
    }

    fn resolve(&self, num_classes: usize) -> Result<Vec<f64>> {
        let thresholds = match self {
            ThresholdSpec::Explicit(v) => v.clone(),
            ThresholdSpec::Auto { points, t_max } => {
                if *points == 0 {
                    return Err(UqError::InvalidArg("auto thresholds need points >= 1".into()));
                }
                let t_max = t_max.unwrap_or((num_classes as f64).ln());
                if *points == 1 {
                    vec![0.0]
                } else {
                    (0..*points)
                        .map(|i| t_max * i as f64 / (*points - 1) as f64)
                        .collect()
                }
            }
        };
        if thresholds.is_empty() {
            return Err(UqError::InvalidArg("threshold list must be non-empty".into()));
        }
        for w in thresholds.windows(2) {
            if !(w[0] < w[1]) {
                return Err(UqError::InvalidArg(format!(
                    "thresholds must be strictly ascending, got {} then {}",
                    w[0], w[1]
                )));
            }
        }
        if thresholds[0] < 0.0 {
            return Err(UqError::InvalidArg("thresholds must be >= 0".into()));
        }
        Ok(thresholds)
    }
}

/// Counts and probabilities at one threshold.
#[derive(Debug, Clone, Serialize)]
pub struct RAvUPoint {
    pub threshold: f64,
    pub n_ac: usize,
    pub n_au: usize,
    pub n_ic: usize,
    pub n_iu: usize,
    /// `n_iu / (n_iu + n_ic)`; `None` when there are no inaccurate voxels.
    pub p_u_given_i: Option<f64>,
    /// `n_au / (n_au + n_ac)` over the pooled accurate + near-accurate set.
    pub p_u_given_a: Option<f64>,
}

/// Threshold-swept R-AvU counts. Near-accurate voxels are pooled with
/// accurate ones; excluded voxels do not participate.
#[derive(Debug, Clone, Serialize)]
pub struct RAvUCurve {
    pub points: Vec<RAvUPoint>,
    pub accurate_pool: usize,
    pub inaccurate_pool: usize,
}

impl RAvUCurve {
    pub fn thresholds(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.threshold).collect()
    }
}

/// Sweep an uncertainty threshold over the entropy map. Implemented as one
/// sort per region pool plus a binary search per threshold, so the result is
/// deterministic and independent of any parallel partitioning.
pub fn ravu_curve(
    entropy: &ScalarMap,
    regions: &RegionMask,
    thresholds: &ThresholdSpec,
) -> Result<RAvUCurve> {
    entropy.meta().ensure_same(regions.meta(), "entropy vs regions")?;
    let thresholds = thresholds.resolve(entropy.meta().num_classes())?;

    let mut acc: Vec<f64> = Vec::new();
    let mut inacc: Vec<f64> = Vec::new();
    for (&h, &r) in entropy.values().iter().zip(regions.regions()) {
        match r {
            Region::Accurate | Region::NearAccurate => acc.push(h as f64),
            Region::Inaccurate => inacc.push(h as f64),
            Region::Excluded => {}
        }
    }
    acc.sort_by(f64::total_cmp);
    inacc.sort_by(f64::total_cmp);

    let uncertain_count = |sorted: &[f64], t: f64| {
        // entropy strictly greater than t counts as uncertain
        sorted.len() - sorted.partition_point(|&h| h <= t)
    };

    let points = thresholds
        .iter()
        .map(|&t| {
            let n_au = uncertain_count(&acc, t);
            let n_iu = uncertain_count(&inacc, t);
            let n_ac = acc.len() - n_au;
            let n_ic = inacc.len() - n_iu;
            let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
            RAvUPoint {
                threshold: t,
                n_ac,
                n_au,
                n_ic,
                n_iu,
                p_u_given_i: ratio(n_iu, inacc.len()),
                p_u_given_a: ratio(n_au, acc.len()),
            }
        })
        .collect();
    Ok(RAvUCurve {
        points,
        accurate_pool: acc.len(),
        inaccurate_pool: inacc.len(),
    })
}

/// One CSV row per threshold with paired series per model: columns
/// `threshold,<model>.p_u_i,<model>.p_u_a,...`. All curves must share one
/// threshold grid.
pub fn ravu_report_csv(curves: &[(String, &RAvUCurve)]) -> Result<String> {
    if curves.is_empty() {
        return Err(UqError::InvalidArg("ravu report needs at least one curve".into()));
    }
    let grid = curves[0].1.thresholds();
    for (name, curve) in curves.iter().skip(1) {
        if curve.thresholds() != grid {
            return Err(UqError::InvalidArg(format!(
                "curve {name:?} does not share the threshold grid"
            )));
        }
    }
    let mut out = String::from("threshold");
    for (name, _) in curves {
        out.push_str(&format!(",{name}.p_u_i,{name}.p_u_a"));
    }
    out.push('\n');
    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for (row, &t) in grid.iter().enumerate() {
        out.push_str(&t.to_string());
        for (_, curve) in curves {
            let p = &curve.points[row];
            out.push_str(&format!(",{},{}", fmt(p.p_u_given_i), fmt(p.p_u_given_a)));
        }
        out.push('\n');
    }
    Ok(out)
}
