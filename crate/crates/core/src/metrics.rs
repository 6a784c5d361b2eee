//! Volumetric and surface accuracy scores: per-class DICE and HD95.
//!
//! HD95 is the 95th percentile (linear interpolation) of the pooled
//! symmetric boundary-to-boundary Euclidean distances in mm. A boundary
//! voxel is a mask voxel with at least one six-connected non-mask neighbor;
//! the grid edge counts as non-mask. The empty-empty DICE convention is 1.0
//! and empty-vs-nonempty is 0.0, both flagged; HD95 on an empty mask is
//! undefined, never silently 0.

use serde::Serialize;

use crate::error::{Result, UqError};
use crate::kdtree::{dist2, VoxelKdTree};
use crate::volume::LabelVolume;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMetric {
    Dice,
    Hd95,
}

impl std::str::FromStr for ScoreMetric {
    type Err = UqError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dice" => Ok(ScoreMetric::Dice),
            "hd95" => Ok(ScoreMetric::Hd95),
            other => Err(UqError::InvalidArg(format!(
                "unknown metric {other:?} (expected dice|hd95)"
            ))),
        }
    }
}

/// Degenerate-mask conventions applied to a class score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreFlag {
    Ok,
    /// Class absent from both volumes (DICE 1.0 by convention, HD95 undefined).
    EmptyBoth,
    /// Class absent from the prediction only.
    EmptyPred,
    /// Class absent from the ground truth only.
    EmptyGt,
}

#[derive(Debug, Clone, Serialize)]
pub struct ClassScore {
    pub class_id: u8,
    pub class_name: String,
    /// `None` when the metric is undefined for this class.
    pub value: Option<f64>,
    pub flag: ScoreFlag,
}

/// Per-class scores plus the mean over classes where the metric is defined.
/// Background is excluded.
#[derive(Debug, Clone, Serialize)]
pub struct ClassScoreReport {
    pub metric: ScoreMetric,
    pub scores: Vec<ClassScore>,
    pub mean: Option<f64>,
}

impl ClassScoreReport {
    /// Per-class rows plus a mean row, CSV.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class_id,class_name,value,flag\n");
        for s in &self.scores {
            let value = s.value.map(|v| v.to_string()).unwrap_or_default();
            let flag = serde_json::to_value(s.flag).unwrap();
            out.push_str(&format!(
                "{},{},{},{}\n",
                s.class_id,
                s.class_name,
                value,
                flag.as_str().unwrap()
            ));
        }
        let mean = self.mean.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!(",mean,{mean},\n"));
        out
    }
}

fn mask_flag(pred_empty: bool, gt_empty: bool) -> ScoreFlag {
    match (pred_empty, gt_empty) {
        (true, true) => ScoreFlag::EmptyBoth,
        (true, false) => ScoreFlag::EmptyPred,
        (false, true) => ScoreFlag::EmptyGt,
        (false, false) => ScoreFlag::Ok,
    }
}

/// DICE overlap `2|A n B| / (|A| + |B|)` of the two binary class masks.
/// Returns 1.0 when both masks are empty.
pub fn dice_score(pred: &LabelVolume, gt: &LabelVolume, class_id: u8) -> Result<f64> {
    ensure_class(pred, gt, class_id)?;
    let mut a = 0u64;
    let mut b = 0u64;
    let mut inter = 0u64;
    for (&p, &g) in pred.voxels().iter().zip(gt.voxels()) {
        let pa = p == class_id;
        let gb = g == class_id;
        a += pa as u64;
        b += gb as u64;
        inter += (pa && gb) as u64;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (a + b) as f64)
}

fn ensure_class(pred: &LabelVolume, gt: &LabelVolume, class_id: u8) -> Result<()> {
    pred.meta().ensure_same(gt.meta(), "score volumes")?;
    if class_id as usize >= pred.meta().num_classes() {
        return Err(UqError::InvalidArg(format!(
            "class id {class_id} out of range (C = {})",
            pred.meta().num_classes()
        )));
    }
    Ok(())
}

/// Mask voxels with at least one six-connected non-mask neighbor; the grid
/// edge counts as non-mask.
fn boundary_voxels(vol: &LabelVolume, class_id: u8) -> Vec<[i32; 3]> {
    let meta = vol.meta();
    let [nx, ny, nz] = meta.dims();
    let vox = vol.voxels();
    let inside = |i: usize, j: usize, k: usize| vox[meta.index(i, j, k)] == class_id;
    let mut out = Vec::new();
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                if !inside(i, j, k) {
                    continue;
                }
                let edge = i == 0
                    || i == nx - 1
                    || j == 0
                    || j == ny - 1
                    || k == 0
                    || k == nz - 1;
                let exposed = edge
                    || !inside(i - 1, j, k)
                    || !inside(i + 1, j, k)
                    || !inside(i, j - 1, k)
                    || !inside(i, j + 1, k)
                    || !inside(i, j, k - 1)
                    || !inside(i, j, k + 1);
                if exposed {
                    out.push([i as i32, j as i32, k as i32]);
                }
            }
        }
    }
    out
}

fn percentile_linear(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    if sorted.len() == 1 {
        return sorted[0];
    }
    let rank = q * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let t = rank - lo as f64;
    sorted[lo] * (1.0 - t) + sorted[hi] * t
}

/// 95th percentile of the pooled symmetric boundary distances in mm, or
/// `None` when either mask is empty.
pub fn hd95(pred: &LabelVolume, gt: &LabelVolume, class_id: u8) -> Result<Option<f64>> {
    ensure_class(pred, gt, class_id)?;
    let a = boundary_voxels(pred, class_id);
    let b = boundary_voxels(gt, class_id);
    if a.is_empty() || b.is_empty() {
        return Ok(None);
    }
    let spacing = pred.meta().spacing();
    let mut pooled = Vec::with_capacity(a.len() + b.len());
    directed_distances(&a, &b, spacing, &mut pooled);
    directed_distances(&b, &a, spacing, &mut pooled);
    pooled.sort_by(f64::total_cmp);
    Ok(Some(percentile_linear(&pooled, 0.95)))
}

fn directed_distances(from: &[[i32; 3]], to: &[[i32; 3]], spacing: [f64; 3], out: &mut Vec<f64>) {
    // brute force is cheaper than tree construction for tiny sets
    if from.len() * to.len() <= 1024 {
        for &p in from {
            let d2 = to
                .iter()
                .map(|&q| dist2(p, q, spacing))
                .fold(f64::INFINITY, f64::min);
            out.push(d2.sqrt());
        }
        return;
    }
    let tree = VoxelKdTree::build(to.to_vec(), spacing);
    for &p in from {
        out.push(tree.nearest_dist2(p).sqrt());
    }
}

/// Apply a metric to every non-background class. The mean covers classes
/// where the metric is defined.
pub fn score_report(pred: &LabelVolume, gt: &LabelVolume, metric: ScoreMetric) -> Result<ClassScoreReport> {
    pred.meta().ensure_same(gt.meta(), "score volumes")?;
    let meta = pred.meta();
    let mut scores = Vec::new();
    for class_id in 1..meta.num_classes() as u8 {
        let pred_empty = !pred.voxels().contains(&class_id);
        let gt_empty = !gt.voxels().contains(&class_id);
        let flag = mask_flag(pred_empty, gt_empty);
        let value = match metric {
            ScoreMetric::Dice => Some(dice_score(pred, gt, class_id)?),
            ScoreMetric::Hd95 => hd95(pred, gt, class_id)?,
        };
        scores.push(ClassScore {
            class_id,
            class_name: meta.class_names()[class_id as usize].clone(),
            value,
            flag,
        });
    }
    let defined: Vec<f64> = scores.iter().filter_map(|s| s.value).collect();
    let mean = if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    };
    Ok(ClassScoreReport {
        metric,
        scores,
        mean,
    })
}
