//! Per-class expected calibration error and reliability tables.
//!
//! Two ECE variants are reported. `ece_weighted` is the standard definition,
//! `sum_b (count_b / N) * |acc_b - conf_b|`, and is the headline number.
//! `ece_paper` is the unweighted mean of absolute gaps over non-empty bins.
//! Bin edges are `[b/B, (b+1)/B)` with the last bin closed at 1.0. Bin
//! counting uses integer accumulation; confidence sums are accumulated in
//! f64 in voxel index order.

use serde::Serialize;

use crate::error::{Result, UqError};
use crate::volume::{LabelVolume, ProbVolume};

/// Which voxels enter a class's calibration pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum VoxelSelection {
    /// Voxels whose argmax prediction equals the class (default).
    PredictedClass,
    /// Every voxel, using the class channel's probability.
    ClassChannelAll,
}

impl std::str::FromStr for VoxelSelection {
    type Err = UqError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "predicted" => Ok(VoxelSelection::PredictedClass),
            "all" => Ok(VoxelSelection::ClassChannelAll),
            other => Err(UqError::InvalidArg(format!(
                "unknown selection {other:?} (expected predicted|all)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ReliabilityBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// Mean confidence of the bin; `None` when the bin is empty.
    pub mean_conf: Option<f64>,
    /// Fraction of correct voxels in the bin; `None` when empty.
    pub accuracy: Option<f64>,
}

/// Binned confidence/accuracy counts for one class plus both ECE variants.
/// ECE values are `None` when no voxels were selected.
#[derive(Debug, Clone, Serialize)]
pub struct ReliabilityTable {
    pub class_id: u8,
    pub selection: VoxelSelection,
    pub bins: Vec<ReliabilityBin>,
    pub total: usize,
    pub ece_weighted: Option<f64>,
    pub ece_paper: Option<f64>,
}

/// Build a reliability table from raw (confidence, correct) pairs.
pub fn reliability_from_pairs(
    pairs: impl IntoIterator<Item = (f64, bool)>,
    bins: usize,
    class_id: u8,
    selection: VoxelSelection,
) -> Result<ReliabilityTable> {
    if bins == 0 {
        return Err(UqError::InvalidArg("bin count B must be >= 1".into()));
    }
    let mut count = vec![0usize; bins];
    let mut conf_sum = vec![0.0f64; bins];
    let mut correct = vec![0usize; bins];
    let mut total = 0usize;
    for (conf, ok) in pairs {
        if !(0.0..=1.0).contains(&conf) {
            return Err(UqError::InvalidArg(format!("confidence {conf} outside [0, 1]")));
        }
        let b = ((conf * bins as f64).floor() as usize).min(bins - 1);
        count[b] += 1;
        conf_sum[b] += conf;
        correct[b] += ok as usize;
        total += 1;
    }
    let mut out_bins = Vec::with_capacity(bins);
    let mut weighted = 0.0f64;
    let mut paper_sum = 0.0f64;
    let mut nonempty = 0usize;
    for b in 0..bins {
        let lo = b as f64 / bins as f64;
        let hi = (b + 1) as f64 / bins as f64;
        if count[b] == 0 {
            out_bins.push(ReliabilityBin {
                lo,
                hi,
                count: 0,
                mean_conf: None,
                accuracy: None,
            });
            continue;
        }
        let mean_conf = conf_sum[b] / count[b] as f64;
        let accuracy = correct[b] as f64 / count[b] as f64;
        let gap = (accuracy - mean_conf).abs();
        weighted += count[b] as f64 / total as f64 * gap;
        paper_sum += gap;
        nonempty += 1;
        out_bins.push(ReliabilityBin {
            lo,
            hi,
            count: count[b],
            mean_conf: Some(mean_conf),
            accuracy: Some(accuracy),
        });
    }
    let (ece_weighted, ece_paper) = if total == 0 {
        (None, None)
    } else {
        (Some(weighted), Some(paper_sum / nonempty as f64))
    };
    Ok(ReliabilityTable {
        class_id,
        selection,
        bins: out_bins,
        total,
        ece_weighted,
        ece_paper,
    })
}

/// Reliability table of one class over a volume.
pub fn reliability(
    mean_prob: &ProbVolume,
    pred: &LabelVolume,
    gt: &LabelVolume,
    class_id: u8,
    bins: usize,
    selection: VoxelSelection,
) -> Result<ReliabilityTable> {
    mean_prob.meta().ensure_same(pred.meta(), "mean_prob vs pred")?;
    mean_prob.meta().ensure_same(gt.meta(), "mean_prob vs gt")?;
    if class_id as usize >= mean_prob.meta().num_classes() {
        return Err(UqError::InvalidArg(format!(
            "class id {class_id} out of range (C = {})",
            mean_prob.meta().num_classes()
        )));
    }
    let channel = mean_prob.channel(class_id);
    let pairs = pred
        .voxels()
        .iter()
        .zip(gt.voxels())
        .zip(channel)
        .filter_map(|((&p, &g), &conf)| {
            let selected = match selection {
                VoxelSelection::PredictedClass => p == class_id,
                VoxelSelection::ClassChannelAll => true,
            };
            selected.then_some((conf as f64, g == class_id))
        });
    reliability_from_pairs(pairs, bins, class_id, selection)
}

#[derive(Debug, Clone, Serialize)]
pub struct ClassEce {
    pub class_id: u8,
    pub class_name: String,
    pub total: usize,
    pub ece_weighted: Option<f64>,
    pub ece_paper: Option<f64>,
}

/// Per-class ECE over all non-background classes plus the mean across
/// classes with defined ECE.
#[derive(Debug, Clone, Serialize)]
pub struct EceReport {
    pub bins: usize,
    pub selection: VoxelSelection,
    pub per_class: Vec<ClassEce>,
    pub mean_weighted: Option<f64>,
    pub mean_paper: Option<f64>,
}

impl EceReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class_id,class_name,n,ece_weighted,ece_paper\n");
        let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for c in &self.per_class {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                c.class_id,
                c.class_name,
                c.total,
                fmt(c.ece_weighted),
                fmt(c.ece_paper)
            ));
        }
        out.push_str(&format!(
            ",mean,,{},{}\n",
            fmt(self.mean_weighted),
            fmt(self.mean_paper)
        ));
        out
    }
}

pub fn ece_report(
    mean_prob: &ProbVolume,
    pred: &LabelVolume,
    gt: &LabelVolume,
    bins: usize,
    selection: VoxelSelection,
) -> Result<EceReport> {
    let meta = mean_prob.meta();
    let mut per_class = Vec::new();
    for class_id in 1..meta.num_classes() as u8 {
        let table = reliability(mean_prob, pred, gt, class_id, bins, selection)?;
        per_class.push(ClassEce {
            class_id,
            class_name: meta.class_names()[class_id as usize].clone(),
            total: table.total,
            ece_weighted: table.ece_weighted,
            ece_paper: table.ece_paper,
        });
    }
    let mean_of = |take: fn(&ClassEce) -> Option<f64>| {
        let vals: Vec<f64> = per_class.iter().filter_map(take).collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    };
    Ok(EceReport {
        bins,
        selection,
        mean_weighted: mean_of(|c| c.ece_weighted),
        mean_paper: mean_of(|c| c.ece_paper),
        per_class,
    })
}

/// Reliability tables for all non-background classes as one CSV (for
/// reliability-diagram plotting).
pub fn reliability_csv(tables: &[ReliabilityTable]) -> String {
    let mut out = String::from("class_id,bin_lo,bin_hi,count,mean_conf,accuracy\n");
    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for t in tables {
        for b in &t.bins {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                t.class_id,
                b.lo,
                b.hi,
                b.count,
                fmt(b.mean_conf),
                fmt(b.accuracy)
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::GridMeta;

    fn pool_table(pairs: &[(f64, bool)], bins: usize) -> ReliabilityTable {
        reliability_from_pairs(pairs.iter().copied(), bins, 1, VoxelSelection::PredictedClass)
            .unwrap()
    }

    #[test]
    fn perfect_calibration_gives_zero_ece() {
        let pairs: Vec<(f64, bool)> = (0..100).map(|_| (1.0, true)).collect();
        let t = pool_table(&pairs, 10);
        assert_eq!(t.ece_weighted, Some(0.0));
        assert_eq!(t.ece_paper, Some(0.0));
        for b in &t.bins {
            if b.count > 0 {
                assert_eq!(b.accuracy, b.mean_conf);
            }
        }
    }

    #[test]
    fn seventy_percent_bin_illustration() {
        // 100 voxels at confidence 0.7, 70 correct: acc = conf = 0.70, ECE 0
        let pairs: Vec<(f64, bool)> = (0..100).map(|i| (0.7, i < 70)).collect();
        let t = pool_table(&pairs, 10);
        let bin = t.bins.iter().find(|b| b.count > 0).unwrap();
        assert_eq!(bin.count, 100);
        assert!((bin.mean_conf.unwrap() - 0.7).abs() < 1e-12);
        assert!((bin.accuracy.unwrap() - 0.7).abs() < 1e-12);
        assert!(t.ece_weighted.unwrap() < 1e-12);
        assert!(t.ece_paper.unwrap() < 1e-12);
    }

    #[test]
    fn hand_computed_two_bin_ece() {
        // 50 voxels at 0.95 all correct, 50 at 0.55 none correct:
        // ece_weighted = 0.5*0.05 + 0.5*0.55 = 0.30
        let mut pairs = vec![(0.95, true); 50];
        pairs.extend(vec![(0.55, false); 50]);
        let t = pool_table(&pairs, 10);
        assert!((t.ece_weighted.unwrap() - 0.30).abs() < 1e-12);
        // ece_paper averages the two gaps: (0.05 + 0.55)/2 = 0.30 here
        assert!((t.ece_paper.unwrap() - 0.30).abs() < 1e-12);
    }

    #[test]
    fn empty_pool_is_flagged_undefined() {
        let t = pool_table(&[], 10);
        assert_eq!(t.total, 0);
        assert_eq!(t.ece_weighted, None);
        assert_eq!(t.ece_paper, None);
        assert!(t.bins.iter().all(|b| b.count == 0));
    }

    #[test]
    fn bin_edges_are_half_open_with_last_closed() {
        let pairs = [(0.0, true), (0.0999, true), (0.1, true), (0.95, true), (1.0, true)];
        let t = pool_table(&pairs, 10);
        assert_eq!(t.bins[0].count, 2);
        assert_eq!(t.bins[1].count, 1);
        assert_eq!(t.bins[9].count, 2); // 0.95 and the closed 1.0
    }

    #[test]
    fn weighted_ece_invariant_to_splitting_identical_bins() {
        // same pairs binned at B and 2B where each sub-bin keeps identical
        // accuracy and mean confidence
        let mut pairs = vec![];
        for _ in 0..40 {
            pairs.push((0.325, true));
            pairs.push((0.325, false));
        }
        let coarse = pool_table(&pairs, 2); // bin [0, 0.5)
        let fine = pool_table(&pairs, 4); // bin [0.25, 0.5)
        assert!((coarse.ece_weighted.unwrap() - fine.ece_weighted.unwrap()).abs() < 1e-12);
    }

    #[test]
    fn ece_bounded_in_unit_interval() {
        let pairs = [(1.0, false), (1.0, false), (0.0, true)];
        let t = pool_table(&pairs, 10);
        let w = t.ece_weighted.unwrap();
        let p = t.ece_paper.unwrap();
        assert!((0.0..=1.0).contains(&w));
        assert!((0.0..=1.0).contains(&p));
    }

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn volume_reliability_selections() {
        let meta = GridMeta::new([4, 1, 1], [1.0; 3], [0.0; 3], names(2)).unwrap();
        let mean = ProbVolume::new(
            meta.clone(),
            vec![vec![0.9, 0.2, 0.4, 0.1], vec![0.1, 0.8, 0.6, 0.9]],
        )
        .unwrap();
        let pred = LabelVolume::new(meta.clone(), vec![0, 1, 1, 1]).unwrap();
        let gt = LabelVolume::new(meta, vec![0, 1, 0, 1]).unwrap();

        let t = reliability(&mean, &pred, &gt, 1, 10, VoxelSelection::PredictedClass).unwrap();
        assert_eq!(t.total, 3); // voxels 1, 2, 3
        let t_all = reliability(&mean, &pred, &gt, 1, 10, VoxelSelection::ClassChannelAll).unwrap();
        assert_eq!(t_all.total, 4);

        // predicted-class: confs 0.8 (correct), 0.6 (wrong), 0.9 (correct)
        let b6 = &t.bins[6];
        assert_eq!(b6.count, 1);
        assert_eq!(b6.accuracy, Some(0.0));
    }

    #[test]
    fn report_perfect_prediction_is_all_zero() {
        let meta = GridMeta::new([2, 1, 1], [1.0; 3], [0.0; 3], names(3)).unwrap();
        let mean = ProbVolume::new(
            meta.clone(),
            vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]],
        )
        .unwrap();
        let pred = LabelVolume::new(meta.clone(), vec![1, 2]).unwrap();
        let rep = ece_report(&mean, &pred, &pred, 10, VoxelSelection::PredictedClass).unwrap();
        assert_eq!(rep.mean_weighted, Some(0.0));
        assert_eq!(rep.mean_paper, Some(0.0));
        assert_eq!(rep.per_class.len(), 2);
    }

    #[test]
    fn report_flags_classes_without_voxels() {
        let meta = GridMeta::new([2, 1, 1], [1.0; 3], [0.0; 3], names(3)).unwrap();
        let mean = ProbVolume::new(
            meta.clone(),
            vec![vec![0.1, 0.1], vec![0.9, 0.9], vec![0.0, 0.0]],
        )
        .unwrap();
        let pred = LabelVolume::new(meta.clone(), vec![1, 1]).unwrap();
        let gt = LabelVolume::new(meta, vec![1, 1]).unwrap();
        let rep = ece_report(&mean, &pred, &gt, 10, VoxelSelection::PredictedClass).unwrap();
        assert_eq!(rep.per_class[1].ece_weighted, None); // class 2: no voxels
        assert_eq!(rep.mean_weighted, rep.per_class[0].ece_weighted);
    }
}
