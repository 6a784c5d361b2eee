//! Synthetic ground truth, predictions and MC stacks with controllable
//! calibration, uncertainty placement and error geometry. Stands in for
//! trained networks in tests and cohort runs.
//!
//! Construction per voxel: a winner class carries confidence `conf` and the
//! remaining mass spreads evenly over the other classes. Low uncertainty
//! emits `conf = 1.0` (zero entropy), high uncertainty `conf = 0.55`. In
//! calibrated mode a voxel stays correct with probability equal to its
//! confidence; over/underconfidence shifts that accuracy by delta. Flipped
//! voxels get a uniformly random wrong winner. MC jitter is applied to the
//! winner probability in antithetic pairs, so the stack mean recovers the
//! intended confidence and its argmax always equals the returned prediction.
//!
//! Everything derives from one ChaCha8 stream seeded from `seed`: identical
//! spec and seed give bit-identical outputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, UqError};
use crate::volume::{GridMeta, LabelVolume, McStack, ProbVolume};

/// Winner confidence emitted for low-uncertainty voxels.
pub const CONF_CERTAIN: f64 = 1.0;
/// Winner confidence emitted for high-uncertainty voxels.
pub const CONF_UNCERTAIN: f64 = 0.55;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Geometry {
    Box,
    Ellipsoid,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub class_id: u8,
    pub geometry: Geometry,
    /// Center in voxel-index coordinates.
    pub center: [f64; 3],
    /// Half-extents (box) or semi-axes (ellipsoid) in voxels.
    pub radii: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    /// Shift the predicted mask of `class_id` by `magnitude_voxels` along +x.
    BoundaryShift,
    /// Predict `class_id` inside a `magnitude x magnitude x 1` box at
    /// `location`.
    BlobFp,
    /// Predict background inside a `magnitude x magnitude x 1` box at
    /// `location`.
    BlobFn,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorSpec {
    pub kind: ErrorKind,
    pub magnitude_voxels: usize,
    /// Blob center in voxel indices; unused by boundary shifts.
    #[serde(default)]
    pub location: [i64; 3],
    #[serde(default)]
    pub class_id: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "delta")]
pub enum CalibMode {
    Calibrated,
    /// Accuracy = confidence - delta.
    Overconfident(f64),
    /// Accuracy = confidence + delta (clamped).
    Underconfident(f64),
}

impl Default for CalibMode {
    fn default() -> Self {
        CalibMode::Calibrated
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UncLevel {
    High,
    Low,
}

impl UncLevel {
    fn confidence(self) -> f64 {
        match self {
            UncLevel::High => CONF_UNCERTAIN,
            UncLevel::Low => CONF_CERTAIN,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncSpec {
    pub on_errors: UncLevel,
    pub on_correct: UncLevel,
    /// Symmetric jitter half-width applied to the winner probability per
    /// MC sample.
    pub jitter: f64,
    /// M, the number of MC samples.
    pub samples: usize,
}

impl Default for UncSpec {
    fn default() -> Self {
        UncSpec {
            on_errors: UncLevel::High,
            on_correct: UncLevel::Low,
            jitter: 0.0,
            samples: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    #[serde(default)]
    pub origin: [f64; 3],
    /// C, including background as class 0.
    pub classes: usize,
    pub shapes: Vec<ShapeSpec>,
    #[serde(default)]
    pub errors: Vec<ErrorSpec>,
    #[serde(default)]
    pub calibration: CalibMode,
    #[serde(default)]
    pub uncertainty: UncSpec,
    pub seed: u64,
}

impl SynthSpec {
    fn grid_meta(&self) -> Result<GridMeta> {
        if self.classes < 2 {
            return Err(UqError::InvalidArg("synth needs classes >= 2".into()));
        }
        let mut names = vec!["background".to_string()];
        names.extend((1..self.classes).map(|c| format!("class_{c}")));
        GridMeta::new(self.dims, self.spacing, self.origin, names)
    }

    fn validate(&self) -> Result<()> {
        match self.calibration {
            CalibMode::Overconfident(d) | CalibMode::Underconfident(d) => {
                if !(0.0..0.5).contains(&d) {
                    return Err(UqError::InvalidArg(format!("calibration delta must be in [0, 0.5), got {d}")));
                }
            }
            CalibMode::Calibrated => {}
        }
        if !(0.0..=0.5).contains(&self.uncertainty.jitter) {
            return Err(UqError::InvalidArg(format!(
                "jitter must be in [0, 0.5], got {}",
                self.uncertainty.jitter
            )));
        }
        if self.uncertainty.samples == 0 {
            return Err(UqError::InvalidArg("M must be >= 1".into()));
        }
        for (si, s) in self.shapes.iter().enumerate() {
            if s.class_id as usize >= self.classes {
                return Err(UqError::InvalidArg(format!(
                    "shape {si}: class id {} out of range (C = {})",
                    s.class_id, self.classes
                )));
            }
            for a in 0..3 {
                if !(s.radii[a] >= 0.0)
                    || s.center[a] - s.radii[a] < -0.5
                    || s.center[a] + s.radii[a] > self.dims[a] as f64 - 0.5
                {
                    return Err(UqError::InvalidArg(format!(
                        "shape {si} does not fit inside dims {:?}",
                        self.dims
                    )));
                }
            }
        }
        for (ei, e) in self.errors.iter().enumerate() {
            if e.class_id as usize >= self.classes {
                return Err(UqError::InvalidArg(format!(
                    "error {ei}: class id {} out of range (C = {})",
                    e.class_id, self.classes
                )));
            }
            if e.magnitude_voxels == 0 {
                return Err(UqError::InvalidArg(format!("error {ei}: magnitude must be >= 1")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub gt: LabelVolume,
    pub stack: McStack,
    pub pred_truth: LabelVolume,
}

fn rasterize(meta: &GridMeta, shapes: &[ShapeSpec]) -> Vec<u8> {
    let [nx, ny, nz] = meta.dims();
    let mut gt = vec![0u8; meta.voxel_count()];
    for shape in shapes {
        let [cx, cy, cz] = shape.center;
        let [rx, ry, rz] = shape.radii;
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let (dx, dy, dz) = (i as f64 - cx, j as f64 - cy, k as f64 - cz);
                    let inside = match shape.geometry {
                        Geometry::Box => dx.abs() <= rx && dy.abs() <= ry && dz.abs() <= rz,
                        Geometry::Ellipsoid => {
                            let sq = |d: f64, r: f64| if r == 0.0 { (d != 0.0) as u8 as f64 * 2.0 } else { (d / r) * (d / r) };
                            sq(dx, rx) + sq(dy, ry) + sq(dz, rz) <= 1.0
                        }
                    };
                    if inside {
                        gt[meta.index(i, j, k)] = shape.class_id;
                    }
                }
            }
        }
    }
    gt
}

/// The voxel range a blob covers, clamped to the grid. Errors when the blob
/// lies entirely outside.
fn blob_range(meta: &GridMeta, e: &ErrorSpec) -> Result<([usize; 3], [usize; 3])> {
    let m = e.magnitude_voxels;
    let extents = [m, m, 1];
    let dims = meta.dims();
    let mut start = [0usize; 3];
    let mut end = [0usize; 3];
    for a in 0..3 {
        let s0 = e.location[a] - (extents[a] / 2) as i64;
        let e0 = s0 + extents[a] as i64;
        let s = s0.max(0);
        let en = e0.min(dims[a] as i64);
        if s >= en {
            return Err(UqError::InvalidArg(format!(
                "error blob at {:?} (size {m}x{m}x1) lies outside grid {dims:?}",
                e.location
            )));
        }
        start[a] = s as usize;
        end[a] = en as usize;
    }
    Ok((start, end))
}

fn apply_errors(meta: &GridMeta, gt: &[u8], errors: &[ErrorSpec]) -> Result<Vec<u8>> {
    let [nx, ny, nz] = meta.dims();
    let mut pred = gt.to_vec();
    for e in errors {
        match e.kind {
            ErrorKind::BlobFp => {
                let (start, end) = blob_range(meta, e)?;
                for k in start[2]..end[2] {
                    for j in start[1]..end[1] {
                        for i in start[0]..end[0] {
                            pred[meta.index(i, j, k)] = e.class_id;
                        }
                    }
                }
            }
            ErrorKind::BlobFn => {
                let (start, end) = blob_range(meta, e)?;
                for k in start[2]..end[2] {
                    for j in start[1]..end[1] {
                        for i in start[0]..end[0] {
                            pred[meta.index(i, j, k)] = 0;
                        }
                    }
                }
            }
            ErrorKind::BoundaryShift => {
                let shift = e.magnitude_voxels;
                let mut shifted = pred.clone();
                for k in 0..nz {
                    for j in 0..ny {
                        for i in 0..nx {
                            let idx = meta.index(i, j, k);
                            if pred[idx] == e.class_id {
                                shifted[idx] = 0;
                            }
                        }
                    }
                }
                for k in 0..nz {
                    for j in 0..ny {
                        for i in 0..nx {
                            if pred[meta.index(i, j, k)] == e.class_id && i + shift < nx {
                                shifted[meta.index(i + shift, j, k)] = e.class_id;
                            }
                        }
                    }
                }
                pred = shifted;
            }
        }
    }
    Ok(pred)
}

fn target_accuracy(conf: f64, mode: CalibMode) -> f64 {
    match mode {
        CalibMode::Calibrated => conf,
        CalibMode::Overconfident(d) => (conf - d).clamp(0.0, 1.0),
        CalibMode::Underconfident(d) => (conf + d).clamp(0.0, 1.0),
    }
}

/// Generate ground truth, prediction and MC stack from a spec. Identical
/// spec and seed yield bit-identical outputs.
pub fn generate(spec: &SynthSpec) -> Result<SynthOutput> {
    spec.validate()?;
    let meta = spec.grid_meta()?;
    let n = meta.voxel_count();
    let c = spec.classes;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let gt_vox = rasterize(&meta, &spec.shapes);
    let structured = apply_errors(&meta, &gt_vox, &spec.errors)?;

    // winner class and confidence per voxel
    let mut winner = vec![0u8; n];
    let mut conf = vec![0.0f64; n];
    for idx in 0..n {
        let is_err = structured[idx] != gt_vox[idx];
        let level = if is_err {
            spec.uncertainty.on_errors
        } else {
            spec.uncertainty.on_correct
        };
        let cv = level.confidence();
        conf[idx] = cv;
        if is_err {
            winner[idx] = structured[idx];
            continue;
        }
        let acc = target_accuracy(cv, spec.calibration);
        if rng.random::<f64>() < acc {
            winner[idx] = gt_vox[idx];
        } else {
            // uniformly random wrong class
            let w = rng.random_range(0..c - 1) as u8;
            winner[idx] = if w >= gt_vox[idx] { w + 1 } else { w };
        }
    }

    // MC samples; jitter in antithetic pairs keeps the stack mean at conf
    // (up to clamping at 1) and its argmax at the winner class.
    let m = spec.uncertainty.samples;
    let eps = spec.uncertainty.jitter;
    let mut samples = Vec::with_capacity(m);
    let mut eta = vec![0.0f64; n];
    for s in 0..m {
        let pair_lead = s % 2 == 0;
        if pair_lead {
            if eps > 0.0 && s + 1 < m {
                for e in eta.iter_mut() {
                    *e = eps * (2.0 * rng.random::<f64>() - 1.0);
                }
            } else {
                eta.iter_mut().for_each(|e| *e = 0.0);
            }
        }
        let mut channels = vec![vec![0.0f32; n]; c];
        for idx in 0..n {
            let sign = if pair_lead { 1.0 } else { -1.0 };
            let p = (conf[idx] + sign * eta[idx]).clamp(0.0, 1.0);
            let rest = ((1.0 - p) / (c - 1) as f64) as f32;
            for ch in channels.iter_mut() {
                ch[idx] = rest;
            }
            channels[winner[idx] as usize][idx] = p as f32;
        }
        samples.push(ProbVolume::new(meta.clone(), channels)?);
    }

    Ok(SynthOutput {
        gt: LabelVolume::new(meta.clone(), gt_vox)?,
        stack: McStack::new(meta.clone(), samples)?,
        pred_truth: LabelVolume::new(meta, winner)?,
    })
}

/// Confidence distribution for grid-free calibration pools.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "dist")]
pub enum ConfidenceDist {
    Constant { value: f64 },
    Uniform { lo: f64, hi: f64 },
}

/// Flat pool of (confidence, correct) pairs for fast calibration tests: in
/// calibrated mode the empirical accuracy per confidence bin converges to
/// the bin's mean confidence.
pub fn generate_voxel_pool(
    n: usize,
    dist: ConfidenceDist,
    mode: CalibMode,
    seed: u64,
) -> Result<Vec<(f64, bool)>> {
    if n == 0 {
        return Err(UqError::InvalidArg("pool needs n >= 1".into()));
    }
    match dist {
        ConfidenceDist::Constant { value } => {
            if !(0.0..=1.0).contains(&value) {
                return Err(UqError::InvalidArg(format!("confidence {value} outside [0, 1]")));
            }
        }
        ConfidenceDist::Uniform { lo, hi } => {
            if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
                return Err(UqError::InvalidArg(format!("bad uniform confidence range [{lo}, {hi}]")));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let conf = match dist {
            ConfidenceDist::Constant { value } => value,
            ConfidenceDist::Uniform { lo, hi } => lo + (hi - lo) * rng.random::<f64>(),
        };
        let acc = target_accuracy(conf, mode);
        out.push((conf, rng.random::<f64>() < acc));
    }
    Ok(out)
}
