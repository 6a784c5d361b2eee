//! Voxel-grid data model: grid metadata, label / probability / scalar volumes
//! and Monte-Carlo stacks.
//!
//! Voxel memory order is canonical throughout the crate: x fastest, then y,
//! then z, i.e. `index = i + nx * (j + ny * k)`.

use crate::error::{Result, UqError};

/// Per-voxel channel sums of a probability volume must stay within this
/// tolerance of 1. MC outputs stored as f32 accumulate rounding; stricter
/// tolerances reject legitimate data.
pub const PROB_SUM_TOL: f64 = 1e-3;

/// Geometry and class labelling of one voxel grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridMeta {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    class_names: Vec<String>,
}

impl GridMeta {
    pub fn new(
        dims: [usize; 3],
        spacing: [f64; 3],
        origin: [f64; 3],
        class_names: Vec<String>,
    ) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(UqError::Invariant(format!("all dims must be >= 1, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(UqError::Invariant(format!(
                "all spacing components must be finite and > 0, got {spacing:?}"
            )));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(UqError::Invariant(format!("origin must be finite, got {origin:?}")));
        }
        if class_names.is_empty() {
            return Err(UqError::Invariant("class_names must be non-empty".into()));
        }
        for (i, a) in class_names.iter().enumerate() {
            if class_names[..i].contains(a) {
                return Err(UqError::Invariant(format!("duplicate class name {a:?}")));
            }
        }
        if class_names.len() > u8::MAX as usize + 1 {
            return Err(UqError::Invariant(format!(
                "at most {} classes supported, got {}",
                u8::MAX as usize + 1,
                class_names.len()
            )));
        }
        Ok(GridMeta {
            dims,
            spacing,
            origin,
            class_names,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    /// Number of classes C; index 0 is background.
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn voxel_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    /// Canonical linear index: x fastest, then y, then z.
    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    /// Inverse of [`GridMeta::index`].
    #[inline]
    pub fn coords(&self, idx: usize) -> (usize, usize, usize) {
        let i = idx % self.dims[0];
        let j = (idx / self.dims[0]) % self.dims[1];
        let k = idx / (self.dims[0] * self.dims[1]);
        (i, j, k)
    }

    /// Same grid geometry and class labelling. Operations that combine two
    /// volumes require this.
    pub fn ensure_same(&self, other: &GridMeta, what: &str) -> Result<()> {
        if self != other {
            return Err(UqError::MetaMismatch(format!(
                "{what}: dims {:?} vs {:?}, spacing {:?} vs {:?}",
                self.dims, other.dims, self.spacing, other.spacing
            )));
        }
        Ok(())
    }

    /// Derive a meta with the same grid geometry but different class names
    /// (used when re-labelling, e.g. region masks).
    pub fn with_class_names(&self, class_names: Vec<String>) -> Result<GridMeta> {
        GridMeta::new(self.dims, self.spacing, self.origin, class_names)
    }

    pub(crate) fn with_geometry(
        &self,
        dims: [usize; 3],
        spacing: [f64; 3],
        origin: [f64; 3],
    ) -> Result<GridMeta> {
        GridMeta::new(dims, spacing, origin, self.class_names.clone())
    }
}

/// Per-voxel class ids. Every voxel value is < C.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    meta: GridMeta,
    voxels: Vec<u8>,
}

impl LabelVolume {
    pub fn new(meta: GridMeta, voxels: Vec<u8>) -> Result<Self> {
        if voxels.len() != meta.voxel_count() {
            return Err(UqError::Invariant(format!(
                "label payload has {} voxels, dims {:?} require {}",
                voxels.len(),
                meta.dims(),
                meta.voxel_count()
            )));
        }
        let c = meta.num_classes() as u8;
        if let Some(pos) = voxels.iter().position(|&v| v as usize >= meta.num_classes()) {
            let (i, j, k) = meta.coords(pos);
            return Err(UqError::Invariant(format!(
                "label value {} at voxel ({i},{j},{k}) is not < C={c}",
                voxels[pos]
            )));
        }
        Ok(LabelVolume { meta, voxels })
    }

    pub fn meta(&self) -> &GridMeta {
        &self.meta
    }

    pub fn voxels(&self) -> &[u8] {
        &self.voxels
    }

    /// Binary mask of one class.
    pub fn class_mask(&self, class_id: u8) -> Vec<bool> {
        self.voxels.iter().map(|&v| v == class_id).collect()
    }
}

/// C probability channels over one grid; per-voxel channel sums are 1 within
/// [`PROB_SUM_TOL`] and every value lies in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVolume {
    meta: GridMeta,
    channels: Vec<Vec<f32>>,
}

impl ProbVolume {
    pub fn new(meta: GridMeta, channels: Vec<Vec<f32>>) -> Result<Self> {
        let c = meta.num_classes();
        let n = meta.voxel_count();
        if channels.len() != c {
            return Err(UqError::Invariant(format!(
                "expected {c} probability channels, got {}",
                channels.len()
            )));
        }
        for (ci, ch) in channels.iter().enumerate() {
            if ch.len() != n {
                return Err(UqError::Invariant(format!(
                    "channel {ci} has {} voxels, dims {:?} require {n}",
                    ch.len(),
                    meta.dims()
                )));
            }
            if let Some(pos) = ch.iter().position(|v| !(*v >= 0.0 && *v <= 1.0)) {
                let (i, j, k) = meta.coords(pos);
                return Err(UqError::Invariant(format!(
                    "probability {} in channel {ci} at voxel ({i},{j},{k}) is outside [0, 1]",
                    ch[pos]
                )));
            }
        }
        for idx in 0..n {
            let mut sum = 0.0f64;
            for ch in &channels {
                sum += ch[idx] as f64;
            }
            if (sum - 1.0).abs() > PROB_SUM_TOL {
                let (i, j, k) = meta.coords(idx);
                return Err(UqError::Invariant(format!(
                    "channel sum {sum} at voxel ({i},{j},{k}) is outside 1 +/- {PROB_SUM_TOL}"
                )));
            }
        }
        Ok(ProbVolume { meta, channels })
    }

    pub fn meta(&self) -> &GridMeta {
        &self.meta
    }

    pub fn channels(&self) -> &[Vec<f32>] {
        &self.channels
    }

    pub fn channel(&self, class_id: u8) -> &[f32] {
        &self.channels[class_id as usize]
    }
}

/// One real value per voxel; all values finite. Houses CT grids and entropy
/// maps alike.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarMap {
    meta: GridMeta,
    values: Vec<f32>,
}

impl ScalarMap {
    pub fn new(meta: GridMeta, values: Vec<f32>) -> Result<Self> {
        if values.len() != meta.voxel_count() {
            return Err(UqError::Invariant(format!(
                "scalar payload has {} voxels, dims {:?} require {}",
                values.len(),
                meta.dims(),
                meta.voxel_count()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            let (i, j, k) = meta.coords(pos);
            return Err(UqError::Invariant(format!(
                "non-finite value {} at voxel ({i},{j},{k})",
                values[pos]
            )));
        }
        Ok(ScalarMap { meta, values })
    }

    pub fn meta(&self) -> &GridMeta {
        &self.meta
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }
}

/// M Monte-Carlo probability samples sharing one grid.
#[derive(Debug, Clone, PartialEq)]
pub struct McStack {
    meta: GridMeta,
    samples: Vec<ProbVolume>,
}

impl McStack {
    pub fn new(meta: GridMeta, samples: Vec<ProbVolume>) -> Result<Self> {
        if samples.is_empty() {
            return Err(UqError::Invariant("stack needs at least one sample (M >= 1)".into()));
        }
        for (m, s) in samples.iter().enumerate() {
            if *s.meta() != meta {
                return Err(UqError::MetaMismatch(format!(
                    "stack sample {m} does not share the stack grid meta"
                )));
            }
        }
        Ok(McStack { meta, samples })
    }

    pub fn meta(&self) -> &GridMeta {
        &self.meta
    }

    pub fn samples(&self) -> &[ProbVolume] {
        &self.samples
    }

    /// M, the number of Monte-Carlo samples.
    pub fn num_samples(&self) -> usize {
        self.samples.len()
    }
}

/// Any volume the bundle format can hold.
#[derive(Debug, Clone, PartialEq)]
pub enum Bundle {
    Label(LabelVolume),
    Prob(ProbVolume),
    Scalar(ScalarMap),
    Stack(McStack),
}

impl Bundle {
    pub fn meta(&self) -> &GridMeta {
        match self {
            Bundle::Label(v) => v.meta(),
            Bundle::Prob(v) => v.meta(),
            Bundle::Scalar(v) => v.meta(),
            Bundle::Stack(v) => v.meta(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Bundle::Label(_) => "label",
            Bundle::Prob(_) => "prob",
            Bundle::Scalar(_) => "scalar",
            Bundle::Stack(_) => "stack",
        }
    }

    pub fn into_label(self) -> Result<LabelVolume> {
        match self {
            Bundle::Label(v) => Ok(v),
            other => Err(UqError::InvalidArg(format!(
                "expected a label bundle, got kind {:?}",
                other.kind()
            ))),
        }
    }

    pub fn into_prob(self) -> Result<ProbVolume> {
        match self {
            Bundle::Prob(v) => Ok(v),
            other => Err(UqError::InvalidArg(format!(
                "expected a prob bundle, got kind {:?}",
                other.kind()
            ))),
        }
    }

    pub fn into_scalar(self) -> Result<ScalarMap> {
        match self {
            Bundle::Scalar(v) => Ok(v),
            other => Err(UqError::InvalidArg(format!(
                "expected a scalar bundle, got kind {:?}",
                other.kind()
            ))),
        }
    }

    pub fn into_stack(self) -> Result<McStack> {
        match self {
            Bundle::Stack(v) => Ok(v),
            other => Err(UqError::InvalidArg(format!(
                "expected a stack bundle, got kind {:?}",
                other.kind()
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn meta_rejects_degenerate_grids() {
        assert!(GridMeta::new([0, 2, 2], [1.0; 3], [0.0; 3], names(2)).is_err());
        assert!(GridMeta::new([2, 2, 2], [1.0, 0.0, 1.0], [0.0; 3], names(2)).is_err());
        assert!(GridMeta::new([2, 2, 2], [1.0, -0.5, 1.0], [0.0; 3], names(2)).is_err());
        assert!(GridMeta::new([2, 2, 2], [1.0; 3], [0.0; 3], vec![]).is_err());
        assert!(GridMeta::new(
            [2, 2, 2],
            [1.0; 3],
            [0.0; 3],
            vec!["a".into(), "a".into()]
        )
        .is_err());
    }

    #[test]
    fn index_order_is_x_fastest() {
        let m = GridMeta::new([3, 4, 5], [1.0; 3], [0.0; 3], names(2)).unwrap();
        assert_eq!(m.index(0, 0, 0), 0);
        assert_eq!(m.index(1, 0, 0), 1);
        assert_eq!(m.index(0, 1, 0), 3);
        assert_eq!(m.index(0, 0, 1), 12);
        assert_eq!(m.index(2, 3, 4), 2 + 3 * (3 + 4 * 4));
        for idx in 0..m.voxel_count() {
            let (i, j, k) = m.coords(idx);
            assert_eq!(m.index(i, j, k), idx);
        }
    }

    #[test]
    fn label_rejects_out_of_range_class() {
        let m = GridMeta::new([2, 1, 1], [1.0; 3], [0.0; 3], names(2)).unwrap();
        let err = LabelVolume::new(m, vec![0, 2]).unwrap_err();
        assert!(err.to_string().contains("(1,0,0)"), "{err}");
    }

    #[test]
    fn prob_rejects_bad_channel_sum_naming_voxel() {
        let m = GridMeta::new([2, 1, 1], [1.0; 3], [0.0; 3], names(2)).unwrap();
        let err = ProbVolume::new(m, vec![vec![0.5, 0.5], vec![0.5, 0.3]]).unwrap_err();
        assert!(err.to_string().contains("(1,0,0)"), "{err}");
    }

    #[test]
    fn prob_rejects_values_outside_unit_interval() {
        let m = GridMeta::new([1, 1, 1], [1.0; 3], [0.0; 3], names(2)).unwrap();
        assert!(ProbVolume::new(m.clone(), vec![vec![1.2], vec![-0.2]]).is_err());
        assert!(ProbVolume::new(m, vec![vec![f32::NAN], vec![0.5]]).is_err());
    }

    #[test]
    fn scalar_rejects_nan() {
        let m = GridMeta::new([2, 1, 1], [1.0; 3], [0.0; 3], names(1)).unwrap();
        let err = ScalarMap::new(m, vec![1.0, f32::NAN]).unwrap_err();
        assert!(err.to_string().contains("(1,0,0)"), "{err}");
    }

    #[test]
    fn stack_requires_shared_meta() {
        let m1 = GridMeta::new([1, 1, 1], [1.0; 3], [0.0; 3], names(2)).unwrap();
        let m2 = GridMeta::new([1, 1, 1], [2.0, 1.0, 1.0], [0.0; 3], names(2)).unwrap();
        let p1 = ProbVolume::new(m1.clone(), vec![vec![0.4], vec![0.6]]).unwrap();
        let p2 = ProbVolume::new(m2, vec![vec![0.4], vec![0.6]]).unwrap();
        assert!(McStack::new(m1.clone(), vec![p1.clone(), p2]).is_err());
        assert!(McStack::new(m1.clone(), vec![]).is_err());
        assert!(McStack::new(m1, vec![p1]).is_ok());
    }
}
