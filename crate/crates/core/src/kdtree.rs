//! Nearest-neighbor search over voxel-index points with anisotropic spacing.
//!
//! Every distance is evaluated through [`dist2`], which works on index
//! differences scaled by spacing. A brute-force scan over the same point set
//! therefore returns bit-identical minima; the tree only prunes candidates.

/// Squared distance in mm between two voxel-index points.
#[inline]
pub(crate) fn dist2(a: [i32; 3], b: [i32; 3], spacing: [f64; 3]) -> f64 {
    let dx = (a[0] - b[0]) as f64 * spacing[0];
    let dy = (a[1] - b[1]) as f64 * spacing[1];
    let dz = (a[2] - b[2]) as f64 * spacing[2];
    dx * dx + dy * dy + dz * dz
}

pub(crate) struct VoxelKdTree {
    pts: Vec<[i32; 3]>,
    spacing: [f64; 3],
}

impl VoxelKdTree {
    /// Build over a non-empty point set.
    pub fn build(mut pts: Vec<[i32; 3]>, spacing: [f64; 3]) -> Self {
        assert!(!pts.is_empty(), "kd-tree needs at least one point");
        let len = pts.len();
        build_rec(&mut pts, 0, len, 0);
        VoxelKdTree { pts, spacing }
    }

    /// Squared distance from `q` to its nearest stored point.
    pub fn nearest_dist2(&self, q: [i32; 3]) -> f64 {
        let mut best = f64::INFINITY;
        self.search(q, 0, self.pts.len(), 0, &mut best);
        best
    }

    fn search(&self, q: [i32; 3], lo: usize, hi: usize, axis: usize, best: &mut f64) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let node = self.pts[mid];
        let d = dist2(q, node, self.spacing);
        if d < *best {
            *best = d;
        }
        let delta = (q[axis] - node[axis]) as f64 * self.spacing[axis];
        let next = (axis + 1) % 3;
        let (near, far) = if q[axis] < node[axis] {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.search(q, near.0, near.1, next, best);
        if delta * delta < *best {
            self.search(q, far.0, far.1, next, best);
        }
    }
}

fn build_rec(pts: &mut [[i32; 3]], lo: usize, hi: usize, axis: usize) {
    if hi - lo <= 1 {
        return;
    }
    let mid = lo + (hi - lo) / 2;
    pts[lo..hi].select_nth_unstable_by(mid - lo, |a, b| a[axis].cmp(&b[axis]));
    let next = (axis + 1) % 3;
    build_rec(pts, lo, mid, next);
    build_rec(pts, mid + 1, hi, next);
}
