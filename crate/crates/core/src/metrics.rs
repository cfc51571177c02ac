//! Overlap and contour-distance scores between label volumes.

use crate::error::{Error, Result};
use crate::volume::{LabelVolume, Lattice, Point3};

fn same_lattice(a: &LabelVolume, b: &LabelVolume) -> Result<()> {
    if a.lattice != b.lattice {
        return Err(Error::Evaluation(format!(
            "lattice mismatch: {:?} vs {:?}",
            a.lattice.dims, b.lattice.dims
        )));
    }
    Ok(())
}

/// `2|A ∩ B| / (|A| + |B|)` for label `k`; 1 when both sets are empty.
pub fn dice(seg: &LabelVolume, truth: &LabelVolume, k: u16) -> Result<f64> {
    same_lattice(seg, truth)?;
    let (mut a, mut b, mut both) = (0usize, 0usize, 0usize);
    for (&s, &t) in seg.labels.iter().zip(&truth.labels) {
        let (s, t) = (s == k, t == k);
        a += s as usize;
        b += t as usize;
        both += (s && t) as usize;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (a + b) as f64)
}

/// Centers of voxels labeled `k` with at least one 6-neighbor that is not `k`.
/// Neighbors outside the lattice count as not `k`.
pub fn boundary_points(vol: &LabelVolume, k: u16) -> Vec<Point3> {
    let l = &vol.lattice;
    let d = l.dims;
    let mut out = Vec::new();
    for x in 0..l.len() {
        if vol.labels[x] != k {
            continue;
        }
        let ijk = l.ijk(x);
        let edge = (0..3).any(|a| {
            [-1i64, 1].iter().any(|&s| {
                let q = ijk[a] as i64 + s;
                if q < 0 || q >= d[a] as i64 {
                    return true;
                }
                let mut n = ijk;
                n[a] = q as usize;
                vol.labels[l.index(n[0], n[1], n[2])] != k
            })
        });
        if edge {
            out.push(l.center(x));
        }
    }
    out
}

fn dist2(a: &Point3, b: &Point3) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum()
}

/// Static 3-d tree for nearest-neighbor distance queries.
pub struct KdTree {
    points: Vec<Point3>,
    // Node n covers points[lo..hi] with its splitting point at the median.
    axes: Vec<u8>,
}

impl KdTree {
    pub fn new(mut points: Vec<Point3>) -> Self {
        let mut axes = vec![0u8; points.len()];
        Self::build(&mut points, &mut axes, 0);
        Self { points, axes }
    }

    fn build(pts: &mut [Point3], axes: &mut [u8], depth: usize) {
        if pts.len() <= 1 {
            if let Some(a) = axes.first_mut() {
                *a = (depth % 3) as u8;
            }
            return;
        }
        // Split on the axis of largest spread.
        let axis = (0..3)
            .max_by(|&a, &b| {
                let spread = |ax: usize| {
                    let (lo, hi) = pts
                        .iter()
                        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p[ax]), hi.max(p[ax])));
                    hi - lo
                };
                spread(a).total_cmp(&spread(b))
            })
            .unwrap();
        let mid = pts.len() / 2;
        pts.select_nth_unstable_by(mid, |p, q| p[axis].total_cmp(&q[axis]));
        axes[mid] = axis as u8;
        let (left, rest) = pts.split_at_mut(mid);
        let (la, ra) = axes.split_at_mut(mid);
        Self::build(left, la, depth + 1);
        Self::build(&mut rest[1..], &mut ra[1..], depth + 1);
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Euclidean distance from `q` to the nearest stored point.
    pub fn nearest_distance(&self, q: &Point3) -> f64 {
        let mut best = f64::INFINITY;
        self.search(0, self.points.len(), q, &mut best);
        best.sqrt()
    }

    fn search(&self, lo: usize, hi: usize, q: &Point3, best: &mut f64) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let p = &self.points[mid];
        *best = best.min(dist2(p, q));
        if hi - lo == 1 {
            return;
        }
        let axis = self.axes[mid] as usize;
        let diff = q[axis] - p[axis];
        let (near, far) = if diff < 0.0 { ((lo, mid), (mid + 1, hi)) } else { ((mid + 1, hi), (lo, mid)) };
        self.search(near.0, near.1, q, best);
        if diff * diff < *best {
            self.search(far.0, far.1, q, best);
        }
    }
}

fn directed_mean(from: &[Point3], to: &KdTree) -> f64 {
    from.iter().map(|p| to.nearest_distance(p)).sum::<f64>() / from.len() as f64
}

/// Average contour distance (mm) for label `k`: the mean of the two directed
/// mean nearest-boundary distances.
pub fn acd(seg: &LabelVolume, truth: &LabelVolume, k: u16) -> Result<f64> {
    same_lattice(seg, truth)?;
    let a = boundary_points(seg, k);
    let b = boundary_points(truth, k);
    if a.is_empty() {
        return Err(Error::Evaluation(format!("label {k} has no boundary in the segmentation")));
    }
    if b.is_empty() {
        return Err(Error::Evaluation(format!("label {k} has no boundary in the reference")));
    }
    let ta = KdTree::new(a.clone());
    let tb = KdTree::new(b.clone());
    Ok(0.5 * (directed_mean(&a, &tb) + directed_mean(&b, &ta)))
}

/// Mean and sample standard deviation (0 for fewer than two values).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let m = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (m, 0.0);
    }
    let v = values.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    (m, v.sqrt())
}

/// Convenience for tests and tools: a label volume on `lattice` from a closure over voxel indices.
pub fn label_volume_from_fn(lattice: &Lattice, mut f: impl FnMut([usize; 3]) -> u16) -> LabelVolume {
    let labels = (0..lattice.len()).map(|x| f(lattice.ijk(x))).collect();
    LabelVolume::new(lattice.clone(), labels).expect("sizes match")
}
